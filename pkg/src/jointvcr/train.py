"""Training and evaluation for the joint answer/rationale pipeline.

Optimization follows a common recipe for this model family: Adam with
decoupled weight decay, global-norm gradient clipping, and a learning rate
halved whenever validation loss plateaus. Metrics are the three
multiple-choice accuracies:

* ``q_a``   - answer correct;
* ``qa_r``  - rationale correct when the gold answer is appended;
* ``q_ar``  - answer correct AND the rationale picked after appending the
  predicted answer is correct.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from . import relax
from .data import Instance, collate
from .model import (
    N_CHOICES,
    Batch,
    ModelConfig,
    answer_logits_for,
    answer_rep,
    bind,
    encode_responses,
    forward_joint,
    init_params,
    per_answer_rationale_logits,
    rationale_logits,
)

log = logging.getLogger(__name__)

CSV_HEADER = "epoch,q_a_acc,qa_r_acc,q_ar_acc,answer_loss,rationale_loss,lr"


class NumericalError(RuntimeError):
    """Training produced a non-finite loss."""


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 2e-4
    weight_decay: float = 1e-4
    epochs: int = 20
    batch_size: int = 32
    clip_norm: float = 1.0
    plateau_factor: float = 0.5
    plateau_patience: int = 2
    plateau_threshold: float = 1e-4
    plateau_cooldown: int = 1
    loss_ratio: tuple[float, float] = (1.0, 1.0)
    baseline_mode: str = "off"  # "off" | "conditioned"
    p_correct: float = 0.75
    wrong_only: bool = False
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    eval_batch_size: int = 500
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.clip_norm <= 0:
            raise ValueError("clip_norm must be positive")
        w_a, w_r = self.loss_ratio
        if w_a < 0 or w_r < 0 or (w_a == 0 and w_r == 0):
            raise ValueError("loss weights must be >= 0 and not both zero")
        if self.baseline_mode not in ("off", "conditioned"):
            raise ValueError(f"baseline_mode must be 'off' or 'conditioned', got {self.baseline_mode!r}")
        if not 0.0 <= self.p_correct <= 1.0:
            raise ValueError("p_correct must lie in [0, 1]")


@dataclass
class MetricsRow:
    epoch: int
    q_a_acc: float
    qa_r_acc: float
    q_ar_acc: float
    answer_loss: float
    rationale_loss: float
    lr_current: float

    def csv_line(self) -> str:
        vals = (self.q_a_acc, self.qa_r_acc, self.q_ar_acc, self.answer_loss, self.rationale_loss, self.lr_current)
        return f"{self.epoch}," + ",".join(f"{v:.6f}" for v in vals)


def metrics_csv(rows: Sequence[MetricsRow]) -> str:
    return CSV_HEADER + "\n" + "".join(r.csv_line() + "\n" for r in rows)


def parse_metrics_csv(text: str) -> list[MetricsRow]:
    lines = text.strip().splitlines()
    if not lines or lines[0] != CSV_HEADER:
        raise ValueError("not a metrics CSV")
    rows = []
    for line in lines[1:]:
        parts = line.split(",")
        rows.append(MetricsRow(int(parts[0]), *(float(p) for p in parts[1:])))
    return rows


@dataclass
class RunResult:
    rows: list[MetricsRow]
    params: dict[str, np.ndarray]
    initial: MetricsRow
    train_losses: list[float] = field(default_factory=list)


# -- optimizer pieces --------------------------------------------------------


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    state: AdamState,
    lr: float,
    weight_decay: float = 0.0,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> tuple[dict[str, np.ndarray], AdamState]:
    """Bias-corrected Adam with decoupled weight decay (``p <- p - lr*wd*p`` first)."""
    t = state.t + 1
    new_params, m_new, v_new = {}, {}, {}
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ad.ShapeError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        m = beta1 * state.m.get(name, 0.0) + (1.0 - beta1) * g
        v = beta2 * state.v.get(name, 0.0) + (1.0 - beta2) * g * g
        p = p - lr * weight_decay * p
        new_params[name] = p - lr * (m / c1) / (np.sqrt(v / c2) + eps)
        m_new[name], v_new[name] = m, v
    return new_params, AdamState(m_new, v_new, t)


def global_norm(grads: Mapping[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.vdot(g, g)) for g in grads.values()))


def clip_gradients(grads: Mapping[str, np.ndarray], clip_norm: float) -> dict[str, np.ndarray]:
    """Rescale so the global L2 norm is at most ``clip_norm``."""
    if clip_norm <= 0:
        raise ValueError("clip_norm must be positive")
    norm = global_norm(grads)
    if norm <= clip_norm:
        return dict(grads)
    scale = clip_norm / norm
    return {k: g * scale for k, g in grads.items()}


class PlateauScheduler:
    """Multiply the learning rate by ``factor`` when the loss stops improving.

    An epoch counts as improving when it beats the best loss so far by at
    least ``threshold``. After ``patience`` consecutive non-improving epochs
    the rate is cut, followed by ``cooldown`` epochs in which the counter
    stays at zero.
    """

    def __init__(self, factor=0.5, patience=2, threshold=1e-4, cooldown=1):
        self.factor = factor
        self.patience = patience
        self.threshold = threshold
        self.cooldown = cooldown
        self.best = math.inf
        self.bad_epochs = 0
        self.cooldown_left = 0
        self.multiplier = 1.0

    def step(self, loss: float) -> bool:
        if loss < self.best - self.threshold:
            self.best = loss
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
        if self.cooldown_left > 0:
            self.cooldown_left -= 1
            self.bad_epochs = 0
        if self.bad_epochs >= self.patience:
            self.multiplier *= self.factor
            self.bad_epochs = 0
            self.cooldown_left = self.cooldown
            return True
        return False


def plateau_scheduler(history: Sequence[float], cfg: TrainConfig) -> list[float]:
    """Learning-rate multiplier in force after each epoch of ``history``."""
    sched = PlateauScheduler(cfg.plateau_factor, cfg.plateau_patience, cfg.plateau_threshold, cfg.plateau_cooldown)
    out = []
    for loss in history:
        sched.step(loss)
        out.append(sched.multiplier)
    return out


def conditioning_choice(gold, rng: np.random.Generator, p_correct: float = 0.75, wrong_only: bool = False):
    """Gold answer with probability ``p_correct``, otherwise a random answer.

    The random answer is uniform over all four options (so it can still be
    gold) unless ``wrong_only``.
    """
    gold_arr = np.asarray(gold, dtype=np.int64)
    keep = rng.uniform(size=gold_arr.shape) < p_correct
    if wrong_only:
        rand = (gold_arr + rng.integers(1, N_CHOICES, size=gold_arr.shape)) % N_CHOICES
    else:
        rand = rng.integers(0, N_CHOICES, size=gold_arr.shape)
    out = np.where(keep, gold_arr, rand)
    return int(out) if out.ndim == 0 else out


# -- losses and evaluation ---------------------------------------------------


def _is_joint(est) -> bool:
    return isinstance(est, relax.JointCE)


def step_losses(P, batch: Batch, est, cfg: TrainConfig, epoch: int, rng: np.random.Generator):
    """``(total, answer_loss, rationale_loss)`` for one training batch."""
    w_a, w_r = cfg.loss_ratio
    if cfg.baseline_mode == "conditioned":
        choice = conditioning_choice(batch.answer_label, rng, cfg.p_correct, cfg.wrong_only)
        out = forward_joint(P, batch, est, epoch, rng, condition_on=choice)
        a_loss = ad.cross_entropy(out.answer_logits, batch.answer_label)
        total = ad.add(ad.mul(a_loss, w_a), ad.mul(out.rationale_loss, w_r))
        return total, a_loss, out.rationale_loss
    out = forward_joint(P, batch, est, epoch, rng)
    if _is_joint(est):
        a_loss = _marginal_answer_nll(out.aux["pair_logits"], batch.answer_label)
        return out.rationale_loss, a_loss, out.rationale_loss
    a_loss = ad.cross_entropy(out.answer_logits, batch.answer_label)
    total = ad.add(ad.mul(a_loss, w_a), ad.mul(out.rationale_loss, w_r))
    return total, a_loss, out.rationale_loss


def _marginal_answer_nll_rows(pair_logits: np.ndarray, answer_label) -> np.ndarray:
    b = pair_logits.shape[0]
    lp = pair_logits.reshape(b, N_CHOICES, N_CHOICES)
    lp = lp - lp.max(axis=(1, 2), keepdims=True)
    log_z = np.log(np.exp(lp).sum(axis=(1, 2)))
    log_a = np.log(np.exp(lp).sum(axis=2))
    return log_z - log_a[np.arange(b), answer_label]


def _marginal_answer_nll(pair_logits: ad.Tensor, answer_label) -> ad.Tensor:
    """Answer NLL implied by the 16-way pair distribution (monitoring only)."""
    return ad.Tensor(np.mean(_marginal_answer_nll_rows(pair_logits.data, answer_label)))


def predict(params: Mapping[str, np.ndarray], batch: Batch, est, epoch: int = 0, baseline: bool = False) -> dict:
    """Deterministic predictions and per-instance losses for one batch.

    Returns arrays ``answer_pred``, ``rationale_pred_gold`` (gold answer
    appended), ``rationale_pred_e2e`` (predicted answer appended; the pair
    argmax for the joint variant), ``answer_nll`` and ``rationale_nll``.
    """
    P = bind(params)
    b = len(batch)
    rows = np.arange(b)
    a_logits = answer_logits_for(P, batch)
    dist = relax.AnswerDistribution.from_logits(a_logits)
    r_states = encode_responses(P, "rat", batch.rationales)
    reps = answer_rep(P, batch.answers)
    per = per_answer_rationale_logits(P, batch, reps, r_states).data  # [B, 4, 4]
    log_r = per - per.max(axis=-1, keepdims=True)
    log_r = log_r - np.log(np.exp(log_r).sum(axis=-1, keepdims=True))
    per_nll = -log_r[rows, :, batch.rationale_label]  # [B, 4]
    a_log = dist.log_probs.data
    out = {"answer_nll": -a_log[rows, batch.answer_label]}

    if _is_joint(est) and not baseline:
        pair = relax.joint_pair_logits(a_logits, ad.Tensor(per)).data
        best = pair.argmax(axis=-1)
        a_pred, r_pred = relax.decode_pair(best, N_CHOICES)
        pair_ls = pair - pair.max(axis=-1, keepdims=True)
        pair_ls = pair_ls - np.log(np.exp(pair_ls).sum(axis=-1, keepdims=True))
        flat_target = N_CHOICES * batch.answer_label + batch.rationale_label
        out["answer_nll"] = _marginal_answer_nll_rows(pair, batch.answer_label)
        out.update(
            answer_pred=a_pred,
            rationale_pred_gold=per[rows, batch.answer_label].argmax(axis=-1),
            rationale_pred_e2e=r_pred,
            rationale_nll=-pair_ls[rows, flat_target],
        )
        return out

    a_pred = a_log.argmax(axis=-1)
    out["answer_pred"] = a_pred
    out["rationale_pred_gold"] = per[rows, batch.answer_label].argmax(axis=-1)
    out["rationale_pred_e2e"] = per[rows, a_pred].argmax(axis=-1)
    if baseline:
        out["rationale_nll"] = per_nll[rows, batch.answer_label]
    elif isinstance(est, relax.Softmax):
        r = rationale_logits(P, batch, relax.softmax_weight(dist, reps), r_states)
        out["rationale_nll"] = _row_nll(r.data, batch.rationale_label)
    elif isinstance(est, relax.GumbelSoftmax):
        tau = relax.temperature_at(est.config, epoch)
        w = relax.gumbel_softmax(dist, ad.Tensor(np.zeros((b, N_CHOICES))), tau, est.config.use_log_probs)
        r = rationale_logits(P, batch, relax.weight_answers(w, reps), r_states)
        out["rationale_nll"] = _row_nll(r.data, batch.rationale_label)
    elif isinstance(est, relax.ScoreFunction):
        out["rationale_nll"] = (np.exp(a_log) * per_nll).sum(axis=-1)
    else:
        raise TypeError(f"unknown estimator {est!r}")
    return out


def _row_nll(logits: np.ndarray, labels) -> np.ndarray:
    ls = logits - logits.max(axis=-1, keepdims=True)
    ls = ls - np.log(np.exp(ls).sum(axis=-1, keepdims=True))
    return -ls[np.arange(len(labels)), labels]


def accuracy_row(
    answer_pred, rationale_pred_gold, rationale_pred_e2e, answer_label, rationale_label
) -> tuple[float, float, float]:
    """``(q_a, qa_r, q_ar)`` where ``q_ar`` is the per-instance AND."""
    a_ok = np.asarray(answer_pred) == np.asarray(answer_label)
    r_ok = np.asarray(rationale_pred_gold) == np.asarray(rationale_label)
    e2e_ok = np.asarray(rationale_pred_e2e) == np.asarray(rationale_label)
    both = a_ok & e2e_ok
    return float(a_ok.mean()), float(r_ok.mean()), float(both.mean())


def evaluate(
    params: Mapping[str, np.ndarray],
    instances: Sequence[Instance],
    est,
    epoch: int = 0,
    baseline: bool = False,
    batch_size: int = 500,
    lr_current: float = 0.0,
) -> MetricsRow:
    """Accuracies and mean validation losses over ``instances``.

    ``epoch`` sets the Gumbel temperature used for the validation loss and
    labels the returned row.
    """
    parts: dict[str, list[np.ndarray]] = {}
    labels_a, labels_r = [], []
    for start in range(0, len(instances), batch_size):
        batch = collate(instances[start : start + batch_size])
        for k, v in predict(params, batch, est, epoch, baseline).items():
            parts.setdefault(k, []).append(np.asarray(v))
        labels_a.append(batch.answer_label)
        labels_r.append(batch.rationale_label)
    cat = {k: np.concatenate(v) for k, v in parts.items()}
    q_a, qa_r, q_ar = accuracy_row(
        cat["answer_pred"],
        cat["rationale_pred_gold"],
        cat["rationale_pred_e2e"],
        np.concatenate(labels_a),
        np.concatenate(labels_r),
    )
    return MetricsRow(
        epoch=epoch,
        q_a_acc=q_a,
        qa_r_acc=qa_r,
        q_ar_acc=q_ar,
        answer_loss=float(cat["answer_nll"].mean()),
        rationale_loss=float(cat["rationale_nll"].mean()),
        lr_current=lr_current,
    )


# -- the training loop -------------------------------------------------------


def param_grads(tape: ad.Tape, grads: dict, P: Mapping[str, ad.Tensor]) -> dict[str, np.ndarray]:
    return {k: tape.grad(grads, t) for k, t in P.items()}


def effective_model_config(model_cfg: ModelConfig, cfg: TrainConfig) -> ModelConfig:
    """The model shape a run actually trains; the conditioned baseline never shares embeddings."""
    if cfg.baseline_mode == "conditioned" and model_cfg.share_embedding:
        return replace(model_cfg, share_embedding=False)
    return model_cfg


def train_run(
    model_cfg: ModelConfig,
    est: relax.EstimatorConfig,
    cfg: TrainConfig,
    train_data: Sequence[Instance],
    val_data: Sequence[Instance],
    params: Mapping[str, np.ndarray] | None = None,
    on_epoch: Callable[[MetricsRow], None] | None = None,
) -> RunResult:
    """Train for ``cfg.epochs`` epochs and evaluate on ``val_data`` after each."""
    baseline = cfg.baseline_mode == "conditioned"
    model_cfg = effective_model_config(model_cfg, cfg)
    params = dict(init_params(model_cfg) if params is None else params)
    shuffle_seq, noise_seq = np.random.SeedSequence(cfg.seed).spawn(2)
    shuffle_rng = np.random.default_rng(shuffle_seq)
    noise_rng = np.random.default_rng(noise_seq)
    state = AdamState()
    sched = PlateauScheduler(cfg.plateau_factor, cfg.plateau_patience, cfg.plateau_threshold, cfg.plateau_cooldown)
    variant = getattr(est, "name", type(est).__name__)

    initial = evaluate(params, val_data, est, 0, baseline, cfg.eval_batch_size, cfg.lr)
    rows: list[MetricsRow] = []
    train_losses: list[float] = []
    n = len(train_data)
    for epoch in range(cfg.epochs):
        lr = cfg.lr * sched.multiplier
        order = shuffle_rng.permutation(n)
        epoch_loss = 0.0
        n_batches = 0
        for bi, start in enumerate(range(0, n, cfg.batch_size)):
            batch = collate([train_data[i] for i in order[start : start + cfg.batch_size]])
            tape = ad.Tape()
            P = bind(params, tape)
            total, _, _ = step_losses(P, batch, est, cfg, epoch, noise_rng)
            if not np.isfinite(total.item()):
                raise NumericalError(f"non-finite loss in epoch {epoch + 1}, batch {bi} ({variant} variant)")
            grads = param_grads(tape, tape.backward(total), P)
            grads = clip_gradients(grads, cfg.clip_norm)
            params, state = adam_step(
                params, grads, state, lr, cfg.weight_decay, cfg.beta1, cfg.beta2, cfg.eps
            )
            epoch_loss += total.item()
            n_batches += 1
        train_losses.append(epoch_loss / max(n_batches, 1))
        row = evaluate(params, val_data, est, epoch, baseline, cfg.eval_batch_size, lr)
        row.epoch = epoch + 1
        if not (np.isfinite(row.answer_loss) and np.isfinite(row.rationale_loss)):
            raise NumericalError(f"non-finite validation loss after epoch {epoch + 1} ({variant} variant)")
        w_a, w_r = cfg.loss_ratio
        val_total = row.rationale_loss if _is_joint(est) and not baseline else w_a * row.answer_loss + w_r * row.rationale_loss
        sched.step(val_total)
        rows.append(row)
        log.info(
            "%s epoch %d: Q->A %.3f QA->R %.3f Q->AR %.3f loss %.4f lr %.2e",
            variant, epoch + 1, row.q_a_acc, row.qa_r_acc, row.q_ar_acc, train_losses[-1], lr,
        )
        if on_epoch is not None:
            on_epoch(row)
    return RunResult(rows, params, initial, train_losses)


ABLATION_RATIOS = ((1.0, 1.0), (1.0, 4.0))


def run_ablation(
    model_cfg: ModelConfig,
    est: relax.EstimatorConfig,
    cfg: TrainConfig,
    train_data: Sequence[Instance],
    val_data: Sequence[Instance],
) -> dict[tuple[float, float], RunResult]:
    """Train the same seed under answer:rationale loss ratios 1:1 and 1:4."""
    return {
        ratio: train_run(model_cfg, est, replace(cfg, loss_ratio=ratio), train_data, val_data)
        for ratio in ABLATION_RATIOS
    }


def ablation_curves(results: Mapping[tuple[float, float], RunResult]) -> list[dict]:
    """Flat rows ``{ratio, epoch, answer_loss, rationale_loss, ...}`` for both runs."""
    out = []
    for ratio, res in results.items():
        tag = f"{ratio[0]:g}:{ratio[1]:g}"
        for row in res.rows:
            out.append({"ratio": tag, **vars(row)})
    return out
