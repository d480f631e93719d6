"""Ways of handing a discrete answer choice to the rationale module.

Four mechanisms, each keeping the two-stage pipeline trainable end to end:

* softmax weighting of answer representations (:func:`softmax_weight`)
* Gumbel-softmax weighting with an annealed temperature (:func:`gumbel_softmax`)
* sampling answers and differentiating the expected rationale loss with the
  score-function estimator (:func:`score_function_loss`), or its exact
  enumeration over the four answers (:func:`exact_expectation_loss`)
* a single cross entropy over all answer/rationale pairs
  (:func:`joint_pair_logits`, :func:`joint_cross_entropy`)

All functions accept a leading batch axis: an :class:`AnswerDistribution`
may hold logits of shape ``[n]`` or ``[B, n]``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Union

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

GUMBEL_EPS = 1e-12


class ConfigError(ValueError):
    """Invalid estimator hyperparameters."""


@dataclass(frozen=True)
class AnswerDistribution:
    logits: Tensor
    probs: Tensor
    log_probs: Tensor

    @classmethod
    def from_logits(cls, logits: Tensor) -> AnswerDistribution:
        return cls(logits, ad.softmax(logits), ad.log_softmax(logits))


@dataclass(frozen=True)
class GumbelConfig:
    tau_start: float = 5.0
    tau_end: float = 1.0
    anneal_epochs: int = 10
    use_log_probs: bool = True

    def __post_init__(self):
        if not (self.tau_start >= self.tau_end > 0):
            raise ConfigError(f"need tau_start >= tau_end > 0, got {self.tau_start}, {self.tau_end}")
        if self.anneal_epochs < 1:
            raise ConfigError("anneal_epochs must be >= 1")


@dataclass(frozen=True)
class ScoreFunctionConfig:
    n_samples: int = 64
    use_exact: bool = False
    baseline_subtract: bool = False

    def __post_init__(self):
        if self.n_samples < 1:
            raise ConfigError(f"n_samples must be >= 1, got {self.n_samples}")


@dataclass(frozen=True)
class Softmax:
    name = "softmax"


@dataclass(frozen=True)
class GumbelSoftmax:
    config: GumbelConfig = field(default_factory=GumbelConfig)
    name = "gumbel"


@dataclass(frozen=True)
class ScoreFunction:
    config: ScoreFunctionConfig = field(default_factory=ScoreFunctionConfig)
    name = "score_function"


@dataclass(frozen=True)
class JointCE:
    name = "joint_ce"


EstimatorConfig = Union[Softmax, GumbelSoftmax, ScoreFunction, JointCE]

VARIANTS = {"softmax": Softmax, "gumbel": GumbelSoftmax, "score_function": ScoreFunction, "joint_ce": JointCE}


def softmax_weight(dist: AnswerDistribution, answer_reps: Tensor) -> Tensor:
    """Probability-weighted sum of answer representations.

    ``answer_reps`` is ``[..., n, d]`` matching ``dist.probs`` of ``[..., n]``;
    returns ``[..., d]``.
    """
    return weight_answers(dist.probs, answer_reps)


def weight_answers(weights: Tensor, answer_reps: Tensor) -> Tensor:
    """Weighted sum of rows of ``answer_reps`` (``[..., n, d]``) by ``weights`` (``[..., n]``)."""
    lead = weights.shape[:-1]
    n = weights.shape[-1]
    if answer_reps.shape[:-1] != lead + (n,):
        raise ad.ShapeError(f"weights {weights.shape} do not match answer_reps {answer_reps.shape}")
    out = ad.matmul(ad.reshape(weights, lead + (1, n)), answer_reps)
    return ad.reshape(out, lead + (answer_reps.shape[-1],))


def gumbel_sample(rng: np.random.Generator, shape) -> Tensor:
    """Standard Gumbel noise ``-log(-log(u))``; a constant for backward."""
    u = rng.uniform(size=shape)
    return Tensor(gumbel_from_uniform(u))


def gumbel_from_uniform(u) -> np.ndarray:
    u = np.clip(np.asarray(u, dtype=np.float64), GUMBEL_EPS, 1.0 - GUMBEL_EPS)
    return -np.log(-np.log(u))


def gumbel_softmax(dist: AnswerDistribution, g, tau: float, use_log_probs: bool = True) -> Tensor:
    """``softmax((base + g) / tau)`` with ``base`` the log-probs (or raw probs)."""
    if tau <= 0:
        raise ConfigError(f"temperature must be positive, got {tau}")
    base = dist.log_probs if use_log_probs else dist.probs
    return ad.softmax(ad.mul(ad.add(base, g), 1.0 / tau))


def temperature_at(cfg: GumbelConfig, epoch: int) -> float:
    """Linear anneal from ``tau_start`` at epoch 0 to ``tau_end`` at ``anneal_epochs``."""
    if epoch >= cfg.anneal_epochs:
        return float(cfg.tau_end)
    frac = max(epoch, 0) / cfg.anneal_epochs
    return float(cfg.tau_start + (cfg.tau_end - cfg.tau_start) * frac)


def sample_answer(dist: AnswerDistribution, rng: np.random.Generator, size=None) -> np.ndarray:
    """Inverse-CDF categorical draws from ``dist.probs``; carries no gradient.

    For a batched distribution ``[B, n]`` with ``size=N`` the result is ``[B, N]``.
    """
    p = dist.probs.data
    cdf = np.cumsum(p, axis=-1)
    cdf[..., -1] = 1.0
    n = p.shape[-1]
    if p.ndim == 1:
        u = rng.uniform(size=size)
        return np.minimum(np.searchsorted(cdf, u, side="right"), n - 1)
    u = rng.uniform(size=(p.shape[0], 1 if size is None else size))
    idx = (u[:, :, None] >= cdf[:, None, :]).sum(axis=-1)
    idx = np.minimum(idx, n - 1)
    return idx[:, 0] if size is None else idx


def exact_expectation_loss(dist: AnswerDistribution, per_answer_loss: Tensor) -> Tensor:
    """``sum_i p_i * l_i`` (averaged over the batch axis if present)."""
    prod = ad.mul(dist.probs, per_answer_loss)
    if len(prod.shape) == 1:
        return ad.sum(prod)
    return ad.mean(ad.sum(prod, axis=-1))


def score_function_surrogate(
    dist: AnswerDistribution,
    per_answer_loss: Tensor,
    samples: np.ndarray,
    baseline_subtract: bool = False,
) -> Tensor:
    """Surrogate whose value is the sample-mean loss and whose gradient is the
    score-function estimate plus the pathwise term.

    ``per_answer_loss`` is ``[B, n]`` (the rationale loss with each answer
    appended) and ``samples`` is ``[B, N]``. Rationale losses are deterministic
    given the appended answer, so indexing a precomputed table is the same as
    running one rationale pass per draw.

    With ``baseline_subtract`` each draw's payoff is centred on the mean of the
    other ``N - 1`` draws, which keeps the estimator unbiased.
    """
    b, n_draw = samples.shape
    rows = np.repeat(np.arange(b), n_draw)
    flat_idx = samples.reshape(-1)
    losses = ad.reshape(ad.take(ad.reshape(per_answer_loss, (-1,)), rows * per_answer_loss.shape[-1] + flat_idx), (b, n_draw))
    logp = ad.reshape(ad.take(ad.reshape(dist.log_probs, (-1,)), rows * dist.log_probs.shape[-1] + flat_idx), (b, n_draw))
    payoff = losses.data
    if baseline_subtract and n_draw > 1:
        # centre on the first draw so a constant payoff cancels exactly
        dev = payoff - payoff[:, :1]
        loo = (dev.sum(axis=1, keepdims=True) - dev) / (n_draw - 1)
        payoff = dev - loo
    elif baseline_subtract:
        payoff = np.zeros_like(payoff)
    score = ad.sub(ad.mul(logp, Tensor(payoff)), ad.mul(ad.detach(logp), Tensor(payoff)))
    total = ad.add(losses, score)
    return ad.mean(total)


def score_function_loss(
    dist: AnswerDistribution,
    loss_of: Callable[[int], Tensor],
    cfg: ScoreFunctionConfig,
    rng: np.random.Generator,
) -> Tensor:
    """Monte Carlo estimate of ``E_{A~p}[loss_of(A)]`` for a single distribution.

    ``loss_of`` is called at most once per distinct sampled index.
    """
    if cfg.n_samples < 1:
        raise ConfigError(f"n_samples must be >= 1, got {cfg.n_samples}")
    n = dist.probs.shape[-1]
    samples = np.asarray(sample_answer(dist, rng, size=cfg.n_samples))
    cache: dict[int, Tensor] = {}
    for i in np.unique(samples):
        cache[int(i)] = loss_of(int(i))
    zero = Tensor(0.0)
    table = ad.stack([ad.reshape(cache.get(i, zero), ()) for i in range(n)])
    batched = AnswerDistribution(
        ad.reshape(dist.logits, (1, n)), ad.reshape(dist.probs, (1, n)), ad.reshape(dist.log_probs, (1, n))
    )
    return score_function_surrogate(batched, ad.reshape(table, (1, n)), samples[None, :], cfg.baseline_subtract)


def joint_pair_logits(answer_logits: Tensor, rationale_logits_per_answer: Tensor) -> Tensor:
    """Flat pair scores: index ``n*i + j`` holds ``answer[i] + rationale[i, j]``."""
    lead = answer_logits.shape[:-1]
    n = answer_logits.shape[-1]
    m = rationale_logits_per_answer.shape[-1]
    if rationale_logits_per_answer.shape != lead + (n, m):
        raise ad.ShapeError(
            f"pair logits: answers {answer_logits.shape} vs rationales {rationale_logits_per_answer.shape}"
        )
    ones = Tensor(np.ones((1, m)))
    spread = ad.matmul(ad.reshape(answer_logits, lead + (n, 1)), ones)
    return ad.reshape(ad.add(spread, rationale_logits_per_answer), lead + (n * m,))


def decode_pair(flat_index, n_rationales: int = 4):
    """Flat pair index to ``(answer, rationale)``."""
    return divmod(flat_index, n_rationales)


def joint_cross_entropy(pair_logits: Tensor, answer_label, rationale_label, n_rationales: int = 4) -> Tensor:
    a = np.asarray(answer_label, dtype=np.int64)
    r = np.asarray(rationale_label, dtype=np.int64)
    n_answers = pair_logits.shape[-1] // n_rationales
    for name, lab, hi in (("answer_label", a, n_answers), ("rationale_label", r, n_rationales)):
        if np.any(lab < 0) or np.any(lab >= hi):
            raise IndexError(f"{name} {lab.tolist()} out of range 0..{hi - 1}")
    return ad.cross_entropy(pair_logits, n_rationales * a + r)
