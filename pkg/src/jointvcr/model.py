"""Two-module multiple-choice scorer: an answer module feeding a rationale module.

Each module follows the ground / contextualize / reason pattern:

1. *ground*: token embeddings plus projected object features pass through a
   bidirectional GRU;
2. *contextualize*: every response token attends over the query states;
3. *reason*: response states and their attended query are concatenated, run
   through a second bidirectional GRU, mean-pooled and scored by a small MLP.

The rationale module's query is the question with one extra pseudo-token
appended, which carries the (weighted, sampled or chosen) answer
representation. Parameters live in a flat ``name -> ndarray`` dict; the
forward functions take the same dict with values bound to
:class:`~jointvcr.autodiff.Tensor` (tracked or constant).

All forward functions are batched over a leading axis.
"""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import asdict, dataclass, field
from typing import Any, Mapping

import numpy as np

from . import autodiff as ad
from . import relax
from .autodiff import Tensor

N_CHOICES = 4


class CheckpointError(ValueError):
    """A checkpoint file is malformed or does not match the model shape."""


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 64
    embed_dim: int = 32
    hidden_dim: int = 32
    object_feat_dim: int = 8
    seed: int = 0
    share_embedding: bool = True

    def __post_init__(self):
        for name in ("vocab_size", "embed_dim", "hidden_dim", "object_feat_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"ModelConfig.{name} must be >= 1")


@dataclass
class EncodedSequence:
    states: Tensor  # [N, T, 2h]
    pooled: Tensor  # [N, 2h]


@dataclass
class Batch:
    """Stacked instances; every array has leading axis ``B``."""

    question: np.ndarray  # [B, Tq] int
    object_feats: np.ndarray  # [B, Tq, f]
    answers: np.ndarray  # [B, 4, Ta] int
    rationales: np.ndarray  # [B, 4, Tr] int
    answer_label: np.ndarray  # [B]
    rationale_label: np.ndarray  # [B]

    def __len__(self):
        return self.question.shape[0]


@dataclass
class ForwardOutput:
    answer_logits: Tensor  # [B, 4]
    rationale_loss: Tensor  # scalar
    rationale_pred: np.ndarray  # [B]
    aux: dict[str, Any] = field(default_factory=dict)


# -- parameters --------------------------------------------------------------


def _gru_shapes(prefix: str, n_in: int, h: int) -> dict[str, tuple[int, ...]]:
    return {f"{prefix}.wx": (n_in, 3 * h), f"{prefix}.bx": (3 * h,), f"{prefix}.wh": (h, 3 * h)}


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, h, f = cfg.embed_dim, cfg.hidden_dim, cfg.object_feat_dim
    shapes: dict[str, tuple[int, ...]] = {"embed": (cfg.vocab_size, d)}
    if not cfg.share_embedding:
        shapes["rat.embed"] = (cfg.vocab_size, d)
    for m in ("ans", "rat"):
        shapes[f"{m}.obj_w"] = (f, d)
        for direction in ("fwd", "bwd"):
            shapes.update(_gru_shapes(f"{m}.ground_{direction}", d, h))
            shapes.update(_gru_shapes(f"{m}.reason_{direction}", 6 * h, h))
        shapes[f"{m}.head_w1"] = (2 * h, h)
        shapes[f"{m}.head_b1"] = (h,)
        shapes[f"{m}.head_w2"] = (h, 1)
        shapes[f"{m}.head_b2"] = (1,)
    shapes["rat.rep_w"] = (2 * h, d)
    shapes["rat.rep_b"] = (d,)
    return shapes


def _fan_in(name: str, shape: tuple[int, ...], shapes: Mapping[str, tuple[int, ...]]) -> int:
    if name.endswith("embed"):
        return 1  # a lookup is a linear map of a one-hot input
    if len(shape) == 2:
        return shape[0]
    # biases share the fan-in of their weight matrix
    stem = name.rsplit(".", 1)
    key = stem[1]
    partner = {"bx": "wx", "head_b1": "head_w1", "head_b2": "head_w2", "rep_b": "rep_w"}[key]
    return shapes[f"{stem[0]}.{partner}"][0]


def init_params(cfg: ModelConfig) -> dict[str, np.ndarray]:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) init, seeded by ``cfg.seed``."""
    rng = np.random.default_rng(cfg.seed)
    shapes = param_shapes(cfg)
    params = {}
    for name in sorted(shapes):
        shape = shapes[name]
        bound = 1.0 / np.sqrt(_fan_in(name, shape, shapes))
        params[name] = rng.uniform(-bound, bound, size=shape)
    return params


def module_params(names, module: str) -> list[str]:
    """Parameter names owned exclusively by ``module`` ("ans" or "rat")."""
    return [n for n in names if n.startswith(module + ".")]


def bind(params: Mapping[str, np.ndarray], tape: ad.Tape | None = None) -> dict[str, Tensor]:
    """Wrap raw arrays as tape leaves (or constants when ``tape`` is None)."""
    if tape is None:
        return {k: Tensor(v) for k, v in params.items()}
    return {k: tape.leaf(v) for k, v in params.items()}


def _embed_table(P: Mapping[str, Tensor], module: str) -> Tensor:
    if module == "rat" and "rat.embed" in P:
        return P["rat.embed"]
    return P["embed"]


# -- building blocks ---------------------------------------------------------


def gru(P: Mapping[str, Tensor], prefix: str, x: Tensor, reverse: bool = False) -> Tensor:
    """Single-direction GRU over ``x`` ``[N, T, in]``; returns ``[N, T, h]``."""
    wh = P[f"{prefix}.wh"]
    h_dim = wh.shape[0]
    n, t_len = x.shape[0], x.shape[1]
    gx = ad.affine(x, P[f"{prefix}.wx"], P[f"{prefix}.bx"])
    h = Tensor(np.zeros((n, h_dim)))
    outs = [None] * t_len
    steps = range(t_len - 1, -1, -1) if reverse else range(t_len)
    for t in steps:
        gxt = ad.take(gx, t, axis=1)
        gh = ad.matmul(h, wh)
        zr = ad.sigmoid(ad.add(ad.narrow(gxt, 0, 2 * h_dim), ad.narrow(gh, 0, 2 * h_dim)))
        z = ad.narrow(zr, 0, h_dim)
        r = ad.narrow(zr, h_dim, 2 * h_dim)
        cand = ad.tanh(ad.add(ad.narrow(gxt, 2 * h_dim, 3 * h_dim), ad.mul(r, ad.narrow(gh, 2 * h_dim, 3 * h_dim))))
        h = ad.add(cand, ad.mul(z, ad.sub(h, cand)))
        outs[t] = h
    return ad.stack(outs, axis=1)


def bigru(P: Mapping[str, Tensor], prefix: str, x: Tensor) -> Tensor:
    return ad.concat([gru(P, f"{prefix}_fwd", x), gru(P, f"{prefix}_bwd", x, reverse=True)], axis=-1)


def token_inputs(P: Mapping[str, Tensor], module: str, tokens, object_feats=None) -> Tensor:
    """Embedding plus projected object features, ``[N, T, d]``.

    Object features are projected without a bias, so all-zero rows (untagged
    tokens) contribute nothing.
    """
    x = ad.embed(_embed_table(P, module), tokens)
    if object_feats is not None:
        x = ad.add(x, ad.matmul(Tensor(object_feats), P[f"{module}.obj_w"]))
    return x


def encode(P: Mapping[str, Tensor], module: str, x: Tensor) -> EncodedSequence:
    states = bigru(P, f"{module}.ground", x)
    return EncodedSequence(states, ad.mean(states, axis=1))


def ground(P: Mapping[str, Tensor], module: str, tokens, object_feats=None) -> EncodedSequence:
    """Bidirectional GRU over embed(token) + project(object features).

    ``tokens`` is ``[N, T]``; ``object_feats`` is ``[N, T, f]`` or None.
    """
    return encode(P, module, token_inputs(P, module, np.asarray(tokens), object_feats))


def contextualize(response: EncodedSequence | Tensor, query: EncodedSequence | Tensor, return_weights: bool = False):
    """Scaled dot-product attention of response tokens over query states.

    Returns ``[N, Tr, 2h]`` attended query vectors (and the ``[N, Tr, Tq]``
    attention weights when ``return_weights``).
    """
    r = response.states if isinstance(response, EncodedSequence) else response
    q = query.states if isinstance(query, EncodedSequence) else query
    scores = ad.mul(ad.matmul(r, ad.swap_last(q)), 1.0 / np.sqrt(r.shape[-1]))
    alpha = ad.softmax(scores, axis=-1)
    attended = ad.matmul(alpha, q)
    return (attended, alpha) if return_weights else attended


def reason(P: Mapping[str, Tensor], module: str, response_states: Tensor, attended: Tensor) -> Tensor:
    """One logit per response sequence, ``[N]``.

    The recurrent input at each response token is ``[r, a, r*a]`` with ``a``
    the attended query; the product term exposes token/query agreement.
    """
    x = ad.concat([response_states, attended, ad.mul(response_states, attended)], axis=-1)
    pooled = ad.mean(bigru(P, f"{module}.reason", x), axis=1)
    hidden = ad.tanh(ad.affine(pooled, P[f"{module}.head_w1"], P[f"{module}.head_b1"]))
    out = ad.affine(hidden, P[f"{module}.head_w2"], P[f"{module}.head_b2"])
    return ad.reshape(out, (out.shape[0],))


def encode_query(P, module: str, question, object_feats, extra: Tensor | None = None) -> EncodedSequence:
    """Ground the question, optionally with ``extra`` ``[N, d]`` appended as a pseudo-token."""
    x = token_inputs(P, module, question, object_feats)
    if extra is not None:
        x = ad.concat([x, ad.reshape(extra, (extra.shape[0], 1, extra.shape[-1]))], axis=1)
    return encode(P, module, x)


def encode_responses(P, module: str, responses) -> Tensor:
    """Ground ``[B, 4, T]`` response tokens; returns states ``[4B, T, 2h]``."""
    responses = np.asarray(responses)
    b, k, t = responses.shape
    return encode(P, module, token_inputs(P, module, responses.reshape(b * k, t))).states


def score_encoded(P, module: str, query: EncodedSequence, response_states: Tensor) -> Tensor:
    """Score grounded responses (``[Nq*4, T, 2h]``) against grounded queries (``[Nq, Tq, 2h]``)."""
    nq = query.states.shape[0]
    k = response_states.shape[0] // nq
    q_rep = ad.take(query.states, np.repeat(np.arange(nq), k), axis=0)
    attended = contextualize(response_states, q_rep)
    logits = reason(P, module, response_states, attended)
    return ad.reshape(logits, (nq, k))


def score_responses(P, module: str, question, object_feats, responses, extra: Tensor | None = None) -> Tensor:
    """Logits ``[B, 4]`` for four response sequences per query."""
    query = encode_query(P, module, question, object_feats, extra)
    return score_encoded(P, module, query, encode_responses(P, module, responses))


def answer_rep(P, answers, object_feats=None) -> Tensor:
    """Pooled rationale-module encoding of each answer projected to ``embed_dim``.

    ``answers`` is ``[B, 4, Ta]``; returns ``[B, 4, d]``.
    """
    answers = np.asarray(answers)
    b, k, t = answers.shape
    feats = None if object_feats is None else np.asarray(object_feats).reshape(b * k, t, -1)
    enc = ground(P, "rat", answers.reshape(b * k, t), feats)
    rep = ad.affine(enc.pooled, P["rat.rep_w"], P["rat.rep_b"])
    return ad.reshape(rep, (b, k, rep.shape[-1]))


# -- the joint pipeline ------------------------------------------------------


def _rationale_for_extras(P, batch: Batch, extras: Tensor, rationale_states: Tensor | None = None) -> Tensor:
    """Rationale logits for each of ``K`` conditioning vectors per instance.

    ``extras`` is ``[B, K, d]``; returns ``[B, K, 4]``.
    """
    b, k, d = extras.shape
    rep_idx = np.repeat(np.arange(b), k)
    if rationale_states is None:
        rationale_states = encode_responses(P, "rat", batch.rationales)
    t_r, h2 = rationale_states.shape[1], rationale_states.shape[2]
    # [4B, T, 2h] -> [B, 4, T, 2h] -> repeat per conditioning -> [B*K*4, T, 2h]
    r4 = ad.reshape(rationale_states, (b, N_CHOICES, t_r, h2))
    r_rep = ad.reshape(ad.take(r4, rep_idx, axis=0), (b * k * N_CHOICES, t_r, h2))
    query = encode_query(
        P, "rat", batch.question[rep_idx], batch.object_feats[rep_idx], ad.reshape(extras, (b * k, d))
    )
    logits = score_encoded(P, "rat", query, r_rep)
    return ad.reshape(logits, (b, k, N_CHOICES))


def rationale_logits(P, batch: Batch, extra: Tensor, rationale_states: Tensor | None = None) -> Tensor:
    """Rationale logits ``[B, 4]`` with one conditioning vector ``extra`` ``[B, d]`` per instance."""
    b, d = extra.shape
    out = _rationale_for_extras(P, batch, ad.reshape(extra, (b, 1, d)), rationale_states)
    return ad.reshape(out, (b, N_CHOICES))


def per_answer_rationale_logits(P, batch: Batch, reps: Tensor, rationale_states=None) -> Tensor:
    """Rationale logits ``[B, 4, 4]``: row ``i`` is conditioned on answer ``i``."""
    return _rationale_for_extras(P, batch, reps, rationale_states)


def nll_rows(logits: Tensor, labels) -> Tensor:
    """Per-row negative log-likelihood over the last axis."""
    return ad.neg(ad.take_along(ad.log_softmax(logits), np.asarray(labels)))


def pick_reps(reps: Tensor, choice) -> Tensor:
    """``reps[b, choice[b]]`` for each instance; ``[B, d]``."""
    b, k, d = reps.shape
    flat = ad.reshape(reps, (b * k, d))
    return ad.take(flat, np.arange(b) * k + np.asarray(choice), axis=0)


def answer_logits_for(P, batch: Batch) -> Tensor:
    return score_responses(P, "ans", batch.question, batch.object_feats, batch.answers)


def forward_joint(
    P: Mapping[str, Tensor],
    batch: Batch,
    est: relax.EstimatorConfig,
    epoch: int = 0,
    rng: np.random.Generator | None = None,
    condition_on=None,
    gumbel_noise=None,
) -> ForwardOutput:
    """Answer logits and the rationale loss for one batch under ``est``.

    ``condition_on`` (answer indices, one per instance) bypasses the estimator
    and appends that answer's representation directly; this is the
    separately-trained conditioned baseline. ``gumbel_noise`` fixes ``g`` for
    the Gumbel variant (otherwise it is drawn from ``rng``).
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    a_logits = answer_logits_for(P, batch)
    dist = relax.AnswerDistribution.from_logits(a_logits)
    labels = batch.rationale_label
    aux: dict[str, Any] = {}
    r_states = encode_responses(P, "rat", batch.rationales)

    if condition_on is not None:
        reps = answer_rep(P, batch.answers)
        r_logits = rationale_logits(P, batch, pick_reps(reps, condition_on), r_states)
        loss = ad.cross_entropy(r_logits, labels)
        pred = r_logits.data.argmax(axis=-1)
        aux["rationale_logits"] = r_logits
        return ForwardOutput(a_logits, loss, pred, aux)

    if isinstance(est, relax.Softmax):
        reps = answer_rep(P, batch.answers)
        r_logits = rationale_logits(P, batch, relax.softmax_weight(dist, reps), r_states)
        loss = ad.cross_entropy(r_logits, labels)
        pred = r_logits.data.argmax(axis=-1)
        aux["rationale_logits"] = r_logits

    elif isinstance(est, relax.GumbelSoftmax):
        cfg = est.config
        tau = relax.temperature_at(cfg, epoch)
        g = relax.gumbel_sample(rng, a_logits.shape) if gumbel_noise is None else Tensor(gumbel_noise)
        weights = relax.gumbel_softmax(dist, g, tau, cfg.use_log_probs)
        reps = answer_rep(P, batch.answers)
        r_logits = rationale_logits(P, batch, relax.weight_answers(weights, reps), r_states)
        loss = ad.cross_entropy(r_logits, labels)
        pred = r_logits.data.argmax(axis=-1)
        aux.update(rationale_logits=r_logits, tau=tau, gumbel_weights=weights)

    elif isinstance(est, relax.ScoreFunction):
        cfg = est.config
        reps = answer_rep(P, batch.answers)
        all_logits = per_answer_rationale_logits(P, batch, reps, r_states)
        per_answer = nll_rows(all_logits, np.repeat(labels[:, None], N_CHOICES, axis=1))
        if cfg.use_exact:
            loss = relax.exact_expectation_loss(dist, per_answer)
        else:
            samples = relax.sample_answer(dist, rng, size=cfg.n_samples)
            loss = relax.score_function_surrogate(dist, per_answer, samples, cfg.baseline_subtract)
            aux["samples"] = samples
        top = a_logits.data.argmax(axis=-1)
        pred = all_logits.data[np.arange(len(batch)), top].argmax(axis=-1)
        aux.update(per_answer_loss=per_answer, rationale_logits_per_answer=all_logits)

    elif isinstance(est, relax.JointCE):
        reps = answer_rep(P, batch.answers)
        all_logits = per_answer_rationale_logits(P, batch, reps, r_states)
        pair = relax.joint_pair_logits(a_logits, all_logits)
        loss = relax.joint_cross_entropy(pair, batch.answer_label, labels)
        best = pair.data.argmax(axis=-1)
        a_pred, pred = relax.decode_pair(best, N_CHOICES)
        aux.update(pair_logits=pair, answer_pred=a_pred, rationale_logits_per_answer=all_logits)

    else:
        raise TypeError(f"unknown estimator {est!r}")
    return ForwardOutput(a_logits, loss, pred, aux)


# -- checkpoints -------------------------------------------------------------

_MAGIC = b"JVCKPT1\n"


def save_checkpoint(params: Mapping[str, np.ndarray], path, cfg: ModelConfig | None = None) -> None:
    """Write ``params`` atomically.

    Layout: the magic line ``JVCKPT1``, one JSON header line
    ``{"model": {...}, "tensors": [{"name", "shape"}, ...]}``, then every
    tensor's values as little-endian float64 in header order, row-major.
    """
    names = sorted(params)
    header = {
        "model": asdict(cfg) if cfg is not None else None,
        "tensors": [{"name": n, "shape": list(params[n].shape)} for n in names],
    }
    payload = [_MAGIC, (json.dumps(header, sort_keys=True) + "\n").encode()]
    payload += [np.ascontiguousarray(params[n], dtype="<f8").tobytes() for n in names]
    atomic_write_bytes(path, b"".join(payload))


def load_checkpoint(path, cfg: ModelConfig | None = None) -> tuple[dict[str, np.ndarray], ModelConfig | None]:
    """Read a checkpoint; when ``cfg`` (or the stored config) is known, shapes are validated."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if not blob.startswith(_MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    end = blob.index(b"\n", len(_MAGIC))
    try:
        header = json.loads(blob[len(_MAGIC) : end])
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: corrupt header: {exc}") from exc
    stored = ModelConfig(**header["model"]) if header.get("model") else None
    cfg = cfg or stored
    expected = param_shapes(cfg) if cfg is not None else None
    params: dict[str, np.ndarray] = {}
    offset = end + 1
    for entry in header["tensors"]:
        name, shape = entry["name"], tuple(entry["shape"])
        if expected is not None:
            if name not in expected:
                raise CheckpointError(f"unexpected tensor {name!r} in checkpoint")
            if expected[name] != shape:
                raise CheckpointError(f"tensor {name!r} has shape {shape}, model expects {expected[name]}")
        n_bytes = 8 * int(np.prod(shape, dtype=np.int64))
        chunk = blob[offset : offset + n_bytes]
        if len(chunk) != n_bytes:
            raise CheckpointError(f"tensor {name!r} truncated")
        params[name] = np.frombuffer(chunk, dtype="<f8").reshape(shape).astype(np.float64)
        offset += n_bytes
    if expected is not None:
        missing = sorted(set(expected) - set(params))
        if missing:
            raise CheckpointError(f"checkpoint is missing tensor {missing[0]!r}")
    return params, stored


def atomic_write_bytes(path, data: bytes) -> None:
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
