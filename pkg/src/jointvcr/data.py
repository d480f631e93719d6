"""Synthetic four-answer / four-rationale items with a planted answer->rationale rule.

Vocabulary layout (``vocab_size`` 64): id 0 is unused, ids 1..16 are entity
tokens, ids 17..63 are filler.

Each question carries two entities at its tagged slots, each with an 8-d
Gaussian object feature. Exactly one tagged object is *salient* (positive
leading feature); the gold answer mentions the salient entity's key. One
distractor mentions the other question entity and the remaining two mention
entities absent from the question, so answering needs the object features,
not just token overlap. Each rationale carries the cue of one answer's key,
so the right rationale is whichever matches the chosen answer.

With probability ``noise_prob`` an item's labels are redrawn uniformly,
capping any predictor near ``(1 - noise_prob) + noise_prob / 4``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .model import Batch

N_ENTITIES = 16
ENTITY_BASE = 1
FILLER_BASE = ENTITY_BASE + N_ENTITIES
MIN_VOCAB = FILLER_BASE + 2

QUESTION_LEN = 6
ANSWER_LEN = 4
RATIONALE_LEN = 5
N_CHOICES = 4

class DataError(ValueError):
    """Invalid instance data or generator settings."""


@dataclass
class Instance:
    question: list[int]
    object_feats: np.ndarray  # [len(question), f]
    answers: list[list[int]]
    rationales: list[list[int]]
    answer_label: int
    rationale_label: int
    id: str = ""

    def __eq__(self, other):
        if not isinstance(other, Instance):
            return NotImplemented
        return (
            self.id == other.id
            and self.question == other.question
            and self.answers == other.answers
            and self.rationales == other.rationales
            and self.answer_label == other.answer_label
            and self.rationale_label == other.rationale_label
            and np.array_equal(self.object_feats, other.object_feats)
        )

    def validate(self, vocab_size: int = 64) -> None:
        for name in ("answer_label", "rationale_label"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or not 0 <= v < N_CHOICES:
                raise DataError(f"{name}={v!r} must be in 0..3")
        if len(self.answers) != N_CHOICES or len(self.rationales) != N_CHOICES:
            raise DataError("need exactly 4 answers and 4 rationales")
        for name, seqs in (("question", [self.question]), ("answers", self.answers), ("rationales", self.rationales)):
            for seq in seqs:
                if not seq:
                    raise DataError(f"{name} contains an empty sequence")
                if any((not isinstance(t, (int, np.integer))) or t < 0 or t >= vocab_size for t in seq):
                    raise DataError(f"{name} has a token id outside 0..{vocab_size - 1}")
        feats = np.asarray(self.object_feats)
        if feats.ndim != 2 or feats.shape[0] != len(self.question):
            raise DataError(f"object_feats shape {feats.shape} does not match question length {len(self.question)}")


@dataclass(frozen=True)
class GenSpec:
    n_train: int = 2000
    n_val: int = 2000
    vocab_size: int = 64
    key_slots: tuple[int, int] = (1, 4)
    noise_prob: float = 0.1
    object_feat_dim: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.n_train < 1 or self.n_val < 1:
            raise DataError("n_train and n_val must be >= 1")
        if not 0.0 <= self.noise_prob < 1.0:
            raise DataError(f"noise_prob must lie in [0, 1), got {self.noise_prob}")
        if self.vocab_size < MIN_VOCAB:
            raise DataError(f"vocab_size must be >= {MIN_VOCAB}")
        if len(self.key_slots) != 2 or len(set(self.key_slots)) != 2:
            raise DataError("key_slots must name two distinct positions")
        if any(not 0 <= s < QUESTION_LEN for s in self.key_slots):
            raise DataError(f"key_slots must lie in 0..{QUESTION_LEN - 1}")
        if self.object_feat_dim < 1:
            raise DataError("object_feat_dim must be >= 1")


def key_of_entity(entity: int) -> int:
    """Key token an answer uses to refer to ``entity`` (the entity token itself)."""
    return entity


def cue_of_key(key: int) -> int:
    """Token a rationale uses to back an answer with ``key`` (the key itself)."""
    return key


def is_key(token: int) -> bool:
    return ENTITY_BASE <= token < ENTITY_BASE + N_ENTITIES


def salient_slot(object_feats: np.ndarray, key_slots: Sequence[int]) -> int:
    return key_slots[0] if object_feats[key_slots[0], 0] > 0 else key_slots[1]


def _make_instance(rng: np.random.Generator, spec: GenSpec, uid: str) -> Instance:
    n_filler = spec.vocab_size - FILLER_BASE
    question = list(FILLER_BASE + rng.integers(0, n_filler, size=QUESTION_LEN))
    e1, e2 = (int(e) for e in ENTITY_BASE + rng.choice(N_ENTITIES, size=2, replace=False))
    s1, s2 = spec.key_slots
    question[s1], question[s2] = e1, e2
    feats = np.zeros((QUESTION_LEN, spec.object_feat_dim))
    feats[[s1, s2]] = rng.standard_normal((2, spec.object_feat_dim))
    # exactly one tagged object is salient: positive leading feature
    lead = np.abs(feats[[s1, s2], 0])
    first_salient = rng.uniform() < 0.5
    feats[s1, 0], feats[s2, 0] = (lead[0], -lead[1]) if first_salient else (-lead[0], lead[1])
    gold_entity, other_entity = (e1, e2) if first_salient else (e2, e1)

    keys = [key_of_entity(gold_entity), key_of_entity(other_entity)]
    spare = [key_of_entity(e) for e in range(ENTITY_BASE, ENTITY_BASE + N_ENTITIES) if key_of_entity(e) not in keys]
    keys += [int(k) for k in rng.choice(spare, size=2, replace=False)]

    order = rng.permutation(N_CHOICES)  # order[slot] = which key sits there
    answers, rationales = [], []
    for slot in range(N_CHOICES):
        ans = list(FILLER_BASE + rng.integers(0, n_filler, size=ANSWER_LEN))
        ans[rng.integers(ANSWER_LEN)] = keys[order[slot]]
        answers.append([int(t) for t in ans])
    r_order = rng.permutation(N_CHOICES)
    for slot in range(N_CHOICES):
        cue = cue_of_key(keys[r_order[slot]])
        rat = list(FILLER_BASE + rng.integers(0, n_filler, size=RATIONALE_LEN))
        rat[rng.integers(RATIONALE_LEN)] = cue
        rationales.append([int(t) for t in rat])
    answer_label = int(np.flatnonzero(order == 0)[0])
    rationale_label = int(np.flatnonzero(r_order == 0)[0])
    if rng.uniform() < spec.noise_prob:
        answer_label = int(rng.integers(N_CHOICES))
        rationale_label = int(rng.integers(N_CHOICES))
    return Instance(
        question=[int(t) for t in question],
        object_feats=feats,
        answers=answers,
        rationales=rationales,
        answer_label=answer_label,
        rationale_label=rationale_label,
        id=uid,
    )


def generate_split(spec: GenSpec, split: str, n: int) -> list[Instance]:
    code = {"train": 0, "val": 1}.get(split, 2)
    # one derived stream per item so generation can be sharded by index
    return [_make_instance(np.random.default_rng([spec.seed, code, i]), spec, f"{split}-{i:06d}") for i in range(n)]


def generate(spec: GenSpec) -> tuple[list[Instance], list[Instance]]:
    return generate_split(spec, "train", spec.n_train), generate_split(spec, "val", spec.n_val)


# -- oracle ------------------------------------------------------------------


def _find(seqs: Sequence[Sequence[int]], token: int) -> int:
    for i, seq in enumerate(seqs):
        if token in seq:
            return i
    return -1


def oracle_answer(inst: Instance, key_slots: Sequence[int] = (1, 4)) -> int:
    """Decode the salient entity's key and return the answer that carries it."""
    entity = inst.question[salient_slot(np.asarray(inst.object_feats), key_slots)]
    return _find(inst.answers, key_of_entity(entity))


def oracle_rationale(inst: Instance, answer_index: int) -> int:
    """Rationale whose cue matches the key of the given answer."""
    ans = inst.answers[answer_index]
    keys = [t for t in ans if is_key(t)]
    if not keys:
        return -1
    return _find(inst.rationales, cue_of_key(keys[0]))


# -- batching ----------------------------------------------------------------


def collate(instances: Sequence[Instance]) -> Batch:
    if not instances:
        raise DataError("cannot collate an empty batch")
    try:
        return Batch(
            question=np.array([i.question for i in instances], dtype=np.int64),
            object_feats=np.array([np.asarray(i.object_feats, dtype=np.float64) for i in instances]),
            answers=np.array([i.answers for i in instances], dtype=np.int64),
            rationales=np.array([i.rationales for i in instances], dtype=np.int64),
            answer_label=np.array([i.answer_label for i in instances], dtype=np.int64),
            rationale_label=np.array([i.rationale_label for i in instances], dtype=np.int64),
        )
    except ValueError as exc:
        raise DataError(f"instances in a batch must share sequence lengths: {exc}") from exc


# -- JSONL -------------------------------------------------------------------

_FIELDS = ("id", "question", "object_feats", "answers", "rationales", "answer_label", "rationale_label")


def instance_to_dict(inst: Instance) -> dict:
    return {
        "id": inst.id,
        "question": list(inst.question),
        "object_feats": np.asarray(inst.object_feats, dtype=np.float64).tolist(),
        "answers": [list(a) for a in inst.answers],
        "rationales": [list(r) for r in inst.rationales],
        "answer_label": int(inst.answer_label),
        "rationale_label": int(inst.rationale_label),
    }


def dumps_jsonl(instances: Iterable[Instance]) -> str:
    return "".join(json.dumps(instance_to_dict(i), sort_keys=True) + "\n" for i in instances)


def save_jsonl(instances: Iterable[Instance], path) -> None:
    from .model import atomic_write_bytes

    atomic_write_bytes(path, dumps_jsonl(instances).encode("utf-8"))


def load_jsonl(path, vocab_size: int = 64) -> list[Instance]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: malformed JSON: {exc.msg}") from exc
            if not isinstance(obj, dict):
                raise DataError(f"{path}:{lineno}: expected a JSON object")
            missing = [f for f in _FIELDS if f not in obj]
            if missing:
                raise DataError(f"{path}:{lineno}: missing field {missing[0]!r}")
            extra = sorted(set(obj) - set(_FIELDS))
            if extra:
                raise DataError(f"{path}:{lineno}: unknown field {extra[0]!r}")
            inst = Instance(
                question=obj["question"],
                object_feats=np.asarray(obj["object_feats"], dtype=np.float64),
                answers=obj["answers"],
                rationales=obj["rationales"],
                answer_label=obj["answer_label"],
                rationale_label=obj["rationale_label"],
                id=str(obj["id"]),
            )
            try:
                inst.validate(vocab_size)
            except DataError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from exc
            out.append(inst)
    return out
