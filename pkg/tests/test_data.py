import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from jointvcr import data as D

SMALL = D.GenSpec(n_train=300, n_val=300)


@pytest.fixture(scope="module")
def clean():
    return D.generate(D.GenSpec(n_train=300, n_val=300, noise_prob=0.0))


class TestGenerator:
    def test_sizes_and_ids(self):
        train, val = D.generate(D.GenSpec(n_train=7, n_val=3))
        assert len(train) == 7 and len(val) == 3
        assert train[0].id == "train-000000" and val[2].id == "val-000002"

    def test_every_instance_is_valid(self, clean):
        for inst in clean[0] + clean[1]:
            inst.validate(64)

    def test_shapes(self, clean):
        inst = clean[0][0]
        assert len(inst.question) == D.QUESTION_LEN
        assert np.asarray(inst.object_feats).shape == (D.QUESTION_LEN, 8)
        assert all(len(a) == D.ANSWER_LEN for a in inst.answers)
        assert all(len(r) == D.RATIONALE_LEN for r in inst.rationales)

    def test_untagged_positions_have_zero_features(self, clean):
        for inst in clean[0][:50]:
            feats = np.asarray(inst.object_feats)
            untagged = [i for i in range(D.QUESTION_LEN) if i not in SMALL.key_slots]
            assert np.all(feats[untagged] == 0)

    def test_exactly_one_salient_object(self, clean):
        for inst in clean[0]:
            lead = np.asarray(inst.object_feats)[list(SMALL.key_slots), 0]
            assert (lead > 0).sum() == 1

    def test_hard_negative_present(self, clean):
        # the other question entity always appears in some wrong answer
        for inst in clean[0][:100]:
            entities = {inst.question[s] for s in SMALL.key_slots}
            carried = {t for i, a in enumerate(inst.answers) if i != inst.answer_label for t in a if D.is_key(t)}
            assert len(entities & carried) == 1

    def test_labels_roughly_balanced(self):
        train, _ = D.generate(D.GenSpec(n_train=2000, n_val=1))
        for field in ("answer_label", "rationale_label"):
            freq = np.bincount([getattr(i, field) for i in train], minlength=4) / len(train)
            assert np.all(np.abs(freq - 0.25) <= 0.02)

    def test_byte_identical_across_runs(self):
        a = D.dumps_jsonl(D.generate(SMALL)[0])
        b = D.dumps_jsonl(D.generate(SMALL)[0])
        assert a == b

    def test_seed_changes_data(self):
        a = D.generate(D.GenSpec(n_train=5, n_val=1, seed=0))[0]
        b = D.generate(D.GenSpec(n_train=5, n_val=1, seed=1))[0]
        assert a != b

    def test_prefix_stable_when_growing(self):
        few = D.generate(D.GenSpec(n_train=5, n_val=1))[0]
        many = D.generate(D.GenSpec(n_train=50, n_val=1))[0]
        assert few == many[:5]

    @pytest.mark.parametrize(
        "kwargs",
        [
            {"n_train": 0},
            {"noise_prob": 1.0},
            {"noise_prob": -0.1},
            {"vocab_size": 10},
            {"key_slots": (2, 2)},
            {"key_slots": (0, 9)},
            {"object_feat_dim": 0},
        ],
    )
    def test_spec_validation(self, kwargs):
        with pytest.raises(D.DataError):
            D.GenSpec(**kwargs)


class TestOracle:
    def test_perfect_on_clean_data(self, clean):
        for inst in clean[1]:
            assert D.oracle_answer(inst) == inst.answer_label
            assert D.oracle_rationale(inst, inst.answer_label) == inst.rationale_label

    def test_noise_rate(self):
        _, val = D.generate(D.GenSpec(n_train=1, n_val=2000, noise_prob=0.1))
        acc = np.mean([D.oracle_answer(i) == i.answer_label for i in val])
        # relabelled items still hit gold a quarter of the time
        assert abs(acc - 0.925) <= 0.02

    def test_wrong_answer_points_at_a_wrong_rationale(self, clean):
        for inst in clean[1][:100]:
            for a in range(4):
                r = D.oracle_rationale(inst, a)
                assert 0 <= r < 4
                assert (r == inst.rationale_label) == (a == inst.answer_label)

    def test_token_overlap_alone_is_ambiguous(self, clean):
        # picking any answer that shares a token with the question is right only half the time
        hits = 0
        for inst in clean[1]:
            overlap = [i for i, a in enumerate(inst.answers) if set(a) & set(inst.question[s] for s in SMALL.key_slots)]
            assert len(overlap) == 2
            hits += overlap[0] == inst.answer_label
        assert 0.35 < hits / len(clean[1]) < 0.65


class TestCollate:
    def test_shapes(self, clean):
        b = D.collate(clean[0][:5])
        assert b.question.shape == (5, D.QUESTION_LEN)
        assert b.object_feats.shape == (5, D.QUESTION_LEN, 8)
        assert b.answers.shape == (5, 4, D.ANSWER_LEN)
        assert b.rationales.shape == (5, 4, D.RATIONALE_LEN)
        assert len(b) == 5

    def test_empty(self):
        with pytest.raises(D.DataError):
            D.collate([])

    def test_ragged(self, clean):
        odd = D.Instance(**{**clean[0][1].__dict__, "question": clean[0][1].question + [40]})
        odd.object_feats = np.zeros((7, 8))
        with pytest.raises(D.DataError, match="share"):
            D.collate([clean[0][0], odd])


class TestJsonl:
    def test_round_trip(self, tmp_path, clean):
        path = tmp_path / "train.jsonl"
        D.save_jsonl(clean[0][:20], path)
        assert D.load_jsonl(path) == clean[0][:20]

    def _write(self, tmp_path, obj):
        path = tmp_path / "x.jsonl"
        path.write_text(json.dumps(obj) + "\n")
        return path

    def _good(self, clean):
        return D.instance_to_dict(clean[0][0])

    def test_bad_label_names_line_and_field(self, tmp_path, clean):
        good = self._good(clean)
        path = tmp_path / "x.jsonl"
        path.write_text(json.dumps(good) + "\n" + json.dumps({**good, "answer_label": 5}) + "\n")
        with pytest.raises(D.DataError, match=r"x\.jsonl:2: answer_label=5 must be in 0\.\.3"):
            D.load_jsonl(path)

    def test_missing_field(self, tmp_path, clean):
        obj = self._good(clean)
        del obj["rationales"]
        with pytest.raises(D.DataError, match="missing field 'rationales'"):
            D.load_jsonl(self._write(tmp_path, obj))

    def test_unknown_field(self, tmp_path, clean):
        with pytest.raises(D.DataError, match="unknown field 'extra'"):
            D.load_jsonl(self._write(tmp_path, {**self._good(clean), "extra": 1}))

    def test_token_out_of_vocab(self, tmp_path, clean):
        obj = self._good(clean)
        obj["question"][0] = 64
        with pytest.raises(D.DataError, match="question"):
            D.load_jsonl(self._write(tmp_path, obj))

    def test_malformed_json(self, tmp_path):
        path = tmp_path / "x.jsonl"
        path.write_text("{not json\n")
        with pytest.raises(D.DataError, match=":1: malformed JSON"):
            D.load_jsonl(path)

    def test_empty_file(self, tmp_path):
        path = tmp_path / "empty.jsonl"
        path.write_text("")
        assert D.load_jsonl(path) == []

    def test_blank_lines_are_skipped(self, tmp_path, clean):
        path = tmp_path / "x.jsonl"
        path.write_text("\n" + D.dumps_jsonl(clean[0][:2]) + "\n")
        assert len(D.load_jsonl(path)) == 2

    @given(st.integers(-3, 10))
    @settings(max_examples=30, deadline=None)
    def test_label_validation(self, label):
        inst = D.generate(D.GenSpec(n_train=1, n_val=1))[0][0]
        inst.rationale_label = label
        if 0 <= label < 4:
            inst.validate()
        else:
            with pytest.raises(D.DataError, match="rationale_label"):
                inst.validate()
