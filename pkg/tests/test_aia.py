import csv

import numpy as np
import pytest

from conftest import SMALL_MODEL
from leakbench.aia import (
    InferenceConfig,
    RepresentationDataset,
    attack_accuracy,
    gold_indices,
    harvest_representations,
    infer_attribute_indices,
    infer_attributes,
    majority_baseline,
    plain_baseline_model,
    representations,
    train_inference,
    write_predictions_csv,
)
from leakbench.corpus import AttributeSchema, AttributeSpec, Document
from leakbench.errors import EmptyDataset, ShapeError
from leakbench.textmodel import featurize_many, forward

SCHEMA = AttributeSchema([AttributeSpec("gender", ("f", "m")), AttributeSpec("age", ("young", "old"))])


def make_rd(targets, reps=None, values=(("a", "b"),)):
    schema = AttributeSchema([AttributeSpec(f"x{i}", v) for i, v in enumerate(values)])
    targets = {f"x{i}": np.asarray(t, dtype=np.int64) for i, t in enumerate(targets)}
    n = len(next(iter(targets.values())))
    if reps is None:
        reps = np.random.default_rng(0).normal(size=(n, 4))
    return RepresentationDataset([str(i) for i in range(n)], reps, targets, schema)


class TestHarvest:
    def test_row_counts(self, small_victim, small_split):
        docs = small_split.aux[:100]
        rd = harvest_representations(small_victim.model, docs, SCHEMA)
        assert rd.reps.shape == (100, SMALL_MODEL.representation_dim)
        for name in ("gender", "age"):
            assert len(rd.rows(name)[1]) == 100

    def test_equals_forward(self, small_victim, small_split):
        docs = small_split.aux[:10]
        X = featurize_many(docs, SMALL_MODEL)
        np.testing.assert_array_equal(representations(small_victim.model, docs), forward(small_victim.model, X)[0])

    def test_identical_docs(self, small_victim, small_split):
        d = small_split.aux[0]
        r = representations(small_victim.model, [d, d])
        np.testing.assert_array_equal(r[0], r[1])

    def test_missing_attribute_is_excluded(self, small_victim, small_split):
        docs = list(small_split.aux[:5])
        docs[2] = Document(docs[2].id, docs[2].tokens, docs[2].task_label, {"gender": "f"})
        rd = harvest_representations(small_victim.model, docs, SCHEMA)
        assert len(rd.rows("gender")[1]) == 5 and len(rd.rows("age")[1]) == 4


class TestTrainInference:
    def test_separable(self):
        rng = np.random.default_rng(1)
        y = rng.integers(2, size=400)
        reps = rng.normal(size=(400, 8))
        reps[:, 0] += np.where(y == 1, 3.0, -3.0)
        f = train_inference(make_rd([y], reps), InferenceConfig(seed=0))
        assert attack_accuracy(f.predict_indices(reps)["x0"], y) >= 0.95

    def test_constant_attribute(self):
        y = np.ones(50, dtype=np.int64)
        rd = make_rd([y])
        f = train_inference(rd)
        test = np.random.default_rng(7).normal(size=(30, 4))
        pred = f.predict_indices(test)["x0"]
        assert attack_accuracy(pred, np.ones(30, dtype=np.int64)) == 1.0

    def test_deterministic(self):
        rd = make_rd([np.arange(60) % 2, np.arange(60) % 3], values=(("a", "b"), ("p", "q", "r")))
        a, b = train_inference(rd), train_inference(rd)
        for name in ("x0", "x1"):
            for pa, pb in zip(a.heads[name].mlp.params, b.heads[name].mlp.params):
                np.testing.assert_array_equal(pa, pb)
        assert a.heads["x1"].mlp.config.num_classes == 3
        assert a.heads["x0"].mlp.config.hidden_dims == (4,)

    def test_empty_attribute(self):
        with pytest.raises(EmptyDataset):
            train_inference(make_rd([np.full(10, -1)]))

    def test_dimension_mismatch(self, small_victim, small_split):
        f = train_inference(make_rd([np.arange(20) % 2]))
        with pytest.raises(ShapeError):
            infer_attribute_indices(f, small_victim.model, small_split.test[:3])
        with pytest.raises(ShapeError):
            f.predict_indices(np.zeros((2, 5)))


@pytest.fixture(scope="module")
def fitted(small_victim, small_split):
    return train_inference(harvest_representations(small_victim.model, small_split.aux, SCHEMA))


class TestInfer:
    def test_pipeline_is_composition(self, fitted, small_victim, small_split):
        docs = small_split.victim[:40]
        reps = forward(small_victim.model, featurize_many(docs, SMALL_MODEL))[0]
        expected = fitted.predict_indices(reps)
        got = infer_attribute_indices(fitted, small_victim.model, docs)
        for name in expected:
            np.testing.assert_array_equal(got[name], expected[name])
        values = infer_attributes(fitted, small_victim.model, docs)
        assert values["gender"] == [("f", "m")[i] for i in expected["gender"]]

    def test_stepwise_oracle(self, fitted, small_victim, small_split):
        # per-head forward by hand: standardize, relu hidden layer, argmax of logits
        docs = small_split.victim[:20]
        reps = representations(small_victim.model, docs)
        head = fitted.heads["age"]
        z = (reps - head.mean) / head.scale
        W1, W2 = head.mlp.weights
        b1, b2 = head.mlp.biases
        logits = np.maximum(z @ W1 + b1, 0.0) @ W2 + b2
        np.testing.assert_array_equal(infer_attribute_indices(fitted, small_victim.model, docs)["age"],
                                      np.argmax(logits, axis=1))

    def test_uses_tokens_only(self, fitted, small_victim, small_split):
        docs = small_split.victim[:30]
        flipped = [Document(d.id, d.tokens, d.task_label,
                            {"gender": "m" if d.attributes["gender"] == "f" else "f", "age": "young"})
                   for d in docs]
        a = infer_attribute_indices(fitted, small_victim.model, docs)
        b = infer_attribute_indices(fitted, small_victim.model, flipped)
        for name in a:
            np.testing.assert_array_equal(a[name], b[name])

    def test_predictions_csv(self, tmp_path, fitted, small_victim, small_split):
        docs = small_split.victim[:5]
        pred = infer_attribute_indices(fitted, small_victim.model, docs)
        write_predictions_csv(tmp_path / "p.csv", docs, pred, SCHEMA)
        rows = list(csv.DictReader(open(tmp_path / "p.csv", encoding="utf-8")))
        assert len(rows) == 10
        assert rows[0]["doc_id"] == docs[0].id and rows[0]["gold"] == docs[0].attributes["gender"]
        assert {r["attribute"] for r in rows} == {"gender", "age"}


class TestMajority:
    def test_seventy_thirty(self):
        y = np.array([0] * 30 + [1] * 70)
        mb = majority_baseline(make_rd([y]), "x0")
        assert mb.index == 1 and mb.value == "b"
        assert attack_accuracy(mb.predict_indices(100), y) == pytest.approx(0.7)

    def test_tie_goes_to_lowest_index(self):
        assert majority_baseline(make_rd([[1, 0, 1, 0]]), "x0").index == 0

    def test_three_values(self):
        y = [0] * 50 + [1] * 30 + [2] * 20
        mb = majority_baseline(make_rd([y], values=(("p", "q", "r"),)), "x0")
        assert mb.value == "p"

    def test_empty(self):
        with pytest.raises(EmptyDataset):
            majority_baseline(make_rd([[-1, -1]]), "x0")


class TestPlainBaseline:
    def test_untrained_and_usable(self, small_split):
        m = plain_baseline_model(SMALL_MODEL, seed=5)
        assert not m.trained and m.config.seed == 5
        rd = harvest_representations(m, small_split.aux[:20], SCHEMA)
        assert np.all(np.isfinite(rd.reps))

    def test_seeded(self):
        a, b = plain_baseline_model(SMALL_MODEL, 2), plain_baseline_model(SMALL_MODEL, 3)
        assert not np.array_equal(a.weights[0], b.weights[0])
        np.testing.assert_array_equal(a.weights[0], plain_baseline_model(SMALL_MODEL, 2).weights[0])


class TestScoring:
    def test_gold_and_accuracy(self, small_split):
        docs = small_split.test[:10]
        g = gold_indices(docs, SCHEMA, "gender")
        assert g.tolist() == [0 if d.attributes["gender"] == "f" else 1 for d in docs]
        assert attack_accuracy(g, g) == 1.0

    def test_missing_gold_skipped(self):
        assert attack_accuracy(np.array([0, 1, 1]), np.array([0, -1, 0])) == 0.5
        with pytest.raises(EmptyDataset):
            attack_accuracy(np.array([0]), np.array([-1]))
