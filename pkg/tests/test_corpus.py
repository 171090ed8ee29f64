import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.linear_model import LogisticRegression

from leakbench.corpus import (
    AttributeSchema,
    AttributeSpec,
    Corpus,
    Document,
    SynthConfig,
    attribute_frequencies,
    attribute_histogram_variance,
    generate_synthetic,
    load_jsonl,
    ngram_overlap,
    preferred_class,
    split,
    tokenize,
    write_jsonl,
)
from leakbench.errors import ConfigError, EmptyDataset, ParseError, SchemaError
from leakbench.textmodel import ModelConfig, featurize_many

SCHEMA = AttributeSchema([AttributeSpec("gender", ("F", "M")), AttributeSpec("age", ("young", "old"))])


def doc(i, tokens, **attrs):
    return Document(str(i), tuple(tokens), 0, attrs)


def probe_accuracy(corpus, attribute):
    """Held-out accuracy of a logistic probe on raw hashed features."""
    X = featurize_many(corpus.docs, ModelConfig(feature_dim=4096))
    y = np.array([corpus.schema.index(attribute, d.attributes[attribute]) for d in corpus])
    half = len(y) // 2
    clf = LogisticRegression(max_iter=2000).fit(X[:half], y[:half])
    return clf.score(X[half:], y[half:]), max(np.mean(y[half:]), 1 - np.mean(y[half:]))


class TestTokenize:
    def test_lowercase_and_punctuation(self):
        assert tokenize("Good phone!  Great, really.") == ["good", "phone", "great", "really"]

    def test_unicode_words(self):
        assert tokenize("Café naïve") == ["café", "naïve"]


class TestSchema:
    def test_index_and_names(self):
        assert SCHEMA.names == ["gender", "age"]
        assert SCHEMA.index("age", "old") == 1

    def test_unknown_attribute_and_value(self):
        with pytest.raises(SchemaError):
            SCHEMA["height"]
        with pytest.raises(SchemaError):
            SCHEMA.index("gender", "X")

    def test_entity_attributes_are_binary(self):
        with pytest.raises(SchemaError):
            AttributeSpec("org", ("a", "b", "c"), kind="entity_presence")

    def test_duplicates(self):
        with pytest.raises(SchemaError):
            AttributeSpec("g", ("a", "a"))
        with pytest.raises(SchemaError):
            AttributeSchema([AttributeSpec("g", ("a", "b")), AttributeSpec("g", ("c", "d"))])

    def test_dict_round_trip(self):
        assert AttributeSchema.from_dict(SCHEMA.to_dict()) == SCHEMA


class TestJsonl:
    def write(self, path, lines):
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        return path

    def test_reference_line(self, tmp_path):
        p = self.write(
            tmp_path / "c.jsonl",
            ['{"id":"1","text":"Good phone","label":"pos","attributes":{"gender":"F"}}'],
        )
        corpus = load_jsonl(p, SCHEMA)
        d = corpus.docs[0]
        assert d.tokens == ("good", "phone")
        assert d.attributes == {"gender": "F"}
        assert corpus.label_names == ["pos"] and d.task_label == 0

    def test_file_order_and_label_mapping(self, tmp_path):
        p = self.write(
            tmp_path / "c.jsonl",
            [
                '{"id":"a","text":"x","label":"pos"}',
                "",
                '{"id":"b","text":"y","label":"neg"}',
            ],
        )
        corpus = load_jsonl(p, SCHEMA)
        assert [d.id for d in corpus] == ["a", "b"]
        assert corpus.label_names == ["neg", "pos"]
        assert [d.task_label for d in corpus] == [1, 0]

    def test_integer_labels(self, tmp_path):
        p = self.write(tmp_path / "c.jsonl", ['{"id":1,"text":"x","label":2}', '{"id":2,"text":"y","label":0}'])
        corpus = load_jsonl(p, SCHEMA)
        assert [d.task_label for d in corpus] == [2, 0]
        assert corpus.label_names == ["0", "1", "2"]

    def test_empty_file(self, tmp_path):
        with pytest.raises(EmptyDataset):
            load_jsonl(self.write(tmp_path / "e.jsonl", [""]), SCHEMA)

    def test_parse_error_has_line_number(self, tmp_path):
        p = self.write(tmp_path / "c.jsonl", ['{"id":"1","text":"ok","label":"a"}', "{not json"])
        with pytest.raises(ParseError) as err:
            load_jsonl(p, SCHEMA)
        assert err.value.line == 2

    def test_missing_fields(self, tmp_path):
        with pytest.raises(ParseError):
            load_jsonl(self.write(tmp_path / "c.jsonl", ['{"id":"1","text":"ok"}']), SCHEMA)

    def test_unknown_attribute_value(self, tmp_path):
        p = self.write(tmp_path / "c.jsonl", ['{"id":"1","text":"ok","label":"a","attributes":{"gender":"X"}}'])
        with pytest.raises(SchemaError):
            load_jsonl(p, SCHEMA)

    def test_round_trip(self, tmp_path):
        corpus = generate_synthetic(SynthConfig(size=20, seed=1))
        write_jsonl(corpus, tmp_path / "r.jsonl")
        back = load_jsonl(tmp_path / "r.jsonl", corpus.schema, corpus.label_names)
        assert back.docs == corpus.docs


class TestSynthetic:
    def test_deterministic(self):
        a = generate_synthetic(SynthConfig(size=50, seed=7))
        b = generate_synthetic(SynthConfig(size=50, seed=7))
        assert a.docs == b.docs

    def test_seed_changes_corpus(self):
        a = generate_synthetic(SynthConfig(size=50, seed=7))
        b = generate_synthetic(SynthConfig(size=50, seed=8))
        assert [d.tokens for d in a] != [d.tokens for d in b]

    def test_shape_of_documents(self):
        cfg = SynthConfig(size=100, seed=2)
        corpus = generate_synthetic(cfg)
        assert len(corpus) == 100
        for d in corpus:
            assert cfg.doc_length[0] <= len(d.tokens) <= cfg.doc_length[1]
            assert set(d.attributes) == {"gender", "age"}
            assert 0 <= d.task_label < cfg.num_classes
        assert len({d.id for d in corpus}) == 100

    @pytest.mark.parametrize(
        "kwargs",
        [
            {"task_vocab": 0},
            {"doc_length": (10, 5)},
            {"default_leakage": 1.5},
            {"leakage": {"height": 0.5}},
            {"attribute_marginals": {"gender": [0.2, 0.2]}},
            {"label_marginal": (0.5, 0.5)},
            {"num_classes": 1},
        ],
    )
    def test_invalid_config(self, kwargs):
        with pytest.raises(ConfigError):
            SynthConfig(**kwargs)

    def test_marginals_are_respected(self):
        corpus = generate_synthetic(SynthConfig(size=3000, seed=0, attribute_marginals={"gender": [0.8, 0.2]}))
        np.testing.assert_allclose(attribute_frequencies(corpus, "gender"), [0.8, 0.2], atol=0.03)

    def test_dict_round_trip(self):
        cfg = SynthConfig(label_marginal=(0.4, 0.3, 0.2, 0.1), leakage={"age": 0.3})
        assert SynthConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg

    def test_preferred_classes_cycle(self):
        cfg = SynthConfig()
        assert [preferred_class(cfg, a, v) for a in range(2) for v in range(2)] == [0, 1, 2, 3]

    def test_zero_leakage_probe_is_at_majority(self):
        corpus = generate_synthetic(SynthConfig(size=2000, seed=5, default_leakage=0.0))
        acc, majority = probe_accuracy(corpus, "gender")
        assert abs(acc - majority) <= 0.03

    def test_full_leakage_probe_is_near_perfect(self):
        corpus = generate_synthetic(SynthConfig(size=2000, seed=5, default_leakage=1.0))
        acc, _ = probe_accuracy(corpus, "gender")
        assert acc >= 0.98

    def test_probe_accuracy_grows_with_leakage(self):
        accs = [probe_accuracy(generate_synthetic(SynthConfig(size=2000, seed=6, default_leakage=r)), "age")[0]
                for r in (0.0, 0.4, 0.8)]
        assert accs[0] <= accs[1] + 0.02 and accs[1] <= accs[2] + 0.02

    def test_domain_shift_moves_vocabulary(self):
        same = generate_synthetic(SynthConfig(size=200, seed=1))
        cross = generate_synthetic(SynthConfig(size=200, seed=1, domain_shift=0.75, domain_tag="cross"))
        assert ngram_overlap(same.docs, cross.docs, 1) < 0.9
        assert all(d.domain_tag == "cross" for d in cross)


class TestSplit:
    corpus = generate_synthetic(SynthConfig(size=1000, seed=0))

    def test_sizes(self):
        sp = split(self.corpus, seed=0)
        assert len(sp.victim) == 500
        assert len(sp.query) == 250 and len(sp.aux) == 250

    def test_disjoint_and_covering(self):
        sp = split(self.corpus, seed=1, aux_fraction=0.3)
        ids = [d.id for part in (sp.victim, sp.query, sp.aux) for d in part]
        assert len(ids) == len(set(ids)) == len(self.corpus)

    def test_odd_size_halves_within_one(self):
        sp = split(self.corpus.subset(self.corpus.docs[:7]), seed=0)
        assert abs(len(sp.victim) - (len(sp.query) + len(sp.aux))) <= 1

    def test_same_seed_same_split(self):
        assert split(self.corpus, 3).to_ids() == split(self.corpus, 3).to_ids()
        assert split(self.corpus, 3).to_ids() != split(self.corpus, 4).to_ids()

    def test_too_small(self):
        with pytest.raises(EmptyDataset):
            split(self.corpus.subset(self.corpus.docs[:3]), seed=0)

    def test_bad_fraction(self):
        with pytest.raises(ConfigError):
            split(self.corpus, 0, aux_fraction=1.0)


class TestOverlap:
    def test_reference_example(self):
        ref = [doc(0, ["a", "b"]), doc(1, ["c"])]
        query = [doc(2, ["b", "c", "d"])]
        assert ngram_overlap(ref, query, 1) == pytest.approx(2 / 3)

    def test_identical_and_disjoint(self):
        a = [doc(0, ["a", "b", "c", "d", "e", "f"])]
        for n in (1, 2, 5):
            assert ngram_overlap(a, a, n) == 1.0
        assert ngram_overlap(a, [doc(1, ["x", "y"])], 1) == 0.0

    def test_invalid_n(self):
        with pytest.raises(ConfigError):
            ngram_overlap([doc(0, ["a"])], [doc(0, ["a"])], 0)

    @settings(max_examples=50, deadline=None)
    @given(
        st.lists(st.lists(st.sampled_from("abcde"), min_size=1, max_size=8), min_size=1, max_size=6),
        st.lists(st.lists(st.sampled_from("abcdef"), min_size=1, max_size=8), min_size=1, max_size=6),
        st.integers(1, 3),
        st.randoms(),
    )
    def test_order_invariant_and_bounded(self, ref, query, n, rnd):
        R = [doc(i, t) for i, t in enumerate(ref)]
        Q = [doc(i, t) for i, t in enumerate(query)]
        v = ngram_overlap(R, Q, n)
        rnd.shuffle(R)
        rnd.shuffle(Q)
        assert v == ngram_overlap(R, Q, n)
        assert 0.0 <= v <= 1.0


class TestVariance:
    def make(self, n_f, n_m):
        docs = [doc(i, ["x"], gender="F") for i in range(n_f)] + [doc(100 + i, ["x"], gender="M") for i in range(n_m)]
        return Corpus(docs, SCHEMA, ["a"])

    def test_examples(self):
        assert attribute_histogram_variance(self.make(50, 50), "gender") == 0.0
        assert attribute_histogram_variance(self.make(100, 0), "gender") == pytest.approx(0.25)
        assert attribute_histogram_variance(self.make(70, 30), "gender") == pytest.approx(0.04)

    def test_unknown_attribute(self):
        with pytest.raises(SchemaError):
            attribute_histogram_variance(self.make(1, 1), "height")

    def test_no_carriers(self):
        with pytest.raises(EmptyDataset):
            attribute_histogram_variance(self.make(1, 1), "age")
