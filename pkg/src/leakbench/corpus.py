"""Documents, attribute schemas, the synthetic corpus generator and splits.

The synthetic generator stands in for real review/news/blog corpora.  Every
document carries a task label plus sensitive attributes, and the generator
exposes one knob per attribute, ``leakage``, that controls how strongly the
attribute leaves a footprint in the visible tokens:

* attribute marker tokens are drawn from the pool of the true attribute value
  with probability ``leakage`` (otherwise from the pool of a random value);
* with probability ``leakage * label_coupling`` the task label is tied to the
  attribute value, which is what makes a task model pick the attribute up.

At ``leakage = 0`` tokens are independent of the attribute.
"""
from __future__ import annotations

import json
import re
from collections import Counter
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from leakbench.errors import ConfigError, EmptyDataset, ParseError, SchemaError

DEMOGRAPHIC = "demographic"
ENTITY_PRESENCE = "entity_presence"

_TOKEN_RE = re.compile(r"\w+", re.UNICODE)


def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


@dataclass(frozen=True)
class Document:
    id: str
    tokens: tuple[str, ...]
    task_label: int
    attributes: dict = field(default_factory=dict, hash=False, compare=True)
    domain_tag: str = "same"

    @property
    def text(self) -> str:
        return " ".join(self.tokens)


@dataclass(frozen=True)
class AttributeSpec:
    name: str
    values: tuple[str, ...]
    kind: str = DEMOGRAPHIC

    def __post_init__(self):
        object.__setattr__(self, "values", tuple(str(v) for v in self.values))
        if len(self.values) < 2:
            raise SchemaError(f"attribute {self.name!r} needs at least two values")
        if len(set(self.values)) != len(self.values):
            raise SchemaError(f"attribute {self.name!r} has duplicate values")
        if self.kind not in (DEMOGRAPHIC, ENTITY_PRESENCE):
            raise SchemaError(f"unknown attribute kind {self.kind!r}")
        if self.kind == ENTITY_PRESENCE and len(self.values) != 2:
            raise SchemaError(f"entity attribute {self.name!r} must be binary")


class AttributeSchema:
    """Ordered collection of :class:`AttributeSpec`.

    For entity-presence attributes the second value means "present".
    """

    def __init__(self, specs: Sequence[AttributeSpec]):
        self.specs = tuple(specs)
        self._by_name = {s.name: s for s in self.specs}
        if len(self._by_name) != len(self.specs):
            raise SchemaError("duplicate attribute names")

    def __iter__(self) -> Iterator[AttributeSpec]:
        return iter(self.specs)

    def __len__(self) -> int:
        return len(self.specs)

    def __contains__(self, name) -> bool:
        return name in self._by_name

    def __eq__(self, other) -> bool:
        return isinstance(other, AttributeSchema) and self.specs == other.specs

    def __getitem__(self, name: str) -> AttributeSpec:
        try:
            return self._by_name[name]
        except KeyError:
            raise SchemaError(f"unknown attribute {name!r}") from None

    @property
    def names(self) -> list[str]:
        return [s.name for s in self.specs]

    def index(self, name: str, value: str) -> int:
        spec = self[name]
        try:
            return spec.values.index(str(value))
        except ValueError:
            raise SchemaError(f"value {value!r} not allowed for attribute {name!r}") from None

    def validate(self, doc: Document) -> None:
        for name, value in doc.attributes.items():
            self.index(name, value)

    def to_dict(self) -> list[dict]:
        return [{"name": s.name, "values": list(s.values), "kind": s.kind} for s in self.specs]

    @classmethod
    def from_dict(cls, d: list[dict]) -> "AttributeSchema":
        return cls([AttributeSpec(x["name"], tuple(x["values"]), x.get("kind", DEMOGRAPHIC)) for x in d])


@dataclass
class Corpus:
    docs: list[Document]
    schema: AttributeSchema
    label_names: list[str]

    def __len__(self) -> int:
        return len(self.docs)

    def __iter__(self) -> Iterator[Document]:
        return iter(self.docs)

    def __getitem__(self, i):
        return self.docs[i]

    def labels(self) -> np.ndarray:
        return np.array([d.task_label for d in self.docs], dtype=np.int64)

    def subset(self, docs: Sequence[Document]) -> "Corpus":
        return Corpus(list(docs), self.schema, self.label_names)


# --------------------------------------------------------------------------
# synthetic generation
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class SynthConfig:
    """Parameters of :func:`generate_synthetic`.

    ``leakage`` and ``attribute_marginals`` are keyed by attribute name;
    missing entries default to ``default_leakage`` and a uniform marginal.
    ``domain_shift`` is the fraction of task and filler tokens drawn from
    disjoint out-of-domain pools, used to produce cross-domain query corpora.
    """

    num_classes: int = 4
    schema: AttributeSchema = field(
        default_factory=lambda: AttributeSchema(
            [AttributeSpec("gender", ("f", "m")), AttributeSpec("age", ("young", "old"))]
        )
    )
    default_leakage: float = 0.8
    leakage: dict = field(default_factory=dict)
    attribute_marginals: dict = field(default_factory=dict)
    label_marginal: tuple[float, ...] | None = None
    label_coupling: float = 0.5
    task_vocab: int = 40
    attribute_vocab: int = 10
    noise_vocab: int = 2000
    doc_length: tuple[int, int] = (20, 40)
    task_share: float = 0.25
    task_purity: float = 0.8
    attribute_tokens: int = 3
    size: int = 4000
    seed: int = 0
    domain_tag: str = "same"
    domain_shift: float = 0.0
    noise_zipf: float = 1.0

    def __post_init__(self):
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if min(self.task_vocab, self.attribute_vocab, self.noise_vocab) < 1:
            raise ConfigError("vocabulary partition sizes must be positive")
        lo, hi = self.doc_length
        if lo < 1 or hi < lo:
            raise ConfigError("doc_length must be a range 1 <= lo <= hi")
        if self.size < 1 or self.attribute_tokens < 0:
            raise ConfigError("size must be positive and attribute_tokens non-negative")
        for name in ("default_leakage", "label_coupling", "task_share", "task_purity", "domain_shift"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1]")
        for name, rho in self.leakage.items():
            if name not in self.schema:
                raise ConfigError(f"leakage given for unknown attribute {name!r}")
            if not 0.0 <= rho <= 1.0:
                raise ConfigError(f"leakage for {name!r} must lie in [0, 1]")
        for name, marg in self.attribute_marginals.items():
            if len(marg) != len(self.schema[name].values):
                raise ConfigError(f"marginal for {name!r} has wrong length")
            _check_distribution(marg, f"marginal for {name!r}")
        if self.label_marginal is not None:
            if len(self.label_marginal) != self.num_classes:
                raise ConfigError("label_marginal has wrong length")
            _check_distribution(self.label_marginal, "label_marginal")
        if self.attribute_tokens * len(self.schema) + 1 > hi:
            raise ConfigError("doc_length too short for the attribute tokens")

    def leakage_of(self, name: str) -> float:
        return float(self.leakage.get(name, self.default_leakage))

    def marginal_of(self, name: str) -> np.ndarray:
        k = len(self.schema[name].values)
        return np.asarray(self.attribute_marginals.get(name, [1.0 / k] * k), dtype=np.float64)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["schema"] = self.schema.to_dict()
        d["doc_length"] = list(self.doc_length)
        if self.label_marginal is not None:
            d["label_marginal"] = list(self.label_marginal)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        d = dict(d)
        if "schema" in d:
            d["schema"] = AttributeSchema.from_dict(d["schema"])
        if "doc_length" in d:
            d["doc_length"] = tuple(d["doc_length"])
        if d.get("label_marginal") is not None:
            d["label_marginal"] = tuple(d["label_marginal"])
        return cls(**d)

    def with_(self, **changes) -> "SynthConfig":
        return replace(self, **changes)


def _check_distribution(p, what: str) -> None:
    p = np.asarray(p, dtype=np.float64)
    if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
        raise ConfigError(f"{what} must be a probability vector")


def preferred_class(cfg: SynthConfig, attr_pos: int, value_idx: int) -> int:
    """Task class an attribute value pulls the label towards."""
    offset = sum(len(s.values) for s in cfg.schema.specs[:attr_pos])
    return (offset + value_idx) % cfg.num_classes


def _zipf_weights(n: int, s: float) -> np.ndarray:
    w = 1.0 / np.arange(1, n + 1) ** s
    return w / w.sum()


def generate_synthetic(cfg: SynthConfig) -> Corpus:
    rng = np.random.default_rng(cfg.seed)
    specs = cfg.schema.specs
    n_attrs = len(specs)
    C = cfg.num_classes
    N = cfg.size
    label_p = np.full(C, 1.0 / C) if cfg.label_marginal is None else np.asarray(cfg.label_marginal)
    rhos = np.array([cfg.leakage_of(s.name) for s in specs])
    noise_cdf = np.cumsum(_zipf_weights(cfg.noise_vocab, cfg.noise_zipf))
    lo, hi = cfg.doc_length

    # document-level draws
    values = np.zeros((N, n_attrs), dtype=np.int64)
    for a, spec in enumerate(specs):
        values[:, a] = rng.choice(len(spec.values), size=N, p=cfg.marginal_of(spec.name))
    labels = rng.choice(C, size=N, p=label_p)
    fire = rng.random((N, n_attrs)) < rhos * cfg.label_coupling
    order = np.argsort(rng.random((N, n_attrs)), axis=1)
    for i in range(N):
        for a in order[i]:
            if fire[i, a]:
                labels[i] = preferred_class(cfg, int(a), int(values[i, a]))
                break
    lengths = rng.integers(lo, hi + 1, size=N)

    n_attr_tokens = cfg.attribute_tokens * n_attrs
    docs = []
    for i in range(N):
        length = int(lengths[i])
        n_task = max(1, int(round(cfg.task_share * length)))
        n_noise = max(0, length - n_task - n_attr_tokens)
        label = int(labels[i])

        task_cls = np.where(rng.random(n_task) < cfg.task_purity, label, rng.integers(C, size=n_task))
        task_ids = rng.integers(cfg.task_vocab, size=n_task)
        task_shift = rng.random(n_task) < cfg.domain_shift
        tokens = [f"{'u' if s else 't'}{c}_{t}" for s, c, t in zip(task_shift, task_cls, task_ids)]

        if n_attr_tokens:
            attr_pos = np.repeat(np.arange(n_attrs), cfg.attribute_tokens)
            sizes = np.array([len(specs[a].values) for a in attr_pos])
            random_vals = (rng.random(n_attr_tokens) * sizes).astype(np.int64)
            keep = rng.random(n_attr_tokens) < rhos[attr_pos]
            vals = np.where(keep, values[i, attr_pos], random_vals)
            attr_ids = rng.integers(cfg.attribute_vocab, size=n_attr_tokens)
            tokens += [f"a{a}v{v}_{t}" for a, v, t in zip(attr_pos, vals, attr_ids)]

        noise_ids = np.searchsorted(noise_cdf, rng.random(n_noise), side="right")
        noise_ids = np.minimum(noise_ids, cfg.noise_vocab - 1)
        shifted = rng.random(n_noise) < cfg.domain_shift
        tokens += [f"{'x' if s else 'n'}{t}" for s, t in zip(shifted, noise_ids)]

        perm = rng.permutation(len(tokens))
        docs.append(
            Document(
                id=f"{cfg.domain_tag}-{cfg.seed}-{i}",
                tokens=tuple(tokens[j] for j in perm),
                task_label=label,
                attributes={s.name: s.values[values[i, a]] for a, s in enumerate(specs)},
                domain_tag=cfg.domain_tag,
            )
        )
    return Corpus(docs, cfg.schema, [f"class{c}" for c in range(C)])


# --------------------------------------------------------------------------
# JSONL
# --------------------------------------------------------------------------


def load_jsonl(path, schema: AttributeSchema, label_names: Sequence[str] | None = None) -> Corpus:
    """Read one JSON document per line: ``{"id", "text", "label", "attributes"}``.

    String labels are mapped through ``label_names``; when that is omitted the
    sorted set of labels seen in the file is used.
    """
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"invalid JSON ({exc.msg})", lineno) from None
            if not isinstance(rec, dict) or not {"id", "text", "label"} <= rec.keys():
                raise ParseError("expected an object with id, text and label", lineno)
            attrs = rec.get("attributes") or {}
            if not isinstance(attrs, dict):
                raise ParseError("attributes must be an object", lineno)
            records.append((lineno, rec, attrs))
    if not records:
        raise EmptyDataset(f"{path} contains no documents")

    if label_names is None:
        raw = {r["label"] for _, r, _ in records}
        label_names = [str(x) for x in sorted(raw, key=str)] if not all(isinstance(x, int) for x in raw) else None
    docs = []
    for lineno, rec, attrs in records:
        tokens = tokenize(str(rec["text"]))
        if not tokens:
            raise ParseError("text has no tokens", lineno)
        label = rec["label"]
        if label_names is not None and not isinstance(label, int):
            if str(label) not in label_names:
                raise SchemaError(f"line {lineno}: unknown label {label!r}")
            label = list(label_names).index(str(label))
        for name, value in attrs.items():
            try:
                schema.index(name, value)
            except SchemaError as exc:
                raise SchemaError(f"line {lineno}: {exc}") from None
        docs.append(
            Document(
                id=str(rec["id"]),
                tokens=tuple(tokens),
                task_label=int(label),
                attributes={k: str(v) for k, v in attrs.items()},
                domain_tag=str(rec.get("domain", "same")),
            )
        )
    if label_names is None:
        label_names = [str(c) for c in range(max(d.task_label for d in docs) + 1)]
    return Corpus(docs, schema, list(label_names))


def write_jsonl(corpus: Corpus, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for d in corpus.docs:
            rec = {
                "id": d.id,
                "text": d.text,
                "label": corpus.label_names[d.task_label],
                "attributes": dict(d.attributes),
                "domain": d.domain_tag,
            }
            fh.write(json.dumps(rec) + "\n")


# --------------------------------------------------------------------------
# splits and statistics
# --------------------------------------------------------------------------


@dataclass
class CorpusSplit:
    victim: list[Document]
    query: list[Document]
    aux: list[Document]
    test: list[Document]

    def to_ids(self) -> dict:
        return {k: [d.id for d in getattr(self, k)] for k in ("victim", "query", "aux", "test")}


def split(corpus: Corpus, seed: int, aux_fraction: float = 0.5, test: Corpus | None = None) -> CorpusSplit:
    """Halve ``corpus`` into a victim half and an attacker half.

    The attacker half is further divided into extraction queries and the
    attribute-labelled auxiliary set.  ``test`` is an optional held-out corpus
    passed through untouched.
    """
    if not 0.0 < aux_fraction < 1.0:
        raise ConfigError("aux_fraction must lie in (0, 1)")
    n = len(corpus)
    if n < 4:
        raise EmptyDataset("need at least 4 documents to split")
    order = np.random.default_rng(seed).permutation(n)
    docs = [corpus.docs[i] for i in order]
    n_victim = (n + 1) // 2
    attacker = docs[n_victim:]
    n_aux = int(round(aux_fraction * len(attacker)))
    n_aux = min(max(n_aux, 1), len(attacker) - 1)
    return CorpusSplit(
        victim=docs[:n_victim],
        query=attacker[: len(attacker) - n_aux],
        aux=attacker[len(attacker) - n_aux :],
        test=list(test.docs) if test is not None else [],
    )


def _ngram_types(docs, n: int) -> set:
    out = set()
    for d in docs:
        toks = d.tokens
        out.update(tuple(toks[i : i + n]) for i in range(len(toks) - n + 1))
    return out


def ngram_overlap(reference, query, n: int) -> float:
    """Fraction of distinct reference n-grams that also occur in ``query``."""
    if n < 1:
        raise ConfigError("n must be >= 1")
    if len(reference) == 0 or len(query) == 0:
        raise EmptyDataset("both corpora must be non-empty")
    ref = _ngram_types(reference, n)
    if not ref:
        return 0.0
    return len(ref & _ngram_types(query, n)) / len(ref)


def attribute_frequencies(corpus, attribute: str, schema: AttributeSchema | None = None) -> np.ndarray:
    schema = schema or corpus.schema
    spec = schema[attribute]
    counts = Counter(d.attributes.get(attribute) for d in corpus)
    freqs = np.array([counts.get(v, 0) for v in spec.values], dtype=np.float64)
    total = freqs.sum()
    if total == 0:
        raise EmptyDataset(f"no documents carry attribute {attribute!r}")
    return freqs / total


def attribute_histogram_variance(corpus, attribute: str, schema: AttributeSchema | None = None) -> float:
    return float(np.var(attribute_frequencies(corpus, attribute, schema)))
