"""Model extraction: build a transfer set under a query budget and distil it."""
from __future__ import annotations

import json
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from leakbench.apiserve import BudgetLedger, client_query
from leakbench.corpus import Document, SynthConfig, generate_synthetic
from leakbench.errors import ConfigError, EmptyDataset, ShapeError
from leakbench.textmodel import ClassifierModel, ModelConfig, TrainConfig, featurize_many, train

SAME_DOMAIN = "same_domain"
CROSS_DOMAIN = "cross_domain"


@dataclass(frozen=True)
class QueryPlan:
    source: str = SAME_DOMAIN
    multiplier: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.source not in (SAME_DOMAIN, CROSS_DOMAIN):
            raise ConfigError(f"unknown query source {self.source!r}")
        if not self.multiplier > 0:
            raise ConfigError("budget multiplier must be positive")

    def budget(self, victim_size: int) -> int:
        b = int(round(self.multiplier * victim_size))
        if b < 1:
            raise ConfigError(f"budget {self.multiplier} x {victim_size} rounds to zero")
        return b

    @property
    def label(self) -> str:
        return f"{self.source}@{self.multiplier:g}x"


@dataclass
class TransferSet:
    docs: list
    posteriors: np.ndarray

    def __len__(self) -> int:
        return len(self.docs)

    def save_jsonl(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for d, p in zip(self.docs, self.posteriors):
                doc = {"id": d.id, "tokens": list(d.tokens), "domain": getattr(d, "domain_tag", "same")}
                fh.write(json.dumps({"doc": doc, "posterior": p.tolist()}) + "\n")

    @classmethod
    def load_jsonl(cls, path) -> "TransferSet":
        docs, posts = [], []
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                if not line.strip():
                    continue
                rec = json.loads(line)
                d = rec["doc"]
                docs.append(Document(d["id"], tuple(d["tokens"]), -1, {}, d.get("domain", "same")))
                posts.append(rec["posterior"])
        if not docs:
            raise EmptyDataset("transfer set file is empty")
        return cls(docs, np.asarray(posts, dtype=np.float64))


def sample_queries(plan: QueryPlan, victim_size: int, pool: Sequence | None = None,
                   cross_cfg: SynthConfig | None = None) -> list:
    """Choose the documents a plan will send, without spending any budget.

    Cross-domain plans generate fresh documents from ``cross_cfg``; without
    one, ``pool`` is taken to be an out-of-domain corpus and sampled instead.
    """
    budget = plan.budget(victim_size)
    rng = np.random.default_rng(plan.seed)
    if plan.source == SAME_DOMAIN or cross_cfg is None:
        if not pool:
            if plan.source == CROSS_DOMAIN:
                raise ConfigError("cross-domain plan needs a generator config or a query pool")
            raise EmptyDataset("same-domain query pool is empty")
        idx = rng.choice(len(pool), size=budget, replace=budget > len(pool))
        return [pool[i] for i in idx]
    gen_seed = int(rng.integers(2**31))
    return generate_synthetic(replace(cross_cfg, size=budget, seed=gen_seed)).docs


def build_transfer_set(plan: QueryPlan, client, ledger: BudgetLedger, *, victim_size: int,
                       pool: Sequence | None = None, cross_cfg: SynthConfig | None = None,
                       batch_size: int = 128) -> TransferSet:
    """Sample ``round(multiplier * victim_size)`` queries and label them with the victim.

    Pools are sampled with replacement only when the budget exceeds them.
    """
    docs = sample_queries(plan, victim_size, pool, cross_cfg)
    if len(docs) > ledger.remaining:
        # fail before touching the network
        ledger.reserve(len(docs))
    posteriors = client_query(client, docs, ledger, batch_size=batch_size)
    return TransferSet(list(docs), np.vstack(posteriors))


def train_extracted(ts: TransferSet, model_cfg: ModelConfig, train_cfg: TrainConfig) -> ClassifierModel:
    if len(ts) == 0:
        raise EmptyDataset("transfer set is empty")
    if ts.posteriors.shape[1] != model_cfg.num_classes:
        raise ShapeError("extracted model must predict the victim's classes")
    X = featurize_many(ts.docs, model_cfg)
    return train(ClassifierModel(model_cfg), X, ts.posteriors, train_cfg, loss="soft")


def agreement(extracted: ClassifierModel, victim_labels, docs: Sequence) -> float:
    """Fraction of documents on which the extracted argmax matches the victim's."""
    if len(docs) == 0:
        raise EmptyDataset("agreement needs documents")
    victim_labels = np.asarray(victim_labels)
    if len(victim_labels) != len(docs):
        raise ShapeError("victim labels and documents differ in length")
    pred = extracted.predict(featurize_many(docs, extracted.config))
    return float(np.mean(pred == victim_labels))
