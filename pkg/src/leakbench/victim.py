"""Victim model training and defended prediction.

The victim is the black box: its public surface returns posterior vectors
only, never representations.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from leakbench.defense import DefenseConfig, NoDefense, apply_defense, defense_from_dict
from leakbench.errors import ConfigError, EmptyDataset, ShapeError
from leakbench.textmodel import (
    ClassifierModel,
    ModelConfig,
    TrainConfig,
    evaluate_accuracy,
    featurize,
    featurize_many,
    fit,
    load_model,
    log_softmax,
    save_model,
    softmax,
    train,
)

STANDARD = "standard"
NASTY_TEACHER = "nasty_teacher"


@dataclass(frozen=True)
class VictimModel:
    model: ClassifierModel
    defense: DefenseConfig = field(default_factory=NoDefense)
    training_kind: str = STANDARD
    seed: int = 0
    info: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if not self.model.trained:
            raise ConfigError("victim model must be trained before serving")
        if self.defense.training_time:
            raise ConfigError("training-time defenses are not output defenses")

    @property
    def num_classes(self) -> int:
        return self.model.config.num_classes

    def with_defense(self, defense: DefenseConfig) -> "VictimModel":
        return VictimModel(self.model, defense, self.training_kind, self.seed, dict(self.info))


def _labels(docs) -> np.ndarray:
    return np.array([d.task_label for d in docs], dtype=np.int64)


def train_victim(docs: Sequence, model_cfg: ModelConfig, train_cfg: TrainConfig,
                 defense: DefenseConfig | None = None, seed: int = 0) -> VictimModel:
    if len(docs) == 0:
        raise EmptyDataset("victim training set is empty")
    X = featurize_many(docs, model_cfg)
    y = _labels(docs)
    model = train(ClassifierModel(model_cfg), X, y, train_cfg, loss="hard")
    info = {"train_accuracy": evaluate_accuracy(model, X, y)}
    return VictimModel(model, defense or NoDefense(), STANDARD, seed, info)


# --------------------------------------------------------------------------
# nasty teacher
# --------------------------------------------------------------------------


def kl_divergence(p_logits: np.ndarray, q_logits: np.ndarray, tau: float) -> np.ndarray:
    """Row-wise KL(softmax(p/tau) || softmax(q/tau))."""
    lp = log_softmax(np.atleast_2d(p_logits) / tau)
    lq = log_softmax(np.atleast_2d(q_logits) / tau)
    return (np.exp(lp) * (lp - lq)).sum(axis=1)


def nasty_teacher_loss(labels: np.ndarray, ref_logits: np.ndarray, omega: float, tau: float):
    """Cross-entropy on gold labels minus the scaled KL to a reference model.

    Returns a batch-loss callable for :func:`leakbench.textmodel.fit`.
    """
    labels = np.asarray(labels, dtype=np.int64)
    ref_logits = np.asarray(ref_logits, dtype=np.float64)

    def loss(logits, idx):
        n = len(idx)
        y = labels[idx]
        p = softmax(logits)
        ce = -np.log(np.maximum(p[np.arange(n), y], 1e-12))
        grad = p.copy()
        grad[np.arange(n), y] -= 1.0
        if omega == 0:
            return float(ce.mean()), grad / n
        lp = log_softmax(logits / tau)
        lq = log_softmax(ref_logits[idx] / tau)
        ps = np.exp(lp)
        kl = (ps * (lp - lq)).sum(axis=1)
        # d KL / d z = (1 / tau) * ps * (lp - lq - kl)
        dkl = ps * (lp - lq - kl[:, None]) / tau
        value = ce - omega * tau**2 * kl
        grad = grad - omega * tau**2 * dkl
        return float(value.mean()), grad / n

    return loss


def train_nasty_victim(docs: Sequence, reference: ClassifierModel, omega: float, tau_nt: float,
                       model_cfg: ModelConfig, train_cfg: TrainConfig, seed: int = 0) -> VictimModel:
    """Train a victim whose soft outputs are pushed away from ``reference``."""
    if len(docs) == 0:
        raise EmptyDataset("victim training set is empty")
    if reference.config != model_cfg:
        raise ShapeError("nasty teacher reference must share the victim configuration")
    if omega < 0 or tau_nt <= 0:
        raise ConfigError("nasty teacher needs omega >= 0 and tau_nt > 0")
    X = featurize_many(docs, model_cfg)
    y = _labels(docs)
    ref_logits = reference.logits(X)
    model = fit(ClassifierModel(model_cfg), X, nasty_teacher_loss(y, ref_logits, omega, tau_nt), train_cfg)
    info = {
        "train_accuracy": evaluate_accuracy(model, X, y),
        "kl_to_reference": float(kl_divergence(model.logits(X), ref_logits, tau_nt).mean()),
        "omega": omega,
        "tau_nt": tau_nt,
    }
    return VictimModel(model, NoDefense(), NASTY_TEACHER, seed, info)


# --------------------------------------------------------------------------
# prediction
# --------------------------------------------------------------------------


def _stable_hash(text: str) -> int:
    return int.from_bytes(hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest(), "little")


def request_rng(victim: VictimModel, doc_id: str) -> np.random.Generator:
    """Per-request stream keyed by the victim seed, the defense seed and the document id."""
    defense_seed = getattr(victim.defense, "seed", 0)
    return np.random.default_rng([victim.seed, defense_seed, _stable_hash(str(doc_id))])


def predict(victim: VictimModel, doc, rng: np.random.Generator | None = None) -> np.ndarray:
    logits = victim.model.logits(featurize(doc, victim.model.config))
    if rng is None and victim.defense.stochastic:
        rng = request_rng(victim, doc.id)
    return apply_defense(logits, victim.defense, rng)


def predict_batch(victim: VictimModel, docs: Sequence) -> np.ndarray:
    """Defended posteriors for many documents; same values as repeated :func:`predict`."""
    if len(docs) == 0:
        return np.zeros((0, victim.num_classes))
    logits = victim.model.logits(featurize_many(docs, victim.model.config))
    stochastic = victim.defense.stochastic
    rows = []
    for doc, z in zip(docs, logits):
        rng = request_rng(victim, doc.id) if stochastic else None
        rows.append(apply_defense(z, victim.defense, rng))
    return np.vstack(rows)


def undefended_labels(victim: VictimModel, docs: Sequence) -> np.ndarray:
    return victim.model.predict(featurize_many(docs, victim.model.config))


# --------------------------------------------------------------------------
# persistence
# --------------------------------------------------------------------------


def save_victim(victim: VictimModel, path) -> None:
    """Write the model checkpoint to ``path`` and a JSON sidecar next to it."""
    path = Path(path)
    save_model(victim.model, path)
    sidecar = {
        "defense": victim.defense.to_dict(),
        "training_kind": victim.training_kind,
        "seed": victim.seed,
        "info": victim.info,
    }
    path.with_suffix(path.suffix + ".victim.json").write_text(json.dumps(sidecar, indent=2))


def load_victim(path) -> VictimModel:
    path = Path(path)
    model = load_model(path)
    sidecar = json.loads(path.with_suffix(path.suffix + ".victim.json").read_text())
    return VictimModel(
        model,
        defense_from_dict(sidecar["defense"]),
        sidecar.get("training_kind", STANDARD),
        int(sidecar.get("seed", 0)),
        sidecar.get("info", {}),
    )
