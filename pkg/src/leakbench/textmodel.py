"""A small numpy text classifier with an exposed representation layer.

Documents are encoded as hashed bags of uni- and bi-grams, pushed through a
stack of dense hidden layers, and classified by an affine head.  The output
of the last hidden layer is the model's *representation* and is what the
attribute inference attack consumes.

Everything here is deterministic given the seeds in :class:`ModelConfig` and
:class:`TrainConfig`.
"""
from __future__ import annotations

import base64
import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from functools import lru_cache
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from leakbench.errors import (
    ConfigError,
    EmptyDataset,
    InvalidDocument,
    InvalidLabel,
    NumericError,
    ShapeError,
)

logger = logging.getLogger(__name__)

PROB_FLOOR = 1e-12
CHECKPOINT_FORMAT = "leakbench-checkpoint"
CHECKPOINT_VERSION = 1

ACTIVATIONS = ("relu", "tanh")


@dataclass(frozen=True)
class ModelConfig:
    """Architecture of a :class:`ClassifierModel`.

    ``feature_dim`` is the number of hash buckets of the input encoding.
    ``vocab_size`` is carried as metadata only; hashing makes the model
    independent of any explicit vocabulary.
    """

    feature_dim: int = 1024
    hidden_dims: tuple[int, ...] = (64,)
    num_classes: int = 4
    seed: int = 0
    activation: str = "relu"
    vocab_size: int = 1 << 16

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if self.feature_dim < 1 or self.vocab_size < 1:
            raise ConfigError("feature_dim and vocab_size must be positive")
        if not self.hidden_dims or any(h < 1 for h in self.hidden_dims):
            raise ConfigError("hidden_dims must be a non-empty list of positive ints")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")

    @property
    def representation_dim(self) -> int:
        return self.hidden_dims[-1]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden_dims"] = list(self.hidden_dims)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 5
    learning_rate: float = 5e-3
    batch_size: int = 32
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if not 0.0 < self.learning_rate < 1.0:
            raise ConfigError("learning_rate must lie in (0, 1)")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


# --------------------------------------------------------------------------
# input encoding
# --------------------------------------------------------------------------


@lru_cache(maxsize=1 << 18)
def _ngram_hash(ngram: str) -> int:
    digest = hashlib.blake2b(ngram.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def _tokens_of(doc) -> Sequence[str]:
    return doc.tokens if hasattr(doc, "tokens") else doc


def ngrams(tokens: Sequence[str]) -> list[str]:
    """Unigrams followed by space-joined bigrams."""
    return list(tokens) + [f"{a} {b}" for a, b in zip(tokens, tokens[1:])]


def featurize(doc, config: ModelConfig) -> np.ndarray:
    """Encode a document (or a bare token list) as an L2-normalised count vector."""
    tokens = _tokens_of(doc)
    if len(tokens) == 0:
        raise InvalidDocument("document has no tokens")
    buckets = [_ngram_hash(g) % config.feature_dim for g in ngrams(tokens)]
    vec = np.bincount(buckets, minlength=config.feature_dim).astype(np.float64)
    return vec / np.linalg.norm(vec)


def featurize_many(docs: Iterable, config: ModelConfig) -> np.ndarray:
    rows = [featurize(d, config) for d in docs]
    if not rows:
        return np.zeros((0, config.feature_dim))
    return np.vstack(rows)


# --------------------------------------------------------------------------
# model
# --------------------------------------------------------------------------


def _activate(a: np.ndarray, kind: str) -> np.ndarray:
    return np.maximum(a, 0.0) if kind == "relu" else np.tanh(a)


def _activation_grad(a: np.ndarray, h: np.ndarray, kind: str) -> np.ndarray:
    return (a > 0).astype(a.dtype) if kind == "relu" else 1.0 - h * h


class ClassifierModel:
    """Dense feed-forward classifier.

    ``weights[i]`` has shape ``(fan_in, fan_out)``; the last entry is the
    classification head.  Instances are treated as immutable once trained:
    training returns a fresh model instead of mutating its input.
    """

    def __init__(self, config: ModelConfig, weights=None, biases=None, trained: bool = False):
        self.config = config
        dims = [config.feature_dim, *config.hidden_dims, config.num_classes]
        if weights is None:
            rng = np.random.default_rng(config.seed)
            weights, biases = [], []
            for fan_in, fan_out in zip(dims[:-1], dims[1:]):
                if config.activation == "relu":
                    scale = np.sqrt(2.0 / fan_in)
                else:
                    scale = np.sqrt(2.0 / (fan_in + fan_out))
                weights.append(rng.normal(0.0, scale, size=(fan_in, fan_out)))
                biases.append(np.zeros(fan_out))
        self.weights = [np.asarray(w, dtype=np.float64) for w in weights]
        self.biases = [np.asarray(b, dtype=np.float64) for b in biases]
        self.trained = trained
        self.loss_history: list[float] = []
        for w, b, fan_in, fan_out in zip(self.weights, self.biases, dims[:-1], dims[1:]):
            if w.shape != (fan_in, fan_out) or b.shape != (fan_out,):
                raise ShapeError(
                    f"parameter shapes {w.shape}/{b.shape} inconsistent with config ({fan_in}->{fan_out})"
                )
        if len(self.weights) != len(dims) - 1:
            raise ShapeError("number of layers does not match config")

    @property
    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    @classmethod
    def from_params(cls, config: ModelConfig, params: Sequence[np.ndarray], trained: bool) -> "ClassifierModel":
        return cls(config, list(params[0::2]), list(params[1::2]), trained=trained)

    def copy(self) -> "ClassifierModel":
        m = ClassifierModel.from_params(self.config, [p.copy() for p in self.params], self.trained)
        m.loss_history = list(self.loss_history)
        return m

    def _forward_cache(self, X: np.ndarray):
        hs, pre = [X], []
        h = X
        for w, b in zip(self.weights[:-1], self.biases[:-1]):
            a = h @ w + b
            h = _activate(a, self.config.activation)
            pre.append(a)
            hs.append(h)
        logits = h @ self.weights[-1] + self.biases[-1]
        return hs, pre, logits

    def representation(self, X: np.ndarray) -> np.ndarray:
        return forward(self, X)[0]

    def logits(self, X: np.ndarray) -> np.ndarray:
        return forward(self, X)[1]

    def predict_proba(self, X: np.ndarray, temperature: float = 1.0) -> np.ndarray:
        return softmax(self.logits(X), temperature)

    def predict(self, X: np.ndarray) -> np.ndarray:
        return np.argmax(self.logits(X), axis=-1)


def forward(model: ClassifierModel, f: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(representation, logits)`` for one feature vector or a batch."""
    f = np.asarray(f, dtype=np.float64)
    if f.shape[-1] != model.config.feature_dim or f.ndim not in (1, 2):
        raise ShapeError(f"expected feature dim {model.config.feature_dim}, got shape {f.shape}")
    hs, _, logits = model._forward_cache(np.atleast_2d(f))
    rep = hs[-1]
    if f.ndim == 1:
        return rep[0], logits[0]
    return rep, logits


# --------------------------------------------------------------------------
# probabilities and losses
# --------------------------------------------------------------------------


def softmax(logits, temperature: float = 1.0) -> np.ndarray:
    """Temperature softmax over the last axis, stabilised by max-subtraction."""
    z = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise NumericError("non-finite logits")
    if not temperature > 0:
        raise ConfigError("temperature must be > 0; use the hard-label defense for tau = 0")
    z = z / temperature
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def cross_entropy(p, gold: int) -> float:
    p = np.asarray(p, dtype=np.float64)
    if not 0 <= gold < p.shape[-1]:
        raise InvalidLabel(f"class index {gold} out of range for {p.shape[-1]} classes")
    return float(-np.log(max(p[gold], PROB_FLOOR)))


def soft_cross_entropy(student_logits, teacher) -> float:
    z = np.asarray(student_logits, dtype=np.float64)
    t = np.asarray(teacher, dtype=np.float64)
    if z.shape != t.shape:
        raise ShapeError(f"student {z.shape} vs teacher {t.shape}")
    p = softmax(z)
    return float(-(t * np.log(np.maximum(p, PROB_FLOOR))).sum())


# A batch loss maps (logits, batch indices) -> (mean loss, dL/dlogits).
BatchLoss = Callable[[np.ndarray, np.ndarray], tuple[float, np.ndarray]]


def hard_label_loss(labels: np.ndarray) -> BatchLoss:
    labels = np.asarray(labels, dtype=np.int64)

    def loss(logits, idx):
        y = labels[idx]
        p = softmax(logits)
        n = len(idx)
        value = -np.log(np.maximum(p[np.arange(n), y], PROB_FLOOR)).mean()
        grad = p.copy()
        grad[np.arange(n), y] -= 1.0
        return float(value), grad / n

    return loss


def soft_label_loss(teacher: np.ndarray) -> BatchLoss:
    teacher = np.asarray(teacher, dtype=np.float64)

    def loss(logits, idx):
        t = teacher[idx]
        p = softmax(logits)
        n = len(idx)
        value = -(t * np.log(np.maximum(p, PROB_FLOOR))).sum(axis=1).mean()
        return float(value), (p - t) / n

    return loss


def backward(model: ClassifierModel, X: np.ndarray, batch_loss: BatchLoss, idx: np.ndarray):
    """Loss value and gradients (in ``model.params`` order) on ``X[idx]``."""
    hs, pre, logits = model._forward_cache(X[idx])
    value, delta = batch_loss(logits, idx)
    grads_w, grads_b = [], []
    for layer in range(len(model.weights) - 1, -1, -1):
        grads_w.append(hs[layer].T @ delta)
        grads_b.append(delta.sum(axis=0))
        if layer > 0:
            back = delta @ model.weights[layer].T
            delta = back * _activation_grad(pre[layer - 1], hs[layer], model.config.activation)
    grads = []
    for gw, gb in zip(reversed(grads_w), reversed(grads_b)):
        grads += [gw, gb]
    return value, grads


# --------------------------------------------------------------------------
# optimisation
# --------------------------------------------------------------------------


@dataclass
class AdamState:
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)
    t: int = 0


def adam_step(params, grads, state: AdamState, cfg: TrainConfig):
    """One bias-corrected Adam update. Returns ``(new_params, new_state)``."""
    if len(params) != len(grads):
        raise ShapeError("params and grads differ in length")
    if state.t < 0:
        raise ConfigError("step counter must be >= 0")
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise NumericError("non-finite gradient")
    m_prev = state.m or [np.zeros_like(p, dtype=np.float64) for p in params]
    v_prev = state.v or [np.zeros_like(p, dtype=np.float64) for p in params]
    t = state.t + 1
    bc1 = 1.0 - cfg.beta1**t
    bc2 = 1.0 - cfg.beta2**t
    new_params, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, m_prev, v_prev):
        g = np.asarray(g, dtype=np.float64)
        if g.shape != np.shape(p):
            raise ShapeError(f"gradient shape {g.shape} != parameter shape {np.shape(p)}")
        m = cfg.beta1 * m + (1.0 - cfg.beta1) * g
        v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g
        step = cfg.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)
        new_params.append(p - step)
        new_m.append(m)
        new_v.append(v)
    return new_params, AdamState(new_m, new_v, t)


def fit(model: ClassifierModel, X: np.ndarray, batch_loss: BatchLoss, cfg: TrainConfig) -> ClassifierModel:
    """Mini-batch Adam over ``X`` with an arbitrary batch loss."""
    X = np.asarray(X, dtype=np.float64)
    n = X.shape[0]
    if n == 0:
        raise EmptyDataset("cannot train on an empty dataset")
    if X.shape[1] != model.config.feature_dim:
        raise ShapeError(f"features have dim {X.shape[1]}, model expects {model.config.feature_dim}")
    rng = np.random.default_rng(cfg.seed)
    params = [p.copy() for p in model.params]
    state = AdamState()
    history = []
    current = ClassifierModel.from_params(model.config, params, trained=False)
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            value, grads = backward(current, X, batch_loss, idx)
            params, state = adam_step(params, grads, state, cfg)
            current = ClassifierModel.from_params(model.config, params, trained=False)
            total += value * len(idx)
        history.append(total / n)
        logger.debug("epoch %d mean loss %.5f", epoch, history[-1])
    for p in params:
        if not np.all(np.isfinite(p)):
            raise NumericError("training produced non-finite parameters")
    current.trained = True
    current.loss_history = list(model.loss_history) + history
    return current


def train(model: ClassifierModel, X: np.ndarray, targets, cfg: TrainConfig, loss: str = "hard") -> ClassifierModel:
    """Train on labels (``loss="hard"``) or teacher posteriors (``loss="soft"``)."""
    if len(targets) == 0 or len(X) == 0:
        raise EmptyDataset("cannot train on an empty dataset")
    if len(targets) != len(X):
        raise ShapeError("features and targets differ in length")
    if loss == "hard":
        labels = np.asarray(targets, dtype=np.int64)
        if labels.min() < 0 or labels.max() >= model.config.num_classes:
            raise InvalidLabel("label out of range")
        return fit(model, X, hard_label_loss(labels), cfg)
    if loss == "soft":
        teacher = np.asarray(targets, dtype=np.float64)
        if teacher.shape[1] != model.config.num_classes:
            raise ShapeError("teacher posteriors do not match num_classes")
        return fit(model, X, soft_label_loss(teacher), cfg)
    raise ConfigError(f"unknown loss kind {loss!r}")


def evaluate_accuracy(model: ClassifierModel, X: np.ndarray, labels) -> float:
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise EmptyDataset("cannot evaluate on an empty dataset")
    return float(np.mean(model.predict(X) == labels))


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------


def _encode(a: np.ndarray) -> dict:
    return {
        "shape": list(a.shape),
        "data": base64.b64encode(np.ascontiguousarray(a, dtype="<f8").tobytes()).decode("ascii"),
    }


def _decode(d: dict) -> np.ndarray:
    raw = np.frombuffer(base64.b64decode(d["data"]), dtype="<f8")
    return raw.reshape(d["shape"]).astype(np.float64)


def model_to_dict(model: ClassifierModel) -> dict:
    return {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": model.config.to_dict(),
        "trained": model.trained,
        "params": [_encode(p) for p in model.params],
    }


def model_from_dict(d: dict) -> ClassifierModel:
    if d.get("format") != CHECKPOINT_FORMAT:
        raise ConfigError("not a leakbench checkpoint")
    if d.get("version") != CHECKPOINT_VERSION:
        raise ConfigError(f"unsupported checkpoint version {d.get('version')}")
    config = ModelConfig.from_dict(d["config"])
    return ClassifierModel.from_params(config, [_decode(p) for p in d["params"]], bool(d["trained"]))


def save_model(model: ClassifierModel, path) -> None:
    Path(path).write_text(json.dumps(model_to_dict(model)))


def load_model(path) -> ClassifierModel:
    return model_from_dict(json.loads(Path(path).read_text()))


def with_seed(config: ModelConfig, seed: int) -> ModelConfig:
    return replace(config, seed=seed)
