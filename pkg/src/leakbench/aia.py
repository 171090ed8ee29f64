"""Attribute inference on the representations of an extracted model.

The attacker feeds attribute-labelled auxiliary documents through a model it
controls, trains one small MLP per sensitive attribute on the resulting
representations, and then applies those MLPs to the victim's training
documents.  Only document tokens ever enter a model; attribute values are
used purely as training targets and for scoring.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from leakbench.corpus import AttributeSchema
from leakbench.errors import EmptyDataset, ShapeError
from leakbench.textmodel import ClassifierModel, ModelConfig, TrainConfig, featurize_many, train


@dataclass(frozen=True)
class InferenceConfig:
    hidden: int | None = None  # defaults to the representation width
    epochs: int = 3
    learning_rate: float = 1e-2
    batch_size: int = 32
    seed: int = 0
    standardize: bool = True

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, d: dict) -> "InferenceConfig":
        return cls(**d)


@dataclass
class RepresentationDataset:
    """Representations of ``docs`` plus attribute targets.

    ``targets[name][i]`` is the schema index of document ``i``'s value, or -1
    when the document does not carry that attribute.
    """

    ids: list[str]
    reps: np.ndarray
    targets: dict[str, np.ndarray]
    schema: AttributeSchema

    def rows(self, attribute: str) -> tuple[np.ndarray, np.ndarray]:
        y = self.targets[attribute]
        keep = y >= 0
        return self.reps[keep], y[keep]


def representations(model: ClassifierModel, docs: Sequence) -> np.ndarray:
    X = featurize_many([d.tokens for d in docs], model.config)
    if X.shape[0] == 0:
        return np.zeros((0, model.config.representation_dim))
    return model.representation(X)


def harvest_representations(model: ClassifierModel, docs: Sequence, schema: AttributeSchema) -> RepresentationDataset:
    reps = representations(model, docs)
    targets = {}
    for spec in schema:
        targets[spec.name] = np.array(
            [schema.index(spec.name, d.attributes[spec.name]) if spec.name in d.attributes else -1 for d in docs],
            dtype=np.int64,
        )
    return RepresentationDataset([d.id for d in docs], reps, targets, schema)


@dataclass
class _AttributeHead:
    mlp: ClassifierModel
    mean: np.ndarray
    scale: np.ndarray

    def predict(self, reps: np.ndarray) -> np.ndarray:
        return self.mlp.predict((reps - self.mean) / self.scale)


class AttributeInferenceModel:
    """One two-layer perceptron per attribute, keyed by attribute name."""

    def __init__(self, heads: dict[str, _AttributeHead], schema: AttributeSchema, input_dim: int):
        self.heads = heads
        self.schema = schema
        self.input_dim = input_dim

    def predict_indices(self, reps: np.ndarray) -> dict[str, np.ndarray]:
        if reps.shape[1] != self.input_dim:
            raise ShapeError(f"inference model expects dim {self.input_dim}, got {reps.shape[1]}")
        return {name: head.predict(reps) for name, head in self.heads.items()}


def train_inference(rd: RepresentationDataset, cfg: InferenceConfig = InferenceConfig()) -> AttributeInferenceModel:
    dim = rd.reps.shape[1]
    heads = {}
    for pos, spec in enumerate(rd.schema):
        X, y = rd.rows(spec.name)
        if len(y) == 0:
            raise EmptyDataset(f"no auxiliary rows carry attribute {spec.name!r}")
        if cfg.standardize:
            mean, scale = X.mean(axis=0), X.std(axis=0)
            scale = np.where(scale > 1e-12, scale, 1.0)
        else:
            mean, scale = np.zeros(dim), np.ones(dim)
        mcfg = ModelConfig(
            feature_dim=dim,
            hidden_dims=(cfg.hidden or dim,),
            num_classes=len(spec.values),
            seed=cfg.seed + pos,
            activation="relu",
        )
        tcfg = TrainConfig(epochs=cfg.epochs, learning_rate=cfg.learning_rate,
                           batch_size=cfg.batch_size, seed=cfg.seed + pos)
        mlp = train(ClassifierModel(mcfg), (X - mean) / scale, y, tcfg, loss="hard")
        heads[spec.name] = _AttributeHead(mlp, mean, scale)
    return AttributeInferenceModel(heads, rd.schema, dim)


def infer_attribute_indices(f: AttributeInferenceModel, source: ClassifierModel, docs: Sequence) -> dict[str, np.ndarray]:
    if source.config.representation_dim != f.input_dim:
        raise ShapeError("source model representation does not match the inference model")
    return f.predict_indices(representations(source, docs))


def infer_attributes(f: AttributeInferenceModel, source: ClassifierModel, docs: Sequence) -> dict[str, list[str]]:
    """Predicted attribute values (as schema strings) for each document."""
    idx = infer_attribute_indices(f, source, docs)
    return {name: [f.schema[name].values[i] for i in pred] for name, pred in idx.items()}


@dataclass(frozen=True)
class MajorityBaseline:
    attribute: str
    index: int
    value: str

    def predict_indices(self, n: int) -> np.ndarray:
        return np.full(n, self.index, dtype=np.int64)


def majority_baseline(rd: RepresentationDataset, attribute: str) -> MajorityBaseline:
    spec = rd.schema[attribute]
    _, y = rd.rows(attribute)
    if len(y) == 0:
        raise EmptyDataset(f"no auxiliary rows carry attribute {attribute!r}")
    counts = np.bincount(y, minlength=len(spec.values))
    i = int(np.argmax(counts))
    return MajorityBaseline(attribute, i, spec.values[i])


def plain_baseline_model(model_cfg: ModelConfig, seed: int) -> ClassifierModel:
    """Untrained, randomly initialised model of the given architecture."""
    return ClassifierModel(replace(model_cfg, seed=seed))


def gold_indices(docs: Sequence, schema: AttributeSchema, attribute: str) -> np.ndarray:
    return np.array(
        [schema.index(attribute, d.attributes[attribute]) if attribute in d.attributes else -1 for d in docs],
        dtype=np.int64,
    )


def attack_accuracy(pred: np.ndarray, gold: np.ndarray) -> float:
    keep = gold >= 0
    if not keep.any():
        raise EmptyDataset("no gold attribute values to score against")
    return float(np.mean(pred[keep] == gold[keep]))


def write_predictions_csv(path, docs: Sequence, predictions: dict[str, np.ndarray], schema: AttributeSchema) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["doc_id", "attribute", "predicted", "gold"])
        for name, pred in predictions.items():
            values = schema[name].values
            for d, p in zip(docs, pred):
                w.writerow([d.id, name, values[p], d.attributes.get(name, "")])
