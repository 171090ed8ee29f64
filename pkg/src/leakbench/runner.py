"""Experiment orchestration: the full extraction + attribute-inference grid.

One run walks ``seeds x defenses x plans``.  For every seed the corpus is
generated (or loaded), split, and a victim is trained once; every grid cell
then gets its own budget ledger, transfer set, extracted model and attribute
inference model.  Baselines that do not depend on the cell (majority vote and
an untrained model of the extracted architecture) are computed once per seed.

A config plus its seeds fully determines every number in the report.
"""
from __future__ import annotations

import copy
import csv
import hashlib
import json
import logging
import time
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np

from leakbench import __version__
from leakbench.aia import (
    InferenceConfig,
    gold_indices,
    harvest_representations,
    infer_attribute_indices,
    majority_baseline,
    plain_baseline_model,
    train_inference,
)
from leakbench.apiserve import BudgetLedger, DirectTransport, HttpTransport, serve
from leakbench.corpus import (
    DEMOGRAPHIC,
    ENTITY_PRESENCE,
    AttributeSchema,
    Corpus,
    SynthConfig,
    attribute_histogram_variance,
    generate_synthetic,
    load_jsonl,
    ngram_overlap,
    split,
)
from leakbench.defense import DefenseConfig, NastyTeacher, NoDefense, Temperature, defense_from_dict
from leakbench.errors import ConfigError, InvalidInput, LeakBenchError
from leakbench.extraction import CROSS_DOMAIN, SAME_DOMAIN, QueryPlan, agreement, build_transfer_set, train_extracted
from leakbench.metrics import (
    empirical_privacy_demographic,
    empirical_privacy_entities,
    micro_f1,
    rank_correlation,
    sharpness_stats,
)
from leakbench.textmodel import ModelConfig, TrainConfig, evaluate_accuracy, featurize_many
from leakbench.victim import VictimModel, train_nasty_victim, train_victim, undefended_labels

logger = logging.getLogger(__name__)

TRANSPORTS = ("direct", "http")
TEST_SEED_OFFSET = 10_000
# how far (in privacy) a mismatched victim may fall below the matched control
MISMATCH_SLACK = 0.02


# --------------------------------------------------------------------------
# configuration
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything a run needs.  Built from, and serialised to, one JSON document.

    Exactly one of ``synthetic`` and ``jsonl`` describes the corpus.  For a
    JSONL corpus ``schema`` and ``test_jsonl`` are required and cross-domain
    plans draw from ``cross_jsonl``.  For a synthetic corpus each run seed
    reseeds the generator, and cross-domain queries come from the same
    generator with ``cross_domain`` overrides applied.
    """

    experiment_id: str = "default"
    seeds: tuple[int, ...] = (0, 1, 2)
    synthetic: SynthConfig | None = field(default_factory=SynthConfig)
    jsonl: str | None = None
    schema: AttributeSchema | None = None
    test_jsonl: str | None = None
    cross_jsonl: str | None = None
    cross_domain: dict = field(default_factory=lambda: {"domain_tag": "cross", "domain_shift": 0.75})
    test_size: int = 1000
    aux_fraction: float = 0.5
    victim_model: ModelConfig = field(default_factory=ModelConfig)
    victim_train: TrainConfig = field(default_factory=TrainConfig)
    extracted_model: ModelConfig | None = None
    extracted_train: TrainConfig | None = None
    defenses: tuple[DefenseConfig, ...] = (NoDefense(),)
    plans: tuple[QueryPlan, ...] = (QueryPlan(),)
    inference: InferenceConfig = field(default_factory=InferenceConfig)
    overlap_n: tuple[int, ...] = (1, 5)
    transport: str = "direct"
    query_batch_size: int = 128
    sharpness_taus: tuple[float, ...] = (0.25, 0.5, 1.0, 2.0, 4.0)
    sweep_plan: QueryPlan = field(default_factory=QueryPlan)
    mismatch_victims: tuple[ModelConfig, ...] = ()
    output_dir: str | None = None
    raw: dict | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if (self.synthetic is None) == (self.jsonl is None):
            raise ConfigError("give exactly one of 'synthetic' and 'jsonl'")
        if self.jsonl is not None and (self.schema is None or self.test_jsonl is None):
            raise ConfigError("a JSONL corpus needs 'schema' and 'test_jsonl'")
        if self.synthetic is not None:
            self.cross_config()  # validates the overrides
            if self.test_size < 1:
                raise ConfigError("test_size must be positive")
        if not self.defenses or not self.plans:
            raise ConfigError("the grid needs at least one defense and one plan")
        if len({d.label for d in self.defenses}) != len(self.defenses):
            raise ConfigError("defense grid contains duplicates")
        if len({p.label for p in self.plans}) != len(self.plans):
            raise ConfigError("plan grid contains duplicates")
        if self.transport not in TRANSPORTS:
            raise ConfigError(f"transport must be one of {TRANSPORTS}")
        if any(n < 1 for n in self.overlap_n):
            raise ConfigError("overlap n-gram sizes must be positive")
        em = self.extraction_model
        if em.num_classes != self.victim_model.num_classes:
            raise ConfigError("extracted model must predict the victim's classes")
        if self.synthetic is not None and self.synthetic.num_classes != self.victim_model.num_classes:
            raise ConfigError("victim num_classes differs from the corpus")

    @property
    def extraction_model(self) -> ModelConfig:
        return self.extracted_model or self.victim_model

    @property
    def extraction_train(self) -> TrainConfig:
        return self.extracted_train or self.victim_train

    @property
    def corpus_schema(self) -> AttributeSchema:
        return self.synthetic.schema if self.synthetic is not None else self.schema

    def cross_config(self) -> SynthConfig:
        d = self.synthetic.to_dict()
        d.update(copy.deepcopy(self.cross_domain))
        return SynthConfig.from_dict(d)

    def with_(self, **changes) -> "ExperimentConfig":
        """Copy with changes; the verbatim source document is dropped."""
        return replace(self, raw=None, **changes)

    def to_dict(self) -> dict:
        return {
            "experiment_id": self.experiment_id,
            "seeds": list(self.seeds),
            "corpus": (
                {"synthetic": self.synthetic.to_dict()}
                if self.synthetic is not None
                else {
                    "jsonl": self.jsonl,
                    "schema": self.schema.to_dict(),
                    "test_jsonl": self.test_jsonl,
                    "cross_jsonl": self.cross_jsonl,
                }
            ),
            "cross_domain": copy.deepcopy(self.cross_domain),
            "test_size": self.test_size,
            "aux_fraction": self.aux_fraction,
            "victim": {"model": self.victim_model.to_dict(), "train": self.victim_train.to_dict()},
            "extracted": {
                "model": self.extracted_model.to_dict() if self.extracted_model else None,
                "train": self.extracted_train.to_dict() if self.extracted_train else None,
            },
            "defenses": [d.to_dict() for d in self.defenses],
            "plans": [{"source": p.source, "multiplier": p.multiplier} for p in self.plans],
            "inference": self.inference.to_dict(),
            "overlap_n": list(self.overlap_n),
            "transport": self.transport,
            "query_batch_size": self.query_batch_size,
            "sharpness": {
                "taus": list(self.sharpness_taus),
                "plan": {"source": self.sweep_plan.source, "multiplier": self.sweep_plan.multiplier},
            },
            "mismatch": {"victims": [m.to_dict() for m in self.mismatch_victims]},
            "output_dir": self.output_dir,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {"experiment_id", "seeds", "corpus", "cross_domain", "test_size", "aux_fraction", "victim",
                 "extracted", "defenses", "plans", "inference", "overlap_n", "transport", "query_batch_size",
                 "sharpness", "mismatch", "output_dir"}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            corpus = d.get("corpus", {"synthetic": {}})
            synthetic = SynthConfig.from_dict(corpus["synthetic"]) if "synthetic" in corpus else None
            schema = AttributeSchema.from_dict(corpus["schema"]) if "schema" in corpus else None
            victim = d.get("victim", {})
            extracted = d.get("extracted") or {}
            sharp = d.get("sharpness", {})
            kwargs = dict(
                experiment_id=str(d.get("experiment_id", "default")),
                seeds=tuple(int(s) for s in d.get("seeds", (0, 1, 2))),
                synthetic=synthetic,
                jsonl=corpus.get("jsonl"),
                schema=schema,
                test_jsonl=corpus.get("test_jsonl"),
                cross_jsonl=corpus.get("cross_jsonl"),
                victim_model=_model_cfg(victim.get("model")),
                victim_train=TrainConfig.from_dict(victim.get("train") or {}),
                extracted_model=_model_cfg(extracted["model"]) if extracted.get("model") else None,
                extracted_train=TrainConfig.from_dict(extracted["train"]) if extracted.get("train") else None,
                defenses=tuple(defense_from_dict(x) for x in d.get("defenses", [{"kind": "none"}])),
                plans=tuple(_plan(p) for p in d.get("plans", [{}])),
                inference=InferenceConfig.from_dict(d.get("inference") or {}),
                sweep_plan=_plan(sharp.get("plan", {})),
                mismatch_victims=tuple(_model_cfg(m) for m in d.get("mismatch", {}).get("victims", [])),
                raw=copy.deepcopy(d),
            )
            for key in ("cross_domain", "test_size", "aux_fraction", "transport", "query_batch_size", "output_dir"):
                if key in d:
                    kwargs[key] = d[key]
            if "overlap_n" in d:
                kwargs["overlap_n"] = tuple(d["overlap_n"])
            if "taus" in sharp:
                kwargs["sharpness_taus"] = tuple(float(t) for t in sharp["taus"])
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"malformed experiment config: {exc}") from exc
        return cls(**kwargs)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        with open(path, encoding="utf-8") as fh:
            try:
                d = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: not valid JSON: {exc}") from exc
        return cls.from_dict(d)


def _model_cfg(d: dict | None) -> ModelConfig:
    d = dict(d or {})
    if "hidden_dims" in d:
        d["hidden_dims"] = tuple(d["hidden_dims"])
    return ModelConfig.from_dict(d)


def _plan(d: dict) -> QueryPlan:
    return QueryPlan(d.get("source", SAME_DOMAIN), float(d.get("multiplier", 1.0)))


def default_config() -> ExperimentConfig:
    """The configuration shipped with the package."""
    text = resources.files("leakbench").joinpath("configs/default.json").read_text(encoding="utf-8")
    return ExperimentConfig.from_dict(json.loads(text))


# --------------------------------------------------------------------------
# per-seed state
# --------------------------------------------------------------------------


@dataclass
class SeedContext:
    seed: int
    corpus: Corpus
    split: object
    victim: VictimModel
    test_labels: np.ndarray
    baselines: dict
    variances: dict
    nasty: dict = field(default_factory=dict)


def load_corpus(cfg: ExperimentConfig, seed: int) -> tuple[Corpus, Corpus]:
    """Main corpus and held-out test corpus for one run seed."""
    if cfg.synthetic is not None:
        corpus = generate_synthetic(replace(cfg.synthetic, seed=seed))
        test = generate_synthetic(replace(cfg.synthetic, seed=seed + TEST_SEED_OFFSET, size=cfg.test_size))
        return corpus, test
    corpus = load_jsonl(cfg.jsonl, cfg.schema)
    test = load_jsonl(cfg.test_jsonl, cfg.schema, corpus.label_names)
    return corpus, test


def cross_pool(cfg: ExperimentConfig):
    if cfg.synthetic is not None or cfg.cross_jsonl is None:
        return None
    return load_jsonl(cfg.cross_jsonl, cfg.schema).docs


def score_attributes(schema: AttributeSchema, pred: dict, docs) -> tuple[dict, float, float | None, float | None]:
    """Per-attribute score plus privacy per attribute kind.

    Demographic attributes are scored by accuracy, entity attributes by the
    F1 of their presence predictions.  The headline privacy is the
    demographic one when the schema has demographic attributes.
    """
    scores, accs, ent_pred, ent_gold = {}, [], [], []
    for spec in schema:
        gold = gold_indices(docs, schema, spec.name)
        keep = gold >= 0
        p, g = pred[spec.name][keep], gold[keep]
        if spec.kind == ENTITY_PRESENCE:
            scores[spec.name] = micro_f1(p == 1, g == 1)
            ent_pred.append(p == 1)
            ent_gold.append(g == 1)
        else:
            scores[spec.name] = float(np.mean(p == g)) if len(g) else float("nan")
            accs.append(scores[spec.name])
    demo = empirical_privacy_demographic(accs) if accs else None
    ent = (
        empirical_privacy_entities(np.concatenate(ent_pred), np.concatenate(ent_gold)) if ent_pred else None
    )
    return scores, (demo if demo is not None else ent), demo, ent


def _aia_scores(source, ctx_split, schema, icfg: InferenceConfig):
    rd = harvest_representations(source, ctx_split.aux, schema)
    f = train_inference(rd, icfg)
    pred = infer_attribute_indices(f, source, ctx_split.victim)
    return rd, score_attributes(schema, pred, ctx_split.victim)


def prepare_seed(cfg: ExperimentConfig, seed: int) -> SeedContext:
    corpus, test = load_corpus(cfg, seed)
    sp = split(corpus, seed, cfg.aux_fraction, test)
    schema = corpus.schema
    victim = train_victim(sp.victim, replace(cfg.victim_model, seed=seed), replace(cfg.victim_train, seed=seed),
                          seed=seed)
    Xt = featurize_many(sp.test, victim.model.config)
    test_labels = np.array([d.task_label for d in sp.test], dtype=np.int64)
    icfg = replace(cfg.inference, seed=seed)

    plain = plain_baseline_model(cfg.extraction_model, seed + 2)
    rd, (plain_scores, plain_priv, _, _) = _aia_scores(plain, sp, schema, icfg)
    maj_pred = {a: majority_baseline(rd, a).predict_indices(len(sp.victim)) for a in schema.names}
    maj_scores, maj_priv, _, _ = score_attributes(schema, maj_pred, sp.victim)
    variances = {a: attribute_histogram_variance(sp.victim, a, schema) for a in schema.names}
    ctx = SeedContext(
        seed=seed,
        corpus=corpus,
        split=sp,
        victim=victim,
        test_labels=test_labels,
        baselines={"plain": plain_scores, "plain_privacy": plain_priv,
                   "majority": maj_scores, "majority_privacy": maj_priv,
                   "victim_accuracy": evaluate_accuracy(victim.model, Xt, test_labels)},
        variances=variances,
    )
    for d in cfg.defenses:
        if isinstance(d, NastyTeacher):
            nv = train_nasty_victim(sp.victim, victim.model, d.omega, d.tau_nt, victim.model.config,
                                    replace(cfg.victim_train, seed=seed), seed)
            ctx.nasty[d.label] = (nv, evaluate_accuracy(nv.model, Xt, test_labels))
    return ctx


# --------------------------------------------------------------------------
# cells
# --------------------------------------------------------------------------


def _columns(schema: AttributeSchema, overlap_n) -> list[str]:
    cols = ["experiment_id", "seed", "defense", "budget", "victim_kind", "status", "error", "n_seeds",
            "queries", "victim_accuracy", "extracted_accuracy", "agreement", "mean_max", "median_max"]
    cols += [f"overlap_{n}" for n in overlap_n]
    cols += ["empirical_privacy", "privacy_demographic", "privacy_entities", "privacy_plain", "privacy_majority"]
    for a in schema.names:
        cols += [f"attack_{a}", f"plain_{a}", f"majority_{a}", f"variance_{a}"]
    return cols


def _victim_for(ctx: SeedContext, defense: DefenseConfig) -> tuple[VictimModel, float]:
    if isinstance(defense, NastyTeacher):
        return ctx.nasty[defense.label]
    return ctx.victim.with_defense(defense), ctx.baselines["victim_accuracy"]


def run_cell(cfg: ExperimentConfig, ctx: SeedContext, defense: DefenseConfig, plan: QueryPlan,
             cross_docs=None) -> dict:
    """One grid cell; returns a flat report row."""
    sp, seed, schema = ctx.split, ctx.seed, ctx.corpus.schema
    victim, victim_acc = _victim_for(ctx, defense)
    plan = replace(plan, seed=seed)
    budget = plan.budget(len(sp.victim))
    ledger = BudgetLedger(budget)
    if plan.source == SAME_DOMAIN:
        pool, cross_cfg = sp.query, None
    else:
        pool, cross_cfg = cross_docs, (cfg.cross_config() if cfg.synthetic is not None else None)

    def build(client):
        return build_transfer_set(plan, client, ledger, victim_size=len(sp.victim), pool=pool,
                                  cross_cfg=cross_cfg, batch_size=cfg.query_batch_size)

    if cfg.transport == "http":
        with serve(victim) as handle:
            ts = build(HttpTransport(handle.url))
    else:
        ts = build(DirectTransport(victim))

    ext = train_extracted(ts, replace(cfg.extraction_model, seed=seed + 1),
                          replace(cfg.extraction_train, seed=seed + 1))
    Xt = featurize_many(sp.test, ext.config)
    _, (scores, privacy, demo, ent) = _aia_scores(ext, sp, schema, replace(cfg.inference, seed=seed))
    sharp = sharpness_stats(ts.posteriors)
    row = {
        "queries": ledger.used,
        "victim_accuracy": victim_acc,
        "extracted_accuracy": evaluate_accuracy(ext, Xt, ctx.test_labels),
        "agreement": agreement(ext, undefended_labels(victim, sp.test), sp.test),
        "mean_max": sharp["mean_max"],
        "median_max": sharp["median_max"],
        "empirical_privacy": privacy,
        "privacy_demographic": demo,
        "privacy_entities": ent,
        "privacy_plain": ctx.baselines["plain_privacy"],
        "privacy_majority": ctx.baselines["majority_privacy"],
    }
    for n in cfg.overlap_n:
        row[f"overlap_{n}"] = ngram_overlap(sp.test, ts.docs, n)
    for a in schema.names:
        row[f"attack_{a}"] = scores[a]
        row[f"plain_{a}"] = ctx.baselines["plain"][a]
        row[f"majority_{a}"] = ctx.baselines["majority"][a]
        row[f"variance_{a}"] = ctx.variances[a]
    return row


# --------------------------------------------------------------------------
# report
# --------------------------------------------------------------------------


@dataclass
class ExperimentReport:
    config: ExperimentConfig
    columns: list[str]
    rows: list[dict]
    aggregates: list[dict]

    @property
    def failures(self) -> list[dict]:
        return [r for r in self.rows if r["status"] != "ok"]

    @property
    def ok(self) -> bool:
        return not self.failures

    def cell(self, defense, budget, seed="mean") -> dict:
        """Look up a row by defense (config or label), plan (or label) and seed."""
        d = defense.label if isinstance(defense, DefenseConfig) else defense
        b = budget.label if isinstance(budget, QueryPlan) else budget
        for r in (self.aggregates if seed == "mean" else self.rows):
            if r["defense"] == d and r["budget"] == b and r["seed"] == seed:
                return r
        raise KeyError((d, b, seed))

    def privacy_rows(self) -> list[dict]:
        """Seed-averaged privacy table, one row per cell and attribute.

        Rows with attribute ``*demographic`` / ``*entities`` carry the
        kind-level empirical privacy.
        """
        schema = self.config.corpus_schema
        out = []
        for r in self.aggregates:
            if r["status"] == "failed":
                continue
            base = {"experiment_id": r["experiment_id"], "defense": r["defense"], "budget": r["budget"]}
            for spec in schema:
                a = spec.name
                out.append({**base, "attribute": a, "attack_acc_or_f1": r[f"attack_{a}"],
                            "empirical_privacy": 1.0 - r[f"attack_{a}"],
                            "baseline_majority": r[f"majority_{a}"], "baseline_plain": r[f"plain_{a}"]})
            for kind, col in ((DEMOGRAPHIC, "privacy_demographic"), ("entities", "privacy_entities")):
                if r[col] is None:
                    continue
                out.append({**base, "attribute": f"*{kind}", "attack_acc_or_f1": 1.0 - r[col],
                            "empirical_privacy": r[col], "baseline_majority": None, "baseline_plain": None})
        return out

    def to_dict(self) -> dict:
        return {
            "version": __version__,
            "config": self.config.raw if self.config.raw is not None else self.config.to_dict(),
            "columns": self.columns,
            "cells": self.rows,
            "aggregates": self.aggregates,
            "privacy": self.privacy_rows(),
        }

    def write(self, out_dir, started: float | None = None) -> dict:
        """Write ``cells.csv``, ``privacy.csv``, ``report.json`` and ``manifest.json``."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        _write_csv(out / "cells.csv", self.columns, self.rows + self.aggregates)
        _write_csv(out / "privacy.csv", PRIVACY_COLUMNS, self.privacy_rows())
        (out / "report.json").write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n",
                                         encoding="utf-8")
        files = {name: hashlib.sha256((out / name).read_bytes()).hexdigest()
                 for name in ("cells.csv", "privacy.csv", "report.json")}
        manifest = {
            "version": __version__,
            "experiment_id": self.config.experiment_id,
            "seeds": list(self.config.seeds),
            "config": self.config.to_dict(),
            "cells": len(self.rows),
            "failed_cells": len(self.failures),
            "files": files,
            "created": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        }
        if started is not None:
            manifest["elapsed_seconds"] = round(time.time() - started, 3)
        (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
        return manifest


PRIVACY_COLUMNS = ["experiment_id", "defense", "budget", "attribute", "attack_acc_or_f1", "empirical_privacy",
                   "baseline_majority", "baseline_plain"]


def _write_csv(path: Path, columns: Sequence[str], rows: Sequence[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=list(columns), extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: ("" if r.get(k) is None else r.get(k)) for k in columns})


_META = ("experiment_id", "seed", "defense", "budget", "victim_kind", "status", "error", "n_seeds")


def _aggregate(cfg: ExperimentConfig, columns, rows) -> list[dict]:
    out = []
    for d in cfg.defenses:
        for p in cfg.plans:
            group = [r for r in rows if r["defense"] == d.label and r["budget"] == p.label]
            ok = [r for r in group if r["status"] == "ok"]
            agg = {c: None for c in columns}
            agg.update(experiment_id=cfg.experiment_id, seed="mean", defense=d.label, budget=p.label,
                       victim_kind=group[0]["victim_kind"], n_seeds=len(ok), error="",
                       status="ok" if len(ok) == len(group) else ("partial" if ok else "failed"))
            for c in columns:
                if c in _META:
                    continue
                vals = [r[c] for r in ok if r[c] is not None]
                if vals:
                    agg[c] = float(np.mean(vals))
            out.append(agg)
    return out


def run_pipeline(cfg: ExperimentConfig, out_dir=None) -> ExperimentReport:
    """Run the whole grid.  Failures are recorded per cell and the grid goes on.

    Reports are written when ``out_dir`` (or ``cfg.output_dir``) is set.
    """
    started = time.time()
    schema = cfg.corpus_schema
    columns = _columns(schema, cfg.overlap_n)
    rows = []
    pool = cross_pool(cfg)
    for seed in cfg.seeds:
        try:
            ctx = prepare_seed(cfg, seed)
            setup_error = None
        except (LeakBenchError, ValueError, ArithmeticError, OSError) as exc:
            logger.exception("seed %d failed during setup", seed)
            ctx, setup_error = None, f"{type(exc).__name__}: {exc}"
        for d in cfg.defenses:
            for p in cfg.plans:
                row = {c: None for c in columns}
                row.update(experiment_id=cfg.experiment_id, seed=seed, defense=d.label, budget=p.label,
                           victim_kind="nasty_teacher" if isinstance(d, NastyTeacher) else "standard",
                           n_seeds=1, status="ok", error="")
                if setup_error is not None:
                    row.update(status="failed", error=setup_error)
                else:
                    try:
                        row.update(run_cell(cfg, ctx, d, p, pool))
                    except (LeakBenchError, ValueError, ArithmeticError, OSError) as exc:
                        logger.exception("cell %s / %s / seed %d failed", d.label, p.label, seed)
                        row.update(status="failed", error=f"{type(exc).__name__}: {exc}")
                logger.info("seed %d  %-40s %-22s %s", seed, d.label, p.label, row["status"])
                rows.append(row)
    report = ExperimentReport(cfg, columns, rows, _aggregate(cfg, columns, rows))
    out_dir = out_dir or cfg.output_dir
    if out_dir is not None:
        report.write(out_dir, started)
    return report


# --------------------------------------------------------------------------
# sweeps
# --------------------------------------------------------------------------


@dataclass
class SharpnessReport:
    taus: list[float]
    mean_max: list[float]
    privacy: list[float]
    spearman: float
    pipeline: ExperimentReport

    @property
    def direction_holds(self) -> bool:
        # sharper posteriors should go with higher empirical privacy
        return self.spearman > 0

    def to_dict(self) -> dict:
        return {"taus": self.taus, "mean_max": self.mean_max, "privacy": self.privacy,
                "spearman": self.spearman, "claimed_direction": "positive",
                "direction_holds": self.direction_holds}


def sweep_sharpness(cfg: ExperimentConfig, taus: Sequence[float] | None = None, out_dir=None,
                    plot: bool = False) -> SharpnessReport:
    """Vary the output temperature and correlate posterior sharpness with privacy."""
    taus = [float(t) for t in (cfg.sharpness_taus if taus is None else taus)]
    if len(taus) < 3 or any(t <= 0 for t in taus):
        raise InvalidInput("the temperature grid needs at least 3 positive values")
    if len(set(taus)) != len(taus):
        raise InvalidInput("temperature grid contains duplicates")
    defenses = tuple(Temperature(t) for t in taus)
    sub = cfg.with_(defenses=defenses, plans=(cfg.sweep_plan,), output_dir=None)
    rep = run_pipeline(sub, out_dir=None if out_dir is None else Path(out_dir) / "pipeline")
    xs, ys = [], []
    for d in defenses:
        r = rep.cell(d, cfg.sweep_plan)
        xs.append(r["mean_max"])
        ys.append(r["empirical_privacy"])
    if any(v is None for v in xs + ys):
        raise InvalidInput("some temperature cells failed on every seed")
    out = SharpnessReport(taus, xs, ys, rank_correlation(xs, ys), rep)
    if out_dir is not None:
        path = Path(out_dir)
        (path / "sharpness.json").write_text(json.dumps(out.to_dict(), indent=2) + "\n", encoding="utf-8")
        if plot:
            plot_sharpness(out, path / "sharpness.svg")
    return out


def plot_sharpness(report: SharpnessReport, path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(4.5, 3.5))
    ax.scatter(report.mean_max, report.privacy)
    for t, x, y in zip(report.taus, report.mean_max, report.privacy):
        ax.annotate(f"τ={t:g}", (x, y), textcoords="offset points", xytext=(4, 4), fontsize=8)
    ax.set_xlabel("mean max posterior of transfer set")
    ax.set_ylabel("empirical privacy")
    ax.set_title(f"Spearman ρ = {report.spearman:.2f}")
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


@dataclass
class MismatchReport:
    cells: list[dict]
    pipelines: list[ExperimentReport]

    @property
    def matched(self) -> dict:
        return next(c for c in self.cells if c["matched"])

    @property
    def direction_holds(self) -> bool:
        ref = self.matched["empirical_privacy"]
        return all(c["empirical_privacy"] >= ref - MISMATCH_SLACK for c in self.cells if not c["matched"])

    def to_dict(self) -> dict:
        return {"cells": self.cells, "slack": MISMATCH_SLACK, "direction_holds": self.direction_holds}


def _same_architecture(a: ModelConfig, b: ModelConfig) -> bool:
    return replace(a, seed=0) == replace(b, seed=0)


def sweep_mismatch(cfg: ExperimentConfig, victims: Sequence[ModelConfig] | None = None,
                   out_dir=None) -> MismatchReport:
    """Fix the extracted architecture and vary the victim's.

    A victim matching the extracted architecture is added as the control when
    the grid does not contain one.
    """
    victims = list(cfg.mismatch_victims if victims is None else victims)
    if len(victims) < 2:
        raise InvalidInput("the mismatch sweep needs at least 2 victim configurations")
    ext = cfg.extraction_model
    if not any(_same_architecture(v, ext) for v in victims):
        victims.append(ext)
    cells, reps = [], []
    for i, vm in enumerate(victims):
        sub = cfg.with_(victim_model=vm, extracted_model=ext, defenses=(NoDefense(),), plans=(cfg.sweep_plan,),
                        output_dir=None)
        rep = run_pipeline(sub, out_dir=None if out_dir is None else Path(out_dir) / f"victim{i}")
        r = rep.cell(NoDefense(), cfg.sweep_plan)
        cells.append({
            "hidden_dims": list(vm.hidden_dims),
            "activation": vm.activation,
            "matched": _same_architecture(vm, ext),
            "victim_accuracy": r["victim_accuracy"],
            "extracted_accuracy": r["extracted_accuracy"],
            "empirical_privacy": r["empirical_privacy"],
        })
        reps.append(rep)
    out = MismatchReport(cells, reps)
    if out_dir is not None:
        (Path(out_dir) / "mismatch.json").write_text(json.dumps(out.to_dict(), indent=2) + "\n", encoding="utf-8")
    return out
