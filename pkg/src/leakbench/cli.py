"""Command-line entry point: ``leakbench <subcommand> [options]``.

Every subcommand reads one JSON experiment config (the shipped default when
``--config`` is omitted).  Stage-by-stage subcommands regenerate the corpus
and split from config + seed, so their outputs line up with each other and
with ``run``.
"""
from __future__ import annotations

import argparse
import json
import logging
import signal
import sys
from dataclasses import replace
from pathlib import Path

from leakbench.aia import (
    harvest_representations,
    infer_attribute_indices,
    train_inference,
    write_predictions_csv,
)
from leakbench.apiserve import BudgetLedger, DirectTransport, HttpTransport, serve
from leakbench.corpus import split, write_jsonl
from leakbench.defense import NoDefense, defense_from_dict
from leakbench.errors import LeakBenchError
from leakbench.extraction import SAME_DOMAIN, build_transfer_set, train_extracted
from leakbench.runner import (
    ExperimentConfig,
    cross_pool,
    default_config,
    load_corpus,
    run_pipeline,
    score_attributes,
    sweep_mismatch,
    sweep_sharpness,
)
from leakbench.textmodel import evaluate_accuracy, featurize_many, load_model, save_model
from leakbench.victim import load_victim, save_victim, train_victim

logger = logging.getLogger("leakbench")


def _config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else default_config()
    if getattr(args, "transport", None):
        cfg = replace(cfg, transport=args.transport)
    return cfg


def _seed(args, cfg: ExperimentConfig) -> int:
    return cfg.seeds[0] if args.seed is None else args.seed


def _split(cfg: ExperimentConfig, seed: int):
    corpus, test = load_corpus(cfg, seed)
    return corpus, split(corpus, seed, cfg.aux_fraction, test)


def _out(args, default: str) -> Path:
    path = Path(args.out or default)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _dump(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2) + "\n", encoding="utf-8")


def cmd_synth(args) -> int:
    cfg = _config(args)
    seed = _seed(args, cfg)
    corpus, test = load_corpus(cfg, seed)
    out = _out(args, "synth")
    write_jsonl(corpus, out / "corpus.jsonl")
    write_jsonl(test, out / "test.jsonl")
    print(f"wrote {len(corpus)} documents to {out / 'corpus.jsonl'} and {len(test)} to {out / 'test.jsonl'}")
    return 0


def cmd_split(args) -> int:
    cfg = _config(args)
    seed = _seed(args, cfg)
    _, sp = _split(cfg, seed)
    out = _out(args, "split")
    _dump({"seed": seed, **sp.to_ids()}, out / "split.json")
    print(f"victim={len(sp.victim)} query={len(sp.query)} aux={len(sp.aux)} test={len(sp.test)}")
    return 0


def cmd_train_victim(args) -> int:
    cfg = _config(args)
    seed = _seed(args, cfg)
    _, sp = _split(cfg, seed)
    defense = defense_from_dict(json.loads(args.defense)) if args.defense else NoDefense()
    victim = train_victim(sp.victim, replace(cfg.victim_model, seed=seed), replace(cfg.victim_train, seed=seed),
                          defense, seed)
    out = _out(args, "victim")
    save_victim(victim, out / "victim.json")
    acc = evaluate_accuracy(victim.model, featurize_many(sp.test, victim.model.config),
                            [d.task_label for d in sp.test])
    print(f"victim test accuracy {acc:.4f}; saved to {out / 'victim.json'}")
    return 0


def cmd_serve(args) -> int:
    victim = load_victim(args.victim)
    if args.defense:
        victim = victim.with_defense(defense_from_dict(json.loads(args.defense)))
    stop = {signal.SIGINT, signal.SIGTERM}
    # block before the server threads start so they inherit the mask and
    # the signal is left pending for sigwait
    previous = signal.pthread_sigmask(signal.SIG_BLOCK, stop)
    try:
        handle = serve(victim, args.host, args.port)
        print(f"serving on {handle.url}  (Ctrl-C to stop)", flush=True)
        try:
            signal.sigwait(stop)
        finally:
            handle.close()
    finally:
        signal.pthread_sigmask(signal.SIG_SETMASK, previous)
    return 0


def cmd_extract(args) -> int:
    cfg = _config(args)
    seed = _seed(args, cfg)
    _, sp = _split(cfg, seed)
    plan = replace(cfg.plans[args.plan], seed=seed)
    if not (args.url or args.victim):
        raise LeakBenchError("give --victim (a saved victim) or --url (a running service)")
    ledger = BudgetLedger(plan.budget(len(sp.victim)))
    cross = cfg.cross_config() if cfg.synthetic is not None and plan.source != SAME_DOMAIN else None
    pool = sp.query if plan.source == SAME_DOMAIN else cross_pool(cfg)

    def build(client):
        return build_transfer_set(plan, client, ledger, victim_size=len(sp.victim), pool=pool, cross_cfg=cross,
                                  batch_size=cfg.query_batch_size)

    if args.url:
        ts = build(HttpTransport(args.url))
    elif cfg.transport == "http":
        with serve(load_victim(args.victim)) as handle:
            ts = build(HttpTransport(handle.url))
    else:
        ts = build(DirectTransport(load_victim(args.victim)))
    model = train_extracted(ts, replace(cfg.extraction_model, seed=seed + 1),
                            replace(cfg.extraction_train, seed=seed + 1))
    out = _out(args, "extract")
    ts.save_jsonl(out / "transfer.jsonl")
    save_model(model, out / "extracted.json")
    acc = evaluate_accuracy(model, featurize_many(sp.test, model.config), [d.task_label for d in sp.test])
    print(f"{plan.label}: {ledger.used} queries, extracted test accuracy {acc:.4f}")
    return 0


def cmd_aia(args) -> int:
    cfg = _config(args)
    seed = _seed(args, cfg)
    corpus, sp = _split(cfg, seed)
    source = load_model(args.model)
    rd = harvest_representations(source, sp.aux, corpus.schema)
    f = train_inference(rd, replace(cfg.inference, seed=seed))
    pred = infer_attribute_indices(f, source, sp.victim)
    scores, privacy, demo, ent = score_attributes(corpus.schema, pred, sp.victim)
    out = _out(args, "aia")
    write_predictions_csv(out / "predictions.csv", sp.victim, pred, corpus.schema)
    result = {"scores": scores, "empirical_privacy": privacy, "privacy_demographic": demo, "privacy_entities": ent}
    _dump(result, out / "aia.json")
    for name, s in scores.items():
        print(f"{name:<16} {s:.4f}")
    print(f"empirical privacy {privacy:.4f}")
    return 0


def _summary(aggregates) -> None:
    print(f"{'defense':<40} {'budget':<20} {'ext_acc':>8} {'privacy':>8} {'plain':>8} {'major':>8} {'max_p':>7}")
    for r in aggregates:
        if r["status"] == "failed":
            print(f"{r['defense']:<40} {r['budget']:<20} FAILED")
            continue
        print(f"{r['defense']:<40} {r['budget']:<20} {r['extracted_accuracy']:8.4f} {r['empirical_privacy']:8.4f}"
              f" {r['privacy_plain']:8.4f} {r['privacy_majority']:8.4f} {r['mean_max']:7.3f}")


def cmd_run(args) -> int:
    cfg = _config(args)
    if args.seed is not None:
        cfg = replace(cfg, seeds=(args.seed,))
    rep = run_pipeline(cfg, out_dir=_out(args, cfg.output_dir or "run"))
    _summary(rep.aggregates)
    for r in rep.failures:
        print(f"failed: seed={r['seed']} {r['defense']} {r['budget']}: {r['error']}", file=sys.stderr)
    return 0 if rep.ok else 1


def cmd_sweep_sharpness(args) -> int:
    cfg = _config(args)
    if args.seed is not None:
        cfg = replace(cfg, seeds=(args.seed,))
    taus = [float(t) for t in args.taus.split(",")] if args.taus else None
    rep = sweep_sharpness(cfg, taus, out_dir=_out(args, "sweep-sharpness"), plot=args.plot)
    for t, x, y in zip(rep.taus, rep.mean_max, rep.privacy):
        print(f"tau={t:<6g} mean_max={x:.4f} privacy={y:.4f}")
    print(f"spearman {rep.spearman:+.3f}  direction {'PASS' if rep.direction_holds else 'FAIL'}")
    return 0 if rep.pipeline.ok else 1


def cmd_sweep_mismatch(args) -> int:
    cfg = _config(args)
    if args.seed is not None:
        cfg = replace(cfg, seeds=(args.seed,))
    victims = None
    if args.hidden:
        victims = [replace(cfg.victim_model, hidden_dims=tuple(int(h) for h in spec.split(","))) for spec in args.hidden]
    rep = sweep_mismatch(cfg, victims, out_dir=_out(args, "sweep-mismatch"))
    for c in rep.cells:
        tag = "matched" if c["matched"] else "mismatch"
        print(f"{str(c['hidden_dims']):<12} {tag:<9} ext_acc={c['extracted_accuracy']:.4f} "
              f"privacy={c['empirical_privacy']:.4f}")
    print(f"direction {'PASS' if rep.direction_holds else 'FAIL'}")
    return 0 if all(p.ok for p in rep.pipelines) else 1


def cmd_report(args) -> int:
    path = Path(args.input)
    if path.is_dir():
        path = path / "report.json"
    with open(path, encoding="utf-8") as fh:
        rep = json.load(fh)
    _summary(rep["aggregates"])
    failed = [c for c in rep["cells"] if c["status"] != "ok"]
    print(f"{len(rep['cells'])} cells, {len(failed)} failed")
    return 0 if not failed else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="leakbench", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_, transport=False):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", help="experiment config JSON (default: the shipped config)")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--seed", type=int, help="run seed (default: first seed in the config)")
        if transport:
            sp.add_argument("--transport", choices=["direct", "http"], help="how the attacker reaches the victim")
        sp.set_defaults(func=fn)
        return sp

    add("synth", cmd_synth, "generate the synthetic corpus and test set as JSONL")
    add("split", cmd_split, "write the victim/query/aux/test split as document ids")
    tv = add("train-victim", cmd_train_victim, "train and save the victim model")
    tv.add_argument("--defense", help='output defense as JSON, e.g. \'{"kind": "top_k", "k": 2}\'')

    sv = sub.add_parser("serve", help="serve a saved victim over HTTP")
    sv.add_argument("--victim", required=True, help="path written by train-victim")
    sv.add_argument("--defense", help="override the victim's output defense (JSON)")
    sv.add_argument("--host", default="127.0.0.1")
    sv.add_argument("--port", type=int, default=8080)
    sv.set_defaults(func=cmd_serve)

    ex = add("extract", cmd_extract, "query the victim and train an extracted model", transport=True)
    ex.add_argument("--victim", help="saved victim, queried in-process")
    ex.add_argument("--url", help="base URL of a running service")
    ex.add_argument("--plan", type=int, default=0, help="index into the config's query plans")
    aia = add("aia", cmd_aia, "attribute inference with a saved source model")
    aia.add_argument("--model", required=True, help="source model (e.g. extracted.json)")
    add("run", cmd_run, "run the full experiment grid", transport=True)
    sh = add("sweep-sharpness", cmd_sweep_sharpness, "temperature sweep: sharpness vs privacy", transport=True)
    sh.add_argument("--taus", help="comma-separated temperatures (default: from the config)")
    sh.add_argument("--plot", action="store_true", help="also write sharpness.svg")
    mm = add("sweep-mismatch", cmd_sweep_mismatch, "vary the victim architecture", transport=True)
    mm.add_argument("--hidden", nargs="+", help="victim hidden dims, e.g. 32 64 64,64")

    rp = sub.add_parser("report", help="summarise a finished run")
    rp.add_argument("input", help="run directory or report.json")
    rp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (LeakBenchError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
