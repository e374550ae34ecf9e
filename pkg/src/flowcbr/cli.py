"""Command-line entry point.

Subcommands wire the pipeline end to end: extract features from captures or
flow CSVs, build a self-contained model directory, classify new flows,
evaluate, sweep packet prefixes, benchmark index backends, and generate
synthetic datasets. Settings resolve as flags > config file > defaults; the
config file is JSON holding any subset of the default keys, and unknown
keys are rejected. FLOWCBR_LOG sets the log level.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import flows as flows_mod
from .cbr import ClassRegistry, Thresholds, calibrate_thresholds, classify, verdict_to_json
from .features import (Normalizer, extract_matrix, fit_normalizer,
                       load_matrix_csv, save_matrix_csv)
from .flows import FlowCsvError, PcapFormatError, load_flows_csv, save_flows_csv
from .harness import (PipelineConfig, find_plateau, new_class_protocol,
                      packet_sweep, run_ann_benchmark, run_eval)
from .index import IndexConfig, IndexEntry, NNIndex
from .selection import SelectionMask, apply_mask
from .synth import default_templates, sweep_templates, synth_generate

log = logging.getLogger("flowcbr")

DEFAULTS = {
    "seed": 0,
    "backend": "brute",
    "leaf_size": 32,
    "k": 5,
    "quantile_new": 0.99,
    "quantile_ood": 0.999,
    "ood_margin": 1.5,
    "c_min": 5,
    "r_cohesion": None,
    "train_fraction": 0.70,
    "n_trees": 100,
    "max_depth": None,
    "n_packets": None,
    "idle_timeout": 60.0,
}

SWEEP_DEFAULT_COUNTS = "2,4,6,8,10,15,20,30"


class ValidationError(Exception):
    """Bad inputs or configuration; maps to exit code 2."""


def _load_config_file(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except FileNotFoundError:
        raise ValidationError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ValidationError(f"config file is not valid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise ValidationError("config file must hold a JSON object")
    unknown = sorted(set(doc) - set(DEFAULTS))
    if unknown:
        raise ValidationError(f"unknown config keys: {unknown}")
    return doc


def _settings(args: argparse.Namespace) -> dict:
    """Resolve effective settings: flags > config file > defaults."""
    merged = dict(DEFAULTS)
    merged.update(_load_config_file(args.config))
    for key in DEFAULTS:
        flag = getattr(args, key, None)
        if flag is not None:
            merged[key] = flag
    return merged


def _pipeline_config(s: dict, mask: SelectionMask | None = None) -> PipelineConfig:
    return PipelineConfig(
        n_packets=s["n_packets"], backend=s["backend"], leaf_size=s["leaf_size"],
        k=s["k"], quantile_new=s["quantile_new"], quantile_ood=s["quantile_ood"],
        ood_margin=s["ood_margin"], c_min=s["c_min"], r_cohesion=s["r_cohesion"],
        train_fraction=s["train_fraction"], seed=s["seed"], n_trees=s["n_trees"],
        max_depth=s["max_depth"], mask=mask)


def _out_dir(args: argparse.Namespace) -> Path:
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _read_flows(path: str, fmt: str, idle_timeout: float) -> list:
    p = Path(path)
    if not p.exists():
        raise ValidationError(f"input not found: {path}")
    if fmt == "auto":
        fmt = "csv" if p.suffix.lower() == ".csv" else "pcap"
    if fmt == "csv":
        return load_flows_csv(p)
    result = flows_mod.parse_pcap(p.read_bytes())
    if result.skipped or result.truncated:
        log.warning("capture: %d frames skipped, %d truncated records",
                    result.skipped, result.truncated)
    return flows_mod.assemble_flows(result.records, idle_timeout=idle_timeout)


def cmd_extract(args: argparse.Namespace) -> int:
    s = _settings(args)
    flows = _read_flows(args.input, args.format, s["idle_timeout"])
    if s["n_packets"] is not None:
        flows = [flows_mod.truncate_flow(f, s["n_packets"]) for f in flows]
    matrix = extract_matrix(flows)
    out = _out_dir(args) / "features.csv"
    save_matrix_csv(out, matrix,
                    [f.flow_id or f"f{i:06d}" for i, f in enumerate(flows)],
                    [f.label or "" for f in flows])
    log.info("wrote %d feature rows to %s", matrix.shape[0], out)
    print(f"{matrix.shape[0]} flows -> {out}")
    return 0


def cmd_index(args: argparse.Namespace) -> int:
    s = _settings(args)
    matrix, flow_ids, labels = load_matrix_csv(args.features)
    if matrix.shape[0] == 0:
        raise ValidationError("cannot index an empty feature matrix")
    if any(not lbl for lbl in labels):
        raise ValidationError("indexing needs a label on every row")
    normalizer = fit_normalizer(matrix)
    Xn = normalizer.transform(matrix)
    mask = None
    if args.mask:
        mask = SelectionMask.load(args.mask)
        Xn = apply_mask(Xn, mask)
    entries = [IndexEntry(i, Xn[i], labels[i]) for i in range(Xn.shape[0])]
    index = NNIndex.build(entries, IndexConfig(s["backend"], s["leaf_size"]))
    thresholds = calibrate_thresholds(
        Xn, labels, quantile_new=s["quantile_new"], quantile_ood=s["quantile_ood"],
        ood_margin=s["ood_margin"], k=s["k"], c_min=s["c_min"],
        r_cohesion=s["r_cohesion"])
    registry = ClassRegistry.from_training_labels(labels)
    out = _out_dir(args)
    index.save(out / "index.json")
    normalizer.save(out / "normalizer.json")
    thresholds.save(out / "thresholds.json")
    registry.save(out / "registry.json")
    if mask is not None:
        mask.save(out / "mask.json")
    log.info("indexed %d vectors into %s", len(entries), out)
    print(f"{len(entries)} vectors -> {out}")
    return 0


def cmd_classify(args: argparse.Namespace) -> int:
    s = _settings(args)
    model = Path(args.model)
    for name in ("index.json", "normalizer.json", "thresholds.json", "registry.json"):
        if not (model / name).exists():
            raise ValidationError(f"model directory is missing {name}")
    index = NNIndex.load(model / "index.json")
    normalizer = Normalizer.load(model / "normalizer.json")
    thresholds = Thresholds.load(model / "thresholds.json")
    registry = ClassRegistry.load(model / "registry.json")
    mask = SelectionMask.load(model / "mask.json") if (model / "mask.json").exists() else None

    if args.features:
        matrix, flow_ids, _ = load_matrix_csv(args.features)
    else:
        flows = _read_flows(args.input, args.format, s["idle_timeout"])
        if s["n_packets"] is not None:
            flows = [flows_mod.truncate_flow(f, s["n_packets"]) for f in flows]
        matrix = extract_matrix(flows)
        flow_ids = [f.flow_id or f"f{i:06d}" for i, f in enumerate(flows)]
    Xn = normalizer.transform(matrix)
    if mask is not None:
        Xn = apply_mask(Xn, mask)
    out = _out_dir(args) / "verdicts.jsonl"
    counts: dict[str, int] = {}
    with open(out, "w") as fh:
        for fid, row in zip(flow_ids, Xn):
            verdict = classify(index, registry, row, thresholds)
            counts[verdict.kind.value] = counts.get(verdict.kind.value, 0) + 1
            fh.write(verdict_to_json(fid, verdict) + "\n")
    log.info("verdicts: %s", counts)
    print(f"{len(flow_ids)} verdicts -> {out}  {counts}")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    s = _settings(args)
    flows = load_flows_csv(args.flows)
    out = _out_dir(args)
    if args.held_out:
        report = new_class_protocol(flows, args.held_out, _pipeline_config(s), out_dir=out)
        print(f"held-out {args.held_out}: registered as {report.registered_label} "
              f"after {report.samples_consumed} samples, "
              f"recall {report.held_out_recall:.3f} on {report.n_post_registration} later samples")
        return 0
    report = run_eval(flows, _pipeline_config(s), out_dir=out)
    print(f"macro-F1 retrieval {report.metrics_cbr.macro_f1():.3f}, "
          f"forest {report.metrics_forest.macro_f1():.3f}, "
          f"combined {report.metrics_ensemble.macro_f1():.3f} -> {out}")
    return 0


def cmd_sweep(args: argparse.Namespace) -> int:
    s = _settings(args)
    flows = load_flows_csv(args.flows)
    try:
        counts = [int(c) for c in args.counts.split(",") if c.strip()]
    except ValueError:
        raise ValidationError(f"bad --counts value: {args.counts!r}") from None
    if not counts:
        raise ValidationError("--counts must name at least one packet count")
    if counts != sorted(set(counts)):
        raise ValidationError("--counts must be strictly ascending")
    out = _out_dir(args) / "sweep.csv"
    points = packet_sweep(flows, counts, _pipeline_config(s), out_path=out)
    plateau = find_plateau(points)
    for p in points:
        print(f"n={p.n_packets:3d}  accuracy={p.accuracy:.4f}")
    print(f"plateau at n={plateau}" if plateau is not None else "no plateau found")
    return 0


def cmd_bench(args: argparse.Namespace) -> int:
    s = _settings(args)
    out = _out_dir(args) / "benchmark.csv"
    rows = run_ann_benchmark(n=args.n, d=args.d, n_queries=args.queries,
                             k=s["k"], seed=s["seed"], leaf_size=s["leaf_size"],
                             out_path=out)
    for r in rows:
        print(f"{r.backend:9s} build {r.build_s:8.3f}s  {r.qps:10.1f} q/s  "
              f"recall@{s['k']} {r.recall_at_k:.3f}")
    return 0


def cmd_synth(args: argparse.Namespace) -> int:
    s = _settings(args)
    if args.profile == "default":
        templates = default_templates(args.classes)
    else:
        templates = sweep_templates(args.classes)
    flows = synth_generate(templates, args.flows_per_class, seed=s["seed"])
    out = _out_dir(args) / "flows.csv"
    save_flows_csv(flows, out)
    print(f"{len(flows)} flows ({args.classes} classes) -> {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="flowcbr",
        description="Classification-by-retrieval toolkit for network flows.")
    parser.add_argument("--seed", type=int, default=None, help="global RNG seed")
    parser.add_argument("--config", default=None, help="JSON config file")
    parser.add_argument("--out", default=None, help="output directory")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("extract", help="flows in, feature matrix CSV out")
    p.add_argument("input", help="capture file or flow CSV")
    p.add_argument("--format", choices=("auto", "pcap", "csv"), default="auto")
    p.add_argument("--n-packets", dest="n_packets", type=int, default=None)
    p.add_argument("--idle-timeout", dest="idle_timeout", type=float, default=None)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("index", help="build a model directory from features")
    p.add_argument("features", help="feature matrix CSV with labels")
    p.add_argument("--backend", choices=("brute", "kdtree", "balltree"), default=None)
    p.add_argument("--leaf-size", dest="leaf_size", type=int, default=None)
    p.add_argument("--mask", default=None, help="selection mask JSON to apply")
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--c-min", dest="c_min", type=int, default=None)
    p.set_defaults(func=cmd_index)

    p = sub.add_parser("classify", help="emit verdict JSON lines")
    p.add_argument("model", help="model directory from the index command")
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--features", default=None, help="feature matrix CSV")
    group.add_argument("--input", default=None, help="capture file or flow CSV")
    p.add_argument("--format", choices=("auto", "pcap", "csv"), default="auto")
    p.add_argument("--n-packets", dest="n_packets", type=int, default=None)
    p.set_defaults(func=cmd_classify)

    p = sub.add_parser("eval", help="split, train, classify, report metrics")
    p.add_argument("flows", help="labeled flow CSV")
    p.add_argument("--backend", choices=("brute", "kdtree", "balltree"), default=None)
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--n-trees", dest="n_trees", type=int, default=None)
    p.add_argument("--n-packets", dest="n_packets", type=int, default=None)
    p.add_argument("--train-fraction", dest="train_fraction", type=float, default=None)
    p.add_argument("--held-out", default=None,
                   help="run the new-class protocol holding out this class")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="accuracy per packet-count prefix")
    p.add_argument("flows", help="labeled flow CSV")
    p.add_argument("--counts", default=SWEEP_DEFAULT_COUNTS,
                   help="comma-separated ascending packet counts")
    p.add_argument("--k", type=int, default=None)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("bench", help="compare index backends on random data")
    p.add_argument("--n", type=int, default=5000)
    p.add_argument("--d", type=int, default=183)
    p.add_argument("--queries", type=int, default=100)
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--leaf-size", dest="leaf_size", type=int, default=None)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("synth", help="generate labeled synthetic flows")
    p.add_argument("--classes", type=int, default=5)
    p.add_argument("--flows-per-class", dest="flows_per_class", type=int, default=200)
    p.add_argument("--profile", choices=("default", "sweep"), default="default")
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=os.environ.get("FLOWCBR_LOG", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValidationError, FlowCsvError, PcapFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure
        log.exception("command failed")
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
