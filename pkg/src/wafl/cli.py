"""Command line front end: ``generate-trace``, ``partition``, ``run`` and ``report``.

Experiments are described by a YAML document (JSON is valid YAML, so JSON
works too)::

    seed: 0
    mnist_dir: ../data/mnist        # relative paths resolve against the config file
    partition: {dominance: 0.9, subset: 10000}
    trace: {kind: static_line}      # or {kind: rwp, params: {area_size: 500}} or {file: trace.json}
    run: {mode: wafl, lam: 1.0, learning_rate: 0.001, pretrain_epochs: 50,
          total_epochs: 300, eval_stride: 10}
    output: runs/line
    sweep:                          # optional cartesian grid over run fields
      mode: [wafl, self_train, federated]
      lam: [0.1, 1.0]
"""

from __future__ import annotations

import argparse
import dataclasses
import datetime as dt
import itertools
import json
import logging
import platform
import sys
from collections import Counter
from pathlib import Path

import numpy as np
import yaml

from . import __version__, contact, dataset, engine, metrics
from .errors import ConfigError, FormatError, InsufficientDataError

log = logging.getLogger("wafl")

RUN_FIELDS = {f.name for f in dataclasses.fields(engine.RunConfig)}
TOP_KEYS = {"seed", "mnist_dir", "partition", "trace", "run", "output", "sweep", "test_subset"}


# -- configuration --------------------------------------------------------------

@dataclasses.dataclass(frozen=True)
class ExperimentConfig:
    name: str
    seed: int
    mnist_dir: Path
    partition: dict
    trace: dict
    run: engine.RunConfig
    output: Path
    test_subset: int | None = None

    def to_dict(self) -> dict:
        """Fully resolved form; feeding it back to ``run`` repeats the experiment."""
        return {
            "seed": self.seed,
            "mnist_dir": str(self.mnist_dir),
            "partition": _jsonable(self.partition),
            "trace": _jsonable(self.trace),
            "run": dataclasses.asdict(self.run),
            "output": str(self.output),
            "test_subset": self.test_subset,
        }


def _jsonable(d):
    return {k: (str(v) if isinstance(v, Path) else v) for k, v in d.items()}


def read_document(path) -> dict:
    path = Path(path)
    try:
        doc = yaml.safe_load(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except yaml.YAMLError as exc:
        raise FormatError(f"{path}: not valid YAML/JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    if "config" in doc and "version" in doc:  # a run manifest
        doc = doc["config"]
    return doc


def _resolve_path(value, base: Path) -> Path:
    p = Path(value).expanduser()
    return p if p.is_absolute() else (base / p)


def expand_config(doc: dict, base_dir, *, seed=None, output=None, workers=None) -> list[ExperimentConfig]:
    """Validate a config document and expand its sweep into individual experiments.

    Raises :class:`ConfigError` for anything the engine would reject, so
    nothing has trained by the time a problem surfaces.
    """
    base_dir = Path(base_dir)
    unknown = set(doc) - TOP_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    seed = doc.get("seed") if seed is None else seed
    if seed is None:
        raise ConfigError("a seed is required (config key 'seed' or --seed)")
    seed = int(seed)

    run_fields = dict(doc.get("run") or {})
    bad = set(run_fields) - RUN_FIELDS
    if bad:
        raise ConfigError(f"unknown run fields: {sorted(bad)}")
    run_fields["seed"] = seed
    if workers is not None:
        run_fields["workers"] = workers

    partition = dict(doc.get("partition") or {})
    for key in ("file",):
        if key in partition:
            partition[key] = _resolve_path(partition[key], base_dir)
            if not partition[key].exists():
                raise ConfigError(f"partition file not found: {partition[key]}")
    trace = dict(doc.get("trace") or {"kind": "static_line"})
    if "file" in trace:
        trace["file"] = _resolve_path(trace["file"], base_dir)
        if not trace["file"].exists():
            raise ConfigError(f"trace file not found: {trace['file']}")
    elif "kind" not in trace:
        raise ConfigError("trace needs either 'kind' or 'file'")

    mnist_dir = _resolve_path(doc.get("mnist_dir", "data/mnist"), base_dir)
    for stem in (dataset.TRAIN_IMAGES, dataset.TRAIN_LABELS, dataset.TEST_IMAGES, dataset.TEST_LABELS):
        try:
            dataset._resolve(mnist_dir, stem)
        except FileNotFoundError as exc:
            raise ConfigError(str(exc)) from None

    out = _resolve_path(output if output is not None else doc.get("output", "runs/out"),
                        Path.cwd() if output is not None else base_dir)
    test_subset = doc.get("test_subset")

    sweep = dict(doc.get("sweep") or {})
    bad = set(sweep) - RUN_FIELDS - {"trace"}
    if bad:
        raise ConfigError(f"sweep keys must be run fields or 'trace', got {sorted(bad)}")
    keys = sorted(sweep)
    grids = [sweep[k] if isinstance(sweep[k], list) else [sweep[k]] for k in keys]

    experiments, seen = [], set()
    for combo in itertools.product(*grids):
        fields = dict(run_fields)
        this_trace = dict(trace)
        for k, v in zip(keys, combo):
            if k == "trace":
                this_trace = dict(v) if isinstance(v, dict) else {"kind": v}
            else:
                fields[k] = v
        try:
            cfg = engine.RunConfig(**fields)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None
        cfg.validate()
        if cfg.mode != "wafl":
            this_trace = {}
        if cfg.mode == "self_train":
            cfg = dataclasses.replace(cfg, lam=engine.RunConfig.lam)
        ident = (cfg, json.dumps(_jsonable(this_trace), sort_keys=True))
        if ident in seen:  # self_train ignores lam and the trace, federated ignores the trace
            continue
        name = _run_name(cfg, this_trace) if keys else ""
        if name in seen:
            raise ConfigError(f"two sweep entries map to the same run name {name!r}")
        seen.update((ident, name))
        experiments.append(ExperimentConfig(
            name=name, seed=seed, mnist_dir=mnist_dir, partition=partition, trace=this_trace,
            run=cfg, output=out / name if name else out, test_subset=test_subset))
    return experiments


def _run_name(cfg: engine.RunConfig, trace: dict) -> str:
    parts = [cfg.mode]
    if cfg.mode == "wafl":
        tag = trace.get("name") or trace.get("kind") or Path(trace["file"]).stem
        extras = dict(trace.get("params") or {})
        extras.update({k: v for k, v in trace.items() if k in ("seed", "epochs")})
        parts.append("-".join([str(tag)] + [f"{k}{v:g}" if isinstance(v, float) else f"{k}{v}"
                                            for k, v in sorted(extras.items())]))
    if cfg.mode != "self_train":
        parts.append(f"lam{cfg.lam:g}")
    parts.append(f"lr{cfg.learning_rate:g}")
    return "_".join(parts)


# -- data assembly --------------------------------------------------------------

def partition_config(desc: dict, seed: int, n_nodes=10) -> dataset.PartitionConfig:
    cfg = dataset.PartitionConfig(n_nodes=int(desc.get("n_nodes", n_nodes)),
                                  dominance=float(desc.get("dominance", 0.9)),
                                  seed=int(desc.get("seed", seed)))
    cfg.validate()
    return cfg


def load_train_subset(mnist_dir, subset=None):
    x, y = dataset.load_mnist(mnist_dir, "train")
    if subset is not None:
        if not 0 < int(subset) <= len(y):
            raise ConfigError(f"subset must lie in 1..{len(y)}, got {subset}")
        x, y = x[:int(subset)], y[:int(subset)]
    return x, y


def build_trace(desc: dict, n_nodes: int, n_epochs: int, seed: int):
    if not desc:
        return None
    if "file" in desc:
        return contact.load_trace(desc["file"])
    params = dict(desc.get("params") or {})
    return contact.generate(desc["kind"], n_nodes=n_nodes, n_epochs=int(desc.get("epochs", max(n_epochs, 1))),
                            seed=int(desc.get("seed", seed)), **params)


def assemble(exp: ExperimentConfig, cache: dict) -> tuple[engine.ExperimentData, dict]:
    """Load data, partition and trace for one experiment; ``cache`` shares work across a sweep."""
    key = ("train", str(exp.mnist_dir), exp.partition.get("subset"))
    if key not in cache:
        cache[key] = load_train_subset(exp.mnist_dir, exp.partition.get("subset"))
    x, y = cache[key]
    tkey = ("test", str(exp.mnist_dir), exp.test_subset)
    if tkey not in cache:
        tx, ty = dataset.load_mnist(exp.mnist_dir, "test")
        cache[tkey] = (tx[:exp.test_subset], ty[:exp.test_subset]) if exp.test_subset else (tx, ty)
    tx, ty = cache[tkey]

    if "file" in exp.partition:
        parts, pdoc = dataset.load_partition(exp.partition["file"])
        pinfo = {"file": str(exp.partition["file"]), "seed": pdoc.get("seed"), "dominance": pdoc.get("dominance")}
    else:
        pcfg = partition_config(exp.partition, exp.seed)
        pkey = ("partition", key, pcfg)
        if pkey not in cache:
            cache[pkey] = dataset.partition_noniid(y, pcfg)
        parts = cache[pkey]
        pinfo = dataclasses.asdict(pcfg) | {"subset": exp.partition.get("subset")}
    trace = build_trace(exp.trace, len(parts), exp.run.total_epochs, exp.seed)
    return engine.ExperimentData(x, y, parts, tx, ty, trace), pinfo


# -- run ------------------------------------------------------------------------

def _now():
    return dt.datetime.now(dt.timezone.utc).isoformat(timespec="seconds")


def write_manifest(exp: ExperimentConfig, pinfo: dict, trace, argv) -> dict:
    doc = {
        "version": __version__,
        "command": argv,
        "started": _now(),
        "config": exp.to_dict(),
        "seeds": {"run": exp.seed, "partition": pinfo.get("seed"),
                  "trace": exp.trace.get("seed", exp.seed) if exp.trace else None},
        "partition": pinfo,
        "trace": None if trace is None else {"kind": trace.kind, "n_nodes": trace.n_nodes,
                                             "n_epochs": trace.n_epochs},
        "environment": {"python": platform.python_version(), "numpy": np.__version__},
    }
    exp.output.mkdir(parents=True, exist_ok=True)
    (exp.output / "manifest.json").write_text(json.dumps(doc, indent=2))
    return doc


def execute(exp: ExperimentConfig, data: engine.ExperimentData, *, pretrained=None):
    """Run one experiment and write its output files; returns the list of records."""
    started = _now()
    snap_dir = exp.output / "snapshots" if exp.run.snapshot_stride else None
    records = []
    for rec in engine.run_experiment(exp.run, data, pretrained=pretrained, snapshot_dir=snap_dir):
        records.append(rec)
        if rec.nodes:
            log.info("%s epoch %d mean accuracy %.4f E(all) %.3e", exp.name or exp.run.mode, rec.epoch,
                     rec.mean_accuracy, rec.convergence["all"])
    write_outputs(exp.output, records)
    (exp.output / "timing.json").write_text(json.dumps({"started": started, "finished": _now()}))
    return records


def write_outputs(out: Path, records):
    evaluated = [r for r in records if r.nodes]
    metrics.write_metrics_csv(out / "metrics.csv",
                              (m for r in evaluated for n in r.nodes for m in n.micro))
    metrics.write_convergence_csv(out / "convergence.csv", ((r.epoch, r.convergence) for r in records))
    with open(out / "node_accuracy.csv", "w") as fh:
        fh.write("epoch,node,accuracy\n")
        for r in evaluated:
            for n in r.nodes:
                fh.write(f"{r.epoch},{n.node_id},{n.accuracy!r}\n")
    metrics.write_confusions_json(out / "confusion.json",
                                  ((r.epoch, n.node_id, n.confusion) for r in evaluated for n in r.nodes))


def cmd_run(args) -> int:
    doc = read_document(args.config)
    experiments = expand_config(doc, Path(args.config).resolve().parent, seed=args.seed,
                                output=args.out, workers=args.workers)
    cache, prepared = {}, []
    for exp in experiments:  # validate everything before the first epoch of training
        data, pinfo = assemble(exp, cache)
        engine.check_inputs(exp.run, data)
        prepared.append((exp, data, pinfo))
    pretrain_cache = {}
    for exp, data, pinfo in prepared:
        write_manifest(exp, pinfo, data.trace, list(args.argv))
        key = (exp.run.seed, exp.run.learning_rate, exp.run.batch_size, exp.run.pretrain_epochs,
               id(data.partitions), id(data.train_labels))
        if key not in pretrain_cache:
            pretrain_cache[key] = engine.pretrained_nodes(exp.run, data)
        records = execute(exp, data, pretrained=pretrain_cache[key])
        last = records[-1]
        print(f"{exp.name or exp.run.mode}: epoch {last.epoch} mean accuracy {last.mean_accuracy:.4f} "
              f"-> {exp.output}")
    return 0


# -- report ---------------------------------------------------------------------

def _find_runs(paths):
    runs = []
    for p in map(Path, paths):
        if (p / "manifest.json").exists():
            runs.append(p)
        else:
            found = sorted(m.parent for m in p.rglob("manifest.json"))
            if not found:
                raise ConfigError(f"no run outputs (manifest.json) under {p}")
            runs.extend(found)
    return runs


def _read_node_accuracy(path):
    import csv
    with open(path, newline="") as fh:
        return [{"epoch": int(r["epoch"]), "accuracy": float(r["accuracy"])} for r in csv.DictReader(fh)]


def summarize_run(run_dir: Path, window=100, include_undefined=True) -> dict:
    for name in ("metrics.csv", "node_accuracy.csv"):
        if not (run_dir / name).exists():
            raise ConfigError(f"{run_dir}: missing {name}")
    manifest = json.loads((run_dir / "manifest.json").read_text())
    cfg = manifest["config"]["run"]
    micro = metrics.summarize_window(metrics.read_metrics_csv(run_dir / "metrics.csv"), window,
                                     include_undefined=include_undefined)
    acc = metrics.summarize_window(_read_node_accuracy(run_dir / "node_accuracy.csv"), window,
                                   fields=("accuracy",))
    return {"run": str(run_dir), "mode": cfg["mode"], "lam": cfg["lam"], "learning_rate": cfg["learning_rate"],
            "trace": (manifest.get("trace") or {}).get("kind"), "epochs": micro["epochs"],
            "accuracy": acc["accuracy"],
            **{f"micro_{k}": micro[k] for k in metrics.FIELDS}}


def format_report(rows) -> str:
    head = ["run", "mode", "lam", "lr", "accuracy", "micro-acc", "precision", "recall", "f1"]
    lines = [head]
    for r in rows:
        pm = lambda v: f"{100 * v[0]:.3f}±{100 * v[1]:.3f}"
        lam = "-" if r["mode"] == "self_train" else f"{r['lam']:g}"
        lines.append([Path(r["run"]).name, r["mode"], lam, f"{r['learning_rate']:g}",
                      pm(r["accuracy"]), pm(r["micro_accuracy"]), pm(r["micro_precision"]),
                      pm(r["micro_recall"]), pm(r["micro_f1"])])
    width = [max(len(l[i]) for l in lines) for i in range(len(head))]
    return "\n".join("  ".join(c.ljust(w) for c, w in zip(l, width)).rstrip() for l in lines)


def cmd_report(args) -> int:
    rows = [summarize_run(r, args.window, not args.exclude_undefined) for r in _find_runs(args.runs)]
    print(f"window: last {args.window} epochs, values in percent (mean±std)")
    print(format_report(rows))
    if args.out:
        Path(args.out).write_text(json.dumps(rows, indent=2))
    return 0


# -- generate-trace / partition -------------------------------------------------

TRACE_FLAGS = {  # cli flag -> model parameter
    "area": "area_size", "range": "radio_range", "pause": "pause", "speed_min": "speed_min",
    "speed_max": "speed_max", "communities": "n_communities", "memberships": "memberships_per_node",
    "transit_time": "transit_time", "transit_prob": "transit_prob",
}
RWP_ONLY = {"area_size", "radio_range", "pause", "speed_min", "speed_max"}
CSE_ONLY = {"n_communities", "memberships_per_node", "transit_time", "transit_prob"}


def trace_summary(trace) -> str:
    counts = trace.edge_counts()
    hist = Counter(counts.tolist())
    lines = [f"trace {trace.kind}: {trace.n_nodes} nodes, {trace.n_epochs} epochs, "
             f"{int(counts.sum())} contacts",
             f"contacts per epoch: min {counts.min()} mean {counts.mean():.3f} max {counts.max()}; "
             f"epochs without contact: {hist.get(0, 0)}",
             "distribution (contacts: epochs):"]
    lines += [f"  {c:3d}: {hist[c]}" for c in sorted(hist)]
    return "\n".join(lines)


def cmd_generate_trace(args) -> int:
    kind = args.kind.replace("-", "_")
    params = {TRACE_FLAGS[k]: v for k, v in vars(args).items() if k in TRACE_FLAGS and v is not None}
    allowed = RWP_ONLY if kind == "rwp" else CSE_ONLY if kind == "cse" else set()
    stray = set(params) - allowed
    if stray:
        raise ConfigError(f"flags {sorted(k for k, v in TRACE_FLAGS.items() if v in stray)} "
                          f"do not apply to --kind {args.kind}")
    trace = contact.generate(kind, n_nodes=args.nodes, n_epochs=args.epochs, seed=args.seed, **params)
    if args.out:
        contact.save_trace(trace, args.out)
    print(trace_summary(trace))
    return 0


def cmd_partition(args) -> int:
    x, y = load_train_subset(args.mnist_dir, args.subset)
    cfg = dataset.PartitionConfig(n_nodes=args.nodes, dominance=args.dominance, seed=args.seed)
    parts = dataset.partition_noniid(y, cfg)
    if args.out:
        dataset.save_partition(args.out, parts, cfg,
                               source={"mnist_dir": str(args.mnist_dir), "subset": args.subset})
    print(dataset.format_label_table(dataset.label_table(y, parts)))
    return 0


# -- entry point ----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="wafl", description=__doc__.split("\n")[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate-trace", help="write a contact trace JSON file")
    g.add_argument("--kind", required=True,
                   help="static-line, static-tree, static-ringstar, static-dense, rwp or cse")
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--nodes", type=int, default=10)
    g.add_argument("--epochs", type=int, default=5000)
    g.add_argument("--out", type=Path)
    g.add_argument("--area", type=float, help="rwp: side of the square area")
    g.add_argument("--range", type=float, help="rwp: radio range")
    g.add_argument("--pause", type=int, help="rwp: pause in epochs")
    g.add_argument("--speed-min", type=float)
    g.add_argument("--speed-max", type=float)
    g.add_argument("--communities", type=int, help="cse: number of communities")
    g.add_argument("--memberships", type=int, help="cse: home communities per node")
    g.add_argument("--transit-time", type=int)
    g.add_argument("--transit-prob", type=float)
    g.set_defaults(func=cmd_generate_trace)

    q = sub.add_parser("partition", help="split MNIST into label-skewed node shards")
    q.add_argument("--seed", type=int, required=True)
    q.add_argument("--mnist-dir", type=Path, default=Path("data/mnist"))
    q.add_argument("--dominance", type=float, default=0.9)
    q.add_argument("--nodes", type=int, default=10)
    q.add_argument("--subset", type=int, help="use only the first N training samples")
    q.add_argument("--out", type=Path)
    q.set_defaults(func=cmd_partition)

    r = sub.add_parser("run", help="run one experiment or a sweep from a config file")
    r.add_argument("--config", required=True, type=Path)
    r.add_argument("--seed", type=int, help="overrides the config seed")
    r.add_argument("--out", type=Path, help="overrides the config output directory")
    r.add_argument("--workers", type=int, help="threads per epoch; results do not depend on it")
    r.set_defaults(func=cmd_run)

    s = sub.add_parser("report", help="windowed mean±std of finished runs")
    s.add_argument("runs", nargs="+", help="run directories or sweep roots")
    s.add_argument("--window", type=int, default=100, help="last K epochs")
    s.add_argument("--exclude-undefined", action="store_true",
                   help="drop precision/recall/f1 cells whose ratio was undefined")
    s.add_argument("--out", type=Path, help="also write the summary as JSON")
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    args.argv = argv
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, FormatError, InsufficientDataError, FileNotFoundError) as exc:
        print(f"wafl {args.command}: error: {exc}", file=sys.stderr)
        return 1
