"""Command-line entry point.

Subcommands: ``gen-data``, ``train``, ``eval``, ``count``, ``probe-sim``
and ``sweep``. Every command reads one JSON config with ``model``, ``train``
and ``data`` sections (``count --inline`` may take the JSON on the command
line instead) and writes a run manifest into its output directory.

Exit codes: 0 success, 1 usage error, 2 config violation, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import logging
import os
import sys
import tempfile
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from .boost import write_router_summary
from .errors import ConfigError, UsageError
from .features import (Dataset, GroundTruthSpec, default_schema, generate_dataset, planted_ground_truth,
                       zero_interaction_truth)
from .metrics import evaluate, token_similarity_probe
from .model import ZENITH_PP, ModelConfig, ZenithModel, build_model, cost_report
from .train import TrainConfig, train

log = logging.getLogger(__name__)

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2, 3
SECTIONS = ("model", "train", "data")
SWEEP_COLUMNS = ["name", "variant", "params", "activated_params", "flops", "logloss", "auc", "uauc",
                 "relative_logloss_pct", "status", "error"]


# ---------------------------------------------------------------------------
# configuration


@dataclass
class DataConfig:
    """Where the data comes from.

    If ``train_path`` is set, examples are read from that CSV (relative paths
    resolve against the config file). Otherwise they are generated in memory
    from the ground-truth settings below, exactly as ``gen-data`` would.
    """

    train_path: str | None = None
    test_path: str | None = None
    n_train: int = 100_000
    n_test: int = 20_000
    seed: int = 0
    truth: str = "planted"
    truth_seed: int = 0
    n_pairs: int = 2
    strength: float = 2.0
    latent_dim: int = 1
    bias: float = 0.0
    linear_scale: float = 0.3
    noise: float = 0.0
    bayes_samples: int = 200_000
    probe_size: int = 512

    def violations(self):
        out = []
        if self.truth not in ("planted", "none"):
            out.append(f"data.truth must be 'planted' or 'none', got {self.truth!r}")
        if self.n_train < 1 or self.n_test < 0:
            out.append("data.n_train must be >= 1 and data.n_test >= 0")
        if self.noise < 0:
            out.append("data.noise must be >= 0")
        if self.probe_size < 1:
            out.append("data.probe_size must be >= 1")
        return out

    def ground_truth(self, schema) -> GroundTruthSpec:
        if self.truth == "none":
            spec = zero_interaction_truth(schema, self.latent_dim, self.bias, self.linear_scale,
                                          self.truth_seed)
        else:
            spec = planted_ground_truth(schema, self.n_pairs, self.strength, self.latent_dim, self.bias,
                                        self.linear_scale, seed=self.truth_seed)
        return dataclasses.replace(spec, noise=self.noise)


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    grid: list = field(default_factory=list)
    base_dir: Path = Path(".")

    def to_dict(self):
        d = {"model": self.model.to_dict(), "train": self.train.to_dict(),
             "data": dataclasses.asdict(self.data)}
        if self.grid:
            d["grid"] = self.grid
        return d


def _section(cls, d, name):
    if not isinstance(d, dict):
        raise ConfigError(f"config section {name!r} must be an object", [f"{name} is not an object"])
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(d) - known)
    if unknown:
        raise ConfigError(f"unknown {name} config keys: {unknown}", [f"unknown key {name}.{k}" for k in unknown])
    return cls(**d)


def parse_config(doc, base_dir=Path("."), allow_grid=False):
    """Build a :class:`RunConfig` from a JSON object; unknown keys are errors."""
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object", ["config is not an object"])
    allowed = set(SECTIONS) | ({"grid"} if allow_grid else set())
    unknown = sorted(set(doc) - allowed)
    if unknown:
        raise ConfigError(f"unknown config sections: {unknown}", [f"unknown section {k}" for k in unknown])
    if not isinstance(doc.get("model", {}), dict):
        raise ConfigError("config section 'model' must be an object", ["model is not an object"])
    if not isinstance(doc.get("grid", []), list):
        raise ConfigError("config section 'grid' must be a list", ["grid is not a list"])
    cfg = RunConfig(ModelConfig.from_dict(doc.get("model", {})),
                    _section(TrainConfig, doc.get("train", {}), "train"),
                    _section(DataConfig, doc.get("data", {}), "data"),
                    list(doc.get("grid", [])), Path(base_dir))
    problems = cfg.data.violations()
    if problems:
        raise ConfigError("invalid data config: " + "; ".join(problems), problems)
    for i, entry in enumerate(cfg.grid):
        if not isinstance(entry, dict):
            raise ConfigError(f"grid entry {i} must be an object", [f"grid[{i}] is not an object"])
        _grid_model(cfg.model, entry, i)
    return cfg


def _grid_model(base, entry, i):
    overrides = {k: v for k, v in entry.items() if k != "name"}
    try:
        return ModelConfig.from_dict({**base.to_dict(), **overrides}).validate()
    except ConfigError as e:
        raise ConfigError(f"grid entry {i}: {e}", e.violations) from e


def load_config(path, allow_grid=False):
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})", [str(e)]) from e
    return parse_config(doc, path.parent, allow_grid)


def resolve_seed(flag, config_seed):
    """``--seed`` wins over ``ZENITH_SEED``, which wins over the config value."""
    if flag is not None:
        return int(flag)
    env = os.environ.get("ZENITH_SEED")
    if env not in (None, ""):
        try:
            return int(env)
        except ValueError as e:
            raise ConfigError(f"ZENITH_SEED must be an integer, got {env!r}", ["ZENITH_SEED"]) from e
    return int(config_seed)


def apply_overrides(cfg, seed=None, steps=None, seed_target="model"):
    """Apply ``--seed`` / ``ZENITH_SEED`` and ``--steps`` to a parsed config."""
    if seed_target == "data":
        cfg.data.seed = resolve_seed(seed, cfg.data.seed)
    else:
        s = resolve_seed(seed, cfg.model.seed)
        cfg.model = dataclasses.replace(cfg.model, seed=s)
        cfg.train.seed = s
    if steps is not None:
        if steps < 1:
            raise ConfigError("--steps must be positive", ["steps < 1"])
        cfg.train.total_steps = steps
        cfg.train.warmup_steps = min(cfg.train.warmup_steps, steps)
    cfg.model.validate()
    cfg.train.validate()
    return cfg


# ---------------------------------------------------------------------------
# output directory and manifest


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def atomic_write(path, text):
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class OutputDir:
    """An output directory that refuses paths escaping it."""

    def __init__(self, root):
        self.root = Path(root).resolve()
        self.root.mkdir(parents=True, exist_ok=True)

    def path(self, name):
        p = (self.root / name).resolve()
        if p != self.root and self.root not in p.parents:
            raise UsageError(f"refusing to write {p} outside output directory {self.root}")
        return p


@dataclass
class RunManifest:
    command: str
    config_path: str | None
    config: dict
    seed: int | None
    out_dir: str
    artifacts: dict = field(default_factory=dict)
    status: str = "running"
    name: str = field(default="manifest.json", repr=False)

    def to_json(self):
        d = dataclasses.asdict(self)
        d.pop("name")
        return json.dumps(d, indent=2, sort_keys=True) + "\n"

    def write(self, out):
        atomic_write(out.path(self.name), self.to_json())

    def record(self, out, names):
        """Checksum the given artifacts and mark the run complete."""
        self.artifacts = {n: sha256_file(out.path(n)) for n in sorted(names)}
        self.status = "ok"
        self.write(out)


def start_manifest(command, args, cfg, seed, out):
    m = RunManifest(command, str(args.config) if getattr(args, "config", None) else None,
                    cfg.to_dict() if cfg is not None else {}, seed, str(out.root))
    m.write(out)
    return m


# ---------------------------------------------------------------------------
# data


def _resolve(base, p):
    p = Path(p)
    return p if p.is_absolute() else base / p


def load_data(cfg, schema=None):
    """Return ``(train_set, test_set_or_None)`` as described by ``cfg.data``."""
    d = cfg.data
    if d.train_path:
        tr = Dataset.from_csv(_resolve(cfg.base_dir, d.train_path), schema)
        te = Dataset.from_csv(_resolve(cfg.base_dir, d.test_path), tr.schema) if d.test_path else None
        return tr, te
    schema = schema or default_schema()
    spec = d.ground_truth(schema)
    tr = generate_dataset(schema, spec, d.n_train, d.seed, bayes_samples=0)
    te = generate_dataset(schema, spec, d.n_test, d.seed + 1, bayes_samples=0) if d.n_test else None
    return tr, te


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args):
    cfg = apply_overrides(load_config(args.config), args.seed, None, seed_target="data")
    d = cfg.data
    target = Path(args.out)
    if target.suffix == ".csv":
        out = OutputDir(target.parent)
        train_name, test_name = target.name, f"{target.stem}_test.csv"
        manifest_name = f"{target.stem}.manifest.json"
    else:
        out = OutputDir(target)
        train_name, test_name, manifest_name = "train.csv", "test.csv", "manifest.json"
    manifest = RunManifest("gen-data", str(args.config), cfg.to_dict(), d.seed, str(out.root),
                           name=manifest_name)
    manifest.write(out)
    schema = default_schema()
    spec = d.ground_truth(schema)
    names = [train_name, Path(train_name).with_suffix(".json").name]
    generate_dataset(schema, spec, d.n_train, d.seed, out.path(train_name), d.bayes_samples)
    if d.n_test:
        generate_dataset(schema, spec, d.n_test, d.seed + 1, out.path(test_name), 0)
        names += [test_name, Path(test_name).with_suffix(".json").name]
    manifest.record(out, names)
    print(out.path(train_name))
    return EXIT_OK


def run_training(cfg, out=None, want_eval=True):
    """Train one model described by ``cfg``; write artifacts into ``out`` if given.

    Returns ``(model, eval_report_or_None, artifact_names)``.
    """
    tr, te = load_data(cfg)
    model = build_model(cfg.model, tr.schema)
    names = []
    log_path = ckpt_path = None
    if out is not None:
        log_path, ckpt_path = out.path("train_log.csv"), out.path("model.znth")
        names += ["train_log.csv", "model.znth"]
    result = train(model, tr, cfg.train, log_path=log_path, checkpoint_path=ckpt_path)
    if out is not None and cfg.model.variant == ZENITH_PP:
        _write_router_csv(out.path("router_loads.csv"), result)
        names.append("router_loads.csv")
    report = None
    if want_eval and te is not None:
        probe = te.batch(slice(0, cfg.data.probe_size))
        report = evaluate(model, te, probe)
        if out is not None:
            out.path("eval.json").write_text(report.to_json() + "\n")
            names.append("eval.json")
    return model, report, names


def _write_router_csv(path, result):
    rows = [(step, layer, f, p)
            for step, (loads, probs) in enumerate(zip(result.expert_loads, result.router_probs))
            for layer, (f, p) in enumerate(zip(loads, probs), start=1)]
    write_router_summary(path, rows)


def cmd_train(args):
    cfg = apply_overrides(load_config(args.config), args.seed, args.steps)
    out = OutputDir(args.out)
    manifest = start_manifest("train", args, cfg, cfg.train.seed, out)
    _, report, names = run_training(cfg, out)
    manifest.record(out, names)
    if report is not None:
        print(report.to_json())
    return EXIT_OK


def _checkpoint(args, out):
    p = Path(args.checkpoint) if args.checkpoint else out.path("model.znth")
    if not p.exists():
        raise FileNotFoundError(f"checkpoint {p} not found (pass --checkpoint)")
    return p


def cmd_eval(args):
    cfg = apply_overrides(load_config(args.config), args.seed, None)
    out = OutputDir(args.out)
    manifest = start_manifest("eval", args, cfg, cfg.train.seed, out)
    model = ZenithModel.load(_checkpoint(args, out))
    _, te = load_data(cfg, model.schema)
    if te is None:
        raise ConfigError("eval needs test data (data.test_path or data.n_test > 0)", ["no test data"])
    report = evaluate(model, te, te.batch(slice(0, cfg.data.probe_size)))
    out.path("eval.json").write_text(report.to_json() + "\n")
    manifest.record(out, ["eval.json"])
    print(report.to_json())
    return EXIT_OK


def cmd_probe_sim(args):
    cfg = apply_overrides(load_config(args.config), args.seed, None)
    out = OutputDir(args.out)
    manifest = start_manifest("probe-sim", args, cfg, cfg.train.seed, out)
    model = ZenithModel.load(_checkpoint(args, out))
    tr, te = load_data(cfg, model.schema)
    data = te if te is not None else tr
    batch = data.batch(slice(0, cfg.data.probe_size))
    layers = [args.layer] if args.layer else range(1, len(model.layers) + 1)
    names, summary = [], {}
    for layer in layers:
        sim = token_similarity_probe(model, batch, layer)
        name = f"similarity_layer{layer}.csv"
        sim.to_csv(out.path(name))
        names.append(name)
        summary[str(layer)] = {"mean_off_diagonal": sim.mean_off_diagonal, "zero_norm": sim.zero_norm}
    manifest.record(out, names)
    print(json.dumps(summary, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_count(args):
    if args.inline is not None:
        try:
            doc = json.loads(args.inline)
        except json.JSONDecodeError as e:
            raise ConfigError(f"--inline: invalid JSON ({e})", [str(e)]) from e
        cfg, config_path = parse_config(doc), None
    elif args.config is not None:
        cfg, config_path = load_config(args.config), str(args.config)
    else:
        raise UsageError("count needs --config <path> or --inline '<json>'")
    cfg.model.validate()
    text = cost_report(cfg.model).to_json()
    manifest = RunManifest("count", config_path, cfg.to_dict(), cfg.model.seed, "")
    if args.out:
        out = OutputDir(args.out)
        manifest.out_dir = str(out.root)
        manifest.write(out)
        out.path("cost_report.json").write_text(text + "\n")
        manifest.record(out, ["cost_report.json"])
    else:
        manifest.status = "ok"
        sys.stderr.write(manifest.to_json())
    print(text)
    return EXIT_OK


def _sweep_one(task):
    """Train and score one grid entry; failures become a row, never an exception."""
    name, cfg_dict, base_dir = task
    row = {"name": name, "variant": cfg_dict["model"].get("variant", ""), "status": "ok", "error": ""}
    try:
        cfg = parse_config(cfg_dict, Path(base_dir))
        rep = cost_report(cfg.model)
        row.update(variant=cfg.model.variant, params=rep.total_params, activated_params=rep.activated_params,
                   flops=rep.matmul_flops)
        _, report, _ = run_training(cfg)
        if report is None:
            raise ConfigError("sweep needs test data", ["no test data"])
        row.update(logloss=report.logloss, auc=report.auc, uauc=report.uauc)
    except Exception as e:  # recorded per row; the sweep continues
        row.update(status="failed", error=f"{type(e).__name__}: {e}")
    return row


def sweep_rows(cfg, parallel=1):
    """Run every grid entry and return rows sorted by parameter count.

    ``relative_logloss_pct`` compares each row with the first grid entry.
    """
    grid = cfg.grid or [{}]
    tasks = []
    for i, entry in enumerate(grid):
        doc = cfg.to_dict()
        doc.pop("grid", None)
        doc["model"] = {**doc["model"], **{k: v for k, v in entry.items() if k != "name"}}
        tasks.append((entry.get("name", f"run{i}"), doc, str(cfg.base_dir)))
    if parallel > 1:
        with ProcessPoolExecutor(max_workers=parallel) as ex:
            rows = list(ex.map(_sweep_one, tasks))
    else:
        rows = [_sweep_one(t) for t in tasks]
    base = rows[0].get("logloss")
    for row in rows:
        ll = row.get("logloss")
        row["relative_logloss_pct"] = (100.0 * (ll - base) / base) if ll is not None and base else None
    order = sorted(range(len(rows)), key=lambda i: (rows[i].get("params") is None, rows[i].get("params") or 0, i))
    return [rows[i] for i in order]


def write_sweep_csv(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SWEEP_COLUMNS)
        for row in rows:
            w.writerow(["" if row.get(c) is None else (repr(row[c]) if isinstance(row.get(c), float) else row[c])
                        for c in SWEEP_COLUMNS])


def cmd_sweep(args):
    cfg = apply_overrides(load_config(args.config, allow_grid=True), args.seed, args.steps)
    if args.parallel < 1:
        raise UsageError("--parallel must be >= 1")
    out = OutputDir(args.out)
    manifest = start_manifest("sweep", args, cfg, cfg.train.seed, out)
    rows = sweep_rows(cfg, args.parallel)
    write_sweep_csv(out.path("sweep.csv"), rows)
    manifest.record(out, ["sweep.csv"])
    failed = sum(r["status"] != "ok" for r in rows)
    print(f"{len(rows)} runs, {failed} failed -> {out.path('sweep.csv')}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# dispatch


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser():
    p = _Parser(prog="zenith", description="Zenith ranking models: data, training, evaluation and sizing.")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    def common(sp, config_required=True, out_required=True):
        sp.add_argument("--config", required=config_required, help="JSON config with model/train/data sections")
        sp.add_argument("--out", required=out_required, help="output directory")
        sp.add_argument("--seed", type=int, default=None, help="override the config seed (beats ZENITH_SEED)")

    sp = sub.add_parser("gen-data", help="generate a synthetic dataset (CSV + JSON sidecar)")
    common(sp)
    sp.set_defaults(fn=cmd_gen_data)

    sp = sub.add_parser("train", help="train a model; writes checkpoint, log and eval report")
    common(sp)
    sp.add_argument("--steps", type=int, default=None, help="override train.total_steps")
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("eval", help="evaluate a checkpoint on the test data")
    common(sp)
    sp.add_argument("--checkpoint", default=None, help="checkpoint path (default: <out>/model.znth)")
    sp.set_defaults(fn=cmd_eval)

    sp = sub.add_parser("count", help="print parameter and FLOP counts as JSON")
    common(sp, config_required=False, out_required=False)
    sp.add_argument("--inline", default=None, help="config JSON given on the command line")
    sp.set_defaults(fn=cmd_count)

    sp = sub.add_parser("probe-sim", help="token similarity matrices of a checkpoint")
    common(sp)
    sp.add_argument("--checkpoint", default=None, help="checkpoint path (default: <out>/model.znth)")
    sp.add_argument("--layer", type=int, default=None, help="1-based layer (default: all)")
    sp.set_defaults(fn=cmd_probe_sim)

    sp = sub.add_parser("sweep", help="train a grid of configs and tabulate size, compute and quality")
    common(sp)
    sp.add_argument("--steps", type=int, default=None, help="override train.total_steps")
    sp.add_argument("--parallel", type=int, default=1, help="concurrent runs (default 1, sequential)")
    sp.set_defaults(fn=cmd_sweep)
    return p


def dispatch(argv=None):
    """Run one command and return its exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("missing command")
        return args.fn(args)
    except UsageError as e:
        sys.stderr.write(f"zenith: {e}\n\n{parser.format_usage()}")
        return EXIT_USAGE
    except ConfigError as e:
        sys.stderr.write(f"zenith: config error: {e}\n")
        return EXIT_CONFIG
    except Exception as e:
        log.debug("runtime failure", exc_info=True)
        sys.stderr.write(f"zenith: {type(e).__name__}: {e}\n")
        if os.environ.get("ZENITH_DEBUG"):
            traceback.print_exc()
        return EXIT_RUNTIME


def main():
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
