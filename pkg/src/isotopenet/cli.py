"""Command-line entry point.

Usage::

    isotopenet <command> [--config run.yaml] [--seed N] [--threads N] [--out DIR]

Commands are ``synth``, ``train``, ``cv``, ``baseline``, ``sensitivity`` and
``eval``.  Settings come from built-in defaults, then the YAML config file,
then command-line flags; later sources win.  The whole configuration is
validated before anything is written.

Exit codes: 0 success, 2 invalid config, 3 numerical failure, 4 I/O error.
"""
from __future__ import annotations

import argparse
import copy
import hashlib
import json
import logging
import sys
from collections import Counter
from dataclasses import dataclass, field, fields
from importlib import metadata
from pathlib import Path

import numpy as np
import yaml
from threadpoolctl import threadpool_limits

from . import baseline as B
from . import evaluation as E
from . import model as M
from . import sensitivity as S
from . import synth as Y
from .data import Dataset, DatasetError, FoldError, load_dataset, make_fold_plan, save_dataset
from .metrics import balanced_accuracy
from .training import PRESETS, TrainConfig, train

logger = logging.getLogger("isotopenet")

COMMANDS = ("synth", "train", "cv", "baseline", "sensitivity", "eval")
EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4

SYNTH_PRESETS = {"adsq": Y.adsq_preset, "lp": Y.lp_preset}
METHODS = ("isotopenet", "residualnet", "roc_lda")

DEFAULTS = {
    "seed": None,
    "threads": 1,
    "out": "runs/latest",
    "data": {
        "path": None,
        "roi_only": False,
        "synth": {"preset": "adsq", "d": 150, "seed": None, "n_tmas": 8, "cores_per_tma": 10,
                  "spots_per_core": 50, "overrides": {}},
    },
    "model": {"arch": "isotopenet", "schedule": None},
    "train": {"preset": None, "fold": None},
    "eval": {"method": "isotopenet", "n_folds": 4, "fold_seed": None, "n_runs": 4, "fold": None,
             "checkpoint": None},
    "baseline": {"k_grid": list(B.K_GRID), "shrinkage": 0.1},
    "sensitivity": {"class_index": 0, "checkpoint": None, "fold": None, "output": "sensitivity.tsv",
                    "n_peaks": 20},
}
TRAIN_FIELDS = {f.name for f in fields(TrainConfig)}


class ConfigError(ValueError):
    pass


def _merge(base: dict, update: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in update.items():
        allowed = key in out or (where == "train" and key in TRAIN_FIELDS) or where.endswith("overrides")
        if not allowed:
            raise ConfigError(f"unknown config key {where + '.' if where else ''}{key}")
        if isinstance(out.get(key), dict) and not where.endswith("overrides"):
            if not isinstance(value, dict):
                raise ConfigError(f"config section {where + '.' if where else ''}{key} must be a mapping")
            out[key] = _merge(out[key], value, f"{where}.{key}" if where else key)
        else:
            out[key] = value
    return out


@dataclass
class RunConfig:
    """Fully merged settings of one invocation."""

    raw: dict
    base_dir: Path = field(default_factory=Path.cwd)

    @classmethod
    def build(cls, file_values: dict | None = None, overrides: dict | None = None, base_dir=None) -> "RunConfig":
        merged = _merge(DEFAULTS, file_values or {})
        merged = _merge(merged, overrides or {})
        return cls(merged, Path(base_dir) if base_dir else Path.cwd())

    def __getitem__(self, key):
        return self.raw[key]

    def path(self, value) -> Path | None:
        if value is None:
            return None
        p = Path(value)
        return p if p.is_absolute() else self.base_dir / p

    def digest(self) -> str:
        """Hash of every setting that can change results (the output location cannot)."""
        settings = {k: v for k, v in self.raw.items() if k != "out"}
        return hashlib.sha256(json.dumps(settings, sort_keys=True).encode()).hexdigest()


# --- validation ------------------------------------------------------------


def _int(value, name, lo=None):
    if isinstance(value, bool) or not isinstance(value, (int, np.integer)):
        raise ConfigError(f"{name} must be an integer, got {value!r}")
    if lo is not None and value < lo:
        raise ConfigError(f"{name} must be at least {lo}")
    return int(value)


def _existing(cfg: RunConfig, value, name) -> Path:
    p = cfg.path(value)
    if p is None:
        raise ConfigError(f"{name} is required")
    if not p.exists():
        raise ConfigError(f"{name} {p} does not exist")
    return p


def resolve_synth(cfg: RunConfig) -> tuple[Y.SynthSpec, tuple[int, int, int]]:
    sec = cfg["data"]["synth"]
    if sec["preset"] not in SYNTH_PRESETS:
        raise ConfigError(f"unknown synth preset {sec['preset']!r}; choose from {sorted(SYNTH_PRESETS)}")
    seed = cfg["seed"] if sec["seed"] is None else _int(sec["seed"], "data.synth.seed")
    try:
        spec = SYNTH_PRESETS[sec["preset"]](_int(sec["d"], "data.synth.d", 16), seed, **sec["overrides"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid synthetic cohort: {exc}") from exc
    size = tuple(_int(sec[k], f"data.synth.{k}", 1) for k in ("n_tmas", "cores_per_tma", "spots_per_core"))
    return spec, size


def resolve_train(cfg: RunConfig) -> TrainConfig:
    sec = dict(cfg["train"])
    preset = sec.pop("preset")
    sec.pop("fold")
    if preset is not None and preset not in PRESETS:
        raise ConfigError(f"unknown training preset {preset!r}; choose from {sorted(PRESETS)}")
    base = PRESETS[preset].to_dict() if preset else TrainConfig().to_dict()
    base["seed"] = cfg["seed"]
    try:
        return TrainConfig(**{**base, **sec}).validate()
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid training config: {exc}") from exc


def resolve_model(cfg: RunConfig):
    arch = cfg["model"]["arch"]
    if arch not in ("isotopenet", "residualnet"):
        raise ConfigError(f"unknown model architecture {arch!r}")
    schedule = cfg["model"]["schedule"]
    if schedule is not None:
        if arch != "residualnet":
            raise ConfigError("model.schedule only applies to residualnet")
        try:
            schedule = tuple((int(c), int(s)) for c, s in schedule)
        except (TypeError, ValueError) as exc:
            raise ConfigError("model.schedule must be a list of [channels, stride] pairs") from exc
    return arch, schedule


def validate(command: str, cfg: RunConfig) -> dict:
    """Check every setting ``command`` uses; returns the resolved objects."""
    if command not in COMMANDS:
        raise ConfigError(f"unknown command {command!r}")
    if cfg["seed"] is None:
        raise ConfigError("a master seed is required (config 'seed' or --seed)")
    _int(cfg["seed"], "seed", 0)
    _int(cfg["threads"], "threads", 1)
    if not cfg["out"]:
        raise ConfigError("an output directory is required")
    out: dict = {"out": cfg.path(cfg["out"])}
    if command == "synth":
        out["synth"], out["size"] = resolve_synth(cfg)
        return out
    if cfg["data"]["path"] is not None:
        out["data_path"] = _existing(cfg, cfg["data"]["path"], "data.path")
    else:
        out["synth"], out["size"] = resolve_synth(cfg)
    ev = cfg["eval"]
    out["n_folds"] = _int(ev["n_folds"], "eval.n_folds", 2)
    out["fold_seed"] = cfg["seed"] if ev["fold_seed"] is None else _int(ev["fold_seed"], "eval.fold_seed", 0)
    if command in ("train", "cv"):
        out["train"] = resolve_train(cfg)
        out["arch"], out["schedule"] = resolve_model(cfg)
    if command == "train":
        out["fold"] = _optional_fold(cfg["train"]["fold"], "train.fold", out["n_folds"])
    if command == "cv":
        if ev["method"] not in METHODS:
            raise ConfigError(f"unknown method {ev['method']!r}; choose from {list(METHODS)}")
        out["n_runs"] = _int(ev["n_runs"], "eval.n_runs", 1)
    if command in ("baseline", "cv"):
        k_grid = cfg["baseline"]["k_grid"]
        if not k_grid:
            raise ConfigError("baseline.k_grid must not be empty")
        k_grid = tuple(_int(k, "baseline.k_grid entry", 1) for k in k_grid)
        d = out["synth"].d if "synth" in out else _axis_length(out["data_path"])
        if list(k_grid) == list(B.K_GRID):
            # the default grid is trimmed to short axes; an explicit grid must fit
            k_grid = tuple(k for k in k_grid if k <= d) or (d,)
        elif max(k_grid) > d:
            raise ConfigError(f"baseline.k_grid entry {max(k_grid)} exceeds the {d} bins of the data")
        out["k_grid"] = k_grid
        shrink = cfg["baseline"]["shrinkage"]
        if not isinstance(shrink, (int, float)) or not 0 <= shrink <= 1:
            raise ConfigError("baseline.shrinkage must lie in [0, 1]")
        out["shrinkage"] = float(shrink)
    if command == "eval":
        out["checkpoint"] = _existing(cfg, ev["checkpoint"], "eval.checkpoint")
        out["fold"] = _optional_fold(ev["fold"], "eval.fold", out["n_folds"])
    if command == "sensitivity":
        sec = cfg["sensitivity"]
        out["checkpoint"] = _existing(cfg, sec["checkpoint"], "sensitivity.checkpoint")
        out["fold"] = _optional_fold(sec["fold"], "sensitivity.fold", out["n_folds"])
        out["class_index"] = _int(sec["class_index"], "sensitivity.class_index", 0)
        out["n_peaks"] = _int(sec["n_peaks"], "sensitivity.n_peaks", 1)
        if not sec["output"]:
            raise ConfigError("sensitivity.output is required")
        try:
            spec, _, _ = M.load_state(out["checkpoint"])
        except (OSError, M.CheckpointError) as exc:
            raise ConfigError(f"unreadable checkpoint: {exc}") from exc
        if out["class_index"] >= spec.n_classes:
            raise ConfigError(f"sensitivity.class_index {out['class_index']} but the model has {spec.n_classes} classes")
    return out


def _axis_length(data_path: Path) -> int:
    axis = data_path / "mz_axis.f64"
    if not axis.exists():
        raise ConfigError(f"data.path {data_path} has no mz_axis.f64")
    return axis.stat().st_size // 8


def _optional_fold(value, name, n_folds):
    if value is None:
        return None
    fold = _int(value, name, 0)
    if fold >= n_folds:
        raise ConfigError(f"{name}={fold} but there are only {n_folds} folds")
    return fold


# --- commands --------------------------------------------------------------


def _version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        from . import __version__
        return __version__


def _write_manifest(out: Path, command: str, cfg: RunConfig, seeds: dict, outputs: list, extra=None):
    record = {
        "command": command,
        "config_digest": cfg.digest(),
        "config": cfg.raw,
        "version": _version(),
        "seeds": seeds,
        "outputs": sorted(str(p.relative_to(out)) for p in outputs),
    }
    if extra:
        record.update(extra)
    path = out / "manifest.json"
    path.write_text(json.dumps(record, indent=2, sort_keys=True, default=str) + "\n")
    return path


def _dataset(cfg: RunConfig, resolved: dict) -> Dataset:
    if "data_path" in resolved:
        data = load_dataset(resolved["data_path"])
    else:
        data, _ = Y.synth_cohort(resolved["synth"], *resolved["size"])
    if cfg["data"]["roi_only"]:
        data = data.roi_only()
    return data.normalize()


def _plan(data: Dataset, resolved: dict):
    try:
        return make_fold_plan(data.meta, resolved["n_folds"], resolved["fold_seed"])
    except FoldError as exc:
        raise ConfigError(str(exc)) from exc


def cmd_synth(cfg, r):
    out = r["out"]
    data, truth = Y.synth_cohort(r["synth"], *r["size"])
    ds_dir = save_dataset(data, out / "dataset")
    truth_path = out / "ground_truth.json"
    truth_path.write_text(json.dumps(truth.to_dict(), indent=2, sort_keys=True) + "\n")
    spec_path = out / "synth_spec.yaml"
    r["synth"].save(spec_path)
    outputs = sorted(ds_dir.iterdir()) + [truth_path, spec_path]
    return outputs, {"synth": r["synth"].seed}, {}


def cmd_train(cfg, r):
    out = r["out"]
    data = _dataset(cfg, r)
    extra = {}
    outputs = []
    if r["fold"] is not None:
        plan = _plan(data, r)
        train_idx, _ = plan.split(data.meta, r["fold"])
        data = data.subset(train_idx)
        plan_path = out / "fold_plan.json"
        plan_path.write_text(json.dumps(plan.to_dict(), indent=2) + "\n")
        outputs.append(plan_path)
        extra["fold"] = r["fold"]
    method = E.NetworkMethod(r["arch"], r["train"], r["schedule"])
    spec, state = method.build(data.d, data.meta.n_classes, r["train"].seed)
    logger.info("training %s with %d parameters on %d spectra", spec.name, state.total_params, len(data))
    result = train(spec, state, data.spectra, data.labels, r["train"])
    ckpt = M.save_state(out / "checkpoint.isnet", spec, result.state, result.optimizer)
    log_path = out / "trainlog.tsv"
    log_path.write_text(result.log.to_table())
    extra["train_ids_digest"] = _ids_digest(data.ids)
    extra["total_params"] = state.total_params
    return outputs + [ckpt, log_path], {"train": r["train"].seed, "fold_plan": r["fold_seed"]}, extra


def _ids_digest(ids) -> str:
    audit = E.LeakageAudit()
    audit.record("ids", ids)
    return audit.digest()


def _write_text(path: Path, text: str) -> Path:
    path.write_text(text)
    return path


def cmd_cv(cfg, r):
    out = r["out"]
    data = _dataset(cfg, r)
    plan = _plan(data, r)
    outputs = [_write_text(out / "fold_plan.json", json.dumps(plan.to_dict(), indent=2) + "\n")]
    method = cfg["eval"]["method"]
    if method == "roc_lda":
        report = B.roc_lda_pipeline(data, plan, r["k_grid"], r["shrinkage"])
        outputs += [_write_text(out / "cv_table.tsv", report.to_table()),
                    _write_text(out / "cv_summary.txt", report.summary())]
        return outputs, {"fold_plan": r["fold_seed"]}, {}
    net = E.NetworkMethod(method, r["train"], r["schedule"] if method == "residualnet" else None)
    report = E.cross_validate(net, data, plan, r["n_runs"], master_seed=cfg["seed"])
    votes = ["run\tfold\tcore\t" + "\t".join(f"votes_{c}" for c in data.meta.class_names)]
    for run_i, run in enumerate(report.folds):
        for res in run:
            for core, tally in zip(res.core_ids, res.core_tallies):
                counts = list(tally) + [0] * (data.meta.n_classes - len(tally))
                votes.append(f"{run_i}\t{res.fold}\t{core}\t" + "\t".join(str(int(v)) for v in counts))
    runs = {"run_spot": report.run_spot, "run_core": report.run_core, "median_spot": report.median_spot,
            "median_core": report.median_core, "iqr_spot": report.iqr_spot, "iqr_core": report.iqr_core,
            "best": list(report.best())}
    outputs += [
        _write_text(out / "cv_table.tsv", report.to_table()),
        _write_text(out / "cv_summary.txt", report.summary()),
        _write_text(out / "core_votes.tsv", "\n".join(votes) + "\n"),
        _write_text(out / "cv_runs.json", json.dumps(runs, indent=2) + "\n"),
    ]
    seeds = {"master": cfg["seed"], "fold_plan": r["fold_seed"],
             "runs": [E.derive_seed(cfg["seed"], i) for i in range(r["n_runs"])]}
    return outputs, seeds, {}


def cmd_baseline(cfg, r):
    out = r["out"]
    data = _dataset(cfg, r)
    plan = _plan(data, r)
    report = B.roc_lda_pipeline(data, plan, r["k_grid"], r["shrinkage"])
    outputs = [
        _write_text(out / "fold_plan.json", json.dumps(plan.to_dict(), indent=2) + "\n"),
        _write_text(out / "baseline_table.tsv", report.to_table()),
        _write_text(out / "baseline_summary.txt", report.summary()),
    ]
    return outputs, {"fold_plan": r["fold_seed"]}, {}


def _load_checkpoint(path, data: Dataset):
    spec, state, _ = M.load_state(path)
    if spec.input_dim != data.d:
        raise ConfigError(f"checkpoint expects {spec.input_dim} bins, dataset has {data.d}")
    return spec, state


def cmd_eval(cfg, r):
    out = r["out"]
    data = _dataset(cfg, r)
    spec, state = _load_checkpoint(r["checkpoint"], data)
    test, extra = data, {}
    if r["fold"] is not None:
        plan = _plan(data, r)
        _, test_idx = plan.split(data.meta, r["fold"])
        test = data.subset(test_idx)
        extra["fold"] = r["fold"]
    fitted = E.FittedNetwork(spec, state)
    stats: Counter = Counter()
    pred = fitted.predict(test.spectra, stats)
    spot, core, _, _ = E.evaluate_predictions(test, pred, stats)
    result = {
        "spot_balanced_accuracy": balanced_accuracy(spot),
        "core_balanced_accuracy": balanced_accuracy(core),
        "spot_counts": vars(spot), "core_counts": vars(core),
        "n_spectra": len(test), "ties": dict(stats),
    }
    path = _write_text(out / "eval.json", json.dumps(result, indent=2) + "\n")
    return [path], {"fold_plan": r["fold_seed"]}, extra


def cmd_sensitivity(cfg, r):
    out = r["out"]
    data = _dataset(cfg, r)
    spec, state = _load_checkpoint(r["checkpoint"], data)
    train_set, audit, extra = data, E.LeakageAudit(), {}
    if r["fold"] is not None:
        plan = _plan(data, r)
        train_idx, test_idx = plan.split(data.meta, r["fold"])
        train_set = data.subset(train_idx)
        extra["fold"] = r["fold"]
    audit.record("sigma", train_set.ids)
    if r["fold"] is not None:
        audit.check(data.ids[test_idx])
    sigma = S.compute_sigma(train_set.spectra)
    smap = S.mean_sensitivity(spec, state, train_set.spectra, r["class_index"], sigma)
    target = out / cfg["sensitivity"]["output"]
    map_path, peaks = S.export_map(smap, data.mz_axis, target, r["n_peaks"])
    extra["sigma_ids_digest"] = audit.digest("sigma")
    extra["class_index"] = r["class_index"]
    return [map_path, peaks], {"fold_plan": r["fold_seed"]}, extra


RUNNERS = {"synth": cmd_synth, "train": cmd_train, "cv": cmd_cv, "baseline": cmd_baseline,
           "sensitivity": cmd_sensitivity, "eval": cmd_eval}


# --- entry point -----------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="isotopenet", description="Mass-spectrum classification toolkit")
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--config", type=Path, help="YAML config file")
    shared.add_argument("--seed", type=int, help="master seed (overrides the config)")
    shared.add_argument("--threads", type=int, help="BLAS thread cap; 1 gives bit-reproducible runs")
    shared.add_argument("--out", help="output directory")
    shared.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("synth", parents=[shared], help="write a synthetic cohort")
    p.add_argument("--preset", choices=sorted(SYNTH_PRESETS))
    for name in ("train", "cv", "baseline", "sensitivity", "eval"):
        p = sub.add_parser(name, parents=[shared])
        p.add_argument("--data", help="dataset directory")
        if name in ("eval", "sensitivity"):
            p.add_argument("--checkpoint", help="model checkpoint file")
            p.add_argument("--fold", type=int, help="fold index")
        if name == "cv":
            p.add_argument("--method", choices=METHODS)
        if name == "train":
            p.add_argument("--epochs", type=int)
    return parser


def _flag_overrides(args) -> dict:
    over: dict = {}
    for key in ("seed", "threads"):
        if getattr(args, key, None) is not None:
            over[key] = getattr(args, key)
    # paths given on the command line are relative to the working directory
    if args.out:
        over["out"] = str(Path(args.out).resolve())
    if getattr(args, "preset", None):
        over.setdefault("data", {}).setdefault("synth", {})["preset"] = args.preset
    if getattr(args, "data", None):
        over.setdefault("data", {})["path"] = str(Path(args.data).resolve())
    section = {"eval": "eval", "sensitivity": "sensitivity"}.get(args.command)
    if section:
        if args.checkpoint:
            over.setdefault(section, {})["checkpoint"] = str(Path(args.checkpoint).resolve())
        if args.fold is not None:
            over.setdefault(section, {})["fold"] = args.fold
    if getattr(args, "method", None):
        over.setdefault("eval", {})["method"] = args.method
    if getattr(args, "epochs", None) is not None:
        over.setdefault("train", {})["epochs"] = args.epochs
    return over


def load_config(path: Path | None) -> dict:
    if path is None:
        return {}
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    try:
        raw = yaml.safe_load(path.read_text()) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"config file {path} is not valid YAML: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config file must contain a mapping")
    return raw


def run(command: str, cfg: RunConfig) -> Path:
    resolved = validate(command, cfg)
    out = resolved["out"]
    out.mkdir(parents=True, exist_ok=True)
    with threadpool_limits(limits=cfg["threads"]):
        outputs, seeds, extra = RUNNERS[command](cfg, resolved)
    return _write_manifest(out, command, cfg, seeds, outputs, extra)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        base = args.config.parent if args.config else None
        cfg = RunConfig.build(load_config(args.config), _flag_overrides(args), base_dir=base)
        manifest = run(args.command, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except M.NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, DatasetError, M.CheckpointError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    print(manifest)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
