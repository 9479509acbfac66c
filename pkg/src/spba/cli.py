"""Command-line entry point: ``spba <subcommand> ...``.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numeric failure.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
from contextlib import nullcontext
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .attack import PoisonConfig, train
from .classifier import CheckpointError, load_checkpoint, save_checkpoint
from .data import SHAPES, DatasetFormatError, generate_shapes, load_dataset, save_dataset
from .defenses import apply_chain
from .geometry import PointCloud, estimate_normals, read_xyz, write_xyz
from .imperceptibility import imperceptibility_scores
from .metrics import chamfer_distance, evaluate_samples, plan_dataset, report_from_samples
from .spectral import TriggerFormatError, load_trigger, plan_poison, save_trigger, trigger_rows_for

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

log = logging.getLogger("spba")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

CHECKPOINT_NAME = "model.ckpt"
TRIGGER_NAME = "trigger.bin"
RUN_NAME = "run.json"
CURVES_NAME = "curves.csv"


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# flag dest -> PoisonConfig field
_CONFIG_FLAGS = {
    "seed": "seed",
    "strategy": "strategy",
    "rho": "rho",
    "target_class": "target_class",
    "m": "m",
    "kg": "k_g",
    "g": "g",
    "lambda1": "lambda1",
    "lambda2": "lambda2",
    "lambda3": "lambda3",
    "epochs": "epochs",
    "batch": "batch_size",
}


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="TOML or JSON file with PoisonConfig keys")
    p.add_argument("--seed", type=int)
    p.add_argument("--strategy", choices=["hpis", "lpis", "random", "fpsp"])
    p.add_argument("--rho", type=float)
    p.add_argument("--target-class", type=int)
    p.add_argument("--m", type=int)
    p.add_argument("--kg", type=int)
    p.add_argument("--g", type=int)
    p.add_argument("--lambda1", type=float)
    p.add_argument("--lambda2", type=float)
    p.add_argument("--lambda3", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch", type=int)


def _read_config_file(path: Path) -> dict:
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read config {path}: {exc}") from exc
    try:
        if path.suffix.lower() == ".json":
            return json.loads(raw)
        return tomllib.loads(raw.decode("utf-8"))
    except (ValueError, UnicodeDecodeError) as exc:
        raise UsageError(f"invalid config file {path}: {exc}") from exc


def resolve_config(args, base: Optional[dict] = None) -> PoisonConfig:
    """Built-in defaults, then ``base`` (e.g. a run record), then the config file, then flags."""
    values = dict(base or {})
    if getattr(args, "config", None) is not None:
        values.update(_read_config_file(args.config))
    for dest, name in _CONFIG_FLAGS.items():
        v = getattr(args, dest, None)
        if v is not None:
            values[name] = v
    try:
        return PoisonConfig.from_mapping(values)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid configuration: {exc}") from exc


def _sha256(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _repro(config: Optional[PoisonConfig], seed, inputs: dict, outputs: Sequence[str]) -> dict:
    return {
        "artifact": "spba",
        "version": __version__,
        "seed": seed,
        "config": None if config is None else config.to_dict(),
        "inputs": {k: {"name": Path(p).name, "sha256": _sha256(p)} for k, p in sorted(inputs.items())},
        "outputs": list(outputs),
    }


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _load_dataset(path: Path):
    try:
        return load_dataset(path)
    except OSError as exc:
        raise DataError(f"cannot read dataset {path}: {exc}") from exc


def _load_cloud(path: Path, index: Optional[int]) -> PointCloud:
    if path.suffix.lower() == ".xyz":
        try:
            return read_xyz(path)
        except (OSError, ValueError) as exc:
            raise DataError(str(exc)) from exc
    ds = _load_dataset(path)
    if index is None:
        raise UsageError("--index is required when the input is a dataset container")
    if not 0 <= index < len(ds):
        raise DataError(f"index {index} out of range for {len(ds)} samples")
    return ds[index]


def _trigger_for(path: Path, config: PoisonConfig) -> np.ndarray:
    try:
        xi = load_trigger(path).coefficients
    except OSError as exc:
        raise DataError(f"cannot read trigger {path}: {exc}") from exc
    rows = trigger_rows_for(config)
    if xi.shape[0] != rows:
        raise DataError(f"trigger {path} has {xi.shape[0]} rows; configuration needs {rows}")
    return xi


def _out_dir(args) -> Path:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


# subcommands

def cmd_gen_data(args) -> int:
    classes = [c.strip() for c in args.classes.split(",") if c.strip()]
    unknown = sorted(set(classes) - set(SHAPES))
    if unknown:
        raise UsageError(f"unknown classes: {', '.join(unknown)}")
    out = _out_dir(args)
    train_seq, test_seq = np.random.SeedSequence(args.seed).spawn(2)
    files = {}
    for tag, per_class, seq in (("train", args.per_class, train_seq), ("test", args.test_per_class, test_seq)):
        try:
            ds = generate_shapes(classes, per_class, args.n_points, args.noise, seq, split_tag=tag)
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
        path = out / f"{tag}.bin"
        save_dataset(path, ds)
        files[tag] = path
    meta = _repro(None, args.seed, files, [p.name for p in files.values()])
    meta["generator"] = {"classes": classes, "per_class": args.per_class, "test_per_class": args.test_per_class,
                         "n_points": args.n_points, "noise": args.noise}
    _write_json(out / "data.json", meta)
    return EXIT_OK


def cmd_score(args) -> int:
    cfg = resolve_config(args)
    cloud = _load_cloud(args.input, args.index)
    if not cloud.has_normals:
        cloud = estimate_normals(cloud, k=10)
    plan = plan_poison(cloud, cfg, cfg.seed)
    isc = imperceptibility_scores(cloud, cfg.k_c)
    # each point reports the highest-PIS selected patch that writes it
    owner = np.full(len(cloud), -1, dtype=np.int64)
    owner_pis = np.full(len(cloud), np.nan)
    for members, mask, pid, pis in zip(plan.members, plan.write_masks, plan.patch_ids, plan.patch_scores):
        owner[members[mask]] = pid
        owner_pis[members[mask]] = pis
    out = Path(args.out)
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "is", "patch_id", "pis"])
        for i in range(len(cloud)):
            pis = "" if owner[i] < 0 else repr(float(owner_pis[i]))
            w.writerow([i, repr(float(isc[i])), int(owner[i]), pis])
    return EXIT_OK


def cmd_inject(args) -> int:
    cfg = resolve_config(args)
    cloud = _load_cloud(args.input, args.index)
    xi = _trigger_for(args.trigger, cfg)
    plan = plan_poison(cloud, cfg, cfg.seed)
    poisoned = cloud.with_points(plan.apply(cloud.points, xi))
    out = Path(args.out)
    write_xyz(out, poisoned)
    sidecar = out.with_name(out.name + ".json")
    _write_json(sidecar, {
        "perturbed_indices": plan.perturbed_indices.tolist(),
        "selected_patches": [{"patch_id": int(i), "pis": float(s)} for i, s in zip(plan.patch_ids, plan.patch_scores)],
        "patch_pis": [float(s) for s in plan.all_patch_scores],
        "chamfer_distance": chamfer_distance(cloud.points, poisoned.points),
        "reproducibility": _repro(cfg, cfg.seed, {"input": args.input, "trigger": args.trigger},
                                  [out.name, sidecar.name]),
    })
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    train_set = _load_dataset(args.train)
    test_set = _load_dataset(args.test)
    if train_set.class_names != test_set.class_names:
        raise DataError("train and test sets have different class lists")
    if not 0 <= cfg.target_class < train_set.num_classes:
        raise UsageError(f"target class {cfg.target_class} outside [0, {train_set.num_classes})")
    out = _out_dir(args)
    run = train(train_set, test_set, cfg, poison=not args.clean)
    save_checkpoint(out / CHECKPOINT_NAME, run.params)
    save_trigger(out / TRIGGER_NAME, run.trigger)
    with open(out / CURVES_NAME, "w", newline="") as fh:
        if run.history:
            w = csv.DictWriter(fh, fieldnames=list(run.history[0]))
            w.writeheader()
            w.writerows({k: repr(v) if isinstance(v, float) else v for k, v in row.items()} for row in run.history)
    record = run.record()
    record["reproducibility"] = _repro(cfg, cfg.seed, {"train": args.train, "test": args.test},
                                       [CHECKPOINT_NAME, TRIGGER_NAME, CURVES_NAME, RUN_NAME])
    _write_json(out / RUN_NAME, record)
    f = run.report
    print(f"BA={f.benign_accuracy:.4f} ASR={f.attack_success_rate:.4f} CDx1000={f.mean_chamfer_x1000:.4f}")
    return EXIT_OK


def _run_base(args) -> dict:
    if getattr(args, "run", None) is None:
        return {}
    try:
        return dict(json.loads(Path(args.run).read_text())["config"])
    except (OSError, ValueError, KeyError) as exc:
        raise DataError(f"cannot read run record {args.run}: {exc}") from exc


def _eval_models(args):
    cfg = resolve_config(args, _run_base(args))
    test_set = _load_dataset(args.test)
    params = load_checkpoint(args.checkpoint)
    xi = _trigger_for(args.trigger, cfg)
    return cfg, test_set, params, xi


def cmd_eval(args) -> int:
    cfg, test_set, params, xi = _eval_models(args)
    res = evaluate_samples(params, xi, cfg, test_set)
    report = report_from_samples(res, cfg.target_class, test_set.num_classes)
    outputs = [Path(args.out).name]
    if args.per_sample is not None:
        _write_samples(Path(args.per_sample), res)
        outputs.append(Path(args.per_sample).name)
    _write_json(Path(args.out), {
        "final": report.to_dict(),
        "reproducibility": _repro(cfg, cfg.seed, {"test": args.test, "checkpoint": args.checkpoint,
                                                  "trigger": args.trigger}, outputs),
    })
    return EXIT_OK


def cmd_defend(args) -> int:
    cfg, test_set, params, xi = _eval_models(args)
    chain = [c.strip() for c in args.chain.split(",") if c.strip()]
    if not chain:
        raise UsageError("empty defense chain")
    plans = plan_dataset(test_set, cfg)
    seeds = np.random.SeedSequence(args.defense_seed).spawn(len(test_set))

    def transform(cloud, i):
        return apply_chain(cloud, chain, np.random.default_rng(seeds[i]))

    try:
        before = report_from_samples(evaluate_samples(params, xi, cfg, test_set, plans),
                                     cfg.target_class, test_set.num_classes)
        after = report_from_samples(evaluate_samples(params, xi, cfg, test_set, plans, transform),
                                    cfg.target_class, test_set.num_classes)
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    _write_json(Path(args.out), {
        "chain": chain,
        "defense_seed": args.defense_seed,
        "before": before.to_dict(),
        "after": after.to_dict(),
        "delta": {
            "benign_accuracy": after.benign_accuracy - before.benign_accuracy,
            "attack_success_rate": after.attack_success_rate - before.attack_success_rate,
        },
        "reproducibility": _repro(cfg, cfg.seed, {"test": args.test, "checkpoint": args.checkpoint,
                                                  "trigger": args.trigger}, [Path(args.out).name]),
    })
    return EXIT_OK


def _write_samples(path: Path, res) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "label", "clean_pred", "poisoned_pred", "cd"])
        for i in range(len(res.labels)):
            w.writerow([i, int(res.labels[i]), int(res.clean_pred[i]), int(res.poisoned_pred[i]), repr(float(res.cd[i]))])


def cmd_report(args) -> int:
    out = _out_dir(args)
    runs = []
    test_set = None if args.test is None else _load_dataset(args.test)
    for path in args.runs:
        try:
            rec = json.loads(Path(path).read_text())
        except (OSError, ValueError) as exc:
            raise DataError(f"cannot read run record {path}: {exc}") from exc
        if "final" not in rec or "config" not in rec:
            raise DataError(f"{path} is not a run record")
        entry = {"run": Path(path).name, "dir": Path(path).parent.name, "seed": rec.get("seed"),
                 "strategy": rec["config"].get("strategy"), "final": rec["final"]}
        if test_set is not None:
            base = Path(path).parent
            cfg = PoisonConfig.from_mapping(rec["config"])
            params = load_checkpoint(base / CHECKPOINT_NAME)
            xi = _trigger_for(base / TRIGGER_NAME, cfg)
            res = evaluate_samples(params, xi, cfg, test_set)
            name = f"{base.name or 'run'}.samples.csv"
            _write_samples(out / name, res)
            entry["samples_csv"] = name
            entry["replayed"] = report_from_samples(res, cfg.target_class, test_set.num_classes).to_dict()
        runs.append(entry)
    _write_json(out / "report.json", {"runs": runs, "version": __version__})
    with open(out / "report.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["run", "dir", "seed", "strategy", "benign_accuracy", "attack_success_rate", "mean_chamfer_x1000"])
        for r in runs:
            f = r["final"]
            w.writerow([r["run"], r["dir"], r["seed"], r["strategy"], repr(f["benign_accuracy"]),
                        repr(f["attack_success_rate"]), repr(f["mean_chamfer_x1000"])])
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="spba", description="Patch-wise spectral backdoor toolkit for point clouds.")
    p.add_argument("--version", action="version", version=f"spba {__version__}")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="generate synthetic train/test shape datasets")
    g.add_argument("--classes", default=",".join(SHAPES))
    g.add_argument("--per-class", type=int, default=100)
    g.add_argument("--test-per-class", type=int, default=25)
    g.add_argument("--n-points", type=int, default=512)
    g.add_argument("--noise", type=float, default=0.005)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out-dir", default=".")
    g.set_defaults(func=cmd_gen_data)

    s = sub.add_parser("score", help="per-point imperceptibility scores as CSV")
    s.add_argument("--input", type=Path, required=True, help=".xyz file or dataset container")
    s.add_argument("--index", type=int)
    s.add_argument("--out", required=True)
    _add_config_flags(s)
    s.set_defaults(func=cmd_score)

    i = sub.add_parser("inject", help="poison one cloud with a saved trigger")
    i.add_argument("--input", type=Path, required=True)
    i.add_argument("--index", type=int)
    i.add_argument("--trigger", type=Path, required=True)
    i.add_argument("--out", required=True, help="output .xyz; a .json sidecar is written next to it")
    _add_config_flags(i)
    i.set_defaults(func=cmd_inject)

    t = sub.add_parser("train", help="run the attack (or a clean baseline)")
    t.add_argument("--train", type=Path, required=True)
    t.add_argument("--test", type=Path, required=True)
    t.add_argument("--out-dir", default="run")
    t.add_argument("--clean", action="store_true", help="train without poisoning")
    _add_config_flags(t)
    t.set_defaults(func=cmd_train)

    for name, func, help_ in (("eval", cmd_eval, "evaluate a checkpoint and trigger"),
                              ("defend", cmd_defend, "evaluate under an inference-time defense chain")):
        e = sub.add_parser(name, help=help_)
        e.add_argument("--checkpoint", type=Path, required=True)
        e.add_argument("--trigger", type=Path, required=True)
        e.add_argument("--test", type=Path, required=True)
        e.add_argument("--run", type=Path, help="run record whose config is used as the base")
        e.add_argument("--out", required=True)
        if name == "eval":
            e.add_argument("--per-sample", help="CSV of per-sample predictions and CD")
        else:
            e.add_argument("--chain", default="sor", help="comma list, e.g. sor or rotation_z,jitter")
            e.add_argument("--defense-seed", type=int, default=0)
        _add_config_flags(e)
        e.set_defaults(func=func)

    r = sub.add_parser("report", help="merge run records; optionally replay per-sample results")
    r.add_argument("runs", nargs="+", type=Path)
    r.add_argument("--test", type=Path, help="test set for per-sample CSVs")
    r.add_argument("--out-dir", default=".")
    r.set_defaults(func=cmd_report)
    return p


def _thread_limit():
    raw = os.environ.get("SPBA_THREADS")
    if not raw:
        return nullcontext()
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"SPBA_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise UsageError("SPBA_THREADS must be >= 1")
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def run(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(message)s")
        with _thread_limit():
            return args.func(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except (DataError, DatasetFormatError, CheckpointError, TriggerFormatError) as exc:
        print(f"spba: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"spba: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        # remaining validation failures come from the inputs themselves
        print(f"spba: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except SystemExit as exc:  # --help / --version
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
