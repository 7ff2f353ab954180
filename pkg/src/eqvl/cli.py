"""``eqvl`` command line: generate -> train -> analyze, plus inspect."""
from __future__ import annotations

import argparse
import datetime as _dt
import json
import logging
import sys
from pathlib import Path

import numpy as np
from filelock import FileLock, Timeout
from pydantic import ValidationError

from .config import RunConfig, load_config
from .datagen import SPLITS, derive_seed, generate_raw, normalize_dataset, read_dataset, write_dataset
from .errors import EqvlError, InsufficientDataError
from .fields import divergence_array, high_freq_energy_ratio, mse_equil, mse_sigma
from .losses import METHODS, rms_divergence_np
from .nn import Generator, read_checkpoint
from .trainer import load_session_json, predict, run_study, session_seeds
from .variability import build_report, write_report

log = logging.getLogger("eqvl")


class CommandFailed(Exception):
    def __init__(self, errors):
        super().__init__("; ".join(errors))
        self.errors = list(errors)


# ---------------------------------------------------------------- helpers


def _resolve(args) -> tuple[RunConfig, Path]:
    cfg = load_config(getattr(args, "config", None))
    if getattr(args, "out", None):
        cfg.output_root = str(args.out)
    if getattr(args, "sessions", None) is not None:
        cfg.n_sessions = args.sessions
    if getattr(args, "workers", None) is not None:
        cfg.workers = args.workers
    method = getattr(args, "method", None)
    if method and method != "all":
        cfg.methods = [method]
    return cfg, Path(cfg.output_root)


def _echo(cfg: RunConfig, out: Path, command: str) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / f"config.{command}.json").write_text(cfg.echo() + "\n")


def _lock(out: Path) -> FileLock:
    out.mkdir(parents=True, exist_ok=True)
    return FileLock(str(out / ".eqvl.lock"), timeout=0)


def data_paths(out: Path) -> dict[str, Path]:
    return {s: out / "data" / f"{s}.eqvd" for s in SPLITS}


# ---------------------------------------------------------------- commands


def cmd_generate(cfg: RunConfig, out: Path, force: bool = False) -> dict:
    paths = data_paths(out)
    manifest_path = out / "data" / "dataset.json"
    existing = [str(p) for p in [*paths.values(), manifest_path] if p.exists()]
    if existing and not force:
        raise CommandFailed([f"refusing to overwrite existing dataset files (use --force): {existing}"])
    _echo(cfg, out, "generate")
    dg = cfg.datagen
    spec, params = dg.elastic_spec(), dg.generation_params()
    counts = {"train": dg.n_train, "validation": dg.n_validation, "test": dg.n_test}
    raws, seeds = {}, {}
    for k, split in enumerate(SPLITS):
        seeds[split] = derive_seed(dg.seed, k)
        log.info("generating %d %s pairs", counts[split], split)
        raws[split] = generate_raw(seeds[split], counts[split], spec, params)
    # one scale for all splits keeps train and test targets in the same units
    scale = max(float(np.max(np.abs(r.stress.data))) for rs in raws.values() for r in rs)
    manifest = {
        "format": "EQVD v1",
        "seed": dg.seed,
        "norm_scale": scale,
        "tolerance": dg.tolerance,
        "max_iters": dg.max_iters,
        "elastic_spec": {"young_modulus_soft": spec.young_modulus_soft, "contrast": spec.contrast,
                         "poisson_ratio": spec.poisson_ratio, "applied_strain": list(spec.applied_strain)},
        "splits": {},
    }
    (out / "data").mkdir(parents=True, exist_ok=True)
    for split in SPLITS:
        rs = raws[split]
        ds = normalize_dataset([(r.micro, r.stress) for r in rs], split, seeds[split], spec, scale)
        write_dataset(ds, paths[split])
        residuals = [r.info.residual for r in rs]
        iterations = [r.info.iterations for r in rs]
        manifest["splits"][split] = {
            "file": paths[split].name,
            "count": len(rs),
            "generation_seed": seeds[split],
            "pair_seeds": [r.seed for r in rs],
            "residuals": residuals,
            "residual_max": max(residuals),
            "iterations": iterations,
            "iterations_max": max(iterations),
            "rms_divergence_normalized": [float(v) for v in rms_divergence_np(ds.targets())],
        }
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest


def load_data(out: Path):
    paths = data_paths(out)
    missing = [str(p) for p in paths.values() if not p.exists()]
    if missing:
        raise CommandFailed([f"dataset missing: {m} (run `eqvl generate` first)" for m in missing])
    return tuple(read_dataset(paths[s]) for s in SPLITS)


def cmd_train(cfg: RunConfig, out: Path) -> dict:
    data = load_data(out)
    _echo(cfg, out, "train")
    seeds = session_seeds(cfg.master_seed, cfg.n_sessions)
    errors, summary = [], {}
    for method in cfg.methods:
        method_dir = out / "runs" / method
        method_dir.mkdir(parents=True, exist_ok=True)
        study_path = method_dir / "study.json"
        known = json.loads(study_path.read_text())["seeds"] if study_path.exists() else []
        if len(seeds) > len(known) or known != seeds[:len(known)]:
            study_path.write_text(json.dumps({"method": method, "master_seed": cfg.master_seed,
                                              "seeds": seeds}, indent=2))
        base = cfg.train.train_config(method)
        records = run_study(base, cfg.n_sessions, seeds, data, out_root=out, workers=cfg.workers, resume=True)
        summary[method] = [r.status for r in records]
        for r in records:
            if not r.completed:
                errors.append(f"{method}/{r.session_seed}: aborted at iteration {r.abort_iteration}: {r.error}")
    if errors:
        raise CommandFailed(errors)
    return summary


def collect_records(run_root: Path) -> dict[str, list]:
    """Session records per method, in seed-stream order."""
    found = {}
    for method in METHODS:
        method_dir = run_root / "runs" / method
        if not method_dir.is_dir():
            continue
        study = method_dir / "study.json"
        if study.exists():
            order = [str(s) for s in json.loads(study.read_text())["seeds"]]
        else:
            order = sorted((p.name for p in method_dir.iterdir() if p.is_dir()), key=int)
        recs = []
        for seed in order:
            path = method_dir / seed / "session.json"
            if path.exists():
                recs.append(load_session_json(path)[1])
        if recs:
            found[method] = recs
    return found


def cmd_analyze(cfg: RunConfig, run_root: Path, out: Path | None = None) -> dict:
    records = collect_records(run_root)
    if not records:
        raise CommandFailed([f"no session records under {run_root / 'runs'}"])
    counts = {m: sum(r.completed for r in recs) for m, recs in records.items()}
    short = {m: c for m, c in counts.items() if c < 2}
    if short:
        raise CommandFailed([f"insufficient completed sessions (need >= 2): {short}"])
    out = out or run_root / "report"
    _echo(cfg, out, "analyze")
    a = cfg.analysis
    report = build_report(records, a.resamples, a.rng_seed, a.rel_epsilon, a.window, compare_first=a.compare_first)
    report["config"] = cfg.model_dump(mode="json", include={"analysis", "train", "datagen", "master_seed"})
    report["session_counts"] = {m: {"completed": counts[m], "total": len(r)} for m, r in records.items()}
    write_report(report, out)
    (out / "report.meta.json").write_text(json.dumps(
        {"generated_at": _dt.datetime.now(_dt.timezone.utc).isoformat(), "run_root": str(run_root)}, indent=2))
    return report


def _grid_csv(path: Path, grid: np.ndarray) -> None:
    np.savetxt(path, grid, delimiter=",", fmt="%.17g")


def cmd_inspect(checkpoint: str, dataset: Path, index: int, out: Path) -> dict:
    ds = read_dataset(dataset)
    if not 0 <= index < len(ds):
        raise CommandFailed([f"index {index} out of range for dataset of {len(ds)} pairs"])
    target = ds.pairs[index].target.data
    h, w = ds.shape
    if checkpoint == "identity":
        pred = target.copy()
    elif checkpoint == "zero":
        pred = np.zeros_like(target)
    else:
        iteration, blobs = read_checkpoint(checkpoint)
        state = {k[4:]: v for k, v in blobs.items() if k.startswith("gen.")}
        if "enc1.weight" not in state:
            raise CommandFailed([f"{checkpoint}: no generator parameters"])
        if h % 8 or w % 8:
            raise CommandFailed([f"dataset grid {h}x{w} is not divisible by 8; incompatible with the generator"])
        gen = Generator(None, width=state["enc1.weight"].shape[0])
        try:
            gen.load_state_dict(state)
        except (KeyError, EqvlError) as exc:
            raise CommandFailed([f"{checkpoint}: checkpoint/network shape mismatch: {exc}"]) from exc
        pred = predict(gen, ds.inputs()[index:index + 1])[0]
    out.mkdir(parents=True, exist_ok=True)
    k_pred, k_tgt = divergence_array(pred), divergence_array(target)
    grids = {}
    for name, arr in (("pred", pred), ("target", target)):
        for c, comp in enumerate(("s11", "s22", "s12")):
            grids[f"{name}_{comp}"] = arr[c]
    for name, k in (("pred", k_pred), ("target", k_tgt)):
        grids[f"{name}_absK1"] = np.abs(k[0])
        grids[f"{name}_absK2"] = np.abs(k[1])
    for name, g in grids.items():
        _grid_csv(out / f"{name}.csv", g)
    result = {
        "checkpoint": str(checkpoint),
        "dataset": str(dataset),
        "index": index,
        "mse_sigma": mse_sigma(pred, target),
        "mse_equil": mse_equil(pred, target),
        "high_freq_energy_ratio": {name: high_freq_energy_ratio(g) for name, g in grids.items()},
    }
    (out / "metrics.json").write_text(json.dumps(result, indent=2, sort_keys=True))
    return result


# ---------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="run config JSON")
    common.add_argument("--out", type=Path, help="output root (overrides config output_root)")
    common.add_argument("--force", action="store_true", help="overwrite existing outputs")
    common.add_argument("--method", choices=[*METHODS, "all"], default=None)
    common.add_argument("--sessions", type=int, default=None, metavar="N")
    common.add_argument("--workers", type=int, default=None, metavar="W")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="eqvl", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("generate", parents=[common], help="generate train/validation/test datasets")
    sub.add_parser("train", parents=[common], help="train N sessions per method")
    an = sub.add_parser("analyze", parents=[common], help="variability report over a run root")
    an.add_argument("run_root", type=Path, nargs="?", help="directory holding runs/ (default: output root)")
    ins = sub.add_parser("inspect", parents=[common], help="dump one prediction as CSV grids")
    ins.add_argument("--checkpoint", required=True, help="checkpoint path, or 'identity' / 'zero'")
    ins.add_argument("--dataset", type=Path, required=True)
    ins.add_argument("--index", type=int, default=0)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        cfg, out = _resolve(args)
        if args.command == "inspect":
            out = args.out or Path(cfg.output_root) / "inspect"
            cmd_inspect(args.checkpoint, args.dataset, args.index, out)
            return 0
        if args.command == "analyze" and args.run_root is not None:
            root = args.run_root
            report_out = args.out / "report" if args.out else None
        else:
            root, report_out = out, None
        with _lock(root):
            if args.command == "generate":
                cmd_generate(cfg, out, args.force)
            elif args.command == "train":
                cmd_train(cfg, out)
            elif args.command == "analyze":
                cmd_analyze(cfg, root, report_out)
        return 0
    except Timeout:
        _report_errors([f"another eqvl command holds the lock on {out}"])
    except CommandFailed as exc:
        _report_errors(exc.errors)
    except (ValidationError, InsufficientDataError, EqvlError, OSError, ValueError) as exc:
        _report_errors([f"{type(exc).__name__}: {exc}"])
    return 1


def _report_errors(errors) -> None:
    print(json.dumps({"status": "error", "errors": list(errors)}, indent=2), file=sys.stderr)


if __name__ == "__main__":
    sys.exit(main())
