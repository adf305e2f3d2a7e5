"""Command-line entry point.

Exit codes: 0 success, 1 contract/config error, 2 I/O error, 3 a check failed.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import platform
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, kernels
from . import engine as E
from . import synthworld as S
from .errors import ConfigError, ContractError, FormatError, GenerationError
from .gradcheck import run_gradcheck

EXIT_OK, EXIT_CONTRACT, EXIT_IO, EXIT_CHECK = 0, 1, 2, 3
GRID_KEYS = {"variants", "seeds"}

log = logging.getLogger("samdistill")


class CheckFailed(Exception):
    pass


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def dataset_digests(data_dir) -> dict:
    """Generator digest from the manifest plus a hash of every split file."""
    data_dir = Path(data_dir)
    out = {"generator": S.load_manifest(data_dir).get("generator_digest", "")}
    for split in S.SPLITS:
        path = data_dir / f"{split}.sdds"
        if path.exists():
            out[split] = file_digest(path)
    return out


def write_run_manifest(path, command: str, argv: list[str], started: float, **extra) -> None:
    doc = {
        "command": command,
        "argv": argv,
        "package_version": __version__,
        "kernel_backend": kernels.BACKEND,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "wall_seconds": round(time.perf_counter() - started, 3),
        **extra,
    }
    with open(path, "w") as f:
        json.dump(doc, f, indent=2, sort_keys=True)
        f.write("\n")


def read_config(path: str | None, **overrides) -> E.TrainConfig:
    text = Path(path).read_text() if path else ""
    return E.TrainConfig.from_text(text, **overrides)


def _outputs(out: str) -> dict[str, Path]:
    base = Path(out)
    base.parent.mkdir(parents=True, exist_ok=True)
    stem = base.with_suffix("") if base.suffix else base
    return {
        "checkpoint": base,
        "log": stem.with_name(stem.name + ".log.csv"),
        "report": stem.with_name(stem.name + ".report.txt"),
        "manifest": stem.with_name(stem.name + ".manifest.json"),
    }


def _config_block(cfg: E.TrainConfig) -> dict:
    return {"text": cfg.to_text(), "digest": cfg.digest(), "seed": cfg.seed}


# -- subcommands -----------------------------------------------------------


def cmd_gen_data(args) -> int:
    t0 = time.perf_counter()
    ratios = tuple(float(x) for x in args.ratios.split(",")) if args.ratios else S.DEFAULT_SPLIT_RATIOS
    manifest = S.build_dataset(args.n, args.seed, args.out, ratios)
    write_run_manifest(Path(args.out) / "run.manifest.json", "gen-data", sys.argv[1:], t0, seed=args.seed,
                       counts=manifest["counts"], dataset=dataset_digests(args.out))
    print(f"wrote {sum(manifest['counts'].values())} samples to {args.out} {manifest['counts']}")
    return EXIT_OK


def cmd_train_teacher(args) -> int:
    t0 = time.perf_counter()
    cfg = read_config(args.config, task=args.task, role="teacher", data=args.data)
    res = E.train_teacher(cfg)
    out = _outputs(args.out)
    E.save_model(out["checkpoint"], res.net, cfg)
    out["log"].write_text(res.log_csv())
    out["report"].write_text(res.report.to_text())
    write_run_manifest(out["manifest"], "train-teacher", sys.argv[1:], t0, config=_config_block(cfg),
                       dataset=dataset_digests(cfg.data), checkpoint=file_digest(out["checkpoint"]),
                       teacher_checksum=res.net.checksum(), epoch_metrics=res.epoch_metrics)
    print(res.report.to_text(), end="")
    return EXIT_OK


def cmd_distill(args) -> int:
    t0 = time.perf_counter()
    cfg = read_config(args.config, task=args.task, role="student", data=args.data, teacher=args.teacher)
    teacher, tcfg = E.load_model(cfg.teacher)
    if tcfg.role != "teacher":
        raise ConfigError(f"{cfg.teacher} is a {tcfg.role} checkpoint, not a teacher")
    res = E.distill(cfg, teacher, eval_split=args.split, validate=not args.no_validate)
    out = _outputs(args.out)
    E.save_model(out["checkpoint"], res.net, cfg.resolved())
    out["log"].write_text(res.log_csv())
    out["report"].write_text(res.report.to_text())
    write_run_manifest(out["manifest"], "distill", sys.argv[1:], t0, config=_config_block(cfg.resolved()),
                       dataset=dataset_digests(cfg.data), checkpoint=file_digest(out["checkpoint"]),
                       teacher={"path": str(cfg.teacher), "sha256": file_digest(cfg.teacher),
                                "checksum": teacher.checksum()},
                       epoch_metrics=res.epoch_metrics)
    print(res.report.to_text(), end="")
    return EXIT_OK


def cmd_eval(args) -> int:
    t0 = time.perf_counter()
    net, cfg = E.load_model(args.checkpoint)
    data_dir = args.data or cfg.data
    data = E.load_data(data_dir, args.split)
    if cfg.role == "teacher":
        report = E.evaluate_teacher(net, data, cfg.digest())
    else:
        teacher = E.load_model(cfg.teacher)[0] if net.cfg.oracle_layers else None
        report = E.evaluate_student(net, data, teacher, cfg.digest())
    report_path = Path(args.report)
    report_path.parent.mkdir(parents=True, exist_ok=True)
    report_path.write_text(report.to_csv() if report_path.suffix == ".csv" else report.to_text())
    write_run_manifest(report_path.with_name(report_path.name + ".manifest.json"), "eval", sys.argv[1:], t0,
                       config=_config_block(cfg), split=args.split, dataset=dataset_digests(data_dir),
                       checkpoint=file_digest(args.checkpoint))
    print(report.to_text(), end="")
    return EXIT_OK


def read_grid(path: str) -> tuple[list[str], list[int], E.TrainConfig]:
    """Grid file: ``variants`` and ``seeds`` plus any training config key."""
    values = E.parse_key_values(Path(path).read_text(), GRID_KEYS | set(E.TrainConfig.field_parsers()))
    variants = [v.strip() for v in values.pop("variants", "PSEUDO_GT, SAM_34").split(",") if v.strip()]
    seeds = [int(s) for s in values.pop("seeds", "0, 1, 2").split(",") if s.strip()]
    base = E.TrainConfig.from_text("\n".join(f"{k} = {v}" for k, v in values.items()))
    if not base.teacher:
        raise ConfigError("grid file needs a teacher checkpoint path")
    return variants, seeds, base


def cmd_run_grid(args) -> int:
    t0 = time.perf_counter()
    variants, seeds, base = read_grid(args.grid)
    teacher, _ = E.load_model(base.teacher)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    grid = E.run_grid(variants, base, teacher, seeds,
                      on_row=lambda r: log.info("%s seed %d done in %.1fs", r["variant"], r["seed"], r["seconds"]))
    (out / "table.csv").write_text(grid.table_csv())
    (out / "summary.txt").write_text(grid.summary())
    write_run_manifest(out / "manifest.json", "run-grid", sys.argv[1:], t0, config=_config_block(base),
                       variants=variants, seeds=seeds, dataset=dataset_digests(base.data),
                       teacher={"path": base.teacher, "sha256": file_digest(base.teacher)},
                       checks=[{"name": n, "passed": ok, "detail": d} for n, ok, d in grid.checks])
    print(grid.table_csv(), end="")
    print(grid.summary(), end="")
    hard = [c for c in grid.checks if "report only" not in c[0]]
    if not all(ok for _, ok, _ in hard):
        raise CheckFailed("directional check failed")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    t0 = time.perf_counter()
    results = run_gradcheck(args.select)
    for r in results:
        print(r.line())
    elapsed = time.perf_counter() - t0
    print(f"{sum(r.passed for r in results)}/{len(results)} passed in {elapsed:.1f}s")
    if not results:
        raise ConfigError(f"no gradcheck case matches {args.select!r}")
    if not all(r.passed for r in results):
        raise CheckFailed("gradient check failed")
    return EXIT_OK


# -- parser ----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="samdistill", description="Audio-to-vision distillation toolkit.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset")
    g.add_argument("--n", type=int, required=True, help="total number of samples")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--ratios", help="train,val,test fractions (default 2000/300/500 proportions)")
    g.set_defaults(fn=cmd_gen_data)

    t = sub.add_parser("train-teacher", help="train a teacher on ground truth")
    t.add_argument("--task", required=True, choices=("depth", "segmentation", "voxel", "3d"))
    t.add_argument("--config", help="key = value config file")
    t.add_argument("--data", help="dataset directory (overrides config)")
    t.add_argument("--out", required=True, help="checkpoint path")
    t.set_defaults(fn=cmd_train_teacher)

    d = sub.add_parser("distill", help="train a student against a frozen teacher")
    d.add_argument("--task", required=True, choices=("depth", "segmentation", "voxel", "3d"))
    d.add_argument("--config", help="key = value config file")
    d.add_argument("--teacher", required=True, help="teacher checkpoint")
    d.add_argument("--data", help="dataset directory (overrides config)")
    d.add_argument("--out", required=True, help="student checkpoint path")
    d.add_argument("--split", default="test", choices=S.SPLITS, help="split for the final report")
    d.add_argument("--no-validate", action="store_true", help="skip per-epoch validation")
    d.set_defaults(fn=cmd_distill)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--split", default="test", choices=S.SPLITS)
    e.add_argument("--report", required=True, help="report path (.csv for CSV, else key = value text)")
    e.add_argument("--data", help="dataset directory (default: the one in the checkpoint config)")
    e.set_defaults(fn=cmd_eval)

    r = sub.add_parser("run-grid", help="run variants x seeds and compare")
    r.add_argument("--grid", required=True, help="grid file: variants, seeds and config keys")
    r.add_argument("--out", required=True, help="output directory")
    r.set_defaults(fn=cmd_run_grid)

    c = sub.add_parser("gradcheck", help="finite-difference check of every op")
    c.add_argument("--select", help="only cases whose name contains this")
    c.set_defaults(fn=cmd_gradcheck)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.fn(args)
    except CheckFailed as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CHECK
    except (FormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ContractError, GenerationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONTRACT


if __name__ == "__main__":
    sys.exit(main())
