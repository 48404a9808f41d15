"""Command-line entry point: ``condaseg {data,train,eval,report,translate,configs}``.

Exit status: 0 success, 1 runtime failure, 2 config/schema error, 3 missing data.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import statistics
import sys
from contextlib import contextmanager
from pathlib import Path

from .config import ConfigError, DataConfig, ExperimentConfig, emit_default_configs, load_any
from .data import AcquisitionError, DatasetManifest, build_dataset, data_root

log = logging.getLogger("condaseg")

EXIT_RUNTIME, EXIT_SCHEMA, EXIT_MISSING_DATA = 1, 2, 3


class OutputDirBusy(RuntimeError):
    pass


@contextmanager
def output_lock(directory: str | Path):
    """Exclusive lock file so two processes never share an output directory."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lock = directory / ".lock"
    for _ in range(2):
        try:
            fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
            break
        except FileExistsError:
            try:
                pid = int(lock.read_text().strip() or 0)
                os.kill(pid, 0)
            except (ValueError, ProcessLookupError):
                lock.unlink(missing_ok=True)  # stale lock from a dead process
                continue
            except PermissionError:
                pass
            raise OutputDirBusy(f"{directory} is locked by process {lock.read_text().strip()}")
    else:
        raise OutputDirBusy(f"could not lock {directory}")
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


def _overrides(args) -> list[str]:
    sets = list(args.set or [])
    if getattr(args, "seed", None) is not None:
        sets.append(f"seed={args.seed}")
    if getattr(args, "output_dir", None) is not None:
        sets.append(f"output_dir={json.dumps(str(args.output_dir))}")
    return sets


def _experiment(args) -> ExperimentConfig:
    cfg = load_any(args.config, _overrides(args))
    if not isinstance(cfg, ExperimentConfig):
        raise ConfigError(f"{args.config} is a dataset config; this command needs an experiment config")
    return cfg


def _split_manifest(cfg: ExperimentConfig, name: str, split: str) -> DatasetManifest:
    from .training import DatasetMissing

    root = Path(cfg.data_root) if cfg.data_root else data_root()
    try:
        return DatasetManifest.load(root / name / split)
    except FileNotFoundError as exc:
        raise DatasetMissing(f"dataset {name}/{split} not built under {root}") from exc


# --------------------------------------------------------------------------- subcommands

def cmd_data(args) -> None:
    sets = list(args.set or [])
    if args.seed is not None:
        sets.append(f"seed={args.seed}" if not _is_experiment(args.config) else f"dataset_seed={args.seed}")
    cfg = load_any(args.config, sets)
    if isinstance(cfg, ExperimentConfig):
        names = [n for n in (cfg.source, cfg.target) if n]
        cfg = DataConfig(datasets=names, resolution=cfg.resolution, seed=cfg.dataset_seed,
                         data_root=cfg.data_root)
    out = args.output_dir or cfg.data_root
    for name in cfg.datasets:
        manifests = build_dataset(name, cfg.resolution, cfg.seed, out, limit=args.limit or cfg.limit,
                                  mnist_root=cfg.mnist_root, bsds_root=cfg.bsds_root)
        for split, m in manifests.items():
            print(f"{name}/{split}: {m.count} samples, checksum {m.checksum[:12]}")


def _is_experiment(path) -> bool:
    try:
        return "variant" in json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError):
        return False


def cmd_train(args) -> None:
    from .training import train

    cfg = _experiment(args)
    with output_lock(cfg.output_dir):
        state = train(cfg, resume=args.resume)
    print(f"trained {cfg.variant}: {state.epoch} epochs, {state.global_step} iterations, "
          f"best validation loss {state.best_val_metric:.5f} -> {cfg.output_dir}")


def cmd_eval(args) -> None:
    from .evaluation import evaluate_segmenter, segmentation_gallery

    cfg = _experiment(args)
    ckpt = Path(args.checkpoint or Path(cfg.output_dir) / "best.ckpt")
    if not ckpt.exists():
        raise FileNotFoundError(f"no checkpoint at {ckpt}; train first")
    limit = args.limit if args.limit is not None else cfg.test_limit
    result = {"variant": cfg.variant, "seed": cfg.seed, "checkpoint": str(ckpt)}
    with output_lock(cfg.output_dir):
        for role, name in (("source", cfg.source), ("target", cfg.target)):
            if not name:
                continue
            manifest = _split_manifest(cfg, name, args.split)
            report = evaluate_segmenter(ckpt, manifest, cfg.variant, limit=limit)
            result[role] = report.to_dict()
            print(f"{role} {name}/{args.split}: IoU back {report.per_class_iou['background']:.4f} "
                  f"digit {report.per_class_iou['digit']:.4f} mIoU {report.miou:.4f}")
            segmentation_gallery(ckpt, manifest, 10, Path(cfg.output_dir) / f"segmentation_{role}.png")
        (Path(cfg.output_dir) / "eval.json").write_text(json.dumps(result, indent=1) + "\n")


def collect_eval_reports(run_dirs: list[Path]) -> dict[str, list[dict]]:
    """variant -> list of eval.json payloads found under ``run_dirs`` (searched recursively)."""
    found: dict[str, list[dict]] = {}
    for d in run_dirs:
        for path in sorted(Path(d).rglob("eval.json")):
            payload = json.loads(path.read_text())
            found.setdefault(payload["variant"], []).append(payload)
    return found


def cmd_report(args) -> None:
    from .evaluation import SegReport, param_table, results_table
    from .nets import reference_translation_nets

    out = Path(args.output_dir or "reports")
    with output_lock(out):
        params = param_table(reference_translation_nets())
        (out / "params.txt").write_text(params.to_text())
        (out / "params.json").write_text(params.to_json())
        print(params.to_text())
        found = collect_eval_reports([Path(p) for p in args.runs])
        medians = {}
        for variant, payloads in found.items():
            if "source" not in payloads[0] or "target" not in payloads[0]:
                continue
            # The run whose target mIoU is the median represents the variant.
            ranked = sorted(payloads, key=lambda p: p["target"]["miou"])
            pick = ranked[(len(ranked) - 1) // 2]
            medians[variant] = (SegReport.from_dict(pick["source"]), SegReport.from_dict(pick["target"]))
        if medians:
            table = results_table(medians)
            table.write(out)
            seeds = {v: sorted(p["target"]["miou"] for p in ps) for v, ps in found.items()
                     if "target" in ps[0]}
            summary = {v: {"target_miou": s, "median": statistics.median(s)} for v, s in seeds.items()}
            (out / "results_by_seed.json").write_text(json.dumps(summary, indent=1) + "\n")
            print(table.to_text())


def cmd_translate(args) -> None:
    from .evaluation import translation_gallery

    cfg = _experiment(args)
    ckpt = Path(args.checkpoint or Path(cfg.output_dir) / "last.ckpt")
    if not ckpt.exists():
        raise FileNotFoundError(f"no checkpoint at {ckpt}; train first")
    a = _split_manifest(cfg, cfg.source, args.split)
    b = _split_manifest(cfg, cfg.target, args.split)
    with output_lock(cfg.output_dir):
        path = translation_gallery(ckpt, a, b, args.n, Path(cfg.output_dir) / "gallery.png")
    print(f"gallery written to {path}")


def cmd_configs(args) -> None:
    for path in emit_default_configs(args.output_dir or "configs", args.runs_root):
        print(path)


# --------------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="condaseg", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required=True):
        p.add_argument("--config", required=config_required, help="JSON config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="dotted override applied after parsing (repeatable)")
        p.add_argument("--seed", type=int, help="root seed override")
        p.add_argument("--output-dir", help="output directory override")
        return p

    p = common(sub.add_parser("data", help="build synthetic datasets"))
    p.add_argument("--limit", type=int, help="cap every split (tests, smoke runs)")
    p.set_defaults(func=cmd_data)

    p = common(sub.add_parser("train", help="run one experiment"))
    p.add_argument("--resume", action="store_true", help="continue from output_dir/last.ckpt")
    p.set_defaults(func=cmd_train)

    p = common(sub.add_parser("eval", help="evaluate a segmenter on source and target"))
    p.add_argument("--checkpoint")
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--limit", type=int)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="parameter table and results table from evaluated runs")
    p.add_argument("--runs", nargs="*", default=[], help="run directories holding eval.json")
    p.add_argument("--output-dir")
    p.set_defaults(func=cmd_report)

    p = common(sub.add_parser("translate", help="render a translation gallery"))
    p.add_argument("--checkpoint")
    p.add_argument("--split", default="val", choices=("train", "val", "test"))
    p.add_argument("-n", type=int, default=10)
    p.set_defaults(func=cmd_translate)

    p = sub.add_parser("configs", help="write the default and smoke experiment configs")
    p.add_argument("--output-dir")
    p.add_argument("--runs-root", default="runs", help="prefix for each config's output_dir")
    p.set_defaults(func=cmd_configs)
    return parser


def main(argv: list[str] | None = None) -> int:
    from .training import DatasetMissing

    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_SCHEMA
    except (DatasetMissing, AcquisitionError) as exc:
        print(f"missing data: {exc}", file=sys.stderr)
        return EXIT_MISSING_DATA
    except Exception as exc:  # noqa: BLE001 - categorized exit status for any runtime failure
        log.debug("runtime failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return 0


if __name__ == "__main__":
    sys.exit(main())
