"""Command-line entry points: generate | run | report | serve.

`generate` writes a seeded synthetic dataset to disk, `run` drives simulated
annotation loops against it (single runs or a full criterion-by-mode
comparison), `report` summarizes emitted CSVs, and `serve` starts the HTTP
service for interactive labeling. The environment variable TS_AL_DATA_DIR
supplies the default dataset directory for every subcommand that needs one.

All run outputs are deterministic for a fixed dataset, configuration, and
seed: floats are written with repr so equal runs produce byte-identical
files.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

from .alloop import (
    METRICS_HEADER,
    ActiveLearningRun,
    LoopConfig,
    MetricRow,
    load_runstate,
    save_events_jsonl,
    save_metrics_csv,
    save_runstate,
    simulated_oracle,
)
from .ranking import CRITERIA
from .synth import (
    DatasetScale,
    ShiftConfig,
    SyntheticDataset,
    generate,
    load_dataset,
    save_dataset,
)

DATA_DIR_ENV = "TS_AL_DATA_DIR"

COMPARISON_HEADER = (
    "criterion,mode,iteration,queries,mean_cumulative_found,mean_recall,"
    "mean_fraction_reviewed"
)


def _dataset_dir(value: Optional[str], parser: argparse.ArgumentParser) -> Path:
    path = value if value is not None else os.environ.get(DATA_DIR_ENV)
    if path is None:
        parser.error(f"--dataset is required (or set {DATA_DIR_ENV})")
    return Path(path)


def _load(path: Path, parser: argparse.ArgumentParser) -> SyntheticDataset:
    try:
        return load_dataset(path)
    except (OSError, KeyError, ValueError) as exc:
        parser.error(f"cannot load dataset from {path}: {exc}")


# ---------------------------------------------------------------------------
# generate
# ---------------------------------------------------------------------------


def _add_generate(sub) -> None:
    p = sub.add_parser("generate", help="write a seeded synthetic dataset")
    p.add_argument("--out", help=f"output directory (default: ${DATA_DIR_ENV})")
    p.add_argument("--seed", type=int, default=0)
    shift = p.add_argument_group("domain shift")
    shift.add_argument("--d", type=int, default=None, help="feature dimension")
    shift.add_argument("--rotation-strength", type=float, default=None)
    shift.add_argument("--translation-norm", type=float, default=None)
    shift.add_argument("--noise-sigma", type=float, default=None)
    shift.add_argument("--target-fp-multiplier", type=float, default=None)
    shift.add_argument("--novel-fp-fraction", type=float, default=None)
    shift.add_argument("--herd-cluster-radius", type=float, default=None)
    shift.add_argument("--herd-mean-size", type=float, default=None)
    scale = p.add_argument_group("dataset scale")
    scale.add_argument("--source-images", type=int, default=None)
    scale.add_argument("--target-images", type=int, default=None)
    scale.add_argument("--source-animals", type=int, default=None)
    scale.add_argument("--target-animals", type=int, default=None)
    scale.add_argument("--source-fps", type=int, default=None)
    scale.add_argument("--image-width", type=int, default=None)
    scale.add_argument("--image-height", type=int, default=None)


_SHIFT_FLAGS = {
    "d": "d",
    "rotation_strength": "rotation_strength",
    "translation_norm": "translation_norm",
    "noise_sigma": "noise_sigma",
    "target_fp_multiplier": "target_fp_multiplier",
    "novel_fp_fraction": "novel_fp_fraction",
    "herd_cluster_radius": "herd_cluster_radius",
    "herd_mean_size": "herd_mean_size",
}

_SCALE_FLAGS = {
    "source_images": "n_images_src",
    "target_images": "n_images_tgt",
    "source_animals": "n_animals_src",
    "target_animals": "n_animals_tgt",
    "source_fps": "n_fp_src",
    "image_width": "image_width",
    "image_height": "image_height",
}


def _cmd_generate(args, parser) -> int:
    out = args.out if args.out is not None else os.environ.get(DATA_DIR_ENV)
    if out is None:
        parser.error(f"--out is required (or set {DATA_DIR_ENV})")
    shift_kwargs = {
        field: getattr(args, flag)
        for flag, field in _SHIFT_FLAGS.items()
        if getattr(args, flag) is not None
    }
    scale_kwargs = {
        field: getattr(args, flag)
        for flag, field in _SCALE_FLAGS.items()
        if getattr(args, flag) is not None
    }
    try:
        shift = ShiftConfig(**shift_kwargs)
        scale = DatasetScale(**scale_kwargs)
        dataset = generate(shift=shift, scale=scale, seed=args.seed)
    except ValueError as exc:
        parser.error(str(exc))
    save_dataset(dataset, out)
    n_src = len(dataset.source.pool)
    n_tgt = len(dataset.target.pool)
    print(
        f"wrote dataset to {out}: {n_src} source / {n_tgt} target candidates, "
        f"{len(dataset.source.gt)} source / {len(dataset.target.gt)} target animals"
    )
    return 0


# ---------------------------------------------------------------------------
# run
# ---------------------------------------------------------------------------


def _add_run(sub) -> None:
    p = sub.add_parser("run", help="drive simulated annotation loops")
    p.add_argument("--dataset", help=f"dataset directory (default: ${DATA_DIR_ENV})")
    p.add_argument(
        "--criterion",
        default="transfer_sampling",
        choices=sorted(CRITERIA) + ["all"],
        help="ranking criterion, or 'all' for the full comparison",
    )
    p.add_argument("--mode", default="adaptive", choices=["adaptive", "static"])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument(
        "--seeds",
        type=int,
        default=1,
        help="number of consecutive seeds starting at --seed (criterion 'all')",
    )
    p.add_argument("--iterations", type=int, default=None)
    p.add_argument("--queries", type=int, default=None, help="queries per iteration")
    p.add_argument("--window-w", type=int, default=None)
    p.add_argument("--window-h", type=int, default=None)
    p.add_argument("--threshold", type=float, default=None)
    p.add_argument("--nms-radius", type=int, default=None)
    p.add_argument("--crop-stride", type=int, default=None)
    p.add_argument("--crop-lambda", type=float, default=None)
    p.add_argument("--ot-solver", default=None, choices=["auto", "exact", "sinkhorn"])
    p.add_argument("--out", default=".", help="output directory")
    p.add_argument(
        "--resume",
        metavar="RUNSTATE",
        help="continue a run from a runstate.json snapshot",
    )
    p.add_argument(
        "--stop-after",
        type=int,
        default=None,
        metavar="N",
        help="pause after N total queries and write the snapshot",
    )


_CONFIG_FLAGS = {
    "criterion": "criterion",
    "mode": "mode",
    "iterations": "iterations",
    "queries": "queries_per_iteration",
    "window_w": "window_w",
    "window_h": "window_h",
    "threshold": "threshold",
    "nms_radius": "nms_radius",
    "crop_stride": "crop_stride",
    "crop_lambda": "crop_lambda",
    "ot_solver": "ot_solver",
    "seed": "seed",
}


def _loop_config(args, parser, criterion: str, mode: str, seed: int) -> LoopConfig:
    kwargs = {}
    for flag, field in _CONFIG_FLAGS.items():
        if flag in ("criterion", "mode", "seed"):
            continue
        value = getattr(args, flag)
        if value is not None:
            kwargs[field] = value
    try:
        return LoopConfig(criterion=criterion, mode=mode, seed=seed, **kwargs)
    except ValueError as exc:
        parser.error(str(exc))


def _drive(run: ActiveLearningRun, stop_after: Optional[int]) -> bool:
    """Advance the run against the ground-truth oracle.

    Returns True when the run finished, False when it paused at the
    --stop-after budget.
    """
    while True:
        q = run.next_query()
        if q is None:
            return True
        resp = simulated_oracle(q.rect, run._gt_by_image.get(q.image_id, ()))
        run.submit(q.window_id, resp.animal_points)
        if stop_after is not None and run.total_queries >= stop_after:
            return run.status == "finished"


def _save_run_outputs(run: ActiveLearningRun, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    save_metrics_csv(run.rows, out / "metrics.csv")
    save_events_jsonl(run.events, out / "events.jsonl")
    save_runstate(run.snapshot(), out / "runstate.json")


def _cmd_run_single(args, parser, dataset: SyntheticDataset) -> int:
    out = Path(args.out)
    if args.resume:
        try:
            snap = load_runstate(args.resume)
            run = ActiveLearningRun.resume(dataset, snap)
        except (OSError, KeyError, ValueError) as exc:
            parser.error(f"cannot resume from {args.resume}: {exc}")
    else:
        config = _loop_config(args, parser, args.criterion, args.mode, args.seed)
        run = ActiveLearningRun(dataset, config)
    finished = _drive(run, args.stop_after)
    _save_run_outputs(run, out)
    if finished:
        final = run.rows[-1] if run.rows else None
        recall = f"{final.recall:.3f}" if final else "n/a"
        print(
            f"finished: {run.total_queries} queries over "
            f"{run.iteration} iterations, recall {recall} "
            f"({len(run.found)}/{run.total_animals} animals)"
        )
    else:
        print(
            f"paused after {run.total_queries} queries; resume with "
            f"--resume {out / 'runstate.json'}"
        )
    return 0


def _mean_rows(rows_by_seed: Sequence[Sequence[MetricRow]]) -> list[tuple]:
    """Per-iteration means across seeds: (iteration, queries, found, recall, frac)."""
    n_iters = min(len(rows) for rows in rows_by_seed)
    out = []
    for i in range(n_iters):
        cells = [rows[i] for rows in rows_by_seed]
        out.append(
            (
                cells[0].iteration,
                cells[0].queries,
                sum(c.cumulative_found for c in cells) / len(cells),
                sum(c.recall for c in cells) / len(cells),
                sum(c.fraction_reviewed for c in cells) / len(cells),
            )
        )
    return out


def _cmd_run_all(args, parser, dataset: SyntheticDataset) -> int:
    if args.resume or args.stop_after is not None:
        parser.error("--resume/--stop-after apply to single runs, not --criterion all")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    seeds = list(range(args.seed, args.seed + args.seeds))
    lines = [COMPARISON_HEADER]
    for criterion in sorted(CRITERIA):
        for mode in ("adaptive", "static"):
            rows_by_seed = []
            for seed in seeds:
                config = _loop_config(args, parser, criterion, mode, seed)
                run = ActiveLearningRun(dataset, config)
                _drive(run, None)
                rows_by_seed.append(run.rows)
            means = _mean_rows(rows_by_seed)
            for it, queries, found, recall, frac in means:
                lines.append(
                    f"{criterion},{mode},{it},{queries},{found!r},{recall!r},{frac!r}"
                )
            print(
                f"{criterion:>17s} {mode:<8s} mean final recall "
                f"{means[-1][3]:.3f} over {len(seeds)} seed(s)"
            )
    (out / "comparison.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"wrote {out / 'comparison.csv'}")
    return 0


def _cmd_run(args, parser) -> int:
    dataset = _load(_dataset_dir(args.dataset, parser), parser)
    if args.criterion == "all":
        return _cmd_run_all(args, parser, dataset)
    return _cmd_run_single(args, parser, dataset)


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------


def _add_report(sub) -> None:
    p = sub.add_parser("report", help="summarize emitted metric CSVs")
    p.add_argument("paths", nargs="+", metavar="CSV", help="metrics or comparison files")


def _report_metrics(path: Path, lines: list[str]) -> None:
    rows = lines[1:]
    if not rows:
        print(f"{path}: no completed iterations")
        return
    last = rows[-1].split(",")
    it, queries, found, recall, frac = (
        int(last[0]),
        int(last[1]),
        int(last[2]),
        float(last[3]),
        float(last[4]),
    )
    print(
        f"{path}: {it} iterations, {queries} queries, {found} animals found, "
        f"recall {recall:.3f}, {100 * frac:.2f}% of windows reviewed"
    )


def _report_comparison(path: Path, lines: list[str]) -> None:
    finals: dict[tuple[str, str], tuple[int, float]] = {}
    for line in lines[1:]:
        crit, mode, it, _q, _found, recall, _frac = line.split(",")
        key = (crit, mode)
        entry = (int(it), float(recall))
        if key not in finals or entry[0] > finals[key][0]:
            finals[key] = entry
    print(f"{path}: mean final recall by series")
    ranked = sorted(finals.items(), key=lambda kv: -kv[1][1])
    for (crit, mode), (it, recall) in ranked:
        print(f"  {crit:>17s} {mode:<8s} {recall:.3f}  ({it} iterations)")


def _cmd_report(args, parser) -> int:
    for raw in args.paths:
        path = Path(raw)
        try:
            lines = path.read_text(encoding="utf-8").splitlines()
        except OSError as exc:
            parser.error(f"cannot read {path}: {exc}")
        if not lines:
            print(f"{path}: empty file")
        elif lines[0] == METRICS_HEADER:
            _report_metrics(path, lines)
        elif lines[0] == COMPARISON_HEADER:
            _report_comparison(path, lines)
        else:
            parser.error(f"{path}: unrecognized header {lines[0]!r}")
    return 0


# ---------------------------------------------------------------------------
# serve
# ---------------------------------------------------------------------------


def _add_serve(sub) -> None:
    p = sub.add_parser("serve", help="start the interactive labeling service")
    p.add_argument("--dataset", help=f"dataset directory (default: ${DATA_DIR_ENV})")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)


def _cmd_serve(args, parser) -> int:
    import uvicorn

    from .service import create_app

    dataset = _load(_dataset_dir(args.dataset, parser), parser)
    app = create_app(dataset)
    uvicorn.run(app, host=args.host, port=args.port, log_level="info")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tsal",
        description="Rare-object retrieval loops over synthetic aerial surveys.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    _add_generate(sub)
    _add_run(sub)
    _add_report(sub)
    _add_serve(sub)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "generate":
        return _cmd_generate(args, parser)
    if args.command == "run":
        return _cmd_run(args, parser)
    if args.command == "report":
        return _cmd_report(args, parser)
    return _cmd_serve(args, parser)


if __name__ == "__main__":
    sys.exit(main())
