"""Command-line entry point: one binary, one subcommand per pipeline stage.

Exit codes: 0 success, 2 usage errors (argparse), 3 invalid configuration,
1 any other runtime failure. Failures print a single machine-readable JSON
line to stderr. Every subcommand is deterministic given its inputs and seed,
and none mutates its inputs — stages write into their own output directory.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

from . import __version__
from .configfile import apply_kv, parse_kv_file
from .contrastive import TrainConfig, embed_mask, finetune, load_train_config, train
from .errors import ConfigError
from .evalkit import (
    DEFAULT_CROP_GRID,
    DEFAULT_N_VALUES,
    DEFAULT_THRESHOLD_M,
    DEFAULT_W_GRID,
    EvalReport,
    PositionIndex,
    RetrievalTask,
    sweep_crop_ratio,
    sweep_w,
)
from .maskio import (
    DEFAULT_PALETTE_ID,
    MANIFEST_FORMAT_VERSION,
    Dataset,
    load_mask,
    load_palette,
    save_dataset,
    save_palette,
)
from .nn import CHECKPOINT_FORMAT_VERSION, load_model, save_model
from .pixelsim import pixelwise_similarity
from .projection import generate_database_views
from .rerank import (
    DEFAULT_POOL_SIZE,
    DEFAULT_WEIGHT,
    load_candidates,
    load_rgb_scores,
    make_embed_scorer,
    make_pixel_scorer,
    rerank_all,
    save_candidates,
    save_rgb_scores,
)
from .synth import SceneSpec, generate_dataset, save_truth, synth_rgb_scores

log = logging.getLogger(__name__)


def _parse_ints(text: str) -> list[int]:
    """Accept '1..5' ranges or '1,3,5' lists."""
    text = text.strip()
    if ".." in text:
        lo, hi = text.split("..", 1)
        return list(range(int(lo), int(hi) + 1))
    return [int(part) for part in text.split(",") if part.strip()]


def _parse_floats(text: str) -> list[float]:
    return [float(part) for part in text.split(",") if part.strip()]


def _scene_spec_from_args(args) -> SceneSpec:
    """SceneSpec from an optional key=value file plus the global seed."""
    kwargs: dict = {}
    if args.spec:
        kwargs = apply_kv(parse_kv_file(args.spec), _SCENE_FIELD_TYPES)
    if args.seed is not None:
        kwargs["seed"] = args.seed
    try:
        return SceneSpec(**kwargs)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


_SCENE_FIELD_TYPES = {
    "seed": int, "n_scenes": int, "queries_per_scene": int, "pano_w": int,
    "pano_h": int, "view_w": int, "view_h": int, "views_per_pano": int,
    "fov_deg": float, "grid_spacing_m": float, "yaw_jitter_deg": float,
    "pos_jitter_m": float, "class_flip_prob": float,
    "object_change_prob": float, "corruption": float,
}


def _train_config_from_args(args) -> TrainConfig:
    if args.config:
        config = load_train_config(args.config)
    else:
        config = TrainConfig()
    if args.seed is not None:
        config = dataclasses.replace(
            config,
            seed=args.seed,
            augment=dataclasses.replace(config.augment, seed=args.seed),
        )
    return config


def _load_training_masks(masks_dir: str) -> list:
    root = Path(masks_dir)
    if not root.is_dir():
        raise ConfigError(f"mask directory not found: {root}")
    paths = sorted(p for p in root.iterdir() if p.suffix.lower() in (".png", ".pgm"))
    if not paths:
        raise ConfigError(f"no .png/.pgm masks under {root}")
    return [load_mask(p) for p in paths]


def _write_loss_csv(history: list[float], path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "mean_loss"])
        for epoch, loss in enumerate(history, start=1):
            writer.writerow([epoch, f"{loss:.17g}"])


def _make_scorer(args):
    if args.scorer == "pixel":
        return make_pixel_scorer()
    if not args.ckpt:
        raise ConfigError("--scorer embed requires --ckpt")
    return make_embed_scorer(load_model(args.ckpt))


def _zero_scorer(query, view) -> float:
    return 0.0


# ---------------------------------------------------------------------------
# Subcommands


def _cmd_synth(args) -> int:
    spec = _scene_spec_from_args(args)
    out = Path(args.out)
    dataset, truth = generate_dataset(spec)
    # database views are regenerated deterministically by `project`; the
    # manifest written here carries panoramas and queries only
    save_dataset(out, dataset.panoramas, dataset.queries, views=(), image_format=args.format)
    save_palette(spec.palette, out / "palette.txt")
    table = synth_rgb_scores(dataset, spec, corruption=args.corruption, truth=truth)
    save_rgb_scores(table, out / "rgb_scores.csv")
    save_truth(truth, out / "truth.csv")
    print(f"wrote {len(dataset.panoramas)} panoramas, {len(dataset.queries)} queries -> {out}")
    return 0


def _cmd_project(args) -> int:
    dataset = Dataset.load(args.dataset)
    views = []
    for pano in dataset.panoramas:
        views.extend(
            generate_database_views(
                pano, count=args.count, fov_deg=args.fov,
                out_w=args.width, out_h=args.height,
            )
        )
    manifest = save_dataset(
        Path(args.out), dataset.panoramas, dataset.queries, views, image_format=args.format
    )
    src_palette = Path(args.dataset).parent / "palette.txt"
    if src_palette.is_file():
        (Path(args.out) / "palette.txt").write_text(src_palette.read_text())
    print(f"wrote {len(views)} views -> {manifest}")
    return 0


def _cmd_pixelsim(args) -> int:
    query = load_mask(args.query)
    database = load_mask(args.db)
    print(f"{pixelwise_similarity(query, database):.6f}")
    return 0


def _cmd_train(args) -> int:
    config = _train_config_from_args(args)
    masks = _load_training_masks(args.masks)
    model, history = train(masks, config)
    save_model(model, args.out)
    if args.loss_csv:
        _write_loss_csv(history, Path(args.loss_csv))
    final = history[-1] if history else float("nan")
    print(f"trained {config.epochs} epochs on {len(masks)} masks; final loss {final:.6f}")
    return 0


def _cmd_finetune(args) -> int:
    config = _train_config_from_args(args)
    if config.finetune_mode == "none":
        raise ConfigError("finetune requires finetune_mode != 'none' in the config")
    model = load_model(args.ckpt)
    pairs_path = Path(args.pairs)
    root = pairs_path.parent
    pairs = []
    with open(pairs_path, newline="") as fh:
        reader = csv.DictReader(fh)
        needed = {"query_mask", "db_mask"}
        if not needed.issubset(reader.fieldnames or []):
            raise ConfigError(f"{pairs_path}: expected columns {sorted(needed)}")
        for row in reader:
            pairs.append(
                (load_mask(root / row["query_mask"]), load_mask(root / row["db_mask"]))
            )
    adapted = finetune(model, pairs, config)
    save_model(adapted, args.out)
    print(f"fine-tuned ({config.finetune_mode}) on {len(pairs)} pairs -> {args.out}")
    return 0


def _cmd_rerank(args) -> int:
    dataset = Dataset.load(args.dataset)
    table = load_rgb_scores(args.rgb)
    scorer = _make_scorer(args)
    results = rerank_all(
        dataset.queries, table, dataset, scorer,
        weight=args.w, pool_size=args.s, threads=args.threads,
    )
    save_candidates(results, args.out)
    print(f"re-ranked {len(results)} queries (W={args.w:g}, S={args.s}) -> {args.out}")
    return 0


def _cmd_eval(args) -> int:
    dataset = Dataset.load(args.dataset)
    index = PositionIndex.from_dataset(dataset)
    results = load_candidates(args.results)
    report = EvalReport.build(
        {args.method: results}, index,
        n_values=_parse_ints(args.n), thresholds_m=_parse_floats(args.thresholds),
    )
    if args.out:
        report.to_csv(args.out)
    print(report.format_table())
    return 0


def _cmd_sweep_w(args) -> int:
    dataset = Dataset.load(args.dataset)
    table = load_rgb_scores(args.rgb)
    task = RetrievalTask.from_dataset(
        dataset, table, pool_size=args.s,
        n_values=_parse_ints(args.n), threshold_m=args.threshold,
    )
    grid = _parse_floats(args.grid) if args.grid else [0.0, *DEFAULT_W_GRID]
    sweep = sweep_w(task, _make_scorer(args), grid, threads=args.threads)
    sweep.to_csv(args.out)
    print(f"swept {len(grid)} weights -> {args.out}")
    return 0


def _cmd_sweep_crop(args) -> int:
    dataset = Dataset.load(args.dataset)
    table = load_rgb_scores(args.rgb)
    config = _train_config_from_args(args)
    masks = _load_training_masks(args.masks)
    task = RetrievalTask.from_dataset(
        dataset, table, pool_size=args.s,
        n_values=_parse_ints(args.n), threshold_m=args.threshold,
    )
    grid = _parse_floats(args.grid) if args.grid else list(DEFAULT_CROP_GRID)
    sweep = sweep_crop_ratio(task, masks, config, grid, weight=args.w, threads=args.threads)
    sweep.to_csv(args.out)
    print(f"swept {len(grid)} crop ratios -> {args.out}")
    return 0


def _cmd_e2e(args) -> int:
    out = Path(args.out)
    seed = args.seed if args.seed is not None else 0

    # stage 1: synthesize ground-truth scenes, queries, and retrieval scores
    if args.spec:
        spec = _scene_spec_from_args(args)
    else:
        spec = SceneSpec(
            seed=seed, n_scenes=12, queries_per_scene=2, corruption=0.25
        )
    data_dir = out / "data"
    dataset, truth = generate_dataset(spec)
    save_dataset(data_dir, dataset.panoramas, dataset.queries, views=())
    save_palette(spec.palette, data_dir / "palette.txt")
    save_rgb_scores(synth_rgb_scores(dataset, spec, truth=truth), data_dir / "rgb_scores.csv")
    save_truth(truth, data_dir / "truth.csv")
    log.info("e2e: synthesized %d scenes", spec.n_scenes)

    # stage 2: project database views from the written panoramas
    loaded = Dataset.load(data_dir / "manifest.csv")
    views = []
    for pano in loaded.panoramas:
        views.extend(
            generate_database_views(
                pano, count=spec.views_per_pano, fov_deg=spec.fov_deg,
                out_w=spec.view_w, out_h=spec.view_h,
            )
        )
    proj_dir = out / "projected"
    save_dataset(proj_dir, loaded.panoramas, loaded.queries, views)
    log.info("e2e: projected %d views", len(views))

    # stage 3: train the contrastive embedding on the database views
    full = Dataset.load(proj_dir / "manifest.csv")
    if args.config:
        config = load_train_config(args.config)
        config = dataclasses.replace(
            config, seed=seed, augment=dataclasses.replace(config.augment, seed=seed)
        )
    else:
        config = TrainConfig(
            seed=seed, batch_n=8, epochs=4,
            augment=dataclasses.replace(TrainConfig().augment, seed=seed),
        )
    train_masks = [v.mask for v in sorted(full.views, key=lambda v: v.id)]
    model, history = train(train_masks, config)
    save_model(model, out / "model.ckpt")
    _write_loss_csv(history, out / "loss.csv")
    log.info("e2e: trained %d epochs (final loss %.4f)", config.epochs, history[-1])

    # stage 4: re-rank with no semantic scorer, the pixel scorer, and the
    # learned scorer
    table = load_rgb_scores(data_dir / "rgb_scores.csv")
    runs = {
        "rgb-only": (_zero_scorer, 0.0),
        "pixel-wise": (make_pixel_scorer(), args.w),
        "contrastive": (make_embed_scorer(model), args.w),
    }
    results_by_method = {}
    for method, (scorer, weight) in runs.items():
        results = rerank_all(
            full.queries, table, full, scorer,
            weight=weight, pool_size=args.s, threads=args.threads,
        )
        save_candidates(results, out / f"results_{method}.csv")
        results_by_method[method] = results

    # stage 5: one combined report
    report = EvalReport.build(
        results_by_method,
        PositionIndex.from_dataset(full),
        n_values=DEFAULT_N_VALUES,
        thresholds_m=(DEFAULT_THRESHOLD_M,),
        metadata={"seed": str(seed)},
    )
    report.to_csv(out / "report.csv")
    print(report.format_table())
    return 0


# ---------------------------------------------------------------------------
# Parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="semloc",
        description="Semantic-mask pose verification and retrieval re-ranking.",
    )
    parser.add_argument(
        "--version",
        action="version",
        version=(
            f"semloc {__version__} "
            f"(checkpoint-format {CHECKPOINT_FORMAT_VERSION}, "
            f"manifest-format {MANIFEST_FORMAT_VERSION})"
        ),
    )
    parser.add_argument("--seed", type=int, default=None, help="override config seeds")
    parser.add_argument(
        "--threads", type=int, default=max(1, os.cpu_count() or 1),
        help="worker threads for scoring/sweeps (results are thread-count independent)",
    )
    parser.add_argument("--log-level", default="WARNING",
                        choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    parser.add_argument("--config", default=None,
                        help="training config file (train/finetune/sweep-crop/e2e)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--spec", default=None, help="key=value scene spec file")
    p.add_argument("--out", required=True)
    p.add_argument("--corruption", type=float, default=None,
                   help="override the scene file's corrupted-query fraction")
    p.add_argument("--format", default="png", choices=["png", "pgm"])
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("project", help="render database views from panoramas")
    p.add_argument("--dataset", required=True, help="manifest.csv path")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=12)
    p.add_argument("--fov", type=float, default=90.0)
    p.add_argument("--width", type=int, default=640)
    p.add_argument("--height", type=int, default=480)
    p.add_argument("--format", default="png", choices=["png", "pgm"])
    p.set_defaults(func=_cmd_project)

    p = sub.add_parser("pixelsim", help="pixel-agreement score of two masks")
    p.add_argument("--query", required=True)
    p.add_argument("--db", required=True)
    p.set_defaults(func=_cmd_pixelsim)

    p = sub.add_parser("train", help="contrastive training on a mask directory")
    p.add_argument("--masks", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--loss-csv", default=None)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("finetune", help="adapt a checkpoint on labeled pairs")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--pairs", required=True, help="CSV with query_mask,db_mask paths")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_finetune)

    p = sub.add_parser("rerank", help="fuse semantic scores into RGB rankings")
    p.add_argument("--rgb", required=True, help="query_id,view_id,score CSV")
    p.add_argument("--dataset", required=True)
    p.add_argument("--scorer", choices=["pixel", "embed"], default="pixel")
    p.add_argument("--ckpt", default=None)
    p.add_argument("--w", type=float, default=DEFAULT_WEIGHT)
    p.add_argument("--s", type=int, default=DEFAULT_POOL_SIZE)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_rerank)

    p = sub.add_parser("eval", help="Recall@N over re-ranked results")
    p.add_argument("--results", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--n", default="1..5")
    p.add_argument("--thresholds", default="5")
    p.add_argument("--method", default="reranked")
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("sweep-w", help="recall across fusion weights")
    p.add_argument("--rgb", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--scorer", choices=["pixel", "embed"], default="pixel")
    p.add_argument("--ckpt", default=None)
    p.add_argument("--grid", default=None, help="comma-separated weights")
    p.add_argument("--s", type=int, default=DEFAULT_POOL_SIZE)
    p.add_argument("--n", default="1..5")
    p.add_argument("--threshold", type=float, default=DEFAULT_THRESHOLD_M)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_sweep_w)

    p = sub.add_parser("sweep-crop", help="recall across crop-ratio retrainings")
    p.add_argument("--rgb", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--masks", required=True)
    p.add_argument("--grid", default=None, help="comma-separated crop ratios")
    p.add_argument("--w", type=float, default=DEFAULT_WEIGHT)
    p.add_argument("--s", type=int, default=DEFAULT_POOL_SIZE)
    p.add_argument("--n", default="1..5")
    p.add_argument("--threshold", type=float, default=DEFAULT_THRESHOLD_M)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_sweep_crop)

    p = sub.add_parser("e2e", help="synth -> project -> train -> rerank -> eval")
    p.add_argument("--out", required=True)
    p.add_argument("--spec", default=None)
    p.add_argument("--w", type=float, default=DEFAULT_WEIGHT)
    p.add_argument("--s", type=int, default=DEFAULT_POOL_SIZE)
    p.set_defaults(func=_cmd_e2e)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse already printed usage / version
        return int(exc.code or 0)
    logging.basicConfig(
        level=getattr(logging, args.log_level),
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except ConfigError as exc:
        print(json.dumps({"error": "config", "message": str(exc)}), file=sys.stderr)
        return 3
    except Exception as exc:  # noqa: BLE001 — the CLI boundary reports, not raises
        print(
            json.dumps({"error": type(exc).__name__, "message": str(exc)}),
            file=sys.stderr,
        )
        return 1


if __name__ == "__main__":
    sys.exit(main())
