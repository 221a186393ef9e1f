"""Synthetic street-scene datasets with known ground truth.

Scenes are stylized equirectangular class masks: sky above the horizon, road
and a sidewalk band below, and per-scene random buildings, trees, cars,
signs, and poles. Scene positions sit on a jittered grid spaced far enough
apart that the nearest panorama is unambiguous at the evaluation threshold.

Queries are re-renders of a database view direction with controlled
perturbations (yaw jitter, position jitter, pixel class flips, optional
object insertion), so every query's correct view is known by construction.
The companion RGB score table simulates an appearance-retrieval stage whose
errors are equally controlled: a corruption fraction of queries gets its true
view demoted to a known rank in [2, 10] by boosted imposters.

Everything is a pure function of the SceneSpec (seed included): two runs
produce byte-identical masks and tables.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .maskio import (
    ClassPalette,
    Dataset,
    PanoramaRecord,
    QueryRecord,
    SemanticMask,
    ViewRecord,
)
from .projection import ViewSpec, generate_database_views, gnomonic_view
from .rerank import RgbScoreTable, SemanticScorer

ROAD, SIDEWALK, BUILDING, SKY, TREE, CAR, SIGN, POLE = range(8)

DEFAULT_PALETTE = ClassPalette(
    ("road", "sidewalk", "building", "sky", "tree", "car", "sign", "pole"),
    palette_id="street8",
)

TRUTH_FIELDS = ("query_id", "view_id", "pano_id", "yaw_deg")


@dataclass(frozen=True)
class SceneSpec:
    """Knobs for dataset generation; defaults give a desk-scale benchmark."""

    seed: int = 0
    n_scenes: int = 50
    queries_per_scene: int = 1
    pano_w: int = 360
    pano_h: int = 180
    view_w: int = 128
    view_h: int = 96
    views_per_pano: int = 12
    fov_deg: float = 90.0
    grid_spacing_m: float = 25.0
    yaw_jitter_deg: float = 5.0
    pos_jitter_m: float = 1.0
    class_flip_prob: float = 0.05
    object_change_prob: float = 0.0
    corruption: float = 0.2
    palette: ClassPalette = field(default_factory=lambda: DEFAULT_PALETTE)

    def __post_init__(self) -> None:
        if self.n_scenes < 2:
            raise ValueError("need at least two scenes (one as an imposter)")
        if self.queries_per_scene < 1:
            raise ValueError("queries_per_scene must be >= 1")
        if self.pano_w != 2 * self.pano_h:
            raise ValueError("panorama width must be exactly twice its height")
        if self.views_per_pano < 4:
            raise ValueError("views_per_pano must be >= 4")
        if not 0 < self.fov_deg < 180:
            raise ValueError("fov_deg must be in (0, 180)")
        step = 360.0 / self.views_per_pano
        if not 0 <= self.yaw_jitter_deg < step / 2:
            raise ValueError(
                f"yaw_jitter_deg must be < half the view step ({step / 2:g})"
            )
        if not 0 <= self.pos_jitter_m <= 3.0:
            raise ValueError("pos_jitter_m must be in [0, 3] to keep truth in range")
        if self.grid_spacing_m < 15.0:
            raise ValueError("grid_spacing_m must be >= 15 to keep scenes separable")
        for name in ("class_flip_prob", "object_change_prob", "corruption"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {value}")
        if self.palette.size < 8:
            raise ValueError("the scene painter needs the 8-class street palette")


@dataclass(frozen=True)
class QueryTruth:
    """What a query really is: its source view, panorama, and capture yaw."""

    view_id: str
    pano_id: str
    yaw_deg: float


# ---------------------------------------------------------------------------
# Scene painting


def _paint(arr: np.ndarray, r0: int, r1: int, c0: int, width: int, cls: int) -> None:
    """Fill a rectangle, wrapping horizontally (panoramas have no seam)."""
    h, w = arr.shape
    r0, r1 = max(0, r0), min(h, r1)
    if r1 <= r0 or width <= 0:
        return
    c0 %= w
    end = c0 + min(width, w)
    if end <= w:
        arr[r0:r1, c0:end] = cls
    else:
        arr[r0:r1, c0:] = cls
        arr[r0:r1, : end - w] = cls


def generate_scene(spec: SceneSpec, scene_index: int) -> PanoramaRecord:
    """One procedural panorama at its grid position (deterministic per index)."""
    rng = np.random.default_rng([spec.seed, 101, scene_index])
    h, w = spec.pano_h, spec.pano_w
    horizon = h // 2
    arr = np.full((h, w), SKY, dtype=np.uint8)
    arr[horizon:, :] = ROAD
    sidewalk_h = int(rng.integers(8, 18))
    arr[horizon : horizon + sidewalk_h, :] = SIDEWALK

    scale = w / 360.0  # object extents are spec'd in degrees
    for _ in range(int(rng.integers(3, 7))):  # buildings
        width = int(rng.integers(25, 70) * scale)
        height = int(rng.integers(25, 75))
        c0 = int(rng.integers(0, w))
        _paint(arr, horizon - height, horizon, c0, width, BUILDING)
    for _ in range(int(rng.integers(2, 7))):  # trees
        width = int(rng.integers(6, 18) * scale)
        height = int(rng.integers(12, 40))
        c0 = int(rng.integers(0, w))
        _paint(arr, horizon - height, horizon, c0, width, TREE)
    for _ in range(int(rng.integers(1, 5))):  # signs
        width = max(2, int(rng.integers(3, 8) * scale))
        c0 = int(rng.integers(0, w))
        _paint(arr, horizon - 28, horizon - 20, c0, width, SIGN)
    for _ in range(int(rng.integers(2, 7))):  # poles
        width = max(1, int(rng.integers(1, 3) * scale))
        c0 = int(rng.integers(0, w))
        _paint(arr, horizon - 20, horizon + 6, c0, width, POLE)
    for _ in range(int(rng.integers(1, 5))):  # cars
        width = int(rng.integers(8, 22) * scale)
        c0 = int(rng.integers(0, w))
        _paint(arr, horizon + 6, horizon + 16, c0, width, CAR)

    cols = math.ceil(math.sqrt(spec.n_scenes))
    gx, gy = scene_index % cols, scene_index // cols
    position = (
        gx * spec.grid_spacing_m + float(rng.uniform(-2.0, 2.0)),
        gy * spec.grid_spacing_m + float(rng.uniform(-2.0, 2.0)),
    )
    mask = SemanticMask(arr, spec.palette.palette_id)
    return PanoramaRecord(f"p{scene_index:03d}", position, mask)


def generate_views(spec: SceneSpec, pano: PanoramaRecord) -> list[ViewRecord]:
    return generate_database_views(
        pano, count=spec.views_per_pano, fov_deg=spec.fov_deg,
        out_w=spec.view_w, out_h=spec.view_h,
    )


def generate_query(
    spec: SceneSpec,
    pano: PanoramaRecord,
    rng: np.random.Generator,
    query_id: str,
) -> tuple[QueryRecord, QueryTruth]:
    """A perturbed re-capture of one database view direction of ``pano``."""
    step = 360.0 / spec.views_per_pano
    k = int(rng.integers(0, spec.views_per_pano))
    yaw = k * step + float(rng.uniform(-spec.yaw_jitter_deg, spec.yaw_jitter_deg))
    view = gnomonic_view(
        pano,
        ViewSpec(yaw_deg=yaw, fov_deg=spec.fov_deg, out_w=spec.view_w, out_h=spec.view_h),
    )
    data = view.mask.data.copy()
    size = spec.palette.size
    flips = rng.random(data.shape) < spec.class_flip_prob
    offsets = rng.integers(1, size, size=data.shape, dtype=np.int16)
    data = np.where(flips, (data.astype(np.int16) + offsets) % size, data)

    # optional structural change: one inserted object of a random class
    insert = rng.random() < spec.object_change_prob
    rect_w = int(rng.integers(6, max(7, spec.view_w // 4)))
    rect_h = int(rng.integers(6, max(7, spec.view_h // 4)))
    rect_c = int(rng.integers(0, spec.view_w - rect_w + 1))
    rect_r = int(rng.integers(0, spec.view_h - rect_h + 1))
    rect_cls = int(rng.integers(0, size))
    if insert:
        data[rect_r : rect_r + rect_h, rect_c : rect_c + rect_w] = rect_cls

    position = (
        pano.position[0] + float(rng.uniform(-spec.pos_jitter_m, spec.pos_jitter_m)),
        pano.position[1] + float(rng.uniform(-spec.pos_jitter_m, spec.pos_jitter_m)),
    )
    nearest = round(yaw / step) % spec.views_per_pano
    truth = QueryTruth(f"{pano.id}_v{nearest:02d}", pano.id, yaw % 360.0)
    query = QueryRecord(
        query_id, position, SemanticMask(data.astype(np.uint8), spec.palette.palette_id)
    )
    return query, truth


def generate_dataset(spec: SceneSpec) -> tuple[Dataset, dict[str, QueryTruth]]:
    """All panoramas, database views, and queries, plus the truth map."""
    panoramas = [generate_scene(spec, i) for i in range(spec.n_scenes)]
    views: list[ViewRecord] = []
    for pano in panoramas:
        views.extend(generate_views(spec, pano))
    queries: list[QueryRecord] = []
    truth: dict[str, QueryTruth] = {}
    for i, pano in enumerate(panoramas):
        rng = np.random.default_rng([spec.seed, 202, i])
        for qi in range(spec.queries_per_scene):
            query, q_truth = generate_query(spec, pano, rng, f"q{i:03d}_{qi:02d}")
            queries.append(query)
            truth[query.id] = q_truth
    return Dataset(panoramas, queries, views), truth


# ---------------------------------------------------------------------------
# Simulated appearance-retrieval scores


def _wrap_angle(deg: float) -> float:
    return abs((deg + 180.0) % 360.0 - 180.0)


def synth_rgb_scores(
    dataset: Dataset,
    spec: SceneSpec,
    corruption: float | None = None,
    truth: Mapping[str, QueryTruth] | None = None,
) -> RgbScoreTable:
    """Simulated retrieval scores with a controlled error rate.

    Same-panorama views score by angular overlap with the query's true yaw
    (plus small noise); other views are noise-only. With ``corruption`` > 0,
    a seeded choice of round(corruption * n_queries) queries gets its true
    view demoted to a uniform target rank in [2, 10]: that many imposter
    views are boosted just above it in 0.01 steps. Clean queries keep their
    true view at rank 1 by a wide structural margin.
    """
    if corruption is None:
        corruption = spec.corruption
    if not 0.0 <= corruption <= 1.0:
        raise ValueError(f"corruption must be in [0, 1], got {corruption}")
    if truth is None:
        _, truth = generate_dataset(spec)
    rng = np.random.default_rng([spec.seed, 303])
    queries = dataset.queries
    views = dataset.views
    noise = rng.uniform(0.0, 0.04, size=(len(queries), len(views)))

    scores: dict[str, dict[str, float]] = {}
    for qi, query in enumerate(queries):
        q_truth = truth[query.id]
        row: dict[str, float] = {}
        for vi, view in enumerate(views):
            if view.parent_pano == q_truth.pano_id:
                delta = _wrap_angle(view.yaw_deg - q_truth.yaw_deg)
                base = 0.9 * max(0.0, 1.0 - delta / spec.fov_deg)
            else:
                base = 0.0
            row[view.id] = base + noise[qi, vi]
        scores[query.id] = row

    n_corrupt = round(corruption * len(queries))
    if n_corrupt:
        chosen = rng.choice(len(queries), size=n_corrupt, replace=False)
        target_ranks = rng.integers(2, 11, size=n_corrupt)
        for pick, rank in zip(chosen, target_ranks):
            query = queries[int(pick)]
            q_truth = truth[query.id]
            row = scores[query.id]
            correct = row[q_truth.view_id]
            imposters = sorted(
                (v.id for v in views if v.parent_pano != q_truth.pano_id),
                key=lambda vid: (-row[vid], vid),
            )
            need = int(rank) - 1
            for j, vid in enumerate(imposters[:need]):
                row[vid] = correct + 0.01 * (need - j)

    return RgbScoreTable.from_rows(
        (q.id, vid, s) for q in queries for vid, s in scores[q.id].items()
    )


def make_oracle_scorer(truth: Mapping[str, QueryTruth]) -> SemanticScorer:
    """An ideal semantic scorer: +1 for the true view, -1 for everything else."""

    def score(query: QueryRecord, view: ViewRecord) -> float:
        return 1.0 if truth[query.id].view_id == view.id else -1.0

    return score


# ---------------------------------------------------------------------------
# Truth-table I/O


def save_truth(truth: Mapping[str, QueryTruth], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(TRUTH_FIELDS)
        for query_id, t in truth.items():
            writer.writerow([query_id, t.view_id, t.pano_id, f"{t.yaw_deg:.6f}"])


def load_truth(path: str | Path) -> dict[str, QueryTruth]:
    truth: dict[str, QueryTruth] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if list(reader.fieldnames or []) != list(TRUTH_FIELDS):
            raise ValueError(f"{path}: expected columns {TRUTH_FIELDS}")
        for row in reader:
            truth[row["query_id"]] = QueryTruth(
                row["view_id"], row["pano_id"], float(row["yaw_deg"])
            )
    return truth
