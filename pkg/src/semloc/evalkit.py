"""Recall@N evaluation of re-ranked retrievals, plus parameter sweeps.

A retrieval at rank <= N counts as correct when the planar distance between
the query's position and the candidate view's panorama position is strictly
below the metric threshold (5 m by default). Reports check their own
monotonicity — recall can never drop as N or the threshold grows — so a
report that violates it fails loudly instead of getting published.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

from .contrastive import TrainConfig, train
from .maskio import Dataset, QueryRecord, SemanticMask
from .rerank import (
    DEFAULT_POOL_SIZE,
    DEFAULT_WEIGHT,
    CandidateList,
    RgbScoreTable,
    SemanticScorer,
    make_embed_scorer,
    rerank_all,
)

DEFAULT_THRESHOLD_M = 5.0
DEFAULT_N_VALUES = (1, 2, 3, 4, 5)
DEFAULT_W_GRID = (0.10, 0.15, 0.20, 0.25, 0.30, 0.35, 0.40, 0.45, 0.50)
DEFAULT_CROP_GRID = (0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9)

REPORT_FIELDS = ("method", "N", "threshold_m", "recall")


@dataclass(frozen=True)
class PositionIndex:
    """Query positions and the panorama position behind every view id."""

    query_pos: Mapping[str, tuple[float, float]]
    view_pano_pos: Mapping[str, tuple[float, float]]

    @staticmethod
    def from_dataset(dataset: Dataset) -> "PositionIndex":
        query_pos = {q.id: q.position for q in dataset.queries}
        view_pano_pos = {}
        for v in dataset.views:
            pano = dataset.pano_by_id.get(v.parent_pano)
            view_pano_pos[v.id] = pano.position if pano else v.position
        return PositionIndex(query_pos, view_pano_pos)

    def diameter(self) -> float:
        """Largest pairwise distance across all known positions."""
        pts = list(self.query_pos.values()) + list(self.view_pano_pos.values())
        best = 0.0
        for i in range(len(pts)):
            for j in range(i + 1, len(pts)):
                best = max(best, _dist(pts[i], pts[j]))
        return best


def _dist(a: tuple[float, float], b: tuple[float, float]) -> float:
    return math.hypot(a[0] - b[0], a[1] - b[1])


def _ranked_ids(result) -> list[str]:
    if isinstance(result, CandidateList):
        return result.ranked_ids()
    return list(result)


def recall_at_n(
    results: Mapping[str, CandidateList | Sequence[str]],
    index: PositionIndex,
    n: int,
    threshold_m: float = DEFAULT_THRESHOLD_M,
) -> float:
    """Fraction of queries with a correct view in the top N.

    Correct means distance(query, view's panorama) < threshold_m (strictly).
    Accepts CandidateLists or plain ranked id sequences. An empty result map
    scores 0.0.
    """
    if n < 1:
        raise ValueError(f"N must be >= 1, got {n}")
    if threshold_m < 0:
        raise ValueError(f"threshold must be >= 0, got {threshold_m}")
    if not results:
        return 0.0
    hits = 0
    for query_id, result in results.items():
        if query_id not in index.query_pos:
            raise KeyError(f"no position for query {query_id!r}")
        qpos = index.query_pos[query_id]
        for view_id in _ranked_ids(result)[:n]:
            if view_id not in index.view_pano_pos:
                raise KeyError(f"no position for view {view_id!r}")
            if _dist(qpos, index.view_pano_pos[view_id]) < threshold_m:
                hits += 1
                break
    return hits / len(results)


# ---------------------------------------------------------------------------
# Reports


@dataclass(frozen=True)
class ReportRow:
    method: str
    n: int
    threshold_m: float
    recall: float


@dataclass
class EvalReport:
    """Recall rows for one or more methods, self-checked for monotonicity."""

    rows: list[ReportRow] = field(default_factory=list)
    metadata: dict[str, str] = field(default_factory=dict)

    def validate(self) -> None:
        """Recall must be nondecreasing in N and in the threshold."""
        by_method_threshold: dict[tuple[str, float], list[ReportRow]] = {}
        by_method_n: dict[tuple[str, int], list[ReportRow]] = {}
        for row in self.rows:
            if not 0.0 <= row.recall <= 1.0:
                raise ValueError(f"recall out of [0, 1]: {row}")
            by_method_threshold.setdefault((row.method, row.threshold_m), []).append(row)
            by_method_n.setdefault((row.method, row.n), []).append(row)
        for rows in by_method_threshold.values():
            rows = sorted(rows, key=lambda r: r.n)
            for a, b in zip(rows, rows[1:]):
                if b.recall < a.recall - 1e-12:
                    raise ValueError(
                        f"recall decreased with N for {a.method!r}: "
                        f"N={a.n}:{a.recall} -> N={b.n}:{b.recall}"
                    )
        for rows in by_method_n.values():
            rows = sorted(rows, key=lambda r: r.threshold_m)
            for a, b in zip(rows, rows[1:]):
                if b.recall < a.recall - 1e-12:
                    raise ValueError(
                        f"recall decreased with threshold for {a.method!r}: "
                        f"{a.threshold_m}m:{a.recall} -> {b.threshold_m}m:{b.recall}"
                    )

    @staticmethod
    def build(
        method_results: Mapping[str, Mapping[str, CandidateList | Sequence[str]]],
        index: PositionIndex,
        n_values: Sequence[int] = DEFAULT_N_VALUES,
        thresholds_m: Sequence[float] = (DEFAULT_THRESHOLD_M,),
        metadata: Mapping[str, str] | None = None,
    ) -> "EvalReport":
        report = EvalReport(metadata=dict(metadata or {}))
        for method, results in method_results.items():
            for threshold in thresholds_m:
                for n in n_values:
                    report.rows.append(
                        ReportRow(
                            method, n, float(threshold),
                            recall_at_n(results, index, n, threshold),
                        )
                    )
        report.validate()
        return report

    def to_csv(self, path: str | Path) -> None:
        self.validate()
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(REPORT_FIELDS)
            for row in self.rows:
                writer.writerow(
                    [row.method, row.n, f"{row.threshold_m:.6f}", f"{row.recall:.6f}"]
                )

    def format_table(self) -> str:
        """Aligned text table, one line per (method, threshold), N across."""
        self.validate()
        n_values = sorted({r.n for r in self.rows})
        groups: dict[tuple[str, float], dict[int, float]] = {}
        for row in self.rows:
            groups.setdefault((row.method, row.threshold_m), {})[row.n] = row.recall
        label_w = max(
            [len(f"{m} @{t:g}m") for m, t in groups] + [len("method")]
        )
        header = "method".ljust(label_w) + "".join(f"  R@{n:<5d}" for n in n_values)
        lines = [header, "-" * len(header)]
        for (method, threshold), recalls in groups.items():
            label = f"{method} @{threshold:g}m".ljust(label_w)
            cells = "".join(
                f"  {recalls[n]:.4f} " if n in recalls else "  —      "
                for n in n_values
            )
            lines.append(label + cells)
        return "\n".join(lines)


def load_report(path: str | Path) -> EvalReport:
    report = EvalReport()
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if list(reader.fieldnames or []) != list(REPORT_FIELDS):
            raise ValueError(f"{path}: expected columns {REPORT_FIELDS}")
        for row in reader:
            report.rows.append(
                ReportRow(
                    row["method"], int(row["N"]),
                    float(row["threshold_m"]), float(row["recall"]),
                )
            )
    report.validate()
    return report


def threshold_curve(
    results: Mapping[str, CandidateList | Sequence[str]],
    index: PositionIndex,
    thresholds_m: Sequence[float],
    n: int = 1,
) -> list[tuple[float, float]]:
    """Recall@n across an ascending threshold grid; asserts monotonicity."""
    thresholds = list(thresholds_m)
    if thresholds != sorted(thresholds):
        raise ValueError("thresholds must be ascending")
    curve = [(t, recall_at_n(results, index, n, t)) for t in thresholds]
    for (_, a), (_, b) in zip(curve, curve[1:]):
        assert b >= a, "recall decreased with a larger threshold"
    return curve


# ---------------------------------------------------------------------------
# Sweeps


@dataclass(frozen=True)
class RetrievalTask:
    """Everything needed to evaluate one re-ranking configuration."""

    queries: tuple[QueryRecord, ...]
    table: RgbScoreTable
    dataset: Dataset
    index: PositionIndex
    pool_size: int = DEFAULT_POOL_SIZE
    n_values: tuple[int, ...] = DEFAULT_N_VALUES
    threshold_m: float = DEFAULT_THRESHOLD_M

    @staticmethod
    def from_dataset(
        dataset: Dataset,
        table: RgbScoreTable,
        pool_size: int = DEFAULT_POOL_SIZE,
        n_values: Sequence[int] = DEFAULT_N_VALUES,
        threshold_m: float = DEFAULT_THRESHOLD_M,
    ) -> "RetrievalTask":
        return RetrievalTask(
            tuple(dataset.queries), table, dataset,
            PositionIndex.from_dataset(dataset),
            pool_size, tuple(n_values), threshold_m,
        )


@dataclass(frozen=True)
class SweepRow:
    param: float
    recalls: tuple[tuple[int, float], ...]
    degenerate: bool = False


@dataclass(frozen=True)
class SweepTable:
    param_name: str
    rows: tuple[SweepRow, ...]

    def to_csv(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow([self.param_name, "N", "recall", "degenerate"])
            for row in self.rows:
                for n, recall in row.recalls:
                    writer.writerow(
                        [f"{row.param:.6f}", n, f"{recall:.6f}", int(row.degenerate)]
                    )

    def recall_at(self, param: float, n: int) -> float:
        for row in self.rows:
            if row.param == param:
                for rn, recall in row.recalls:
                    if rn == n:
                        return recall
        raise KeyError(f"no sweep cell ({param}, {n})")


def sweep_w(
    task: RetrievalTask,
    scorer: SemanticScorer,
    w_grid: Sequence[float] = DEFAULT_W_GRID,
    threads: int = 1,
) -> SweepTable:
    """Re-rank the task once per fusion weight; W=0 reproduces the RGB ranking."""
    rows = []
    for w in w_grid:
        results = rerank_all(
            list(task.queries), task.table, task.dataset, scorer,
            weight=w, pool_size=task.pool_size, threads=threads,
        )
        recalls = tuple(
            (n, recall_at_n(results, task.index, n, task.threshold_m))
            for n in task.n_values
        )
        rows.append(SweepRow(float(w), recalls))
    return SweepTable("w", tuple(rows))


def sweep_crop_ratio(
    task: RetrievalTask,
    train_masks: Sequence[SemanticMask],
    base_config: TrainConfig,
    ratio_grid: Sequence[float] = DEFAULT_CROP_GRID,
    weight: float = DEFAULT_WEIGHT,
    threads: int = 1,
) -> SweepTable:
    """Train one embedding model per minimum crop ratio and evaluate each.

    Every cell shares the same seed and differs only in min_crop_ratio, so
    the comparison isolates the augmentation strength. A cell is flagged
    degenerate when its augmentation cannot alter the input (ratio >= 1 and
    no rotation): positives become identical twins and the embedding
    collapses toward a constant.
    """
    rows = []
    for ratio in ratio_grid:
        config = replace(
            base_config, augment=replace(base_config.augment, min_crop_ratio=ratio)
        )
        model, _ = train(train_masks, config)
        scorer = make_embed_scorer(model)
        results = rerank_all(
            list(task.queries), task.table, task.dataset, scorer,
            weight=weight, pool_size=task.pool_size, threads=threads,
        )
        recalls = tuple(
            (n, recall_at_n(results, task.index, n, task.threshold_m))
            for n in task.n_values
        )
        degenerate = ratio >= 1.0 and config.augment.max_rotation_deg <= 0.0
        rows.append(SweepRow(float(ratio), recalls, degenerate))
    return SweepTable("min_crop_ratio", tuple(rows))
