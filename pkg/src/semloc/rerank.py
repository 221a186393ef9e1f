"""Weighted fusion of appearance-retrieval scores with semantic similarity.

The appearance (RGB) retrieval stage supplies raw scores per (query, view).
For each query we take its S best-scored views, widen that set with every
view sharing a panorama with one of them (cheap, and exactly where the right
answer hides when retrieval is almost right), min-max normalize both score
families to [-1, +1] over the pool, and re-rank by

    fused = rgb_norm + W * semantic_norm

A semantic scorer is any callable (QueryRecord, ViewRecord) -> float; this
module ships factories for pixel-agreement and learned-embedding scorers.
"""

from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .contrastive import embed_mask
from .maskio import Dataset, QueryRecord, SemanticMask, ViewRecord, resize_nearest
from .nn import EmbeddingModel
from .pixelsim import pixelwise_similarity

DEFAULT_WEIGHT = 0.25
DEFAULT_POOL_SIZE = 10

SemanticScorer = Callable[[QueryRecord, ViewRecord], float]

RESULT_FIELDS = ("query_id", "rank", "view_id", "rgb_norm", "sem_norm", "fused")


@dataclass(frozen=True)
class RgbScoreTable:
    """Per-query retrieval scores, held descending (ties broken by view id)."""

    rows: Mapping[str, tuple[tuple[str, float], ...]]

    @staticmethod
    def from_rows(entries: Iterable[tuple[str, str, float]]) -> "RgbScoreTable":
        grouped: dict[str, list[tuple[str, float]]] = {}
        for query_id, view_id, score in entries:
            grouped.setdefault(query_id, []).append((view_id, float(score)))
        table = {}
        for query_id, pairs in grouped.items():
            seen = {v for v, _ in pairs}
            if len(seen) != len(pairs):
                raise ValueError(f"duplicate view scores for query {query_id!r}")
            pairs.sort(key=lambda pair: (-pair[1], pair[0]))
            table[query_id] = tuple(pairs)
        return RgbScoreTable(table)

    def query_ids(self) -> list[str]:
        return list(self.rows.keys())

    def top(self, query_id: str, count: int) -> tuple[tuple[str, float], ...]:
        if query_id not in self.rows:
            raise KeyError(f"no scores for query {query_id!r}")
        return self.rows[query_id][:count]

    def scores_for(self, query_id: str) -> dict[str, float]:
        if query_id not in self.rows:
            raise KeyError(f"no scores for query {query_id!r}")
        return dict(self.rows[query_id])


def load_rgb_scores(path: str | Path) -> RgbScoreTable:
    """Read a query_id,view_id,score CSV into a ranked table."""
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        needed = {"query_id", "view_id", "score"}
        if not needed.issubset(reader.fieldnames or []):
            raise ValueError(f"{path}: expected columns {sorted(needed)}")
        try:
            entries = [
                (row["query_id"], row["view_id"], float(row["score"]))
                for row in reader
            ]
        except (TypeError, ValueError) as exc:
            raise ValueError(f"{path}: non-numeric score ({exc})") from None
    return RgbScoreTable.from_rows(entries)


def save_rgb_scores(table: RgbScoreTable, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["query_id", "view_id", "score"])
        for query_id in table.rows:
            for view_id, score in table.rows[query_id]:
                writer.writerow([query_id, view_id, f"{score:.9f}"])


# ---------------------------------------------------------------------------
# Normalization and fusion


def normalize_scores(scores: Sequence[float]) -> list[float]:
    """Min-max map onto [-1, +1]; a constant list maps to all zeros."""
    if len(scores) == 0:
        raise ValueError("cannot normalize an empty score list")
    arr = np.asarray(scores, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError("non-finite score")
    lo = float(arr.min())
    hi = float(arr.max())
    if hi == lo:
        return [0.0] * len(scores)
    return [2.0 * (float(s) - lo) / (hi - lo) - 1.0 for s in scores]


@dataclass(frozen=True)
class CandidateEntry:
    view_id: str
    rgb_raw: float
    rgb_norm: float
    sem_norm: float
    fused: float


@dataclass(frozen=True)
class CandidateList:
    """One query's re-ranked pool, best first."""

    query_id: str
    weight: float
    entries: tuple[CandidateEntry, ...]

    def ranked_ids(self) -> list[str]:
        return [e.view_id for e in self.entries]


def candidate_pool(
    query_id: str,
    table: RgbScoreTable,
    dataset: Dataset,
    pool_size: int = DEFAULT_POOL_SIZE,
) -> list[str]:
    """Top-S view ids for the query plus all same-panorama siblings, sorted.

    Views referenced by the table must exist in the dataset.
    """
    top = table.top(query_id, pool_size)
    if not top:
        raise ValueError(f"query {query_id!r} has an empty score list")
    panos = set()
    for view_id, _ in top:
        view = dataset.view_by_id.get(view_id)
        if view is None:
            raise KeyError(f"scored view {view_id!r} is not in the dataset")
        panos.add(view.parent_pano)
    pool = {
        v.id for pano_id in panos for v in dataset.views_by_pano.get(pano_id, ())
    }
    return sorted(pool)


def fuse(
    query: QueryRecord,
    pool: Sequence[str],
    table: RgbScoreTable,
    scorer: SemanticScorer,
    dataset: Dataset,
    weight: float = DEFAULT_WEIGHT,
) -> CandidateList:
    """Score a candidate pool and order it by the fused score.

    Pool members missing from the RGB table (siblings the retrieval stage
    never scored) enter at the pool's minimum raw RGB score. Ordering ties on
    the fused score break by raw RGB score, then view id, so results are
    reproducible run to run.
    """
    if len(pool) == 0:
        raise ValueError(f"empty candidate pool for query {query.id!r}")
    known = table.scores_for(query.id)
    scored = [known[v] for v in pool if v in known]
    if not scored:
        raise ValueError(f"no RGB scores overlap the pool for query {query.id!r}")
    floor = min(scored)
    rgb_raw = [known.get(v, floor) for v in pool]
    sem_raw = [scorer(query, dataset.view_by_id[v]) for v in pool]
    rgb_norm = normalize_scores(rgb_raw)
    sem_norm = normalize_scores(sem_raw)
    fused = [r + weight * s for r, s in zip(rgb_norm, sem_norm)]
    order = sorted(
        range(len(pool)), key=lambda i: (-fused[i], -rgb_raw[i], pool[i])
    )
    entries = tuple(
        CandidateEntry(pool[i], rgb_raw[i], rgb_norm[i], sem_norm[i], fused[i])
        for i in order
    )
    return CandidateList(query.id, weight, entries)


def rerank_all(
    queries: Sequence[QueryRecord],
    table: RgbScoreTable,
    dataset: Dataset,
    scorer: SemanticScorer,
    weight: float = DEFAULT_WEIGHT,
    pool_size: int = DEFAULT_POOL_SIZE,
    threads: int = 1,
) -> dict[str, CandidateList]:
    """Re-rank every query; returns {query_id: CandidateList} in input order.

    ``threads`` > 1 fans queries out over a thread pool; results are collected
    in input order so the output is identical to the serial run.
    """

    def one(query: QueryRecord) -> CandidateList:
        pool = candidate_pool(query.id, table, dataset, pool_size)
        return fuse(query, pool, table, scorer, dataset, weight)

    if threads > 1 and len(queries) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool_exec:
            ranked = list(pool_exec.map(one, queries))
    else:
        ranked = [one(q) for q in queries]
    return {q.id: r for q, r in zip(queries, ranked)}


# ---------------------------------------------------------------------------
# Semantic scorer factories


def make_pixel_scorer(width: int = 80, height: int = 64) -> SemanticScorer:
    """Pixel-agreement scorer; both masks are resized to width x height."""

    def score(query: QueryRecord, view: ViewRecord) -> float:
        q = resize_nearest(query.mask, width, height)
        v = resize_nearest(view.mask, width, height)
        return pixelwise_similarity(q, v)

    return score


def make_embed_scorer(model: EmbeddingModel) -> SemanticScorer:
    """Embedding-dot-product scorer with an id-keyed cache.

    Masks are resized to the model's input raster. The cache assumes ids are
    stable within one dataset (true for manifests, which reject duplicates).
    """
    _, in_h, in_w = model.input_shape
    cache: dict[str, np.ndarray] = {}

    def embed_of(record_id: str, mask: SemanticMask) -> np.ndarray:
        got = cache.get(record_id)
        if got is None:
            got = embed_mask(model, resize_nearest(mask, in_w, in_h))
            cache[record_id] = got
        return got

    def score(query: QueryRecord, view: ViewRecord) -> float:
        return float(embed_of("q:" + query.id, query.mask) @ embed_of("v:" + view.id, view.mask))

    return score


# ---------------------------------------------------------------------------
# Result CSV I/O


def save_candidates(results: Mapping[str, CandidateList], path: str | Path) -> None:
    """Write re-ranking results (one row per query x candidate, rank ascending)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(RESULT_FIELDS)
        for query_id, cand in results.items():
            for rank, e in enumerate(cand.entries, start=1):
                writer.writerow(
                    [
                        query_id,
                        rank,
                        e.view_id,
                        f"{e.rgb_norm:.6f}",
                        f"{e.sem_norm:.6f}",
                        f"{e.fused:.6f}",
                    ]
                )


def load_candidates(path: str | Path) -> dict[str, CandidateList]:
    """Read results written by save_candidates (raw RGB scores are not kept)."""
    path = Path(path)
    per_query: dict[str, list[tuple[int, CandidateEntry]]] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if list(reader.fieldnames or []) != list(RESULT_FIELDS):
            raise ValueError(f"{path}: expected columns {RESULT_FIELDS}")
        for row in reader:
            entry = CandidateEntry(
                view_id=row["view_id"],
                rgb_raw=float("nan"),
                rgb_norm=float(row["rgb_norm"]),
                sem_norm=float(row["sem_norm"]),
                fused=float(row["fused"]),
            )
            per_query.setdefault(row["query_id"], []).append((int(row["rank"]), entry))
    results = {}
    for query_id, pairs in per_query.items():
        pairs.sort(key=lambda p: p[0])
        if [r for r, _ in pairs] != list(range(1, len(pairs) + 1)):
            raise ValueError(f"{path}: ranks for {query_id!r} are not 1..K")
        results[query_id] = CandidateList(
            query_id, float("nan"), tuple(e for _, e in pairs)
        )
    return results
