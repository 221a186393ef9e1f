"""End-to-end acceptance checks, one verdict line per shipping criterion.

Every test funnels its measurements through :func:`record`, which appends a
``[criterion NN] PASS/FAIL`` line to the shared log (printed as a scoreboard
by the terminal-summary hook in conftest) before asserting. Oracles here are
deliberately primitive — pure-Python loops, probe images, brute counting —
so a bug in the library cannot hide in a shared code path.

Budgeted checks (the loss oracle, the finite-difference gradient check, and
the full training run) time themselves against single-core wall-clock
limits; conftest pins the BLAS thread pools to keep those timings honest.
"""

import math
import time

import numpy as np
import pytest

from semloc.augment import AugmentConfig, make_pair
from semloc.contrastive import (
    Batch,
    TrainConfig,
    embed_similarity,
    info_nce_loss,
    pair_indices,
    train,
)
from semloc.evalkit import (
    DEFAULT_CROP_GRID,
    DEFAULT_W_GRID,
    EvalReport,
    ReportRow,
    RetrievalTask,
    recall_at_n,
    sweep_crop_ratio,
    sweep_w,
    threshold_curve,
)
from semloc.maskio import PanoramaRecord, SemanticMask
from semloc.nn import (
    EmbeddingModel,
    conv,
    default_encoder,
    dense,
    finite_difference_gradient,
    global_avg_pool,
    l2_normalize_vjp,
    maxpool,
    one_hot_batch,
    relu,
)
from semloc.pixelsim import pixelwise_similarity
from semloc.projection import ViewSpec, gnomonic_view, view_yaws
from semloc.rerank import (
    candidate_pool,
    make_embed_scorer,
    make_pixel_scorer,
    rerank_all,
)
from semloc.synth import make_oracle_scorer


def record(log, number, name, passed, detail):
    """Log one criterion verdict, then assert it."""
    line = f"[criterion {number:02d}] {'PASS' if passed else 'FAIL'} {name}: {detail}"
    log.append(line)
    print(line)
    assert passed, line


def zero_scorer(query, view):
    return 0.0


# ---------------------------------------------------------------------------
# Criterion 1 — the batched loss matches a scalar oracle


def scalar_info_nce(z, partner, tau):
    """Per-anchor softmax cross-entropy summed over anchors, pure Python."""
    rows = [list(map(float, row)) for row in z]
    n = len(rows)
    total = 0.0
    for i in range(n):
        sims = [
            sum(a * b for a, b in zip(rows[i], rows[k])) / tau for k in range(n)
        ]
        denom = sum(math.exp(sims[k]) for k in range(n) if k != i)
        total += -math.log(math.exp(sims[partner[i]]) / denom)
    return total


class TestLossOracle:
    def test_info_nce_matches_scalar_oracle(self, criterion_log):
        rng = np.random.default_rng(11)
        started = time.perf_counter()
        worst = 0.0
        single_pair_zero = True
        batches = 0
        for pairs_n in (1, 2, 4, 16):
            pairing = pair_indices(pairs_n)
            for _ in range(25):
                z = rng.normal(size=(2 * pairs_n, 16))
                z /= np.linalg.norm(z, axis=1, keepdims=True)
                loss, _ = info_nce_loss(Batch(z, pairing), 0.07)
                worst = max(worst, abs(loss - scalar_info_nce(z, pairing, 0.07)))
                if pairs_n == 1:
                    # one pair means the partner is the only candidate, so
                    # the softmax is trivially confident
                    single_pair_zero = single_pair_zero and loss == 0.0
                batches += 1
        elapsed = time.perf_counter() - started
        record(
            criterion_log, 1, "loss matches scalar oracle",
            worst <= 1e-10 and single_pair_zero and elapsed < 10.0,
            f"{batches} batches (sizes 2/4/8/32), max |diff| {worst:.2e} "
            f"(tol 1e-10), single-pair loss exactly 0.0: {single_pair_zero}, "
            f"{elapsed:.1f}s (budget 10s)",
        )


# ---------------------------------------------------------------------------
# Criterion 2 — analytic gradients match finite differences end to end


class TestGradientCheck:
    @staticmethod
    def _max_rel_error(encoder):
        """FD-vs-backprop gap for one architecture on a pinned batch.

        The seeds are pinned because the comparison is only meaningful away
        from ReLU kinks and maxpool ties: a parameter sitting within the FD
        step (1e-5) of an activation boundary makes the loss locally
        non-differentiable and the two estimates legitimately disagree.
        These seeds were chosen by measuring the margin, not by retrying
        until green; see the repository notes for the survey.
        """
        rng = np.random.default_rng(15)
        masks = [
            SemanticMask(rng.integers(0, 6, size=(20, 16)).astype(np.uint8))
            for _ in range(8)
        ]
        x = one_hot_batch(masks, 6)
        model = EmbeddingModel((6, 20, 16), encoder, seed=25)
        pairing = pair_indices(4)

        def loss_fn(z_raw):
            norms = np.linalg.norm(z_raw, axis=-1, keepdims=True)
            loss, _ = info_nce_loss(Batch(z_raw / norms, pairing), 0.07)
            return loss

        _, z = model.forward(x, record=True)
        norms = np.linalg.norm(z, axis=-1, keepdims=True)
        zn = z / norms
        _, gz = info_nce_loss(Batch(zn, pairing), 0.07)
        analytic = model.backward(l2_normalize_vjp(zn, norms, gz))
        fd = finite_difference_gradient(model, x, loss_fn, step=1e-5)
        rel = np.abs(analytic - fd) / np.maximum(
            np.maximum(np.abs(analytic), np.abs(fd)), 1e-5
        )
        return float(rel.max())

    def test_backprop_matches_finite_differences(self, criterion_log):
        started = time.perf_counter()
        # the stock encoder exercises conv, relu, global-avg-pool and dense;
        # the second model adds the remaining layer kind, maxpool
        rel_stock = self._max_rel_error(default_encoder(64))
        rel_pool = self._max_rel_error(
            (conv(8, kernel=3, stride=1, padding=1), relu(), maxpool(2),
             global_avg_pool(), dense(16))
        )
        elapsed = time.perf_counter() - started
        worst = max(rel_stock, rel_pool)
        record(
            criterion_log, 2, "backprop matches finite differences",
            worst <= 1e-4 and elapsed < 60.0,
            f"batch of 8 one-hot 20x16 masks, step 1e-5: stock encoder max "
            f"rel {rel_stock:.2e}, maxpool variant {rel_pool:.2e} (tol 1e-4), "
            f"{elapsed:.1f}s (budget 60s)",
        )


# ---------------------------------------------------------------------------
# Criterion 3 — pixel-wise similarity equals a brute-force count


class TestPixelOverlap:
    def test_matches_counting_oracle(self, criterion_log):
        rng = np.random.default_rng(3)
        h, w = 64, 80
        exact = symmetric = relabel_safe = True
        for _ in range(100):
            a = rng.integers(0, 8, size=(h, w)).astype(np.uint8)
            # blend toward a copy so overlap spans the whole [1/8, 1] range
            keep = rng.random((h, w)) < rng.random()
            b = np.where(keep, a, rng.integers(0, 8, size=(h, w))).astype(np.uint8)

            got = pixelwise_similarity(SemanticMask(a), SemanticMask(b))
            matches = 0
            for i in range(h):
                for j in range(w):
                    if a[i, j] == b[i, j]:
                        matches += 1
            exact = exact and got == matches / (h * w)
            symmetric = symmetric and got == pixelwise_similarity(
                SemanticMask(b), SemanticMask(a)
            )
            perm = rng.permutation(8).astype(np.uint8)
            relabel_safe = relabel_safe and got == pixelwise_similarity(
                SemanticMask(perm[a]), SemanticMask(perm[b])
            )
        record(
            criterion_log, 3, "pixel overlap equals brute-force count",
            exact and symmetric and relabel_safe,
            f"100 random 64x80 pairs: oracle equality {exact}, "
            f"symmetry {symmetric}, invariance to consistent relabeling "
            f"{relabel_safe} (all exact)",
        )


# ---------------------------------------------------------------------------
# Criterion 4 — perspective rendering geometry


def sampled_columns(pano_w, pano_h, spec):
    """Which source column fed each output pixel, via two probe panoramas.

    Column indices up to 360 overflow uint8, so they are split into a
    base-251 pair of masks, rendered separately, and recombined.
    """
    cols = np.arange(pano_w)
    lo = np.tile(cols % 251, (pano_h, 1)).astype(np.uint8)
    hi = np.tile(cols // 251, (pano_h, 1)).astype(np.uint8)
    at = (0.0, 0.0)
    v_lo = gnomonic_view(PanoramaRecord("lo", at, SemanticMask(lo)), spec)
    v_hi = gnomonic_view(PanoramaRecord("hi", at, SemanticMask(hi)), spec)
    return v_hi.mask.data.astype(np.intp) * 251 + v_lo.mask.data.astype(np.intp)


class TestProjectionGeometry:
    def test_view_rendering_properties(self, criterion_log):
        rng = np.random.default_rng(404)
        pano_w, pano_h = 360, 180
        col_deg = 360.0 / pano_w

        preserved = equivariant = 0
        for i in range(20):
            data = rng.integers(0, 8, size=(pano_h, pano_w)).astype(np.uint8)
            pano = PanoramaRecord(f"p{i}", (0.0, 0.0), SemanticMask(data))
            yaw = float(rng.integers(0, 360))
            view = gnomonic_view(pano, ViewSpec(yaw_deg=yaw, out_w=64, out_h=48))
            if set(np.unique(view.mask.data)) <= set(np.unique(data)):
                preserved += 1
            shift = int(rng.integers(1, pano_w))
            rolled = PanoramaRecord(
                f"p{i}", (0.0, 0.0), SemanticMask(np.roll(data, -shift, axis=1))
            )
            spun = gnomonic_view(
                pano, ViewSpec(yaw_deg=yaw + shift * col_deg, out_w=64, out_h=48)
            )
            still = gnomonic_view(rolled, ViewSpec(yaw_deg=yaw, out_w=64, out_h=48))
            if np.array_equal(spun.mask.data, still.mask.data):
                equivariant += 1

        seen = set()
        for yaw in view_yaws(12):
            spec = ViewSpec(yaw_deg=yaw, fov_deg=90.0, out_w=160, out_h=120)
            seen.update(sampled_columns(pano_w, pano_h, spec).ravel().tolist())
        covered = len(seen & set(range(pano_w)))

        # out 160x120 puts the two central rays within half a source column
        # of the optical axis, so this checks the mapping, not the grid
        worst_center = 0.0
        for yaw in rng.uniform(0.0, 360.0, size=20):
            spec = ViewSpec(yaw_deg=float(yaw), out_w=160, out_h=120)
            cols = sampled_columns(pano_w, pano_h, spec)
            for c in cols[60, 79:81]:
                err = abs((c + 0.5) * col_deg - yaw)
                worst_center = max(worst_center, min(err, 360.0 - err))

        record(
            criterion_log, 4, "perspective rendering geometry",
            preserved == 20 and equivariant == 20 and covered == pano_w
            and worst_center < col_deg,
            f"classes preserved {preserved}/20, column-roll equivariance "
            f"{equivariant}/20 (exact), 12x90deg views cover {covered}/"
            f"{pano_w} columns, center-column error max {worst_center:.2f} "
            f"< {col_deg:.2f}deg",
        )


# ---------------------------------------------------------------------------
# Criterion 5 — zero fusion weight reproduces the RGB ranking


class TestFusionBaseline:
    def test_zero_weight_reproduces_rgb_ranking(self, criterion_log, bench, bench_scores):
        dataset, _ = bench
        results = rerank_all(
            dataset.queries, bench_scores, dataset, make_pixel_scorer(), weight=0.0
        )
        mismatched = 0
        for query in dataset.queries:
            pool = set(candidate_pool(query.id, bench_scores, dataset))
            rgb_order = [
                view_id
                for view_id, _ in bench_scores.top(query.id, len(dataset.views))
                if view_id in pool
            ]
            if results[query.id].ranked_ids() != rgb_order:
                mismatched += 1
        record(
            criterion_log, 5, "W=0 fusion falls back to the RGB ranking",
            mismatched == 0,
            f"{len(dataset.queries)} queries on the 50-scene benchmark, "
            f"{mismatched} orderings differ from the pool-restricted RGB "
            f"ranking (exact comparison)",
        )


# ---------------------------------------------------------------------------
# Criterion 6 — an ideal semantic scorer recovers corrupted retrievals


class TestOracleFusionGain:
    def test_fusion_recovers_demoted_queries(
        self, criterion_log, bench, bench_scores, bench_index
    ):
        dataset, truth = bench
        base = rerank_all(
            dataset.queries, bench_scores, dataset, zero_scorer, weight=0.0
        )
        fused = rerank_all(
            dataset.queries, bench_scores, dataset,
            make_oracle_scorer(truth), weight=0.25,
        )
        r_base = recall_at_n(base, bench_index, 1, 5.0)
        r_fused = recall_at_n(fused, bench_index, 1, 5.0)
        gain = r_fused - r_base
        record(
            criterion_log, 6, "ideal scorer at W=0.25 lifts Recall@1",
            gain >= 0.10,
            f"RGB scores corrupted at rate 0.2: R@1 {r_base:.3f} -> "
            f"{r_fused:.3f}, gain {gain:+.3f} (needs >= +0.10)",
        )


# ---------------------------------------------------------------------------
# Criteria 7 and 8 — one pinned training run, measured two ways


@pytest.fixture(scope="module")
def pinned_training(bench):
    """Two identical training runs on the benchmark's first 200 view masks."""
    dataset, _ = bench
    masks = [view.mask for view in dataset.views[:200]]
    config = TrainConfig(seed=7)
    started = time.perf_counter()
    model, history = train(masks, config)
    wall = time.perf_counter() - started
    _, repeat_history = train(masks, config)
    return {
        "model": model,
        "config": config,
        "history": history,
        "repeat_history": repeat_history,
        "wall": wall,
    }


class TestLearnedEmbedding:
    def test_separates_views_and_helps_recall(
        self, criterion_log, pinned_training, bench, bench_scores, bench_index
    ):
        dataset, _ = bench
        model = pinned_training["model"]
        config = pinned_training["config"]

        # held-out masks: views 200..249 never entered training
        rng = np.random.default_rng(99)
        pairs = [
            make_pair(view.mask, config.augment, rng)
            for view in dataset.views[200:250]
        ]
        true_sims = [embed_similarity(model, a, b) for a, b in pairs]
        mismatched = [
            embed_similarity(model, pairs[i][0], pairs[(i + 1) % len(pairs)][1])
            for i in range(len(pairs))
        ]
        gap = float(np.mean(true_sims) - np.mean(mismatched))

        base = rerank_all(
            dataset.queries, bench_scores, dataset, zero_scorer, weight=0.0
        )
        learned = rerank_all(
            dataset.queries, bench_scores, dataset,
            make_embed_scorer(model), weight=0.25,
        )
        r_base = recall_at_n(base, bench_index, 1, 5.0)
        r_learned = recall_at_n(learned, bench_index, 1, 5.0)
        wall = pinned_training["wall"]
        record(
            criterion_log, 7, "learned embedding separates held-out views",
            gap >= 0.1 and r_learned >= r_base and wall < 300.0,
            f"held-out cosine gap {gap:.4f} (needs >= 0.10), R@1 learned "
            f"{r_learned:.3f} >= rgb-only {r_base:.3f}, 200 masks x "
            f"{config.epochs} epochs in {wall:.1f}s (budget 300s)",
        )

    def test_loss_falls_and_runs_repeat(self, criterion_log, pinned_training):
        history = pinned_training["history"]
        repeat = pinned_training["repeat_history"]
        record(
            criterion_log, 8, "training converges deterministically",
            history[-1] < history[0] and history == repeat,
            f"epoch-mean loss {history[0]:.6f} -> {history[-1]:.6f} over "
            f"{len(history)} epochs, repeat same-seed run bit-identical: "
            f"{history == repeat}",
        )


# ---------------------------------------------------------------------------
# Criterion 9 — evaluation reports are monotone and saturate


class TestEvaluationReports:
    def test_recall_monotone_and_saturating(
        self, criterion_log, bench, bench_scores, bench_index
    ):
        dataset, truth = bench
        base = rerank_all(
            dataset.queries, bench_scores, dataset, zero_scorer, weight=0.0
        )
        fused = rerank_all(
            dataset.queries, bench_scores, dataset,
            make_oracle_scorer(truth), weight=0.25,
         )
        report = EvalReport.build(
            {"rgb-only": base, "oracle-fused": fused},
            bench_index,
            n_values=(1, 2, 3, 5, 10),
            thresholds_m=(2.5, 5.0, 25.0),
        )

        by_n = {}
        by_threshold = {}
        for row in report.rows:
            by_n.setdefault((row.method, row.threshold_m), []).append(
                (row.n, row.recall)
            )
            by_threshold.setdefault((row.method, row.n), []).append(
                (row.threshold_m, row.recall)
            )
        n_monotone = all(
            a[1] <= b[1]
            for rows in by_n.values()
            for a, b in zip(sorted(rows), sorted(rows)[1:])
        )
        t_monotone = all(
            a[1] <= b[1]
            for rows in by_threshold.values()
            for a, b in zip(sorted(rows), sorted(rows)[1:])
        )

        shrinking = EvalReport()
        shrinking.rows.append(ReportRow("m", 1, 5.0, 0.9))
        shrinking.rows.append(ReportRow("m", 2, 5.0, 0.5))
        try:
            shrinking.validate()
            rejects_bad = False
        except ValueError:
            rejects_bad = True

        diameter = bench_index.diameter()
        curve = threshold_curve(
            base, bench_index, [1.0, 5.0, 25.0, 100.0, diameter + 1.0]
        )
        recalls = [recall for _, recall in curve]
        saturates = recalls[-1] == 1.0 and all(
            a <= b for a, b in zip(recalls, recalls[1:])
        )
        record(
            criterion_log, 9, "reports monotone, curve saturates",
            n_monotone and t_monotone and rejects_bad and saturates,
            f"{len(report.rows)} rows monotone in N ({n_monotone}) and "
            f"threshold ({t_monotone}), shrinking report rejected "
            f"({rejects_bad}), threshold curve hits {recalls[-1]:.3f} beyond "
            f"the {diameter:.1f}m dataset diameter",
        )


# ---------------------------------------------------------------------------
# Criterion 10 — parameter sweeps are complete and reproducible


class TestParameterSweeps:
    def test_sweeps_complete_and_deterministic(
        self, criterion_log, bench, bench_scores
    ):
        dataset, truth = bench
        task = RetrievalTask.from_dataset(dataset, bench_scores)

        grid = (0.0, *DEFAULT_W_GRID)
        oracle = make_oracle_scorer(truth)
        weights = sweep_w(task, oracle, grid)
        weights_again = sweep_w(task, oracle, grid)
        w_complete = tuple(row.param for row in weights.rows) == grid
        w_deterministic = weights == weights_again
        baseline = weights.recall_at(0.0, 1)
        best = max(weights.recall_at(w, 1) for w in grid[1:])

        light = TrainConfig(
            batch_n=8, epochs=2, seed=3,
            augment=AugmentConfig(out_w=40, out_h=32, seed=3),
        )
        masks = [view.mask for view in dataset.views[:64]]
        crops = sweep_crop_ratio(task, masks, light, DEFAULT_CROP_GRID)
        crops_again = sweep_crop_ratio(task, masks, light, DEFAULT_CROP_GRID)
        c_complete = tuple(row.param for row in crops.rows) == DEFAULT_CROP_GRID
        c_deterministic = crops == crops_again

        record(
            criterion_log, 10, "parameter sweeps complete and reproducible",
            w_complete and w_deterministic and best >= baseline
            and c_complete and c_deterministic,
            f"W grid {len(grid)} rows (complete {w_complete}, repeat "
            f"identical {w_deterministic}, best R@1 {best:.3f} >= W=0 "
            f"{baseline:.3f}), crop grid {len(DEFAULT_CROP_GRID)} rows "
            f"(complete {c_complete}, repeat identical {c_deterministic})",
        )
