"""Metric oracle suite: IoU vs pixel counting, AP vs enumerated PR curves,
penalized mean IoU vs a second independent implementation, and the UIQM
reference semantics."""

import math
from collections import namedtuple

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from detgan.evalkit import (
    EvalReport,
    MatchResult,
    average_precision,
    evaluate,
    iou,
    match_detections,
    penalized_mean_iou,
    uiqm,
)

Det = namedtuple("Det", ["box", "score"])
RNG = np.random.default_rng(77)


# ---------------------------------------------------------------------------
# IoU
# ---------------------------------------------------------------------------


def grid_iou(box_a, box_b, size=64):
    """Pixel-grid counting oracle for integer boxes."""
    grid_a = np.zeros((size, size), dtype=bool)
    grid_b = np.zeros((size, size), dtype=bool)
    xa, ya, wa, ha = (int(v) for v in box_a)
    xb, yb, wb, hb = (int(v) for v in box_b)
    grid_a[ya : ya + ha, xa : xa + wa] = True
    grid_b[yb : yb + hb, xb : xb + wb] = True
    union = np.logical_or(grid_a, grid_b).sum()
    if union == 0:
        return 0.0
    return np.logical_and(grid_a, grid_b).sum() / union


def test_iou_fixtures():
    assert iou((3, 4, 10, 12), (3, 4, 10, 12)) == 1.0
    assert iou((0, 0, 2, 2), (10, 10, 2, 2)) == 0.0
    # hand value plus grid-count confirmation: intersection 1, union 7
    assert iou((0, 0, 2, 2), (1, 1, 2, 2)) == pytest.approx(1.0 / 7.0, abs=1e-12)
    assert grid_iou((0, 0, 2, 2), (1, 1, 2, 2)) == pytest.approx(1.0 / 7.0, abs=1e-12)


def test_iou_degenerate_union_is_zero():
    assert iou((5, 5, 0, 0), (5, 5, 0, 0)) == 0.0


def test_iou_rejects_negative_extent():
    with pytest.raises(ValueError):
        iou((0, 0, -1, 2), (0, 0, 2, 2))


def test_iou_matches_pixel_grid_oracle_on_1000_random_boxes():
    for _ in range(1000):
        a = (RNG.integers(0, 40), RNG.integers(0, 40), RNG.integers(0, 24), RNG.integers(0, 24))
        b = (RNG.integers(0, 40), RNG.integers(0, 40), RNG.integers(0, 24), RNG.integers(0, 24))
        assert iou(a, b) == pytest.approx(grid_iou(a, b), abs=1e-6)


@given(
    st.tuples(st.floats(0, 50), st.floats(0, 50), st.floats(0, 30), st.floats(0, 30)),
    st.tuples(st.floats(0, 50), st.floats(0, 50), st.floats(0, 30), st.floats(0, 30)),
)
@settings(max_examples=100, deadline=None)
def test_iou_symmetric_and_bounded(a, b):
    v = iou(a, b)
    assert 0.0 <= v <= 1.0
    assert v == iou(b, a)


# ---------------------------------------------------------------------------
# matching
# ---------------------------------------------------------------------------


def test_match_singleton():
    dets = [Det((0, 0, 10, 10), 0.9)]
    gts = [(1, 1, 10, 10)]
    result = match_detections(dets, gts)
    assert len(result.pairs) == 1
    assert result.pairs[0][2] > 0.5
    assert not result.unmatched_detections and not result.unmatched_ground_truths


def test_match_two_dets_one_gt_exclusive():
    dets = [Det((0, 0, 10, 10), 0.9), Det((1, 1, 10, 10), 0.8)]
    gts = [(0, 0, 10, 10)]
    result = match_detections(dets, gts)
    assert len(result.pairs) == 1
    assert result.pairs[0][0].score == 0.9
    assert len(result.unmatched_detections) == 1


def oracle_greedy_match(dets, gts, gate):
    """Independent greedy matcher used to cross-check pairing."""
    taken = set()
    pairs = []
    for det in sorted(dets, key=lambda d: (-d.score, d.box)):
        candidates = [(iou(det.box, g), j) for j, g in enumerate(gts) if j not in taken]
        candidates = [(v, j) for v, j in candidates if v >= gate]
        if not candidates:
            continue
        best = max(candidates, key=lambda c: (c[0], -c[1]))
        taken.add(best[1])
        pairs.append((det, best[1], best[0]))
    return pairs


def test_match_agrees_with_independent_greedy_walker():
    for _ in range(200):
        n_det = int(RNG.integers(0, 5))
        n_gt = int(RNG.integers(0, 5))
        dets = [
            Det(tuple(RNG.uniform(0, 20, 2)) + tuple(RNG.uniform(1, 15, 2)),
                float(RNG.uniform(0, 1)))
            for _ in range(n_det)
        ]
        gts = [tuple(RNG.uniform(0, 20, 2)) + tuple(RNG.uniform(1, 15, 2)) for _ in range(n_gt)]
        got = match_detections(dets, gts, iou_gate=0.3)
        expected = oracle_greedy_match(dets, gts, 0.3)
        assert [(p[0], p[2]) for p in got.pairs] == [(p[0], p[2]) for p in expected]
        assert len(got.pairs) + len(got.unmatched_detections) == n_det
        gt_in_pairs = {id(p[1]) for p in got.pairs}
        assert len(gt_in_pairs) == len(got.pairs)  # each gt claimed at most once


# ---------------------------------------------------------------------------
# penalized mean IoU
# ---------------------------------------------------------------------------


def oracle_penalized_mean_iou(per_image):
    """Independent per-image loop: (dets, gts) pairs -> percent."""
    values = []
    for dets, gts in per_image:
        taken = set()
        total = 0.0
        matched = 0
        for det in sorted(dets, key=lambda d: (-d.score, d.box)):
            best_v, best_j = -1.0, None
            for j, g in enumerate(gts):
                if j in taken:
                    continue
                v = iou(det.box, g)
                if v > best_v:
                    best_v, best_j = v, j
            if best_j is not None and best_v >= 0.0:
                taken.add(best_j)
                total += best_v
                matched += 1
        entries = matched + (len(dets) - matched) + (len(gts) - matched)
        values.append(0.0 if entries == 0 else total / entries)
    return 100.0 * (sum(values) / len(values)) if values else 0.0


def test_penalized_mean_iou_all_perfect():
    box = (2, 2, 8, 8)
    results = [match_detections([Det(box, 0.9)], [box], iou_gate=0.0) for _ in range(5)]
    assert penalized_mean_iou(results) == pytest.approx(100.0, abs=1e-12)


def test_penalized_mean_iou_extra_detection_halves():
    gt = (0.0, 0.0, 10.0, 10.0)
    hit = Det((0.0, 2.5, 10.0, 10.0), 0.9)  # IoU 0.6 with gt
    stray = Det((40.0, 40.0, 5.0, 5.0), 0.8)
    assert iou(hit.box, gt) == pytest.approx(0.6)
    result = match_detections([hit, stray], [gt], iou_gate=0.0)
    assert penalized_mean_iou([result]) == pytest.approx(30.0, abs=1e-9)


def test_penalized_mean_iou_empty_image_counts_as_zero():
    empty = match_detections([], [], iou_gate=0.0)
    full = match_detections([Det((0, 0, 4, 4), 0.9)], [(0, 0, 4, 4)], iou_gate=0.0)
    assert penalized_mean_iou([empty, full]) == pytest.approx(50.0, abs=1e-9)


def test_penalized_mean_iou_matches_dual_implementation():
    for _ in range(100):
        corpus = []
        for _ in range(int(RNG.integers(1, 6))):
            dets = [
                Det(tuple(RNG.uniform(0, 20, 2)) + tuple(RNG.uniform(1, 12, 2)),
                    float(RNG.uniform(0, 1)))
                for _ in range(int(RNG.integers(0, 4)))
            ]
            gts = [tuple(RNG.uniform(0, 20, 2)) + tuple(RNG.uniform(1, 12, 2))
                   for _ in range(int(RNG.integers(0, 4)))]
            corpus.append((dets, gts))
        got = penalized_mean_iou(
            [match_detections(d, g, iou_gate=0.0) for d, g in corpus]
        )
        assert got == pytest.approx(oracle_penalized_mean_iou(corpus), abs=1e-9)


def test_penalized_mean_iou_non_increasing_under_spurious_detections():
    gts = [(2.0, 2.0, 8.0, 8.0), (20.0, 20.0, 6.0, 6.0)]
    dets = [Det((2.0, 3.0, 8.0, 8.0), 0.9), Det((20.0, 21.0, 6.0, 6.0), 0.8)]
    base = penalized_mean_iou([match_detections(dets, gts, iou_gate=0.0)])
    for k in (1, 2, 3):
        spurious = dets + [Det((50.0 + 10 * i, 50.0, 4.0, 4.0), 0.7) for i in range(k)]
        value = penalized_mean_iou([match_detections(spurious, gts, iou_gate=0.0)])
        assert value <= base + 1e-12
        base = value


# ---------------------------------------------------------------------------
# average precision
# ---------------------------------------------------------------------------


def oracle_ap(dets_by_image, gts_by_image, gate):
    """Independent AP: explicit ranking, claiming, and rightward-max PR
    integration over every recall level."""
    pool = []
    for img, dets in dets_by_image.items():
        for d in dets:
            pool.append((img, d))
    pool.sort(key=lambda r: (-r[1].score, str(r[0]), tuple(r[1].box)))
    total_gt = sum(len(g) for g in gts_by_image.values())
    taken = {img: set() for img in gts_by_image}
    flags = []
    for img, det in pool:
        gts = gts_by_image.get(img, [])
        scored = [
            (iou(det.box, g), j) for j, g in enumerate(gts) if j not in taken.get(img, set())
        ]
        scored = [s for s in scored if s[0] >= gate]
        if scored:
            best = max(scored, key=lambda s: (s[0], -s[1]))
            taken[img].add(best[1])
            flags.append(1)
        else:
            flags.append(0)
    precisions, recalls = [], []
    tp = 0
    for k, flag in enumerate(flags, start=1):
        tp += flag
        precisions.append(tp / k)
        recalls.append(tp / total_gt)
    ap = 0.0
    prev_recall = 0.0
    for k, r in enumerate(recalls):
        if r > prev_recall:
            best_right = max(precisions[k:])
            ap += (r - prev_recall) * best_right
            prev_recall = r
    return 100.0 * ap


def test_ap_single_perfect_detection():
    dets = {"a": [Det((0, 0, 10, 10), 0.9)]}
    gts = {"a": [(0, 0, 10, 10)]}
    assert average_precision(dets, gts) == pytest.approx(100.0, abs=1e-9)


def test_ap_hand_enumerated_fixture():
    # scores 0.9 (TP), 0.8 (FP), 0.7 (TP) over 2 ground truths -> 83.33
    gts = {"a": [(0, 0, 10, 10)], "b": [(0, 0, 10, 10)]}
    dets = {
        "a": [Det((0, 0, 10, 10), 0.9), Det((30, 30, 5, 5), 0.8)],
        "b": [Det((0, 1, 10, 10), 0.7)],
    }
    expected = (1.0 + 2.0 / 3.0) / 2.0 * 100.0
    assert average_precision(dets, gts) == pytest.approx(expected, abs=1e-9)
    assert average_precision(dets, gts) == pytest.approx(oracle_ap(dets, gts, 0.5), abs=1e-9)


def test_ap_zero_ground_truths_is_absent():
    assert average_precision({"a": [Det((0, 0, 1, 1), 0.5)]}, {"a": []}) is None


def test_ap_matches_enumeration_oracle_on_constructed_minidatasets():
    for trial in range(25):
        rng = np.random.default_rng(1000 + trial)
        dets_by_image, gts_by_image = {}, {}
        for i in range(int(rng.integers(1, 5))):
            img = f"img{i}"
            gts_by_image[img] = [
                tuple(rng.uniform(0, 30, 2)) + tuple(rng.uniform(2, 15, 2))
                for _ in range(int(rng.integers(0, 4)))
            ]
            dets = []
            for g in gts_by_image[img]:
                if rng.uniform() < 0.7:  # near-hit around the gt
                    jitter = rng.uniform(-2, 2, 2)
                    dets.append(Det((g[0] + jitter[0], g[1] + jitter[1], g[2], g[3]),
                                    float(rng.uniform(0.2, 1.0))))
            for _ in range(int(rng.integers(0, 3))):  # strays
                dets.append(Det(tuple(rng.uniform(0, 40, 2)) + tuple(rng.uniform(2, 10, 2)),
                                float(rng.uniform(0.0, 1.0))))
            dets_by_image[img] = dets
        if sum(len(g) for g in gts_by_image.values()) == 0:
            continue
        got = average_precision(dets_by_image, gts_by_image)
        assert got == pytest.approx(oracle_ap(dets_by_image, gts_by_image, 0.5), abs=1e-9)


def test_ap_invariant_to_input_order_and_monotone_score_transform():
    rng = np.random.default_rng(5)
    gts = {"a": [(0, 0, 10, 10), (20, 20, 8, 8)], "b": [(5, 5, 12, 12)]}
    dets = {
        "a": [Det((1, 0, 10, 10), 0.66), Det((19, 21, 8, 8), 0.41), Det((40, 0, 5, 5), 0.9)],
        "b": [Det((5, 6, 12, 12), 0.52), Det((0, 0, 3, 3), 0.13)],
    }
    base = average_precision(dets, gts)
    shuffled = {k: [v[i] for i in rng.permutation(len(v))] for k, v in dets.items()}
    assert average_precision(shuffled, gts) == pytest.approx(base, abs=1e-12)
    squashed = {
        k: [Det(d.box, 1.0 / (1.0 + math.exp(-7.0 * d.score))) for d in v]
        for k, v in dets.items()
    }
    assert average_precision(squashed, gts) == pytest.approx(base, abs=1e-12)


# ---------------------------------------------------------------------------
# UIQM
# ---------------------------------------------------------------------------


def oracle_uiqm(image, block_size=8):
    """Literal loop port of the reference metric on 0..255 RGB floats."""
    x = np.asarray(image, dtype=np.float64) * 255.0

    def mu_alpha(vals, a_l=0.1, a_r=0.1):
        vals = sorted(vals)
        k = len(vals)
        t_l = math.ceil(a_l * k)
        t_r = math.floor(a_r * k)
        total = 0.0
        for v in vals[t_l : k - t_r]:
            total += v
        return total / (k - t_l - t_r)

    def variance_about(vals, mu):
        return sum((v - mu) ** 2 for v in vals) / len(vals)

    r, g, b = x[:, :, 0].ravel(), x[:, :, 1].ravel(), x[:, :, 2].ravel()
    rg = [rv - gv for rv, gv in zip(r, g)]
    yb = [(rv + gv) / 2 - bv for rv, gv, bv in zip(r, g, b)]
    mu_rg, mu_yb = mu_alpha(rg), mu_alpha(yb)
    uicm = -0.0268 * math.sqrt(mu_rg**2 + mu_yb**2) + 0.1586 * math.sqrt(
        variance_about(rg, mu_rg) + variance_about(yb, mu_yb)
    )

    from scipy import ndimage

    def eme(ch):
        k2, k1 = ch.shape[0] // block_size, ch.shape[1] // block_size
        total = 0.0
        for bi in range(k2):
            for bj in range(k1):
                block = ch[bi * block_size : (bi + 1) * block_size,
                           bj * block_size : (bj + 1) * block_size]
                mx, mn = block.max(), block.min()
                if mx > 0 and mn > 0:
                    total += math.log(mx / mn)
        return 2.0 / (k1 * k2) * total

    uism = 0.0
    for c, w in ((0, 0.299), (1, 0.587), (2, 0.144)):
        ch = x[:, :, c]
        mag = np.hypot(ndimage.sobel(ch, axis=0), ndimage.sobel(ch, axis=1))
        if mag.max() > 0:
            mag = mag * 255.0 / mag.max()
        uism += w * eme(mag * ch)

    k2, k1 = x.shape[0] // block_size, x.shape[1] // block_size
    total = 0.0
    for bi in range(k2):
        for bj in range(k1):
            block = x[bi * block_size : (bi + 1) * block_size,
                      bj * block_size : (bj + 1) * block_size, :]
            top = block.max() - block.min()
            bot = block.max() + block.min()
            if bot != 0 and top != 0 and not (math.isnan(top) or math.isnan(bot)):
                total += (top / bot) * math.log(top / bot)
    uiconm = -total / (k1 * k2)

    return 0.0282 * uicm + 0.2953 * uism + 3.5753 * uiconm, uicm, uism, uiconm


def test_uiqm_constant_image_degeneracies():
    for level in (0.0, 0.5, 1.0):
        score = uiqm(np.full((64, 64, 3), level, dtype=np.float32))
        assert score.uicm == 0.0
        assert score.uism == 0.0


def test_uiqm_composite_is_linear_combination():
    rng = np.random.default_rng(3)
    img = rng.uniform(0, 1, size=(64, 64, 3)).astype(np.float32)
    s = uiqm(img)
    assert s.uiqm == pytest.approx(
        0.0282 * s.uicm + 0.2953 * s.uism + 3.5753 * s.uiconm, abs=1e-12
    )


def test_uiqm_rejects_non_three_channel():
    with pytest.raises(ValueError):
        uiqm(np.zeros((32, 32), dtype=np.float32))
    with pytest.raises(ValueError):
        uiqm(np.zeros((32, 32, 4), dtype=np.float32))


def test_uiqm_matches_loop_oracle():
    rng = np.random.default_rng(9)
    for _ in range(5):
        img = rng.uniform(0, 1, size=(32, 32, 3))
        got = uiqm(img)
        exp_uiqm, exp_uicm, exp_uism, exp_uiconm = oracle_uiqm(img)
        assert got.uicm == pytest.approx(exp_uicm, rel=1e-9, abs=1e-9)
        assert got.uism == pytest.approx(exp_uism, rel=1e-9, abs=1e-9)
        assert got.uiconm == pytest.approx(exp_uiconm, rel=1e-9, abs=1e-9)
        assert got.uiqm == pytest.approx(exp_uiqm, rel=1e-9, abs=1e-9)


def test_uiqm_prefers_sharp_colorful_over_hazy():
    rng = np.random.default_rng(21)
    detail = rng.uniform(0, 1, size=(64, 64, 3)).astype(np.float32)
    # hazy: low contrast, gray cast
    hazy = 0.25 * detail + 0.55
    # boosted: contrast stretched and color amplified around the mean
    boosted = np.clip((hazy - hazy.mean()) * 3.5 + hazy.mean(), 0, 1)
    assert uiqm(boosted).uiqm > uiqm(hazy).uiqm


# ---------------------------------------------------------------------------
# evaluate / report
# ---------------------------------------------------------------------------


class _Sample:
    def __init__(self, image_id, image, boxes):
        self.image_id = image_id
        self.image = image
        self.boxes = boxes


class _RectanglePort:
    """Detects the bright rectangle planted in the test images."""

    input_size = 64
    is_differentiable = False

    def detect_all(self, image, score_threshold=0.55):
        from detgan.detector import Detection

        mask = image[:, :, 0] > 0.5
        if not mask.any() or score_threshold > 0.99:
            return []
        ys, xs = np.nonzero(mask)
        box = (float(xs.min()), float(ys.min()),
               float(xs.max() - xs.min() + 1), float(ys.max() - ys.min() + 1))
        return [Detection(box=box, score=0.99)]


def _rect_samples(n=6):
    samples = []
    rng = np.random.default_rng(13)
    for i in range(n):
        img = np.zeros((64, 64, 3), dtype=np.float32) + 0.1
        x, y = int(rng.integers(4, 30)), int(rng.integers(4, 30))
        w, h = int(rng.integers(10, 24)), int(rng.integers(10, 24))
        img[y : y + h, x : x + w, :] = 0.9
        samples.append(_Sample(f"s{i}", img, [(x, y, w, h)]))
    return samples


def test_evaluate_identity_on_oracle_set_gives_ap_100():
    samples = _rect_samples()
    report = evaluate(None, _RectanglePort(), {"SD-Detected": samples})
    row = report.categories["SD-Detected"]
    assert row.ap == pytest.approx(100.0, abs=1e-9)
    assert row.images == len(samples)
    assert row.matches == len(samples)


def test_evaluate_is_deterministic_and_reports_byte_identical(tmp_path):
    samples = _rect_samples()
    port = _RectanglePort()
    r1 = evaluate(None, port, {"SD-Detected": samples})
    r2 = evaluate(None, port, {"SD-Detected": samples})
    d1, d2 = tmp_path / "a", tmp_path / "b"
    r1.write(d1)
    r2.write(d2)
    assert (d1 / "report.txt").read_bytes() == (d2 / "report.txt").read_bytes()
    assert (d1 / "report.json").read_bytes() == (d2 / "report.json").read_bytes()


def test_evaluate_empty_category_row_absent():
    report = evaluate(None, _RectanglePort(), {"SD-Detected": _rect_samples(2), "MD-AllDetected": []})
    assert "MD-AllDetected" not in report.categories
    assert "SD-Detected" in report.categories
