"""Detection and image-quality evaluation.

Boxes are (x_min, y_min, w, h) in pixels throughout. Detections passed in
are any objects exposing ``.box`` and ``.score``; ground truths are plain
4-sequences. Single-class only.
"""

import json
import math
from collections import namedtuple
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np
from scipy import ndimage

__all__ = [
    "iou",
    "match_detections",
    "MatchResult",
    "penalized_mean_iou",
    "average_precision",
    "uiqm",
    "UiqmScore",
    "evaluate",
    "EvalReport",
    "CategoryResult",
]


def iou(box_a: Sequence[float], box_b: Sequence[float]) -> float:
    """Intersection over union of two (x_min, y_min, w, h) boxes.

    Returns 0.0 for disjoint boxes and, by convention, for a degenerate
    zero-area union.
    """
    ax, ay, aw, ah = (float(v) for v in box_a)
    bx, by, bw, bh = (float(v) for v in box_b)
    if aw < 0 or ah < 0 or bw < 0 or bh < 0:
        raise ValueError(f"box widths/heights must be >= 0, got {box_a} and {box_b}")
    ix = max(0.0, min(ax + aw, bx + bw) - max(ax, bx))
    iy = max(0.0, min(ay + ah, by + bh) - max(ay, by))
    inter = ix * iy
    union = aw * ah + bw * bh - inter
    if union <= 0.0:
        return 0.0
    return min(1.0, inter / union)


def _det_sort_key(det):
    return (-float(det.score), tuple(float(v) for v in det.box))


@dataclass
class MatchResult:
    """Greedy detection/ground-truth assignment for one image.

    pairs holds (detection, gt_box, iou) triples; every detection and every
    ground truth appears in at most one pair.
    """

    pairs: list = field(default_factory=list)
    unmatched_detections: list = field(default_factory=list)
    unmatched_ground_truths: list = field(default_factory=list)


def match_detections(detections, ground_truths, iou_gate: float = 0.5) -> MatchResult:
    """Match detections to ground truths greedily in descending-score order.

    Each detection claims the still-unclaimed ground truth of highest IoU,
    provided that IoU >= iou_gate (ties on score break by box coordinates,
    ties on IoU by ground-truth index).
    """
    order = sorted(detections, key=_det_sort_key)
    claimed = [False] * len(ground_truths)
    result = MatchResult()
    for det in order:
        best_j = -1
        best_iou = -1.0
        for j, gt in enumerate(ground_truths):
            if claimed[j]:
                continue
            v = iou(det.box, gt)
            if v > best_iou:
                best_iou = v
                best_j = j
        if best_j >= 0 and best_iou >= iou_gate:
            claimed[best_j] = True
            result.pairs.append((det, ground_truths[best_j], best_iou))
        else:
            result.unmatched_detections.append(det)
    result.unmatched_ground_truths = [
        gt for j, gt in enumerate(ground_truths) if not claimed[j]
    ]
    return result


def penalized_mean_iou(results: Sequence[MatchResult]) -> float:
    """Dataset mean of per-image IoU with zero-valued penalty entries.

    Per image: (sum of matched IoUs) / (pairs + unmatched detections +
    unmatched ground truths); an image with nothing at all counts as 0.
    Returned as a percentage.
    """
    values = []
    for r in results:
        n = len(r.pairs) + len(r.unmatched_detections) + len(r.unmatched_ground_truths)
        if n == 0:
            values.append(0.0)
        else:
            values.append(sum(p[2] for p in r.pairs) / n)
    if not values:
        return 0.0
    return 100.0 * float(np.mean(values))


def average_precision(
    detections_by_image: Mapping,
    ground_truths_by_image: Mapping,
    iou_gate: float = 0.5,
) -> Optional[float]:
    """Single-class AP (%) over detections pooled across the dataset.

    Detections are ranked by score (deterministic tie-break on image id and
    box); a detection is a true positive if it claims a previously unclaimed
    ground truth of its image at IoU >= iou_gate. The PR curve is integrated
    with all-point interpolation. Returns None when there are no ground
    truths (AP undefined).
    """
    total_gt = sum(len(v) for v in ground_truths_by_image.values())
    if total_gt == 0:
        return None

    pool = []
    for image_id, dets in detections_by_image.items():
        for det in dets:
            pool.append((image_id, det))
    pool.sort(key=lambda rec: (-float(rec[1].score), str(rec[0])) + _det_sort_key(rec[1]))

    claimed = {img: [False] * len(gts) for img, gts in ground_truths_by_image.items()}
    tp = np.zeros(len(pool))
    for k, (image_id, det) in enumerate(pool):
        gts = ground_truths_by_image.get(image_id, [])
        flags = claimed.get(image_id, [])
        best_j = -1
        best_iou = -1.0
        for j, gt in enumerate(gts):
            if flags[j]:
                continue
            v = iou(det.box, gt)
            if v > best_iou:
                best_iou = v
                best_j = j
        if best_j >= 0 and best_iou >= iou_gate:
            flags[best_j] = True
            tp[k] = 1.0

    acc_tp = np.cumsum(tp)
    acc_fp = np.cumsum(1.0 - tp)
    recall = acc_tp / total_gt
    precision = acc_tp / np.maximum(acc_tp + acc_fp, 1e-12)

    # all-point interpolation: integrate recall steps against the running
    # maximum of precision to the right
    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    for i in range(len(mpre) - 1, 0, -1):
        mpre[i - 1] = max(mpre[i - 1], mpre[i])
    idx = np.where(mrec[1:] != mrec[:-1])[0] + 1
    ap = float(np.sum((mrec[idx] - mrec[idx - 1]) * mpre[idx]))
    return 100.0 * ap


# ---------------------------------------------------------------------------
# UIQM: weighted sum of colourfulness (UICM), sharpness (UISM) and contrast
# (UIConM) components, computed on 0..255-scaled RGB.
# ---------------------------------------------------------------------------

UiqmScore = namedtuple("UiqmScore", ["uiqm", "uicm", "uism", "uiconm"])

UIQM_C1 = 0.0282
UIQM_C2 = 0.2953
UIQM_C3 = 3.5753


def _trimmed_mean(x: np.ndarray, alpha_l: float = 0.1, alpha_r: float = 0.1) -> float:
    # asymmetric alpha-trimmed mean: drop ceil(aL*K) low and floor(aR*K) high
    x = np.sort(x, axis=None)
    k = x.size
    t_l = math.ceil(alpha_l * k)
    t_r = math.floor(alpha_r * k)
    kept = x[t_l : k - t_r]
    if kept.size == 0:
        return 0.0
    return float(kept.mean())


def _uicm(img: np.ndarray) -> float:
    r = img[:, :, 0].astype(np.float64)
    g = img[:, :, 1].astype(np.float64)
    b = img[:, :, 2].astype(np.float64)
    rg = (r - g).ravel()
    yb = ((r + g) / 2.0 - b).ravel()
    mu_rg = _trimmed_mean(rg)
    mu_yb = _trimmed_mean(yb)
    var_rg = float(np.mean((rg - mu_rg) ** 2))
    var_yb = float(np.mean((yb - mu_yb) ** 2))
    return -0.0268 * math.hypot(mu_rg, mu_yb) + 0.1586 * math.sqrt(var_rg + var_yb)


def _blocks(x: np.ndarray, size: int):
    k2 = x.shape[0] // size
    k1 = x.shape[1] // size
    if k1 == 0 or k2 == 0:
        raise ValueError(f"image {x.shape} smaller than block size {size}")
    x = x[: k2 * size, : k1 * size]
    if x.ndim == 2:
        view = x.reshape(k2, size, k1, size)
        axes = (1, 3)
    else:
        view = x.reshape(k2, size, k1, size, x.shape[2])
        axes = (1, 3, 4)
    return view, axes, k1, k2


def _eme(channel: np.ndarray, block_size: int) -> float:
    # enhancement measure: 2/(k1*k2) * sum log(blockmax/blockmin), blocks
    # touching zero are skipped
    view, axes, k1, k2 = _blocks(channel, block_size)
    bmax = view.max(axis=axes)
    bmin = view.min(axis=axes)
    valid = (bmax > 0.0) & (bmin > 0.0)
    total = float(np.sum(np.log(bmax[valid] / bmin[valid])))
    return 2.0 / (k1 * k2) * total


def _sobel_edge_map(channel: np.ndarray) -> np.ndarray:
    dx = ndimage.sobel(channel, axis=0)
    dy = ndimage.sobel(channel, axis=1)
    mag = np.hypot(dx, dy)
    peak = mag.max()
    if peak > 0:
        mag = mag * (255.0 / peak)
    return mag


def _uism(img: np.ndarray, block_size: int) -> float:
    weights = (0.299, 0.587, 0.144)
    total = 0.0
    for c, w in enumerate(weights):
        channel = img[:, :, c].astype(np.float64)
        edge_weighted = _sobel_edge_map(channel) * channel
        total += w * _eme(edge_weighted, block_size)
    return total


def _uiconm(img: np.ndarray, block_size: int) -> float:
    # logarithmic block contrast (logAMEE): -1/(k1*k2) * sum (t/b)*log(t/b)
    # with t = max-min, b = max+min over all channels of the block
    view, axes, k1, k2 = _blocks(img.astype(np.float64), block_size)
    bmax = view.max(axis=axes)
    bmin = view.min(axis=axes)
    top = bmax - bmin
    bot = bmax + bmin
    valid = np.isfinite(top) & np.isfinite(bot) & (bot != 0.0) & (top != 0.0)
    ratio = top[valid] / bot[valid]
    total = float(np.sum(ratio * np.log(ratio)))
    return -1.0 / (k1 * k2) * total


def uiqm(image: np.ndarray, block_size: int = 8) -> UiqmScore:
    """Underwater image quality measure of an H x W x 3 image in [0, 1].

    Returns the composite together with its colourfulness, sharpness and
    contrast components. A constant image scores exactly 0 colourfulness
    and 0 sharpness.
    """
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected an HxWx3 image, got shape {image.shape}")
    img = image.astype(np.float64) * 255.0
    uicm = _uicm(img)
    uism = _uism(img, block_size)
    uiconm = _uiconm(img, block_size)
    composite = UIQM_C1 * uicm + UIQM_C2 * uism + UIQM_C3 * uiconm
    return UiqmScore(composite, uicm, uism, uiconm)


# ---------------------------------------------------------------------------
# Report generation over dataset categories
# ---------------------------------------------------------------------------


@dataclass
class CategoryResult:
    images: int
    detections: int
    matches: int
    ap: Optional[float]
    mean_iou: float
    uiqm_mean: float
    uiqm_sd: float


@dataclass
class EvalReport:
    """Per-category detection accuracy (AP %, penalized mean IoU %) and
    UIQM statistics. Categories absent from the input get no row."""

    model_name: str
    score_threshold: float
    iou_gate: float
    categories: "dict[str, CategoryResult]" = field(default_factory=dict)

    def render_table(self) -> str:
        header = (
            f"model: {self.model_name}  "
            f"(score threshold {self.score_threshold:.2f}, IoU gate {self.iou_gate:.2f})"
        )
        cols = f"{'category':<18} {'images':>7} {'dets':>6} {'match':>6} {'AP(%)':>8} {'IoU(%)':>8} {'UIQM':>14}"
        lines = [header, cols, "-" * len(cols)]
        for name, r in self.categories.items():
            ap = f"{r.ap:8.2f}" if r.ap is not None else f"{'absent':>8}"
            lines.append(
                f"{name:<18} {r.images:>7d} {r.detections:>6d} {r.matches:>6d} "
                f"{ap} {r.mean_iou:8.2f} {r.uiqm_mean:6.2f} +/- {r.uiqm_sd:4.2f}"
            )
        return "\n".join(lines) + "\n"

    def to_records(self) -> dict:
        cats = {}
        for name, r in self.categories.items():
            cats[name] = {
                "images": r.images,
                "detections": r.detections,
                "matches": r.matches,
                "ap": None if r.ap is None else round(r.ap, 6),
                "mean_iou": round(r.mean_iou, 6),
                "uiqm_mean": round(r.uiqm_mean, 6),
                "uiqm_sd": round(r.uiqm_sd, 6),
            }
        return {
            "model": self.model_name,
            "score_threshold": self.score_threshold,
            "iou_gate": self.iou_gate,
            "categories": cats,
        }

    def write(self, out_dir) -> None:
        from pathlib import Path

        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.txt").write_text(self.render_table())
        (out / "report.json").write_text(
            json.dumps(self.to_records(), indent=2, sort_keys=True) + "\n"
        )


def evaluate(
    enhance,
    detector,
    categorized,
    score_threshold: float = 0.55,
    iou_gate: float = 0.5,
    model_name: str = "identity",
) -> EvalReport:
    """Run the detector over (optionally enhanced) category test sets.

    enhance is a callable mapping an H x W x 3 image in [0, 1] to another,
    or None for the pass-through baseline. categorized maps category name
    to a list of samples exposing .image_id, .image and .boxes.
    """
    report = EvalReport(model_name=model_name, score_threshold=score_threshold, iou_gate=iou_gate)
    for name, items in categorized.items():
        if not items:
            continue
        dets_by_image = {}
        gts_by_image = {}
        overlap_matches = []
        gate_matches = 0
        n_dets = 0
        uiqms = []
        for item in items:
            img = item.image if enhance is None else enhance(item.image)
            dets = detector.detect_all(img, score_threshold)
            dets_by_image[item.image_id] = dets
            gts_by_image[item.image_id] = list(item.boxes)
            overlap_matches.append(match_detections(dets, item.boxes, iou_gate=0.0))
            gate_matches += len(match_detections(dets, item.boxes, iou_gate=iou_gate).pairs)
            n_dets += len(dets)
            uiqms.append(uiqm(img).uiqm)
        report.categories[name] = CategoryResult(
            images=len(items),
            detections=n_dets,
            matches=gate_matches,
            ap=average_precision(dets_by_image, gts_by_image, iou_gate),
            mean_iou=penalized_mean_iou(overlap_matches),
            uiqm_mean=float(np.mean(uiqms)),
            uiqm_sd=float(np.std(uiqms)),
        )
    return report
