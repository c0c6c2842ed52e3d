"""Paired-corpus construction.

Provides a seeded synthetic world (cool textured backgrounds with warm
high-contrast targets), detector-score filtering of clean images, a
parametric degradation pipeline standing in for a learned distortion
model (channel attenuation -> haze blend -> Gaussian blur -> additive
noise), and manifest-driven regeneration so any corpus can be rebuilt
bit-exactly from its seeds.
"""

import csv
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import cv2
import numpy as np
import yaml

from .detector import DEFAULT_LABEL, DetectorPort
from .evalkit import iou, match_detections

MANIFEST_NAME = "manifest"
ANNOTATIONS_NAME = "annotations.csv"


@dataclass
class WorldSample:
    """A clean annotated image: HxWx3 float32 in [0, 1] plus pixel
    (x_min, y_min, w, h) boxes, one per planted target."""

    image_id: str
    image: np.ndarray
    boxes: List[Tuple[float, float, float, float]]
    label: str = DEFAULT_LABEL


@dataclass
class PairedSample:
    """Supervised training pair: distorted input, clean target, and the
    ground-truth annotation shared by both."""

    image_id: str
    distorted: np.ndarray
    target: np.ndarray
    boxes: List[Tuple[float, float, float, float]]
    label: str = DEFAULT_LABEL
    seed: int = 0


class DatasetCategory(str, Enum):
    SD_DETECTED = "SD-Detected"
    SD_UNDETECTED = "SD-Undetected"
    MD_ALL_DETECTED = "MD-AllDetected"
    MD_SOME_DETECTED = "MD-SomeDetected"


# ---------------------------------------------------------------------------
# Synthetic world
# ---------------------------------------------------------------------------


def _render_background(rng, size: int) -> np.ndarray:
    low = rng.uniform([0.02, 0.12, 0.2], [0.15, 0.35, 0.45]).astype(np.float32)
    high = rng.uniform([0.1, 0.3, 0.4], [0.3, 0.55, 0.7]).astype(np.float32)
    t = np.linspace(0.0, 1.0, size, dtype=np.float32)[:, None, None]
    base = (1.0 - t) * low + t * high
    coarse = rng.uniform(-0.07, 0.07, size=(8, 8, 3)).astype(np.float32)
    texture = cv2.resize(coarse, (size, size), interpolation=cv2.INTER_CUBIC)
    return np.clip(base + texture, 0.0, 1.0)


def _place_target(rng, image: np.ndarray, occupied, size: int):
    """Draw one warm elliptical target; returns its bounding box or None
    if no non-overlapping placement was found."""
    for _ in range(60):
        w = float(rng.uniform(0.12, 0.3) * size)
        h = float(rng.uniform(0.12, 0.3) * size)
        x = float(rng.uniform(2.0, size - w - 2.0))
        y = float(rng.uniform(2.0, size - h - 2.0))
        box = (x, y, w, h)
        if all(iou(box, other) == 0.0 for other in occupied):
            break
    else:
        return None
    color = rng.uniform([0.75, 0.3, 0.05], [1.0, 0.55, 0.25]).astype(np.float32)
    core_scale = float(rng.uniform(0.45, 0.7))

    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32)
    cx, cy = x + w / 2.0, y + h / 2.0
    d = ((xx - cx) / (w / 2.0)) ** 2 + ((yy - cy) / (h / 2.0)) ** 2
    body = np.clip((1.0 - d) / 0.12, 0.0, 1.0)[:, :, None]
    core = np.clip((0.35 - d) / 0.12, 0.0, 1.0)[:, :, None]
    shaded = color * (1.0 - core) + color * core_scale * core
    image[:] = image * (1.0 - body) + shaded * body
    return box


def synthesize_world(
    count: int,
    seed: int,
    size: int = 256,
    targets_per_image=1,
    label: str = DEFAULT_LABEL,
    id_prefix: str = "img",
) -> List[WorldSample]:
    """Generate a seeded corpus of clean annotated images.

    targets_per_image is an int or an inclusive (low, high) range; every
    image is fully determined by (seed, index).
    """
    if count < 0:
        raise ValueError(f"count must be >= 0, got {count}")
    if isinstance(targets_per_image, int):
        lo = hi = targets_per_image
    else:
        lo, hi = targets_per_image
    if lo < 1:
        raise ValueError("every image needs at least one target")
    samples = []
    for idx in range(count):
        rng = np.random.default_rng([seed, idx])
        image = _render_background(rng, size)
        n_targets = int(rng.integers(lo, hi + 1))
        boxes = []
        for _ in range(n_targets):
            box = _place_target(rng, image, boxes, size)
            if box is not None:
                boxes.append(box)
        samples.append(
            WorldSample(image_id=f"{id_prefix}{idx:05d}", image=image, boxes=boxes, label=label)
        )
    return samples


# ---------------------------------------------------------------------------
# Parametric degradation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DegradationParams:
    """Degradation recipe for one image; fully determined by seed when
    drawn via sample()."""

    gains: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    haze_weight: float = 0.0
    haze_color: Tuple[float, float, float] = (0.2, 0.45, 0.55)
    blur_radius: int = 0
    noise_std: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if any(not (0.0 <= g <= 1.0) for g in self.gains):
            raise ValueError(f"channel gains must lie in [0, 1], got {self.gains}")
        if not (0.0 <= self.haze_weight <= 1.0):
            raise ValueError(f"haze weight must lie in [0, 1], got {self.haze_weight}")
        if any(not (0.0 <= c <= 1.0) for c in self.haze_color):
            raise ValueError(f"haze color must lie in [0, 1]^3, got {self.haze_color}")
        if self.blur_radius < 0 or int(self.blur_radius) != self.blur_radius:
            raise ValueError(f"blur radius must be a non-negative integer, got {self.blur_radius}")
        if not (0.0 <= self.noise_std <= 0.25):
            raise ValueError(f"noise standard deviation must lie in [0, 0.25], got {self.noise_std}")

    @classmethod
    def identity(cls) -> "DegradationParams":
        return cls()

    @classmethod
    def sample(cls, seed: int) -> "DegradationParams":
        rng = np.random.default_rng(seed)
        return cls(
            gains=(
                float(rng.uniform(0.15, 0.5)),
                float(rng.uniform(0.45, 0.8)),
                float(rng.uniform(0.55, 0.9)),
            ),
            haze_weight=float(rng.uniform(0.25, 0.55)),
            haze_color=(
                float(rng.uniform(0.1, 0.25)),
                float(rng.uniform(0.35, 0.55)),
                float(rng.uniform(0.45, 0.65)),
            ),
            blur_radius=int(rng.integers(0, 3)),
            noise_std=float(rng.uniform(0.01, 0.04)),
            seed=int(seed),
        )


def distort(image: np.ndarray, params: DegradationParams) -> np.ndarray:
    """Degrade a [0, 1] image: attenuate channels, blend haze, blur, add
    seeded Gaussian noise. Shape-preserving, clipped back to [0, 1], and
    bit-deterministic given params."""
    image = np.asarray(image, dtype=np.float32)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected an HxWx3 image, got shape {image.shape}")
    out = image * np.asarray(params.gains, dtype=np.float32)
    if params.haze_weight > 0.0:
        haze = np.asarray(params.haze_color, dtype=np.float32)
        out = (1.0 - np.float32(params.haze_weight)) * out + np.float32(params.haze_weight) * haze
    if params.blur_radius > 0:
        k = 2 * int(params.blur_radius) + 1
        out = cv2.GaussianBlur(out, (k, k), sigmaX=0.75 * params.blur_radius)
    if params.noise_std > 0.0:
        rng = np.random.default_rng([params.seed, 0x0D15])
        out = out + rng.normal(0.0, params.noise_std, size=out.shape).astype(np.float32)
    return np.clip(out, 0.0, 1.0)


# ---------------------------------------------------------------------------
# Filtering and corpus building
# ---------------------------------------------------------------------------


@dataclass
class FilterResult:
    accepted: List[WorldSample]
    dropped: List[WorldSample]
    warnings: List[str] = field(default_factory=list)

    @property
    def kept(self) -> int:
        return len(self.accepted)


def filter_by_detection(
    samples: Sequence[WorldSample],
    detector: DetectorPort,
    threshold: float = 0.55,
) -> FilterResult:
    """Keep images whose top detection at the threshold overlaps the
    ground truth (any positive IoU). Unannotated images are skipped with
    a warning record."""
    result = FilterResult(accepted=[], dropped=[])
    for sample in samples:
        if not sample.boxes:
            result.warnings.append(f"{sample.image_id}: no annotation, skipped")
            continue
        det = detector.detect_top1(sample.image, threshold)
        if det is not None and max(iou(det.box, gt) for gt in sample.boxes) > 0.0:
            result.accepted.append(sample)
        else:
            result.dropped.append(sample)
    return result


def _item_seed(master_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([master_seed, index]).generate_state(1)[0])


def build_paired_corpus(
    clean: Sequence[WorldSample], seed: int
) -> Tuple[List[PairedSample], dict]:
    """Distort every clean single-annotation image with per-image sampled
    degradation parameters; returns the pairs and a manifest carrying the
    seeds needed for exact regeneration."""
    pairs = []
    items = []
    for idx, sample in enumerate(clean):
        if len(sample.boxes) != 1:
            raise ValueError(
                f"{sample.image_id}: paired corpus needs exactly one annotation per image, "
                f"got {len(sample.boxes)}"
            )
        item_seed = _item_seed(seed, idx)
        params = DegradationParams.sample(item_seed)
        pairs.append(
            PairedSample(
                image_id=sample.image_id,
                distorted=distort(sample.image, params),
                target=sample.image,
                boxes=list(sample.boxes),
                label=sample.label,
                seed=item_seed,
            )
        )
        items.append({"image_id": sample.image_id, "seed": item_seed})
    manifest = {"version": 1, "master_seed": int(seed), "items": items}
    return pairs, manifest


def regenerate_pairs(clean: Sequence[WorldSample], manifest: dict) -> List[PairedSample]:
    """Rebuild the exact pairs of build_paired_corpus from its manifest."""
    by_id = {s.image_id: s for s in clean}
    pairs = []
    for item in manifest["items"]:
        sample = by_id.get(item["image_id"])
        if sample is None:
            raise ValueError(f"manifest references unknown image {item['image_id']}")
        params = DegradationParams.sample(item["seed"])
        pairs.append(
            PairedSample(
                image_id=sample.image_id,
                distorted=distort(sample.image, params),
                target=sample.image,
                boxes=list(sample.boxes),
                label=sample.label,
                seed=item["seed"],
            )
        )
    return pairs


# ---------------------------------------------------------------------------
# Test-set categorization
# ---------------------------------------------------------------------------


def categorize_test_set(
    samples: Sequence[WorldSample],
    detector: DetectorPort,
    threshold: float = 0.55,
    iou_gate: float = 0.5,
):
    """Partition annotated images into the four dataset categories by
    annotation count and by how many ground truths the detector matches
    at the threshold."""
    categories = {cat: [] for cat in DatasetCategory}
    for sample in samples:
        if not sample.boxes:
            raise ValueError(f"{sample.image_id}: categorization needs annotations")
        dets = detector.detect_all(sample.image, threshold)
        matched = len(match_detections(dets, sample.boxes, iou_gate=iou_gate).pairs)
        if len(sample.boxes) == 1:
            cat = DatasetCategory.SD_DETECTED if matched == 1 else DatasetCategory.SD_UNDETECTED
        else:
            cat = (
                DatasetCategory.MD_ALL_DETECTED
                if matched == len(sample.boxes)
                else DatasetCategory.MD_SOME_DETECTED
            )
        categories[cat].append(sample)
    return categories


# ---------------------------------------------------------------------------
# On-disk corpus layout: images/ (lossless PNG), annotations/, manifest
# ---------------------------------------------------------------------------


def _to_uint8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)


def _from_uint8(raw: np.ndarray) -> np.ndarray:
    return raw.astype(np.float32) / 255.0


def write_image(path, image: np.ndarray) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    ok = cv2.imwrite(str(path), cv2.cvtColor(_to_uint8(image), cv2.COLOR_RGB2BGR))
    if not ok:
        raise OSError(f"failed to write image {path}")


def read_image(path) -> np.ndarray:
    raw = cv2.imread(str(path), cv2.IMREAD_COLOR)
    if raw is None:
        raise OSError(f"failed to read image {path}")
    return _from_uint8(cv2.cvtColor(raw, cv2.COLOR_BGR2RGB))


def write_corpus(pairs: Sequence[PairedSample], manifest: dict, out_dir) -> Path:
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "annotations").mkdir(parents=True, exist_ok=True)
    rows = []
    for pair in pairs:
        write_image(out / "images" / f"{pair.image_id}.target.png", pair.target)
        write_image(out / "images" / f"{pair.image_id}.distorted.png", pair.distorted)
        for (x, y, w, h) in pair.boxes:
            rows.append([pair.image_id, pair.label, f"{x:.2f}", f"{y:.2f}", f"{w:.2f}", f"{h:.2f}"])
    with (out / "annotations" / ANNOTATIONS_NAME).open("w", newline="") as fh:
        csv.writer(fh).writerows(rows)
    with (out / MANIFEST_NAME).open("w") as fh:
        yaml.safe_dump(manifest, fh, sort_keys=True)
    return out


def read_manifest(corpus_dir) -> dict:
    path = Path(corpus_dir) / MANIFEST_NAME
    if not path.is_file():
        raise OSError(f"no manifest under {corpus_dir}")
    with path.open() as fh:
        return yaml.safe_load(fh)


def load_corpus(corpus_dir) -> List[PairedSample]:
    """Load a corpus written by write_corpus."""
    root = Path(corpus_dir)
    manifest = read_manifest(root)
    boxes_by_id = {}
    labels_by_id = {}
    with (root / "annotations" / ANNOTATIONS_NAME).open(newline="") as fh:
        for image_id, label, x, y, w, h in csv.reader(fh):
            boxes_by_id.setdefault(image_id, []).append(
                (float(x), float(y), float(w), float(h))
            )
            labels_by_id[image_id] = label
    pairs = []
    for item in manifest["items"]:
        image_id = item["image_id"]
        pairs.append(
            PairedSample(
                image_id=image_id,
                distorted=read_image(root / "images" / f"{image_id}.distorted.png"),
                target=read_image(root / "images" / f"{image_id}.target.png"),
                boxes=boxes_by_id.get(image_id, []),
                label=labels_by_id.get(image_id, DEFAULT_LABEL),
                seed=item["seed"],
            )
        )
    return pairs


def distorted_samples(pairs: Sequence[PairedSample]) -> List[WorldSample]:
    """View of the distorted side of a paired corpus as annotated samples
    (the form the evaluation instruments consume)."""
    return [
        WorldSample(image_id=p.image_id, image=p.distorted, boxes=list(p.boxes), label=p.label)
        for p in pairs
    ]


def enhanced_samples(pairs: Sequence[PairedSample], enhance) -> List[WorldSample]:
    """Distorted side of a corpus run through an enhancement callable."""
    return [
        replace(s, image=enhance(s.image)) for s in distorted_samples(pairs)
    ]
