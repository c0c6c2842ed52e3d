"""Pluggable single-class detector ports.

The enhancement pipeline only ever talks to a DetectorPort, so the
detector backing it can be swapped: ToyDetector is a small trainable
anchor-free model (center heat map + box regression) that makes the whole
pipeline runnable offline; FrozenGraphAdapter wraps an externally trained
model exported as a TorchScript inference graph. Ports are frozen during
enhancement training; checksum() makes that checkable.
"""

import csv
import hashlib
import math
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import cv2
import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigurationError
from .evalkit import iou

DEFAULT_LABEL = "target"


@dataclass
class Detection:
    """One detected object: (x_min, y_min, w, h) box in pixels of the
    queried image, confidence score in [0, 1], and class label."""

    box: Tuple[float, float, float, float]
    score: float
    label: str = DEFAULT_LABEL


def clip_box(box, width: float, height: float) -> Tuple[float, float, float, float]:
    """Clip an (x, y, w, h) box to image bounds; w, h stay >= 0."""
    x, y, w, h = (float(v) for v in box)
    x0 = min(max(x, 0.0), width)
    y0 = min(max(y, 0.0), height)
    x1 = min(max(x + w, 0.0), width)
    y1 = min(max(y + h, 0.0), height)
    return (x0, y0, max(0.0, x1 - x0), max(0.0, y1 - y0))


def nms(detections: List[Detection], iou_threshold: float = 0.5) -> List[Detection]:
    """Greedy non-maximum suppression; keeps descending-score order with
    ties broken by box coordinates."""
    pending = sorted(detections, key=lambda d: (-d.score, d.box))
    kept: List[Detection] = []
    for det in pending:
        if all(iou(det.box, k.box) <= iou_threshold for k in kept):
            kept.append(det)
    return kept


class DetectorPort:
    """Interface the enhancement pipeline consumes.

    detect() returns every detection with score >= threshold, sorted by
    descending score (ties by box coordinates, lexicographically).
    """

    name = "detector"
    input_size = 128
    classes = (DEFAULT_LABEL,)
    is_differentiable = False

    def detect(self, image: np.ndarray, score_threshold: float) -> List[Detection]:
        raise NotImplementedError

    def detect_top1(self, image: np.ndarray, score_threshold: float = 0.01) -> Optional[Detection]:
        """The single highest-score detection above threshold, or None."""
        dets = self.detect(image, score_threshold)
        return dets[0] if dets else None

    def detect_all(self, image: np.ndarray, score_threshold: float = 0.55) -> List[Detection]:
        """Every detection above threshold, descending score."""
        return self.detect(image, score_threshold)

    def checksum(self) -> str:
        raise NotImplementedError


def _validate_image(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected an HxWx3 image, got shape {image.shape}")
    return image.astype(np.float32)


def _module_checksum(module: nn.Module) -> str:
    digest = hashlib.sha256()
    state = module.state_dict()
    for name in sorted(state):
        digest.update(name.encode())
        digest.update(state[name].detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()


class ToyDetectorNet(nn.Module):
    """Stride-4 convolutional backbone with a center heat-map head and a
    box head emitting (offset_x, offset_y, w, h), all sigmoid-bounded."""

    def __init__(self, channels: int = 64):
        super().__init__()
        c = channels

        def conv(ci, co, stride=1, dilation=1):
            return [
                nn.Conv2d(ci, co, 3, stride=stride, padding=dilation, dilation=dilation),
                nn.BatchNorm2d(co),
                nn.ReLU(inplace=True),
            ]

        self.backbone = nn.Sequential(
            *conv(3, c // 4, stride=2),
            *conv(c // 4, c // 2, stride=2),
            *conv(c // 2, c),
            *conv(c, c, dilation=2),
            *conv(c, c, dilation=4),
        )
        self.heat_head = nn.Sequential(
            nn.Conv2d(c, c // 2, 3, padding=1), nn.ReLU(inplace=True), nn.Conv2d(c // 2, 1, 1)
        )
        self.box_head = nn.Sequential(
            nn.Conv2d(c, c // 2, 3, padding=1), nn.ReLU(inplace=True), nn.Conv2d(c // 2, 4, 1)
        )
        # bias the confidence prior to ~0.01 so images without targets
        # score below the training threshold
        nn.init.constant_(self.heat_head[-1].bias, -4.6)

    def forward(self, x):
        feats = self.backbone(x)
        return torch.sigmoid(self.heat_head(feats)), torch.sigmoid(self.box_head(feats))


def _local_maxima(heat: torch.Tensor) -> torch.Tensor:
    pooled = F.max_pool2d(heat, kernel_size=3, stride=1, padding=1)
    return heat == pooled


class ToyDetector(DetectorPort):
    """Trainable reference detector over 128x128 inputs, output stride 4.

    Train with train_toy_detector(); afterwards the port is frozen and
    detect()/top1_batch() never mutate parameters.
    """

    stride = 4
    is_differentiable = True

    def __init__(self, net: ToyDetectorNet = None, input_size: int = 128,
                 label: str = DEFAULT_LABEL):
        self.net = net if net is not None else ToyDetectorNet()
        self.input_size = int(input_size)
        self.label = label
        self.name = "toy-center-detector"
        self.classes = (label,)
        self.frozen = False

    def freeze(self) -> "ToyDetector":
        self.net.eval()
        for p in self.net.parameters():
            p.requires_grad_(False)
        self.frozen = True
        return self

    def checksum(self) -> str:
        return _module_checksum(self.net)

    def _decode_cells(self, heat, boxes, threshold):
        # cells that are 3x3 local maxima and clear the threshold
        keep = _local_maxima(heat) & (heat >= threshold)
        return keep

    def detect(self, image: np.ndarray, score_threshold: float) -> List[Detection]:
        image = _validate_image(image)
        height, width = image.shape[:2]
        s = self.input_size
        resized = image
        if (height, width) != (s, s):
            resized = cv2.resize(image, (s, s), interpolation=cv2.INTER_AREA)
        x = torch.from_numpy(resized.transpose(2, 0, 1))[None]
        was_training = self.net.training
        self.net.eval()
        with torch.no_grad():
            heat, boxes = self.net(x)
        if was_training and not self.frozen:
            self.net.train()
        keep = self._decode_cells(heat, boxes, score_threshold)[0, 0]
        ii, jj = torch.nonzero(keep, as_tuple=True)
        dets: List[Detection] = []
        scale_x = width / s
        scale_y = height / s
        for i, j in zip(ii.tolist(), jj.tolist()):
            score = float(heat[0, 0, i, j])
            ox, oy, bw, bh = (float(v) for v in boxes[0, :, i, j])
            cx = (j + ox) * self.stride * scale_x
            cy = (i + oy) * self.stride * scale_y
            w = bw * s * scale_x
            h = bh * s * scale_y
            box = clip_box((cx - w / 2.0, cy - h / 2.0, w, h), width, height)
            dets.append(Detection(box=box, score=score, label=self.label))
        return nms(dets, iou_threshold=0.5)

    def top1_batch(self, images: torch.Tensor, score_threshold: float = 0.01):
        """Differentiable top-1 decode for a (B, 3, S, S) batch in [0, 1].

        Returns (boxes, scores, found): boxes are (x_min, y_min, w, h)
        normalized to [0, 1], with gradients flowing back into the input
        images; rows with found=False hold constant zeros. Parameters stay
        frozen; only the input carries gradients.
        """
        if images.ndim != 4 or images.shape[1] != 3 \
                or images.shape[2] != self.input_size or images.shape[3] != self.input_size:
            raise ValueError(
                f"expected (B, 3, {self.input_size}, {self.input_size}) batch, "
                f"got {tuple(images.shape)}"
            )
        heat, boxes = self.net(images)
        with torch.no_grad():
            keep = self._decode_cells(heat, boxes, score_threshold)
            masked = torch.where(keep, heat, torch.zeros_like(heat))
            flat = masked.flatten(1)
            best = flat.argmax(dim=1)
            found = flat.gather(1, best[:, None])[:, 0] > 0
        n_cells = heat.shape[3]
        cell_i = (best // n_cells).long()
        cell_j = (best % n_cells).long()
        batch_idx = torch.arange(images.shape[0], device=images.device)
        scores = heat[batch_idx, 0, cell_i, cell_j]
        picked = boxes[batch_idx, :, cell_i, cell_j]
        grid = self.input_size / self.stride
        cx = (cell_j.to(picked.dtype) + picked[:, 0]) / grid
        cy = (cell_i.to(picked.dtype) + picked[:, 1]) / grid
        w = picked[:, 2]
        h = picked[:, 3]
        out = torch.stack((cx - w / 2.0, cy - h / 2.0, w, h), dim=1).clamp(0.0, 1.0)
        zero = torch.zeros_like(out)
        out = torch.where(found[:, None], out, zero)
        scores = torch.where(found, scores, torch.zeros_like(scores))
        return out, scores, found

    def save(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save(
            {
                "state": self.net.state_dict(),
                "meta": {"input_size": self.input_size, "label": self.label},
            },
            path,
        )


def load_toy_detector(path) -> ToyDetector:
    path = Path(path)
    if not path.is_file():
        raise ConfigurationError(f"detector weights not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    meta = payload.get("meta", {})
    det = ToyDetector(input_size=meta.get("input_size", 128), label=meta.get("label", DEFAULT_LABEL))
    det.net.load_state_dict(payload["state"])
    return det.freeze()


def _heat_targets(samples, input_size: int, stride: int, device):
    """Build splatted heat maps and per-center box targets."""
    n_cells = input_size // stride
    n = len(samples)
    heat = torch.zeros((n, 1, n_cells, n_cells), device=device)
    box_t = torch.zeros((n, 4, n_cells, n_cells), device=device)
    pos = torch.zeros((n, 1, n_cells, n_cells), device=device, dtype=torch.bool)
    for b, sample in enumerate(samples):
        height, width = sample.image.shape[:2]
        for (x, y, w, h) in sample.boxes:
            # map the annotation into detector input coordinates
            sx = input_size / width
            sy = input_size / height
            cx = (x + w / 2.0) * sx / stride
            cy = (y + h / 2.0) * sy / stride
            j = min(n_cells - 1, max(0, int(cx)))
            i = min(n_cells - 1, max(0, int(cy)))
            sigma = max(0.7, math.sqrt((w * sx) * (h * sy)) / stride / 6.0)
            ii = torch.arange(n_cells, device=device, dtype=torch.float32)
            gy = torch.exp(-((ii - cy) ** 2) / (2 * sigma**2))[:, None]
            gx = torch.exp(-((ii - cx) ** 2) / (2 * sigma**2))[None, :]
            heat[b, 0] = torch.maximum(heat[b, 0], gy * gx)
            heat[b, 0, i, j] = 1.0
            pos[b, 0, i, j] = True
            box_t[b, 0, i, j] = cx - j
            box_t[b, 1, i, j] = cy - i
            box_t[b, 2, i, j] = w * sx / input_size
            box_t[b, 3, i, j] = h * sy / input_size
    return heat, box_t, pos


def _detection_losses(pred_heat, pred_box, heat_t, box_t, pos):
    eps = 1e-6
    p = pred_heat.clamp(eps, 1 - eps)
    n_pos = pos.sum().clamp(min=1).float()
    pos_loss = -(((1 - p) ** 2) * torch.log(p))[pos].sum()
    neg_weight = (1 - heat_t[~pos]) ** 4
    neg_loss = -(neg_weight * (p[~pos] ** 2) * torch.log(1 - p[~pos])).sum()
    heat_loss = (pos_loss + neg_loss) / n_pos
    mask = pos.expand_as(pred_box)
    box_loss = (pred_box[mask] - box_t[mask]).abs().sum() / n_pos
    return heat_loss, box_loss


def train_toy_detector(
    corpus: Sequence,
    epochs: int = 20,
    seed: int = 0,
    batch_size: int = 16,
    lr: float = 1e-3,
    min_images: int = 200,
    device: str = "cpu",
) -> ToyDetector:
    """Train and freeze a ToyDetector on an annotated corpus.

    corpus items expose .image (HxWx3 in [0, 1]) and .boxes (pixel
    (x, y, w, h) tuples). Deterministic under a fixed seed.
    """
    if len(corpus) < min_images:
        raise ConfigurationError(
            f"toy detector needs at least {min_images} annotated images, got {len(corpus)}"
        )
    if any(len(s.boxes) == 0 for s in corpus):
        raise ConfigurationError("every corpus image needs at least one box annotation")
    torch.manual_seed(seed)
    det = ToyDetector()
    det.net.to(device).train()
    s = det.input_size

    resized = []
    for sample in corpus:
        img = _validate_image(sample.image)
        if img.shape[:2] != (s, s):
            img = cv2.resize(img, (s, s), interpolation=cv2.INTER_AREA)
        resized.append(img.transpose(2, 0, 1))
    images = torch.from_numpy(np.stack(resized)).to(device)
    heat_t, box_t, pos = _heat_targets(corpus, s, det.stride, device)

    opt = torch.optim.Adam(det.net.parameters(), lr=lr)
    n = len(corpus)
    for epoch in range(epochs):
        order = np.random.default_rng(seed * 100003 + epoch).permutation(n)
        for start in range(0, n, batch_size):
            idx = torch.from_numpy(order[start : start + batch_size].copy()).long()
            pred_heat, pred_box = det.net(images[idx])
            heat_loss, box_loss = _detection_losses(
                pred_heat, pred_box, heat_t[idx], box_t[idx], pos[idx]
            )
            loss = heat_loss + 2.0 * box_loss
            opt.zero_grad()
            loss.backward()
            opt.step()
    return det.freeze()


class FrozenGraphAdapter(DetectorPort):
    """Adapter around an externally trained detector exported as a
    TorchScript graph.

    The graph maps a (B, 3, S, S) float batch in [0, 1] to a tuple
    (boxes, scores): boxes (B, N, 4) as normalized (y_min, x_min, y_max,
    x_max) corners, scores (B, N) in [0, 1]. Outputs are mapped to pixel
    (x_min, y_min, w, h) detections of the queried image. Not
    differentiable; parameters are frozen at load.
    """

    is_differentiable = False

    def __init__(self, graph_path, class_map_path=None, input_size: int = 128,
                 name: str = "frozen-graph"):
        graph_path = Path(graph_path)
        if not graph_path.is_file():
            raise ConfigurationError(f"frozen detector graph not found: {graph_path}")
        try:
            self.graph = torch.jit.load(str(graph_path), map_location="cpu")
        except Exception as exc:
            raise ConfigurationError(f"cannot load detector graph {graph_path}: {exc}") from exc
        self.graph.eval()
        for p in self.graph.parameters():
            p.requires_grad_(False)
        self.label = DEFAULT_LABEL
        if class_map_path is not None:
            import json

            class_map_path = Path(class_map_path)
            if not class_map_path.is_file():
                raise ConfigurationError(f"class map not found: {class_map_path}")
            mapping = json.loads(class_map_path.read_text())
            if mapping:
                self.label = sorted(mapping.values())[0]
        self.input_size = int(input_size)
        self.name = name
        self.classes = (self.label,)

    def checksum(self) -> str:
        digest = hashlib.sha256()
        state = self.graph.state_dict()
        for key in sorted(state):
            digest.update(key.encode())
            digest.update(state[key].detach().cpu().contiguous().numpy().tobytes())
        return digest.hexdigest()

    def detect(self, image: np.ndarray, score_threshold: float) -> List[Detection]:
        image = _validate_image(image)
        height, width = image.shape[:2]
        s = self.input_size
        resized = image
        if (height, width) != (s, s):
            resized = cv2.resize(image, (s, s), interpolation=cv2.INTER_AREA)
        x = torch.from_numpy(resized.transpose(2, 0, 1))[None]
        with torch.no_grad():
            boxes, scores = self.graph(x)
        dets = []
        for corners, score in zip(boxes[0].tolist(), scores[0].tolist()):
            if score < score_threshold:
                continue
            y_min, x_min, y_max, x_max = corners
            box = clip_box(
                (x_min * width, y_min * height, (x_max - x_min) * width, (y_max - y_min) * height),
                width,
                height,
            )
            dets.append(Detection(box=box, score=float(score), label=self.label))
        return sorted(dets, key=lambda d: (-d.score, d.box))


# ---------------------------------------------------------------------------
# Detections text export: one record per detection,
# image_id,label,score,x_min,y_min,w,h
# ---------------------------------------------------------------------------


def export_detections(path, records) -> None:
    """Write (image_id, Detection) pairs as line-oriented text."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        for image_id, det in records:
            x, y, w, h = det.box
            writer.writerow([image_id, det.label, f"{det.score:.6f}",
                             f"{x:.2f}", f"{y:.2f}", f"{w:.2f}", f"{h:.2f}"])


def read_detections(path):
    """Read records written by export_detections."""
    rows = []
    with Path(path).open(newline="") as fh:
        for rec in csv.reader(fh):
            image_id, label, score, x, y, w, h = rec
            rows.append(
                (image_id, Detection(box=(float(x), float(y), float(w), float(h)),
                                     score=float(score), label=label))
            )
    return rows
