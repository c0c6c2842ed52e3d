"""Shared fixtures.

The frozen reference detector is expensive to train (about 90 s), so it is
session-scoped and optionally cached on disk under tests/.cache; delete
that directory to force a from-scratch run.
"""

import os
from pathlib import Path

import numpy as np
import pytest

from detgan import datapipe
from detgan.detector import load_toy_detector, train_toy_detector

CACHE_DIR = Path(__file__).parent / ".cache"

DETECTOR_WORLD_SEED = 101
DETECTOR_WORLD_SIZE = 256
DETECTOR_TRAIN_IMAGES = 500
DETECTOR_EPOCHS = 20
DETECTOR_SEED = 0


@pytest.fixture(scope="session")
def detector_world():
    return datapipe.synthesize_world(
        DETECTOR_TRAIN_IMAGES, DETECTOR_WORLD_SEED, size=DETECTOR_WORLD_SIZE
    )


@pytest.fixture(scope="session")
def held_out_world():
    return datapipe.synthesize_world(100, 115, size=DETECTOR_WORLD_SIZE)


@pytest.fixture(scope="session")
def frozen_detector(detector_world):
    """The pipeline's frozen reference detector."""
    cache = CACHE_DIR / (
        f"detector_s{DETECTOR_SEED}_w{DETECTOR_WORLD_SEED}"
        f"_n{DETECTOR_TRAIN_IMAGES}_e{DETECTOR_EPOCHS}.pt"
    )
    if cache.is_file() and not os.environ.get("DETGAN_TEST_NO_CACHE"):
        return load_toy_detector(cache)
    det = train_toy_detector(detector_world, epochs=DETECTOR_EPOCHS, seed=DETECTOR_SEED)
    cache.parent.mkdir(parents=True, exist_ok=True)
    det.save(cache)
    return det


class BlobStubDetector:
    """Deterministic stand-in port that 'detects' warm elliptical targets
    by color thresholding; used where a trained model would only slow the
    test down."""

    name = "blob-stub"
    input_size = 128
    classes = ("target",)
    is_differentiable = False

    def __init__(self, score: float = 0.9):
        self.score = score

    def detect(self, image, score_threshold):
        import cv2

        from detgan.detector import Detection, nms

        if self.score < score_threshold:
            return []
        image = np.asarray(image, dtype=np.float32)
        warm = (image[:, :, 0] > 0.55) & (image[:, :, 0] > image[:, :, 2] + 0.15)
        mask = warm.astype(np.uint8)
        n, labels = cv2.connectedComponents(mask)
        dets = []
        for k in range(1, n):
            ys, xs = np.nonzero(labels == k)
            if len(xs) < 20:
                continue
            x0, x1 = float(xs.min()), float(xs.max())
            y0, y1 = float(ys.min()), float(ys.max())
            dets.append(
                Detection(box=(x0, y0, x1 - x0 + 1.0, y1 - y0 + 1.0), score=self.score)
            )
        return nms(dets, 0.5)

    def detect_top1(self, image, score_threshold=0.01):
        dets = self.detect(image, score_threshold)
        return dets[0] if dets else None

    def detect_all(self, image, score_threshold=0.55):
        return self.detect(image, score_threshold)

    def checksum(self):
        return f"blob-stub-{self.score}"


@pytest.fixture
def stub_detector():
    return BlobStubDetector()
