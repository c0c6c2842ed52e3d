"""Objective terms for detector-guided adversarial enhancement.

All operations are pure functions over torch tensors (scalars come back as
0-dim tensors) so they compose into both network updates and analytic
tests. Box coordinates entering smooth_l1 are expected normalized to
[0, 1] by image size; log arguments are clamped at EPS.
"""

from dataclasses import dataclass
from enum import Enum
from typing import Optional, Sequence, Union

import torch
import torch.nn as nn

from .errors import ConfigurationError

EPS = 1e-7

BoxLike = Union[Sequence[float], torch.Tensor]


class AblationMode(str, Enum):
    """Where the detection loss enters the optimization: both networks,
    generator only, discriminator only, or neither."""

    B = "B"
    G = "G"
    D = "D"
    N = "N"

    @property
    def rc_in_generator(self) -> bool:
        return self in (AblationMode.B, AblationMode.G)

    @property
    def rc_in_discriminator(self) -> bool:
        return self in (AblationMode.B, AblationMode.D)


@dataclass
class LossWeights:
    lambda_1: float = 0.7
    lambda_c: float = 0.3

    def __post_init__(self):
        if self.lambda_1 < 0 or self.lambda_c < 0:
            raise ValueError(
                f"loss weights must be non-negative, got {self.lambda_1}, {self.lambda_c}"
            )


@dataclass
class DetectionTarget:
    """One image's detection outcome against its ground truth.

    b_a is the annotated box, b_d the detected box (both (x_min, y_min,
    w, h), normalized), s the detector confidence. found=False means the
    detector returned nothing above threshold; rc_loss then substitutes the
    fixed penalty detection.
    """

    b_a: BoxLike
    b_d: Optional[BoxLike] = None
    s: Optional[Union[float, torch.Tensor]] = None
    found: bool = True


def _as_tensor(x, like: Optional[torch.Tensor] = None) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    dtype = like.dtype if like is not None else torch.get_default_dtype()
    return torch.as_tensor(x, dtype=dtype)


def adversarial_loss(d_real: torch.Tensor, d_fake: torch.Tensor):
    """Conditional adversarial losses from two patch validity maps.

    Returns (loss_D, loss_G) with loss_D = -mean log D_real - mean
    log(1 - D_fake) and the non-saturating generator form loss_G =
    -mean log D_fake. Maps must lie in [0, 1]; cells are clamped away
    from {0, 1} by EPS before the logs.
    """
    d_real = _as_tensor(d_real)
    d_fake = _as_tensor(d_fake, like=d_real)
    for name, m in (("d_real", d_real), ("d_fake", d_fake)):
        if m.min() < 0 or m.max() > 1:
            raise ValueError(f"{name} cells must lie in [0, 1], got range "
                             f"[{float(m.min()):.4g}, {float(m.max()):.4g}]")
    real = d_real.clamp(EPS, 1.0 - EPS)
    fake = d_fake.clamp(EPS, 1.0 - EPS)
    loss_d = -torch.log(real).mean() - torch.log(1.0 - fake).mean()
    loss_g = -torch.log(fake).mean()
    return loss_d, loss_g


def global_similarity_loss(y: torch.Tensor, g: torch.Tensor) -> torch.Tensor:
    """Mean absolute difference between target and generated images."""
    y = _as_tensor(y)
    g = _as_tensor(g, like=y)
    if y.shape != g.shape:
        raise ValueError(f"shape mismatch: {tuple(y.shape)} vs {tuple(g.shape)}")
    return (y - g).abs().mean()


def content_loss(y: torch.Tensor, g: torch.Tensor, phi) -> torch.Tensor:
    """Squared feature-space distance under a fixed extractor phi,
    averaged per feature element (phi = identity reduces this to MSE)."""
    y = _as_tensor(y)
    g = _as_tensor(g, like=y)
    if y.shape != g.shape:
        raise ValueError(f"shape mismatch: {tuple(y.shape)} vs {tuple(g.shape)}")
    fy = phi(y)
    fg = phi(g)
    return (fy - fg).pow(2).mean()


def smooth_l1(b_d: BoxLike, b_a: BoxLike) -> torch.Tensor:
    """Smooth-L1 box regression loss, summed over the 4 components.

    Per component d = b_d - b_a: 0.5*d^2 when |d| < 1, |d| - 0.5 otherwise.
    Boxes are expected in normalized [0, 1] coordinates.
    """
    b_d = _as_tensor(b_d)
    b_a = _as_tensor(b_a, like=b_d)
    if b_d.shape[-1] != 4 or b_a.shape[-1] != 4:
        raise ValueError(f"boxes need 4 components, got {tuple(b_d.shape)}, {tuple(b_a.shape)}")
    d = (b_d - b_a).abs()
    per_component = torch.where(d < 1.0, 0.5 * d * d, d - 0.5)
    return per_component.sum(dim=-1)


def classification_loss(s) -> torch.Tensor:
    """-log s on the detector confidence; s is clamped to [EPS, 1] so a
    zero score yields a large finite value instead of an exception."""
    s = _as_tensor(s)
    return -torch.log(s.clamp(EPS, 1.0))


PENALTY_BOX = (0.0, 0.0, 0.0, 0.0)
PENALTY_SCORE = EPS


def rc_loss(target: DetectionTarget) -> torch.Tensor:
    """Detection loss: box regression plus classification on the top
    detection.

    With a detection: smooth_l1(b_d, b_a) + (-log s). Without one, the
    fixed penalty detection (degenerate corner box, score EPS) is
    substituted so the image contributes a large loss value.
    """
    b_a = _as_tensor(target.b_a)
    if target.found:
        if target.b_d is None or target.s is None:
            raise ValueError("found=True requires both b_d and s")
        return smooth_l1(target.b_d, b_a) + classification_loss(target.s)
    return smooth_l1(torch.zeros_like(b_a), b_a) + classification_loss(PENALTY_SCORE).to(b_a.dtype)


def total_objective(
    adversarial_g,
    adversarial_d,
    similarity,
    content,
    rc,
    weights: LossWeights = None,
    mode: AblationMode = AblationMode.B,
):
    """Compose the component losses into (generator_loss, discriminator_loss).

    generator_loss = adv_G + lambda_1 * L1 + lambda_c * L_con, plus the
    detection loss for modes B and G; discriminator_loss = adv_D plus the
    detection loss for modes B and D.
    """
    if weights is None:
        weights = LossWeights()
    try:
        mode = AblationMode(mode)
    except ValueError:
        raise ConfigurationError(f"unknown ablation mode: {mode!r}") from None
    adversarial_g = _as_tensor(adversarial_g)
    generator = (
        adversarial_g
        + weights.lambda_1 * _as_tensor(similarity, like=adversarial_g)
        + weights.lambda_c * _as_tensor(content, like=adversarial_g)
    )
    discriminator = _as_tensor(adversarial_d, like=adversarial_g)
    rc = _as_tensor(rc, like=adversarial_g)
    if mode.rc_in_generator:
        generator = generator + rc
    if mode.rc_in_discriminator:
        discriminator = discriminator + rc
    return generator, discriminator


# ---------------------------------------------------------------------------
# Content feature extractors (phi). All are frozen; only the pretrained
# variant has meaningful weights, the seeded random one keeps the test
# suite and desk-scale training offline.
# ---------------------------------------------------------------------------


class IdentityFeatures(nn.Module):
    """Pass-through phi; content loss degenerates to plain MSE."""

    def forward(self, x):
        return x


class RandomConvFeatures(nn.Module):
    """Fixed random-convolution feature stack, fully determined by seed."""

    def __init__(self, seed: int = 0, channels: int = 16, layers: int = 3):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        blocks = []
        c_in = 3
        for _ in range(layers):
            conv = nn.Conv2d(c_in, channels, 3, stride=2, padding=1)
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) * 0.2)
                conv.bias.zero_()
            blocks += [conv, nn.LeakyReLU(0.2)]
            c_in = channels
        self.features = nn.Sequential(*blocks)
        for p in self.parameters():
            p.requires_grad_(False)

    def forward(self, x):
        return self.features(x)


class PretrainedBackboneFeatures(nn.Module):
    """Deep feature layer of a pretrained VGG-19 classifier, loaded from a
    local weights file (no download is attempted)."""

    def __init__(self, weights_path, layer_index: int = 30):
        super().__init__()
        from pathlib import Path

        path = Path(weights_path)
        if not path.is_file():
            raise ConfigurationError(f"feature extractor weights not found: {path}")
        try:
            from torchvision.models import vgg19

            net = vgg19(weights=None)
            state = torch.load(path, map_location="cpu", weights_only=True)
            net.load_state_dict(state)
        except ConfigurationError:
            raise
        except Exception as exc:
            raise ConfigurationError(f"cannot load feature extractor from {path}: {exc}") from exc
        self.features = net.features[:layer_index]
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

    def forward(self, x):
        # model space [-1, 1] -> the classifier's expected normalization
        unit = (x + 1.0) / 2.0
        mean = torch.tensor([0.485, 0.456, 0.406], device=x.device).view(1, 3, 1, 1)
        std = torch.tensor([0.229, 0.224, 0.225], device=x.device).view(1, 3, 1, 1)
        return self.features((unit - mean) / std)


def make_feature_extractor(kind: str, seed: int = 0, weights_path=None) -> nn.Module:
    """Build the phi named by kind: 'identity', 'random', or 'pretrained'."""
    if kind == "identity":
        return IdentityFeatures()
    if kind == "random":
        return RandomConvFeatures(seed=seed)
    if kind == "pretrained":
        if weights_path is None:
            raise ConfigurationError("pretrained feature extractor needs a weights path")
        return PretrainedBackboneFeatures(weights_path)
    raise ConfigurationError(f"unknown feature extractor kind: {kind!r}")
