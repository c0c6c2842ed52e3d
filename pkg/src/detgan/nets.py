"""Generator and discriminator architectures.

Fixed contracts: the generator maps (B, 3, 256, 256) in [-1, 1] to the
same shape and range through an encoder-decoder with skip connections
whose bottleneck is 8x8 with 256 feature maps at full width; the
discriminator maps a 6-channel pair of images to a (B, 1, 16, 16) patch
validity map in [0, 1]. width_multiplier scales channel counts for
desk-scale runs without changing either contract.
"""

import io
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .errors import CheckpointError

INPUT_SIZE = 256
PATCH_SIZE = 16
BOTTLENECK = (8, 8, 256)
CHECKPOINT_FORMAT_VERSION = 1


def _ch(base: int, width: float) -> int:
    return max(1, round(base * width))


def init_gan_weights(module: nn.Module) -> None:
    """Normal(0, 0.02) conv init, the convention for this GAN family."""
    name = module.__class__.__name__
    if "Conv" in name:
        nn.init.normal_(module.weight.data, 0.0, 0.02)
        if getattr(module, "bias", None) is not None:
            nn.init.constant_(module.bias.data, 0.0)
    elif "BatchNorm" in name:
        nn.init.normal_(module.weight.data, 1.0, 0.02)
        nn.init.constant_(module.bias.data, 0.0)


class _Down(nn.Module):
    def __init__(self, c_in, c_out, bn=True):
        super().__init__()
        layers = [nn.Conv2d(c_in, c_out, 4, stride=2, padding=1, bias=False)]
        if bn:
            layers.append(nn.BatchNorm2d(c_out, momentum=0.8))
        layers.append(nn.LeakyReLU(0.2))
        self.model = nn.Sequential(*layers)

    def forward(self, x):
        return self.model(x)


class _Up(nn.Module):
    def __init__(self, c_in, c_out, dropout=0.0):
        super().__init__()
        layers = [
            nn.ConvTranspose2d(c_in, c_out, 4, stride=2, padding=1, bias=False),
            nn.BatchNorm2d(c_out, momentum=0.8),
            nn.ReLU(inplace=True),
        ]
        if dropout > 0:
            layers.append(nn.Dropout(dropout))
        self.model = nn.Sequential(*layers)

    def forward(self, x, skip):
        return torch.cat((self.model(x), skip), dim=1)


class UNetGenerator(nn.Module):
    """Five-stage encoder-decoder enhancer with skip connections.

    The stochastic component is training-time dropout in the first decoder
    stages; eval() runs noise-free and is deterministic.
    """

    def __init__(self, width_multiplier: float = 1.0, noise_dropout: float = 0.5):
        super().__init__()
        if width_multiplier <= 0:
            raise ValueError(f"width_multiplier must be positive, got {width_multiplier}")
        self.width_multiplier = float(width_multiplier)
        self.noise_dropout = float(noise_dropout)
        w = self.width_multiplier
        c1, c2, c3 = _ch(32, w), _ch(128, w), _ch(256, w)
        self.bottleneck_channels = c3

        self.down1 = _Down(3, c1, bn=False)
        self.down2 = _Down(c1, c2)
        self.down3 = _Down(c2, c3)
        self.down4 = _Down(c3, c3)
        self.down5 = _Down(c3, c3, bn=False)

        self.up1 = _Up(c3, c3, dropout=noise_dropout)
        self.up2 = _Up(2 * c3, c3, dropout=noise_dropout)
        self.up3 = _Up(2 * c3, c2)
        self.up4 = _Up(c2 + c2, c1)
        self.final = nn.Sequential(
            nn.Upsample(scale_factor=2),
            nn.ZeroPad2d((1, 0, 1, 0)),
            nn.Conv2d(2 * c1, 3, 4, padding=1),
            nn.Tanh(),
        )
        self.apply(init_gan_weights)

    def encode(self, x):
        """Encoder half; the last feature map is the 8x8 bottleneck."""
        d1 = self.down1(x)
        d2 = self.down2(d1)
        d3 = self.down3(d2)
        d4 = self.down4(d3)
        d5 = self.down5(d4)
        return d1, d2, d3, d4, d5

    def forward(self, x):
        if x.ndim != 4 or x.shape[1] != 3 or x.shape[2] != INPUT_SIZE or x.shape[3] != INPUT_SIZE:
            raise ValueError(
                f"expected input of shape (B, 3, {INPUT_SIZE}, {INPUT_SIZE}), "
                f"got {tuple(x.shape)}"
            )
        d1, d2, d3, d4, d5 = self.encode(x)
        u1 = self.up1(d5, d4)
        u2 = self.up2(u1, d3)
        u3 = self.up3(u2, d2)
        u4 = self.up4(u3, d1)
        return self.final(u4)


class PatchDiscriminator(nn.Module):
    """Markovian patch discriminator over a (reference, candidate) image
    pair; emits a 16x16 grid of per-patch validity probabilities."""

    def __init__(self, width_multiplier: float = 1.0):
        super().__init__()
        if width_multiplier <= 0:
            raise ValueError(f"width_multiplier must be positive, got {width_multiplier}")
        self.width_multiplier = float(width_multiplier)
        w = self.width_multiplier

        def block(c_in, c_out, bn=True):
            layers = [nn.Conv2d(c_in, c_out, 4, stride=2, padding=1)]
            if bn:
                layers.append(nn.BatchNorm2d(c_out, momentum=0.8))
            layers.append(nn.LeakyReLU(0.2, inplace=True))
            return layers

        c = [_ch(32, w), _ch(64, w), _ch(128, w), _ch(256, w)]
        self.model = nn.Sequential(
            *block(6, c[0], bn=False),
            *block(c[0], c[1]),
            *block(c[1], c[2]),
            *block(c[2], c[3]),
            nn.ZeroPad2d((1, 0, 1, 0)),
            nn.Conv2d(c[3], 1, 4, padding=1, bias=False),
            nn.Sigmoid(),
        )
        self.apply(init_gan_weights)

    def forward(self, reference, candidate):
        if reference.shape != candidate.shape:
            raise ValueError(
                f"image pair shapes differ: {tuple(reference.shape)} vs {tuple(candidate.shape)}"
            )
        if reference.ndim != 4 or reference.shape[1] != 3 \
                or reference.shape[2] != INPUT_SIZE or reference.shape[3] != INPUT_SIZE:
            raise ValueError(
                f"expected image pair of shape (B, 3, {INPUT_SIZE}, {INPUT_SIZE}), "
                f"got {tuple(reference.shape)}"
            )
        return self.model(torch.cat((reference, candidate), dim=1))


def build_nets(width_multiplier: float = 1.0, noise_dropout: float = 0.5, seed=None):
    """Construct a fresh (generator, discriminator) pair, optionally from a
    fixed seed so twin runs start identically."""
    if seed is not None:
        torch.manual_seed(seed)
    return (
        UNetGenerator(width_multiplier, noise_dropout=noise_dropout),
        PatchDiscriminator(width_multiplier),
    )


# ---------------------------------------------------------------------------
# Image space conversions (files/metrics use [0, 1], the model [-1, 1])
# ---------------------------------------------------------------------------


def to_model_space(images: np.ndarray) -> torch.Tensor:
    """HWC (or NHWC) [0, 1] float array -> NCHW tensor in [-1, 1]."""
    arr = np.asarray(images, dtype=np.float32)
    if arr.ndim == 3:
        arr = arr[None]
    tensor = torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2)))
    return tensor * 2.0 - 1.0


def to_unit_space(batch: torch.Tensor) -> np.ndarray:
    """NCHW tensor in [-1, 1] -> NHWC [0, 1] float32 array."""
    arr = ((batch.detach().cpu().clamp(-1, 1) + 1.0) / 2.0).numpy()
    return arr.transpose(0, 2, 3, 1)


def enhance_image(generator: UNetGenerator, image: np.ndarray, device="cpu") -> np.ndarray:
    """Enhance one H x W x 3 image in [0, 1]; resizes through the fixed
    256x256 contract when needed and returns the original resolution."""
    import cv2

    h, w = image.shape[:2]
    src = image
    if (h, w) != (INPUT_SIZE, INPUT_SIZE):
        src = cv2.resize(image.astype(np.float32), (INPUT_SIZE, INPUT_SIZE),
                         interpolation=cv2.INTER_AREA)
    generator.eval()
    with torch.no_grad():
        out = generator(to_model_space(src).to(device))
    result = to_unit_space(out)[0]
    if (h, w) != (INPUT_SIZE, INPUT_SIZE):
        result = cv2.resize(result, (w, h), interpolation=cv2.INTER_LINEAR)
    return np.clip(result, 0.0, 1.0)


# ---------------------------------------------------------------------------
# Checkpoint archive: named parameter tensors plus a manifest record
# ---------------------------------------------------------------------------


def save_checkpoint(path, generator, discriminator, epoch: int = 0, extra: dict = None) -> None:
    payload = {
        "manifest": {
            "format_version": CHECKPOINT_FORMAT_VERSION,
            "width_multiplier": generator.width_multiplier,
            "noise_dropout": generator.noise_dropout,
            "epoch": int(epoch),
        },
        "generator": generator.state_dict(),
        "discriminator": discriminator.state_dict(),
        "extra": extra or {},
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.BytesIO()
    torch.save(payload, buf)
    path.write_bytes(buf.getvalue())


def _load_state(module: nn.Module, state: dict, what: str) -> None:
    own = module.state_dict()
    missing = sorted(set(own) - set(state))
    unexpected = sorted(set(state) - set(own))
    mismatched = sorted(
        k for k in set(own) & set(state) if tuple(own[k].shape) != tuple(state[k].shape)
    )
    if missing or unexpected or mismatched:
        parts = []
        if missing:
            parts.append(f"missing parameters: {', '.join(missing)}")
        if unexpected:
            parts.append(f"unexpected parameters: {', '.join(unexpected)}")
        if mismatched:
            parts.append(f"shape mismatches: {', '.join(mismatched)}")
        raise CheckpointError(f"{what} state does not match network; " + "; ".join(parts))
    module.load_state_dict(state)


def load_checkpoint(path, device="cpu"):
    """Rebuild (generator, discriminator, manifest, extra) from an archive.

    Raises CheckpointError naming the offending parameters when the stored
    tensors do not line up with the networks the manifest describes.
    """
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location=device, weights_only=False)
    except Exception as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    manifest = payload.get("manifest")
    if not isinstance(manifest, dict) or "width_multiplier" not in manifest:
        raise CheckpointError(f"checkpoint {path} has no usable manifest record")
    if manifest.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(
            f"checkpoint format version {manifest.get('format_version')} is not supported"
        )
    generator = UNetGenerator(
        manifest["width_multiplier"], noise_dropout=manifest.get("noise_dropout", 0.5)
    )
    discriminator = PatchDiscriminator(manifest["width_multiplier"])
    _load_state(generator, payload.get("generator", {}), "generator")
    _load_state(discriminator, payload.get("discriminator", {}), "discriminator")
    generator.to(device)
    discriminator.to(device)
    return generator, discriminator, manifest, payload.get("extra", {})
