"""Adversarial training loop with detection loss placement modes.

One discriminator update then one generator update per batch; the frozen
detector runs on every generated image and its top-scoring output feeds
the detection loss. Where that loss enters the optimization is set by the
ablation mode: both networks (B), generator (G), discriminator (D), or
neither (N). In modes D and N the detection loss is still computed for
telemetry, under no_grad, so the parameter trajectory is identical to a
run with the detection path disabled.
"""

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .detector import DetectorPort
from .errors import ConfigurationError, NumericError
from .losses import (
    AblationMode,
    DetectionTarget,
    LossWeights,
    adversarial_loss,
    content_loss,
    global_similarity_loss,
    make_feature_extractor,
    rc_loss,
    total_objective,
)
from .nets import build_nets, load_checkpoint, save_checkpoint, to_model_space

LOSS_COMPONENTS = ("adv_d", "adv_g", "l1", "content", "rc", "total_g", "total_d")


@dataclass
class TrainConfig:
    mode: str = "B"
    epochs: int = 100
    batch_size: int = 32
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    seed: int = 0
    checkpoint_every: int = 0  # epochs between snapshots; 0 = final only
    pretrained: Optional[str] = None
    width_multiplier: float = 1.0
    noise_dropout: float = 0.5
    content_features: str = "random"  # random | identity | pretrained
    content_seed: int = 0
    content_weights_path: Optional[str] = None
    detect_threshold: float = 0.01
    lambda_1: float = 0.7
    lambda_c: float = 0.3
    device: str = "cpu"

    def __post_init__(self):
        try:
            self.mode = AblationMode(self.mode).value
        except ValueError:
            raise ConfigurationError(f"unknown ablation mode: {self.mode!r}") from None
        if self.batch_size < 1:
            raise ConfigurationError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise ConfigurationError(f"epochs must be >= 1, got {self.epochs}")

    @property
    def ablation(self) -> AblationMode:
        return AblationMode(self.mode)

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.lambda_1, self.lambda_c)


@dataclass
class TrainState:
    epoch: int = 0
    curves: List[dict] = field(default_factory=list)  # one record per epoch


@dataclass(frozen=True)
class GradientRouting:
    """How the detection loss reaches each network's update."""

    generator_path: str  # backprop | surrogate | none
    discriminator_additive: bool


def rc_gradient_path(mode, detector_differentiable: bool) -> GradientRouting:
    """Routing decision for the detection loss.

    Differentiable ports backpropagate through the detector into the
    generator (modes B/G); frozen external ports fall back to a surrogate
    term. The discriminator side is always the additive scalar (modes B/D).
    """
    mode = AblationMode(mode)
    if mode.rc_in_generator:
        path = "backprop" if detector_differentiable else "surrogate"
    else:
        path = "none"
    return GradientRouting(path, mode.rc_in_discriminator)


@dataclass
class StepLosses:
    adv_d: float
    adv_g: float
    l1: float
    content: float
    rc: float
    total_g: float
    total_d: float

    def as_dict(self) -> dict:
        return asdict(self)


def _normalized_gt_boxes(pairs: Sequence, dtype=torch.float32) -> torch.Tensor:
    rows = []
    for p in pairs:
        h, w = p.target.shape[:2]
        x, y, bw, bh = p.boxes[0]
        rows.append((x / w, y / h, bw / w, bh / h))
    return torch.tensor(rows, dtype=dtype)


def batch_rc(
    fake_model_space: torch.Tensor,
    gt_boxes_norm: torch.Tensor,
    detector: DetectorPort,
    threshold: float = 0.01,
    with_grad: bool = True,
) -> torch.Tensor:
    """Mean detection loss over a batch of generated images.

    Generated images in [-1, 1] are mapped to [0, 1] and resized to the
    port's input size before detection; found and not-found samples both
    contribute (the latter through the fixed penalty detection).
    """
    unit = (fake_model_space + 1.0) / 2.0
    size = detector.input_size
    if unit.shape[2] != size or unit.shape[3] != size:
        unit = F.interpolate(unit, size=(size, size), mode="bilinear", align_corners=False)
    if with_grad:
        boxes, scores, found = detector.top1_batch(unit, threshold)
    else:
        with torch.no_grad():
            boxes, scores, found = detector.top1_batch(unit, threshold)
    per_sample = []
    for b in range(unit.shape[0]):
        target = DetectionTarget(
            b_a=gt_boxes_norm[b].to(boxes.dtype),
            b_d=boxes[b],
            s=scores[b],
            found=bool(found[b]),
        )
        per_sample.append(rc_loss(target))
    return torch.stack(per_sample).mean()


def annotated_region_l1(
    fake: torch.Tensor, target: torch.Tensor, gt_boxes_norm: torch.Tensor
) -> torch.Tensor:
    """Mean absolute error restricted to each image's annotated box."""
    size = fake.shape[2]
    terms = []
    for b in range(fake.shape[0]):
        x, y, w, h = (float(v) for v in gt_boxes_norm[b])
        x0 = min(size - 1, max(0, int(round(x * size))))
        y0 = min(size - 1, max(0, int(round(y * size))))
        x1 = min(size, max(x0 + 1, int(round((x + w) * size))))
        y1 = min(size, max(y0 + 1, int(round((y + h) * size))))
        terms.append((fake[b, :, y0:y1, x0:x1] - target[b, :, y0:y1, x0:x1]).abs().mean())
    return torch.stack(terms).mean()


def compute_batch_losses(
    generator,
    discriminator,
    distorted: torch.Tensor,
    target: torch.Tensor,
    gt_boxes_norm: torch.Tensor,
    detector: DetectorPort,
    phi,
    mode="B",
    weights: LossWeights = None,
    detect_threshold: float = 0.01,
):
    """Evaluate every loss component and both composed objectives at the
    current (frozen) state, without updating anything.

    Returns a dict of 0-dim tensors keyed by LOSS_COMPONENTS. By
    construction total_g/total_d come from the same composition used in
    training, so mode algebra (e.g. total_g(B) - total_g(N) == rc) holds
    exactly.
    """
    mode = AblationMode(mode)
    routing = rc_gradient_path(mode, detector.is_differentiable)
    fake = generator(distorted)
    d_real = discriminator(distorted, target)
    d_fake = discriminator(distorted, fake)
    adv_d, adv_g = adversarial_loss(d_real, d_fake)
    l1 = global_similarity_loss(target, fake)
    con = content_loss(target, fake, phi)
    if routing.generator_path == "backprop":
        rc = batch_rc(fake, gt_boxes_norm, detector, detect_threshold, with_grad=True)
        rc_for_g = rc
    elif routing.generator_path == "surrogate":
        rc = batch_rc(fake.detach(), gt_boxes_norm, detector, detect_threshold, with_grad=False)
        rc_for_g = rc + 2.0 * annotated_region_l1(fake, target, gt_boxes_norm)
    else:
        rc = batch_rc(fake.detach(), gt_boxes_norm, detector, detect_threshold, with_grad=False)
        rc_for_g = rc
    total_g, _ = total_objective(adv_g, adv_d, l1, con, rc_for_g, weights, mode)
    _, total_d = total_objective(adv_g, adv_d, l1, con, rc.detach(), weights, mode)
    return {
        "adv_d": adv_d,
        "adv_g": adv_g,
        "l1": l1,
        "content": con,
        "rc": rc,
        "total_g": total_g,
        "total_d": total_d,
    }


def _check_finite(name: str, value: torch.Tensor, dump):
    if not torch.isfinite(value).all():
        dump(f"non-finite {name}")
        raise NumericError(f"non-finite {name}; step aborted")


def train_step(
    generator,
    discriminator,
    opt_g,
    opt_d,
    distorted: torch.Tensor,
    target: torch.Tensor,
    gt_boxes_norm: torch.Tensor,
    detector: DetectorPort,
    config: TrainConfig,
    phi,
    diagnostics_dir=None,
    condition_hook=None,
) -> StepLosses:
    """One discriminator update followed by one generator update.

    condition_hook, when given, maps (distorted, fake, detector) to the
    3-channel condition image the discriminator sees instead of the raw
    distorted input; it is the experiment point for detection-conditioned
    discriminator variants.
    """
    mode = config.ablation
    weights = config.weights
    routing = rc_gradient_path(mode, detector.is_differentiable)

    def dump(reason: str):
        _write_diagnostics(reason, generator, discriminator, distorted, target, diagnostics_dir)

    fake = generator(distorted)
    condition = distorted
    if condition_hook is not None:
        condition = condition_hook(distorted, fake.detach(), detector)

    # the detection loss is evaluated on every generated image; gradients
    # are only kept when the generator update consumes them
    if routing.generator_path == "backprop":
        rc = batch_rc(fake, gt_boxes_norm, detector, config.detect_threshold, with_grad=True)
        rc_for_g = rc
    elif routing.generator_path == "surrogate":
        rc = batch_rc(fake.detach(), gt_boxes_norm, detector, config.detect_threshold,
                      with_grad=False)
        rc_for_g = rc + 2.0 * annotated_region_l1(fake, target, gt_boxes_norm)
    else:
        rc = batch_rc(fake.detach(), gt_boxes_norm, detector, config.detect_threshold,
                      with_grad=False)
        rc_for_g = rc

    # discriminator update (additive detection scalar for modes B/D)
    d_real = discriminator(condition, target)
    d_fake = discriminator(condition, fake.detach())
    adv_d, _ = adversarial_loss(d_real, d_fake)
    loss_d = (adv_d + rc.detach()) if routing.discriminator_additive else adv_d
    _check_finite("discriminator loss", loss_d, dump)
    opt_d.zero_grad()
    loss_d.backward()
    opt_d.step()

    # generator update against the refreshed discriminator
    d_fake_g = discriminator(condition, fake)
    _, adv_g = adversarial_loss(d_real.detach(), d_fake_g)
    l1 = global_similarity_loss(target, fake)
    con = content_loss(target, fake, phi)
    loss_g, _ = total_objective(adv_g, adv_d.detach(), l1, con, rc_for_g, weights, mode)
    _check_finite("generator loss", loss_g, dump)
    opt_g.zero_grad()
    loss_g.backward()
    opt_g.step()

    for net, name in ((generator, "generator"), (discriminator, "discriminator")):
        for pname, p in net.named_parameters():
            if not torch.isfinite(p).all():
                dump(f"non-finite parameter {name}.{pname}")
                raise NumericError(f"non-finite parameter {name}.{pname} after update")

    return StepLosses(
        adv_d=float(adv_d.detach()), adv_g=float(adv_g.detach()), l1=float(l1.detach()),
        content=float(con.detach()), rc=float(rc.detach()),
        total_g=float(loss_g.detach()), total_d=float(loss_d.detach()),
    )


def _write_diagnostics(reason, generator, discriminator, distorted, target, out_dir):
    if out_dir is None:
        return
    snapshot = {
        "reason": reason,
        "batch": {
            "distorted_min": float(distorted.min()),
            "distorted_max": float(distorted.max()),
            "target_min": float(target.min()),
            "target_max": float(target.max()),
        },
        "parameter_norms": {
            f"generator.{n}": float(p.detach().norm()) for n, p in generator.named_parameters()
        }
        | {
            f"discriminator.{n}": float(p.detach().norm())
            for n, p in discriminator.named_parameters()
        },
    }
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "diagnostic_failure.json").write_text(json.dumps(snapshot, indent=2, sort_keys=True))


@dataclass
class TrainResult:
    generator: object
    discriminator: object
    state: TrainState
    checkpoint_path: Optional[Path]
    detector_checksum: str


def _epoch_seed(seed: int, epoch: int) -> int:
    return (seed * 1_000_003 + epoch) % (2**63)


def train(
    corpus: Sequence,
    nets,
    detector: DetectorPort,
    config: TrainConfig,
    out_dir=None,
    resume_from=None,
    condition_hook=None,
) -> TrainResult:
    """Run the full min-max loop over a paired corpus.

    corpus items expose .distorted/.target ([0, 1] images) and .boxes;
    nets is a (generator, discriminator) pair or None to build fresh ones
    from the config. Checkpoints land in out_dir at the configured
    cadence, plus a final one tagged with the mode. Fixed seeds give
    identical loss curves; resume_from continues a run exactly.
    """
    if len(corpus) == 0:
        raise ConfigurationError("training corpus is empty")
    if resume_from is not None and config.pretrained is not None:
        raise ConfigurationError("use either resume_from or pretrained seeding, not both")
    device = torch.device(config.device)
    torch.manual_seed(config.seed)

    if nets is not None:
        generator, discriminator = nets
    elif config.pretrained is not None:
        generator, discriminator, manifest, _ = load_checkpoint(config.pretrained, device)
        if abs(manifest["width_multiplier"] - config.width_multiplier) > 1e-9:
            raise ConfigurationError(
                f"pretrained width multiplier {manifest['width_multiplier']} does not match "
                f"configured {config.width_multiplier}"
            )
    else:
        generator, discriminator = build_nets(
            config.width_multiplier, config.noise_dropout, seed=config.seed
        )
    generator.to(device)
    discriminator.to(device)

    phi = make_feature_extractor(
        config.content_features, seed=config.content_seed,
        weights_path=config.content_weights_path,
    ).to(device)

    opt_g = torch.optim.Adam(generator.parameters(), lr=config.lr,
                             betas=(config.beta1, config.beta2))
    opt_d = torch.optim.Adam(discriminator.parameters(), lr=config.lr,
                             betas=(config.beta1, config.beta2))

    state = TrainState()
    if resume_from is not None:
        generator, discriminator, manifest, extra = load_checkpoint(resume_from, device)
        opt_g = torch.optim.Adam(generator.parameters(), lr=config.lr,
                                 betas=(config.beta1, config.beta2))
        opt_d = torch.optim.Adam(discriminator.parameters(), lr=config.lr,
                                 betas=(config.beta1, config.beta2))
        if "opt_g" in extra:
            opt_g.load_state_dict(extra["opt_g"])
            opt_d.load_state_dict(extra["opt_d"])
        state.epoch = manifest["epoch"]
        state.curves = list(extra.get("curves", []))

    distorted_all = to_model_space(np.stack([p.distorted for p in corpus])).to(device)
    target_all = to_model_space(np.stack([p.target for p in corpus])).to(device)
    boxes_all = _normalized_gt_boxes(corpus).to(device)

    checksum_before = detector.checksum()
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    def snapshot(epoch: int, tag: str) -> Path:
        path = out / f"checkpoint_mode{config.mode}_{tag}.pt"
        save_checkpoint(
            path, generator, discriminator, epoch=epoch,
            extra={
                "opt_g": opt_g.state_dict(),
                "opt_d": opt_d.state_dict(),
                "curves": state.curves,
                "mode": config.mode,
            },
        )
        return path

    n = len(corpus)
    generator.train()
    discriminator.train()
    for epoch in range(state.epoch + 1, config.epochs + 1):
        ep_seed = _epoch_seed(config.seed, epoch)
        torch.manual_seed(ep_seed)
        order = np.random.default_rng(ep_seed).permutation(n)
        sums = dict.fromkeys(LOSS_COMPONENTS, 0.0)
        batches = 0
        for start in range(0, n, config.batch_size):
            idx = torch.from_numpy(order[start : start + config.batch_size].copy()).long()
            losses = train_step(
                generator, discriminator, opt_g, opt_d,
                distorted_all[idx], target_all[idx], boxes_all[idx],
                detector, config, phi, diagnostics_dir=out,
                condition_hook=condition_hook,
            )
            for key, value in losses.as_dict().items():
                sums[key] += value
            batches += 1
        state.epoch = epoch
        record = {"epoch": epoch} | {k: sums[k] / batches for k in LOSS_COMPONENTS}
        state.curves.append(record)
        if out is not None and config.checkpoint_every > 0 and epoch % config.checkpoint_every == 0:
            snapshot(epoch, f"epoch{epoch:04d}")

    if detector.checksum() != checksum_before:
        raise RuntimeError("frozen detector changed during training")

    checkpoint_path = None
    if out is not None:
        checkpoint_path = snapshot(state.epoch, "final")
        write_loss_curves(out / "loss_curves.csv", state.curves)
    return TrainResult(
        generator=generator,
        discriminator=discriminator,
        state=state,
        checkpoint_path=checkpoint_path,
        detector_checksum=checksum_before,
    )


def write_loss_curves(path, curves: List[dict]) -> None:
    """Line-oriented numeric records: epoch, component, value."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        for record in curves:
            for component in LOSS_COMPONENTS:
                writer.writerow([record["epoch"], component, f"{record[component]:.10g}"])


def read_loss_curves(path) -> List[dict]:
    rows = {}
    with Path(path).open(newline="") as fh:
        for epoch, component, value in csv.reader(fh):
            rows.setdefault(int(epoch), {"epoch": int(epoch)})[component] = float(value)
    return [rows[k] for k in sorted(rows)]
