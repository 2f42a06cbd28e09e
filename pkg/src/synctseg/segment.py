"""2.5D slice stacks and the residual U-Net segmenter.

A 2.5D input is the central slice plus ``context`` neighbors on each side,
stacked as channels (``channels = 1 + 2*context``); out-of-volume neighbors
are edge-replicated. The network is a U-Net whose conv pairs are wrapped as
residual blocks (long concatenation skips across levels, short identity skips
inside blocks), ending in a per-pixel sigmoid probability. Only the central
slice's mask supervises each stack.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn

from . import checkpoint as ckpt
from .augment import AugmentPolicy, apply_policy
from .losses import bce_loss, dice_score
from .translate import TrainingError
from .volumes import MaskVolume, Units, UnitsError, Volume


@dataclass(frozen=True)
class ContextConfig:
    """Number of adjacent slices queried on each side of the central slice."""

    context: int = 1

    def __post_init__(self):
        if self.context < 0:
            raise ValueError("context must be >= 0")

    @property
    def channels(self) -> int:
        return 1 + 2 * self.context


@dataclass(frozen=True)
class ResUNetConfig:
    depth: int = 3
    base_channels: int = 12
    in_channels: int = 3
    out_channels: int = 1

    def __post_init__(self):
        if self.depth < 1 or self.base_channels < 1 or self.in_channels < 1:
            raise ValueError(f"invalid ResUNetConfig {self}")


@dataclass
class SegSample:
    """One 2.5D training sample: a channel stack and its central-slice mask."""

    stack: np.ndarray  # [C, H, W] float32
    mask: np.ndarray  # [H, W] uint8
    source_id: str = ""
    slice_index: int = 0


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    val_dice: float | None = None


def assemble_stack(v: Volume | np.ndarray, slice_index: int, context: int) -> np.ndarray:
    """Gather slices [-context .. +context] around ``slice_index`` as channels."""
    data = v.data if isinstance(v, Volume) else np.asarray(v)
    if context < 0:
        raise ValueError("context must be >= 0")
    d = data.shape[0]
    if not 0 <= slice_index < d:
        raise ValueError(f"slice_index {slice_index} out of range for depth {d}")
    indices = np.clip(np.arange(slice_index - context, slice_index + context + 1), 0, d - 1)
    return data[indices].astype(np.float32, copy=True)


def volume_samples(v: Volume, mask: MaskVolume, context: int, source_id: str = "") -> list[SegSample]:
    """One SegSample per slice of a volume, with the aligned mask slices."""
    if mask.shape != v.shape:
        raise ValueError(f"mask shape {mask.shape} does not match volume {v.shape}")
    return [
        SegSample(
            stack=assemble_stack(v, k, context),
            mask=mask.labels[k].copy(),
            source_id=source_id,
            slice_index=k,
        )
        for k in range(v.shape[0])
    ]


class ResidualBlock(nn.Module):
    """Two 3x3 convolutions with a short skip: ``out = shortcut(x) + branch(x)``.

    Zeroing the branch's final conv weights makes the block an exact identity
    whenever input and output channels agree.
    """

    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.branch = nn.Sequential(
            nn.Conv2d(in_ch, out_ch, 3, padding=1),
            nn.InstanceNorm2d(out_ch),
            nn.ReLU(inplace=True),
            nn.Conv2d(out_ch, out_ch, 3, padding=1),
            nn.InstanceNorm2d(out_ch),
        )
        self.shortcut = nn.Identity() if in_ch == out_ch else nn.Conv2d(in_ch, out_ch, 1)

    def forward(self, x):
        return self.shortcut(x) + self.branch(x)

    def zero_branch(self):
        with torch.no_grad():
            self.branch[3].weight.zero_()
            self.branch[3].bias.zero_()


class ResUNet(nn.Module):
    """U-Net with residual blocks at every level and long concatenation skips."""

    def __init__(self, cfg: ResUNetConfig):
        super().__init__()
        self.cfg = cfg
        chs = [cfg.base_channels * 2**i for i in range(cfg.depth + 1)]
        self.encoders = nn.ModuleList()
        in_ch = cfg.in_channels
        for ch in chs[:-1]:
            self.encoders.append(ResidualBlock(in_ch, ch))
            in_ch = ch
        self.pool = nn.MaxPool2d(2)
        self.bottleneck = ResidualBlock(chs[-2], chs[-1])
        self.upsample = nn.Upsample(scale_factor=2, mode="nearest")
        self.decoders = nn.ModuleList()
        in_ch = chs[-1]
        for ch in reversed(chs[:-1]):
            self.decoders.append(ResidualBlock(in_ch + ch, ch))
            in_ch = ch
        self.head = nn.Conv2d(in_ch, cfg.out_channels, 1)

    def forward(self, x):
        h, w = x.shape[-2], x.shape[-1]
        stride = 2**self.cfg.depth
        if h % stride or w % stride:
            raise ValueError(f"input {h}x{w} not divisible by 2^depth = {stride}")
        skips = []
        for enc in self.encoders:
            x = enc(x)
            skips.append(x)
            x = self.pool(x)
        x = self.bottleneck(x)
        for dec, skip in zip(self.decoders, reversed(skips)):
            x = dec(torch.cat([self.upsample(x), skip], dim=1))
        return torch.sigmoid(self.head(x))


def build_res_unet(cfg: ResUNetConfig, seed: int) -> ResUNet:
    """Deterministically initialized Res-U-Net (He-style init from the seed)."""
    net = ResUNet(cfg)
    gen = torch.Generator().manual_seed(int(seed))
    for m in net.modules():
        if isinstance(m, nn.Conv2d):
            fan_in = m.in_channels * m.kernel_size[0] * m.kernel_size[1]
            with torch.no_grad():
                m.weight.normal_(0.0, (2.0 / fan_in) ** 0.5, generator=gen)
                m.bias.zero_()
    # Start the probability head close to the sparse-mask prior: a small weight
    # scale keeps initial outputs unsaturated (saturated pixels get no gradient
    # through the clamped BCE), and the negative bias matches rare positives.
    with torch.no_grad():
        net.head.weight.mul_(0.02)
        net.head.bias.fill_(-2.0)
    return net


def _check_samples(samples: list[SegSample]):
    if not samples:
        raise ValueError("no training samples")
    channels = samples[0].stack.shape[0]
    for s in samples:
        if s.stack.ndim != 3 or s.stack.shape[0] != channels:
            raise ValueError(
                f"inconsistent stack channels: expected {channels}, got {s.stack.shape}"
            )
        if s.mask.shape != s.stack.shape[1:]:
            raise ValueError(f"mask shape {s.mask.shape} does not match stack {s.stack.shape}")
    return channels


def _mean_dice(net: ResUNet, samples: list[SegSample], threshold: float) -> float:
    scores = []
    with torch.no_grad():
        for s in samples:
            prob = net(torch.from_numpy(s.stack).unsqueeze(0))[0, 0].numpy()
            scores.append(dice_score(prob >= threshold, s.mask))
    return float(np.mean(scores))


def train_segmenter(net: ResUNet, samples: list[SegSample], epochs: int, lr: float,
                    policy: AugmentPolicy | None = None, *, val_samples: list[SegSample] | None = None,
                    val_fraction: float = 1.0 / 6.0, batch_size: int = 4, seed: int = 0,
                    threshold: float = 0.5, max_steps: int | None = None,
                    ) -> tuple[ResUNet, list[EpochStats]]:
    """Minimize BCE over (augmented) samples; returns the net and epoch history.

    ``val_samples=None`` carves one ``val_fraction`` split out of ``samples``
    for the per-epoch Dice; pass an explicit list (possibly empty) to control
    the split from outside. ``max_steps`` caps total optimizer steps.
    """
    channels = _check_samples(samples)
    if net.cfg.in_channels != channels:
        raise ValueError(
            f"network expects {net.cfg.in_channels} channels, samples have {channels}"
        )
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
    if val_samples is None:
        n_val = max(1, round(len(samples) * val_fraction)) if len(samples) > 1 else 0
        order = rng.permutation(len(samples))
        val_samples = [samples[i] for i in order[:n_val]]
        train_samples = [samples[i] for i in order[n_val:]]
    else:
        train_samples = list(samples)
    if not train_samples:
        raise ValueError("no samples left to train on")

    opt = torch.optim.Adam(net.parameters(), lr=lr)
    history: list[EpochStats] = []
    steps = 0
    for epoch in range(epochs):
        if max_steps is not None and steps >= max_steps:
            break
        order = rng.permutation(len(train_samples))
        losses = []
        for start in range(0, len(order), batch_size):
            if max_steps is not None and steps >= max_steps:
                break
            batch = [train_samples[i] for i in order[start : start + batch_size]]
            stacks, masks = [], []
            for s in batch:
                stack, mask = s.stack, s.mask
                if policy is not None:
                    stack, mask = apply_policy(stack, mask, policy, rng)
                stacks.append(stack.astype(np.float32, copy=False))
                masks.append(mask)
            x = torch.from_numpy(np.stack(stacks))
            y = torch.from_numpy(np.stack(masks).astype(np.float32)).unsqueeze(1)
            loss = bce_loss(net(x), y)
            opt.zero_grad()
            loss.backward()
            opt.step()
            steps += 1
            value = float(loss.detach())
            if not np.isfinite(value):
                raise TrainingError(f"non-finite training loss at epoch {epoch}, step {steps}")
            losses.append(value)
        val_dice = _mean_dice(net, val_samples, threshold) if val_samples else None
        history.append(EpochStats(epoch=epoch, train_loss=float(np.mean(losses)),
                                  val_dice=val_dice))
    return net, history


def predict_mask(net: ResUNet, v: Volume, context: int, threshold: float = 0.5,
                 chunk: int = 16) -> MaskVolume:
    """Assemble per-slice stacks, run the net, and binarize at ``threshold``."""
    if v.units != Units.NORMALIZED:
        raise UnitsError(f"predict_mask requires NORMALIZED input, got {v.units.name}")
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must be in (0, 1), got {threshold}")
    d = v.shape[0]
    stacks = np.stack([assemble_stack(v, k, context) for k in range(d)])
    probs = []
    with torch.no_grad():
        for start in range(0, d, chunk):
            probs.append(net(torch.from_numpy(stacks[start : start + chunk])))
    prob = torch.cat(probs)[:, 0].numpy()
    return MaskVolume((prob >= threshold).astype(np.uint8), v.spacing)


def save_segmenter(net: ResUNet, context: int, path, meta: dict | None = None) -> None:
    """Write a segmenter checkpoint in the shared container format."""
    blocks = {name: p.detach().numpy() for name, p in net.named_parameters()}
    ckpt.save_checkpoint(
        path,
        kind="segmenter",
        configs={"unet": asdict(net.cfg), "context": context},
        blocks=blocks,
        meta=meta or {},
    )


def load_segmenter(path, cfg: ResUNetConfig | None = None) -> tuple[ResUNet, int, dict]:
    """Rebuild (net, context, meta) from a checkpoint; loud on config mismatch."""
    data = ckpt.load_checkpoint(path, expect_kind="segmenter")
    file_cfg = ResUNetConfig(**data.configs["unet"])
    if cfg is not None and cfg != file_cfg:
        raise ckpt.ConfigMismatchError(
            f"segmenter config mismatch: checkpoint has {file_cfg}, caller expects {cfg}"
        )
    net = ResUNet(file_cfg)
    for name, p in net.named_parameters():
        if name not in data.blocks:
            raise ckpt.CheckpointError(f"missing parameter block {name!r}")
        arr = data.blocks[name]
        if tuple(arr.shape) != tuple(p.shape):
            raise ckpt.CheckpointError(
                f"shape mismatch for {name!r}: checkpoint {arr.shape}, model {tuple(p.shape)}"
            )
        with torch.no_grad():
            p.copy_(torch.from_numpy(arr))
    return net, int(data.configs["context"]), data.meta
