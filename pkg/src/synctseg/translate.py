"""Unpaired bidirectional translator: two generators, two patch discriminators.

One training step updates the discriminators first (on detached fakes), then
both generators jointly on fresh fakes with the adversarial terms plus the
weighted cycle-reconstruction terms (SSIM by default, MSE as the baseline
alternative). Volume synthesis runs a frozen generator slice by slice and
carries the source mask across unchanged, which is the whole point: labels
drawn on one modality supervise the other.
"""

from __future__ import annotations

import enum
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import checkpoint as ckpt
from .losses import SsimConfig, lsgan_discriminator_loss, lsgan_generator_loss, ssim_loss
from .volumes import MaskVolume, Modality, Units, UnitsError, Volume

ADAM_BETAS = (0.5, 0.999)


class TrainingError(RuntimeError):
    """A loss or parameter went non-finite during training."""


class CycleMode(str, enum.Enum):
    SSIM = "ssim"
    MSE = "mse"


@dataclass(frozen=True)
class GeneratorConfig:
    """Encoder / residual-body / decoder generator, 1 channel in and out.

    ``residual_scale`` blends the learned output with the input:
    ``out = (1 - s) * x + s * tanh(body(x))``. The default ``s = 1`` is the
    plain generator; ``s = 0`` short-circuits to an exact identity, which is
    the test hook for the mask carry-over plumbing.
    """

    base_channels: int = 16
    downsample_stages: int = 2
    residual_blocks: int = 2
    residual_scale: float = 1.0

    def __post_init__(self):
        if self.downsample_stages < 1:
            raise ValueError("downsample_stages must be >= 1")
        if self.residual_blocks < 1:
            raise ValueError("residual_blocks must be >= 1")
        if not 0.0 <= self.residual_scale <= 1.0:
            raise ValueError("residual_scale must be in [0, 1]")


@dataclass(frozen=True)
class DiscriminatorConfig:
    """Patch-level discriminator emitting a map of real/fake scores."""

    base_channels: int = 16
    layers: int = 2

    def __post_init__(self):
        if self.layers < 1:
            raise ValueError("layers must be >= 1")


@dataclass(frozen=True)
class CycleLossWeights:
    lambda_cycle: float = 10.0
    cycle_mode: CycleMode = CycleMode.SSIM
    lambda_identity: float = 0.0  # same-domain mapping penalty, off by default

    def __post_init__(self):
        if not np.isfinite(self.lambda_cycle) or self.lambda_cycle < 0:
            raise ValueError(f"lambda_cycle must be finite and >= 0, got {self.lambda_cycle}")
        object.__setattr__(self, "cycle_mode", CycleMode(self.cycle_mode))


@dataclass
class StepReport:
    """All loss components of one training step."""

    step: int
    disc_ct_loss: float
    disc_mr_loss: float
    gen_adv_loss: float
    cycle_mr_loss: float
    cycle_ct_loss: float
    gen_total_loss: float

    def as_dict(self) -> dict[str, float]:
        return {k: v for k, v in self.__dict__.items() if k != "step"}


def _conv_block(in_ch, out_ch, kernel, stride=1, padding=0, pad_mode="zeros"):
    return [
        nn.Conv2d(in_ch, out_ch, kernel, stride=stride, padding=padding,
                  padding_mode=pad_mode),
        nn.InstanceNorm2d(out_ch),
        nn.ReLU(inplace=True),
    ]


class _ResnetBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(channels, channels, 3, padding=1, padding_mode="reflect"),
            nn.InstanceNorm2d(channels),
            nn.ReLU(inplace=True),
            nn.Conv2d(channels, channels, 3, padding=1, padding_mode="reflect"),
            nn.InstanceNorm2d(channels),
        )

    def forward(self, x):
        return x + self.body(x)


class ResnetGenerator(nn.Module):
    """Stride-2 encoder, residual body, resize-convolution decoder, tanh output."""

    def __init__(self, cfg: GeneratorConfig):
        super().__init__()
        self.cfg = cfg
        ch = cfg.base_channels
        layers = _conv_block(1, ch, 7, padding=3, pad_mode="reflect")
        for _ in range(cfg.downsample_stages):
            layers += _conv_block(ch, ch * 2, 3, stride=2, padding=1)
            ch *= 2
        for _ in range(cfg.residual_blocks):
            layers.append(_ResnetBlock(ch))
        for _ in range(cfg.downsample_stages):
            layers.append(nn.Upsample(scale_factor=2, mode="nearest"))
            layers += _conv_block(ch, ch // 2, 3, padding=1)
            ch //= 2
        layers.append(nn.Conv2d(ch, 1, 7, padding=3, padding_mode="reflect"))
        layers.append(nn.Tanh())
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        h, w = x.shape[-2], x.shape[-1]
        stride = 2**self.cfg.downsample_stages
        if h % stride or w % stride:
            raise ValueError(
                f"input {h}x{w} not divisible by generator stride {stride}"
            )
        s = self.cfg.residual_scale
        if s == 0.0:
            return x
        y = self.net(x)
        if s == 1.0:
            return y
        return (1.0 - s) * x + s * y


class PatchDiscriminator(nn.Module):
    """Stacked stride-2 convolutions ending in a 1-channel score map."""

    def __init__(self, cfg: DiscriminatorConfig):
        super().__init__()
        self.cfg = cfg
        ch = cfg.base_channels
        layers = [nn.Conv2d(1, ch, 4, stride=2, padding=1), nn.LeakyReLU(0.2, inplace=True)]
        for _ in range(cfg.layers - 1):
            layers += [
                nn.Conv2d(ch, ch * 2, 4, stride=2, padding=1),
                nn.InstanceNorm2d(ch * 2),
                nn.LeakyReLU(0.2, inplace=True),
            ]
            ch *= 2
        layers.append(nn.Conv2d(ch, 1, 4, padding=1))
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        return self.net(x)


def _init_weights(module: nn.Module, gen: torch.Generator):
    for m in module.modules():
        if isinstance(m, nn.Conv2d):
            with torch.no_grad():
                m.weight.normal_(0.0, 0.02, generator=gen)
                if m.bias is not None:
                    m.bias.zero_()


@dataclass
class TranslatorState:
    """The four networks plus their optimizers; owned by one trainer at a time."""

    gen_mr_to_ct: ResnetGenerator
    gen_ct_to_mr: ResnetGenerator
    disc_ct: PatchDiscriminator
    disc_mr: PatchDiscriminator
    opt_gen_mr_to_ct: torch.optim.Adam
    opt_gen_ct_to_mr: torch.optim.Adam
    opt_disc_ct: torch.optim.Adam
    opt_disc_mr: torch.optim.Adam
    gcfg: GeneratorConfig
    dcfg: DiscriminatorConfig
    seed: int
    step: int = 0

    def networks(self) -> dict[str, nn.Module]:
        return {
            "gen_mr_to_ct": self.gen_mr_to_ct,
            "gen_ct_to_mr": self.gen_ct_to_mr,
            "disc_ct": self.disc_ct,
            "disc_mr": self.disc_mr,
        }

    def optimizers(self) -> dict[str, torch.optim.Adam]:
        return {
            "gen_mr_to_ct": self.opt_gen_mr_to_ct,
            "gen_ct_to_mr": self.opt_gen_ct_to_mr,
            "disc_ct": self.opt_disc_ct,
            "disc_mr": self.opt_disc_mr,
        }

    def set_lr(self, lr: float):
        for opt in self.optimizers().values():
            for group in opt.param_groups:
                group["lr"] = lr


def build_translator(gcfg: GeneratorConfig, dcfg: DiscriminatorConfig, seed: int,
                     lr: float = 2e-4) -> TranslatorState:
    """Deterministically initialize both generators and both discriminators."""
    gen = torch.Generator().manual_seed(int(seed))
    nets = [ResnetGenerator(gcfg), ResnetGenerator(gcfg),
            PatchDiscriminator(dcfg), PatchDiscriminator(dcfg)]
    for net in nets:
        _init_weights(net, gen)
    g_mr_to_ct, g_ct_to_mr, d_ct, d_mr = nets

    def make_opt(n):
        return torch.optim.Adam(n.parameters(), lr=lr, betas=ADAM_BETAS)

    return TranslatorState(
        gen_mr_to_ct=g_mr_to_ct,
        gen_ct_to_mr=g_ct_to_mr,
        disc_ct=d_ct,
        disc_mr=d_mr,
        opt_gen_mr_to_ct=make_opt(g_mr_to_ct),
        opt_gen_ct_to_mr=make_opt(g_ct_to_mr),
        opt_disc_ct=make_opt(d_ct),
        opt_disc_mr=make_opt(d_mr),
        gcfg=gcfg,
        dcfg=dcfg,
        seed=int(seed),
    )


def _as_batch(batch, name: str) -> torch.Tensor:
    t = torch.as_tensor(np.asarray(batch), dtype=torch.float32)
    if t.ndim == 3:
        t = t.unsqueeze(1)
    if t.ndim != 4 or t.shape[1] != 1:
        raise ValueError(f"{name} batch must be [B, H, W] or [B, 1, H, W], got {tuple(t.shape)}")
    if t.shape[0] == 0:
        raise ValueError(f"{name} batch is empty")
    if t.min() < -1.0 - 1e-4 or t.max() > 1.0 + 1e-4:
        raise ValueError(f"{name} batch is not normalized to [-1, 1]")
    return t


def _finite(value: torch.Tensor, component: str) -> float:
    v = float(value.detach())
    if not np.isfinite(v):
        raise TrainingError(f"non-finite loss component: {component} = {v}")
    return v


def _check_parameters(state: TranslatorState):
    for label, net in state.networks().items():
        for pname, p in net.named_parameters():
            if not torch.isfinite(p).all():
                raise TrainingError(f"non-finite parameter after step: {label}.{pname}")


def cycle_train_step(state: TranslatorState, batch_mr, batch_ct,
                     weights: CycleLossWeights = CycleLossWeights(),
                     ssim_cfg: SsimConfig = SsimConfig()) -> StepReport:
    """One bidirectional adversarial + cycle-consistency update.

    Discriminators update first on detached fakes; the generators then update
    on fresh fakes. With ``lambda_cycle == 0`` the reconstruction passes are
    excluded from the generator objective (the update equals a pure
    adversarial step) but are still evaluated without gradients for the
    report.
    """
    mr = _as_batch(batch_mr, "mr")
    ct = _as_batch(batch_ct, "ct")

    def cycle(a, b):
        if weights.cycle_mode == CycleMode.SSIM:
            return ssim_loss(a, b, ssim_cfg)
        return F.mse_loss(a, b)

    # Discriminator updates on detached fakes.
    with torch.no_grad():
        syn_ct = state.gen_mr_to_ct(mr)
        syn_mr = state.gen_ct_to_mr(ct)
    d_ct = lsgan_discriminator_loss(state.disc_ct(ct), state.disc_ct(syn_ct))
    state.opt_disc_ct.zero_grad()
    d_ct.backward()
    state.opt_disc_ct.step()
    d_mr = lsgan_discriminator_loss(state.disc_mr(mr), state.disc_mr(syn_mr))
    state.opt_disc_mr.zero_grad()
    d_mr.backward()
    state.opt_disc_mr.step()

    # Generator updates on fresh fakes.
    syn_ct = state.gen_mr_to_ct(mr)
    syn_mr = state.gen_ct_to_mr(ct)
    adv = lsgan_generator_loss(state.disc_ct(syn_ct)) + lsgan_generator_loss(
        state.disc_mr(syn_mr)
    )
    if weights.lambda_cycle > 0:
        cyc_mr = cycle(mr, state.gen_ct_to_mr(syn_ct))
        cyc_ct = cycle(ct, state.gen_mr_to_ct(syn_mr))
        total = adv + weights.lambda_cycle * (cyc_mr + cyc_ct)
    else:
        with torch.no_grad():
            cyc_mr = cycle(mr, state.gen_ct_to_mr(syn_ct))
            cyc_ct = cycle(ct, state.gen_mr_to_ct(syn_mr))
        total = adv
    if weights.lambda_identity > 0:
        total = total + weights.lambda_identity * (
            cycle(ct, state.gen_mr_to_ct(ct)) + cycle(mr, state.gen_ct_to_mr(mr))
        )
    state.opt_gen_mr_to_ct.zero_grad()
    state.opt_gen_ct_to_mr.zero_grad()
    total.backward()
    state.opt_gen_mr_to_ct.step()
    state.opt_gen_ct_to_mr.step()

    state.step += 1
    report = StepReport(
        step=state.step,
        disc_ct_loss=_finite(d_ct, "disc_ct"),
        disc_mr_loss=_finite(d_mr, "disc_mr"),
        gen_adv_loss=_finite(adv, "gen_adv"),
        cycle_mr_loss=_finite(cyc_mr, "cycle_mr"),
        cycle_ct_loss=_finite(cyc_ct, "cycle_ct"),
        gen_total_loss=_finite(total, "gen_total"),
    )
    _check_parameters(state)
    return report


def _translate(generator: ResnetGenerator, v: Volume, out_modality: Modality,
               chunk: int = 16) -> Volume:
    if v.units != Units.NORMALIZED:
        raise UnitsError(f"translation requires NORMALIZED input, got {v.units.name}")
    slices = torch.from_numpy(np.ascontiguousarray(v.data)).unsqueeze(1)
    outputs = []
    with torch.no_grad():
        for start in range(0, slices.shape[0], chunk):
            outputs.append(generator(slices[start : start + chunk]))
    data = torch.cat(outputs).squeeze(1).numpy()
    return Volume(data, v.spacing, out_modality, Units.NORMALIZED)


def synthesize_volume(state: TranslatorState, v: Volume,
                      mask: MaskVolume) -> tuple[Volume, MaskVolume]:
    """Translate an MR volume slice-wise to a synthetic CT; the mask rides along.

    The returned mask is the input mask object, bit-identical: label transfer
    is by construction, not by resampling.
    """
    if mask.shape != v.shape:
        raise ValueError(f"mask shape {mask.shape} does not match volume {v.shape}")
    synct = _translate(state.gen_mr_to_ct, v, Modality.SYNCT)
    return synct, mask


def reconstruct_volume(state: TranslatorState, synct: Volume) -> Volume:
    """Translate a synthetic CT volume back to the MR domain."""
    return _translate(state.gen_ct_to_mr, synct, Modality.MR)


def save_translator(state: TranslatorState, path) -> None:
    """Write a translator checkpoint (manifest + raw float32 parameter blocks)."""
    blocks: dict[str, np.ndarray] = {}
    opt_steps: dict[str, dict[str, float]] = {}
    for label, net in state.networks().items():
        for pname, p in net.named_parameters():
            blocks[f"{label}.{pname}"] = p.detach().numpy()
    for label, opt in state.optimizers().items():
        net = state.networks()[label]
        steps: dict[str, float] = {}
        for pname, p in net.named_parameters():
            st = opt.state.get(p)
            if not st:
                continue
            blocks[f"opt.{label}.{pname}.exp_avg"] = st["exp_avg"].numpy()
            blocks[f"opt.{label}.{pname}.exp_avg_sq"] = st["exp_avg_sq"].numpy()
            steps[pname] = float(st["step"])
        opt_steps[label] = steps
    lr = state.opt_gen_mr_to_ct.param_groups[0]["lr"]
    ckpt.save_checkpoint(
        path,
        kind="translator",
        configs={"generator": asdict(state.gcfg), "discriminator": asdict(state.dcfg)},
        blocks=blocks,
        meta={"step": state.step, "seed": state.seed, "lr": lr, "opt_steps": opt_steps},
    )


def load_translator(path, gcfg: GeneratorConfig | None = None,
                    dcfg: DiscriminatorConfig | None = None) -> TranslatorState:
    """Rebuild a translator from a checkpoint, failing loudly on config mismatch."""
    data = ckpt.load_checkpoint(path, expect_kind="translator")
    file_gcfg = GeneratorConfig(**data.configs["generator"])
    file_dcfg = DiscriminatorConfig(**data.configs["discriminator"])
    if gcfg is not None and gcfg != file_gcfg:
        raise ckpt.ConfigMismatchError(
            f"generator config mismatch: checkpoint has {file_gcfg}, caller expects {gcfg}"
        )
    if dcfg is not None and dcfg != file_dcfg:
        raise ckpt.ConfigMismatchError(
            f"discriminator config mismatch: checkpoint has {file_dcfg}, caller expects {dcfg}"
        )
    state = build_translator(file_gcfg, file_dcfg, seed=data.meta["seed"],
                             lr=data.meta.get("lr", 2e-4))
    state.step = int(data.meta["step"])
    for label, net in state.networks().items():
        opt = state.optimizers()[label]
        steps = data.meta.get("opt_steps", {}).get(label, {})
        for pname, p in net.named_parameters():
            key = f"{label}.{pname}"
            if key not in data.blocks:
                raise ckpt.CheckpointError(f"missing parameter block {key!r}")
            arr = data.blocks[key]
            if tuple(arr.shape) != tuple(p.shape):
                raise ckpt.CheckpointError(
                    f"shape mismatch for {key!r}: checkpoint {arr.shape}, model {tuple(p.shape)}"
                )
            with torch.no_grad():
                p.copy_(torch.from_numpy(arr))
            if pname in steps:
                opt.state[p] = {
                    "step": torch.tensor(steps[pname]),
                    "exp_avg": torch.from_numpy(data.blocks[f"opt.{key}.exp_avg"]).clone(),
                    "exp_avg_sq": torch.from_numpy(data.blocks[f"opt.{key}.exp_avg_sq"]).clone(),
                }
    return state
