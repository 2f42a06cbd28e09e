"""Scalar objectives: SSIM map/loss, least-squares adversarial terms, BCE, Dice.

All differentiable losses are torch expressions, so gradients come from
autograd; computations run in the dtype of the inputs (use float64 inputs for
high-precision checks). ``dice_score`` is an evaluation metric over binary
masks and returns a plain float.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .volumes import MaskVolume

BCE_EPS = 1e-7


@dataclass(frozen=True)
class SsimConfig:
    """Window size, stabilizer constants, and dynamic range for local SSIM.

    ``c1``/``c2`` default to ``(0.01*L)**2`` and ``(0.03*L)**2`` for dynamic
    range ``L``; with [-1, 1]-normalized images L = 2. The window is uniform
    (box) by default; set ``gaussian=True`` for a Gaussian window.
    """

    window: int = 7
    dynamic_range: float = 2.0
    c1: float | None = None
    c2: float | None = None
    gaussian: bool = False
    gaussian_sigma: float = 1.5

    def __post_init__(self):
        if self.window < 3 or self.window % 2 == 0:
            raise ValueError(f"window must be an odd integer >= 3, got {self.window}")
        if self.dynamic_range <= 0:
            raise ValueError("dynamic_range must be > 0")
        if self.c1 is None:
            object.__setattr__(self, "c1", (0.01 * self.dynamic_range) ** 2)
        if self.c2 is None:
            object.__setattr__(self, "c2", (0.03 * self.dynamic_range) ** 2)
        if self.c1 <= 0 or self.c2 <= 0:
            raise ValueError("stability constants c1 and c2 must be > 0")


def _as_float_tensor(x) -> torch.Tensor:
    t = torch.as_tensor(x)
    if not t.is_floating_point():
        t = t.to(torch.get_default_dtype())
    return t


def _window_kernel(cfg: SsimConfig, dtype, device) -> torch.Tensor:
    w = cfg.window
    if cfg.gaussian:
        half = (w - 1) / 2.0
        coords = torch.arange(w, dtype=dtype, device=device) - half
        g = torch.exp(-(coords**2) / (2.0 * cfg.gaussian_sigma**2))
        k2 = torch.outer(g, g)
        k2 = k2 / k2.sum()
    else:
        k2 = torch.full((w, w), 1.0 / (w * w), dtype=dtype, device=device)
    return k2.view(1, 1, w, w)


def ssim_map(x, y, cfg: SsimConfig = SsimConfig()) -> torch.Tensor:
    """Per-pixel structural similarity between two images, in (-1, 1].

    Local means/variances/covariances are taken over the window centered at
    each pixel, with reflection padding at the borders. Inputs may be
    ``[H, W]``, ``[C, H, W]``, or ``[B, C, H, W]``; the result has the same
    shape as the inputs.
    """
    tx, ty = _as_float_tensor(x), _as_float_tensor(y)
    if tx.shape != ty.shape:
        raise ValueError(f"shape mismatch: {tuple(tx.shape)} vs {tuple(ty.shape)}")
    if tx.ndim not in (2, 3, 4):
        raise ValueError(f"expected 2D, 3D, or 4D input, got {tx.ndim}D")
    shape = tx.shape
    h, w = shape[-2], shape[-1]
    if cfg.window > min(h, w):
        raise ValueError(f"window {cfg.window} larger than image {h}x{w}")
    if ty.dtype != tx.dtype:
        ty = ty.to(tx.dtype)
    bx = tx.reshape(-1, 1, h, w)
    by = ty.reshape(-1, 1, h, w)

    pad = cfg.window // 2
    kernel = _window_kernel(cfg, tx.dtype, tx.device)
    bx = F.pad(bx, (pad, pad, pad, pad), mode="reflect")
    by = F.pad(by, (pad, pad, pad, pad), mode="reflect")

    mu_x = F.conv2d(bx, kernel)
    mu_y = F.conv2d(by, kernel)
    var_x = F.conv2d(bx * bx, kernel) - mu_x * mu_x
    var_y = F.conv2d(by * by, kernel) - mu_y * mu_y
    cov_xy = F.conv2d(bx * by, kernel) - mu_x * mu_y

    c1, c2 = cfg.c1, cfg.c2
    luminance = (2.0 * mu_x * mu_y + c1) / (mu_x * mu_x + mu_y * mu_y + c1)
    structure = (2.0 * cov_xy + c2) / (var_x + var_y + c2)
    return (luminance * structure).reshape(shape)


def ssim_loss(x, y, cfg: SsimConfig = SsimConfig()) -> torch.Tensor:
    """Mean of ``1 - SSIM`` over all pixels; zero iff the images agree, < 2 always."""
    return (1.0 - ssim_map(x, y, cfg)).mean()


def _non_empty(t: torch.Tensor, name: str):
    if t.numel() == 0:
        raise ValueError(f"{name} batch is empty")


def lsgan_discriminator_loss(d_real, d_fake) -> torch.Tensor:
    """Least-squares discriminator loss: mean (D(real)-1)^2 + mean D(fake)^2.

    Each term averages over its own batch (and over score-map entries for
    patch discriminators), so real and fake batch sizes may differ.
    """
    r, f = _as_float_tensor(d_real), _as_float_tensor(d_fake)
    _non_empty(r, "real")
    _non_empty(f, "fake")
    return ((r - 1.0) ** 2).mean() + (f**2).mean()


def lsgan_generator_loss(d_fake) -> torch.Tensor:
    """Least-squares generator loss: mean (D(fake)-1)^2."""
    f = _as_float_tensor(d_fake)
    _non_empty(f, "fake")
    return ((f - 1.0) ** 2).mean()


def bce_loss(pred, target) -> torch.Tensor:
    """Mean binary cross entropy; predictions are clamped to [eps, 1-eps]."""
    p, t = _as_float_tensor(pred), _as_float_tensor(target)
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch: {tuple(p.shape)} vs {tuple(t.shape)}")
    p = p.clamp(BCE_EPS, 1.0 - BCE_EPS)
    t = t.to(p.dtype)
    return -(t * torch.log(p) + (1.0 - t) * torch.log1p(-p)).mean()


def _as_binary_array(m) -> np.ndarray:
    if isinstance(m, MaskVolume):
        return m.labels
    if isinstance(m, torch.Tensor):
        m = m.detach().cpu().numpy()
    arr = np.asarray(m)
    if not np.isin(arr, (0, 1)).all():
        raise ValueError("dice_score requires binary masks")
    return arr.astype(bool)


def dice_score(a, b) -> float:
    """Overlap 2|A&B| / (|A| + |B|); two empty masks score 1.0 by convention."""
    ma, mb = _as_binary_array(a), _as_binary_array(b)
    if ma.shape != mb.shape:
        raise ValueError(f"shape mismatch: {ma.shape} vs {mb.shape}")
    denom = int(ma.sum()) + int(mb.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(ma, mb).sum()) / denom
