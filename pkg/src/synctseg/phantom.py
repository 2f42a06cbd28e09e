"""Deterministic procedural phantoms that stand in for clinical MR/CT data.

Each phantom is a body ellipsoid containing soft ellipsoidal organs; the first
organ is the segmentation target and produces the ground-truth mask. The two
rendering styles draw the *same* geometry for the same seed:

* ``MR_LIKE``  - high organ/background contrast in an arbitrary [0, ~1] range,
  with a multiplicative bias field, the way a T2 image separates soft tissue.
* ``CT_LIKE`` - a wide pseudo-HU range [-1000, 1000] with low soft-tissue
  contrast and a bright bone-like rim, so that a -500..500 window genuinely
  changes what a downstream network can see.

All randomness flows from the spec seed through counter-based Philox streams
(one for geometry, an independent jumped stream for intensity/noise), so
generation is race-free under parallel calls and bit-reproducible.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .volumes import MaskVolume, Modality, Units, Volume

# In-plane physical extent covered by the unit grid at fov_scale=1, in mm.
BASE_FOV_MM = 256.0
SLICE_THICKNESS_MM = 3.0

_PLACEMENT_TRIES = 500


class ModalityStyle(enum.Enum):
    MR_LIKE = "mr_like"
    CT_LIKE = "ct_like"


class GenerationError(RuntimeError):
    """Raised when organs cannot be placed inside the body ellipsoid."""


@dataclass(frozen=True)
class PhantomSpec:
    """Full description of one phantom; identical specs generate identical bytes.

    ``organ_radius_range`` is in voxels of the nominal (fov_scale=1) in-plane
    grid; smaller ``fov_scale`` zooms in, so structures appear larger.
    """

    seed: int
    dims: tuple[int, int, int] = (16, 64, 64)
    organ_count: int = 3
    organ_radius_range: tuple[float, float] = (5.0, 9.0)
    modality_style: ModalityStyle = ModalityStyle.MR_LIKE
    noise_sigma: float = 0.02
    fov_scale: float = 1.0

    def __post_init__(self):
        d, h, w = self.dims
        if min(d, h, w) < 1:
            raise ValueError(f"dims must be >= 1, got {self.dims}")
        if self.organ_count < 1:
            raise ValueError("organ_count must be >= 1")
        lo, hi = self.organ_radius_range
        if not 0 < lo <= hi:
            raise ValueError(f"bad organ_radius_range {self.organ_radius_range}")
        if not 0.0 < self.fov_scale <= 1.0:
            raise ValueError(f"fov_scale must be in (0, 1], got {self.fov_scale}")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")


@dataclass(frozen=True)
class _Geometry:
    body_center: np.ndarray  # (3,) in normalized [-1, 1] coords (z, y, x)
    body_axes: np.ndarray  # (3,) semi-axes
    organ_centers: np.ndarray  # (n, 3); organ 0 is the segmentation target
    organ_axes: np.ndarray  # (n, 3)


def _fits_inside(center, axes, body_center, body_axes, margin: float) -> bool:
    # Sufficient axis-aligned ellipsoid containment: ||c/A|| + max_k(a_k/A_k) <= margin.
    offset = np.sqrt(np.sum(((center - body_center) / body_axes) ** 2))
    return offset + np.max(axes / body_axes) <= margin


def _sample_geometry(spec: PhantomSpec, rng: np.random.Generator) -> _Geometry:
    d, h, w = spec.dims
    to_norm = 2.0 / min(h, w)  # voxels (at fov 1) -> normalized units

    body_axes = np.array(
        [rng.uniform(0.80, 0.95), rng.uniform(0.70, 0.85), rng.uniform(0.78, 0.92)]
    )
    body_center = rng.uniform(-0.04, 0.04, size=3)

    r_lo, r_hi = spec.organ_radius_range
    centers, axes = [], []
    for organ in range(spec.organ_count):
        target = organ == 0
        for attempt in range(_PLACEMENT_TRIES):
            base = rng.uniform(r_lo, r_hi) * to_norm
            z_stretch = rng.uniform(1.2, 1.6) if target else rng.uniform(0.9, 1.3)
            semi = np.array(
                [
                    base * z_stretch,  # thicker along z: slices are coarse
                    base * rng.uniform(0.8, 1.2),
                    base * rng.uniform(0.8, 1.2),
                ]
            )
            spread = 0.22 if target else 0.6
            center = body_center + rng.uniform(-spread, spread, size=3) * body_axes
            if not _fits_inside(center, semi, body_center, body_axes, margin=0.95):
                continue
            if not target:
                # Keep distractor organs clear of the segmentation target.
                gap = np.linalg.norm(center - centers[0])
                if gap < np.max(axes[0]) + np.max(semi):
                    continue
            centers.append(center)
            axes.append(semi)
            break
        else:
            raise GenerationError(
                f"could not place organ {organ} inside the body after "
                f"{_PLACEMENT_TRIES} attempts (seed {spec.seed})"
            )
    return _Geometry(body_center, body_axes, np.array(centers), np.array(axes))


def _grid(spec: PhantomSpec):
    d, h, w = spec.dims
    zz = ((np.arange(d) + 0.5) / d * 2.0 - 1.0).reshape(d, 1, 1)
    yy = (((np.arange(h) + 0.5) / h * 2.0 - 1.0) * spec.fov_scale).reshape(1, h, 1)
    xx = (((np.arange(w) + 0.5) / w * 2.0 - 1.0) * spec.fov_scale).reshape(1, 1, w)
    return zz, yy, xx


def _radius(zz, yy, xx, center, axes):
    q = (
        ((zz - center[0]) / axes[0]) ** 2
        + ((yy - center[1]) / axes[1]) ** 2
        + ((xx - center[2]) / axes[2]) ** 2
    )
    return np.sqrt(q)


def _soft(rho: np.ndarray, edge: float) -> np.ndarray:
    return np.clip((1.0 - rho) / edge, 0.0, 1.0)


def _blend(base: np.ndarray, level: float, membership: np.ndarray) -> np.ndarray:
    return base * (1.0 - membership) + level * membership


def generate_phantom(spec: PhantomSpec) -> tuple[Volume, MaskVolume]:
    """Generate a (Volume, MaskVolume) pair; deterministic by spec."""
    geo_rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(spec.seed)))
    tex_rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(spec.seed)).jumped())

    geom = _sample_geometry(spec, geo_rng)
    zz, yy, xx = _grid(spec)

    rho_body = _radius(zz, yy, xx, geom.body_center, geom.body_axes)
    body = rho_body <= 1.0
    m_body = _soft(rho_body, 0.06)
    rho_organs = [
        _radius(zz, yy, xx, c, a) for c, a in zip(geom.organ_centers, geom.organ_axes)
    ]
    mask = (rho_organs[0] <= 1.0) & body

    # Soft-tissue intensity ranks agree across styles (air < tissue < organs <
    # target organ), so the cross-modality mapping is monotone on tissue and an
    # unpaired translator cannot swap structure identities; the bone-like rim
    # exists only in the CT style and has to be synthesized from shape.
    d, h, w = spec.dims
    if spec.modality_style == ModalityStyle.MR_LIKE:
        img = np.full(spec.dims, 0.03)
        img = _blend(img, 0.32, m_body)
        for rho in rho_organs[1:]:
            img = _blend(img, tex_rng.uniform(0.45, 0.60), _soft(rho, 0.25))
        img = _blend(img, tex_rng.uniform(0.82, 0.90), _soft(rho_organs[0], 0.25))
        # Multiplicative low-order bias field over image coordinates.
        yi = ((np.arange(h) + 0.5) / h * 2.0 - 1.0).reshape(1, h, 1)
        xi = ((np.arange(w) + 0.5) / w * 2.0 - 1.0).reshape(1, 1, w)
        b = tex_rng.uniform(-0.12, 0.12, size=3)
        img = img * (1.0 + b[0] * yi + b[1] * xi + b[2] * yi * xi)
        img = img + tex_rng.normal(0.0, spec.noise_sigma, size=spec.dims)
        img = np.clip(img, 0.0, 1.5)
        vol = Volume(img.astype(np.float32), _spacing(spec), Modality.MR, Units.ARBITRARY)
    else:
        img = np.full(spec.dims, -1000.0)
        img = _blend(img, 20.0, m_body)
        for rho in rho_organs[1:]:
            img = _blend(img, tex_rng.uniform(50.0, 90.0), _soft(rho, 0.25))
        img = _blend(img, tex_rng.uniform(160.0, 200.0), _soft(rho_organs[0], 0.25))
        rim = np.clip(1.0 - np.abs(rho_body - 0.93) / 0.05, 0.0, 1.0)
        img = _blend(img, 800.0, rim)
        # noise_sigma is in fractions of the half dynamic range, as for MR_LIKE
        img = img + tex_rng.normal(0.0, spec.noise_sigma * 1000.0, size=spec.dims)
        img = np.clip(img, -1000.0, 1000.0)
        vol = Volume(img.astype(np.float32), _spacing(spec), Modality.CT, Units.HU)

    return vol, MaskVolume(mask.astype(np.uint8), vol.spacing)


def _spacing(spec: PhantomSpec) -> tuple[float, float, float]:
    _, h, w = spec.dims
    return (
        SLICE_THICKNESS_MM,
        BASE_FOV_MM * spec.fov_scale / h,
        BASE_FOV_MM * spec.fov_scale / w,
    )
