"""Ground-truth water/calcium basis images.

Two routes produce a :class:`MaterialImage`: soft-threshold conversion of a
single-energy attenuation image, and procedural recipes standing in for
clinical slices.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from . import physics

RECIPE_VERSION = "1"
RECIPES = ("ellipse-chest", "disk-inserts", "random-blobs")

# Energy at which attenuation images are interpreted (keV); the 2000 HU cap is
# converted to 1/cm with water's attenuation at this energy.
REFERENCE_ENERGY_KEV = 60.0
HU_CAP = 2000.0


class PhantomError(ValueError):
    pass


@dataclass(frozen=True)
class ThresholdParams:
    k_w: float = 5.18
    k_wc: float = -8.77
    k_cw: float = 5.69
    k_c: float = 2.12
    mu_w: float = 0.22
    mu_c: float = 0.35

    def __post_init__(self):
        if not self.mu_w < self.mu_c:
            raise PhantomError("mu_w must be below mu_c")
        if self.k_w <= 0 or self.k_c <= 0 or self.k_cw <= 0:
            raise PhantomError("k_w, k_c and k_cw must be positive")


@dataclass
class AttenuationImage:
    grid: np.ndarray
    pixel_size: float = 0.8

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=np.float64)
        if self.grid.ndim != 2:
            raise PhantomError("attenuation image must be 2-D")
        if not np.all(np.isfinite(self.grid)):
            raise PhantomError("attenuation image has non-finite values")
        if np.any(self.grid < 0):
            raise PhantomError("attenuation image has negative values")


@dataclass
class MaterialImage:
    """Water and calcium density planes (g/ml) on a square pixel lattice."""

    water: np.ndarray
    calcium: np.ndarray
    pixel_size: float = 0.8
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.water = np.asarray(self.water, dtype=np.float64)
        self.calcium = np.asarray(self.calcium, dtype=np.float64)
        if self.water.shape != self.calcium.shape or self.water.ndim != 2:
            raise PhantomError("water and calcium planes must be 2-D with equal shapes")
        # negatives are allowed: unclamped estimates must survive round trips
        if not (np.all(np.isfinite(self.water)) and np.all(np.isfinite(self.calcium))):
            raise PhantomError("material image has non-finite values")

    @property
    def shape(self) -> tuple[int, int]:
        return self.water.shape

    def stack(self) -> np.ndarray:
        return np.stack([self.water, self.calcium])

    @classmethod
    def from_stack(cls, arr, pixel_size=0.8, meta=None) -> "MaterialImage":
        arr = np.asarray(arr)
        return cls(arr[0], arr[1], pixel_size, dict(meta or {}))

    def clamped(self) -> "MaterialImage":
        return MaterialImage(np.maximum(self.water, 0), np.maximum(self.calcium, 0),
                             self.pixel_size, dict(self.meta, clamped=True))


def attenuation_cap(energy_kev: float = REFERENCE_ENERGY_KEV) -> float:
    """Linear attenuation (1/cm) equivalent to ``HU_CAP`` at ``energy_kev``."""
    mu_water = float(np.interp(energy_kev, physics.ENERGY_GRID, physics.mass_attenuation("water")))
    return mu_water * (1.0 + HU_CAP / 1000.0)


def _check_mu(mu):
    mu = np.asarray(mu, dtype=np.float64)
    if not np.all(np.isfinite(mu)):
        raise PhantomError("attenuation must be finite")
    if np.any(mu < 0):
        raise PhantomError("attenuation must be non-negative")
    return mu


def water_density(mu, p: ThresholdParams = ThresholdParams()):
    mu = _check_mu(mu)
    # k_wc carries its own (negative) sign so the transition branch falls to ~0 at mu_c.
    rho = np.where(mu <= p.mu_w, p.k_w * mu,
                   np.where(mu < p.mu_c, p.k_w * p.mu_w + p.k_wc * (mu - p.mu_w), 0.0))
    rho = np.maximum(rho, 0.0)
    return float(rho) if rho.ndim == 0 else rho


def calcium_density(mu, p: ThresholdParams = ThresholdParams()):
    mu = _check_mu(mu)
    rho = np.where(mu >= p.mu_c, p.k_c * (mu - p.mu_c) + p.k_cw * (p.mu_c - p.mu_w),
                   np.where(mu > p.mu_w, p.k_cw * (mu - p.mu_w), 0.0))
    rho = np.maximum(rho, 0.0)
    return float(rho) if rho.ndim == 0 else rho


def decompose_attenuation(img: AttenuationImage, p: ThresholdParams = ThresholdParams(),
                          cap: float | None = None) -> MaterialImage:
    """Apply both threshold functions pixelwise after capping the attenuation."""
    cap = attenuation_cap() if cap is None else cap
    mu = np.minimum(img.grid, cap)
    return MaterialImage(water_density(mu, p), calcium_density(mu, p), img.pixel_size,
                         {"source": "threshold", "mu_cap": cap})


# -- procedural recipes ------------------------------------------------------

def _coords(n, pixel_size):
    c = (np.arange(n) - (n - 1) / 2.0) * pixel_size
    return np.meshgrid(c, c, indexing="ij")  # (y, x)


def _ellipse(yy, xx, cy, cx, ry, rx, theta=0.0):
    ct, st = np.cos(theta), np.sin(theta)
    dx, dy = xx - cx, yy - cy
    u = dx * ct + dy * st
    v = -dx * st + dy * ct
    return (u / rx) ** 2 + (v / ry) ** 2 <= 1.0


def _ellipse_chest(rng, n, ps):
    yy, xx = _coords(n, ps)
    half = n * ps / 2.0
    water = np.zeros((n, n))
    calcium = np.zeros((n, n))

    body = _ellipse(yy, xx, 0, 0, 0.62 * half, 0.88 * half)
    water[body] = rng.uniform(0.95, 1.05)
    # texture confined to the soft-tissue range
    tex = ndimage.gaussian_filter(rng.standard_normal((n, n)), n / 32.0)
    tex *= 0.03 / max(tex.std(), 1e-12)
    water[body] = np.clip(water[body] + tex[body], 0.9, 1.1)

    for side in (-1, 1):
        lung = _ellipse(yy, xx, -0.05 * half, side * 0.42 * half,
                        0.42 * half * rng.uniform(0.9, 1.05), 0.30 * half * rng.uniform(0.9, 1.05),
                        side * rng.uniform(0.0, 0.25))
        water[lung & body] = 0.0

    # spine: cortical calcium ring around a softer core
    sy = 0.42 * half
    spine = _ellipse(yy, xx, sy, 0, 0.14 * half, 0.12 * half)
    core = _ellipse(yy, xx, sy, 0, 0.08 * half, 0.07 * half)
    water[spine] = 0.4
    calcium[spine] = rng.uniform(0.9, 1.3)
    calcium[core] = rng.uniform(0.25, 0.4)

    # ribs along the body wall
    for k in range(rng.integers(4, 8)):
        ang = rng.uniform(0.15, np.pi - 0.15) * (1 if k % 2 else -1)
        ry, rx = 0.56 * half, 0.80 * half
        cy, cx = ry * np.sin(ang), rx * np.cos(ang)
        # never thinner than about a pixel, so small grids keep their ribs
        rib = _ellipse(yy, xx, cy, cx, max(0.035 * half, 0.75 * ps), max(0.06 * half, 1.25 * ps), ang)
        water[rib] = 0.3
        calcium[rib] = rng.uniform(0.8, 1.5)

    # contrast-like pool (aorta analogue)
    aorta = _ellipse(yy, xx, 0.15 * half, rng.uniform(-0.1, 0.1) * half, 0.09 * half, 0.09 * half)
    water[aorta] = 1.0
    calcium[aorta] = rng.uniform(0.1, 0.3)
    return water, calcium


DISK_INSERTS = (  # (water, calcium) g/ml
    (1.0, 0.1),
    (1.0, 0.3),
    (0.8, 0.6),
    (0.5, 1.0),
    (0.0, 1.5),
)


def _disk_inserts(rng, n, ps):
    yy, xx = _coords(n, ps)
    half = n * ps / 2.0
    water = np.zeros((n, n))
    calcium = np.zeros((n, n))
    body = _ellipse(yy, xx, 0, 0, 0.85 * half, 0.85 * half)
    water[body] = 1.0
    phase = rng.uniform(0, 2 * np.pi)
    inserts = []
    for k, (w, c) in enumerate(DISK_INSERTS):
        ang = phase + 2 * np.pi * k / len(DISK_INSERTS)
        mask = _ellipse(yy, xx, 0.5 * half * np.sin(ang), 0.5 * half * np.cos(ang),
                        0.16 * half, 0.16 * half)
        water[mask] = w
        calcium[mask] = c
        inserts.append(mask)
    return water, calcium, inserts


def _random_blobs(rng, n, ps):
    yy, xx = _coords(n, ps)
    half = n * ps / 2.0
    water = np.zeros((n, n))
    calcium = np.zeros((n, n))
    body = _ellipse(yy, xx, 0, 0, half * rng.uniform(0.7, 0.85), half * rng.uniform(0.75, 0.9),
                    rng.uniform(-0.3, 0.3))
    water[body] = rng.uniform(0.95, 1.05)
    for _ in range(rng.integers(1, 4)):
        hole = _ellipse(yy, xx, *rng.uniform(-0.4, 0.4, 2) * half, *rng.uniform(0.08, 0.2, 2) * half,
                        rng.uniform(0, np.pi))
        water[hole & body] = 0.0
    for _ in range(rng.integers(2, 6)):
        axes = np.maximum(rng.uniform(0.04, 0.12, 2) * half, 0.9 * ps)
        blob = _ellipse(yy, xx, *rng.uniform(-0.5, 0.5, 2) * half, *axes, rng.uniform(0, np.pi)) & body
        calcium[blob] = rng.uniform(0.1, 1.5)
        water[blob] = np.where(water[blob] > 0, rng.uniform(0.3, 1.0), 0.0)
    return water, calcium


def synth_phantom(seed: int, recipe: str = "ellipse-chest", size: int = 128,
                  pixel_size: float = 0.8) -> MaterialImage:
    """Procedural phantom; bit-identical output for a fixed (seed, recipe, size)."""
    if recipe not in RECIPES:
        raise PhantomError(f"unknown phantom recipe {recipe!r}; expected one of {RECIPES}")
    if size < 8:
        raise PhantomError("phantom size must be at least 8")
    rng = np.random.default_rng(seed)
    meta = {"recipe": recipe, "seed": int(seed), "recipe_version": RECIPE_VERSION}
    if recipe == "ellipse-chest":
        water, calcium = _ellipse_chest(rng, size, pixel_size)
    elif recipe == "disk-inserts":
        water, calcium, _ = _disk_inserts(rng, size, pixel_size)
    else:
        water, calcium = _random_blobs(rng, size, pixel_size)
    return MaterialImage(water, calcium, pixel_size, meta)


def disk_insert_masks(seed: int, size: int = 128, pixel_size: float = 0.8):
    """Masks and recipe densities of the disk-inserts phantom, in recipe order."""
    _, _, masks = _disk_inserts(np.random.default_rng(seed), size, pixel_size)
    return list(zip(masks, DISK_INSERTS))
