"""Polyenergetic spectral CT measurement model.

Mean counts per channel ``c`` and ray ``r``::

    ybar[c, r] = B[c] * sum_E W[c, E] * exp(-sum_m Q[m, E] * (A x_m)[r])

where ``W`` folds the source spectrum, detector absorption and (optionally)
energy weighting.  Noise is Poisson; the fidelity uses the Gaussian
approximation with diagonal covariance ``K = max(y, 1)``.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path

import numpy as np

from . import projector
from .projector import Geometry

ENERGY_GRID = np.arange(10.0, 151.0, 1.0)  # keV, 1 keV bins
BIN_WIDTH = 1.0
CSI_DENSITY = 4.51  # g/cm^3
MATERIALS = ("water", "calcium")
KINDS = ("dual-kvp", "dual-layer", "monoenergetic")
VARIANCE_FLOOR = 1.0  # counts


class PhysicsError(ValueError):
    pass


@functools.lru_cache(maxsize=None)
def _asset(name: str) -> np.ndarray:
    path = resources.files("spectral_dps") / "data" / f"{name}.csv"
    with resources.as_file(path) as p:
        energies, values = read_csv_asset(p)
    if not np.allclose(energies, ENERGY_GRID):
        raise PhysicsError(f"asset {name} is not on the 10-150 keV grid")
    return values


def mass_attenuation(material: str) -> np.ndarray:
    """Mass attenuation (cm^2/g) of water, calcium, aluminum or csi on ENERGY_GRID."""
    return _asset(f"mu_{material.lower()}").copy()


def source_spectrum(kvp: int) -> np.ndarray:
    """Filtered source spectrum, photons per keV bin per mAs per ray."""
    return _asset(f"spectrum_{int(kvp)}kvp").copy()


def read_csv_asset(path) -> tuple[np.ndarray, np.ndarray]:
    """(energy_keV, value) columns of a CSV with optional ``#`` comments and a header row."""
    with open(path) as f:
        rows = [ln for ln in f if ln.strip() and not ln.lstrip().startswith("#")]
    data = np.loadtxt(rows[1:], delimiter=",", ndmin=2)
    return data[:, 0], data[:, 1]


@dataclass
class SpectralSystem:
    kind: str
    energies: np.ndarray
    spectra: np.ndarray  # (C, E) photons per bin per ray at the configured exposure
    response: np.ndarray  # (C, E) absorbed fraction
    Q: np.ndarray  # (2, E) cm^2/g
    gains: np.ndarray  # (C,)
    view_mask: np.ndarray  # (C, n_views) bool
    labels: tuple = ()
    energy_weighted: bool = False
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        self.energies = np.asarray(self.energies, float)
        self.spectra = np.atleast_2d(np.asarray(self.spectra, float))
        self.response = np.atleast_2d(np.asarray(self.response, float))
        self.Q = np.atleast_2d(np.asarray(self.Q, float))
        self.gains = np.asarray(self.gains, float).reshape(-1)
        self.view_mask = np.asarray(self.view_mask, bool)
        n_e = self.energies.size
        if np.any(np.diff(self.energies) <= 0):
            raise PhysicsError("energy grid must be strictly increasing")
        if self.spectra.shape[1] != n_e or self.response.shape[1] != n_e or self.Q.shape[1] != n_e:
            raise PhysicsError("spectra, response and Q must share the energy grid")
        if self.Q.shape[0] != 2:
            raise PhysicsError("Q must have one row per basis material (water, calcium)")
        if np.any(self.spectra < 0):
            raise PhysicsError("spectra must be non-negative")
        if np.any(self.response < 0) or np.any(self.response > 1):
            raise PhysicsError("detector response must lie in [0, 1]")
        if not (self.spectra.shape[0] == self.response.shape[0] == self.gains.size
                == self.view_mask.shape[0]):
            raise PhysicsError("per-channel arrays disagree on the channel count")
        if not np.all(self.view_mask.any(axis=0)):
            raise PhysicsError("every view needs at least one active channel")

    @property
    def n_channels(self) -> int:
        return self.spectra.shape[0]

    @property
    def n_views(self) -> int:
        return self.view_mask.shape[1]

    @property
    def weights(self) -> np.ndarray:
        """Effective per-channel energy weights including gain, shape (C, E)."""
        w = self.spectra * self.response * BIN_WIDTH
        if self.energy_weighted:
            w = w * self.energies
        return w * self.gains[:, None]

    def air_scan(self) -> np.ndarray:
        return self.weights.sum(axis=1)

    def mean_energy(self) -> np.ndarray:
        w = self.spectra * self.response
        return (w * self.energies).sum(1) / w.sum(1)

    def with_Q(self, Q) -> "SpectralSystem":
        return replace(self, Q=np.asarray(Q, float))


def _csi_absorption(thickness_cm):
    return 1.0 - np.exp(-mass_attenuation("csi") * CSI_DENSITY * thickness_cm)


def make_system(kind: str, n_views: int, mas_per_view: float = 0.05,
                photons_per_mas: float = 1.0e6, energy_weighted: bool = False,
                gains=None, kvps=(80, 120), layers_cm=(0.03, 0.06),
                mono_kev=(60.0, 100.0)) -> SpectralSystem:
    """Build a dual-kVp, dual-layer or two-channel monoenergetic system.

    ``photons_per_mas`` rescales the shipped spectra, whose 120 kVp member
    integrates to 1e6 photons per mAs per ray.
    """
    if kind not in KINDS:
        raise PhysicsError(f"unknown system kind {kind!r}; expected one of {KINDS}")
    if mas_per_view <= 0 or photons_per_mas <= 0:
        raise PhysicsError("exposure must be positive")
    scale = mas_per_view * photons_per_mas / 1.0e6
    Q = np.stack([mass_attenuation("water"), mass_attenuation("calcium")])
    n_e = ENERGY_GRID.size
    params = dict(kind=kind, n_views=n_views, mas_per_view=mas_per_view,
                  photons_per_mas=photons_per_mas, energy_weighted=energy_weighted)
    if kind == "dual-kvp":
        spectra = np.stack([source_spectrum(k) for k in kvps]) * scale
        absorb = _csi_absorption(layers_cm[1])
        response = np.stack([absorb, absorb])
        mask = np.zeros((2, n_views), bool)
        mask[0, 0::2] = True  # tube alternates every other view
        mask[1, 1::2] = True
        labels = tuple(f"{k}kVp" for k in kvps)
        params.update(kvps=list(kvps), layer_cm=layers_cm[1])
    elif kind == "dual-layer":
        spec = source_spectrum(kvps[1]) * scale
        spectra = np.stack([spec, spec])
        top = _csi_absorption(layers_cm[0])
        bottom = (1.0 - top) * _csi_absorption(layers_cm[1])  # air gap between layers
        response = np.stack([top, bottom])
        mask = np.ones((2, n_views), bool)
        labels = ("top", "bottom")
        params.update(kvp=kvps[1], layers_cm=list(layers_cm))
    else:
        spectra = np.zeros((2, n_e))
        for c, e in enumerate(mono_kev):
            spectra[c, np.searchsorted(ENERGY_GRID, e)] = photons_per_mas * mas_per_view
        response = np.ones((2, n_e))
        mask = np.ones((2, n_views), bool)
        labels = tuple(f"{e:g}keV" for e in mono_kev)
        params.update(mono_kev=list(mono_kev))
    gains = np.ones(2) if gains is None else np.asarray(gains, float)
    params["gains"] = [float(g) for g in gains]
    return SpectralSystem(kind, ENERGY_GRID.copy(), spectra, response, Q, gains, mask,
                          labels, energy_weighted, params)


def system_to_text(sys: SpectralSystem, asset_dir=None) -> str:
    """Text config for ``sys``; writes its per-channel CSV assets into ``asset_dir``."""
    lines = [f"{k}: {' '.join(map(str, v)) if isinstance(v, (list, tuple)) else v}"
             for k, v in sys.params.items()]
    if asset_dir is not None:
        asset_dir = Path(asset_dir)
        asset_dir.mkdir(parents=True, exist_ok=True)
        for c in range(sys.n_channels):
            for name, arr in (("spectrum", sys.spectra[c]), ("response", sys.response[c])):
                fname = f"{name}_ch{c}.csv"
                _write_csv(asset_dir / fname, sys.energies, arr)
                lines.append(f"{name}_ch{c}: {fname}")
        for m, mat in enumerate(MATERIALS):
            fname = f"mu_{mat}.csv"
            _write_csv(asset_dir / fname, sys.energies, sys.Q[m])
            lines.append(f"q_{mat}: {fname}")
    return "\n".join(lines) + "\n"


def _write_csv(path, energies, values):
    with open(path, "w") as f:
        f.write("energy_keV,value\n")
        for e, v in zip(energies, values):
            f.write(f"{e:.6g},{v:.17g}\n")


def system_from_text(text: str, asset_dir=None) -> SpectralSystem:
    kv = {}
    for line in text.splitlines():
        if line.strip() and not line.startswith("#"):
            k, _, v = line.partition(":")
            kv[k.strip()] = v.strip()
    kind = kv["kind"]
    kw = dict(mas_per_view=float(kv["mas_per_view"]), photons_per_mas=float(kv["photons_per_mas"]),
              energy_weighted=kv.get("energy_weighted", "False") == "True",
              gains=[float(g) for g in kv["gains"].split()])
    if "kvps" in kv:
        kw["kvps"] = tuple(int(k) for k in kv["kvps"].split())
    if "mono_kev" in kv:
        kw["mono_kev"] = tuple(float(k) for k in kv["mono_kev"].split())
    if "layers_cm" in kv:
        kw["layers_cm"] = tuple(float(k) for k in kv["layers_cm"].split())
    sys = make_system(kind, int(kv["n_views"]), **kw)
    if asset_dir is not None and "spectrum_ch0" in kv:
        asset_dir = Path(asset_dir)
        spectra = np.stack([read_csv_asset(asset_dir / kv[f"spectrum_ch{c}"])[1]
                            for c in range(sys.n_channels)])
        response = np.stack([read_csv_asset(asset_dir / kv[f"response_ch{c}"])[1]
                             for c in range(sys.n_channels)])
        Q = np.stack([read_csv_asset(asset_dir / kv[f"q_{m}"])[1] for m in MATERIALS])
        sys = replace(sys, spectra=spectra, response=response, Q=Q)
    return sys


@dataclass
class SpectralSinogram:
    counts: np.ndarray  # (C, n_views, n_det)
    variance: np.ndarray  # (C, n_views, n_det), diagonal of K
    mask: np.ndarray  # (C, n_views) active (view, channel) pairs
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.counts = np.asarray(self.counts, float)
        self.variance = np.asarray(self.variance, float)
        self.mask = np.asarray(self.mask, bool)
        if self.counts.shape != self.variance.shape:
            raise PhysicsError("counts and variance shapes differ")
        if np.any(self.variance[self.mask] <= 0):
            raise PhysicsError("variance must be positive on active rays")

    @property
    def ray_mask(self) -> np.ndarray:
        return np.broadcast_to(self.mask[:, :, None], self.counts.shape)


def _stack(x) -> np.ndarray:
    return np.asarray(x.stack() if hasattr(x, "stack") else x, dtype=np.float64)


def _check(sys: SpectralSystem, geom: Geometry):
    if sys.n_views != geom.n_views:
        raise PhysicsError(f"system has {sys.n_views} views, geometry {geom.n_views}")


def forward_rays(l: np.ndarray, sys: SpectralSystem, derivatives: int = 0):
    """Mean counts (and derivatives) from material line integrals.

    ``l`` has shape (..., 2, n_rays).  Returns ``ybar`` of shape (..., C, n_rays),
    then optionally d ybar/d l of shape (..., C, 2, n_rays) and the second
    derivative (..., C, 2, 2, n_rays).
    """
    l = np.asarray(l, dtype=np.float64)
    lead, n_rays = l.shape[:-2], l.shape[-1]
    # bins no channel sees are dropped: they add nothing and overflow first
    # (0 * inf) when a sampler visits negative densities
    w = sys.weights
    live = np.any(w != 0, axis=0)
    w, Q = w[:, live], sys.Q[:, live]
    # energies on the contracted axis so every product is a plain matmul
    att = np.exp(-np.matmul(Q.T, l))  # (..., E, R)
    C = w.shape[0]
    ybar = np.matmul(w, att)
    if derivatives == 0:
        return ybar
    wq = -(w[:, None, :] * Q[None]).reshape(2 * C, -1)
    d1 = np.matmul(wq, att).reshape(*lead, C, 2, n_rays)
    if derivatives == 1:
        return ybar, d1
    wqq = (w[:, None, None, :] * Q[None, :, None] * Q[None, None]).reshape(4 * C, -1)
    d2 = np.matmul(wqq, att).reshape(*lead, C, 2, 2, n_rays)
    return ybar, d1, d2


def mean_measurement(x, sys: SpectralSystem, geom: Geometry) -> SpectralSinogram:
    """Noiseless mean counts; inactive (channel, view) pairs are zero."""
    _check(sys, geom)
    xs = _stack(x)
    if np.any(xs < 0):
        meta = {"negative_density": True}
    else:
        meta = {}
    l = projector.project(xs, geom).reshape(*xs.shape[:-2], geom.n_rays)
    ybar = forward_rays(l, sys).reshape(*xs.shape[:-3], sys.n_channels, *geom.sino_shape)
    mask = np.broadcast_to(sys.view_mask[:, :, None], ybar.shape)
    ybar = np.where(mask, ybar, 0.0)
    variance = np.where(mask, np.maximum(ybar, VARIANCE_FLOOR), 1.0)
    meta.update(kind=sys.kind, channels=" ".join(sys.labels), noise="none")
    return SpectralSinogram(ybar, variance, sys.view_mask.copy(), meta)


def sample_measurement(mean: SpectralSinogram, seed: int) -> SpectralSinogram:
    """Independent Poisson draws on every active ray."""
    active = mean.ray_mask
    if np.any(mean.counts[active] <= 0) or not np.all(np.isfinite(mean.counts[active])):
        raise PhysicsError("mean counts must be positive and finite on active rays")
    rng = np.random.default_rng(seed)
    counts = np.where(active, rng.poisson(np.where(active, mean.counts, 0.0)), 0).astype(float)
    variance = np.where(active, np.maximum(counts, VARIANCE_FLOOR), 1.0)
    meta = dict(mean.meta, noise="poisson", noise_seed=int(seed))
    return SpectralSinogram(counts, variance, mean.mask.copy(), meta)


def _residual(xs, y: SpectralSinogram, sys, geom, derivatives):
    _check(sys, geom)
    if np.any(y.variance[y.ray_mask] <= 0):
        raise PhysicsError("variance must be positive on active rays")
    lead = xs.shape[:-3]
    l = projector.project(xs, geom).reshape(*lead, 2, geom.n_rays)
    out = forward_rays(l, sys, derivatives)
    ybar = out[0] if derivatives else out
    C = sys.n_channels
    counts = y.counts.reshape(C, -1)
    active = y.ray_mask.reshape(C, -1)
    inv_var = np.where(active, 1.0 / y.variance.reshape(C, -1), 0.0)
    resid = np.where(active, ybar - counts, 0.0)
    return resid, inv_var, out


def data_fidelity(x, y: SpectralSinogram, sys: SpectralSystem, geom: Geometry):
    """Weighted squared residual sum((ybar(x) - y)^2 / K) over active rays.

    Batched inputs (..., 2, H, W) give one value per batch element.
    """
    xs = _stack(x)
    resid, inv_var, _ = _residual(xs, y, sys, geom, 0)
    val = (resid ** 2 * inv_var).sum(axis=(-2, -1))
    return float(val) if np.ndim(val) == 0 else val


def fidelity_and_gradient(x, y: SpectralSinogram, sys: SpectralSystem, geom: Geometry):
    """Fidelity value(s) and the analytic gradient w.r.t. both density planes."""
    xs = _stack(x)
    resid, inv_var, (ybar, d1) = _residual(xs, y, sys, geom, 1)
    val = (resid ** 2 * inv_var).sum(axis=(-2, -1))
    wr = 2.0 * resid * inv_var  # (..., C, R)
    dl = np.einsum("...cr,...cmr->...mr", wr, d1)
    grad = projector.backproject(dl.reshape(*dl.shape[:-1], *geom.sino_shape), geom)
    return (float(val) if np.ndim(val) == 0 else val), grad


def data_fidelity_gradient(x, y: SpectralSinogram, sys: SpectralSystem, geom: Geometry) -> np.ndarray:
    return fidelity_and_gradient(x, y, sys, geom)[1]
