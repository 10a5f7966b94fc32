"""2-D line-integral operator, its adjoint, and filtered backprojection.

The forward operator is a ray-driven Siddon traversal: every ray's weights are
the exact intersection lengths (cm) with the pixels it crosses.  The weights
are assembled once per geometry into a sparse matrix, so ``backproject`` is the
exact transpose of ``project``.
"""

from __future__ import annotations

import functools
import warnings
from dataclasses import dataclass, replace

import numpy as np
from scipy import sparse

MM_PER_CM = 10.0


class GeometryError(ValueError):
    pass


@dataclass(frozen=True)
class Geometry:
    image_size: int = 128
    n_views: int = 360
    n_det: int = 192
    det_pitch: float = 1.0  # mm, at the detector
    pixel_size: float = 0.8  # mm
    arc: float = 360.0  # degrees
    beam: str = "parallel"
    sod: float = 600.0  # source-to-isocenter, mm (fan only)
    sdd: float = 1000.0  # source-to-detector, mm (fan only)
    angles: tuple | None = None  # explicit view angles (rad); overrides arc

    def __post_init__(self):
        if self.n_views < 1:
            raise GeometryError("n_views must be >= 1")
        if self.n_det < 1 or self.image_size < 1:
            raise GeometryError("n_det and image_size must be >= 1")
        if self.det_pitch <= 0 or self.pixel_size <= 0:
            raise GeometryError("det_pitch and pixel_size must be positive")
        if self.beam not in ("parallel", "fan"):
            raise GeometryError(f"unknown beam model {self.beam!r}")
        if self.beam == "fan" and not 0 < self.sod < self.sdd:
            raise GeometryError("fan beam needs 0 < sod < sdd")
        if self.angles is not None:
            a = np.asarray(self.angles, dtype=float)
            if a.size != self.n_views:
                raise GeometryError("len(angles) must equal n_views")
            if a.size > 1 and np.any(np.diff(a) <= 0):
                raise GeometryError("view angles must be strictly increasing")

    @property
    def view_angles(self) -> np.ndarray:
        if self.angles is not None:
            return np.asarray(self.angles, dtype=float)
        return np.deg2rad(self.arc) * np.arange(self.n_views) / self.n_views

    @property
    def n_rays(self) -> int:
        return self.n_views * self.n_det

    @property
    def sino_shape(self) -> tuple[int, int]:
        return self.n_views, self.n_det

    def det_coords(self) -> np.ndarray:
        return (np.arange(self.n_det) - (self.n_det - 1) / 2.0) * self.det_pitch

    def subset(self, views) -> "Geometry":
        """Geometry restricted to the given view indices (or boolean mask)."""
        ang = self.view_angles[np.asarray(views)]
        return replace(self, n_views=int(ang.size), angles=tuple(float(a) for a in ang))

    def to_meta(self) -> dict:
        meta = {f"geom_{k}": getattr(self, k) for k in
                ("image_size", "n_views", "n_det", "det_pitch", "pixel_size", "arc", "beam", "sod", "sdd")}
        if self.angles is not None:
            meta["geom_angles"] = " ".join(f"{a:.17g}" for a in self.angles)
        return meta

    @classmethod
    def from_meta(cls, meta: dict) -> "Geometry":
        kw = {}
        for k, typ in (("image_size", int), ("n_views", int), ("n_det", int), ("det_pitch", float),
                       ("pixel_size", float), ("arc", float), ("beam", str), ("sod", float),
                       ("sdd", float)):
            if f"geom_{k}" in meta:
                kw[k] = typ(meta[f"geom_{k}"])
        if "geom_angles" in meta:
            kw["angles"] = tuple(float(a) for a in str(meta["geom_angles"]).split())
        return cls(**kw)


def _ray_endpoints(geom: Geometry):
    theta = geom.view_angles[:, None]
    e = np.stack(np.broadcast_arrays(np.cos(theta), np.sin(theta)), -1)  # central ray direction
    u_axis = np.stack(np.broadcast_arrays(-np.sin(theta), np.cos(theta)), -1)
    u = geom.det_coords()[None, :, None]
    if geom.beam == "parallel":
        reach = geom.image_size * geom.pixel_size  # beyond the image diagonal / sqrt(2)
        mid = u * u_axis
        p0 = mid - reach * e
        p1 = mid + reach * e
        p0 = np.broadcast_to(p0, (geom.n_views, geom.n_det, 2))
        p1 = np.broadcast_to(p1, (geom.n_views, geom.n_det, 2))
    else:
        p0 = np.broadcast_to(-geom.sod * e, (geom.n_views, geom.n_det, 2))
        p1 = (geom.sdd - geom.sod) * e + u * u_axis
    return p0.reshape(-1, 2), p1.reshape(-1, 2)


def _siddon_chunk(p0, p1, n, ps):
    half = n * ps / 2.0
    planes = -half + ps * np.arange(n + 1)
    d = p1 - p0
    with np.errstate(divide="ignore", invalid="ignore"):
        ax = (planes[None, :] - p0[:, :1]) / d[:, :1]
        ay = (planes[None, :] - p0[:, 1:]) / d[:, 1:]
    flat_x = np.abs(d[:, 0]) < 1e-12
    flat_y = np.abs(d[:, 1]) < 1e-12
    inside_x = (p0[:, 0] > -half) & (p0[:, 0] < half)
    inside_y = (p0[:, 1] > -half) & (p0[:, 1] < half)
    ax[flat_x] = np.nan
    ay[flat_y] = np.nan

    lo_x = np.where(flat_x, np.where(inside_x, -np.inf, np.inf), np.minimum(ax[:, 0], ax[:, -1]))
    hi_x = np.where(flat_x, np.where(inside_x, np.inf, -np.inf), np.maximum(ax[:, 0], ax[:, -1]))
    lo_y = np.where(flat_y, np.where(inside_y, -np.inf, np.inf), np.minimum(ay[:, 0], ay[:, -1]))
    hi_y = np.where(flat_y, np.where(inside_y, np.inf, -np.inf), np.maximum(ay[:, 0], ay[:, -1]))
    a_min = np.maximum.reduce([np.zeros(len(p0)), lo_x, lo_y])
    a_max = np.minimum.reduce([np.ones(len(p0)), hi_x, hi_y])
    miss = ~(a_max > a_min)
    a_min[miss] = 0.0
    a_max[miss] = 0.0

    alphas = np.concatenate([ax, ay, a_min[:, None], a_max[:, None]], axis=1)
    alphas = np.where(np.isnan(alphas), a_min[:, None], alphas)
    alphas = np.clip(alphas, a_min[:, None], a_max[:, None])
    alphas.sort(axis=1)

    length = np.hypot(d[:, 0], d[:, 1])
    seg = np.diff(alphas, axis=1) * length[:, None]
    mid = 0.5 * (alphas[:, 1:] + alphas[:, :-1])
    mx = p0[:, :1] + mid * d[:, :1]
    my = p0[:, 1:] + mid * d[:, 1:]
    col = np.floor((mx + half) / ps).astype(np.int64)
    row = np.floor((my + half) / ps).astype(np.int64)
    keep = (seg > 1e-9 * ps) & (col >= 0) & (col < n) & (row >= 0) & (row < n)
    ray = np.broadcast_to(np.arange(len(p0))[:, None], seg.shape)
    return ray[keep], row[keep] * n + col[keep], seg[keep]


@functools.lru_cache(maxsize=8)
def system_matrix(geom: Geometry) -> sparse.csr_matrix:
    """Sparse (n_rays, n_pixels) matrix of intersection lengths in cm."""
    p0, p1 = _ray_endpoints(geom)
    n = geom.image_size
    rays, cols, vals = [], [], []
    chunk = 4096
    for start in range(0, len(p0), chunk):
        r, c, v = _siddon_chunk(p0[start:start + chunk], p1[start:start + chunk], n, geom.pixel_size)
        rays.append(r + start)
        cols.append(c)
        vals.append(v / MM_PER_CM)
    mat = sparse.csr_matrix((np.concatenate(vals), (np.concatenate(rays), np.concatenate(cols))),
                            shape=(geom.n_rays, n * n))
    mat.sum_duplicates()
    return mat


@functools.lru_cache(maxsize=8)
def _transpose(geom: Geometry) -> sparse.csr_matrix:
    return system_matrix(geom).T.tocsr()


def _check_image(img, geom):
    img = np.asarray(img, dtype=np.float64)
    if img.shape[-2:] != (geom.image_size, geom.image_size):
        raise GeometryError(f"image shape {img.shape[-2:]} does not match geometry "
                            f"({geom.image_size}, {geom.image_size})")
    return img


def project(img, geom: Geometry) -> np.ndarray:
    """Line integrals of ``img`` along every ray; shape ``(..., n_views, n_det)``.

    Leading axes are treated as a batch.
    """
    img = _check_image(img, geom)
    lead = img.shape[:-2]
    flat = img.reshape(-1, geom.image_size ** 2)
    out = (system_matrix(geom) @ flat.T).T
    return out.reshape(*lead, geom.n_views, geom.n_det)


def backproject(sino, geom: Geometry) -> np.ndarray:
    """Exact adjoint of :func:`project`."""
    sino = np.asarray(sino, dtype=np.float64)
    if sino.shape[-2:] != geom.sino_shape:
        raise GeometryError(f"sinogram shape {sino.shape[-2:]} does not match geometry {geom.sino_shape}")
    lead = sino.shape[:-2]
    flat = sino.reshape(-1, geom.n_rays)
    out = (_transpose(geom) @ flat.T).T
    return out.reshape(*lead, geom.image_size, geom.image_size)


# -- filtered backprojection -------------------------------------------------

def ramp_kernel(n_det: int, spacing: float, window: str = "ram-lak") -> np.ndarray:
    """Frequency response of the band-limited ramp filter, zero-padded length.

    Built from the sampled spatial-domain kernel, which keeps the DC term right.
    """
    size = max(64, int(2 ** np.ceil(np.log2(2 * n_det))))
    n = np.concatenate([np.arange(size // 2 + 1), np.arange(-size // 2 + 1, 0)])
    h = np.zeros(size)
    h[0] = 1.0 / (4 * spacing ** 2)
    odd = n % 2 == 1
    h[odd] = -1.0 / (np.pi * n[odd] * spacing) ** 2
    filt = np.real(np.fft.fft(h)) * spacing
    if window == "hann":
        freq = np.fft.fftfreq(size)
        filt *= 0.5 * (1 + np.cos(2 * np.pi * freq))
    elif window != "ram-lak":
        raise ValueError(f"unknown filter {window!r}; expected 'ram-lak' or 'hann'")
    return filt


def _filter_rows(sino, spacing, window):
    filt = ramp_kernel(sino.shape[-1], spacing, window)
    spec = np.fft.fft(sino, n=filt.size, axis=-1) * filt
    return np.real(np.fft.ifft(spec, axis=-1))[..., :sino.shape[-1]]


def _pixel_grid(geom):
    c = (np.arange(geom.image_size) - (geom.image_size - 1) / 2.0) * geom.pixel_size
    yy, xx = np.meshgrid(c, c, indexing="ij")
    return xx, yy


def fbp(sino, geom: Geometry, filter: str = "ram-lak") -> np.ndarray:
    """Filtered backprojection of line integrals (cm-weighted) into 1/cm units.

    Parallel beam needs 180 degrees of coverage; fan beam is reconstructed as a
    full scan with the flat-detector weighting.  Sparse or short scans are
    reconstructed anyway, with a warning.
    """
    sino = np.asarray(sino, dtype=np.float64)
    if sino.shape != geom.sino_shape:
        raise GeometryError(f"sinogram shape {sino.shape} does not match geometry {geom.sino_shape}")
    angles = geom.view_angles
    span = np.ptp(angles) + (2 * np.pi / geom.n_views if geom.angles is None else
                             (np.ptp(angles) / max(geom.n_views - 1, 1)))
    needed = np.pi if geom.beam == "parallel" else 2 * np.pi
    if span < needed * 0.999 or geom.n_views < 8:
        warnings.warn(f"angular coverage {np.rad2deg(span):.1f} deg over {geom.n_views} views "
                      "is short for filtered backprojection", RuntimeWarning, stacklevel=2)

    xx, yy = _pixel_grid(geom)
    out = np.zeros_like(xx)
    weight = np.pi / geom.n_views
    u0 = (geom.n_det - 1) / 2.0
    if geom.beam == "parallel":
        q = _filter_rows(sino, geom.det_pitch / MM_PER_CM, filter)
        for k, th in enumerate(angles):
            t = -xx * np.sin(th) + yy * np.cos(th)
            out += np.interp(t / geom.det_pitch + u0, np.arange(geom.n_det), q[k], left=0.0, right=0.0)
        return out * weight

    mag = geom.sdd / geom.sod
    s = geom.det_coords() / mag  # virtual detector through isocenter, mm
    pre = sino * geom.sod / np.sqrt(geom.sod ** 2 + s ** 2)
    q = _filter_rows(pre, geom.det_pitch / mag / MM_PER_CM, filter)
    for k, th in enumerate(angles):
        e = xx * np.cos(th) + yy * np.sin(th)
        along = -xx * np.sin(th) + yy * np.cos(th)
        U = (geom.sod + e) / geom.sod
        s_proj = along / U
        out += np.interp(s_proj * mag / geom.det_pitch + u0, np.arange(geom.n_det), q[k],
                         left=0.0, right=0.0) / U ** 2
    return out * weight


def fov_mask(geom: Geometry) -> np.ndarray:
    """Pixels whose centres every view's detector covers (circular field of view)."""
    xx, yy = _pixel_grid(geom)
    half_det = geom.n_det * geom.det_pitch / 2.0
    radius = half_det if geom.beam == "parallel" else half_det * geom.sod / geom.sdd
    radius = min(radius, geom.image_size * geom.pixel_size / 2.0)
    return np.hypot(xx, yy) <= radius - geom.pixel_size / 2.0
