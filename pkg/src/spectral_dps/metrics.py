"""Image-quality metrics on material images.

SSIM uses an 11x11 Gaussian window (sigma 1.5), K1 = 0.01, K2 = 0.03 and
population statistics; the data range is the reference's max minus min inside
the evaluation mask.  Scores are averaged over the mask.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy import ndimage

MATERIALS = ("water", "calcium")
SSIM_SIGMA = 1.5
SSIM_TRUNCATE = 3.5  # radius 5 -> 11x11 window
K1, K2 = 0.01, 0.03


def fov_mask(shape, radius_fraction: float = 1.0) -> np.ndarray:
    """Inscribed circle of an (H, W) grid."""
    h, w = shape[-2:]
    yy, xx = np.mgrid[:h, :w]
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    r = radius_fraction * min(h, w) / 2.0
    return (yy - cy) ** 2 + (xx - cx) ** 2 <= r ** 2


def _planes(img):
    arr = img.stack() if hasattr(img, "stack") else np.asarray(img, dtype=np.float64)
    return np.asarray(arr, dtype=np.float64)


def _mask_for(shape, mask):
    if mask is None:
        return np.ones(shape[-2:], bool)
    mask = np.asarray(mask, bool)
    if mask.shape != tuple(shape[-2:]):
        raise ValueError(f"mask shape {mask.shape} != image shape {shape[-2:]}")
    return mask


def rmse(est, ref, mask=None) -> float:
    est, ref = np.asarray(est, float), np.asarray(ref, float)
    if est.shape != ref.shape:
        raise ValueError(f"shape mismatch {est.shape} vs {ref.shape}")
    m = _mask_for(ref.shape, mask)
    return float(np.sqrt(np.mean((est - ref)[..., m] ** 2)))


def psnr(est, ref, mask=None, data_range: float | None = None) -> float:
    est, ref = np.asarray(est, float), np.asarray(ref, float)
    m = _mask_for(ref.shape, mask)
    mse = np.mean((est - ref)[..., m] ** 2)
    if mse == 0:
        return math.inf
    if data_range is None:
        data_range = float(ref[..., m].max() - ref[..., m].min())
    if data_range <= 0:
        raise ValueError("data range must be positive")
    return float(10.0 * np.log10(data_range ** 2 / mse))


def ssim_map(est, ref, data_range: float) -> np.ndarray:
    est, ref = np.asarray(est, float), np.asarray(ref, float)
    if est.shape != ref.shape or est.ndim != 2:
        raise ValueError("ssim expects two images of the same (H, W) shape")
    f = lambda a: ndimage.gaussian_filter(a, SSIM_SIGMA, truncate=SSIM_TRUNCATE, mode="reflect")
    mx, my = f(est), f(ref)
    vx = f(est * est) - mx * mx
    vy = f(ref * ref) - my * my
    cxy = f(est * ref) - mx * my
    c1, c2 = (K1 * data_range) ** 2, (K2 * data_range) ** 2
    return ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))


def ssim(est, ref, mask=None, data_range: float | None = None) -> float:
    ref = np.asarray(ref, float)
    m = _mask_for(ref.shape, mask)
    if data_range is None:
        data_range = float(ref[m].max() - ref[m].min())
    if data_range <= 0:
        raise ValueError("reference is constant inside the mask; SSIM data range is zero")
    return float(ssim_map(est, ref, data_range)[m].mean())


@dataclass
class QualityReport:
    rmse: dict
    psnr: dict
    ssim: dict

    def to_dict(self) -> dict:
        return asdict(self)

    def rows(self):
        for k, name in enumerate(MATERIALS):
            yield name, self.rmse[name], self.psnr[name], self.ssim[name]


def quality_report(est, ref, mask=None) -> QualityReport:
    e, r = _planes(est), _planes(ref)
    if e.shape != r.shape:
        raise ValueError(f"estimate {e.shape} and reference {r.shape} differ")
    out = {"rmse": {}, "psnr": {}, "ssim": {}}
    for k, name in enumerate(MATERIALS):
        out["rmse"][name] = rmse(e[k], r[k], mask)
        out["psnr"][name] = psnr(e[k], r[k], mask)
        try:
            out["ssim"][name] = ssim(e[k], r[k], mask)
        except ValueError:
            out["ssim"][name] = float("nan")
    return QualityReport(**out)


@dataclass
class EnsembleStats:
    """Per-pixel ensemble maps, each (2, H, W), with population moments.

    ``std_norm`` is the L2 norm of the standard-deviation map and
    ``variance_norm`` the L2 norm of the variance (second central moment) map;
    both readings of the ensemble spread are reported.
    """

    mean_map: np.ndarray
    bias_map: np.ndarray  # |mean - truth|
    std_map: np.ndarray
    n: int
    mask: np.ndarray

    @property
    def variance_map(self) -> np.ndarray:
        return self.std_map ** 2

    def _norm(self, arr) -> np.ndarray:
        return np.sqrt((arr[:, self.mask] ** 2).sum(axis=1))

    @property
    def bias_norm(self) -> np.ndarray:
        return self._norm(self.bias_map)

    @property
    def std_norm(self) -> np.ndarray:
        return self._norm(self.std_map)

    @property
    def variance_norm(self) -> np.ndarray:
        return self._norm(self.variance_map)

    def to_dict(self) -> dict:
        out = {"ensemble_size": self.n, "mask_pixels": int(self.mask.sum())}
        for key in ("bias_norm", "std_norm", "variance_norm"):
            out[key] = dict(zip(MATERIALS, map(float, getattr(self, key))))
        return out


def ensemble_stats(samples, truth, mask=None) -> EnsembleStats:
    arr = np.stack([_planes(s) for s in samples])
    ref = _planes(truth)
    if arr.shape[0] < 2:
        raise ValueError("ensemble statistics need at least two samples")
    if arr.shape[1:] != ref.shape:
        raise ValueError(f"sample shape {arr.shape[1:]} != truth shape {ref.shape}")
    m = _mask_for(ref.shape, mask)
    mean = arr.mean(axis=0)
    return EnsembleStats(mean, np.abs(mean - ref), arr.std(axis=0), arr.shape[0], m)
