"""Material decomposition algorithms.

* :func:`image_domain_decomposition` -- per-channel FBP followed by a calibrated
  2x2 per-pixel inversion.
* :func:`mbmd` -- penalized weighted least squares under the polyenergetic
  model, solved with monotone separable-surrogate updates.
* :func:`sdps` -- diffusion posterior sampling with the exact chain rule
  through the denoiser.
* :func:`jsdps` -- the jumpstarted variant: start at ``T'`` from a noised
  first-pass estimate, optionally dropping the denoiser Jacobian.

The samplers run in the score model's units; ``model.scale`` converts to g/ml
before the measurement model is evaluated.
"""

from __future__ import annotations

import functools
import logging
import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import physics, projector
from .diffusion import (DiffusionSchedule, ScoreModel, as_rngs, draw_normal, reverse_chain)
from .phantoms import MaterialImage
from .physics import SpectralSinogram, SpectralSystem
from .projector import Geometry

log = logging.getLogger(__name__)


class DecompositionError(RuntimeError):
    pass


@dataclass
class DecompositionResult:
    estimate: MaterialImage
    iterations: int
    wall_time: float
    trace: np.ndarray
    algorithm: str
    config: dict = field(default_factory=dict)
    raw: np.ndarray | None = None  # unclamped estimate, (2, H, W)


STEP_KINDS = ("residual-normalized", "constant", "score-matched")


@dataclass(frozen=True)
class StepSizeSchedule:
    """Likelihood step size eta_t.

    residual-normalized: eta / ||ybar(x0_hat) - y||_{K^-1}
    constant:            eta
    score-matched:       eta * beta_t / (2 sqrt(alpha_t)); with eta = 1 the
                         guidance equals the DDPM mean shift of an exact
                         likelihood score under the x0_hat plug-in.
    """

    kind: str = "residual-normalized"
    eta: float = 1.0

    def __post_init__(self):
        if self.kind not in STEP_KINDS:
            raise ValueError(f"unknown step-size kind {self.kind!r}; expected one of {STEP_KINDS}")
        if self.eta < 0:
            raise ValueError("eta must be non-negative")

    def __call__(self, t: int, sched: DiffusionSchedule, fidelity) -> np.ndarray:
        fidelity = np.asarray(fidelity, dtype=np.float64)
        if self.kind == "constant":
            return np.full(fidelity.shape, self.eta)
        if self.kind == "score-matched":
            return np.full(fidelity.shape, self.eta * sched.beta[t] / (2.0 * np.sqrt(sched.alpha[t])))
        return self.eta / np.sqrt(np.maximum(fidelity, 1e-300))


# -- image-domain decomposition ---------------------------------------------

CALIBRATION_INSERTS = ((1.0, 0.0), (0.0, 0.5), (0.6, 0.3), (0.3, 1.0))  # (water, calcium) g/ml
CALIBRATION_RIDGE = 1e-6
MAX_CONDITION = 1e8


def _log_line_integrals(y: SpectralSinogram, sys: SpectralSystem):
    air = sys.air_scan()
    return -np.log(np.maximum(y.counts, 1.0) / air[:, None, None])


def channel_fbp(y: SpectralSinogram, sys: SpectralSystem, geom: Geometry, filter: str = "hann"):
    """Effective attenuation image (1/cm) per channel from that channel's views."""
    p = _log_line_integrals(y, sys)

    def distinct(angles):
        return np.unique(np.round(np.mod(angles, np.pi), 9)).size

    full = distinct(geom.view_angles)
    out = []
    for c in range(sys.n_channels):
        views = np.flatnonzero(y.mask[c])
        sub = geom.subset(views)
        if geom.beam == "parallel" and distinct(sub.view_angles) < full:
            warnings.warn(f"channel {c} samples {distinct(sub.view_angles)} of the scan's {full} distinct "
                          f"parallel-beam angles (its opposed views repeat); use n_views/2 odd for dual-kVp",
                          RuntimeWarning, stacklevel=2)
        out.append(projector.fbp(p[c, views], sub, filter))
    return np.stack(out)


def _calibration_phantoms(geom: Geometry):
    """One scan per insert: a centred insert inside a water cylinder.

    Separate scans keep streaks from dense inserts out of the other ROIs, and
    the shared surround gives every insert the same beam hardening.
    """
    n, ps = geom.image_size, geom.pixel_size
    c = (np.arange(n) - (n - 1) / 2.0) * ps
    yy, xx = np.meshgrid(c, c, indexing="ij")
    r = np.hypot(xx, yy) / (n * ps / 2.0)
    body = r <= 0.85
    insert = r <= 0.45
    roi = r <= 0.3
    scans = []
    for w, ca in CALIBRATION_INSERTS:
        water = np.where(insert, w, np.where(body, 1.0, 0.0))
        calcium = np.where(insert, ca, 0.0)
        scans.append(np.stack([water, calcium]))
    return scans, roi


@dataclass
class Calibration:
    matrix: np.ndarray  # (C, 2): channel attenuation per unit density
    ridge: float
    condition: float
    insert_densities: np.ndarray
    insert_attenuation: np.ndarray

    def invert(self, mu: np.ndarray) -> np.ndarray:
        """Map per-channel attenuation (C, H, W) to densities (2, H, W)."""
        M = self.matrix
        lhs = M.T @ M + self.ridge * np.eye(2)
        rhs = np.einsum("cm,c...->m...", M, mu)
        return np.linalg.solve(lhs, rhs.reshape(2, -1)).reshape(2, *mu.shape[1:])


def calibrate(sys: SpectralSystem, geom: Geometry, filter: str = "hann") -> Calibration:
    """Least-squares fit of channel attenuation against known insert densities."""
    scans, roi = _calibration_phantoms(geom)
    rho = np.array(CALIBRATION_INSERTS)  # (K, 2)
    meas = []
    for phantom in scans:
        mu = channel_fbp(physics.mean_measurement(phantom, sys, geom), sys, geom, filter)
        meas.append(mu[:, roi].mean(axis=1))
    meas = np.array(meas)  # (K, C)
    lhs = rho.T @ rho + CALIBRATION_RIDGE * np.eye(2)
    M = np.linalg.solve(lhs, rho.T @ meas).T  # (C, 2)
    cond = np.linalg.cond(M)
    if not np.isfinite(cond) or cond > MAX_CONDITION:
        raise DecompositionError(f"calibration matrix is singular (condition number {cond:.3g})")
    return Calibration(M, CALIBRATION_RIDGE, float(cond), rho, meas)


_calibration_cache: dict = {}


def _cached_calibration(sys, geom, filter):
    key = (id(sys), geom, filter)
    hit = _calibration_cache.get(key)
    if hit is None or hit[0] is not sys:
        hit = (sys, calibrate(sys, geom, filter))
        _calibration_cache[key] = hit
    return hit[1]


def image_domain_decomposition(y: SpectralSinogram, sys: SpectralSystem, geom: Geometry,
                               calibration: Calibration | None = None, filter: str = "hann",
                               clamp: bool = False) -> MaterialImage:
    if sys.n_channels < 2:
        raise DecompositionError("image-domain decomposition needs two spectral channels")
    cal = calibration or _cached_calibration(sys, geom, filter)
    rho = cal.invert(channel_fbp(y, sys, geom, filter))
    img = MaterialImage(rho[0], rho[1], geom.pixel_size,
                        {"algorithm": "image-domain", "filter": filter, "calibration_condition": cal.condition})
    return img.clamped() if clamp else img


# -- MBMD --------------------------------------------------------------------

def roughness(img: np.ndarray) -> float:
    """Sum of squared forward differences along both axes."""
    return float((np.diff(img, axis=0) ** 2).sum() + (np.diff(img, axis=1) ** 2).sum())


def roughness_gradient(img: np.ndarray) -> np.ndarray:
    g = np.zeros_like(img)
    dy = np.diff(img, axis=0)
    dx = np.diff(img, axis=1)
    g[1:] += 2 * dy
    g[:-1] -= 2 * dy
    g[:, 1:] += 2 * dx
    g[:, :-1] -= 2 * dx
    return g


@functools.lru_cache(maxsize=4)
def _neighbour_count(n: int) -> np.ndarray:
    deg = np.full((n, n), 4.0)
    deg[0] -= 1
    deg[-1] -= 1
    deg[:, 0] -= 1
    deg[:, -1] -= 1
    return deg


def mbmd_objective(x, y, sys, geom, lam_w, lam_c) -> float:
    x = np.asarray(x)
    return (physics.data_fidelity(x, y, sys, geom)
            + lam_w * roughness(x[0]) + lam_c * roughness(x[1]))


def mbmd(y: SpectralSinogram, sys: SpectralSystem, geom: Geometry, lam_w: float = 1e-4,
         lam_c: float = 4e-4, n_iter: int = 1000, init: str | np.ndarray = "zero",
         clamp: bool = True, momentum: bool = True, max_backtracks: int = 40,
         callback=None) -> DecompositionResult:
    """Separable-surrogate descent on fidelity + lam_w R(water) + lam_c R(calcium).

    Each iteration minimizes a surrogate that is separable across pixels: a
    2x2 curvature per pixel, ``A^T (C_r * A 1)``, built from each ray's
    Gauss-Newton term plus the positive part of its residual term, with the
    penalty curvature ``4 lam deg_j`` on the diagonal.  The curvature is
    doubled until the surrogate step does not increase the objective.

    With ``momentum`` the surrogate step is taken from an extrapolated point
    (monotone FISTA): a step that fails to improve on the current iterate is
    discarded and the momentum restarts, so the trace stays non-increasing.
    """
    if lam_w < 0 or lam_c < 0:
        raise ValueError("regularization strengths must be non-negative")
    if n_iter < 1:
        raise ValueError("n_iter must be >= 1")
    physics._check(sys, geom)
    n = geom.image_size
    if isinstance(init, str):
        if init == "zero":
            x = np.zeros((2, n, n))
        elif init == "image-domain":
            x = image_domain_decomposition(y, sys, geom).stack()
        else:
            raise ValueError(f"unknown MBMD initialization {init!r}")
    else:
        x = np.array(init, dtype=np.float64)
    lam = np.array([lam_w, lam_c])
    A = projector.system_matrix(geom)
    row_sums = np.asarray(A.sum(axis=1)).ravel()
    pen_curv = 4.0 * lam[:, None, None] * _neighbour_count(n)[None]

    C = sys.n_channels
    active = y.ray_mask.reshape(C, -1)
    inv_var = np.where(active, 1.0 / y.variance.reshape(C, -1), 0.0)
    counts = y.counts.reshape(C, -1)

    def evaluate(x, derivs):
        l = projector.project(x, geom).reshape(2, -1)
        out = physics.forward_rays(l, sys, derivs)
        ybar = out[0] if derivs else out
        r = np.where(active, ybar - counts, 0.0)
        obj = float((r ** 2 * inv_var).sum() + lam_w * roughness(x[0]) + lam_c * roughness(x[1]))
        return obj, r, out

    def surrogate_step(v, r, d1, d2, obj_v):
        wr = 2.0 * r * inv_var
        dl = np.einsum("cr,cmr->mr", wr, d1)
        grad = projector.backproject(dl.reshape(2, *geom.sino_shape), geom)
        grad[0] += lam_w * roughness_gradient(v[0])
        grad[1] += lam_c * roughness_gradient(v[1])
        # per-ray PSD 2x2 curvature in line-integral space, spread over pixels
        # with the row-sum (De Pierro) weights; materials stay coupled per pixel
        curv = 2.0 * inv_var[:, None, None] * (d1[:, :, None] * d1[:, None, :]
                                               + np.maximum(r, 0.0)[:, None, None] * d2)
        curv = curv.sum(axis=0) * row_sums  # (2, 2, R)
        packed = np.stack([curv[0, 0], curv[0, 1], curv[1, 1]]).reshape(3, *geom.sino_shape)
        dww, dwc, dcc = projector.backproject(packed, geom)
        dww = dww + pen_curv[0]
        dcc = dcc + pen_curv[1]
        scale = 1.0
        for _ in range(max_backtracks):
            a, b, d = dww * scale, dwc * scale, dcc * scale
            det = np.maximum(a * d - b * b, 1e-300)
            z = v - np.stack([d * grad[0] - b * grad[1], a * grad[1] - b * grad[0]]) / det
            obj_z, r_z, out_z = evaluate(z, 2)
            if np.isfinite(obj_z) and obj_z <= obj_v:
                return z, obj_z, r_z, out_z
            scale *= 2.0
        return v, obj_v, r, (None, d1, d2)

    start = time.perf_counter()
    obj, r, (_, d1, d2) = evaluate(x, 2)
    if not np.isfinite(obj):
        raise DecompositionError("non-finite MBMD objective at the initial image")
    v, obj_v, r_v, d1_v, d2_v = x, obj, r, d1, d2
    t_mom = 1.0
    trace = np.empty(n_iter)
    for it in range(n_iter):
        z, obj_z, r_z, (_, d1_z, d2_z) = surrogate_step(v, r_v, d1_v, d2_v, obj_v)
        if obj_z <= obj:
            x_new, obj_new, r_new, d1_new, d2_new = z, obj_z, r_z, d1_z, d2_z
        else:
            # momentum overshot: keep the previous iterate and restart
            x_new, obj_new, r_new, d1_new, d2_new = x, obj, r, d1, d2
        if not np.isfinite(obj_new):
            raise DecompositionError(f"non-finite MBMD objective at iteration {it}")
        if momentum and obj_z <= obj:
            t_next = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t_mom ** 2))
            v = x_new + ((t_mom - 1.0) / t_next) * (x_new - x)
            t_mom = t_next
        else:
            v, t_mom = x_new, 1.0
        x, obj, r, d1, d2 = x_new, obj_new, r_new, d1_new, d2_new
        if v is x:
            obj_v, r_v, d1_v, d2_v = obj, r, d1, d2
        else:
            obj_v, r_v, (_, d1_v, d2_v) = evaluate(v, 2)
            if not np.isfinite(obj_v):
                v, obj_v, r_v, d1_v, d2_v, t_mom = x, obj, r, d1, d2, 1.0
        trace[it] = obj
        if callback is not None:
            callback(it, x, obj)
    wall = time.perf_counter() - start
    est = MaterialImage(x[0], x[1], geom.pixel_size, {"algorithm": "mbmd"})
    cfg = {"lam_w": lam_w, "lam_c": lam_c, "n_iter": n_iter,
           "init": init if isinstance(init, str) else "array", "clamp": clamp, "momentum": momentum}
    return DecompositionResult(est.clamped() if clamp else est, n_iter, wall, trace, "mbmd", cfg, x)


# -- diffusion posterior sampling -------------------------------------------

# Likelihood evaluation range for x0_hat in g/ml.  Early in the chain x0_hat
# amplifies the network error by 1/sqrt(alpha_bar); negative densities of that
# size overflow exp(-Q A x), so the forward model only sees physical values.
X0_CLIP = (0.0, 3.0)


def _likelihood_guidance(y, sys, geom, model: ScoreModel, sched, step: StepSizeSchedule,
                         chain: bool, trace: list, x0_clip=X0_CLIP):
    scale = np.asarray(model.scale, dtype=np.float64)[:, None, None]

    def guidance(x_t, x0_hat, t, vjp):
        dens = x0_hat * scale
        if x0_clip is not None:
            lo, hi = x0_clip
            inside = (dens >= lo) & (dens <= hi)
            dens = np.clip(dens, lo, hi)
        fid, grad = physics.fidelity_and_gradient(dens, y, sys, geom)
        grad = grad * scale  # d fidelity / d x0_hat in model units
        if x0_clip is not None:
            grad = np.where(inside, grad, 0.0)
        if chain:
            ab = sched.alpha_bar[t]
            grad = (grad - np.sqrt(1.0 - ab) * vjp(grad)) / np.sqrt(ab)
        eta = step(t, sched, fid)
        trace.append(np.atleast_1d(eta).copy())
        return np.reshape(eta, np.shape(eta) + (1, 1, 1)) * grad

    return guidance


def _package(x, model, geom, algorithm, trace, wall, seeds, clamp, cfg):
    scale = np.asarray(model.scale)[:, None, None]
    trace = np.array(trace)  # (steps, B)
    batched = isinstance(seeds, (list, tuple))
    xs = x if batched else x[None]
    out = []
    for b, xb in enumerate(xs):
        dens = xb * scale
        est = MaterialImage(dens[0], dens[1], geom.pixel_size, {"algorithm": algorithm})
        seed = seeds[b] if batched else seeds
        out.append(DecompositionResult(est.clamped() if clamp else est, trace.shape[0], wall,
                                       trace[:, b] if trace.size else trace, algorithm,
                                       dict(cfg, seed=seed, batch_size=len(xs), clamp=clamp), dens))
    return out if batched else out[0]


def _shape(geom, seeds):
    shape = (2, geom.image_size, geom.image_size)
    return (len(seeds), *shape) if isinstance(seeds, (list, tuple)) else shape


def sdps(y: SpectralSinogram, sys: SpectralSystem, geom: Geometry, model: ScoreModel,
         sched: DiffusionSchedule, step: StepSizeSchedule = StepSizeSchedule(), seed=0,
         clamp: bool = True, callback=None, x0_clip=X0_CLIP):
    """Spectral diffusion posterior sampling from pure noise over all T steps.

    ``seed`` may be a list; the chains then run as one batch (one generator per
    chain) and a list of results is returned.
    """
    physics._check(sys, geom)
    rng = as_rngs(seed)
    start = time.perf_counter()
    x_T = draw_normal(rng, _shape(geom, seed))
    trace: list = []
    guide = _likelihood_guidance(y, sys, geom, model, sched, step, True, trace, x0_clip)
    x = reverse_chain(model, sched, x_T, sched.T, rng, guide, callback)
    wall = time.perf_counter() - start
    cfg = {"T": sched.T, "step_kind": step.kind, "eta": step.eta, "x0_clip": x0_clip}
    return _package(x, model, geom, "sdps", trace, wall, seed, clamp, cfg)


def jumpstart_init(x0f, t_start: int, sched: DiffusionSchedule, rng, shape) -> np.ndarray:
    """sqrt(ab) x0f + sqrt(1 - ab) eps at step ``t_start``; ``x0f=None`` gives pure noise.

    ``x0f`` is in model units and broadcasts against ``shape``.
    """
    sched.check_step(t_start)
    eps = draw_normal(rng, tuple(shape))
    if x0f is None:
        return eps
    ab = sched.alpha_bar[t_start]
    return np.sqrt(ab) * np.asarray(x0f, dtype=np.float64) + np.sqrt(1.0 - ab) * eps


def jsdps(y: SpectralSinogram, sys: SpectralSystem, geom: Geometry, model: ScoreModel,
          sched: DiffusionSchedule, t_start: int = 150,
          step: StepSizeSchedule = StepSizeSchedule("constant", 0.02), grad_approx: bool = True,
          seed=0, initializer="image-domain", clamp: bool = True, callback=None, x0_clip=X0_CLIP):
    """Jumpstarted spectral DPS.

    ``initializer`` is a MaterialImage or (2, H, W) density array, the string
    ``"image-domain"``, or None for a pure-noise start (which with
    ``t_start = T`` and ``grad_approx=False`` reproduces :func:`sdps`).
    """
    physics._check(sys, geom)
    if not 1 <= t_start <= sched.T:
        raise ValueError(f"T' = {t_start} outside 1..{sched.T}")
    rng = as_rngs(seed)
    start = time.perf_counter()
    scale = np.asarray(model.scale, dtype=np.float64)[:, None, None]
    x0f, init_tag = None, "noise"
    if initializer is not None:
        if isinstance(initializer, str):
            if initializer != "image-domain":
                raise ValueError(f"unknown initializer {initializer!r}")
            x0f = image_domain_decomposition(y, sys, geom).stack()
            init_tag = "image-domain"
        else:
            x0f = initializer.stack() if hasattr(initializer, "stack") else np.asarray(initializer)
            init_tag = "given"
        x0f = x0f / scale
    x_start = jumpstart_init(x0f, t_start, sched, rng, _shape(geom, seed))
    trace: list = []
    guide = _likelihood_guidance(y, sys, geom, model, sched, step, not grad_approx, trace, x0_clip)
    x = reverse_chain(model, sched, x_start, t_start, rng, guide, callback)
    wall = time.perf_counter() - start
    cfg = {"T": sched.T, "T_prime": t_start, "step_kind": step.kind, "eta": step.eta,
           "grad_approx": grad_approx, "initializer": init_tag, "x0_clip": x0_clip}
    return _package(x, model, geom, "jsdps", trace, wall, seed, clamp, cfg)


def jumpstart_kl(x0, x0f, t: int, sched: DiffusionSchedule) -> float:
    """KL between the step-t forward marginals started at x0 and at x0f."""
    sched.check_step(t)
    ab = sched.alpha_bar[t]
    diff = np.asarray(x0f, dtype=np.float64) - np.asarray(x0, dtype=np.float64)
    return float(ab / (2.0 * (1.0 - ab)) * np.sum(diff ** 2))


def sweep_step_size(run, truth, etas=None, mask=None):
    """Pick the eta with the smallest MSE against ``truth``.

    ``run(eta)`` returns a DecompositionResult or a list of them (MSE is
    averaged over the list).  Returns (best_eta, [(eta, mse), ...]).
    """
    etas = np.logspace(-1, 1, 5) if etas is None else np.asarray(etas, dtype=float)
    truth = truth.stack() if hasattr(truth, "stack") else np.asarray(truth)
    sel = np.ones(truth.shape[-2:], bool) if mask is None else mask
    table = []
    for eta in etas:
        try:
            res = run(float(eta))
        except FloatingPointError as exc:
            log.warning("eta=%g diverged: %s", eta, exc)
            table.append((float(eta), float("inf")))
            continue
        res = res if isinstance(res, list) else [res]
        mse = np.mean([((r.estimate.stack() - truth)[:, sel] ** 2).mean() for r in res])
        table.append((float(eta), float(mse)))
    best = min(table, key=lambda row: row[1])[0]
    return best, table
