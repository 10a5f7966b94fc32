"""DDPM machinery: linear schedule, forward noising, x0 prediction and the
ancestral reverse step, written against a small ``ScoreModel`` protocol.

Schedule arrays are indexed by the step number directly: index 0 holds the
``t = 0`` convention (``alpha_bar[0] = 1``, ``beta[0] = 0``) and indices
``1..T`` the diffusion steps.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Protocol

import numpy as np


class ScheduleError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class DiffusionSchedule:
    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    sigma: np.ndarray
    beta_1: float
    beta_T: float

    def check_step(self, t: int):
        if not 1 <= t <= self.T:
            raise ScheduleError(f"step {t} outside 1..{self.T}")

    def snr(self) -> np.ndarray:
        """alpha_bar / (1 - alpha_bar) for t = 1..T."""
        ab = self.alpha_bar[1:]
        return ab / (1.0 - ab)


def make_schedule(T: int = 1000, beta_1: float = 1e-4, beta_T: float = 0.02) -> DiffusionSchedule:
    if T < 2:
        raise ScheduleError("T must be at least 2")
    if not 0 < beta_1 < beta_T < 1:
        raise ScheduleError("need 0 < beta_1 < beta_T < 1")
    t = np.arange(1, T + 1)
    beta = np.concatenate([[0.0], beta_1 + (t - 1) * (beta_T - beta_1) / (T - 1)])
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    # DDPM posterior variance; vanishes at t = 1 because alpha_bar[0] = 1
    var = np.zeros(T + 1)
    var[1:] = (1.0 - alpha_bar[:-1]) / (1.0 - alpha_bar[1:]) * beta[1:]
    return DiffusionSchedule(T, beta, alpha, alpha_bar, np.sqrt(var), beta_1, beta_T)


def as_rngs(seed):
    """One generator, or a list of generators for a batch of independent chains."""
    if isinstance(seed, (list, tuple)):
        return [np.random.default_rng(s) for s in seed]
    return np.random.default_rng(seed)


def draw_normal(rng, shape) -> np.ndarray:
    """Standard normal draws; a list of generators fills the leading axis one row each."""
    if isinstance(rng, (list, tuple)):
        if shape[0] != len(rng):
            raise ValueError("batch size does not match the number of generators")
        return np.stack([g.standard_normal(shape[1:]) for g in rng])
    return rng.standard_normal(shape)


class ScoreModel(Protocol):
    """Noise predictor eps_theta(x_t, t) in model units.

    ``scale`` maps model units to densities (g/ml) per channel.
    """

    scale: np.ndarray

    def predict(self, x_t: np.ndarray, t: int) -> np.ndarray: ...

    def predict_vjp(self, x_t: np.ndarray, t: int) -> tuple[np.ndarray, Callable[[np.ndarray], np.ndarray]]:
        """Prediction plus a function v -> v^T d eps / d x_t."""
        ...


class GaussianPriorScore:
    """Exact noise predictor for independent Gaussian pixels x0 ~ N(mean, var).

    The diffused marginal is N(sqrt(ab) mean, ab var + 1 - ab), so the score and
    hence eps_hat = -sqrt(1 - ab) * score are closed form.
    """

    def __init__(self, mean, var, sched: DiffusionSchedule, scale=(1.0, 1.0)):
        self.mean = np.asarray(mean, dtype=np.float64)
        self.var = np.broadcast_to(np.asarray(var, dtype=np.float64), self.mean.shape).copy()
        if np.any(self.var < 0):
            raise ValueError("prior variance must be non-negative")
        self.sched = sched
        self.scale = np.asarray(scale, dtype=np.float64)

    def _coef(self, t):
        ab = self.sched.alpha_bar[t]
        return np.sqrt(1.0 - ab) / (ab * self.var + 1.0 - ab), ab

    def predict(self, x_t, t):
        self.sched.check_step(t)
        k, ab = self._coef(t)
        return k * (np.asarray(x_t) - np.sqrt(ab) * self.mean)

    def predict_vjp(self, x_t, t):
        k, _ = self._coef(t)
        return self.predict(x_t, t), lambda v: k * v

    def posterior_x0(self, x_t, t):
        """E[x0 | x_t] and Var[x0 | x_t]; the former equals predict_x0 exactly."""
        ab = self.sched.alpha_bar[t]
        prec = 1.0 / np.maximum(self.var, 1e-300) + ab / (1.0 - ab)
        var = np.where(self.var > 0, 1.0 / prec, 0.0)
        mean = np.where(self.var > 0, var * (self.mean / np.maximum(self.var, 1e-300)
                                            + np.sqrt(ab) * x_t / (1.0 - ab)), self.mean)
        return mean, var


def forward_diffuse(x0, t: int, sched: DiffusionSchedule, seed=None, return_noise: bool = False):
    """x_t = sqrt(ab_t) x0 + sqrt(1 - ab_t) eps with seeded eps ~ N(0, I)."""
    sched.check_step(t)
    x0 = np.asarray(x0, dtype=np.float64)
    eps = draw_normal(as_rngs(seed), x0.shape)
    ab = sched.alpha_bar[t]
    x_t = np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps
    return (x_t, eps) if return_noise else x_t


def x0_from_eps(x_t, eps, t, sched):
    ab = sched.alpha_bar[t]
    return (x_t - np.sqrt(1.0 - ab) * eps) / np.sqrt(ab)


def predict_x0(x_t, t: int, model: ScoreModel, sched: DiffusionSchedule) -> np.ndarray:
    sched.check_step(t)
    eps = model.predict(x_t, t)
    if np.shape(eps) != np.shape(x_t):
        raise ValueError(f"model output shape {np.shape(eps)} != input shape {np.shape(x_t)}")
    return x0_from_eps(np.asarray(x_t, dtype=np.float64), eps, t, sched)


def ancestral_coefficients(t: int, sched: DiffusionSchedule) -> tuple[float, float, float]:
    """Weights on x_t and x0_hat, and the noise scale sigma_t, of the DDPM reverse step."""
    sched.check_step(t)
    ab, ab_prev = sched.alpha_bar[t], sched.alpha_bar[t - 1]
    c_xt = np.sqrt(sched.alpha[t]) * (1.0 - ab_prev) / (1.0 - ab)
    c_x0 = np.sqrt(ab_prev) * sched.beta[t] / (1.0 - ab)
    return c_xt, c_x0, sched.sigma[t]


def ancestral_step(x_t, x0_hat, t: int, sched: DiffusionSchedule, seed=None) -> np.ndarray:
    c_xt, c_x0, sigma = ancestral_coefficients(t, sched)
    z = draw_normal(as_rngs(seed), np.shape(x_t))
    return c_xt * np.asarray(x_t) + c_x0 * np.asarray(x0_hat) + sigma * z


# A guidance callback receives (x_t, x0_hat, t, vjp) and returns the vector to
# subtract from the ancestral update, or None.
Guidance = Callable[[np.ndarray, np.ndarray, int, Callable], np.ndarray]


def reverse_chain(model: ScoreModel, sched: DiffusionSchedule, x_start: np.ndarray, t_start: int,
                  rng, guidance: Guidance | None = None, callback=None) -> np.ndarray:
    """Run ancestral steps from ``t_start`` down to 1, optionally guided.

    ``rng`` is a generator or a list of generators (one per leading-axis chain).
    """
    x = np.asarray(x_start, dtype=np.float64)
    for t in range(t_start, 0, -1):
        # noise is drawn first so the stream matches z ~ N(0, I) ahead of the update
        c_xt, c_x0, sigma = ancestral_coefficients(t, sched)
        z = draw_normal(rng, x.shape)
        if guidance is None:
            eps, vjp = model.predict(x, t), None
        else:
            eps, vjp = model.predict_vjp(x, t)
        eps = np.asarray(eps, dtype=np.float64)
        if eps.shape != x.shape:
            raise ValueError(f"model output shape {eps.shape} != input shape {x.shape}")
        x0_hat = x0_from_eps(x, eps, t, sched)
        x_next = c_xt * x + c_x0 * x0_hat + sigma * z
        if guidance is not None:
            step = guidance(x, x0_hat, t, vjp)
            if step is not None:
                x_next = x_next - step
        if not np.all(np.isfinite(x_next)):
            raise FloatingPointError(f"non-finite state at diffusion step {t}")
        x = x_next
        if callback is not None:
            callback(t, x, x0_hat)
    return x


def sample(model: ScoreModel, sched: DiffusionSchedule, shape, seed) -> np.ndarray:
    """Unconditional DDPM sampling from pure noise.

    ``seed`` may be a list (one chain per seed, stacked on the leading axis).
    """
    rng = as_rngs(seed)
    x_T = draw_normal(rng, tuple(shape))
    return reverse_chain(model, sched, x_T, sched.T, rng)
