"""Closed-form references used to validate the samplers.

The linear-Gaussian oracle linearizes the measurement model about the prior
mean, which makes the posterior over both density planes Gaussian with an
explicit mean and covariance.  It is exact for the sampler's target whenever
the model is close to linear over the posterior's support (monoenergetic
channels, low attenuation).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import physics, projector
from .physics import SpectralSinogram, SpectralSystem
from .projector import Geometry


@dataclass
class GaussianPosterior:
    mean: np.ndarray  # (2, H, W)
    cov: np.ndarray  # (2HW, 2HW)
    jacobian: np.ndarray  # active rays x 2HW
    fisher: np.ndarray  # J^T K^-1 J

    @property
    def std(self) -> np.ndarray:
        return np.sqrt(np.diag(self.cov)).reshape(self.mean.shape)


def measurement_jacobian(x, sys: SpectralSystem, geom: Geometry, active=None) -> np.ndarray:
    """Dense d ybar / d x at ``x`` (2, H, W): rows are (channel, ray), columns (material, pixel)."""
    x = np.asarray(x, dtype=np.float64)
    A = projector.system_matrix(geom).toarray()
    l = projector.project(x, geom).reshape(2, -1)
    _, d1 = physics.forward_rays(l, sys, 1)  # (C, 2, R)
    C = sys.n_channels
    J = np.einsum("cmr,rj->crmj", d1, A).reshape(C * geom.n_rays, 2 * A.shape[1])
    if active is not None:
        J = J[np.asarray(active).reshape(-1)]
    return J


def linear_gaussian_posterior(prior_mean, prior_var, y: SpectralSinogram, sys: SpectralSystem,
                              geom: Geometry) -> GaussianPosterior:
    """Posterior of x ~ N(prior_mean, diag(prior_var)) given y under the
    measurement model linearized at the prior mean and weights K^-1."""
    mu0 = np.asarray(prior_mean, dtype=np.float64)
    var0 = np.broadcast_to(np.asarray(prior_var, dtype=np.float64), mu0.shape).reshape(-1)
    active = y.ray_mask.reshape(-1)
    J = measurement_jacobian(mu0, sys, geom, active)
    ybar0 = physics.mean_measurement(mu0, sys, geom).counts.reshape(-1)[active]
    w = 1.0 / y.variance.reshape(-1)[active]
    F = J.T @ (w[:, None] * J)
    P = F + np.diag(1.0 / var0)
    cov = np.linalg.inv(P)
    cov = 0.5 * (cov + cov.T)
    r = y.counts.reshape(-1)[active] - ybar0
    mean = mu0.reshape(-1) + cov @ (J.T @ (w * r))
    return GaussianPosterior(mean.reshape(mu0.shape), cov, J, F)


def gaussian_kl(m0, cov0, m1, cov1) -> float:
    """KL(N(m0, cov0) || N(m1, cov1)) for full covariance matrices."""
    m0, m1 = np.ravel(m0), np.ravel(m1)
    cov0, cov1 = np.atleast_2d(cov0), np.atleast_2d(cov1)
    k = m0.size
    inv1 = np.linalg.inv(cov1)
    d = m1 - m0
    _, logdet0 = np.linalg.slogdet(cov0)
    _, logdet1 = np.linalg.slogdet(cov1)
    return float(0.5 * (np.trace(inv1 @ cov0) + d @ inv1 @ d - k + logdet1 - logdet0))
