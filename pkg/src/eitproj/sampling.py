"""Random contact and conductivity draws, and the measurement-noise model.

Contact peaks follow ``zeta_m = offset + a * beta + b * upsilon_m`` with one
shared ``beta ~ U[0, 1]`` per draw and independent ``upsilon_m ~ U[0, 1]``.
The conductivity in a region is ``exp(kappa)`` with ``kappa`` a Gaussian
vector on the region nodes, mean ``log_mean`` and squared-exponential
covariance ``std^2 exp(-|x_i - x_j|^2 / (2 l^2))``.
"""

from __future__ import annotations

import math
import warnings
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from .errors import ConfigError, DomainError, NumericError

JITTER = 1e-10
_CHOLESKY_CACHE: "OrderedDict[tuple, np.ndarray]" = OrderedDict()
_CACHE_SIZE = 4


@dataclass(frozen=True)
class RandomDrawConfig:
    """Parameters of the contact and conductivity laws.

    ``region`` selects a vertical sub-cylinder ``(x, y, radius)`` of the tank
    (metres); ``None`` means every node.
    """

    offset: float = 10.0
    shared_scale: float = 600.0
    independent_scale: float = 380.0
    log_mean: float = math.log(0.2)
    length_scale: float = 0.02
    std: float = 0.5
    region: tuple | None = None
    seed: int = 0

    def __post_init__(self):
        if self.length_scale <= 0:
            raise ConfigError(f"correlation length must be positive, got {self.length_scale}")
        if self.std < 0 or self.shared_scale < 0 or self.independent_scale < 0:
            raise ConfigError("standard deviation and contact scales must be non-negative")
        if self.region is not None and (len(self.region) != 3 or self.region[2] <= 0):
            raise ConfigError("region must be (x, y, radius) with a positive radius")

    def rng(self) -> np.random.Generator:
        return np.random.default_rng(self.seed)


def region_nodes(mesh, region) -> np.ndarray:
    """Node indices of a region given as ``None``, a ``(x, y, radius)`` tuple, a mask or indices."""
    if region is None:
        return np.arange(mesh.n_nodes)
    region = np.asarray(region)
    if region.dtype == bool:
        idx = np.flatnonzero(region)
    elif region.ndim == 1 and region.size == 3 and region.dtype.kind == "f":
        x, y, rad = region
        idx = np.flatnonzero(np.hypot(mesh.nodes[:, 0] - x, mesh.nodes[:, 1] - y) < rad)
    else:
        idx = region.astype(np.int64)
    if idx.size == 0:
        raise ConfigError("the sampling region contains no mesh nodes")
    return idx


def draw_contacts(config: RandomDrawConfig, M: int, rng: np.random.Generator) -> np.ndarray:
    """One draw of ``M`` peak contact conductivities (S/m^2)."""
    if M < 1:
        raise ConfigError("need at least one electrode")
    beta = rng.uniform()
    ups = rng.uniform(size=M)
    return config.offset + config.shared_scale * beta + config.independent_scale * ups


def covariance(points: np.ndarray, std: float, length_scale: float) -> np.ndarray:
    d2 = np.sum((points[:, None, :] - points[None, :, :]) ** 2, axis=-1)
    return std**2 * np.exp(-d2 / (2 * length_scale**2))


def _cholesky(points: np.ndarray, std: float, length_scale: float) -> np.ndarray:
    key = (points.tobytes(), std, length_scale)
    if key in _CHOLESKY_CACHE:
        _CHOLESKY_CACHE.move_to_end(key)
        return _CHOLESKY_CACHE[key]
    cov = covariance(points, std, length_scale)
    try:
        chol = sla.cholesky(cov, lower=True)
    except sla.LinAlgError:
        cov[np.diag_indices_from(cov)] += JITTER * std**2
        try:
            chol = sla.cholesky(cov, lower=True)
        except sla.LinAlgError as exc:
            raise NumericError(f"covariance of {points.shape[0]} nodes is not positive definite even with jitter") from exc
        warnings.warn("covariance factorization needed diagonal jitter", RuntimeWarning)
    _CHOLESKY_CACHE[key] = chol
    if len(_CHOLESKY_CACHE) > _CACHE_SIZE:
        _CHOLESKY_CACHE.popitem(last=False)
    return chol


def draw_lognormal_field(config: RandomDrawConfig, mesh, region=None, rng=None, background=0.2) -> np.ndarray:
    """Nodal conductivity with a log-normal draw on ``region`` and ``background`` elsewhere.

    ``region`` defaults to ``config.region``.
    """
    rng = rng if rng is not None else config.rng()
    idx = region_nodes(mesh, config.region if region is None else region)
    sigma = np.broadcast_to(np.asarray(background, dtype=float), (mesh.n_nodes,)).copy()
    if config.std == 0:
        sigma[idx] = math.exp(config.log_mean)
        return sigma
    chol = _cholesky(mesh.nodes[idx], config.std, config.length_scale)
    kappa = config.log_mean + chol @ rng.standard_normal(idx.size)
    sigma[idx] = np.exp(kappa)
    return sigma


@dataclass(frozen=True)
class NoiseModel:
    """White Gaussian noise ``Gamma_E = s^2 I`` with factor ``C = I / s`` (``C^T C = Gamma_E^{-1}``)."""

    std: float
    size: int

    def __post_init__(self):
        if not self.std > 0:
            raise DomainError(f"noise standard deviation must be positive, got {self.std}")

    @classmethod
    def from_variance(cls, variance: float, size: int) -> "NoiseModel":
        return cls(math.sqrt(variance), size)

    @property
    def variance(self) -> float:
        return self.std**2

    def covariance(self) -> np.ndarray:
        return self.variance * np.eye(self.size)

    def factor(self) -> np.ndarray:
        return np.eye(self.size) / self.std

    def whiten(self, v: np.ndarray) -> np.ndarray:
        return np.asarray(v, dtype=float) / self.std

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        return self.std * rng.standard_normal(self.size)


def make_noise(data, fraction: float = 0.005) -> NoiseModel:
    """Noise with standard deviation ``fraction * (max(data) - min(data))``."""
    data = np.asarray(data, dtype=float).ravel()
    if not fraction > 0:
        raise DomainError(f"noise fraction must be positive, got {fraction}")
    spread = float(data.max() - data.min()) if data.size else 0.0
    if spread <= 0:
        raise DomainError("cannot scale noise to constant data")
    return NoiseModel(fraction * spread, data.size)
