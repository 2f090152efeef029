"""Ground-truth scenario models, prior sampling, and correlated price paths.

The basic object is a Gaussian pricing model per historical scenario: scenario
``i`` has loss impact ``mu[i]`` and one simulated price path contributes one
draw of ``P_i ~ N(mu[i], sigma[i, i])``, with cross-scenario correlation given
by the covariance matrix.  Indexing is 0-based internally; report files
translate to 1-based scenario ranks.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular

from .errors import InvalidParameterError

__all__ = [
    "ScenarioParams",
    "EquicorrelatedSpec",
    "NIWParams",
    "synthetic_book",
    "build_equicorrelated",
    "sample_niw",
    "simulate_prices",
    "psd_factor",
    "pair_variance",
]

#: Relative eigenvalue tolerance below which a symmetric matrix is rejected
#: as not positive semi-definite.
_PSD_RTOL = 1e-10


def synthetic_book(n_s: int, delta0: float) -> np.ndarray:
    """Linearly decreasing loss-impact book ``mu[i] = -(i+1) * delta0``.

    The book is strictly decreasing with per-rank gap exactly ``delta0``, so
    the indifference-zone separation holds with equality at every rank.
    """
    if n_s < 1:
        raise InvalidParameterError(f"n_s must be >= 1, got {n_s}")
    if not delta0 > 0:
        raise InvalidParameterError(f"delta0 must be > 0, got {delta0}")
    return -delta0 * np.arange(1, n_s + 1, dtype=np.float64)


@dataclass(frozen=True)
class EquicorrelatedSpec:
    """Equicorrelated pricing noise: std ``sigma_scalar``, common correlation ``rho``."""

    sigma_scalar: float
    rho: float

    def __post_init__(self):
        if not (0.0 <= self.rho < 1.0):
            raise InvalidParameterError(f"rho must lie in [0, 1), got {self.rho}")
        if self.sigma_scalar < 0:
            raise InvalidParameterError("sigma_scalar must be >= 0")


def build_equicorrelated(spec: EquicorrelatedSpec, n_s: int) -> np.ndarray:
    """Covariance with ``sigma^2`` on the diagonal and ``rho * sigma^2`` off it."""
    s2 = float(spec.sigma_scalar) ** 2
    sigma = np.full((n_s, n_s), spec.rho * s2, dtype=np.float64)
    np.fill_diagonal(sigma, s2)
    return sigma


def psd_factor(sigma: np.ndarray) -> np.ndarray:
    """Factor ``F`` with ``F @ F.T == sigma`` for a symmetric PSD matrix.

    Tries Cholesky first; falls back to an eigendecomposition so that
    semi-definite matrices (including the zero matrix) are accepted.  Raises
    on matrices with a meaningfully negative eigenvalue.
    """
    sigma = np.asarray(sigma, dtype=np.float64)
    try:
        return np.linalg.cholesky(sigma)
    except np.linalg.LinAlgError:
        pass
    w, v = np.linalg.eigh((sigma + sigma.T) / 2.0)
    floor = -_PSD_RTOL * max(w[-1], 1.0) if w.size else 0.0
    if w.size and w[0] < floor:
        raise InvalidParameterError(
            f"covariance is not PSD (min eigenvalue {w[0]:.3e})"
        )
    return v * np.sqrt(np.clip(w, 0.0, None))


@dataclass(frozen=True)
class ScenarioParams:
    """Ground-truth mean vector and covariance of the scenario loss impacts.

    ``equi`` is set when the covariance is known to be equicorrelated, in
    which case price simulation uses the one-common-factor shortcut
    ``P_i = mu_i + sigma * (sqrt(rho) Z0 + sqrt(1-rho) Z_i)``.
    """

    mu: np.ndarray
    sigma: np.ndarray
    equi: EquicorrelatedSpec | None = None
    _factor_cache: list = field(default_factory=list, repr=False, compare=False)

    def __post_init__(self):
        mu = np.asarray(self.mu, dtype=np.float64)
        sigma = np.asarray(self.sigma, dtype=np.float64)
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "sigma", sigma)
        if mu.ndim != 1 or sigma.shape != (mu.size, mu.size):
            raise InvalidParameterError(
                f"shape mismatch: mu {mu.shape}, sigma {sigma.shape}"
            )
        if not np.allclose(sigma, sigma.T, rtol=1e-8, atol=0.0):
            raise InvalidParameterError("sigma must be symmetric")

    @classmethod
    def equicorrelated(
        cls, mu: np.ndarray, spec: EquicorrelatedSpec
    ) -> "ScenarioParams":
        mu = np.asarray(mu, dtype=np.float64)
        return cls(mu=mu, sigma=build_equicorrelated(spec, mu.size), equi=spec)

    @property
    def n_s(self) -> int:
        return self.mu.size

    def factor(self) -> np.ndarray:
        """Cached PSD factor of the covariance (one-time factorization)."""
        if not self._factor_cache:
            self._factor_cache.append(psd_factor(self.sigma))
        return self._factor_cache[0]

    def restrict(self, idx: np.ndarray) -> "ScenarioParams":
        """Parameters of the sub-model on scenario indexes ``idx``."""
        idx = np.asarray(idx, dtype=np.intp)
        return ScenarioParams(
            mu=self.mu[idx], sigma=self.sigma[np.ix_(idx, idx)], equi=self.equi
        )


def pair_variance(sigma: np.ndarray, i, k):
    """Variance of ``P_i - P_k``: ``sigma[i,i] + sigma[k,k] - 2 sigma[i,k]``."""
    sigma = np.asarray(sigma)
    return sigma[i, i] + sigma[k, k] - 2.0 * sigma[i, k]


@dataclass(frozen=True)
class NIWParams:
    """Normal-inverse-Wishart hyperparameters over a set of scenarios.

    ``m`` is the location vector, ``k`` the precision pseudo-count, ``i`` the
    degrees of freedom and ``s`` the scale matrix.  ``index_map`` lists the
    original scenario indexes these coordinates refer to, so posteriors can be
    restricted to survivor subsets without losing track of identities.
    """

    m: np.ndarray
    k: float
    i: float
    s: np.ndarray
    index_map: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.m, dtype=np.float64)
        s = np.asarray(self.s, dtype=np.float64)
        imap = np.asarray(self.index_map, dtype=np.intp)
        object.__setattr__(self, "m", m)
        object.__setattr__(self, "s", s)
        object.__setattr__(self, "index_map", imap)
        d = m.size
        if s.shape != (d, d) or imap.size != d:
            raise InvalidParameterError(
                f"NIW dims disagree: m {m.shape}, S {s.shape}, index_map {imap.shape}"
            )
        if not self.k > 0:
            raise InvalidParameterError(f"k must be > 0, got {self.k}")
        if not self.i > d + 1:
            raise InvalidParameterError(
                f"degrees of freedom must exceed dim+1 = {d + 1}, got {self.i}"
            )
        if not np.allclose(s, s.T, rtol=1e-8, atol=0.0):
            raise InvalidParameterError("S must be symmetric")

    @property
    def dim(self) -> int:
        return self.m.size

    def sigma_mean(self) -> np.ndarray:
        """Posterior mean of the covariance, ``S / (i - dim - 1)``."""
        return self.s / (self.i - self.dim - 1)


def _bartlett_lower(dof: float, d: int, rng: np.random.Generator) -> np.ndarray:
    """Lower-triangular Bartlett factor ``A`` with ``A @ A.T ~ Wishart(dof, I)``."""
    a = np.zeros((d, d))
    tril = np.tril_indices(d, k=-1)
    a[tril] = rng.standard_normal(tril[0].size)
    a[np.diag_indices(d)] = np.sqrt(rng.chisquare(dof - np.arange(d)))
    return a


def sample_niw(p: NIWParams, rng: np.random.Generator) -> ScenarioParams:
    """One draw ``(mu~, Sigma~)`` from the Normal-inverse-Wishart prior.

    ``Sigma~`` is inverse-Wishart(i, S), sampled by inverting a Bartlett
    Wishart draw with scale ``S^{-1}``; ``mu~ | Sigma~`` is Gaussian(m,
    Sigma~/k).  Deterministic given the generator state.
    """
    d = p.dim
    ls = psd_factor(p.s)  # raises on non-PSD S
    a = _bartlett_lower(p.i, d, rng)
    # Sigma~ = (Ls A^{-T}) (Ls A^{-T})^T  where A A^T ~ Wishart(i, I).
    phi = solve_triangular(a, ls.T, lower=True)  # phi = A^{-1} Ls^T
    sigma = phi.T @ phi
    sigma = (sigma + sigma.T) / 2.0
    z = rng.standard_normal(d)
    mu = p.m + (phi.T @ z) / np.sqrt(p.k)
    return ScenarioParams(mu=mu, sigma=sigma)


def simulate_prices(
    theta: ScenarioParams, count: int, rng: np.random.Generator
) -> np.ndarray:
    """``count`` iid rows of Gaussian scenario prices under ``theta``.

    Equicorrelated models use the one-common-factor representation (O(1)
    additional work per scalar); anything else goes through the cached
    covariance factor.  Draw order is fixed (one ``standard_normal`` block of
    shape ``(count, width)``), so replay under a fixed substream is
    bit-identical.
    """
    if count < 0:
        raise InvalidParameterError(f"count must be >= 0, got {count}")
    n = theta.n_s
    if count == 0:
        return np.empty((0, n))
    if theta.equi is not None:
        spec = theta.equi
        z = rng.standard_normal((count, n + 1))
        common = np.sqrt(spec.rho) * z[:, :1]
        own = np.sqrt(1.0 - spec.rho) * z[:, 1:]
        return theta.mu + spec.sigma_scalar * (common + own)
    f = theta.factor()
    z = rng.standard_normal((count, f.shape[1]))
    return theta.mu + z @ f.T
