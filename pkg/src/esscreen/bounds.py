"""Error-bound evaluation: Bernstein tails, the deterministic L^p bound, its
robust variant, and the adaptive (posterior-aware) selection bound.

All bounds share one exponential kernel, exp(-n x^2 / (2 (v + c x))), the
sub-gamma tail of an n-sample mean with variance proxy v and scale constant c.
Setting c = 0 gives the pure sub-Gaussian case (valid for Gaussian pricing
errors).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import brentq

from .errors import InvalidParameterError, InvalidStrategyError
from .model import ScenarioParams, pair_variance
from .screener import Strategy

__all__ = [
    "SubGammaParams",
    "RobustBounds",
    "bernstein_tail",
    "gamma_constants",
    "selection_term",
    "robust_gap_max",
    "mc_terms_exact",
    "mc_terms_robust",
    "F_p",
    "F_robust",
    "f_p_ad",
    "AdaptiveState",
    "pair_gap_oracle",
    "pair_var_oracle",
]

#: Exponents below this are treated as -inf: bound values under exp(-745)
#: are numerically zero for planning purposes and only cause denormal churn.
_EXP_FLOOR = -745.0


@dataclass(frozen=True)
class SubGammaParams:
    """Bernstein scale constant ``c`` (0 allowed) and moment order ``p >= 1``."""

    c: float = 0.0
    p: float = 1.0

    def __post_init__(self):
        if self.c < 0:
            raise InvalidParameterError(f"c must be >= 0, got {self.c}")
        if self.p < 1:
            raise InvalidParameterError(f"p must be >= 1, got {self.p}")


@dataclass(frozen=True)
class RobustBounds:
    """A-priori gap brackets per threshold and a uniform std bound.

    ``delta_lo[q]``/``delta_hi[q]`` bracket every gap ``mu_i - mu_k`` with
    ``i <= n_w < q < k``; ``sigma_bar`` dominates every per-scenario and
    pairwise standard deviation.
    """

    delta_lo: dict[int, float]
    delta_hi: dict[int, float]
    sigma_bar: float

    def __post_init__(self):
        for q, lo in self.delta_lo.items():
            hi = self.delta_hi.get(q)
            if hi is None:
                raise InvalidParameterError(f"missing delta_hi for q={q}")
            if not (0.0 <= lo <= hi):
                raise InvalidParameterError(
                    f"need 0 <= delta_lo <= delta_hi at q={q}, got [{lo}, {hi}]"
                )
        if self.sigma_bar < 0:
            raise InvalidParameterError("sigma_bar must be >= 0")


def _kernel_exp(n, x, var, c, p=1.0):
    """exp(-n x^2 / (2 p (var + c x))), vectorized, underflow-clamped.

    The kernel is 1 where x <= 0 (the trivial probability bound) and 0 where
    x > 0 with a vanishing denominator (infinitely fast decay).
    """
    x = np.asarray(x, dtype=np.float64)
    denom = 2.0 * p * (var + c * x)
    safe = np.where(denom > 0, denom, 1.0)
    with np.errstate(over="ignore"):
        expo = -n * x * x / safe
    out = np.where(expo > _EXP_FLOOR, np.exp(np.maximum(expo, _EXP_FLOOR)), 0.0)
    out = np.where((x > 0) & (denom <= 0), 0.0, out)
    return np.where(x <= 0, 1.0, out)


def bernstein_tail(x: float, n: int, var: float, c: float = 0.0) -> float:
    """Sub-gamma tail bound exp(-n x^2 / (2 (var + c x))), clamped to [0, 1].

    Bounds P[mean of n samples exceeds its expectation by x] under the
    Bernstein moment condition.  Returns 1 at x = 0.
    """
    if x < 0 or n < 1 or var < 0 or c < 0:
        raise InvalidParameterError(
            f"invalid arguments: x={x}, n={n}, var={var}, c={c}"
        )
    if x == 0:
        return 1.0
    denom = 2.0 * (var + c * x)
    if denom == 0.0:
        return 0.0
    expo = -n * x * x / denom
    if expo <= _EXP_FLOOR:
        return 0.0
    return min(1.0, math.exp(expo))


def gamma_constants(p: float) -> tuple[float, float]:
    """Moment constants (2^{p-1} Gamma(p/2), 4^p Gamma(p)) for order p >= 1."""
    if p < 1:
        raise InvalidParameterError(f"p must be >= 1, got {p}")
    return 2.0 ** (p - 1.0) * math.gamma(p / 2.0), 4.0**p * math.gamma(p)


def pair_gap_oracle(theta: ScenarioParams):
    """Callable (i, k) -> mu_i - mu_k on 0-based index arrays."""
    mu = theta.mu

    def gap(i, k):
        return mu[i] - mu[k]

    return gap


def pair_var_oracle(theta: ScenarioParams):
    """Callable (i, k) -> Var[P_i - P_k] on 0-based index arrays."""
    sigma = theta.sigma

    def var(i, k):
        return pair_variance(sigma, i, k)

    return var


def selection_term(
    q_prev: int,
    q_next: int,
    n_paths: int,
    gaps,
    variances,
    sub: SubGammaParams,
    *,
    n_w: int,
    n_s: int,
) -> float:
    """One level's inversion-risk term of the deterministic bound.

    (q_prev - q_next)^{1/p} times the max over pairs (i, k) with i among the
    n_w best and k beyond rank q_next of
    gap * exp(-N gap^2 / (2 p (var_ik + c gap))).
    Indexes passed to the oracles are 0-based.
    """
    if q_next >= q_prev:
        if q_next == q_prev:
            return 0.0
        raise InvalidParameterError(f"need q_next <= q_prev, got {q_next} > {q_prev}")
    if n_paths < 0:
        raise InvalidParameterError("n_paths must be >= 0")
    dq = q_prev - q_next
    if q_next >= n_s:
        return 0.0
    i_idx = np.arange(min(n_w, n_s), dtype=np.intp)
    k_idx = np.arange(q_next, n_s, dtype=np.intp)
    ii, kk = np.meshgrid(i_idx, k_idx, indexing="ij")
    g = np.asarray(gaps(ii, kk), dtype=np.float64)
    v = np.asarray(variances(ii, kk), dtype=np.float64)
    kern = _kernel_exp(n_paths, g, v, sub.c, sub.p)
    vals = g * kern
    return float(dq ** (1.0 / sub.p) * np.max(vals))


def _mc_moment_term(n: float, sigma_p: np.ndarray, sub: SubGammaParams) -> np.ndarray:
    """Per-scenario moment bound (C_sig p sigma^p / n^{p/2} + C_c p c^p / n^p)^{1/p}."""
    c_sig, c_c = gamma_constants(sub.p)
    p = sub.p
    inner = c_sig * p * sigma_p / n ** (p / 2.0) + c_c * p * sub.c**p / n**p
    return inner ** (1.0 / p)


def mc_terms_exact(
    n_prev: int,
    n_last: int,
    sigma_p_sorted: np.ndarray,
    n_w: int,
    sub: SubGammaParams,
) -> tuple[float, float]:
    """Final-level and carried-over Monte Carlo terms under known parameters.

    ``sigma_p_sorted`` holds the per-scenario deviations raised to the p-th
    power, sorted descending; the fresh-path term takes its ``n_w`` largest
    entries (the summand grows with sigma, so the max over ordered subsets is
    attained there), the carried-over term sums all of them.
    """
    dn_last = n_last - n_prev
    if n_prev == 0 or dn_last == 0:
        return math.inf, math.inf
    term_b = (
        (dn_last / n_last)
        / n_w
        * float(np.sum(_mc_moment_term(dn_last, sigma_p_sorted[:n_w], sub)))
    )
    term_c = (
        (n_prev / n_last)
        / n_w
        * float(np.sum(_mc_moment_term(n_prev, sigma_p_sorted, sub)))
    )
    return term_b, term_c


def mc_terms_robust(
    n_prev: int,
    n_last: int,
    sigma_bar: float,
    n_w: int,
    n_s: int,
    sub: SubGammaParams,
) -> tuple[float, float]:
    """Monte Carlo terms under the uniform std bound only."""
    dn_last = n_last - n_prev
    if n_prev == 0 or dn_last == 0:
        return math.inf, math.inf
    sbar_p = np.array([sigma_bar**sub.p])
    term_b = (dn_last / n_last) * float(_mc_moment_term(dn_last, sbar_p, sub)[0])
    term_c = (
        (n_prev / n_last) * (n_s / n_w) * float(_mc_moment_term(n_prev, sbar_p, sub)[0])
    )
    return term_b, term_c


def F_p(strategy: Strategy, theta: ScenarioParams, sub: SubGammaParams) -> float:
    """Deterministic L^p error bound for a strategy under known parameters.

    Sum of the per-level selection terms, the fresh-path Monte Carlo term of
    the final level, and the carried-over term from level L-1.  Scenarios are
    assumed sorted by decreasing impact (the planning convention).  Strategies
    with ``N_{L-1} == 0`` or ``dN_L == 0`` score +inf: their Monte Carlo terms
    are undefined and such plans must lose any minimization.
    """
    if strategy.n_s != theta.n_s:
        raise InvalidStrategyError("strategy and theta disagree on n_s")
    levels = strategy.levels
    n_w = strategy.n_w
    n_s = strategy.n_s
    n = strategy.n
    n_last = n[levels]
    n_prev = n[levels - 1]
    dn_last = n_last - n_prev
    if n_prev == 0 or dn_last == 0:
        return math.inf
    gaps = pair_gap_oracle(theta)
    variances = pair_var_oracle(theta)
    total = 0.0
    for lvl in range(1, levels):
        total += selection_term(
            strategy.q[lvl - 1],
            strategy.q[lvl],
            n[lvl],
            gaps,
            variances,
            sub,
            n_w=n_w,
            n_s=n_s,
        )
    sig = np.sqrt(np.diag(theta.sigma))
    sig_p = np.sort(sig**sub.p)[::-1]
    term_b, term_c = mc_terms_exact(n_prev, n_last, sig_p, n_w, sub)
    total += term_b
    total += term_c
    return total


def robust_gap_max(
    n_paths: float, lo: float, hi: float, sigma_bar: float, sub: SubGammaParams
) -> float:
    """max over delta in [lo, hi] of delta * exp(-N delta^2 / (2p(sbar^2 + c delta)))."""
    if hi <= 0.0:
        return 0.0

    def g(delta):
        if delta <= 0:
            return 0.0
        expo = -n_paths * delta * delta / (2.0 * sub.p * (sigma_bar**2 + sub.c * delta))
        if expo <= _EXP_FLOOR:
            return 0.0
        return delta * math.exp(expo)

    candidates = [lo, hi]
    if n_paths > 0 and sigma_bar > 0:
        if sub.c == 0.0:
            stat = sigma_bar * math.sqrt(sub.p / n_paths)
        else:
            # Stationary point of log g: 2p (sbar^2 + c d)^2 = N d^2 (2 sbar^2 + c d).
            def h(d):
                s2 = sigma_bar**2 + sub.c * d
                return 2.0 * sub.p * s2 * s2 - n_paths * d * d * (
                    2.0 * sigma_bar**2 + sub.c * d
                )

            d_hi = sigma_bar * math.sqrt(sub.p / n_paths) + 2.0 * sub.p * sub.c / n_paths
            d_hi = max(d_hi * 4.0, 1e-12)
            while h(d_hi) > 0:
                d_hi *= 4.0
            stat = brentq(h, 1e-300, d_hi, xtol=1e-300, rtol=8.9e-16)
        if lo < stat < hi:
            candidates.append(stat)
    return max(g(d) for d in candidates)


def F_robust(strategy: Strategy, rb: RobustBounds, sub: SubGammaParams) -> float:
    """Worst-case variant of the deterministic bound from a-priori brackets.

    Per-pair selection terms become the worst case over the gap interval at
    each threshold with the uniform std bound; Monte Carlo terms use the
    uniform bound for every scenario.
    """
    levels = strategy.levels
    n = strategy.n
    n_last = n[levels]
    n_prev = n[levels - 1]
    dn_last = n_last - n_prev
    if n_prev == 0 or dn_last == 0:
        return math.inf
    total = 0.0
    for lvl in range(1, levels):
        dq = strategy.q[lvl - 1] - strategy.q[lvl]
        if dq == 0:
            continue
        q = strategy.q[lvl]
        try:
            lo, hi = rb.delta_lo[q], rb.delta_hi[q]
        except KeyError:
            raise InvalidParameterError(
                f"RobustBounds does not cover threshold q={q}"
            ) from None
        total += dq ** (1.0 / sub.p) * robust_gap_max(
            n[lvl], lo, hi, rb.sigma_bar, sub
        )
    term_b, term_c = mc_terms_robust(
        n_prev, n_last, rb.sigma_bar, strategy.n_w, strategy.n_s, sub
    )
    total += term_b
    total += term_c
    return total


@dataclass(frozen=True)
class AdaptiveState:
    """Inputs of the posterior selection bound at one level.

    ``mu_hat_prev`` are the cumulative estimates over the surviving scenarios
    after the previous level (aligned with the posterior draw's coordinates);
    ``n_prev``/``delta_n`` are the cumulative and incremental path counts and
    ``q_next`` the number of survivors the level keeps.
    """

    mu_hat_prev: np.ndarray
    n_prev: int
    delta_n: int
    q_next: int
    n_w: int

    def __post_init__(self):
        object.__setattr__(
            self, "mu_hat_prev", np.asarray(self.mu_hat_prev, dtype=np.float64)
        )
        if self.delta_n < 1:
            raise InvalidParameterError(
                "delta_n must be >= 1 at a selection level (the posterior "
                "inversion margin is undefined without fresh paths)"
            )
        if not (self.n_w <= self.q_next < self.mu_hat_prev.size):
            raise InvalidParameterError(
                f"need n_w <= q_next < q_prev, got n_w={self.n_w}, "
                f"q_next={self.q_next}, q_prev={self.mu_hat_prev.size}"
            )


def f_p_ad(
    level: int,
    mu_tilde: np.ndarray,
    sigma_tilde: np.ndarray,
    state: AdaptiveState,
    sub: SubGammaParams,
    rank_by: np.ndarray | None = None,
) -> float:
    """Posterior selection-risk bound for one level.

    Given a draw (or plug-in) of the parameters over the surviving scenarios,
    ranks them by ``mu_tilde`` (ties to the smaller coordinate), pairs the
    posterior-best ``n_w`` against the dropped tail (ranks beyond ``q_next``)
    and returns dq times the max of

        gap^p * ( exp(-dN rho^2 / (2 (var_ik + c rho))) 1{rho >= 0} + 1{rho < 0} )

    where ``rho = gap + (N_prev/dN) (muhat_i - muhat_k)`` folds the already
    accumulated empirical margin into the fresh-batch inversion bound.
    Plug-in callers may supply ``rank_by`` to take the pairing permutation
    from a different (e.g. previous-step empirical) ordering than the values.
    """
    if level < 1:
        raise InvalidParameterError("level must be >= 1")
    mu_tilde = np.asarray(mu_tilde, dtype=np.float64)
    sigma_tilde = np.asarray(sigma_tilde, dtype=np.float64)
    q_prev = mu_tilde.size
    if state.mu_hat_prev.size != q_prev or sigma_tilde.shape != (q_prev, q_prev):
        raise InvalidParameterError("state, mu_tilde and sigma_tilde must align")
    dq = q_prev - state.q_next
    if dq == 0:
        return 0.0
    ranker = mu_tilde if rank_by is None else np.asarray(rank_by, dtype=np.float64)
    if ranker.size != q_prev:
        raise InvalidParameterError("rank_by must align with mu_tilde")
    order = np.lexsort((np.arange(q_prev), -ranker))
    best = order[: state.n_w]
    tail = order[state.q_next :]
    ii, kk = np.meshgrid(best, tail, indexing="ij")
    gap = mu_tilde[ii] - mu_tilde[kk]
    var = pair_variance(sigma_tilde, ii, kk)
    ratio = state.n_prev / state.delta_n if state.n_prev else 0.0
    rho = gap + ratio * (state.mu_hat_prev[ii] - state.mu_hat_prev[kk])
    denom = 2.0 * (var + sub.c * rho)
    safe = np.where(denom > 0, denom, 1.0)
    expo = -state.delta_n * rho * rho / safe
    kern = np.where(expo > _EXP_FLOOR, np.exp(np.maximum(expo, _EXP_FLOOR)), 0.0)
    kern = np.where((rho > 0) & (denom <= 0), 0.0, kern)
    kern = np.where(rho < 0, 1.0, kern)  # inverted prior margin: full weight
    vals = np.abs(gap) ** sub.p * kern
    return float(dq * np.max(vals))
