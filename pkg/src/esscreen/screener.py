"""The L-level screening estimator of Expected Shortfall.

A strategy fixes survivor thresholds ``q_0 >= q_1 >= ... >= q_{L-1} = n_w``
and cumulative path counts ``0 = N_0 <= N_1 <= ... <= N_L``.  Level ``l``
draws ``dN_l = N_l - N_{l-1}`` fresh paths for each scenario still alive,
folds them into the running means (the same paths are reused by every later
level), and keeps the ``q_l`` scenarios with the largest estimates.  The last
level is a pure Monte Carlo step: the estimator is the average of the final
means over the ``n_w`` survivors.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidParameterError, InvalidStrategyError
from .model import ScenarioParams, simulate_prices

__all__ = [
    "Strategy",
    "ScreeningRun",
    "GaussianSource",
    "cost",
    "rank_select",
    "run_screening",
    "exact_es",
    "correct_selection",
    "worst_indexes",
]

#: Rows per simulation chunk; keeps peak memory bounded when dN is large.
DEFAULT_CHUNK_ROWS = 65536


@dataclass(frozen=True)
class Strategy:
    """Screening schedule: thresholds ``q`` (length L) and cumulative path
    counts ``n`` (length L+1, ``n[0] == 0``).

    ``q[-1]`` is the final survivor count ``n_w``; ``q[0]`` the initial number
    of scenarios ``n_s``.  Zero increments are allowed (the 0/0 = 0 convention
    reuses the previous level's means).
    """

    q: tuple[int, ...]
    n: tuple[int, ...]

    def __post_init__(self):
        q = tuple(int(v) for v in self.q)
        n = tuple(int(v) for v in self.n)
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "n", n)
        if len(q) < 1 or len(n) != len(q) + 1:
            raise InvalidStrategyError(
                f"need len(n) == len(q) + 1, got q={len(q)}, n={len(n)}"
            )
        if n[0] != 0:
            raise InvalidStrategyError(f"n[0] must be 0, got {n[0]}")
        if any(b < a for a, b in zip(n, n[1:])):
            raise InvalidStrategyError(f"path counts must be non-decreasing: {n}")
        if any(b > a for a, b in zip(q, q[1:])):
            raise InvalidStrategyError(f"thresholds must be non-increasing: {q}")
        if q[-1] < 1:
            raise InvalidStrategyError(f"final survivor count must be >= 1: {q}")

    @property
    def levels(self) -> int:
        return len(self.q)

    @property
    def n_s(self) -> int:
        return self.q[0]

    @property
    def n_w(self) -> int:
        return self.q[-1]

    def delta_n(self) -> np.ndarray:
        return np.diff(np.asarray(self.n, dtype=np.int64))

    def delta_q(self) -> np.ndarray:
        q = np.asarray(self.q, dtype=np.int64)
        return q[:-1] - q[1:]

    def to_dict(self) -> dict:
        return {"q": list(self.q), "N": list(self.n)}

    @classmethod
    def from_dict(cls, d: dict) -> "Strategy":
        return cls(q=tuple(d["q"]), n=tuple(d["N"]))


def cost(strategy: Strategy) -> int:
    """Total scalar pricings: sum of ``q_l * (N_{l+1} - N_l)`` over levels."""
    q = np.asarray(strategy.q, dtype=np.int64)
    return int(np.sum(q * strategy.delta_n()))


def rank_select(estimates: np.ndarray, index_set: np.ndarray, keep: int) -> np.ndarray:
    """Indexes of the ``keep`` largest estimates, ties to the smaller index.

    ``estimates[j]`` is the value attached to original index ``index_set[j]``.
    Returns original indexes ordered by (value desc, index asc); this total
    order is part of the algorithm's definition and must be bit-stable.
    """
    index_set = np.asarray(index_set, dtype=np.intp)
    estimates = np.asarray(estimates, dtype=np.float64)
    if estimates.shape != index_set.shape:
        raise InvalidParameterError("estimates and index_set must align")
    if keep > index_set.size:
        raise InvalidParameterError(
            f"keep = {keep} exceeds index set size {index_set.size}"
        )
    order = np.lexsort((index_set, -estimates))
    return index_set[order[:keep]]


class GaussianSource:
    """Price source drawing iid Gaussian rows from a ScenarioParams model.

    ``draw(indexes, count)`` returns a ``count x len(indexes)`` block for the
    given (sorted) scenario indexes, consuming the owned substream.  Column
    restriction happens on the covariance factor, so restricted draws have
    exactly the restricted covariance.
    """

    def __init__(self, theta: ScenarioParams, rng: np.random.Generator):
        self.theta = theta
        self.rng = rng

    @property
    def n_s(self) -> int:
        return self.theta.n_s

    def shift_hint(self) -> np.ndarray:
        """Per-scenario centering values for numerically stable accumulation."""
        return self.theta.mu

    def draw(self, indexes: np.ndarray, count: int) -> np.ndarray:
        theta = self.theta
        if indexes.size == theta.n_s and theta.equi is not None:
            return simulate_prices(theta, count, self.rng)
        if theta.equi is not None:
            spec = theta.equi
            z = self.rng.standard_normal((count, indexes.size + 1))
            mix = np.sqrt(spec.rho) * z[:, :1] + np.sqrt(1.0 - spec.rho) * z[:, 1:]
            return theta.mu[indexes] + spec.sigma_scalar * mix
        f = theta.factor()[indexes, :]
        z = self.rng.standard_normal((count, f.shape[1]))
        return theta.mu[indexes] + z @ f.T


@dataclass
class ScreeningRun:
    """Everything a finished screening run produced.

    ``survivors[l]`` is the ascending index set alive after level ``l``'s
    selection (``survivors[0]`` is the full index range).  Entry ``l-1`` of
    ``level_estimates`` is the pair ``(entered, mu_hat)`` for level ``l``: the
    scenarios that entered the level and their cumulative means after its
    batch.  ``sums``/``counts`` freeze at a scenario's elimination level.
    """

    strategy: Strategy
    survivors: list[np.ndarray]
    level_estimates: list[tuple[np.ndarray, np.ndarray]]
    sums: np.ndarray
    counts: np.ndarray
    es_hat: float
    pricings: int = 0

    @property
    def final_survivors(self) -> np.ndarray:
        return self.survivors[-1]


class _Kahan:
    """Compensated accumulation of per-column chunk sums."""

    def __init__(self, n: int):
        self.total = np.zeros(n)
        self._c = np.zeros(n)

    def add(self, values: np.ndarray, at: np.ndarray) -> None:
        y = values - self._c[at]
        t = self.total[at] + y
        self._c[at] = (t - self.total[at]) - y
        self.total[at] = t


def run_screening(
    strategy: Strategy,
    source,
    rng: np.random.Generator | None = None,
    *,
    chunk_rows: int = DEFAULT_CHUNK_ROWS,
    observer=None,
) -> ScreeningRun:
    """Execute the screening recursion for one strategy.

    ``source`` is either a ScenarioParams (then ``rng`` is required and a
    GaussianSource is built on it) or any object with ``n_s``, ``draw`` and
    ``shift_hint``.  Paths are generated only for scenarios still alive, in
    chunks of at most ``chunk_rows`` rows.

    ``observer``, when given, is called once per level as
    ``observer(level, entered, kept, mu_hat, delta_mean, scatter_diag,
    delta_n)`` where ``entered``/``kept`` are the index sets before/after the
    level's selection, ``mu_hat`` the cumulative means over ``entered`` the
    selection used, and ``delta_mean``/``scatter_diag`` the fresh-batch
    column means and centered sums of squares over ``entered``.  Levels with
    ``delta_n == 0`` report zero batch statistics.
    """
    if isinstance(source, ScenarioParams):
        if rng is None:
            raise InvalidParameterError("rng required when passing ScenarioParams")
        source = GaussianSource(source, rng)
    n_s = source.n_s
    if strategy.n_s != n_s:
        raise InvalidStrategyError(
            f"strategy covers {strategy.n_s} scenarios, source has {n_s}"
        )
    levels = strategy.levels
    want_scatter = observer is not None
    shift = np.asarray(source.shift_hint(), dtype=np.float64)

    sums = _Kahan(n_s)
    sq = _Kahan(n_s) if want_scatter else None
    counts = np.zeros(n_s, dtype=np.int64)
    alive = np.arange(n_s, dtype=np.intp)
    survivors = [alive]
    level_estimates: list[tuple[np.ndarray, np.ndarray]] = []
    pricings = 0
    dn = strategy.delta_n()

    for lvl in range(1, levels + 1):
        entered = alive
        d = int(dn[lvl - 1])
        batch_sum = np.zeros(entered.size)
        batch_sq = np.zeros(entered.size)
        done = 0
        while done < d:
            rows = min(chunk_rows, d - done)
            x = source.draw(entered, rows)
            batch_sum, batch_sq = _fold_chunk(
                batch_sum, batch_sq, x, shift[entered], want_scatter
            )
            done += rows
        pricings += d * entered.size
        sums.add(batch_sum, entered)
        counts[entered] += d
        n_cum = strategy.n[lvl]
        with np.errstate(divide="ignore", invalid="ignore"):
            mu_hat = np.where(
                counts[entered] > 0, sums.total[entered] / max(n_cum, 1), 0.0
            )
        if d > 0:
            delta_mean = batch_sum / d
            scatter = (
                batch_sq - d * (delta_mean - shift[entered]) ** 2
                if want_scatter
                else None
            )
            if want_scatter:
                sq.add(batch_sq, entered)
        else:
            delta_mean = np.zeros(entered.size)
            scatter = np.zeros(entered.size) if want_scatter else None
        if lvl <= levels - 1:
            alive = np.sort(rank_select(mu_hat, entered, strategy.q[lvl]))
            survivors.append(alive)
        level_estimates.append((entered, mu_hat))
        if observer is not None:
            observer(lvl, entered, alive, mu_hat, delta_mean, scatter, d)

    final_idx = survivors[-1]
    entered, mu_final = level_estimates[-1]
    pos = np.searchsorted(entered, final_idx)
    es_hat = float(np.mean(mu_final[pos]))
    return ScreeningRun(
        strategy=strategy,
        survivors=survivors,
        level_estimates=level_estimates,
        sums=sums.total,
        counts=counts,
        es_hat=es_hat,
        pricings=pricings,
    )


def _fold_chunk(batch_sum, batch_sq, x, shift, want_scatter):
    batch_sum = batch_sum + np.sum(x, axis=0)
    if want_scatter:
        batch_sq = batch_sq + np.sum((x - shift) ** 2, axis=0)
    return batch_sum, batch_sq


def worst_indexes(mu: np.ndarray, n_w: int) -> np.ndarray:
    """Indexes of the ``n_w`` largest impacts, ties to the smaller index."""
    mu = np.asarray(mu, dtype=np.float64)
    return rank_select(mu, np.arange(mu.size, dtype=np.intp), n_w)


def exact_es(theta: ScenarioParams, n_w: int) -> float:
    """Average of the ``n_w`` largest true impacts."""
    if n_w > theta.n_s:
        raise InvalidParameterError(f"n_w = {n_w} exceeds n_s = {theta.n_s}")
    top = np.sort(theta.mu)[::-1][:n_w]
    return float(np.mean(top))


def correct_selection(run: ScreeningRun, theta: ScenarioParams, n_w: int) -> bool:
    """True iff the final survivor set equals the true worst-``n_w`` set."""
    truth = set(worst_indexes(theta.mu, n_w).tolist())
    return set(run.final_survivors.tolist()) == truth
