"""Renyi-DP accounting for the selection query and DP-SGD fine-tuning.

Every function here is pure. Curves are immutable and keyed by Renyi order,
so they can be shared between threads and compared bit-for-bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy import special

DEFAULT_ORDERS: tuple[float, ...] = tuple(float(a) for a in range(2, 65)) + (128.0, 256.0)

# Calibration lattice for sigma_d, in units of 0.01.
_LATTICE_STEP = 0.01
_SEARCH_START = 30
_SEARCH_CAP = 1_000_000


class AccountingError(ValueError):
    """Invalid accounting parameter."""


class InfeasibleBudgetError(Exception):
    """No noise multiplier reaches the target budget.

    ``stage`` names the pipeline stage that makes the target unreachable:
    ``"selection"`` when the selection query alone already exceeds it,
    ``"dpsgd"`` when the search cap is hit.
    """

    def __init__(self, stage: str, message: str):
        super().__init__(message)
        self.stage = stage


@dataclass(frozen=True)
class RenyiOrderGrid:
    orders: tuple[float, ...] = DEFAULT_ORDERS

    def __post_init__(self):
        orders = tuple(float(a) for a in self.orders)
        if not orders:
            raise AccountingError("order grid must be non-empty")
        if any(a <= 1.0 for a in orders):
            raise AccountingError("every Renyi order must exceed 1")
        if any(b <= a for a, b in zip(orders, orders[1:])):
            raise AccountingError("Renyi orders must be strictly increasing")
        object.__setattr__(self, "orders", orders)

    def __len__(self) -> int:
        return len(self.orders)

    def __iter__(self):
        return iter(self.orders)


DEFAULT_GRID = RenyiOrderGrid()


@dataclass(frozen=True)
class RdpCurve:
    """Cumulative RDP cost ``gamma`` at each order of a grid."""

    orders: tuple[float, ...]
    gammas: tuple[float, ...]

    def __post_init__(self):
        if len(self.orders) != len(self.gammas):
            raise AccountingError("orders and gammas differ in length")
        if any(g < 0 or math.isnan(g) for g in self.gammas):
            raise AccountingError("RDP costs must be non-negative")

    @classmethod
    def zeros(cls, grid: RenyiOrderGrid = DEFAULT_GRID) -> "RdpCurve":
        return cls(grid.orders, (0.0,) * len(grid))

    @property
    def grid(self) -> RenyiOrderGrid:
        return RenyiOrderGrid(self.orders)

    def __getitem__(self, alpha: float) -> float:
        return self.gammas[self.orders.index(float(alpha))]

    def __add__(self, other: "RdpCurve") -> "RdpCurve":
        return compose(self, other)

    def as_dict(self) -> dict[float, float]:
        return dict(zip(self.orders, self.gammas))

    def scaled(self, factor: float) -> "RdpCurve":
        return RdpCurve(self.orders, tuple(factor * g for g in self.gammas))


@dataclass(frozen=True)
class SgmParams:
    q: float
    sigma: float
    steps: int = 1

    def __post_init__(self):
        if not 0.0 < self.q <= 1.0:
            raise AccountingError(f"sampling rate q must be in (0, 1], got {self.q}")
        if not self.sigma > 0.0:
            raise AccountingError(f"noise multiplier must be positive, got {self.sigma}")
        if int(self.steps) != self.steps or self.steps < 0:
            raise AccountingError(f"steps must be a non-negative integer, got {self.steps}")


@dataclass(frozen=True)
class SelectionQueryParams:
    sigma_s: float
    clip_s: float
    n_star: int

    def __post_init__(self):
        if not self.sigma_s > 0:
            raise AccountingError("sigma_s must be positive")
        if not self.clip_s > 0:
            raise AccountingError("clip_s must be positive")
        if self.n_star < 1:
            raise AccountingError("n_star must be at least 1")

    @property
    def sensitivity(self) -> float:
        """L2 sensitivity of the averaged clipped gradient query."""
        return self.clip_s / self.n_star

    def curve(self, grid: RenyiOrderGrid = DEFAULT_GRID) -> RdpCurve:
        return gaussian_rdp(self.sigma_s, grid)


@dataclass(frozen=True)
class PrivacySpec:
    epsilon: float
    delta: float

    def __post_init__(self):
        if not self.epsilon > 0:
            raise AccountingError("epsilon must be positive")
        _check_delta(self.delta)


@dataclass(frozen=True)
class BudgetSplit:
    gamma_s_curve: RdpCurve
    gamma_d_curve: RdpCurve
    alpha: float
    r_s: float
    r_d: float


def default_delta(n: int) -> float:
    """``1 / (n ln n)``, the usual choice for a dataset of ``n`` records."""
    if n < 2:
        raise AccountingError("delta rule needs n >= 2")
    return 1.0 / (n * math.log(n))


def _check_delta(delta: float) -> None:
    if not 0.0 < delta < 1.0:
        raise AccountingError(f"delta must be in (0, 1), got {delta}")


def gaussian_rdp(sigma: float, grid: RenyiOrderGrid = DEFAULT_GRID) -> RdpCurve:
    """RDP curve ``alpha / (2 sigma^2)`` of a unit-sensitivity Gaussian mechanism.

    ``sigma = inf`` is accepted and yields the zero curve.
    """
    if not sigma > 0:
        raise AccountingError(f"noise multiplier must be positive, got {sigma}")
    if math.isinf(sigma):
        return RdpCurve.zeros(grid)
    return RdpCurve(grid.orders, tuple(a / (2.0 * sigma * sigma) for a in grid.orders))


def _check_integer_order(alpha: float) -> int:
    if alpha != int(alpha) or alpha < 2:
        raise AccountingError(f"SGM bound needs an integer order >= 2, got {alpha}")
    return int(alpha)


def sgm_rdp_step(q: float, sigma: float, alpha: float) -> float:
    """One-step RDP of the sub-sampled Gaussian mechanism at integer ``alpha``.

    Evaluates ``D_alpha((1-q) N(0, s^2) + q N(1, s^2) || N(0, s^2))`` through
    the binomial expansion, summed in log space.
    """
    SgmParams(q, sigma)
    a = _check_integer_order(alpha)
    if q == 1.0:
        return a / (2.0 * sigma * sigma)
    # The moment is 1 + sum_k binom * (1-q)^(a-k) q^k (exp(c_k) - 1); the k < 2
    # terms vanish. Summing only the excess keeps precision when q is tiny.
    k = np.arange(2, a + 1, dtype=np.float64)
    c = (k * k - k) / (2.0 * sigma * sigma)
    log_expm1 = c + np.log(-np.expm1(-c))
    log_binom = special.gammaln(a + 1) - special.gammaln(k + 1) - special.gammaln(a - k + 1)
    terms = log_binom + (a - k) * math.log1p(-q) + k * math.log(q) + log_expm1
    log_excess = float(special.logsumexp(terms))
    return float(np.logaddexp(0.0, log_excess)) / (a - 1)


def sgm_rdp(params: SgmParams, grid: RenyiOrderGrid = DEFAULT_GRID) -> RdpCurve:
    """RDP curve of ``params.steps`` composed SGM steps."""
    for a in grid.orders:
        _check_integer_order(a)
    if params.steps == 0:
        return RdpCurve.zeros(grid)
    gammas = tuple(params.steps * sgm_rdp_step(params.q, params.sigma, a) for a in grid.orders)
    return RdpCurve(grid.orders, gammas)


def compose(a: RdpCurve, b: RdpCurve) -> RdpCurve:
    """Sequential composition: pointwise sum over a shared grid."""
    if a.orders != b.orders:
        raise AccountingError("cannot compose curves on different order grids")
    return RdpCurve(a.orders, tuple(x + y for x, y in zip(a.gammas, b.gammas)))


def compose_all(curves: Iterable[RdpCurve]) -> RdpCurve:
    curves = list(curves)
    if not curves:
        raise AccountingError("nothing to compose")
    total = curves[0]
    for c in curves[1:]:
        total = compose(total, c)
    return total


def rdp_to_dp(curve: RdpCurve, delta: float) -> tuple[float, float]:
    """Convert an RDP curve to ``(epsilon, alpha_star)`` at failure probability ``delta``.

    Uses ``eps = gamma + ln(1/delta) / (alpha - 1)`` minimised over the grid;
    ties go to the smaller order.
    """
    _check_delta(delta)
    if not curve.orders:
        raise AccountingError("empty RDP curve")
    log_inv_delta = math.log(1.0 / delta)
    best_eps, best_alpha = math.inf, curve.orders[0]
    for alpha, gamma in zip(curve.orders, curve.gammas):
        eps = gamma + log_inv_delta / (alpha - 1.0)
        if eps < best_eps:
            best_eps, best_alpha = eps, alpha
    return best_eps, best_alpha


def pipeline_curve(
    sigma_s: float, q: float, sigma_d: float, t_d: int, grid: RenyiOrderGrid = DEFAULT_GRID
) -> RdpCurve:
    """Selection query composed with ``t_d`` DP-SGD steps."""
    return compose(gaussian_rdp(sigma_s, grid), sgm_rdp(SgmParams(q, sigma_d, t_d), grid))


def calibrate_sigma_d(
    target: PrivacySpec,
    selection: SelectionQueryParams | float,
    q: float,
    t_d: int,
    grid: RenyiOrderGrid = DEFAULT_GRID,
) -> float:
    """Smallest ``sigma_d`` on a 0.01 lattice meeting ``target`` after composition.

    ``selection`` may be the full query parameters or just ``sigma_s``.
    Doubling from 0.3 brackets the answer, then bisection pins the lattice point.
    """
    sigma_s = selection.sigma_s if isinstance(selection, SelectionQueryParams) else float(selection)
    selection_curve = gaussian_rdp(sigma_s, grid)
    eps_sel, _ = rdp_to_dp(selection_curve, target.delta)
    if eps_sel > target.epsilon:
        raise InfeasibleBudgetError(
            "selection",
            f"selection stage alone costs eps={eps_sel:.4f} > target {target.epsilon}",
        )
    SgmParams(q, 1.0, t_d)

    def meets(units: int) -> bool:
        curve = compose(selection_curve, sgm_rdp(SgmParams(q, units * _LATTICE_STEP, t_d), grid))
        return rdp_to_dp(curve, target.delta)[0] <= target.epsilon

    lo, hi = 0, _SEARCH_START
    while not meets(hi):
        if hi >= _SEARCH_CAP:
            raise InfeasibleBudgetError(
                "dpsgd", f"no sigma_d <= {_SEARCH_CAP * _LATTICE_STEP:g} reaches eps={target.epsilon}"
            )
        lo, hi = hi, min(2 * hi, _SEARCH_CAP)
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if meets(mid):
            hi = mid
        else:
            lo = mid
    return hi / 100


def budget_ratios(selection_curve: RdpCurve, dpsgd_curve: RdpCurve, delta: float) -> BudgetSplit:
    """Share of the total RDP cost spent by each stage at the converting order."""
    total = compose(selection_curve, dpsgd_curve)
    _, alpha = rdp_to_dp(total, delta)
    g_s, g_d = selection_curve[alpha], dpsgd_curve[alpha]
    if g_s + g_d == 0.0:
        raise AccountingError("budget ratios undefined for two zero curves")
    r_s = g_s / (g_s + g_d)
    return BudgetSplit(selection_curve, dpsgd_curve, alpha, r_s, 1.0 - r_s)


def certificate(
    *,
    q: float,
    sigma_d: float,
    t_d: int,
    sigma_s: float,
    delta: float,
    grid: RenyiOrderGrid = DEFAULT_GRID,
) -> dict:
    """Privacy report for one pipeline configuration.

    The inputs are the full accounting tuple; nothing about the trained
    parameter space enters, so full-weight and adapter runs certify alike.
    """
    sel = gaussian_rdp(sigma_s, grid)
    dp = sgm_rdp(SgmParams(q, sigma_d, t_d), grid)
    total = compose(sel, dp)
    eps, alpha = rdp_to_dp(total, delta)
    split = budget_ratios(sel, dp, delta)
    return {
        "epsilon": eps,
        "alpha_star": alpha,
        "gamma_total": total[alpha],
        "r_s": split.r_s,
        "r_d": split.r_d,
        "delta": delta,
    }


def orders_from(values: Sequence[float] | None) -> RenyiOrderGrid:
    return DEFAULT_GRID if values is None else RenyiOrderGrid(tuple(values))
