"""Hypothesis tests and simple regression for awareness-score analysis.

Student-t tail probabilities come from the regularized incomplete beta
function, evaluated with a modified-Lentz continued fraction so that far
tails (p around 1e-250) keep full relative precision.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

SIGNIFICANCE_LEVELS = (0.01, 0.05, 0.1)

_CF_EPS = 1e-15
_CF_TINY = 1e-300
_CF_MAX_ITER = 10_000


class StatsError(ValueError):
    pass


def _betacf(a: float, b: float, x: float) -> float:
    """Continued fraction for I_x(a, b) (modified Lentz)."""
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < _CF_TINY:
        d = _CF_TINY
    d = 1.0 / d
    h = d
    for m in range(1, _CF_MAX_ITER + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < _CF_TINY:
            d = _CF_TINY
        c = 1.0 + aa / c
        if abs(c) < _CF_TINY:
            c = _CF_TINY
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < _CF_TINY:
            d = _CF_TINY
        c = 1.0 + aa / c
        if abs(c) < _CF_TINY:
            c = _CF_TINY
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _CF_EPS:
            return h
    raise StatsError(f"incomplete beta continued fraction did not converge (a={a}, b={b}, x={x})")


def betainc_regularized(a: float, b: float, x: float, *, log1mx: float | None = None) -> float:
    """Regularized incomplete beta I_x(a, b).

    ``log1mx`` may carry an accurately computed log(1 - x) when x is close to 1.
    """
    if a <= 0 or b <= 0:
        raise StatsError("betainc requires a > 0 and b > 0")
    if not 0.0 <= x <= 1.0:
        raise StatsError("betainc requires 0 <= x <= 1")
    if x == 0.0:
        return 0.0
    if x == 1.0:
        return 1.0
    if log1mx is None:
        log1mx = math.log1p(-x)
    log_front = math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b) + a * math.log(x) + b * log1mx
    if x < (a + 1.0) / (a + b + 2.0):
        return math.exp(log_front) * _betacf(a, b, x) / a
    return 1.0 - math.exp(log_front) * _betacf(b, a, 1.0 - x) / b


def student_t_sf(t: float, df: float) -> float:
    """Upper-tail probability P(T > t) for Student's t with ``df`` degrees of freedom."""
    if not df > 0:
        raise StatsError("df must be positive")
    if math.isnan(t):
        return math.nan
    if math.isinf(t):
        return 0.0 if t > 0 else 1.0
    if t == 0.0:
        return 0.5
    t2 = t * t
    # x = df / (df + t^2), 1 - x = t^2 / (df + t^2); both formed without cancellation
    x = df / (df + t2)
    one_minus_x = t2 / (df + t2)
    half_a = df / 2.0
    if x < (half_a + 1.0) / (half_a + 2.5):
        tail = 0.5 * betainc_regularized(half_a, 0.5, x, log1mx=math.log(one_minus_x))
    else:
        tail = 0.5 * (1.0 - betainc_regularized(0.5, half_a, one_minus_x, log1mx=math.log(x)))
    return tail if t > 0 else 1.0 - tail


def student_t_two_sided(t: float, df: float) -> float:
    return min(1.0, 2.0 * student_t_sf(abs(t), df))


def stars(p: float) -> str:
    if p < 0.01:
        return "***"
    if p < 0.05:
        return "**"
    if p < 0.1:
        return "*"
    return ""


@dataclass(frozen=True)
class TTestResult:
    mean: float
    t_statistic: float
    p_value: float
    df: int
    significant_at: frozenset[float] = field(default_factory=frozenset)

    @property
    def stars(self) -> str:
        return stars(self.p_value)

    def report(self, statistic: str) -> dict:
        return {
            "statistic": statistic,
            "value": self.mean,
            "t": self.t_statistic,
            "p": self.p_value,
            "df": self.df,
            "stars": self.stars,
        }


def _significance(p: float) -> frozenset[float]:
    return frozenset(level for level in SIGNIFICANCE_LEVELS if p < level)


def one_tailed_ttest_greater(values: Sequence[float], null: float = 0.0) -> TTestResult:
    """One-sample t-test of H0: mean <= null against H1: mean > null."""
    x = np.asarray(values, dtype=np.float64)
    n = x.size
    if n < 2:
        raise StatsError(f"t-test needs at least 2 values, got {n}")
    mean = float(np.mean(x))
    sd = float(np.std(x, ddof=1))
    if not sd > 0:
        raise StatsError("t-test undefined: sample has zero variance")
    t = (mean - null) / (sd / math.sqrt(n))
    p = student_t_sf(t, n - 1)
    return TTestResult(mean, t, p, n - 1, _significance(p))


def mean_difference_test(a: Sequence[float], b: Sequence[float], paired: bool = True) -> TTestResult:
    """One-tailed test of H0: mean(a) - mean(b) <= 0.

    The paired form is the one-sample test on ``a - b``. The unpaired form
    uses the pooled-variance two-sample statistic with n_a + n_b - 2 df.
    """
    xa = np.asarray(a, dtype=np.float64)
    xb = np.asarray(b, dtype=np.float64)
    if paired:
        if xa.shape != xb.shape:
            raise StatsError(f"paired test needs equal lengths, got {xa.size} and {xb.size}")
        return one_tailed_ttest_greater(xa - xb)
    na, nb = xa.size, xb.size
    if na < 2 or nb < 2:
        raise StatsError("two-sample test needs at least 2 values per group")
    df = na + nb - 2
    pooled = (np.sum((xa - xa.mean()) ** 2) + np.sum((xb - xb.mean()) ** 2)) / df
    if not pooled > 0:
        raise StatsError("two-sample test undefined: zero pooled variance")
    diff = float(xa.mean() - xb.mean())
    t = diff / math.sqrt(pooled * (1.0 / na + 1.0 / nb))
    p = student_t_sf(t, df)
    return TTestResult(diff, t, p, df, _significance(p))


@dataclass(frozen=True)
class NormalityScreen:
    skewness: float
    excess_kurtosis: float
    passed: bool

    def __iter__(self):
        return iter((self.skewness, self.excess_kurtosis, self.passed))


def normality_screen(values: Sequence[float]) -> NormalityScreen:
    """Moment-based screen: passes when |skew| < 2 and |excess kurtosis| < 7.

    Uses the population-moment estimators g1 = m3 / m2^1.5 and g2 = m4 / m2^2 - 3.
    """
    x = np.asarray(values, dtype=np.float64)
    if x.size < 8:
        raise StatsError(f"normality screen needs at least 8 values, got {x.size}")
    dev = x - x.mean()
    m2 = float(np.mean(dev**2))
    if m2 == 0.0:
        raise StatsError("normality screen undefined: zero variance")
    skew = float(np.mean(dev**3)) / m2**1.5
    kurt = float(np.mean(dev**4)) / m2**2 - 3.0
    return NormalityScreen(skew, kurt, abs(skew) < 2.0 and abs(kurt) < 7.0)


@dataclass(frozen=True)
class RegressionResult:
    slope: float
    intercept: float
    slope_se: float
    intercept_se: float
    r_squared: float
    f_statistic: float
    residual_se: float
    n: int
    slope_t: float
    intercept_t: float
    slope_p: float
    intercept_p: float
    adj_r_squared: float

    @property
    def df_resid(self) -> int:
        return self.n - 2

    def report(self, dependent: str, regressor: str) -> dict:
        """Layout of a one-regressor results table."""
        return {
            "dependent": dependent,
            "coefficients": [
                {
                    "name": regressor,
                    "estimate": self.slope,
                    "se": self.slope_se,
                    "t": self.slope_t,
                    "p": self.slope_p,
                    "stars": stars(self.slope_p),
                },
                {
                    "name": "const",
                    "estimate": self.intercept,
                    "se": self.intercept_se,
                    "t": self.intercept_t,
                    "p": self.intercept_p,
                    "stars": stars(self.intercept_p),
                },
            ],
            "observations": self.n,
            "r_squared": self.r_squared,
            "adj_r_squared": self.adj_r_squared,
            "residual_se": self.residual_se,
            "residual_df": self.df_resid,
            "f_statistic": self.f_statistic,
            "f_df": [1, self.df_resid],
            "f_stars": stars(student_t_two_sided(self.slope_t, self.df_resid)),
        }


def ols_simple(x: Sequence[float], y: Sequence[float]) -> RegressionResult:
    """Least-squares fit of y = intercept + slope * x."""
    xv = np.asarray(x, dtype=np.float64)
    yv = np.asarray(y, dtype=np.float64)
    if xv.shape != yv.shape or xv.ndim != 1:
        raise StatsError("x and y must be 1-D and of equal length")
    n = xv.size
    if n < 3:
        raise StatsError(f"regression needs at least 3 points, got {n}")
    mx, my = xv.mean(), yv.mean()
    dx, dy = xv - mx, yv - my
    sxx = float(dx @ dx)
    if not sxx > 0:
        raise StatsError("regression undefined: x has zero variance")
    sxy = float(dx @ dy)
    syy = float(dy @ dy)
    slope = sxy / sxx
    intercept = float(my - slope * mx)
    resid = yv - (intercept + slope * xv)
    ssr = float(resid @ resid)
    df = n - 2
    sigma2 = ssr / df
    slope_se = math.sqrt(sigma2 / sxx)
    intercept_se = math.sqrt(sigma2 * (1.0 / n + mx * mx / sxx))
    r2 = 1.0 - ssr / syy if syy > 0 else 1.0
    adj = 1.0 - (1.0 - r2) * (n - 1) / df
    if sigma2 > 0:
        slope_t = slope / slope_se
        intercept_t = intercept / intercept_se if intercept_se > 0 else math.copysign(math.inf, intercept)
        f = (syy - ssr) / sigma2
    else:
        slope_t = math.copysign(math.inf, slope) if slope else 0.0
        intercept_t = math.copysign(math.inf, intercept) if intercept else 0.0
        f = math.inf
    return RegressionResult(
        slope=slope,
        intercept=intercept,
        slope_se=slope_se,
        intercept_se=intercept_se,
        r_squared=r2,
        f_statistic=f,
        residual_se=math.sqrt(sigma2),
        n=n,
        slope_t=slope_t,
        intercept_t=intercept_t,
        slope_p=student_t_two_sided(slope_t, df),
        intercept_p=student_t_two_sided(intercept_t, df),
        adj_r_squared=adj,
    )
