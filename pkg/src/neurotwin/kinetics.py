"""Tumor-volume trend fitting: polynomial least squares with full diagnostics.

The solver works on a time axis centered and scaled to [-1, 1] (raw day
numbers are numerically hostile for cubic designs) and maps coefficients
back exactly.  Forecast intervals use the standard OLS leverage formula, so
uncertainty widens as the query point leaves the observed range.
"""

from __future__ import annotations

import datetime as _dt
import math
from dataclasses import dataclass, field
from typing import List, Sequence, Tuple

import numpy as np
from numpy.polynomial import Polynomial
from scipy.linalg import solve_triangular
from scipy.stats import f as f_dist
from scipy.stats import t as t_dist

from .errors import InvalidInputError, SingularFitError

_EPOCH = _dt.date(1970, 1, 1)


def date_to_days(date_iso: str) -> float:
    return float((_dt.date.fromisoformat(date_iso) - _EPOCH).days)


def days_to_date(t_days: float) -> str:
    return (_EPOCH + _dt.timedelta(days=round(t_days))).isoformat()


@dataclass
class VolumeSeries:
    """Strictly increasing observation times (days) with positive volumes (cc)."""

    t_days: np.ndarray
    volume_cc: np.ndarray

    def __post_init__(self):
        self.t_days = np.asarray(self.t_days, dtype=np.float64)
        self.volume_cc = np.asarray(self.volume_cc, dtype=np.float64)
        if self.t_days.shape != self.volume_cc.shape or self.t_days.ndim != 1:
            raise InvalidInputError("t and volume must be equal-length 1-D arrays")
        if self.t_days.size < 2:
            raise InvalidInputError("need at least two observations")
        if not np.all(np.diff(self.t_days) > 0):
            raise InvalidInputError("observation times must be strictly increasing")
        if not (np.all(np.isfinite(self.volume_cc)) and np.all(self.volume_cc > 0)):
            raise InvalidInputError("volumes must be finite and positive")

    @property
    def n(self) -> int:
        return self.t_days.size


@dataclass
class PolyFit:
    """Fitted coefficients (ascending powers, raw time axis) plus diagnostics.

    ``p_value`` is the upper-tail exceedance probability of the model
    F statistic; for a constant-target fit the F test is undefined and
    ``degenerate`` is set instead of inventing numbers.
    """

    degree: int
    coeffs: np.ndarray
    r_squared: float
    f_statistic: float
    p_value: float
    sse: float
    mse: float
    std_error: float
    n: int
    degenerate: bool = False
    # internals kept for prediction/leverage, in the scaled design space
    t_center: float = 0.0
    t_half: float = 1.0
    scaled_coeffs: np.ndarray = field(default_factory=lambda: np.zeros(1))
    xtx_inv: np.ndarray = field(default_factory=lambda: np.eye(1))


@dataclass
class Forecast:
    t_future: float
    point_cc: float
    interval_low_cc: float
    interval_high_cc: float
    confidence_level: float = 0.95


def _scaled(fit_or_center, t):
    if isinstance(fit_or_center, PolyFit):
        return (np.asarray(t, dtype=np.float64) - fit_or_center.t_center) / fit_or_center.t_half
    raise TypeError


def fit(series: VolumeSeries, degree: int = 3) -> PolyFit:
    """Least-squares polynomial via QR on the scaled Vandermonde design."""
    if degree < 1:
        raise InvalidInputError("degree must be >= 1")
    n = series.n
    if n < degree + 2:
        raise InvalidInputError(
            f"need at least degree + 2 = {degree + 2} observations, got {n}")
    t = series.t_days
    y = series.volume_cc
    center = float((t[0] + t[-1]) / 2.0)
    half = float((t[-1] - t[0]) / 2.0)
    s = (t - center) / half
    X = np.vander(s, degree + 1, increasing=True)

    q, r = np.linalg.qr(X)
    diag = np.abs(np.diag(r))
    if np.any(diag < 1e-12 * max(1.0, diag.max())):
        raise SingularFitError("design matrix is rank deficient")
    beta = solve_triangular(r, q.T @ y)

    yhat = X @ beta
    resid = y - yhat
    sse = float(resid @ resid)
    sst = float(np.sum((y - y.mean()) ** 2))
    df_resid = n - degree - 1
    mse = sse / df_resid
    std_error = math.sqrt(mse)

    if sst == 0.0:
        # constant target: R^2 = 1 only if the fit is exact too; the F test
        # has no variance to explain either way
        r2 = 1.0 if sse <= 1e-20 else math.nan
        f_stat = math.nan
        p_val = math.nan
        degenerate = True
    else:
        r2 = 1.0 - sse / sst
        if sse == 0.0:
            f_stat = math.inf
            p_val = 0.0
        else:
            f_stat = ((sst - sse) / degree) / (sse / df_resid)
            p_val = float(f_dist.sf(f_stat, degree, df_resid))
        degenerate = False

    r_inv = solve_triangular(r, np.eye(degree + 1))
    xtx_inv = r_inv @ r_inv.T

    raw = Polynomial(beta, domain=[t[0], t[-1]], window=[-1, 1]).convert().coef
    coeffs = np.zeros(degree + 1)
    coeffs[: raw.size] = raw

    return PolyFit(
        degree=degree, coeffs=coeffs, r_squared=r2, f_statistic=f_stat,
        p_value=p_val, sse=sse, mse=mse, std_error=std_error, n=n,
        degenerate=degenerate, t_center=center, t_half=half,
        scaled_coeffs=np.asarray(beta), xtx_inv=xtx_inv,
    )


def predict(fitted: PolyFit, t_days) -> np.ndarray:
    """Evaluate the fitted polynomial (uses the scaled-space coefficients)."""
    s = _scaled(fitted, t_days)
    return np.polynomial.polynomial.polyval(s, fitted.scaled_coeffs)


def leverage(fitted: PolyFit, t_days: float) -> float:
    s = float(_scaled(fitted, t_days))
    x0 = np.array([s ** k for k in range(fitted.degree + 1)])
    return float(x0 @ fitted.xtx_inv @ x0)


def forecast(fitted: PolyFit, t_future: float,
             confidence: float = 0.95) -> Forecast:
    """Point prediction with a leverage-widened prediction interval."""
    if not math.isfinite(t_future):
        raise InvalidInputError("t_future must be finite")
    if not (0.0 < confidence < 1.0):
        raise InvalidInputError("confidence must be in (0, 1)")
    point = float(predict(fitted, t_future))
    df_resid = fitted.n - fitted.degree - 1
    quantile = float(t_dist.ppf(0.5 + confidence / 2.0, df_resid))
    halfwidth = quantile * fitted.std_error * math.sqrt(1.0 + leverage(fitted, t_future))
    return Forecast(t_future, point, point - halfwidth, point + halfwidth,
                    confidence)


@dataclass
class TrendShape:
    """Derivative sign analysis over a horizon.

    ``segments`` are (t_start, t_end, "rising"|"declining") spans;
    ``turning_points`` are (t, "peak"|"trough") where the derivative
    changes sign.
    """

    segments: List[Tuple[float, float, str]]
    turning_points: List[Tuple[float, str]]


def trend_shape(fitted: PolyFit, horizon: Tuple[float, float]) -> TrendShape:
    if fitted.degree < 2:
        raise InvalidInputError("trend analysis needs degree >= 2")
    t0, t1 = horizon
    if not (t0 < t1):
        raise InvalidInputError("horizon must satisfy start < end")
    poly = Polynomial(fitted.scaled_coeffs)
    deriv = poly.deriv()
    s0, s1 = float(_scaled(fitted, t0)), float(_scaled(fitted, t1))

    roots = deriv.roots()
    real = [float(r.real) for r in np.atleast_1d(roots)
            if abs(r.imag) < 1e-9 and s0 < r.real < s1]
    real.sort()

    knots = [s0] + real + [s1]
    segments = []
    for a, b in zip(knots[:-1], knots[1:]):
        mid = (a + b) / 2.0
        label = "rising" if deriv(mid) > 0 else "declining"
        segments.append((fitted.t_center + fitted.t_half * a,
                         fitted.t_center + fitted.t_half * b, label))
    turning_points = []
    for r in real:
        before, after = deriv(r - 1e-6), deriv(r + 1e-6)
        kind = "peak" if before > 0 > after else ("trough" if before < 0 < after else "flat")
        turning_points.append((fitted.t_center + fitted.t_half * r, kind))
    return TrendShape(segments, turning_points)


# ---------------------------------------------------------------------------
# Synthetic series + CSV formats
# ---------------------------------------------------------------------------

def synth_volume_series(seed: int, n: int = 151, start_date: str = "2025-06-01",
                        spacing_days: int = 1, base_cc: float = 20.0,
                        growth: Tuple[float, float, float] = (0.6, 0.004, 1.2e-5),
                        noise_cc: float = 4.0) -> VolumeSeries:
    """Noisy cubic growth record, one observation per ``spacing_days`` days.

    Whole-day spacing keeps the series faithful to the date-granular CSV
    format.
    """
    rng = np.random.default_rng(seed)
    t0 = date_to_days(start_date)
    t = t0 + np.arange(n, dtype=np.float64) * spacing_days
    rel = t - t0
    c1, c2, c3 = growth
    y = base_cc + c1 * rel + c2 * rel ** 2 + c3 * rel ** 3
    y = y + rng.normal(0.0, noise_cc, size=n)
    y = np.maximum(y, 0.5)
    return VolumeSeries(t, y)


def read_volumes_csv(path: str) -> VolumeSeries:
    """CSV with header ``date_iso,volume_cc``."""
    ts, vols = [], []
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip()
        if header != "date_iso,volume_cc":
            raise InvalidInputError(f"unexpected volumes CSV header: {header!r}")
        for line in fh:
            line = line.strip()
            if not line:
                continue
            date_iso, vol = line.split(",")
            ts.append(date_to_days(date_iso))
            vols.append(float(vol))
    return VolumeSeries(np.asarray(ts), np.asarray(vols))


def write_volumes_csv(path: str, series: VolumeSeries) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("date_iso,volume_cc\n")
        for t, v in zip(series.t_days, series.volume_cc):
            fh.write(f"{days_to_date(t)},{float(v)!r}\n")


FORECAST_CSV_HEADER = "kind,date_iso,t_days,volume_cc,interval_low_cc,interval_high_cc"


def write_forecast_csv(path: str, series: VolumeSeries, fitted: PolyFit,
                       forecasts: Sequence[Forecast]) -> None:
    """Observed, fitted and forecast rows distinguished by a ``kind`` column."""
    fitted_vals = predict(fitted, series.t_days)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(FORECAST_CSV_HEADER + "\n")
        for t, v in zip(series.t_days, series.volume_cc):
            fh.write(f"observed,{days_to_date(t)},{float(t)!r},{float(v)!r},,\n")
        for t, v in zip(series.t_days, fitted_vals):
            fh.write(f"fitted,{days_to_date(t)},{float(t)!r},{float(v)!r},,\n")
        for fc in forecasts:
            fh.write(
                f"forecast,{days_to_date(fc.t_future)},{float(fc.t_future)!r},"
                f"{fc.point_cc!r},{fc.interval_low_cc!r},{fc.interval_high_cc!r}\n")


def fit_report_text(fitted: PolyFit) -> str:
    """Human-readable diagnostics block in the dashboard style."""
    lines = [
        f"observations: {fitted.n}",
        f"degree: {fitted.degree}",
        f"coefficients (ascending): "
        + ", ".join(format(c, ".6g") for c in fitted.coeffs),
    ]
    if fitted.degenerate:
        lines.append("diagnostics: degenerate (constant target; F test undefined)")
        lines.append(f"R^2: {fitted.r_squared}")
    else:
        lines.append(f"R^2: {fitted.r_squared:.6f}")
        lines.append(f"F-statistic: {fitted.f_statistic:.6g}")
        note = "< 0.0001" if fitted.p_value < 1e-4 else format(fitted.p_value, ".6g")
        lines.append(f"p-value: {note}")
    lines.append(f"SSE: {fitted.sse:.6g}")
    lines.append(f"MSE: {fitted.mse:.6g}")
    lines.append(f"std error: {fitted.std_error:.6g}")
    return "\n".join(lines)
