"""Correlation and paired-comparison statistics."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import special

from .errors import ShapeError, UndefinedCorrelation


def pearson_r(a, b) -> float:
    """Sample Pearson correlation of two equal-length vectors (n >= 3)."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.size != b.size:
        raise ShapeError(f"length mismatch {a.size} vs {b.size}")
    if a.size < 3:
        raise ShapeError("pearson_r needs at least 3 samples")
    da = a - a.mean()
    db = b - b.mean()
    saa = da @ da
    sbb = db @ db
    if saa == 0.0 or sbb == 0.0:
        raise UndefinedCorrelation("correlation undefined for a constant input")
    r = (da @ db) / math.sqrt(saa * sbb)
    return float(min(1.0, max(-1.0, r)))


def student_t_sf2(t: float, df: float) -> float:
    """Two-tailed tail probability ``P(|T| >= |t|)`` for Student's t.

    Uses the regularized incomplete beta identity
    ``P = I_{df/(df+t^2)}(df/2, 1/2)``.
    """
    if math.isinf(t):
        return 0.0
    return float(special.betainc(0.5 * df, 0.5, df / (df + t * t)))


def student_t_cdf(t: float, df: float) -> float:
    tail = 0.5 * student_t_sf2(t, df)
    return 1.0 - tail if t >= 0 else tail


@dataclass(frozen=True)
class PairedStats:
    delta_mean: float
    t: float
    df: int
    p: float
    cohens_d: float
    n: int
    degenerate: bool = False

    def as_dict(self) -> dict:
        return {"delta_mean": self.delta_mean, "t": self.t, "df": self.df, "p": self.p,
                "cohens_d": self.cohens_d, "n": self.n, "degenerate": self.degenerate}


def paired_compare(condition_a, condition_b) -> PairedStats:
    """Two-tailed paired t-test of ``a - b`` with Cohen's d of the differences.

    ``d = mean(diff) / sd(diff)`` with the n-1 denominator. Differences with
    zero variance and nonzero mean give ``p = 0`` and ``degenerate=True``.
    """
    a = np.asarray(condition_a, dtype=np.float64).ravel()
    b = np.asarray(condition_b, dtype=np.float64).ravel()
    if a.size != b.size:
        raise ShapeError("paired samples must have equal length")
    n = a.size
    if n < 2:
        raise ShapeError("paired_compare needs n >= 2")
    diff = a - b
    mean = float(diff.mean())
    sd = float(diff.std(ddof=1))
    if sd == 0.0:
        if mean == 0.0:
            return PairedStats(0.0, 0.0, n - 1, 1.0, 0.0, n)
        inf = math.copysign(math.inf, mean)
        return PairedStats(mean, inf, n - 1, 0.0, inf, n, degenerate=True)
    t = mean / (sd / math.sqrt(n))
    return PairedStats(mean, t, n - 1, student_t_sf2(t, n - 1), mean / sd, n)
