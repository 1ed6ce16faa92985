"""Frank copula, discrete (binomial-margin) joint pmf and dependence conversions."""

from __future__ import annotations

import functools
from dataclasses import dataclass

import numpy as np
from scipy import integrate, optimize, special

THETA_EPS = 1e-8
NEG_MASS_TOL = 1e-12
LOG_FLOOR = np.log(1e-300)


class NumericalInstabilityError(ArithmeticError):
    pass


class QuadratureError(ArithmeticError):
    pass


def _log_expm1(x):
    # log(exp(x) - 1) for x >= 0 without overflow
    x = np.asarray(x, dtype=float)
    big = x > 30.0
    with np.errstate(divide="ignore"):
        small_part = np.log(np.expm1(np.where(big, 1.0, x)))
    return np.where(big, x + np.log1p(-np.exp(-np.where(big, x, 30.0))), small_part)


def _frank_pos(u, v, t):
    """Frank CDF for t > 0 (arrays broadcast)."""
    a = np.expm1(-t * u)
    b = np.expm1(-t * v)
    c = np.expm1(-t)
    arg = a * b / c
    direct = -np.log1p(arg) / t
    # 1 + arg is near zero when t*u and t*v are both large; use the factored
    # log form there: C = m - [log1p(x) - log1p(-e^-t)] / t with m = min(u, v).
    m = np.minimum(u, v)
    big = np.maximum(u, v)
    x = np.exp(-t * (big - m)) - np.exp(-t * big) - np.exp(-t * (1.0 - m))
    factored = m - (np.log1p(x) - np.log1p(-np.exp(-t))) / t
    return np.where(1.0 + arg > 0.5, direct, factored)


def _frank_neg(u, v, s):
    """Frank CDF for theta = -s < 0. All terms positive, so no cancellation."""
    with np.errstate(divide="ignore"):
        la = _log_expm1(s * u)
        lb = _log_expm1(s * v)
    lc = _log_expm1(s)
    return np.logaddexp(0.0, la + lb - lc) / s


def frank_cdf(u, v, theta):
    """Frank copula C(u, v; theta), vectorised over all arguments.

    theta == 0 (|theta| < 1e-8) gives the independence copula u*v.
    """
    u = np.clip(np.asarray(u, dtype=float), 0.0, 1.0)
    v = np.clip(np.asarray(v, dtype=float), 0.0, 1.0)
    theta = np.asarray(theta, dtype=float)
    u, v, theta = np.broadcast_arrays(u, v, theta)
    indep = np.abs(theta) < THETA_EPS
    pos = theta >= THETA_EPS
    neg = theta <= -THETA_EPS
    out = u * v
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        if pos.any():
            out = np.where(pos, _frank_pos(u, v, np.where(pos, theta, 1.0)), out)
        if neg.any():
            out = np.where(neg, _frank_neg(u, v, np.where(neg, -theta, 1.0)), out)
    out = np.where(indep, u * v, out)
    # Fréchet-Hoeffding bounds absorb last-ulp drift
    out = np.clip(out, np.maximum(u + v - 1.0, 0.0), np.minimum(u, v))
    return out[()] if out.ndim == 0 else out


def rect_mass(F1_hi, F1_lo, F2_hi, F2_lo, theta, *, check=True):
    """Copula mass of the rectangle [F1_lo, F1_hi] x [F2_lo, F2_hi]."""
    m = (
        frank_cdf(F1_hi, F2_hi, theta)
        - frank_cdf(F1_lo, F2_hi, theta)
        - frank_cdf(F1_hi, F2_lo, theta)
        + frank_cdf(F1_lo, F2_lo, theta)
    )
    m = np.asarray(m)
    if check and np.any(m < -NEG_MASS_TOL):
        i = np.unravel_index(np.argmin(m), m.shape) if m.ndim else ()
        pick = lambda a: np.broadcast_to(np.asarray(a, dtype=float), m.shape)[i]
        raise NumericalInstabilityError(
            f"negative rectangle mass {m[i]:.3e} for F1=({pick(F1_lo)}, {pick(F1_hi)}), "
            f"F2=({pick(F2_lo)}, {pick(F2_hi)}), theta={pick(theta)}"
        )
    m = np.maximum(m, 0.0)
    return m[()] if m.ndim == 0 else m


def binom_tail(k, n, p, upper):
    """P(X <= k) where ``upper`` is False and P(X > k) where it is True.

    Both come from one regularised incomplete beta call, so survival
    probabilities in the upper tail keep full relative precision.
    """
    k = np.asarray(k, dtype=float)
    n = np.asarray(n, dtype=float)
    p = np.asarray(p, dtype=float)
    k, n, p, upper = np.broadcast_arrays(k, n, p, np.asarray(upper, dtype=bool))
    inside = (k >= 0) & (k < n)
    kk = np.where(inside, k, 0.0)
    a = np.where(inside, np.where(upper, kk + 1.0, n - kk), 1.0)
    b = np.where(upper, n - kk, kk + 1.0)
    b = np.where(inside, b, 1.0)
    val = special.betainc(a, b, np.where(upper, p, 1.0 - p))
    below = np.where(upper, 1.0, 0.0)
    out = np.where(k < 0, below, np.where(k >= n, 1.0 - below, val))
    return out[()] if out.ndim == 0 else out


def binom_cdf(k, n, p):
    """Binomial CDF through the regularised incomplete beta function.

    F(k) = 0 for k < 0 and 1 for k >= n.
    """
    return binom_tail(k, n, p, False)


def binom_sf(k, n, p):
    return binom_tail(k, n, p, True)


def binom_cell_bounds(x, n, p):
    """Copula arguments (hi, lo) of the cell {X = x} and its orientation.

    Counts above the mean n*p are described by the reflected variable -X,
    whose CDF values are survival probabilities: hi = P(X >= x),
    lo = P(X > x). A stacked leading axis of length 2 holds (hi, lo).
    """
    x = np.asarray(x, dtype=float)
    n = np.asarray(n, dtype=float)
    p = np.asarray(p, dtype=float)
    upper = x > n * p
    k = np.stack(np.broadcast_arrays(np.where(upper, x - 1, x), np.where(upper, x, x - 1)))
    return binom_tail(k, n[None] if n.ndim else n, p[None] if p.ndim else p, upper[None] if upper.ndim else upper), upper


def oriented_theta(theta, upper1, upper2):
    """Frank parameter for the pair after reflecting the flagged margins.

    Reflecting both margins leaves Frank unchanged (radial symmetry);
    reflecting one maps theta to -theta.
    """
    return np.where(np.logical_xor(upper1, upper2), -np.asarray(theta, dtype=float), theta)


def binom_frank_pmf(x1, x2, p1, p2, n1, n2, theta):
    """P(X1 = x1, X2 = x2) with Bin(n1, p1), Bin(n2, p2) margins joined by Frank.

    Evaluated as the copula rectangle mass of the cell, with each margin
    oriented so its bounds stay away from 1 (see binom_cell_bounds).
    """
    b1, u1 = binom_cell_bounds(x1, n1, p1)
    b2, u2 = binom_cell_bounds(x2, n2, p2)
    return rect_mass(b1[0], b1[1], b2[0], b2[1], oriented_theta(theta, u1, u2))


def binom_frank_logpmf(x1, x2, p1, p2, n1, n2, theta, *, return_floor_hits=False):
    """Log pmf with zero-mass cells floored at log(1e-300)."""
    m = np.asarray(binom_frank_pmf(x1, x2, p1, p2, n1, n2, theta))
    hits = m < 1e-300
    with np.errstate(divide="ignore"):
        out = np.where(hits, LOG_FLOOR, np.log(np.where(hits, 1.0, m)))
    out = out[()] if out.ndim == 0 else out
    if return_floor_hits:
        return out, int(hits.sum())
    return out


@dataclass(frozen=True)
class DiscreteJointPmf:
    """Joint pmf on {0..n1} x {0..n2} with binomial margins and a Frank copula."""

    n1: int
    n2: int
    p1: float
    p2: float
    theta: float

    def table(self) -> np.ndarray:
        """Full (n1+1, n2+1) table by differencing the copula on the CDF grid."""
        F1 = binom_cdf(np.arange(-1, self.n1 + 1), self.n1, self.p1)
        F2 = binom_cdf(np.arange(-1, self.n2 + 1), self.n2, self.p2)
        C = frank_cdf(F1[:, None], F2[None, :], self.theta)
        m = C[1:, 1:] - C[:-1, 1:] - C[1:, :-1] + C[:-1, :-1]
        if m.min() < -NEG_MASS_TOL:
            raise NumericalInstabilityError(f"negative cell mass {m.min():.3e} in {self}")
        return np.maximum(m, 0.0)

    def pmf(self, x1, x2):
        return binom_frank_pmf(x1, x2, self.p1, self.p2, self.n1, self.n2, self.theta)

    def logpmf(self, x1, x2):
        return binom_frank_logpmf(x1, x2, self.p1, self.p2, self.n1, self.n2, self.theta)

    def correlation(self) -> float:
        """Pearson correlation of (X1, X2) under the table."""
        t = self.table()
        x1 = np.arange(self.n1 + 1)
        x2 = np.arange(self.n2 + 1)
        m1 = t.sum(1) @ x1
        m2 = t.sum(0) @ x2
        v1 = t.sum(1) @ (x1 - m1) ** 2
        v2 = t.sum(0) @ (x2 - m2) ** 2
        cov = (x1 - m1) @ t @ (x2 - m2)
        return float(cov / np.sqrt(v1 * v2))


def bernoulli_frank_table(p1, p2, theta):
    """2x2 cell probabilities indexed [x1, x2] for Bernoulli margins.

    Vectorised: returns shape broadcast(p1, p2, theta) + (2, 2).
    """
    q1 = 1.0 - np.asarray(p1, dtype=float)
    q2 = 1.0 - np.asarray(p2, dtype=float)
    c00 = frank_cdf(q1, q2, theta)
    c01 = q1 - c00
    c10 = q2 - c00
    c11 = 1.0 - q1 - q2 + c00
    t = np.stack([np.stack([c00, c01], -1), np.stack([c10, c11], -1)], -2)
    return np.maximum(t, 0.0)


def sample_bernoulli_pair(p1, p2, theta, rng: np.random.Generator, size=None):
    """Draw (X1, X2) bits whose joint law is the Frank/Bernoulli 2x2 table.

    p1, p2 and theta broadcast; ``size`` adds leading draw dimensions.
    Returns two integer arrays (or two ints when everything is scalar).
    """
    t = bernoulli_frank_table(p1, p2, theta)
    probs = t.reshape(t.shape[:-2] + (4,))
    cum = np.cumsum(probs, axis=-1)
    cum[..., -1] = 1.0
    shape = probs.shape[:-1] if size is None else tuple(np.atleast_1d(size)) + probs.shape[:-1]
    u = rng.random(shape)
    cell = (u[..., None] > np.broadcast_to(cum[..., :3], shape + (3,))).sum(-1)
    x1, x2 = cell // 2, cell % 2
    if np.ndim(x1) == 0:
        return int(x1), int(x2)
    return x1, x2


def _c_integral(theta: float) -> tuple[float, float]:
    f = lambda v, u: float(frank_cdf(u, v, theta))
    return integrate.dblquad(f, 0.0, 1.0, 0.0, 1.0, epsabs=1e-9, epsrel=1e-9)


@functools.lru_cache(maxsize=4096)
def spearman_rho(theta: float) -> float:
    """Spearman's rho of the Frank copula, 12 * int C du dv - 3.

    Evaluated by adaptive 2-D quadrature; rho(-theta) = -rho(theta) is used
    so only theta > 0 is integrated.
    """
    theta = float(theta)
    if not np.isfinite(theta):
        raise ValueError("theta must be finite")
    if abs(theta) < THETA_EPS:
        return 0.0
    val, err = _c_integral(abs(theta))
    if 12 * err > 1e-6:
        raise QuadratureError(f"Spearman quadrature reached only {12 * err:.2e} absolute error")
    rho = 12.0 * val - 3.0
    return rho if theta > 0 else -rho


def theta_from_spearman(rho_s: float) -> float:
    """Frank theta with the given Spearman correlation (Brent root search)."""
    rho_s = float(rho_s)
    if not abs(rho_s) < 0.999:
        raise ValueError(f"|rho_s| must be < 0.999, got {rho_s}")
    if rho_s == 0.0:
        return 0.0
    lo, hi = -1.0, 1.0
    while spearman_rho(lo) > rho_s:
        lo *= 2.0
    while spearman_rho(hi) < rho_s:
        hi *= 2.0
    return optimize.brentq(lambda t: spearman_rho(t) - rho_s, lo, hi, xtol=1e-10, rtol=1e-12)
