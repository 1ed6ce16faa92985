"""Within-study association estimators and informative-prior elicitation.

Two Frank parameters appear in this package and they are not interchangeable:

* the *Bernoulli-scale* theta joins two binary outcomes of one patient;
* the *summary-scale* theta joins the two binomial event counts of an arm,
  which is what the copula model's likelihood needs.

Summing iid patient pairs preserves Pearson correlation but not the Frank
parameter, so the summary-scale theta is fitted to bootstrap replicates of
the arm's count pair (r1*, r2*) with binomial margins.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .copula import binom_cell_bounds, frank_cdf, oriented_theta

THETA_BRACKET = 50.0
_GOLDEN = (np.sqrt(5.0) - 1.0) / 2.0


class DegenerateDataError(ValueError):
    pass


@dataclass(frozen=True)
class CohortEvidence:
    cohort_id: str
    n_responders: int
    n_nonresponders: int
    event_free_rate_responders: float
    event_free_rate_nonresponders: float
    arm: str = "both"

    def __post_init__(self):
        if self.n_responders < 1 or self.n_nonresponders < 1:
            raise ValueError(f"{self.cohort_id}: group sizes must be >= 1")
        for r in (self.event_free_rate_responders, self.event_free_rate_nonresponders):
            if not 0.0 <= r <= 1.0:
                raise ValueError(f"{self.cohort_id}: rates must lie in [0, 1]")
        if self.arm not in ("ctrl", "trt", "both"):
            raise ValueError(f"{self.cohort_id}: arm must be ctrl, trt or both")


@dataclass
class ElicitedPrior:
    target: str
    mean: float
    sd: float
    draws: np.ndarray
    scale: str = "summary"
    boundary_hits: int = 0
    degenerate_fraction: float = 0.0
    notes: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "target": self.target,
            "scale": self.scale,
            "mean": self.mean,
            "sd": self.sd,
            "family": "truncated_normal[-1,1]" if self.target == "rho_w" else "normal",
            "boundary_hits": self.boundary_hits,
            "degenerate_fraction": self.degenerate_fraction,
            "notes": self.notes,
            "draws": [float(x) for x in self.draws],
        }


def load_cohorts(path: str | Path) -> list[CohortEvidence]:
    """Read ``cohort_id,n_resp,n_nonresp,rate_resp,rate_nonresp[,arm]``."""
    text = Path(path).read_text(encoding="utf-8")
    lines = [ln for ln in text.splitlines() if ln.strip() and not ln.lstrip().startswith("#")]
    rows = list(csv.DictReader(io.StringIO("\n".join(lines))))
    out = []
    for i, row in enumerate(rows, start=2):
        try:
            out.append(CohortEvidence(
                row["cohort_id"].strip(), int(row["n_resp"]), int(row["n_nonresp"]),
                float(row["rate_resp"]), float(row["rate_nonresp"]),
                (row.get("arm") or "both").strip(),
            ))
        except (KeyError, TypeError, ValueError) as exc:
            raise ValueError(f"cohorts file row {i}: {exc}") from exc
    if not out:
        raise ValueError("cohorts file has no records")
    return out


def cohorts_for(cohorts: Sequence[CohortEvidence], target: str) -> list[CohortEvidence]:
    want = {"theta_ctrl": "ctrl", "theta_trt": "trt"}.get(target)
    if want is None:
        return list(cohorts)
    picked = [c for c in cohorts if c.arm in (want, "both")]
    return picked or list(cohorts)


def pseudo_table(ev: CohortEvidence) -> tuple[np.ndarray, bool]:
    """2x2 counts indexed [response, event_free] and a degeneracy flag."""
    ef_r = round(ev.event_free_rate_responders * ev.n_responders)
    ef_n = round(ev.event_free_rate_nonresponders * ev.n_nonresponders)
    t = np.array([[ev.n_nonresponders - ef_n, ef_n], [ev.n_responders - ef_r, ef_r]], dtype=np.int64)
    return t, bool((t == 0).any())


def build_pseudo_ipd(ev: CohortEvidence, rng: np.random.Generator | None = None):
    """One (response, event_free) record per patient.

    Counts use round-half-even of rate x group size; ``rng`` is accepted for
    interface symmetry and not used. Returns (ipd array of shape (N, 2),
    degenerate flag) where the flag marks an empty cell.
    """
    t, degenerate = pseudo_table(ev)
    rows = []
    for resp in (1, 0):
        for ef in (1, 0):
            rows.append(np.tile([resp, ef], (int(t[resp, ef]), 1)))
    return np.concatenate(rows).astype(np.int8), degenerate


def table_from_pairs(x1, x2) -> np.ndarray:
    x1 = np.asarray(x1, dtype=np.int64)
    x2 = np.asarray(x2, dtype=np.int64)
    return np.bincount(2 * x1 + x2, minlength=4).reshape(2, 2)


def phi_coefficient(tables) -> np.ndarray:
    """Pearson correlation of two bits from 2x2 count tables [..., x1, x2].

    NaN where either margin is constant.
    """
    t = np.asarray(tables, dtype=float)
    n = t.sum(axis=(-2, -1))
    a, b, c, d = t[..., 0, 0], t[..., 0, 1], t[..., 1, 0], t[..., 1, 1]
    den = (a + b) * (c + d) * (a + c) * (b + d)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(den > 0, (a * d - b * c) / np.sqrt(np.where(den > 0, den, 1.0)), np.nan)


def frank_bernoulli_theta(tables, bracket: float = THETA_BRACKET):
    """Frank MLE for 2x2 count tables [..., x1, x2] with Bernoulli margins.

    The three-parameter model (p1, p2, theta) is saturated for a 2x2 table,
    so the MLE puts the margins at their empirical values and solves
    C(1 - p1, 1 - p2; theta) = P(0, 0) for theta. C is increasing in theta,
    which makes bisection exact. Returns (theta, at_boundary, degenerate).
    """
    t = np.asarray(tables, dtype=float)
    n = t.sum(axis=(-2, -1))
    q1 = (t[..., 0, 0] + t[..., 0, 1]) / n
    q2 = (t[..., 0, 0] + t[..., 1, 0]) / n
    p00 = t[..., 0, 0] / n
    degenerate = (q1 <= 0) | (q1 >= 1) | (q2 <= 0) | (q2 >= 1)
    lo = np.full(q1.shape, -bracket)
    hi = np.full(q1.shape, bracket)
    c_lo = frank_cdf(q1, q2, lo)
    c_hi = frank_cdf(q1, q2, hi)
    for _ in range(48):
        mid = 0.5 * (lo + hi)
        up = frank_cdf(q1, q2, mid) < p00
        lo = np.where(up, mid, lo)
        hi = np.where(up, hi, mid)
    theta = 0.5 * (lo + hi)
    at_hi = p00 >= c_hi
    at_lo = p00 <= c_lo
    theta = np.where(at_hi, bracket, np.where(at_lo, -bracket, theta))
    theta = np.where(degenerate, 0.0, theta)
    boundary = (at_hi | at_lo) & ~degenerate
    return theta, boundary, degenerate


def _rect_loglik(theta, U, V, w, sign):
    # U, V: (4, M, K) copula arguments for the four rectangle corners
    C = frank_cdf(U, V, theta[:, None] * sign)
    m = np.maximum(C[0] - C[1] - C[2] + C[3], 1e-300)
    return (w * np.log(m)).sum(axis=-1)


def _collapse_pairs(r1, r2):
    """Unique count pairs per row with multiplicities, padded with zero weight."""
    rows = [np.unique(np.stack([a, b], 1), axis=0, return_counts=True) for a, b in zip(r1, r2)]
    K = max(len(c) for _, c in rows)
    u1 = np.zeros((len(rows), K))
    u2 = np.zeros((len(rows), K))
    w = np.zeros((len(rows), K))
    for i, (pairs, cnt) in enumerate(rows):
        k = len(cnt)
        u1[i, :k], u2[i, :k], w[i, :k] = pairs[:, 0], pairs[:, 1], cnt
        u1[i, k:], u2[i, k:] = pairs[0]
    return u1, u2, w


def frank_binomial_theta(r1, r2, n1, n2, p1=None, p2=None, bracket: float = THETA_BRACKET, iters: int = 48):
    """Summary-scale Frank MLE from replicated count pairs.

    ``r1``, ``r2`` have shape (M, K): K replicate count pairs for each of M
    independent problems (or shape (K,) for one). Margins are Bin(n, p) with p
    defaulting to the mean replicate proportion. Maximised by golden-section
    search on [-bracket, bracket], vectorised over the M problems.
    Returns (theta, at_boundary).
    """
    r1 = np.atleast_2d(np.asarray(r1, dtype=float))
    r2 = np.atleast_2d(np.asarray(r2, dtype=float))
    M = r1.shape[0]
    n1 = np.broadcast_to(np.asarray(n1, dtype=float), (M,))[:, None]
    n2 = np.broadcast_to(np.asarray(n2, dtype=float), (M,))[:, None]
    p1 = (r1.mean(1, keepdims=True) / n1) if p1 is None else np.broadcast_to(np.asarray(p1, float), (M,))[:, None]
    p2 = (r2.mean(1, keepdims=True) / n2) if p2 is None else np.broadcast_to(np.asarray(p2, float), (M,))[:, None]
    p1 = np.clip(p1, 1e-9, 1 - 1e-9)
    p2 = np.clip(p2, 1e-9, 1 - 1e-9)
    u1, u2, w = _collapse_pairs(r1, r2)
    (F1h, F1l), up1 = binom_cell_bounds(u1, n1, p1)
    (F2h, F2l), up2 = binom_cell_bounds(u2, n2, p2)
    sign = oriented_theta(1.0, up1, up2)
    U = np.stack([F1h, F1l, F1h, F1l])
    V = np.stack([F2h, F2h, F2l, F2l])
    f = lambda th: _rect_loglik(th, U, V, w, sign)
    a = np.full(M, -bracket)
    b = np.full(M, bracket)
    c = b - _GOLDEN * (b - a)
    d = a + _GOLDEN * (b - a)
    fc, fd = f(c), f(d)
    for _ in range(iters):
        left = fc >= fd
        b = np.where(left, d, b)
        a = np.where(left, a, c)
        nc = np.where(left, b - _GOLDEN * (b - a), d)
        nd = np.where(left, c, a + _GOLDEN * (b - a))
        fnew = f(np.where(left, nc, nd))
        fd, fc = np.where(left, fc, fnew), np.where(left, fnew, fd)
        c, d = nc, nd
    theta = 0.5 * (a + b)
    boundary = np.abs(theta) > bracket * (1 - 1e-6) - 1e-6
    return theta, boundary


def _nanmean_rows(x):
    ok = np.isfinite(x)
    cnt = ok.sum(axis=1)
    tot = np.where(ok, x, 0.0).sum(axis=1)
    return np.where(cnt > 0, tot / np.maximum(cnt, 1), np.nan)


def _inner_stat(inner_tables, n, target, scale):
    """Association per outer draw from its (B_outer, B_inner, 2, 2) inner tables."""
    if target == "rho_w":
        phi = phi_coefficient(inner_tables)
        bad = np.isnan(phi)
        val = _nanmean_rows(np.where(bad, np.nan, phi))
        return val, bad, np.zeros(val.shape, bool)
    if scale == "bernoulli":
        th, bnd, deg = frank_bernoulli_theta(inner_tables)
        val = _nanmean_rows(np.where(deg, np.nan, th))
        return val, deg, bnd.any(axis=1)
    # summary scale: each inner resample contributes one (r1*, r2*) count pair
    r1 = inner_tables[..., 1, :].sum(-1)
    r2 = inner_tables[..., :, 1].sum(-1)
    deg = (r1 == 0) | (r1 == n) | (r2 == 0) | (r2 == n)
    th, bnd = frank_binomial_theta(r1, r2, n, n)
    return th, deg, bnd


def double_bootstrap(tables, B_outer: int, B_inner: int, target: str, rng: np.random.Generator,
                     scale: str = "summary") -> ElicitedPrior:
    """Elicit a prior for ``target`` from one or more pseudo-IPD 2x2 tables.

    Per cohort the outer loop resamples patients with replacement; for each
    outer sample the inner loop resamples it again, and the inner
    replicates are reduced to one association value (inner-mean phi for
    ``rho_w``; the summary-scale Frank MLE over the inner count pairs, or
    the inner-mean Bernoulli-scale MLE, for theta). Draws from several
    cohorts are stacked.
    """
    if target not in ("rho_w", "theta_ctrl", "theta_trt"):
        raise ValueError(f"unknown target {target!r}")
    if scale not in ("summary", "bernoulli"):
        raise ValueError("scale must be 'summary' or 'bernoulli'")
    if B_outer < 1 or B_inner < 1:
        raise ValueError("bootstrap sizes must be positive")
    if target != "rho_w" and scale == "summary" and B_inner < 2:
        raise ValueError("the summary-scale theta needs at least 2 inner replicates")
    tables = [np.asarray(t, dtype=np.int64) for t in (tables if isinstance(tables, (list, tuple)) else [tables])]
    draws, deg_frac, boundary = [], [], 0
    for t in tables:
        n = int(t.sum())
        p = (t / n).reshape(4)
        outer = rng.multinomial(n, p, size=B_outer)
        inner = rng.multinomial(n, outer / n, size=(B_inner, B_outer)).transpose(1, 0, 2)
        inner = inner.reshape(B_outer, B_inner, 2, 2)
        val, bad, bnd = _inner_stat(inner, n, target, scale)
        deg_frac.append(float(np.mean(bad)))
        boundary += int(np.sum(bnd))
        draws.append(val[np.isfinite(val)])
    frac = float(np.mean(deg_frac))
    if frac > 0.5:
        raise DegenerateDataError(
            f"{frac:.0%} of inner bootstrap tables are degenerate; larger cohorts are needed"
        )
    d = np.concatenate(draws)
    if target == "rho_w":
        d = np.clip(d, -1.0, 1.0)
    notes = []
    if target == "rho_w":
        notes.append("patient-level phi coefficient used as a proxy for the log-OR correlation")
    sd = float(d.std(ddof=1)) if d.size > 1 else 0.0
    return ElicitedPrior(target, float(d.mean()), sd, d, scale if target != "rho_w" else "phi",
                         boundary, frac, notes)


def elicit(cohorts: Sequence[CohortEvidence], target: str, B_outer: int, B_inner: int,
           rng: np.random.Generator, scale: str = "summary") -> ElicitedPrior:
    picked = cohorts_for(cohorts, target)
    tabs = []
    notes = []
    for ev in picked:
        t, degenerate = pseudo_table(ev)
        if degenerate:
            notes.append(f"{ev.cohort_id}: pseudo-IPD table has an empty cell")
        tabs.append(t)
    prior = double_bootstrap(tabs, B_outer, B_inner, target, rng, scale)
    prior.notes = notes + prior.notes + [f"cohorts: {', '.join(c.cohort_id for c in picked)}"]
    return prior


# -- IPD-based estimation (simulation studies) ----------------------------------

@dataclass
class WithinAssociation:
    rho_w: float
    theta_ctrl: float
    theta_trt: float
    theta_ctrl_bernoulli: float
    theta_trt_bernoulli: float
    flags: list[str] = field(default_factory=list)


def _log_or_vec(r_t, n_t, r_c, n_c):
    cells = np.stack([r_t, n_t - r_t, r_c, n_c - r_c]).astype(float)
    cells = cells + 0.5 * (cells.min(axis=0) <= 0)
    return np.log(cells[0] / cells[1]) - np.log(cells[2] / cells[3])


def estimate_within_associations(ipd_ctrl: np.ndarray, ipd_trt: np.ndarray, B: int,
                                 rng: np.random.Generator) -> WithinAssociation:
    """Bootstrap rho_w and per-arm Frank parameters from one study's IPD.

    ``ipd_*`` are (N, 2) bit arrays (outcome 1, outcome 2). Patients are
    resampled with replacement within each arm (as multinomial draws on
    the arm's 2x2 table). rho_w is the Pearson correlation of the B
    continuity-corrected log-OR pairs; the summary-scale theta is the
    Frank-binomial MLE over the B count pairs; the Bernoulli-scale theta is
    the mean of per-resample 2x2 MLEs.
    """
    flags: list[str] = []
    res = {}
    counts = {}
    for arm, ipd in (("ctrl", ipd_ctrl), ("trt", ipd_trt)):
        t = table_from_pairs(ipd[:, 0], ipd[:, 1])
        n = int(t.sum())
        boot = rng.multinomial(n, (t / n).reshape(4), size=B).reshape(B, 2, 2)
        r1 = boot[:, 1, :].sum(-1)
        r2 = boot[:, :, 1].sum(-1)
        counts[arm] = (r1, r2, n)
        q1 = t[1].sum() / n
        q2 = t[:, 1].sum() / n
        if q1 in (0.0, 1.0) or q2 in (0.0, 1.0):
            flags.append(f"{arm}: degenerate arm (an outcome is constant)")
            res[arm] = (0.0, 0.0)
            continue
        th_b, bnd_b, deg_b = frank_bernoulli_theta(boot)
        ok = ~deg_b
        theta_bern = float(th_b[ok].mean()) if ok.any() else 0.0
        if bnd_b.any():
            flags.append(f"{arm}: Bernoulli-scale theta hit the bracket in {int(bnd_b.sum())} resamples")
        th_s, bnd_s = frank_binomial_theta(r1, r2, n, n, q1, q2)
        if bnd_s[0]:
            flags.append(f"{arm}: summary-scale theta at the bracket")
        res[arm] = (float(th_s[0]), theta_bern)

    r1c, r2c, nc = counts["ctrl"]
    r1t, r2t, nt = counts["trt"]
    y1 = _log_or_vec(r1t, nt, r1c, nc)
    y2 = _log_or_vec(r2t, nt, r2c, nc)
    if np.ptp(y1) == 0 or np.ptp(y2) == 0:
        flags.append("rho_w: constant bootstrap log OR")
        rho_w = 0.0
    else:
        rho_w = float(np.corrcoef(y1, y2)[0, 1])
    return WithinAssociation(rho_w, res["ctrl"][0], res["trt"][0], res["ctrl"][1], res["trt"][1], flags)
