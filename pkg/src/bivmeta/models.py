"""Log-posteriors of the three bivariate random-effects models.

Parameters live on an unconstrained scale split into a *global* block
``g = [z, t1, t2, d1, d2 (, theta_ctrl, theta_trt)]`` and per-study *local*
blocks ``L[i] = [delta1, delta2 (, mu1, mu2)]``, with

    rho_b = tanh(z),    tau_j = tau_upper * expit(t_j).

Every density method broadcasts over leading batch dimensions, so a stack
of chains can be evaluated in one call. The flat ParamVector layout is
``[z, t1, t2, d1, d2, (delta1_i, delta2_i)_i, (mu1_i, mu2_i)_i, theta_ctrl, theta_trt]``
with the bracketed groups present only where the model uses them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import special

from .copula import LOG_FLOOR, binom_tail, frank_cdf, oriented_theta
from .core_types import ArmDependence, BetweenStudyState, LogOrSummary, StudyRecord, to_log_or

LOG_2PI = math.log(2 * math.pi)
TAU_FLOOR = 1e-6
KINDS = ("BRMA", "BRMA_IB", "BRMA_BC")


@dataclass(frozen=True)
class PriorSpec:
    d_sd: float = 10.0
    mu_sd: float = 10.0
    tau_upper: float = 2.0
    z_sd: float = 1.0

    def __post_init__(self):
        for name in ("d_sd", "mu_sd", "tau_upper", "z_sd"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")


def _norm_logpdf(x, mean, sd):
    return -0.5 * LOG_2PI - np.log(sd) - 0.5 * ((x - mean) / sd) ** 2


def _log1m_tanh2(z):
    # log(1 - tanh(z)^2) = -2 log cosh z, stable for large |z|
    az = np.abs(z)
    return -2.0 * (az + np.log1p(np.exp(-2.0 * az)) - math.log(2.0))


def bvn_logpdf(x1, x2, m1, m2, s1, s2, rho, log1m_rho2=None):
    """Bivariate normal log-density from the explicit 2x2 inverse."""
    if log1m_rho2 is None:
        log1m_rho2 = np.log1p(-rho * rho)
    e1 = (x1 - m1) / s1
    e2 = (x2 - m2) / s2
    q = (e1 * e1 - 2.0 * rho * e1 * e2 + e2 * e2) / np.exp(log1m_rho2)
    return -LOG_2PI - np.log(s1) - np.log(s2) - 0.5 * log1m_rho2 - 0.5 * q


def _log_expit(x):
    return -np.logaddexp(0.0, -x)


def binom_logpmf(r, n, eta):
    """Binomial log-pmf with logit-scale success probability ``eta``."""
    logc = special.gammaln(n + 1) - special.gammaln(r + 1) - special.gammaln(n - r + 1)
    return logc + r * _log_expit(eta) + (n - r) * _log_expit(-eta)


class _Model:
    kind = ""
    local_dim = 2
    n_base_global = 5

    def __init__(self, n_studies: int, priors: PriorSpec | None, sample_theta: bool = False):
        self.priors = priors or PriorSpec()
        self.n = n_studies
        self.sample_theta = sample_theta
        self.n_global = self.n_base_global + (2 if sample_theta else 0)

    # -- layout ---------------------------------------------------------------
    @property
    def dim(self) -> int:
        return self.n_global + self.n * self.local_dim

    @property
    def global_names(self) -> list[str]:
        names = ["rho_b", "tau1", "tau2", "d1", "d2"]
        if self.sample_theta:
            names += ["theta_ctrl", "theta_trt"]
        return names

    @property
    def local_names(self) -> list[str]:
        names = [f"delta1[{i}]" for i in range(self.n)] + [f"delta2[{i}]" for i in range(self.n)]
        if self.local_dim == 4:
            names += [f"mu1[{i}]" for i in range(self.n)] + [f"mu2[{i}]" for i in range(self.n)]
        return names

    @property
    def param_names(self) -> list[str]:
        return self.global_names + self.local_names

    def split(self, x):
        """Flat vector -> (globals, per-study locals of shape (n, local_dim)).

        The flat order follows ``param_names``: base globals, then each
        local coordinate as a block over studies, then sampled thetas.
        """
        x = np.asarray(x, dtype=float)
        nb, n, k = self.n_base_global, self.n, self.local_dim
        g = x[..., :nb]
        L = np.swapaxes(x[..., nb:nb + k * n].reshape(x.shape[:-1] + (k, n)), -1, -2)
        if self.sample_theta:
            g = np.concatenate([g, x[..., nb + k * n:nb + k * n + 2]], axis=-1)
        return g, L

    def join(self, g, L):
        g = np.asarray(g, dtype=float)
        L = np.asarray(L, dtype=float)
        lead = g.shape[:-1]
        parts = [g[..., : self.n_base_global], np.swapaxes(L, -1, -2).reshape(lead + (self.local_dim * self.n,))]
        if self.sample_theta:
            parts.append(g[..., self.n_base_global:])
        return np.concatenate(parts, axis=-1)

    # -- transforms -------------------------------------------------------------
    def taus(self, g):
        return self.priors.tau_upper * special.expit(g[..., 1]), self.priors.tau_upper * special.expit(g[..., 2])

    def constrain(self, x) -> BetweenStudyState:
        g, L = self.split(x)
        t1, t2 = self.taus(g)
        kw = {}
        if self.local_dim == 4:
            kw = dict(mu1=L[:, 2].copy(), mu2=L[:, 3].copy())
        if self.sample_theta:
            kw.update(theta_ctrl=float(g[5]), theta_trt=float(g[6]))
        return BetweenStudyState(
            d1=float(g[3]), d2=float(g[4]), tau1=float(t1), tau2=float(t2), z=float(g[0]),
            delta1=L[:, 0].copy(), delta2=L[:, 1].copy(), **kw,
        )

    def unconstrain(self, s: BetweenStudyState) -> np.ndarray:
        up = self.priors.tau_upper
        t = [math.log(tau / (up - tau)) for tau in (s.tau1, s.tau2)]
        g = [s.z, t[0], t[1], s.d1, s.d2]
        if self.sample_theta:
            g += [s.theta_ctrl, s.theta_trt]
        cols = [s.delta1, s.delta2]
        if self.local_dim == 4:
            cols += [s.mu1, s.mu2]
        L = np.stack(cols, axis=-1) if self.n else np.zeros((0, self.local_dim))
        return self.join(np.array(g), L)

    def constrained_draws(self, G, L) -> np.ndarray:
        """Map stacked unconstrained draws (T, n_global), (T, n, k) to report columns."""
        t1, t2 = self.taus(G)
        cols = [np.tanh(G[:, 0]), t1, t2, G[:, 3], G[:, 4]]
        if self.sample_theta:
            cols += [G[:, 5], G[:, 6]]
        out = [np.stack(cols, axis=1)]
        T = G.shape[0]
        if self.n:
            out += [L[:, :, k].reshape(T, self.n) for k in range(self.local_dim)]
        return np.concatenate(out, axis=1)

    # -- densities ---------------------------------------------------------------
    def global_logprior(self, g):
        pr = self.priors
        lp = _norm_logpdf(g[..., 0], 0.0, pr.z_sd)
        lp = lp + _norm_logpdf(g[..., 3], 0.0, pr.d_sd) + _norm_logpdf(g[..., 4], 0.0, pr.d_sd)
        # tau ~ U(0, upper) on tau = upper * expit(t): density 1/upper times Jacobian
        # upper * expit(t) * expit(-t), so the constants cancel
        for j in (1, 2):
            lp = lp + _log_expit(g[..., j]) + _log_expit(-g[..., j])
        return lp

    def between_logdens(self, g, L):
        t1, t2 = self.taus(g)
        s1 = np.maximum(t1, TAU_FLOOR)[..., None]
        s2 = np.maximum(t2, TAU_FLOOR)[..., None]
        z = g[..., 0][..., None]
        return bvn_logpdf(
            L[..., 0], L[..., 1], g[..., 3][..., None], g[..., 4][..., None],
            s1, s2, np.tanh(z), _log1m_tanh2(z),
        )

    # Non-centred view of the study effects: delta = d + A(g) eta with A the
    # Cholesky factor of the between-studies covariance. The sampler uses it
    # for a global move that carries the deltas along with (d, tau, rho_b).
    def _chol_parts(self, g):
        s1 = np.maximum(self.taus(g)[0], TAU_FLOOR)[..., None]
        s2 = np.maximum(self.taus(g)[1], TAU_FLOOR)[..., None]
        z = g[..., 0][..., None]
        l1m = _log1m_tanh2(z)
        return s1, s2, np.tanh(z), np.exp(0.5 * l1m), l1m

    def decenter(self, g, L):
        s1, s2, r, c, _ = self._chol_parts(g)
        e1 = (L[..., 0] - g[..., 3][..., None]) / s1
        e2 = ((L[..., 1] - g[..., 4][..., None]) / s2 - r * e1) / c
        out = L.copy()
        out[..., 0], out[..., 1] = e1, e2
        return out

    def recenter(self, g, E):
        s1, s2, r, c, _ = self._chol_parts(g)
        out = E.copy()
        out[..., 0] = g[..., 3][..., None] + s1 * E[..., 0]
        out[..., 1] = g[..., 4][..., None] + s2 * (r * E[..., 0] + c * E[..., 1])
        return out

    def nc_logdet(self, g):
        """n * log|det A(g)|, the Jacobian of eta -> delta over all studies."""
        s1, s2, _, _, l1m = self._chol_parts(g)
        return self.n * (np.log(s1) + np.log(s2) + 0.5 * l1m)[..., 0]

    def within_logdens(self, g, L, hits=None):
        raise NotImplementedError

    def local_logdens(self, g, L, hits=None):
        """Per-study log-density terms, shape batch + (n,)."""
        return self.within_logdens(g, L, hits) + self.between_logdens(g, L)

    def logpost_blocks(self, g, L):
        return self.global_logprior(g) + self.local_logdens(g, L).sum(axis=-1)

    def logpost(self, x) -> float:
        g, L = self.split(x)
        return float(self.logpost_blocks(g, L))

    def __call__(self, x) -> float:
        return self.logpost(x)

    # -- initialisation -------------------------------------------------------------
    def empirical_locals(self) -> np.ndarray:
        raise NotImplementedError

    def init_point(self, rng: np.random.Generator, source: dict | None = None):
        """Overdispersed start; ``source`` maps report names to point estimates."""
        up = self.priors.tau_upper
        if source:
            def pick(name, default):
                return float(source.get(name, default))
            rho = np.clip(pick("rho_b", 0.0) + rng.normal(0, 0.05), -0.95, 0.95)
            taus = [np.clip(pick(f"tau{j}", 0.3) * math.exp(rng.normal(0, 0.1)), 0.02, up * 0.95) for j in (1, 2)]
            d = [pick("d1", 0.0) + rng.normal(0, 0.02), pick("d2", 0.0) + rng.normal(0, 0.02)]
            L = np.zeros((self.n, self.local_dim))
            emp = self.empirical_locals()
            for k, base in enumerate(("delta1", "delta2", "mu1", "mu2")[: self.local_dim]):
                for i in range(self.n):
                    L[i, k] = pick(f"{base}[{i}]", emp[i, k]) + rng.normal(0, 0.02)
        else:
            rho = rng.uniform(-0.7, 0.7)
            taus = [rng.uniform(0.1, 0.8) for _ in range(2)]
            emp = self.empirical_locals()
            d = list(emp[:, :2].mean(axis=0) + rng.normal(0, 0.2, 2)) if self.n else list(rng.normal(0, 0.5, 2))
            L = emp + rng.normal(0, 0.1, emp.shape)
        g = [math.atanh(rho)] + [math.log(t / (up - t)) for t in taus] + d
        if self.sample_theta:
            g += list(self.theta_init(rng))
        return np.array(g, dtype=float), L

    def theta_init(self, rng):
        return np.zeros(2)


class BRMA(_Model):
    """Normal approximation on the log OR scale with known within-study covariance."""

    kind = "BRMA"
    local_dim = 2

    def __init__(self, data: Sequence[LogOrSummary], priors: PriorSpec | None = None):
        super().__init__(len(data), priors)
        self.data = list(data)
        self.y1 = np.array([d.y1 for d in data], dtype=float)
        self.y2 = np.array([d.y2 for d in data], dtype=float)
        self.s1 = np.sqrt([d.var1 for d in data]) if data else np.zeros(0)
        self.s2 = np.sqrt([d.var2 for d in data]) if data else np.zeros(0)
        self.rw = np.array([d.rho_w for d in data], dtype=float)
        if np.any(np.abs(self.rw) >= 1.0):
            raise ValueError("within-study covariance is singular (|rho_w| = 1)")
        self.log1m_rw2 = np.log1p(-self.rw**2)

    @classmethod
    def from_records(cls, records: Sequence[StudyRecord], rho_w, priors: PriorSpec | None = None):
        rho = np.broadcast_to(np.asarray(rho_w, dtype=float), (len(records),))
        return cls([to_log_or(r, float(w)) for r, w in zip(records, rho)], priors)

    def within_logdens(self, g, L, hits=None):
        return bvn_logpdf(self.y1, self.y2, L[..., 0], L[..., 1], self.s1, self.s2, self.rw, self.log1m_rw2)

    def empirical_locals(self):
        return np.stack([self.y1, self.y2], axis=-1) if self.n else np.zeros((0, 2))


class _BinomialModel(_Model):
    local_dim = 4

    def __init__(self, data: Sequence[StudyRecord], priors: PriorSpec | None = None, sample_theta=False):
        super().__init__(len(data), priors, sample_theta)
        self.data = list(data)
        a = lambda name: np.array([getattr(r, name) for r in data], dtype=float)
        self.r1A, self.r2A, self.r1B, self.r2B = a("r1_ctrl"), a("r2_ctrl"), a("r1_trt"), a("r2_trt")
        self.n1A, self.n2A, self.n1B, self.n2B = a("n_ctrl"), a("n2_ctrl"), a("n_trt"), a("n2_trt")
        # (2, n) stacks with the arm axis first: row 0 control, row 1 treatment
        self.arm_counts = tuple(np.stack(pair) for pair in (
            (self.r1A, self.r1B), (self.r2A, self.r2B), (self.n1A, self.n1B), (self.n2A, self.n2B)))

    def mu_logprior(self, L):
        sd = self.priors.mu_sd
        return _norm_logpdf(L[..., 2], 0.0, sd) + _norm_logpdf(L[..., 3], 0.0, sd)

    def local_logdens(self, g, L, hits=None):
        return super().local_logdens(g, L, hits) + self.mu_logprior(L)

    def empirical_locals(self):
        if not self.n:
            return np.zeros((0, 4))
        lg = lambda r, n: np.log((r + 0.5) / (n - r + 0.5))
        mu1, mu2 = lg(self.r1A, self.n1A), lg(self.r2A, self.n2A)
        d1 = lg(self.r1B, self.n1B) - mu1
        d2 = lg(self.r2B, self.n2B) - mu2
        return np.stack([d1, d2, mu1, mu2], axis=-1)


class BRMAIB(_BinomialModel):
    """Independent binomial likelihoods per arm and outcome, logit link."""

    kind = "BRMA_IB"

    def within_logdens(self, g, L, hits=None):
        d1, d2, mu1, mu2 = L[..., 0], L[..., 1], L[..., 2], L[..., 3]
        return (
            binom_logpmf(self.r1A, self.n1A, mu1)
            + binom_logpmf(self.r2A, self.n2A, mu2)
            + binom_logpmf(self.r1B, self.n1B, mu1 + d1)
            + binom_logpmf(self.r2B, self.n2B, mu2 + d2)
        )


class BRMABC(_BinomialModel):
    """Per-arm Frank copula joining the two binomial outcome counts."""

    kind = "BRMA_BC"

    def __init__(self, data: Sequence[StudyRecord], dependence: ArmDependence | Sequence[ArmDependence],
                 priors: PriorSpec | None = None):
        if isinstance(dependence, ArmDependence):
            dependence = [dependence] * len(data)
        dependence = list(dependence)
        if len(dependence) != len(data):
            raise ValueError("need one ArmDependence per study")
        sampled = {d.source == "informative_prior" for d in dependence}
        if len(sampled) > 1:
            raise ValueError("mixing fixed and sampled dependence is not supported")
        sample_theta = sampled == {True}
        super().__init__(data, priors, sample_theta)
        self.dependence = dependence
        if sample_theta:
            first = dependence[0]
            if any(d.prior_ctrl != first.prior_ctrl or d.prior_trt != first.prior_trt for d in dependence):
                raise ValueError("a sampled theta pair is shared across studies; priors must agree")
            self.theta_prior = (first.prior_ctrl, first.prior_trt)
            self.theta_start = (first.theta_ctrl, first.theta_trt)
        else:
            self.thA = np.array([d.theta_ctrl for d in dependence], dtype=float)
            self.thB = np.array([d.theta_trt for d in dependence], dtype=float)
        self.floor_hits = 0

    def global_logprior(self, g):
        lp = super().global_logprior(g)
        if self.sample_theta:
            (ma, sa), (mb, sb) = self.theta_prior
            lp = lp + _norm_logpdf(g[..., 5], ma, sa) + _norm_logpdf(g[..., 6], mb, sb)
        return lp

    def theta_init(self, rng):
        (ma, sa), (mb, sb) = self.theta_prior
        return np.array([ma + 0.3 * sa * rng.standard_normal(), mb + 0.3 * sb * rng.standard_normal()])

    def within_logdens(self, g, L, hits=None):
        d1, d2, mu1, mu2 = L[..., 0], L[..., 1], L[..., 2], L[..., 3]
        if self.sample_theta:
            theta = np.stack([g[..., 5], g[..., 6]], -1)[..., None]
        else:
            theta = np.stack([self.thA, self.thB])
        r1, r2, n1, n2 = self.arm_counts
        p1 = special.expit(np.stack([mu1, mu1 + d1], -2))
        p2 = special.expit(np.stack([mu2, mu2 + d2], -2))
        F1, up1 = _cell_bounds(r1, n1, p1)
        F2, up2 = _cell_bounds(r2, n2, p2)
        theta = oriented_theta(theta, up1, up2)
        C = frank_cdf(np.stack([F1[0], F1[1], F1[0], F1[1]]), np.stack([F2[0], F2[0], F2[1], F2[1]]), theta)
        m = C[0] - C[1] - C[2] + C[3]
        low = m < 1e-300
        n_low = low.sum(axis=(-2, -1))
        if hits is not None:
            hits += n_low
        self.floor_hits += int(n_low.sum())
        return np.where(low, LOG_FLOOR, np.log(np.where(low, 1.0, m))).sum(axis=-2)


def _cell_bounds(r, n, p):
    # one incomplete-beta call covers both copula bounds of the observed cell;
    # counts above the mean use survival probabilities (see copula.binom_cell_bounds)
    upper = r > n * p
    k = np.stack([np.where(upper, r - 1, r), np.where(upper, r, r - 1)])
    return binom_tail(k, n, p[None], upper[None]), upper


def build_model(kind: str, records: Sequence[StudyRecord], priors: PriorSpec | None = None, *,
                rho_w=None, dependence=None) -> _Model:
    kind = kind.upper().replace("-", "_")
    if kind == "BRMA":
        if rho_w is None:
            raise ValueError("BRMA requires a within-study correlation rho_w")
        return BRMA.from_records(records, rho_w, priors)
    if kind == "BRMA_IB":
        return BRMAIB(records, priors)
    if kind == "BRMA_BC":
        if dependence is None:
            raise ValueError("BRMA-BC requires theta values or a theta prior")
        return BRMABC(records, dependence, priors)
    raise ValueError(f"unknown model {kind!r}; choose from {KINDS}")


def brma_logpost(params, data: Sequence[LogOrSummary], priors: PriorSpec | None = None) -> float:
    return BRMA(data, priors).logpost(params)


def brma_ib_logpost(params, data: Sequence[StudyRecord], priors: PriorSpec | None = None) -> float:
    return BRMAIB(data, priors).logpost(params)


def brma_bc_logpost(params, data: Sequence[StudyRecord], dependence, priors: PriorSpec | None = None) -> float:
    return BRMABC(data, dependence, priors).logpost(params)
