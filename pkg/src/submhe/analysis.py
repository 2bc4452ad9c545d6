"""Robust stability constants of the suboptimal estimators.

Everything here is closed-form: the per-horizon gains of each estimator
variant, their aggregation into ``C1..C3``, ``C_eps``, the minimal
re-initialization horizon ``T_min`` and the decay rate ``lambda``, and an
evaluation of the resulting error bound on simulated runs.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from typing import List, Optional

import numpy as np

from .errors import ConfigurationError

VARIANTS = ("nominal", "observer")
COSTS = ("quadratic", "discounted")


@dataclass(frozen=True)
class TheoryParams:
    """Detectability, observer, system and cost constants entering the gains."""

    c_p: float
    c_u: float
    c_w: float
    c_v: float
    c_y: float
    eta: float
    C_p: float
    C_w: float
    C_v: float
    rho: float
    F: float
    H: float
    kappa: Optional[float] = None
    a: float = 2.0
    cbar_w: Optional[float] = None
    cbar_y: Optional[float] = None
    eta_bar: Optional[float] = None

    def __post_init__(self):
        if not 0.0 < self.rho < 1.0:
            raise ConfigurationError("rho must lie in (0, 1)")
        if not 0.0 < self.eta <= self.rho:
            raise ConfigurationError("need 0 < eta <= rho")
        if self.F < 1.0:
            raise ConfigurationError("F must be >= 1")
        if self.H <= 0:
            raise ConfigurationError("H must be positive")
        if self.a < 1:
            raise ConfigurationError("a must be >= 1")
        if self.cbar_w is None:
            object.__setattr__(self, "cbar_w", self.c_w)
        if self.cbar_y is None:
            object.__setattr__(self, "cbar_y", self.c_y)
        if self.eta_bar is not None and not self.eta <= self.eta_bar < 1.0:
            raise ConfigurationError("need eta <= eta_bar < 1")

    @property
    def alpha(self) -> float:
        return 1.0 / self.a

    @property
    def C(self) -> float:
        return max(1.0, self.C_w**-2, self.C_v**-2)

    @property
    def c(self) -> float:
        return max(1.0, 1.0 / self.C_v)

    def for_cost(self, cost: str) -> "TheoryParams":
        """Same constants with the exponent (and discount) of the given cost."""
        if cost == "quadratic":
            return replace(self, a=2.0, eta_bar=None)
        if cost == "discounted":
            return replace(self, a=1.0, eta_bar=self.eta_bar if self.eta_bar is not None else self.eta)
        raise ConfigurationError(f"unknown cost {cost!r}")


def _geom(q: float, n: int) -> float:
    """``(1 - q**n) / (1/q - 1)`` = ``sum_{i=1}^{n} q**i``, with the q = 1 limit ``n``."""
    if q == 1.0:
        return float(n)
    return (1.0 - q**n) / (1.0 / q - 1.0)


def sigma_N(p: TheoryParams, n: int) -> float:
    if n < 0:
        raise ConfigurationError("horizon must be >= 0")
    return p.H * p.C * (p.F / p.rho) ** n


def sigma_bar(p: TheoryParams, n: int, variant: str, cost: str) -> float:
    """Bound factor of the suboptimal cost for the given candidate and cost."""
    if n == 0:
        return 0.0
    a = p.a
    if variant == "nominal":
        s = sigma_N(p, n)
        if cost == "quadratic":
            # sum_{i=1}^{n} F^{-a i}
            return p.cbar_y * s**a * _geom(p.F ** (-a), n)
        eb = _eta_bar(p)
        return p.cbar_y * s * _geom(eb / p.F, n)
    if variant == "observer":
        if p.kappa is None:
            raise ConfigurationError("observer variants need kappa")
        if cost == "quadratic":
            return (p.cbar_w * p.kappa**a + p.cbar_y) * (p.H * p.c) ** a * _rho_series(p.rho, a, n)
        eb = _eta_bar(p)
        return (p.cbar_w * p.kappa + p.cbar_y) * p.H * p.c * _geom(eb / p.rho, n)
    raise ConfigurationError(f"unknown variant {variant!r}")


def _rho_series(rho: float, a: float, n: int) -> float:
    """``(1 - rho^{-a n}) / (rho^a - 1)`` = ``sum_{i=1}^{n} rho^{-a i}``."""
    return (1.0 - rho ** (-a * n)) / (rho**a - 1.0)


def _eta_bar(p: TheoryParams) -> float:
    return p.eta_bar if p.eta_bar is not None else p.eta


def c_script_N(p: TheoryParams, n: int) -> float:
    if p.eta >= 1.0:
        raise ConfigurationError("eta must be < 1")
    base = p.c_p * p.eta**n + (p.eta - p.eta ** (n + 1)) / (1.0 - p.eta) * (p.c_w + p.c_v + p.c_y)
    return base ** (p.a - 1.0)


def gains_per_N(p: TheoryParams, n: int, variant: str, cost: str, project: bool = True):
    """``(C_{N,1}, C_{N,2}, C_{N,3}, C_eps*)`` for one horizon length.

    ``C_eps*`` is ``None`` for the unprojected variants.
    """
    if cost not in COSTS:
        raise ConfigurationError(f"unknown cost {cost!r}")
    eta, rho = p.eta, p.rho
    lead = p.c_p * (eta / rho) ** n
    quad = cost == "quadratic"
    cN = c_script_N(p, n) if quad else 1.0
    alpha = p.alpha if quad else 1.0
    C_eps = None
    if variant == "observer" and project:
        sb = _proj_observer_sigma_bar(p, n) if quad else sigma_bar(p, n, "observer", cost)
        if quad:
            s1, s2 = _sigma_12(p)
            wrap = (2.0 * cN * s1 * sb) ** alpha
            C_eps = lead + (2.0 * cN * s2) ** alpha * rho ** (-n)
        else:
            wrap = sb
            eb = _eta_bar(p)
            idx = {1, n} if n >= 1 else {1}
            C_eps = (p.c_p * eta**n + p.cbar_w * p.F + p.cbar_y * p.H) * max((eb / rho) ** i for i in idx)
    else:
        sb = sigma_bar(p, n, variant, cost)
        wrap = (cN * sb) ** alpha if quad else sb
        if project:
            C_eps = lead + wrap / p.C
    X = lead + wrap
    C1 = X * p.C_p
    C2 = X * p.C_w + p.c_w * eta / rho
    C3 = X * p.C_v + p.c_v * eta / rho
    return C1, C2, C3, C_eps


def _proj_observer_sigma_bar(p: TheoryParams, n: int) -> float:
    if n == 0:
        return 0.0
    return (p.H * p.c) ** p.a * _rho_series(p.rho, p.a, n)


def _sigma_12(p: TheoryParams):
    if p.kappa is None:
        raise ConfigurationError("observer variants need kappa")
    a, F, H, k = p.a, p.F, p.H, p.kappa
    s1 = p.cbar_w * k * (F + k) ** (a - 1) + p.cbar_y * (H + 1) ** (a - 1)
    s2 = p.cbar_w * F * (F + k) ** (a - 1) + p.cbar_y * H * (H + 1) ** (a - 1)
    return s1, s2


@dataclass
class GainReport:
    variant: str
    cost: str
    project: bool
    N: int
    T: int
    sigma_bar: List[float]
    c_N: List[float]
    C_N1: List[float]
    C_N2: List[float]
    C_N3: List[float]
    C_eps_star: List[Optional[float]]
    C1: float
    C2: float
    C3: float
    C_eps: Optional[float]
    T_min: int
    lam: float
    certified: bool
    inputs: dict = field(default_factory=dict)

    @property
    def tag(self) -> str:
        return f"{self.variant}/{self.cost}/{'projected' if self.project else 'unprojected'}"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lambda"] = d.pop("lam")
        d["C_eps"] = self.C_eps
        d["tag"] = self.tag
        return d


def t_min(C1: float, rho: float, N: int) -> int:
    """Smallest integer strictly above both ``N`` and ``-ln C1 / ln rho``."""
    if not 0.0 < rho < 1.0:
        raise ConfigurationError("rho must lie in (0, 1)")
    if C1 <= 0:
        raise ConfigurationError("C1 must be positive")
    return max(N + 1, math.floor(-math.log(C1) / math.log(rho)) + 1)


def aggregate_gains(params: TheoryParams, N: int, T_requested: Optional[int], variant: str, cost: str,
                    project: bool = True) -> GainReport:
    """Per-horizon gains for ``N_eff = 0..N`` and their aggregates.

    ``T_requested=None`` evaluates the aggregates at ``T = T_min``.
    """
    if N < 1:
        raise ConfigurationError("N must be >= 1")
    if variant not in VARIANTS:
        raise ConfigurationError(f"unknown variant {variant!r}")
    p = params.for_cost(cost)
    rows = [gains_per_N(p, n, variant, cost, project) for n in range(N + 1)]
    sbars = [
        (_proj_observer_sigma_bar(p, n) if (variant == "observer" and project and cost == "quadratic")
         else sigma_bar(p, n, variant, cost))
        for n in range(N + 1)
    ]
    cNs = [c_script_N(p, n) if cost == "quadratic" else 1.0 for n in range(N + 1)]
    C1 = max(r[0] for r in rows)
    Tm = t_min(C1, p.rho, N)
    T = Tm if T_requested is None else int(T_requested)
    if T <= N:
        raise ConfigurationError("T must exceed N")
    scale = C1 ** (-1.0 / T)
    C2 = scale * max(r[1] for r in rows)
    C3 = scale * max(r[2] for r in rows)
    C_eps = scale * max(r[3] for r in rows) if project else None
    lam = C1 ** (1.0 / T) * p.rho
    return GainReport(
        variant=variant,
        cost=cost,
        project=project,
        N=N,
        T=T,
        sigma_bar=sbars,
        c_N=cNs,
        C_N1=[r[0] for r in rows],
        C_N2=[r[1] for r in rows],
        C_N3=[r[2] for r in rows],
        C_eps_star=[r[3] for r in rows],
        C1=C1,
        C2=C2,
        C3=C3,
        C_eps=C_eps,
        T_min=Tm,
        lam=lam,
        certified=T >= Tm and lam < 1.0,
        inputs={"F": p.F, "H": p.H, "kappa": p.kappa, "rho": p.rho, "a": p.a, "eta_bar": p.eta_bar},
    )


def reactor_theory_params(H: Optional[float] = None, F: Optional[float] = None, kappa: Optional[float] = None) -> TheoryParams:
    """Constants of the reactor with the shipped observer.

    Defaults: H from the output map, F from vertex analysis over the
    observer domain, kappa = |K|_2.
    """
    from .model import lipschitz_bounds, reactor_model, reactor_observer_domain
    from .observer import contraction_check, reactor_observer

    sys = reactor_model()
    obs = reactor_observer()
    cert = contraction_check(obs, sys)
    F_v, H_v = lipschitz_bounds(sys, reactor_observer_domain())
    e = cert.eioss
    return TheoryParams(
        c_p=e.c_p, c_u=e.c_u, c_w=e.c_w, c_v=e.c_v, c_y=e.c_y, eta=e.eta,
        C_p=cert.C_p, C_w=cert.C_w, C_v=cert.C_v, rho=obs.rho,
        F=F_v if F is None else F, H=H_v if H is None else H,
        kappa=cert.kappa if kappa is None else kappa,
    )


def gain_table(params: TheoryParams, N: int = 3, T_requested: Optional[int] = None, project: bool = True):
    """Reports for the four (candidate x cost) combinations."""
    return [aggregate_gains(params, N, T_requested, v, c, project) for v in VARIANTS for c in COSTS]


def empirical_rges_check(run, report: GainReport, T: Optional[int] = None) -> np.ndarray:
    """``bound_t - |x_t - xhat_t|`` for every logged step.

    The bound is ``C1|x0 - xhat0| lam^t + sum_{tau=1}^{t} lam^tau (C2|w_{t-tau}|
    + C3|v_{t-tau}| + C_eps|eps_{t-tau|t-j}|)`` with ``j = floor(tau/T) T``;
    the projection term is used only for projected variants.  ``eps`` is read
    from the estimator's log of the call at time ``t - j``; states that call
    did not roll contribute zero.
    """
    T = report.T if T is None else T
    lam = report.lam
    x, xh = np.asarray(run.x), np.asarray(run.x_hat)
    err = np.linalg.norm(x - xh, axis=1)
    wn = np.linalg.norm(np.asarray(run.w), axis=1)
    vn = np.linalg.norm(np.asarray(run.v), axis=1)
    L = err.shape[0]
    e0 = err[0]
    use_eps = report.project and report.C_eps is not None
    eps_log = getattr(run, "eps_log", None) or []
    if use_eps and len(eps_log) < L:
        raise ConfigurationError("projected variants need the estimator's projection-error log")
    margins = np.empty(L)
    for t in range(L):
        taus = np.arange(1, t + 1)
        lp = lam**taus
        dist = float(np.sum(lp * (report.C2 * wn[t - taus] + report.C3 * vn[t - taus])))
        if use_eps and t:
            eps_terms = np.zeros(t)
            for i, tau in enumerate(taus):
                j = (tau // T) * T
                start, arr = eps_log[t - j]
                idx = (t - tau) - start
                if 0 <= idx < arr.shape[0]:
                    eps_terms[i] = arr[idx]
            dist += report.C_eps * float(np.sum(lp * eps_terms))
        bound = report.C1 * e0 * lam**t + dist
        margins[t] = bound - err[t]
    return margins
