"""Output-injection observer, its re-initialization and certificate checks.

The observer is ``z+ = f_n(z, u) + K (h_n(z, u) - y)``.  Its error dynamics
are contracting in the P-norm when ``|A(Theta) + K C|_P <= rho`` for every
mean-value parameter Theta; ``contraction_check`` verifies this on the
vertices of the parameter box.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import CertificateError, ConfigurationError, WindowUnderflowError
from .model import BoxSet, DiscreteSystem, _anchor_point, _dependent_components, reactor_observer_domain

EIG_FLOOR = 1e-12


def _sym_eig(P):
    P = np.asarray(P, dtype=float)
    if P.ndim != 2 or P.shape[0] != P.shape[1]:
        raise CertificateError("P must be a square matrix")
    if not np.allclose(P, P.T, rtol=0, atol=1e-12 * max(1.0, np.abs(P).max())):
        raise CertificateError("P must be symmetric")
    vals, vecs = np.linalg.eigh(0.5 * (P + P.T))
    if vals.min() <= 0:
        raise CertificateError(f"P is not positive definite (smallest eigenvalue {vals.min():.3e})")
    return np.maximum(vals, EIG_FLOOR), vecs


def sqrtm_spd(P) -> np.ndarray:
    vals, vecs = _sym_eig(P)
    return (vecs * np.sqrt(vals)) @ vecs.T


def inv_sqrtm_spd(P) -> np.ndarray:
    vals, vecs = _sym_eig(P)
    return (vecs / np.sqrt(vals)) @ vecs.T


def spectral_norm(M) -> float:
    """Square root of the largest eigenvalue of the Gram matrix."""
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if M.size == 0:
        return 0.0
    gram = M.T @ M
    return float(np.sqrt(max(np.linalg.eigvalsh(gram).max(), 0.0)))


def pnorm(P, v) -> float:
    """``|v|_P = |P^(1/2) v|``."""
    return float(np.linalg.norm(sqrtm_spd(P) @ np.asarray(v, dtype=float)))


def induced_pnorm(P, M) -> float:
    """Induced P-norm ``|P^(1/2) M P^(-1/2)|_2`` of a square matrix."""
    return spectral_norm(sqrtm_spd(P) @ np.asarray(M, dtype=float) @ inv_sqrtm_spd(P))


@dataclass(frozen=True)
class EiossConstants:
    c_p: float
    c_u: float
    c_w: float
    c_v: float
    c_y: float
    eta: float

    def as_tuple(self):
        return (self.c_p, self.c_u, self.c_w, self.c_v, self.c_y, self.eta)


@dataclass(frozen=True, eq=False)
class OutputInjectionObserver:
    """Luenberger-type observer with linear injection ``L(z, r) = -K r``.

    ``r = y - h_n(z)`` is the output residual, so the update reads
    ``f_n(z) + K (h_n(z) - y)`` with the reactor gain ``K``.
    """

    K: np.ndarray
    P: np.ndarray
    rho: float
    kappa: Optional[float] = None

    def __post_init__(self):
        K = np.asarray(self.K, dtype=float)
        if K.ndim == 1:
            K = K.reshape(-1, 1)
        P = np.asarray(self.P, dtype=float)
        _sym_eig(P)
        if K.shape[0] != P.shape[0]:
            raise ConfigurationError("K and P have incompatible dimensions")
        if not 0.0 < self.rho < 1.0:
            raise ConfigurationError("rho must lie in (0, 1)")
        K.setflags(write=False)
        P.setflags(write=False)
        object.__setattr__(self, "K", K)
        object.__setattr__(self, "P", P)
        if self.kappa is None:
            object.__setattr__(self, "kappa", spectral_norm(K))
        elif self.kappa < 0:
            raise ConfigurationError("kappa must be nonnegative")

    def injection(self, residual) -> np.ndarray:
        """``L(z, r)`` for residual ``r = y - h_n(z)``."""
        return -(self.K @ np.atleast_1d(np.asarray(residual, dtype=float)))


def observer_step(obs: OutputInjectionObserver, sys: DiscreteSystem, z, u, y) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    u = np.zeros(sys.n_u) if u is None else np.asarray(u, dtype=float)
    r = np.atleast_1d(np.asarray(y, dtype=float)) - sys.h_n(z, u)
    return sys.f_n(z, u) + obs.injection(r)


def reinit_and_roll(
    obs: OutputInjectionObserver,
    sys: DiscreteSystem,
    x_hat_past,
    inputs,
    outputs,
    steps: int,
    return_injections: bool = False,
):
    """Restart the observer at ``x_hat_past`` and roll it ``steps`` times.

    ``inputs``/``outputs`` hold the window data aligned to ``t-T .. t-1``.
    Returns the ``(steps+1, n_x)`` state array, plus the ``(steps, n_x)``
    injection terms when requested.
    """
    outputs = np.asarray(outputs, dtype=float).reshape(-1, sys.n_y) if len(outputs) else np.zeros((0, sys.n_y))
    if steps < 0:
        raise ConfigurationError("steps must be nonnegative")
    if steps > outputs.shape[0]:
        raise WindowUnderflowError(f"window holds {outputs.shape[0]} samples, {steps} steps requested")
    z0 = np.asarray(x_hat_past, dtype=float)
    if sys.observer_kernel is not None and sys.n_y == 1:
        zs = np.array(sys.observer_kernel(z0, obs.K[:, 0], outputs[:steps, 0].tolist()))
        if not return_injections:
            return zs
        # the kernel's additive structure gives L_k = z_{k+1} - f_n(z_k)
        inj = np.empty((steps, sys.n_x))
        u0 = np.zeros(sys.n_u)
        for k in range(steps):
            inj[k] = obs.injection(outputs[k] - sys.h_n(zs[k], u0))
        return zs, inj
    zs = np.empty((steps + 1, sys.n_x))
    inj = np.empty((steps, sys.n_x))
    zs[0] = z0
    inputs = np.zeros((steps, sys.n_u)) if sys.n_u == 0 else np.asarray(inputs, dtype=float)
    for k in range(steps):
        u = inputs[k]
        inj[k] = obs.injection(outputs[k] - sys.h_n(zs[k], u))
        zs[k + 1] = sys.f_n(zs[k], u) + inj[k]
    return (zs, inj) if return_injections else zs


@dataclass(frozen=True, eq=False)
class ObserverCertificate:
    valid: bool
    rho: float
    vertex_norms: np.ndarray
    max_vertex_norm: float
    offending_vertex: Optional[tuple] = None
    C_p: Optional[float] = None
    C_w: Optional[float] = None
    C_v: Optional[float] = None
    kappa: Optional[float] = None
    eioss: Optional[EiossConstants] = None
    domain: Optional[dict] = field(default=None)

    def to_dict(self) -> dict:
        return {
            "valid": bool(self.valid),
            "rho": self.rho,
            "max_vertex_norm": self.max_vertex_norm,
            "C_p": self.C_p,
            "C_w": self.C_w,
            "C_v": self.C_v,
            "kappa": self.kappa,
            "eioss": None
            if self.eioss is None
            else dict(zip(("c_p", "c_u", "c_w", "c_v", "c_y", "eta"), self.eioss.as_tuple())),
            "n_vertices": int(len(self.vertex_norms)),
            "offending_vertex": None if self.offending_vertex is None else [list(map(float, v)) for v in self.offending_vertex],
        }


def _row_vertex_matrices(sys: DiscreteSystem, domain: BoxSet, u):
    """Yield (vertex, A) with row i of A evaluated at its own box corner."""
    deps = _dependent_components(sys, domain)
    anchor = _anchor_point(domain)
    corners = []
    for combo in itertools.product(*[(domain.lower[i], domain.upper[i]) for i in deps]):
        p = anchor.copy()
        p[list(deps)] = combo
        corners.append(p)
    row_jacs = [np.asarray(sys.state_jacobian(c, u), dtype=float) for c in corners]
    for choice in itertools.product(range(len(corners)), repeat=sys.n_x):
        A = np.vstack([row_jacs[c][i] for i, c in enumerate(choice)])
        yield tuple(tuple(corners[c][list(deps)]) for c in choice), A


def contraction_check(obs: OutputInjectionObserver, sys: DiscreteSystem, domain: Optional[BoxSet] = None) -> ObserverCertificate:
    """Certify ``|A(Theta) + K C|_P <= rho`` at every row-wise mean-value vertex."""
    if domain is None:
        domain = reactor_observer_domain() if sys.name == "reactor" else sys.state_set
    if not sys.jacobian_affine:
        raise CertificateError("vertex certificate requires a Jacobian affine in its parameters")
    u = np.zeros(sys.n_u)
    C = np.asarray(sys.C(np.zeros(sys.n_x), u), dtype=float)
    S = sqrtm_spd(obs.P)
    Si = inv_sqrtm_spd(obs.P)
    KC = obs.K @ C
    norms, vertices = [], []
    for vertex, A in _row_vertex_matrices(sys, domain, u):
        norms.append(spectral_norm(S @ (A + KC) @ Si))
        vertices.append(vertex)
    norms = np.array(norms)
    worst = int(np.argmax(norms))
    valid = bool(norms[worst] <= obs.rho)
    cert = ObserverCertificate(
        valid=valid,
        rho=obs.rho,
        vertex_norms=norms,
        max_vertex_norm=float(norms[worst]),
        offending_vertex=None if valid else vertices[worst],
        kappa=kappa_of(obs),
        domain=domain.to_dict(),
    )
    if not valid:
        return cert
    C_p, C_w, C_v = derive_rges_constants(obs, cert)
    cert = ObserverCertificate(
        valid=True,
        rho=obs.rho,
        vertex_norms=norms,
        max_vertex_norm=float(norms[worst]),
        C_p=C_p,
        C_w=C_w,
        C_v=C_v,
        kappa=kappa_of(obs),
        domain=domain.to_dict(),
    )
    eioss = derive_eioss_constants(obs, cert)
    return ObserverCertificate(**{**cert.__dict__, "eioss": eioss})


def derive_rges_constants(obs: OutputInjectionObserver, cert: Optional[ObserverCertificate] = None):
    """``(C_p, C_w, C_v)`` from unrolling the P-norm error recursion.

    Converting P-norms back to Euclidean norms costs ``sqrt(lmax/lmin)`` on
    the initial error and on each disturbance step; re-indexing the sum from
    one divides the per-step gains by ``rho``.
    """
    if cert is not None and not cert.valid:
        raise CertificateError("observer certificate is invalid")
    vals, _ = _sym_eig(obs.P)
    lmin, lmax = vals.min(), vals.max()
    C_p = float(np.sqrt(lmax / lmin))
    C_w = C_p / obs.rho
    C_v = spectral_norm(sqrtm_spd(obs.P) @ obs.K) / (np.sqrt(lmin) * obs.rho)
    return C_p, float(C_w), float(C_v)


def derive_eioss_constants(obs: OutputInjectionObserver, cert: ObserverCertificate) -> EiossConstants:
    if cert is None or not cert.valid:
        raise CertificateError("e-IOSS constants need a valid observer certificate")
    C_p, C_w, C_v = (cert.C_p, cert.C_w, cert.C_v) if cert.C_p is not None else derive_rges_constants(obs, cert)
    return EiossConstants(c_p=C_p, c_u=0.0, c_w=C_w, c_v=C_v, c_y=C_v, eta=obs.rho)


def kappa_of(obs: OutputInjectionObserver) -> float:
    return spectral_norm(obs.K)


def eioss_slacks(obs, sys: DiscreteSystem, domain: BoxSet, n_samples: int = 10_000, seed: int = 0, x1_range=(0.0, 4.0)):
    """Slack of the P-norm e-IOSS inequality on random trajectory pairs.

    For ``x, chi`` in ``domain`` and disturbances/noises in their boxes the
    right side ``rho|x-chi|_P + |w-omega|_P + |K(v-nu)|_P + |K(y-zeta)|_P``
    minus the left side ``|x+ - chi+|_P`` is returned per sample.
    """
    rng = np.random.default_rng(seed)
    lo = np.where(np.isfinite(domain.lower), domain.lower, x1_range[0])
    hi = np.where(np.isfinite(domain.upper), domain.upper, x1_range[1])
    S = sqrtm_spd(obs.P)
    u = np.zeros(sys.n_u)
    W, V = sys.disturbance_set, sys.noise_set
    out = np.empty(n_samples)
    for k in range(n_samples):
        x, chi = rng.uniform(lo, hi), rng.uniform(lo, hi)
        w, om = rng.uniform(W.lower, W.upper), rng.uniform(W.lower, W.upper)
        v, nu = rng.uniform(V.lower, V.upper), rng.uniform(V.lower, V.upper)
        y, zeta = sys.output_map(x, u, v), sys.output_map(chi, u, nu)
        lhs = np.linalg.norm(S @ (sys.step_map(x, u, w) - sys.step_map(chi, u, om)))
        rhs = (
            obs.rho * np.linalg.norm(S @ (x - chi))
            + np.linalg.norm(S @ (w - om))
            + np.linalg.norm(S @ (obs.K @ (v - nu)))
            + np.linalg.norm(S @ (obs.K @ (y - zeta)))
        )
        out[k] = rhs - lhs
    return out


def observer_error_bound(C_p, C_w, C_v, rho, e_init, w_norms, v_norms, i):
    """Right side of the re-initialized observer bound at offset ``i``.

    ``w_norms[tau-1]``/``v_norms[tau-1]`` are ``|w_{t-tau}|``/``|v_{t-tau}|``
    for ``tau = 1..T``; ``e_init = |x_{t-T} - xhat_{t-T}|``.
    """
    T = len(w_norms)
    total = C_p * e_init * rho ** (T - i)
    for tau in range(i + 1, T + 1):
        total += rho ** (tau - i) * (C_w * w_norms[tau - 1] + C_v * v_norms[tau - 1])
    return total


# reactor observer
REACTOR_P = ((7.231, 3.063, 1.957), (3.063, 35.606, 1.746), (1.957, 1.746, 2.705))
REACTOR_K = (-0.129, -0.069, -0.923)
REACTOR_RHO = 0.985


def reactor_observer() -> OutputInjectionObserver:
    return OutputInjectionObserver(K=np.array(REACTOR_K), P=np.array(REACTOR_P), rho=REACTOR_RHO)
