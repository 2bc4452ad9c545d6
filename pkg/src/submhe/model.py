"""Perturbed discrete-time systems, constraint boxes and the batch reactor.

The system class is ``x+ = f(x, u, w)``, ``y = h(x, u, v)`` with bounded
disturbances.  Constraint sets are axis-aligned boxes so that membership and
Euclidean projection are componentwise.
"""

from __future__ import annotations

import itertools
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import CertificateError, ConfigurationError, NumericalOverflowError


@dataclass(frozen=True, eq=False)
class BoxSet:
    """Closed box ``{x : lower <= x <= upper}``; bounds may be infinite."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lower, dtype=float)).copy()
        hi = np.atleast_1d(np.asarray(self.upper, dtype=float)).copy()
        if lo.shape != hi.shape:
            raise ConfigurationError(f"bound shapes differ: {lo.shape} vs {hi.shape}")
        if np.any(np.isnan(lo)) or np.any(np.isnan(hi)):
            raise ConfigurationError("box bounds must not be NaN")
        if np.any(lo > hi):
            raise ConfigurationError("box lower bound exceeds upper bound")
        lo.setflags(write=False)
        hi.setflags(write=False)
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @classmethod
    def unbounded(cls, n: int) -> "BoxSet":
        return cls(np.full(n, -np.inf), np.full(n, np.inf))

    @classmethod
    def symmetric(cls, half_width) -> "BoxSet":
        hw = np.atleast_1d(np.asarray(half_width, dtype=float))
        return cls(-hw, hw)

    @property
    def dim(self) -> int:
        return self.lower.shape[0]

    @property
    def is_bounded(self) -> bool:
        return bool(np.all(np.isfinite(self.lower)) and np.all(np.isfinite(self.upper)))

    @property
    def is_unbounded(self) -> bool:
        """True when the box is the whole space."""
        return bool(np.all(np.isneginf(self.lower)) and np.all(np.isposinf(self.upper)))

    def contains(self, x, tol: float = 0.0) -> bool:
        x = np.asarray(x, dtype=float)
        return bool(np.all(x >= self.lower - tol) and np.all(x <= self.upper + tol))

    def project(self, x) -> np.ndarray:
        return np.minimum(np.maximum(np.asarray(x, dtype=float), self.lower), self.upper)

    def projection_error(self, x) -> np.ndarray:
        """``x - p(x)``; zero inside the box."""
        x = np.asarray(x, dtype=float)
        return x - self.project(x)

    def to_dict(self) -> dict:
        return {"lower": self.lower.tolist(), "upper": self.upper.tolist()}


def _as_callable_matrix(m):
    if m is None or callable(m):
        return m
    arr = np.atleast_2d(np.asarray(m, dtype=float))
    return lambda x, u: arr


@dataclass(frozen=True, eq=False)
class DiscreteSystem:
    """Nonlinear discrete-time system with disturbance and noise channels.

    ``state_jacobian(x, u)`` is the Jacobian of the nominal map with respect
    to the state.  ``jacobian_dependence`` lists the state components the
    Jacobian depends on; when ``jacobian_affine`` is true the Jacobian is
    affine in those components, which makes vertex enumeration exact.

    ``observer_kernel(z0, K, outputs)`` is an optional plain-float rollout of
    the linear-injection observer ``z+ = f_n(z) + K (h_n(z) - y)``; it must
    agree with the generic path and exists only for speed.
    """

    n_x: int
    n_u: int
    n_w: int
    n_v: int
    n_y: int
    step_map: Callable
    output_map: Callable
    state_jacobian: Callable
    state_set: BoxSet
    input_set: BoxSet
    disturbance_set: BoxSet
    noise_set: BoxSet
    output_jacobian: Optional[Callable] = None
    noise_jacobian: Optional[Callable] = None
    disturbance_jacobian: Optional[Callable] = None
    nominal_map: Optional[Callable] = None
    additive_disturbance: bool = False
    jacobian_dependence: Optional[tuple] = None
    jacobian_affine: bool = False
    lipschitz_F: Optional[float] = None
    lipschitz_H: Optional[float] = None
    observer_kernel: Optional[Callable] = None
    name: str = "system"
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        for attr in ("output_jacobian", "noise_jacobian"):
            object.__setattr__(self, attr, _as_callable_matrix(getattr(self, attr)))
        dims = {
            "state_set": self.n_x,
            "input_set": self.n_u,
            "disturbance_set": self.n_w,
            "noise_set": self.n_v,
        }
        for attr, n in dims.items():
            if getattr(self, attr).dim != n:
                raise ConfigurationError(f"{attr} has dimension {getattr(self, attr).dim}, expected {n}")
        if self.additive_disturbance and self.n_w != self.n_x:
            raise ConfigurationError("additive disturbances need n_w == n_x")
        for attr in ("disturbance_set", "noise_set"):
            box = getattr(self, attr)
            if not box.contains(np.zeros(box.dim)):
                raise ConfigurationError(f"{attr} must contain the origin")

    # nominal maps -------------------------------------------------------
    def f_n(self, x, u) -> np.ndarray:
        if self.nominal_map is not None:
            return self.nominal_map(x, u)
        return self.step_map(x, u, np.zeros(self.n_w))

    def h_n(self, x, u) -> np.ndarray:
        return self.output_map(x, u, np.zeros(self.n_v))

    def C(self, x, u) -> np.ndarray:
        """Output Jacobian with respect to the state."""
        if self.output_jacobian is None:
            return numerical_jacobian(lambda s: self.h_n(s, u), x)
        return self.output_jacobian(x, u)

    def D(self, x, u) -> np.ndarray:
        """Output Jacobian with respect to the noise."""
        if self.noise_jacobian is None:
            return numerical_jacobian(lambda s: self.output_map(x, u, s), np.zeros(self.n_v))
        return self.noise_jacobian(x, u)

    def G(self, x, u, w) -> np.ndarray:
        """Step-map Jacobian with respect to the disturbance."""
        if self.additive_disturbance:
            return np.eye(self.n_x)
        if self.disturbance_jacobian is None:
            return numerical_jacobian(lambda s: self.step_map(x, u, s), np.asarray(w, dtype=float))
        return self.disturbance_jacobian(x, u, w)


def numerical_jacobian(fun, x, h: float = 1e-6) -> np.ndarray:
    """Central finite-difference Jacobian."""
    x = np.asarray(x, dtype=float)
    f0 = np.atleast_1d(fun(x))
    J = np.empty((f0.shape[0], x.shape[0]))
    for j in range(x.shape[0]):
        e = np.zeros_like(x)
        e[j] = h
        J[:, j] = (np.atleast_1d(fun(x + e)) - np.atleast_1d(fun(x - e))) / (2 * h)
    return J


def _check_dim(v, n, what):
    v = np.asarray(v, dtype=float).reshape(-1)
    if v.shape[0] != n:
        raise ConfigurationError(f"{what} has dimension {v.shape[0]}, expected {n}")
    return v


def step(sys: DiscreteSystem, x, u, w) -> np.ndarray:
    """One step of the perturbed dynamics."""
    x = _check_dim(x, sys.n_x, "state")
    u = _check_dim(u, sys.n_u, "input")
    w = _check_dim(w, sys.n_w, "disturbance")
    return np.asarray(sys.step_map(x, u, w), dtype=float)


def output(sys: DiscreteSystem, x, u, v) -> np.ndarray:
    x = _check_dim(x, sys.n_x, "state")
    u = _check_dim(u, sys.n_u, "input")
    v = _check_dim(v, sys.n_v, "noise")
    return np.atleast_1d(np.asarray(sys.output_map(x, u, v), dtype=float))


@dataclass(frozen=True, eq=False)
class Trajectory:
    states: np.ndarray  # (L+1, n_x)
    outputs: np.ndarray  # (L, n_y)
    inputs: np.ndarray  # (L, n_u)
    disturbances: np.ndarray  # (L, n_w)
    noises: np.ndarray  # (L, n_v)

    def __len__(self):
        return self.outputs.shape[0]

    def step_residual(self, sys: DiscreteSystem) -> float:
        """Largest componentwise violation of the dynamics and output maps."""
        worst = 0.0
        for k in range(len(self)):
            xk = self.states[k]
            nxt = sys.step_map(xk, self.inputs[k], self.disturbances[k])
            worst = max(worst, float(np.max(np.abs(nxt - self.states[k + 1]))))
            yk = sys.output_map(xk, self.inputs[k], self.noises[k])
            worst = max(worst, float(np.max(np.abs(np.atleast_1d(yk) - self.outputs[k]))))
        return worst


def _as_sequence(seq, length, n):
    if seq is None:
        return np.zeros((length, n))
    arr = np.asarray(seq, dtype=float)
    if n == 0:
        return np.zeros((arr.shape[0] if arr.ndim else length, 0))
    return arr.reshape(arr.shape[0], n)


def simulate(sys: DiscreteSystem, x0, inputs, w_seq, v_seq) -> Trajectory:
    """Forward rollout of the perturbed system."""
    x0 = _check_dim(x0, sys.n_x, "initial state")
    if not np.all(np.isfinite(x0)):
        raise NumericalOverflowError(0, "initial state is not finite")
    w_seq = np.asarray(w_seq, dtype=float)
    length = w_seq.shape[0] if w_seq.ndim else 0
    w_seq = _as_sequence(w_seq, length, sys.n_w)
    v_seq = _as_sequence(v_seq, length, sys.n_v)
    inputs = _as_sequence(inputs, length, sys.n_u)
    if not (w_seq.shape[0] == v_seq.shape[0] == inputs.shape[0]):
        raise ConfigurationError("input, disturbance and noise sequences differ in length")
    states = np.empty((length + 1, sys.n_x))
    outputs = np.empty((length, sys.n_y))
    states[0] = x0
    x = x0
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(length):
            outputs[k] = sys.output_map(x, inputs[k], v_seq[k])
            x = np.asarray(sys.step_map(x, inputs[k], w_seq[k]), dtype=float)
            if not np.all(np.isfinite(x)):
                raise NumericalOverflowError(k + 1)
            states[k + 1] = x
    return Trajectory(states, outputs, inputs, w_seq, v_seq)


def state_jacobian(sys: DiscreteSystem, x, u) -> np.ndarray:
    x = _check_dim(x, sys.n_x, "state")
    u = _check_dim(u, sys.n_u, "input")
    return np.asarray(sys.state_jacobian(x, u), dtype=float)


def _dependent_components(sys: DiscreteSystem, domain: BoxSet):
    deps = sys.jacobian_dependence
    if deps is None:
        deps = tuple(range(sys.n_x))
    for i in deps:
        if not (np.isfinite(domain.lower[i]) and np.isfinite(domain.upper[i])):
            raise CertificateError(
                f"domain is unbounded in state component {i}, on which the Jacobian depends"
            )
    return tuple(deps)


def _anchor_point(domain: BoxSet) -> np.ndarray:
    lo, hi = domain.lower, domain.upper
    anchor = np.zeros(domain.dim)
    both = np.isfinite(lo) & np.isfinite(hi)
    anchor[both] = 0.5 * (lo[both] + hi[both])
    anchor[np.isfinite(lo) & ~np.isfinite(hi)] = lo[np.isfinite(lo) & ~np.isfinite(hi)]
    anchor[~np.isfinite(lo) & np.isfinite(hi)] = hi[~np.isfinite(lo) & np.isfinite(hi)]
    return anchor


def jacobian_vertices(sys: DiscreteSystem, domain: BoxSet, n_samples: int = 4096, seed: int = 0):
    """Points at which the state Jacobian attains its extreme values on ``domain``.

    Affine Jacobians only need the corners of the box spanned by the dependent
    components; otherwise dense uniform samples (plus corners) are returned.
    """
    deps = _dependent_components(sys, domain)
    anchor = _anchor_point(domain)
    corners = []
    for combo in itertools.product(*[(domain.lower[i], domain.upper[i]) for i in deps]):
        p = anchor.copy()
        p[list(deps)] = combo
        corners.append(p)
    if sys.jacobian_affine:
        return corners
    warnings.warn(
        "state Jacobian is not declared affine; falling back to dense sampling", RuntimeWarning
    )
    rng = np.random.default_rng(seed)
    pts = np.tile(anchor, (n_samples, 1))
    for i in deps:
        pts[:, i] = rng.uniform(domain.lower[i], domain.upper[i], n_samples)
    return corners + list(pts)


def lipschitz_bounds(sys: DiscreteSystem, domain: BoxSet, u=None) -> tuple[float, float]:
    """Lipschitz constants ``(F, H)`` of the nominal dynamics and the output map.

    F is the largest spectral norm of the state Jacobian over ``domain``
    (floored at 1); H is the larger of the output Jacobian's and the noise
    channel's spectral norms.
    """
    u = np.zeros(sys.n_u) if u is None else np.asarray(u, dtype=float)
    pts = jacobian_vertices(sys, domain)
    F = max(np.linalg.norm(sys.state_jacobian(p, u), 2) for p in pts)
    H_x = max(np.linalg.norm(sys.C(p, u), 2) for p in pts)
    H_v = max(np.linalg.norm(sys.D(p, u), 2) for p in pts)
    return max(1.0, float(F)), float(max(H_x, H_v))


# --------------------------------------------------------------------------
# batch reactor  A <-> B + C, 2B <-> C  (explicit Euler)


@dataclass(frozen=True)
class ReactorParams:
    p1: float = 0.2
    p2: float = 0.05
    p3: float = 0.2
    p4: float = 0.1
    t_delta: float = 0.25

    def __post_init__(self):
        if min(self.p1, self.p2, self.p3, self.p4) <= 0:
            raise ConfigurationError("reactor rate constants must be positive")
        if self.t_delta <= 0:
            raise ConfigurationError("step size must be positive")


REACTOR_X0 = (0.5, 0.05, 0.0)
REACTOR_XBAR0 = (1.0, 0.5, 0.1)
# observer domain on which the mean-value certificate is computed
REACTOR_OBSERVER_DOMAIN = ((-np.inf, -0.03, -2.0), (np.inf, 4.0, 4.0))


def reactor_observer_domain() -> BoxSet:
    return BoxSet(*REACTOR_OBSERVER_DOMAIN)


def reactor_rate_jacobian(params: ReactorParams, x2: float, x3: float) -> np.ndarray:
    """Jacobian of the (continuous) rate laws; depends on x2, x3 only."""
    p1, p2, p3, p4 = params.p1, params.p2, params.p3, params.p4
    return np.array(
        [
            [-p1, p2 * x3, p2 * x2],
            [p1, -p2 * x3 - 4 * p3 * x2, -p2 * x2 + 2 * p4],
            [p1, -p2 * x3 + 2 * p3 * x2, -p2 * x2 - p4],
        ]
    )


def reactor_model(params: Optional[ReactorParams] = None) -> DiscreteSystem:
    """Euler-discretized batch reactor with additive disturbances and y = x1+x2+x3+v."""
    prm = params or ReactorParams()
    p1, p2, p3, p4, td = prm.p1, prm.p2, prm.p3, prm.p4, prm.t_delta

    def f_n(x, u=None):
        x1, x2, x3 = float(x[0]), float(x[1]), float(x[2])
        r = p2 * x2 * x3
        return np.array(
            [
                x1 + td * (-p1 * x1 + r),
                x2 + td * (p1 * x1 - r - 2 * p3 * x2 * x2 + 2 * p4 * x3),
                x3 + td * (p1 * x1 - r + p3 * x2 * x2 - p4 * x3),
            ]
        )

    def f(x, u, w):
        return f_n(x) + w

    def h(x, u, v):
        return np.array([x[0] + x[1] + x[2] + v[0]])

    eye = np.eye(3)

    def kernel(z0, K, ys):
        x1, x2, x3 = (float(c) for c in z0)
        k1, k2, k3 = (float(c) for c in K)
        states = [(x1, x2, x3)]
        for y in ys:
            # same operation order as f_n so both paths agree bitwise
            r = p2 * x2 * x3
            e = x1 + x2 + x3 - y
            x1, x2, x3 = (
                x1 + td * (-p1 * x1 + r) + k1 * e,
                x2 + td * (p1 * x1 - r - 2 * p3 * x2 * x2 + 2 * p4 * x3) + k2 * e,
                x3 + td * (p1 * x1 - r + p3 * x2 * x2 - p4 * x3) + k3 * e,
            )
            states.append((x1, x2, x3))
        return states

    def jac(x, u=None):
        return eye + td * reactor_rate_jacobian(prm, float(x[1]), float(x[2]))

    return DiscreteSystem(
        n_x=3,
        n_u=0,
        n_w=3,
        n_v=1,
        n_y=1,
        step_map=f,
        output_map=h,
        state_jacobian=jac,
        nominal_map=f_n,
        output_jacobian=np.ones((1, 3)),
        noise_jacobian=np.ones((1, 1)),
        state_set=BoxSet(np.zeros(3), np.full(3, 4.0)),
        input_set=BoxSet(np.zeros(0), np.zeros(0)),
        disturbance_set=BoxSet.symmetric(np.full(3, 2e-3)),
        noise_set=BoxSet.symmetric([1e-2]),
        additive_disturbance=True,
        jacobian_dependence=(1, 2),
        jacobian_affine=True,
        lipschitz_H=math.sqrt(3.0),
        observer_kernel=kernel,
        name="reactor",
        params={"p": [p1, p2, p3, p4], "t_delta": td},
    )


def linear_model(A, C, W: Optional[BoxSet] = None, V: Optional[BoxSet] = None, X: Optional[BoxSet] = None):
    """Linear system ``x+ = A x + w``, ``y = C x + v`` (used by tests and toys)."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    C = np.atleast_2d(np.asarray(C, dtype=float))
    n, m = A.shape[0], C.shape[0]
    return DiscreteSystem(
        n_x=n,
        n_u=0,
        n_w=n,
        n_v=m,
        n_y=m,
        step_map=lambda x, u, w: A @ x + w,
        output_map=lambda x, u, v: C @ x + v,
        state_jacobian=lambda x, u: A,
        nominal_map=lambda x, u: A @ x,
        output_jacobian=C,
        noise_jacobian=np.eye(m),
        state_set=X or BoxSet.unbounded(n),
        input_set=BoxSet(np.zeros(0), np.zeros(0)),
        disturbance_set=W or BoxSet.unbounded(n),
        noise_set=V or BoxSet.unbounded(m),
        additive_disturbance=True,
        jacobian_dependence=(),
        jacobian_affine=True,
        name="linear",
    )


def get_model(name: str) -> DiscreteSystem:
    if name == "reactor":
        return reactor_model()
    raise ConfigurationError(f"unknown model {name!r}")


def stack(seq: Sequence) -> np.ndarray:
    return np.vstack([np.atleast_1d(s) for s in seq]) if len(seq) else np.zeros((0, 0))
