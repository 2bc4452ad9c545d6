"""Budget-limited descent on the condensed MHE problem.

Both solvers run the same projected, Levenberg-damped Gauss-Newton loop.
For the norm-based (a = 1) cost every residual block is reweighted from the
current iterate, which turns each step into a weighted least-squares
subproblem (IRLS).  One iteration is one linear solve.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from .errors import ConfigurationError, NumericalOverflowError
from .mhe import (
    ConstraintSets,
    Decision,
    CostWeights,
    Window,
    cost_nd,
    cost_td,
    is_feasible,
    repair_states,
)
from .model import BoxSet, DiscreteSystem


@dataclass(frozen=True)
class SolverSettings:
    """Iteration budget, Levenberg damping schedule and stopping tolerances.

    ``damping`` is relative to the mean diagonal of the normal matrix.
    ``smoothing_start`` is the first IRLS smoothing value; it shrinks by
    ``smoothing_decay`` per iteration down to ``smoothing_eps``.
    """

    budget: int = 2
    damping: float = 1e-3
    damping_up: float = 10.0
    damping_down: float = 0.5
    smoothing_eps: float = 1e-8
    smoothing_start: float = 1e-3
    smoothing_decay: float = 0.1
    step_tol: float = 1e-12
    cost_tol: float = 1e-12

    def __post_init__(self):
        if self.budget < 0:
            raise ConfigurationError("budget must be >= 0")
        if self.damping <= 0:
            raise ConfigurationError("damping must be > 0")
        if self.smoothing_eps <= 0 or self.smoothing_start < self.smoothing_eps:
            raise ConfigurationError("smoothing values must be positive and start >= floor")
        if self.damping_up <= 1 or not 0 < self.damping_down < 1:
            raise ConfigurationError("damping factors must grow on reject and shrink on accept")


@dataclass
class SolveInfo:
    iterations: int = 0
    accepted_steps: int = 0
    cost_init: float = np.inf
    cost: float = np.inf
    history: list = field(default_factory=list)


class NlpView:
    """Condensed decision vector ``[chi, omega_0.., nu_0..]`` with its residual blocks.

    Blocks are (prior, omega_k, nu_k, fit_k); the cost is ``sum_b s_b |r_b|^a``.
    With a = 2 the stacked ``sqrt(s_b) r_b`` squared sum is the quadratic cost.
    """

    def __init__(self, sys: DiscreteSystem, window: Window, prior, weights: CostWeights, cost_kind: str, sets: Optional[ConstraintSets] = None):
        if cost_kind not in ("quadratic", "discounted"):
            raise ConfigurationError(f"unknown cost kind {cost_kind!r}")
        if cost_kind == "discounted" and (weights.a != 1 or weights.eta_bar is None):
            raise ConfigurationError("the discounted cost needs a = 1 and eta_bar")
        self.sys = sys
        self.window = window
        self.prior = np.asarray(prior, dtype=float)
        self.weights = weights
        self.cost_kind = cost_kind
        self.sets = sets or ConstraintSets(BoxSet.unbounded(sys.n_x), BoxSet.unbounded(sys.n_w), sys.noise_set)
        self.n = window.N_eff
        self.ys = window.stage_outputs
        self.us = window.stage_inputs if sys.n_u else np.zeros((self.n, 0))
        nx, nw, nv, n = sys.n_x, sys.n_w, sys.n_v, self.n
        self.dim = nx + n * (nw + nv)
        self._iw = nx
        self._iv = nx + n * nw
        lo = np.concatenate([self.sets.X.lower, np.tile(self.sets.W.lower, n), np.tile(self.sets.V.lower, n)])
        hi = np.concatenate([self.sets.X.upper, np.tile(self.sets.W.upper, n), np.tile(self.sets.V.upper, n)])
        self.lower, self.upper = lo, hi
        # per-block scales s_b
        w = weights
        if cost_kind == "discounted":
            disc = w.eta_bar ** np.arange(n, 0, -1, dtype=float)
            s_prior = w.eta_bar**n * w.c_p
        else:
            disc = np.ones(n)
            s_prior = w.c_p
        self.a = float(w.a)
        self.s_prior = s_prior
        self.s_w = w.c_w * disc
        self.s_v = w.c_v * disc
        self.s_y = w.c_y * disc
        self._cost = cost_td if cost_kind == "discounted" else cost_nd

    # packing ------------------------------------------------------------
    def pack(self, dec: Decision) -> np.ndarray:
        return dec.vector()

    def unpack(self, vec) -> Decision:
        sys, n = self.sys, self.n
        vec = np.asarray(vec, dtype=float)
        return Decision(
            vec[: sys.n_x].copy(),
            vec[self._iw : self._iv].reshape(n, sys.n_w).copy(),
            vec[self._iv :].reshape(n, sys.n_v).copy(),
        )

    def cost_of(self, dec: Decision) -> float:
        return self._cost(self.sys, dec, self.window, self.prior, self.weights)

    def cost(self, vec) -> float:
        return self.cost_of(self.unpack(vec))

    def feasible(self, dec: Decision) -> bool:
        return is_feasible(self.sys, dec, 0.0, self.sets, self.us)

    def project(self, vec) -> np.ndarray:
        """Clamp onto the variable boxes, then repair state-box violations."""
        v = np.minimum(np.maximum(np.asarray(vec, dtype=float), self.lower), self.upper)
        if self.sets.X.is_unbounded or self.n == 0:
            return v
        dec = repair_states(self.sys, self.unpack(v), self.sets.X, self.us)
        v = dec.vector()
        # repaired omegas may leave a bounded W; clamping there is left to the feasibility check
        return v

    # residuals ----------------------------------------------------------
    def blocks(self, vec):
        """Unweighted residual blocks with their row slices and scales."""
        r, _, slices, scales = self.residual_and_jacobian(vec, jacobian=False)
        return r, slices, scales

    def residual_and_jacobian(self, vec, jacobian: bool = True):
        sys, n = self.sys, self.n
        nx, nw, nv, ny = sys.n_x, sys.n_w, sys.n_v, sys.n_y
        dec = self.unpack(vec)
        m = nx + n * (nw + nv + ny)
        r = np.empty(m)
        J = np.zeros((m, self.dim)) if jacobian else None
        slices, scales = [], []
        row = 0
        r[:nx] = dec.chi - self.prior
        if jacobian:
            J[:nx, :nx] = np.eye(nx)
        slices.append(slice(0, nx))
        scales.append(self.s_prior)
        row = nx
        for k in range(n):
            r[row : row + nw] = dec.omegas[k]
            if jacobian:
                c = self._iw + k * nw
                J[row : row + nw, c : c + nw] = np.eye(nw)
            slices.append(slice(row, row + nw))
            scales.append(self.s_w[k])
            row += nw
        for k in range(n):
            r[row : row + nv] = dec.nus[k]
            if jacobian:
                c = self._iv + k * nv
                J[row : row + nv, c : c + nv] = np.eye(nv)
            slices.append(slice(row, row + nv))
            scales.append(self.s_v[k])
            row += nv
        # rollout with forward sensitivities S_k = dx_k/d(decision)
        x = dec.chi
        S = np.zeros((nx, self.dim))
        S[:, :nx] = np.eye(nx)
        for k in range(n):
            u = self.us[k]
            zeta = sys.output_map(x, u, dec.nus[k])
            r[row : row + ny] = self.ys[k] - zeta
            if jacobian:
                Ck = sys.C(x, u)
                Dk = sys.D(x, u)
                J[row : row + ny] = -(Ck @ S)
                c = self._iv + k * nv
                J[row : row + ny, c : c + nv] -= Dk
            slices.append(slice(row, row + ny))
            scales.append(self.s_y[k])
            row += ny
            if jacobian:
                A = sys.state_jacobian(x, u)
                G = sys.G(x, u, dec.omegas[k])
                S = A @ S
                c = self._iw + k * nw
                S[:, c : c + nw] += G
            x = sys.step_map(x, u, dec.omegas[k])
            if not np.all(np.isfinite(x)):
                raise NumericalOverflowError(k + 1)
        return r, J, slices, np.array(scales)

    def block_weights(self, r, slices, scales, smoothing: float) -> np.ndarray:
        """Per-row least-squares weights; for a = 2 these are just the scales."""
        w = np.empty(r.shape[0])
        if self.a == 2.0:
            for sl, s in zip(slices, scales):
                w[sl] = s
            return w
        p = (2.0 - self.a) / 2.0
        for sl, s in zip(slices, scales):
            nrm2 = float(r[sl] @ r[sl])
            w[sl] = s / (nrm2 + smoothing * smoothing) ** p
        return w


def _active_mask(vec, grad, lower, upper):
    """Variables held at a bound because descent would push them outside."""
    at_lo = (vec <= lower) & (grad > 0)
    at_hi = (vec >= upper) & (grad < 0)
    return at_lo | at_hi


def _descent(view: NlpView, init: Decision, settings: SolverSettings):
    info = SolveInfo()
    vec = view.pack(init)
    best_dec = init
    cost = view.cost_of(init)
    info.cost_init = info.cost = cost
    info.history.append(cost)
    if settings.budget == 0 or view.dim == 0:
        return best_dec, info
    irls = view.a != 2.0
    smoothing = settings.smoothing_start if irls else 0.0
    mu = None
    it = 0
    r = J = None
    while it < settings.budget:
        if r is None:
            r, J, slices, scales = view.residual_and_jacobian(vec)
        sw = np.sqrt(view.block_weights(r, slices, scales, smoothing))
        Jw = J * sw[:, None]
        H = Jw.T @ Jw
        g = Jw.T @ (r * sw)
        free = ~_active_mask(vec, g, view.lower, view.upper)
        if not free.any() or not np.all(np.isfinite(g)):
            break
        if mu is None:
            mu = settings.damping * max(np.trace(H) / H.shape[0], 1e-300)
        it += 1
        Hf = H[np.ix_(free, free)]
        try:
            factor = cho_factor(Hf + mu * np.eye(Hf.shape[0]))
            step_f = -cho_solve(factor, g[free])
        except (LinAlgError, ValueError):
            mu *= settings.damping_up
            continue
        step = np.zeros_like(vec)
        step[free] = step_f
        trial = view.project(vec + step)
        trial_dec = view.unpack(trial)
        try:
            trial_cost = view.cost_of(trial_dec)
        except NumericalOverflowError:
            trial_cost = np.inf
        at_floor = smoothing <= settings.smoothing_eps
        if irls:
            smoothing = max(settings.smoothing_eps, smoothing * settings.smoothing_decay)
        if np.isfinite(trial_cost) and trial_cost < cost:
            rel = (cost - trial_cost) / max(cost, 1e-300)
            moved = float(np.linalg.norm(trial - vec))
            vec, cost, best_dec = trial, trial_cost, trial_dec
            r = None
            info.accepted_steps += 1
            info.history.append(cost)
            mu *= settings.damping_down
            small = moved <= settings.step_tol * (1.0 + float(np.linalg.norm(vec))) or rel <= settings.cost_tol
            if small and (not irls or at_floor):
                break
        else:
            mu *= settings.damping_up
            tiny = float(np.linalg.norm(step)) <= settings.step_tol * (1.0 + float(np.linalg.norm(vec)))
            if tiny and (not irls or at_floor):
                break
    info.iterations = it
    info.cost = cost
    return best_dec, info


def solve(view: NlpView, init: Decision, settings: SolverSettings):
    """Dispatch on the cost kind; returns ``(decision, SolveInfo)``."""
    return _descent(view, init, settings)


def solve_quadratic(view: NlpView, init: Decision, settings: SolverSettings) -> Decision:
    if view.a != 2.0:
        raise ConfigurationError("solve_quadratic needs a = 2")
    return _descent(view, init, settings)[0]


def solve_discounted(view: NlpView, init: Decision, settings: SolverSettings) -> Decision:
    if view.cost_kind != "discounted":
        raise ConfigurationError("solve_discounted needs the time-discounted cost")
    return _descent(view, init, settings)[0]


def warm_start_shift(prev: Decision, prev_t: int, new_window: Window, sys: DiscreteSystem, mode: str = "shifted",
                     candidate: Optional[Decision] = None, sets: Optional[ConstraintSets] = None) -> Decision:
    """Warm start from the previous solution.

    ``mode="candidate"`` returns ``candidate``.  ``mode="shifted"`` drops the
    oldest stage (when the window slid), moves ``chi`` one step along the
    previous rollout and appends a zero stage, i.e. a one-step prediction.
    """
    if mode == "candidate":
        if candidate is None:
            raise ConfigurationError("candidate mode needs the candidate decision")
        return candidate
    if mode != "shifted":
        raise ConfigurationError(f"unknown warm-start mode {mode!r}")
    if new_window.t != prev_t + 1:
        raise ConfigurationError(f"previous solution is for t={prev_t}, window is at t={new_window.t}")
    n_new = new_window.N_eff
    n_prev = prev.horizon
    if n_new == n_prev + 1:
        chi = prev.chi.copy()
        om, nu = prev.omegas, prev.nus
    elif n_new == n_prev and n_prev >= 1:
        u0 = np.zeros(sys.n_u) if sys.n_u == 0 else new_window.inputs[0]
        chi = np.asarray(sys.step_map(prev.chi, u0, prev.omegas[0]), dtype=float)
        om, nu = prev.omegas[1:], prev.nus[1:]
    else:
        raise ConfigurationError("window lengths of consecutive solutions are inconsistent")
    dec = Decision(
        chi,
        np.vstack([om, np.zeros((1, sys.n_w))]),
        np.vstack([nu, np.zeros((1, sys.n_v))]),
    )
    if sets is not None:
        dec = Decision(sets.X.project(dec.chi), sets.W.project(dec.omegas), sets.V.project(dec.nus))
        dec = repair_states(sys, dec, sets.X, new_window.stage_inputs)
    return dec


def brute_force_reference(view: NlpView, settings: Optional[SolverSettings] = None, multistarts: int = 8, seed: int = 0,
                          candidate: Optional[Decision] = None):
    """Best of long solves from the candidate and random feasible starts (test oracle).

    Returns ``(decision, cost)``.
    """
    base = settings or SolverSettings()
    long_run = SolverSettings(
        budget=500,
        damping=base.damping,
        damping_up=base.damping_up,
        damping_down=base.damping_down,
        smoothing_eps=base.smoothing_eps,
        smoothing_start=base.smoothing_start,
        smoothing_decay=base.smoothing_decay,
        step_tol=1e-15,
        cost_tol=0.0,
    )
    sys, n = view.sys, view.n
    rng = np.random.default_rng(seed)
    starts = []
    if candidate is not None:
        starts.append(candidate)
    X, W, V = view.sets.X, view.sets.W, view.sets.V
    wbox = W if W.is_bounded else sys.disturbance_set
    for _ in range(multistarts):
        if X.is_bounded:
            chi = view.prior + rng.normal(0.0, 0.3, sys.n_x)
            chi = X.project(chi)
        else:
            chi = view.prior + rng.normal(0.0, 0.3, sys.n_x)
        om = rng.uniform(wbox.lower, wbox.upper, (n, sys.n_w))
        nu = rng.uniform(V.lower, V.upper, (n, sys.n_v)) if V.is_bounded else rng.normal(0, 1e-2, (n, sys.n_v))
        dec = Decision(chi, om, nu)
        dec = view.unpack(view.project(dec.vector()))
        starts.append(dec)
    best, best_cost = None, np.inf
    for s in starts:
        if not view.feasible(s):
            continue
        dec, info = _descent(view, s, long_run)
        if info.cost < best_cost and view.feasible(dec):
            best, best_cost = dec, info.cost
    return best, best_cost
