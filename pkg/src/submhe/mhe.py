"""Suboptimal moving horizon estimation.

The problem is condensed: a decision is the window's initial state plus the
disturbance and noise sequences, and the state trajectory follows by rollout.
Each step builds a feasible candidate from the re-initialized observer, lets a
budget-limited solver improve on it, and keeps the solver's proposal only if
it is feasible and no more expensive than the candidate.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from .errors import ConfigurationError, ContractViolation, NumericalOverflowError, WindowUnderflowError
from .model import BoxSet, DiscreteSystem
from .observer import OutputInjectionObserver, reinit_and_roll

COST_KINDS = ("quadratic", "discounted")
CANDIDATE_KINDS = ("nominal", "observer")


@dataclass(frozen=True)
class CostWeights:
    """Weights of ``Gamma = c_p|chi - xbar|^a`` and ``l = c_w|w|^a + c_v|v|^a + c_y|y - zeta|^a``.

    Lower and upper bounds on Gamma and l coincide for these norm forms, so
    one value per term suffices.
    """

    c_p: float
    c_w: float
    c_v: float
    c_y: float
    a: float = 2.0
    eta_bar: Optional[float] = None

    def __post_init__(self):
        if min(self.c_p, self.c_w, self.c_v, self.c_y) <= 0:
            raise ConfigurationError("cost weights must be positive")
        if self.a < 1:
            raise ConfigurationError("cost exponent a must be >= 1")
        if self.eta_bar is not None and not 0.0 < self.eta_bar <= 1.0:
            raise ConfigurationError("eta_bar must lie in (0, 1]")

    @classmethod
    def from_eioss(cls, eioss, kind: str = "quadratic") -> "CostWeights":
        """Weights meeting the compatibility floor ``c_i <= weight_i`` with equality."""
        if kind == "quadratic":
            return cls(eioss.c_p, eioss.c_w, eioss.c_v, eioss.c_y, a=2.0)
        if kind == "discounted":
            return cls(eioss.c_p, eioss.c_w, eioss.c_v, eioss.c_y, a=1.0, eta_bar=eioss.eta)
        raise ConfigurationError(f"unknown cost kind {kind!r}")

    def compatible_with(self, eioss, kind: str = "quadratic") -> bool:
        ok = (
            eioss.c_p <= self.c_p
            and eioss.c_w <= self.c_w
            and eioss.c_v <= self.c_v
            and eioss.c_y <= self.c_y
        )
        if kind == "discounted":
            ok = ok and self.a == 1 and self.eta_bar is not None and eioss.eta <= self.eta_bar
        return bool(ok)


@dataclass(frozen=True, eq=False)
class Window:
    """Data available at time ``t``: the last ``T_eff`` inputs/outputs and ``xhat_{t-T_eff}``."""

    t: int
    N: int
    T: Optional[int]
    inputs: np.ndarray
    outputs: np.ndarray
    x_hat_past: np.ndarray

    def __post_init__(self):
        if self.N < 1:
            raise ConfigurationError("horizon N must be >= 1")
        if self.T is not None and self.T <= self.N:
            raise ConfigurationError("re-initialization horizon T must exceed N")
        if self.outputs.shape[0] != self.T_eff:
            raise WindowUnderflowError(
                f"window at t={self.t} holds {self.outputs.shape[0]} outputs, expected {self.T_eff}"
            )

    @property
    def N_eff(self) -> int:
        return min(self.t, self.N)

    @property
    def T_eff(self) -> int:
        return self.t if self.T is None else min(self.t, self.T)

    @property
    def stage_outputs(self) -> np.ndarray:
        """Outputs ``y_{t-N_eff} .. y_{t-1}`` entering the cost."""
        return self.outputs[self.T_eff - self.N_eff :]

    @property
    def stage_inputs(self) -> np.ndarray:
        return self.inputs[self.T_eff - self.N_eff :]


@dataclass(eq=False)
class Decision:
    """Initial state ``chi`` and sequences ``omegas`` (N_eff, n_w), ``nus`` (N_eff, n_v)."""

    chi: np.ndarray
    omegas: np.ndarray
    nus: np.ndarray

    def __post_init__(self):
        self.chi = np.asarray(self.chi, dtype=float).reshape(-1)
        self.omegas = np.asarray(self.omegas, dtype=float)
        self.nus = np.asarray(self.nus, dtype=float)
        if self.omegas.ndim != 2 or self.nus.ndim != 2 or self.omegas.shape[0] != self.nus.shape[0]:
            raise ConfigurationError("omega and nu sequences must be 2-D with equal length")

    @property
    def horizon(self) -> int:
        return self.omegas.shape[0]

    @classmethod
    def zeros(cls, chi, horizon: int, n_w: int, n_v: int) -> "Decision":
        return cls(np.array(chi, dtype=float), np.zeros((horizon, n_w)), np.zeros((horizon, n_v)))

    def copy(self) -> "Decision":
        return Decision(self.chi.copy(), self.omegas.copy(), self.nus.copy())

    def vector(self) -> np.ndarray:
        return np.concatenate([self.chi, self.omegas.ravel(), self.nus.ravel()])

    def same_as(self, other: "Decision") -> bool:
        return (
            np.array_equal(self.chi, other.chi)
            and np.array_equal(self.omegas, other.omegas)
            and np.array_equal(self.nus, other.nus)
        )


def _inputs_for(sys, inputs, n):
    if sys.n_u == 0 or inputs is None:
        return np.zeros((n, sys.n_u))
    return np.asarray(inputs, dtype=float).reshape(n, sys.n_u)


def rollout(sys: DiscreteSystem, dec: Decision, inputs=None):
    """States ``chi, x_1, ..`` (N_eff+1 rows) and predicted outputs ``zeta`` (N_eff rows)."""
    n = dec.horizon
    inputs = _inputs_for(sys, inputs, n)
    states = np.empty((n + 1, sys.n_x))
    zetas = np.empty((n, sys.n_y))
    states[0] = dec.chi
    for k in range(n):
        zetas[k] = sys.output_map(states[k], inputs[k], dec.nus[k])
        states[k + 1] = sys.step_map(states[k], inputs[k], dec.omegas[k])
    if not np.all(np.isfinite(states)):
        bad = int(np.argmax(~np.all(np.isfinite(states), axis=1)))
        raise NumericalOverflowError(bad)
    return states, zetas


def _norms(arr, a):
    n = np.sqrt(np.sum(np.square(arr), axis=-1))
    return n * n if a == 2 else n**a


def cost_nd(sys: DiscreteSystem, dec: Decision, window: Window, prior, weights: CostWeights) -> float:
    """Non-discounted cost ``Gamma(chi, prior) + sum_i l(omega, nu, y - zeta)``."""
    _, zetas = rollout(sys, dec, window.stage_inputs)
    a = weights.a
    cost = weights.c_p * _norms(dec.chi - np.asarray(prior, dtype=float), a)
    if dec.horizon:
        fit = window.stage_outputs - zetas
        cost += np.sum(
            weights.c_w * _norms(dec.omegas, a) + weights.c_v * _norms(dec.nus, a) + weights.c_y * _norms(fit, a)
        )
    return float(cost)


def cost_td(sys: DiscreteSystem, dec: Decision, window: Window, prior, weights: CostWeights) -> float:
    """Time-discounted cost; the stage at ``t-i`` carries the factor ``eta_bar**i``."""
    if weights.a != 1:
        raise ConfigurationError("the time-discounted cost uses a = 1")
    if weights.eta_bar is None:
        raise ConfigurationError("the time-discounted cost needs eta_bar")
    _, zetas = rollout(sys, dec, window.stage_inputs)
    n = dec.horizon
    eb = weights.eta_bar
    cost = eb**n * weights.c_p * _norms(dec.chi - np.asarray(prior, dtype=float), 1)
    if n:
        disc = eb ** np.arange(n, 0, -1, dtype=float)
        fit = window.stage_outputs - zetas
        stage = weights.c_w * _norms(dec.omegas, 1) + weights.c_v * _norms(dec.nus, 1) + weights.c_y * _norms(fit, 1)
        cost += np.sum(disc * stage)
    return float(cost)


def cost_function(kind: str) -> Callable:
    if kind == "quadratic":
        return cost_nd
    if kind == "discounted":
        return cost_td
    raise ConfigurationError(f"unknown cost kind {kind!r}")


def prior_from_observer(z_at_prior, project: bool, X: BoxSet):
    """Returns ``(prior, eps)`` with ``eps = z - p_X(z)`` the projection error."""
    z = np.asarray(z_at_prior, dtype=float)
    if not project:
        return z.copy(), np.zeros_like(z)
    p = X.project(z)
    return p, z - p


def nudge_into(x, box: BoxSet):
    """Move entries that rounding left outside ``box`` back inside, one ulp at a time."""
    x = np.array(x, dtype=float)
    for _ in range(4):
        lo = x < box.lower
        hi = x > box.upper
        if not (lo.any() or hi.any()):
            break
        x[lo] = box.lower[lo]
        x[hi] = box.upper[hi]
    return x


def repair_states(sys: DiscreteSystem, dec: Decision, X: BoxSet, inputs=None) -> Decision:
    """Shift disturbances so every rolled state lies in ``X`` (additive systems only).

    Where ``x_{k+1} = f_n(x_k) + omega_k`` leaves the box, ``omega_k`` is
    replaced by ``p_X(x_{k+1}) - f_n(x_k)`` and nudged until the floating
    point rollout lands inside the box exactly.
    """
    if X.is_unbounded or dec.horizon == 0:
        return dec
    if not sys.additive_disturbance:
        return dec
    inputs = _inputs_for(sys, inputs, dec.horizon)
    omegas = dec.omegas.copy()
    x = dec.chi
    changed = False
    for k in range(dec.horizon):
        fn = sys.f_n(x, inputs[k])
        nxt = fn + omegas[k]
        if not X.contains(nxt):
            target = X.project(nxt)
            om = target - fn
            nxt = fn + om
            for _ in range(8):
                below, above = nxt < X.lower, nxt > X.upper
                if not (below.any() or above.any()):
                    break
                om[below] = np.nextafter(om[below], np.inf)
                om[above] = np.nextafter(om[above], -np.inf)
                nxt = fn + om
            omegas[k] = om
            changed = True
        x = nxt
    if not changed:
        return dec
    return Decision(dec.chi.copy(), omegas, dec.nus.copy())


def candidate_nominal(z_at_prior, horizon: int, project: bool, X: BoxSet, sys: Optional[DiscreteSystem] = None, inputs=None) -> Decision:
    """``(p_X(z), 0, 0)`` (or ``(z, 0, 0)`` unprojected)."""
    z = np.asarray(z_at_prior, dtype=float)
    n_w = sys.n_w if sys is not None else z.shape[0]
    n_v = sys.n_v if sys is not None else 1
    chi = X.project(z) if project else z.copy()
    dec = Decision.zeros(chi, horizon, n_w, n_v)
    if project and sys is not None:
        dec = repair_states(sys, dec, X, inputs)
    return dec


def candidate_observer(z_seq, injections, project: bool, X: BoxSet, sys: DiscreteSystem, inputs=None) -> Decision:
    """Decision reproducing the observer trajectory ``z_seq`` (N_eff+1 states).

    Unprojected: ``omega_k = L_k`` (the injection terms).  Projected: every
    state is replaced by its projection and ``omega_k = p_X(z_{k+1}) - f_n(p_X(z_k))``.
    """
    if not sys.additive_disturbance:
        raise ConfigurationError("the observer candidate needs additive disturbances")
    z_seq = np.asarray(z_seq, dtype=float)
    n = z_seq.shape[0] - 1
    inputs = _inputs_for(sys, inputs, n)
    if not project:
        inj = np.asarray(injections, dtype=float).reshape(n, sys.n_x)
        return Decision(z_seq[0].copy(), inj.copy(), np.zeros((n, sys.n_v)))
    pz = X.project(z_seq)
    omegas = np.empty((n, sys.n_w))
    for k in range(n):
        omegas[k] = pz[k + 1] - sys.f_n(pz[k], inputs[k])
    dec = Decision(pz[0].copy(), omegas, np.zeros((n, sys.n_v)))
    return _nudge_exact(sys, dec, pz, X, inputs)


def _nudge_exact(sys, dec, targets, X, inputs):
    """Fix last-bit rounding so rolled states stay inside ``X``."""
    return repair_states(sys, dec, X, inputs)


@dataclass(frozen=True, eq=False)
class ConstraintSets:
    """Sets enforced on the decision: chi and rolled states in X, omega in W, nu in V."""

    X: BoxSet
    W: BoxSet
    V: BoxSet


def is_feasible(sys: DiscreteSystem, dec: Decision, tol: float = 0.0, sets: Optional[ConstraintSets] = None, inputs=None) -> bool:
    sets = sets or ConstraintSets(sys.state_set, sys.disturbance_set, sys.noise_set)
    if not (np.all(np.isfinite(dec.chi)) and np.all(np.isfinite(dec.omegas)) and np.all(np.isfinite(dec.nus))):
        return False
    if dec.horizon and not (sets.W.contains(dec.omegas, tol) and sets.V.contains(dec.nus, tol)):
        return False
    if sets.X.is_unbounded:
        return True
    try:
        states, _ = rollout(sys, dec, inputs)
    except NumericalOverflowError:
        return False
    return sets.X.contains(states, tol)


def accept(candidate: Decision, proposal: Optional[Decision], cost_fn: Callable, sys: DiscreteSystem, tol: float = 0.0, sets=None, inputs=None):
    """The cost-decrease guard.

    Returns ``(decision, accepted)``: the proposal when it is feasible and
    ``cost(proposal) <= cost(candidate)``, else the candidate.
    """
    if not is_feasible(sys, candidate, tol, sets, inputs):
        raise ContractViolation("candidate solution is infeasible")
    if proposal is None:
        return candidate, False
    if not is_feasible(sys, proposal, tol, sets, inputs):
        return candidate, False
    try:
        cp = cost_fn(proposal)
    except NumericalOverflowError:
        return candidate, False
    if np.isfinite(cp) and cp <= cost_fn(candidate):
        return proposal, True
    return candidate, False


# --------------------------------------------------------------------------
# estimator


@dataclass(frozen=True)
class MheConfig:
    N: int = 3
    T: Optional[int] = 5
    cost_kind: str = "quadratic"
    candidate_kind: str = "nominal"
    project: bool = True
    weights: Optional[CostWeights] = None
    solver: object = None  # solver.SolverSettings
    warm_start: str = "candidate"
    constrain_w: bool = False

    def __post_init__(self):
        if self.N < 1:
            raise ConfigurationError("N must be >= 1")
        if self.T is not None and self.T <= self.N:
            raise ConfigurationError("T must exceed N (use T=None for a never re-initialized observer)")
        if self.cost_kind not in COST_KINDS:
            raise ConfigurationError(f"cost_kind must be one of {COST_KINDS}")
        if self.candidate_kind not in CANDIDATE_KINDS:
            raise ConfigurationError(f"candidate_kind must be one of {CANDIDATE_KINDS}")
        if self.warm_start not in ("candidate", "shifted"):
            raise ConfigurationError("warm_start must be 'candidate' or 'shifted'")
        if self.candidate_kind == "observer" and self.constrain_w:
            raise ConfigurationError("the observer candidate needs an unbounded disturbance set")
        if self.weights is not None:
            if self.cost_kind == "discounted" and (self.weights.a != 1 or self.weights.eta_bar is None):
                raise ConfigurationError("the discounted cost needs a = 1 and eta_bar")


@dataclass
class StepResult:
    t: int
    x_hat: np.ndarray
    z_prior: np.ndarray
    eps_prior: float
    cost_candidate: float
    cost_accepted: float
    iterations: int
    accepted_proposal: bool
    decision: Decision
    wall_us: float = 0.0


class MovingHorizonEstimator:
    """Time-recursive suboptimal MHE.

    Call :meth:`estimate_step` once per time instant with the measurement of
    the previous instant (``None`` at ``t = 0``).
    """

    def __init__(self, sys: DiscreteSystem, observer: OutputInjectionObserver, config: MheConfig, x_bar0, weights: Optional[CostWeights] = None):
        from .solver import SolverSettings

        self.sys = sys
        self.obs = observer
        self.config = config
        if weights is None:
            weights = config.weights
        if weights is None:
            raise ConfigurationError("cost weights are required")
        if config.cost_kind == "discounted" and (weights.a != 1 or weights.eta_bar is None):
            raise ConfigurationError("the discounted cost needs a = 1 and eta_bar")
        if config.cost_kind == "quadratic" and weights.eta_bar is not None:
            weights = replace(weights, eta_bar=None)
        if config.candidate_kind == "observer" and not sys.additive_disturbance:
            raise ConfigurationError("the observer candidate needs additive disturbances")
        self.weights = weights
        self.settings = config.solver if config.solver is not None else SolverSettings()
        self.sets = ConstraintSets(
            X=sys.state_set if config.project else BoxSet.unbounded(sys.n_x),
            W=sys.disturbance_set if config.constrain_w else BoxSet.unbounded(sys.n_w),
            V=sys.noise_set,
        )
        self.x_bar0 = np.asarray(x_bar0, dtype=float)
        self.t = 0
        self._cap = 64
        self._xhat = np.empty((self._cap + 1, sys.n_x))
        self._y = np.empty((self._cap, sys.n_y))
        self._u = np.empty((self._cap, sys.n_u))
        self._started = False
        # per call: (first absolute time, |eps| of each rolled observer state)
        self.eps_log: list = []
        self._persistent = np.empty((self._cap + 1, sys.n_x))
        self._n_persistent = 0
        self._prev: Optional[tuple] = None
        # optional callback(view, candidate) seeing each problem before it is solved
        self.on_problem = None

    @property
    def x_hats(self) -> np.ndarray:
        return self._xhat[: self.t + 1] if self._started else self._xhat[:0]

    def _grow(self):
        self._cap *= 2
        for name, extra in (("_xhat", 1), ("_y", 0), ("_u", 0), ("_persistent", 1)):
            old = getattr(self, name)
            new = np.empty((self._cap + extra, old.shape[1]))
            new[: old.shape[0]] = old
            setattr(self, name, new)

    # -- helpers ---------------------------------------------------------
    def window(self) -> Window:
        t = self.t
        T = self.config.T
        Teff = t if T is None else min(t, T)
        return Window(t, self.config.N, T, self._u[t - Teff : t], self._y[t - Teff : t], self._xhat[t - Teff].copy())

    def _observer_states(self, win: Window, steps: int, with_injections: bool):
        sys, obs = self.sys, self.obs
        Teff = win.T_eff
        if self.config.T is None:
            # never re-initialized: one continuous rollout from xbar_0, extended incrementally
            k = self._n_persistent - 1
            if k < self.t:
                ext = reinit_and_roll(obs, sys, self._persistent[k], self._u[k : self.t], self._y[k : self.t], self.t - k)
                self._persistent[k + 1 : self.t + 1] = ext[1:]
                self._n_persistent = self.t + 1
            zs = self._persistent[: steps + 1].copy()
        else:
            zs = reinit_and_roll(obs, sys, win.x_hat_past, win.inputs, win.outputs, steps)
        if not with_injections:
            return zs, None
        n = win.N_eff
        inj = np.empty((n, sys.n_x))
        base = Teff - n
        for k in range(n):
            u = win.inputs[base + k]
            inj[k] = obs.injection(win.outputs[base + k] - sys.h_n(zs[base + k], u))
        return zs, inj

    def _shifted_start(self, win: Window, candidate: Decision) -> Decision:
        from .solver import warm_start_shift

        if self._prev is None:
            return candidate
        prev_dec, prev_t = self._prev
        return warm_start_shift(prev_dec, prev_t, win, self.sys, "shifted", candidate=candidate, sets=self.sets)

    def initial_guess(self, view, candidate: Decision, cost_candidate: Optional[float] = None) -> Decision:
        """Solver start: the candidate, or in shifted mode the shifted previous
        solution when it is feasible and no costlier than the candidate."""
        if self.config.warm_start != "shifted":
            return candidate
        shifted = self._shifted_start(view.window, candidate)
        if cost_candidate is None:
            cost_candidate = view.cost_of(candidate)
        if shifted is not candidate and view.feasible(shifted) and view.cost_of(shifted) <= cost_candidate:
            return shifted
        return candidate

    # -- main step -------------------------------------------------------
    def estimate_step(self, u_prev=None, y_prev=None) -> StepResult:
        """Advance to the next time instant; returns the estimate and diagnostics."""
        from . import solver as slv

        start = time.perf_counter()
        sys, cfg = self.sys, self.config
        if not self._started:
            self._started = True
            self._xhat[0] = self.x_bar0
            self._persistent[0] = self.x_bar0
            self._n_persistent = 1
            z0 = self.x_bar0
            _, eps0 = prior_from_observer(z0, cfg.project, sys.state_set)
            self.eps_log.append((0, np.array([np.linalg.norm(eps0)])))
            res = StepResult(0, self.x_bar0.copy(), z0.copy(), float(np.linalg.norm(eps0)), 0.0, 0.0, 0, False,
                             Decision.zeros(self.x_bar0, 0, sys.n_w, sys.n_v))
            res.wall_us = (time.perf_counter() - start) * 1e6
            return res
        if y_prev is None:
            raise ConfigurationError("a measurement is required for t >= 1")
        if self.t + 1 > self._cap:
            self._grow()
        self._y[self.t] = np.atleast_1d(np.asarray(y_prev, dtype=float))
        self._u[self.t] = np.zeros(sys.n_u) if u_prev is None else np.asarray(u_prev, dtype=float)
        self.t += 1
        win = self.window()
        n, Teff = win.N_eff, win.T_eff
        obs_path = cfg.candidate_kind == "observer"
        steps = Teff if obs_path else Teff - n
        zs, inj = self._observer_states(win, steps, obs_path)

        # projection errors of the rolled observer states, keyed by absolute time
        X = sys.state_set
        if cfg.project:
            eps = np.linalg.norm(zs - X.project(zs), axis=1)
        else:
            eps = np.zeros(zs.shape[0])
        self.eps_log.append((self.t - Teff, eps))

        z_prior = zs[Teff - n]
        prior, eps_prior = prior_from_observer(z_prior, cfg.project, X)
        ins = win.stage_inputs
        if obs_path:
            candidate = candidate_observer(zs[Teff - n :], inj, cfg.project, X, sys, ins)
        else:
            candidate = candidate_nominal(z_prior, n, cfg.project, X, sys, ins)

        view = slv.NlpView(sys, win, prior, self.weights, cfg.cost_kind, self.sets)
        cost_fn = view.cost_of
        cost_cand = cost_fn(candidate)
        if self.on_problem is not None:
            self.on_problem(view, candidate)
        init = self.initial_guess(view, candidate, cost_cand)
        iters = 0
        proposal = None
        if self.settings.budget > 0:
            try:
                proposal, info = slv.solve(view, init, self.settings)
                iters = info.iterations
            except (NumericalOverflowError, np.linalg.LinAlgError, FloatingPointError):
                proposal = None
        chosen, took = accept(candidate, proposal, cost_fn, sys, 0.0, self.sets, ins)
        cost_acc = cost_cand if chosen is candidate else cost_fn(chosen)
        states, _ = rollout(sys, chosen, ins)
        x_hat = states[-1].copy()
        if cfg.project:
            # rolled states are inside X exactly (see repair_states); the clamp is a no-op guard
            x_hat = np.minimum(np.maximum(x_hat, X.lower), X.upper)
        self._xhat[self.t] = x_hat
        self._prev = (chosen, self.t)
        res = StepResult(
            self.t, x_hat, z_prior.copy(), float(np.linalg.norm(eps_prior)), cost_cand, cost_acc, iters, took, chosen
        )
        res.wall_us = (time.perf_counter() - start) * 1e6
        return res
