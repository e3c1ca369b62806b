"""Fixed-step simulation of plants under hold or feedback inputs.

Plants are stateful simulation entities positioned at a time t with an
integration state; normal-form plants append their output jet to a history
buffer so operators with memory can look back.  Integration is classical
RK4 with steps aligned to the zero-order-hold grid of the input.

The funnel feedback law implemented here cancels the plant drift and keeps
the norm ratio of the highest chained error to its funnel radius constant;
it doubles as the warm-start generator for the optimal control solver and
as a standalone baseline controller.
"""

from __future__ import annotations

import bisect
import math
from dataclasses import dataclass

import numpy as np

from .errchain import chain_matrix, error_derivative_row
from .errors import PreconditionViolation, SingularGainError
from .funnel import FunnelChain
from .systems import ReferenceSignal, RelativeDegreeSystem, StateSpaceSystem

__all__ = [
    "ControlSignal",
    "Trajectory",
    "JetHistory",
    "StateSpacePlant",
    "NormalFormPlant",
    "make_plant",
    "integrate_open_loop",
    "FeedbackLaw",
    "feasibility_feedback",
    "feedback_rollout",
    "zoh_feedback_rollout",
    "rollout_jets_batch",
]

BLOWUP_NORM = 1e8


@dataclass(frozen=True)
class ControlSignal:
    """Zero-order-hold input: values[i] is applied on [t_start + i*step, + step)."""

    t_start: float
    step: float
    values: np.ndarray
    saturation: float | None = None

    def __post_init__(self):
        vals = np.atleast_2d(np.asarray(self.values, dtype=float))
        if vals.ndim != 2:
            raise ValueError("control values must form an (N, m) array")
        object.__setattr__(self, "values", vals)
        if not self.step > 0.0:
            raise ValueError("ZOH step must be positive")
        if self.saturation is not None:
            if not self.saturation > 0.0:
                raise ValueError("saturation level must be positive")
            if np.max(np.abs(vals)) > self.saturation + 1e-12:
                raise ValueError("control values exceed the saturation level")

    @property
    def m(self) -> int:
        return self.values.shape[1]

    @property
    def t_end(self) -> float:
        return self.t_start + self.step * self.values.shape[0]

    def index_at(self, t: float) -> int:
        idx = int(math.floor((t - self.t_start) / self.step + 1e-9))
        return min(max(idx, 0), self.values.shape[0] - 1)

    def value_at(self, t: float) -> np.ndarray:
        if t < self.t_start - 1e-9 or t > self.t_end + 1e-9:
            raise ValueError(f"time {t} outside control coverage [{self.t_start}, {self.t_end}]")
        return self.values[self.index_at(t)]


@dataclass
class Trajectory:
    """Simulation record on a uniform grid."""

    grid: np.ndarray
    state: np.ndarray
    output_jet: np.ndarray
    input: np.ndarray
    status: str = "completed"

    def __len__(self):
        return self.grid.size


class JetHistory:
    """Output-jet history: an initial segment plus appended integration samples.

    Queries at s <= t0 use the supplied initial segment; later queries use
    cubic Lagrange interpolation over the four nearest stored samples.
    Queries beyond the newest sample raise PreconditionViolation.
    """

    def __init__(self, t0: float, jet0: np.ndarray, initial_segment=None):
        jet0 = np.asarray(jet0, dtype=float).ravel()
        self.t0 = float(t0)
        self.segment = initial_segment
        self.ts = [self.t0]
        self.jets = [jet0.copy()]

    def append(self, t: float, jet: np.ndarray):
        if t <= self.ts[-1]:
            raise ValueError("history samples must be appended in increasing time order")
        self.ts.append(float(t))
        self.jets.append(np.asarray(jet, dtype=float).ravel().copy())

    def latest(self) -> float:
        return self.ts[-1]

    def clone(self) -> "JetHistory":
        out = JetHistory.__new__(JetHistory)
        out.t0 = self.t0
        out.segment = self.segment
        out.ts = list(self.ts)
        out.jets = [j.copy() for j in self.jets]
        return out

    def __call__(self, s: float) -> np.ndarray:
        if s <= self.t0 + 1e-12:
            if self.segment is not None:
                return np.asarray(self.segment(s), dtype=float).ravel()
            return self.jets[0]
        if s > self.ts[-1] + 1e-9:
            raise PreconditionViolation(
                f"history queried at {s} beyond newest sample {self.ts[-1]}"
            )
        ts = self.ts
        idx = bisect.bisect_left(ts, s)
        if idx < len(ts) and ts[idx] == s:
            return self.jets[idx]
        lo = max(0, min(idx - 2, len(ts) - 4))
        hi = min(len(ts), lo + 4)
        out = np.zeros_like(self.jets[0])
        for j in range(lo, hi):
            w = 1.0
            for l in range(lo, hi):
                if l != j:
                    w *= (s - ts[l]) / (ts[j] - ts[l])
            out += w * self.jets[j]
        return out


class StateSpacePlant:
    """Simulation wrapper for a StateSpaceSystem positioned at (t, x)."""

    def __init__(self, system: StateSpaceSystem, t0: float, x0):
        self.system = system
        self.m = system.m
        self.r = system.r
        self.state_dim = system.n
        self.sigma = 0.0
        self.supports_batch = system.vectorized
        self.t = float(t0)
        self.state = np.asarray(x0, dtype=float).reshape(system.n).copy()
        self.history = None

    def clone(self) -> "StateSpacePlant":
        return StateSpacePlant(self.system, self.t, self.state)

    def rhs(self, t, x, u):
        sys = self.system
        if self.m == 1:
            return sys.drift(x) + sys.input_map(x)[..., 0] * float(u[0])
        return sys.drift(x) + sys.input_map(x) @ u

    def rhs_batch(self, t, X, U):
        sys = self.system
        if self.m == 1:
            return sys.drift(X) + sys.input_map(X)[..., 0] * U
        return sys.drift(X) + np.einsum("...ij,...j->...i", sys.input_map(X), U)

    def output_jet(self, x=None):
        x = self.state if x is None else x
        return np.asarray(self.system.output_jet(x), dtype=float).ravel()

    def output_jet_batch(self, X):
        return np.asarray(self.system.output_jet(X), dtype=float)

    def yr_parts(self, t, x):
        if self.system.yr_parts is None:
            raise PreconditionViolation(
                "state-space plant lacks a highest-derivative decomposition (yr_parts)"
            )
        fval, gmat = self.system.yr_parts(x)
        return np.asarray(fval, dtype=float).reshape(self.m), np.atleast_2d(
            np.asarray(gmat, dtype=float)
        )

    def advance(self, t, state):
        self.t = float(t)
        self.state = np.asarray(state, dtype=float)


class NormalFormPlant:
    """Simulation wrapper for a RelativeDegreeSystem.

    The integration state stacks the flat output jet and the operator's
    internal state.  When the operator has memory, a jet history buffer is
    maintained; the initial segment must cover [t0 - sigma, t0].
    """

    def __init__(self, system: RelativeDegreeSystem, t0: float, xi0, eta0=None, initial_segment=None):
        self.system = system
        self.m = system.m
        self.r = system.r
        self._rm = system.r * system.m
        op_dim = system.T.state_dim
        self.state_dim = self._rm + op_dim
        self.sigma = system.sigma
        self.supports_batch = system.vectorized and system.sigma == 0.0
        self.t = float(t0)
        xi0 = np.asarray(xi0, dtype=float).reshape(self._rm)
        if op_dim:
            eta = system.T.initial_state() if eta0 is None else np.asarray(eta0, dtype=float)
            self.state = np.concatenate([xi0, eta.reshape(op_dim)])
        else:
            self.state = xi0.copy()
        self.history = (
            JetHistory(self.t, xi0, initial_segment) if system.sigma > 0.0 else None
        )

    def clone(self) -> "NormalFormPlant":
        out = NormalFormPlant.__new__(NormalFormPlant)
        out.system = self.system
        out.m = self.m
        out.r = self.r
        out._rm = self._rm
        out.state_dim = self.state_dim
        out.sigma = self.sigma
        out.supports_batch = self.supports_batch
        out.t = self.t
        out.state = self.state.copy()
        out.history = self.history.clone() if self.history is not None else None
        return out

    def _operator_value(self, t, xi, eta):
        T = self.system.T
        return T.evaluate(t, xi, self.history, eta if T.state_dim else None)

    def rhs(self, t, x, u):
        rm = self._rm
        xi = x[:rm]
        eta = x[rm:]
        w = self._operator_value(t, xi, eta)
        top = np.asarray(self.system.f(w), dtype=float).reshape(self.m) + np.atleast_2d(
            np.asarray(self.system.g(w), dtype=float)
        ) @ u
        out = np.empty_like(x)
        out[: rm - self.m] = xi[self.m :]
        out[rm - self.m : rm] = top
        if eta.size:
            out[rm:] = self.system.T.state_derivative(t, xi, eta)
        return out

    def rhs_batch(self, t, X, U):
        rm = self._rm
        xi = X[:, :rm]
        eta = X[:, rm:]
        T = self.system.T
        w = T.evaluate(t, xi, None, eta if T.state_dim else None)
        gmat = np.asarray(self.system.g(w), dtype=float)
        top = np.asarray(self.system.f(w), dtype=float) + np.einsum("...ij,...j->...i", gmat, U)
        out = np.empty_like(X)
        out[:, : rm - self.m] = xi[:, self.m :]
        out[:, rm - self.m : rm] = top
        if eta.shape[1]:
            out[:, rm:] = T.state_derivative(t, xi, eta)
        return out

    def output_jet(self, x=None):
        x = self.state if x is None else x
        return x[: self._rm]

    def output_jet_batch(self, X):
        return X[:, : self._rm]

    def yr_parts(self, t, x):
        xi = x[: self._rm]
        eta = x[self._rm :]
        w = self._operator_value(t, xi, eta)
        fval = np.asarray(self.system.f(w), dtype=float).reshape(self.m)
        gmat = np.atleast_2d(np.asarray(self.system.g(w), dtype=float))
        return fval, gmat

    def advance(self, t, state):
        self.t = float(t)
        self.state = np.asarray(state, dtype=float)
        if self.history is not None and t > self.history.latest():
            self.history.append(t, state[: self._rm])


def make_plant(system, t0: float, initial, eta0=None, initial_segment=None):
    """Position a system record as a simulation plant at time t0."""
    if isinstance(system, StateSpaceSystem):
        return StateSpacePlant(system, t0, initial)
    if isinstance(system, RelativeDegreeSystem):
        return NormalFormPlant(system, t0, initial, eta0=eta0, initial_segment=initial_segment)
    raise TypeError(f"unsupported system record {type(system).__name__}")


def _is_multiple(a: float, b: float, tol: float = 1e-9) -> bool:
    if b <= 0.0:
        return False
    ratio = a / b
    return abs(ratio - round(ratio)) <= tol * max(1.0, abs(ratio))


def _control_callable(control, m: int):
    if isinstance(control, ControlSignal):
        return control.value_at
    if callable(control):
        return lambda t: np.atleast_1d(np.asarray(control(t), dtype=float)).reshape(m)
    raise TypeError("control must be a ControlSignal or a callable of time")


def integrate_open_loop(plant, control, t_span, h: float) -> Trajectory:
    """RK4 trajectory of the plant under the given input over t_span.

    The step must divide the ZOH step and the span, so input discontinuities
    land on grid points.  Integration stops early with status 'blow-up' when
    the state norm exceeds 1e8 or turns non-finite.
    """
    t0, t1 = float(t_span[0]), float(t_span[1])
    if not h > 0.0:
        raise ValueError("integration step must be positive")
    if t1 <= t0:
        raise ValueError("empty integration span")
    if abs(plant.t - t0) > 1e-9:
        raise ValueError(f"plant is positioned at t = {plant.t}, span starts at {t0}")
    n_steps = round((t1 - t0) / h)
    if not _is_multiple(t1 - t0, h):
        raise ValueError(f"span length {t1 - t0} is not a multiple of the step {h}")
    if isinstance(control, ControlSignal):
        if not _is_multiple(control.step, h):
            raise ValueError(
                f"step {h} does not divide the ZOH interval {control.step}"
            )
        if not _is_multiple(t0 - control.t_start, h):
            raise ValueError("control breakpoints are not aligned with the grid")
        if control.t_start > t0 + 1e-9 or control.t_end < t1 - 1e-9:
            raise ValueError("control does not cover the integration span")
    if plant.sigma > 0.0 and h > plant.sigma + 1e-12:
        raise ValueError("integration step must not exceed the operator memory length")
    u_of = _control_callable(control, plant.m)

    grid = t0 + h * np.arange(n_steps + 1)
    grid[-1] = t1
    states = np.empty((n_steps + 1, plant.state_dim))
    jets = np.empty((n_steps + 1, plant.r * plant.m))
    inputs = np.empty((n_steps + 1, plant.m))
    x = plant.state.copy()
    states[0] = x
    jets[0] = plant.output_jet(x)
    status = "completed"
    count = n_steps + 1
    rhs = plant.rhs
    with np.errstate(over="ignore", invalid="ignore"):
        for i in range(n_steps):
            t = grid[i]
            u = np.asarray(u_of(t), dtype=float)
            inputs[i] = u
            k1 = rhs(t, x, u)
            xk = x + (0.5 * h) * k1
            k2 = rhs(t + 0.5 * h, xk, u if isinstance(control, ControlSignal) else u_of(t + 0.5 * h))
            xk = x + (0.5 * h) * k2
            k3 = rhs(t + 0.5 * h, xk, u if isinstance(control, ControlSignal) else u_of(t + 0.5 * h))
            xk = x + h * k3
            k4 = rhs(t + h, xk, u if isinstance(control, ControlSignal) else u_of(t + h))
            x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            # NaN fails the comparison too, so this covers non-finite states
            if not float(np.max(np.abs(x))) <= BLOWUP_NORM:
                status = "blow-up"
                count = i + 1
                break
            states[i + 1] = x
            jets[i + 1] = plant.output_jet(x)
            plant.advance(grid[i + 1], x)
    if status == "completed":
        inputs[n_steps] = np.asarray(u_of(grid[-1] - 1e-12), dtype=float)
        plant.advance(t1, x)
    return Trajectory(
        grid=grid[:count],
        state=states[:count],
        output_jet=jets[:count],
        input=inputs[:count],
        status=status,
    )


class FeedbackLaw:
    """Funnel feedback: cancels the drift and locks the top error ratio.

    u(t) = g^{-1} (-f + y_ref^(r)(t) - sum_j k_j e_j^{(r-j)}(t)
                   + e_r(t) * theta'(t)/theta(t))

    All derivative terms are exact linear functions of the current jet, with
    coefficients assembled once at construction.
    """

    def __init__(self, chain: FunnelChain, gains, yref: ReferenceSignal):
        self.chain = chain
        self.gains = np.asarray(gains, dtype=float)
        self.yref = yref
        r = chain.r
        if self.gains.size != r - 1:
            raise ValueError(f"need {r - 1} gains, got {self.gains.size}")
        self.r = r
        # row i gives e_{i+1} as ascending jet-block coefficients
        self.rows = chain_matrix(self.gains, r, 1) if r > 1 else np.eye(1)
        correction = np.zeros(r)
        for j in range(1, r):
            correction += self.gains[j - 1] * error_derivative_row(self.gains, j, r - j)
        self.correction_row = correction

    def error_matrix(self, t, jet_mat):
        return self.rows @ (jet_mat - self.yref.jet(t))

    def __call__(self, t, plant, x, check: bool = True):
        jet_mat = plant.output_jet(x).reshape(self.r, plant.m)
        ext = self.yref.jet_ext
        if ext is not None:
            ref = ext(t)
            zeta = jet_mat - ref[: self.r]
            ref_high = ref[self.r]
        else:
            zeta = jet_mat - self.yref.jet(t)
            ref_high = self.yref.highest(t)
        theta = self.chain.theta
        theta_t = float(theta.value(t))
        if check:
            evals = self.rows @ zeta
            for i, member in enumerate(self.chain.members):
                radius = theta_t if i == self.r - 1 else float(member.value(t))
                if not float(np.linalg.norm(evals[i])) < radius:
                    raise PreconditionViolation(
                        f"jet leaves funnel {i + 1} at t = {t}: "
                        f"|e_{i + 1}| = {float(np.linalg.norm(evals[i]))} >= {radius}"
                    )
            top = evals[-1]
        else:
            top = self.rows[-1] @ zeta
        fval, gmat = plant.yr_parts(t, x)
        target = (
            -fval
            + ref_high
            - self.correction_row @ zeta
            + top * (float(theta.derivative(t)) / theta_t)
        )
        if gmat.shape == (1, 1):
            gv = float(gmat[0, 0])
            if abs(gv) < 1e-12:
                raise SingularGainError("scalar input gain is numerically zero", math.inf)
            return target / gv
        cond = float(np.linalg.cond(gmat))
        if not cond < 1e12:
            raise SingularGainError(
                f"input gain condition number {cond:.3e} too large", condition_number=cond
            )
        return np.linalg.solve(gmat, target)


def feasibility_feedback(plant, chain: FunnelChain, gains, yref: ReferenceSignal, t, x=None):
    """Evaluate the funnel feedback at one point (with membership check)."""
    x = plant.state if x is None else np.asarray(x, dtype=float)
    return FeedbackLaw(chain, gains, yref)(t, plant, x, check=True)


def feedback_rollout(
    plant,
    chain: FunnelChain,
    gains,
    yref: ReferenceSignal,
    t_span,
    h: float,
    zoh_step: float | None = None,
):
    """Closed-loop trajectory under the funnel feedback law.

    The feedback is evaluated at every integrator stage (exact law); the
    returned ControlSignal holds its samples at the ZOH grid for warm-start
    use.  Funnel membership is verified at every grid point afterwards.
    """
    t0, t1 = float(t_span[0]), float(t_span[1])
    law = FeedbackLaw(chain, gains, yref)
    if abs(plant.t - t0) > 1e-9:
        raise ValueError(f"plant is positioned at t = {plant.t}, span starts at {t0}")
    n_steps = round((t1 - t0) / h)
    if not _is_multiple(t1 - t0, h):
        raise ValueError(f"span length {t1 - t0} is not a multiple of the step {h}")
    step = h if zoh_step is None else float(zoh_step)
    if not _is_multiple(step, h):
        raise ValueError("ZOH sampling step must be a multiple of the integration step")
    if plant.sigma > 0.0 and h > plant.sigma + 1e-12:
        raise ValueError("integration step must not exceed the operator memory length")
    substeps = round(step / h)

    grid = t0 + h * np.arange(n_steps + 1)
    grid[-1] = t1
    states = np.empty((n_steps + 1, plant.state_dim))
    jets = np.empty((n_steps + 1, plant.r * plant.m))
    inputs = np.empty((n_steps + 1, plant.m))
    zoh_values = []
    x = plant.state.copy()
    states[0] = x
    jets[0] = plant.output_jet(x)
    rhs = plant.rhs

    def closed_rhs(t, x_stage):
        u = np.atleast_1d(law(t, plant, x_stage, check=False))
        return rhs(t, x_stage, u), u

    status = "completed"
    count = n_steps + 1
    for i in range(n_steps):
        t = grid[i]
        k1, u0 = closed_rhs(t, x)
        inputs[i] = u0
        if i % substeps == 0:
            zoh_values.append(u0)
        k2, _ = closed_rhs(t + 0.5 * h, x + (0.5 * h) * k1)
        k3, _ = closed_rhs(t + 0.5 * h, x + (0.5 * h) * k2)
        k4, _ = closed_rhs(t + h, x + h * k3)
        x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        # NaN fails the comparison too, so this covers non-finite states
        if not float(np.max(np.abs(x))) <= BLOWUP_NORM:
            status = "blow-up"
            count = i + 1
            break
        states[i + 1] = x
        jets[i + 1] = plant.output_jet(x)
        plant.advance(grid[i + 1], x)
    if status == "completed":
        inputs[n_steps] = np.atleast_1d(law(t1, plant, x, check=False))
        plant.advance(t1, x)

    trajectory = Trajectory(
        grid=grid[:count],
        state=states[:count],
        output_jet=jets[:count],
        input=inputs[:count],
        status=status,
    )
    _verify_membership_on_grid(trajectory, chain, law, yref)
    control = ControlSignal(t_start=t0, step=step, values=np.asarray(zoh_values))
    return trajectory, control


def zoh_feedback_rollout(
    plant,
    chain: FunnelChain,
    gains,
    yref: ReferenceSignal,
    t_span,
    zoh_step: float,
    h: float,
    saturation: float | None = None,
    check: bool = False,
):
    """Receding zero-order-hold application of the funnel feedback.

    At each knot the law is evaluated on the running trajectory, optionally
    clamped to the saturation box, and held for one interval.  The loop is
    open between knots, so the conservation property of the continuous law
    does not transfer; this is the implementable sampled controller and the
    solver's recovery start.
    """
    t0, t1 = float(t_span[0]), float(t_span[1])
    law = FeedbackLaw(chain, gains, yref)
    if abs(plant.t - t0) > 1e-9:
        raise ValueError(f"plant is positioned at t = {plant.t}, span starts at {t0}")
    step = float(zoh_step)
    n_knots = round((t1 - t0) / step)
    if not _is_multiple(t1 - t0, step):
        raise ValueError(f"span length {t1 - t0} is not a multiple of the ZOH step {step}")
    if not _is_multiple(step, h):
        raise ValueError("integration step must divide the ZOH interval")
    if plant.sigma > 0.0 and h > plant.sigma + 1e-12:
        raise ValueError("integration step must not exceed the operator memory length")
    substeps = round(step / h)
    n_steps = n_knots * substeps
    grid = t0 + h * np.arange(n_steps + 1)
    grid[-1] = t1
    states = np.empty((n_steps + 1, plant.state_dim))
    jets = np.empty((n_steps + 1, plant.r * plant.m))
    inputs = np.empty((n_steps + 1, plant.m))
    values = np.empty((n_knots, plant.m))
    states[0] = plant.state
    jets[0] = plant.output_jet(plant.state)
    status = "completed"
    count = n_steps + 1
    knots_done = 0
    for i in range(n_knots):
        t_knot = float(grid[i * substeps])
        u = np.atleast_1d(law(t_knot, plant, plant.state, check=check))
        if saturation is not None:
            u = np.clip(u, -saturation, saturation)
        values[i] = u
        knots_done = i + 1
        hold = ControlSignal(
            t_start=t_knot, step=step, values=u.reshape(1, plant.m), saturation=saturation
        )
        seg = integrate_open_loop(plant, hold, (t_knot, t_knot + step), h)
        lo = i * substeps
        n_got = len(seg) - 1
        states[lo + 1 : lo + 1 + n_got] = seg.state[1:]
        jets[lo + 1 : lo + 1 + n_got] = seg.output_jet[1:]
        inputs[lo : lo + 1 + n_got] = u
        if seg.status != "completed":
            status = seg.status
            count = lo + 1 + n_got
            break
    if status == "completed":
        inputs[n_steps] = values[-1]
    trajectory = Trajectory(
        grid=grid[:count],
        state=states[:count],
        output_jet=jets[:count],
        input=inputs[:count],
        status=status,
    )
    control = ControlSignal(
        t_start=t0, step=step, values=values[:knots_done], saturation=saturation
    )
    return trajectory, control


def _verify_membership_on_grid(trajectory: Trajectory, chain: FunnelChain, law: FeedbackLaw, yref):
    r = chain.r
    m = trajectory.output_jet.shape[1] // r
    jets = trajectory.output_jet.reshape(len(trajectory), r, m)
    ref = yref.jet_array(trajectory.grid)
    zeta = (jets - ref).reshape(len(trajectory), r * m)
    rows_full = chain_matrix(law.gains, r, m) if r > 1 else np.eye(m)
    evals = zeta @ rows_full.T
    for i, member in enumerate(chain.members):
        norms = np.linalg.norm(evals[:, i * m : (i + 1) * m], axis=1)
        radii = np.asarray(member.value(trajectory.grid), dtype=float)
        bad = norms >= radii
        if np.any(bad):
            t_bad = float(trajectory.grid[np.argmax(bad)])
            raise PreconditionViolation(
                f"closed-loop trajectory leaves funnel {i + 1} at t = {t_bad}"
            )


def rollout_jets_batch(plant, values: np.ndarray, step: float, h: float):
    """Integrate a batch of ZOH controls on clones of a memoryless plant.

    ``values`` has shape (B, N, m); the rollout covers N*step from the
    plant's current time.  Returns (grid, jets (B, K, r*m), inputs_ok) where
    inputs_ok flags batch members that stayed finite and bounded.
    """
    if not plant.supports_batch or plant.sigma > 0.0:
        raise ValueError("batched rollout needs a memoryless vectorized plant")
    B, N, m = values.shape
    substeps = round(step / h)
    if not _is_multiple(step, h):
        raise ValueError(f"step {h} does not divide the ZOH interval {step}")
    n_steps = N * substeps
    t0 = plant.t
    grid = t0 + h * np.arange(n_steps + 1)
    X = np.broadcast_to(plant.state, (B, plant.state_dim)).copy()
    jets = np.empty((B, n_steps + 1, plant.r * plant.m))
    jets[:, 0] = plant.output_jet_batch(X)
    alive = np.ones(B, dtype=bool)
    rhs = plant.rhs_batch
    with np.errstate(over="ignore", invalid="ignore"):
        for i in range(n_steps):
            t = grid[i]
            U = values[:, i // substeps, :]
            k1 = rhs(t, X, U)
            k2 = rhs(t + 0.5 * h, X + (0.5 * h) * k1, U)
            k3 = rhs(t + 0.5 * h, X + (0.5 * h) * k2, U)
            k4 = rhs(t + h, X + h * k3, U)
            X = X + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            np.nan_to_num(X, copy=False, nan=np.inf)
            jets[:, i + 1] = plant.output_jet_batch(X)
        finite = np.all(np.isfinite(jets), axis=(1, 2))
        small = np.ones(B, dtype=bool)
        with np.errstate(invalid="ignore"):
            small = np.nanmax(np.abs(jets), axis=(1, 2)) <= BLOWUP_NORM
        alive = finite & small
    return grid, jets, alive
