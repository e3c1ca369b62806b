"""Finite-horizon optimal control with a funnel barrier stage cost.

The stage cost penalizes the highest chained tracking error through a
barrier that blows up at the funnel boundary, plus a quadratic input term.
The decision variable is the stacked zero-order-hold input over the
horizon, clamped componentwise to the saturation box.  The solver is
projected gradient descent with forward finite differences and halving
backtracking; a brute-force grid search over tiny decision spaces serves
as an independent reference.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .errchain import chain_matrix
from .errors import OcpInfeasibleError, PreconditionViolation
from .funnel import FunnelFunction
from .sim import ControlSignal, integrate_open_loop, rollout_jets_batch, zoh_feedback_rollout
from .systems import ReferenceSignal

__all__ = [
    "StageCost",
    "OcpSpec",
    "OcpSolution",
    "stage_cost",
    "cost_functional",
    "solve_ocp",
    "brute_force_ocp",
]

logger = logging.getLogger(__name__)

FD_RELATIVE_STEP = 1e-6
ARMIJO_CONSTANT = 1e-4
MAX_HALVINGS = 40
RESIDUAL_TOL = 1e-6


@dataclass(frozen=True)
class StageCost:
    """Barrier tracking cost: |e_r|^2 / (theta^2 - |e_r|^2) + lambda_u |u|^2."""

    theta: FunnelFunction
    lambda_u: float
    gains: np.ndarray

    def __post_init__(self):
        if not self.lambda_u >= 0.0:
            raise ValueError("input weight must be nonnegative")
        gains = np.asarray(self.gains, dtype=float)
        object.__setattr__(self, "gains", gains)

    @property
    def r(self) -> int:
        return self.gains.size + 1

    def top_error_block(self, m: int) -> np.ndarray:
        """Rows mapping a flat error jet to e_r, shape (m, r*m)."""
        r = self.r
        full = chain_matrix(self.gains, r, m) if r > 1 else np.eye(m)
        return full[(r - 1) * m :, :]


def stage_cost(t, xi, u, sc: StageCost) -> float:
    """Extended-real stage cost at one point; +inf from the boundary outward."""
    xi = np.asarray(xi, dtype=float).ravel()
    u = np.atleast_1d(np.asarray(u, dtype=float))
    m = xi.size // sc.r
    if m * sc.r != xi.size:
        raise ValueError(f"jet length {xi.size} is not a multiple of the chain length {sc.r}")
    er = sc.top_error_block(m) @ xi
    nrm2 = float(er @ er)
    theta_t = float(sc.theta.value(t))
    denom = theta_t * theta_t - nrm2
    if denom <= 0.0:
        return math.inf
    return nrm2 / denom + sc.lambda_u * float(u @ u)


@dataclass(frozen=True)
class OcpSpec:
    """Horizon discretization and solver budget for one OCP instance."""

    horizon: float
    control_step: float
    saturation: float
    ode_step: float
    quadrature: str = "trapezoid"
    max_iterations: int = 200
    max_evaluations: int = 20000
    stall_iterations: int = 8
    stall_tol: float = 1e-10

    def __post_init__(self):
        if not (self.horizon > 0 and self.control_step > 0 and self.ode_step > 0):
            raise ValueError("horizon, control step and ode step must be positive")
        if not self.saturation > 0:
            raise ValueError("saturation level must be positive")
        if self.quadrature != "trapezoid":
            raise ValueError(f"unsupported quadrature rule '{self.quadrature}'")
        for name, num, den in (
            ("control_step", self.horizon, self.control_step),
            ("ode_step", self.control_step, self.ode_step),
        ):
            ratio = num / den
            if abs(ratio - round(ratio)) > 1e-9 * max(1.0, ratio):
                raise ValueError(f"{name} must divide evenly (ratio {ratio})")

    @property
    def n_intervals(self) -> int:
        return round(self.horizon / self.control_step)

    @property
    def substeps(self) -> int:
        return round(self.control_step / self.ode_step)


@dataclass
class OcpSolution:
    control: ControlSignal
    cost: float
    status: str
    iterations: int
    residual: float = math.nan
    evaluations: int = 0


class _Workspace:
    """Shared precomputation for repeated cost evaluations at one start time."""

    def __init__(self, plant, sc: StageCost, spec: OcpSpec, yref: ReferenceSignal):
        self.plant = plant
        self.sc = sc
        self.spec = spec
        self.yref = yref
        self.m = plant.m
        self.r = plant.r
        self.N = spec.n_intervals
        self.t0 = plant.t
        n_steps = self.N * spec.substeps
        self.grid = self.t0 + spec.ode_step * np.arange(n_steps + 1)
        self.ref_flat = yref.jet_array(self.grid).reshape(n_steps + 1, self.r * self.m)
        self.theta_grid = np.asarray(sc.theta.value(self.grid), dtype=float)
        self.er_block = sc.top_error_block(self.m)
        w = np.full(n_steps + 1, spec.ode_step)
        w[0] = w[-1] = 0.5 * spec.ode_step
        self.weights = w
        self.evaluations = 0

    def barrier_costs(self, jets: np.ndarray) -> np.ndarray:
        """Trapezoid-integrated barrier for a (B, K, r*m) jet batch."""
        zeta = jets - self.ref_flat[None, :, :]
        er = zeta @ self.er_block.T
        nrm2 = np.sum(er * er, axis=-1)
        denom = self.theta_grid[None, :] ** 2 - nrm2
        with np.errstate(divide="ignore", invalid="ignore"):
            barrier = np.where(denom > 0.0, nrm2 / denom, np.inf)
        return barrier @ self.weights

    def input_costs(self, values: np.ndarray) -> np.ndarray:
        return self.sc.lambda_u * self.spec.control_step * np.sum(values * values, axis=(1, 2))

    def cost_batch(self, values: np.ndarray) -> np.ndarray:
        """Cost of each (N, m) control in a (B, N, m) stack."""
        B = values.shape[0]
        self.evaluations += B
        if self.plant.supports_batch:
            _, jets, alive = rollout_jets_batch(
                self.plant.clone(), values, self.spec.control_step, self.spec.ode_step
            )
            costs = self.barrier_costs(jets) + self.input_costs(values)
            costs = np.where(alive & np.isfinite(costs), costs, np.inf)
            return costs
        costs = np.empty(B)
        for b in range(B):
            costs[b] = self._cost_rollout(values[b])
        return costs

    def _cost_rollout(self, values: np.ndarray) -> float:
        control = ControlSignal(t_start=self.t0, step=self.spec.control_step, values=values)
        clone = self.plant.clone()
        traj = integrate_open_loop(
            clone, control, (self.t0, self.t0 + self.spec.horizon), self.spec.ode_step
        )
        if traj.status != "completed":
            logger.debug("rollout from t=%g aborted: %s", self.t0, traj.status)
            return math.inf
        cost = float(
            self.barrier_costs(traj.output_jet[None, :, :])[0]
            + self.input_costs(values[None, :, :])[0]
        )
        return cost if math.isfinite(cost) else math.inf

    def cost_single(self, values: np.ndarray) -> float:
        return float(self.cost_batch(values[None, :, :])[0])

    def feedback_values(self, chain, gains) -> np.ndarray:
        """Receding sampled funnel feedback over the horizon, in the box."""
        _, control = zoh_feedback_rollout(
            self.plant.clone(),
            chain,
            gains,
            self.yref,
            (self.t0, self.t0 + self.spec.horizon),
            self.spec.control_step,
            self.spec.ode_step,
            saturation=self.spec.saturation,
            check=False,
        )
        if control.values.shape[0] != self.N:
            raise PreconditionViolation("feedback rollout blew up inside the horizon")
        return control.values


def cost_functional(plant, history, control: ControlSignal, sc: StageCost, yref, spec: OcpSpec) -> float:
    """Cost of one control over the horizon starting at the plant's time.

    The plant carries its own history buffer; passing one explicitly is
    supported for operators with memory whose segment predates the plant.
    """
    if control.t_start > plant.t + 1e-9 or control.t_end < plant.t + spec.horizon - 1e-9:
        raise ValueError("control does not cover the optimization horizon")
    ws = _Workspace(plant, sc, spec, yref)
    i0 = control.index_at(plant.t)
    values = control.values[i0 : i0 + spec.n_intervals]
    if ws.plant.supports_batch:
        return ws.cost_single(values)
    return ws._cost_rollout(values)


def _fd_gradient(ws: _Workspace, d: np.ndarray, J: float, shape) -> np.ndarray:
    """Forward-difference gradient with a backward fallback at infinite probes.

    Probe points are not clamped: the cost is well defined outside the box
    and only iterates carry the constraint.
    """
    D = d.size
    du = FD_RELATIVE_STEP * np.maximum(1.0, np.abs(d))
    probes = d[None, :] + np.diag(du)
    costs = ws.cost_batch(probes.reshape((D,) + shape))
    grad = (costs - J) / du
    bad = ~np.isfinite(costs)
    if np.any(bad):
        idx = np.where(bad)[0]
        back = d[None, :].repeat(idx.size, axis=0)
        back[np.arange(idx.size), idx] = d[idx] - du[idx]
        back_costs = ws.cost_batch(back.reshape((idx.size,) + shape))
        grad[idx] = np.where(
            np.isfinite(back_costs), (J - back_costs) / du[idx], 0.0
        )
    return grad


def solve_ocp(
    plant,
    history,
    sc: StageCost,
    spec: OcpSpec,
    yref: ReferenceSignal,
    warm_start: ControlSignal | None = None,
    chain=None,
    gains=None,
) -> OcpSolution:
    """Projected-gradient solution of the funnel OCP from the plant's state.

    A missing or infeasible warm start is replaced by the sampled funnel
    feedback (clamped to the saturation box); if that also has infinite
    cost the problem is declared infeasible.  The returned cost never
    exceeds the starting cost.
    """
    ws = _Workspace(plant, sc, spec, yref)
    M = spec.saturation
    N, m = ws.N, ws.m
    shape = (N, m)

    recovered = False
    values = None
    if warm_start is not None:
        i0 = warm_start.index_at(ws.t0)
        given = warm_start.values[i0 : i0 + N]
        if given.shape[0] == N:
            candidate = np.clip(given, -M, M)
            J = ws.cost_single(candidate)
            if math.isfinite(J):
                values = candidate
            else:
                logger.debug("warm start at t=%g has infinite cost, regenerating", ws.t0)
                recovered = True
        else:
            recovered = True
    if values is None:
        if chain is None or gains is None:
            raise OcpInfeasibleError(
                "no finite-cost start available and no funnel chain to rebuild one",
                t_start=ws.t0,
            )
        try:
            candidate = ws.feedback_values(chain, gains)
        except PreconditionViolation as exc:
            theta0 = float(sc.theta.value(ws.t0))
            er0 = ws.er_block @ (plant.output_jet() - ws.ref_flat[0])
            raise OcpInfeasibleError(
                f"funnel feedback start could not be built: {exc}",
                t_start=ws.t0,
                margin=theta0 - float(np.linalg.norm(er0)),
            ) from exc
        J = ws.cost_single(candidate)
        if not math.isfinite(J):
            theta0 = float(sc.theta.value(ws.t0))
            er0 = ws.er_block @ (plant.output_jet() - ws.ref_flat[0])
            raise OcpInfeasibleError(
                "clamped funnel feedback start has infinite cost",
                t_start=ws.t0,
                margin=theta0 - float(np.linalg.norm(er0)),
            )
        values = candidate

    d = values.ravel().astype(float)
    status = "budget-exhausted"
    residual = math.nan
    alpha_init = 1.0
    it = 0
    stalled = 0
    prev_d = None
    prev_grad = None
    while it < spec.max_iterations:
        if ws.evaluations >= spec.max_evaluations:
            break
        grad = _fd_gradient(ws, d, J, shape)
        it += 1
        residual = float(np.max(np.abs(d - np.clip(d - grad, -M, M))))
        if residual <= RESIDUAL_TOL:
            status = "converged"
            break
        if prev_grad is not None:
            # spectral (Barzilai-Borwein) step seed, safeguarded to the
            # same bracket as the doubling fallback
            s = d - prev_d
            y = grad - prev_grad
            sy = float(s @ y)
            if sy > 0.0:
                alpha_init = max(min(float(s @ s) / sy, 1e6), 1e-12)
        prev_d = d
        prev_grad = grad
        accepted = False
        alpha = alpha_init
        halvings = 0
        while halvings <= MAX_HALVINGS and not accepted:
            batch = min(8, MAX_HALVINGS - halvings + 1)
            alphas = alpha * 0.5 ** np.arange(batch)
            cands = np.clip(d[None, :] - alphas[:, None] * grad[None, :], -M, M)
            moves = cands - d[None, :]
            decrease = -(moves @ grad)
            costs = ws.cost_batch(cands.reshape((batch,) + shape))
            ok = (
                np.isfinite(costs)
                & (costs <= J - ARMIJO_CONSTANT * decrease)
                & (np.max(np.abs(moves), axis=1) > 0.0)
            )
            if np.any(ok):
                pick = int(np.argmax(ok))
                new_J = float(costs[pick])
                improvement = J - new_J
                d = cands[pick]
                J = new_J
                alpha_init = max(min(alphas[pick] * 2.0, 1e6), 1e-12)
                accepted = True
                stalled = stalled + 1 if improvement <= spec.stall_tol * max(1.0, abs(J)) else 0
            else:
                halvings += batch
                alpha = alphas[-1] * 0.5
        logger.debug(
            "ocp t=%.4f iter=%d cost=%.9e residual=%.3e alpha=%.3e evals=%d",
            ws.t0, it, J, residual, alpha_init, ws.evaluations,
        )
        if not accepted:
            break
        if stalled >= spec.stall_iterations:
            break

    control = ControlSignal(
        t_start=ws.t0, step=spec.control_step, values=d.reshape(shape), saturation=M
    )
    if recovered:
        status = "infeasible-start-recovered"
    return OcpSolution(
        control=control,
        cost=J,
        status=status,
        iterations=it,
        residual=residual,
        evaluations=ws.evaluations,
    )


def brute_force_ocp(
    plant, history, sc: StageCost, spec: OcpSpec, yref: ReferenceSignal, grid_resolution: float
) -> OcpSolution:
    """Exhaustive grid search over the control box; exact argmin on the grid.

    Only usable for total decision dimension N*m <= 3.
    """
    N, m = spec.n_intervals, plant.m
    dim = N * m
    if dim > 3:
        raise ValueError(f"decision dimension {dim} too large for exhaustive search")
    M = spec.saturation
    n_pts = round(2.0 * M / grid_resolution) + 1
    axis = -M + grid_resolution * np.arange(n_pts)
    axis[-1] = min(axis[-1], M)
    grids = np.meshgrid(*([axis] * dim), indexing="ij")
    candidates = np.stack([g.ravel() for g in grids], axis=-1).reshape(-1, N, m)
    ws = _Workspace(plant, sc, spec, yref)
    best_cost = math.inf
    best = None
    chunk = 4096
    for start in range(0, candidates.shape[0], chunk):
        block = candidates[start : start + chunk]
        costs = ws.cost_batch(block)
        k = int(np.argmin(costs))
        if costs[k] < best_cost:
            best_cost = float(costs[k])
            best = block[k]
    if best is None or not math.isfinite(best_cost):
        raise OcpInfeasibleError("no grid point has finite cost", t_start=ws.t0)
    control = ControlSignal(t_start=ws.t0, step=spec.control_step, values=best, saturation=M)
    return OcpSolution(
        control=control,
        cost=best_cost,
        status="converged",
        iterations=0,
        evaluations=ws.evaluations,
    )
