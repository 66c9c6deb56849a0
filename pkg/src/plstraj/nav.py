"""Local navigation: obstacle-avoiding plans over the steering model.

A plan is the MAP trajectory of the dynamic model with key-point nodes as
position pseudo-observations at their arrival times, plus a hazard term per
obstacle.  The hazard -log(1 - P_h) is expanded to second order around the
current plan each outer iteration and folded into the block-tridiagonal
normal equations as a quadratic position penalty, so the window solve keeps
its linear-time structure.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import model, solver
from .model import ModelParams, State, TransitionStep

FLAG_INFEASIBLE = "infeasible-node"
FLAG_MAX_ITER = "max-iterations"

# P_h < 0.01  <=>  d^2 > 2 ln 100.
SAFE_D2 = 2.0 * math.log(100.0)


@dataclass
class Obstacle:
    """Ellipsoidal restricted area with a Gaussian hazard profile."""

    center: np.ndarray
    shape: np.ndarray
    margin: float = 3.0

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=float).reshape(3)
        self.shape = np.asarray(self.shape, dtype=float).reshape(3, 3)
        if self.margin <= 0:
            raise ValueError("margin must be positive")
        w = np.linalg.eigvalsh(0.5 * (self.shape + self.shape.T))
        if w.min() <= 0 or not np.allclose(self.shape, self.shape.T):
            raise ValueError("shape must be symmetric positive definite")

    def mahalanobis_sq(self, x: np.ndarray) -> float:
        dx = np.asarray(x, dtype=float) - self.center
        return float(dx @ np.linalg.solve(self.shape, dx))


@dataclass
class NodePlan:
    """Key points to pass through: (position, covariance, arrival step)."""

    nodes: list

    def __post_init__(self):
        times = [int(t) for _, _, t in self.nodes]
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ValueError("node arrival times must be strictly increasing")

    def horizon(self) -> int:
        return int(self.nodes[-1][2]) + 1

    def upcoming(self, count: int = 2) -> "NodePlan":
        """Restrict to the start node plus the next ``count`` key points."""
        return NodePlan(nodes=list(self.nodes[: count + 1]))


def hit_probability(x, obstacle: Obstacle) -> float:
    """Hazard P_h = exp(-d^2/2) of the position (or state) ``x``."""
    if isinstance(x, State):
        x = x.x
    x = np.asarray(x, dtype=float)[:3]
    d2 = obstacle.mahalanobis_sq(x)
    return float(np.clip(math.exp(-0.5 * d2), 0.0, 1.0 - 1e-12))


def _exit_distance(x: np.ndarray, u: np.ndarray, obstacle: Obstacle, standoff: float) -> float:
    """How far ``x`` must move along the unit ray ``u`` to leave the
    obstacle's standoff shell (0 when already outside)."""
    dx = x - obstacle.center
    s_inv_u = np.linalg.solve(obstacle.shape, u)
    s_inv_dx = np.linalg.solve(obstacle.shape, dx)
    a = float(u @ s_inv_u)
    b = float(u @ s_inv_dx)
    c0 = float(dx @ s_inv_dx) - standoff**2
    if c0 >= 0.0:
        return 0.0
    return (-b + math.sqrt(max(b * b - a * c0, 0.0))) / a


def detour_targets(plan_pos, tangents, violations, obstacles, standoffs) -> dict:
    """Detour waypoints for one contiguous run of encroaching plan steps.

    ``violations`` maps step -> set of obstacle indices whose standoff shell
    the step is inside.  All steps of the run are pushed along one shared
    direction, chosen from a sweep of directions perpendicular to the path
    tangent as the one needing the least total displacement to clear every
    involved shell; per-point side picking would let neighbouring detours
    land on opposite sides and cancel in the smoothing solve.
    """
    steps = sorted(violations)
    cluster = sorted({oi for s in steps for oi in violations[s]})
    mid = steps[len(steps) // 2]
    t_vec = np.asarray(tangents[mid], dtype=float)
    tn = np.linalg.norm(t_vec)
    t_hat = t_vec / tn if tn > 1e-9 else np.array([1.0, 0.0, 0.0])
    ref = np.array([0.0, 0.0, 1.0]) if abs(t_hat[2]) < 0.9 else np.array([0.0, 1.0, 0.0])
    e1 = ref - (ref @ t_hat) * t_hat
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(t_hat, e1)

    best = None
    for j in range(16):
        ang = j * (2.0 * math.pi / 16.0)
        u = math.cos(ang) * e1 + math.sin(ang) * e2
        shifts = {
            s: max(_exit_distance(plan_pos[s], u, obstacles[oi], standoffs[oi]) for oi in cluster)
            for s in steps
        }
        total = sum(shifts.values())
        if best is None or total < best[0]:
            best = (total, u, shifts)
    _, u, shifts = best
    return {s: plan_pos[s] + shifts[s] * u for s in steps if shifts[s] > 0.0}


@dataclass
class PlanConfig:
    tau: float = 1.0
    eta: float = 1.0
    max_outer: int = 6
    max_inner: int = 4
    safety_p: float = 0.01
    detour_var: float = 1.0
    power_ref_sd: float = 60.0
    turn_ref_sd: float = 0.2


@dataclass
class PlanResult:
    states: np.ndarray
    iterations: int
    flags: list = field(default_factory=list)

    @property
    def positions(self) -> np.ndarray:
        return self.states[:, model.POS]


def straight_line_plan(nodes: NodePlan, params: ModelParams, tau: float) -> np.ndarray:
    """Constant-speed interpolation through the node positions."""
    n = nodes.horizon()
    states = np.zeros((n, model.STATE_DIM))
    pts = [(np.asarray(p, dtype=float), int(t)) for p, _, t in nodes.nodes]
    for (p0, t0), (p1, t1) in zip(pts, pts[1:]):
        v = (p1 - p0) / ((t1 - t0) * tau)
        speed = max(np.linalg.norm(v), params.eps_speed)
        for t in range(t0, t1 + 1):
            frac = (t - t0) / (t1 - t0)
            states[t, model.POS] = p0 + frac * (p1 - p0)
            states[t, model.VEL] = v
            states[t, model.PWR] = params.alpha * speed**2 + params.beta * speed
    states[: pts[0][1] + 1] = states[pts[0][1]]
    return states


def plan_window(
    prev_plan,
    nodes: NodePlan,
    obstacles: list,
    params: ModelParams,
    cfg: PlanConfig | None = None,
) -> PlanResult:
    """Plan the trajectory to the upcoming nodes around the obstacles.

    Each outer iteration scans the current plan for points inside an
    obstacle's standoff shell and converts them into persistent detour
    pseudo-observations on the shell; an inner loop then relinearizes the
    dynamics and re-solves the block-tridiagonal system around those fixed
    targets.  The plan is accepted when an outer pass finds no new
    encroachments and moves the positions by less than ``eta``.  A node
    inside an obstacle marks the result infeasible; the best-effort plan is
    still returned.
    """
    cfg = cfg or PlanConfig()
    flags: list = []
    n = nodes.horizon()
    if n < 2:
        raise ValueError("need at least one future node")

    for p, _, _ in nodes.nodes:
        for ob in obstacles:
            if ob.mahalanobis_sq(np.asarray(p, dtype=float)) <= SAFE_D2:
                flags.append(FLAG_INFEASIBLE)

    base = straight_line_plan(nodes, params, cfg.tau)
    plan = (
        np.array(prev_plan, dtype=float)
        if prev_plan is not None and len(prev_plan) == n
        else base.copy()
    )

    obs_model = solver.ObservationModel.position_observer(model.STATE_DIM)
    observations = [[] for _ in range(n)]
    for j, (p, cov, t) in enumerate(nodes.nodes):
        observations[int(t)].append((np.asarray(p, dtype=float), j))
        obs_model.r[(int(t), j)] = np.asarray(cov, dtype=float)

    # Weak references for the weakly observed drive coordinates: nothing in
    # the planning problem pins the absolute power level or turn rate, and
    # without a reference the window solves can run away along them.
    w_pwr = 1.0 / cfg.power_ref_sd**2
    w_trn = (1.0 / cfg.turn_ref_sd**2) * np.eye(3)
    detour_info = np.eye(3) / cfg.detour_var

    standoffs = [math.sqrt(SAFE_D2) + 0.5 * ob.margin for ob in obstacles]
    targets: dict = {}
    iterations = 0
    for _ in range(cfg.max_outer + 1):
        violations = {}
        for i in range(n):
            if i in targets:
                continue
            inside = {
                oi
                for oi, ob in enumerate(obstacles)
                if ob.mahalanobis_sq(plan[i, model.POS]) < standoffs[oi] ** 2
            }
            if inside:
                violations[i] = inside
        new_targets = len(violations)
        runs = []
        for i in sorted(violations):
            if runs and i == runs[-1][-1] + 1:
                runs[-1].append(i)
            else:
                runs.append([i])
        for run in runs:
            targets.update(
                detour_targets(
                    plan[:, model.POS],
                    plan[:, model.VEL],
                    {i: violations[i] for i in run},
                    obstacles,
                    standoffs,
                )
            )

        before = plan[:, model.POS].copy()
        failed = False
        for _ in range(cfg.max_inner):
            transitions = []
            for i in range(n - 1):
                _, jac, offset = model.linearize_transition(
                    State.from_vector(plan[i]), params, cfg.tau
                )
                q = model.jacobian_transition_covariance(jac, params, cfg.tau)
                q[np.diag_indices_from(q)] += 1e-6
                transitions.append(TransitionStep(phi=jac, q=q, tau=cfg.tau, offset=offset))
            system = solver.assemble(list(plan), transitions, observations, obs_model)
            for i in range(n):
                system.diag[i][model.PWR, model.PWR] += w_pwr
                system.rhs[i][model.PWR] += w_pwr * base[i, model.PWR]
                system.diag[i][model.ANG, model.ANG] += w_trn
                system.rhs[i][model.ANG] += w_trn @ base[i, model.ANG]
            for i, tgt in targets.items():
                system.diag[i][model.POS, model.POS] += detour_info
                system.rhs[i][model.POS] += detour_info @ tgt
            try:
                new_plan = np.asarray(solver.solve(system))
            except solver.SolverError:
                flags.append("solver-failure")
                failed = True
                break
            inner_delta = float(np.max(np.abs(new_plan[:, model.POS] - plan[:, model.POS])))
            plan = new_plan
            if inner_delta < cfg.eta:
                break
        if failed:
            break
        outer_delta = float(np.max(np.abs(plan[:, model.POS] - before)))
        if new_targets == 0 and outer_delta < cfg.eta:
            # The closing pass confirmed the plan is stationary and clear of
            # new encroachments; it performed no update, so it is not counted.
            break
        iterations += 1
    else:
        flags.append(FLAG_MAX_ITER)

    for i in range(n):
        for ob in obstacles:
            if hit_probability(plan[i, model.POS], ob) >= cfg.safety_p:
                flags.append(f"unsafe[{i}]")
    return PlanResult(states=np.asarray(plan), iterations=iterations, flags=flags)


# ---------------------------------------------------------------------------
# Serialization


def nav_scene_from_json(text: str):
    """Load (nodes, obstacles) from the JSON scene format."""
    d = json.loads(text)
    nodes = NodePlan(
        nodes=[
            (np.asarray(nd["position"], dtype=float), np.asarray(nd["covariance"], dtype=float), int(nd["time"]))
            for nd in d["nodes"]
        ]
    )
    obstacles = [
        Obstacle(
            center=np.asarray(ob["center"], dtype=float),
            shape=np.asarray(ob["shape"], dtype=float),
            margin=float(ob.get("margin", 3.0)),
        )
        for ob in d.get("obstacles", [])
    ]
    return nodes, obstacles


def write_plan_csv(path, result: PlanResult):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "x", "y", "z", "vx", "vy", "vz", "p", "ctx", "cty", "ctz"])
        for t, row in enumerate(result.states):
            w.writerow([t, *(f"{v:.9g}" for v in row)])
