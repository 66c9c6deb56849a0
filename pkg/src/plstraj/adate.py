"""Adaptive windowed trajectory estimation.

Each incoming batch of observations triggers one estimation step:

1. relinearize the transitions over the active window on the previous
   trajectory and compute the newest process covariance,
2. assemble and solve the window MAP system, splicing the result onto the
   frozen prefix,
3. adapt the per-step transition covariances from the transition errors
   (fading memory),
4. adapt per-(time, sensor) observation covariances for outlying
   observations,
5. advance the truncation time that separates the frozen prefix from the
   active window.

States before the truncation time are never touched again, which bounds the
per-step work once the estimate stabilizes.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from . import model, solver
from .model import STATE_DIM, ModelParams, State, TransitionStep

FLAG_SOLVER_FAILURE = "solver-failure"
FLAG_NO_DESCENT = "no-descent"
FLAG_OUTLIER = "outlier"
FLAG_BOOTSTRAP = "bootstrap"


def _spd_factor(m: np.ndarray):
    """Cholesky factor of an SPD matrix, with trace-scaled jitter on failure."""
    m = 0.5 * (m + m.T)
    try:
        return cho_factor(m, lower=True)
    except np.linalg.LinAlgError:
        bump = 1e-9 * max(np.trace(m), 1.0)
        ident = np.eye(m.shape[0])
        for _ in range(40):
            try:
                return cho_factor(m + bump * ident, lower=True)
            except np.linalg.LinAlgError:
                bump *= 10.0
        raise


def default_state_weights() -> np.ndarray:
    """Diagonal weights for the truncation index: position dominates the
    observable, velocity and the drive terms count progressively less."""
    w = np.empty(STATE_DIM)
    w[model.POS] = 1.0
    w[model.VEL] = 0.1
    w[model.PWR] = 0.01
    w[model.ANG] = 0.01
    return w


@dataclass
class AdateConfig:
    """Estimator hyperparameters.

    ``eta`` is the truncation threshold on the weighted state change,
    ``t_m`` the fading-memory time constant, ``psi`` the diagonal of the
    truncation weight matrix, ``outlier_factor`` the multiple of the nominal
    Mahalanobis RMSE beyond which an observation is treated as abnormal.
    """

    tau: float = 1.0
    eta: float = 1e-5
    t_m: float = 10.0
    psi: np.ndarray = field(default_factory=default_state_weights)
    min_window: int = 10
    outlier_factor: float = 3.0
    adapt_q: bool = True
    adapt_r: bool = True
    max_inner: int = 3
    inner_tol: float = 1e-7

    def __post_init__(self):
        self.psi = np.asarray(self.psi, dtype=float).reshape(STATE_DIM)
        if self.eta <= 0 or self.t_m <= 0 or self.tau <= 0:
            raise ValueError("eta, t_m, tau must be positive")
        if self.min_window < 1:
            raise ValueError("min_window must be >= 1")
        if np.any(self.psi < 0):
            raise ValueError("psi must be nonnegative")


@dataclass
class TrajectoryEstimate:
    """Running estimate: full state history, per-step process covariances,
    per-(time, sensor) observation covariances and the truncation index.

    ``states[i]`` is the packed state at time index i (0-based); indices
    below ``xi_t`` are frozen.  ``q_seq[i]`` covers the transition i -> i+1.
    """

    states: list = field(default_factory=list)
    q_seq: list = field(default_factory=list)
    r_map: dict = field(default_factory=dict)
    obs_seq: list = field(default_factory=list)
    xi_t: int = 0
    prev_window: np.ndarray | None = None
    prev_first: int = 0
    prior_mean: np.ndarray | None = None
    prior_cov: np.ndarray | None = None
    flags: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.states)

    def positions(self) -> np.ndarray:
        return np.asarray([s[model.POS] for s in self.states])

    def state_array(self) -> np.ndarray:
        return np.asarray(self.states)


def adapt_transition_covariance(q: np.ndarray, eps: np.ndarray, t_m: float, tau: float) -> np.ndarray:
    """Fading-memory blend of the prior covariance with the observed
    transition-error outer product."""
    eps = np.asarray(eps, dtype=float)
    out = (t_m * q + tau * np.outer(eps, eps)) / (t_m + tau)
    return 0.5 * (out + out.T)


def adapt_observation_covariance(
    r: np.ndarray,
    dz: np.ndarray,
    t_m: float,
    tau: float,
    outlier_factor: float = 3.0,
) -> tuple[np.ndarray, bool]:
    """Inflate the observation covariance when the bias is abnormal.

    The deviation is the Mahalanobis norm of ``dz`` under ``r``; its RMSE
    under the nominal model is sqrt(dim), so an observation is an outlier
    beyond ``outlier_factor * sqrt(dim)``.  Only outliers update ``r``.
    """
    dz = np.asarray(dz, dtype=float)
    dev = float(np.sqrt(max(dz @ cho_solve(_spd_factor(r), dz), 0.0)))
    if dev <= outlier_factor * np.sqrt(dz.size):
        return r, False
    out = (t_m * r + tau * np.outer(dz, dz)) / (t_m + tau)
    return 0.5 * (out + out.T), True


def truncation_time(
    current_window: np.ndarray,
    previous_window: np.ndarray,
    cfg: AdateConfig,
    k: int,
    window_first: int = 0,
    previous_xi: int = 0,
) -> int:
    """Largest stable-prefix end among the shared window indices.

    ``current_window`` and ``previous_window`` are aligned state sequences
    starting at absolute index ``window_first``.  Returns the new truncation
    index, capped at ``k - min_window`` and never below ``previous_xi``.
    """
    n = min(len(current_window), len(previous_window))
    stable_end = window_first
    for i in range(n):
        theta = float(
            np.sqrt(np.sum(cfg.psi * (current_window[i] - previous_window[i]) ** 2))
        )
        if theta >= cfg.eta:
            break
        stable_end = window_first + i + 1
    return max(previous_xi, min(stable_end, max(k - cfg.min_window, 0)))


def _degenerate_inflation(q: np.ndarray, s_prev: np.ndarray, new_obs, tau: float) -> np.ndarray:
    """Widen a process covariance linearized at (near) zero speed.

    At rest the velocity direction and the sustaining power are completely
    uninformed, so the model covariance collapses onto the drive components
    and would pin the window solve to the zero-velocity propagation.  The
    observed displacement over the step sets an honest scale for how fast the
    platform may actually be moving; the corresponding white-velocity and
    power terms let the first solves pull velocity and power from the data.
    """
    if not new_obs:
        return q
    z_mean = np.mean([np.asarray(z, dtype=float) for z, _, _ in new_obs], axis=0)
    v_char = float(np.linalg.norm(z_mean - s_prev[model.POS]) / tau)
    if v_char <= 0.0:
        return q
    q = q.copy()
    eye3 = np.eye(3)
    q[model.VEL, model.VEL] += v_char**2 * eye3
    q[model.POS, model.VEL] += 0.5 * tau * v_char**2 * eye3
    q[model.VEL, model.POS] += 0.5 * tau * v_char**2 * eye3
    q[model.POS, model.POS] += (tau**2 / 3.0) * v_char**2 * eye3
    q[model.PWR, model.PWR] += (v_char**2) ** 2  # power ~ quadratic in speed
    return q


def _bootstrap_prior_cov(pos_var: float, v_char: float, params: ModelParams) -> np.ndarray:
    """Covariance of the bootstrap prior on the first state.

    The first state is pinned at the first observation with zero velocity and
    vanishing power, but those placeholder values carry no information: the
    prior must be wide enough to let the data overrule them, yet finite so the
    weakly-observed power level has a reference that keeps the window solves
    from drifting along it.  ``v_char`` (the displacement-implied speed) sets
    the velocity scale, and the power needed to sustain it sets the power
    scale.
    """
    v_char = max(v_char, 1.0)
    p_char = params.alpha * v_char**2 + params.beta * v_char
    cov = np.zeros((STATE_DIM, STATE_DIM))
    cov[model.POS, model.POS] = max(pos_var, 1e-6) * np.eye(3)
    cov[model.VEL, model.VEL] = v_char**2 * np.eye(3)
    cov[model.PWR, model.PWR] = p_char**2
    cov[model.ANG, model.ANG] = 1.0 * np.eye(3)
    return cov


def bootstrap_state(z: np.ndarray, params: ModelParams) -> np.ndarray:
    """Initial state at the first observation: zero velocity, a vanishing
    positive power so the axial dynamics stay well defined."""
    s = State(x=np.asarray(z, dtype=float), v=np.zeros(3), p=params.beta * params.eps_speed, c_t=np.zeros(3))
    return s.as_vector()


def step(
    est: TrajectoryEstimate | None,
    new_obs: list,
    params: ModelParams,
    cfg: AdateConfig,
) -> TrajectoryEstimate:
    """Advance the estimate by one time index.

    ``new_obs`` is a list of ``(z, sensor_id, r_prior)`` triples for the new
    time step; it may be empty (missing observations).  The input estimate is
    not mutated.
    """
    tau = cfg.tau
    if est is None or len(est) == 0:
        est = TrajectoryEstimate()
        if not new_obs:
            raise ValueError("the first step needs at least one observation")
        z0 = np.mean([np.asarray(z, dtype=float) for z, _, _ in new_obs], axis=0)
        est.states = [bootstrap_state(z0, params)]
        est.obs_seq = [[(np.asarray(z, dtype=float), sid) for z, sid, _ in new_obs]]
        for z, sid, r_prior in new_obs:
            est.r_map[(0, sid)] = np.asarray(r_prior, dtype=float)
        est.xi_t = 0
        est.prev_window = np.asarray(est.states)
        est.prev_first = 0
        est.prior_mean = est.states[0].copy()
        est.flags = [[FLAG_BOOTSTRAP]]
        return est

    est = TrajectoryEstimate(
        states=[s.copy() for s in est.states],
        q_seq=[q.copy() for q in est.q_seq],
        r_map={k: v.copy() for k, v in est.r_map.items()},
        obs_seq=copy.copy(est.obs_seq),
        xi_t=est.xi_t,
        prev_window=est.prev_window,
        prev_first=est.prev_first,
        prior_mean=est.prior_mean,
        prior_cov=est.prior_cov,
        flags=[list(f) for f in est.flags],
    )

    k = len(est.states)  # index of the new time step
    step_flags: list = []

    # Predicted state for the new step, from the last estimate.
    last = State.from_vector(est.states[-1])
    predicted = model.predict_state(last, params, tau, step_flags).as_vector()
    est.states.append(predicted)
    est.obs_seq.append([(np.asarray(z, dtype=float), sid) for z, sid, _ in new_obs])
    for z, sid, r_prior in new_obs:
        est.r_map.setdefault((k, sid), np.asarray(r_prior, dtype=float))

    xi = est.xi_t  # window is [xi, k]; the frozen prefix stays untouched

    # Newest process covariance from the model, linearized where the step
    # starts; a degenerate (near-rest) start gets its covariance widened from
    # the observed displacement.
    s_last = State.from_vector(est.states[k - 1])
    _, phi_last, _ = model.linearize_transition(s_last, params, tau, step_flags)
    q_new = model.jacobian_transition_covariance(phi_last, params, tau)
    if s_last.speed() <= 10.0 * params.eps_speed:
        step_flags.append(model.FLAG_DEGENERATE_SPEED)
        q_new = _degenerate_inflation(q_new, est.states[k - 1], new_obs, tau)
    est.q_seq.append(q_new)
    if est.prior_cov is None and new_obs:
        z_mean = np.mean([np.asarray(z, dtype=float) for z, _, _ in new_obs], axis=0)
        v_char = float(np.linalg.norm(z_mean - est.states[k - 1][model.POS]) / tau)
        pos_var = float(np.trace(np.asarray(new_obs[0][2], dtype=float))) / 3.0
        est.prior_cov = _bootstrap_prior_cov(pos_var, v_char, params)

    obs_model = solver.ObservationModel.position_observer(STATE_DIM)
    obs_model.r = est.r_map
    window_obs = est.obs_seq[xi : k + 1]

    # Fixed pieces of the window objective.
    q_window = est.q_seq[xi:k]
    q_facts = [_spd_factor(q) for q in q_window]
    r_facts = {
        (i, sid): _spd_factor(est.r_map[(i, sid)])
        for i in range(xi, k + 1)
        for _, sid in est.obs_seq[i]
    }
    if xi > 0:
        anchor_mean = model.predict_state(
            State.from_vector(est.states[xi - 1]), params, tau
        ).as_vector()
        anchor_fact = _spd_factor(est.q_seq[xi - 1])
    elif est.prior_cov is not None:
        # Bootstrap prior on the first state: keeps the weakly-observed power
        # level referenced while the window still reaches back to time zero.
        anchor_mean = est.prior_mean
        anchor_fact = _spd_factor(est.prior_cov)
    else:
        anchor_mean = None
        anchor_fact = None
    h = obs_model.h

    def window_cost(w):
        c = 0.0
        for i in range(len(w) - 1):
            eps = w[i + 1] - model.predict_state(State.from_vector(w[i]), params, tau).as_vector()
            c += float(eps @ cho_solve(q_facts[i], eps))
        for i in range(len(w)):
            for z, sid in window_obs[i]:
                dz = z - h @ w[i]
                c += float(dz @ cho_solve(r_facts[(xi + i, sid)], dz))
        if anchor_mean is not None:
            eps0 = w[0] - anchor_mean
            c += float(eps0 @ cho_solve(anchor_fact, eps0))
        return c

    # Iterated Gauss-Newton with a backtracking line search on the window
    # objective: relinearize on the current iterate, solve the normal
    # equations, step only as far as the true cost decreases.
    def gauss_newton_window():
        cur = np.asarray(est.states[xi : k + 1])
        c_cur = window_cost(cur)
        for _ in range(cfg.max_inner):
            transitions = []
            for j, i in enumerate(range(xi, k)):
                _, phi, offset = model.linearize_transition(
                    State.from_vector(cur[j]), params, tau, step_flags
                )
                transitions.append(TransitionStep(phi=phi, q=q_window[j], tau=tau, offset=offset))
            anchor_transition = None
            anchor_state = None
            if anchor_mean is not None:
                # The anchor contribution is a fixed Gaussian prior on the
                # first window state; expressed as an identity transition
                # from its mean.
                anchor_state = anchor_mean
                anchor_transition = TransitionStep(
                    phi=np.eye(STATE_DIM),
                    q=est.q_seq[xi - 1] if xi > 0 else est.prior_cov,
                    tau=tau,
                )
            try:
                system = solver.assemble(
                    list(cur),
                    transitions,
                    window_obs,
                    obs_model,
                    anchor_state=anchor_state,
                    anchor_transition=anchor_transition,
                    first_index=xi,
                )
                proposal = np.asarray(solver.solve(system))
                step_flags.extend(system.flags)
            except solver.SolverError:
                step_flags.append(FLAG_SOLVER_FAILURE)
                break
            lam = 1.0
            accepted = False
            for _ in range(10):
                cand = cur + lam * (proposal - cur)
                c_cand = window_cost(cand)
                if np.isfinite(c_cand) and c_cand <= c_cur:
                    accepted = True
                    break
                lam *= 0.5
            if not accepted:
                step_flags.append(FLAG_NO_DESCENT)
                break
            delta = float(np.abs(cand - cur).max())
            cur, c_cur = cand, c_cand
            if delta < cfg.inner_tol:
                break
        for j, i in enumerate(range(xi, k + 1)):
            est.states[i] = cur[j]

    gauss_newton_window()

    # Observation-covariance adaptation runs before the transition residual
    # is measured: a sensor that just started drifting first drags the
    # window solve toward itself, and crediting that jump to process noise
    # would let the trajectory absorb the drift for good.
    outliers_found = False
    if cfg.adapt_r:
        for i in range(xi, k + 1):
            for z, sid in est.obs_seq[i]:
                dz = z - h @ est.states[i]
                # Once an observation trips the outlier test, blend until its
                # deviation is well inside the threshold, not merely at it: a
                # single blend can park a large drift just under the limit,
                # where it keeps a sizable weight in every later window solve
                # and the test never fires again.
                r_new, flagged = adapt_observation_covariance(
                    est.r_map[(i, sid)], dz, cfg.t_m, tau, cfg.outlier_factor
                )
                if flagged:
                    est.r_map[(i, sid)] = r_new
                    for _ in range(49):
                        r_new, again = adapt_observation_covariance(
                            est.r_map[(i, sid)], dz, cfg.t_m, tau, 0.5 * cfg.outlier_factor
                        )
                        if not again:
                            break
                        est.r_map[(i, sid)] = r_new
                if flagged:
                    outliers_found = True
                    r_facts[(i, sid)] = _spd_factor(est.r_map[(i, sid)])
                    step_flags.append(f"{FLAG_OUTLIER}[{i},{sid}]")
    if outliers_found:
        # Purge the influence of the down-weighted observations before any
        # further statistics are taken from the trajectory.
        gauss_newton_window()

    # Fading-memory adaptation.  Each transition covariance is nudged once,
    # at the step where its residual first becomes available; re-adapting the
    # same transition on every pass would keep perturbing the window
    # objective (so the trajectory never settles and the truncation index
    # cannot advance) and drive the covariance toward a rank-one outer
    # product.
    if cfg.adapt_q:
        eps = est.states[k] - model.predict_state(
            State.from_vector(est.states[k - 1]), params, tau
        ).as_vector()
        est.q_seq[k - 1] = adapt_transition_covariance(est.q_seq[k - 1], eps, cfg.t_m, tau)

    # Truncation-time update against the previous iteration's window.
    current_window = np.asarray(est.states[xi:k])  # indices shared with prev trajectory
    if est.prev_window is not None and k > cfg.min_window:
        prev_shared_first = max(xi, est.prev_first)
        prev_off = prev_shared_first - est.prev_first
        cur_off = prev_shared_first - xi
        est.xi_t = truncation_time(
            current_window[cur_off:],
            est.prev_window[prev_off:],
            cfg,
            k,
            window_first=prev_shared_first,
            previous_xi=est.xi_t,
        )
    est.prev_window = np.asarray(est.states[est.xi_t : k + 1])
    est.prev_first = est.xi_t

    est.flags.append(sorted(set(step_flags)))
    return est


def run(
    observation_stream,
    params: ModelParams,
    cfg: AdateConfig,
    callback=None,
) -> TrajectoryEstimate:
    """Run the estimator over a whole observation stream.

    ``observation_stream`` yields one list of ``(z, sensor_id, r_prior)``
    per time step.  ``callback(k, est)`` is invoked after every step.
    """
    est: TrajectoryEstimate | None = None
    for k, obs in enumerate(observation_stream):
        est = step(est, obs, params, cfg)
        if callback is not None:
            callback(k, est)
    if est is None:
        raise ValueError("empty observation stream")
    return est
