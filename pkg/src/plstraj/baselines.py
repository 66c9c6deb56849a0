"""Reference estimators for comparison runs.

Kalman-style filters over the constant-acceleration (CA) model, unscented
and extended filters over the power-limited steering model, and a
non-adaptive sparse MAP smoother over a constant-turn (CT) model.  All of
them observe position only.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import model, solver
from .model import ModelParams, State, TransitionStep

FLAG_REGULARIZED = "regularized-innovation"
FLAG_DIVERGED = "diverged"

CA_DIM = 9
CT_DIM = 6
OBS_DIM = 3


# ---------------------------------------------------------------------------
# Constant-acceleration model


def ca_transition(tau: float) -> np.ndarray:
    """Exact discrete CA transition: x += tau*v + tau^2/2*a, v += tau*a."""
    f = np.eye(CA_DIM)
    eye3 = np.eye(3)
    f[0:3, 3:6] = tau * eye3
    f[0:3, 6:9] = 0.5 * tau**2 * eye3
    f[3:6, 6:9] = tau * eye3
    return f


def ca_process_noise(tau: float, q_jerk: float) -> np.ndarray:
    """White-jerk process covariance of the discrete CA model."""
    blocks = np.array(
        [
            [tau**5 / 20.0, tau**4 / 8.0, tau**3 / 6.0],
            [tau**4 / 8.0, tau**3 / 3.0, tau**2 / 2.0],
            [tau**3 / 6.0, tau**2 / 2.0, tau],
        ]
    )
    return q_jerk * np.kron(blocks, np.eye(3))


def ca_observation_matrix() -> np.ndarray:
    h = np.zeros((OBS_DIM, CA_DIM))
    h[:, :OBS_DIM] = np.eye(OBS_DIM)
    return h


def ca_initial(z: np.ndarray, r: np.ndarray, v_var: float = 1e4, a_var: float = 1e2):
    """Initial CA state at the first observation with diffuse derivatives."""
    s = np.zeros(CA_DIM)
    s[:3] = np.asarray(z, dtype=float)
    cov = np.zeros((CA_DIM, CA_DIM))
    cov[0:3, 0:3] = np.asarray(r, dtype=float)
    cov[3:6, 3:6] = v_var * np.eye(3)
    cov[6:9, 6:9] = a_var * np.eye(3)
    return s, cov


# ---------------------------------------------------------------------------
# Linear Kalman predict/update


def kf_predict(s, cov, f, q):
    s = f @ s
    cov = f @ cov @ f.T + q
    return s, 0.5 * (cov + cov.T)


def kf_update(s, cov, z, h, r, flags: list | None = None):
    """Measurement update; a non-invertible innovation covariance gets a
    trace-scaled regularization and is flagged."""
    innov = np.asarray(z, dtype=float) - h @ s
    s_cov = h @ cov @ h.T + r
    s_cov = 0.5 * (s_cov + s_cov.T)
    try:
        gain = np.linalg.solve(s_cov, h @ cov).T
    except np.linalg.LinAlgError:
        if flags is not None:
            flags.append(FLAG_REGULARIZED)
        bump = 1e-9 * max(np.trace(s_cov), 1.0)
        gain = np.linalg.solve(s_cov + bump * np.eye(s_cov.shape[0]), h @ cov).T
    s = s + gain @ innov
    eye = np.eye(cov.shape[0])
    cov = (eye - gain @ h) @ cov
    return s, 0.5 * (cov + cov.T), innov, s_cov


def ekf_ca_step(s, cov, z, tau: float, q_jerk: float, r, flags: list | None = None):
    """One predict/update cycle of the (linear) CA filter."""
    f = ca_transition(tau)
    q = ca_process_noise(tau, q_jerk)
    s, cov = kf_predict(s, cov, f, q)
    if z is None:
        return s, cov
    s, cov, _, _ = kf_update(s, cov, z, ca_observation_matrix(), r, flags)
    return s, cov


# ---------------------------------------------------------------------------
# Unscented transform


@dataclass
class UnscentedWeights:
    """Scaled unscented transform with unit spread by default."""

    alpha: float = 1.0
    beta: float = 2.0
    kappa: float = 0.0

    def points_and_weights(self, s, cov):
        n = s.size
        lam = self.alpha**2 * (n + self.kappa) - n
        cov = 0.5 * (cov + cov.T)
        try:
            root = np.linalg.cholesky((n + lam) * cov)
        except np.linalg.LinAlgError:
            w, vecs = np.linalg.eigh((n + lam) * cov)
            root = vecs @ np.diag(np.sqrt(np.clip(w, 0.0, None)))
        pts = np.empty((2 * n + 1, n))
        pts[0] = s
        for i in range(n):
            pts[1 + i] = s + root[:, i]
            pts[1 + n + i] = s - root[:, i]
        w_m = np.full(2 * n + 1, 0.5 / (n + lam))
        w_c = w_m.copy()
        w_m[0] = lam / (n + lam)
        w_c[0] = lam / (n + lam) + (1.0 - self.alpha**2 + self.beta)
        return pts, w_m, w_c


def unscented_step(s, cov, propagate, z, q_add, h, r, weights: UnscentedWeights | None = None, flags: list | None = None):
    """Generic UKF cycle: sigma points through ``propagate``, additive
    process noise, linear position update."""
    uw = weights or UnscentedWeights()
    pts, w_m, w_c = uw.points_and_weights(np.asarray(s, dtype=float), cov)
    prop = np.asarray([propagate(p) for p in pts])
    s_pred = w_m @ prop
    diff = prop - s_pred
    cov_pred = (diff.T * w_c) @ diff + q_add
    cov_pred = 0.5 * (cov_pred + cov_pred.T)
    if z is None:
        return s_pred, cov_pred
    return kf_update(s_pred, cov_pred, z, h, r, flags)[:2]


def ukf_ca_step(s, cov, z, tau: float, q_jerk: float, r, weights=None, flags=None):
    f = ca_transition(tau)
    return unscented_step(
        s, cov, lambda p: f @ p, z, ca_process_noise(tau, q_jerk), ca_observation_matrix(), r, weights, flags
    )


def pls_initial(z: np.ndarray, params: ModelParams, r, v_var: float = 1e3):
    """Initial PLS filter state at the first observation."""
    s = np.zeros(model.STATE_DIM)
    s[model.POS] = np.asarray(z, dtype=float)
    s[model.PWR] = params.beta * params.eps_speed
    cov = np.zeros((model.STATE_DIM, model.STATE_DIM))
    cov[model.POS, model.POS] = np.asarray(r, dtype=float)
    cov[model.VEL, model.VEL] = v_var * np.eye(3)
    cov[model.PWR, model.PWR] = 1e4
    cov[model.ANG, model.ANG] = 1.0 * np.eye(3)
    return s, cov


def _pls_observation_matrix() -> np.ndarray:
    h = np.zeros((OBS_DIM, model.STATE_DIM))
    h[:, :OBS_DIM] = np.eye(OBS_DIM)
    return h


def ukf_pls_step(s, cov, z, params: ModelParams, tau: float, r, weights=None, flags=None):
    """UKF cycle with sigma points propagated through the nonlinear one-step
    prediction of the steering model."""

    def propagate(p):
        return model.predict_state(State.from_vector(p), params, tau).as_vector()

    _, jac, _ = model.linearize_transition(State.from_vector(np.asarray(s, dtype=float)), params, tau)
    q_add = model.jacobian_transition_covariance(jac, params, tau)
    return unscented_step(s, cov, propagate, z, q_add, _pls_observation_matrix(), r, weights, flags)


def ekf_pls_step(s, cov, z, params: ModelParams, tau: float, r, flags: list | None = None):
    """EKF cycle on the steering model.

    The prediction is the exact nonlinear step; the covariance propagates
    through the analytic Jacobian.  A non-finite state or an innovation that
    explodes relative to its covariance marks the step as divergent.
    """
    f0, jac, _ = model.linearize_transition(State.from_vector(np.asarray(s, dtype=float)), params, tau)
    q = model.jacobian_transition_covariance(jac, params, tau)
    cov = jac @ cov @ jac.T + q
    cov = 0.5 * (cov + cov.T)
    s = f0
    if z is not None:
        h = _pls_observation_matrix()
        s, cov, innov, s_cov = kf_update(s, cov, z, h, r, flags)
        nees = float(innov @ np.linalg.solve(s_cov, innov))
        if not np.isfinite(nees) or nees > 500.0 * OBS_DIM:
            if flags is not None:
                flags.append(FLAG_DIVERGED)
    if not np.all(np.isfinite(s)):
        if flags is not None:
            flags.append(FLAG_DIVERGED)
    return s, cov


# ---------------------------------------------------------------------------
# Constant-turn sparse MAP


def ct_transition(omega: float, tau: float) -> np.ndarray:
    """Discrete constant-turn transition on [x, v]: the velocity rotates at
    ``omega`` about the vertical axis; near-zero rates reduce to constant
    velocity."""
    f = np.eye(CT_DIM)
    if abs(omega) < 1e-9:
        f[0:3, 3:6] = tau * np.eye(3)
        return f
    wt = omega * tau
    s, c = np.sin(wt), np.cos(wt)
    # Velocity rotation in the horizontal plane.
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    # Position integral of the rotating velocity.
    integ = np.array(
        [
            [s / omega, -(1.0 - c) / omega, 0.0],
            [(1.0 - c) / omega, s / omega, 0.0],
            [0.0, 0.0, tau],
        ]
    )
    f[0:3, 3:6] = integ
    f[3:6, 3:6] = rot
    return f


def ct_process_noise(tau: float, q_acc: float) -> np.ndarray:
    """White-acceleration process covariance of the CT model."""
    blocks = np.array([[tau**3 / 3.0, tau**2 / 2.0], [tau**2 / 2.0, tau]])
    return q_acc * np.kron(blocks, np.eye(3))


def estimate_turn_rate(positions: np.ndarray, tau: float) -> float:
    """Least-squares turn rate from the horizontal headings of successive
    displacement vectors."""
    positions = np.asarray(positions, dtype=float)
    if len(positions) < 3:
        return 0.0
    d = np.diff(positions[:, :2], axis=0)
    ok = np.linalg.norm(d, axis=1) > 1e-9
    if ok.sum() < 2:
        return 0.0
    ang = np.unwrap(np.arctan2(d[ok, 1], d[ok, 0]))
    if ang.size < 2:
        return 0.0
    steps = np.arange(ang.size)
    slope = np.polyfit(steps, ang, 1)[0]
    return float(slope / tau)


@dataclass
class MapCtConfig:
    tau: float = 1.0
    q_acc: float = 1.0
    rate_window: int = 20
    v_var: float = 1e4


def map_ct(
    observations,
    r: np.ndarray,
    cfg: MapCtConfig | None = None,
) -> np.ndarray:
    """Non-adaptive full-horizon sparse MAP over the constant-turn model.

    ``observations`` is a sequence of per-time observation lists of
    ``(z, sensor_id)`` pairs (possibly empty).  The turn rate is estimated
    per step from a sliding window of observed headings; the block
    tridiagonal system over the whole horizon is assembled and solved once.
    Returns the (n, 6) estimated state array.
    """
    cfg = cfg or MapCtConfig()
    n = len(observations)
    if n == 0:
        return np.zeros((0, CT_DIM))
    r = np.asarray(r, dtype=float)

    # Representative position per step for the heading fit (NaN when missing).
    rep = np.full((n, 3), np.nan)
    for i, obs in enumerate(observations):
        if obs:
            rep[i] = np.mean([np.asarray(z, dtype=float) for z, _ in obs], axis=0)
    filled = rep.copy()
    for i in range(1, n):
        if np.isnan(filled[i, 0]):
            filled[i] = filled[i - 1]
    for i in range(n - 2, -1, -1):
        if np.isnan(filled[i, 0]):
            filled[i] = filled[i + 1]

    transitions = []
    half = cfg.rate_window // 2
    q = ct_process_noise(cfg.tau, cfg.q_acc)
    for i in range(n - 1):
        lo, hi = max(0, i - half), min(n, i + half + 1)
        omega = estimate_turn_rate(filled[lo:hi], cfg.tau)
        transitions.append(TransitionStep(phi=ct_transition(omega, cfg.tau), q=q, tau=cfg.tau))

    obs_model = solver.ObservationModel(h=np.hstack([np.eye(3), np.zeros((3, 3))]))
    obs_model.r = {
        (i, sid): r for i, obs in enumerate(observations) for _, sid in obs
    }

    # Diffuse prior on the first state, centered on the first representative
    # position, so velocity rows stay invertible at the horizon edge.
    prior_mean = np.zeros(CT_DIM)
    prior_mean[:3] = filled[0]
    prior_cov = np.zeros((CT_DIM, CT_DIM))
    prior_cov[0:3, 0:3] = r
    prior_cov[3:6, 3:6] = cfg.v_var * np.eye(3)
    anchor = TransitionStep(phi=np.eye(CT_DIM), q=prior_cov, tau=cfg.tau)

    system = solver.assemble(
        [np.zeros(CT_DIM)] * n,
        transitions,
        list(observations),
        obs_model,
        anchor_state=prior_mean,
        anchor_transition=anchor,
    )
    return np.asarray(solver.solve(system))
