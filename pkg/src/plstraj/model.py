"""Power-limited steering (PLS) dynamics.

Continuous-time model: axial speed driven by specific power against damping
and resistance, direction rotated by an angular-velocity vector.  This module
provides the discrete-time machinery built on top of it: implicit axial-speed
propagation, second-order compensation of power perturbations, the structured
10x10 transition matrix and the matching process covariance.

State layout (10 components, fixed order):

    [x (3), v (3), p (1), c_T (3)]

with x position [m], v velocity [m/s], p specific power [W/kg] and c_T the
instantaneous angular velocity [rad/s].
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

STATE_DIM = 10

# Slices into the packed state vector.
POS = slice(0, 3)
VEL = slice(3, 6)
PWR = 6
ANG = slice(7, 10)

# Flags attached to steps that needed a numerical fallback.
FLAG_RK4_FALLBACK = "rk4-fallback"
FLAG_COMPLEX_ROOTS = "complex-roots"
FLAG_LOG_CLAMP = "log-clamp"
FLAG_DEGENERATE_SPEED = "degenerate-speed"
FLAG_REST = "at-rest"
FLAG_H_CLAMP = "h-clamp"


@dataclass(frozen=True)
class ModelParams:
    """PLS parameters: damping ``alpha`` [1/s], resistance ``beta`` [m/s^2],
    spectral densities ``d_a`` (axial power control) and ``d_t`` (3x3,
    transverse control), plus numerical floors."""

    alpha: float
    beta: float = 0.0
    d_a: float = 0.0
    d_t: np.ndarray = field(default_factory=lambda: np.zeros((3, 3)))
    eps_speed: float = 1e-6
    eps_disc: float = 1e-9

    def __post_init__(self):
        object.__setattr__(self, "d_t", np.asarray(self.d_t, dtype=float))
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if self.beta < 0 or self.d_a < 0:
            raise ValueError("beta and d_a must be nonnegative")
        if self.eps_speed <= 0 or self.eps_disc <= 0:
            raise ValueError("eps_speed and eps_disc must be positive")
        if self.d_t.shape != (3, 3):
            raise ValueError("d_t must be 3x3")
        if not np.allclose(self.d_t, self.d_t.T, atol=1e-12):
            raise ValueError("d_t must be symmetric")
        if np.linalg.eigvalsh(self.d_t).min() < -1e-12:
            raise ValueError("d_t must be PSD")


@dataclass
class State:
    """Full PLS state.  ``x``/``v``/``c_t`` are length-3 arrays, ``p`` scalar."""

    x: np.ndarray
    v: np.ndarray
    p: float
    c_t: np.ndarray

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float).reshape(3)
        self.v = np.asarray(self.v, dtype=float).reshape(3)
        self.c_t = np.asarray(self.c_t, dtype=float).reshape(3)
        self.p = float(self.p)
        if not (
            np.all(np.isfinite(self.x))
            and np.all(np.isfinite(self.v))
            and np.isfinite(self.p)
            and np.all(np.isfinite(self.c_t))
        ):
            raise ValueError("state components must be finite")

    def as_vector(self) -> np.ndarray:
        s = np.empty(STATE_DIM)
        s[POS] = self.x
        s[VEL] = self.v
        s[PWR] = self.p
        s[ANG] = self.c_t
        return s

    @classmethod
    def from_vector(cls, s: np.ndarray) -> "State":
        s = np.asarray(s, dtype=float).reshape(STATE_DIM)
        return cls(x=s[POS].copy(), v=s[VEL].copy(), p=float(s[PWR]), c_t=s[ANG].copy())

    def speed(self) -> float:
        return float(np.linalg.norm(self.v))


@dataclass(frozen=True)
class AxialRoots:
    """Roots of the axial speed polynomial alpha*v^2 + beta*v - p and the
    decay rate gamma = sqrt(beta^2 + 4*alpha*p)."""

    sigma1: float
    sigma2: float
    gamma: float
    clamped: bool = False


@dataclass
class TransitionStep:
    """One linearized discrete transition: structured matrix ``phi``,
    symmetric PSD process covariance ``q`` and step length ``tau``.

    ``offset`` is the affine remainder of the linearization, so the one-step
    prediction is ``phi @ s + offset``; the factored transition matrix is
    exact at its expansion point and needs no offset (``None``)."""

    phi: np.ndarray
    q: np.ndarray
    tau: float
    offset: np.ndarray | None = None
    flags: tuple = ()


def skew(w: np.ndarray) -> np.ndarray:
    """Cross-product matrix [w]_x such that [w]_x @ u = w x u."""
    w = np.asarray(w, dtype=float)
    return np.array(
        [
            [0.0, -w[2], w[1]],
            [w[2], 0.0, -w[0]],
            [-w[1], w[0], 0.0],
        ]
    )


def axial_roots(p: float, params: ModelParams) -> AxialRoots:
    """Speed roots sigma1 >= sigma2 of the axial dynamics and decay rate gamma.

    The discriminant beta^2 + 4*alpha*p is floored at ``eps_disc`` so the
    function is total; a clamped result is marked on the returned value.
    """
    disc = params.beta**2 + 4.0 * params.alpha * p
    clamped = disc < params.eps_disc
    gamma = float(np.sqrt(max(disc, params.eps_disc)))
    sigma1 = (params.beta + gamma) / (2.0 * params.alpha)
    sigma2 = (params.beta - gamma) / (2.0 * params.alpha)
    return AxialRoots(sigma1=sigma1, sigma2=sigma2, gamma=gamma, clamped=clamped)


def equilibrium_speed(p: float, params: ModelParams) -> float:
    """Stable speed for constant power: (-beta + sqrt(beta^2+4 alpha p))/(2 alpha),
    clipped at zero for decelerating power."""
    return max(0.0, -axial_roots(p, params).sigma2)


def speed_rate(v: float, p: float, params: ModelParams) -> float:
    """d|v|/dt = p/|v| - alpha |v| - beta, with the speed floored away from 0."""
    v = max(v, params.eps_speed)
    return p / v - params.alpha * v - params.beta


def _rk4_speed(v0: float, p: float, params: ModelParams, tau: float, n_steps: int = 64) -> float:
    """Fixed-step RK4 integration of the axial speed ODE, clamped at rest."""
    v = v0
    h = tau / n_steps
    for _ in range(n_steps):
        if v <= 0.0 and p <= 0.0:
            return 0.0
        k1 = speed_rate(v, p, params)
        k2 = speed_rate(v + 0.5 * h * k1, p, params)
        k3 = speed_rate(v + 0.5 * h * k2, p, params)
        k4 = speed_rate(v + h * k3, p, params)
        v = v + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        v = max(v, 0.0)
    return v


def predict_axial_speed(
    v0: float,
    p: float,
    params: ModelParams,
    tau: float,
    diag: list | None = None,
) -> float:
    """Propagate the axial speed by ``tau`` ignoring power perturbations.

    Solves the implicit log-domain relation

        sigma1*log((w+sigma1)/(v0+sigma1))
            - sigma2*log(|w+sigma2|/|v0+sigma2|) + gamma*tau = 0

    with a bracketed Newton iteration (the solution lies between ``v0`` and
    the equilibrium speed).  Non-convergence or a clamped discriminant falls
    back to RK4 integration of the ODE and flags the step.
    """
    if tau < 0:
        raise ValueError("tau must be nonnegative")
    if tau == 0.0:
        return v0
    v0 = max(v0, 0.0)

    roots = axial_roots(p, params)
    if roots.clamped:
        if diag is not None:
            diag.extend([FLAG_COMPLEX_ROOTS, FLAG_RK4_FALLBACK])
        return _rk4_speed(v0, p, params, tau)

    s1, s2, gamma = roots.sigma1, roots.sigma2, roots.gamma
    veq = max(0.0, -s2)
    if abs(v0 - veq) <= 1e-14 * max(1.0, veq):
        return v0

    def residual(w: float) -> float:
        return (
            s1 * np.log((w + s1) / (v0 + s1))
            - s2 * np.log(abs(w + s2) / abs(v0 + s2))
            + gamma * tau
        )

    def dresidual(w: float) -> float:
        return s1 / (w + s1) - s2 / (w + s2)

    lo, hi = min(v0, veq), max(v0, veq)
    # Deceleration toward rest can reach zero in finite time; the implicit
    # relation then has no root in [0, v0].
    if veq == 0.0:
        f0 = residual(0.0) if s2 > 0 else np.inf
        if not np.isfinite(f0) or f0 >= 0.0:
            if diag is not None:
                diag.append(FLAG_REST)
            return 0.0 if f0 >= 0.0 else _rk4_speed(v0, p, params, tau)

    # Sign of the residual at the ends of the bracket (excluded endpoints:
    # the equilibrium itself is reached only asymptotically).
    f_v0 = gamma * tau  # residual(v0) exactly
    shrink = 1e-12 * max(1.0, hi - lo)
    w = v0 + tau * speed_rate(v0, p, params)  # forward-Euler initialization
    w = min(max(w, lo + shrink), hi - shrink)
    f_lo, f_hi = (f_v0, -f_v0) if lo == v0 else (-f_v0, f_v0)

    converged = False
    for _ in range(50):
        f = residual(w)
        if abs(f) < 1e-10:
            converged = True
            break
        # Maintain the bracket from the residual sign.
        if (f > 0) == (f_lo > 0):
            lo = w
        else:
            hi = w
        step = f / dresidual(w)
        w_new = w - step
        if not (lo < w_new < hi):
            w_new = 0.5 * (lo + hi)
        if abs(w_new - w) < 1e-15 * max(1.0, abs(w)):
            w = w_new
            converged = abs(residual(w)) < 1e-8
            break
        w = w_new

    if not converged:
        if diag is not None:
            diag.append(FLAG_RK4_FALLBACK)
        return _rk4_speed(v0, p, params, tau)
    return max(w, 0.0)


def compensation(
    v0: float,
    p: float,
    params: ModelParams,
    tau: float,
    diag: list | None = None,
) -> float:
    """Mean axial-speed correction for the nonlinear effect of power noise.

    Second-order renormalization of the speed under white power perturbations
    of spectral density ``d_a``:

        dv = -(v0*d_a)/2 * integral_0^tau s^2 / (v0^2 + s*mu)^2 ds
           = -(v0*d_a)/(2*mu^2) * [tau - (2*v0^2/mu)*log(1 + tau*mu/v0^2)
                                   + v0^2*tau/(v0^2 + tau*mu)]

    with mu = p - v0*(alpha*v0 + beta).  The mu -> 0 limit is evaluated by
    series expansion; a non-positive log argument (strong deceleration over a
    long step) is clamped and flagged.
    """
    if params.d_a == 0.0 or tau == 0.0:
        return 0.0
    v0 = max(v0, params.eps_speed)
    mu = p - v0 * (params.alpha * v0 + params.beta)
    x = tau * mu / v0**2
    if abs(x) < 1e-4:
        # dv = -(d_a tau^3)/(6 v0^3) * (1 - 1.5*x) + O(x^2)
        return -(params.d_a * tau**3) / (6.0 * v0**3) * (1.0 - 1.5 * x)
    arg = 1.0 + x
    if arg <= 0.0:
        if diag is not None:
            diag.append(FLAG_LOG_CLAMP)
        arg = params.eps_disc
    denom = v0**2 + tau * mu
    if denom <= 0.0:
        if diag is not None:
            diag.append(FLAG_LOG_CLAMP)
        denom = params.eps_disc * v0**2
    bracket = tau - (2.0 * v0**2 / mu) * np.log(arg) + v0**2 * tau / denom
    return -(v0 * params.d_a) / (2.0 * mu**2) * bracket


def rotation_matrix(c_t: np.ndarray, tau: float) -> np.ndarray:
    """Closed-form matrix exponential of tau*[c_t]_x (Rodrigues form)."""
    c_t = np.asarray(c_t, dtype=float)
    theta = tau * float(np.linalg.norm(c_t))
    k = skew(c_t)
    if theta < 1e-8:
        # Series guard: exact to O(theta^3), branch-free near zero rotation.
        return np.eye(3) + tau * k + 0.5 * tau**2 * (k @ k)
    axis = k * (tau / theta)
    return np.eye(3) + np.sin(theta) * axis + (1.0 - np.cos(theta)) * (axis @ axis)


def rotate_direction(
    v: np.ndarray,
    c_t: np.ndarray,
    tau: float,
    params: ModelParams,
    diag: list | None = None,
) -> np.ndarray:
    """Unit velocity direction after rotating for ``tau`` at angular velocity
    ``c_t``.  Degenerate speed returns the previous direction unchanged."""
    v = np.asarray(v, dtype=float)
    speed = float(np.linalg.norm(v))
    if speed <= params.eps_speed:
        if diag is not None:
            diag.append(FLAG_DEGENERATE_SPEED)
        return v / speed if speed > 0.0 else v.copy()
    return rotation_matrix(c_t, tau) @ (v / speed)


def predict_state(s: State, params: ModelParams, tau: float, diag: list | None = None) -> State:
    """Deterministic one-step prediction of the full state.

    Speed is propagated by the implicit axial relation plus the perturbation
    compensation, the direction by the closed-form rotation; position uses the
    trapezoid of the endpoint velocities.  Power and angular velocity carry
    over unchanged (zero-mean controls).
    """
    if tau < 0:
        raise ValueError("tau must be nonnegative")
    if tau == 0.0:
        return State(x=s.x.copy(), v=s.v.copy(), p=s.p, c_t=s.c_t.copy())
    v0 = s.speed()
    speed_new = predict_axial_speed(v0, s.p, params, tau, diag)
    speed_new = max(speed_new + compensation(v0, s.p, params, tau, diag), 0.0)
    if v0 <= params.eps_speed:
        direction = s.v / v0 if v0 > 0 else np.zeros(3)
        if diag is not None:
            diag.append(FLAG_DEGENERATE_SPEED)
    else:
        direction = rotate_direction(s.v, s.c_t, tau, params, diag)
    v_new = speed_new * direction
    x_new = s.x + 0.5 * tau * (s.v + v_new)
    return State(x=x_new, v=v_new, p=s.p, c_t=s.c_t.copy())


def _affine_coefficients(s: State, params: ModelParams, tau: float, diag: list | None):
    """Shared scalars of the linearized transition.

    Returns (coef_v, coef_p, phi_rot, v_hat) where the predicted velocity
    decomposes as

        v(t+tau) ~= coef_v * v + coef_p * v_hat * p - tau*phi_rot*[v]_x c_T.

    ``coef_p`` uses h = 2/(beta - gamma); at beta ~= gamma (p ~= 0) the root
    sigma2 is floored to keep h bounded, which is flagged.  Returns None when
    the speed is degenerate or the discriminant is clamped.
    """
    v0 = s.speed()
    if v0 <= params.eps_speed:
        return None
    roots = axial_roots(s.p, params)
    if roots.clamped:
        return None
    local: list = []
    w_hat = predict_axial_speed(v0, s.p, params, tau, local)
    if FLAG_RK4_FALLBACK in local:
        if diag is not None:
            diag.extend(local)
        return None
    dv = compensation(v0, s.p, params, tau, local)
    if diag is not None:
        diag.extend(local)
    # exp(-lambda*tau)*g == (w_hat + sigma1)/(v0 + sigma1), exactly.
    egl = (w_hat + roots.sigma1) / (v0 + roots.sigma1)
    decay = 1.0 - egl
    coef_v = egl + dv / v0
    s2 = roots.sigma2
    if abs(s2) < 1e-6 * max(1.0, roots.sigma1):
        # h = 1/(alpha*sigma2) diverges at p ~= 0; floor the root.
        if diag is not None:
            diag.append(FLAG_H_CLAMP)
        s2 = np.copysign(1e-6 * max(1.0, roots.sigma1), s2 if s2 != 0 else -1.0)
    h = 1.0 / (params.alpha * s2)
    coef_p = h * decay
    phi_rot = max(w_hat + dv, 0.0) / v0  # predicted speed over current speed
    return coef_v, coef_p, phi_rot, s.v / v0


def transition_matrix(s: State, params: ModelParams, tau: float, diag: list | None = None) -> np.ndarray:
    """Structured 10x10 transition matrix linearized at ``s``.

    Identity blocks on x->x, p->p and c_T->c_T; the velocity band carries the
    axial decay, the power sensitivity along the current direction and the
    first-order rotation coupling -tau*phi*[v]_x.  Position rows are the
    trapezoid of the velocity rows.  Near-zero speed (or a clamped
    discriminant) degrades to the constant-velocity linearization.
    """
    phi = np.eye(STATE_DIM)
    if tau == 0.0:
        return phi
    coeffs = _affine_coefficients(s, params, tau, diag)
    if coeffs is None:
        if diag is not None:
            diag.append(FLAG_DEGENERATE_SPEED)
        decay = np.exp(-params.alpha * tau)
        phi[VEL, VEL] = decay * np.eye(3)
        phi[POS, VEL] = 0.5 * tau * (1.0 + decay) * np.eye(3)
        return phi
    coef_v, coef_p, phi_rot, v_hat = coeffs
    cross = skew(s.v)
    phi[VEL, VEL] = coef_v * np.eye(3)
    phi[VEL, PWR] = coef_p * v_hat
    phi[VEL, ANG] = -tau * phi_rot * cross
    phi[POS, VEL] = 0.5 * tau * (1.0 + coef_v) * np.eye(3)
    phi[POS, PWR] = 0.5 * tau * coef_p * v_hat
    phi[POS, ANG] = -0.5 * tau**2 * phi_rot * cross
    return phi


def transition_covariance(s: State, params: ModelParams, tau: float, diag: list | None = None) -> np.ndarray:
    """Process covariance of the linearized step.

    Closed-form integral of Phi(u) D_u Phi(u)^T over the step, with the
    power-sensitivity profile taken linear in the sub-interval length and the
    rotation coupling constant, consistent with the transition-matrix blocks.
    Output is symmetrized and floored to PSD.
    """
    q = np.zeros((STATE_DIM, STATE_DIM))
    if tau == 0.0:
        return q
    q[PWR, PWR] = tau * params.d_a
    q[ANG, ANG] = tau * params.d_t

    coeffs = _affine_coefficients(s, params, tau, diag)
    if coeffs is None:
        if diag is not None:
            diag.append(FLAG_DEGENERATE_SPEED)
        return q
    _, coef_p, phi_rot, v_hat = coeffs
    cross = skew(s.v)

    # Axial (power-noise) terms: sensitivity grows ~linearly across the step.
    u1 = params.d_a * coef_p**2 * np.outer(v_hat, v_hat)
    a_vec = params.d_a * coef_p * v_hat
    # Transverse (steering-noise) terms.
    u2 = phi_rot**2 * (cross @ params.d_t @ cross.T)
    t_vec = phi_rot * (cross @ params.d_t)

    q[VEL, VEL] = (tau / 3.0) * u1 + (tau**3 / 3.0) * u2
    q[POS, VEL] = (tau**2 / 8.0) * u1 + (tau**4 / 8.0) * u2
    q[POS, POS] = (tau**3 / 20.0) * u1 + (tau**5 / 20.0) * u2
    q[VEL, PWR] = (tau / 2.0) * a_vec
    q[POS, PWR] = (tau**2 / 6.0) * a_vec
    q[VEL, ANG] = -(tau**2 / 2.0) * t_vec
    q[POS, ANG] = -(tau**3 / 6.0) * t_vec

    q = np.triu(q) + np.triu(q, 1).T
    q = 0.5 * (q + q.T)
    return ensure_psd(q)


def ensure_psd(m: np.ndarray, rel_floor: float = 1e-9) -> np.ndarray:
    """Clip negative eigenvalues when the matrix is meaningfully indefinite.

    Truncated closed forms can go slightly indefinite for large steps; the
    eigendecomposition is only performed when the minimum eigenvalue is below
    ``-rel_floor * trace``.
    """
    m = 0.5 * (m + m.T)
    tr = max(np.trace(m), 0.0)
    w = np.linalg.eigvalsh(m)
    if w.min() >= -rel_floor * max(tr, 1e-300):
        return m
    w, vecs = np.linalg.eigh(m)
    return (vecs * np.clip(w, 0.0, None)) @ vecs.T


def make_transition_step(s: State, params: ModelParams, tau: float) -> TransitionStep:
    """Convenience: linearized transition and covariance at ``s``."""
    diag: list = []
    phi = transition_matrix(s, params, tau, diag)
    q = transition_covariance(s, params, tau, diag)
    return TransitionStep(phi=phi, q=q, tau=tau, flags=tuple(dict.fromkeys(diag)))


def jacobian_transition_covariance(jac: np.ndarray, params: ModelParams, tau: float) -> np.ndarray:
    """Process covariance built from the exact one-step sensitivities.

    Same sub-step noise-injection profile as ``transition_covariance`` (the
    sensitivity of the end-of-step velocity to noise injected at sub-step u
    scales linearly with the remaining time), but with the velocity columns
    of the true Jacobian in place of the factored coefficients.  The factored
    power coefficient passes through zero at the equilibrium speed, which
    collapses the along-track noise and makes the covariance nearly singular
    exactly where a steady platform operates; the Jacobian-based sensitivity
    stays finite there.
    """
    q = np.zeros((STATE_DIM, STATE_DIM))
    if tau == 0.0:
        return q
    q[PWR, PWR] = tau * params.d_a
    q[ANG, ANG] = tau * params.d_t

    j_vp = jac[VEL, PWR]  # d(v_new)/dp, length 3
    j_va = jac[VEL, ANG]  # d(v_new)/dc_T, 3x3
    u = params.d_a * np.outer(j_vp, j_vp) + j_va @ params.d_t @ j_va.T
    a_vec = params.d_a * j_vp
    t_mat = j_va @ params.d_t

    q[VEL, VEL] = (tau / 3.0) * u
    q[POS, VEL] = (tau**2 / 8.0) * u
    q[POS, POS] = (tau**3 / 20.0) * u
    q[VEL, PWR] = (tau / 2.0) * a_vec
    q[POS, PWR] = (tau**2 / 6.0) * a_vec
    q[VEL, ANG] = (tau / 2.0) * t_mat
    q[POS, ANG] = (tau**2 / 6.0) * t_mat

    q = np.triu(q) + np.triu(q, 1).T
    q = 0.5 * (q + q.T)
    return ensure_psd(q)


def fd_linearize_transition(
    s: State, params: ModelParams, tau: float, diag: list | None = None
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Central-finite-difference expansion of the one-step prediction.

    Returns ``(f0, jac, offset)`` with ``f0 = predict(s)`` and
    ``offset = f0 - jac @ s``, so ``jac @ s' + offset`` agrees with the
    prediction to first order around ``s``.  Robust to every branch of the
    prediction (fallbacks included); used as the oracle for the analytic
    Jacobian and as its fallback on flagged steps.
    """
    s0 = s.as_vector()
    f0 = predict_state(s, params, tau, diag).as_vector()
    jac = np.zeros((STATE_DIM, STATE_DIM))
    # Position enters the prediction additively: d(x + ...)/dx = I.
    jac[POS, POS] = np.eye(3)
    for j in range(3, STATE_DIM):
        h = 1e-6 * max(1.0, abs(s0[j]))
        sp = s0.copy()
        sp[j] += h
        sm = s0.copy()
        sm[j] -= h
        fp = predict_state(State.from_vector(sp), params, tau).as_vector()
        fm = predict_state(State.from_vector(sm), params, tau).as_vector()
        jac[:, j] = (fp - fm) / (2.0 * h)
    return f0, jac, f0 - jac @ s0


def _speed_derivatives(v0: float, p: float, w: float, params: ModelParams, tau: float) -> tuple[float, float]:
    """Sensitivities of the implicitly propagated speed ``w`` to ``v0`` and
    ``p``, by the implicit function theorem on the log-domain residual."""
    roots = axial_roots(p, params)
    s1, s2, g = roots.sigma1, roots.sigma2, roots.gamma
    veq = max(0.0, -s2)
    # At (or numerically on) the equilibrium the implicit relation is
    # singular; use the linearized-flow limits: the local decay rate is
    # lambda = -gamma/veq, so dw/dv0 -> exp(lambda tau) and
    # dw/dp -> (1 - exp(lambda tau)) * d(veq)/dp with d(veq)/dp = 1/gamma.
    tol = 1e-9 * max(1.0, veq)
    if veq > 0.0 and (abs(v0 - veq) <= tol or abs(w - veq) <= tol):
        decay = np.exp(-g * tau / veq)
        return decay, (1.0 - decay) / g
    f_w = s1 / (w + s1) - s2 / (w + s2)
    f_v0 = -(s1 / (v0 + s1) - s2 / (v0 + s2))
    # d(gamma)/dp = 2*alpha/gamma; d(sigma1)/dp = 1/gamma = -d(sigma2)/dp.
    ds1 = 1.0 / g
    ds2 = -ds1
    dg = 2.0 * params.alpha / g
    l1 = np.log((w + s1) / (v0 + s1))
    l2 = np.log(abs(w + s2) / abs(v0 + s2))
    f_p = (
        ds1 * (l1 + s1 * (1.0 / (w + s1) - 1.0 / (v0 + s1)))
        - ds2 * (l2 + s2 * (1.0 / (w + s2) - 1.0 / (v0 + s2)))
        + tau * dg
    )
    return -f_v0 / f_w, -f_p / f_w


def _rotation_right_jacobian(theta_vec: np.ndarray) -> np.ndarray:
    """Right Jacobian of the rotation vector -> rotation matrix map."""
    theta = float(np.linalg.norm(theta_vec))
    k = skew(theta_vec)
    if theta < 1e-6:
        return np.eye(3) - 0.5 * k + (k @ k) / 6.0
    return (
        np.eye(3)
        - ((1.0 - np.cos(theta)) / theta**2) * k
        + ((theta - np.sin(theta)) / theta**3) * (k @ k)
    )


def linearize_transition(
    s: State, params: ModelParams, tau: float, diag: list | None = None
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Exact first-order expansion of the one-step prediction at ``s``.

    Returns ``(f0, jac, offset)`` with ``f0 = predict(s)``, ``jac`` the
    Jacobian of the prediction and ``offset = f0 - jac @ s``, so the affine
    model ``jac @ s' + offset`` agrees with the prediction to first order
    around ``s``.

    Unlike the factored transition matrix — which reproduces the prediction
    exactly at the expansion point but distributes it over the state with
    coefficients that are not derivatives — the Jacobian carries the true
    local sensitivities, which is what an iterated Gauss-Newton solve needs
    to contract.  The speed sensitivities come from the implicit function
    theorem, the rotation sensitivity from the SO(3) right Jacobian, and the
    small compensation term is differenced numerically; any flagged fallback
    branch defers to the finite-difference expansion.
    """
    if tau == 0.0:
        f0 = s.as_vector()
        return f0, np.eye(STATE_DIM), np.zeros(STATE_DIM)
    v0 = s.speed()
    local: list = []
    if v0 <= params.eps_speed or axial_roots(s.p, params).clamped:
        return fd_linearize_transition(s, params, tau, diag)
    w = predict_axial_speed(v0, s.p, params, tau, local)
    if FLAG_RK4_FALLBACK in local or FLAG_REST in local:
        if diag is not None:
            diag.extend(local)
        return fd_linearize_transition(s, params, tau, diag)
    dv = compensation(v0, s.p, params, tau, local)
    if diag is not None:
        diag.extend(local)

    dw_dv0, dw_dp = _speed_derivatives(v0, s.p, w, params, tau)
    # The compensation is small and smooth; difference it cheaply.
    h_v = 1e-5 * max(1.0, v0)
    ddv_dv0 = (
        compensation(v0 + h_v, s.p, params, tau) - compensation(v0 - h_v, s.p, params, tau)
    ) / (2.0 * h_v)
    h_p = 1e-5 * max(1.0, abs(s.p))
    ddv_dp = (
        compensation(v0, s.p + h_p, params, tau) - compensation(v0, s.p - h_p, params, tau)
    ) / (2.0 * h_p)

    w_tot = max(w + dv, 0.0)
    dwtot_dv0 = dw_dv0 + ddv_dv0
    dwtot_dp = dw_dp + ddv_dp
    v_hat = s.v / v0
    rot = rotation_matrix(s.c_t, tau)

    a = rot @ ((w_tot / v0) * (np.eye(3) - np.outer(v_hat, v_hat)) + dwtot_dv0 * np.outer(v_hat, v_hat))
    b = dwtot_dp * (rot @ v_hat)
    u = w_tot * v_hat
    c = -tau * rot @ skew(u) @ _rotation_right_jacobian(tau * s.c_t)

    jac = np.zeros((STATE_DIM, STATE_DIM))
    jac[POS, POS] = np.eye(3)
    jac[VEL, VEL] = a
    jac[VEL, PWR] = b
    jac[VEL, ANG] = c
    jac[POS, VEL] = 0.5 * tau * (np.eye(3) + a)
    jac[POS, PWR] = 0.5 * tau * b
    jac[POS, ANG] = 0.5 * tau * c
    jac[PWR, PWR] = 1.0
    jac[ANG, ANG] = np.eye(3)

    v_new = w_tot * (rot @ v_hat)
    f0 = np.concatenate([s.x + 0.5 * tau * (s.v + v_new), v_new, [s.p], s.c_t])
    return f0, jac, f0 - jac @ s.as_vector()
