"""Windowed MAP normal equations and their block-tridiagonal solve.

The posterior over a window of states with Gaussian transition and
observation factors is maximized by a symmetric block-tridiagonal linear
system.  ``assemble`` builds it from linearized transitions and per-time
observations; ``solve`` runs a block LDL^T-style forward elimination and back
substitution, linear in the window length.

A compiled kernel (``plstraj._kernels``) is used when available; a pure-numpy
fallback implements the same contract.  Set ``PLSTRAJ_PURE=1`` to force the
fallback.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .model import TransitionStep

try:  # pragma: no cover - exercised implicitly by the import
    from . import _kernels as _native
except ImportError:  # pragma: no cover
    _native = None

if os.environ.get("PLSTRAJ_PURE"):
    _native = None


class SolverError(RuntimeError):
    """A pivot block stayed non-positive-definite after regularization."""


@dataclass
class ObservationModel:
    """Linear position observation z = H s + noise.

    ``h`` selects the position components; per-(time, sensor) covariances
    live in ``r``, keyed by ``(time_index, sensor_id)``.
    """

    h: np.ndarray
    r: dict = field(default_factory=dict)

    def __post_init__(self):
        self.h = np.asarray(self.h, dtype=float)

    def r_for(self, time_index: int, sensor_id: int) -> np.ndarray:
        return self.r[(time_index, sensor_id)]

    @classmethod
    def position_observer(cls, state_dim: int, obs_dim: int = 3) -> "ObservationModel":
        h = np.zeros((obs_dim, state_dim))
        h[:, :obs_dim] = np.eye(obs_dim)
        return cls(h=h)


@dataclass
class BlockTridiagonalSystem:
    """Symmetric block-tridiagonal normal equations over a window.

    ``diag[i]`` is M[i,i], ``sub[i]`` is M[i+1,i] (the superdiagonal follows
    by symmetry), ``rhs[i]`` the stacked right-hand side.  ``first_index``
    records the absolute time index of the first block.
    """

    diag: np.ndarray
    sub: np.ndarray
    rhs: np.ndarray
    first_index: int = 0
    flags: list = field(default_factory=list)

    def __len__(self) -> int:
        return self.diag.shape[0]

    def dense(self) -> tuple[np.ndarray, np.ndarray]:
        """Explicit dense matrix and rhs (oracle/debugging path)."""
        n, b = self.rhs.shape
        m = np.zeros((n * b, n * b))
        for i in range(n):
            m[i * b : (i + 1) * b, i * b : (i + 1) * b] = self.diag[i]
            if i + 1 < n:
                m[(i + 1) * b : (i + 2) * b, i * b : (i + 1) * b] = self.sub[i]
                m[i * b : (i + 1) * b, (i + 1) * b : (i + 2) * b] = self.sub[i].T
        return m, self.rhs.reshape(-1)


def _robust_inverse(m: np.ndarray, flags: list, label: str) -> np.ndarray:
    """SPD inverse with trace-scaled inflation on failure."""
    m = 0.5 * (m + m.T)
    ident = np.eye(m.shape[0])
    try:
        return cho_solve(cho_factor(m, lower=True), ident)
    except np.linalg.LinAlgError:
        pass
    flags.append(f"inflated-{label}")
    bump = 1e-9 * max(np.trace(m), 1.0)
    for _ in range(40):
        try:
            return cho_solve(cho_factor(m + bump * ident, lower=True), ident)
        except np.linalg.LinAlgError:
            bump *= 10.0
    raise SolverError(f"{label} block cannot be inverted")


def assemble(
    window_states,
    transitions,
    observations,
    obs_model: ObservationModel,
    anchor_state=None,
    anchor_transition: TransitionStep | None = None,
    first_index: int = 0,
) -> BlockTridiagonalSystem:
    """Build the MAP normal equations over the active window.

    Parameters
    ----------
    window_states:
        Sequence of n state vectors (only their count and dimension matter;
        the factors are linear in the states).
    transitions:
        n-1 TransitionStep objects, transitions[i] linking state i to i+1.
    observations:
        Per-time list (length n) of ``(z, sensor_id)`` pairs; empty lists are
        legal (missing observations contribute nothing).
    obs_model:
        Observation matrix and per-(absolute time, sensor) covariances.
    anchor_state, anchor_transition:
        The frozen state preceding the window and the transition linking it
        to the first window state.  Absent for a window starting at time 0.

    The stationarity of the Gaussian log-posterior gives

        M[i,i]   = sum_j H^T R[i,j]^-1 H + Phi_i^T Q_i^-1 Phi_i + Q_{i-1}^-1
        M[i,i-1] = -Q_{i-1}^-1 Phi_{i-1}
        b[i]     = sum_j H^T R[i,j]^-1 z[i,j]  (+ Q^-1 Phi s_anchor at i=0)

    The off-diagonal sign follows from differentiating the transition factor;
    it is validated against the dense oracle in the tests.
    """
    n = len(window_states)
    dim = np.asarray(window_states[0]).shape[-1]
    if len(transitions) != n - 1:
        raise ValueError("need exactly len(states)-1 transitions")
    if len(observations) != n:
        raise ValueError("need one (possibly empty) observation list per state")

    flags: list = []
    h = obs_model.h
    diag = np.zeros((n, dim, dim))
    sub = np.zeros((max(n - 1, 0), dim, dim))
    rhs = np.zeros((n, dim))

    q_inv = [_robust_inverse(t.q, flags, f"q[{i}]") for i, t in enumerate(transitions)]

    for i in range(n):
        for z, sensor_id in observations[i]:
            r_inv = _robust_inverse(
                obs_model.r_for(first_index + i, sensor_id), flags, f"r[{first_index + i},{sensor_id}]"
            )
            hr = h.T @ r_inv
            diag[i] += hr @ h
            rhs[i] += hr @ np.asarray(z, dtype=float)
        if i < n - 1:
            phi = transitions[i].phi
            diag[i] += phi.T @ q_inv[i] @ phi
            sub[i] = -q_inv[i] @ phi
            if transitions[i].offset is not None:
                # Affine transition s_{i+1} = phi s_i + offset + noise: the
                # offset shifts the residual on both linked states.
                qo = q_inv[i] @ transitions[i].offset
                rhs[i] -= phi.T @ qo
                rhs[i + 1] += qo
        if i > 0:
            diag[i] += q_inv[i - 1]

    if anchor_state is not None:
        if anchor_transition is None:
            raise ValueError("anchor_state requires anchor_transition")
        qa_inv = _robust_inverse(anchor_transition.q, flags, "q[anchor]")
        diag[0] += qa_inv
        pred = anchor_transition.phi @ np.asarray(anchor_state, dtype=float)
        if anchor_transition.offset is not None:
            pred = pred + anchor_transition.offset
        rhs[0] += qa_inv @ pred

    return BlockTridiagonalSystem(diag=diag, sub=sub, rhs=rhs, first_index=first_index, flags=flags)


def _block_tridiag_solve_py(diag, sub, rhs):
    """Pure-numpy forward elimination / back substitution (kernel fallback)."""
    n, b = rhs.shape
    x = rhs.copy()
    w = np.empty_like(sub)
    piv_prev = None
    for i in range(n):
        piv = diag[i].copy()
        if i > 0:
            piv -= sub[i - 1] @ w[i - 1]
            x[i] -= sub[i - 1] @ x[i - 1]
        try:
            factor = cho_factor(piv, lower=True)
        except np.linalg.LinAlgError:
            return x, i + 1
        if i < n - 1:
            w[i] = cho_solve(factor, sub[i].T)
        x[i] = cho_solve(factor, x[i])
    for i in range(n - 2, -1, -1):
        x[i] -= w[i] @ x[i + 1]
    return x, 0


def kernel_name() -> str:
    """Which solve kernel is active ('native' or 'python')."""
    return "native" if _native is not None else "python"


def solve_raw(diag, sub, rhs):
    """One elimination sweep; returns (solution, failed_block_or_0)."""
    diag = np.ascontiguousarray(diag, dtype=float)
    sub = np.ascontiguousarray(sub, dtype=float)
    rhs = np.ascontiguousarray(rhs, dtype=float)
    if _native is not None:
        return _native.block_tridiag_solve(diag, sub, rhs)
    return _block_tridiag_solve_py(diag, sub, rhs)


def solve(sys: BlockTridiagonalSystem) -> np.ndarray:
    """Solve the window system; returns an (n, dim) array of states.

    A pivot block that is not positive definite gets a trace-scaled Tikhonov
    bump on the corresponding diagonal block and the sweep is retried once;
    a second failure raises SolverError with the failing block index.
    """
    x, info = solve_raw(sys.diag, sys.sub, sys.rhs)
    if info:
        block = info - 1
        diag = sys.diag.copy()
        bump = 1e-9 * max(np.trace(diag[block]), 1.0)
        diag[block] += bump * np.eye(diag.shape[1])
        sys.flags.append(f"tikhonov[{sys.first_index + block}]")
        x, info = solve_raw(diag, sys.sub, sys.rhs)
        if info:
            raise SolverError(
                f"block {sys.first_index + info - 1} not positive definite after regularization"
            )
    return x
