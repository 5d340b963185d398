"""
Crank-Nicolson time integration of the semidiscrete sandwich beam
"""

import logging
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Dict, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import scipy.sparse.linalg as spla
from scipy.integrate import trapezoid

from core.assembly import BoundaryFamily, DiscreteSystem, EnergyKind, energy
from core.errors import InputGridError, SolverError, ValidationError

logger = logging.getLogger('sandhum.core.dynamics')


@dataclass
class Trajectory:
    """Time history of one integration.

    states has one row (U, V) per grid time. trace_channels maps a channel
    name (e.g. "z'''(L)" or "v''(L)_2") to its time samples. damping_sign is
    -1 for dual (adjoint) trajectories. controls holds the boundary control
    samples of a controlled run.
    """
    bc: BoundaryFamily
    times: np.ndarray
    states: np.ndarray
    energies: np.ndarray
    dissipation_integral: np.ndarray
    trace_channels: Dict[str, np.ndarray]
    higher_energies: Optional[np.ndarray] = None
    higher_dissipation_integral: Optional[np.ndarray] = None
    damping_sign: float = 1.0
    has_inputs: bool = False
    weights: Dict[str, float] = field(default_factory=dict)
    controls: Optional[np.ndarray] = None

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0])

    @property
    def T(self) -> float:
        return float(self.times[-1])

    @property
    def final_state(self) -> np.ndarray:
        return self.states[-1]

    def channel_matrix(self) -> np.ndarray:
        """Observed traces stacked as (n_times, n_channels), beam channel first"""
        return np.column_stack([self.trace_channels[name] for name in self.trace_channels])

    def to_frame(self) -> pd.DataFrame:
        data = {'time': self.times, 'energy': self.energies}
        if self.higher_energies is not None:
            data['higher_energy'] = self.higher_energies
        data.update(self.trace_channels)
        data['dissipation'] = self.dissipation_integral
        return pd.DataFrame(data)

    def save_snapshots(self, path: str, at_times: Sequence[float]) -> None:
        """Full-state snapshots at the grid times nearest to the requested ones"""
        idx = np.unique([int(np.argmin(np.abs(self.times - t))) for t in at_times])
        np.savez(path, times=self.times[idx], states=self.states[idx])
        logger.info(f"Saved {idx.size} snapshots to {path}")


def time_grid(T: float, dt: Optional[float] = None, n_steps: Optional[int] = None) -> Tuple[np.ndarray, float]:
    """Uniform grid on [0, T]; dt is adjusted so that T is hit exactly"""
    diagnostics = []
    if not np.isfinite(T) or T <= 0:
        diagnostics.append(f"time.T: must be positive, got {T!r}")
    if n_steps is None:
        if dt is None or not np.isfinite(dt) or dt <= 0:
            diagnostics.append(f"time.dt: must be positive, got {dt!r}")
    elif n_steps < 1:
        diagnostics.append(f"time.n_steps: must be positive, got {n_steps!r}")
    if diagnostics:
        raise ValidationError(diagnostics)

    if n_steps is None:
        n_steps = max(1, int(round(T / dt)))
        if not np.isclose(n_steps * dt, T, rtol=1e-9):
            logger.debug(f"dt adjusted from {dt} to {T / n_steps} to land on T={T}")
    return np.linspace(0.0, T, n_steps + 1), T / n_steps


class _Stepper:
    """Factored Crank-Nicolson step for one (system, dt, damping sign)"""

    def __init__(self, system: DiscreteSystem, dt: float, damping_sign: float):
        M, K, D = system.mass, system.stiffness, damping_sign * system.damping
        lhs = (M + (dt**2 / 4) * K + (dt / 2) * D).tocsc()
        self.explicit = (M - (dt**2 / 4) * K - (dt / 2) * D).tocsr()
        self.stiffness = K
        self.dt = dt
        try:
            self.lu = spla.splu(lhs)
        except RuntimeError as e:
            raise SolverError(f"step matrix factorization failed for dt={dt}: {e}") from e

    def step(self, U: np.ndarray, V: np.ndarray, load: Optional[np.ndarray] = None):
        """Advance one step; load is the midpoint value of the right-hand side of the velocity equation"""
        dt = self.dt
        rhs = self.explicit @ V - dt * (self.stiffness @ U)
        if load is not None:
            rhs += dt * load
        V_new = self.lu.solve(rhs)
        U_new = U + (dt / 2) * (V + V_new)
        return U_new, V_new


@lru_cache(maxsize=16)
def _stepper(system: DiscreteSystem, dt: float, damping_sign: float) -> _Stepper:
    logger.debug(f"Factoring step matrix: n={system.n}, dt={dt:.6g}, damping sign {damping_sign:+.0f}")
    return _Stepper(system, dt, damping_sign)


def _march(system: DiscreteSystem, Y0: np.ndarray, dt: float, n_steps: int, damping_sign: float,
           loads: Optional[np.ndarray] = None) -> np.ndarray:
    """States on the grid; loads has one row per step, shape (n_steps, n)"""
    n = system.n
    stepper = _stepper(system, float(dt), float(damping_sign))
    states = np.empty((n_steps + 1, 2 * n))
    states[0] = Y0
    U, V = Y0[:n].copy(), Y0[n:].copy()
    for k in range(n_steps):
        U, V = stepper.step(U, V, None if loads is None else loads[k])
        states[k + 1, :n] = U
        states[k + 1, n:] = V
    if not np.all(np.isfinite(states[-1])):
        raise SolverError(f"integration produced non-finite values (dt={dt})")
    return states


def _check_state(system: DiscreteSystem, Y: np.ndarray, name: str) -> np.ndarray:
    Y = np.asarray(Y, dtype=float)
    if Y.shape != (2 * system.n,):
        raise ValidationError([f"{name}: expected a state of length {2 * system.n}, got shape {Y.shape}"])
    return Y


def _check_controls(system: DiscreteSystem, controls: np.ndarray, n_times: int) -> np.ndarray:
    controls = np.asarray(controls, dtype=float)
    n_channels = system.input_loads.shape[1]
    if controls.ndim == 1 and n_channels == 1:
        controls = controls[:, None]
    if controls.shape != (n_times, n_channels):
        raise InputGridError(f"controls have shape {controls.shape}, expected ({n_times}, {n_channels})")
    return controls


def control_loads(system: DiscreteSystem, times: np.ndarray, controls: np.ndarray) -> np.ndarray:
    """Per-step loads (n_steps, n) of controls sampled on times, linear between samples.

    Step k carries input_loads at the midpoint value of the controls plus
    input_rate_loads at their difference quotient.
    """
    controls = _check_controls(system, controls, times.size)
    mid = 0.5 * (controls[:-1] + controls[1:])
    rate = np.diff(controls, axis=0) / np.diff(times)[:, None]
    return mid @ system.input_loads.T + rate @ system.input_rate_loads.T


def _forcing_loads(system: DiscreteSystem, forcing: np.ndarray, n_times: int) -> np.ndarray:
    forcing = np.asarray(forcing, dtype=float)
    if forcing.shape != (n_times, system.n):
        raise InputGridError(f"forcing has shape {forcing.shape}, expected ({n_times}, {system.n})")
    return 0.5 * (forcing[:-1] + forcing[1:])


def channel_names(system: DiscreteSystem) -> Tuple[str, ...]:
    z_id, v_id = system.observed
    return (z_id.value,) + tuple(f"{v_id.value}_{j + 1}" for j in range(system.stack.n_core + 1))


def _quadratic(A, X: np.ndarray) -> np.ndarray:
    """Row-wise x.A x for the rows x of X"""
    return np.einsum('ij,ij->i', X, (A @ X.T).T)


def _running_integral(times: np.ndarray, rate: np.ndarray) -> np.ndarray:
    dt = times[1] - times[0]
    return np.concatenate([[0.0], np.cumsum(0.5 * dt * (rate[:-1] + rate[1:]))])


def _trajectory(system: DiscreteSystem, times: np.ndarray, states: np.ndarray, observation: np.ndarray,
                damping_sign: float, has_inputs: bool, controls: Optional[np.ndarray] = None) -> Trajectory:
    n = system.n
    U, V = states[:, :n], states[:, n:]
    energies = 0.5 * (_quadratic(system.stiffness, U) + _quadratic(system.mass, V))
    dissipation = _running_integral(times, _quadratic(system.damping, V))

    higher = higher_dissipation = None
    if system.bc is BoundaryFamily.HINGED_NEUMANN and system.higher_stiffness is not None:
        higher = 0.5 * (_quadratic(system.higher_stiffness, U) + _quadratic(system.higher_mass, V))
        higher_dissipation = _running_integral(times, _quadratic(system.higher_damping, V))

    traces = observation @ states.T
    names = channel_names(system)
    channels = {name: traces[k] for k, name in enumerate(names)}
    weights = {name: float(w) for name, w in zip(names, system.observation_weights)}
    return Trajectory(bc=system.bc, times=times, states=states, energies=energies,
                      dissipation_integral=dissipation, trace_channels=channels,
                      higher_energies=higher, higher_dissipation_integral=higher_dissipation,
                      damping_sign=damping_sign, has_inputs=has_inputs, weights=weights, controls=controls)


def integrate(system: DiscreteSystem, initial_state: np.ndarray, T: float,
              dt: Optional[float] = None, n_steps: Optional[int] = None,
              controls: Optional[np.ndarray] = None,
              forcing: Optional[np.ndarray] = None) -> Trajectory:
    """Forward Crank-Nicolson run.

    controls: samples (n_times, n_channels) of the boundary inputs, beam
    channel first. forcing: samples (n_times, n) of a load in the velocity
    equation M V' + D V + K U = F. For c-D the state holds the displacement
    relative to the lift of the boundary values, see full_displacement.
    """
    times, dt = time_grid(T, dt, n_steps)
    Y0 = _check_state(system, initial_state, 'initial_state')
    loads = None
    if controls is not None:
        controls = _check_controls(system, controls, times.size)
        loads = control_loads(system, times, controls)
    if forcing is not None:
        F = _forcing_loads(system, forcing, times.size)
        loads = F if loads is None else loads + F

    states = _march(system, Y0, dt, times.size - 1, 1.0, loads)
    traj = _trajectory(system, times, states, system.observation, 1.0,
                       has_inputs=loads is not None, controls=controls)
    logger.debug(f"Integrated {system.bc.value} to T={T:.6g} in {times.size - 1} steps, "
                 f"E(0)={traj.energies[0]:.6e}, E(T)={traj.energies[-1]:.6e}")
    return traj


def _reverse(states: np.ndarray, n: int) -> np.ndarray:
    out = states[::-1].copy()
    out[:, n:] *= -1.0
    return out


def adjoint_integrate(system: DiscreteSystem, terminal_state: np.ndarray, T: float,
                      dt: Optional[float] = None, n_steps: Optional[int] = None) -> Trajectory:
    """Dual problem Y' = -G* Y = G(-D) Y solved backward from terminal data at T.

    Reversing time and the sign of the velocity turns it into the forward
    damped problem, so the same factored step is reused. The trace channels
    hold the controls read off the dual solution (dual_observation).
    """
    times, dt = time_grid(T, dt, n_steps)
    YT = _check_state(system, terminal_state, 'terminal_state')
    n = system.n
    Z0 = np.concatenate([YT[:n], -YT[n:]])
    states = _reverse(_march(system, Z0, dt, times.size - 1, 1.0), n)
    return _trajectory(system, times, states, system.dual_observation, -1.0, has_inputs=False)


def integrate_backward(system: DiscreteSystem, terminal_state: np.ndarray, T: float,
                       controls: np.ndarray, dt: Optional[float] = None,
                       n_steps: Optional[int] = None) -> Trajectory:
    """Controlled forward problem solved backward in time from its state at T"""
    times, dt = time_grid(T, dt, n_steps)
    YT = _check_state(system, terminal_state, 'terminal_state')
    n = system.n
    controls = _check_controls(system, controls, times.size)
    loads = control_loads(system, times, controls)
    Z0 = np.concatenate([YT[:n], -YT[n:]])
    states = _march(system, Z0, dt, times.size - 1, -1.0, loads[::-1])
    return _trajectory(system, times, _reverse(states, n), system.observation, 1.0,
                       has_inputs=True, controls=controls)


def load_pairing(system: DiscreteSystem, times: np.ndarray, controls: np.ndarray,
                 dual_states: np.ndarray) -> float:
    """sum over steps of dt * load . midpoint of Z_U, the boundary side of the transposition identity"""
    loads = control_loads(system, times, controls)
    n = system.n
    Z_U = np.asarray(dual_states)[:, :n]
    mid = 0.5 * (Z_U[:-1] + Z_U[1:])
    return float(np.sum(np.diff(times)[:, None] * loads * mid))


def energy_identity_residual(trajectory: Trajectory, kind: Optional[EnergyKind] = None) -> float:
    """E(T) - E(0) + sign * integral of the shear dissipation, trapezoidal in time.

    kind defaults to the higher energy for h-N (differentiated dissipation) and
    the natural energy otherwise.
    """
    if kind is None:
        kind = EnergyKind.HIGHER if trajectory.higher_energies is not None else EnergyKind.NATURAL
    kind = EnergyKind(kind)
    if trajectory.has_inputs:
        logger.warning("Energy identity evaluated on a trajectory with inputs; the residual includes their work")
    if kind is EnergyKind.HIGHER:
        if trajectory.higher_energies is None:
            raise ValidationError([f"energy: no higher-order energy recorded for {trajectory.bc.value}"])
        e, dissipated = trajectory.higher_energies, trajectory.higher_dissipation_integral
    else:
        e, dissipated = trajectory.energies, trajectory.dissipation_integral
    return float(e[-1] - e[0] + trajectory.damping_sign * dissipated[-1])


def damping_loss_constant(system: DiscreteSystem, initial_states: Sequence[np.ndarray], T: float,
                          dt: Optional[float] = None, n_steps: Optional[int] = None) -> float:
    """Smallest C1 with E(T) >= (1 - C1 ||G~|| T) E(0) over the given initial states.

    ||G~|| is the largest shear damping coefficient.
    """
    size = float(np.max(system.stack.damping_even))
    if size <= 0.0:
        raise ValidationError(['stack.damping_even: the loss constant needs nonzero shear damping'])
    if not initial_states:
        raise ValidationError(['initial_states: empty'])
    constants = []
    for Y0 in initial_states:
        traj = integrate(system, Y0, T, dt=dt, n_steps=n_steps)
        e0, eT = traj.energies[0], traj.energies[-1]
        if e0 <= 0.0:
            raise ValidationError(['initial_states: zero-energy state'])
        constants.append((e0 - eT) / (size * T * e0))
    C1 = max(constants)
    logger.info(f"Damping loss constant over {len(constants)} states: C1 = {C1:.6e} (||G~|| = {size:.3g}, T = {T:.6g})")
    return float(C1)


def control_l2_norm(times: np.ndarray, controls: np.ndarray, weights: np.ndarray) -> float:
    """Weighted L2(0, T) norm of sampled controls (trapezoidal)"""
    controls = np.asarray(controls, dtype=float).reshape(times.size, -1)
    integrand = np.sum(weights * controls**2, axis=1)
    return float(np.sqrt(trapezoid(integrand, x=times)))


def control_to_state_bound(system: DiscreteSystem, initial_state: np.ndarray, controls: np.ndarray,
                           T: float, dt: Optional[float] = None,
                           n_steps: Optional[int] = None) -> float:
    """sup_t ||Y(t)||_H / (||Y0||_H + ||u||_L2) for one controlled run"""
    traj = integrate(system, initial_state, T, dt=dt, n_steps=n_steps, controls=controls)
    sup_norm = float(np.sqrt(2.0 * np.max(traj.energies)))
    y0 = np.sqrt(2.0 * energy(system, np.asarray(initial_state, dtype=float), EnergyKind.NATURAL))
    u = control_l2_norm(traj.times, controls, system.observation_weights)
    denominator = y0 + u
    if denominator == 0.0:
        return 0.0
    return sup_norm / denominator
