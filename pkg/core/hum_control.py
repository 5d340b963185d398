"""
Exact boundary controls by the Hilbert Uniqueness Method on a filtered modal band
"""

import logging
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
import scipy.linalg as sla
import scipy.sparse.linalg as spla

from core.assembly import (BoundaryFamily, DiscreteSystem, QuotientSubspace, l2_inner, quotient_project, sample_w,
                           undamped)
from core.beam_model import TimeInterpretation, min_control_time
from core.dynamics import adjoint_integrate, integrate, integrate_backward, load_pairing, time_grid
from core.errors import CoercivityError, SolverError, ValidationError
from core.observability import NormKind, state_norm
from core.spectral import undamped_modes

logger = logging.getLogger('sandhum.core.hum_control')

STEERING_TOL = 1e-6


@dataclass
class HumBand:
    """Band vectors and their dual (adjoint) propagation on one time grid.

    vectors are H-orthonormal: (phi_k / omega_k, 0) and (0, phi_k) for the
    lowest filter_band undamped modes. dual_initial[a] is the dual solution at
    t = 0 started from vectors[a] at t = T and observations[a] the controls
    read off it. pairings[a, b] is the transposition pairing of vectors a and b.
    """
    T: float
    times: np.ndarray
    vectors: np.ndarray
    dual_initial: np.ndarray
    observations: np.ndarray
    gram: np.ndarray
    filter_band: int
    pairings: np.ndarray

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0])

    @property
    def size(self) -> int:
        return self.vectors.shape[0]

    def coefficients(self, system: DiscreteSystem, state: np.ndarray) -> np.ndarray:
        n = system.n
        return self.vectors[:, :n] @ (system.stiffness @ state[:n]) + self.vectors[:, n:] @ (system.mass @ state[n:])

    def project(self, system: DiscreteSystem, state: np.ndarray) -> np.ndarray:
        """Band part of state along the pairing: state minus it pairs to zero with every band vector"""
        paired = np.array([system.pairing(state, v) for v in self.vectors])
        return np.linalg.solve(self.pairings.T, paired) @ self.vectors


@dataclass
class ControlSolution:
    bc: BoundaryFamily
    T: float
    dt: float
    times: np.ndarray
    hum_minimizer: np.ndarray
    control_M: np.ndarray
    control_g: np.ndarray
    krylov_iters: int
    krylov_residual: float
    residual_history: List[float]
    initial_norm: float
    final_norm: float
    filter_band: int
    method: str = 'cg'
    final_norm_unfiltered: float = float('nan')
    steering_tol: float = STEERING_TOL
    converged: Optional[bool] = None

    @property
    def controls(self) -> np.ndarray:
        """Samples (n_times, 1 + n_layers), beam channel first"""
        return np.column_stack([self.control_M, self.control_g])

    @property
    def ratio(self) -> float:
        return self.final_norm / self.initial_norm if self.initial_norm > 0 else 0.0

    def to_dict(self) -> Dict:
        return {
            'bc': self.bc.value,
            'T': self.T,
            'dt': self.dt,
            'method': self.method,
            'filter_band': self.filter_band,
            'krylov_iters': self.krylov_iters,
            'krylov_residual': self.krylov_residual,
            'residual_history': list(self.residual_history),
            'initial_norm': self.initial_norm,
            'final_norm': self.final_norm,
            'final_norm_unfiltered': self.final_norm_unfiltered,
            'ratio': self.ratio,
            'steering_tol': self.steering_tol,
            'converged': self.converged,
        }

    def to_frame(self) -> pd.DataFrame:
        data = {'time': self.times, 'M': self.control_M}
        for j in range(self.control_g.shape[1]):
            data[f'g{2 * j + 1}'] = self.control_g[:, j]
        return pd.DataFrame(data)


def _band_vectors(system: DiscreteSystem, filter_band: int) -> np.ndarray:
    omega2, phi = undamped_modes(system, filter_band)
    n = system.n
    vectors = np.zeros((2 * filter_band, 2 * n))
    vectors[:filter_band, :n] = (phi / np.sqrt(omega2)).T
    vectors[filter_band:, n:] = phi.T
    return vectors


def _pairings(system: DiscreteSystem, vectors: np.ndarray) -> np.ndarray:
    return np.array([[system.pairing(a, b) for b in vectors] for a in vectors])


def _load_traces(system: DiscreteSystem, dual_states: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Z_U paired with each load column and each rate-load column, per grid time"""
    Z_U = dual_states[:, :system.n]
    return Z_U @ system.input_loads, Z_U @ system.input_rate_loads


def _gram_entries(system: DiscreteSystem, times: np.ndarray, controls: np.ndarray,
                  loads: np.ndarray, rate_loads: np.ndarray) -> np.ndarray:
    """sign * sum_k dt (c_bar . beta_bar + c_rate . eps_bar) for every (control set, load trace) pair.

    controls is (n_a, n_times, m); loads and rate_loads are (n_b, n_times, m);
    the result is indexed [b, a].
    """
    dt = np.diff(times)
    c_mid = 0.5 * (controls[:, :-1] + controls[:, 1:])
    c_rate = np.diff(controls, axis=1) / dt[None, :, None]
    beta = 0.5 * (loads[:, :-1] + loads[:, 1:])
    eps = 0.5 * (rate_loads[:, :-1] + rate_loads[:, 1:])
    value = np.einsum('akc,bkc,k->ba', c_mid, beta, dt) + np.einsum('akc,bkc,k->ba', c_rate, eps, dt)
    return system.pairing_sign * value


def build_band(system: DiscreteSystem, T: float, filter_band: int,
               dt: Optional[float] = None, n_steps: Optional[int] = None) -> HumBand:
    """Adjoint-propagate every band vector and assemble the band Gramian"""
    if filter_band < 1 or filter_band > system.n:
        raise ValidationError([f"control.filter_band: must be in [1, {system.n}], got {filter_band}"])
    times, _ = time_grid(T, dt, n_steps)
    vectors = _band_vectors(system, filter_band)

    dual_initial = np.empty_like(vectors)
    observations, loads, rate_loads = [], [], []
    for a, psi in enumerate(vectors):
        dual = adjoint_integrate(system, psi, T, n_steps=times.size - 1)
        dual_initial[a] = dual.states[0]
        observations.append(dual.channel_matrix())
        beta, eps = _load_traces(system, dual.states)
        loads.append(beta)
        rate_loads.append(eps)
    observations = np.array(observations)

    gram = _gram_entries(system, times, observations, np.array(loads), np.array(rate_loads))
    if not system.is_damped:
        gram = 0.5 * (gram + gram.T)
    logger.info(f"Built HUM band: {2 * filter_band} vectors, {times.size - 1} steps, "
                f"Gramian condition {np.linalg.cond(gram):.3e}")
    return HumBand(T=float(T), times=times, vectors=vectors, dual_initial=dual_initial,
                   observations=observations, gram=gram, filter_band=filter_band,
                   pairings=_pairings(system, vectors))


def _check_in_band(system: DiscreteSystem, band: HumBand, state: np.ndarray, name: str) -> None:
    total = system.h_inner(state, state)
    inside = np.sum(band.coefficients(system, state)**2)
    if total > 0 and total - inside > 1e-8 * total:
        raise ValidationError([f"{name}: not in the filtered band ({(total - inside) / total:.2e} outside)"])


def _dual_controls(system: DiscreteSystem, dual_data: np.ndarray, T: float, n_steps: int) -> np.ndarray:
    """Controls read off the dual solution at the grid nodes"""
    return adjoint_integrate(system, dual_data, T, n_steps=n_steps).channel_matrix()


def gramian_apply(system: DiscreteSystem, dual_data: np.ndarray, T: float,
                  dt: Optional[float] = None, filter_band: int = 20,
                  band: Optional[HumBand] = None) -> np.ndarray:
    """Lambda applied to band dual data, matrix-free.

    The dual problem is solved backward from dual_data, the controls read off
    it drive the controlled problem backward from rest at T, and the resulting
    initial state is paired with the dual-propagated band vectors.
    """
    if band is None:
        band = build_band(system, T, filter_band, dt=dt)
    dual_data = np.asarray(dual_data, dtype=float)
    _check_in_band(system, band, dual_data, 'dual_data')
    n_steps = band.times.size - 1
    controls = _dual_controls(system, dual_data, band.T, n_steps)
    X = integrate_backward(system, np.zeros(2 * system.n), band.T, controls, n_steps=n_steps)
    X0 = X.states[0]
    paired = -system.pairing_sign * np.array([system.pairing(X0, d) for d in band.dual_initial])
    return paired @ band.vectors


def _gramian_transpose(system: DiscreteSystem, band: HumBand, coeffs: np.ndarray) -> np.ndarray:
    """Lambda^T on band coefficients from one dual run and the stored band controls"""
    dual = adjoint_integrate(system, coeffs @ band.vectors, band.T, n_steps=band.times.size - 1)
    beta, eps = _load_traces(system, dual.states)
    return _gram_entries(system, band.times, band.observations, beta[None], eps[None])[0]


def band_operator(system: DiscreteSystem, band: HumBand) -> spla.LinearOperator:
    """Lambda on band coefficients as a scipy LinearOperator, every product a pair of integrations"""
    size = band.size

    def matvec(x):
        x = np.ravel(x)
        return band.coefficients(system, gramian_apply(system, x @ band.vectors, band.T, band=band))

    def rmatvec(y):
        return _gramian_transpose(system, band, np.ravel(y))

    return spla.LinearOperator((size, size), matvec=matvec, rmatvec=rmatvec, dtype=float)


def _conjugate_gradient(apply: Callable[[np.ndarray], np.ndarray], b: np.ndarray, tol: float,
                        max_iter: int, floor: float) -> Tuple[np.ndarray, int, List[float]]:
    """CG with a coercivity check on every search direction"""
    x = np.zeros_like(b)
    r = b.copy()
    p = r.copy()
    rr = r @ r
    b_norm = np.sqrt(b @ b)
    history = [float(np.sqrt(rr) / b_norm)]
    for it in range(1, max_iter + 1):
        Ap = apply(p)
        curvature = p @ Ap
        if curvature <= floor * (p @ p):
            raise CoercivityError(f"<Lambda p, p> = {curvature:.3e} at iteration {it}: Gramian not coercive",
                                  residual_history=history)
        alpha = rr / curvature
        x += alpha * p
        r -= alpha * Ap
        rr_new = r @ r
        history.append(float(np.sqrt(rr_new) / b_norm))
        if history[-1] <= tol:
            return x, it, history
        p = r + (rr_new / rr) * p
        rr = rr_new
    raise SolverError(f"conjugate gradients did not reach tol={tol} in {max_iter} iterations",
                      residual_history=history)


def _least_squares(operator: spla.LinearOperator, preconditioner, b: np.ndarray, tol: float,
                   max_iter: int) -> Tuple[np.ndarray, int, List[float]]:
    """LSQR on Lambda P^-1, P the Cholesky-factored undamped band Gramian"""
    size = b.size
    right = spla.LinearOperator(
        (size, size), dtype=float,
        matvec=lambda y: operator.matvec(sla.cho_solve(preconditioner, np.ravel(y))),
        rmatvec=lambda z: sla.cho_solve(preconditioner, operator.rmatvec(np.ravel(z))),
    )
    result = spla.lsqr(right, b, atol=tol, btol=tol, iter_lim=max_iter)
    y, istop, itn = result[0], result[1], result[2]
    x = sla.cho_solve(preconditioner, y)
    residual = float(np.linalg.norm(operator.matvec(x) - b) / np.linalg.norm(b))
    if istop not in (1, 2) and residual > tol:
        raise SolverError(f"LSQR stopped with code {istop} after {itn} iterations, residual {residual:.3e}",
                          residual_history=[residual])
    return x, itn, [residual]


def _undamped_preconditioner(system: DiscreteSystem, band: HumBand, floor: float):
    reference = build_band(undamped(system), band.T, band.filter_band, n_steps=band.times.size - 1)
    lam_min = sla.eigvalsh(reference.gram, subset_by_index=[0, 0])[0]
    if lam_min <= floor:
        raise CoercivityError(f"smallest undamped band Gramian eigenvalue {lam_min:.3e} is not positive")
    return sla.cho_factor(reference.gram)


def family_norm(system: DiscreteSystem, state: np.ndarray) -> float:
    """h-N: higher-order norm, c-D: H-norm modulo M in the transverse velocity, m-m: H_minus_1"""
    if system.bc is BoundaryFamily.MIXED_MIXED:
        return state_norm(system, state, NormKind.H_MINUS_1)
    if system.bc is BoundaryFamily.HINGED_NEUMANN:
        return state_norm(system, state, NormKind.H)
    return quotient_norm(system, state)


def quotient_norm(system: DiscreteSystem, state: np.ndarray) -> float:
    """H-norm with the transverse velocity measured in L2 modulo M = span{e^(+-x/l)}"""
    n = system.n
    U, V = state[:n], state[n:]
    stack = system.stack
    V_full = system.extend(V)
    wdot = sample_w(system, V_full, 0)
    wdot_x = sample_w(system, V_full, 1)
    beam_part = stack.mass_coeff * l2_inner(system, wdot, wdot) + stack.rotary_coeff * l2_inner(system, wdot_x, wdot_x)
    _, outside = quotient_project(system, wdot, QuotientSubspace.M)
    value = (U @ (system.stiffness @ U) + V @ (system.mass @ V) - beam_part
             + stack.mass_coeff * l2_inner(system, outside, outside))
    return float(np.sqrt(max(value, 0.0)))


def transposition_rhs(system: DiscreteSystem, band: HumBand, target_initial_state: np.ndarray) -> np.ndarray:
    """-sign * pairing(Y0, dual_initial[b]) for every band vector b"""
    Y0 = np.asarray(target_initial_state, dtype=float)
    return -system.pairing_sign * np.array([system.pairing(Y0, d) for d in band.dual_initial])


def synthesize_control(system: DiscreteSystem, target_initial_state: np.ndarray, T: float,
                       dt: Optional[float] = None, tol: float = 1e-10, filter_band: int = 20,
                       n_steps: Optional[int] = None, max_iter: Optional[int] = None,
                       coercivity_floor: float = 1e-14, band: Optional[HumBand] = None,
                       verify: bool = True, steering_tol: float = STEERING_TOL) -> ControlSolution:
    """Controls steering target_initial_state to a state with no band component at T.

    With verify, the controlled run is repeated forward and a final/initial
    ratio above steering_tol raises SolverError.
    """
    tau = min_control_time(system.stack, TimeInterpretation.PHYSICAL)
    if T <= tau:
        logger.error(f"Control horizon T={T:.6g} does not exceed tau={tau:.6g}")
        raise CoercivityError(f"T={T:.6g} <= tau={tau:.6g}: the HUM Gramian is not coercive for this horizon")

    Y0 = np.asarray(target_initial_state, dtype=float)
    if band is None:
        band = build_band(system, T, filter_band, dt=dt, n_steps=n_steps)
    outside = system.h_inner(Y0, Y0) - np.sum(band.coefficients(system, Y0)**2)
    if outside > 1e-8 * system.h_inner(Y0, Y0):
        logger.warning("Target has components outside the filtered band; only its band part is steered exactly")

    rhs = transposition_rhs(system, band, Y0)
    if not np.any(rhs):
        logger.info("Zero target: returning zero controls")
        zeros = np.zeros((band.times.size, system.input_loads.shape[1]))
        return ControlSolution(
            bc=system.bc, T=float(T), dt=band.dt, times=band.times, hum_minimizer=np.zeros(2 * system.n),
            control_M=zeros[:, 0], control_g=zeros[:, 1:], krylov_iters=0, krylov_residual=0.0,
            residual_history=[], initial_norm=0.0, final_norm=0.0, filter_band=band.filter_band,
            method='none', final_norm_unfiltered=0.0, steering_tol=steering_tol, converged=True,
        )
    max_iter = 4 * rhs.size if max_iter is None else max_iter
    floor = coercivity_floor * np.linalg.norm(band.gram, 2)
    operator = band_operator(system, band)

    if system.is_damped:
        preconditioner = _undamped_preconditioner(system, band, floor)
        coeffs, iters, history = _least_squares(operator, preconditioner, rhs, tol, max_iter)
        method = 'lsqr'
    else:
        coeffs, iters, history = _conjugate_gradient(operator.matvec, rhs, tol, max(max_iter, 1), floor)
        method = 'cg'
    logger.info(f"HUM {method} converged in {iters} iterations, relative residual {history[-1]:.3e}")

    controls = np.einsum('a,akc->kc', coeffs, band.observations)
    solution = ControlSolution(
        bc=system.bc, T=float(T), dt=band.dt, times=band.times, hum_minimizer=coeffs @ band.vectors,
        control_M=controls[:, 0], control_g=controls[:, 1:], krylov_iters=iters,
        krylov_residual=history[-1], residual_history=history,
        initial_norm=family_norm(system, Y0), final_norm=float('nan'),
        filter_band=band.filter_band, method=method, steering_tol=steering_tol,
    )
    if verify:
        _, ratio = verify_steering(system, Y0, solution, band=band)
        logger.info(f"Steering check: final/initial = {ratio:.3e}")
        if not solution.converged:
            logger.error(f"Steering ratio {ratio:.3e} exceeds {steering_tol:.1e}")
            raise SolverError(f"controlled run ends at {ratio:.3e} of the initial norm, above {steering_tol:.1e}",
                              residual_history=history)
    return solution


def verify_steering(system: DiscreteSystem, target_initial_state: np.ndarray, solution: ControlSolution,
                    band: Optional[HumBand] = None) -> Tuple[float, float]:
    """Forward controlled run; band-restricted family norm of the final state and its ratio to the initial norm"""
    Y0 = np.asarray(target_initial_state, dtype=float)
    traj = integrate(system, Y0, solution.T, n_steps=solution.times.size - 1, controls=solution.controls)
    final = traj.final_state
    if band is None:
        band = _band_vectors_only(system, solution)
    final_band = band.project(system, final)
    final_norm = family_norm(system, final_band)
    initial_norm = family_norm(system, Y0)
    solution.final_norm = final_norm
    solution.initial_norm = initial_norm
    solution.final_norm_unfiltered = family_norm(system, final)
    ratio = final_norm / initial_norm if initial_norm > 0 else 0.0
    solution.converged = bool(ratio <= solution.steering_tol)
    return final_norm, ratio


def _band_vectors_only(system: DiscreteSystem, solution: ControlSolution) -> HumBand:
    vectors = _band_vectors(system, solution.filter_band)
    empty = np.empty((0,))
    return HumBand(T=solution.T, times=solution.times, vectors=vectors, dual_initial=empty,
                   observations=empty, gram=empty, filter_band=solution.filter_band,
                   pairings=_pairings(system, vectors))


def duality_defect(system: DiscreteSystem, initial_state: np.ndarray, controls: np.ndarray,
                   dual_terminal: np.ndarray, T: float, dt: Optional[float] = None,
                   n_steps: Optional[int] = None) -> float:
    """Relative gap between the two sides of the discrete transposition identity.

    pairing(X(T), Z(T)) - pairing(X(0), Z(0)) against the boundary loads of the
    controls paired with the dual displacement, summed over the steps.
    """
    forward = integrate(system, initial_state, T, dt=dt, n_steps=n_steps, controls=controls)
    dual = adjoint_integrate(system, dual_terminal, T, n_steps=forward.times.size - 1)
    volume = (system.pairing(forward.final_state, dual.states[-1])
              - system.pairing(forward.states[0], dual.states[0]))
    boundary = load_pairing(system, forward.times, forward.controls, dual.states)
    scale = max(abs(volume), abs(boundary), np.finfo(float).tiny)
    return abs(volume - boundary) / scale


def smooth_controls(times: np.ndarray, controls: np.ndarray, n_harmonics: int) -> np.ndarray:
    """Keep the lowest n_harmonics Fourier harmonics of each control channel"""
    controls = np.asarray(controls, dtype=float)
    squeeze = controls.ndim == 1
    if squeeze:
        controls = controls[:, None]
    spectrum = np.fft.rfft(controls, axis=0)
    spectrum[n_harmonics + 1:] = 0.0
    smoothed = np.fft.irfft(spectrum, n=times.size, axis=0)
    return smoothed[:, 0] if squeeze else smoothed
