"""
Ensemble estimates of boundary observability constants
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, asdict, field
from enum import Enum
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy.integrate import cumulative_trapezoid, trapezoid

from core.assembly import (OBSERVED_TRACES, BoundaryFamily, DiscreteSystem, EnergyKind, energy, interpolate,
                           project_admissible)
from core.beam_model import TimeInterpretation, min_control_time
from core.dynamics import Trajectory, _stepper, integrate, time_grid
from core.errors import MissingChannelError, ValidationError
from core.spectral import undamped_modes

logger = logging.getLogger('sandhum.core.observability')


class NormKind(str, Enum):
    H = 'H'
    H_MINUS_1 = 'H_minus_1'


DEFAULT_NORM = {
    BoundaryFamily.HINGED_NEUMANN: NormKind.H,
    BoundaryFamily.CLAMPED_DIRICHLET: NormKind.H,
    BoundaryFamily.MIXED_MIXED: NormKind.H_MINUS_1,
}


@dataclass(frozen=True)
class Ensemble:
    """Random initial data: modal coefficients on mode_band, or data localized near x = 0.

    mode_band is either a count of lowest modes or an inclusive 1-based (first, last) pair.
    """
    n_samples: int = 16
    seed: int = 0
    mode_band: Union[int, Tuple[int, int]] = 10
    localized: bool = False
    support: float = 0.1

    def band(self) -> Tuple[int, int]:
        if isinstance(self.mode_band, (int, np.integer)):
            return 1, int(self.mode_band)
        first, last = self.mode_band
        return int(first), int(last)

    def to_dict(self) -> Dict:
        data = asdict(self)
        data['mode_band'] = list(self.band())
        return data


@dataclass
class ObservabilityReport:
    bc: BoundaryFamily
    T: float
    n_samples: int
    ratio_min: float
    ratio_max: float
    argmin: int
    argmax: int
    norm_kind: NormKind
    ensemble_settings: Dict
    tau_used: float
    ratios: List[float] = field(default_factory=list)

    def to_dict(self) -> Dict:
        return {
            'bc': self.bc.value,
            'T': self.T,
            'n_samples': self.n_samples,
            'ratio_min': self.ratio_min,
            'ratio_max': self.ratio_max,
            'argmin': self.argmin,
            'argmax': self.argmax,
            'norm_kind': self.norm_kind.value,
            'ensemble': self.ensemble_settings,
            'tau_used': self.tau_used,
            'ratios': list(self.ratios),
        }


def trace_energy(trajectory: Trajectory, bc: Optional[BoundaryFamily] = None,
                 upto: Optional[int] = None) -> float:
    """Time integral of the squared observed traces (trapezoidal), optionally up to grid index upto"""
    bc = trajectory.bc if bc is None else BoundaryFamily.parse(bc)
    z_id, v_id = OBSERVED_TRACES[bc]
    names = list(trajectory.trace_channels)
    if z_id.value not in names or not any(name.startswith(v_id.value + '_') for name in names):
        raise MissingChannelError(f"trajectory lacks {z_id.value} / {v_id.value} channels needed for {bc.value}")

    stop = trajectory.times.size if upto is None else upto + 1
    if stop < 2:
        return 0.0
    squared = sum(trajectory.trace_channels[name][:stop]**2 for name in names)
    return float(trapezoid(squared, x=trajectory.times[:stop]))


def state_norm(system: DiscreteSystem, state: np.ndarray, kind: NormKind = NormKind.H) -> float:
    """H: sqrt(a(U) + c(V)), higher-order variant for h-N. H_minus_1: H-norm of A0^-1 Y"""
    kind = NormKind(kind)
    state = np.asarray(state)
    n = system.n
    if np.iscomplexobj(state):
        return float(np.hypot(state_norm(system, state.real, kind), state_norm(system, state.imag, kind)))
    if kind is NormKind.H:
        if system.bc is BoundaryFamily.HINGED_NEUMANN:
            return float(np.sqrt(2.0 * energy(system, state, EnergyKind.HIGHER)))
        return float(np.sqrt(2.0 * energy(system, state, EnergyKind.NATURAL)))

    U, V = state[:n], state[n:]
    MV = system.mass @ V
    value = MV @ system.solve_stiffness(MV) + U @ (system.mass @ U)
    return float(np.sqrt(max(value, 0.0)))


def _modal_states(system: DiscreteSystem, ensemble: Ensemble, rng: np.random.Generator) -> List[np.ndarray]:
    first, last = ensemble.band()
    if first < 1 or last < first or last > system.n:
        raise ValidationError([f"ensemble.mode_band: ({first}, {last}) outside 1..{system.n}"])
    omega2, phi = undamped_modes(system, last)
    omega = np.sqrt(omega2[first - 1:last])
    phi = phi[:, first - 1:last]
    states = []
    for _ in range(ensemble.n_samples):
        a = rng.standard_normal(omega.size)
        b = rng.standard_normal(omega.size)
        states.append(np.concatenate([phi @ (a / omega), phi @ b]))
    return states


def _bump(x: np.ndarray, width: float) -> np.ndarray:
    """sin^2(pi x / width) on [0, width], zero elsewhere"""
    inside = (x >= 0) & (x <= width)
    return np.where(inside, np.sin(np.pi * x / width)**2, 0.0)


def _dbump(x: np.ndarray, width: float) -> np.ndarray:
    inside = (x >= 0) & (x <= width)
    return np.where(inside, (np.pi / width) * np.sin(2 * np.pi * x / width), 0.0)


def _localized_states(system: DiscreteSystem, ensemble: Ensemble, rng: np.random.Generator) -> List[np.ndarray]:
    """Displacements supported in [0, 2 * support * L], at rest"""
    width = ensemble.support * system.stack.length
    n_layers = system.stack.n_core + 1
    mean_free = system.bc is BoundaryFamily.HINGED_NEUMANN

    def layer_shape(x):
        # pair of bumps with opposite sign keeps each layer mean-free in h-N
        return _bump(x, width) - (_bump(x - width, width) if mean_free else 0.0)

    states = []
    for _ in range(ensemble.n_samples):
        amplitudes = rng.standard_normal(n_layers + 1)
        layers = [lambda x, a=a: a * layer_shape(x) for a in amplitudes[1:]]
        full = interpolate(system,
                           w=lambda x: amplitudes[0] * _bump(x, width),
                           dw=lambda x: amplitudes[0] * _dbump(x, width),
                           layers=layers)
        U = project_admissible(system, full)
        states.append(np.concatenate([U, np.zeros(system.n)]))
    return states


def draw_initial_states(system: DiscreteSystem, ensemble: Ensemble) -> List[np.ndarray]:
    """Reproducible ensemble for a given seed"""
    if ensemble.n_samples < 1:
        raise ValidationError([f"ensemble.n_samples: must be positive, got {ensemble.n_samples}"])
    rng = np.random.default_rng(ensemble.seed)
    if ensemble.localized:
        return _localized_states(system, ensemble, rng)
    return _modal_states(system, ensemble, rng)


def _run_samples(system: DiscreteSystem, states: Sequence[np.ndarray], T: float, dt: Optional[float],
                 n_steps: Optional[int], workers: int) -> List[np.ndarray]:
    """Running trace energy of each sample; trajectories are dropped after use"""
    times, step = time_grid(T, dt, n_steps)
    _stepper(system, float(step), 1.0)

    def run(Y0):
        traj = integrate(system, Y0, T, n_steps=times.size - 1)
        squared = sum(values**2 for values in traj.trace_channels.values())
        return cumulative_trapezoid(squared, x=traj.times, initial=0.0)

    if workers <= 1:
        return [run(Y0) for Y0 in states]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(run, states))


def _initial_norms(system: DiscreteSystem, states: Sequence[np.ndarray], kind: NormKind) -> np.ndarray:
    norms = np.array([state_norm(system, Y0, kind) for Y0 in states])
    zero = np.flatnonzero(norms == 0.0)
    if zero.size:
        raise ValidationError([f"ensemble: sample {int(i)} has zero norm" for i in zero])
    return norms


def _norm_for(system: DiscreteSystem, norm_kind: Optional[NormKind]) -> NormKind:
    """H_minus_1 exactly for m-m, H otherwise"""
    expected = DEFAULT_NORM[system.bc]
    if norm_kind is None:
        return expected
    kind = NormKind(norm_kind)
    if kind is not expected:
        raise ValidationError([f"norm_kind: {system.bc.value} observability is measured in {expected.value}, "
                               f"got {kind.value}"])
    return kind


def estimate_constants(system: DiscreteSystem, T: float, ensemble: Ensemble,
                       dt: Optional[float] = None, n_steps: Optional[int] = None,
                       norm_kind: Optional[NormKind] = None,
                       initial_states: Optional[Sequence[np.ndarray]] = None,
                       workers: int = 1) -> ObservabilityReport:
    """Extremes over the ensemble of trace_energy / ||Y0||^2"""
    kind = _norm_for(system, norm_kind)
    if dt is None and n_steps is None:
        n_steps = 2000

    states = list(initial_states) if initial_states is not None else draw_initial_states(system, ensemble)
    norms = _initial_norms(system, states, kind)
    running = _run_samples(system, states, T, dt, n_steps, workers)
    ratios = np.array([r[-1] for r in running]) / norms**2

    report = ObservabilityReport(
        bc=system.bc, T=float(T), n_samples=len(states),
        ratio_min=float(ratios.min()), ratio_max=float(ratios.max()),
        argmin=int(np.argmin(ratios)), argmax=int(np.argmax(ratios)),
        norm_kind=kind, ensemble_settings=ensemble.to_dict(),
        tau_used=min_control_time(system.stack, TimeInterpretation.PHYSICAL),
        ratios=[float(r) for r in ratios],
    )
    logger.info(f"Observability {system.bc.value} T={T:.6g}: ratio in [{report.ratio_min:.6e}, "
                f"{report.ratio_max:.6e}] over {report.n_samples} samples")
    return report


def time_sweep(system: DiscreteSystem, T_grid: Sequence[float], ensemble: Ensemble,
               dt: float, norm_kind: Optional[NormKind] = None, workers: int = 1) -> pd.DataFrame:
    """ratio_min / ratio_max against the horizon T, one integration per sample up to max(T_grid)"""
    T_grid = np.asarray(T_grid, dtype=float)
    if T_grid.size == 0 or np.any(np.diff(T_grid) <= 0):
        raise ValidationError(['sweep.T_grid: must be nonempty and strictly increasing'])
    kind = _norm_for(system, norm_kind)

    states = draw_initial_states(system, ensemble)
    norms = _initial_norms(system, states, kind)
    T_max = T_grid[-1]
    n_steps = max(1, int(round(T_max / dt)))
    running = _run_samples(system, states, T_max, None, n_steps, workers)
    step = T_max / n_steps
    tau = min_control_time(system.stack, TimeInterpretation.PHYSICAL)

    rows = []
    for T in T_grid:
        k = max(1, int(round(T / step)))
        ratios = np.array([r[k] for r in running]) / norms**2
        rows.append({'T': k * step, 'ratio_min': float(ratios.min()), 'ratio_max': float(ratios.max()),
                     'tau': tau, 'bc': system.bc.value})
    logger.info(f"Time sweep {system.bc.value}: {len(rows)} horizons up to T={T_max:.6g} (tau={tau:.6g})")
    return pd.DataFrame(rows, columns=['T', 'ratio_min', 'ratio_max', 'tau', 'bc'])


def forcing_from_field(system: DiscreteSystem, times: np.ndarray,
                       load: Callable[[np.ndarray, float], np.ndarray]) -> np.ndarray:
    """Load vectors (n_times, n) of a transverse load density load(x, t)"""
    weights = system.quad_w
    sampler = system.sampling['w0']
    out = np.empty((times.size, system.n))
    for k, t in enumerate(times):
        out[k] = system.reduction.T @ (sampler.T @ (weights * load(system.quad_x, t)))
    return out


def forcing_norm(system: DiscreteSystem, times: np.ndarray, forcing: np.ndarray) -> float:
    """L2(0, T) norm of the forcing measured in the dual mass norm"""
    forcing = np.asarray(forcing, dtype=float)
    integrand = np.einsum('ij,ij->i', forcing, system.solve_mass(forcing.T).T)
    return float(np.sqrt(trapezoid(integrand, x=times)))


def direct_inequality_check(system: DiscreteSystem, forcing: np.ndarray, T: float,
                            dt: Optional[float] = None, n_steps: Optional[int] = None) -> Tuple[float, bool]:
    """trace_energy / ||F||^2 from rest; (0.0, True) when the forcing vanishes"""
    times, _ = time_grid(T, dt, n_steps)
    norm = forcing_norm(system, times, forcing)
    if norm == 0.0:
        logger.info("Direct inequality check with zero forcing; ratio set to 0")
        return 0.0, True
    traj = integrate(system, np.zeros(2 * system.n), T, n_steps=times.size - 1, forcing=forcing)
    return trace_energy(traj) / norm**2, False
