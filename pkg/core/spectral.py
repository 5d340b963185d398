"""
Spectrum of the discrete generator and decoupled reference frequencies
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
import pandas as pd
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.optimize import brentq

from core.assembly import OBSERVED_TRACES, BoundaryFamily, DiscreteSystem, apply_generator, undamped
from core.beam_model import LayerStack
from core.dynamics import channel_names
from core.errors import SolverError, UnsupportedTraceError, ValidationError

logger = logging.getLogger('sandhum.core.spectral')

# Above this many constrained dofs the sparse shift-invert path is used
DENSE_LIMIT = 2500


@dataclass
class EigenPair:
    """Eigenvalue of the first-order generator with its mode (U, V), V = lambda U"""
    lam: complex
    mode: np.ndarray
    residual: float
    margin_traces: Dict[str, complex] = field(default_factory=dict)

    @property
    def frequency(self) -> float:
        return abs(self.lam.imag)

    def to_dict(self) -> Dict:
        return {
            're': float(self.lam.real),
            'im': float(self.lam.imag),
            'residual': float(self.residual),
            'margin_traces': {name: abs(value) for name, value in self.margin_traces.items()},
        }


def _h_norm(system: DiscreteSystem, Y: np.ndarray) -> float:
    n = system.n
    U, V = Y[:n], Y[n:]
    value = np.vdot(U, system.stiffness @ U) + np.vdot(V, system.mass @ V)
    return float(np.sqrt(max(value.real, 0.0)))


def _residual(system: DiscreteSystem, lam: complex, mode: np.ndarray) -> float:
    applied = apply_generator(system, mode.real) + 1j * apply_generator(system, mode.imag)
    norm = _h_norm(system, mode)
    return _h_norm(system, applied - lam * mode) / norm if norm > 0 else np.inf


def undamped_modes(system: DiscreteSystem, count: int):
    """Lowest generalized eigenpairs of (K, M), modes M-normalized"""
    n = system.n
    if n <= DENSE_LIMIT:
        omega2, phi = sla.eigh(system.stiffness.toarray(), system.mass.toarray(),
                               subset_by_index=[0, count - 1])
    else:
        try:
            omega2, phi = spla.eigsh(system.stiffness.tocsc(), k=count, M=system.mass.tocsc(), sigma=0.0)
        except spla.ArpackNoConvergence as e:
            raise SolverError(f"eigsh did not converge: {e}",
                              indices=list(range(len(e.eigenvalues), count))) from e
        order = np.argsort(omega2)
        omega2, phi = omega2[order], phi[:, order]
        phi = phi / np.sqrt(np.einsum('ij,ij->j', phi, system.mass @ phi))
    return omega2, phi


def _damped_eigen(system: DiscreteSystem, count: int):
    """Lowest-|Im| eigenvalues of the linearized pencil [[0, I], [-K, -D]] - lam [[I, 0], [0, M]]"""
    n = system.n
    eye = sp.identity(n, format='csr')
    A = sp.bmat([[None, eye], [-system.stiffness, -system.damping]], format='csc')
    B = sp.bmat([[eye, None], [None, system.mass]], format='csc')
    if n <= DENSE_LIMIT:
        lam, vecs = sla.eig(A.toarray(), B.toarray())
        finite = np.isfinite(lam)
        lam, vecs = lam[finite], vecs[:, finite]
    else:
        try:
            lam, vecs = spla.eigs(A, k=min(2 * count + 2, 2 * n - 2), M=B, sigma=0.0)
        except spla.ArpackNoConvergence as e:
            raise SolverError(f"eigs did not converge: {e}",
                              indices=list(range(len(e.eigenvalues), 2 * count))) from e
    return lam, vecs


def _sort_key(lam: complex):
    return (round(abs(lam.imag), 12), -lam.imag, lam.real)


def eigenpairs(system: DiscreteSystem, count: int, damping_on: bool = True) -> List[EigenPair]:
    """2 * count eigenpairs (conjugate pairs) of the generator, sorted by |Im lambda|.

    With damping_on=False the undamped generator is used whatever the stack's
    damping; its eigenvalues are +/- i omega with omega^2 from (K, M).
    """
    if count < 1 or count > system.n:
        raise ValidationError([f"eigen.count: must be in [1, {system.n}], got {count}"])

    pairs = []
    if not damping_on or not system.is_damped:
        omega2, phi = undamped_modes(system, count)
        if np.any(omega2 <= 0):
            raise SolverError("nonpositive generalized eigenvalue; stiffness is not definite",
                              indices=[int(i) for i in np.flatnonzero(omega2 <= 0)])
        for w2, u in zip(omega2, phi.T):
            omega = np.sqrt(w2)
            for lam in (1j * omega, -1j * omega):
                mode = np.concatenate([u, lam * u]).astype(complex)
                pairs.append((complex(lam), mode))
        residual_system = undamped(system)
    else:
        lam, vecs = _damped_eigen(system, count)
        order = sorted(range(lam.size), key=lambda k: _sort_key(lam[k]))[:2 * count]
        for k in order:
            mode = vecs[:, k]
            mode = mode / _h_norm(system, mode)
            pairs.append((complex(lam[k]), mode))
        residual_system = system

    pairs.sort(key=lambda item: _sort_key(item[0]))
    names = channel_names(system)
    result = []
    for lam, mode in pairs:
        if abs(lam) < 1e-12:
            raise SolverError("zero eigenvalue encountered")
        traces = system.observation @ np.concatenate([mode[:system.n], lam * mode[:system.n]])
        result.append(EigenPair(lam=lam, mode=mode, residual=_residual(residual_system, lam, mode),
                                margin_traces=dict(zip(names, traces))))

    bad = [k for k, p in enumerate(result) if not np.isfinite(p.residual) or p.residual > 1e-6]
    if bad:
        logger.warning(f"Eigenpairs {bad} have residual above 1e-6")
    logger.info(f"Computed {len(result)} eigenpairs ({system.bc.value}, damping {'on' if damping_on else 'off'}), "
                f"lowest |Im| = {result[0].frequency:.6g}")
    return result


def observed_rows(system: DiscreteSystem, bc: BoundaryFamily) -> np.ndarray:
    """Beam trace row then one row per layer, for the traces observed in family bc"""
    z_id, v_id = OBSERVED_TRACES[BoundaryFamily.parse(bc)]
    return np.vstack([system.traces[z_id][None, :], system.traces[v_id]])


def mode_margins(system: DiscreteSystem, pairs: Sequence[EigenPair], bc: BoundaryFamily) -> np.ndarray:
    """Per mode: sum of squared observed traces of U over ||U||^2 in the stiffness norm"""
    if not pairs:
        raise ValidationError(['pairs: empty'])
    C = observed_rows(system, bc)
    n = system.n
    margins = []
    for pair in pairs:
        U = pair.mode[:n]
        traces = C @ np.concatenate([U, pair.lam * U])
        norm2 = np.vdot(U, system.stiffness @ U).real
        margins.append(float(np.sum(np.abs(traces)**2) / norm2))
    return np.array(margins)


def uniqueness_margin(system: DiscreteSystem, pairs: Sequence[EigenPair], bc: BoundaryFamily) -> float:
    """Smallest observed-trace margin over the modes; zero means a mode invisible at x = L"""
    margin = float(mode_margins(system, pairs, bc).min())
    logger.debug(f"Uniqueness margin over {len(pairs)} modes ({BoundaryFamily.parse(bc).value}): {margin:.6e}")
    return margin


def clamped_beam_root(k: int) -> float:
    """k-th positive root of cos(x) cosh(x) = 1 (Euler-Bernoulli clamped-clamped)"""
    if k < 1:
        raise ValueError(f"mode index must be >= 1, got {k}")
    centre = (k + 0.5) * np.pi
    return brentq(lambda x: np.cos(x) - 1.0 / np.cosh(x), centre - 0.5, centre + 0.5, xtol=1e-14)


def _wavenumbers(stack: LayerStack, omega: float):
    """p, q with p^2, -q^2 the roots of K s^4 + alpha omega^2 s^2 - m omega^2"""
    K, alpha, m = stack.bending_stiffness, stack.rotary_coeff, stack.mass_coeff
    disc = np.sqrt((alpha * omega**2)**2 + 4.0 * K * m * omega**2)
    p2 = (-alpha * omega**2 + disc) / (2.0 * K)
    q2 = (alpha * omega**2 + disc) / (2.0 * K)
    return np.sqrt(p2), np.sqrt(q2)


def _clamped_clamped(stack: LayerStack, omega: float) -> float:
    p, q = _wavenumbers(stack, omega)
    L = stack.length
    return (2.0 / np.cosh(p * L) - 2.0 * np.cos(q * L)
            + (p / q - q / p) * np.tanh(p * L) * np.sin(q * L))


def _clamped_hinged(stack: LayerStack, omega: float) -> float:
    p, q = _wavenumbers(stack, omega)
    L = stack.length
    return p * np.sin(q * L) - q * np.tanh(p * L) * np.cos(q * L)


def _hinged_frequency(stack: LayerStack, k: int) -> float:
    beta = k * np.pi / stack.length
    return float(np.sqrt(stack.bending_stiffness * beta**4 / (stack.mass_coeff + stack.rotary_coeff * beta**2)))


def _kth_root(func, k: int, upper: float) -> float:
    """k-th sign change of func on (0, upper], refined with brentq"""
    for _ in range(8):
        grid = np.linspace(upper * 1e-4, upper, 400 * (k + 2))
        values = np.array([func(w) for w in grid])
        changes = np.flatnonzero(np.sign(values[:-1]) * np.sign(values[1:]) < 0)
        if changes.size >= k:
            i = changes[k - 1]
            return float(brentq(func, grid[i], grid[i + 1], xtol=1e-14, rtol=1e-14))
        upper *= 2.0
    raise SolverError(f"could not bracket root {k} of the beam characteristic equation")


def _parse_block(block: Union[str, int], n_layers: int) -> Optional[int]:
    """None for the beam block, else the 0-based layer index"""
    if isinstance(block, str):
        key = block.replace(' ', '').lower()
        if key == 'beam':
            return None
        if key.startswith('layer'):
            block = int(key[len('layer'):])
        else:
            raise UnsupportedTraceError(f"unknown block {block!r}")
    j = int(block) - 1
    if not 0 <= j < n_layers:
        raise UnsupportedTraceError(f"layer {block} outside 1..{n_layers}")
    return j


def decoupled_frequency(stack: LayerStack, bc: BoundaryFamily, block: Union[str, int], k: int) -> float:
    """k-th angular frequency of one block of the decoupled (G = 0) system.

    block is 'beam' or a 1-based layer number ('layer2' or 2).
    """
    if k < 1:
        raise ValueError(f"mode index must be >= 1, got {k}")
    bc = BoundaryFamily.parse(bc)
    L = stack.length
    j = _parse_block(block, stack.n_core + 1)

    if j is not None:
        speed = stack.wave_speeds[j]
        if bc is BoundaryFamily.MIXED_MIXED:
            beta = (k - 0.5) * np.pi / L
        else:
            beta = k * np.pi / L
        return float(speed * beta)

    if bc is BoundaryFamily.HINGED_NEUMANN:
        return _hinged_frequency(stack, k)
    upper = _hinged_frequency(stack, k + 2)
    if bc is BoundaryFamily.CLAMPED_DIRICHLET:
        return _kth_root(lambda w: _clamped_clamped(stack, w), k, upper)
    return _kth_root(lambda w: _clamped_hinged(stack, w), k, upper)


def eigen_report(system: DiscreteSystem, pairs: Sequence[EigenPair], margin: Optional[float] = None) -> Dict:
    report = {
        'bc': system.bc.value,
        'n_dofs': system.n,
        'n_elements': system.mesh.n_elements,
        'damped': system.is_damped,
        'modes': [p.to_dict() for p in pairs],
    }
    if margin is not None:
        report['uniqueness_margin'] = margin
    return report


def spectrum_frame(pairs: Sequence[EigenPair]) -> pd.DataFrame:
    return pd.DataFrame({
        'index': np.arange(len(pairs)),
        're': [p.lam.real for p in pairs],
        'im': [p.lam.imag for p in pairs],
        'abs': [abs(p.lam) for p in pairs],
        'residual': [p.residual for p in pairs],
    })
