"""
Physical description of the multilayer sandwich beam
"""

import logging
from dataclasses import dataclass, asdict, fields
from enum import Enum
from typing import Any, Dict, List, Sequence, Tuple

import numpy as np

from core.errors import ValidationError

logger = logging.getLogger('sandhum.core.beam_model')


class TimeInterpretation(str, Enum):
    """How the optimal control time formula is read"""
    PHYSICAL = 'physical'
    LITERAL = 'literal'


@dataclass(frozen=True)
class LayerStack:
    """A 2*n_core+1 layer beam, stiff layers outside.

    Odd (stiff) layers carry densities and Young's moduli, even (compliant)
    layers carry shear moduli and shear damping. mass_coeff, rotary_coeff and
    bending_stiffness are the lumped coefficients of the transverse equation.
    """
    n_core: int
    length: float
    thicknesses: Tuple[float, ...]
    densities_odd: Tuple[float, ...]
    youngs_odd: Tuple[float, ...]
    shear_even: Tuple[float, ...]
    damping_even: Tuple[float, ...]
    mass_coeff: float
    rotary_coeff: float
    bending_stiffness: float

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'LayerStack':
        """Build a stack from a config block (field names verbatim)"""
        names = {f.name for f in fields(cls)}
        unknown = set(data) - names
        missing = names - set(data)
        if unknown or missing:
            diagnostics = [f"{name}: unknown field" for name in sorted(unknown)]
            diagnostics += [f"{name}: missing" for name in sorted(missing)]
            raise ValidationError(diagnostics)

        def vec(key):
            value = data[key]
            if np.isscalar(value):
                value = [value]
            return tuple(float(v) for v in value)

        return cls(
            n_core=int(data['n_core']),
            length=float(data['length']),
            thicknesses=vec('thicknesses'),
            densities_odd=vec('densities_odd'),
            youngs_odd=vec('youngs_odd'),
            shear_even=vec('shear_even'),
            damping_even=vec('damping_even'),
            mass_coeff=float(data['mass_coeff']),
            rotary_coeff=float(data['rotary_coeff']),
            bending_stiffness=float(data['bending_stiffness']),
        )

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        for key, value in data.items():
            if isinstance(value, tuple):
                data[key] = list(value)
        return data

    @classmethod
    def uniform(cls, n_core: int = 1, length: float = 1.0, shear: float = 1.0,
                damping: float = 0.0) -> 'LayerStack':
        """Unit-parameter stack, handy for experiments and tests"""
        return cls(
            n_core=n_core,
            length=length,
            thicknesses=(1.0,) * (2 * n_core + 1),
            densities_odd=(1.0,) * (n_core + 1),
            youngs_odd=(1.0,) * (n_core + 1),
            shear_even=(shear,) * n_core,
            damping_even=(damping,) * n_core,
            mass_coeff=1.0,
            rotary_coeff=1.0,
            bending_stiffness=1.0,
        )

    def with_damping(self, damping: Sequence[float]) -> 'LayerStack':
        """Copy of the stack with different shear damping coefficients"""
        values = dict(self.to_dict())
        values['damping_even'] = list(damping)
        return LayerStack.from_dict(values)

    @property
    def h_odd(self) -> np.ndarray:
        return np.asarray(self.thicknesses[0::2], dtype=float)

    @property
    def h_even(self) -> np.ndarray:
        return np.asarray(self.thicknesses[1::2], dtype=float)

    @property
    def wave_speeds(self) -> np.ndarray:
        return np.sqrt(np.asarray(self.youngs_odd) / np.asarray(self.densities_odd))

    @property
    def beam_speed(self) -> float:
        return float(np.sqrt(self.bending_stiffness / self.rotary_coeff))

    @property
    def decay_length(self) -> float:
        """sqrt(alpha/m), the length scale of the quotient subspaces"""
        return float(np.sqrt(self.rotary_coeff / self.mass_coeff))


@dataclass(frozen=True)
class CouplingMatrices:
    """Coupling between stiff-layer displacements and core shear"""
    A: np.ndarray
    B: np.ndarray
    N: np.ndarray


def validate(stack: LayerStack) -> List[str]:
    """Check all LayerStack invariants, one diagnostic per violated field"""
    diagnostics = []
    n = stack.n_core
    if not isinstance(n, (int, np.integer)) or n < 1:
        diagnostics.append(f"n_core: must be a positive integer, got {n!r}")
        return diagnostics

    expected = {
        'thicknesses': 2 * n + 1,
        'densities_odd': n + 1,
        'youngs_odd': n + 1,
        'shear_even': n,
        'damping_even': n,
    }
    for name, size in expected.items():
        values = getattr(stack, name)
        if len(values) != size:
            diagnostics.append(f"{name}: expected {size} entries for n_core={n}, got {len(values)}")
            continue
        arr = np.asarray(values, dtype=float)
        if not np.all(np.isfinite(arr)):
            diagnostics.append(f"{name}: entries must be finite")
        elif name in ('shear_even', 'damping_even'):
            if np.any(arr < 0):
                diagnostics.append(f"{name}: entries must be nonnegative")
        elif np.any(arr <= 0):
            diagnostics.append(f"{name}: entries must be positive")

    for name in ('length', 'mass_coeff', 'rotary_coeff', 'bending_stiffness'):
        value = getattr(stack, name)
        if not np.isfinite(value) or value <= 0:
            diagnostics.append(f"{name}: must be positive, got {value!r}")

    if diagnostics:
        logger.debug(f"Stack validation found {len(diagnostics)} problems")
    return diagnostics


def _require_valid(stack: LayerStack) -> None:
    diagnostics = validate(stack)
    if diagnostics:
        raise ValidationError(diagnostics)


def build_coupling(stack: LayerStack) -> CouplingMatrices:
    """Coupling matrices A, B (n_core x n_core+1) and the vector N"""
    _require_valid(stack)
    n = stack.n_core
    A = np.zeros((n, n + 1))
    B = np.zeros((n, n + 1))
    # 1-based (i, j) with j in {i, i+1}: sign (-1)^(i+j+1) gives -1 on the diagonal
    for i in range(n):
        A[i, i] = A[i, i + 1] = 0.5
        B[i, i] = -1.0
        B[i, i + 1] = 1.0

    N = (A @ stack.h_odd) / stack.h_even + 1.0
    return CouplingMatrices(A=A, B=B, N=N)


def min_control_time(stack: LayerStack,
                     interpretation: TimeInterpretation = TimeInterpretation.PHYSICAL) -> float:
    """Optimal control time tau.

    physical: 2L over the slowest characteristic speed.
    literal:  the printed formula, 2L / min(sqrt(K/alpha), sqrt(rho_i/E_i)).
    """
    _require_valid(stack)
    interpretation = TimeInterpretation(interpretation)
    if interpretation is TimeInterpretation.PHYSICAL:
        slowest = min(stack.beam_speed, float(np.min(stack.wave_speeds)))
    else:
        slownesses = 1.0 / stack.wave_speeds
        slowest = min(stack.beam_speed, float(np.min(slownesses)))
    return 2.0 * stack.length / slowest
