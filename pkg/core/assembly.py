"""
Finite element semidiscretization of the sandwich beam
"""

import logging
from dataclasses import dataclass, field
from enum import Enum
from functools import lru_cache
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from core.beam_model import CouplingMatrices, LayerStack, build_coupling, validate
from core.elements import LayerOrder, gauss_rule, hermite_cubic, lagrange, nodes_per_element
from core.errors import AssemblyError, UnsupportedTraceError, ValidationError

logger = logging.getLogger('sandhum.core.assembly')

QUADRATURE_POINTS = 6


class BoundaryFamily(str, Enum):
    """Boundary-condition / control configuration"""
    HINGED_NEUMANN = 'h-N'
    CLAMPED_DIRICHLET = 'c-D'
    MIXED_MIXED = 'm-m'

    @classmethod
    def parse(cls, value) -> 'BoundaryFamily':
        if isinstance(value, cls):
            return value
        aliases = {
            'h-n': cls.HINGED_NEUMANN, 'hn': cls.HINGED_NEUMANN, 'hingedneumann': cls.HINGED_NEUMANN,
            'c-d': cls.CLAMPED_DIRICHLET, 'cd': cls.CLAMPED_DIRICHLET, 'clampeddirichlet': cls.CLAMPED_DIRICHLET,
            'm-m': cls.MIXED_MIXED, 'mm': cls.MIXED_MIXED, 'mixedmixed': cls.MIXED_MIXED,
        }
        key = str(value).replace('_', '').replace(' ', '').lower()
        if key not in aliases:
            raise ValueError(f"Unknown boundary family: {value!r}")
        return aliases[key]


class TraceId(str, Enum):
    """Boundary traces at x = L"""
    Z1 = "z'(L)"
    Z2 = "z''(L)"
    Z3 = "z'''(L)"
    V0 = 'v(L)'
    V1 = "v'(L)"
    V2 = "v''(L)"


class TraceMode(str, Enum):
    RECOVERED = 'recovered'
    DIRECT = 'direct'


# Traces observed in each family, beam channel first
OBSERVED_TRACES = {
    BoundaryFamily.HINGED_NEUMANN: (TraceId.Z3, TraceId.V2),
    BoundaryFamily.CLAMPED_DIRICHLET: (TraceId.Z2, TraceId.V1),
    BoundaryFamily.MIXED_MIXED: (TraceId.Z1, TraceId.V0),
}


@dataclass(frozen=True, eq=False)
class Mesh:
    """Partition of [0, L]; w uses Hermite cubics, each layer Lagrange elements"""
    nodes: np.ndarray
    y_order: LayerOrder = LayerOrder.QUADRATIC

    def __post_init__(self):
        nodes = np.asarray(self.nodes, dtype=float)
        if nodes.ndim != 1 or nodes.size < 2:
            raise ValidationError(['mesh.nodes: need at least two nodes'])
        if nodes[0] != 0.0:
            raise ValidationError(['mesh.nodes: first node must be 0'])
        if np.any(np.diff(nodes) <= 0):
            raise ValidationError(['mesh.nodes: element lengths must be positive'])
        object.__setattr__(self, 'nodes', nodes)
        object.__setattr__(self, 'y_order', LayerOrder(self.y_order))

    @classmethod
    def uniform(cls, length: float, n_elements: int,
                y_order: LayerOrder = LayerOrder.QUADRATIC) -> 'Mesh':
        if n_elements < 1:
            raise ValidationError(['mesh.n_elements: must be positive'])
        return cls(np.linspace(0.0, length, n_elements + 1), y_order)

    @property
    def n_elements(self) -> int:
        return self.nodes.size - 1

    @property
    def length(self) -> float:
        return float(self.nodes[-1])


@dataclass(frozen=True)
class DofLayout:
    """Index bookkeeping for the full and the constrained coefficient spaces"""
    n_full: int
    w_full: slice
    layer_full: Tuple[slice, ...]
    n_reduced: int
    w_reduced: slice
    layer_reduced: Tuple[slice, ...]
    layer_order: LayerOrder

    @property
    def n_layers(self) -> int:
        return len(self.layer_full)


@dataclass(frozen=True, eq=False)
class DiscreteSystem:
    """Assembled operators for one stack, mesh and boundary family.

    mass, stiffness and damping act on the constrained (reduced) coefficient
    space. A state is Y = (U, V) of length 2 * n with n = layout.n_reduced.
    Trace functionals are rows acting on Y.

    Boundary controls c (beam channel first, then one per stiff layer) enter
    the velocity equation only: M V' + D V + K U = input_loads c + input_rate_loads c'.
    For h-N and m-m the columns are the natural boundary loads; for c-D they
    come from the Dirichlet lift, and the total displacement is P U + lift c.
    The dual read-out is controls = dual_observation @ Z.
    """
    stack: LayerStack
    mesh: Mesh
    bc: BoundaryFamily
    coupling: CouplingMatrices
    layout: DofLayout
    mass: sp.csr_matrix
    stiffness: sp.csr_matrix
    damping: sp.csr_matrix
    mass_full: sp.csr_matrix
    stiffness_full: sp.csr_matrix
    damping_full: sp.csr_matrix
    reduction: sp.csr_matrix
    kept: np.ndarray
    quad_x: np.ndarray
    quad_w: np.ndarray
    sampling: Dict[str, sp.csr_matrix]
    traces: Dict[TraceId, np.ndarray]
    direct_traces: Dict[TraceId, np.ndarray]
    dual_traces: Dict[TraceId, np.ndarray]
    observation: np.ndarray
    dual_observation: np.ndarray
    observation_weights: np.ndarray
    control_dofs: np.ndarray
    input_loads: np.ndarray
    input_rate_loads: np.ndarray
    pairing_sign: float
    mass_lu: object = field(repr=False)
    stiffness_lu: object = field(repr=False)
    lift: Optional[np.ndarray] = None
    higher_stiffness: Optional[sp.csr_matrix] = None
    higher_mass: Optional[sp.csr_matrix] = None
    higher_damping: Optional[sp.csr_matrix] = None

    @property
    def n(self) -> int:
        return self.layout.n_reduced

    @property
    def is_damped(self) -> bool:
        return self.damping.count_nonzero() > 0

    @property
    def observed(self) -> Tuple[TraceId, TraceId]:
        return OBSERVED_TRACES[self.bc]

    def extend(self, reduced: np.ndarray) -> np.ndarray:
        """Full coefficient vector of a constrained displacement or velocity"""
        return self.reduction @ reduced

    def restrict(self, full: np.ndarray) -> np.ndarray:
        """Constrained coordinates of an admissible full coefficient vector"""
        return np.asarray(full)[self.kept]

    def solve_mass(self, rhs: np.ndarray) -> np.ndarray:
        return self.mass_lu.solve(np.asarray(rhs, dtype=float))

    def solve_stiffness(self, rhs: np.ndarray) -> np.ndarray:
        return self.stiffness_lu.solve(np.asarray(rhs, dtype=float))

    def h_inner(self, Y: np.ndarray, Z: np.ndarray) -> float:
        """Energy inner product a(U, U^) + c(V, V^)"""
        n = self.n
        return float(Y[:n] @ (self.stiffness @ Z[:n]) + Y[n:] @ (self.mass @ Z[n:]))

    def pairing(self, Y: np.ndarray, Z: np.ndarray) -> float:
        """V.M Z_U - U.M Z_V + U.D Z_U for a forward state Y and a dual state Z.

        Along a forward run and a dual run on the same grid it changes per step
        by exactly dt times the midpoint load paired with the midpoint of Z_U.
        """
        n = self.n
        U, V = Y[:n], Y[n:]
        Z_U, Z_V = Z[:n], Z[n:]
        return float(V @ (self.mass @ Z_U) - U @ (self.mass @ Z_V) + U @ (self.damping @ Z_U))


def _essential_dofs(bc: BoundaryFamily, n_el: int, layer_full: Sequence[slice]) -> List[int]:
    w_left = [0, 1]
    w_right = [2 * n_el, 2 * n_el + 1]
    if bc is BoundaryFamily.HINGED_NEUMANN:
        fixed = [w_left[0], w_right[0]]
    elif bc is BoundaryFamily.CLAMPED_DIRICHLET:
        fixed = w_left + w_right
        for s in layer_full:
            fixed += [s.start, s.stop - 1]
    else:
        fixed = w_left + [w_right[0]]
        for s in layer_full:
            fixed.append(s.start)
    return sorted(fixed)


def _reduction(n_full: int, fixed: Sequence[int], layer_full: Sequence[slice],
               layer_means: Optional[List[np.ndarray]]) -> Tuple[sp.csr_matrix, np.ndarray]:
    """Prolongation from constrained coordinates to full coefficients"""
    eliminated = set(fixed)
    pivots = {}
    if layer_means is not None:
        for s, c in zip(layer_full, layer_means):
            pivot = s.start + (s.stop - s.start) // 2
            pivots[pivot] = (s, c)
            eliminated.add(pivot)

    kept = np.array([d for d in range(n_full) if d not in eliminated], dtype=int)
    reduced_index = {d: k for k, d in enumerate(kept)}

    rows, cols, vals = [], [], []
    for d, k in reduced_index.items():
        rows.append(d)
        cols.append(k)
        vals.append(1.0)
    # mean-zero layers: the pivot dof is expressed through the others
    for pivot, (s, c) in pivots.items():
        c_p = c[pivot - s.start]
        for d in range(s.start, s.stop):
            if d != pivot and d in reduced_index:
                rows.append(pivot)
                cols.append(reduced_index[d])
                vals.append(-c[d - s.start] / c_p)

    P = sp.csr_matrix((vals, (rows, cols)), shape=(n_full, kept.size))
    return P, kept


def assemble(stack: LayerStack, mesh: Mesh, bc: BoundaryFamily) -> DiscreteSystem:
    """Assemble mass, stiffness and damping for one boundary family"""
    diagnostics = validate(stack)
    if diagnostics:
        raise ValidationError(diagnostics)
    if not np.isclose(mesh.length, stack.length):
        raise ValidationError([f"mesh.nodes: last node {mesh.length} differs from stack length {stack.length}"])

    bc = BoundaryFamily.parse(bc)
    coupling = build_coupling(stack)
    n_el = mesh.n_elements
    n_layers = stack.n_core + 1
    order = mesh.y_order
    p = nodes_per_element(order) - 1
    n_w = 2 * (n_el + 1)
    n_y = n_el * p + 1
    layer_full = tuple(slice(n_w + j * n_y, n_w + (j + 1) * n_y) for j in range(n_layers))
    n_full = n_w + n_layers * n_y

    h_odd, h_even = stack.h_odd, stack.h_even
    rho_h = np.asarray(stack.densities_odd) * h_odd
    E_h = np.asarray(stack.youngs_odd) * h_odd
    G = np.asarray(stack.shear_even)
    G_t = np.asarray(stack.damping_even)
    A_c, B_c, N_c = coupling.A, coupling.B, coupling.N
    m, alpha, K = stack.mass_coeff, stack.rotary_coeff, stack.bending_stiffness

    xi, wq = gauss_rule(QUADRATURE_POINTS)
    nq = xi.size
    n_loc = 4 + n_layers * (p + 1)

    mass_t, stiff_t, damp_t = ([], [], []), ([], [], []), ([], [], [])
    sample_rows = {key: ([], [], []) for key in
                   ['w0', 'w1', 'w2', 'w3'] + [f'y{j}_{d}' for j in range(n_layers) for d in (0, 1, 2)]}
    layer_means = [np.zeros(n_y) for _ in range(n_layers)]
    quad_x = np.empty(n_el * nq)
    quad_w = np.empty(n_el * nq)

    def scatter(triplet, dofs, local):
        r, c = np.meshgrid(dofs, dofs, indexing='ij')
        triplet[0].append(r.ravel())
        triplet[1].append(c.ravel())
        triplet[2].append(local.ravel())

    def sample(key, q_rows, dofs, values):
        r = np.repeat(q_rows, len(dofs))
        c = np.tile(dofs, len(q_rows))
        sample_rows[key][0].append(r)
        sample_rows[key][1].append(c)
        sample_rows[key][2].append(values.T.ravel())

    for e in range(n_el):
        x0, x1 = mesh.nodes[e], mesh.nodes[e + 1]
        h = x1 - x0
        q_rows = np.arange(e * nq, (e + 1) * nq)
        quad_x[q_rows] = x0 + h * xi
        quad_w[q_rows] = h * wq
        wgt = h * wq

        Hb = hermite_cubic(xi, h)
        Lb = lagrange(xi, h, order)
        w_dofs = np.arange(2 * e, 2 * e + 4)
        y_dofs = [np.arange(s.start + e * p, s.start + e * p + p + 1) for s in layer_full]
        dofs = np.concatenate([w_dofs] + y_dofs)

        # rows over local dofs, evaluated at quadrature points: (nq, n_loc)
        def w_row(d):
            row = np.zeros((nq, n_loc))
            row[:, :4] = Hb[d].T
            return row

        def y_row(j, d):
            row = np.zeros((nq, n_loc))
            start = 4 + j * (p + 1)
            row[:, start:start + p + 1] = Lb[d].T
            return row

        W0, W1, W2 = w_row(0), w_row(1), w_row(2)
        Y0 = [y_row(j, 0) for j in range(n_layers)]
        Y1 = [y_row(j, 1) for j in range(n_layers)]

        def gram(a, b=None):
            b = a if b is None else b
            return a.T @ (wgt[:, None] * b)

        Me = m * gram(W0) + alpha * gram(W1)
        Ke = K * gram(W2)
        De = np.zeros((n_loc, n_loc))
        for j in range(n_layers):
            Me += rho_h[j] * gram(Y0[j])
            Ke += E_h[j] * gram(Y1[j])
        for i in range(stack.n_core):
            shear = N_c[i] * W1
            for j in range(n_layers):
                shear = shear + (B_c[i, j] / h_even[i]) * Y0[j]
            S = gram(shear)
            Ke += G[i] * h_even[i] * S
            De += G_t[i] * h_even[i] * S

        scatter(mass_t, dofs, Me)
        scatter(stiff_t, dofs, Ke)
        scatter(damp_t, dofs, De)

        for d in range(4):
            sample(f'w{d}', q_rows, w_dofs, Hb[d])
        for j in range(n_layers):
            layer_means[j][e * p:e * p + p + 1] += Lb[0] @ wgt
            for d in range(3):
                sample(f'y{j}_{d}', q_rows, y_dofs[j], Lb[d])

    def build(triplet, shape):
        if not triplet[0]:
            return sp.csr_matrix(shape)
        mat = sp.coo_matrix((np.concatenate(triplet[2]),
                             (np.concatenate(triplet[0]), np.concatenate(triplet[1]))), shape=shape)
        mat = mat.tocsr()
        mat.sum_duplicates()
        mat.eliminate_zeros()
        return mat

    shape = (n_full, n_full)
    mass_full = build(mass_t, shape)
    stiffness_full = build(stiff_t, shape)
    damping_full = build(damp_t, shape)
    sampling = {key: build(rows, (n_el * nq, n_full)) for key, rows in sample_rows.items()}

    fixed = _essential_dofs(bc, n_el, layer_full)
    means = layer_means if bc is BoundaryFamily.HINGED_NEUMANN else None
    P, kept = _reduction(n_full, fixed, layer_full, means)

    def reduce(mat):
        out = (P.T @ mat @ P).tocsr()
        out = 0.5 * (out + out.T)
        out.eliminate_zeros()
        return out.tocsr()

    mass = reduce(mass_full)
    stiffness = reduce(stiffness_full)
    damping = reduce(damping_full)

    try:
        mass_lu = spla.splu(mass.tocsc())
        stiffness_lu = spla.splu(stiffness.tocsc())
    except RuntimeError as e:
        logger.error(f"Factorization failed during assembly: {e}")
        raise AssemblyError(f"singular operator: {e}") from e

    w_reduced = slice(0, int(np.searchsorted(kept, n_w)))
    layer_reduced = tuple(slice(int(np.searchsorted(kept, s.start)), int(np.searchsorted(kept, s.stop)))
                          for s in layer_full)
    layout = DofLayout(n_full=n_full, w_full=slice(0, n_w), layer_full=layer_full,
                       n_reduced=kept.size, w_reduced=w_reduced, layer_reduced=layer_reduced,
                       layer_order=order)

    higher = {}
    if bc is BoundaryFamily.HINGED_NEUMANN and order is LayerOrder.QUADRATIC:
        higher = {name: reduce(mat) for name, mat in
                  _derivative_forms(stack, coupling, sampling, quad_w).items()}

    builder = _TraceBuilder(stack=stack, mesh=mesh, coupling=coupling, layout=layout, mass=mass,
                            stiffness=stiffness, damping=damping, mass_full=mass_full,
                            stiffness_full=stiffness_full, damping_full=damping_full,
                            reduction=P, mass_lu=mass_lu)
    traces = builder.functionals(TraceMode.RECOVERED, damping_sign=1.0)
    direct = builder.functionals(TraceMode.DIRECT, damping_sign=1.0)
    dual = builder.functionals(TraceMode.RECOVERED, damping_sign=-1.0)

    z_id, v_id = OBSERVED_TRACES[bc]
    observation = np.vstack([traces[z_id][None, :], traces[v_id]])
    weights = np.concatenate([[K], E_h])
    inputs = builder.boundary_inputs(bc, weights)

    n = kept.size
    logger.info(f"Assembled {bc.value} system: {n_el} elements, {n} constrained dofs "
                f"({n_full} before constraints), damping {'on' if damping.count_nonzero() else 'off'}")

    return DiscreteSystem(stack=stack, mesh=mesh, bc=bc, coupling=coupling, layout=layout, mass=mass,
                          stiffness=stiffness, damping=damping, mass_full=mass_full,
                          stiffness_full=stiffness_full, damping_full=damping_full, reduction=P, kept=kept,
                          quad_x=quad_x, quad_w=quad_w, sampling=sampling,
                          traces=traces, direct_traces=direct, dual_traces=dual,
                          observation=observation, observation_weights=weights,
                          mass_lu=mass_lu, stiffness_lu=stiffness_lu, **inputs, **higher)


def _derivative_forms(stack: LayerStack, coupling: CouplingMatrices, sampling: Dict[str, sp.csr_matrix],
                      quad_w: np.ndarray) -> Dict[str, sp.csr_matrix]:
    """Full-space forms with a(U', U'), c(V', V') and the shear damping of the x-derivative"""
    n_layers = stack.n_core + 1
    h_even = stack.h_even
    rho_h = np.asarray(stack.densities_odd) * stack.h_odd
    E_h = np.asarray(stack.youngs_odd) * stack.h_odd

    def gram(rows, coeff):
        return (rows.T @ sp.diags(coeff * quad_w) @ rows).tocsr()

    w1, w2, w3 = sampling['w1'], sampling['w2'], sampling['w3']
    stiff = gram(w3, stack.bending_stiffness)
    mass = gram(w1, stack.mass_coeff) + gram(w2, stack.rotary_coeff)
    damp = sp.csr_matrix(stiff.shape)
    for j in range(n_layers):
        stiff = stiff + gram(sampling[f'y{j}_2'], E_h[j])
        mass = mass + gram(sampling[f'y{j}_1'], rho_h[j])
    for i in range(stack.n_core):
        shear_rate = coupling.N[i] * w2
        for j in range(n_layers):
            shear_rate = shear_rate + (coupling.B[i, j] / h_even[i]) * sampling[f'y{j}_1']
        stiff = stiff + gram(shear_rate, stack.shear_even[i] * h_even[i])
        damp = damp + gram(shear_rate, stack.damping_even[i] * h_even[i])
    return {'higher_stiffness': stiff, 'higher_mass': mass, 'higher_damping': damp}


@dataclass
class _TraceBuilder:
    """Linear functionals for the boundary traces at x = L"""
    stack: LayerStack
    mesh: Mesh
    coupling: CouplingMatrices
    layout: DofLayout
    mass: sp.csr_matrix
    stiffness: sp.csr_matrix
    damping: sp.csr_matrix
    mass_full: sp.csr_matrix
    stiffness_full: sp.csr_matrix
    damping_full: sp.csr_matrix
    reduction: sp.csr_matrix
    mass_lu: object = field(repr=False)

    def __post_init__(self):
        self.n = self.layout.n_reduced
        n_el = self.mesh.n_elements
        self.w_value_L = 2 * n_el
        self.w_slope_L = 2 * n_el + 1
        h = self.mesh.nodes[-1] - self.mesh.nodes[-2]
        self.herm_L = hermite_cubic(np.array([1.0]), h)[:, :, 0]
        self.lag_L = lagrange(np.array([1.0]), h, self.layout.layer_order)[:, :, 0]

    @property
    def control_dofs(self) -> np.ndarray:
        """w'(L) followed by the right end of each stiff layer"""
        return np.array([self.w_slope_L] + [s.stop - 1 for s in self.layout.layer_full], dtype=int)

    def _full_row(self, entries: Dict[int, float]) -> np.ndarray:
        row = np.zeros(self.layout.n_full)
        for d, value in entries.items():
            row[d] += value
        return row

    def _on_U(self, full_row: np.ndarray) -> np.ndarray:
        out = np.zeros(2 * self.n)
        out[:self.n] = self.reduction.T @ full_row
        return out

    def _on_V(self, full_row: np.ndarray) -> np.ndarray:
        out = np.zeros(2 * self.n)
        out[self.n:] = self.reduction.T @ full_row
        return out

    def _on_acceleration(self, full_row: np.ndarray, damping_sign: float) -> np.ndarray:
        """Row applied to the full acceleration of the homogeneous system"""
        q = self.mass_lu.solve(self.reduction.T @ full_row)
        out = np.empty(2 * self.n)
        out[:self.n] = -(self.stiffness @ q)
        out[self.n:] = -damping_sign * (self.damping @ q)
        return out

    def _w_derivative_row(self, order: int) -> np.ndarray:
        n_el = self.mesh.n_elements
        dofs = np.arange(2 * n_el - 2, 2 * n_el + 2)
        return self._full_row(dict(zip(dofs, self.herm_L[order])))

    def _layer_derivative_row(self, j: int, order: int) -> np.ndarray:
        s = self.layout.layer_full[j]
        k = self.lag_L.shape[1]
        dofs = np.arange(s.stop - k, s.stop)
        return self._full_row(dict(zip(dofs, self.lag_L[order])))

    def _shear_rows(self) -> List[np.ndarray]:
        """Point value of each core shear angle at x = L, as full rows"""
        B, N = self.coupling.B, self.coupling.N
        h_even = self.stack.h_even
        rows = []
        for i in range(self.stack.n_core):
            row = N[i] * self._w_derivative_row(1)
            for j in range(self.stack.n_core + 1):
                row = row + (B[i, j] / h_even[i]) * self._layer_derivative_row(j, 0)
            rows.append(row)
        return rows

    def functionals(self, mode: TraceMode, damping_sign: float) -> Dict[TraceId, np.ndarray]:
        n_layers = self.stack.n_core + 1
        out = {
            TraceId.Z1: self._on_U(self._w_derivative_row(1)),
            TraceId.Z2: self._on_U(self._w_derivative_row(2)),
            TraceId.V0: np.array([self._on_U(self._layer_derivative_row(j, 0)) for j in range(n_layers)]),
            TraceId.V1: np.array([self._on_U(self._layer_derivative_row(j, 1)) for j in range(n_layers)]),
        }
        if mode is TraceMode.DIRECT:
            out[TraceId.Z3] = self._on_U(self._w_derivative_row(3))
            if self.layout.layer_order is LayerOrder.LINEAR:
                out[TraceId.V2] = np.full((n_layers, 2 * self.n), np.nan)
            else:
                out[TraceId.V2] = np.array([self._on_U(self._layer_derivative_row(j, 2))
                                            for j in range(n_layers)])
            return out

        out[TraceId.Z3] = self._recovered_z3(damping_sign)
        out[TraceId.V2] = self._recovered_v2(damping_sign)
        return out

    def _shear_force(self, weights: np.ndarray, damping_sign: float) -> np.ndarray:
        """sum_i weights_i (G_i phi_i(L) +/- G~_i phi_i'(L)) as a row on Y"""
        G, G_t = np.asarray(self.stack.shear_even), np.asarray(self.stack.damping_even)
        row = np.zeros(2 * self.n)
        for i, s_row in enumerate(self._shear_rows()):
            row += weights[i] * G[i] * self._on_U(s_row)
            row += weights[i] * damping_sign * G_t[i] * self._on_V(s_row)
        return row

    def reaction(self, d: int, damping_sign: float) -> np.ndarray:
        """Residual of the homogeneous equations tested with the basis function of full dof d"""
        r_mass = self.mass_full.getrow(d).toarray().ravel()
        r_stiff = self.stiffness_full.getrow(d).toarray().ravel()
        r_damp = self.damping_full.getrow(d).toarray().ravel()
        return (self._on_acceleration(r_mass, damping_sign)
                + self._on_U(r_stiff) + damping_sign * self._on_V(r_damp))

    def boundary_inputs(self, bc: BoundaryFamily, weights: np.ndarray) -> Dict[str, object]:
        """Load columns, rate-load columns, lift and dual read-out of the boundary controls.

        h-N / m-m: the moment M loads w'(L) with K M, the force g_j loads y_j(L)
        with h_j E_j g_j. c-D: w'(L) = M and y_j(L) = g_j through a lift that is
        mass-orthogonal to the constrained space, so only K and D of the lift
        reach the reduced equations. The dual read-out is the boundary reaction
        of the dual solution divided by the weights.
        """
        n = self.n
        P = self.reduction
        dofs = self.control_dofs
        m = dofs.size
        if bc is BoundaryFamily.CLAMPED_DIRICHLET:
            reactions = np.array([self.reaction(d, -1.0) for d in dofs])
            selector = sp.csr_matrix((np.ones(m), (dofs, np.arange(m))), shape=(self.layout.n_full, m))
            coupling = (P.T @ (self.mass_full @ selector)).toarray()
            lift = selector.toarray() - P @ self.mass_lu.solve(coupling)
            return dict(control_dofs=dofs, input_loads=-reactions[:, :n].T, input_rate_loads=reactions[:, n:].T,
                        dual_observation=reactions / weights[:, None], pairing_sign=-1.0, lift=lift)

        points = np.array([P.getrow(d).toarray().ravel() for d in dofs])
        dual_observation = np.hstack([points, np.zeros((m, n))])
        return dict(control_dofs=dofs, input_loads=(points * weights[:, None]).T, input_rate_loads=np.zeros((n, m)),
                    dual_observation=dual_observation, pairing_sign=1.0, lift=None)

    def _recovered_z3(self, damping_sign: float) -> np.ndarray:
        """K z'''(L) = alpha z''_tt'(L) + S(L) - R(phi_L), R the residual at the w(L) lift"""
        stack = self.stack
        residual = self.reaction(self.w_value_L, damping_sign)
        rotary = stack.rotary_coeff * self._on_acceleration(self._full_row({self.w_slope_L: 1.0}), damping_sign)
        shear = self._shear_force(self.coupling.N * stack.h_even, damping_sign)
        return (rotary + shear - residual) / stack.bending_stiffness

    def _recovered_v2(self, damping_sign: float) -> np.ndarray:
        """E_j h_j v_j''(L) = rho_j h_j v_j_tt(L) + (B^T shear force)_j(L)"""
        stack = self.stack
        h_odd = stack.h_odd
        B = self.coupling.B
        rows = []
        for j in range(stack.n_core + 1):
            s = self.layout.layer_full[j]
            acc = self._on_acceleration(self._full_row({s.stop - 1: 1.0}), damping_sign)
            row = stack.densities_odd[j] * h_odd[j] * acc
            row = row + self._shear_force(B[:, j], damping_sign)
            rows.append(row / (stack.youngs_odd[j] * h_odd[j]))
        return np.array(rows)


# Field evaluation helpers

def sample_w(system: DiscreteSystem, w_full: np.ndarray, derivative: int = 0) -> np.ndarray:
    """w or one of its x-derivatives at the quadrature points"""
    return system.sampling[f'w{derivative}'] @ w_full


def sample_layer(system: DiscreteSystem, full: np.ndarray, layer: int, derivative: int = 0) -> np.ndarray:
    return system.sampling[f'y{layer}_{derivative}'] @ full


def interpolate(system: DiscreteSystem,
                w: Optional[Callable] = None, dw: Optional[Callable] = None,
                layers: Optional[Sequence[Optional[Callable]]] = None) -> np.ndarray:
    """Full coefficient vector interpolating the given fields.

    w needs its derivative dw (Hermite dofs); layers are nodal interpolants.
    """
    mesh = system.mesh
    full = np.zeros(system.layout.n_full)
    if w is not None:
        full[0:2 * (mesh.n_elements + 1):2] = w(mesh.nodes)
        full[1:2 * (mesh.n_elements + 1):2] = dw(mesh.nodes)
    if layers is not None:
        p = nodes_per_element(mesh.y_order) - 1
        x = np.empty(mesh.n_elements * p + 1)
        x[0::p] = mesh.nodes
        if p == 2:
            x[1::2] = 0.5 * (mesh.nodes[:-1] + mesh.nodes[1:])
        for j, f in enumerate(layers):
            if f is not None:
                full[system.layout.layer_full[j]] = f(x)
    return full


def state_from_fields(system: DiscreteSystem, displacement: np.ndarray, velocity: np.ndarray) -> np.ndarray:
    """Y = (U, V) in constrained coordinates from full coefficient vectors"""
    return np.concatenate([system.restrict(displacement), system.restrict(velocity)])


def shear_angle(system: DiscreteSystem, state_coeffs: np.ndarray) -> np.ndarray:
    """phi_E = h_E^-1 B v_O + N z' at the quadrature points, shape (n_core, n_points)"""
    state_coeffs = np.asarray(state_coeffs, dtype=float)
    n = system.n
    if state_coeffs.shape not in ((n,), (2 * n,)):
        raise ValueError(f"State has shape {state_coeffs.shape}, expected ({n},) or ({2 * n},)")
    full = system.extend(state_coeffs[:n])
    B, N = system.coupling.B, system.coupling.N
    z1 = sample_w(system, full, 1)
    layers = [sample_layer(system, full, j) for j in range(system.stack.n_core + 1)]
    phi = np.empty((system.stack.n_core, system.quad_x.size))
    for i in range(system.stack.n_core):
        phi[i] = N[i] * z1 + sum(B[i, j] * layers[j] for j in range(len(layers))) / system.stack.h_even[i]
    return phi


class EnergyKind(str, Enum):
    NATURAL = 'natural'
    HIGHER = 'higher'


def energy(system: DiscreteSystem, state_coeffs: np.ndarray,
           kind: EnergyKind = EnergyKind.NATURAL) -> float:
    """Natural energy 1/2 (a(U) + c(V)); for h-N also the higher-order energy.

    The higher energy is 1/2 (a(U') + c(V')) with ' the x-derivative, the
    forms evaluated on the differentiated fields at the quadrature points.
    """
    kind = EnergyKind(kind)
    n = system.n
    U, V = state_coeffs[:n], state_coeffs[n:]
    if kind is EnergyKind.NATURAL:
        return 0.5 * float(U @ (system.stiffness @ U) + V @ (system.mass @ V))
    _require_higher(system)
    return 0.5 * float(U @ (system.higher_stiffness @ U) + V @ (system.higher_mass @ V))


def _require_higher(system: DiscreteSystem) -> None:
    if system.bc is not BoundaryFamily.HINGED_NEUMANN:
        raise UnsupportedTraceError(f"higher-order energy is only defined for h-N, not {system.bc.value}")
    if system.higher_stiffness is None:
        raise UnsupportedTraceError("higher-order energy needs quadratic layer elements")


def full_displacement(system: DiscreteSystem, U: np.ndarray, control: Optional[np.ndarray] = None) -> np.ndarray:
    """Full coefficients of the displacement, the c-D lift of the boundary values included"""
    full = system.extend(np.asarray(U, dtype=float))
    if control is not None and system.lift is not None:
        full = full + system.lift @ np.asarray(control, dtype=float)
    return full


def boundary_values(system: DiscreteSystem, full: np.ndarray) -> np.ndarray:
    """w'(L) and y_j(L) of a full coefficient vector, in control channel order"""
    return np.asarray(full)[system.control_dofs]


@lru_cache(maxsize=8)
def undamped(system: DiscreteSystem) -> DiscreteSystem:
    """The same stack, mesh and family with every shear damping coefficient set to zero"""
    if not system.is_damped:
        return system
    stack = system.stack.with_damping([0.0] * system.stack.n_core)
    return assemble(stack, system.mesh, system.bc)


def trace(system: DiscreteSystem, state_coeffs: np.ndarray, which: TraceId,
          mode: TraceMode = TraceMode.RECOVERED):
    """Boundary trace at x = L; scalar for z traces, one value per layer for v traces"""
    which = TraceId(which)
    mode = TraceMode(mode)
    table = system.traces if mode is TraceMode.RECOVERED else system.direct_traces
    functional = table[which]
    if np.isnan(functional).any():
        raise UnsupportedTraceError(f"{which.value} needs quadratic layer elements in direct mode")
    value = functional @ np.asarray(state_coeffs, dtype=float)
    return float(value) if np.ndim(value) == 0 else value


class QuotientSubspace(str, Enum):
    M = 'M'
    H = 'H'


def quotient_basis(system: DiscreteSystem, subspace: QuotientSubspace) -> np.ndarray:
    """Basis of M = span{e^(-x/l), e^(x/l)} or H = span{sinh((x-L)/l)}, l = sqrt(alpha/m)"""
    ell = system.stack.decay_length
    x, L = system.quad_x, system.stack.length
    if QuotientSubspace(subspace) is QuotientSubspace.M:
        # e^((x-L)/l) spans the same line as e^(x/l) without overflow
        return np.vstack([np.exp(-x / ell), np.exp((x - L) / ell)])
    return np.sinh((x - L) / ell)[None, :]


def quotient_project(system: DiscreteSystem, w_field: np.ndarray,
                     subspace: QuotientSubspace) -> Tuple[np.ndarray, np.ndarray]:
    """L2-orthogonal split of a sampled field into (part in subspace, orthogonal part)"""
    basis = quotient_basis(system, subspace)
    wq = system.quad_w
    gram = basis @ (wq[:, None] * basis.T)
    coeffs = np.linalg.solve(gram, basis @ (wq * w_field))
    inside = coeffs @ basis
    return inside, w_field - inside


def rayleigh_operator(system: DiscreteSystem, w_full: np.ndarray) -> np.ndarray:
    """(m - alpha d^2/dx^2) w at the quadrature points"""
    stack = system.stack
    return stack.mass_coeff * sample_w(system, w_full, 0) - stack.rotary_coeff * sample_w(system, w_full, 2)


def l2_inner(system: DiscreteSystem, f: np.ndarray, g: np.ndarray) -> float:
    return float(np.sum(system.quad_w * f * g))


def export_triplets(system: DiscreteSystem, path: str, which: str = 'stiffness') -> None:
    """Write one assembled operator as 'i j value' lines"""
    mat = getattr(system, which).tocoo()
    order = np.lexsort((mat.col, mat.row))
    with open(path, 'w', encoding='utf-8', newline='\n') as f:
        f.write(f"# {which} {mat.shape[0]} {mat.shape[1]} {mat.nnz} ({system.bc.value})\n")
        for k in order:
            f.write(f"{mat.row[k]} {mat.col[k]} {mat.data[k]:.17e}\n")
    logger.info(f"Exported {which} ({mat.nnz} entries) to {path}")


def generator_blocks(system: DiscreteSystem) -> Tuple[spla.LinearOperator, spla.LinearOperator]:
    """A1 = M^-1 K and A2 = -M^-1 D as linear operators on the constrained space"""
    n = system.n
    A1 = spla.LinearOperator((n, n), matvec=lambda U: system.solve_mass(system.stiffness @ U), dtype=float)
    A2 = spla.LinearOperator((n, n), matvec=lambda V: -system.solve_mass(system.damping @ V), dtype=float)
    return A1, A2


def apply_generator(system: DiscreteSystem, state_coeffs: np.ndarray, damping_sign: float = 1.0) -> np.ndarray:
    """G(U, V) = (V, -A1 U + sign * A2 V); sign -1 gives the H-adjoint up to a minus"""
    n = system.n
    U, V = state_coeffs[:n], state_coeffs[n:]
    out = np.empty(2 * n)
    out[:n] = V
    out[n:] = -system.solve_mass(system.stiffness @ U + damping_sign * (system.damping @ V))
    return out


def project_admissible(system: DiscreteSystem, full: np.ndarray) -> np.ndarray:
    """Mass-orthogonal projection of a full coefficient vector onto the constrained space"""
    return system.solve_mass(system.reduction.T @ (system.mass_full @ np.asarray(full, dtype=float)))
