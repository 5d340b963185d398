import dataclasses

import numpy as np
import pytest
import scipy.linalg as sla

from conftest import FAMILIES, build_system, random_state
from core.assembly import (BoundaryFamily, EnergyKind, Mesh, QuotientSubspace, TraceId, TraceMode,
                           apply_generator, assemble, energy, export_triplets, interpolate,
                           quotient_basis, quotient_project, rayleigh_operator, shear_angle,
                           state_from_fields, trace)
from core.elements import LayerOrder, gauss_rule, hermite_cubic, lagrange
from core.errors import UnsupportedTraceError, ValidationError


def test_gauss_rule_integrates_polynomials():
    x, w = gauss_rule(6)
    assert np.isclose(np.sum(w), 1.0)
    assert np.isclose(np.sum(w * x**11), 1.0 / 12.0)


def test_shape_functions_partition_unity():
    xi = np.linspace(0.0, 1.0, 7)
    H = hermite_cubic(xi, 0.5)
    assert np.allclose(H[0, 0] + H[0, 2], 1.0)
    for order in LayerOrder:
        L = lagrange(xi, 0.5, order)
        assert np.allclose(L[0].sum(axis=0), 1.0)
        assert np.allclose(L[1].sum(axis=0), 0.0)


def test_operators_symmetric_and_mass_definite(unit_system):
    for mat in (unit_system.mass, unit_system.stiffness, unit_system.damping):
        assert abs(mat - mat.T).max() <= 1e-12 * max(abs(mat).max(), 1.0)
    assert sla.eigvalsh(unit_system.mass.toarray())[0] > 0.0
    assert sla.eigvalsh(unit_system.stiffness.toarray())[0] > 0.0


def test_undamped_stack_has_zero_damping(unit_system):
    assert unit_system.damping.count_nonzero() == 0
    assert not unit_system.is_damped


def test_decoupled_stiffness_is_block_diagonal(decoupled, family):
    system = build_system(decoupled, family)
    K = system.stiffness.toarray()
    blocks = [system.layout.w_reduced] + list(system.layout.layer_reduced)
    for a, first in enumerate(blocks):
        for b, second in enumerate(blocks):
            if a != b:
                assert np.all(K[first, second] == 0.0)


def test_mesh_length_mismatch_rejected(three_layer):
    with pytest.raises(ValidationError):
        assemble(three_layer, Mesh.uniform(2.0, 4), BoundaryFamily.HINGED_NEUMANN)


def test_boundary_family_aliases():
    assert BoundaryFamily.parse('hinged_neumann') is BoundaryFamily.HINGED_NEUMANN
    assert BoundaryFamily.parse('C-D') is BoundaryFamily.CLAMPED_DIRICHLET
    with pytest.raises(ValueError):
        BoundaryFamily.parse('free')


def test_hinged_layers_are_mean_free(three_layer):
    system = build_system(three_layer, BoundaryFamily.HINGED_NEUMANN)
    full = system.extend(random_state(system)[:system.n])
    ones = np.ones(system.quad_x.size)
    for j in range(three_layer.n_core + 1):
        layer = system.sampling[f'y{j}_0'] @ full
        assert abs(np.sum(system.quad_w * layer * ones)) < 1e-12


def test_shear_angle_zero_state(unit_system):
    assert np.all(shear_angle(unit_system, np.zeros(2 * unit_system.n)) == 0.0)


def test_shear_angle_linear_layers(three_layer):
    system = build_system(three_layer, BoundaryFamily.MIXED_MIXED)
    full = interpolate(system, layers=[lambda x: x, lambda x: -x])
    state = state_from_fields(system, full, np.zeros_like(full))
    phi = shear_angle(system, state)
    assert phi.shape == (1, system.quad_x.size)
    assert np.allclose(phi[0], -2.0 * system.quad_x, atol=1e-12)


def test_shear_angle_shape_mismatch(unit_system):
    with pytest.raises(ValueError):
        shear_angle(unit_system, np.zeros(3))


def test_energy_homogeneity(unit_system):
    Y = random_state(unit_system, 3)
    assert energy(unit_system, np.zeros_like(Y)) == 0.0
    assert np.isclose(energy(unit_system, 2.0 * Y), 4.0 * energy(unit_system, Y))


def test_energy_of_hinged_sine_mode(three_layer):
    system = build_system(three_layer, BoundaryFamily.HINGED_NEUMANN, n_elements=16)
    L = three_layer.length
    k = np.pi / L
    full = interpolate(system, w=lambda x: np.sin(k * x), dw=lambda x: k * np.cos(k * x))
    state = state_from_fields(system, np.zeros_like(full), full)
    expected = 0.5 * (1.0 + k**2) * (L / 2.0)
    assert np.isclose(energy(system, state), expected, rtol=1e-4)


def test_higher_energy_only_for_hinged(three_layer):
    system = build_system(three_layer, BoundaryFamily.CLAMPED_DIRICHLET)
    with pytest.raises(UnsupportedTraceError):
        energy(system, random_state(system), EnergyKind.HIGHER)


def test_trace_of_zero_state(unit_system):
    zero = np.zeros(2 * unit_system.n)
    for which in TraceId:
        assert np.all(np.asarray(trace(unit_system, zero, which)) == 0.0)


def test_second_derivative_trace_of_parabola(three_layer):
    system = build_system(three_layer, BoundaryFamily.HINGED_NEUMANN)
    L = three_layer.length
    full = interpolate(system, w=lambda x: x * (x - L), dw=lambda x: 2 * x - L)
    state = state_from_fields(system, full, np.zeros_like(full))
    assert np.isclose(trace(system, state, TraceId.Z2), 2.0, atol=1e-10)
    assert np.isclose(trace(system, state, TraceId.Z1), L, atol=1e-10)


@pytest.mark.parametrize('k', [1, 2, 3, 4])
def test_recovered_third_derivative_of_hinged_mode(decoupled, k):
    system = build_system(decoupled, BoundaryFamily.HINGED_NEUMANN, n_elements=64)
    beta = k * np.pi / decoupled.length
    full = interpolate(system, w=lambda x: np.sin(beta * x), dw=lambda x: beta * np.cos(beta * x))
    state = state_from_fields(system, full, np.zeros_like(full))
    expected = -beta**3 * np.cos(k * np.pi)
    assert np.isclose(trace(system, state, TraceId.Z3, TraceMode.RECOVERED), expected, rtol=1e-2)
    # the direct value is the constant third derivative of the last cubic
    assert np.isclose(trace(system, state, TraceId.Z3, TraceMode.DIRECT), expected, rtol=3e-2)


def test_direct_layer_curvature_needs_quadratic_elements(three_layer):
    system = build_system(three_layer, BoundaryFamily.HINGED_NEUMANN, y_order='linear')
    with pytest.raises(UnsupportedTraceError):
        trace(system, random_state(system), TraceId.V2, TraceMode.DIRECT)
    # the recovered trace does not differentiate the layer basis twice
    assert np.all(np.isfinite(trace(system, random_state(system), TraceId.V2)))


def test_quotient_projection_idempotent(three_layer):
    system = build_system(three_layer, BoundaryFamily.CLAMPED_DIRICHLET)
    field = 3.0 * quotient_basis(system, QuotientSubspace.H)[0]
    inside, outside = quotient_project(system, field, QuotientSubspace.H)
    assert np.allclose(inside + outside, field)
    assert np.max(np.abs(outside)) < 1e-10 * np.max(np.abs(field))


def _rayleigh_images(system):
    """L applied to every w basis function left free by the boundary conditions"""
    n_w = system.layout.w_reduced.stop
    for k in range(n_w):
        coeffs = np.zeros(system.n)
        coeffs[k] = 1.0
        yield rayleigh_operator(system, system.extend(coeffs))


@pytest.mark.parametrize('bc, subspace', [(BoundaryFamily.CLAMPED_DIRICHLET, QuotientSubspace.M),
                                          (BoundaryFamily.MIXED_MIXED, QuotientSubspace.H)])
def test_rayleigh_images_orthogonal_to_quotient(three_layer, bc, subspace):
    system = build_system(three_layer, bc, n_elements=16)
    basis = quotient_basis(system, subspace)
    basis_norms = np.sqrt(np.sum(system.quad_w * basis**2, axis=1))
    for image in _rayleigh_images(system):
        image_norm = np.sqrt(np.sum(system.quad_w * image**2))
        pairing = basis @ (system.quad_w * image)
        assert np.all(np.abs(pairing) <= 1e-8 * image_norm * basis_norms)


def test_generator_blocks_on_split_states(unit_system):
    n = unit_system.n
    rng = np.random.default_rng(5)
    U, V = rng.standard_normal(n), rng.standard_normal(n)
    out = apply_generator(unit_system, np.concatenate([U, np.zeros(n)]))
    assert np.all(out[:n] == 0.0)
    assert np.allclose(unit_system.mass @ out[n:], -(unit_system.stiffness @ U))
    out = apply_generator(unit_system, np.concatenate([np.zeros(n), V]))
    assert np.array_equal(out[:n], V)


@pytest.mark.parametrize('bc', FAMILIES)
def test_generator_adjoint_relation(damped_three_layer, bc):
    system = build_system(damped_three_layer, bc)
    rng = np.random.default_rng(11)
    for _ in range(100):
        Y, Z = rng.standard_normal((2, 2 * system.n))
        lhs = system.h_inner(apply_generator(system, Y), Z) + system.h_inner(Y, apply_generator(system, Z, -1.0))
        scale = np.sqrt(system.h_inner(Y, Y) * system.h_inner(Z, Z))
        assert abs(lhs) <= 1e-9 * scale


def test_generator_dissipative(damped_three_layer, family):
    system = build_system(damped_three_layer, family)
    Y = random_state(system, 2)
    assert system.h_inner(apply_generator(system, Y), Y) <= 1e-10 * system.h_inner(Y, Y)


def test_export_triplets(tmp_path, three_layer):
    system = build_system(three_layer, BoundaryFamily.CLAMPED_DIRICHLET, n_elements=4)
    path = tmp_path / 'K.txt'
    export_triplets(system, str(path), 'stiffness')
    lines = path.read_text().splitlines()
    assert lines[0].startswith('# stiffness')
    assert len(lines) == 1 + system.stiffness.nnz
    i, j, value = lines[1].split()
    assert np.isclose(float(value), system.stiffness[int(i), int(j)])


def test_higher_energy_needs_quadratic_layers(three_layer):
    system = build_system(three_layer, BoundaryFamily.HINGED_NEUMANN, y_order='linear')
    with pytest.raises(UnsupportedTraceError):
        energy(system, random_state(system), EnergyKind.HIGHER)
    quadratic = build_system(three_layer, BoundaryFamily.HINGED_NEUMANN)
    assert quadratic.higher_stiffness.shape == (quadratic.n, quadratic.n)
    assert energy(quadratic, random_state(quadratic), EnergyKind.HIGHER) > 0.0


@pytest.mark.parametrize('bc', [BoundaryFamily.HINGED_NEUMANN, BoundaryFamily.MIXED_MIXED])
def test_natural_controls_load_boundary_dofs(three_layer, bc):
    system = build_system(three_layer, bc)
    assert system.lift is None
    assert system.pairing_sign == 1.0
    columns = system.reduction @ system.input_loads
    for k, dof in enumerate(system.control_dofs):
        expected = np.zeros(system.layout.n_full)
        expected[dof] = system.observation_weights[k]
        assert np.allclose(columns[:, k], system.reduction @ (system.reduction.T @ expected))


def test_system_carries_only_declared_fields(unit_system):
    declared = {f.name for f in dataclasses.fields(unit_system)}
    assert set(vars(unit_system)) == declared
    assert {'input_loads', 'input_rate_loads', 'dual_observation', 'control_dofs', 'lift'} <= declared
