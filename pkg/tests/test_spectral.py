import dataclasses

import numpy as np
import pytest

from conftest import FAMILIES, build_system, with_length
from core.assembly import BoundaryFamily
from core.beam_model import LayerStack
from core.errors import UnsupportedTraceError, ValidationError
from core.observability import NormKind, state_norm
from core.spectral import (clamped_beam_root, decoupled_frequency, eigen_report, eigenpairs, spectrum_frame,
                           mode_margins, undamped_modes, uniqueness_margin)


def _closest(frequencies, target):
    frequencies = np.asarray(frequencies)
    return frequencies[np.argmin(np.abs(frequencies - target))]


def test_decoupled_hinged_beam_frequency():
    stack = with_length(LayerStack.uniform(n_core=1, shear=0.0), np.pi)
    assert np.isclose(decoupled_frequency(stack, 'h-N', 'beam', 1), np.sqrt(0.5))


def test_decoupled_neumann_wave_frequency():
    stack = with_length(LayerStack.uniform(n_core=1, shear=0.0), np.pi)
    assert np.isclose(decoupled_frequency(stack, BoundaryFamily.HINGED_NEUMANN, 'layer1', 1), 1.0)
    assert np.isclose(decoupled_frequency(stack, BoundaryFamily.MIXED_MIXED, 2, 3), 2.5)


def test_clamped_beam_root():
    assert np.isclose(clamped_beam_root(1), 4.7300, atol=1e-4)
    assert np.isclose(np.cos(clamped_beam_root(2)) * np.cosh(clamped_beam_root(2)), 1.0)


def test_clamped_beam_without_rotary_inertia():
    stack = dataclasses.replace(LayerStack.uniform(n_core=1, shear=0.0), rotary_coeff=1e-10)
    omega = decoupled_frequency(stack, 'c-D', 'beam', 1)
    assert np.isclose(omega, clamped_beam_root(1)**2, rtol=1e-4)


def test_decoupled_frequency_rejects_unknown_block():
    stack = LayerStack.uniform(n_core=1)
    with pytest.raises(UnsupportedTraceError):
        decoupled_frequency(stack, 'h-N', 'layer3', 1)
    with pytest.raises(UnsupportedTraceError):
        decoupled_frequency(stack, 'h-N', 'core', 1)


@pytest.mark.parametrize('bc', FAMILIES)
def test_decoupled_spectrum_matches_closed_forms(bc):
    stack = with_length(LayerStack.uniform(n_core=1, shear=0.0), np.pi)
    system = build_system(stack, bc, n_elements=32)
    omega2, _ = undamped_modes(system, 20)
    computed = np.sqrt(omega2)
    for block in ('beam', 'layer1', 'layer2'):
        for k in range(1, 4):
            expected = decoupled_frequency(stack, bc, block, k)
            assert np.isclose(_closest(computed, expected), expected, rtol=1e-3)


@pytest.mark.slow
def test_hinged_rayleigh_frequencies_fine_mesh():
    stack = LayerStack.uniform(n_core=1, shear=0.0)
    system = build_system(stack, BoundaryFamily.HINGED_NEUMANN, n_elements=64)
    pairs = eigenpairs(system, 20, damping_on=False)
    frequencies = [p.frequency for p in pairs]
    for k in range(1, 6):
        beta = k * np.pi
        expected = beta**2 / np.sqrt(1.0 + beta**2)
        assert np.isclose(_closest(frequencies, expected), expected, rtol=1e-3)


def test_undamped_eigenvalues_imaginary_and_paired(unit_system):
    pairs = eigenpairs(unit_system, 10, damping_on=False)
    assert len(pairs) == 20
    for p in pairs:
        assert abs(p.lam.real) <= 1e-8 * abs(p.lam)
        assert p.residual <= 1e-8
    for a, b in zip(pairs[0::2], pairs[1::2]):
        assert np.isclose(a.lam, np.conj(b.lam))
    frequencies = [p.frequency for p in pairs]
    assert np.all(np.diff(frequencies) >= -1e-10)


def test_modal_orthogonality(five_layer, family):
    system = build_system(five_layer, family)
    omega2, phi = undamped_modes(system, 12)
    gram_m = phi.T @ (system.mass @ phi)
    gram_k = phi.T @ (system.stiffness @ phi)
    assert np.max(np.abs(gram_m - np.eye(12))) <= 1e-8
    off = gram_k - np.diag(np.diag(gram_k))
    assert np.max(np.abs(off)) <= 1e-8 * np.max(omega2)
    assert np.allclose(np.diag(gram_k), omega2, rtol=1e-8)


def test_negative_norm_of_modes(three_layer):
    system = build_system(three_layer, BoundaryFamily.MIXED_MIXED)
    omega2, phi = undamped_modes(system, 5)
    n = system.n
    for w2, u in zip(omega2, phi.T):
        for Y in (np.concatenate([u, np.zeros(n)]), np.concatenate([np.zeros(n), u])):
            ratio = state_norm(system, Y, NormKind.H_MINUS_1)**2 / state_norm(system, Y, NormKind.H)**2
            assert np.isclose(ratio, 1.0 / w2, rtol=1e-8)


def test_small_damping_gives_contraction(damped_three_layer, family):
    system = build_system(damped_three_layer, family)
    pairs = eigenpairs(system, 8, damping_on=True)
    assert len(pairs) == 16
    for p in pairs:
        assert p.lam.real <= 1e-10 * abs(p.lam)
        assert p.residual <= 1e-6


def test_eigen_count_checked(unit_system):
    with pytest.raises(ValidationError):
        eigenpairs(unit_system, 0)
    with pytest.raises(ValidationError):
        eigenpairs(unit_system, unit_system.n + 1)


def test_uniqueness_margin_positive(three_layer, family):
    system = build_system(three_layer, family, n_elements=16)
    pairs = eigenpairs(system, 10, damping_on=False)
    assert uniqueness_margin(system, pairs, family) > 0.0


def test_uniqueness_margin_uses_family_observation(three_layer, family):
    system = build_system(three_layer, family)
    pairs = eigenpairs(system, 4, damping_on=False)
    n = system.n
    expected = []
    for pair in pairs:
        U = pair.mode[:n]
        traces = system.observation @ np.concatenate([U, pair.lam * U])
        expected.append(np.sum(np.abs(traces)**2) / np.vdot(U, system.stiffness @ U).real)
    assert np.allclose(mode_margins(system, pairs, family), expected, rtol=1e-10)


def test_decoupled_hinged_margin_matches_sine_traces(decoupled):
    system = build_system(decoupled, BoundaryFamily.HINGED_NEUMANN, n_elements=32)
    pairs = [p for p in eigenpairs(system, 6, damping_on=False) if p.lam.imag > 0]
    margins = mode_margins(system, pairs, BoundaryFamily.HINGED_NEUMANN)
    # beam: |(k pi)^3 cos k pi|^2 / (K (k pi)^4 / 2); layers: |(k pi)^2|^2 / (E h (k pi)^2 / 2)
    reference = []
    for k in (1, 2):
        beta = k * np.pi
        reference.append((beta**2 / np.sqrt(1.0 + beta**2), 2.0 * beta**2))
        reference.append((beta, 2.0 * beta**2))
    frequencies = np.array([f for f, _ in reference])
    for pair, margin in zip(pairs, margins):
        index = int(np.argmin(np.abs(frequencies - pair.frequency)))
        assert np.isclose(pair.frequency, frequencies[index], rtol=1e-4)
        assert np.isclose(margin, reference[index][1], rtol=5e-2)
    assert np.isclose(uniqueness_margin(system, pairs, 'h-N'), 2.0 * np.pi**2, rtol=5e-2)


def test_margin_small_for_homogeneous_traces(decoupled):
    system = build_system(decoupled, BoundaryFamily.HINGED_NEUMANN, n_elements=16)
    pairs = eigenpairs(system, 4, damping_on=False)
    # hinged sines have w''(L) = 0 and Neumann cosines v'(L) = 0: every mode is invisible to the c-D set
    blind = uniqueness_margin(system, pairs, BoundaryFamily.CLAMPED_DIRICHLET)
    assert blind <= 1e-2 * uniqueness_margin(system, pairs, BoundaryFamily.HINGED_NEUMANN)


def test_uniqueness_margin_rejects_empty(unit_system):
    with pytest.raises(ValidationError):
        uniqueness_margin(unit_system, [], unit_system.bc)


@pytest.mark.slow
@pytest.mark.parametrize('bc', FAMILIES)
def test_uniqueness_margin_refinement_stable(three_layer, bc):
    margins = []
    for n_elements in (64, 128):
        system = build_system(three_layer, bc, n_elements=n_elements)
        margins.append(uniqueness_margin(system, eigenpairs(system, 20, damping_on=False), bc))
    assert margins[0] > 0.0
    assert abs(margins[1] - margins[0]) <= 0.2 * margins[0]


@pytest.mark.parametrize('block', ['beam', 'layer1'])
def test_eigenvalue_convergence_order(block):
    stack = with_length(LayerStack.uniform(n_core=1, shear=0.0), np.pi)
    expected = decoupled_frequency(stack, BoundaryFamily.HINGED_NEUMANN, block, 1)
    errors = []
    for n_elements in (4, 8, 16):
        system = build_system(stack, BoundaryFamily.HINGED_NEUMANN, n_elements=n_elements)
        computed = np.sqrt(undamped_modes(system, 4)[0])
        errors.append(abs(_closest(computed, expected) - expected) / expected)
    orders = np.log2(np.array(errors[:-1]) / np.array(errors[1:]))
    assert np.all(orders >= 2.0)


def test_report_and_frame(unit_system):
    pairs = eigenpairs(unit_system, 3, damping_on=False)
    report = eigen_report(unit_system, pairs, uniqueness_margin(unit_system, pairs, unit_system.bc))
    assert report['bc'] == unit_system.bc.value
    assert len(report['modes']) == 6
    assert report['uniqueness_margin'] > 0.0
    frame = spectrum_frame(pairs)
    assert list(frame.columns) == ['index', 're', 'im', 'abs', 'residual']
    assert len(frame) == 6
