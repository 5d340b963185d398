import dataclasses

import numpy as np
import pytest

from conftest import build_system, random_state
from core.assembly import BoundaryFamily
from core.beam_model import min_control_time
from core.dynamics import integrate
from core.errors import MissingChannelError, ValidationError
from core.observability import (Ensemble, NormKind, direct_inequality_check, draw_initial_states,
                                estimate_constants, forcing_from_field, state_norm, time_sweep, trace_energy)


def test_trace_energy_zero_and_quadratic(unit_system):
    zero = integrate(unit_system, np.zeros(2 * unit_system.n), 1.0, n_steps=100)
    assert trace_energy(zero) == 0.0
    Y = random_state(unit_system, 1)
    single = trace_energy(integrate(unit_system, Y, 1.0, n_steps=100))
    double = trace_energy(integrate(unit_system, 2.0 * Y, 1.0, n_steps=100))
    assert single > 0.0
    assert np.isclose(double, 4.0 * single, rtol=1e-10)


def test_trace_energy_needs_family_channels(three_layer):
    system = build_system(three_layer, BoundaryFamily.HINGED_NEUMANN)
    traj = integrate(system, random_state(system), 0.5, n_steps=20)
    with pytest.raises(MissingChannelError):
        trace_energy(traj, BoundaryFamily.CLAMPED_DIRICHLET)


def test_state_norm_split_states(unit_system):
    n = unit_system.n
    U = random_state(unit_system, 2)[:n]
    assert state_norm(unit_system, np.zeros(2 * n)) == 0.0
    if unit_system.bc is not BoundaryFamily.HINGED_NEUMANN:
        Y = np.concatenate([U, np.zeros(n)])
        assert np.isclose(state_norm(unit_system, Y, NormKind.H), np.sqrt(U @ (unit_system.stiffness @ U)))


def test_ensemble_is_reproducible(unit_system):
    ensemble = Ensemble(n_samples=4, seed=3, mode_band=(2, 5))
    first = draw_initial_states(unit_system, ensemble)
    second = draw_initial_states(unit_system, ensemble)
    assert len(first) == 4
    for a, b in zip(first, second):
        assert np.array_equal(a, b)
    other = draw_initial_states(unit_system, dataclasses.replace(ensemble, seed=4))
    assert not np.array_equal(first[0], other[0])


def test_ensemble_band_checked(unit_system):
    with pytest.raises(ValidationError):
        draw_initial_states(unit_system, Ensemble(mode_band=(3, 2)))
    with pytest.raises(ValidationError):
        draw_initial_states(unit_system, Ensemble(n_samples=0))


def test_zero_sample_rejected(unit_system):
    with pytest.raises(ValidationError):
        estimate_constants(unit_system, 1.0, Ensemble(), n_steps=50,
                           initial_states=[np.zeros(2 * unit_system.n)])


def test_ratio_independent_of_amplitude(unit_system):
    Y = random_state(unit_system, 5)
    report = estimate_constants(unit_system, 1.0, Ensemble(), n_steps=100, initial_states=[Y, 3.0 * Y])
    assert np.isclose(report.ratios[0], report.ratios[1], rtol=1e-10)
    assert report.ratio_min <= report.ratio_max
    assert report.ratios[report.argmin] == report.ratio_min


def test_mixed_family_uses_negative_norm(three_layer):
    system = build_system(three_layer, BoundaryFamily.MIXED_MIXED)
    report = estimate_constants(system, 1.0, Ensemble(n_samples=2, mode_band=3), n_steps=50)
    assert report.norm_kind is NormKind.H_MINUS_1
    with pytest.raises(ValidationError):
        estimate_constants(system, 1.0, Ensemble(n_samples=2, mode_band=3), n_steps=50, norm_kind=NormKind.H)


@pytest.mark.parametrize('bc', [BoundaryFamily.HINGED_NEUMANN, BoundaryFamily.CLAMPED_DIRICHLET])
def test_negative_norm_rejected_outside_mixed_family(three_layer, bc):
    system = build_system(three_layer, bc)
    ensemble = Ensemble(n_samples=2, mode_band=3)
    with pytest.raises(ValidationError):
        estimate_constants(system, 1.0, ensemble, n_steps=50, norm_kind=NormKind.H_MINUS_1)
    with pytest.raises(ValidationError):
        time_sweep(system, [0.5, 1.0], ensemble, dt=0.02, norm_kind='H_minus_1')


def test_report_embeds_seed_and_tau(three_layer):
    system = build_system(three_layer, BoundaryFamily.CLAMPED_DIRICHLET)
    report = estimate_constants(system, 1.0, Ensemble(n_samples=3, seed=9, mode_band=4), n_steps=50)
    data = report.to_dict()
    assert data['ensemble']['seed'] == 9
    assert data['ensemble']['mode_band'] == [1, 4]
    assert np.isclose(data['tau_used'], min_control_time(three_layer))
    assert len(data['ratios']) == 3


def test_parallel_samples_match_serial(unit_system):
    ensemble = Ensemble(n_samples=4, seed=1, mode_band=5)
    serial = estimate_constants(unit_system, 1.0, ensemble, n_steps=100)
    parallel = estimate_constants(unit_system, 1.0, ensemble, n_steps=100, workers=3)
    assert serial.ratios == parallel.ratios


def test_time_sweep_monotone(unit_system):
    ensemble = Ensemble(n_samples=4, seed=2, mode_band=6)
    table = time_sweep(unit_system, [0.5, 1.0, 2.0, 4.0], ensemble, dt=0.01)
    assert list(table.columns) == ['T', 'ratio_min', 'ratio_max', 'tau', 'bc']
    assert np.all(np.diff(table['ratio_min']) >= 0.0)
    assert np.all(np.diff(table['ratio_max']) >= 0.0)
    assert np.allclose(table['T'], [0.5, 1.0, 2.0, 4.0])


def test_time_sweep_rejects_unsorted_grid(unit_system):
    with pytest.raises(ValidationError):
        time_sweep(unit_system, [1.0, 0.5], Ensemble(n_samples=1), dt=0.01)


def test_time_sweep_matches_single_horizon(three_layer):
    system = build_system(three_layer, BoundaryFamily.HINGED_NEUMANN)
    ensemble = Ensemble(n_samples=3, seed=0, mode_band=4)
    table = time_sweep(system, [1.0, 2.0], ensemble, dt=0.01)
    report = estimate_constants(system, 1.0, ensemble, n_steps=100)
    assert np.isclose(table['ratio_min'][0], report.ratio_min, rtol=1e-10)


def _load(x, t):
    return np.sin(np.pi * x)**2 * np.sin(3.0 * t)


def test_direct_inequality_zero_forcing(unit_system):
    ratio, flagged = direct_inequality_check(unit_system, np.zeros((51, unit_system.n)), 1.0, n_steps=50)
    assert ratio == 0.0 and flagged


def test_direct_inequality_scale_invariant(unit_system):
    times = np.linspace(0.0, 1.0, 101)
    forcing = forcing_from_field(unit_system, times, _load)
    ratio, flagged = direct_inequality_check(unit_system, forcing, 1.0, n_steps=100)
    scaled, _ = direct_inequality_check(unit_system, 7.0 * forcing, 1.0, n_steps=100)
    assert not flagged and ratio > 0.0
    assert np.isclose(ratio, scaled, rtol=1e-10)


@pytest.mark.slow
def test_direct_inequality_refinement_stable(three_layer):
    ratios = []
    for n_elements in (16, 32):
        system = build_system(three_layer, BoundaryFamily.CLAMPED_DIRICHLET, n_elements=n_elements)
        times = np.linspace(0.0, 2.0, 1001)
        forcing = forcing_from_field(system, times, _load)
        ratios.append(direct_inequality_check(system, forcing, 2.0, n_steps=1000)[0])
    assert abs(ratios[1] - ratios[0]) <= 0.1 * ratios[0]


@pytest.mark.slow
def test_localized_data_needs_time_to_reach_the_end(three_layer):
    system = build_system(three_layer, BoundaryFamily.HINGED_NEUMANN, n_elements=32)
    tau = min_control_time(three_layer)
    ensemble = Ensemble(n_samples=4, seed=0, localized=True, support=0.1)
    short = estimate_constants(system, 0.2 * tau, ensemble, n_steps=2000)
    long = estimate_constants(system, 1.2 * tau, ensemble, n_steps=2000)
    assert long.ratio_min >= 10.0 * short.ratio_max


@pytest.mark.slow
def test_small_damping_perturbs_ratio_continuously(three_layer):
    tau = min_control_time(three_layer)
    ensemble = Ensemble(n_samples=8, seed=0, mode_band=6)
    undamped = build_system(three_layer, BoundaryFamily.CLAMPED_DIRICHLET, n_elements=16)
    damped = build_system(three_layer.with_damping([0.01]), BoundaryFamily.CLAMPED_DIRICHLET, n_elements=16)
    base = estimate_constants(undamped, 1.2 * tau, ensemble, n_steps=2000).ratio_min
    perturbed = estimate_constants(damped, 1.2 * tau, ensemble, n_steps=2000).ratio_min
    assert abs(perturbed - base) <= 0.25 * base
