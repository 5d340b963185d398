import dataclasses

import numpy as np
import pytest

from core.beam_model import LayerStack, TimeInterpretation, build_coupling, min_control_time, validate
from core.errors import ValidationError


def test_coupling_single_core():
    c = build_coupling(LayerStack.uniform(n_core=1))
    assert np.array_equal(c.A, [[0.5, 0.5]])
    assert np.array_equal(c.B, [[-1.0, 1.0]])
    assert np.allclose(c.N, [2.0])


def test_coupling_uneven_thicknesses():
    stack = dataclasses.replace(LayerStack.uniform(n_core=1), thicknesses=(2.0, 4.0, 2.0))
    assert np.isclose(build_coupling(stack).N[0], 1.5)


@pytest.mark.parametrize('n_core', [1, 2, 3, 5])
def test_coupling_row_sums(n_core):
    rng = np.random.default_rng(n_core)
    stack = dataclasses.replace(LayerStack.uniform(n_core=n_core),
                                thicknesses=tuple(rng.uniform(0.1, 3.0, 2 * n_core + 1)))
    c = build_coupling(stack)
    assert c.A.shape == (n_core, n_core + 1)
    assert np.array_equal(c.A.sum(axis=1), np.ones(n_core))
    assert np.array_equal(c.B.sum(axis=1), np.zeros(n_core))
    assert np.allclose(c.N, (c.A @ stack.h_odd) / stack.h_even + 1.0)
    assert np.all(c.N > 1.0)


def test_min_control_time_unit_speeds():
    stack = LayerStack.uniform(n_core=1)
    assert np.isclose(min_control_time(stack, TimeInterpretation.PHYSICAL), 2.0)
    assert np.isclose(min_control_time(stack, TimeInterpretation.LITERAL), 2.0)


def test_min_control_time_slow_layer():
    stack = dataclasses.replace(LayerStack.uniform(n_core=1, length=2.0), bending_stiffness=4.0)
    assert np.isclose(min_control_time(stack), 4.0)


def test_min_control_time_slow_beam():
    stack = dataclasses.replace(LayerStack.uniform(n_core=1), youngs_odd=(4.0, 4.0))
    assert np.isclose(min_control_time(stack, 'physical'), 2.0)
    # the printed formula takes sqrt(rho/E) = 1/2 as the speed
    assert np.isclose(min_control_time(stack, 'literal'), 4.0)


def test_min_control_time_homogeneity():
    stack = LayerStack.uniform(n_core=2)
    tau = min_control_time(stack)
    longer = dataclasses.replace(stack, length=3.0)
    assert np.isclose(min_control_time(longer), 3.0 * tau)
    scaled = dataclasses.replace(stack, bending_stiffness=5.0, rotary_coeff=5.0,
                                 youngs_odd=(5.0,) * 3, densities_odd=(5.0,) * 3)
    assert np.isclose(min_control_time(scaled), tau)


def test_validate_accepts_valid_stack():
    assert validate(LayerStack.uniform(n_core=1)) == []


def test_validate_thickness_count():
    stack = dataclasses.replace(LayerStack.uniform(n_core=1), thicknesses=(1.0, 1.0))
    diagnostics = validate(stack)
    assert len(diagnostics) == 1
    assert diagnostics[0].startswith('thicknesses')


def test_validate_negative_damping():
    stack = dataclasses.replace(LayerStack.uniform(n_core=2), damping_even=(0.0, -0.1))
    diagnostics = validate(stack)
    assert len(diagnostics) == 1
    assert diagnostics[0].startswith('damping_even')


def test_build_coupling_rejects_invalid_stack():
    stack = dataclasses.replace(LayerStack.uniform(n_core=1), length=-1.0)
    with pytest.raises(ValidationError) as info:
        build_coupling(stack)
    assert any(d.startswith('length') for d in info.value.diagnostics)


def test_from_dict_round_trip_and_unknown_fields():
    stack = LayerStack.uniform(n_core=2, damping=0.05)
    assert LayerStack.from_dict(stack.to_dict()) == stack

    data = stack.to_dict()
    data['colour'] = 'red'
    del data['length']
    with pytest.raises(ValidationError) as info:
        LayerStack.from_dict(data)
    assert 'colour: unknown field' in info.value.diagnostics
    assert 'length: missing' in info.value.diagnostics
