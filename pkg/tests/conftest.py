import dataclasses

import numpy as np
import pytest

from core.assembly import BoundaryFamily, Mesh, assemble
from core.beam_model import LayerStack

FAMILIES = [BoundaryFamily.HINGED_NEUMANN, BoundaryFamily.CLAMPED_DIRICHLET, BoundaryFamily.MIXED_MIXED]


def build_system(stack, bc, n_elements=8, y_order='quadratic'):
    return assemble(stack, Mesh.uniform(stack.length, n_elements, y_order), bc)


def random_state(system, seed=0):
    rng = np.random.default_rng(seed)
    return rng.standard_normal(2 * system.n)


@pytest.fixture
def three_layer():
    return LayerStack.uniform(n_core=1)


@pytest.fixture
def five_layer():
    return LayerStack(
        n_core=2,
        length=1.0,
        thicknesses=(0.5, 1.0, 0.5, 1.0, 0.5),
        densities_odd=(1.0, 1.0, 1.0),
        youngs_odd=(1.0, 2.0, 1.0),
        shear_even=(1.0, 0.5),
        damping_even=(0.0, 0.0),
        mass_coeff=1.0,
        rotary_coeff=1.0,
        bending_stiffness=1.0,
    )


@pytest.fixture
def decoupled():
    """Three layers with no shear coupling: a Rayleigh beam and two free wave layers"""
    return LayerStack.uniform(n_core=1, shear=0.0)


@pytest.fixture
def damped_three_layer():
    return LayerStack.uniform(n_core=1, damping=0.01)


@pytest.fixture(params=FAMILIES, ids=[bc.value for bc in FAMILIES])
def family(request):
    return request.param


@pytest.fixture
def unit_system(three_layer, family):
    return build_system(three_layer, family)


def with_length(stack, length):
    return dataclasses.replace(stack, length=length)
