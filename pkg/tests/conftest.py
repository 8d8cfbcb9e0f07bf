"""Shared test helpers: finite-difference oracles and problem factories.

The oracles here are deliberately independent of the library's analytic
derivative paths; they only ever call the value (or value+gradient)
functions they differentiate.
"""

import numpy as np
import pytest

from newton_grape.grape_core import ControlProblem, ControlSequence
from newton_grape.spin_model import (
    ChannelSpec,
    SpinSystem,
    StateSpec,
    build_controls,
    build_drift,
    build_state,
)

FD_STEP = 1e-5


def central_diff_grad(func, x, step=FD_STEP):
    """Central finite differences of a scalar function, one column at a time."""
    x = np.asarray(x, dtype=float)
    grad = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = step
        grad[i] = (func(x + e) - func(x - e)) / (2.0 * step)
    return grad


def central_diff_jac(vec_func, x, step=FD_STEP):
    """Central finite differences of a vector function (rows: outputs)."""
    x = np.asarray(x, dtype=float)
    cols = []
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = step
        cols.append((vec_func(x + e) - vec_func(x - e)) / (2.0 * step))
    return np.stack(cols, axis=-1)


def random_two_spin_problem(rng, n_slices=4, n_channels=2, ensemble=(1.0,), penalties=()):
    """Small two-spin problem with order-one generator scales, good for FD."""
    system = SpinSystem(
        ("1H", "13C"),
        9.4,
        (0.03 * rng.standard_normal(), 0.03 * rng.standard_normal()),
        {(0, 1): 0.05 + 0.03 * rng.random()},
    )
    channel_pool = [
        ChannelSpec((0,), "x"),
        ChannelSpec((1,), "y"),
        ChannelSpec((0, 1), "x"),
        ChannelSpec((0, 1), "y"),
    ]
    channels = channel_pool[:n_channels]
    problem = ControlProblem(
        drift=build_drift(system),
        controls=tuple(build_controls(system, channels)),
        rho0=build_state(system, StateSpec("lz", (0,))),
        delta=build_state(system, StateSpec("lz", (1,))),
        dt=0.3,
        n_slices=n_slices,
        penalties=tuple(penalties),
        ensemble_scalings=ensemble,
    )
    seq = ControlSequence(rng.uniform(-1.0, 1.0, (n_channels, n_slices)))
    return problem, seq


def transfer_capable_problem(rng, n_slices=8, penalties=(), ensemble=(1.0,)):
    """Two-spin transfer with enough control authority to reach J near 1."""
    system = SpinSystem(("1H", "13C"), 9.4, (0.05, -0.04), {(0, 1): 0.4})
    channels = [
        ChannelSpec((0,), "x"),
        ChannelSpec((0,), "y"),
        ChannelSpec((1,), "x"),
        ChannelSpec((1,), "y"),
    ]
    problem = ControlProblem(
        drift=build_drift(system),
        controls=tuple(build_controls(system, channels)),
        rho0=build_state(system, StateSpec("lz", (0,))),
        delta=build_state(system, StateSpec("lz", (1,))),
        dt=0.5,
        n_slices=n_slices,
        penalties=tuple(penalties),
        ensemble_scalings=ensemble,
    )
    seq0 = ControlSequence(0.1 * rng.uniform(-1.0, 1.0, (4, n_slices)))
    return problem, seq0


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
