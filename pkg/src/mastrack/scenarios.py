"""Fixtures for the two worked examples: flexible-joint arm plant, three topologies.

The topology adjacency entries are transcribed from a drawing and serve as
regression anchors only.  The printed certificate matrices are kept verbatim
so that the validators can be exercised on them.
"""
from __future__ import annotations

import numpy as np

from .dynamics import CommSchedule, PlantModel, make_nonlinearity
from .graph import DirectedTopology, SwitchingSchedule, build_topology

EXAMPLE_A = np.array([
    [0.0, 1.0, 0.0, 0.0],
    [-48.6, -1.25, 48.6, 0.0],
    [0.0, 0.0, 0.0, 1.0],
    [1.95, 0.0, -1.95, 0.0],
])
EXAMPLE_B = np.array([[0.0], [21.6], [0.0], [0.0]])
EXAMPLE_C = np.array([[1.0, 0.0, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0]])
EXAMPLE_AMPLITUDE = 3.33

# beta, l, rho used with the worked examples
EXAMPLE_PARAMETERS = {"beta": 0.01, "l": 0.02, "rho": 0.2}
# a parameter set for which both certificate blocks are strictly feasible on this plant
CERTIFIABLE_PARAMETERS = {"beta": 0.3, "l": 0.5, "rho": 0.1}

EXAMPLE_W = 5.0
EXAMPLE1_DELTA = 3.5
EXAMPLE2_DELTA = 4.0
EXAMPLE2_H = 4.5
EXAMPLE_LEADER = (1.0, 0.0, 1.0, 0.0)
EXAMPLE_SEED = 20240607

PRINTED_P1 = np.array([
    [0.39, -0.36, 0.36, -0.04],
    [-0.36, 2.03, -0.32, -0.01],
    [0.36, -0.32, 0.38, -0.3],
    [-0.04, -0.01, -0.3, 0.01],
])
PRINTED_P2 = np.array([
    [7.33, -0.09, 0.02, -0.96],
    [-0.09, 7.47, 0.01, -0.46],
    [0.02, 0.01, 0.38, 0.08],
    [-0.96, -0.46, 0.08, 2.49],
])
PRINTED_K = np.array([[-18.3, -8.75, 1.58, -95.48]])
PRINTED_G = np.array([
    [-10.97, 0.67],
    [23.38, -23.96],
    [-0.46, -10.66],
    [-5.38, -0.30],
])

# (adjacency, leader links) for the three interaction graphs; a[i][j] = 1: i hears j
EXAMPLE_TOPOLOGIES = (
    ([[0, 0, 0, 0], [1, 0, 0, 0], [0, 1, 0, 0], [0, 0, 1, 0]], [1, 0, 0, 0]),
    ([[0, 1, 0, 0], [0, 0, 0, 0], [0, 1, 0, 0], [0, 0, 1, 0]], [0, 1, 0, 0]),
    ([[0, 0, 0, 0], [1, 0, 0, 0], [1, 0, 0, 1], [0, 0, 0, 0]], [1, 0, 0, 1]),
)


def example_plant(amplitude: float = EXAMPLE_AMPLITUDE) -> PlantModel:
    f = make_nonlinearity("sin_state3", 4, amplitude=amplitude)
    return PlantModel(EXAMPLE_A.copy(), EXAMPLE_B.copy(), EXAMPLE_C.copy(), f, f.lipschitz)


def example_topologies() -> tuple[DirectedTopology, ...]:
    return tuple(build_topology(a, d) for a, d in EXAMPLE_TOPOLOGIES)


def example_switching(horizon: float, w: float = EXAMPLE_W) -> SwitchingSchedule:
    """One graph per period, cycling 1 -> 2 -> 3."""
    return SwitchingSchedule.cyclic(example_topologies(), w, horizon)


def example1_comm() -> CommSchedule:
    return CommSchedule(EXAMPLE_W, EXAMPLE1_DELTA)


def example2_comm() -> CommSchedule:
    return CommSchedule(EXAMPLE_W, EXAMPLE2_DELTA, EXAMPLE2_H, mode="three-mode")
