"""Minimal exponential atlases and the trace-based partition of unity.

SO(3) and SE(3) are covered by four exponential charts centred on the
identity and the three rotations by pi about the coordinate axes.  Vec(k)
needs a single global chart; the product SE(3) x R^6 inherits the four SE(3)
charts and carries the momentum coordinates through unchanged.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation, OutOfChartError
from .lie import SE3, SO3, Pose, ProductElement, Vec, group

SIGMA_MIN = 1.0 / 5.0

# diagonal of R_j for j = 0..3
_CENTER_DIAG = np.array([[1.0, 1.0, 1.0],
                         [1.0, -1.0, -1.0],
                         [-1.0, 1.0, -1.0],
                         [-1.0, -1.0, 1.0]])
ROTATION_CENTERS = np.stack([np.diag(d) for d in _CENTER_DIAG])


@dataclass(frozen=True)
class ChartState:
    """Chart index (scalar or per batch member) and chart coordinates."""

    chart: np.ndarray
    q: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "chart", np.asarray(self.chart, dtype=int))
        object.__setattr__(self, "q", np.asarray(self.q, dtype=float))


def n_charts(tag) -> int:
    return 1 if isinstance(group(tag), Vec) else 4


def center(j, tag):
    """Chart centre g_j (batched if ``j`` is an array)."""
    G = group(tag)
    j = np.asarray(j, dtype=int)
    if isinstance(G, Vec):
        return np.zeros(j.shape + (G.dim,))
    R = ROTATION_CENTERS[j]
    if G is SO3:
        return R
    pose = Pose(R, np.zeros(j.shape + (3,)))
    if G is SE3:
        return pose
    return ProductElement(pose, np.zeros(j.shape + (6,)))


def _rotation(g, G):
    if G is SO3:
        return np.asarray(g, dtype=float)
    if G is SE3:
        return np.asarray(g.R, dtype=float)
    return np.asarray(g.pose.R, dtype=float)


def partition(g, tag):
    """sigma_j(g) = (Tr(R_j^T R) + 1) / 4 for j = 0..3 (last axis).

    For SE(3) this equals Tr(H_j^-1 H) / 4 since the homogeneous corner adds 1.
    """
    G = group(tag)
    if isinstance(G, Vec):
        return np.ones(np.shape(g)[:-1] + (1,))
    R = _rotation(g, G)
    diag = np.diagonal(R, axis1=-2, axis2=-1)
    return (np.einsum("...i,ji->...j", diag, _CENTER_DIAG) + 1.0) / 4.0


def select_chart(g, tag):
    """Index of the largest partition value; ties go to the lowest index."""
    return np.argmax(partition(g, tag), axis=-1)


def _sigma_at(g, j, G):
    sig = partition(g, G)
    return np.take_along_axis(sig, np.asarray(j, dtype=int)[..., None], axis=-1)[..., 0]


def to_chart(g, j, tag):
    """Coordinates of g in chart j: vee(log(g_j^-1 g))."""
    G = group(tag)
    j = np.asarray(j, dtype=int)
    if isinstance(G, Vec):
        if np.any(j != 0):
            raise ContractViolation("Vec(k) has a single chart")
        return G.log(g)
    if np.any((j < 0) | (j > 3)):
        raise ContractViolation(f"chart index out of range: {j}")
    if np.any(_sigma_at(g, j, G) <= 0.0):
        raise OutOfChartError(f"element lies outside chart {j.tolist()}")
    return G.log(G.compose(G.inverse(center(j, G)), g, reorthonormalize=False))


def from_chart(q, j, tag):
    """g_j exp(hat q)."""
    G = group(tag)
    q = np.asarray(q, dtype=float)
    if isinstance(G, Vec):
        return G.exp(q)
    return G.compose(center(j, G), G.exp(q), reorthonormalize=False)


def chart_transition(state: ChartState, j_new, tag) -> ChartState:
    """Re-express ``state`` in chart ``j_new`` (same group element)."""
    G = group(tag)
    j_new = np.broadcast_to(np.asarray(j_new, dtype=int), state.chart.shape)
    if np.all(j_new == state.chart):
        return ChartState(state.chart.copy(), state.q.copy())
    g = from_chart(state.q, state.chart, G)
    return ChartState(j_new.copy(), to_chart(g, j_new, G))


def chart_for(g, tag) -> ChartState:
    """Initial chart choice of the switching integrator: argmax of sigma."""
    j = select_chart(g, tag)
    return ChartState(j, to_chart(g, j, tag))


__all__ = [
    "SIGMA_MIN", "ROTATION_CENTERS", "ChartState", "n_charts", "center", "partition",
    "select_chart", "to_chart", "from_chart", "chart_transition", "chart_for",
]
