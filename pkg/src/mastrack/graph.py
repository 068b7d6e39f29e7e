"""Directed switching topologies for one leader and N followers.

Convention: ``adjacency[i, j] == 1`` means follower ``i`` receives information
from follower ``j``.  The follower Laplacian is ``L = diag(row sums) - adjacency``
and the pinned matrix is ``L + diag(leader_links)``.
"""
from __future__ import annotations

import bisect
from collections import deque
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ClassificationDomainError, ScheduleError, TopologyError

EIG_TOL = 1e-9


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class DirectedTopology:
    """One interaction graph: follower adjacency plus leader links."""

    adjacency: np.ndarray
    leader_links: np.ndarray
    laplacian: np.ndarray = field(repr=False)
    pinned: np.ndarray = field(repr=False)

    @property
    def n_followers(self) -> int:
        return self.adjacency.shape[0]

    def in_neighbors(self, i: int) -> list[int]:
        return [int(j) for j in np.flatnonzero(self.adjacency[i])]

    def to_dict(self) -> dict:
        return {
            "adjacency": self.adjacency.astype(int).tolist(),
            "leader_links": self.leader_links.astype(int).tolist(),
        }


def build_topology(adjacency, leader_links) -> DirectedTopology:
    """Validate a {0,1} adjacency matrix and leader-link vector and derive L, L + D."""
    adj = np.atleast_2d(np.asarray(adjacency, dtype=float))
    d = np.atleast_1d(np.asarray(leader_links, dtype=float)).ravel()
    if adj.ndim != 2 or adj.shape[0] != adj.shape[1]:
        raise TopologyError(f"adjacency must be square, got shape {adj.shape}")
    n = adj.shape[0]
    if n < 1:
        raise TopologyError("need at least one follower")
    if d.shape != (n,):
        raise TopologyError(f"leader_links must have length {n}, got {d.shape[0]}")
    if not np.all(np.isin(adj, (0.0, 1.0))):
        raise TopologyError("adjacency entries must be 0 or 1")
    if not np.all(np.isin(d, (0.0, 1.0))):
        raise TopologyError("leader_links entries must be 0 or 1")
    if np.any(np.diag(adj) != 0):
        raise TopologyError("adjacency must have a zero diagonal (no self-loops)")
    lap = np.diag(adj.sum(axis=1)) - adj
    pinned = lap + np.diag(d)
    return DirectedTopology(_frozen(adj), _frozen(d), _frozen(lap), _frozen(pinned))


def has_directed_spanning_tree(topology: DirectedTopology) -> bool:
    """True iff every follower is reachable from the leader in the augmented digraph.

    Breadth-first search from the leader node; an edge j -> i exists when
    follower i listens to j.
    """
    n = topology.n_followers
    adj = topology.adjacency
    seen = np.zeros(n, dtype=bool)
    queue = deque(int(i) for i in np.flatnonzero(topology.leader_links))
    seen[list(queue)] = True
    while queue:
        j = queue.popleft()
        for i in np.flatnonzero(adj[:, j]):
            if not seen[i]:
                seen[i] = True
                queue.append(int(i))
    return bool(seen.all())


def _positive_real_spectrum(m: np.ndarray) -> bool:
    tol = EIG_TOL * max(1.0, float(np.linalg.norm(m, ord=np.inf)))
    return bool(np.all(np.linalg.eigvals(m).real > tol))


def is_nonsingular_m_matrix(m) -> bool:
    """Classify a Z-matrix: nonsingular M-matrix iff all eigenvalues have positive real part.

    Raises :class:`ClassificationDomainError` when an off-diagonal entry is positive.
    """
    m = np.atleast_2d(np.asarray(m, dtype=float))
    if m.shape[0] != m.shape[1]:
        raise ClassificationDomainError(f"matrix must be square, got {m.shape}")
    off = m - np.diag(np.diag(m))
    if np.any(off > 0):
        raise ClassificationDomainError("positive off-diagonal entry: not a Z-matrix")
    return _positive_real_spectrum(m)


def spectrum_criterion(topology: DirectedTopology) -> bool:
    """Eigenvalue form of the spanning-tree test (all eig(L + D) in the open right half-plane)."""
    return _positive_real_spectrum(topology.pinned)


def random_topology(n: int, rng: np.random.Generator, edge_prob: float = 0.3,
                    leader_prob: float = 0.3) -> DirectedTopology:
    """Draw a random digraph with {0,1} links; no structural guarantees."""
    adj = (rng.random((n, n)) < edge_prob).astype(float)
    np.fill_diagonal(adj, 0.0)
    d = (rng.random(n) < leader_prob).astype(float)
    return build_topology(adj, d)


def random_spanning_tree_topology(n: int, rng: np.random.Generator,
                                  extra_edge_prob: float = 0.2) -> DirectedTopology:
    """Random topology guaranteed to contain a spanning tree rooted at the leader."""
    order = rng.permutation(n)
    adj = np.zeros((n, n))
    d = np.zeros(n)
    d[order[0]] = 1.0
    for k in range(1, n):
        parent = order[rng.integers(0, k)]
        adj[order[k], parent] = 1.0
    adj = np.maximum(adj, (rng.random((n, n)) < extra_edge_prob).astype(float))
    np.fill_diagonal(adj, 0.0)
    d = np.maximum(d, (rng.random(n) < 0.2).astype(float))
    return build_topology(adj, d)


@dataclass(frozen=True, eq=False)
class SwitchingSchedule:
    """Piecewise-constant switching signal over ``[0, horizon)``.

    ``boundaries`` holds ``t_0 = 0 < t_1 < ... < t_K = horizon``; interval k is
    ``[t_k, t_{k+1})`` and uses topology ``indices[k]`` (1-based).
    """

    topologies: tuple
    boundaries: tuple
    indices: tuple
    epsilon_bounds: tuple

    def __post_init__(self):
        p = len(self.topologies)
        b = self.boundaries
        if p == 0:
            raise ScheduleError("at least one topology required")
        if len(b) != len(self.indices) + 1 or len(self.indices) == 0:
            raise ScheduleError("boundaries must have one more entry than indices")
        if b[0] != 0.0:
            raise ScheduleError("first dwell interval must start at t = 0")
        n = self.topologies[0].n_followers
        if any(t.n_followers != n for t in self.topologies):
            raise ScheduleError("all topologies must share the follower count")
        eps0, eps1 = self.epsilon_bounds
        if not eps0 > 0:
            raise ScheduleError("dwell lower bound epsilon_0 must be positive")
        dwell = np.diff(b)
        if np.any(dwell <= 0):
            raise ScheduleError("dwell intervals must be strictly increasing")
        # the last interval may be truncated by the horizon
        body = dwell[:-1] if len(dwell) > 1 else dwell[:0]
        if np.any(body < eps0) or np.any(dwell >= eps1):
            raise ScheduleError(
                f"dwell lengths must lie in [{eps0}, {eps1}); got min {dwell.min()} max {dwell.max()}"
            )
        for k in self.indices:
            if not 1 <= k <= p:
                raise ScheduleError(f"topology index {k} outside 1..{p}")

    @property
    def horizon(self) -> float:
        return float(self.boundaries[-1])

    @property
    def p(self) -> int:
        return len(self.topologies)

    @property
    def n_followers(self) -> int:
        return self.topologies[0].n_followers

    def switch_times(self) -> tuple:
        return tuple(self.boundaries[1:-1])

    def topology_index(self, t: float) -> int:
        return active_topology(self, t)

    def topology_at(self, t: float) -> DirectedTopology:
        return self.topologies[active_topology(self, t) - 1]

    @classmethod
    def cyclic(cls, topologies: Sequence[DirectedTopology], dwell: float, horizon: float,
               order: Sequence[int] | None = None) -> "SwitchingSchedule":
        """Cycle through ``order`` (1-based, default 1..p) with a constant dwell time."""
        if dwell <= 0 or horizon <= 0:
            raise ScheduleError("dwell and horizon must be positive")
        order = list(order) if order is not None else list(range(1, len(topologies) + 1))
        n_full = int(np.floor(horizon / dwell + 1e-9))
        bounds = [k * dwell for k in range(n_full + 1)]
        if horizon - bounds[-1] > 1e-9 * horizon:
            bounds.append(horizon)
        bounds[-1] = float(horizon)
        idx = [order[k % len(order)] for k in range(len(bounds) - 1)]
        eps1 = float(np.nextafter(dwell, np.inf))
        return cls(tuple(topologies), tuple(float(x) for x in bounds), tuple(idx), (float(dwell), eps1))

    @classmethod
    def from_dwells(cls, topologies: Sequence[DirectedTopology], dwells: Sequence[float],
                    indices: Sequence[int], horizon: float,
                    epsilon_bounds: tuple | None = None) -> "SwitchingSchedule":
        """Repeat the (dwell, index) pattern until ``horizon`` is covered."""
        if len(dwells) != len(indices) or not dwells:
            raise ScheduleError("dwells and indices must be non-empty and equally long")
        if any(d <= 0 for d in dwells):
            raise ScheduleError("dwell lengths must be positive")
        bounds = [0.0]
        idx = []
        k = 0
        while bounds[-1] < horizon - 1e-12 * max(1.0, horizon):
            bounds.append(min(bounds[-1] + dwells[k % len(dwells)], horizon))
            idx.append(indices[k % len(indices)])
            k += 1
        bounds[-1] = float(horizon)
        if epsilon_bounds is None:
            epsilon_bounds = (float(min(dwells)), float(np.nextafter(max(dwells), np.inf)))
        return cls(tuple(topologies), tuple(bounds), tuple(idx), tuple(epsilon_bounds))


def active_topology(schedule: SwitchingSchedule, t: float) -> int:
    """1-based index of the topology active at time ``t`` (left-closed, right-open)."""
    if not 0.0 <= t < schedule.horizon:
        raise ScheduleError(f"t = {t} outside [0, {schedule.horizon})")
    k = bisect.bisect_right(schedule.boundaries, t) - 1
    return schedule.indices[k]
