"""Plant, observer and tracking protocol, integrated with grid-aligned RK4.

The stacked state is ``z = (x0, x_1..x_N, xhat_1..xhat_N)``.  Inside one step
the communication mode and topology are frozen, so the linear part of the
closed loop is a single matrix per (topology, mode) pair; the nonlinearity is
applied agent-wise on top of it.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Callable, Mapping, Sequence

import numpy as np

from .coupling import coupling_gains
from .errors import ConfigError, DivergenceError, ScheduleError
from .graph import DirectedTopology, SwitchingSchedule

if TYPE_CHECKING:
    from .coupling import CouplingWeights
    from .synthesis import GainSet

DIVERGENCE_LIMIT = 1e9
GRID_TOL = 1e-9


# -- nonlinearities ---------------------------------------------------------

@dataclass(frozen=True)
class Nonlinearity:
    """State map applied row-wise: ``func`` takes ``(..., n)`` arrays."""

    name: str
    func: Callable[[np.ndarray], np.ndarray] = field(repr=False)
    lipschitz: float
    params: dict = field(default_factory=dict)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.func(np.asarray(x, dtype=float))


NONLINEARITIES: dict[str, Callable[..., Nonlinearity]] = {}


def register_nonlinearity(name: str):
    """Decorator adding a factory ``factory(n, **params) -> Nonlinearity`` to the registry."""
    def deco(factory):
        NONLINEARITIES[name] = factory
        return factory
    return deco


@register_nonlinearity("zero")
def _zero(n: int) -> Nonlinearity:
    return Nonlinearity("zero", np.zeros_like, 0.0, {})


@register_nonlinearity("sin_state3")
def _sin_state3(n: int, amplitude: float = 3.33, source: int = 3, target: int = 4) -> Nonlinearity:
    # f_target(x) = -amplitude * sin(x_source), every other component zero (1-based indices)
    if not (1 <= source <= n and 1 <= target <= n):
        raise ConfigError(f"sin_state3 indices must lie in 1..{n}")
    s, d = source - 1, target - 1

    def func(x):
        out = np.zeros_like(x)
        out[..., d] = -amplitude * np.sin(x[..., s])
        return out

    return Nonlinearity("sin_state3", func, abs(float(amplitude)),
                        {"amplitude": float(amplitude), "source": source, "target": target})


def make_nonlinearity(name: str, n: int, **params) -> Nonlinearity:
    try:
        factory = NONLINEARITIES[name]
    except KeyError:
        raise ConfigError(f"unknown nonlinearity {name!r}; known: {sorted(NONLINEARITIES)}") from None
    try:
        return factory(n, **params)
    except TypeError as exc:
        raise ConfigError(f"bad parameters for nonlinearity {name!r}: {exc}") from None


@dataclass(frozen=True, eq=False)
class PlantModel:
    """Shared agent model ``xdot = A x + B u + f(x)``, measured output ``y = C x``."""

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    f: Nonlinearity
    lipschitz: float

    def __post_init__(self):
        A, B, C = (np.atleast_2d(np.asarray(m, dtype=float)) for m in (self.A, self.B, self.C))
        n = A.shape[0]
        if A.shape != (n, n):
            raise ConfigError(f"A must be square, got {A.shape}")
        if B.shape[0] != n:
            raise ConfigError(f"B must have {n} rows, got {B.shape}")
        if C.shape[1] != n:
            raise ConfigError(f"C must have {n} columns, got {C.shape}")
        if self.lipschitz < 0:
            raise ConfigError("lipschitz constant must be nonnegative")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "C", C)

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        return self.B.shape[1]

    @property
    def z(self) -> int:
        return self.C.shape[0]


# -- communication schedule -------------------------------------------------

class Mode(str, enum.Enum):
    COMM = "Tm"        # followers and leader links active
    FOLLOWERS = "Tq"   # follower links only (three-mode)
    SILENT = "Tn"      # no communication, u = 0


@dataclass(frozen=True)
class CommSchedule:
    """Periodic intermittent pattern.

    Period k covers ``[k w, (k+1) w)``; communication with the leader runs for
    ``delta_k``, then (three-mode only) follower-only links until ``h_k``.
    ``delta`` and ``h`` may be scalars or per-period sequences; a sequence is
    repeated cyclically.
    """

    w: float
    delta: float | tuple
    h: float | tuple | None = None
    mode: str = "two-mode"

    def __post_init__(self):
        if self.mode not in ("two-mode", "three-mode"):
            raise ScheduleError(f"mode must be 'two-mode' or 'three-mode', got {self.mode!r}")
        if not self.w > 0:
            raise ScheduleError("period w must be positive")
        d = self.deltas
        if any(not 0 < x < self.w for x in d):
            raise ScheduleError(f"communication durations must satisfy 0 < delta < w = {self.w}")
        if (self.mode == "three-mode") != (self.h is not None):
            raise ScheduleError("h must be given exactly when mode is three-mode")
        if self.h is not None:
            hs = self.hs
            if len(hs) not in (1, len(d)) and len(d) != 1:
                raise ScheduleError("delta and h sequences must have matching length")
            for k in range(max(len(d), len(hs))):
                if not self.delta_at(k) <= self.h_at(k) <= self.w:
                    raise ScheduleError("need delta <= h <= w in every period")
        if isinstance(self.delta, list):
            object.__setattr__(self, "delta", tuple(self.delta))
        if isinstance(self.h, list):
            object.__setattr__(self, "h", tuple(self.h))

    @property
    def deltas(self) -> tuple:
        return tuple(float(x) for x in np.atleast_1d(self.delta))

    @property
    def hs(self) -> tuple:
        return () if self.h is None else tuple(float(x) for x in np.atleast_1d(self.h))

    @property
    def three_mode(self) -> bool:
        return self.mode == "three-mode"

    def delta_at(self, k: int) -> float:
        d = self.deltas
        return d[k % len(d)]

    def h_at(self, k: int) -> float:
        if self.h is None:
            return self.delta_at(k)
        hs = self.hs
        return hs[k % len(hs)]

    def period_of(self, t: float) -> int:
        return int(math.floor(t / self.w + GRID_TOL))

    def boundaries(self, horizon: float) -> list:
        """All mode switch instants in ``[0, horizon]``."""
        out = []
        k = 0
        while k * self.w <= horizon + GRID_TOL:
            base = k * self.w
            out.extend([base, base + self.delta_at(k)])
            if self.three_mode:
                out.append(base + self.h_at(k))
            k += 1
        return sorted(x for x in set(out) if x <= horizon + GRID_TOL)


def comm_mode(schedule: CommSchedule, t: float) -> Mode:
    """Active communication mode at ``t`` (all intervals left-closed, right-open)."""
    if t < 0:
        raise ScheduleError("t must be nonnegative")
    k = schedule.period_of(t)
    phase = t - k * schedule.w
    eps = GRID_TOL * schedule.w
    if phase < schedule.delta_at(k) - eps:
        return Mode.COMM
    if schedule.three_mode and phase < schedule.h_at(k) - eps:
        return Mode.FOLLOWERS
    return Mode.SILENT


# -- states and the protocol ------------------------------------------------

@dataclass
class SystemState:
    leader: np.ndarray       # (n,)
    followers: np.ndarray    # (N, n)
    estimates: np.ndarray    # (N, n)
    t: float = 0.0

    def __post_init__(self):
        self.leader = np.asarray(self.leader, dtype=float).ravel()
        self.followers = np.atleast_2d(np.asarray(self.followers, dtype=float))
        self.estimates = np.atleast_2d(np.asarray(self.estimates, dtype=float))
        if self.followers.shape != self.estimates.shape or self.followers.shape[1] != self.leader.size:
            raise ConfigError("inconsistent state dimensions")
        if not (np.all(np.isfinite(self.leader)) and np.all(np.isfinite(self.followers))
                and np.all(np.isfinite(self.estimates))):
            raise DivergenceError("non-finite entry in system state")


@dataclass(frozen=True)
class ProtocolSigns:
    """Signs of the two protocol terms; ``+1, +1`` is the literal form."""

    leader: int = 1
    neighbor: int = 1

    def __post_init__(self):
        if self.leader not in (1, -1) or self.neighbor not in (1, -1):
            raise ConfigError("protocol term signs must be +1 or -1")


def protocol_matrices(topology: DirectedTopology, mode: Mode, gamma: np.ndarray | None = None,
                      signs: ProtocolSigns = ProtocolSigns()) -> tuple[np.ndarray, np.ndarray]:
    """Stacked protocol weights: ``u_i = K (H xhat + g x0)_i``.

    Returns ``(H, g)`` with ``H`` N-by-N acting on estimates and ``g`` the
    weight on the leader state.
    """
    n = topology.n_followers
    if mode is Mode.SILENT:
        return np.zeros((n, n)), np.zeros(n)
    if gamma is None:
        gamma = coupling_gains(topology)
    gd = np.diag(np.asarray(gamma, dtype=float))
    adj = topology.adjacency
    H = signs.neighbor * (adj - np.diag(adj.sum(axis=1)))
    g = np.zeros(n)
    if mode is Mode.COMM:
        d = topology.leader_links
        H = H + signs.leader * np.diag(d)
        g = -signs.leader * d
    return gd[:, None] * H, gd * g


def control_inputs(state: SystemState, K: np.ndarray, topology: DirectedTopology, mode: Mode,
                   gamma: np.ndarray | None = None,
                   signs: ProtocolSigns = ProtocolSigns()) -> np.ndarray:
    """All follower inputs as an (N, m) array."""
    H, g = protocol_matrices(topology, mode, gamma, signs)
    K = np.atleast_2d(K)
    return (H @ state.estimates + np.outer(g, state.leader)) @ K.T


def control_input(i: int, state: SystemState, gains: "GainSet", topology: DirectedTopology,
                  mode: Mode, gamma: np.ndarray | None = None,
                  signs: ProtocolSigns = ProtocolSigns()) -> np.ndarray:
    """Input of follower ``i`` (0-based).

    In ``Tm``: ``K gamma_ii (s_n sum_j a_ij (xhat_j - xhat_i) + s_l d_i (xhat_i - x0))``;
    in ``Tq`` the leader term is dropped; in ``Tn`` the input is zero.
    """
    n = topology.n_followers
    if not 0 <= i < n:
        raise IndexError(f"agent index {i} outside 0..{n - 1}")
    K = np.atleast_2d(gains.K)
    if mode is Mode.SILENT:
        return np.zeros(K.shape[0])
    if gamma is None:
        gamma = coupling_gains(topology)
    xh = state.estimates
    a = topology.adjacency[i]
    acc = signs.neighbor * (a @ xh - a.sum() * xh[i])
    if mode is Mode.COMM:
        acc = acc + signs.leader * topology.leader_links[i] * (xh[i] - state.leader)
    return K @ (gamma[i, i] * acc)


def plant_derivative(state: SystemState, inputs: np.ndarray,
                     plant: PlantModel) -> tuple[np.ndarray, np.ndarray]:
    """``(x0dot, xdot)``: the leader has no input, followers are driven by ``inputs``."""
    A, B = plant.A, plant.B
    dx0 = A @ state.leader + plant.f(state.leader)
    dx = state.followers @ A.T + np.atleast_2d(inputs) @ B.T + plant.f(state.followers)
    return dx0, dx


def observer_derivative(state: SystemState, inputs: np.ndarray, plant: PlantModel,
                        G_obs: np.ndarray) -> np.ndarray:
    """Estimator ``xhat' = A xhat + B u + f(xhat) + G (C xhat - C x)``; runs in every mode."""
    A, B, C = plant.A, plant.B, plant.C
    xh = state.estimates
    innov = (xh - state.followers) @ C.T
    return xh @ A.T + np.atleast_2d(inputs) @ B.T + plant.f(xh) + innov @ np.atleast_2d(G_obs).T


# -- integration ------------------------------------------------------------

def rk4_step(fun: Callable[[float, np.ndarray], np.ndarray], t: float, y: np.ndarray,
             h: float) -> np.ndarray:
    k1 = fun(t, y)
    k2 = fun(t + 0.5 * h, y + 0.5 * h * k1)
    k3 = fun(t + 0.5 * h, y + 0.5 * h * k2)
    k4 = fun(t + h, y + h * k3)
    return y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def integrate_fixed(fun: Callable[[float, np.ndarray], np.ndarray], y0, t0: float, t1: float,
                    h: float) -> np.ndarray:
    """Classical RK4 from t0 to t1 with constant step; (t1 - t0) must be a multiple of h."""
    steps = _grid_steps(t1 - t0, h)
    y = np.asarray(y0, dtype=float)
    for k in range(steps):
        y = rk4_step(fun, t0 + k * h, y, h)
    return y


def _grid_steps(span: float, h: float) -> int:
    if not h > 0:
        raise ConfigError("step size must be positive")
    steps = int(round(span / h))
    if abs(steps * h - span) > GRID_TOL * max(1.0, abs(span)):
        raise ConfigError(f"span {span} is not a multiple of the step {h}")
    return steps


def _on_grid(t: float, h: float) -> bool:
    k = round(t / h)
    return abs(k * h - t) <= GRID_TOL * max(1.0, abs(t))


@dataclass(frozen=True, eq=False)
class SimulationTrace:
    """Recorded trajectory; ``errors`` and ``psi`` are exact differences of stored states."""

    t: np.ndarray            # (K,)
    leader: np.ndarray       # (K, n)
    followers: np.ndarray    # (K, N, n)
    estimates: np.ndarray    # (K, N, n)
    inputs: np.ndarray       # (K, N, m)
    modes: tuple             # K mode tags
    topology: np.ndarray     # (K,) 1-based indices
    V: np.ndarray | None = None
    errors: np.ndarray = field(init=False, repr=False)
    psi: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "errors", self.followers - self.leader[:, None, :])
        object.__setattr__(self, "psi", self.estimates - self.followers)

    def __len__(self) -> int:
        return self.t.size

    @property
    def n_followers(self) -> int:
        return self.followers.shape[1]

    def with_lyapunov(self, V: np.ndarray) -> "SimulationTrace":
        return SimulationTrace(self.t, self.leader, self.followers, self.estimates, self.inputs,
                               self.modes, self.topology, np.asarray(V, dtype=float))

    def state_at(self, k: int) -> SystemState:
        return SystemState(self.leader[k], self.followers[k], self.estimates[k], float(self.t[k]))

    def truncated(self, k: int) -> "SimulationTrace":
        V = None if self.V is None else self.V[:k]
        return SimulationTrace(self.t[:k], self.leader[:k], self.followers[:k], self.estimates[:k],
                               self.inputs[:k], self.modes[:k], self.topology[:k], V)


@dataclass(frozen=True, eq=False)
class Scenario:
    plant: PlantModel
    comm: CommSchedule
    switching: SwitchingSchedule
    K: np.ndarray
    G_obs: np.ndarray
    initial: SystemState
    step: float = 1e-3
    horizon: float = 100.0
    signs: ProtocolSigns = ProtocolSigns()
    record_every: int = 1
    gammas: Mapping[int, np.ndarray] | None = None


def _check_alignment(sc: Scenario) -> int:
    steps = _grid_steps(sc.horizon, sc.step)
    if sc.switching.horizon + GRID_TOL * sc.horizon < sc.horizon:
        raise ConfigError("switching schedule does not cover the simulation horizon")
    for tb in sc.comm.boundaries(sc.horizon):
        if not _on_grid(tb, sc.step):
            raise ConfigError(f"communication switch at t = {tb} is off the step grid")
    for tb in sc.switching.boundaries:
        if tb <= sc.horizon and not _on_grid(tb, sc.step):
            raise ConfigError(f"topology switch at t = {tb} is off the step grid")
    if sc.record_every < 1:
        raise ConfigError("record_every must be a positive integer")
    return steps


def _linear_map(plant: PlantModel, K: np.ndarray, G_obs: np.ndarray, H: np.ndarray,
                g: np.ndarray) -> np.ndarray:
    n, N = plant.n, H.shape[0]
    A, B, C = plant.A, plant.B, plant.C
    BK = B @ K
    GC = G_obs @ C
    size = n * (2 * N + 1)
    M = np.zeros((size, size))
    M[:n, :n] = A
    xs = slice(n, n + N * n)
    hs = slice(n + N * n, size)
    eye = np.eye(N)
    M[xs, xs] = np.kron(eye, A)
    M[hs, hs] = np.kron(eye, A + GC) + np.kron(H, BK)
    M[hs, xs] = np.kron(eye, -GC)
    M[xs, hs] = np.kron(H, BK)
    M[xs, :n] = np.kron(g[:, None], BK)
    M[hs, :n] = np.kron(g[:, None], BK)
    return M


def step_labels(sc: Scenario, times: np.ndarray) -> tuple[list, np.ndarray]:
    """Mode and topology index active on each step starting at ``times``."""
    modes = [comm_mode(sc.comm, float(t)) for t in times]
    last = sc.switching.indices[-1]
    topo = np.array([sc.switching.topology_index(float(t)) if t < sc.switching.horizon else last
                     for t in times], dtype=int)
    return modes, topo


def simulate(sc: Scenario) -> SimulationTrace:
    """Integrate leader, followers and observers with classical RK4.

    Raises :class:`DivergenceError` (carrying the trace up to the last finite
    record) once any component exceeds 1e9 in magnitude.
    """
    plant = sc.plant
    n, N = plant.n, sc.initial.followers.shape[0]
    if sc.initial.followers.shape[1] != n:
        raise ConfigError("initial state dimension does not match the plant")
    if sc.switching.n_followers != N:
        raise ConfigError("topologies and initial states disagree on the follower count")
    K = np.atleast_2d(np.asarray(sc.K, dtype=float))
    G = np.atleast_2d(np.asarray(sc.G_obs, dtype=float))
    if K.shape != (plant.m, n) or G.shape != (n, plant.z):
        raise ConfigError(f"gain shapes K {K.shape}, G {G.shape} do not fit the plant")
    steps = _check_alignment(sc)
    h = sc.step
    times = np.arange(steps + 1) * h
    modes, topo = step_labels(sc, times)

    gammas = {}
    maps: dict = {}
    protocol: dict = {}
    for k in range(steps + 1):
        key = (int(topo[k]), modes[k])
        if key in maps:
            continue
        idx = key[0]
        if idx not in gammas:
            given = None if sc.gammas is None else sc.gammas.get(idx)
            gammas[idx] = given if given is not None else coupling_gains(sc.switching.topologies[idx - 1])
        H, g = protocol_matrices(sc.switching.topologies[idx - 1], key[1], gammas[idx], sc.signs)
        protocol[key] = (H, g)
        maps[key] = _linear_map(plant, K, G, H, g)

    f = plant.f
    rows = 2 * N + 1

    def rhs_factory(M):
        def rhs(_t, y):
            return M @ y + f(y.reshape(rows, n)).ravel()
        return rhs

    rhs_cache = {key: rhs_factory(M) for key, M in maps.items()}

    rec_idx = list(range(0, steps + 1, sc.record_every))
    if rec_idx[-1] != steps:
        rec_idx.append(steps)
    n_rec = len(rec_idx)
    Z = np.empty((n_rec, rows * n))
    y = np.concatenate([sc.initial.leader, sc.initial.followers.ravel(), sc.initial.estimates.ravel()])
    Z[0] = y
    r = 1
    for k in range(steps):
        key = (int(topo[k]), modes[k])
        y = rk4_step(rhs_cache[key], times[k], y, h)
        if not np.all(np.isfinite(y)) or np.abs(y).max() > DIVERGENCE_LIMIT:
            partial = _assemble(Z[:r], [rec_idx[j] for j in range(r)], times, modes, topo,
                                protocol, K, n, N)
            raise DivergenceError(f"state exceeded {DIVERGENCE_LIMIT:g} at t = {times[k + 1]:.6g}",
                                  trace=partial)
        if r < n_rec and rec_idx[r] == k + 1:
            Z[r] = y
            r += 1
    return _assemble(Z, rec_idx, times, modes, topo, protocol, K, n, N)


def _assemble(Z, rec_idx, times, modes, topo, protocol, K, n, N) -> SimulationTrace:
    nr = len(rec_idx)
    leader = Z[:, :n].copy()
    followers = Z[:, n:n + N * n].reshape(nr, N, n).copy()
    estimates = Z[:, n + N * n:].reshape(nr, N, n).copy()
    inputs = np.empty((nr, N, K.shape[0]))
    rec_modes = []
    for j, k in enumerate(rec_idx):
        key = (int(topo[k]), modes[k])
        H, g = protocol[key]
        inputs[j] = (H @ estimates[j] + np.outer(g, leader[j])) @ K.T
        rec_modes.append(modes[k])
    return SimulationTrace(times[list(rec_idx)].copy(), leader, followers, estimates, inputs,
                           tuple(rec_modes), topo[list(rec_idx)].copy())


def default_initial_state(n: int, N: int, rng: np.random.Generator,
                          leader: Sequence[float] | None = None) -> SystemState:
    """Followers uniform in [-1, 1]^n, estimates at zero, leader at ``leader`` (default all ones)."""
    x0 = np.ones(n) if leader is None else np.asarray(leader, dtype=float)
    return SystemState(x0, rng.uniform(-1.0, 1.0, size=(N, n)), np.zeros((N, n)), 0.0)


def lyapunov_trace(trace: SimulationTrace, weights: Mapping[int, "CouplingWeights"],
                   P1: np.ndarray, P2: np.ndarray) -> SimulationTrace:
    """Attach V(t) computed with the weights of the topology active at each record."""
    from .analysis import lyapunov_series
    return trace.with_lyapunov(lyapunov_series(trace, weights, P1, P2))


# -- trace serialization ----------------------------------------------------

def trace_header(n: int, N: int, m: int) -> list:
    cols = ["t", "mode", "topology"] + [f"x0_{k + 1}" for k in range(n)]
    for prefix, width in (("x", n), ("xhat", n), ("e", n), ("psi", n), ("u", m)):
        for i in range(N):
            cols += [f"{prefix}{i + 1}_{k + 1}" for k in range(width)]
    return cols + ["V"]


def write_trace_csv(trace: SimulationTrace, path) -> None:
    """One row per record, floats with 17 significant digits (exact reload)."""
    K, N, n = trace.followers.shape
    m = trace.inputs.shape[2]
    t = trace.t[:, None]
    V = trace.V[:, None] if trace.V is not None else np.full((K, 1), np.nan)
    blocks = [trace.leader, trace.followers.reshape(K, -1), trace.estimates.reshape(K, -1),
              trace.errors.reshape(K, -1), trace.psi.reshape(K, -1), trace.inputs.reshape(K, -1), V]
    num = np.hstack(blocks)
    with open(path, "w", newline="") as fh:
        fh.write(",".join(trace_header(n, N, m)) + "\n")
        for k in range(K):
            mode = trace.modes[k]
            mode = mode.value if isinstance(mode, Mode) else str(mode)
            fh.write(f"{t[k, 0]:.17g},{mode},{int(trace.topology[k])},"
                     + ",".join(f"{v:.17g}" for v in num[k]) + "\n")


def read_trace_csv(path, n: int, N: int, m: int) -> SimulationTrace:
    import csv
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    if header != trace_header(n, N, m):
        raise ConfigError("trace header does not match the requested dimensions")
    t = np.array([float(r[0]) for r in body])
    modes = tuple(Mode(r[1]) for r in body)
    topo = np.array([int(r[2]) for r in body])
    num = np.array([[float(v) for v in r[3:]] for r in body]).reshape(len(body), -1)
    K = len(body)
    pos = 0

    def take(width):
        nonlocal pos
        out = num[:, pos:pos + width]
        pos += width
        return out

    leader = take(n)
    followers = take(N * n).reshape(K, N, n)
    estimates = take(N * n).reshape(K, N, n)
    take(2 * N * n)  # e and psi are recomputed
    inputs = take(N * m).reshape(K, N, m)
    V = take(1)[:, 0]
    return SimulationTrace(t, leader, followers, estimates, inputs, modes, topo,
                           None if np.all(np.isnan(V)) else V)
