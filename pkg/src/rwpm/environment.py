"""Disorder paths, bridges and size-biased environments.

The environment ``Y`` jumps at rate ``rho``.  In the enriched construction
each jump carries an amplitude bound ``U`` with law ``mu_bar`` and a
displacement ``V`` uniform on ``{-U..U}``; the displacement then has law
``J``.  Given ``V = x`` the amplitude has law ``(J(k) - J(k+1)) / J(x)`` on
``k >= |x|``, which lets bridge samples be enriched exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .kernel import KernelTable, _invert_tail, sample_jump_amplitude, sample_jump_displacement
from .spectral import lattice_law


class BridgeFailure(RuntimeError):
    """Rejection sampler exhausted its attempt budget."""


@dataclass(frozen=True, eq=False)
class EnvPath:
    """Ordered jump records ``(theta, U, V)`` on ``(0, T]``.

    ``U`` is ``None`` for paths built from displacements only.
    """

    rho: float
    T: float
    theta: np.ndarray
    V: np.ndarray
    U: np.ndarray | None = None
    y0: int = 0

    def __post_init__(self):
        theta = np.asarray(self.theta, dtype=float)
        v = np.asarray(self.V, dtype=np.int64)
        object.__setattr__(self, "theta", theta)
        object.__setattr__(self, "V", v)
        if theta.shape != v.shape:
            raise ValueError("theta and V must have the same length")
        if theta.size and (np.any(np.diff(theta) <= 0) or theta[0] <= 0 or theta[-1] > self.T):
            raise ValueError("jump times must be strictly increasing in (0, T]")
        if self.U is not None:
            u = np.asarray(self.U, dtype=np.int64)
            object.__setattr__(self, "U", u)
            if u.shape != v.shape or np.any(np.abs(v) > u):
                raise ValueError("each record needs |V| <= U")
        object.__setattr__(self, "_levels", self.y0 + np.concatenate([[0], np.cumsum(v)]))

    @property
    def n_jumps(self) -> int:
        return int(self.theta.size)

    @property
    def levels(self) -> np.ndarray:
        """``Y`` on successive constancy intervals (length ``n_jumps + 1``)."""
        return self._levels

    def records(self) -> list[tuple[float, int | None, int]]:
        u = self.U if self.U is not None else [None] * self.n_jumps
        return [(float(t), None if a is None else int(a), int(b)) for t, a, b in zip(self.theta, u, self.V)]

    def y_at(self, t):
        """``Y_t`` (right-continuous), vectorized over ``t``."""
        t_arr = np.asarray(t, dtype=float)
        if np.any((t_arr < 0) | (t_arr > self.T)):
            raise ValueError(f"t outside [0, {self.T}]")
        idx = np.searchsorted(self.theta, t_arr, side="right")
        out = self._levels[idx]
        return int(out) if out.ndim == 0 else out


def y_at(path: EnvPath, t):
    return path.y_at(t)


def _poisson_times(rng: np.random.Generator, rate: float, T: float) -> np.ndarray:
    n = rng.poisson(rate * T)
    times = np.sort(rng.uniform(0.0, T, n))
    # ties or a zero time have probability zero; resample defensively
    while n and (times[0] <= 0.0 or np.any(np.diff(times) <= 0)):
        times = np.sort(rng.uniform(0.0, T, n))
    return times


def sample_env(kernel: KernelTable, rho: float, T: float, rng: np.random.Generator) -> EnvPath:
    """Enriched construction: ``U ~ mu_bar``, ``V | U`` uniform on ``{-U..U}``."""
    if not 0.0 <= rho < 1.0:
        raise ValueError("rho must lie in [0, 1)")
    if T <= 0:
        raise ValueError("T must be positive")
    theta = _poisson_times(rng, rho, T)
    u = np.asarray(sample_jump_amplitude(kernel, rng, theta.size), dtype=np.int64)
    v = rng.integers(-u, u + 1) if u.size else u.copy()
    return EnvPath(rho, T, theta, v, u)


def sample_plain_env(kernel: KernelTable, rho: float, T: float, rng: np.random.Generator) -> EnvPath:
    """Standard construction: rate-``rho`` jumps with displacement law ``J``."""
    theta = _poisson_times(rng, rho, T)
    v = np.asarray(sample_jump_displacement(kernel, rng, theta.size), dtype=np.int64)
    return EnvPath(rho, T, theta, v)


def sample_amplitude_given_displacement(kernel: KernelTable, v, rng: np.random.Generator) -> np.ndarray:
    """``U | V = v``: ``P(U >= k | V = v) = J(k) / J(v)`` for ``k >= |v|``."""
    v = np.abs(np.asarray(v, dtype=np.int64))
    levels = kernel.j(v) * (1.0 - rng.random(v.shape))
    levels = np.atleast_1d(levels)
    u = _invert_tail(kernel.j_values, kernel.j, levels, kernel.x_max)
    return np.maximum(u.reshape(v.shape), v)


@dataclass(frozen=True, eq=False)
class EnvBatch:
    """Many independent enriched paths on ``[0, T]`` stored flat.

    Records of path ``i`` occupy ``offsets[i]:offsets[i + 1]``, in time order.
    """

    rho: float
    T: float
    offsets: np.ndarray
    theta: np.ndarray
    U: np.ndarray
    V: np.ndarray

    @property
    def size(self) -> int:
        return self.offsets.size - 1

    @property
    def counts(self) -> np.ndarray:
        return np.diff(self.offsets)

    @property
    def owner(self) -> np.ndarray:
        return np.repeat(np.arange(self.size), self.counts)

    def per_path(self, values) -> np.ndarray:
        """Sum per-record ``values`` within each path."""
        return np.bincount(self.owner, weights=np.asarray(values, dtype=float), minlength=self.size)

    def endpoints(self) -> np.ndarray:
        return _group_sums(self.V, self.counts)

    def path(self, i: int) -> EnvPath:
        sl = slice(self.offsets[i], self.offsets[i + 1])
        return EnvPath(self.rho, self.T, self.theta[sl], self.V[sl], self.U[sl])


def sample_env_batch(kernel: KernelTable, rho: float, T: float, n: int, rng: np.random.Generator) -> EnvBatch:
    """``n`` paths from the enriched construction, drawn in one vectorized pass."""
    counts = rng.poisson(rho * T, n)
    offsets = np.concatenate([[0], np.cumsum(counts)])
    total = int(offsets[-1])
    owner = np.repeat(np.arange(n), counts)
    theta = rng.uniform(0.0, T, total)
    order = np.lexsort((theta, owner))
    theta = theta[order]
    u = np.asarray(sample_jump_amplitude(kernel, rng, total), dtype=np.int64)
    v = rng.integers(-u, u + 1) if total else u.copy()
    return EnvBatch(rho, T, offsets, theta, u, v)


def _group_sums(values: np.ndarray, counts: np.ndarray) -> np.ndarray:
    """Exact integer sums of consecutive groups of the given sizes."""
    out = np.zeros(counts.size, dtype=np.int64)
    np.add.at(out, np.repeat(np.arange(counts.size), counts), values)
    return out


def sample_walk_endpoints(kernel: KernelTable, duration: float, rng: np.random.Generator, size: int) -> np.ndarray:
    """``W_duration`` for ``size`` independent rate-1 walks."""
    counts = rng.poisson(duration, size)
    steps = np.asarray(sample_jump_displacement(kernel, rng, int(counts.sum())), dtype=np.int64)
    return _group_sums(steps, counts)


def local_time_max(path: EnvPath) -> tuple[float, int]:
    """Largest occupation time ``max_x L_T(x)`` of ``Y`` on ``[0, T]`` and its level."""
    edges = np.concatenate([[0.0], path.theta, [path.T]])
    levels, inverse = np.unique(path.levels, return_inverse=True)
    occupation = np.bincount(inverse, weights=np.diff(edges))
    i = int(np.argmax(occupation))
    return float(occupation[i]), int(levels[i])


def local_time_at(path: EnvPath, x: int) -> float:
    edges = np.concatenate([[0.0], path.theta, [path.T]])
    return float(np.sum(np.diff(edges)[path.levels == x]))


def escape_probability_mc(kernel: KernelTable, n_steps: int, n_walks: int, rng: np.random.Generator):
    """Monte Carlo estimate of the no-return probability of the jump chain.

    Walks are followed for ``n_steps`` steps (a step of size zero counts as a
    return).  Returns ``(estimate, stderr, bias_bound)`` where ``bias_bound``
    bounds the probability of a first return after the horizon by the exact
    expected number of late visits ``(1/pi) int (1 - h)^(n+1) / h``.
    """
    from .spectral import spectral_grid

    pos = np.zeros(n_walks, dtype=np.int64)
    alive = np.ones(n_walks, dtype=bool)
    for _ in range(n_steps):
        idx = np.flatnonzero(alive)
        if idx.size == 0:
            break
        pos[idx] += np.asarray(sample_jump_displacement(kernel, rng, idx.size), dtype=np.int64)
        alive[idx[pos[idx] == 0]] = False
    est = float(alive.mean())
    err = math.sqrt(est * (1 - est) / n_walks)
    sg = spectral_grid(kernel)
    bias = float(sg.integrate_fn(lambda h: (1.0 - h) ** (n_steps + 1) / h))
    return est, err, bias


@dataclass(frozen=True, eq=False)
class BridgeSample:
    """Rate-one walk on ``[0, duration]`` conditioned on ``W_duration = 0``."""

    duration: float
    times: np.ndarray
    steps: np.ndarray
    attempts: int

    @property
    def path(self) -> EnvPath:
        return EnvPath(1.0, self.duration, self.times, self.steps)


def _bridge_budget(kernel: KernelTable, duration: float) -> int:
    p0 = float(lattice_law(kernel).p0(max(duration, 1e-7)))
    return int(math.ceil(100.0 / p0))


def sample_bridges(kernel: KernelTable, duration: float, n: int, rng: np.random.Generator,
                   max_attempts: int | None = None) -> list[BridgeSample]:
    """``n`` independent bridges by batched rejection.

    Walks are proposed in order and the attempt count of each accepted bridge
    is the number of proposals since the previous acceptance.
    """
    if duration <= 0:
        raise ValueError("duration must be positive")
    if max_attempts is None:
        max_attempts = _bridge_budget(kernel, duration)
    p_hat = float(lattice_law(kernel).p0(max(duration, 1e-7)))
    out: list[BridgeSample] = []
    since = 0
    while len(out) < n:
        batch = int(min(max(64, 2.0 * (n - len(out)) / p_hat), 2**20))
        counts = rng.poisson(duration, batch)
        steps = np.asarray(sample_jump_displacement(kernel, rng, int(counts.sum())), dtype=np.int64)
        ends = _group_sums(steps, counts)
        starts = np.concatenate([[0], np.cumsum(counts)])
        prev = -1
        for i in np.flatnonzero(ends == 0):
            if len(out) == n or since + int(i - prev) > max_attempts:
                break
            k = counts[i]
            times = np.sort(rng.uniform(0.0, duration, k))
            out.append(BridgeSample(duration, times, steps[starts[i] : starts[i] + k], since + int(i - prev)))
            since, prev = 0, int(i)
        since += batch - 1 - prev
        if len(out) < n and since > max_attempts:
            raise BridgeFailure(f"no bridge of duration {duration:g} in {max_attempts} attempts "
                                f"(acceptance estimate {p_hat:.3g})")
    return out


def sample_bridge(kernel: KernelTable, duration: float, rng: np.random.Generator,
                  max_attempts: int | None = None) -> BridgeSample:
    return sample_bridges(kernel, duration, 1, rng, max_attempts)[0]


def size_biased_blocks(kernel: KernelTable, points, rho: float, rng: np.random.Generator,
                       enrich: bool = True) -> EnvPath:
    """Environment under the law weighted by ``prod_i w(t_{i-1}, t_i, Y)``.

    Blocks are independent; on a block of length ``d`` the path is the first
    ``rho d`` time units of a bridge of duration ``d``, with times stretched
    by ``1/rho``.  Amplitudes are drawn from their conditional law given the
    displacement, which the weights do not involve.
    """
    points = np.asarray(points, dtype=float)
    if points.size < 2 or np.any(np.diff(points) <= 0):
        raise ValueError("need an increasing renewal trajectory with at least one block")
    T = float(points[-1])
    if rho == 0:
        empty = np.zeros(0)
        return EnvPath(0.0, T, empty, empty.astype(np.int64), empty.astype(np.int64) if enrich else None)
    thetas, vs = [], []
    for a, b in zip(points[:-1], points[1:]):
        d = b - a
        br = sample_bridge(kernel, d, rng)
        keep = br.times <= rho * d
        thetas.append(a + br.times[keep] / rho)
        vs.append(br.steps[keep])
    theta = np.concatenate(thetas)
    v = np.concatenate(vs).astype(np.int64)
    theta = np.minimum(theta, T)
    u = sample_amplitude_given_displacement(kernel, v, rng) if enrich else None
    return EnvPath(rho, T, theta, v, u)


def weight(kernel: KernelTable, s: float, t: float, path: EnvPath, rho: float | None = None):
    """``w(s, t, Y) = P(X_{(1-rho)(t-s)} = Y_t - Y_s) / P(W_{t-s} = 0)``."""
    rho = path.rho if rho is None else rho
    s_arr, t_arr = np.broadcast_arrays(np.asarray(s, dtype=float), np.asarray(t, dtype=float))
    if np.any(t_arr <= s_arr) or np.any(s_arr < 0):
        raise ValueError("need 0 <= s < t")
    if rho == 0:
        # X and W coincide and Y is constant
        out = np.ones(s_arr.shape)
        return float(out) if out.ndim == 0 else out
    law = lattice_law(kernel)
    disp = path.y_at(t_arr) - path.y_at(s_arr)
    lag = t_arr - s_arr
    out = law.prob((1.0 - rho) * lag, disp) / law.p0(lag)
    return float(out) if out.ndim == 0 else out


def block_weight(kernel: KernelTable, points, path: EnvPath, rho: float | None = None) -> float:
    """``prod_i w(t_{i-1}, t_i, Y)`` over consecutive renewal points."""
    points = np.asarray(points, dtype=float)
    return float(np.prod(weight(kernel, points[:-1], points[1:], path, rho)))
