"""Time-symmetric step schedules and batched Euler-Maruyama simulation."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .errors import HorizonTooSmall, NonFiniteDrift, OddN, StepOutOfRange
from .measures import SampleSet

Drift = Callable[[float, np.ndarray], np.ndarray]


@dataclass(frozen=True, eq=False)
class TimeSchedule:
    """Step sizes ``gamma_1..gamma_N`` (a palindrome) and cumulative times ``t_0..t_N``."""

    steps: np.ndarray
    horizon: float
    gamma0: float
    gamma_bar: float

    @property
    def n_steps(self) -> int:
        return self.steps.shape[0]

    @property
    def cumulative(self) -> np.ndarray:
        return np.concatenate([[0.0], np.cumsum(self.steps)])

    def reversed(self) -> "TimeSchedule":
        return TimeSchedule(self.steps[::-1].copy(), self.horizon, self.gamma0, self.gamma_bar)


def make_schedule(N: int, gamma0: float, T: float) -> TimeSchedule:
    """Linear ramp from ``gamma0`` up to ``gamma_bar`` at the midpoint, mirrored.

    ``gamma_k = gamma0 + (2k/N)(gamma_bar - gamma0)`` for ``k = 1..N/2``, then
    ``gamma_{N+1-k} = gamma_k``.  Summing gives
    ``N gamma0 + (N/2 + 1)(gamma_bar - gamma0) = T``, which fixes ``gamma_bar``.
    ``gamma0`` is only the floor of the ramp, not a step.
    """
    if int(N) != N or N < 2 or N % 2:
        raise OddN(f"number of steps must be an even integer >= 2, got {N}")
    N = int(N)
    if not gamma0 > 0:
        raise ValueError(f"gamma0 must be positive, got {gamma0}")
    if not T > N * gamma0:
        raise HorizonTooSmall(f"horizon {T} must exceed N * gamma0 = {N * gamma0}")
    half = N // 2
    gamma_bar = gamma0 + (T - N * gamma0) / (half + 1)
    k = np.arange(1, half + 1)
    first = gamma0 + (2.0 * k / N) * (gamma_bar - gamma0)
    steps = np.concatenate([first, first[::-1]])
    steps.setflags(write=False)
    return TimeSchedule(steps, float(T), float(gamma0), float(gamma_bar))


@dataclass(frozen=True, eq=False)
class TrajectoryBatch:
    states: np.ndarray  # (M, N + 1, d)
    schedule: TimeSchedule
    direction: object = None

    @property
    def count(self) -> int:
        return self.states.shape[0]

    @property
    def dim(self) -> int:
        return self.states.shape[2]


def trajectory_noise(seed: int, indices: np.ndarray, n_steps: int, dim: int) -> np.ndarray:
    """Standard normals of shape ``(len(indices), n_steps, dim)``.

    Trajectory ``i`` always draws from its own Philox stream keyed by
    ``(seed, i)``, so any split of the batch reproduces the same numbers.
    """
    out = np.empty((len(indices), n_steps, dim))
    seed = int(seed) % 2**64
    for row, i in enumerate(indices):
        gen = np.random.Generator(np.random.Philox(key=[seed, int(i)]))
        out[row] = gen.standard_normal((n_steps, dim))
    return out


def _simulate_chunk(drift, schedule, x0, noise):
    steps = schedule.steps
    times = schedule.cumulative
    M, d = x0.shape
    states = np.empty((M, steps.shape[0] + 1, d))
    states[:, 0] = x0
    x = x0
    for m, gamma in enumerate(steps):
        if drift is not None:
            f = np.asarray(drift(times[m], x), dtype=float)
            if not np.all(np.isfinite(f)):
                raise NonFiniteDrift(f"drift returned non-finite values at step {m}")
            x = x + gamma * f + np.sqrt(gamma) * noise[:, m]
        else:
            x = x + np.sqrt(gamma) * noise[:, m]
        states[:, m + 1] = x
    return states


def em_forward(
    drift: Optional[Drift],
    schedule: TimeSchedule,
    init: SampleSet,
    rng_seed: int,
    *,
    direction=None,
    chunk_size: Optional[int] = None,
    workers: int = 1,
) -> TrajectoryBatch:
    """Simulate ``X_{m+1} = X_m + gamma_{m+1} f(t_m, X_m) + sqrt(gamma_{m+1}) Z_{m+1}``.

    ``drift(t, x)`` receives a batch ``x`` of shape ``(B, d)``; ``None`` means
    zero drift.  Chunks may run on ``workers`` threads; the drift must then be
    safe for concurrent read-only calls.
    """
    x0 = np.asarray(init.data, dtype=float)
    M, d = x0.shape
    N = schedule.n_steps
    chunk = M if not chunk_size else int(chunk_size)
    bounds = [(a, min(a + chunk, M)) for a in range(0, M, max(chunk, 1))] or [(0, 0)]

    def run(bound):
        a, b = bound
        noise = trajectory_noise(rng_seed, np.arange(a, b), N, d)
        return _simulate_chunk(drift, schedule, x0[a:b], noise)

    if workers > 1 and len(bounds) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(run, bounds))
    else:
        parts = [run(b) for b in bounds]
    states = np.concatenate(parts, axis=0) if parts else np.empty((0, N + 1, d))
    return TrajectoryBatch(states, schedule, direction)


def brownian_forward(schedule: TimeSchedule, init: SampleSet, rng_seed: int, **kwargs) -> TrajectoryBatch:
    return em_forward(None, schedule, init, rng_seed, **kwargs)


def extract_marginal(batch: TrajectoryBatch, step: int) -> SampleSet:
    N = batch.states.shape[1] - 1
    if not 0 <= step <= N:
        raise StepOutOfRange(f"step {step} outside 0..{N}")
    return SampleSet(batch.states[:, step])
