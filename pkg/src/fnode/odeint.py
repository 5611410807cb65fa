"""Fixed-step Runge-Kutta-4 integration of a latent state.

The vector field is any callable ``field(z, t) -> Tensor`` built from taped
primitives, so the returned states stay differentiable with respect to the
initial state and whatever parameters the field closes over (gradients come
from backpropagating through the solver steps, not an adjoint solve).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import tensorgrad as tg
from .tensorgrad import NonFiniteValue, Tensor

__all__ = [
    "SolverConfig",
    "TimeGrid",
    "IntegrationBlowUp",
    "integrate",
    "integrate_batch",
    "rk4_step",
]

VectorField = Callable[[Tensor, float], Tensor]


class IntegrationBlowUp(ArithmeticError):
    """State became non-finite during integration; carries the time of blow-up."""

    def __init__(self, t: float):
        super().__init__(f"non-finite state at t={t!r}")
        self.t = t


@dataclass(frozen=True)
class SolverConfig:
    """Fixed-step solver settings.  Only RK4 is supported."""

    method: str = "rk4"
    step_size: float = 0.1

    def __post_init__(self):
        if self.method != "rk4":
            raise ValueError(f"unsupported method {self.method!r}")
        if not self.step_size > 0:
            raise ValueError("step_size must be positive")


@dataclass(frozen=True)
class TimeGrid:
    """Strictly increasing observation/evaluation times."""

    times: np.ndarray

    def __init__(self, times):
        arr = np.asarray(times, dtype=np.float64)
        if arr.ndim != 1 or arr.shape[0] < 1:
            raise ValueError("TimeGrid needs at least one time")
        if arr.shape[0] > 1 and not np.all(np.diff(arr) > 0):
            raise ValueError("TimeGrid times must be strictly increasing")
        object.__setattr__(self, "times", arr)

    def __len__(self) -> int:
        return self.times.shape[0]


def rk4_step(field: VectorField, z: Tensor, t: float, h: float) -> Tensor:
    """One classical Runge-Kutta step of size ``h`` from time ``t``."""
    k1 = field(z, t)
    k2 = field(z + k1 * (h / 2.0), t + h / 2.0)
    k3 = field(z + k2 * (h / 2.0), t + h / 2.0)
    k4 = field(z + k3 * h, t + h)
    return z + (k1 + k4 + (k2 + k3) * 2.0) * (h / 6.0)


def integrate(
    field: VectorField,
    z0: Tensor,
    grid: TimeGrid | Sequence[float],
    cfg: SolverConfig,
) -> list[Tensor]:
    """States of ``dz/dt = field(z, t)`` at every grid time.

    ``grid.times[0]`` is the time of ``z0``.  Between requested times the
    solver takes full steps of ``cfg.step_size`` and shortens the final
    partial step to land exactly on the grid time.
    """
    if not isinstance(grid, TimeGrid):
        grid = TimeGrid(grid)
    times = grid.times
    if z0.data.ndim != 1:
        raise ValueError(f"z0 must be rank 1, got shape {z0.shape}")

    states = [z0]
    z = z0
    h = cfg.step_size
    for t_lo, t_hi in zip(times[:-1], times[1:]):
        gap = t_hi - t_lo
        n_full = int(math.floor(gap / h + 1e-12))
        t = float(t_lo)
        for _ in range(n_full):
            z = _checked_step(field, z, t, h)
            t += h
        rem = float(t_hi) - t
        if rem > 1e-12:
            z = _checked_step(field, z, t, rem)
        if not np.all(np.isfinite(z.data)):
            raise IntegrationBlowUp(float(t_hi))
        states.append(z)
    return states


def _checked_step(field: VectorField, z: Tensor, t: float, h: float) -> Tensor:
    # A non-finite intermediate inside the field is a blow-up at this step.
    try:
        z = rk4_step(field, z, t, h)
    except NonFiniteValue as e:
        raise IntegrationBlowUp(t + h) from e
    if not np.all(np.isfinite(z.data)):
        raise IntegrationBlowUp(t + h)
    return z


def integrate_batch(field, z0: Tensor, times: np.ndarray, cfg: SolverConfig) -> list[Tensor]:
    """Vectorized RK4 over a batch of trajectories with per-row time grids.

    ``z0`` is [B, p]; ``times`` is a [B, T] array, each row strictly
    increasing, with ``times[:, 0]`` the per-row time of the initial state.
    ``field(Z, t_row)`` maps a [B, p] state and a per-row time column to
    [B, p] derivatives.  Returns one [B, p] state tensor per grid column.

    Rows advance in lockstep: within every inter-observation segment each row
    takes its own count of full steps plus a final partial one, padded with
    zero-length steps (which leave the state bit-identical) so the batch
    shares one solver loop.  Per-row step sequences therefore match what
    :func:`integrate` would produce row by row.
    """
    times = np.asarray(times, dtype=np.float64)
    B, T = times.shape
    if z0.data.shape[0] != B:
        raise ValueError(f"z0 batch {z0.data.shape[0]} != times batch {B}")
    if T > 1 and not np.all(np.diff(times, axis=1) > 0):
        raise ValueError("each row of times must be strictly increasing")
    h = cfg.step_size

    states = [z0]
    z = z0
    for j in range(T - 1):
        t_lo = times[:, j]
        gap = times[:, j + 1] - t_lo
        n_full = np.floor(gap / h + 1e-12).astype(np.int64)
        rem = gap - n_full * h
        rem[rem <= 1e-12] = 0.0
        n_steps = int(np.max(n_full + (rem > 0)))
        for s in range(n_steps):
            h_row = np.where(s < n_full, h, np.where(s == n_full, rem, 0.0))
            t_row = t_lo + np.minimum(s, n_full) * h
            z = _batch_step(field, z, t_row, h_row, float(times[:, j + 1].max()))
        states.append(z)
    return states


def _batch_step(field, z: Tensor, t_row: np.ndarray, h_row: np.ndarray, t_report: float) -> Tensor:
    hcol = h_row[:, None]
    try:
        k1 = field(z, t_row)
        k2 = field(tg.add_scaled_rows(z, k1, hcol * 0.5), t_row + h_row * 0.5)
        k3 = field(tg.add_scaled_rows(z, k2, hcol * 0.5), t_row + h_row * 0.5)
        k4 = field(tg.add_scaled_rows(z, k3, hcol), t_row + h_row)
        z = tg.rk4_combine(z, k1, k2, k3, k4, hcol)
    except NonFiniteValue as e:
        raise IntegrationBlowUp(t_report) from e
    if not np.all(np.isfinite(z.data)):
        raise IntegrationBlowUp(t_report)
    return z
