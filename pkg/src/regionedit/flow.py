"""Straight-path flow sampling on a uniform time grid.

States live on a line between data (t = 0) and standard noise (t = 1):

    z_t = (1 - t) * x0 + t * x1

and the sampler integrates dz/dt = v(z, t) backward from t = 1 to 0
with fixed-step Euler. On a straight path the true velocity is constant
along the trajectory (x1 - x0), so exact Euler lands on x0 regardless
of step count; the integrator accumulates in float64 so that property
survives float32 state.

A run may skip the first `skipped` of `total_steps` steps. The state is
then initialized at t_start = (total - skipped) / total from a blend of
fresh noise and a noised reference image:

    z = alpha * noise + (1 - alpha) * ((1 - t_start) * ref + t_start * ref_noise)

which keeps the start point in the neighborhood the model saw during
training at that t while injecting enough noise to escape the
reference's low-frequency bias. With skipped = 0 there is no useful
reference information at t = 1 and initialization is the plain noise
draw.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import ConfigError, DimensionError, NumericError
from .region import upsample_bilinear


@dataclass(frozen=True)
class FlowSchedule:
    """Uniform grid with `total_steps` steps of size 1/total_steps,
    executing only the last `total_steps - skipped` of them."""

    total_steps: int = 28
    skipped: int = 0

    def __post_init__(self):
        if self.total_steps <= 0:
            raise ConfigError(f"total_steps must be positive, got {self.total_steps}")
        if not 0 <= self.skipped < self.total_steps:
            raise ConfigError(
                f"skipped must be in [0, {self.total_steps}), got {self.skipped}")

    @property
    def executed(self) -> int:
        return self.total_steps - self.skipped

    @property
    def t_start(self) -> float:
        return self.executed / self.total_steps

    def times(self) -> np.ndarray:
        """Times at which the velocity is evaluated, descending."""
        idx = np.arange(self.executed, 0, -1, dtype=np.float64)
        return idx / self.total_steps


@dataclass
class FlowState:
    """Current latent and position on the time grid."""

    z: np.ndarray
    t: float
    steps_done: int = 0


def interpolate(x0: np.ndarray, x1: np.ndarray, t: float) -> np.ndarray:
    """(1 - t) * x0 + t * x1 in float32."""
    x0 = np.asarray(x0, dtype=np.float32)
    x1 = np.asarray(x1, dtype=np.float32)
    if x0.shape != x1.shape:
        raise DimensionError(f"interpolate: {x0.shape} vs {x1.shape}")
    t = np.float32(t)
    return (np.float32(1.0) - t) * x0 + t * x1


def intermediate_init(reference: np.ndarray, noise: np.ndarray,
                      ref_noise: np.ndarray, schedule: FlowSchedule,
                      alpha: float = 0.7) -> np.ndarray:
    """Starting latent at schedule.t_start; see module docstring.

    With schedule.skipped == 0 the reference is ignored and the fresh
    noise draw is returned unchanged.
    """
    reference = np.asarray(reference, dtype=np.float32)
    noise = np.asarray(noise, dtype=np.float32)
    ref_noise = np.asarray(ref_noise, dtype=np.float32)
    if reference.shape != noise.shape or reference.shape != ref_noise.shape:
        raise DimensionError(
            f"intermediate_init shapes {reference.shape}/{noise.shape}/"
            f"{ref_noise.shape}")
    if not 0.0 < alpha < 1.0:
        raise ConfigError(f"alpha must lie in (0, 1), got {alpha}")
    if schedule.skipped == 0:
        return noise.copy()
    noised_ref = interpolate(reference, ref_noise, schedule.t_start)
    return np.float32(alpha) * noise + np.float32(1.0 - alpha) * noised_ref


def euler_sample(velocity_fn, z_start: np.ndarray, schedule: FlowSchedule,
                 callback=None) -> np.ndarray:
    """Integrate z' = v backward over the executed steps of the grid.

    velocity_fn(z_float32, t) -> array like z. The running state is kept
    in float64 and cast once at the end. Non-finite velocities raise
    NumericError at the offending step.
    """
    z = np.asarray(z_start, dtype=np.float64).copy()
    dt = 1.0 / schedule.total_steps
    for i, t in enumerate(schedule.times()):
        v = np.asarray(velocity_fn(z.astype(np.float32), float(t)))
        if v.shape != z.shape:
            raise DimensionError(f"velocity {v.shape} vs state {z.shape}")
        if not np.all(np.isfinite(v)):
            raise NumericError(f"non-finite velocity at t={t:.4f}")
        z -= dt * v.astype(np.float64)
        if callback is not None:
            callback(FlowState(z.astype(np.float32), float(t) - dt,
                               schedule.skipped + i + 1))
    return z.astype(np.float32)


def sharpen_upsample(lr: np.ndarray, factor: int, sigma: float = 1.0,
                     amount: float = 0.5) -> np.ndarray:
    """Bilinear upsample then unsharp mask; the flow reference image.

    out = up + amount * (up - gaussian(up, sigma)), clipped to [0, 1].
    The sharpening puts back some of the high-frequency energy the
    low-resolution proxy lost, which is what makes the reference a
    usable stand-in for a partially denoised state.
    """
    if sigma < 0 or amount < 0:
        raise ConfigError(f"sigma/amount must be non-negative, got {sigma}/{amount}")
    up = upsample_bilinear(lr, factor)
    if sigma == 0 or amount == 0:
        return np.clip(up, 0.0, 1.0)
    sig = (sigma, sigma) + (0,) * (up.ndim - 2)
    blurred = ndimage.gaussian_filter(up, sigma=sig)
    out = up + np.float32(amount) * (up - blurred)
    return np.clip(out, 0.0, 1.0).astype(np.float32)
