"""Few-step Euler integration from noise to predicted follow-up.

The learned velocity field is integrated along t: 0 -> 1 with plain Euler
(straight-path premise of the training objective):

    x_{k+1} = x_k + (1/n) v(x_k, k/n, cond),   k = 0..n-1

starting from standard-normal noise. The result is clipped to [0, 1] exactly
once, after the final step.
"""

import time
from dataclasses import dataclass

import numpy as np
import torch

from .model import OUT_CHANNELS, ConditioningBundle, tensor_to_image


class SamplingError(RuntimeError):
    """Integration state became non-finite."""


@dataclass(frozen=True)
class SampleSpec:
    n_steps: int = 4
    seed: int = 0
    fixed_noise: np.ndarray | None = None   # (H, W, 3); overrides the seed

    def __post_init__(self):
        if self.n_steps < 1:
            raise ValueError("n_steps must be >= 1")


def initial_noise(size: int, seed: int) -> np.ndarray:
    """Deterministic standard-normal starting point, (H, W, 3) float32."""
    gen = torch.Generator().manual_seed(seed)
    x = torch.randn((1, OUT_CHANNELS, size, size), generator=gen)
    return tensor_to_image(x)


def euler_sample(net, bundle: ConditioningBundle, spec: SampleSpec = SampleSpec(),
                 size: int | None = None) -> np.ndarray:
    """Integrate the velocity field from noise; returns (H, W, 3) in [0, 1].

    ``net`` is any callable (x_t, t, bundle) -> velocity; normally a
    VelocityUNet. Deterministic given weights and spec.
    """
    if size is None:
        size = bundle.spatial.shape[-1]
    if spec.fixed_noise is not None:
        x0 = spec.fixed_noise
    else:
        x0 = initial_noise(size, spec.seed)
    x = torch.from_numpy(np.ascontiguousarray(x0, dtype=np.float32)) \
        .permute(2, 0, 1)[None]
    n = spec.n_steps
    with torch.no_grad():
        for k in range(n):
            t = torch.full((x.shape[0],), k / n, dtype=x.dtype)
            v = net(x, t, bundle)
            x = x + v / n
            if not torch.isfinite(x).all():
                raise SamplingError(f"non-finite state after step {k}")
    return np.clip(tensor_to_image(x), 0.0, 1.0)


@dataclass
class StepSweep:
    """Images sampled at several step counts from one shared noise draw."""

    steps: list
    images: dict          # n_steps -> (H, W, 3)
    reference_steps: int
    distances: dict       # n_steps -> MSE vs the largest-count image
    seconds: dict         # n_steps -> wall time of the sampling call


def step_sweep(net, bundle: ConditioningBundle, steps, seed: int = 0) -> StepSweep:
    """Sample at every step count with one shared initial noise and report the
    MSE of each image against the largest-count reference."""
    steps = list(steps)
    if not steps:
        raise ValueError("steps must be non-empty")
    size = bundle.spatial.shape[-1]
    noise = initial_noise(size, seed)
    images, seconds = {}, {}
    for n in steps:
        t0 = time.perf_counter()
        images[n] = euler_sample(net, bundle, SampleSpec(n_steps=n, fixed_noise=noise))
        seconds[n] = time.perf_counter() - t0
    ref = max(steps)
    distances = {n: float(np.mean((images[n] - images[ref]) ** 2)) for n in steps}
    return StepSweep(steps=steps, images=images, reference_steps=ref,
                     distances=distances, seconds=seconds)
