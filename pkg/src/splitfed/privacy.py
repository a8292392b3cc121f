"""Client-side differential privacy mechanisms.

Two independent mechanisms: per-example gradient clipping plus Gaussian
noise on the averaged client-portion gradient, and Laplacian
randomization of the smashed activations before they leave the client.
Budget reporting is simple additive composition, not a moments
accountant.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeMismatch
from .nn import GradientSet, LayerSpec, ParameterSet, stack_backward, stack_forward

COMPOSITION_NOTE = "simple composition, not a moments accountant"


@dataclass
class DpConfig:
    """Noise scale, clip bound and declared budgets.

    sigma and epsilon are independent inputs: the report is declarative
    and no sigma<->epsilon calibration is performed.
    """

    noise_scale: float = 1.3
    clip_norm: float = 1.0
    epsilon: float = 0.5
    delta: float = 1e-5
    smashed_epsilon: float = 1.0
    gradient_dp: bool = False
    smashed_dp: bool = False

    def validate(self) -> None:
        if self.noise_scale <= 0 or self.clip_norm <= 0:
            raise ValueError("noise_scale and clip_norm must be positive")
        if self.epsilon <= 0 or self.smashed_epsilon <= 0:
            raise ValueError("epsilon budgets must be positive")
        if not 0 < self.delta < 1:
            raise ValueError("delta must lie in (0, 1)")

    @property
    def enabled(self) -> bool:
        return self.gradient_dp or self.smashed_dp


class DpRng:
    """Deterministic per-client noise source.

    Gaussian draws use Box-Muller over the generator's uniforms and
    Laplace draws use the inverse CDF, so the draw sequence is pinned by
    this module rather than by the underlying library's samplers.
    """

    def __init__(self, seed: int):
        self._gen = np.random.Generator(np.random.PCG64(seed))

    def uniform(self, size: int) -> np.ndarray:
        return self._gen.random(size)

    def normal(self, shape: tuple[int, ...]) -> np.ndarray:
        count = int(np.prod(shape)) if shape else 1
        pairs = (count + 1) // 2
        u1 = 1.0 - self._gen.random(pairs)  # (0, 1], keeps log finite
        u2 = self._gen.random(pairs)
        radius = np.sqrt(-2.0 * np.log(u1))
        angle = 2.0 * np.pi * u2
        draws = np.empty(2 * pairs)
        draws[0::2] = radius * np.cos(angle)
        draws[1::2] = radius * np.sin(angle)
        return draws[:count].reshape(shape)

    def laplace(self, shape: tuple[int, ...]) -> np.ndarray:
        """Unit-scale Laplace via inverse CDF."""
        count = int(np.prod(shape)) if shape else 1
        u = self._gen.random(count) - 0.5
        draws = -np.sign(u) * np.log1p(-2.0 * np.abs(u))
        return draws.reshape(shape)


def client_noise_rng(seed: int, client_id: int) -> DpRng:
    return DpRng(seed ^ client_id)


def per_example_gradients(
    layers: list[LayerSpec],
    params: ParameterSet,
    batch_x: np.ndarray,
    upstream: np.ndarray,
) -> list[GradientSet]:
    """Backward per single example, each with its own upstream row.

    Rows are propagated as given; callers wanting full per-sample
    gradients (sum-reduction convention) scale the batch-mean upstream
    by the batch size first.
    """
    if upstream.shape[0] != batch_x.shape[0]:
        raise ShapeMismatch(f"{upstream.shape[0]} upstream rows vs batch of {batch_x.shape[0]}")
    grads = []
    for i in range(batch_x.shape[0]):
        _, caches = stack_forward(layers, params, batch_x[i : i + 1])
        _, gset = stack_backward(
            layers, params, caches, upstream[i : i + 1], need_input_grad=False
        )
        grads.append(gset)
    return grads


def clip_gradient(grads: GradientSet, clip_norm: float) -> GradientSet:
    """Scale by 1/max(1, ||g||/C'); the norm spans all entries jointly."""
    norm = grads.l2_norm()
    scale = 1.0 / max(1.0, norm / clip_norm)
    if scale == 1.0:
        return grads
    return GradientSet([(name, value * scale) for name, value in grads.entries])


def noisy_average(
    clipped: list[GradientSet],
    sigma: float,
    clip_norm: float,
    n_k: int,
    rng: DpRng,
) -> GradientSet:
    """(1/n_k) * sum_i (g_i + N(0, sigma^2 C'^2 I)), noise drawn per example."""
    if n_k != len(clipped):
        raise ShapeMismatch(f"n_k={n_k} but {len(clipped)} gradients supplied")
    std = sigma * clip_norm
    acc = [(name, np.zeros_like(value)) for name, value in clipped[0].entries]
    for gset in clipped:
        for slot, (_, value) in zip(acc, gset.entries):
            slot[1][...] += value + std * rng.normal(value.shape)
    return GradientSet([(name, value / n_k) for name, value in acc])


def randomize_smashed(activations: np.ndarray, smashed_epsilon: float, rng: DpRng) -> np.ndarray:
    """Per-feature Laplace noise with scale (max - min over the batch) / eps'.

    A feature whose column is constant has a zero interval, hence zero
    noise scale, and passes through unchanged.
    """
    n = activations.shape[0]
    flat = activations.reshape(n, -1)
    interval = flat.max(axis=0) - flat.min(axis=0)
    scale = interval / smashed_epsilon
    noisy = flat + scale * rng.laplace(flat.shape)
    return noisy.reshape(activations.shape)


def report_budget(config: DpConfig) -> tuple[float, float]:
    """Additive (epsilon, delta) report over the enabled mechanisms."""
    total = 0.0
    if config.gradient_dp:
        total += config.epsilon
    if config.smashed_dp:
        total += config.smashed_epsilon
    return total, config.delta


def format_budget(config: DpConfig) -> str:
    eps, delta = report_budget(config)
    if not config.enabled:
        return "dp-off"
    return f"eps={eps:g},delta={delta:g} ({COMPOSITION_NOTE})"
