"""SGD and its privacy-motivated variants.

Four mechanisms share one loop:

* plain SGD                     noise mode "none", no penalties
* clip-and-noise SGD            optional per-example clipping, then one
                                Gaussian draw of scale sigma added to the
                                averaged batch gradient
* proportional-noise SGD        per-coordinate noise of scale theta_i*sigma,
                                using the pre-update parameter values
* penalty-based SGD             weight decay and/or the parameter-input
                                product term folded into each per-example
                                gradient, no noise required

Order per batch: per-example loss gradient, plus penalty gradients, then
optional per-example clipping, average, one optional noise draw, step.
Penalties belong to the loss, so they come before the privacy mechanics.

A run is deterministic given its seed.  Three fixed substreams are used:
STREAM_INIT for parameter init, STREAM_SHUFFLE for epoch permutations,
STREAM_NOISE for gradient noise.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .model import (Dataset, Example, ModelSpec, ParameterSet, backward,
                    forward, init_params, quadratic_loss)
from .numerics import RngStream
from .regularizers import (RegSpec, dp_input_penalty, l2_grad, l2_penalty,
                           pdp_grad, pdp_penalty)

NOISE_MODES = ("none", "iid", "proportional")

STREAM_INIT = 0
STREAM_SHUFFLE = 1
STREAM_NOISE = 2


@dataclass(frozen=True)
class NoiseSpec:
    """Gradient noise mode, scale, and optional per-example clip threshold."""

    mode: str = "none"
    sigma: float = 0.0
    clip_c: float | None = None

    def __post_init__(self):
        if self.mode not in NOISE_MODES:
            raise ValueError(f"unknown noise mode {self.mode!r}")
        if self.sigma < 0:
            raise ValueError(f"sigma must be nonnegative, got {self.sigma}")
        if self.clip_c is not None and not self.clip_c > 0:
            raise ValueError(f"clip_c must be positive, got {self.clip_c}")


@dataclass(frozen=True)
class TrainConfig:
    """Everything a training run needs besides the model and the data.

    eta may be a positive float or a callable step -> eta_t for schedules.
    """

    eta: float | Callable[[int], float]
    batch_size: int = 1
    epochs: int = 1
    seed: int = 0
    noise: NoiseSpec = NoiseSpec()
    reg: RegSpec = RegSpec()
    record_gradients: bool = False
    record_cap: int = 128

    def __post_init__(self):
        if not callable(self.eta) and not self.eta > 0:
            raise ValueError(f"eta must be positive, got {self.eta}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.record_cap < 0:
            raise ValueError("record_cap must be nonnegative")

    def eta_at(self, step: int) -> float:
        eta = self.eta(step) if callable(self.eta) else self.eta
        if not eta > 0:
            raise ValueError(f"learning rate must stay positive, got {eta} at step {step}")
        return float(eta)


@dataclass
class GradientRecord:
    """Averaged batch gradient before and after the privacy mechanism."""

    step: int
    clean: np.ndarray
    noisy: np.ndarray
    batch_indices: np.ndarray


@dataclass
class TrainReport:
    epoch_losses: list[float]
    final_params: ParameterSet
    records: list[GradientRecord] | None
    epoch_seconds: list[float] = field(default_factory=list)


def clip_gradient(g: np.ndarray, c: float) -> np.ndarray:
    """Rescale g to norm at most c, preserving direction: g / max(1, |g|/c)."""
    if not c > 0:
        raise ValueError(f"clip threshold must be positive, got {c}")
    g = np.asarray(g, dtype=np.float64)
    norm = float(np.linalg.norm(g))
    return g / max(1.0, norm / c)


def add_iid_noise(g: np.ndarray, sigma: float, rng: RngStream) -> np.ndarray:
    """g plus one N(0, sigma^2) draw per coordinate."""
    if sigma < 0:
        raise ValueError(f"sigma must be nonnegative, got {sigma}")
    g = np.asarray(g, dtype=np.float64)
    if sigma == 0:
        return g.copy()
    return g + rng.normal(0.0, sigma, g.size)


def add_proportional_noise(g: np.ndarray, params: ParameterSet, sigma: float,
                           rng: RngStream) -> np.ndarray:
    """g plus per-coordinate noise of standard deviation |theta_i| * sigma.

    Coordinates with theta_i = 0 receive exactly zero noise.
    """
    if sigma < 0:
        raise ValueError(f"sigma must be nonnegative, got {sigma}")
    g = np.asarray(g, dtype=np.float64)
    if g.shape != params.flat.shape:
        raise ValueError(
            f"gradient shape {g.shape} does not match parameters {params.flat.shape}"
        )
    if sigma == 0:
        return g.copy()
    z = rng.normal(0.0, 1.0, g.size)
    return g + sigma * params.flat * z


def sgd_step(params: ParameterSet, g_tilde: np.ndarray, eta: float) -> ParameterSet:
    """theta - eta * g_tilde as a new ParameterSet."""
    if not eta > 0:
        raise ValueError(f"eta must be positive, got {eta}")
    g = np.asarray(g_tilde, dtype=np.float64)
    if g.shape != params.flat.shape:
        raise ValueError(
            f"gradient shape {g.shape} does not match parameters {params.flat.shape}"
        )
    return ParameterSet(params.spec, params.flat - eta * g)


def initial_params_for(spec: ModelSpec, config: TrainConfig) -> ParameterSet:
    """The parameter vector train() starts from under this config."""
    return init_params(spec, RngStream(config.seed, STREAM_INIT))


def _example_loss(spec: ModelSpec, params: ParameterSet, ex: Example,
                  reg: RegSpec, kappa: float) -> float:
    trace = forward(spec, params, ex.x)
    loss = quadratic_loss(trace.output, ex.t)
    if reg.lam > 0:
        loss += l2_penalty(params, reg.lam)
    if kappa > 0:
        loss += pdp_penalty(params, ex.x, kappa, trace)
    if reg.input_kappa > 0:
        loss += dp_input_penalty(ex.x, reg.input_kappa)
    return loss


def dataset_loss(spec: ModelSpec, params: ParameterSet, data: Dataset,
                 reg: RegSpec = RegSpec(), kappa: float | None = None) -> float:
    """Mean per-example loss over the dataset, penalties included."""
    k = reg.kappa if kappa is None else kappa
    return float(np.mean([_example_loss(spec, params, ex, reg, k) for ex in data]))


def _batched(order: np.ndarray, batch_size: int) -> list[np.ndarray]:
    return [order[i:i + batch_size] for i in range(0, order.size, batch_size)]


def train(spec: ModelSpec, data: Dataset, config: TrainConfig,
          init: ParameterSet | None = None) -> TrainReport:
    """Run the configured mechanism and report per-epoch losses.

    Deterministic given config.seed: one full shuffle per epoch from the
    shuffle stream, the last partial batch kept, and one noise draw per
    batch applied to the averaged gradient.  Proportional noise scales
    with the pre-update parameters.  Pass `init` to start from explicit
    parameters instead of the seeded default.
    """
    if len(data) == 0:
        raise ValueError("dataset must be nonempty")
    if data.dim != spec.input_dim:
        raise ValueError(f"dataset dimension {data.dim} does not match model input {spec.input_dim}")
    if config.batch_size > len(data):
        raise ValueError("batch_size exceeds dataset size")

    noise = config.noise
    reg = config.reg
    shuffle_rng = RngStream(config.seed, STREAM_SHUFFLE)
    noise_rng = RngStream(config.seed, STREAM_NOISE)
    params = init.copy() if init is not None else initial_params_for(spec, config)

    records: list[GradientRecord] | None = [] if config.record_gradients else None
    epoch_losses: list[float] = []
    epoch_seconds: list[float] = []
    step = 0
    for _ in range(config.epochs):
        started = time.perf_counter()
        order = shuffle_rng.permutation(len(data))
        for batch_idx in _batched(order, config.batch_size):
            eta = config.eta_at(step)
            kappa = reg.kappa
            if reg.kappa_mode == "derived":
                kappa = eta * eta * noise.sigma * noise.sigma

            grads = []
            for i in batch_idx:
                ex = data.examples[i]
                trace = forward(spec, params, ex.x)
                g = backward(spec, params, trace, ex.t)
                if reg.lam > 0:
                    g = g + l2_grad(params, reg.lam)
                if kappa > 0:
                    g = g + pdp_grad(params, ex.x, kappa, trace)
                if noise.clip_c is not None:
                    g = clip_gradient(g, noise.clip_c)
                grads.append(g)
            g_clean = np.mean(grads, axis=0)

            if noise.mode == "iid":
                g_tilde = add_iid_noise(g_clean, noise.sigma, noise_rng)
            elif noise.mode == "proportional":
                g_tilde = add_proportional_noise(g_clean, params, noise.sigma, noise_rng)
            else:
                g_tilde = g_clean

            if records is not None and len(records) < config.record_cap:
                records.append(GradientRecord(step=step, clean=g_clean.copy(),
                                              noisy=g_tilde.copy(),
                                              batch_indices=batch_idx.copy()))
            params = sgd_step(params, g_tilde, eta)
            step += 1

        kappa = reg.kappa
        if reg.kappa_mode == "derived":
            kappa = config.eta_at(step) ** 2 * noise.sigma ** 2
        epoch_losses.append(dataset_loss(spec, params, data, reg, kappa))
        epoch_seconds.append(time.perf_counter() - started)

    return TrainReport(epoch_losses=epoch_losses, final_params=params,
                       records=records, epoch_seconds=epoch_seconds)
