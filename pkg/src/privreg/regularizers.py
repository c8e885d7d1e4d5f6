"""Penalty terms and their exact parameter gradients.

Four terms appear in training losses here:

* classic weight decay        lam * sum_i theta_i^2
* input-only term             kappa * sum_i x_i^2        (parameter gradient: zero)
* parameter-input product     kappa * sum_i theta_i^2 * x_i^2
* the combination, whose gradient is base + 2*(lam + kappa*x_i^2)*theta_i

The input-only term is what adding homogeneous Gaussian gradient noise of
variance sigma^2 does to the expected loss of a linear neuron trained with
learning rate eta (with kappa = eta^2 * sigma^2): it shifts loss values
but, being independent of the parameters, steers nothing.  The
parameter-input product is the analogous expected-loss shift when the
per-coordinate noise scale is theta_i * sigma, and that one does steer.

For multi-layer models each weight pairs with its own incoming activation
(biases with the constant 1).  The pairing vector is treated as fixed when
differentiating, mirroring how the noise mechanism scales with the current
parameter values without being differentiated through.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import ForwardTrace, ParameterSet, forward, layout, n_params

KAPPA_MODES = ("explicit", "derived")


@dataclass(frozen=True)
class RegSpec:
    """Coefficients for the penalty terms added to a training loss.

    kappa_mode "derived" replaces kappa with eta_t^2 * sigma^2 at every
    step, using the active learning rate and noise scale; "explicit" uses
    kappa as given.  input_kappa weights the input-only term, which shifts
    reported losses but never the trajectory.
    """

    lam: float = 0.0
    kappa: float = 0.0
    kappa_mode: str = "explicit"
    input_kappa: float = 0.0

    def __post_init__(self):
        if self.lam < 0 or self.kappa < 0 or self.input_kappa < 0:
            raise ValueError("penalty coefficients must be nonnegative")
        if self.kappa_mode not in KAPPA_MODES:
            raise ValueError(f"unknown kappa_mode {self.kappa_mode!r}")

    @property
    def enabled(self) -> bool:
        return (self.lam > 0 or self.kappa > 0 or self.input_kappa > 0
                or self.kappa_mode == "derived")


def l2_penalty(params: ParameterSet, lam: float) -> float:
    """lam * sum(theta^2)."""
    if lam < 0:
        raise ValueError(f"lam must be nonnegative, got {lam}")
    return float(lam * np.dot(params.flat, params.flat))


def l2_grad(params: ParameterSet, lam: float) -> np.ndarray:
    """Coordinate-wise 2 * lam * theta."""
    if lam < 0:
        raise ValueError(f"lam must be nonnegative, got {lam}")
    return 2.0 * lam * params.flat


def dp_input_penalty(x: np.ndarray, kappa: float) -> float:
    """kappa * sum(x^2).  Constant in the parameters, so its parameter
    gradient is identically zero."""
    if kappa < 0:
        raise ValueError(f"kappa must be nonnegative, got {kappa}")
    x = np.asarray(x, dtype=np.float64).ravel()
    return float(kappa * np.dot(x, x))


def paired_input_squares(params: ParameterSet, x: np.ndarray,
                         trace: ForwardTrace | None = None) -> np.ndarray:
    """Squared incoming activation for every parameter coordinate.

    Weight (i, j) of a layer gets the square of that layer's j-th input
    activation; bias coordinates get 1.  For a one-layer model this is
    x^2 tiled across output units.  Pass a trace from forward() on the
    same (params, x) to avoid recomputing it.
    """
    spec = params.spec
    if trace is None:
        trace = forward(spec, params, x)
    squares = np.empty(n_params(spec))
    for layer, ls in enumerate(layout(spec)):
        a = trace.inputs[layer]
        sq = a * a
        squares[ls.weights] = np.tile(sq, ls.fan_out)
        if ls.bias is not None:
            squares[ls.bias] = 1.0
    return squares


def pdp_penalty(params: ParameterSet, x: np.ndarray, kappa: float,
                trace: ForwardTrace | None = None) -> float:
    """kappa * sum_i theta_i^2 * x_i^2, biases paired with constant 1."""
    if kappa < 0:
        raise ValueError(f"kappa must be nonnegative, got {kappa}")
    squares = paired_input_squares(params, x, trace)
    theta = params.flat
    return float(kappa * np.dot(theta * theta, squares))


def pdp_grad(params: ParameterSet, x: np.ndarray, kappa: float,
             trace: ForwardTrace | None = None) -> np.ndarray:
    """Coordinate-wise 2 * kappa * x_i^2 * theta_i (2 * kappa * theta_i on biases)."""
    if kappa < 0:
        raise ValueError(f"kappa must be nonnegative, got {kappa}")
    squares = paired_input_squares(params, x, trace)
    return 2.0 * kappa * squares * params.flat


def combined_grad(params: ParameterSet, x: np.ndarray, lam: float, kappa: float,
                  base_grad: np.ndarray,
                  trace: ForwardTrace | None = None) -> np.ndarray:
    """base_grad + 2 * (lam + kappa * x_i^2) * theta_i per coordinate."""
    if lam < 0 or kappa < 0:
        raise ValueError("penalty coefficients must be nonnegative")
    base = np.asarray(base_grad, dtype=np.float64).ravel()
    if base.shape != params.flat.shape:
        raise ValueError(
            f"base gradient shape {base.shape} does not match parameters {params.flat.shape}"
        )
    squares = paired_input_squares(params, x, trace)
    return base + 2.0 * (lam + kappa * squares) * params.flat
