"""Gradient-leakage and membership-inference harnesses.

The attacker model is an honest-but-curious aggregator: it observes the
post-mechanism gradient g_tilde of a batch-1 step together with the
current parameters, and tries to reconstruct the training input.  For a
single linear neuron with bias the clean gradient factors as
(2*(y-t)*x, 2*(y-t)), so x falls out of one division; the iterative
attack instead descends on ||grad_model(x_hat, t_hat) - g_tilde||^2.

Nothing here assumes which training mechanism leaks least; the sweep just
measures reconstruction quality per mechanism under fixed seeds.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from statistics import median

import numpy as np
from scipy.stats import rankdata

from .model import (Dataset, ModelSpec, ParameterSet, backward, forward,
                    quadratic_loss)
from .numerics import RngStream
from .optimizers import (GradientRecord, NoiseSpec, TrainConfig,
                         initial_params_for, train)
from .regularizers import RegSpec

COSINE_SUCCESS = 0.99
NO_LEAKAGE_EPS = 1e-12
DIVERGENCE_PATIENCE = 100


class NoLeakageError(RuntimeError):
    """The observed gradient carries no recoverable input (bias gradient ~ 0)."""


class ConvergenceFailureError(RuntimeError):
    """Every descent restart diverged; best iterate attached."""

    def __init__(self, message: str, best_x: np.ndarray, best_t: float,
                 best_objective: float):
        super().__init__(message)
        self.best_x = best_x
        self.best_t = best_t
        self.best_objective = best_objective


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    na, nb = float(np.linalg.norm(a)), float(np.linalg.norm(b))
    if na == 0 or nb == 0:
        return 0.0
    return float(np.dot(a, b) / (na * nb))


def _require_linear_with_bias(spec: ModelSpec):
    if spec.n_layers != 1 or spec.output_dim != 1 or spec.activation != "identity":
        raise ValueError("closed-form inversion needs a single linear output unit")
    if not spec.include_bias:
        raise ValueError("closed-form inversion needs a bias term")


def invert_linear_gradient(record: GradientRecord, spec: ModelSpec) -> np.ndarray:
    """Recover the input of a batch-1 linear-neuron step from its gradient.

    With g_w = 2*(y-t)*x and g_b = 2*(y-t), the input is g_w / g_b; exact
    on clean gradients whenever the example is off the loss minimum.
    """
    _require_linear_with_bias(spec)
    if record.batch_indices.size != 1:
        raise ValueError("closed-form inversion needs a batch of one example")
    g = np.asarray(record.noisy, dtype=np.float64)
    d = spec.input_dim
    if g.shape != (d + 1,):
        raise ValueError(f"gradient has {g.size} coordinates, expected {d + 1}")
    g_bias = g[d]
    if abs(g_bias) < NO_LEAKAGE_EPS:
        raise NoLeakageError(
            "bias gradient is numerically zero: the example sits at the loss "
            "minimum and its gradient reveals nothing"
        )
    return g[:d] / g_bias


def _matching_objective(spec: ModelSpec, params: ParameterSet,
                        target: np.ndarray):
    """J(x, t) = ||grad_model(x, t; theta) - target||^2 and its gradient.

    Single linear layers get the exact analytic gradient; other
    architectures fall back to central differences on J.
    """
    d = spec.input_dim

    def model_grad(x: np.ndarray, t: float) -> np.ndarray:
        trace = forward(spec, params, x)
        return backward(spec, params, trace, np.array([t]))

    def objective(x: np.ndarray, t: float) -> float:
        diff = model_grad(x, t) - target
        return float(np.dot(diff, diff))

    linear = (spec.n_layers == 1 and spec.output_dim == 1
              and spec.activation == "identity")
    if linear:
        theta = params.weights(0).ravel()
        bias = params.bias(0)
        b0 = float(bias[0]) if bias is not None else 0.0
        has_bias = bias is not None

        def gradient(x: np.ndarray, t: float) -> tuple[np.ndarray, float]:
            r = float(theta @ x) + b0 - t
            dw = 2.0 * r * x - target[:d]
            gx = 4.0 * float(x @ dw) * theta + 4.0 * r * dw
            gt = -4.0 * float(dw @ x)
            if has_bias:
                db = 2.0 * r - target[d]
                gx = gx + 4.0 * db * theta
                gt -= 4.0 * db
            return gx, gt
    else:
        def gradient(x: np.ndarray, t: float) -> tuple[np.ndarray, float]:
            h = 1e-6
            gx = np.empty(d)
            for i in range(d):
                bump = np.zeros(d)
                bump[i] = h * max(1.0, abs(x[i]))
                gx[i] = (objective(x + bump, t) - objective(x - bump, t)) / (2 * bump[i])
            ht = h * max(1.0, abs(t))
            gt = (objective(x, t + ht) - objective(x, t - ht)) / (2 * ht)
            return gx, gt

    return objective, gradient


def invert_gradient_iterative(record: GradientRecord, spec: ModelSpec,
                              params: ParameterSet, iters: int = 2000,
                              step: float = 0.02, seed: int = 0,
                              restarts: int = 10) -> tuple[np.ndarray, float]:
    """Gradient-matching reconstruction of (input, target) from one gradient.

    Plain fixed-step descent on ||grad_model(x, t) - g_tilde||^2 from
    seeded random starts; the best iterate across restarts wins.  A
    restart that worsens its objective for DIVERGENCE_PATIENCE straight
    steps is abandoned; if every restart diverges a
    ConvergenceFailureError carrying the best iterate is raised.
    """
    if record.batch_indices.size != 1:
        raise ValueError("gradient matching here assumes a batch of one example")
    if iters < 1 or restarts < 1:
        raise ValueError("iters and restarts must be >= 1")
    if not step > 0:
        raise ValueError(f"step must be positive, got {step}")

    target = np.asarray(record.noisy, dtype=np.float64)
    objective, gradient = _matching_objective(spec, params, target)
    d = spec.input_dim

    best_obj = math.inf
    best_x = np.zeros(d)
    best_t = 0.0
    all_diverged = True
    with np.errstate(over="ignore", invalid="ignore"):
        for r in range(restarts):
            rng = RngStream(seed, r)
            x = rng.normal(0.0, 1.0, d)
            t = float(rng.normal(0.0, 1.0, 1)[0])
            obj = objective(x, t)
            if obj < best_obj:
                best_obj, best_x, best_t = obj, x.copy(), t
            worse_streak = 0
            diverged = False
            for _ in range(iters):
                gx, gt = gradient(x, t)
                x = x - step * gx
                t = t - step * gt
                new_obj = objective(x, t)
                if not math.isfinite(new_obj):
                    diverged = True
                    break
                if new_obj < best_obj:
                    best_obj, best_x, best_t = new_obj, x.copy(), t
                worse_streak = worse_streak + 1 if new_obj > obj else 0
                obj = new_obj
                if worse_streak >= DIVERGENCE_PATIENCE:
                    diverged = True
                    break
                if obj < 1e-26:
                    break
            if not diverged:
                all_diverged = False

    if all_diverged:
        raise ConvergenceFailureError(
            f"all {restarts} restarts diverged (best objective {best_obj:.3e})",
            best_x=best_x, best_t=best_t, best_objective=best_obj,
        )
    return best_x, best_t


@dataclass
class MembershipResult:
    """Loss-threshold membership attack outcome."""

    auc: float
    member_scores: np.ndarray
    non_member_scores: np.ndarray
    threshold: float
    accuracy: float


def membership_inference(spec: ModelSpec, params: ParameterSet,
                         members: Dataset, non_members: Dataset,
                         threshold: float) -> MembershipResult:
    """Score each example by -loss and rank members against non-members.

    AUC uses midranks, so constant scores give exactly 0.5; accuracy
    predicts "member" when the score reaches the threshold.
    """
    if len(members) == 0 or len(non_members) == 0:
        raise ValueError("member and non-member sets must be nonempty")
    if len(members) != len(non_members):
        raise ValueError("member and non-member sets must have equal size")

    def scores(data: Dataset) -> np.ndarray:
        return np.array([
            -quadratic_loss(forward(spec, params, ex.x).output, ex.t)
            for ex in data
        ])

    s_mem = scores(members)
    s_non = scores(non_members)
    n1, n0 = s_mem.size, s_non.size
    ranks = rankdata(np.concatenate([s_mem, s_non]))
    auc = float((ranks[:n1].sum() - n1 * (n1 + 1) / 2.0) / (n1 * n0))
    correct = int((s_mem >= threshold).sum()) + int((s_non < threshold).sum())
    return MembershipResult(auc=auc, member_scores=s_mem, non_member_scores=s_non,
                            threshold=threshold, accuracy=correct / (n1 + n0))


@dataclass
class LeakageReport:
    """Reconstruction quality of one attack against one mechanism."""

    mechanism: str
    attack: str
    mse: list[float]
    cosine: list[float]
    success: list[bool]

    @property
    def mean_mse(self) -> float:
        return float(np.mean(self.mse))

    @property
    def median_mse(self) -> float:
        return float(median(self.mse))

    @property
    def mean_cosine(self) -> float:
        return float(np.mean(self.cosine))

    @property
    def median_cosine(self) -> float:
        return float(median(self.cosine))

    @property
    def success_rate(self) -> float:
        return float(np.mean(self.success))


def mechanism_label(noise: NoiseSpec, reg: RegSpec) -> str:
    label = f"noise={noise.mode}:sigma={noise.sigma:g}"
    if noise.clip_c is not None:
        label += f":clip={noise.clip_c:g}"
    kappa = "derived" if reg.kappa_mode == "derived" else f"{reg.kappa:g}"
    label += f"|l2={reg.lam:g}|pdp={kappa}"
    if reg.input_kappa > 0:
        label += f"|input={reg.input_kappa:g}"
    return label


def leakage_sweep(spec: ModelSpec, data: Dataset,
                  mechanisms: list[tuple[NoiseSpec, RegSpec]], trials: int,
                  seed: int, eta: float = 0.1, iters: int = 800,
                  step: float = 0.02, restarts: int = 10) -> list[LeakageReport]:
    """Train one batch-1 epoch per (mechanism, trial), attack the first
    recorded gradient with both inverters, and aggregate.

    Trial k reuses seed + k for every mechanism, so identical mechanism
    entries produce identical reports and different mechanisms see the
    same data order and underlying noise draws.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    _require_linear_with_bias(spec)

    reports = []
    for noise, reg in mechanisms:
        label = mechanism_label(noise, reg)
        by_attack: dict[str, tuple[list, list, list]] = {
            "closed_form": ([], [], []),
            "iterative": ([], [], []),
        }
        for k in range(trials):
            config = TrainConfig(eta=eta, batch_size=1, epochs=1, seed=seed + k,
                                 noise=noise, reg=reg, record_gradients=True,
                                 record_cap=1)
            report = train(spec, data, config)
            record = report.records[0]
            x_true = data.examples[int(record.batch_indices[0])].x
            params0 = initial_params_for(spec, config)

            x_cf = invert_linear_gradient(record, spec)
            try:
                x_it, _ = invert_gradient_iterative(record, spec, params0,
                                                    iters=iters, step=step,
                                                    seed=seed + k, restarts=restarts)
            except ConvergenceFailureError as exc:
                # A diverged descent is still an attack outcome: score its
                # best iterate instead of aborting the sweep.
                x_it = exc.best_x
            for name, x_hat in (("closed_form", x_cf), ("iterative", x_it)):
                mse_list, cos_list, success_list = by_attack[name]
                cos = cosine_similarity(x_hat, x_true)
                mse_list.append(float(np.mean((x_hat - x_true) ** 2)))
                cos_list.append(cos)
                success_list.append(cos >= COSINE_SUCCESS)

        for name in ("closed_form", "iterative"):
            mse_list, cos_list, success_list = by_attack[name]
            reports.append(LeakageReport(mechanism=label, attack=name,
                                         mse=mse_list, cosine=cos_list,
                                         success=success_list))
    return reports
