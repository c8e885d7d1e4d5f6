"""Monte Carlo and closed-form verification of the noise/regularization identities.

The central facts checked here, all for a single linear neuron y = theta.x
updated once by theta' = theta - eta * (g + eps):

* with homogeneous noise eps_i ~ N(0, sigma^2), the expected post-update
  loss is (y_clean' - t)^2 + eta^2 * sigma^2 * sum_i x_i^2;
* with parameter-proportional noise eps_i ~ N(0, (theta_i*sigma)^2) it is
  (y_clean' - t)^2 + eta^2 * sigma^2 * sum_i theta_i^2 * x_i^2;
* the cross term 2*(y-t)*eta*(eps.x) has expectation zero;
* for X ~ N(0, sigma^2): E[X^2] = sigma^2, E[X^4] = 3*sigma^4,
  Var[X^2] = 2*sigma^4; and the product of two independent centered
  normals has density K0(|u|/(sx*sy)) / (pi*sx*sy).

Monte Carlo estimates are compared to the closed forms through z-scores;
gradients are compared to central finite differences.  Every sampler is
seeded, so a check either passes forever or fails forever.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.integrate import quad

from .model import Dataset, ModelSpec, ParameterSet
from .numerics import RngStream, bessel_k0, gaussian_sample, solve_linear_system
from .optimizers import NoiseSpec
from .regularizers import (combined_grad, dp_input_penalty, l2_grad,
                           l2_penalty, pdp_grad, pdp_penalty)

DEFAULT_Z_THRESHOLD = 3.0


@dataclass(frozen=True)
class McEstimate:
    """Monte Carlo mean with its standard error."""

    mean: float
    stderr: float
    replicas: int
    seed: int

    def __post_init__(self):
        if self.replicas < 2:
            raise ValueError("need at least 2 replicas")
        if self.stderr < 0:
            raise ValueError("stderr must be nonnegative")


@dataclass(frozen=True)
class IdentityCheck:
    """One analytic value against one Monte Carlo estimate."""

    name: str
    analytic: float
    estimate: McEstimate
    z: float
    passed: bool
    threshold: float = DEFAULT_Z_THRESHOLD


def _z_score(mc_mean: float, stderr: float, analytic: float) -> float:
    if stderr == 0:
        return 0.0 if mc_mean == analytic else float("inf")
    return (mc_mean - analytic) / stderr


def _check(name: str, analytic: float, mean: float, stderr: float,
           replicas: int, seed: int, threshold: float) -> IdentityCheck:
    z = _z_score(mean, stderr, analytic)
    return IdentityCheck(name=name, analytic=analytic,
                         estimate=McEstimate(mean, stderr, replicas, seed),
                         z=z, passed=abs(z) <= threshold, threshold=threshold)


def _linear_neuron_vectors(params: ParameterSet, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(theta, x) with the bias folded in as a constant-1 feature.

    The closed forms hold for one linear output unit only.
    """
    spec = params.spec
    if spec.n_layers != 1 or spec.output_dim != 1 or spec.activation != "identity":
        raise ValueError("closed forms cover a single linear output unit only")
    x = np.asarray(x, dtype=np.float64).ravel()
    if x.shape != (spec.input_dim,):
        raise ValueError(f"input has dimension {x.shape[0]}, expected {spec.input_dim}")
    theta = params.flat
    if spec.include_bias:
        x = np.concatenate([x, [1.0]])
    return theta, x


def _scalar_target(t) -> float:
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    if t.shape != (1,):
        raise ValueError("closed forms need a scalar target")
    return float(t[0])


def _clean_one_step(theta: np.ndarray, xv: np.ndarray, t: float,
                    eta: float) -> tuple[np.ndarray, float]:
    """Noiseless update and its post-update output."""
    y0 = float(theta @ xv)
    g = 2.0 * (y0 - t) * xv
    theta1 = theta - eta * g
    return theta1, float(theta1 @ xv)


def _noise_matrix(theta: np.ndarray, noise: NoiseSpec, replicas: int,
                  seed: int, n_streams: int = 1) -> np.ndarray:
    """(replicas, dim) noise draws; rows are independent replicas.

    Replicas are split across n_streams substreams and concatenated in
    stream order, so a parallel evaluation reduces to the same matrix.
    """
    dim = theta.size
    if noise.mode == "none" or noise.sigma == 0:
        return np.zeros((replicas, dim))
    counts = [replicas // n_streams] * n_streams
    counts[-1] += replicas - sum(counts)
    blocks = []
    for j, count in enumerate(counts):
        if count == 0:
            continue
        z = RngStream(seed, j).normal(0.0, 1.0, count * dim).reshape(count, dim)
        blocks.append(z)
    z = np.vstack(blocks)
    if noise.mode == "iid":
        return noise.sigma * z
    return noise.sigma * theta * z  # per-column scale |theta_i| * sigma


def mc_post_update_loss(params: ParameterSet, x: np.ndarray, t, eta: float,
                        noise: NoiseSpec, replicas: int, seed: int,
                        n_streams: int = 1) -> McEstimate:
    """Sampled E[(y_tilde' - t)^2] after one noisy update of a linear neuron.

    Each replica draws fresh gradient noise, applies theta' = theta -
    eta*(g + eps), and scores the post-update output against the target.
    """
    if replicas < 2:
        raise ValueError("need at least 2 replicas")
    if not eta > 0:
        raise ValueError(f"eta must be positive, got {eta}")
    theta, xv = _linear_neuron_vectors(params, x)
    t = _scalar_target(t)
    _, y1 = _clean_one_step(theta, xv, t, eta)
    eps = _noise_matrix(theta, noise, replicas, seed, n_streams)
    losses = (y1 - t - eta * (eps @ xv)) ** 2
    stderr = float(losses.std(ddof=1) / np.sqrt(replicas))
    return McEstimate(mean=float(losses.mean()), stderr=stderr,
                      replicas=replicas, seed=seed)


def analytic_post_update_loss(params: ParameterSet, x: np.ndarray, t,
                              eta: float, noise: NoiseSpec) -> float:
    """Closed-form expected post-update loss for one noisy linear-neuron step.

    (y_clean' - t)^2 plus eta^2*sigma^2*sum(x^2) for homogeneous noise, or
    plus eta^2*sigma^2*sum(theta^2*x^2) for parameter-proportional noise
    (theta taken pre-update).  Mode "none" returns the clean value.
    """
    if not eta > 0:
        raise ValueError(f"eta must be positive, got {eta}")
    theta, xv = _linear_neuron_vectors(params, x)
    t = _scalar_target(t)
    _, y1 = _clean_one_step(theta, xv, t, eta)
    clean = (y1 - t) ** 2
    scale = eta * eta * noise.sigma * noise.sigma
    if noise.mode == "iid":
        return clean + scale * float(xv @ xv)
    if noise.mode == "proportional":
        return clean + scale * float((theta * theta) @ (xv * xv))
    return clean


def check_cross_term_vanishes(params: ParameterSet, x: np.ndarray, t, eta: float,
                              noise: NoiseSpec, replicas: int, seed: int,
                              threshold: float = DEFAULT_Z_THRESHOLD) -> IdentityCheck:
    """Zero-mean check of the cross term 2*(y-t)*eta*(eps.x).

    Because the noise is centered, the expansion of the expected
    post-update loss drops this term; its Monte Carlo mean must sit
    within `threshold` standard errors of zero.
    """
    if replicas < 2:
        raise ValueError("need at least 2 replicas")
    theta, xv = _linear_neuron_vectors(params, x)
    t = _scalar_target(t)
    _, y1 = _clean_one_step(theta, xv, t, eta)
    eps = _noise_matrix(theta, noise, replicas, seed)
    values = 2.0 * (y1 - t) * eta * (eps @ xv)
    stderr = float(values.std(ddof=1) / np.sqrt(replicas))
    return _check(f"cross_term[{noise.mode}]", 0.0, float(values.mean()), stderr,
                  replicas, seed, threshold)


def check_moment_identities(sigma: float, replicas: int, seed: int,
                            threshold: float = DEFAULT_Z_THRESHOLD) -> list[IdentityCheck]:
    """E[X^2] = sigma^2, E[X^4] = 3*sigma^4, Var[X^2] = 2*sigma^4 for
    X ~ N(0, sigma^2), each as a z-scored sample check."""
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    if replicas < 2:
        raise ValueError("need at least 2 replicas")
    x = gaussian_sample(RngStream(seed, 0), 0.0, sigma, replicas)
    w = x * x
    n = replicas
    s2, s4 = sigma ** 2, sigma ** 4

    checks = [
        _check(f"second_moment[sigma={sigma:g}]", s2, float(w.mean()),
               float(w.std(ddof=1) / np.sqrt(n)), n, seed, threshold),
        _check(f"fourth_moment[sigma={sigma:g}]", 3.0 * s4, float((w * w).mean()),
               float((w * w).std(ddof=1) / np.sqrt(n)), n, seed, threshold),
    ]
    # Var[s^2_W] ~ (mu4_W - var_W^2*(n-3)/(n-1)) / n, moments estimated in-sample.
    var_w = float(w.var(ddof=1))
    centered = w - w.mean()
    mu4_w = float((centered ** 4).mean())
    stderr = float(np.sqrt(max(mu4_w - var_w ** 2 * (n - 3) / (n - 1), 0.0) / n))
    checks.append(_check(f"variance_of_square[sigma={sigma:g}]", 2.0 * s4,
                         var_w, stderr, n, seed, threshold))
    return checks


@dataclass
class ProductDensityReport:
    """Histogram of X*Y against the bin-integrated K0 density."""

    edges: np.ndarray          # signed bin edges, negative side then positive
    counts: np.ndarray         # observed count per signed bin
    expected: np.ndarray       # expected probability mass per signed bin
    z_scores: np.ndarray       # (count - n*p) / sqrt(n*p*(1-p)) per bin
    max_abs_z: float
    max_abs_deviation: float   # max |observed - expected| probability mass
    chi2: float
    symmetry_z: np.ndarray     # mirror-bin (pos - neg)/sqrt(pos + neg)
    replicas: int
    seed: int


def check_product_density(sigma_x: float, sigma_y: float, replicas: int,
                          bins: int, seed: int,
                          support: tuple[float, float] = (0.05, 4.0)) -> ProductDensityReport:
    """Compare samples of X*Y to the K0 product-of-normals density.

    `bins` intervals of |u| over `support` are mirrored into signed bins;
    the support must exclude zero, where the density has a log
    singularity.  Expected masses integrate the density over each bin
    (midpoint evaluation would be biased near the singularity).
    """
    if not (sigma_x > 0 and sigma_y > 0):
        raise ValueError("sigmas must be positive")
    if bins < 10:
        raise ValueError(f"need at least 10 bins, got {bins}")
    if replicas < 2:
        raise ValueError("need at least 2 replicas")
    lo, hi = float(support[0]), float(support[1])
    if not (0 < lo < hi):
        raise ValueError(f"degenerate bins: support must satisfy 0 < lo < hi, got {support}")

    x = gaussian_sample(RngStream(seed, 0), 0.0, sigma_x, replicas)
    y = gaussian_sample(RngStream(seed, 1), 0.0, sigma_y, replicas)
    u = x * y

    pos_edges = np.linspace(lo, hi, bins + 1)
    edges = np.concatenate([-pos_edges[::-1], pos_edges])
    raw_counts, _ = np.histogram(u, bins=edges)
    counts = np.delete(raw_counts, bins).astype(np.float64)  # drop the (-lo, lo) gap

    scale = sigma_x * sigma_y
    density = lambda v: bessel_k0(v / scale) / (np.pi * scale)
    pos_mass = np.array([quad(density, a, b, epsabs=0.0, epsrel=1e-10)[0]
                         for a, b in zip(pos_edges[:-1], pos_edges[1:])])
    expected = np.concatenate([pos_mass[::-1], pos_mass])

    mean_counts = replicas * expected
    z = (counts - mean_counts) / np.sqrt(mean_counts * (1.0 - expected))
    chi2 = float(((counts - mean_counts) ** 2 / mean_counts).sum())

    pos_counts = counts[bins:]
    neg_counts = counts[:bins][::-1]
    totals = pos_counts + neg_counts
    with np.errstate(invalid="ignore", divide="ignore"):
        sym = np.where(totals > 0, (pos_counts - neg_counts) / np.sqrt(totals), 0.0)

    return ProductDensityReport(
        edges=edges, counts=counts, expected=expected, z_scores=z,
        max_abs_z=float(np.abs(z).max()),
        max_abs_deviation=float(np.abs(counts / replicas - expected).max()),
        chi2=chi2, symmetry_z=sym, replicas=replicas, seed=seed,
    )


def regularized_least_squares_oracle(data: Dataset, kappa: float) -> ParameterSet:
    """Exact minimizer of sum_n (theta.x_n - t_n)^2 + kappa * sum_n sum_i theta_i^2 x_ni^2.

    Solves (X'X + kappa*D) theta = X't with D the diagonal of column-wise
    sums of squares.  Independent of the SGD path: training with the
    matching penalty must converge here.
    """
    if kappa < 0:
        raise ValueError(f"kappa must be nonnegative, got {kappa}")
    if len(data) == 0:
        raise ValueError("dataset must be nonempty")
    x, t = data.matrices()
    if t.shape[1] != 1:
        raise ValueError("closed form needs scalar targets")
    gram = x.T @ x + kappa * np.diag((x * x).sum(axis=0))
    theta = solve_linear_system(gram, x.T @ t[:, 0])
    spec = ModelSpec(layer_sizes=(data.dim, 1), activation="identity", include_bias=False)
    return ParameterSet(spec, theta)


def finite_difference_gradient(f: Callable[[np.ndarray], float], theta: np.ndarray,
                               h_scale: float = 1e-5) -> np.ndarray:
    """Central differences with per-coordinate step h_scale * max(1, |theta_i|)."""
    if not h_scale > 0:
        raise ValueError(f"h_scale must be positive, got {h_scale}")
    theta = np.asarray(theta, dtype=np.float64)
    grad = np.empty_like(theta)
    for i in range(theta.size):
        h = h_scale * max(1.0, abs(theta[i]))
        plus = theta.copy()
        plus[i] += h
        minus = theta.copy()
        minus[i] -= h
        grad[i] = (f(plus) - f(minus)) / (2.0 * h)
    return grad


def _max_rel_err(analytic: np.ndarray, fd: np.ndarray) -> float:
    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(fd)))
    return float(np.max(np.abs(analytic - fd) / denom))


PENALTY_KINDS = ("l2", "pdp", "dp_input", "combined")


def grad_check(kind: str, params: ParameterSet, x: np.ndarray,
               lam: float = 0.0, kappa: float = 0.0,
               h_scale: float = 1e-5) -> float:
    """Worst relative error of a penalty gradient against central differences."""
    if kind not in PENALTY_KINDS:
        raise ValueError(f"unknown penalty kind {kind!r}")
    spec = params.spec

    if kind == "l2":
        f = lambda th: l2_penalty(ParameterSet(spec, th), lam)
        analytic = l2_grad(params, lam)
    elif kind == "pdp":
        f = lambda th: pdp_penalty(ParameterSet(spec, th), x, kappa)
        analytic = pdp_grad(params, x, kappa)
    elif kind == "dp_input":
        f = lambda th: dp_input_penalty(x, kappa)
        analytic = np.zeros_like(params.flat)
    else:
        f = lambda th: (l2_penalty(ParameterSet(spec, th), lam)
                        + pdp_penalty(ParameterSet(spec, th), x, kappa))
        analytic = combined_grad(params, x, lam, kappa, np.zeros_like(params.flat))

    fd = finite_difference_gradient(f, params.flat, h_scale)
    return _max_rel_err(analytic, fd)


def backprop_grad_check(spec: ModelSpec, params: ParameterSet, x: np.ndarray,
                        t, h_scale: float = 1e-6) -> float:
    """Worst relative error of backward() against central differences of the loss."""
    from .model import backward, forward, quadratic_loss

    def loss_at(th: np.ndarray) -> float:
        p = ParameterSet(spec, th)
        return quadratic_loss(forward(spec, p, x).output, t)

    trace = forward(spec, params, x)
    analytic = backward(spec, params, trace, t)
    fd = finite_difference_gradient(loss_at, params.flat, h_scale)
    return _max_rel_err(analytic, fd)


@dataclass(frozen=True)
class LinearSetup:
    """One randomly drawn linear-neuron configuration for the identity suite."""

    params: ParameterSet
    x: np.ndarray
    t: float
    eta: float
    sigma: float


def random_linear_setups(n: int, seed: int, dim_range: tuple[int, int] = (2, 6),
                         eta_range: tuple[float, float] = (0.02, 0.3),
                         sigma_range: tuple[float, float] = (0.05, 0.5)) -> list[LinearSetup]:
    """Seeded draws of (theta, x, t, eta, sigma) for the randomized suite."""
    rng = RngStream(seed, 0)
    setups = []
    for _ in range(n):
        d = int(dim_range[0] + rng.uniform(1)[0] * (dim_range[1] - dim_range[0] + 1))
        d = min(d, dim_range[1])
        theta = rng.normal(0.0, 1.0, d)
        x = rng.normal(0.0, 1.0, d)
        t = float(rng.normal(0.0, 1.0, 1)[0])
        eta = float(eta_range[0] + rng.uniform(1)[0] * (eta_range[1] - eta_range[0]))
        sigma = float(sigma_range[0] + rng.uniform(1)[0] * (sigma_range[1] - sigma_range[0]))
        spec = ModelSpec(layer_sizes=(d, 1), activation="identity", include_bias=False)
        setups.append(LinearSetup(params=ParameterSet(spec, theta), x=x, t=t,
                                  eta=eta, sigma=sigma))
    return setups


def post_update_identity_checks(setups: Sequence[LinearSetup], mode: str,
                                replicas: int, seed: int,
                                threshold: float = DEFAULT_Z_THRESHOLD) -> list[IdentityCheck]:
    """Monte Carlo vs closed-form expected post-update loss, one check per setup."""
    checks = []
    for i, s in enumerate(setups):
        noise = NoiseSpec(mode=mode, sigma=s.sigma)
        analytic = analytic_post_update_loss(s.params, s.x, s.t, s.eta, noise)
        est = mc_post_update_loss(s.params, s.x, s.t, s.eta, noise, replicas, seed + i)
        z = _z_score(est.mean, est.stderr, analytic)
        checks.append(IdentityCheck(name=f"post_update_loss[{mode}][{i}]",
                                    analytic=analytic, estimate=est, z=z,
                                    passed=abs(z) <= threshold, threshold=threshold))
    return checks


def equivalence_chain_residuals(setup: LinearSetup) -> tuple[float, float]:
    """|analytic(noisy) - analytic(clean) - penalty| for both noise shapes.

    The homogeneous-noise gap must equal the input-only penalty with
    kappa = eta^2*sigma^2; the proportional-noise gap must equal the
    parameter-input product penalty with the same kappa.
    """
    kappa = setup.eta ** 2 * setup.sigma ** 2
    clean = analytic_post_update_loss(setup.params, setup.x, setup.t, setup.eta,
                                      NoiseSpec(mode="none"))
    _, xv = _linear_neuron_vectors(setup.params, setup.x)
    iid_gap = analytic_post_update_loss(setup.params, setup.x, setup.t, setup.eta,
                                        NoiseSpec(mode="iid", sigma=setup.sigma)) - clean
    prop_gap = analytic_post_update_loss(setup.params, setup.x, setup.t, setup.eta,
                                         NoiseSpec(mode="proportional", sigma=setup.sigma)) - clean
    iid_resid = abs(iid_gap - dp_input_penalty(xv, kappa))
    prop_resid = abs(prop_gap - pdp_penalty(setup.params, setup.x, kappa))
    return iid_resid, prop_resid
