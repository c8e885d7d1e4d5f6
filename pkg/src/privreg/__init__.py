"""Noise-based and regularization-based private SGD, verified end to end.

The package trains small dense models four ways (plain SGD, clip-and-noise
SGD, parameter-proportional noise SGD, and penalty-based SGD), checks the
closed-form expected-loss identities behind the noise/penalty equivalence
by Monte Carlo, and measures what each mechanism leaks to gradient
inversion and membership inference.
"""

__version__ = "0.1.0"

from .attack import (ConvergenceFailureError, LeakageReport, MembershipResult,
                     NoLeakageError, cosine_similarity, invert_gradient_iterative,
                     invert_linear_gradient, leakage_sweep, mechanism_label,
                     membership_inference)
from .experiments import (ConfigError, ExperimentConfig, ResultRow,
                          generate_dataset, load_dataset, parse_config,
                          read_result_rows, run, write_result_rows)
from .model import (Dataset, Example, ForwardTrace, ModelSpec, ParameterSet,
                    backward, forward, init_params, per_example_gradients,
                    quadratic_loss)
from .numerics import (MomentSummary, RngStream, SingularMatrixError, bessel_k0,
                       gaussian_sample, moments, solve_linear_system)
from .optimizers import (GradientRecord, NoiseSpec, TrainConfig, TrainReport,
                         add_iid_noise, add_proportional_noise, clip_gradient,
                         dataset_loss, initial_params_for, sgd_step, train)
from .oracle import (IdentityCheck, McEstimate, ProductDensityReport,
                     analytic_post_update_loss, backprop_grad_check,
                     check_cross_term_vanishes, check_moment_identities,
                     check_product_density, equivalence_chain_residuals,
                     finite_difference_gradient, grad_check,
                     mc_post_update_loss, post_update_identity_checks,
                     random_linear_setups, regularized_least_squares_oracle)
from .regularizers import (RegSpec, combined_grad, dp_input_penalty, l2_grad,
                           l2_penalty, paired_input_squares, pdp_grad,
                           pdp_penalty)
