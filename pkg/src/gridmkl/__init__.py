"""Low-rank multi-kernel learning and forecasting for nodal electricity prices."""

from .bcd import (FactorBlock, ModelState, block_norm, fit, load_model, mu_max,
                  objective, save_model, selected_kernels, update_block_B,
                  update_block_Gamma)
from .canonical import (CanonicalInstance, CanonicalSolution, ConvergenceError,
                        canonical_objective, frob_gate, make_instance, minimize_s,
                        s_value_and_derivative, solve_canonical,
                        solve_shifted_sylvester)
from .forecast import (CrossKernels, PricePanel, center_prices, decenter_forecast,
                       decenter_prices, kernel_ridge_forecast, persistence_forecast,
                       predict, rmse, rolling_evaluate, rolling_tune)
from .kernels import (FeatureTable, KernelMatrix, KernelRecipe, WeightedGraph,
                      build_graph_laplacian, diffusion_kernel,
                      empirical_covariance_kernel, gaussian_kernel, identity_kernel,
                      linear_kernel, median_sq_bandwidth, normalize_unit_diagonal,
                      regularized_laplacian_kernel, standardize_features)
from .pipeline import MarketDataset
from .simulate import (SyntheticSpec, generate_synthetic_market,
                       oracle_canonical_prox, plant_and_recover_trial,
                       sqrt_trace_norm_identity_check)

__all__ = [name for name in dir() if not name.startswith("_")]
__version__ = "0.1.0"
