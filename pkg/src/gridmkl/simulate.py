"""Synthetic markets with planted low-rank multi-kernel structure, plus the
independent oracles used by the verification suite.

The proximal-gradient oracle works on the vectorized Kronecker form of the
canonical subproblem and never touches the production solver, so agreement
between the two is a genuine cross-check.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, replace

import numpy as np

from . import bcd, dataio
from . import kernels as kx
from .canonical import ConvergenceError
from .forecast import PricePanel, center_prices, predict, rmse
from .kernels import FeatureTable, KernelRecipe, WeightedGraph
from .pipeline import _normalize_with_train_scale


# Default trial pools. The planted kernels carry structure (graph
# smoothness, day-cycle and drift features); the decoys are the identity
# and Gaussian kernels on irrelevant iid features. An iid-feature kernel
# has a random eigenbasis, so it cannot represent a structured signal
# cheaply and the group penalty eliminates it. Decoys on smooth or very
# low-dimensional features would instead absorb shrinkage residual and get
# co-selected, which mirrors how strongly overlapping kernels behave on
# real market data.

def default_node_recipes() -> list[KernelRecipe]:
    return [
        KernelRecipe("lap-reg", "reg_laplacian"),
        KernelRecipe("gauss-a", "gaussian", bandwidth="median", columns=("x0", "x1", "x2")),
        KernelRecipe("gauss-b", "gaussian", bandwidth="median", columns=("x3", "x4", "x5")),
        KernelRecipe("gauss-c", "gaussian", bandwidth="median", columns=("y0", "y1", "y2")),
        KernelRecipe("node-id", "identity"),
    ]


def default_time_recipes() -> list[KernelRecipe]:
    return [
        KernelRecipe("tgauss-a", "gaussian", bandwidth="median",
                     columns=("sin_day", "cos_day", "drift1")),
        KernelRecipe("tlin-c", "linear", columns=("drift3", "drift4")),
        KernelRecipe("tgauss-b", "gaussian", bandwidth="median",
                     columns=("noise1", "noise2", "noise3")),
        KernelRecipe("tgauss-d", "gaussian", bandwidth="median",
                     columns=("noise4", "noise5", "noise6")),
        KernelRecipe("time-id", "identity"),
    ]


@dataclass(frozen=True)
class SyntheticSpec:
    n_nodes: int = 40
    n_hours: int = 192
    rank_true: int = 4
    active_node_kernels: tuple = ("lap-reg", "gauss-a")
    active_time_kernels: tuple = ("tgauss-a", "tlin-c")
    noise_sigma: float = 0.0
    noise_relative: bool = False          # sigma as a fraction of the signal RMS
    seed: int = 0
    signal_rms: float = 1.0               # RMS of the planted low-rank component
    center_components: bool = True        # planted factors orthogonal to the all-ones
    daily_profile_amplitude: float = 0.0  # directions (pure price differentials)
    rep_hours: int | None = None          # hours carrying the representer
    feature_margin_hours: int = 24        # coefficients; later hours follow the
    start_iso: str = "2012-06-01T00:00:00"  # model's own kernel extrapolation

    def __post_init__(self):
        if not self.active_node_kernels or not self.active_time_kernels:
            raise ValueError("active kernel subsets must be nonempty")
        if self.rank_true > min(self.n_nodes, self.n_hours):
            raise ValueError("rank_true cannot exceed min(n_nodes, n_hours)")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be nonnegative")
        if self.signal_rms <= 0:
            raise ValueError("signal_rms must be positive")
        if self.rep_hours is not None and not (24 <= self.rep_hours <= self.n_hours):
            raise ValueError("rep_hours must lie in [24, n_hours]")


def _group_graph(rng, node_ids, n_groups: int) -> WeightedGraph:
    """LBA-flavored similarity graph: unit weights inside a group, weight 0.5
    between nodes of adjacent groups on a ring."""
    n = len(node_ids)
    groups = rng.integers(0, n_groups, size=n)
    edges = []
    for i in range(n):
        for j in range(i + 1, n):
            gi, gj = int(groups[i]), int(groups[j])
            if gi == gj:
                edges.append((i, j, 1.0))
            elif (gi - gj) % n_groups in (1, n_groups - 1):
                edges.append((i, j, 0.5))
    return WeightedGraph(node_ids=tuple(node_ids), edges=tuple(edges))


def _daily_profile(amplitude: float) -> np.ndarray:
    h = np.arange(24)
    return amplitude * (2.0 + np.sin(2 * np.pi * (h - 8) / 24.0)
                        + 0.35 * np.sin(4 * np.pi * (h - 2) / 24.0))


@dataclass
class SyntheticMarket:
    """Generated panel plus everything needed to rebuild its kernels."""

    spec: SyntheticSpec
    panel: PricePanel
    signal: np.ndarray                    # planted F_true H_true^T
    truth: bcd.ModelState
    graph: WeightedGraph
    node_features: FeatureTable           # raw (unstandardized)
    time_features: FeatureTable           # raw, covers panel + margin hours
    node_recipes: list
    time_recipes: list
    node_kernels: list = field(default_factory=list)   # full-panel kernels
    time_kernels: list = field(default_factory=list)
    profile: np.ndarray = None

    @property
    def signal_rms(self) -> float:
        return float(np.sqrt(np.mean(self.signal ** 2)))

    def window_kernels(self, t0: int, t1: int, t2: int | None = None):
        """Exact window slices of the generation kernels: the training Gram
        is the principal submatrix (re-jittered, unit diagonal restored) and
        the cross block is scaled with the same training factors."""
        if t2 is not None and t2 > self.panel.n_hours:
            raise ValueError("exact synthetic kernels only cover the generated panel")
        node_kernels = list(self.node_kernels)
        time_kernels, time_cross = [], []
        for full in self.time_kernels:
            kern, cross_block = _slice_time_kernel(full, t0, t1, t2)
            time_kernels.append(kern)
            if cross_block is not None:
                time_cross.append(cross_block)
        cross = None
        if t2 is not None:
            from .forecast import CrossKernels
            cross = CrossKernels(
                node_cross=[k.gram for k in node_kernels],
                time_cross=time_cross,
                node_labels=[k.label for k in node_kernels],
                time_labels=[k.label for k in time_kernels],
            )
        return node_kernels, time_kernels, cross


def _slice_time_kernel(full, t0: int, t1: int, t2: int | None):
    """Principal-submatrix training kernel plus the consistently scaled
    cross block toward hours [t1, t2)."""
    sub = full.gram[t0:t1, t0:t1]
    kern, c = kx.finalize_kernel(sub, full.label, normalize=True)
    cross_block = None
    if t2 is not None:
        raw_cross = full.gram[t0:t1, t1:t2]
        cross_block = _normalize_with_train_scale(
            sub, raw_cross, np.diag(full.gram)[t1:t2], c, True)
    return kern, cross_block


def _build_pool_kernels(recipes, family, *, graph=None, features=None, panel_hours=None):
    """Evaluate recipe kernels for generation (no price-dependent kinds)."""
    kernels = []
    lap = None if graph is None else kx.build_graph_laplacian(graph)
    std = None
    if features is not None:
        std = kx.standardize_features(features)
    for recipe in recipes:
        recipe.validate(family)
        if recipe.kind == "identity":
            dim = len(features.entity_ids) if family == "time" else graph.n_nodes
            kernels.append(kx.identity_kernel(dim, recipe.label))
            continue
        if recipe.kind in ("reg_laplacian", "diffusion"):
            if lap is None:
                raise ValueError(f"{recipe.label!r} needs a graph")
            base = (kx.regularized_laplacian_kernel(lap, recipe.label)
                    if recipe.kind == "reg_laplacian"
                    else kx.diffusion_kernel(lap, recipe.beta, recipe.label))
            kern, _ = kx.finalize_kernel(base.gram, recipe.label, normalize=recipe.normalize)
            kernels.append(kern)
            continue
        if recipe.kind == "covariance":
            raise ValueError("covariance kernels cannot seed a synthetic market")
        table = std if recipe.columns is None else std.select_columns(recipe.columns)
        x = table.design_matrix()
        if recipe.kind == "gaussian":
            h = (kx.median_sq_bandwidth(table) if recipe.bandwidth == "median"
                 else float(recipe.bandwidth))
            raw = kx.gaussian_cross(x, x, h)
            np.fill_diagonal(raw, 1.0)
        else:  # linear
            raw = x @ x.T
        kern, _ = kx.finalize_kernel(raw, recipe.label, normalize=recipe.normalize)
        kernels.append(kern)
    return kernels


def generate_synthetic_market(spec: SyntheticSpec,
                              node_recipes=None, time_recipes=None) -> SyntheticMarket:
    """Plant nonzero blocks on the active kernels only and emit
    Z = F_true H_true^T + noise (plus an optional day-periodic mean)."""
    node_recipes = default_node_recipes() if node_recipes is None else list(node_recipes)
    time_recipes = default_time_recipes() if time_recipes is None else list(time_recipes)
    node_labels = [r.label for r in node_recipes]
    time_labels = [r.label for r in time_recipes]
    for lab in spec.active_node_kernels:
        if lab not in node_labels:
            raise ValueError(f"active node kernel {lab!r} not in the pool {node_labels}")
    for lab in spec.active_time_kernels:
        if lab not in time_labels:
            raise ValueError(f"active time kernel {lab!r} not in the pool {time_labels}")

    rng = np.random.default_rng(spec.seed)
    node_ids = [f"N{k:03d}" for k in range(spec.n_nodes)]
    graph = _group_graph(rng, node_ids, n_groups=max(3, spec.n_nodes // 8))

    node_features = FeatureTable(
        entity_ids=list(node_ids),
        numeric={name: rng.normal(size=spec.n_nodes)
                 for name in ("x0", "x1", "x2", "x3", "x4", "x5", "y0", "y1", "y2")},
    )

    total_hours = spec.n_hours + max(0, spec.feature_margin_hours)
    start = dataio.parse_timestamp(spec.start_iso)
    timestamps_all = dataio.hourly_range(start, total_hours)
    idx = np.arange(total_hours)

    def ar1(phi: float) -> np.ndarray:
        innov = rng.normal(size=total_hours) * np.sqrt(1 - phi * phi)
        z = np.empty(total_hours)
        z[0] = rng.normal()
        for k in range(1, total_hours):
            z[k] = phi * z[k - 1] + innov[k]
        return z

    numeric = {
        "sin_day": np.sin(2 * np.pi * idx / 24.0),
        "cos_day": np.cos(2 * np.pi * idx / 24.0),
        "sin_week": np.sin(2 * np.pi * idx / 168.0),
        "cos_week": np.cos(2 * np.pi * idx / 168.0),
    }
    for k, phi in enumerate((0.99, 0.97, 0.98, 0.95, 0.96, 0.9), start=1):
        numeric[f"drift{k}"] = ar1(phi)
    for k in range(1, 7):
        numeric[f"noise{k}"] = rng.normal(size=total_hours)
    time_features = FeatureTable(
        entity_ids=[ts.isoformat() for ts in timestamps_all], numeric=numeric,
    )

    node_kernels = _build_pool_kernels(node_recipes, "node", graph=graph,
                                       features=node_features)
    panel_rows = list(range(spec.n_hours))
    time_kernels = _build_pool_kernels(time_recipes, "time",
                                       features=time_features.subset(panel_rows))

    # The representer coefficients live on the first rep_hours; any later
    # panel hours follow the planted model's own kernel extrapolation, the
    # same rule the forecaster uses for unseen hours.
    rep = spec.n_hours if spec.rep_hours is None else spec.rep_hours
    if rep < spec.n_hours:
        rep_kernels, rep_cross = [], []
        for full in time_kernels:
            kern, cross_block = _slice_time_kernel(full, 0, rep, spec.n_hours)
            rep_kernels.append(kern)
            rep_cross.append(cross_block)
    else:
        rep_kernels, rep_cross = time_kernels, [None] * len(time_kernels)

    def draw_block(kern, dim, active):
        coeffs = np.zeros((dim, spec.rank_true))
        if active:
            # Planted factors f = K xi with iid coefficients concentrate on
            # the kernel's top eigendirections (energy scales with lambda^2),
            # so the generating kernel represents its own signal strictly
            # cheaper than any spectrally flat competitor. A K^{1/2} draw
            # would cost the same under the identity kernel in expectation
            # (unit diagonal means the average eigenvalue is one) and make
            # the planted set unidentifiable.
            xi = rng.standard_normal((dim, spec.rank_true))
            factor = kern.gram @ xi
            if spec.center_components:
                # Congestion components are price differentials: project the
                # planted factor columns off the all-ones direction (means
                # live in the daily profile instead).
                factor = factor - factor.mean(axis=0, keepdims=True)
            # Recover coefficients through a spectrally floored inverse so a
            # centered factor cannot dump mass on near-null kernel
            # directions and blow up the planted block norm.
            lam = kern.eigvals
            good = lam >= 1e-6 * lam[0]
            proj = kern.eigvecs.T @ factor
            proj[~good] = 0.0
            proj[good] /= lam[good, None]
            coeffs = kern.eigvecs @ proj
        return bcd.FactorBlock(coeffs, kern.label, bcd.block_norm(coeffs, kern))

    node_blocks = [draw_block(k, spec.n_nodes, k.label in spec.active_node_kernels)
                   for k in node_kernels]
    time_blocks = [draw_block(g, rep, g.label in spec.active_time_kernels)
                   for g in rep_kernels]

    def assemble():
        f = sum(k.gram @ b.coeffs for k, b in zip(node_kernels, node_blocks))
        h = sum(g.gram @ b.coeffs for g, b in zip(rep_kernels, time_blocks))
        if rep < spec.n_hours:
            h_ext = sum(cb.T @ b.coeffs for cb, b in zip(rep_cross, time_blocks))
            return f, h, f @ np.vstack([h, h_ext]).T
        return f, h, f @ h.T

    f_true, h_true, signal = assemble()

    # Scale the node side so the planted component hits the target RMS, then
    # bump any active block below unit norm so planted signals clear
    # realistic gates (norms stay >= 1 by construction in practice).
    alpha = spec.signal_rms / float(np.sqrt(np.mean(signal ** 2)))
    for blk, kern in zip(node_blocks, node_kernels):
        blk.coeffs = blk.coeffs * alpha
        blk.block_norm = bcd.block_norm(blk.coeffs, kern)
    for blocks, kerns in ((node_blocks, node_kernels), (time_blocks, rep_kernels)):
        for blk, kern in zip(blocks, kerns):
            if 0.0 < blk.block_norm < 1.0:
                blk.coeffs = blk.coeffs / blk.block_norm
                blk.block_norm = bcd.block_norm(blk.coeffs, kern)
    f_true, h_true, signal = assemble()

    sigma = spec.noise_sigma
    if spec.noise_relative:
        sigma *= float(np.sqrt(np.mean(signal ** 2)))
    noise = sigma * rng.standard_normal(signal.shape) if sigma > 0 else np.zeros_like(signal)

    profile = _daily_profile(spec.daily_profile_amplitude)
    hod = (start.hour + np.arange(spec.n_hours)) % 24
    prices = profile[hod][None, :] + signal + noise

    panel = PricePanel(prices=prices, node_ids=node_ids,
                       timestamps=timestamps_all[:spec.n_hours])
    truth = bcd.ModelState(
        node_blocks=node_blocks, time_blocks=time_blocks,
        node_kernels=node_kernels, time_kernels=rep_kernels,
        rank=spec.rank_true, mu=1.0, f_agg=f_true, h_agg=h_true, converged=True,
    )
    return SyntheticMarket(
        spec=spec, panel=panel, signal=signal, truth=truth, graph=graph,
        node_features=node_features, time_features=time_features,
        node_recipes=node_recipes, time_recipes=time_recipes,
        node_kernels=node_kernels, time_kernels=time_kernels, profile=profile,
    )


def write_market_files(market: SyntheticMarket, directory) -> dict:
    """Emit the synthetic dataset in the formats the pipeline consumes."""
    dataio.ensure_dir(directory)
    paths = {
        "prices": os.path.join(directory, "prices.csv"),
        "node_features": os.path.join(directory, "node_features.csv"),
        "time_features": os.path.join(directory, "time_features.csv"),
        "graph": os.path.join(directory, "graph.csv"),
        "truth": os.path.join(directory, "truth"),
    }
    dataio.write_price_csv(paths["prices"], market.panel.node_ids,
                           market.panel.timestamps, market.panel.prices)
    dataio.write_features_csv(paths["node_features"], market.node_features)
    dataio.write_features_csv(paths["time_features"], market.time_features)
    dataio.write_graph_csv(paths["graph"], market.graph)
    bcd.save_model(market.truth, paths["truth"], extras={
        "active_node_kernels": list(market.spec.active_node_kernels),
        "active_time_kernels": list(market.spec.active_time_kernels),
        "noise_sigma": market.spec.noise_sigma,
        "noise_relative": market.spec.noise_relative,
        "seed": market.spec.seed,
        "daily_profile_amplitude": market.spec.daily_profile_amplitude,
    })
    return paths


# ---------------------------------------------------------------------------
# Independent oracles
# ---------------------------------------------------------------------------

def oracle_canonical_prox(a_mat, b_mat, c_mat, mu: float, tol: float = 1e-12,
                          max_iter: int = 500_000) -> tuple[np.ndarray, float]:
    """Proximal-gradient solver for the vectorized canonical problem
    min_x ||a - (C kron B^{1/2}) x||^2 + mu ||x||_2.

    One gradient step on the quadratic followed by block soft-thresholding
    of the single l2 group; the step is 1/(2 lambda_max) of the quadratic.
    Returns X in the original (un-whitened) matrix coordinates together
    with the achieved objective value.
    """
    a_mat = np.asarray(a_mat, dtype=float)
    b_mat = np.asarray(getattr(b_mat, "gram", b_mat), dtype=float)
    c_mat = np.asarray(c_mat, dtype=float)
    if mu <= 0:
        raise ValueError("mu must be positive")
    w, u = np.linalg.eigh(0.5 * (b_mat + b_mat.T))
    if w[0] <= 0:
        raise ValueError("B must be positive definite")
    b_half = (u * np.sqrt(w)) @ u.T
    b_inv_half = (u / np.sqrt(w)) @ u.T
    d1, d3 = a_mat.shape
    d2 = c_mat.shape[1]
    dmat = np.kron(c_mat, b_half)
    a_vec = a_mat.reshape(-1, order="F")
    lam_quad = float(np.linalg.eigvalsh(c_mat.T @ c_mat)[-1]) * float(w[-1])
    if lam_quad <= 0:
        # Degenerate quadratic (C = 0): the penalty alone drives x to zero.
        return np.zeros((d1, d2)), float(a_vec @ a_vec)
    step = 1.0 / (2.0 * lam_quad)
    x = np.zeros(d1 * d2)
    resid = dmat @ x - a_vec
    obj = float(resid @ resid)
    for _ in range(max_iter):
        grad = 2.0 * (dmat.T @ resid)
        v = x - step * grad
        nv = float(np.linalg.norm(v))
        shrink = max(0.0, 1.0 - step * mu / nv) if nv > 0 else 0.0
        x_new = shrink * v
        resid = dmat @ x_new - a_vec
        obj_new = float(resid @ resid) + mu * float(np.linalg.norm(x_new))
        done = abs(obj_new - obj) <= tol * (1.0 + abs(obj))
        x, obj = x_new, obj_new
        if done:
            x_prime = x.reshape((d1, d2), order="F")
            return b_inv_half @ x_prime, obj
    raise ConvergenceError(f"proximal oracle hit the {max_iter}-iteration cap", obj)


@dataclass(frozen=True)
class SqrtTraceCheck:
    lhs: float
    rhs: float
    gap: float
    min_factorization_value: float


def sqrt_trace_norm_identity_check(p_mat, n_factorizations: int = 50,
                                   seed: int = 0) -> SqrtTraceCheck:
    """Check sqrt(nuclear norm) = min over factorizations P = F G^T of
    (||F||_F + ||G||_F)/2, attained by the balanced SVD split F = U sqrt(S),
    G = V sqrt(S). Random feasible factorizations must score no better."""
    p_mat = np.asarray(p_mat, dtype=float)
    u, s, vt = np.linalg.svd(p_mat, full_matrices=False)
    lhs = float(np.sqrt(np.sum(s)))
    rank = int(np.sum(s > (s[0] * 1e-12 if s.size and s[0] > 0 else np.inf)))
    if rank == 0:
        return SqrtTraceCheck(lhs=0.0, rhs=0.0, gap=0.0, min_factorization_value=0.0)
    root = np.sqrt(s[:rank])
    f_star = u[:, :rank] * root
    g_star = vt[:rank].T * root
    rhs = 0.5 * (float(np.linalg.norm(f_star)) + float(np.linalg.norm(g_star)))
    gap = abs(lhs - rhs)
    rng = np.random.default_rng(seed)
    best = np.inf
    for _ in range(n_factorizations):
        while True:
            mix = rng.standard_normal((rank, rank))
            if np.linalg.cond(mix) < 1e6:
                break
        f_rand = f_star @ mix
        g_rand = g_star @ np.linalg.inv(mix).T
        value = 0.5 * (float(np.linalg.norm(f_rand)) + float(np.linalg.norm(g_rand)))
        if value < lhs - 1e-8:
            raise ValueError(
                f"feasible factorization scored {value} below the sqrt trace norm {lhs}")
        best = min(best, value)
    return SqrtTraceCheck(lhs=lhs, rhs=rhs, gap=gap, min_factorization_value=float(best))


# ---------------------------------------------------------------------------
# Planted-recovery trials
# ---------------------------------------------------------------------------

@dataclass
class PlantedRecoveryReport:
    planted_node: set
    planted_time: set
    selected_node: set
    selected_time: set
    exact: bool
    best_mu: float
    holdout_rmse: float
    mu_grid: list
    rmse_by_mu: dict
    state: bcd.ModelState


def plant_and_recover_trial(spec: SyntheticSpec, mu_grid=None, fit_rank: int | None = None,
                            holdout_hours: int = 24, eps_bcd: float = 1e-3,
                            grid_points: int = 8, max_sweeps: int = bcd.DEFAULT_MAX_SWEEPS
                            ) -> PlantedRecoveryReport:
    """Generate, tune mu on a trailing holdout slice, fit, and compare the
    selected kernel sets against the planted ones.

    The market is generated with its representer coefficients on the
    training window, so the planted representation is available to the fit
    at its planted cost and the holdout is the true model's extrapolation
    plus noise."""
    if spec.n_hours - holdout_hours < 24:
        raise ValueError("panel too short for the holdout slice")
    if spec.rep_hours is None:
        spec = replace(spec, rep_hours=spec.n_hours - holdout_hours)
    market = generate_synthetic_market(spec)
    n_hours = market.panel.n_hours
    t1 = n_hours - holdout_hours
    node_kernels, time_kernels, cross = market.window_kernels(0, t1, n_hours)
    train = market.panel.slice_hours(0, t1)
    centered, means = center_prices(train)
    rank = spec.rank_true if fit_rank is None else fit_rank
    if mu_grid is None:
        top = bcd.mu_max(centered.prices, node_kernels, time_kernels, rank, seed=spec.seed)
        mu_grid = list(top * np.logspace(-4, np.log10(0.5), grid_points))
    grid = sorted(float(m) for m in mu_grid)
    if not grid:
        raise ValueError("mu grid is empty")
    actual = market.panel.prices[:, t1:]
    target_ts = market.panel.timestamps[t1:]
    rmse_by_mu, states = {}, {}
    from .forecast import decenter_forecast
    for mu in grid:
        state = bcd.fit(centered.prices, node_kernels, time_kernels, rank, mu,
                        eps_bcd=eps_bcd, seed=spec.seed, max_sweeps=max_sweeps)
        fc = decenter_forecast(predict(state, cross), means, target_ts, train.period)
        rmse_by_mu[mu] = rmse(fc, actual)
        states[mu] = state
    best_mu = grid[int(np.argmin([rmse_by_mu[m] for m in grid]))]
    best_state = states[best_mu]
    sel_node, sel_time = bcd.selected_kernels(best_state)
    planted_node = set(spec.active_node_kernels)
    planted_time = set(spec.active_time_kernels)
    return PlantedRecoveryReport(
        planted_node=planted_node, planted_time=planted_time,
        selected_node=sel_node, selected_time=sel_time,
        exact=(sel_node == planted_node and sel_time == planted_time),
        best_mu=best_mu, holdout_rmse=rmse_by_mu[best_mu],
        mu_grid=grid, rmse_by_mu=rmse_by_mu, state=best_state,
    )
