"""Block-coordinate descent for the low-rank multi-kernel model.

The model reconstructs the node x time price matrix as
P = sum_l sum_m K_l B_l Gamma_m^T G_m = F H^T with the aggregates
F = sum_l K_l B_l and H = sum_m G_m Gamma_m maintained incrementally.
Blocks are swept cyclically (B_1..B_L then Gamma_1..Gamma_M) and each
update is an exact canonical-subproblem solve, so the objective is
nonincreasing and some blocks are driven exactly to zero, which is what
performs kernel selection.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from . import dataio
from .canonical import make_instance, solve_instance
from .kernels import KernelMatrix

SELECTION_REL_TOL = 1e-10
DEFAULT_MAX_SWEEPS = 500


def block_norm(x_mat, kernel: KernelMatrix) -> float:
    """||X||_K = sqrt(trace(X^T K X)) = ||K^{1/2} X||_F."""
    x_mat = np.asarray(x_mat, dtype=float)
    if x_mat.shape[0] != kernel.dim:
        raise ValueError(f"block has {x_mat.shape[0]} rows but kernel is {kernel.dim}-dimensional")
    v = kernel.eigvecs.T @ x_mat
    return float(np.sqrt(max(np.sum(kernel.eigvals[:, None] * v * v), 0.0)))


@dataclass
class FactorBlock:
    coeffs: np.ndarray
    kernel_label: str
    block_norm: float = 0.0


@dataclass
class ModelState:
    node_blocks: list[FactorBlock]
    time_blocks: list[FactorBlock]
    node_kernels: list[KernelMatrix]
    time_kernels: list[KernelMatrix]
    rank: int
    mu: float
    f_agg: np.ndarray                       # sum_l K_l B_l       (N x R)
    h_agg: np.ndarray                       # sum_m G_m Gamma_m   (T x R)
    cost_trace: list[float] = field(default_factory=list)
    block_cost_trace: list[float] = field(default_factory=list)
    converged: bool = False
    sweeps: int = 0

    @property
    def n_nodes(self) -> int:
        return self.f_agg.shape[0]

    @property
    def n_hours(self) -> int:
        return self.h_agg.shape[0]

    def reconstruction(self) -> np.ndarray:
        return self.f_agg @ self.h_agg.T

    def recompute_aggregates(self) -> tuple[np.ndarray, np.ndarray]:
        """From-scratch F and H, for consistency checks."""
        f = sum(k.gram @ b.coeffs for k, b in zip(self.node_kernels, self.node_blocks))
        h = sum(g.gram @ b.coeffs for g, b in zip(self.time_kernels, self.time_blocks))
        return f, h

    def penalty(self) -> float:
        return self.mu * (sum(b.block_norm for b in self.node_blocks)
                          + sum(b.block_norm for b in self.time_blocks))


def _as_matrix(z) -> np.ndarray:
    return np.asarray(getattr(z, "prices", z), dtype=float)


def objective(state: ModelState, z) -> float:
    z = _as_matrix(z)
    if z.shape != (state.n_nodes, state.n_hours):
        raise ValueError(f"observation matrix {z.shape} does not match model "
                         f"({state.n_nodes}, {state.n_hours})")
    resid = z - state.reconstruction()
    return float(np.sum(resid * resid)) + state.penalty()


def update_block_B(state: ModelState, z, l: int) -> ModelState:
    """Exact minimization over B_l with everything else fixed."""
    z = _as_matrix(z)
    kern = state.node_kernels[l]
    block = state.node_blocks[l]
    state.f_agg -= kern.gram @ block.coeffs
    resid = z - state.f_agg @ state.h_agg.T
    sol = solve_instance(make_instance(resid, kern, state.h_agg, state.mu))
    block.coeffs = sol.x_mat
    block.block_norm = block_norm(sol.x_mat, kern)
    state.f_agg += kern.gram @ block.coeffs
    state.block_cost_trace.append(objective(state, z))
    return state

def update_block_Gamma(state: ModelState, z, m: int) -> ModelState:
    """Mirror of the B update on the transposed residual."""
    z = _as_matrix(z)
    kern = state.time_kernels[m]
    block = state.time_blocks[m]
    state.h_agg -= kern.gram @ block.coeffs
    resid = z - state.f_agg @ state.h_agg.T
    sol = solve_instance(make_instance(resid.T, kern, state.f_agg, state.mu))
    block.coeffs = sol.x_mat
    block.block_norm = block_norm(sol.x_mat, kern)
    state.h_agg += kern.gram @ block.coeffs
    state.block_cost_trace.append(objective(state, z))
    return state


def _init_state(z, node_kernels, time_kernels, rank, mu, rng) -> ModelState:
    n, t = z.shape
    scale = 1.0 / np.sqrt(rank * max(n, t))
    node_blocks = [
        FactorBlock(coeffs=rng.standard_normal((n, rank)) * scale, kernel_label=k.label)
        for k in node_kernels
    ]
    time_blocks = [
        FactorBlock(coeffs=rng.standard_normal((t, rank)) * scale, kernel_label=g.label)
        for g in time_kernels
    ]
    for blk, k in zip(node_blocks, node_kernels):
        blk.block_norm = block_norm(blk.coeffs, k)
    for blk, g in zip(time_blocks, time_kernels):
        blk.block_norm = block_norm(blk.coeffs, g)
    f = sum(k.gram @ b.coeffs for k, b in zip(node_kernels, node_blocks))
    h = sum(g.gram @ b.coeffs for g, b in zip(time_kernels, time_blocks))
    return ModelState(node_blocks=node_blocks, time_blocks=time_blocks,
                      node_kernels=list(node_kernels), time_kernels=list(time_kernels),
                      rank=rank, mu=mu, f_agg=f, h_agg=h)


def _clone_init(init: ModelState, node_kernels, time_kernels, mu) -> ModelState:
    node_blocks = [FactorBlock(b.coeffs.copy(), b.kernel_label, b.block_norm)
                   for b in init.node_blocks]
    time_blocks = [FactorBlock(b.coeffs.copy(), b.kernel_label, b.block_norm)
                   for b in init.time_blocks]
    f = sum(k.gram @ b.coeffs for k, b in zip(node_kernels, node_blocks))
    h = sum(g.gram @ b.coeffs for g, b in zip(time_kernels, time_blocks))
    return ModelState(node_blocks=node_blocks, time_blocks=time_blocks,
                      node_kernels=list(node_kernels), time_kernels=list(time_kernels),
                      rank=init.rank, mu=mu, f_agg=f, h_agg=h)


def _validate_fit_args(z, node_kernels, time_kernels, rank, mu):
    n, t = z.shape
    if rank < 1:
        raise ValueError(f"rank budget must be >= 1, got {rank}")
    if mu <= 0:
        raise ValueError(f"penalty mu must be positive, got {mu}")
    if not node_kernels or not time_kernels:
        raise ValueError("need at least one node kernel and one time kernel")
    for k in node_kernels:
        if k.dim != n:
            raise ValueError(f"node kernel {k.label!r} is {k.dim}-dimensional, expected {n}")
    for g in time_kernels:
        if g.dim != t:
            raise ValueError(f"time kernel {g.label!r} is {g.dim}-dimensional, expected {t}")


def fit(z, node_kernels, time_kernels, rank: int, mu: float,
        eps_bcd: float = 1e-3, seed: int = 0, max_sweeps: int = DEFAULT_MAX_SWEEPS,
        restarts: int = 1, init: ModelState | None = None) -> ModelState:
    """Cyclic block-coordinate descent until the relative cost change of a
    full sweep drops below eps_bcd.

    The joint problem is non-convex, so `restarts` independent seeded
    initializations can be run; the best final cost wins. If the sweep cap
    is hit the best state so far is returned with converged=False.
    """
    z = _as_matrix(z)
    _validate_fit_args(z, node_kernels, time_kernels, rank, mu)
    best: ModelState | None = None
    n_runs = 1 if init is not None else max(1, restarts)
    for run in range(n_runs):
        if init is not None:
            state = _clone_init(init, node_kernels, time_kernels, mu)
        else:
            rng = np.random.default_rng(seed + run)
            state = _init_state(z, node_kernels, time_kernels, rank, mu, rng)
        cost = objective(state, z)
        state.cost_trace.append(cost)
        state.block_cost_trace.append(cost)
        for sweep in range(max_sweeps):
            for l in range(len(node_kernels)):
                update_block_B(state, z, l)
            for m in range(len(time_kernels)):
                update_block_Gamma(state, z, m)
            new_cost = state.block_cost_trace[-1]
            state.cost_trace.append(new_cost)
            state.sweeps = sweep + 1
            if cost == 0.0:
                converged = new_cost == 0.0
            else:
                converged = abs(new_cost / cost - 1.0) < eps_bcd
            cost = new_cost
            if converged:
                state.converged = True
                break
        if best is None or state.cost_trace[-1] < best.cost_trace[-1]:
            best = state
    return best


def mu_max(z, node_kernels, time_kernels, rank: int, seed: int = 0) -> float:
    """Top of a sensible mu grid: twice the largest gate value met in the
    first sweep when every update is forced to zero. Any mu at or above
    this closes every gate of fit(seed) in sweep one."""
    z = _as_matrix(z)
    _validate_fit_args(z, node_kernels, time_kernels, rank, mu=1.0)
    rng = np.random.default_rng(seed)
    state = _init_state(z, node_kernels, time_kernels, rank, 1.0, rng)
    gates = []
    for l, kern in enumerate(node_kernels):
        block = state.node_blocks[l]
        state.f_agg -= kern.gram @ block.coeffs
        resid = z - state.f_agg @ state.h_agg.T
        inst = make_instance(resid, kern, state.h_agg, 1.0)
        gates.append(inst.gate_value)
        block.coeffs = np.zeros_like(block.coeffs)
        block.block_norm = 0.0
    for m, kern in enumerate(time_kernels):
        block = state.time_blocks[m]
        state.h_agg -= kern.gram @ block.coeffs
        resid = z - state.f_agg @ state.h_agg.T
        inst = make_instance(resid.T, kern, state.f_agg, 1.0)
        gates.append(inst.gate_value)
        block.coeffs = np.zeros_like(block.coeffs)
        block.block_norm = 0.0
    return 2.0 * max(gates)


def selected_kernels(state: ModelState) -> tuple[set[str], set[str]]:
    """Kernels whose blocks survived the group-sparsity gate."""
    norms = [b.block_norm for b in state.node_blocks] + [b.block_norm for b in state.time_blocks]
    top = max(norms) if norms else 0.0
    thr = SELECTION_REL_TOL * top
    node = {b.kernel_label for b in state.node_blocks if b.block_norm > thr}
    time = {b.kernel_label for b in state.time_blocks if b.block_norm > thr}
    return node, time


# ---------------------------------------------------------------------------
# Model bundle persistence
# ---------------------------------------------------------------------------

def save_model(state: ModelState, directory, extras: dict | None = None) -> None:
    """Write a model bundle: JSON manifest plus one matrix CSV per block
    and per kernel."""
    dataio.ensure_dir(directory)
    manifest = {
        "n_nodes": state.n_nodes,
        "n_hours": state.n_hours,
        "rank": state.rank,
        "n_node_kernels": len(state.node_kernels),
        "n_time_kernels": len(state.time_kernels),
        "mu": state.mu,
        "node_kernel_labels": [k.label for k in state.node_kernels],
        "time_kernel_labels": [g.label for g in state.time_kernels],
        "converged": state.converged,
        "sweeps": state.sweeps,
        "cost_trace": list(map(float, state.cost_trace)),
        "extras": extras or {},
    }
    dataio.write_json(os.path.join(directory, "manifest.json"), manifest)
    for kern in state.node_kernels:
        dataio.write_matrix_csv(os.path.join(directory, f"node_kernel_{kern.label}.csv"), kern.gram)
    for kern in state.time_kernels:
        dataio.write_matrix_csv(os.path.join(directory, f"time_kernel_{kern.label}.csv"), kern.gram)
    for blk in state.node_blocks:
        dataio.write_matrix_csv(os.path.join(directory, f"node_block_{blk.kernel_label}.csv"), blk.coeffs)
    for blk in state.time_blocks:
        dataio.write_matrix_csv(os.path.join(directory, f"time_block_{blk.kernel_label}.csv"), blk.coeffs)


def load_model(directory) -> tuple[ModelState, dict]:
    manifest_path = os.path.join(directory, "manifest.json")
    if not os.path.exists(manifest_path):
        raise dataio.InputDataError(f"no model manifest at {manifest_path}")
    manifest = dataio.read_json(manifest_path)
    node_kernels = [
        KernelMatrix.from_gram(dataio.read_matrix_csv(os.path.join(directory, f"node_kernel_{lab}.csv")), lab)
        for lab in manifest["node_kernel_labels"]
    ]
    time_kernels = [
        KernelMatrix.from_gram(dataio.read_matrix_csv(os.path.join(directory, f"time_kernel_{lab}.csv")), lab)
        for lab in manifest["time_kernel_labels"]
    ]
    node_blocks = []
    for lab, kern in zip(manifest["node_kernel_labels"], node_kernels):
        coeffs = dataio.read_matrix_csv(os.path.join(directory, f"node_block_{lab}.csv"))
        node_blocks.append(FactorBlock(coeffs, lab, block_norm(coeffs, kern)))
    time_blocks = []
    for lab, kern in zip(manifest["time_kernel_labels"], time_kernels):
        coeffs = dataio.read_matrix_csv(os.path.join(directory, f"time_block_{lab}.csv"))
        time_blocks.append(FactorBlock(coeffs, lab, block_norm(coeffs, kern)))
    f = sum(k.gram @ b.coeffs for k, b in zip(node_kernels, node_blocks))
    h = sum(g.gram @ b.coeffs for g, b in zip(time_kernels, time_blocks))
    state = ModelState(
        node_blocks=node_blocks, time_blocks=time_blocks,
        node_kernels=node_kernels, time_kernels=time_kernels,
        rank=int(manifest["rank"]), mu=float(manifest["mu"]),
        f_agg=f, h_agg=h,
        cost_trace=list(manifest["cost_trace"]),
        converged=bool(manifest["converged"]),
        sweeps=int(manifest.get("sweeps", 0)),
    )
    return state, manifest
