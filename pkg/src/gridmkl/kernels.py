"""Construction and validation of node and time kernels.

Node kernels come from a weighted similarity graph (regularized or
diffusion Laplacian), nodal features (Gaussian, linear), the identity, or
the empirical price covariance. Time kernels come from hourly features.
Every kernel matrix is validated symmetric, made strictly positive
definite with a spectral jitter when needed, eigendecomposed once, and the
decomposition is cached on the returned object.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace

import numpy as np

SYMMETRY_RTOL = 1e-10
JITTER_REL = 1e-8

NODE_KERNEL_KINDS = ("reg_laplacian", "diffusion", "gaussian", "linear", "identity", "covariance")
TIME_KERNEL_KINDS = ("gaussian", "linear", "identity")


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class WeightedGraph:
    """Undirected weighted graph; each edge stored once, no self-loops."""

    node_ids: tuple[str, ...]
    edges: tuple[tuple[int, int, float], ...]

    def __post_init__(self):
        n = len(self.node_ids)
        seen = set()
        for i, j, w in self.edges:
            if not (0 <= i < n and 0 <= j < n):
                raise ValueError(f"edge ({i},{j}) out of range for {n} nodes")
            if i == j:
                raise ValueError(f"self-loop on node index {i}")
            if w < 0:
                raise ValueError(f"negative edge weight {w} on ({i},{j})")
            key = (min(i, j), max(i, j))
            if key in seen:
                raise ValueError(f"duplicate edge between {i} and {j}")
            seen.add(key)

    @property
    def n_nodes(self) -> int:
        return len(self.node_ids)

    def adjacency(self) -> np.ndarray:
        a = np.zeros((self.n_nodes, self.n_nodes))
        for i, j, w in self.edges:
            a[i, j] = w
            a[j, i] = w
        return a


@dataclass
class FeatureTable:
    """Named feature columns over an ordered entity list.

    Categorical columns hold raw string values and are binary (one-hot)
    encoded only at kernel evaluation time.
    """

    entity_ids: list[str]
    numeric: dict[str, np.ndarray] = field(default_factory=dict)
    categorical: dict[str, np.ndarray] = field(default_factory=dict)
    standardized: bool = False

    def __post_init__(self):
        n = len(self.entity_ids)
        for name, col in self.numeric.items():
            col = np.asarray(col, dtype=float)
            if col.shape != (n,):
                raise ValueError(f"numeric column {name!r} has length {col.shape}, expected {n}")
            self.numeric[name] = col
        for name, col in self.categorical.items():
            col = np.asarray(col, dtype=object)
            if col.shape != (n,):
                raise ValueError(f"categorical column {name!r} has length {col.shape}, expected {n}")
            self.categorical[name] = col

    @property
    def n_entities(self) -> int:
        return len(self.entity_ids)

    def subset(self, indices) -> "FeatureTable":
        ids = [self.entity_ids[i] for i in indices]
        return FeatureTable(
            entity_ids=ids,
            numeric={k: v[indices] for k, v in self.numeric.items()},
            categorical={k: v[indices] for k, v in self.categorical.items()},
            standardized=self.standardized,
        )

    def select_columns(self, names) -> "FeatureTable":
        names = list(names)
        unknown = [n for n in names if n not in self.numeric and n not in self.categorical]
        if unknown:
            raise ValueError(f"unknown feature columns {unknown}")
        return FeatureTable(
            entity_ids=list(self.entity_ids),
            numeric={n: self.numeric[n] for n in names if n in self.numeric},
            categorical={n: self.categorical[n] for n in names if n in self.categorical},
            standardized=self.standardized,
        )

    def categorical_vocabulary(self) -> dict[str, list[str]]:
        return {name: sorted({str(v) for v in col}) for name, col in self.categorical.items()}

    def design_matrix(self, vocabulary: dict[str, list[str]] | None = None) -> np.ndarray:
        """Numeric columns followed by one-hot encoded categoricals.

        A fixed vocabulary (from the training entities) keeps the encoding
        stable across train/forecast evaluations; unseen categories encode
        to all-zero indicator columns.
        """
        if vocabulary is None:
            vocabulary = self.categorical_vocabulary()
        cols = [self.numeric[name] for name in self.numeric]
        for name, values in self.categorical.items():
            vocab = vocabulary.get(name, [])
            for v in vocab:
                cols.append(np.asarray([1.0 if str(x) == v else 0.0 for x in values]))
        if not cols:
            return np.zeros((self.n_entities, 0))
        return np.column_stack(cols)


@dataclass(frozen=True)
class KernelMatrix:
    """Symmetric positive-definite Gram matrix with cached eigendecomposition.

    `eigvals` is nonincreasing and strictly positive; `eigvecs` columns are
    the matching orthonormal eigenvectors.
    """

    gram: np.ndarray
    eigvecs: np.ndarray
    eigvals: np.ndarray
    label: str

    @classmethod
    def from_gram(cls, gram, label: str) -> "KernelMatrix":
        gram = _checked_symmetric(np.asarray(gram, dtype=float), "kernel matrix")
        vals, vecs = np.linalg.eigh(gram)
        if vals[0] <= 0:
            raise ValueError(
                f"kernel {label!r} is not positive definite (min eigenvalue {vals[0]:.3e})"
            )
        order = np.argsort(vals)[::-1]
        return cls(gram=gram, eigvecs=vecs[:, order], eigvals=vals[order], label=label)

    @property
    def dim(self) -> int:
        return self.gram.shape[0]

    def sqrt_apply(self, x: np.ndarray) -> np.ndarray:
        """K^{1/2} @ x via the cached spectrum."""
        return self.eigvecs @ (np.sqrt(self.eigvals)[:, None] * (self.eigvecs.T @ x))

    def shifted_solve(self, z: np.ndarray, shift: float) -> np.ndarray:
        """(K + shift*I)^{-1} @ z via the cached spectrum."""
        y = self.eigvecs.T @ z
        if y.ndim == 1:
            return self.eigvecs @ (y / (self.eigvals + shift))
        return self.eigvecs @ (y / (self.eigvals + shift)[:, None])

    def relabel(self, label: str) -> "KernelMatrix":
        return replace(self, label=label)


def _checked_symmetric(mat: np.ndarray, what: str) -> np.ndarray:
    if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
        raise ValueError(f"{what} must be square, got shape {mat.shape}")
    scale = np.linalg.norm(mat)
    if scale > 0 and np.linalg.norm(mat - mat.T) > SYMMETRY_RTOL * scale:
        raise ValueError(f"{what} is not symmetric")
    return 0.5 * (mat + mat.T)


def pd_jitter_amount(eigvals: np.ndarray) -> float:
    """Diagonal shift making the spectrum clear the relative floor.

    Empirical covariance and categorical Gaussian kernels can be singular;
    the shift restores strict positive definiteness without visibly
    changing well-conditioned kernels (it is zero for them).
    """
    lam_min = float(np.min(eigvals))
    lam_max = float(np.max(eigvals))
    if lam_max <= 0:
        return -lam_min + 1e-12 if lam_min <= 0 else 0.0
    if lam_min <= JITTER_REL * lam_max:
        return JITTER_REL * lam_max - lam_min + 1e-12
    return 0.0


def finalize_kernel(raw, label: str, *, normalize: bool = False) -> tuple[KernelMatrix, float]:
    """Validate, jitter, optionally normalize to unit diagonal.

    Returns the finished KernelMatrix and the applied jitter so cross
    kernels can stay consistent with the training Gram.
    """
    raw = _checked_symmetric(np.asarray(raw, dtype=float), f"kernel {label!r}")
    vals = np.linalg.eigvalsh(raw)
    c = pd_jitter_amount(vals)
    gram = raw if c == 0.0 else raw + c * np.eye(raw.shape[0])
    if normalize:
        gram = unit_diagonal_scaled(gram)
    return KernelMatrix.from_gram(gram, label), c


def unit_diagonal_scaled(mat: np.ndarray) -> np.ndarray:
    """Scale a square matrix so every diagonal entry equals one."""
    d = np.diag(mat).copy()
    if np.any(d <= 0):
        raise ValueError("cannot normalize: nonpositive diagonal entry")
    s = 1.0 / np.sqrt(d)
    return mat * np.outer(s, s)


# ---------------------------------------------------------------------------
# Kernel constructions
# ---------------------------------------------------------------------------

def build_graph_laplacian(graph: WeightedGraph) -> np.ndarray:
    """Normalized graph Laplacian L = I - D^{-1/2} A D^{-1/2}.

    Isolated nodes keep L_ii = 1 with zero off-diagonals, so they decouple
    while the spectrum stays inside [0, 2].
    """
    a = graph.adjacency()
    deg = a.sum(axis=1)
    inv_sqrt = np.zeros_like(deg)
    nz = deg > 0
    inv_sqrt[nz] = 1.0 / np.sqrt(deg[nz])
    lap = np.eye(graph.n_nodes) - a * np.outer(inv_sqrt, inv_sqrt)
    return 0.5 * (lap + lap.T)


def _checked_laplacian(lap) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    lap = _checked_symmetric(np.asarray(lap, dtype=float), "Laplacian")
    vals, vecs = np.linalg.eigh(lap)
    scale = max(float(vals[-1]), 1.0)
    if vals[0] < -1e-10 * scale:
        raise ValueError(f"Laplacian is not positive semidefinite (min eigenvalue {vals[0]:.3e})")
    return lap, np.maximum(vals, 0.0), vecs


def _kernel_from_spectrum(vecs, vals, label: str) -> KernelMatrix:
    c = pd_jitter_amount(vals)
    vals = vals + c
    gram = (vecs * vals) @ vecs.T
    gram = 0.5 * (gram + gram.T)
    order = np.argsort(vals)[::-1]
    return KernelMatrix(gram=gram, eigvecs=vecs[:, order], eigvals=vals[order], label=label)


def regularized_laplacian_kernel(lap, label: str = "reg-laplacian") -> KernelMatrix:
    """K = (L + I)^{-1}, computed in the eigenbasis of L."""
    _, vals, vecs = _checked_laplacian(lap)
    return _kernel_from_spectrum(vecs, 1.0 / (1.0 + vals), label)


def diffusion_kernel(lap, beta: float = 3.0, label: str = "diffusion") -> KernelMatrix:
    """Matrix exponential exp(-beta * L) in the eigenbasis of L."""
    if beta <= 0:
        raise ValueError(f"diffusion rate must be positive, got {beta}")
    _, vals, vecs = _checked_laplacian(lap)
    return _kernel_from_spectrum(vecs, np.exp(-beta * vals), label)


def pairwise_sq_dists(xa: np.ndarray, xb: np.ndarray | None = None) -> np.ndarray:
    xa = np.atleast_2d(np.asarray(xa, dtype=float))
    same = xb is None
    xb = xa if same else np.atleast_2d(np.asarray(xb, dtype=float))
    sq_a = np.sum(xa * xa, axis=1)
    sq_b = sq_a if same else np.sum(xb * xb, axis=1)
    d2 = sq_a[:, None] + sq_b[None, :] - 2.0 * (xa @ xb.T)
    np.maximum(d2, 0.0, out=d2)
    if same:
        np.fill_diagonal(d2, 0.0)
    return d2


def median_sq_bandwidth(table: FeatureTable) -> float:
    """Median of all pairwise squared Euclidean feature distances."""
    if table.n_entities < 2:
        raise ValueError("need at least two entities for a median bandwidth")
    if not table.standardized:
        raise ValueError("features must be standardized before bandwidth selection")
    x = table.design_matrix()
    d2 = pairwise_sq_dists(x)
    iu = np.triu_indices(d2.shape[0], k=1)
    h = float(np.median(d2[iu]))
    if h <= 0:
        raise ValueError("all entities identical: median squared distance is zero")
    return h


def gaussian_kernel(table: FeatureTable, bandwidth: float, label: str = "gaussian",
                    vocabulary: dict | None = None) -> KernelMatrix:
    """K(i,j) = exp(-||x_i - x_j||^2 / bandwidth); unit diagonal by construction."""
    if bandwidth <= 0:
        raise ValueError(f"bandwidth must be positive, got {bandwidth}")
    x = table.design_matrix(vocabulary)
    raw = np.exp(-pairwise_sq_dists(x) / bandwidth)
    np.fill_diagonal(raw, 1.0)
    kernel, _ = finalize_kernel(raw, label)
    return kernel


def gaussian_cross(xa: np.ndarray, xb: np.ndarray, bandwidth: float) -> np.ndarray:
    return np.exp(-pairwise_sq_dists(xa, xb) / bandwidth)


def linear_kernel(table: FeatureTable, label: str = "linear",
                  vocabulary: dict | None = None) -> KernelMatrix:
    x = table.design_matrix(vocabulary)
    kernel, _ = finalize_kernel(x @ x.T, label)
    return kernel


def identity_kernel(dim: int, label: str = "identity") -> KernelMatrix:
    eye = np.eye(dim)
    return KernelMatrix(gram=eye, eigvecs=eye.copy(), eigvals=np.ones(dim), label=label)


def empirical_covariance_kernel(history, label: str = "covariance") -> KernelMatrix:
    """Sample covariance across nodes, jittered and scaled to unit diagonal."""
    prices = np.asarray(getattr(history, "prices", history), dtype=float)
    if prices.ndim != 2:
        raise ValueError("price history must be a node x time matrix")
    if prices.shape[1] < 2:
        raise ValueError("need at least two time samples for an empirical covariance")
    cov = np.cov(prices, ddof=1)
    cov = np.atleast_2d(cov)
    kernel, _ = finalize_kernel(cov, label, normalize=True)
    return kernel


def normalize_unit_diagonal(kernel: KernelMatrix) -> KernelMatrix:
    """Rescale to unit diagonal; positive definiteness is preserved by congruence."""
    return KernelMatrix.from_gram(unit_diagonal_scaled(kernel.gram), kernel.label)


# ---------------------------------------------------------------------------
# Feature standardization
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class StandardizationStats:
    """Per-column means/scales fixed on the training entities."""

    means: dict[str, float]
    scales: dict[str, float]
    kept: tuple[str, ...]
    dropped: tuple[str, ...]

    def to_dict(self) -> dict:
        return {
            "means": dict(self.means),
            "scales": dict(self.scales),
            "kept": list(self.kept),
            "dropped": list(self.dropped),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "StandardizationStats":
        return cls(
            means={k: float(v) for k, v in d["means"].items()},
            scales={k: float(v) for k, v in d["scales"].items()},
            kept=tuple(d["kept"]),
            dropped=tuple(d["dropped"]),
        )


def compute_standardization(table: FeatureTable) -> StandardizationStats:
    means, scales, kept, dropped = {}, {}, [], []
    for name, col in table.numeric.items():
        mu = float(np.mean(col))
        sd = float(np.std(col))
        if sd <= 0:
            dropped.append(name)
            continue
        means[name] = mu
        scales[name] = sd
        kept.append(name)
    return StandardizationStats(means=means, scales=scales, kept=tuple(kept), dropped=tuple(dropped))


def apply_standardization(table: FeatureTable, stats: StandardizationStats,
                          mark_standardized: bool = False) -> FeatureTable:
    numeric = {
        name: (table.numeric[name] - stats.means[name]) / stats.scales[name]
        for name in stats.kept
    }
    return FeatureTable(
        entity_ids=list(table.entity_ids),
        numeric=numeric,
        categorical={k: v.copy() for k, v in table.categorical.items()},
        standardized=mark_standardized,
    )


def standardize_features(table: FeatureTable) -> FeatureTable:
    """Center and scale numeric columns to mean 0, variance 1.

    Zero-variance columns carry no information and are dropped with a
    warning; binary-encoded categorical columns pass through untouched.
    """
    stats = compute_standardization(table)
    if stats.dropped:
        warnings.warn(f"dropping zero-variance feature columns: {list(stats.dropped)}", stacklevel=2)
    return apply_standardization(table, stats, mark_standardized=True)


# ---------------------------------------------------------------------------
# Kernel recipes (the config-level vocabulary)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class KernelRecipe:
    """Declarative kernel description used in run configs and bundles.

    `columns`, when given, restricts feature-based kinds to a subset of the
    table's columns (e.g. a Gaussian kernel on all but the shifted
    features).
    """

    label: str
    kind: str
    beta: float = 3.0
    bandwidth: float | str = "median"
    normalize: bool = True
    columns: tuple | None = None

    def validate(self, family: str) -> None:
        kinds = NODE_KERNEL_KINDS if family == "node" else TIME_KERNEL_KINDS
        if self.kind not in kinds:
            raise ValueError(f"unknown {family} kernel kind {self.kind!r} for {self.label!r}")
        if not self.label or any(ch in self.label for ch in "/\\ \t"):
            raise ValueError(f"bad kernel label {self.label!r}")
        if self.kind == "diffusion" and self.beta <= 0:
            raise ValueError(f"{self.label!r}: diffusion beta must be positive")
        if self.kind == "gaussian":
            if isinstance(self.bandwidth, str):
                if self.bandwidth != "median":
                    raise ValueError(f"{self.label!r}: bandwidth must be a number or 'median'")
            elif self.bandwidth <= 0:
                raise ValueError(f"{self.label!r}: bandwidth must be positive")
        if self.columns is not None and self.kind not in ("gaussian", "linear"):
            raise ValueError(f"{self.label!r}: column subsets only apply to feature kernels")

    def to_dict(self) -> dict:
        d = {
            "label": self.label,
            "kind": self.kind,
            "beta": self.beta,
            "bandwidth": self.bandwidth,
            "normalize": self.normalize,
        }
        if self.columns is not None:
            d["columns"] = list(self.columns)
        return d

    @classmethod
    def from_dict(cls, d: dict, family: str) -> "KernelRecipe":
        allowed = {"label", "kind", "beta", "bandwidth", "normalize", "columns"}
        unknown = set(d) - allowed
        if unknown:
            raise ValueError(f"unknown kernel recipe keys {sorted(unknown)}")
        if "label" not in d or "kind" not in d:
            raise ValueError("kernel recipe requires 'label' and 'kind'")
        columns = d.get("columns")
        recipe = cls(
            label=str(d["label"]),
            kind=str(d["kind"]),
            beta=float(d.get("beta", 3.0)),
            bandwidth=d.get("bandwidth", "median"),
            normalize=bool(d.get("normalize", True)),
            columns=None if columns is None else tuple(str(c) for c in columns),
        )
        recipe.validate(family)
        return recipe
