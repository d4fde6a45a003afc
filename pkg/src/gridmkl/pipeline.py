"""Wiring between raw market data, kernel recipes, and the engine.

A MarketDataset owns a price panel plus the feature tables and graph the
kernel recipes refer to. It builds the training kernels for any hour
window and the cross kernels toward a forecast window, keeping the jitter
and unit-diagonal normalization of the cross blocks consistent with the
training Gram (cross entries are scaled by the same per-entity factors).
Forecast hours may extend past the end of the price panel as long as the
time feature table covers them.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from datetime import timedelta

import numpy as np

from . import kernels as kx
from .dataio import InputDataError
from .forecast import CrossKernels, PricePanel
from .kernels import FeatureTable, KernelMatrix, KernelRecipe, WeightedGraph


@dataclass
class FittedKernel:
    """A built kernel plus the record needed to evaluate it consistently
    between training and forecast entities."""

    recipe: KernelRecipe
    kernel: KernelMatrix
    jitter: float
    resolved: dict = field(default_factory=dict)   # JSON-able resolution record

    @property
    def label(self) -> str:
        return self.recipe.label


def _normalize_with_train_scale(raw_train, raw_cross, raw_new_diag, jitter, normalize):
    """Scale a raw cross block by the training normalization factors.

    The jittered kernel function is k(x,y) + c*delta(x,y) on entity
    identity; normalization divides by the square roots of its diagonal.
    """
    if not normalize:
        return raw_cross
    s_train = 1.0 / np.sqrt(np.diag(raw_train) + jitter)
    s_new = 1.0 / np.sqrt(np.asarray(raw_new_diag, dtype=float) + jitter)
    return raw_cross * np.outer(s_train, s_new)


class MarketDataset:
    """Price panel + feature sources + kernel recipes.

    Node features are standardized once over the full (fixed) node set.
    Time features are standardized per training window, with the training
    statistics re-applied to the forecast hours, so tuning stays causal.
    """

    def __init__(self, panel: PricePanel, node_recipes, time_recipes,
                 node_features: FeatureTable | None = None,
                 time_features: FeatureTable | None = None,
                 graph: WeightedGraph | None = None):
        self.panel = panel
        self.node_recipes = list(node_recipes)
        self.time_recipes = list(time_recipes)
        self.graph = graph
        self.time_features_raw = time_features
        for recipe in self.node_recipes:
            recipe.validate("node")
        for recipe in self.time_recipes:
            recipe.validate("time")
        labels = [r.label for r in self.node_recipes] + [r.label for r in self.time_recipes]
        if len(set(labels)) != len(labels):
            raise InputDataError("kernel recipe labels must be unique")

        self.node_features = None
        if node_features is not None:
            have = {eid: k for k, eid in enumerate(node_features.entity_ids)}
            missing = [nid for nid in panel.node_ids if nid not in have]
            if missing:
                raise InputDataError(f"node features missing entries for {missing[:5]}")
            order = [have[nid] for nid in panel.node_ids]
            self.node_features = kx.standardize_features(node_features.subset(order))
        if graph is not None and list(graph.node_ids) != list(panel.node_ids):
            raise InputDataError("graph node ordering must match the price panel")
        if time_features is not None:
            self._time_index = {str(eid): k for k, eid in enumerate(time_features.entity_ids)}
        else:
            self._time_index = {}
        self._static_node_cache: dict[str, FittedKernel] = {}
        self._lap_cache: np.ndarray | None = None
        self._last_fitted: dict | None = None

    # -- timeline ------------------------------------------------------------

    def hour_timestamp(self, k: int):
        """Timestamp of hour index k; extrapolates hourly past the panel."""
        n = self.panel.n_hours
        if k < n:
            return self.panel.timestamps[k]
        return self.panel.timestamps[-1] + timedelta(hours=k - n + 1)

    def target_timestamps(self, t1: int, t2: int) -> list:
        return [self.hour_timestamp(k) for k in range(t1, t2)]

    # -- node side -------------------------------------------------------------

    def _laplacian(self) -> np.ndarray:
        if self.graph is None:
            raise InputDataError("a graph file is required for Laplacian kernels")
        if self._lap_cache is None:
            self._lap_cache = kx.build_graph_laplacian(self.graph)
        return self._lap_cache

    def _build_node_kernel(self, recipe: KernelRecipe, t0: int, t1: int) -> FittedKernel:
        if recipe.kind != "covariance" and recipe.label in self._static_node_cache:
            return self._static_node_cache[recipe.label]
        resolved: dict = {"kind": recipe.kind}
        if recipe.kind == "identity":
            kern = kx.identity_kernel(self.panel.n_nodes, recipe.label)
            fitted = FittedKernel(recipe, kern, 0.0, resolved)
        elif recipe.kind in ("reg_laplacian", "diffusion"):
            lap = self._laplacian()
            if recipe.kind == "reg_laplacian":
                base = kx.regularized_laplacian_kernel(lap, recipe.label)
            else:
                base = kx.diffusion_kernel(lap, recipe.beta, recipe.label)
                resolved["beta"] = recipe.beta
            kern, c = kx.finalize_kernel(base.gram, recipe.label, normalize=recipe.normalize)
            fitted = FittedKernel(recipe, kern, c, resolved)
        elif recipe.kind in ("gaussian", "linear"):
            if self.node_features is None:
                raise InputDataError(f"node kernel {recipe.label!r} needs node features")
            table = (self.node_features if recipe.columns is None
                     else self.node_features.select_columns(recipe.columns))
            x = table.design_matrix()
            if recipe.kind == "gaussian":
                h = self._resolve_bandwidth(recipe, table)
                raw = kx.gaussian_cross(x, x, h)
                np.fill_diagonal(raw, 1.0)
                resolved["bandwidth"] = h
            else:
                raw = x @ x.T
            kern, c = kx.finalize_kernel(raw, recipe.label, normalize=recipe.normalize)
            fitted = FittedKernel(recipe, kern, c, resolved)
        elif recipe.kind == "covariance":
            window = self.panel.prices[:, t0:t1]
            cov = np.cov(window, ddof=1)
            kern, c = kx.finalize_kernel(np.atleast_2d(cov), recipe.label,
                                         normalize=recipe.normalize)
            resolved["window"] = [t0, t1]
            return FittedKernel(recipe, kern, c, resolved)
        else:
            raise InputDataError(f"unsupported node kernel kind {recipe.kind!r}")
        self._static_node_cache[recipe.label] = fitted
        return fitted

    @staticmethod
    def _resolve_bandwidth(recipe: KernelRecipe, table: FeatureTable) -> float:
        if recipe.bandwidth == "median":
            return kx.median_sq_bandwidth(table)
        return float(recipe.bandwidth)

    # -- time side ---------------------------------------------------------------

    def _time_rows(self, t0: int, t1: int) -> list[int]:
        if self.time_features_raw is None:
            raise InputDataError("time kernels need a time feature table")
        rows = []
        for k in range(t0, t1):
            key = self.hour_timestamp(k).isoformat()
            if key not in self._time_index:
                raise InputDataError(f"time features missing hour {key}")
            rows.append(self._time_index[key])
        return rows

    def _build_time_kernel(self, recipe: KernelRecipe, t0: int, t1: int,
                           t2: int | None) -> tuple[FittedKernel, np.ndarray | None]:
        n_train = t1 - t0
        n_new = 0 if t2 is None else t2 - t1
        if recipe.kind == "identity":
            kern = kx.identity_kernel(n_train, recipe.label)
            cross = None if t2 is None else np.zeros((n_train, n_new))
            return FittedKernel(recipe, kern, 0.0, {"kind": "identity"}), cross

        rows_train = self._time_rows(t0, t1)
        table_train = self.time_features_raw.subset(rows_train)
        if recipe.columns is not None:
            table_train = table_train.select_columns(recipe.columns)
        stats = kx.compute_standardization(table_train)
        std_train = kx.apply_standardization(table_train, stats, mark_standardized=True)
        vocab = std_train.categorical_vocabulary()
        x_train = std_train.design_matrix(vocab)
        resolved = {"kind": recipe.kind, "standardization": stats.to_dict(), "vocabulary": vocab}

        x_new = None
        if t2 is not None:
            rows_new = self._time_rows(t1, t2)
            table_new = self.time_features_raw.subset(rows_new)
            if recipe.columns is not None:
                table_new = table_new.select_columns(recipe.columns)
            x_new = kx.apply_standardization(table_new, stats).design_matrix(vocab)

        if recipe.kind == "gaussian":
            h = self._resolve_bandwidth(recipe, std_train)
            resolved["bandwidth"] = h
            raw = kx.gaussian_cross(x_train, x_train, h)
            np.fill_diagonal(raw, 1.0)
            raw_cross = None if x_new is None else kx.gaussian_cross(x_train, x_new, h)
            raw_new_diag = np.ones(n_new)
        elif recipe.kind == "linear":
            raw = x_train @ x_train.T
            raw_cross = None if x_new is None else x_train @ x_new.T
            raw_new_diag = None if x_new is None else np.sum(x_new * x_new, axis=1)
        else:
            raise InputDataError(f"unsupported time kernel kind {recipe.kind!r}")

        kern, c = kx.finalize_kernel(raw, recipe.label, normalize=recipe.normalize)
        cross = None
        if raw_cross is not None:
            cross = _normalize_with_train_scale(raw, raw_cross, raw_new_diag, c, recipe.normalize)
        return FittedKernel(recipe, kern, c, resolved), cross

    # -- public API -----------------------------------------------------------

    def window_kernels(self, t0: int, t1: int, t2: int | None = None):
        """Training kernels for hours [t0, t1) and, when t2 is given, cross
        kernels toward the forecast hours [t1, t2)."""
        if not (0 <= t0 < t1 <= self.panel.n_hours):
            raise ValueError(f"bad training window [{t0}, {t1})")
        if t2 is not None and t2 <= t1:
            raise ValueError(f"bad forecast window [{t1}, {t2})")
        fitted_nodes = [self._build_node_kernel(r, t0, t1) for r in self.node_recipes]
        fitted_times, time_cross = [], []
        for recipe in self.time_recipes:
            fitted, cross_block = self._build_time_kernel(recipe, t0, t1, t2)
            fitted_times.append(fitted)
            time_cross.append(cross_block)
        node_kernels = [f.kernel for f in fitted_nodes]
        time_kernels = [f.kernel for f in fitted_times]
        cross = None
        if t2 is not None:
            # Same node set on both sides: the node cross block is the
            # training Gram itself.
            cross = CrossKernels(
                node_cross=[k.gram for k in node_kernels],
                time_cross=time_cross,
                node_labels=[f.label for f in fitted_nodes],
                time_labels=[f.label for f in fitted_times],
            )
        self._last_fitted = {"node": fitted_nodes, "time": fitted_times}
        return node_kernels, time_kernels, cross

    @property
    def last_fitted(self) -> dict | None:
        """Fitted-kernel detail of the most recent window_kernels call."""
        return self._last_fitted


def resolved_manifest(fitted_info: dict) -> dict:
    """JSON-able record of every kernel's resolved parameters."""
    def pack(fitted: FittedKernel) -> dict:
        return {
            "recipe": fitted.recipe.to_dict(),
            "jitter": fitted.jitter,
            "resolved": fitted.resolved,
        }

    return {
        "node": [pack(f) for f in fitted_info["node"]],
        "time": [pack(f) for f in fitted_info["time"]],
    }
