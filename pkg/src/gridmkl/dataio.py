"""File formats shared by the library and the CLI.

All numeric matrices are stored as plain comma-separated decimal text with
17 significant digits, which makes save/load round trips exact at double
precision. JSON files are written with sorted keys and fixed separators so
identical runs produce byte-identical artifacts.
"""

from __future__ import annotations

import csv
import json
import os
from datetime import datetime, timedelta

import numpy as np

FLOAT_FMT = "%.17g"

CATEGORICAL_PREFIX = "cat:"


class InputDataError(ValueError):
    """Malformed or inconsistent input file."""


def format_float(x: float) -> str:
    return FLOAT_FMT % float(x)


def write_matrix_csv(path, mat) -> None:
    mat = np.asarray(mat, dtype=float)
    if mat.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got shape {mat.shape}")
    with open(path, "w", newline="") as fh:
        for row in mat:
            fh.write(",".join(format_float(v) for v in row))
            fh.write("\n")


def read_matrix_csv(path) -> np.ndarray:
    rows = []
    with open(path, newline="") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            try:
                rows.append([float(v) for v in line.split(",")])
            except ValueError as exc:
                raise InputDataError(f"{path}: non-numeric matrix entry ({exc})") from exc
    if not rows:
        raise InputDataError(f"{path}: empty matrix file")
    width = len(rows[0])
    if any(len(r) != width for r in rows):
        raise InputDataError(f"{path}: ragged rows in matrix file")
    return np.asarray(rows, dtype=float)


def write_json(path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, sort_keys=True, separators=(",", ":"))
        fh.write("\n")


def read_json(path):
    with open(path) as fh:
        return json.load(fh)


def parse_timestamp(text: str) -> datetime:
    try:
        ts = datetime.fromisoformat(text)
    except ValueError as exc:
        raise InputDataError(f"bad ISO-8601 timestamp {text!r}") from exc
    if ts.tzinfo is not None:
        ts = ts.replace(tzinfo=None)
    return ts


def hourly_range(start: datetime, hours: int) -> list[datetime]:
    return [start + timedelta(hours=k) for k in range(hours)]


# ---------------------------------------------------------------------------
# Price panels: first column node id, header row of ISO-8601 hourly timestamps.
# ---------------------------------------------------------------------------

def write_price_csv(path, node_ids, timestamps, prices) -> None:
    prices = np.asarray(prices, dtype=float)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["node_id"] + [ts.isoformat() for ts in timestamps])
        for nid, row in zip(node_ids, prices):
            writer.writerow([nid] + [format_float(v) for v in row])


def read_price_csv(path):
    """Return (node_ids, timestamps, prices)."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise InputDataError(f"{path}: empty price file") from None
        if len(header) < 2:
            raise InputDataError(f"{path}: price file needs at least one timestamp column")
        timestamps = [parse_timestamp(t) for t in header[1:]]
        node_ids, rows = [], []
        for line in reader:
            if not line:
                continue
            if len(line) != len(header):
                raise InputDataError(f"{path}: row for {line[0]!r} has wrong width")
            node_ids.append(line[0])
            try:
                rows.append([float(v) for v in line[1:]])
            except ValueError as exc:
                raise InputDataError(f"{path}: non-numeric price ({exc})") from exc
    if not node_ids:
        raise InputDataError(f"{path}: no price rows")
    if len(set(node_ids)) != len(node_ids):
        raise InputDataError(f"{path}: duplicate node ids")
    return node_ids, timestamps, np.asarray(rows, dtype=float)


# ---------------------------------------------------------------------------
# Feature tables: first column entity id; categorical columns carry a `cat:`
# prefix in the header and keep their raw string values.
# ---------------------------------------------------------------------------

def write_features_csv(path, table) -> None:
    header = ["entity_id"]
    header += list(table.numeric)
    header += [CATEGORICAL_PREFIX + name for name in table.categorical]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for i, eid in enumerate(table.entity_ids):
            row = [eid]
            row += [format_float(table.numeric[name][i]) for name in table.numeric]
            row += [str(table.categorical[name][i]) for name in table.categorical]
            writer.writerow(row)


def read_features_csv(path):
    """Return a FeatureTable (imported lazily to avoid a module cycle)."""
    from .kernels import FeatureTable

    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise InputDataError(f"{path}: empty feature file") from None
        if len(header) < 2:
            raise InputDataError(f"{path}: feature file needs at least one column")
        names = header[1:]
        entity_ids, rows = [], []
        for line in reader:
            if not line:
                continue
            if len(line) != len(header):
                raise InputDataError(f"{path}: row for {line[0]!r} has wrong width")
            entity_ids.append(line[0])
            rows.append(line[1:])
    if not entity_ids:
        raise InputDataError(f"{path}: no feature rows")
    numeric: dict[str, np.ndarray] = {}
    categorical: dict[str, np.ndarray] = {}
    for j, name in enumerate(names):
        col = [r[j] for r in rows]
        if name.startswith(CATEGORICAL_PREFIX):
            categorical[name[len(CATEGORICAL_PREFIX):]] = np.asarray(col, dtype=object)
        else:
            try:
                numeric[name] = np.asarray([float(v) for v in col], dtype=float)
            except ValueError as exc:
                raise InputDataError(f"{path}: non-numeric value in column {name!r} ({exc})") from exc
    return FeatureTable(entity_ids=entity_ids, numeric=numeric, categorical=categorical)


# ---------------------------------------------------------------------------
# Graphs: edge list with header `src,dst,weight`; node ids are resolved
# against the panel's node ordering so isolated nodes are kept.
# ---------------------------------------------------------------------------

def write_graph_csv(path, graph) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["src", "dst", "weight"])
        for i, j, w in graph.edges:
            writer.writerow([graph.node_ids[i], graph.node_ids[j], format_float(w)])


def read_graph_csv(path, node_ids):
    from .kernels import WeightedGraph

    index = {nid: k for k, nid in enumerate(node_ids)}
    edges = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise InputDataError(f"{path}: empty graph file") from None
        if [h.strip() for h in header] != ["src", "dst", "weight"]:
            raise InputDataError(f"{path}: graph header must be src,dst,weight")
        for line in reader:
            if not line:
                continue
            if len(line) != 3:
                raise InputDataError(f"{path}: malformed edge row {line!r}")
            src, dst, w = line
            if src not in index or dst not in index:
                missing = src if src not in index else dst
                raise InputDataError(f"{path}: edge endpoint {missing!r} is not a known node")
            try:
                weight = float(w)
            except ValueError as exc:
                raise InputDataError(f"{path}: non-numeric edge weight ({exc})") from exc
            edges.append((index[src], index[dst], weight))
    return WeightedGraph(node_ids=tuple(node_ids), edges=tuple(edges))


def ensure_dir(path) -> None:
    os.makedirs(path, exist_ok=True)
