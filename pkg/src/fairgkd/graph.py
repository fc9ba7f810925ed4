"""Graph container, file ingestion, partial-data views and a biased SBM generator."""

from __future__ import annotations

import csv
import enum
import json
import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import scipy.sparse as sp

LABEL_UNKNOWN = -1


class DataError(ValueError):
    """Malformed or inconsistent dataset input."""


# ---------------------------------------------------------------------------
# containers


@dataclass(frozen=True, eq=False)
class Graph:
    """Undirected attributed graph with binary labels and sensitive attributes.

    ``attributes`` holds every feature column named in ``feature_names``,
    including a sensitive column when the raw data carries one; views decide
    whether it reaches a model.
    """

    adjacency: sp.csr_matrix
    attributes: np.ndarray
    feature_names: tuple[str, ...]
    sensitive: Mapping[str, np.ndarray]
    labels: np.ndarray
    splits: Mapping[str, np.ndarray]
    name: str = "graph"
    node_ids: tuple | None = None

    def __post_init__(self):
        n = self.adjacency.shape[0]
        a = self.adjacency
        if a.shape != (n, n):
            raise DataError(f"adjacency must be square, got {a.shape}")
        if a.diagonal().any():
            raise DataError("adjacency must have a zero diagonal")
        if (a != a.T).nnz:
            raise DataError("adjacency must be symmetric")
        if self.attributes.shape[0] != n:
            raise DataError("attribute rows != number of nodes")
        if self.attributes.shape[1] != len(self.feature_names):
            raise DataError("attribute columns != number of feature names")
        if self.labels.shape != (n,):
            raise DataError("label vector length != number of nodes")
        if not np.isin(self.labels, (0, 1, LABEL_UNKNOWN)).all():
            raise DataError("labels must be 0, 1 or unknown")
        for key, s in self.sensitive.items():
            if s.shape != (n,):
                raise DataError(f"sensitive attribute {key!r} has wrong length")
            if not np.isin(s, (0, 1)).all():
                raise DataError(f"sensitive attribute {key!r} is not binary")
        seen = np.zeros(n, dtype=bool)
        for key, idx in self.splits.items():
            if idx.size and (idx.min() < 0 or idx.max() >= n):
                raise DataError(f"split {key!r} indexes outside [0, n)")
            if seen[idx].any() or np.unique(idx).size != idx.size:
                raise DataError("splits must be pairwise disjoint")
            seen[idx] = True
        for arr in (self.attributes, self.labels, *self.sensitive.values(), *self.splits.values()):
            arr.setflags(write=False)

    @property
    def num_nodes(self) -> int:
        return self.adjacency.shape[0]

    @property
    def num_edges(self) -> int:
        return self.adjacency.nnz // 2

    @property
    def num_features(self) -> int:
        return self.attributes.shape[1]

    @property
    def default_sensitive(self) -> str:
        return next(iter(self.sensitive))

    def edge_list(self) -> np.ndarray:
        """Undirected edges as an ``m x 2`` array with ``u < v``, sorted."""
        coo = sp.triu(self.adjacency, k=1).tocoo()
        order = np.lexsort((coo.col, coo.row))
        return np.stack([coo.row[order], coo.col[order]], axis=1).astype(np.int64)

    def summary(self) -> dict:
        labeled = self.labels != LABEL_UNKNOWN
        out = {
            "name": self.name,
            "nodes": self.num_nodes,
            "edges": self.num_edges,
            "features": self.num_features,
            "labeled": int(labeled.sum()),
            "positive_rate": float(self.labels[labeled].mean()) if labeled.any() else None,
            "groups": {k: [int((s == 0).sum()), int((s == 1).sum())] for k, s in self.sensitive.items()},
            "splits": {k: int(v.size) for k, v in self.splits.items()},
        }
        return out


class ViewKind(str, enum.Enum):
    FULL = "full"
    NODES_ONLY = "nodes-only"
    TOPOLOGY_ONLY = "topology-only"


@dataclass(frozen=True, eq=False)
class GraphView:
    """A partial (or full) reading of a :class:`Graph` as model input."""

    kind: ViewKind
    source: Graph
    sensitive_column: str | None = None
    with_sensitive: bool = False
    standardize: bool = False
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def num_nodes(self) -> int:
        return self.source.num_nodes

    def _stripped(self) -> np.ndarray:
        g = self.source
        x = g.attributes
        if not self.with_sensitive and self.sensitive_column in g.feature_names:
            keep = [i for i, c in enumerate(g.feature_names) if c != self.sensitive_column]
            x = x[:, keep]
        x = np.array(x, dtype=np.float64)
        if self.standardize and x.size:
            mu = x.mean(axis=0)
            sd = x.std(axis=0)
            sd[sd == 0] = 1.0
            x = (x - mu) / sd
        return x

    @property
    def attributes(self) -> np.ndarray:
        if "x" not in self._cache:
            if self.kind is ViewKind.TOPOLOGY_ONLY:
                x = np.ones((self.num_nodes, self.source.num_features))
            else:
                x = self._stripped()
            x.setflags(write=False)
            self._cache["x"] = x
        return self._cache["x"]

    @property
    def adjacency(self) -> sp.csr_matrix:
        """Raw (unnormalized) adjacency seen by this view."""
        if self.kind is ViewKind.NODES_ONLY:
            return sp.identity(self.num_nodes, format="csr")
        return self.source.adjacency

    @property
    def normalized_adjacency(self) -> sp.csr_matrix:
        if "a_hat" not in self._cache:
            if self.kind is ViewKind.NODES_ONLY:
                self._cache["a_hat"] = sp.identity(self.num_nodes, format="csr")
            else:
                self._cache["a_hat"] = normalize_adjacency(self.source.adjacency)
        return self._cache["a_hat"]

    @property
    def gin_adjacency(self) -> sp.csr_matrix:
        """Neighbour-sum operator for GIN; no neighbours under NODES_ONLY."""
        if self.kind is ViewKind.NODES_ONLY:
            return sp.csr_matrix((self.num_nodes, self.num_nodes))
        return self.source.adjacency


def make_view(
    g: Graph,
    kind: ViewKind | str,
    sensitive_column: str | None = None,
    *,
    with_sensitive: bool = False,
    standardize: bool = False,
) -> GraphView:
    try:
        kind = ViewKind(kind)
    except ValueError:
        raise ValueError(f"unknown view kind {kind!r}") from None
    if sensitive_column is None:
        sensitive_column = g.default_sensitive if g.sensitive else None
    elif sensitive_column not in g.sensitive and sensitive_column not in g.feature_names:
        raise KeyError(f"unknown sensitive column {sensitive_column!r}")
    return GraphView(kind, g, sensitive_column, with_sensitive, standardize)


def normalize_adjacency(adj) -> sp.csr_matrix:
    """Symmetric GCN normalization ``D^-1/2 (A + I) D^-1/2``."""
    if isinstance(adj, Graph):
        adj = adj.adjacency
    n = adj.shape[0]
    a = (sp.csr_matrix(adj, dtype=np.float64) + sp.identity(n, format="csr")).tocoo()
    deg = np.bincount(a.row, weights=a.data, minlength=n)
    # one rounding per entry: a_ij / sqrt(d_i d_j)
    data = a.data / np.sqrt(deg[a.row] * deg[a.col])
    out = sp.csr_matrix((data, (a.row, a.col)), shape=(n, n))
    out.sort_indices()
    return out


def adjacency_from_edges(n: int, edges: np.ndarray) -> sp.csr_matrix:
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    edges = edges[edges[:, 0] != edges[:, 1]]
    rows = np.concatenate([edges[:, 0], edges[:, 1]])
    cols = np.concatenate([edges[:, 1], edges[:, 0]])
    a = sp.csr_matrix((np.ones(rows.size), (rows, cols)), shape=(n, n))
    a.sum_duplicates()
    a.data[:] = 1.0
    a.sort_indices()
    return a


def split_nodes(
    labels: np.ndarray, ratios: Sequence[float] = (0.5, 0.25, 0.25), seed: int = 0
) -> dict[str, np.ndarray]:
    """Seeded random train/val/test split over labeled nodes."""
    if len(ratios) != 3 or min(ratios) < 0 or sum(ratios) > 1 + 1e-9:
        raise ValueError(f"bad split ratios {ratios}")
    labeled = np.flatnonzero(np.asarray(labels) != LABEL_UNKNOWN)
    perm = np.random.default_rng(seed).permutation(labeled)
    k = labeled.size
    n_train = int(math.floor(ratios[0] * k))
    n_val = int(math.floor(ratios[1] * k))
    n_test = min(int(math.floor(ratios[2] * k)), k - n_train - n_val)
    return {
        "train": np.sort(perm[:n_train]),
        "val": np.sort(perm[n_train:n_train + n_val]),
        "test": np.sort(perm[n_train + n_val:n_train + n_val + n_test]),
    }


# ---------------------------------------------------------------------------
# file formats


@dataclass
class DatasetMeta:
    """Descriptor for a two-file dataset (edge list + attribute table).

    ``sensitive`` maps column name to an optional threshold; with a threshold
    the attribute is ``value >= threshold`` (e.g. age at 25), otherwise the
    column must already be 0/1. The first entry is the default sensitive
    attribute.
    """

    name: str
    label_column: str
    sensitive: dict[str, float | None]
    drop_columns: list[str] = field(default_factory=list)
    id_column: str | None = None
    label_threshold: float | None = None
    delimiter: str = ","
    split_ratios: tuple[float, float, float] = (0.5, 0.25, 0.25)
    split_seed: int = 0

    @classmethod
    def from_dict(cls, d: Mapping) -> "DatasetMeta":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise DataError(f"unknown dataset meta keys: {sorted(unknown)}")
        d = dict(d)
        sens = d.get("sensitive")
        if isinstance(sens, str):
            d["sensitive"] = {sens: None}
        elif isinstance(sens, list):
            d["sensitive"] = {s: None for s in sens}
        if "split_ratios" in d:
            d["split_ratios"] = tuple(d["split_ratios"])
        try:
            return cls(**d)
        except TypeError as exc:
            raise DataError(f"incomplete dataset meta: {exc}") from None

    @classmethod
    def load(cls, path: str | Path) -> "DatasetMeta":
        return cls.from_dict(_read_structured(path))

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["split_ratios"] = list(self.split_ratios)
        return d


def _read_structured(path: str | Path) -> dict:
    path = Path(path)
    text = path.read_text()
    if path.suffix in (".yaml", ".yml"):
        import yaml

        return yaml.safe_load(text) or {}
    return json.loads(text)


def _node_id(token: str) -> int:
    try:
        return int(token)
    except ValueError:
        value = float(token)  # some releases write ids as "12.0"
        if not value.is_integer():
            raise
        return int(value)


def read_edge_file(path: str | Path) -> list[tuple[int, int, int]]:
    """Parse ``u v`` pairs (whitespace or comma separated, '#' comments).

    Returns ``(u, v, line_number)`` triples.
    """
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.replace(",", " ").split()
            if len(parts) != 2:
                raise DataError(f"{path}:{lineno}: expected two node ids, got {line!r}")
            try:
                u, v = _node_id(parts[0]), _node_id(parts[1])
            except ValueError:
                raise DataError(f"{path}:{lineno}: non-integer node id in {line!r}") from None
            out.append((u, v, lineno))
    return out


def _binarize(values: np.ndarray, threshold: float | None, what: str) -> np.ndarray:
    if threshold is not None:
        return (values >= threshold).astype(np.int64)
    if not np.isin(values, (0, 1)).all():
        bad = values[~np.isin(values, (0, 1))][0]
        raise DataError(f"{what} has non-binary value {bad!r}")
    return values.astype(np.int64)


def load_dataset(edge_file: str | Path, attribute_file: str | Path, meta: DatasetMeta) -> Graph:
    import pandas as pd

    try:
        table = pd.read_csv(attribute_file, sep=meta.delimiter, float_precision="round_trip")
    except Exception as exc:  # pandas raises a zoo of parser errors
        raise DataError(f"{attribute_file}: {exc}") from None
    needed = [meta.label_column, *meta.sensitive, *meta.drop_columns]
    if meta.id_column:
        needed.append(meta.id_column)
    for col in needed:
        if col not in table.columns:
            raise DataError(f"{attribute_file}: missing column {col!r}")
    n = len(table)

    if meta.id_column:
        ids = table[meta.id_column].to_numpy()
        dup = pd.Series(ids).duplicated()
        if dup.any():
            row = int(np.flatnonzero(dup.to_numpy())[0])
            raise DataError(f"{attribute_file}:{row + 2}: duplicate node id {ids[row]!r}")
        index_of = {int(v): i for i, v in enumerate(ids)}
        node_ids = tuple(int(v) for v in ids)
    else:
        index_of = None
        node_ids = None

    raw_labels = table[meta.label_column].to_numpy(dtype=np.float64)
    unknown = np.isnan(raw_labels) | (raw_labels < 0)
    labels = np.full(n, LABEL_UNKNOWN, dtype=np.int64)
    labels[~unknown] = _binarize(raw_labels[~unknown], meta.label_threshold, "label column")

    sensitive = {}
    for col, thr in meta.sensitive.items():
        vals = table[col].to_numpy(dtype=np.float64)
        if np.isnan(vals).any():
            raise DataError(f"sensitive column {col!r} has missing values")
        sensitive[col] = _binarize(vals, thr, f"sensitive column {col!r}")

    excluded = {meta.label_column, *meta.drop_columns}
    if meta.id_column:
        excluded.add(meta.id_column)
    feature_names = tuple(c for c in table.columns if c not in excluded)
    try:
        attributes = table[list(feature_names)].to_numpy(dtype=np.float64)
    except ValueError as exc:
        raise DataError(f"{attribute_file}: non-numeric feature column ({exc})") from None
    if np.isnan(attributes).any():
        raise DataError(f"{attribute_file}: missing feature values")

    pairs = []
    for u, v, lineno in read_edge_file(edge_file):
        if index_of is not None:
            if u not in index_of or v not in index_of:
                raise DataError(f"{edge_file}:{lineno}: dangling node id in edge ({u}, {v})")
            u, v = index_of[u], index_of[v]
        elif not (0 <= u < n and 0 <= v < n):
            raise DataError(f"{edge_file}:{lineno}: dangling node id in edge ({u}, {v})")
        pairs.append((u, v))
    adjacency = adjacency_from_edges(n, np.array(pairs, dtype=np.int64).reshape(-1, 2))

    return Graph(
        adjacency=adjacency,
        attributes=attributes,
        feature_names=feature_names,
        sensitive=sensitive,
        labels=labels,
        splits=split_nodes(labels, meta.split_ratios, meta.split_seed),
        name=meta.name,
        node_ids=node_ids,
    )


def load_dataset_dir(directory: str | Path, meta_name: str = "meta.json") -> Graph:
    """Load ``edges.txt`` / ``attributes.csv`` / meta from one directory."""
    directory = Path(directory)
    meta = DatasetMeta.load(directory / meta_name)
    return load_dataset(directory / "edges.txt", directory / "attributes.csv", meta)


def write_node_mapping(g: Graph, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["original_id", "index"])
        ids = g.node_ids if g.node_ids is not None else range(g.num_nodes)
        for i, orig in enumerate(ids):
            w.writerow([orig, i])


def write_dataset(g: Graph, directory: str | Path, meta: DatasetMeta) -> dict[str, Path]:
    """Write ``g`` in the two-file format plus its meta descriptor."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    edges_path = directory / "edges.txt"
    attr_path = directory / "attributes.csv"
    meta_path = directory / "meta.json"

    with open(edges_path, "w") as fh:
        fh.write(f"# {g.name}: {g.num_nodes} nodes, {g.num_edges} undirected edges\n")
        for u, v in g.edge_list():
            fh.write(f"{u} {v}\n")

    cols = list(g.feature_names)
    extra_sens = [k for k in g.sensitive if k not in cols]
    with open(attr_path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter=meta.delimiter)
        w.writerow(cols + extra_sens + [meta.label_column])
        for i in range(g.num_nodes):
            row = [repr(float(v)) for v in g.attributes[i]]
            row += [int(g.sensitive[k][i]) for k in extra_sens]
            row.append(int(g.labels[i]))
            w.writerow(row)

    meta_path.write_text(json.dumps(meta.to_dict(), indent=2, sort_keys=True) + "\n")
    return {"edges": edges_path, "attributes": attr_path, "meta": meta_path}


# ---------------------------------------------------------------------------
# synthetic biased graphs


@dataclass
class SynthConfig:
    """Parameters of the planted-bias generator.

    Nodes get a binary sensitive attribute. Edges follow a degree-corrected
    block model: a pair in the same sensitive group is linked with total
    probability mass ``homophily`` of all edges, pairs sharing a label are
    favoured by ``label_homophily``. ``num_proxy`` columns correlate with the
    sensitive attribute at ``proxy_corr``. Labels threshold a linear signal on
    ``num_signal`` columns plus ``group_offset`` times the (+-1) group.
    """

    num_nodes: int = 2000
    homophily: float = 0.9
    proxy_corr: float = 0.6
    num_proxy: int = 2
    num_signal: int = 3
    num_noise: int = 2
    signal: float = 1.0
    group_offset: float = 0.3
    label_noise: float = 0.5
    label_homophily: float = 0.7
    avg_degree: float = 8.0
    degree_signal: float = 0.3
    sensitive_rate: float = 0.5
    include_sensitive_column: bool = True
    split_ratios: tuple[float, float, float] = (0.5, 0.25, 0.25)

    def validate(self) -> None:
        if self.num_nodes < 2:
            raise ValueError("num_nodes must be >= 2")
        if not 0.5 <= self.homophily < 1:
            raise ValueError("homophily must lie in [0.5, 1)")
        if not 0 <= self.proxy_corr <= 1:
            raise ValueError("proxy_corr must lie in [0, 1]")
        if not 0 < self.label_homophily < 1:
            raise ValueError("label_homophily must lie in (0, 1)")
        if not 0 < self.sensitive_rate < 1:
            raise ValueError("sensitive_rate must lie in (0, 1)")
        if self.avg_degree <= 0 or self.avg_degree >= self.num_nodes - 1:
            raise ValueError("avg_degree must lie in (0, n-1)")
        if min(self.num_proxy, self.num_signal, self.num_noise) < 0 or self.num_signal < 1:
            raise ValueError("column counts must be non-negative with num_signal >= 1")
        if self.label_noise < 0:
            raise ValueError("label_noise must be non-negative")

    @classmethod
    def from_dict(cls, d: Mapping) -> "SynthConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown synthetic config keys: {sorted(unknown)}")
        d = dict(d)
        if "split_ratios" in d:
            d["split_ratios"] = tuple(d["split_ratios"])
        return cls(**d)

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["split_ratios"] = list(self.split_ratios)
        return d


def _pair_mass(cls: np.ndarray, theta: np.ndarray, k: int) -> np.ndarray:
    """Sum of theta_i * theta_j over unordered pairs i<j, per class pair."""
    tot = np.bincount(cls, weights=theta, minlength=k)
    sq = np.bincount(cls, weights=theta * theta, minlength=k)
    mass = np.outer(tot, tot)
    mass[np.diag_indices(k)] = (tot * tot - sq) / 2.0
    return mass


def generate_synthetic(params: SynthConfig, seed: int) -> Graph:
    params.validate()
    rng = np.random.default_rng(seed)
    n = params.num_nodes

    s = (rng.random(n) < params.sensitive_rate).astype(np.int64)
    sign = 2.0 * s - 1.0

    proxy = params.proxy_corr * sign[:, None] + math.sqrt(1 - params.proxy_corr ** 2) * rng.standard_normal(
        (n, params.num_proxy)
    )
    signal_x = rng.standard_normal((n, params.num_signal))
    noise_x = rng.standard_normal((n, params.num_noise))

    w = rng.standard_normal(params.num_signal)
    w /= np.linalg.norm(w)
    score = signal_x @ w  # unit variance
    latent = params.signal * score + params.group_offset * sign + params.label_noise * rng.standard_normal(n)
    y = (latent > 0).astype(np.int64)

    theta = np.exp(params.degree_signal * score)
    theta /= theta.mean()

    # pair classes: (s, y) -> 4 classes; edge prob = c[same_s] * wy[same_y] * theta_i * theta_j
    cls = 2 * s + y
    mass = _pair_mass(cls, theta, 4)
    cs, cy = np.arange(4) // 2, np.arange(4) % 2
    same_s = cs[:, None] == cs[None, :]
    wy = np.where(cy[:, None] == cy[None, :], params.label_homophily, 1 - params.label_homophily)
    upper = np.triu(np.ones((4, 4), dtype=bool))
    expected_edges = n * params.avg_degree / 2.0
    mass_same = (mass * wy)[same_s & upper].sum()
    mass_diff = (mass * wy)[~same_s & upper].sum()
    if mass_same <= 0 or mass_diff <= 0:
        raise ValueError("both sensitive groups need at least two nodes")
    c_same = params.homophily * expected_edges / mass_same
    c_diff = (1 - params.homophily) * expected_edges / mass_diff
    block = np.where(same_s, c_same, c_diff) * wy
    pmax = block.max() * theta.max() ** 2
    if pmax > 1:
        raise ValueError(f"edge probability {pmax:.3f} exceeds 1; lower avg_degree or degree_signal")

    rows, cols = [], []
    for i in range(n - 1):
        j = np.arange(i + 1, n)
        p = block[cls[i], cls[j]] * theta[i] * theta[j]
        hit = j[rng.random(j.size) < p]
        rows.append(np.full(hit.size, i))
        cols.append(hit)
    edges = np.stack([np.concatenate(rows), np.concatenate(cols)], axis=1)
    adjacency = adjacency_from_edges(n, edges)

    blocks, names = [], []
    if params.include_sensitive_column:
        blocks.append(s[:, None].astype(np.float64))
        names.append("sens")
    blocks += [proxy, signal_x, noise_x]
    names += [f"proxy_{i}" for i in range(params.num_proxy)]
    names += [f"signal_{i}" for i in range(params.num_signal)]
    names += [f"noise_{i}" for i in range(params.num_noise)]

    return Graph(
        adjacency=adjacency,
        attributes=np.concatenate(blocks, axis=1),
        feature_names=tuple(names),
        sensitive={"sens": s},
        labels=y,
        splits=split_nodes(y, params.split_ratios, seed),
        name=f"synthetic-{seed}",
    )


def synthetic_meta(params: SynthConfig, seed: int) -> DatasetMeta:
    return DatasetMeta(
        name=f"synthetic-{seed}",
        label_column="label",
        sensitive={"sens": None},
        split_ratios=tuple(params.split_ratios),
        split_seed=seed,
    )


def intra_group_fraction(g: Graph, attribute: str | None = None) -> float:
    s = g.sensitive[attribute or g.default_sensitive]
    e = g.edge_list()
    if not len(e):
        return float("nan")
    return float(np.mean(s[e[:, 0]] == s[e[:, 1]]))
