"""
Graph data model, plain-text dataset I/O, GCN normalization and the synthetic
benchmarks (stochastic block model, preferential attachment, degree-concept
splits, orthogonal covariate shifts).
"""
import logging
from dataclasses import dataclass, replace
from pathlib import Path

import networkx as nx
import numpy as np
import scipy.sparse as sp
from scipy.stats import ortho_group

from utils.errors import DatasetFormatError, ShapeError, SplitError
from utils.kernel import make_rng

logger = logging.getLogger(__name__)

SPLIT_NAMES = ("train", "val", "test")


@dataclass(frozen=True)
class Graph:
    adj: sp.csr_matrix
    features: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        n = self.adj.shape[0]
        if self.adj.shape != (n, n):
            raise ShapeError(f"adjacency must be square, got {self.adj.shape}")
        if self.features.ndim != 2 or self.features.shape[0] != n:
            raise ShapeError(f"features must have {n} rows, got {self.features.shape}")
        if self.labels.shape != (n,):
            raise ShapeError(f"labels must have length {n}, got {self.labels.shape}")
        if n and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ShapeError(f"labels must lie in [0, {self.num_classes})")
        if self.adj.diagonal().any():
            raise ShapeError("raw adjacency must not contain self-loops")
        if not np.all(np.isfinite(self.features)):
            raise ShapeError("feature matrix contains non-finite values")

    @property
    def n(self):
        return self.adj.shape[0]

    @property
    def feature_dim(self):
        return self.features.shape[1]

    @property
    def edge_count(self):
        return self.adj.nnz // 2

    def degrees(self):
        return np.asarray(self.adj.sum(axis=1)).ravel()


@dataclass(frozen=True)
class SplitMasks:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray

    def __post_init__(self):
        masks = [np.asarray(m, dtype=bool) for m in (self.train, self.val, self.test)]
        if len({m.shape for m in masks}) != 1 or masks[0].ndim != 1:
            raise SplitError("split masks must be boolean vectors of equal length")
        for name, m in zip(SPLIT_NAMES, masks):
            if not m.any():
                raise SplitError(f"{name} split is empty")
        if (masks[0] & masks[1]).any() or (masks[0] & masks[2]).any() or (masks[1] & masks[2]).any():
            raise SplitError("split masks overlap")
        for name, m in zip(SPLIT_NAMES, masks):
            object.__setattr__(self, name, m)

    def indices(self, name):
        return np.flatnonzero(getattr(self, name))


def adjacency_from_edges(n, edges):
    """Symmetric, deduplicated, loop-free binary CSR adjacency from an (E, 2) edge array"""
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    keep = edges[:, 0] != edges[:, 1]
    if not keep.all():
        logger.warning("Dropping %d self-loop edge(s)", int((~keep).sum()))
        edges = edges[keep]
    rows = np.concatenate([edges[:, 0], edges[:, 1]])
    cols = np.concatenate([edges[:, 1], edges[:, 0]])
    adj = sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
    adj.sum_duplicates()
    adj.data[:] = 1.0
    adj.sort_indices()
    return adj


def normalize(adj):
    """
    Symmetric GCN normalization D^{-1/2}(A+I)D^{-1/2}.

    Isolated nodes end up with a single self-loop of weight 1.
    """
    n = adj.shape[0]
    with_loops = (adj + sp.identity(n, format="csr")).tocsr()
    degree = np.asarray(with_loops.sum(axis=1)).ravel()
    inv_sqrt = sp.diags(1.0 / np.sqrt(degree))
    norm_adj = (inv_sqrt @ with_loops @ inv_sqrt).tocsr()
    norm_adj.sort_indices()
    return norm_adj


def _graph_from_networkx(nx_graph, features, labels, num_classes):
    n = nx_graph.number_of_nodes()
    edges = np.array(list(nx_graph.edges()), dtype=np.int64).reshape(-1, 2)
    return Graph(adjacency_from_edges(n, edges), features, labels, num_classes)


def _class_features(labels, classes, d, mean_scale, rng):
    if d < classes:
        raise ShapeError(f"feature dimension {d} cannot hold {classes} orthogonal class means")
    means = mean_scale * np.eye(classes, d)
    return means[labels] + rng.standard_normal((len(labels), d))


def make_synthetic_sbm(n, classes, p_in, p_out, d, seed, mean_scale=1.0):
    """
    Stochastic block model with class-conditional Gaussian features.

    Parameters:
    - n: number of nodes, split into ``classes`` blocks of (nearly) equal size
    - p_in / p_out: within / between block edge probabilities, 0 ≤ p_out < p_in ≤ 1
    - d: feature dimension (≥ classes); class means are ``mean_scale`` times distinct unit vectors
    - seed: drives both the topology and the feature noise

    Returns:
    - Graph whose labels are the block memberships
    """
    if not 0.0 <= p_out < p_in <= 1.0:
        raise ValueError(f"expected 0 <= p_out < p_in <= 1, got p_in={p_in}, p_out={p_out}")
    sizes = [n // classes + (1 if c < n % classes else 0) for c in range(classes)]
    probs = [[p_in if a == b else p_out for b in range(classes)] for a in range(classes)]
    nx_graph = nx.stochastic_block_model(sizes, probs, seed=int(seed))
    labels = np.repeat(np.arange(classes), sizes)
    features = _class_features(labels, classes, d, mean_scale, make_rng(seed, "sbm-features"))
    return _graph_from_networkx(nx_graph, features, labels, classes)


def _homophilous_attachment(labels, m, homophily, rng):
    n = len(labels)
    graph = nx.star_graph(m)
    degree = np.zeros(n)
    degree[:m + 1] = [d for _, d in sorted(graph.degree())]
    for t in range(m + 1, n):
        affinity = np.where(labels[:t] == labels[t], homophily, 1.0 - homophily)
        weights = (degree[:t] + 1.0) * affinity
        if np.count_nonzero(weights) < m:
            weights = degree[:t] + 1.0
        targets = rng.choice(t, size=m, replace=False, p=weights / weights.sum())
        graph.add_edges_from((t, int(j)) for j in targets)
        degree[targets] += 1.0
        degree[t] = m
    return graph


def make_preferential_attachment(n, m, classes, d, seed, mean_scale=1.0, homophily=None):
    """
    Preferential-attachment graph (heavy-tailed degrees) with class-conditional features.

    Labels are drawn uniformly. Without ``homophily`` the topology is the
    networkx Barabási–Albert graph and ignores labels; with ``homophily`` h
    each arriving node links to m earlier nodes chosen with probability
    proportional to (degree + 1)·(h on a label match, 1 − h otherwise).
    """
    if not 1 <= m < n:
        raise ValueError(f"attachment m must lie in 1..{n - 1}, got {m}")
    rng = make_rng(seed, "pa-labels")
    labels = rng.integers(0, classes, size=n)
    if homophily is None:
        nx_graph = nx.barabasi_albert_graph(n, m, seed=int(seed))
    else:
        if not 0.0 <= homophily <= 1.0:
            raise ValueError(f"homophily must lie in [0, 1], got {homophily}")
        nx_graph = _homophilous_attachment(labels, m, homophily, make_rng(seed, "pa-topology"))
    features = _class_features(labels, classes, d, mean_scale, make_rng(seed, "pa-features"))
    return _graph_from_networkx(nx_graph, features, labels, classes)


def edge_homophily(g):
    """Fraction of undirected edges whose endpoints share a label"""
    rows, cols = sp.triu(g.adj, k=1).nonzero()
    if rows.size == 0:
        return float("nan")
    return float(np.mean(g.labels[rows] == g.labels[cols]))


def _carve_validation(train, val_fraction, rng):
    train_idx = np.flatnonzero(train)
    if len(train_idx) < 2:
        raise SplitError("training side too small to hold out a validation split")
    n_val = min(max(1, int(round(val_fraction * len(train_idx)))), len(train_idx) - 1)
    val_idx = rng.choice(train_idx, size=n_val, replace=False)
    val = np.zeros_like(train)
    val[val_idx] = True
    return train & ~val, val


def make_degree_concept_split(g, quantile, seed=0, val_fraction=0.1):
    """
    Concept shift by degree: low-degree nodes train, high-degree nodes test.

    Nodes with degree ≤ the ``quantile`` threshold form the source side; a
    seeded ``val_fraction`` of them is held out for validation.
    """
    if not 0.0 < quantile < 1.0:
        raise ValueError(f"quantile must lie in (0, 1), got {quantile}")
    degree = g.degrees()
    threshold = np.quantile(degree, quantile)
    train = degree <= threshold
    test = ~train
    if not train.any() or not test.any():
        raise SplitError(f"degree threshold {threshold:g} leaves one side of the split empty")
    train, val = _carve_validation(train, val_fraction, make_rng(seed, "degree-split"))
    return SplitMasks(train, val, test)


def make_random_split(n, train_fraction, val_fraction, seed):
    """Uniform random train/val/test split; the remainder after train and val is test"""
    order = make_rng(seed, "random-split").permutation(n)
    n_train = max(1, int(round(train_fraction * n)))
    n_val = max(1, int(round(val_fraction * n)))
    if n_train + n_val >= n:
        raise SplitError(f"fractions leave no test nodes out of {n}")
    masks = [np.zeros(n, dtype=bool) for _ in SPLIT_NAMES]
    masks[0][order[:n_train]] = True
    masks[1][order[n_train:n_train + n_val]] = True
    masks[2][order[n_train + n_val:]] = True
    return SplitMasks(*masks)


def apply_orthogonal_shift(g, seed, rotation=None, nodes=None):
    """
    Covariate shift x̃ᵢ = Q xᵢ with a Haar-distributed orthogonal Q.

    Parameters:
    - g: source graph
    - seed: drives the draw of Q
    - rotation: optional fixed Q (d×d) used instead of a random draw
    - nodes: optional node indices to shift; all nodes when omitted

    Returns:
    - (shifted graph, Q)
    """
    d = g.feature_dim
    if rotation is None:
        q = ortho_group.rvs(d, random_state=make_rng(seed, "rotation")) if d > 1 else np.ones((1, 1))
    else:
        q = np.asarray(rotation, dtype=np.float64)
        if q.shape != (d, d):
            raise ShapeError(f"rotation must be {d}×{d}, got {q.shape}")
    features = g.features.copy()
    rows = slice(None) if nodes is None else np.asarray(nodes, dtype=np.int64)
    features[rows] = g.features[rows] @ q.T
    return replace(g, features=features), q


def save_dataset(g, masks, directory):
    """
    Write ``edges.txt``, ``features.txt``, ``labels.txt`` and ``splits.txt``.

    Returns the four paths in load order.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = [directory / name for name in ("edges.txt", "features.txt", "labels.txt", "splits.txt")]

    upper = sp.triu(g.adj, k=1).tocoo()
    order = np.lexsort((upper.col, upper.row))
    with open(paths[0], "w", encoding="utf-8") as f:
        f.write("# undirected edge list, 0-based\n")
        for i, j in zip(upper.row[order], upper.col[order]):
            f.write(f"{i} {j}\n")

    with open(paths[1], "w", encoding="utf-8") as f:
        f.write(f"{g.n} {g.feature_dim}\n")
        for row in g.features:
            f.write(" ".join(repr(float(v)) for v in row) + "\n")

    with open(paths[2], "w", encoding="utf-8") as f:
        for label in g.labels:
            f.write(f"{int(label)}\n")

    with open(paths[3], "w", encoding="utf-8") as f:
        for name in SPLIT_NAMES:
            f.write(f"{name}: " + " ".join(str(i) for i in masks.indices(name)) + "\n")
    return paths


def _read_lines(path):
    try:
        with open(path, "r", encoding="utf-8") as f:
            return f.read().splitlines()
    except FileNotFoundError:
        raise DatasetFormatError(path, 0, "file not found")


def _parse_int(path, line_no, token):
    try:
        return int(token)
    except ValueError:
        raise DatasetFormatError(path, line_no, f"expected an integer, got {token!r}")


def _check_index(path, line_no, index, n):
    if not 0 <= index < n:
        raise DatasetFormatError(path, line_no, f"node index {index} out of range [0, {n})")
    return index


def load_dataset(edge_file, feature_file, label_file, split_file):
    """
    Read a graph and its split from the four plain-text files.

    Returns:
    - (Graph, SplitMasks); duplicate and reversed edges are merged
    """
    lines = _read_lines(feature_file)
    if not lines:
        raise DatasetFormatError(feature_file, 1, "missing 'N d' header")
    header = lines[0].split()
    if len(header) != 2:
        raise DatasetFormatError(feature_file, 1, "header must be 'N d'")
    n, d = (_parse_int(feature_file, 1, t) for t in header)
    if len(lines) - 1 < n:
        raise DatasetFormatError(feature_file, len(lines), f"expected {n} feature rows, found {len(lines) - 1}")
    features = np.empty((n, d))
    for i in range(n):
        tokens = lines[i + 1].split()
        if len(tokens) != d:
            raise DatasetFormatError(feature_file, i + 2, f"expected {d} values, found {len(tokens)}")
        try:
            features[i] = [float(t) for t in tokens]
        except ValueError as e:
            raise DatasetFormatError(feature_file, i + 2, str(e))
        if not np.all(np.isfinite(features[i])):
            raise DatasetFormatError(feature_file, i + 2, "non-finite feature value")

    edges = []
    for line_no, line in enumerate(_read_lines(edge_file), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        tokens = stripped.split()
        if len(tokens) != 2:
            raise DatasetFormatError(edge_file, line_no, "expected two node indices")
        i, j = (_check_index(edge_file, line_no, _parse_int(edge_file, line_no, t), n) for t in tokens)
        edges.append((i, j))

    label_lines = _read_lines(label_file)
    labels = np.empty(n, dtype=np.int64)
    for i in range(n):
        if i >= len(label_lines) or not label_lines[i].strip():
            raise DatasetFormatError(label_file, i + 1, f"expected {n} labels")
        labels[i] = _parse_int(label_file, i + 1, label_lines[i].strip())
        if labels[i] < 0:
            raise DatasetFormatError(label_file, i + 1, "labels must be non-negative")

    masks = {}
    for line_no, line in enumerate(_read_lines(split_file), start=1):
        if not line.strip():
            continue
        name, sep, rest = line.partition(":")
        name = name.strip()
        if not sep or name not in SPLIT_NAMES:
            raise DatasetFormatError(split_file, line_no, f"expected one of {', '.join(SPLIT_NAMES)} followed by ':'")
        mask = np.zeros(n, dtype=bool)
        for token in rest.split():
            mask[_check_index(split_file, line_no, _parse_int(split_file, line_no, token), n)] = True
        masks[name] = mask
    missing = [name for name in SPLIT_NAMES if name not in masks]
    if missing:
        raise DatasetFormatError(split_file, 0, f"missing split line(s): {', '.join(missing)}")

    num_classes = int(labels.max()) + 1 if n else 0
    graph = Graph(adjacency_from_edges(n, edges), features, labels, num_classes)
    logger.info("Loaded graph with %d nodes, %d edges, %d classes", graph.n, graph.edge_count, num_classes)
    return graph, SplitMasks(masks["train"], masks["val"], masks["test"])


def describe_split(g, masks):
    """Per-split node counts and mean degree, used in logs and the split command"""
    degree = g.degrees()
    return {
        name: {"nodes": int(getattr(masks, name).sum()),
               "mean_degree": float(degree[getattr(masks, name)].mean())}
        for name in SPLIT_NAMES
    }


def expected_modularity(g):
    """Modularity of the label partition (networkx), a sanity check on block structure"""
    nx_graph = nx.from_scipy_sparse_array(g.adj)
    communities = [set(np.flatnonzero(g.labels == c).tolist()) for c in range(g.num_classes)]
    communities = [c for c in communities if c]
    return float(nx.community.modularity(nx_graph, communities))
