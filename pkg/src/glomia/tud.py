"""Reader and writer for the TUDataset flat-file graph classification layout.

A corpus ``NAME`` lives in one directory::

    NAME_A.txt                 one edge per line, "i, j" (1-based global node ids)
    NAME_graph_indicator.txt   line k = graph id of node k
    NAME_graph_labels.txt      line g = class label of graph g
    NAME_node_labels.txt       optional, line k = integer label of node k
    NAME_node_attributes.txt   optional, line k = comma-separated reals

Edge labels and edge attributes are ignored.
"""
from __future__ import annotations

import enum
import logging
import os
import re
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import (
    CrossGraphEdge,
    EmptyCorpus,
    FeatureSourceMissing,
    FileMissing,
    ParseError,
    RowCountMismatch,
)

logger = logging.getLogger(__name__)


class FeatureMode(str, enum.Enum):
    ATTRIBUTES_ONLY = "attributes_only"
    ONEHOT_NODE_LABELS = "onehot_node_labels"
    CONCAT = "concat_attributes_and_onehot"


DEFAULT_FEATURE_MODES = {
    "DD": FeatureMode.ONEHOT_NODE_LABELS,
    "ENZYMES": FeatureMode.ATTRIBUTES_ONLY,
    "PROTEINS_full": FeatureMode.ATTRIBUTES_ONLY,
}


def default_feature_mode(name: str) -> FeatureMode:
    return DEFAULT_FEATURE_MODES.get(name, FeatureMode.ONEHOT_NODE_LABELS)


@dataclass(frozen=True, eq=False)
class Graph:
    """One undirected attributed graph.

    ``edges`` is an ``(m, 2)`` int64 array of unordered pairs stored as
    ``i < j``, sorted lexicographically. ``features`` is ``(n, d)`` float64.
    Both arrays are read-only.
    """

    node_count: int
    edges: np.ndarray
    features: np.ndarray
    label: int
    source_id: int = 0

    def __post_init__(self):
        edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        feats = np.asarray(self.features, dtype=np.float64)
        if feats.ndim != 2 or feats.shape[0] != self.node_count:
            raise RowCountMismatch(
                f"graph {self.source_id}: features {feats.shape} for {self.node_count} nodes"
            )
        if self.node_count < 1:
            raise ParseError(f"graph {self.source_id}: node_count must be positive")
        if len(edges):
            if edges.min() < 0 or edges.max() >= self.node_count:
                raise ParseError(f"graph {self.source_id}: edge endpoint out of range")
            if np.any(edges[:, 0] >= edges[:, 1]):
                raise ParseError(f"graph {self.source_id}: edges must be stored as i < j")
            order = np.lexsort((edges[:, 1], edges[:, 0]))
            edges = edges[order]
            if np.any(np.all(edges[1:] == edges[:-1], axis=1)):
                raise ParseError(f"graph {self.source_id}: duplicate edge")
        edges.flags.writeable = False
        if feats.flags.writeable:
            feats = feats.copy()
            feats.flags.writeable = False
        object.__setattr__(self, "edges", edges)
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "label", int(self.label))

    @classmethod
    def from_edge_list(cls, node_count, pairs, features, label, source_id=0) -> "Graph":
        """Build from any iterable of pairs; direction, duplicates and self loops are normalised away."""
        arr = np.asarray(list(pairs), dtype=np.int64).reshape(-1, 2)
        arr = arr[arr[:, 0] != arr[:, 1]]
        arr = np.sort(arr, axis=1)
        arr = np.unique(arr, axis=0) if len(arr) else arr
        return cls(node_count, arr, features, label, source_id)

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    @property
    def edge_count(self) -> int:
        return len(self.edges)

    def with_features(self, features: np.ndarray) -> "Graph":
        return Graph(self.node_count, self.edges, features, self.label, self.source_id)

    def same_as(self, other: "Graph") -> bool:
        return (
            self.node_count == other.node_count
            and self.label == other.label
            and self.source_id == other.source_id
            and np.array_equal(self.edges, other.edges)
            and np.array_equal(self.features, other.features)
        )


@dataclass(frozen=True)
class Corpus:
    name: str
    graphs: tuple
    class_count: int
    feature_mode: FeatureMode
    node_label_alphabet: tuple = field(default=())
    class_values: tuple = field(default=())

    def __len__(self):
        return len(self.graphs)

    @property
    def feature_dim(self) -> int:
        return self.graphs[0].feature_dim if self.graphs else 0

    def labels(self) -> np.ndarray:
        return np.array([g.label for g in self.graphs], dtype=np.int64)

    def subset(self, indices: Sequence[int]) -> list:
        return [self.graphs[i] for i in indices]

    def same_as(self, other: "Corpus") -> bool:
        return (
            self.name == other.name
            and self.class_count == other.class_count
            and self.feature_mode == other.feature_mode
            and len(self) == len(other)
            and all(a.same_as(b) for a, b in zip(self.graphs, other.graphs))
        )


@dataclass(frozen=True)
class CorpusStats:
    graph_count: int
    class_count: int
    avg_nodes: float
    avg_edges: float

    def rounded(self, ndigits: int = 2) -> dict:
        return {
            "graph_count": self.graph_count,
            "class_count": self.class_count,
            "avg_nodes": round(self.avg_nodes, ndigits),
            "avg_edges": round(self.avg_edges, ndigits),
        }


# ---------------------------------------------------------------------------
# line readers

_INT_LINE = re.compile(r"\s*([+-]?\d+)\s*")
_PAIR_LINE = re.compile(r"\s*(\d+)\s*,\s*(\d+)\s*")
_FLOAT = r"\s*[+-]?(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?\s*"
_FLOAT_ROW = re.compile(rf"{_FLOAT}(?:,{_FLOAT})*")


def _lines(path: str) -> list:
    with open(path, "r", encoding="utf-8") as fh:
        return _strip_trailing(fh.read().splitlines())


def _bad_line(path, lineno, line):
    return ParseError(f"{path}:{lineno}: malformed line {line!r}")


# whole-file patterns: one well-formed record per line (no trailing blank lines)
_INT_FILE = re.compile(r"(?:[ \t]*[+-]?\d+[ \t]*(?:\n|\Z))*")
_PAIR_FILE = re.compile(r"(?:[ \t]*\d+[ \t]*,[ \t]*\d+[ \t]*(?:\n|\Z))*")


def _body(path: str) -> str:
    """File text with trailing blank lines and line-end variants normalised away."""
    with open(path, "r", encoding="utf-8") as fh:
        text = fh.read().replace("\r\n", "\n")
    return "\n".join(_strip_trailing(text.split("\n")))


def _strip_trailing(lines: list) -> list:
    while lines and not lines[-1].strip():
        lines.pop()
    return lines


def _read_ints(path: str) -> np.ndarray:
    text = _body(path)
    if _INT_FILE.fullmatch(text):
        return np.array(text.split(), dtype=np.int64)
    for k, line in enumerate(text.split("\n")):
        if _INT_LINE.fullmatch(line) is None:
            raise _bad_line(path, k + 1, line)
    raise ParseError(f"{path}: malformed file")


def _read_pairs(path: str) -> np.ndarray:
    text = _body(path)
    if _PAIR_FILE.fullmatch(text):
        return np.array(text.replace(",", " ").split(), dtype=np.int64).reshape(-1, 2)
    for k, line in enumerate(text.split("\n")):
        if _PAIR_LINE.fullmatch(line) is None:
            raise _bad_line(path, k + 1, line)
    raise ParseError(f"{path}: malformed file")


def _read_float_rows(path: str) -> np.ndarray:
    lines = _lines(path)
    rows = []
    width = None
    match = _FLOAT_ROW.fullmatch
    for k, line in enumerate(lines):
        if match(line) is None:
            raise _bad_line(path, k + 1, line)
        row = [float(tok) for tok in line.split(",")]
        if width is None:
            width = len(row)
        elif len(row) != width:
            raise RowCountMismatch(f"{path}:{k + 1}: expected {width} values, got {len(row)}")
        rows.append(row)
    return np.array(rows, dtype=np.float64).reshape(len(rows), width or 0)


# ---------------------------------------------------------------------------
# features


def build_features(
    raw_labels: Optional[np.ndarray],
    raw_attrs: Optional[np.ndarray],
    mode,
    alphabet: Optional[Sequence[int]] = None,
) -> np.ndarray:
    """Node feature matrix from node labels and/or attributes.

    One-hot columns follow ``alphabet`` (default: sorted distinct values of
    ``raw_labels``); in concat mode they come first, attributes after.
    """
    mode = FeatureMode(mode)
    need_labels = mode in (FeatureMode.ONEHOT_NODE_LABELS, FeatureMode.CONCAT)
    need_attrs = mode in (FeatureMode.ATTRIBUTES_ONLY, FeatureMode.CONCAT)
    if need_labels and raw_labels is None:
        raise FeatureSourceMissing(f"{mode.value} needs node labels")
    if need_attrs and raw_attrs is None:
        raise FeatureSourceMissing(f"{mode.value} needs node attributes")

    parts = []
    if need_labels:
        labels = np.asarray(raw_labels, dtype=np.int64).reshape(-1)
        if alphabet is None:
            alphabet = np.unique(labels)
        alphabet = np.asarray(alphabet, dtype=np.int64)
        cols = np.searchsorted(alphabet, labels)
        if np.any(cols >= len(alphabet)) or np.any(alphabet[np.minimum(cols, len(alphabet) - 1)] != labels):
            raise ParseError("node label outside the label alphabet")
        onehot = np.zeros((len(labels), len(alphabet)), dtype=np.float64)
        onehot[np.arange(len(labels)), cols] = 1.0
        parts.append(onehot)
    if need_attrs:
        attrs = np.asarray(raw_attrs, dtype=np.float64)
        if attrs.ndim == 1:
            attrs = attrs.reshape(1, -1)
        parts.append(attrs)
    if len(parts) == 2 and parts[0].shape[0] != parts[1].shape[0]:
        raise RowCountMismatch(
            f"{parts[0].shape[0]} node labels vs {parts[1].shape[0]} attribute rows"
        )
    return parts[0] if len(parts) == 1 else np.hstack(parts)


# ---------------------------------------------------------------------------
# corpus


def _path(root, name, suffix):
    return os.path.join(root, f"{name}_{suffix}.txt")


def parse_corpus(root_dir: str, name: str, feature_mode=None) -> Corpus:
    """Parse ``root_dir/NAME_*.txt`` into a :class:`Corpus`."""
    if feature_mode is not None:
        mode = FeatureMode(feature_mode)
    elif name in DEFAULT_FEATURE_MODES:
        mode = DEFAULT_FEATURE_MODES[name]
    elif os.path.isfile(_path(root_dir, name, "node_attributes")):
        mode = FeatureMode.ATTRIBUTES_ONLY
    else:
        mode = FeatureMode.ONEHOT_NODE_LABELS
    required = {s: _path(root_dir, name, s) for s in ("A", "graph_indicator", "graph_labels")}
    for p in required.values():
        if not os.path.isfile(p):
            raise FileMissing(f"required file not found: {p}")

    indicator = _read_ints(required["graph_indicator"])
    graph_labels = _read_ints(required["graph_labels"])
    pairs = _read_pairs(required["A"])
    num_nodes = len(indicator)
    num_graphs = len(graph_labels)
    if num_nodes == 0 or num_graphs == 0:
        raise EmptyCorpus(f"{name}: no nodes or no graphs")
    if indicator.min() < 1 or indicator.max() > num_graphs:
        raise ParseError(
            f"{name}: graph ids in indicator span [{indicator.min()}, {indicator.max()}] "
            f"but {num_graphs} graph labels were given"
        )

    node_labels = None
    attrs = None
    lbl_path = _path(root_dir, name, "node_labels")
    attr_path = _path(root_dir, name, "node_attributes")
    if mode in (FeatureMode.ONEHOT_NODE_LABELS, FeatureMode.CONCAT):
        if not os.path.isfile(lbl_path):
            raise FeatureSourceMissing(f"{mode.value} needs {lbl_path}")
        node_labels = _read_ints(lbl_path)
        if len(node_labels) != num_nodes:
            raise RowCountMismatch(f"{lbl_path}: {len(node_labels)} rows for {num_nodes} nodes")
    if mode in (FeatureMode.ATTRIBUTES_ONLY, FeatureMode.CONCAT):
        if not os.path.isfile(attr_path):
            raise FeatureSourceMissing(f"{mode.value} needs {attr_path}")
        attrs = _read_float_rows(attr_path)
        if len(attrs) != num_nodes:
            raise RowCountMismatch(f"{attr_path}: {len(attrs)} rows for {num_nodes} nodes")

    alphabet = np.unique(node_labels) if node_labels is not None else np.array([], dtype=np.int64)
    features = build_features(node_labels, attrs, mode, alphabet if node_labels is not None else None)

    # edges: 1-based global -> 0-based global, then checked against the indicator
    if len(pairs):
        if pairs.min() < 1 or pairs.max() > num_nodes:
            bad = pairs[(pairs < 1).any(axis=1) | (pairs > num_nodes).any(axis=1)][0]
            raise CrossGraphEdge(f"{name}: edge {tuple(bad)} references a node outside the indicator range")
        u = pairs[:, 0] - 1
        v = pairs[:, 1] - 1
        cross = indicator[u] != indicator[v]
        if cross.any():
            k = int(np.argmax(cross))
            raise CrossGraphEdge(
                f"{name}: edge {tuple(pairs[k])} joins graph {indicator[u[k]]} and graph {indicator[v[k]]}"
            )
        loops = u == v
        if loops.any():
            logger.info("%s: dropping %d self-loop lines", name, int(loops.sum()))
            u, v = u[~loops], v[~loops]
    else:
        u = v = np.empty(0, dtype=np.int64)

    # local index = position of the node among its graph's nodes, in file order
    order = np.argsort(indicator, kind="stable")
    counts = np.bincount(indicator, minlength=num_graphs + 1)[1:]
    if np.any(counts == 0):
        g = int(np.argmax(counts == 0)) + 1
        raise ParseError(f"{name}: graph {g} has no nodes")
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    local = np.empty(num_nodes, dtype=np.int64)
    local[order] = np.arange(num_nodes) - np.repeat(starts, counts)

    lo = np.minimum(local[u], local[v])
    hi = np.maximum(local[u], local[v])
    gid = indicator[u]
    edge_order = np.lexsort((hi, lo, gid))
    gid, lo, hi = gid[edge_order], lo[edge_order], hi[edge_order]
    keep = np.ones(len(gid), dtype=bool)
    if len(gid) > 1:
        keep[1:] = (gid[1:] != gid[:-1]) | (lo[1:] != lo[:-1]) | (hi[1:] != hi[:-1])
    gid, lo, hi = gid[keep], lo[keep], hi[keep]
    edge_bounds = np.searchsorted(gid, np.arange(1, num_graphs + 2))

    class_values = np.unique(graph_labels)
    classes = np.searchsorted(class_values, graph_labels)

    graphs = []
    feats_sorted = features[order]
    for g in range(num_graphs):
        s, c = starts[g], counts[g]
        e0, e1 = edge_bounds[g], edge_bounds[g + 1]
        edges = np.stack([lo[e0:e1], hi[e0:e1]], axis=1)
        graphs.append(Graph(int(c), edges, feats_sorted[s : s + c], int(classes[g]), g + 1))

    return Corpus(
        name=name,
        graphs=tuple(graphs),
        class_count=len(class_values),
        feature_mode=mode,
        node_label_alphabet=tuple(int(a) for a in alphabet),
        class_values=tuple(int(c) for c in class_values),
    )


def corpus_stats(c: Corpus) -> CorpusStats:
    if len(c) == 0:
        raise EmptyCorpus(f"{c.name}: corpus is empty")
    nodes = sum(g.node_count for g in c.graphs)
    edges = sum(g.edge_count for g in c.graphs)
    return CorpusStats(len(c), c.class_count, nodes / len(c), edges / len(c))


def write_corpus(c: Corpus, root_dir: str, name: Optional[str] = None) -> None:
    """Export ``c`` in TUDataset layout; :func:`parse_corpus` reads it back unchanged.

    One-hot columns are written back as node labels (values from the stored
    alphabet); remaining columns become node attributes. Edges are written in
    both directions.
    """
    name = name or c.name
    os.makedirs(root_dir, exist_ok=True)
    mode = FeatureMode(c.feature_mode)
    n_onehot = len(c.node_label_alphabet) if mode != FeatureMode.ATTRIBUTES_ONLY else 0
    offset = 0
    with open(_path(root_dir, name, "A"), "w") as fa, \
            open(_path(root_dir, name, "graph_indicator"), "w") as fi:
        for gid, g in enumerate(c.graphs, start=1):
            for i, j in g.edges:
                fa.write(f"{i + offset + 1}, {j + offset + 1}\n")
                fa.write(f"{j + offset + 1}, {i + offset + 1}\n")
            fi.write(f"{gid}\n" * g.node_count)
            offset += g.node_count
    values = c.class_values or tuple(range(c.class_count))
    with open(_path(root_dir, name, "graph_labels"), "w") as fl:
        for g in c.graphs:
            fl.write(f"{values[g.label]}\n")
    if n_onehot:
        alphabet = np.asarray(c.node_label_alphabet)
        with open(_path(root_dir, name, "node_labels"), "w") as fn:
            for g in c.graphs:
                for row in g.features[:, :n_onehot]:
                    fn.write(f"{alphabet[int(np.argmax(row))]}\n")
    if mode != FeatureMode.ONEHOT_NODE_LABELS:
        with open(_path(root_dir, name, "node_attributes"), "w") as fn:
            for g in c.graphs:
                for row in g.features[:, n_onehot:]:
                    fn.write(", ".join(repr(float(x)) for x in row) + "\n")
