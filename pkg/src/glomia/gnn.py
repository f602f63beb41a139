"""Two-layer GNN graph classifiers (GCN, GAT, GraphSAGE-mean, GIN) in numpy.

Every layer works on node features of shape ``(B, n, f)``: ``B`` feature
matrices that share one graph structure. Training uses ``B = 1``; the attack
feeds all perturbed copies of a graph through a single batched pass.

Forward: layer 1 -> ReLU -> layer 2 -> mean readout -> linear head -> softmax.
Gradients are derived by hand per layer; see the ``*_backward`` functions.
"""
from __future__ import annotations

import enum
import json
import logging
import struct
import weakref
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sp

from .errors import DivergedError, EmptyCorpus, EmptyGraph, ShapeError
from .tensor import AdamState, adam_step, derive_seed, make_rng, row_softmax
from .tud import Graph

logger = logging.getLogger(__name__)


class Arch(str, enum.Enum):
    GCN = "GCN"
    GAT = "GAT"
    SAGE = "SAGE"
    GIN = "GIN"


def parse_arch(name) -> Arch:
    if isinstance(name, Arch):
        return name
    key = str(name).upper()
    if key in ("GRAPHSAGE", "SAGE"):
        return Arch.SAGE
    return Arch(key)


# ---------------------------------------------------------------------------
# graph structure


# below this node count aggregation operators are stored dense (BLAS beats CSR)
DENSE_MAX_NODES = 128


class Structure:
    """Aggregation operators derived from a graph's edge set (computed once per graph)."""

    def __init__(self, g: Graph):
        n = g.node_count
        self.n = n
        i, j = g.edges[:, 0], g.edges[:, 1]
        rows = np.concatenate([i, j])
        cols = np.concatenate([j, i])
        ones = np.ones(len(rows))
        self.adj = sp.csr_matrix((ones, (rows, cols)), shape=(n, n))
        self.adj.sort_indices()
        a_tilde = (self.adj + sp.identity(n, format="csr")).tocsr()
        a_tilde.sort_indices()
        deg = np.asarray(a_tilde.sum(axis=1)).reshape(-1)
        d_inv_sqrt = sp.diags(1.0 / np.sqrt(deg))
        self.gcn = (d_inv_sqrt @ a_tilde @ d_inv_sqrt).tocsr()
        self.gcn.sort_indices()
        self.mean = (sp.diags(1.0 / deg) @ a_tilde).tocsr()
        self.mean.sort_indices()
        self.mean_t = self.mean.T.tocsr()
        if n <= DENSE_MAX_NODES:
            self.adj, self.gcn, self.mean, self.mean_t = (
                m.toarray() for m in (self.adj, self.gcn, self.mean, self.mean_t)
            )
        # attention edges over N(i) u {i}, grouped by receiving node i
        self.att_indptr = a_tilde.indptr.copy()
        self.att_rows = np.repeat(np.arange(n), np.diff(a_tilde.indptr))
        self.att_cols = a_tilde.indices.copy()
        # same edges grouped by sending node j
        self.att_by_col = np.lexsort((self.att_rows, self.att_cols))
        self.att_col_starts = np.searchsorted(self.att_cols[self.att_by_col], np.arange(n))


_structures: "weakref.WeakKeyDictionary[Graph, Structure]" = weakref.WeakKeyDictionary()


def structure(g: Graph) -> Structure:
    s = _structures.get(g)
    if s is None:
        s = Structure(g)
        _structures[g] = s
    return s


def spmm(op, H: np.ndarray) -> np.ndarray:
    """Apply an ``n x n`` operator (dense or CSR) to a node-major ``(n, B, f)`` batch."""
    n, B, f = H.shape
    out = op @ np.ascontiguousarray(H).reshape(n, B * f)
    return np.asarray(out).reshape(n, B, f)


def _as_batch(H) -> tuple:
    """``(n, f)`` or ``(B, n, f)`` input -> node-major ``(n, B, f)`` and a squeeze flag."""
    H = np.asarray(H, dtype=np.float64)
    if H.ndim == 2:
        return H[:, None, :], True
    if H.ndim != 3:
        raise ShapeError(f"node features must be (n, f) or (B, n, f), got {H.shape}")
    return np.ascontiguousarray(H.transpose(1, 0, 2)), False


def _from_batch(H, squeeze):
    return H[:, 0, :] if squeeze else H.transpose(1, 0, 2)


def _check_in(H, g_or_s, W, what):
    n = g_or_s.n if isinstance(g_or_s, Structure) else g_or_s.node_count
    if H.shape[0] != n:
        raise ShapeError(f"{what}: {H.shape[0]} feature rows for {n} nodes")
    if W.ndim != 2 or H.shape[2] != W.shape[0]:
        raise ShapeError(f"{what}: features of width {H.shape[2]} incompatible with weights {W.shape}")


def relu(x):
    return np.maximum(x, 0.0)


def leaky_relu(x, slope):
    return np.where(x > 0, x, slope * x)


def _outer_sum(A, B):
    """sum over nodes and batch of A^T B for node-major batches."""
    return A.reshape(-1, A.shape[-1]).T @ B.reshape(-1, B.shape[-1])


# ---------------------------------------------------------------------------
# layers on node-major (n, B, f) batches:
# forward returns (out, cache), backward returns (dH, grads)


def gcn_forward(H, st: Structure, W):
    if H.shape[2] < W.shape[1]:
        return spmm(st.gcn, H) @ W, (H, W)
    return spmm(st.gcn, H @ W), (H, W)


def gcn_backward(dout, st: Structure, cache):
    H, W = cache
    dHW = spmm(st.gcn, dout)  # operator is symmetric
    return dHW @ W.T, {"W": _outer_sum(H, dHW)}


def sage_forward(H, st: Structure, W):
    if H.shape[2] < W.shape[1]:
        return spmm(st.mean, H) @ W, (H, W)
    return spmm(st.mean, H @ W), (H, W)


def sage_backward(dout, st: Structure, cache):
    H, W = cache
    dHW = spmm(st.mean_t, dout)
    return dHW @ W.T, {"W": _outer_sum(H, dHW)}


def _segment_sum(x, starts):
    return np.add.reduceat(x, starts, axis=0)


def gat_forward(H, st: Structure, W, att_self, att_nbr, slope=0.2):
    Z = H @ W  # (n, B, f)
    s = Z @ att_self  # (n, B)
    t = Z @ att_nbr
    rows, cols, starts = st.att_rows, st.att_cols, st.att_indptr[:-1]
    u = s[rows] + t[cols]  # (E, B)
    e = leaky_relu(u, slope)
    emax = np.maximum.reduceat(e, starts, axis=0)
    ex = np.exp(e - emax[rows])
    den = _segment_sum(ex, starts)
    alpha = ex / den[rows]
    out = _segment_sum(alpha[..., None] * Z[cols], starts)
    return out, (H, W, att_self, att_nbr, slope, Z, u, alpha)


def gat_backward(dout, st: Structure, cache):
    H, W, att_self, att_nbr, slope, Z, u, alpha = cache
    rows, cols, starts = st.att_rows, st.att_cols, st.att_indptr[:-1]
    by_col, col_starts = st.att_by_col, st.att_col_starts
    dO_rows = dout[rows]  # (E, B, f)
    # out_i = sum_j alpha_ij Z_j
    dZ = _segment_sum((alpha[..., None] * dO_rows)[by_col], col_starts)
    dalpha = np.einsum("ebf,ebf->eb", dO_rows, Z[cols])
    # softmax over each receiving node's edges
    dsum = _segment_sum(alpha * dalpha, starts)
    de = alpha * (dalpha - dsum[rows])
    du = de * np.where(u > 0, 1.0, slope)
    ds = _segment_sum(du, starts)  # (n, B)
    dt = _segment_sum(du[by_col], col_starts)
    d_att_self = np.einsum("nb,nbf->f", ds, Z)
    d_att_nbr = np.einsum("nb,nbf->f", dt, Z)
    dZ = dZ + ds[..., None] * att_self + dt[..., None] * att_nbr
    return dZ @ W.T, {"W": _outer_sum(H, dZ), "att_self": d_att_self, "att_nbr": d_att_nbr}


def gin_forward(H, st: Structure, eps, W_a, b_a, W_b, b_b):
    eps = float(np.asarray(eps).reshape(-1)[0])
    U = (1.0 + eps) * H + spmm(st.adj, H)
    Q = U @ W_a + b_a
    R = relu(Q)
    return R @ W_b + b_b, (H, eps, U, Q, R, W_a, W_b)


def gin_backward(dout, st: Structure, cache):
    H, eps, U, Q, R, W_a, W_b = cache
    dW_b = _outer_sum(R, dout)
    db_b = dout.sum(axis=(0, 1))
    dQ = (dout @ W_b.T) * (Q > 0)
    dW_a = _outer_sum(U, dQ)
    db_a = dQ.sum(axis=(0, 1))
    dU = dQ @ W_a.T
    deps = np.array([np.sum(dU * H)])
    dH = (1.0 + eps) * dU + spmm(st.adj, dU)  # adjacency is symmetric
    return dH, {"eps": deps, "W_a": dW_a, "b_a": db_a, "W_b": dW_b, "b_b": db_b}


# public single-layer entry points (2-D or batched features)


def gcn_layer(H, g: Graph, W, activate: bool = False):
    H, squeeze = _as_batch(H)
    W = np.asarray(W, dtype=np.float64)
    _check_in(H, g, W, "gcn_layer")
    out, _ = gcn_forward(H, structure(g), W)
    out = relu(out) if activate else out
    return _from_batch(out, squeeze)


def sage_layer(H, g: Graph, W, activate: bool = False):
    H, squeeze = _as_batch(H)
    W = np.asarray(W, dtype=np.float64)
    _check_in(H, g, W, "sage_layer")
    out, _ = sage_forward(H, structure(g), W)
    out = relu(out) if activate else out
    return _from_batch(out, squeeze)


def gat_layer(H, g: Graph, W, att_self, att_nbr, slope: float = 0.2, activate: bool = False):
    H, squeeze = _as_batch(H)
    W = np.asarray(W, dtype=np.float64)
    _check_in(H, g, W, "gat_layer")
    att_self = np.asarray(att_self, dtype=np.float64).reshape(-1)
    att_nbr = np.asarray(att_nbr, dtype=np.float64).reshape(-1)
    if att_self.shape[0] != W.shape[1] or att_nbr.shape[0] != W.shape[1]:
        raise ShapeError("gat_layer: attention vectors must match the output width")
    out, _ = gat_forward(H, structure(g), W, att_self, att_nbr, slope)
    out = relu(out) if activate else out
    return _from_batch(out, squeeze)


def gin_layer(H, g: Graph, eps, mlp_params, activate: bool = False):
    """``mlp_params`` = (W_a, b_a, W_b, b_b): linear -> ReLU -> linear."""
    H, squeeze = _as_batch(H)
    W_a, b_a, W_b, b_b = (np.asarray(p, dtype=np.float64) for p in mlp_params)
    _check_in(H, g, W_a, "gin_layer")
    if W_b.shape[0] != W_a.shape[1] or b_a.shape != (W_a.shape[1],) or b_b.shape != (W_b.shape[1],):
        raise ShapeError("gin_layer: MLP parameter shapes do not chain")
    out, _ = gin_forward(H, structure(g), eps, W_a, b_a, W_b, b_b)
    out = relu(out) if activate else out
    return _from_batch(out, squeeze)


def readout_mean(H) -> np.ndarray:
    """Column mean over nodes: ``(n, f) -> (f,)``."""
    H = np.asarray(H, dtype=np.float64)
    if H.shape[0] == 0:
        raise EmptyGraph("readout over a graph with no nodes")
    return H.mean(axis=0)


# ---------------------------------------------------------------------------
# model

LAYER_KEYS = {
    Arch.GCN: ("W",),
    Arch.SAGE: ("W",),
    Arch.GAT: ("W", "att_self", "att_nbr"),
    Arch.GIN: ("eps", "W_a", "b_a", "W_b", "b_b"),
}


@dataclass
class TrainConfig:
    epochs: int = 200
    lr: float = 0.01
    seed: int = 0
    hidden_dim: int = 32

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")


@dataclass(frozen=True)
class Prediction:
    label: int
    probs: np.ndarray


def argmax_lowest(probs: np.ndarray) -> np.ndarray:
    """Row-wise argmax; ``np.argmax`` already returns the first (lowest) index on ties."""
    return np.argmax(probs, axis=-1)


def _glorot(rng, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


@dataclass
class GnnModel:
    arch: Arch
    in_dim: int
    hidden_dim: int
    class_count: int
    params: dict = field(default_factory=dict)
    slope: float = 0.2

    @classmethod
    def init(cls, arch, in_dim, hidden_dim, class_count, seed=0, zero_head=False, slope=0.2):
        arch = parse_arch(arch)
        rng = make_rng(derive_seed(seed, "init"))
        p = {}
        for layer, (fi, fo) in ((1, (in_dim, hidden_dim)), (2, (hidden_dim, hidden_dim))):
            if arch == Arch.GIN:
                p[f"l{layer}.eps"] = np.zeros(1)
                p[f"l{layer}.W_a"] = _glorot(rng, fi, fo)
                p[f"l{layer}.b_a"] = np.zeros(fo)
                p[f"l{layer}.W_b"] = _glorot(rng, fo, fo)
                p[f"l{layer}.b_b"] = np.zeros(fo)
            else:
                p[f"l{layer}.W"] = _glorot(rng, fi, fo)
                if arch == Arch.GAT:
                    lim = np.sqrt(6.0 / (2 * fo + 1))
                    p[f"l{layer}.att_self"] = rng.uniform(-lim, lim, size=fo)
                    p[f"l{layer}.att_nbr"] = rng.uniform(-lim, lim, size=fo)
        if zero_head:
            p["head.W"] = np.zeros((hidden_dim, class_count))
        else:
            p["head.W"] = _glorot(rng, hidden_dim, class_count)
        p["head.b"] = np.zeros(class_count)
        return cls(arch, in_dim, hidden_dim, class_count, p, slope)

    def copy(self) -> "GnnModel":
        return GnnModel(self.arch, self.in_dim, self.hidden_dim, self.class_count,
                        {k: v.copy() for k, v in self.params.items()}, self.slope)

    def layer_params(self, layer: int) -> dict:
        return {k: self.params[f"l{layer}.{k}"] for k in LAYER_KEYS[self.arch]}

    # -- forward -----------------------------------------------------------

    def _layer_forward(self, layer, H, st):
        p = self.layer_params(layer)
        if self.arch == Arch.GCN:
            return gcn_forward(H, st, p["W"])
        if self.arch == Arch.SAGE:
            return sage_forward(H, st, p["W"])
        if self.arch == Arch.GAT:
            return gat_forward(H, st, p["W"], p["att_self"], p["att_nbr"], self.slope)
        return gin_forward(H, st, p["eps"], p["W_a"], p["b_a"], p["W_b"], p["b_b"])

    def _layer_backward(self, layer, dout, st, cache):
        fn = {Arch.GCN: gcn_backward, Arch.SAGE: sage_backward,
              Arch.GAT: gat_backward, Arch.GIN: gin_backward}[self.arch]
        dH, grads = fn(dout, st, cache)
        return dH, {f"l{layer}.{k}": v for k, v in grads.items()}

    def logits(self, g: Graph, features: Optional[np.ndarray] = None, _keep=False):
        """Class logits for ``g`` (shape ``(C,)``) or for a batch of feature matrices
        sharing g's structure (shape ``(B, C)``)."""
        X = g.features if features is None else features
        X, squeeze = _as_batch(X)
        if X.shape[0] != g.node_count or X.shape[2] != self.in_dim:
            raise ShapeError(
                f"model expects (n={g.node_count}, d={self.in_dim}) features, "
                f"got n={X.shape[0]}, d={X.shape[2]}"
            )
        st = structure(g)
        Z1, c1 = self._layer_forward(1, X, st)
        A1 = relu(Z1)
        Z2, c2 = self._layer_forward(2, A1, st)
        hG = readout_mean(Z2)
        out = hG @ self.params["head.W"] + self.params["head.b"]
        if _keep:
            return out, (st, Z1, c1, c2, hG, X.shape[0])
        return out[0] if squeeze else out

    def predict_proba(self, g: Graph, features: Optional[np.ndarray] = None) -> np.ndarray:
        return row_softmax(self.logits(g, features))

    def predict_labels(self, g: Graph, features: Optional[np.ndarray] = None) -> np.ndarray:
        """Labels only. Returns an int for a single graph, an array for a batch."""
        out = argmax_lowest(self.predict_proba(g, features))
        return int(out) if np.ndim(out) == 0 else out

    def forward(self, g: Graph) -> Prediction:
        probs = self.predict_proba(g)
        return Prediction(int(argmax_lowest(probs)), probs)

    # -- loss and gradients -------------------------------------------------

    def loss_and_grads(self, g: Graph, features: Optional[np.ndarray] = None, return_label=False):
        """Cross-entropy of one graph and the gradient of every parameter.

        With ``return_label`` the predicted label from the same forward pass is
        returned as a third element.
        """
        logits, (st, Z1, c1, c2, hG, n) = self.logits(g, features, _keep=True)
        y = g.label
        loss, dlogits = cross_entropy(logits[0], y)
        grads = {
            "head.W": np.outer(hG[0], dlogits),
            "head.b": dlogits,
        }
        dhG = self.params["head.W"] @ dlogits
        dZ2 = np.broadcast_to(dhG / n, (n, 1, dhG.shape[0]))
        dA1, g2 = self._layer_backward(2, dZ2, st, c2)
        dZ1 = dA1 * (Z1 > 0)
        _, g1 = self._layer_backward(1, dZ1, st, c1)
        grads.update(g2)
        grads.update(g1)
        if return_label:
            return float(loss), grads, int(argmax_lowest(row_softmax(logits[0])))
        return float(loss), grads


def cross_entropy(logits: np.ndarray, y: int) -> tuple:
    """Loss ``-log softmax(logits)[y]`` and its gradient ``softmax - onehot(y)``.

    Both are formed from ``z = logits - logits[y]`` so that a confident,
    correct prediction keeps full relative precision (no ``1 - p`` rounding).
    """
    z = np.asarray(logits, dtype=np.float64) - logits[y]
    z_other = np.delete(z, y)
    m = max(0.0, float(z_other.max())) if z_other.size else 0.0
    if m == 0.0:
        rest = np.exp(z_other)
        loss = float(np.log1p(rest.sum()))
    else:
        rest = np.exp(z_other - m)
        loss = m + float(np.log(np.exp(-m) + rest.sum()))
    # softmax_k = exp(z_k - loss) for every k
    grad = np.exp(z - loss)
    grad[y] = -float(np.exp(z_other - loss).sum())
    return loss, grad


def forward(model: GnnModel, g: Graph) -> Prediction:
    return model.forward(g)


def accuracy(model: GnnModel, graphs: Sequence[Graph]) -> float:
    if len(graphs) == 0:
        raise EmptyCorpus("accuracy over an empty set")
    hits = sum(model.predict_labels(g) == g.label for g in graphs)
    return hits / len(graphs)


@dataclass
class EpochLog:
    epoch: int
    loss: float
    train_acc: float


def train(model: GnnModel, graphs: Sequence[Graph], cfg: TrainConfig, log_every: int = 0):
    """Full-batch training: per-graph cross-entropy gradients summed, one Adam step per epoch.

    Returns ``(model, history)``; ``model`` is updated in place. Each history
    entry holds the mean loss and train accuracy measured before that epoch's
    update.
    """
    if len(graphs) == 0:
        raise EmptyCorpus("train on an empty set")
    state = AdamState(lr=cfg.lr)
    history = []
    for epoch in range(cfg.epochs):
        total = 0.0
        correct = 0
        acc_grads = {k: np.zeros_like(v) for k, v in model.params.items()}
        # overflow surfaces below as a non-finite loss
        with np.errstate(over="ignore", invalid="ignore"):
            for g in graphs:
                loss, grads, label = model.loss_and_grads(g, return_label=True)
                total += loss
                correct += label == g.label
                for k, v in grads.items():
                    acc_grads[k] += v
        if not np.isfinite(total):
            raise DivergedError(f"non-finite loss at epoch {epoch}")
        history.append(EpochLog(epoch, total / len(graphs), correct / len(graphs)))
        adam_step(model.params, acc_grads, state)
        if log_every and (epoch + 1) % log_every == 0:
            logger.info("epoch %d loss %.4f acc %.3f", epoch + 1, history[-1].loss, history[-1].train_acc)
    return model, history


def train_model(arch, graphs: Sequence[Graph], class_count: int, cfg: TrainConfig, log_every: int = 0):
    model = GnnModel.init(arch, graphs[0].feature_dim, cfg.hidden_dim, class_count, seed=cfg.seed)
    return train(model, graphs, cfg, log_every)


# ---------------------------------------------------------------------------
# checkpoints
#
# Binary blob (little-endian):
#   magic  b"GLOMIA\0\1"        8 bytes (last byte = format version)
#   u16    arch tag length, then arch tag (ASCII)
#   u32    tensor count
#   per tensor, in sorted name order:
#     u16 name length, name (UTF-8), u8 ndim, ndim x u32 dims,
#     prod(dims) x f64 row-major values
# The JSON sidecar (<path>.json) holds arch, in_dim, hidden_dim, class_count,
# slope and any training hyperparameters passed in ``meta``.

MAGIC = b"GLOMIA\x00\x01"


def save_checkpoint(model: GnnModel, path: str, meta: Optional[dict] = None) -> None:
    parts = [MAGIC]
    tag = model.arch.value.encode("ascii")
    parts.append(struct.pack("<H", len(tag)) + tag)
    parts.append(struct.pack("<I", len(model.params)))
    for name in sorted(model.params):
        arr = np.ascontiguousarray(model.params[name], dtype="<f8")
        bname = name.encode("utf-8")
        parts.append(struct.pack("<H", len(bname)) + bname)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))
    side = {
        "format_version": 1,
        "arch": model.arch.value,
        "in_dim": model.in_dim,
        "hidden_dim": model.hidden_dim,
        "class_count": model.class_count,
        "slope": model.slope,
        "meta": meta or {},
    }
    with open(path + ".json", "w") as fh:
        json.dump(side, fh, indent=2, sort_keys=True)


def load_checkpoint(path: str) -> GnnModel:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    pos = 8
    (tlen,) = struct.unpack_from("<H", blob, pos)
    pos += 2
    arch = parse_arch(blob[pos : pos + tlen].decode("ascii"))
    pos += tlen
    (count,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    params = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", blob, pos)
        pos += 2
        name = blob[pos : pos + nlen].decode("utf-8")
        pos += nlen
        (ndim,) = struct.unpack_from("<B", blob, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", blob, pos)
        pos += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        params[name] = np.frombuffer(blob, dtype="<f8", count=size, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * size
    with open(path + ".json") as fh:
        side = json.load(fh)
    return GnnModel(arch, side["in_dim"], side["hidden_dim"], side["class_count"], params, side["slope"])


def train_config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
