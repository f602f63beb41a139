"""Feature-perturbed copies of a graph.

Each copy adds signed noise to the non-zero entries of the node feature
matrix. Magnitudes are uniform on ``[s*r_min, s*r_max)`` and each sign is a
fair coin. Zero entries and the graph structure are never touched.

Random streams: copy ``k`` of the graph with id ``gid`` reads block ``k`` of
the Philox stream keyed by ``derive_seed(seed, "perturb", gid)``. A block
holds one 64-bit word per non-zero feature entry (row-major order), padded to
a whole Philox counter step. The top 53 bits of a word give the magnitude and
the lowest bit gives the sign (1 -> +1, 0 -> -1). Any copy can therefore be
regenerated on its own, and a batch of copies comes from a single draw.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Iterator, Optional

import numpy as np

from .errors import ConfigError, RangeError
from .tensor import derive_seed, raw_blocks, unit_interval
from .tud import Graph

R_MIN = 0.1
R_MAX = 0.5
# feature entries materialised per batch of copies; bounds memory for large graphs
_CHUNK_WORDS = 1 << 22


@dataclass(frozen=True)
class PerturbConfig:
    n_copies: int = 1000
    scaler: float = 1.0
    r_min: float = R_MIN
    r_max: float = R_MAX
    seed: int = 0

    def __post_init__(self):
        if self.n_copies < 1:
            raise ConfigError(f"n_copies must be >= 1, got {self.n_copies}")
        if not self.scaler > 0:
            raise RangeError(f"scaler must be positive, got {self.scaler}")
        if not 0 < self.r_min < self.r_max:
            raise RangeError(f"need 0 < r_min < r_max, got {self.r_min}, {self.r_max}")

    @property
    def lo(self) -> float:
        return self.scaler * self.r_min

    @property
    def hi(self) -> float:
        return self.scaler * self.r_max

    def with_scaler(self, s: float) -> "PerturbConfig":
        return replace(self, scaler=s)


def nonzero_mask(X: np.ndarray) -> np.ndarray:
    return np.asarray(X) != 0


def _magnitudes(raw: np.ndarray, lo: float, hi: float) -> np.ndarray:
    if not lo < hi:
        raise RangeError(f"perturbation range needs lo < hi, got [{lo}, {hi})")
    p = lo + (hi - lo) * unit_interval(raw)
    return np.where(p < hi, p, np.nextafter(hi, lo))


def _sign_bits(raw: np.ndarray) -> np.ndarray:
    return (raw & np.uint64(1)).astype(bool)


def perturbation_matrix(mask: np.ndarray, lo: float, hi: float, rng: np.random.Generator) -> np.ndarray:
    """Uniform ``[lo, hi)`` values where ``mask`` is true, exact zeros elsewhere."""
    mask = np.asarray(mask, dtype=bool)
    raw = rng.bit_generator.random_raw(mask.size).reshape(mask.shape)
    return np.where(mask, _magnitudes(raw, lo, hi), 0.0)


def operator_matrix(mask: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """+1/-1 (from a fair 0/1 draw ``o`` as ``2*o - 1``) where ``mask`` is true, 0 elsewhere."""
    mask = np.asarray(mask, dtype=bool)
    o = rng.integers(0, 2, size=mask.shape)
    return np.where(mask, 2.0 * o - 1.0, 0.0)


def perturb_graph(g: Graph, lo: float, hi: float, rng: np.random.Generator) -> Graph:
    """One perturbed copy of ``g`` using ``rng``; ``g`` is left unchanged."""
    if not lo < hi:
        raise RangeError(f"perturbation range needs lo < hi, got [{lo}, {hi})")
    X = g.features
    mm = nonzero_mask(X)
    pm = perturbation_matrix(mm, lo, hi, rng)
    om = operator_matrix(mm, rng)
    return g.with_features(X + pm * om)


def _block_words(nnz: int) -> int:
    return max(4, -(-nnz // 4) * 4)


def _signed_noise(g: Graph, cfg: PerturbConfig, start: int, count: int):
    """Signed perturbation values at the non-zero positions: ``(rows, cols, values)``
    with ``values`` of shape ``(nnz, count)``."""
    rows, cols = np.nonzero(g.features)
    nnz = len(rows)
    key = derive_seed(cfg.seed, "perturb", g.source_id)
    raw = raw_blocks(key, start, count, _block_words(nnz))[:, :nnz].T
    mags = _magnitudes(raw, cfg.lo, cfg.hi)
    return rows, cols, np.where(_sign_bits(raw), mags, -mags)


def copy_deltas(g: Graph, cfg: PerturbConfig, start: int, count: int) -> np.ndarray:
    """Additive perturbations ``PM * OM`` for copies ``start .. start+count-1``, shape ``(count, n, d)``."""
    rows, cols, vals = _signed_noise(g, cfg, start, count)
    delta = np.zeros((g.node_count, count, g.feature_dim))
    delta[rows, :, cols] = vals
    return delta.transpose(1, 0, 2)


def _copy_features(g: Graph, cfg: PerturbConfig, start: int, count: int) -> np.ndarray:
    rows, cols, vals = _signed_noise(g, cfg, start, count)
    X = g.features
    out = np.repeat(X[:, None, :], count, axis=1)  # node-major (n, count, d)
    out[rows, :, cols] = X[rows, cols][:, None] + vals
    return out.transpose(1, 0, 2)


@dataclass(frozen=True)
class PerturbedSet:
    """The original graph plus ``N`` perturbed feature matrices sharing its structure."""

    original: Graph
    features: np.ndarray  # (N, n, d)

    def __len__(self):
        return self.features.shape[0]

    @property
    def copies(self) -> list:
        return [self.original.with_features(x) for x in self.features]

    def __iter__(self) -> Iterator[Graph]:
        for x in self.features:
            yield self.original.with_features(x)


def iter_copy_chunks(g: Graph, cfg: PerturbConfig, chunk: Optional[int] = None):
    """Yield ``(start, features)`` batches covering all ``cfg.n_copies`` copies in order."""
    if chunk is None:
        chunk = max(1, _CHUNK_WORDS // (g.node_count * g.feature_dim))
    for start in range(0, cfg.n_copies, chunk):
        count = min(chunk, cfg.n_copies - start)
        yield start, _copy_features(g, cfg, start, count)


def generate_set(g: Graph, cfg: PerturbConfig) -> PerturbedSet:
    feats = np.concatenate([f for _, f in iter_copy_chunks(g, cfg)], axis=0)
    feats.flags.writeable = False
    return PerturbedSet(g, feats)


def generate_copy(g: Graph, cfg: PerturbConfig, index: int) -> Graph:
    """Copy ``index`` of :func:`generate_set`, regenerated on its own."""
    return g.with_features(g.features + copy_deltas(g, cfg, index, 1)[0])
