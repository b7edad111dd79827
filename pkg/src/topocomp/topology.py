"""Per-subsignal inference of disjoint hyperedges from learned node embeddings.

Every function here accepts either one subsignal or a leading batch axis; the
batched form is what training uses, the single form is what tests and the
CLI use.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .autodiff import MlpSpec, ParamStore, Tensor, mlp_forward
from .errors import DimensionError, ParameterError

SNR_EPS = 1e-8


@dataclass(frozen=True)
class HyperedgePartition:
    """K disjoint hyperedges over ``range(n)`` plus optional intra-hyperedge edges.

    ``hyperedges`` are listed in formation order; each is a sorted tuple.
    """

    hyperedges: tuple[tuple[int, ...], ...]
    p: int
    edges: tuple[tuple[int, int], ...] = ()

    @property
    def n_nodes(self) -> int:
        return sum(len(h) for h in self.hyperedges)

    @property
    def k(self) -> int:
        return len(self.hyperedges)

    def labels(self) -> np.ndarray:
        """Hyperedge index of every node."""
        out = np.full(self.n_nodes, -1, dtype=np.intp)
        for k, members in enumerate(self.hyperedges):
            out[list(members)] = k
        return out

    @classmethod
    def from_labels(cls, labels, p: int, edges=()) -> "HyperedgePartition":
        labels = np.asarray(labels)
        k = int(labels.max()) + 1
        hyperedges = tuple(tuple(int(i) for i in np.flatnonzero(labels == j)) for j in range(k))
        return cls(hyperedges, p, tuple((int(a), int(b)) for a, b in edges))

    def with_edges(self, edges) -> "HyperedgePartition":
        return HyperedgePartition(self.hyperedges, self.p, tuple((int(a), int(b)) for a, b in edges))

    def to_dict(self) -> dict:
        return {
            "p": self.p,
            "hyperedges": [list(h) for h in self.hyperedges],
            "edges": [list(e) for e in self.edges],
        }


def hyperedge_sizes(n: int, p: int) -> list[int]:
    """Sizes of the hyperedges, in formation order, for ``n`` nodes.

    There are ``round(n / p)`` hyperedges (halves round up); the first ones have ``p`` members and
    the trailing ``K*p - n`` have ``p - 1``. Raises :class:`ParameterError` when
    ``p <= 4``, ``n < p`` or no such split exists (e.g. n=11, p=5).
    """
    if p <= 4:
        raise ParameterError(f"max hyperedge length p must exceed 4, got {p}")
    if n < p:
        raise ParameterError(f"need at least p={p} nodes, got {n}")
    k = (2 * n + p) // (2 * p)  # round half up, in exact integer arithmetic
    short = k * p - n
    if not 0 <= short <= k:
        raise ParameterError(
            f"{n} nodes cannot form round({n}/{p}) = {k} hyperedges of sizes {p - 1} and {p}"
        )
    return [p] * (k - short) + [p - 1] * short


def feasible(n: int, p: int) -> bool:
    try:
        hyperedge_sizes(n, p)
    except ParameterError:
        return False
    return True


def embed_nodes(subsignal, params: ParamStore, spec: MlpSpec, prefix: str = "encoder") -> Tensor:
    """Encode each measurement row with the node encoder MLP."""
    x = np.asarray(subsignal)
    if x.shape[-1] != spec.widths[0]:
        raise DimensionError(f"measurements have length {x.shape[-1]}, encoder expects {spec.widths[0]}")
    return mlp_forward(spec, params, Tensor(x, dtype=params.dtype), prefix)


def snr_similarity(emb, eps: float = SNR_EPS) -> np.ndarray:
    """Negative SNR distance between embedding rows, row ``u`` as the anchor.

    ``m[u, v] = -Var(h_u - h_v) / (Var(h_u) + eps)`` with population variance
    over embedding components. The diagonal holds ``-inf``.
    """
    h = np.asarray(emb.data if isinstance(emb, Tensor) else emb, dtype=np.float64)
    if h.shape[-1] < 2:
        raise DimensionError("SNR similarity needs embeddings with at least two components")
    centered = h - h.mean(axis=-1, keepdims=True)
    diff = centered[..., :, None, :] - centered[..., None, :, :]
    noise = np.mean(diff * diff, axis=-1)
    signal = np.mean(centered * centered, axis=-1)[..., :, None]
    sim = -noise / (signal + eps)
    n = h.shape[-2]
    sim[..., np.arange(n), np.arange(n)] = -np.inf
    return sim


def greedy_labels(sim, p: int) -> np.ndarray:
    """Vectorized greedy clustering; returns hyperedge labels of shape (..., N).

    Repeatedly picks the remaining row whose top-``s`` remaining entries have
    the largest sum (``s`` = size - 1 of the hyperedge being formed) and groups
    it with those columns. Ties go to the smaller row / column index.
    """
    sim = np.asarray(sim, dtype=np.float64)
    single = sim.ndim == 2
    if single:
        sim = sim[None]
    b, n, _ = sim.shape
    sizes = hyperedge_sizes(n, p)
    work = sim.copy()
    work[:, np.arange(n), np.arange(n)] = -np.inf
    alive = np.ones((b, n), dtype=bool)
    labels = np.full((b, n), -1, dtype=np.intp)
    rows = np.arange(b)
    for k, size in enumerate(sizes):
        if k == len(sizes) - 1:
            labels[alive] = k
            break
        masked = np.where(alive[:, None, :] & alive[:, :, None], work, -np.inf)
        order = np.argsort(-masked, axis=2, kind="stable")[:, :, : size - 1]
        sums = np.take_along_axis(masked, order, axis=2).sum(axis=2)
        sums[~alive] = -np.inf
        pick = np.argmax(sums, axis=1)
        cols = order[rows, pick]
        labels[rows, pick] = k
        labels[rows[:, None], cols] = k
        alive[rows, pick] = False
        alive[rows[:, None], cols] = False
    return labels[0] if single else labels


def greedy_cluster(sim, p: int) -> HyperedgePartition:
    """Greedy top-sum clustering of one similarity matrix into disjoint hyperedges."""
    sim = np.asarray(sim)
    if sim.ndim != 2 or sim.shape[0] != sim.shape[1]:
        raise DimensionError(f"similarity matrix must be square, got {sim.shape}")
    return HyperedgePartition.from_labels(greedy_labels(sim, p), p)


def infer_edge_array(sim, labels, k: int) -> np.ndarray:
    """Intra-hyperedge top-``k`` edges as an (E, 3) array of (batch, u, v), u < v."""
    if k < 1:
        raise ParameterError(f"edge fan-out k must be >= 1, got {k}")
    sim = np.asarray(sim, dtype=np.float64)
    labels = np.asarray(labels)
    if sim.ndim == 2:
        sim, labels = sim[None], labels[None]
    b, n, _ = sim.shape
    same = labels[:, :, None] == labels[:, None, :]
    same[:, np.arange(n), np.arange(n)] = False
    masked = np.where(same, sim, -np.inf)
    kk = min(k, n - 1)
    order = np.argsort(-masked, axis=2, kind="stable")[:, :, :kk]
    valid = np.take_along_axis(same, order, axis=2)
    bi, u, r = np.nonzero(valid)
    v = order[bi, u, r]
    lo, hi = np.minimum(u, v), np.maximum(u, v)
    triples = np.stack([bi, lo, hi], axis=1)
    if len(triples) == 0:
        return triples.reshape(0, 3)
    return np.unique(triples, axis=0)


def infer_edges(sim, partition: HyperedgePartition, k: int) -> list[tuple[int, int]]:
    """Each node's ``k`` most similar peers inside its hyperedge, as undirected pairs."""
    edges = infer_edge_array(sim, partition.labels(), k)
    return [(int(u), int(v)) for _, u, v in edges]


def export_partitions(partitions: dict[int, HyperedgePartition]) -> str:
    """JSON text mapping subsignal id to its hyperedges and edges."""
    return json.dumps({str(i): p.to_dict() for i, p in sorted(partitions.items())}, sort_keys=True, indent=1)
