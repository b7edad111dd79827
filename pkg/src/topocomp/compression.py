"""Topological message-passing compression (SetMP, CombMP) and decompression.

A batch of subsignals is flattened into one disjoint union: node ``b*N + j``
is link ``j`` of subsignal ``b`` and hyperedge ``b*K + k`` is hyperedge ``k``
of subsignal ``b``. Every step is then a gather, an MLP and a
:func:`~topocomp.autodiff.segment_aggregate` over that union.

Parameter roles (MLP prefixes):

=============  ==============================================
``encoder``    node encoder, x -> h_v^0
``phi_e``      edge init from its two node embeddings
``phi_w``      hyperedge init from its member embeddings
``psi_e2e``    edge <-> edge message / ``phi_e2e`` update
``psi_e2w``    edge -> hyperedge message / ``phi_e2w``
``psi_w2e``    hyperedge -> edge message / ``phi_w2e``
``psi_e2v``    edge -> node compression (CombMP)
``psi_w2v``    hyperedge -> node compression (SetMP)
``psi_v2w``    node -> hyperedge compression
``decoder``    (node code, hyperedge code) -> x_hat
=============  ==============================================
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from fractions import Fraction
from functools import cached_property
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .autodiff import (
    MlpSpec,
    ParamStore,
    Tensor,
    concat,
    gather_rows,
    mlp_forward,
    segment_aggregate,
)
from .errors import CompatibilityError, ContractError, DimensionError, FormatError
from .topology import HyperedgePartition


@dataclass
class TopoStructure:
    """Disjoint union of the topological objects of a batch of subsignals."""

    node_hedge: np.ndarray
    n_hedges: int
    edges: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), dtype=np.intp))

    def __post_init__(self):
        self.node_hedge = np.asarray(self.node_hedge, dtype=np.intp)
        self.edges = np.asarray(self.edges, dtype=np.intp).reshape(-1, 2)
        if np.bincount(self.node_hedge, minlength=self.n_hedges).min(initial=1) == 0:
            raise ContractError("every hyperedge needs at least one node")
        if len(self.edges) and np.any(self.node_hedge[self.edges[:, 0]] != self.node_hedge[self.edges[:, 1]]):
            raise ContractError("edges must connect nodes of the same hyperedge")

    @classmethod
    def from_partitions(cls, partitions: Sequence[HyperedgePartition]) -> "TopoStructure":
        node_hedge, edges = [], []
        node_off = hedge_off = 0
        for part in partitions:
            node_hedge.append(part.labels() + hedge_off)
            if part.edges:
                edges.append(np.asarray(part.edges, dtype=np.intp) + node_off)
            node_off += part.n_nodes
            hedge_off += part.k
        edge_arr = np.concatenate(edges) if edges else np.zeros((0, 2), dtype=np.intp)
        return cls(np.concatenate(node_hedge), hedge_off, edge_arr)

    @classmethod
    def from_labels(cls, labels: np.ndarray, edge_triples: np.ndarray | None = None) -> "TopoStructure":
        """From batched labels (B, N) and optional (batch, u, v) edge triples."""
        b, n = labels.shape
        k = int(labels.max()) + 1
        node_hedge = (labels + (np.arange(b) * k)[:, None]).ravel()
        edges = None
        if edge_triples is not None and len(edge_triples):
            edges = edge_triples[:, 1:] + (edge_triples[:, :1] * n)
        return cls(node_hedge, b * k, edges if edges is not None else np.zeros((0, 2), dtype=np.intp))

    @property
    def n_nodes(self) -> int:
        return len(self.node_hedge)

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    @cached_property
    def edge_hedge(self) -> np.ndarray:
        return self.node_hedge[self.edges[:, 0]] if self.n_edges else np.zeros(0, dtype=np.intp)

    @cached_property
    def incidence(self) -> tuple[np.ndarray, np.ndarray]:
        """(node, edge) pairs, one per edge endpoint."""
        nodes = self.edges.ravel()
        edges = np.repeat(np.arange(self.n_edges), 2)
        return nodes, edges

    @cached_property
    def edge_pairs(self) -> tuple[np.ndarray, np.ndarray]:
        """(receiver, sender) pairs of distinct edges sharing an endpoint."""
        return shared_endpoint_pairs(self.edges, self.n_nodes)


def shared_endpoint_pairs(endpoints: np.ndarray, n_nodes: int) -> tuple[np.ndarray, np.ndarray]:
    """Ordered pairs (i, j), i != j, of rows of ``endpoints`` sharing a node."""
    m = len(endpoints)
    if m == 0:
        empty = np.zeros(0, dtype=np.intp)
        return empty, empty
    inc = sp.csr_matrix(
        (np.ones(2 * m), (np.repeat(np.arange(m), 2), endpoints.ravel())), shape=(m, n_nodes)
    )
    shared = (inc @ inc.T).tocoo()
    keep = shared.row != shared.col
    order = np.lexsort((shared.col[keep], shared.row[keep]))
    return shared.row[keep][order].astype(np.intp), shared.col[keep][order].astype(np.intp)


@dataclass
class TopoState:
    """Hidden states of nodes, edges and hyperedges after ``t`` rounds."""

    h_v: Tensor
    h_e: Tensor | None
    h_w: Tensor
    t: int = 0


# ---------------------------------------------------------------------------
# message passing


def _pool(x: Tensor, segments, n: int) -> Tensor:
    return segment_aggregate(x, segments, n)


def init_structure_embeddings(h_v: Tensor, structure: TopoStructure, params: ParamStore, specs) -> TopoState:
    """Edge and hyperedge initial states from pooled member node embeddings."""
    h_w = mlp_forward(specs["phi_w"], params, _pool(h_v, structure.node_hedge, structure.n_hedges), "phi_w")
    h_e = None
    if structure.n_edges and "phi_e" in specs:
        nodes, edges = structure.incidence
        pooled = _pool(gather_rows(h_v, nodes), edges, structure.n_edges)
        h_e = mlp_forward(specs["phi_e"], params, pooled, "phi_e")
    return TopoState(h_v=h_v, h_e=h_e, h_w=h_w, t=0)


def _edge_to_edge(h_e: Tensor, structure: TopoStructure, params, specs) -> Tensor:
    recv, send = structure.edge_pairs
    msg = mlp_forward(specs["psi_e2e"], params, concat([gather_rows(h_e, recv), gather_rows(h_e, send)]), "psi_e2e")
    return mlp_forward(specs["phi_e2e"], params, _pool(msg, recv, structure.n_edges), "phi_e2e")


def combmp_rounds(state: TopoState, structure: TopoStructure, params: ParamStore, specs, rounds: int) -> TopoState:
    """``rounds`` iterations of edge->edge, edge->hyperedge, hyperedge->edge, edge->edge."""
    if rounds == 0:
        return state
    if state.h_e is None or structure.n_edges == 0:
        raise ContractError("CombMP message passing needs at least one edge; use SetMP for edge-free partitions")
    h_e, h_w = state.h_e, state.h_w
    eh = structure.edge_hedge
    for _ in range(rounds):
        h_e = _edge_to_edge(h_e, structure, params, specs)
        msg = mlp_forward(specs["psi_e2w"], params, concat([gather_rows(h_w, eh), h_e]), "psi_e2w")
        h_w = mlp_forward(specs["phi_e2w"], params, _pool(msg, eh, structure.n_hedges), "phi_e2w")
        msg = mlp_forward(specs["psi_w2e"], params, concat([h_e, gather_rows(h_w, eh)]), "psi_w2e")
        h_e = mlp_forward(specs["phi_w2e"], params, _pool(msg, np.arange(structure.n_edges), structure.n_edges), "phi_w2e")
        h_e = _edge_to_edge(h_e, structure, params, specs)
    return TopoState(h_v=state.h_v, h_e=h_e, h_w=h_w, t=state.t + rounds)


def _node_to_hyperedge(x: Tensor, h_vc: Tensor, h_w: Tensor, structure, params, specs) -> Tensor:
    nh = structure.node_hedge
    msg = mlp_forward(specs["psi_v2w"], params, concat([x, h_vc, gather_rows(h_w, nh)]), "psi_v2w")
    return mlp_forward(specs["phi_v2w"], params, _pool(msg, nh, structure.n_hedges), "phi_v2w")


def compress_setmp(x: Tensor, h_v0: Tensor, structure: TopoStructure, params: ParamStore, specs, h_w0: Tensor | None = None):
    """SetMP codes: node codes from (x, h_v^0, h_w^0), then hyperedge codes.

    The node step pools a single message (its unique hyperedge); pooling is
    kept so both pipelines share the same update-function shapes.
    """
    if h_w0 is None:
        h_w0 = init_structure_embeddings(h_v0, structure, params, specs).h_w
    nh = structure.node_hedge
    msg = mlp_forward(specs["psi_w2v"], params, concat([x, h_v0, gather_rows(h_w0, nh)]), "psi_w2v")
    h_vc = mlp_forward(specs["phi_w2v"], params, _pool(msg, np.arange(structure.n_nodes), structure.n_nodes), "phi_w2v")
    h_wc = _node_to_hyperedge(x, h_vc, h_w0, structure, params, specs)
    return h_vc, h_wc


def compress_combmp(x: Tensor, h_v0: Tensor, state: TopoState, structure: TopoStructure, params: ParamStore, specs):
    """CombMP codes: node codes pooled over incident edges, then hyperedge codes.

    Nodes without an incident edge pool over nothing (zero vector). A structure
    with no edges at all degenerates to the SetMP node step, which needs the
    ``psi_w2v``/``phi_w2v`` roles in ``params``.
    """
    if structure.n_edges == 0:
        if "psi_w2v" not in specs:
            raise ContractError("edge-free structure: CombMP needs the SetMP w2v roles to compress nodes")
        return compress_setmp(x, h_v0, structure, params, specs, h_w0=state.h_w)
    if state.t < 1:
        raise ContractError("CombMP compression expects at least one message-passing round")
    nodes, edges = structure.incidence
    feats = concat([gather_rows(x, nodes), gather_rows(h_v0, nodes), gather_rows(state.h_e, edges)])
    msg = mlp_forward(specs["psi_e2v"], params, feats, "psi_e2v")
    h_vc = mlp_forward(specs["phi_e2v"], params, _pool(msg, nodes, structure.n_nodes), "phi_e2v")
    h_wc = _node_to_hyperedge(x, h_vc, state.h_w, structure, params, specs)
    return h_vc, h_wc


def decode(h_vc: Tensor, h_wc: Tensor, node_hedge, params: ParamStore, spec: MlpSpec) -> Tensor:
    """x_hat_v = decoder(node code, code of the node's hyperedge)."""
    return mlp_forward(spec, params, concat([h_vc, gather_rows(h_wc, node_hedge)]), "decoder")


def compression_ratio(n: int, d: int, k: int, d_vc: int, d_wc: int) -> Fraction:
    """Stored code floats over raw floats: (N*d_vc + K*d_wc) / (N*d)."""
    for name, v in (("N", n), ("d", d), ("K", k), ("d_vc", d_vc), ("d_wc", d_wc)):
        if v <= 0:
            raise ValueError(f"{name} must be positive, got {v}")
    return Fraction(n * d_vc + k * d_wc, n * d)


# ---------------------------------------------------------------------------
# compressed artifact

ARTIFACT_MAGIC = b"TGSC"
ARTIFACT_VERSION = 1
_HEADER = struct.Struct("<4sH6I32s2d")


@dataclass
class CompressedArtifact:
    """Codes of one subsignal plus everything needed to decode it."""

    node_codes: np.ndarray
    hedge_codes: np.ndarray
    node_hedge: np.ndarray
    d: int
    p: int
    model_id: bytes = b"\0" * 32
    norm_min: float = 0.0
    norm_max: float = 1.0

    def __post_init__(self):
        self.node_codes = np.ascontiguousarray(self.node_codes, dtype="<f4")
        self.hedge_codes = np.ascontiguousarray(self.hedge_codes, dtype="<f4")
        self.node_hedge = np.asarray(self.node_hedge, dtype=np.intp)
        if self.node_codes.ndim != 2 or self.hedge_codes.ndim != 2:
            raise DimensionError("codes must be 2-d")
        if len(self.node_hedge) != self.n_nodes:
            raise DimensionError(f"{len(self.node_hedge)} hyperedge labels for {self.n_nodes} nodes")
        if self.n_nodes and (self.node_hedge.min() < 0 or self.node_hedge.max() >= self.k):
            raise ContractError("partition references a hyperedge without a code")
        if len(self.model_id) != 32:
            raise ContractError("model id must be a 32-byte digest")

    @property
    def n_nodes(self) -> int:
        return self.node_codes.shape[0]

    @property
    def k(self) -> int:
        return self.hedge_codes.shape[0]

    @property
    def d_vc(self) -> int:
        return self.node_codes.shape[1]

    @property
    def d_wc(self) -> int:
        return self.hedge_codes.shape[1]

    @property
    def stored_floats(self) -> int:
        return self.node_codes.size + self.hedge_codes.size

    @property
    def ratio(self) -> Fraction:
        return compression_ratio(self.n_nodes, self.d, self.k, self.d_vc, self.d_wc)

    def to_bytes(self) -> bytes:
        header = _HEADER.pack(
            ARTIFACT_MAGIC, ARTIFACT_VERSION, self.n_nodes, self.d, self.k, self.p,
            self.d_vc, self.d_wc, self.model_id, self.norm_min, self.norm_max,
        )
        return b"".join(
            [header, self.node_hedge.astype("<u2").tobytes(), self.node_codes.tobytes(), self.hedge_codes.tobytes()]
        )

    @classmethod
    def from_bytes(cls, blob: bytes) -> "CompressedArtifact":
        if len(blob) < _HEADER.size:
            raise FormatError("artifact shorter than its header")
        magic, version, n, d, k, p, d_vc, d_wc, model_id, lo, hi = _HEADER.unpack_from(blob)
        if magic != ARTIFACT_MAGIC:
            raise FormatError(f"bad artifact magic {magic!r}")
        if version != ARTIFACT_VERSION:
            raise FormatError(f"unsupported artifact version {version}")
        expected = _HEADER.size + 2 * n + 4 * (n * d_vc + k * d_wc)
        if len(blob) != expected:
            raise FormatError(f"artifact has {len(blob)} bytes, header implies {expected}")
        off = _HEADER.size
        part = np.frombuffer(blob, "<u2", n, off).astype(np.intp)
        off += 2 * n
        node = np.frombuffer(blob, "<f4", n * d_vc, off).reshape(n, d_vc)
        off += 4 * n * d_vc
        hedge = np.frombuffer(blob, "<f4", k * d_wc, off).reshape(k, d_wc)
        return cls(node.copy(), hedge.copy(), part, d, p, model_id, lo, hi)


HEADER_BYTES = _HEADER.size


def decompress(artifact: CompressedArtifact, params: ParamStore, decoder_spec: MlpSpec) -> np.ndarray:
    """Reconstruct the (normalized) N x d subsignal from an artifact."""
    if decoder_spec.widths[0] != artifact.d_vc + artifact.d_wc or decoder_spec.widths[-1] != artifact.d:
        raise CompatibilityError(
            f"decoder maps {decoder_spec.widths[0]} -> {decoder_spec.widths[-1]}, artifact needs "
            f"{artifact.d_vc + artifact.d_wc} -> {artifact.d}"
        )
    h_vc = Tensor(artifact.node_codes, dtype=params.dtype)
    h_wc = Tensor(artifact.hedge_codes, dtype=params.dtype)
    return decode(h_vc, h_wc, artifact.node_hedge, params, decoder_spec).data


def model_digest(params: ParamStore) -> bytes:
    """SHA-256 over parameter names and float32 little-endian values."""
    h = hashlib.sha256()
    for name in sorted(params):
        h.update(name.encode())
        h.update(np.ascontiguousarray(params[name].data, dtype="<f4").tobytes())
    return h.digest()
