"""Comparison models: a flat MLP auto-encoder and a line-graph MPNN."""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .autodiff import MlpSpec, ParamStore, Tensor, concat, gather_rows, mlp_forward, segment_aggregate
from .compression import shared_endpoint_pairs
from .errors import DimensionError
from .ingestion import NetworkTopology
from .models import Model, ModelOutput


@dataclass(frozen=True)
class LineGraph:
    """Nodes are the directed links of a network; ``pairs`` lists adjacent links i < j."""

    n_nodes: int
    pairs: np.ndarray

    def adjacency(self) -> np.ndarray:
        adj = np.zeros((self.n_nodes, self.n_nodes), dtype=bool)
        if len(self.pairs):
            adj[self.pairs[:, 0], self.pairs[:, 1]] = True
            adj[self.pairs[:, 1], self.pairs[:, 0]] = True
        return adj

    def to_dict(self) -> dict:
        return {"n_nodes": self.n_nodes, "pairs": self.pairs.tolist()}

    @classmethod
    def from_dict(cls, data) -> "LineGraph":
        return cls(int(data["n_nodes"]), np.asarray(data["pairs"], dtype=np.intp).reshape(-1, 2))


def build_line_graph(topology: NetworkTopology) -> LineGraph:
    """Two links are adjacent when they share an origin or destination node."""
    arcs = topology.link_array()
    ends = [set(a) for a in arcs.tolist()]
    pairs = [
        (i, j) for i in range(len(ends)) for j in range(i + 1, len(ends)) if ends[i] & ends[j]
    ]
    return LineGraph(len(ends), np.asarray(pairs, dtype=np.intp).reshape(-1, 2))


class MlpAutoencoder(Model):
    """Flattened subsignal -> 1024 -> 512 -> ceil(r_c * N * d) and back, mirrored."""

    kind = "mlp_ae"

    def __init__(self, n, d, rc, hidden=(1024, 512)):
        self.n, self.d = int(n), int(d)
        self.rc = Fraction(rc)
        if not 0 < self.rc <= 1:
            raise ValueError(f"compression factor must lie in (0, 1], got {self.rc}")
        self.hidden = tuple(int(h) for h in hidden)
        flat = self.n * self.d
        self.bottleneck = bottleneck_size(flat, self.rc)
        self.specs = {
            "enc": MlpSpec((flat, *self.hidden, self.bottleneck)),
            "dec": MlpSpec((self.bottleneck, *reversed(self.hidden), flat)),
        }

    @classmethod
    def from_hyper(cls, hyper):
        return cls(hyper["n"], hyper["d"], Fraction(hyper["rc"]), tuple(hyper["hidden"]))

    @property
    def hyper(self) -> dict:
        return {"kind": self.kind, "n": self.n, "d": self.d, "rc": str(self.rc), "hidden": list(self.hidden)}

    def ratio(self) -> Fraction:
        return Fraction(self.bottleneck, self.n * self.d)

    def n_params(self) -> int:
        return sum(s.n_params for s in self.specs.values())

    def forward(self, params, batch, structure=None) -> ModelOutput:
        batch = self.check_input(batch)
        b = len(batch)
        flat = Tensor(batch.reshape(b, self.n * self.d), dtype=params.dtype)
        code = mlp_forward(self.specs["enc"], params, flat, "enc")
        out = mlp_forward(self.specs["dec"], params, code, "dec")
        return ModelOutput(out.reshape(b * self.n, self.d), code)


def bottleneck_size(d_input: int, rc) -> int:
    return math.ceil(Fraction(rc) * d_input)


class LineGraphMPNN(Model):
    """Message passing over the line graph with a per-link code of ``final_dim``.

    Line-graph nodes are the links carrying the signal; line-graph edges join
    adjacent links. One pass runs edge->edge, edge->node, node->edge and a
    final edge->node step that sees the raw link signal and emits the code.
    The decoder reads the link's code alone.
    """

    kind = "mpnn"

    def __init__(self, n, d, line_graph: LineGraph, final_dim, d_hidden=20, decoder_hidden=None):
        if line_graph.n_nodes != n:
            raise DimensionError(f"line graph has {line_graph.n_nodes} nodes, signal has {n} links")
        self.n, self.d = int(n), int(d)
        self.line_graph = line_graph
        self.final_dim, self.d_hidden = int(final_dim), int(d_hidden)
        self.decoder_hidden = tuple(decoder_hidden or (self.d_hidden,))
        h = self.d_hidden

        def mlp(inp, out, mid=(h,)):
            return MlpSpec((inp, *mid, out))

        self.specs = {
            "encoder": mlp(self.d, h),
            "phi_e": mlp(3 * h, h),
            "psi_e2e": mlp(2 * h, h),
            "phi_e2e": mlp(3 * h, h),
            "psi_e2v": mlp(2 * h, h),
            "phi_e2v": mlp(3 * h, h),
            "psi_v2e": mlp(2 * h, h),
            "phi_v2e": mlp(3 * h, h),
            "psi_code": mlp(self.d + 2 * h, h),
            "phi_code": mlp(3 * h, self.final_dim),
            "decoder": mlp(self.final_dim, self.d, self.decoder_hidden),
        }
        self._cache: dict[int, tuple] = {}

    @classmethod
    def from_hyper(cls, hyper):
        return cls(
            hyper["n"], hyper["d"], LineGraph.from_dict(hyper["line_graph"]), hyper["final_dim"],
            hyper["d_hidden"], tuple(hyper["decoder_hidden"]),
        )

    @property
    def hyper(self) -> dict:
        return {
            "kind": self.kind, "n": self.n, "d": self.d, "final_dim": self.final_dim,
            "d_hidden": self.d_hidden, "decoder_hidden": list(self.decoder_hidden),
            "line_graph": self.line_graph.to_dict(),
        }

    def ratio(self) -> Fraction:
        return Fraction(self.final_dim, self.d)

    def _batched(self, b: int):
        if b not in self._cache:
            pairs = self.line_graph.pairs
            offsets = (np.arange(b) * self.n)[:, None, None]
            ends = (pairs[None] + offsets).reshape(-1, 2)
            n_nodes = b * self.n
            nodes = ends.ravel()
            edges = np.repeat(np.arange(len(ends)), 2)
            recv, send = shared_endpoint_pairs(ends, n_nodes)
            self._cache[b] = (ends, nodes, edges, recv, send)
        return self._cache[b]

    def forward(self, params, batch, structure=None) -> ModelOutput:
        batch = self.check_input(batch)
        b = len(batch)
        s = self.specs
        ends, nodes, edges, recv, send = self._batched(b)
        n_v, n_e = b * self.n, len(ends)
        x = Tensor(batch.reshape(n_v, self.d), dtype=params.dtype)

        def mp(role, feats, seg, n_seg):
            msg = mlp_forward(s["psi_" + role], params, concat(feats), "psi_" + role)
            return mlp_forward(s["phi_" + role], params, segment_aggregate(msg, seg, n_seg), "phi_" + role)

        h_v = mlp_forward(s["encoder"], params, x, "encoder")
        h_e = mlp_forward(s["phi_e"], params, segment_aggregate(gather_rows(h_v, nodes), edges, n_e), "phi_e")
        h_e = mp("e2e", [gather_rows(h_e, recv), gather_rows(h_e, send)], recv, n_e)
        h_v1 = mp("e2v", [gather_rows(h_v, nodes), gather_rows(h_e, edges)], nodes, n_v)
        h_e = mp("v2e", [gather_rows(h_e, edges), gather_rows(h_v1, nodes)], edges, n_e)
        code = mp("code", [gather_rows(x, nodes), gather_rows(h_v1, nodes), gather_rows(h_e, edges)], nodes, n_v)
        recon = mlp_forward(s["decoder"], params, code, "decoder")
        return ModelOutput(recon, code)


def mlp_ae_param_count(n: int, d: int, rc, hidden=(1024, 512)) -> int:
    """Closed-form parameter count of :class:`MlpAutoencoder`."""
    widths = [n * d, *hidden, bottleneck_size(n * d, rc)]
    layers = list(zip(widths[:-1], widths[1:]))
    return 2 * sum(a * b for a, b in layers) + sum(b for _, b in layers) + sum(a for a, _ in layers)
