"""Trainable compressors sharing one small interface.

Each model exposes ``specs`` (role -> :class:`MlpSpec`), ``init_params``,
``forward`` on a batch of normalized subsignals of shape (B, N, d), the
achieved compression ratio and a JSON-able ``hyper`` record from which
:func:`build_model` rebuilds it.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .autodiff import DEFAULT_DTYPE, MlpSpec, ParamStore, Tensor, init_mlp, mlp_forward
from .compression import (
    TopoStructure,
    combmp_rounds,
    compress_combmp,
    compress_setmp,
    compression_ratio,
    decode,
    init_structure_embeddings,
)
from .errors import CompatibilityError, ParameterError
from .topology import greedy_labels, hyperedge_sizes, infer_edge_array, snr_similarity

MODEL_KINDS = ("setmp", "combmp", "mpnn", "mlp_ae")


@dataclass
class ModelOutput:
    recon: Tensor
    node_codes: Tensor
    hedge_codes: Tensor | None = None
    structure: TopoStructure | None = None


class Model:
    kind = ""
    n: int
    d: int
    specs: dict[str, MlpSpec]

    def init_params(self, rng: np.random.Generator, dtype=DEFAULT_DTYPE) -> ParamStore:
        params = ParamStore()
        for role, spec in self.specs.items():
            params.update(init_mlp(spec, rng, role, dtype))
        return params

    def check_input(self, batch) -> np.ndarray:
        batch = np.asarray(batch)
        if batch.ndim == 2:
            batch = batch[None]
        if batch.shape[1:] != (self.n, self.d):
            raise CompatibilityError(
                f"{self.kind} model expects subsignals of shape ({self.n}, {self.d}), got {batch.shape[1:]}"
            )
        return batch

    def forward(self, params: ParamStore, batch, structure=None) -> ModelOutput:
        raise NotImplementedError

    def ratio(self) -> Fraction:
        raise NotImplementedError

    @property
    def hyper(self) -> dict:
        raise NotImplementedError


class TopoCompressor(Model):
    """SetMP (``kind="setmp"``) or CombMP (``kind="combmp"``) compressor."""

    def __init__(self, kind, n, d, p, d_vc, d_wc, d_hidden=20, rounds=1, k_edges=2, decoder_hidden=None):
        if kind not in ("setmp", "combmp"):
            raise ParameterError(f"unknown topological model kind {kind!r}")
        self.kind = kind
        self.n, self.d, self.p = int(n), int(d), int(p)
        self.d_vc, self.d_wc, self.d_hidden = int(d_vc), int(d_wc), int(d_hidden)
        self.rounds, self.k_edges = int(rounds), int(k_edges)
        self.decoder_hidden = tuple(decoder_hidden or (self.d_hidden,))
        self.sizes = hyperedge_sizes(self.n, self.p)
        self.k = len(self.sizes)
        h, d = self.d_hidden, self.d
        hidden = (h,)

        def mlp(inp, out, mid=hidden):
            return MlpSpec((inp, *mid, out))

        specs = {
            "encoder": mlp(d, h),
            "phi_w": mlp(3 * h, h),
            "psi_v2w": mlp(d + self.d_vc + h, h),
            "phi_v2w": mlp(3 * h, self.d_wc),
            "decoder": mlp(self.d_vc + self.d_wc, d, self.decoder_hidden),
        }
        if kind == "setmp":
            specs["psi_w2v"] = mlp(d + 2 * h, h)
            specs["phi_w2v"] = mlp(3 * h, self.d_vc)
        else:
            specs.update(
                phi_e=mlp(3 * h, h),
                psi_e2e=mlp(2 * h, h),
                phi_e2e=mlp(3 * h, h),
                psi_e2w=mlp(2 * h, h),
                phi_e2w=mlp(3 * h, h),
                psi_w2e=mlp(2 * h, h),
                phi_w2e=mlp(3 * h, h),
                psi_e2v=mlp(d + 2 * h, h),
                phi_e2v=mlp(3 * h, self.d_vc),
            )
        self.specs = specs

    @property
    def hyper(self) -> dict:
        return {
            "kind": self.kind, "n": self.n, "d": self.d, "p": self.p, "d_vc": self.d_vc,
            "d_wc": self.d_wc, "d_hidden": self.d_hidden, "rounds": self.rounds,
            "k_edges": self.k_edges, "decoder_hidden": list(self.decoder_hidden),
        }

    def ratio(self) -> Fraction:
        return compression_ratio(self.n, self.d, self.k, self.d_vc, self.d_wc)

    def infer_structure(self, embeddings: np.ndarray) -> TopoStructure:
        """Hyperedges (and CombMP edges) from node embeddings of shape (B, N, d')."""
        sim = snr_similarity(embeddings)
        labels = greedy_labels(sim, self.p)
        edges = infer_edge_array(sim, labels, self.k_edges) if self.kind == "combmp" else None
        return TopoStructure.from_labels(labels, edges)

    def forward(self, params, batch, structure=None) -> ModelOutput:
        batch = self.check_input(batch)
        b = len(batch)
        x = Tensor(batch.reshape(b * self.n, self.d), dtype=params.dtype)
        h_v0 = mlp_forward(self.specs["encoder"], params, x, "encoder")
        if structure is None:
            structure = self.infer_structure(h_v0.data.reshape(b, self.n, self.d_hidden))
        state = init_structure_embeddings(h_v0, structure, params, self.specs)
        if self.kind == "setmp":
            h_vc, h_wc = compress_setmp(x, h_v0, structure, params, self.specs, h_w0=state.h_w)
        else:
            state = combmp_rounds(state, structure, params, self.specs, self.rounds)
            h_vc, h_wc = compress_combmp(x, h_v0, state, structure, params, self.specs)
        recon = decode(h_vc, h_wc, structure.node_hedge, params, self.specs["decoder"])
        return ModelOutput(recon, h_vc, h_wc, structure)


def build_model(hyper: dict) -> Model:
    """Rebuild a model from its ``hyper`` record."""
    from .baselines import LineGraphMPNN, MlpAutoencoder

    kind = hyper["kind"]
    args = {k: v for k, v in hyper.items() if k != "kind"}
    if kind in ("setmp", "combmp"):
        return TopoCompressor(kind, **args)
    if kind == "mlp_ae":
        return MlpAutoencoder.from_hyper(hyper)
    if kind == "mpnn":
        return LineGraphMPNN.from_hyper(hyper)
    raise ParameterError(f"unknown model kind {kind!r}; expected one of {MODEL_KINDS}")
