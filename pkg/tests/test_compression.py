from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from topocomp.autodiff import MlpSpec, ParamStore, Tensor, init_mlp, segment_aggregate
from topocomp.compression import (
    HEADER_BYTES,
    CompressedArtifact,
    TopoStructure,
    combmp_rounds,
    compress_combmp,
    compress_setmp,
    compression_ratio,
    decode,
    decompress,
    init_structure_embeddings,
    model_digest,
    shared_endpoint_pairs,
)
from topocomp.errors import CompatibilityError, ContractError, FormatError
from topocomp.models import TopoCompressor
from topocomp.topology import HyperedgePartition

F64 = np.float64


# --- plain-numpy reference -------------------------------------------------


def mlp(params, prefix, x):
    x = np.asarray(x, dtype=F64)
    i = 0
    while f"{prefix}.{i}.weight" in params:
        x = x @ params[f"{prefix}.{i}.weight"].data + params[f"{prefix}.{i}.bias"].data
        if f"{prefix}.{i + 1}.weight" in params:
            x = np.maximum(x, 0)
        i += 1
    return x


def pool(rows, width):
    rows = np.asarray(rows, dtype=F64).reshape(-1, width)
    if len(rows) == 0:
        return np.zeros(3 * width)
    return np.concatenate([rows.mean(0), rows.max(0), rows.min(0)])


def reference_setmp(params, x, hyperedges):
    h0 = mlp(params, "encoder", x)
    width = h0.shape[1]
    hw = {k: mlp(params, "phi_w", pool(h0[list(m)], width)) for k, m in enumerate(hyperedges)}
    home = {v: k for k, m in enumerate(hyperedges) for v in m}
    hvc = np.stack([
        mlp(params, "phi_w2v", pool(mlp(params, "psi_w2v", np.r_[x[v], h0[v], hw[home[v]]]), width))
        for v in range(len(x))
    ])
    hwc = np.stack([
        mlp(params, "phi_v2w", pool([mlp(params, "psi_v2w", np.r_[x[v], hvc[v], hw[k]]) for v in m], width))
        for k, m in enumerate(hyperedges)
    ])
    recon = np.stack([mlp(params, "decoder", np.r_[hvc[v], hwc[home[v]]]) for v in range(len(x))])
    return hvc, hwc, recon


def reference_combmp(params, x, hyperedges, edges, rounds=1):
    h0 = mlp(params, "encoder", x)
    width = h0.shape[1]
    home = {v: k for k, m in enumerate(hyperedges) for v in m}
    hw = [mlp(params, "phi_w", pool(h0[list(m)], width)) for m in hyperedges]
    he = [mlp(params, "phi_e", pool(h0[[u, v]], width)) for u, v in edges]
    nbrs = [[j for j, f in enumerate(edges) if j != i and set(f) & set(e)] for i, e in enumerate(edges)]
    ehome = [home[u] for u, _ in edges]

    def e2e(he):
        return [
            mlp(params, "phi_e2e", pool([mlp(params, "psi_e2e", np.r_[he[i], he[j]]) for j in nbrs[i]], width))
            for i in range(len(edges))
        ]

    for _ in range(rounds):
        he = e2e(he)
        hw = [
            mlp(params, "phi_e2w", pool([mlp(params, "psi_e2w", np.r_[hw[k], he[i]]) for i in range(len(edges)) if ehome[i] == k], width))
            for k in range(len(hyperedges))
        ]
        he = [mlp(params, "phi_w2e", pool(mlp(params, "psi_w2e", np.r_[he[i], hw[ehome[i]]]), width)) for i in range(len(edges))]
        he = e2e(he)
    hvc = np.stack([
        mlp(params, "phi_e2v", pool([mlp(params, "psi_e2v", np.r_[x[v], h0[v], he[i]]) for i, e in enumerate(edges) if v in e], width))
        for v in range(len(x))
    ])
    hwc = np.stack([
        mlp(params, "phi_v2w", pool([mlp(params, "psi_v2w", np.r_[x[v], hvc[v], hw[k]]) for v in m], width))
        for k, m in enumerate(hyperedges)
    ])
    recon = np.stack([mlp(params, "decoder", np.r_[hvc[v], hwc[home[v]]]) for v in range(len(x))])
    return hvc, hwc, recon, he, hw


def run_model(model, params, x, part):
    structure = TopoStructure.from_partitions([part])
    return model.forward(params, x, structure)


# --- ratio -----------------------------------------------------------------


@pytest.mark.parametrize("args, want", [
    ((30, 10, 4, 2, 10), Fraction(1, 3)),
    ((30, 10, 5, 5, 10), Fraction(2, 3)),
    ((72, 10, 9, 2, 10), Fraction(234, 720)),
    ((72, 10, 12, 5, 10), Fraction(2, 3)),
])
def test_ratio_examples(args, want):
    assert compression_ratio(*args) == want


def test_ratio_rejects_nonpositive():
    with pytest.raises(ValueError):
        compression_ratio(30, 10, 0, 2, 10)


# --- structure -------------------------------------------------------------


def test_structure_validation():
    with pytest.raises(ContractError):
        TopoStructure(np.array([0, 0, 2]), 3)
    with pytest.raises(ContractError):
        TopoStructure(np.array([0, 0, 1]), 2, np.array([[0, 2]]))


def test_shared_endpoint_pairs_brute_force():
    rng = np.random.default_rng(0)
    ends = rng.integers(0, 8, (12, 2))
    recv, send = shared_endpoint_pairs(ends, 8)
    want = sorted((i, j) for i in range(12) for j in range(12) if i != j and set(ends[i]) & set(ends[j]))
    assert list(zip(recv.tolist(), send.tolist())) == want


# --- pipelines against the plain reference ---------------------------------


def seeded(kind, n=6, d=4, p=5, d_vc=2, d_wc=3, h=5, seed=0):
    model = TopoCompressor(kind, n, d, p, d_vc, d_wc, d_hidden=h)
    params = model.init_params(np.random.default_rng(seed), dtype=F64)
    # non-zero biases exercise every term of the reference
    rng = np.random.default_rng(seed + 100)
    for name in params:
        if name.endswith("bias"):
            params[name] = rng.normal(0, 0.1, params[name].shape)
    return model, params


def test_setmp_matches_manual_trace():
    model, params = seeded("setmp", n=10, p=5)
    x = np.random.default_rng(1).random((10, 4))
    part = HyperedgePartition(((0, 2, 4, 6, 8), (1, 3, 5, 7, 9)), 5)
    out = run_model(model, params, x, part)
    hvc, hwc, recon = reference_setmp(params, x, part.hyperedges)
    np.testing.assert_allclose(out.node_codes.data, hvc, rtol=1e-12, atol=1e-14)
    np.testing.assert_allclose(out.hedge_codes.data, hwc, rtol=1e-12, atol=1e-14)
    np.testing.assert_allclose(out.recon.data, recon, rtol=1e-12, atol=1e-14)


def test_combmp_matches_manual_trace():
    model, params = seeded("combmp", n=6, p=6)
    x = np.random.default_rng(2).random((6, 4))
    part = HyperedgePartition(((0, 1, 2), (3, 4, 5)), 5, ((0, 1), (1, 2), (3, 4), (3, 5)))
    out = run_model(model, params, x, part)
    hvc, hwc, recon, _, _ = reference_combmp(params, x, part.hyperedges, part.edges)
    np.testing.assert_allclose(out.node_codes.data, hvc, rtol=1e-12, atol=1e-14)
    np.testing.assert_allclose(out.hedge_codes.data, hwc, rtol=1e-12, atol=1e-14)
    np.testing.assert_allclose(out.recon.data, recon, rtol=1e-12, atol=1e-14)


def test_combmp_two_rounds_match_trace():
    model, params = seeded("combmp", n=6, p=6)
    model.rounds = 2
    x = np.random.default_rng(3).random((6, 4))
    part = HyperedgePartition(((0, 1, 2), (3, 4, 5)), 5, ((0, 1), (0, 2), (1, 2), (4, 5)))
    out = run_model(model, params, x, part)
    hvc, hwc, _, _, _ = reference_combmp(params, x, part.hyperedges, part.edges, rounds=2)
    np.testing.assert_allclose(out.node_codes.data, hvc, rtol=1e-12, atol=1e-14)
    np.testing.assert_allclose(out.hedge_codes.data, hwc, rtol=1e-12, atol=1e-14)


def test_combmp_isolated_edge_and_edgeless_node_use_zero_aggregate():
    model, params = seeded("combmp", n=6, p=6)
    x = np.random.default_rng(4).random((6, 4))
    # edge (0, 1) has no neighbours; node 2 and nodes 3..5 except 4, 5 have no edge
    part = HyperedgePartition(((0, 1, 2), (3, 4, 5)), 5, ((0, 1), (4, 5)))
    out = run_model(model, params, x, part)
    hvc, hwc, _, _, _ = reference_combmp(params, x, part.hyperedges, part.edges)
    assert np.all(np.isfinite(out.node_codes.data))
    np.testing.assert_allclose(out.node_codes.data, hvc, rtol=1e-12, atol=1e-14)
    np.testing.assert_allclose(out.node_codes.data[2], mlp(params, "phi_e2v", np.zeros(15)))


def test_init_embeddings_identical_members_give_hhh():
    h = np.tile([1.0, -2.0, 0.5], (4, 1))
    pooled = segment_aggregate(Tensor(h), np.zeros(4, dtype=int), 1).data
    np.testing.assert_array_equal(pooled[0], np.r_[h[0], h[0], h[0]])
    params = ParamStore({"phi_w.0.weight": np.eye(9), "phi_w.0.bias": np.zeros(9)})
    state = init_structure_embeddings(Tensor(h), TopoStructure(np.zeros(4), 1), params, {"phi_w": MlpSpec((9, 9))})
    np.testing.assert_array_equal(state.h_w.data[0], np.r_[h[0], h[0], h[0]])
    assert state.t == 0 and state.h_e is None


def test_init_embeddings_match_manual_composition():
    model, params = seeded("combmp", n=6, p=6)
    h0 = np.random.default_rng(11).standard_normal((6, 5))
    part = HyperedgePartition(((0, 1, 2), (3, 4, 5)), 6, ((0, 2), (3, 4)))
    state = init_structure_embeddings(Tensor(h0), TopoStructure.from_partitions([part]), params, model.specs)
    for k, members in enumerate(part.hyperedges):
        np.testing.assert_allclose(state.h_w.data[k], mlp(params, "phi_w", pool(h0[list(members)], 5)), rtol=1e-12)
    for i, e in enumerate(part.edges):
        np.testing.assert_allclose(state.h_e.data[i], mlp(params, "phi_e", pool(h0[list(e)], 5)), rtol=1e-12)
    perm = [2, 0, 1, 3, 4, 5]
    shuffled = init_structure_embeddings(Tensor(h0[perm]), TopoStructure.from_partitions([part]), params, model.specs)
    assert np.array_equal(shuffled.h_w.data, state.h_w.data)


def test_rounds_zero_is_identity_and_edgeless_rounds_raise():
    model, params = seeded("combmp", n=6, p=6)
    x = Tensor(np.random.default_rng(5).random((6, 4)))
    structure = TopoStructure(np.array([0, 0, 0, 1, 1, 1]), 2)
    h0 = Tensor(np.random.default_rng(6).random((6, 5)))
    state = init_structure_embeddings(h0, structure, params, model.specs)
    assert combmp_rounds(state, structure, params, model.specs, 0) is state
    with pytest.raises(ContractError, match="SetMP"):
        combmp_rounds(state, structure, params, model.specs, 1)
    assert x.shape == (6, 4)


def test_setmp_equals_combmp_without_edges():
    set_model, set_params = seeded("setmp", n=10, p=5, seed=3)
    comb_model, comb_params = seeded("combmp", n=10, p=5, seed=4)
    for name, t in set_params.items():
        comb_params[name] = t.data.copy()
    x = Tensor(np.random.default_rng(7).random((10, 4)))
    structure = TopoStructure(np.array([0, 1] * 5), 2)
    h0 = Tensor(np.random.default_rng(8).random((10, 5)))
    want = compress_setmp(x, h0, structure, set_params, set_model.specs)
    state = init_structure_embeddings(h0, structure, comb_params, {**comb_model.specs, **set_model.specs})
    state = combmp_rounds(state, structure, comb_params, comb_model.specs, 0)
    got = compress_combmp(x, h0, state, structure, comb_params, {**comb_model.specs, **set_model.specs})
    assert np.array_equal(got[0].data, want[0].data) and np.array_equal(got[1].data, want[1].data)
    with pytest.raises(ContractError):
        compress_combmp(x, h0, state, structure, comb_params, comb_model.specs)


def test_code_shapes_for_reference_configs():
    abil = TopoCompressor("combmp", 30, 10, 8, 2, 10)
    out = abil.forward(abil.init_params(np.random.default_rng(0)), np.random.default_rng(1).random((30, 10)))
    assert out.node_codes.shape == (30, 2) and out.hedge_codes.shape == (4, 10)
    geant = TopoCompressor("setmp", 72, 10, 6, 5, 10)
    out = geant.forward(geant.init_params(np.random.default_rng(0)), np.random.default_rng(1).random((72, 10)))
    assert out.node_codes.shape == (72, 5) and out.hedge_codes.shape == (12, 10)
    assert geant.ratio() == Fraction(2, 3)


def test_single_hyperedge_case():
    model, params = seeded("setmp", n=6, p=6)
    out = model.forward(params, np.random.default_rng(0).random((6, 4)))
    assert out.hedge_codes.shape == (1, 3) and out.node_codes.shape == (6, 2)


def test_batched_forward_equals_per_subsignal():
    model, params = seeded("combmp", n=12, p=6)
    xs = np.random.default_rng(9).random((3, 12, 4))
    batched = model.forward(params, xs)
    for b in range(3):
        single = model.forward(params, xs[b])
        np.testing.assert_allclose(batched.recon.data[b * 12 : (b + 1) * 12], single.recon.data, rtol=1e-12)


# --- decoding and artifacts ------------------------------------------------


def test_pass_through_decoder():
    spec = MlpSpec((5, 3))
    w = np.zeros((5, 3))
    w[:3, :3] = np.eye(3)
    params = ParamStore({"decoder.0.weight": w, "decoder.0.bias": np.zeros(3)})
    art = CompressedArtifact(np.arange(12.0).reshape(4, 3), np.ones((2, 2)), [0, 0, 1, 1], d=3, p=5)
    np.testing.assert_array_equal(decompress(art, params, spec), np.arange(12.0).reshape(4, 3))


def test_decompress_equals_per_row_forward_and_checks_widths():
    spec = MlpSpec((5, 7, 4))
    params = init_mlp(spec, np.random.default_rng(0), "decoder", dtype=F64)
    rng = np.random.default_rng(1)
    art = CompressedArtifact(rng.random((6, 2)), rng.random((2, 3)), [0, 1, 0, 1, 1, 0], d=4, p=5)
    out = decompress(art, params, spec)
    for v in range(6):
        row = np.r_[art.node_codes[v], art.hedge_codes[art.node_hedge[v]]].astype(F64)
        np.testing.assert_allclose(out[v], mlp(params, "decoder", row), rtol=1e-12)
    with pytest.raises(CompatibilityError):
        decompress(art, params, MlpSpec((6, 7, 4)))


def random_artifact(rng):
    n = int(rng.integers(1, 80))
    k = int(rng.integers(1, n + 1))
    labels = np.r_[np.arange(k), rng.integers(0, k, n - k)]
    return CompressedArtifact(
        rng.standard_normal((n, int(rng.integers(1, 8)))).astype(np.float32),
        rng.standard_normal((k, int(rng.integers(1, 12)))).astype(np.float32),
        rng.permutation(labels), d=int(rng.integers(1, 20)), p=int(rng.integers(5, 11)),
        model_id=rng.bytes(32), norm_min=float(rng.normal()), norm_max=float(rng.normal() + 5),
    )


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_artifact_roundtrip_is_bitwise(seed):
    art = random_artifact(np.random.default_rng(seed))
    blob = art.to_bytes()
    back = CompressedArtifact.from_bytes(blob)
    assert back.to_bytes() == blob
    assert back.node_codes.tobytes() == art.node_codes.tobytes()
    assert back.hedge_codes.tobytes() == art.hedge_codes.tobytes()
    assert np.array_equal(back.node_hedge, art.node_hedge)
    assert len(blob) == HEADER_BYTES + 2 * art.n_nodes + 4 * art.stored_floats
    assert art.stored_floats == art.n_nodes * art.d_vc + art.k * art.d_wc


def test_artifact_format_errors():
    blob = random_artifact(np.random.default_rng(0)).to_bytes()
    with pytest.raises(FormatError, match="magic"):
        CompressedArtifact.from_bytes(b"XXXX" + blob[4:])
    with pytest.raises(FormatError, match="version"):
        CompressedArtifact.from_bytes(blob[:4] + b"\x07\x00" + blob[6:])
    with pytest.raises(FormatError):
        CompressedArtifact.from_bytes(blob[:-1])
    with pytest.raises(FormatError):
        CompressedArtifact.from_bytes(blob[:10])


def test_artifact_rejects_dangling_partition():
    with pytest.raises(ContractError):
        CompressedArtifact(np.ones((3, 2)), np.ones((1, 2)), [0, 1, 0], d=4, p=5)


def test_model_digest_tracks_values():
    params = ParamStore({"a": np.ones(3, dtype=np.float32)})
    d1 = model_digest(params)
    params["a"].data[1] = 2
    assert len(d1) == 32 and model_digest(params) != d1


def test_decode_equal_codes_equal_outputs():
    spec = MlpSpec((4, 6, 3))
    params = init_mlp(spec, np.random.default_rng(0), "decoder", dtype=F64)
    hvc = Tensor(np.array([[1.0, 2.0], [1.0, 2.0]]))
    hwc = Tensor(np.array([[0.5, -0.5]]))
    out = decode(hvc, hwc, np.array([0, 0]), params, spec).data
    assert np.array_equal(out[0], out[1])
