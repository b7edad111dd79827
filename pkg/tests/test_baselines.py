from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from topocomp.baselines import (
    LineGraph,
    LineGraphMPNN,
    MlpAutoencoder,
    bottleneck_size,
    build_line_graph,
    mlp_ae_param_count,
)
from topocomp.errors import CompatibilityError, DimensionError
from topocomp.ingestion import NetworkTopology
from topocomp.synthetic import abilene_topology

F64 = np.float64


def mlp(params, prefix, x):
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


def brute_adjacency(topo):
    arcs = topo.links
    n = len(arcs)
    return np.array([[i != j and bool(set(arcs[i]) & set(arcs[j])) for j in range(n)] for i in range(n)])


def test_line_graph_small_cases():
    chain = NetworkTopology(("a", "b", "c"), (("a", "b"), ("b", "c")))
    assert build_line_graph(chain).pairs.tolist() == [[0, 1]]
    apart = NetworkTopology(("a", "b", "c", "d"), (("a", "b"), ("c", "d")))
    assert build_line_graph(apart).pairs.shape == (0, 2)


def test_line_graph_abilene_brute_force():
    topo = abilene_topology()
    lg = build_line_graph(topo)
    assert lg.n_nodes == 30
    adj = lg.adjacency()
    assert np.array_equal(adj, adj.T)
    assert np.array_equal(adj, brute_adjacency(topo))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_line_graph_random_topologies(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(3, 12))
    names = tuple(f"v{i}" for i in range(n))
    pairs = [(a, b) for a in range(n) for b in range(n) if a != b]
    m = int(rng.integers(1, min(50, len(pairs)) + 1))
    chosen = [pairs[i] for i in rng.permutation(len(pairs))[:m]]
    topo = NetworkTopology(names, tuple((names[a], names[b]) for a, b in chosen))
    lg = build_line_graph(topo)
    assert np.array_equal(lg.adjacency(), brute_adjacency(topo))
    assert LineGraph.from_dict(lg.to_dict()).pairs.tolist() == lg.pairs.tolist()


# --- MLP auto-encoder ------------------------------------------------------


def test_bottleneck_sizes():
    assert bottleneck_size(300, Fraction(1, 3)) == 100
    assert bottleneck_size(720, Fraction(2, 3)) == 480
    assert bottleneck_size(300, Fraction(2, 3)) == 200
    assert bottleneck_size(720, Fraction(1, 3)) == 240


@pytest.mark.parametrize("n, d, rc", [(30, 10, Fraction(1, 3)), (72, 10, Fraction(2, 3)), (5, 3, Fraction(1, 2))])
def test_mlp_ae_param_count_closed_form(n, d, rc):
    model = MlpAutoencoder(n, d, rc)
    params = model.init_params(np.random.default_rng(0))
    assert params.count() == model.n_params() == mlp_ae_param_count(n, d, rc)


def test_mlp_ae_forward_matches_manual():
    model = MlpAutoencoder(4, 3, Fraction(1, 2), hidden=(8, 6))
    params = model.init_params(np.random.default_rng(1), dtype=F64)
    x = np.random.default_rng(2).random((2, 4, 3))
    out = model.forward(params, x)
    for b in range(2):
        code = mlp(params, "enc", x[b].ravel())
        np.testing.assert_allclose(out.node_codes.data[b], code, rtol=1e-12)
        np.testing.assert_allclose(out.recon.data[b * 4 : (b + 1) * 4].ravel(), mlp(params, "dec", code), rtol=1e-12)
    assert model.ratio() == Fraction(6, 12)
    with pytest.raises(CompatibilityError):
        model.forward(params, np.ones((1, 4, 4)))
    with pytest.raises(ValueError):
        MlpAutoencoder(4, 3, Fraction(3, 2))


def test_mlp_ae_hyper_roundtrip():
    model = MlpAutoencoder(30, 10, Fraction(1, 3))
    again = MlpAutoencoder.from_hyper(model.hyper)
    assert again.specs == model.specs


# --- line-graph MPNN -------------------------------------------------------


def reference_mpnn(params, x, lg):
    n = len(x)
    pairs = [tuple(p) for p in lg.pairs.tolist()]
    h0 = mlp(params, "encoder", x)
    w = h0.shape[1]
    he = [mlp(params, "phi_e", pool(h0[list(e)], w)) for e in pairs]
    nb = [[j for j, f in enumerate(pairs) if j != i and set(f) & set(e)] for i, e in enumerate(pairs)]
    he = [mlp(params, "phi_e2e", pool([mlp(params, "psi_e2e", np.r_[he[i], he[j]]) for j in nb[i]], w)) for i in range(len(pairs))]
    inc = [[i for i, e in enumerate(pairs) if v in e] for v in range(n)]
    hv1 = np.stack([mlp(params, "phi_e2v", pool([mlp(params, "psi_e2v", np.r_[h0[v], he[i]]) for i in inc[v]], w)) for v in range(n)])
    he = [mlp(params, "phi_v2e", pool([mlp(params, "psi_v2e", np.r_[he[i], hv1[v]]) for v in e], w)) for i, e in enumerate(pairs)]
    code = np.stack([mlp(params, "phi_code", pool([mlp(params, "psi_code", np.r_[x[v], hv1[v], he[i]]) for i in inc[v]], w)) for v in range(n)])
    return code, mlp(params, "decoder", code)


def path_graph(n_links):
    return LineGraph(n_links, np.array([[i, i + 1] for i in range(n_links - 1)], dtype=np.intp).reshape(-1, 2))


def seeded_mpnn(lg, d=3, final_dim=2, h=4):
    model = LineGraphMPNN(lg.n_nodes, d, lg, final_dim, d_hidden=h)
    params = model.init_params(np.random.default_rng(0), dtype=F64)
    rng = np.random.default_rng(1)
    for name in params:
        if name.endswith("bias"):
            params[name] = rng.normal(0, 0.1, params[name].shape)
    return model, params


def test_mpnn_matches_manual_trace_on_path():
    model, params = seeded_mpnn(path_graph(4))
    x = np.random.default_rng(2).random((4, 3))
    out = model.forward(params, x)
    code, recon = reference_mpnn(params, x, model.line_graph)
    np.testing.assert_allclose(out.node_codes.data, code, rtol=1e-12, atol=1e-14)
    np.testing.assert_allclose(out.recon.data, recon, rtol=1e-12, atol=1e-14)
    assert model.ratio() == Fraction(2, 3)


def test_mpnn_isolated_node_is_defined():
    lg = LineGraph(3, np.array([[0, 1]], dtype=np.intp))
    model, params = seeded_mpnn(lg)
    x = np.random.default_rng(3).random((3, 3))
    out = model.forward(params, x)
    assert np.all(np.isfinite(out.recon.data))
    code, _ = reference_mpnn(params, x, lg)
    np.testing.assert_allclose(out.node_codes.data, code, rtol=1e-12, atol=1e-14)


def test_mpnn_invariant_to_neighbour_enumeration_order():
    lg = build_line_graph(abilene_topology())
    model, params = seeded_mpnn(lg, d=10, final_dim=4, h=20)
    shuffled = LineGraph(lg.n_nodes, lg.pairs[np.random.default_rng(4).permutation(len(lg.pairs))][:, ::-1])
    other = LineGraphMPNN(lg.n_nodes, 10, shuffled, 4, d_hidden=20)
    x = np.random.default_rng(5).random((2, 30, 10))
    a = model.forward(params, x).recon.data
    b = other.forward(params, x).recon.data
    np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-14)


def test_mpnn_batch_equals_single_and_checks_size():
    lg = build_line_graph(abilene_topology())
    model, params = seeded_mpnn(lg, d=10, final_dim=7, h=6)
    x = np.random.default_rng(6).random((3, 30, 10))
    batched = model.forward(params, x).recon.data
    np.testing.assert_allclose(batched[30:60], model.forward(params, x[1]).recon.data, rtol=1e-12)
    with pytest.raises(DimensionError):
        LineGraphMPNN(29, 10, lg, 4)
    again = LineGraphMPNN.from_hyper(model.hyper)
    assert again.specs == model.specs
