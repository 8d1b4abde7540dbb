import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from glsl_wsn import autodiff as ad
from glsl_wsn.autodiff import Tensor, grad_check
from glsl_wsn.kernels import (
    GATKernel,
    GatLayerParams,
    GCNKernel,
    GcnLayerParams,
    KernelError,
    gat_attention,
    gat_layer_forward,
    gcn_layer_forward,
    make_kernel,
    normalize_adjacency,
)


def leaky(x, slope):
    return x if x > 0 else slope * x


def gat_oracle(h, adj, params: GatLayerParams):
    """Per-node, per-neighbour loops."""
    n = h.shape[0]
    k_heads, f_out, _ = params.weights.shape
    out = np.zeros((n, k_heads * f_out))
    alphas = np.zeros((k_heads, n, n))
    for k in range(k_heads):
        q = [params.weights[k] @ h[i] for i in range(n)]
        a = params.attn[k]
        for i in range(n):
            nbrs = [j for j in range(n) if adj[i, j]]
            scores = {}
            for j in nbrs:
                s = sum(a[c] * q[i][c] for c in range(f_out)) + sum(a[f_out + c] * q[j][c] for c in range(f_out))
                scores[j] = leaky(s, params.slope)
            top = max(scores.values())
            z = sum(np.exp(v - top) for v in scores.values())
            acc = np.zeros(f_out)
            for j in nbrs:
                alpha = np.exp(scores[j] - top) / z
                alphas[k, i, j] = alpha
                acc += alpha * q[j]
            out[i, k * f_out : (k + 1) * f_out] = np.tanh(acc)
    return out, alphas


def random_graph(rng, n):
    adj = (rng.random((n, n)) < 0.5).astype(float)
    np.fill_diagonal(adj, 1.0)
    return adj


def random_gat(rng, k, f_out, f_in):
    return GatLayerParams(rng.normal(size=(k, f_out, f_in)), rng.normal(size=(k, 2 * f_out)), 0.2)


@pytest.mark.parametrize("seed", range(10))
def test_gat_matches_loop_oracle(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 7))
    h = rng.normal(size=(n, 4))
    adj = random_graph(rng, n)
    p = random_gat(rng, 2, 3, 4)
    ref, ref_alpha = gat_oracle(h, adj, p)
    np.testing.assert_allclose(gat_layer_forward(h, adj, p), ref, atol=1e-10, rtol=0)
    np.testing.assert_allclose(gat_attention(h, adj, p), ref_alpha, atol=1e-10, rtol=0)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 100_000), st.integers(1, 6), st.integers(1, 3))
def test_attention_rows_sum_to_one(seed, n, heads):
    rng = np.random.default_rng(seed)
    adj = random_graph(rng, n)
    alpha = gat_attention(rng.normal(size=(n, 3)), adj, random_gat(rng, heads, 2, 3))
    np.testing.assert_allclose(alpha.sum(-1), 1.0, atol=1e-9)
    assert np.all(alpha[:, adj == 0] == 0)


def test_gat_single_node():
    rng = np.random.default_rng(0)
    h = rng.normal(size=(1, 3))
    p = random_gat(rng, 2, 2, 3)
    out = gat_layer_forward(h, np.ones((1, 1)), p)
    expected = np.concatenate([np.tanh(p.weights[k] @ h[0]) for k in range(2)])
    np.testing.assert_allclose(out[0], expected, atol=1e-14)
    assert np.all(gat_attention(h, np.ones((1, 1)), p) == 1.0)


def test_gat_identical_features_split_attention_evenly():
    rng = np.random.default_rng(1)
    h = np.tile(rng.normal(size=(1, 4)), (2, 1))
    alpha = gat_attention(h, np.ones((2, 2)), random_gat(rng, 2, 3, 4))
    np.testing.assert_allclose(alpha, 0.5, atol=1e-15)


def test_gat_isolated_node_without_loop_errors():
    adj = np.array([[1.0, 1.0], [0.0, 0.0]])
    with pytest.raises(KernelError):
        gat_layer_forward(np.ones((2, 2)), adj, random_gat(np.random.default_rng(0), 1, 2, 2))


def test_gat_invariant_to_neighbour_order():
    rng = np.random.default_rng(2)
    n = 5
    h = rng.normal(size=(n, 3))
    adj = random_graph(rng, n)
    p = random_gat(rng, 2, 2, 3)
    perm = rng.permutation(n)
    out = gat_layer_forward(h, adj, p)
    out_perm = gat_layer_forward(h[perm], adj[np.ix_(perm, perm)], p)
    np.testing.assert_allclose(out_perm, out[perm], atol=1e-12)


def test_duplicated_feature_rows_get_equal_attention():
    rng = np.random.default_rng(3)
    h = rng.normal(size=(4, 3))
    h[2] = h[1]
    adj = np.ones((4, 4))
    alpha = gat_attention(h, adj, random_gat(rng, 2, 2, 3))
    np.testing.assert_allclose(alpha[:, :, 1], alpha[:, :, 2], atol=1e-14)


def gcn_oracle(h, adj, w):
    a = (adj != 0).astype(float)
    np.fill_diagonal(a, 1.0)
    d = np.diag(1.0 / np.sqrt(a.sum(1)))
    return np.tanh(d @ a @ d @ h @ w.T)


@pytest.mark.parametrize("seed", range(10))
def test_gcn_matches_matrix_oracle(seed):
    rng = np.random.default_rng(100 + seed)
    n = int(rng.integers(1, 7))
    adj = random_graph(rng, n)
    adj = np.maximum(adj, adj.T)
    h = rng.normal(size=(n, 5))
    w = rng.normal(size=(3, 5))
    np.testing.assert_allclose(gcn_layer_forward(h, adj, GcnLayerParams(w)), gcn_oracle(h, adj, w), atol=1e-10, rtol=0)


def test_gcn_single_node_identity():
    h = np.array([[0.3, -0.7]])
    out = gcn_layer_forward(h, np.ones((1, 1)), GcnLayerParams(np.eye(2)), activation="identity")
    np.testing.assert_array_equal(out, h)


def test_gcn_identical_features_identical_outputs():
    rng = np.random.default_rng(4)
    h = np.tile(rng.normal(size=(1, 3)), (2, 1))
    out = gcn_layer_forward(h, np.ones((2, 2)), GcnLayerParams(rng.normal(size=(2, 3))))
    np.testing.assert_array_equal(out[0], out[1])


def test_normalize_adjacency_examples():
    np.testing.assert_array_equal(normalize_adjacency(np.zeros((3, 3))), np.eye(3))
    np.testing.assert_allclose(normalize_adjacency(np.array([[0.0, 1.0], [1.0, 0.0]])), 0.5, atol=1e-15)
    a = random_graph(np.random.default_rng(5), 6)
    a = np.maximum(a, a.T)
    na = normalize_adjacency(a)
    np.testing.assert_allclose(na, na.T, atol=1e-15)
    assert np.array_equal(na != 0, (a + np.eye(6)) != 0)


@pytest.mark.parametrize("kind", ["gat", "gcn"])
def test_kernel_gradients_on_four_nodes(kind):
    rng = np.random.default_rng(6)
    adj = np.array([[1, 1, 0, 0], [1, 1, 1, 0], [0, 1, 1, 1], [0, 0, 1, 1]], dtype=float)
    kern = make_kernel(kind, 3, 4, adj, heads=2, batch=2)
    params = {k: Tensor(v, requires_grad=True) for k, v in kern.init_params(rng).items()}
    x = Tensor(rng.normal(size=(2, 4, 3)))
    w = Tensor(rng.normal(size=(2, 4, 4)))
    assert grad_check(lambda p: ad.sum(ad.mul(kern(x, p), w)), params) < 1e-4

    h = rng.normal(size=(2, 4, 3))
    fixed = {k: Tensor(v.data) for k, v in params.items()}
    assert grad_check(lambda t: ad.sum(ad.mul(kern(t, fixed), w)), h) < 1e-4


def test_kernels_share_constructor_signature():
    adj = np.ones((3, 3))
    for kind, cls in (("gat", GATKernel), ("gcn", GCNKernel)):
        k = make_kernel(kind, 5, 4, adj)
        assert isinstance(k, cls)
        out = k(Tensor(np.zeros((1, 3, 5))), {n: Tensor(v) for n, v in k.init_params(np.random.default_rng(0)).items()})
        assert out.shape == (1, 3, 4)
    with pytest.raises(KernelError):
        make_kernel("sage", 5, 4, adj)


def test_gat_heads_must_divide_width():
    with pytest.raises(KernelError):
        GATKernel(4, 5, np.ones((2, 2)), heads=2)
