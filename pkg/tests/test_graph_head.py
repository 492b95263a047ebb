import math

import numpy as np
import pytest

from mscg import graph_head as gh
from mscg.layers import NumericalFault
from mscg.numerics import ContractError, RngState


def loop_normalize(a_star):
    n = a_star.shape[0]
    a = a_star + np.eye(n)
    d = [sum(a[i, j] for j in range(n)) for i in range(n)]
    return np.array([[a[i, j] / math.sqrt(d[i] * d[j]) for j in range(n)] for i in range(n)])


def hand_graph(z):
    """Independent scalar walk through the eval-mode adjacency construction."""
    n = z.shape[0]
    a1 = np.maximum(z @ z.T, 0)
    gamma = math.sqrt(1 + n / (np.trace(a1) + gh.EPS))
    a_star = a1 + gamma * np.diag(np.diag(a1))
    return loop_normalize(a_star), gamma


# -------------------------------------------------------------- scalar cases

def test_kl_cases():
    assert gh.kl_divergence(np.zeros((1, 3, 2)), np.zeros((1, 3, 2))).value[0] == 0.0
    assert gh.kl_divergence(np.ones((1, 1)), np.zeros((1, 1))).item() == pytest.approx(0.5, abs=1e-15)


def test_kl_divides_by_node_count_only():
    mu, ls = np.full((4, 3), 0.5), np.full((4, 3), 0.2)
    per_entry = -0.5 * (1 + 0.4 - 0.25 - math.exp(0.4))
    assert gh.kl_divergence(mu, ls).item() == pytest.approx(per_entry * 12 / 4, rel=1e-12)


def test_diagonal_loss_identity_case():
    loss, gamma = gh.diagonal_loss(np.eye(2))
    assert gamma.item() == pytest.approx(math.sqrt(1 + 2 / (2 + 1e-5)), rel=1e-12)
    assert loss.item() == pytest.approx(-(gamma.item() / 4) * 2 * math.log(1 + 1e-5 + 1e-12), rel=1e-12)
    assert loss.item() == pytest.approx(-7.07e-6, rel=1e-3)


def test_diagonal_loss_zero_case():
    loss, gamma = gh.diagonal_loss(np.zeros((1, 1)))
    assert gamma.item() == pytest.approx(math.sqrt(1 + 1e5), rel=1e-12)
    # every log also carries the 1e-12 floor
    assert loss.item() == pytest.approx(-gamma.item() * math.log(1e-5 + 1e-12), rel=1e-12)
    assert loss.item() == pytest.approx(-gamma.item() * math.log(1e-5), rel=1e-7)


def test_diagonal_loss_saturates_at_one():
    big = np.diag([3.0, 7.0, 1.0])
    loss, gamma = gh.diagonal_loss(big)
    assert loss.item() == pytest.approx(-(gamma.item() / 9) * 3 * math.log(1 + 1e-5 + 1e-12), rel=1e-12)


def test_normalize_adjacency_cases():
    np.testing.assert_array_equal(gh.normalize_adjacency(np.zeros((4, 4))).value, np.eye(4))
    np.testing.assert_allclose(gh.normalize_adjacency(np.ones((2, 2))).value, np.array([[2, 1], [1, 2]]) / 3,
                               rtol=1e-15)


def test_normalize_adjacency_loop_oracle(rng):
    m = rng.uniform((5, 5))
    a = m + m.T
    np.testing.assert_allclose(gh.normalize_adjacency(a).value, loop_normalize(a), atol=1e-6)


def test_normalize_adjacency_needs_square():
    with pytest.raises(ContractError):
        gh.normalize_adjacency(np.ones((2, 3)))


def test_zero_embedding_gives_identity():
    g = gh.build_graph(np.zeros((1, 4, 3)), np.zeros((1, 4, 3)))
    np.testing.assert_array_equal(g.a_prime.value, 0)
    np.testing.assert_array_equal(g.a_hat.value[0], np.eye(4))
    assert g.gamma.value[0] == pytest.approx(math.sqrt(1 + 4 / 1e-5))


def test_hand_set_embedding():
    z = np.array([[1.0, 0, 0], [1.0, 0, 0], [0, 1.0, 0], [0, 0, 2.0]])
    g = gh.build_graph(z[None], np.full((1, 4, 3), -30.0))
    ref, gamma = hand_graph(z)
    np.testing.assert_allclose(g.a_hat.value[0], ref, atol=1e-12)
    assert g.gamma.value[0] == pytest.approx(gamma)
    # the two identical nodes are linked, the orthogonal ones are not
    assert g.a_hat.value[0, 0, 1] > 0 and g.a_hat.value[0, 2, 3] == 0


def test_adaptive_residual_values():
    mu, ls = np.array([[[2.0]]]), np.array([[[0.5]]])
    assert gh.adaptive_residual(mu, ls, np.array([3.0])).value.item() == pytest.approx(3 * 2 * 0.5)


def test_enhance_diagonal_per_item_gamma():
    a = np.stack([np.full((2, 2), 1.0), np.full((2, 2), 2.0)])
    out = gh.enhance_diagonal(a, np.array([1.0, 0.5])).value
    np.testing.assert_array_equal(out[0], [[2, 1], [1, 2]])
    np.testing.assert_array_equal(out[1], [[3, 2], [2, 3]])


# ---------------------------------------------------------- algebra over seeds

@pytest.mark.parametrize("seed", range(100))
def test_scg_algebra(seed):
    r = RngState(seed)
    b, n, c = 2, int(r.integers(2, 10)), int(r.integers(1, 8))
    mu = r.normal((b, n, c)) * r.uniform((), 0.1, 3.0)
    ls = r.uniform((b, n, c), -2, 1)
    g = gh.build_graph(mu, ls, r.normal((b, n, c)))
    a = g.a_hat.value
    np.testing.assert_allclose(a, np.swapaxes(a, -1, -2), atol=1e-6)
    assert (a >= 0).all()
    assert (np.diagonal(a, axis1=-2, axis2=-1) > 0).all()
    assert (g.gamma.value >= 1).all()
    assert np.isfinite(g.kl_loss.value) and np.isfinite(g.dl_loss.value)


@pytest.mark.parametrize("seed", range(100))
def test_gamma_decreases_with_trace(seed):
    r = RngState(seed).substream("gamma")
    n = int(r.integers(1, 20))
    traces = np.sort(r.uniform(8, 0, 50))
    diag = np.zeros((8, n, n))
    diag[:, 0, 0] = traces
    gam = gh.diag_gamma(diag).value
    assert (gam >= 1).all()
    assert (np.diff(gam) <= 0).all()
    np.testing.assert_allclose(gam, np.sqrt(1 + n / (traces + gh.EPS)), rtol=1e-14)


def test_eval_mode_is_deterministic(rng):
    scg = gh.SCG(6, 3, 2, rng.substream("scg"), dtype=np.float64)
    x = rng.uniform((2, 6, 4, 4))
    a, b = scg(x, train=False), scg(x, train=False)
    assert np.array_equal(a.a_hat.value, b.a_hat.value) and np.array_equal(a.residual.value, b.residual.value)


def test_scg_shapes_and_errors(rng):
    scg = gh.SCG(6, 3, 2, rng.substream("scg"), dtype=np.float64)
    g = scg(rng.uniform((2, 6, 4, 4)), train=True, rng=rng.substream("n"))
    assert g.a_hat.shape == (2, 4, 4) and g.node_features.shape == (2, 4, 6) and g.residual.shape == (2, 4, 3)
    with pytest.raises(ContractError):
        scg(rng.uniform((1, 6, 1, 1)), train=False)
    with pytest.raises(ValueError):
        scg(rng.uniform((1, 6, 4, 4)), train=True)


def test_scg_starts_at_unit_sigma(rng):
    scg = gh.SCG(6, 3, 2, rng.substream("scg"), dtype=np.float64)
    g = scg(rng.uniform((1, 6, 4, 4)), train=False)
    np.testing.assert_array_equal(g.log_sigma.value, 0)


def test_nan_input_faults_with_stage(rng):
    with pytest.raises(NumericalFault, match="latent embedding"):
        gh.build_graph(np.full((1, 2, 2), np.nan), np.zeros((1, 2, 2)))


def test_node_order_is_row_major():
    grid = np.arange(2 * 3 * 2 * 2, dtype=float).reshape(2, 3, 2, 2)
    nodes = gh.grid_to_nodes(grid).value
    np.testing.assert_array_equal(nodes[1, 2], grid[1, :, 1, 0])
    np.testing.assert_array_equal(gh.nodes_to_grid(nodes, 2).value, grid)


# -------------------------------------------------------------------- GCN

def test_gcn_identity_case(rng):
    gcn = gh.GCN(3, 3, 2, rng.substream("g"), dtype=np.float64)
    gcn.theta_1.value[...] = np.eye(3)
    x = rng.uniform((1, 4, 3), -1, 1)
    z1 = gcn.bn(gh.ops.relu(gh.gcn_layer(np.eye(4)[None], x, gcn.theta_1)), train=False).value
    # eval-mode batch norm with fresh buffers is x / sqrt(1 + eps)
    np.testing.assert_allclose(z1 * math.sqrt(1 + 1e-5), np.maximum(x, 0), atol=1e-12)


def test_gcn_two_node_chain_hand_oracle():
    gcn = gh.GCN(2, 2, 1, RngState(0), dtype=np.float64)
    gcn.theta_1.value[...] = [[1.0, -1.0], [0.5, 2.0]]
    gcn.theta_2.value[...] = [[1.0], [3.0]]
    a = np.array([[0.5, 0.5], [0.5, 0.5]])
    x = np.array([[1.0, 2.0], [3.0, -1.0]])
    h = np.maximum(a @ x @ gcn.theta_1.value, 0) / math.sqrt(1 + 1e-5)
    ref = a @ h @ gcn.theta_2.value
    np.testing.assert_allclose(gcn(a[None], x[None], train=False).value[0], ref, atol=1e-12)
