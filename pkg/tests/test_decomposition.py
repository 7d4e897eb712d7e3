import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fedatoms import decomposition as dcmp
from fedatoms.decomposition import DecomposedConv
from fedatoms.errors import ContractError, DimensionError
from fedatoms.tensor_nn import conv2d_backward, conv2d_forward
from oracles import assert_grad_close, naive_conv2d, numerical_grad


@pytest.fixture
def rng():
    return np.random.default_rng(7)


def test_single_atom_single_coefficient():
    atom = np.arange(9.0).reshape(1, 3, 3)
    filters = dcmp.compose(np.array([[[2.0]]]), atom)
    np.testing.assert_array_equal(filters[0, 0], 2.0 * atom[0])


def test_reconstruct_is_weighted_atom_sum(rng):
    alpha = rng.normal(size=(3, 2, 4))
    atoms = rng.normal(size=(4, 3, 3))
    filters = dcmp.reconstruct_filter(DecomposedConv(alpha, atoms))
    for i in range(3):
        for j in range(2):
            expected = sum(alpha[i, j, q] * atoms[q] for q in range(4))
            assert np.max(np.abs(filters[i, j] - expected)) < 1e-13


def test_mismatched_shapes_raise(rng):
    with pytest.raises(DimensionError):
        DecomposedConv(rng.normal(size=(2, 2, 3)), rng.normal(size=(4, 3, 3)))
    with pytest.raises(DimensionError):
        dcmp.compose(rng.normal(size=(2, 2, 3)), rng.normal(size=(4, 3, 3)))
    with pytest.raises(DimensionError):
        dcmp.forward_decomposed(DecomposedConv(rng.normal(size=(2, 2, 3)), rng.normal(size=(3, 3, 3))),
                                rng.normal(size=(1, 3, 5, 5)))


def test_full_rank_decomposition_is_exact(rng):
    filters = rng.normal(size=(6, 4, 3, 3))
    dc = dcmp.decompose_filter(filters, num_atoms=9)
    assert np.max(np.abs(dcmp.reconstruct_filter(dc) - filters)) < 1e-10
    # unit-norm atoms with a positive first nonzero entry
    norms = np.linalg.norm(dc.atoms.reshape(9, -1), axis=1)
    np.testing.assert_allclose(norms, 1.0, atol=1e-12)
    firsts = [a.ravel()[np.flatnonzero(np.abs(a.ravel()) > 1e-12)[0]] for a in dc.atoms]
    assert min(firsts) > 0


@pytest.mark.parametrize("m", [1, 3, 5])
def test_truncated_residual_matches_discarded_singular_values(rng, m):
    filters = rng.normal(size=(5, 3, 3, 3))
    dc = dcmp.decompose_filter(filters, num_atoms=m)
    residual = np.linalg.norm(dcmp.reconstruct_filter(dc) - filters)
    s = np.linalg.svd(filters.reshape(15, 9), compute_uv=False)
    # Eckart-Young: best rank-m error is the tail of the spectrum
    assert residual == pytest.approx(np.sqrt(np.sum(s[m:] ** 2)), rel=1e-10)


def test_overcomplete_and_zero_filters(rng):
    filters = rng.normal(size=(2, 2, 2, 2))
    dc = dcmp.decompose_filter(filters, num_atoms=6)
    assert dc.alpha.shape == (2, 2, 6) and not dc.alpha[..., 4:].any()
    assert np.max(np.abs(dcmp.reconstruct_filter(dc) - filters)) < 1e-12
    zero = dcmp.decompose_filter(np.zeros((2, 3, 3, 3)), num_atoms=9)
    assert not zero.alpha.any()
    np.testing.assert_array_equal(zero.atoms.reshape(9, 9), np.eye(9))


def test_decompose_is_idempotent(rng):
    dc = dcmp.decompose_filter(rng.normal(size=(4, 3, 3, 3)), num_atoms=4)
    again = dcmp.decompose_filter(dcmp.reconstruct_filter(dc), num_atoms=4)
    assert np.max(np.abs(again.atoms - dc.atoms)) < 1e-9
    assert np.max(np.abs(again.alpha - dc.alpha)) < 1e-9


def test_init_matches_fan_in_variance():
    rng = np.random.default_rng(0)
    dc = dcmp.init_decomposed(64, 32, 3, 9, rng)
    var = dcmp.reconstruct_filter(dc).var()
    # E[F^2] = m * (2 / (c m)) * (1 / k^2) = 2 / (c k^2); sample spread is a few percent
    assert var == pytest.approx(2.0 / (32 * 9), rel=0.25)


def random_config(rng):
    c_in, c_out = rng.integers(1, 4, size=2)
    k = int(rng.integers(1, 4))
    m = int(rng.integers(1, k * k + 2))
    pad, stride = int(rng.integers(0, 2)), int(rng.integers(1, 3))
    h, w = rng.integers(k, 7, size=2)
    dc = DecomposedConv(rng.normal(size=(c_out, c_in, m)), rng.normal(size=(m, k, k)), pad, stride)
    return dc, rng.normal(size=(int(rng.integers(1, 3)), c_in, h, w))


@pytest.mark.parametrize("seed", range(10))
def test_forward_matches_reconstructed_conv(seed):
    dc, x = random_config(np.random.default_rng(seed))
    out, _ = dcmp.forward_decomposed(dc, x)
    ref = naive_conv2d(x, dcmp.reconstruct_filter(dc), dc.pad, dc.stride)
    assert out.shape == ref.shape
    assert np.max(np.abs(out - ref)) < 1e-10


@pytest.mark.parametrize("seed", range(6))
def test_backward_finite_differences(seed):
    rng = np.random.default_rng(100 + seed)
    dc, x = random_config(rng)
    out, cache = dcmp.forward_decomposed(dc, x)
    probe = rng.normal(size=out.shape)
    gx, ga, gd = dcmp.backward_decomposed(cache, probe)
    f = lambda: float(np.sum(dcmp.forward_decomposed(dc, x)[0] * probe))
    assert_grad_close(gx, numerical_grad(f, x))
    assert_grad_close(ga, numerical_grad(f, dc.alpha))
    assert_grad_close(gd, numerical_grad(f, dc.atoms))


def test_gradient_flows_through_composed_filter(rng):
    # d/dalpha and d/datoms follow from the chain rule through compose()
    dc, x = random_config(rng)
    out, cache = dcmp.forward_decomposed(dc, x)
    probe = rng.normal(size=out.shape)
    _, ga, gd = dcmp.backward_decomposed(cache, probe)
    _, conv_cache = conv2d_forward(x, dcmp.reconstruct_filter(dc), dc.pad, dc.stride)
    _, gf = conv2d_backward(conv_cache, probe)
    m, k = dc.num_atoms, dc.kernel_size
    gf_flat = gf.reshape(-1, k * k)
    np.testing.assert_allclose(ga.reshape(-1, m), gf_flat @ dc.atoms.reshape(m, -1).T, atol=1e-10)
    np.testing.assert_allclose(gd.reshape(m, -1), dc.alpha.reshape(-1, m).T @ gf_flat, atol=1e-10)


def test_backward_rejects_wrong_shape(rng):
    dc, x = random_config(rng)
    out, cache = dcmp.forward_decomposed(dc, x)
    with pytest.raises(ContractError):
        dcmp.backward_decomposed(cache, np.zeros(out.shape + (1,)))


def _clients(rng, weights, shape=(3, 2, 4), k=3):
    return [(p, rng.normal(size=shape), rng.normal(size=(shape[2], k, k))) for p in weights]


def test_single_client_has_no_latent_terms(rng):
    clients = _clients(rng, [1.0])
    product, summed, latent = dcmp.expand_aggregation(clients)
    assert latent == []
    np.testing.assert_allclose(product, dcmp.compose(clients[0][1], clients[0][2]), atol=1e-14)
    np.testing.assert_allclose(summed, product, atol=1e-14)


def test_two_clients_quarter_weights(rng):
    (_, a1, d1), (_, a2, d2) = clients = _clients(rng, [0.5, 0.5])
    product, summed, latent = dcmp.expand_aggregation(clients)
    expected = 0.25 * (dcmp.compose(a1, d1) + dcmp.compose(a1, d2)
                       + dcmp.compose(a2, d1) + dcmp.compose(a2, d2))
    assert np.max(np.abs(product - expected)) < 1e-12
    assert np.max(np.abs(summed - expected)) < 1e-12
    assert [(t.coeff_client, t.atom_client, t.weight) for t in latent] == [(0, 1, 0.25), (1, 0, 0.25)]


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.integers(0, 10_000))
def test_expansion_identity(m, seed):
    rng = np.random.default_rng(seed)
    raw = rng.uniform(0.1, 1.0, size=m)
    clients = _clients(rng, raw / raw.sum())
    product, summed, latent = dcmp.expand_aggregation(clients)
    assert len(latent) == m * m - m
    assert np.max(np.abs(product - summed)) < 1e-10


def test_identical_clients_are_idempotent(rng):
    alpha, atoms = rng.normal(size=(2, 2, 3)), rng.normal(size=(3, 3, 3))
    product, _, _ = dcmp.expand_aggregation([(0.2, alpha, atoms), (0.3, alpha, atoms), (0.5, alpha, atoms)])
    assert np.max(np.abs(product - dcmp.compose(alpha, atoms))) < 1e-12


def test_weights_must_sum_to_one(rng):
    with pytest.raises(ContractError):
        dcmp.expand_aggregation(_clients(rng, [0.5, 0.6]))
    with pytest.raises(ContractError):
        dcmp.expand_aggregation([])
