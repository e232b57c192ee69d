import numpy as np
import pytest
import scipy.sparse as sp

from utils.errors import AdaptationDivergedError, ContractError, DegenerateBasisError, ShapeError
from utils.graph_store import adjacency_from_edges, normalize
from utils.kernel import (
    AdamState, Parameter, Tape, adam_step, check_gradients, div, exp, log_softmax, make_rng, matmul,
    mul, orthogonality_residual, power, put_rows, qr_reorthogonalize, reduce_sum, relu, spmm, sqrt,
    take_rows, tile_rows,
)


def test_rng_streams_are_reproducible_and_independent():
    a = make_rng(3, "mask", 1).random(5)
    b = make_rng(3, "mask", 1).random(5)
    c = make_rng(3, "mask", 2).random(5)
    assert np.array_equal(a, b)
    assert not np.allclose(a, c)


def test_spmm_matches_dense_product():
    rng = make_rng(0, "spmm")
    for n in (5, 20, 50):
        dense = (rng.random((n, n)) < 0.2) * rng.standard_normal((n, n))
        adj = sp.csr_matrix(dense)
        m = rng.standard_normal((n, 3))
        np.testing.assert_allclose(spmm(adj, m).data, dense @ m, rtol=0, atol=1e-12)


def test_spmm_rejects_mismatched_shapes():
    adj = normalize(adjacency_from_edges(4, [(0, 1)]))
    with pytest.raises(ShapeError):
        spmm(adj, np.ones((3, 2)))


@pytest.mark.parametrize("seed", range(20))
def test_gcn_style_gradients_match_finite_differences(seed):
    rng = make_rng(seed, "gradcheck")
    A = Parameter(rng.standard_normal((5, 4)), name="A")
    B = Parameter(rng.standard_normal((4, 3)), name="B")
    adj = normalize(adjacency_from_edges(5, [(0, 1), (1, 2), (2, 3), (3, 4)]))

    def loss_fn():
        logits = spmm(adj, matmul(A, B))
        return reduce_sum(take_rows(log_softmax(logits), [0, 2, 4])) * -1.0

    assert check_gradients(loss_fn, [A, B]) < 1e-4


@pytest.mark.parametrize("seed", range(20))
def test_row_editing_gradients_match_finite_differences(seed):
    rng = make_rng(seed, "rows")
    base = Parameter(rng.standard_normal((4, 3)), name="base")
    token = Parameter(rng.standard_normal(3), name="token")

    def loss_fn():
        out = put_rows(base, [1, 3], tile_rows(token, 2))
        return reduce_sum(mul(exp(out * 0.5), out))

    assert check_gradients(loss_fn, [base, token]) < 1e-4


def test_cosine_style_gradients_match_finite_differences():
    rng = make_rng(0, "cosine")
    z = Parameter(rng.standard_normal((3, 4)), name="z")
    x = rng.standard_normal((3, 4))

    def loss_fn():
        dot = reduce_sum(mul(z, x), axis=1)
        length = sqrt(reduce_sum(mul(z, z), axis=1))
        return reduce_sum(power(div(dot, length), 3.0))

    assert check_gradients(loss_fn, [z]) < 1e-4


def test_relu_gradient_masks_inactive_entries():
    p = Parameter(np.array([[-1.0, 2.0], [3.0, -4.0]]), name="p")
    with Tape() as tape:
        grads = tape.backward(reduce_sum(relu(p)))
    np.testing.assert_array_equal(grads[p], [[0.0, 1.0], [1.0, 0.0]])


def test_operations_outside_a_tape_are_constants():
    p = Parameter(np.ones((2, 2)), name="p")
    out = matmul(p, p)
    assert not out.requires_grad


def test_backward_needs_a_scalar():
    p = Parameter(np.ones((2, 2)), name="p")
    with Tape() as tape:
        out = matmul(p, p)
        with pytest.raises(ContractError):
            tape.backward(out)


def test_unreached_parameters_get_no_gradient():
    used = Parameter(np.ones(2), name="used")
    unused = Parameter(np.ones(2), name="unused")
    with Tape() as tape:
        grads = tape.backward(reduce_sum(used * 3.0))
    assert used in grads and unused not in grads
    np.testing.assert_array_equal(grads[used], [3.0, 3.0])


def test_qr_reorthogonalize_gives_orthonormal_rows():
    R = qr_reorthogonalize(make_rng(0, "qr").standard_normal((4, 16)))
    np.testing.assert_allclose(R @ R.T, np.eye(4), rtol=0, atol=1e-10)


def test_qr_reorthogonalize_is_idempotent():
    once = qr_reorthogonalize(make_rng(1, "qr").standard_normal((3, 7)))
    twice = qr_reorthogonalize(once)
    np.testing.assert_allclose(twice, once, rtol=0, atol=1e-12)


def test_qr_reorthogonalize_preserves_row_space():
    raw = make_rng(2, "qr").standard_normal((2, 5))
    R = qr_reorthogonalize(raw)
    projector = R.T @ R
    np.testing.assert_allclose(raw @ projector, raw, atol=1e-10)


def test_qr_reorthogonalize_rejects_rank_deficient_and_tall_inputs():
    with pytest.raises(DegenerateBasisError):
        qr_reorthogonalize(np.array([[1.0, 0.0, 0.0], [2.0, 0.0, 0.0]]))
    with pytest.raises(ShapeError):
        qr_reorthogonalize(np.ones((3, 2)))


def test_first_adam_step_moves_by_learning_rate():
    p = Parameter(np.array([1.0, -2.0, 0.5]), name="p")
    adam_step(AdamState(), [p], {p: np.array([4.0, -0.1, 2.0])}, lr=0.01)
    np.testing.assert_allclose(p.data, [0.99, -1.99, 0.49], atol=1e-6)


def test_adam_converges_on_a_quadratic_bowl():
    w = Parameter(np.array([1.0, -2.0, 0.5]), name="w")
    state = AdamState()
    for _ in range(1000):
        with Tape() as tape:
            grads = tape.backward(reduce_sum(mul(w, w)))
        adam_step(state, [w], grads, lr=0.05)
    assert np.linalg.norm(w.data) < 1e-3


def test_adam_skips_frozen_parameters_and_applies_retraction():
    frozen = Parameter(np.ones(2), name="frozen", frozen=True)
    R = Parameter(qr_reorthogonalize(make_rng(0, "adam").standard_normal((2, 4))), name="R",
                  retraction=qr_reorthogonalize)
    adam_step(AdamState(), [frozen, R], {frozen: np.ones(2), R: np.ones((2, 4))}, lr=0.1)
    np.testing.assert_array_equal(frozen.data, np.ones(2))
    assert orthogonality_residual(R.data) < 1e-10


def test_adam_rejects_non_finite_gradients_before_writing():
    p = Parameter(np.ones(2), name="p")
    q = Parameter(np.ones(2), name="q")
    with pytest.raises(AdaptationDivergedError):
        adam_step(AdamState(), [p, q], {p: np.ones(2), q: np.array([np.nan, 1.0])}, lr=0.1)
    np.testing.assert_array_equal(p.data, np.ones(2))
