"""
Autodiff ops, GRU cell, dropout, parameter store and checkpoints.
"""
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from numerics import (GraphError, ParamStore, Rng, Tensor, backward, clip_grad_norm, constant,
                      cross_entropy, dropout, finite_diff_check, gru_step, init_gru, load_checkpoint,
                      matmul, mul, no_grad, save_checkpoint, softmax, sum_all)
from text_pipeline import DataError


def _zero_gru(d_in: int, d_h: int) -> ParamStore:
    params = ParamStore()
    init_gru(params, "g", d_in, d_h, Rng(0), 0.0)
    return params


# ── softmax / cross-entropy ───────────────────────────────────────────────────

@pytest.mark.parametrize("logits, expected", [
    ([0.0, 0.0, 0.0], [1 / 3, 1 / 3, 1 / 3]),
    ([0.0, math.log(2.0)], [1 / 3, 2 / 3]),
])
def test_softmax_closed_forms(logits, expected):
    assert softmax(Tensor(logits)).data == pytest.approx(expected, abs=1e-15)


def test_softmax_empty():
    with pytest.raises(ValueError, match="empty distribution"):
        softmax(Tensor(np.zeros(0)))


def test_softmax_mask_zeroes_entries():
    p = softmax(Tensor([[1.0, 2.0, 3.0]]), mask=np.array([[True, False, True]])).data
    assert p[0, 1] == 0.0
    assert p.sum() == pytest.approx(1.0, abs=1e-12)


@given(arrays(np.float64, st.integers(1, 30), elements=st.floats(-50, 50)))
def test_softmax_is_a_distribution(x):
    p = softmax(Tensor(x)).data
    assert np.all(p >= 0)
    assert abs(p.sum() - 1.0) <= 1e-12
    assert np.argmax(p) == np.argmax(x) or p[np.argmax(x)] == p.max()


@pytest.mark.parametrize("dist, gold, expected", [
    ([0.0, 1.0, 0.0], 1, 0.0),
    ([0.25] * 4, 3, math.log(4)),
    ([0.25, 0.75], 1, -math.log(0.75)),
])
def test_cross_entropy(dist, gold, expected):
    assert cross_entropy(Tensor(dist), gold).item() == pytest.approx(expected, abs=1e-11)


def test_cross_entropy_gold_out_of_range():
    with pytest.raises(IndexError):
        cross_entropy(Tensor([0.5, 0.5]), 2)


def test_cross_entropy_mask_skips_rows():
    dist = Tensor([[0.5, 0.5], [0.1, 0.9]])
    loss = cross_entropy(dist, [0, 0], mask=np.array([True, False]))
    assert loss.item() == pytest.approx(math.log(2))


# ── GRU ───────────────────────────────────────────────────────────────────────

def test_gru_zero_weights_halves_state():
    params = _zero_gru(3, 2)
    h_prev = Tensor([[0.4, -1.0]])
    h = gru_step(Tensor([[1.0, 2.0, 3.0]]), h_prev, params, "g")
    assert h.data == pytest.approx(0.5 * h_prev.data)
    assert gru_step(Tensor([[1.0, 2.0, 3.0]]), Tensor(np.zeros((1, 2))), params, "g").data.tolist() == [[0.0, 0.0]]


def test_gru_matches_scalar_evaluation():
    params = ParamStore()
    init_gru(params, "g", 1, 1, Rng(3), 0.9)
    w = {k.split(".")[1]: float(t.data.reshape(-1)[0]) for k, t in params.items()}
    x, h0 = 0.7, -0.2

    def sig(v):
        return 1.0 / (1.0 + math.exp(-v))

    z = sig(x * w["W_z"] + h0 * w["U_z"] + w["b_z"])
    r = sig(x * w["W_r"] + h0 * w["U_r"] + w["b_r"])
    cand = math.tanh(x * w["W_h"] + r * h0 * w["U_h"] + w["b_h"])
    expected = (1 - z) * h0 + z * cand
    got = gru_step(Tensor([[x]]), Tensor([[h0]]), params, "g").item()
    assert got == pytest.approx(expected, abs=1e-14)


def test_gru_copy_through_when_update_gate_closed():
    params = ParamStore()
    init_gru(params, "g", 2, 3, Rng(5), 0.5)
    params["g.b_z"].data[:] = -np.inf
    h_prev = Tensor([[0.3, -0.7, 0.11]])
    h = gru_step(Tensor([[1.0, -2.0]]), h_prev, params, "g")
    assert np.array_equal(h.data, h_prev.data)


def test_gru_shape_error_names_parameter():
    params = _zero_gru(3, 2)
    with pytest.raises(ValueError, match=r"g\.W_z"):
        gru_step(Tensor([[1.0, 2.0]]), Tensor([[0.0, 0.0]]), params, "g")


# ── backward ──────────────────────────────────────────────────────────────────

def test_backward_outer_product():
    params = ParamStore()
    W = params.add("W", np.arange(6.0).reshape(3, 2))
    x = Tensor([[1.0, -2.0, 0.5]])
    params.zero_grad()
    backward(sum_all(matmul(x, W)))
    assert np.array_equal(W.grad, np.outer(x.data[0], np.ones(2)))


def test_backward_twice_is_an_error():
    params = ParamStore()
    W = params.add("W", [[1.0]])
    loss = sum_all(mul(W, W))
    params.zero_grad()
    backward(loss)
    with pytest.raises(GraphError):
        backward(loss)


def test_constant_loss_gives_zero_gradients():
    params = ParamStore()
    params.add("W", [[1.0, 2.0]])
    params.zero_grad()
    backward(sum_all(constant([[3.0, 4.0]])))
    assert not params["W"].grad.any()


def test_backward_needs_scalar():
    params = ParamStore()
    W = params.add("W", [1.0, 2.0])
    with pytest.raises(ValueError):
        backward(mul(W, W))


def test_no_grad_records_nothing():
    params = ParamStore()
    W = params.add("W", [2.0])
    with no_grad():
        out = mul(W, W)
    assert not out.requires_grad


def test_finite_diff_quadratic():
    params = ParamStore()
    params.add("w", [3.0])
    err = finite_diff_check(lambda p: sum_all(mul(p["w"], p["w"])), params)
    assert params["w"].grad[0] == 6.0
    assert err < 1e-8


def test_finite_diff_gru_step():
    params = ParamStore()
    init_gru(params, "g", 2, 2, Rng(11), 0.5)
    x, h = Tensor([[0.3, -0.8]]), Tensor([[0.1, 0.5]])
    err = finite_diff_check(lambda p: sum_all(gru_step(x, h, p, "g")), params)
    assert err < 1e-4


# ── dropout / Rng ─────────────────────────────────────────────────────────────

def test_dropout_identity_cases():
    x = Tensor(np.ones((4, 4)))
    assert dropout(x, 0.0, Rng(1), True) is x
    assert dropout(x, 0.9, Rng(1), False) is x
    with pytest.raises(ValueError):
        dropout(x, 1.0, Rng(1), True)


def test_dropout_preserves_mean():
    out = dropout(Tensor(np.ones(200_000)), 0.5, Rng(42), True).data
    assert out.mean() == pytest.approx(1.0, rel=0.02)
    assert set(np.unique(out)) <= {0.0, 2.0}


def test_rng_is_deterministic_and_keyed():
    assert np.array_equal(Rng(7).random(5), Rng(7).random(5))
    assert np.array_equal(Rng(7).child(1).random(5), Rng(7, (1,)).random(5))
    assert not np.array_equal(Rng(7).child(1).random(5), Rng(7).child(2).random(5))


# ── ParamStore / checkpoints ──────────────────────────────────────────────────

def test_param_store_names():
    params = ParamStore()
    params.add("a", [1.0])
    with pytest.raises(KeyError, match="duplicate"):
        params.add("a", [2.0])
    with pytest.raises(KeyError, match="unknown parameter"):
        params["b"]
    params.add("c", np.zeros((2, 2)))
    assert list(params) == ["a", "c"]
    assert params.num_values() == 5


def test_average_of_equal_stores_is_exact():
    a = ParamStore()
    a.add("w", Rng(1).uniform(-1, 1, (3, 3)))
    avg = ParamStore.average([a, a.copy()])
    assert np.array_equal(avg["w"].data, a["w"].data)


def test_average_is_uniform_mean():
    a, b = ParamStore(), ParamStore()
    a.add("w", [0.0, 2.0])
    b.add("w", [4.0, 2.0])
    assert ParamStore.average([a, b])["w"].data.tolist() == [2.0, 2.0]


def test_clip_grad_norm():
    params = ParamStore()
    params.add("w", [0.0, 0.0])
    params["w"].grad = np.array([3.0, 4.0])
    assert clip_grad_norm(params, 1.0) == pytest.approx(5.0)
    assert np.linalg.norm(params["w"].grad) == pytest.approx(1.0)


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    params = ParamStore()
    params.add("emb", Rng(3).uniform(-1, 1, (4, 3)))
    params.add("bias", [np.pi, -0.0, 1e-300])
    params.add("scalar", 2.5)
    path = tmp_path / "model.msq"
    save_checkpoint(params, path)
    loaded = load_checkpoint(path)
    assert list(loaded) == list(params)
    for name, t in params.items():
        assert loaded[name].shape == t.shape
        assert loaded[name].data.tobytes() == t.data.tobytes()


def test_checkpoint_bad_magic_and_truncation(tmp_path):
    path = tmp_path / "model.msq"
    path.write_bytes(b"NOPE")
    with pytest.raises(DataError, match="magic"):
        load_checkpoint(path)
    params = ParamStore()
    params.add("w", np.ones(10))
    save_checkpoint(params, path)
    path.write_bytes(path.read_bytes()[:-8])
    with pytest.raises(DataError, match="truncated"):
        load_checkpoint(path)
