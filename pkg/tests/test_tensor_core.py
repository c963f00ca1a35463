import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from websal.nn import BatchNormState, batchnorm2d, conv2d, conv_transpose2d, maxpool2d
from websal.optim import SGD, Adam, MissingGradError
from websal.params import ParamStore, load_checkpoint, save_checkpoint
from websal.tensor import (ShapeError, Tensor, concat_channels, mean_all, relu, sigmoid, square,
                           subtract, sum_all)

from conftest import grad_check, param, ref_conv2d, ref_conv_transpose2d, ref_maxpool


# -- conv2d ------------------------------------------------------------------

def test_conv2d_identity_kernel():
    x = Tensor(np.ones((1, 1, 3, 3)))
    out = conv2d(x, Tensor(np.ones((1, 1, 1, 1))), Tensor(np.zeros(1)))
    np.testing.assert_array_equal(out.data, x.data)


def test_conv2d_hand_value():
    x = Tensor([[[[1.0, 2.0], [3.0, 4.0]]]])
    w = Tensor([[[[1.0, 0.0], [0.0, 1.0]]]])
    out = conv2d(x, w, Tensor([0.0]))
    assert out.shape == (1, 1, 1, 1)
    assert out.item() == 5.0


def test_conv2d_dilated_matches_loop(rng):
    x, w, b = rng.normal(size=(2, 3, 8, 8)), rng.normal(size=(4, 3, 3, 3)), rng.normal(size=4)
    out = conv2d(Tensor(x), Tensor(w), Tensor(b), stride=1, padding=2, dilation=2)
    np.testing.assert_allclose(out.data, ref_conv2d(x, w, b, 1, 2, 2), atol=1e-10, rtol=0)


@pytest.mark.parametrize("stride,pad,dil", [(2, 1, 1), (1, 0, 1), (3, 2, 2)])
def test_conv2d_output_shape_formula(rng, stride, pad, dil):
    x = Tensor(rng.normal(size=(1, 2, 7, 8)))
    out = conv2d(x, Tensor(rng.normal(size=(3, 2, 3, 3))), None, stride, pad, dil)
    want = lambda s: (s + 2 * pad - dil * 2 - 1) // stride + 1
    assert out.shape == (1, 3, want(7), want(8))


def test_conv2d_errors():
    with pytest.raises(ShapeError, match="channels"):
        conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))))
    with pytest.raises(ShapeError, match="degenerate"):
        conv2d(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 3, 3))))


# -- conv_transpose2d ----------------------------------------------------------

def test_deconv_scalar():
    out = conv_transpose2d(Tensor([[[[2.0]]]]), Tensor([[[[3.0]]]]), Tensor([0.0]))
    assert out.item() == 6.0


def test_deconv_block_expansion():
    x = np.array([[[[1.0, 2.0], [3.0, 4.0]]]])
    w = np.ones((1, 1, 2, 2))
    out = conv_transpose2d(Tensor(x), Tensor(w), Tensor([0.0]), stride=2)
    assert out.shape == (1, 1, 4, 4)
    np.testing.assert_allclose(out.data, ref_conv_transpose2d(x, w, np.zeros(1), 2, 0), atol=1e-12)
    np.testing.assert_array_equal(out.data[0, 0], np.kron(x[0, 0], np.ones((2, 2))))


def test_deconv_matches_loop(rng):
    x, w, b = rng.normal(size=(2, 3, 4, 5)), rng.normal(size=(3, 2, 4, 4)), rng.normal(size=2)
    out = conv_transpose2d(Tensor(x), Tensor(w), Tensor(b), stride=2, padding=1)
    assert out.shape == (2, 2, 8, 10)
    np.testing.assert_allclose(out.data, ref_conv_transpose2d(x, w, b, 2, 1), atol=1e-10, rtol=0)


@settings(max_examples=25, deadline=None)
@given(n=st.integers(1, 2), c=st.integers(1, 3), o=st.integers(1, 3), k=st.integers(1, 4),
       stride=st.integers(1, 3), pad=st.integers(0, 2), oh=st.integers(1, 4), ow=st.integers(1, 4),
       seed=st.integers(0, 2 ** 31))
def test_conv_deconv_adjoint(n, c, o, k, stride, pad, oh, ow, seed):
    # pick input dims that conv maps exactly onto (oh, ow) and deconv maps back
    h, w = (oh - 1) * stride + k - 2 * pad, (ow - 1) * stride + k - 2 * pad
    if h < 1 or w < 1 or pad >= k:
        return
    r = np.random.default_rng(seed)
    x, y, wt = r.normal(size=(n, c, h, w)), r.normal(size=(n, o, oh, ow)), r.normal(size=(o, c, k, k))
    lhs = np.sum(conv2d(Tensor(x), Tensor(wt), None, stride, pad).data * y)
    rhs = np.sum(x * conv_transpose2d(Tensor(y), Tensor(wt), None, stride, pad).data)
    assert abs(lhs - rhs) <= 1e-8 * max(1.0, abs(lhs))


# -- maxpool ---------------------------------------------------------------------

def test_maxpool_window_max():
    out = maxpool2d(Tensor([[[[1.0, 2.0], [3.0, 4.0]]]]), 2, 2)
    assert out.data.tolist() == [[[[4.0]]]]


def test_maxpool_ties_route_to_first_index():
    x = param(np.full((1, 1, 4, 4), 3.0))
    out = maxpool2d(x, 2, 2)
    np.testing.assert_array_equal(out.data, np.full((1, 1, 2, 2), 3.0))
    sum_all(out).backward()
    expect = np.zeros((4, 4))
    expect[::2, ::2] = 1.0
    np.testing.assert_array_equal(x.grad[0, 0], expect)


def test_maxpool_matches_loop(rng):
    x = rng.normal(size=(1, 2, 6, 6))
    np.testing.assert_allclose(maxpool2d(Tensor(x), 2, 2).data, ref_maxpool(x, 2, 2), atol=1e-12)
    np.testing.assert_allclose(maxpool2d(Tensor(x), 3, 1).data, ref_maxpool(x, 3, 1), atol=1e-12)


def test_maxpool_window_too_large():
    with pytest.raises(ShapeError, match="larger"):
        maxpool2d(Tensor(np.zeros((1, 1, 1, 3))), 2, 2)


# -- batchnorm ---------------------------------------------------------------------

def test_batchnorm_train_normalizes(rng):
    # output variance is var/(var+eps); a wide input keeps that within 1e-6 of 1
    x = Tensor(rng.normal(3.0, 20.0, size=(4, 3, 5, 5)))
    out = batchnorm2d(x, Tensor(np.ones(3)), Tensor(np.zeros(3)), BatchNormState.fresh(3), "train")
    np.testing.assert_allclose(out.data.mean(axis=(0, 2, 3)), 0.0, atol=1e-6)
    np.testing.assert_allclose(out.data.var(axis=(0, 2, 3)), 1.0, atol=1e-6)


def test_batchnorm_zero_gamma_gives_beta(rng):
    x = Tensor(rng.normal(size=(2, 2, 3, 3)))
    out = batchnorm2d(x, Tensor(np.zeros(2)), Tensor([0.5, -1.0]), BatchNormState.fresh(2), "train")
    np.testing.assert_allclose(out.data[:, 0], 0.5)
    np.testing.assert_allclose(out.data[:, 1], -1.0)


def test_batchnorm_running_moments_and_eval(rng):
    st_ = BatchNormState.fresh(2)
    x = rng.normal(2.0, 3.0, size=(2, 2, 4, 4))
    batchnorm2d(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), st_, "train")
    mu = x.mean(axis=(0, 2, 3))
    np.testing.assert_allclose(st_.running_mean, 0.1 * mu)
    m = 32
    np.testing.assert_allclose(st_.running_var, 0.9 + 0.1 * x.var(axis=(0, 2, 3)) * m / (m - 1))
    out = batchnorm2d(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), st_, "eval")
    np.testing.assert_allclose(out.data, (x - st_.running_mean[None, :, None, None])
                               / np.sqrt(st_.running_var[None, :, None, None] + 1e-5))


def test_batchnorm_single_element_channel_rejected():
    with pytest.raises(ShapeError, match=">= 2"):
        batchnorm2d(Tensor(np.zeros((1, 2, 1, 1))), Tensor(np.ones(2)), Tensor(np.zeros(2)),
                    BatchNormState.fresh(2), "train")


# -- gradients against central differences (64-bit, 10 points per tensor) -----------

def _target_loss(out_fn, rng):
    t = Tensor(rng.normal(size=out_fn().shape))
    return lambda: mean_all(square(subtract(out_fn(), t)))


GRAD_CASES = {
    "conv2d": lambda r: ([param(r.normal(size=(2, 3, 6, 6))), param(r.normal(size=(4, 3, 3, 3))),
                          param(r.normal(size=4))], lambda x, w, b: conv2d(x, w, b, 1, 2, 2)),
    "conv2d_strided": lambda r: ([param(r.normal(size=(1, 2, 7, 7))), param(r.normal(size=(3, 2, 3, 3))),
                                  param(r.normal(size=3))], lambda x, w, b: conv2d(x, w, b, 2, 1, 1)),
    "conv_transpose2d": lambda r: ([param(r.normal(size=(2, 3, 3, 4))), param(r.normal(size=(3, 2, 4, 4))),
                                    param(r.normal(size=2))], lambda x, w, b: conv_transpose2d(x, w, b, 2, 1)),
    "maxpool2d": lambda r: ([param(r.normal(size=(2, 2, 6, 6)))], lambda x: maxpool2d(x, 2, 2)),
    "batchnorm2d_train": lambda r: ([param(r.normal(size=(2, 3, 4, 4))), param(r.normal(size=3)),
                                     param(r.normal(size=3))],
                                    lambda x, g, b: batchnorm2d(x, g, b, BatchNormState.fresh(3), "train")),
    "batchnorm2d_eval": lambda r: ([param(r.normal(size=(2, 3, 4, 4))), param(r.normal(size=3)),
                                    param(r.normal(size=3))],
                                   lambda x, g, b: batchnorm2d(x, g, b, BatchNormState(
                                       np.array([0.1, -0.2, 0.3]), np.array([1.5, 0.7, 2.0])), "eval")),
    "relu": lambda r: ([param(r.normal(size=(2, 2, 3, 3)))], relu),
    "sigmoid": lambda r: ([param(r.normal(size=(2, 2, 3, 3)))], sigmoid),
    "add_sub_scale": lambda r: ([param(r.normal(size=(1, 2, 3, 3))), param(r.normal(size=(1, 2, 3, 3)))],
                                lambda a, b: (a + b) * 0.5 - b * 2.0 + 1.0),
    "concat_channels": lambda r: ([param(r.normal(size=(2, 3, 3, 3))), param(r.normal(size=(2, 1, 3, 3)))],
                                  lambda a, b: concat_channels([a, b])),
}


@pytest.mark.parametrize("case", sorted(GRAD_CASES))
def test_gradients_match_finite_differences(case, rng):
    tensors, op = GRAD_CASES[case](rng)
    loss = _target_loss(lambda: op(*tensors), rng)
    assert grad_check(loss, tensors, rng) < 1e-4


def test_mean_gradient_is_uniform(rng):
    x = param(rng.normal(size=(2, 3, 4, 5)))
    mean_all(x).backward()
    np.testing.assert_allclose(x.grad, 1.0 / x.size)


# -- elementwise and backward contract ------------------------------------------------

def test_relu_values():
    assert relu(Tensor([-1.0, 0.0, 2.0])).data.tolist() == [0.0, 0.0, 2.0]


def test_concat_channels_layout(rng):
    a, b = Tensor(rng.normal(size=(2, 3, 4, 4))), Tensor(rng.normal(size=(2, 1, 4, 4)))
    out = concat_channels([a, b])
    assert out.shape == (2, 4, 4, 4)
    np.testing.assert_array_equal(out.data[:, 3], b.data[:, 0])
    with pytest.raises(ShapeError):
        concat_channels([a, Tensor(np.zeros((2, 1, 3, 4)))])


def test_add_shape_mismatch():
    with pytest.raises(ShapeError):
        Tensor(np.zeros((1, 1, 2, 2))) + Tensor(np.zeros((1, 1, 2, 3)))


def test_backward_sum_gives_ones(rng):
    x = param(rng.normal(size=(2, 2, 3, 3)))
    sum_all(x).backward()
    np.testing.assert_array_equal(x.grad, np.ones_like(x.data))


def test_backward_accumulates(rng):
    x = param(rng.normal(size=(1, 2, 5, 5)))
    w = param(rng.normal(size=(3, 2, 3, 3)))
    loss = mean_all(square(conv2d(x, w, None, 1, 1)))
    loss.backward()
    first = w.grad.copy()
    loss.backward()
    np.testing.assert_array_equal(w.grad, 2 * first)


def test_backward_needs_scalar():
    with pytest.raises(ShapeError, match="scalar"):
        param(np.ones((1, 1, 2, 2))).backward()


def test_shared_tensor_accumulates_both_uses(rng):
    w = param(rng.normal(size=(1, 1, 3, 3)))
    x = Tensor(rng.normal(size=(1, 1, 5, 5)))
    loss = sum_all(conv2d(x, w, None, 1, 1)) + sum_all(conv2d(x, w, None, 1, 1))
    loss.backward()
    single = param(w.data.copy())
    sum_all(conv2d(x, single, None, 1, 1)).backward()
    np.testing.assert_allclose(w.grad, 2 * single.grad)


def test_forward_backward_deterministic():
    def run():
        r = np.random.default_rng(7)
        x = param(r.normal(size=(2, 3, 8, 8)))
        w = param(r.normal(size=(4, 3, 3, 3)))
        out = mean_all(square(relu(conv2d(x, w, None, 1, 1))))
        out.backward()
        opt = Adam([("w", w)], lr=1e-2)
        opt.step()
        return out.data.tobytes(), x.grad.tobytes(), w.data.tobytes()

    assert run() == run()


# -- optimizers ---------------------------------------------------------------------

def test_sgd_update_rule():
    p = param(np.full((1,), 1.0))
    p.grad[...] = 2.0
    SGD([("p", p)], lr=0.1).step()
    assert p.data[0] == pytest.approx(0.8, abs=1e-15)
    assert p.grad[0] == 0.0


def test_adam_first_step_is_lr_sized():
    p = param(np.zeros(3))
    p.grad[...] = 1.0
    Adam([("p", p)], lr=2e-4).step()
    np.testing.assert_array_less(np.abs(-p.data - 2e-4), 1e-6)


def test_zero_grad_leaves_param_unchanged():
    for opt_cls in (SGD, Adam):
        p = param(np.array([0.3, -0.7]))
        opt_cls([("p", p)], lr=0.1).step()
        np.testing.assert_array_equal(p.data, [0.3, -0.7])


def test_adam_state_persists_across_steps():
    p = param(np.zeros(1))
    opt = Adam([("p", p)], lr=0.1)
    for _ in range(3):
        p.grad[...] = 1.0
        opt.step()
    assert opt.t == 3
    assert opt.m["p"][0] == pytest.approx(1 - 0.9 ** 3)


def test_missing_grad_names_parameter():
    p = Tensor(np.zeros(2))
    with pytest.raises(MissingGradError, match="'frozen'"):
        SGD([("frozen", p)], lr=0.1).step()


# -- parameter store and checkpoint -------------------------------------------------------

def test_param_store_aliases_share_storage():
    store = ParamStore()
    store.add("stage1.encoder.layer2.weight", np.zeros(3))
    store.alias("stage2.encoder.layer2.weight", "stage1.encoder.layer2.weight")
    store["stage1.encoder.layer2.weight"].data[1] = 5.0
    assert store["stage2.encoder.layer2.weight"].data[1] == 5.0
    assert [n for n, _ in store.unique()] == ["stage1.encoder.layer2.weight"]
    with pytest.raises(KeyError):
        store.add("stage1.encoder.layer2.weight", np.zeros(1))


def test_checkpoint_round_trip(tmp_path, rng):
    store = ParamStore()
    store.add("a.weight", rng.normal(size=(2, 3)).astype(np.float32))
    store.alias("b.weight", "a.weight")
    store.add_buffer("a", BatchNormState.fresh(2, np.float32))
    store.buffers["a"].running_mean[:] = [0.5, 0.25]
    store.alias_buffer("b", "a")
    opt = Adam(store.unique(), lr=1e-3)
    store["a.weight"].grad[...] = 1.0
    opt.step()
    path = save_checkpoint(tmp_path / "ck.npz", store, {"g": opt.state_dict()}, {"note": "x"})

    with np.load(path) as z:
        assert z["param/a.weight"].dtype == np.dtype("<f4")
    loaded, optim, meta = load_checkpoint(path)
    assert meta == {"note": "x"}
    assert loaded.names() == ["a.weight", "b.weight"]
    assert loaded["a.weight"] is loaded["b.weight"]
    assert loaded.buffers["a"] is loaded.buffers["b"]
    np.testing.assert_array_equal(loaded["a.weight"].data, store["a.weight"].data)
    np.testing.assert_array_equal(loaded.buffers["a"].running_mean, [0.5, 0.25])
    assert optim["g"]["t"] == 1
    np.testing.assert_array_equal(optim["g"]["m"]["a.weight"], opt.m["a.weight"])
