import numpy as np
import pytest
from hypothesis import given, strategies as st

from circlesnake import tensor as T
from circlesnake.optim import (AdamState, CheckpointError, adam_step, load_checkpoint,
                               save_checkpoint, step_lr)
from circlesnake.tensor import Tensor, grad_check


def leaf(a):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


def test_square_sum_gradient():
    x = leaf([3.0])
    T.sum(x * x).backward()
    assert x.grad.tolist() == [6.0]


def test_sum_gradient_is_ones():
    x = leaf(np.arange(6.0).reshape(2, 3))
    T.sum(x).backward()
    assert np.array_equal(x.grad, np.ones((2, 3)))


def test_backward_accumulates_and_rejects_vectors():
    x = leaf([1.0, 2.0])
    T.sum(x).backward()
    T.sum(x).backward()
    assert np.array_equal(x.grad, [2.0, 2.0])
    with pytest.raises(ValueError):
        (x * x).backward()


def test_grad_check_square():
    err = grad_check(lambda t: T.sum(t * t), leaf([3.0]))
    assert err < 1e-8


def test_grad_check_relu_linear_region(rng):
    x = leaf(rng.uniform(0.5, 2.0, size=(3, 4)))
    assert grad_check(lambda t: T.sum(T.relu(t)), x) < 1e-8


def test_grad_check_names_nonfinite_coordinate():
    def f(t):
        return T.sum(T.log(t))
    with pytest.raises(FloatingPointError, match=r"\(1,\)"):
        grad_check(f, leaf([1.0, 1e-7]), h=1e-6)


@pytest.mark.parametrize("seed", range(20))
def test_conv2d_gradients(seed):
    r = np.random.default_rng(seed)
    x = leaf(r.normal(size=(1, 2, 5, 5)))
    w = r.normal(size=(3, 2, 3, 3))
    b = r.normal(size=3)
    coef = r.normal(size=(1, 3, 3, 3))
    f = lambda t: T.sum(T.mul(T.conv2d(t, Tensor(w), Tensor(b), stride=2, padding=1), Tensor(coef)))
    assert grad_check(f, x) < 1e-6
    g = lambda t: T.sum(T.mul(T.conv2d(x.detach(), t, Tensor(b), stride=2, padding=1), Tensor(coef)))
    assert grad_check(g, leaf(w)) < 1e-6


@pytest.mark.parametrize("seed", range(20))
def test_batch_norm_and_pooling_gradients(seed):
    r = np.random.default_rng(seed)
    x = leaf(r.normal(size=(2, 3, 4, 4)))
    gamma, beta = r.normal(size=3), r.normal(size=3)
    coef = r.normal(size=(2, 3, 4, 4))

    def f(t):
        y = T.batch_norm(t, Tensor(gamma), Tensor(beta), np.zeros(3), np.ones(3), True)
        return T.sum(T.mul(T.upsample2x(T.max_pool2d(y)), Tensor(coef)))
    assert grad_check(f, x) < 1e-5


def test_batch_norm_eval_uses_running_stats():
    x = Tensor(np.full((1, 2, 2, 2), 3.0))
    y = T.batch_norm(x, Tensor(np.ones(2)), Tensor(np.zeros(2)), np.full(2, 1.0), np.full(2, 4.0),
                     training=False, eps=0.0)
    assert np.allclose(y.data, 1.0)


def test_batch_norm_updates_running_buffers_in_place():
    rm, rv = np.zeros(1), np.ones(1)
    x = Tensor(np.array([1.0, 3.0]).reshape(1, 1, 1, 2))
    T.batch_norm(x, Tensor(np.ones(1)), Tensor(np.zeros(1)), rm, rv, True, momentum=0.5)
    assert rm[0] == pytest.approx(1.0)
    assert rv[0] > 1.0


def test_bilinear_constant_map():
    fm = Tensor(np.full((2, 6, 7), 2.5))
    out = T.bilinear_sample(fm, [(0.3, 4.1), (5.9, 0.0), (-10, 99)])
    assert np.allclose(out.data, 2.5)


def test_bilinear_midpoint():
    fm = Tensor(np.array([[[0.0, 1.0]]]))
    assert T.bilinear_sample(fm, [(0.5, 0.0)]).data[0, 0] == pytest.approx(0.5)


def test_bilinear_clamps_to_corner(rng):
    fm = Tensor(rng.normal(size=(3, 8, 8)))
    far = T.bilinear_sample(fm, [(-3.7, 1e6)]).data
    corner = T.bilinear_sample(fm, [(0.0, 7.0)]).data
    assert np.array_equal(far, corner)


def test_bilinear_empty_points():
    out = T.bilinear_sample(Tensor(np.ones((4, 3, 3))), np.zeros((0, 2)))
    assert out.shape == (4, 0)


@pytest.mark.parametrize("seed", range(20))
def test_bilinear_gradient(seed):
    r = np.random.default_rng(seed)
    pts = r.uniform(-1, 7, size=(9, 2))
    coef = r.normal(size=(2, 9))
    f = lambda t: T.sum(T.mul(T.bilinear_sample(t, pts), Tensor(coef)))
    assert grad_check(f, leaf(r.normal(size=(2, 6, 6)))) < 1e-4


def test_bilinear_batched_matches_single(rng):
    fm = rng.normal(size=(2, 3, 5, 5))
    pts = rng.uniform(0, 4, size=(4, 2))
    bi = np.array([1, 0, 1, 1])
    both = T.bilinear_sample(Tensor(fm), pts, bi).data
    for k in range(4):
        one = T.bilinear_sample(Tensor(fm[bi[k]]), pts[k:k + 1]).data[:, 0]
        assert np.allclose(both[:, k], one)


def test_adam_zero_gradient_is_identity():
    p = leaf([1.0, -2.0])
    p.grad = np.zeros(2)
    st_ = AdamState()
    adam_step({"p": p}, st_)
    assert np.array_equal(p.data, [1.0, -2.0]) and st_.step_count == 1


def test_adam_first_step_moves_by_lr():
    p = leaf([1.0, -2.0, 0.5])
    p.grad = np.array([3.0, -0.2, 40.0])
    st_ = AdamState()
    adam_step({"p": p}, st_)
    delta = p.data - [1.0, -2.0, 0.5]
    assert np.all(np.abs(delta + st_.lr * np.sign(p.grad)) < st_.lr * 1e-3)
    assert AdamState().lr == 2.5e-4


def test_adam_missing_grad_named():
    with pytest.raises(ValueError, match="head.w"):
        adam_step({"head.w": leaf([1.0])}, AdamState())


def test_step_lr_milestones():
    ms = (60, 80, 100, 150)
    assert step_lr(1.0, 59, ms, 0.5) == 1.0
    assert step_lr(1.0, 60, ms, 0.5) == 0.5
    assert step_lr(1.0, 150, ms, 0.5) == 0.0625


def test_checkpoint_roundtrip_and_truncation(tmp_path, rng):
    p = leaf(rng.normal(size=(3, 2)))
    p.grad = rng.normal(size=(3, 2))
    st_ = AdamState()
    adam_step({"w": p}, st_)
    path = tmp_path / "ck.npz"
    save_checkpoint(path, {"w": p.data}, st_, {"running_mean": np.ones(2)}, {"epoch": 4})
    ck = load_checkpoint(path)
    assert np.array_equal(ck.params["w"], p.data)
    assert ck.state.step_count == 1 and np.array_equal(ck.state.first_moment["w"],
                                                        st_.first_moment["w"])
    assert ck.meta["epoch"] == 4
    raw = path.read_bytes()
    path.write_bytes(raw[: len(raw) // 2])
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


@given(st.lists(st.floats(-5, 5), min_size=1, max_size=12), st.floats(-3, 3))
def test_scale_and_sum_linear(vals, c):
    x = leaf(vals)
    T.sum(T.scale(x, c)).backward()
    assert np.allclose(x.grad, c)


@given(st.integers(0, 2 ** 31 - 1))
def test_forward_and_gradients_are_deterministic(seed):
    def run():
        r = np.random.default_rng(seed)
        x = leaf(r.normal(size=(1, 2, 4, 4)))
        w = leaf(r.normal(size=(2, 2, 3, 3)))
        out = T.sum(T.relu(T.conv2d(x, w, padding=1)))
        out.backward()
        return out.data.copy(), w.grad.copy()
    a, b = run(), run()
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])
