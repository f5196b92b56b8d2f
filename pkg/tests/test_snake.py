import numpy as np
import pytest
from hypothesis import given, strategies as st

from circlesnake import tensor as T
from circlesnake.geometry import Circle, sample_circle_contour
from circlesnake.snake import (BACKBONE_DEPTH, DEFAULT_ITERATIONS, KERNEL_SIZE, SnakeNetwork,
                               build_vertex_features, deform, gcn_forward)
from circlesnake.tensor import Tensor, grad_check


def leaf(a):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


def cconv(f, k):
    return T.circular_conv(Tensor(np.asarray(f, float)), Tensor(np.asarray(k, float))).data


def test_wraparound_example():
    out = cconv([[1, 2, 3, 4]], [[[1, 1, 1]]])
    assert out.tolist() == [[7, 6, 9, 8]]


def test_delta_and_shift_kernels(rng):
    f = rng.normal(size=(3, 11))
    delta = np.zeros((3, 3, 5))
    delta[np.arange(3), np.arange(3), 2] = 1
    assert np.allclose(cconv(f, delta), f)
    shift = np.zeros((3, 3, 5))
    shift[np.arange(3), np.arange(3), 3] = 1      # j = +1
    assert np.allclose(cconv(f, shift), np.roll(f, -1, axis=1))


def test_kernel_longer_than_ring_rejected():
    with pytest.raises(ValueError):
        cconv(np.ones((1, 8)), np.ones((1, 1, 9)))


@given(st.integers(0, 10 ** 6), st.integers(10, 40), st.integers(0, 100))
def test_rotation_equivariance(seed, n, s):
    r = np.random.default_rng(seed)
    f = r.normal(size=(2, 3, n))
    k = r.normal(size=(4, 3, 9))
    lhs = cconv(np.roll(f, s, axis=-1), k)
    rhs = np.roll(cconv(f, k), s, axis=-1)
    assert np.max(np.abs(lhs - rhs)) < 1e-6


@pytest.mark.parametrize("seed", range(20))
def test_circular_conv_gradients(seed):
    r = np.random.default_rng(seed)
    f = r.normal(size=(4, 12))
    k = r.normal(size=(3, 4, 9))
    b = r.normal(size=3)
    coef = r.normal(size=(3, 12))
    e_f = lambda t: T.sum(T.mul(T.circular_conv(t, Tensor(k), Tensor(b)), Tensor(coef)))
    e_k = lambda t: T.sum(T.mul(T.circular_conv(Tensor(f), t, Tensor(b)), Tensor(coef)))
    assert grad_check(e_f, leaf(f)) < 1e-4
    assert grad_check(e_k, leaf(k)) < 1e-4


def small_net(in_ch, seed=0, width=8):
    return SnakeNetwork(in_ch, width=width, seed=seed, dtype=np.float64)


def test_network_shape_constants():
    net = small_net(6)
    assert len(net.blocks) == BACKBONE_DEPTH == 8
    assert len(net.head) == 3
    assert KERNEL_SIZE == 9 and DEFAULT_ITERATIONS == 3
    assert net.blocks[0].conv.weight.shape[-1] == 9


def test_vertex_features_constant_map():
    fm = Tensor(np.full((5, 16, 16), 0.75))
    ring = sample_circle_contour(Circle(30, 30, 12)).vertices
    vf = build_vertex_features(fm, ring)
    assert vf.values.shape == (1, 7, 128)
    assert np.allclose(vf.values.data[0, :5], 0.75)
    assert np.allclose(vf.values.data[0, 5:].mean(axis=1), 0, atol=1e-9)


def test_untrained_network_is_identity(rng):
    fm = Tensor(rng.normal(size=(4, 16, 16)))
    net = small_net(6)
    ring = sample_circle_contour(Circle(32, 30, 10), 32).vertices
    vf = build_vertex_features(fm, ring)
    assert np.all(gcn_forward(vf, net).data == 0)
    steps = deform(ring, fm, net, iterations=3)
    assert len(steps) == 3
    assert np.allclose(steps[-1].data[0], ring)


def test_width_mismatch_rejected(rng):
    net = small_net(6)
    with pytest.raises(ValueError):
        gcn_forward(Tensor(rng.normal(size=(1, 5, 16))), net)


@given(st.integers(12, 64), st.integers(1, 3))
def test_output_shape_2xN(n, k):
    net = small_net(4, width=4)
    r = np.random.default_rng(n)
    out = gcn_forward(Tensor(r.normal(size=(k, 4, n))), net)
    assert out.shape == (k, 2, n)


def _perturbed_head(net, rng):
    for p in net.head[-1].parameters().values():
        p.data[...] = rng.normal(scale=0.3, size=p.shape)


@pytest.mark.parametrize("seed", range(20))
def test_gcn_gradient_wrt_features(seed):
    r = np.random.default_rng(seed)
    net = small_net(3, seed=seed, width=4)
    net.eval()
    for bn in (b.bn for b in net.blocks):
        bn.running_mean[...] = r.normal(size=bn.running_mean.shape) * 0.1
    _perturbed_head(net, r)
    x = r.normal(size=(1, 3, 12))
    coef = r.normal(size=(1, 2, 12))
    f = lambda t: T.sum(T.mul(gcn_forward(t, net), Tensor(coef)))
    assert grad_check(f, leaf(x)) < 1e-4


def test_no_dead_parameters_after_one_update(rng):
    """The zero-initialised last layer blocks upstream gradients only until its first update."""
    from circlesnake.optim import AdamState, adam_step
    from circlesnake.losses import iter_loss
    net = small_net(6, width=8)
    fm = Tensor(rng.normal(size=(4, 16, 16)))
    rings = np.stack([sample_circle_contour(Circle(30, 30, 10), 32).vertices,
                      sample_circle_contour(Circle(20, 40, 8), 32).vertices])
    gt = rings * 1.1 - 3
    st_ = AdamState(lr=1e-2)
    for step in range(2):
        net.zero_grad()
        loss = iter_loss(deform(rings, fm, net, 1)[0], gt)
        loss.backward()
        if step == 1:
            dead = [n for n, p in net.parameters().items()
                    if p.grad is None or not np.any(p.grad)]
            assert dead == []
        for p in net.parameters().values():
            if p.grad is None:
                p.grad = np.zeros_like(p.data)
        adam_step(net.parameters(), st_)


def test_nonfinite_offsets_report_iteration(rng):
    net = small_net(6)
    net.head[-1].bias.data[...] = np.nan
    fm = Tensor(rng.normal(size=(4, 16, 16)))
    with pytest.raises(FloatingPointError, match="iteration 0"):
        deform(sample_circle_contour(Circle(30, 30, 10), 32).vertices, fm, net)
