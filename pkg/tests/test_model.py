import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from circlesnake.data.synth import synth_scene
from circlesnake.model import CircleSnake, ModelConfig, Sample, preprocess, train_step
from circlesnake.optim import AdamState, CheckpointError


def tiny_cfg(**kw):
    base = dict(backbone_widths=(8, 8, 8), head_conv=8, snake_width=8, num_vertices=32, seed=0)
    base.update(kw)
    return ModelConfig(**base)


def tiny_sample(seed=0, size=64, n=3):
    scene = synth_scene(seed, size=size, n_instances=n, num_vertices=32)
    return scene, Sample.from_polygons(scene.image, list(zip(scene.class_ids, scene.polygons)),
                                       tiny_cfg(), seed)


def test_config_head_contract():
    assert ModelConfig().heads == {"ct_hm": 4, "radius": 1, "reg": 2}
    with pytest.raises(ValueError):
        ModelConfig(num_classes=3)
    with pytest.raises(ValueError):
        ModelConfig(heads={"ct_hm": 4, "radius": 2, "reg": 2})


def test_heads_emit_class_channels():
    m = CircleSnake(tiny_cfg())
    hm, rad, off, _ = m.heads(preprocess([np.zeros((64, 64, 3), np.uint8)]))
    assert hm.shape == (1, 4, 16, 16) and rad.shape[1] == 1 and off.shape[1] == 2
    assert hm.data.min() > 0 and hm.data.max() < 1


def test_blank_image_prediction_contract():
    m = CircleSnake(tiny_cfg(num_vertices=128))
    _, preds = m.predict(np.zeros((64, 64, 3), np.uint8), ct_score=0.5, top_n=5)
    assert len(preds) <= 5
    _, preds = m.predict(np.zeros((64, 64, 3), np.uint8), ct_score=0.0, top_n=7)
    assert len(preds) == 7
    assert all(p.contour.vertices.shape == (128, 2) for p in preds)
    assert all(p.contour.class_id == p.circle.class_id for p in preds)


def test_rejects_non_rgb():
    with pytest.raises(ValueError):
        CircleSnake(tiny_cfg()).predict(np.zeros((32, 32), np.uint8))


@settings(max_examples=8)
@given(st.integers(17, 70), st.integers(17, 70))
def test_forward_shapes_for_any_size(h, w):
    m = CircleSnake(tiny_cfg())
    (hm, rad, off), _ = m.predict(np.zeros((h, w, 3), np.uint8), ct_score=1.0)
    ph, pw = -(-h // 16) * 16, -(-w // 16) * 16
    assert hm.shape == (4, ph // 4, pw // 4)
    assert rad.shape == (1, ph // 4, pw // 4) and off.shape == (2, ph // 4, pw // 4)


def test_checkpoint_roundtrip_forward_identical(tmp_path):
    m = CircleSnake(tiny_cfg())
    _, s = tiny_sample()
    st_ = AdamState()
    train_step(m, [s], st_, np.random.default_rng(0))
    img = s.image
    before, pb = m.predict(img, ct_score=0.0, top_n=3)
    path = tmp_path / "3.npz"
    m.save(path, st_, {"epoch": 3})
    m2, st2, meta = CircleSnake.load(path)
    after, pa = m2.predict(img, ct_score=0.0, top_n=3)
    assert all(np.array_equal(a, b) for a, b in zip(before, after))
    assert all(np.array_equal(x.contour.vertices, y.contour.vertices) for x, y in zip(pb, pa))
    assert meta["epoch"] == 3 and st2.step_count == 1
    raw = path.read_bytes()
    path.write_bytes(raw[:-200])
    with pytest.raises(CheckpointError):
        CircleSnake.load(path)


def _run(steps):
    m = CircleSnake(tiny_cfg())
    _, s = tiny_sample()
    st_, rng = AdamState(lr=1e-3), np.random.default_rng(5)
    return [train_step(m, [s], st_, rng, i) for i in range(steps)]


def test_training_is_deterministic():
    a, b = _run(4), _run(4)
    assert [p.log_line(i, 0.1) for i, p in enumerate(a)] == [p.log_line(i, 0.1) for i, p in enumerate(b)]


def test_overfit_single_batch_loss_drops():
    parts = _run(200)
    totals = np.array([p.total for p in parts])
    assert totals[-1] < totals[0]
    ma = np.convolve(totals, np.ones(20) / 20, mode="valid")
    rises = ma[1:] / ma[:-1] - 1
    assert rises.max() <= 0.05


def test_no_dead_parameters_after_supervised_steps():
    scene = synth_scene(11, size=128, n_instances=6, num_vertices=32)
    assert set(scene.class_ids) == {0, 1, 2, 3}
    cfg = tiny_cfg()
    s = Sample.from_polygons(scene.image, list(zip(scene.class_ids, scene.polygons)), cfg)
    m = CircleSnake(cfg)
    st_, rng = AdamState(lr=1e-3), np.random.default_rng(0)
    train_step(m, [s], st_, rng)
    # second step: the zero-initialised snake output layer has moved, so gradient reaches everything
    total, _ = m.loss([s], rng)
    m.zero_grad()
    total.backward()
    dead = [n for n, p in m.parameters().items() if p.grad is None or not np.any(p.grad)]
    assert dead == []


def test_nonfinite_loss_aborts_with_step():
    m = CircleSnake(tiny_cfg())
    _, s = tiny_sample()
    m.radius_head.out.bias.data[...] = np.inf
    with pytest.raises(FloatingPointError, match="step 9"):
        train_step(m, [s], AdamState(), np.random.default_rng(0), 9)


def test_batch_of_two():
    m = CircleSnake(tiny_cfg(batch_size=2))
    _, a = tiny_sample(1)
    _, b = tiny_sample(2)
    parts = train_step(m, [a, b], AdamState(), np.random.default_rng(0))
    assert np.isfinite(parts.total)
