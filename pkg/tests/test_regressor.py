import numpy as np
import pytest

from foosball_state import regressor as rg
from foosball_state.core import RodId, RodState

RID = RodId.parse("white_midfield")
SMALL = (32, 16)  # (w, h) keeps the tests fast


def _naive_forward(model, img):
    """Loop-based oracle: conv3x3 (zero pad) -> relu -> maxpool2, x3, GAP, linear."""
    p = model.params
    a = (img.astype(np.float64) / 255.0 - model.input_center)[None]  # (c, h, w)
    for i in (1, 2, 3):
        w, b = p[f"conv{i}_w"].astype(np.float64), p[f"conv{i}_b"].astype(np.float64)
        cin, h, wd = a.shape
        pad = np.zeros((cin, h + 2, wd + 2))
        pad[:, 1:-1, 1:-1] = a
        z = np.zeros((w.shape[0], h, wd))
        for o in range(w.shape[0]):
            for y in range(h):
                for x in range(wd):
                    z[o, y, x] = np.sum(w[o] * pad[:, y:y + 3, x:x + 3]) + b[o]
        z = np.maximum(z, 0)
        a = z.reshape(z.shape[0], h // 2, 2, wd // 2, 2).max(axis=(2, 4))
    feat = a.mean(axis=(1, 2))
    return p["head_w"].astype(np.float64) @ feat + p["head_b"]


def _img(seed=0, size=SMALL):
    return np.random.default_rng(seed).integers(0, 256, (size[1], size[0]), dtype=np.uint8)


def test_forward_matches_loop_oracle():
    m = rg.init_model(RID, seed=3, input_size=SMALL, dtype=np.float64)
    m.params["conv1_b"][:] = np.linspace(-0.1, 0.1, 8)
    img = _img(1)
    assert np.allclose(rg.forward(m, img), _naive_forward(m, img), rtol=1e-12, atol=1e-12)


def test_forward_zero_weights_gives_bias():
    m = rg.init_model(RID, input_size=SMALL, input_center=0.0)
    for v in m.params.values():
        v[:] = 0
    m.params["head_b"][:] = (0.25, -1.5, 3.0)
    pred = rg.forward(m, np.zeros((16, 32), np.uint8))
    assert pred == pytest.approx((0.25, -1.5, 3.0))


def test_forward_is_bit_stable():
    a = rg.forward(rg.init_model(RID, seed=7), _img(2, (256, 64)))
    b = rg.forward(rg.init_model(RID, seed=7), _img(2, (256, 64)))
    assert a == b


def test_head_is_linear():
    m = rg.init_model(RID, seed=2, input_size=SMALL, dtype=np.float64)
    m.params["head_b"][:] = (0.1, 0.2, -0.3)
    out = np.array(rg.forward(m, _img(4)))
    m.params["head_w"] *= 2
    m.params["head_b"] *= 2
    assert np.allclose(rg.forward(m, _img(4)), 2 * out, rtol=1e-14)


def test_shape_mismatch():
    m = rg.init_model(RID, input_size=SMALL)
    with pytest.raises(ValueError):
        rg.forward(m, np.zeros((32, 16), np.uint8))


def test_input_size_must_pool_cleanly():
    with pytest.raises(ValueError):
        rg.init_model(RID, input_size=(30, 16))


@pytest.mark.parametrize("pred, target, value", [
    ((0.3, 0.1, -2), (0.3, 0.1, -2), 0.0),
    ((0, 0, 0), (1, 0, 0), 1 / 3),
    ((1, 1, 1), (0, 0, 0), 1.0),
])
def test_loss_examples(pred, target, value):
    assert rg.loss(pred, target) == pytest.approx(value)


def test_predict_rod_state_examples(geometry):
    rod = geometry.rod(RID)
    assert rg.decode_prediction((0, -1, 0), rod) == RodState(0.0, 180.0)
    assert rg.decode_prediction((1.0, 1, 0), rod) == RodState(55.0, 0.0)
    assert rg.decode_prediction((1.3, 0, 1), rod).shift == 55.0
    with pytest.raises(ValueError):
        rg.decode_prediction((0.2, 0.0, 0.0), rod)


def test_make_target(geometry):
    rod = geometry.rod(RID)
    assert rg.make_target(27.5, 90.0, rod) == pytest.approx((0.5, 0.0, 1.0), abs=1e-15)


# -- pooling ---------------------------------------------------------------------

def test_pool_ties_go_to_first_position():
    x = np.ones((1, 1, 2, 2))
    out, masks = rg._pool_forward(x)
    assert out.item() == 1.0
    assert [m.item() for m in masks] == [True, False, False, False]
    dx = rg._pool_backward(np.full((1, 1, 1, 1), 5.0), masks, x.shape)
    assert dx.tolist() == [[[[5.0, 0.0], [0.0, 0.0]]]]


def test_pool_masks_partition_windows():
    x = np.random.default_rng(0).integers(0, 3, (2, 3, 6, 8)).astype(float)
    out, masks = rg._pool_forward(x)
    total = sum(m.astype(int) for m in masks)
    assert (total == 1).all()
    assert np.array_equal(out, x.reshape(2, 3, 3, 2, 4, 2).max(axis=(3, 5)))


# -- gradients -------------------------------------------------------------------

def test_gradient_check_head_only():
    m = rg.init_model(RID, seed=1, input_size=SMALL, dtype=np.float64)
    r = rg.gradient_check(m, _img(5), (0.3, -0.2, 0.9), epsilon=1e-6, n_params=99,
                          names=("head_w", "head_b"))
    assert r.checked == 99
    assert r.max_rel_error <= 1e-8


def test_gradient_check_full_model():
    m = rg.init_model(RID, seed=4, input_size=SMALL, dtype=np.float64)
    for i in (1, 2, 3):
        m.params[f"conv{i}_b"][:] = np.random.default_rng(i).normal(0, 0.05, m.params[f"conv{i}_b"].shape)
    r = rg.gradient_check(m, _img(6), (0.5, 0.6, -0.8), epsilon=1e-5, n_params=200)
    assert r.checked + r.excluded_ties >= 200
    assert r.checked >= 150
    assert r.max_rel_error <= 1e-5


def test_gradient_check_needs_float64():
    with pytest.raises(ValueError):
        rg.gradient_check(rg.init_model(RID, input_size=SMALL), _img(0), (0, 1, 0))


def test_zero_input_gives_zero_first_layer_weight_grads():
    m = rg.init_model(RID, seed=0, input_size=SMALL, dtype=np.float64, input_center=0.0)
    x = rg.preprocess(np.zeros((16, 32), np.uint8), m)
    _, grads = rg.loss_and_grads(m, x, np.array([[1.0, 0.0, 0.0]]))
    assert not grads["conv1_w"].any()


def test_batch_gradient_is_mean_of_sample_gradients():
    m = rg.init_model(RID, seed=2, input_size=SMALL, dtype=np.float64)
    imgs = np.stack([_img(s) for s in range(3)])
    y = np.array([[0.1, 1, 0], [-0.4, 0, 1], [0.9, -1, 0]], float)
    _, g_all = rg.loss_and_grads(m, rg.preprocess(imgs, m), y)
    singles = [rg.loss_and_grads(m, rg.preprocess(imgs[i], m), y[i:i + 1])[1] for i in range(3)]
    for k in g_all:
        assert np.allclose(g_all[k], sum(s[k] for s in singles) / 3, rtol=1e-10, atol=1e-14)


# -- optimizer and training ------------------------------------------------------

def test_adam_first_step_moves_by_lr():
    params = {"a": np.array([1.0, -2.0, 0.5])}
    opt = rg.Adam(params, lr=0.01)
    opt.step(params, {"a": np.array([3.0, -0.2, 0.0])})
    assert params["a"] == pytest.approx([0.99, -1.99, 0.5], abs=1e-8)


def test_adam_matches_reference_recurrence():
    rng = np.random.default_rng(0)
    p = {"w": rng.normal(size=4)}
    ref = p["w"].copy()
    m = v = np.zeros(4)
    opt = rg.Adam(p, lr=1e-3)
    for t in range(1, 6):
        g = rng.normal(size=4)
        opt.step(p, {"w": g})
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref = ref - 1e-3 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    assert np.allclose(p["w"], ref, rtol=1e-6, atol=1e-12)


def _toy_set(n=10, seed=0):
    x = np.random.default_rng(seed).integers(0, 256, (n, 16, 32), dtype=np.uint8)
    y = np.tile([0.4, -0.6, 0.8], (n, 1))
    return x, y


def test_constant_target_is_learned():
    x, y = _toy_set()
    _, hist = rg.train(x, y, rg.TrainConfig(epochs=50, batch_size=4), RID)
    assert len(hist) == 50
    assert hist[-1].train_loss < 1e-3


def test_training_is_deterministic():
    x, y = _toy_set(12, seed=3)
    cfg = rg.TrainConfig(epochs=3, seed=5)
    m1, h1 = rg.train(x, y, cfg, RID)
    m2, h2 = rg.train(x, y, cfg, RID)
    assert h1 == h2
    assert rg.model_to_bytes(m1) == rg.model_to_bytes(m2)


def test_tiny_learning_rate_barely_moves():
    x, y = _toy_set(8, seed=1)
    # one fixed batch: a single optimizer step per epoch
    cfg = rg.TrainConfig(epochs=4, learning_rate=1e-6, split=1.0, batch_size=8)
    _, hist = rg.train(x, y, cfg, RID)
    losses = [h.train_loss for h in hist]
    assert all(abs(a - b) < 1e-3 for a, b in zip(losses, losses[1:]))


def test_train_rejects_bad_input():
    with pytest.raises(ValueError):
        rg.train(np.zeros((0, 16, 32), np.uint8), np.zeros((0, 3)), rg.TrainConfig(), RID)
    with pytest.raises(ValueError):
        rg.train(np.zeros((4, 16, 32), np.uint8), np.zeros((4, 2)), rg.TrainConfig(), RID)
    with pytest.raises(ValueError):
        rg.TrainConfig(epochs=0)


def test_non_finite_loss_aborts():
    x, y = _toy_set(4)
    y[0, 0] = np.nan
    with pytest.raises(rg.TrainingDiverged):
        rg.train(x, y, rg.TrainConfig(epochs=1, split=1.0), RID)


# -- persistence -----------------------------------------------------------------

@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_model_round_trip(tmp_path, dtype):
    m = rg.init_model(RID, seed=9, dtype=dtype, input_center=0.37)
    m.split_seed, m.split_ratio = 2**40 + 1, 0.75
    path = tmp_path / rg.model_filename(RID)
    rg.save_model(m, path)
    back = rg.load_model(path)
    assert back.rod_id == RID
    assert (back.input_size, back.input_center) == (m.input_size, 0.37)
    assert (back.split_seed, back.split_ratio) == (m.split_seed, 0.75)
    for k in rg.PARAM_NAMES:
        assert back.params[k].dtype == dtype
        assert back.params[k].tobytes() == m.params[k].tobytes()
    assert rg.model_to_bytes(back) == path.read_bytes()


def test_model_bytes_start_with_magic():
    assert rg.model_to_bytes(rg.init_model(RID))[:4] == rg.MODEL_MAGIC


@pytest.mark.parametrize("mutate", [
    lambda b: b"XXXX" + b[4:],
    lambda b: b[:-1],
    lambda b: b + b"\0",
    lambda b: b[:10],
])
def test_corrupt_model_rejected(mutate):
    data = rg.model_to_bytes(rg.init_model(RID, input_size=SMALL))
    with pytest.raises(ValueError):
        rg.model_from_bytes(mutate(data))
