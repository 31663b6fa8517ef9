import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from hran.checkpoint import load_checkpoint
from hran.data import PairedDataset
from hran.errors import ConfigError, NumericalError, ShapeError
from hran.model import ModelConfig, init_params
from hran.rng import Rng
from hran.train import TrainConfig, adam_step, l1_loss, lr_at, train_loop

from conftest import random_image

TINY = ModelConfig.tiny()
SMALL_RUN = TrainConfig(batch=2, patch=8, lr0=1e-3, max_iters=6, checkpoint_every=3, window=3, seed=7)


@pytest.fixture(scope="module")
def dataset():
    r = np.random.default_rng(3)
    return PairedDataset.from_images({"a": random_image(r, 24, 24), "b": random_image(r, 20, 28)}, 2)


# -- rng -----------------------------------------------------------------------------------


def test_splitmix_reference_outputs():
    r = Rng(0)
    assert [r.next_u64() for _ in range(3)] == [0xE220A8397B1DCDAF, 0x6E789E6AA1B965F4, 0x06C45D188009454F]


def test_u64_array_matches_scalar_stream():
    a, b = Rng(12345), Rng(12345)
    assert a.u64_array(50).tolist() == [b.next_u64() for _ in range(50)]
    assert a.state == b.state


def test_below_range_and_uniformity():
    r = Rng(1)
    draws = [r.below(6) for _ in range(6000)]
    assert min(draws) == 0 and max(draws) == 5
    counts = np.bincount(draws)
    assert np.all(np.abs(counts - 1000) < 120)
    with pytest.raises(ValueError):
        r.below(0)


def test_normal_moments():
    z = Rng(2).normal(20001)
    assert z.shape == (20001,)
    assert abs(z.mean()) < 0.03 and abs(z.std() - 1) < 0.03


# -- loss and schedule ----------------------------------------------------------------------


def test_l1_known_value_and_grad():
    pred = np.array([1.0, -2.0, 3.0, 0.5]).reshape(1, 1, 2, 2)
    target = np.array([0.0, 0.0, 3.0, 1.0]).reshape(1, 1, 2, 2)
    loss, grad = l1_loss(pred, target)
    assert loss == pytest.approx((1 + 2 + 0 + 0.5) / 4)
    np.testing.assert_array_equal(grad.ravel(), [0.25, -0.25, 0.0, -0.25])


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (1, 2, 3, 3), elements=st.floats(-10, 10)))
def test_l1_nonnegative_and_zero_on_self(x):
    assert l1_loss(x, x)[0] == 0.0
    assert l1_loss(x, np.zeros_like(x))[0] >= 0.0


def test_l1_grad_matches_finite_differences(rng):
    pred = rng.uniform(-1, 1, (1, 1, 4, 4))
    target = pred + rng.choice([-1, 1], pred.shape) * rng.uniform(0.1, 1, pred.shape)
    _, grad = l1_loss(pred, target)
    for idx in np.ndindex(pred.shape):
        p = pred.copy()
        p[idx] += 1e-6
        fp = l1_loss(p, target)[0]
        p[idx] -= 2e-6
        fm = l1_loss(p, target)[0]
        assert (fp - fm) / 2e-6 == pytest.approx(grad[idx], rel=1e-6)


def test_l1_shape_mismatch():
    with pytest.raises(ShapeError):
        l1_loss(np.zeros((1, 3, 2, 2)), np.zeros((1, 3, 2, 3)))


def test_lr_schedule():
    assert lr_at(0) == 1e-4
    assert lr_at(199_999) == 1e-4
    assert lr_at(200_000) == 5e-5
    assert lr_at(650_000) == 1e-4 / 8
    values = [lr_at(t, 1.0, 7) for t in range(100)]
    assert all(a >= b for a, b in zip(values, values[1:]))


# -- Adam ------------------------------------------------------------------------------------


def test_adam_zero_grads_is_noop():
    store = init_params(TINY, 1)
    before = {n: store.value(n).copy() for n in store}
    adam_step(store, 1, 1e-3)
    for n, p in store.items():
        assert np.array_equal(p.value, before[n])
        assert not p.m.any() and not p.v.any()


def test_adam_matches_scalar_oracle():
    store = init_params(TINY, 0, np.float64)
    p = store["head.sf1.bias"]
    start = p.value.copy()
    grads = [np.array([0.5, -1.0, 2.0, 0.0]), np.array([0.1, 0.1, -3.0, 1.0]), np.array([-0.2, 0.3, 0.0, 0.0])]
    b1, b2, eps, lr = 0.9, 0.999, 1e-8, 1e-2
    m = [0.0] * 4
    v = [0.0] * 4
    ref = start.tolist()
    for t, g in enumerate(grads, 1):
        p.grad[...] = g
        adam_step(store, t, lr)
        for k in range(4):
            m[k] = b1 * m[k] + (1 - b1) * g[k]
            v[k] = b2 * v[k] + (1 - b2) * g[k] ** 2
            mh, vh = m[k] / (1 - b1**t), v[k] / (1 - b2**t)
            ref[k] -= lr * mh / (math.sqrt(vh) + eps)
    np.testing.assert_allclose(p.value, ref, rtol=1e-12, atol=1e-15)
    assert not p.grad.any()


def test_adam_first_step_moves_by_lr():
    store = init_params(TINY, 0, np.float64)
    p = store["recon.out.bias"]
    p.grad[...] = [3.0, -0.01, 7.0]
    adam_step(store, 1, 1e-3)
    np.testing.assert_allclose(p.value, [-1e-3, 1e-3, -1e-3], rtol=1e-5)


def test_adam_rejects_nan_naming_parameter():
    store = init_params(TINY)
    store["rg.1.conv.weight"].grad[0, 0, 0, 0] = np.nan
    with pytest.raises(NumericalError, match="rg.1.conv.weight"):
        adam_step(store, 1, 1e-3)


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(lr0=0)
    with pytest.raises(ConfigError):
        TrainConfig(batch=0)
    with pytest.raises(ConfigError):
        TrainConfig(beta2=1.0)


# -- training loop ------------------------------------------------------------------------


def test_zero_iterations_writes_initial_checkpoint(tmp_path, dataset):
    res = train_loop(TINY, TrainConfig(max_iters=0, patch=8), dataset, out_dir=tmp_path)
    assert sorted(p.name for p in tmp_path.iterdir()) == ["last.ckpt", "loss.log"]
    assert (tmp_path / "loss.log").read_text() == ""
    ck = load_checkpoint(res.checkpoint, expect=TINY)
    assert ck.iteration == 0
    fresh = init_params(TINY, 0)
    assert all(ck.store.value(n).tobytes() == fresh.value(n).tobytes() for n in fresh)


def test_loop_outputs_and_loss_log(tmp_path, dataset):
    res = train_loop(TINY, SMALL_RUN, dataset, out_dir=tmp_path)
    names = sorted(p.name for p in tmp_path.iterdir())
    assert names == ["iter_0000003.ckpt", "iter_0000006.ckpt", "last.ckpt", "loss.log"]
    lines = (tmp_path / "loss.log").read_text().splitlines()
    assert [int(ln.split("\t")[0]) for ln in lines] == [1, 2, 3, 4, 5, 6]
    assert [float(ln.split("\t")[2]) for ln in lines] == pytest.approx([h[2] for h in res.history])
    assert all(h[2] >= 0 for h in res.history)
    assert load_checkpoint(tmp_path / "last.ckpt").iteration == 6


def test_runs_are_byte_identical(tmp_path, dataset):
    train_loop(TINY, SMALL_RUN, dataset, out_dir=tmp_path / "a")
    train_loop(TINY, SMALL_RUN, dataset, out_dir=tmp_path / "b")
    for name in ("loss.log", "last.ckpt", "iter_0000003.ckpt"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_resume_is_bit_exact(tmp_path, dataset):
    train_loop(TINY, SMALL_RUN, dataset, out_dir=tmp_path / "full")
    part = tmp_path / "part"
    train_loop(TINY, SMALL_RUN, dataset, out_dir=part)  # runs to 6, then resume from 3
    train_loop(TINY, SMALL_RUN, dataset, out_dir=part, resume=part / "iter_0000003.ckpt")
    for name in ("loss.log", "last.ckpt", "iter_0000006.ckpt"):
        assert (part / name).read_bytes() == (tmp_path / "full" / name).read_bytes()


def test_resume_needs_optimizer_state(tmp_path, dataset):
    from hran.checkpoint import save_checkpoint

    save_checkpoint(tmp_path / "w.ckpt", TINY, init_params(TINY))
    with pytest.raises(ConfigError, match="optimizer"):
        train_loop(TINY, SMALL_RUN, dataset, resume=tmp_path / "w.ckpt")


def test_loop_rejects_bad_inputs(dataset):
    with pytest.raises(ConfigError):
        train_loop(TINY.with_(scale=3), SMALL_RUN, dataset)
    with pytest.raises(ConfigError):
        train_loop(TINY, SMALL_RUN, PairedDataset([], 2))


def test_nan_weights_abort(dataset):
    store = init_params(TINY)
    store.value("recon.out.bias")[0] = np.nan
    with pytest.raises(NumericalError):
        train_loop(TINY, SMALL_RUN, dataset, store=store)


def test_loss_decreases_on_tiny_run(dataset):
    res = train_loop(TINY, TrainConfig(batch=2, patch=8, lr0=5e-3, max_iters=40, window=10, seed=1), dataset)
    losses = [h[2] for h in res.history]
    assert np.mean(losses[-10:]) < 0.5 * losses[0]
