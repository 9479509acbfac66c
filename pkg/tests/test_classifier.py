import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spba.classifier import (
    _forward,
    AdamState,
    CheckpointError,
    ModelParams,
    PARAM_NAMES,
    adam_step,
    backward,
    cosine_lr,
    cross_entropy,
    forward,
    init_params,
    load_checkpoint,
    logit_input_grad,
    predict,
    save_checkpoint,
)


def total_loss(params, pts, labels):
    logits = forward(params, pts)
    return sum(cross_entropy(l, y) for l, y in zip(logits, labels))


class TestForward:
    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 10 ** 6))
    def test_permutation_invariant(self, seed):
        rng = np.random.default_rng(seed)
        params = init_params(4, 16, seed)
        pts = rng.normal(size=(64, 3))
        perm = rng.permutation(64)
        np.testing.assert_allclose(forward(params, pts[perm]), forward(params, pts), atol=1e-12)

    def test_zero_weights_give_bias(self, rng):
        params = ModelParams.zeros(8, 3)
        params.b3[:] = [0.5, -1.0, 2.0]
        np.testing.assert_array_equal(forward(params, rng.normal(size=(10, 3))), params.b3)

    def test_duplicates_do_not_matter(self, rng):
        params = init_params(4, 16, 1)
        pts = rng.normal(size=(20, 3))
        np.testing.assert_allclose(forward(params, np.vstack([pts, pts[:5]])), forward(params, pts), atol=1e-12)

    def test_batch_matches_single(self, rng):
        params = init_params(4, 16, 1)
        batch = rng.normal(size=(3, 20, 3))
        out = forward(params, batch)
        for b in range(3):
            np.testing.assert_allclose(out[b], forward(params, batch[b]), atol=1e-12)
        assert predict(params, batch).shape == (3,)

    def test_init_bounds(self):
        p = init_params(4, 64, 0)
        assert np.abs(p.w1).max() <= math.sqrt(1 / 3)
        assert np.abs(p.w2).max() <= math.sqrt(1 / 64)
        assert p.w3.shape == (64, 4)


class TestCrossEntropy:
    def test_uniform(self):
        assert cross_entropy(np.zeros(4), 2) == pytest.approx(math.log(4), abs=1e-12)

    def test_saturated(self):
        assert cross_entropy(np.array([1000.0, 0, 0, 0]), 0) < 1e-12
        assert math.isfinite(cross_entropy(np.array([1000.0, 0, 0, 0]), 1))

    def test_oracle(self, rng):
        z = rng.normal(size=5)
        assert cross_entropy(z, 3) == pytest.approx(-math.log(math.exp(z[3]) / np.exp(z).sum()), rel=1e-12)


def fd_check(f, x, analytic, h=1e-5, tol=1e-4):
    num = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        num[i] = (fp - fm) / (2 * h)
    denom = max(np.linalg.norm(num), np.linalg.norm(analytic), 1e-12)
    assert np.linalg.norm(num - analytic) / denom <= tol


class TestGradients:
    @pytest.fixture
    def setup(self, rng):
        params = init_params(3, 8, 7)
        pts = rng.normal(size=(2, 16, 3))
        labels = np.array([0, 2])
        return params, pts, labels

    def test_param_gradients(self, setup):
        params, pts, labels = setup
        _, grads = backward(params, pts, labels)
        for name in PARAM_NAMES:
            fd_check(lambda: total_loss(params, pts, labels), getattr(params, name), getattr(grads.params, name))

    def test_input_gradients(self, setup):
        params, pts, labels = setup
        _, grads = backward(params, pts, labels)
        fd_check(lambda: total_loss(params, pts, labels), pts, grads.inputs)

    def test_loss_is_batch_sum(self, setup):
        params, pts, labels = setup
        loss, _ = backward(params, pts, labels)
        assert loss == pytest.approx(total_loss(params, pts, labels), rel=1e-12)

    def test_batch_gradient_is_sum_of_singles(self, setup):
        params, pts, labels = setup
        _, g = backward(params, pts, labels)
        singles = [backward(params, pts[b], int(labels[b]))[1] for b in range(2)]
        for name in PARAM_NAMES:
            np.testing.assert_allclose(getattr(g.params, name),
                                       sum(getattr(s.params, name) for s in singles), atol=1e-12)

    def test_non_winning_point_has_zero_grad(self, rng):
        params = init_params(3, 8, 2)
        pts = rng.normal(size=(16, 3))
        pts = np.vstack([pts, pts.mean(axis=0)])  # interior point rarely wins any channel
        arg = _forward(params, pts)[1][-1]
        losers = np.setdiff1d(np.arange(len(pts)), arg)
        assert losers.size
        g = logit_input_grad(params, pts, 1)
        assert not g[losers].any()


class TestAdam:
    def test_zero_gradient_noop(self):
        p = {"w": np.array([1.0, -2.0])}
        new, state = adam_step(p, {"w": np.zeros(2)}, AdamState(), 0.1)
        np.testing.assert_array_equal(new["w"], p["w"])
        assert state.t == 1

    def test_first_step(self):
        g = np.array([0.5, -3.0, 1e-3])
        p = {"w": np.zeros(3)}
        new, _ = adam_step(p, {"w": g}, AdamState(), 0.01)
        np.testing.assert_allclose(new["w"], -0.01 * g / (np.abs(g) + 1e-8), rtol=1e-12)

    def test_decoupled_weight_decay(self):
        p = {"w": np.array([2.0, -4.0])}
        new, _ = adam_step(p, {"w": np.zeros(2)}, AdamState(), 0.1, weight_decay=0.01)
        np.testing.assert_allclose(new["w"], p["w"] * (1 - 0.1 * 0.01), rtol=1e-15)

    def test_does_not_mutate(self):
        p = {"w": np.ones(2)}
        adam_step(p, {"w": np.ones(2)}, AdamState(), 0.1)
        np.testing.assert_array_equal(p["w"], np.ones(2))


class TestCosine:
    def test_values(self):
        assert cosine_lr(0, 100, 1e-3) == 1e-3
        assert cosine_lr(50, 100, 1e-3) == pytest.approx(5e-4, rel=1e-12)
        assert cosine_lr(99, 100, 1e-3) < 1e-5

    def test_monotone(self):
        lrs = [cosine_lr(e, 100, 1.0) for e in range(100)]
        assert all(a >= b for a, b in zip(lrs, lrs[1:]))

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            cosine_lr(100, 100, 1.0)


class TestCheckpoint:
    def test_roundtrip_bit_exact(self, tmp_path):
        p = init_params(4, 16, 3)
        path = tmp_path / "m.bin"
        save_checkpoint(path, p)
        back = load_checkpoint(path)
        for name in PARAM_NAMES:
            assert getattr(back, name).tobytes() == getattr(p, name).tobytes()
        assert path.read_bytes()[:8] == b"SPBAMODL"

    def test_truncated(self, tmp_path):
        path = tmp_path / "m.bin"
        save_checkpoint(path, init_params(4, 16, 3))
        data = path.read_bytes()
        path.write_bytes(data[:-8])
        with pytest.raises(CheckpointError, match="offset"):
            load_checkpoint(path)
        path.write_bytes(data + b"\0")
        with pytest.raises(CheckpointError, match="trailing"):
            load_checkpoint(path)

    def test_bad_magic_and_version(self, tmp_path):
        path = tmp_path / "m.bin"
        save_checkpoint(path, init_params(4, 16, 3))
        data = bytearray(path.read_bytes())
        path.write_bytes(b"XXXXXXXX" + bytes(data[8:]))
        with pytest.raises(CheckpointError, match="magic"):
            load_checkpoint(path)
        data[8] = 9
        path.write_bytes(bytes(data))
        with pytest.raises(CheckpointError, match="version 9"):
            load_checkpoint(path)
