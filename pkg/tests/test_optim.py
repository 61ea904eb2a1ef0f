import math

import numpy as np
import pytest

from stair.optim import (
    NonFiniteGradientError, OptimConfig, adam_step, anchor_penalty, clip_global_norm, global_norm, mse_loss,
)
from stair.params import ParamSet


def _ps(**arrays):
    return ParamSet({k: np.asarray(v, dtype=np.float64) for k, v in arrays.items()})


def test_mse_examples():
    y = np.ones((2, 3, 2))
    loss, g = mse_loss(y, y)
    assert loss == 0 and not g.any()
    loss, _ = mse_loss(y + 1, y)
    assert loss == pytest.approx(1.0)
    loss, g = mse_loss(np.full((1, 1, 1), 3.0), np.full((1, 1, 1), 1.0))
    assert loss == 4.0 and g.item() == 4.0
    with pytest.raises(ValueError):
        mse_loss(np.zeros((1, 2, 1)), np.zeros((1, 1, 1)))


def test_adam_first_step_moves_by_lr():
    ps = _ps(w=[0.0])
    ps.grads["w"][...] = 1.0
    adam_step(ps, OptimConfig(lr=1e-3, weight_decay=0.0))
    assert ps.params["w"][0] == pytest.approx(-1e-3, rel=1e-7)
    assert ps.step == 1


def test_zero_gradient_without_decay_is_noop():
    ps = _ps(w=[1.5, -2.0])
    adam_step(ps, OptimConfig(weight_decay=0.0))
    np.testing.assert_array_equal(ps.params["w"], [1.5, -2.0])


def test_decoupled_decay():
    ps = _ps(w=[1.0])
    adam_step(ps, OptimConfig(lr=1e-3, weight_decay=1e-5))
    assert ps.params["w"][0] == pytest.approx(1 - 1e-8, abs=1e-15)


def _textbook_adam(p, grad_fn, steps, lr, b1, b2, eps):
    m = [0.0] * len(p)
    v = [0.0] * len(p)
    p = list(p)
    for t in range(1, steps + 1):
        g = grad_fn(p)
        for i in range(len(p)):
            m[i] = b1 * m[i] + (1 - b1) * g[i]
            v[i] = b2 * v[i] + (1 - b2) * g[i] * g[i]
            mh = m[i] / (1 - b1 ** t)
            vh = v[i] / (1 - b2 ** t)
            p[i] = p[i] - lr * mh / (math.sqrt(vh) + eps)
    return np.array(p)


@pytest.mark.parametrize("seed", range(5))
def test_adam_matches_textbook_oracle(seed):
    rng = np.random.default_rng(seed)
    Q = rng.normal(size=(10, 10))
    A = Q @ Q.T + np.eye(10)
    c = rng.normal(size=10)
    p0 = rng.normal(size=10)
    grad = lambda p: A @ (np.asarray(p) - c)
    cfg = OptimConfig(lr=1e-2, weight_decay=0.0, clip_norm=math.inf)
    ps = _ps(p=p0.copy())
    for _ in range(100):
        ps.grads["p"][...] = grad(ps.params["p"])
        clip_global_norm(ps, cfg.clip_norm)
        adam_step(ps, cfg)
    ref = _textbook_adam(p0, lambda p: list(grad(p)), 100, 1e-2, 0.9, 0.999, 1e-8)
    assert np.abs(ps.params["p"] - ref).max() < 1e-10


def test_clip_examples():
    ps = _ps(g=[0.0, 0.0])
    ps.grads["g"][...] = [3.0, 4.0]
    assert clip_global_norm(ps, 1.0) == 5.0
    np.testing.assert_allclose(ps.grads["g"], [0.6, 0.8], atol=1e-6)
    assert global_norm(ps) <= 1.0 + 1e-7
    ps.grads["g"][...] = [0.3, 0.4]
    clip_global_norm(ps, 1.0)
    np.testing.assert_array_equal(ps.grads["g"], [0.3, 0.4])


def test_clip_is_global_across_sets(rng):
    a, b = _ps(x=np.zeros(5)), _ps(y=np.zeros((2, 3)))
    a.grads["x"][...] = rng.normal(size=5) * 10
    b.grads["y"][...] = rng.normal(size=(2, 3)) * 10
    before = np.concatenate([a.flat_grads(), b.flat_grads()])
    clip_global_norm([a, b], 2.0)
    after = np.concatenate([a.flat_grads(), b.flat_grads()])
    assert np.linalg.norm(after) <= 2.0 + 1e-7
    np.testing.assert_allclose(after / np.linalg.norm(after), before / np.linalg.norm(before))


def test_anchor_examples():
    bank, anchor = _ps(w=[[2.0]]), _ps(w=[[1.0]])
    assert anchor_penalty(bank, anchor, 0.5) == 0.5
    assert bank.grads["w"][0, 0] == 1.0
    same = _ps(w=np.ones((3, 2)))
    assert anchor_penalty(same, _ps(w=np.ones((1, 2))), 0.7) == 0.0
    assert not same.grads["w"].any()


def test_non_finite_gradient_names_block():
    ps = _ps(a=[1.0], bad=[1.0, 2.0])
    ps.grads["bad"][1] = np.nan
    with pytest.raises(NonFiniteGradientError, match="bad"):
        adam_step(ps, OptimConfig())


@pytest.mark.parametrize("kw", [{"lr": 0}, {"beta1": 1.0}, {"clip_norm": 0}, {"weight_decay": -1}])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        OptimConfig(**kw)
