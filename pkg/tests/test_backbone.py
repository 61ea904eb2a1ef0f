import numpy as np
import pytest

from stair import backbone as bb
from stair.backbone import BackboneConfig, channel_major, clone_to_individual, export_joint_matrix, init_shared
from stair.gradcheck import run_gradchecks
from stair.params import StaleCacheError


def test_parameter_counts():
    assert init_shared(BackboneConfig(96, 96)).n_params == 96 * 96 + 96
    assert init_shared(BackboneConfig(96, 720, layers=2, hidden=512)).n_params == 96 * 512 + 512 + 512 * 720 + 720
    assert clone_to_individual(init_shared(BackboneConfig(96, 96)), 7).n_params == 7 * (96 * 96 + 96)


def test_init_range_and_determinism():
    cfg = BackboneConfig(16, 8, layers=2, hidden=32)
    a, b = init_shared(cfg, 3), init_shared(cfg, 3)
    for k in a.params:
        assert a.params[k].tobytes() == b.params[k].tobytes()
    assert np.abs(a.params["w0"]).max() <= 1 / 4
    assert np.abs(a.params["w1"]).max() <= 1 / np.sqrt(32)
    assert not np.array_equal(init_shared(cfg, 4).params["w0"], a.params["w0"])


def test_identity_mapping(rng):
    bank = init_shared(BackboneConfig(6, 6), dtype=np.float64)
    bank.params["w0"][0] = np.eye(6)
    bank.params["b0"][0] = 0
    x = rng.normal(size=(3, 6, 4))
    np.testing.assert_array_equal(bb.predict(bank, x), x)


def test_shared_channel_equivariance(rng):
    bank = init_shared(BackboneConfig(8, 4, layers=2, hidden=6), 0, np.float64)
    x = rng.normal(size=(5, 8, 4))
    perm = rng.permutation(4)
    np.testing.assert_array_equal(bb.predict(bank, x[:, :, perm]), bb.predict(bank, x)[:, :, perm])


@pytest.mark.parametrize("layers", [1, 2, 4])
def test_clone_forward_is_identical(layers, rng):
    shared = init_shared(BackboneConfig(12, 5, layers=layers, hidden=7), 1)
    ind = clone_to_individual(shared, 3)
    x = rng.normal(size=(9, 12, 3)).astype(np.float32)
    assert np.abs(bb.predict(ind, x) - bb.predict(shared, x)).max() == 0


def test_clone_channels_are_independent():
    shared = init_shared(BackboneConfig(4, 2), 1)
    ind = clone_to_individual(shared, 7)
    before = {k: v.copy() for k, v in ind.params.items()}
    ind.params["w0"][2] += 1.0
    for k in ind.params:
        np.testing.assert_array_equal(np.delete(ind.params[k], 2, 0), np.delete(before[k], 2, 0))
    np.testing.assert_array_equal(shared.params["w0"][0], before["w0"][0])


def test_individual_matches_per_channel_loop(rng):
    cfg = BackboneConfig(10, 3, layers=3, hidden=4)
    ind = clone_to_individual(init_shared(cfg, 0, np.float64), 3)
    for p in ind.params.values():
        p += rng.normal(scale=0.1, size=p.shape)
    x = rng.normal(size=(6, 10, 3))
    y = bb.predict(ind, x)
    for c in range(3):
        z = x[:, :, c]
        for k in range(3):
            z = z @ ind.params[f"w{k}"][c] + ind.params[f"b{k}"][c]
            if k < 2:
                z = np.maximum(z, 0)
        np.testing.assert_allclose(y[:, :, c], z, atol=1e-12)


def test_zero_output_gradient_gives_zero_grads(rng):
    bank = clone_to_individual(init_shared(BackboneConfig(8, 4, layers=2, hidden=5), 0), 3)
    for g in bank.grads.values():
        g.fill(7.0)
    _, cache = bb.forward(bank, rng.normal(size=(4, 8, 3)).astype(np.float32))
    bb.backward(bank, cache, np.zeros((4, 4, 3), np.float32))
    assert all(not g.any() for g in bank.grads.values())


def test_individual_gradient_locality(rng):
    bank = clone_to_individual(init_shared(BackboneConfig(8, 4, layers=2, hidden=5), 0, np.float64), 3)
    _, cache = bb.forward(bank, rng.normal(size=(4, 8, 3)))
    G = np.zeros((4, 4, 3))
    G[:, :, 2] = rng.normal(size=(4, 4))
    bb.backward(bank, cache, G)
    for g in bank.grads.values():
        assert not g[:2].any()
        assert g[2].any()


def test_gradients_match_finite_differences():
    results = {r.name: r.max_rel_error for r in run_gradchecks()}
    for name, err in results.items():
        if name.startswith("backbone/"):
            assert err < 1e-5, name


def test_stale_cache_is_rejected(rng):
    bank = init_shared(BackboneConfig(4, 2), 0)
    _, cache = bb.forward(bank, rng.normal(size=(2, 4, 1)).astype(np.float32))
    bank.restore(bank.snapshot())
    with pytest.raises(StaleCacheError):
        bb.backward(bank, cache, np.ones((2, 2, 1), np.float32))


def test_input_validation(rng):
    bank = clone_to_individual(init_shared(BackboneConfig(4, 2), 0), 3)
    with pytest.raises(ValueError):
        bb.predict(bank, np.zeros((2, 5, 3), np.float32))
    with pytest.raises(ValueError):
        bb.predict(bank, np.zeros((2, 4, 2), np.float32))
    with pytest.raises(ValueError):
        BackboneConfig(4, 2, layers=0)
    with pytest.raises(ValueError):
        BackboneConfig(4, 2, activation="tanh")


def test_dropout_determinism_and_expectation(rng):
    cfg = BackboneConfig(6, 3, layers=2, hidden=8, dropout=0.3)
    bank = init_shared(cfg, 0, np.float64)
    x = rng.normal(size=(2, 6, 2))
    a = bb.forward(bank, x, True, 11)[0]
    b = bb.forward(bank, x, True, 11)[0]
    np.testing.assert_array_equal(a, b)
    ev = bb.predict(bank, x)
    assert not np.array_equal(a, ev)
    np.testing.assert_array_equal(bb.forward(bank, x, False, 11)[0], ev)
    g = np.random.default_rng(5)
    mean = np.mean([bb.forward(bank, x, True, g)[0] for _ in range(20000)], axis=0)
    np.testing.assert_allclose(mean, ev, atol=0.02)


def test_linear_bank_has_no_dropout(rng):
    bank = init_shared(BackboneConfig(6, 3, dropout=0.5), 0)
    x = rng.normal(size=(2, 6, 2)).astype(np.float32)
    np.testing.assert_array_equal(bb.forward(bank, x, True, 1)[0], bb.predict(bank, x))


def test_joint_matrix_shared_two_channels(rng):
    bank = init_shared(BackboneConfig(5, 3), 0, np.float64)
    W, b = export_joint_matrix(bank, 2)
    assert W.shape == (6, 10)
    np.testing.assert_array_equal(W[:3, :5], W[3:, 5:])
    assert not W[:3, 5:].any() and not W[3:, :5].any()
    x = rng.normal(size=(4, 5, 2))
    y = bb.predict(bank, x)
    np.testing.assert_allclose(channel_major(x) @ W.T + b, channel_major(y), atol=1e-12)


def test_joint_matrix_requires_linear():
    with pytest.raises(NotImplementedError):
        export_joint_matrix(init_shared(BackboneConfig(5, 3, layers=2, hidden=4)), 2)
    with pytest.raises(ValueError):
        export_joint_matrix(init_shared(BackboneConfig(5, 3)))
