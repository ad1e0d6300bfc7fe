import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from churnsurv.recurrent import (
    LossBatch,
    ModelFormatError,
    NetHyper,
    RecurrentSurvivalNet,
    TrainConfig,
    TrainingError,
    batch_expected_time,
    batch_loss,
    censored_nll,
    estimate_omega,
    forward,
    gradients,
    load_model,
    predict_rates,
    save_model,
    train,
    weighted_asymmetric_loss,
)
from churnsurv.survival import censored_exponential_mle
from churnsurv.transactions import CustomerSequence, serving_window

from factories import random_batch, random_case
from oracles import finite_difference_grads, max_relative_error, scalar_rate


def test_zero_weights_give_unit_rate(rng):
    net = RecurrentSurvivalNet.zeros(NetHyper())
    b = random_batch(rng, 10, 7)
    np.testing.assert_array_equal(net.rates(b.windows, b.masks), 1.0)


def test_initialisation_layout():
    net = RecurrentSurvivalNet.initialize(NetHyper(hidden=4), np.random.default_rng(0))
    assert net.params["lstm.Wx"].shape == (16, 1)
    assert net.params["lstm.Wh"].shape == (16, 4)
    np.testing.assert_array_equal(net.params["lstm.b"][4:8], 1.0)  # forget gate
    others = np.delete(net.params["lstm.b"], np.s_[4:8])
    assert np.all(np.abs(others) <= 0.1)


@pytest.mark.parametrize("seed", range(5))
def test_matches_scalar_reimplementation(seed):
    rng = np.random.default_rng(seed)
    net, batch, _, _ = random_case(rng)
    rates = net.rates(batch.windows, batch.masks)
    for r in range(len(batch)):
        expected = scalar_rate(net, batch.windows[r], batch.masks[r])
        assert rates[r] == pytest.approx(expected, rel=1e-10, abs=0)


def test_padded_positions_are_ignored(rng):
    net = RecurrentSurvivalNet.initialize(NetHyper(), rng, scale=0.5)
    b = random_batch(rng, 20, 7)
    noisy = b.windows + (1 - b.masks) * rng.exponential(30.0, b.windows.shape)
    np.testing.assert_array_equal(net.rates(b.windows, b.masks), net.rates(noisy, b.masks))


def test_left_padding_matches_a_shorter_window(rng):
    net7 = RecurrentSurvivalNet.initialize(NetHyper(seq_len=7), rng, scale=0.5)
    net3 = RecurrentSurvivalNet(NetHyper(seq_len=3), {k: v.copy() for k, v in net7.params.items()})
    seq = CustomerSequence("a", [3.0, 8.0, 2.0], [1, 1, 0])
    assert forward(net7, serving_window(seq, 7)) == forward(net3, serving_window(seq, 3))


def test_output_clamp(rng):
    net = RecurrentSurvivalNet.zeros(NetHyper())
    net.params["mlp.1.b"][:] = 50.0
    b = random_batch(rng, 4, 7)
    np.testing.assert_array_equal(net.rates(b.windows, b.masks), math.exp(6.0))
    _, grads = gradients(net, b)
    assert all(np.all(g == 0) for g in grads.values())


def test_shape_errors(rng):
    net = RecurrentSurvivalNet.zeros(NetHyper(seq_len=4))
    with pytest.raises(ValueError, match="shape"):
        net.rates(np.zeros((2, 5)), np.ones((2, 5)))


# -------------------------------------------------------------------- losses


def test_censored_nll_hand_values():
    lb = LossBatch([0.5, 0.1], [2.0, 10.0], [1, 0])
    # (0.5*2 - log 0.5 + 0.1*10) / 2
    assert censored_nll(lb) == pytest.approx((1 + math.log(2) + 1) / 2)
    with pytest.raises(ValueError):
        censored_nll(LossBatch([0.0], [1.0], [1]))


def test_weighted_asymmetric_hand_values():
    lb = LossBatch([0.5, 0.25, 0.1], [4.0, 2.0, 3.0], [1, 1, 0], weights=[0.8, 0.6, 0.3], e_of_t=12.0)
    # observed: (0.8*(2-4)^2 + 0.6*(4-2)^2)/2 ; censored: (0.7*(10-12)^2)/1
    expected = (0.8 * 4 + 0.6 * 4) / 2 + 0.7 * 4
    assert weighted_asymmetric_loss(lb) == pytest.approx(expected)


def test_weighted_asymmetric_empty_group_contributes_nothing():
    lb = LossBatch([0.5, 0.25], [4.0, 2.0], [1, 1], weights=[1.0, 1.0], e_of_t=99.0)
    assert weighted_asymmetric_loss(lb) == pytest.approx((4 + 4) / 2)
    with pytest.raises(ValueError):
        weighted_asymmetric_loss(LossBatch([0.5], [1.0], [1]))


def test_omega_bins_hand_example():
    t = [1, 2, 3, 4, 5, 6, 7, 8]
    d = [1, 1, 1, 0, 1, 0, 0, 0]
    np.testing.assert_allclose(estimate_omega(t, d, n_bins=2), [0.75] * 4 + [0.25] * 4)


def test_omega_ties_share_a_bin_and_small_bins_fall_back():
    t = [5, 5, 5, 5, 1]
    d = [1, 0, 1, 0, 1]
    w = estimate_omega(t, d, n_bins=5)
    assert len(set(w[:4])) == 1
    assert w[4] == pytest.approx(np.mean(d))  # singleton bin -> overall fraction


@given(st.lists(st.tuples(st.floats(0.1, 100), st.integers(0, 1)), min_size=1, max_size=40), st.integers(1, 10))
def test_omega_is_a_probability(rows, n_bins):
    t, d = zip(*rows)
    w = estimate_omega(t, d, n_bins)
    assert w.shape == (len(t),) and np.all((0 <= w) & (w <= 1))


def test_batch_expected_time_falls_back():
    assert batch_expected_time([2.0, 3.0], [0, 0], fallback=7.0) == 7.0
    assert batch_expected_time([2.0, 3.0, 5.0], [1, 1, 0], fallback=7.0) == pytest.approx(5.0)


# ----------------------------------------------------------------- gradients


@pytest.mark.parametrize("kind", ["censored_nll", "weighted_asymmetric"])
@pytest.mark.parametrize("seed", range(4))
def test_gradients_match_finite_differences(kind, seed):
    net, batch, omega, e = random_case(np.random.default_rng(100 + seed), kind)
    loss, grads = gradients(net, batch, kind, omega, e)
    numeric = finite_difference_grads(lambda: batch_loss(net, batch, kind, omega, e), net.params)
    assert max_relative_error(grads, numeric, loss) < 1e-4


def test_nll_scan_minimum_is_the_censored_mle(rng):
    b = random_batch(rng, 30, 3)
    lam = censored_exponential_mle(b.targets, b.observed).rate
    grid = lam * np.exp(np.linspace(-0.01, 0.01, 2001))
    values = [censored_nll(LossBatch(np.full(30, g), b.targets, b.observed)) for g in grid]
    assert abs(grid[int(np.argmin(values))] - lam) < 1e-6 * 30


# ------------------------------------------------------------------ training


def single_customer(rate, n, seed):
    g = np.random.default_rng(seed).exponential(1 / rate, n)
    return CustomerSequence("solo", g.tolist() + [2.0], [1] * n + [0])


def test_single_customer_rate_is_recovered():
    seq = single_customer(0.2, 600, seed=1)
    cfg = TrainConfig(epochs=30, learning_rate=0.05, batch_size=32, seed=0)
    result = train([seq], cfg)
    lam = predict_rates(result.net, [seq])["solo"].rate
    assert lam == pytest.approx(0.2, rel=0.25)


def test_training_is_deterministic_and_logged(tmp_path):
    seqs = [single_customer(0.1 + 0.02 * k, 30, seed=k) for k in range(5)]
    cfg = TrainConfig(epochs=3, seed=4)
    a, b = train(seqs, cfg), train(seqs, cfg)
    assert a.epoch_losses == b.epoch_losses
    a.write_log(tmp_path / "log.csv")
    lines = (tmp_path / "log.csv").read_text().splitlines()
    assert lines[0] == "epoch,loss" and len(lines) == 4


def test_training_with_the_asymmetric_loss_runs():
    seqs = [single_customer(0.1, 40, seed=k) for k in range(4)]
    result = train(seqs, TrainConfig(epochs=2, loss_kind="weighted_asymmetric", learning_rate=1e-4))
    assert all(math.isfinite(v) for v in result.epoch_losses)


def test_training_needs_two_entries():
    with pytest.raises(TrainingError, match="no trainable examples"):
        train([CustomerSequence("a", [3.0], [0])], TrainConfig(epochs=1))


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(loss_kind="mse")
    with pytest.raises(ValueError):
        TrainConfig(mlp_widths=(16, 2))
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0)


# --------------------------------------------------------------- persistence


def test_save_load_roundtrip(tmp_path, rng):
    net = RecurrentSurvivalNet.initialize(NetHyper(hidden=5, mlp_widths=(3, 1)), rng)
    save_model(net, tmp_path / "m.json")
    back = load_model(tmp_path / "m.json")
    assert back.hyper == net.hyper
    b = random_batch(rng, 6, 7)
    np.testing.assert_array_equal(back.rates(b.windows, b.masks), net.rates(b.windows, b.masks))


@pytest.mark.parametrize(
    "mutate, fragment",
    [
        (lambda d: d.update(format_version=99), "format_version"),
        (lambda d: d.pop("weights"), "missing field"),
        (lambda d: d["weights"].pop("lstm.Wh"), "missing weight"),
        (lambda d: d["weights"]["lstm.b"].update(shape=[3]), "shape"),
        (lambda d: d["hyperparams"].pop("hidden"), "hidden"),
    ],
)
def test_load_errors(tmp_path, rng, mutate, fragment):
    net = RecurrentSurvivalNet.initialize(NetHyper(hidden=2), rng)
    save_model(net, tmp_path / "m.json")
    doc = json.loads((tmp_path / "m.json").read_text())
    mutate(doc)
    (tmp_path / "m.json").write_text(json.dumps(doc))
    with pytest.raises(ModelFormatError, match=fragment):
        load_model(tmp_path / "m.json")


def test_load_rejects_garbage(tmp_path):
    (tmp_path / "m.json").write_text("{not json")
    with pytest.raises(ModelFormatError):
        load_model(tmp_path / "m.json")
