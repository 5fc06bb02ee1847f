import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from causalpsw import spectral
from causalpsw.datasets import GenSpec, generate
from causalpsw.learner import (
    Batch, ConfigInvalid, EmptyBatch, MissingTwins, MissingWeights, ModelParams, NonFiniteLoss,
    ShapeMismatch, TrainConfig, backward, cross_entropy, encode, final_accuracy, flat_grad, forward,
    init_params, load_checkpoint, loss_erm, loss_ps, loss_psw, make_twins, read_metrics,
    loss_and_grad, precompute_bands, save_checkpoint, total_loss, train, write_metrics, _bands,
)


def fd_gradient(p, fn, h=1e-5):
    base = p.flat()
    g = np.zeros_like(base)
    for k in range(len(base)):
        v = base.copy()
        v[k] += h
        p.set_flat(v)
        up = fn(p)
        v[k] -= 2 * h
        p.set_flat(v)
        down = fn(p)
        g[k] = (up - down) / (2 * h)
    p.set_flat(base)
    return g


def assert_grad_close(analytic, numeric):
    err = np.abs(analytic - numeric)
    tol = 1e-4 * np.maximum(np.abs(numeric), np.abs(analytic)) + 1e-6
    assert np.all(err <= tol), (err.max(), np.argmax(err / tol))


def random_setup(seed):
    rng = np.random.default_rng(seed)
    d_in = int(rng.integers(1, 6))
    hidden = tuple(int(h) for h in rng.integers(1, 5, size=int(rng.integers(1, 3))))
    m = int(rng.integers(2, 4))
    n = int(rng.integers(1, 7))
    p = init_params(d_in, hidden, m, rng, omega=float(rng.uniform(3, 12)))
    for a in p.weights + p.biases:
        a += rng.normal(0, 0.7, a.shape)
    batch = Batch(rng.normal(0, 1.5, (n, d_in)), rng.integers(0, m, n),
                  rng.uniform(1.0, 10.0, n), rng.normal(0, 1.5, (n, d_in)))
    return p, batch, rng


def test_zero_params_give_zero_logits():
    p = init_params(6, (3,), 2)
    for a in p.weights + p.biases:
        a[...] = 0
    np.testing.assert_array_equal(forward(p, np.random.default_rng(0).random((4, 6))), 0)


def test_single_pixel_scaling():
    p = ModelParams([np.array([[1.0]]), np.array([[0.5], [-0.5]])], [np.zeros(1), np.zeros(2)], omega=10)
    x = np.array([[0.2]])
    raw = np.array([[0.5, -0.5]]) * math.tanh(0.2)
    B = p.clamp
    np.testing.assert_allclose(forward(p, x), B * np.tanh(raw / B), rtol=1e-15)


def test_fixture_logits():
    # committed values from a hand-written matrix evaluation
    w1 = np.array([[0.1, -0.2, 0.3], [0.0, 0.5, -0.4]])
    w2 = np.array([[1.0, -1.0], [0.5, 2.0]])
    p = ModelParams([w1, w2], [np.array([0.1, -0.1]), np.array([0.0, 0.2])], omega=10)
    x = np.array([[1.0, 2.0, 3.0]])
    h = np.tanh(np.array([0.1 - 0.4 + 0.9 + 0.1, 1.0 - 1.2 - 0.1]))
    raw = np.array([h[0] - h[1], 0.5 * h[0] + 2 * h[1] + 0.2])
    B = (10 - math.log(2)) / 2
    np.testing.assert_allclose(forward(p, x)[0], B * np.tanh(raw / B), rtol=1e-14)
    np.testing.assert_allclose(forward(p, x)[0], [0.88478094, -0.08043332], atol=1e-8)


def test_shape_mismatch():
    p = init_params(4, (2,), 2)
    with pytest.raises(ShapeMismatch):
        forward(p, np.zeros((1, 5)))


def test_cross_entropy_examples():
    assert cross_entropy(np.zeros((1, 2)), np.array([1]))[0] == pytest.approx(math.log(2))
    assert cross_entropy(np.array([[50.0, -50.0]]), np.array([0]))[0] < 1e-20
    z = np.array([[1.0, 0.0], [0.0, 2.0]])
    hand = (math.log(1 + math.exp(-1)) + math.log(1 + math.exp(2))) / 2
    assert cross_entropy(z, np.array([0, 0])).mean() == pytest.approx(hand, rel=1e-14)


def test_loss_bounded_by_omega():
    p = init_params(3, (4,), 3, omega=5.0)
    p.weights[-1] *= 1e4
    x = np.random.default_rng(1).normal(size=(50, 3))
    ce = cross_entropy(forward(p, x), np.random.default_rng(2).integers(0, 3, 50))
    assert ce.max() <= 5.0 + 1e-12 and ce.min() >= 0


def test_uniform_logits_erm_is_ln_m():
    p = init_params(2, (2,), 2)
    for a in p.weights + p.biases:
        a[...] = 0
    assert loss_erm(p, Batch(np.ones((3, 2)), [0, 1, 1])) == pytest.approx(math.log(2), rel=1e-15)


def test_loss_psw_examples():
    p, batch, _ = random_setup(0)
    ones = Batch(batch.images, batch.labels, np.ones(len(batch.labels)))
    assert loss_psw(p, ones) == loss_erm(p, ones)
    single = Batch(batch.images[:1], batch.labels[:1], [2.0])
    assert loss_psw(p, single) == pytest.approx(2 * loss_erm(p, single), rel=1e-15)
    with pytest.raises(MissingWeights):
        loss_psw(p, Batch(batch.images, batch.labels))


def test_loss_ps_examples():
    p, batch, _ = random_setup(1)
    same = Batch(batch.images, batch.labels, twins=batch.images.copy())
    assert loss_ps(p, same) == pytest.approx(loss_erm(p, same), rel=1e-15)
    with pytest.raises(MissingTwins):
        loss_ps(p, Batch(batch.images, batch.labels))
    z = forward(p, batch.images)
    zt = forward(p, batch.twins)
    terms = np.concatenate([cross_entropy(z, batch.labels), cross_entropy(zt, batch.labels)])
    assert loss_ps(p, batch) == pytest.approx(terms.mean(), rel=1e-14)


def test_empty_batch():
    p = init_params(2, (2,), 2)
    with pytest.raises(EmptyBatch):
        loss_erm(p, Batch(np.zeros((0, 2)), []))


def test_total_loss_composition():
    p, batch, _ = random_setup(2)
    rep = total_loss(p, batch, 0.5, 0.25)
    assert abs(rep.total - (rep.base + 0.5 * rep.psw + 0.25 * rep.ps)) <= 1e-9
    assert total_loss(p, batch, 0, 0).total == rep.base
    with pytest.raises(ConfigInvalid):
        total_loss(p, batch, -1, 0)


@pytest.mark.parametrize("seed", range(24))
def test_gradients_match_finite_differences(seed):
    p, batch, rng = random_setup(seed)
    alpha, beta = rng.uniform(0, 2, 2)
    norm = bool(seed % 2)
    cases = [
        (0.0, 0.0, lambda q: total_loss(q, batch).base),
        (1.0, 0.0, lambda q: loss_psw(q, batch) if not norm else total_loss(q, batch, 1.0, 0, True).psw),
        (alpha, beta, lambda q: total_loss(q, batch, alpha, beta, norm).total),
    ]
    for a, b, fn in cases:
        gw, gb = backward(p, batch, a, b, norm)
        ga = flat_grad(gw, gb)
        if a == 1.0 and b == 0.0:
            # isolate the PSW term from the base term
            g0 = flat_grad(*backward(p, batch, 0, 0))
            ga = ga - g0
        assert_grad_close(ga, fd_gradient(p, fn))
    # the pairing term alone: d(beta L_ps)/dp = d(total)/dp - d(base)/dp at alpha = 0
    gps = flat_grad(*backward(p, batch, 0, 1.0)) - flat_grad(*backward(p, batch, 0, 0))
    assert_grad_close(gps, fd_gradient(p, lambda q: loss_ps(q, batch)))


@pytest.mark.parametrize("seed", range(6))
def test_single_pass_report_matches_total_loss(seed):
    p, batch, rng = random_setup(seed)
    a, b = rng.uniform(0, 2, 2)
    rep, _, _ = loss_and_grad(p, batch, a, b, bool(seed % 2))
    ref = total_loss(p, batch, a, b, bool(seed % 2))
    for k in ("base", "psw", "ps", "total"):
        assert getattr(rep, k) == pytest.approx(getattr(ref, k), rel=1e-12)


def test_freeze_head_keeps_pairing_term_off_head():
    p, batch, _ = random_setup(5)
    gw_f, gb_f = backward(p, batch, 0.0, 1.0, freeze_head=True)
    gw_0, gb_0 = backward(p, batch, 0.0, 0.0)
    np.testing.assert_allclose(gw_f[-1], gw_0[-1], atol=1e-15)
    np.testing.assert_allclose(gb_f[-1], gb_0[-1], atol=1e-15)
    gw_u, _ = backward(p, batch, 0.0, 1.0)
    assert not np.allclose(gw_f[0], gw_0[0]) and np.allclose(gw_f[0], gw_u[0])


def test_head_bias_gradient_zero_at_symmetric_point():
    p = init_params(3, (2,), 2)
    p.weights[-1][...] = 0
    p.biases[-1][...] = 0
    batch = Batch(np.random.default_rng(0).random((4, 3)), [0, 1, 0, 1], np.full(4, 2.0))
    _, gb = backward(p, batch, 1.0, 0.0)
    np.testing.assert_allclose(gb[-1], 0, atol=1e-15)


def test_weight_scales_sample_gradient_linearly():
    p, batch, _ = random_setup(7)
    def term(w0):
        w = batch.weights.copy()
        w[0] = w0
        b = Batch(batch.images, batch.labels, w)
        return flat_grad(*backward(p, b, 1.0, 0.0))
    g1, g2, g4 = term(1.0), term(2.0), term(4.0)
    np.testing.assert_allclose(g4 - g2, 2 * (g2 - g1), atol=1e-12)


def test_twins_from_bands_equal_mix_spectra():
    rng = np.random.default_rng(0)
    x = rng.random((6, 3, 12, 12)).astype(np.float32)
    low, _, keep = _bands(x, 3, "cross")
    partner = rng.integers(6, size=6)
    lam = rng.random(6)
    fast = make_twins(keep, low, partner, lam)
    for i in range(6):
        ref = spectral.mix_spectra(x[i], x[partner[i]], lam[i], 3)
        np.testing.assert_allclose(fast[i], ref, atol=1e-5)


def small_domains(seed=0, n=300):
    return generate(GenSpec([0.9, 0.7, 0.1], 0.25, seed, n, ["a", "b", "c"]))


def test_train_deterministic_and_logs():
    a, b, c = small_domains()
    cfg = TrainConfig(epochs=2, alpha=0.1, beta=0.1, seed=3, batch_size=64, lr=0.05)
    r1 = train(cfg, [a, b], [c])
    r2 = train(cfg, [a, b], [c])
    np.testing.assert_equal(r1.history, r2.history)
    np.testing.assert_array_equal(r1.params.flat(), r2.params.flat())
    assert {h["domain"] for h in r1.history} == {"a", "b", "c"}
    assert len(r1.propensity["pi"]) == len(a) + len(b)
    assert r1.propensity["pi"].min() >= cfg.floor - 1e-12


def test_precomputed_bands_reproduce_run():
    a, b, c = small_domains(n=120)
    cfg = TrainConfig(epochs=2, alpha=0.5, beta=0.5, seed=1, batch_size=50)
    r1 = train(cfg, [a, b], [c])
    r2 = train(cfg, [a, b], [c], bands=precompute_bands(cfg, [a, b]))
    np.testing.assert_equal(r1.history, r2.history)


def test_train_learns_unbiased_signal():
    (d,) = generate(GenSpec([0.5], 0.0, 1, 1500))
    r = train(TrainConfig(epochs=5, lr=0.02), [d])
    assert final_accuracy(r.history, d.name, "train") > 0.6


def test_train_rejects_bad_config():
    a, b, _ = small_domains(n=20)
    with pytest.raises(ConfigInvalid):
        train(TrainConfig(alpha=-1), [a])
    with pytest.raises(ConfigInvalid):
        train(TrainConfig(), [])


def test_non_finite_loss_aborts():
    a, _, _ = small_domains(n=50)
    with pytest.raises(NonFiniteLoss):
        train(TrainConfig(epochs=1, lr=float("inf")), [a])


def test_encode_is_hidden_layer():
    p = init_params(4, (3, 2), 2, np.random.default_rng(0))
    x = np.random.default_rng(1).random((5, 4))
    h = np.tanh(np.tanh(x @ p.weights[0].T + p.biases[0]) @ p.weights[1].T + p.biases[1])
    np.testing.assert_allclose(encode(p, x), h)


def test_checkpoint_and_metrics_roundtrip(tmp_path):
    p = init_params(5, (4, 3), 2, np.random.default_rng(0), omega=7.5)
    save_checkpoint(p, tmp_path / "m.ckpt")
    q = load_checkpoint(tmp_path / "m.ckpt")
    assert q.omega == 7.5
    np.testing.assert_array_equal(q.flat(), p.flat())
    hist = [dict(epoch=1, domain="+90%", split="train", accuracy=0.5, base=0.7, psw=0.9, ps=0.8, total=1.0),
            dict(epoch=1, domain="-90%", split="test", accuracy=0.25, base=1.2, psw=float("nan"),
                 ps=float("nan"), total=float("nan"))]
    write_metrics(hist, tmp_path / "metrics.csv")
    back = read_metrics(tmp_path / "metrics.csv")
    assert back[0] == hist[0]
    assert back[1]["accuracy"] == 0.25 and math.isnan(back[1]["psw"])
