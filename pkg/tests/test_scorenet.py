import numpy as np
import pytest

from hmimoscore.channel import build_geometry, isotropic_covariance, synthesize_dataset, truncated_covariance
from hmimoscore.estimators import gaussian_score
from hmimoscore.numerics import RngStream
from hmimoscore.scorenet import (
    PARAM_NAMES,
    ScoreNetError,
    ScoreNetwork,
    TrainConfig,
    TrainingDiverged,
    dae_loss,
    forward,
    load_model,
    save_model,
    score,
    train,
)


def rel(a, b):
    return np.linalg.norm(a - b) / np.linalg.norm(b)


def small_net(dim=6, width=5, seed=0, skip=True):
    rng = np.random.default_rng(seed)
    net = ScoreNetwork.init(dim, width, rng, scale=1.3, dtype=np.float64, identity_skip=skip)
    # Perturb every parameter so each code path carries gradient.
    for k in PARAM_NAMES:
        net.params[k] = net.params[k] + 0.3 * rng.standard_normal(net.params[k].shape)
    return net


def finite_difference(net, y, u, sigma, name, index, eps=1e-6):
    p = net.params[name]
    old = p[index]
    p[index] = old + eps
    plus, _ = dae_loss(net, y, u, sigma)
    p[index] = old - eps
    minus, _ = dae_loss(net, y, u, sigma)
    p[index] = old
    return (plus - minus) / (2 * eps)


class TestForward:
    def test_zero_readout_without_skip_is_zero(self):
        net = ScoreNetwork.init(8, 4, np.random.default_rng(0), identity_skip=False)
        net.params["D"][:] = 0
        out = forward(net, np.random.default_rng(1).standard_normal((3, 8)), 0.2)
        np.testing.assert_array_equal(out, 0)

    def test_deterministic(self):
        net = small_net()
        y = np.random.default_rng(2).standard_normal(6)
        np.testing.assert_array_equal(forward(net, y, 0.1), forward(net, y, 0.1))

    def test_single_and_batch_agree(self):
        net = small_net()
        y = np.random.default_rng(3).standard_normal((4, 6))
        np.testing.assert_allclose(forward(net, y[1], 0.05), forward(net, y, 0.05)[1])

    def test_score_is_sigma_zero(self):
        net = small_net()
        y = np.random.default_rng(4).standard_normal(6)
        np.testing.assert_array_equal(score(net, y), forward(net, y, 0.0))

    def test_non_finite_params(self):
        net = small_net()
        net.params["b2"][0] = np.nan
        with pytest.raises(ScoreNetError, match="non-finite"):
            forward(net, np.zeros(6), 0.0)

    def test_negative_sigma(self):
        with pytest.raises(ScoreNetError):
            forward(small_net(), np.zeros(6), -0.1)


class TestDaeLoss:
    def test_zero_network_loss_is_norm(self):
        net = ScoreNetwork.init(8, 4, np.random.default_rng(0), dtype=np.float64, identity_skip=False)
        net.params["D"][:] = 0
        u = np.random.default_rng(1).standard_normal((20, 8))
        loss, _ = dae_loss(net, np.zeros((20, 8)), u, 0.3)
        assert loss == pytest.approx(np.mean(np.sum(u**2, axis=1)))

    def test_perfect_output_gives_zero(self):
        # With the skip and a unit gain, S = -y/s^2; at y_clean = 0 and
        # s^2 = sigma^2 the output is exactly -u/sigma.
        sigma = 0.5
        net = ScoreNetwork.init(4, 3, np.random.default_rng(0), scale=sigma, dtype=np.float64)
        net.params["D"][:] = 0
        net.params["E"][-1] = 0
        u = np.random.default_rng(1).standard_normal((5, 4))
        loss, _ = dae_loss(net, np.zeros((5, 4)), u, sigma)
        assert loss == pytest.approx(0.0, abs=1e-20)

    def test_sigma_zero_rejected(self):
        with pytest.raises(ScoreNetError):
            dae_loss(small_net(), np.zeros(6), np.ones(6), 0.0)

    @pytest.mark.parametrize("skip", [True, False])
    def test_gradient_matches_finite_differences(self, skip):
        net = small_net(skip=skip)
        rng = np.random.default_rng(5)
        y = rng.standard_normal((7, 6))
        u = rng.standard_normal((7, 6))
        sigma = np.abs(rng.standard_normal(7)) * 0.2 + 0.05
        _, grads = dae_loss(net, y, u, sigma)
        for name in PARAM_NAMES:
            for index in np.ndindex(net.params[name].shape):
                num = finite_difference(net, y, u, sigma, name, index)
                ana = grads[name][index]
                assert abs(ana - num) <= 1e-6 * max(abs(num), 1.0), (name, index)


class TestTrainConfig:
    def test_schedule_endpoints(self):
        cfg = TrainConfig()
        assert cfg.xi(1) == pytest.approx(0.09901)
        assert cfg.xi(100) == pytest.approx(0.001)
        inc = TrainConfig(schedule="increasing")
        assert inc.xi(1) < inc.xi(100) == pytest.approx(0.1)

    def test_lr_halves_every_25(self):
        cfg = TrainConfig()
        assert [cfg.lr(q) for q in (1, 25, 26, 51, 100)] == [1e-3, 1e-3, 5e-4, 2.5e-4, 1.25e-4]

    def test_reference_hyperparameters_accepted(self):
        cfg = TrainConfig(learning_rate=0.001, sigma_min=0.001, sigma_max=0.1, epochs=100)
        assert cfg.epochs == 100

    @pytest.mark.parametrize(
        "kw", [{"sigma_min": 0.2}, {"schedule": "sideways"}, {"optimizer": "lbfgs"}, {"holdout_fraction": 1.0}]
    )
    def test_invalid(self, kw):
        with pytest.raises(ScoreNetError):
            TrainConfig(**kw)


class TestTraining:
    def test_scalar_gaussian_prior(self):
        # h ~ N(0, 1), unit noise: y ~ N(0, 2) with score -y/2.
        y = RngStream(3).generator().standard_normal((5000, 1)) * np.sqrt(2)
        net, _ = train(y, TrainConfig(width=32))
        grid = np.linspace(-3, 3, 61)[:, None]
        assert np.abs(score(net, grid) + grid / 2).max() < 0.1

    def test_pure_noise_prior(self):
        tau = 0.5
        y = RngStream(4).generator().standard_normal((3000, 32)) * np.sqrt(tau)
        net, trace = train(y, TrainConfig(width=64, epochs=40, shrinkage=(1.0,)))
        test = RngStream(5).generator().standard_normal((200, 32)) * np.sqrt(tau)
        assert rel(score(net, test), -test / tau) < 0.15
        assert len(trace.records) == 40

    def test_exact_gaussian_score_and_annealing(self):
        # Low-rank truncated prior at N=16, 10 dB.
        cov = truncated_covariance(isotropic_covariance(build_geometry(16, 0.25)))
        tau = 0.1
        data = synthesize_dataset(cov, tau, 5000, RngStream(6))
        test = synthesize_dataset(cov, tau, 500, RngStream(7)).y
        exact = gaussian_score(cov.real, tau)(test)
        errors = {}

        def watch(c, epoch, net):
            if epoch in (25, 100):
                errors[(c, epoch)] = rel(score(net, test), exact)

        net, trace = train(data.y, TrainConfig(), callback=watch)
        assert rel(score(net, test), exact) < 0.10
        c = trace.selected_shrinkage
        assert errors[(c, 100)] < errors[(c, 25)]
        val = np.array([r["val_loss"] for r in trace.records])
        assert val[-10:].mean() < val[:10].mean()
        assert len(trace.candidates) == 3

    def test_reproducible(self):
        y = RngStream(8).generator().standard_normal((300, 8))
        cfg = TrainConfig(width=8, epochs=3, shrinkage=(1.0,))
        a, _ = train(y, cfg)
        b, _ = train(y, cfg)
        np.testing.assert_array_equal(a.flat(), b.flat())

    def test_divergence_aborts_with_trace(self):
        y = RngStream(9).generator().standard_normal((256, 4))
        cfg = TrainConfig(width=4, epochs=5, shrinkage=(1.0,))

        def poison(c, epoch, net):
            net.params["D"][0, 0] = np.inf

        with pytest.raises(TrainingDiverged) as info:
            train(y, cfg, callback=poison)
        records = info.value.trace.records
        assert len(records) == 2
        assert not np.isfinite(records[-1]["loss"])

    def test_rejects_empty(self):
        with pytest.raises(ScoreNetError):
            train(np.zeros((0, 4)))


class TestModelFile:
    def test_round_trip(self, tmp_path):
        net = small_net().astype(np.float32)
        save_model(net, tmp_path / "m.model", {"epochs": 3})
        back, header = load_model(tmp_path / "m.model")
        np.testing.assert_array_equal(back.flat(), net.flat())
        assert header["widths"] == [7, 5, 5, 6]
        assert header["train_config"] == {"epochs": 3}

    def test_trace_file(self, tmp_path):
        y = RngStream(1).generator().standard_normal((100, 4))
        _, trace = train(y, TrainConfig(width=4, epochs=2, shrinkage=(1.0,)))
        trace.save(tmp_path / "t.json")
        assert "records" in (tmp_path / "t.json").read_text()

    def test_bad_file(self, tmp_path):
        (tmp_path / "bad.model").write_bytes(b"nonsense")
        with pytest.raises(ScoreNetError):
            load_model(tmp_path / "bad.model")
