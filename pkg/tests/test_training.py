import json
import math

import numpy as np
import pytest

from mrssm import diffmath as dm
from mrssm import training
from mrssm.distributions import DiagGaussian
from mrssm.model import MRSSM, ModelConfig
from mrssm.selftest import check_fullset_equivalence, check_gradients, miniature_batch, miniature_config
from mrssm.simulator import SimConfig, gen_dataset
from mrssm.training import (TrainingConfig, TrainingDivergedError, draw_noise, elbo_mvae, elbo_new,
                            fullset_posteriors, sample_subsets, schedule_loss, sequence_elbo, train_run)

HALF_LOG_2PI = 0.5 * math.log(2 * math.pi)


def one(mean, std=1.0):
    return DiagGaussian(np.array([[mean]]), np.array([[std]]))


def test_sample_subsets_examples():
    rng = np.random.default_rng(0)
    s = sample_subsets(["vel", "gyro", "img"], 0, rng)
    assert list(s) == [frozenset({"vel", "gyro", "img"}), frozenset({"vel"}), frozenset({"gyro"}),
                       frozenset({"img"})]
    assert list(sample_subsets(["m"], 0, rng)) == [frozenset({"m"}), frozenset({"m"})]


def test_sample_subsets_draws():
    rng = np.random.default_rng(1)
    mods = ["a", "b", "c", "d"]
    for _ in range(1000):
        s = sample_subsets(mods, 2, rng)
        assert s.full == frozenset(mods)
        assert len(s) == 1 + 4 + 2
        for sub in s:
            assert sub <= s.full
        for sub in list(s)[5:]:
            assert 0 < len(sub) < 4


def test_sample_subsets_errors():
    with pytest.raises(ValueError):
        sample_subsets([], 0, np.random.default_rng(0))
    with pytest.raises(ValueError):
        sample_subsets(["m"], 1, np.random.default_rng(0))


def test_mvae_hand_case():
    # decoded mean equals the observation, posterior N(0.5, 1), prior N(0, 1)
    for beta in (0.0, 1.0, 2.5):
        loss, _ = sequence_elbo([{"m": one(0.3)}], [{"m": np.array([[0.3]])}], {"m": 1.0},
                                [one(0.5)], [one(0.0)], beta)
        assert float(loss.data) == pytest.approx(0.91894 + beta * 0.125, abs=1e-5)


def test_perfect_reconstruction_without_kl():
    d = 5
    g = DiagGaussian(np.zeros((1, d)), np.ones((1, d)))
    loss, _ = sequence_elbo([{"m": g}], [{"m": np.zeros((1, d))}], {"m": 1.0}, [g], [g], 0.0)
    assert float(loss.data) == pytest.approx(d * HALF_LOG_2PI, rel=1e-6)


def test_new_elbo_hand_case_empty_subset():
    # empty subset: s is the prior sample (mean 0 at zero noise) and decodes to 0.2; observation 0.3
    loss, _ = sequence_elbo([{"m": one(0.2)}], [{"m": np.array([[0.3]])}], {"m": 1.0},
                            [one(0.5)], [one(0.0)], 1.0)
    assert float(loss.data) == pytest.approx(HALF_LOG_2PI + 0.5 * 0.1**2 + 0.125, abs=1e-6)


@pytest.fixture
def mini():
    cfg = miniature_config()
    rng = np.random.default_rng(2)
    model = MRSSM(cfg, rng=rng)
    batch = miniature_batch(cfg, 3, 2, rng)
    noise = draw_noise(rng, 3, 2, cfg.stoch_dim)
    return cfg, model, batch, noise


def test_fullset_equivalence():
    assert check_fullset_equivalence().passed


def test_new_elbo_empty_subset_runs_and_reconstructs_everything(mini, monkeypatch):
    cfg, model, batch, noise = mini
    cache = fullset_posteriors(model, batch, noise)
    seen = []
    orig = MRSSM.decode

    def spy(self, spec, h, s):
        seen.append(spec.name)
        return orig(self, spec, h, s)

    monkeypatch.setattr(MRSSM, "decode", spy)
    for subset in ([], ["vel"], ["cam"], cfg.names):
        seen.clear()
        loss = elbo_new(model, batch, subset, cache, noise)
        assert np.isfinite(loss.data)
        assert sorted(set(seen)) == sorted(cfg.names)
    seen.clear()
    elbo_mvae(model, batch, ["vel"], noise)
    assert set(seen) == {"vel"}


def test_new_elbo_requires_cache(mini):
    cfg, model, batch, noise = mini
    with pytest.raises(ValueError):
        elbo_new(model, batch, ["vel"], None, noise)


@pytest.mark.parametrize("variant", ["mvae", "new"])
def test_stacked_loss_matches_literal_objectives(mini, variant):
    cfg, model, batch, noise = mini
    schedule = sample_subsets(cfg.names, 1, np.random.default_rng(3))
    with dm.precision(np.float64):
        m64 = model.astype(np.float64)
        fused, _ = schedule_loss(m64, batch, schedule, noise, 0.7, variant)
        if variant == "mvae":
            ref = sum(float(elbo_mvae(m64, batch, s, noise, 0.7).data) for s in schedule)
        else:
            cache = fullset_posteriors(m64, batch, noise)
            ref = sum(float(elbo_new(m64, batch, s, cache, noise, 0.7).data) for s in schedule)
    assert float(fused.data) == pytest.approx(ref, rel=1e-10)


def test_kl_terms_nonnegative(mini):
    cfg, model, batch, noise = mini
    cache = fullset_posteriors(model, batch, noise)
    states = training.rollout(model, batch, ["cam"], noise)
    from mrssm.distributions import kl
    for t, st in enumerate(states):
        assert np.all(kl(cache[t], st.prior).data >= 0)
        assert np.all(kl(st.posterior, st.prior).data >= 0)


def test_elbo_new_gradient_on_random_parameters():
    cfg = miniature_config()
    rng = np.random.default_rng(4)
    model = MRSSM(cfg, rng=rng)
    batch = miniature_batch(cfg, 3, 2, rng)
    noise = draw_noise(rng, 3, 2, cfg.stoch_dim).astype(np.float64)
    names = sorted(model.params)
    picks = [(names[i], int(rng.integers(model.params[names[i]].data.size)))
             for i in rng.choice(len(names), 20)]

    def loss(p):
        m = MRSSM(cfg, p)
        cache = fullset_posteriors(m, batch, noise)
        return elbo_new(m, batch, ["vel"], cache, noise)

    point = {k: v.data.astype(np.float64) for k, v in model.params.items()}
    with dm.precision(np.float64):
        params = {k: dm.Tensor(v, requires_grad=True) for k, v in point.items()}
        with dm.Tape() as tape:
            out = loss(params)
        grads = tape.gradient(out, params)
        step = 1e-5
        for name, idx in picks:
            flat = params[name].data.reshape(-1)
            orig = flat[idx]
            flat[idx] = orig + step
            fp = float(loss(params).data)
            flat[idx] = orig - step
            fm = float(loss(params).data)
            flat[idx] = orig
            num = (fp - fm) / (2 * step)
            ana = grads[name].reshape(-1)[idx]
            assert abs(ana - num) / max(1e-8, abs(ana) + abs(num)) < 1e-3, name


def test_every_parameter_group_gradient():
    assert check_gradients(coords=4).passed


def test_loss_finite_on_random_batches():
    cfg = miniature_config()
    rng = np.random.default_rng(5)
    model = MRSSM(cfg, rng=rng)
    for i in range(100):
        batch = miniature_batch(cfg, 2, 2, rng)
        noise = draw_noise(rng, 2, 2, cfg.stoch_dim)
        sched = sample_subsets(cfg.names, 1, rng)
        loss, _ = schedule_loss(model, batch, sched, noise, 1.0, "new" if i % 2 else "mvae")
        assert np.isfinite(loss.data)


def test_training_config_validation():
    with pytest.raises(ValueError):
        TrainingConfig(beta=-1)
    with pytest.raises(ValueError):
        TrainingConfig(sequence_length=1)
    with pytest.raises(ValueError):
        TrainingConfig(subsets_per_batch=0)
    with pytest.raises(ValueError):
        TrainingConfig(elbo_variant="iwae")
    with pytest.raises(ValueError):
        TrainingConfig(importance_ratio_mode="estimated")


@pytest.fixture(scope="module")
def tiny_data():
    sim = SimConfig(world_size=40.0, image_size=8)
    ds = gen_dataset(4, 30, 9, sim)
    cfg = ModelConfig(ds.modalities, deter_dim=8, stoch_dim=3, embed_dim=8, hidden_dim=8, image_channels=(2, 2, 4))
    return ds, cfg


def test_train_run_is_deterministic(tmp_path, tiny_data):
    ds, cfg = tiny_data
    tc = TrainingConfig(sequence_length=8, batch_size=3, epochs=2, seed=4)
    m1, h1 = train_run(ds, tc, cfg, metrics_path=tmp_path / "a.jsonl")
    m2, h2 = train_run(ds, tc, cfg, metrics_path=tmp_path / "b.jsonl")
    for k in m1.params:
        assert m1.params[k].data.tobytes() == m2.params[k].data.tobytes()
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    records = [json.loads(line) for line in (tmp_path / "a.jsonl").read_text().splitlines()]
    assert [r["epoch"] for r in records] == [1, 2]
    for key in ("loss", "kl", "recon_lin_vel", "recon_image"):
        assert key in records[0]


def test_concat_variant_skips_subset_sampling(tiny_data, monkeypatch):
    ds, cfg = tiny_data

    def boom(*a, **k):
        raise AssertionError("concat training must not sample subsets")

    monkeypatch.setattr(training, "sample_subsets", boom)
    model, hist = train_run(ds, TrainingConfig(sequence_length=8, batch_size=3, epochs=1,
                                               elbo_variant="concat"), cfg)
    assert model.config.fusion == "concat"
    assert any(k.startswith("concat.") for k in model.params)
    assert np.isfinite(hist[0]["loss"])


@pytest.mark.filterwarnings("ignore:invalid value")
def test_nan_loss_aborts_with_diagnostic(tiny_data):
    ds, cfg = tiny_data
    bad = ds.trajectories[0].observations["lin_vel"]
    bad[:] = np.nan
    try:
        with pytest.raises(TrainingDivergedError, match="non-finite"):
            train_run(ds, TrainingConfig(sequence_length=8, batch_size=4, epochs=1), cfg)
    finally:
        bad[:] = 0.0


def test_empty_dataset_rejected(tiny_data):
    ds, cfg = tiny_data
    from mrssm.simulator import Dataset
    with pytest.raises(ValueError):
        train_run(Dataset([], ds.modalities), TrainingConfig(), cfg)


def test_cosine_learning_rate_schedule():
    from mrssm.training import lr_at
    cfg = TrainingConfig(learning_rate=1e-2, final_lr_ratio=0.1)
    assert lr_at(cfg, 0.0) == pytest.approx(1e-2)
    assert lr_at(cfg, 0.5) == pytest.approx(0.55e-2)
    assert lr_at(cfg, 1.0) == pytest.approx(1e-3)
    values = [lr_at(cfg, p) for p in np.linspace(0, 1, 50)]
    assert all(b <= a for a, b in zip(values, values[1:]))
    assert lr_at(TrainingConfig(learning_rate=3e-3, final_lr_ratio=1.0), 0.7) == 3e-3
    with pytest.raises(ValueError):
        TrainingConfig(final_lr_ratio=0.0)
