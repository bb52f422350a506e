import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kia.autodiff import DimensionError, Tensor
from kia.data import TrajectoryDataset, generate_synthetic_sst
from kia.errors import ConfigurationError
from kia.evaluation import (
    Climatology,
    ForecastReport,
    Persistence,
    celsius_mae,
    climatology_forecast,
    evaluate_horizon,
    evaluate_k_day,
    evenly_spaced_anchors,
    persistence_forecast,
    relative_error,
    rollout,
)
from kia.models import Dense, DenseStack, KiaModel, ModelSpec, koopman_power


def small_model(variant="KIA", seed=0, m=6):
    return KiaModel.build(ModelSpec(variant=variant, input_dim=m, latent_dim=4, encoder_hidden=(5,),
                                    decoder_hidden=(5,), depth=2, seed=seed))


def identity_model(m=4):
    model = small_model(m=m)
    eye = lambda: DenseStack([Dense(Tensor(np.eye(m)), Tensor(np.zeros(m)), activation=False)])
    model.encoder, model.decoder = eye(), eye()
    for p in model.koopman.parameters():
        p.data[...] = 0.0
    return model


# -- rollout ----------------------------------------------------------------


def test_rollout_prefix_consistent():
    model = small_model()
    x0 = np.random.default_rng(0).standard_normal(6)
    long = rollout(model, x0, 12)
    short = rollout(model, x0, 11)
    assert long.shape == (12, 6)
    assert np.array_equal(long[:11], short)


def test_identity_rollout_is_constant():
    x0 = np.array([1.0, -2.0, 0.5, 3.0])
    out = rollout(identity_model(), x0, 5)
    assert np.array_equal(out, np.tile(x0, (5, 1)))


@pytest.mark.parametrize("variant", ["KIA", "KAE", "CKAE"])
def test_rollout_matches_koopman_power(variant):
    model = small_model(variant, seed=2)
    x0 = np.random.default_rng(1).standard_normal((3, 6))
    inc = rollout(model, x0, 7)
    z = model.encode(x0)
    for l in range(1, 8):
        direct = model.decode(koopman_power(model, z, l)).data
        assert np.array_equal(direct, inc[l - 1])


def test_rollout_batch_matches_single():
    model = small_model()
    X = np.random.default_rng(3).standard_normal((4, 6))
    batch = rollout(model, X, 6)
    for i in range(4):
        assert np.allclose(batch[:, i], rollout(model, X[i], 6), rtol=0, atol=1e-12)


# -- metrics ----------------------------------------------------------------


def test_relative_error_examples():
    assert relative_error([1.0, 2.0], [1.0, 2.0]) == 0.0
    assert relative_error([0.0, 0.0], [3.0, 4.0]) == 1.0
    assert relative_error([1.0, 1.0], [1.0, 0.0]) == 1.0


def test_relative_error_zero_target_flagged():
    assert np.isnan(relative_error([1.0, 0.0], [0.0, 0.0]))


def test_relative_error_shape_mismatch():
    with pytest.raises(DimensionError):
        relative_error([1.0, 2.0], [1.0])


def test_relative_error_scale_invariance():
    rng = np.random.default_rng(4)
    for _ in range(100):
        a, b = rng.standard_normal((2, 8))
        for c in (-2.0, 0.5, 10.0):
            assert abs(relative_error(c * a, c * b) - relative_error(a, b)) <= 1e-12


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.01, 100.0))
def test_relative_error_nonnegative_and_scale_free(seed, c):
    rng = np.random.default_rng(seed)
    a, b = rng.standard_normal((2, 5))
    e = relative_error(a, b)
    assert e >= 0
    assert abs(relative_error(c * a, c * b) - e) <= 1e-12 * max(1.0, e)


def test_celsius_mae_examples():
    g = np.random.default_rng(5).uniform(0, 30, (3, 4))
    assert celsius_mae(g.ravel(), g.ravel()) == 0.0
    assert celsius_mae((g + 0.5).ravel(), g.ravel()) == pytest.approx(0.5, abs=1e-12)
    with pytest.raises(DimensionError):
        celsius_mae(np.zeros(3), np.zeros(4))


def test_celsius_mae_brute_force():
    rng = np.random.default_rng(6)
    p, t = rng.normal(20, 3, (2, 2, 2))
    total = 0.0
    for i in range(2):
        for j in range(2):
            total += abs(p[i, j] - t[i, j])
    assert celsius_mae(p.ravel(), t.ravel()) == pytest.approx(total / 4, abs=1e-15)


# -- baselines --------------------------------------------------------------


def test_persistence_constant_series_zero_error():
    series = np.full((50, 3), 17.0)
    for K in (1, 7, 30):
        assert np.array_equal(persistence_forecast(series, 10, K), series[10 + K])


def test_persistence_ramp():
    s = 0.1
    series = 20.0 + s * np.arange(100)[:, None] * np.ones((1, 4))
    for K in (1, 7, 14, 21, 30):
        err = celsius_mae(persistence_forecast(series, 40, K), series[40 + K])
        assert err == pytest.approx(K * s, abs=1e-12)


def test_climatology_depends_on_target_day_only():
    rng = np.random.default_rng(7)
    clim = rng.normal(25, 2, (365, 2, 2))
    for target in (400, 731, 1000):
        ref = climatology_forecast(None, clim, target - 1, 1)
        for K in (7, 14, 30):
            assert np.array_equal(climatology_forecast(None, clim, target - K, K), ref)


def test_climatology_of_itself_is_exact():
    clim = np.random.default_rng(8).normal(25, 2, (365, 2, 2))
    series = np.concatenate([clim, clim]).reshape(730, -1)
    fc = Climatology(clim)
    anchors = np.arange(300, 400)
    pred = fc.forecast(series, anchors, 30)
    idx = anchors[None, :] + np.arange(1, 31)[:, None]
    assert np.abs(pred - series[idx]).max() == 0.0


def test_climatology_requires_field():
    with pytest.raises(ConfigurationError):
        Climatology(None)


def test_persistence_forecaster_broadcasts():
    series = np.arange(20.0).reshape(10, 2)
    out = Persistence().forecast(series, np.array([1, 4]), 3)
    assert out.shape == (3, 2, 2)
    assert np.array_equal(out[2], series[[1, 4]])


# -- reports ----------------------------------------------------------------


def test_anchor_spacing():
    a = evenly_spaced_anchors(100, 30)
    assert a[0] == 0 and a[-1] == 99 and len(a) == 30
    assert np.all(np.diff(a) > 0)


def test_horizon_needs_enough_test_points():
    ds = TrajectoryDataset(np.ones((100, 6)), 0.1, (40, 20, 40))
    with pytest.raises(ConfigurationError, match="at least 60"):
        evaluate_horizon(small_model(), ds, n_inits=30, horizon=30)


def test_report_aggregates_recomputable(tmp_path):
    rng = np.random.default_rng(9)
    ds = TrajectoryDataset(rng.standard_normal((300, 6)), 0.1, (50, 50, 200))
    rep = evaluate_horizon(small_model(), ds, n_inits=5, horizon=150)
    assert rep.errors.shape == (5, 150)
    agg = rep.aggregates()
    assert agg["all"]["mean"] == pytest.approx(rep.errors.mean(axis=1).mean(), abs=1e-15)
    assert agg["last100"]["std"] == pytest.approx(rep.errors[:, -100:].mean(axis=1).std(), abs=1e-15)
    rep.write(tmp_path / "r.csv", tmp_path / "r.json")
    back = ForecastReport.read(tmp_path / "r.csv", tmp_path / "r.json")
    assert np.array_equal(back.errors, rep.errors)
    assert back.aggregates() == agg
    summary = json.loads((tmp_path / "r.json").read_text())
    assert summary["anchors"] == [int(a) for a in rep.anchors]


def test_report_excludes_zero_targets():
    errors = np.array([[0.5, np.nan, 1.5], [1.0, 1.0, 1.0]])
    rep = ForecastReport(errors, np.array([0, 1]), "relative", excluded=1)
    assert rep.aggregates()["all"]["mean"] == pytest.approx(1.0)


def test_persistence_horizon_report_on_grid():
    s = generate_synthetic_sst(H=4, W=4, years=3, seed=0, weather_std=0.0, drift_per_year=0.0)
    rep = evaluate_horizon(Persistence(), s, n_inits=3, horizon=180, metric="celsius")
    assert rep.errors.shape == (3, 180)
    assert np.all(rep.errors[:, 0] < rep.errors[:, 60])


# -- K-day evaluation -------------------------------------------------------


def _sst():
    return generate_synthetic_sst(H=4, W=4, years=3, seed=1)


def test_k_day_brute_force():
    s = _sst()
    res = evaluate_k_day(Persistence(), s, leads=(1, 7))
    obs = s.observations
    for K in (1, 7):
        errs = [np.abs(obs[d - K] - obs[d]).mean() for d in range(730, 1095)]
        assert np.allclose(res.per_day[K], errs, rtol=0, atol=1e-15)
        assert res.means()[K] == pytest.approx(np.mean(errs), abs=1e-14)
        assert res.skipped[K] == 0


def test_k_day_skips_missing_history():
    s = _sst()
    res = evaluate_k_day(Persistence(), s, leads=(5,), test_days=np.arange(0, 10))
    assert res.skipped[5] == 5
    assert res.days[5].tolist() == [5, 6, 7, 8, 9]


def test_k_day_zero_is_reconstruction():
    s = generate_synthetic_sst(H=4, W=4, years=3, seed=2)
    model = KiaModel.build(ModelSpec(input_dim=16, latent_dim=4, encoder_hidden=(6,), decoder_hidden=(6,)))
    res = evaluate_k_day(model, s, leads=(0,))
    days = np.arange(730, 1095)
    recon = model.decode(model.encode(s.observations[days])).data
    assert np.allclose(res.per_day[0], np.abs(recon - s.observations[days]).mean(axis=1), rtol=0, atol=1e-12)


def test_k_day_climatology_constant_when_targets_coincide():
    s = _sst()
    res = evaluate_k_day(Climatology(s.climatology, s.start_doy), s)
    vals = list(res.means().values())
    assert max(vals) - min(vals) <= 1e-12


def test_k_day_rejects_negative_lead():
    with pytest.raises(ConfigurationError):
        evaluate_k_day(Persistence(), _sst(), leads=(-1,))
