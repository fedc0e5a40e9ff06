from __future__ import annotations

import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rdaegrid.attacks import CampaignConfig, CampaignContext, MaskSampler, build_campaign
from rdaegrid.data import fit_scaler, make_windows
from rdaegrid.detector import (BUCKET_EDGES, BUCKET_GAMMAS, DetectionReport, ThresholdTable, add_threshold,
                               alpha_curve, bucket_gamma, bucket_index, calibrate_thresholds, decide, detect,
                               draw_masks, evaluate_campaign, quantile_threshold, score, validation_scores)
from rdaegrid.estimation import NoiseModel, WlsEstimator
from rdaegrid.nn import AeModel


def projector_model(m=4, k=2, T=1):
    """Linear dense autoencoder that reproduces any vector supported on the first k attributes."""
    sizes = [m, k, m]
    model = AeModel("dense", sizes, T=T, hidden_dropout=0.0)
    for layer in model.layers:
        layer.activation = "linear"
    E = np.eye(m)[:k]
    model.params.update({"l0.W": E.copy(), "l0.b": np.zeros(k), "l1.W": E.T.copy(), "l1.b": np.zeros(m)})
    return model


# ------------------------------------------------------------------ buckets

@pytest.mark.parametrize("fraction,gamma", [(0.0, 0.0), (20 / 304, 0.05), (0.30, 0.20), (0.024999, 0.0),
                                            (0.025, 0.05), (0.075, 0.10), (0.125, 0.15), (0.175, 0.20),
                                            (1.0, 0.20), (0.1, 0.10)])
def test_bucket_mapping(fraction, gamma):
    assert bucket_gamma(fraction) == gamma


def test_negative_fraction_rejected():
    with pytest.raises(ValueError):
        bucket_index(-0.01)
    with pytest.raises(ValueError):
        bucket_index(float("nan"))


def test_bucket_mapping_is_total():
    f = np.random.default_rng(0).uniform(0, 1, 10_000)
    idx = bucket_index(f)
    assert idx.min() >= 0 and idx.max() < len(BUCKET_GAMMAS)
    lo = np.array(BUCKET_EDGES)[idx]
    hi = np.array(BUCKET_EDGES)[idx + 1]
    # exactly one half-open range holds every fraction
    assert np.all((lo <= f) & (f < hi))
    inside = (np.array(BUCKET_EDGES)[:-1, None] <= f) & (f < np.array(BUCKET_EDGES)[1:, None])
    assert np.all(inside.sum(axis=0) == 1)


# ------------------------------------------------------------------- scores

def test_perfect_reconstruction_scores_zero(rng):
    model = projector_model(T=1)
    W = np.zeros((5, 4, 1))
    W[:, :2] = rng.uniform(0, 1, (5, 2, 1))
    np.testing.assert_array_equal(score(model, W), 0.0)


def test_single_column_score_is_vector_mse(rng):
    model = AeModel("dense", [5, 3, 5], T=1, seed=1)
    z = rng.uniform(0, 1, (5, 1))
    assert score(model, z, dtype=np.float64) == pytest.approx(np.mean((model.reconstruct(z) - z) ** 2), rel=1e-14)


def test_repeated_columns_average_to_single_score(rng):
    model = AeModel("dense", [5, 3, 5], T=6, seed=1)
    z = rng.uniform(0, 1, (5, 1))
    one = AeModel("dense", [5, 3, 5], T=1, params=model.params)
    assert score(model, np.repeat(z, 6, axis=1)) == pytest.approx(score(one, z), rel=1e-6)


def test_masked_entries_are_excluded(rng):
    model = projector_model(T=2)
    W = np.zeros((4, 2))
    W[:2] = rng.uniform(0, 1, (2, 2))
    W[3, -1] = 0.8  # outside the model's range, so it counts when available
    d = np.array([False, False, False, True])
    assert score(model, W) == pytest.approx(0.64 / 4 / 2)
    assert score(model, W, d) == 0.0


def test_available_entries_renormalised(rng):
    model = AeModel("dense", [6, 3, 6], T=2, seed=3)
    W = rng.uniform(0, 1, (6, 2))
    d = np.array([True, False, True, False, False, False])
    X = W.copy()
    X[d, -1] = 0.0
    err = (model.reconstruct(X) - W) ** 2
    expected = (err[:, 0].mean() + err[~d, 1].mean()) / 2
    assert score(model, W, d, dtype=np.float64) == pytest.approx(expected, rel=1e-14)


def test_single_precision_scores_track_double(rng):
    model = AeModel("lstm", [6, 4, 4, 6], T=5, seed=2)
    W = rng.uniform(0, 1, (50, 6, 5))
    d = rng.random((50, 6)) < 0.2
    np.testing.assert_allclose(score(model, W, d), score(model, W, d, dtype=np.float64), rtol=1e-4)


def test_fully_masked_column_rejected():
    with pytest.raises(ValueError):
        score(projector_model(), np.zeros((4, 1)), np.ones(4, dtype=bool))


def test_short_windows_rejected():
    with pytest.raises(ValueError):
        score(AeModel("dense", [4, 2, 4], T=3), np.zeros((4, 2)))


def test_tail_scored_for_shorter_models(rng):
    model = AeModel("dense", [4, 2, 4], T=1, seed=0)
    W = rng.uniform(0, 1, (3, 4, 6))
    np.testing.assert_array_equal(score(model, W), score(model, W[:, :, -1:]))


def test_draw_masks_counts(rng, obs14):
    d = draw_masks(34, 100, 0.2, rng)
    assert np.all(d.sum(axis=1) == 6)
    d = draw_masks(34, 20, 0.1, rng, MaskSampler(obs14))
    assert np.all(d.sum(axis=1) == 3)


# --------------------------------------------------------------- thresholds

def test_alpha_one_threshold_is_max():
    s = np.random.default_rng(0).exponential(size=500)
    tau = quantile_threshold(s, 1.0)
    assert tau == s.max()
    # ties alarm, so the validation maximum itself is flagged
    assert np.mean(s >= tau) == 1 / 500


@pytest.mark.parametrize("alpha", [0.0, -0.1, 1.01])
def test_alpha_out_of_range(alpha):
    with pytest.raises(ValueError):
        quantile_threshold(np.ones(3), alpha)


def test_empty_validation_set():
    with pytest.raises(ValueError):
        quantile_threshold(np.zeros(0), 0.95)
    with pytest.raises(ValueError):
        calibrate_thresholds(AeModel("dense", [4, 2, 4], T=1), np.zeros((0, 4, 1)))


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2 ** 31), a=st.floats(0.01, 1.0), b=st.floats(0.01, 1.0))
def test_threshold_monotone_in_alpha(seed, a, b):
    s = np.random.default_rng(seed).gamma(2.0, size=200)
    lo, hi = sorted((a, b))
    assert quantile_threshold(s, hi) >= quantile_threshold(s, lo)


@settings(max_examples=100, deadline=None)
@given(s1=st.floats(0, 10), s2=st.floats(0, 10), tau=st.floats(0, 10), f=st.floats(0, 1))
def test_decision_monotone_in_score(s1, s2, tau, f):
    table = ThresholdTable(list(BUCKET_GAMMAS), [tau] * 5, 0.95)
    lo, hi = sorted((s1, s2))
    a_lo, a_hi = decide(np.array([lo, hi]), np.array([f, f]), table)
    assert a_hi or not a_lo


def test_tie_alarms():
    table = ThresholdTable([0.0], [0.5], 0.95)
    assert decide(np.array([0.5]), np.array([0.0]), table)[0]


def test_table_lookup_and_missing_bucket():
    table = ThresholdTable([0.0, 0.05], [1.0, 2.0], 0.95)
    assert table.tau_for(0.0) == 1.0 and table.tau_for(20 / 304) == 2.0
    with pytest.raises(KeyError):
        table.tau_for(0.3)


def test_table_json_round_trip(tmp_path):
    table = ThresholdTable(list(BUCKET_GAMMAS), [0.1, 0.2, 0.3, 0.4, 0.5], 0.9, {"model": "abc"})
    table.save(tmp_path / "t.json")
    raw = json.loads((tmp_path / "t.json").read_text())
    assert raw["buckets"][-1]["hi"] is None
    assert raw["buckets"][1]["lo"] == 0.025
    again = ThresholdTable.load(tmp_path / "t.json")
    assert again == table


def test_calibration_reproducible_and_seeded(rng):
    model = AeModel("dense", [6, 3, 6], T=1, seed=2)
    W = rng.uniform(0, 1, (300, 6, 1))
    a = calibrate_thresholds(model, W, alpha=0.9, seed=1)
    assert a == calibrate_thresholds(model, W, alpha=0.9, seed=1)
    assert a.gammas == list(BUCKET_GAMMAS)
    # the unmasked bucket does not depend on the mask stream
    assert a.taus[0] == calibrate_thresholds(model, W, alpha=0.9, seed=2).taus[0]


def test_validation_fpr_matches_alpha(rng):
    model = AeModel("dense", [6, 3, 6], T=1, seed=2)
    W = rng.uniform(0, 1, (1000, 6, 1))
    scores = validation_scores(model, W, seed=4)
    table = calibrate_thresholds(model, W, alpha=0.95, seed=4)
    for g, tau in zip(table.gammas, table.taus):
        assert np.mean(scores[g] >= tau) == pytest.approx(0.05, abs=0.002)


def test_add_threshold(rng):
    model = AeModel("dense", [6, 3, 6], T=1, seed=2)
    W = rng.uniform(0, 1, (200, 6, 1))
    table = calibrate_thresholds(model, W, gammas=(0.0, 0.05), seed=0)
    bigger, seconds = add_threshold(table, model, W, 0.2, seed=5)
    assert bigger.gammas == [0.0, 0.05, 0.2]
    assert bigger.taus[:2] == table.taus
    assert seconds < 1.0
    assert bigger.tau_for(0.3) == bigger.taus[2]


def test_detect_uses_bucket():
    model = projector_model(T=1)
    table = ThresholdTable([0.0, 0.05], [0.01, 1.0], 0.95)
    z = np.array([[0.2], [0.3], [0.0], [0.5]])
    assert detect(model, table, z, 0.0)
    assert not detect(model, table, z, 0.06)


# ------------------------------------------------------------------ metrics

def test_metric_arithmetic():
    r = DetectionReport({}, tp=8, fp=2, tn=10, fn=2)
    assert (r.precision, r.recall, r.f1) == pytest.approx((0.8, 0.8, 0.8))
    assert r.fpr == pytest.approx(2 / 12)


def test_alarm_everything():
    pos, neg = 30, 70
    r = DetectionReport({}, tp=pos, fp=neg, tn=0, fn=0)
    assert r.tpr == 1.0 and r.fpr == 1.0
    assert r.precision == pytest.approx(pos / (pos + neg))


def test_empty_counts_are_zero():
    r = DetectionReport({})
    assert (r.tpr, r.fpr, r.precision, r.f1) == (0.0, 0.0, 0.0, 0.0)


@settings(max_examples=200, deadline=None)
@given(tp=st.integers(0, 1000), fp=st.integers(0, 1000), tn=st.integers(0, 1000), fn=st.integers(0, 1000))
def test_metric_identities(tp, fp, tn, fn):
    r = DetectionReport({}, tp, fp, tn, fn)
    assert r.tpr == r.recall
    assert 0.0 <= r.f1 <= 1.0
    if tp + fp + fn:
        assert r.f1 == pytest.approx(2 * tp / (2 * tp + fp + fn))


def test_alpha_curve_rows():
    rng = np.random.default_rng(1)
    val = {0.0: rng.normal(size=4000)}
    test = {0.0: rng.normal(size=4000)}
    rows = alpha_curve(val, test, (0.9, 0.95, 0.99))
    assert [r["alpha"] for r in rows] == [0.9, 0.95, 0.99]
    for r in rows:
        assert r["fpr"] + r["alpha"] == pytest.approx(1.0, abs=0.02)


# ----------------------------------------------------------------- campaign

@pytest.fixture(scope="module")
def small_setup(obs14, history14):
    scaler = fit_scaler(history14.Z_raw[:, :600])
    noise = NoiseModel(history14.noise_std ** 2)
    ctx = CampaignContext(obs14, WlsEstimator(obs14, noise), history14.Z_raw, 600, 6)
    test = make_windows(scaler.apply(history14.Z_raw[:, 600:])).windows
    model = AeModel("lstm", [34, 8, 4, 4, 8, 34], T=6, seed=0)
    table = calibrate_thresholds(model, test[:200], gammas=(0.0, 0.05, 0.10), seed=1, sampler=ctx.sampler)
    return model, table, ctx, scaler, test


def test_empty_campaign_reports_clean_row(small_setup):
    model, table, ctx, scaler, test = small_setup
    res = evaluate_campaign(model, table, [], ctx, scaler, test[:100])
    rows = res.rows()
    assert len(rows) == 1 and rows[0]["kind"] == "clean"
    assert rows[0]["tn"] + rows[0]["fp"] == 100


@pytest.mark.filterwarnings("ignore:input lies far outside")
def test_campaign_report_rows(small_setup, obs14):
    model, table, ctx, scaler, test = small_setup
    cfg = CampaignConfig(buses=(2, 9), mus=(0.1, -0.3), gammas=(0.0, 0.1), steps=(1, 3), seed=4)
    scs = build_campaign(cfg, obs14, 200)
    res = evaluate_campaign(model, table, scs, ctx, scaler, test[:100])
    assert len(res.rows()) == 2 * 2 * 2 * 2 + 1
    assert sum(r.tp + r.fn for r in res.reports) == len(scs)
    r = next(r for r in res.reports if r.key["gamma"] == 0.1)
    assert r.fp + r.tn == 100
    # per-scenario alarms agree with the thresholds of the observed buckets
    for sc, s, hit in zip(scs, res.scenario_scores, res.scenario_alarms):
        assert hit == (s >= table.tau_for(sc.mask.gamma))


@pytest.mark.filterwarnings("ignore:input lies far outside")
def test_campaign_is_deterministic(small_setup, obs14):
    model, table, ctx, scaler, test = small_setup
    cfg = CampaignConfig(buses=(4,), mus=(0.2,), gammas=(0.1,), replay=True, replay_windows=5, seed=1)
    a = evaluate_campaign(model, table, build_campaign(cfg, obs14, 100), ctx, scaler, test[:50], seed=3)
    b = evaluate_campaign(model, table, build_campaign(cfg, obs14, 100), ctx, scaler, test[:50], seed=3)
    assert a.rows() == b.rows()
    np.testing.assert_array_equal(a.scenario_scores, b.scenario_scores)
    assert a.rate(kind="replay") == b.rate(kind="replay")
