import numpy as np
import pytest
from scipy import stats

from sfs import openmax
from sfs.openmax import UNKNOWN, WeibullFit, openmax_fit, openmax_predict, weibull_mle


def test_weibull_mle_against_scipy():
    r = np.random.default_rng(0)
    for shape, scale in ((1.5, 2.0), (0.8, 1.0), (3.0, 0.5)):
        x = r.weibull(shape, size=400) * scale
        fit = weibull_mle(x)
        c, _, s = stats.weibull_min.fit(x, floc=0)
        assert fit.shape == pytest.approx(c, rel=0.1)
        assert fit.scale == pytest.approx(s, rel=0.1)


def test_weibull_cdf_properties():
    fit = WeibullFit(shape=2.0, scale=1.5)
    assert fit.cdf(0.0) == 0.0
    assert fit.cdf(-1.0) == 0.0
    xs = np.linspace(0.1, 10, 50)
    vals = [fit.cdf(x) for x in xs]
    assert all(0 <= v <= 1 for v in vals)
    assert all(b >= a for a, b in zip(vals, vals[1:]))
    assert fit.cdf(1.5) == pytest.approx(1 - np.exp(-1.0))


def test_weibull_mle_degenerate_samples():
    fit = weibull_mle(np.array([2.0, 2.0, 2.0]))
    assert fit.scale == pytest.approx(2.0)
    fit = weibull_mle(np.array([]))
    assert fit.scale <= 1e-9


def _toy_model(seed=0, tail=5):
    r = np.random.default_rng(seed)
    acts = {1: r.normal(0, 1, (30, 4)) + 5,
            2: r.normal(0, 1, (30, 4)) - 5}
    return openmax_fit(acts, tail_size=tail, alpha_top=2), acts


def test_fit_builds_mav_and_weibull():
    model, acts = _toy_model()
    for cid in (1, 2):
        assert np.allclose(model.mav[cid], acts[cid].mean(axis=0))
        assert cid in model.weibull
    assert model.uncalibrated == set()


def test_small_class_flagged_uncalibrated():
    model = openmax_fit({1: np.ones((3, 4))}, tail_size=5)
    assert 1 in model.uncalibrated
    scores = openmax_predict({1: 1.0}, np.ones(4) * 50, model)
    assert scores[1] == pytest.approx(1.0)   # never revised
    assert scores[UNKNOWN] == 0.0


def test_predict_hand_replay():
    """Recalibration must match a literal transcription of the rule."""
    model, _ = _toy_model(seed=3)
    q = np.array([0.0, 0.0, 0.0, 0.0])
    raw = {1: 0.7, 2: 0.3}
    got = openmax_predict(raw, q, model)
    alpha = 2
    revised = dict(raw)
    unknown = 0.0
    for rank, cid in enumerate(sorted(raw, key=lambda c: -raw[c]), start=1):
        dist = np.linalg.norm(q - model.mav[cid])
        omega = 1.0 - ((alpha - rank + 1) / alpha) * model.weibull[cid].cdf(dist)
        moved = revised[cid] * (1.0 - omega)
        revised[cid] -= moved
        unknown += moved
    revised[UNKNOWN] = unknown
    total = sum(revised.values())
    for cid, v in revised.items():
        assert got[cid] == pytest.approx(v / total, abs=1e-9)


def test_far_query_routes_mass_to_unknown():
    model, _ = _toy_model()
    far = np.full(4, 100.0)
    scores = openmax_predict({1: 0.6, 2: 0.4}, far, model)
    assert scores[UNKNOWN] > 0.5


def test_near_query_keeps_known_mass():
    model, acts = _toy_model()
    scores = openmax_predict({1: 0.9, 2: 0.1}, acts[1].mean(axis=0), model)
    assert scores[1] > scores[UNKNOWN]


def test_predict_normalizes():
    model, _ = _toy_model()
    scores = openmax_predict({1: 2.0, 2: 1.0}, np.zeros(4), model)
    assert sum(scores.values()) == pytest.approx(1.0)
    assert all(v >= 0 for v in scores.values())
