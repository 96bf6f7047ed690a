import numpy as np
import pytest

from sfs import nrmn, synth, tensor as T
from sfs.memory import MemoryBank
from sfs.nrmn import (NrmnConfig, NrmnModels, ResizeError, UNKNOWN,
                      build_bank, classify_region, cmsen_forward, fit_openmax,
                      prepare_chip, zero_shot_predict)
from sfs.tensor import Tensor


@pytest.fixture(scope="module")
def models():
    return NrmnModels.create(0, NrmnConfig())


@pytest.fixture(scope="module")
def chips():
    return synth.make_chip_dataset(0, [1, 2, 3], 8, 64)


def test_config_validates_key_geometry():
    with pytest.raises(T.ConfigurationError):
        NrmnConfig(key_dim=100)


def test_encoder_key_shape(models, chips):
    keys = models.encoder.forward(Tensor(chips[1][:3]))
    assert keys.shape == (3, 256)
    assert np.isfinite(keys.data).all()


def test_encoder_deterministic(models, chips):
    a = models.encoder.forward(Tensor(chips[1][:2])).data
    b = models.encoder.forward(Tensor(chips[1][:2])).data
    assert np.array_equal(a, b)


def test_prepare_chip_resizes_and_rejects():
    out = prepare_chip(np.random.default_rng(0).random((1, 40, 40)), 64)
    assert out.shape == (1, 64, 64)
    with pytest.raises(ResizeError):
        prepare_chip(np.zeros((1, 8, 8)), 64)


def test_cmsen_forward_single_chip(models, chips):
    emb = cmsen_forward(chips[1][0], models.encoder)
    assert emb.key.shape == (256,)


def test_relation_scores_in_unit_interval(models, chips):
    keys = models.encoder.forward(Tensor(chips[1][:4])).data
    scores = models.relation.forward(Tensor(keys), Tensor(keys)).data
    assert scores.shape == (4,)
    assert ((scores > 0) & (scores < 1)).all()


def test_classify_empty_bank_returns_unknown(models, chips):
    bank = MemoryBank(capacity=8)
    cid, conf = classify_region(chips[1][0], bank, models)
    assert cid == UNKNOWN and conf == 1.0


def test_build_bank_and_classify_returns_known_class(models, chips):
    bank = build_bank(models, {c: chips[c][:4] for c in chips})
    assert 0 < len(bank) <= models.cfg.capacity
    cid, conf = classify_region(chips[2][5], bank, models)
    assert cid in (1, 2, 3, UNKNOWN)
    assert 0.0 <= conf <= 1.0


def test_fit_openmax_populates_model(models, chips):
    om = fit_openmax(models, chips, tail_size=4)
    assert sorted(om.mav) == [1, 2, 3]
    assert models.openmax is om


def test_state_round_trip(chips):
    m1 = NrmnModels.create(1, NrmnConfig())
    m2 = NrmnModels.create(2, NrmnConfig())
    before = m2.encoder.forward(Tensor(chips[1][:1])).data
    m2.load_state(m1.state())
    after = m2.encoder.forward(Tensor(chips[1][:1])).data
    want = m1.encoder.forward(Tensor(chips[1][:1])).data
    assert not np.array_equal(before, after)
    assert np.array_equal(after, want)


def test_text_embedder_deterministic_anchor(models):
    attrs = synth.class_attributes(1)
    a = nrmn.embed_text_attributes(attrs, models.text_embedder)
    b = nrmn.embed_text_attributes(attrs, models.text_embedder)
    assert np.array_equal(a, b)
    assert a.shape == (256,)


def test_text_embedder_distinct_classes(models):
    a = nrmn.embed_text_attributes(synth.class_attributes(1), models.text_embedder)
    b = nrmn.embed_text_attributes(synth.class_attributes(4), models.text_embedder)
    assert not np.allclose(a, b)


def test_zero_shot_empty_descriptions_is_unknown(models, chips):
    cid, conf = zero_shot_predict(chips[1][0], {}, models)
    assert cid == UNKNOWN and conf == 1.0


def test_zero_shot_predicts_from_pool(models, chips):
    pool = {c: synth.class_attributes(c) for c in (1, 2, 3)}
    cid, conf = zero_shot_predict(chips[1][0], pool, models, tau_unknown=0.0)
    assert cid in pool
    assert 0.0 <= conf <= 1.0


def test_short_training_runs_and_returns_bank(models, chips):
    eps = synth.episodic_sampler(chips, 3, 2, 1, 0)
    hist, bank = nrmn.train_nrmn(eps, NrmnModels.create(3, NrmnConfig()),
                                 num_episodes=2, seed=0)
    assert len(hist.losses) == 2
    assert all(np.isfinite(hist.losses))
    assert len(bank) > 0
