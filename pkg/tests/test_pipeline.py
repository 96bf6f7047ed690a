import numpy as np
import pytest

from sfs import memory, pipeline, synth
from sfs.dnss import DnssModel
from sfs.lfn import LfnModel
from sfs.memory import MemoryBank
from sfs.nrmn import NrmnConfig, NrmnModels, build_bank
from sfs.pipeline import crop_chip, load_pipeline, run_pipeline, save_pipeline
from sfs.tensor import Tensor


@pytest.fixture(scope="module")
def models():
    dnss = DnssModel(0, num_classes=2, prior_channels=2, stage_channels=8)
    nrmn = NrmnModels.create(0, NrmnConfig())
    lfn = LfnModel(0)
    chips = synth.make_chip_dataset(0, [1, 2], 4, 64)
    bank = build_bank(nrmn, chips)
    return dnss, nrmn, bank, lfn


@pytest.fixture(scope="module")
def frames():
    spec = synth.random_scene(5, height=64, width=64, max_step_px=2.0)
    seq = synth.generate_sequence(spec, 3)
    return [f.data for f in seq.frames]


def test_crop_chip_grows_small_boxes():
    frame = np.random.default_rng(0).random((1, 64, 64))
    chip = crop_chip(frame, (30, 30, 33, 33), 64)
    assert chip.shape == (1, 64, 64)


def test_crop_chip_at_border():
    frame = np.random.default_rng(1).random((1, 64, 64))
    chip = crop_chip(frame, (0, 0, 3, 3), 64)
    assert chip.shape == (1, 64, 64)
    assert np.isfinite(chip).all()


def test_run_pipeline_shapes_and_history(models, frames):
    dnss, nrmn, bank, lfn = models
    result = run_pipeline(frames, dnss, nrmn, bank, lfn)
    assert len(result.detections) == len(frames)
    assert len(result.saliency) == len(frames)
    assert len(result.priors) == len(frames)
    for sal in result.saliency:
        p = sal.probs.data
        assert p.shape == (2, 64, 64)
        assert np.allclose(p.sum(axis=0), 1.0)
    assert result.fps > 0


def test_first_frame_prior_is_uniform(models, frames):
    dnss, nrmn, bank, lfn = models
    result = run_pipeline(frames[:1], dnss, nrmn, bank, lfn)
    assert np.allclose(result.priors[0].probs.data, 0.5)


def test_pipeline_without_consensus(models, frames):
    dnss, nrmn, bank, _ = models
    result = run_pipeline(frames, dnss, nrmn, bank, None, use_consensus=False)
    assert len(result.saliency) == len(frames)
    for prior in result.priors:
        assert np.allclose(prior.probs.data, 0.5)


def test_pipeline_deterministic(models, frames):
    dnss, nrmn, bank, lfn = models
    a = run_pipeline(frames, dnss, nrmn, bank, lfn, classify=False)
    b = run_pipeline(frames, dnss, nrmn, bank, lfn, classify=False)
    for sa, sb in zip(a.saliency, b.saliency):
        assert np.array_equal(sa.probs.data, sb.probs.data)


def test_detections_carry_frame_ids(models, frames):
    dnss, nrmn, bank, lfn = models
    result = run_pipeline(frames, dnss, nrmn, bank, lfn, threshold=0.3,
                          min_area=1)
    for t, dets in enumerate(result.detections):
        for d in dets:
            assert d.frame_id == t
            x0, y0, x1, y1 = d.box
            assert 0 <= x0 < x1 <= 64 and 0 <= y0 < y1 <= 64


def test_save_load_round_trip_inference(models, frames, tmp_path):
    dnss, nrmn, bank, lfn = models
    save_pipeline(tmp_path, dnss_model=dnss, nrmn_models=nrmn, bank=bank,
                  lfn_model=lfn)
    dnss2 = DnssModel(9, num_classes=2, prior_channels=2, stage_channels=8)
    nrmn2 = NrmnModels.create(9, NrmnConfig())
    lfn2 = LfnModel(9)
    dnss2.load_state(__import__("sfs.tns_io", fromlist=["x"])
                     .load_checkpoint(str(tmp_path / "dnss")))
    bank2 = load_pipeline(tmp_path, nrmn_models=nrmn2, lfn_model=lfn2)
    assert bank2 is not None and len(bank2) == len(bank)
    a = run_pipeline(frames, dnss, nrmn, bank, lfn, classify=False)
    b = run_pipeline(frames, dnss2, nrmn2, bank2, lfn2, classify=False)
    for sa, sb in zip(a.saliency, b.saliency):
        assert np.array_equal(sa.probs.data, sb.probs.data)


def test_load_without_bank_returns_none(models, tmp_path):
    dnss, nrmn, _, _ = models
    save_pipeline(tmp_path, nrmn_models=nrmn)
    nrmn2 = NrmnModels.create(9, NrmnConfig())
    assert load_pipeline(tmp_path, nrmn_models=nrmn2) is None


def test_empty_bank_detections_marked_unknown(models, frames):
    from sfs.nrmn import UNKNOWN
    dnss, nrmn, _, lfn = models
    empty = MemoryBank(capacity=8)
    result = run_pipeline(frames, dnss, nrmn, empty, lfn, threshold=0.3,
                          min_area=1)
    for dets in result.detections:
        for d in dets:
            assert d.class_id == UNKNOWN
