import numpy as np
import pytest

import oracle_suite
from sfs import dnss, tensor as T
from sfs.dnss import Detection, EarlyStop, FocalLossConfig, LabelMap, SaliencyMap
from sfs.tensor import Tensor


def test_focal_loss_oracle():
    err, tol = oracle_suite.focal_loss_oracle()
    assert err < tol


def test_focal_loss_closed_forms():
    err, tol = oracle_suite.focal_loss_closed_forms()
    assert err < tol


def test_focal_loss_clamp_diagnostic():
    probs = np.zeros((2, 1, 2))
    probs[0] = [[1.0, 0.3]]
    probs[1] = [[0.0, 0.7]]
    loss, diag = dnss.balanced_focal_loss(
        SaliencyMap(Tensor(probs)), LabelMap(np.zeros((1, 2), dtype=int)),
        FocalLossConfig())
    assert diag["clamped"] is True
    assert np.isfinite(loss.item())


def test_focal_loss_rejects_misaligned():
    with pytest.raises(T.DimensionError):
        dnss.balanced_focal_loss(SaliencyMap(Tensor(np.full((2, 4, 4), 0.5))),
                                 LabelMap(np.zeros((3, 3), dtype=int)),
                                 FocalLossConfig())


def test_focal_config_validation():
    with pytest.raises(T.ConfigurationError):
        FocalLossConfig(alpha1=0.0)
    with pytest.raises(T.ConfigurationError):
        FocalLossConfig(gamma1=-1.0)


def test_model_output_shape_and_simplex():
    m = dnss.DnssModel(0, num_classes=2, stage_channels=8)
    img = Tensor(np.random.default_rng(0).random((1, 32, 32)))
    sal = dnss.dnss_forward(img, m)
    assert sal.probs.shape == (2, 32, 32)
    assert np.allclose(sal.probs.data.sum(axis=0), 1.0)
    fg = sal.foreground()
    assert fg.shape == (32, 32)
    assert np.allclose(fg, sal.probs.data[1])


def test_model_rejects_bad_dims():
    m = dnss.DnssModel(0, stage_channels=8)
    with pytest.raises(T.ConfigurationError):
        m.forward(Tensor(np.zeros((1, 30, 30))))


def test_prior_channels_change_output():
    m = dnss.DnssModel(0, num_classes=2, prior_channels=2, stage_channels=8)
    img = Tensor(np.random.default_rng(1).random((1, 32, 32)))
    default = m.forward(img).data
    prior = np.zeros((2, 32, 32))
    prior[1, 10:20, 10:20] = 1.0
    prior[0] = 1.0 - prior[1]
    biased = m.forward(img, prior=Tensor(prior)).data
    assert not np.allclose(default, biased)


def _flood_fill_oracle(mask):
    seen = np.zeros_like(mask, dtype=bool)
    comps = []
    H, W = mask.shape
    for sy in range(H):
        for sx in range(W):
            if mask[sy, sx] and not seen[sy, sx]:
                stack, pix = [(sy, sx)], []
                seen[sy, sx] = True
                while stack:
                    y, x = stack.pop()
                    pix.append((y, x))
                    for dy in (-1, 0, 1):
                        for dx in (-1, 0, 1):
                            yy, xx = y + dy, x + dx
                            if 0 <= yy < H and 0 <= xx < W and mask[yy, xx] \
                                    and not seen[yy, xx]:
                                seen[yy, xx] = True
                                stack.append((yy, xx))
                comps.append(sorted(pix))
    return sorted(comps)


def test_connected_components_against_flood_fill():
    r = np.random.default_rng(4)
    mask = r.random((12, 12)) > 0.6
    got = sorted(sorted(map(tuple, c.tolist())) for c in dnss._connected_components(mask))
    assert got == _flood_fill_oracle(mask)


def test_extract_detections_single_blob():
    probs = np.zeros((2, 32, 32))
    probs[1, 8:16, 10:20] = 0.9
    probs[0] = 1 - probs[1]
    dets = dnss.extract_detections(SaliencyMap(Tensor(probs)), threshold=0.5,
                                   min_area=9, pad=2)
    assert len(dets) == 1
    assert dets[0].box == (8, 6, 22, 18)
    assert dets[0].score == pytest.approx(0.9)


def test_extract_detections_min_area_filters():
    probs = np.zeros((2, 32, 32))
    probs[1, 4, 4] = 0.9
    probs[0] = 1 - probs[1]
    assert dnss.extract_detections(SaliencyMap(Tensor(probs)), min_area=9) == []


def test_detection_io_round_trip(tmp_path):
    dets = [Detection(box=(1, 2, 10, 12), score=0.73, class_id=3, frame_id=5),
            Detection(box=(0, 0, 4, 4), score=0.5, class_id=None, frame_id=0)]
    p = tmp_path / "d.txt"
    dnss.write_detections(p, dets)
    line = p.read_text().splitlines()[0]
    assert line == "5 1 2 10 12 0.730000 3"
    back = dnss.read_detections(p)
    assert [(d.box, d.frame_id, d.class_id) for d in back] == \
        [(d.box, d.frame_id, d.class_id) for d in dets]


def test_early_stop_five_rises():
    stop = EarlyStop()
    vals = [1, 2, 3, 4, 5, 6]
    fired = [stop.update(1.0, v) for v in vals]
    assert fired == [False] * 5 + [True]


def test_early_stop_resets_on_improvement():
    stop = EarlyStop()
    for v in [1, 2, 3, 0.5, 2, 3, 4, 5]:
        assert stop.update(1.0, v) is False
    assert stop.update(1.0, 6) is True


def test_early_stop_train_stall():
    stop = EarlyStop()
    assert stop.update(1.0, 1.0) is False      # sets the baseline
    assert stop.update(1.0, 1.0 + 1e-6) is False
    assert stop.update(1.0, 1.0 + 2e-6) is True  # two stalled epochs, flat val


def test_inverse_class_frequency_alpha():
    lab = np.zeros((4, 4), dtype=int)
    lab[0, 0] = 1   # 1/16 foreground -> alpha favours the rare class
    a = dnss.inverse_class_frequency_alpha([LabelMap(lab)])
    assert 0.5 < a < 1.0


def test_training_reduces_loss():
    r = np.random.default_rng(0)
    dataset = []
    for i in range(8):
        img = np.zeros((1, 32, 32))
        lab = np.zeros((32, 32), dtype=int)
        y, x = 8 + int(r.integers(0, 12)), 8 + int(r.integers(0, 12))
        img[0, y - 3:y + 3, x - 3:x + 3] = 1.0
        lab[y - 3:y + 3, x - 3:x + 3] = 1
        img += r.random((1, 32, 32)) * 0.1
        dataset.append((Tensor(img), LabelMap(lab)))
    m = dnss.DnssModel(0, num_classes=2, stage_channels=8)
    hist = dnss.train_dnss(m, dataset, FocalLossConfig(), lr=3e-3,
                           batch_size=4, max_epochs=4, seed=0)
    assert len(hist.train_losses) >= 2
    assert hist.train_losses[-1] < hist.train_losses[0]
    assert hist.best_epoch >= 0
