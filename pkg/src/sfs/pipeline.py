"""End-to-end per-frame pipeline: flow-warped label consensus feeds the
segmenter as a prior, detections are cropped and classified against the
memory bank, and the new map joins the temporal history."""

from __future__ import annotations

import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from . import tns_io
from .dnss import Detection, DnssModel, SaliencyMap, dnss_forward, extract_detections
from .lfn import FlowField, LfnModel, label_consensus, lfn_forward, warp_map
from .memory import MemoryBank, load_bank, save_bank
from .nrmn import NrmnModels, classify_region, prepare_chip
from .tensor import Tensor

HISTORY_LEN = 5


@dataclass
class PipelineResult:
    detections: list = field(default_factory=list)   # per frame: list[Detection]
    saliency: list = field(default_factory=list)     # per frame: SaliencyMap
    priors: list = field(default_factory=list)       # per frame: SaliencyMap
    frame_seconds: list = field(default_factory=list)

    @property
    def fps(self) -> float:
        total = sum(self.frame_seconds)
        return len(self.frame_seconds) / total if total > 0 else 0.0


def crop_chip(frame: np.ndarray, box, chip_hw: int, min_side: int = 16) -> np.ndarray:
    """Crop a detection box (grown to at least min_side) and resize."""
    x0, y0, x1, y1 = box
    h, w = frame.shape[-2:]
    while x1 - x0 < min_side:
        x0, x1 = max(x0 - 1, 0), min(x1 + 1, w)
        if x0 == 0 and x1 == w:
            break
    while y1 - y0 < min_side:
        y0, y1 = max(y0 - 1, 0), min(y1 + 1, h)
        if y0 == 0 and y1 == h:
            break
    chip = frame.reshape(h, w)[y0:y1, x0:x1][None]
    return prepare_chip(chip, chip_hw)


def run_pipeline(frames, dnss_model: DnssModel, nrmn_models: NrmnModels,
                 bank: MemoryBank, lfn_model: LfnModel | None, *,
                 threshold: float = 0.5, min_area: int = 9,
                 use_consensus: bool = True, consensus_lambda: float = 10.0,
                 classify: bool = True) -> PipelineResult:
    """frames: [T,1,H,W] ndarray or list of [1,H,W] arrays."""
    result = PipelineResult()
    history = []   # (SaliencyMap, frame ndarray [1,H,W]) in current-frame coords
    num_classes = dnss_model.num_classes
    for t, frame in enumerate(frames):
        start = time.perf_counter()
        frame = np.asarray(frame, dtype=np.float64)
        frame_t = Tensor(frame)
        if use_consensus and lfn_model is not None:
            if history:
                prev_t = Tensor(history[-1][1])
                flow, _ = lfn_forward(frame_t, prev_t, lfn_model)
                flow = flow.clamped()
                px = flow.to_pixels()
                rewarped = []
                for sal, old_frame in history:
                    rewarped.append((warp_map(sal, flow),
                                     T.bilinear_warp(Tensor(old_frame),
                                                     Tensor(px)).data))
                history = rewarped
            prior_map = label_consensus(history, frame_t,
                                        lam=consensus_lambda,
                                        num_classes=num_classes)
            prior = prior_map.probs
        else:
            prior_map = SaliencyMap(Tensor(np.full(
                (num_classes,) + frame.shape[-2:], 1.0 / num_classes)))
            prior = prior_map.probs if dnss_model.prior_channels else None
        if dnss_model.prior_channels == 0:
            prior = None
        sal = dnss_forward(frame_t, dnss_model, prior=prior)
        dets = extract_detections(sal, threshold=threshold, min_area=min_area)
        for d in dets:
            d.frame_id = t
            if classify:
                chip = crop_chip(frame, d.box, nrmn_models.cfg.chip_hw)
                cid, conf = classify_region(chip[None], bank, nrmn_models)
                d.class_id = cid
                d.score = float(d.score * max(conf, 1e-6)) if conf else d.score
        history.append((sal, frame))
        history = history[-HISTORY_LEN:]
        result.frame_seconds.append(time.perf_counter() - start)
        result.detections.append(dets)
        result.saliency.append(sal)
        result.priors.append(prior_map)
    return result


# ---------------------------------------------------------------------------
# Checkpoint persistence for the full model set


def save_pipeline(directory, dnss_model: DnssModel | None = None,
                  nrmn_models: NrmnModels | None = None,
                  bank: MemoryBank | None = None,
                  lfn_model: LfnModel | None = None):
    os.makedirs(directory, exist_ok=True)
    if dnss_model is not None:
        tns_io.save_checkpoint(os.path.join(directory, "dnss"), dnss_model.state())
    if nrmn_models is not None:
        sidecars = []
        if bank is not None:
            bank_dir = os.path.join(directory, "nrmn")
            os.makedirs(bank_dir, exist_ok=True)
            save_bank(bank_dir, bank, nrmn_models.cfg.key_dim)
            sidecars = ["bank.tns", "bank_entries.txt"]
        tns_io.save_checkpoint(os.path.join(directory, "nrmn"),
                               nrmn_models.state(), extra_files=sidecars)
    if lfn_model is not None:
        tns_io.save_checkpoint(os.path.join(directory, "lfn"), lfn_model.state())


def load_pipeline(directory, dnss_model: DnssModel | None = None,
                  nrmn_models: NrmnModels | None = None,
                  lfn_model: LfnModel | None = None):
    """Load states into pre-constructed models; returns the memory bank if
    an nrmn checkpoint with a bank sidecar is present."""
    bank = None
    if dnss_model is not None:
        dnss_model.load_state(tns_io.load_checkpoint(os.path.join(directory, "dnss")))
    if nrmn_models is not None:
        nrmn_dir = os.path.join(directory, "nrmn")
        nrmn_models.load_state(tns_io.load_checkpoint(nrmn_dir))
        if os.path.exists(os.path.join(nrmn_dir, "bank_entries.txt")):
            bank = load_bank(nrmn_dir)
    if lfn_model is not None:
        lfn_model.load_state(tns_io.load_checkpoint(os.path.join(directory, "lfn")))
    return bank
