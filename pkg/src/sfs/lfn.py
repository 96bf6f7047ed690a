"""Coarse-to-fine flow estimator with descriptor matching, sub-pixel
refinement, feature-driven regularization, and flow-based label consensus.

Flow fields store per-axis displacements normalized to [0,1] of the frame
extent at their own pyramid stage (pixels = value * (extent - 1)); see the
synth module for the backward-offset sign convention.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .dnss import SaliencyMap
from .nn import Conv, Module, substream, weight_decay_penalty
from .tensor import Activation, Tensor


@dataclass
class FlowField:
    uv: Tensor   # [2,H,W], channel 0 = dx, channel 1 = dy, normalized
    stage: int = 0

    @property
    def shape(self):
        return self.uv.shape[1:]

    def to_pixels(self) -> np.ndarray:
        h, w = self.shape
        out = self.uv.data.copy()
        out[0] *= w - 1
        out[1] *= h - 1
        return out

    @staticmethod
    def from_pixels(flow_px: np.ndarray, stage: int = 0) -> "FlowField":
        flow_px = np.asarray(flow_px, dtype=np.float64)
        h, w = flow_px.shape[1:]
        uv = flow_px.copy()
        uv[0] /= w - 1
        uv[1] /= h - 1
        return FlowField(Tensor(np.clip(uv, 0.0, 1.0)), stage=stage)

    def clamped(self) -> "FlowField":
        return FlowField(Tensor(np.clip(self.uv.data, 0.0, 1.0)), stage=self.stage)


@dataclass
class FlowLossConfig:
    alpha2: tuple = (1.0, 1.0, 1.0)
    gamma2: float = 1.0
    eps: float = 0.01
    kappa2: float = 1e-5
    use_epe_term: bool = True

    def __post_init__(self):
        if self.gamma2 == 0.0:
            raise T.ConfigurationError("gamma2 must be nonzero")


def pixels_tensor(uv: Tensor) -> Tensor:
    """Differentiable normalized->pixel conversion."""
    h, w = uv.shape[1:]
    scale = np.array([w - 1.0, h - 1.0]).reshape(2, 1, 1)
    return uv * Tensor(scale)


# ---------------------------------------------------------------------------
# Encoder


class PyramidEncoder(Module):
    """Shared-weight dual-stream encoder: a 7x7 stem then stride-2 conv
    pairs producing features at 1/2, 1/4, and 1/8 resolution."""

    CHANNELS = (16, 24, 32)

    def __init__(self, seed: int):
        rng = substream(seed, "lfn-encoder")
        self.stem = Conv(rng, 1, 16, k=7)
        self.levels = []
        in_ch = 16
        for ch in self.CHANNELS:
            self.levels.append([Conv(rng, in_ch, ch, stride=2),
                                Conv(rng, ch, ch)])
            in_ch = ch

    def forward(self, image: Tensor, training=False) -> list:
        """[1,H,W] -> [feat_half, feat_quarter, feat_eighth]."""
        x = self.stem(image, training)
        pyr = []
        for down, keep in self.levels:
            x = keep(down(x, training), training)
            pyr.append(x)
        return pyr


def netc10_forward(image_a: Tensor, image_b: Tensor, encoder: PyramidEncoder):
    h, w = image_a.shape[1:]
    if image_a.shape != image_b.shape:
        raise T.DimensionError("image pair must share dimensions")
    if h % (2 ** len(encoder.CHANNELS)) or w % (2 ** len(encoder.CHANNELS)):
        raise T.ConfigurationError("image dims must divide by 2^levels")
    return encoder.forward(image_a), encoder.forward(image_b)


# ---------------------------------------------------------------------------
# Per-level stages


class MatchingStage(Module):
    """Upsample the previous flow, warp the second feature map by it, build
    a correlation cost volume, and decode a residual flow."""

    def __init__(self, seed: int, level: int, feat_ch: int, max_disp: int = 2):
        rng = substream(seed, "lfn-match", str(level))
        self.max_disp = max_disp
        cost_ch = (2 * max_disp + 1) ** 2
        self.conv1 = Conv(rng, cost_ch + 2, 32)
        self.conv2 = Conv(rng, 32, 16)
        self.head = Conv(rng, 16, 2, activation=Activation.NONE)

    def forward(self, prev_flow, feat_a, feat_b, training=False) -> Tensor:
        h, w = feat_a.shape[1:]
        if prev_flow is None:
            up = Tensor(np.zeros((2, h, w)))
        else:
            up = T.avg_unpool2d(prev_flow, 2)
        warped_b = T.bilinear_warp(feat_b, pixels_tensor(up))
        cost = T.correlation_volume(feat_a, warped_b, self.max_disp)
        x = T.concat([cost, up], axis=0)
        x = self.conv2(self.conv1(x, training), training)
        residual = self.head(x, training)
        return up + residual


class SubpixelStage(Module):
    """Residual refinement from (featA, warped featB, flow)."""

    def __init__(self, seed: int, level: int, feat_ch: int):
        rng = substream(seed, "lfn-subpix", str(level))
        self.conv1 = Conv(rng, 2 * feat_ch + 2, 32)
        self.conv2 = Conv(rng, 32, 16)
        self.head = Conv(rng, 16, 2, activation=Activation.NONE)

    def forward(self, flow, feat_a, feat_b, training=False) -> Tensor:
        warped_b = T.bilinear_warp(feat_b, pixels_tensor(flow))
        x = T.concat([feat_a, warped_b, flow], axis=0)
        x = self.conv2(self.conv1(x, training), training)
        return flow + self.head(x, training)


def apply_position_filters(flow: Tensor, weights9: Tensor) -> Tensor:
    """Apply per-position 3x3 filters (9 convex-weight channels, row-major
    taps) to each flow channel; zero padding at the borders."""
    h, w = flow.shape[1:]
    out = None
    for idx in range(9):
        dy, dx = idx // 3 - 1, idx % 3 - 1
        if flow.requires_grad:
            padded = _pad_tensor(flow, 1)
            shifted = _slice_tensor(padded, 1 + dy, 1 + dx, h, w)
        else:
            shifted = Tensor(np.pad(flow.data, ((0, 0), (1, 1), (1, 1)))[
                :, 1 + dy: 1 + dy + h, 1 + dx: 1 + dx + w])
        wmap = _slice_channel(weights9, idx)
        term = shifted * wmap
        out = term if out is None else out + term
    return out


def _pad_tensor(x: Tensor, p: int) -> Tensor:
    out = Tensor(np.pad(x.data, ((0, 0), (p, p), (p, p))))

    def bwd():
        if x.requires_grad:
            x.accumulate_grad(out.grad[:, p:-p, p:-p])

    return T._record(out, (x,), bwd)


def _slice_tensor(x: Tensor, y0: int, x0: int, h: int, w: int) -> Tensor:
    out = Tensor(x.data[:, y0: y0 + h, x0: x0 + w])

    def bwd():
        if x.requires_grad:
            g = np.zeros_like(x.data)
            g[:, y0: y0 + h, x0: x0 + w] = out.grad
            x.accumulate_grad(g)

    return T._record(out, (x,), bwd)


def _slice_channel(x: Tensor, c: int) -> Tensor:
    out = Tensor(x.data[c: c + 1])

    def bwd():
        if x.requires_grad:
            g = np.zeros_like(x.data)
            g[c: c + 1] = out.grad
            x.accumulate_grad(g)

    return T._record(out, (x,), bwd)


class RegularizationStage(Module):
    """Feature-driven local convolution: a conv bank over (features, warped
    intensity difference, mean-removed flow) feeds a 9-channel distance
    layer; softmax of its negative square root gives per-position convex
    filters applied to the flow."""

    BANK = (32, 32, 16, 16, 8)

    def __init__(self, seed: int, level: int, feat_ch: int):
        rng = substream(seed, "lfn-reg", str(level))
        self.bank = []
        in_ch = feat_ch + 1 + 2
        for ch in self.BANK:
            self.bank.append(Conv(rng, in_ch, ch))
            in_ch = ch
        self.dist = Conv(rng, in_ch, 9, activation=Activation.NONE)

    def filter_weights(self, flow, feat_a, img_a_small, img_b_small, training=False) -> Tensor:
        mean_uv = flow.data.reshape(2, -1).mean(axis=1).reshape(2, 1, 1)
        centered = flow - Tensor(mean_uv)
        warped_b = T.bilinear_warp(img_b_small, pixels_tensor(flow))
        diff = img_a_small - warped_b
        frob = T.power(T.tsum(diff * diff, axis=0, keepdims=True) + 1e-12, 0.5)
        x = T.concat([feat_a, frob, centered], axis=0)
        for conv in self.bank:
            x = conv(x, training)
        d = self.dist(x, training)
        logits = -T.power(d * d + 1e-12, 0.5)
        return T.softmax(logits, axis=0)

    def forward(self, flow, feat_a, img_a_small, img_b_small, training=False) -> Tensor:
        weights = self.filter_weights(flow, feat_a, img_a_small, img_b_small, training)
        return apply_position_filters(flow, weights)


# ---------------------------------------------------------------------------
# Full model


class LfnModel(Module):
    def __init__(self, seed: int):
        self.encoder = PyramidEncoder(seed)
        chans = PyramidEncoder.CHANNELS
        self.matching = [MatchingStage(seed, k, chans[k]) for k in range(len(chans))]
        self.subpixel = [SubpixelStage(seed, k, chans[k]) for k in range(len(chans))]
        self.regular = [RegularizationStage(seed, k, chans[k]) for k in range(len(chans))]

    @property
    def depth(self):
        return len(PyramidEncoder.CHANNELS)


def _downsample_image(img: Tensor, times: int) -> Tensor:
    x = img
    for _ in range(times):
        x = T.avg_pool2d(x, stride=2)
    return x


def lfn_forward(image_a: Tensor, image_b: Tensor, model: LfnModel,
                training=False):
    """Returns (final FlowField at input resolution, per-level stage flows
    coarse->fine as FlowFields)."""
    pyr_a, pyr_b = netc10_forward(image_a, image_b, model.encoder)
    m = model.depth
    prev = None
    stage_fields = []
    for k in range(m - 1, -1, -1):  # coarse (index m-1) to fine (index 0)
        fa, fb = pyr_a[k], pyr_b[k]
        flow = model.matching[k].forward(prev, fa, fb, training)
        flow = model.subpixel[k].forward(flow, fa, fb, training)
        img_a_small = _downsample_image(image_a, k + 1)
        img_b_small = _downsample_image(image_b, k + 1)
        flow = model.regular[k].forward(flow, fa, img_a_small, img_b_small, training)
        stage_fields.append(FlowField(flow, stage=m - 1 - k))
        prev = flow
    final = T.avg_unpool2d(prev, 2)
    return FlowField(final, stage=m), stage_fields


# ---------------------------------------------------------------------------
# Loss


def robust_penalty(diff_over_eps_sq: Tensor, gamma: float) -> Tensor:
    """Per-pixel robust term on (diff/eps)^2; gamma -> 2 limit is half the
    squared difference."""
    if gamma == 0.0:
        raise T.ConfigurationError("gamma2 must be nonzero")
    if abs(gamma - 2.0) < 1e-9:
        return diff_over_eps_sq * 0.5
    a = abs(gamma - 2.0)
    inner = diff_over_eps_sq * (1.0 / a) + 1.0
    return (T.power(inner, gamma / 2.0) - 1.0) * (a / gamma)


def flow_loss(stage_flows, stage_truths, frames, cfg: FlowLossConfig,
              params: dict | None = None) -> Tensor:
    """stage_flows: per-stage uv Tensors (or FlowFields), coarse to fine;
    stage_truths: matching normalized ndarrays (None allowed when the EPE
    term is off); frames: (x_t, x_tm1) full-resolution Tensors."""
    x_t, x_tm1 = frames
    total = Tensor(0.0)
    m = len(stage_flows)
    for k, flow in enumerate(stage_flows):
        uv = flow.uv if isinstance(flow, FlowField) else flow
        h, w = uv.shape[1:]
        alpha = cfg.alpha2[k] if k < len(cfg.alpha2) else cfg.alpha2[-1]
        term = Tensor(0.0)
        if cfg.use_epe_term:
            y = stage_truths[k]
            if y.shape != uv.shape:
                raise T.DimensionError("stage truth resolution mismatch")
            # endpoint term measured in pixel units so its scale is
            # comparable across stages and to the photometric term
            d = pixels_tensor(uv - Tensor(np.asarray(y)))
            term = term + T.tsum(d * d)
        times = int(round(np.log2(x_t.shape[1] / h)))
        xt_s = _downsample_image(x_t, times)
        xtm1_s = _downsample_image(x_tm1, times)
        warped = T.bilinear_warp(xtm1_s, pixels_tensor(uv))
        diff = (xt_s - warped) * (1.0 / cfg.eps)
        term = term + T.tsum(robust_penalty(diff * diff, cfg.gamma2))
        total = total + term * alpha
    if params and cfg.kappa2:
        total = total + weight_decay_penalty(params, cfg.kappa2)
    return total


def downsample_truth(flow_px: np.ndarray, times: int) -> np.ndarray:
    """Ground-truth pixel flow -> normalized truth at a stage resolution."""
    norm = FlowField.from_pixels(flow_px).uv.data
    x = norm
    for _ in range(times):
        h, w = x.shape[1:]
        x = x.reshape(2, h // 2, 2, w // 2, 2).mean(axis=(2, 4))
    return x


# ---------------------------------------------------------------------------
# Label transfer and consensus


def warp_map(sal: SaliencyMap, flow: FlowField) -> SaliencyMap:
    probs = sal.probs
    if probs.shape[1:] != flow.shape:
        raise T.DimensionError("saliency map and flow dims differ")
    warped = T.bilinear_warp(probs, Tensor(flow.to_pixels()))
    data = np.clip(warped.data, 1e-12, None)
    data /= data.sum(axis=0, keepdims=True)
    return SaliencyMap(Tensor(data))


def _patch_ssd(a: np.ndarray, b: np.ndarray, patch: int) -> np.ndarray:
    """Mean squared difference over patch x patch windows (edge padded)."""
    d2 = (a - b) ** 2
    p = patch // 2
    padded = np.pad(d2, p, mode="edge")
    out = np.zeros_like(d2)
    for dy in range(patch):
        for dx in range(patch):
            out += padded[dy: dy + d2.shape[0], dx: dx + d2.shape[1]]
    return out / (patch * patch)


def label_consensus(history, current_frame: Tensor, *, lam: float = 10.0,
                    patch: int = 5, num_classes: int = 2) -> SaliencyMap:
    """history: list of (SaliencyMap, frame ndarray) already warped into the
    current frame (at most the last five).  Votes are weighted by local
    appearance agreement with the current frame."""
    cur = current_frame.data[0]
    if not history:
        h, w = cur.shape
        return SaliencyMap(Tensor(np.full((num_classes, h, w), 1.0 / num_classes)))
    acc = None
    wsum = None
    for sal, warped_frame in history[-5:]:
        wf = warped_frame.data if isinstance(warped_frame, Tensor) else np.asarray(warped_frame)
        if wf.ndim == 3:
            wf = wf[0]
        weight = np.exp(-lam * _patch_ssd(cur, wf, patch))
        contrib = sal.probs.data * weight[None]
        acc = contrib if acc is None else acc + contrib
        wsum = weight if wsum is None else wsum + weight
    probs = acc / np.maximum(wsum[None], 1e-12)
    probs = np.clip(probs, 1e-12, None)
    probs /= probs.sum(axis=0, keepdims=True)
    return SaliencyMap(Tensor(probs))


# ---------------------------------------------------------------------------
# Training


@dataclass
class LfnTrainHistory:
    losses: list = field(default_factory=list)


def train_lfn(pairs, model: LfnModel, cfg: FlowLossConfig, *, steps=150,
              lr=2e-3, seed=0, log_every=0) -> LfnTrainHistory:
    """pairs: list of (frame_t Tensor, frame_tm1 Tensor, gt_flow_px ndarray
    or None).  Trains all stages jointly with per-stage supervision."""
    rng = substream(seed, "lfn-train")
    params = model.parameters()
    state = T.AdamState()
    history = LfnTrainHistory()
    m = model.depth
    for step in range(steps):
        x_t, x_tm1, gt_px = pairs[rng.integers(len(pairs))]
        model.zero_grad()
        with T.Tape() as tape:
            _, stage_fields = lfn_forward(x_t, x_tm1, model, training=True)
            truths = None
            if cfg.use_epe_term and gt_px is not None:
                truths = [downsample_truth(gt_px, m - k) for k in range(len(stage_fields))]
            loss = flow_loss([f.uv for f in stage_fields], truths,
                             (x_t, x_tm1), cfg, params)
            npix = sum(f.uv.size for f in stage_fields)
            loss = loss * (1.0 / npix)
            tape.backward(loss)
        if not np.isfinite(loss.item()):
            raise T.TrainingError("flow loss diverged")
        T.adam_step(params, model.grads(), state, lr=lr)
        history.losses.append(loss.item())
        if log_every and (step + 1) % log_every == 0:
            print(f"lfn step {step + 1}: loss {np.mean(history.losses[-log_every:]):.5f}")
    return history
