"""Saliency segmentation network: dense encoder with skip concatenations,
atrous-pyramid decoder, balanced focal loss, and box extraction."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .nn import Conv, Module, substream, weight_decay_penalty
from .tensor import Activation, Tensor

ATROUS_SCHEDULE = (3, 6, 12, 18, 24)


@dataclass
class SaliencyMap:
    probs: Tensor  # [c,H,W], per-pixel class probabilities summing to 1

    @property
    def num_classes(self):
        return self.probs.shape[0]

    def foreground(self) -> np.ndarray:
        """Foreground mass = 1 - background probability."""
        return 1.0 - self.probs.data[0]


@dataclass
class LabelMap:
    labels: np.ndarray  # integer field, 0 = background

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)


@dataclass
class FocalLossConfig:
    alpha1: float = 0.5
    gamma1: float = 2.0
    kappa1: float = 0.0

    def __post_init__(self):
        if not (0.0 < self.alpha1 <= 1.0):
            raise T.ConfigurationError("alpha1 must lie in (0,1]")
        if self.gamma1 < 0 or self.kappa1 < 0:
            raise T.ConfigurationError("gamma1 and kappa1 must be >= 0")


@dataclass
class Detection:
    box: tuple  # (x_min, y_min, x_max, y_max)
    score: float
    class_id: int | None = None
    frame_id: int = 0


class DnssModel(Module):
    """Encoder: three blocks of stride-1 convs with intra-block skip
    concatenation and 2x2 stride-2 average pooling (channels 32/64/96).
    Decoder: 2x average unpool, five atrous stages with dilations
    (3,6,12,18,24) and dense inter-stage connections, a final unpool back to
    input resolution, a 1x1 flattening conv, and per-pixel softmax.

    `prior_channels` extra channels (the temporal consensus prior) are
    concatenated into the final block input.
    """

    def __init__(self, seed: int, num_classes: int = 2, prior_channels: int = 0,
                 stage_channels: int = 32):
        rng = substream(seed, "dnss")
        self.num_classes = num_classes
        self.prior_channels = prior_channels
        enc_channels = (32, 64, 96)
        self.enc_blocks = []
        in_ch = 1
        for ch in enc_channels:
            block = [
                Conv(rng, in_ch, ch, batch_norm=True),
                Conv(rng, ch, ch, batch_norm=True),
                Conv(rng, 2 * ch, ch, batch_norm=True),  # skip concat of first two
            ]
            self.enc_blocks.append(block)
            in_ch = ch
        sc = stage_channels
        self.dec_stages = []
        stage_in = enc_channels[-1]
        for dilation in ATROUS_SCHEDULE:
            stage = [
                Conv(rng, stage_in, sc, dilation=dilation, batch_norm=True),
                Conv(rng, sc, sc, batch_norm=True),
                Conv(rng, sc, sc, k=1, batch_norm=True),
            ]
            self.dec_stages.append(stage)
            stage_in += sc  # dense connections to every later stage
        self.flatten = Conv(rng, sc + prior_channels, num_classes, k=1,
                            activation=Activation.NONE)

    def forward(self, image: Tensor, training=False, prior: Tensor | None = None) -> Tensor:
        """Returns class probabilities [c,H,W] (or [N,c,H,W] for batches)."""
        batched = image.ndim == 4
        H, W = image.shape[-2:]
        if H < 32 or W < 32 or H % 8 or W % 8:
            raise T.ConfigurationError("input dims must be >= 32 and divisible by 8")
        x = image
        for block in self.enc_blocks:
            a = block[0](x, training)
            b = block[1](a, training)
            x = block[2](T.concat([a, b], axis=1 if batched else 0), training)
            x = T.avg_pool2d(x, stride=2)
        x = T.avg_unpool2d(x, 2)
        dense = x
        for stage in self.dec_stages:
            y = stage[0](dense, training)
            y = stage[1](y, training)
            y = stage[2](y, training)
            dense = T.concat([dense, y], axis=1 if batched else 0)
        y = T.avg_unpool2d(y, 4)
        if self.prior_channels:
            if prior is None:
                fill = np.full((self.prior_channels, H, W), 1.0 / self.num_classes)
                prior = Tensor(np.broadcast_to(fill, image.shape[:-3] + fill.shape).copy()) \
                    if batched else Tensor(fill)
            y = T.concat([y, prior], axis=1 if batched else 0)
        logits = self.flatten(y, training)
        return T.softmax(logits, axis=1 if batched else 0)


def dnss_forward(image: Tensor, model: DnssModel, prior: Tensor | None = None) -> SaliencyMap:
    return SaliencyMap(model.forward(image, training=False, prior=prior))


def inverse_class_frequency_alpha(label_maps) -> float:
    """Foreground balance weight from inverse class frequency over a split."""
    fg = sum(int((m.labels > 0).sum()) for m in label_maps)
    total = sum(m.labels.size for m in label_maps)
    if fg == 0 or fg == total:
        return 0.5
    return min(1.0, 1.0 - fg / total)


def balanced_focal_loss(sal: SaliencyMap | Tensor, labels: LabelMap,
                        cfg: FocalLossConfig, params: dict | None = None):
    """Two-sided focal cross-entropy with weight decay.

    Returns (loss Tensor, diagnostics dict).  Probabilities are clamped at
    1e-12 before the logs; clamping is flagged in the diagnostics.
    """
    probs = sal.probs if isinstance(sal, SaliencyMap) else sal
    y = labels.labels
    c = probs.shape[-3]
    if probs.shape[-2:] != y.shape[-2:]:
        raise T.DimensionError("saliency map and label map are not aligned")
    eps = 1e-12
    clamped = bool(((probs.data <= 0.0) | (probs.data >= 1.0)).any())
    w = T.clamp(probs, eps, 1.0 - eps)
    if probs.ndim == 3:
        onehot = np.zeros(probs.shape)
        for j in range(c):
            onehot[j] = (y == j)
    else:
        onehot = np.zeros(probs.shape)
        for j in range(c):
            onehot[:, j] = (y == j)
    pos = T.power(1.0 - w, cfg.gamma1) * T.log(w) * (onehot * cfg.alpha1)
    neg = T.power(w, cfg.gamma1) * T.log(1.0 - w) * ((1.0 - onehot) * (1.0 - cfg.alpha1))
    loss = -T.tsum(pos + neg)
    if params and cfg.kappa1:
        loss = loss + weight_decay_penalty(params, cfg.kappa1)
    return loss, {"clamped": clamped}


# ---------------------------------------------------------------------------
# Box extraction


def _connected_components(mask: np.ndarray) -> list[np.ndarray]:
    """8-connected components of a boolean mask, as (ys, xs) index arrays."""
    H, W = mask.shape
    seen = np.zeros_like(mask, dtype=bool)
    comps = []
    neigh = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)]
    for sy, sx in zip(*np.nonzero(mask)):
        if seen[sy, sx]:
            continue
        stack = [(sy, sx)]
        seen[sy, sx] = True
        pix = []
        while stack:
            y, x = stack.pop()
            pix.append((y, x))
            for dy, dx in neigh:
                ny, nx = y + dy, x + dx
                if 0 <= ny < H and 0 <= nx < W and mask[ny, nx] and not seen[ny, nx]:
                    seen[ny, nx] = True
                    stack.append((ny, nx))
        comps.append(np.array(pix))
    return comps


def extract_detections(sal: SaliencyMap, threshold: float = 0.5,
                       min_area: int = 9, pad: int = 2) -> list[Detection]:
    if not (0.0 < threshold < 1.0):
        raise T.ConfigurationError("threshold must lie in (0,1)")
    fg = sal.foreground()
    H, W = fg.shape
    dets = []
    for comp in _connected_components(fg > threshold):
        if len(comp) < min_area:
            continue
        ys, xs = comp[:, 0], comp[:, 1]
        box = (max(int(xs.min()) - pad, 0), max(int(ys.min()) - pad, 0),
               min(int(xs.max()) + 1 + pad, W), min(int(ys.max()) + 1 + pad, H))
        score = float(fg[ys, xs].mean())
        dets.append(Detection(box=box, score=score))
    dets.sort(key=lambda d: d.box)
    return dets


def write_detections(path, detections: list[Detection]):
    with open(path, "w") as f:
        for d in detections:
            cid = d.class_id if d.class_id is not None else -1
            x0, y0, x1, y1 = d.box
            f.write(f"{d.frame_id} {x0} {y0} {x1} {y1} {d.score:.6f} {cid}\n")


def read_detections(path) -> list[Detection]:
    out = []
    with open(path) as f:
        for line in f:
            p = line.split()
            out.append(Detection(box=tuple(int(v) for v in p[1:5]), score=float(p[5]),
                                 class_id=None if p[6] == "-1" else int(p[6]),
                                 frame_id=int(p[0])))
    return out


# ---------------------------------------------------------------------------
# Training


@dataclass
class EarlyStop:
    """Stop when validation loss rises for five consecutive epochs, or when
    training stops improving across two epochs while the validation change
    stays below `val_change_threshold`."""

    patience_rises: int = 5
    train_patience: int = 2
    val_change_threshold: float = 1e-4
    _rises: int = 0
    _stall: int = 0
    _prev_val: float = field(default=np.inf)
    _best_train: float = field(default=np.inf)

    def update(self, train_loss: float, val_loss: float) -> bool:
        if val_loss > self._prev_val:
            self._rises += 1
        else:
            self._rises = 0
        if train_loss < self._best_train - 1e-12:
            self._best_train = train_loss
            self._stall = 0
        else:
            self._stall += 1
        val_small_change = abs(val_loss - self._prev_val) < self.val_change_threshold
        self._prev_val = val_loss
        if self._rises >= self.patience_rises:
            return True
        return self._stall >= self.train_patience and val_small_change


@dataclass
class TrainHistory:
    train_losses: list = field(default_factory=list)
    val_losses: list = field(default_factory=list)
    best_epoch: int = -1
    stopped_early: bool = False
    diverged: bool = False


def train_dnss(model: DnssModel, dataset, cfg: FocalLossConfig, *,
               lr=2e-3, batch_size=4, max_epochs=20, seed=0,
               stop_rule: EarlyStop | None = None, priors=None) -> TrainHistory:
    """dataset: list of (image Tensor [1,H,W], LabelMap).  Splits 80/10/10
    after a 5% holdout; returns history and leaves the model at the weights
    of the lowest-validation-loss epoch."""
    from .synth import split_indices

    stop = stop_rule or EarlyStop()
    splits = split_indices(len(dataset), seed)
    train_idx, val_idx = splits["train"], splits["val"]
    if not val_idx:
        val_idx = train_idx[-1:]
    rng = substream(seed, "dnss-train")
    params = model.parameters()
    state = T.AdamState()
    history = TrainHistory()
    best_state = None

    def sample_loss(indices, training):
        total = 0.0
        for i in indices:
            image, labels = dataset[i][0], dataset[i][1]
            prior = priors[i] if priors is not None else None
            probs = model.forward(image, training=False, prior=prior)
            loss, _ = balanced_focal_loss(SaliencyMap(probs), labels, cfg, params)
            total += loss.item() / image.data[0].size
        return total / max(len(indices), 1)

    for epoch in range(max_epochs):
        order = rng.permutation(len(train_idx))
        epoch_loss = 0.0
        nb = 0
        for start in range(0, len(order), batch_size):
            batch = [train_idx[j] for j in order[start:start + batch_size]]
            model.zero_grad()
            with T.Tape() as tape:
                imgs = Tensor(np.stack([dataset[i][0].data for i in batch]))
                lbls = np.stack([dataset[i][1].labels for i in batch])
                prior = None
                if priors is not None:
                    prior = Tensor(np.stack([priors[i].data for i in batch]))
                probs = model.forward(imgs, training=True, prior=prior)
                loss, _ = balanced_focal_loss(probs, LabelMap(lbls), cfg, params)
                loss = loss * (1.0 / (len(batch) * imgs.data[0, 0].size))
                tape.backward(loss)
            if not np.isfinite(loss.item()):
                history.diverged = True
                return history
            T.adam_step(params, model.grads(), state, lr=lr)
            epoch_loss += loss.item()
            nb += 1
        train_loss = epoch_loss / max(nb, 1)
        val_loss = sample_loss(val_idx, training=False)
        history.train_losses.append(train_loss)
        history.val_losses.append(val_loss)
        if history.best_epoch < 0 or val_loss < history.val_losses[history.best_epoch]:
            history.best_epoch = epoch
            best_state = {k: v.copy() for k, v in model.state().items()}
        if stop.update(train_loss, val_loss):
            history.stopped_early = True
            break
    if best_state is not None:
        model.load_state(best_state)
    return history
