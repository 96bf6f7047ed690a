"""Deterministic synthetic sonar-like scene generator.

Frames are wedge-masked composites of band-limited seafloor texture, bright
target shapes, darker acoustic shadows cast away from the wedge apex, and
multiplicative gamma speckle.  Every pixel is a pure function of
(spec, frame index).

Flow convention: `step_px` of a target (and `drift_px` of the platform) is
the backward sampling offset in pixels, i.e. the ground-truth flow channel
values inside the moving footprint.  Warping frame t-1 by the ground-truth
flow with `bilinear_warp` reconstructs frame t on non-occluded pixels.  The
on-screen motion is the negative of the stored offset, which keeps flow
components non-negative (the flow codomain is [0,1] after normalization).
"""

from __future__ import annotations

import os
import re
from dataclasses import dataclass, field

import numpy as np

from . import tns_io
from .nn import substream
from .tensor import Tensor, bilinear_warp

SHAPE_TEMPLATES = ("disk", "bar", "lshape", "ring", "wedge")


class SpecError(ValueError):
    pass


class SamplerError(ValueError):
    pass


@dataclass
class TargetSpec:
    class_id: int               # 1-based; 0 is background
    template_id: int            # index into SHAPE_TEMPLATES
    size_px: float = 18.0
    start: tuple = (64.0, 64.0)  # (x, y) center at t = 0
    step_px: tuple = (0.0, 0.0)  # (dx, dy) backward flow inside footprint
    rotation: float = 0.0        # radians
    shadow_len_px: int = 10
    intensity: float = 0.85


@dataclass
class SceneSpec:
    seed: int = 0
    height: int = 128
    width: int = 128
    texture_scales: tuple = (8, 16, 32)
    speckle_shape: float = 4.0   # gamma shape of the multiplicative factor
    speckle: bool = True
    wedge_aperture_deg: float = 90.0
    drift_px: tuple = (0.0, 0.0)  # (dx, dy) backward flow of the background
    targets: list = field(default_factory=list)


# ---------------------------------------------------------------------------
# Shape templates


def _shape_mask(template: str, size: float, rotation: float, yy, xx) -> np.ndarray:
    """Anti-aliased [0,1] mask of a shape centered at origin; yy/xx are
    pixel-center coordinate grids relative to the shape center."""
    c, s = np.cos(rotation), np.sin(rotation)
    u = c * xx + s * yy
    v = -s * xx + c * yy
    r = size / 2.0

    def soft(dist_inside):  # signed distance > 0 inside, 1px feather
        return np.clip(dist_inside + 0.5, 0.0, 1.0)

    if template == "disk":
        return soft(r - np.hypot(u, v))
    if template == "bar":
        return np.minimum(soft(r - np.abs(u)), soft(r / 3.0 - np.abs(v)))
    if template == "lshape":
        vert = np.minimum(soft(r / 3.0 - np.abs(u + r * 2 / 3)), soft(r - np.abs(v)))
        horz = np.minimum(soft(r - np.abs(u)), soft(r / 3.0 - np.abs(v + r * 2 / 3)))
        return np.maximum(vert, horz)
    if template == "ring":
        rad = np.hypot(u, v)
        return np.minimum(soft(r - rad), soft(rad - r * 0.55))
    if template == "wedge":
        # isoceles triangle pointing along +u
        inside = np.minimum(r - np.abs(v) * 2 - u, u + r)
        return soft(inside / np.sqrt(5))
    raise SpecError(f"unknown shape template '{template}'")


def wedge_mask(spec: SceneSpec) -> np.ndarray:
    """Sonar wedge with apex at the bottom-center of the frame."""
    H, W = spec.height, spec.width
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    ax, ay = (W - 1) / 2.0, H - 1.0
    ang = np.arctan2(ay - yy, xx - ax)  # 0..pi, pi/2 is straight up
    half = np.deg2rad(spec.wedge_aperture_deg) / 2.0
    rng_ok = np.hypot(xx - ax, yy - ay) <= ay + 0.5
    return ((np.abs(ang - np.pi / 2) <= half) & rng_ok).astype(np.float64)


def _texture(spec: SceneSpec) -> np.ndarray:
    """Static band-limited seafloor texture on an enlarged canvas so drift
    can sample beyond the frame."""
    pad = 64
    H, W = spec.height + 2 * pad, spec.width + 2 * pad
    rng = substream(spec.seed, "texture")
    tex = np.zeros((H, W))
    for scale in spec.texture_scales:
        gh, gw = H // scale + 2, W // scale + 2
        coarse = rng.normal(size=(gh, gw))
        up = np.kron(coarse, np.ones((scale, scale)))[:H, :W]
        # cheap smoothing: two passes of a 3x3 box filter
        for _ in range(2):
            up = (np.roll(up, 1, 0) + up + np.roll(up, -1, 0)) / 3.0
            up = (np.roll(up, 1, 1) + up + np.roll(up, -1, 1)) / 3.0
        tex += up / len(spec.texture_scales)
    tex = (tex - tex.min()) / max(np.ptp(tex), 1e-9)
    return 0.15 + 0.25 * tex


def _target_layers(spec: SceneSpec, t: int):
    """Per-target (mask, shadow_mask) at frame t on the frame grid."""
    H, W = spec.height, spec.width
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    layers = []
    for tgt in spec.targets:
        cx = tgt.start[0] - tgt.step_px[0] * t
        cy = tgt.start[1] - tgt.step_px[1] * t
        name = SHAPE_TEMPLATES[tgt.template_id]
        mask = _shape_mask(name, tgt.size_px, tgt.rotation, yy - cy, xx - cx)
        shadow = np.zeros_like(mask)
        for k in range(1, tgt.shadow_len_px + 1):
            shifted = np.zeros_like(mask)
            if k < H:
                shifted[:-k, :] = mask[k:, :]
            shadow = np.maximum(shadow, shifted * (1.0 - k / (tgt.shadow_len_px + 1.0)))
        shadow *= 1.0 - mask
        layers.append((mask, shadow))
    return layers


def render_frame(spec: SceneSpec, t: int, speckle=None) -> Tensor:
    H, W = spec.height, spec.width
    pad = 64
    tex = _texture(spec)
    ox = pad - spec.drift_px[0] * t
    oy = pad - spec.drift_px[1] * t
    # bilinear sample of the big texture at the drifted offset
    ys = np.clip(np.arange(H) + oy, 0, tex.shape[0] - 1.001)
    xs = np.clip(np.arange(W) + ox, 0, tex.shape[1] - 1.001)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    base = ((1 - fy) * (1 - fx) * tex[np.ix_(y0, x0)] + (1 - fy) * fx * tex[np.ix_(y0, x0 + 1)]
            + fy * (1 - fx) * tex[np.ix_(y0 + 1, x0)] + fy * fx * tex[np.ix_(y0 + 1, x0 + 1)])

    frame = base.copy()
    wmask = wedge_mask(spec)
    for tgt, (mask, shadow) in zip(spec.targets, _target_layers(spec, t)):
        if mask.max() > 0.5:
            inside = (mask > 0.5) & (wmask > 0.5)
            if not inside.any():
                raise SpecError(f"target class {tgt.class_id} outside wedge at frame {t}")
        frame = frame * (1 - shadow) + shadow * 0.05 * base
        frame = frame * (1 - mask) + mask * tgt.intensity
    use_speckle = spec.speckle if speckle is None else speckle
    if use_speckle:
        rng = substream(spec.seed, "speckle", str(t))
        factor = rng.gamma(spec.speckle_shape, 1.0 / spec.speckle_shape, size=frame.shape)
        frame = frame * factor
    frame = np.clip(frame, 0.0, 1.0) * wmask
    return Tensor(frame[None, :, :])


# ---------------------------------------------------------------------------
# Sequences


@dataclass
class SceneSequence:
    frames: list          # Tensor [1,H,W] each
    gt_boxes: list        # per frame: list of (x0,y0,x1,y1) int boxes
    gt_labels: list       # per frame: list of class ids
    gt_flow: list         # per consecutive pair: ndarray [2,H,W] pixel units
    occlusion: list       # per pair: bool mask of pixels to skip in warp checks


def _boxes_for_frame(spec: SceneSpec, t: int):
    boxes, labels = [], []
    wmask = wedge_mask(spec)
    for tgt, (mask, _) in zip(spec.targets, _target_layers(spec, t)):
        hit = (mask > 0.5) & (wmask > 0.5)
        if not hit.any():
            continue
        ys, xs = np.nonzero(hit)
        boxes.append((int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1))
        labels.append(tgt.class_id)
    return boxes, labels


def label_field(spec: SceneSpec, t: int) -> np.ndarray:
    """Integer [H,W] per-pixel label at frame t: 0 background, 1 target."""
    wmask = wedge_mask(spec) > 0.5
    labels = np.zeros((spec.height, spec.width), dtype=np.int64)
    for _tgt, (mask, _shadow) in zip(spec.targets, _target_layers(spec, t)):
        labels[(mask > 0.5) & wmask] = 1
    return labels


def random_scene(seed: int, *, height: int = 128, width: int = 128,
                 num_targets: int = 1, max_step_px: float = 8.0,
                 speckle: bool = True, moving: bool = True) -> SceneSpec:
    """A seeded scene with targets placed safely inside the wedge and
    motion bounded so they stay visible over short sequences."""
    rng = substream(seed, "scene")
    drift = (float(rng.uniform(0, max_step_px / 4)),
             float(rng.uniform(0, max_step_px / 4))) if moving else (0.0, 0.0)
    targets = []
    for i in range(num_targets):
        step = (float(rng.uniform(0, max_step_px)),
                float(rng.uniform(0, max_step_px / 2))) if moving else (0.0, 0.0)
        targets.append(TargetSpec(
            class_id=int(rng.integers(1, len(SHAPE_TEMPLATES) + 1)),
            template_id=0, size_px=float(rng.uniform(14, 24)),
            start=(float(rng.uniform(width * 0.35, width * 0.65)),
                   float(rng.uniform(height * 0.30, height * 0.55))),
            step_px=step, rotation=float(rng.uniform(0, 2 * np.pi)),
            shadow_len_px=int(rng.integers(4, 9))))
        targets[-1].template_id = targets[-1].class_id - 1
    return SceneSpec(seed=seed, height=height, width=width, speckle=speckle,
                     drift_px=drift, targets=targets)


def generate_sequence(spec: SceneSpec, num_frames: int) -> SceneSequence:
    if num_frames < 2:
        raise SpecError("a sequence needs at least two frames")
    frames, boxes, labels = [], [], []
    for t in range(num_frames):
        frames.append(render_frame(spec, t))
        b, l = _boxes_for_frame(spec, t)
        boxes.append(b)
        labels.append(l)
    H, W = spec.height, spec.width
    flows, occl = [], []
    for t in range(1, num_frames):
        flow = np.empty((2, H, W))
        flow[0].fill(spec.drift_px[0])
        flow[1].fill(spec.drift_px[1])
        moving = np.zeros((H, W), dtype=bool)
        layers_now = _target_layers(spec, t)
        layers_prev = _target_layers(spec, t - 1)
        for tgt, (mask, shadow), (pmask, pshadow) in zip(spec.targets, layers_now, layers_prev):
            foot = (mask + shadow) > 0.01
            flow[0][foot] = tgt.step_px[0]
            flow[1][foot] = tgt.step_px[1]
            moving |= foot | ((pmask + pshadow) > 0.01)
        # occlusion: a dilated band around anything that moved plus the wedge rim
        band = moving.copy()
        for _ in range(3):
            band |= np.roll(band, 1, 0) | np.roll(band, -1, 0)
            band |= np.roll(band, 1, 1) | np.roll(band, -1, 1)
        edge = wedge_mask(spec) < 0.5
        for _ in range(3):
            edge |= np.roll(edge, 1, 0) | np.roll(edge, -1, 0)
            edge |= np.roll(edge, 1, 1) | np.roll(edge, -1, 1)
        flows.append(flow)
        occl.append(band | edge)
    return SceneSequence(frames, boxes, labels, flows, occl)


def warp_consistency_error(seq: SceneSequence, pair_index: int) -> float:
    """Mean abs reconstruction error of frame t from frame t-1 via gt flow,
    over non-occluded pixels."""
    t = pair_index + 1
    warped = bilinear_warp(seq.frames[t - 1], Tensor(seq.gt_flow[pair_index]))
    err = np.abs(warped.data[0] - seq.frames[t].data[0])
    keep = ~seq.occlusion[pair_index]
    return float(err[keep].mean())


# ---------------------------------------------------------------------------
# Chips and episodes


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    h, w = img.shape
    ys = np.linspace(0, h - 1, out_h)
    xs = np.linspace(0, w - 1, out_w)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    return ((1 - fy) * (1 - fx) * img[np.ix_(y0, x0)] + (1 - fy) * fx * img[np.ix_(y0, x1)]
            + fy * (1 - fx) * img[np.ix_(y1, x0)] + fy * fx * img[np.ix_(y1, x1)])


def make_chip(seed: int, class_id: int, chip_hw: int = 64, jitter: bool = True) -> np.ndarray:
    """Render a single-target chip for class_id (1-based; template = id-1)."""
    rng = substream(seed, "chip", str(class_id))
    size = 20.0 + (rng.uniform(-4, 6) if jitter else 0.0)
    rot = rng.uniform(0, 2 * np.pi) if jitter else 0.0
    cx = 40.0 + (rng.uniform(-6, 6) if jitter else 0.0)
    cy = 34.0 + (rng.uniform(-6, 6) if jitter else 0.0)
    spec = SceneSpec(seed=seed, height=80, width=80, wedge_aperture_deg=170.0,
                     targets=[TargetSpec(class_id=class_id, template_id=class_id - 1,
                                         size_px=size, start=(cx, cy), rotation=rot,
                                         shadow_len_px=6)])
    frame = render_frame(spec, 0).data[0]
    half = 28
    y0, y1 = int(cy) - half, int(cy) + half
    x0, x1 = int(cx) - half, int(cx) + half
    crop = frame[max(y0, 0):y1, max(x0, 0):x1]
    return resize_bilinear(crop, chip_hw, chip_hw)[None, :, :]


NUM_CLASS_ATTRIBUTES = 40
ATTR_FRAME = 48          # silhouettes are described on a 48x48 frame
ATTR_CANONICAL_SIZE = 32.0


def mask_attributes(mask: np.ndarray) -> np.ndarray:
    """40-dim rotation-invariant description of a silhouette mask: occupancy
    in 36 concentric rings around the centroid plus four global shape
    statistics (area, edge density, moment eccentricity, radial
    compactness), each in [0,1]."""
    n = mask.shape[0]
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64)
    total = mask.sum()
    cy = (yy * mask).sum() / max(total, 1e-9)
    cx = (xx * mask).sum() / max(total, 1e-9)
    rad = np.hypot(yy - cy, xx - cx)
    edges = np.linspace(0.0, n / 2.0, 37)
    rings = np.empty(36)
    for i, (a, b) in enumerate(zip(edges[:-1], edges[1:])):
        sel = (rad >= a) & (rad < b)
        rings[i] = mask[sel].mean() if sel.any() else 0.0
    area = mask.mean()
    gy, gx = np.gradient(mask)
    edge = np.clip(np.hypot(gy, gx), 0, 1).mean() * 10.0
    m_yy = (((yy - cy) ** 2) * mask).sum() / max(total, 1e-9)
    m_xx = (((xx - cx) ** 2) * mask).sum() / max(total, 1e-9)
    m_xy = (((yy - cy) * (xx - cx)) * mask).sum() / max(total, 1e-9)
    half_tr = (m_xx + m_yy) / 2.0
    disc = np.sqrt(max(half_tr ** 2 - (m_xx * m_yy - m_xy ** 2), 0.0))
    ecc = np.sqrt(max(half_tr - disc, 0.0) / max(half_tr + disc, 1e-9))
    inside = rad[mask > 0.5]
    r90 = np.percentile(inside, 90) if inside.size else 0.0
    compact = total / max(np.pi * r90 ** 2, 1e-9)
    stats = np.clip([area * 4.0, edge, ecc, compact], 0.0, 1.0)
    return np.concatenate([rings, stats])


def class_attributes(class_id: int) -> np.ndarray:
    """Deterministic 40-dim semantic description of a shape class, computed
    from its canonical silhouette.  Purely geometric, so descriptions exist
    for classes the recognizer never saw."""
    template = SHAPE_TEMPLATES[class_id - 1]
    n = ATTR_FRAME
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64)
    mask = _shape_mask(template, ATTR_CANONICAL_SIZE, 0.0,
                       yy - (n - 1) / 2, xx - (n - 1) / 2)
    return mask_attributes(mask)


def chip_attributes(seed: int, class_id: int) -> np.ndarray:
    """Attributes of the jittered silhouette that make_chip(seed, class_id)
    rendered, in the canonical description frame.  Rotation invariance of
    mask_attributes makes these comparable to class_attributes."""
    rng = substream(seed, "chip", str(class_id))
    size = 20.0 + rng.uniform(-4, 6)
    rot = rng.uniform(0, 2 * np.pi)
    n = ATTR_FRAME
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64)
    mask = _shape_mask(SHAPE_TEMPLATES[class_id - 1],
                       size * ATTR_CANONICAL_SIZE / 20.0, rot,
                       yy - (n - 1) / 2, xx - (n - 1) / 2)
    return mask_attributes(mask)


def chip_attribute_dataset(seed: int, class_ids, per_class: int) -> dict:
    """Per-chip attribute targets matching make_chip_dataset's seeding:
    class_id -> [per_class, 40]."""
    return {cid: np.stack([chip_attributes(seed * 100003 + cid * 1009 + i, cid)
                           for i in range(per_class)])
            for cid in class_ids}


def make_chip_dataset(seed: int, class_ids, per_class: int, chip_hw: int = 64) -> dict:
    """class_id -> [per_class, 1, chip_hw, chip_hw] array."""
    out = {}
    for cid in class_ids:
        chips = [make_chip(seed * 100003 + cid * 1009 + i, cid, chip_hw) for i in range(per_class)]
        out[cid] = np.stack(chips)
    return out


@dataclass
class Episode:
    class_ids: list
    support: dict   # class_id -> [K,1,h,w]
    query: dict     # class_id -> [Q,1,h,w]
    support_idx: dict
    query_idx: dict


def episodic_sampler(dataset: dict, n_way: int, k_shot: int, q_query: int, seed: int):
    """Infinite stream of N-way K-shot episodes with disjoint support/query."""
    classes = sorted(dataset)
    if len(classes) < n_way:
        raise SamplerError(f"need {n_way} classes, have {len(classes)}")
    for cid in classes:
        if len(dataset[cid]) < k_shot + q_query:
            raise SamplerError(f"class {cid} has too few chips for K+Q sampling")
    rng = substream(seed, "episodes")
    while True:
        picked = sorted(rng.choice(classes, size=n_way, replace=False).tolist())
        support, query, sidx, qidx = {}, {}, {}, {}
        for cid in picked:
            idx = rng.permutation(len(dataset[cid]))
            sidx[cid] = idx[:k_shot].tolist()
            qidx[cid] = idx[k_shot:k_shot + q_query].tolist()
            support[cid] = dataset[cid][sidx[cid]]
            query[cid] = dataset[cid][qidx[cid]]
        yield Episode(picked, support, query, sidx, qidx)


def split_indices(n: int, seed: int):
    """5% holdout first, then 80/10/10 train/val/test over the remainder."""
    rng = substream(seed, "split")
    order = rng.permutation(n)
    n_hold = max(1, round(0.05 * n)) if n >= 4 else 0
    hold, rest = order[:n_hold], order[n_hold:]
    n_train = round(0.8 * len(rest))
    n_val = round(0.1 * len(rest))
    return {
        "holdout": sorted(hold.tolist()),
        "train": sorted(rest[:n_train].tolist()),
        "val": sorted(rest[n_train:n_train + n_val].tolist()),
        "test": sorted(rest[n_train + n_val:].tolist()),
    }


# ---------------------------------------------------------------------------
# Dataset directory IO


def write_sequence(directory, scene_id: int, seq: SceneSequence):
    sub = os.path.join(directory, f"scene_{scene_id}")
    os.makedirs(sub, exist_ok=True)
    for t, frame in enumerate(seq.frames):
        tns_io.write_tns(os.path.join(sub, f"frame_{t}.tns"), frame.data)
    for t, flow in enumerate(seq.gt_flow, start=1):
        tns_io.write_tns(os.path.join(sub, f"flow_{t}.tns"), flow)
    with open(os.path.join(sub, "truth.txt"), "w") as f:
        for t, (boxes, labels) in enumerate(zip(seq.gt_boxes, seq.gt_labels)):
            for (x0, y0, x1, y1), cid in zip(boxes, labels):
                f.write(f"{t} {x0} {y0} {x1} {y1} {1.0:.6f} {cid}\n")


def read_sequence(directory, scene_id: int) -> SceneSequence:
    sub = os.path.join(directory, f"scene_{scene_id}")
    frames = []
    t = 0
    while os.path.exists(os.path.join(sub, f"frame_{t}.tns")):
        frames.append(Tensor(tns_io.read_tns(os.path.join(sub, f"frame_{t}.tns"))))
        t += 1
    flows = [tns_io.read_tns(os.path.join(sub, f"flow_{k}.tns")) for k in range(1, t)]
    boxes = [[] for _ in range(t)]
    labels = [[] for _ in range(t)]
    with open(os.path.join(sub, "truth.txt")) as f:
        for line in f:
            parts = line.split()
            fid = int(parts[0])
            boxes[fid].append(tuple(int(v) for v in parts[1:5]))
            labels[fid].append(int(parts[6]))
    return SceneSequence(frames, boxes, labels, flows, [None] * len(flows))


def write_manifest(directory, scene_ids, splits: dict):
    lookup = {}
    for name, ids in splits.items():
        for i in ids:
            lookup[i] = name
    with open(os.path.join(directory, "manifest.txt"), "w") as f:
        for sid in scene_ids:
            f.write(f"scene_{sid} {lookup.get(sid, 'train')}\n")


def read_manifest(directory):
    out = []
    with open(os.path.join(directory, "manifest.txt")) as f:
        for line in f:
            name, split = line.split()
            m = re.fullmatch(r"scene_(\d+)", name)
            if not m:
                raise tns_io.TnsParseError(f"bad manifest entry '{name}'", 0)
            out.append((int(m.group(1)), split))
    return out
