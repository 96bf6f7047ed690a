"""Memory-augmented matching network: multi-scale chip encoder,
relation-based rescoring of memory candidates, open-set output, and a
text-attribute path for zero-shot prediction."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .memory import MemoryBank, memory_read, memory_write
from .nn import Conv, Dense, Module, substream
from .openmax import UNKNOWN, OpenMaxModel, openmax_fit, openmax_predict
from .synth import resize_bilinear
from .tensor import Activation, Tensor


class ResizeError(ValueError):
    pass


@dataclass
class NrmnConfig:
    key_dim: int = 256
    key_channels: int = 4      # key_dim = key_channels * key_grid**2
    key_grid: int = 8
    capacity: int = 128
    decay: float = 0.99
    tau_merge: float = 0.9
    eta: float = 0.3
    top_k: int = 16
    tail_size: int = 20
    alpha_top: int = 3
    tau_unknown: float = 0.5
    chip_hw: int = 64
    channels: int = 32

    def __post_init__(self):
        if self.key_channels * self.key_grid ** 2 != self.key_dim:
            raise T.ConfigurationError("key_dim must equal key_channels * key_grid^2")


@dataclass
class QueryEmbedding:
    key: np.ndarray
    source_box: object = None


class CmsenEncoder(Module):
    """Four conv+pool blocks with side branches at strides 4/2/1/1 whose
    same-size maps are concatenated and fused at one eighth of the chip
    resolution, then flattened to a key vector."""

    def __init__(self, seed: int, cfg: NrmnConfig):
        rng = substream(seed, "cmsen")
        cw = cfg.channels
        self.cfg = cfg
        pool_strides = (2, 2, 2, 1)
        dilations = (1, 1, 1, 2)   # last block is dilated to hold the field
        self.blocks = []
        in_ch = 1
        for ps, dil in zip(pool_strides, dilations):
            self.blocks.append(Conv(rng, in_ch, cw, dilation=dil, batch_norm=True))
            in_ch = cw
        self.pool_strides = pool_strides
        branch_ch = 8
        self.branches = []
        for bstride in (4, 2, 1, 1):
            self.branches.append([
                Conv(rng, cw, cw, stride=bstride, batch_norm=True),
                Conv(rng, cw, cw, batch_norm=True),
                Conv(rng, cw, branch_ch, k=1, batch_norm=True),
            ])
        self.fuse = Conv(rng, 4 * branch_ch, cw, batch_norm=True)
        self.flatten = Conv(rng, cw, cfg.key_channels, k=1, activation=Activation.NONE)

    def forward(self, chips: Tensor, training=False) -> Tensor:
        """chips: [N,1,h,w] -> keys [N, key_dim]."""
        x = chips
        side = []
        for block, ps in zip(self.blocks, self.pool_strides):
            x = block(x, training)
            if ps > 1:
                x = T.avg_pool2d(x, stride=ps)
            side.append(x)
        maps = []
        for feats, branch in zip(side, self.branches):
            y = branch[0](feats, training)
            y = branch[1](y, training)
            maps.append(branch[2](y, training))
        fused = self.fuse(T.concat(maps, axis=1), training)
        flat = self.flatten(fused, training)
        return T.reshape(flat, (flat.shape[0], self.cfg.key_dim))


def prepare_chip(chip, chip_hw: int) -> np.ndarray:
    arr = np.asarray(chip.data if isinstance(chip, Tensor) else chip, dtype=np.float64)
    while arr.ndim > 3 and arr.shape[0] == 1:
        arr = arr[0]
    if arr.ndim == 2:
        arr = arr[None]
    h, w = arr.shape[-2:]
    if h < 16 or w < 16:
        raise ResizeError(f"chip {h}x{w} is smaller than the 16x16 minimum")
    if (h, w) != (chip_hw, chip_hw):
        arr = resize_bilinear(arr[0], chip_hw, chip_hw)[None]
    return arr


def cmsen_forward(chip, model: CmsenEncoder, source_box=None) -> QueryEmbedding:
    arr = prepare_chip(chip, model.cfg.chip_hw)
    keys = model.forward(Tensor(arr[None]), training=False)
    return QueryEmbedding(key=keys.data[0].copy(), source_box=source_box)


class RelationModel(Module):
    """Learned similarity over concatenated key grids: channel concat
    (doubling channels), two conv+pool stages, two dense layers, sigmoid."""

    def __init__(self, seed: int, cfg: NrmnConfig, name="relation"):
        rng = substream(seed, name)
        self.cfg = cfg
        c2 = 2 * cfg.key_channels
        self.conv1 = Conv(rng, c2, 16, batch_norm=True)
        self.conv2 = Conv(rng, 16, 16, batch_norm=True)
        g = cfg.key_grid // 4
        self.fc1 = Dense(rng, 16 * g * g, 32)
        self.fc2 = Dense(rng, 32, 1, activation=Activation.NONE)

    def _to_grid(self, keys: Tensor) -> Tensor:
        cfg = self.cfg
        n = keys.shape[0]
        return T.reshape(keys, (n, cfg.key_channels, cfg.key_grid, cfg.key_grid))

    def forward(self, entry_keys: Tensor, query_keys: Tensor, training=False) -> Tensor:
        """[N,D] x [N,D] -> scores [N] in (0,1)."""
        x = T.concat([self._to_grid(entry_keys), self._to_grid(query_keys)], axis=1)
        x = T.avg_pool2d(self.conv1(x, training), stride=2)
        x = T.avg_pool2d(self.conv2(x, training), stride=2)
        x = T.reshape(x, (x.shape[0], x.size // x.shape[0]))
        x = self.fc2(self.fc1(x))
        return T.reshape(T.sigmoid(x), (x.shape[0],))


def relation_score(entry_key: np.ndarray, query_key: np.ndarray,
                   relation_model: RelationModel) -> float:
    d = relation_model.cfg.key_dim
    if len(entry_key) != d or len(query_key) != d:
        raise T.ConfigurationError(f"keys must have dimension {d}")
    out = relation_model.forward(Tensor(np.asarray(entry_key)[None]),
                                 Tensor(np.asarray(query_key)[None]))
    return float(out.data[0])


# ---------------------------------------------------------------------------
# Text attribute path

NUM_ATTRIBUTES = 40


class TextEmbedder(Module):
    """Deterministic seeded per-attribute lookup table followed by a 1-D
    convolution stack over the 40 slots, projected into key space."""

    def __init__(self, seed: int, cfg: NrmnConfig, table_dim: int = 16):
        rng = substream(seed, "text-embed")
        self.cfg = cfg
        self.table = Tensor(rng.normal(size=(NUM_ATTRIBUTES, table_dim)))  # fixed
        self.conv1 = Conv(rng, table_dim, table_dim, k=3)
        self.fc = Dense(rng, table_dim * NUM_ATTRIBUTES, cfg.key_dim,
                        activation=Activation.NONE)

    def forward(self, attrs: Tensor) -> Tensor:
        """attrs: [N,40] -> embeddings [N, key_dim]."""
        n = attrs.shape[0]
        x = T.reshape(attrs, (n, 1, NUM_ATTRIBUTES, 1)) * T.reshape(
            self.table, (1, self.table.shape[1], NUM_ATTRIBUTES, 1))
        # [N, table_dim, 40, 1]; 3x3 conv with same padding acts as the 1-D stack
        x = self.conv1(x)
        x = T.reshape(x, (n, x.size // n))
        return self.fc(x)


def embed_text_attributes(attrs, embed_model: TextEmbedder) -> np.ndarray:
    vec = np.asarray(attrs, dtype=np.float64)
    if vec.shape != (NUM_ATTRIBUTES,):
        raise T.ConfigurationError(f"attribute vector must have length {NUM_ATTRIBUTES}")
    return embed_model.forward(Tensor(vec[None])).data[0].copy()


class ZeroShotHead(Module):
    """Predicts the attribute vector of a chip from its visual key; the
    shared attribute space is what lets descriptions of never-seen classes
    be matched."""

    def __init__(self, seed: int, cfg: NrmnConfig):
        rng = substream(seed, "zs-head")
        self.fc1 = Dense(rng, cfg.key_dim, 64)
        self.fc2 = Dense(rng, 64, NUM_ATTRIBUTES, activation=Activation.NONE)

    def forward(self, keys: Tensor) -> Tensor:
        """[N, key_dim] -> predicted attributes [N, 40] in (0,1)."""
        return T.sigmoid(self.fc2(self.fc1(keys)))


# ---------------------------------------------------------------------------
# Model bundle and end-to-end classification


@dataclass
class NrmnModels:
    cfg: NrmnConfig
    encoder: CmsenEncoder
    relation: RelationModel
    text_embedder: TextEmbedder
    zs_head: ZeroShotHead
    zs_relation: RelationModel
    openmax: OpenMaxModel | None = None
    zs_calibration: np.ndarray | None = None   # [N,40] train-set predictions

    @staticmethod
    def create(seed: int, cfg: NrmnConfig | None = None) -> "NrmnModels":
        cfg = cfg or NrmnConfig()
        return NrmnModels(cfg=cfg,
                          encoder=CmsenEncoder(seed, cfg),
                          relation=RelationModel(seed, cfg),
                          text_embedder=TextEmbedder(seed, cfg),
                          zs_head=ZeroShotHead(seed, cfg),
                          zs_relation=RelationModel(seed, cfg, name="zs-relation"))

    def named_modules(self):
        return {"encoder": self.encoder, "relation": self.relation,
                "text_embedder": self.text_embedder, "zs_head": self.zs_head,
                "zs_relation": self.zs_relation}

    def state(self):
        out = {}
        for mname, mod in self.named_modules().items():
            for k, v in mod.state().items():
                out[f"{mname}.{k}"] = v
        return out

    def load_state(self, tensors):
        split = {name: {} for name in self.named_modules()}
        for k, v in tensors.items():
            mname, rest = k.split(".", 1)
            split[mname][rest] = v
        for mname, mod in self.named_modules().items():
            mod.load_state(split[mname])


def classify_region(chip, bank: MemoryBank, models: NrmnModels,
                    k: int | None = None, tau_unknown: float | None = None):
    """-> (class_id or UNKNOWN, confidence)."""
    cfg = models.cfg
    k = k or cfg.top_k
    tau_unknown = cfg.tau_unknown if tau_unknown is None else tau_unknown
    emb = cmsen_forward(chip, models.encoder)
    hits = memory_read(bank, emb.key, k)
    if not hits:
        return UNKNOWN, 1.0
    entry_keys = Tensor(np.stack([e.key for e, _ in hits]))
    query_keys = Tensor(np.repeat(emb.key[None], len(hits), axis=0))
    scores = models.relation.forward(entry_keys, query_keys).data
    per_class: dict[int, float] = {}
    for (entry, _), s in zip(hits, scores):
        per_class[entry.class_id] = max(per_class.get(entry.class_id, 0.0), float(s))
    if models.openmax is not None:
        probs = openmax_predict(per_class, emb.key, models.openmax)
        best = max(probs, key=lambda c: (probs[c], c == UNKNOWN))
        if best == UNKNOWN or probs[UNKNOWN] > tau_unknown:
            return UNKNOWN, probs[UNKNOWN]
        return best, probs[best]
    total = sum(per_class.values())
    best = max(sorted(per_class), key=lambda c: per_class[c])
    conf = per_class[best] / total if total > 0 else 0.0
    return best, conf


def build_bank(models: NrmnModels, support: dict, cfg: NrmnConfig | None = None) -> MemoryBank:
    """Write support chips (class_id -> [K,1,h,w]) into a fresh bank."""
    cfg = cfg or models.cfg
    bank = MemoryBank(capacity=cfg.capacity, decay=cfg.decay)
    for cid in sorted(support):
        chips = support[cid]
        keys = models.encoder.forward(Tensor(np.asarray(chips)), training=False).data
        for key in keys:
            memory_write(bank, key, cid, cfg.tau_merge, cfg.eta)
    return bank


def fit_openmax(models: NrmnModels, chips_by_class: dict,
                tail_size: int | None = None, alpha_top: int | None = None) -> OpenMaxModel:
    """Fit the open-set layer on key activations of correctly-matched chips
    (cosine-to-class-prototype argmax as the correctness filter)."""
    cfg = models.cfg
    keys = {cid: models.encoder.forward(Tensor(np.asarray(chips)), training=False).data
            for cid, chips in chips_by_class.items()}
    protos = {cid: k.mean(axis=0) / max(np.linalg.norm(k.mean(axis=0)), 1e-12)
              for cid, k in keys.items()}
    filtered = {}
    for cid, k in keys.items():
        unit = k / np.maximum(np.linalg.norm(k, axis=1, keepdims=True), 1e-12)
        sims = np.stack([unit @ protos[c] for c in sorted(protos)], axis=1)
        pred = np.array(sorted(protos))[np.argmax(sims, axis=1)]
        good = k[pred == cid]
        filtered[cid] = good if len(good) >= (tail_size or cfg.tail_size) else k
    model = openmax_fit(filtered, tail_size or cfg.tail_size, alpha_top or cfg.alpha_top)
    models.openmax = model
    return model


# ---------------------------------------------------------------------------
# Training


@dataclass
class NrmnTrainHistory:
    losses: list = field(default_factory=list)
    accuracies: list = field(default_factory=list)


def train_nrmn(episodes, models: NrmnModels, *, num_episodes=200, lr=1e-3,
               seed=0, log_every=0) -> tuple[NrmnTrainHistory, MemoryBank]:
    """Episodic training: write support into a fresh bank, score query chips
    against read candidates, binary cross-entropy on the relation scores.
    Returns the history and a persistent bank built from the final support
    set."""
    cfg = models.cfg
    params = {}
    for name, mod in (("encoder", models.encoder), ("relation", models.relation)):
        for k, v in mod.parameters().items():
            params[f"{name}.{k}"] = v
    state = T.AdamState()
    history = NrmnTrainHistory()
    bank = None
    episode = None
    for ep_idx in range(num_episodes):
        episode = next(episodes)
        bank = build_bank(models, episode.support)
        query_chips, query_cids = [], []
        for cid in episode.class_ids:
            for chip in episode.query[cid]:
                query_chips.append(chip)
                query_cids.append(cid)
        for mod in (models.encoder, models.relation):
            mod.zero_grad()
        with T.Tape() as tape:
            qkeys = models.encoder.forward(Tensor(np.stack(query_chips)), training=True)
            pair_entry, pair_query_idx, targets = [], [], []
            for qi, cid in enumerate(query_cids):
                hits = memory_read(bank, qkeys.data[qi], cfg.top_k)
                for entry, _ in hits:
                    pair_entry.append(entry.key)
                    pair_query_idx.append(qi)
                    targets.append(1.0 if entry.class_id == cid else 0.0)
            entry_t = Tensor(np.stack(pair_entry))
            # gather query rows by index via matmul with a selection matrix
            sel = np.zeros((len(pair_query_idx), len(query_cids)))
            sel[np.arange(len(pair_query_idx)), pair_query_idx] = 1.0
            query_t = T.matmul(Tensor(sel), qkeys)
            scores = models.relation.forward(entry_t, query_t, training=True)
            tvec = np.array(targets)
            # class-balanced BCE: one positive entry per ~n_way negatives
            pos_w = max(1.0, (tvec == 0).sum() / max((tvec == 1).sum(), 1))
            s = T.clamp(scores, 1e-7, 1.0 - 1e-7)
            bce = -(Tensor(tvec * pos_w) * T.log(s) + Tensor(1.0 - tvec) * T.log(1.0 - s))
            loss = T.tmean(bce)
            tape.backward(loss)
        if not np.isfinite(loss.item()):
            raise T.TrainingError("relation loss diverged")
        grads = {}
        for name, mod in (("encoder", models.encoder), ("relation", models.relation)):
            for k, g in mod.grads().items():
                grads[f"{name}.{k}"] = g
        T.adam_step(params, grads, state, lr=lr)
        history.losses.append(loss.item())
        correct = sum(
            1 for qi, cid in enumerate(query_cids)
            if classify_region(Tensor(query_chips[qi]), bank, models)[0] == cid)
        history.accuracies.append(correct / len(query_cids))
        if log_every and (ep_idx + 1) % log_every == 0:
            recent = history.losses[-log_every:]
            print(f"episode {ep_idx + 1}: loss {np.mean(recent):.4f} "
                  f"acc {np.mean(history.accuracies[-log_every:]):.3f}")
    persistent = build_bank(models, episode.support) if episode else MemoryBank(
        capacity=cfg.capacity, decay=cfg.decay)
    return history, persistent


def evaluate_episodes(episodes, models: NrmnModels, num_episodes=100) -> float:
    """Mean query accuracy with a fresh support bank per episode."""
    total, correct = 0, 0
    for _ in range(num_episodes):
        ep = next(episodes)
        bank = build_bank(models, ep.support)
        for cid in ep.class_ids:
            for chip in ep.query[cid]:
                pred, _ = classify_region(Tensor(chip), bank, models)
                total += 1
                correct += int(pred == cid)
    return correct / max(total, 1)


# ---------------------------------------------------------------------------
# Zero-shot path


def train_zero_shot(models: NrmnModels, chips_by_class: dict, attrs_by_class: dict,
                    *, per_chip_attrs: dict | None = None, steps=300, batch=32,
                    lr=1e-3, seed=0, train_encoder=False) -> list:
    """Fit the zero-shot head to regress chip attribute vectors, and fit the
    zero-shot relation scorer on match/mismatch pairs of text embeddings
    (class anchor vs embedded predicted attributes).  per_chip_attrs
    (class_id -> [N,40]) supervises each chip with its own silhouette's
    attributes; without it every chip of a class shares the class vector."""
    rng = substream(seed, "zs-train")
    classes = sorted(chips_by_class)
    anchors = {c: embed_text_attributes(attrs_by_class[c], models.text_embedder)
               for c in classes}
    chips = {c: np.asarray(chips_by_class[c]) for c in classes}
    keys = {c: models.encoder.forward(Tensor(chips[c]), training=False).data
            for c in classes}
    trained = [("zs_head", models.zs_head), ("zs_relation", models.zs_relation)]
    if train_encoder:
        trained.append(("encoder", models.encoder))
        batch = min(batch, 8)   # conv backprop budget
    params = {}
    for name, mod in trained:
        for k, v in mod.parameters().items():
            params[f"{name}.{k}"] = v
    state = T.AdamState()
    losses = []
    for _ in range(steps):
        cids = rng.choice(classes, size=batch)
        rows_idx = [(c, int(rng.integers(len(keys[c])))) for c in cids]
        tgt = np.stack([per_chip_attrs[c][i] if per_chip_attrs is not None
                        else attrs_by_class[c] for c, i in rows_idx])
        pos = np.stack([anchors[c] for c in cids])
        # mismatched anchors for the negative relation pairs
        neg_cids = [classes[(classes.index(c) + 1 + rng.integers(len(classes) - 1))
                    % len(classes)] for c in cids]
        neg = np.stack([anchors[c] for c in neg_cids])
        for _, mod in trained:
            mod.zero_grad()
        with T.Tape() as tape:
            if train_encoder:
                rows = models.encoder.forward(
                    Tensor(np.stack([chips[c][i] for c, i in rows_idx])),
                    training=True)
            else:
                rows = Tensor(np.stack([keys[c][i] for c, i in rows_idx]))
            pred = models.zs_head.forward(rows)
            reg = T.tmean(T.power(pred - Tensor(tgt), 2.0))
            embedded = models.text_embedder.forward(pred)
            both_anchor = Tensor(np.concatenate([pos, neg]))
            both_pred = T.concat([embedded, embedded], axis=0)
            scores = models.zs_relation.forward(both_anchor, both_pred, training=True)
            t = np.concatenate([np.ones(batch), np.zeros(batch)])
            s = T.clamp(scores, 1e-7, 1.0 - 1e-7)
            bce = T.tmean(-(Tensor(t) * T.log(s) + Tensor(1.0 - t) * T.log(1.0 - s)))
            loss = reg + bce * 0.1
            tape.backward(loss)
        grads = {}
        for name, mod in trained:
            for k, g in mod.grads().items():
                grads[f"{name}.{k}"] = g
        T.adam_step(params, grads, state, lr=lr)
        losses.append(loss.item())
    if train_encoder:   # keys moved; refresh for the calibration set
        keys = {c: models.encoder.forward(Tensor(chips[c]), training=False).data
                for c in classes}
    # calibration set: the head's predictions on the training chips; used at
    # prediction time to remove each description's base-rate score
    all_keys = np.concatenate([keys[c] for c in classes])
    models.zs_calibration = models.zs_head.forward(Tensor(all_keys)).data.copy()
    return losses


def _attr_score(pred: np.ndarray, attrs: np.ndarray) -> np.ndarray:
    d = np.linalg.norm(np.atleast_2d(pred) - attrs, axis=1)
    return 1.0 / (1.0 + d)


def zero_shot_predict(chip, class_descriptions: dict, models: NrmnModels,
                      tau_unknown: float = 0.1):
    """Match the chip's predicted attribute vector against every described
    class in attribute space.  Scores are centered by each description's
    mean score over the stored training-set predictions, which removes the
    systematic advantage of classes seen in training.  Below-threshold
    appearance maxima report UNKNOWN."""
    if not class_descriptions:
        return UNKNOWN, 1.0
    emb = cmsen_forward(chip, models.encoder)
    pred = models.zs_head.forward(Tensor(emb.key[None])).data[0]
    classes = sorted(class_descriptions)
    raw, centered = {}, {}
    for c in classes:
        attrs = np.asarray(class_descriptions[c], dtype=np.float64)
        if attrs.shape != (NUM_ATTRIBUTES,):
            raise T.ConfigurationError(
                f"attribute vector must have length {NUM_ATTRIBUTES}")
        raw[c] = float(_attr_score(pred, attrs)[0])
        base = float(_attr_score(models.zs_calibration, attrs).mean()) \
            if models.zs_calibration is not None else 0.0
        centered[c] = raw[c] - base
    best = max(classes, key=lambda c: centered[c])
    if raw[best] < tau_unknown:
        return UNKNOWN, 1.0 - raw[best]
    return best, raw[best]
