"""Conditioning adapter: a locked backbone plus a zero-gated trainable branch.

The branch is a per-step affine map over the per-pixel channels
``[x_t, mask, tag_embedding]``; its output is scaled by a per-step gain that
starts at exactly zero, so a fresh adapter reproduces the backbone bit for bit.
"""

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .diffusion import ARTIFACT_VERSION, denoiser_checksum, make_batch
from .errors import ConfigError, FingerprintError, VocabularyError
from .optim import TrainConfig, make_optimizer, minibatches
from .rng import make_rng

DEFAULT_LESION_TYPES = ("melanoma", "nevus", "seborrheic-keratosis", "basal-cell-carcinoma")
DEFAULT_ATTRIBUTES = ("pigment-network", "globules", "streaks", "milia-like-cysts",
                      "negative-network")


@dataclass(frozen=True)
class Vocabulary:
    lesion_types: tuple = DEFAULT_LESION_TYPES
    attributes: tuple = DEFAULT_ATTRIBUTES

    def __post_init__(self):
        object.__setattr__(self, "lesion_types", tuple(self.lesion_types))
        object.__setattr__(self, "attributes", tuple(self.attributes))
        for name, tags in (("lesion_types", self.lesion_types), ("attributes", self.attributes)):
            if len(set(tags)) != len(tags) or "" in tags:
                raise ConfigError(f"vocabulary {name} must be unique non-empty tags")

    @classmethod
    def from_dict(cls, d):
        d = d or {}
        return cls(tuple(d.get("lesion_types", DEFAULT_LESION_TYPES)),
                   tuple(d.get("attributes", DEFAULT_ATTRIBUTES)))

    def to_dict(self):
        return {"lesion_types": list(self.lesion_types), "attributes": list(self.attributes)}

    def validate(self, lesion_type, attributes):
        if lesion_type and lesion_type not in self.lesion_types:
            raise VocabularyError(lesion_type)
        for a in attributes:
            if a not in self.attributes:
                raise VocabularyError(a)

    def rows(self, tags):
        """Table rows for ``tags``, ascending; lesion types precede attributes."""
        self.validate(tags.lesion_type, tags.attributes)
        rows = [len(self.lesion_types) + self.attributes.index(a) for a in tags.attributes]
        if tags.lesion_type:
            rows.append(self.lesion_types.index(tags.lesion_type))
        return sorted(rows)

    def __len__(self):
        return len(self.lesion_types) + len(self.attributes)


@dataclass(frozen=True)
class PromptTags:
    """Textual prompt; ``PromptTags()`` is the empty prompt."""

    lesion_type: str = ""
    attributes: tuple = field(default_factory=tuple)

    def __post_init__(self):
        attrs = tuple(self.attributes)
        if len(set(attrs)) != len(attrs):
            raise ConfigError(f"duplicate attribute tags in {attrs}")
        object.__setattr__(self, "lesion_type", self.lesion_type or "")
        object.__setattr__(self, "attributes", tuple(sorted(attrs)))

    @property
    def is_empty(self):
        return not self.lesion_type and not self.attributes


def sample_tags(rng, vocabulary=None, attr_prob=0.3, empty_prob=0.1):
    """Uniform lesion type, each attribute with ``attr_prob``; ``empty_prob`` gives the empty prompt."""
    vocabulary = vocabulary or Vocabulary()
    if rng.uniform() < empty_prob:
        return PromptTags()
    lesion = vocabulary.lesion_types[int(rng.integers(len(vocabulary.lesion_types)))]
    attrs = tuple(a for a in vocabulary.attributes if rng.uniform() < attr_prob)
    return PromptTags(lesion, attrs)


@dataclass(eq=False)
class TagEmbeddingTable:
    vocabulary: Vocabulary
    vectors: np.ndarray  # (len(vocabulary), dim)

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.vectors.ndim != 2 or self.vectors.shape[0] != len(self.vocabulary):
            raise ConfigError("need exactly one embedding vector per vocabulary tag")

    @classmethod
    def random(cls, vocabulary, dim, rng, scale=0.1):
        return cls(vocabulary, scale * rng.standard_normal((len(vocabulary), dim)))

    @property
    def dim(self):
        return self.vectors.shape[1]


def embed_tags(tags, table):
    """Sum of the table vectors of every tag; the empty prompt maps to zeros."""
    out = np.zeros(table.dim)
    for r in table.vocabulary.rows(tags):
        out = out + table.vectors[r]
    return out


@dataclass(eq=False)
class ControlAdapter:
    backbone: object
    backbone_checksum: str
    branch_weight: np.ndarray  # (T, C + 1 + dim, C)
    branch_bias: np.ndarray  # (T, C)
    out_gain: np.ndarray  # (T,)
    table: TagEmbeddingTable

    @property
    def T(self):
        return self.out_gain.size

    @property
    def channels(self):
        return self.branch_bias.shape[1]

    def arrays(self):
        """Trainable arrays; the backbone is deliberately absent."""
        return {"branch_weight": self.branch_weight, "branch_bias": self.branch_bias,
                "out_gain": self.out_gain, "tag_vectors": self.table.vectors}

    def copy(self):
        return ControlAdapter(self.backbone, self.backbone_checksum, self.branch_weight.copy(),
                              self.branch_bias.copy(), self.out_gain.copy(),
                              TagEmbeddingTable(self.table.vocabulary, self.table.vectors.copy()))

    def _features(self, x_t, masks, emb):
        # x_t (n,H,W,C), masks (n,H,W), emb (n,dim) -> (n,H,W,C+1+dim)
        n, h, w, _ = x_t.shape
        tag = np.broadcast_to(emb[:, None, None, :], (n, h, w, emb.shape[1]))
        return np.concatenate([x_t, masks[..., None].astype(np.float64), tag], axis=-1)

    def _forward(self, x_t, t, masks, emb, sched):
        idx = t - 1
        feat = self._features(x_t, masks, emb)
        wt = self.branch_weight[idx]
        branch = np.einsum("nhwf,nfc->nhwc", feat, wt) + self.branch_bias[idx][:, None, None, :]
        base = self.backbone.predict(x_t, t, sched)
        out = base + self.out_gain[idx][:, None, None, None] * branch
        return out, feat, branch

    def conditioned_denoise(self, x_t, t, mask, tags, sched):
        x_t = np.asarray(x_t, dtype=np.float64)
        mask = np.asarray(mask)
        if x_t.ndim != 3 or mask.shape != x_t.shape[:2]:
            raise ConfigError(f"mask shape {mask.shape} does not match grid {x_t.shape}")
        if x_t.shape[2] != self.channels:
            raise ConfigError(f"grid has {x_t.shape[2]} channels, adapter expects {self.channels}")
        emb = embed_tags(tags, self.table)
        out, _, _ = self._forward(x_t[None], np.array([int(t)]), mask[None], emb[None], sched)
        return out[0]

    def bind(self, mask, tags):
        """A denoiser with the prompt fixed, usable by ``ddim_sample``."""
        return BoundAdapter(self, np.asarray(mask), tags)


@dataclass(eq=False)
class BoundAdapter:
    adapter: ControlAdapter
    mask: np.ndarray
    tags: PromptTags

    def predict(self, x_t, t, sched):
        return self.adapter.conditioned_denoise(x_t, t, self.mask, self.tags, sched)


def conditioned_denoise(adapter, x_t, t, mask, tags, sched):
    return adapter.conditioned_denoise(x_t, t, mask, tags, sched)


def init_adapter(backbone, branch_spec=None, seed=0, sched=None):
    """Seeded branch weights, zero output gains.

    ``branch_spec`` keys: ``dim`` (tag embedding width), ``init_scale``,
    ``vocabulary``, and ``channels``/``T`` when the backbone cannot supply them.
    """
    spec = dict(branch_spec or {})
    unknown = set(spec) - {"dim", "init_scale", "vocabulary", "channels", "T"}
    if unknown:
        raise ConfigError(f"unknown adapter fields: {sorted(unknown)}")
    dim = int(spec.get("dim", 8))
    scale = float(spec.get("init_scale", 0.1))
    if dim < 1 or scale < 0:
        raise ConfigError("adapter dim must be >= 1 and init_scale >= 0")
    vocab = spec["vocabulary"] if isinstance(spec.get("vocabulary"), Vocabulary) \
        else Vocabulary.from_dict(spec.get("vocabulary"))
    T = getattr(backbone, "T", None) or spec.get("T") or (sched.T if sched else None)
    shape = getattr(backbone, "shape", None)
    channels = shape[-1] if shape else int(spec.get("channels", 1))
    if T is None:
        raise ConfigError("adapter needs T from the backbone, branch_spec or schedule")
    rng = make_rng(seed)
    n_feat = channels + 1 + dim
    weight = scale * rng.standard_normal((T, n_feat, channels))
    bias = np.zeros((T, channels))
    table = TagEmbeddingTable.random(vocab, dim, rng, scale)
    return ControlAdapter(backbone, denoiser_checksum(backbone), weight, bias, np.zeros(T), table)


def _embeddings(adapter, tag_list):
    return np.stack([embed_tags(tg, adapter.table) for tg in tag_list])


def adapter_loss(adapter, batch, masks, tag_list, sched):
    """Noise-prediction MSE of the conditioned model and gradients of the trainable arrays."""
    masks = np.asarray(masks)
    if masks.shape != batch.x_t.shape[:3] or len(tag_list) != batch.n:
        raise ConfigError("masks/tags do not match the batch")
    emb = _embeddings(adapter, tag_list)
    out, feat, branch = adapter._forward(batch.x_t, batch.t, masks, emb, sched)
    resid = out - batch.eps
    loss = float(np.mean(resid ** 2))
    dout = 2.0 * resid / resid.size
    idx = batch.t - 1
    gain = adapter.out_gain[idx][:, None, None, None]

    g_gain = np.zeros_like(adapter.out_gain)
    np.add.at(g_gain, idx, np.sum(dout * branch, axis=(1, 2, 3)))
    dbranch = gain * dout
    g_w = np.zeros_like(adapter.branch_weight)
    np.add.at(g_w, idx, np.einsum("nhwf,nhwc->nfc", feat, dbranch))
    g_b = np.zeros_like(adapter.branch_bias)
    np.add.at(g_b, idx, np.sum(dbranch, axis=(1, 2)))
    c = adapter.channels
    d_emb = np.einsum("nhwc,nfc->nf", dbranch, adapter.branch_weight[idx][:, c + 1:, :])
    g_tab = np.zeros_like(adapter.table.vectors)
    for i, tg in enumerate(tag_list):
        for r in adapter.table.vocabulary.rows(tg):
            g_tab[r] += d_emb[i]
    return loss, {"branch_weight": g_w, "branch_bias": g_b, "out_gain": g_gain,
                  "tag_vectors": g_tab}


def _unpack(data):
    if not data:
        raise ConfigError("adapter training data is empty")
    images = np.stack([np.asarray(d[0], dtype=np.float64) for d in data])
    masks = np.stack([np.asarray(d[1]) for d in data])
    if masks.shape != images.shape[:3]:
        raise ConfigError("mask shapes do not match image shapes")
    return images, masks, [d[2] for d in data]


def train_adapter(adapter, data, sched, cfg=None, history=None):
    """Train branch, gains and tag table on ``(image, mask, tags)`` triples.

    Returns a new adapter; the input adapter and its backbone are untouched.
    """
    cfg = cfg or TrainConfig()
    images, masks, tags = _unpack(data)
    for tg in tags:
        adapter.table.vocabulary.rows(tg)
    model = adapter.copy()
    params = model.arrays()
    opt = make_optimizer(cfg)
    rng = make_rng(cfg.seed)
    for _ in range(cfg.epochs):
        losses, sizes = [], []
        for idx in minibatches(len(images), cfg.batch_size, rng):
            t = rng.integers(1, sched.T + 1, size=len(idx))
            eps = rng.standard_normal(images[idx].shape)
            batch = make_batch(images[idx], t, eps, sched)
            loss, grads = adapter_loss(model, batch, masks[idx], [tags[i] for i in idx], sched)
            opt.step(params, grads)
            losses.append(loss)
            sizes.append(len(idx))
        if history is not None:
            history.append(float(np.average(losses, weights=sizes)))
    return model


def save_adapter(adapter, path):
    meta = {"version": ARTIFACT_VERSION, "kind": "control-adapter",
            "backbone_checksum": adapter.backbone_checksum,
            "vocabulary": adapter.table.vocabulary.to_dict()}
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(fh, meta=np.array(json.dumps(meta, sort_keys=True)), **adapter.arrays())


def load_adapter(path, backbone):
    """Load an adapter and attach ``backbone``, which must match the stored checksum."""
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(str(z["meta"]))
        arrays = {k: z[k] for k in z.files if k != "meta"}
    if meta.get("version") != ARTIFACT_VERSION or meta.get("kind") != "control-adapter":
        raise FingerprintError(f"{path}: not a version-{ARTIFACT_VERSION} adapter artifact")
    checksum = denoiser_checksum(backbone)
    if checksum != meta["backbone_checksum"]:
        raise FingerprintError(f"{path}: adapter was trained on a different backbone")
    table = TagEmbeddingTable(Vocabulary.from_dict(meta["vocabulary"]), arrays["tag_vectors"])
    return ControlAdapter(backbone, checksum, arrays["branch_weight"], arrays["branch_bias"],
                          arrays["out_gain"], table)
