"""End-to-end orchestration: masks -> prompts -> conditioned sampling ->
paired synthetic data -> segmentation with and without augmentation.
"""

import json
import logging
import statistics
from dataclasses import dataclass, field
from pathlib import Path

from .control import (PromptTags, Vocabulary, init_adapter, load_adapter, sample_tags,
                      save_adapter, train_adapter)
from .datacore import (ManifestEntry, load_mask, load_pairs, save_image, save_mask,
                       split_dataset, write_manifest)
from .diffusion import ddim_sample, load_denoiser, save_denoiser, train_denoiser
from .errors import ConfigError, DegenerateOutputError, LesionAugError, StageError
from .maskgen import MaskGenConfig, gen_batch, transform_existing
from .optim import TrainConfig
from .rng import derive_seed, make_rng, ordered_map
from .schedule import schedule_from_config
from .segharness import build_augmented, evaluate_dsc, train_segmenter
from .toy import make_toy_pairs

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TagSampler:
    """Uniform lesion type, independent attributes, and a share of empty prompts."""

    vocabulary: Vocabulary = field(default_factory=Vocabulary)
    attr_prob: float = 0.3
    empty_prob: float = 0.1

    def __post_init__(self):
        if not (0 <= self.attr_prob <= 1 and 0 <= self.empty_prob <= 1):
            raise ConfigError("sampler probabilities must lie in [0, 1]")

    @classmethod
    def from_dict(cls, d, vocabulary=None):
        d = dict(d or {})
        return cls(vocabulary or Vocabulary.from_dict(d.get("vocabulary")),
                   float(d.get("attr_prob", 0.3)), float(d.get("empty_prob", 0.1)))

    def sample(self, rng):
        return sample_tags(rng, self.vocabulary, self.attr_prob, self.empty_prob)


@dataclass(frozen=True)
class SynthesisJob:
    adapter_path: str
    backbone_path: str
    out_dir: str
    n: int
    seed: int = 0
    schedule: dict = None
    maskgen: dict = None
    mask_dir: str = None
    sampler: dict = None
    substeps: int = 50
    eta: float = 0.0
    threads: int = 1

    def __post_init__(self):
        if self.n < 1:
            raise ConfigError("synthesis needs n >= 1")
        if (self.maskgen is None) == (self.mask_dir is None):
            raise ConfigError("give exactly one mask source: maskgen config or mask_dir")


def masks_from_dir(mask_dir, n):
    paths = sorted(Path(mask_dir).glob("*.png"))
    if len(paths) < n:
        raise ConfigError(f"{mask_dir} holds {len(paths)} masks, {n} requested")
    return [load_mask(p) for p in paths[:n]]


def procedural_masks(n, cfg, seed, threads=1):
    return [g.mask for g in gen_batch(n, cfg, derive_seed(seed, 0), threads)]


def transformed_masks(n, base_masks, spec, seed, threads=1):
    """Vary existing masks by random rotation, resizing and optional elastic warps."""
    if not base_masks:
        raise ConfigError("transform source needs existing masks")
    rot = float(spec.get("rotate", 180.0))
    lo, hi = spec.get("scale", [0.8, 1.2])
    elastic = spec.get("elastic")

    def one(i):
        for attempt in range(10):
            rng = make_rng(seed, 3, i, attempt)
            ops = [("rotate", rng.uniform(-rot, rot)), ("resize", rng.uniform(lo, hi))]
            if elastic:
                ops.append(("elastic", float(elastic[0]), float(elastic[1])))
            try:
                return transform_existing(base_masks[i % len(base_masks)], ops,
                                          derive_seed(seed, 4, i, attempt))
            except DegenerateOutputError:
                continue
        raise DegenerateOutputError(f"item {i}: every transform attempt was empty")

    return ordered_map(one, range(n), threads)


def synthesize(adapter, sched, masks, tags, substeps=50, eta=0.0, seed=0, threads=1):
    """Sample one image per ``(mask, tags)``; item ``i`` draws from ``(seed, 2, i)``."""
    channels = adapter.channels

    def one(i):
        shape = masks[i].shape + (channels,)
        return ddim_sample(adapter.bind(masks[i], tags[i]), sched, shape, substeps, eta,
                           derive_seed(seed, 2, i))

    return ordered_map(one, range(len(masks)), threads)


def write_pairs(out_dir, images, masks, tags):
    out = Path(out_dir)
    entries = []
    for i, (img, m, tg) in enumerate(zip(images, masks, tags)):
        e = ManifestEntry(f"images/img_{i:05d}.png", f"masks/mask_{i:05d}.png",
                          tg.lesion_type, tg.attributes)
        save_image(img, out / e.image_path)
        save_mask(m, out / e.mask_path)
        entries.append(e)
    write_manifest(entries, out / "manifest.jsonl")
    return entries


def synthesize_pairs(job):
    """Run a :class:`SynthesisJob`; returns the manifest entries it wrote."""
    sched = schedule_from_config(job.schedule)
    backbone = load_denoiser(job.backbone_path, sched)
    adapter = load_adapter(job.adapter_path, backbone)
    sampler = TagSampler.from_dict(job.sampler, adapter.table.vocabulary)
    if job.mask_dir is not None:
        masks = masks_from_dir(job.mask_dir, job.n)
    else:
        masks = procedural_masks(job.n, MaskGenConfig.from_dict(job.maskgen), job.seed,
                                 job.threads)
    shape = getattr(backbone, "shape", None)
    if shape is not None and masks[0].shape != tuple(shape[:2]):
        raise ConfigError(f"mask size {masks[0].shape} != backbone size {tuple(shape[:2])}")
    tags = [sampler.sample(make_rng(job.seed, 1, i)) for i in range(job.n)]
    images = synthesize(adapter, sched, masks, tags, job.substeps, job.eta, job.seed,
                        job.threads)
    return write_pairs(job.out_dir, images, masks, tags)


EXPERIMENT_SECTIONS = {"data", "schedule", "denoiser", "adapter", "maskgen", "sampler",
                       "segmentation", "sizes", "seeds", "split"}


def load_experiment_config(config):
    if isinstance(config, (str, Path)):
        with open(config, encoding="utf-8") as fh:
            config = json.load(fh)
    config = dict(config)
    unknown = set(config) - EXPERIMENT_SECTIONS
    if unknown:
        raise ConfigError(f"unknown experiment sections: {sorted(unknown)}")
    if not config.get("sizes"):
        raise ConfigError("experiment needs a non-empty 'sizes' list")
    return config


def _stage(name):
    def wrap(fn):
        def run(*args, **kwargs):
            log.info("stage %s", name)
            try:
                return fn(*args, **kwargs)
            except StageError:
                raise
            except (LesionAugError, ValueError, OSError, KeyError) as exc:
                raise StageError(name, exc) from exc
        return run
    return wrap


@_stage("data")
def _load_data(cfg, seeds, vocab, threads):
    data = cfg.get("data", {})
    n_gen = int(data.get("n_generation", 200))
    if data.get("source", "toy") == "toy":
        gset = make_toy_pairs(n_gen, derive_seed(seeds["data"], 0), data.get("maskgen"),
                              vocab, threads)
        sset = make_toy_pairs(int(data.get("n_segmentation", 110)),
                              derive_seed(seeds["data"], 1), data.get("maskgen"), vocab, threads)
        return gset, sset
    triples = [(img, m, PromptTags(e.lesion_type, e.attributes))
               for img, m, e in load_pairs(data["path"], vocab)]
    order = make_rng(seeds["data"]).permutation(len(triples))
    triples = [triples[i] for i in order]
    if n_gen >= len(triples):
        raise ConfigError("n_generation leaves no data for segmentation")
    return triples[:n_gen], triples[n_gen:]


@_stage("split")
def _split(sset, cfg, seeds):
    ratio = cfg.get("split", {}).get("ratio", [7, 1, 2])
    return split_dataset(list(range(len(sset))), ratio, seeds["split"])


@_stage("denoiser")
def _backbone(gset, sched, cfg, seeds):
    section = cfg.get("denoiser", {})
    if section.get("path"):
        return load_denoiser(section["path"], sched)
    tcfg = TrainConfig.from_dict(section.get("train"), seed=seeds["denoiser"])
    return train_denoiser([p[0] for p in gset], sched, tcfg)


@_stage("adapter")
def _adapter(backbone, gset, sched, cfg, seeds, vocab):
    section = dict(cfg.get("adapter", {}))
    tcfg = TrainConfig.from_dict(section.pop("train", None), seed=seeds["adapter"])
    section.pop("vocabulary", None)
    adapter = init_adapter(backbone, dict(section, vocabulary=vocab), seeds["adapter"])
    return train_adapter(adapter, gset, sched, tcfg)


@_stage("synthesis")
def _synthesize(adapter, sched, gset, n, cfg, seeds, vocab, threads):
    mg = dict(cfg.get("maskgen", {}))
    source = mg.pop("source", "procedural")
    seed = seeds["synthesis"]
    if source == "procedural":
        masks = procedural_masks(n, MaskGenConfig.from_dict(mg), seed, threads)
    elif source == "transform":
        masks = transformed_masks(n, [p[1] for p in gset], mg, seed, threads)
    else:
        raise ConfigError(f"unknown mask source {source!r}")
    sampler = TagSampler.from_dict(cfg.get("sampler"), vocab)
    sampling = cfg.get("sampler", {})
    tags = [sampler.sample(make_rng(seed, 1, i)) for i in range(n)]
    images = synthesize(adapter, sched, masks, tags, int(sampling.get("substeps", 50)),
                        float(sampling.get("eta", 0.0)), seed, threads)
    return list(zip(images, masks)), tags


@_stage("segmentation")
def _segment(real, synth, test, sizes, cfg, seg_seeds, threads):
    section = dict(cfg.get("segmentation", {}))
    threshold = float(section.pop("threshold", 0.5))
    rows = []
    for seed in seg_seeds:
        tcfg = TrainConfig.from_dict(section, seed=seed)
        for n in sizes:
            model = train_segmenter(build_augmented(real, synth, n), tcfg)
            dsc = evaluate_dsc(model, test, threshold, threads)
            log.info("n_synth=%d seed=%d dsc=%.4f", n, seed, dsc)
            rows.append({"n_synth": int(n), "seed": int(seed), "dsc": dsc})
    return rows


def _seeds(cfg):
    s = {"data": 0, "split": 0, "denoiser": 0, "adapter": 0, "synthesis": 0,
         "segmentation": [0]}
    s.update(cfg.get("seeds", {}))
    if isinstance(s["segmentation"], int):
        s["segmentation"] = [s["segmentation"]]
    return s


def summarize(rows):
    out = []
    for n in sorted({r["n_synth"] for r in rows}):
        vals = [r["dsc"] for r in rows if r["n_synth"] == n]
        out.append({"n_synth": n, "median_dsc": statistics.median(vals),
                    "mean_dsc": statistics.fmean(vals), "runs": len(vals)})
    return out


def run_experiment(config, out_dir=None, threads=1):
    """Split, train backbone and adapter, synthesize, then train/evaluate a
    segmenter per synthetic-set size and seed. Returns the report dict.
    """
    cfg = load_experiment_config(config)
    seeds = _seeds(cfg)
    sizes = sorted({int(n) for n in cfg["sizes"]} | {0})
    if min(sizes) < 0:
        raise ConfigError("sizes must be >= 0")
    vocab = Vocabulary.from_dict(cfg.get("adapter", {}).get("vocabulary"))
    sched = _stage("schedule")(schedule_from_config)(cfg.get("schedule"))

    gset, sset = _load_data(cfg, seeds, vocab, threads)
    split = _split(sset, cfg, seeds)
    real = [sset[i][:2] for i in split.train]
    test = [sset[i][:2] for i in split.test]

    synth, tags = [], []
    backbone = adapter = None
    n_max = max(sizes)
    if n_max > 0:
        backbone = _backbone(gset, sched, cfg, seeds)
        adapter = _adapter(backbone, gset, sched, cfg, seeds, vocab)
        synth, tags = _synthesize(adapter, sched, gset, n_max, cfg, seeds, vocab, threads)

    rows = _segment(real, synth, test, sizes, cfg, seeds["segmentation"], threads)
    report = {
        "rows": rows,
        "summary": summarize(rows),
        "sizes": {"generation": len(gset), "train": len(split.train), "val": len(split.val),
                  "test": len(split.test)},
        "schedule": sched.fingerprint(),
    }
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        if backbone is not None:
            save_denoiser(backbone, out / "backbone.npz")
            save_adapter(adapter, out / "adapter.npz")
            write_pairs(out / "synthetic", [s[0] for s in synth], [s[1] for s in synth], tags)
        with open(out / "report.json", "w", encoding="utf-8") as fh:
            json.dump(report, fh, indent=2, sort_keys=True)
            fh.write("\n")
    return report
