"""Command-line entry point: ``lesionaug <command> [flags]``.

Exit codes: 0 success, 1 usage/config error, 2 runtime/data error. Failures
print one JSON line ``{"error": ..., "message": ..., "exit": ...}`` to stderr.
"""

import argparse
import json
import logging
import sys
from pathlib import Path

from . import control, datacore, diffusion, maskgen, metrics, pipeline, segharness
from .errors import ConfigError, LesionAugError, StageError
from .optim import TrainConfig
from .schedule import schedule_from_config

log = logging.getLogger("lesionaug")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        _emit_error("UsageError", message, 1)
        sys.exit(1)


def _emit_error(kind, message, code):
    print(json.dumps({"error": kind, "message": str(message), "exit": code}), file=sys.stderr)


def _read_config(path):
    if path is None:
        return {}
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc


def _write_json(obj, path):
    text = json.dumps(obj, indent=2, sort_keys=True) + "\n"
    if path is None:
        sys.stdout.write(text)
    else:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text, encoding="utf-8")


def cmd_maskgen(args):
    cfg = _read_config(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    if cfg.get("source") == "transform":
        spec = dict(cfg)
        spec.pop("source")
        mask_dir = spec.pop("mask_dir")
        base = [datacore.load_mask(p) for p in sorted(Path(mask_dir).glob("*.png"))]
        masks = pipeline.transformed_masks(args.n, base, spec, args.seed, args.threads)
        for i, m in enumerate(masks):
            name = f"mask_{i:05d}.png"
            datacore.save_mask(m, out / name)
            rows.append({"file": name, "source_index": i % len(base), "seed": args.seed})
    else:
        cfg.pop("source", None)
        mg = maskgen.MaskGenConfig.from_dict(cfg)
        for i, g in enumerate(maskgen.gen_batch(args.n, mg, args.seed, args.threads)):
            name = f"mask_{i:05d}.png"
            datacore.save_mask(g.mask, out / name)
            rows.append(dict(g.metadata(), file=name, config_fingerprint=mg.fingerprint()))
    with open(out / "metadata.jsonl", "w", encoding="utf-8") as fh:
        for r in rows:
            fh.write(json.dumps(r, sort_keys=True) + "\n")
    log.info("wrote %d masks to %s", len(rows), out)


def cmd_train_diffusion(args):
    cfg = _read_config(args.config)
    sched = schedule_from_config(cfg.get("schedule"))
    tcfg = TrainConfig.from_dict(cfg.get("train"), seed=args.seed)
    images = [p[0] for p in datacore.load_pairs(args.data)]
    history = []
    den = diffusion.train_denoiser(images, sched, tcfg, history=history)
    out = Path(args.out)
    diffusion.save_denoiser(den, out / "backbone.npz")
    _write_json({"epoch_loss": history}, out / "history.json")


def _triples(manifest, vocab):
    return [(img, m, control.PromptTags(e.lesion_type, e.attributes))
            for img, m, e in datacore.load_pairs(manifest, vocab)]


def cmd_train_adapter(args):
    cfg = _read_config(args.config)
    sched = schedule_from_config(cfg.get("schedule"))
    spec = dict(cfg.get("adapter", {}))
    vocab = control.Vocabulary.from_dict(spec.pop("vocabulary", None))
    tcfg = TrainConfig.from_dict(cfg.get("train"), seed=args.seed)
    backbone = diffusion.load_denoiser(args.backbone, sched)
    adapter = control.init_adapter(backbone, dict(spec, vocabulary=vocab), args.seed)
    history = []
    adapter = control.train_adapter(adapter, _triples(args.data, vocab), sched, tcfg, history)
    out = Path(args.out)
    control.save_adapter(adapter, out / "adapter.npz")
    _write_json({"epoch_loss": history}, out / "history.json")


def cmd_sample(args):
    cfg = _read_config(args.config)
    maskcfg = None if args.masks else cfg.get("maskgen", {})
    job = pipeline.SynthesisJob(
        adapter_path=args.adapter, backbone_path=args.backbone, out_dir=args.out, n=args.n,
        seed=args.seed, schedule=cfg.get("schedule"), maskgen=maskcfg, mask_dir=args.masks,
        sampler=cfg.get("sampler"), substeps=int(cfg.get("substeps", 50)),
        eta=float(cfg.get("eta", 0.0)), threads=args.threads)
    for p in (args.adapter, args.backbone):
        if not Path(p).is_file():
            raise FileNotFoundError(f"missing artifact {p}")
    entries = pipeline.synthesize_pairs(job)
    log.info("wrote %d pairs to %s", len(entries), args.out)


def cmd_metrics(args):
    root = Path(args.pairs).parent
    pairs = []
    with open(args.pairs, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                d = json.loads(line)
                pairs.append((datacore.load_image(root / d["original"]),
                              datacore.load_image(root / d["generated"])))
    report = metrics.evaluate_generation(pairs, args.threads)
    if args.format == "table":
        print(report.table())
    if args.out or args.format == "json":
        _write_json(report.to_dict(), args.out)


def cmd_seg_train(args):
    cfg = _read_config(args.config)
    tcfg = TrainConfig.from_dict(cfg.get("train"), seed=args.seed)
    real = [p[:2] for p in datacore.load_pairs(args.data)]
    synth = [p[:2] for p in datacore.load_pairs(args.synthetic)] if args.synthetic else []
    n = len(synth) if args.n_synth is None else args.n_synth
    model = segharness.train_segmenter(segharness.build_augmented(real, synth, n), tcfg)
    segharness.save_segmenter(model, Path(args.out) / "segmenter.npz")


def cmd_seg_eval(args):
    model = segharness.load_segmenter(args.model)
    test = [p[:2] for p in datacore.load_pairs(args.data)]
    dsc = segharness.evaluate_dsc(model, test, args.threshold, args.threads)
    _write_json({"dsc": dsc, "n": len(test), "threshold": args.threshold}, args.out)


def cmd_experiment(args):
    report = pipeline.run_experiment(args.config, args.out, args.threads)
    if args.out is None:
        _write_json(report, None)


def build_parser():
    p = _Parser(prog="lesionaug", description="Diffusion-based lesion data augmentation toolkit.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", metavar="command")
    sub.required = True

    def add(name, fn, help_, config=True, seed=True, out=True, out_required=True):
        sp = sub.add_parser(name, help=help_)
        sp.set_defaults(func=fn)
        if config:
            sp.add_argument("--config", help="JSON config file")
        if seed:
            sp.add_argument("--seed", type=int, default=0)
        if out:
            sp.add_argument("--out", required=out_required, help="output directory or file")
        sp.add_argument("--threads", type=int, default=1,
                        help="worker cap; results do not depend on it")
        return sp

    sp = add("maskgen", cmd_maskgen, "generate lesion masks")
    sp.add_argument("--n", type=int, required=True)

    sp = add("train-diffusion", cmd_train_diffusion, "train the backbone denoiser")
    sp.add_argument("--data", required=True, help="manifest (JSON Lines)")

    sp = add("train-adapter", cmd_train_adapter, "train the conditioning adapter")
    sp.add_argument("--data", required=True)
    sp.add_argument("--backbone", required=True)

    sp = add("sample", cmd_sample, "synthesize (image, mask, tags) pairs")
    sp.add_argument("--backbone", required=True)
    sp.add_argument("--adapter", required=True)
    sp.add_argument("--n", type=int, required=True)
    sp.add_argument("--masks", help="directory of PNG masks (default: procedural)")

    sp = add("metrics", cmd_metrics, "MSE/PSNR/SSIM over image pairs", config=False,
             seed=False, out_required=False)
    sp.add_argument("--pairs", required=True, help="JSON Lines of {original, generated}")
    sp.add_argument("--format", choices=("json", "table"), default="json")

    sp = add("seg-train", cmd_seg_train, "train a segmenter")
    sp.add_argument("--data", required=True)
    sp.add_argument("--synthetic", help="manifest of synthetic pairs")
    sp.add_argument("--n-synth", type=int)

    sp = add("seg-eval", cmd_seg_eval, "mean DSC of a segmenter", config=False, seed=False,
             out_required=False)
    sp.add_argument("--model", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--threshold", type=float, default=0.5)

    add("experiment", cmd_experiment, "run the augmentation experiment", seed=False,
        out_required=False)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
    if args.command == "experiment" and not args.config:
        parser.error("experiment requires --config")
    try:
        args.func(args)
    except (ConfigError, ValueError, json.JSONDecodeError) as exc:
        _emit_error(type(exc).__name__, exc, 1)
        return 1
    except (LesionAugError, OSError, KeyError) as exc:
        code = 1 if isinstance(exc, StageError) and isinstance(exc.cause, ValueError) else 2
        _emit_error(type(exc).__name__, exc, code)
        return code
    return 0


if __name__ == "__main__":
    sys.exit(main())
