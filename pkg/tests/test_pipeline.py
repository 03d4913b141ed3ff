import json

import numpy as np
import pytest

from lesionaug.control import init_adapter, save_adapter, train_adapter
from lesionaug.datacore import load_mask, read_manifest, save_mask
from lesionaug.diffusion import save_denoiser, train_denoiser
from lesionaug.errors import ConfigError, StageError
from lesionaug.maskgen import label_components
from lesionaug.optim import TrainConfig
from lesionaug.pipeline import SynthesisJob, run_experiment, summarize, synthesize_pairs
from lesionaug.schedule import make_linear_schedule
from lesionaug.toy import TOY_MASKGEN, make_toy_pairs

SCHED_CFG = {"T": 50, "beta_start": 0.002, "beta_end": 0.3}
FAST = {"learning_rate": 1e-2, "batch_size": 32, "epochs": 20}


@pytest.fixture(scope="module")
def artifacts(tmp_path_factory):
    root = tmp_path_factory.mktemp("artifacts")
    sched = make_linear_schedule(**SCHED_CFG)
    pairs = make_toy_pairs(40, 0)
    backbone = train_denoiser([p[0] for p in pairs], sched, TrainConfig(**FAST))
    adapter = train_adapter(init_adapter(backbone, {}, 0), pairs, sched, TrainConfig(**FAST))
    save_denoiser(backbone, root / "backbone.npz")
    save_adapter(adapter, root / "adapter.npz")
    return root


def _job(artifacts, out, **kw):
    base = dict(adapter_path=str(artifacts / "adapter.npz"),
                backbone_path=str(artifacts / "backbone.npz"), out_dir=str(out), n=1, seed=4,
                schedule=SCHED_CFG, maskgen=TOY_MASKGEN, substeps=10)
    base.update(kw)
    return SynthesisJob(**base)


def test_synthesis_is_deterministic(artifacts, tmp_path):
    e1 = synthesize_pairs(_job(artifacts, tmp_path / "a"))
    e2 = synthesize_pairs(_job(artifacts, tmp_path / "b"))
    assert e1 == e2
    for name in ("images/img_00000.png", "masks/mask_00000.png", "manifest.jsonl"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_mask_directory_order(artifacts, tmp_path):
    mdir = tmp_path / "masks_in"
    for i, name in enumerate(["c.png", "a.png", "b.png"]):
        m = np.zeros((32, 32), dtype=np.uint8)
        m[4 + 6 * i:8 + 6 * i, 10:14] = 1
        save_mask(m, mdir / name)
    out = tmp_path / "out"
    entries = synthesize_pairs(_job(artifacts, out, n=3, maskgen=None, mask_dir=str(mdir)))
    for e, name in zip(entries, ["a.png", "b.png", "c.png"]):
        np.testing.assert_array_equal(load_mask(out / e.mask_path), load_mask(mdir / name))


def test_job_validation(artifacts, tmp_path):
    with pytest.raises(ConfigError):
        _job(artifacts, tmp_path, mask_dir=str(tmp_path))
    with pytest.raises(ConfigError):
        _job(artifacts, tmp_path, n=0)


def test_hundred_pair_toy_job(artifacts, tmp_path):
    out = tmp_path / "job"
    entries = synthesize_pairs(_job(artifacts, out, n=100, substeps=20, threads=4))
    assert len(read_manifest(out / "manifest.jsonl")) == 100 == len(entries)
    for e in entries:
        m = load_mask(out / e.mask_path)
        assert m.shape == (32, 32)
        assert label_components(m)[0] == 1
    assert any(e.lesion_type == "" and not e.attributes for e in entries)


def _experiment(sizes, **extra):
    cfg = {
        "schedule": SCHED_CFG,
        "denoiser": {"train": FAST},
        "adapter": {"train": FAST},
        "data": {"source": "toy", "n_generation": 30, "n_segmentation": 24},
        "split": {"ratio": [1, 1, 2]},
        "maskgen": dict(TOY_MASKGEN),
        "sampler": {"substeps": 5},
        "segmentation": {"learning_rate": 1e-2, "batch_size": 8, "epochs": 5},
        "sizes": sizes,
        "seeds": {"segmentation": [0, 1]},
    }
    cfg.update(extra)
    return cfg


def test_baseline_only_experiment():
    report = run_experiment(_experiment([0]))
    assert {r["n_synth"] for r in report["rows"]} == {0}
    assert len(report["rows"]) == 2
    assert report["sizes"] == {"generation": 30, "train": 6, "val": 6, "test": 12}


def test_experiment_rows_and_determinism(tmp_path):
    cfg = _experiment([10])
    a = run_experiment(cfg, tmp_path / "a", threads=1)
    b = run_experiment(cfg, tmp_path / "b", threads=4)
    assert a == b
    assert sorted({r["n_synth"] for r in a["rows"]}) == [0, 10]
    assert all(0 <= r["dsc"] <= 1 for r in a["rows"])
    assert (tmp_path / "a" / "report.json").read_bytes() == \
        (tmp_path / "b" / "report.json").read_bytes()
    assert json.loads((tmp_path / "a" / "report.json").read_text())["rows"] == a["rows"]
    assert len(read_manifest(tmp_path / "a" / "synthetic" / "manifest.jsonl")) == 10


def test_experiment_transform_mask_source():
    cfg = _experiment([6], maskgen={"source": "transform", "rotate": 90, "scale": [0.9, 1.1]})
    report = run_experiment(cfg)
    assert len(report["rows"]) == 4


def test_stage_failures_name_the_stage():
    with pytest.raises(StageError, match="split"):
        run_experiment(_experiment([0], split={"ratio": [1, 0, 1]}))
    with pytest.raises(StageError, match="data"):
        run_experiment(_experiment([0], data={"source": "manifest", "path": "/nonexistent.jsonl"}))
    with pytest.raises(ConfigError):
        run_experiment(_experiment([], ))
    with pytest.raises(ConfigError):
        run_experiment(dict(_experiment([0]), extra={}))


def test_summarize_medians():
    rows = [{"n_synth": 0, "seed": s, "dsc": d} for s, d in enumerate([0.2, 0.9, 0.5])]
    [row] = summarize(rows)
    assert row["median_dsc"] == 0.5 and row["runs"] == 3
