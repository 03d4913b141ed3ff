import numpy as np
import pytest

from gradcheck import max_rel_error, sample_coords
from lesionaug.errors import ConfigError
from lesionaug.optim import TrainConfig
from lesionaug.segharness import (SegModelParams, build_augmented, evaluate_dsc, forward,
                                  init_segmenter, load_segmenter, save_segmenter, seg_loss,
                                  soft_dice_loss, train_segmenter)


def test_soft_dice_examples():
    g = np.zeros((10, 10))
    g.flat[:50] = 1
    loss, _ = soft_dice_loss(1 - g, g, 1.0)
    assert loss == pytest.approx(1 - 1 / 101, abs=1e-15)
    perfect, _ = soft_dice_loss(g, g, 1.0)
    assert 0 <= perfect <= 1.0 / (2 * 50 + 1)
    with pytest.raises(ConfigError):
        soft_dice_loss(np.zeros(3), np.zeros(4))


def test_soft_dice_gradient(rng):
    for _ in range(3):
        p = rng.uniform(0.01, 0.99, size=(12, 12))
        g = (rng.uniform(size=p.shape) < 0.3).astype(float)
        _, grad = soft_dice_loss(p, g)
        arrays = {"p": p}
        coords = sample_coords(arrays, 100, rng)
        err = max_rel_error(lambda: soft_dice_loss(p, g)[0], arrays, {"p": grad}, coords)
        assert err < 1e-4


def test_soft_dice_range_and_monotonicity(rng):
    g = (rng.uniform(size=(8, 8)) < 0.5).astype(float)
    p = rng.uniform(0.01, 0.99, size=g.shape)
    loss, _ = soft_dice_loss(p, g)
    assert 0 <= loss < 1
    # moving mass from background into foreground keeps the marginal sum and raises overlap
    q = p.copy()
    fg, bg = np.flatnonzero(g)[0], np.flatnonzero(1 - g)[0]
    delta = min(0.5 * (1 - q.flat[fg]), 0.5 * q.flat[bg])
    q.flat[fg] += delta
    q.flat[bg] -= delta
    assert soft_dice_loss(q, g)[0] < loss


def test_model_gradient(rng):
    params = init_segmenter(2, seed=4)
    for k in params.arrays:
        if k.startswith("b"):
            params.arrays[k] = 0.1 * rng.standard_normal(params.arrays[k].shape)
    x = rng.uniform(size=(3, 7, 7, 2))
    m = (rng.uniform(size=(3, 7, 7)) < 0.4).astype(float)
    _, grads = seg_loss(params, x, m)
    coords = sample_coords(params.arrays, 150, rng)
    err = max_rel_error(lambda: seg_loss(params, x, m)[0], params.arrays, grads, coords)
    assert err < 1e-4


def test_forward_shape():
    p, _ = forward(init_segmenter(3), np.zeros((2, 9, 5, 3)))
    assert p.shape == (2, 9, 5)


def _identity_model(sharpness=20.0):
    a = {}
    for k, (cin, cout) in zip("123", ((1, 8), (8, 8), (8, 1))):
        a["w" + k] = np.zeros((cin, 3, 3, cout))
        a["b" + k] = np.zeros(cout)
        a["w" + k][0, 1, 1, 0] = 1.0
    a["w3"][0, 1, 1, 0] = sharpness
    a["b3"][0] = -sharpness / 2
    return SegModelParams(a)


def test_evaluate_dsc_examples():
    m1 = np.zeros((6, 6))
    m1[1:4, 1:4] = 1
    perfect = [(m1[..., None], m1)]
    assert evaluate_dsc(_identity_model(), perfect) == 1.0
    silent = _identity_model()
    silent.arrays["w3"][:] = 0
    assert evaluate_dsc(silent, perfect) == 0.0
    # second image: prediction {a, b} vs truth {b, c} -> dice 0.5
    img2 = np.zeros((6, 6))
    img2[0, 0] = img2[0, 1] = 1
    m2 = np.zeros((6, 6))
    m2[0, 1] = m2[0, 2] = 1
    two = [(m1[..., None], m1), (img2[..., None], m2)]
    assert evaluate_dsc(_identity_model(), two) == 0.75
    assert evaluate_dsc(_identity_model(), two[::-1], threads=2) == 0.75
    with pytest.raises(ConfigError):
        evaluate_dsc(_identity_model(), [])
    with pytest.raises(ConfigError):
        evaluate_dsc(_identity_model(), two, threshold=1.0)


def test_evaluate_dsc_order_invariant(rng):
    params = init_segmenter(1, seed=1)
    data = [(rng.uniform(size=(8, 8, 1)), (rng.uniform(size=(8, 8)) < 0.5).astype(np.uint8))
            for _ in range(9)]
    perm = [data[i] for i in rng.permutation(9)]
    assert evaluate_dsc(params, data) == evaluate_dsc(params, perm, threads=4)


def test_build_augmented():
    real = [("r", i) for i in range(700)]
    synth = [("s", i) for i in range(1000)]
    assert len(build_augmented(real, synth, 1000).pairs) == 1700
    assert build_augmented(real, synth, 0).pairs == real
    assert build_augmented(real, synth, 3).pairs[-3:] == synth[:3]
    with pytest.raises(ConfigError):
        build_augmented(real, synth, 1001)


def _disk_pairs(n, seed, size=16):
    r = np.random.default_rng(seed)
    out = []
    yy, xx = np.indices((size, size))
    for _ in range(n):
        cy, cx, rad = r.uniform(5, size - 5), r.uniform(5, size - 5), r.uniform(2.5, 4.5)
        m = ((yy - cy) ** 2 + (xx - cx) ** 2 <= rad * rad).astype(np.uint8)
        img = 0.2 + 0.6 * m + 0.05 * r.standard_normal(m.shape)
        out.append((np.clip(img, 0, 1)[..., None], m))
    return out


def test_zero_lr_and_determinism():
    data = build_augmented(_disk_pairs(6, 0), _disk_pairs(4, 1), 2)
    init = init_segmenter(1, seed=0)
    frozen = train_segmenter(data, TrainConfig(learning_rate=0.0, batch_size=3, epochs=2),
                             init=init)
    assert frozen.equals(init)
    cfg = TrainConfig(batch_size=3, epochs=5, seed=2)
    assert train_segmenter(data, cfg).equals(train_segmenter(data, cfg))


def test_training_improves_dsc_and_round_trips(tmp_path):
    pairs = _disk_pairs(8, 3)
    data = build_augmented(pairs, [], 0)
    cfg = TrainConfig(learning_rate=1e-2, batch_size=8, epochs=150, seed=0)
    hist = []
    model = train_segmenter(data, cfg, history=hist)
    assert hist[-1] < hist[0]
    assert evaluate_dsc(model, pairs) > evaluate_dsc(init_segmenter(1, 0), pairs)
    save_segmenter(model, tmp_path / "s.npz")
    assert load_segmenter(tmp_path / "s.npz").equals(model)
