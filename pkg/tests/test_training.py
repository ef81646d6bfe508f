import math

import numpy as np
import pytest
from scipy import ndimage

from spformer import ops
from spformer.checkpoint import load_checkpoint
from spformer.model import ConfigError, SPFormer, forward_classify, variant_config
from spformer.tensor import NumericError, Tensor
from spformer.training import (
    OptimState,
    SynthDataset,
    TrainConfig,
    TrainingAborted,
    adamw_step,
    cosine_lr,
    parse_run_config,
    synth_generate,
    train,
)

FAST = TrainConfig(epochs=2, batch_size=8, lr=1e-3, warmup_epochs=1)


@pytest.fixture(scope="module")
def tiny():
    data = synth_generate(24, 32, 32, classes=3, seed=4)
    return data.subset(slice(0, 16)), data.subset(slice(16, 24))


def small_config():
    return variant_config("toy", image_size=32, channels=16, depth=2, sca_positions=(0, 1))


def test_synth_is_deterministic_and_balanced():
    a = synth_generate(40, seed=7)
    b = synth_generate(40, seed=7)
    assert a.images.tobytes() == b.images.tobytes()
    assert np.array_equal(a.masks, b.masks) and np.array_equal(a.labels, b.labels)
    big = synth_generate(1000, 16, 16, classes=4, seed=1)
    assert np.all(np.abs(np.bincount(big.labels) - 250) <= 25)


def test_synth_masks_are_connected_and_large_enough():
    data = synth_generate(200, seed=3, classes=8)
    for m in data.masks:
        _, n = ndimage.label(m)
        assert n == 1
        assert m.mean() >= 0.05
        assert m.shape == (64, 64)
    with pytest.raises(ValueError):
        synth_generate(4, classes=1)


def test_dataset_save_load(tmp_path, tiny):
    train_set, _ = tiny
    train_set.save(tmp_path / "d")
    back = SynthDataset.load(tmp_path / "d")
    assert back.images.tobytes() == train_set.images.tobytes()
    assert np.array_equal(back.masks, train_set.masks) and np.array_equal(back.labels, train_set.labels)


def reference_adamw(w, grads, lr, wd, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    for t, g in enumerate(grads, 1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        w = w * (1 - lr * wd) - lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
    return w


def test_adamw_matches_scalar_reference():
    rng = np.random.default_rng(0)
    grads = rng.standard_normal(100)
    from spformer.tensor import precision
    with precision(np.float64):
        p = {"w": Tensor(np.full((1, 1), 0.7), requires_grad=True)}
    state = OptimState.for_params(p, weight_decay=0.1)
    for g in grads:
        adamw_step(p, {"w": np.full((1, 1), g)}, state, 0.01)
    assert abs(p["w"].data[0, 0] - reference_adamw(0.7, grads, 0.01, 0.1)) < 1e-6


def test_adamw_first_step_and_zero_grads():
    p = {"b": Tensor([1.0], requires_grad=True)}
    state = OptimState.for_params(p, weight_decay=0.0)
    adamw_step(p, {"b": np.array([1.0])}, state, 0.1)
    assert p["b"].data[0] == pytest.approx(0.9, abs=1e-6)
    q = {"w": Tensor(np.ones((2, 2)), requires_grad=True)}
    st = OptimState.for_params(q, weight_decay=0.0)
    adamw_step(q, {"w": np.zeros((2, 2))}, st, 0.1)
    assert np.all(q["w"].data == 1.0)
    with pytest.raises(NumericError):
        adamw_step(q, {"w": np.full((2, 2), np.nan)}, st, 0.1)


def test_weight_decay_skips_vectors():
    p = {"w": Tensor(np.ones((2, 2)), requires_grad=True), "b": Tensor(np.ones(2), requires_grad=True)}
    state = OptimState.for_params(p, weight_decay=0.5)
    adamw_step(p, {"w": np.zeros((2, 2)), "b": np.zeros(2)}, state, 0.1)
    assert np.allclose(p["w"].data, 0.95) and np.all(p["b"].data == 1.0)


def test_cosine_schedule():
    assert cosine_lr(10, 10, 110, 1.0) == 1.0
    assert cosine_lr(110, 10, 110, 1.0) == 0.0
    assert cosine_lr(60, 10, 110, 1.0) == pytest.approx(0.5)
    assert cosine_lr(5, 10, 110, 1.0) == pytest.approx(0.5)
    with pytest.raises(ValueError):
        cosine_lr(111, 10, 110, 1.0)


def test_zero_epochs_returns_initial_model(tiny):
    res = train(small_config(), tiny[0], tiny[1], TrainConfig(epochs=0, seed=3))
    assert res.log == []
    fresh = SPFormer(small_config().replace(num_classes=3), seed=3)
    for k, p in fresh.params.items():
        assert np.array_equal(p.data, res.model.params[k].data)


def test_training_is_deterministic_and_writes_artifacts(tmp_path, tiny):
    cfg = TrainConfig(epochs=2, batch_size=8, checkpoint_every=1, seed=5)
    a = train(small_config(), tiny[0], tiny[1], cfg, out_dir=tmp_path / "a")
    b = train(small_config(), tiny[0], tiny[1], cfg, out_dir=tmp_path / "b")
    assert a.log == b.log and len(a.log) == 2
    assert a.log[0].startswith("epoch=1 train_acc=")
    assert (tmp_path / "a" / "metrics.log").read_text() == (tmp_path / "b" / "metrics.log").read_text()
    assert (tmp_path / "a" / "final.spx").read_bytes() == (tmp_path / "b" / "final.spx").read_bytes()
    assert (tmp_path / "a" / "epoch001.spx").exists()
    loaded = load_checkpoint(tmp_path / "a" / "final.spx")
    assert loaded.meta["epoch"] == "2"


def test_loss_descends_on_fixed_batch():
    data = synth_generate(16, 32, 32, classes=4, seed=9)
    drops = []
    for seed in range(5):
        model = SPFormer(small_config(), seed=seed)
        from spformer.training import OptimState as S
        state = S.for_params(model.params, 0.0)
        x = Tensor(data.float_images())
        losses = []
        for _ in range(10):
            loss = ops.cross_entropy(forward_classify(x, model.config, model.params), data.labels)
            for p in model.params.values():
                p.zero_grad()
            loss.backward()
            adamw_step(model.params, {k: p.grad for k, p in model.params.items()}, state, 1e-3)
            losses.append(float(loss.data))
        drops.append(all(b < a for a, b in zip(losses, losses[1:])))
    assert np.median(drops) == 1


def test_nan_aborts_with_last_good_checkpoint(tmp_path, tiny, monkeypatch):
    import spformer.training as tr
    calls = {"n": 0}
    real = tr.adamw_step

    def poisoned(params, grads, state, lr):
        calls["n"] += 1
        if calls["n"] == 3:
            grads = {k: np.full_like(g, np.nan) for k, g in grads.items()}
        return real(params, grads, state, lr)

    monkeypatch.setattr(tr, "adamw_step", poisoned)
    with pytest.raises(TrainingAborted) as info:
        train(small_config(), tiny[0], tiny[1], TrainConfig(epochs=3, batch_size=8), out_dir=tmp_path)
    assert info.value.checkpoint is not None and info.value.checkpoint.exists()
    good = load_checkpoint(info.value.checkpoint)
    assert good.meta["epoch"] == "1"
    assert all(np.isfinite(p.data).all() for p in good.params.values())


def test_run_config_parsing():
    mcfg, tcfg = parse_run_config("variant=toy\nchannels=16\nepochs=3  # short\nlr=0.01\n")
    assert mcfg.channels == 16 and mcfg.variant == "toy"
    assert tcfg.epochs == 3 and tcfg.lr == 0.01
    with pytest.raises(ConfigError, match="f:2: unknown key"):
        parse_run_config("epochs=1\nlearning_rate=3\n", "f")


def test_random_model_is_near_chance():
    data = synth_generate(240, 32, 32, classes=4, seed=11)
    model = SPFormer(variant_config("toy", image_size=32), seed=0)
    from spformer.training import evaluate_accuracy
    acc = evaluate_accuracy(model, data.float_images(), data.labels)
    # binomial 99.9% interval around 1/4 at n=240 is roughly +-0.09
    assert abs(acc - 0.25) < 0.1
