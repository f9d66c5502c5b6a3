import json

import numpy as np
import pytest

from attnprune.attention import MitigationSchedule
from attnprune.errors import DivergenceError, FormatError, InvalidInputError, InvalidStateError
from attnprune.netgraph import attach_attention, build_architecture, forward, freeze_base, load_model
from attnprune.pipeline import (
    AugmentFlags,
    TrainConfig,
    accuracy,
    attention_schedule,
    augment,
    collect_stats,
    decode_cifar10,
    encode_cifar10,
    evaluate,
    finetune,
    load_cifar10_binary,
    load_config,
    make_synth_dataset,
    nearest_template,
    run_all,
    train_attention,
    train_base,
)
from attnprune.surgery import detach_attention


@pytest.fixture(scope="module")
def small():
    return make_synth_dataset(0, 128, 4, (16, 16), noise=0.5)


def _tiny(seed=0):
    return build_architecture("tiny_cnn", seed=seed)


# --- data -------------------------------------------------------------------


def test_synthetic_is_deterministic_and_balanced():
    a = make_synth_dataset(7, 103, 4)
    b = make_synth_dataset(7, 103, 4)
    np.testing.assert_array_equal(a.images, b.images)
    np.testing.assert_array_equal(a.labels, b.labels)
    assert sorted(np.bincount(a.labels)) == [25, 26, 26, 26]
    assert not np.array_equal(make_synth_dataset(8, 103, 4).images, a.images)


def test_splits_share_templates_but_not_samples():
    tr = make_synth_dataset(3, 40, 4, split="train")
    te = make_synth_dataset(3, 40, 4, split="test")
    np.testing.assert_array_equal(tr.templates, te.templates)
    assert not np.array_equal(tr.images, te.images)


def test_noise_free_data_is_template_separable():
    d = make_synth_dataset(1, 200, 6, noise=0.0)
    assert (nearest_template(d) == d.labels).mean() == 1.0


def test_synthetic_rejects_tiny_n():
    with pytest.raises(InvalidInputError):
        make_synth_dataset(0, 3, 4)


def _fake_cifar(n, seed=0):
    rng = np.random.default_rng(seed)
    rec = rng.integers(0, 256, size=(n, 3073), dtype=np.uint8)
    rec[:, 0] = rng.integers(0, 10, n)
    return rec.tobytes()


def test_cifar_round_trip(tmp_path):
    raw = _fake_cifar(5)
    d = decode_cifar10(raw)
    assert d.images.shape == (5, 3, 32, 32) and d.num_classes == 10
    assert encode_cifar10(d) == raw
    for i in range(1, 3):
        (tmp_path / f"data_batch_{i}.bin").write_bytes(_fake_cifar(2, i))
    (tmp_path / "test_batch.bin").write_bytes(raw)
    assert len(load_cifar10_binary(tmp_path, "train")) == 4
    np.testing.assert_array_equal(load_cifar10_binary(tmp_path, "test").labels, d.labels)


def test_cifar_format_errors(tmp_path):
    with pytest.raises(FormatError):
        decode_cifar10(b"\x00" * 3072)
    bad = bytearray(_fake_cifar(3))
    bad[3073] = 255
    with pytest.raises(FormatError, match="record 1"):
        decode_cifar10(bytes(bad))
    with pytest.raises(FormatError):
        load_cifar10_binary(tmp_path, "train")


def test_augment_identity_flip_and_crop():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(6, 3, 8, 8))
    np.testing.assert_array_equal(augment(x, AugmentFlags(), rng), x)
    flipped = augment(x, AugmentFlags(hflip=True), np.random.default_rng(1))
    for i in range(6):
        assert np.array_equal(flipped[i], x[i]) or np.array_equal(flipped[i], x[i, :, :, ::-1])
    # the same coins flip the same samples back
    np.testing.assert_array_equal(augment(flipped, AugmentFlags(hflip=True), np.random.default_rng(1)), x)
    assert augment(x, AugmentFlags(crop=6), rng).shape == (6, 3, 6, 6)
    padded = augment(x, AugmentFlags(crop=8, pad=2), rng)
    assert padded.shape == x.shape
    with pytest.raises(InvalidInputError):
        augment(x, AugmentFlags(crop=9), rng)


# --- training ---------------------------------------------------------------


def test_zero_lr_leaves_parameters_unchanged(small):
    g = _tiny()
    train_base(g, small, TrainConfig(epochs=1, lr=0.0, momentum=0.0))
    # BN running statistics move; learnable tensors must not
    ref = _tiny()
    for a, b in zip(g.base_parameters(), ref.base_parameters()):
        np.testing.assert_array_equal(a.data, b.data)


def test_training_is_bitwise_reproducible(small, tmp_path):
    logs, sums = [], []
    for _ in range(2):
        g = _tiny()
        logs.append(train_base(g, small, TrainConfig(epochs=2, lr=0.05, seed=3)).losses)
        sums.append(g.checksum())
    assert logs[0] == logs[1] and sums[0] == sums[1]


def test_training_reduces_loss():
    d = make_synth_dataset(2, 256, 4, noise=0.3)
    log = train_base(_tiny(), d, TrainConfig(epochs=6, lr=0.05))
    assert np.mean(log.losses[-4:]) < np.mean(log.losses[:4]) * 0.7


def test_lr_decay_schedule(small):
    cfg = TrainConfig(epochs=5, lr=0.1, decay_every=2, lr_decay=0.1)
    log = train_base(_tiny(), small, cfg)
    np.testing.assert_allclose(log.epoch_lr, [0.1, 0.1, 0.01, 0.01, 0.001])


def test_divergence_is_reported(small):
    g = _tiny()
    g.layer("fc").params["weight"].data[:] = np.nan
    with pytest.raises(DivergenceError):
        train_base(g, small, TrainConfig(epochs=1))


def _instrumented(seed=0, **kw):
    g = _tiny(seed)
    attach_attention(g, rng=np.random.default_rng(seed), **kw)
    freeze_base(g)
    return g


def test_attention_training_keeps_base_frozen(small):
    g = _instrumented(bn_gamma_init=0.1)
    before = g.checksum()
    cfg = TrainConfig(epochs=2, lr=0.05, decay_every=1)
    sched = attention_schedule(cfg, len(small), 0.06)
    log = train_attention(g, small, cfg, sched)
    assert g.checksum() == before
    assert log.alphas[0] == 0.0 and log.alphas[-1] == pytest.approx(0.06)
    assert sched.warmup_steps == cfg.steps_per_epoch(len(small))


def test_attention_training_preconditions(small):
    g = _tiny()
    cfg = TrainConfig(epochs=1)
    with pytest.raises(InvalidStateError):
        train_attention(g, small, cfg, MitigationSchedule(0.06, 1))
    attach_attention(g)
    with pytest.raises(InvalidStateError):
        train_attention(g, small, cfg, MitigationSchedule(0.06, 1))
    freeze_base(g)
    with pytest.raises(InvalidInputError):
        train_attention(g, small, cfg, MitigationSchedule(0.06, 10_000))
    with pytest.raises(InvalidStateError):
        train_base(g, small, cfg)
    with pytest.raises(InvalidStateError):
        finetune(g, small, cfg)


def test_untrained_attention_is_identity(small):
    g = _instrumented()
    train_attention(g, small, TrainConfig(epochs=0), MitigationSchedule(0.0, 0))
    plain = g.copy()
    detach_attention(plain)
    x = small.images[:16]
    np.testing.assert_allclose(forward(g, x, alpha=0.0).data, forward(plain, x).data, atol=1e-5)


def test_stats_are_distributions_and_deterministic(small):
    g = _instrumented()
    cfg = TrainConfig(epochs=1, lr=0.05)
    train_attention(g, small, cfg, attention_schedule(cfg, len(small), 0.06))
    a = collect_stats(g, small, 0.06)
    b = collect_stats(g, small, 0.06, batch_size=50)
    assert a.sample_count == len(small)
    for lid, m in a.means().items():
        assert abs(m.sum() - 1.0) < 1e-9
        np.testing.assert_allclose(m, b.means()[lid], rtol=0, atol=1e-12)
    pc = a.per_class()
    assert pc["conv3"].shape == (4, 16)


def test_evaluate_and_accuracy(small):
    g = _tiny()
    res = evaluate(g, small)
    assert set(res) == {"top1"} and 0 <= res["top1"] <= 1
    logits = np.random.default_rng(0).normal(size=(50, 10))
    labels = np.random.default_rng(1).integers(0, 10, 50)
    acc = accuracy(logits, labels)
    assert acc["top5"] >= acc["top1"]
    assert accuracy(np.eye(3), [0, 1, 2]) == {"top1": 1.0}


def test_config_rejects_unknown_keys(tmp_path):
    assert load_config(seed=4)["seed"] == 4
    with pytest.raises(InvalidInputError):
        load_config(overrides={"bogus": 1})
    (tmp_path / "c.json").write_text("{not json")
    with pytest.raises(FormatError):
        load_config(tmp_path / "c.json")


def test_run_all_two_step_fc_pruning(tmp_path):
    cfg = load_config(overrides={
        "dataset": {"n_train": 200, "n_test": 100},
        "base": {"epochs": 1},
        "attention": {"epochs": 2, "decay_every": 1},
        "finetune": {"epochs": 1},
        "fc_two_step": {"r": 0.25},
    })
    manifest = run_all(cfg, tmp_path)
    assert {"fc_masks.json", "fc_stats.json", "fc_surgery_report.json"} <= set(manifest["artifacts"])
    metrics = json.loads((tmp_path / "metrics.json").read_text())
    assert 0 < metrics["fc_achieved_ratio"] <= 0.5 and "pruned_fc" in metrics
    assert load_model(tmp_path / "pruned.model").layer("fc").in_channels < 32
