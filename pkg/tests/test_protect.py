import numpy as np
import pytest

from keylock.blockshuffle import ShuffleConfig, shuffle_batch
from keylock.dataio import AugmentConfig, augment_batch
from keylock.keycore import derive_permutation, generate_key
from keylock.nettrain import Model
from keylock.protect import (Preprocessor, ProtectionConfig, evaluate, finetune_attack,
                             measure_overhead, run_protocol, train_protected, wrong_key_sweep)

SMALL = (("conv", 3, 8, 3, 1), ("relu",), ("maxpool", 2), ("maxpool", 2), ("flatten",),
         ("dense", 512, 10))


def small_cfg(**kw):
    base = dict(arch=SMALL, epochs=3, batch_size=64, max_lr=0.05, n_train=2000, n_test=500,
                n_forged=3, attack_sizes=(50, 200), attack_epochs=1, block_sizes=(4,))
    base.update(kw)
    return ProtectionConfig(**base)


@pytest.fixture(scope="module")
def trained(synthetic_small):
    train, test = synthetic_small
    key = generate_key(11)
    cfg = small_cfg()
    return train_protected(train, key, cfg), key, cfg


def test_bad_block_size():
    with pytest.raises(ValueError, match="block size does not divide image"):
        ProtectionConfig(block_size=5)
    with pytest.raises(ValueError, match="block size does not divide image"):
        ProtectionConfig(block_sizes=(2, 3))


def test_training_is_deterministic(synthetic_small, trained):
    train, _ = synthetic_small
    model, key, cfg = trained
    again = train_protected(train, key, cfg)
    assert np.array_equal(model.params, again.params)


def test_key_gates_accuracy(synthetic_small, trained):
    _, test = synthetic_small
    model, key, cfg = trained
    correct = evaluate(model, test, key, cfg)
    assert correct == evaluate(model, test, key, cfg)
    assert correct > 0.6
    assert evaluate(model, test, None, cfg) < correct - 0.2
    sweep = wrong_key_sweep(model, test, 3, 99, cfg)
    assert sweep.mean < correct - 0.2


def test_sweep_with_correct_key_peaks_there(synthetic_small, trained):
    _, test = synthetic_small
    model, key, cfg = trained
    sweep = wrong_key_sweep(model, test, 3, 5, cfg, extra_keys=[key])
    assert sweep.accuracies[-1] == sweep.max
    assert sweep.fingerprints[-1] == key.fingerprint()
    assert wrong_key_sweep(model, test, 3, 5, cfg).accuracies == sweep.accuracies[:3]


def test_untrained_model_is_at_chance(synthetic_small):
    train, test = synthetic_small
    cfg = small_cfg()
    big_test = train.take(np.arange(2000))
    model = Model(cfg.arch, seed=4)
    acc = evaluate(model, big_test, generate_key(1), cfg)
    # a random init can be biased towards a few classes; the balanced set caps that
    assert 0.0 <= acc <= 0.3
    with pytest.raises(ValueError, match="empty"):
        evaluate(model, test.take([]), None, cfg)


def test_zero_epoch_attack_leaves_model(synthetic_small, trained):
    train, test = synthetic_small
    model, key, cfg = trained
    before = model.params.copy()
    forged = generate_key(1234)
    adapted, acc = finetune_attack(model, train.take(np.arange(50)), forged, 0, cfg, test)
    assert np.array_equal(adapted.params, before)
    assert np.array_equal(model.params, before)
    assert acc == evaluate(model, test, forged, cfg)


def test_attack_does_not_touch_original(synthetic_small, trained):
    train, test = synthetic_small
    model, key, cfg = trained
    before = model.params.copy()
    adapted, _ = finetune_attack(model, train.take(np.arange(100)), generate_key(3), 1, cfg, test)
    assert np.array_equal(model.params, before)
    assert not np.array_equal(adapted.params, before)


def test_augment_happens_before_shuffle(rng):
    cfg = small_cfg()
    key = generate_key(2)
    prep = Preprocessor.for_key(key, cfg, train=True)
    x = rng.random((6, 3, 32, 32)).astype(np.float32)
    got = prep(x, np.random.default_rng(8))
    scfg = ShuffleConfig(4)
    perm = derive_permutation(key, scfg.vector_length)
    expected = shuffle_batch(augment_batch(x, AugmentConfig(), np.random.default_rng(8)), scfg, perm)
    assert np.array_equal(got, expected)
    with pytest.raises(ValueError):
        prep(x)


def test_measure_overhead_fields(rng):
    cfg = small_cfg()
    out = measure_overhead(Model(cfg.arch), rng.random((16, 3, 32, 32)), cfg, repeats=2)
    assert out["batch"] == 16
    assert out["shuffle_us_per_image"] > 0 and out["forward_us_per_image"] > 0
    assert out["overhead_ratio"] == pytest.approx(out["shuffle_us_per_image"] / out["forward_us_per_image"])


def test_small_protocol(synthetic_small):
    cfg = small_cfg(epochs=1, n_train=500, n_test=200, n_forged=2, block_sizes=(2, 8))
    report = run_protocol(synthetic_small, cfg, progress=lambda s: None)
    d = report.to_dict()
    assert d["baseline"]["key_fingerprint"] is None
    assert [r["block_size"] for r in d["protected"]] == [2, 8]
    for r in report.protected:
        assert len(r.accuracy_forged) == 2 and len(r.forged_fingerprints) == 2
        assert [a.subset_size for a in r.attacks] == [50, 200]
        assert r.attack_monotone == (r.attacks[0].accuracy <= r.attacks[1].accuracy)
        assert r.key_fingerprint not in r.forged_fingerprints
    again = run_protocol(synthetic_small, cfg, progress=lambda s: None)
    strip = lambda rep: [(r.accuracy_correct, r.accuracy_forged, r.accuracy_plain,
                          [a.accuracy for a in r.attacks]) for r in rep.protected]
    assert strip(report) == strip(again)
    assert report.baseline.accuracy == again.baseline.accuracy
