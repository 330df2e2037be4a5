"""Train with a key, evaluate under correct/forged/absent keys, attack by fine-tuning."""
from __future__ import annotations

import hashlib
import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from .blockshuffle import ShuffleConfig, shuffle_batch
from .dataio import AugmentConfig, LabeledDataset, augment_batch, sample_subset
from .keycore import Permutation, SecretKey, derive_permutation, generate_key
from .nettrain import REFERENCE_ARCH, Model, OptimState, fit
from .report import AttackResult, BaselineResult, ProtectedResult, ProtectionReport

log = logging.getLogger(__name__)

IMAGE_SIDE = 32


class ProtocolError(RuntimeError):
    pass


def derive_seed(seed: int, tag: str) -> int:
    """Independent 63-bit sub-seed for a named stage of an experiment."""
    digest = hashlib.sha256(f"{seed}/{tag}".encode()).digest()
    return int.from_bytes(digest[:8], "big") >> 1


@dataclass
class ProtectionConfig:
    block_size: int = 4
    block_sizes: tuple = (2, 4, 8)
    epochs: int = 30
    batch_size: int = 128
    max_lr: float = 0.02
    momentum: float = 0.9
    weight_decay: float = 5e-4
    seed: int = 0
    n_train: int = 10000
    n_test: int = 2000
    n_forged: int = 5
    attack_sizes: tuple = (100, 500, 1000)
    attack_epochs: int = 30
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    arch: tuple = REFERENCE_ARCH
    channels: int = 3

    def __post_init__(self):
        for m in (self.block_size, *self.block_sizes):
            if m < 1 or IMAGE_SIDE % m:
                raise ValueError("block size does not divide image")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")

    def shuffle_config(self, block_size: int | None = None) -> ShuffleConfig:
        return ShuffleConfig(block_size or self.block_size, self.channels)

    def optimizer(self, model: Model) -> OptimState:
        return OptimState.for_model(model, momentum=self.momentum,
                                    weight_decay=self.weight_decay, max_lr=self.max_lr)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["arch"] = [list(s) for s in self.arch]
        return d


class Preprocessor:
    """Augment (training only), then shuffle with the key's permutation.

    The shuffle is always the last stage before the model, whatever else
    the pipeline does.
    """

    def __init__(self, permutation: Permutation | None, shuffle_cfg: ShuffleConfig | None,
                 augment: AugmentConfig | None = None):
        self.permutation = permutation
        self.shuffle_cfg = shuffle_cfg
        self.augment = augment

    @classmethod
    def for_key(cls, key: SecretKey | None, cfg: ProtectionConfig, block_size: int | None = None,
                train: bool = True) -> "Preprocessor":
        scfg = cfg.shuffle_config(block_size)
        perm = None if key is None else derive_permutation(key, scfg.vector_length)
        return cls(perm, scfg, cfg.augment if train else None)

    def __call__(self, images: np.ndarray, rng: np.random.Generator | None = None) -> np.ndarray:
        x = images
        if self.augment is not None and self.augment.enabled:
            if rng is None:
                raise ValueError("augmentation needs a random generator")
            x = augment_batch(x, self.augment, rng)
        if self.permutation is not None:
            x = shuffle_batch(x, self.shuffle_cfg, self.permutation, check=False)
        return x


def _train(train: LabeledDataset, prep: Preprocessor, cfg: ProtectionConfig,
           model: Model | None = None, epochs: int | None = None, seed_tag: str = "train",
           progress: Callable | None = None) -> Model:
    if model is None:
        model = Model(cfg.arch, (cfg.channels, IMAGE_SIDE, IMAGE_SIDE),
                      seed=derive_seed(cfg.seed, "init"))
    state = cfg.optimizer(model)
    fit(model, train.images, train.labels, cfg.epochs if epochs is None else epochs,
        cfg.batch_size, state, seed=derive_seed(cfg.seed, seed_tag), transform=prep, log=progress)
    return model


def train_protected(train: LabeledDataset, key: SecretKey | None, cfg: ProtectionConfig,
                    block_size: int | None = None, progress: Callable | None = None) -> Model:
    """Train a fresh model on augmented, key-shuffled minibatches.

    ``key=None`` trains the unprotected baseline on plain images.
    """
    m = block_size or cfg.block_size
    if m < 1 or IMAGE_SIDE % m:
        raise ValueError("block size does not divide image")
    prep = Preprocessor.for_key(key, cfg, m, train=True)
    return _train(train, prep, cfg, progress=progress)


def evaluate(model: Model, test: LabeledDataset, key: SecretKey | None, cfg: ProtectionConfig,
             block_size: int | None = None, permutation: Permutation | None = None,
             batch_size: int = 500) -> float:
    """Top-1 accuracy on ``test`` shuffled with ``key`` (plain images if ``key`` is None).

    ``permutation`` overrides the key-derived permutation. No augmentation.
    Argmax ties resolve to the lowest class index.
    """
    if len(test) == 0:
        raise ValueError("empty dataset")
    scfg = cfg.shuffle_config(block_size)
    if permutation is None and key is not None:
        permutation = derive_permutation(key, scfg.vector_length)
    prep = Preprocessor(permutation, scfg)
    correct = 0
    for i in range(0, len(test), batch_size):
        x = prep(test.images[i:i + batch_size])
        pred = np.argmax(model.forward(x), axis=1)
        correct += int(np.sum(pred == test.labels[i:i + batch_size]))
    return correct / len(test)


def finetune_attack(model: Model, dprime: LabeledDataset, forged_key: SecretKey, epochs: int,
                    cfg: ProtectionConfig, test: LabeledDataset, block_size: int | None = None,
                    seed_tag: str = "attack") -> tuple[Model, float]:
    """Retrain a copy of a stolen model on ``dprime`` shuffled with a forged key.

    All layers are updated. Momentum starts from zero and the cyclic schedule
    restarts over the attack epochs with the training ``max_lr``. The
    returned accuracy is on ``test`` under the forged key.
    """
    if len(dprime) == 0:
        raise ValueError("adversary dataset is empty")
    adapted = model.copy()
    if epochs > 0:
        prep = Preprocessor.for_key(forged_key, cfg, block_size, train=True)
        _train(dprime, prep, cfg, model=adapted, epochs=epochs, seed_tag=seed_tag)
    return adapted, evaluate(adapted, test, forged_key, cfg, block_size)


@dataclass
class SweepResult:
    fingerprints: list[str]
    accuracies: list[float]

    @property
    def mean(self) -> float:
        return float(np.mean(self.accuracies))

    @property
    def std(self) -> float:
        return float(np.std(self.accuracies))

    @property
    def max(self) -> float:
        return float(np.max(self.accuracies))

    @property
    def min(self) -> float:
        return float(np.min(self.accuracies))


def forged_keys(n_keys: int, seed: int) -> list[SecretKey]:
    return [generate_key(derive_seed(seed, f"forged/{i}")) for i in range(n_keys)]


def wrong_key_sweep(model: Model, test: LabeledDataset, n_keys: int, seed: int, cfg: ProtectionConfig,
                    block_size: int | None = None,
                    extra_keys: Sequence[SecretKey] = ()) -> SweepResult:
    """Accuracy under ``n_keys`` keys sampled from ``seed`` (plus any ``extra_keys``)."""
    if n_keys < 1:
        raise ValueError("n_keys must be >= 1")
    keys = forged_keys(n_keys, seed) + list(extra_keys)
    accs = [evaluate(model, test, k, cfg, block_size) for k in keys]
    return SweepResult([k.fingerprint() for k in keys], accs)


def measure_overhead(model: Model, images: np.ndarray, cfg: ProtectionConfig,
                     block_size: int | None = None, repeats: int = 5) -> dict:
    """Per-image shuffle and forward times (best of ``repeats``) on one batch."""
    scfg = cfg.shuffle_config(block_size)
    perm = derive_permutation(generate_key(0), scfg.vector_length)
    x = np.ascontiguousarray(images, dtype=model.dtype)
    n = len(x)

    def best(fn):
        fn()
        times = []
        for _ in range(repeats):
            t0 = time.perf_counter()
            fn()
            times.append(time.perf_counter() - t0)
        return min(times) / n

    with threadpool_limits(limits=1):
        shuffle_s = best(lambda: shuffle_batch(x, scfg, perm, check=False))
    forward_s = best(lambda: model.forward(x))
    return {
        "batch": n,
        "shuffle_us_per_image": shuffle_s * 1e6,
        "forward_us_per_image": forward_s * 1e6,
        "overhead_ratio": shuffle_s / forward_s,
        "shuffle_images_per_second": 1.0 / shuffle_s,
    }


def _desk_split(train: LabeledDataset, test: LabeledDataset, cfg: ProtectionConfig):
    if cfg.n_train < len(train):
        train = sample_subset(train, cfg.n_train, derive_seed(cfg.seed, "train-subset"))
    if cfg.n_test < len(test):
        test = sample_subset(test, cfg.n_test, derive_seed(cfg.seed, "test-subset"))
    return train, test


def run_protocol(dataset: tuple[LabeledDataset, LabeledDataset], cfg: ProtectionConfig,
                 baseline: bool = True, progress: Callable[[str], None] | None = None) -> ProtectionReport:
    """The full experiment grid: baseline plus, per block size, correct/forged/plain and attacks.

    Training and test sets are reduced to ``cfg.n_train`` / ``cfg.n_test``
    items. Adversary subsets are drawn from the whole training split. Every
    cell is a deterministic function of ``(dataset, cfg)``.
    """
    say = progress or log.info
    full_train, full_test = dataset
    train, test = _desk_split(full_train, full_test, cfg)
    overhead_images = test.images[:cfg.batch_size]

    base = None
    if baseline:
        t0 = time.perf_counter()
        try:
            model = train_protected(train, None, cfg)
            acc = evaluate(model, test, None, cfg)
        except Exception as exc:
            raise ProtocolError(f"baseline: {exc}") from exc
        base = BaselineResult(acc, None, {"train_seconds": time.perf_counter() - t0})
        say(f"baseline accuracy {acc:.4f}")

    rows = []
    for m in cfg.block_sizes:
        try:
            rows.append(_protected_cell(full_train, train, test, m, cfg, overhead_images, say))
        except Exception as exc:
            raise ProtocolError(f"M={m}: {exc}") from exc
    report = ProtectionReport(base, rows, cfg.to_dict())
    report.check_accuracies()
    return report


def _protected_cell(full_train, train, test, m, cfg, overhead_images, say) -> ProtectedResult:
    key = generate_key(derive_seed(cfg.seed, f"key/{m}"))
    t0 = time.perf_counter()
    model = train_protected(train, key, cfg, block_size=m)
    train_seconds = time.perf_counter() - t0
    correct = evaluate(model, test, key, cfg, m)
    sweep = wrong_key_sweep(model, test, cfg.n_forged, derive_seed(cfg.seed, f"forged/{m}"), cfg, m)
    plain = evaluate(model, test, None, cfg, m)
    say(f"M={m}: correct {correct:.4f}, forged mean {sweep.mean:.4f}, plain {plain:.4f}")

    attacks = []
    attack_key = forged_keys(1, derive_seed(cfg.seed, f"forged/{m}"))[0]
    for size in cfg.attack_sizes:
        dprime = sample_subset(full_train, size, derive_seed(cfg.seed, f"dprime/{size}"))
        t1 = time.perf_counter()
        _, acc = finetune_attack(model, dprime, attack_key, cfg.attack_epochs, cfg, test, m,
                                 seed_tag=f"attack/{m}/{size}")
        attacks.append(AttackResult(size, cfg.attack_epochs, acc, attack_key.fingerprint(),
                                    time.perf_counter() - t1))
        say(f"M={m}: attack |D'|={size} accuracy {acc:.4f}")
    accs = [a.accuracy for a in attacks]
    monotone = all(a <= b for a, b in zip(accs, accs[1:])) if attacks else None

    runtimes = {"train_seconds": train_seconds}
    if len(overhead_images):
        runtimes.update(measure_overhead(model, overhead_images, cfg, m))
    return ProtectedResult(m, key.fingerprint(), correct, sweep.accuracies, sweep.fingerprints,
                           plain, attacks, monotone, runtimes)
