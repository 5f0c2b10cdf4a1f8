"""Synthetic datasets, threshold-sample assignment, feature-space augmentation and bundle files."""

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np
import structlog

from .config import AugmentationSpec
from .errors import CountMismatchError, InvalidConfigError, VersionMismatchError
from .models import AugmentationKind

logger = structlog.get_logger(__name__)

BUNDLE_FORMAT = "marginmatch-bundle"
BUNDLE_VERSION = 1
SPLITS = ("labeled", "threshold", "unlabeled", "test")


@dataclass(frozen=True)
class LabeledSplit:
    ids: np.ndarray
    features: np.ndarray
    labels: np.ndarray

    def __len__(self) -> int:
        return int(self.ids.size)


@dataclass(frozen=True)
class FeaturePool:
    """Examples without readable labels."""

    ids: np.ndarray
    features: np.ndarray

    def __len__(self) -> int:
        return int(self.ids.size)


@dataclass(frozen=True)
class GoldLabels:
    """Hidden gold labels of the unlabeled pool; read only by the metrics evaluator."""

    ids: np.ndarray
    labels: np.ndarray
    hard: np.ndarray


@dataclass(frozen=True)
class DatasetBundle:
    """
    Labeled, threshold, unlabeled and test splits.

    Threshold samples carry the virtual label ``num_classes``. The unlabeled pool exposes
    features only; its gold labels live in :attr:`unlabeled_gold` for evaluation.
    """

    num_classes: int
    feature_dim: int
    labeled: LabeledSplit
    threshold: FeaturePool
    unlabeled: FeaturePool
    test: LabeledSplit
    unlabeled_gold: GoldLabels = field(repr=False)
    provenance: dict = field(default_factory=dict)

    @property
    def virtual_class(self) -> int:
        return self.num_classes

    def supervised_pool(self) -> LabeledSplit:
        """Labeled examples followed by threshold samples labeled with the virtual class."""
        return LabeledSplit(
            ids=np.concatenate([self.labeled.ids, self.threshold.ids]),
            features=np.concatenate([self.labeled.features, self.threshold.features]),
            labels=np.concatenate(
                [
                    self.labeled.labels,
                    np.full(len(self.threshold), self.virtual_class, dtype=np.int64),
                ]
            ),
        )

    def counts(self) -> dict[str, int]:
        return {name: len(getattr(self, name)) for name in SPLITS}


def _class_means(num_classes: int, feature_dim: int, separation: float) -> np.ndarray:
    means = np.zeros((num_classes, feature_dim))
    means[np.arange(num_classes), np.arange(num_classes)] = separation
    return means


def _balanced_labels(count: int, num_classes: int, rng: np.random.Generator) -> np.ndarray:
    return rng.permutation(np.resize(np.arange(num_classes, dtype=np.int64), count))


def generate_synthetic(
    num_classes: int,
    per_class_labeled: int,
    unlabeled_count: int,
    test_count: int,
    overlap: float,
    hard_fraction: float,
    seed: int,
    feature_dim: int = 8,
    separation: float = 4.0,
    cluster_std: float = 1.0,
) -> DatasetBundle:
    """
    Gaussian class clusters with a fraction of hard unlabeled examples.

    Class ``c`` is centred at ``separation * e_c``. A hard example keeps its own class as
    gold label but is displaced by ``overlap * (mean_d - mean_c)`` towards another class d.

    Raises:
        InvalidConfigError: On invalid counts or fractions
    """
    if num_classes < 2:
        raise InvalidConfigError("at least two classes are required")
    if min(per_class_labeled, unlabeled_count, test_count) < 0:
        raise InvalidConfigError("split sizes must be non-negative")
    if not 0.0 <= hard_fraction < 1.0:
        raise InvalidConfigError(f"hard_fraction must lie in [0, 1), got {hard_fraction}")
    if overlap < 0:
        raise InvalidConfigError(f"overlap must be non-negative, got {overlap}")
    if feature_dim < num_classes:
        raise InvalidConfigError("feature_dim must be at least num_classes")

    rng = np.random.default_rng(seed)
    means = _class_means(num_classes, feature_dim, separation)

    def sample(labels: np.ndarray) -> np.ndarray:
        return means[labels] + cluster_std * rng.standard_normal((labels.size, feature_dim))

    labeled_labels = np.repeat(np.arange(num_classes, dtype=np.int64), per_class_labeled)
    labeled_x = sample(labeled_labels)

    unlabeled_labels = _balanced_labels(unlabeled_count, num_classes, rng)
    unlabeled_x = sample(unlabeled_labels)
    hard = np.zeros(unlabeled_count, dtype=bool)
    n_hard = int(round(hard_fraction * unlabeled_count))
    if n_hard:
        chosen = rng.choice(unlabeled_count, size=n_hard, replace=False)
        hard[chosen] = True
        own = unlabeled_labels[chosen]
        other = (own + rng.integers(1, num_classes, size=n_hard)) % num_classes
        unlabeled_x[chosen] += overlap * (means[other] - means[own])

    test_labels = _balanced_labels(test_count, num_classes, rng)
    test_x = sample(test_labels)

    n_labeled = labeled_labels.size
    labeled_ids = np.arange(n_labeled, dtype=np.int64)
    unlabeled_ids = np.arange(n_labeled, n_labeled + unlabeled_count, dtype=np.int64)
    test_ids = np.arange(
        n_labeled + unlabeled_count, n_labeled + unlabeled_count + test_count, dtype=np.int64
    )
    empty = np.zeros((0, feature_dim))
    return DatasetBundle(
        num_classes=num_classes,
        feature_dim=feature_dim,
        labeled=LabeledSplit(labeled_ids, labeled_x, labeled_labels),
        threshold=FeaturePool(np.zeros(0, dtype=np.int64), empty),
        unlabeled=FeaturePool(unlabeled_ids, unlabeled_x),
        test=LabeledSplit(test_ids, test_x, test_labels),
        unlabeled_gold=GoldLabels(unlabeled_ids.copy(), unlabeled_labels, hard),
        provenance={"data_seed": seed},
    )


def assign_threshold_samples(
    bundle: DatasetBundle, fraction: float, min_count: int, seed: int
) -> DatasetBundle:
    """
    Move ``max(min_count, round(fraction * |U|))`` unlabeled examples to the threshold set.

    Raises:
        InvalidConfigError: If the fraction is outside (0, 1), the pool is empty, or more
            samples are requested than the pool holds
    """
    if not 0.0 < fraction < 1.0:
        raise InvalidConfigError(f"threshold fraction must lie in (0, 1), got {fraction}")
    pool_size = len(bundle.unlabeled)
    if pool_size == 0:
        raise InvalidConfigError("cannot assign threshold samples from an empty unlabeled pool")
    count = max(min_count, round(fraction * pool_size))
    if count > pool_size:
        raise InvalidConfigError(f"{count} threshold samples requested from {pool_size} unlabeled")

    rng = np.random.default_rng(seed)
    moved = np.zeros(pool_size, dtype=bool)
    moved[rng.choice(pool_size, size=count, replace=False)] = True
    keep = ~moved
    gold = bundle.unlabeled_gold
    threshold = FeaturePool(
        ids=np.concatenate([bundle.threshold.ids, bundle.unlabeled.ids[moved]]),
        features=np.concatenate([bundle.threshold.features, bundle.unlabeled.features[moved]]),
    )
    return replace(
        bundle,
        threshold=threshold,
        unlabeled=FeaturePool(bundle.unlabeled.ids[keep], bundle.unlabeled.features[keep]),
        unlabeled_gold=GoldLabels(gold.ids[keep], gold.labels[keep], gold.hard[keep]),
        provenance={**bundle.provenance, "threshold_seed": seed, "threshold_count": count},
    )


def augment(
    features, settings: AugmentationSpec, kind: AugmentationKind, rng: np.random.Generator
) -> np.ndarray:
    """
    Weak: additive Gaussian noise. Strong: stronger noise, then zero each feature with
    probability ``settings.mask_rate``.
    """
    x = np.asarray(features, dtype=np.float64)
    if kind == AugmentationKind.WEAK:
        if settings.weak_sigma > 0:
            x = x + rng.normal(0.0, settings.weak_sigma, size=x.shape)
        return x
    if settings.strong_sigma > 0:
        x = x + rng.normal(0.0, settings.strong_sigma, size=x.shape)
    if settings.mask_rate > 0:
        x = x * (rng.random(x.shape) >= settings.mask_rate)
    return x


def _write_split(
    path: Path, ids: np.ndarray, features: np.ndarray, labels: Optional[np.ndarray]
) -> None:
    columns = ["id"] + (["label"] if labels is not None else [])
    columns += [f"f{i}" for i in range(features.shape[1])]
    parts = [ids[:, None].astype(np.float64)]
    fmt = ["%d"]
    if labels is not None:
        parts.append(labels[:, None].astype(np.float64))
        fmt.append("%d")
    parts.append(features)
    fmt += ["%.17g"] * features.shape[1]
    np.savetxt(
        path, np.hstack(parts), fmt=fmt, delimiter=",", header=",".join(columns), comments=""
    )


def _read_split(path: Path, rows: int, width: int) -> np.ndarray:
    if rows == 0:
        return np.zeros((0, width))
    table = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    if table.shape != (rows, width):
        raise CountMismatchError(
            f"{path.name}: expected {rows}x{width} values, found {table.shape}"
        )
    return table


def save_bundle(bundle: DatasetBundle, directory: str | Path, config_hash: str = "") -> Path:
    """Write each split as CSV plus a JSON manifest."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    labeled, test, gold = bundle.labeled, bundle.test, bundle.unlabeled_gold
    _write_split(out / "labeled.csv", labeled.ids, labeled.features, labeled.labels)
    _write_split(out / "threshold.csv", bundle.threshold.ids, bundle.threshold.features, None)
    _write_split(out / "unlabeled.csv", bundle.unlabeled.ids, bundle.unlabeled.features, None)
    _write_split(out / "test.csv", test.ids, test.features, test.labels)
    hard = gold.hard[:, None].astype(np.float64)
    _write_split(out / "unlabeled_gold.csv", gold.ids, hard, gold.labels)
    manifest = {
        "format": BUNDLE_FORMAT,
        "version": BUNDLE_VERSION,
        "num_classes": bundle.num_classes,
        "feature_dim": bundle.feature_dim,
        "counts": bundle.counts(),
        "provenance": bundle.provenance,
        "config_hash": config_hash,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2), encoding="utf-8")
    logger.info("bundle_saved", directory=str(out), **bundle.counts())
    return out


def load_bundle(directory: str | Path) -> DatasetBundle:
    """
    Read a bundle written by :func:`save_bundle`.

    Raises:
        VersionMismatchError: If the manifest format or version is not recognized
        CountMismatchError: If a split file disagrees with the manifest counts
    """
    src = Path(directory)
    manifest = json.loads((src / "manifest.json").read_text(encoding="utf-8"))
    if manifest.get("format") != BUNDLE_FORMAT or manifest.get("version") != BUNDLE_VERSION:
        raise VersionMismatchError(
            f"unrecognized bundle format {manifest.get('format')!r} v{manifest.get('version')}"
        )
    d = manifest["feature_dim"]
    counts = manifest["counts"]
    labeled = _read_split(src / "labeled.csv", counts["labeled"], d + 2)
    threshold = _read_split(src / "threshold.csv", counts["threshold"], d + 1)
    unlabeled = _read_split(src / "unlabeled.csv", counts["unlabeled"], d + 1)
    test = _read_split(src / "test.csv", counts["test"], d + 2)
    gold = _read_split(src / "unlabeled_gold.csv", counts["unlabeled"], 3)

    def ints(column: np.ndarray) -> np.ndarray:
        return column.astype(np.int64)

    return DatasetBundle(
        num_classes=manifest["num_classes"],
        feature_dim=d,
        labeled=LabeledSplit(ints(labeled[:, 0]), labeled[:, 2:], ints(labeled[:, 1])),
        threshold=FeaturePool(ints(threshold[:, 0]), threshold[:, 1:]),
        unlabeled=FeaturePool(ints(unlabeled[:, 0]), unlabeled[:, 1:]),
        test=LabeledSplit(ints(test[:, 0]), test[:, 2:], ints(test[:, 1])),
        unlabeled_gold=GoldLabels(ints(gold[:, 0]), ints(gold[:, 1]), gold[:, 2].astype(bool)),
        provenance=manifest.get("provenance", {}),
    )


def bundle_from_config(config, seeds: dict[str, int]) -> DatasetBundle:
    """Generate the bundle described by a RunConfig's data section."""
    data = config.data
    bundle = generate_synthetic(
        num_classes=data.num_classes,
        per_class_labeled=data.per_class_labeled,
        unlabeled_count=data.unlabeled_count,
        test_count=data.test_count,
        overlap=data.overlap,
        hard_fraction=data.hard_fraction,
        seed=seeds["data"],
        feature_dim=data.feature_dim,
        separation=data.separation,
        cluster_std=data.cluster_std,
    )
    if data.threshold_samples:
        bundle = assign_threshold_samples(
            bundle, data.threshold_fraction, data.threshold_min_count, seeds["threshold"]
        )
    return bundle
