"""Procedural multi-attribute scene generator.

Images are 32x32 RGB in [0, 1], rendered from three attributes:

* brightness (dark / mid / bright): base intensity 0.2 / 0.5 / 0.8 plus a
  small per-image jitter,
* texture (smooth / stripes / checker): an additive +-0.1 pattern of
  period 4,
* shape (none / circle / square / triangle): a centered +0.3 region.

Each attribute also tints one color channel by 0.05 * class index, so
every task is linearly decodable in isolation. Clipping to [0, 1] makes
the rules interact: bright scenes with a shape saturate, eroding texture
and tint contrast inside the region.

The single-label subsets draw their labeled attribute uniformly and the
nuisance attributes from a skewed marginal, while the joint pool couples
texture to brightness and keeps everything else uniform. The two worlds
share the render function; the mismatch is purely distributional.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, ContractError, FormatError
from .utils import (TAG_BUNDLE, TAG_ORACLE, TAG_RENDER, config_hash, rng_for,
                    stable_json)

MANIFEST_NAME = "manifest.json"
LABELS_NAME = "labels.csv"
BUNDLE_FORMAT = 1


@dataclass(frozen=True)
class AttributeSpec:
    """One scene attribute: its classes, render rule, and sampling behavior.

    ``skew`` is the marginal used when the attribute is a nuisance in a
    single-label subset. ``couple_with``/``coupling`` describe the joint
    pool: with probability ``coupling`` the class copies the named
    attribute's class index.
    """

    name: str
    classes: tuple[str, ...]
    rule: str
    tint_channel: int
    skew: tuple[float, ...]
    couple_with: str | None = None
    coupling: float = 0.0

    def __post_init__(self):
        if len(self.classes) < 2:
            raise ConfigurationError(f"attribute '{self.name}' needs >= 2 classes")
        if abs(sum(self.skew) - 1.0) > 1e-9 or len(self.skew) != len(self.classes):
            raise ConfigurationError(f"skew for '{self.name}' must sum to 1 over its classes")

    def to_dict(self) -> dict:
        return {"name": self.name, "classes": list(self.classes), "rule": self.rule,
                "tint_channel": self.tint_channel, "skew": list(self.skew),
                "couple_with": self.couple_with, "coupling": self.coupling}

    @classmethod
    def from_dict(cls, d: dict) -> "AttributeSpec":
        return cls(name=d["name"], classes=tuple(d["classes"]), rule=d["rule"],
                   tint_channel=d["tint_channel"], skew=tuple(d["skew"]),
                   couple_with=d.get("couple_with"), coupling=d.get("coupling", 0.0))


def _skewed(n_classes: int, mass: float) -> tuple[float, ...]:
    rest = (1.0 - mass) / (n_classes - 1)
    return (mass,) + (rest,) * (n_classes - 1)


def default_attributes(nuisance_skew: float = 0.7,
                       coupling: float = 0.6) -> tuple[AttributeSpec, ...]:
    return (
        AttributeSpec("brightness", ("dark", "mid", "bright"), "brightness", 0,
                      _skewed(3, nuisance_skew)),
        AttributeSpec("texture", ("smooth", "stripes", "checker"), "texture", 1,
                      _skewed(3, nuisance_skew), couple_with="brightness",
                      coupling=coupling),
        AttributeSpec("shape", ("none", "circle", "square", "triangle"), "shape", 2,
                      _skewed(4, nuisance_skew)),
    )


@dataclass(frozen=True)
class GeneratorConfig:
    image_size: int = 32
    train_size: int = 600
    val_size: int = 150
    test_size: int = 300
    joint_size: int = 600
    noise_sigma: float = 0.02
    nuisance_skew: float = 0.7
    coupling: float = 0.6
    tint_step: float = 0.05
    pattern_amp: float = 0.1
    shape_gain: float = 0.3
    base_levels: tuple[float, float, float] = (0.2, 0.5, 0.8)
    base_jitter: float = 0.05
    attributes: tuple[AttributeSpec, ...] = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        if self.attributes is None:
            object.__setattr__(
                self, "attributes",
                default_attributes(self.nuisance_skew, self.coupling))
        if not 0.0 <= self.nuisance_skew <= 1.0 or not 0.0 <= self.coupling <= 1.0:
            raise ConfigurationError("skew and coupling must lie in [0, 1]")

    @property
    def n_tasks(self) -> int:
        return len(self.attributes)

    @property
    def class_counts(self) -> tuple[int, ...]:
        return tuple(len(a.classes) for a in self.attributes)

    def to_dict(self) -> dict:
        return {
            "image_size": self.image_size, "train_size": self.train_size,
            "val_size": self.val_size, "test_size": self.test_size,
            "joint_size": self.joint_size, "noise_sigma": self.noise_sigma,
            "nuisance_skew": self.nuisance_skew, "coupling": self.coupling,
            "tint_step": self.tint_step, "pattern_amp": self.pattern_amp,
            "shape_gain": self.shape_gain, "base_levels": list(self.base_levels),
            "base_jitter": self.base_jitter,
            "attributes": [a.to_dict() for a in self.attributes],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorConfig":
        d = dict(d)
        attrs = d.pop("attributes", None)
        if attrs is not None:
            d["attributes"] = tuple(AttributeSpec.from_dict(a) for a in attrs)
        if "base_levels" in d:
            d["base_levels"] = tuple(d["base_levels"])
        return cls(**d)


# -- rendering ---------------------------------------------------------


def _shape_mask(kind: int, size: int) -> np.ndarray:
    mask = np.zeros((size, size), dtype=bool)
    cy = cx = size // 2
    if kind == 0:
        return mask
    if kind == 1:  # circle, radius 6
        yy, xx = np.mgrid[0:size, 0:size]
        mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= 36
    elif kind == 2:  # square, 10x10
        mask[cy - 5:cy + 5, cx - 5:cx + 5] = True
    elif kind == 3:  # triangle, side 12, apex up
        for i, row in enumerate(range(cy - 6, cy + 6)):
            half = (i + 1) // 2
            if half:
                mask[row, cx - half:cx + half] = True
    else:
        raise ContractError(f"unknown shape class {kind}")
    return mask


def render_scene(labels, seed, config: GeneratorConfig | None = None,
                 noise: bool = True) -> np.ndarray:
    """Render one (3, S, S) float32 image from a full label vector.

    ``seed`` may be an int or a tuple of ints; identical (labels, seed)
    pairs render bit-identical images. RNG draw order is fixed: base
    jitter first, pixel noise last.
    """
    config = config or GeneratorConfig()
    labels = [int(v) for v in labels]
    if len(labels) != config.n_tasks:
        raise ContractError(f"expected {config.n_tasks} labels, got {len(labels)}")
    for attr, v in zip(config.attributes, labels):
        if not 0 <= v < len(attr.classes):
            raise ContractError(f"unknown class {v} for attribute '{attr.name}'")
    path = (seed,) if np.isscalar(seed) else tuple(seed)
    rng = rng_for(path[0], TAG_RENDER, *path[1:])
    size = config.image_size
    img = np.zeros((3, size, size), dtype=np.float64)

    by_rule = {a.rule: v for a, v in zip(config.attributes, labels)}
    level = config.base_levels[by_rule.get("brightness", 1)]
    img += level + rng.uniform(-config.base_jitter, config.base_jitter)

    texture = by_rule.get("texture", 0)
    if texture == 1:  # vertical stripes, period 4
        cols = np.where((np.arange(size) % 4) < 2, config.pattern_amp, -config.pattern_amp)
        img += cols[None, None, :]
    elif texture == 2:  # checkerboard, period 4
        yy, xx = np.mgrid[0:size, 0:size]
        board = np.where(((yy // 2) + (xx // 2)) % 2 == 0,
                         config.pattern_amp, -config.pattern_amp)
        img += board[None, :, :]

    mask = _shape_mask(by_rule.get("shape", 0), size)
    if mask.any():
        img[:, mask] += config.shape_gain

    for attr, v in zip(config.attributes, labels):
        img[attr.tint_channel % 3] += config.tint_step * v

    if noise:
        img += rng.normal(0.0, config.noise_sigma, size=img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


# -- bundle generation ---------------------------------------------------


@dataclass
class SplitData:
    ids: np.ndarray      # (n,) int64
    images: np.ndarray   # (n, 3, S, S) float32
    labels: np.ndarray   # (n, M) int64, full ground truth

    def __len__(self):
        return len(self.ids)


@dataclass
class SubsetData:
    attribute: int  # 0-based labeled-attribute index
    train: SplitData
    val: SplitData
    test: SplitData


@dataclass
class DatasetBundle:
    config: GeneratorConfig
    seed: int
    subsets: list[SubsetData]
    joint: SplitData

    def __post_init__(self):
        self._label_map = {}
        for split in self.all_splits():
            for i, ex_id in enumerate(split.ids):
                self._label_map[int(ex_id)] = split.labels[i]

    def all_splits(self):
        for subset in self.subsets:
            yield subset.train
            yield subset.val
            yield subset.test
        yield self.joint

    @property
    def n_tasks(self) -> int:
        return self.config.n_tasks

    @property
    def class_counts(self) -> tuple[int, ...]:
        return self.config.class_counts

    def labels_for(self, example_id: int) -> np.ndarray:
        try:
            return self._label_map[int(example_id)]
        except KeyError:
            raise LookupError(f"unknown example id {example_id}") from None


def _stratified_labels(n: int, n_classes: int, what: str) -> np.ndarray:
    if n % n_classes:
        used = (n // n_classes) * n_classes
        warnings.warn(f"{what}: size {n} not divisible by {n_classes} classes; "
                      f"using {used}")
        n = used
    return np.repeat(np.arange(n_classes), n // n_classes)


def _sample_skewed(rng, n: int, skew) -> np.ndarray:
    return rng.choice(len(skew), size=n, p=np.asarray(skew))


def generate_bundle(config: GeneratorConfig | None = None, seed: int = 0) -> DatasetBundle:
    """Generate the single-label subsets and the coupled joint pool."""
    config = config or GeneratorConfig()
    attrs = config.attributes
    next_id = 0

    def render_block(labels_matrix) -> SplitData:
        nonlocal next_id
        n = labels_matrix.shape[0]
        ids = np.arange(next_id, next_id + n, dtype=np.int64)
        next_id += n
        images = np.empty((n, 3, config.image_size, config.image_size), dtype=np.float32)
        for i in range(n):
            images[i] = render_scene(labels_matrix[i], (seed, int(ids[i])), config)
        return SplitData(ids=ids, images=images, labels=labels_matrix.astype(np.int64))

    subsets = []
    for m, attr in enumerate(attrs):
        splits = {}
        for split_tag, size in (("train", config.train_size), ("val", config.val_size),
                                ("test", config.test_size)):
            rng = rng_for(seed, TAG_BUNDLE, m, {"train": 0, "val": 1, "test": 2}[split_tag])
            labeled = _stratified_labels(size, len(attr.classes),
                                         f"subset '{attr.name}' {split_tag}")
            rng.shuffle(labeled)
            n = len(labeled)
            columns = []
            for j, other in enumerate(attrs):
                if j == m:
                    columns.append(labeled)
                else:
                    columns.append(_sample_skewed(rng, n, other.skew))
            splits[split_tag] = render_block(np.stack(columns, axis=1))
        subsets.append(SubsetData(attribute=m, train=splits["train"],
                                  val=splits["val"], test=splits["test"]))

    rng = rng_for(seed, TAG_BUNDLE, len(attrs), 3)
    n = config.joint_size
    by_name: dict[str, np.ndarray] = {}
    columns = []
    for attr in attrs:
        k = len(attr.classes)
        col = rng.integers(0, k, size=n)
        if attr.couple_with is not None:
            follow = rng.random(n) < attr.coupling
            col = np.where(follow, by_name[attr.couple_with] % k, col)
        by_name[attr.name] = col
        columns.append(col)
    joint = render_block(np.stack(columns, axis=1))

    return DatasetBundle(config=config, seed=seed, subsets=subsets, joint=joint)


# -- oracle --------------------------------------------------------------


def oracle_labels(bundle: DatasetBundle, example_id: int, decline_rate: float = 0.0,
                  seed: int = 0) -> np.ndarray:
    """Ground-truth labels, each entry declined to -1 with the given rate."""
    if not 0.0 <= decline_rate < 1.0:
        raise ContractError(f"decline_rate must lie in [0, 1), got {decline_rate}")
    truth = bundle.labels_for(example_id).copy()
    if decline_rate > 0.0:
        rng = rng_for(seed, TAG_ORACLE, int(example_id))
        declined = rng.random(truth.shape[0]) < decline_rate
        truth[declined] = -1
    return truth


class GroundTruthOracle:
    """Programmatic stand-in for the human annotator."""

    def __init__(self, bundle: DatasetBundle, decline_rate: float = 0.0, seed: int = 0):
        if not 0.0 <= decline_rate < 1.0:
            raise ContractError(f"decline_rate must lie in [0, 1), got {decline_rate}")
        self.bundle = bundle
        self.decline_rate = decline_rate
        self.seed = seed

    def annotate(self, ids, images=None, suggestions=None) -> np.ndarray:
        rows = [oracle_labels(self.bundle, i, self.decline_rate, self.seed) for i in ids]
        return np.stack(rows) if rows else np.zeros((0, self.bundle.n_tasks), dtype=np.int64)


def oracle_from_bundle_dir(directory, decline_rate: float = 0.0,
                           seed: int = 0) -> GroundTruthOracle:
    """Oracle answering from a saved bundle's label records."""
    return GroundTruthOracle(load_bundle(directory), decline_rate=decline_rate,
                             seed=seed)


# -- bundle directory IO ---------------------------------------------------


def _split_rows(split: SplitData, split_tag: str, subset: int):
    for i in range(len(split)):
        yield [int(split.ids[i]), split_tag, subset] + [int(v) for v in split.labels[i]]


def save_bundle(bundle: DatasetBundle, directory) -> Path:
    """Write manifest.json, per-split float32-LE image blobs, and labels.csv."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    files = {}
    hashes = {}

    def write_blob(name: str, split: SplitData):
        blob = split.images.astype("<f4").tobytes()
        (directory / name).write_bytes(blob)
        files[name] = {"count": len(split), "first_id": int(split.ids[0]) if len(split) else 0}
        hashes[name] = hashlib.sha256(blob).hexdigest()

    rows = []
    for m, subset in enumerate(bundle.subsets, start=1):
        for tag, split in (("train", subset.train), ("val", subset.val),
                           ("test", subset.test)):
            write_blob(f"subset{m}_{tag}.bin", split)
            rows.extend(_split_rows(split, tag, m))
    write_blob("joint.bin", bundle.joint)
    rows.extend(_split_rows(bundle.joint, "joint", 0))
    rows.sort(key=lambda r: r[0])

    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    header = ["id", "split", "subset"] + [f"a{m}" for m in range(1, bundle.n_tasks + 1)]
    writer.writerow(header)
    writer.writerows(rows)
    labels_bytes = buf.getvalue().encode("utf-8")
    (directory / LABELS_NAME).write_bytes(labels_bytes)
    hashes[LABELS_NAME] = hashlib.sha256(labels_bytes).hexdigest()

    manifest = {
        "format": BUNDLE_FORMAT,
        "seed": bundle.seed,
        "config": bundle.config.to_dict(),
        "config_hash": config_hash(bundle.config.to_dict()),
        "files": files,
        "sha256": hashes,
    }
    (directory / MANIFEST_NAME).write_text(stable_json(manifest) + "\n")
    return directory


def load_bundle(directory) -> DatasetBundle:
    directory = Path(directory)
    manifest_path = directory / MANIFEST_NAME
    if not manifest_path.exists():
        raise FormatError(f"no {MANIFEST_NAME} under {directory}")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("format") != BUNDLE_FORMAT:
        raise FormatError(f"unsupported bundle format {manifest.get('format')}")
    config = GeneratorConfig.from_dict(manifest["config"])
    size = config.image_size

    by_id: dict[int, tuple[str, int, list[int]]] = {}
    with open(directory / LABELS_NAME, newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        for row in reader:
            by_id[int(row[0])] = (row[1], int(row[2]),
                                  [int(v) for v in row[3:]])

    def read_blob(name: str, split_tag: str, subset: int) -> SplitData:
        raw = (directory / name).read_bytes()
        expected = manifest["sha256"].get(name)
        if expected and hashlib.sha256(raw).hexdigest() != expected:
            raise FormatError(f"blob {name} does not match its manifest hash")
        count = manifest["files"][name]["count"]
        images = np.frombuffer(raw, dtype="<f4").reshape(count, 3, size, size).copy()
        ids = sorted(i for i, (tag, sub, _) in by_id.items()
                     if tag == split_tag and sub == subset)
        if len(ids) != count:
            raise FormatError(f"labels.csv rows for {name} do not match blob size")
        labels = np.array([by_id[i][2] for i in ids], dtype=np.int64)
        return SplitData(ids=np.array(ids, dtype=np.int64), images=images, labels=labels)

    subsets = []
    for m in range(1, config.n_tasks + 1):
        subsets.append(SubsetData(
            attribute=m - 1,
            train=read_blob(f"subset{m}_train.bin", "train", m),
            val=read_blob(f"subset{m}_val.bin", "val", m),
            test=read_blob(f"subset{m}_test.bin", "test", m)))
    joint = read_blob("joint.bin", "joint", 0)
    return DatasetBundle(config=config, seed=manifest["seed"], subsets=subsets,
                         joint=joint)
