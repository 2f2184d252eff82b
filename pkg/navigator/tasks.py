"""Dataset ingestion, class splits, synthetic task families and episode sampling.

Two sources are supported: a synthetic family (pure function of family,
class id, example index and seed) and an image directory with one
subdirectory per class plus a split file listing class names per split.
"""

from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
import torch
import yaml
from PIL import Image

from logging_config import logger
from models.config import DatasetSpec, SearchConfig, SyntheticFamilySpec, SyntheticKind
from navigator.errors import (
    InsufficientClasses,
    InsufficientExamples,
    MissingClass,
    MissingTargetDomain,
    SplitOverlap,
)

SPLITS = ("train", "val", "test")
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp"}

# rng stream tags for synthetic generation
_MEAN_STREAM, _NOISE_STREAM, _RING_STREAM, _SHIFT_STREAM = 0, 1, 2, 3


@dataclass
class Dataset:
    name: str
    examples: torch.Tensor
    labels: torch.Tensor
    class_names: List[str]
    splits: Dict[str, List[int]]
    input_shape: Tuple[int, ...]
    _by_class: Dict[int, torch.Tensor] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        for class_id in range(len(self.class_names)):
            self._by_class[class_id] = torch.nonzero(self.labels == class_id).flatten()

    def class_indices(self, class_id: int) -> torch.Tensor:
        return self._by_class[class_id]

    def split_examples(self, split: str) -> Tuple[torch.Tensor, torch.Tensor]:
        """All examples of a split with labels remapped to 0..n_classes-1."""
        class_ids = self.splits[split]
        index = torch.cat([self._by_class[c] for c in class_ids])
        remap = {c: i for i, c in enumerate(class_ids)}
        labels = torch.tensor([remap[int(c)] for c in self.labels[index]], dtype=torch.long)
        return self.examples[index], labels


@dataclass
class Episode:
    n_way: int
    k_shot: int
    q_per_class: int
    support_x: torch.Tensor
    support_y: torch.Tensor
    query_x: torch.Tensor
    query_y: torch.Tensor
    source_tag: str
    classes: List[int]
    support_index: torch.Tensor
    query_index: torch.Tensor


@dataclass(frozen=True)
class TaskDistribution:
    dataset: Dataset
    split: str
    n_way: int
    k_shot: int
    q_per_class: int
    source_tag: str

    @property
    def class_ids(self) -> List[int]:
        return self.dataset.splits[self.split]

    def sample(self, generator: torch.Generator) -> Episode:
        return sample_episode(
            self.dataset, self.split, self.n_way, self.k_shot, self.q_per_class,
            generator, source_tag=self.source_tag,
        )

    def with_shots(self, k_shot: int, q_per_class: Optional[int] = None) -> "TaskDistribution":
        return replace(self, k_shot=k_shot, q_per_class=q_per_class or self.q_per_class)


def _check_splits(splits: Dict[str, List[str]]):
    for i, first in enumerate(SPLITS):
        for second in SPLITS[i + 1:]:
            shared = set(splits[first]) & set(splits[second])
            if shared:
                raise SplitOverlap(f"classes {sorted(shared)} appear in both {first} and {second}")


def _unit(vector: np.ndarray) -> np.ndarray:
    return vector / np.linalg.norm(vector)


def synthetic_class_mean(family: SyntheticFamilySpec, class_id: int, shifted: bool = False) -> np.ndarray:
    if family.kind == SyntheticKind.RING_CLUSTERS:
        basis, _ = np.linalg.qr(np.random.default_rng([family.seed, _RING_STREAM]).normal(size=(family.dim, 2)))
        radius = family.class_spread * family.class_pool_size / np.pi
        angle = 2 * np.pi * class_id / family.class_pool_size
        mean = radius * (np.cos(angle) * basis[:, 0] + np.sin(angle) * basis[:, 1])
    else:
        mean = family.class_spread * np.random.default_rng([family.seed, _MEAN_STREAM, class_id]).normal(size=family.dim)
    if shifted:
        mean = _shift(family, mean)
    return mean


def _shift(family: SyntheticFamilySpec, points: np.ndarray) -> np.ndarray:
    shift = family.shift_params
    rng = np.random.default_rng([family.seed, _SHIFT_STREAM])
    direction = _unit(rng.normal(size=family.dim))
    rotation, _ = np.linalg.qr(rng.normal(size=(family.dim, family.dim)))
    mixed = (1 - shift.mix) * points + shift.mix * points @ rotation.T
    return mixed + shift.mean_shift * np.sqrt(family.dim) * family.class_spread * direction


def _synthetic_noise(family: SyntheticFamilySpec, class_id: int, example_index: int, shifted: bool) -> np.ndarray:
    noise = np.random.default_rng([family.seed, _NOISE_STREAM, class_id, example_index]).normal(size=family.dim)
    return family.noise_scale * (family.shift_params.cov_scale if shifted else 1.0) * noise


def synthetic_example(family: SyntheticFamilySpec, class_id: int, example_index: int, shifted: bool = False) -> np.ndarray:
    return synthetic_class_mean(family, class_id, shifted) + _synthetic_noise(family, class_id, example_index, shifted)


def _load_synthetic(spec: DatasetSpec) -> Dataset:
    family = spec.synthetic
    names = [f"class_{i:03d}" for i in range(family.class_pool_size)]
    if spec.class_splits is not None:
        splits_by_name = spec.class_splits.model_dump()
    else:
        n_train, n_val, n_test = family.split_sizes
        splits_by_name = {
            "train": names[:n_train],
            "val": names[n_train:n_train + n_val],
            "test": names[n_train + n_val:n_train + n_val + n_test],
        }
    _check_splits(splits_by_name)
    lookup = {name: i for i, name in enumerate(names)}
    for split, split_names in splits_by_name.items():
        for name in split_names:
            if name not in lookup:
                raise MissingClass(f"class '{name}' of split {split} is not in the synthetic pool")

    shifted_splits = set(family.shift_params.splits) if family.kind == SyntheticKind.DOMAIN_SHIFTED_GAUSSIAN else set()
    shifted_classes = {lookup[n] for s in shifted_splits for n in splits_by_name[s]}

    examples, labels = [], []
    for class_id in range(family.class_pool_size):
        shifted = class_id in shifted_classes
        mean = synthetic_class_mean(family, class_id, shifted)
        for example_index in range(family.examples_per_class):
            examples.append(mean + _synthetic_noise(family, class_id, example_index, shifted))
            labels.append(class_id)

    logger.debug(f"Generated {family.kind.value} data: {family.class_pool_size} classes x {family.examples_per_class}")
    return Dataset(
        name=spec.name,
        examples=torch.from_numpy(np.stack(examples)).float(),
        labels=torch.tensor(labels, dtype=torch.long),
        class_names=names,
        splits={s: [lookup[n] for n in splits_by_name[s]] for s in SPLITS},
        input_shape=(family.dim,),
    )


def read_split_file(path: Path) -> Dict[str, List[str]]:
    if not Path(path).is_file():
        raise MissingClass(f"split file {path} does not exist")
    with open(path) as handle:
        content = yaml.safe_load(handle) or {}
    missing = [s for s in SPLITS if s not in content]
    if missing:
        raise MissingClass(f"split file {path} lacks keys {missing}")
    return {s: [str(name) for name in content[s]] for s in SPLITS}


def _load_image(path: Path, input_shape: Tuple[int, ...]) -> np.ndarray:
    height, width, channels = input_shape
    mode = "L" if channels == 1 else "RGB"
    with Image.open(path) as image:
        array = np.asarray(image.convert(mode).resize((width, height)), dtype=np.float32) / 255.0
    return array.reshape(height, width, channels)


def _load_manifest(spec: DatasetSpec) -> Dataset:
    root = Path(spec.manifest.root)
    split_path = Path(spec.manifest.split_file)
    if not split_path.is_absolute() and not split_path.exists():
        split_path = root / split_path
    splits_by_name = spec.class_splits.model_dump() if spec.class_splits else read_split_file(split_path)
    _check_splits(splits_by_name)

    names = [n for s in SPLITS for n in splits_by_name[s]]
    examples, labels = [], []
    for class_id, name in enumerate(names):
        class_dir = root / name
        if not class_dir.is_dir():
            raise MissingClass(f"class directory {class_dir} not found")
        files = sorted(p for p in class_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
        for path in files:
            examples.append(_load_image(path, spec.input_shape))
            labels.append(class_id)

    lookup = {name: i for i, name in enumerate(names)}
    logger.info(f"Loaded manifest {root}: {len(names)} classes, {len(examples)} images")
    return Dataset(
        name=spec.name,
        examples=torch.from_numpy(np.stack(examples)) if examples else torch.zeros((0, *spec.input_shape)),
        labels=torch.tensor(labels, dtype=torch.long),
        class_names=names,
        splits={s: [lookup[n] for n in splits_by_name[s]] for s in SPLITS},
        input_shape=tuple(spec.input_shape),
    )


def load_dataset(spec: DatasetSpec, min_examples: int = 1) -> Dataset:
    dataset = _load_synthetic(spec) if spec.synthetic is not None else _load_manifest(spec)
    for split in SPLITS:
        for class_id in dataset.splits[split]:
            count = len(dataset.class_indices(class_id))
            if count < min_examples:
                raise InsufficientExamples(
                    f"class '{dataset.class_names[class_id]}' has {count} examples, episodes need {min_examples}"
                )
    logger.info(
        f"Dataset '{dataset.name}' ready: splits "
        f"{tuple(len(dataset.splits[s]) for s in SPLITS)}, input shape {dataset.input_shape}"
    )
    return dataset


def sample_episode(
    dataset: Dataset,
    split: str,
    n_way: int,
    k_shot: int,
    q_per_class: int,
    generator: torch.Generator,
    source_tag: Optional[str] = None,
) -> Episode:
    class_pool = dataset.splits[split]
    if len(class_pool) < n_way:
        raise InsufficientClasses(f"split {split} has {len(class_pool)} classes, {n_way}-way episodes requested")

    # The order of the draw is the relabelling: label j <-> chosen[j]
    chosen = [class_pool[i] for i in torch.randperm(len(class_pool), generator=generator)[:n_way].tolist()]
    per_class = k_shot + q_per_class
    support_index, query_index = [], []
    for class_id in chosen:
        index = dataset.class_indices(class_id)
        if len(index) < per_class:
            raise InsufficientExamples(
                f"class '{dataset.class_names[class_id]}' has {len(index)} examples, episode needs {per_class}"
            )
        picked = index[torch.randperm(len(index), generator=generator)[:per_class]]
        support_index.append(picked[:k_shot])
        query_index.append(picked[k_shot:])

    support_index = torch.cat(support_index)
    query_index = torch.cat(query_index)
    labels = torch.arange(n_way)
    return Episode(
        n_way=n_way,
        k_shot=k_shot,
        q_per_class=q_per_class,
        support_x=dataset.examples[support_index],
        support_y=labels.repeat_interleave(k_shot),
        query_x=dataset.examples[query_index],
        query_y=labels.repeat_interleave(q_per_class),
        source_tag=source_tag or split,
        classes=chosen,
        support_index=support_index,
        query_index=query_index,
    )


def make_distributions(
    dataset: Dataset,
    config: SearchConfig,
    cross_domain: bool = False,
    target: Optional[Dataset] = None,
) -> Tuple[TaskDistribution, TaskDistribution, TaskDistribution]:
    """Build the Step-1 (A), Step-2 (B) and test task distributions."""
    shape = dict(n_way=config.n_way, k_shot=config.k_shot, q_per_class=config.q_per_class)
    dist_a = TaskDistribution(dataset, "train", source_tag="A", **shape)
    if cross_domain:
        if target is None:
            raise MissingTargetDomain("cross-domain mode needs a target dataset")
        dist_b = TaskDistribution(target, "val", source_tag="B", **shape)
        dist_test = TaskDistribution(target, "test", source_tag="test", **shape)
    else:
        dist_b = TaskDistribution(dataset, "val", source_tag="B", **shape)
        dist_test = TaskDistribution(dataset, "test", source_tag="test", **shape)
    for dist in (dist_a, dist_b, dist_test):
        if len(dist.class_ids) < config.n_way:
            raise InsufficientClasses(
                f"{dist.source_tag} pool ({dist.dataset.name}/{dist.split}) has {len(dist.class_ids)} classes"
            )
    return dist_a, dist_b, dist_test
