#!/usr/bin/env python3
"""
Demo Data Generator Script for Meta Navigator

Writes a ready-to-run synthetic experiment config and, optionally, a tiny
image-manifest dataset (one directory per class plus a split file) for
exercising the conv encoder and multi-crop evaluation.
"""

import argparse
import sys
from pathlib import Path

import numpy as np
import yaml
from PIL import Image

# Add parent directory to path so we can import from the main application
sys.path.append(str(Path(__file__).parent.parent))

from logging_config import logger
from models.config import (
    DatasetSpec,
    DecodeSchedule,
    EncoderConfig,
    EvalConfig,
    ExperimentConfig,
    ManifestSpec,
    MultiCropConfig,
    PretrainSchedule,
    SearchConfig,
    SyntheticFamilySpec,
)
from storage.config_files import dump_config

# Configuration
NUM_CLASSES = {"train": 8, "val": 5, "test": 5}
IMAGES_PER_CLASS = 20
IMAGE_SIZE = 16


def demo_config(output_dir: str, seed: int = 0) -> ExperimentConfig:
    """Small dense-encoder config that runs the whole pipeline in minutes."""
    return ExperimentConfig(
        seed=seed,
        output_dir=output_dir,
        dataset=DatasetSpec(
            name="synthetic",
            synthetic=SyntheticFamilySpec(dim=16, class_pool_size=30, examples_per_class=30, split_sizes=(20, 5, 5)),
        ),
        encoder=EncoderConfig(stages=4, widths=[32, 32, 32, 32], embedding_dim=32),
        pretrain=PretrainSchedule(steps=300),
        search=SearchConfig(episodes_total=300, q_per_class=10),
        decode=DecodeSchedule(recover_episodes=30, final_episodes=200, val_episodes=20),
        eval=EvalConfig(n_episodes=300, q_per_class=10, multicrop=MultiCropConfig(transform="identity")),
    )


def write_image_manifest(root: Path, seed: int = 0) -> Path:
    """Blurred-blob images, one colour/position family per class; returns the split file."""
    rng = np.random.default_rng(seed)
    splits = {}
    yy, xx = np.mgrid[0:IMAGE_SIZE, 0:IMAGE_SIZE]
    for split, count in NUM_CLASSES.items():
        names = []
        for c in range(count):
            name = f"{split}_class_{c:02d}"
            names.append(name)
            class_dir = root / name
            class_dir.mkdir(parents=True, exist_ok=True)
            centre = rng.uniform(3, IMAGE_SIZE - 3, size=2)
            colour = rng.uniform(0.2, 1.0, size=3)
            for i in range(IMAGES_PER_CLASS):
                jitter = centre + rng.normal(0, 1.0, size=2)
                blob = np.exp(-((yy - jitter[0]) ** 2 + (xx - jitter[1]) ** 2) / 8.0)
                image = blob[..., None] * colour + rng.normal(0, 0.05, size=(IMAGE_SIZE, IMAGE_SIZE, 3))
                pixels = (np.clip(image, 0, 1) * 255).astype(np.uint8)
                Image.fromarray(pixels).save(class_dir / f"{i:03d}.png")
        splits[split] = names
        logger.info(f"  Created {count} {split} classes")

    split_file = root / "splits.yaml"
    with open(split_file, "w") as handle:
        yaml.safe_dump(splits, handle)
    return split_file


def manifest_config(root: Path, split_file: Path, output_dir: str, seed: int = 0) -> ExperimentConfig:
    return ExperimentConfig(
        seed=seed,
        output_dir=output_dir,
        dataset=DatasetSpec(
            name="blobs",
            manifest=ManifestSpec(root=str(root), split_file=str(split_file)),
            input_shape=(IMAGE_SIZE, IMAGE_SIZE, 3),
        ),
        encoder=EncoderConfig(block_family="conv", stages=2, widths=[16, 16], embedding_dim=16),
        pretrain=PretrainSchedule(steps=100, batch_size=32),
        search=SearchConfig(episodes_total=50, q_per_class=5),
        decode=DecodeSchedule(recover_episodes=10, final_episodes=50, val_episodes=10),
        eval=EvalConfig(n_episodes=100, q_per_class=5),
    )


def main():
    parser = argparse.ArgumentParser(description="Write demo experiment configs and datasets")
    parser.add_argument("--out", default="demo", help="Directory for configs and datasets")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--images", action="store_true", help="Also write an image-manifest dataset")
    args = parser.parse_args()

    out = Path(args.out)
    logger.info("Creating synthetic demo config...")
    path = dump_config(demo_config(str(out / "runs" / "synthetic"), args.seed), out / "synthetic.yaml")
    logger.info(f"  Wrote {path}")

    if args.images:
        logger.info("Creating image manifest...")
        split_file = write_image_manifest(out / "blobs", args.seed)
        path = dump_config(
            manifest_config(out / "blobs", split_file, str(out / "runs" / "blobs"), args.seed), out / "blobs.yaml"
        )
        logger.info(f"  Wrote {path}")

    logger.info("Demo data ready. Run: python cli.py pretrain --config <config>")


if __name__ == "__main__":
    main()
