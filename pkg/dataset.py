"""
Paired image-region / caption-token feature collections.

Covers the synthetic generator, the little-endian UAMV feature file format,
the JSON manifest tying two feature files together, and paired batching.
"""

import json
import logging
import math
import os
import struct
from dataclasses import dataclass, field
from typing import Dict, List

import numpy as np

from numerics import make_rng

FEATURE_MAGIC = b"UAMV"
FEATURE_VERSION = 1
KIND_IMAGE_REGIONS = 0
KIND_TEXT_TOKENS = 1
KIND_NAMES = {KIND_IMAGE_REGIONS: "image-regions", KIND_TEXT_TOKENS: "text-tokens"}

SPLIT_NAMES = ("train", "val", "test")

# magic, version u32, kind u8, item_count u64, feature_dim u32
_HEADER = struct.Struct("<4sIBQI")
_COUNT = struct.Struct("<I")


class DataError(ValueError):
    """Raised for malformed feature files, manifests and dataset contents."""


@dataclass
class SynthConfig:
    num_images: int = 200
    captions_per_image: int = 5
    latent_dim: int = 16
    d1: int = 32
    d2: int = 24
    regions_per_image: int = 6
    tokens_per_caption: int = 8
    noise_sigma: float = 0.1
    seed: int = 0
    # Smallest fraction of latent coordinates a caption keeps (1.0 = unmasked)
    min_keep_fraction: float = 0.5
    # Use identity maps for A and B (requires latent_dim == d1 == d2)
    identity_maps: bool = False

    def validate(self):
        counts = {
            "num_images": self.num_images,
            "captions_per_image": self.captions_per_image,
            "latent_dim": self.latent_dim,
            "d1": self.d1,
            "d2": self.d2,
            "regions_per_image": self.regions_per_image,
            "tokens_per_caption": self.tokens_per_caption,
        }
        bad = [name for name, value in counts.items() if int(value) < 1]
        if bad:
            raise DataError(f"Synthetic data sizes must be >= 1: {', '.join(bad)}")
        if self.noise_sigma < 0:
            raise DataError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if not 0.5 <= self.min_keep_fraction <= 1.0:
            raise DataError(f"min_keep_fraction must lie in [0.5, 1], got {self.min_keep_fraction}")
        if self.identity_maps and not (self.latent_dim == self.d1 == self.d2):
            raise DataError("identity_maps requires latent_dim == d1 == d2")


@dataclass
class Dataset:
    """Region features per image, token features per caption and the splits."""
    images: List[np.ndarray]
    captions: List[np.ndarray]
    caption_to_image: np.ndarray
    splits: Dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def region_dim(self):
        return self.images[0].shape[1] if self.images else 0

    @property
    def token_dim(self):
        return self.captions[0].shape[1] if self.captions else 0

    def validate(self):
        """Check the dataset invariants, raising DataError on the first violation."""
        n_images = len(self.images)
        c2i = np.asarray(self.caption_to_image, dtype=np.int64)
        if c2i.shape != (len(self.captions),):
            raise DataError(f"caption_to_image has {c2i.size} entries for {len(self.captions)} captions")
        if c2i.size and (c2i.min() < 0 or c2i.max() >= n_images):
            raise DataError(f"caption_to_image references images outside [0, {n_images})")
        if n_images and np.bincount(c2i, minlength=n_images).min() < 1:
            missing = int(np.argmin(np.bincount(c2i, minlength=n_images)))
            raise DataError(f"Image {missing} has no caption")
        for kind, items in (("image", self.images), ("caption", self.captions)):
            dims = {item.shape[1] for item in items}
            if len(dims) > 1:
                raise DataError(f"Inconsistent {kind} feature dims: {sorted(dims)}")
            empty = [i for i, item in enumerate(items) if item.shape[0] < 1]
            if empty:
                raise DataError(f"{kind} {empty[0]} has no feature vectors")
        seen = set()
        for name, ids in self.splits.items():
            ids = set(int(i) for i in ids)
            if any(i < 0 or i >= n_images for i in ids):
                raise DataError(f"Split '{name}' references a missing image")
            if seen & ids:
                raise DataError(f"Split '{name}' overlaps another split")
            seen |= ids
        return self

    def captions_of(self):
        """List of caption indices for each image, in ascending order."""
        owners = [[] for _ in self.images]
        for caption_id, image_id in enumerate(self.caption_to_image):
            owners[int(image_id)].append(caption_id)
        return owners

    def split_view(self, split):
        """Images of one split with their captions, re-indexed from zero.

        Returns:
            Tuple of (image ids, caption ids, local caption_to_image array)
        """
        if split not in self.splits:
            raise DataError(f"Unknown split '{split}'")
        image_ids = np.asarray(self.splits[split], dtype=np.int64)
        local = {int(image_id): n for n, image_id in enumerate(image_ids)}
        caption_ids = [c for c, owner in enumerate(self.caption_to_image) if int(owner) in local]
        c2i = np.array([local[int(self.caption_to_image[c])] for c in caption_ids], dtype=np.int64)
        return image_ids, np.asarray(caption_ids, dtype=np.int64), c2i


@dataclass
class Batch:
    """B image/caption pairs; pair i is the only positive in row and column i."""
    images: List[np.ndarray]
    captions: List[np.ndarray]
    image_ids: np.ndarray
    caption_ids: np.ndarray

    def __len__(self):
        return len(self.images)


def _to_float32_exact(x):
    return np.asarray(x, dtype=np.float32).astype(np.float64)


def _split_ranges(n_images):
    n_train = int(math.floor(0.8 * n_images))
    n_val = int(math.floor(0.1 * n_images))
    ids = np.arange(n_images, dtype=np.int64)
    return {
        "train": ids[:n_train],
        "val": ids[n_train:n_train + n_val],
        "test": ids[n_train + n_val:],
    }


def generate_synthetic(cfg):
    """Generate a learnable paired dataset from shared latent semantics.

    Each image draws a latent z; its regions are A z plus noise. Each caption
    keeps a random subset of at least min_keep_fraction of z's coordinates and
    its tokens are B (mask * z) plus noise. Features are rounded through
    float32 so they survive the feature file bit-exactly.

    Args:
        cfg: SynthConfig

    Returns:
        Dataset with an 80/10/10 train/val/test split by image index
    """
    cfg.validate()
    rng = make_rng(cfg.seed)
    latent = cfg.latent_dim

    if cfg.identity_maps:
        map_a = np.eye(latent)
        map_b = np.eye(latent)
    else:
        map_a = rng.standard_normal((cfg.d1, latent)) / math.sqrt(latent)
        map_b = rng.standard_normal((cfg.d2, latent)) / math.sqrt(latent)

    min_keep = int(math.ceil(cfg.min_keep_fraction * latent))
    images, captions, c2i = [], [], []
    for image_id in range(cfg.num_images):
        z = rng.standard_normal(latent)
        regions = np.tile(map_a @ z, (cfg.regions_per_image, 1))
        regions += cfg.noise_sigma * rng.standard_normal(regions.shape)
        images.append(_to_float32_exact(regions))

        for _ in range(cfg.captions_per_image):
            keep = int(rng.integers(min_keep, latent + 1))
            mask = np.zeros(latent)
            mask[rng.permutation(latent)[:keep]] = 1.0
            tokens = np.tile(map_b @ (mask * z), (cfg.tokens_per_caption, 1))
            tokens += cfg.noise_sigma * rng.standard_normal(tokens.shape)
            captions.append(_to_float32_exact(tokens))
            c2i.append(image_id)

    dataset = Dataset(
        images=images,
        captions=captions,
        caption_to_image=np.asarray(c2i, dtype=np.int64),
        splits=_split_ranges(cfg.num_images),
    )
    logging.info(f"Generated {cfg.num_images} images x {cfg.captions_per_image} captions "
                 f"(latent {latent}, d1 {cfg.d1}, d2 {cfg.d2}, noise {cfg.noise_sigma})")
    return dataset.validate()


def save_features(path, kind, items):
    """Write a list of (n_i x dim) matrices as a UAMV feature file.

    Values are stored as little-endian float32.
    """
    if kind not in KIND_NAMES:
        raise DataError(f"Unknown feature kind {kind}")
    dims = {int(np.shape(item)[1]) for item in items}
    if len(dims) > 1:
        raise DataError(f"Items have inconsistent feature dims: {sorted(dims)}")
    dim = dims.pop() if dims else 0

    with open(path, "wb") as f:
        f.write(_HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, kind, len(items), dim))
        for item in items:
            block = np.ascontiguousarray(item, dtype="<f4")
            f.write(_COUNT.pack(block.shape[0]))
            f.write(block.tobytes())
    logging.debug(f"Saved {len(items)} {KIND_NAMES[kind]} items (dim {dim}) to {path}")


def load_features(path):
    """Read a UAMV feature file.

    Returns:
        Tuple of (kind, list of float64 matrices)
    """
    with open(path, "rb") as f:
        data = f.read()

    if len(data) < 4 or data[:4] != FEATURE_MAGIC:
        raise DataError(f"{path}: bad magic at byte offset 0")
    if len(data) < _HEADER.size:
        raise DataError(f"{path}: truncated header at byte offset {len(data)}")
    _, version, kind, count, dim = _HEADER.unpack_from(data, 0)
    if version != FEATURE_VERSION:
        raise DataError(f"{path}: unsupported version {version} at byte offset 4")
    if kind not in KIND_NAMES:
        raise DataError(f"{path}: unknown kind {kind} at byte offset 8")

    offset = _HEADER.size
    items = []
    for _ in range(count):
        if offset + _COUNT.size > len(data):
            raise DataError(f"{path}: truncated item header at byte offset {offset}")
        (n_vectors,) = _COUNT.unpack_from(data, offset)
        offset += _COUNT.size
        n_bytes = n_vectors * dim * 4
        if offset + n_bytes > len(data):
            raise DataError(f"{path}: truncated item data at byte offset {offset}")
        block = np.frombuffer(data, dtype="<f4", count=n_vectors * dim, offset=offset)
        items.append(block.astype(np.float64).reshape(n_vectors, dim))
        offset += n_bytes
    if offset != len(data):
        raise DataError(f"{path}: {len(data) - offset} trailing bytes at byte offset {offset}")
    return kind, items


def save_dataset(dataset, out_dir):
    """Write images.uamv, captions.uamv and manifest.json into out_dir."""
    os.makedirs(out_dir, exist_ok=True)
    save_features(os.path.join(out_dir, "images.uamv"), KIND_IMAGE_REGIONS, dataset.images)
    save_features(os.path.join(out_dir, "captions.uamv"), KIND_TEXT_TOKENS, dataset.captions)
    manifest = {
        "images": "images.uamv",
        "captions": "captions.uamv",
        "caption_to_image": [int(i) for i in dataset.caption_to_image],
        "splits": {name: [int(i) for i in ids] for name, ids in dataset.splits.items()},
    }
    manifest_path = os.path.join(out_dir, "manifest.json")
    with open(manifest_path, "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2)
    logging.info(f"Dataset written to {out_dir} ({len(dataset.images)} images, {len(dataset.captions)} captions)")
    return manifest_path


def load_dataset(path):
    """Load a dataset from a manifest file or a directory holding manifest.json.

    Relative feature paths are resolved against the manifest's directory.
    """
    manifest_path = os.path.join(path, "manifest.json") if os.path.isdir(path) else path
    try:
        with open(manifest_path, "r", encoding="utf-8") as f:
            manifest = json.load(f)
    except json.JSONDecodeError as e:
        raise DataError(f"{manifest_path}: invalid JSON ({e})")

    missing = [key for key in ("images", "captions", "caption_to_image", "splits") if key not in manifest]
    if missing:
        raise DataError(f"{manifest_path}: missing keys {', '.join(missing)}")

    base = os.path.dirname(os.path.abspath(manifest_path))
    image_kind, images = load_features(os.path.join(base, manifest["images"]))
    caption_kind, captions = load_features(os.path.join(base, manifest["captions"]))
    if image_kind != KIND_IMAGE_REGIONS or caption_kind != KIND_TEXT_TOKENS:
        raise DataError(f"{manifest_path}: feature files have kinds {image_kind}/{caption_kind}, expected 0/1")

    dataset = Dataset(
        images=images,
        captions=captions,
        caption_to_image=np.asarray(manifest["caption_to_image"], dtype=np.int64),
        splits={name: np.asarray(ids, dtype=np.int64) for name, ids in manifest["splits"].items()},
    )
    logging.info(f"Loaded {len(images)} images and {len(captions)} captions from {manifest_path}")
    return dataset.validate()


def batch_iter(dataset, split, batch_size, seed, epoch):
    """Yield paired batches over one split.

    Images are shuffled by a generator derived from (seed, epoch) and one
    caption is drawn per image. A short final batch is dropped.
    """
    if batch_size < 2:
        raise DataError(f"batch_size must be >= 2, got {batch_size}")
    if split not in dataset.splits:
        raise DataError(f"Unknown split '{split}'")

    rng = make_rng(seed, epoch)
    image_ids = np.asarray(dataset.splits[split], dtype=np.int64)
    order = image_ids[rng.permutation(image_ids.size)]
    owners = dataset.captions_of()
    picks = np.array([owners[int(i)][int(rng.integers(len(owners[int(i)])))] for i in order], dtype=np.int64)

    for start in range(0, order.size - batch_size + 1, batch_size):
        ids = order[start:start + batch_size]
        caption_ids = picks[start:start + batch_size]
        yield Batch(
            images=[dataset.images[int(i)] for i in ids],
            captions=[dataset.captions[int(c)] for c in caption_ids],
            image_ids=ids,
            caption_ids=caption_ids,
        )
