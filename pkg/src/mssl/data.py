"""Dataset indexing, deterministic splits, and weak/strong augmentation."""

import hashlib
import os
from dataclasses import dataclass, field

import cv2
import numpy as np
import yaml
from PIL import Image

from .config import AugmentConfig
from .errors import (MissingMask, UnreadableImage, EmptyDataset,
                     DegenerateSplit, UnknownId, IoError, MissingFile)

IMAGE_EXTS = (".png", ".jpg", ".jpeg")


@dataclass
class Sample:
    id: str
    image: np.ndarray          # H x W x 3 float32 in [0,1]
    mask: np.ndarray = None    # H x W uint8 in {0,1}, or None


@dataclass
class DatasetIndex:
    name: str
    entries: list               # [(id, image_path, mask_path or None)], sorted by id
    native_size: tuple           # (width, height)

    @property
    def ids(self):
        return [e[0] for e in self.entries]

    def __len__(self):
        return len(self.entries)


@dataclass
class SplitSpec:
    seed: int
    val_ids: list
    labeled_ids: list
    unlabeled_ids: list
    labeled_ratio: float
    val_fraction: float
    digest: str = ""


def index_dataset(root, with_masks=True, name=None):
    """Index <root>/images (and <root>/masks) into a sorted DatasetIndex."""
    img_dir = os.path.join(root, "images")
    mask_dir = os.path.join(root, "masks")
    if not os.path.isdir(img_dir):
        raise EmptyDataset(f"no images/ directory under {root}")
    stems = {}
    for fn in sorted(os.listdir(img_dir)):
        stem, ext = os.path.splitext(fn)
        if ext.lower() in IMAGE_EXTS:
            stems[stem] = os.path.join(img_dir, fn)
    if not stems:
        raise EmptyDataset(f"no images found under {img_dir}")
    entries = []
    for stem in sorted(stems):
        mask_path = None
        if with_masks:
            mask_path = os.path.join(mask_dir, stem + ".png")
            if not os.path.isfile(mask_path):
                raise MissingMask(f"no mask for image {stem!r}")
        entries.append((stem, stems[stem], mask_path))
    first = _read_image(entries[0][1])
    native_size = (first.shape[1], first.shape[0])
    return DatasetIndex(name=name or os.path.basename(os.path.normpath(root)),
                        entries=entries, native_size=native_size)


def _read_image(path):
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"))
    except Exception as exc:
        raise UnreadableImage(f"{path}: {exc}")


def _read_mask(path):
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("L"))
    except Exception as exc:
        raise UnreadableImage(f"{path}: {exc}")
    return (arr > 127).astype(np.uint8)  # source masks are 0/255


class ImageStore:
    """Loads indexed samples resized to a fixed (width, height); caches in memory."""

    def __init__(self, index, image_size, cache=True):
        self.index = index
        self.image_size = tuple(image_size)
        self._by_id = {e[0]: e for e in index.entries}
        self._cache = {} if cache else None

    @property
    def ids(self):
        return self.index.ids

    def load(self, sample_id, with_mask=True):
        key = (sample_id, with_mask)
        if self._cache is not None and key in self._cache:
            img, mask = self._cache[key]
            return Sample(sample_id, img.copy(), None if mask is None else mask.copy())
        if sample_id not in self._by_id:
            raise UnknownId(f"unknown sample id {sample_id!r}")
        _, img_path, mask_path = self._by_id[sample_id]
        w, h = self.image_size
        img = _read_image(img_path)
        if (img.shape[1], img.shape[0]) != (w, h):
            img = cv2.resize(img, (w, h), interpolation=cv2.INTER_LINEAR)
        img = img.astype(np.float32) / 255.0
        mask = None
        if with_mask:
            if mask_path is None:
                raise MissingMask(f"sample {sample_id!r} has no mask")
            mask = _read_mask(mask_path)
            if mask.shape != (h, w):
                mask = cv2.resize(mask, (w, h), interpolation=cv2.INTER_NEAREST)
        if self._cache is not None:
            self._cache[key] = (img, mask)
        return Sample(sample_id, img.copy(), None if mask is None else mask.copy())


def _round_half_up(x):
    return int(np.floor(x + 0.5))


def split_dataset(index, val_fraction, labeled_ratio, seed):
    """Deterministic val / labeled / unlabeled partition of a dataset index."""
    if not (0.0 < val_fraction < 1.0):
        raise DegenerateSplit(f"val_fraction {val_fraction} out of (0,1)")
    if not (0.0 < labeled_ratio <= 1.0):
        raise DegenerateSplit(f"labeled_ratio {labeled_ratio} out of (0,1]")
    ids = sorted(index.ids)
    total = len(ids)
    n_val = _round_half_up(val_fraction * total)
    remainder = total - n_val
    n_labeled = _round_half_up(labeled_ratio * remainder)
    if n_val == 0 or n_labeled == 0:
        raise DegenerateSplit(f"empty partition: val={n_val}, labeled={n_labeled}")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(total)
    shuffled = [ids[i] for i in perm]
    val_ids = sorted(shuffled[:n_val])
    labeled_ids = sorted(shuffled[n_val:n_val + n_labeled])
    unlabeled_ids = sorted(shuffled[n_val + n_labeled:])
    spec = SplitSpec(seed=seed, val_ids=val_ids, labeled_ids=labeled_ids,
                     unlabeled_ids=unlabeled_ids, labeled_ratio=labeled_ratio,
                     val_fraction=val_fraction)
    spec.digest = split_digest(spec)
    return spec


def split_digest(spec):
    h = hashlib.sha256()
    h.update(f"seed={spec.seed};vf={spec.val_fraction};lr={spec.labeled_ratio};".encode())
    for part in (spec.val_ids, spec.labeled_ids, spec.unlabeled_ids):
        h.update(("|".join(sorted(part)) + "\n").encode())
    return h.hexdigest()


def save_split(spec, path):
    doc = {"seed": spec.seed, "val_fraction": spec.val_fraction,
           "labeled_ratio": spec.labeled_ratio, "val_ids": spec.val_ids,
           "labeled_ids": spec.labeled_ids, "unlabeled_ids": spec.unlabeled_ids,
           "digest": spec.digest}
    try:
        os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
        with open(path, "w") as fh:
            fh.write(yaml.safe_dump(doc, sort_keys=True))
    except OSError as exc:
        raise IoError(f"cannot write split: {exc}")


def load_split(path):
    if not os.path.isfile(path):
        raise MissingFile(f"split file not found: {path}")
    with open(path, "r") as fh:
        doc = yaml.safe_load(fh.read())
    spec = SplitSpec(seed=doc["seed"], val_ids=list(doc["val_ids"]),
                     labeled_ids=list(doc["labeled_ids"]),
                     unlabeled_ids=list(doc["unlabeled_ids"]),
                     labeled_ratio=doc["labeled_ratio"],
                     val_fraction=doc["val_fraction"], digest=doc["digest"])
    if split_digest(spec) != spec.digest:
        raise IoError(f"split digest mismatch in {path}")
    return spec


def weak_augment(sample, rng, params=None):
    """Independent horizontal/vertical flips applied jointly to image and mask."""
    p = (params or AugmentConfig()).flip_prob
    img, mask = sample.image, sample.mask
    if rng.random() < p:  # horizontal
        img = img[:, ::-1]
        mask = None if mask is None else mask[:, ::-1]
    if rng.random() < p:  # vertical
        img = img[::-1]
        mask = None if mask is None else mask[::-1]
    return Sample(sample.id, np.ascontiguousarray(img),
                  None if mask is None else np.ascontiguousarray(mask))


def _sample_affine(rng, params, w, h):
    shift_x = rng.uniform(-params.max_shift, params.max_shift) * w
    shift_y = rng.uniform(-params.max_shift, params.max_shift) * h
    scale = rng.uniform(params.scale_min, params.scale_max)
    angle = rng.uniform(-params.max_rotate, params.max_rotate)
    m = cv2.getRotationMatrix2D((w / 2.0, h / 2.0), angle, scale)
    m[0, 2] += shift_x
    m[1, 2] += shift_y
    return m


def apply_affine(image, mask, m):
    """Warp image (bilinear) and mask (nearest) with reflection padding."""
    h, w = image.shape[:2]
    img = cv2.warpAffine(image, m, (w, h), flags=cv2.INTER_LINEAR,
                         borderMode=cv2.BORDER_REFLECT_101)
    if mask is not None:
        mask = cv2.warpAffine(mask, m, (w, h), flags=cv2.INTER_NEAREST,
                              borderMode=cv2.BORDER_REFLECT_101)
    return img, mask


def strong_augment(sample, rng, params=None):
    """Shift/scale/rotate, RGB shift, brightness/contrast, then flips.

    Geometric steps hit image and mask identically; photometric steps never
    touch the mask. Output image clipped to [0,1], mask stays binary.
    """
    params = params or AugmentConfig()
    p = params.strong_prob
    img, mask = sample.image.astype(np.float32), sample.mask
    h, w = img.shape[:2]
    if rng.random() < p:
        m = _sample_affine(rng, params, w, h)
        img, mask = apply_affine(img, mask, m)
    if rng.random() < p:
        shift = rng.uniform(-params.rgb_shift, params.rgb_shift, size=3).astype(np.float32)
        img = img + shift[None, None, :]
    if rng.random() < p:
        brightness = rng.uniform(-params.brightness, params.brightness)
        contrast = 1.0 + rng.uniform(-params.contrast, params.contrast)
        img = (img - 0.5) * contrast + 0.5 + brightness
    img = np.clip(img, 0.0, 1.0)
    out = weak_augment(Sample(sample.id, img, mask), rng, params)
    return out


def make_batches(ids, store, batch_size, shuffle, rng, with_masks=True, augment=None):
    """Yield Sample batches covering each id exactly once (last batch may be short)."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = sorted(ids)
    if shuffle:
        perm = rng.permutation(len(order))
        order = [order[i] for i in perm]
    for start in range(0, len(order), batch_size):
        batch = []
        for sample_id in order[start:start + batch_size]:
            s = store.load(sample_id, with_mask=with_masks)
            if augment is not None:
                s = augment(s)
            batch.append(s)
        yield batch
