"""Deterministic synthetic segmentation benchmark: blobs/ellipses on textured noise."""

import os
from dataclasses import dataclass, asdict

import cv2
import numpy as np
import yaml
from PIL import Image

from .errors import IoError

FG_FRACTION_MIN = 0.02
FG_FRACTION_MAX = 0.50


@dataclass(frozen=True)
class SynthSpec:
    n_train: int = 200
    n_val: int = 40
    n_test: int = 60
    image_size: tuple = (96, 96)   # (width, height)
    min_shapes: int = 1
    max_shapes: int = 3
    max_distractors: int = 2
    texture_level: float = 0.15
    noise_level: float = 0.06
    fg_contrast: float = 0.30
    seed: int = 0


def _ellipse_mask(w, h, cx, cy, ax, ay, angle):
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    ca, sa = np.cos(angle), np.sin(angle)
    u = (xs - cx) * ca + (ys - cy) * sa
    v = -(xs - cx) * sa + (ys - cy) * ca
    return (u * u) / (ax * ax) + (v * v) / (ay * ay) <= 1.0


def _sample_mask(rng, spec):
    w, h = spec.image_size
    for _ in range(100):
        n_shapes = int(rng.integers(spec.min_shapes, spec.max_shapes + 1))
        mask = np.zeros((h, w), dtype=bool)
        for _ in range(n_shapes):
            cx = rng.uniform(0.2 * w, 0.8 * w)
            cy = rng.uniform(0.2 * h, 0.8 * h)
            ax = rng.uniform(0.08 * w, 0.22 * w)
            ay = rng.uniform(0.08 * h, 0.22 * h)
            angle = rng.uniform(0, np.pi)
            mask |= _ellipse_mask(w, h, cx, cy, ax, ay, angle)
        frac = mask.mean()
        if FG_FRACTION_MIN <= frac <= FG_FRACTION_MAX:
            return mask.astype(np.uint8)
    raise RuntimeError("could not sample a mask within foreground bounds")


def _low_freq_noise(rng, w, h, cells=6):
    coarse = rng.uniform(-1.0, 1.0, size=(cells, cells)).astype(np.float32)
    return cv2.resize(coarse, (w, h), interpolation=cv2.INTER_LINEAR)


def _render_image(rng, spec, mask):
    w, h = spec.image_size
    base = rng.uniform(0.30, 0.45)
    img = np.empty((h, w, 3), dtype=np.float32)
    for c in range(3):
        img[:, :, c] = base + spec.texture_level * _low_freq_noise(rng, w, h)
    # weak-contrast distractor blobs stay background in the ground truth
    n_distract = int(rng.integers(0, spec.max_distractors + 1))
    for _ in range(n_distract):
        d = _ellipse_mask(w, h, rng.uniform(0.15 * w, 0.85 * w),
                          rng.uniform(0.15 * h, 0.85 * h),
                          rng.uniform(0.05 * w, 0.15 * w),
                          rng.uniform(0.05 * h, 0.15 * h), rng.uniform(0, np.pi))
        gain = rng.uniform(0.25, 0.45) * spec.fg_contrast
        for c in range(3):
            img[:, :, c][d & ~mask.astype(bool)] += gain
    fg = mask.astype(bool)
    # foreground brighter with a channel tilt so the cue is color+intensity
    tilt = rng.uniform(0.5, 1.0, size=3).astype(np.float32)
    gain = rng.uniform(0.6, 1.0) * spec.fg_contrast
    for c in range(3):
        img[:, :, c][fg] += gain * tilt[c] \
            + spec.texture_level * _low_freq_noise(rng, w, h)[fg]
    img += rng.normal(0.0, spec.noise_level, size=img.shape).astype(np.float32)
    return np.clip(img, 0.0, 1.0)


def _generate_one(spec, section_key, i):
    rng = np.random.default_rng(np.random.SeedSequence(spec.seed, spawn_key=(section_key, i)))
    mask = _sample_mask(rng, spec)
    img = _render_image(rng, spec, mask)
    return img, mask


def _write_pair(root, stem, img, mask):
    img_u8 = np.round(img * 255.0).astype(np.uint8)
    Image.fromarray(img_u8).save(os.path.join(root, "images", stem + ".png"))
    Image.fromarray(mask * 255).save(os.path.join(root, "masks", stem + ".png"))


def generate_synthetic_dataset(spec, out):
    """Write <out>/trainval and <out>/test in the images/ + masks/ layout.

    trainval holds n_train + n_val pairs (validation is carved out later by
    split_dataset); test holds n_test pairs. Regeneration is bitwise identical.
    """
    sections = [("trainval", 0, spec.n_train + spec.n_val), ("test", 1, spec.n_test)]
    try:
        for name, key, count in sections:
            root = os.path.join(out, name)
            os.makedirs(os.path.join(root, "images"), exist_ok=True)
            os.makedirs(os.path.join(root, "masks"), exist_ok=True)
            for i in range(count):
                img, mask = _generate_one(spec, key, i)
                _write_pair(root, f"{name}_{i:05d}", img, mask)
        doc = asdict(spec)
        doc["image_size"] = list(spec.image_size)
        with open(os.path.join(out, "generation_manifest.yaml"), "w") as fh:
            fh.write(yaml.safe_dump({"synth_spec": doc}, sort_keys=True))
    except OSError as exc:
        raise IoError(f"cannot write synthetic dataset: {exc}")
    return out
