"""Synthetic datasets shared by the test modules."""

import os

import numpy as np

from anpnet.data import ManifestRecord, save_manifest, write_ppm

# one dominant color per class, textured with stripes; the color statistics
# survive pooling at every depth, so crops and flips never change the class
_COLORS = [
    (230, 40, 40), (40, 230, 40), (40, 40, 230), (230, 230, 40),
    (230, 40, 230), (40, 230, 230), (240, 150, 40), (150, 150, 150),
]
_ADJECTIVES = ["bright", "dark", "soft", "sharp", "warm", "cold", "calm", "wild"]
_NOUNS = ["stripe", "band", "grid", "wave", "line", "bar", "mesh", "field"]


def pattern_image(class_index: int, rng: np.random.Generator,
                  size: int = 64) -> np.ndarray:
    """A noisy striped [3,size,size] image keyed to one dominant color."""
    color = np.array(_COLORS[class_index], dtype=np.float32)
    phase = rng.integers(0, 16)
    coords = (np.arange(size) + phase) // 8 % 2
    orientation = rng.integers(0, 2)
    stripes = coords[:, None] if orientation == 0 else coords[None, :]
    stripes = np.broadcast_to(stripes, (size, size)).astype(np.float32)
    img = color[:, None, None] * (0.55 + 0.45 * stripes)
    img = img + rng.normal(0, 10.0, size=(3, size, size))
    return np.clip(img, 0, 255).astype(np.float32)


def make_synthetic_dataset(root, n_classes: int = 8, train_per_class: int = 50,
                           test_per_class: int = 5, size: int = 64,
                           seed: int = 0):
    """Write PPMs, a manifest and a vocabulary; returns their paths."""
    rng = np.random.default_rng(seed)
    img_dir = os.path.join(root, "images")
    os.makedirs(img_dir, exist_ok=True)
    vocab_path = os.path.join(root, "vocab.txt")
    with open(vocab_path, "w", encoding="utf-8") as fh:
        for c in range(n_classes):
            fh.write(f"{_ADJECTIVES[c % 8]} {_NOUNS[c % 8]}\n")
    records = []
    for c in range(n_classes):
        for i in range(train_per_class + test_per_class):
            split = "train" if i < train_per_class else "test"
            path = os.path.join(img_dir, f"c{c}_{i:03d}.ppm")
            write_ppm(pattern_image(c, rng, size), path)
            records.append(ManifestRecord(path, c, split, f"{split}_pub_{c}_{i}"))
    manifest_path = os.path.join(root, "manifest.tsv")
    save_manifest(records, manifest_path)
    return manifest_path, vocab_path, records
