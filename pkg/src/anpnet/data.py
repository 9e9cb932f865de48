"""Dataset manifests, vocabulary, image ingestion and the crop pipeline.

File formats (UTF-8, one record per line):

* vocabulary: one "adjective noun" pair per line; the line number is the
  class index.
* manifest: ``path<TAB>anp_index<TAB>split<TAB>publisher_id`` with an
  optional fifth column ``relevance`` (0 or 1) used only by retrieval
  evaluation.

Images are 3-channel, channel-first, values 0..255 as float32. Binary
PPM (P6, maxval 255) is read natively; anything else goes through
Pillow when it is installed.
"""

from __future__ import annotations

import logging
import zlib
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, FormatError, ShapeError
from .tensor import Rng, Tensor

log = logging.getLogger(__name__)

CANONICAL_SIZE = 256
CROP_SIZE = 227
CENTER_OFFSET = (CANONICAL_SIZE - CROP_SIZE) // 2   # 14
MAX_CROP_OFFSET = CANONICAL_SIZE - CROP_SIZE        # offsets drawn from {0..29}


@dataclass
class AnpVocabulary:
    """Ordered "adjective noun" class labels with index and noun lookups."""

    anps: list
    checksum: int = 0

    def __post_init__(self):
        self.index_of = {anp: i for i, anp in enumerate(self.anps)}
        self.nouns = [anp.split(" ")[1] for anp in self.anps]

    def __len__(self):
        return len(self.anps)

    def noun_of(self, index: int) -> str:
        return self.nouns[index]


def load_vocabulary(path) -> AnpVocabulary:
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    anps = []
    for lineno, line in enumerate(lines, start=1):
        tokens = line.split(" ")
        if len(tokens) != 2 or not all(tokens):
            raise FormatError(
                f"{path}:{lineno}: expected 'adjective noun', got {line!r}")
        anps.append(line)
    if not anps:
        raise DataError(f"{path}: empty vocabulary")
    checksum = zlib.crc32("\n".join(anps).encode("utf-8")) & 0xFFFFFFFF
    return AnpVocabulary(anps, checksum)


@dataclass
class ManifestRecord:
    path: str
    anp_index: int
    split: str
    publisher: str
    relevance: int | None = None


def load_manifest(path) -> list:
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            fields = line.split("\t")
            if len(fields) not in (4, 5):
                raise FormatError(f"{path}:{lineno}: expected 4 or 5 fields, "
                                  f"got {len(fields)}")
            img, idx, split, publisher = fields[:4]
            if split not in ("train", "test"):
                raise FormatError(f"{path}:{lineno}: bad split {split!r}")
            try:
                anp_index = int(idx)
            except ValueError:
                raise FormatError(f"{path}:{lineno}: bad anp_index {idx!r}") from None
            relevance = None
            if len(fields) == 5 and fields[4] != "":
                if fields[4] not in ("0", "1"):
                    raise FormatError(f"{path}:{lineno}: bad relevance {fields[4]!r}")
                relevance = int(fields[4])
            records.append(ManifestRecord(img, anp_index, split, publisher, relevance))
    return records


def save_manifest(records, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            line = f"{r.path}\t{r.anp_index}\t{r.split}\t{r.publisher}"
            if r.relevance is not None:
                line += f"\t{r.relevance}"
            fh.write(line + "\n")


@dataclass
class ValidationReport:
    publisher_violations: list          # (anp_index, publisher), sorted
    under_threshold: list               # (anp_index, train_count), sorted
    train_counts: dict = field(default_factory=dict)
    clean: bool = True


def validate_manifest(manifest, vocab: AnpVocabulary,
                      min_train: int = 100) -> ValidationReport:
    """Check the split rules; only shared publishers are hard violations."""
    for r in manifest:
        if not 0 <= r.anp_index < len(vocab):
            raise FormatError(
                f"anp_index {r.anp_index} out of range for vocabulary "
                f"of {len(vocab)}")
    by_split = {"train": set(), "test": set()}
    train_counts: dict[int, int] = {}
    for r in manifest:
        by_split[r.split].add((r.anp_index, r.publisher))
        if r.split == "train":
            train_counts[r.anp_index] = train_counts.get(r.anp_index, 0) + 1
    violations = sorted(by_split["train"] & by_split["test"])
    under = sorted((anp, n) for anp, n in train_counts.items() if n < min_train)
    return ValidationReport(
        publisher_violations=violations,
        under_threshold=under,
        train_counts=train_counts,
        clean=not violations,
    )


def read_ppm(path) -> Tensor:
    """Binary PPM (P6, maxval <= 255) to a [3,H,W] float32 tensor in 0..255."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:2] != b"P6":
        raise FormatError(f"{path}: not a binary PPM file")
    pos, fields = 2, []
    while len(fields) < 3:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        token = data[start:pos]
        if not token.isdigit():
            raise FormatError(f"{path}: bad PPM header token {token!r}")
        fields.append(int(token))
    width, height, maxval = fields
    if maxval > 255 or maxval < 1:
        raise FormatError(f"{path}: unsupported PPM maxval {maxval}")
    pos += 1                             # single whitespace after maxval
    expected = width * height * 3
    raw = data[pos:pos + expected]
    if len(raw) != expected:
        raise FormatError(f"{path}: PPM pixel data truncated")
    pixels = np.frombuffer(raw, dtype=np.uint8).reshape(height, width, 3)
    return pixels.transpose(2, 0, 1).astype(np.float32)


def write_ppm(img: Tensor, path) -> None:
    """Inverse of :func:`read_ppm`; values are clipped and rounded to 0..255."""
    if img.ndim != 3 or img.shape[0] != 3:
        raise ShapeError(f"image must be [3,H,W], got {img.shape}")
    pixels = np.clip(np.rint(img), 0, 255).astype(np.uint8).transpose(1, 2, 0)
    header = f"P6\n{img.shape[2]} {img.shape[1]}\n255\n".encode()
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(pixels.tobytes())


def read_image(path) -> Tensor:
    """Decode any supported image file to [3,H,W] float32 in 0..255.

    PPM is handled natively; other formats need the optional Pillow
    dependency.
    """
    with open(path, "rb") as fh:
        magic = fh.read(2)
    if magic == b"P6":
        return read_ppm(path)
    try:
        from PIL import Image
    except ImportError:
        raise FormatError(
            f"{path}: not a PPM file and Pillow is not installed") from None
    with Image.open(path) as im:
        rgb = np.asarray(im.convert("RGB"))
    return rgb.transpose(2, 0, 1).astype(np.float32)


def _bilinear_axis(img: Tensor, axis: int, out_size: int) -> Tensor:
    """Resample one spatial axis with half-pixel-center bilinear weights."""
    in_size = img.shape[axis]
    if in_size == out_size:
        return img
    src = (np.arange(out_size) + 0.5) * (in_size / out_size) - 0.5
    lo = np.floor(src)
    frac = (src - lo).astype(img.dtype)
    i0 = np.clip(lo, 0, in_size - 1).astype(np.int64)
    i1 = np.clip(lo + 1, 0, in_size - 1).astype(np.int64)
    v0 = np.take(img, i0, axis=axis)
    v1 = np.take(img, i1, axis=axis)
    shape = [1, 1, 1]
    shape[axis] = out_size
    # v0 + f*(v1 - v0) keeps constant inputs exactly constant.
    return v0 + frac.reshape(shape) * (v1 - v0)


def resize_to_canonical(img: Tensor, size: int = CANONICAL_SIZE) -> Tensor:
    """Anisotropic bilinear resize to size x size; aspect is not kept."""
    if img.ndim != 3 or img.shape[0] != 3:
        raise ShapeError(f"image must be [3,H,W], got {img.shape}")
    if img.shape[1] == size and img.shape[2] == size:
        return img.copy()
    out = _bilinear_axis(img, 1, size)
    return np.ascontiguousarray(_bilinear_axis(out, 2, size))


def _check_canonical(img: Tensor):
    if img.shape != (3, CANONICAL_SIZE, CANONICAL_SIZE):
        raise ShapeError(
            f"expected [3,{CANONICAL_SIZE},{CANONICAL_SIZE}] input, got {img.shape}")


def _subtract_means(crop: Tensor, means) -> Tensor:
    if means is None:
        return crop.astype(np.float32, copy=True)
    means = np.asarray(means, dtype=np.float32)
    if means.shape != (3,):
        raise ShapeError(f"channel means must have shape (3,), got {means.shape}")
    return crop.astype(np.float32) - means[:, None, None]


def augment_train(img: Tensor, rng: Rng, means=None) -> Tensor:
    """Random 227x227 crop plus a fair-coin horizontal flip, then centering.

    Draw order is fixed: row offset, column offset, flip. Offsets are
    uniform over {0..29} each.
    """
    _check_canonical(img)
    dy = rng.integers(MAX_CROP_OFFSET + 1)
    dx = rng.integers(MAX_CROP_OFFSET + 1)
    flip = rng.integers(2) == 1
    crop = img[:, dy:dy + CROP_SIZE, dx:dx + CROP_SIZE]
    if flip:
        crop = crop[:, :, ::-1]
    return _subtract_means(crop, means)


def center_crop(img: Tensor, means=None) -> Tensor:
    """Deterministic crop at offset (14, 14), then centering."""
    _check_canonical(img)
    o = CENTER_OFFSET
    crop = img[:, o:o + CROP_SIZE, o:o + CROP_SIZE]
    return _subtract_means(crop, means)


def load_canonical(path) -> Tensor:
    return resize_to_canonical(read_image(path))


def make_batch(records, vocab: AnpVocabulary, mode: str, rng: Rng, means=None):
    """Assemble a [B,3,227,227] batch and its labels from manifest records.

    Train mode gives every record its own child stream (spawned by
    position) so augmentation is independent of batch partitioning;
    test mode center-crops. Unreadable images are skipped with a
    warning.
    """
    if mode not in ("train", "test"):
        raise ValueError(f"mode must be 'train' or 'test', got {mode!r}")
    images, labels = [], []
    for i, record in enumerate(records):
        if not 0 <= record.anp_index < len(vocab):
            raise FormatError(
                f"anp_index {record.anp_index} out of range for vocabulary "
                f"of {len(vocab)}")
        try:
            canonical = load_canonical(record.path)
        except (OSError, FormatError) as exc:
            log.warning("skipping unreadable image %s: %s", record.path, exc)
            continue
        if mode == "train":
            images.append(augment_train(canonical, rng.spawn(i), means))
        else:
            images.append(center_crop(canonical, means))
        labels.append(record.anp_index)
    if not images:
        raise DataError("no readable images in batch")
    return np.stack(images), np.asarray(labels, dtype=np.int64)


def compute_channel_means(records, max_images: int | None = None) -> np.ndarray:
    """Per-channel scalar means over canonical train images, 0..255 scale."""
    totals = np.zeros(3, dtype=np.float64)
    count = 0
    for record in records:
        if record.split != "train":
            continue
        try:
            canonical = load_canonical(record.path)
        except (OSError, FormatError) as exc:
            log.warning("skipping unreadable image %s: %s", record.path, exc)
            continue
        totals += canonical.mean(axis=(1, 2))
        count += 1
        if max_images is not None and count >= max_images:
            break
    if count == 0:
        raise DataError("no readable train images for channel means")
    return (totals / count).astype(np.float32)
