"""Dataset ingestion (IDX), preprocessing, the affine test set, and image dumps."""
import csv
import gzip
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .compositor import ClampRanges, compose, support_inside_frame
from .core.rng import keyed_rng

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801
PAD = 6


class IdxFormatError(ValueError):
    pass


@dataclass
class DatasetSplit:
    images: np.ndarray
    labels: np.ndarray
    provenance: str = "real"
    params: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        self.images = np.asarray(self.images, np.float32)
        self.labels = np.asarray(self.labels, np.int64)
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() > 9):
            raise ValueError("labels must lie in [0, 10)")
        if self.images.size and (self.images.min() < 0 or self.images.max() > 1):
            raise ValueError("pixels must lie in [0, 1]")

    def __len__(self):
        return len(self.labels)

    def subset(self, idx):
        params = None if self.params is None else self.params[idx]
        return DatasetSplit(self.images[idx], self.labels[idx], self.provenance, params)


@dataclass
class CompositeSample:
    image: np.ndarray
    label: int
    provenance: str = "synthesized"
    cycle: int = 0
    index: int = 0
    hardness: float = float("nan")


# IDX

def read_idx(path, expected_magic=None):
    """Parse an IDX file of unsigned bytes into an array."""
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise IdxFormatError(f"{path}: expected at least 4 header bytes, got {len(raw)}")
    magic = struct.unpack(">I", raw[:4])[0]
    if expected_magic is not None and magic != expected_magic:
        raise IdxFormatError(f"{path}: bad magic 0x{magic:08x} at byte 0, "
                             f"expected 0x{expected_magic:08x}")
    if magic >> 8 != 0x08:
        raise IdxFormatError(f"{path}: unsupported IDX data type 0x{magic >> 8:06x} at byte 0")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IdxFormatError(f"{path}: truncated header, expected {header} bytes, got {len(raw)}")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    expected = header + int(np.prod(dims))
    if len(raw) != expected:
        raise IdxFormatError(f"{path}: payload size mismatch, expected {expected} bytes "
                             f"(header {header} + {int(np.prod(dims))}), got {len(raw)}")
    return np.frombuffer(raw, np.uint8, offset=header).reshape(dims)


def write_idx(path, array):
    arr = np.ascontiguousarray(array, np.uint8)
    magic = 0x00000800 | arr.ndim
    with open(path, "wb") as fh:
        fh.write(struct.pack(f">I{arr.ndim}I", magic, *arr.shape))
        fh.write(arr.tobytes())


def load_idx(images_path, labels_path, provenance="real"):
    images = read_idx(images_path, IMAGES_MAGIC)
    labels = read_idx(labels_path, LABELS_MAGIC)
    if len(images) != len(labels):
        raise IdxFormatError(f"count mismatch: {images_path} declares {len(images)} items "
                             f"at byte 4, {labels_path} declares {len(labels)} at byte 4")
    return DatasetSplit(images.astype(np.float32) / 255.0, labels, provenance)


def quantize(images):
    return np.clip(np.rint(np.asarray(images) * 255.0), 0, 255).astype(np.uint8)


def save_idx(split, images_path, labels_path):
    write_idx(images_path, quantize(split.images))
    write_idx(labels_path, split.labels.astype(np.uint8))


def pad_to_40(images):
    """Pad 28x28 digits (single or batch) with 6 black pixels on every side."""
    arr = np.asarray(images)
    if arr.shape[-2:] != (28, 28):
        raise ValueError(f"pad_to_40 expects 28x28 input, got {arr.shape}")
    width = [(0, 0)] * (arr.ndim - 2) + [(PAD, PAD), (PAD, PAD)]
    return np.pad(arr, width)


# bundled MNIST subset

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def write_bundled_mnist(dest, test_per_class=100, seed=0):
    """Write the 5,000-digit MNIST sample shipped with mlxtend as IDX files.

    The sample holds 500 real MNIST digits per class; ``test_per_class`` of
    each class are held out (stratified, seeded) for the test split.
    """
    from importlib.resources import files

    raw = (files("mlxtend.data") / "data" / "mnist_5k.csv.gz").read_bytes()
    table = np.loadtxt(gzip.decompress(raw).decode().splitlines(), delimiter=",")
    pixels = table[:, :-1].reshape(-1, 28, 28).astype(np.uint8)
    labels = table[:, -1].astype(np.uint8)
    rng = keyed_rng(seed, 0x4D4E)
    test_idx = np.concatenate([
        rng.choice(np.flatnonzero(labels == c), test_per_class, replace=False) for c in range(10)])
    is_test = np.zeros(len(labels), bool)
    is_test[test_idx] = True
    dest = Path(dest)
    dest.mkdir(parents=True, exist_ok=True)
    for split, mask in (("train", ~is_test), ("test", is_test)):
        order = np.flatnonzero(mask)
        order = order[rng.permutation(len(order))]
        img_name, lbl_name = MNIST_FILES[split]
        write_idx(dest / img_name, pixels[order])
        write_idx(dest / lbl_name, labels[order])
    return dest


def load_mnist(data_dir, split):
    """Load an MNIST split from ``data_dir`` and pad it to 40x40."""
    img_name, lbl_name = MNIST_FILES[split]
    raw = load_idx(Path(data_dir) / img_name, Path(data_dir) / lbl_name)
    return DatasetSplit(pad_to_40(raw.images), raw.labels, "real")


# surrogate affine test set

def _threads():
    return max(1, int(os.environ.get("TERSE_THREADS", os.cpu_count() or 1)))


def draw_inside_frame(images, ranges, seed, stream, first_index=0, max_tries=100):
    """Uniform parameters per image, redrawn while the warped ink would leave the frame."""
    params = np.empty((len(images), 6))
    for k in range(len(images)):
        for attempt in range(max_tries):
            rng = keyed_rng(seed, stream, first_index + k, attempt)
            p = ranges.sample(rng, 1)
            if support_inside_frame(images[k:k + 1], p)[0]:
                break
        params[k] = p[0]
    return params


def gen_affine_testset(base, ranges=None, n_per_digit=1, seed=0, chunk=256):
    """Warp every base digit ``n_per_digit`` times with uniformly drawn affine
    parameters (composited over black, like synthesizer output).

    Draws whose ink would leave the frame are replaced by a fresh draw.
    Work is split into fixed chunks with per-index seeds, so the result does
    not depend on the ``TERSE_THREADS`` worker count.
    """
    ranges = ranges or ClampRanges()
    src_idx = np.repeat(np.arange(len(base)), n_per_digit)
    images = base.images[src_idx]

    def work(start):
        sl = slice(start, start + chunk)
        p = draw_inside_frame(images[sl], ranges, seed, 0xAFF, first_index=start)
        out, _ = compose(images[sl], np.zeros_like(images[sl]), p)
        return p, np.clip(out, 0.0, 1.0).astype(np.float32)

    starts = range(0, len(images), chunk)
    with ThreadPoolExecutor(max_workers=_threads()) as pool:
        results = list(pool.map(work, starts))
    params = np.concatenate([r[0] for r in results]) if results else np.empty((0, 6))
    out = np.concatenate([r[1] for r in results]) if results else images
    return DatasetSplit(out, base.labels[src_idx], "affine", params)


def dataset_hash(split):
    import hashlib

    h = hashlib.sha256()
    h.update(np.ascontiguousarray(split.images).tobytes())
    h.update(np.ascontiguousarray(split.labels).tobytes())
    return h.hexdigest()


# image dumps

def write_pgm(path, image):
    q = quantize(image)
    h, w = q.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(q.tobytes())


def read_pgm(path):
    raw = Path(path).read_bytes()
    parts = raw.split(maxsplit=4)
    if parts[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    data = np.frombuffer(parts[4][:w * h], np.uint8).reshape(h, w)
    return data.astype(np.float32) / maxval


MANIFEST_HEADER = ["file", "cycle", "index", "label", "hardness"]


def export_samples(samples, directory, fmt="pgm"):
    """Dump samples as ``<cycle>_<index>_<label>.<fmt>`` plus ``manifest.csv``."""
    if fmt not in ("pgm", "png"):
        raise ValueError(f"unknown image format {fmt!r}")
    directory = Path(directory)
    try:
        directory.mkdir(parents=True, exist_ok=True)
        probe = directory / ".write_test"
        probe.touch()
        probe.unlink()
    except OSError as exc:
        raise PermissionError(f"cannot write samples to {directory}: {exc}") from exc
    rows = []
    for s in samples:
        name = f"{s.cycle}_{s.index}_{s.label}.{fmt}"
        if fmt == "pgm":
            write_pgm(directory / name, s.image)
        else:
            from PIL import Image

            Image.fromarray(quantize(s.image)).save(directory / name)
        rows.append([name, s.cycle, s.index, s.label, f"{s.hardness:.6f}"])
    with open(directory / "manifest.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_HEADER)
        writer.writerows(rows)
    return len(rows)
