"""Depth-augmented MNIST: IDX parsing, binarized upsampling, class-proportional
depth extrusion, SNR-labelled noise, cohort splits and the XMN1 cache format."""

from __future__ import annotations

import math
import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .rng import uniform_streams

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801
MNIST_SIDE = 28
TRAIN_TOTAL = 60000
TEST_TOTAL = 10000
VAL_RANGE = (45000, 46500)
TEST_N = 1000
TRAIN_MAX = VAL_RANGE[0]
# test-file samples draw noise from streams offset past every training index
TEST_STREAM_OFFSET = TRAIN_TOTAL

IDX_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}

CACHE_MAGIC = b"XMN1"
CACHE_VERSION = 1


class DataError(Exception):
    pass


# IDX -------------------------------------------------------------------------


def _read_header(buf: bytes, magic: int, ndim: int, path) -> tuple[int, ...]:
    need = 4 + 4 * ndim
    if len(buf) < need:
        raise DataError(f"{path}: truncated header ({len(buf)} bytes)")
    got = struct.unpack(">I", buf[:4])[0]
    if got != magic:
        raise DataError(f"{path}: bad magic 0x{got:08x}, expected 0x{magic:08x}")
    return struct.unpack(f">{ndim}I", buf[4:need])


def read_idx_images(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    n, rows, cols = _read_header(buf, IMAGE_MAGIC, 3, path)
    body = buf[16:]
    if len(body) < n * rows * cols:
        raise DataError(f"{path}: truncated, header says {n} images of {rows}x{cols}")
    return np.frombuffer(body, dtype=np.uint8, count=n * rows * cols).reshape(n, rows, cols).copy()


def read_idx_labels(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    (n,) = _read_header(buf, LABEL_MAGIC, 1, path)
    body = buf[8:]
    if len(body) < n:
        raise DataError(f"{path}: truncated, header says {n} labels")
    labels = np.frombuffer(body, dtype=np.uint8, count=n).copy()
    if n and labels.max() > 9:
        raise DataError(f"{path}: label {labels.max()} outside 0-9")
    return labels


def load_idx(images_path, labels_path) -> tuple[np.ndarray, np.ndarray]:
    """Raw uint8 images [n,rows,cols] and labels [n]."""
    images = read_idx_images(images_path)
    labels = read_idx_labels(labels_path)
    if len(images) != len(labels):
        raise DataError(f"count mismatch: {len(images)} images in {images_path}, {len(labels)} labels in {labels_path}")
    return images, labels


def write_idx(images_path, labels_path, images: np.ndarray, labels: np.ndarray) -> None:
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, rows, cols = images.shape
    Path(images_path).write_bytes(struct.pack(">4I", IMAGE_MAGIC, n, rows, cols) + images.tobytes())
    Path(labels_path).write_bytes(struct.pack(">2I", LABEL_MAGIC, len(labels)) + labels.tobytes())


def resolve_data_dir(explicit: str | os.PathLike | None = None) -> Path:
    """First of: explicit path, $MTLFORGE_DATA, ./data/mnist, ~/.cache/mtlforge/mnist."""
    if explicit:
        return Path(explicit)
    env = os.environ.get("MTLFORGE_DATA")
    if env:
        return Path(env)
    for cand in (Path("data/mnist"), Path.home() / ".cache" / "mtlforge" / "mnist"):
        if (cand / IDX_FILES["train"][0]).exists():
            return cand
    return Path.home() / ".cache" / "mtlforge" / "mnist"


def missing_idx_message(directory: Path) -> str:
    names = ", ".join(n for pair in IDX_FILES.values() for n in pair)
    return (
        f"MNIST IDX files not found in {directory}.\n"
        f"Place the four uncompressed files ({names}) there, or point MTLFORGE_DATA at a directory holding them.\n"
        "They ship with the original MNIST distribution (gunzip the .gz files) and with the npm package "
        "'mnist-data' under package/data/."
    )


def load_mnist(directory) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    directory = Path(directory)
    out = {}
    for split, (img, lab) in IDX_FILES.items():
        ip, lp = directory / img, directory / lab
        if not ip.exists() or not lp.exists():
            raise FileNotFoundError(missing_idx_message(directory))
        out[split] = load_idx(ip, lp)
    return out


# per-sample transforms -------------------------------------------------------


def upsample_index(src: int, dst: int) -> np.ndarray:
    """Nearest-neighbour source row for every destination row."""
    return (np.arange(dst) * src) // dst


def preprocess(raw: np.ndarray, target_size: int) -> tuple[np.ndarray, np.ndarray]:
    """Normalise, upsample and binarize one or more raw images.

    Accepts [h,w] or [n,h,w] uint8-valued input and returns ``(image, mask)``
    shaped [1,S,S] or [n,1,S,S]. The image is the binarized mask as float64.
    """
    raw = np.asarray(raw)
    single = raw.ndim == 2
    batch = raw[None] if single else raw
    h, w = batch.shape[1:]
    if target_size < max(h, w):
        raise ValueError(f"target_size {target_size} is smaller than the {h}x{w} source")
    scaled = batch.astype(np.float64) / 255.0
    up = scaled[:, upsample_index(h, target_size)][:, :, upsample_index(w, target_size)]
    mask = (up >= 0.5).astype(np.float64)[:, None]
    return (mask[0], mask[0].copy()) if single else (mask, mask.copy())


def depth_value(label: int) -> float:
    return (int(label) + 1) / 10


def extrude_depth(mask: np.ndarray, label) -> np.ndarray:
    """Foreground at (label+1)/10, background at 0. ``label`` may be a vector for a batch."""
    mask = np.asarray(mask, dtype=np.float64)
    lab = np.asarray(label)
    if lab.ndim == 0:
        return mask * depth_value(int(lab))
    d = (lab.astype(np.int64) + 1) / 10
    return mask * d.reshape((-1,) + (1,) * (mask.ndim - 1))


@dataclass(frozen=True)
class NoiseSpec:
    signal_parts: float = math.inf
    noise_parts: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not self.signal_parts > 0:
            raise ValueError(f"signal parts must be positive, got {self.signal_parts}")
        if self.noise_parts < 0 or math.isinf(self.noise_parts) or math.isnan(self.noise_parts):
            raise ValueError(f"noise parts must be finite and non-negative, got {self.noise_parts}")

    @property
    def alpha(self) -> float:
        if math.isinf(self.signal_parts) or self.noise_parts == 0:
            return 1.0
        return self.signal_parts / (self.signal_parts + self.noise_parts)

    @property
    def clean(self) -> bool:
        return self.alpha == 1.0

    @property
    def label(self) -> str:
        if self.clean:
            return "Inf"
        return f"{_num(self.signal_parts)}:{_num(self.noise_parts)}"

    @classmethod
    def parse(cls, label: str, seed: int = 0) -> "NoiseSpec":
        """``Inf`` or ``a:b`` with positive integers a, b."""
        text = label.strip()
        if text.lower() in ("inf", "inf:0"):
            return cls(math.inf, 0.0, seed)
        parts = text.split(":")
        if len(parts) != 2 or not all(p.strip().isdigit() for p in parts):
            raise ValueError(f"SNR label {label!r} must be 'Inf' or 'a:b' with positive integers")
        a, b = (int(p) for p in parts)
        if a <= 0:
            raise ValueError(f"SNR label {label!r} has zero signal")
        if b <= 0:
            raise ValueError(f"SNR label {label!r} has zero noise; use 'Inf'")
        return cls(float(a), float(b), seed)


def _num(x: float) -> str:
    return str(int(x)) if float(x).is_integer() else repr(float(x))


def inject_noise(image: np.ndarray, spec: NoiseSpec, stream_index=0) -> np.ndarray:
    """``alpha*image + (1-alpha)*u`` with u drawn from the per-sample stream(s).

    ``image`` is one sample [1,S,S] with a scalar ``stream_index`` or a batch
    [n,1,S,S] with one stream index per sample.
    """
    image = np.asarray(image, dtype=np.float64)
    if spec.clean:
        return image.copy()
    idx = np.atleast_1d(np.asarray(stream_index, dtype=np.int64))
    batch = image if image.ndim == 4 else image[None]
    if len(idx) != len(batch):
        raise ValueError(f"{len(batch)} images but {len(idx)} stream indices")
    per = int(np.prod(batch.shape[1:]))
    u = uniform_streams(spec.seed, idx, per).reshape(batch.shape)
    a = spec.alpha
    out = a * batch + (1.0 - a) * u
    return out if image.ndim == 4 else out[0]


def estimate_mixing(clean: np.ndarray, noisy: np.ndarray) -> float:
    """Least-squares slope of ``noisy`` on ``clean`` (with intercept)."""
    c = np.asarray(clean, dtype=np.float64).reshape(-1)
    y = np.asarray(noisy, dtype=np.float64).reshape(-1)
    if c.shape != y.shape:
        raise ValueError(f"shape mismatch: {np.shape(clean)} vs {np.shape(noisy)}")
    cc = c - c.mean()
    var = float(cc @ cc)
    if var == 0.0:
        raise ValueError("clean input has zero variance; mixing is not identifiable")
    return float(cc @ (y - y.mean())) / var


def measured_snr(clean: np.ndarray, noisy: np.ndarray) -> float:
    """Estimated S/N ratio ``alpha/(1-alpha)``; ``inf`` when noisy equals clean."""
    c = np.asarray(clean, dtype=np.float64)
    y = np.asarray(noisy, dtype=np.float64)
    if c.shape != y.shape:
        raise ValueError(f"shape mismatch: {c.shape} vs {y.shape}")
    if np.ptp(c) == 0:
        raise ValueError("clean input has zero variance; mixing is not identifiable")
    if np.array_equal(c, y):
        return math.inf
    a = estimate_mixing(c, y)
    return math.inf if a >= 1.0 else a / (1.0 - a)


# cohorts ---------------------------------------------------------------------


@dataclass(frozen=True)
class CohortSplit:
    train_n: int
    val_range: tuple[int, int] = VAL_RANGE
    test_n: int = TEST_N

    def __post_init__(self):
        if not 1 <= self.train_n <= TRAIN_MAX:
            raise ValueError(f"train_n must be in [1, {TRAIN_MAX}], got {self.train_n}")

    def indices(self) -> dict[str, tuple[str, np.ndarray]]:
        """Cohort name -> (source file, dataset indices)."""
        return {
            "train": ("train", np.arange(self.train_n)),
            "val": ("train", np.arange(*self.val_range)),
            "test": ("test", np.arange(self.test_n)),
        }


def split_cohorts(train_n: int) -> CohortSplit:
    return CohortSplit(train_n)


@dataclass
class Cohort:
    """Arrays for one cohort; ``images``/``depths`` are [n,1,S,S] float64."""

    name: str
    images: np.ndarray
    depths: np.ndarray
    labels: np.ndarray
    indices: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def size(self) -> int:
        return self.images.shape[-1]

    def subset(self, n: int) -> "Cohort":
        return Cohort(self.name, self.images[:n], self.depths[:n], self.labels[:n], self.indices[:n])

    def label_histogram(self, num_classes: int = 10) -> np.ndarray:
        return np.bincount(self.labels.astype(np.int64), minlength=num_classes)


@dataclass(frozen=True)
class RgbdSample:
    image: np.ndarray
    depth: np.ndarray
    label: int
    index: int


def iter_samples(c: Cohort):
    for i in range(len(c)):
        yield RgbdSample(c.images[i], c.depths[i], int(c.labels[i]), int(c.indices[i]))


def build_cohort(name: str, raw: np.ndarray, labels: np.ndarray, indices: np.ndarray, size: int,
                 noise: NoiseSpec, stream_offset: int = 0) -> Cohort:
    image, mask = preprocess(raw[indices], size)
    depth = extrude_depth(mask, labels[indices])
    image = inject_noise(image, noise, indices + stream_offset)
    # round through float32 so a fresh cohort equals its XMN1 cache exactly
    image = image.astype(np.float32).astype(np.float64)
    depth = depth.astype(np.float32).astype(np.float64)
    return Cohort(name, image, depth, labels[indices].astype(np.int64), indices.astype(np.int64))


def build_cohorts(mnist: dict, split: CohortSplit, size: int, noise: NoiseSpec) -> dict[str, Cohort]:
    out = {}
    for name, (source, idx) in split.indices().items():
        raw, labels = mnist[source]
        if idx[-1] >= len(raw):
            raise DataError(f"{source} file has {len(raw)} images, cohort {name} needs index {idx[-1]}")
        offset = TEST_STREAM_OFFSET if source == "test" else 0
        out[name] = build_cohort(name, raw, labels, idx, size, noise, offset)
    return out


# XMN1 cache ------------------------------------------------------------------


def _atomic_write(path: Path, payload: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def encode_cache(c: Cohort) -> bytes:
    n, S = len(c), c.size
    rec = np.dtype([("index", "<u4"), ("label", "u1"), ("image", "<f4", (S * S,)), ("depth", "<f4", (S * S,))])
    body = np.empty(n, dtype=rec)
    body["index"] = c.indices
    body["label"] = c.labels
    body["image"] = c.images.reshape(n, -1)
    body["depth"] = c.depths.reshape(n, -1)
    return CACHE_MAGIC + struct.pack("<3I", CACHE_VERSION, n, S) + body.tobytes()


def write_cache(path, c: Cohort) -> None:
    _atomic_write(Path(path), encode_cache(c))


def read_cache(path, name: str | None = None) -> Cohort:
    """Load an XMN1 file; float32 payloads are widened to float64."""
    path = Path(path)
    buf = path.read_bytes()
    if len(buf) < 16 or buf[:4] != CACHE_MAGIC:
        raise DataError(f"{path}: not an XMN1 cache")
    version, n, S = struct.unpack("<3I", buf[4:16])
    if version != CACHE_VERSION:
        raise DataError(f"{path}: unsupported cache version {version}")
    rec = np.dtype([("index", "<u4"), ("label", "u1"), ("image", "<f4", (S * S,)), ("depth", "<f4", (S * S,))])
    if len(buf) - 16 != n * rec.itemsize:
        raise DataError(f"{path}: expected {n} records of {rec.itemsize} bytes, found {len(buf) - 16} bytes")
    body = np.frombuffer(buf, dtype=rec, offset=16, count=n)
    return Cohort(
        name or path.stem,
        body["image"].astype(np.float64).reshape(n, 1, S, S),
        body["depth"].astype(np.float64).reshape(n, 1, S, S),
        body["label"].astype(np.int64),
        body["index"].astype(np.int64),
    )
