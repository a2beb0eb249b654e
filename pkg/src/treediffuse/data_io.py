"""Dataset ingestion, checkpoint container, metrics logs, and image grids.

All ingestion produces float32 images in [0, 1] with shape (n, c, h, w);
nothing in this module ever rescales to other ranges. File formats are the
public IDX layout for the MNIST family, the CIFAR-10 binary batch layout,
PNG for grids, JSON for manifests/reports, and line-delimited JSON for logs.
"""
from __future__ import annotations

import gzip
import hashlib
import json
import queue
import struct
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Optional, Sequence

import numpy as np
from PIL import Image, ImageDraw

from .errors import ConfigError, DomainError, IngestionError, IntegrityError

DATASET_NAMES = ("mnist", "fashion_mnist", "cifar10", "synthetic")

_BLOB_MAGIC = b"TDCK0001"


# ---------------------------------------------------------------------------
# dataset specs and containers


@dataclass(frozen=True)
class DatasetSpec:
    """What to load and how large the splits are; images are [0, 1] floats."""

    name: str
    image_shape: tuple[int, int, int]
    num_classes: int
    n_train: int
    n_test: int
    data_dir: Optional[str] = None
    # synthetic-only knobs
    noise_std: float = 0.02

    def __post_init__(self):
        if self.name not in DATASET_NAMES:
            raise ConfigError(f"unknown dataset {self.name!r}; expected one of {DATASET_NAMES}")


@dataclass
class Dataset:
    images: np.ndarray  # (n, c, h, w) float32 in [0, 1]
    labels: np.ndarray  # (n,) int64

    def __len__(self) -> int:
        return len(self.images)


@dataclass
class DatasetSplits:
    spec: DatasetSpec
    train: Dataset
    test: Dataset


def _standard_spec(name: str) -> tuple[tuple[int, int, int], int]:
    if name in ("mnist", "fashion_mnist"):
        return (1, 28, 28), 10
    if name == "cifar10":
        return (3, 32, 32), 10
    raise ConfigError(f"no standard shape for dataset {name!r}")


# ---------------------------------------------------------------------------
# IDX (MNIST family)


def _open_maybe_gzip(path: Path):
    with open(path, "rb") as fh:
        magic = fh.read(2)
    if magic == b"\x1f\x8b":
        return gzip.open(path, "rb")
    return open(path, "rb")


def read_idx(path: Path) -> np.ndarray:
    """Parse one IDX file (unsigned-byte payloads only)."""
    try:
        with _open_maybe_gzip(path) as fh:
            header = fh.read(4)
            if len(header) != 4 or header[0] != 0 or header[1] != 0:
                raise IngestionError(f"bad IDX magic in {path}")
            dtype_code, ndim = header[2], header[3]
            if dtype_code != 0x08:
                raise IngestionError(f"unsupported IDX dtype 0x{dtype_code:02x} in {path}")
            dims = struct.unpack(f">{ndim}I", fh.read(4 * ndim))
            payload = fh.read()
    except OSError as exc:
        raise IngestionError(f"cannot read IDX file {path}: {exc}") from exc
    expected = int(np.prod(dims)) if dims else 0
    if len(payload) != expected:
        raise IngestionError(f"IDX payload of {path} has {len(payload)} bytes, expected {expected}")
    return np.frombuffer(payload, dtype=np.uint8).reshape(dims)


def _find_idx(data_dir: Path, stem: str) -> Path:
    for suffix in ("", ".gz"):
        cand = data_dir / (stem + suffix)
        if cand.exists():
            return cand
    raise IngestionError(f"missing dataset file {data_dir / stem}[.gz]")


def _load_mnist_like(data_dir: Path) -> tuple[Dataset, Dataset]:
    out = []
    for split in ("train", "t10k"):
        images = read_idx(_find_idx(data_dir, f"{split}-images-idx3-ubyte"))
        labels = read_idx(_find_idx(data_dir, f"{split}-labels-idx1-ubyte"))
        if images.ndim != 3 or len(images) != len(labels):
            raise IngestionError(f"inconsistent IDX pair for split {split} in {data_dir}")
        imgs = (images.astype(np.float32) / 255.0)[:, None, :, :]
        out.append(Dataset(images=imgs, labels=labels.astype(np.int64)))
    return out[0], out[1]


# ---------------------------------------------------------------------------
# CIFAR-10 binary batches


def read_cifar_batch(path: Path) -> tuple[np.ndarray, np.ndarray]:
    """Parse one CIFAR-10 binary batch: records of 1 label byte + 3072 pixels."""
    try:
        raw = np.frombuffer(Path(path).read_bytes(), dtype=np.uint8)
    except OSError as exc:
        raise IngestionError(f"cannot read CIFAR batch {path}: {exc}") from exc
    record = 1 + 3 * 32 * 32
    if len(raw) == 0 or len(raw) % record != 0:
        raise IngestionError(f"CIFAR batch {path} has {len(raw)} bytes, not a multiple of {record}")
    raw = raw.reshape(-1, record)
    labels = raw[:, 0].astype(np.int64)
    images = raw[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / 255.0
    return images, labels


def _load_cifar10(data_dir: Path) -> tuple[Dataset, Dataset]:
    train_parts = [read_cifar_batch(_require(data_dir / f"data_batch_{i}.bin")) for i in range(1, 6)]
    test_imgs, test_labels = read_cifar_batch(_require(data_dir / "test_batch.bin"))
    train = Dataset(
        images=np.concatenate([p[0] for p in train_parts]),
        labels=np.concatenate([p[1] for p in train_parts]),
    )
    return train, Dataset(images=test_imgs, labels=test_labels)


def _require(path: Path) -> Path:
    if not path.exists():
        raise IngestionError(f"missing dataset file {path}")
    return path


# ---------------------------------------------------------------------------
# synthetic disc dataset


_DISC_LAYOUT = (
    # (center_y, center_x) in unit coordinates, radius in unit coordinates
    ((0.30, 0.30), 0.14),
    ((0.68, 0.70), 0.22),
    ((0.30, 0.72), 0.09),
    ((0.72, 0.28), 0.17),
)


def render_disc(size: int, center: tuple[float, float], radius: float) -> np.ndarray:
    """Anti-aliased filled disc on a [0, 1] canvas."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32) / (size - 1)
    dist = np.sqrt((yy - center[0]) ** 2 + (xx - center[1]) ** 2)
    edge = 1.0 / (size - 1)
    return np.clip((radius - dist) / edge + 0.5, 0.0, 1.0)


def make_synthetic(
    n: int, num_classes: int, image_size: int, seed: int, noise_std: float = 0.02
) -> Dataset:
    """Deterministic separable discs: one position/radius family per class."""
    if not 2 <= num_classes <= len(_DISC_LAYOUT):
        raise ConfigError(f"synthetic dataset supports 2..{len(_DISC_LAYOUT)} classes, got {num_classes}")
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, num_classes, size=n).astype(np.int64)
    images = np.empty((n, 1, image_size, image_size), dtype=np.float32)
    for i, lab in enumerate(labels):
        (cy, cx), radius = _DISC_LAYOUT[int(lab)]
        jitter = rng.normal(0.0, 0.02, size=3)
        img = render_disc(
            image_size,
            (float(cy + jitter[0]), float(cx + jitter[1])),
            float(max(radius + 0.25 * radius * jitter[2], 0.04)),
        )
        if noise_std > 0:
            img = img + rng.normal(0.0, noise_std, size=img.shape).astype(np.float32)
        images[i, 0] = np.clip(img, 0.0, 1.0)
    return Dataset(images=images, labels=labels)


# ---------------------------------------------------------------------------
# top-level loader


def load_dataset(spec: DatasetSpec, seed: int = 0) -> DatasetSplits:
    """Load both splits, shuffle deterministically, and apply split-size caps."""
    if spec.name == "synthetic":
        train = make_synthetic(spec.n_train, spec.num_classes, spec.image_shape[1], seed, spec.noise_std)
        test = make_synthetic(spec.n_test, spec.num_classes, spec.image_shape[1], seed + 1, spec.noise_std)
        return DatasetSplits(spec=spec, train=train, test=test)
    if spec.data_dir is None:
        raise IngestionError(f"dataset {spec.name!r} requires data_dir pointing at its raw files")
    data_dir = Path(spec.data_dir)
    if spec.name in ("mnist", "fashion_mnist"):
        train, test = _load_mnist_like(data_dir)
    else:
        train, test = _load_cifar10(data_dir)
    expected_shape = _standard_spec(spec.name)[0]
    if train.images.shape[1:] != expected_shape:
        raise IngestionError(
            f"{spec.name} images have shape {train.images.shape[1:]}, expected {expected_shape}"
        )
    rng = np.random.default_rng(seed)
    out = []
    for split, cap in ((train, spec.n_train), (test, spec.n_test)):
        order = rng.permutation(len(split))
        take = order[: cap if cap > 0 else len(split)]
        out.append(Dataset(images=split.images[take].copy(), labels=split.labels[take].copy()))
    return DatasetSplits(spec=spec, train=out[0], test=out[1])


# ---------------------------------------------------------------------------
# batching


def iter_batches(
    images: np.ndarray,
    labels: Optional[np.ndarray],
    batch_size: int,
    rng: Optional[np.random.Generator] = None,
    drop_last: bool = False,
) -> Iterator[tuple[np.ndarray, Optional[np.ndarray]]]:
    """Yield (image, label) batches; shuffles when an rng is supplied."""
    n = len(images)
    order = rng.permutation(n) if rng is not None else np.arange(n)
    for start in range(0, n, batch_size):
        idx = order[start : start + batch_size]
        if drop_last and len(idx) < batch_size:
            return
        yield images[idx], (labels[idx] if labels is not None else None)


class PrefetchIterator:
    """Wrap an iterator with one background worker and a bounded queue."""

    _DONE = object()

    def __init__(self, source: Iterable, max_queued: int = 2):
        self._queue: queue.Queue = queue.Queue(maxsize=max_queued)
        self._error: Optional[BaseException] = None
        self._thread = threading.Thread(target=self._fill, args=(iter(source),), daemon=True)
        self._thread.start()

    def _fill(self, source):
        try:
            for item in source:
                self._queue.put(item)
        except BaseException as exc:  # surfaced on the consumer side
            self._error = exc
        finally:
            self._queue.put(self._DONE)

    def __iter__(self):
        return self

    def __next__(self):
        item = self._queue.get()
        if item is self._DONE:
            self._thread.join()
            if self._error is not None:
                raise self._error
            raise StopIteration
        return item


# ---------------------------------------------------------------------------
# checkpoint container


def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def serialize_arrays(arrays: Mapping[str, np.ndarray]) -> bytes:
    """Deterministic binary blob holding a name->array mapping."""
    parts = [_BLOB_MAGIC, struct.pack(">I", len(arrays))]
    for key in sorted(arrays):
        arr = np.ascontiguousarray(arrays[key])
        name = key.encode("utf-8")
        dtype = arr.dtype.str.encode("ascii")
        parts.append(struct.pack(">H", len(name)))
        parts.append(name)
        parts.append(struct.pack(">B", len(dtype)))
        parts.append(dtype)
        parts.append(struct.pack(">B", arr.ndim))
        parts.append(struct.pack(f">{arr.ndim}q", *arr.shape))
        raw = arr.tobytes()
        parts.append(struct.pack(">q", len(raw)))
        parts.append(raw)
    return b"".join(parts)


def deserialize_arrays(blob: bytes) -> dict[str, np.ndarray]:
    if blob[: len(_BLOB_MAGIC)] != _BLOB_MAGIC:
        raise IntegrityError("bad blob magic")
    off = len(_BLOB_MAGIC)
    (count,) = struct.unpack_from(">I", blob, off)
    off += 4
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from(">H", blob, off)
        off += 2
        name = blob[off : off + name_len].decode("utf-8")
        off += name_len
        (dtype_len,) = struct.unpack_from(">B", blob, off)
        off += 1
        dtype = np.dtype(blob[off : off + dtype_len].decode("ascii"))
        off += dtype_len
        (ndim,) = struct.unpack_from(">B", blob, off)
        off += 1
        shape = struct.unpack_from(f">{ndim}q", blob, off)
        off += 8 * ndim
        (nbytes,) = struct.unpack_from(">q", blob, off)
        off += 8
        out[name] = np.frombuffer(blob[off : off + nbytes], dtype=dtype).reshape(shape).copy()
        off += nbytes
    return out


@dataclass
class CheckpointContainer:
    """Named parameter blobs plus a manifest describing the run they came from.

    ``manifest`` must carry config snapshot/digest and seed; stage-specific
    metadata (topology payload, conditional_mode) travels in the same dict.
    """

    components: dict[str, dict[str, np.ndarray]]
    manifest: dict = field(default_factory=dict)

    @property
    def digest(self) -> str:
        blob_digests = {name: _sha256(serialize_arrays(arrays)) for name, arrays in self.components.items()}
        meta = {k: v for k, v in self.manifest.items() if k != "components"}
        return _sha256(canonical_json({"components": blob_digests, "manifest": meta}).encode())


def save_checkpoint(container: CheckpointContainer, path: str | Path) -> str:
    """Write manifest + one blob per component; returns the container digest."""
    root = Path(path)
    (root / "blobs").mkdir(parents=True, exist_ok=True)
    components_meta = {}
    for name, arrays in container.components.items():
        blob = serialize_arrays(arrays)
        fname = name.replace("/", "_").replace(":", "__") + ".bin"
        (root / "blobs" / fname).write_bytes(blob)
        components_meta[name] = {"file": fname, "digest": _sha256(blob), "nbytes": len(blob)}
    manifest = dict(container.manifest)
    manifest["components"] = components_meta
    manifest["container_digest"] = CheckpointContainer(container.components, container.manifest).digest
    (root / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=1) + "\n")
    return manifest["container_digest"]


def load_checkpoint(path: str | Path) -> CheckpointContainer:
    """Read a container back, verifying every blob digest."""
    root = Path(path)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise IntegrityError(f"no checkpoint manifest at {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    components: dict[str, dict[str, np.ndarray]] = {}
    for name, meta in manifest.get("components", {}).items():
        blob_path = root / "blobs" / meta["file"]
        if not blob_path.exists():
            raise IntegrityError(f"checkpoint blob missing for component {name!r}")
        blob = blob_path.read_bytes()
        if _sha256(blob) != meta["digest"]:
            raise IntegrityError(f"digest mismatch for component {name!r} in {root}")
        components[name] = deserialize_arrays(blob)
    stored = {k: v for k, v in manifest.items() if k not in ("components", "container_digest")}
    container = CheckpointContainer(components=components, manifest=stored)
    if manifest.get("container_digest") != container.digest:
        raise IntegrityError(f"container digest mismatch in {root}")
    return container


def checkpoint_digest_on_disk(path: str | Path) -> str:
    """Digest of the saved bytes (manifest + blobs), without deserializing."""
    root = Path(path)
    parts = []
    for file in sorted(root.rglob("*")):
        if file.is_file():
            parts.append(file.relative_to(root).as_posix().encode())
            parts.append(file.read_bytes())
    return _sha256(b"".join(parts))


def require_structural_match(manifest: Mapping, expected: Mapping, keys: Sequence[str]) -> None:
    """Refuse checkpoints whose structural config differs from the run's."""
    stored = manifest.get("config", {})
    for key in keys:
        if _dig(stored, key) != _dig(expected, key):
            raise ConfigError(
                f"checkpoint config mismatch at {key!r}: stored {_dig(stored, key)!r}, requested {_dig(expected, key)!r}"
            )


def _dig(mapping: Mapping, dotted: str):
    cur = mapping
    for part in dotted.split("."):
        if not isinstance(cur, Mapping) or part not in cur:
            return None
        cur = cur[part]
    return cur


# ---------------------------------------------------------------------------
# metrics / training logs (line-delimited JSON)


def append_jsonl(path: str | Path, record: Mapping) -> None:
    with open(path, "a") as fh:
        fh.write(canonical_json(record) + "\n")


def read_jsonl(path: str | Path) -> list[dict]:
    out = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(json.loads(line))
    return out


# ---------------------------------------------------------------------------
# image grids


GRID_PAD = 2
GRID_HEADER = 14


def write_image_grid(
    images: Sequence[np.ndarray] | np.ndarray,
    layout: tuple[int, int],
    annotations: Optional[Sequence[str]] = None,
    path: str | Path = "grid.png",
) -> dict:
    """Tile [0, 1] images row-major into a PNG; annotations label the columns.

    Returns the grid geometry (tile size, padding, header height) so callers
    can locate tiles in the written file.
    """
    images = list(images)
    if len(images) == 0:
        raise DomainError("cannot write an empty image grid")
    rows, cols = layout
    if rows * cols != len(images):
        raise DomainError(f"layout {rows}x{cols} does not match {len(images)} images")
    shapes = {tuple(img.shape) for img in images}
    if len(shapes) != 1:
        raise DomainError(f"images have mixed shapes: {sorted(shapes)}")
    c, h, w = images[0].shape
    if c not in (1, 3):
        raise DomainError(f"grid images must have 1 or 3 channels, got {c}")
    header = GRID_HEADER if annotations is not None else 0
    if annotations is not None and len(annotations) != cols:
        raise DomainError(f"got {len(annotations)} annotations for {cols} columns")
    canvas_w = cols * w + (cols + 1) * GRID_PAD
    canvas_h = header + rows * h + (rows + 1) * GRID_PAD
    mode = "L" if c == 1 else "RGB"
    canvas = Image.new(mode, (canvas_w, canvas_h), color=255 if c == 1 else (255, 255, 255))
    for i, img in enumerate(images):
        r, col = divmod(i, cols)
        arr = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
        arr = np.round(arr * 255.0).astype(np.uint8)
        tile = Image.fromarray(arr[0] if c == 1 else np.moveaxis(arr, 0, -1), mode=mode)
        x = GRID_PAD + col * (w + GRID_PAD)
        y = header + GRID_PAD + r * (h + GRID_PAD)
        canvas.paste(tile, (x, y))
    if annotations is not None:
        draw = ImageDraw.Draw(canvas)
        for col, text in enumerate(annotations):
            x = GRID_PAD + col * (w + GRID_PAD)
            draw.text((x, 1), str(text), fill=0 if c == 1 else (0, 0, 0))
    canvas.save(Path(path), format="PNG")
    return {"tile_w": w, "tile_h": h, "pad": GRID_PAD, "header": header, "rows": rows, "cols": cols}


def read_grid_tile(path: str | Path, geometry: Mapping, row: int, col: int) -> np.ndarray:
    """Crop one tile back out of a written grid, as [0, 1] floats (c, h, w)."""
    img = Image.open(Path(path))
    w, h = geometry["tile_w"], geometry["tile_h"]
    x = geometry["pad"] + col * (w + geometry["pad"])
    y = geometry["header"] + geometry["pad"] + row * (h + geometry["pad"])
    tile = np.asarray(img.crop((x, y, x + w, y + h)), dtype=np.float32) / 255.0
    if tile.ndim == 2:
        return tile[None]
    return np.moveaxis(tile, -1, 0)
