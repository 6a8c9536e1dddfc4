"""Reader and writer for the IDX image/label file format.

Images: magic 0x00000803, then big-endian u32 count, rows, cols and one
unsigned byte per pixel. Labels: magic 0x00000801, u32 count, one byte each.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from services.data.datasets import LabeledDataset
from shared.errors import BadMagicError, CountMismatchError, DatasetError, TruncatedPayloadError
from shared.logging_config import get_logger

logger = get_logger(__name__)

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801


def _read(path: Path) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise DatasetError(f"{path}: cannot read IDX file ({exc.strerror})") from exc


def _header(blob: bytes, path: Path, magic: int, dims: int) -> tuple[int, ...]:
    size = 4 * (1 + dims)
    if len(blob) < size:
        raise TruncatedPayloadError(f"{path}: header needs {size} bytes, file has {len(blob)}")
    found, *shape = struct.unpack(f">{1 + dims}I", blob[:size])
    if found != magic:
        raise BadMagicError(f"{path}: magic 0x{found:08x}, expected 0x{magic:08x}")
    return tuple(shape)


def read_idx_images(path: Path) -> np.ndarray:
    """Raw ``uint8`` array of shape ``[N, rows, cols]``."""
    blob = _read(path)
    count, rows, cols = _header(blob, path, IMAGE_MAGIC, 3)
    need = count * rows * cols
    payload = blob[16:]
    if len(payload) < need:
        raise TruncatedPayloadError(f"{path}: {need} pixel bytes declared, {len(payload)} present")
    return np.frombuffer(payload[:need], dtype=np.uint8).reshape(count, rows, cols)


def read_idx_labels(path: Path) -> np.ndarray:
    blob = _read(path)
    (count,) = _header(blob, path, LABEL_MAGIC, 1)
    payload = blob[8:]
    if len(payload) < count:
        raise TruncatedPayloadError(f"{path}: {count} labels declared, {len(payload)} present")
    return np.frombuffer(payload[:count], dtype=np.uint8).astype(np.int64)


def load_idx(
    images_path: Path,
    labels_path: Path | None = None,
    name: str | None = None,
    num_classes: int | None = None,
) -> LabeledDataset:
    """Load an image file and, optionally, its labels into a LabeledDataset.

    Pixels are scaled by 1/255. ``num_classes`` defaults to ``max(label) + 1``
    (10 when no labels are given).
    """
    raw = read_idx_images(images_path)
    labels = None
    if labels_path is not None:
        labels = read_idx_labels(labels_path)
        if labels.shape[0] != raw.shape[0]:
            raise CountMismatchError(
                f"{images_path} holds {raw.shape[0]} images but {labels_path} holds "
                f"{labels.shape[0]} labels"
            )
    if num_classes is None:
        num_classes = int(labels.max()) + 1 if labels is not None and labels.size else 10
    count, rows, cols = raw.shape
    logger.debug("idx_loaded", path=str(images_path), count=count, rows=rows, cols=cols)
    return LabeledDataset(
        images=raw.reshape(count, rows * cols).astype(np.float64) / 255.0,
        labels=labels,
        name=name or Path(images_path).stem,
        image_shape=(rows, cols),
        num_classes=num_classes,
    )


def encode_idx_images(images: np.ndarray, image_shape: tuple[int, int]) -> bytes:
    rows, cols = image_shape
    pixels = np.rint(np.clip(images, 0.0, 1.0) * 255.0).astype(np.uint8)
    return struct.pack(">4I", IMAGE_MAGIC, pixels.shape[0], rows, cols) + pixels.tobytes()


def encode_idx_labels(labels: np.ndarray) -> bytes:
    if labels.size and (labels.min() < 0 or labels.max() > 255):
        raise DatasetError("IDX labels must fit in one unsigned byte")
    return struct.pack(">2I", LABEL_MAGIC, labels.shape[0]) + labels.astype(np.uint8).tobytes()


def write_idx(ds: LabeledDataset, images_path: Path, labels_path: Path | None = None) -> None:
    """Write ``ds`` in IDX form; pixels are quantized to ``round(255 * x)``."""
    images_path = Path(images_path)
    images_path.parent.mkdir(parents=True, exist_ok=True)
    images_path.write_bytes(encode_idx_images(ds.images, ds.image_shape))
    if labels_path is not None:
        Path(labels_path).write_bytes(encode_idx_labels(ds.require_labels()))
