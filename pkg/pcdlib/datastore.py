#!/usr/bin/env python3
"""On-disk image store: a directory of per-image tensor files plus a JSON manifest.

Each ``images/NNNNNN.bin`` holds a single ``image`` entry in the checkpoint
entry encoding; ``manifest.json`` lists the files with their layout metadata.
"""

import json
import logging
import os
from typing import Any, Dict

import numpy as np

from .checkpoint import decode_entries, encode_entries
from .exceptions import CheckpointError, DatasetError
from .trainer.data import ImageStore

logger = logging.getLogger("pcdlib")

MANIFEST = "manifest.json"
STORE_FORMAT = "pcdlib-images"
STORE_VERSION = 1


def _image_file(i: int) -> str:
    return os.path.join("images", f"{i:06d}.bin")


def save_store(store: ImageStore, directory: str) -> None:
    """Write ``store`` under ``directory`` (created if needed)."""
    try:
        os.makedirs(os.path.join(directory, "images"), exist_ok=True)
        entries = []
        for i in range(len(store)):
            name = _image_file(i)
            with open(os.path.join(directory, name), "wb") as f:
                f.write(encode_entries([("image", store.images[i])]))
            meta = store.metadata[i] if i < len(store.metadata) else {}
            entries.append({"file": name, "meta": meta})
        manifest: Dict[str, Any] = {
            "format": STORE_FORMAT,
            "version": STORE_VERSION,
            "count": len(store),
            "size": store.size if len(store) else None,
            "seed": store.seed,
            "images": entries,
        }
        with open(os.path.join(directory, MANIFEST), "w") as f:
            json.dump(manifest, f, indent=2, sort_keys=True)
    except OSError as e:
        raise DatasetError(f"cannot write image store {directory}: {e}") from e
    logger.debug(f"wrote {len(store)} images to {directory}")


def load_store(directory: str) -> ImageStore:
    path = os.path.join(directory, MANIFEST)
    try:
        with open(path) as f:
            manifest = json.load(f)
    except OSError as e:
        raise DatasetError(f"cannot read image store manifest {path}: {e.strerror or e}") from e
    except json.JSONDecodeError as e:
        raise DatasetError(f"malformed image store manifest {path}: {e}") from e

    if manifest.get("format") != STORE_FORMAT:
        raise DatasetError(f"{path} is not an image store manifest")
    if manifest.get("version") != STORE_VERSION:
        raise DatasetError(f"unsupported image store version {manifest.get('version')}")
    listed = manifest.get("images", [])
    if manifest.get("count") != len(listed):
        raise DatasetError(f"manifest declares {manifest.get('count')} images but lists {len(listed)}")

    images, metadata = [], []
    for item in listed:
        file_path = os.path.join(directory, item["file"])
        try:
            with open(file_path, "rb") as f:
                entries = decode_entries(f.read())
        except OSError as e:
            raise DatasetError(f"cannot read image {file_path}: {e.strerror or e}") from e
        except CheckpointError as e:
            raise DatasetError(f"corrupt image {file_path}: {e}") from e
        if "image" not in entries or entries["image"].ndim != 3:
            raise DatasetError(f"{file_path} does not hold a [3, H, W] image")
        images.append(entries["image"])
        metadata.append(item.get("meta", {}))

    size = manifest.get("size") or 0
    if images and any(img.shape != images[0].shape for img in images):
        raise DatasetError(f"images in {directory} have mixed shapes")
    stacked = np.stack(images) if images else np.zeros((0, 3, size, size), dtype=np.float32)
    logger.debug(f"loaded {len(images)} images from {directory}")
    return ImageStore(stacked, metadata, int(manifest.get("seed", 0)))
