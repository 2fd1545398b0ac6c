"""On-disk formats: ``.rmz`` relevance archives, label PNGs with sidecars, images.

An ``.rmz`` file is a plain zip holding ``meta.json`` and one ``cat_<i>.f32``
per category (``i`` starting at 1, matching mask labels), each the map as
row-major little-endian float32.  Zip timestamps are pinned so identical
inputs give identical bytes.
"""
from __future__ import annotations

import json
import zipfile
from pathlib import Path

import numpy as np
from PIL import Image

from .backends import BackendDescriptor, RelevanceMap
from .errors import InvalidImageError, ShapeMismatchError
from .fusion import SegmentationMask
from .tta import CropGridSpec, RefinedRelevance

RMZ_VERSION = 1
_ZIP_DATE = (1980, 1, 1, 0, 0, 0)


def _zip_write(zf: zipfile.ZipFile, name: str, data: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=_ZIP_DATE)
    info.compress_type = zipfile.ZIP_DEFLATED
    info.external_attr = 0o644 << 16
    zf.writestr(info, data)


def save_rmz(path, refined: RefinedRelevance) -> Path:
    path = Path(path)
    h, w = refined.shape
    meta = {
        "format": "rmz",
        "version": RMZ_VERSION,
        "image_shape": [h, w],
        "categories": refined.categories,
        "low_confidence": [m.low_confidence for m in refined.maps],
        "views": list(refined.views_used),
        "calibration": list(refined.calibration),
        "grid": refined.grid.to_dict(),
        "backend": refined.backend.to_dict() if refined.backend else None,
        "seed": refined.seed,
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    with zipfile.ZipFile(path, "w") as zf:
        _zip_write(zf, "meta.json", json.dumps(meta, indent=2, sort_keys=True).encode())
        for i, m in enumerate(refined.maps, start=1):
            _zip_write(zf, f"cat_{i}.f32", np.ascontiguousarray(m.scores, dtype="<f4").tobytes())
    return path


def load_rmz(path) -> RefinedRelevance:
    with zipfile.ZipFile(path) as zf:
        meta = json.loads(zf.read("meta.json"))
        h, w = meta["image_shape"]
        maps = []
        for i, (cat, low) in enumerate(zip(meta["categories"], meta["low_confidence"]), start=1):
            raw = zf.read(f"cat_{i}.f32")
            if len(raw) != 4 * h * w:
                raise ShapeMismatchError(f"cat_{i}.f32 holds {len(raw) // 4} floats, expected {h * w}")
            scores = np.frombuffer(raw, dtype="<f4").reshape(h, w).astype(np.float32)
            maps.append(RelevanceMap(scores, cat, low_confidence=bool(low)))
    return RefinedRelevance(
        maps=maps,
        views_used=meta["views"],
        calibration=meta["calibration"],
        grid=CropGridSpec.from_dict(meta["grid"]),
        seed=meta["seed"],
        backend=BackendDescriptor.from_dict(meta["backend"]) if meta["backend"] else None,
    )


def sidecar_path(mask_path) -> Path:
    return Path(mask_path).with_suffix(".json")


def save_mask(path, mask: SegmentationMask) -> Path:
    """Write an 8-bit label PNG plus a JSON sidecar naming each label."""
    path = Path(path)
    labels = np.asarray(mask.labels)
    if labels.min(initial=0) < 0 or labels.max(initial=0) > 255:
        raise ValueError("label values must fit in 8 bits")
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(labels.astype(np.uint8), mode="L").save(path)
    names = {"0": "background"}
    names.update({str(i): c for i, c in enumerate(mask.categories, start=1)})
    side = {"labels": names, "flags": {k: v for k, v in mask.flags.items()
                                       if isinstance(v, (bool, int, float, str))}}
    sidecar_path(path).write_text(json.dumps(side, indent=2, sort_keys=True))
    return path


def load_mask(path) -> SegmentationMask:
    path = Path(path)
    labels = np.array(Image.open(path))
    if labels.ndim != 2:
        raise InvalidImageError(f"{path} is not a single-channel label image")
    cats: list[str] = []
    flags = {}
    side = sidecar_path(path)
    if side.exists():
        meta = json.loads(side.read_text())
        names = {int(k): v for k, v in meta.get("labels", {}).items()}
        cats = [names[i] for i in range(1, max(names, default=0) + 1)]
        flags = meta.get("flags", {})
    return SegmentationMask(labels, cats, flags)


def load_image(path) -> np.ndarray:
    """RGB float32 image in [0, 1]."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"image not found: {path}")
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    if arr.size == 0:
        raise InvalidImageError(f"empty image: {path}")
    return arr


def save_image(path, image: np.ndarray) -> Path:
    path = Path(path)
    arr = np.asarray(image)
    if arr.dtype != np.uint8:
        arr = np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr).save(path)
    return path


def write_jsonl(path, records) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return path
