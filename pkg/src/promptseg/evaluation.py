"""Datasets, the best-match mean IoU metric and cached benchmark runs."""
from __future__ import annotations

import hashlib
import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from functools import partial
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from filelock import FileLock
from PIL import Image

from .config import PipelineConfig
from .errors import DatasetNotFoundError, ShapeMismatchError
from .storage import load_image

log = logging.getLogger(__name__)

IGNORE_LABEL = 255
VOC_CLASSES = (
    "aeroplane", "bicycle", "bird", "boat", "bottle", "bus", "car", "cat", "chair", "cow",
    "diningtable", "dog", "horse", "motorbike", "person", "pottedplant", "sheep", "sofa",
    "train", "tvmonitor",
)
# Prompt-friendly names for the VOC identifiers.
VOC_PROMPTS = {"aeroplane": "airplane", "diningtable": "dining table", "motorbike": "motorbike",
               "pottedplant": "potted plant", "tvmonitor": "tv monitor"}
ENV_ROOTS = {"voc": "PROMPTSEG_VOC_ROOT", "imagenet-seg": "PROMPTSEG_IMAGENETSEG_ROOT"}


# -- metric ---------------------------------------------------------------------

def best_match_miou(gt, pred, ignore_label: int | None = IGNORE_LABEL) -> float | None:
    """Mean over GT classes of the best IoU with any predicted (non-zero) label region.

    Pixels labelled ``ignore_label`` in ``gt`` count in neither intersection nor
    union.  Returns None, with a warning, when ``gt`` has no foreground.
    """
    gt = np.asarray(gt)
    pred = np.asarray(pred)
    if gt.shape != pred.shape:
        raise ShapeMismatchError(f"gt {gt.shape} vs pred {pred.shape}")
    keep = np.ones(gt.shape, bool) if ignore_label is None else gt != ignore_label
    g = gt[keep].astype(np.int64)
    p = pred[keep].astype(np.int64)
    gt_ids = [v for v in np.unique(g) if v != 0]
    if not gt_ids:
        log.warning("ground truth has no foreground segment; skipping")
        return None
    pred_ids = [v for v in np.unique(p) if v != 0]
    if not pred_ids:
        return 0.0
    # contingency table over (gt segment, pred segment)
    gi = np.searchsorted(gt_ids, g)
    gvalid = np.isin(g, gt_ids)
    pi = np.searchsorted(pred_ids, p)
    pvalid = np.isin(p, pred_ids)
    both = gvalid & pvalid
    inter = np.zeros((len(gt_ids), len(pred_ids)), dtype=np.int64)
    np.add.at(inter, (gi[both], pi[both]), 1)
    gsize = np.bincount(gi[gvalid], minlength=len(gt_ids))
    psize = np.bincount(pi[pvalid], minlength=len(pred_ids))
    union = gsize[:, None] + psize[None, :] - inter
    iou = inter / union
    return float(iou.max(axis=1).mean())


# -- datasets -------------------------------------------------------------------

@dataclass
class DatasetRecord:
    """One evaluation image.  ``categories[i]`` names GT label i; index 0 is background."""

    image_id: str
    dataset: str
    categories: list[str]
    image_path: Path | None = None
    mask_path: Path | None = None
    _image_fn: Callable | None = field(default=None, repr=False)
    _gt_fn: Callable | None = field(default=None, repr=False)

    def image(self) -> np.ndarray:
        if self._image_fn is not None:
            return self._image_fn()
        return load_image(self.image_path)

    def gt(self) -> np.ndarray:
        if self._gt_fn is not None:
            return self._gt_fn()
        return np.array(Image.open(self.mask_path))

    def present(self, gt: np.ndarray | None = None) -> list[int]:
        gt = self.gt() if gt is None else gt
        return [int(v) for v in np.unique(gt) if v not in (0, IGNORE_LABEL)]

    def category_names(self, gt: np.ndarray | None = None) -> list[str]:
        return [self.categories[i] for i in self.present(gt)]


def _voc_base(root: Path) -> Path:
    for cand in (root, root / "VOC2012", root / "VOCdevkit" / "VOC2012"):
        if (cand / "ImageSets" / "Segmentation").is_dir():
            return cand
    return root


def load_voc(root, split: str = "val", check_files: bool = True) -> list[DatasetRecord]:
    """PASCAL VOC 2012 segmentation split (``val`` has 1449 images)."""
    root = Path(root)
    base = _voc_base(root)
    listing = base / "ImageSets" / "Segmentation" / f"{split}.txt"
    if not listing.is_file():
        raise DatasetNotFoundError([listing])
    ids = [ln.strip() for ln in listing.read_text().splitlines() if ln.strip()]
    categories = ["background"] + [VOC_PROMPTS.get(c, c) for c in VOC_CLASSES]
    records, missing = [], []
    for i in ids:
        img = base / "JPEGImages" / f"{i}.jpg"
        msk = base / "SegmentationClass" / f"{i}.png"
        if check_files:
            missing += [p for p in (img, msk) if not p.is_file()]
        records.append(DatasetRecord(i, "voc", categories, img, msk))
    if missing:
        raise DatasetNotFoundError(missing)
    return records


def _imagenet_seg_dirs(root: Path) -> list[DatasetRecord]:
    names = {}
    if (root / "categories.json").is_file():
        names = json.loads((root / "categories.json").read_text())
    records, missing = [], []
    for cat_dir in sorted(p for p in (root / "images").iterdir() if p.is_dir()):
        name = names.get(cat_dir.name, cat_dir.name.replace("_", " "))
        for img in sorted(cat_dir.iterdir()):
            if img.suffix.lower() not in (".jpg", ".jpeg", ".png"):
                continue
            msk = root / "masks" / cat_dir.name / (img.stem + ".png")
            if not msk.is_file():
                missing.append(msk)
                continue
            rec = DatasetRecord(f"{cat_dir.name}/{img.stem}", "imagenet-seg",
                                ["background", name], img, msk)
            rec._gt_fn = partial(_binary_mask, msk)
            records.append(rec)
    if missing:
        raise DatasetNotFoundError(missing)
    return records


# loaders are module-level so records pickle into benchmark worker processes
def _binary_mask(path: Path) -> np.ndarray:
    return (np.array(Image.open(path).convert("L")) > 0).astype(np.uint8)


def _mat_image(mat: Path, i: int) -> np.ndarray:
    import h5py

    with h5py.File(mat, "r") as f:
        arr = np.array(f[f["value/img"][i, 0]]).transpose(2, 1, 0)
    return arr.astype(np.float32) / 255.0


def _mat_mask(mat: Path, i: int) -> np.ndarray:
    import h5py

    with h5py.File(mat, "r") as f:
        arr = np.array(f[f["value/gt"][i, 0]]).transpose(1, 0)
    return (arr > 0).astype(np.uint8)


def _imagenet_seg_mat(mat: Path, root: Path) -> list[DatasetRecord]:
    import h5py

    labels_file = root / "labels.txt"
    with h5py.File(mat, "r") as f:
        n = f["value/img"].shape[0]
    labels = labels_file.read_text().splitlines() if labels_file.is_file() else ["object"] * n

    return [DatasetRecord(f"{i:05d}", "imagenet-seg", ["background", labels[i]],
                          _image_fn=partial(_mat_image, mat, i), _gt_fn=partial(_mat_mask, mat, i))
            for i in range(n)]


def load_imagenet_seg(root) -> list[DatasetRecord]:
    """ImageNet-Segmentation (4276 images, 445 categories, binary masks).

    Accepts either ``images/<category>/*.jpg`` with ``masks/<category>/*.png``
    (optional ``categories.json`` mapping directory to name) or the
    ``gtsegs_ijcv.mat`` file with an optional ``labels.txt``.
    """
    root = Path(root)
    mat = root if root.suffix == ".mat" else root / "gtsegs_ijcv.mat"
    if mat.is_file():
        return _imagenet_seg_mat(mat, mat.parent)
    if not (root / "images").is_dir():
        raise DatasetNotFoundError([root / "images", root / "gtsegs_ijcv.mat"])
    return _imagenet_seg_dirs(root)


def load_synthetic(n: int = 10) -> list[DatasetRecord]:
    from .synthetic import synthetic_dataset

    records = []
    for i, scene in enumerate(synthetic_dataset(n)):
        records.append(DatasetRecord(
            f"synthetic_{i:02d}", "synthetic", ["background"] + scene.categories,
            _image_fn=partial(getattr, scene, "image"), _gt_fn=partial(getattr, scene, "labels"),
        ))
    return records


def load_dataset(dataset: str, root=None) -> list[DatasetRecord]:
    if dataset == "synthetic":
        return load_synthetic()
    if root is None:
        root = os.environ.get(ENV_ROOTS.get(dataset, ""), None)
    if root is None:
        raise DatasetNotFoundError([f"<root for {dataset}; set --root or {ENV_ROOTS.get(dataset)}>"])
    if dataset == "voc":
        return load_voc(root)
    if dataset == "imagenet-seg":
        return load_imagenet_seg(root)
    raise ValueError(f"unknown dataset {dataset!r}")


def select_subset(records: Sequence[DatasetRecord], size: int | None, seed: int) -> list[DatasetRecord]:
    if size is None or size >= len(records):
        return list(records)
    idx = np.sort(np.random.default_rng(seed).choice(len(records), size=size, replace=False))
    return [records[i] for i in idx]


# -- benchmark ------------------------------------------------------------------

def image_seed(master_seed: int, image_id: str) -> int:
    digest = hashlib.sha256(f"{master_seed}:{image_id}".encode()).digest()
    return int.from_bytes(digest[:4], "little") & 0x7FFFFFFF


@dataclass
class EvalReport:
    config: dict
    dataset: str
    per_image: dict[str, float]
    failures: dict[str, str] = field(default_factory=dict)
    skipped: list[str] = field(default_factory=list)
    runtime: dict[str, float] = field(default_factory=dict)

    @property
    def mean_iou(self) -> float:
        vals = list(self.per_image.values())
        return float(np.mean(vals)) if vals else float("nan")

    @property
    def coverage(self) -> float:
        total = len(self.per_image) + len(self.failures) + len(self.skipped)
        return len(self.per_image) / total if total else 0.0

    def to_dict(self, include_runtime: bool = True) -> dict:
        d = asdict(self)
        if not include_runtime:
            d.pop("runtime")
        d["mean_iou"] = self.mean_iou
        d["coverage"] = self.coverage
        return d

    def to_json(self, include_runtime: bool = True) -> str:
        return json.dumps(self.to_dict(include_runtime), indent=2, sort_keys=True)


def format_table(reports: Sequence[EvalReport]) -> str:
    header = f"{'method':<12} {'views':<32} {'k':<8} {'clicks':>6} {'images':>6} {'mIoU':>7}"
    lines = [header, "-" * len(header)]
    for r in reports:
        c = r.config
        views = ",".join(c.get("views", []))
        clicks = c.get("clicks") if c.get("method") == "interactive" else "-"
        lines.append(f"{c.get('method', '?'):<12} {views:<32} {c.get('k_mode', '?'):<8} "
                     f"{clicks!s:>6} {len(r.per_image):>6} {r.mean_iou:>7.4f}")
    return "\n".join(lines)


def evaluate_record(record: DatasetRecord, config: PipelineConfig, master_seed: int = 0) -> dict:
    """Run the pipeline on one record and score it.  Never raises."""
    from .pipeline import build_backend, run, select_prompts

    seed = image_seed(master_seed, record.image_id)
    start = time.monotonic()
    try:
        image = record.image()
        gt = record.gt()
        present = record.present(gt)
        if not present:
            return {"image_id": record.image_id, "status": "skipped", "reason": "no foreground"}
        names = [record.categories[i] for i in present]
        scene = [(record.categories[i], gt == i) for i in present]
        backend = build_backend(config, scene=scene, seed=seed)
        vocabulary = [c for c in record.categories[1:]]
        labels = select_prompts(backend, image, config.k_mode, names, vocabulary,
                                config.prompt_cutoff, config.template)
        result = run(image, labels, config, backend=backend, seed=seed)
        scored = gt
        if config.k_mode == "k1":
            keep = np.isin(gt, [i for i in present if record.categories[i] in labels])
            scored = np.where(keep | (gt == IGNORE_LABEL), gt, 0)
        iou = best_match_miou(scored, result.mask.labels)
        if iou is None:
            return {"image_id": record.image_id, "status": "skipped", "reason": "prompt not in GT"}
        return {"image_id": record.image_id, "status": "ok", "iou": iou, "prompts": labels,
                "seconds": time.monotonic() - start}
    except Exception as exc:  # noqa: BLE001 - per-image failures are recorded, not fatal
        log.warning("image %s failed: %s", record.image_id, exc)
        return {"image_id": record.image_id, "status": "failed",
                "error": f"{type(exc).__name__}: {exc}", "seconds": time.monotonic() - start}


def _evaluate_job(args):
    return evaluate_record(*args)


class ResultCache:
    """Append-only JSON-lines cache keyed by (image id, config digest)."""

    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._lock = FileLock(str(self.path) + ".lock")
        self._entries: dict[str, dict] = {}
        if self.path.exists():
            for line in self.path.read_text().splitlines():
                if line.strip():
                    rec = json.loads(line)
                    self._entries[rec["key"]] = rec

    @staticmethod
    def key(image_id: str, digest: str, master_seed: int) -> str:
        return f"{image_id}|{digest}|{master_seed}"

    def get(self, key: str) -> dict | None:
        return self._entries.get(key)

    def put(self, key: str, result: dict) -> None:
        rec = {"key": key, **result}
        with self._lock, open(self.path, "a") as fh:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
        self._entries[key] = rec


def run_benchmark(records: Sequence[DatasetRecord], configs: Sequence[PipelineConfig],
                  cache_path=None, master_seed: int = 0, workers: int = 1) -> list[EvalReport]:
    """Evaluate every config on every record; cached results are reused, not recomputed."""
    cache = ResultCache(cache_path) if cache_path else None
    reports = []
    for config in configs:
        digest = config.digest()
        results: dict[str, dict] = {}
        todo = []
        for rec in records:
            hit = cache.get(ResultCache.key(rec.image_id, digest, master_seed)) if cache else None
            if hit is not None:
                results[rec.image_id] = hit
            else:
                todo.append(rec)
        if todo:
            if workers > 1:
                with ProcessPoolExecutor(max_workers=workers) as pool:
                    fresh = list(pool.map(_evaluate_job, [(r, config, master_seed) for r in todo]))
            else:
                fresh = [evaluate_record(r, config, master_seed) for r in todo]
            for rec, res in zip(todo, fresh):
                results[rec.image_id] = res
                if cache:
                    cache.put(ResultCache.key(rec.image_id, digest, master_seed), res)
        report = EvalReport(config.describe(), records[0].dataset if records else "", {})
        secs = []
        for rec in records:
            res = results[rec.image_id]
            if res["status"] == "ok":
                report.per_image[rec.image_id] = res["iou"]
            elif res["status"] == "failed":
                report.failures[rec.image_id] = res["error"]
            else:
                report.skipped.append(rec.image_id)
            if "seconds" in res:
                secs.append(res["seconds"])
        if secs:
            report.runtime = {"total": float(np.sum(secs)), "mean": float(np.mean(secs)),
                              "max": float(np.max(secs))}
        reports.append(report)
    return reports
