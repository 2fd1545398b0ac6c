"""Per-image differentiable clustering guided by sampled pseudo-labels.

A small randomly initialised conv net maps per-pixel features to ``q`` label
responses.  It is optimised on one image with three terms: cross-entropy
against its own argmax (self-distillation), an L1 penalty between neighbouring
responses (continuity), and cross-entropy at pixels freshly sampled from the
relevance maps every iteration (scribbles).  Category c is tied to cluster c
and background to cluster 0.
"""
from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import DivergenceError, ShapeMismatchError
from .fusion import (
    DEFAULT_TAU,
    MultiClassRelevance,
    PseudoLabelBatch,
    SegmentationMask,
    binarize,
    sample_all,
)

log = logging.getLogger(__name__)


@dataclass
class ClusterConfig:
    max_labels: int = 32
    max_iters: int = 200
    min_labels: int | None = None  # None -> number of categories + 1
    feature_similarity: float = 1.0
    continuity: float = 5.0
    scribble: float = 0.5
    learning_rate: float = 0.1
    momentum: float = 0.9
    hidden: int = 32
    samples_per_iter: int = 64
    tau: float = DEFAULT_TAU
    seed: int = 0
    fallback_threshold: float = 0.5
    time_budget: float | None = None

    def __post_init__(self):
        if self.max_labels < 1 or self.max_iters < 0 or self.hidden < 1:
            raise ValueError("max_labels and hidden must be >= 1, max_iters >= 0")
        if self.min_labels is not None and not 1 <= self.min_labels <= self.max_labels:
            raise ValueError("need 1 <= min_labels <= max_labels")
        if min(self.feature_similarity, self.continuity, self.scribble) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.learning_rate <= 0 or self.tau <= 0 or self.samples_per_iter < 1:
            raise ValueError("learning_rate, tau and samples_per_iter must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ClusterConfig":
        return cls(**d)


class LabelNet(nn.Module):
    def __init__(self, in_channels: int, hidden: int, q: int):
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, hidden, 3, padding=1, padding_mode="replicate")
        self.bn1 = nn.BatchNorm2d(hidden)
        self.conv2 = nn.Conv2d(hidden, hidden, 3, padding=1, padding_mode="replicate")
        self.bn2 = nn.BatchNorm2d(hidden)
        self.conv3 = nn.Conv2d(hidden, q, 1)
        self.bn3 = nn.BatchNorm2d(q)

    def forward(self, x):
        x = self.bn1(F.relu(self.conv1(x)))
        x = self.bn2(F.relu(self.conv2(x)))
        return self.bn3(self.conv3(x))


# -- loss terms; logits are (h, w, q) -----------------------------------------

def continuity_loss(logits: torch.Tensor, per_channel: bool = False) -> torch.Tensor:
    """Mean L1 distance between horizontally, plus vertically, adjacent responses.

    The L1 norm runs over the response vector; ``per_channel`` divides it by
    the channel count, which is the scale the segmenter's weights are set for.
    """
    total = logits.new_zeros(())
    if logits.shape[1] > 1:
        total = total + (logits[:, 1:] - logits[:, :-1]).abs().sum(-1).mean()
    if logits.shape[0] > 1:
        total = total + (logits[1:] - logits[:-1]).abs().sum(-1).mean()
    return total / logits.shape[-1] if per_channel else total


def self_distill_loss(logits: torch.Tensor) -> torch.Tensor:
    q = logits.shape[-1]
    flat = logits.reshape(-1, q)
    return F.cross_entropy(flat, flat.argmax(dim=1).detach())


def scribble_loss(logits: torch.Tensor, batch: PseudoLabelBatch, label_map=None) -> torch.Tensor:
    """Mean cross-entropy at sampled pixels against their mapped cluster ids."""
    if len(batch) == 0:
        log.warning("empty pseudo-label batch; scribble loss is 0")
        return logits.new_zeros(())
    labels = batch.labels if label_map is None else np.array([label_map[int(c)] for c in batch.labels])
    if label_map is not None and len(set(label_map.values())) != len(label_map):
        raise ValueError("label_map must be injective")
    ys = torch.as_tensor(batch.ys, dtype=torch.long)
    xs = torch.as_tensor(batch.xs, dtype=torch.long)
    targets = torch.as_tensor(labels, dtype=torch.long)
    return F.cross_entropy(logits[ys, xs], targets)


# -- segmenter ----------------------------------------------------------------

@dataclass
class ClusterResult:
    mask: SegmentationMask
    hard_labels: np.ndarray
    history: list[dict] = field(default_factory=list)
    degenerate: bool = False


def _features(image, feature_source, backend) -> np.ndarray:
    if feature_source == "rgb":
        feats = np.asarray(image, dtype=np.float64)
        if feats.ndim == 2:
            feats = feats[..., None]
        if feats.max() > 1.0:
            feats = feats / 255.0
    elif feature_source == "backend":
        if backend is None or not hasattr(backend, "features"):
            raise ValueError("feature_source='backend' needs a backend exposing features()")
        feats = np.asarray(backend.features(image), dtype=np.float64)
    else:
        raise ValueError(f"unknown feature source {feature_source!r}")
    mu = feats.mean(axis=(0, 1), keepdims=True)
    sd = feats.std(axis=(0, 1), keepdims=True)
    return (feats - mu) / np.where(sd > 1e-8, sd, 1.0)


def _compact(labels: np.ndarray) -> np.ndarray:
    """Relabel cluster ids to 1..m in raster order of first appearance."""
    _, first = np.unique(labels.ravel(), return_index=True)
    order = labels.ravel()[np.sort(first)]
    lut = {int(v): i + 1 for i, v in enumerate(order)}
    return np.vectorize(lut.__getitem__, otypes=[np.int64])(labels)


def assign_clusters(hard: np.ndarray, votes: np.ndarray) -> np.ndarray:
    """Map each cluster to the label with most pseudo-label votes inside it.

    ``votes`` is (h, w, K+1).  Clusters without votes become background; ties
    go to the lower label index.
    """
    out = np.zeros(hard.shape, dtype=np.int64)
    for cl in np.unique(hard):
        inside = hard == cl
        tally = votes[inside].sum(axis=0)
        if tally.sum() > 0:
            out[inside] = int(np.argmax(tally))
    return out


def segment(image, relevance: MultiClassRelevance, cfg: ClusterConfig | None = None,
            feature_source: str = "rgb", backend=None) -> ClusterResult:
    cfg = cfg or ClusterConfig()
    image = np.asarray(image)
    if image.shape[:2] != relevance.shape:
        raise ShapeMismatchError(f"image {image.shape[:2]} vs relevance {relevance.shape}")
    k = relevance.k
    if cfg.max_iters == 0:
        mask = binarize(relevance, cfg.fallback_threshold)
        mask.flags["fallback"] = True
        return ClusterResult(mask, mask.labels.astype(np.int64), [], False)

    q = max(cfg.max_labels, k + 1)
    min_labels = cfg.min_labels if cfg.min_labels is not None else k + 1
    guided = cfg.scribble > 0
    feats = _features(image, feature_source, backend)
    x = torch.from_numpy(np.ascontiguousarray(feats.transpose(2, 0, 1), dtype=np.float32))[None]

    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        net = LabelNet(x.shape[1], cfg.hidden, q)
    net.train()
    opt = torch.optim.SGD(net.parameters(), lr=cfg.learning_rate, momentum=cfg.momentum)
    rng = np.random.default_rng(cfg.seed)
    votes = np.zeros(relevance.shape + (k + 1,), dtype=np.int64)

    history = []
    start = time.monotonic()
    for it in range(cfg.max_iters):
        opt.zero_grad()
        logits = net(x)[0].permute(1, 2, 0)
        n_labels = int(torch.unique(logits.argmax(dim=-1)).numel())
        sim = self_distill_loss(logits)
        con = continuity_loss(logits, per_channel=True)
        total = cfg.feature_similarity * sim + cfg.continuity * con
        record = {"iter": it, "seed": cfg.seed, "n_labels": n_labels,
                  "feature_similarity": sim.item(), "continuity": con.item()}
        if guided:
            batch = sample_all(relevance, cfg.samples_per_iter, cfg.tau, rng)
            np.add.at(votes, (batch.ys, batch.xs, batch.labels), 1)
            scr = scribble_loss(logits, batch)
            total = total + cfg.scribble * scr
            record["scribble"] = scr.item()
        record["total"] = total.item()
        if not torch.isfinite(total):
            raise DivergenceError(f"non-finite loss at iteration {it}: {record}")
        total.backward()
        opt.step()
        record["stop"] = n_labels <= min_labels
        history.append(record)
        if record["stop"]:
            break
        if cfg.time_budget is not None and time.monotonic() - start > cfg.time_budget:
            log.info("time budget %.1fs reached after %d iterations", cfg.time_budget, it + 1)
            record["budget_stop"] = True
            break

    with torch.no_grad():
        hard = net(x)[0].argmax(dim=0).numpy().astype(np.int64)
    n_final = len(np.unique(hard))
    degenerate = n_final == 1
    if degenerate:
        log.warning("all clusters collapsed into one")
    if guided:
        labels = assign_clusters(hard, votes)
        mask = SegmentationMask(labels.astype(np.uint8), list(relevance.categories))
    else:
        mask = SegmentationMask(_compact(hard), [], {"baseline": True})
    mask.flags.update({"degenerate": degenerate, "iterations": len(history), "clusters": n_final})
    return ClusterResult(mask, hard, history, degenerate)
