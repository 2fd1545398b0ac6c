"""Pipeline configuration, stored as JSON.

Example file::

    {
      "backend": "mock",
      "views": ["identity", "hflip", "contrast", "crop"],
      "grid": {"crop_size": 224, "stride": 50, "gate_threshold": 0.3},
      "method": "cluster",
      "cluster": {"max_iters": 200, "continuity": 5.0},
      "seed": 0
    }

Unknown keys are rejected; missing keys take the defaults below.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .backends import DEFAULT_TEMPLATE, available_backends
from .cluster import ClusterConfig
from .fusion import DEFAULT_TAU
from .interactive import DEFAULT_CLICKS, _MODELS
from .tta import VIEW_KINDS, CropGridSpec

METHODS = ("threshold", "cluster", "interactive")
K_MODES = ("gt", "k1", "unknown")
FEATURE_SOURCES = ("rgb", "backend")


@dataclass
class PipelineConfig:
    backend: str = "mock"
    backend_options: dict = field(default_factory=dict)
    views: list[str] = field(default_factory=lambda: list(VIEW_KINDS))
    grid: CropGridSpec = field(default_factory=CropGridSpec)
    distractors: list[str] | None = None
    template: str = DEFAULT_TEMPLATE
    calibrate: bool = True
    tau: float = DEFAULT_TAU
    method: str = "cluster"
    threshold: float = 0.5
    cluster: ClusterConfig = field(default_factory=ClusterConfig)
    feature_source: str = "rgb"
    interactive: str = "mock"
    interactive_options: dict = field(default_factory=dict)
    clicks: int = DEFAULT_CLICKS
    negative_clicks: int | None = None
    k_mode: str = "gt"
    prompt_cutoff: float = 0.3
    seed: int = 0
    budget: float | None = None
    out: str = "out"

    def __post_init__(self):
        if isinstance(self.grid, dict):
            self.grid = CropGridSpec.from_dict(self.grid)
        if isinstance(self.cluster, dict):
            self.cluster = ClusterConfig.from_dict(self.cluster)
        self.views = list(self.views)
        if self.distractors is not None:
            self.distractors = list(self.distractors)
        self.validate()

    def validate(self) -> None:
        if self.backend not in available_backends():
            raise ValueError(f"unknown backend {self.backend!r}")
        if self.interactive not in _MODELS:
            raise ValueError(f"unknown interactive model {self.interactive!r}")
        if not self.views or set(self.views) - set(VIEW_KINDS):
            raise ValueError(f"views must be a non-empty subset of {VIEW_KINDS}, got {self.views}")
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.k_mode not in K_MODES:
            raise ValueError(f"k_mode must be one of {K_MODES}, got {self.k_mode!r}")
        if self.feature_source not in FEATURE_SOURCES:
            raise ValueError(f"feature_source must be one of {FEATURE_SOURCES}")
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if not 0 <= self.threshold <= 1 or not 0 <= self.prompt_cutoff < 1:
            raise ValueError("threshold must be in [0, 1] and prompt_cutoff in [0, 1)")
        if self.clicks < 1 or (self.negative_clicks is not None and self.negative_clicks < 0):
            raise ValueError("clicks must be >= 1 and negative_clicks >= 0")
        if self.budget is not None and self.budget <= 0:
            raise ValueError("budget must be positive seconds")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["grid"] = self.grid.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "PipelineConfig":
        return cls.from_dict(json.loads(text))

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        return cls.from_json(Path(path).read_text())

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(self.to_json())
        return path

    def merged(self, **overrides) -> "PipelineConfig":
        """Copy with ``overrides`` applied; ``None`` values are ignored."""
        d = self.to_dict()
        d.update({k: v for k, v in overrides.items() if v is not None})
        return PipelineConfig.from_dict(d)

    def digest(self) -> str:
        """Stable hash of everything that affects results (the output dir does not)."""
        d = self.to_dict()
        d.pop("out")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    def describe(self) -> dict:
        return {"views": self.views, "method": self.method, "k_mode": self.k_mode,
                "clicks": self.clicks if self.method == "interactive" else None,
                "backend": self.backend, "seed": self.seed}
