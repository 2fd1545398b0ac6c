"""Vision-language backends: class probabilities and dense relevance maps.

Backends are looked up by name through a small registry so the pipeline can
swap the real CLIP model for the deterministic mock used in tests.  A backend
exposes::

    descriptor                      -> BackendDescriptor
    class_probabilities(image, ps)  -> probabilities over ps.texts
    relevance(image, text)          -> RelevanceMap at image size
    features(image)                 -> (h, w, d) per-pixel features (optional)
"""
from __future__ import annotations

import hashlib
import logging
import math
import zlib
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import ndimage

from .errors import (
    BackendUnavailableError,
    InvalidImageError,
    NonFiniteRelevanceError,
    ShapeMismatchError,
)

log = logging.getLogger(__name__)

DEFAULT_TEMPLATE = "a photo of a {label}"
DEFAULT_DISTRACTORS = ("bird", "cat", "boat", "bus", "person")


@dataclass(frozen=True)
class BackendDescriptor:
    name: str
    input_resolution: int
    patch_grid: tuple[int, int]

    def __post_init__(self):
        if self.input_resolution <= 0:
            raise ValueError("input_resolution must be positive")
        gh, gw = self.patch_grid
        if gh <= 0 or gw <= 0 or self.input_resolution % gh or self.input_resolution % gw:
            raise ValueError(
                f"patch grid {self.patch_grid} does not divide resolution {self.input_resolution}"
            )

    def to_dict(self) -> dict:
        return {"name": self.name, "input_resolution": self.input_resolution,
                "patch_grid": list(self.patch_grid)}

    @classmethod
    def from_dict(cls, d: dict) -> "BackendDescriptor":
        return cls(d["name"], int(d["input_resolution"]), tuple(d["patch_grid"]))


@dataclass(frozen=True)
class PromptSet:
    """Query labels, distractor labels and the template that turns a label into text.

    Probability vectors returned by backends are ordered as ``texts``:
    queries first, then distractors.
    """

    queries: tuple[str, ...]
    distractors: tuple[str, ...] = ()
    template: str = DEFAULT_TEMPLATE

    def __post_init__(self):
        object.__setattr__(self, "queries", tuple(self.queries))
        object.__setattr__(self, "distractors", tuple(self.distractors))
        if not self.queries:
            raise ValueError("at least one query prompt is required")
        if any(not q or not q.strip() for q in self.queries + self.distractors):
            raise ValueError("prompts must be non-empty strings")
        if len(set(self.queries)) != len(self.queries):
            raise ValueError(f"duplicate query prompts: {self.queries}")
        overlap = set(self.queries) & set(self.distractors)
        if overlap:
            raise ValueError(f"distractors overlap queries: {sorted(overlap)}")
        if "{label}" not in self.template:
            raise ValueError("template must contain '{label}'")

    @classmethod
    def create(cls, queries: Sequence[str], distractors: Sequence[str] | None = None,
               template: str = DEFAULT_TEMPLATE) -> "PromptSet":
        """Build a prompt set, defaulting distractors to the stock list minus the queries."""
        if distractors is None:
            distractors = DEFAULT_DISTRACTORS
        queries = tuple(queries)
        distractors = tuple(d for d in dict.fromkeys(distractors) if d not in queries)
        return cls(queries, distractors, template)

    @property
    def k(self) -> int:
        return len(self.queries)

    def text(self, label: str) -> str:
        return self.template.format(label=label)

    @property
    def query_texts(self) -> list[str]:
        return [self.text(q) for q in self.queries]

    @property
    def distractor_texts(self) -> list[str]:
        return [self.text(d) for d in self.distractors]

    @property
    def texts(self) -> list[str]:
        return self.query_texts + self.distractor_texts


@dataclass
class RelevanceMap:
    scores: np.ndarray
    category: str
    low_confidence: bool = False

    def __post_init__(self):
        self.scores = np.asarray(self.scores)
        if self.scores.ndim != 2:
            raise ShapeMismatchError(f"relevance must be 2-D, got shape {self.scores.shape}")
        if not np.all(np.isfinite(self.scores)):
            raise NonFiniteRelevanceError(f"non-finite relevance for {self.category!r}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.scores.shape


class ViewImage(np.ndarray):
    """An image array that remembers where each of its pixels came from.

    ``coords[i, j] = (row, col)`` in the source image.  Real backends never look
    at it; the mock backend uses it to render ground truth in view coordinates.
    Arrays derived from a ViewImage by slicing or arithmetic drop the coords.
    """

    def __new__(cls, array, coords):
        obj = np.asarray(array).view(cls)
        obj.coords = coords
        return obj

    def __array_finalize__(self, obj):
        self.coords = None


def source_coords(image) -> np.ndarray | None:
    return getattr(image, "coords", None)


def identity_coords(h: int, w: int) -> np.ndarray:
    rows, cols = np.mgrid[0:h, 0:w]
    return np.stack([rows, cols], axis=-1)


def check_image(image) -> np.ndarray:
    arr = np.asarray(image)
    if arr.ndim not in (2, 3) or arr.shape[0] == 0 or arr.shape[1] == 0:
        raise InvalidImageError(f"invalid image shape {arr.shape}")
    if arr.ndim == 3 and arr.shape[2] not in (1, 3):
        raise InvalidImageError(f"expected RGB image, got {arr.shape[2]} channels")
    return arr


def softmax(x: np.ndarray, axis=-1) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    z = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def upsample_bilinear(grid_map: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Bilinear resize with half-pixel centres (align_corners=False)."""
    import torch
    import torch.nn.functional as F

    t = torch.as_tensor(np.ascontiguousarray(grid_map), dtype=torch.float64)[None, None]
    out = F.interpolate(t, size=tuple(shape), mode="bilinear", align_corners=False)
    return out[0, 0].numpy()


def area_pool(field_: np.ndarray, grid: tuple[int, int]) -> np.ndarray:
    """Average-pool a 2-D field onto a (possibly non-dividing) grid of bins."""
    gh, gw = grid
    rows = np.array_split(np.arange(field_.shape[0]), min(gh, field_.shape[0]))
    cols = np.array_split(np.arange(field_.shape[1]), min(gw, field_.shape[1]))
    out = np.empty((len(rows), len(cols)))
    for i, r in enumerate(rows):
        for j, c in enumerate(cols):
            out[i, j] = field_[r[0]:r[-1] + 1, c[0]:c[-1] + 1].mean()
    return out


# -- registry ---------------------------------------------------------------

_BACKENDS: dict[str, Callable] = {}


def register_backend(name: str):
    def deco(factory):
        _BACKENDS[name] = factory
        return factory
    return deco


def available_backends() -> list[str]:
    return sorted(_BACKENDS)


def load_backend(name: str, **options):
    try:
        factory = _BACKENDS[name]
    except KeyError:
        raise BackendUnavailableError(
            f"unknown backend {name!r}; available: {', '.join(available_backends())}"
        ) from None
    return factory(**options)


# -- mock -------------------------------------------------------------------

def _match_label(text: str, labels: Sequence[str]) -> str | None:
    hits = [lab for lab in labels if text == lab or text.endswith(" " + lab)]
    return max(hits, key=len) if hits else None


@dataclass
class MockBackend:
    """Weight-free backend rendering relevance from known ground-truth masks.

    ``relevance`` returns the Gaussian-blurred mask of the matching category,
    seen through the view geometry, plus seeded Gaussian noise clipped at 0.
    Optional knobs make it behave more like a ViT explainer:

    * ``grid`` pools the view onto a coarse patch grid before adding noise and
      upsamples bilinearly, so small views (crops) get finer maps;
    * ``leak`` adds a prompt-independent fraction of all objects to every map,
      the kind of shared artefact distractor calibration removes.
    """

    scene: list[tuple[str, np.ndarray]]
    noise_sigma: float = 0.0
    blur_radius: float = 0.0
    seed: int = 0
    grid: tuple[int, int] | None = None
    leak: float = 0.0
    prob_temperature: float = 0.1
    _masks: dict = field(init=False, repr=False)
    _blurred: dict = field(init=False, repr=False)
    _union: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if not self.scene:
            raise ValueError("mock scene needs at least one category")
        shapes = {np.shape(m) for _, m in self.scene}
        if len(shapes) != 1 or len(next(iter(shapes))) != 2:
            raise ShapeMismatchError(f"scene masks must share one 2-D shape, got {shapes}")
        if self.noise_sigma < 0 or self.blur_radius < 0:
            raise ValueError("noise_sigma and blur_radius must be non-negative")
        self.shape = next(iter(shapes))
        self._masks = {}
        self._blurred = {}
        for cat, m in self.scene:
            m = np.asarray(m, dtype=np.float64) > 0
            self._masks[cat] = self._masks.get(cat, np.zeros(self.shape, bool)) | m
        for cat, m in self._masks.items():
            self._blurred[cat] = self._blur(m.astype(np.float64))
        union = np.zeros(self.shape, bool)
        for m in self._masks.values():
            union |= m
        self._union = self._blur(union.astype(np.float64))
        if self.grid is not None:
            self.grid = tuple(self.grid)

    def _blur(self, m):
        if self.blur_radius == 0:
            return m
        return ndimage.gaussian_filter(m, sigma=self.blur_radius, mode="nearest")

    @property
    def descriptor(self) -> BackendDescriptor:
        gh, gw = self.grid or (1, 1)
        res = math.lcm(gh, gw)
        return BackendDescriptor("mock", res * max(1, 224 // res), (gh, gw))

    def _coords(self, image, coords):
        if coords is None:
            if image.shape[:2] != self.shape:
                raise ShapeMismatchError(
                    f"image shape {image.shape[:2]} does not match mock scene {self.shape}"
                )
            coords = identity_coords(*self.shape)
        return coords

    def _category(self, text: str) -> str | None:
        return _match_label(text, list(self._masks))

    def class_probabilities(self, image, prompts: PromptSet) -> np.ndarray:
        coords = self._coords(check_image(image), source_coords(image))
        r, c = coords[..., 0], coords[..., 1]
        sims = []
        for text in prompts.texts:
            cat = self._category(text)
            sims.append(0.0 if cat is None else float(self._masks[cat][r, c].mean()))
        return softmax(np.array(sims) / self.prob_temperature)

    def relevance(self, image, prompt: str) -> RelevanceMap:
        coords = self._coords(check_image(image), source_coords(image))
        r, c = coords[..., 0], coords[..., 1]
        cat = self._category(prompt)
        view = np.zeros(coords.shape[:2])
        if cat is not None:
            view = view + self._blurred[cat][r, c]
        if self.leak:
            view = view + self.leak * self._union[r, c]
        if self.grid is not None:
            base = area_pool(view, self.grid)
        else:
            base = view
        if self.noise_sigma > 0:
            rng = np.random.default_rng([self.seed, zlib.crc32(prompt.encode()), self._view_key(image, coords)])
            base = base + rng.normal(0.0, self.noise_sigma, size=base.shape)
        base = np.clip(base, 0.0, None)
        if self.grid is not None:
            base = np.clip(upsample_bilinear(base, coords.shape[:2]), 0.0, None)
        return RelevanceMap(base, prompt)

    @staticmethod
    def _view_key(image, coords) -> int:
        h = hashlib.blake2b(digest_size=8)
        h.update(np.ascontiguousarray(image, dtype=np.float32).tobytes())
        h.update(np.ascontiguousarray(coords, dtype=np.int64).tobytes())
        return int.from_bytes(h.digest(), "little")


@register_backend("mock")
def mock_backend(scene, noise_sigma: float = 0.0, blur_radius: float = 0.0, seed: int = 0,
                 **kwargs) -> MockBackend:
    return MockBackend(list(scene), noise_sigma, blur_radius, seed, **kwargs)


# -- CLIP -------------------------------------------------------------------

CLIP_MEAN = (0.48145466, 0.4578275, 0.40821073)
CLIP_STD = (0.26862954, 0.26130258, 0.27577711)


class ClipBackend:
    """CLIP ViT with gradient-weighted attention relevance propagation.

    For each vision block the attention map is weighted by its gradient with
    respect to the image-text similarity, negative parts are clamped, heads are
    averaged, and the result is rolled into ``R <- R + A @ R`` starting from the
    identity.  The CLS row of ``R`` over patch tokens is the relevance.

    ``model`` and ``tokenizer`` may be injected (tests use a tiny randomly
    initialised model); otherwise weights load lazily from ``weights_path`` or
    the hub id ``model_name``.
    """

    def __init__(self, model_name: str = "openai/clip-vit-base-patch32",
                 weights_path: str | None = None, device: str = "cpu",
                 model=None, tokenizer=None):
        self.model_name = model_name
        self.weights_path = weights_path
        self.device = device
        self._model = model
        self._tokenizer = tokenizer
        self._text_cache: dict[str, object] = {}
        if model is not None:
            self._prepare(model)

    def _prepare(self, model):
        model.config._attn_implementation = "eager"
        model.vision_model.config._attn_implementation = "eager"
        model.eval().to(self.device)
        for p in model.parameters():
            p.requires_grad_(False)

    def _ensure_loaded(self):
        if self._model is not None:
            return
        try:
            from transformers import CLIPModel, CLIPTokenizer

            src = self.weights_path or self.model_name
            model = CLIPModel.from_pretrained(src, attn_implementation="eager")
            self._tokenizer = self._tokenizer or CLIPTokenizer.from_pretrained(src)
        except Exception as exc:  # noqa: BLE001 - any load failure means unavailable
            raise BackendUnavailableError(f"cannot load CLIP weights from {src!r}: {exc}") from exc
        self._model = model
        self._prepare(model)

    @property
    def descriptor(self) -> BackendDescriptor:
        self._ensure_loaded()
        vc = self._model.config.vision_config
        g = vc.image_size // vc.patch_size
        return BackendDescriptor(self.model_name, vc.image_size, (g, g))

    def _pixels(self, image):
        import torch
        import torch.nn.functional as F

        arr = check_image(image).astype(np.float32)
        if arr.ndim == 2:
            arr = np.repeat(arr[..., None], 3, axis=-1)
        if arr.max() > 1.0:
            arr = arr / 255.0
        t = torch.from_numpy(np.ascontiguousarray(arr)).permute(2, 0, 1)[None]
        res = self._model.config.vision_config.image_size
        t = F.interpolate(t, size=(res, res), mode="bicubic", align_corners=False, antialias=True)
        mean = torch.tensor(CLIP_MEAN).view(1, 3, 1, 1)
        std = torch.tensor(CLIP_STD).view(1, 3, 1, 1)
        return ((t.clamp(0, 1) - mean) / std).to(self.device)

    def _text_embedding(self, text: str):
        import torch

        if text not in self._text_cache:
            tok = self._tokenizer
            if callable(tok) and not hasattr(tok, "batch_decode"):
                ids = torch.as_tensor([tok(text)], dtype=torch.long)
                inputs = {"input_ids": ids}
            else:
                inputs = dict(tok([text], padding=True, return_tensors="pt"))
            inputs = {k: v.to(self.device) for k, v in inputs.items()}
            with torch.no_grad():
                emb = self._model.get_text_features(**inputs)
            emb = getattr(emb, "pooler_output", emb)
            self._text_cache[text] = emb[0] / emb[0].norm()
        return self._text_cache[text]

    def _image_embedding(self, pixels, **kw):
        out = self._model.vision_model(pixel_values=pixels, **kw)
        emb = self._model.visual_projection(out.pooler_output)[0]
        return emb / emb.norm(), out

    def class_probabilities(self, image, prompts: PromptSet) -> np.ndarray:
        import torch

        self._ensure_loaded()
        with torch.no_grad():
            img, _ = self._image_embedding(self._pixels(image))
            txt = torch.stack([self._text_embedding(t) for t in prompts.texts])
            logits = self._model.logit_scale.exp() * txt @ img
        return softmax(logits.double().cpu().numpy())

    def relevance(self, image, prompt: str) -> RelevanceMap:
        import torch

        self._ensure_loaded()
        h, w = check_image(image).shape[:2]
        # weights are frozen, so the graph has to start at the input
        pixels = self._pixels(image).requires_grad_(True)
        txt = self._text_embedding(prompt)
        with torch.enable_grad():
            img, out = self._image_embedding(pixels, output_attentions=True)
            score = img @ txt
            attns = out.attentions
            grads = torch.autograd.grad(score, attns)
        n = attns[0].shape[-1]
        R = torch.eye(n, dtype=attns[0].dtype)
        for a, g in zip(attns, grads):
            cam = (g[0] * a[0]).clamp(min=0).mean(dim=0).detach()
            R = R + cam @ R
        rel = R[0, 1:].double().cpu().numpy()
        if not np.all(np.isfinite(rel)):
            raise NonFiniteRelevanceError(f"relevance propagation produced NaN for {prompt!r}")
        gh, gw = self.descriptor.patch_grid
        grid_map = np.clip(rel.reshape(gh, gw), 0.0, None)
        return RelevanceMap(np.clip(upsample_bilinear(grid_map, (h, w)), 0.0, None), prompt)

    def features(self, image) -> np.ndarray:
        """Patch-token features of the image tower, upsampled to (h, w, d)."""
        import torch
        import torch.nn.functional as F

        self._ensure_loaded()
        h, w = check_image(image).shape[:2]
        with torch.no_grad():
            out = self._model.vision_model(pixel_values=self._pixels(image))
        tokens = out.last_hidden_state[0, 1:]
        gh, gw = self.descriptor.patch_grid
        fmap = tokens.T.reshape(1, -1, gh, gw).float()
        fmap = F.interpolate(fmap, size=(h, w), mode="bilinear", align_corners=False)
        return fmap[0].permute(1, 2, 0).cpu().numpy()


@register_backend("clip")
def clip_backend(**options) -> ClipBackend:
    return ClipBackend(**options)
