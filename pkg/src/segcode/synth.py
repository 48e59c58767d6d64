"""Synthetic "moving shapes in an office" clips with exact instance annotations.

Every clip shows a few flat-colored shapes over a smooth background: an
optional person, the activity's relevant objects (categories from the mask
palette) and irrelevant clutter. The class-discriminative cue is controlled
per recipe:

* identity: relevant objects carry their category's fine RGB texture
  (period-2 stripes, checkers or dots) and a category-specific mask color.
  Every 2x2 pixel window of these textures averages to the base color, so
  downscaling by two or more erases the RGB cue while the mask colors survive.
* texture: every class shows the same categories but a class-specific
  texture, so only the RGB stream separates classes.
* motion: classes differ in how their objects move.

Annotations list the visible pixels of every object (relevant and clutter)
as uncompressed RLE, exactly as rendered.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .ingest import (ClipRecord, Frame, InstanceAnnotation, Manifest, encode_rle,
                     save_annotations, save_manifest, write_frame)

MOTIONS = ("static", "drift", "oscillate")
TEXTURES = ("plain", "hstripes", "vstripes", "checker", "dots", "antidots")
CATEGORY_TEXTURE = {
    "keyboard": "hstripes",
    "cell phone": "vstripes",
    "book": "checker",
    "paper": "checker",
    "cup": "dots",
    "bottle": "dots",
    "laptop": "antidots",
    "tv": "antidots",
    "monitor": "antidots",
}
CLUTTER_CATEGORIES = ("chair", "potted plant", "clock", "vase")
TEXTURE_AMPLITUDE = 30.0
SPLITS = ("train", "val", "test")


class SynthError(ValueError):
    pass


@dataclass
class ClassRecipe:
    name: str
    categories: list[str]
    motion: str = "any"  # one of MOTIONS, or "any" for a random pattern per object
    texture: str | None = None  # shared texture for all relevant objects (texture cue)

    def __post_init__(self):
        if self.motion != "any" and self.motion not in MOTIONS:
            raise SynthError(f"{self.name}: unknown motion {self.motion!r}")
        if self.texture is not None and self.texture not in TEXTURES:
            raise SynthError(f"{self.name}: unknown texture {self.texture!r}")

    @property
    def cue(self) -> str:
        if self.texture is not None:
            return "texture"
        return "motion" if self.motion != "any" else "identity"


@dataclass
class SynthSpec:
    classes: list[ClassRecipe]
    resolution: int = 64
    frames_per_clip: int = 12
    clips_per_class: dict = field(default_factory=lambda: {"train": 10, "val": 5, "test": 10})
    clutter: int = 2  # distractor objects per clip
    rgb_noise: float = 0.1  # blend weight of uniform noise, 1.0 = pure noise
    rgb_textures: bool = True  # draw category/recipe textures into RGB frames
    person: bool = True
    imbalance: list[float] | None = None  # per-class multipliers of clips_per_class
    fps: float = 30.0
    seed: int = 0

    def __post_init__(self):
        self.classes = [c if isinstance(c, ClassRecipe) else ClassRecipe(**c) for c in self.classes]
        if len(self.classes) < 2:
            raise SynthError("a synthetic dataset needs at least 2 classes")
        if self.resolution < 16:
            raise SynthError(f"resolution must be >= 16, got {self.resolution}")
        if self.frames_per_clip < 1:
            raise SynthError("frames_per_clip must be >= 1")
        if not 0.0 <= self.rgb_noise <= 1.0:
            raise SynthError(f"rgb_noise must lie in [0, 1], got {self.rgb_noise}")
        unknown = set(self.clips_per_class) - set(SPLITS)
        if unknown:
            raise SynthError(f"unknown splits {sorted(unknown)}")
        if self.imbalance is not None and len(self.imbalance) != len(self.classes):
            raise SynthError("imbalance needs one multiplier per class")

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "SynthSpec":
        try:
            return cls(**obj)
        except TypeError as exc:
            raise SynthError(f"bad synth spec: {exc}") from exc

    @classmethod
    def load(cls, path) -> "SynthSpec":
        return cls.from_json(json.loads(Path(path).read_text()))

    def clip_count(self, split: str, label: int) -> int:
        n = self.clips_per_class.get(split, 0)
        if self.imbalance is not None and n:
            n = max(1, int(round(n * self.imbalance[label])))
        return n


def default_spec(**overrides) -> SynthSpec:
    """Four mask-informative activities told apart by the object in use."""
    classes = [ClassRecipe("type", ["keyboard"]), ClassRecipe("phone", ["cell phone"]),
               ClassRecipe("read", ["book"]), ClassRecipe("drink", ["cup"])]
    return SynthSpec(classes=classes, **overrides)


def make_mask_only_variant(spec: SynthSpec) -> SynthSpec:
    """RGB frames become pure noise; class identity survives only in the annotations."""
    return replace(spec, rgb_noise=1.0, rgb_textures=False)


def make_rgb_only_variant(spec: SynthSpec, category: str = "book") -> SynthSpec:
    """Every class shows the same object category, textured per class, so the
    mask stream carries no class information."""
    classes = []
    for i, c in enumerate(spec.classes):
        tex = c.texture or CATEGORY_TEXTURE.get(c.categories[0], TEXTURES[1 + i % (len(TEXTURES) - 1)])
        classes.append(ClassRecipe(c.name, [category] * len(c.categories), c.motion, tex))
    return replace(spec, classes=classes, rgb_textures=True)


# ---------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------

@dataclass
class _Object:
    category: str
    shape: str
    half: tuple[float, float]  # half extents (y, x); radius for discs
    color: np.ndarray
    texture: str
    path: np.ndarray  # (frames, 2) centre (y, x)
    score: float


@dataclass
class ClipRender:
    frames: np.ndarray  # (n, h, w, 3) uint8
    objects: list[_Object]
    owner: np.ndarray  # (n, h, w) int: index of the visible object, -1 for background
    annotations: list[InstanceAnnotation]

    def visible_mask(self, obj_index: int) -> np.ndarray:
        return self.owner == obj_index


def _texture(name: str, h: int, w: int) -> np.ndarray:
    y, x = np.mgrid[0:h, 0:w]
    if name == "plain":
        return np.zeros((h, w))
    if name == "hstripes":
        return np.where(y % 2 == 0, 1.0, -1.0)
    if name == "vstripes":
        return np.where(x % 2 == 0, 1.0, -1.0)
    if name == "checker":
        return np.where((x + y) % 2 == 0, 1.0, -1.0)
    dot = (x % 2 == 0) & (y % 2 == 0)
    if name == "dots":
        return np.where(dot, 3.0, -1.0)
    if name == "antidots":
        return np.where(dot, -3.0, 1.0)
    raise SynthError(f"unknown texture {name!r}")


def _fold(v: np.ndarray, lo: float, hi: float) -> np.ndarray:
    """Reflect values into [lo, hi] (bouncing motion)."""
    span = hi - lo
    r = np.mod(v - lo, 2 * span)
    return lo + np.where(r > span, 2 * span - r, r)


def _path(rng, motion: str, n: int, res: int, margin: float) -> np.ndarray:
    lo, hi = margin, res - 1 - margin
    p0 = rng.uniform(lo, hi, size=2)
    t = np.arange(n, dtype=float)[:, None]
    if motion == "static":
        path = np.repeat(p0[None, :], n, axis=0)
    elif motion == "drift":
        ang = rng.uniform(0, 2 * np.pi)
        speed = rng.uniform(0.5, 1.5) * res / 64.0
        path = p0 + t * speed * np.array([np.sin(ang), np.cos(ang)])
    else:
        ang = rng.uniform(0, 2 * np.pi)
        amp = rng.uniform(0.1, 0.2) * res
        period = rng.uniform(6, 12)
        phase = rng.uniform(0, 2 * np.pi)
        path = p0 + amp * np.sin(2 * np.pi * t / period + phase) * np.array([np.sin(ang), np.cos(ang)])
    return _fold(path, lo, hi)


def _make_object(rng, category, res, n, size_range, motion, texture, score_range) -> _Object:
    shape = "disc" if rng.random() < 0.5 else "rect"
    size = rng.uniform(*size_range) * res / 2
    if shape == "rect":
        aspect = rng.uniform(0.7, 1.4)
        half = (size * np.sqrt(aspect), size / np.sqrt(aspect))
    else:
        half = (size, size)
    if motion == "any":
        motion = MOTIONS[rng.integers(len(MOTIONS))]
    return _Object(category=category, shape=shape, half=half,
                   color=rng.uniform(60, 165, size=3), texture=texture,
                   path=_path(rng, motion, n, res, margin=size * 0.5),
                   score=float(np.round(rng.uniform(*score_range), 4)))


def _shape_mask(obj: _Object, t: int, res: int) -> np.ndarray:
    yy, xx = np.mgrid[0:res, 0:res] + 0.5
    cy, cx = obj.path[t] + 0.5
    if obj.shape == "disc":
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= obj.half[0] ** 2
    return (np.abs(yy - cy) <= obj.half[0]) & (np.abs(xx - cx) <= obj.half[1])


def render_clip(spec: SynthSpec, label: int, clip_index: int) -> ClipRender:
    res, n = spec.resolution, spec.frames_per_clip
    rng = np.random.default_rng([spec.seed, clip_index])
    recipe = spec.classes[label]

    objects = []
    if spec.person:
        objects.append(_make_object(rng, "person", res, n, (0.5, 0.8), "oscillate", "plain", (0.8, 0.99)))
    for _ in range(spec.clutter):
        cat = CLUTTER_CATEGORIES[rng.integers(len(CLUTTER_CATEGORIES))]
        objects.append(_make_object(rng, cat, res, n, (0.2, 0.4), "any", "plain", (0.5, 0.95)))
    for cat in recipe.categories:
        if not spec.rgb_textures:
            tex = "plain"
        else:
            tex = recipe.texture or CATEGORY_TEXTURE.get(cat, "plain")
        objects.append(_make_object(rng, cat, res, n, (0.3, 0.5), recipe.motion, tex, (0.75, 0.99)))

    yy, xx = np.mgrid[0:res, 0:res]
    tint = rng.uniform(-10, 10, size=3)
    base = rng.uniform(70, 130) + tint
    grad = rng.uniform(-20, 20) * (yy / res - 0.5) + rng.uniform(-20, 20) * (xx / res - 0.5)
    background = base[None, None, :] + grad[:, :, None]
    textures = {o.texture: _texture(o.texture, res, res) for o in objects}

    frames = np.empty((n, res, res, 3), dtype=np.uint8)
    owner = np.full((n, res, res), -1, dtype=np.int64)
    for t in range(n):
        img = background.copy()
        for i, obj in enumerate(objects):  # later objects occlude earlier ones
            m = _shape_mask(obj, t, res)
            owner[t][m] = i
            img[m] = obj.color + TEXTURE_AMPLITUDE * textures[obj.texture][m][:, None]
        img = np.clip(img, 0, 255)
        if spec.rgb_noise > 0:
            noise = rng.uniform(0, 255, size=img.shape)
            img = (1 - spec.rgb_noise) * img + spec.rgb_noise * noise
        frames[t] = np.clip(np.floor(img + 0.5), 0, 255).astype(np.uint8)

    annotations = []
    for t in range(n):
        for i, obj in enumerate(objects):
            vis = owner[t] == i
            if vis.any():
                annotations.append(InstanceAnnotation(t, obj.category, obj.score, encode_rle(vis), res, res))
    return ClipRender(frames, objects, owner, annotations)


def generate(spec: SynthSpec, out_dir) -> Path:
    """Write frames, per-clip annotation files and ``manifest.json``; returns the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    clips, clip_index = [], 0
    for split in SPLITS:
        for label, recipe in enumerate(spec.classes):
            for j in range(spec.clip_count(split, label)):
                cid = f"{split}_{recipe.name}_{j:03d}"
                clip_dir = out_dir / "clips" / cid
                clip_dir.mkdir(parents=True, exist_ok=True)
                render = render_clip(spec, label, clip_index)
                clip_index += 1
                paths = []
                for t, px in enumerate(render.frames):
                    p = clip_dir / f"frame_{t:05d}.ppm"
                    write_frame(p, Frame(px))
                    paths.append(p)
                ann = clip_dir / "annotations.json"
                save_annotations(ann, render.annotations)
                clips.append(ClipRecord(cid, label, paths, ann, spec.fps, split))
    manifest = Manifest([c.name for c in spec.classes], clips, extra={"generator": spec.to_json()})
    return save_manifest(manifest, out_dir / "manifest.json")
