"""Color-coded segmentation-mask frames built from instance annotations."""

from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .ingest import (AnnotationError, ClipRecord, Frame, InstanceAnnotation, Manifest,
                     load_annotations, read_frame, save_manifest, write_frame)

DEFAULT_THRESHOLD = 0.5


class PaletteError(ValueError):
    pass


@dataclass(frozen=True)
class PaletteEntry:
    categories: frozenset[str]
    color: tuple[int, int, int]
    priority: int


@dataclass
class ColorPalette:
    """Category -> color lookup; entries with higher priority are painted later."""

    entries: list[PaletteEntry]
    background: tuple[int, int, int] = (0, 0, 0)
    _lookup: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        self._lookup = {}
        priorities = set()
        for e in self.entries:
            if e.priority in priorities:
                raise PaletteError(f"duplicate palette priority {e.priority}")
            priorities.add(e.priority)
            if not all(0 <= v <= 255 for v in e.color) or len(e.color) != 3:
                raise PaletteError(f"invalid color {e.color}")
            for name in e.categories:
                if name in self._lookup:
                    raise PaletteError(f"category {name!r} appears in two palette entries")
                self._lookup[name] = e

    def entry_for(self, category: str) -> PaletteEntry | None:
        return self._lookup.get(category)

    def color_of(self, category: str) -> tuple[int, int, int]:
        e = self._lookup.get(category)
        return e.color if e else self.background

    @property
    def categories(self) -> list[str]:
        return list(self._lookup)

    def colors(self) -> set[tuple[int, int, int]]:
        return {e.color for e in self.entries} | {self.background}

    def to_json(self) -> dict:
        return {"entries": [{"categories": sorted(e.categories), "color": list(e.color),
                             "priority": e.priority} for e in self.entries],
                "background": list(self.background)}


# Row order of the coloring table; later rows overwrite earlier ones where masks overlap.
_TABLE = [
    (("person",), (255, 255, 255)),
    (("tv", "laptop", "monitor"), (255, 0, 0)),
    (("bottle", "cup", "wine glass"), (0, 0, 255)),
    (("cell phone",), (0, 255, 255)),
    (("microwave", "oven"), (255, 255, 0)),
    (("sink",), (100, 150, 200)),
    (("paper", "book"), (255, 0, 255)),
    (("keyboard",), (0, 255, 0)),
]


def default_palette(paper_aliases: Iterable[str] = ()) -> ColorPalette:
    """The fixed object coloring scheme. ``paper_aliases`` adds extra category
    names (detector vocabularies without a "paper" class) to the paper/book row."""
    entries = []
    for prio, (names, color) in enumerate(_TABLE):
        cats = set(names)
        if "paper" in cats:
            cats.update(paper_aliases)
        entries.append(PaletteEntry(frozenset(cats), color, prio))
    return ColorPalette(entries)


def load_palette(path) -> ColorPalette:
    """Read a palette override.

    Accepts either ``{"entries": [...], "background": [r, g, b]}`` or a bare
    list of entries; each entry is ``{"categories", "color", "priority"}``.
    """
    raw = json.loads(Path(path).read_text())
    if isinstance(raw, list):
        raw = {"entries": raw}
    try:
        entries = [PaletteEntry(frozenset(e["categories"]), tuple(int(v) for v in e["color"]),
                                int(e["priority"])) for e in raw["entries"]]
        bg = tuple(int(v) for v in raw.get("background", (0, 0, 0)))
    except (KeyError, TypeError, ValueError) as exc:
        raise PaletteError(f"{path}: malformed palette: {exc}") from exc
    return ColorPalette(entries, bg)


def render_mask_frame(annotations: Sequence[InstanceAnnotation], palette: ColorPalette,
                      h: int, w: int, score_threshold: float = DEFAULT_THRESHOLD) -> Frame:
    out = np.empty((h, w, 3), dtype=np.uint8)
    out[:] = palette.background
    keyed = []
    for pos, ann in enumerate(annotations):
        if (ann.height, ann.width) != (h, w):
            raise AnnotationError(f"{ann.label()}: mask size {ann.height}x{ann.width} != frame {h}x{w}")
        entry = palette.entry_for(ann.category)
        if entry is None or ann.score < score_threshold:
            continue
        keyed.append((entry.priority, pos, ann, entry))
    # stable on list position among equal priorities: later entries win
    for _, _, ann, entry in sorted(keyed, key=lambda t: (t[0], t[1])):
        out[ann.mask()] = entry.color
    return Frame(out)


def group_by_frame(annotations: Iterable[InstanceAnnotation]) -> dict[int, list[InstanceAnnotation]]:
    by_frame = defaultdict(list)
    for a in annotations:
        by_frame[a.frame_index].append(a)
    return by_frame


def encode_mask_stream(clip: ClipRecord, palette: ColorPalette, out_dir,
                       threshold: float = DEFAULT_THRESHOLD) -> list[Path]:
    """Render one mask frame per RGB frame of ``clip`` into ``out_dir``."""
    if clip.annotation_path is None or not Path(clip.annotation_path).is_file():
        raise AnnotationError(f"clip {clip.clip_id!r} has no annotation file")
    by_frame = group_by_frame(load_annotations(clip.annotation_path))
    bad = [i for i in by_frame if not 0 <= i < clip.num_frames]
    if bad:
        raise AnnotationError(f"clip {clip.clip_id!r}: annotations reference frames {bad} "
                              f"outside [0, {clip.num_frames})")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, frame_path in enumerate(clip.frame_paths):
        ref = read_frame(frame_path)
        mask = render_mask_frame(by_frame.get(i, []), palette, ref.height, ref.width, threshold)
        p = out_dir / f"mask_{i:05d}.ppm"
        write_frame(p, mask)
        paths.append(p)
    return paths


def encode_manifest_masks(manifest: Manifest, palette: ColorPalette | None = None,
                          threshold: float = DEFAULT_THRESHOLD, out_root=None,
                          on_skip=None) -> Manifest:
    """Render mask streams for every annotated clip and rewrite the manifest
    with ``mask_frames`` entries. Clips without annotations are skipped."""
    palette = palette or default_palette()
    base = Path(manifest.path).parent
    out_root = Path(out_root) if out_root else base / "masks"
    for clip in manifest.clips:
        if clip.annotation_path is None:
            if on_skip:
                on_skip(clip)
            continue
        clip.mask_paths = encode_mask_stream(clip, palette, out_root / clip.clip_id, threshold)
    save_manifest(manifest, manifest.path)
    return manifest
