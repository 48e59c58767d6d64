"""On-disk formats: PPM frames, COCO-style uncompressed RLE, JSON manifests."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class FormatError(ValueError):
    """A frame file does not follow the binary PPM layout."""


class AnnotationError(ValueError):
    """An instance annotation is internally inconsistent."""


class ManifestError(ValueError):
    """A manifest is malformed or references missing files."""


# ---------------------------------------------------------------------
# frames
# ---------------------------------------------------------------------

@dataclass
class Frame:
    """An H x W x 3 uint8 RGB image."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim != 3 or px.shape[2] != 3:
            raise ValueError(f"frame pixels must be H x W x 3, got {px.shape}")
        self.pixels = np.ascontiguousarray(px, dtype=np.uint8)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    def __eq__(self, other):
        return isinstance(other, Frame) and np.array_equal(self.pixels, other.pixels)


def _ppm_tokens(buf: bytes, count: int) -> tuple[list[bytes], int]:
    """Read ``count`` whitespace-separated header tokens, skipping ``#`` comments."""
    tokens, pos, n = [], 0, len(buf)
    while len(tokens) < count:
        while pos < n and buf[pos:pos + 1].isspace():
            pos += 1
        if pos >= n:
            raise FormatError(f"truncated PPM header at byte {pos}")
        if buf[pos:pos + 1] == b"#":
            while pos < n and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
            pos += 1
        tokens.append(buf[start:pos])
    # exactly one whitespace byte separates maxval from the raster
    if pos >= n or not buf[pos:pos + 1].isspace():
        raise FormatError(f"missing whitespace after PPM header at byte {pos}")
    return tokens, pos + 1


def decode_ppm(data: bytes) -> Frame:
    if data[:2] != b"P6":
        raise FormatError(f"bad PPM magic {data[:2]!r} at byte 0 (expected b'P6')")
    tokens, offset = _ppm_tokens(data[2:], 3)
    offset += 2
    try:
        width, height, maxval = (int(t) for t in tokens)
    except ValueError as exc:
        raise FormatError(f"non-numeric PPM header field before byte {offset}") from exc
    if maxval != 255:
        raise FormatError(f"PPM maxval {maxval} unsupported (need 255), header ends at byte {offset}")
    if width < 1 or height < 1:
        raise FormatError(f"PPM dimensions {width}x{height} invalid")
    need = width * height * 3
    payload = data[offset:offset + need]
    if len(payload) < need:
        raise FormatError(
            f"truncated PPM payload: expected {need} bytes from byte {offset}, "
            f"file ends at byte {len(data)}")
    px = np.frombuffer(payload, dtype=np.uint8).reshape(height, width, 3)
    return Frame(px.copy())


def encode_ppm(frame: Frame) -> bytes:
    return b"P6\n%d %d\n255\n" % (frame.width, frame.height) + frame.pixels.tobytes()


def read_frame(path) -> Frame:
    with open(path, "rb") as fh:
        return decode_ppm(fh.read())


def write_frame(path, frame: Frame) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_ppm(frame))


def resize_frame(frame: Frame, target: int) -> Frame:
    """Bilinear stretch to ``target`` x ``target`` with half-pixel centres.

    Values are rounded half up to uint8, so the result is platform independent.
    """
    if target < 1:
        raise ValueError(f"resize target must be >= 1, got {target}")
    h, w = frame.height, frame.width
    if h == target and w == target:
        return Frame(frame.pixels.copy())
    rows = _bilinear_taps(h, target)
    cols = _bilinear_taps(w, target)
    src = frame.pixels.astype(np.float64)
    r0, r1, rw = rows
    c0, c1, cw = cols
    top = src[r0][:, c0] * (1 - cw)[None, :, None] + src[r0][:, c1] * cw[None, :, None]
    bot = src[r1][:, c0] * (1 - cw)[None, :, None] + src[r1][:, c1] * cw[None, :, None]
    out = top * (1 - rw)[:, None, None] + bot * rw[:, None, None]
    return Frame(np.clip(np.floor(out + 0.5), 0, 255).astype(np.uint8))


def _bilinear_taps(n_in: int, n_out: int):
    pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    pos = np.clip(pos, 0.0, n_in - 1)
    i0 = np.floor(pos).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, pos - i0


# ---------------------------------------------------------------------
# run-length encoded masks
# ---------------------------------------------------------------------

def decode_rle(counts, h: int, w: int, name: str = "mask") -> np.ndarray:
    """Uncompressed COCO RLE (column-major, background run first) -> bool (h, w)."""
    counts = [int(c) for c in counts]
    if any(c < 0 for c in counts):
        raise AnnotationError(f"{name}: negative run length in RLE counts")
    total = sum(counts)
    if total != h * w:
        raise AnnotationError(f"{name}: RLE counts sum to {total}, expected {h}*{w}={h * w}")
    values = np.zeros(len(counts), dtype=bool)
    values[1::2] = True
    flat = np.repeat(values, counts)
    return flat.reshape(w, h).T.copy()


def encode_rle(mask: np.ndarray) -> list[int]:
    """Inverse of :func:`decode_rle`; always starts with a (possibly empty) background run."""
    flat = np.asarray(mask, dtype=bool).T.reshape(-1)
    if flat.size == 0:
        return [0]
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    edges = np.concatenate(([0], change, [flat.size]))
    runs = np.diff(edges).tolist()
    if flat[0]:
        runs.insert(0, 0)
    return runs


@dataclass
class InstanceAnnotation:
    frame_index: int
    category: str
    score: float
    counts: list[int]
    height: int
    width: int

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise AnnotationError(f"{self.label()}: score {self.score} outside [0, 1]")
        if sum(self.counts) != self.height * self.width:
            raise AnnotationError(
                f"{self.label()}: RLE counts sum to {sum(self.counts)}, "
                f"expected {self.height * self.width}")

    def label(self) -> str:
        return f"instance '{self.category}' in frame {self.frame_index}"

    def mask(self) -> np.ndarray:
        return decode_rle(self.counts, self.height, self.width, self.label())

    def to_json(self) -> dict:
        return {"frame_index": self.frame_index, "category": self.category,
                "score": self.score, "size": [self.height, self.width],
                "counts": list(self.counts)}

    @classmethod
    def from_json(cls, obj: dict) -> "InstanceAnnotation":
        try:
            h, w = obj["size"]
            return cls(int(obj["frame_index"]), str(obj["category"]), float(obj["score"]),
                       [int(c) for c in obj["counts"]], int(h), int(w))
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, AnnotationError):
                raise
            raise AnnotationError(f"malformed annotation {obj!r}: {exc}") from exc


def load_annotations(path) -> list[InstanceAnnotation]:
    with open(path) as fh:
        raw = json.load(fh)
    if not isinstance(raw, list):
        raise AnnotationError(f"{path}: annotation file must hold a JSON list")
    return [InstanceAnnotation.from_json(o) for o in raw]


def save_annotations(path, annotations) -> None:
    with open(path, "w") as fh:
        json.dump([a.to_json() for a in annotations], fh)


# ---------------------------------------------------------------------
# manifest
# ---------------------------------------------------------------------

@dataclass
class ClipRecord:
    clip_id: str
    label: int
    frame_paths: list[Path]
    annotation_path: Path | None = None
    fps: float = 30.0
    split: str = "train"
    mask_paths: list[Path] | None = None

    @property
    def num_frames(self) -> int:
        return len(self.frame_paths)


@dataclass
class Manifest:
    classes: list[str]
    clips: list[ClipRecord]
    path: Path | None = None
    extra: dict = field(default_factory=dict)

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    def split(self, name: str) -> list[ClipRecord]:
        return [c for c in self.clips if c.split == name]

    def __len__(self):
        return len(self.clips)


def _resolve(base: Path, p) -> Path:
    p = Path(p)
    return p if p.is_absolute() else base / p


def _relative(base: Path, p: Path) -> str:
    try:
        return os.path.relpath(p, base).replace(os.sep, "/")
    except ValueError:
        return str(p)


def load_manifest(path, check_files: bool = True) -> Manifest:
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"manifest not found: {path}")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}: invalid JSON: {exc}") from exc
    base = path.parent
    classes = raw.get("classes")
    if not isinstance(classes, list) or not all(isinstance(c, str) for c in classes):
        raise ManifestError(f"{path}: 'classes' must be a list of strings")
    if len(set(classes)) != len(classes):
        raise ManifestError(f"{path}: duplicate class names in {classes}")
    clips, seen = [], set()
    for entry in raw.get("clips", []):
        try:
            cid = str(entry["clip_id"])
            label = int(entry["label"])
            frames = [_resolve(base, p) for p in entry["frames"]]
        except (KeyError, TypeError, ValueError) as exc:
            raise ManifestError(f"{path}: malformed clip entry {entry!r}") from exc
        if cid in seen:
            raise ManifestError(f"{path}: duplicate clip_id {cid!r}")
        seen.add(cid)
        if not 0 <= label < len(classes):
            raise ManifestError(f"{path}: clip {cid!r} label {label} outside [0, {len(classes)})")
        if not frames:
            raise ManifestError(f"{path}: clip {cid!r} lists no frames")
        ann = entry.get("annotations")
        masks = entry.get("mask_frames")
        rec = ClipRecord(
            clip_id=cid, label=label, frame_paths=frames,
            annotation_path=_resolve(base, ann) if ann else None,
            fps=float(entry.get("fps", 30.0)), split=str(entry.get("split", "train")),
            mask_paths=[_resolve(base, p) for p in masks] if masks else None)
        if check_files:
            for p in rec.frame_paths + (rec.mask_paths or []):
                if not p.is_file():
                    raise ManifestError(f"{path}: clip {cid!r} references missing file {p}")
            if rec.annotation_path is not None and not rec.annotation_path.is_file():
                raise ManifestError(f"{path}: clip {cid!r} annotation file missing: {rec.annotation_path}")
        clips.append(rec)
    extra = {k: v for k, v in raw.items() if k not in ("classes", "clips")}
    return Manifest(classes=list(classes), clips=clips, path=path, extra=extra)


def manifest_to_json(manifest: Manifest, base: Path) -> dict:
    clips = []
    for c in manifest.clips:
        entry = {"clip_id": c.clip_id, "label": c.label, "fps": c.fps, "split": c.split,
                 "frames": [_relative(base, p) for p in c.frame_paths],
                 "annotations": _relative(base, c.annotation_path) if c.annotation_path else None}
        if c.mask_paths is not None:
            entry["mask_frames"] = [_relative(base, p) for p in c.mask_paths]
        clips.append(entry)
    return {**manifest.extra, "classes": manifest.classes, "clips": clips}


def save_manifest(manifest: Manifest, path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(manifest_to_json(manifest, path.parent), indent=1) + "\n")
    manifest.path = path
    return path


def load_clip_frames(paths, resolution: int | None = None) -> np.ndarray:
    """Read frames into a (n, h, w, 3) uint8 array, optionally resized square."""
    frames = [read_frame(p) for p in paths]
    if resolution is not None:
        frames = [resize_frame(f, resolution) for f in frames]
    shapes = {f.pixels.shape for f in frames}
    if len(shapes) != 1:
        raise FormatError(f"frames of one clip differ in size: {sorted(shapes)}")
    return np.stack([f.pixels for f in frames])
