"""Image and dataset types, procedural subjects, folder ingestion and prompts.

Images are channel-last ``float32`` arrays with values in ``[0, 1]``. A stack
of images is an ``(N, H, W, C)`` array. On disk everything is 8-bit PNG.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

from .errors import ConfigurationError, DimensionError, IngestionError

SUPPORTED_RESOLUTIONS = (32, 64, 128, 256)
MANIFEST_VERSION = 1


class Task(str, Enum):
    ARTISTIC_STYLE = "artistic_style"
    HUMAN_FACE = "human_face"


class Source(str, Enum):
    SYNTHETIC = "synthetic"
    FOLDER = "folder"


def as_image(pixels) -> np.ndarray:
    """Validate and return an ImageTensor (H, W, C float32 in [0, 1])."""
    arr = np.asarray(pixels, dtype=np.float32)
    if arr.ndim == 2:
        arr = arr[..., None]
    if arr.ndim != 3:
        raise DimensionError(f"expected H x W x C image, got shape {arr.shape}")
    h, w, c = arr.shape
    if h != w:
        raise DimensionError(f"images must be square, got {h}x{w}")
    if c not in (1, 3):
        raise DimensionError(f"channels must be 1 or 3, got {c}")
    if arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
        raise ValueError("pixel values must lie in [0, 1]")
    return arr


def resize_area(image: np.ndarray, resolution: int) -> np.ndarray:
    """Area-average resize of a single H x W x C image to ``resolution``."""
    h, w, c = image.shape
    if h == resolution and w == resolution:
        return image.astype(np.float32, copy=True)
    if h % resolution == 0 and w % resolution == 0:
        fh, fw = h // resolution, w // resolution
        out = image.reshape(resolution, fh, resolution, fw, c).mean(axis=(1, 3))
        return out.astype(np.float32)
    chans = []
    for ch in range(c):
        im = Image.fromarray(image[..., ch].astype(np.float32), mode="F")
        im = im.resize((resolution, resolution), Image.Resampling.BOX)
        chans.append(np.asarray(im, dtype=np.float32))
    return np.clip(np.stack(chans, axis=-1), 0.0, 1.0)


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def save_png(image: np.ndarray, path: Path) -> None:
    arr = to_uint8(image)
    if arr.shape[-1] == 1:
        arr = arr[..., 0]
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr).save(path, format="PNG")


def read_png(path: Path, resolution: int | None = None, channels: int = 3) -> np.ndarray:
    with Image.open(path) as im:
        im = im.convert("RGB" if channels == 3 else "L")
        arr = np.asarray(im, dtype=np.float32) / 255.0
    if arr.ndim == 2:
        arr = arr[..., None]
    if resolution is not None:
        arr = resize_area(arr, resolution)
    return arr


def file_checksum(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


@dataclass
class SubjectDataset:
    subject_id: str
    task: Task
    images: np.ndarray
    source: Source = Source.SYNTHETIC

    def __post_init__(self):
        self.task = Task(self.task)
        self.source = Source(self.source)
        images = np.asarray(self.images, dtype=np.float32)
        if images.ndim != 4 or len(images) < 1:
            raise DimensionError("a subject needs at least one H x W x C image")
        as_image(images[0])
        if images.min() < 0.0 or images.max() > 1.0:
            raise ValueError("pixel values must lie in [0, 1]")
        images.setflags(write=False)
        self.images = images

    def __len__(self) -> int:
        return len(self.images)

    @property
    def resolution(self) -> int:
        return self.images.shape[1]


@dataclass(frozen=True)
class PromptSet:
    prompts: tuple[tuple[int, str], ...]
    known_count: int = 0

    def __post_init__(self):
        prompts = tuple((int(pid), str(text)) for pid, text in self.prompts)
        object.__setattr__(self, "prompts", prompts)
        ids = [pid for pid, _ in prompts]
        if len(set(ids)) != len(ids):
            raise ConfigurationError("prompt ids must be unique")
        if not 0 <= self.known_count <= len(prompts):
            raise ConfigurationError(
                f"known_count {self.known_count} outside [0, {len(prompts)}]"
            )

    def __len__(self) -> int:
        return len(self.prompts)

    @property
    def ids(self) -> list[int]:
        return [pid for pid, _ in self.prompts]

    def to_dict(self) -> dict:
        return {
            "prompts": [{"prompt_id": pid, "text": t} for pid, t in self.prompts],
            "known_count": self.known_count,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "PromptSet":
        prompts = tuple((p["prompt_id"], p["text"]) for p in data["prompts"])
        return cls(prompts, data.get("known_count", 0))


# prompt texts are generated from small grids so every id reads differently
_FACE_LIGHTS = ("soft", "harsh", "warm", "cool", "dim")
_FACE_BACKDROPS = ("brick", "tiled", "painted", "wooden", "stone", "glass")
_STYLE_MOTIFS = ("harbour", "orchard", "market", "bridge", "courtyard", "hillside")
_STYLE_TONES = ("amber", "slate", "rose", "olive", "ink")


def default_prompts(task: Task | str = Task.HUMAN_FACE) -> PromptSet:
    """Thirty prompt ids (0-29) with templated texts."""
    task = Task(task)
    if task is Task.HUMAN_FACE:
        texts = [f"[V] face, {light} light, {wall} backdrop"
                 for wall in _FACE_BACKDROPS for light in _FACE_LIGHTS]
    else:
        texts = [f"{motif} scene rendered in the [V] manner, {tone} tones"
                 for motif in _STYLE_MOTIFS for tone in _STYLE_TONES]
    return PromptSet(tuple(enumerate(texts)), known_count=0)


def split_prompts(prompts: PromptSet, known_count: int, seed: int) -> tuple[PromptSet, PromptSet]:
    """Seeded disjoint partition into ``known_count`` known and the held-out rest.

    Both halves keep the input order of their members.
    """
    if not 0 <= known_count <= len(prompts):
        raise ConfigurationError(
            f"known_count {known_count} outside [0, {len(prompts)}]"
        )
    order = np.random.default_rng(seed).permutation(len(prompts))
    known_idx = set(order[:known_count].tolist())
    known = tuple(p for i, p in enumerate(prompts.prompts) if i in known_idx)
    held = tuple(p for i, p in enumerate(prompts.prompts) if i not in known_idx)
    return PromptSet(known, len(known)), PromptSet(held, 0)


# ---------------------------------------------------------------- synthetic


def _grid(n: int) -> tuple[np.ndarray, np.ndarray]:
    c = (np.arange(n, dtype=np.float64) + 0.5) / n
    return np.meshgrid(c, c, indexing="ij")


def _ellipse(yy, xx, cy, cx, ry, rx, soft) -> np.ndarray:
    d = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2
    return 1.0 / (1.0 + np.exp(np.minimum((d - 1.0) / soft, 50.0)))


def _smooth_noise(rng: np.random.Generator, n: int, cells: int) -> np.ndarray:
    coarse = rng.random((cells + 1, cells + 1))
    t = np.linspace(0, cells, n, endpoint=False)
    i = t.astype(int)
    f = t - i
    f = f * f * (3 - 2 * f)
    a = coarse[np.ix_(i, i)]
    b = coarse[np.ix_(i, i + 1)]
    c = coarse[np.ix_(i + 1, i)]
    d = coarse[np.ix_(i + 1, i + 1)]
    fy, fx = f[:, None], f[None, :]
    return (a * (1 - fx) + b * fx) * (1 - fy) + (c * (1 - fx) + d * fx) * fy


def _style_signature(rng: np.random.Generator) -> dict:
    return {
        "palette": rng.random((4, 3)),
        "angle": rng.uniform(0, np.pi),
        "freq": rng.uniform(3.0, 9.0),
        "cells": int(rng.integers(3, 8)),
        "blobs": int(rng.integers(3, 8)),
        "grain": rng.uniform(0.02, 0.08),
        "contrast": rng.uniform(0.15, 0.35),
    }


def _render_style(sig: dict, rng: np.random.Generator, n: int) -> np.ndarray:
    yy, xx = _grid(n)
    pal = sig["palette"]
    field_ = _smooth_noise(rng, n, sig["cells"])
    idx = np.clip((field_ * 3.999).astype(int), 0, 3)
    img = pal[idx]
    for _ in range(sig["blobs"]):
        col = pal[rng.integers(0, 4)] * rng.uniform(0.7, 1.1)
        m = _ellipse(yy, xx, rng.random(), rng.random(),
                     rng.uniform(0.05, 0.25), rng.uniform(0.05, 0.25), 0.15)
        img = img * (1 - m[..., None]) + col * m[..., None]
    ang = sig["angle"] + rng.normal(0, 0.1)
    phase = rng.uniform(0, 2 * np.pi)
    u = np.cos(ang) * xx + np.sin(ang) * yy
    strokes = np.sin(2 * np.pi * sig["freq"] * u + phase)
    img = img + sig["contrast"] * 0.5 * strokes[..., None]
    img = img + sig["grain"] * (_smooth_noise(rng, n, n // 4)[..., None] - 0.5)
    return img


def _face_signature(rng: np.random.Generator) -> dict:
    skin = np.array([0.95, 0.8, 0.65]) * rng.uniform(0.45, 1.0) + rng.normal(0, 0.04, 3)
    return {
        "skin": skin,
        "hair": rng.random(3) * 0.6,
        "eye": rng.random(3) * 0.7,
        "face_w": rng.uniform(0.24, 0.34),
        "face_h": rng.uniform(0.30, 0.40),
        "eye_sep": rng.uniform(0.09, 0.15),
        "eye_r": rng.uniform(0.025, 0.05),
        "mouth_w": rng.uniform(0.06, 0.14),
        "hair_h": rng.uniform(0.05, 0.2),
    }


def _render_face(sig: dict, rng: np.random.Generator, n: int) -> np.ndarray:
    yy, xx = _grid(n)
    bg_a, bg_b = rng.random(3), rng.random(3)
    g = rng.uniform(0, 1)
    img = bg_a * (1 - yy[..., None] * g) + bg_b * (yy[..., None] * g)
    s = rng.uniform(0.9, 1.1)
    cy, cx = 0.52 + rng.normal(0, 0.03), 0.5 + rng.normal(0, 0.04)
    fw, fh = sig["face_w"] * s, sig["face_h"] * s
    hair = _ellipse(yy, xx, cy - sig["hair_h"] * s * 0.5, cx, fh * 1.05, fw * 1.12, 0.08)
    img = img * (1 - hair[..., None]) + sig["hair"] * hair[..., None]
    face = _ellipse(yy, xx, cy, cx, fh, fw, 0.06)
    shade = 1.0 + 0.15 * (xx - cx) * rng.normal(0, 1)
    img = img * (1 - face[..., None]) + (sig["skin"] * shade[..., None]) * face[..., None]
    er = sig["eye_r"] * s
    for side in (-1, 1):
        ey, ex = cy - 0.06 * s, cx + side * sig["eye_sep"] * s
        white = _ellipse(yy, xx, ey, ex, er, er * 1.5, 0.1)
        img = img * (1 - white[..., None]) + 0.95 * white[..., None]
        iris = _ellipse(yy, xx, ey, ex + rng.normal(0, 0.006), er * 0.7, er * 0.7, 0.1)
        img = img * (1 - iris[..., None]) + sig["eye"] * iris[..., None]
    smile = rng.uniform(-0.02, 0.04)
    my = cy + 0.14 * s + smile * ((xx - cx) / (sig["mouth_w"] * s)) ** 2
    mouth = np.exp(-((yy - my) / 0.012) ** 2) * np.exp(-((xx - cx) / (sig["mouth_w"] * s)) ** 6)
    img = img * (1 - 0.8 * mouth[..., None]) + np.array([0.55, 0.15, 0.2]) * 0.8 * mouth[..., None]
    return img


def generate_synthetic_subjects(
    task: Task | str,
    n_subjects: int,
    n_images: int,
    resolution: int = 64,
    seed: int = 0,
    prefix: str | None = None,
) -> list[SubjectDataset]:
    """Procedurally generate ``n_subjects`` subjects of ``n_images`` each.

    Every subject gets a signature (palette and texture family for styles,
    a sprite-face layout for faces) and each image varies its content. Rendering
    is done at twice the resolution and area-averaged down. Pure function of
    its arguments.
    """
    task = Task(task)
    if resolution not in SUPPORTED_RESOLUTIONS:
        raise ConfigurationError(
            f"resolution {resolution} not in {SUPPORTED_RESOLUTIONS}"
        )
    if n_subjects < 1 or n_images < 1:
        raise ConfigurationError("n_subjects and n_images must be >= 1")
    prefix = prefix or ("face" if task is Task.HUMAN_FACE else "style")
    root = np.random.SeedSequence([seed, 0 if task is Task.HUMAN_FACE else 1])
    out = []
    for s, child in enumerate(root.spawn(n_subjects)):
        sig_seq, img_seq = child.spawn(2)
        srng = np.random.default_rng(sig_seq)
        if task is Task.HUMAN_FACE:
            sig, render = _face_signature(srng), _render_face
        else:
            sig, render = _style_signature(srng), _render_style
        imgs = np.empty((n_images, resolution, resolution, 3), dtype=np.float32)
        for i, iseq in enumerate(img_seq.spawn(n_images)):
            hi = render(sig, np.random.default_rng(iseq), 2 * resolution)
            hi = np.clip(hi, 0.0, 1.0)
            imgs[i] = resize_area(hi.astype(np.float32), resolution)
        out.append(SubjectDataset(f"{prefix}-{seed}-{s:04d}", task, imgs, Source.SYNTHETIC))
    return out


def synthetic_corpus(n_images: int, resolution: int = 64, seed: int = 0,
                     per_subject: int = 20) -> np.ndarray:
    """A mixed face/style corpus of roughly ``n_images`` images for pre-training."""
    n_subj = max(1, -(-n_images // per_subject))
    faces = generate_synthetic_subjects(Task.HUMAN_FACE, (n_subj + 1) // 2, per_subject,
                                        resolution, seed=seed + 1000)
    styles = generate_synthetic_subjects(Task.ARTISTIC_STYLE, max(1, n_subj // 2), per_subject,
                                         resolution, seed=seed + 2000)
    stack = np.concatenate([d.images for d in faces + styles])[:n_images]
    perm = np.random.default_rng(seed).permutation(len(stack))
    return np.ascontiguousarray(stack[perm])


# --------------------------------------------------------------- manifests


@dataclass(frozen=True)
class ManifestEntry:
    relative_path: str
    subject_id: str
    task: str
    checksum: str


@dataclass
class DatasetManifest:
    version: int = MANIFEST_VERSION
    entries: list[ManifestEntry] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(
            {"version": self.version, "entries": [e.__dict__ for e in self.entries]},
            indent=2,
        )

    @classmethod
    def from_json(cls, text: str) -> "DatasetManifest":
        data = json.loads(text)
        try:
            entries = [ManifestEntry(**e) for e in data["entries"]]
            return cls(int(data["version"]), entries)
        except (KeyError, TypeError) as exc:
            raise IngestionError(f"malformed manifest: {exc}") from exc

    def save(self, path: Path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path: Path) -> "DatasetManifest":
        return cls.from_json(Path(path).read_text())


def write_image_folder(root: Path, datasets: Iterable[SubjectDataset]) -> DatasetManifest:
    """Write ``<root>/<subject_id>/<index>.png`` plus ``manifest.json``."""
    root = Path(root)
    entries = []
    for ds in datasets:
        for i, img in enumerate(ds.images):
            rel = f"{ds.subject_id}/{i:04d}.png"
            save_png(img, root / rel)
            entries.append(ManifestEntry(rel, ds.subject_id, ds.task.value,
                                         file_checksum(root / rel)))
    manifest = DatasetManifest(MANIFEST_VERSION, entries)
    manifest.save(root / "manifest.json")
    return manifest


def read_manifest_images(root: Path, entries: Sequence[ManifestEntry],
                         resolution: int, channels: int = 3) -> list[np.ndarray]:
    root = Path(root)
    images = []
    for e in entries:
        p = root / e.relative_path
        if not p.is_file():
            raise IngestionError(f"missing file: {e.relative_path}", e.relative_path)
        if file_checksum(p) != e.checksum:
            raise IngestionError(f"checksum mismatch: {e.relative_path}", e.relative_path)
        try:
            images.append(read_png(p, resolution, channels))
        except (OSError, ValueError) as exc:
            raise IngestionError(f"undecodable image {e.relative_path}: {exc}",
                                 e.relative_path) from exc
    return images


def load_image_folder(path: Path, manifest: DatasetManifest | None = None,
                      resolution: int = 64) -> list[SubjectDataset]:
    """Load and group the images listed in ``manifest`` by subject id."""
    path = Path(path)
    if manifest is None:
        mpath = path / "manifest.json"
        if not mpath.is_file():
            raise IngestionError(f"no manifest at {mpath}", "manifest.json")
        manifest = DatasetManifest.load(mpath)
    if manifest.version != MANIFEST_VERSION:
        raise IngestionError(f"unsupported manifest version {manifest.version}")
    if resolution not in SUPPORTED_RESOLUTIONS:
        raise ConfigurationError(f"resolution {resolution} not in {SUPPORTED_RESOLUTIONS}")
    groups: dict[str, list[ManifestEntry]] = {}
    for e in manifest.entries:
        groups.setdefault(e.subject_id, []).append(e)
    out = []
    for sid, entries in groups.items():
        images = read_manifest_images(path, entries, resolution)
        out.append(SubjectDataset(sid, Task(entries[0].task), np.stack(images), Source.FOLDER))
    return out


IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".webp")


def scan_folder(root: Path, subject_id: str, task: Task | str = Task.HUMAN_FACE) -> DatasetManifest:
    """Manifest for a loose folder of images (sorted by relative path)."""
    root = Path(root)
    if not root.is_dir():
        raise IngestionError(f"not a directory: {root}", str(root))
    task = Task(task)
    files = sorted(p for p in root.rglob("*") if p.suffix.lower() in IMAGE_SUFFIXES and p.is_file())
    entries = [ManifestEntry(p.relative_to(root).as_posix(), subject_id, task.value, file_checksum(p))
               for p in files]
    return DatasetManifest(MANIFEST_VERSION, entries)
