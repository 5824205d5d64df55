"""Corpus manifests (JSON, relative paths) and PNG image I/O."""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ConfigError, UpstreamMissingError

SCHEMA_VERSION = 1
FOLLOWUP_SCHEMA_VERSION = 1


def read_png(path) -> np.ndarray:
    """Read a single-channel PNG, keeping its bit depth (uint8 or uint16)."""
    path = Path(path)
    if not path.exists():
        raise UpstreamMissingError(f"image file not found: {path}")
    with Image.open(path) as im:
        if im.mode in ("I;16", "I;16B", "I;16L"):
            return np.asarray(im, dtype=np.uint16).copy()
        if im.mode == "I":
            return np.asarray(im).astype(np.uint16)
        if im.mode != "L":
            im = im.convert("L")
        return np.asarray(im, dtype=np.uint8).copy()


def write_png(path, array: np.ndarray) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    array = np.ascontiguousarray(array)
    if array.ndim != 2:
        raise ValueError("only single-channel images are supported")
    if array.dtype in (np.uint8, np.uint16):
        im = Image.fromarray(array)
    else:
        raise TypeError(f"unsupported dtype for PNG: {array.dtype}")
    im.save(path, format="PNG", optimize=False)


@dataclass
class ManifestEntry:
    sample_id: str
    image_path: str
    mask_path: str | None
    grades: tuple[int, int]
    label: int
    cohort_tag: str = "synthetic"
    truth_boxes: dict | None = None
    seg_path: str | None = None
    sij_boxes: dict | None = None
    crop_path: str | None = None
    crop_status: str | None = None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["grades"] = list(self.grades)
        return {k: v for k, v in d.items() if v is not None}

    @classmethod
    def from_dict(cls, d: dict) -> ManifestEntry:
        known = {f.name for f in fields(cls)}
        kwargs = {k: v for k, v in d.items() if k in known}
        kwargs["grades"] = tuple(int(g) for g in d["grades"])
        kwargs["label"] = int(d["label"])
        kwargs.setdefault("mask_path", None)
        return cls(**kwargs)


@dataclass
class Manifest:
    entries: list[ManifestEntry]
    seed: int | None = None
    generator_version: str = ""
    root: Path = field(default=Path("."), compare=False)

    def __post_init__(self):
        ids = [e.sample_id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise ConfigError("manifest sample_ids must be unique")

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    @property
    def sample_ids(self) -> list[str]:
        return [e.sample_id for e in self.entries]

    @property
    def labels(self) -> np.ndarray:
        return np.array([e.label for e in self.entries], dtype=np.int64)

    def resolve(self, rel: str | None) -> Path:
        if rel is None:
            raise UpstreamMissingError("manifest entry lacks the requested file")
        p = Path(rel)
        return p if p.is_absolute() else self.root / p

    def with_entries(self, entries, root=None) -> Manifest:
        return Manifest(list(entries), self.seed, self.generator_version,
                        self.root if root is None else Path(root))

    def rebased(self, new_root) -> Manifest:
        """Same entries, with relative paths rewritten to be relative to ``new_root``."""
        new_root = Path(new_root).resolve()
        out = []
        for e in self.entries:
            upd = {}
            for name in ("image_path", "mask_path", "seg_path", "crop_path"):
                val = getattr(e, name)
                if val is not None:
                    upd[name] = _relpath(self.resolve(val).resolve(), new_root)
            out.append(replace(e, **upd))
        return Manifest(out, self.seed, self.generator_version, new_root)

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "generator_version": self.generator_version,
            "seed": self.seed,
            "entries": [e.to_dict() for e in self.entries],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def content_hash(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        m = self if path.parent.resolve() == self.root.resolve() else self.rebased(path.parent)
        path.write_text(m.to_json() + "\n")
        return path

    @classmethod
    def load(cls, path) -> Manifest:
        path = Path(path)
        if not path.exists():
            raise UpstreamMissingError(f"manifest not found: {path}")
        d = json.loads(path.read_text())
        if d.get("schema_version") != SCHEMA_VERSION:
            raise ConfigError(f"unsupported manifest schema: {d.get('schema_version')}")
        entries = [ManifestEntry.from_dict(e) for e in d["entries"]]
        return cls(entries, d.get("seed"), d.get("generator_version", ""), path.parent)


def _relpath(target: Path, base: Path) -> str:
    return Path(os.path.relpath(target, base)).as_posix()


@dataclass(frozen=True)
class FollowUpEntry:
    sample_id: str
    baseline_label: int
    followup_label: int
    horizon_months: int = 24


@dataclass
class FollowUpManifest:
    entries: list[FollowUpEntry]
    seed: int | None = None

    def __post_init__(self):
        for e in self.entries:
            if e.baseline_label == 1 and e.followup_label != 1:
                raise ConfigError(f"{e.sample_id}: radiographic damage cannot regress")

    def by_id(self) -> dict[str, FollowUpEntry]:
        return {e.sample_id: e for e in self.entries}

    def to_json(self) -> str:
        return json.dumps({
            "schema_version": FOLLOWUP_SCHEMA_VERSION,
            "seed": self.seed,
            "entries": [asdict(e) for e in self.entries],
        }, indent=2, sort_keys=True)

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json() + "\n")
        return path

    @classmethod
    def load(cls, path) -> FollowUpManifest:
        path = Path(path)
        if not path.exists():
            raise UpstreamMissingError(f"follow-up manifest not found: {path}")
        d = json.loads(path.read_text())
        return cls([FollowUpEntry(**e) for e in d["entries"]], d.get("seed"))
