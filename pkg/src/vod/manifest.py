"""Dataset manifests, split hygiene and the synthetic flicker corpus."""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable

import numpy as np
from PIL import Image

from .errors import (
    DuplicateId,
    EmptyResult,
    MissingFile,
    SchemaViolation,
    SplitLeak,
    WriteFailure,
)

MANIFEST_VERSION = 1
LABELS = ("real", "fake")
SPLITS = ("train", "val", "test")
FFPP_MANIPULATIONS = ("DF", "F2F", "FS", "NT")
# FF++ directory names for each manipulation tag
FFPP_DIRS = {"DF": "Deepfakes", "F2F": "Face2Face", "FS": "FaceSwap", "NT": "NeuralTextures"}

_REQUIRED_KEYS = ("id", "path", "label", "manipulation", "source_dataset")
_OPTIONAL_KEYS = ("source_id", "frame_count", "fps")


@dataclass(frozen=True)
class VideoRecord:
    id: str
    path: str
    label: str
    manipulation: str
    source_dataset: str
    source_id: str | None = None
    frame_count: int | None = None
    fps: float | None = None

    def __post_init__(self):
        if not self.id:
            raise SchemaViolation("id", "must be nonempty")
        if not self.path:
            raise SchemaViolation("path", f"empty path for record {self.id!r}")
        if self.label not in LABELS:
            raise SchemaViolation("label", f"{self.label!r} not in {LABELS}")
        if not isinstance(self.manipulation, str) or not self.manipulation:
            raise SchemaViolation("manipulation", f"record {self.id!r}")
        if (self.label == "real") != (self.manipulation == "none"):
            raise SchemaViolation(
                "manipulation",
                f"record {self.id!r}: label={self.label} requires "
                f"manipulation {'none' if self.label == 'real' else '!= none'}",
            )
        if self.frame_count is not None and self.frame_count < 0:
            raise SchemaViolation("frame_count", "must be nonnegative")
        if self.fps is not None and not self.fps > 0:
            raise SchemaViolation("fps", "must be positive")

    @property
    def identity(self) -> str:
        """Source identity used for leak checks (a fake shares its source's identity)."""
        return self.source_id or self.id

    @property
    def is_fake(self) -> bool:
        return self.label == "fake"

    def to_json(self) -> dict:
        d = {k: getattr(self, k) for k in _REQUIRED_KEYS}
        for k in _OPTIONAL_KEYS:
            if getattr(self, k) is not None:
                d[k] = getattr(self, k)
        return d


@dataclass(frozen=True)
class DatasetManifest:
    records: tuple[VideoRecord, ...]
    splits: dict[str, str]
    # directory relative record paths are resolved against; not serialized
    root: str = field(default=".", compare=False)

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))
        validate(self)

    def __len__(self):
        return len(self.records)

    def by_id(self) -> dict[str, VideoRecord]:
        return {r.id: r for r in self.records}

    def ids(self, split: str | None = None) -> list[str]:
        return [r.id for r in self.records if split is None or self.splits.get(r.id) == split]

    def split_of(self, video_id: str) -> str:
        return self.splits[video_id]

    def resolve(self, record: VideoRecord) -> Path:
        p = Path(record.path)
        return p if p.is_absolute() else Path(self.root) / p

    def manipulations(self) -> list[str]:
        seen = []
        for r in self.records:
            if r.is_fake and r.manipulation not in seen:
                seen.append(r.manipulation)
        return seen

    def to_json(self) -> dict:
        return {
            "version": MANIFEST_VERSION,
            "records": [r.to_json() for r in self.records],
            "splits": {r.id: self.splits[r.id] for r in self.records if r.id in self.splits},
        }


def validate(m: DatasetManifest) -> None:
    seen = set()
    for r in m.records:
        if r.id in seen:
            raise DuplicateId(r.id)
        seen.add(r.id)
    for vid, split in m.splits.items():
        if vid not in seen:
            raise SchemaViolation("splits", f"unknown id {vid!r}")
        if split not in SPLITS:
            raise SchemaViolation("splits", f"{vid!r}: {split!r} not in {SPLITS}")
    missing = [r.id for r in m.records if r.id not in m.splits]
    if missing:
        raise SchemaViolation("splits", f"no split for {missing[:5]}")
    # identities must not straddle splits
    owner: dict[str, tuple[str, str]] = {}
    for r in m.records:
        split = m.splits[r.id]
        prev = owner.setdefault(r.identity, (split, r.id))
        if prev[0] != split:
            raise SplitLeak(
                f"identity {r.identity!r} appears in {prev[0]} ({prev[1]}) and {split} ({r.id})"
            )


def _reject_duplicates(pairs):
    out = {}
    for k, v in pairs:
        if k in out:
            out.setdefault("__dups__", []).append(k)
        out[k] = v
    return out


def manifest_from_json(doc: dict, root: str = ".") -> DatasetManifest:
    if not isinstance(doc, dict):
        raise SchemaViolation("<root>", "expected an object")
    if doc.get("version") != MANIFEST_VERSION:
        raise SchemaViolation("version", f"expected {MANIFEST_VERSION}, got {doc.get('version')!r}")
    extra = set(doc) - {"version", "records", "splits"}
    if extra:
        raise SchemaViolation(sorted(extra)[0], "unknown top-level key")
    recs = doc.get("records")
    if not isinstance(recs, list):
        raise SchemaViolation("records", "expected an array")
    splits = doc.get("splits")
    if not isinstance(splits, dict):
        raise SchemaViolation("splits", "expected an object")
    dups = splits.pop("__dups__", None)
    if dups:
        raise SplitLeak(f"id {dups[0]!r} listed in more than one split")

    records = []
    for i, rd in enumerate(recs):
        if not isinstance(rd, dict):
            raise SchemaViolation(f"records[{i}]", "expected an object")
        if rd.get("__dups__"):
            raise SchemaViolation(f"records[{i}].{rd['__dups__'][0]}", "duplicate key")
        for k in _REQUIRED_KEYS:
            if k not in rd:
                raise SchemaViolation(f"records[{i}].{k}", "missing")
            if not isinstance(rd[k], str):
                raise SchemaViolation(f"records[{i}].{k}", "expected a string")
        unknown = set(rd) - set(_REQUIRED_KEYS) - set(_OPTIONAL_KEYS)
        if unknown:
            raise SchemaViolation(f"records[{i}].{sorted(unknown)[0]}", "unknown key")
        records.append(VideoRecord(**rd))
    return DatasetManifest(tuple(records), dict(splits), root=root)


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    if not path.is_file():
        raise MissingFile(str(path))
    try:
        doc = json.loads(path.read_text(), object_pairs_hook=_reject_duplicates)
    except json.JSONDecodeError as e:
        raise SchemaViolation("<root>", f"invalid JSON: {e}") from e
    return manifest_from_json(doc, root=str(path.parent))


def save_manifest(m: DatasetManifest, path) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(m.to_json(), indent=2) + "\n")
    except OSError as e:
        raise WriteFailure(str(e)) from e
    return path


def filter_manifest(m: DatasetManifest, manipulations: Iterable[str], split: str | None = None) -> DatasetManifest:
    """Keep every real record plus fakes whose manipulation is requested, within ``split``.

    ``split=None`` keeps all splits.
    """
    wanted = set(manipulations)
    if not wanted:
        raise ValueError("at least one manipulation must be requested")
    if split is not None and split not in SPLITS:
        raise ValueError(f"unknown split {split!r}")
    keep = [
        r
        for r in m.records
        if (split is None or m.splits[r.id] == split) and (not r.is_fake or r.manipulation in wanted)
    ]
    if not keep:
        raise EmptyResult(f"no records for manipulations={sorted(wanted)} split={split}")
    return DatasetManifest(tuple(keep), {r.id: m.splits[r.id] for r in keep}, root=m.root)


def select_split(m: DatasetManifest, split: str) -> DatasetManifest:
    keep = [r for r in m.records if m.splits[r.id] == split]
    if not keep:
        raise EmptyResult(f"split {split!r} is empty")
    return DatasetManifest(tuple(keep), {r.id: split for r in keep}, root=m.root)


def stratified_split(records, fractions=(0.6, 0.2, 0.2), seed: int = 0) -> dict[str, str]:
    """Assign identities to train/val/test per label, keeping identity groups together."""
    groups: dict[str, list[VideoRecord]] = {}
    for r in records:
        groups.setdefault(r.identity, []).append(r)
    rng = np.random.default_rng(seed)
    splits = {}
    for label in LABELS:
        keys = sorted(k for k, g in groups.items() if g[0].label == label)
        keys = [keys[i] for i in rng.permutation(len(keys))]
        n = len(keys)
        n_train = int(round(fractions[0] * n))
        n_val = int(round(fractions[1] * n))
        for i, k in enumerate(keys):
            s = "train" if i < n_train else "val" if i < n_train + n_val else "test"
            for r in groups[k]:
                splits[r.id] = s
    return splits


# FaceForensics++ layout -----------------------------------------------------


def ffpp_manifest(root, splits_dir, quality: str = "c23", manipulations=FFPP_MANIPULATIONS) -> DatasetManifest:
    """Build a manifest from the standard FF++ tree and its official split files.

    ``splits_dir`` holds ``train.json``, ``val.json`` and ``test.json``: lists of
    ``[target, source]`` id pairs. Reals take the split of the pair containing them;
    a fake ``a_b`` takes the split of pair ``(a, b)``.
    """
    root, splits_dir = Path(root), Path(splits_dir)
    pair_split, real_split = {}, {}
    for split in SPLITS:
        f = splits_dir / f"{split}.json"
        if not f.is_file():
            raise MissingFile(str(f))
        for a, b in json.loads(f.read_text()):
            pair_split[(a, b)] = pair_split[(b, a)] = split
            real_split[a] = real_split[b] = split
    records, splits = [], {}
    real_dir = root / "original_sequences" / "youtube" / quality / "videos"
    for p in sorted(real_dir.glob("*.mp4")):
        if p.stem in real_split:
            records.append(VideoRecord(p.stem, str(p.relative_to(root)), "real", "none", "FF++"))
            splits[p.stem] = real_split[p.stem]
    for tag in manipulations:
        d = root / "manipulated_sequences" / FFPP_DIRS[tag] / quality / "videos"
        for p in sorted(d.glob("*.mp4")):
            a, _, b = p.stem.partition("_")
            if (a, b) in pair_split:
                vid = f"{tag}/{p.stem}"
                records.append(VideoRecord(vid, str(p.relative_to(root)), "fake", tag, "FF++", source_id=a))
                splits[vid] = pair_split[(a, b)]
    return DatasetManifest(tuple(records), splits, root=str(root))


# Synthetic corpus -----------------------------------------------------------


@dataclass(frozen=True)
class SyntheticSpec:
    n_real: int = 40
    n_fake: int = 40
    frames: int = 24
    height: int = 64
    width: int = 64
    flicker_amplitude: float = 12.0
    base_noise_std: float = 3.0
    seed: int = 0
    manipulations: tuple[str, ...] = ("flicker",)
    # amplitude of the smooth drifting background pattern
    pattern_amplitude: float = 50.0
    # lag-one correlation of the pixel noise
    noise_correlation: float = 0.8

    def __post_init__(self):
        for k in ("n_real", "n_fake", "frames", "height", "width"):
            if getattr(self, k) < 1:
                raise ValueError(f"{k} must be >= 1")
        if not 0 <= self.flicker_amplitude <= 255:
            raise ValueError("flicker_amplitude must lie in [0, 255]")
        if self.base_noise_std < 0:
            raise ValueError("base_noise_std must be >= 0")
        if not self.manipulations or "none" in self.manipulations:
            raise ValueError("manipulations must be nonempty tags other than 'none'")
        object.__setattr__(self, "manipulations", tuple(self.manipulations))


def face_region(height: int, width: int):
    """Centre and semi-axes ``(cy, cx, ry, rx)`` of the synthetic face ellipse."""
    return (height - 1) / 2.0, (width - 1) / 2.0, 0.3 * height, 0.22 * width


def face_landmarks(height: int, width: int) -> list[tuple[float, float]]:
    """Extremal points of the synthetic face ellipse, as ``(x, y)``."""
    cy, cx, ry, rx = face_region(height, width)
    return [(cx - rx, cy), (cx + rx, cy), (cx, cy - ry), (cx, cy + ry)]


def _face_mask(h, w):
    cy, cx, ry, rx = face_region(h, w)
    yy, xx = np.mgrid[0:h, 0:w]
    return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0


def synthesize_clip(spec: SyntheticSpec, index: int, fake: bool) -> np.ndarray:
    """Render one clip as uint8 ``(frames, H, W, 3)``.

    Both classes share the background process; fakes add an independent per-frame
    brightness offset inside the face ellipse.
    """
    rng = np.random.default_rng([spec.seed, int(fake), index])
    T, H, W = spec.frames, spec.height, spec.width
    yy, xx = np.mgrid[0:H, 0:W] / np.array([H, W]).reshape(2, 1, 1)

    n_waves = 3
    freq = rng.uniform(0.5, 2.0, size=(n_waves, 2))
    phase = rng.uniform(0, 2 * np.pi, size=(n_waves, 3))
    drift = rng.uniform(-0.03, 0.03, size=(n_waves,)) * 2 * np.pi
    base = rng.uniform(80, 170, size=3)
    face_tone = rng.uniform(-30, 30, size=3)
    mask = _face_mask(H, W)

    rho = spec.noise_correlation
    noise = rng.normal(0, spec.base_noise_std, size=(H, W, 3))
    flicker = rng.uniform(-1.0, 1.0, size=T) * spec.flicker_amplitude

    clip = np.empty((T, H, W, 3), dtype=np.uint8)
    for t in range(T):
        arg = 2 * np.pi * (freq[:, 0, None, None] * yy + freq[:, 1, None, None] * xx)
        frame = np.empty((H, W, 3))
        for c in range(3):
            waves = np.sin(arg + phase[:, c, None, None] + drift[:, None, None] * t)
            frame[..., c] = base[c] + spec.pattern_amplitude * waves.mean(axis=0)
        frame[mask] += face_tone
        if t > 0:
            noise = rho * noise + math.sqrt(1 - rho * rho) * rng.normal(0, spec.base_noise_std, size=(H, W, 3))
        frame += noise
        if fake:
            frame[mask] += flicker[t]
        clip[t] = np.clip(np.rint(frame), 0, 255).astype(np.uint8)
    return clip


def write_png_clip(clip: np.ndarray, out_dir) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for t, frame in enumerate(clip, start=1):
        Image.fromarray(frame).save(out_dir / f"{t:06d}.png")


def generate_synthetic(spec: SyntheticSpec, out_dir) -> DatasetManifest:
    out_dir = Path(out_dir)
    records = []
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        for kind, n in (("real", spec.n_real), ("fake", spec.n_fake)):
            for i in range(n):
                manip = "none" if kind == "real" else spec.manipulations[i % len(spec.manipulations)]
                vid = f"{kind}_{i:04d}"
                rel = os.path.join("clips", vid)
                write_png_clip(synthesize_clip(spec, i, kind == "fake"), out_dir / rel)
                records.append(VideoRecord(vid, rel, kind, manip, "synthetic", frame_count=spec.frames))
    except OSError as e:
        raise WriteFailure(str(e)) from e
    splits = stratified_split(records, seed=spec.seed)
    m = DatasetManifest(tuple(records), splits, root=str(out_dir))
    save_manifest(m, out_dir / "manifest.json")
    (out_dir / "synthetic_spec.json").write_text(json.dumps(asdict(spec), indent=2) + "\n")
    return m


def with_frame_count(record: VideoRecord, n: int) -> VideoRecord:
    return replace(record, frame_count=n)
