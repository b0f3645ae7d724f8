"""On-disk layout for per-video shard directories.

A store directory holds ``index.json`` plus ``shards/<video>.vods``. The index carries
each video's label, split and manipulation so downstream stages need no manifest.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .diffvol import TRANSFORMS, DifferenceVolume, Mode, read_shard, write_shard
from .errors import MissingVolumes

INDEX = "index.json"


def safe_name(video_id: str) -> str:
    return video_id.replace("/", "__").replace("\\", "__")


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_index(root, mode: Mode, videos: list[dict], **extra) -> Path:
    root = Path(root)
    doc = {"version": 1, "mode": Mode(mode).name.lower(), **extra, "videos": videos}
    path = root / INDEX
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path


def read_index(root) -> dict:
    path = Path(root) / INDEX
    if not path.is_file():
        raise MissingVolumes(f"no {INDEX} in {root}")
    return json.loads(path.read_text())


def video_entry(record, split: str, shard_rel: str | None, n_segments: int, sha: str | None) -> dict:
    return {
        "id": record.id,
        "label": record.label,
        "manipulation": record.manipulation,
        "source_dataset": record.source_dataset,
        "split": split,
        "shard": shard_rel,
        "segments": n_segments,
        "sha256": sha,
    }


def store_video(root, record, split, volumes: list[DifferenceVolume]) -> dict:
    if not volumes:
        return video_entry(record, split, None, 0, None)
    rel = f"shards/{safe_name(record.id)}.vods"
    path = write_shard(volumes, Path(root) / rel)
    return video_entry(record, split, rel, len(volumes), file_sha256(path))


def derive_store(src, dst, mode) -> Path:
    """Build a ``mode`` store from a RAW segment store."""
    mode = Mode.parse(mode)
    src, dst = Path(src), Path(dst)
    index = read_index(src)
    if index["mode"] != "raw":
        raise ValueError(f"{src} holds {index['mode']} volumes; derive from a RAW segment store")
    fn = TRANSFORMS[mode]
    videos = []
    for v in index["videos"]:
        entry = dict(v)
        if v["shard"]:
            vols = [
                DifferenceVolume(fn(r.data).astype(np.float32), mode, r.spec, r.label)
                for r in read_shard(src / v["shard"])
            ]
            path = write_shard(vols, dst / v["shard"])
            entry["sha256"] = file_sha256(path)
        videos.append(entry)
    extra = {k: v for k, v in index.items() if k not in ("version", "mode", "videos")}
    write_index(dst, mode, videos, **extra)
    return dst


@dataclass
class VideoEntry:
    id: str
    label: str
    manipulation: str
    source_dataset: str
    split: str
    shard: str | None
    segments: int
    sha256: str | None = None
    frame_count: int | None = None


class Store:
    def __init__(self, root):
        self.root = Path(root)
        self.index = read_index(self.root)
        self.mode = Mode.parse(self.index["mode"])
        self.videos = [VideoEntry(**v) for v in self.index["videos"]]

    def select(self, split: str | None = None, ids=None, manipulations=None, datasets=None) -> list[VideoEntry]:
        ids = None if ids is None else set(ids)
        out = []
        for v in self.videos:
            if split is not None and v.split != split:
                continue
            if ids is not None and v.id not in ids:
                continue
            if manipulations is not None and v.label == "fake" and v.manipulation not in manipulations:
                continue
            if datasets is not None and v.source_dataset not in datasets:
                continue
            out.append(v)
        return out

    def load(self, entry: VideoEntry) -> list[DifferenceVolume]:
        if not entry.shard:
            return []
        path = self.root / entry.shard
        if not path.is_file():
            raise MissingVolumes(str(path))
        return read_shard(path)

    def digest(self) -> str:
        return hashlib.sha256((self.root / INDEX).read_bytes()).hexdigest()


@dataclass
class SegmentSet:
    """Volumes held in memory with their labels and video provenance."""

    data: list  # (T, S, S, 3) float32 arrays
    labels: np.ndarray  # 1 = fake
    video_ids: list
    segment_index: list

    def __len__(self):
        return len(self.data)

    @classmethod
    def from_entries(cls, store: Store, entries) -> "SegmentSet":
        data, labels, vids, seg = [], [], [], []
        for e in entries:
            for i, v in enumerate(store.load(e)):
                data.append(v.data)
                labels.append(v.y)
                vids.append(e.id)
                seg.append(i)
        return cls(data, np.asarray(labels, dtype=np.int64), vids, seg)

    @classmethod
    def from_store(cls, root, split: str | None = None, **select) -> "SegmentSet":
        store = Store(root)
        return cls.from_entries(store, store.select(split, **select))
