"""Frame decoding, landmark-guided face crops and fixed-length segment sampling."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Protocol, Sequence

import numpy as np
from PIL import Image

from .errors import DecodeFailure, DegenerateBox, EmptyVideo, IndexOutOfRange
from .manifest import face_landmarks

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class LandmarkSet:
    points: tuple[tuple[float, float], ...]
    frame_index: int = 0

    def __post_init__(self):
        pts = tuple((float(x), float(y)) for x, y in self.points)
        if len(pts) < 4:
            raise ValueError("a LandmarkSet needs at least 4 points")
        if not np.all(np.isfinite(pts)):
            raise ValueError("landmark coordinates must be finite")
        object.__setattr__(self, "points", pts)


@dataclass(frozen=True)
class CropBox:
    """Crop extent in continuous pixel coordinates; ``left..right`` spans columns."""

    left: float
    right: float
    upper: float
    bottom: float
    clamped: bool = False

    @property
    def width(self) -> float:
        return self.right - self.left

    @property
    def height(self) -> float:
        return self.bottom - self.upper

    def contains(self, other: "CropBox", tol: float = 1e-9) -> bool:
        return (
            self.left <= other.left + tol
            and self.right >= other.right - tol
            and self.upper <= other.upper + tol
            and self.bottom >= other.bottom - tol
        )

    def as_list(self) -> list[float]:
        return [self.left, self.right, self.upper, self.bottom]

    def to_json(self) -> dict:
        return {"box": self.as_list(), "clamped": self.clamped}

    @classmethod
    def from_json(cls, d: dict) -> "CropBox":
        return cls(*d["box"], clamped=d.get("clamped", False))


@dataclass(frozen=True)
class SamplingConfig:
    c_sl: int = 17
    c_step: int = 4
    c_in: int = 1
    frame_cap: int = 200
    max_segments: int = 50
    out_size: int = 224
    margin: float = 0.25

    def __post_init__(self):
        if self.c_sl < 2:
            raise ValueError("c_sl must be >= 2")
        for k in ("c_step", "c_in", "frame_cap", "max_segments", "out_size"):
            if getattr(self, k) < 1:
                raise ValueError(f"{k} must be >= 1")
        if self.margin < 0:
            raise ValueError("margin must be >= 0")

    @property
    def span(self) -> int:
        """Frames covered by one segment, first to last inclusive."""
        return (self.c_sl - 1) * self.c_in + 1

    @property
    def frames_needed(self) -> int:
        return self.frame_cap + (self.c_sl - 1) * self.c_in


@dataclass(frozen=True)
class SegmentSpec:
    video_id: str
    start_frame: int
    frame_indices: tuple[int, ...]

    def to_json(self) -> dict:
        return {"video_id": self.video_id, "start_frame": self.start_frame, "frame_indices": list(self.frame_indices)}

    @classmethod
    def from_json(cls, d: dict) -> "SegmentSpec":
        return cls(d["video_id"], int(d["start_frame"]), tuple(int(i) for i in d["frame_indices"]))


@dataclass
class FaceSegment:
    data: np.ndarray  # (c_sl, S, S, 3) float32 in [0, 1]
    spec: SegmentSpec
    crop_box: CropBox

    def __post_init__(self):
        if self.data.ndim != 4 or self.data.shape[3] != 3 or self.data.shape[1] != self.data.shape[2]:
            raise ValueError(f"bad segment shape {self.data.shape}")
        if self.data.shape[0] != len(self.spec.frame_indices):
            raise ValueError("segment length does not match its frame indices")


@dataclass
class FrameSequence:
    frames: list  # uint8 (H, W, 3) arrays, frame 1 first
    frame_count: int  # total frames in the source, may exceed len(frames)
    fps: float | None = None

    def __len__(self):
        return len(self.frames)

    def __getitem__(self, one_based: int) -> np.ndarray:
        if not 1 <= one_based <= len(self.frames):
            raise IndexOutOfRange(f"frame {one_based} not decoded (have {len(self.frames)})")
        return self.frames[one_based - 1]

    @property
    def dims(self) -> tuple[int, int]:
        h, w = self.frames[0].shape[:2]
        return w, h


# decoding -------------------------------------------------------------------


def _decode_png_dir(path: Path, max_frame: int) -> FrameSequence:
    files = sorted(path.glob("*.png"), key=lambda p: int(p.stem) if p.stem.isdigit() else p.stem)
    if not files:
        raise EmptyVideo(str(path))
    frames = []
    for f in files[:max_frame]:
        try:
            with Image.open(f) as im:
                frames.append(np.asarray(im.convert("RGB")).copy())
        except OSError as e:
            raise DecodeFailure(f"{f}: {e}") from e
    return FrameSequence(frames, len(files))


def _decode_container(path: Path, max_frame: int) -> FrameSequence:
    try:
        import cv2
    except ImportError as e:  # pragma: no cover
        raise DecodeFailure("video containers need opencv (pip install opencv-python-headless)") from e
    cap = cv2.VideoCapture(str(path))
    if not cap.isOpened():
        raise DecodeFailure(f"cannot open {path}")
    reported = int(cap.get(cv2.CAP_PROP_FRAME_COUNT))
    fps = cap.get(cv2.CAP_PROP_FPS) or None
    frames = []
    while len(frames) < max_frame:
        ok, bgr = cap.read()
        if not ok:
            break
        frames.append(cv2.cvtColor(bgr, cv2.COLOR_BGR2RGB))
    cap.release()
    if not frames:
        raise EmptyVideo(str(path))
    total = len(frames) if len(frames) < max_frame else max(reported, len(frames))
    return FrameSequence(frames, total, fps)


def decode_frames(path, max_frame: int) -> FrameSequence:
    """Decode frames ``1..min(frame_count, max_frame)`` from a PNG directory or a video file."""
    path = Path(path)
    if max_frame < 1:
        raise ValueError("max_frame must be >= 1")
    if path.is_dir():
        return _decode_png_dir(path, max_frame)
    if not path.is_file():
        raise DecodeFailure(f"{path} is not readable")
    return _decode_container(path, max_frame)


# detectors ------------------------------------------------------------------


class DetectorPort(Protocol):
    def __call__(self, image: np.ndarray) -> Optional[LandmarkSet]: ...


class StaticDetector:
    """Returns the same landmarks for every image."""

    def __init__(self, points):
        self.landmarks = LandmarkSet(tuple(points))

    def __call__(self, image):
        return self.landmarks


class SyntheticFaceDetector:
    """Stub for the synthetic corpus: the face ellipse is fixed by frame size."""

    def __call__(self, image):
        h, w = image.shape[:2]
        return LandmarkSet(tuple(face_landmarks(h, w)))


class HaarCascadeDetector:
    """OpenCV frontal-face cascade; reports the corners of the largest face box."""

    def __init__(self, scale_factor=1.1, min_neighbors=5):
        import cv2

        self._cv2 = cv2
        self.cascade = cv2.CascadeClassifier(cv2.data.haarcascades + "haarcascade_frontalface_default.xml")
        self.scale_factor = scale_factor
        self.min_neighbors = min_neighbors

    def __call__(self, image):
        gray = self._cv2.cvtColor(image, self._cv2.COLOR_RGB2GRAY)
        faces = self.cascade.detectMultiScale(gray, self.scale_factor, self.min_neighbors)
        if len(faces) == 0:
            return None
        x, y, w, h = max(faces, key=lambda f: f[2] * f[3])
        return LandmarkSet(((x, y), (x + w, y), (x, y + h), (x + w, y + h)))


class FaceAlignmentDetector:
    """68-point 2D landmarks from the ``face_alignment`` package (largest face)."""

    def __init__(self, device="cpu"):
        try:
            import face_alignment
        except ImportError as e:
            raise ImportError("install the 'landmarks' extra: pip install face-alignment") from e
        lm_type = getattr(face_alignment.LandmarksType, "TWO_D", None) or face_alignment.LandmarksType._2D
        self.fa = face_alignment.FaceAlignment(lm_type, device=device)

    def __call__(self, image):
        preds = self.fa.get_landmarks_from_image(image)
        if not preds:
            return None
        pts = max(preds, key=lambda p: np.ptp(p[:, 0]) * np.ptp(p[:, 1]))
        return LandmarkSet(tuple(map(tuple, pts[:, :2])))


DETECTORS: dict[str, Callable[[], DetectorPort]] = {
    "synthetic": SyntheticFaceDetector,
    "haar": HaarCascadeDetector,
    "face-alignment": FaceAlignmentDetector,
}


# crop boxes -----------------------------------------------------------------


def _square(left, right, upper, bottom) -> CropBox:
    side = max(right - left, bottom - upper)
    cx, cy = (left + right) / 2.0, (upper + bottom) / 2.0
    return CropBox(cx - side / 2.0, cx + side / 2.0, cy - side / 2.0, cy + side / 2.0)


def _fit(lo, hi, extent):
    """Shift ``[lo, hi]`` into ``[0, extent]``; cut it to the frame (flagged) if it is too long."""
    if hi - lo > extent:
        return 0.0, float(extent), True
    if lo < 0:
        return 0.0, hi - lo, False
    if hi > extent:
        return extent - (hi - lo), float(extent), False
    return lo, hi, False


def clamp_box(box: CropBox, frame_dims) -> CropBox:
    W, H = frame_dims
    l, r, cx = _fit(box.left, box.right, W)
    u, b, cy = _fit(box.upper, box.bottom, H)
    return CropBox(l, r, u, b, clamped=box.clamped or cx or cy)


def expanded_square(landmarks: LandmarkSet, margin: float) -> CropBox:
    """Landmark extrema grown by ``margin`` of each side, then squared about the centre."""
    pts = np.asarray(landmarks.points)
    l, u = pts.min(axis=0)
    r, b = pts.max(axis=0)
    w, h = r - l, b - u
    if w <= 0 or h <= 0:
        raise DegenerateBox(f"landmarks span a zero-area box ({w}x{h})")
    return _square(l - margin * w, r + margin * w, u - margin * h, b + margin * h)


def compute_crop_box(landmarks: LandmarkSet, margin: float, frame_dims) -> CropBox:
    return clamp_box(expanded_square(landmarks, margin), frame_dims)


def stabilize_box(boxes: Sequence[CropBox], frame_dims) -> CropBox:
    """One box for a whole segment: the union of per-frame boxes, re-squared and clamped."""
    if not boxes:
        raise ValueError("need at least one box")
    l = min(b.left for b in boxes)
    r = max(b.right for b in boxes)
    u = min(b.upper for b in boxes)
    bt = max(b.bottom for b in boxes)
    if r - l <= 0 or bt - u <= 0:
        raise DegenerateBox("union of boxes has zero area")
    return clamp_box(_square(l, r, u, bt), frame_dims)


# sampling -------------------------------------------------------------------


def sample_segments(frame_count: int, cfg: SamplingConfig, video_id: str = "") -> list[SegmentSpec]:
    """Segment start frames ``1, 1+c_step, ...`` that are ``<= frame_cap`` and fit in the video."""
    if frame_count < 1:
        raise ValueError("frame_count must be >= 1")
    tail = (cfg.c_sl - 1) * cfg.c_in
    out = []
    for s in range(1, cfg.frame_cap + 1, cfg.c_step):
        if len(out) == cfg.max_segments or s + tail > frame_count:
            break
        out.append(SegmentSpec(video_id, s, tuple(range(s, s + tail + 1, cfg.c_in))))
    return out


# extraction -----------------------------------------------------------------


def to_unit(frame: np.ndarray) -> np.ndarray:
    if frame.dtype == np.uint8:
        return frame.astype(np.float64) / 255.0
    return frame.astype(np.float64)


def bilinear_crop(frame: np.ndarray, box: CropBox, size: int) -> np.ndarray:
    """Resample ``box`` of an ``(H, W, C)`` frame onto a ``size x size`` grid.

    Pixel centres map as ``src = left + (j + 0.5) * width / size - 0.5``; samples outside
    the frame replicate the border.
    """
    H, W = frame.shape[:2]
    j = np.arange(size) + 0.5
    xs = box.left + j * box.width / size - 0.5
    ys = box.upper + j * box.height / size - 0.5
    x0 = np.floor(xs).astype(int)
    y0 = np.floor(ys).astype(int)
    wx = (xs - x0)[None, :, None]
    wy = (ys - y0)[:, None, None]
    x0c, x1c = np.clip(x0, 0, W - 1), np.clip(x0 + 1, 0, W - 1)
    y0c, y1c = np.clip(y0, 0, H - 1), np.clip(y0 + 1, 0, H - 1)
    top = frame[y0c][:, x0c] * (1 - wx) + frame[y0c][:, x1c] * wx
    bot = frame[y1c][:, x0c] * (1 - wx) + frame[y1c][:, x1c] * wx
    return top * (1 - wy) + bot * wy


def extract_face_segment(frames: FrameSequence, spec: SegmentSpec, box: CropBox, cfg: SamplingConfig) -> FaceSegment:
    if box.width <= 0 or box.height <= 0:
        raise DegenerateBox(str(box))
    stack = [bilinear_crop(to_unit(frames[i]), box, cfg.out_size) for i in spec.frame_indices]
    return FaceSegment(np.stack(stack).astype(np.float32), spec, box)


@dataclass
class ExtractStats:
    sampled: int = 0
    dropped: list = field(default_factory=list)


def extract_video(path, video_id: str, detector: DetectorPort, cfg: SamplingConfig, stats: ExtractStats | None = None):
    """Decode one video and return its face segments; segments with an undetected face are dropped."""
    frames = decode_frames(path, cfg.frames_needed)
    specs = sample_segments(min(frames.frame_count, len(frames)), cfg, video_id)
    dims = frames.dims
    cache: dict[int, Optional[CropBox]] = {}
    out = []
    for spec in specs:
        boxes = []
        for i in spec.frame_indices:
            if i not in cache:
                lm = detector(frames[i])
                cache[i] = None if lm is None else expanded_square(lm, cfg.margin)
            boxes.append(cache[i])
        if any(b is None for b in boxes):
            log.warning("%s: no face in segment starting at frame %d, dropped", video_id, spec.start_frame)
            if stats is not None:
                stats.dropped.append(spec.start_frame)
            continue
        out.append(extract_face_segment(frames, spec, stabilize_box(boxes, dims), cfg))
    if stats is not None:
        stats.sampled += len(specs)
    return out, frames.frame_count


def max_segment_count(cfg: SamplingConfig) -> int:
    return min(cfg.max_segments, math.floor((cfg.frame_cap - 1) / cfg.c_step) + 1)
