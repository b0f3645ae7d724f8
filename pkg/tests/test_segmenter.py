import hashlib
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from PIL import Image

from vod.errors import DegenerateBox, IndexOutOfRange
from vod.segmenter import (
    CropBox,
    ExtractStats,
    FrameSequence,
    LandmarkSet,
    SamplingConfig,
    SegmentSpec,
    StaticDetector,
    bilinear_crop,
    compute_crop_box,
    decode_frames,
    expanded_square,
    extract_face_segment,
    extract_video,
    max_segment_count,
    sample_segments,
    stabilize_box,
)

SQUARE_LM = LandmarkSet(((10, 10), (30, 10), (10, 40), (30, 40)))


def test_margin_zero_box():
    box = compute_crop_box(SQUARE_LM, 0.0, (100, 100))
    assert box.as_list() == [5, 35, 10, 40]
    assert not box.clamped


def test_margin_quarter_box():
    # tight box 20 wide, 30 tall; growth 5 and 7.5 per side -> [5, 35] x [2.5, 47.5];
    # squared to side 45 about (20, 25) -> [-2.5, 42.5]; shifted right by 2.5 to fit the frame
    box = compute_crop_box(SQUARE_LM, 0.25, (100, 100))
    assert box.as_list() == pytest.approx([0.0, 45.0, 2.5, 47.5])
    assert not box.clamped
    assert box.width == pytest.approx(box.height)


def test_collinear_landmarks_are_degenerate():
    with pytest.raises(DegenerateBox):
        compute_crop_box(LandmarkSet(((0, 5), (3, 5), (7, 5), (9, 5))), 0.25, (20, 20))
    with pytest.raises(ValueError):
        LandmarkSet(((0, 0), (1, 1), (2, 2)))
    with pytest.raises(ValueError):
        LandmarkSet(((0, 0), (1, 1), (2, 2), (float("nan"), 1)))


coord = st.floats(-50, 250, allow_nan=False)


@st.composite
def landmark_sets(draw):
    pts = draw(st.lists(st.tuples(coord, coord), min_size=4, max_size=12))
    xs, ys = zip(*pts)
    if max(xs) - min(xs) < 0.5 or max(ys) - min(ys) < 0.5:
        pts.append((min(xs) + 1.0, min(ys) + 1.0))
        pts.append((min(xs), min(ys)))
    return LandmarkSet(tuple(pts))


@given(landmark_sets(), st.floats(0, 0.5), st.integers(8, 200), st.integers(8, 200))
def test_clamped_box_in_frame(lm, margin, W, H):
    raw = expanded_square(lm, margin)
    box = compute_crop_box(lm, margin, (W, H))
    eps = 1e-9
    assert -eps <= box.left < box.right <= W + eps
    assert -eps <= box.upper < box.bottom <= H + eps
    side = raw.width
    if side <= min(W, H):
        assert not box.clamped
        assert box.width == pytest.approx(side) and box.height == pytest.approx(side)
    else:
        assert box.clamped


@given(landmark_sets(), st.floats(0, 0.5), st.floats(-100, 100), st.floats(-100, 100))
def test_box_translation_equivariant(lm, margin, dx, dy):
    a = expanded_square(lm, margin)
    b = expanded_square(LandmarkSet(tuple((x + dx, y + dy) for x, y in lm.points)), margin)
    assert b.as_list() == pytest.approx([a.left + dx, a.right + dx, a.upper + dy, a.bottom + dy], abs=1e-6)


def test_stabilize_examples():
    b = CropBox(10, 30, 10, 30)
    assert stabilize_box([b, b, b], (100, 100)) == b
    u = stabilize_box([CropBox(0, 10, 0, 10), CropBox(20, 30, 20, 30)], (100, 100))
    assert u.as_list() == [0, 30, 0, 30]


@given(st.lists(st.tuples(st.floats(0, 150), st.floats(0, 150), st.floats(1, 60)), min_size=1, max_size=8))
def test_stabilized_box_contains_inputs(specs):
    boxes = [CropBox(x, x + s, y, y + s) for x, y, s in specs]
    out = stabilize_box(boxes, (1000, 1000))
    assert all(out.contains(b) for b in boxes)
    assert out.width == pytest.approx(out.height)


def admissible(N, cfg):
    starts = [s for s in range(1, N + 1)
              if (s - 1) % cfg.c_step == 0 and s <= cfg.frame_cap and s + (cfg.c_sl - 1) * cfg.c_in <= N]
    return starts[: cfg.max_segments]


def test_default_sampling_yields_fifty():
    specs = sample_segments(300, SamplingConfig())
    assert len(specs) == 50
    assert [s.start_frame for s in specs] == list(range(1, 198, 4))
    assert specs[0].frame_indices == tuple(range(1, 18))
    assert sample_segments(10, SamplingConfig()) == []


@given(st.integers(1, 300), st.sampled_from([2, 16, 17, 24, 32]), st.integers(1, 8), st.integers(1, 6),
       st.integers(1, 250), st.integers(1, 60))
def test_sampling_matches_enumeration(N, c_sl, c_step, c_in, cap, max_seg):
    cfg = SamplingConfig(c_sl=c_sl, c_step=c_step, c_in=c_in, frame_cap=cap, max_segments=max_seg)
    specs = sample_segments(N, cfg)
    assert [s.start_frame for s in specs] == admissible(N, cfg)
    assert len(specs) <= min(max_seg, math.floor((cap - 1) / c_step) + 1) == max_segment_count(cfg)
    for s in specs:
        assert len(s.frame_indices) == c_sl
        assert np.all(np.diff(s.frame_indices) == c_in)
        assert s.frame_indices[-1] <= N


def write_clip(tmp_path, n, h=12, w=16, seed=0):
    rng = np.random.default_rng(seed)
    d = tmp_path / "clip"
    d.mkdir()
    frames = rng.integers(0, 256, size=(n, h, w, 3), dtype=np.uint8)
    for t, f in enumerate(frames, start=1):
        Image.fromarray(f).save(d / f"{t:06d}.png")
    return d, frames


def test_decode_limits(tmp_path):
    d, _ = write_clip(tmp_path, 10)
    assert len(decode_frames(d, 5)) == 5
    seq = decode_frames(d, 50)
    assert len(seq) == 10 and seq.frame_count == 10
    with pytest.raises(IndexOutOfRange):
        seq[11]


def test_decode_png_bytes_match_source(tmp_path):
    d, frames = write_clip(tmp_path, 6)
    seq = decode_frames(d, 6)
    for t in range(1, 7):
        src = np.asarray(Image.open(d / f"{t:06d}.png"))
        assert hashlib.sha256(seq[t].tobytes()).digest() == hashlib.sha256(src.tobytes()).digest()
        assert np.array_equal(seq[t], frames[t - 1])


def bilinear_oracle(frame, box, size):
    H, W = frame.shape[:2]
    out = np.zeros((size, size, frame.shape[2]))
    for i in range(size):
        sy = box.upper + (i + 0.5) * box.height / size - 0.5
        for j in range(size):
            sx = box.left + (j + 0.5) * box.width / size - 0.5
            y0, x0 = math.floor(sy), math.floor(sx)
            fy, fx = sy - y0, sx - x0
            acc = 0.0
            for yy, wy in ((y0, 1 - fy), (y0 + 1, fy)):
                for xx, wx in ((x0, 1 - fx), (x0 + 1, fx)):
                    acc = acc + wy * wx * frame[min(max(yy, 0), H - 1), min(max(xx, 0), W - 1)]
            out[i, j] = acc
    return out


@given(st.integers(0, 10**6), st.floats(0, 20), st.floats(0, 20), st.floats(2, 30), st.integers(2, 12))
def test_bilinear_matches_oracle(seed, left, upper, side, size):
    frame = np.random.default_rng(seed).random((24, 28, 3))
    box = CropBox(left, left + side, upper, upper + side)
    got = bilinear_crop(frame, box, size)
    np.testing.assert_allclose(got, bilinear_oracle(frame, box, size), rtol=1e-5, atol=1e-12)


def seq_from(frames):
    return FrameSequence(list(frames), len(frames))


def test_constant_and_identity_crops():
    const = np.full((5, 20, 20, 3), 77, dtype=np.uint8)
    cfg = SamplingConfig(c_sl=3, out_size=8)
    spec = SegmentSpec("v", 1, (1, 2, 3))
    seg = extract_face_segment(seq_from(const), spec, CropBox(2, 14, 3, 15), cfg)
    assert seg.data.shape == (3, 8, 8, 3) and seg.data.dtype == np.float32
    np.testing.assert_allclose(seg.data, 77 / 255, rtol=1e-6)

    frames = np.random.default_rng(0).integers(0, 256, (3, 16, 16, 3), dtype=np.uint8)
    seg = extract_face_segment(seq_from(frames), spec, CropBox(0, 16, 0, 16), SamplingConfig(c_sl=3, out_size=16))
    np.testing.assert_allclose(seg.data, frames / 255.0, atol=1e-7)


@given(st.integers(0, 10**6), st.floats(0, 4))
def test_crop_commutes_with_scaling(seed, alpha):
    frames = np.random.default_rng(seed).random((3, 18, 18, 3))
    spec = SegmentSpec("v", 1, (1, 2, 3))
    box = CropBox(1.5, 15.5, 2.0, 16.0)
    cfg = SamplingConfig(c_sl=3, out_size=7)
    a = extract_face_segment(seq_from(alpha * frames), spec, box, cfg).data
    b = extract_face_segment(seq_from(frames), spec, box, cfg).data
    np.testing.assert_allclose(a, alpha * b, rtol=1e-5, atol=1e-6)


def test_extract_missing_frame_raises():
    frames = np.zeros((2, 8, 8, 3), dtype=np.uint8)
    with pytest.raises(IndexOutOfRange):
        extract_face_segment(seq_from(frames), SegmentSpec("v", 1, (1, 2, 3)), CropBox(0, 8, 0, 8),
                             SamplingConfig(c_sl=3, out_size=8))
    with pytest.raises(DegenerateBox):
        extract_face_segment(seq_from(frames), SegmentSpec("v", 1, (1, 2)), CropBox(3, 3, 0, 8),
                             SamplingConfig(c_sl=2, out_size=8))


class Blinking:
    """Finds the face everywhere except when the frame's mean is in a chosen set."""

    def __init__(self, miss):
        self.miss = miss
        self.inner = StaticDetector(((4, 4), (12, 4), (4, 12), (12, 12)))

    def __call__(self, image):
        return None if int(image[0, 0, 0]) in self.miss else self.inner(image)


def test_extract_video_drops_faceless_segments(tmp_path):
    d = tmp_path / "clip"
    d.mkdir()
    for t in range(1, 13):
        Image.fromarray(np.full((16, 16, 3), t, dtype=np.uint8)).save(d / f"{t:06d}.png")
    cfg = SamplingConfig(c_sl=4, c_step=2, out_size=8)
    stats = ExtractStats()
    segs, n = extract_video(d, "v", Blinking({6}), cfg, stats)
    # starts 1,3,5,7,9; frame 6 lies in the segments starting at 3 and 5
    assert n == 12 and stats.sampled == 5 and stats.dropped == [3, 5]
    assert [s.spec.start_frame for s in segs] == [1, 7, 9]
    assert all(s.data.shape == (4, 8, 8, 3) for s in segs)
