"""Figures and tables: space-time slice panels, Grad-CAM overlays, robustness curves, ablation tables.

Every figure is written next to a JSON sidecar holding the numbers it shows and a hash
of the generating configuration.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from .diffvol import DifferenceVolume, slice_view, to_uint8
from .errors import DimMismatch

COLORMAP = "viridis"
BACKGROUND = 255
RENDER_KINDS = ("slice_panel", "gradcam_overlay", "robustness_curve", "table")


def config_hash(config: dict | None) -> str:
    return hashlib.sha256(json.dumps(config or {}, sort_keys=True, default=str).encode()).hexdigest()[:16]


def _sidecar(path: Path, doc: dict) -> Path:
    side = path.with_suffix(".json")
    side.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return side


@dataclass(frozen=True)
class RenderJob:
    kind: str
    inputs: tuple = ()
    colormap: str = COLORMAP
    alpha: float = 0.5

    def __post_init__(self):
        if self.kind not in RENDER_KINDS:
            raise ValueError(f"unknown render kind {self.kind!r}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        for p in self.inputs:
            if not Path(p).exists():
                raise FileNotFoundError(str(p))


# slice panels ---------------------------------------------------------------


@dataclass(frozen=True)
class PanelLayout:
    """Pixel geometry of the 2x2 slice panel.

    Columns hold the raw and CFD slices, rows the x and y slices. Every cell is
    ``T*scale`` tall and ``S*scale`` wide; the CFD pane fills the top ``(T-1)*scale``
    rows of its cell. Pane ``(row, col)`` starts at
    ``(margin + row*(cell_h + margin), margin + col*(cell_w + margin))`` and the panel
    measures ``2*cell_h + 3*margin`` by ``2*cell_w + 3*margin``.
    """

    frames: int
    side: int
    scale: int = 4
    margin: int = 16

    @property
    def cell_h(self) -> int:
        return self.frames * self.scale

    @property
    def cell_w(self) -> int:
        return self.side * self.scale

    @property
    def shape(self) -> tuple[int, int]:
        return 2 * self.cell_h + 3 * self.margin, 2 * self.cell_w + 3 * self.margin

    def offset(self, row: int, col: int) -> tuple[int, int]:
        return self.margin + row * (self.cell_h + self.margin), self.margin + col * (self.cell_w + self.margin)


PANES = (("raw", "x"), ("cfd", "x"), ("raw", "y"), ("cfd", "y"))


def compose_slice_panel(raw: DifferenceVolume, diff: DifferenceVolume, x_index: int, y_index: int,
                        scale: int = 4, margin: int = 16) -> tuple[np.ndarray, PanelLayout]:
    """Panel pixels as ``(H, W, 3)`` uint8 with its layout; labels are drawn into the margins."""
    if raw.data.shape[1:] != diff.data.shape[1:]:
        raise DimMismatch(f"raw {raw.data.shape[1:]} vs difference {diff.data.shape[1:]}")
    T, H, W, _ = raw.data.shape
    if H != W:
        raise DimMismatch(f"expected square frames, got {H}x{W}")
    lay = PanelLayout(max(T, diff.data.shape[0]), H, scale, margin)
    img = np.full(lay.shape + (3,), BACKGROUND, dtype=np.uint8)
    vols = {"raw": raw, "cfd": diff}
    for k, (which, axis) in enumerate(PANES):
        row, col = divmod(k, 2)
        pane = slice_view(vols[which], axis, x_index if axis == "x" else y_index)
        pane = np.repeat(np.repeat(pane, scale, axis=0), scale, axis=1)
        top, left = lay.offset(row, col)
        img[top : top + pane.shape[0], left : left + pane.shape[1]] = pane
    canvas = Image.fromarray(img)
    draw = ImageDraw.Draw(canvas)
    for k, (which, axis) in enumerate(PANES):
        top, left = lay.offset(*divmod(k, 2))
        label = f"{which} {axis}-t ({axis}={x_index if axis == 'x' else y_index})"
        draw.text((left, top - margin + 2), label, fill=(0, 0, 0))
    out = np.asarray(canvas).copy()
    # text may not spill into panes
    for k, (which, axis) in enumerate(PANES):
        top, left = lay.offset(*divmod(k, 2))
        pane = img[top : top + lay.cell_h, left : left + lay.cell_w]
        out[top : top + lay.cell_h, left : left + lay.cell_w] = pane
    return out, lay


def render_slice_panel(raw: DifferenceVolume, diff: DifferenceVolume, x_index: int, y_index: int, out_path,
                       scale: int = 4, margin: int = 16, config: dict | None = None) -> Path:
    img, lay = compose_slice_panel(raw, diff, x_index, y_index, scale, margin)
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(img).save(out_path)
    _sidecar(out_path, {
        "kind": "slice_panel",
        "x_index": x_index,
        "y_index": y_index,
        "segment": raw.spec.to_json(),
        "difference_mode": diff.mode.name.lower(),
        "layout": {"frames": lay.frames, "side": lay.side, "scale": lay.scale, "margin": lay.margin,
                   "offsets": {f"{w}_{a}": lay.offset(*divmod(k, 2)) for k, (w, a) in enumerate(PANES)}},
        "config_hash": config_hash(config),
    })
    return out_path


# Grad-CAM overlays ------------------------------------------------------------


def colormap_rgb(heat: np.ndarray, name: str = COLORMAP) -> np.ndarray:
    """Map values in [0, 1] to float RGB in [0, 1]."""
    from matplotlib import colormaps

    return colormaps[name](np.clip(heat, 0.0, 1.0))[..., :3]


def blend_overlay(frames_u8: np.ndarray, heat: np.ndarray, alpha: float, name: str = COLORMAP) -> np.ndarray:
    """``(1 - alpha) * frame + alpha * colormap(heat)`` in 8-bit, frame by frame."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    if frames_u8.shape[:-1] != heat.shape:
        raise DimMismatch(f"frames {frames_u8.shape[:-1]} vs heatmap {heat.shape}")
    colour = colormap_rgb(heat, name) * 255.0
    out = (1.0 - alpha) * frames_u8.astype(np.float64) + alpha * colour
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def render_gradcam_overlay(volume, heatmap, alpha: float, out_dir, colormap: str = COLORMAP,
                           config: dict | None = None) -> list[Path]:
    """One PNG per time step of ``volume`` with the Grad-CAM heat blended on top."""
    data = volume.data if isinstance(volume, DifferenceVolume) else np.asarray(volume)
    heat = heatmap.upsampled
    if data.shape[:3] != heat.shape:
        raise DimMismatch(f"input {data.shape[:3]} vs heatmap {heat.shape}")
    frames = data if data.dtype == np.uint8 else to_uint8(data)
    blended = blend_overlay(frames, heat, alpha, colormap)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for t, img in enumerate(blended):
        p = out_dir / f"overlay_{t:03d}.png"
        Image.fromarray(img).save(p)
        paths.append(p)
    (out_dir / "overlay.json").write_text(json.dumps({
        "kind": "gradcam_overlay", "colormap": colormap, "alpha": alpha, "frames": len(paths),
        "heat_max": float(heat.max()) if heat.size else 0.0, "config_hash": config_hash(config),
    }, indent=2, sort_keys=True) + "\n")
    return paths


# robustness curves ----------------------------------------------------------


@dataclass
class CurveFigure:
    png: Path
    csv: Path
    points: int
    series: dict = field(default_factory=dict)


def _curve_table(curves, key: str):
    doc = curves if isinstance(curves, dict) else curves.to_json()
    table = doc[key]
    if not table:
        raise ValueError("no curves to render")
    return doc["severities"], table


def write_curve_csv(curves, path, key: str = "video_auc") -> Path:
    severities, table = _curve_table(curves, key)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(("kind", "severity", key))
        for kind, vals in table.items():
            for s, v in zip(severities, vals):
                w.writerow((kind, s, repr(float(v))))
    return Path(path)


def render_robustness_curves(curves, out_dir, key: str = "video_auc", config: dict | None = None) -> CurveFigure:
    """One line per perturbation kind, AUC against severity; the CSV holds exactly the plotted values."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    severities, table = _curve_table(curves, key)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(5, 3.5), dpi=100)
    points = 0
    for kind, vals in table.items():
        (line,) = ax.plot(severities, vals, marker="o", label=kind)
        points += len(line.get_xdata())
    ax.set_xlabel("severity")
    ax.set_ylabel(key.replace("_", " "))
    ax.set_xticks(list(severities))
    ax.set_ylim(0.0, 1.02)
    ax.grid(alpha=0.3)
    ax.legend()
    fig.tight_layout()
    png = out_dir / f"robustness_{key}.png"
    fig.savefig(png, metadata={"Software": None})
    plt.close(fig)
    csv_path = write_curve_csv(curves, out_dir / f"robustness_{key}.csv", key)
    _sidecar(png, {"kind": "robustness_curve", "metric": key, "severities": list(severities),
                   "values": {k: [float(v) for v in vs] for k, vs in table.items()},
                   "config_hash": config_hash(config)})
    return CurveFigure(png, csv_path, points, {k: list(v) for k, v in table.items()})


# tables ---------------------------------------------------------------------


def markdown_table(header, rows, fmt=lambda v: f"{100 * v:.2f}" if isinstance(v, float) else str(v)) -> str:
    lines = ["| " + " | ".join(map(str, header)) + " |", "|" + "---|" * len(header)]
    for r in rows:
        lines.append("| " + " | ".join("-" if v is None else fmt(v) for v in r) + " |")
    return "\n".join(lines) + "\n"


def render_protocol_table(report_json, out_dir) -> Path:
    """Markdown and CSV digest of a protocol report: one row per target."""
    doc = json.loads(Path(report_json).read_text())
    header = ["target", "n_videos", "video_acc", "video_auc", "segment_auc"]
    rows = [[r["target"], r["n_videos"], r["video_acc"]["point"], r["video_auc"]["point"],
             r["segment_auc"]["point"]] for r in doc["reports"]]
    if doc.get("cross_avg"):
        rows.append(["cross avg", "", None, doc["cross_avg"].get("video_auc"), doc["cross_avg"].get("segment_auc")])
        rows.append(["unseen avg", "", None, doc["unseen_avg"].get("video_auc"), doc["unseen_avg"].get("segment_auc")])
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "table.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        for r in rows:
            w.writerow(["" if v is None else repr(v) if isinstance(v, float) else v for v in r])
    path = out_dir / "table.md"
    path.write_text(markdown_table(header, rows))
    return path
