"""Scoring, intra/cross protocols, robustness sweeps and ablation grids."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable

import numpy as np

from .backbone import Network, load_checkpoint
from .diffvol import TRANSFORMS, Mode
from .errors import MissingVolumes, SingleClassData, TooFewSamples
from .metrics import aggregate_video, bootstrap_ci, compute_acc, compute_auc
from .perturb import MAX_SEVERITY, PerturbSpec, canonical_kind, perturb_stack
from .store import SegmentSet, Store
from .trainer import score_segments

log = logging.getLogger(__name__)

PROTOCOLS = ("intra", "cross_manipulation", "cross_dataset")
PROTOCOL_ALIASES = {"cross-manip": "cross_manipulation", "cross-dataset": "cross_dataset",
                    "cross_manip": "cross_manipulation"}


def canonical_protocol(name: str) -> str:
    name = PROTOCOL_ALIASES.get(name, name)
    if name not in PROTOCOLS:
        raise ValueError(f"unknown protocol {name!r}")
    return name


@dataclass
class ScoreSet:
    video_ids: list
    segment_index: list
    scores: np.ndarray
    labels: np.ndarray  # 1 = fake
    provenance: str = ""

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if np.any((self.scores < 0) | (self.scores > 1)):
            raise ValueError("scores must lie in [0, 1]")

    def __len__(self):
        return len(self.scores)

    def subset(self, keep_ids) -> "ScoreSet":
        keep_ids = set(keep_ids)
        m = [i for i, v in enumerate(self.video_ids) if v in keep_ids]
        return ScoreSet([self.video_ids[i] for i in m], [self.segment_index[i] for i in m],
                        self.scores[m], self.labels[m], self.provenance)

    def video_scores(self, method: str = "mean"):
        """``(ids, scores, labels)`` with one aggregated score per video, first-seen order."""
        order, groups = [], {}
        for i, v in enumerate(self.video_ids):
            if v not in groups:
                order.append(v)
                groups[v] = []
            groups[v].append(i)
        s = np.array([aggregate_video(self.scores[groups[v]], method) for v in order])
        y = np.array([self.labels[groups[v][0]] for v in order], dtype=np.int64)
        return order, s, y

    def write_csv(self, path) -> Path:
        path = Path(path)
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(("video_id", "segment_index", "score", "label"))
            for v, i, s, y in zip(self.video_ids, self.segment_index, self.scores, self.labels):
                w.writerow((v, i, repr(float(s)), "fake" if y else "real"))
        return path

    @classmethod
    def read_csv(cls, path, provenance: str = "") -> "ScoreSet":
        with open(path, newline="") as f:
            rows = list(csv.DictReader(f))
        return cls([r["video_id"] for r in rows], [int(r["segment_index"]) for r in rows],
                   [float(r["score"]) for r in rows], [int(r["label"] == "fake") for r in rows], provenance)


@dataclass
class MetricCI:
    point: float
    ci_low: float | None = None
    ci_high: float | None = None

    def __post_init__(self):
        # percentile intervals need not straddle the point estimate; widen so they do
        if self.ci_low is not None:
            self.ci_low = min(self.ci_low, self.point)
            self.ci_high = max(self.ci_high, self.point)


@dataclass
class EvalReport:
    target: str
    protocol: str
    segment_acc: MetricCI
    segment_auc: MetricCI
    video_acc: MetricCI
    video_auc: MetricCI
    n_videos: int
    n_segments: int
    config: dict = field(default_factory=dict)
    note: str = ""
    video_ids: list = field(default_factory=list)

    def to_json(self) -> dict:
        return asdict(self)


def _with_ci(point_fn, scores, labels, groups, opts, metric) -> MetricCI:
    point = point_fn(scores, labels)
    try:
        lo, hi = bootstrap_ci(scores, labels, metric, groups=groups, n_boot=opts.n_boot,
                              level=opts.ci_level, seed=opts.seed)
    except TooFewSamples:
        return MetricCI(point)
    return MetricCI(point, lo, hi)


@dataclass(frozen=True)
class EvalOptions:
    aggregate: str = "mean"
    threshold: float = 0.5
    n_boot: int = 2000
    ci_level: float = 0.95
    seed: int = 0
    split: str = "test"
    allow_train_eval: bool = False
    train_manipulations: tuple = ()
    batch_size: int = 32


def report_from_scores(ss: ScoreSet, target: str, protocol: str, opts: EvalOptions, config: dict | None = None) -> EvalReport:
    if len(set(ss.labels.tolist())) < 2:
        raise SingleClassData(f"target {target!r} lacks one of the classes")
    config = config or {}
    thr = opts.threshold
    seg_acc = _with_ci(lambda s, y: compute_acc(s, y, thr), ss.scores, ss.labels, ss.video_ids, opts,
                       lambda s, y: compute_acc(s, y, thr))
    seg_auc = _with_ci(compute_auc, ss.scores, ss.labels, ss.video_ids, opts, compute_auc)
    ids, vs, vy = ss.video_scores(opts.aggregate)
    vid_acc = _with_ci(lambda s, y: compute_acc(s, y, thr), vs, vy, ids, opts,
                       lambda s, y: compute_acc(s, y, thr))
    vid_auc = _with_ci(compute_auc, vs, vy, ids, opts, compute_auc)
    note = "" if vid_auc.ci_low is not None else "too few videos per class for a bootstrap interval"
    return EvalReport(target, protocol, seg_acc, seg_auc, vid_acc, vid_auc, len(ids), len(ss), config, note, ids)


@dataclass
class ProtocolResult:
    protocol: str
    reports: list
    train_manipulations: list
    cross_avg: dict = field(default_factory=dict)  # mean over every target row
    unseen_avg: dict = field(default_factory=dict)  # mean over targets not seen in training
    config: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "protocol": self.protocol,
            "train_manipulations": list(self.train_manipulations),
            "cross_avg": self.cross_avg,
            "unseen_avg": self.unseen_avg,
            "config": self.config,
            "reports": [r.to_json() for r in self.reports],
        }

    def write(self, out_dir) -> Path:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "report.json").write_text(json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n")
        with open(out_dir / "report.csv", "w", newline="") as f:
            w = csv.writer(f)
            cols = ("segment_acc", "segment_auc", "video_acc", "video_auc")
            w.writerow(("target", "protocol", "n_videos", "n_segments")
                       + tuple(f"{c}{s}" for c in cols for s in ("", "_low", "_high")))
            for r in self.reports:
                row = [r.target, r.protocol, r.n_videos, r.n_segments]
                for c in cols:
                    m = getattr(r, c)
                    row += [repr(m.point), "" if m.ci_low is None else repr(m.ci_low),
                            "" if m.ci_high is None else repr(m.ci_high)]
                w.writerow(row)
        return out_dir / "report.json"


def _report_from_json(r: dict) -> EvalReport:
    metrics = {k: MetricCI(**r[k]) for k in ("segment_acc", "segment_auc", "video_acc", "video_auc")}
    return EvalReport(r["target"], r["protocol"], n_videos=r["n_videos"], n_segments=r["n_segments"],
                      config=r.get("config", {}), note=r.get("note", ""), video_ids=r.get("video_ids", []), **metrics)


def load_protocol_result(path) -> ProtocolResult:
    """Read back a ``report.json`` written by :meth:`ProtocolResult.write`."""
    path = Path(path)
    doc = json.loads((path / "report.json" if path.is_dir() else path).read_text())
    return ProtocolResult(doc["protocol"], [_report_from_json(r) for r in doc["reports"]],
                          doc["train_manipulations"], doc.get("cross_avg", {}), doc.get("unseen_avg", {}),
                          doc.get("config", {}))


def config_digest(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True, default=str).encode()).hexdigest()[:16]


def score_store(net: Network, store: Store, entries, batch_size: int = 32, provenance: str = "",
                transform=None) -> ScoreSet:
    """Score every segment of ``entries``; ``transform`` maps each stored volume before inference."""
    vids, segs, scores, labels = [], [], [], []
    for e in entries:
        vols = store.load(e)
        if not vols:
            log.warning("%s has no segments; skipped", e.id)
            continue
        data = [v.data if transform is None else transform(v, e, k) for k, v in enumerate(vols)]
        s, _ = score_segments(net, SegmentSet(data, np.array([v.y for v in vols]), [e.id] * len(vols),
                                              list(range(len(vols)))), batch_size)
        vids += [e.id] * len(vols)
        segs += list(range(len(vols)))
        scores.append(s)
        labels += [v.y for v in vols]
    if not vids:
        raise MissingVolumes("no scored segments")
    return ScoreSet(vids, segs, np.concatenate(scores), np.array(labels), provenance)


def _targets(store: Store, protocol: str, opts: EvalOptions):
    test = store.select(opts.split)
    if not test:
        raise MissingVolumes(f"no videos in split {opts.split!r}")
    if protocol == "intra":
        return [("all", test)]
    if protocol == "cross_manipulation":
        reals = [e for e in test if e.label == "real"]
        manips = []
        for e in test:
            if e.label == "fake" and e.manipulation not in manips:
                manips.append(e.manipulation)
        return [(m, reals + [e for e in test if e.label == "fake" and e.manipulation == m]) for m in manips]
    datasets = []
    for e in test:
        if e.source_dataset not in datasets:
            datasets.append(e.source_dataset)
    return [(d, [e for e in test if e.source_dataset == d]) for d in datasets]


def run_protocol(ckpt, volumes_dirs, protocol: str, opts: EvalOptions = EvalOptions(), out_dir=None,
                 config: dict | None = None) -> ProtocolResult:
    """Evaluate a checkpoint on one or more volume stores.

    Cross-manipulation yields one row per fake type in the split; cross-dataset one row
    per source dataset. ``cross_avg`` averages every row, ``unseen_avg`` only rows whose
    target was not a training manipulation.
    """
    protocol = canonical_protocol(protocol)
    if opts.split == "train" and not opts.allow_train_eval:
        raise ValueError("refusing to evaluate on the training split (set allow_train_eval)")
    net, state = ckpt if isinstance(ckpt, tuple) else load_checkpoint(ckpt)
    train_manips = list(opts.train_manipulations) or list(state.get("train_manipulations", []))
    if isinstance(volumes_dirs, (str, Path)):
        volumes_dirs = [volumes_dirs]
    config = dict(config or {})
    config.setdefault("eval", {k: v for k, v in asdict(opts).items()})
    provenance = config_digest(config)

    reports, all_scores = [], []
    for vdir in volumes_dirs:
        store = Store(vdir)
        for target, entries in _targets(store, protocol, opts):
            if any(e.split == "train" for e in entries) and not opts.allow_train_eval:
                raise ValueError("refusing to score training videos (set allow_train_eval)")
            ss = score_store(net, store, entries, opts.batch_size, provenance)
            all_scores.append(ss)
            reports.append(report_from_scores(ss, target, protocol, opts, {"provenance": provenance}))

    result = ProtocolResult(protocol, reports, train_manips, config=config)
    if protocol != "intra":
        for key in ("segment_auc", "video_auc"):
            vals = [getattr(r, key).point for r in reports]
            result.cross_avg[key] = float(np.mean(vals))
            unseen = [getattr(r, key).point for r in reports if r.target not in train_manips]
            result.unseen_avg[key] = float(np.mean(unseen)) if unseen else None
    if out_dir is not None:
        out_dir = Path(out_dir)
        result.write(out_dir)
        merge_scores(all_scores).write_csv(out_dir / "scores.csv")
    return result


def merge_scores(sets: list[ScoreSet]) -> ScoreSet:
    """Concatenate score sets, keeping the first entry per (video, segment)."""
    seen, keep = set(), ([], [], [], [])
    for ss in sets:
        for v, i, sc, y in zip(ss.video_ids, ss.segment_index, ss.scores, ss.labels):
            if (v, i) in seen:
                continue
            seen.add((v, i))
            for lst, x in zip(keep, (v, i, sc, y)):
                lst.append(x)
    return ScoreSet(keep[0], keep[1], np.array(keep[2]), np.array(keep[3]), sets[0].provenance if sets else "")


def rederive_report(scores_csv, report_json) -> list[EvalReport]:
    """Recompute every report row from a persisted ScoreSet and the stored options."""
    doc = json.loads(Path(report_json).read_text())
    e = dict(doc["config"]["eval"])
    e["train_manipulations"] = tuple(e.get("train_manipulations", ()))
    opts = EvalOptions(**e)
    ss = ScoreSet.read_csv(scores_csv)
    return [report_from_scores(ss.subset(r["video_ids"]), r["target"], doc["protocol"], opts, r["config"])
            for r in doc["reports"]]


# robustness -----------------------------------------------------------------


@dataclass
class RobustnessCurves:
    kinds: list
    severities: list
    video_auc: dict  # kind -> list over severities
    segment_auc: dict
    baseline: dict

    def to_json(self) -> dict:
        return asdict(self)


def robustness_sweep(ckpt, segments_dir, kinds: Iterable[str] = ("blur", "noise", "compress"),
                     severities: Iterable[int] = range(MAX_SEVERITY + 1), mode="cfd", opts: EvalOptions = EvalOptions(),
                     seed: int = 0, out_dir=None) -> RobustnessCurves:
    """AUC per (kind, severity); frames of each RAW face segment are perturbed before differencing."""
    net, _ = ckpt if isinstance(ckpt, tuple) else load_checkpoint(ckpt)
    store = Store(segments_dir)
    if store.mode != Mode.RAW:
        raise ValueError("the robustness sweep needs a RAW segment store")
    if opts.split == "train" and not opts.allow_train_eval:
        raise ValueError("refusing to evaluate on the training split (set allow_train_eval)")
    entries = store.select(opts.split)
    if not entries:
        raise MissingVolumes(f"no videos in split {opts.split!r}")
    fn = TRANSFORMS[Mode.parse(mode)]
    kinds = [canonical_kind(k) for k in kinds]
    severities = list(severities)
    vid_index = {e.id: i for i, e in enumerate(store.videos)}

    def evaluate(spec: PerturbSpec | None):
        def transform(vol, entry, k):
            frames = vol.data if spec is None else perturb_stack(vol.data, spec, stream=vid_index[entry.id] * 4096 + k)
            return fn(frames).astype(np.float32)

        ss = score_store(net, store, entries, opts.batch_size, transform=transform)
        _, vs, vy = ss.video_scores(opts.aggregate)
        return compute_auc(vs, vy), compute_auc(ss.scores, ss.labels)

    base_v, base_s = evaluate(None)
    curves = RobustnessCurves(kinds, severities, {}, {}, {"video_auc": base_v, "segment_auc": base_s})
    for ki, kind in enumerate(kinds):
        v_row, s_row = [], []
        for sev in severities:
            if sev == 0:
                v, s = base_v, base_s
            else:
                v, s = evaluate(PerturbSpec(kind, sev, seed=seed * 1000 + ki))
            v_row.append(v)
            s_row.append(s)
            log.info("robustness %s severity %d: video AUC %.4f", kind, sev, v)
        curves.video_auc[kind] = v_row
        curves.segment_auc[kind] = s_row
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "robustness.json").write_text(json.dumps(curves.to_json(), indent=2, sort_keys=True) + "\n")
    return curves


# ablation -------------------------------------------------------------------

GRID_AXES = ("c_sl", "c_in", "mode")


def expand_grid(grid: dict) -> list[dict]:
    """Cells of the grid: explicit ``cells`` or the product of the listed axes."""
    if "cells" in grid:
        cells = [dict(c) for c in grid["cells"]]
    else:
        cells = [{}]
        for axis in GRID_AXES:
            if axis in grid:
                cells = [{**c, axis: v} for c in cells for v in grid[axis]]
    if not cells or cells == [{}] and not grid.get("allow_empty_axes", True):
        raise ValueError("empty ablation grid")
    for c in cells:
        unknown = set(c) - set(GRID_AXES)
        if unknown:
            raise ValueError(f"unknown grid axis {sorted(unknown)[0]!r}")
    return cells


def cell_name(cell: dict) -> str:
    if not cell:
        return "base"
    return "_".join(f"{k}{cell[k]}" for k in GRID_AXES if k in cell)


@dataclass
class AblationCell:
    name: str
    overrides: dict
    result: ProtocolResult | None = None
    error: str | None = None


def run_ablation(grid: dict, base_config, manifest_path, out_dir) -> list[AblationCell]:
    """One train+eval run per cell; a failing cell is recorded and the grid continues."""
    from .config import apply_overrides
    from .pipeline import run_pipeline

    out_dir = Path(out_dir)
    cells = []
    for overrides in expand_grid(grid):
        name = cell_name(overrides)
        cell = AblationCell(name, overrides)
        try:
            cfg = apply_overrides(base_config, overrides)
            if cfg.paths.cache_dir is None:
                # cells differing only in mode share the extracted face segments
                cfg = replace(cfg, paths=replace(cfg.paths, cache_dir=str(out_dir / "cache")))
            run = run_pipeline(["extract", "volumes", "train", "eval"], cfg, out_dir / name, manifest_path)
            cell.result = run.result
        except Exception as e:  # noqa: BLE001 - a cell failure must not abort the grid
            log.exception("ablation cell %s failed", name)
            cell.error = f"{type(e).__name__}: {e}"
        cells.append(cell)
    write_ablation_table(cells, out_dir)
    return cells


def ablation_rows(cells: list[AblationCell], key: str = "video_auc"):
    """Header and rows for the ablation table: one column per target plus Avg."""
    targets = []
    for c in cells:
        for r in (c.result.reports if c.result else []):
            if r.target not in targets:
                targets.append(r.target)
    header = ["cell"] + targets + ["Avg"]
    rows = []
    for c in cells:
        if c.result is None:
            rows.append([c.name] + ["failed"] * (len(targets) + 1))
            continue
        by = {r.target: getattr(r, key) for r in c.result.reports}
        vals = [by.get(t) for t in targets]
        pts = [m.point for m in vals if m is not None]
        rows.append([c.name] + [m for m in vals] + [float(np.mean(pts)) if pts else None])
    return header, rows


def _fmt(m) -> str:
    if m is None:
        return "-"
    if isinstance(m, str):
        return m
    if isinstance(m, MetricCI):
        s = f"{100 * m.point:.2f}"
        if m.ci_low is not None:
            s += f" ({100 * m.ci_low:.2f}, {100 * m.ci_high:.2f})"
        return s
    return f"{100 * m:.2f}"


def write_ablation_table(cells: list[AblationCell], out_dir) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    header, rows = ablation_rows(cells)
    with open(out_dir / "ablation.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header + ["error"])
        for c, row in zip(cells, rows):
            w.writerow([row[0]] + [
                "" if v is None else v if isinstance(v, str) else repr(v.point if isinstance(v, MetricCI) else v)
                for v in row[1:]
            ] + [c.error or ""])
    lines = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    for row in rows:
        lines.append("| " + " | ".join([row[0]] + [_fmt(v) for v in row[1:]]) + " |")
    (out_dir / "ablation.md").write_text("\n".join(lines) + "\n")
    doc = [{"name": c.name, "overrides": c.overrides, "error": c.error,
            "result": c.result.to_json() if c.result else None} for c in cells]
    (out_dir / "ablation.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return out_dir / "ablation.md"
