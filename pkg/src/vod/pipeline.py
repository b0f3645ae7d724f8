"""Stage orchestration: extract -> volumes -> train -> eval -> viz, with content-hashed memoization.

Each stage records ``stages/<stage>.done`` holding a key derived from its input digests
and its slice of the configuration; an unchanged key with intact outputs means the stage
is skipped. Face segments and difference volumes live under a cache root shared across
runs (``VOD_CACHE_DIR``, else ``paths.cache_dir``, else ``<run>/cache``).
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

from . import __version__
from .backbone import build_network, derive_spec, gradcam, load_checkpoint
from .config import RunConfig, write_lock
from .diffvol import TRANSFORMS, DifferenceVolume, Mode, build_raw
from .errors import MissingStageInput
from .evaluator import ProtocolResult, load_protocol_result, run_protocol
from .manifest import load_manifest
from .report import render_gradcam_overlay, render_protocol_table, render_robustness_curves, render_slice_panel
from .segmenter import DETECTORS, ExtractStats, SamplingConfig, extract_video
from .store import SegmentSet, Store, derive_store, store_video, write_index
from .trainer import train

log = logging.getLogger("vod.pipeline")

STAGES = ("extract", "volumes", "train", "eval", "viz")
LOG_FORMAT = "%(asctime)s %(stage)s %(levelname)s %(message)s"


def digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()


def cache_root(cfg: RunConfig, run_dir) -> Path:
    env = os.environ.get("VOD_CACHE_DIR")
    if env:
        return Path(env)
    if cfg.paths.cache_dir:
        return Path(cfg.paths.cache_dir)
    return Path(run_dir) / "cache"


def manifest_fingerprint(manifest_path) -> str:
    """Manifest bytes plus name, size and mtime of every referenced file (contents are not read)."""
    manifest_path = Path(manifest_path)
    m = load_manifest(manifest_path)
    h = hashlib.sha256(manifest_path.read_bytes())
    for r in m.records:
        p = m.resolve(r)
        files = sorted(p.iterdir()) if p.is_dir() else [p]
        for f in files:
            st = f.stat()
            h.update(f"{f.name}:{st.st_size}:{st.st_mtime_ns};".encode())
    return h.hexdigest()


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# structured logging ---------------------------------------------------------


class _StageField(logging.Filter):
    def __init__(self):
        super().__init__()
        self.stage = "-"

    def filter(self, record):
        record.stage = getattr(record, "stage", None) or self.stage
        return True


class _UTCFormatter(logging.Formatter):
    converter = time.gmtime

    def formatTime(self, record, datefmt=None):
        return time.strftime("%Y-%m-%dT%H:%M:%S", self.converter(record.created)) + f".{int(record.msecs):03d}Z"


# markers --------------------------------------------------------------------


def marker_path(run_dir, stage: str) -> Path:
    return Path(run_dir) / "stages" / f"{stage}.done"


def read_marker(run_dir, stage: str) -> dict | None:
    p = marker_path(run_dir, stage)
    return json.loads(p.read_text()) if p.is_file() else None


def _write_marker(run_dir, stage: str, key: str, inputs: dict, outputs: dict) -> None:
    p = marker_path(run_dir, stage)
    p.parent.mkdir(parents=True, exist_ok=True)
    doc = {"stage": stage, "key": key, "inputs": inputs, "outputs": outputs, "version": __version__}
    p.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _outputs_exist(outputs: dict) -> bool:
    return all(Path(v).exists() for k, v in outputs.items() if k.endswith(("_dir", "_path")))


# stages ---------------------------------------------------------------------


def _extract_one(args):
    path, video_id, detector_name, sampling = args
    stats = ExtractStats()
    segs, n = extract_video(path, video_id, DETECTORS[detector_name](), sampling, stats)
    return segs, n, stats.dropped


def extract_store(manifest_path, out_dir, sampling: SamplingConfig, detector: str, jobs: int = 1) -> Path:
    """Crop face segments for every manifest video into a RAW store at ``out_dir``."""
    m = load_manifest(manifest_path)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if detector not in DETECTORS:
        raise ValueError(f"unknown detector {detector!r}; choose from {sorted(DETECTORS)}")
    jobs_args = [(str(m.resolve(r)), r.id, detector, sampling) for r in m.records]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_extract_one, jobs_args))
    else:
        results = [_extract_one(a) for a in jobs_args]
    videos, dropped = [], 0
    for r, (segs, n, lost) in zip(m.records, results):
        dropped += len(lost)
        vols = [build_raw(s, r.label) for s in segs]
        entry = store_video(out_dir, r, m.split_of(r.id), vols)
        entry["frame_count"] = n
        videos.append(entry)
    # the index is written last: its presence marks a complete store
    write_index(out_dir, Mode.RAW, videos, sampling=asdict(sampling), detector=detector, dropped_segments=dropped)
    log.info("extracted %d segments from %d videos (%d dropped)",
             sum(v["segments"] for v in videos), len(videos), dropped)
    return out_dir


def _stage_extract(ctx: "_Context") -> tuple[dict, dict, callable]:
    manifest = ctx.manifest_path
    if manifest is None or not Path(manifest).is_file():
        raise MissingStageInput("manifest")
    inputs = {"manifest": manifest_fingerprint(manifest)}
    conf = {"sampling": asdict(ctx.cfg.sampling), "detector": ctx.cfg.detector}
    key = digest([inputs, conf])
    out = ctx.cache / "segments" / key[:16]

    def run():
        if (out / "index.json").is_file():
            log.info("segment store %s found in cache", out.name)
        else:
            extract_store(manifest, out, ctx.cfg.sampling, ctx.cfg.detector, ctx.cfg.jobs)
        return {"segments_dir": str(out), "segments_digest": Store(out).digest()}

    return key, inputs, run


def _need(ctx, stage: str, field_: str, artifact: str) -> str:
    mk = read_marker(ctx.run_dir, stage)
    if mk is None or field_ not in mk["outputs"] or not Path(mk["outputs"][field_]).exists():
        raise MissingStageInput(artifact)
    return mk["outputs"][field_]


def _stage_volumes(ctx):
    seg = _need(ctx, "extract", "segments_dir", "segments")
    inputs = {"segments": Store(seg).digest()}
    conf = {"mode": Mode.parse(ctx.cfg.mode).name.lower()}
    key = digest([inputs, conf])
    out = ctx.cache / "volumes" / key[:16]

    def run():
        if (out / "index.json").is_file():
            log.info("volume store %s found in cache", out.name)
        else:
            derive_store(seg, out, ctx.cfg.mode)
        return {"volumes_dir": str(out), "volumes_digest": Store(out).digest()}

    return key, inputs, run


def _stage_train(ctx):
    vol = _need(ctx, "volumes", "volumes_dir", "volumes")
    inputs = {"volumes": Store(vol).digest()}
    cfg = ctx.cfg
    conf = {"train": asdict(cfg.train), "expansion": asdict(cfg.expansion), "network": asdict(cfg.network)}
    key = digest([inputs, conf])
    out = ctx.run_dir / "train"

    def run():
        ckpt = train_from_store(cfg, vol, out)
        return {"checkpoint_path": str(ckpt), "checkpoint_sha256": file_digest(ckpt),
                "history_path": str(out / "history.csv")}

    return key, inputs, run


def train_from_store(cfg: RunConfig, volumes_dir, out_dir) -> Path:
    """Train a fresh network on the store's train split, selecting on its val split; returns ``best.ckpt``."""
    store = Store(volumes_dir)
    train_entries = store.select("train")
    train_set = SegmentSet.from_entries(store, train_entries)
    val_set = SegmentSet.from_entries(store, store.select("val"))
    spec = derive_spec(cfg.expansion, cfg.network.toy_scale, cfg.network.head_dim, cfg.network.dropout)
    net = build_network(spec=spec, seed=cfg.train.seed)
    manips = sorted({e.manipulation for e in train_entries if e.label == "fake"})
    log.info("training on %d segments (%d validation), mode %s", len(train_set), len(val_set), store.mode.name)
    train(net, train_set, val_set, cfg.train, out_dir,
          extra_state={"train_manipulations": manips, "mode": store.mode.name.lower()})
    return Path(out_dir) / "best.ckpt"


def _checkpoint(ctx) -> str:
    mk = read_marker(ctx.run_dir, "train")
    ckpt = Path(mk["outputs"]["checkpoint_path"]) if mk else ctx.run_dir / "train" / "best.ckpt"
    if not ckpt.is_file():
        raise MissingStageInput("checkpoint")
    return str(ckpt)


def _stage_eval(ctx):
    ckpt = _checkpoint(ctx)
    vol = _need(ctx, "volumes", "volumes_dir", "volumes")
    inputs = {"checkpoint": file_digest(ckpt), "volumes": Store(vol).digest()}
    cfg = ctx.cfg
    conf = {"eval": asdict(cfg.eval), "protocol": cfg.protocol}
    key = digest([inputs, conf])
    out = ctx.run_dir / "eval"

    def run():
        result = run_protocol(ckpt, [vol], cfg.protocol, cfg.eval, out, config=cfg.experiment())
        ctx.result = result
        return {"report_path": str(out / "report.json"), "scores_path": str(out / "scores.csv")}

    return key, inputs, run


def _stage_viz(ctx):
    ckpt = _checkpoint(ctx)
    seg = _need(ctx, "extract", "segments_dir", "segments")
    vol = _need(ctx, "volumes", "volumes_dir", "volumes")
    report = _need(ctx, "eval", "report_path", "report")
    robust = ctx.run_dir / "robust" / "robustness.json"
    inputs = {"checkpoint": file_digest(ckpt), "segments": Store(seg).digest(), "volumes": Store(vol).digest(),
              "report": file_digest(report), "robustness": file_digest(robust) if robust.is_file() else None}
    key = digest([inputs, {"split": ctx.cfg.eval.split}])
    out = ctx.run_dir / "viz"

    def run():
        return render_run_figures(ctx.cfg, ckpt, seg, vol, report, out, robust if robust.is_file() else None)

    return key, inputs, run


STAGE_FNS = {"extract": _stage_extract, "volumes": _stage_volumes, "train": _stage_train,
             "eval": _stage_eval, "viz": _stage_viz}


def render_run_figures(cfg: RunConfig, ckpt, segments_dir, volumes_dir, report_json, out_dir,
                       robustness_json=None) -> dict:
    """Slice panel and Grad-CAM overlay for the first usable test fake, the report table and, if present,
    robustness curves."""
    out_dir = Path(out_dir)
    exp = cfg.experiment()
    outputs = {"viz_dir": str(out_dir)}
    raw_store, vol_store = Store(segments_dir), Store(volumes_dir)
    fakes = [e for e in raw_store.select(cfg.eval.split) if e.label == "fake" and e.shard]
    if fakes:
        e = fakes[0]
        raw = raw_store.load(e)[0]
        diff = DifferenceVolume(TRANSFORMS[Mode.CFD](raw.data), Mode.CFD, raw.spec, raw.label)
        S = raw.data.shape[1]
        outputs["slice_panel_path"] = str(render_slice_panel(raw, diff, S // 2, S // 2,
                                                             out_dir / f"slice_{e.id}.png", config=exp))
        vol = vol_store.load(next(v for v in vol_store.videos if v.id == e.id))[0]
        net, _ = load_checkpoint(ckpt)
        heat = gradcam(net, vol.data, target_class=1)
        frames = render_gradcam_overlay(vol, heat, 0.5, out_dir / f"gradcam_{e.id}", config=exp)
        outputs["gradcam_overlay_dir"] = str(frames[0].parent)
    outputs["table_path"] = str(render_protocol_table(report_json, out_dir))
    if robustness_json is not None:
        curves = json.loads(Path(robustness_json).read_text())
        outputs["robustness_path"] = str(render_robustness_curves(curves, out_dir, config=exp).png)
    return outputs


# driver ---------------------------------------------------------------------


@dataclass
class _Context:
    cfg: RunConfig
    run_dir: Path
    manifest_path: Path | None
    cache: Path
    result: ProtocolResult | None = None


@dataclass
class PipelineRun:
    run_dir: Path
    config: RunConfig
    executed: list = field(default_factory=list)
    cached: list = field(default_factory=list)
    result: ProtocolResult | None = None


def _attach_log(run_dir: Path):
    (run_dir / "logs").mkdir(parents=True, exist_ok=True)
    handler = logging.FileHandler(run_dir / "logs" / "pipeline.log")
    flt = _StageField()
    handler.addFilter(flt)
    handler.setFormatter(_UTCFormatter(LOG_FORMAT))
    handler.setLevel(logging.INFO)
    root = logging.getLogger("vod")
    root.addHandler(handler)
    if root.level == logging.NOTSET or root.level > logging.INFO:
        root.setLevel(logging.INFO)
    return handler, flt


def run_pipeline(stages, cfg: RunConfig, run_dir, manifest_path=None) -> PipelineRun:
    """Run the requested stages (in canonical order) into ``run_dir``."""
    stages = list(stages)
    unknown = [s for s in stages if s not in STAGES]
    if unknown or not stages:
        raise ValueError(f"stages must be a nonempty subset of {STAGES}, got {stages}")
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    manifest_path = manifest_path or cfg.paths.manifest
    ctx = _Context(cfg, run_dir, Path(manifest_path) if manifest_path else None, cache_root(cfg, run_dir))
    run = PipelineRun(run_dir, cfg)
    write_lock(cfg, run_dir)
    handler, flt = _attach_log(run_dir)
    try:
        for stage in (s for s in STAGES if s in stages):
            flt.stage = stage
            key, inputs, execute = STAGE_FNS[stage](ctx)
            mk = read_marker(run_dir, stage)
            if mk and mk["key"] == key and _outputs_exist(mk["outputs"]):
                log.info("cached (key %s)", key[:12])
                run.cached.append(stage)
                if stage == "eval":
                    ctx.result = load_protocol_result(mk["outputs"]["report_path"])
                continue
            marker_path(run_dir, stage).unlink(missing_ok=True)
            t0 = time.perf_counter()
            log.info("started")
            outputs = execute()
            _write_marker(run_dir, stage, key, inputs, outputs)
            log.info("finished in %.1fs", time.perf_counter() - t0)
            run.executed.append(stage)
    except Exception as e:
        log.error("%s: %s", type(e).__name__, e)
        raise
    finally:
        logging.getLogger("vod").removeHandler(handler)
        handler.close()
    run.result = ctx.result
    return run
