"""Expandable 3D network (X3D family) with a two-class head, Grad-CAM and checkpoints."""

from __future__ import annotations

import io
import json
import math
import struct
import zipfile
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import CorruptShard, InvalidConfig, LayerNotFound, NonFiniteActivation, ShapeMismatch

# tiny 2D base network that the expansion factors grow
BASE_STEM_WIDTH = 24
BASE_STAGE_WIDTHS = (24, 48, 96, 192)
BASE_STAGE_DEPTHS = (1, 2, 5, 3)
BASE_RESOLUTION = 112
HEAD_LIN_WIDTH = 2048
# width of the source architecture's classifier layer, kept as the embedding ahead of the fc
SOURCE_CLASSIFIER_WIDTH = 400
SPATIAL_DOWNSAMPLE = 32


@dataclass(frozen=True)
class ExpansionConfig:
    gamma_t: float = 6.0
    gamma_tau: float = 13.0
    gamma_s: float = math.sqrt(2.0)
    gamma_w: float = 1.0
    gamma_b: float = 2.25
    gamma_d: float = 2.2

    def __post_init__(self):
        for k, v in asdict(self).items():
            if not (isinstance(v, (int, float)) and math.isfinite(v) and v > 0):
                raise InvalidConfig(f"{k} must be a positive number, got {v!r}")

    def clip_shape(self) -> tuple[int, int]:
        """Native (frames, side) of the expanded network.

        The larger temporal factor is the clip length (13 frames for X3D-S), the
        smaller one the frame stride; the side is the base resolution times the
        spatial factor, rounded to the network's downsampling.
        """
        frames = int(round(max(self.gamma_t, self.gamma_tau)))
        side = int(round(BASE_RESOLUTION * self.gamma_s / SPATIAL_DOWNSAMPLE)) * SPATIAL_DOWNSAMPLE
        return frames, max(side, SPATIAL_DOWNSAMPLE)


@dataclass(frozen=True)
class StageSpec:
    blocks: int
    width: int
    bottleneck_width: int
    spatial_stride: int = 2


@dataclass(frozen=True)
class NetworkSpec:
    stages: tuple[StageSpec, ...]
    stem_width: int
    head_conv_dim: int
    head_lin_dim: int
    head_dim: int
    in_channels: int = 3
    num_classes: int = 2
    se_ratio: float = 0.0625
    dropout: float = 0.5
    toy_scale: float = 1.0
    expansion: ExpansionConfig = field(default_factory=ExpansionConfig)

    def __post_init__(self):
        if len(self.stages) != 4:
            raise InvalidConfig("the network has exactly four residual stages")
        for s in self.stages:
            if s.blocks < 1 or s.width < 1 or s.bottleneck_width < 1:
                raise InvalidConfig(f"degenerate stage {s}")
        if min(self.stem_width, self.head_conv_dim, self.head_lin_dim, self.head_dim) < 1:
            raise InvalidConfig("head/stem widths must be >= 1")

    def to_json(self) -> dict:
        d = asdict(self)
        d["stages"] = [asdict(s) for s in self.stages]
        return d

    @classmethod
    def from_json(cls, d: dict) -> "NetworkSpec":
        d = dict(d)
        d["stages"] = tuple(StageSpec(**s) for s in d["stages"])
        d["expansion"] = ExpansionConfig(**d["expansion"])
        return cls(**d)


def round_width(width: float, multiplier: float, divisor: int = 8) -> int:
    w = width * multiplier
    new = max(divisor, int(w + divisor / 2) // divisor * divisor)
    if new < 0.9 * w:
        new += divisor
    return int(new)


def derive_spec(cfg: ExpansionConfig | None = None, toy_scale: float = 1.0, head_dim: int | None = None,
                dropout: float = 0.5) -> NetworkSpec:
    """Apply the width/bottleneck/depth factors to the base stage layout.

    ``toy_scale`` shrinks every width by ``ceil(toy_scale * w)``; depths are unchanged.
    """
    cfg = cfg or ExpansionConfig()
    if not 0 < toy_scale <= 1:
        raise InvalidConfig(f"toy_scale must lie in (0, 1], got {toy_scale}")

    def scale(w):
        return int(math.ceil(toy_scale * w))

    stages = []
    for base_w, base_d in zip(BASE_STAGE_WIDTHS, BASE_STAGE_DEPTHS):
        w = round_width(base_w, cfg.gamma_w)
        inner = int(cfg.gamma_b * w)
        stages.append(StageSpec(int(math.ceil(cfg.gamma_d * base_d)), scale(w), scale(inner)))
    last_inner = int(cfg.gamma_b * round_width(BASE_STAGE_WIDTHS[-1], cfg.gamma_w))
    return NetworkSpec(
        stages=tuple(stages),
        stem_width=scale(round_width(BASE_STEM_WIDTH, cfg.gamma_w)),
        head_conv_dim=scale(last_inner),
        head_lin_dim=scale(HEAD_LIN_WIDTH),
        head_dim=scale(SOURCE_CLASSIFIER_WIDTH) if head_dim is None else head_dim,
        dropout=dropout,
        toy_scale=toy_scale,
        expansion=cfg,
    )


class SqueezeExcite(nn.Module):
    def __init__(self, channels, reduced):
        super().__init__()
        self.fc1 = nn.Conv3d(channels, reduced, 1)
        self.fc2 = nn.Conv3d(reduced, channels, 1)

    def forward(self, x):
        s = x.mean(dim=(2, 3, 4), keepdim=True)
        return x * torch.sigmoid(self.fc2(F.relu(self.fc1(s))))


class Bottleneck(nn.Module):
    """1x1x1 reduce, 3x3x3 channelwise, (SE), swish, 1x1x1 expand, residual."""

    def __init__(self, dim_in, dim_inner, dim_out, stride, use_se, se_ratio):
        super().__init__()
        self.conv_a = nn.Conv3d(dim_in, dim_inner, 1, bias=False)
        self.bn_a = nn.BatchNorm3d(dim_inner)
        self.conv_b = nn.Conv3d(dim_inner, dim_inner, 3, (1, stride, stride), 1, groups=dim_inner, bias=False)
        self.bn_b = nn.BatchNorm3d(dim_inner)
        self.se = SqueezeExcite(dim_inner, round_width(dim_inner, se_ratio)) if use_se else None
        self.conv_c = nn.Conv3d(dim_inner, dim_out, 1, bias=False)
        self.bn_c = nn.BatchNorm3d(dim_out)
        self.bn_c.is_last_bn = True
        self.shortcut = None
        if dim_in != dim_out or stride != 1:
            self.shortcut = nn.Sequential(
                nn.Conv3d(dim_in, dim_out, 1, (1, stride, stride), bias=False), nn.BatchNorm3d(dim_out)
            )

    def forward(self, x):
        y = F.relu(self.bn_a(self.conv_a(x)))
        y = self.bn_b(self.conv_b(y))
        if self.se is not None:
            y = self.se(y)
        y = y * torch.sigmoid(y)
        y = self.bn_c(self.conv_c(y))
        return F.relu(y + (x if self.shortcut is None else self.shortcut(x)))


class Stem(nn.Module):
    def __init__(self, dim_in, dim_out):
        super().__init__()
        self.conv_xy = nn.Conv3d(dim_in, dim_out, (1, 3, 3), (1, 2, 2), (0, 1, 1), bias=False)
        self.conv_t = nn.Conv3d(dim_out, dim_out, (5, 1, 1), 1, (2, 0, 0), groups=dim_out, bias=False)
        self.bn = nn.BatchNorm3d(dim_out)

    def forward(self, x):
        return F.relu(self.bn(self.conv_t(self.conv_xy(x))))


class Head(nn.Module):
    def __init__(self, dim_in, conv_dim, lin_dim, head_dim, num_classes, dropout):
        super().__init__()
        self.conv = nn.Conv3d(dim_in, conv_dim, 1, bias=False)
        self.bn = nn.BatchNorm3d(conv_dim)
        self.lin = nn.Conv3d(conv_dim, lin_dim, 1, bias=False)
        self.dropout = nn.Dropout(dropout) if dropout > 0 else nn.Identity()
        self.embed = nn.Linear(lin_dim, head_dim)
        self.fc = nn.Linear(head_dim, num_classes)

    def forward(self, x):
        x = F.relu(self.bn(self.conv(x)))
        x = x.mean(dim=(2, 3, 4), keepdim=True)
        x = F.relu(self.lin(x)).flatten(1)
        return self.fc(self.embed(self.dropout(x)))


class Network(nn.Module):
    def __init__(self, spec: NetworkSpec):
        super().__init__()
        self.spec = spec
        self.stem = Stem(spec.in_channels, spec.stem_width)
        dim_in = spec.stem_width
        for i, st in enumerate(spec.stages, start=1):
            blocks = []
            for j in range(st.blocks):
                stride = st.spatial_stride if j == 0 else 1
                blocks.append(Bottleneck(dim_in, st.bottleneck_width, st.width, stride, j % 2 == 0, spec.se_ratio))
                dim_in = st.width
            self.add_module(f"stage{i}", nn.Sequential(*blocks))
        self.head = Head(dim_in, spec.head_conv_dim, spec.head_lin_dim, spec.head_dim, spec.num_classes, spec.dropout)

    def features(self, x):
        x = self.stem(x)
        for i in range(1, 5):
            x = getattr(self, f"stage{i}")(x)
        return x

    def forward(self, x):
        return self.head(self.features(x))


def init_parameters(net: nn.Module) -> None:
    for m in net.modules():
        if isinstance(m, nn.Conv3d):
            nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.BatchNorm3d):
            nn.init.constant_(m.weight, 0.0 if getattr(m, "is_last_bn", False) else 1.0)
            nn.init.zeros_(m.bias)
        elif isinstance(m, nn.Linear):
            nn.init.normal_(m.weight, std=0.01)
            nn.init.zeros_(m.bias)


def build_network(cfg: ExpansionConfig | None = None, toy_scale: float = 1.0, seed: int = 0,
                  spec: NetworkSpec | None = None, **spec_kw) -> Network:
    spec = spec or derive_spec(cfg, toy_scale, **spec_kw)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        net = Network(spec)
        init_parameters(net)
    return net


def check_input(net: Network, batch: torch.Tensor) -> None:
    if batch.ndim != 5:
        raise ShapeMismatch(f"expected (B, C, T, S, S), got {tuple(batch.shape)}")
    _, c, t, h, w = batch.shape
    if c != net.spec.in_channels:
        raise ShapeMismatch(f"expected {net.spec.in_channels} channels, got {c}")
    if h != w or h % SPATIAL_DOWNSAMPLE:
        raise ShapeMismatch(f"spatial dims must be square multiples of {SPATIAL_DOWNSAMPLE}, got {h}x{w}")
    if t < 1:
        raise ShapeMismatch("need at least one time step")


def forward(net: Network, batch: torch.Tensor) -> torch.Tensor:
    check_input(net, batch)
    logits = net(batch)
    if not torch.isfinite(logits).all():
        raise NonFiniteActivation("non-finite logits")
    return logits


def softmax(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


@torch.no_grad()
def predict_proba(net: Network, batch: torch.Tensor) -> np.ndarray:
    return softmax(forward(net, batch).cpu().numpy())


def volumes_to_batch(arrays, dtype=torch.float32) -> torch.Tensor:
    """Stack ``(T, S, S, 3)`` volumes into a ``(B, 3, T, S, S)`` tensor."""
    x = torch.from_numpy(np.ascontiguousarray(np.stack(arrays)))
    return x.permute(0, 4, 1, 2, 3).contiguous().to(dtype)


# Grad-CAM -------------------------------------------------------------------


@dataclass
class HeatmapVolume:
    data: np.ndarray  # (T', S', S') at the layer's resolution
    upsampled: np.ndarray  # (T, S, S) aligned with the input


def _minmax(cam: torch.Tensor) -> torch.Tensor:
    lo, hi = cam.min(), cam.max()
    if hi - lo <= 0:
        return torch.zeros_like(cam)
    return (cam - lo) / (hi - lo)


def gradcam(net: nn.Module, volume, target_class: int, layer: str = "stage4") -> HeatmapVolume:
    """Gradient-weighted activation map of ``layer`` for ``target_class``.

    ``volume`` is one input, either ``(T, S, S, 3)`` (as stored) or ``(3, T, S, S)``.
    """
    try:
        module = net.get_submodule(layer)
    except AttributeError as e:
        raise LayerNotFound(layer) from e
    x = torch.as_tensor(np.asarray(volume))
    if x.ndim != 4:
        raise ShapeMismatch(f"expected one 4-D volume, got {tuple(x.shape)}")
    if x.shape[-1] == 3 and x.shape[0] != 3:
        x = x.permute(3, 0, 1, 2)
    param = next(net.parameters())
    x = x.unsqueeze(0).to(param.dtype)

    captured = {}
    handle = module.register_forward_hook(lambda m, i, o: captured.setdefault("act", o))
    was_training = net.training
    net.eval()
    try:
        with torch.enable_grad():
            logits = net(x)
            act = captured["act"]
            (grad,) = torch.autograd.grad(logits[0, target_class], act, allow_unused=True)
    finally:
        handle.remove()
        net.train(was_training)
    if grad is None:
        grad = torch.zeros_like(act)
    act, grad = act.detach()[0], grad.detach()[0]
    weights = grad.mean(dim=(1, 2, 3))
    cam = _minmax(F.relu((weights[:, None, None, None] * act).sum(dim=0)))
    up = F.interpolate(cam[None, None], size=tuple(x.shape[2:]), mode="trilinear", align_corners=False)[0, 0]
    return HeatmapVolume(cam.cpu().numpy(), up.clamp(0, 1).cpu().numpy())


# size accounting ------------------------------------------------------------


def count_parameters(net: nn.Module) -> int:
    return sum(p.numel() for p in net.parameters())


def count_flops(spec: NetworkSpec, frames: int, side: int) -> int:
    """Multiply-accumulates of one forward pass, counted analytically per layer.

    Convolutions and linear layers only; normalization and activations are ignored.
    """
    t, s = frames, side
    total = 0

    def conv(cin, cout, k, groups, t_out, s_out):
        return t_out * s_out * s_out * cout * (cin // groups) * k

    s = (s + 2 - 3) // 2 + 1
    total += conv(spec.in_channels, spec.stem_width, 9, 1, t, s)
    total += conv(spec.stem_width, spec.stem_width, 5, spec.stem_width, t, s)
    dim_in = spec.stem_width
    for st in spec.stages:
        for j in range(st.blocks):
            stride = st.spatial_stride if j == 0 else 1
            s_out = (s + 2 - 3) // stride + 1
            total += conv(dim_in, st.bottleneck_width, 1, 1, t, s)
            total += conv(st.bottleneck_width, st.bottleneck_width, 27, st.bottleneck_width, t, s_out)
            if j % 2 == 0:
                r = round_width(st.bottleneck_width, spec.se_ratio)
                total += 2 * st.bottleneck_width * r
            total += conv(st.bottleneck_width, st.width, 1, 1, t, s_out)
            if dim_in != st.width or stride != 1:
                total += conv(dim_in, st.width, 1, 1, t, s_out)
            dim_in, s = st.width, s_out
    total += conv(dim_in, spec.head_conv_dim, 1, 1, t, s)
    total += spec.head_conv_dim * spec.head_lin_dim
    total += spec.head_lin_dim * spec.head_dim + spec.head_dim * spec.num_classes
    return total


# checkpoints ----------------------------------------------------------------


def encode_arrays(arrays: dict[str, np.ndarray]) -> bytes:
    """Named float32 arrays: u32 name length, name, u8 ndim, u32 dims, f32 payload, u32 crc."""
    buf = io.BytesIO()
    buf.write(struct.pack("<I", len(arrays)))
    for name, a in arrays.items():
        # ascontiguousarray would promote 0-d buffers such as BN batch counters to 1-d
        a = np.array(a, dtype="<f4", order="C")
        key = name.encode()
        payload = a.tobytes()
        buf.write(struct.pack("<I", len(key)) + key)
        buf.write(struct.pack("<B", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape))
        buf.write(payload + struct.pack("<I", zlib.crc32(payload)))
    return buf.getvalue()


def decode_arrays(raw: bytes) -> dict[str, np.ndarray]:
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(raw):
            raise CorruptShard("truncated parameter block")
        out = raw[pos : pos + n]
        pos += n
        return out

    (count,) = struct.unpack("<I", take(4))
    out = {}
    for _ in range(count):
        (n,) = struct.unpack("<I", take(4))
        name = take(n).decode()
        (ndim,) = struct.unpack("<B", take(1))
        dims = struct.unpack(f"<{ndim}I", take(4 * ndim))
        payload = take(4 * int(np.prod(dims, dtype=np.int64)))
        (crc,) = struct.unpack("<I", take(4))
        if zlib.crc32(payload) != crc:
            raise CorruptShard(f"CRC mismatch in {name}")
        out[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).copy()
    return out


def state_arrays(module: nn.Module) -> dict[str, np.ndarray]:
    return {k: v.detach().cpu().numpy().astype(np.float32) for k, v in module.state_dict().items()}


def save_checkpoint(path, net: Network, state: dict | None = None, optimizer: torch.optim.Optimizer | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with zipfile.ZipFile(tmp, "w", zipfile.ZIP_STORED) as z:
        z.writestr("spec.json", json.dumps(net.spec.to_json(), indent=2, sort_keys=True))
        z.writestr("params.bin", encode_arrays(state_arrays(net)))
        st = dict(state or {})
        if optimizer is not None:
            arrays, meta = {}, {"param_groups": optimizer.state_dict()["param_groups"], "moments": "optimizer.bin"}
            for pid, s in optimizer.state_dict()["state"].items():
                for k, v in s.items():
                    if torch.is_tensor(v):
                        arrays[f"{pid}/{k}"] = v.detach().cpu().numpy()
            z.writestr("optimizer.bin", encode_arrays(arrays))
            st["optimizer"] = meta
        z.writestr("state.json", json.dumps(st, indent=2, sort_keys=True))
    tmp.replace(path)
    return path


def load_checkpoint(path, dtype=torch.float32) -> tuple[Network, dict]:
    with zipfile.ZipFile(path) as z:
        spec = NetworkSpec.from_json(json.loads(z.read("spec.json")))
        arrays = decode_arrays(z.read("params.bin"))
        state = json.loads(z.read("state.json"))
    net = Network(spec)
    expected = net.state_dict()
    if set(arrays) != set(expected):
        missing = sorted(set(expected) ^ set(arrays))
        raise ShapeMismatch(f"checkpoint parameters do not match its spec: {missing[:5]}")
    loaded = {}
    for k, v in expected.items():
        if tuple(v.shape) != arrays[k].shape:
            raise ShapeMismatch(f"{k}: spec expects {tuple(v.shape)}, checkpoint has {arrays[k].shape}")
        loaded[k] = torch.from_numpy(arrays[k]).to(v.dtype)
    net.load_state_dict(loaded)
    net.to(dtype).eval()
    return net, state


def parameter_digest(net: nn.Module) -> str:
    import hashlib

    h = hashlib.sha256()
    for k, v in net.state_dict().items():
        h.update(k.encode())
        h.update(v.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()
