"""Acceptance criteria at their stated tolerances; one summary line per criterion."""

import json
import time

import numpy as np
import pytest
import torch

from vod.backbone import build_network, count_flops, count_parameters, derive_spec, gradcam
from vod.cli import main
from vod.diffvol import build_cfd, build_ssff
from vod.metrics import bootstrap_ci, compute_auc
from vod.perturb import KINDS, PerturbSpec, gaussian_noise, perturb
from vod.segmenter import CropBox, FaceSegment, SamplingConfig, SegmentSpec, sample_segments
from vod.trainer import TrainConfig, step_lr

C_SL = (2, 16, 17, 24, 32)
REF_PARAMS = 3.76e6
REF_FLOPS = 1.96e9


def _seg(data):
    spec = SegmentSpec("v", 1, tuple(range(1, data.shape[0] + 1)))
    return FaceSegment(data, spec, CropBox(0, data.shape[1], 0, data.shape[2]))


def _oracle(x, first_frame):
    """Elementwise absolute differences, computed on Python floats and rounded back to float32."""
    T = x.shape[0]
    flat = [x[t].ravel().tolist() for t in range(T)]
    out = []
    for t in range(1, T):
        ref = flat[0] if first_frame else flat[t - 1]
        out.append([abs(b - a) for a, b in zip(ref, flat[t])])
    return np.asarray(out, dtype=np.float32).reshape((T - 1,) + x.shape[1:])


@pytest.mark.criterion(1, "CFD/SSFF match the loop oracle on 1000 segments; invariants hold")
def test_c1_difference_oracle():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    for i in range(1000):
        c_sl = C_SL[i % 5]
        side = (8, 32)[(i // 5) % 2]
        x = rng.random((c_sl, side, side, 3), dtype=np.float32)
        cfd, ssff = build_cfd(_seg(x), "real").data, build_ssff(_seg(x), "real").data
        assert np.array_equal(cfd, _oracle(x, False))
        assert np.array_equal(ssff, _oracle(x, True))
        assert cfd.min() >= 0 and ssff.min() >= 0
        assert np.array_equal(build_cfd(_seg(x[::-1].copy()), "real").data, cfd[::-1])
        a = np.float32(2.0 ** int(rng.integers(-3, 4)))
        assert np.array_equal(build_cfd(_seg(a * x), "real").data, a * cfd)
        b = np.float32(rng.uniform(0.1, 3.0))
        np.testing.assert_allclose(build_cfd(_seg(b * x), "real").data, b * cfd, rtol=1e-5, atol=1e-6)
    assert time.perf_counter() - t0 < 60


def _enumerate_starts(n, c_sl, c_step, c_in, cap=200, limit=50):
    starts = [s for s in range(1, n + 1) if (s - 1) % c_step == 0 and s <= cap and s + (c_sl - 1) * c_in <= n]
    return starts[:limit]


@pytest.mark.criterion(2, "segment sampling equals exhaustive enumeration; 50 segments at N=300")
def test_c2_sampling_enumeration():
    t0 = time.perf_counter()
    for c_sl in C_SL:
        for c_step in range(1, 9):
            for c_in in range(1, 7):
                cfg = SamplingConfig(c_sl=c_sl, c_step=c_step, c_in=c_in)
                for n in range(1, 301):
                    got = sample_segments(n, cfg)
                    assert [s.start_frame for s in got] == _enumerate_starts(n, c_sl, c_step, c_in)
                    for s in got:
                        assert s.frame_indices == tuple(s.start_frame + k * c_in for k in range(c_sl))
    assert len(sample_segments(300, SamplingConfig())) == 50
    assert time.perf_counter() - t0 < 60


@pytest.mark.criterion(3, "toy backbone gradients match central finite differences (rel err < 1e-3)")
def test_c3_gradient_check():
    t0 = time.perf_counter()
    net = build_network(toy_scale=0.25, seed=0).double().eval()
    gen = torch.Generator().manual_seed(0)
    with torch.no_grad():
        # move every BN layer off its identity initialisation so all paths carry gradient
        for m in net.modules():
            if isinstance(m, torch.nn.BatchNorm3d):
                m.weight.uniform_(0.5, 1.5, generator=gen)
                m.bias.uniform_(-0.2, 0.2, generator=gen)
                m.running_mean.uniform_(-0.1, 0.1, generator=gen)
                m.running_var.uniform_(0.5, 1.5, generator=gen)
    x = torch.rand(2, 3, 4, 32, 32, generator=gen, dtype=torch.float64)
    y = torch.tensor([0, 1])

    def loss_fn():
        return torch.nn.functional.cross_entropy(net(x), y)

    params = [p for p in net.parameters()]
    net.zero_grad()
    loss_fn().backward()
    sizes = np.array([p.numel() for p in params])
    rng = np.random.default_rng(0)
    flat_idx = rng.choice(sizes.sum(), 50, replace=False)
    bounds = np.cumsum(sizes)
    # many gradients are ~1e-9 against an O(1) loss; smaller steps drown them in roundoff
    eps = 1e-4
    worst = 0.0
    for f in flat_idx:
        pi = int(np.searchsorted(bounds, f, side="right"))
        off = int(f - (bounds[pi - 1] if pi else 0))
        p = params[pi]
        analytic = p.grad.view(-1)[off].item()
        with torch.no_grad():
            orig = p.view(-1)[off].item()
            p.view(-1)[off] = orig + eps
            up = loss_fn().item()
            p.view(-1)[off] = orig - eps
            down = loss_fn().item()
            p.view(-1)[off] = orig
        numeric = (up - down) / (2 * eps)
        denom = max(abs(analytic), abs(numeric))
        rel = 0.0 if denom < 1e-10 else abs(analytic - numeric) / denom
        worst = max(worst, rel)
    assert worst < 1e-3, worst
    assert time.perf_counter() - t0 < 300


@pytest.mark.criterion(4, "default network: params within 5% of 3.76M, FLOPs within 10% of 1.96G")
def test_c4_architecture_scale():
    net = build_network()
    params = count_parameters(net)
    flops = count_flops(derive_spec(), 13, 160)
    print(f"params {params} ({params / REF_PARAMS - 1:+.2%}), flops {flops} ({flops / REF_FLOPS - 1:+.2%})")
    assert abs(params / REF_PARAMS - 1) < 0.05
    assert abs(flops / REF_FLOPS - 1) < 0.10


PIPE = ["--detector", "synthetic", "--toy-scale", "0.25", "--c-sl", "9", "--c-step", "4", "--out-size", "32",
        "--epochs", "5", "--lr", "1e-2", "--batch-size", "16", "--seed", "0"]


@pytest.fixture(scope="module")
def synthetic_runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("e2e")
    t0 = time.perf_counter()
    assert main(["synth", "--out", str(root / "data"), "--n-real", "40", "--n-fake", "40", "--frames", "24",
                 "--size", "64", "--seed", "0"]) == 0
    manifest = str(root / "data" / "manifest.json")
    assert main(["ablate", "--manifest", manifest, "--out", str(root / "ablate"), "--mode-grid", "cfd", "raw"]
                + PIPE) == 0
    ablate_s = time.perf_counter() - t0
    t1 = time.perf_counter()
    assert main(["pipeline", "--manifest", manifest, "--out", str(root / "run_a")] + PIPE) == 0
    assert main(["pipeline", "--manifest", manifest, "--out", str(root / "run_b")] + PIPE) == 0
    return {"root": root, "ablate_seconds": ablate_s, "pipeline_seconds": (time.perf_counter() - t1) / 2}


def _video_auc(run_dir):
    doc = json.loads((run_dir / "eval" / "report.json").read_text())
    return doc["reports"][0]["video_auc"]["point"]


@pytest.mark.slow
@pytest.mark.criterion(5, "synthetic pipeline: CFD video AUC >= 0.95 in 5 epochs and above the RAW cell")
def test_c5_synthetic_end_to_end(synthetic_runs):
    root = synthetic_runs["root"]
    cfd = _video_auc(root / "run_a")
    cells = {c["name"]: c for c in json.loads((root / "ablate" / "ablation.json").read_text())}
    cell_cfd = cells["modecfd"]["result"]["reports"][0]["video_auc"]["point"]
    cell_raw = cells["moderaw"]["result"]["reports"][0]["video_auc"]["point"]
    print(f"pipeline CFD video AUC {cfd:.4f}; ablation CFD {cell_cfd:.4f} RAW {cell_raw:.4f}; "
          f"{synthetic_runs['pipeline_seconds']:.0f}s per pipeline run")
    assert cfd >= 0.95
    assert cell_raw < cell_cfd
    assert synthetic_runs["pipeline_seconds"] < 600


@pytest.mark.criterion(6, "step_lr gives 1e-2, 1e-3, 1e-4, 1e-5, 1e-6 at epochs 0/10/20/30/40 exactly")
def test_c6_scheduler():
    cfg = TrainConfig()
    assert [step_lr(e, cfg) for e in (0, 10, 20, 30, 40)] == [1e-2, 1e-3, 1e-4, 1e-5, 1e-6]


def _pairwise(s, y):
    pos, neg = s[y == 1], s[y == 0]
    tot = 0.0
    for a in pos:
        for b in neg:
            tot += 1.0 if a > b else 0.5 if a == b else 0.0
    return tot / (len(pos) * len(neg))


@pytest.mark.criterion(7, "compute_auc matches the pairwise oracle within 1e-12; flip and monotone invariance")
def test_c7_auc():
    rng = np.random.default_rng(7)
    for i in range(100):
        n = int(rng.integers(2, 201))
        y = rng.integers(0, 2, n)
        y[:2] = (0, 1)
        s = rng.integers(0, 10, n) / 9.0 if i % 2 else rng.random(n)
        auc = compute_auc(s, y)
        assert abs(auc - _pairwise(s, y)) <= 1e-12
        assert abs(compute_auc(s, 1 - y) - (1 - auc)) <= 1e-12
        assert abs(compute_auc(np.log1p(s) * 5 + 2, y) - auc) <= 1e-12


def _normal_draws(n, seed):
    rng = np.random.default_rng(seed)
    y = np.repeat([0, 1], n // 2)
    return rng.normal(y * 1.0, 1.0), y


@pytest.mark.criterion(8, "bootstrap CI deterministic, contains the resample median, narrower at n=500")
def test_c8_bootstrap():
    s, y = _normal_draws(50, 8)
    lo, hi, samples = bootstrap_ci(s, y, seed=3, return_samples=True)
    lo2, hi2, samples2 = bootstrap_ci(s, y, seed=3, return_samples=True)
    assert (lo, hi) == (lo2, hi2) and np.array_equal(samples, samples2)
    assert lo <= np.median(samples) <= hi
    lo500, hi500 = bootstrap_ci(*_normal_draws(500, 8), seed=3)
    assert hi500 - lo500 < hi - lo


@pytest.mark.criterion(9, "perturbations: severity 0 identity, constant blur identity, noise std within 5%")
def test_c9_perturbations():
    rng = np.random.default_rng(9)
    frame_u8 = rng.integers(0, 256, (32, 32, 3), dtype=np.uint8)
    frame_f = rng.random((32, 32, 3), dtype=np.float32)
    for kind in KINDS:
        for f in (frame_u8, frame_f):
            out = perturb(f, PerturbSpec(kind, 0))
            assert out.dtype == f.dtype and out.tobytes() == f.tobytes()
    for sev in range(1, 6):
        const = np.full((24, 24, 3), 137, dtype=np.uint8)
        assert np.array_equal(perturb(const, PerturbSpec("gaussian_blur", sev)), const)
        spec = PerturbSpec("gaussian_noise", sev)
        base = np.full(10**6, 0.5)
        noisy = gaussian_noise(base, spec.parameter, np.random.default_rng(sev), clip=False)
        assert abs((noisy - base).std() / spec.parameter - 1) < 0.05


class _OneStage(torch.nn.Module):
    def __init__(self):
        super().__init__()
        self.conv = torch.nn.Conv3d(3, 5, 3, padding=1)
        self.act = torch.nn.ReLU()
        self.fc = torch.nn.Linear(5, 2)

    def forward(self, x):
        return self.fc(self.act(self.conv(x)).mean(dim=(2, 3, 4)))


@pytest.mark.criterion(10, "Grad-CAM: zero head weights give zero maps; range and dims; 1-stage hand map")
def test_c10_gradcam():
    rng = np.random.default_rng(10)
    net = build_network(toy_scale=0.25, seed=10)
    for _ in range(5):
        vol = rng.random((4, 32, 32, 3), dtype=np.float32)
        for target in (0, 1):
            hm = gradcam(net, vol, target)
            assert hm.upsampled.shape == vol.shape[:3]
            assert 0 <= hm.upsampled.min() and hm.upsampled.max() <= 1
    with torch.no_grad():
        net.head.fc.weight[1].zero_()
    assert not gradcam(net, rng.random((4, 32, 32, 3), dtype=np.float32), 1).upsampled.any()

    torch.manual_seed(10)
    small = _OneStage()
    x = rng.random((3, 2, 6, 6), dtype=np.float32)
    with torch.no_grad():
        act = small.act(small.conv(torch.from_numpy(x)[None]))[0].double().numpy()
    for c in (0, 1):
        w = small.fc.weight.detach().double().numpy()[c] / act[0].size
        cam = np.maximum(np.tensordot(w, act, axes=1), 0)
        cam = (cam - cam.min()) / (cam.max() - cam.min()) if cam.max() > cam.min() else np.zeros_like(cam)
        np.testing.assert_allclose(gradcam(small, x, c, "act").data, cam, atol=1e-5)


@pytest.mark.slow
@pytest.mark.criterion(11, "two seeded synthetic pipeline runs give identical history CSVs and report JSONs")
def test_c11_determinism(synthetic_runs):
    a, b = synthetic_runs["root"] / "run_a", synthetic_runs["root"] / "run_b"
    assert (a / "train" / "history.csv").read_bytes() == (b / "train" / "history.csv").read_bytes()
    assert (a / "eval" / "report.json").read_bytes() == (b / "eval" / "report.json").read_bytes()
    cell = synthetic_runs["root"] / "ablate" / "modecfd"
    assert (cell / "train" / "history.csv").read_bytes() == (a / "train" / "history.csv").read_bytes()
