import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from torch import nn

from vod.backbone import (
    ExpansionConfig,
    build_network,
    count_flops,
    count_parameters,
    derive_spec,
    forward,
    gradcam,
    load_checkpoint,
    parameter_digest,
    predict_proba,
    save_checkpoint,
    softmax,
)
from vod.errors import InvalidConfig, LayerNotFound, ShapeMismatch


@pytest.fixture(scope="module")
def toy():
    return build_network(toy_scale=0.25, seed=1).eval()


def test_default_stage_table():
    spec = derive_spec()
    assert [s.blocks for s in spec.stages] == [3, 5, 11, 7]
    assert [s.width for s in spec.stages] == [24, 48, 96, 192]
    assert [s.bottleneck_width for s in spec.stages] == [54, 108, 216, 432]
    assert (spec.stem_width, spec.head_conv_dim, spec.head_lin_dim, spec.head_dim) == (24, 432, 2048, 400)
    assert ExpansionConfig().clip_shape() == (13, 160)


def test_expansion_values():
    e = ExpansionConfig()
    assert (e.gamma_t, e.gamma_tau, e.gamma_w, e.gamma_b, e.gamma_d) == (6, 13, 1, 2.25, 2.2)
    assert e.gamma_s == pytest.approx(math.sqrt(2))
    with pytest.raises(InvalidConfig):
        ExpansionConfig(gamma_w=0)
    with pytest.raises(InvalidConfig):
        derive_spec(toy_scale=0)


def test_toy_scale_widths():
    full, toy = derive_spec(), derive_spec(toy_scale=0.25)
    for a, b in zip(full.stages, toy.stages):
        assert b.width == math.ceil(0.25 * a.width)
        assert b.bottleneck_width == math.ceil(0.25 * a.bottleneck_width)
        assert b.blocks == a.blocks


def test_same_seed_same_parameters():
    a = build_network(toy_scale=0.25, seed=7)
    b = build_network(toy_scale=0.25, seed=7)
    c = build_network(toy_scale=0.25, seed=8)
    assert parameter_digest(a) == parameter_digest(b) != parameter_digest(c)


def test_counts():
    net = build_network()
    assert count_parameters(net) == 3_795_124
    assert count_parameters(build_network(toy_scale=0.25)) == 279_078
    assert count_flops(net.spec, 13, 160) == pytest.approx(1.963e9, rel=1e-3)


def test_flops_match_hook_count():
    spec = derive_spec(toy_scale=0.25)
    net = build_network(spec=spec).eval()
    macs = []

    def hook(m, i, o):
        if isinstance(m, nn.Conv3d):
            k = m.kernel_size[0] * m.kernel_size[1] * m.kernel_size[2]
            macs.append(o.numel() * (m.in_channels // m.groups) * k)
        else:
            macs.append(m.in_features * m.out_features)

    hs = [m.register_forward_hook(hook) for m in net.modules() if isinstance(m, (nn.Conv3d, nn.Linear))]
    with torch.no_grad():
        net(torch.zeros(1, 3, 4, 64, 64))
    for h in hs:
        h.remove()
    assert sum(macs) == count_flops(spec, 4, 64)


def test_full_size_logit_shape():
    net = build_network().eval()
    with torch.no_grad():
        out = forward(net, torch.rand(2, 3, 16, 224, 224))
    assert out.shape == (2, 2)


def test_zero_input_zero_head(toy):
    net = build_network(toy_scale=0.25, seed=2).eval()
    with torch.no_grad():
        net.head.fc.weight.zero_()
        net.head.fc.bias.zero_()
        out = forward(net, torch.zeros(1, 3, 4, 32, 32))
    assert torch.equal(out, torch.zeros(1, 2))
    assert np.allclose(predict_proba(net, torch.zeros(1, 3, 4, 32, 32)), 0.5)


def test_softmax_examples():
    np.testing.assert_allclose(softmax([[0.0, 0.0]]), [[0.5, 0.5]])
    np.testing.assert_allclose(softmax([[0.0, math.log(3)]]), [[0.25, 0.75]])
    np.testing.assert_allclose(softmax([[1000.0, 1000.0]]), [[0.5, 0.5]])


def test_eval_deterministic_and_permutation_equivariant(toy, rng):
    x = torch.from_numpy(rng.random((4, 3, 4, 32, 32), dtype=np.float32))
    with torch.no_grad():
        a, b = forward(toy, x), forward(toy, x)
        perm = torch.tensor([2, 0, 3, 1])
        c = forward(toy, x[perm])
    assert torch.equal(a, b)
    torch.testing.assert_close(c, a[perm], rtol=1e-5, atol=1e-6)


@pytest.mark.parametrize("shape", [(3, 4, 32, 32), (1, 2, 4, 32, 32), (1, 3, 4, 30, 30), (1, 3, 4, 32, 64)])
def test_shape_mismatch(toy, shape):
    with pytest.raises(ShapeMismatch):
        forward(toy, torch.zeros(shape))


@settings(max_examples=10)
@given(st.integers(0, 2**32 - 1), st.integers(0, 1), st.sampled_from(["stage1", "stage3", "stage4"]))
def test_gradcam_range_and_dims(toy, seed, target, layer):
    vol = np.random.default_rng(seed).random((4, 32, 32, 3), dtype=np.float32)
    hm = gradcam(toy, vol, target, layer)
    assert hm.upsampled.shape == (4, 32, 32)
    assert hm.upsampled.min() >= 0 and hm.upsampled.max() <= 1
    assert hm.data.min() >= 0 and hm.data.max() <= 1


def test_gradcam_zero_target_weights(rng):
    net = build_network(toy_scale=0.25, seed=3)
    with torch.no_grad():
        net.head.fc.weight[1].zero_()
    hm = gradcam(net, rng.random((4, 32, 32, 3), dtype=np.float32), 1)
    assert not hm.upsampled.any() and not hm.data.any()


def test_gradcam_unknown_layer(toy):
    with pytest.raises(LayerNotFound):
        gradcam(toy, np.zeros((4, 32, 32, 3), np.float32), 0, "stage9")


class OneStage(nn.Module):
    def __init__(self):
        super().__init__()
        self.conv = nn.Conv3d(3, 4, 3, padding=1)
        self.act = nn.ReLU()
        self.fc = nn.Linear(4, 2)

    def forward(self, x):
        return self.fc(self.act(self.conv(x)).mean(dim=(2, 3, 4)))


def hand_cam(net, x, c):
    with torch.no_grad():
        a = net.act(net.conv(torch.from_numpy(x)[None])).numpy()[0].astype(np.float64)
    w = net.fc.weight.detach().numpy()[c].astype(np.float64) / a[0].size
    cam = np.maximum((w[:, None, None, None] * a).sum(axis=0), 0)
    lo, hi = cam.min(), cam.max()
    return (cam - lo) / (hi - lo) if hi > lo else np.zeros_like(cam)


@pytest.mark.parametrize("seed", range(5))
def test_gradcam_one_stage_hand_computed(seed):
    torch.manual_seed(seed)
    net = OneStage()
    x = np.random.default_rng(seed).random((3, 3, 8, 8), dtype=np.float32)
    for c in (0, 1):
        hm = gradcam(net, x, c, "act")
        np.testing.assert_allclose(hm.data, hand_cam(net, x, c), atol=1e-5)
        np.testing.assert_allclose(hm.upsampled, hm.data, atol=1e-5)


def test_checkpoint_roundtrip(tmp_path, rng):
    net = build_network(toy_scale=0.25, seed=4)
    x = torch.from_numpy(rng.random((2, 3, 4, 32, 32), dtype=np.float32))
    with torch.no_grad():
        net.train()
        net(x)  # move BN statistics off their defaults
    net.eval()
    p = save_checkpoint(tmp_path / "m.ckpt", net, {"epoch": 3})
    back, state = load_checkpoint(p)
    assert state["epoch"] == 3
    assert parameter_digest(back) == parameter_digest(net)
    with torch.no_grad():
        assert torch.equal(back(x), net(x))
