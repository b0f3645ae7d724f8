import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from vod.manifest import SyntheticSpec, generate_synthetic

settings.register_profile("vod", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("vod")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    """10 real / 10 fake clips, 14 frames of 32x32."""
    out = tmp_path_factory.mktemp("corpus")
    spec = SyntheticSpec(n_real=10, n_fake=10, frames=14, height=32, width=32, seed=3)
    m = generate_synthetic(spec, out)
    return out, m


@pytest.fixture(scope="session")
def stores(tmp_path_factory):
    """RAW and CFD stores of a two-manipulation corpus, with an untrained toy checkpoint."""
    from vod.backbone import build_network, save_checkpoint
    from vod.pipeline import extract_store
    from vod.segmenter import SamplingConfig
    from vod.store import derive_store

    root = tmp_path_factory.mktemp("stores")
    spec = SyntheticSpec(n_real=12, n_fake=12, frames=12, height=40, width=40, seed=5, manipulations=("a", "b"))
    generate_synthetic(spec, root / "corpus")
    sampling = SamplingConfig(c_sl=4, c_step=4, out_size=32, margin=0.0)
    raw = extract_store(root / "corpus" / "manifest.json", root / "raw", sampling, "synthetic")
    cfd = derive_store(raw, root / "cfd", "cfd")
    ckpt = save_checkpoint(root / "toy.ckpt", build_network(toy_scale=0.25, seed=0).eval(),
                           {"train_manipulations": ["a"]})
    return {"root": root, "raw": raw, "cfd": cfd, "ckpt": ckpt}


_criteria = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, text): acceptance criterion checked by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.when not in ("setup", "call"):
        return
    n, text = mark.args
    ok = _criteria.get(n, (text, True))[1] and not rep.failed
    if rep.when == "call" or rep.failed:
        _criteria[n] = (text, ok)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_criteria):
        text, ok = _criteria[n]
        terminalreporter.write_line(f"criterion {n:2d} {'PASS' if ok else 'FAIL'}  {text}")
