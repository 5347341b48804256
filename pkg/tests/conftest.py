import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from getnet.corpus import DcallSpec, SiteProfile, generate_corpus
from getnet.dataset import load_corpus
from getnet.dsp import DESK
from getnet.model import ArpanConfig

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

DESK_MODEL = dict(width_scale=0.125, input_shape=(32, 64), pool_grid=(16, 16))


def tiny_config(**kw) -> ArpanConfig:
    """Smallest model that exercises every block: 16x32 input, width 1/64."""
    base = dict(width_scale=1 / 64, input_shape=(16, 32), pool_grid=(8, 8), dense_units=256)
    base.update(kw)
    return ArpanConfig(**base)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def small_profiles(n_calls=(6, 4, 3)):
    call = DcallSpec(duration_range=(2.0, 3.5))
    return [SiteProfile("alpha", 2015, noise_slope=-3.0, snr_db=12.0, n_calls=n_calls[0],
                        call=call, seed=1, placement="aligned"),
            SiteProfile("beta", 2016, noise_slope=-3.0, snr_db=12.0, n_calls=n_calls[1],
                        call=call, seed=2, placement="aligned"),
            SiteProfile("gamma", 2015, noise_slope=-9.0, snr_db=10.0, n_calls=n_calls[2],
                        call=call, seed=3, placement="aligned",
                        interference=frozenset({"tonal_hum"}))]


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    """Three blocks of two 33 s clips each, written once per session."""
    out = tmp_path_factory.mktemp("small_corpus")
    generate_corpus(small_profiles(), 2, 32.768, out, seed=5)
    return out / "manifest.jsonl"


@pytest.fixture(scope="session")
def small_set(small_corpus):
    return load_corpus(small_corpus, DESK)


_VERDICTS: dict[int, tuple[bool, str]] = {}


def record_verdict(n: int, ok: bool, detail: str) -> None:
    _VERDICTS[n] = (bool(ok), detail)
    print(f"\ncriterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_VERDICTS):
        ok, detail = _VERDICTS[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
