import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "default", max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    """Four speakers, short utterances, a small noise bank: enough for fast trainer tests."""
    from spkdistill import audio

    root = tmp_path_factory.mktemp("tiny")
    spec = audio.CorpusSpec(n_speakers=4, utterances_per_speaker=5, min_duration_s=0.5, max_duration_s=0.8, seed=5)
    manifest = audio.synth_corpus(spec, root)
    bank = audio.build_noise_bank(spec, n_per_class=2, duration_s=1.0)
    return audio.load_records(manifest), bank


@pytest.fixture(scope="session")
def tiny_config():
    from spkdistill.trainer import TrainConfig

    return TrainConfig(
        seed=3,
        batch_size=4,
        stage1_steps=3,
        stage2_steps=3,
        k_units=8,
        k_out=16,
        enc_hidden=(12,),
        emb_dim=6,
        head_hidden=10,
        syn_unit_dim=4,
        syn_latent_dim=3,
        syn_hidden=10,
        n_bands=12,
        target_window_frames=20,
    )


@pytest.fixture(scope="session")
def tiny_data(tiny_corpus, tiny_config):
    from spkdistill.trainer import fit_units, prepare_data

    records, _ = tiny_corpus
    return prepare_data(records, fit_units(records, tiny_config), tiny_config)


# --------------------------------------------------------------- acceptance

_ACCEPTANCE_KEY = pytest.StashKey[dict]()


@pytest.fixture
def criterion(request):
    """Record one acceptance line: ``criterion(n, passed, detail)``."""
    store = request.config.stash.setdefault(_ACCEPTANCE_KEY, {})

    def record(n: int, passed: bool, detail: str) -> bool:
        store[n] = (bool(passed), detail)
        print(f"criterion {n}: {'PASS' if passed else 'FAIL'} ({detail})")
        return passed

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    store = config.stash.get(_ACCEPTANCE_KEY, {})
    if not store:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(store):
        passed, detail = store[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if passed else 'FAIL'}  {detail}")
