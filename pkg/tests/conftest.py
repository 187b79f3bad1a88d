import numpy as np
import pytest

from adenet.synth import SynthConfig, synth_dataset


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_data(tmp_path_factory):
    """60 rendered images with manifest and defect sidecar."""
    out = tmp_path_factory.mktemp("small")
    return synth_dataset(SynthConfig(n_images=60), seed=3, out_dir=out)


@pytest.fixture(scope="session")
def overfit_set(tmp_path_factory):
    """32 synthetic crops (11 damaged) and their labels."""
    from adenet import data
    out = tmp_path_factory.mktemp("overfit")
    m = data.load_manifest(synth_dataset(SynthConfig(n_images=32), seed=21, out_dir=out))
    crops = data.crop_insulators(m)
    return [c for c, _ in crops], np.array([lab for _, lab in crops])


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import RESULTS
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(RESULTS):
        title, ok, detail = RESULTS[n]
        terminalreporter.write_line(f"criterion {n:>2} {'PASS' if ok else 'FAIL'}  {title}: {detail}")
