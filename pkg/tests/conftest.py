import numpy as np
import pytest

from ndm.experiments import RunConfig
from ndm.network import NetworkSpec
from ndm.retina import RetinaParams
from ndm.stimulus import RdkParams

# A 30 px movie maps onto a 10x10 LGN lattice, small enough for sub-second trials.
SMALL_STIMULUS = RdkParams(frame_size=30, aperture_diameter=27.0, n_dots=20, n_frames=30)
# Strong I->E inhibition keeps the 20-neuron LIP pools below threshold, so small trials run to the end.
SMALL_SPEC = NetworkSpec(lgn_side=10, v1_side=5, mt_side=2, v1_mt_patch=3, n_lip_e=20, n_lip_i=30, lip_ie_gaba=1.3)


@pytest.fixture
def small_spec():
    return SMALL_SPEC


@pytest.fixture
def small_config():
    return RunConfig(network=SMALL_SPEC, retina=RetinaParams(), stimulus=SMALL_STIMULUS)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# acceptance criterion -> (passed, detail); filled by test_acceptance and printed at the end
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
