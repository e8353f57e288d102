import os

os.environ.setdefault("QT_QPA_PLATFORM", "offscreen")
os.environ.setdefault("DAVE_CONFIG_HOME", os.path.join(os.path.dirname(__file__), ".no-user-config"))

import numpy as np  # noqa: E402
import pytest  # noqa: E402

from dave.aln import AlnConfig  # noqa: E402
from dave.data.synth import SceneSpec, synth_generate  # noqa: E402
from dave.fvpn import FvpnConfig  # noqa: E402
from dave.model import ModelBundle  # noqa: E402

TINY_SCENE = SceneSpec(width=160, height=120, min_vehicles=1, max_vehicles=2, min_size=36, max_size=64)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_fvpn_config():
    return FvpnConfig(conv1=4, conv2=6, conv3=6, knowledge_dim=8)


@pytest.fixture
def tiny_aln_config():
    return AlnConfig(input_side=16, depth="shallow-4", feature_dim=8, base_channels=4)


@pytest.fixture
def tiny_model(tiny_fvpn_config, tiny_aln_config):
    return ModelBundle.create(tiny_fvpn_config, tiny_aln_config, seed=3)


@pytest.fixture
def tiny_dataset(tmp_path):
    return synth_generate(str(tmp_path / "synth"), 8, spec=TINY_SCENE, seed=5, quiet=True)
