import math
import os

import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "default", deadline=None, max_examples=60, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture(scope="session")
def small_sequence(tmp_path_factory):
    """200 frames: 140 base frames, then 5 forward and 5 reverse revisits of 6 frames.

    Revisits carry only a small heading error and no position error, so
    every frame with full temporal context is expected to be detected.
    """
    from isc.synth import generate_sequence

    out = tmp_path_factory.mktemp("seq200")
    manifest = generate_sequence(
        out,
        n_base=140,
        forward_revisits=5,
        reverse_revisits=5,
        heading_noise=math.radians(0.25),
        jitter=0.0,
        seed=3,
    )
    return out, manifest


def ground_config_map():
    return {"ground_mode": "z_threshold", "ground_z": "-1.5"}


@pytest.fixture(scope="session")
def synth_config():
    from isc.config import config_from_mapping

    return config_from_mapping(ground_config_map())

