import os
import shutil
import sys
from pathlib import Path

import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, str(Path(__file__).parent))

from helpers import FIXTURES  # noqa: E402

from gsem.config import load_config  # noqa: E402
from gsem.construction import build_memory  # noqa: E402
from gsem.model import load_cases  # noqa: E402

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("ci", deadline=None, max_examples=200, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture(scope="session")
def fixture_config():
    return load_config(FIXTURES / "config.yaml")


def _build(cfg):
    import json

    cases = load_cases(json.loads((FIXTURES / "cases.json").read_text()))
    gen = cfg.provider("generation").chat()
    return build_memory(cases, gen, cfg.provider("embedding").embedder(), cfg.construction)


@pytest.fixture
def fixture_graph(fixture_config):
    g, _ = _build(fixture_config)
    return g


@pytest.fixture
def fixture_dir(tmp_path):
    """A writable copy of the fixture directory."""
    dst = tmp_path / "fx"
    shutil.copytree(FIXTURES, dst)
    return dst
