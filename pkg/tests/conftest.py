import json
from importlib import resources

import pytest

from mhnas import hardware
from mhnas.layers import build_baseline
from mhnas.metrics import norm_factors_from_reference
from mhnas.space import SearchSpace


def builtin_space(name: str) -> SearchSpace:
    text = resources.files("mhnas").joinpath(f"data/{name}.json").read_text()
    return SearchSpace.from_dict(json.loads(text))


@pytest.fixture(scope="session")
def synthetic_models():
    return {h: hardware.synthetic_cost_model(h) for h in hardware.SYNTHETIC_HARDWARE}


@pytest.fixture(scope="session")
def v1_norm(synthetic_models):
    return norm_factors_from_reference(build_baseline("mobilenet_v1"), synthetic_models,
                                       label="mobilenet_v1@1.0")


@pytest.fixture(scope="session")
def default_space():
    return builtin_space("default_space")


@pytest.fixture(scope="session")
def comparison_path():
    return str(resources.files("mhnas").joinpath("data/comparison.csv"))
