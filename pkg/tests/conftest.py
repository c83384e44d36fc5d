import json
import os
from fractions import Fraction

import pytest

from src.env_config import EnvConfig
from src.models import DivisorGeometry, FilteredLocalSystemData, KmsPoint, ParabolicFlatData
from src.speccalc import LogPolarGrid

FIXTURES = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), "fixtures")


def fixture_path(name: str) -> str:
    return os.path.join(FIXTURES, name)


def load_fixture(name: str):
    with open(fixture_path(name), "r") as f:
        return json.load(f)


@pytest.fixture(autouse=True)
def isolated_env(monkeypatch):
    """Keep a developer's .env out of the tests"""
    monkeypatch.setattr(EnvConfig, "_loaded", True)
    for name in ("KMS_HODGE_THREADS", "KMS_HODGE_SEED", "KMS_HODGE_TOL", "KMS_HODGE_OUTPUT_FORMAT",
                 "KMS_HODGE_LOG_LEVEL", "KMS_HODGE_GRID"):
        monkeypatch.delenv(name, raising=False)


@pytest.fixture
def fixture_file():
    return fixture_path


@pytest.fixture
def bundle_doc():
    return load_fixture("two_divisor_bundle.json")


@pytest.fixture
def bundle(bundle_doc) -> ParabolicFlatData:
    return ParabolicFlatData.model_validate(bundle_doc)


@pytest.fixture
def local_system() -> FilteredLocalSystemData:
    document = load_fixture("two_divisor_localsys.json")
    return FilteredLocalSystemData.model_validate({**document, "geometry": load_fixture("surface.json")})


@pytest.fixture
def jordan_divisor() -> ParabolicFlatData:
    """One divisor with [D]^2 = -1 carrying a single rank-2 KMS value (a = -1/4, alpha = 0)"""
    return ParabolicFlatData(
        lam=1,
        rank=2,
        geometry=DivisorGeometry(components=["D1"], selfint={"D1": -1}, degL={"D1": 0}),
        divisor_spectra={"D1": [KmsPoint(a=Fraction(-1, 4), alpha=0, r=2)]},
    )


@pytest.fixture
def small_grid() -> LogPolarGrid:
    return LogPolarGrid(n_rad=16, n_ang=16)


@pytest.fixture
def medium_grid() -> LogPolarGrid:
    return LogPolarGrid(n_rad=32, n_ang=32)
