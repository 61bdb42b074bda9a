import pytest

from sparkattn import burble
from sparkattn.config import SEED_ENV


@pytest.fixture(autouse=True)
def quiet_sparkattn(monkeypatch):
    monkeypatch.delenv(SEED_ENV, raising=False)
    yield
    burble.disable()
