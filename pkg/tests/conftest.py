from __future__ import annotations

import pytest
from _helpers import make_data


@pytest.fixture(scope="session")
def tiny_data():
    return make_data()
