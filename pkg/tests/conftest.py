import os
import sys

import pytest

from psengine import bundled_games, load_bundled

HERE = os.path.dirname(__file__)
FIXTURES = os.path.join(HERE, "fixtures")


def fixture_path(name):
    return os.path.join(FIXTURES, name)


@pytest.fixture(scope="session")
def lime():
    return load_bundled("lime_rick")


@pytest.fixture(scope="session")
def sokoban():
    return load_bundled("sokoban_basic")


@pytest.fixture(scope="session")
def all_games():
    return {name: load_bundled(name) for name in sorted(bundled_games())}
