import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from stream_ssm.modules.numerics import make_rng

DATA_DIR = os.path.join(os.path.dirname(os.path.abspath(__file__)), "data")


@pytest.fixture
def rng(request):
    return make_rng(0, request.node.name)


@pytest.fixture
def data_dir():
    return DATA_DIR
