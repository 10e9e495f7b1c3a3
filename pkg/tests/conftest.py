import sys
from pathlib import Path

import numpy as np
import pytest

from occludrop.tensor import set_default_dtype

sys.path.insert(0, str(Path(__file__).parent))


@pytest.fixture(autouse=True)
def float64_mode():
    """Oracle and gradient paths are only meaningful at 64-bit."""
    set_default_dtype(np.float64)
    yield
    set_default_dtype(np.float64)
