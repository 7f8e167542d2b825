import pytest

from diffumamba import tensor as T


@pytest.fixture
def f64_mode():
    """Run a test with float64 defaults (tight gradient tolerances)."""
    T.set_default_dtype("f64")
    yield
    T.set_default_dtype("f32")


@pytest.fixture(autouse=True)
def _reset_dtype():
    yield
    T.set_default_dtype("f32")


@pytest.fixture
def rng():
    return T.Rng(1234, name="test")
