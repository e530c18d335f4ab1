import numpy as np
import pytest

from logquant import Tensor, TensorArchive


def synthetic_model(n_weight_tensors=4, rows=499, cols=500, n_bias_tensors=4, bias_len=500, seed=0,
                    weight_std=0.07, bias_std=0.17):
    """998,000 weights + 2,000 biases with the default arguments."""
    rng = np.random.default_rng(seed)
    tensors = [Tensor.from_array(f"layer{i}.weight", rng.normal(0.0, weight_std, (rows, cols)))
               for i in range(n_weight_tensors)]
    tensors += [Tensor.from_array(f"layer{i}.bias", rng.normal(0.0, bias_std, bias_len))
                for i in range(n_bias_tensors)]
    return TensorArchive(tensors)


@pytest.fixture(scope="session")
def million_model():
    return synthetic_model()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# (criterion, passed, detail) rows filled in by test_acceptance.py
ACCEPTANCE: list[tuple[str, bool, str]] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for criterion, passed, detail in sorted(ACCEPTANCE, key=lambda r: (int(r[0].split(".")[0]), r[0])):
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  {criterion:<24} {detail}")
