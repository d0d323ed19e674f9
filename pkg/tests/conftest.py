import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from tvmerge.data import reference_fixture  # noqa: E402
from tvmerge.nn import MlpSpec, init_params  # noqa: E402
from tvmerge.params import ParamSet  # noqa: E402
from tvmerge.task_vectors import make_task_vector  # noqa: E402


def random_paramset(rng: np.random.Generator, dtype=np.float32, max_entries=4, max_layers=3, meta=None) -> ParamSet:
    n = int(rng.integers(1, max_entries + 1))
    layers = int(rng.integers(1, min(n, max_layers) + 1))
    # every layer gets at least one entry so indices stay contiguous
    assign = list(range(layers)) + list(rng.integers(0, layers, size=n - layers))
    entries = []
    for i, layer in enumerate(sorted(assign)):
        shape = tuple(int(s) for s in rng.integers(1, 5, size=int(rng.integers(1, 4))))
        entries.append((f"p{i}", layer, (rng.standard_normal(shape) * 3).astype(dtype)))
    return ParamSet(entries, meta)


def random_instance(rng: np.random.Generator, k_max=4, l_max=3, d_max=16, c_max=5, scale=0.3):
    """Random MLP spec, pretrained weights and K fine-tuned variants."""
    layers = int(rng.integers(1, l_max + 1))
    dims = [int(rng.integers(2, d_max + 1))] + [int(rng.integers(2, d_max + 1)) for _ in range(layers - 1)]
    dims.append(int(rng.integers(2, c_max + 1)))
    spec = MlpSpec(tuple(dims))
    pre = init_params(spec, int(rng.integers(0, 2**31)))
    k = int(rng.integers(1, k_max + 1))
    finetuned = [
        pre.with_arrays([(e.data + scale * rng.standard_normal(e.shape)).astype(np.float32) for e in pre])
        for _ in range(k)
    ]
    vectors = [make_task_vector(ft, pre, f"t{i}") for i, ft in enumerate(finetuned)]
    return spec, pre, finetuned, vectors


@pytest.fixture(scope="session")
def reference():
    return reference_fixture()


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    results = getattr(module, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
