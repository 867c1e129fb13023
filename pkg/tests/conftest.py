import numpy as np
import pytest

from ctxsmc.model import DNA, ContextModel, TableMultiplier, cpg_model, symmetric_model

# the standard small fixture: CpG model, lambda = 2, four sites, one mutation
FIXTURE_X, FIXTURE_Y, FIXTURE_T = "ACGT", "ATGT", 0.25
FIXTURE_P = 0.027334562176812956  # frozen exact transition probability (uniformization, tol 1e-12)


@pytest.fixture(scope="session")
def cpg2():
    return cpg_model(2.0)


@pytest.fixture(scope="session")
def cpg4():
    return cpg_model(4.0)


@pytest.fixture(scope="session")
def sym():
    return symmetric_model()


@pytest.fixture(scope="session")
def unit_k2():
    """A k=2 neighbourhood model whose multiplier is identically one."""
    return ContextModel(DNA, np.ones((4, 4)), k=2, multiplier=TableMultiplier({}, default=1.0))


@pytest.fixture(scope="session")
def mild():
    """A mildly context-dependent k=2 model (every CG-containing context gets phi = 1.05)."""
    table = {}
    import itertools
    for ctx in itertools.product("-ACGT", "ACGT", "-ACGT"):
        key = "".join(ctx)
        table[key] = 1.05 if ("CG" in key) else 1.0
    return ContextModel(DNA, np.ones((4, 4)), k=2, multiplier=TableMultiplier(table))
