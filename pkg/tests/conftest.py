import numpy as np
import pytest

from epiforge import geo


def synthetic_table(n=20, seed=42, pop_range=(2e3, 2e4),
                    density_range=(200, 2500), state="ST"):
    """Random but deterministic county table for desk-scale runs."""
    rng = np.random.default_rng(seed)
    records = []
    for i in range(n):
        records.append(geo.CountyRecord(
            id=f"{i:05d}", name=f"county{i}", state=state,
            lat=float(rng.uniform(30, 45)),
            lon=float(rng.uniform(-100, -70)),
            population=int(np.exp(rng.uniform(*np.log(pop_range)))),
            density=float(np.exp(rng.uniform(*np.log(density_range))))))
    return geo.CountyTable.from_records(records)


@pytest.fixture
def table20():
    return synthetic_table(20)


@pytest.fixture
def table5():
    return synthetic_table(5, seed=7)
