import os

import numpy as np
import pytest

from vewane.core import EventRecord, validate_dataset
from vewane.simulate import ScenarioSpec, simulate_cohort


def workers() -> int:
    return max(1, int(os.environ.get("VEWANE_JOBS", os.cpu_count() or 1)))


def make_records(rows, horizon=1.0):
    """rows: (id, vax_time, event_time, cause[, strain])."""
    recs = []
    for row in rows:
        strain = row[4] if len(row) > 4 else None
        recs.append(EventRecord(str(row[0]), row[1], row[2], row[3], strain))
    return validate_dataset(recs, horizon)


@pytest.fixture(scope="session")
def small_cohort():
    """Moderate simulated cohort shared by estimator tests."""
    scenario = ScenarioSpec(n=8000, seed=314159)
    dataset, truth = simulate_cohort(scenario)
    return scenario, dataset, truth


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(20260809)
