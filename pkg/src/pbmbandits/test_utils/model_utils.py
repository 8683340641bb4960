import os
from typing import Dict, Sequence

import numpy as np
import pandas as pd
import pytest

from pbmbandits.core.emfit import AggregatedCounts
from pbmbandits.core.model import PbmModel
from pbmbandits.core.stats import CounterSet

TEST_LONG_RUNS = os.environ.get("TEST_LONG_RUNS", "false").lower() == "true"

SYNTHETIC_KAPPA = (0.9, 0.6, 0.3)
SYNTHETIC_THETA = (0.45, 0.35, 0.25, 0.15, 0.05)


def requires_long_run(test_func):
    return pytest.mark.skipif(
        not TEST_LONG_RUNS,
        reason="This test runs the full-scale experiment; set TEST_LONG_RUNS=true to enable it",
    )(test_func)


@pytest.fixture
def synthetic_model() -> PbmModel:
    return PbmModel(theta=SYNTHETIC_THETA, kappa=SYNTHETIC_KAPPA)


def make_counters(kappa: Sequence[float], plays, clicks) -> CounterSet:
    plays = np.atleast_2d(np.asarray(plays, dtype=np.int64))
    clicks = np.atleast_2d(np.asarray(clicks, dtype=np.int64))
    return CounterSet(kappa, plays.shape[0], plays, clicks)


def simulate_allocation(
    theta: float,
    kappa: Sequence[float],
    allocation: Sequence[int],
    draws: int,
    rng: np.random.Generator,
) -> CounterSet:
    """
    Counters of `draws` independent copies of one arm with a fixed play allocation per
    position; every copy is a row of the returned counters.
    """
    kappa = np.asarray(kappa, dtype=float)
    plays = np.tile(np.asarray(allocation, dtype=np.int64), (draws, 1))
    clicks = rng.binomial(plays, kappa * theta)
    return CounterSet(kappa, draws, plays, clicks)


def generate_counts(
    theta_by_query: Dict[str, Sequence[float]],
    kappa: Sequence[float],
    impressions_per_cell: int,
    rng: np.random.Generator,
) -> AggregatedCounts:
    """Aggregated PBM click counts with the same number of impressions in every cell."""
    rows = []
    for query_id, thetas in theta_by_query.items():
        for k, theta in enumerate(thetas):
            for l, kappa_l in enumerate(kappa):
                rows.append(
                    {
                        "query_id": query_id,
                        "arm_id": f"a{k}",
                        "position": l + 1,
                        "impressions": impressions_per_cell,
                        "clicks": int(rng.binomial(impressions_per_cell, kappa_l * theta)),
                    }
                )
    return AggregatedCounts(pd.DataFrame(rows), len(kappa))
