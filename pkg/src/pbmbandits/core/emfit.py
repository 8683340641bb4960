"""
Click-log ingestion and EM estimation of PBM parameters.

Logs are CSV files, either raw (`query_id,arm_id,position,click`, one impression per row,
extra columns such as a user id ignored) or pre-aggregated
(`query_id,arm_id,position,impressions,clicks`). Positions are 1-based in files.

The EM treats examination as the latent variable: a clicked impression was examined, an
unclicked one was examined with probability kappa_l (1 - theta_k) / (1 - kappa_l theta_k).
kappa and theta are only identifiable up to the products kappa_l theta_k; no rescaling is
applied, so fits are comparable only through those products or through the fixed
initialization kappa_l = 1 / l.
"""

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import IO, Any, Dict, List, Mapping, Optional, Tuple, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field
from scipy.special import xlogy

from pbmbandits.core.envs.pbm_env_vars import PBM_BANDITS_NUM_WORKERS
from pbmbandits.core.model import PbmModel
from pbmbandits.core.utils.config import (
    AGGREGATED_LOG_COLUMNS,
    EM_CLAMP,
    EM_MAX_ITERS,
    EM_TOL,
    MIN_ARMS,
    MIN_IMPRESSIONS,
    RAW_LOG_COLUMNS,
)

_logger = logging.getLogger(__name__)

_KEY_COLUMNS = ["query_id", "arm_id", "position"]

Source = Union[str, IO[str], IO[bytes]]


class IngestOptions(BaseModel):
    num_positions: int = Field(ge=1, description="Number of positions L in the log")
    min_impressions: int = Field(
        default=MIN_IMPRESSIONS,
        ge=0,
        description="Impressions required at every position to keep a (query, arm) pair",
    )
    min_arms: int = Field(
        default=MIN_ARMS,
        ge=1,
        description="Surviving arms required to keep a query",
    )

    model_config = ConfigDict(frozen=True, extra="forbid")


class EmFitOptions(BaseModel):
    max_iters: int = Field(default=EM_MAX_ITERS, ge=1, description="Iteration cap")
    tol: float = Field(
        default=EM_TOL,
        ge=0,
        description="Stop when the relative log-likelihood improvement falls below this",
    )
    clamp: float = Field(
        default=EM_CLAMP,
        gt=0,
        lt=0.5,
        description="Parameters are clamped to [clamp, 1 - clamp]",
    )
    fixed_kappa: Optional[Tuple[float, ...]] = Field(
        default=None,
        description="Examination probabilities held fixed instead of estimated",
    )

    model_config = ConfigDict(frozen=True, extra="forbid")


@dataclass
class AggregatedCounts:
    """
    Impressions and clicks per (query_id, arm_id, position), positions 1-based.

    The frame is sorted by key so that equal logs aggregate to equal objects whatever the
    row order.
    """

    frame: pd.DataFrame
    num_positions: int

    def __post_init__(self):
        missing = set(AGGREGATED_LOG_COLUMNS) - set(self.frame.columns)
        if missing:
            raise ValueError(f"Aggregated counts are missing columns {sorted(missing)}.")
        frame = self.frame.loc[:, list(AGGREGATED_LOG_COLUMNS)].copy()
        frame["query_id"] = frame["query_id"].astype(str)
        frame["arm_id"] = frame["arm_id"].astype(str)
        for column in ("position", "impressions", "clicks"):
            frame[column] = frame[column].astype(np.int64)
        if (frame["clicks"] > frame["impressions"]).any() or (frame["clicks"] < 0).any():
            raise ValueError("Aggregated counts must satisfy 0 <= clicks <= impressions.")
        if not frame["position"].between(1, self.num_positions).all():
            raise ValueError(f"Positions must lie in [1, {self.num_positions}].")
        self.frame = frame.sort_values(_KEY_COLUMNS, kind="stable").reset_index(drop=True)

    @property
    def empty(self) -> bool:
        return self.frame.empty or int(self.frame["impressions"].sum()) == 0

    @property
    def total_impressions(self) -> int:
        return int(self.frame["impressions"].sum())

    def queries(self) -> List[str]:
        return sorted(self.frame["query_id"].unique().tolist())

    def for_query(self, query_id: str) -> "AggregatedCounts":
        subset = self.frame[self.frame["query_id"] == query_id]
        if subset.empty:
            raise ValueError(f"Unknown query {query_id!r}.")
        return AggregatedCounts(subset, self.num_positions)

    def impressions(self) -> Dict[Tuple[str, str, int], int]:
        return {
            (row.query_id, row.arm_id, int(row.position)): int(row.impressions)
            for row in self.frame.itertuples(index=False)
        }

    def clicks(self) -> Dict[Tuple[str, str, int], int]:
        return {
            (row.query_id, row.arm_id, int(row.position)): int(row.clicks)
            for row in self.frame.itertuples(index=False)
        }

    def to_csv(self, path_or_buffer: Any) -> None:
        self.frame.to_csv(path_or_buffer, index=False)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, AggregatedCounts):
            return NotImplemented
        return self.num_positions == other.num_positions and self.frame.equals(other.frame)


def _parse_integer_column(frame: pd.DataFrame, column: str) -> pd.Series:
    values = pd.to_numeric(frame[column], errors="coerce")
    bad = values.isna() | (values != values.round())
    if bad.any():
        index = int(bad.idxmax())
        raise ValueError(
            f"Malformed row at line {index + 2}: column {column} has value "
            f"{frame.loc[index, column]!r}, expecting an integer."
        )
    return values.astype(np.int64)


def _first_violation(mask: pd.Series, message: str) -> None:
    if mask.any():
        index = int(mask.idxmax())
        raise ValueError(f"Malformed row at line {index + 2}: {message}.")


def _read_log(source: Source) -> pd.DataFrame:
    try:
        frame = pd.read_csv(source, dtype=str, keep_default_na=False, skip_blank_lines=False)
    except pd.errors.ParserError as e:
        raise ValueError(f"Malformed click log: {e}") from e
    except pd.errors.EmptyDataError as e:
        raise ValueError("The click log is empty.") from e
    frame.columns = [column.strip() for column in frame.columns]
    blank = (frame == "").all(axis=1)
    return frame[~blank]


def filter_counts(counts: AggregatedCounts, options: IngestOptions) -> AggregatedCounts:
    """
    Keep (query, arm) pairs with at least `min_impressions` impressions at every position,
    then queries with at least `min_arms` surviving arms.
    """
    frame = counts.frame
    if frame.empty:
        return counts
    per_position = frame.pivot_table(
        index=["query_id", "arm_id"],
        columns="position",
        values="impressions",
        aggfunc="sum",
        fill_value=0,
    ).reindex(columns=range(1, counts.num_positions + 1), fill_value=0)
    kept_pairs = per_position.index[(per_position >= options.min_impressions).all(axis=1)]
    arms_per_query = pd.Series([query for query, _ in kept_pairs], dtype=object).value_counts()
    kept_queries = set(arms_per_query[arms_per_query >= options.min_arms].index)
    kept = {(query, arm) for query, arm in kept_pairs if query in kept_queries}

    keys = list(zip(frame["query_id"], frame["arm_id"]))
    mask = np.array([key in kept for key in keys], dtype=bool)
    if dropped := int((~mask).sum()):
        _logger.warning(
            f"Filtering dropped {dropped} of {len(frame)} cells "
            f"(min_impressions={options.min_impressions}, min_arms={options.min_arms}); "
            f"{len(kept_queries)} queries remain."
        )
    return AggregatedCounts(frame[mask], counts.num_positions)


def ingest(source: Source, options: IngestOptions) -> AggregatedCounts:
    """
    Aggregate a raw or pre-aggregated click log and apply the impression filters.

    Args:
        source: A path or an open text / binary stream holding CSV with a header.
        options: Number of positions and filter thresholds.

    Returns:
        AggregatedCounts: Exact counts of the surviving (query, arm, position) cells.

    Raises:
        ValueError: On missing columns, malformed rows (reported with their 1-based line
            number, the header being line 1) or positions outside [1, L].
    """
    frame = _read_log(source)
    columns = set(frame.columns)
    if set(AGGREGATED_LOG_COLUMNS) <= columns:
        value_columns = ["impressions", "clicks"]
    elif set(RAW_LOG_COLUMNS) <= columns:
        value_columns = ["click"]
    else:
        raise ValueError(
            f"Click log header {sorted(columns)} must contain {list(RAW_LOG_COLUMNS)} or "
            f"{list(AGGREGATED_LOG_COLUMNS)}."
        )

    for column in ("query_id", "arm_id"):
        _first_violation(frame[column].str.strip() == "", f"empty {column}")
    parsed = pd.DataFrame(
        {"query_id": frame["query_id"].str.strip(), "arm_id": frame["arm_id"].str.strip()}
    )
    for column in ["position", *value_columns]:
        parsed[column] = _parse_integer_column(frame, column)

    _first_violation(
        ~parsed["position"].between(1, options.num_positions),
        f"position outside [1, {options.num_positions}]",
    )
    if value_columns == ["click"]:
        _first_violation(~parsed["click"].isin([0, 1]), "click must be 0 or 1")
        aggregated = (
            parsed.groupby(_KEY_COLUMNS, sort=True)["click"]
            .agg(impressions="size", clicks="sum")
            .reset_index()
        )
    else:
        _first_violation(
            (parsed["clicks"] < 0) | (parsed["clicks"] > parsed["impressions"]),
            "clicks must lie in [0, impressions]",
        )
        aggregated = parsed.groupby(_KEY_COLUMNS, sort=True)[value_columns].sum().reset_index()

    _logger.info(f"Ingested {len(parsed)} rows into {len(aggregated)} cells.")
    return filter_counts(AggregatedCounts(aggregated, options.num_positions), options)


def _theta_series(theta: Union[pd.Series, Mapping[Tuple[str, str], float]]) -> pd.Series:
    if isinstance(theta, pd.Series):
        return theta
    return pd.Series({(str(query), str(arm)): value for (query, arm), value in theta.items()})


def _cell_probabilities(
    counts: AggregatedCounts, kappa: Any, theta: Union[pd.Series, Mapping]
) -> np.ndarray:
    kappa = np.asarray(kappa, dtype=float)
    if len(kappa) != counts.num_positions:
        raise ValueError(f"Expecting {counts.num_positions} kappa values, got {len(kappa)}.")
    frame = counts.frame
    keys = pd.MultiIndex.from_arrays([frame["query_id"], frame["arm_id"]])
    theta_cells = _theta_series(theta).reindex(keys).to_numpy(dtype=float)
    if np.isnan(theta_cells).any():
        raise ValueError("theta is missing values for some (query_id, arm_id) pairs.")
    return kappa[frame["position"].to_numpy() - 1] * theta_cells


def log_likelihood(
    counts: AggregatedCounts, kappa: Any, theta: Union[pd.Series, Mapping]
) -> float:
    """
    sum over cells of clicks log(kappa_l theta_k) + (impressions - clicks) log(1 - kappa_l theta_k).

    Args:
        counts: The aggregated counts.
        kappa: One examination probability per position.
        theta: Attraction probabilities keyed by (query_id, arm_id).

    Returns:
        float: The log-likelihood; 0 without impressions, -inf when a cell with clicks has
            probability 0 or a cell with non-clicks has probability 1.
    """
    if counts.frame.empty:
        return 0.0
    p = _cell_probabilities(counts, kappa, theta)
    clicks = counts.frame["clicks"].to_numpy(dtype=float)
    misses = counts.frame["impressions"].to_numpy(dtype=float) - clicks
    return float(np.sum(xlogy(clicks, p) + xlogy(misses, 1.0 - p)))


@dataclass
class FitResult:
    """
    Result of an EM fit: shared examination probabilities and one theta per
    (query_id, arm_id), with the impressions each estimate rests on.
    """

    kappa: Tuple[float, ...]
    theta: pd.DataFrame
    log_likelihood: List[float] = field(default_factory=list)
    iterations: int = 0
    converged: bool = False

    def theta_series(self) -> pd.Series:
        return self.theta.set_index(["query_id", "arm_id"])["theta"]

    def summary_table(self) -> pd.DataFrame:
        """Per query: number of arms, number of records and the range of theta."""
        return (
            self.theta.groupby("query_id", sort=True)
            .agg(
                num_arms=("arm_id", "size"),
                records=("impressions", "sum"),
                theta_min=("theta", "min"),
                theta_max=("theta", "max"),
            )
            .reset_index()
        )

    def to_models(self) -> Dict[str, PbmModel]:
        """One PbmModel per query, arms in arm_id order; queries with fewer arms than
        positions are skipped."""
        models = {}
        for query_id, table in self.theta.groupby("query_id", sort=True):
            if len(table) < len(self.kappa):
                _logger.warning(
                    f"Query {query_id!r} has {len(table)} arms, fewer than the "
                    f"{len(self.kappa)} positions; it is left out of the model pool."
                )
                continue
            models[query_id] = PbmModel(theta=tuple(table["theta"]), kappa=self.kappa)
        return models

    def to_dict(self) -> Dict[str, Any]:
        return {
            "kappa": list(self.kappa),
            "theta": [
                {
                    "query_id": row.query_id,
                    "arm_id": row.arm_id,
                    "theta": float(row.theta),
                    "impressions": int(row.impressions),
                }
                for row in self.theta.itertuples(index=False)
            ],
            "log_likelihood": list(self.log_likelihood),
            "iterations": self.iterations,
            "converged": self.converged,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "FitResult":
        theta = pd.DataFrame(data["theta"], columns=["query_id", "arm_id", "theta", "impressions"])
        theta["query_id"] = theta["query_id"].astype(str)
        theta["arm_id"] = theta["arm_id"].astype(str)
        return cls(
            kappa=tuple(float(k) for k in data["kappa"]),
            theta=theta,
            log_likelihood=[float(v) for v in data.get("log_likelihood", [])],
            iterations=int(data.get("iterations", 0)),
            converged=bool(data.get("converged", False)),
        )


def _initial_theta(
    groups: np.ndarray, positions: np.ndarray, impressions: np.ndarray, clicks: np.ndarray
) -> np.ndarray:
    num_groups = int(groups.max()) + 1
    first = positions == 0
    top_impressions = np.bincount(groups[first], weights=impressions[first], minlength=num_groups)
    top_clicks = np.bincount(groups[first], weights=clicks[first], minlength=num_groups)
    global_ctr = clicks.sum() / impressions.sum()
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(top_impressions > 0, top_clicks / top_impressions, global_ctr)


def em_fit(counts: AggregatedCounts, options: Optional[EmFitOptions] = None) -> FitResult:
    """
    Fit kappa (shared by all queries) and theta per (query_id, arm_id) by EM.

    Iterates until the relative log-likelihood improvement falls below `options.tol` or
    `options.max_iters` iterations ran. kappa starts at 1 / l, theta at the arm's
    click-through rate at the first position (the global rate when it was never shown
    there).

    Args:
        counts: The aggregated counts.
        options: Convergence, clamping and fixed-kappa options.

    Returns:
        FitResult: The fitted parameters and the log-likelihood trace, initial value first.

    Raises:
        ValueError: On empty counts, a position without impressions, or a non-finite
            log-likelihood.
    """
    options = options or EmFitOptions()
    if counts.empty:
        raise ValueError("Cannot fit an empty set of counts.")
    frame = counts.frame
    L = counts.num_positions
    positions = frame["position"].to_numpy() - 1
    impressions = frame["impressions"].to_numpy(dtype=float)
    clicks = frame["clicks"].to_numpy(dtype=float)
    misses = impressions - clicks
    position_totals = np.bincount(positions, weights=impressions, minlength=L)
    if (position_totals <= 0).any():
        missing = (np.flatnonzero(position_totals <= 0) + 1).tolist()
        raise ValueError(f"Positions {missing} have no impressions; kappa is not estimable.")

    key_columns = ["query_id", "arm_id"]
    # group numbers follow the sorted key order, as do the rows of `keys`
    groups = frame.groupby(key_columns, sort=True).ngroup().to_numpy(dtype=np.int64)
    keys = (
        frame[key_columns]
        .drop_duplicates()
        .sort_values(key_columns, kind="stable")
        .reset_index(drop=True)
    )
    num_groups = len(keys)
    group_clicks = np.bincount(groups, weights=clicks, minlength=num_groups)

    lo, hi = options.clamp, 1.0 - options.clamp
    if options.fixed_kappa is not None:
        if len(options.fixed_kappa) != L:
            raise ValueError(f"fixed_kappa must have {L} values, got {len(options.fixed_kappa)}.")
        kappa = np.asarray(options.fixed_kappa, dtype=float)
    else:
        kappa = np.clip(1.0 / np.arange(1, L + 1), lo, hi)
    theta = np.clip(_initial_theta(groups, positions, impressions, clicks), lo, hi)

    def likelihood(iteration: int) -> float:
        p = kappa[positions] * theta[groups]
        value = float(np.sum(xlogy(clicks, p) + xlogy(misses, 1.0 - p)))
        if not math.isfinite(value):
            raise ValueError(f"Non-finite log-likelihood {value} at EM iteration {iteration}.")
        return value

    trace = [likelihood(0)]
    converged = False
    iteration = 0
    while iteration < options.max_iters:
        iteration += 1
        p = kappa[positions] * theta[groups]
        with np.errstate(divide="ignore", invalid="ignore"):
            unseen = np.where(p < 1.0, kappa[positions] * (1.0 - theta[groups]) / (1.0 - p), 0.0)
        examined = clicks + misses * unseen
        if options.fixed_kappa is None:
            kappa = np.bincount(positions, weights=examined, minlength=L) / position_totals
            kappa = np.clip(kappa, lo, hi)
        group_examined = np.bincount(groups, weights=examined, minlength=num_groups)
        with np.errstate(divide="ignore", invalid="ignore"):
            theta = np.where(group_examined > 0, group_clicks / group_examined, theta)
        theta = np.clip(theta, lo, hi)
        trace.append(likelihood(iteration))
        if abs(trace[-1] - trace[-2]) <= options.tol * abs(trace[-2]):
            converged = True
            break

    if not converged:
        _logger.warning(f"EM stopped after {iteration} iterations without converging.")
    else:
        _logger.info(f"EM converged after {iteration} iterations, log-likelihood {trace[-1]:.6f}.")
    theta_frame = keys.assign(
        theta=theta,
        impressions=np.bincount(groups, weights=impressions, minlength=num_groups).astype(np.int64),
    )
    return FitResult(
        kappa=tuple(float(k) for k in kappa),
        theta=theta_frame,
        log_likelihood=trace,
        iterations=iteration,
        converged=converged,
    )


def _fit_one(args: Tuple[AggregatedCounts, EmFitOptions]) -> FitResult:
    counts, options = args
    return em_fit(counts, options)


def em_fit_queries(
    counts: AggregatedCounts,
    options: Optional[EmFitOptions] = None,
    workers: Optional[int] = None,
) -> Dict[str, FitResult]:
    """
    Fit every query independently, each with its own kappa.

    Args:
        counts: The aggregated counts.
        options: EM options shared by every fit.
        workers: Worker processes. Defaults to PBM_BANDITS_NUM_WORKERS.

    Returns:
        Dict[str, FitResult]: One fit per query id, in query order.
    """
    options = options or EmFitOptions()
    workers = workers or PBM_BANDITS_NUM_WORKERS.get_int()
    queries = counts.queries()
    jobs = [(counts.for_query(query), options) for query in queries]
    if workers <= 1 or len(jobs) <= 1:
        fits = [_fit_one(job) for job in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as executor:
            fits = list(executor.map(_fit_one, jobs))
    return dict(zip(queries, fits))
