"""
Seeded multi-replication experiments and their exports.

Each (policy, replication) pair is an independent work item whose random stream is
derived from (base_seed, replication, policy label) alone, so serial and parallel runs
produce identical results.
"""

import logging
import re
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, PrivateAttr, model_validator

from pbmbandits.core.bound import BoundReport, regret_lower_bound
from pbmbandits.core.emfit import FitResult
from pbmbandits.core.envs.pbm_env_vars import PBM_BANDITS_NUM_WORKERS
from pbmbandits.core.model import PRESETS, PbmModel, gap, sample_feedback
from pbmbandits.core.policies import LabeledPolicyConfig, PbmTsPolicy, build_policy
from pbmbandits.core.posterior import SamplerDiagnostics
from pbmbandits.core.utils.config import (
    DEFAULT_CHECKPOINTS,
    DEFAULT_HORIZON,
    DEFAULT_REPLICATIONS,
    MAX_ABORTED_FRACTION,
    REGRET_CSV_COLUMNS,
)
from pbmbandits.core.utils.io_utils import (
    PathLike,
    ensure_directory,
    load_structured_file,
    write_csv,
    write_json,
)
from pbmbandits.core.utils.seed_utils import derive_seed, make_rng

_logger = logging.getLogger(__name__)

MODEL_POOL_STREAM = "model-pool"
_LABEL_PATTERN = re.compile(r"^[A-Za-z0-9_.-]+$")


def load_model_pool(path: PathLike) -> List[PbmModel]:
    """
    Models of a fit file: either a single fit (shared kappa, one theta table per query) or
    a per-query file `{"queries": {query_id: fit}}`. Models are returned in query order.
    """
    data = load_structured_file(path)
    if "queries" in data:
        models = []
        for query_id in sorted(data["queries"]):
            models.extend(FitResult.from_dict(data["queries"][query_id]).to_models().values())
    else:
        models = list(FitResult.from_dict(data).to_models().values())
    if not models:
        raise ValueError(f"The fit file {path} yields an empty model pool.")
    return models


class ExperimentConfig(BaseModel):
    """
    An experiment: a problem source, the policies to compare and the run sizes.

    Exactly one of `model`, `preset` and `model_pool` must be given. In pool mode each
    replication draws its model uniformly from the pool.
    """

    model: Optional[PbmModel] = Field(default=None, description="An inline model")
    preset: Optional[str] = Field(default=None, description="Name of a model preset")
    model_pool: Optional[str] = Field(default=None, description="Path to an EM fit file")
    policies: List[LabeledPolicyConfig] = Field(min_length=1)
    horizon: int = Field(default=DEFAULT_HORIZON, ge=1, description="Horizon T")
    replications: int = Field(default=DEFAULT_REPLICATIONS, ge=1, description="Replications R")
    base_seed: int = Field(default=0, ge=0, lt=2**64)
    checkpoints: int = Field(default=DEFAULT_CHECKPOINTS, ge=1)
    output_dir: Optional[str] = None
    record_runtime: bool = Field(
        default=False,
        description="Write the wall-clock runtime to the summary, which breaks byte equality",
    )

    model_config = ConfigDict(frozen=True, extra="forbid")

    _models: List[PbmModel] = PrivateAttr()

    @model_validator(mode="after")
    def validate_experiment(self) -> "ExperimentConfig":
        sources = [s for s in (self.model, self.preset, self.model_pool) if s is not None]
        if len(sources) != 1:
            raise ValueError("Exactly one of model, preset and model_pool must be given.")
        names = [policy.name for policy in self.policies]
        if len(set(names)) != len(names):
            raise ValueError(f"Policy labels must be unique, got {names}.")
        for name in names:
            if not _LABEL_PATTERN.match(name):
                raise ValueError(
                    f"Invalid policy label {name!r}: use letters, digits, '_', '.' or '-'."
                )
        if self.preset is not None and self.preset not in PRESETS:
            raise ValueError(f"Unknown model preset: {self.preset}. Available: {sorted(PRESETS)}.")

        if self.model is not None:
            models = [self.model]
        elif self.preset is not None:
            models = [PRESETS[self.preset]]
        else:
            models = load_model_pool(self.model_pool)
        if (max_arms := max(model.num_arms for model in models)) > self.horizon:
            raise ValueError(
                f"Horizon T={self.horizon} is shorter than the {max_arms} initialization rounds."
            )
        self._models = models
        return self

    @property
    def models(self) -> List[PbmModel]:
        return self._models

    @property
    def pool_mode(self) -> bool:
        return self.model_pool is not None


def checkpoint_grid(horizon: int, count: int) -> np.ndarray:
    """At most `count` distinct log-spaced integers in [1, horizon], horizon included."""
    grid = np.unique(np.round(np.geomspace(1, horizon, count)).astype(np.int64))
    if grid[-1] != horizon:
        grid = np.append(grid, horizon)
    return grid


@dataclass
class RegretCurve:
    """
    Cumulative pseudo-regret of every completed replication at the checkpoints.
    """

    checkpoints: np.ndarray
    regret: np.ndarray
    seeds: List[int] = field(default_factory=list)
    aborted: List[str] = field(default_factory=list)
    sampler: Optional[SamplerDiagnostics] = None

    @property
    def mean(self) -> np.ndarray:
        return self.regret.mean(axis=0)

    @property
    def decile_10(self) -> np.ndarray:
        return np.quantile(self.regret, 0.1, axis=0)

    @property
    def decile_90(self) -> np.ndarray:
        return np.quantile(self.regret, 0.9, axis=0)

    @property
    def final_mean(self) -> float:
        return float(self.mean[-1])

    def to_frame(self) -> pd.DataFrame:
        columns = dict(
            zip(
                REGRET_CSV_COLUMNS,
                (self.checkpoints, self.mean, self.decile_10, self.decile_90),
            )
        )
        return pd.DataFrame(columns)


@dataclass
class ReplicationOutcome:
    label: str
    replication: int
    seed: int
    regret: Optional[np.ndarray] = None
    error: Optional[str] = None
    sampler: Optional[SamplerDiagnostics] = None


def run_replication(
    policy_config: LabeledPolicyConfig,
    model: PbmModel,
    horizon: int,
    checkpoints: np.ndarray,
    seed: int,
) -> Tuple[np.ndarray, Optional[SamplerDiagnostics]]:
    """
    Run one policy for `horizon` rounds and record cumulative pseudo-regret.

    Returns:
        Tuple[np.ndarray, Optional[SamplerDiagnostics]]: Regret at each checkpoint, and the
            posterior sampler counters for policies that use it.
    """
    rng = np.random.default_rng(seed)
    policy = build_policy(policy_config, model.kappa, model.num_arms)
    gaps: Dict[Tuple[int, ...], float] = {}
    regret = np.empty(len(checkpoints))
    cumulative = 0.0
    next_checkpoint = 0
    for t in range(1, horizon + 1):
        action = policy.select_action(rng)
        feedback = sample_feedback(model, action, rng)
        if (action_gap := gaps.get(action.arms)) is None:
            action_gap = gaps[action.arms] = gap(model, action)
        cumulative += action_gap
        policy.update(action, feedback)
        if t == checkpoints[next_checkpoint]:
            regret[next_checkpoint] = cumulative
            next_checkpoint += 1
    sampler = policy.diagnostics if isinstance(policy, PbmTsPolicy) else None
    return regret, sampler


def _run_work_item(item: Tuple[ExperimentConfig, LabeledPolicyConfig, int]) -> ReplicationOutcome:
    config, policy_config, replication = item
    seed = derive_seed(config.base_seed, replication, policy_config.name)
    models = config.models
    if config.pool_mode:
        pool_rng = make_rng(config.base_seed, replication, MODEL_POOL_STREAM)
        model = models[int(pool_rng.integers(len(models)))]
    else:
        model = models[0]
    checkpoints = checkpoint_grid(config.horizon, config.checkpoints)
    try:
        regret, sampler = run_replication(policy_config, model, config.horizon, checkpoints, seed)
    except Exception as e:
        _logger.warning(
            f"Replication {replication} of {policy_config.name} aborted: {e!r}", exc_info=True
        )
        return ReplicationOutcome(policy_config.name, replication, seed, error=repr(e))
    return ReplicationOutcome(policy_config.name, replication, seed, regret, sampler=sampler)


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    curves: Dict[str, RegretCurve]
    reference_f_theta: float
    bound: Optional[BoundReport] = None
    runtime_seconds: Optional[float] = None


def run_experiment(config: ExperimentConfig, workers: Optional[int] = None) -> ExperimentResult:
    """
    Run every (policy, replication) work item and aggregate regret curves.

    Args:
        config: The experiment configuration.
        workers: Number of worker processes. Defaults to PBM_BANDITS_NUM_WORKERS.

    Returns:
        ExperimentResult: One RegretCurve per policy label and the lower-bound reference.

    Raises:
        RuntimeError: If more than 1% of the replications of some policy aborted.
    """
    workers = workers or PBM_BANDITS_NUM_WORKERS.get_int()
    started = time.perf_counter()
    items = [
        (config, policy, replication)
        for policy in config.policies
        for replication in range(config.replications)
    ]
    _logger.info(
        f"Running {len(config.policies)} policies x {config.replications} replications "
        f"up to T={config.horizon} with {workers} worker(s)."
    )
    if workers <= 1:
        outcomes = [_run_work_item(item) for item in items]
    else:
        chunksize = max(1, len(items) // (4 * workers))
        with ProcessPoolExecutor(max_workers=workers) as executor:
            outcomes = list(executor.map(_run_work_item, items, chunksize=chunksize))

    checkpoints = checkpoint_grid(config.horizon, config.checkpoints)
    curves: Dict[str, RegretCurve] = {}
    for policy in config.policies:
        mine = sorted(
            (o for o in outcomes if o.label == policy.name), key=lambda o: o.replication
        )
        completed = [o for o in mine if o.error is None]
        aborted = [f"replication {o.replication}: {o.error}" for o in mine if o.error is not None]
        if len(aborted) > MAX_ABORTED_FRACTION * config.replications:
            raise RuntimeError(
                f"{len(aborted)} of {config.replications} replications of {policy.name} "
                f"aborted: {aborted}"
            )
        samplers = [o.sampler for o in completed if o.sampler is not None]
        sampler = None
        if samplers:
            sampler = SamplerDiagnostics()
            for s in samplers:
                sampler = sampler.merge(s)
        curves[policy.name] = RegretCurve(
            checkpoints=checkpoints,
            regret=np.array([o.regret for o in completed]),
            seeds=[o.seed for o in completed],
            aborted=aborted,
            sampler=sampler,
        )

    if config.pool_mode:
        reports = [regret_lower_bound(model) for model in config.models]
        reference = float(np.mean([report.f_theta for report in reports]))
        bound = None
    else:
        bound = regret_lower_bound(config.models[0])
        reference = bound.f_theta
    runtime = time.perf_counter() - started
    _logger.info(f"Experiment finished in {runtime:.1f}s.")
    return ExperimentResult(
        config=config,
        curves=curves,
        reference_f_theta=reference,
        bound=bound,
        runtime_seconds=runtime if config.record_runtime else None,
    )


def reference_curve(f_theta: float, ts: Sequence[int], column: str = "lower_bound") -> pd.DataFrame:
    """The asymptotic lower-bound curve f(theta) log t."""
    ts = np.asarray(ts)
    return pd.DataFrame({"t": ts, column: f_theta * np.log(ts)})


def summarize(result: ExperimentResult) -> Dict[str, Any]:
    """The JSON summary: config echo, seeds, final regrets, bound values, diagnostics."""
    policies = {}
    for label, curve in result.curves.items():
        policies[label] = {
            "seeds": curve.seeds,
            "completed": len(curve.seeds),
            "aborted": curve.aborted,
            "final_mean_regret": curve.final_mean,
            "final_decile_10": float(curve.decile_10[-1]),
            "final_decile_90": float(curve.decile_90[-1]),
        }
        if curve.sampler is not None:
            policies[label]["sampler"] = curve.sampler.to_dict()
    summary: Dict[str, Any] = {
        "config": result.config.model_dump(mode="json"),
        "policies": policies,
        "bound": {"f_theta": result.reference_f_theta},
    }
    if result.bound is not None:
        summary["bound"] = result.bound.to_dict()
    if result.runtime_seconds is not None:
        summary["runtime_seconds"] = result.runtime_seconds
    return summary


def export(result: ExperimentResult, output_dir: PathLike) -> List[Path]:
    """
    Write one `<label>.csv` per policy (`t,mean_regret,decile_10,decile_90`), `summary.json`
    and `reference.csv` (`t,lower_bound`).

    Returns:
        List[Path]: The files written.

    Raises:
        ValueError: If the directory cannot be created or written.
    """
    directory = ensure_directory(output_dir)
    written = []
    for label, curve in result.curves.items():
        path = directory / f"{label}.csv"
        write_csv(path, curve.to_frame())
        written.append(path)
    checkpoints = checkpoint_grid(result.config.horizon, result.config.checkpoints)
    reference_path = directory / "reference.csv"
    write_csv(reference_path, reference_curve(result.reference_f_theta, checkpoints))
    summary_path = directory / "summary.json"
    write_json(summary_path, summarize(result))
    written.extend([reference_path, summary_path])
    _logger.info(f"Wrote {len(written)} files to {directory}.")
    return written
