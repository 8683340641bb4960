import json
import logging
import math
import os
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Sequence, Union

import numpy as np
import pandas as pd
import yaml

from pbmbandits.core.model import PRESETS, PbmModel
from pbmbandits.core.stats import CounterSet
from pbmbandits.core.utils.config import COUNTERS_COLUMNS

_logger = logging.getLogger(__name__)

PathLike = Union[str, os.PathLike]

CSV_FLOAT_FORMAT = "%.12g"


def load_structured_file(path: PathLike) -> Dict[str, Any]:
    """
    Parse a YAML or JSON file (YAML is a superset of JSON) into a mapping.
    """
    try:
        with open(path) as f:
            data = yaml.safe_load(f)
    except yaml.YAMLError as e:
        raise ValueError(f"Failed to parse {path}: {e}") from e
    if not isinstance(data, dict):
        raise ValueError(f"Expecting a mapping at the top level of {path}, got {type(data)}.")
    return data


def load_model(source: PathLike) -> PbmModel:
    """
    Load a model from a file with fields `K`, `L`, `theta`, `kappa`, or a preset name.
    """
    if Path(source).is_file():
        return PbmModel.from_mapping(load_structured_file(source))
    if model := PRESETS.get(str(source)):
        return model
    raise ValueError(
        f"{source} is neither a model file nor a preset; available presets: {sorted(PRESETS)}."
    )


def load_counters(
    path: PathLike, kappa: Sequence[float], num_arms: Optional[int] = None
) -> CounterSet:
    """
    Read counters from a CSV `arm,position,plays,clicks` with 1-based arms and positions.
    Missing (arm, position) cells count zero; K defaults to the largest arm in the file.
    """
    frame = pd.read_csv(path)
    missing = set(COUNTERS_COLUMNS) - set(frame.columns)
    if missing:
        raise ValueError(f"Counters file {path} is missing columns {sorted(missing)}.")
    if num_arms is None:
        num_arms = int(frame["arm"].max()) if len(frame) else 0
    plays = np.zeros((num_arms, len(kappa)), dtype=np.int64)
    clicks = np.zeros_like(plays)
    for row in frame.itertuples(index=False):
        arm, position = int(row.arm) - 1, int(row.position) - 1
        if not (0 <= arm < num_arms and 0 <= position < len(kappa)):
            raise ValueError(
                f"Counters file {path} has a cell (arm={row.arm}, position={row.position}) "
                f"outside [1, {num_arms}] x [1, {len(kappa)}]."
            )
        plays[arm, position] += int(row.plays)
        clicks[arm, position] += int(row.clicks)
    return CounterSet(kappa, num_arms, plays, clicks)


def ensure_directory(path: PathLike) -> Path:
    directory = Path(path)
    try:
        directory.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise ValueError(f"Cannot create output directory {directory}: {e}") from e
    if not os.access(directory, os.W_OK):
        raise ValueError(f"Output directory {directory} is not writable.")
    return directory


def to_jsonable(value: Any) -> Any:
    """Convert numpy scalars and arrays to Python values; non-finite floats become None."""
    if isinstance(value, Mapping):
        return {str(k): to_jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple, np.ndarray)):
        return [to_jsonable(v) for v in value]
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, (float, np.floating)):
        value = float(value)
        return value if math.isfinite(value) else None
    return value


def dumps_json(data: Any) -> str:
    return json.dumps(to_jsonable(data), indent=2, sort_keys=True) + "\n"


def write_json(path: PathLike, data: Any) -> None:
    try:
        with open(path, "w") as f:
            f.write(dumps_json(data))
    except OSError as e:
        raise ValueError(f"Cannot write {path}: {e}") from e


def write_csv(path: PathLike, frame: pd.DataFrame) -> None:
    try:
        frame.to_csv(path, index=False, float_format=CSV_FLOAT_FORMAT, lineterminator="\n")
    except OSError as e:
        raise ValueError(f"Cannot write {path}: {e}") from e
