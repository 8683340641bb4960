import math

DEFAULT_EPSILON = 0.01
DEFAULT_CHECKPOINTS = 50
DEFAULT_HORIZON = 100_000
DEFAULT_REPLICATIONS = 200

# fraction of aborted replications above which an experiment fails
MAX_ABORTED_FRACTION = 0.01

# indices
THETA_MIN_XTOL = 1e-10
INDEX_XTOL = 1e-12
KLUCB_MAX_ITERS = 50
KLUCB_XTOL = 1e-13

# posterior sampler
ENVELOPE_XTOL = 1e-14
ENVELOPE_MARGIN = math.log(1.05)
FALLBACK_GRID_SIZE = 8192

# EM
EM_MAX_ITERS = 500
EM_TOL = 1e-8
EM_CLAMP = 1e-6
MIN_IMPRESSIONS = 1000
MIN_ARMS = 5

RAW_LOG_COLUMNS = ("query_id", "arm_id", "position", "click")
AGGREGATED_LOG_COLUMNS = ("query_id", "arm_id", "position", "impressions", "clicks")
COUNTERS_COLUMNS = ("arm", "position", "plays", "clicks")
REGRET_CSV_COLUMNS = ("t", "mean_regret", "decile_10", "decile_90")
