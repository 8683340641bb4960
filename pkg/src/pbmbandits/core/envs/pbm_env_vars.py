import os


class _EnvironmentVariable:
    def __init__(self, name: str, default_value: str, description: str):
        self.name = name
        self.default_value = str(default_value)
        self.description = description

    def get(self) -> str:
        return os.getenv(self.name, self.default_value)

    def get_int(self) -> int:
        value = self.get()
        try:
            return int(value)
        except ValueError as e:
            raise ValueError(
                f"Environment variable {self.name} must be an integer, got {value!r}."
            ) from e

    def set(self, value: str) -> None:
        os.environ[self.name] = str(value)

    def remove(self) -> None:
        os.environ.pop(self.name, None)

    def __repr__(self) -> str:
        return f"Environment variable for {self.name}. Default value: {self.default_value}. " + (
            f"Usage: {self.description}" if self.description else ""
        )


PBM_BANDITS_NUM_WORKERS = _EnvironmentVariable(
    "PBM_BANDITS_NUM_WORKERS",
    "1",
    "Default number of worker processes used to run replications of `simulate` and per-query "
    "EM fits; the `--threads` flag of the command line takes precedence.",
)
PBM_BANDITS_LOG_LEVEL = _EnvironmentVariable(
    "PBM_BANDITS_LOG_LEVEL",
    "WARNING",
    "Logging level configured by the command line when `--log-level` is not given.",
)
PBM_BANDITS_MAX_REJECTIONS = _EnvironmentVariable(
    "PBM_BANDITS_MAX_REJECTIONS",
    "10000",
    "Number of rejected proposals after which the posterior sampler falls back to "
    "inverse-CDF sampling on a grid of the exact density.",
)
