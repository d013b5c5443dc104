"""Python bindings for the incseg class-incremental segmentation toolkit."""

from ._incseg import (
    IncsegError,
    assd,
    coverage_objective,
    dice,
    generate_volume,
    greedy_max_coverage,
    resolve_config,
    run_cli,
    version,
)

__all__ = [
    "IncsegError",
    "assd",
    "coverage_objective",
    "dice",
    "generate_volume",
    "greedy_max_coverage",
    "resolve_config",
    "run_cli",
    "version",
]
