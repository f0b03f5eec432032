"""Hybrid diffusion augmentation for breast ultrasound classification."""

from ._busaug import (
    ARMS,
    LABELS,
    BusaugError,
    ConfigError,
    DataError,
    Experiment,
    RuntimeError,
    UsageError,
    balance_plan,
    compute_metrics,
    ddim_timesteps,
    fid,
    fid_stats,
    generate_phantom,
    make_schedule,
    matrix_sqrt_psd,
    parse_config,
    render_report,
    run_all,
    split_counts,
)

__all__ = [
    "ARMS",
    "LABELS",
    "BusaugError",
    "ConfigError",
    "DataError",
    "Experiment",
    "RuntimeError",
    "UsageError",
    "balance_plan",
    "compute_metrics",
    "ddim_timesteps",
    "fid",
    "fid_stats",
    "generate_phantom",
    "make_schedule",
    "matrix_sqrt_psd",
    "parse_config",
    "render_report",
    "run_all",
    "split_counts",
]
