"""Configuration, dataset manifests, run orchestration and the CLI."""

from .config import ConfigError, RunSpec, parse_config
from .datasets import DatasetManifest, load_manifest, resolve_dataset
from .registry import get_baseline, register_baseline, registered_baselines
from .runner import RunContext, run_batch, run_single, run_wta

__all__ = [
    "ConfigError", "DatasetManifest", "RunContext", "RunSpec", "get_baseline", "load_manifest",
    "parse_config", "register_baseline", "registered_baselines", "resolve_dataset", "run_batch",
    "run_single", "run_wta",
]
