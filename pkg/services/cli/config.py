"""Process-level CLI settings via environment variables."""

from __future__ import annotations

from pathlib import Path

from pydantic_settings import BaseSettings


class CliSettings(BaseSettings):
    service_name: str = "dmada"
    version: str = "0.1.0"
    log_level: str = "INFO"
    log_json: bool = True

    # Default parent directory for run and dataset outputs
    output_root: Path = Path("runs")

    # Worker processes for ablate (1 = in-process)
    ablation_workers: int = 1

    model_config = {"env_prefix": "DMADA_"}


settings = CliSettings()
