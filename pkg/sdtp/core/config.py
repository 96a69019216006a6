"""Application configuration settings."""

import typing as t
from pathlib import Path

import numpy as np
from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    """Process-wide settings loaded from environment variables."""

    model_config = SettingsConfigDict(
        env_prefix="SDTP_",
        env_file=".env",
        env_file_encoding="utf-8",
        extra="ignore",
    )

    # Application
    app_name: str = "sdtp"
    app_version: str = "0.1.0"
    debug: bool = False

    # Numerics
    precision: t.Literal["float32", "float64"] = (
        "float32"  # 64-bit is reserved for gradient checks
    )

    # Outputs
    output_root: Path = Path("./runs")
    log_every: int = 10  # Training steps between progress log lines

    @property
    def dtype(self) -> np.dtype:
        """NumPy dtype matching the configured precision.

        Returns:
            np.dtype: The run-wide floating point dtype.
        """
        return np.dtype(self.precision)


SETTINGS = Settings()
