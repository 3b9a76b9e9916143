from functools import lru_cache

from pydantic import Field
from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    log_level: str = Field(default="INFO")
    # относительно 1 + ||x||
    member_gap_tol: float = Field(default=1e-9, gt=0.0)
    step_rtol: float = Field(default=1e-12, ge=0.0, le=1e-6)
    max_flow_steps: int = Field(default=5_000_000, ge=1)
    max_schedule_terms: int = Field(default=50_000_000, ge=1)
    max_pairs: int = Field(default=1000, ge=1)
    construction_trials: int = Field(default=1000, ge=1)
    csv_digits: int = Field(default=17, ge=1, le=17)
    jobs: int = Field(default=1, ge=1, le=64)
    output_dir: str = Field(default="results")

    model_config = SettingsConfigDict(
        env_prefix="FBFLOW_",
        env_file=".env",
        env_file_encoding="utf-8",
        case_sensitive=False,
        extra="ignore",
    )


@lru_cache
def get_settings() -> Settings:
    return Settings()


settings = get_settings()
