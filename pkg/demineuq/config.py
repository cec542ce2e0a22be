import os
from dataclasses import dataclass, field

from dotenv import load_dotenv

load_dotenv()


def _env_flag(name: str) -> bool:
    return os.getenv(name, "0").strip().lower() in ("1", "true", "yes")


@dataclass
class Config:
    OUTPUT_DIR: str = field(default_factory=lambda: os.getenv("UQ_OUTPUT_DIR", "runs"))
    LOG_LEVEL: str = field(default_factory=lambda: os.getenv("UQ_LOG_LEVEL", "INFO").upper())
    STRUCTURED_LOGGING: bool = field(default_factory=lambda: _env_flag("STRUCTURED_LOGGING"))
    DEVICE: str = field(default_factory=lambda: os.getenv("UQ_DEVICE", "cpu"))
    OFFLINE: bool = field(default_factory=lambda: _env_flag("UQ_OFFLINE"))
    PRETRAINED_RETRIES: int = field(default_factory=lambda: int(os.getenv("UQ_PRETRAINED_RETRIES", "3")))


def get_config() -> "Config":
    return Config()
