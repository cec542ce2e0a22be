import json
import logging
from datetime import datetime, timezone

from .config import get_config

_PLAIN_FORMAT = "%(asctime)s %(levelname)s %(name)s %(message)s"


class JsonFormatter(logging.Formatter):
    def format(self, record: logging.LogRecord) -> str:
        base = {
            "ts": datetime.now(timezone.utc).isoformat().replace("+00:00", "Z"),
            "level": record.levelname,
            "msg": record.getMessage(),
            "logger": record.name,
        }
        if hasattr(record, "run_id"):
            base["run_id"] = getattr(record, "run_id")
        if hasattr(record, "stage"):
            base["stage"] = getattr(record, "stage")
        if record.exc_info:
            base["exc"] = self.formatException(record.exc_info)
        return json.dumps(base, ensure_ascii=False)


def configure_logging(level: str | None = None, structured: bool | None = None) -> None:
    """Install a single root handler; plain text unless STRUCTURED_LOGGING=1."""
    cfg = get_config()
    level = (level or cfg.LOG_LEVEL).upper()
    structured = cfg.STRUCTURED_LOGGING if structured is None else structured

    handler = logging.StreamHandler()
    handler.setFormatter(JsonFormatter() if structured else logging.Formatter(_PLAIN_FORMAT))
    root = logging.getLogger()
    root.handlers = [handler]
    root.setLevel(getattr(logging, level, logging.INFO))
    # PIL is chatty at DEBUG
    logging.getLogger("PIL").setLevel(logging.WARNING)
    logging.getLogger("matplotlib").setLevel(logging.WARNING)
