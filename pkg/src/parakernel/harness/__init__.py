from .config import ConfigError, RunConfig, load_config, parse_config
from .report import Criterion, Report, ReportError, write_report

__all__ = [
    "ConfigError", "RunConfig", "load_config", "parse_config",
    "Criterion", "Report", "ReportError", "write_report",
]
