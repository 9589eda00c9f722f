"""Config-driven orchestration: pretrain, eval, analyze, ablate, report."""

from .config import ExperimentConfig, load_config, parse_config
from .main import main
from .report import cmd_report, write_report
from .runner import cmd_ablate, cmd_analyze, cmd_eval, cmd_pretrain

__all__ = [
    "ExperimentConfig",
    "cmd_ablate",
    "cmd_analyze",
    "cmd_eval",
    "cmd_pretrain",
    "cmd_report",
    "load_config",
    "main",
    "parse_config",
    "write_report",
]
