"""Command-line interface."""
from .config import ConfigError, RunConfig, parse_config_text, validate_config
from .main import main
