"""Session engine for coordinator-led bilingual collaborative storytelling."""

from importlib import resources
from pathlib import Path

__version__ = "0.1.0"


def default_templates_dir() -> Path:
    return Path(resources.files("storyloom") / "templates")


def default_guidelines_dir() -> Path:
    return Path(resources.files("storyloom") / "guidelines")


def demo_data_dir() -> Path:
    return Path(resources.files("storyloom") / "data" / "zoo")
