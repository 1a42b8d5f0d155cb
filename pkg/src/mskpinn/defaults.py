"""Bundled synthetic limb and muscle model."""

from __future__ import annotations

from importlib import resources
from pathlib import Path

from .dynamics import LimbModel, load_limb_model
from .muscle import MuscleSet, load_muscle_set

__all__ = ["data_path", "default_limb_model", "default_muscle_set"]


def data_path(name: str) -> Path:
    return Path(str(resources.files("mskpinn") / "data" / name))


def default_limb_model() -> LimbModel:
    return load_limb_model(data_path("limb.cfg"))


def default_muscle_set() -> MuscleSet:
    return load_muscle_set(data_path("muscles.csv"), data_path("geometry.cfg"))
