"""Delayed dynamic output-feedback design for multi-frequency vibration suppression."""

from delayfb.model import (
    DdaeSystem,
    DisturbanceSpec,
    FeedbackConfig,
    GainMatrix,
    PlantModel,
    PlantParams,
    assemble_ddae,
    build_plant,
    realize_controller,
)

__version__ = "0.1.0"

__all__ = [
    "DdaeSystem",
    "DisturbanceSpec",
    "FeedbackConfig",
    "GainMatrix",
    "PlantModel",
    "PlantParams",
    "assemble_ddae",
    "build_plant",
    "realize_controller",
]
