from .lorenz import LorenzParams, lorenz_rhs, lorenz_system
from .rijke import (
    RijkeModel,
    RijkeParams,
    acoustic_energy,
    cheb,
    heat_release,
    rayleigh_index,
    rijke_system,
)

__all__ = [
    "LorenzParams",
    "lorenz_rhs",
    "lorenz_system",
    "RijkeModel",
    "RijkeParams",
    "acoustic_energy",
    "cheb",
    "heat_release",
    "rayleigh_index",
    "rijke_system",
]
