"""Desk-scale joint latent/class-token denoising on a stochastic-interpolant stack."""

from regdesk.schedule import LinearSchedule, noise, score_from_velocity, velocity_target

__version__ = "0.1.0"

__all__ = [
    "LinearSchedule",
    "noise",
    "score_from_velocity",
    "velocity_target",
    "__version__",
]
