"""Task-masked projected diffusion for procedure planning."""

__all__ = [
    "ablation",
    "artifacts",
    "checkpoint",
    "classifier",
    "cli",
    "configuration",
    "diffusion",
    "masking",
    "nn",
    "optim",
    "planner",
    "streams",
    "tensor",
    "trainer",
    "unet",
    "world",
]

__version__ = "0.1.0"
