"""Model generators, oracle comparison runs, count tables and the CLI."""
from .counting import count_table
from .experiment import ExperimentConfig, RunResult, compare_runs, write_outputs
from .models import (
    PixelObservation,
    clustered_locations,
    generate_diffusion_model,
    generate_model,
    generate_pixel_observation,
    generate_random_stable_model,
    simulate_truth,
    sine_basis,
    uniform_locations,
)

__all__ = [
    "ExperimentConfig", "PixelObservation", "RunResult", "clustered_locations", "compare_runs",
    "count_table", "generate_diffusion_model", "generate_model", "generate_pixel_observation",
    "generate_random_stable_model", "simulate_truth", "sine_basis", "uniform_locations",
    "write_outputs",
]
