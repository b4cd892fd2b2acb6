"""Numerical laboratory for delayed forward-backward stochastic control."""
from .errors import *  # noqa: F401,F403
from .grid_paths import (BrownianBundle, PathMatrix, TimeGrid, build_grid, delay_features,
                         distributed_delay, sample_brownian)
from .model_spec import ControlProcess, ModelSpec, spike_control, validate_assumptions
from .models import BUILTINS, get_model

__version__ = "0.1.0"
