"""Multi-UAV markerless motion capture: body-relative cameras, decentralized fusion,
timing simulation and offline sequence refinement."""

import jax

# every module computes in double precision; set before any array is built
jax.config.update("jax_enable_x64", True)

__version__ = "0.1.0"
