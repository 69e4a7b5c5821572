"""Central jax import: every module gets float64 and CPU-friendly defaults."""

import jax
import jax.numpy as jnp

jax.config.update("jax_enable_x64", True)

__all__ = ["jax", "jnp"]
