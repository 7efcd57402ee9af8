"""Smooth synthetic fields for benchmarks and compression checks."""

import numpy as np

from mgrefactor.models.tensorgrid import TensorGrid, uniform_coords


def sine_product(shape, precision="f64", frequency=1.0, coords=None):
    """prod_d sin(pi * frequency * x_d) on [0, 1]^D."""
    coords = coords or [uniform_coords(n) for n in shape]
    mesh = np.meshgrid(*coords, indexing="ij")
    values = np.ones(tuple(shape))
    for x in mesh:
        values = values * np.sin(np.pi * frequency * x)
    return TensorGrid(values, coords=coords, precision=precision)


def reaction_diffusion(shape, blobs=6, width=0.08, seed=0, precision="f64"):
    """Gray-Scott-like pattern: smooth Gaussian spots on a flat background.

    Resembles the V concentration of a reaction-diffusion run after the
    spots have formed.
    """
    rng = np.random.default_rng(seed)
    coords = [uniform_coords(n) for n in shape]
    mesh = np.meshgrid(*coords, indexing="ij")
    values = np.zeros(tuple(shape))
    for _ in range(blobs):
        center = rng.uniform(0.2, 0.8, size=len(shape))
        amplitude = rng.uniform(0.2, 0.45)
        r2 = sum((x - c) ** 2 for x, c in zip(mesh, center))
        values += amplitude * np.exp(-r2 / (2.0 * width**2))
    return TensorGrid(np.tanh(values), coords=coords, precision=precision)
