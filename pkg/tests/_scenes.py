"""Seeded synthetic underwater scenes shared by the test modules."""

import numpy as np

from aquathru.formation import WaterParams


def range_field(rng, size, z_near=1.0, z_far=7.0):
    """Smooth range map: a random tilted plane plus low-frequency bumps."""
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1)
    a = rng.uniform(0, 2 * np.pi)
    t = np.cos(a) * (xx - 0.5) + np.sin(a) * (yy - 0.5)
    for _ in range(3):
        fx, fy = rng.integers(1, 3, size=2)
        t = t + rng.uniform(-0.1, 0.1) * np.sin(2 * np.pi * (fx * xx + rng.uniform())) * np.cos(
            2 * np.pi * (fy * yy + rng.uniform())
        )
    t = (t - t.min()) / (t.max() - t.min())
    return z_near + (z_far - z_near) * t


def water_params(rng):
    veil = rng.uniform([0.05, 0.2, 0.3], [0.15, 0.4, 0.5])
    beta_b = rng.uniform([0.6, 0.25, 0.15], [1.2, 0.5, 0.35])
    beta_d = rng.uniform([0.4, 0.1, 0.05], [0.7, 0.25, 0.15])
    return WaterParams(veil, beta_b, beta_d)


def make_scene(seed, size=64, chroma=0.2):
    """Clean image, range map (1-7 m) and water parameters for one seed.

    The clean image is a per-pixel luminance texture in [0, 1] with mild
    per-channel variation, so every range bin holds near-black pixels and
    the local mean reflectance is close to one half.
    """
    rng = np.random.default_rng(seed)
    z = range_field(rng, size)
    lum = rng.uniform(0, 1, (size, size, 1))
    clean = np.clip(lum * (1 + rng.uniform(-chroma, chroma, (size, size, 3))), 0, 1)
    return clean, z, water_params(rng)


def psnr(a, b):
    mse = float(np.mean((np.asarray(a) - np.asarray(b)) ** 2))
    return float("inf") if mse == 0 else 10 * np.log10(1.0 / mse)
