"""Single-shot HDR: spatially varying exposure simulation and reconstruction.

A per-pixel optical gain o_p multiplies the exposure of each sensor pixel, so
one raw capture samples the scene at several exposure levels. Saturated and
under-exposed pixels carry no irradiance information; the remaining pixels are
mapped to the irradiance domain, where their noise has a known per-pixel
variance, and the restoration pipeline simultaneously denoises the usable
pixels and fills the rest.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from scipy.ndimage import uniform_filter

from .degrade import RestorationProblem
from .solver import restore_detailed, smooth_fill

VAR_FLOOR = 1e-8


def _rng(seed):
    return np.random.Generator(np.random.Philox(seed))


@dataclass
class CameraParams:
    """Sensor constants: gain (DN per electron-equivalent), exposure time tau,
    readout mean/variance, saturation value, and an optional per-pixel PRNU
    factor map (defaults to 1)."""

    gain: float = 0.87
    tau: float = 1.0 / 200.0
    mu_r: float = 2048.0
    var_r: float = 30.0
    z_sat: float = 15000.0
    prnu: np.ndarray | None = None

    def __post_init__(self):
        if self.gain <= 0 or self.tau <= 0 or self.var_r < 0:
            raise ValueError("gain and tau must be positive, var_r non-negative")
        if self.z_sat <= self.mu_r:
            raise ValueError("saturation value must exceed the readout mean")
        if self.prnu is not None:
            self.prnu = np.asarray(self.prnu, dtype=np.float64)
            if np.any(self.prnu <= 0):
                raise ValueError("PRNU factors must be positive")

    def prnu_map(self, shape):
        if self.prnu is None:
            return np.ones(shape)
        if self.prnu.shape != shape:
            raise ValueError("PRNU map shape does not match image")
        return self.prnu


@dataclass
class SvePattern:
    """Per-pixel optical gain map drawn from a discrete level set."""

    gains: np.ndarray
    layout: str = "nonregular"
    seed: int = 0

    def __post_init__(self):
        self.gains = np.asarray(self.gains, dtype=np.float64)
        if np.any(self.gains <= 0):
            raise ValueError("optical gains must be positive")


def generate_sve_pattern(levels, layout, width, height, seed=0):
    """Optical gain map: 'regular' tiles the levels in a fixed k x k
    super-pixel raster; 'nonregular' assigns i.i.d. equiprobable levels."""
    levels = np.asarray(levels, dtype=np.float64)
    if levels.size == 0 or np.any(levels <= 0):
        raise ValueError("levels must be non-empty and positive")
    if layout == "regular":
        k = int(np.ceil(np.sqrt(levels.size)))
        tile = np.empty((k, k))
        flat = np.resize(levels, k * k)
        tile[:] = flat.reshape(k, k)
        reps = (int(np.ceil(height / k)), int(np.ceil(width / k)))
        gains = np.tile(tile, reps)[:height, :width]
    elif layout == "nonregular":
        gains = _rng(seed).choice(levels, size=(height, width))
    else:
        raise ValueError(f"unknown layout {layout!r}")
    return SvePattern(gains=gains, layout=layout, seed=seed)


def _exposure_factor(pattern, cam):
    # o and a enter only through their product; multiplying them first keeps
    # reconstruction bit-identical when the PRNU map is folded into the gains
    return cam.gain * (pattern.gains * cam.prnu_map(pattern.gains.shape)) * cam.tau


def simulate_sve_capture(irradiance, pattern, cam, seed=0, noiseless=False):
    """Raw capture: Normal(g * C + mu_r, gain * g * C + var_r) clipped to
    [0, z_sat], with g the per-pixel exposure factor gain*o*a*tau.

    noiseless skips the noise draw (the clean forward map, still clipped).
    """
    c = np.asarray(irradiance, dtype=np.float64)
    if np.any(c < 0):
        raise ValueError("irradiance must be non-negative")
    g = _exposure_factor(pattern, cam)
    if g.shape != c.shape:
        raise ValueError("pattern shape does not match image")
    mean = g * c + cam.mu_r
    if noiseless:
        raw = mean
    else:
        var = cam.gain * g * c + cam.var_r
        raw = mean + _rng(seed).standard_normal(c.shape) * np.sqrt(var)
    return np.clip(raw, 0.0, cam.z_sat)


def exposure_mask(raw, cam):
    """1 exactly where mu_r < raw < z_sat: the pixels carrying irradiance
    information (strict inequalities; both boundaries are unusable)."""
    raw = np.asarray(raw, dtype=np.float64)
    return ((raw > cam.mu_r) & (raw < cam.z_sat)).astype(np.float64)


def raw_to_irradiance(raw, pattern, cam):
    """Invert the affine exposure map: Y = (raw - mu_r) / (gain * o * a * tau)."""
    raw = np.asarray(raw, dtype=np.float64)
    g = _exposure_factor(pattern, cam)
    if g.shape != raw.shape:
        raise ValueError("pattern shape does not match image")
    return (raw - cam.mu_r) / g


def irradiance_noise_var(oracle_irradiance, mask, pattern, cam):
    """Per-pixel irradiance-domain noise variance with the current oracle
    standing in for the unknown clean image:

    (gain * g * D * C + var_r) / g**2, g = gain * o * a * tau.

    Masked pixels (D = 0) keep the readout-only value.
    """
    c = np.maximum(np.asarray(oracle_irradiance, dtype=np.float64), 0.0)
    d = np.asarray(mask, dtype=np.float64)
    g = _exposure_factor(pattern, cam)
    var = (cam.gain * g * d * c + cam.var_r) / g**2
    return np.maximum(var, VAR_FLOOR)


def reconstruct_hdr(raw, pattern, cam, cfg, assume_noiseless=False):
    """Reconstruct linear irradiance from one SVE raw capture.

    Builds the exposure mask, maps to the irradiance domain, and runs the
    restoration pipeline with the signal-dependent variance map refreshed from
    every outer iteration's oracle. assume_noiseless floors the variance map
    instead, for chain-inversion diagnostics on clean simulations.
    """
    raw = np.asarray(raw, dtype=np.float64)
    mask = exposure_mask(raw, cam)
    masked_fraction = 1.0 - float(mask.mean())
    if masked_fraction > 0.95:
        raise ValueError(
            f"{100 * masked_fraction:.1f}% of pixels are saturated or "
            "under-exposed; the scene's dynamic range exceeds the pattern"
        )
    y = raw_to_irradiance(raw, pattern, cam)
    y = np.where(mask == 0, 0.0, y)

    if assume_noiseless:
        noise_var = np.full(raw.shape, VAR_FLOOR)
        refresh = None
    else:
        # the initial plug-in for the signal-dependent variance must not be
        # the raw sample itself: weights correlated with the noise bias every
        # weighted estimate downward, so diffuse and locally average first
        smoothed = uniform_filter(smooth_fill(y, mask), size=5)
        noise_var = irradiance_noise_var(smoothed, mask, pattern, cam)

        def refresh(oracle):
            return irradiance_noise_var(oracle, mask, pattern, cam)

    problem = RestorationProblem(observed=y, mask=mask, noise_var=noise_var)
    image, _ = restore_detailed(problem, cfg, noise_refresh=refresh)
    return image
