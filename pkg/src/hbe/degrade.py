"""Synthetic degradations: masks, noise models, and restoration problems.

All randomness flows through numpy's counter-based Philox generator keyed by
an explicit 64-bit seed, so every artifact is reproducible bit-for-bit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

VAR_FLOOR = 1e-6


def _rng(seed):
    return np.random.Generator(np.random.Philox(seed))


@dataclass
class NoiseModel:
    """Additive Gaussian noise with constant, per-pixel, or signal-affine variance.

    kind "affine" means var(p) = gain * clean(p) + offset, the raw-sensor
    shot-plus-readout approximation. All variances are clamped at VAR_FLOOR.
    """

    kind: str
    sigma2: float = 0.0
    var_map: np.ndarray | None = None
    gain: float = 0.0
    offset: float = 0.0

    @classmethod
    def constant(cls, sigma2):
        return cls(kind="constant", sigma2=float(sigma2))

    @classmethod
    def per_pixel(cls, var_map):
        return cls(kind="per_pixel", var_map=np.asarray(var_map, dtype=np.float64))

    @classmethod
    def affine_signal(cls, gain, offset):
        return cls(kind="affine", gain=float(gain), offset=float(offset))

    def _raw_variance(self, clean):
        if self.kind == "constant":
            return np.full(clean.shape, self.sigma2)
        if self.kind == "per_pixel":
            if self.var_map.shape != clean.shape:
                raise ValueError("variance map shape does not match image")
            return self.var_map.astype(np.float64)
        if self.kind == "affine":
            return self.gain * clean + self.offset
        raise ValueError(f"unknown noise kind {self.kind!r}")

    def variance_map(self, clean):
        """Per-pixel variance handed to the solver, clamped at VAR_FLOOR."""
        clean = np.asarray(clean, dtype=np.float64)
        return np.maximum(self._raw_variance(clean), VAR_FLOOR)


@dataclass
class MaskSpec:
    """Which pixels survive: uniform random erasure, a zoom lattice, or an
    explicit mask image."""

    kind: str
    rho: float = 0.0
    factor: int = 2
    mask: np.ndarray | None = None
    seed: int = 0

    @classmethod
    def random_uniform(cls, rho, seed=0):
        if not 0 <= rho < 1:
            raise ValueError("missing fraction must lie in [0, 1)")
        return cls(kind="random", rho=float(rho), seed=int(seed))

    @classmethod
    def zoom(cls, factor):
        if factor not in (2, 3, 4):
            raise ValueError("zoom factor must be 2, 3 or 4")
        return cls(kind="zoom", factor=int(factor))

    @classmethod
    def explicit(cls, mask):
        return cls(kind="explicit", mask=np.asarray(mask, dtype=np.float64))


@dataclass
class RestorationProblem:
    """Observed image, binary-per-pixel degradation mask, and the known
    per-pixel noise variance map consumed by the solver."""

    observed: np.ndarray
    mask: np.ndarray
    noise_var: np.ndarray

    def __post_init__(self):
        self.observed = np.asarray(self.observed, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=np.float64)
        self.noise_var = np.asarray(self.noise_var, dtype=np.float64)
        if not (self.observed.shape == self.mask.shape == self.noise_var.shape):
            raise ValueError("observed, mask and noise_var must share one shape")
        if np.any(self.noise_var <= 0):
            raise ValueError("noise_var must be strictly positive")
        known = self.mask != 0
        if not np.all(np.isfinite(self.observed[known])):
            raise ValueError("observed values at known pixels must be finite")

    @property
    def shape(self):
        return self.observed.shape


def make_mask(spec, width, height):
    """Binary mask image (1 = observed) from a MaskSpec.

    random: exactly round(rho * width * height) zeros sampled without
    replacement; zoom: ones exactly on the (i*z, j*z) lattice.
    """
    if spec.kind == "random":
        total = width * height
        zeros = int(round(spec.rho * total))
        mask = np.ones(total)
        if zeros:
            idx = _rng(spec.seed).choice(total, size=zeros, replace=False)
            mask[idx] = 0.0
        return mask.reshape(height, width)
    if spec.kind == "zoom":
        mask = np.zeros((height, width))
        mask[::spec.factor, ::spec.factor] = 1.0
        return mask
    if spec.kind == "explicit":
        if spec.mask.shape != (height, width):
            raise ValueError("explicit mask shape does not match image")
        return (spec.mask != 0).astype(np.float64)
    raise ValueError(f"unknown mask kind {spec.kind!r}")


def apply_noise(clean, model, seed, clip=False):
    """Add seeded Gaussian noise with the model's per-pixel variance.

    Returns the noisy image and the exact variance map used; the restoration
    pipeline consumes the map (the noise model is assumed known). Values are
    left unclipped unless clip is set.
    """
    clean = np.asarray(clean, dtype=np.float64)
    if not np.all(np.isfinite(clean)):
        raise ValueError("clean image must be finite")
    # the draw uses the raw variance (zero noise for sigma2=0); the reported
    # map is clamped positive for the solver
    draw_var = np.maximum(model._raw_variance(clean), 0.0)
    noisy = clean + _rng(seed).standard_normal(clean.shape) * np.sqrt(draw_var)
    if clip:
        noisy = np.clip(noisy, 0.0, 255.0)
    return noisy, model.variance_map(clean)


def build_problem(clean, mask_spec, noise, seed, poison=False, clip=False):
    """Assemble a restoration problem and its ground truth.

    Unobserved pixels are stored as 0 and their variance as the placeholder
    1.0; with poison=True they are stored as NaN instead, which proves the
    solver never reads them.
    """
    clean = np.asarray(clean, dtype=np.float64)
    h, w = clean.shape
    mask = make_mask(mask_spec, w, h)
    noisy, var = apply_noise(clean, noise, seed, clip=clip)
    hole = np.nan if poison else 0.0
    observed = np.where(mask == 0, hole, noisy)
    noise_var = np.where(mask == 0, 1.0, var)
    return RestorationProblem(observed, mask, noise_var), clean.copy()


def make_texture(kind, height, width, seed=0, **params):
    """Synthetic benchmark images in [0, 255]: periodic stripes, checkerboards,
    low-pass filtered noise, a straight step edge, or a mixed scene combining
    ramps, edges and stripes."""
    rng = _rng(seed)
    r, c = np.mgrid[0:height, 0:width].astype(np.float64)
    if kind == "stripes":
        period = params.get("period", 8.0)
        angle = params.get("angle", 0.0)
        phase = (np.cos(angle) * c + np.sin(angle) * r) / period
        img = 127.5 + 127.5 * np.sin(2 * np.pi * phase)
    elif kind == "checker":
        cell = params.get("cell", 8)
        img = 255.0 * (((r // cell) + (c // cell)) % 2)
    elif kind == "filtered-noise":
        sigma = params.get("sigma", 3.0)
        white = rng.standard_normal((height, width))
        k = int(max(3, round(sigma * 6)) | 1)
        ax = np.arange(k) - k // 2
        g = np.exp(-0.5 * (ax / sigma) ** 2)
        g /= g.sum()
        smooth = np.apply_along_axis(lambda v: np.convolve(v, g, mode="same"), 0, white)
        smooth = np.apply_along_axis(lambda v: np.convolve(v, g, mode="same"), 1, smooth)
        smooth -= smooth.min()
        peak = smooth.max()
        img = 255.0 * smooth / peak if peak > 0 else np.zeros_like(smooth)
    elif kind == "edge":
        angle = params.get("angle", np.pi / 2)
        offset = params.get("offset", 0.0)
        nx, ny = np.cos(angle + np.pi / 2), np.sin(angle + np.pi / 2)
        t = (c - width / 2) * nx + (r - height / 2) * ny - offset
        img = 255.0 * np.clip(0.5 + t / 2.0, 0.0, 1.0)
    elif kind == "scene":
        # ramp background + two step edges + a striped block: a stand-in for
        # a structured natural image, generated in-repo
        img = 60.0 + 80.0 * c / max(width - 1, 1)
        img[r > 0.62 * height] *= 0.45
        img[(c > 0.55 * width) & (r < 0.4 * height)] = 210.0
        sr = slice(int(0.15 * height), int(0.55 * height))
        sc = slice(int(0.08 * width), int(0.45 * width))
        rr, cc = np.mgrid[sr, sc]
        img[sr, sc] = 127.5 + 90.0 * np.sin(2 * np.pi * (cc + 0.35 * rr) / 6.0)
        img += rng.normal(0.0, 1.5, img.shape)  # mild fixed texture, not noise
        img = np.clip(img, 0.0, 255.0)
    else:
        raise ValueError(f"unknown texture kind {kind!r}")
    return img
