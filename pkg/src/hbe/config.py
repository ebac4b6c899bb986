"""Plain-text key=value run configuration.

One setting per line, `key = value`, with `#` comments. Keys mirror the
pipeline dataclasses; unknown keys are rejected so typos fail loudly. Every
key is optional and falls back to the documented default.
"""

from __future__ import annotations

import hashlib

import numpy as np

from .degrade import MaskSpec, NoiseModel
from .hdr import CameraParams
from .patches import SearchConfig
from .solver import SolverConfig


def _bool(text):
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _float_list(text):
    return [float(tok) for tok in text.replace(",", " ").split()]


# key -> (parser, default, help)
SCHEMA = {
    "seed": (int, 0, "base seed for all randomness"),
    "threads": (int, 1, "worker threads (0 = auto); HBE_DETERMINISTIC=1 forces 1"),
    "clip": (_bool, False, "clip degraded images to [0, 255]"),
    "solver.alpha_low": (float, None, "prior weight when data is plentiful"),
    "solver.alpha_high": (float, None, "prior weight when data is scarce"),
    "solver.pm_threshold": (float, 0.5, "fraction of n and m_nominal that switches alpha"),
    "solver.m_nominal": (int, 30, "nominal group size for the alpha rule"),
    "solver.outer_iters": (int, 3, "outer oracle-refinement iterations"),
    "solver.inner_iters": (int, 30, "alternating sweeps per group"),
    "solver.inner_rel_tol": (float, 1e-6, "relative objective decrease that stops sweeps"),
    "solver.init_mode": (str, "directional-gmm", "directional-gmm or smooth-fill"),
    "solver.init_stride": (int, 2, "anchor stride of the initialization pass"),
    "solver.group_solve_cap": (int, 200, "largest group solved jointly"),
    "search.patch_side": (int, 8, "patch side in pixels"),
    "search.window_side": (int, 25, "search window side in pixels"),
    "search.epsilon": (float, 1.5, "distance tolerance over the nearest neighbour"),
    "search.step": (int, 1, "anchor-grid stride"),
    "search.min_group": (int, 2, "smallest group modeled on its own"),
    "mask.kind": (str, "random", "random, zoom or explicit"),
    "mask.rho": (float, 0.7, "missing-pixel fraction for random masks"),
    "mask.factor": (int, 2, "zoom factor (2, 3 or 4)"),
    "mask.path": (str, None, "mask image path for explicit masks"),
    "noise.kind": (str, "constant", "constant, affine, per_pixel or none"),
    "noise.sigma2": (float, 10.0, "variance of constant noise"),
    "noise.gain": (float, 0.87, "signal-proportional variance coefficient"),
    "noise.offset": (float, 30.0, "variance offset of affine noise"),
    "noise.path": (str, None, "variance image path for per_pixel noise"),
    "camera.gain": (float, 0.87, "camera gain"),
    "camera.tau": (float, 1.0 / 200.0, "exposure time in seconds"),
    "camera.mu_r": (float, 2048.0, "readout mean in DN"),
    "camera.var_r": (float, 30.0, "readout variance in DN^2"),
    "camera.z_sat": (float, 15000.0, "saturation value in DN"),
    "camera.prnu_path": (str, None, "per-pixel PRNU factor image path"),
    "sve.levels": (_float_list, [1.0, 8.0, 64.0, 512.0], "optical gain levels"),
    "sve.layout": (str, "nonregular", "regular or nonregular"),
}


class ConfigError(ValueError):
    pass


def parse_config_text(text, source="<config>"):
    """Parse key=value lines into a settings dict, rejecting unknown keys."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        parser = SCHEMA[key][0]
        try:
            out[key] = parser(value)
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: bad value for {key}: {exc}") from exc
    return out


def load_config(path):
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config_text(fh.read(), source=str(path))


class RunConfig:
    """Effective settings: file values overlaid with command-line overrides."""

    def __init__(self, settings=None):
        self.settings = dict(settings or {})

    def get(self, key):
        if key in self.settings:
            return self.settings[key]
        return SCHEMA[key][1]

    def set(self, key, value):
        if key not in SCHEMA:
            raise ConfigError(f"unknown key {key!r}")
        if value is not None:
            self.settings[key] = value

    def digest(self):
        """Stable hash of the effective configuration."""
        text = "\n".join(f"{k} = {self.get(k)}" for k in sorted(SCHEMA))
        return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]

    def search_config(self):
        return SearchConfig(
            patch_side=self.get("search.patch_side"),
            window_side=self.get("search.window_side"),
            epsilon=self.get("search.epsilon"),
            step=self.get("search.step"),
            min_group=self.get("search.min_group"),
        )

    def solver_config(self, task="interpolation"):
        if task == "denoising":
            alpha_low, alpha_high = 100.0, 100.0
        else:
            alpha_low, alpha_high = 0.5, 1.0
        if self.get("solver.alpha_low") is not None:
            alpha_low = self.get("solver.alpha_low")
        if self.get("solver.alpha_high") is not None:
            alpha_high = self.get("solver.alpha_high")
        return SolverConfig(
            alpha_low=alpha_low,
            alpha_high=alpha_high,
            pm_threshold=self.get("solver.pm_threshold"),
            m_nominal=self.get("solver.m_nominal"),
            outer_iters=self.get("solver.outer_iters"),
            inner_iters=self.get("solver.inner_iters"),
            inner_rel_tol=self.get("solver.inner_rel_tol"),
            search=self.search_config(),
            init_mode=self.get("solver.init_mode"),
            init_stride=self.get("solver.init_stride"),
            group_solve_cap=self.get("solver.group_solve_cap"),
            threads=self.get("threads"),
        )

    def mask_spec(self, read_image=None):
        kind = self.get("mask.kind")
        if kind == "random":
            return MaskSpec.random_uniform(self.get("mask.rho"), seed=self.get("seed"))
        if kind == "zoom":
            return MaskSpec.zoom(self.get("mask.factor"))
        if kind == "explicit":
            path = self.get("mask.path")
            if path is None or read_image is None:
                raise ConfigError("mask.kind = explicit requires mask.path")
            return MaskSpec.explicit(read_image(path))
        raise ConfigError(f"unknown mask.kind {kind!r}")

    def noise_model(self, read_image=None):
        kind = self.get("noise.kind")
        if kind == "none":
            return NoiseModel.constant(0.0)
        if kind == "constant":
            return NoiseModel.constant(self.get("noise.sigma2"))
        if kind == "affine":
            return NoiseModel.affine_signal(self.get("noise.gain"), self.get("noise.offset"))
        if kind == "per_pixel":
            path = self.get("noise.path")
            if path is None or read_image is None:
                raise ConfigError("noise.kind = per_pixel requires noise.path")
            return NoiseModel.per_pixel(read_image(path))
        raise ConfigError(f"unknown noise.kind {kind!r}")

    def camera(self, read_image=None):
        prnu = None
        path = self.get("camera.prnu_path")
        if path is not None and read_image is not None:
            prnu = np.asarray(read_image(path))
        return CameraParams(
            gain=self.get("camera.gain"),
            tau=self.get("camera.tau"),
            mu_r=self.get("camera.mu_r"),
            var_r=self.get("camera.var_r"),
            z_sat=self.get("camera.z_sat"),
            prnu=prnu,
        )


def default_documentation():
    """One line per key: name, default, help (backs `hbe config --list`)."""
    lines = []
    for key in sorted(SCHEMA):
        _, default, help_text = SCHEMA[key]
        lines.append(f"{key:24s} default={default!r:18} {help_text}")
    return "\n".join(lines)
