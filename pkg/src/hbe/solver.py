"""The full restoration pipeline.

One outer iteration sweeps the anchor grid in raster order, forms a group of
similar patches around every anchor not already restored as a member of an
earlier group, estimates the group's hyperparameters from the current oracle
image, runs the alternating joint-MAP solver on the degraded patches, and
aggregates every estimate back into the next oracle. The first oracle comes
from a fixed bank of directional Gaussian models (oriented step edges plus a
DCT-spectrum model), or from plain diffusion filling as a fallback.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .core import (
    DegradedPatch,
    HyperpriorParams,
    NumericalError,
    gain_from_covariance,
    minimize_f,
    spd_factor,
    spd_inverse,
    spd_logdet,
    spd_solve,
    update_patches,
)
from .patches import SearchConfig, WindowIndex, aggregate, anchor_grid

RIDGE_REL = 1e-6
# never trust oracle-derived covariances below 0.1 gray-level std: duplicate
# oracle patches otherwise yield a collapsed model that outweighs exact data
RIDGE_FLOOR = 1e-2
ORIENTATIONS = 18
FALLBACK_ALPHA = 100.0  # strong prior when a neighbourhood is degenerate
INIT_DC_STD = 64.0  # DC uncertainty of the initialization models, gray levels


@dataclass
class SolverConfig:
    """Pipeline settings.

    alpha_low applies when both the known-pixel count P and the group size M
    clear pm_threshold (P against n, M against m_nominal); alpha_high
    otherwise. kappa = M * alpha and nu = M * alpha + n.
    """

    alpha_low: float = 0.5
    alpha_high: float = 1.0
    pm_threshold: float = 0.5
    m_nominal: int = 30
    outer_iters: int = 3
    inner_iters: int = 30
    inner_rel_tol: float = 1e-6
    search: SearchConfig = field(default_factory=SearchConfig)
    init_mode: str = "directional-gmm"
    init_stride: int = 2
    group_solve_cap: int = 200
    threads: int = 1

    def __post_init__(self):
        if self.alpha_low > self.alpha_high:
            raise ValueError("alpha_low must not exceed alpha_high")
        if self.outer_iters < 1:
            raise ValueError("outer_iters must be at least 1")
        if not 0 < self.pm_threshold <= 1:
            raise ValueError("pm_threshold must lie in (0, 1]")
        if self.init_mode not in ("directional-gmm", "smooth-fill"):
            raise ValueError(f"unknown init_mode {self.init_mode!r}")


def denoising_config(**overrides):
    """Strong-prior preset used for pure denoising."""
    return SolverConfig(alpha_low=100.0, alpha_high=100.0, **overrides)


def interpolation_config(**overrides):
    """Preset for missing-pixel and zooming problems."""
    return SolverConfig(alpha_low=0.5, alpha_high=1.0, **overrides)


def estimate_hyperparams(oracle_patches, kappa, nu):
    """Sample mean and ridge-regularized sample covariance of the oracle
    patches, with kappa and nu passed through.

    A single-patch group falls back to that patch as the mean and a pure
    ridge covariance, and is flagged degenerate.
    """
    arr = np.asarray(oracle_patches, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] < 1:
        raise ValueError("oracle_patches must be a non-empty (M, n) array")
    m, n = arr.shape
    if m < 2:
        return HyperpriorParams(
            arr[0].copy(), RIDGE_FLOOR * np.eye(n), kappa, nu, degenerate=True
        )
    mu0 = arr.mean(axis=0)
    centered = arr - mu0[None, :]
    sigma0 = centered.T @ centered / (m - 1)
    ridge = max(RIDGE_REL * float(np.trace(sigma0)) / n, RIDGE_FLOOR)
    sigma0[np.diag_indices(n)] += ridge
    return HyperpriorParams(mu0, sigma0, kappa, nu)


def kappa_nu_rule(m, p, n, cfg):
    """Confidence rule for the prior weights.

    alpha_low when the patch has many known pixels and many similar patches,
    alpha_high otherwise; nu = m * alpha + n keeps nu > n - 1 for any m >= 1.
    """
    if m < 1:
        raise ValueError("group size must be at least 1")
    if not 0 <= p <= n:
        raise ValueError("known-pixel count must lie in [0, n]")
    strong = p > cfg.pm_threshold * n and m > cfg.pm_threshold * cfg.m_nominal
    alpha = cfg.alpha_low if strong else cfg.alpha_high
    return m * alpha, m * alpha + n


def smooth_fill(observed, mask, tol=1e-6, max_iters=20000):
    """Fill masked pixels by iterated 4-neighbour averaging to convergence.

    Known pixels are held fixed; this is the diffusion (harmonic) fill used
    as initialization fallback and as a baseline.
    """
    observed = np.asarray(observed, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    missing = mask == 0
    x = np.where(missing, 0.0, observed)
    if not missing.any():
        return x
    known = ~missing
    if not known.any():
        return x
    scale = max(float(np.ptp(x[known])), 1.0)
    x[missing] = x[known].mean()
    for _ in range(max_iters):
        p = np.pad(x, 1, mode="edge")
        nb = 0.25 * (p[:-2, 1:-1] + p[2:, 1:-1] + p[1:-1, :-2] + p[1:-1, 2:])
        delta = float(np.abs(nb[missing] - x[missing]).max())
        x[missing] = nb[missing]
        if delta <= tol * scale:
            break
    return x


def _edge_patch_bank(side, theta):
    """Anti-aliased straight step edges crossing the patch at angle theta,
    full contrast, DC removed."""
    n = side * side
    ctr = (side - 1) / 2.0
    rr, cc = np.mgrid[0:side, 0:side].astype(np.float64)
    nx, ny = np.cos(theta + np.pi / 2), np.sin(theta + np.pi / 2)
    proj = (cc - ctr) * nx + (rr - ctr) * ny
    bank = []
    for aa in (0.8, 1.5):
        for s in np.linspace(-side * 0.75, side * 0.75, 41):
            p = 255.0 * np.clip(0.5 + (proj - s) / (2.0 * aa), 0.0, 1.0).reshape(n)
            bank.append(p - p.mean())
    return np.asarray(bank)


def _dct_basis(side):
    x = np.arange(side)
    b = np.cos(np.pi * (2 * x[None, :] + 1) * x[:, None] / (2 * side))
    b *= np.sqrt(2.0 / side)
    b[0] = np.sqrt(1.0 / side)
    return b


@lru_cache(maxsize=8)
def directional_models(side):
    """Fixed bank of 19 patch covariances: 18 oriented-edge sample
    covariances plus one DCT-spectrum model with 1/(1+k) eigenvalue decay.

    Every model carries an explicit DC-uncertainty component: the banks are
    DC-removed over the full patch, but scoring centers a patch on the mean
    of its observed pixels only, and on half-masked edges those two means
    differ by tens of gray levels.
    """
    n = side * side
    models = []
    for k in range(ORIENTATIONS):
        bank = _edge_patch_bank(side, k * np.pi / ORIENTATIONS)
        cov = bank.T @ bank / (bank.shape[0] - 1)
        cov[np.diag_indices(n)] += 1e-3 * np.trace(cov) / n
        models.append(cov)
    mean_trace = float(np.mean([np.trace(c) for c in models]))
    b1 = _dct_basis(side)
    freqs = sorted(((u + v, u, v) for u in range(side) for v in range(side)))
    vecs = np.empty((n, n))
    for i, (_, u, v) in enumerate(freqs):
        vecs[:, i] = np.outer(b1[u], b1[v]).reshape(n)
    eig = 1.0 / (1.0 + np.arange(n))
    dct_cov = (vecs * eig) @ vecs.T
    dct_cov *= mean_trace / eig.sum()
    models.append(0.5 * (dct_cov + dct_cov.T))
    dc = INIT_DC_STD**2 * np.full((n, n), 1.0 / n)
    return [cov + dc for cov in models]


def _select_and_restore(z, mask, var, models, units=None):
    """Pick the model with the highest likelihood of the observed coordinates
    (mean = patch DC) and restore the patch with it in one linear step.

    The DC is the inverse-variance-weighted mean: with signal-dependent noise
    the per-coordinate variances differ by orders of magnitude, and an
    unweighted mean would be swamped by the noisiest samples. Each model is
    rescaled to the patch's own moment-corrected signal variance (sample
    variance of the observed residual minus its mean noise variance), so the
    fixed bank competes on correlation shape at any intensity scale, from flat
    noisy patches (scale ~ 0, restored to their DC) to linear-irradiance
    contrasts thousands of times the bank's native amplitude.
    """
    obs = np.flatnonzero(mask == 1.0)
    if obs.size == 0:
        return 0, np.zeros_like(z)
    if units is None:
        units = [float(np.trace(c)) / c.shape[0] for c in models]
    dc = float(np.average(z[obs], weights=1.0 / var[obs]))
    r = z[obs] - dc
    mean_noise = float(var[obs].mean())
    signal_var = max(float(np.mean(r * r)) - mean_noise, 1e-6 * mean_noise)
    best, best_ll, best_solve = 0, -np.inf, None
    for k, cov in enumerate(models):
        scale = signal_var / units[k]
        inner = scale * cov[np.ix_(obs, obs)]
        inner[np.diag_indices(obs.size)] += var[obs]
        f = spd_factor(inner, "scoring an initialization model")
        x = spd_solve(f, r)
        ll = -0.5 * (spd_logdet(f) + float(r @ x))
        if ll > best_ll:
            best, best_ll, best_solve = k, ll, x
    cov = models[best]
    restored = (signal_var / units[best]) * (cov[:, obs] @ best_solve) + dc
    return best, restored


def _reestimate_models(models, labels, restored, n):
    """Replace each class covariance by the shape of its restored members.

    This is the model-update half of the initialization's single iteration;
    without it the fixed bank cannot represent textures at all. Members are
    DC-removed and normalized to unit contrast before the sample covariance,
    so one bright region cannot drown out the rest of a class (selection is
    scale-free anyway: models are rescaled per patch). Near-flat members,
    whose shape is mostly residual noise, are dropped. Classes with too few
    members keep their synthetic covariance. The DC-uncertainty component is
    re-attached at the bank's own proportion.
    """
    labels = np.asarray(labels)
    updated = list(models)
    bank_unit = float(np.mean([np.trace(c) for c in models])) / n
    dc_ratio = INIT_DC_STD**2 / bank_unit  # DC variance per unit pixel variance
    for k in np.unique(labels):
        rows = restored[labels == k]
        centered = rows - rows.mean(axis=1, keepdims=True)
        contrast = centered.std(axis=1)
        keep = contrast > 0.15 * contrast.max(initial=0.0)
        if keep.sum() < 8:
            continue
        shapes = centered[keep] / contrast[keep, None]
        cov = shapes.T @ shapes / (shapes.shape[0] - 1)
        cov[np.diag_indices(n)] += 1e-3 * np.trace(cov) / n
        dc_var = dc_ratio * float(np.trace(cov)) / n
        updated[k] = cov + np.full((n, n), dc_var / n)
    return updated


def init_oracle(problem, cfg):
    """First fully-populated estimate of the clean image.

    directional-gmm mode runs one full iteration of the fixed-bank scheme:
    score every patch against the bank, restore it in one linear step with the
    winning model, re-estimate the class covariances from those restorations,
    then score and restore once more and aggregate. smooth-fill mode diffuses
    the known pixels into the holes.
    """
    observed = np.where(problem.mask == 0, 0.0, problem.observed)
    if cfg.init_mode == "smooth-fill":
        return smooth_fill(observed, problem.mask)
    side = cfg.search.patch_side
    h, w = problem.shape
    models = directional_models(side)
    index = WindowIndex(observed, problem.mask, side)
    var_win = WindowIndex(problem.noise_var, problem.mask, side)
    grid = anchor_grid(h, w, side, cfg.init_stride)
    n = side * side

    def sweep(bank):
        units = [float(np.trace(c)) / n for c in bank]
        labels = np.empty(len(grid), dtype=int)
        restored = np.empty((len(grid), n))
        for i, a in enumerate(grid):
            labels[i], restored[i] = _select_and_restore(
                index.patch(a), index.mask_patch(a), var_win.patch(a), bank, units
            )
        return labels, restored

    labels, restored = sweep(models)
    _, restored = sweep(_reestimate_models(models, labels, restored, n))
    return aggregate(list(zip(grid, restored)), w, h, side)


def _resolve_threads(threads):
    if os.environ.get("HBE_DETERMINISTIC") == "1":
        return 1
    if threads == 0:
        return os.cpu_count() or 1
    return max(1, threads)


def _solve_group(group_members, index, var_index, obs_index, n, cfg, failures):
    """Joint-MAP restoration of one group; falls back to the oracle patches
    when the numerics fail."""
    members = group_members.members
    m = len(members)
    oracle_rows = np.asarray([index.patch(p) for p in members])
    z_rows = np.asarray([obs_index.patch(p) for p in members])
    mask_rows = np.asarray([index.mask_patch(p) for p in members])
    var_rows = np.asarray([var_index.patch(p) for p in members])

    anchor_known = int((index.mask_patch(group_members.anchor) == 1.0).sum())
    kappa, nu = kappa_nu_rule(m, anchor_known, n, cfg)
    if m < cfg.search.min_group:
        alpha = max(cfg.alpha_high, FALLBACK_ALPHA)
        kappa, nu = m * alpha, m * alpha + n
    hyper = estimate_hyperparams(oracle_rows, kappa, nu)

    solve_m = min(m, cfg.group_solve_cap)
    group = [
        DegradedPatch(z_rows[i], mask_rows[i], var_rows[i]) for i in range(solve_m)
    ]
    try:
        sol = minimize_f(group, hyper, cfg.inner_iters, cfg.inner_rel_tol)
        patches = sol.patches
        if solve_m < m:
            # members beyond the solve cap share the fitted model in one step
            rest = [
                DegradedPatch(z_rows[i], mask_rows[i], var_rows[i])
                for i in range(solve_m, m)
            ]
            cov = spd_inverse(sol.model.precision)
            gains = [gain_from_covariance(cov, p.mask, p.noise_var) for p in rest]
            patches = patches + update_patches(rest, gains, sol.model.mean)
    except NumericalError:
        failures.append(group_members.anchor)
        patches = list(oracle_rows)
    return list(zip(members, patches))


def restore_detailed(problem, cfg, noise_refresh=None):
    """Run the full pipeline and return (restored image, diagnostics report).

    noise_refresh, when given, maps the current oracle image to a fresh
    per-pixel variance map at the start of every outer iteration (used for
    signal-dependent noise whose variance involves the unknown clean image).
    """
    h, w = problem.shape
    side = cfg.search.patch_side
    if side > min(h, w):
        raise ValueError(f"patch side {side} exceeds image {h}x{w}")
    threads = _resolve_threads(cfg.threads)
    observed = np.where(problem.mask == 0, 0.0, problem.observed)
    noise_var = problem.noise_var
    oracle = init_oracle(problem, cfg)
    n = side * side
    report = {
        "outer_iterations": [],
        "group_failures": 0,
        "threads": threads,
    }
    grid = anchor_grid(h, w, side, cfg.search.step)
    for outer in range(cfg.outer_iters):
        if noise_refresh is not None:
            noise_var = np.asarray(noise_refresh(oracle), dtype=np.float64)
            if noise_var.shape != (h, w) or np.any(noise_var <= 0):
                raise ValueError("noise_refresh must return a positive (h, w) map")
        index = WindowIndex(oracle, problem.mask, side)
        obs_index = WindowIndex(observed, problem.mask, side)
        var_index = WindowIndex(noise_var, problem.mask, side)

        restored_positions = set()
        groups = []
        for anchor in grid:
            if anchor in restored_positions:
                continue
            g = index.search(anchor, cfg.search)
            groups.append(g)
            restored_positions.update(g.members)

        failures = []
        if threads > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                results = list(
                    pool.map(
                        lambda g: _solve_group(
                            g, index, var_index, obs_index, n, cfg, failures
                        ),
                        groups,
                    )
                )
        else:
            results = [
                _solve_group(g, index, var_index, obs_index, n, cfg, failures)
                for g in groups
            ]
        estimates = [item for sub in results for item in sub]
        oracle = aggregate(estimates, w, h, side)
        report["group_failures"] += len(failures)
        report["outer_iterations"].append(
            {"groups": len(groups), "patches": len(estimates)}
        )
    return oracle, report


def restore(problem, cfg, noise_refresh=None):
    """Restored image for a degradation problem (see restore_detailed)."""
    image, _ = restore_detailed(problem, cfg, noise_refresh=noise_refresh)
    return image
