"""Joint MAP estimation of a group of degraded patches and their Gaussian model.

A group of M degraded patches z_i = D_i c_i + n_i (D_i diagonal, n_i zero-mean
Gaussian with diagonal covariance) is assumed to share one Gaussian model
N(mu, Lambda^-1). A normal-Wishart prior on (mu, Lambda) with parameters
(mu0, Sigma0, kappa, nu) regularizes the model estimate, which makes the joint
posterior maximization well-posed even when most pixels are missing.

The negative log posterior `objective_f` is biconvex in ({c_i}, mu) and Lambda,
so it is minimized by exact alternating steps: `compute_gain` / `update_mean` /
`update_patches` solve the patch-and-mean subproblem in closed form,
`update_precision` solves the precision subproblem, and `minimize_f` alternates
them, recording the objective after every full sweep.

Patches are plain 1-d float arrays of length n = side*side; images enter only
at the patch-engine layer.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import lapack


class NumericalError(ArithmeticError):
    """A linear-algebra step failed or produced non-finite values."""


class FactorizationError(NumericalError):
    """Symmetric positive-definite factorization failed.

    pivot is the 1-based index of the first non-positive leading minor, as
    reported by LAPACK.
    """

    def __init__(self, pivot, context=""):
        self.pivot = int(pivot)
        detail = f" while {context}" if context else ""
        super().__init__(
            f"matrix is not positive definite (failing pivot {self.pivot}){detail}"
        )


def spd_factor(a, context=""):
    """Lower Cholesky factor of a symmetric positive-definite matrix."""
    c, info = lapack.dpotrf(a, lower=1)
    if info > 0:
        raise FactorizationError(info, context)
    if info < 0:
        raise ValueError(f"illegal value in argument {-info} of Cholesky factorization")
    return c

def spd_solve(factor, b):
    """Solve a x = b given the lower Cholesky factor of a."""
    x, info = lapack.dpotrs(factor, b, lower=1)
    if info != 0:
        raise NumericalError(f"triangular solve failed (info={info})")
    return x

def spd_logdet(factor):
    """log det of the factored matrix."""
    return 2.0 * float(np.log(np.diag(factor)).sum())

def spd_inverse(a, context=""):
    """Inverse of a symmetric positive-definite matrix, symmetric by construction."""
    inv, info = lapack.dpotri(spd_factor(a, context), lower=1)
    if info != 0:
        raise NumericalError(f"triangular inversion failed (info={info})")
    # dpotri fills one triangle only
    inv = np.tril(inv) + np.tril(inv, -1).T
    return inv

def symmetrize(a):
    return 0.5 * (a + a.T)


def _vector(x, name):
    v = np.asarray(x, dtype=np.float64)
    if v.ndim != 1:
        raise ValueError(f"{name} must be a 1-d vector, got shape {v.shape}")
    return v


@dataclass
class DegradedPatch:
    """One observed patch with its diagonal degradation and noise model.

    observed: length-n intensities; entries where mask == 0 are never read.
    mask: length-n diagonal of the degradation operator, entries in [0, 1]
          (binary for missing-pixel problems, all ones for pure denoising).
    noise_var: length-n diagonal of the noise covariance, strictly positive
          (placeholder values at masked pixels only affect conditioning).
    """

    observed: np.ndarray
    mask: np.ndarray
    noise_var: np.ndarray

    def __post_init__(self):
        self.observed = _vector(self.observed, "observed")
        self.mask = _vector(self.mask, "mask")
        self.noise_var = _vector(self.noise_var, "noise_var")
        n = self.observed.shape[0]
        if self.mask.shape[0] != n or self.noise_var.shape[0] != n:
            raise ValueError("observed, mask and noise_var must share one length")
        if np.any(self.noise_var <= 0):
            raise ValueError("noise_var entries must be strictly positive")
        if np.any(self.mask < 0) or np.any(self.mask > 1):
            raise ValueError("mask entries must lie in [0, 1]")

    @property
    def n(self):
        return self.observed.shape[0]

    def data(self):
        """Observed values with masked entries forced to zero.

        Guarantees that whatever was stored at unobserved pixels (zeros, or
        NaN poison in audit mode) never reaches the arithmetic.
        """
        return np.where(self.mask == 0.0, 0.0, self.observed)


@dataclass
class GaussianModel:
    """Gaussian patch model held as mean and precision (inverse covariance)."""

    mean: np.ndarray
    precision: np.ndarray

    def __post_init__(self):
        self.mean = _vector(self.mean, "mean")
        self.precision = np.asarray(self.precision, dtype=np.float64)
        n = self.mean.shape[0]
        if self.precision.shape != (n, n):
            raise ValueError("precision must be n x n for an n-vector mean")
        scale = float(np.abs(self.precision).max())
        if scale > 0 and float(np.abs(self.precision - self.precision.T).max()) > 1e-10 * scale:
            raise ValueError("precision must be symmetric to 1e-10 relative")


@dataclass
class HyperpriorParams:
    """Normal-Wishart parameters (mu0, Sigma0, kappa, nu).

    degenerate marks hyperparameters estimated from too few samples
    (covariance replaced by a ridge); informational only.
    """

    mu0: np.ndarray
    sigma0: np.ndarray
    kappa: float
    nu: float
    degenerate: bool = False

    def __post_init__(self):
        self.mu0 = _vector(self.mu0, "mu0")
        self.sigma0 = np.asarray(self.sigma0, dtype=np.float64)
        n = self.mu0.shape[0]
        if self.sigma0.shape != (n, n):
            raise ValueError("sigma0 must be n x n for an n-vector mu0")
        if not self.kappa > 0:
            raise ValueError("kappa must be positive")
        if not self.nu > n - 1:
            raise ValueError("nu must exceed n - 1")

    @property
    def n(self):
        return self.mu0.shape[0]


@dataclass
class MapSolution:
    """Output of minimize_f: restored patches, fitted model, objective trace."""

    patches: list
    model: GaussianModel
    objective_trace: np.ndarray = field(default_factory=lambda: np.empty(0))
    iterations: int = 0


def _check_group(group, hyper):
    if not group:
        raise ValueError("patch group is empty")
    n = hyper.n
    for p in group:
        if p.n != n:
            raise ValueError(f"patch dimension {p.n} does not match model dimension {n}")
    return n


def objective_terms(group, patches, model, hyper, _logdet=None):
    """The five terms of the negative log posterior, in order:

    data fidelity, log-determinant, patch deviation, mean deviation, trace.
    """
    n = _check_group(group, hyper)
    m = len(group)
    if len(patches) != m:
        raise ValueError("group and patches lists must have equal length")
    lam = model.precision
    if _logdet is None:
        try:
            _logdet = spd_logdet(spd_factor(lam))
        except FactorizationError as exc:
            raise ValueError(f"model precision is not positive definite: {exc}") from exc

    data = 0.0
    dev = 0.0
    for p, c in zip(group, patches):
        c = np.asarray(c, dtype=np.float64)
        if c.shape != (n,):
            raise ValueError("restored patch has wrong shape")
        r = p.data() - p.mask * c
        data += 0.5 * float((r * r / p.noise_var).sum())
        d = c - model.mean
        dev += 0.5 * float(d @ lam @ d)
    logdet_term = -0.5 * (hyper.nu - n + m) * _logdet
    dm = model.mean - hyper.mu0
    mean_term = 0.5 * hyper.kappa * float(dm @ lam @ dm)
    trace_term = 0.5 * hyper.nu * float(np.sum(hyper.sigma0 * lam))
    return data, logdet_term, dev, mean_term, trace_term


_TERM_NAMES = ("data", "logdet", "patch", "mean", "trace")


def objective_f(group, patches, model, hyper):
    """Negative log posterior of ({c_i}, mu, Lambda) given the group."""
    return float(sum(objective_terms(group, patches, model, hyper)))


def gain_from_covariance(cov, mask, noise_var):
    """Gain A = S D (D S D + Sigma_N)^-1 with S the model covariance.

    D = diag(mask), Sigma_N = diag(noise_var). For binary masks the inner
    matrix is block diagonal across observed/masked coordinates, so only the
    observed block is factored and the masked columns of A are exact zeros.
    """
    mask = np.asarray(mask, dtype=np.float64)
    noise_var = np.asarray(noise_var, dtype=np.float64)
    n = cov.shape[0]
    binary = bool(np.all((mask == 0.0) | (mask == 1.0)))
    if binary:
        obs = np.flatnonzero(mask == 1.0)
        gain = np.zeros((n, n))
        if obs.size:
            inner = cov[np.ix_(obs, obs)] + np.diag(noise_var[obs])
            f = spd_factor(inner, "computing the patch gain")
            # A[:, obs] = S[:, obs] inner^-1; masked columns stay exactly zero
            gain[:, obs] = spd_solve(f, cov[obs, :]).T
        return gain
    inner = mask[:, None] * cov * mask[None, :] + np.diag(noise_var)
    f = spd_factor(inner, "computing the patch gain")
    return spd_solve(f, mask[:, None] * cov).T


def compute_gain(precision, mask, noise_var):
    """Gain A = Lambda^-1 D^T (D Lambda^-1 D^T + Sigma_N)^-1 for one patch."""
    precision = np.asarray(precision, dtype=np.float64)
    noise_var = np.asarray(noise_var, dtype=np.float64)
    if np.any(noise_var <= 0):
        raise ValueError("noise_var entries must be strictly positive")
    cov = spd_inverse(precision, "inverting the model precision")
    return gain_from_covariance(cov, mask, noise_var)


def update_mean(group, gains, hyper):
    """Mean update: solves (kappa I + sum_i A_i D_i) mu = sum_i A_i z_i + kappa mu0."""
    if len(group) != len(gains):
        raise ValueError("group and gains lists must have equal length")
    if not group:
        return hyper.mu0.copy()
    n = _check_group(group, hyper)
    system = hyper.kappa * np.eye(n)
    rhs = hyper.kappa * hyper.mu0.copy()
    for p, a in zip(group, gains):
        system += a * p.mask[None, :]
        rhs += a @ p.data()
    try:
        mu = np.linalg.solve(system, rhs)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"singular mean system despite kappa > 0: {exc}") from exc
    if not np.all(np.isfinite(mu)):
        raise NumericalError("mean update produced non-finite values (NaN contamination)")
    return mu


def update_patches(group, gains, mean):
    """Patch updates: c_i = A_i (z_i - D_i mu) + mu."""
    if len(group) != len(gains):
        raise ValueError("group and gains lists must have equal length")
    mean = _vector(mean, "mean")
    out = []
    for p, a in zip(group, gains):
        if p.n != mean.shape[0]:
            raise ValueError("patch dimension does not match mean dimension")
        out.append(a @ (p.data() - p.mask * mean) + mean)
    return out


def _posterior_covariance(patches, mean, hyper):
    """Covariance-side matrix of the precision update, symmetrized."""
    n = hyper.n
    m = len(patches)
    dof = hyper.nu + m - n
    if dof <= 0:
        raise ValueError(f"nu + M - n must be positive, got {dof}")
    cov = hyper.nu * hyper.sigma0.copy()
    dm = mean - hyper.mu0
    cov += hyper.kappa * np.outer(dm, dm)
    if m:
        resid = np.asarray(patches, dtype=np.float64) - mean[None, :]
        cov += resid.T @ resid
    return symmetrize(cov) / dof


def update_precision(patches, mean, hyper):
    """Precision update: the inverse of the posterior scatter matrix

    [nu Sigma0 + kappa (mu - mu0)(mu - mu0)^T + sum_i (c_i - mu)(c_i - mu)^T]
    / (nu + M - n), inverted through an SPD factorization.
    """
    mean = _vector(mean, "mean")
    cov = _posterior_covariance(patches, mean, hyper)
    return spd_inverse(cov, "inverting the updated covariance")


class _GroupEngine:
    """Batched alternating-minimization engine for one patch group.

    The observed-coordinate sets never change across sweeps, so they are
    indexed once. For binary masks the inner matrix is factored only on the
    observed block, members sharing one (mask, noise) pair share that
    factorization, and the n x n gains are never materialized: every update
    needs only W = K^-1 S[obs, :].
    """

    def __init__(self, group, hyper):
        self.n = _check_group(group, hyper)
        self.hyper = hyper
        self.z = np.stack([p.data() for p in group])
        self.masks = np.stack([p.mask for p in group])
        self.vars = np.stack([p.noise_var for p in group])
        self.m = len(group)
        self.binary = bool(np.all((self.masks == 0.0) | (self.masks == 1.0)))
        self.group = group
        if self.binary:
            keymap = {}
            for i in range(self.m):
                key = (self.masks[i].tobytes(), self.vars[i].tobytes())
                keymap.setdefault(key, []).append(i)
            self.parts = []
            for idx in keymap.values():
                obs = np.flatnonzero(self.masks[idx[0]] == 1.0)
                # flat indices of the (obs, obs) block, gathered per sweep
                block = (obs[:, None] * self.n + obs[None, :]).ravel()
                self.parts.append((obs, block, np.asarray(idx)))

    def joint_step(self, cov):
        """Exact minimizer over (patches, mean) at fixed covariance cov."""
        hyper = self.hyper
        n = self.n
        if not self.binary:
            gains = [
                gain_from_covariance(cov, p.mask, p.noise_var) for p in self.group
            ]
            mu = update_mean(self.group, gains, hyper)
            return mu, np.stack(update_patches(self.group, gains, mu))
        system = hyper.kappa * np.eye(n)
        rhs = hyper.kappa * hyper.mu0.copy()
        flat_cov = cov.reshape(-1)
        solves = []
        for obs, block, members in self.parts:
            if obs.size == 0:
                solves.append(None)
                continue
            inner = flat_cov.take(block).reshape(obs.size, obs.size)
            inner[np.diag_indices(obs.size)] += self.vars[members[0]][obs]
            f = spd_factor(inner, "computing the patch gain")
            w = spd_solve(f, cov[obs, :])  # (p, n): K^-1 S[obs, :]
            solves.append(w)
            system[:, obs] += members.size * w.T
            rhs += w.T @ self.z[members][:, obs].sum(axis=0)
        try:
            mu = np.linalg.solve(system, rhs)
        except np.linalg.LinAlgError as exc:
            raise NumericalError(f"singular mean system despite kappa > 0: {exc}") from exc
        if not np.all(np.isfinite(mu)):
            raise NumericalError("mean update produced non-finite values (NaN contamination)")
        cs = np.empty((self.m, n))
        for (obs, _, members), w in zip(self.parts, solves):
            if w is None:
                cs[members] = mu[None, :]
                continue
            resid = self.z[members][:, obs] - mu[obs][None, :]
            cs[members] = resid @ w + mu[None, :]
        return mu, cs

    def objective(self, cs, mu, lam, logdet_lam):
        """All five objective terms, batched over the group."""
        hyper = self.hyper
        r = self.z - self.masks * cs
        data = 0.5 * float((r * r / self.vars).sum())
        logdet_term = -0.5 * (hyper.nu - self.n + self.m) * logdet_lam
        d = cs - mu[None, :]
        dev = 0.5 * float(np.einsum("ij,jk,ik->", d, lam, d))
        dm = mu - hyper.mu0
        mean_term = 0.5 * hyper.kappa * float(dm @ lam @ dm)
        trace_term = 0.5 * hyper.nu * float(np.sum(hyper.sigma0 * lam))
        return data, logdet_term, dev, mean_term, trace_term


def minimize_f(group, hyper, max_iters=30, rel_tol=1e-6):
    """Alternating exact minimization of the joint objective.

    Starts from Lambda = Sigma0^-1, alternates the (patches, mean) update with
    the precision update, and records the objective after every full sweep.
    Stops after max_iters sweeps or when the relative decrease falls below
    rel_tol. The recorded trace is non-increasing up to roundoff.
    """
    if max_iters < 1:
        raise ValueError("max_iters must be at least 1")
    if rel_tol < 0:
        raise ValueError("rel_tol must be non-negative")
    engine = _GroupEngine(group, hyper)
    cov = np.asarray(hyper.sigma0, dtype=np.float64).copy()  # tracks Lambda^-1
    trace = []
    prev = None
    mu = None
    cs = None
    lam = None
    for it in range(1, max_iters + 1):
        try:
            mu, cs = engine.joint_step(cov)
            cov = _posterior_covariance(cs, mu, hyper)
            factor = spd_factor(cov, "inverting the updated covariance")
        except NumericalError as exc:
            raise NumericalError(f"iteration {it}: {exc}") from exc
        inv, info = lapack.dpotri(factor, lower=1)
        if info != 0:
            raise NumericalError(f"triangular inversion failed (info={info})")
        lam = np.tril(inv) + np.tril(inv, -1).T
        logdet_lam = -spd_logdet(factor)
        terms = engine.objective(cs, mu, lam, logdet_lam)
        fval = float(sum(terms))
        if not np.isfinite(fval):
            bad = ", ".join(
                name for name, t in zip(_TERM_NAMES, terms) if not np.isfinite(t)
            )
            raise NumericalError(
                f"objective became non-finite at iteration {it} (offending term(s): {bad})"
            )
        trace.append(fval)
        if prev is not None and abs(prev - fval) <= rel_tol * abs(prev):
            break
        prev = fval
    return MapSolution(
        patches=list(cs),
        model=GaussianModel(mu, lam),
        objective_trace=np.asarray(trace),
        iterations=len(trace),
    )
