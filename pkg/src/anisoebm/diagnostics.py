"""Numerical probes of drift, minorization, and geometric convergence.

The probes certify nothing; they estimate the quantities the theory talks
about on analytic targets and report them with standard errors, asserting
directional conclusions only (contraction ratio below one, a strictly
positive minorization constant, log-linear decay of the V-weighted
distance to stationarity). Also hosts generic chain-quality metrics:
effective sample size, kernel MMD, and histogram KL against an analytic
density.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist

from .energy import AnalyticEnergy, EnergyModel, trapezoid_log_partition
from .errors import (ConfigError, DivergenceError, UndersampledError,
                     UnsupportedOperationError, WindowTooLongError)
from .rng import generator
from .samplers import (SamplerConfig, SamplerKind, _gd_move, _hmc_move,
                       _langevin_move, _log_gauss_diag, _mala_move,
                       _rwmh_move, _stepsizes_from_grads)

# ---------------------------------------------------------------------------
# Drift function


@dataclass
class DriftSpec:
    """Drift-function shape: V(z) = c * density(z)^(-beta).

    When ``c`` is chosen as density(mode)^beta the minimum of V is exactly
    one at the mode, which the probes rely on.
    """

    beta: float
    c: float | None = None
    small_set_radius: float = 1.0

    def validate(self):
        if not 0.0 < self.beta < 1.0:
            raise ConfigError("beta must lie in (0, 1)")
        if self.small_set_radius <= 0:
            raise ConfigError("small_set_radius must be > 0")
        return self

    @classmethod
    def mode_normalized(cls, target: AnalyticEnergy, beta: float = 0.5,
                        small_set_radius: float = 1.0) -> "DriftSpec":
        spec = cls(beta=beta, c=None, small_set_radius=small_set_radius)
        spec.validate()
        if target.log_norm is None:
            raise UnsupportedOperationError(
                "mode-normalized drift needs the target log normalizer")
        spec.c = math.exp(beta * (target.max_energy() - target.log_norm))
        return spec


def drift_values(spec: DriftSpec, target: AnalyticEnergy,
                 points: np.ndarray) -> np.ndarray:
    spec.validate()
    if target.log_norm is None:
        raise UnsupportedOperationError("drift function needs log_norm")
    c = spec.c
    if c is None:
        c = math.exp(spec.beta * (target.max_energy() - target.log_norm))
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    log_pi = target.eval_batch(points) - target.log_norm
    return c * np.exp(-spec.beta * log_pi)


def drift_function(spec: DriftSpec, target: AnalyticEnergy, z) -> float:
    """V at a single point."""
    return float(drift_values(spec, target, np.atleast_1d(z))[0])


def drift_min_max(targets, beta: float, points: np.ndarray):
    """Pointwise min and max of mode-normalized V over a finite model set.

    A finite-set stand-in for the parameter-uniform drift envelopes; used
    for reporting only.
    """
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    stack = np.stack([
        drift_values(DriftSpec.mode_normalized(t, beta), t, points)
        for t in targets])
    return stack.min(axis=0), stack.max(axis=0)


def composite_drift(targets, beta: float, alpha: float,
                    points: np.ndarray) -> np.ndarray:
    """V1^alpha * V2^(2 alpha) over a finite model set (reporting only)."""
    if alpha <= 0:
        raise ConfigError("alpha must be > 0")
    v1, v2 = drift_min_max(targets, beta, points)
    return v1 ** alpha * v2 ** (2 * alpha)


# ---------------------------------------------------------------------------
# One-step transition kernels


def make_kernel(model: EnergyModel, cfg: SamplerConfig, seed: int = 0):
    """One-step transition map acting row-wise on an (n, dim) matrix.

    The anisotropic kinds recompute the per-coordinate stepsize from the
    local gradient at the current point, matching the kernel the theory
    analyzes for a fixed parameter vector.
    """
    cfg.validate()
    rng = generator(seed, f"kernel/{cfg.kind.value}")

    def kernel(points: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        kind = cfg.kind
        if kind is SamplerKind.GD:
            return _gd_move(model, pts, cfg.gamma)
        noise = rng.standard_normal(pts.shape)
        if kind is SamplerKind.STANLEY:
            grads = model.grad_x_batch(pts)
            if not np.isfinite(grads.sum()):
                raise DivergenceError("non-finite gradient in kernel")
            steps = _stepsizes_from_grads(grads, cfg)
            return pts + 0.5 * steps * grads + np.sqrt(steps) * (cfg.eps * noise)
        if kind is SamplerKind.ULA:
            return _langevin_move(model, pts, cfg.gamma, cfg.eps, noise)
        unif = rng.random(pts.shape[0])
        if kind is SamplerKind.MALA:
            new, _, _ = _mala_move(model, pts, cfg, noise, unif, None)
            return new
        if kind is SamplerKind.RWMH:
            new, _, _ = _rwmh_move(model, pts, cfg, noise, unif, None)
            return new
        new, _ = _hmc_move(model, pts, cfg, noise, unif)
        return new

    return kernel


def identity_kernel(points: np.ndarray) -> np.ndarray:
    return np.atleast_2d(np.asarray(points, dtype=np.float64)).copy()


def jump_to_mode_kernel(mode):
    mode = np.atleast_1d(np.asarray(mode, dtype=np.float64))

    def kernel(points):
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        return np.tile(mode, (pts.shape[0], 1))

    return kernel


def uniform_box_kernel(radius: float, dim: int, seed: int = 0):
    """IID uniform draws on the hypercube [-radius, radius]^dim."""
    rng = generator(seed, "kernel/uniform-box")

    def kernel(points):
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        return rng.uniform(-radius, radius, size=(pts.shape[0], dim))

    return kernel


def iid_target_kernel(target, seed: int = 0):
    """Exact iid sampling for built-in analytic targets (one-step convergence)."""
    from .energy import GaussianEnergy, MixtureEnergy
    rng = generator(seed, "kernel/iid-target")

    def kernel(points):
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        n = pts.shape[0]
        if isinstance(target, GaussianEnergy):
            return target.mean + target.sigma * rng.standard_normal(
                (n, target.dim))
        if isinstance(target, MixtureEnergy):
            comp = rng.choice(len(target.weights), size=n, p=target.weights)
            return target.means[comp] + target.sigma * rng.standard_normal(
                (n, target.dim))
        raise UnsupportedOperationError(
            "iid sampling only available for Gaussian and mixture targets")

    return kernel


# ---------------------------------------------------------------------------
# Probe report


@dataclass
class ProbeReport:
    minorization_eps: float | None = None
    drift_mu: float | None = None
    drift_mu_se: float | None = None
    drift_delta: float | None = None
    drift_pass: bool | None = None
    rate_rho: float | None = None
    rate_e: float | None = None
    fit_r2: float | None = None
    grid_spec: str = ""


def _grid_rows(grid, dim_hint=None):
    arr = np.asarray(grid, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[:, None]
    if dim_hint is not None and arr.shape[1] != dim_hint:
        raise ConfigError(
            f"grid width {arr.shape[1]} does not match target dim {dim_hint}")
    return arr


def drift_probe(kernel, spec: DriftSpec, target: AnalyticEnergy, grid,
                mc_samples: int) -> ProbeReport:
    """Estimate the one-step drift contraction on a grid.

    For each grid point z the kernel is applied to mc_samples copies and
    (PiV)(z) is the Monte Carlo mean of V at the landing points. The
    contraction estimate mu is the worst (PiV)/V over grid points outside
    the small set (the hypercube of the spec's radius); delta is the worst
    excess (PiV) - mu V inside it. The probe passes when mu is below one
    by more than two standard errors.
    """
    spec.validate()
    if mc_samples < 1000:
        raise ConfigError("mc_samples must be >= 1000")
    points = _grid_rows(grid, target.dim)
    v0 = drift_values(spec, target, points)
    radius = spec.small_set_radius
    inside = np.max(np.abs(points), axis=1) <= radius
    if not np.any(~inside):
        raise ConfigError("grid needs at least one point outside the small set")

    pi_v = np.empty(len(points))
    se = np.empty(len(points))
    for i, z in enumerate(points):
        reps = np.tile(z, (mc_samples, 1))
        try:
            landed = kernel(reps)
        except DivergenceError as err:
            raise DivergenceError(
                f"kernel diverged at grid point {z.tolist()}") from err
        if not np.isfinite(landed).all():
            raise DivergenceError(
                f"kernel diverged at grid point {z.tolist()}")
        v1 = drift_values(spec, target, landed)
        if np.all(v1 == v1[0]):
            # Degenerate transition: the mean is the common value, no noise.
            pi_v[i] = v1[0]
            se[i] = 0.0
        else:
            pi_v[i] = v1.mean()
            se[i] = v1.std(ddof=1) / math.sqrt(mc_samples)

    ratios = pi_v / v0
    ratio_se = se / v0
    out_idx = np.flatnonzero(~inside)
    worst = out_idx[np.argmax(ratios[out_idx])]
    mu = float(ratios[worst])
    mu_se = float(ratio_se[worst])
    if np.any(inside):
        delta = float(np.max(pi_v[inside] - mu * v0[inside]))
    else:
        delta = 0.0
    passed = (mu + 2.0 * mu_se) < 1.0
    report = ProbeReport(
        drift_mu=mu, drift_mu_se=mu_se, drift_delta=delta, drift_pass=passed,
        grid_spec=(f"{len(points)} points, dim {points.shape[1]}, "
                   f"small-set radius {radius}, mc={mc_samples}"))
    return report


def minorization_probe(kernel, target: AnalyticEnergy, small_set_radius: float,
                       grid, mc_samples: int, bins: int = 10) -> float:
    """Histogram lower bound on the minorization constant.

    For each grid point inside the small set (hypercube of the given
    radius), the one-step transition histogram over the same hypercube is
    compared bin-by-bin against the uniform reference density; the
    estimate is the worst bin ratio over all starting points. A transition
    that collapses to a single point returns 0; a diffuse transition that
    leaves reference bins empty raises UndersampledError since more
    samples could still fill them.
    """
    if target.dim not in (1, 2):
        raise UnsupportedOperationError("minorization probe is 1-D/2-D only")
    if small_set_radius <= 0:
        raise ConfigError("small_set_radius must be > 0")
    if mc_samples < 1:
        raise ConfigError("mc_samples must be >= 1")
    points = _grid_rows(grid, target.dim)
    inside = np.max(np.abs(points), axis=1) <= small_set_radius
    if not np.any(inside):
        raise ConfigError("grid has no points inside the small set")
    edges = [np.linspace(-small_set_radius, small_set_radius, bins + 1)
             for _ in range(target.dim)]
    n_bins = bins ** target.dim
    eps_hat = math.inf
    for z in points[inside]:
        landed = kernel(np.tile(z, (mc_samples, 1)))
        if np.ptp(landed, axis=0).max() == 0.0:
            eps_hat = 0.0
            continue
        counts, _ = np.histogramdd(landed, bins=edges)
        if np.any(counts == 0):
            raise UndersampledError(
                f"empty reference bins from start {z.tolist()}; "
                f"increase mc_samples (used {mc_samples})")
        ratios = counts.ravel() * n_bins / mc_samples
        eps_hat = min(eps_hat, float(ratios.min()))
    return eps_hat


# ---------------------------------------------------------------------------
# Geometric rate


def expectation_quadrature(target: AnalyticEnergy, test_fn, box=None,
                           n_points: int = 4097) -> float:
    """E[u] under the target by trapezoid quadrature (1-D/2-D)."""
    if target.log_norm is None:
        raise UnsupportedOperationError("quadrature needs log_norm")
    if box is None:
        box = target.default_box()
    box = tuple(box)
    dim = len(box)
    if dim == 1:
        lo, hi = box[0]
        xs = np.linspace(lo, hi, n_points)
        pts = xs[:, None]
        dens = np.exp(target.eval_batch(pts) - target.log_norm)
        return float(np.trapezoid(test_fn(pts) * dens, xs))
    if dim == 2:
        side = int(math.sqrt(n_points)) | 1
        xs = [np.linspace(lo, hi, side) for lo, hi in box]
        xx, yy = np.meshgrid(xs[0], xs[1], indexing="ij")
        pts = np.column_stack([xx.ravel(), yy.ravel()])
        dens = np.exp(target.eval_batch(pts) - target.log_norm)
        vals = (test_fn(pts) * dens).reshape(side, side)
        inner = np.trapezoid(vals, xs[1], axis=1)
        return float(np.trapezoid(inner, xs[0]))
    raise UnsupportedOperationError("quadrature supports only 1-D/2-D")


def vnorm_distance_curve(kernel, target: AnalyticEnergy, test_fn, z0_set,
                         k_max: int, mc_samples: int,
                         spec: DriftSpec | None = None):
    """V-weighted distance of E[u(z_k) | z0] from the stationary mean.

    Returns (ks, d, floor): distances d_k = max over starting points of
    |estimate - pi u| / V(z0) and the three-standard-error Monte Carlo
    noise floor for the maximizing start at each k.
    """
    if k_max < 1:
        raise ConfigError("k_max must be >= 1")
    if mc_samples < 2:
        raise ConfigError("mc_samples must be >= 2")
    starts = _grid_rows(z0_set, target.dim)
    if spec is None:
        spec = DriftSpec.mode_normalized(target, beta=0.5)
    pi_u = expectation_quadrature(target, test_fn)
    v0 = drift_values(spec, target, starts)

    n_starts = len(starts)
    means = np.empty((k_max, n_starts))
    ses = np.empty((k_max, n_starts))
    for i, z0 in enumerate(starts):
        cloud = np.tile(z0, (mc_samples, 1))
        for k in range(k_max):
            cloud = kernel(cloud)
            u = test_fn(cloud)
            means[k, i] = u.mean()
            ses[k, i] = u.std(ddof=1) / math.sqrt(mc_samples)

    weighted = np.abs(means - pi_u) / v0[None, :]
    idx = np.argmax(weighted, axis=1)
    ks = np.arange(1, k_max + 1)
    d = weighted[np.arange(k_max), idx]
    floor = 3.0 * ses[np.arange(k_max), idx] / v0[idx]
    return ks, d, floor


def fit_geometric_decay(ks, d):
    """Least-squares fit of log d_k = log e + k log rho.

    Returns (e, rho, r_squared); recovers exact geometric inputs exactly.
    """
    ks = np.asarray(ks, dtype=np.float64)
    d = np.asarray(d, dtype=np.float64)
    if ks.size != d.size or ks.size < 2:
        raise ConfigError("need at least two (k, d_k) pairs to fit")
    if np.any(d <= 0):
        raise ConfigError("distances must be positive for a log-linear fit")
    y = np.log(d)
    slope, intercept = np.polyfit(ks, y, 1)
    resid = y - (slope * ks + intercept)
    ss_res = float(np.sum(resid ** 2))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    if ss_tot == 0.0:
        r2 = 1.0 if ss_res < 1e-20 else 0.0
    else:
        r2 = 1.0 - ss_res / ss_tot
    return float(np.exp(intercept)), float(np.exp(slope)), r2


def geometric_rate_fit(kernel, target: AnalyticEnergy, test_fn, z0_set,
                       k_max: int, mc_samples: int,
                       spec: DriftSpec | None = None):
    """Fit the geometric decay rate over the pre-asymptotic window.

    The window is the longest prefix of k whose distance estimates sit
    above the Monte Carlo noise floor; raises WindowTooLongError when no
    usable k remains (all estimates drowned in noise).
    """
    ks, d, floor = vnorm_distance_curve(kernel, target, test_fn, z0_set,
                                        k_max, mc_samples, spec)
    usable = d > floor
    cut = int(np.argmin(usable)) if not usable.all() else len(ks)
    if cut < 2:
        raise WindowTooLongError(
            "distance curve is below the Monte Carlo noise floor almost "
            "immediately; reduce k_max or increase mc_samples")
    e, rho, r2 = fit_geometric_decay(ks[:cut], d[:cut])
    return e, rho, r2


# ---------------------------------------------------------------------------
# Proposal envelope


@dataclass
class EnvelopeReport:
    passed: bool
    a: float
    sigma1: float
    b: float
    sigma2: float
    worst_lower_margin: float
    worst_upper_margin: float

    def __bool__(self) -> bool:
        return self.passed


def _log_iso_normal(diff, sigma, dim):
    return -0.5 * np.sum(diff ** 2, axis=1) / (sigma ** 2) \
        - 0.5 * dim * math.log(2 * math.pi * sigma * sigma)


def proposal_envelope_check(model: EnergyModel, scfg: SamplerConfig,
                            sample_pairs, envelope=None) -> EnvelopeReport:
    """Check the two-Gaussian envelope on the anisotropic proposal density.

    The proposal from z is Gaussian with mean z + gamma(z) grad/2 and
    diagonal covariance eps^2 gamma(z); since every stepsize lies in
    (0, 1], its density is squeezed between scaled zero-mean isotropic
    Gaussians. With ``envelope`` (a, sigma1, b, sigma2) given, verifies
    a n_sigma1(z - y) <= q(z, y) <= b n_sigma2(z - y) on the sampled
    pairs; otherwise derives the tightest constants from the pairs and
    reports them (margins then touch zero by construction).
    """
    scfg.validate()
    if scfg.eps <= 0:
        raise ConfigError("envelope check needs eps > 0")
    z, y = sample_pairs
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    y = np.atleast_2d(np.asarray(y, dtype=np.float64))
    if z.shape != y.shape:
        raise ConfigError("sample pair matrices must share a shape")
    dim = z.shape[1]
    grads = model.grad_x_batch(z)
    steps = _stepsizes_from_grads(grads, scfg)
    mean = z + 0.5 * steps * grads
    var = steps * (scfg.eps ** 2)
    log_q = _log_gauss_diag(y, mean, var)

    if envelope is None:
        sigma1 = scfg.eps * math.sqrt(float(steps.min()))
        sigma2 = scfg.eps  # gamma is clamped at 1
        a = b = None
    else:
        a, sigma1, b, sigma2 = envelope
    diff = z - y
    log_n1 = _log_iso_normal(diff, sigma1, dim)
    log_n2 = _log_iso_normal(diff, sigma2, dim)
    if a is None:
        a = float(np.exp(np.min(log_q - log_n1)))
        b = float(np.exp(np.max(log_q - log_n2)))
    lower = log_q - (math.log(a) + log_n1)
    upper = (math.log(b) + log_n2) - log_q
    worst_lower = float(lower.min())
    worst_upper = float(upper.min())
    passed = worst_lower >= -1e-9 and worst_upper >= -1e-9
    return EnvelopeReport(passed=passed, a=float(a), sigma1=float(sigma1),
                          b=float(b), sigma2=float(sigma2),
                          worst_lower_margin=worst_lower,
                          worst_upper_margin=worst_upper)


# ---------------------------------------------------------------------------
# Chain quality metrics


def ess(chain_trace) -> float:
    """Effective sample size with initial-positive-sequence truncation.

    Autocorrelations are summed in Geyer pairs until the first
    non-positive pair; the integrated time is clamped at one so the
    result never exceeds the series length.
    """
    x = np.asarray(chain_trace, dtype=np.float64).ravel()
    n = x.size
    if n < 10:
        raise ValueError("ESS needs a series of length >= 10")
    centered = x - x.mean()
    var = float(np.dot(centered, centered)) / n
    if var == 0.0:
        raise ValueError("ESS undefined for a constant series")
    nfft = 1 << (2 * n - 1).bit_length()
    spec = np.fft.rfft(centered, nfft)
    acov = np.fft.irfft(spec * np.conj(spec), nfft)[:n].real / n
    rho = acov / acov[0]
    total = 0.0
    k = 0
    while 2 * k + 1 < n:
        pair = rho[2 * k] + rho[2 * k + 1]
        if pair <= 0.0:
            break
        total += pair
        k += 1
    tau = max(1.0, 2.0 * total - 1.0)
    return n / tau


def mmd(a, b, bandwidth: float) -> float:
    """Unbiased squared maximum mean discrepancy, Gaussian kernel
    exp(-||x - y||^2 / (2 bandwidth^2))."""
    if bandwidth <= 0:
        raise ConfigError("bandwidth must be > 0")
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise ConfigError("both sample sets must be nonempty")
    if a.shape[1] != b.shape[1]:
        raise ConfigError("sample sets must share a dimension")
    m, n = a.shape[0], b.shape[0]
    scale = -0.5 / (bandwidth ** 2)
    kaa = np.exp(scale * cdist(a, a, "sqeuclidean"))
    kbb = np.exp(scale * cdist(b, b, "sqeuclidean"))
    kab = np.exp(scale * cdist(a, b, "sqeuclidean"))
    term_a = (kaa.sum() - np.trace(kaa)) / (m * (m - 1)) if m > 1 else 0.0
    term_b = (kbb.sum() - np.trace(kbb)) / (n * (n - 1)) if n > 1 else 0.0
    term_ab = 2.0 * kab.mean()
    return float(term_a + term_b - term_ab)


@dataclass
class HistKLResult:
    """KL value plus how much sample mass fell outside the histogram box."""
    value: float
    outside_fraction: float
    box_too_small: bool

    def __float__(self) -> float:
        return self.value


def _normalize_box(box, dim):
    box = tuple(box)
    if len(box) == 2 and not hasattr(box[0], "__len__"):
        box = (box,)
    if len(box) != dim:
        raise ConfigError(f"box must give {dim} (lo, hi) ranges")
    return tuple((float(lo), float(hi)) for lo, hi in box)


def hist_kl(samples, target: AnalyticEnergy, bins: int, box) -> HistKLResult:
    """KL(empirical histogram || per-bin target mass), Laplace-smoothed.

    The target mass per bin comes from a midpoint subgrid; one pseudo
    count per bin is added on both sides (the empirical smoothing and the
    matching floor that keeps far-tail target bins off exact zero), and
    both are normalized over the box, so the value is a proper divergence
    between bin distributions (nonnegative). More than 5% of samples
    outside the box flags box_too_small in the result metadata.
    """
    if target.dim not in (1, 2):
        raise UnsupportedOperationError("hist_kl supports 1-D/2-D targets")
    if target.log_norm is None:
        raise UnsupportedOperationError("hist_kl needs the target log_norm")
    if bins < 1:
        raise ConfigError("bins must be >= 1")
    samples = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    if samples.shape[1] != target.dim:
        raise ConfigError("sample width does not match target dim")
    box = _normalize_box(box, target.dim)
    edges = [np.linspace(lo, hi, bins + 1) for lo, hi in box]
    counts, _ = np.histogramdd(samples, bins=edges)
    counts = counts.ravel()
    n_in = counts.sum()
    outside = 1.0 - n_in / samples.shape[0]
    p = (counts + 1.0) / (n_in + counts.size)

    # Target mass per bin: 3^dim midpoint subsamples per bin.
    sub = 3
    mids = []
    for lo, hi in box:
        width = (hi - lo) / bins
        offsets = (np.arange(sub) + 0.5) / sub
        mids.append((lo + width * (np.arange(bins)[:, None] + offsets[None, :]))
                    .ravel())
    if target.dim == 1:
        pts = mids[0][:, None]
        dens = np.exp(target.eval_batch(pts) - target.log_norm)
        q = dens.reshape(bins, sub).mean(axis=1)
    else:
        xx, yy = np.meshgrid(mids[0], mids[1], indexing="ij")
        pts = np.column_stack([xx.ravel(), yy.ravel()])
        dens = np.exp(target.eval_batch(pts) - target.log_norm)
        dens = dens.reshape(bins, sub, bins, sub).mean(axis=(1, 3))
        q = dens.ravel()
    q = q / q.sum()
    q = (q * n_in + 1.0) / (n_in + counts.size)
    kl = float(np.sum(p * np.log(p / q)))
    return HistKLResult(value=kl, outside_fraction=float(outside),
                        box_too_small=bool(outside > 0.05))
