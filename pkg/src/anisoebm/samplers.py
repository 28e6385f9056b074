"""Markov transition kernels over parallel chain ensembles.

The anisotropic-stepsize Langevin kernel clamps each coordinate's step by
the local gradient magnitude, gamma_i = th / max(th, |g_i|), and updates

    z <- z + gamma * grad f(z) / 2 + sqrt(gamma) * (eps * xi),

elementwise, with xi standard normal. Vanilla (constant scalar step)
Langevin, its Metropolis-adjusted version, random-walk MH, HMC, and the
noise-free gradient ascent ablation share the same ensemble plumbing.

Chains carry independent noise and acceptance RNG streams, so transitions
are reproducible per chain and `run_chain` can pre-draw noise in blocks
without changing any trajectory (stream partitioning is draw-order
invariant for a fixed sequence of values per stream).
"""
from __future__ import annotations

import copy
import enum
import math
from dataclasses import dataclass, field

import numpy as np

from .data import atomic_write_text
from .energy import EnergyModel
from .errors import ConfigError, DivergenceError
from .rng import substream


class SamplerKind(enum.Enum):
    STANLEY = "stanley"
    ULA = "ula"
    MALA = "mala"
    RWMH = "rwmh"
    HMC = "hmc"
    GD = "gd"


class StepsizeRefresh(enum.Enum):
    PER_OUTER = "outer"
    PER_STEP = "step"


class StepsizeMode(enum.Enum):
    """Elementwise |grad| clamp (the anisotropic rule) or a scalar-norm
    ablation using ||grad||_2 per chain."""
    ELEMENTWISE = "elementwise"
    SCALAR = "scalar"


@dataclass
class SamplerConfig:
    kind: SamplerKind = SamplerKind.STANLEY
    th: float = 0.01
    eps: float = 1.0
    K: int = 100
    gamma: float = 0.14
    stepsize_refresh: StepsizeRefresh = StepsizeRefresh.PER_OUTER
    stepsize_mode: StepsizeMode = StepsizeMode.ELEMENTWISE
    mala_anisotropic: bool = False
    hmc_leapfrog: int = 10
    hmc_step: float = 0.1
    rwmh_sigma: float = 1.0

    def validate(self):
        if self.th <= 0:
            raise ConfigError("th must be > 0")
        if self.eps < 0:
            raise ConfigError("eps must be >= 0")
        if self.K < 1:
            raise ConfigError("K must be >= 1")
        if self.gamma < 0:
            raise ConfigError("gamma must be >= 0")
        if self.hmc_leapfrog < 1:
            raise ConfigError("hmc_leapfrog must be >= 1")
        if self.hmc_step < 0:
            raise ConfigError("hmc_step must be >= 0")
        if self.rwmh_sigma < 0:
            raise ConfigError("rwmh_sigma must be >= 0")
        if self.kind is SamplerKind.MALA and self.eps == 0:
            raise ConfigError("MALA requires eps > 0 (proposal density)")
        return self


@dataclass
class ChainEnsemble:
    """M parallel chain states with per-coordinate stepsizes and RNG streams."""

    states: np.ndarray
    stepsizes: np.ndarray
    noise_rngs: list
    accept_rngs: list
    accept_counts: np.ndarray
    steps_taken: int = 0

    @classmethod
    def create(cls, states, seed: int = 0, name: str = "chains",
               seed_seq: np.random.SeedSequence | None = None) -> "ChainEnsemble":
        states = np.array(states, dtype=np.float64, copy=True)
        if states.ndim != 2:
            raise ConfigError("states must be an (M, dim) matrix")
        m = states.shape[0]
        ss = seed_seq if seed_seq is not None else substream(seed, name)
        noise_rngs, accept_rngs = [], []
        for child in ss.spawn(m):
            noise_ss, accept_ss = child.spawn(2)
            noise_rngs.append(np.random.Generator(np.random.PCG64(noise_ss)))
            accept_rngs.append(np.random.Generator(np.random.PCG64(accept_ss)))
        return cls(states=states, stepsizes=np.ones_like(states),
                   noise_rngs=noise_rngs, accept_rngs=accept_rngs,
                   accept_counts=np.zeros(m, dtype=np.int64))

    @property
    def n_chains(self) -> int:
        return self.states.shape[0]

    @property
    def dim(self) -> int:
        return self.states.shape[1]

    def accept_rate(self) -> float:
        total = self.steps_taken * self.n_chains
        return float(self.accept_counts.sum()) / total if total else math.nan

    def with_states(self, states: np.ndarray) -> "ChainEnsemble":
        """Same streams and counters, replaced states (chain init policies)."""
        states = np.array(states, dtype=np.float64, copy=True)
        if states.shape != self.states.shape:
            raise ConfigError("replacement states must match ensemble shape")
        return ChainEnsemble(states=states, stepsizes=np.ones_like(states),
                             noise_rngs=self.noise_rngs,
                             accept_rngs=self.accept_rngs,
                             accept_counts=self.accept_counts,
                             steps_taken=self.steps_taken)

    def clone(self) -> "ChainEnsemble":
        return copy.deepcopy(self)


def _first_bad_row(arr: np.ndarray) -> int:
    bad = ~np.isfinite(arr).all(axis=tuple(range(1, arr.ndim)))
    return int(np.argmax(bad))


def anisotropic_stepsize(grad, th: float) -> np.ndarray:
    """Per-coordinate stepsize th / max(th, |g_i|), always in (0, 1]."""
    if th <= 0:
        raise ConfigError("th must be > 0")
    grad = np.asarray(grad, dtype=np.float64)
    if not np.isfinite(grad).all():
        raise DivergenceError("non-finite gradient entry in stepsize rule")
    return th / np.maximum(th, np.abs(grad))


def refresh_stepsizes(model: EnergyModel, ens: ChainEnsemble,
                      cfg: SamplerConfig) -> ChainEnsemble:
    """Recompute the ensemble's stepsize matrix from current states."""
    grads = model.grad_x_batch(ens.states)
    if not np.isfinite(grads).all():
        raise DivergenceError("non-finite gradient while refreshing stepsizes",
                              chain=_first_bad_row(grads),
                              step=ens.steps_taken)
    ens.stepsizes = _stepsizes_from_grads(grads, cfg)
    return ens


# ---------------------------------------------------------------------------
# Noise gathering (public per-step entry points)


def _draw_normals(ens: ChainEnsemble) -> np.ndarray:
    return np.stack([g.standard_normal(ens.dim) for g in ens.noise_rngs])


def _draw_uniforms(ens: ChainEnsemble) -> np.ndarray:
    return np.array([g.random() for g in ens.accept_rngs])


# ---------------------------------------------------------------------------
# Pure update rules on plain state matrices (no drawing, no ensemble).
# Shared by the public per-step ops, run_chain, and the diagnostics kernels.


def _grads_checked(model, states, step_index):
    grads = model.grad_x_batch(states)
    if not np.isfinite(grads.sum()):
        raise DivergenceError("non-finite gradient during transition",
                              chain=_first_bad_row(grads), step=step_index)
    return grads


def _stepsizes_from_grads(grads, cfg):
    if cfg.stepsize_mode is StepsizeMode.SCALAR:
        norms = np.linalg.norm(grads, axis=1, keepdims=True)
        return cfg.th / np.maximum(cfg.th, np.broadcast_to(norms, grads.shape))
    return cfg.th / np.maximum(cfg.th, np.abs(grads))


def _langevin_move(model, states, step, eps, noise, step_index=0):
    grads = _grads_checked(model, states, step_index)
    return states + 0.5 * step * grads + np.sqrt(step) * (eps * noise)


def _gd_move(model, states, gamma, step_index=0):
    grads = _grads_checked(model, states, step_index)
    return states + 0.5 * gamma * grads


def _log_gauss_diag(x, mean, var):
    # Sum of independent log-normal-pdf terms per row; var is (M, dim).
    return -0.5 * np.sum((x - mean) ** 2 / var + np.log(2 * math.pi * var),
                         axis=1)


def _mala_move(model, states, cfg, noise, unif, cache, step_index=0):
    """Returns (new_states, accept_mask, new_cache)."""
    if cache is None:
        cache = (model.eval_batch(states), model.grad_x_batch(states))
    f_cur, g_cur = cache
    if not np.isfinite(g_cur.sum()):
        raise DivergenceError("non-finite gradient during transition",
                              chain=_first_bad_row(g_cur), step=step_index)
    if cfg.mala_anisotropic:
        step_fwd = _stepsizes_from_grads(g_cur, cfg)
    else:
        step_fwd = np.full_like(states, cfg.gamma)
    var_fwd = step_fwd * (cfg.eps ** 2)
    mean_fwd = states + 0.5 * step_fwd * g_cur
    proposal = mean_fwd + np.sqrt(step_fwd) * (cfg.eps * noise)

    f_prop = model.eval_batch(proposal)
    g_prop = model.grad_x_batch(proposal)
    if cfg.mala_anisotropic:
        step_rev = _stepsizes_from_grads(g_prop, cfg)
    else:
        step_rev = step_fwd
    var_rev = step_rev * (cfg.eps ** 2)
    mean_rev = proposal + 0.5 * step_rev * g_prop

    log_q_fwd = _log_gauss_diag(proposal, mean_fwd, var_fwd)
    log_q_rev = _log_gauss_diag(states, mean_rev, var_rev)
    log_rho = (f_prop - f_cur) + (log_q_rev - log_q_fwd)
    with np.errstate(divide="ignore", invalid="ignore"):
        accept = np.log(unif) < log_rho
    new_states = np.where(accept[:, None], proposal, states)
    f_new = np.where(accept, f_prop, f_cur)
    g_new = np.where(accept[:, None], g_prop, g_cur)
    return new_states, accept, (f_new, g_new)


def _rwmh_move(model, states, cfg, noise, unif, cache, step_index=0):
    """Returns (new_states, accept_mask, new_cache)."""
    if cache is None:
        cache = model.eval_batch(states)
    f_cur = cache
    proposal = states + cfg.rwmh_sigma * noise
    f_prop = model.eval_batch(proposal)
    with np.errstate(divide="ignore", invalid="ignore"):
        accept = np.log(unif) < (f_prop - f_cur)
    new_states = np.where(accept[:, None], proposal, states)
    return new_states, accept, np.where(accept, f_prop, f_cur)


def _hmc_move(model, states, cfg, momentum, unif, step_index=0):
    """Returns (new_states, accept_mask).

    A trajectory that blows up numerically yields a non-finite energy
    error and is rejected, which keeps the chain state finite (the usual
    divergent-transition handling).
    """
    h = cfg.hmc_step
    with np.errstate(over="ignore", invalid="ignore"):
        f0 = model.eval_batch(states)
        h0 = -f0 + 0.5 * np.sum(momentum ** 2, axis=1)
        z, p = leapfrog(model, states, momentum, h, cfg.hmc_leapfrog)
        f1 = model.eval_batch(z)
        h1 = -f1 + 0.5 * np.sum(p ** 2, axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        accept = np.log(unif) < (h0 - h1)
        accept &= np.isfinite(h1)
    return np.where(accept[:, None], z, states), accept


# ---------------------------------------------------------------------------
# Ensemble wrappers: counters and divergence context


def _check_states(ens: ChainEnsemble):
    if not np.isfinite(ens.states.sum()):
        raise DivergenceError("non-finite chain state after transition",
                              chain=_first_bad_row(ens.states),
                              step=ens.steps_taken)


def _langevin_apply(model, ens, step_matrix, eps, noise):
    ens.states = _langevin_move(model, ens.states, step_matrix, eps, noise,
                                ens.steps_taken)
    ens.steps_taken += 1
    _check_states(ens)


def _gd_apply(model, ens, gamma):
    ens.states = _gd_move(model, ens.states, gamma, ens.steps_taken)
    ens.steps_taken += 1
    _check_states(ens)


def _mala_apply(model, ens, cfg, noise, unif, cache):
    ens.states, accept, cache = _mala_move(model, ens.states, cfg, noise,
                                           unif, cache, ens.steps_taken)
    ens.accept_counts += accept.astype(np.int64)
    ens.steps_taken += 1
    _check_states(ens)
    return cache


def _rwmh_apply(model, ens, cfg, noise, unif, cache):
    ens.states, accept, cache = _rwmh_move(model, ens.states, cfg, noise,
                                           unif, cache, ens.steps_taken)
    ens.accept_counts += accept.astype(np.int64)
    ens.steps_taken += 1
    _check_states(ens)
    return cache


def _hmc_apply(model, ens, cfg, momentum, unif):
    ens.states, accept = _hmc_move(model, ens.states, cfg, momentum, unif,
                                   ens.steps_taken)
    ens.accept_counts += accept.astype(np.int64)
    ens.steps_taken += 1
    _check_states(ens)


def leapfrog(model: EnergyModel, z: np.ndarray, p: np.ndarray,
             step: float, n_steps: int):
    """Leapfrog integration of H(z, p) = -f(z) + ||p||^2 / 2.

    Returns (z', p'); exposed for the energy-conservation checks.
    """
    z = np.array(z, dtype=np.float64, copy=True)
    p = np.array(p, dtype=np.float64, copy=True)
    g = model.grad_x_batch(z)
    p = p + 0.5 * step * g
    for i in range(n_steps):
        z = z + step * p
        g = model.grad_x_batch(z)
        if i < n_steps - 1:
            p = p + step * g
    p = p + 0.5 * step * g
    return z, p


def hamiltonian(model: EnergyModel, z: np.ndarray, p: np.ndarray) -> np.ndarray:
    return -model.eval_batch(z) + 0.5 * np.sum(p ** 2, axis=1)


# ---------------------------------------------------------------------------
# Public single transitions


def stanley_step(model, ens, cfg) -> ChainEnsemble:
    """One anisotropic Langevin transition using the ensemble's stepsizes."""
    _langevin_apply(model, ens, ens.stepsizes, cfg.eps, _draw_normals(ens))
    return ens


def ula_step(model, ens, cfg) -> ChainEnsemble:
    """One vanilla Langevin transition with the scalar stepsize cfg.gamma."""
    _langevin_apply(model, ens, cfg.gamma, cfg.eps, _draw_normals(ens))
    return ens


def gd_step(model, ens, cfg) -> ChainEnsemble:
    """Noise-free gradient ascent: the Langevin drift term alone."""
    _gd_apply(model, ens, cfg.gamma)
    return ens


def mala_step(model, ens, cfg) -> ChainEnsemble:
    """Metropolis-adjusted Langevin transition.

    Proposes with the Langevin mean and diagonal covariance eps^2 * gamma
    and accepts with min(1, pi(y) q(y,z) / (pi(z) q(z,y))); the normalizer
    cancels. With cfg.mala_anisotropic the per-coordinate stepsizes are
    recomputed from the local gradient on both the forward and reverse
    sides, keeping the kernel exactly stationary for the target.
    """
    _mala_apply(model, ens, cfg, _draw_normals(ens), _draw_uniforms(ens), None)
    return ens


def rwmh_step(model, ens, cfg) -> ChainEnsemble:
    """Gaussian random-walk Metropolis transition."""
    _rwmh_apply(model, ens, cfg, _draw_normals(ens), _draw_uniforms(ens), None)
    return ens


def hmc_step(model, ens, cfg) -> ChainEnsemble:
    """Hamiltonian transition: fresh momentum, leapfrog, energy-error MH."""
    _hmc_apply(model, ens, cfg, _draw_normals(ens), _draw_uniforms(ens))
    return ens


_STEP_FNS = {
    SamplerKind.STANLEY: stanley_step,
    SamplerKind.ULA: ula_step,
    SamplerKind.GD: gd_step,
    SamplerKind.MALA: mala_step,
    SamplerKind.RWMH: rwmh_step,
    SamplerKind.HMC: hmc_step,
}


def run_chain(model, ens, cfg, steps: int, hook=None) -> ChainEnsemble:
    """Apply the configured kernel `steps` times.

    With PER_STEP refresh the anisotropic stepsizes are recomputed before
    every transition; with PER_OUTER they are left exactly as supplied
    (the caller computes them once per outer iteration). Noise is
    pre-drawn in blocks per chain stream, which leaves every trajectory
    bit-identical to repeated single-step calls.
    """
    cfg.validate()
    if steps == 0:
        return ens
    if steps < 0:
        raise ConfigError("steps must be >= 0")
    kind = cfg.kind
    per_step_refresh = (kind is SamplerKind.STANLEY
                        and cfg.stepsize_refresh is StepsizeRefresh.PER_STEP)
    needs_noise = kind is not SamplerKind.GD
    needs_unif = kind in (SamplerKind.MALA, SamplerKind.RWMH, SamplerKind.HMC)
    dim = ens.dim
    cache = None
    done = 0
    chunk_size = 4096
    while done < steps:
        b = min(chunk_size, steps - done)
        noise = None
        unif = None
        if needs_noise:
            noise = np.stack(
                [g.standard_normal(b * dim).reshape(b, dim)
                 for g in ens.noise_rngs], axis=1)
        if needs_unif:
            unif = np.stack([g.random(b) for g in ens.accept_rngs], axis=1)
        for k in range(b):
            if per_step_refresh:
                refresh_stepsizes(model, ens, cfg)
            if kind is SamplerKind.STANLEY:
                _langevin_apply(model, ens, ens.stepsizes, cfg.eps, noise[k])
            elif kind is SamplerKind.ULA:
                _langevin_apply(model, ens, cfg.gamma, cfg.eps, noise[k])
            elif kind is SamplerKind.GD:
                _gd_apply(model, ens, cfg.gamma)
            elif kind is SamplerKind.MALA:
                cache = _mala_apply(model, ens, cfg, noise[k], unif[k], cache)
            elif kind is SamplerKind.RWMH:
                cache = _rwmh_apply(model, ens, cfg, noise[k], unif[k], cache)
            else:
                _hmc_apply(model, ens, cfg, noise[k], unif[k])
            if hook is not None:
                hook(done + k + 1, ens)
        done += b
    return ens


def write_trajectory_csv(path, snapshots):
    """Long-format trajectory export: step, chain, coordinate index, value."""
    lines = ["step,chain,coord,value"]
    for step, states in snapshots:
        states = np.asarray(states)
        for m in range(states.shape[0]):
            for c in range(states.shape[1]):
                lines.append(f"{step},{m},{c},{'%.17g' % states[m, c]}")
    atomic_write_text(path, "\n".join(lines) + "\n")
