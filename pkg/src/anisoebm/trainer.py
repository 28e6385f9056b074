"""Maximum-likelihood EBM training with short-run MCMC negatives.

One outer iteration: refresh the anisotropic stepsizes from the current
chain states, run K transitions to draw negatives, sample a positive
minibatch, form the Monte Carlo gradient

    (1/n) sum_i d f(x_i)/d theta  -  (1/M) sum_m d f(z_m)/d theta,

and ascend (SGD or Adam). Chains may persist across iterations, restart
from noise, or restart from data rows.
"""
from __future__ import annotations

import enum
import hashlib
import time
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset, gmm_sampler, rings_generator
from .energy import (AnalyticEnergy, EnergyModel, GaussianEnergy, NeuralEnergy,
                     ParamVector, RingsEnergy)
from .errors import ConfigError, DimensionMismatchError, DivergenceError
from .rng import generator, substream
from .samplers import (ChainEnsemble, SamplerConfig, SamplerKind,
                       StepsizeRefresh, refresh_stepsizes, run_chain)


class Optimizer(enum.Enum):
    SGD = "sgd"
    ADAM = "adam"


class InitPolicy(enum.Enum):
    NOISE = "noise"
    PERSISTENT = "persistent"
    DATA = "data"


@dataclass
class TrainConfig:
    T: int = 10000
    M: int = 100
    n: int = 100
    eta: float | tuple = 1e-4
    optimizer: Optimizer = Optimizer.SGD
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    init_policy: InitPolicy = InitPolicy.PERSISTENT
    sigma0: float = 0.15
    checkpoint_every: int = 2000
    seed: int = 0

    def validate(self):
        if self.T < 0:
            raise ConfigError("T must be >= 0")
        if self.M < 1:
            raise ConfigError("M must be >= 1")
        if self.n < 1:
            raise ConfigError("n must be >= 1")
        etas = self.eta if isinstance(self.eta, (tuple, list)) else (self.eta,)
        if not etas or any(e <= 0 for e in etas):
            raise ConfigError("eta entries must be > 0")
        if self.checkpoint_every < 1:
            raise ConfigError("checkpoint_every must be >= 1")
        if self.sigma0 < 0:
            raise ConfigError("sigma0 must be >= 0")
        return self

    def eta_at(self, t: int) -> float:
        if isinstance(self.eta, (tuple, list)):
            return float(self.eta[min(t - 1, len(self.eta) - 1)])
        return float(self.eta)


@dataclass
class TrainState:
    theta: ParamVector
    ensemble: ChainEnsemble | None
    iter: int = 0
    adam_m: ParamVector | None = None
    adam_v: ParamVector | None = None
    adam_t: int = 0

    @classmethod
    def fresh(cls, theta: ParamVector) -> "TrainState":
        return cls(theta=theta.copy(), ensemble=None, iter=0,
                   adam_m=theta.zeros_like(), adam_v=theta.zeros_like(),
                   adam_t=0)


def grad_estimator(model: EnergyModel, positives, negatives) -> ParamVector:
    """Monte Carlo MLE gradient: positive-batch mean minus negative-batch mean."""
    positives = np.atleast_2d(np.asarray(positives, dtype=np.float64))
    negatives = np.atleast_2d(np.asarray(negatives, dtype=np.float64))
    if positives.shape[0] == 0 or negatives.shape[0] == 0:
        raise ConfigError("gradient estimator needs at least one positive "
                          "and one negative sample")
    for name, batch in (("positives", positives), ("negatives", negatives)):
        if batch.shape[1] != model.dim:
            raise DimensionMismatchError(model.dim, batch.shape[1], name)
    values = model.grad_theta_batch_mean(positives) \
        - model.grad_theta_batch_mean(negatives)
    if values.size and not np.isfinite(values).all():
        raise DivergenceError("non-finite parameter gradient")
    return ParamVector(values, model.param.layout)


def sgd_update(theta: ParamVector, grad: ParamVector, eta: float) -> ParamVector:
    """Ascent step theta + eta * grad."""
    if eta <= 0:
        raise ConfigError("eta must be > 0")
    if len(grad) != len(theta):
        raise DimensionMismatchError(len(theta), len(grad), "gradient")
    return ParamVector(theta.values + eta * grad.values, theta.layout)


def adam_update(state: TrainState, grad: ParamVector, eta: float,
                beta1: float = 0.9, beta2: float = 0.999,
                eps: float = 1e-8) -> TrainState:
    """Adam step (ascent orientation) with bias correction."""
    if len(grad) != len(state.theta):
        raise DimensionMismatchError(len(state.theta), len(grad), "gradient")
    g = grad.values
    state.adam_t += 1
    t = state.adam_t
    m = beta1 * state.adam_m.values + (1 - beta1) * g
    v = beta2 * state.adam_v.values + (1 - beta2) * g * g
    m_hat = m / (1 - beta1 ** t)
    v_hat = v / (1 - beta2 ** t)
    new_values = state.theta.values + eta * m_hat / (np.sqrt(v_hat) + eps)
    state.adam_m = ParamVector(m, state.theta.layout)
    state.adam_v = ParamVector(v, state.theta.layout)
    state.theta = ParamVector(new_values, state.theta.layout)
    return state


def init_negatives(policy: InitPolicy, prior_ensemble: ChainEnsemble | None,
                   data: np.ndarray | None, M: int, *, dim: int | None = None,
                   sigma0: float = 0.15,
                   init_rng: np.random.Generator | None = None,
                   seed_seq=None) -> ChainEnsemble:
    """Choose the chain states for one outer iteration.

    NOISE draws iid N(0, sigma0^2 I); PERSISTENT passes the prior ensemble
    through untouched; DATA draws M rows uniformly from the dataset.
    """
    if policy is InitPolicy.PERSISTENT:
        if prior_ensemble is None:
            raise ConfigError("PERSISTENT initialization requires a prior ensemble")
        return prior_ensemble
    if init_rng is None:
        init_rng = np.random.default_rng(0)
    if policy is InitPolicy.NOISE:
        if dim is None:
            dim = prior_ensemble.dim if prior_ensemble is not None else None
        if dim is None:
            raise ConfigError("NOISE initialization requires the sample dimension")
        states = sigma0 * init_rng.standard_normal((M, dim))
    elif policy is InitPolicy.DATA:
        if data is None or len(data) == 0:
            raise ConfigError("DATA initialization requires a nonempty dataset")
        data = np.atleast_2d(np.asarray(data, dtype=np.float64))
        idx = init_rng.integers(0, data.shape[0], size=M)
        states = data[idx]
    else:
        raise ConfigError(f"unknown init policy {policy}")
    if prior_ensemble is not None:
        return prior_ensemble.with_states(states)
    return ChainEnsemble.create(states, seed_seq=seed_seq)


def train_ebm(model: EnergyModel, data, tcfg: TrainConfig, scfg: SamplerConfig,
              hooks=None) -> TrainState:
    """Run the full training loop; deterministic given tcfg.seed.

    Hooks are called as hook(iter, theta, ensemble, metrics) at iteration 0
    and every checkpoint_every iterations. Raises DivergenceError (with the
    last checkpointed iteration attached) if any state, gradient, or
    parameter turns non-finite.
    """
    tcfg.validate()
    scfg.validate()
    rows = data.rows if isinstance(data, Dataset) else \
        np.atleast_2d(np.asarray(data, dtype=np.float64))
    if rows.shape[0] == 0:
        raise ConfigError("training data is empty")
    if rows.shape[1] != model.dim:
        raise DimensionMismatchError(model.dim, rows.shape[1], "data rows")
    if not np.isfinite(model.param.values).all():
        raise DivergenceError("initial parameters are non-finite")
    if hooks is None:
        hooks = []
    elif callable(hooks):
        hooks = [hooks]

    minibatch_rng = generator(tcfg.seed, "minibatch")
    init_rng = generator(tcfg.seed, "chain-init")
    chains_ss = substream(tcfg.seed, f"chains/{scfg.kind.value}")

    state = TrainState.fresh(model.param)
    ens = ChainEnsemble.create(
        tcfg.sigma0 * init_rng.standard_normal((tcfg.M, model.dim)),
        seed_seq=chains_ss)
    state.ensemble = ens

    batch_hash = hashlib.sha256()
    last_checkpoint = 0
    prev_counts = 0
    prev_steps = 0
    wall_acc = 0.0
    iters_acc = 0
    last_grad_norm = float("nan")
    adjusted = scfg.kind in (SamplerKind.MALA, SamplerKind.RWMH, SamplerKind.HMC)

    def emit(t):
        nonlocal prev_counts, prev_steps, wall_acc, iters_acc
        dsteps = (ens.steps_taken - prev_steps) * ens.n_chains
        if adjusted and dsteps > 0:
            rate = (int(ens.accept_counts.sum()) - prev_counts) / dsteps
        else:
            rate = float("nan")
        metrics = {
            "iter": t,
            "grad_norm": last_grad_norm,
            "accept_rate": rate,
            "wall_ms": (wall_acc / iters_acc * 1000.0) if iters_acc else 0.0,
            "minibatch_hash": batch_hash.hexdigest(),
        }
        prev_counts = int(ens.accept_counts.sum())
        prev_steps = ens.steps_taken
        wall_acc = 0.0
        iters_acc = 0
        for hook in hooks:
            hook(t, state.theta, ens, metrics)

    emit(0)
    try:
        for t in range(1, tcfg.T + 1):
            tic = time.perf_counter()
            ens = init_negatives(tcfg.init_policy, ens, rows, tcfg.M,
                                 dim=model.dim, sigma0=tcfg.sigma0,
                                 init_rng=init_rng)
            if scfg.kind is SamplerKind.STANLEY and \
                    scfg.stepsize_refresh is StepsizeRefresh.PER_OUTER:
                refresh_stepsizes(model, ens, scfg)
            run_chain(model, ens, scfg, scfg.K)

            idx = minibatch_rng.integers(0, rows.shape[0], size=tcfg.n)
            batch_hash.update(idx.astype("<i8").tobytes())
            positives = rows[idx]
            grad = grad_estimator(model, positives, ens.states)
            last_grad_norm = float(np.linalg.norm(grad.values))

            if tcfg.optimizer is Optimizer.ADAM:
                adam_update(state, grad, tcfg.eta_at(t), tcfg.adam_beta1,
                            tcfg.adam_beta2, tcfg.adam_eps)
            else:
                state.theta = sgd_update(state.theta, grad, tcfg.eta_at(t))
            model.param = state.theta
            state.theta = model.param
            state.iter = t
            state.ensemble = ens

            wall_acc += time.perf_counter() - tic
            iters_acc += 1
            if t % tcfg.checkpoint_every == 0:
                emit(t)
                last_checkpoint = t
    except DivergenceError as err:
        err.last_checkpoint = last_checkpoint
        raise
    return state


def draw_model_samples(model: EnergyModel, scfg: SamplerConfig, n_samples: int,
                       sigma0: float = 0.15, seed: int = 0,
                       name: str = "eval-chains") -> np.ndarray:
    """Short-run sampling from the current model: noise init, K transitions."""
    init_rng = generator(seed, f"{name}/init")
    ens = ChainEnsemble.create(
        sigma0 * init_rng.standard_normal((n_samples, model.dim)),
        seed_seq=substream(seed, name))
    if scfg.kind is SamplerKind.STANLEY and \
            scfg.stepsize_refresh is StepsizeRefresh.PER_OUTER:
        refresh_stepsizes(model, ens, scfg)
    run_chain(model, ens, scfg, scfg.K)
    return ens.states


# ---------------------------------------------------------------------------
# Named recipes


@dataclass
class Recipe:
    """A model/data/config bundle plus the analytic target used for metrics."""
    name: str
    model: EnergyModel
    data: Dataset
    target: AnalyticEnergy | None
    tcfg: TrainConfig
    scfg: SamplerConfig
    eval_box: tuple
    eval_bins: int


def toy_rings_recipe(seed: int = 0, kind: SamplerKind = SamplerKind.STANLEY,
                     T: int = 10000, n_data: int = 10000) -> Recipe:
    """2-D rings: neural energy, K=100, th=0.01, eta=1e-4, sigma0=0.15."""
    target = RingsEnergy(radii=(0.5, 1.0, 1.5), width=0.05)
    data = rings_generator(n_data, radii=target.radii, width=target.width,
                           seed=seed)
    model = NeuralEnergy(2, hidden=(32, 64), leak=0.05,
                         init_rng=generator(seed, "model-init"))
    tcfg = TrainConfig(T=T, M=100, n=100, eta=1e-4, optimizer=Optimizer.SGD,
                       init_policy=InitPolicy.PERSISTENT, sigma0=0.15,
                       checkpoint_every=2000, seed=seed)
    scfg = SamplerConfig(kind=kind, th=0.01, eps=1.0, K=100, gamma=0.14,
                         stepsize_refresh=StepsizeRefresh.PER_OUTER)
    box = ((-2.0, 2.0), (-2.0, 2.0))
    return Recipe("toy-rings", model, data, target, tcfg, scfg, box, 50)


def gauss_mean_recipe(seed: int = 0, kind: SamplerKind = SamplerKind.MALA,
                      T: int = 2000, n_data: int = 4000) -> Recipe:
    """1-D Gaussian mean family: exact-sampler MLE recovers the data mean."""
    data = gmm_sampler(n_data, means=[[5.0]], sigma=1.0, weights=[1.0],
                       seed=seed)
    model = GaussianEnergy([0.0], sigma=1.0)
    target = GaussianEnergy([5.0], sigma=1.0)
    tcfg = TrainConfig(T=T, M=64, n=64, eta=0.01, optimizer=Optimizer.SGD,
                       init_policy=InitPolicy.PERSISTENT, sigma0=1.0,
                       checkpoint_every=500, seed=seed)
    scfg = SamplerConfig(kind=kind, gamma=0.5, eps=1.0, K=20, th=0.01)
    return Recipe("gauss-mean", model, data, target, tcfg, scfg,
                  ((-1.0, 11.0),), 50)
