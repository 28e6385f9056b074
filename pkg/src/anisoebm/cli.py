"""Command-line entry point: gen, train, sample, diagnose, compare.

Every run writes a manifest (config hash, seed, versions) and a resolved
config next to its artifacts, all files go through atomic writes, and
errors map to stable exit codes with a machine-parsable final stderr
line: 0 ok, 1 config, 2 divergence, 3 partial compare.
"""
from __future__ import annotations

import argparse
import math
import os
import sys

import numpy as np

from . import __version__
from .config import RunConfig, manifest_text
from .data import (Dataset, atomic_write_text, gmm_sampler, read_dataset,
                   rings_generator, write_dataset, write_sample_grid)
from .diagnostics import (DriftSpec, drift_probe, geometric_rate_fit,
                          hist_kl, identity_kernel, make_kernel,
                          minorization_probe, mmd, proposal_envelope_check)
from .energy import (GaussianEnergy, MixtureEnergy, NeuralEnergy, RingsEnergy,
                     model_from_text, model_to_text, read_params, write_params)
from .errors import (AnisoError, ConfigError, DivergenceError, ParseError,
                     UndersampledError, UnsupportedOperationError,
                     WindowTooLongError)
from .rng import generator
from .samplers import (ChainEnsemble, SamplerConfig, SamplerKind,
                       StepsizeRefresh, refresh_stepsizes, run_chain,
                       write_trajectory_csv)
from .trainer import (InitPolicy, Optimizer, Recipe, TrainConfig,
                      draw_model_samples, gauss_mean_recipe, toy_rings_recipe,
                      train_ebm)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_DIVERGENCE = 2
EXIT_PARTIAL = 3


def _echo(quiet: bool, *parts):
    if not quiet:
        print(*parts)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="anisoebm",
        description="EBM training with anisotropic Langevin sampling, "
                    "baseline kernels, and ergodicity diagnostics")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="key=value config file with [sections]")
        p.add_argument("--seed", type=int, help="root seed (run.seed)")
        p.add_argument("--out", help="output directory or file (run.out)")
        p.add_argument("--quiet", action="store_true")

    p = sub.add_parser("gen", help="generate a synthetic dataset")
    common(p)
    p.add_argument("--kind", choices=["rings", "gmm"])
    p.add_argument("--n", type=int)

    def sampler_flags(p):
        p.add_argument("--sampler",
                       choices=[k.value for k in SamplerKind] + ["identity"])
        p.add_argument("--th", type=float)
        p.add_argument("--eps", type=float)
        p.add_argument("--K", type=int)
        p.add_argument("--gamma", type=float)
        p.add_argument("--refresh", choices=["outer", "step"])

    p = sub.add_parser("train", help="train an EBM (Algorithm: short-run "
                                     "MCMC negatives + stochastic ascent)")
    common(p)
    sampler_flags(p)
    p.add_argument("--recipe", choices=["toy-rings", "gauss-mean", "custom"])
    p.add_argument("--data", help="dataset path (required for custom)")
    p.add_argument("--optimizer", choices=["sgd", "adam"])
    p.add_argument("--T", type=int)
    p.add_argument("--M", type=int)
    p.add_argument("--n", type=int)
    p.add_argument("--eta", type=float)
    p.add_argument("--checkpoint-every", type=int, dest="checkpoint_every")
    p.add_argument("--init-policy", choices=["noise", "persistent", "data"],
                   dest="init_policy")
    p.add_argument("--init-params", dest="init_params",
                   help="resume theta from a saved checkpoint")

    p = sub.add_parser("sample", help="run chains from a saved checkpoint")
    common(p)
    sampler_flags(p)
    p.add_argument("--model", required=True, help="model.txt path")
    p.add_argument("--params", help="parameter checkpoint (ANISO1 binary)")
    p.add_argument("--chains", type=int, default=100)
    p.add_argument("--sigma0", type=float, default=0.15)

    p = sub.add_parser("diagnose", help="drift/minorization/rate probes")
    common(p)
    sampler_flags(p)
    p.add_argument("--target", choices=["gauss", "gmm", "rings"])
    p.add_argument("--beta", type=float)
    p.add_argument("--grid-radius", type=float, dest="grid_radius")
    p.add_argument("--mc-samples", type=int, dest="mc_samples")

    p = sub.add_parser("compare", help="train sampler variants side by side")
    common(p)
    sampler_flags(p)
    p.add_argument("--samplers", help="comma list of sampler kinds")
    p.add_argument("--recipe", choices=["toy-rings", "gauss-mean"])
    p.add_argument("--T", type=int)
    p.add_argument("--M", type=int)
    p.add_argument("--n", type=int)
    p.add_argument("--eta", type=float)
    p.add_argument("--checkpoint-every", type=int, dest="checkpoint_every")
    return parser


_FLAG_MAP = {
    "seed": "run.seed",
    "out": "run.out",
    "kind": "data.kind",
    "n": None,  # per-command
    "sampler": "sampler.kind",
    "th": "sampler.th",
    "eps": "sampler.eps",
    "K": "sampler.K",
    "gamma": "sampler.gamma",
    "refresh": "sampler.refresh",
    "recipe": "train.recipe",
    "data": "train.data",
    "optimizer": "train.optimizer",
    "T": "train.T",
    "M": "train.M",
    "eta": "train.eta",
    "checkpoint_every": "train.checkpoint_every",
    "init_policy": "train.init_policy",
    "init_params": "train.init_params",
    "target": "diagnose.target",
    "beta": "diagnose.beta",
    "grid_radius": "diagnose.grid_radius",
    "mc_samples": "diagnose.mc_samples",
    "samplers": "compare.samplers",
}


def _collect_overrides(args: argparse.Namespace) -> dict:
    overrides = {}
    for flag, dotted in _FLAG_MAP.items():
        if dotted is None:
            continue
        value = getattr(args, flag, None)
        if value is not None:
            overrides[dotted] = value
    n = getattr(args, "n", None)
    if n is not None:
        overrides["data.n" if args.command == "gen" else "train.n"] = n
    sampler = overrides.get("sampler.kind")
    if sampler == "identity":
        # Handled by diagnose directly; keep it out of SamplerConfig.
        del overrides["sampler.kind"]
    return overrides


def _load_config(args) -> RunConfig:
    return RunConfig.load(getattr(args, "config", None),
                          _collect_overrides(args))


def _prepare_out(cfg: RunConfig, args, default: str) -> str:
    out = cfg.get("run.out", default)
    os.makedirs(out, exist_ok=True)
    return out


def _write_run_metadata(out: str, cfg: RunConfig, seed: int):
    atomic_write_text(os.path.join(out, "manifest.txt"),
                      manifest_text(cfg, seed))
    atomic_write_text(os.path.join(out, "config.resolved"),
                      cfg.canonical_text())


# ---------------------------------------------------------------------------
# gen


def cmd_gen(args) -> int:
    cfg = _load_config(args)
    seed = cfg.get("run.seed", 0)
    kind = cfg.get("data.kind", "rings")
    n = cfg.get("data.n", 10000)
    out = cfg.get("run.out", f"{kind}.csv")
    quiet = args.quiet or cfg.get("run.quiet", False)
    if kind == "rings":
        ds = rings_generator(n, radii=cfg.get("data.radii", (0.5, 1.0, 1.5)),
                             width=cfg.get("data.width", 0.05), seed=seed)
    else:
        ds = gmm_sampler(n, means=cfg.get("data.means", ((-1.0,), (1.0,))),
                         sigma=cfg.get("data.sigma", 0.5),
                         weights=cfg.get("data.weights", (0.5, 0.5)),
                         seed=seed)
    parent = os.path.dirname(out)
    if parent:
        os.makedirs(parent, exist_ok=True)
    write_dataset(ds, out)
    _echo(quiet, f"wrote {ds.n} x {ds.dim} {kind} dataset to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train


def _build_recipe(cfg: RunConfig, seed: int) -> Recipe:
    name = cfg.get("train.recipe", "toy-rings")
    raw_kind = cfg.get("sampler.kind")
    if name == "toy-rings":
        kind = SamplerKind(raw_kind) if raw_kind else SamplerKind.STANLEY
        recipe = toy_rings_recipe(seed=seed, kind=kind)
    elif name == "gauss-mean":
        kind = SamplerKind(raw_kind) if raw_kind else SamplerKind.MALA
        recipe = gauss_mean_recipe(seed=seed, kind=kind)
    elif name == "custom":
        path = cfg.get("train.data")
        if path is None:
            raise ConfigError("train.data is required for the custom recipe")
        ds = read_dataset(path)
        if ds.n == 0:
            raise ConfigError("train.data points at an empty dataset")
        model = NeuralEnergy(ds.dim, hidden=cfg.get("train.hidden", (32, 64)),
                             leak=cfg.get("train.leak", 0.05),
                             init_rng=generator(seed, "model-init"))
        lo = ds.rows.min(axis=0)
        hi = ds.rows.max(axis=0)
        pad = 0.25 * (hi - lo + 1e-9)
        box = tuple((float(a - p), float(b + p))
                    for a, b, p in zip(lo, hi, pad))
        recipe = Recipe("custom", model, ds, None,
                        TrainConfig(seed=seed), SamplerConfig(), box, 50)
    else:
        raise ConfigError(f"unknown recipe {name!r}")
    # Flag/file overrides win over recipe defaults.
    recipe.tcfg = cfg.train_config(defaults=recipe.tcfg)
    recipe.scfg = cfg.sampler_config(defaults=recipe.scfg)
    if name != "custom" and cfg.get("train.data") is not None:
        recipe.data = read_dataset(cfg.get("train.data"))
        if recipe.data.n == 0:
            raise ConfigError("train.data points at an empty dataset")
    return recipe


_MMD_SUBSET = 500
_EVAL_SAMPLES = 2000


def _checkpoint_metrics(recipe: Recipe, iter_no: int, seed: int):
    """Fresh short-run samples from the current model, scored vs the target."""
    states = draw_model_samples(recipe.model, recipe.scfg, _EVAL_SAMPLES,
                                sigma0=recipe.tcfg.sigma0, seed=seed,
                                name=f"eval/{iter_no}")
    kl = math.nan
    if recipe.target is not None:
        kl = float(hist_kl(states, recipe.target, recipe.eval_bins,
                           recipe.eval_box))
    sub = generator(seed, f"eval-subset/{iter_no}")
    take = min(_MMD_SUBSET, recipe.data.n, len(states))
    idx_d = sub.choice(recipe.data.n, size=take, replace=False)
    idx_s = sub.choice(len(states), size=take, replace=False)
    span = max(float(np.ptp(recipe.data.rows)), 1e-9)
    mmd_v = mmd(states[idx_s], recipe.data.rows[idx_d], bandwidth=0.25 * span)
    return states, kl, mmd_v


_METRIC_COLUMNS = ["iter", "grad_norm", "accept_rate", "hist_kl", "mmd",
                   "wall_ms", "minibatch_hash"]


def _metrics_csv(rows) -> str:
    lines = [",".join(_METRIC_COLUMNS)]
    for row in rows:
        lines.append(",".join(_format_cell(row[c]) for c in _METRIC_COLUMNS))
    return "\n".join(lines) + "\n"


def _format_cell(value) -> str:
    if isinstance(value, float):
        return "%.10g" % value
    return str(value)


def run_training(recipe: Recipe, out: str, seed: int, quiet: bool) -> list:
    """Train one variant, writing checkpoints/metrics/snapshots under out."""
    os.makedirs(out, exist_ok=True)
    atomic_write_text(os.path.join(out, "model.txt"),
                      model_to_text(recipe.model))
    rows = []

    def hook(iter_no, theta, ensemble, metrics):
        states, kl, mmd_v = _checkpoint_metrics(recipe, iter_no, seed)
        row = dict(metrics)
        row["hist_kl"] = kl
        row["mmd"] = mmd_v
        rows.append(row)
        tag = f"{iter_no:06d}"
        write_params(theta, os.path.join(out, f"ckpt_{tag}.bin"))
        snap = Dataset(states)
        write_dataset(snap, os.path.join(out, f"samples_{tag}.csv"))
        if states.shape[1] == 2:
            write_sample_grid(states, recipe.eval_box, 64,
                              os.path.join(out, f"samples_{tag}.pgm"))
        atomic_write_text(os.path.join(out, "metrics.csv"), _metrics_csv(rows))
        _echo(quiet, f"[{recipe.scfg.kind.value}] iter {iter_no}: "
                     f"hist_kl={kl:.4f} mmd={mmd_v:.5f} "
                     f"grad_norm={row['grad_norm']:.4g}")

    try:
        train_ebm(recipe.model, recipe.data, recipe.tcfg, recipe.scfg,
                  hooks=hook)
    except DivergenceError as err:
        tag = f"{err.last_checkpoint or 0:06d}"
        err.last_checkpoint_path = os.path.join(out, f"ckpt_{tag}.bin")
        raise
    return rows


def cmd_train(args) -> int:
    cfg = _load_config(args)
    seed = cfg.get("run.seed", 0)
    quiet = args.quiet or cfg.get("run.quiet", False)
    recipe = _build_recipe(cfg, seed)
    init_path = cfg.get("train.init_params")
    if init_path is not None:
        theta = read_params(init_path)
        if theta.values.size and not np.isfinite(theta.values).all():
            raise DivergenceError(
                f"checkpoint {init_path} contains non-finite parameters")
        recipe.model.param = theta
    out = _prepare_out(cfg, args, default=f"aniso-train-{recipe.name}")
    _write_run_metadata(out, cfg, seed)
    run_training(recipe, out, seed, quiet)
    _echo(quiet, f"training complete; artifacts in {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# sample


def cmd_sample(args) -> int:
    cfg = _load_config(args)
    seed = cfg.get("run.seed", 0)
    quiet = args.quiet or cfg.get("run.quiet", False)
    with open(args.model, "r", encoding="utf-8") as fh:
        model = model_from_text(fh.read())
    if args.params:
        model.param = read_params(args.params)
    steps = cfg.get("sampler.K", 100)
    if steps < 0:
        raise ConfigError("sampler.K must be >= 0 when sampling")
    if steps == 0:
        patched = dict(cfg.raw)
        patched["sampler.K"] = "1"
        scfg = RunConfig.load(None, patched).sampler_config()
    else:
        scfg = cfg.sampler_config()
    out = _prepare_out(cfg, args, default="aniso-sample")
    _write_run_metadata(out, cfg, seed)

    init_rng = generator(seed, "sample/init")
    states = args.sigma0 * init_rng.standard_normal((args.chains, model.dim))
    ens = ChainEnsemble.create(states, seed=seed, name="sample/chains")
    snapshots = [(0, ens.states.copy())]
    if steps > 0:
        if scfg.kind is SamplerKind.STANLEY and \
                scfg.stepsize_refresh is StepsizeRefresh.PER_OUTER:
            refresh_stepsizes(model, ens, scfg)
        run_chain(model, ens, scfg, steps,
                  hook=lambda k, e: snapshots.append((k, e.states.copy())))
    write_trajectory_csv(os.path.join(out, "trajectory.csv"), snapshots)
    write_dataset(Dataset(ens.states), os.path.join(out, "final_states.csv"))
    if model.dim == 2:
        lo = ens.states.min(axis=0)
        hi = ens.states.max(axis=0)
        pad = 0.1 * (hi - lo + 1e-9)
        box = tuple((float(a - p), float(b + p))
                    for a, b, p in zip(lo, hi, pad))
        write_sample_grid(ens.states, box, 64,
                          os.path.join(out, "final_states.pgm"))
    _echo(quiet, f"wrote {steps}-step trajectories for {args.chains} chains "
                 f"to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# diagnose


def _diagnose_target(name: str):
    if name == "gauss":
        return GaussianEnergy([0.0], sigma=1.0)
    if name == "gmm":
        return MixtureEnergy([[-2.0], [2.0]], [0.5, 0.5], sigma=0.7)
    if name == "rings":
        return RingsEnergy()
    raise ConfigError(f"unknown diagnose target {name!r}")


def _probe_grid(dim: int, grid_radius: float, small_radius: float):
    inner = np.linspace(-0.8 * small_radius, 0.8 * small_radius, 3)
    outer = np.linspace(2.0, grid_radius, 5)
    if dim == 1:
        pts = np.concatenate([inner, outer, -outer])
        return pts[:, None]
    dirs = []
    for k in range(8):
        ang = 2 * math.pi * k / 8
        dirs.append([math.cos(ang), math.sin(ang)])
    dirs = np.asarray(dirs)
    rows = [d * r for r in outer for d in dirs]
    rows += [d * (0.5 * small_radius) for d in dirs[:4]]
    return np.asarray(rows)


def cmd_diagnose(args) -> int:
    cfg = _load_config(args)
    seed = cfg.get("run.seed", 0)
    quiet = args.quiet or cfg.get("run.quiet", False)
    target = _diagnose_target(cfg.get("diagnose.target", "gauss"))
    beta = cfg.get("diagnose.beta", 0.5)
    grid_radius = cfg.get("diagnose.grid_radius", 6.0)
    small_radius = cfg.get("diagnose.small_set_radius", 1.0)
    mc = cfg.get("diagnose.mc_samples", 10000)
    k_max = cfg.get("diagnose.k_max", 30)
    bins = cfg.get("diagnose.bins", 10)
    out = _prepare_out(cfg, args, default="aniso-diagnose")
    _write_run_metadata(out, cfg, seed)

    identity = args.sampler == "identity"
    if identity:
        kernel = identity_kernel
        kernel_name = "identity"
        scfg = None
    else:
        scfg = cfg.sampler_config(
            SamplerConfig(kind=SamplerKind.MALA, gamma=0.5))
        kernel = make_kernel(target, scfg, seed=seed)
        kernel_name = scfg.kind.value

    spec = DriftSpec.mode_normalized(target, beta=beta,
                                     small_set_radius=small_radius)
    grid = _probe_grid(target.dim, grid_radius, small_radius)
    report = drift_probe(kernel, spec, target, grid, mc)

    report.minorization_eps = minorization_probe(
        kernel, target, small_radius, grid, max(mc, 10 * bins ** target.dim),
        bins=bins)

    rate_err = ""
    if not identity:
        z0 = grid[np.argsort(np.max(np.abs(grid), axis=1))[-3:]]
        try:
            e_hat, rho_hat, r2 = geometric_rate_fit(
                kernel, target,
                lambda pts: np.sum(pts ** 2, axis=1), z0, k_max, mc, spec)
            report.rate_e, report.rate_rho, report.fit_r2 = e_hat, rho_hat, r2
        except (WindowTooLongError, UndersampledError) as err:
            rate_err = str(err)

    envelope_pass = ""
    if scfg is not None and scfg.eps > 0:
        pair_rng = generator(seed, "diagnose/pairs")
        z = pair_rng.normal(0.0, 0.5 * grid_radius, size=(512, target.dim))
        y = kernel(z)
        envelope_pass = str(bool(
            proposal_envelope_check(target, scfg, (z, y))))

    fields = {
        "kernel": kernel_name,
        "drift_mu": report.drift_mu,
        "drift_mu_se": report.drift_mu_se,
        "drift_delta": report.drift_delta,
        "drift_pass": report.drift_pass,
        "minorization_eps": report.minorization_eps,
        "rate_e": report.rate_e if report.rate_e is not None else math.nan,
        "rate_rho": report.rate_rho if report.rate_rho is not None else math.nan,
        "fit_r2": report.fit_r2 if report.fit_r2 is not None else math.nan,
        "envelope_pass": envelope_pass,
        "grid_spec": f"\"{report.grid_spec}\"",
    }
    header = ",".join(fields)
    values = ",".join(_format_cell(v) for v in fields.values())
    atomic_write_text(os.path.join(out, "report.csv"),
                      header + "\n" + values + "\n")

    _echo(quiet, f"drift probe [{kernel_name} on "
                 f"{cfg.get('diagnose.target', 'gauss')}]")
    _echo(quiet, f"  contraction mu = {report.drift_mu:.4f} "
                 f"(se {report.drift_mu_se:.4f}) "
                 f"{'PASS' if report.drift_pass else 'FAIL'} (needs < 1)")
    _echo(quiet, f"  inside-set excess delta = {report.drift_delta:.4f}")
    _echo(quiet, f"  minorization eps = {report.minorization_eps:.4f} "
                 f"{'PASS' if report.minorization_eps > 0 else 'FAIL'} "
                 f"(needs > 0)")
    if report.rate_rho is not None:
        _echo(quiet, f"  geometric rate rho = {report.rate_rho:.4f} "
                     f"(e = {report.rate_e:.3f}, R^2 = {report.fit_r2:.4f})")
    elif rate_err:
        _echo(quiet, f"  geometric rate: {rate_err}")
    if envelope_pass:
        _echo(quiet, f"  proposal envelope holds: {envelope_pass}")
    _echo(quiet, f"report written to {os.path.join(out, 'report.csv')}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# compare


def cmd_compare(args) -> int:
    cfg = _load_config(args)
    seed = cfg.get("run.seed", 0)
    quiet = args.quiet or cfg.get("run.quiet", False)
    raw = cfg.get("compare.samplers", "ula,stanley,rwmh,hmc,gd")
    kinds = [k.strip() for k in raw.split(",") if k.strip()]
    out = _prepare_out(cfg, args, default="aniso-compare")
    _write_run_metadata(out, cfg, seed)

    table = []
    failures = {}
    for kind in kinds:
        sub_overrides = dict(cfg.raw)
        sub_overrides["sampler.kind"] = kind
        try:
            sub_cfg = RunConfig.load(None, sub_overrides)
            recipe = _build_recipe(sub_cfg, seed)
            rows = run_training(recipe, os.path.join(out, kind), seed, quiet)
            for row in rows:
                entry = dict(row)
                entry["variant"] = kind
                table.append(entry)
        except AnisoError as err:
            failures[kind] = str(err)
            _echo(quiet, f"[{kind}] FAILED: {err}")

    columns = ["variant"] + _METRIC_COLUMNS
    lines = [",".join(columns)]
    for row in table:
        lines.append(",".join(_format_cell(row.get(c, math.nan))
                              for c in columns))
    atomic_write_text(os.path.join(out, "compare.csv"),
                      "\n".join(lines) + "\n")

    if not quiet and table:
        last_iter = max(r["iter"] for r in table)
        print(f"final checkpoint (iter {last_iter}):")
        print(f"{'variant':>10} {'hist_kl':>10} {'mmd':>10} "
              f"{'accept':>8} {'wall_ms':>8}")
        for row in table:
            if row["iter"] != last_iter:
                continue
            print(f"{row['variant']:>10} {row['hist_kl']:>10.4f} "
                  f"{row['mmd']:>10.5f} {row['accept_rate']:>8.3f} "
                  f"{row['wall_ms']:>8.2f}")
        hashes = {r["minibatch_hash"] for r in table if r["iter"] == last_iter}
        print(f"shared positive minibatches: "
              f"{'yes' if len(hashes) == 1 else 'NO'}")
    for kind, msg in failures.items():
        print(f"ERROR variant={kind} msg={msg}", file=sys.stderr)
    return EXIT_PARTIAL if failures else EXIT_OK


# ---------------------------------------------------------------------------


_COMMANDS = {
    "gen": cmd_gen,
    "train": cmd_train,
    "sample": cmd_sample,
    "diagnose": cmd_diagnose,
    "compare": cmd_compare,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except DivergenceError as err:
        extra = getattr(err, "last_checkpoint_path", None)
        msg = f"{err}" + (f" last_good_checkpoint={extra}" if extra else "")
        print(f"ERROR code={EXIT_DIVERGENCE} msg={msg}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except (ConfigError, ParseError, UnsupportedOperationError,
            FileNotFoundError, IsADirectoryError) as err:
        print(f"ERROR code={EXIT_CONFIG} msg={err}", file=sys.stderr)
        return EXIT_CONFIG
    except AnisoError as err:
        print(f"ERROR code={EXIT_CONFIG} msg={err}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
