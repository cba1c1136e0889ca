"""Command-line entry point: reproducible runs from flat JSON configs.

Every command reads one config file with a ``command`` field, writes all
artifacts under the output directory, and echoes the fully resolved config
(plus the tool version) next to them.  Unknown config keys are rejected.

Exit codes: 0 success, 2 config validation failure, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .affine_opt import (RefineConfig, ScheduleFamily, SearchConfig, elbo,
                         elbo_evidence, max_elbo, refine_drift_iteration)
from .bridge import BridgeSpec, EndTables, laplacian_bridge_closed_form
from .data import InitialDistribution, SampleSet, energy_distance, make_dataset, \
    sliced_wasserstein
from .errors import ConfigError, StdbError
from .grids import EPS_DEFAULT, N_STEPS_DEFAULT, TimeGrid, clipped_grid
from .laplacian import build_grid_laplacian, eigendecompose
from .propagator import solve_propagator
from .schedules import TabulatedSchedule, brownian_schedule, constant_schedule, \
    pinned_drift_schedule
from .score import BridgeTrainingSampler, ScoreModel, TrainConfig, score_drift_field, train
from .sde import (affine_drift_field, counter_rng, doob_drift_field,
                  pinned_drift_field, sample_bridge_exact, simulate_forward,
                  simulate_reverse)

_COMMON_KEYS = {"command", "seed", "out"}

_ALLOWED = {
    "stats": _COMMON_KEYS | {"schedule", "dim", "rows", "cols", "a", "path",
                             "x0", "x1", "times", "n_steps", "eps"},
    "simulate": _COMMON_KEYS | {"schedule", "dim", "rows", "cols", "a", "path",
                                "x0", "x1", "S", "n_steps", "eps", "checkpoints",
                                "scheme"},
    "train": _COMMON_KEYS | {"dataset", "S", "objective", "schedule", "dim", "rows",
                             "cols", "a", "path", "hidden", "batch_size",
                             "learning_rate", "epochs", "steps_per_epoch", "weight",
                             "eps", "n_steps", "p0_mean", "p0_scale"},
    "generate": _COMMON_KEYS | {"checkpoint", "scheme", "S", "n_steps", "eps",
                                "schedule", "dim", "rows", "cols", "a", "path",
                                "p0_mean", "p0_scale", "export_pgm"},
    "evaluate": _COMMON_KEYS | {"forward_checkpoint", "reverse_checkpoint", "dataset",
                                "S", "step_counts", "eps", "schedule", "dim", "rows",
                                "cols", "a", "path", "p0_mean", "p0_scale",
                                "n_projections", "seeds"},
    "elbo": _COMMON_KEYS | {"mode", "family", "dim", "rows", "cols", "params",
                            "kappa_scale", "p0_mean", "p0_scale", "search_kappa",
                            "bounds", "max_iter", "n_mc", "dataset", "S",
                            "gt_file", "iterations", "objective", "grid_steps", "eps"},
}


def _fail(code: int, message: str):
    print(f"error: {message}", file=sys.stderr)
    raise SystemExit(code)


def _load_config(path: str, command: str, seed_override) -> dict:
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a flat JSON object")
    got = cfg.get("command")
    if got != command:
        raise ConfigError(f"config command {got!r} does not match subcommand {command!r}")
    unknown = set(cfg) - _ALLOWED[command]
    if unknown:
        raise ConfigError(f"unknown config keys for '{command}': {sorted(unknown)}")
    if seed_override is not None:
        cfg["seed"] = int(seed_override)
    cfg.setdefault("seed", 0)
    return cfg


def _prepare_out(cfg: dict, out_flag, default_name: str) -> Path:
    out = Path(out_flag or cfg.get("out") or f"stdb-out/{default_name}")
    out.mkdir(parents=True, exist_ok=True)
    echo = dict(sorted(cfg.items()))
    echo["version"] = __version__
    with open(out / "config_echo.json", "w") as fh:
        json.dump(echo, fh, indent=2, sort_keys=True)
    return out


def _endpoint(cfg, key, dim):
    val = cfg.get(key, 0.0)
    arr = np.full(dim, float(val)) if np.ndim(val) == 0 else np.asarray(val, dtype=float)
    if arr.shape != (dim,):
        raise ConfigError(f"{key} must be scalar or length-{dim}")
    return arr


class _ScheduleBundle:
    """Schedule roles resolved from a config: base process and pinned drift."""

    def __init__(self, cfg):
        name = cfg.get("schedule", "brownian")
        self.name = name
        self.basis = None
        self.image_shape = None
        if name == "brownian":
            self.dim = int(cfg.get("dim", 1))
            self.basic = brownian_schedule(self.dim)
            self.bar = None
        elif name == "constant":
            self.dim = int(cfg.get("dim", 1))
            self.basic = constant_schedule(float(cfg.get("a", 0.0)), self.dim)
            self.bar = None
        elif name == "laplacian":
            rows, cols = int(cfg.get("rows", 8)), int(cfg.get("cols", 8))
            lap = build_grid_laplacian(rows, cols)
            self.dim = lap.dim
            self.basis = eigendecompose(lap)
            self.basic = None
            self.bar = pinned_drift_schedule(lap.L, name=f"laplacian({rows}x{cols})")
            self.image_shape = (rows, cols)
        elif name == "custom-file":
            tab = TabulatedSchedule.from_json(cfg["path"])
            self.dim = tab.dim
            self.basic = tab.as_schedule()
            self.bar = None
        else:
            raise ConfigError(f"unknown schedule '{name}'")

    def bridge_spec(self, x0, x1, grid) -> BridgeSpec:
        if self.bar is not None:
            return BridgeSpec.from_bar(self.bar, x0, x1, grid)
        return BridgeSpec.from_basic(self.basic, x0, x1, grid)


def _snap(grid: TimeGrid, t: float) -> float:
    """Nearest grid node to t, clamped into the grid range."""
    j = int(round((t - grid.t_start) / grid.dt))
    return float(grid.times[min(max(j, 0), grid.n_steps)])


def _write_pgm(img: np.ndarray, path, shape) -> None:
    rows, cols = shape
    pix = np.clip(np.round(img.reshape(rows, cols) * 255), 0, 255).astype(int)
    with open(path, "w") as fh:
        fh.write(f"P2\n{cols} {rows}\n255\n")
        for r in range(rows):
            fh.write(" ".join(str(v) for v in pix[r]) + "\n")


def cmd_stats(cfg, out: Path) -> None:
    eps = float(cfg.get("eps", EPS_DEFAULT))
    n_steps = int(cfg.get("n_steps", N_STEPS_DEFAULT))
    bundle = _ScheduleBundle(cfg)
    x0 = _endpoint(cfg, "x0", bundle.dim)
    x1 = _endpoint(cfg, "x1", bundle.dim)
    grid = clipped_grid(n_steps, eps, t_start=0.0)
    spec = bundle.bridge_spec(x0, x1, grid)
    times = [_snap(grid, float(t)) if float(t) > 0.0 else 0.0
             for t in cfg.get("times", [0.25, 0.5, 0.75])]
    for i, t in enumerate(times):
        m = spec.marginal(t)
        payload = m.to_json()
        payload["t"] = t
        if m.degenerate:
            payload["pinned"] = True
        with open(out / f"marginal_{i}.json", "w") as fh:
            json.dump(payload, fh)
    if bundle.basis is not None:
        from .bridge import _eigchannel_variance
        with open(out / "eigenchannel_variances.csv", "w") as fh:
            fh.write("t," + ",".join(f"ch_{i}" for i in range(bundle.dim)) + "\n")
            for t in times:
                v = _eigchannel_variance(bundle.basis.lambdas, t)
                fh.write(f"{t:.12g}," + ",".join(f"{x:.12g}" for x in v) + "\n")
        with open(out / "forward_process.csv", "w") as fh:
            fh.write("t,mean_norm,noise_scale\n")
            for j in range(0, n_steps + 1, max(1, n_steps // 50)):
                t = grid.times[j]
                m = spec.marginal_at_index(j)
                fh.write(f"{t:.12g},{np.linalg.norm(m.mean):.12g},"
                         f"{math.sqrt(max(np.trace(m.cov), 0.0) / bundle.dim):.12g}\n")
        for idx, t in enumerate(times):
            m = spec.marginal(t)
            _write_pgm(m.mean, out / f"mean_t{idx}.pgm", bundle.image_shape)


def _summary_rows(batch, spec, checkpoints):
    rows = []
    S = batch.n_paths
    for t in checkpoints:
        emp = batch.state_at(t)
        m = spec.marginal(t)
        sd = np.sqrt(np.diag(m.cov))
        for i in range(emp.shape[1]):
            mc_bound = 3.0 * sd[i] / math.sqrt(S)
            rows.append((t, i, emp[:, i].mean(), m.mean[i], mc_bound,
                         emp[:, i].var(), m.cov[i, i]))
    return rows


def cmd_simulate(cfg, out: Path) -> None:
    eps = float(cfg.get("eps", EPS_DEFAULT))
    n_steps = int(cfg.get("n_steps", N_STEPS_DEFAULT))
    bundle = _ScheduleBundle(cfg)
    x0 = _endpoint(cfg, "x0", bundle.dim)
    x1 = _endpoint(cfg, "x1", bundle.dim)
    S = int(cfg.get("S", 1000))
    seed = int(cfg["seed"])
    scheme = cfg.get("scheme", "pinned")
    # One grid for simulation and marginals so checkpoint nodes align exactly.
    sim_grid = clipped_grid(n_steps, eps, t_start=0.0)
    spec = bundle.bridge_spec(x0, x1, sim_grid)
    checkpoints = [_snap(sim_grid, float(t))
                   for t in cfg.get("checkpoints", [0.25, 0.5, 0.75])]
    x0_batch = np.tile(x0, (S, 1))
    x1_batch = np.tile(x1, (S, 1))
    noise_schedule = spec.bar
    save = sorted(set(checkpoints) | {sim_grid.t_end})
    if scheme == "pinned":
        field = pinned_drift_field(spec.bar, x1_batch)
        batch = simulate_forward(field, noise_schedule, x0_batch, sim_grid, seed,
                                 save_times=save)
    elif scheme == "doob":
        if bundle.basic is None:
            raise ConfigError("doob scheme needs a base-process schedule")
        basic_grid = TimeGrid(0.0, 1.0, n_steps)
        prop = solve_propagator(bundle.basic, basic_grid)
        field = doob_drift_field(bundle.basic, EndTables(bundle.basic, prop))
        batch = simulate_forward(field, bundle.basic, x0_batch, sim_grid, seed,
                                 save_times=save, pin=x1_batch)
    elif scheme == "basic":
        if bundle.basic is None:
            raise ConfigError("basic scheme needs a base-process schedule")
        field = affine_drift_field(bundle.basic)
        batch = simulate_forward(field, bundle.basic, x0_batch, sim_grid, seed,
                                 save_times=save)
    else:
        raise ConfigError(f"unknown scheme '{scheme}'")
    batch.to_binary(out / "trajectories.bin")
    if S * len(save) <= 200_000:
        batch.to_csv(out / "trajectories.csv")
    with open(out / "summary.csv", "w") as fh:
        fh.write("t,coord,emp_mean,exact_mean,mc_3sigma,emp_var,exact_var\n")
        for row in _summary_rows(batch, spec, checkpoints):
            fh.write(",".join(f"{v:.12g}" for v in row) + "\n")


def _train_setup(cfg):
    eps = float(cfg.get("eps", EPS_DEFAULT))
    n_steps = int(cfg.get("n_steps", 500))
    bundle = _ScheduleBundle(cfg)
    if bundle.basic is None:
        raise ConfigError("training needs a base-process schedule")
    gt = make_dataset(cfg.get("dataset", "gm2"), int(cfg.get("S", 4000)),
                      int(cfg["seed"]) + 17)
    if gt.dim != bundle.dim:
        raise ConfigError(f"dataset dim {gt.dim} != schedule dim {bundle.dim}")
    p0 = InitialDistribution.isotropic(bundle.dim, float(cfg.get("p0_mean", 0.0)),
                                       float(cfg.get("p0_scale", 1.0)))
    basic_grid = TimeGrid(0.0, 1.0, n_steps)
    prop = solve_propagator(bundle.basic, basic_grid)
    return bundle, gt, p0, prop, eps


def cmd_train(cfg, out: Path) -> None:
    bundle, gt, p0, prop, eps = _train_setup(cfg)
    objective = cfg.get("objective", "RT")
    sampler = BridgeTrainingSampler(bundle.basic, prop, gt.data, p0,
                                    objective=objective, eps=eps)
    model = ScoreModel(bundle.dim, hidden=tuple(cfg.get("hidden", [128, 128])),
                       pin_role=sampler.pin_role, seed=int(cfg["seed"]))
    tcfg = TrainConfig(batch_size=int(cfg.get("batch_size", 256)),
                       learning_rate=float(cfg.get("learning_rate", 1e-4)),
                       epochs=int(cfg.get("epochs", 10)),
                       steps_per_epoch=int(cfg.get("steps_per_epoch", 200)),
                       weight=cfg.get("weight", "unit"),
                       seed=int(cfg["seed"]), objective=objective)
    result = train(model, sampler, tcfg)
    model.save(out / "model")
    result.losses_to_csv(out / "losses.csv")
    with open(out / "train_summary.json", "w") as fh:
        json.dump({"objective": objective, "pin_role": model.pin_role,
                   "final_loss": float(result.epoch_losses[-1]),
                   "initial_loss": float(result.epoch_losses[0])}, fh)


def _generation_run(bundle, model, scheme, S, n_steps, eps, p0, seed):
    if n_steps == 0:
        rng = counter_rng(seed, 0xF00D, 0)
        return p0.sample(S, rng)
    grid = clipped_grid(n_steps, eps)
    rng = counter_rng(seed, 0xF00D, 0)
    start = p0.sample(S, rng)
    if scheme == "forward":
        field = score_drift_field(model, bundle.basic, "forward")
        batch = simulate_forward(field, bundle.basic, start, grid, seed,
                                 save_times=[grid.t_end], pin=start)
    else:
        basic_grid = TimeGrid(0.0, 1.0, max(n_steps, 200))
        prop = solve_propagator(bundle.basic, basic_grid)
        bar = EndTables(bundle.basic, prop).bar_table(grid)
        field = score_drift_field(model, bundle.basic, "reverse", bar_schedule=bar)
        batch = simulate_reverse(field, bundle.basic, start, grid, seed,
                                 save_times=[grid.t_start], pin=start)
    return batch.terminal


def cmd_generate(cfg, out: Path) -> None:
    bundle = _ScheduleBundle(cfg)
    if bundle.basic is None:
        raise ConfigError("generation needs a base-process schedule")
    ckpt = cfg.get("checkpoint")
    if ckpt is None or not Path(str(ckpt) + ".json").exists():
        raise ConfigError(f"missing checkpoint '{ckpt}'")
    model = ScoreModel.load(ckpt)
    p0 = InitialDistribution.isotropic(bundle.dim, float(cfg.get("p0_mean", 0.0)),
                                       float(cfg.get("p0_scale", 1.0)))
    samples = _generation_run(bundle, model, cfg.get("scheme", "reverse"),
                              int(cfg.get("S", 2000)), int(cfg.get("n_steps", 1000)),
                              float(cfg.get("eps", EPS_DEFAULT)), p0, int(cfg["seed"]))
    SampleSet(data=samples, label="generated", seed=int(cfg["seed"])).to_csv(
        out / "samples.csv")
    if cfg.get("export_pgm") and bundle.image_shape is None and samples.shape[1] == 64:
        bundle.image_shape = (8, 8)
    if cfg.get("export_pgm") and bundle.image_shape is not None:
        for i in range(min(8, samples.shape[0])):
            _write_pgm(samples[i], out / f"sample_{i}.pgm", bundle.image_shape)


def cmd_evaluate(cfg, out: Path) -> None:
    bundle = _ScheduleBundle(cfg)
    gt = make_dataset(cfg.get("dataset", "gm2"), int(cfg.get("S", 2000)),
                      int(cfg["seed"]) + 71)
    p0 = InitialDistribution.isotropic(bundle.dim, float(cfg.get("p0_mean", 0.0)),
                                       float(cfg.get("p0_scale", 1.0)))
    eps = float(cfg.get("eps", EPS_DEFAULT))
    step_counts = [int(n) for n in cfg.get("step_counts", [50, 100, 250, 500, 1000])]
    seeds = [int(s) for s in cfg.get("seeds", [int(cfg["seed"])])]
    schemes = {}
    if cfg.get("forward_checkpoint"):
        schemes["forward"] = ScoreModel.load(cfg["forward_checkpoint"])
    if cfg.get("reverse_checkpoint"):
        schemes["reverse"] = ScoreModel.load(cfg["reverse_checkpoint"])
    if not schemes:
        raise ConfigError("evaluate needs forward_checkpoint and/or reverse_checkpoint")
    S = int(cfg.get("S", 2000))
    n_proj = int(cfg.get("n_projections", 64))
    table = []
    for scheme, model in schemes.items():
        for n in step_counts:
            for seed in seeds:
                samples = _generation_run(bundle, model, scheme, S, n, eps, p0, seed)
                table.append({
                    "scheme": scheme, "n_steps": n, "seed": seed,
                    "energy_distance": energy_distance(samples, gt.data),
                    "sliced_wasserstein": sliced_wasserstein(samples, gt.data,
                                                             n_proj, seed),
                })
    with open(out / "metrics.json", "w") as fh:
        json.dump({"table": table, "S": S, "dataset": gt.label}, fh, indent=2)
    with open(out / "sweep.csv", "w") as fh:
        fh.write("scheme,n_steps,seed,energy_distance,sliced_wasserstein\n")
        for row in table:
            fh.write(f"{row['scheme']},{row['n_steps']},{row['seed']},"
                     f"{row['energy_distance']:.12g},{row['sliced_wasserstein']:.12g}\n")


def _elbo_family(cfg) -> ScheduleFamily:
    kind = cfg.get("family", "scalar_i")
    basis = None
    dim = int(cfg.get("dim", 1))
    if kind in ("scalar_l", "diag_eigen"):
        lap = build_grid_laplacian(int(cfg.get("rows", 2)), int(cfg.get("cols", 2)))
        basis = eigendecompose(lap)
        dim = lap.dim
    return ScheduleFamily(kind=kind, params=cfg.get("params", [0.0]), dim=dim,
                          kappa_scale=float(cfg.get("kappa_scale", 1.0)),
                          p0_mean=float(cfg.get("p0_mean", 0.0)),
                          p0_scale=float(cfg.get("p0_scale", 1.0)),
                          basis=basis, search_kappa=bool(cfg.get("search_kappa", False)))


def _elbo_gt(cfg, dim):
    if cfg.get("gt_file"):
        return np.loadtxt(cfg["gt_file"], delimiter=",", skiprows=1, ndmin=2)
    if cfg.get("dataset"):
        return make_dataset(cfg["dataset"], int(cfg.get("S", 2000)),
                            int(cfg["seed"]) + 29).data
    raise ConfigError("elbo needs 'dataset' or 'gt_file'")


def cmd_elbo(cfg, out: Path) -> None:
    mode = cfg.get("mode", "estimate")
    family = _elbo_family(cfg)
    gt = _elbo_gt(cfg, family.dim)
    seed = int(cfg["seed"])
    if mode == "estimate":
        est_bridge = elbo(family, gt, None, int(cfg.get("n_mc", 2000)), seed)
        est_ev = elbo_evidence(family, gt, seed=seed)
        with open(out / "elbo.json", "w") as fh:
            json.dump({"bridge_objective": est_bridge.__dict__,
                       "evidence": est_ev.__dict__}, fh, indent=2)
        return
    if mode == "search":
        bounds = [tuple(b) for b in cfg["bounds"]]
        res = max_elbo(family, gt, SearchConfig(
            bounds=bounds, max_iter=int(cfg.get("max_iter", 80)), seed=seed,
            n_mc=int(cfg.get("n_mc", 2000)), objective=cfg.get("objective", "evidence"),
            grid_steps=int(cfg.get("grid_steps", 400))))
        with open(out / "search.json", "w") as fh:
            json.dump({"best_params": res.family.params.tolist(),
                       "kappa_scale": res.family.kappa_scale,
                       "best_value": res.estimate.value,
                       "std_error": res.estimate.std_error,
                       "n_evaluations": res.n_evaluations}, fh, indent=2)
        with open(out / "best_seen.csv", "w") as fh:
            fh.write("evaluation,best_value\n")
            for i, est in enumerate(res.best_seen):
                fh.write(f"{i},{est.value:.12g}\n")
        return
    if mode == "refine":
        p0 = family.p0()
        rcfg = RefineConfig(iterations=int(cfg.get("iterations", 3)), seed=seed,
                            grid_steps=int(cfg.get("grid_steps", 200)))
        res = refine_drift_iteration(family.to_schedule(), gt, p0, rcfg)
        with open(out / "refine_trace.csv", "w") as fh:
            fh.write("evaluation,value,std_error\n")
            for i, est in enumerate(res.trace):
                fh.write(f"{i},{est.value:.12g},{est.std_error:.12g}\n")
        with open(out / "refine.json", "w") as fh:
            json.dump({"best_value": res.best.value, "accepted": res.accepted},
                      fh, indent=2)
        return
    raise ConfigError(f"unknown elbo mode '{mode}'")


_COMMANDS = {
    "stats": cmd_stats,
    "simulate": cmd_simulate,
    "train": cmd_train,
    "generate": cmd_generate,
    "evaluate": cmd_evaluate,
    "elbo": cmd_elbo,
}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="stdb", description=__doc__)
    parser.add_argument("--version", action="version", version=f"stdb {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True)
        p.add_argument("--out", default=None)
        p.add_argument("--seed", type=int, default=None)
    args = parser.parse_args(argv)
    try:
        cfg = _load_config(args.config, args.command, args.seed)
    except ConfigError as exc:
        _fail(2, str(exc))
    try:
        out = _prepare_out(cfg, args.out, args.command)
        _COMMANDS[args.command](cfg, out)
    except ConfigError as exc:
        _fail(2, str(exc))
    except StdbError as exc:
        _fail(3, f"{type(exc).__name__}: {exc}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
