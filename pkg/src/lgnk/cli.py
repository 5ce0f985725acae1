"""Command-line front door: gen-data, train, eval, spectra, fit-dissipation,
compare, rollout, bench-time, transfer, ablate, sweep-r, check-grad.

Runs are driven by a strict JSON config (unknown keys are rejected by name)
with flags overriding config values. Every command prints the files it
writes; nothing is written outside the chosen output directory. Exit codes:
0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

import numpy as np

from lgnk import gradtape, physics, train as train_mod
from lgnk.datagen import (
    FHNParams,
    NSParams,
    gen_fitzhugh_nagumo,
    gen_navier_stokes,
    read_dataset,
    write_dataset,
)
from lgnk.model import Model, ModelConfig, load_checkpoint, save_checkpoint
from lgnk.train import TrainConfig, evaluate, sweep_channels, train_loop, transfer_finetune

__all__ = ["main", "parse_config", "RunConfig", "ConfigFileError", "UsageError"]


class ConfigFileError(ValueError):
    """Config file missing, malformed, or violating a constraint."""


class UsageError(ValueError):
    """Bad command line."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # exit 1 on usage problems instead of argparse's 2
        raise UsageError(message)


@dataclasses.dataclass
class RunConfig:
    model: ModelConfig | None
    train: TrainConfig
    data: dict
    output_dir: str


_PDE_PARAMS = {"navier_stokes": NSParams, "fitzhugh_nagumo": FHNParams}
_DATA_EXTRA_KEYS = {"pde", "count", "train", "test"}


def _strict_section(section: dict, allowed, where: str) -> None:
    for key in section:
        if key not in allowed:
            raise ConfigFileError(f"unknown key {key!r} in {where!r} section")


def parse_config(path) -> RunConfig:
    """Strict parse of the run config JSON; every violation names its key."""
    path = Path(path)
    if not path.exists():
        raise ConfigFileError(f"config file not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigFileError(f"malformed JSON in {path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigFileError("config root must be a JSON object")
    _strict_section(doc, {"model", "train", "data", "output_dir"}, "top-level")

    data = dict(doc.get("data", {}))
    pde = data.get("pde")
    params_cls = None
    if pde is not None:
        if pde not in _PDE_PARAMS:
            raise ConfigFileError(f"data.pde must be one of {sorted(_PDE_PARAMS)}, got {pde!r}")
        params_cls = _PDE_PARAMS[pde]
        allowed = _DATA_EXTRA_KEYS | {f.name for f in dataclasses.fields(params_cls)}
        _strict_section(data, allowed, "data")
        for key in ("count", "train", "test"):
            if key in data and (not isinstance(data[key], int) or data[key] <= 0):
                raise ConfigFileError(f"data.{key} must be a positive integer")
    elif data:
        raise ConfigFileError("data section needs a 'pde' key")

    model_section = dict(doc.get("model", {}))
    model_fields = {f.name for f in dataclasses.fields(ModelConfig)}
    _strict_section(model_section, model_fields, "model")
    model_cfg = None
    if model_section or params_cls is not None:
        if "n" not in model_section and params_cls is not None:
            model_section["n"] = data.get("n", params_cls().n)
        if "n" not in model_section:
            raise ConfigFileError("model.n is required (no data section to take it from)")
        if params_cls is not None:
            data_n = data.get("n", params_cls().n)
            if model_section["n"] != data_n:
                raise ConfigFileError(
                    f"model.n ({model_section['n']}) must match data grid n ({data_n})"
                )
        try:
            model_cfg = ModelConfig(**model_section)
        except (TypeError, ValueError) as exc:
            raise ConfigFileError(f"invalid model config: {exc}") from exc

    train_section = dict(doc.get("train", {}))
    train_fields = {f.name for f in dataclasses.fields(TrainConfig)}
    _strict_section(train_section, train_fields, "train")
    try:
        train_cfg = TrainConfig(**train_section)
    except (TypeError, ValueError) as exc:
        raise ConfigFileError(f"invalid train config: {exc}") from exc

    return RunConfig(
        model=model_cfg,
        train=train_cfg,
        data=data,
        output_dir=doc.get("output_dir", "out"),
    )


def _apply_threads(threads: int | None) -> None:
    if threads is None:
        env = os.environ.get("LGNK_THREADS")
        threads = int(env) if env else None
    if threads is None or threads < 1:
        return
    try:
        import threadpoolctl

        threadpoolctl.threadpool_limits(limits=threads)
    except ImportError:
        pass  # computation is deterministic at any thread count anyway


def _print_files(files) -> None:
    for f in files:
        print(f"wrote {f}")


def _out_dir(args, run: RunConfig | None) -> Path:
    out = args.out or (run.output_dir if run is not None else "out")
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _build_params(data: dict):
    pde = data.get("pde")
    if pde is None:
        raise ConfigFileError("config data section with a 'pde' key is required")
    cls = _PDE_PARAMS[pde]
    kwargs = {k: v for k, v in data.items() if k not in _DATA_EXTRA_KEYS}
    params = cls(**kwargs)
    params.validate()
    return params


def _generate(data: dict, seed: int | None = None):
    params = _build_params(data)
    if seed is not None:
        params.seed = seed
    count = data.get("count", 10)
    n_train = data.get("train")
    if data.get("pde") == "navier_stokes":
        ds = gen_navier_stokes(params, count, n_train=n_train)
    else:
        ds = gen_fitzhugh_nagumo(params, count, n_train=n_train)
    if "test" in data:
        n_train = len(ds.train_indices)
        ds.manifest["split"]["test"] = list(range(n_train, min(n_train + data["test"], count)))
    return ds


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def _cmd_gen_data(args) -> int:
    run = parse_config(args.config)
    out = _out_dir(args, run)
    ds = _generate(run.data, seed=args.seed)
    files = write_dataset(out / "dataset.lgnk", ds)
    _print_files(files)
    return 0


def _cmd_train(args) -> int:
    run = parse_config(args.config)
    if run.model is None:
        raise ConfigFileError("train needs a model section in the config")
    out = _out_dir(args, run)
    ds = read_dataset(args.data)
    _, log = train_loop(run.model, run.train, ds, out_dir=out)
    _print_files([out / "train_log.csv", out / "best.lgnk", out / "best.lgnk.json",
                  out / "last.lgnk", out / "last.lgnk.json"])
    print(f"best test relative-L2 {log.best_test_l2():.6f} at epoch {log.best_epoch()}")
    return 0


def _cmd_eval(args) -> int:
    model = load_checkpoint(args.checkpoint)
    ds = read_dataset(args.data)
    out = _out_dir(args, None)
    idx = ds.test_indices
    if args.n_test:
        idx = idx[: args.n_test]
    times = [float(k) for k in range(1, model.config.T_out + 1)]
    rows = []
    for i in idx:
        frames = ds.trajectories[i][: model.config.T_in]
        target = ds.trajectories[i][model.config.T_in: model.config.T_in + model.config.T_out]
        err = train_mod.relative_l2(model.forward(frames, times), target)
        rows.append((i, err))
    files = [physics.write_csv(out / "eval.csv", ("sample", "rel_l2"), rows)]
    _print_files(files)
    print(f"mean test relative-L2 {np.mean([r[1] for r in rows]):.6f} over {len(rows)} samples")
    return 0


def _cmd_spectra(args) -> int:
    model = load_checkpoint(args.checkpoint)
    report = physics.spectrum_report(model)
    files = physics.render_outputs(report, _out_dir(args, None))
    _print_files(files)
    print(f"{report.summary['count']} eigenvalues, max Re {report.summary['max_re']:.6f}")
    return 0


def _cmd_fit_dissipation(args) -> int:
    model = load_checkpoint(args.checkpoint)
    report = physics.fit_dissipation(model)
    files = physics.render_outputs(report, _out_dir(args, None))
    _print_files(files)
    print(f"dominant fit: slope {report.dominant.slope:.6g}, R^2 {report.dominant.r_squared:.4f}")
    return 0


def _cmd_compare(args) -> int:
    a = load_checkpoint(args.checkpoint_a)
    b = load_checkpoint(args.checkpoint_b)
    report = physics.compare_universality(a, b)
    files = physics.render_outputs(report, _out_dir(args, None))
    _print_files(files)
    print(
        f"cosine(S) {report.cosine_sim_S:.4f}, singvals R^2 {report.r2_singvals:.4f}, "
        f"sorted-d R^2 {report.r2_sorted_d:.4f}, sorted-alpha R^2 {report.r2_sorted_alpha:.4f}"
    )
    return 0


def _cmd_rollout(args) -> int:
    model = load_checkpoint(args.checkpoint)
    ds = read_dataset(args.data)
    report = physics.rollout_energy(model, ds, t_max=args.t_max)
    files = physics.render_outputs(report, _out_dir(args, None))
    _print_files(files)
    return 0


def _cmd_bench_time(args) -> int:
    model = load_checkpoint(args.checkpoint)
    horizons = [float(h) for h in args.horizons.split(",")]
    report = physics.bench_time(model, horizons)
    files = physics.render_outputs(report, _out_dir(args, None))
    _print_files(files)
    for h, ms, calls in report.rows:
        print(f"t={h:g}: {ms:.3f} ms, {calls} matrix exponentials")
    return 0


def _cmd_transfer(args) -> int:
    run = parse_config(args.config)
    out = _out_dir(args, run)
    init = args.init_checkpoint or run.train.init_checkpoint
    if not init:
        raise ConfigFileError("transfer needs train.init_checkpoint or --init-checkpoint")
    mode = args.mode or run.train.mode
    if mode not in ("freeze_s", "transfer_all"):
        raise ConfigFileError(f"transfer mode must be freeze_s or transfer_all, got {mode!r}")
    pretrained = load_checkpoint(init)
    ds = read_dataset(args.data)
    tc = dataclasses.replace(run.train, mode=mode, init_checkpoint=str(init))
    _, log = transfer_finetune(pretrained, mode, ds, tc, model_config=run.model, out_dir=out)
    _print_files([out / "train_log.csv", out / "best.lgnk", out / "best.lgnk.json",
                  out / "last.lgnk", out / "last.lgnk.json"])
    print(f"best test relative-L2 {log.best_test_l2():.6f} at epoch {log.best_epoch()}")
    return 0


def _cmd_ablate(args) -> int:
    run = parse_config(args.config)
    if run.model is None:
        raise ConfigFileError("ablate needs a model section in the config")
    out = _out_dir(args, run)
    cfg = dataclasses.replace(run.model, variant=args.variant)
    ds = read_dataset(args.data)
    params, log = train_loop(cfg, run.train, ds, out_dir=out)
    report = physics.spectrum_report(Model(config=cfg, params=params))
    files = physics.render_outputs(report, out)
    _print_files([out / "train_log.csv", out / "best.lgnk", out / "last.lgnk", *files])
    print(
        f"variant {args.variant}: best test relative-L2 {log.best_test_l2():.6f}, "
        f"max Re {report.summary['max_re']:.6g}"
    )
    return 0


def _cmd_sweep_r(args) -> int:
    run = parse_config(args.config)
    if run.model is None:
        raise ConfigFileError("sweep-r needs a model section in the config")
    out = _out_dir(args, run)
    r_list = [int(r) for r in args.r_list.split(",")]
    ds = read_dataset(args.data)
    rows = sweep_channels(r_list, run.model, run.train, ds, out_dir=out)
    files = [
        physics.write_csv(
            out / "sweep.csv",
            ("r", "best_test_l2", "final_test_l2", "dissipation_r2"),
            [(row["r"], row["best_test_l2"], row["final_test_l2"], row["dissipation_r2"]) for row in rows],
        )
    ]
    _print_files(files)
    return 0


def _cmd_check_grad(args) -> int:
    if args.tiny or args.config is None:
        config = gradtape.tiny_config()
    else:
        run = parse_config(args.config)
        if run.model is None:
            raise ConfigFileError("check-grad needs a model section (or --tiny)")
        config = run.model
    report = gradtape.check_gradients(config, seed=args.seed, h=args.h, tol=args.tol)
    print(report.summary())
    return 0 if report.passed else 2


def _build_parser() -> _Parser:
    p = _Parser(prog="lgnk", description=__doc__)
    p.add_argument("--threads", type=int, default=None,
                   help="cap internal BLAS threads (default: all cores or $LGNK_THREADS)")
    sub = p.add_subparsers(dest="command", metavar="command")

    def cmd(name, fn, **kwargs):
        sp = sub.add_parser(name, **kwargs)
        sp.set_defaults(fn=fn)
        sp.add_argument("--out", default=None, help="output directory (overrides config output_dir)")
        return sp

    sp = cmd("gen-data", _cmd_gen_data, help="generate a PDE trajectory dataset")
    sp.add_argument("--config", required=True)
    sp.add_argument("--seed", type=int, default=None)

    sp = cmd("train", _cmd_train, help="train a model from scratch")
    sp.add_argument("--config", required=True)
    sp.add_argument("--data", required=True)

    sp = cmd("eval", _cmd_eval, help="test relative-L2 of a checkpoint")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--n-test", type=int, default=None)

    sp = cmd("spectra", _cmd_spectra, help="eigenvalue spectrum report")
    sp.add_argument("--checkpoint", required=True)

    sp = cmd("fit-dissipation", _cmd_fit_dissipation, help="dissipation-vs-|k|^2 fit")
    sp.add_argument("--checkpoint", required=True)

    sp = cmd("compare", _cmd_compare, help="universality comparison of two checkpoints")
    sp.add_argument("--checkpoint-a", required=True)
    sp.add_argument("--checkpoint-b", required=True)

    sp = cmd("rollout", _cmd_rollout, help="long-horizon rollout energies")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--t-max", type=int, default=200)

    sp = cmd("bench-time", _cmd_bench_time, help="wall time vs prediction horizon")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--horizons", default="1,10,100,200")

    sp = cmd("transfer", _cmd_transfer, help="fine-tune a pretrained checkpoint")
    sp.add_argument("--config", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--init-checkpoint", default=None)
    sp.add_argument("--mode", choices=("freeze_s", "transfer_all"), default=None)

    sp = cmd("ablate", _cmd_ablate, help="train a structural ablation variant")
    sp.add_argument("--config", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--variant", required=True, choices=("sd", "unconstrained", "s_only", "d_only"))

    sp = cmd("sweep-r", _cmd_sweep_r, help="channel-dimension sweep")
    sp.add_argument("--config", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--r-list", default="4,8,16,32,64")

    sp = cmd("check-grad", _cmd_check_grad, help="finite-difference gradient verification")
    sp.add_argument("--config", default=None)
    sp.add_argument("--tiny", action="store_true", help="use the built-in tiny config")
    sp.add_argument("--seed", type=int, default=gradtape.TINY_CHECK_SEED)
    sp.add_argument("--h", type=float, default=1e-5)
    sp.add_argument("--tol", type=float, default=1e-4)

    return p


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "command", None):
            parser.print_usage(sys.stderr)
            return 1
        _apply_threads(args.threads)
        return args.fn(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 1
    except (ConfigFileError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # solver/training/IO failures
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
