"""Command line interface: `tdrl gen|train|eval|check|report`.

Exit codes: 0 on success, 2 for invalid configuration or data, 3 for artifact
(IO) failures and 4 for numerical failures.
"""

import argparse
import logging
import math
import os
import sys

import attr
import numpy as np
import torch

from ._conditions import check_conditions, closed_form_density, density_from_dataset
from ._config import load_config, parse_config
from ._data import generate_dataset
from ._errors import ArtifactError, ConfigError, DataError, TDRLError
from ._evaluate import (
    compare_skeleton,
    mcc,
    plot_latent_scatter,
    recover_skeleton,
    thread_cap,
)
from ._io import (
    RunManifest,
    collect_summaries,
    read_checkpoint,
    read_dataset,
    write_checkpoint,
    write_dataset,
    write_history_csv,
    write_matrix_csv,
    write_report_csv,
    write_summary,
)
from ._sim import simulate
from ._train import select_beta

logger = logging.getLogger(__name__)


def _configure_runtime(args):
    level = {0: logging.WARNING, 1: logging.INFO}.get(args.verbose, logging.DEBUG)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    threads = thread_cap()
    if threads is not None:
        torch.set_num_threads(threads)
    if args.deterministic:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)


def _recorded_command(argv):
    """The command line without the output location, which is where the run
    manifest itself lives."""
    command, skip = ["tdrl"], False
    for arg in argv:
        if skip:
            skip = False
        elif arg == "--out":
            skip = True
        elif not arg.startswith("--out="):
            command.append(arg)
    return command


def _config(args):
    if args.config is None:
        return parse_config({}, args.seed)
    return load_config(args.config, args.seed)


def _inputs(*paths):
    return [path for path in paths if path is not None and os.path.isfile(path)]


def _start(args, argv, config, inputs=()):
    seeds = {"train": config.train.seed}
    if config.generator is not None:
        seeds["generator"] = config.generator.seed
    return RunManifest.start(
        _recorded_command(argv),
        config.snapshot(),
        seeds,
        inputs=inputs,
        deterministic=args.deterministic,
    )


def cmd_gen(args, argv):
    """Generate a dataset directory from the `generator` section."""
    config = _config(args)
    if config.generator is None:
        raise ConfigError("missing section `generator`", "generator")
    run = _start(args, argv, config, _inputs(args.config))
    dataset = generate_dataset(config.generator)
    write_dataset(dataset, args.out)
    run.finish(args.out)


def cmd_train(args, argv):
    """Train on a dataset directory; writes the checkpoint and the history."""
    config = _config(args)
    dataset = read_dataset(args.data)
    model_config = config.model_config(dataset)
    run = _start(args, argv, config, _inputs(args.config))
    best_beta, trials = select_beta(dataset, model_config, config.train, sys.stdout)
    best = next(trial for trial in trials if trial.beta == best_beta)
    os.makedirs(args.out, exist_ok=True)
    write_checkpoint(best.checkpoint, os.path.join(args.out, "checkpoint"))
    write_history_csv(best.history, os.path.join(args.out, "history.csv"))
    summary = {
        "beta": best_beta,
        "best_epoch": best.history.best_epoch,
        "epochs": len(best.history.records),
        "stop_reason": best.history.stop_reason,
        "best_val_total": best.history.best_val_total,
    }
    for trial in trials:
        if trial.error is None:
            summary[f"val_total@beta={trial.beta!r}"] = trial.history.best_val_total
        else:
            summary[f"val_total@beta={trial.beta!r}"] = f"failed ({trial.error})"
    write_summary(os.path.join(args.out, "summary.txt"), summary)
    run.finish(args.out)


def _estimate_latents(checkpoint, x):
    model = checkpoint.build_model()
    dtype = next(model.parameters()).dtype
    with torch.no_grad():
        stats = model.encode(torch.as_tensor(x, dtype=dtype))
    return stats.mu.double().numpy(), model


def cmd_eval(args, argv):
    """Score the posterior means of the held-out sequences against the true
    latents."""
    config = _config(args)
    dataset = read_dataset(args.data)
    run = _start(args, argv, config, _inputs(args.config))
    model = None
    if args.oracle:
        test = dataset
        z_est = dataset.z
    else:
        if args.checkpoint is None:
            raise ConfigError("eval needs --checkpoint or --oracle", "checkpoint")
        checkpoint = read_checkpoint(args.checkpoint)
        if checkpoint.model_config.obs_dim != dataset.x.shape[-1]:
            raise DataError(
                "checkpoint and dataset disagree on the observation dimension"
            )
        test_idx = checkpoint.val_indices
        test = dataset.subset(test_idx) if len(test_idx) else dataset
        z_est, model = _estimate_latents(checkpoint, test.x)
    if z_est.shape != test.z.shape:
        raise DataError(
            f"estimated latents {z_est.shape} do not match the true latents "
            f"{test.z.shape}"
        )
    os.makedirs(args.out, exist_ok=True)
    eval_config = config.eval
    report = mcc(test.z, z_est, eval_config.mode)
    other_mode = "pearson" if eval_config.mode == "spearman" else "spearman"
    summary = {
        "mcc": report.mcc,
        "mode": report.mode,
        f"mcc_{other_mode}": mcc(test.z, z_est, other_mode).mcc,
        "assignment": report.assignment.tolist(),
    }
    write_matrix_csv(os.path.join(args.out, "corr.csv"), report.corr)

    f1 = math.nan
    if eval_config.skeleton:
        lags = dataset.spec.lags
        try:
            skeleton = recover_skeleton(
                z_est,
                lags,
                path_multiplier=eval_config.path_multiplier,
                hidden=eval_config.hidden,
                threshold=eval_config.threshold,
                jobs=eval_config.jobs,
            )
        except DataError as exc:
            logger.warning("skipping skeleton recovery: %s", exc)
        else:
            f1 = compare_skeleton(skeleton, dataset.adjacency, report)
            n = skeleton.scores.shape[0]
            write_matrix_csv(
                os.path.join(args.out, "skeleton_scores.csv"),
                skeleton.scores.reshape(n, -1),
            )
            summary["skeleton_edges"] = int(skeleton.est_adjacency.sum())
    summary["f1"] = f1

    if model is not None:
        factors = model.change_factors
        rows = torch.cat([factors.theta_dyn, factors.theta_obs], dim=1)
        header = [f"theta_dyn_{i}" for i in range(factors.theta_dyn.shape[1])]
        header += [f"theta_obs_{i}" for i in range(factors.theta_obs.shape[1])]
        write_matrix_csv(
            os.path.join(args.out, "change_factors.csv"),
            rows.detach().double().numpy(),
            header,
        )
    if eval_config.plot:
        plot_latent_scatter(
            test.z, z_est, report, os.path.join(args.out, "scatter.png")
        )
    write_summary(os.path.join(args.out, "summary.txt"), summary)
    run.finish(args.out)


def cmd_check(args, argv):
    """Numerically check the identifiability conditions of a ground-truth
    density, from a dataset directory or from a `generator` section."""
    config = _config(args)
    if args.data is not None:
        dataset = read_dataset(args.data)
        density = density_from_dataset(dataset)
        samples = dataset.z
    elif config.generator is not None:
        spec = attr.evolve(config.generator, standardize=False)
        trajectories = simulate(spec)
        density = closed_form_density(
            spec, [traj.transition_params for traj in trajectories]
        )
        samples = np.concatenate([traj.z for traj in trajectories])
    else:
        raise ConfigError("check needs --data or a `generator` section", "generator")
    run = _start(args, argv, config, _inputs(args.config))
    check = config.check
    report = check_conditions(
        density,
        samples,
        num_prev=check.num_prev,
        num_current=check.num_current,
        step=check.step,
        threshold=check.threshold,
        seed=check.seed,
    )
    os.makedirs(args.out, exist_ok=True)
    write_matrix_csv(os.path.join(args.out, "condition_rows.csv"), report.matrix)
    write_summary(os.path.join(args.out, "summary.txt"), report.summary())
    run.finish(args.out)
    print(f"verdict: {report.verdict} (ratio {report.ratio:.3g})")


def cmd_report(args, argv):
    """Collect the summaries found under the given directories into one CSV."""
    rows = collect_summaries(args.directories)
    if not rows:
        raise ArtifactError("no summary.txt found", directories=args.directories)
    write_report_csv(rows, args.out)


def _parser():
    parser = argparse.ArgumentParser(
        prog="tdrl", description="Temporally disentangled representation lab."
    )
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON configuration document")
    common.add_argument("--seed", type=int, help="Overrides all configured seeds")
    common.add_argument(
        "--deterministic",
        action="store_true",
        help="Single-threaded deterministic mode without timestamps",
    )
    common.add_argument("-v", "--verbose", action="count", default=0)
    subparsers = parser.add_subparsers(dest="command", required=True)

    gen = subparsers.add_parser("gen", parents=[common], help=cmd_gen.__doc__)
    gen.add_argument("--out", required=True, help="Dataset directory")
    gen.set_defaults(func=cmd_gen)

    train = subparsers.add_parser("train", parents=[common], help=cmd_train.__doc__)
    train.add_argument("--data", required=True, help="Dataset directory")
    train.add_argument("--out", required=True, help="Run directory")
    train.set_defaults(func=cmd_train)

    evaluate = subparsers.add_parser("eval", parents=[common], help=cmd_eval.__doc__)
    evaluate.add_argument("--data", required=True, help="Dataset directory")
    evaluate.add_argument("--checkpoint", help="Checkpoint directory")
    evaluate.add_argument(
        "--oracle",
        action="store_true",
        help="Score the ground-truth latents as estimates",
    )
    evaluate.add_argument("--out", required=True, help="Report directory")
    evaluate.set_defaults(func=cmd_eval)

    check = subparsers.add_parser("check", parents=[common], help=cmd_check.__doc__)
    check.add_argument("--data", help="Dataset directory")
    check.add_argument("--out", required=True, help="Report directory")
    check.set_defaults(func=cmd_check)

    report = subparsers.add_parser(
        "report", parents=[common], help=cmd_report.__doc__
    )
    report.add_argument("directories", nargs="+")
    report.add_argument("--out", required=True, help="CSV file")
    report.set_defaults(func=cmd_report)
    return parser


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    args = _parser().parse_args(argv)
    try:
        _configure_runtime(args)
        args.func(args, argv)
    except TDRLError as exc:
        print(f"tdrl {args.command}: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"tdrl {args.command}: {exc}", file=sys.stderr)
        return ArtifactError.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
