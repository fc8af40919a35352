"""Command-line entry point: ``vaece {generate,train,evaluate,sweep}``.

Exit codes: 0 success, 1 usage error, 2 data or model error.
"""
from __future__ import annotations

import argparse
import logging
import math
import sys

from .bench import emit_csv, format_csv, load_config, nmse, observation_rng, run_sweep
from .channel import ScenarioConfig, generate_dataset, load_dataset, observe, save_dataset
from .errors import VaeceError
from .estimators import KINDS, VAE_KINDS, EstimateRequest, Estimator, fit_sample_cov
from .gmm import gmm_fit, load_gmm
from .vae import TrainConfig, VaeModel, load_model, save_model, train

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(f"{self.prog}: error: {message}\n{self.format_usage()}")


def _build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="vaece", description="VAE-based channel estimation experiments")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", help="sample a channel dataset")
    g.add_argument("--antennas", type=int, required=True)
    g.add_argument("--clusters", type=int, default=3)
    g.add_argument("--samples", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--angular-spread-deg", type=float, default=2.0)
    g.add_argument("--split", choices=("train", "test"), default="train")
    g.add_argument("--keep-deltas", action="store_true", help="store per-sample cluster parameters")
    g.add_argument("--out", required=True)

    t = sub.add_parser("train", help="train a VAE variant")
    t.add_argument("--variant", choices=("genie", "noisy", "real"), required=True)
    t.add_argument("--data", required=True)
    t.add_argument("--snr-db", type=float)
    t.add_argument("--epochs", type=int, default=TrainConfig.epochs)
    t.add_argument("--latent-dim", type=int, default=TrainConfig.latent_dim)
    t.add_argument("--learning-rate", type=float, default=TrainConfig.learning_rate)
    t.add_argument("--batch-size", type=int, default=TrainConfig.batch_size)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out", required=True)

    e = sub.add_parser("evaluate", help="print the NMSE of one estimator at one SNR")
    e.add_argument("--estimator", choices=KINDS, required=True)
    e.add_argument("--data", required=True, help="test dataset")
    e.add_argument("--snr-db", type=float, required=True)
    e.add_argument("--model", help="VAE checkpoint for the vae-* estimators")
    e.add_argument("--gmm", help="GMM checkpoint")
    e.add_argument("--train-data", help="training set for fitting the GMM or the sample covariance")
    e.add_argument("--gmm-components", type=int, default=16)
    e.add_argument("--seed", type=int, default=0)

    s = sub.add_parser("sweep", help="run an SNR sweep described by a config file")
    s.add_argument("--config", required=True)
    s.add_argument("--out", help="CSV path (overrides the config's output key)")
    return p


def _generate(args):
    cfg = ScenarioConfig(
        antennas=args.antennas,
        clusters=args.clusters,
        angular_spread=math.radians(args.angular_spread_deg),
        seed=args.seed,
    )
    ds = generate_dataset(cfg, args.samples, keep_deltas=args.keep_deltas, split_tag=args.split)
    save_dataset(ds, args.out)


def _train(args):
    ds = load_dataset(args.data)
    cfg = TrainConfig(
        variant=args.variant,
        snr_db=args.snr_db,
        learning_rate=args.learning_rate,
        epochs=args.epochs,
        batch_size=args.batch_size,
        latent_dim=args.latent_dim,
        seed=args.seed,
    )
    model = VaeModel(ds.antennas, cfg)
    progress = (lambda r: logging.info("epoch %d: %s", r["epoch"], r)) if args.verbose else None
    train(model, ds, cfg, progress=progress)
    save_model(model, args.out)


def _evaluate(args):
    test = load_dataset(args.data)
    kind = args.estimator
    if kind in VAE_KINDS:
        if args.model is None:
            raise _UsageError(f"--model is required for {kind}")
        payload = load_model(args.model)
    elif kind == "gmm":
        if args.gmm:
            payload = load_gmm(args.gmm)
        elif args.train_data:
            payload = gmm_fit(load_dataset(args.train_data), args.gmm_components, rng=args.seed)
        else:
            raise _UsageError("gmm needs --gmm or --train-data")
    elif kind == "sample-cov":
        payload = fit_sample_cov(load_dataset(args.train_data) if args.train_data else test)
    elif kind == "genie-cov":
        payload = test.config
    else:
        payload = None
    est = Estimator(kind, payload)
    h = test.channels()
    obs = observe(h, args.snr_db, observation_rng(args.seed, args.snr_db))
    req = EstimateRequest(
        obs.observations,
        obs.noise_variances,
        h_true=h if est.needs_true_channels else None,
        delta=test.deltas if est.needs_deltas else None,
    )
    print(f"{nmse(h, est.estimate(req)):.8g}")


def _sweep(args):
    cfg = load_config(args.config)
    result = run_sweep(cfg)
    out = args.out or cfg.output
    if out:
        emit_csv(result, out)
    else:
        sys.stdout.write(format_csv(result))


_COMMANDS = {"generate": _generate, "train": _train, "evaluate": _evaluate, "sweep": _sweep}


def main(argv=None) -> int:
    try:
        args = _build_parser().parse_args(argv)
    except _UsageError as exc:
        sys.stderr.write(str(exc))
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        _COMMANDS[args.command](args)
    except _UsageError as exc:
        sys.stderr.write(f"vaece: error: {exc}\n")
        return EXIT_USAGE
    except (VaeceError, OSError) as exc:
        sys.stderr.write(f"vaece: {type(exc).__name__}: {exc}\n")
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
