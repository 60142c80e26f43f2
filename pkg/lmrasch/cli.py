"""Command line interface for lmrasch.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import re
import sys
from pathlib import Path
from typing import Any, TextIO

from lmrasch import bundle, estimation, posterior, selection, simulation
from lmrasch.config import FitConfig, load_config
from lmrasch.data import Dataset, ItemDesign
from lmrasch.exceptions import (
    ConstraintViolation,
    FitFailure,
    InvalidArgument,
    InvalidDesign,
    LikelihoodRatioError,
    MStepFailure,
    UsageError,
)

LOGGER = logging.getLogger("lmrasch")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERICAL = 3

# Ids hold commas themselves ("eta1:2,1,2"); a new id starts with a block name.
_PARAM_SEP = re.compile(r",(?=\s*[A-Za-z])")


def _setup_logging(verbose: bool = False):
    if not LOGGER.handlers:
        LOGGER.addHandler(logging.StreamHandler())
    if verbose:
        LOGGER.setLevel(logging.DEBUG)
    elif not LOGGER.level:
        LOGGER.setLevel(logging.INFO)


class ArgumentParser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def parse_range(text: str) -> list[int]:
    """``"3"`` or ``"1..5"`` as a list of integers."""
    low, sep, high = text.partition("..")
    try:
        bounds = (int(low), int(high) if sep else int(low))
    except ValueError:
        raise argparse.ArgumentTypeError(f'expected N or A..B, got "{text}"') from None
    if bounds[0] < 1 or bounds[1] < bounds[0]:
        raise argparse.ArgumentTypeError(f'expected 1 <= A <= B, got "{text}"')
    return list(range(bounds[0], bounds[1] + 1))


def _single(values: list[int] | None, flag: str, alternative: str | None = None) -> int:
    if values is None:
        unless = f" unless {alternative} is given" if alternative else ""
        raise UsageError(f"{flag} is required{unless}")
    if len(values) != 1:
        raise UsageError(f"{flag} takes a single value for this command")
    return values[0]


class Command:
    help = "Estimate multilevel latent Markov Rasch models."

    def __init__(self, stdout: TextIO | None = None):
        self.stdout = stdout or sys.stdout

    def create_parser(self) -> ArgumentParser:
        parser = ArgumentParser(prog="lmrasch", description=self.help)
        self.add_arguments(parser)
        return parser

    def _common(self, parser, data: bool = True):
        if data:
            parser.add_argument("--data", required=True, type=Path, help="Bundle directory")
        parser.add_argument("--out", required=True, type=Path, help="Output directory")
        parser.add_argument("--threads", type=int, help="Worker threads (default: all cores)")
        parser.add_argument("-v", "--verbose", action="store_true", help="Debug logging")

    def _estimation(self, parser, k_range: bool = False, model: bool = False):
        kind = "A[..B]" if k_range else "N"
        parser.add_argument("--k1", type=parse_range, metavar=kind, help="Cluster classes")
        parser.add_argument("--k2", type=parse_range, metavar=kind, help="Ability states")
        parser.add_argument("--starts", type=int, help="Random starts besides the default one")
        parser.add_argument("--seed", type=int, help="Seed of the random starts")
        parser.add_argument("--tol", type=float, help="Relative log-likelihood tolerance")
        parser.add_argument("--max-iters", type=int, help="EM iterations per start")
        parser.add_argument("--config", type=Path, help="key=value settings file")
        if model:
            parser.add_argument("--model", type=Path, help="Use a model.json instead of fitting")

    def add_arguments(self, parser):
        subparsers = parser.add_subparsers(title="sub-commands", required=True)

        simulate_parser = subparsers.add_parser("simulate", help="Simulate a data bundle.")
        simulate_parser.add_argument("--spec", required=True, type=Path,
                                     help="JSON simulation spec")
        simulate_parser.add_argument("--seed", type=int, help="Overrides the spec seed")
        self._common(simulate_parser, data=False)
        simulate_parser.set_defaults(method=self.simulate)

        fit_parser = subparsers.add_parser("fit", help="Fit one model.")
        self._common(fit_parser)
        self._estimation(fit_parser)
        fit_parser.add_argument("--profile", metavar="COLNAME",
                                help="Average class probabilities by a cluster covariate")
        fit_parser.set_defaults(method=self.fit)

        grid_parser = subparsers.add_parser("grid", help="Fit a (k1, k2) grid and compare BIC.")
        self._common(grid_parser)
        self._estimation(grid_parser, k_range=True)
        grid_parser.set_defaults(method=self.grid)

        se_parser = subparsers.add_parser("se", help="Profile standard errors.")
        self._common(se_parser)
        self._estimation(se_parser, model=True)
        se_parser.add_argument(
            "--params",
            help="Comma-separated parameter ids such as beta:1,eta1:2,1,2 (default: all)",
        )
        se_parser.set_defaults(method=self.se)

        decode_parser = subparsers.add_parser("decode", help="Posterior classes and states.")
        self._common(decode_parser)
        self._estimation(decode_parser, model=True)
        decode_parser.set_defaults(method=self.decode)

        describe_parser = subparsers.add_parser("describe", help="Empirical transitions.")
        self._common(describe_parser)
        describe_parser.add_argument("--classes", type=int, default=6, help="Score classes")
        describe_parser.add_argument("--breaks", choices=("quantile", "width"),
                                     default="quantile", help="Score class breaks")
        describe_parser.add_argument("--split", metavar="COLNAME",
                                     help="Cluster covariate to split by")
        describe_parser.add_argument("--model", type=Path,
                                     help="Also write fitted transitions of a model.json")
        describe_parser.set_defaults(method=self.describe)

    def handle(self, argv: list[str]) -> int:
        options = vars(self.create_parser().parse_args(argv))
        _setup_logging(options.pop("verbose", False))
        method = options.pop("method")
        manifest = bundle.RunManifest(command=method.__name__, argv=list(argv))
        out: Path = options["out"]
        out.mkdir(parents=True, exist_ok=True)
        method(manifest=manifest, **options)
        manifest.write(out)
        return EXIT_OK

    def _config(self, manifest: bundle.RunManifest, options: dict[str, Any]) -> FitConfig:
        base = FitConfig()
        if options.get("config"):
            base = load_config(options["config"])
            manifest.add_inputs(options["config"])
        threads = options.get("threads")
        if threads is None and not options.get("config"):
            threads = os.cpu_count() or 1
        try:
            config = base.replace(
                n_random_starts=options.get("starts"),
                rng_seed=options.get("seed"),
                tol=options.get("tol"),
                max_iters=options.get("max_iters"),
                threads=threads,
            )
        except InvalidArgument as exc:
            raise UsageError(str(exc)) from None
        manifest.config = config.to_dict()
        manifest.seed = config.rng_seed
        return config

    def _load(self, manifest: bundle.RunManifest, options) -> tuple[ItemDesign, Dataset]:
        manifest.add_inputs(options["data"])
        return bundle.load_bundle(options["data"])

    def _fitted(self, manifest, options, design: ItemDesign, dataset: Dataset,
                config: FitConfig) -> estimation.FitResult:
        if options.get("model"):
            manifest.add_inputs(options["model"])
            fitted = estimation.FitResult.from_dict(bundle.read_json(options["model"]))
            params = fitted.params
            if (params.T, params.D, params.p_c, params.p_i) != (
                design.T, design.D, dataset.p_c, dataset.p_i
            ):
                raise InvalidDesign(f"{options['model']} does not match the data bundle")
            return fitted
        k1 = _single(options.get("k1"), "--k1", "--model")
        k2 = _single(options.get("k2"), "--k2", "--model")
        return estimation.fit(design, dataset, k1, k2, config)

    def simulate(self, manifest, **options):
        manifest.add_inputs(options["spec"])
        spec = simulation.SimSpec.from_dict(bundle.read_json(options["spec"]))
        if options.get("seed") is not None:
            spec = dataclasses.replace(spec, seed=options["seed"])
        manifest.seed = spec.seed
        dataset, truth = simulation.simulate(spec)
        out = options["out"]
        bundle.write_bundle(out, dataset)
        bundle.write_report(truth.to_frame(dataset), out / "latent_truth.csv")
        self.stdout.write(f"Simulated {dataset.n_students} subjects into {out}.\n")

    def fit(self, manifest, **options):
        config = self._config(manifest, options)
        design, dataset = self._load(manifest, options)
        result = estimation.fit(
            design, dataset, _single(options["k1"], "--k1"), _single(options["k2"], "--k2"),
            config,
        )
        out = options["out"]
        bundle.write_json(result.to_dict(), out / "model.json")
        bundle.write_report(bundle.trace_frame(result.trace), out / "trace.csv")
        bundle.write_report(bundle.parameter_frame(result.params), out / "parameters.csv")
        bundle.write_report(
            bundle.item_probability_frame(result.params, design), out / "item_probabilities.csv"
        )
        if options.get("profile"):
            frame = selection.class_profile(result.params, dataset, options["profile"])
            bundle.write_report(frame, out / "class_profile.csv")
        self.stdout.write(
            f"Fitted k1={result.k1}, k2={result.k2}: loglik {result.loglik:.6g}, "
            f"BIC {result.bic:.6g}.\n"
        )

    def grid(self, manifest, **options):
        if options.get("k1") is None or options.get("k2") is None:
            raise UsageError("grid needs --k1 and --k2")
        config = self._config(manifest, options)
        design, dataset = self._load(manifest, options)
        result = selection.grid_search(design, dataset, options["k1"], options["k2"], config)
        out = options["out"]
        bundle.write_report(result.to_frame(), out / "grid.csv")
        best = result.best
        if best is not None:
            bundle.write_json(result.fits[(best.k1, best.k2)].to_dict(), out / "model.json")
            self.stdout.write(f"Best model by BIC: k1={best.k1}, k2={best.k2}.\n")
        else:
            self.stdout.write("No model converged.\n")

    def se(self, manifest, **options):
        config = self._config(manifest, options)
        design, dataset = self._load(manifest, options)
        fitted = self._fitted(manifest, options, design, dataset, config)
        ids = None
        if options.get("params"):
            ids = [text.strip() for text in _PARAM_SEP.split(options["params"]) if text.strip()]
        results = selection.standard_errors(design, dataset, fitted, ids, config)
        out = options["out"]
        bundle.write_report(selection.se_frame(results), out / "se_report.csv")
        undefined = sum(not r.defined for r in results)
        self.stdout.write(
            f"Computed {len(results)} standard errors ({undefined} undefined).\n"
        )

    def decode(self, manifest, **options):
        config = self._config(manifest, options)
        design, dataset = self._load(manifest, options)
        fitted = self._fitted(manifest, options, design, dataset, config)
        post = posterior.estep(fitted.params, design, dataset, config.threads)
        labels = posterior.decode(fitted.params, design, dataset, post)
        out = options["out"]
        bundle.write_report(
            bundle.cluster_posterior_frame(dataset, post.w, labels.classes),
            out / "cluster_posteriors.csv",
        )
        bundle.write_report(
            bundle.state_posterior_frame(dataset, post.z1, labels.states),
            out / "state_posteriors.csv",
        )
        bundle.write_report(
            bundle.state_distribution_frame(posterior.state_distribution(post)),
            out / "state_distribution.csv",
        )
        self.stdout.write(f"Decoded {dataset.H} clusters and {dataset.n_students} subjects.\n")

    def describe(self, manifest, **options):
        design, dataset = self._load(manifest, options)
        split = options.get("split")
        tables = simulation.empirical_transitions(
            dataset, options["classes"], options["breaks"], split
        )
        out = options["out"]
        bundle.write_report(bundle.transitions_frame(tables, split), out / "transitions.csv")
        if options.get("model"):
            fitted = self._fitted(manifest, options, design, dataset, FitConfig())
            matrices = posterior.average_transitions(fitted.params, design, dataset)
            bundle.write_report(
                bundle.fitted_transitions_frame(matrices), out / "fitted_transitions.csv"
            )
        self.stdout.write(f"Wrote {len(tables)} transition tables.\n")


def _exit_code(exc: Exception) -> int:
    if isinstance(exc, (UsageError, InvalidArgument, KeyError)):
        return EXIT_USAGE
    if isinstance(exc, InvalidDesign):
        return EXIT_DATA
    return EXIT_NUMERICAL


def run_command(argv: list[str] | None = None, stdout: TextIO | None = None) -> int:
    """Run one command and return its exit status."""
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        return Command(stdout).handle(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    except (
        UsageError, InvalidArgument, KeyError, InvalidDesign, ConstraintViolation,
        MStepFailure, FitFailure, LikelihoodRatioError,
    ) as exc:
        message = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        sys.stderr.write(f"lmrasch: error: {message}\n")
        return _exit_code(exc)


def main(argv: list[str] | None = None):
    sys.exit(run_command(argv))
