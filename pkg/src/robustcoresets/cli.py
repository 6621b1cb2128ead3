"""Command-line interface.

Subcommands:
    run CONFIG        run an experiment described by a JSON config
    aggregate CSV     summarize a metrics CSV into median/quartile rows
    selftest          run the built-in oracle and property checks

The JSON config schema is documented in the README. The environment
variable ROBUSTCORESETS_OUTPUT_DIR overrides only the output directory.
Exit code is 0 on success; failures print one machine-readable JSON line to
stderr and exit nonzero.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .exceptions import ConfigError
from .experiments import aggregate, load_config, run_experiment


def _fail(message: str, code: int = 1) -> int:
    print(json.dumps({"error": message}), file=sys.stderr)
    return code


def _cmd_run(args) -> int:
    cfg = load_config(args.config)
    output_dir = os.environ.get("ROBUSTCORESETS_OUTPUT_DIR") or args.output_dir
    result = run_experiment(cfg, output_dir=output_dir)
    print(json.dumps({"metrics": result["metrics"], "traces_dir": result["traces_dir"],
                      "failed_cells": len(result["errors"])}))
    return 1 if result["errors"] else 0


def _cmd_aggregate(args) -> int:
    rows = aggregate(args.metrics, out_path=args.output)
    if args.output is None:
        for row in rows:
            print(json.dumps(row))
    else:
        print(json.dumps({"summary": args.output, "rows": len(rows)}))
    return 0


def _selftest_checks():
    """Yield (name, callable) pairs; each callable raises on failure."""
    from .builder import (BuildConfig, CoresetState, build, center_f,
                          estimate_correlations, mc_gradient, uniform_baseline)
    from .models import BetaConfig, DiscreteToyModel, GaussianModel, LogisticModel

    rng = np.random.default_rng(20260810)

    def toy(j=8, n=6):
        prior = rng.dirichlet(np.ones(j))
        return DiscreteToyModel(prior=prior, table=rng.standard_normal((j, n)))

    def check_toy_gradient():
        for _ in range(10):
            model = toy()
            w = rng.uniform(0.0, 2.0, model.n_points)
            exact = model.exact(w)
            fd = np.empty_like(w)
            for k in range(len(w)):
                h = 1e-5 * (1.0 + abs(w[k]))
                up, dn = w.copy(), w.copy()
                up[k] += h
                dn[k] -= h
                fd[k] = (model.exact(up).kl_to_full - model.exact(dn).kl_to_full) / (2 * h)
            np.testing.assert_allclose(exact.grad, fd, rtol=1e-5, atol=1e-9)

    def check_mc_gradient_unbiased():
        model = toy(j=6, n=5)
        ds = model.as_dataset()
        w_full = rng.uniform(0.0, 1.5, model.n_points)
        support = np.arange(model.n_points)
        exact = model.exact(w_full).grad
        beta = BetaConfig(1.0)
        runs = 2000
        estimates = np.empty((runs, model.n_points))
        mc_rng = np.random.default_rng(7)
        for r in range(runs):
            thetas = model.sample_posterior(ds, support, w_full, 8, mc_rng)
            batch = mc_rng.choice(model.n_points, size=3, replace=False)
            g = center_f(thetas, model, ds, support, beta)
            gp = center_f(thetas, model, ds, batch, beta)
            estimates[r] = mc_gradient(g, gp, w_full, model.n_points, 3)
        err = estimates.mean(axis=0) - exact
        se = estimates.std(axis=0, ddof=1) / np.sqrt(runs)
        if not np.all(np.abs(err) <= 4.0 * se):
            raise AssertionError(f"MC gradient bias beyond 4 standard errors: {err / se}")

    def check_beta_limit():
        model = GaussianModel(mu0=np.zeros(1), Sigma0=np.eye(1), Sigma=np.eye(1))
        small = BetaConfig(1e-4)
        classical = BetaConfig.classical_mode()
        for _ in range(100):
            a, b, theta = rng.uniform(-1.2, 1.2, 3)
            diff = model.beta_f([a], [theta], small) - model.beta_f([b], [theta], small)
            ref = model.beta_f([a], [theta], classical) - model.beta_f([b], [theta], classical)
            if abs(diff - ref) > 1e-3:
                raise AssertionError(f"beta->0 mismatch: {diff} vs {ref}")

    def check_conjugate_oracle():
        from .data import Dataset

        d = 3
        ds = Dataset(features=rng.standard_normal((20, d)))
        model = GaussianModel(mu0=rng.standard_normal(d), Sigma0=np.eye(d), Sigma=0.5 * np.eye(d))
        w = rng.uniform(0, 2, 20)
        mean, cov = model.weighted_posterior(ds, np.arange(20), w)
        prec = np.linalg.inv(np.eye(d)) + w.sum() * np.linalg.inv(0.5 * np.eye(d))
        cov_ref = np.linalg.inv(prec)
        mean_ref = cov_ref @ (np.linalg.solve(np.eye(d), model.mu0)
                              + np.linalg.solve(0.5 * np.eye(d), w @ ds.features))
        np.testing.assert_allclose(cov, cov_ref, atol=1e-10)
        np.testing.assert_allclose(mean, mean_ref, atol=1e-10)

    def check_correlation_identities():
        # hand case: column (-1,0,1) against residual (-2,0,2) at full batch
        g = np.array([[-1.0, 3.0], [0.0, 3.0], [1.0, 3.0]])
        centered = g - g.mean(axis=0)
        corr, _ = estimate_correlations(centered, centered[:, :1] * 2.0, np.zeros(2), 3, 3)
        expected = (4.0 / 3.0) / np.sqrt(2.0 / 3.0)
        if abs(corr[0] - expected) > 1e-12 or corr[1] != 0.0:
            raise AssertionError(f"correlation identity failed: {corr}")

    def check_build_determinism():
        model = toy(j=10, n=12)
        ds = model.as_dataset()
        cfg = BuildConfig(iterations=4, batch_size=5, num_samples=8, inner_steps=5,
                          beta=BetaConfig(1.0), seed=11)
        s1, t1 = build(ds, model, cfg)
        s2, t2 = build(ds, model, cfg)
        if not (np.array_equal(s1.indices, s2.indices)
                and np.array_equal(s1.weights, s2.weights)
                and [x.selected_index for x in t1] == [x.selected_index for x in t2]):
            raise AssertionError("repeated build with one seed diverged")

    def check_uniform_baseline():
        from .data import Dataset

        ds = Dataset(features=rng.standard_normal((15, 2)))
        state = uniform_baseline(ds, 15, seed=3)
        if not np.allclose(state.weights, 1.0) or state.support_size != 15:
            raise AssertionError("full-size uniform baseline must have unit weights")

    yield "toy gradient vs finite differences", check_toy_gradient
    yield "mc gradient unbiasedness", check_mc_gradient_unbiased
    yield "beta->0 log-likelihood limit", check_beta_limit
    yield "conjugate posterior vs dense oracle", check_conjugate_oracle
    yield "correlation identities", check_correlation_identities
    yield "build determinism", check_build_determinism
    yield "uniform baseline weights", check_uniform_baseline


def _cmd_selftest(_args) -> int:
    failures = 0
    for name, fn in _selftest_checks():
        try:
            fn()
            print(f"PASS {name}")
        except Exception as exc:
            failures += 1
            print(f"FAIL {name}: {exc}")
    if failures:
        return _fail(f"{failures} selftest checks failed")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="robustcoresets", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run an experiment config")
    p_run.add_argument("config", help="path to a JSON experiment config")
    p_run.add_argument("--output-dir", default=None, help="override the config's output_dir")
    p_run.set_defaults(fn=_cmd_run)

    p_agg = sub.add_parser("aggregate", help="summarize a metrics CSV")
    p_agg.add_argument("metrics", help="path to metrics.csv")
    p_agg.add_argument("-o", "--output", default=None, help="summary CSV path")
    p_agg.set_defaults(fn=_cmd_aggregate)

    p_self = sub.add_parser("selftest", help="run built-in oracle checks")
    p_self.set_defaults(fn=_cmd_selftest)

    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        return _fail(f"config error: {exc}", 2)
    except FileNotFoundError as exc:
        return _fail(f"file not found: {exc}", 2)
    except Exception as exc:
        return _fail(f"{type(exc).__name__}: {exc}", 1)


if __name__ == "__main__":
    sys.exit(main())
