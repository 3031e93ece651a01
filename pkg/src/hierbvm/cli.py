"""Command-line experiment runner.

Subcommands: ``coeffs``, ``simulate``, ``posterior``, ``bvm-sweep`` and
``fisher-sweep``.  Every run writes ``meta.json`` next to its outputs.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import __version__
from ._backend import BACKEND
from .bvm import Lattice, PriorSpec, bvm_limit, bvm_precision_avg, interval_mass, l1_distance, posterior_grid
from .config import ConfigError, load_config
from .fisher import FisherSettings, SquareIntLatent, TooManyDropsError, true_fisher_mc
from .legendre import legendre_coeff
from .model_core import MomentModel, NotPositiveDefiniteError, RandomStream, sample_observations
from .parabolic import ParabolicMomentModel, ParabolicSettings, reference_spec, sample_data_parabolic
from .schrodinger import (
    SchrodingerLatent,
    SchrodingerMomentModel,
    SchrodingerSettings,
    StepCapExceeded,
    sample_data_schrodinger,
)
from .square_integral import SquareIntGenerator, SquareIntModel, cov_coeff_b, cov_coeff_c

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4


def _fmt(v):
    return f"{float(v):.17g}"


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([v if isinstance(v, (int, np.integer, str)) else _fmt(v) for v in r])


@dataclass
class Experiment:
    model: MomentModel
    simulate: Callable  # (theta0, N, stream) -> ObservationBatch


def _schrodinger_settings(cfg):
    m, mc = cfg["model"], cfg["mc"]
    return SchrodingerSettings(grid_n=m["grid_n"], dt=mc["dt"], paths_per_node=mc["paths_per_node"],
                               quad_grid=mc["quad_grid"], n_fields=mc["n_fields"], p=m["p"],
                               lambda_scale=m["lambda_scale"])


def _parabolic_settings(cfg):
    m, mc = cfg["model"], cfg["mc"]
    return ParabolicSettings(dt=mc["dt"], paths_per_node=mc["paths_per_node"], quad_grid=mc["quad_grid"],
                             n_fields=mc["n_fields"], p=m["p"], lambda_scale=m["lambda_scale"],
                             grid_n=m["grid_n"])


def build_experiment(cfg, stream: RandomStream) -> Experiment:
    m = cfg["model"]
    name = m["name"]
    if name == "square_integral":
        p = m["p"]
        lam = m["lambda_scale"] * np.eye(p)
        model = SquareIntModel((m["z"],), lam, p)
        gen = SquareIntGenerator((m["z"],), m["n_steps"], p)
        return Experiment(model, lambda th, N, s: sample_observations(gen, th, N, s, noise_cov=lam))
    if name == "schrodinger":
        st = _schrodinger_settings(cfg)
        model = SchrodingerMomentModel(st, stream.substream(7))
        return Experiment(model, lambda th, N, s: sample_data_schrodinger(th, st.Lambda, N, st, s))
    st = _parabolic_settings(cfg)
    spec = reference_spec(m["t_points"], m["t_max"])
    model = ParabolicMomentModel(spec, st, stream.substream(7))
    return Experiment(model, lambda th, N, s: sample_data_parabolic(th, N, spec, st, s))


def _lattice(cfg):
    g = cfg["grid"]
    return Lattice(g["lower"], g["upper"], g["nodes"])


def _prior(cfg):
    return PriorSpec.uniform(cfg["prior"]["lower"], cfg["prior"]["upper"])


def _theta0(cfg):
    return np.atleast_1d(float(cfg["model"]["theta0"]))


def _posterior_run(exp, cfg, batch):
    theta0 = _theta0(cfg)
    pg = posterior_grid(exp.model, batch, _prior(cfg), _lattice(cfg))
    lim = bvm_limit(exp.model, theta0, batch)
    half = 5.0 / np.sqrt(batch.N)
    return pg, lim, l1_distance(pg, lim), interval_mass(pg, theta0 - half, theta0 + half)


def cmd_coeffs(cfg, out, stream, threads):
    n = 3
    _write_csv(os.path.join(out, "coeff_a.csv"), ["j", "k", "a"],
               [(j, k, legendre_coeff(j, k)) for j in range(n) for k in range(j + 1)])
    _write_csv(os.path.join(out, "coeff_bc.csv"), ["k", "l", "b", "c"],
               [(k, l, cov_coeff_b(k, l), cov_coeff_c(k, l)) for k in range(n) for l in range(n)])
    return ["coeff_a.csv", "coeff_bc.csv"]


def cmd_simulate(cfg, out, stream, threads):
    exp = build_experiment(cfg, stream)
    batch = exp.simulate(_theta0(cfg), cfg["sampling"]["N"], stream.substream(1))
    batch.to_csv(os.path.join(out, "observations.csv"))
    return ["observations.csv"]


def cmd_posterior(cfg, out, stream, threads):
    exp = build_experiment(cfg, stream)
    batch = exp.simulate(_theta0(cfg), cfg["sampling"]["N"], stream.substream(1))
    pg, lim, l1, mass = _posterior_run(exp, cfg, batch)
    batch.to_csv(os.path.join(out, "observations.csv"))
    pg.to_csv(os.path.join(out, "posterior_grid.csv"))
    lim.to_json(os.path.join(out, "bvm_limit.json"))
    with open(os.path.join(out, "l1.json"), "w") as fh:
        json.dump({"N": batch.N, "l1": l1, "mass_5_over_sqrtN": mass}, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return ["observations.csv", "posterior_grid.csv", "bvm_limit.json", "l1.json"]


def _pool(threads):
    return ThreadPoolExecutor(max_workers=(os.cpu_count() or 1) if threads == 0 else threads)


def cmd_bvm_sweep(cfg, out, stream, threads):
    exp = build_experiment(cfg, stream)
    seed = cfg["sampling"]["seed"]
    jobs = [(N, r) for N in cfg["sampling"]["N_list"] for r in range(cfg["sampling"]["replicates"])]

    def one(job):
        N, r = job
        s = RandomStream(seed, (seed + r) % 2**64, (N,))
        batch = exp.simulate(_theta0(cfg), N, s)
        _, lim, l1, mass = _posterior_run(exp, cfg, batch)
        return N, r, l1, float(lim.T_N[0]), mass

    with _pool(threads) as pool:
        rows = list(pool.map(one, jobs))
    _write_csv(os.path.join(out, "bvm_sweep.csv"), ["N", "replicate", "l1", "T_N", "mass_5_over_sqrtN"], rows)
    summary = []
    for N in cfg["sampling"]["N_list"]:
        sel = [r for r in rows if r[0] == N]
        summary.append((N, float(np.median([r[2] for r in sel])), float(np.median([r[4] for r in sel]))))
    _write_csv(os.path.join(out, "bvm_summary.csv"), ["N", "median_l1", "median_mass_5_over_sqrtN"], summary)
    return ["bvm_sweep.csv", "bvm_summary.csv"]


def fisher_point(cfg, theta0, stream: RandomStream):
    """``(I_hat, I_se, V_star)`` matrices for one value of ``theta0``."""
    m, fc = cfg["model"], cfg["fisher"]
    settings = FisherSettings(fc["n_outer"], fc["n_inner"], fc["derivative_mode"], fc["shared_inner"])
    p = m["p"]
    lam = m["lambda_scale"] * np.eye(p)
    if m["name"] == "square_integral":
        latent = SquareIntLatent(m["z"], m["n_steps"], p)
        model = SquareIntModel((m["z"],), lam, p)
    elif m["name"] == "schrodinger":
        latent = SchrodingerLatent(_schrodinger_settings(cfg))
        # moments from the same latent law, on a dedicated sample
        model = SchrodingerMomentModel(latent.settings, stream.substream(7))
    else:
        raise ConfigError("fisher-sweep supports the square_integral and schrodinger models")
    res = true_fisher_mc(latent, theta0, settings, stream, lam)
    V = bvm_precision_avg(model, theta0).V
    return res.estimate.value, res.estimate.std_error, V


def cmd_fisher_sweep(cfg, out, stream, threads):
    grid = cfg["fisher"]["theta0_grid"]

    def one(k):
        return fisher_point(cfg, grid[k], stream.substream(100 + k))

    with _pool(threads) as pool:
        results = list(pool.map(one, range(len(grid))))
    rows = []
    for th, (I, se, V) in zip(grid, results):
        d = I.shape[0]
        rows += [(th, a, b, I[a, b], se[a, b], V[a, b]) for a in range(d) for b in range(d)]
    _write_csv(os.path.join(out, "fisher_sweep.csv"),
               ["theta0", "entry_row", "entry_col", "I_hat", "I_se", "V_star"], rows)
    return ["fisher_sweep.csv"]


COMMANDS = {
    "coeffs": cmd_coeffs,
    "simulate": cmd_simulate,
    "posterior": cmd_posterior,
    "bvm-sweep": cmd_bvm_sweep,
    "fisher-sweep": cmd_fisher_sweep,
}


def make_parser():
    ap = argparse.ArgumentParser(prog="hierbvm", description=__doc__.splitlines()[0])
    ap.add_argument("subcommand", choices=sorted(COMMANDS))
    ap.add_argument("--config", help="JSON experiment config")
    ap.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                    help="dotted-path override, e.g. model.theta0=40")
    ap.add_argument("--seed", type=int, help="master seed (overrides sampling.seed)")
    ap.add_argument("--out", help="existing output directory (overrides output.directory)")
    ap.add_argument("--threads", type=int, default=1, help="worker threads, 0 = one per core")
    return ap


def main(argv=None):
    args = make_parser().parse_args(argv)
    try:
        overrides = list(args.set)
        if args.seed is not None:
            overrides.append(f"sampling.seed={args.seed}")
        if args.out is not None:
            overrides.append(f"output.directory={json.dumps(args.out)}")
        cfg = load_config(args.config, overrides)
        if args.threads < 0:
            raise ConfigError("--threads must be nonnegative")
    except ConfigError as exc:
        print(f"hierbvm: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"hierbvm: cannot read config: {exc}", file=sys.stderr)
        return EXIT_IO
    out = cfg["output"]["directory"]
    if not os.path.isdir(out):
        print(f"hierbvm: output directory {out!r} does not exist", file=sys.stderr)
        return EXIT_IO
    stream = RandomStream(cfg["sampling"]["seed"])
    try:
        files = COMMANDS[args.subcommand](cfg, out, stream, args.threads)
        meta = {"subcommand": args.subcommand, "config": cfg, "seed": cfg["sampling"]["seed"],
                "version": __version__, "backend": BACKEND, "files": files}
        with open(os.path.join(out, "meta.json"), "w") as fh:
            json.dump(meta, fh, indent=2, sort_keys=True)
            fh.write("\n")
    except ConfigError as exc:
        print(f"hierbvm {args.subcommand}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"hierbvm {args.subcommand}: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (NotPositiveDefiniteError, np.linalg.LinAlgError, FloatingPointError, TooManyDropsError,
            StepCapExceeded, ValueError, ArithmeticError) as exc:
        print(f"hierbvm {args.subcommand}: numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
