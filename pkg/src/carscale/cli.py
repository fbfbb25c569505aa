"""Command-line front end: components, scale, fit, simulate, prior-check.

Every command is deterministic given its inputs and seed and overwrites its
output files identically on re-runs. Options follow the precedence
flags > config JSON > built-in defaults. Validation problems exit with
status 2, numerical failures with status 3; either case writes a one-line
JSON error object to stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np
from scipy.integrate import quad, simpson
from scipy.stats import gamma as gamma_dist

from .graphs import GraphFormatError, connected_components, isolate_nodes, read_graph
from .mcmc import FitConfig, McmcError, fit, read_mapping_csv, sample_prior
from .precision import NumericalError, write_mtx
from .priors import (
    Bym2Spec,
    PcPriorSpec,
    PhiPrior,
    PriorError,
    gamma_prior_logpdf,
    pc_prior_precision_logpdf,
)
from .scaling import scale_model

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_NUMERICAL = 3


@dataclass
class RunConfig:
    """Resolved settings of one CLI invocation."""

    command: str
    graph_path: Path | None
    data_path: Path | None
    config: dict
    output_dir: Path
    isolate: list[int]
    seed: int


def _load_config(path: str | None) -> dict:
    if not path:
        return {}
    cfg = json.loads(Path(path).read_text())
    if not isinstance(cfg, dict):
        raise ValueError(f"{path}: config must be a JSON object")
    return cfg


def _resolve(args, need_graph: bool = True, need_data: bool = False) -> RunConfig:
    config = _load_config(getattr(args, "config", None))
    isolate_raw = args.isolate if getattr(args, "isolate", None) else config.get("isolate", [])
    if isinstance(isolate_raw, str):
        isolate_raw = [tok for tok in isolate_raw.replace(",", " ").split() if tok]
    isolate = [int(v) for v in isolate_raw]
    seed = args.seed if args.seed is not None else int(config.get("seed", 0))

    graph_path = getattr(args, "graph", None) or config.get("graph")
    data_path = getattr(args, "data", None) or config.get("data")
    if need_graph and not graph_path:
        raise ValueError("a graph file is required (--graph)")
    if need_data and not data_path:
        raise ValueError("a data file is required (--data)")

    out = Path(args.out if args.out else config.get("output_dir", "."))
    out.mkdir(parents=True, exist_ok=True)
    return RunConfig(
        command=args.command,
        graph_path=Path(graph_path) if graph_path else None,
        data_path=Path(data_path) if data_path else None,
        config=config,
        output_dir=out,
        isolate=isolate,
        seed=seed,
    )


def _load_graph(run: RunConfig):
    g = read_graph(run.graph_path)
    for v in run.isolate:
        if not 1 <= v <= g.n:
            raise ValueError(f"--isolate node {v} out of range 1..{g.n}")
    if run.isolate:
        g = isolate_nodes(g, [v - 1 for v in run.isolate])
    return g


def _fmt(x: float) -> str:
    return f"{x:.17g}"


# ---------------------------------------------------------------------------
# commands


def cmd_components(args) -> int:
    run = _resolve(args)
    g = _load_graph(run)
    part = connected_components(g)
    sizes = sorted((int(s) for s in part.sizes), reverse=True)
    singles = [i + 1 for i in part.singleton_ids]
    k = part.n_components
    report = f"{k} component{'s' if k != 1 else ''}: sizes {','.join(str(s) for s in sizes)}"
    if singles:
        report += f"; singletons: {','.join(str(s) for s in singles)}"
    print(report)
    payload = {
        "n": g.n,
        "n_components": k,
        "sizes": sizes,
        "singletons": singles,
        "isolated": run.isolate,
    }
    (run.output_dir / "components.json").write_text(json.dumps(payload, indent=2) + "\n")
    return EXIT_OK


def cmd_scale(args) -> int:
    run = _resolve(args)
    g = _load_graph(run)
    method = args.method or run.config.get("method", "dense")
    model = scale_model(g, method=method)
    part = model.partition

    write_mtx(model.scaled_R, run.output_dir / "scaled_R.mtx")

    lines = ["node,component,degree,marginal_variance,scaling_constant"]
    deg = g.degrees
    for i in range(g.n):
        comp = int(part.labels[i])
        var = model.marginal_variances[i]
        var_s = "inf" if np.isinf(var) else _fmt(float(var))
        lines.append(
            f"{i + 1},{comp + 1},{int(deg[i])},{var_s},{_fmt(float(model.component_constants[comp]))}"
        )
    (run.output_dir / "scaling.csv").write_text("\n".join(lines) + "\n")

    info = {
        "kappa_exponent": str(model.norm_info.kappa_exponent),
        "gen_log_det": model.norm_info.gen_log_det,
        "n": g.n,
        "n_components": part.n_components,
        "component_sizes": [int(s) for s in part.sizes],
        "component_constants": [float(c) for c in model.component_constants],
        "singletons": [i + 1 for i in part.singleton_ids],
    }
    (run.output_dir / "norm_info.json").write_text(json.dumps(info, indent=2) + "\n")
    print(
        f"scaled {part.n_components} component(s); constants "
        + ", ".join(f"{c:.6g}" for c in model.component_constants)
    )
    return EXIT_OK


_MODEL_FLAGS = {
    "besag-scaled": "besag_scaled",
    "besag-unscaled": "besag_unscaled",
    "bym2": "bym2",
}


def cmd_fit(args) -> int:
    run = _resolve(args, need_data=True)
    g = _load_graph(run)
    cfgd = run.config

    model_flag = args.model or cfgd.get("model", "besag-scaled")
    if model_flag not in _MODEL_FLAGS:
        raise ValueError(f"unknown model {model_flag!r}; expected one of {sorted(_MODEL_FLAGS)}")

    data = read_mapping_csv(run.data_path, covariates=cfgd.get("covariates", ()))
    if data.n != g.n:
        raise ValueError(f"data has {data.n} rows but graph has {g.n} nodes")

    fit_cfg = FitConfig(
        model_kind=_MODEL_FLAGS[model_flag],
        iterations=args.iterations or int(cfgd.get("iterations", 200_000)),
        burn_in=args.burn_in if args.burn_in is not None else int(cfgd.get("burn_in", 50_000)),
        thin=int(cfgd.get("thin", 10)),
        seed=run.seed,
        chains=args.chains or int(cfgd.get("chains", 1)),
        priors=cfgd.get("priors", {}),
        per_component_intercepts=bool(cfgd.get("per_component_intercepts", False)),
        save_samples=bool(cfgd.get("save_samples", False)),
        report_risks=tuple(cfgd.get("report_risks")) if cfgd.get("report_risks") else None,
    )

    result = fit(data, g, fit_cfg)
    result.write_summary_csv(run.output_dir / "summaries.csv")
    (run.output_dir / "diagnostics.json").write_text(
        json.dumps(result.diagnostics, indent=2, default=float) + "\n"
    )
    if result.samples is not None:
        np.savez_compressed(run.output_dir / "samples.npz", **result.samples)
    print(
        f"fit {model_flag}: {fit_cfg.iterations} iterations, DIC "
        f"{result.dic:.2f} (p_D {result.p_d:.2f}); wrote summaries.csv"
    )
    return EXIT_OK


def cmd_simulate(args) -> int:
    run = _resolve(args)
    g = _load_graph(run)
    kappa = float(run.config.get("kappa", 1.0))
    draws = args.draws or int(run.config.get("draws", 1000))
    if kappa <= 0 or draws <= 0:
        raise ValueError("kappa and draws must be positive")

    model = scale_model(g)
    sample = sample_prior(model, kappa, rng=run.seed, size=draws)

    header = ",".join(f"node_{i + 1}" for i in range(g.n))
    with open(run.output_dir / "draws.csv", "w") as fh:
        fh.write(header + "\n")
        np.savetxt(fh, sample, delimiter=",", fmt="%.10g")

    var = sample.var(axis=0)
    lines = ["node,empirical_variance"]
    lines += [f"{i + 1},{_fmt(float(var[i]))}" for i in range(g.n)]
    (run.output_dir / "variance_summary.csv").write_text("\n".join(lines) + "\n")

    max_dev = 0.0
    for idx in model.constraints:
        max_dev = max(max_dev, float(np.abs(sample[:, idx].sum(axis=1)).max()))
    print(
        f"simulated {draws} draws at kappa={kappa:g}; max component-sum deviation {max_dev:.2e}"
    )
    return EXIT_OK


def _prior_spec(config: dict) -> dict:
    inner = config.get("prior")
    if isinstance(inner, dict):
        spec = inner
    elif isinstance(inner, str):
        spec = config  # the config itself is the prior object
    else:
        spec = None
    if not isinstance(spec, dict) or not isinstance(spec.get("prior"), str):
        raise ValueError('prior-check config must contain a {"prior": ...} object')
    return spec


def cmd_prior_check(args) -> int:
    run = _resolve(args, need_graph=False)
    spec = _prior_spec(run.config)
    kind = spec["prior"]
    grid_points = int(run.config.get("grid_points", 2049))
    out = run.output_dir

    if kind == "gamma":
        shape, rate = float(spec["shape"]), float(spec["rate"])
        hi = float(gamma_dist.ppf(1.0 - 1e-12, a=shape, scale=1.0 / rate))
        grid = np.linspace(0.0, hi, max(grid_points, 4097))
        pdf = np.zeros_like(grid)
        pdf[1:] = np.exp(gamma_prior_logpdf(grid[1:], shape, rate))
        pdf[0] = pdf[1] if shape >= 1 else 0.0
        if shape == 1.0:
            pdf[0] = rate  # exponential density at the origin
        integral = float(simpson(pdf, x=grid))
        mean = float(simpson(pdf * grid, x=grid))
        report = {"prior": spec, "grid_integral": integral, "grid_mean": mean}
        _write_grid(out / "prior_grid.csv", "kappa", grid, pdf)
    elif kind == "pc.prec":
        ps = PcPriorSpec(u=float(spec["u"]), tail_prob=float(spec["alpha"]))
        lam = -np.log(ps.tail_prob) / ps.u
        lo = (lam / np.log(1.0 / 1e-8)) ** 2
        hi = (lam / np.log(1.0 / (1.0 - 1e-6))) ** 2
        grid = np.geomspace(lo, hi, grid_points)
        pdf = np.exp(pc_prior_precision_logpdf(grid, ps))
        tail, _ = quad(lambda t: np.exp(pc_prior_precision_logpdf(t, ps)), 0.0, ps.u**-2)
        total, _ = quad(
            lambda t: np.exp(pc_prior_precision_logpdf(t, ps)), 0.0, np.inf, limit=200
        )
        report = {
            "prior": spec,
            "computed_tail_prob": float(tail),
            "target_tail_prob": ps.tail_prob,
            "abs_error": abs(float(tail) - ps.tail_prob),
            "integral": float(total),
        }
        _write_grid(out / "prior_grid.csv", "tau", grid, pdf)
    elif kind == "pc.phi":
        if run.graph_path is None:
            raise ValueError("pc.phi prior check requires --graph")
        g = _load_graph(run)
        ps = PcPriorSpec(u=float(spec["u"]), tail_prob=float(spec["alpha"]))
        prior = PhiPrior(Bym2Spec.from_model(scale_model(g)), ps)
        eps = 1e-9
        grid = np.linspace(eps, 1.0 - eps, grid_points)
        pdf = np.exp(prior.logpdf(grid))
        total = float(np.trapezoid(pdf, grid))
        below = grid <= ps.u
        gx = np.append(grid[below], ps.u)
        gy = np.append(pdf[below], np.exp(prior.logpdf(ps.u)))
        mass = float(np.trapezoid(gy, gx))
        report = {
            "prior": spec,
            "computed_tail_prob": mass,
            "target_tail_prob": ps.tail_prob,
            "abs_error": abs(mass - ps.tail_prob),
            "integral": total,
            "penalty_rate": prior.lam,
        }
        _write_grid(out / "prior_grid.csv", "phi", grid, pdf)
    else:
        raise ValueError(f"unknown prior kind {kind!r}")

    (out / "prior_check.json").write_text(json.dumps(report, indent=2) + "\n")
    print(json.dumps(report))
    return EXIT_OK


def _write_grid(path: Path, name: str, grid: np.ndarray, pdf: np.ndarray) -> None:
    lines = [f"{name},pdf"]
    lines += [f"{v:.12g},{p:.12g}" for v, p in zip(grid, pdf)]
    path.write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# parser and entry point


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="carscale",
        description="Scale intrinsic CAR models and fit disease-mapping posteriors.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, graph=True):
        if graph:
            p.add_argument("--graph", help="adjacency-list graph file")
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--out", help="output directory (default: current)")
        p.add_argument("--isolate", help="comma-separated 1-based nodes to cut loose")
        p.add_argument("--seed", type=int, default=None, help="RNG seed")

    p = sub.add_parser("components", help="report connected components")
    common(p)
    p.set_defaults(func=cmd_components)

    p = sub.add_parser("scale", help="write the scaled structure matrix and constants")
    common(p)
    p.add_argument("--method", choices=["dense", "sparse"], default=None)
    p.set_defaults(func=cmd_scale)

    p = sub.add_parser("fit", help="run MCMC for a disease-mapping model")
    common(p)
    p.add_argument("--data", help="CSV with Counts, E, covariates, Region")
    p.add_argument("--model", choices=sorted(_MODEL_FLAGS), default=None)
    p.add_argument("--iterations", type=int, default=None)
    p.add_argument("--burn-in", dest="burn_in", type=int, default=None)
    p.add_argument("--chains", type=int, default=None)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("simulate", help="draw from the constrained scaled field")
    common(p)
    p.add_argument("--draws", type=int, default=None)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("prior-check", help="tabulate a prior density and its tail identity")
    common(p)
    p.set_defaults(func=cmd_prior_check)

    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (NumericalError, McmcError, PriorError) as exc:
        print(json.dumps({"error": str(exc), "kind": "numerical"}), file=sys.stderr)
        return EXIT_NUMERICAL
    except (GraphFormatError, FileNotFoundError, KeyError, ValueError, OSError) as exc:
        print(json.dumps({"error": str(exc), "kind": "input"}), file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
