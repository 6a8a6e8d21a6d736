"""Command-line entry point: ``rwpm <subcommand> [--config PATH] [--seed N] [--workers N] [--out DIR]``.

Each subcommand writes CSVs (17 significant digits, a ``# config_hash=``
header line), a plain-text summary and a ``manifest.json`` into ``--out``.
Identical config, seed and worker count give byte-identical CSVs.
"""

from __future__ import annotations

import argparse
import dataclasses
import importlib
import json
import math
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from . import analysis as an
from .config import ConfigError, ExperimentConfig, default_config, load_config
from .environment import sample_env
from .homogeneous import annealed_partition, build_model, doney_ratio, free_energy, renewal_density
from .kernel import build_kernel
from .parallel import map_tasks
from .partition import RenewalBridgeSampler, mc_normalized, volterra_quenched
from .rng import stream
from .stats import StatReport, write_csv, write_report

# stream tags keep experiments on disjoint random streams
_TAGS = {"simulate-z": 1, "events": 2, "relevance": 3, "irrelevance": 4, "fracmoment": 5, "criticality": 6}


@dataclass
class RunManifest:
    config_hash: str
    master_seed: int
    workers: int
    tool_version: str
    started: float
    finished: float = math.nan
    outputs: list[str] = field(default_factory=list)

    def write(self, out: Path) -> Path:
        path = out / "manifest.json"
        path.write_text(json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return path


@dataclass(frozen=True)
class Claim:
    claim_id: str
    ops: tuple[str, ...]
    config: str
    tolerance: str


CLAIMS = (
    Claim("kernel exactness", ("rwpm.kernel:build_kernel", "rwpm.kernel:sample_jump_amplitude"),
          "gamma in {0.5, 2/3}", "mass 1e-12; telescoping 1e-14; tail sums 1e-12; limit ratio 1%"),
    Claim("local limit of return probability", ("rwpm.spectral:return_prob_curve", "rwpm.spectral:transition_probs"),
          "gamma in {0.4, 0.5, 0.75}, t in [1e2, 1e4]", "exponent -1/gamma +- 0.05; exact unimodality"),
    Claim("annealed free energy exponent", ("rwpm.homogeneous:free_energy", "rwpm.homogeneous:nu_exponent"),
          "gamma in {0.4, 0.75}, 40-point beta grid", "F(beta0) 1e-8; nu 1 +- 0.05 and 3 +- 0.15"),
    Claim("renewal density asymptotics", ("rwpm.homogeneous:renewal_density_at", "rwpm.homogeneous:doney_ratio"),
          "gamma 0.75 at t=1e3; gamma 0.4", "10% of the Doney constant; 2% of 1/m"),
    Claim("enriched construction equivalence", ("rwpm.environment:sample_env", "rwpm.environment:sample_plain_env"),
          "gamma 0.6, rho 0.4, T 50, 1e5 samples", "two-sample p > 0.001"),
    Claim("size-biased block law", ("rwpm.analysis:weighted_batch", "rwpm.environment:sample_bridges"),
          "gamma 0.75, rho 0.3, t 20, 1e5 samples", "two-sample p > 0.001"),
    Claim("stochastic domination of weighted law", ("rwpm.analysis:domination_report",),
          "t in {5, 20, 50}", "E_t <= E + 4 stderr"),
    Claim("Mecke closed forms and shift bound", ("rwpm.analysis:criticality_mean", "rwpm.analysis:weighted_jump_mean",
                                                 "rwpm.analysis:block_criticality_means",
                                                 "rwpm.analysis:shift_bound_report"),
          "regime grid", "4 stderr; bound exact"),
    Claim("partition engines", ("rwpm.partition:volterra_quenched", "rwpm.partition:mc_normalized"),
          "rho 0; 1e4 environments at T 30; 20 fixed environments", "1e-6; 4 stderr"),
    Claim("criticality decay", ("rwpm.analysis:criticality_experiment",),
          "gamma 0.8, T in {25, 50, 100, 200}", "slope <= -0.02 at rho 0.5; |slope| <= 0.01 at rho 0"),
    Claim("irrelevance gap", ("rwpm.analysis:irrelevance_gap",),
          "gamma 0.8, rho 0.5, F(beta) T = 3", "negative at 3 sigma; E[W] = 1 +- 4 stderr"),
    Claim("marginal statistics", ("rwpm.analysis:marginal_moments", "rwpm.analysis:psi_growth_exponent"),
          "gamma 2/3, kappa in {0, 1}, T in [50, 800]", "bounded ratio; exponent 3 kappa +- 0.15"),
    Claim("epsilon-good probe", ("rwpm.analysis:epsilon_good_probe",),
          "gamma 0.4, rho 0.5, R 5, sub-two-thirds regime", "P(A) <= 1/R^2 + 3 stderr; ESS >= 10%"),
    Claim("quenched free energy below annealed", ("rwpm.analysis:quenched_free_energy",),
          "gamma 0.75", "F_hat <= F + 3 CI"),
    Claim("fractional moment signature", ("rwpm.analysis:fractional_moment",),
          "gamma 0.4, rho 0.5, n <= 6", "max/min <= 5"),
)


def resolve_op(name: str):
    module, attr = name.split(":")
    return getattr(importlib.import_module(module), attr)


def list_claims() -> str:
    rows = [("claim", "ops", "default config", "tolerance")]
    rows += [(c.claim_id, ", ".join(op.split(":")[1] for op in c.ops), c.config, c.tolerance) for c in CLAIMS]
    widths = [max(len(r[i]) for r in rows) for i in range(4)]
    return "\n".join("  ".join(cell.ljust(w) for cell, w in zip(r, widths)).rstrip() for r in rows) + "\n"


# ---------------------------------------------------------------------------
# experiments: each takes (cfg, out, seed, workers) and returns written paths


def _model(cfg: ExperimentConfig):
    kernel = build_kernel(cfg.kernel_spec())
    return kernel, build_model(kernel, cfg.model["t_max"], cfg.model["step"])


def _beta_grid(cfg: ExperimentConfig, beta0: float, default) -> np.ndarray:
    if cfg.model["beta_grid"]:
        return np.array(cfg.model["beta_grid"])
    if cfg.model["beta_rel"]:
        return beta0 * np.array(cfg.model["beta_rel"])
    return beta0 * np.asarray(default, dtype=float)


def _summary(out: Path, name: str, lines) -> Path:
    path = out / f"{name}_summary.txt"
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def run_kernel_report(cfg, out, seed, workers):
    kernel = build_kernel(cfg.kernel_spec())
    x = np.unique(np.concatenate([np.arange(0, 64), np.geomspace(64, kernel.x_max, 200).astype(np.int64)]))
    table = write_csv(out / "kernel.csv", ["x", "J", "mu_bar", "tail_mubar", "tail_j"],
                      zip(x, kernel.j(x), kernel.mu_bar[x], kernel.tail_mubar[x], kernel.tail_j[x]), cfg.hash)
    report = StatReport("kernel_checks")
    j = kernel.j_values
    report.add("mass error", abs(j[0] + 2.0 * kernel.tail_j_at(0) - 1.0))
    tele = np.cumsum((j[:-1] - j[1:])[::-1])[::-1] + j[-1]
    report.add("telescoping error", float(np.max(np.abs(tele - j[:-1]))))
    n = np.arange(kernel.x_max - 1)
    lhs = kernel.tail_mubar[n]
    rhs = (2 * n + 1) * j[n] + 2.0 * kernel.tail_j[n]
    report.add("tail-sum error", float(np.max(np.abs(lhs - rhs))))
    m = 10**5
    report.add("tail ratio at 1e5", float(kernel.tail_mubar_at(m) / (m * kernel.j(m))))
    report.add("tail ratio limit", 2.0 * (1.0 + kernel.gamma) / kernel.gamma)
    checks = write_report(out / "kernel_checks.csv", report, cfg.hash)
    summary = _summary(out, "kernel", [f"kernel gamma={kernel.gamma}: exact mass, telescoping and tail sums",
                                       *(f"{r['statistic']}: {r['value']:.6g}" for r in report.rows)])
    return [table, checks, summary]


def run_homogeneous(cfg, out, seed, workers):
    kernel, model = _model(cfg)
    betas = _beta_grid(cfg, model.beta0, np.linspace(1.0, 2.0, 40))
    f = np.array([free_energy(model, b) for b in betas])
    excess = betas - model.beta0
    ok = (excess > 0) & (f > 0)
    slope = np.full(betas.size, math.nan)
    if np.count_nonzero(ok) >= 2:
        lx, lf = np.log(excess[ok]), np.log(f[ok])
        slope[ok] = np.gradient(lf, lx)
    paths = [write_csv(out / "free_energy.csv", ["beta", "F", "nu_local_slope"], zip(betas, f, slope), cfg.hash)]
    t_max = min(1e3, cfg.model["t_max"])
    curve = renewal_density(model, t_max, cfg.model["step"])
    pick = np.unique(np.round(np.geomspace(1, curve.t.size - 1, 120)).astype(int))
    t = curve.t[pick]
    paths.append(write_csv(out / "renewal.csv", ["t", "K", "u", "doney_ratio"],
                           zip(t, model.K(t), curve.u[pick], doney_ratio(model, t, curve.u[pick])), cfg.hash))
    nu = an.nu_from_alpha(model.alpha)
    paths.append(_summary(out, "homogeneous", [
        "annealed free energy and renewal density",
        f"beta0={model.beta0:.10g} F(beta0)={free_energy(model, model.beta0):.3g}",
        f"critical exponent (1 v 1/alpha) = {nu:.4g}"]))
    return paths


def run_simulate_z(cfg, out, seed, workers, beta=None, method="volterra"):
    kernel, model = _model(cfg)
    beta = model.beta0 if beta is None else beta
    rho = cfg.disorder["rho"][0]
    T = cfg.disorder["T"][0]
    n = cfg.disorder["samples"]
    step = cfg.model["step"]
    n_mc = cfg.experiment["mc_samples"]
    z_ann = annealed_partition(model, beta, T, step)
    sampler = RenewalBridgeSampler(model, beta, T) if method in ("mc", "both") else None

    def task(i):
        rng = stream(seed, _TAGS["simulate-z"], i)
        env = sample_env(kernel, rho, T, rng)
        rows = []
        if method in ("volterra", "both"):
            sol = volterra_quenched(kernel, model, env, beta, T, step)
            for kind, value in (("constrained", sol.zeta[-1]), ("free", sol.free_value),
                                ("normalized", sol.zeta[-1] / z_ann)):
                rows.append((i, "volterra", kind, value, math.log(value), sol.error_estimate))
        if method in ("mc", "both"):
            res = mc_normalized(kernel, model, env, beta, T, n_mc, rng, sampler)
            rows.append((i, "mc", res.kind, res.value, res.log_value, res.stderr))
        return rows

    rows = [r for part in map_tasks(task, n, workers) for r in part]
    path = write_csv(out / "simulate_z.csv", ["sample_id", "method", "kind", "value", "log_value", "stderr"], rows,
                     cfg.hash)
    return [path, _summary(out, "simulate_z", [f"quenched partition functions: gamma={kernel.gamma} rho={rho} "
                                               f"beta={beta:.8g} T={T} samples={n} method={method}"])]


def _event_spec(cfg, model, kernel, rho, regime):
    ex = cfg.experiment
    if regime == "sub_two_thirds":
        beta = an.beta_sub_two_thirds(model, rho, ex["c1"], ex["C0"])
    elif regime == "marginal":
        beta = an.beta_marginal(kernel, model, rho, ex["c1"], ex["C0"])
    else:
        beta = model.beta0 * (cfg.model["beta_rel"][0] if cfg.model["beta_rel"] else 1.2)
    T = 1.0 / free_energy(model, beta) if regime != "large_rho" else cfg.disorder["T"][0]
    params = dict(R=ex["R"], epsilon=ex["epsilon"], eta=ex["eta"], beta=beta,
                  delta=ex["delta"] if ex["delta"] > 0 else ex["epsilon"] ** 5)
    return an.EventSpec(regime, params, T), beta


def _probe_rows(cfg, out, seed, workers, regimes, tag, name):
    kernel, model = _model(cfg)
    ex = cfg.experiment
    reports, lines = [], []
    for k, rho in enumerate(cfg.disorder["rho"]):
        for m, regime in enumerate(regimes):
            spec, beta = _event_spec(cfg, model, kernel, rho, regime)
            rep = an.epsilon_good_probe(spec, model, kernel, rho, ex["n_outer"], ex["n_inner"],
                                        stream(seed, tag, k, m))
            p_a = rep.get("P(A)")["value"]
            theta = ex["theta"] if ex["theta"] > 0 else (1.0 + model.alpha) ** -0.5
            eta, mass = an.holder_mass(p_a, theta)
            rep.add("beta", beta, 0.0, 0, regime=regime, rho=rho, T=spec.T)
            rep.add("eta", eta, 0.0, 0, regime=regime, rho=rho, T=spec.T)
            rep.add("holder block mass", mass, 0.0, 0, regime=regime, rho=rho, T=spec.T)
            reports.append(rep)
            lines += rep.summary
    merged = StatReport(name)
    for rep in reports:
        merged.rows += rep.rows
    return kernel, model, merged, lines


def run_events(cfg, out, seed, workers):
    kernel, model, report, lines = _probe_rows(cfg, out, seed, workers, [cfg.experiment["regime"]],
                                               _TAGS["events"], "events")
    paths = [write_report(out / "events.csv", report, cfg.hash)]
    return paths + [_summary(out, "events", ["epsilon-good probes: P(A), Q[P_tau(A^c)], Q(B^c)", *lines])]


def run_relevance(cfg, out, seed, workers):
    regime = cfg.experiment["regime"]
    regimes = [regime] if regime in ("sub_two_thirds", "marginal") else ["sub_two_thirds"]
    kernel, model, report, lines = _probe_rows(cfg, out, seed, workers, regimes, _TAGS["relevance"], "relevance")
    c = an.weight_factorization_constant(kernel)
    report.add("sup K(r/2)/K(r)", c, 0.0, 0, regime="all", rho=math.nan, T=math.nan)
    for rho in cfg.disorder["rho"]:
        for rg in regimes:
            if rg in ("sub_two_thirds", "marginal"):
                shift = an.expectation_shift_report(model, kernel, rho, rg, [1.0, 1.5, 2.0])
                for row in shift.rows:
                    report.add(f"{row['statistic']} (block {row['block']:g})", row["value"], 0.0, 0, regime=rg,
                               rho=rho, T=math.nan)
    paths = [write_report(out / "relevance.csv", report, cfg.hash)]
    lines = [f"disorder relevance: beta placement, events and mean shifts; sup K(r/2)/K(r) = {c:.6g}", *lines]
    return paths + [_summary(out, "relevance", lines)]


def run_irrelevance(cfg, out, seed, workers):
    kernel, model = _model(cfg)
    reps = cfg.disorder["samples"]
    betas = _beta_grid(cfg, model.beta0, [1.2])
    report = StatReport("irrelevance")
    lines = ["irrelevance gap (1/T) log E[1^W] and criticality decay of median W at beta0"]
    for k, rho in enumerate(cfg.disorder["rho"]):
        gap = an.irrelevance_gap(model, kernel, rho, betas, None, reps, stream(seed, _TAGS["irrelevance"], k),
                                 cfg.model["step"], workers)
        crit = an.criticality_experiment(model, kernel, rho, cfg.disorder["T"], reps,
                                         stream(seed, _TAGS["criticality"], k), step=cfg.model["step"],
                                         workers=workers)
        for rep in (gap, crit):
            for row in rep.rows:
                row = dict(row)
                row.setdefault("beta", model.beta0)
                row["experiment"] = rep.name
                report.rows.append(row)
            lines += rep.summary
    paths = [write_report(out / "irrelevance.csv", report, cfg.hash)]
    return paths + [_summary(out, "irrelevance", lines)]


def run_criticality(cfg, out, seed, workers):
    kernel, model = _model(cfg)
    report = StatReport("criticality")
    lines = ["criticality decay: slope of log median W_{beta0,T} against log T"]
    for k, rho in enumerate(cfg.disorder["rho"]):
        rep = an.criticality_experiment(model, kernel, rho, cfg.disorder["T"], cfg.disorder["samples"],
                                        stream(seed, _TAGS["criticality"], k), step=cfg.model["step"],
                                        workers=workers)
        report.rows += rep.rows
        lines += rep.summary
    return [write_report(out / "criticality.csv", report, cfg.hash), _summary(out, "criticality", lines)]


def run_fracmoment(cfg, out, seed, workers):
    kernel, model = _model(cfg)
    ex = cfg.experiment
    report = StatReport("fracmoment")
    lines = ["fractional moments E[Z^theta] over n correlation lengths"]
    for k, rho in enumerate(cfg.disorder["rho"]):
        beta = (model.beta0 * cfg.model["beta_rel"][0] if cfg.model["beta_rel"]
                else an.beta_sub_two_thirds(model, rho, ex["c1"], ex["C0"]))
        theta = ex["theta"] if ex["theta"] > 0 else (1.0 + model.alpha) ** -0.5
        res = an.fractional_moment(model, kernel, rho, beta, theta, ex["n_blocks"], ex["mc_budget"],
                                   stream(seed, _TAGS["fracmoment"], k), cfg.model["step"],
                                   ex["max_seconds"] or None, workers=workers)
        for n, v, e, a in zip(res.n, res.values, res.stderr, res.annealed):
            report.add("E[Z^theta]", v, e, res.n_env, rho=rho, beta=beta, theta=theta, n_blocks=int(n))
            report.add("annealed Z", a, 0.0, 0, rho=rho, beta=beta, theta=theta, n_blocks=int(n))
        report.add("max/min", res.spread, 0.0, res.n_env, rho=rho, beta=beta, theta=theta, n_blocks=ex["n_blocks"])
        report.add("complete", float(res.complete), 0.0, res.n_env, rho=rho, beta=beta, theta=theta,
                   n_blocks=ex["n_blocks"])
        lines.append(f"rho={rho}: block T={res.block_T:.4g}, max/min={res.spread:.4g}, environments={res.n_env}"
                     + ("" if res.complete else " (budget exhausted, partial)"))
    return [write_report(out / "fracmoment.csv", report, cfg.hash), _summary(out, "fracmoment", lines)]


EXPERIMENTS = {
    "kernel-report": run_kernel_report,
    "homogeneous": run_homogeneous,
    "simulate-z": run_simulate_z,
    "events": run_events,
    "relevance": run_relevance,
    "irrelevance": run_irrelevance,
    "criticality": run_criticality,
    "fracmoment": run_fracmoment,
}


def run(cfg: ExperimentConfig, out, seed: int | None = None, workers: int | None = None, **extra) -> RunManifest:
    """Dispatch on ``experiment.name``, write outputs and the manifest."""
    name = cfg.experiment["name"]
    if name not in EXPERIMENTS:
        raise ConfigError(f"{cfg.source}: [experiment] name: unknown experiment {name!r}")
    seed = cfg.disorder["seed"] if seed is None else int(seed)
    workers = cfg.experiment["workers"] if workers is None else int(workers)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest(cfg.hash, seed, workers, __version__, time.time())
    paths = EXPERIMENTS[name](cfg, out, seed, workers, **extra)
    manifest.outputs = sorted(str(Path(p).name) for p in paths)
    manifest.finished = time.time()
    manifest.write(out)
    return manifest


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rwpm", description="Random walk pinning model experiments")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in (*EXPERIMENTS, "claims"):
        p = sub.add_parser(name)
        if name == "claims":
            continue
        p.add_argument("--config", type=Path)
        p.add_argument("--seed", type=int)
        p.add_argument("--workers", type=int)
        p.add_argument("--out", type=Path, default=Path("out"))
        if name == "simulate-z":
            p.add_argument("--gamma", type=float)
            p.add_argument("--rho", type=float)
            p.add_argument("--beta", type=float, help="absolute beta; default beta0")
            p.add_argument("--T", type=float)
            p.add_argument("--step", type=float)
            p.add_argument("--samples", type=int)
            p.add_argument("--method", choices=("volterra", "mc", "both"), default="volterra")
    return parser


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    if args.command == "claims":
        sys.stdout.write(list_claims())
        return 0
    try:
        if args.config is not None:
            cfg = load_config(args.config).with_overrides("experiment", name=args.command)
        else:
            gamma = getattr(args, "gamma", None)
            cfg = default_config(args.command, 0.75 if gamma is None else gamma)
        extra = {}
        if args.command == "simulate-z":
            if args.gamma is not None:
                cfg = cfg.with_overrides("kernel", gamma=args.gamma)
            for key, value in (("rho", args.rho), ("T", args.T)):
                if value is not None:
                    cfg = cfg.with_overrides("disorder", **{key: [value]})
            if args.samples is not None:
                cfg = cfg.with_overrides("disorder", samples=args.samples)
            if args.step is not None:
                cfg = cfg.with_overrides("model", step=args.step)
            extra = dict(beta=args.beta, method=args.method)
        manifest = run(cfg, args.out, args.seed, args.workers, **extra)
    except ConfigError as exc:
        sys.stderr.write(f"config error: {exc}\n")
        return 2
    except (ValueError, ArithmeticError, RuntimeError) as exc:
        sys.stderr.write(f"{args.command} failed: {type(exc).__name__}: {exc}\n")
        return 1
    sys.stdout.write(f"wrote {', '.join(manifest.outputs)} to {args.out}\n")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
