"""Command-line entry point: toy method-comparison runs, network fits across
the oracle / marginalized / synthetic-likelihood arms, synthetic-network
generation, and a diagnostics report over a finished output bundle.

Every command is a pure function of (flags, seed, input files): draw files are
written with full-precision repr formatting and replays are byte-identical.
Timing lives only in the manifest, which is the one non-reproducible output.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import subprocess
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .bsl import CrnStore
from .errors import (
    AllDivergent,
    MissingBundle,
    SchemaError,
    SynlikError,
)
from .hmc import ChainDraws, HmcConfig, ess, rhat, run_chains
from .mathcore import RngStream
from .models.nmr import NetworkModel, StudyKind, crn_for_network
from .models.toy import ToyModel, ToyVariant, conjugate_posterior, simulate_toy_data
from .netdata import (
    MaskMode,
    SimConfig,
    example_sim_config,
    load_network,
    mask_study,
    save_network,
    simulate_network,
)
from .psis import KHAT_RELIABLE, psis_smooth, reweighted_estimate, weighted_quantile

CRI = (0.025, 0.975)
_Z975 = 1.959964


# ---------------------------------------------------------------------------
# small shared helpers

def _git_describe() -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            capture_output=True, text=True, timeout=5,
        )
        return out.stdout.strip() or "unknown"
    except Exception:
        return "unknown"


def _write_draws_csv(path: Path, names, draws, generated=None):
    import csv as _csv

    cols = [np.asarray(draws[:, i]) for i in range(draws.shape[1])]
    header = list(names)
    if generated:
        for key in sorted(generated):
            header.append(key)
            cols.append(np.asarray(generated[key]))
    with open(path, "w", newline="") as fh:
        _csv.writer(fh).writerow(header)  # quotes names holding commas
        for row in zip(*cols):
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


def _chain_summaries(chains: list[ChainDraws]) -> list[dict]:
    return [
        {
            "chain": i,
            "stepsize": c.stepsize,
            "accept_rate": float(c.accept_stats.mean()),
            "warmup_accept_mean": c.warmup_accept_mean,
            "divergences": int(c.divergence_flags.sum()),
        }
        for i, c in enumerate(chains)
    ]


def _write_manifest(out_dir: Path, command: str, flags: dict, seed: int,
                    wall_time: float, chain_info) -> None:
    manifest = {
        "command": command,
        "flags": {k: v for k, v in flags.items() if not callable(v)},
        "seed": seed,
        "version": __version__,
        "git_describe": _git_describe(),
        "wall_time_s": wall_time,
        "chains": chain_info,
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def _pooled(chains):
    return np.vstack([c.draws for c in chains])


def _pooled_generated(chains, key):
    return np.concatenate([c.generated[key] for c in chains])


# ---------------------------------------------------------------------------
# run-simple: the toy five-method comparison

TOY_METHODS = ("oracle", "simple", "bsl-individual", "bsl-continuous", "bsl-psis")


@dataclass
class SimpleOptions:
    n: int = 120
    m: int = 10
    c: float = 2.0
    sigma: float = 1.0
    mu_true: float = 1.0
    B: int = 25
    b_disc: int = 1000
    variants: tuple = TOY_METHODS
    iters: int = 2000
    chains: int = 4
    seed: int = 0
    threads: int = 1


def run_simple_experiment(opts: SimpleOptions) -> dict:
    """Simulate toy data, fit the requested variants, PSIS-correct the
    continuous variant, and assemble the method-comparison table."""
    if opts.m >= opts.n:
        raise SchemaError(f"m={opts.m} must be below n={opts.n}")
    unknown = [v for v in opts.variants if v not in TOY_METHODS]
    if unknown:
        raise SchemaError(f"unknown variants: {unknown}; choose from {TOY_METHODS}")
    data = simulate_toy_data(opts.n, opts.m, opts.c, opts.sigma, opts.mu_true,
                             RngStream(opts.seed, 11))
    crn = CrnStore.draw(opts.B, opts.n - opts.m, 1, seed=opts.seed + 10_000_019)
    warmup = max(1, opts.iters // 2)
    sampling = max(1, opts.iters - warmup)

    need_cont = "bsl-continuous" in opts.variants or "bsl-psis" in opts.variants
    fits = {}
    for variant in (ToyVariant.ORACLE, ToyVariant.SIMPLE, ToyVariant.BSL_INDIVIDUAL,
                    ToyVariant.BSL_CONTINUOUS):
        wanted = variant.value in opts.variants or (
            variant is ToyVariant.BSL_CONTINUOUS and need_cont)
        if not wanted:
            continue
        model = ToyModel(variant, data, crn, b_disc=opts.b_disc)
        cfg = HmcConfig(n_chains=opts.chains, n_warmup=warmup, n_sampling=sampling,
                        seed=opts.seed, max_leapfrog_steps=32)
        t0 = time.perf_counter()
        chains = run_chains(model, cfg, threads=opts.threads)
        fits[variant.value] = {"chains": chains, "time_s": time.perf_counter() - t0}

    oracle_mean_exact, oracle_sd_exact = conjugate_posterior(
        data.y_full, data.sigma, data.prior_mean, data.prior_sd)
    analytic_width = 2.0 * _Z975 * oracle_sd_exact
    if "oracle" in fits:
        od = _pooled(fits["oracle"]["chains"])[:, 0]
        oracle_width = float(np.quantile(od, CRI[1]) - np.quantile(od, CRI[0]))
    else:
        oracle_width = analytic_width

    psis_result = None
    if "bsl-psis" in opts.variants:
        chains = fits["bsl-continuous"]["chains"]
        lw = _pooled_generated(chains, "l_disc") - _pooled_generated(chains, "l_cont")
        psis_result = psis_smooth(lw)

    rows = []
    for method in opts.variants:
        base = method if method != "bsl-psis" else "bsl-continuous"
        fit = fits[base]
        chains = fit["chains"]
        draws = _pooled(chains)[:, 0]
        if method == "bsl-psis":
            mean, _ = reweighted_estimate(_pooled(chains), psis_result, lambda d: d[:, 0])
            var, _ = reweighted_estimate(_pooled(chains), psis_result,
                                         lambda d: (d[:, 0] - mean) ** 2)
            sd = math.sqrt(max(var, 0.0))
            lo, hi = weighted_quantile(draws, psis_result.log_weights_smoothed, CRI)
            k_hat = psis_result.k_hat
        else:
            mean, sd = float(draws.mean()), float(draws.std(ddof=1))
            lo, hi = (float(np.quantile(draws, q)) for q in CRI)
            k_hat = None
        rows.append({
            "method": method,
            "mean": mean,
            "sd": sd,
            "cri_low": float(lo),
            "cri_high": float(hi),
            "cri_ratio": (hi - lo) / oracle_width,
            "time_s": fit["time_s"],
            "rhat": rhat(chains, 0),
            "k_hat": k_hat,
        })
    return {
        "data": data,
        "fits": fits,
        "table": rows,
        "psis": psis_result,
        "oracle_exact": {"mean": oracle_mean_exact, "sd": oracle_sd_exact},
    }


def cmd_run_simple(args) -> int:
    opts = SimpleOptions(
        n=args.n, m=args.m, c=args.c, sigma=args.sigma, mu_true=args.mu_true,
        B=args.B, b_disc=args.b_disc,
        variants=tuple(args.variants.split(",")),
        iters=args.iters, chains=args.chains, seed=args.seed, threads=args.threads,
    )
    t0 = time.perf_counter()
    result = run_simple_experiment(opts)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    with open(out / "table.csv", "w") as fh:
        fh.write("method,mean,sd,cri_low,cri_high,cri_ratio,time_s,rhat,k_hat\n")
        for r in result["table"]:
            k = "" if r["k_hat"] is None else repr(float(r["k_hat"]))
            fh.write(f"{r['method']},{r['mean']!r},{r['sd']!r},{r['cri_low']!r},"
                     f"{r['cri_high']!r},{r['cri_ratio']!r},{r['time_s']:.3f},{r['rhat']!r},{k}\n")

    chain_info = []
    diagnostics = {"methods": {}}
    for name, fit in result["fits"].items():
        chains = fit["chains"]
        gen = chains[0].generated and {
            key: _pooled_generated(chains, key) for key in chains[0].generated
        }
        _write_draws_csv(out / f"draws_{name}.csv", ["mu"], _pooled(chains), gen)
        diagnostics["methods"][name] = {
            "rhat": {"mu": rhat(chains, 0)},
            "ess": {"mu": ess(chains, 0)},
            "divergences": int(sum(c.divergence_flags.sum() for c in chains)),
        }
        for info in _chain_summaries(chains):
            chain_info.append({"method": name, **info})
    if result["psis"] is not None:
        diagnostics["psis"] = {
            "k_hat": result["psis"].k_hat,
            "weight_n_eff": result["psis"].n_eff,
            "tail_size": result["psis"].tail_size,
            "no_tail": result["psis"].no_tail,
        }
    (out / "diagnostics.json").write_text(json.dumps(diagnostics, indent=2, sort_keys=True))
    _write_manifest(out, "run-simple", vars(args) | {"out": str(out)}, args.seed,
                    time.perf_counter() - t0, chain_info)

    for r in result["table"]:
        k = "--" if r["k_hat"] is None else f"{r['k_hat']:.3f}"
        print(f"{r['method']:>16}  mean {r['mean']:+.3f}  sd {r['sd']:.3f}  "
              f"95% CrI ({r['cri_low']:+.3f}, {r['cri_high']:+.3f})  "
              f"ratio {r['cri_ratio']:.2f}  R-hat {r['rhat']:.3f}  k-hat {k}")
    return 0


# ---------------------------------------------------------------------------
# run-nmr: oracle / marginalized / synthetic-likelihood arms

NMR_PSIS_METHOD = "bsl_psis"


@dataclass
class NmrOptions:
    B: int = 500
    b_disc: int = 5001
    K: int | None = None
    iters: int = 2000
    chains: int = 4
    seed: int = 0
    threads: int = 1
    max_leapfrog: int = 32


def _fit_arm(network, opts: NmrOptions, arm: str) -> dict:
    needs_crn = any(s.kind is StudyKind.PARTIAL_IPD_SUBGROUPS for s in network.studies)
    crn = crn_for_network(network, opts.B, seed=opts.seed + 10_000_019) if needs_crn else None
    model = NetworkModel(network, crn=crn, b_disc=opts.b_disc)
    warmup = max(1, opts.iters // 2)
    cfg = HmcConfig(n_chains=opts.chains, n_warmup=warmup,
                    n_sampling=max(1, opts.iters - warmup), seed=opts.seed,
                    max_leapfrog_steps=opts.max_leapfrog)
    t0 = time.perf_counter()
    chains = run_chains(model, cfg, threads=opts.threads)
    elapsed = time.perf_counter() - t0
    out = {"model": model, "chains": chains, "time_s": elapsed, "arm": arm}
    if needs_crn:
        lw = _pooled_generated(chains, "l_disc") - _pooled_generated(chains, "l_cont")
        out["psis"] = psis_smooth(lw)
    return out


def run_nmr_experiment(network, masking: dict | None, opts: NmrOptions) -> dict:
    """Fit the analysis arms and return per-arm chains plus PSIS results.

    With a masking plan the three paper arms run: the network as given
    (oracle), covariates dropped (ml-nmr), and covariates dropped but subgroup
    summaries kept (bsl). Without one, the network is fitted as-is.
    """
    arms = {}
    if masking:
        study_id = masking["study"]
        K = opts.K or network.default_K
        arms["oracle"] = network
        arms["mlnmr"] = mask_study(network, study_id, MaskMode.DROP_COVARIATES, K=K)
        arms["bsl"] = mask_study(network, study_id, MaskMode.DROP_COVARIATES_KEEP_SUBGROUPS, K=K)
    else:
        has_bsl = any(s.kind is StudyKind.PARTIAL_IPD_SUBGROUPS for s in network.studies)
        arms["bsl" if has_bsl else "mlnmr"] = network
    return {arm: _fit_arm(net, opts, arm) for arm, net in arms.items()}


def _arm_summaries(fit) -> list[dict]:
    model, chains = fit["model"], fit["chains"]
    names = model.param_names()
    draws = _pooled(chains)
    rows = []
    for i, name in enumerate(names):
        rows.append({
            "method": fit["arm"], "parameter": name,
            "mean": float(draws[:, i].mean()), "sd": float(draws[:, i].std(ddof=1)),
            "q025": float(np.quantile(draws[:, i], CRI[0])),
            "q975": float(np.quantile(draws[:, i], CRI[1])),
            "rhat": rhat(chains, i), "ess": ess(chains, i),
        })
    if "psis" in fit:
        res = fit["psis"]
        for i, name in enumerate(names):
            mean, _ = reweighted_estimate(draws, res, lambda d, i=i: d[:, i])
            var, _ = reweighted_estimate(draws, res, lambda d, i=i: (d[:, i] - mean) ** 2)
            lo, hi = weighted_quantile(draws[:, i], res.log_weights_smoothed, CRI)
            rows.append({
                "method": NMR_PSIS_METHOD, "parameter": name,
                "mean": mean, "sd": math.sqrt(max(var, 0.0)),
                "q025": float(lo), "q975": float(hi),
                "rhat": None, "ess": None,
            })
    return rows


def cmd_run_nmr(args) -> int:
    t0 = time.perf_counter()
    if bool(args.network) == bool(args.sim_config):
        raise SchemaError("provide exactly one of --network or --sim-config")
    masking = None
    if args.network:
        network = load_network(args.network)
    else:
        sim = SimConfig.from_dict(json.loads(Path(args.sim_config).read_text()))
        if args.seed_override is not None:
            sim.seed = args.seed_override
        network, _ = simulate_network(sim)
        masking = sim.masking
    if args.mask:
        masking = {"study": args.mask, "mode": args.mask_mode}
    if masking:
        network.study(masking["study"])  # validate early

    opts = NmrOptions(B=args.B, b_disc=args.b_disc, K=args.K, iters=args.iters,
                      chains=args.chains, seed=args.seed, threads=args.threads,
                      max_leapfrog=args.max_leapfrog)
    fits = run_nmr_experiment(network, masking, opts)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    all_rows = []
    chain_info = []
    diagnostics = {"arms": {}}
    for arm, fit in fits.items():
        names = fit["model"].param_names()
        gen = fit["chains"][0].generated and {
            key: _pooled_generated(fit["chains"], key) for key in fit["chains"][0].generated
        }
        _write_draws_csv(out / f"draws_{arm}.csv", names, _pooled(fit["chains"]), gen)
        rows = _arm_summaries(fit)
        all_rows.extend(rows)
        diag = {
            "rhat": {r["parameter"]: r["rhat"] for r in rows if r["method"] == arm},
            "ess": {r["parameter"]: r["ess"] for r in rows if r["method"] == arm},
            "divergences": int(sum(c.divergence_flags.sum() for c in fit["chains"])),
            "n_draws": int(sum(c.draws.shape[0] for c in fit["chains"])),
            "time_s": fit["time_s"],
        }
        if "psis" in fit:
            diag["k_hat"] = fit["psis"].k_hat
            diag["weight_n_eff"] = fit["psis"].n_eff
            diag["no_tail"] = fit["psis"].no_tail
            diag["B"] = opts.B
            diag["B_disc"] = opts.b_disc
        diagnostics["arms"][arm] = diag
        for info in _chain_summaries(fit["chains"]):
            chain_info.append({"arm": arm, **info})

    with open(out / "summaries.csv", "w") as fh:
        fh.write("method,parameter,mean,sd,q025,q975,rhat,ess\n")
        for r in all_rows:
            rh = "" if r["rhat"] is None else repr(float(r["rhat"]))
            es = "" if r["ess"] is None else repr(float(r["ess"]))
            fh.write(f"{r['method']},{r['parameter']},{r['mean']!r},{r['sd']!r},"
                     f"{r['q025']!r},{r['q975']!r},{rh},{es}\n")
    forest = [
        {"parameter": r["parameter"], "method": r["method"], "mean": r["mean"],
         "lower": r["q025"], "upper": r["q975"]}
        for r in all_rows
    ]
    (out / "forest.json").write_text(json.dumps(forest, indent=2, sort_keys=True))
    (out / "diagnostics.json").write_text(json.dumps(diagnostics, indent=2, sort_keys=True))
    flags = {k: v for k, v in vars(args).items() if k != "func"}
    _write_manifest(out, "run-nmr", flags, args.seed, time.perf_counter() - t0, chain_info)

    for arm, fit in fits.items():
        tail = ""
        if "psis" in fit:
            tail = f"  k-hat {fit['psis'].k_hat:.3f}  weight n_eff {fit['psis'].n_eff:.1f}"
        print(f"arm {arm}: {len(fit['chains'])} chains, "
              f"{sum(int(c.divergence_flags.sum()) for c in fit['chains'])} divergences, "
              f"{fit['time_s']:.1f}s{tail}")
    return 0


# ---------------------------------------------------------------------------
# simulate

def cmd_simulate(args) -> int:
    if args.example_config:
        cfg = example_sim_config()
        Path(args.example_config).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
        print(f"wrote example simulation config to {args.example_config}")
        return 0
    if not args.config:
        raise SchemaError("provide --config (or --example-config to generate a template)")
    sim = SimConfig.from_dict(json.loads(Path(args.config).read_text()))
    if args.seed is not None:
        sim.seed = args.seed
    network, theta = simulate_network(sim)
    if args.apply_masking and sim.masking:
        network = mask_study(network, sim.masking["study"], MaskMode(sim.masking["mode"]), K=sim.K)
    out = Path(args.out)
    save_network(network, out)
    truth = {
        "config": sim.to_dict(),
        "true_theta": {
            "mu": theta.mu_study.tolist(), "gamma": theta.gamma.tolist(),
            "beta1": theta.beta1.tolist(), "beta2": theta.beta2.tolist(),
        },
    }
    (out / "truth.json").write_text(json.dumps(truth, indent=2, sort_keys=True))
    print(f"simulated {len(network.studies)} studies into {out}")
    return 0


# ---------------------------------------------------------------------------
# diagnose

def _khat_band(k_hat, no_tail) -> tuple[str, str]:
    if no_tail or (isinstance(k_hat, float) and math.isnan(k_hat)):
        return "PASS", "uniform weights, no Pareto tail to fit"
    if k_hat < 0.5:
        return "PASS", "reliable importance sampling"
    if k_hat < KHAT_RELIABLE:
        return "WARN", "usable, but consider a larger B or more MCMC iterations"
    return "FAIL", "importance sampling unreliable; increase B or improve the relaxation"


def cmd_diagnose(args) -> int:
    out = Path(args.out)
    path = out / "diagnostics.json"
    if not path.exists():
        raise MissingBundle(f"no diagnostics.json under {out}")
    diag = json.loads(path.read_text())
    sections = diag.get("arms") or diag.get("methods") or {}
    for name, d in sections.items():
        rhats = [v for v in d.get("rhat", {}).values() if v is not None]
        esss = [v for v in d.get("ess", {}).values() if v is not None and not math.isnan(v)]
        worst = max(rhats) if rhats else float("nan")
        mixing = "PASS" if rhats and worst < 1.01 else "WARN"
        parts = [f"max R-hat {worst:.4f} ({mixing})"]
        if esss:
            parts.append(f"min ESS {min(esss):.0f}")
        parts.append(f"divergences {d.get('divergences', 0)}")
        print(f"[{name}] " + "; ".join(parts))
        for pname, v in sorted(d.get("rhat", {}).items()):
            if v is not None and v >= 1.01:
                print(f"    R-hat {v:.4f} for {pname}")
        if "k_hat" in d:
            band, msg = _khat_band(d["k_hat"], d.get("no_tail", False))
            k = "NoTail" if d.get("no_tail") else f"{d['k_hat']:.3f}"
            print(f"    Pareto k-hat {k} [{band}]: {msg}")
            if "weight_n_eff" in d:
                print(f"    importance-weight n_eff {d['weight_n_eff']:.1f}")
    psis = diag.get("psis")
    if psis:
        band, msg = _khat_band(psis["k_hat"], psis.get("no_tail", False))
        k = "NoTail" if psis.get("no_tail") else f"{psis['k_hat']:.3f}"
        print(f"[psis] k-hat {k} [{band}]: {msg}; weight n_eff {psis['weight_n_eff']:.1f}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise SystemExit(1)  # usage errors exit 1


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="synlik", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run-simple", help="toy five-method comparison (Table-2 style)")
    p.add_argument("--n", type=int, default=120)
    p.add_argument("--m", type=int, default=10)
    p.add_argument("--c", type=float, default=2.0)
    p.add_argument("--sigma", type=float, default=1.0)
    p.add_argument("--mu-true", type=float, default=1.0)
    p.add_argument("--B", type=int, default=25, help="synthetic replicates in the sampler")
    p.add_argument("--b-disc", type=int, default=1000, help="discrete replicates for PSIS")
    p.add_argument("--variants", default=",".join(TOY_METHODS))
    p.add_argument("--iters", type=int, default=2000, help="total iterations per chain (half warmup)")
    p.add_argument("--chains", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_run_simple)

    p = sub.add_parser("run-nmr", help="network fit with oracle/ml-nmr/bsl arms")
    p.add_argument("--network", help="directory with network.json")
    p.add_argument("--sim-config", help="simulation config JSON (simulates, then fits)")
    p.add_argument("--mask", help="study id to mask (overrides the config masking plan)")
    p.add_argument("--mask-mode", default=MaskMode.DROP_COVARIATES_KEEP_SUBGROUPS.value,
                   choices=[m.value for m in MaskMode])
    p.add_argument("--B", type=int, default=500)
    p.add_argument("--b-disc", type=int, default=5001)
    p.add_argument("--K", type=int, default=None, help="integration points for masked grids")
    p.add_argument("--iters", type=int, default=2000)
    p.add_argument("--chains", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--seed-override", type=int, default=None,
                   help="replace the simulation config seed")
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--max-leapfrog", type=int, default=32)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_run_nmr)

    p = sub.add_parser("simulate", help="generate a synthetic network with known truth")
    p.add_argument("--config", help="simulation config JSON")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--apply-masking", action="store_true",
                   help="apply the config masking plan before saving")
    p.add_argument("--example-config", help="write a template config here and exit")
    p.add_argument("--out", default="network_out")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("diagnose", help="human-readable report over an output bundle")
    p.add_argument("--out", required=True, help="output directory of a previous run")
    p.set_defaults(func=cmd_diagnose)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        env_seed = os.environ.get("SYNLIK_SEED")
        if env_seed is not None and hasattr(args, "seed"):
            args.seed = int(env_seed)
        return args.func(args)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 1
    except AllDivergent as exc:
        print(f"sampler failure: {exc}", file=sys.stderr)
        print("hint: raise B, raise --iters, or lower the step-size target", file=sys.stderr)
        return 3
    except (SynlikError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
