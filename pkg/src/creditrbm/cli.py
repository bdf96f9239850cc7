"""Command-line front end.

Every command writes its artifacts plus one ``manifest.json`` into the output
directory (``--out``, else ``$CREDITRBM_OUT``, else the working directory).
The manifest records the argument vector, seeds, and SHA-256 hashes of inputs
and outputs; ``creditrbm replay MANIFEST`` reruns it and checks the hashes.

Exit codes: 0 success, 2 usage, 3 data error, 4 numerical failure.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import tempfile
import time
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .errors import CreditRbmError, NumericalError

OUT_ENV = "CREDITRBM_OUT"
MANIFEST = "manifest.json"
EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 2, 3, 4


def sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


class Run:
    """Collects inputs and outputs of one command for the manifest."""

    def __init__(self, out_dir: Path, args):
        self.out = out_dir
        self.args = args
        self.inputs: dict[str, str] = {}
        self.outputs: dict[str, str] = {}
        self.summary: dict = {}

    def input(self, path) -> Path:
        p = Path(path)
        if not p.is_file():
            raise FileNotFoundError(f"input file not found: {p}")
        self.inputs[str(p.resolve())] = sha256(p)
        return p

    def path(self, name: str) -> Path:
        self.outputs[name] = ""
        return self.out / name

    def write_text(self, name: str, text: str) -> None:
        self.path(name).write_text(text)

    def write_json(self, name: str, obj) -> None:
        self.write_text(name, json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")

    def finish(self, argv, started) -> dict:
        for name in self.outputs:
            self.outputs[name] = sha256(self.out / name)
        config = {k: v for k, v in vars(self.args).items() if k not in ("func", "out", "threads")}
        manifest = {
            "tool": "creditrbm",
            "version": __version__,
            "command": self.args.command,
            "argv": list(argv),
            "cwd": os.getcwd(),
            "config": config,
            "seed": getattr(self.args, "seed", None),
            "inputs": self.inputs,
            "outputs": self.outputs,
            "summary": self.summary,
            "wall_clock_seconds": round(time.perf_counter() - started, 3),
        }
        (self.out / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True, default=_json_default) + "\n")
        return manifest


def _json_default(x):
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (np.floating,)):
        return float(x)
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, Path):
        return str(x)
    raise TypeError(f"not JSON serialisable: {type(x).__name__}")


# ---------------------------------------------------------------------------
# Commands


def cmd_gen_one_factor(run: Run, a):
    from .copula import gen_one_factor_panel

    sp = gen_one_factor_panel(a.n, (a.pd_min, a.pd_max), a.rho, a.days, rng=a.seed)
    sp.panel.write_csv(run.path("panel.csv"))
    run.summary = {"mean_pd": float(sp.panel.pd.mean())}


def cmd_gen_sector(run: Run, a):
    from .copula import SectorCopulaSpec, gen_sector_panel

    if a.spec:
        spec = SectorCopulaSpec.from_text(run.input(a.spec).read_text())
    else:
        spec = SectorCopulaSpec.uniform(
            a.sectors, a.size, a.global_loading, a.sector_loading, pd_scale=a.pd_scale
        )
    sp = gen_sector_panel(spec, a.days, rng=a.seed, shuffle=not a.no_shuffle)
    sp.panel.write_csv(run.path("panel.csv"))
    run.write_text("spec.txt", spec.to_text())
    lines = ["obligor,sector,original_index"]
    lines += [f"{o},{int(s)},{int(p)}" for o, s, p in zip(sp.panel.obligor_ids, sp.sectors, sp.permutation)]
    run.write_text("sectors.csv", "\n".join(lines) + "\n")


def cmd_gen_coupled(run: Run, a):
    from .stress import gen_coupled_panel

    cp = gen_coupled_panel(a.n, a.macros, a.days, rng=a.seed, pd_range=(a.pd_min, a.pd_max), coupling=a.coupling)
    cp.panel.write_csv(run.path("panel.csv"))
    cp.macro.write_csv(run.path("macro.csv"))


def cmd_merton(run: Run, a):
    from .data_io import load_merton_inputs, merton_pd

    res = merton_pd(load_merton_inputs(run.input(a.inputs), a.horizon, a.window), kmv=a.kmv, damping=a.damping)
    lines = ["date,pd,asset_value,asset_vol,zero_liability"]
    for row in zip(res.dates, res.pd, res.asset_value, res.asset_vol, res.zero_liability):
        d, p, v, s, z = row
        lines.append(f"{d},{float(p)!r},{float(v)!r},{float(s)!r},{int(bool(z))}")
    run.write_text("merton_pd.csv", "\n".join(lines) + "\n")


def cmd_split(run: Run, a):
    from .data_io import load_panel, split_panel

    train, test = split_panel(load_panel(run.input(a.panel)), a.fraction)
    train.write_csv(run.path("train.csv"))
    test.write_csv(run.path("test.csv"))
    run.summary = {"train_rows": len(train), "test_rows": len(test)}


def _training_data(run: Run, a):
    from .data_io import load_panel

    panel = load_panel(run.input(a.panel))
    if not a.macro:
        return panel.pd, None
    from .stress import assemble_joint, load_macro

    joint = assemble_joint(panel, load_macro(run.input(a.macro)))
    return joint.data, joint


def cmd_train(run: Run, a):
    from .rbm import save_params
    from .training import TrainConfig, train_pcd

    data, joint = _training_data(run, a)
    config = TrainConfig(
        hidden_units=a.hidden,
        gibbs_steps_k=a.k,
        epochs=a.epochs,
        initial_learning_rate=a.lr,
        schedule=a.schedule,
        minibatch_size=min(a.batch, data.shape[0]),
        seed=a.seed,
        weight_init_std=a.init_std,
        visible_bias_init=a.bias_init,
    )
    params, report = train_pcd(data, config)
    save_params(params, run.path("model.rbm"))
    run.write_text("train_config.txt", config.to_text())
    report.write_csv(run.path("train_report.csv"))
    if joint is not None:
        run.write_text("layout.json", joint.layout.to_json() + "\n")
    run.summary = {
        "epochs_run": report.epochs_run,
        "initial_reconstruction_error": report.initial_reconstruction_error,
        "final_reconstruction_error": report.reconstruction_error[-1] if report.reconstruction_error else None,
        "train_seconds": report.wall_clock,
    }


def cmd_eval(run: Run, a):
    from .data_io import load_panel
    from .rbm import load_params
    from .training import generate_pd_samples, median_bandwidth, mmd, reconstruction_error

    params = load_params(run.input(a.model))
    test = load_panel(run.input(a.panel)).pd
    gen = generate_pd_samples(params, a.samples, a.burn_in, a.seed)
    held = test[: a.samples]
    bw = a.bandwidth or median_bandwidth(np.vstack([held, gen[: held.shape[0]]]))
    result = {
        "mmd": mmd(held, gen, bw),
        "bandwidth": bw,
        "reconstruction_error": reconstruction_error(params, test),
        "data_mean_pd": float(test.mean()),
        "model_mean_pd": float(gen.mean()),
    }
    run.write_json("eval.json", result)
    run.summary = result


def _model_and_obligors(run: Run, a):
    from .rbm import load_params

    params = load_params(run.input(a.model))
    obligors = None
    if getattr(a, "layout", None):
        from .stress import JointLayout

        obligors = JointLayout.from_json(run.input(a.layout).read_text()).obligor_indices
    return params, obligors


def cmd_mc_tail(run: Run, a):
    from .tail import default_thresholds, mc_tail, rbm_loss_sampler

    params, obligors = _model_and_obligors(run, a)
    n = params.n_visible if obligors is None else len(obligors)
    sampler = rbm_loss_sampler(params, a.burn_in, recoveries=a.recoveries, relative=True, obligors=obligors)
    curve = mc_tail(sampler, default_thresholds(n), a.samples, rng=a.seed, metadata={"seed": a.seed})
    curve.write_csv(run.path("tail.csv"))


def cmd_tilt_find(run: Run, a):
    from .importance import find_tstar

    params, obligors = _model_and_obligors(run, a)
    n = params.n_visible if obligors is None else len(obligors)
    sol = find_tstar(
        params, a.target * n, a.tolerance * n, a.budget, a.seed, a.burn_in, a.t_max, obligors, a.exact
    )
    result = {"tstar": sol.t, "mean_relative_loss": sol.mean_loss / n, "evaluations": sol.evaluations}
    run.write_json("tilt.json", result)
    run.summary = result


def cmd_ais(run: Run, a):
    from .importance import ais_ratio, naive_ratio

    params, obligors = _model_and_obligors(run, a)
    if a.naive:
        est = naive_ratio(params, a.tstar, a.runs, a.seed, a.burn_in, obligors)
    else:
        est = ais_ratio(params, a.tstar, a.temperatures, a.runs, a.seed, a.burn_in, obligors)
    result = {
        "tstar": a.tstar,
        "log_ratio": est.log_ratio,
        "relative_stderr": est.relative_stderr,
        "std_dev": est.std_dev,
        "temperatures": est.temperatures,
        "runs": est.runs,
        "method": "naive" if a.naive else "ais",
    }
    run.write_json("ratio.json", result)
    run.summary = result


def cmd_is_tail(run: Run, a):
    from .importance import RatioEstimate, is_tail
    from .tail import default_thresholds

    params, obligors = _model_and_obligors(run, a)
    r = json.loads(run.input(a.ratio).read_text())
    ratio = RatioEstimate(r["log_ratio"], r["std_dev"], r["temperatures"], r["runs"], r["relative_stderr"])
    tstar = a.tstar if a.tstar is not None else r["tstar"]
    n = params.n_visible if obligors is None else len(obligors)
    curve = is_tail(
        params, tstar, ratio, default_thresholds(n), a.samples, a.seed, a.burn_in, relative=True, units=obligors
    )
    curve.write_csv(run.path("tail.csv"))


def cmd_var(run: Run, a):
    from .errors import InsufficientTailDepthError
    from .tail import TailCurve, var_from_tail, write_var_table

    curve = TailCurve.read_csv(run.input(a.tail))
    out, deepest = [], None
    for alpha in a.alpha:
        try:
            out.append(var_from_tail(curve, alpha))
        except InsufficientTailDepthError as exc:
            if a.strict:
                raise
            deepest = exc.deepest_level
    write_var_table(out, run.path("var.csv"))
    if deepest is not None:
        run.summary = {"skipped_deep_alphas": True, "deepest_level": deepest}


def cmd_fit_copula(run: Run, a):
    from .copula import fit_gaussian_copula, fit_t_copula
    from .data_io import load_panel

    panel = load_panel(run.input(a.panel))
    lines = ["obligor,loading"]
    if a.t_copula:
        fit = fit_t_copula(panel, a.nu_grid)
        loadings = fit.loadings
        run.summary = {"nu": fit.nu, "profile": {str(k): v for k, v in dict(fit.profile).items()}}
    else:
        loadings = fit_gaussian_copula(panel)
    lines += [f"{o},{float(x)!r}" for o, x in zip(panel.obligor_ids, loadings)]
    run.write_text("loadings.csv", "\n".join(lines) + "\n")


def cmd_sectors(run: Run, a):
    from .rbm import load_params
    from .sectors import recovery_score, sweep_epsilon

    params = load_params(run.input(a.model))
    grid = np.geomspace(a.eps_min, a.eps_max, a.eps_points)
    res = sweep_epsilon(params, grid)
    ids = None
    truth = None
    if a.truth:
        rows = [r.split(",") for r in run.input(a.truth).read_text().splitlines()[1:] if r]
        ids = [r[0] for r in rows]
        truth = [int(r[1]) for r in rows]
    res.write_csv(run.path("sweep.csv"))
    res.graph.write_edgelist(run.path("edges.txt"), ids)
    res.partition.write_csv(run.path("partition.csv"), ids)
    summary = {
        "selected_epsilon": res.selected,
        "communities": res.partition.count,
        "singletons": len(res.partition.singletons()),
        "modularity": res.partition.modularity,
        "interior_minimum": res.has_interior_minimum(),
    }
    if truth is not None:
        summary["adjusted_rand_index"] = recovery_score(res.partition, truth)
    run.write_json("sectors.json", summary)
    run.summary = summary


def cmd_stress(run: Run, a):
    from .rbm import load_params
    from .stress import JointLayout, load_scenario, loss_histogram, stressed_losses, stressed_var
    from .tail import default_thresholds, tail_from_losses, write_var_table

    params = load_params(run.input(a.model))
    layout = JointLayout.from_json(run.input(a.layout).read_text())
    summary = {}
    for i, path in enumerate(a.scenario):
        scenario = load_scenario(run.input(path), layout)
        seed = a.seed + i
        losses = stressed_losses(params, scenario, layout, a.burn_in, a.samples, seed)
        meta = {"scenario": scenario.name, "clipped": list(scenario.clipped)}
        curve = tail_from_losses(losses, default_thresholds(layout.n_obligors), "mc", meta)
        curve.write_csv(run.path(f"tail_{scenario.name}.csv"))
        counts = loss_histogram(np.rint(losses * layout.n_obligors), layout.n_obligors)
        run.write_text(
            f"hist_{scenario.name}.csv",
            "defaults,count\n" + "".join(f"{k},{int(c)}\n" for k, c in enumerate(counts)),
        )
        var = stressed_var(
            params, scenario, layout, a.alpha, a.burn_in, a.samples, seed, deep=not a.no_is,
            ais_temperatures=a.temperatures, ais_runs=a.runs,
        )
        write_var_table(var, run.path(f"var_{scenario.name}.csv"))
        summary[scenario.name] = {"mean_loss": float(losses.mean()), "clipped": list(scenario.clipped)}
    run.summary = summary


# ---------------------------------------------------------------------------
# Parser


def _positive_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be a positive integer")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="creditrbm", description="Portfolio credit risk with binary RBMs.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def command(name, func, stochastic, help_text):
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("--out", help=f"output directory (default ${OUT_ENV} or .)")
        sp.add_argument("--threads", type=_positive_int, default=1, help="cap on BLAS worker threads")
        if stochastic:
            sp.add_argument("--seed", type=int, required=True)
        sp.set_defaults(func=func)
        return sp

    sp = command("gen-one-factor", cmd_gen_one_factor, True, "one-factor Gaussian copula PD panel")
    sp.add_argument("--n", type=_positive_int, required=True)
    sp.add_argument("--pd-min", type=float, default=0.02)
    sp.add_argument("--pd-max", type=float, default=0.10)
    sp.add_argument("--rho", type=float, required=True)
    sp.add_argument("--days", type=_positive_int, required=True)

    sp = command("gen-sector", cmd_gen_sector, True, "multi-sector copula PD panel")
    sp.add_argument("--spec", help="sector spec file; default uniform sectors")
    sp.add_argument("--sectors", type=_positive_int, default=5)
    sp.add_argument("--size", type=_positive_int, default=20)
    sp.add_argument("--global-loading", type=float, default=0.4)
    sp.add_argument("--sector-loading", type=float, default=0.7)
    sp.add_argument("--pd-scale", type=float, default=0.5, help="factor-to-PD sensitivity (uniform spec only)")
    sp.add_argument("--days", type=_positive_int, required=True)
    sp.add_argument("--no-shuffle", action="store_true")

    sp = command("gen-coupled", cmd_gen_coupled, True, "joint PD + macro panel driven by one factor")
    sp.add_argument("--n", type=_positive_int, required=True)
    sp.add_argument("--macros", type=_positive_int, default=8)
    sp.add_argument("--days", type=_positive_int, required=True)
    sp.add_argument("--pd-min", type=float, default=0.02)
    sp.add_argument("--pd-max", type=float, default=0.10)
    sp.add_argument("--coupling", type=float, default=1.0)

    sp = command("merton", cmd_merton, False, "Merton-model PDs from market inputs")
    sp.add_argument("--inputs", required=True)
    sp.add_argument("--horizon", type=float, default=1.0)
    sp.add_argument("--window", type=_positive_int, default=252)
    sp.add_argument("--kmv", action="store_true", help="strike = LCTQ + 0.5 LLTQ")
    sp.add_argument("--damping", type=float, default=1.0)

    sp = command("split", cmd_split, False, "chronological train/test split")
    sp.add_argument("--panel", required=True)
    sp.add_argument("--fraction", type=float, default=0.8)

    sp = command("train", cmd_train, True, "PCD training")
    sp.add_argument("--panel", required=True)
    sp.add_argument("--macro", help="macro CSV; trains a joint model and writes layout.json")
    sp.add_argument("--hidden", type=_positive_int, default=250)
    sp.add_argument("--k", type=_positive_int, default=100)
    sp.add_argument("--epochs", type=int, default=5000)
    sp.add_argument("--lr", type=float, default=2e-3)
    sp.add_argument("--schedule", choices=("linear", "constant"), default="linear")
    sp.add_argument("--batch", type=_positive_int, default=250)
    sp.add_argument("--init-std", type=float, default=0.01)
    sp.add_argument("--bias-init", choices=("zero", "logit-mean"), default="zero")

    sp = command("eval", cmd_eval, True, "MMD and reconstruction error on held-out data")
    sp.add_argument("--model", required=True)
    sp.add_argument("--panel", required=True)
    sp.add_argument("--samples", type=_positive_int, default=1000)
    sp.add_argument("--burn-in", type=_positive_int, default=1000)
    sp.add_argument("--bandwidth", type=float)

    def model_args(sp, samples=10_000):
        sp.add_argument("--model", required=True)
        sp.add_argument("--layout", help="joint-model layout; restricts losses to obligor units")
        sp.add_argument("--burn-in", type=_positive_int, default=1000)
        if samples:
            sp.add_argument("--samples", type=_positive_int, default=samples)

    sp = command("mc-tail", cmd_mc_tail, True, "plain Monte Carlo tail curve")
    model_args(sp)
    sp.add_argument("--recoveries", action="store_true", help="Beta(1/2, 1/2) recovery rates")

    sp = command("tilt-find", cmd_tilt_find, True, "tilt whose mean relative loss hits a target")
    model_args(sp, samples=0)
    sp.add_argument("--target", type=float, required=True, help="target mean relative loss")
    sp.add_argument("--tolerance", type=float, default=0.002, help="in relative-loss units")
    sp.add_argument("--budget", type=_positive_int, default=2000)
    sp.add_argument("--t-max", type=float, default=10.0)
    sp.add_argument("--exact", action="store_true")

    sp = command("ais", cmd_ais, True, "partition-function ratio for a tilt")
    model_args(sp, samples=0)
    sp.add_argument("--tstar", type=float, required=True)
    sp.add_argument("--temperatures", type=_positive_int, default=20_000)
    sp.add_argument("--runs", type=_positive_int, default=100)
    sp.add_argument("--naive", action="store_true")

    sp = command("is-tail", cmd_is_tail, True, "importance-sampled tail curve")
    model_args(sp)
    sp.add_argument("--ratio", required=True, help="ratio.json from the ais command")
    sp.add_argument("--tstar", type=float, help="defaults to the tilt recorded in --ratio")

    sp = command("var", cmd_var, False, "VaR by inverting a tail curve")
    sp.add_argument("--tail", required=True)
    sp.add_argument("--alpha", type=float, nargs="+", required=True)
    sp.add_argument("--strict", action="store_true", help="fail on alphas beyond the curve's depth")

    sp = command("fit-copula", cmd_fit_copula, False, "one-factor copula MLE")
    sp.add_argument("--panel", required=True)
    sp.add_argument("--t-copula", action="store_true")
    sp.add_argument("--nu-grid", type=float, nargs="+", default=[4, 10, 50, 200])

    sp = command("sectors", cmd_sectors, False, "receptive-field sector sweep")
    sp.add_argument("--model", required=True)
    sp.add_argument("--eps-min", type=float, default=0.01)
    sp.add_argument("--eps-max", type=float, default=0.5)
    sp.add_argument("--eps-points", type=_positive_int, default=50)
    sp.add_argument("--truth", help="sectors.csv from gen-sector, for the recovery score")

    sp = command("stress", cmd_stress, True, "scenario-conditional tails and VaR")
    sp.add_argument("--model", required=True)
    sp.add_argument("--layout", required=True)
    sp.add_argument("--scenario", nargs="+", required=True)
    sp.add_argument("--alpha", type=float, nargs="+", default=[0.9, 0.95, 0.99])
    sp.add_argument("--samples", type=_positive_int, default=10_000)
    sp.add_argument("--burn-in", type=_positive_int, default=1000)
    sp.add_argument("--temperatures", type=_positive_int, default=2000)
    sp.add_argument("--runs", type=_positive_int, default=100)
    sp.add_argument("--no-is", action="store_true", help="no importance sampling for deep alphas")

    sp = sub.add_parser("replay", help="rerun a manifest and compare artifact hashes")
    sp.add_argument("manifest")
    sp.add_argument("--out", help="directory for the rerun (default: a temporary directory)")
    sp.set_defaults(func=None)
    return p


def _error(kind: str, exc: BaseException, code: int) -> int:
    payload = {"error": kind, "type": type(exc).__name__, "message": str(exc), "exit_code": code}
    line = getattr(exc, "line", None)
    if line is not None:
        payload["line"] = line
    deepest = getattr(exc, "deepest_level", None)
    if deepest is not None:
        payload["deepest_level"] = deepest
    print(json.dumps(payload), file=sys.stderr)
    return code


def _replay(a) -> int:
    manifest = json.loads(Path(a.manifest).read_text())
    argv = list(manifest["argv"])
    if "--out" in argv:
        i = argv.index("--out")
        del argv[i:i + 2]
    here = os.getcwd()
    with tempfile.TemporaryDirectory() as tmp:
        out = Path(a.out).resolve() if a.out else Path(tmp)
        os.chdir(manifest.get("cwd", here))  # relative input paths resolve as in the original run
        try:
            code = main(argv + ["--out", str(out)])
        finally:
            os.chdir(here)
        if code != 0:
            return code
        fresh = json.loads((out / MANIFEST).read_text())["outputs"]
    mismatched = sorted(k for k in manifest["outputs"] if fresh.get(k) != manifest["outputs"][k])
    print(json.dumps({"replayed": manifest["command"], "artifacts": len(fresh), "mismatched": mismatched}))
    return 0 if not mismatched and set(fresh) == set(manifest["outputs"]) else EXIT_NUMERICAL


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        a = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if a.command == "replay":
        try:
            return _replay(a)
        except (OSError, KeyError, json.JSONDecodeError) as exc:
            return _error("data", exc, EXIT_DATA)
    out = Path(a.out or os.environ.get(OUT_ENV) or ".")
    started = time.perf_counter()
    try:
        out.mkdir(parents=True, exist_ok=True)
        run = Run(out, a)
        with threadpool_limits(limits=a.threads):
            a.func(run, a)
        run.finish(argv, started)
    except NumericalError as exc:
        return _error("numerical", exc, EXIT_NUMERICAL)
    except (CreditRbmError, OSError) as exc:
        return _error("data", exc, EXIT_DATA)
    except ValueError as exc:
        return _error("usage", exc, EXIT_USAGE)
    return 0


if __name__ == "__main__":
    sys.exit(main())
