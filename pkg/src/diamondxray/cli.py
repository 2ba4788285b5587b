"""Command-line orchestration: JSON run configs, dataset and connection
persistence, the verification suite, forward and inversion runs, stability
reports and gauge recovery.

Every command is deterministic given its config and seed; CSV bodies are
byte-identical across re-runs. Exit codes: 0 pass, 2 check failure,
3 usage or config error.
"""

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import bayes, stability, verify
from .algebra import frob
from .connection import (BasisSpec, GaugedConnection, RotationGauge,
                         AxisWeighted, TubeRamp, gauge_act, load_connection,
                         random_connection, save_connection)
from .errors import ConfigError, DiamondXrayError, InconsistentData
from .geometry import (BrokenPath, DiamondConfig, sample_broken_path,
                       to_determined)
from .lightsink import RhoField, lightsink_scattering, recover_gauge
from .transport import TransportOpts, scattering_result, scattering

EXIT_OK = 0
EXIT_CHECK_FAILED = 2
EXIT_CONFIG = 3

GLOBAL_KEYS = {
    "n": int, "epsilon": float, "seed": int, "out_dir": str,
    "ode_steps": int, "fd_step": float, "threads": int,
}

COMMAND_KEYS = {
    "verify": {"pairs": int, "basis_max_index": int, "field_norm": float},
    "forward": {"connection": str, "paths": str, "sample": int,
                "determined": str, "gauge": str, "project_lightsink": bool,
                "basis_max_index": int},
    "synth": {"truth": str, "N": int, "noise_sd": float, "alpha": float,
              "D": int, "N_scale": int, "basis_max_index": int,
              "dataset": str},
    "invert": {"dataset": str, "alpha": float, "D": int, "N_scale": int,
               "iters": int, "burn_in": int, "beta0": float,
               "basis_max_index": int, "truth": str, "label": str},
    "report": {"summaries": list},
    "recover-gauge": {"connection": str, "grid": int, "n_holdout": int,
                      "tube_grid": int, "basis_max_index": int},
    "stability": {"estimate": str, "connection_a": str, "connection_b": str,
                  "n_x": int, "n_y": int, "n_x_per_y": int, "grid": int,
                  "basis_max_index": int, "field_norm": float},
}

DEFAULTS = {
    "n": 3, "epsilon": 0.25, "seed": 0, "out_dir": ".", "ode_steps": 256,
    "fd_step": 1e-4, "threads": 1,
}


def load_config(path, command):
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}")
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    allowed = dict(GLOBAL_KEYS)
    allowed.update(COMMAND_KEYS[command])
    cfg = dict(DEFAULTS)
    for key, val in raw.items():
        if key not in allowed:
            raise ConfigError(f"unknown config key {key!r} for {command}")
        want = allowed[key]
        if want is float and isinstance(val, int) \
                and not isinstance(val, bool):
            val = float(val)
        ok = isinstance(val, want) and (want is bool
                                        or not isinstance(val, bool))
        if not ok:
            raise ConfigError(f"config key {key!r} must be {want.__name__}")
        cfg[key] = val
    cfg["_provided"] = set(raw)
    if not 0.0 < cfg["epsilon"] < 0.5:
        raise ConfigError("epsilon must lie in (0, 1/2)")
    return cfg


def _fmt(x):
    return f"{x:.17g}"


def _write_csv(path, header, rows):
    with open(path, "w") as fh:
        fh.write(header + "\n")
        for row in rows:
            fh.write(row + "\n")


def _pmap(fn, items, threads):
    if threads <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def _geometry(cfg):
    return DiamondConfig(epsilon=cfg["epsilon"])


def _basis(cfg, default_k=2):
    return BasisSpec.build(cfg.get("basis_max_index", default_k))


# ---------------------------------------------------------------------------
# commands

def cmd_verify(cfg):
    geom = _geometry(cfg)
    basis = _basis(cfg)
    rows = verify.run_suite(
        geom, basis, n=cfg["n"], pairs=cfg.get("pairs", 5),
        norm=cfg.get("field_norm", 1.0), seed=cfg["seed"],
        opts=TransportOpts(steps=cfg["ode_steps"]))
    out = os.path.join(cfg["out_dir"], "verify_report.csv")
    _write_csv(out, "name,identity,residual,tolerance,pass",
               [f"{r.name},\"{verify.DESCRIPTIONS[r.name]}\","
                f"{_fmt(r.residual)},{_fmt(r.tolerance)},{int(r.passed)}"
                for r in rows])
    for r in rows:
        status = "pass" if r.passed else "FAIL"
        print(f"[{status}] {r.name}: residual {r.residual:.3e} "
              f"(tolerance {r.tolerance:.0e})")
    return EXIT_OK if all(r.passed for r in rows) else EXIT_CHECK_FAILED


def _load_gauge(path):
    with open(path) as fh:
        doc = json.load(fh)
    gen = np.asarray(doc["generator"], dtype=float)
    prof = doc["profile"]
    if prof["type"] == "axis_weighted":
        profile = AxisWeighted(prof["amplitude"],
                               tuple(prof.get("linear",
                                              (1.0, 0, 0, 0, 0))))
    elif prof["type"] == "tube_ramp":
        profile = TubeRamp(prof["amplitude"], prof["r0"], prof["width"],
                           prof.get("t_slope", 0.0))
    else:
        raise ConfigError(f"unknown gauge profile {prof['type']!r}")
    return RotationGauge(gen, profile)


def _load_paths(path):
    paths = []
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            row = json.loads(line)
            paths.append(BrokenPath(x=np.array(row["x"], dtype=float),
                                    y=np.array(row["y"], dtype=float),
                                    z=np.array(row["z"], dtype=float),
                                    kind=row.get("kind", "free")))
    return paths


def cmd_forward(cfg):
    geom = _geometry(cfg)
    opts = TransportOpts(steps=cfg["ode_steps"])
    try:
        field = load_connection(cfg["connection"])
    except (OSError, KeyError, json.JSONDecodeError, ValueError) as exc:
        raise ConfigError(f"cannot load connection: {exc}")
    if "gauge" in cfg:
        field = GaugedConnection(field, _load_gauge(cfg["gauge"]))
    if "paths" in cfg:
        try:
            paths = _load_paths(cfg["paths"])
        except (OSError, KeyError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot load paths: {exc}")
    else:
        rng = np.random.default_rng(cfg["seed"])
        paths = [sample_broken_path(geom, rng)
                 for _ in range(cfg.get("sample", 16))]
    determined = cfg.get("determined", "none")
    if determined == "future":
        paths = [to_determined(p, "future", geom) for p in paths]
    elif determined == "past":
        paths = [to_determined(p, "past", geom) for p in paths]
    project = cfg.get("project_lightsink", False)

    def row(path):
        if project:
            s = lightsink_scattering(field, path, geom, opts)
            drift = 0.0
        else:
            res = scattering_result(field, path, opts)
            s, drift = res.u, res.drift
        coords = ",".join(_fmt(v) for p in (path.x, path.y, path.z)
                          for v in p)
        entries = ",".join(_fmt(v) for v in s.ravel())
        return f"{coords},{path.kind},{entries},{_fmt(drift)}"

    rows = _pmap(row, paths, cfg["threads"])
    header = ",".join([f"{p}_{c}" for p in ("x", "y", "z")
                       for c in ("t", "x1", "x2", "x3")]
                      + ["kind"]
                      + [f"s_{i}{j}" for i in range(field.n)
                         for j in range(field.n)]
                      + ["drift"])
    out = os.path.join(cfg["out_dir"], "forward.csv")
    _write_csv(out, header, rows)
    print(f"wrote {len(rows)} scattering rows to {out}")
    return EXIT_OK


def cmd_synth(cfg):
    geom = _geometry(cfg)
    basis = _basis(cfg)
    spec = bayes.PriorSpec(alpha=cfg.get("alpha", 6.0),
                           D=cfg.get("D", 36),
                           N_scale=cfg.get("N_scale", cfg.get("N", 100)),
                           n=cfg["n"], seed=cfg["seed"])
    rng = np.random.default_rng(cfg["seed"])
    if "truth" in cfg:
        truth = load_connection(cfg["truth"])
        if truth.kind != "lightsink":
            raise ConfigError("truth must be a light-sink file")
    else:
        truth = bayes.sample_prior(spec, basis, rng)
        save_connection(truth, os.path.join(cfg["out_dir"], "truth.json"))
    data = bayes.synthesize(
        truth, cfg.get("N", 100), geom, rng,
        opts=TransportOpts(steps=cfg["ode_steps"]),
        noise_sd=cfg.get("noise_sd", 1.0),
        seeds={"seed": cfg["seed"]})
    out = os.path.join(cfg["out_dir"], cfg.get("dataset", "dataset.jsonl"))
    bayes.save_dataset(data, out)
    print(f"wrote {len(data)} observations to {out}")
    return EXIT_OK


def cmd_invert(cfg):
    if "dataset" not in cfg:
        raise ConfigError("invert needs a dataset")
    iters = cfg.get("iters", 5000)
    burn_in = cfg.get("burn_in", 1000)
    if iters <= burn_in:
        raise ConfigError("iters must exceed burn_in")
    try:
        data = bayes.load_dataset(cfg["dataset"])
    except (OSError, KeyError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot load dataset: {exc}")
    geom = DiamondConfig(epsilon=data.epsilon)
    basis = _basis(cfg)
    spec = bayes.PriorSpec(alpha=cfg.get("alpha", 6.0), D=cfg.get("D", 36),
                           N_scale=cfg.get("N_scale", max(len(data), 1)),
                           n=data.n, seed=cfg["seed"])
    truth = load_connection(cfg["truth"]) if "truth" in cfg else None
    steps = cfg["ode_steps"] if "ode_steps" in cfg["_provided"] else 64
    summary = bayes.run_inversion(
        data, spec, basis, geom, iters=iters, burn_in=burn_in,
        rng=np.random.default_rng(cfg["seed"]), steps=steps,
        beta0=cfg.get("beta0", 0.25), truth=truth)
    label = cfg.get("label", "run")
    prefix = os.path.join(cfg["out_dir"], f"posterior_{label}")
    doc = {"n_obs": summary.n_obs, "l2_error": summary.l2_error,
           "baseline_error": summary.baseline_error,
           "acceptance_rate": summary.acceptance_rate,
           "beta": summary.beta, "ess": summary.ess,
           "coeff_mean": summary.coeff_mean.tolist(),
           "coeff_var": summary.coeff_var.tolist(),
           "alpha": spec.alpha, "D": spec.D, "seed": cfg["seed"]}
    with open(prefix + ".json", "w") as fh:
        json.dump(doc, fh, indent=1)
    save_connection(summary.mean_field, prefix + "_mean.json")
    _write_csv(prefix + "_trace.csv", "iteration,log_post,accept,l2_error",
               [f"{t['iteration']},{_fmt(t['log_post'])},{t['accept']},"
                + (_fmt(t["l2_error"]) if t["l2_error"] is not None else "")
                for t in summary.trace])
    print(f"posterior mean error "
          f"{summary.l2_error if truth else float('nan'):.6g} "
          f"(acceptance {summary.acceptance_rate:.2f}); wrote {prefix}.json")
    return EXIT_OK


def cmd_report(cfg):
    if "summaries" not in cfg or not cfg["summaries"]:
        raise ConfigError("report needs posterior summary files")
    rows = []
    for path in cfg["summaries"]:
        try:
            with open(path) as fh:
                doc = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read summary {path}: {exc}")
        rows.append((int(doc["n_obs"]), float(doc["l2_error"])))
    rows.sort()
    slope = None
    if len(rows) >= 2 and all(np.isfinite(r[1]) and r[1] > 0 for r in rows):
        logn = np.log([r[0] for r in rows])
        loge = np.log([r[1] for r in rows])
        slope = float(np.polyfit(logn, loge, 1)[0])
    out = os.path.join(cfg["out_dir"], "rate_table.csv")
    _write_csv(out, "N,l2_error",
               [f"{n},{_fmt(e)}" for n, e in rows])
    doc = {"rows": [{"N": n, "l2_error": e} for n, e in rows]}
    if slope is not None:
        doc["loglog_slope"] = slope
    with open(os.path.join(cfg["out_dir"], "rate_summary.json"), "w") as fh:
        json.dump(doc, fh, indent=1)
    print(f"wrote {out}" + (f" (log-log slope {slope:.3f})"
                            if slope is not None else ""))
    return EXIT_OK


def cmd_recover_gauge(cfg):
    geom = _geometry(cfg)
    opts = TransportOpts(steps=cfg["ode_steps"])
    try:
        b_field = load_connection(cfg["connection"])
    except (OSError, KeyError, json.JSONDecodeError, ValueError) as exc:
        raise ConfigError(f"cannot load connection: {exc}")
    rng = np.random.default_rng(cfg["seed"])
    # oracle mode: the light-sink target's data comes from the projection
    # identity applied to the observed connection
    sa = lambda path: lightsink_scattering(b_field, path, geom, opts)
    sb = lambda path: scattering(b_field, path, opts)
    rec = recover_gauge(sa, sb, geom, opts=opts, rng=rng)

    holdout = []
    for _ in range(cfg.get("n_holdout", 32)):
        path = sample_broken_path(geom, rng)
        s_target = sb(path)
        s_gauged = np.linalg.inv(rec.phi.value(path.z)) @ sa(path) \
            @ rec.phi.value(path.x)
        holdout.append(float(frob(s_gauged - s_target)))

    rho = RhoField(b_field, geom, opts)
    tube_err = 0.0
    tg = cfg.get("tube_grid", 3)
    for t in np.linspace(-0.5, 0.5, tg):
        for r in np.linspace(0.2, 0.8, tg) * geom.epsilon:
            q = np.array([t, r, 0.0, 0.0])
            for e in np.eye(4):
                lhs = gauge_act(rho, rec.phi, q, e)
                tube_err = max(tube_err, float(frob(
                    lhs - b_field.value(q, e))))

    grid = cfg.get("grid", 5)
    events, mats = [], []
    for t in np.linspace(-0.8, 0.8, grid):
        for r in np.linspace(0.0, 0.9, grid) * geom.epsilon:
            q = np.array([t * (1 - r), r, 0.0, 0.0])
            events.append(q.tolist())
            mats.append(rec.phi.value(q).tolist())
    out = os.path.join(cfg["out_dir"], "recovered_gauge.json")
    with open(out, "w") as fh:
        json.dump({"events": events, "matrices": mats,
                   "diagnostics": {
                       "stitch_max": rec.stitch_max,
                       "holdout_max": max(holdout) if holdout else 0.0,
                       "tube_agreement_max": tube_err}}, fh, indent=1)
    print(f"recovered gauge: stitch {rec.stitch_max:.3e}, held-out "
          f"{max(holdout):.3e}, tube agreement {tube_err:.3e}; wrote {out}")
    return EXIT_OK


def cmd_stability(cfg):
    geom = _geometry(cfg)
    basis = _basis(cfg)
    opts = TransportOpts(steps=cfg["ode_steps"])
    fd = stability.FDConfig(h=cfg["fd_step"])
    rng = np.random.default_rng(cfg["seed"])
    norm = cfg.get("field_norm", 1.0)
    if "connection_a" in cfg:
        a = load_connection(cfg["connection_a"])
    else:
        a = random_connection(rng, basis, cfg["n"], norm=norm)
    if "connection_b" in cfg:
        b = load_connection(cfg["connection_b"])
    else:
        b = random_connection(rng, basis, cfg["n"], norm=norm)
    kind = cfg.get("estimate", "in")
    rows = []
    if kind == "in":
        rep = stability.estimate_in(a, b, geom, rng,
                                    n_x=cfg.get("n_x", 2048),
                                    n_y=cfg.get("n_y", 2048),
                                    opts=opts, fd=fd, seed=cfg["seed"])
        rows.append(rep.csv_row())
    elif kind == "out":
        pointwise, rep = stability.estimate_out(
            a, b, geom, rng, n_y=cfg.get("n_y", 32),
            n_x_per_y=cfg.get("n_x_per_y", 16), opts=opts, fd=fd,
            seed=cfg["seed"])
        rows.append(rep.csv_row())
        ratios = [p["lhs"] / p["rhs"] for p in pointwise if p["rhs"] > 0]
        fitted = max(ratios) if ratios else 0.0
        print(f"pointwise fitted constant: {fitted:.6g} over "
              f"{len(pointwise)} break points")
    elif kind == "h1":
        rep, extra = stability.h1_estimate(
            a, b, geom, rng,
            sizes={"n_out": cfg.get("n_y", 24),
                   "n_fiber": cfg.get("n_x", 48),
                   "grid": cfg.get("grid", 13)},
            opts=opts, fd=fd, seed=cfg["seed"])
        rows.append(rep.csv_row())
        print(f"forward bound holds: {extra['forward_bound_holds']}")
    elif kind == "psi":
        psi = stability.psi_factor(a, b, geom, grid=cfg.get("grid", 17))
        rows.append(f"psi_factor,{geom.epsilon},{_fmt(psi)},0,0,0,"
                    f"{cfg['seed']}")
    else:
        raise ConfigError(f"unknown estimate kind {kind!r}")
    out = os.path.join(cfg["out_dir"], "stability_report.csv")
    _write_csv(out, "estimate_name,epsilon,lhs,rhs,ratio,n_samples,seed",
               rows)
    print(f"wrote {out}")
    return EXIT_OK


HANDLERS = {
    "verify": cmd_verify,
    "forward": cmd_forward,
    "synth": cmd_synth,
    "invert": cmd_invert,
    "report": cmd_report,
    "recover-gauge": cmd_recover_gauge,
    "stability": cmd_stability,
}


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="diamondxray",
        description="Broken X-ray scattering on the causal diamond: "
                    "verification, forward maps, Bayesian inversion, "
                    "stability reports and gauge recovery.")
    parser.add_argument("command", choices=sorted(HANDLERS))
    parser.add_argument("--config", required=True, help="JSON run config")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--threads", type=int, default=None)
    parser.add_argument("--out", default=None, help="output directory")
    args = parser.parse_args(argv)

    try:
        cfg = load_config(args.config, args.command)
        if args.seed is not None:
            cfg["seed"] = args.seed
        if args.threads is not None:
            cfg["threads"] = args.threads
        if args.out is not None:
            cfg["out_dir"] = args.out
        os.makedirs(cfg["out_dir"], exist_ok=True)
        return HANDLERS[args.command](cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except InconsistentData as exc:
        print(f"check failed: {exc}", file=sys.stderr)
        return EXIT_CHECK_FAILED
    except DiamondXrayError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CHECK_FAILED


if __name__ == "__main__":
    sys.exit(main())
