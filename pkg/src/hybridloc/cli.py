"""Command-line front end: scenario files in, deterministic reports out.

Every subcommand reads an optional YAML scenario, applies the common
overrides, runs the corresponding harness campaign, and writes a table as
CSV or JSON.  Outputs carry a provenance header (configuration hash, seed,
library versions) and contain nothing time- or machine-dependent beyond
that, so identical invocations produce byte-identical files.

Exit codes: 0 on success, 2 for configuration/parse problems, 3 for
dimension mismatches, 4 for numerical failures.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import platform
import sys

import numpy as np
import yaml

from . import __version__
from . import ensemble as ens_mod
from . import nn as nn_mod
from .crlb import (
    crlb_ue,
    crlb_ue_position,
    position_trace,
    velocity_trace,
    verify_identities,
)
from .errors import (
    EXIT_OK,
    EXIT_PARSE,
    DimensionMismatchError,
    HybridlocError,
    ScenarioError,
)
from .harness import (
    compute_metrics,
    run_scatterer_campaign,
    run_sr_campaign,
    run_wls_campaign,
)
from .noise import build_q
from .scenario import Scenario, load_scenario, scenario_to_dict
from .ue_wls import wls_solve

_MIN_VELOCITY_RECEIVERS = 4


# ---------------------------------------------------------------------------
# output plumbing


def _fmt(value):
    if value is None:
        return ""
    if isinstance(value, float):
        if not np.isfinite(value):
            return ""
        return format(value, ".10g")
    return str(value)


def _provenance(command: str, sc: Scenario, overrides: dict) -> dict:
    config = {
        "command": command,
        "scenario": scenario_to_dict(sc),
        "overrides": overrides,
    }
    digest = hashlib.sha256(
        json.dumps(config, sort_keys=True).encode("utf-8")
    ).hexdigest()
    return {
        "config_sha256": digest,
        "seed": sc.seed,
        "hybridloc_version": __version__,
        "numpy_version": np.__version__,
        "python_version": platform.python_version(),
    }


def _render(columns, rows, provenance, fmt: str) -> str:
    if fmt == "json":
        payload = {
            "provenance": provenance,
            "columns": list(columns),
            "rows": [
                {c: (None if _fmt(r.get(c)) == "" else r.get(c)) for c in columns}
                for r in rows
            ],
        }
        return json.dumps(payload, sort_keys=True, indent=1) + "\n"
    buf = io.StringIO()
    for key in sorted(provenance):
        buf.write(f"# {key}={provenance[key]}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([_fmt(row.get(c)) for c in columns])
    return buf.getvalue()


def _emit(text: str, out_path) -> None:
    if out_path is None:
        sys.stdout.write(text)
        return
    try:
        with open(out_path, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    except OSError as exc:
        raise ScenarioError(f"cannot write output file {out_path}: {exc}") from exc


# ---------------------------------------------------------------------------
# scenario / override handling


def _load(args) -> Scenario:
    sc = load_scenario(args.scenario) if args.scenario else Scenario()
    changes = {}
    if getattr(args, "seed", None) is not None:
        changes["seed"] = args.seed
    if getattr(args, "trials", None) is not None:
        changes["trials"] = args.trials
    return sc.replace(**changes) if changes else sc


def _overrides(args, keys) -> dict:
    return {k: getattr(args, k) for k in keys if getattr(args, k, None) is not None}


# ---------------------------------------------------------------------------
# subcommands


def cmd_simulate(args) -> int:
    sc = _load(args)
    rhos = args.rho or [1.0]
    rows = []
    trial_rows = []
    for rho in rhos:
        sc_r = sc.replace(noise=sc.noise.scaled(rho))
        if args.per_trial:
            ue, trials = run_wls_campaign(sc_r, collect_trials=True)
            for t in trials:
                trial_rows.append({"rho": rho, **t})
        else:
            ue = run_wls_campaign(sc_r)
        scat = run_scatterer_campaign(sc_r)
        rows.append(
            {
                "rho": rho,
                "trials": sc_r.trials,
                "rmse_position": ue.rmse_position,
                "rmse_velocity": ue.rmse_velocity,
                "mae_position": ue.mae_position,
                "mae_velocity": ue.mae_velocity,
                "crlb_rms_position": np.sqrt(ue.crlb_trace_position),
                "crlb_rms_velocity": None
                if ue.crlb_trace_velocity is None
                else np.sqrt(ue.crlb_trace_velocity),
                "failure_rate": ue.failure_rate,
                "scat_rmse_position": scat.rmse_position,
                "scat_rmse_velocity": scat.rmse_velocity,
                "scat_crlb_rms_position": np.sqrt(scat.crlb_trace_position),
                "scat_crlb_rms_velocity": np.sqrt(scat.crlb_trace_velocity),
                "scat_failure_rate": scat.failure_rate,
            }
        )
    columns = list(rows[0].keys())
    prov = _provenance("simulate", sc, _overrides(args, ("seed", "trials", "rho")))
    _emit(_render(columns, rows, prov, args.format), args.out)
    if args.per_trial:
        trial_columns = ["rho", "trial", "status", "error_position",
                         "error_velocity", "detail"]
        _emit(
            _render(trial_columns, trial_rows, prov, args.format),
            args.per_trial,
        )
    return EXIT_OK


def cmd_crlb(args) -> int:
    sc = _load(args)
    rhos = args.rho or [0.1, 1.0, 10.0]
    nas = args.na or [sc.n_a]
    rows = []
    for na in nas:
        sc_n = sc.replace(n_a=na)
        for rho in rhos:
            noise = sc.noise.scaled(rho)
            q = build_q(na, noise)
            velocity_ok = na >= _MIN_VELOCITY_RECEIVERS
            if velocity_ok:
                cov = crlb_ue(sc.ue_true, sc_n.selected_rrhs(), q)
                pos, vel = position_trace(cov), velocity_trace(cov)
            else:
                pos = float(np.trace(
                    crlb_ue_position(sc.ue_true, sc_n.selected_rrhs(), q)
                ))
                vel = None
            rows.append(
                {
                    "na": na,
                    "rho": rho,
                    "crlb_trace_position": pos,
                    "crlb_trace_velocity": vel,
                    "crlb_rms_position": np.sqrt(pos),
                    "crlb_rms_velocity": None if vel is None else np.sqrt(vel),
                    "velocity_observable": velocity_ok,
                }
            )
    prov = _provenance("crlb", sc, _overrides(args, ("seed", "rho", "na")))
    if args.check_identities:
        report = verify_identities(sc.ue_true, sc.selected_rrhs())
        prov["identity_max_deviation"] = format(report.max_deviation, ".6e")
    columns = list(rows[0].keys())
    _emit(_render(columns, rows, prov, args.format), args.out)
    return EXIT_OK


def cmd_select_sr(args) -> int:
    sc = _load(args)
    nas = args.na or [sc.n_a]
    rows = []
    for na in nas:
        rep = run_sr_campaign(sc.replace(n_a=na))
        rows.append(
            {
                "na": na,
                "p_d": sc.p_d,
                "clock_bias_m": sc.clock_bias_m,
                "trials": sc.trials,
                "success_rate": rep.success_rate,
            }
        )
    prov = _provenance("select-sr", sc, _overrides(args, ("seed", "trials", "na")))
    columns = list(rows[0].keys())
    _emit(_render(columns, rows, prov, args.format), args.out)
    return EXIT_OK


def cmd_gen_dataset(args) -> int:
    sc = _load(args)
    rng = np.random.default_rng(sc.seed)
    if args.target == "scatterer":
        ds = nn_mod.make_scatterer_dataset(sc, args.samples, rng)
    else:
        ds = nn_mod.make_dataset(sc, args.samples, rng)
    nn_mod.save_dataset(ds, args.out)
    return EXIT_OK


def _mlp_config(args, train_set, blackbox: bool) -> nn_mod.MlpConfig:
    dim = train_set.m.shape[1]
    fields = {"layer_widths": (dim, 32, 32, dim)}
    if args.config:
        try:
            with open(args.config, "r", encoding="utf-8") as fh:
                data = yaml.safe_load(fh) or {}
        except OSError as exc:
            raise ScenarioError(f"cannot read config file {args.config}: {exc}") from exc
        except yaml.YAMLError as exc:
            raise ScenarioError(f"cannot parse config file {args.config}: {exc}") from exc
        if not isinstance(data, dict):
            raise ScenarioError("mlp config file must contain a mapping")
        if "layer_widths" in data:
            data["layer_widths"] = tuple(int(w) for w in data["layer_widths"])
        # YAML 1.1 reads exponents without a sign ("1e160") as strings;
        # coerce the numeric fields so such configs still parse.
        for key, cast in (("lr", float), ("beta1", float), ("beta2", float),
                          ("eps_adam", float), ("epochs", int),
                          ("batch_size", int), ("seed", int)):
            if key in data:
                try:
                    data[key] = cast(data[key])
                except (TypeError, ValueError) as exc:
                    raise ScenarioError(
                        f"mlp config field {key!r} must be a number: {data[key]!r}"
                    ) from exc
        fields.update(data)
    if getattr(args, "seed", None) is not None:
        fields["seed"] = args.seed
    try:
        cfg = nn_mod.MlpConfig(**fields)
    except TypeError as exc:
        raise ScenarioError(f"bad mlp config: {exc}") from exc
    if blackbox:
        # train_blackbox swaps in the state-width linear head itself.
        return cfg
    if cfg.layer_widths[-1] != dim:
        raise DimensionMismatchError(
            f"output width {cfg.layer_widths[-1]} does not match dataset "
            f"dimension {dim}"
        )
    return cfg


def cmd_train(args) -> int:
    tr = nn_mod.load_dataset(args.train)
    va = nn_mod.load_dataset(args.val)
    blackbox = args.pipeline == "blackbox"
    cfg = _mlp_config(args, tr, blackbox)
    if blackbox:
        net = nn_mod.train_blackbox(cfg, tr, va)
    else:
        net = nn_mod.train(cfg, tr, va)
    nn_mod.save_model(net, args.out)
    return EXIT_OK


def _single_estimator(pipeline, net, sc, eps):
    rrhs = sc.selected_rrhs()
    if pipeline == "wls":
        q = build_q(sc.n_a, sc.noise)
        return lambda m: wls_solve(m, rrhs, q, iters=sc.wls_iters).x
    if pipeline == "blackbox":
        return lambda m: nn_mod.blackbox_estimate(net, m)
    if pipeline == "nn_ls":
        return lambda m: nn_mod.nn_ls_estimate(net, m, rrhs)
    return lambda m: nn_mod.nn_wls_estimate(net, m, rrhs, eps)


def _evaluate(estimator, test_set):
    estimates, truths = [], []
    failures = 0
    for m, x in zip(test_set.m, test_set.x):
        try:
            estimates.append(estimator(m))
            truths.append(x)
        except HybridlocError:
            failures += 1
    if not estimates:
        raise ScenarioError("every test sample failed; nothing to report")
    report = compute_metrics(np.array(estimates), np.array(truths))
    report.failure_rate = failures / len(test_set.m)
    report.trials = len(test_set.m)
    return report


def _metric_row(label, report) -> dict:
    return {
        "pipeline": label,
        "samples": report.trials,
        "mae_position": report.mae_position,
        "mae_velocity": report.mae_velocity,
        "rmse_position": report.rmse_position,
        "rmse_velocity": report.rmse_velocity,
        "failure_rate": report.failure_rate,
    }


def cmd_eval(args) -> int:
    sc = _load(args)
    te = nn_mod.load_dataset(args.data)
    net = None
    if args.pipeline != "wls":
        if not args.model:
            raise ScenarioError(f"pipeline {args.pipeline!r} requires --model")
        net = nn_mod.load_model(args.model)
        if net.config.layer_widths[0] != te.m.shape[1]:
            raise DimensionMismatchError(
                f"model expects {net.config.layer_widths[0]}-dimensional input "
                f"but the dataset has dimension {te.m.shape[1]}"
            )
    report = _evaluate(_single_estimator(args.pipeline, net, sc, args.eps), te)
    rows = [_metric_row(args.pipeline, report)]
    prov = _provenance("eval", sc, _overrides(args, ("seed", "pipeline")))
    _emit(_render(list(rows[0].keys()), rows, prov, args.format), args.out)
    return EXIT_OK


def cmd_ensemble_eval(args) -> int:
    sc = _load(args)
    tr = nn_mod.load_dataset(args.train)
    va = nn_mod.load_dataset(args.val)
    te = nn_mod.load_dataset(args.data)
    base = _mlp_config(args, tr, blackbox=False)
    ens_cfg = ens_mod.EnsembleConfig(p=args.members, r_a=args.r_a)
    nets = ens_mod.train_ensemble(base, ens_cfg, tr, va)
    rrhs = sc.selected_rrhs()
    eps = args.eps
    estimators = {
        "nn_wls": lambda m: nn_mod.nn_wls_estimate(nets[0], m, rrhs, eps),
        "enn_a_wls": lambda m: ens_mod.enn_a_wls(nets, m, rrhs, eps, ens_cfg.r_a),
        "enn_m_wls": lambda m: ens_mod.enn_m_wls(nets, m, rrhs, eps),
        "enn_b_wls": lambda m: ens_mod.enn_b_wls(nets, m, rrhs),
    }
    rows = [
        _metric_row(label, _evaluate(fn, te)) for label, fn in estimators.items()
    ]
    prov = _provenance(
        "ensemble-eval", sc, _overrides(args, ("seed", "members", "r_a"))
    )
    _emit(_render(list(rows[0].keys()), rows, prov, args.format), args.out)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hybridloc",
        description="Hybrid TDOA/FDOA/AOA localization experiments",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_default=None):
        p.add_argument("--scenario", help="YAML scenario file (defaults built in)")
        p.add_argument("--out", default=out_default, help="output path (default stdout)")
        p.add_argument("--seed", type=int, help="override the scenario seed")
        p.add_argument(
            "--format", choices=("csv", "json"), default="csv", help="output format"
        )

    p = sub.add_parser("simulate", help="Monte Carlo of the WLS estimators")
    common(p)
    p.add_argument("--trials", type=int, help="override the trial count")
    p.add_argument("--rho", type=float, nargs="+", help="noise scale grid")
    p.add_argument("--per-trial", help="also write a per-trial table to this path")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("crlb", help="lower-bound traces over noise/receiver grids")
    common(p)
    p.add_argument("--rho", type=float, nargs="+", help="noise scale grid")
    p.add_argument("--na", type=int, nargs="+", help="receiver-count grid")
    p.add_argument(
        "--check-identities",
        action="store_true",
        help="verify the closed-form row identities and report the deviation",
    )
    p.set_defaults(func=cmd_crlb)

    p = sub.add_parser("select-sr", help="LOS selection success rate")
    common(p)
    p.add_argument("--trials", type=int, help="override the trial count")
    p.add_argument("--na", type=int, nargs="+", help="receiver-count grid")
    p.set_defaults(func=cmd_select_sr)

    p = sub.add_parser("gen-dataset", help="synthesize a training dataset")
    common(p)
    p.add_argument("--samples", type=int, default=2700, help="sample count")
    p.add_argument(
        "--target",
        choices=("ue", "scatterer"),
        default="ue",
        help="which estimation problem the dataset is for",
    )
    p.set_defaults(func=cmd_gen_dataset)
    p.set_defaults(require_out=True)

    p = sub.add_parser("train", help="train a residual or black-box network")
    common(p)
    p.add_argument("--train", required=True, help="training dataset (.npz)")
    p.add_argument("--val", required=True, help="validation dataset (.npz)")
    p.add_argument(
        "--pipeline",
        choices=("nn_wls", "nn_ls", "blackbox"),
        default="nn_wls",
        help="estimator the network is trained for",
    )
    p.add_argument("--config", help="YAML file of MlpConfig overrides")
    p.set_defaults(func=cmd_train)
    p.set_defaults(require_out=True)

    p = sub.add_parser("eval", help="evaluate an estimator on a dataset")
    common(p)
    p.add_argument("--data", required=True, help="test dataset (.npz)")
    p.add_argument("--model", help="trained model (.npz)")
    p.add_argument(
        "--pipeline",
        choices=("wls", "nn_wls", "nn_ls", "blackbox"),
        default="nn_wls",
    )
    p.add_argument("--eps", type=float, default=0.1, help="weighting ridge")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser(
        "ensemble-eval", help="train an ensemble and compare combination rules"
    )
    common(p)
    p.add_argument("--train", required=True, help="training dataset (.npz)")
    p.add_argument("--val", required=True, help="validation dataset (.npz)")
    p.add_argument("--data", required=True, help="test dataset (.npz)")
    p.add_argument("--members", type=int, default=20, help="ensemble size")
    p.add_argument("--r-a", type=float, default=0.1, help="density kernel radius")
    p.add_argument("--eps", type=float, default=0.1, help="weighting ridge")
    p.add_argument("--config", help="YAML file of MlpConfig overrides")
    p.set_defaults(func=cmd_ensemble_eval)
    p.set_defaults(require_out=True)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "require_out", False) and not args.out:
        parser.error(f"{args.command} requires --out")
    try:
        return args.func(args)
    except HybridlocError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PARSE


if __name__ == "__main__":
    sys.exit(main())
