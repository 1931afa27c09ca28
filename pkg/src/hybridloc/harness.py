"""Seeded Monte Carlo campaigns and metric aggregation.

Every trial draws its randomness from ``default_rng([scenario.seed, trial])``
so results are reproducible and independent of execution order or worker
count.  Campaigns tolerate per-trial solver failures: failed trials are
excluded from the error statistics and surface as a failure rate instead.

Set the ``HYBRIDLOC_WORKERS`` environment variable to run Monte Carlo
trials in a process pool; aggregation always happens in trial order.
"""

from __future__ import annotations

import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .crlb import (
    crlb_scatterer,
    crlb_ue,
    crlb_ue_position,
    position_trace,
    velocity_trace,
)
from .errors import DimensionMismatchError, HybridlocError, ScenarioError
from .geometry import scatterer_measurement, ue_measurement
from .noise import (
    build_q,
    build_qs,
    draw_dominant_bias,
    draw_dominant_bias_scatterer,
    sample_gaussian,
    sample_structured,
    sample_structured_scatterer,
)
from .scatterer_wls import scatterer_wls_solve
from .scenario import Scenario
from .selection import select_los, simulate_paths
from .ue_wls import wls_solve

WORKER_ENV = "HYBRIDLOC_WORKERS"

# Stream tags keep the campaign-level draws (e.g. the dataset's dominant
# bias) out of the per-trial streams.
_DOMINANT_STREAM = 0xD0


def worker_count() -> int:
    raw = os.environ.get(WORKER_ENV, "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ScenarioError(f"{WORKER_ENV} must be an integer, got {raw!r}")


@dataclass
class MetricReport:
    """Aggregate metrics of one campaign; inapplicable fields stay None."""

    rmse_position: float | None = None
    rmse_velocity: float | None = None
    mae_position: float | None = None
    mae_velocity: float | None = None
    crlb_trace_position: float | None = None
    crlb_trace_velocity: float | None = None
    success_rate: float | None = None
    bias_per_component: np.ndarray | None = None
    std_per_component: np.ndarray | None = None
    runtime: float = 0.0
    failure_rate: float = 0.0
    trials: int = 0

    def to_dict(self) -> dict:
        out = {}
        for key, value in self.__dict__.items():
            if isinstance(value, np.ndarray):
                out[key] = [float(v) for v in value]
            else:
                out[key] = value
        return out

    @property
    def rmse_over_crlb_position(self) -> float | None:
        if self.rmse_position is None or not self.crlb_trace_position:
            return None
        return self.rmse_position / np.sqrt(self.crlb_trace_position)

    @property
    def rmse_over_crlb_velocity(self) -> float | None:
        if self.rmse_velocity is None or not self.crlb_trace_velocity:
            return None
        return self.rmse_velocity / np.sqrt(self.crlb_trace_velocity)


def compute_metrics(estimates, truths, crlb=None, position_dim: int = 3) -> MetricReport:
    """RMSE/MAE/bias over paired estimates and truths.

    RMSE is the root of the mean squared error NORM, MAE the mean error
    norm, both split into position (first ``position_dim`` components) and
    velocity (the rest).  ``crlb`` is an optional state-space covariance
    matrix whose position/velocity traces are copied into the report.
    """
    estimates = np.atleast_2d(np.asarray(estimates, dtype=float))
    truths = np.atleast_2d(np.asarray(truths, dtype=float))
    if estimates.size == 0 or truths.size == 0:
        raise DimensionMismatchError("metrics need at least one estimate")
    if estimates.shape != truths.shape:
        raise DimensionMismatchError(
            f"estimates {estimates.shape} and truths {truths.shape} differ"
        )
    err = estimates - truths
    pos = err[:, :position_dim]
    vel = err[:, position_dim:]
    report = MetricReport(
        rmse_position=float(np.sqrt(np.mean(np.sum(pos**2, axis=1)))),
        mae_position=float(np.mean(np.linalg.norm(pos, axis=1))),
        bias_per_component=err.mean(axis=0),
        std_per_component=err.std(axis=0),
        trials=estimates.shape[0],
    )
    if vel.shape[1] and not np.any(np.isnan(vel)):
        report.rmse_velocity = float(np.sqrt(np.mean(np.sum(vel**2, axis=1))))
        report.mae_velocity = float(np.mean(np.linalg.norm(vel, axis=1)))
    if crlb is not None:
        crlb = np.asarray(crlb, dtype=float)
        report.crlb_trace_position = float(np.trace(crlb[:position_dim, :position_dim]))
        if crlb.shape[0] > position_dim:
            report.crlb_trace_velocity = float(
                np.trace(crlb[position_dim:, position_dim:])
            )
    return report


def _map_trials(fn, args_list):
    workers = worker_count()
    if workers <= 1 or len(args_list) < 2 * workers:
        return [fn(a) for a in args_list]
    chunk = max(1, len(args_list) // (workers * 8))
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, args_list, chunksize=chunk))


def _ue_noise_draw(m_true, sc: Scenario, dominant, rng):
    if sc.noise.mode == "structured":
        return sample_structured(m_true, sc.noise, dominant, rng)
    return sample_gaussian(m_true, build_q(sc.n_a, sc.noise), rng)


def _wls_trial(args):
    sc, trial, dominant = args
    rng = np.random.default_rng([sc.seed, trial])
    rrhs = sc.selected_rrhs()
    m_true = ue_measurement(sc.ue_true, rrhs)
    m = _ue_noise_draw(m_true, sc, dominant, rng)
    try:
        result = wls_solve(m, rrhs, build_q(sc.n_a, sc.noise), iters=sc.wls_iters)
    except HybridlocError as exc:
        return ("fail", str(exc))
    return ("ok", result.x, result.velocity_valid)


def run_wls_campaign(sc: Scenario, collect_trials: bool = False):
    """Monte Carlo of the iterated WLS estimator at the true user state."""
    start = time.perf_counter()
    dominant = None
    if sc.noise.mode == "structured":
        dominant = draw_dominant_bias(
            sc.n_a, sc.noise, np.random.default_rng([sc.seed, _DOMINANT_STREAM])
        )
    outcomes = _map_trials(_wls_trial, [(sc, t, dominant) for t in range(sc.trials)])

    estimates, rows = [], []
    velocity_ok = True
    failures = 0
    for t, outcome in enumerate(outcomes):
        if outcome[0] == "fail":
            failures += 1
            if collect_trials:
                rows.append({"trial": t, "status": "fail", "detail": outcome[1]})
            continue
        estimates.append(outcome[1])
        velocity_ok = velocity_ok and outcome[2]
        if collect_trials:
            rows.append(
                {
                    "trial": t,
                    "status": "ok",
                    "error_position": float(
                        np.linalg.norm(outcome[1][:3] - sc.ue_true[:3])
                    ),
                    "error_velocity": float(
                        np.linalg.norm(outcome[1][3:] - sc.ue_true[3:])
                    ),
                }
            )
    if not estimates:
        raise ScenarioError("every trial failed; scenario is unusable")

    estimates = np.array(estimates)
    if not velocity_ok:
        estimates = estimates[:, :3]
        truths = np.tile(sc.ue_true[:3], (estimates.shape[0], 1))
    else:
        truths = np.tile(sc.ue_true, (estimates.shape[0], 1))
    q = build_q(sc.n_a, sc.noise)
    report = compute_metrics(estimates, truths, crlb=None)
    if velocity_ok:
        crlb = crlb_ue(sc.ue_true, sc.selected_rrhs(), q)
        report.crlb_trace_position = position_trace(crlb)
        report.crlb_trace_velocity = velocity_trace(crlb)
    else:
        crlb = crlb_ue_position(sc.ue_true, sc.selected_rrhs(), q)
        report.crlb_trace_position = float(np.trace(crlb))
    report.failure_rate = failures / sc.trials
    report.trials = sc.trials
    report.runtime = time.perf_counter() - start
    return (report, rows) if collect_trials else report


def _scatterer_trial(args):
    sc, trial, dominant = args
    rng = np.random.default_rng([sc.seed, trial])
    b_n = sc.rrhs[sc.scatterer_rrh]
    b_1 = sc.rrhs[0]
    ms_true = scatterer_measurement(sc.scatterer_true, sc.ue_true, b_n, b_1)
    if sc.noise.mode == "structured":
        ms = sample_structured_scatterer(ms_true, sc.noise, dominant, rng)
    else:
        ms = sample_gaussian(ms_true, build_qs(sc.noise), rng)
    try:
        result = scatterer_wls_solve(
            ms, b_n, b_1, sc.ue_true, build_qs(sc.noise), iters=sc.wls_iters
        )
    except HybridlocError as exc:
        return ("fail", str(exc))
    return ("ok", result.x)


def run_scatterer_campaign(sc: Scenario) -> MetricReport:
    """Monte Carlo of the single-receiver scatterer estimator."""
    start = time.perf_counter()
    dominant = None
    if sc.noise.mode == "structured":
        dominant = draw_dominant_bias_scatterer(
            sc.noise, np.random.default_rng([sc.seed, _DOMINANT_STREAM])
        )
    outcomes = _map_trials(
        _scatterer_trial, [(sc, t, dominant) for t in range(sc.trials)]
    )
    estimates = [o[1] for o in outcomes if o[0] == "ok"]
    failures = len(outcomes) - len(estimates)
    if not estimates:
        raise ScenarioError("every trial failed; scenario is unusable")
    truths = np.tile(sc.scatterer_true, (len(estimates), 1))
    crlb = crlb_scatterer(
        sc.scatterer_true, sc.rrhs[sc.scatterer_rrh], sc.ue_true, build_qs(sc.noise)
    )
    report = compute_metrics(np.array(estimates), truths, crlb=crlb)
    report.failure_rate = failures / sc.trials
    report.trials = sc.trials
    report.runtime = time.perf_counter() - start
    return report


def _sr_trial(args):
    sc, trial = args
    rng = np.random.default_rng([sc.seed, trial])
    paths = simulate_paths(sc, rng)
    try:
        result = select_los(paths, sc.rrhs, n_a=sc.n_a)
    except HybridlocError:
        return False
    return result.all_selected_are_los()


def run_sr_campaign(sc: Scenario) -> MetricReport:
    """Fraction of trials whose selected paths are all true direct paths."""
    start = time.perf_counter()
    hits = _map_trials(_sr_trial, [(sc, t) for t in range(sc.trials)])
    return MetricReport(
        success_rate=float(np.mean(hits)),
        trials=sc.trials,
        runtime=time.perf_counter() - start,
    )


_NN_PIPELINES = ("wls", "blackbox", "nn_wls", "nn_ls", "enn_a", "enn_b", "enn_m")


def run_nn_campaign(
    sc: Scenario,
    pipeline: str,
    datasets: dict,
    mlp_config=None,
    ensemble_config=None,
    eps: float = 0.1,
) -> MetricReport:
    """MAE of a learning pipeline on a held-out test set.

    ``datasets`` maps "train"/"val"/"test" to Dataset objects; generating
    the test set under a different noise configuration than the training
    set gives the mismatched-noise robustness variant.
    """
    from . import ensemble as ens_mod
    from .nn import MlpConfig, blackbox_estimate, nn_ls_estimate, nn_wls_estimate, train, train_blackbox

    if pipeline not in _NN_PIPELINES:
        raise ScenarioError(f"unknown pipeline {pipeline!r}")
    for key in ("train", "val", "test"):
        if key not in datasets:
            raise ScenarioError(f"datasets must include {key!r}")
    start = time.perf_counter()
    tr, va, te = datasets["train"], datasets["val"], datasets["test"]
    rrhs = sc.selected_rrhs()
    dim = tr.m.shape[1]
    if mlp_config is None:
        mlp_config = MlpConfig(layer_widths=(dim, 32, 32, dim), seed=sc.seed)

    if pipeline == "wls":
        q = build_q(sc.n_a, sc.noise)
        estimator = lambda m: wls_solve(m, rrhs, q, iters=sc.wls_iters).x
    elif pipeline == "blackbox":
        net = train_blackbox(mlp_config, tr, va)
        estimator = lambda m: blackbox_estimate(net, m)
    elif pipeline in ("nn_wls", "nn_ls"):
        net = train(mlp_config, tr, va)
        if pipeline == "nn_wls":
            estimator = lambda m: nn_wls_estimate(net, m, rrhs, eps)
        else:
            estimator = lambda m: nn_ls_estimate(net, m, rrhs)
    else:
        if ensemble_config is None:
            ensemble_config = ens_mod.EnsembleConfig()
        nets = ens_mod.train_ensemble(mlp_config, ensemble_config, tr, va)
        if pipeline == "enn_a":
            estimator = lambda m: ens_mod.enn_a_wls(
                nets, m, rrhs, eps, ensemble_config.r_a
            )
        elif pipeline == "enn_b":
            estimator = lambda m: ens_mod.enn_b_wls(nets, m, rrhs)
        else:
            estimator = lambda m: ens_mod.enn_m_wls(nets, m, rrhs, eps)

    estimates, truths = [], []
    failures = 0
    for m, x in zip(te.m, te.x):
        try:
            estimates.append(estimator(m))
            truths.append(x)
        except HybridlocError:
            failures += 1
    if not estimates:
        raise ScenarioError("every test sample failed; pipeline is unusable")
    report = compute_metrics(np.array(estimates), np.array(truths))
    report.failure_rate = failures / len(te.m)
    report.trials = len(te.m)
    report.runtime = time.perf_counter() - start
    return report
