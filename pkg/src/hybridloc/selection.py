"""Direct-path selection: pick, cluster, and rank candidate paths per receiver.

Each receiver reports a set of detected paths (angles, delay, rate,
energy).  The earliest-arriving path per receiver is taken as its
direct-path candidate; a rough single-receiver position fix is computed by
walking the measured ray for the measured delay; the fixes are split into
two clusters; and receivers are ranked by the distance of their fix to the
direct-path cluster center.  The best-ranked receivers form the selected
set, reordered so the highest-energy selection comes first (it becomes the
differencing reference downstream).

Delays include the unknown receiver/user clock offset, which slides every
rough fix outward along its measured ray, so a plain cluster mean drifts
away from the user as the offset grows and reflected fixes leak into the
top ranks.  The ranking center is therefore refined after clustering:
candidate centers are fitted to the measured rays (offset-free) with
iteratively trimmed least squares from several deterministic starting
points, and the winner is the candidate whose induced selection is most
self-consistent -- its members' rays nearly meet at one point and their
measured ranges agree with that point up to a single common offset.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ScenarioError
from .geometry import (
    SPEED_OF_LIGHT,
    angular_vectors,
    aoa_los,
    los_range,
    nlos_params,
    range_rate,
)
from .scenario import sample_scatterer_state


@dataclass
class PathMeasurement:
    """One detected path at one receiver.

    ``tau`` is the absolute delay in seconds (clock offset included);
    ``nu`` is the Doppler expressed as a range rate in m/s; ``energy`` is a
    relative path power used for thresholding and reference choice.
    """

    phi: float
    theta: float
    tau: float
    nu: float
    energy: float
    rrh_index: int
    is_los: bool = False  # ground-truth tag, used only for scoring


@dataclass
class SelectionResult:
    los_set: list  # one PathMeasurement per selected receiver, reference first
    nlos_sets: dict  # rrh_index -> remaining PathMeasurements
    c_los: np.ndarray = field(default=None)
    c_nlos: np.ndarray = field(default=None)
    distances: dict = field(default_factory=dict)  # rrh_index -> ranking distance

    @property
    def selected_indices(self) -> list:
        return [p.rrh_index for p in self.los_set]

    def all_selected_are_los(self) -> bool:
        return all(p.is_los for p in self.los_set)


def rough_fix(p: PathMeasurement, b_n, v_c: float = SPEED_OF_LIGHT) -> np.ndarray:
    """Position reached by walking the measured ray for the measured delay."""
    a, _, _ = angular_vectors(p.phi, p.theta)
    return np.asarray(b_n, dtype=float) + v_c * p.tau * a


def _cluster_variance(points: np.ndarray, center: np.ndarray) -> float:
    if points.shape[0] == 0:
        return np.inf
    return float(np.mean(np.sum((points - center) ** 2, axis=1)))


def kmeans2(points, max_iters: int = 100):
    """Two-center Lloyd clustering of 3-D points.

    Centers start at the two points farthest apart.  Returns
    ``(c_los, c_nlos, labels)`` where the direct-path cluster is the one
    with more members (ties break toward the tighter cluster) and
    ``labels[i]`` is True for members of that cluster.
    """
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape[0] < 2:
        raise ScenarioError("clustering needs at least two 3-D points")

    # Farthest-pair initialization (point counts here are tiny).
    d2 = np.sum((pts[:, None, :] - pts[None, :, :]) ** 2, axis=2)
    i, j = np.unravel_index(np.argmax(d2), d2.shape)
    centers = np.array([pts[i], pts[j]], dtype=float)

    assign = np.zeros(pts.shape[0], dtype=int)
    for _ in range(max_iters):
        dist = np.linalg.norm(pts[:, None, :] - centers[None, :, :], axis=2)
        new_assign = np.argmin(dist, axis=1)
        for k in (0, 1):
            if not np.any(new_assign == k):
                # Re-seed an emptied cluster with the point farthest from
                # the surviving center.
                far = np.argmax(dist[:, 1 - k])
                new_assign[far] = k
        if np.array_equal(new_assign, assign) and _ > 0:
            break
        assign = new_assign
        for k in (0, 1):
            centers[k] = pts[assign == k].mean(axis=0)

    size0 = int(np.sum(assign == 0))
    size1 = pts.shape[0] - size0
    if size0 != size1:
        los_k = 0 if size0 > size1 else 1
    else:
        var0 = _cluster_variance(pts[assign == 0], centers[0])
        var1 = _cluster_variance(pts[assign == 1], centers[1])
        los_k = 0 if var0 <= var1 else 1
    labels = assign == los_k
    return centers[los_k], centers[1 - los_k], labels


def _pair_midpoints(origins: np.ndarray, dirs: np.ndarray) -> list:
    """Closest-approach midpoints between all forward ray pairs."""
    mids = []
    n = origins.shape[0]
    for i in range(n):
        for j in range(i + 1, n):
            a, b = dirs[i], dirs[j]
            ab = float(a @ b)
            den = 1.0 - ab * ab
            if den < 1e-9:  # near-parallel rays have no stable midpoint
                continue
            w = origins[j] - origins[i]
            t1 = (w @ a - ab * (w @ b)) / den
            t2 = (ab * (w @ a) - (w @ b)) / den
            if t1 <= 0.0 or t2 <= 0.0:
                continue
            mids.append(0.5 * (origins[i] + t1 * a + origins[j] + t2 * b))
    return mids


def _seed_scores(seeds, origins, dirs, ranges, k: int) -> np.ndarray:
    """Scale-free consistency score of candidate centers (lower is better).

    Per ray: perpendicular distance to the candidate (distance to the
    receiver itself when the candidate lies behind it) plus the deviation
    of the measured range from the candidate's distance after removing a
    shared offset fitted on the k nearest rays.  The score is the k-th
    smallest combined term, so it ignores however many rays disagree.
    """
    diff = seeds[:, None, :] - origins[None, :, :]
    along = np.einsum("cnd,nd->cn", diff, dirs)
    perp = np.linalg.norm(diff - along[..., None] * dirs[None], axis=2)
    dist = np.linalg.norm(diff, axis=2)
    dray = np.where(along > 0.0, perp, dist)
    offset = ranges[None, :] - dist
    kk = min(k, dray.shape[1])
    near = np.argsort(dray, axis=1, kind="stable")[:, :kk]
    shared = np.median(np.take_along_axis(offset, near, axis=1), axis=1)
    combined = dray + np.abs(offset - shared[:, None])
    return np.sort(combined, axis=1)[:, kk - 1]


def _ray_point(origins, projectors, idx, c0, iters: int = 8, floor: float = 1.0):
    """Reweighted least-squares point nearest the indexed rays."""
    c = np.array(c0, dtype=float)
    for _ in range(iters):
        normal = np.zeros((3, 3))
        rhs = np.zeros(3)
        for i in idx:
            w = 1.0 / max(float(np.linalg.norm(projectors[i] @ (c - origins[i]))), floor)
            normal += w * projectors[i]
            rhs += w * (projectors[i] @ origins[i])
        try:
            c_new = np.linalg.solve(normal, rhs)
        except np.linalg.LinAlgError:
            return c
        if not np.all(np.isfinite(c_new)):
            return c
        if np.linalg.norm(c_new - c) < 1e-9:
            return c_new
        c = c_new
    return c


def _trimmed_ray_point(origins, projectors, c0, keep: int, rounds: int = 4):
    """Alternate between keeping the closest rays and refitting the point."""
    c = np.asarray(c0, dtype=float)
    for _ in range(rounds):
        dray = np.array(
            [np.linalg.norm(p @ (c - o)) for o, p in zip(origins, projectors)]
        )
        kept = np.argsort(dray, kind="stable")[: max(keep, 3)]
        c = _ray_point(origins, projectors, kept, c)
    return c


def _subset_score(idx, origins, projectors, ranges) -> float:
    """Self-consistency of a candidate selection (lower is better).

    Fits the single point nearest the subset's rays, then scores the worst
    perpendicular miss plus the spread of (measured range - distance to the
    point), which a shared clock offset cannot inflate.
    """
    normal = np.zeros((3, 3))
    rhs = np.zeros(3)
    for i in idx:
        normal += projectors[i]
        rhs += projectors[i] @ origins[i]
    try:
        point = np.linalg.solve(normal, rhs)
    except np.linalg.LinAlgError:
        return np.inf
    if not np.all(np.isfinite(point)):
        return np.inf
    miss = [float(np.linalg.norm(projectors[i] @ (point - origins[i]))) for i in idx]
    offsets = [float(ranges[i] - np.linalg.norm(point - origins[i])) for i in idx]
    return max(miss) + (max(offsets) - min(offsets))


def _refine_center(fixes, origins, dirs, ranges, c_cluster, subset_size: int):
    """Pick the ranking center whose induced selection is most consistent."""
    projectors = [np.eye(3) - np.outer(a, a) for a in dirs]
    keep = max(3, origins.shape[0] // 2)
    centers = [
        _trimmed_ray_point(origins, projectors, c_cluster, keep),
        _trimmed_ray_point(origins, projectors, np.median(fixes, axis=0), keep),
    ]
    seeds = _pair_midpoints(origins, dirs) + [np.array(c) for c in centers]
    scores = _seed_scores(np.array(seeds), origins, dirs, ranges, k=6)
    for i in np.argsort(scores, kind="stable")[:2]:
        centers.append(_trimmed_ray_point(origins, projectors, seeds[i], keep))

    best_center = None
    best_score = np.inf
    seen = set()
    for c in centers:
        d = np.linalg.norm(fixes - c, axis=1)
        subset = tuple(np.argsort(d, kind="stable")[:subset_size])
        if subset in seen:
            continue
        seen.add(subset)
        score = _subset_score(subset, origins, projectors, ranges)
        if score < best_score:
            best_score = score
            best_center = c
    return best_center


def select_los(
    paths_by_rrh,
    rrhs,
    n_a: int | None = None,
    v_c: float = SPEED_OF_LIGHT,
    kmeans_iters: int = 100,
) -> SelectionResult:
    """Select the receivers whose earliest paths look direct.

    ``paths_by_rrh`` is a sequence (one entry per receiver) of path lists;
    receivers with empty lists are skipped.  With ``n_a`` given, exactly
    that many receivers are selected by ascending cluster distance; without
    it, picks below half the maximum pick energy are discarded and the rest
    are selected.
    """
    rrhs = np.asarray(rrhs, dtype=float)
    picks = []
    for idx, paths in enumerate(paths_by_rrh):
        if not paths:
            continue
        pick = min(paths, key=lambda p: p.tau)
        picks.append((idx, pick))
    if len(picks) < 2:
        raise ScenarioError("selection needs paths from at least two receivers")
    if n_a is not None and n_a > len(picks):
        raise ScenarioError(f"cannot select {n_a} receivers from {len(picks)} reporting")

    fixes = np.array([rough_fix(pick, rrhs[idx], v_c) for idx, pick in picks])
    origins = np.array([rrhs[idx] for idx, _ in picks])
    dirs = np.array([angular_vectors(pick.phi, pick.theta)[0] for _, pick in picks])
    ranges = np.array([v_c * pick.tau for _, pick in picks])

    c_cluster, c_nlos, _ = kmeans2(fixes, max_iters=kmeans_iters)
    subset_size = n_a if n_a is not None else min(6, len(picks))
    c_los = _refine_center(fixes, origins, dirs, ranges, c_cluster, subset_size)
    d = np.linalg.norm(fixes - c_los, axis=1)

    # Micrometer quantization so exactly-tied distances rank in receiver
    # order instead of by floating-point jitter.
    order = np.argsort(np.round(d, 6), kind="stable")
    if n_a is not None:
        chosen = list(order[:n_a])
    else:
        p_max = max(pick.energy for _, pick in picks)
        chosen = [k for k in order if picks[k][1].energy >= 0.5 * p_max]
        if len(chosen) < 2:
            raise ScenarioError("energy threshold left fewer than two receivers")

    # Reference first: the highest-energy pick among those selected.
    ref_pos = max(range(len(chosen)), key=lambda i: picks[chosen[i]][1].energy)
    chosen[0], chosen[ref_pos] = chosen[ref_pos], chosen[0]

    chosen_set = set(chosen)
    los_set = [picks[k][1] for k in chosen]
    nlos_sets = {}
    for pos, (idx, pick) in enumerate(picks):
        rest = [p for p in paths_by_rrh[idx] if p is not pick]
        if pos not in chosen_set:
            rest = [pick] + rest
        if rest:
            nlos_sets[idx] = rest

    distances = {picks[k][0]: float(d[k]) for k in range(len(picks))}
    return SelectionResult(
        los_set=los_set,
        nlos_sets=nlos_sets,
        c_los=c_los,
        c_nlos=c_nlos,
        distances=distances,
    )


def simulate_paths(sc, rng) -> list:
    """Synthesize per-receiver path lists for one selection trial.

    Each receiver detects its direct path with probability ``sc.p_d`` and
    always detects one reflected path from a scatterer drawn uniformly in
    the scenario box.  Delays carry the common clock offset plus Gaussian
    noise with the scenario's delay deviation; angles and rates are
    likewise perturbed.  Path energy falls with the square of total path
    length, reflections attenuated a further factor of ten.
    """
    u, udot = sc.ue_true[:3], sc.ue_true[3:]
    n_v = udot / np.linalg.norm(udot)
    delta_d = sc.noise.delta_d
    delta_nu = sc.noise.fdoa_factor * sc.noise.delta_d
    delta_a = sc.noise.delta_a

    paths_by_rrh = []
    for idx, b_n in enumerate(sc.rrhs):
        paths = []
        if rng.random() < sc.p_d:
            r = los_range(u, b_n)
            rdot = range_rate(u, udot, b_n)
            phi, theta = aoa_los(u, b_n)
            paths.append(
                PathMeasurement(
                    phi=phi + delta_a * rng.standard_normal(),
                    theta=theta + delta_a * rng.standard_normal(),
                    tau=(r + sc.clock_bias_m + delta_d * rng.standard_normal())
                    / SPEED_OF_LIGHT,
                    nu=rdot + delta_nu * rng.standard_normal(),
                    energy=(100.0 / r) ** 2,
                    rrh_index=idx,
                    is_los=True,
                )
            )
        xs = sample_scatterer_state(sc, rng)
        sdot_vec = xs[3] * n_v
        rs_n1, rsdot_n1, phi_s, theta_s = nlos_params(
            u, udot, xs[:3], sdot_vec, b_n, sc.rrhs[0]
        )
        r_1 = los_range(u, sc.rrhs[0])
        rdot_1 = range_rate(u, udot, sc.rrhs[0])
        total = rs_n1 + r_1
        paths.append(
            PathMeasurement(
                phi=phi_s + delta_a * rng.standard_normal(),
                theta=theta_s + delta_a * rng.standard_normal(),
                tau=(total + sc.clock_bias_m + delta_d * rng.standard_normal())
                / SPEED_OF_LIGHT,
                nu=rsdot_n1 + rdot_1 + delta_nu * rng.standard_normal(),
                energy=0.1 * (100.0 / total) ** 2,
                rrh_index=idx,
                is_los=False,
            )
        )
        paths_by_rrh.append(paths)
    return paths_by_rrh
