"""Likelihoods by integrating the coupled state / log-density ODE.

The scalar log-density channel is driven by a pluggable divergence
backend: the exact Jacobian trace, fixed-probe stochastic estimators
(plain probe average, deflated with a periodically refreshed basis, and
leave-one-out), or the learned surrogate baseline-plus-residual-head,
which needs forward passes only. Probe vectors are drawn once per
trajectory so the right-hand side stays continuous in time and adaptive
stepping is meaningful; a flag restores per-evaluation redrawing for
ablation.

NFE counts right-hand-side (drift) evaluations only; matrix-vector
products spent inside stochastic divergence estimates are reported
separately.
"""

import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, List, Optional, Tuple

import numpy as np

from ._rng import child_rng
from .dynamics import VelocityField, score_from_velocity, score_from_velocity_trig
from .stad import CutoffSpec, cutoff as cutoff_value, stein_baseline
from .trace import MatVecOperator, draw_probes, hutchpp_core, xtrace_core, _full_rank_sign_columns


class StiffnessError(RuntimeError):
    """Step size collapsed below the floating-point floor.

    Carries the partial trajectory as a list of (t, y) pairs.
    """

    def __init__(self, message, trajectory=None):
        super().__init__(message)
        self.trajectory = trajectory or []


# ---------------------------------------------------------------------------
# Dormand-Prince 5(4)
# ---------------------------------------------------------------------------

_DP_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_DP_A = [
    np.array([]),
    np.array([1 / 5]),
    np.array([3 / 40, 9 / 40]),
    np.array([44 / 45, -56 / 15, 32 / 9]),
    np.array([19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729]),
    np.array([9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656]),
    np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84]),
]
_DP_B5 = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
# fifth-order minus embedded fourth-order weights
_DP_E = np.array([71 / 57600, 0.0, -71 / 16695, 71 / 1920, -17253 / 339200, 22 / 525, -1 / 40])

_SAFETY = 0.9
_BETA = 0.04  # PI stabilization
_EXPO = 0.2 - 0.75 * _BETA


@dataclass
class SolverStats:
    nfe: int = 0
    n_accepted: int = 0
    n_rejected: int = 0


def _initial_step(rhs, t0, y0, f0, t_end, rtol, atol):
    """Cheap two-evaluation guess of the first step size."""
    span = abs(t_end - t0)
    scale = atol + rtol * np.abs(y0)
    d0 = float(np.linalg.norm(y0 / scale) / math.sqrt(y0.size))
    d1 = float(np.linalg.norm(f0 / scale) / math.sqrt(y0.size))
    h0 = 1e-6 if d0 < 1e-5 or d1 < 1e-5 else 0.01 * d0 / d1
    y1 = y0 + h0 * f0
    f1 = rhs(t0 + h0, y1)
    d2 = float(np.linalg.norm((f1 - f0) / scale) / math.sqrt(y0.size)) / h0
    if max(d1, d2) <= 1e-15:
        return span  # flat right-hand side: one step covers everything
    h1 = (0.01 / max(d1, d2)) ** 0.2
    return min(100 * h0, h1, span)


def dopri5(
    rhs: Callable[[float, np.ndarray], np.ndarray],
    y0,
    t_span: Tuple[float, float],
    rtol: float = 1e-5,
    atol: float = 1e-5,
    max_steps: int = 100_000,
    keep_path: bool = False,
):
    """Dormand-Prince 5(4) embedded pair with PI step-size control.

    The error norm mixes absolute and relative tolerances per component:
    sqrt(mean((e_i / (atol + rtol max(|y_i|, |y_new_i|)))^2)). The first
    same-as-last property is exploited, so one accepted or rejected attempt
    costs six evaluations after the two start-up evaluations.

    Returns (y_final, SolverStats). Raises StiffnessError (with the partial
    trajectory attached) if the step collapses below the machine floor.
    """
    t0, t_end = float(t_span[0]), float(t_span[1])
    if t_end <= t0:
        raise ValueError("dopri5 integrates forward: t_end > t0 required")
    y = np.asarray(y0, dtype=float).copy()
    stats = SolverStats()

    def f(t, yv):
        stats.nfe += 1
        return np.asarray(rhs(t, yv), dtype=float)

    t = t0
    k1 = f(t, y)
    h = _initial_step(f, t, y, k1, t_end, rtol, atol)
    facold = 1e-4
    path = [(t, y.copy())]
    K = np.empty((7, y.size))
    n_steps = 0
    while t < t_end - 1e-14 * max(1.0, abs(t_end)):
        n_steps += 1
        if n_steps > max_steps:
            raise StiffnessError(f"exceeded {max_steps} steps", trajectory=path)
        if h < 16 * np.finfo(float).eps * max(abs(t), 1.0):
            raise StiffnessError(f"step underflow at t={t}", trajectory=path)
        h = min(h, t_end - t)
        K[0] = k1
        for i in range(1, 7):
            yi = y + h * (_DP_A[i] @ K[:i])
            K[i] = f(t + _DP_C[i] * h, yi)
        y_new = y + h * (_DP_B5 @ K)
        err_vec = h * (_DP_E @ K)
        scale = atol + rtol * np.maximum(np.abs(y), np.abs(y_new))
        err = float(np.sqrt(np.mean((err_vec / scale) ** 2)))

        if err <= 1.0:
            stats.n_accepted += 1
            t = t + h
            y = y_new
            k1 = K[6]  # first-same-as-last
            path.append((t, y.copy()))  # also the stiffness-abort dump
            fac11 = err ** _EXPO if err > 0 else 1e-10
            fac = fac11 / facold ** _BETA
            fac = max(0.1, min(5.0, fac / _SAFETY))
            h = h / fac
            facold = max(err, 1e-4)
        else:
            stats.n_rejected += 1
            fac11 = err ** _EXPO
            h = h / min(5.0, fac11 / _SAFETY)
    if keep_path:
        return y, stats, path
    return y, stats


# ---------------------------------------------------------------------------
# divergence backends
# ---------------------------------------------------------------------------

BACKEND_KINDS = ("exact", "hutchinson", "hutchpp", "xtrace", "stad")


@dataclass
class BackendSpec:
    """Configuration of the divergence channel of the likelihood ODE.

    ``refresh_period`` applies to the deflated estimator's cached basis and
    is measured in drift evaluations (6 evaluations = one solver step).
    For the learned backend, ``head`` predicts the residual on top of the
    baseline unless ``use_baseline`` is off (direct divergence regression),
    and ``cutoff`` masks the head to its compact support.
    """

    kind: str = "exact"
    n_probes: int = 1
    probe_kind: str = "rademacher"
    seed: int = 0
    refresh_period: int = 6
    redraw_probes_each_eval: bool = False
    head: object = None
    cutoff: Optional[CutoffSpec] = None
    use_baseline: bool = True
    tag: Optional[str] = None

    def __post_init__(self):
        if self.kind not in BACKEND_KINDS:
            raise ValueError(f"unknown backend kind {self.kind!r}")
        if self.kind == "stad" and self.head is None:
            raise ValueError("learned backend needs a head")
        if self.tag is None:
            if self.kind in ("hutchinson", "hutchpp", "xtrace"):
                self.tag = f"{self.kind}({self.n_probes})"
            else:
                self.tag = self.kind


class _DivergenceState:
    """Per-trajectory backend state: fixed probes, cached basis, counters."""

    def __init__(self, spec: BackendSpec, field: VelocityField, dim: int, trajectory_seed: int):
        self.spec = spec
        self.field = field
        self.dim = dim
        self.trajectory_seed = trajectory_seed
        self.matvecs = 0
        self.evals = 0
        self._basis = None
        self._draw = 0
        if spec.kind in ("hutchinson", "xtrace"):
            self.P = self._draw_probes()
        elif spec.kind == "hutchpp":
            self.S = self._draw_probes()
            self.G = self._draw_probes()

    def _draw_probes(self):
        rng = child_rng(self.spec.seed, "trajectory-probes", self.spec.kind, self.trajectory_seed, self._draw)
        self._draw += 1
        P = draw_probes(self.spec.probe_kind, self.dim, self.spec.n_probes, rng)
        if self.spec.probe_kind == "rademacher" and self.spec.kind in ("hutchpp", "xtrace"):
            P = _full_rank_sign_columns(P, rng)
        return P

    def _operator(self, x, t, c):
        return MatVecOperator(self.dim, lambda u: self.field.drift_jvp(x, t, u, c))

    def divergence(self, x, t, c, v):
        """Estimate div v(x, t); ``v`` is the already computed drift."""
        spec = self.spec
        self.evals += 1
        if spec.kind == "exact":
            return float(self.field.drift_divergence(x, t, c))

        if spec.kind == "stad":
            head_val = float(np.asarray(self.spec.head.forward(x, t, c)).ravel()[0])
            if spec.cutoff is not None:
                head_val *= float(cutoff_value(spec.cutoff, x))
            if not spec.use_baseline:
                return head_val
            sched = self.field.schedule
            if self.field.mode == "velocity_backed":
                if sched.family == "flow_linear":
                    s = score_from_velocity(sched, v, x, t)
                else:
                    s = score_from_velocity_trig(sched, v, x, t)
            elif hasattr(self.field, "score_from_drift"):
                s = self.field.score_from_drift(x, t, v)
            else:
                s = self.field.score(x, t, c)
            return float(stein_baseline(v, s)) + head_val

        if spec.redraw_probes_each_eval:
            if spec.kind == "hutchinson":
                self.P = self._draw_probes()
            else:
                if spec.kind == "hutchpp":
                    self.S, self.G = self._draw_probes(), self._draw_probes()
                else:
                    self.P = self._draw_probes()

        op = self._operator(x, t, c)
        if spec.kind == "hutchinson":
            quad = np.array([self.P[:, k] @ op.apply(self.P[:, k]) for k in range(self.P.shape[1])])
            self.matvecs += op.matvec_counter
            return float(quad.mean())
        if spec.kind == "xtrace":
            est = xtrace_core(op, self.P)
            self.matvecs += est.matvecs_used
            return est.value
        # deflated estimator with periodic basis refresh
        refresh = self._basis is None or (
            spec.refresh_period > 0 and (self.evals - 1) % spec.refresh_period == 0
        )
        est, Q = hutchpp_core(op, self.S, self.G, cached_basis=None if refresh else self._basis)
        self._basis = Q
        self.matvecs += est.matvecs_used
        return est.value


# ---------------------------------------------------------------------------
# likelihood integration
# ---------------------------------------------------------------------------

@dataclass
class LikelihoodReport:
    """Per-sample likelihood evaluation record."""

    log_prob: float
    nfe: int
    wall_time: float
    backend: str
    bpd: Optional[float] = None
    n_accepted: int = 0
    n_rejected: int = 0
    matvecs: int = 0
    div_integral: float = 0.0
    x_terminal: Optional[np.ndarray] = None


def gaussian_log_density(x, std: float) -> float:
    x = np.asarray(x, dtype=float)
    d = x.size
    return float(-0.5 * (np.sum((x / std) ** 2) + d * math.log(2.0 * math.pi * std * std)))


def log_likelihood(
    field: VelocityField,
    backend: BackendSpec,
    x_start,
    rtol: float = 1e-5,
    atol: float = 1e-5,
    c=None,
    trajectory_seed: int = 0,
    base_log_density: Optional[Callable[[np.ndarray], float]] = None,
) -> LikelihoodReport:
    """Integrate state and log-density channels from eps to T.

    log p(x_start) = log p_T(x_T) + integral of the divergence estimate;
    the base density defaults to the schedule's terminal Gaussian.
    """
    sched = field.schedule
    x_start = np.asarray(x_start, dtype=float)
    D = x_start.size
    state = _DivergenceState(backend, field, D, trajectory_seed)

    def rhs(t, y):
        x = y[:D]
        v = field.drift(x, t, c)
        dl = state.divergence(x, t, c, v)
        return np.concatenate([v, [dl]])

    y0 = np.concatenate([x_start, [0.0]])
    t0 = time.perf_counter()
    y_final, stats = dopri5(rhs, y0, (sched.eps, sched.T), rtol=rtol, atol=atol)
    wall = time.perf_counter() - t0

    x_T = y_final[:D]
    ell = float(y_final[D])
    if base_log_density is None:
        logp_T = gaussian_log_density(x_T, sched.terminal_std())
    else:
        logp_T = float(base_log_density(x_T))
    return LikelihoodReport(
        log_prob=logp_T + ell,
        nfe=stats.nfe,
        wall_time=wall,
        backend=backend.tag,
        n_accepted=stats.n_accepted,
        n_rejected=stats.n_rejected,
        matvecs=state.matvecs,
        div_integral=ell,
        x_terminal=x_T,
    )


def bits_per_dimension(log_prob: float, dim: int, offset: float = 0.0) -> float:
    """bpd = -log_prob / (dim ln 2) + offset."""
    if dim < 1:
        raise ValueError("dim must be >= 1")
    return -log_prob / (dim * math.log(2.0)) + offset


def nats_from_bpd(bpd: float, dim: int, offset: float = 0.0) -> float:
    """Inverse of bits_per_dimension."""
    return -(bpd - offset) * dim * math.log(2.0)


def dequantize(x_int, levels: int, rng: np.random.Generator):
    """Integer levels -> continuous values in [-1, 1) with uniform noise."""
    if levels < 2:
        raise ValueError("levels must be >= 2")
    x_int = np.asarray(x_int)
    u = rng.random(x_int.shape)
    return 2.0 * (x_int + u) / levels - 1.0


def quantize_back(y, levels: int):
    """Floor continuous [-1, 1) values back to their integer levels."""
    return np.floor((np.asarray(y) + 1.0) * levels / 2.0).astype(int)


# ---------------------------------------------------------------------------
# backend comparison
# ---------------------------------------------------------------------------

def _worker_count(threads: Optional[int]) -> int:
    if threads is not None and threads > 0:
        return threads
    env = os.environ.get("STAD_LAB_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def evaluate_batch(
    field: VelocityField,
    backend: BackendSpec,
    X,
    rtol: float = 1e-5,
    atol: float = 1e-5,
    contexts=None,
    threads: Optional[int] = None,
    base_log_density: Optional[Callable[[np.ndarray], float]] = None,
) -> List[LikelihoodReport]:
    """Independent likelihood evaluations across samples, fanned out over
    threads with a deterministic, index-ordered reduction."""
    X = np.atleast_2d(np.asarray(X, dtype=float))

    def one(i):
        ci = None if contexts is None else contexts[i]
        return log_likelihood(
            field, backend, X[i], rtol=rtol, atol=atol, c=ci, trajectory_seed=i,
            base_log_density=base_log_density,
        )

    n_workers = _worker_count(threads)
    if n_workers == 1:
        return [one(i) for i in range(X.shape[0])]
    with ThreadPoolExecutor(max_workers=n_workers) as pool:
        return list(pool.map(one, range(X.shape[0])))


def compare_backends(
    field: VelocityField,
    X,
    backends: List[BackendSpec],
    rtol: float = 1e-5,
    atol: float = 1e-5,
    contexts=None,
    threads: Optional[int] = None,
    base_log_density: Optional[Callable[[np.ndarray], float]] = None,
):
    """Residual statistics of each backend against the exact trace.

    Returns (rows, per_sample) where rows hold, per backend: mean and std of
    (exact - estimated) log likelihood, MAE, wall-time speedup vs. exact,
    and rNFE = NFE[backend] / NFE[exact]; per_sample maps tags to the raw
    reports for histogramming.
    """
    specs = list(backends)
    if not any(b.kind == "exact" for b in specs):
        specs = [BackendSpec(kind="exact")] + specs
    per_sample = {}
    order = []
    for spec in specs:
        reports = evaluate_batch(
            field, spec, X, rtol=rtol, atol=atol, contexts=contexts, threads=threads,
            base_log_density=base_log_density,
        )
        per_sample[spec.tag] = reports
        order.append(spec)
    exact_tag = next(b.tag for b in specs if b.kind == "exact")
    exact_reports = per_sample[exact_tag]
    exact_logp = np.array([r.log_prob for r in exact_reports])
    exact_wall = sum(r.wall_time for r in exact_reports)
    exact_nfe = sum(r.nfe for r in exact_reports)

    rows = []
    for spec in order:
        reports = per_sample[spec.tag]
        logp = np.array([r.log_prob for r in reports])
        resid = exact_logp - logp
        wall = sum(r.wall_time for r in reports)
        nfe = sum(r.nfe for r in reports)
        rows.append(
            {
                "backend": spec.tag,
                "n_probes": spec.n_probes if spec.kind in ("hutchinson", "hutchpp", "xtrace") else 0,
                "mean_resid": float(resid.mean()),
                "std_resid": float(resid.std(ddof=1)) if resid.size > 1 else 0.0,
                "mae": float(np.abs(resid).mean()),
                "speedup": float(exact_wall / wall) if wall > 0 else float("inf"),
                "rnfe": float(nfe / exact_nfe) if exact_nfe else float("nan"),
                "wall_s": float(wall),
            }
        )
    return rows, per_sample


def residual_histogram(residuals, n_bins: int = 40):
    """Plot-ready histogram rows (bin_left, bin_right, count)."""
    residuals = np.asarray(residuals, dtype=float)
    counts, edges = np.histogram(residuals, bins=n_bins)
    return [
        {"bin_left": float(edges[i]), "bin_right": float(edges[i + 1]), "count": int(counts[i])}
        for i in range(n_bins)
    ]


def metrics_rows_to_csv(rows, path):
    import csv

    cols = ["backend", "n_probes", "mean_resid", "std_resid", "mae", "speedup", "rnfe", "wall_s"]
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=cols)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row[k] for k in cols})
