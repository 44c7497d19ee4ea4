"""Divergence distillation via the Langevin-Stein operator.

The divergence of a PF-ODE drift decomposes as a cheap pointwise baseline
b(x) = -<v(x), s(x)> plus a residual r(x) = div v(x) + <v(x), s(x)> whose
mean under the marginal is zero. A scalar head is trained to predict the
residual by minimizing

    E[ khat(x)^2 head(x)^2 + 2 <grad_x (khat head)(x), v(x)>
       + penalty * ||grad_x (khat head)(x)||^2 ],

which equals the L2 regression onto r up to a constant, yet needs only
field evaluations: no Jacobians, no traces. ``khat`` is a smooth radial
cutoff that forces the boundary flux in the underlying integration by
parts to vanish by construction.

Training follows a cached loop: teacher drifts are evaluated once per
cache build on bridge samples (x_t, t, context), then many cheap head
updates draw batches from the cache, with an optional inverse-square time
proposal whose importance weights keep the loss equal to the uniform-time
objective in expectation.
"""

import time
from dataclasses import dataclass
from typing import Optional

import numpy as np

from ._rng import child_rng
from . import net as netmod
from .dynamics import VelocityField, marginal_sample
from .targets import Dataset


class ConfigError(ValueError):
    """Distillation configuration cannot be executed (empty cache, ...)."""


# ---------------------------------------------------------------------------
# cutoff regularizer
# ---------------------------------------------------------------------------

def _bump_transition(u):
    """C-infinity monotone 1 -> 0 transition on u in [0, 1]."""
    u = np.clip(u, 0.0, 1.0)
    with np.errstate(divide="ignore", over="ignore"):
        ga = np.where(u < 1.0, np.exp(-1.0 / np.maximum(1.0 - u, 1e-300)), 0.0)
        gb = np.where(u > 0.0, np.exp(-1.0 / np.maximum(u, 1e-300)), 0.0)
    return ga / (ga + gb)


def _bump_transition_deriv(u):
    h = 1e-6
    return (_bump_transition(u + h) - _bump_transition(u - h)) / (2.0 * h)


@dataclass
class CutoffSpec:
    """Smooth compactly supported radial multiplier.

    Value 1 inside radius R, 0 outside 2R, monotone in between. ``cosine``
    uses 1/2 + cos(pi ||x||/R - pi)/2 on the shell; ``bump`` uses a
    C-infinity mollifier transition for harder decay near the edges.
    ``percentile`` records which percentile of ||x|| set R.
    """

    radius: float
    mode: str = "cosine"
    percentile: float = 99.5

    def __post_init__(self):
        if self.radius <= 0:
            raise ValueError("cutoff radius must be positive")
        if self.mode not in ("cosine", "bump"):
            raise ValueError(f"unknown cutoff mode {self.mode!r}")

    @classmethod
    def from_norms(cls, norms, percentile: float = 99.5, mode: str = "cosine") -> "CutoffSpec":
        R = float(np.percentile(np.asarray(norms, dtype=float), percentile))
        return cls(radius=R, mode=mode, percentile=percentile)


def cutoff(spec: CutoffSpec, x):
    """Evaluate the cutoff multiplier at x (single point or batch)."""
    x = np.asarray(x, dtype=float)
    r = np.linalg.norm(x, axis=-1)
    R = spec.radius
    if spec.mode == "cosine":
        shell = 0.5 + 0.5 * np.cos(np.pi * r / R - np.pi)
    else:
        shell = _bump_transition(r / R - 1.0)
    return np.where(r <= R, 1.0, np.where(r >= 2.0 * R, 0.0, shell))


def cutoff_gradient(spec: CutoffSpec, x):
    """Gradient of the cutoff; zero inside R and outside 2R."""
    x = np.asarray(x, dtype=float)
    r = np.linalg.norm(x, axis=-1)
    R = spec.radius
    safe_r = np.maximum(r, 1e-300)
    if spec.mode == "cosine":
        mag = -(np.pi / (2.0 * R)) * np.sin(np.pi * r / R - np.pi)
    else:
        mag = _bump_transition_deriv(r / R - 1.0) / R
    on_shell = (r > R) & (r < 2.0 * R)
    coeff = np.where(on_shell, mag / safe_r, 0.0)
    return coeff[..., None] * x


def cutoff_value_and_gradient(spec: Optional[CutoffSpec], x):
    """Convenience pair; spec=None means no cutoff (value 1, gradient 0)."""
    x = np.asarray(x, dtype=float)
    if spec is None:
        shape = x.shape[:-1]
        return np.ones(shape), np.zeros_like(x)
    return cutoff(spec, x), cutoff_gradient(spec, x)


# ---------------------------------------------------------------------------
# baseline and residual
# ---------------------------------------------------------------------------

def stein_baseline(v, s):
    """Pointwise baseline -<v, s>; its mean equals the mean divergence."""
    v = np.asarray(v, dtype=float)
    s = np.asarray(s, dtype=float)
    return -np.sum(v * s, axis=-1)


def residual_target_oracle(field: VelocityField, x, t, c=None, score=None):
    """Exact residual div v + <v, s>, for test-scale fields only.

    Needs the exact Jacobian trace, so it is an oracle for verification,
    never part of the training path. ``score`` overrides the field's own
    score (useful when probing against an independent target density).
    """
    div = field.drift_divergence(x, t, c)
    v = field.drift(x, t, c)
    s = field.score(x, t, c) if score is None else np.asarray(score, dtype=float)
    return div + np.sum(v * s, axis=-1)


# ---------------------------------------------------------------------------
# time proposals
# ---------------------------------------------------------------------------

def sample_time_importance(proposal: str, eps: float, T: float, u):
    """Map uniform draws to proposal times plus importance weights.

    ``inverse_square`` draws t with density q(t) = t^-2 / (1/eps - 1/T) via
    the inverse CDF t = 1 / (1/eps - u (1/eps - 1/T)) and weights
    w = t^2 (1/eps - 1/T) / (T - eps), so weighted proposal averages equal
    uniform-time averages. ``uniform`` returns t = eps + u (T - eps), w = 1.
    """
    if not 0.0 < eps < T:
        raise ValueError("need 0 < eps < T")
    u = np.asarray(u, dtype=float)
    if proposal == "uniform":
        return eps + u * (T - eps), np.ones_like(u)
    if proposal == "inverse_square":
        span = 1.0 / eps - 1.0 / T
        t = 1.0 / (1.0 / eps - u * span)
        w = t * t * span / (T - eps)
        return t, w
    raise ValueError(f"unknown time proposal {proposal!r}")


def importance_density(eps: float, T: float, t):
    """Density of the inverse-square proposal on [eps, T]."""
    t = np.asarray(t, dtype=float)
    norm = 1.0 / eps - 1.0 / T
    return np.where((t >= eps) & (t <= T), 1.0 / (t * t * norm), 0.0)


def importance_weight(proposal: str, eps: float, T: float, t):
    """w(t) = p(t)/q(t) for the declared proposal (uniform target p)."""
    t = np.asarray(t, dtype=float)
    if proposal == "uniform":
        return np.ones_like(t)
    if proposal == "inverse_square":
        return t * t * (1.0 / eps - 1.0 / T) / (T - eps)
    raise ValueError(f"unknown time proposal {proposal!r}")


# ---------------------------------------------------------------------------
# distillation cache and hyperparameters
# ---------------------------------------------------------------------------

@dataclass
class DistillCache:
    """Frozen teacher evaluations: bridge samples with their drifts."""

    x: np.ndarray  # (M, D)
    t: np.ndarray  # (M,)
    v: np.ndarray  # (M, D)
    c: Optional[np.ndarray] = None  # (M, C)
    proposal: str = "inverse_square"
    rebuild_period: int = 2000

    @property
    def size(self) -> int:
        return self.x.shape[0]


@dataclass
class SteinHyper:
    """Knobs of the distillation loop (defaults follow the flux-task setup)."""

    steps: int = 20_000
    batch_size: int = 256
    cache_size: int = 65_536
    rebuild_period: int = 2000  # 0 disables rebuilds
    time_proposal: str = "inverse_square"
    grad_penalty: float = 0.0
    cutoff_percentile: float = 99.5
    cutoff_mode: str = "cosine"
    lr_max: float = 1e-4
    lr_min: float = 1e-8
    lr_schedule: str = "cosine"
    optimizer: str = "adam"
    clip_norm: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.grad_penalty < 0:
            raise ValueError("gradient penalty must be >= 0")
        if self.rebuild_period < 0:
            raise ValueError("rebuild period must be >= 0 (0 = never)")


def build_cache(
    teacher: VelocityField,
    dataset: Dataset,
    hyper: SteinHyper,
    rebuild_index: int = 0,
) -> DistillCache:
    """One pass of cache construction: bridge samples plus teacher drifts.

    Costs exactly ``cache_size`` teacher drift evaluations and nothing else
    (no Jacobians). Entries are independent, so the evaluation is done as
    one vectorized batch.
    """
    if dataset.n == 0 or hyper.cache_size < 1:
        raise ConfigError("cache construction needs data and cache_size >= 1")
    sched = teacher.schedule
    rng = child_rng(hyper.seed, "cache", rebuild_index)
    idx = rng.integers(0, dataset.n, size=hyper.cache_size)
    x_start = dataset.samples[idx]
    ctx = dataset.contexts[idx] if dataset.contexts is not None else None
    u = rng.random(hyper.cache_size)
    t, _ = sample_time_importance(hyper.time_proposal, sched.eps, sched.T, u)
    z = rng.standard_normal(x_start.shape)
    x_t = marginal_sample(sched, x_start, t, z)
    v_t = teacher.drift(x_t, t, ctx)
    return DistillCache(x=x_t, t=t, v=v_t, c=ctx, proposal=hyper.time_proposal, rebuild_period=hyper.rebuild_period)


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------

def stein_loss_batch(head, x, t, v, weights, cutoff_spec: Optional[CutoffSpec], grad_penalty: float, c=None):
    """Regularized distillation loss and its parameter gradients.

    Per sample: w * (dhat^2 + 2 <g, v> + penalty ||g||^2) with dhat the
    cutoff-masked head value and g its full input gradient including the
    cutoff product-rule term. Returns (loss, grads) where grads follow
    ``head.parameters()`` order.
    """
    x = np.asarray(x, dtype=float)
    v = np.asarray(v, dtype=float)
    w = np.asarray(weights, dtype=float)
    B = x.shape[0]
    val, grad = head.value_and_input_gradient(x, t, c)
    kval, kgrad = cutoff_value_and_gradient(cutoff_spec, x)
    dhat = kval * val
    g = kval[:, None] * grad + val[:, None] * kgrad

    per_sample = dhat ** 2 + 2.0 * np.sum(g * v, axis=1) + grad_penalty * np.sum(g * g, axis=1)
    loss = float(np.mean(w * per_sample))

    # d loss / d head-value and d loss / d head-input-gradient, then one
    # reverse pass for each pattern.
    coeff = w * (
        2.0 * kval ** 2 * val
        + 2.0 * np.sum(kgrad * v, axis=1)
        + 2.0 * grad_penalty * np.sum(g * kgrad, axis=1)
    ) / B
    U = (2.0 * w * kval)[:, None] * (v + grad_penalty * g) / B
    grads_val = netmod.param_grad_forward(head, x, t, c, coeff[:, None])
    grads_dir = netmod.param_grad_input_grad(head, x, t, c, U)
    grads = [a + b for a, b in zip(grads_val, grads_dir)]
    return loss, grads


def head_residual(head, x, t, cutoff_spec: Optional[CutoffSpec], c=None):
    """Cutoff-masked head prediction of the divergence residual."""
    val = head.forward(x, t, c)
    val = val[..., 0]
    kval = 1.0 if cutoff_spec is None else cutoff(cutoff_spec, x)
    return kval * val


# ---------------------------------------------------------------------------
# identity diagnostics
# ---------------------------------------------------------------------------

def mixed_term_identity_check(head, field: VelocityField, t: float, n_samples: int, seed: int, cutoff_spec: Optional[CutoffSpec]):
    """Monte-Carlo check that E[dhat r] = -E[<grad dhat, v>] under p_t.

    Requires a field with exact sampling and exact Jacobians (the analytic
    Gaussian oracle). Returns the two estimates, their standard errors, and
    whether they agree within three combined standard errors.
    """
    rng = child_rng(seed, "mixed-term", int(n_samples))
    X = field.sample_marginal(t, n_samples, rng)
    r = residual_target_oracle(field, X, t)
    v = field.drift(X, t)
    val, grad = head.value_and_input_gradient(X, t)
    kval, kgrad = cutoff_value_and_gradient(cutoff_spec, X)
    dhat = kval * val
    g = kval[:, None] * grad + val[:, None] * kgrad

    lhs = dhat * r
    rhs = -np.sum(g * v, axis=1)
    lhs_mean, rhs_mean = float(lhs.mean()), float(rhs.mean())
    lhs_se = float(lhs.std(ddof=1) / np.sqrt(n_samples))
    rhs_se = float(rhs.std(ddof=1) / np.sqrt(n_samples))
    combined = float(np.sqrt(lhs_se ** 2 + rhs_se ** 2))
    return {
        "lhs_mean": lhs_mean,
        "rhs_mean": rhs_mean,
        "lhs_se": lhs_se,
        "rhs_se": rhs_se,
        "combined_se": combined,
        "diff": abs(lhs_mean - rhs_mean),
        "within_3se": bool(abs(lhs_mean - rhs_mean) <= 3.0 * combined + 1e-300),
    }


# ---------------------------------------------------------------------------
# Algorithm: cached Stein distillation
# ---------------------------------------------------------------------------

def distill(
    teacher: VelocityField,
    dataset: Dataset,
    head,
    hyper: SteinHyper,
    cutoff_spec: Optional[CutoffSpec] = None,
):
    """Cached distillation of the teacher's divergence residual.

    Builds the cache from teacher drift evaluations only, fits the cutoff
    radius to the declared percentile of ||x_t|| over the initial cache
    (unless a cutoff is supplied), then runs ``steps`` updates of the
    regularized loss with importance weights, rebuilding the cache every
    ``rebuild_period`` steps. Returns (head, report, cutoff_spec).
    """
    t0 = time.perf_counter()
    cache = build_cache(teacher, dataset, hyper, rebuild_index=0)
    wall_cache = time.perf_counter() - t0

    norms = np.linalg.norm(cache.x, axis=1)
    if cutoff_spec is None:
        cutoff_spec = CutoffSpec.from_norms(norms, percentile=hyper.cutoff_percentile, mode=hyper.cutoff_mode)
    fraction_outside = float(np.mean(norms >= 2.0 * cutoff_spec.radius))

    sched = teacher.schedule
    opt = netmod.Optimizer(
        kind=hyper.optimizer,
        lr_max=hyper.lr_max,
        lr_min=hyper.lr_min,
        schedule=hyper.lr_schedule,
        total_steps=hyper.steps,
        clip_norm=hyper.clip_norm,
    )
    rng = child_rng(hyper.seed, "distill-batches")
    losses = np.empty(hyper.steps)
    aborted = False
    rebuilds = 0
    wall_rebuild = 0.0
    t1 = time.perf_counter()
    for step in range(hyper.steps):
        idx = rng.integers(0, cache.size, size=hyper.batch_size)
        w = importance_weight(cache.proposal, sched.eps, sched.T, cache.t[idx])
        ctx = cache.c[idx] if cache.c is not None else None
        loss, grads = stein_loss_batch(
            head, cache.x[idx], cache.t[idx], cache.v[idx], w, cutoff_spec, hyper.grad_penalty, c=ctx
        )
        if not np.isfinite(loss):
            aborted = True
            losses = losses[:step]
            break
        losses[step] = loss
        opt.step(head.parameters(), grads)
        head.mark_parameters_dirty()
        if hyper.rebuild_period > 0 and (step + 1) % hyper.rebuild_period == 0 and (step + 1) < hyper.steps:
            rebuilds += 1
            tc = time.perf_counter()
            cache = build_cache(teacher, dataset, hyper, rebuild_index=rebuilds)
            wall_rebuild += time.perf_counter() - tc

    tail = losses[-100:] if losses.size >= 100 else losses
    report = {
        "steps": int(losses.size),
        "final_loss": float(tail.mean()) if losses.size else float("nan"),
        "R": cutoff_spec.radius,
        "fraction_outside_2R": fraction_outside,
        "wall_time_cache_s": wall_cache + wall_rebuild,
        "wall_time_train_s": time.perf_counter() - t1 - wall_rebuild,
        "cache_rebuilds": rebuilds,
        "aborted": aborted,
        "loss_curve": losses.copy(),
    }
    return head, report, cutoff_spec
