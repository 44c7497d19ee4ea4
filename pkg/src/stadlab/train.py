"""Teacher training and direct divergence-regression baselines.

Score teachers are fit by denoising score matching on the schedule's
Gaussian bridge; flow teachers regress the conditional straight-line
velocity. The direct baselines train the same scalar head used by the
distillation loop, but regress it onto cached single-probe divergence
estimates (or residual estimates) of a frozen teacher, which is the
natural alternative the distillation loss is compared against.
"""

import time
from dataclasses import dataclass
from typing import Optional

import numpy as np

from ._rng import child_rng
from . import net as netmod
from .dynamics import ScheduleSpec, VelocityField, marginal_sample
from .stad import SteinHyper, sample_time_importance, importance_weight, stein_baseline
from .targets import Dataset, InvalidTarget


@dataclass
class TrainHyper:
    """Teacher-training knobs."""

    steps: int = 4000
    batch_size: int = 128
    heating: bool = False  # double the batch from 64 up to batch_size
    heating_start: int = 64
    lr_max: float = 1e-3
    lr_min: float = 1e-5
    lr_schedule: str = "cosine"
    optimizer: str = "adam"
    clip_norm: float = 1.0
    seed: int = 0
    snapshot_every: int = 50  # last-good-checkpoint cadence
    eval_every: int = 100  # fixed-batch monitoring cadence


def _heated_batch_size(hyper: TrainHyper, step: int) -> int:
    if not hyper.heating or hyper.heating_start >= hyper.batch_size:
        return hyper.batch_size
    n_doublings = int(np.ceil(np.log2(hyper.batch_size / hyper.heating_start)))
    interval = max(1, hyper.steps // (n_doublings + 1))
    return min(hyper.batch_size, hyper.heating_start * 2 ** (step // interval))


def _check_dataset(dataset: Dataset):
    if dataset.n == 0:
        raise InvalidTarget("empty dataset")
    if np.any(dataset.samples.std(axis=0) < 1e-12):
        raise InvalidTarget("dataset has a zero-variance coordinate")


def _run_regression(net, hyper: TrainHyper, make_batch, loss_and_grads, eval_loss=None):
    """Shared training loop: snapshots, abort-on-divergence, loss curves.

    ``eval_loss``, when given, is re-evaluated on a fixed probe batch every
    ``eval_every`` steps; monitoring a frozen batch separates optimization
    progress from minibatch resampling noise.
    """
    opt = netmod.Optimizer(
        kind=hyper.optimizer,
        lr_max=hyper.lr_max,
        lr_min=hyper.lr_min,
        schedule=hyper.lr_schedule,
        total_steps=hyper.steps,
        clip_norm=hyper.clip_norm,
    )
    losses = []
    evals = []
    snapshot = netmod.flatten_params(net)
    aborted = False
    t0 = time.perf_counter()
    for step in range(hyper.steps):
        if eval_loss is not None and step % hyper.eval_every == 0:
            evals.append(eval_loss())
        batch = make_batch(step)
        loss, grads = loss_and_grads(*batch)
        if not np.isfinite(loss):
            netmod.set_flat_params(net, snapshot)
            aborted = True
            break
        losses.append(loss)
        opt.step(net.parameters(), grads)
        net.mark_parameters_dirty()
        if (step + 1) % hyper.snapshot_every == 0:
            snapshot = netmod.flatten_params(net)
    report = {
        "steps": len(losses),
        "loss_curve": np.asarray(losses),
        "eval_curve": np.asarray(evals),
        "final_loss": float(np.mean(losses[-100:])) if losses else float("nan"),
        "aborted": aborted,
        "wall_s": time.perf_counter() - t0,
    }
    return net, report


def train_score_dsm(net, dataset: Dataset, sched: ScheduleSpec, hyper: TrainHyper):
    """Denoising score matching on the diffusion bridge.

    Minimizes E ||std(t) s(x_t, t, c) + z||^2 over uniform t, which is the
    usual noise-weighted form: the population optimum is the marginal score.
    """
    if sched.is_flow:
        raise ValueError("score matching needs a diffusion family")
    _check_dataset(dataset)
    rng = child_rng(hyper.seed, "dsm-batches")

    def draw(rng_, B):
        idx = rng_.integers(0, dataset.n, size=B)
        x0 = dataset.samples[idx]
        ctx = dataset.contexts[idx] if dataset.contexts is not None else None
        t = rng_.uniform(sched.eps, sched.T, size=B)
        z = rng_.standard_normal(x0.shape)
        x_t = marginal_sample(sched, x0, t, z)
        return x_t, t, z, ctx

    def batch_loss(x_t, t, z, ctx):
        std = sched.std(t)[:, None]
        resid = std * net.forward(x_t, t, ctx) + z
        return float(np.mean(np.sum(resid * resid, axis=1))), resid, std

    def loss_and_grads(x_t, t, z, ctx):
        loss, resid, std = batch_loss(x_t, t, z, ctx)
        adj = 2.0 * std * resid / x_t.shape[0]
        return loss, netmod.param_grad_forward(net, x_t, t, ctx, adj)

    probe = draw(child_rng(hyper.seed, "dsm-eval"), 2048)
    return _run_regression(
        net,
        hyper,
        lambda step: draw(rng, _heated_batch_size(hyper, step)),
        loss_and_grads,
        eval_loss=lambda: batch_loss(*probe)[0],
    )


def train_flow_cfm(net, dataset: Dataset, sched: ScheduleSpec, hyper: TrainHyper):
    """Conditional flow matching: regress onto the path velocity z - x_start."""
    if sched.family != "flow_linear":
        raise ValueError("conditional flow matching is implemented for flow_linear")
    _check_dataset(dataset)
    rng = child_rng(hyper.seed, "cfm-batches")

    def draw(rng_, B):
        idx = rng_.integers(0, dataset.n, size=B)
        x0 = dataset.samples[idx]
        ctx = dataset.contexts[idx] if dataset.contexts is not None else None
        t = rng_.uniform(sched.eps, sched.T, size=B)
        z = rng_.standard_normal(x0.shape)
        x_t = marginal_sample(sched, x0, t, z)
        u = z - x0
        return x_t, t, u, ctx

    def batch_loss(x_t, t, u, ctx):
        resid = net.forward(x_t, t, ctx) - u
        return float(np.mean(np.sum(resid * resid, axis=1))), resid

    def loss_and_grads(x_t, t, u, ctx):
        loss, resid = batch_loss(x_t, t, u, ctx)
        adj = 2.0 * resid / x_t.shape[0]
        return loss, netmod.param_grad_forward(net, x_t, t, ctx, adj)

    probe = draw(child_rng(hyper.seed, "cfm-eval"), 2048)
    return _run_regression(
        net,
        hyper,
        lambda step: draw(rng, _heated_batch_size(hyper, step)),
        loss_and_grads,
        eval_loss=lambda: batch_loss(*probe)[0],
    )


# ---------------------------------------------------------------------------
# direct divergence / residual regression (the non-Stein alternative)
# ---------------------------------------------------------------------------

def build_regression_cache(
    teacher: VelocityField,
    dataset: Dataset,
    hyper: SteinHyper,
    mode: str,
    rebuild_index: int = 0,
):
    """Cache of (x_t, t, c, target) with single-probe divergence targets.

    ``h1`` targets are probe quadratic forms p . J p of the teacher drift
    (one JVP each); ``h1_plus_b`` targets additionally add <v, s> so the
    head learns the residual and predicts divergence together with the
    baseline at inference time.
    """
    if mode not in ("h1", "h1_plus_b"):
        raise ValueError(f"unknown regression mode {mode!r}")
    sched = teacher.schedule
    rng = child_rng(hyper.seed, "direct-cache", mode, rebuild_index)
    idx = rng.integers(0, dataset.n, size=hyper.cache_size)
    x0 = dataset.samples[idx]
    ctx = dataset.contexts[idx] if dataset.contexts is not None else None
    u = rng.random(hyper.cache_size)
    t, _ = sample_time_importance(hyper.time_proposal, sched.eps, sched.T, u)
    z = rng.standard_normal(x0.shape)
    x_t = marginal_sample(sched, x0, t, z)

    probes = rng.integers(0, 2, size=x_t.shape).astype(float) * 2.0 - 1.0
    jp = teacher.drift_jvp(x_t, t, probes, ctx)
    target = np.sum(probes * jp, axis=1)
    if mode == "h1_plus_b":
        v = teacher.drift(x_t, t, ctx)
        s = teacher.score(x_t, t, ctx)
        target = target - stein_baseline(v, s)  # r estimate: div_hat + <v, s>
    return x_t, t, ctx, target


def train_direct_divergence(
    head,
    teacher: VelocityField,
    dataset: Dataset,
    mode: str,
    hyper: SteinHyper,
    time_budget_s: Optional[float] = None,
):
    """Squared-error regression of the head onto cached divergence targets.

    The teacher stays frozen. Cache construction time is reported separately
    from training time; when ``time_budget_s`` is given, training stops once
    cache plus training wall time exceeds it (wall-clock-matched baselines).
    """
    t0 = time.perf_counter()
    x_t, t, ctx, target = build_regression_cache(teacher, dataset, hyper, mode, rebuild_index=0)
    wall_cache = time.perf_counter() - t0

    sched = teacher.schedule
    opt = netmod.Optimizer(
        kind=hyper.optimizer,
        lr_max=hyper.lr_max,
        lr_min=hyper.lr_min,
        schedule=hyper.lr_schedule,
        total_steps=hyper.steps,
        clip_norm=hyper.clip_norm,
    )
    rng = child_rng(hyper.seed, "direct-batches", mode)
    losses = []
    rebuilds = 0
    wall_rebuild = 0.0
    aborted = False
    t1 = time.perf_counter()
    for step in range(hyper.steps):
        if time_budget_s is not None and (time.perf_counter() - t0) > time_budget_s:
            break
        idx = rng.integers(0, x_t.shape[0], size=hyper.batch_size)
        w = importance_weight(hyper.time_proposal, sched.eps, sched.T, t[idx])
        cb = ctx[idx] if ctx is not None else None
        out = head.forward(x_t[idx], t[idx], cb)[:, 0]
        resid = out - target[idx]
        loss = float(np.mean(w * resid * resid))
        if not np.isfinite(loss):
            aborted = True
            break
        losses.append(loss)
        adj = (2.0 * w * resid / idx.size)[:, None]
        grads = netmod.param_grad_forward(head, x_t[idx], t[idx], cb, adj)
        opt.step(head.parameters(), grads)
        head.mark_parameters_dirty()
        if hyper.rebuild_period > 0 and (step + 1) % hyper.rebuild_period == 0 and (step + 1) < hyper.steps:
            rebuilds += 1
            tc = time.perf_counter()
            x_t, t, ctx, target = build_regression_cache(teacher, dataset, hyper, mode, rebuild_index=rebuilds)
            wall_rebuild += time.perf_counter() - tc
    report = {
        "mode": mode,
        "steps": len(losses),
        "loss_curve": np.asarray(losses),
        "final_loss": float(np.mean(losses[-100:])) if losses else float("nan"),
        "aborted": aborted,
        "wall_time_cache_s": wall_cache + wall_rebuild,
        "wall_time_train_s": time.perf_counter() - t1 - wall_rebuild,
        "cache_rebuilds": rebuilds,
    }
    return head, report
