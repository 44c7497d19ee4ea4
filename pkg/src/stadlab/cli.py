"""Experiment drivers: one JSON config describes a full reproducible run.

Commands: bench-trace, train-score, train-flow, distill, direct-distill,
loglik, report. Every command accepts --config, --seed, --out, --threads
and dotted-path overrides (--set section.key=value); all randomness flows
from the seed and outputs are deterministic up to wall-time fields. The
resolved configuration is written next to the outputs as
effective_config.json so a run can be reproduced from its artifacts.

Exit codes: 0 ok, 2 config parse error, 3 missing input file, 4 shape
mismatch between checkpoint and config, 5 numerical abort.
"""

import argparse
import copy
import json
import math
import os
import sys

import numpy as np

from . import net as netmod
from . import odelik, stad, targets, trace, train
from .dynamics import ScheduleSpec, analytic_gaussian_field, field_from_score_net, field_from_velocity_net

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_MISSING = 3
EXIT_SHAPE = 4
EXIT_NUMERIC = 5


class CliError(Exception):
    def __init__(self, message, code):
        super().__init__(message)
        self.code = code


DEFAULT_CONFIG = {
    "seed": 0,
    "target": {"kind": "gaussian_mixture", "dim": 2, "n_samples": 20000,
               "weights": [0.5, 0.5], "means": [[-1.5, 0.0], [1.5, 0.5]],
               "covariances": [[[0.5, 0.1], [0.1, 0.3]], [[0.4, -0.1], [-0.1, 0.6]]]},
    "schedule": {"family": "vp", "eps": 1e-3, "T": 1.0, "beta_min": 0.1, "beta_max": 20.0, "sigma_d": 1.0},
    "teacher": {"hidden": [128, 128, 128], "activation": "tanh", "time_embedding": "append_raw_t",
                "steps": 4000, "batch_size": 256, "heating": True, "lr_max": 1e-3, "lr_min": 1e-5,
                "lr_schedule": "cosine", "optimizer": "adam", "clip_norm": 1.0},
    "head": {"hidden": [512, 512, 512], "activation": "tanh", "time_embedding": "append_log_t"},
    "distill": {"steps": 6000, "batch_size": 256, "cache_size": 32768, "rebuild_period": 2000,
                "time_proposal": "uniform", "grad_penalty": 0.0, "cutoff_percentile": 99.5,
                "cutoff_mode": "cosine", "lr_max": 1e-3, "lr_min": 1e-8, "lr_schedule": "cosine",
                "optimizer": "adam", "clip_norm": 1.0},
    "likelihood": {"field": "teacher", "backends": [{"kind": "exact"}, {"kind": "hutchinson", "n_probes": 1},
                                                     {"kind": "stad"}],
                   "rtol": 1e-5, "atol": 1e-5, "n_test": 128, "test_seed": 777, "offset_bits": 0.0},
    "bench": {"dims": [4, 16, 64, 256], "psd": True, "budgets": [1, 2, 4, 8, 16, 32, 64, 128],
              "trials": [4096, 1024, 256, 64]},
}


# ---------------------------------------------------------------------------
# config plumbing
# ---------------------------------------------------------------------------

def load_config(path):
    if not os.path.exists(path):
        raise CliError(f"config file not found: {path}", EXIT_MISSING)
    with open(path) as fh:
        text = fh.read()
    try:
        user = json.loads(text)
    except json.JSONDecodeError as e:
        raise CliError(f"config parse error at line {e.lineno} column {e.colno}: {e.msg}", EXIT_CONFIG)
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    _deep_update(cfg, user)
    return cfg


def _deep_update(base, update):
    for k, v in update.items():
        if isinstance(v, dict) and isinstance(base.get(k), dict):
            _deep_update(base[k], v)
        else:
            base[k] = v


def _parse_override_value(raw):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def apply_overrides(cfg, sets):
    for item in sets or []:
        if "=" not in item:
            raise CliError(f"override must look like a.b.c=value, got {item!r}", EXIT_CONFIG)
        path, raw = item.split("=", 1)
        keys = path.split(".")
        node = cfg
        for k in keys[:-1]:
            if k not in node or not isinstance(node[k], dict):
                node[k] = {}
            node = node[k]
        node[keys[-1]] = _parse_override_value(raw)
    return cfg


def write_effective_config(cfg, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "effective_config.json"), "w") as fh:
        json.dump(cfg, fh, indent=1, sort_keys=True)


# ---------------------------------------------------------------------------
# builders
# ---------------------------------------------------------------------------

def build_schedule(cfg) -> ScheduleSpec:
    return ScheduleSpec.from_dict(cfg["schedule"])


def build_target(cfg, seed):
    """Returns (target_or_None, dataset). File-backed datasets have no target."""
    tcfg = cfg["target"]
    kind = tcfg.get("kind")
    n = int(tcfg.get("n_samples", 20000))
    if "dataset_csv" in tcfg:
        path = tcfg["dataset_csv"]
        if not os.path.exists(path):
            raise CliError(f"dataset file not found: {path}", EXIT_MISSING)
        return None, targets.load_dataset_csv(path)
    if "dataset_bin" in tcfg:
        path = tcfg["dataset_bin"]
        if not (os.path.exists(path) and os.path.exists(str(path) + ".json")):
            raise CliError(f"dataset file (or sidecar) not found: {path}", EXIT_MISSING)
        return None, targets.load_dataset_binary(path)
    if kind == "gaussian":
        target = targets.make_gaussian(tcfg["mean"], tcfg["covariance"])
        return target, target.sample(n, seed)
    if kind == "gaussian_mixture":
        target = targets.make_gaussian_mixture(tcfg["weights"], tcfg["means"], tcfg["covariances"])
        return target, target.sample(n, seed)
    if kind == "two_moons":
        target = targets.make_two_moons(noise=tcfg.get("noise", 0.15))
        return target, target.sample(n, seed)
    if kind == "conditional_gaussian":
        target = targets.make_conditional_gaussian(
            tcfg["weights"], tcfg["context_maps"], tcfg["offsets"], tcfg["diag_vars"]
        )
        from ._rng import child_rng

        ctx = child_rng(seed, "cli-contexts").standard_normal((n, target.context_dim))
        return target, target.sample(n, seed, c=ctx)
    if kind == "cosmos_like":
        return targets.make_cosmos_like(seed, n_samples=n)
    raise CliError(f"unknown target kind {kind!r}", EXIT_CONFIG)


def _build_net(ncfg, x_dim, out_dim, context_dim, seed):
    return netmod.FieldNet(
        x_dim=x_dim,
        out_dim=out_dim,
        hidden=ncfg.get("hidden", [128, 128]),
        activation=ncfg.get("activation", "tanh"),
        time_embedding=ncfg.get("time_embedding", "append_log_t"),
        context_dim=context_dim,
        seed=seed,
    )


def _load_teacher(cfg, out_dir):
    path = os.path.join(out_dir, "teacher.ckpt")
    if not os.path.exists(path):
        raise CliError(f"teacher checkpoint not found: {path}", EXIT_MISSING)
    net, header = netmod.load_checkpoint(path)
    sched = build_schedule(cfg)
    if header.get("schedule_spec_id") not in (None, sched.spec_id()):
        raise CliError(
            f"checkpoint schedule {header.get('schedule_spec_id')} does not match config {sched.spec_id()}",
            EXIT_SHAPE,
        )
    tcfg = cfg["teacher"]
    if list(header["hidden"]) != list(tcfg.get("hidden", header["hidden"])):
        raise CliError("teacher checkpoint hidden dims do not match config", EXIT_SHAPE)
    if sched.is_flow:
        field = field_from_velocity_net(sched, net)
    else:
        field = field_from_score_net(sched, net)
    return net, field, header


def _normalization_from_header(header):
    meta = header.get("metadata", {})
    shift = np.asarray(meta.get("shift")) if meta.get("shift") is not None else None
    scale = np.asarray(meta.get("scale")) if meta.get("scale") is not None else None
    cshift = np.asarray(meta.get("context_shift")) if meta.get("context_shift") is not None else None
    cscale = np.asarray(meta.get("context_scale")) if meta.get("context_scale") is not None else None
    return shift, scale, cshift, cscale


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_bench_trace(cfg, out_dir, threads):
    bcfg = cfg["bench"]
    dims = list(bcfg["dims"])
    trials = bcfg["trials"]
    if isinstance(trials, list):
        trials = {d: t for d, t in zip(dims, trials)}
    rows = trace.random_matrix_benchmark(
        dims=dims,
        psd=bool(bcfg["psd"]),
        budgets=list(bcfg["budgets"]),
        trials=trials,
        seed=int(cfg["seed"]),
    )
    os.makedirs(out_dir, exist_ok=True)
    trace.benchmark_rows_to_csv(rows, os.path.join(out_dir, "bench.csv"))
    write_effective_config(cfg, out_dir)
    print(f"wrote {len(rows)} benchmark rows to {os.path.join(out_dir, 'bench.csv')}")
    return EXIT_OK


def _train_teacher(cfg, out_dir, flow):
    seed = int(cfg["seed"])
    sched = build_schedule(cfg)
    target, data = build_target(cfg, seed)
    data = data.normalized()
    tcfg = cfg["teacher"]
    net = _build_net(tcfg, data.dim, data.dim, data.context_dim, seed)
    hyper = train.TrainHyper(
        steps=int(tcfg["steps"]),
        batch_size=int(tcfg["batch_size"]),
        heating=bool(tcfg.get("heating", False)),
        lr_max=float(tcfg["lr_max"]),
        lr_min=float(tcfg["lr_min"]),
        lr_schedule=tcfg.get("lr_schedule", "cosine"),
        optimizer=tcfg.get("optimizer", "adam"),
        clip_norm=float(tcfg.get("clip_norm", 1.0)),
        seed=seed,
    )
    if flow:
        net, report = train.train_flow_cfm(net, data, sched, hyper)
    else:
        net, report = train.train_score_dsm(net, data, sched, hyper)
    if report["aborted"]:
        raise CliError("training aborted on non-finite loss", EXIT_NUMERIC)
    os.makedirs(out_dir, exist_ok=True)
    meta = {
        "seed": seed,
        "steps": report["steps"],
        "final_loss": report["final_loss"],
        "shift": None if data.shift is None else list(map(float, data.shift)),
        "scale": None if data.scale is None else list(map(float, data.scale)),
        "context_shift": None if data.context_shift is None else list(map(float, data.context_shift)),
        "context_scale": None if data.context_scale is None else list(map(float, data.context_scale)),
    }
    netmod.save_checkpoint(net, os.path.join(out_dir, "teacher.ckpt"), schedule_spec_id=sched.spec_id(), metadata=meta)
    _write_loss_csv(report["loss_curve"], os.path.join(out_dir, "train_loss.csv"))
    write_effective_config(cfg, out_dir)
    print(f"teacher trained: {report['steps']} steps, final loss {report['final_loss']:.6g}")
    return EXIT_OK


def _write_loss_csv(curve, path):
    import csv

    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "loss"])
        for i, v in enumerate(curve):
            writer.writerow([i, repr(float(v))])


def _normalized_dataset_like_teacher(cfg, header, seed):
    _, data = build_target(cfg, seed)
    shift, scale, cshift, cscale = _normalization_from_header(header)
    if shift is None:
        return data
    if shift.shape[0] != data.dim:
        raise CliError("teacher normalization does not match dataset dimension", EXIT_SHAPE)
    out = targets.Dataset(samples=(data.samples - shift) / scale, shift=shift, scale=scale, seed=data.seed)
    if data.contexts is not None:
        out.contexts = (data.contexts - cshift) / cscale
        out.context_shift, out.context_scale = cshift, cscale
    return out


def cmd_distill(cfg, out_dir, threads):
    seed = int(cfg["seed"])
    _, field, header = _load_teacher(cfg, out_dir)
    data = _normalized_dataset_like_teacher(cfg, header, seed)
    hcfg = cfg["head"]
    head = _build_net(hcfg, data.dim, 1, data.context_dim, seed + 1)
    dcfg = cfg["distill"]
    hyper = stad.SteinHyper(
        steps=int(dcfg["steps"]),
        batch_size=int(dcfg["batch_size"]),
        cache_size=int(dcfg["cache_size"]),
        rebuild_period=int(dcfg["rebuild_period"]),
        time_proposal=dcfg.get("time_proposal", "inverse_square"),
        grad_penalty=float(dcfg.get("grad_penalty", 0.0)),
        cutoff_percentile=float(dcfg.get("cutoff_percentile", 99.5)),
        cutoff_mode=dcfg.get("cutoff_mode", "cosine"),
        lr_max=float(dcfg["lr_max"]),
        lr_min=float(dcfg["lr_min"]),
        lr_schedule=dcfg.get("lr_schedule", "cosine"),
        optimizer=dcfg.get("optimizer", "adam"),
        clip_norm=float(dcfg.get("clip_norm", 1.0)),
        seed=seed,
    )
    head, report, cutoff_spec = stad.distill(field, data, head, hyper)
    if report["aborted"]:
        raise CliError("distillation aborted on non-finite loss", EXIT_NUMERIC)
    meta = {
        "seed": seed,
        "steps": report["steps"],
        "final_loss": report["final_loss"],
        "cutoff_radius": cutoff_spec.radius,
        "cutoff_mode": cutoff_spec.mode,
        "cutoff_percentile": cutoff_spec.percentile,
    }
    netmod.save_checkpoint(head, os.path.join(out_dir, "head.ckpt"), schedule_spec_id=field.schedule.spec_id(), metadata=meta)
    out_report = {k: v for k, v in report.items() if k != "loss_curve"}
    with open(os.path.join(out_dir, "distill_report.json"), "w") as fh:
        json.dump(out_report, fh, indent=1, sort_keys=True)
    _write_loss_csv(report["loss_curve"], os.path.join(out_dir, "distill_loss.csv"))
    write_effective_config(cfg, out_dir)
    print(
        "distilled: {steps} steps, final loss {final_loss:.6g}, R={R:.4g}, "
        "fraction outside 2R {fraction_outside_2R:.3g}, cache {wall_time_cache_s:.2f}s, "
        "train {wall_time_train_s:.2f}s".format(**out_report)
    )
    return EXIT_OK


def cmd_direct_distill(cfg, out_dir, threads, mode):
    seed = int(cfg["seed"])
    _, field, header = _load_teacher(cfg, out_dir)
    data = _normalized_dataset_like_teacher(cfg, header, seed)
    hcfg = cfg["head"]
    head = _build_net(hcfg, data.dim, 1, data.context_dim, seed + 2)
    dcfg = cfg["distill"]
    hyper = stad.SteinHyper(
        steps=int(dcfg["steps"]),
        batch_size=int(dcfg["batch_size"]),
        cache_size=int(dcfg["cache_size"]),
        rebuild_period=int(dcfg["rebuild_period"]),
        time_proposal=dcfg.get("time_proposal", "inverse_square"),
        lr_max=float(dcfg["lr_max"]),
        lr_min=float(dcfg["lr_min"]),
        lr_schedule=dcfg.get("lr_schedule", "cosine"),
        optimizer=dcfg.get("optimizer", "adam"),
        clip_norm=float(dcfg.get("clip_norm", 1.0)),
        seed=seed,
    )
    budget = dcfg.get("time_budget_s")
    head, report = train.train_direct_divergence(head, field, data, mode, hyper, time_budget_s=budget)
    if report["aborted"]:
        raise CliError("direct regression aborted on non-finite loss", EXIT_NUMERIC)
    meta = {"seed": seed, "steps": report["steps"], "final_loss": report["final_loss"], "mode": mode}
    netmod.save_checkpoint(
        head, os.path.join(out_dir, f"head_{mode}.ckpt"), schedule_spec_id=field.schedule.spec_id(), metadata=meta
    )
    out_report = {k: v for k, v in report.items() if k != "loss_curve"}
    with open(os.path.join(out_dir, f"direct_report_{mode}.json"), "w") as fh:
        json.dump(out_report, fh, indent=1, sort_keys=True)
    write_effective_config(cfg, out_dir)
    print("direct-distill {mode}: {steps} steps, final loss {final_loss:.6g}".format(**out_report))
    return EXIT_OK


def _analytic_field_from_cfg(cfg):
    tcfg = cfg["target"]
    if tcfg.get("kind") != "gaussian":
        raise CliError("analytic likelihood field needs a gaussian target", EXIT_CONFIG)
    sched = build_schedule(cfg)
    return analytic_gaussian_field(np.asarray(tcfg["mean"], float), np.asarray(tcfg["covariance"], float), sched)


def _backend_from_cfg(bcfg, cfg, out_dir, field):
    kind = bcfg["kind"]
    spec = odelik.BackendSpec(
        kind=kind,
        n_probes=int(bcfg.get("n_probes", 1)),
        probe_kind=bcfg.get("probe_kind", "rademacher"),
        seed=int(bcfg.get("seed", cfg["seed"])),
        refresh_period=int(bcfg.get("refresh_period", 6)),
        redraw_probes_each_eval=bool(bcfg.get("redraw_probes_each_eval", False)),
        head=None,
        cutoff=None,
        use_baseline=bool(bcfg.get("use_baseline", True)),
        tag=bcfg.get("tag"),
    )
    if kind == "stad":
        name = bcfg.get("head_checkpoint", "head.ckpt")
        path = name if os.path.isabs(name) else os.path.join(out_dir, name)
        if not os.path.exists(path):
            raise CliError(f"head checkpoint not found: {path}", EXIT_MISSING)
        head, header = netmod.load_checkpoint(path)
        if getattr(field, "x_dim", head.x_dim) != head.x_dim:
            raise CliError("head checkpoint dimension does not match field", EXIT_SHAPE)
        meta = header.get("metadata", {})
        cut = None
        if meta.get("cutoff_radius"):
            cut = stad.CutoffSpec(
                radius=float(meta["cutoff_radius"]),
                mode=meta.get("cutoff_mode", "cosine"),
                percentile=float(meta.get("cutoff_percentile", 99.5)),
            )
        spec = odelik.BackendSpec(
            kind="stad",
            seed=spec.seed,
            head=head,
            cutoff=cut,
            use_baseline=spec.use_baseline,
            tag=bcfg.get("tag"),
        )
    return spec


def _test_points(cfg, target, data):
    lcfg = cfg["likelihood"]
    n = int(lcfg["n_test"])
    tseed = int(lcfg["test_seed"])
    if target is not None:
        if target.context_maps is not None:
            from ._rng import child_rng

            ctx = child_rng(tseed, "test-contexts").standard_normal((n, target.context_dim))
            ds = target.sample(n, tseed, c=ctx)
            return ds.samples, ds.contexts, target
        ds = target.sample(n, tseed)
        return ds.samples, None, target
    idx = np.arange(min(n, data.n))
    return data.samples[idx], None if data.contexts is None else data.contexts[idx], None


def cmd_loglik(cfg, out_dir, threads):
    seed = int(cfg["seed"])
    lcfg = cfg["likelihood"]
    target, data = build_target(cfg, seed)
    use_analytic = lcfg.get("field", "teacher") == "analytic"
    if use_analytic:
        field = _analytic_field_from_cfg(cfg)
        shift = scale = cshift = cscale = None
        base = lambda xT: field.marginal_log_density(xT, field.schedule.T)
    else:
        _, field, header = _load_teacher(cfg, out_dir)
        shift, scale, cshift, cscale = _normalization_from_header(header)
        base = None

    X, contexts, _ = _test_points(cfg, target, data)
    logdet = 0.0
    if scale is not None:
        X = (X - shift) / scale
        logdet = float(np.sum(np.log(scale)))
        if contexts is not None:
            contexts = (contexts - cshift) / cscale

    backends = [_backend_from_cfg(b, cfg, out_dir, field) for b in lcfg["backends"]]
    os.makedirs(out_dir, exist_ok=True)
    rows = []
    try:
        for spec in backends:
            reports = odelik.evaluate_batch(
                field, spec, X, rtol=float(lcfg["rtol"]), atol=float(lcfg["atol"]),
                contexts=contexts, threads=threads, base_log_density=base,
            )
            for i, r in enumerate(reports):
                logp = r.log_prob - logdet
                rows.append(
                    {
                        "backend": r.backend,
                        "index": i,
                        "log_prob": logp,
                        "bpd": odelik.bits_per_dimension(logp, X.shape[1], float(lcfg.get("offset_bits", 0.0))),
                        "nfe": r.nfe,
                        "n_accepted": r.n_accepted,
                        "n_rejected": r.n_rejected,
                        "matvecs": r.matvecs,
                        "wall_s": r.wall_time,
                    }
                )
    except odelik.StiffnessError as e:
        raise CliError(f"likelihood integration aborted: {e}", EXIT_NUMERIC)
    _write_loglik_csv(rows, os.path.join(out_dir, "loglik.csv"))
    write_effective_config(cfg, out_dir)
    print(f"wrote {len(rows)} likelihood rows to {os.path.join(out_dir, 'loglik.csv')}")
    return EXIT_OK


def _write_loglik_csv(rows, path):
    import csv

    cols = ["backend", "index", "log_prob", "bpd", "nfe", "n_accepted", "n_rejected", "matvecs", "wall_s"]
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=cols)
        writer.writeheader()
        for row in rows:
            out = dict(row)
            out["log_prob"] = repr(float(row["log_prob"]))
            out["bpd"] = repr(float(row["bpd"]))
            writer.writerow(out)


def cmd_report(cfg, out_dir, threads):
    seed = int(cfg["seed"])
    lcfg = cfg["likelihood"]
    target, data = build_target(cfg, seed)
    use_analytic = lcfg.get("field", "teacher") == "analytic"
    if use_analytic:
        field = _analytic_field_from_cfg(cfg)
        shift = scale = cshift = cscale = None
        base = lambda xT: field.marginal_log_density(xT, field.schedule.T)
    else:
        _, field, header = _load_teacher(cfg, out_dir)
        shift, scale, cshift, cscale = _normalization_from_header(header)
        base = None
    X, contexts, _ = _test_points(cfg, target, data)
    if scale is not None:
        X = (X - shift) / scale
        if contexts is not None:
            contexts = (contexts - cshift) / cscale
    backends = [_backend_from_cfg(b, cfg, out_dir, field) for b in lcfg["backends"]]
    try:
        rows, per_sample = odelik.compare_backends(
            field, X, backends, rtol=float(lcfg["rtol"]), atol=float(lcfg["atol"]),
            contexts=contexts, threads=threads, base_log_density=base,
        )
    except odelik.StiffnessError as e:
        raise CliError(f"likelihood integration aborted: {e}", EXIT_NUMERIC)
    os.makedirs(out_dir, exist_ok=True)
    odelik.metrics_rows_to_csv(rows, os.path.join(out_dir, "metrics.csv"))
    exact_tag = next(tag for tag in per_sample if tag == "exact")
    exact_logp = np.array([r.log_prob for r in per_sample[exact_tag]])
    import csv

    for tag, reports in per_sample.items():
        if tag == exact_tag:
            continue
        resid = exact_logp - np.array([r.log_prob for r in reports])
        hist = odelik.residual_histogram(resid)
        safe = tag.replace("(", "_").replace(")", "")
        with open(os.path.join(out_dir, f"residual_hist_{safe}.csv"), "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=["bin_left", "bin_right", "count"])
            writer.writeheader()
            for row in hist:
                writer.writerow(row)
    write_effective_config(cfg, out_dir)
    for row in rows:
        print(
            "{backend:>16}: mean {mean_resid:+.4f} std {std_resid:.4f} mae {mae:.4f} "
            "speedup {speedup:.2f}x rnfe {rnfe:.3f}".format(**row)
        )
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="stadlab", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="command", required=True)
    for name in ("bench-trace", "train-score", "train-flow", "distill", "loglik", "report"):
        sp = sub.add_parser(name)
        _common_args(sp)
    dd = sub.add_parser("direct-distill")
    _common_args(dd)
    dd.add_argument("--mode", choices=["h1", "h1_plus_b"], default="h1")
    return p


def _common_args(sp):
    sp.add_argument("--config", required=True, help="JSON experiment config")
    sp.add_argument("--seed", type=int, default=None, help="override config seed")
    sp.add_argument("--out", default=None, help="output directory (default: run/ next to config)")
    sp.add_argument("--threads", type=int, default=None, help="worker cap (default: STAD_LAB_THREADS or all cores)")
    sp.add_argument("--set", action="append", default=[], metavar="PATH=VALUE", help="dotted-path config override")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        apply_overrides(cfg, args.set)
        if args.seed is not None:
            cfg["seed"] = int(args.seed)
        out_dir = args.out or os.path.join(os.path.dirname(os.path.abspath(args.config)), "run")
        if args.command == "bench-trace":
            return cmd_bench_trace(cfg, out_dir, args.threads)
        if args.command == "train-score":
            return _train_teacher(cfg, out_dir, flow=False)
        if args.command == "train-flow":
            return _train_teacher(cfg, out_dir, flow=True)
        if args.command == "distill":
            return cmd_distill(cfg, out_dir, args.threads)
        if args.command == "direct-distill":
            return cmd_direct_distill(cfg, out_dir, args.threads, args.mode)
        if args.command == "loglik":
            return cmd_loglik(cfg, out_dir, args.threads)
        if args.command == "report":
            return cmd_report(cfg, out_dir, args.threads)
        raise CliError(f"unknown command {args.command}", EXIT_CONFIG)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code
    except netmod.ShapeError as e:
        print(f"error: shape mismatch: {e}", file=sys.stderr)
        return EXIT_SHAPE
    except (stad.ConfigError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
