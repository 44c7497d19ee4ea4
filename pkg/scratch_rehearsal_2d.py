"""Criterion-7 rehearsal: 2-D mixture, trained teacher, all backends."""
import time

import numpy as np

from stadlab import dynamics as dyn, net as nt, odelik as ol, stad, targets as tg, train as tr

t_all = time.time()
sched = dyn.ScheduleSpec("vp")
target = tg.make_gaussian_mixture(
    [0.5, 0.5],
    [[-1.5, 0.0], [1.5, 0.5]],
    [[[0.5, 0.1], [0.1, 0.3]], [[0.4, -0.1], [-0.1, 0.6]]],
)
data = target.sample(20000, seed=0)

teacher_net = nt.FieldNet(2, 2, [128, 128, 128], activation="tanh", time_embedding="append_raw_t", seed=1)
hyp = tr.TrainHyper(steps=6000, batch_size=256, lr_max=1e-3, lr_min=1e-5, seed=0)
t0 = time.time()
teacher_net, rep = tr.train_score_dsm(teacher_net, data, sched, hyp)
print(f"teacher: {time.time()-t0:.0f}s final_loss={rep['final_loss']:.4f}")
field = dyn.field_from_score_net(sched, teacher_net)

# quick teacher sanity: score at data-dense points close to analytic
Xs = target.sample(400, seed=9).samples
s_true = target.score(Xs)
s_hat = field.score(Xs, sched.eps)
print("teacher score err at eps (median):", np.median(np.abs(s_hat - s_true)))

head = nt.FieldNet(2, 1, [128, 128, 128], activation="tanh", time_embedding="append_log_t", seed=2)
shyp = stad.SteinHyper(
    steps=6000, batch_size=256, cache_size=32768, rebuild_period=2000,
    time_proposal="uniform", lr_max=1e-3, lr_min=1e-8, seed=0,
)
t0 = time.time()
head, drep, cut = stad.distill(field, data, head, shyp)
print(f"distill: {time.time()-t0:.0f}s final_loss={drep['final_loss']:.4f} R={drep['R']:.3f}")

X_test = target.sample(128, seed=777).samples
backends = [
    ol.BackendSpec(kind="exact"),
    ol.BackendSpec(kind="hutchinson", n_probes=1, seed=3),
    ol.BackendSpec(kind="hutchinson", n_probes=2, seed=3),
    ol.BackendSpec(kind="hutchinson", n_probes=4, seed=3),
    ol.BackendSpec(kind="hutchpp", n_probes=1, seed=3),
    ol.BackendSpec(kind="xtrace", n_probes=1, seed=3),
    ol.BackendSpec(kind="stad", head=head, cutoff=cut, seed=3),
]
t0 = time.time()
rows, per = ol.compare_backends(field, X_test, backends, threads=1)
print(f"compare: {time.time()-t0:.0f}s")
for r in rows:
    print(
        f"{r['backend']:>14}: mean {r['mean_resid']:+.4f} std {r['std_resid']:.4f} "
        f"mae {r['mae']:.4f} speedup {r['speedup']:.2f} rnfe {r['rnfe']:.3f} wall {r['wall_s']:.1f}s"
    )
nfe_h1 = sum(r.nfe for r in per["hutchinson(1)"])
nfe_st = sum(r.nfe for r in per["stad"])
mae_h1 = rows[1]["mae"]
mae_st = [r for r in rows if r["backend"] == "stad"][0]["mae"]
print(f"\ncriterion 7a: stad mae {mae_st:.4f} < h1 mae {mae_h1:.4f} ? {mae_st < mae_h1}")
print(f"criterion 7b: stad nfe {nfe_st} < h1 nfe {nfe_h1} ? rNFE={nfe_st/nfe_h1:.3f} {nfe_st < nfe_h1}")

# also vs exact log-density of the target itself (teacher quality, informative only)
exact_lp = np.array([r.log_prob for r in per["exact"]])
true_lp = target.log_density(X_test)
print("teacher |exact-backend - true| mean:", np.abs(exact_lp - true_lp).mean())
print(f"total {time.time()-t_all:.0f}s")
