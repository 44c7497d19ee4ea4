"""Criterion-7 rehearsal at 26-dim: conditional task, teacher, backends."""
import time

import numpy as np

from stadlab import dynamics as dyn, net as nt, odelik as ol, stad, targets as tg, train as tr

t_all = time.time()
sched = dyn.ScheduleSpec("vp")
target, data = tg.make_cosmos_like(seed=0, n_samples=40000)
data = data.normalized()
D, C = data.dim, data.context_dim

teacher_net = nt.FieldNet(D, D, [256, 256, 256], activation="tanh", time_embedding="append_raw_t", context_dim=C, seed=1)
hyp = tr.TrainHyper(steps=6000, batch_size=256, lr_max=1e-3, lr_min=1e-5, seed=0)
t0 = time.time()
teacher_net, rep = tr.train_score_dsm(teacher_net, data, sched, hyp)
print(f"teacher: {time.time()-t0:.0f}s final_loss={rep['final_loss']:.4f}", flush=True)
field = dyn.field_from_score_net(sched, teacher_net)

head = nt.FieldNet(D, 1, [256, 256, 256], activation="tanh", time_embedding="append_log_t", context_dim=C, seed=2)
shyp = stad.SteinHyper(
    steps=5000, batch_size=256, cache_size=32768, rebuild_period=2000,
    time_proposal="uniform", grad_penalty=1e-3, lr_max=1e-3, lr_min=1e-8, seed=0,
)
t0 = time.time()
head, drep, cut = stad.distill(field, data, head, shyp)
print(f"distill: {time.time()-t0:.0f}s final_loss={drep['final_loss']:.4f} R={drep['R']:.3f} frac_out={drep['fraction_outside_2R']:.4f}", flush=True)

n_test = 64
ds_test = target.sample(n_test, 999, c=data.contexts[:n_test] * 0.0 + data.contexts[:n_test])
# test points drawn fresh but through the teacher's normalization
X_test = (ds_test.samples - data.shift) / data.scale
C_test = data.contexts[:n_test]

backends = [
    ol.BackendSpec(kind="exact"),
    ol.BackendSpec(kind="hutchinson", n_probes=1, seed=3),
    ol.BackendSpec(kind="hutchinson", n_probes=4, seed=3),
    ol.BackendSpec(kind="stad", head=head, cutoff=cut, seed=3),
]
t0 = time.time()
rows, per = ol.compare_backends(field, X_test, backends, contexts=C_test, threads=1)
print(f"compare: {time.time()-t0:.0f}s", flush=True)
for r in rows:
    print(
        f"{r['backend']:>14}: mean {r['mean_resid']:+.4f} std {r['std_resid']:.4f} "
        f"mae {r['mae']:.4f} speedup {r['speedup']:.2f} rnfe {r['rnfe']:.3f} wall {r['wall_s']:.1f}s"
    )
nfe_h1 = sum(r.nfe for r in per["hutchinson(1)"])
nfe_st = sum(r.nfe for r in per["stad"])
mae_h1 = [r for r in rows if r["backend"] == "hutchinson(1)"][0]["mae"]
mae_st = [r for r in rows if r["backend"] == "stad"][0]["mae"]
print(f"\n26d criterion 7a: stad mae {mae_st:.4f} < h1 mae {mae_h1:.4f} ? {mae_st < mae_h1}")
print(f"26d criterion 7b: stad nfe {nfe_st} vs h1 nfe {nfe_h1} rNFE={nfe_st/nfe_h1:.3f} {nfe_st < nfe_h1}")
print(f"total {time.time()-t_all:.0f}s")
