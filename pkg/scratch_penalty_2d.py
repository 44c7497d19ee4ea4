"""Gradient-penalty sweep: does a smoother head cut StAD's NFE below H(1)?"""
import time

import numpy as np

from stadlab import dynamics as dyn, net as nt, odelik as ol, stad, targets as tg, train as tr

sched = dyn.ScheduleSpec("vp")
target = tg.make_gaussian_mixture(
    [0.5, 0.5],
    [[-1.5, 0.0], [1.5, 0.5]],
    [[[0.5, 0.1], [0.1, 0.3]], [[0.4, -0.1], [-0.1, 0.6]]],
)
data = target.sample(20000, seed=0)

teacher_net = nt.FieldNet(2, 2, [128, 128, 128], activation="tanh", time_embedding="append_raw_t", seed=1)
hyp = tr.TrainHyper(steps=6000, batch_size=256, lr_max=1e-3, lr_min=1e-5, seed=0)
teacher_net, rep = tr.train_score_dsm(teacher_net, data, sched, hyp)
field = dyn.field_from_score_net(sched, teacher_net)
X_test = target.sample(96, seed=777).samples

h1 = ol.BackendSpec(kind="hutchinson", n_probes=1, seed=3)
ex = ol.BackendSpec(kind="exact")
reports_ex = ol.evaluate_batch(field, ex, X_test, threads=1)
reports_h1 = ol.evaluate_batch(field, h1, X_test, threads=1)
lp_ex = np.array([r.log_prob for r in reports_ex])
lp_h1 = np.array([r.log_prob for r in reports_h1])
nfe_ex = sum(r.nfe for r in reports_ex)
nfe_h1 = sum(r.nfe for r in reports_h1)
print(f"exact nfe {nfe_ex}  h1 nfe {nfe_h1}  h1 mae {np.abs(lp_ex-lp_h1).mean():.4f}")

for l in [0.0, 1e-3, 1e-2, 5e-2]:
    head = nt.FieldNet(2, 1, [128, 128, 128], activation="tanh", time_embedding="append_log_t", seed=2)
    shyp = stad.SteinHyper(
        steps=6000, batch_size=256, cache_size=32768, rebuild_period=2000,
        time_proposal="uniform", grad_penalty=l, lr_max=1e-3, lr_min=1e-8, seed=0,
    )
    t0 = time.time()
    head, drep, cut = stad.distill(field, data, head, shyp)
    sp = ol.BackendSpec(kind="stad", head=head, cutoff=cut, seed=3)
    reports = ol.evaluate_batch(field, sp, X_test, threads=1)
    lp = np.array([r.log_prob for r in reports])
    nfe = sum(r.nfe for r in reports)
    print(
        f"l={l:g}: {time.time()-t0:.0f}s mae {np.abs(lp_ex-lp).mean():.4f} "
        f"nfe {nfe} (vs h1 {nfe_h1}) rnfe_vs_h1 {nfe/nfe_h1:.3f} loss {drep['final_loss']:.3f}"
    )
