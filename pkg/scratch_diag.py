"""Where do StAD's extra solver steps go? Train, save, and profile."""
import os
import time

import numpy as np

from stadlab import dynamics as dyn, net as nt, odelik as ol, stad, targets as tg, train as tr
from stadlab.net import save_checkpoint, load_checkpoint

os.makedirs("scratch_ckpt", exist_ok=True)
sched = dyn.ScheduleSpec("vp")
target = tg.make_gaussian_mixture(
    [0.5, 0.5], [[-1.5, 0.0], [1.5, 0.5]],
    [[[0.5, 0.1], [0.1, 0.3]], [[0.4, -0.1], [-0.1, 0.6]]],
)
data = target.sample(20000, seed=0)

if not os.path.exists("scratch_ckpt/teacher.ckpt"):
    teacher_net = nt.FieldNet(2, 2, [128, 128, 128], activation="tanh", time_embedding="append_raw_t", seed=1)
    hyp = tr.TrainHyper(steps=6000, batch_size=256, lr_max=1e-3, lr_min=1e-5, seed=0)
    teacher_net, _ = tr.train_score_dsm(teacher_net, data, sched, hyp)
    save_checkpoint(teacher_net, "scratch_ckpt/teacher.ckpt")
else:
    teacher_net, _ = load_checkpoint("scratch_ckpt/teacher.ckpt")
field = dyn.field_from_score_net(sched, teacher_net)

if not os.path.exists("scratch_ckpt/head.ckpt"):
    head = nt.FieldNet(2, 1, [128, 128, 128], activation="tanh", time_embedding="append_log_t", seed=2)
    shyp = stad.SteinHyper(steps=6000, batch_size=256, cache_size=32768, rebuild_period=2000,
                           time_proposal="uniform", lr_max=1e-3, lr_min=1e-8, seed=0)
    head, drep, cut = stad.distill(field, data, head, shyp)
    save_checkpoint(head, "scratch_ckpt/head.ckpt", metadata={"R": cut.radius})
else:
    head, hdr = load_checkpoint("scratch_ckpt/head.ckpt")
    cut = stad.CutoffSpec(radius=hdr["metadata"]["R"])

X_test = target.sample(6, seed=777).samples
specs = {
    "exact": ol.BackendSpec(kind="exact"),
    "h1": ol.BackendSpec(kind="hutchinson", n_probes=1, seed=3),
    "stad": ol.BackendSpec(kind="stad", head=head, cutoff=cut, seed=3),
}
D = 2
for name, spec in specs.items():
    all_steps = []
    rejects = 0
    for i, x0 in enumerate(X_test):
        state = ol._DivergenceState(spec, field, D, i)

        def rhs(t, y):
            x = y[:D]
            v = field.drift(x, t)
            return np.concatenate([v, [state.divergence(x, t, None, v)]])

        y0 = np.concatenate([x0, [0.0]])
        y, st, path = ol.dopri5(rhs, y0, (sched.eps, sched.T), keep_path=True)
        ts = np.array([p[0] for p in path])
        all_steps.append(ts)
        rejects += st.n_rejected
    steps = np.concatenate(all_steps)
    hist, edges = np.histogram(steps, bins=[0.001, 0.01, 0.05, 0.1, 0.2, 0.4, 0.6, 0.8, 1.0])
    print(f"{name:>6}: accepted {len(steps)-6} rejected {rejects} | steps per t-bin {hist.tolist()}")

# per-time roughness of the ell-channel: sample dl/dt along the exact trajectory
x0 = X_test[0]
state_exact = ol._DivergenceState(specs["exact"], field, D, 0)
path_y = []


def rhs(t, y):
    x = y[:D]
    v = field.drift(x, t)
    return np.concatenate([v, [state_exact.divergence(x, t, None, v)]])


_, _, path = ol.dopri5(rhs, np.concatenate([x0, [0.0]]), (sched.eps, sched.T), keep_path=True)
ts = np.array([p[0] for p in path])
xs = np.array([p[1][:D] for p in path])
h_state = ol._DivergenceState(specs["h1"], field, D, 0)
s_state = ol._DivergenceState(specs["stad"], field, D, 0)
div_e = np.array([field.drift_divergence(x, t) for t, x in zip(ts, xs)])
div_h = np.array([h_state.divergence(x, t, None, field.drift(x, t)) for t, x in zip(ts, xs)])
div_s = np.array([s_state.divergence(x, t, None, field.drift(x, t)) for t, x in zip(ts, xs)])
for lo, hi in [(0.001, 0.01), (0.01, 0.1), (0.1, 0.4), (0.4, 1.0)]:
    m = (ts >= lo) & (ts < hi)
    if m.sum() > 2:
        de = np.abs(np.diff(div_e[m]) / np.diff(ts[m]))
        dh = np.abs(np.diff(div_h[m]) / np.diff(ts[m]))
        dsg = np.abs(np.diff(div_s[m]) / np.diff(ts[m]))
        print(f"t in [{lo},{hi}): |d(div)/dt| median exact {np.median(de):.2f} h1 {np.median(dh):.2f} stad {np.median(dsg):.2f}")
print("div values at ts[:8]:", np.round(div_e[:8], 3), np.round(div_s[:8], 3))
