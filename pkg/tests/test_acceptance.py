"""Acceptance criteria 1-9, one verdict line each (printed in the terminal summary)."""
import time

import numpy as np
import pytest

from netreduce.data import write_synthetic
from netreduce.distill import DistillConfig, ReducedNet, distill_objective, kl_distill_loss, softmax_t
from netreduce.heads import FnnHead, multi_indices, pce_fit
from netreduce.linalg import lstsq, svd, sym_eig
from netreduce.nn import Conv2d, Flatten, Linear, MaxPool2d, Network, ReLU, Softplus
from netreduce.pipeline import PipelineConfig, run_pipeline, train_teacher
from netreduce.reducers import FdSketch, as_basis, as_basis_streaming, fd_update, pod_basis
from netreduce.splitter import split_network

from oracles import fd_grad, rel_err

VERDICTS = {}

COMBOS = [("pod", "pce"), ("pod", "fnn"), ("as", "pce"), ("as", "fnn")]

# seeded regression baselines (epoch 0, epoch 10) from the first full run, 200 test samples
BASELINE = {
    "teacher": 0.95,
    ("pod", "pce"): (0.95, 0.955),
    ("pod", "fnn"): (0.94, 0.93),
    ("as", "pce"): (0.945, 0.95),
    ("as", "fnn"): (0.945, 0.945),
}


def verdict(n, ok, detail):
    VERDICTS[n] = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    print(VERDICTS[n])
    return ok


def six_layer_net(rng):
    return Network([Conv2d.init(2, 3, 3, rng, padding=1), ReLU(), MaxPool2d(2), Flatten(),
                    Linear.init(48, 6, rng), Softplus()], (2, 8, 8))


def test_c1_split_compose_identity():
    t0 = time.monotonic()
    rng = np.random.default_rng(1)
    net = six_layer_net(rng)
    x = rng.normal(size=(20, 2, 8, 8))
    full = net(x)
    worst = max(np.abs(p.post(p.pre(x)) - full).max() for p in (split_network(net, l) for l in range(1, 6)))
    dt = time.monotonic() - t0
    assert verdict(1, worst <= 1e-12 and dt < 5, f"max |diff| {worst:.1e} over l = 1..5, {dt:.2f} s")


def test_c2_linear_algebra_oracles():
    t0 = time.monotonic()
    rng = np.random.default_rng(2)
    worst_svd = worst_eig = 0.0
    for _ in range(100):
        m, n = rng.integers(1, 25, size=2)
        a = rng.normal(size=(m, n))
        s = svd(a)
        k = min(m, n)
        rec = s.U * s.S @ s.Vt
        worst_svd = max(worst_svd, np.abs(rec - a).max() / max(1.0, np.abs(a).max()),
                        np.abs(s.U.T @ s.U - np.eye(k)).max(), np.abs(s.Vt @ s.Vt.T - np.eye(k)).max())
        assert np.all(np.diff(s.S) <= 0) and np.all(s.S >= 0)
        b = rng.normal(size=(n, n))
        b = b + b.T
        e = sym_eig(b)
        worst_eig = max(worst_eig, np.abs(e.vectors * e.values @ e.vectors.T - b).max(),
                        np.abs(e.vectors.T @ e.vectors - np.eye(n)).max())
    snaps = rng.normal(size=(30, 20))
    pmap = pod_basis(snaps, 7)
    resid = np.sum((snaps - pmap.basis.T @ (pmap.basis @ snaps)) ** 2)
    pod_gap = abs(resid - np.sum(np.linalg.svd(snaps, compute_uv=False)[7:] ** 2))
    x = lstsq(np.c_[np.ones(10), rng.normal(size=10)], 3 + np.zeros(10))
    dt = time.monotonic() - t0
    ok = worst_svd <= 1e-10 and worst_eig <= 1e-10 and pod_gap <= 1e-8 and abs(x[0] - 3) <= 1e-8 and dt < 30
    assert verdict(2, ok, f"svd {worst_svd:.1e}, eig {worst_eig:.1e}, POD residual gap {pod_gap:.1e}, {dt:.2f} s")


def test_c3_gradients():
    t0 = time.monotonic()
    rng = np.random.default_rng(3)
    errs = {}
    # every layer kind, inputs and parameters
    net = six_layer_net(rng)
    x = rng.normal(size=(3, 2, 8, 8))
    w = rng.normal(size=(3, 6))
    bundle = net.backward(net.forward(x), w)
    errs["layers/input"] = rel_err(bundle.input, fd_grad(lambda: float(np.sum(net(x) * w)), x))
    for layer, grads in zip(net.layers, bundle.params):
        for name, value in layer.params().items():
            errs[f"{layer.kind}.{name}"] = rel_err(grads[name], fd_grad(lambda: float(np.sum(net(x) * w)), value))
    # heads
    z = rng.normal(size=(6, 3))
    wz = rng.normal(size=(6, 4))
    fnn = FnnHead.init(3, 5, 4, rng, depth=2)
    g, g_z = fnn.backward(fnn.forward(z)[1], wz)
    errs["fnn"] = max(rel_err(gi, fd_grad(lambda: float(np.sum(fnn(z) * wz)), p)) for gi, p in zip(g, fnn.weights))
    pce = pce_fit(rng.normal(size=(30, 3)), rng.normal(size=(30, 4)), 2)
    (g_c,), _ = pce.backward(pce.forward(z)[1], wz)
    errs["pce"] = rel_err(g_c, fd_grad(lambda: float(np.sum(pce(z) * wz)), pce.coefficients))
    # combined distillation loss through head, projection and pre-model
    parts = split_network(net, 4)
    feats = parts.pre(x).reshape(3, -1)
    student = ReducedNet(parts.pre, pod_basis(feats.T, 3), FnnHead.init(3, 5, 6, rng))
    y_t, labels = net(x), np.array([0, 4, 2])

    def loss():
        return distill_objective(y_t, student(x), labels, 4.0, 0.5)[0]

    acts = student.pre.forward(x)
    f = acts[-1].reshape(3, -1)
    y_s, cache = student.head.forward(student.map.project_batch(f))
    g_y = distill_objective(y_t, y_s, labels, 4.0, 0.5)[3]
    g_head, g_z = student.head.backward(cache, g_y)
    errs["distill/head"] = max(rel_err(gi, fd_grad(loss, p)) for gi, p in zip(g_head, student.head.weights))
    errs["distill/projection"] = rel_err(g_z.T @ f, fd_grad(loss, student.map.basis))
    pre_bundle = student.pre.backward(acts, (g_z @ student.map.basis).reshape(acts[-1].shape))
    conv = student.pre.layers[0]
    errs["distill/pre"] = rel_err(pre_bundle.params[0]["kernels"], fd_grad(loss, conv.kernels))
    worst = max(errs, key=errs.get)
    dt = time.monotonic() - t0
    assert verdict(3, errs[worst] <= 1e-4 and dt < 60,
                   f"{len(errs)} checks, worst {worst} {errs[worst]:.1e}, {dt:.2f} s")


def test_c4_active_subspace_recovery():
    rng = np.random.default_rng(4)
    n, r = 30, 3
    a = rng.normal(size=n)
    a /= np.linalg.norm(a)
    x = rng.normal(size=(500, n))
    grads = 2 * (x @ a)[:, None] * a[None]  # gradient of (a.x)^2
    cos = abs(as_basis(grads, 1).basis[0] @ a)
    dirs, _ = np.linalg.qr(rng.normal(size=(n, r)))
    g2 = (rng.normal(size=(500, r)) * [10.0, 6.0, 4.0]) @ dirs.T + 0.05 * rng.normal(size=(500, n))
    exact, sketched = as_basis(g2, r), as_basis_streaming(g2, r, 2 * r)
    angle = float(np.arccos(np.clip(np.linalg.svd(exact.basis @ sketched.basis.T, compute_uv=False).min(), -1, 1)))
    assert verdict(4, cos >= 0.999 and angle <= 0.05, f"|cos| {cos:.6f}, FD vs exact angle {angle:.4f} rad")


def power_norm(m, iters=500):
    v = np.random.default_rng(0).normal(size=m.shape[0])
    for _ in range(iters):
        v = m @ v
        v /= np.linalg.norm(v)
    return float(np.linalg.norm(m @ v))


def test_c5_frequent_directions_guarantee():
    rng = np.random.default_rng(5)
    a = rng.normal(size=(200, 30))
    ratios = []
    for ell in (8, 16, 32):
        sk = FdSketch(30, ell)
        for row in a:
            fd_update(sk, row)
        ratios.append(power_norm(a.T @ a - sk.B.T @ sk.B) / (np.sum(a * a) / ell))
    assert verdict(5, max(ratios) <= 1.0, "error / bound at l = 8, 16, 32: " + ", ".join(f"{q:.3f}" for q in ratios))


def test_c6_pce_exactness():
    rng = np.random.default_rng(6)
    worst, monotone = 0.0, True
    for r in (1, 2, 3, 4):
        z = rng.normal(size=(150, r))
        for p in (1, 2, 3):
            for family in ("hermite", "legendre"):
                zz = z if family == "hermite" else rng.uniform(-1, 1, size=(150, r))
                y = sum(rng.normal() * np.prod(zz ** np.array(alpha), axis=1) for alpha in multi_indices(r, p))
                res = [np.linalg.norm(pce_fit(zz, y[:, None], q, family)(zz) - y[:, None]) / np.sqrt(len(y))
                       for q in range(0, p + 1)]
                worst = max(worst, res[-1] / max(1.0, np.abs(y).max()))
                monotone &= all(b <= a + 1e-9 for a, b in zip(res, res[1:]))
    assert verdict(6, worst <= 1e-8 and monotone, f"worst relative residual {worst:.1e}, non-increasing in p: {monotone}")


def test_c7_distillation_identities():
    rng = np.random.default_rng(7)
    y = rng.normal(size=(5, 4)) * 3
    y2 = rng.normal(size=(5, 4)) * 3
    labels = rng.integers(0, 4, size=5)
    zero = max(np.max(kl_distill_loss(y, y, T)) for T in (1.0, 2.0, 4.0))
    base = np.asarray(kl_distill_loss(y, y2, 2.0))
    scale = np.abs(np.asarray(kl_distill_loss(2 * y, 2 * y2, 4.0)) - 4 * base).max() / np.abs(base).max()
    l1, l_d, l_s, _ = distill_objective(y, y2, labels, 3.0, 1.0)
    l0, _, l_s0, _ = distill_objective(y, y2, labels, 3.0, 0.0)
    ends = max(abs(l1 - l_d), abs(l0 - l_s0))
    uniform = np.abs(softmax_t([5.0, 1.0, -3.0, 0.0], 1e6) - 0.25).max()
    ok = zero == 0.0 and scale <= 1e-12 and ends == 0.0 and uniform <= 1e-5
    assert verdict(7, ok, f"L_D at equal logits {zero}, T^2 scaling rel {scale:.1e}, "
                          f"lambda endpoints {ends}, T = 1e6 off-uniform {uniform:.1e}")


def end_to_end(root):
    """Criterion-8 experiment under ``root``; returns per-combo reports and seconds."""
    t0 = time.monotonic()
    write_synthetic(root / "data", seed=0)
    _, teacher_acc = train_teacher(root / "data", root / "teacher.json", epochs=60, lr=0.02, seed=0)
    reports = {}
    for reducer, head in COMBOS:
        cfg = PipelineConfig(model=str(root / "teacher.json"), data=str(root / "data"), cut_layer=6, rank=16,
                             reducer=reducer, head=head, distill=DistillConfig(epochs=10), seed=0)
        reports[reducer, head] = run_pipeline(cfg, root / f"{reducer}_{head}")
    return teacher_acc, reports, time.monotonic() - t0


@pytest.fixture(scope="module")
def root(tmp_path_factory):
    return tmp_path_factory.mktemp("e2e")


@pytest.fixture(scope="module")
def experiment(root):
    return end_to_end(root)


@pytest.mark.slow
def test_c8_end_to_end(experiment):
    teacher_acc, reports, seconds = experiment
    lines = [f"teacher {teacher_acc:.3f}, {seconds:.0f} s total"]
    close = storage = True
    for key, rep in reports.items():
        s = rep.storage
        close &= abs(rep.final_acc - rep.teacher_acc) <= 0.05
        storage &= s["total"] <= s["teacher_total"] / 2
        lines.append(f"{key[0].upper()}+{key[1].upper()} epoch 0 {rep.epoch0_acc:.3f} -> {rep.final_acc:.3f}, "
                     f"{s['total']} B ({s['compression_ratio']:.2f}x)")
    order = reports["pod", "fnn"].epoch0_acc > reports["as", "pce"].epoch0_acc
    checks = {"teacher >= 90%": teacher_acc >= 0.9, "within 5 points": close, "storage <= 1/2": storage,
              "POD+FNN epoch 0 > AS+PCE epoch 0": order, "<= 600 s": seconds <= 600}
    failed = [k for k, v in checks.items() if not v]
    detail = "; ".join(lines) + ("; failed: " + ", ".join(failed) if failed else "")
    assert verdict(8, not failed, detail)


@pytest.mark.slow
def test_c8_seeded_baselines(experiment):
    teacher_acc, reports, _ = experiment
    got = {"teacher": teacher_acc, **{k: (r.epoch0_acc, r.final_acc) for k, r in reports.items()}}
    assert got == BASELINE


@pytest.mark.slow
def test_c9_determinism(experiment, root):
    # the same run repeated in place, as re-running the same commands would
    files = [root / "teacher.json", root / "teacher.bin"] + [root / f"{r}_{h}" / "report.json" for r, h in COMBOS]
    first = [f.read_bytes() for f in files]
    end_to_end(root)
    differ = [f.relative_to(root).as_posix() for f, b in zip(files, first) if f.read_bytes() != b]
    assert verdict(9, not differ, "teacher and all four report.json files byte-identical on repeat" if not differ
                   else "differ: " + ", ".join(differ))
