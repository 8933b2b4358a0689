"""Acceptance criteria A1-A10, one PASS/FAIL line each.

A1 and A2 rerun the gradient and oracle checks from the unit-test modules as a
single timed suite; the other criteria are checked here directly.
"""
import inspect
import os
import time

import numpy as np
import pytest

import test_evaluation
import test_geometry
import test_losses
import test_nets
import test_tensor
import test_trainer
from conftest import numerical_grad, rel_err, record_acceptance
from partpose import datagen as D
from partpose import evaluation as E
from partpose import fields as F
from partpose import geometry as G
from partpose import losses as L
from partpose import tensor as T
from partpose.nets import NetConfig, init_params
from partpose.tensor import Tensor, no_grad
from partpose.trainer import TrainConfig, Trainer, fit

W = L.LossWeights()


def _run_cases(cases):
    """Run ``(name, fn)`` pairs; return the names of failing cases with their messages."""
    failed = []
    for name, fn in cases:
        kw = {}
        if "rng" in inspect.signature(fn).parameters:
            kw["rng"] = np.random.default_rng(1234)
        try:
            fn(**kw)
        except AssertionError as exc:
            failed.append(f"{name} ({exc})")
    return failed


@pytest.fixture(scope="module")
def laptops(tmp_path_factory):
    root = tmp_path_factory.mktemp("acc_laptop")
    D.generate_dataset(root, D.GenConfig(category="toy-laptop", samples=2, poses=3, test_samples=0,
                                         points=128, occ_points=256, seed=3))
    ds = D.Dataset(root)
    return [ds[k] for k in ds.indices("train")]


def test_a1_gradient_fidelity(laptops):
    cases = []
    for name in sorted(test_tensor.UNARY):
        cases.append((f"op:{name}", lambda rng, n=name: test_tensor._check_op(test_tensor.UNARY[n], [(3, 4)], rng)))
    for name, fn in [("log", lambda a: a.log()), ("sqrt", lambda a: a.sqrt())]:
        cases.append((f"op:{name}", lambda rng, f=fn: test_tensor._check_op(f, [(3, 4)], rng, positive=True)))
    for name, (fn, shapes) in sorted(test_tensor.BINARY.items()):
        cases.append((f"op:{name}", lambda rng, f=fn, s=shapes: test_tensor._check_op(f, s, rng)))
    cases += [
        ("op:linear", test_tensor.test_linear_layouts),
        ("sine mlp", test_tensor.test_sine_mlp_gradients),
        ("loss:reconstruction", test_losses.test_reconstruction_gradient),
        ("loss:volume", test_losses.test_volume_gradient),
        ("loss:vq", test_losses.test_vq_gradient_stops_at_codebook),
        ("loss:deviation", test_losses.test_deviation_gradient),
        ("loss:location", test_losses.test_location_gradient),
        ("loss:variance", test_losses.test_variance_gradient),
        ("loss:adversarial", test_losses.test_adversarial_gradients),
        ("penalty double backward", test_tensor.test_penalty_double_backward_matches_finite_differences),
        ("part pose", test_geometry.test_pose_gradients_match_finite_differences),
        ("shape logit wrt x", test_nets.test_shape_logit_gradient_wrt_coordinates),
        ("composite loss", lambda: test_trainer.test_composite_loss_gradient_matches_finite_differences(laptops)),
    ]
    t0 = time.perf_counter()
    failed = _run_cases(cases)
    elapsed = time.perf_counter() - t0
    ok = not failed and elapsed < 60
    record_acceptance("A1", ok, f"{len(cases) - len(failed)}/{len(cases)} gradient checks within tolerance "
                                f"in {elapsed:.1f} s" + (f"; failed: {failed}" if failed else ""))
    assert ok


def test_a2_oracle_equivalence():
    cases = []
    for fn in (test_losses.test_reconstruction_matches_oracle, test_losses.test_volume_matches_oracle,
               test_losses.test_vq_matches_oracle, test_losses.test_deviation_matches_oracle,
               test_losses.test_location_matches_brute_force, test_losses.test_variance_matches_oracle,
               test_losses.test_adversarial_matches_oracle):
        for seed in test_losses.SEEDS:
            cases.append((f"{fn.__name__}[{seed}]", lambda f=fn, s=seed: f(s)))
    cases += [
        ("vq nearest x1000", test_nets.test_quantize_matches_brute_force),
        ("chamfer/f-score", test_evaluation.test_chamfer_matches_brute_force),
    ]
    failed = _run_cases(cases)
    n_fixtures = len(test_losses.SEEDS)
    record_acceptance("A2", not failed, f"7 losses x {n_fixtures} fixtures at 1e-10, VQ 10^3 cases, "
                                        f"Chamfer/F-score 1e-12" + (f"; failed: {failed}" if failed else ""))
    assert not failed


def test_a3_kinematics_invariants():
    rng = np.random.default_rng(7)
    n = 100_000
    worst = {"orth": 0.0, "det": 0.0, "round_trip": 0.0, "zero_state": 0.0, "fixed": 0.0}
    for kind in G.JointKind:
        p = test_geometry._random_params(rng, n)
        b = G.compose_part_pose(kind, p)
        rot = b.rotation.data
        worst["orth"] = max(worst["orth"], np.abs(rot @ np.swapaxes(rot, -1, -2) - np.eye(3)).max())
        worst["det"] = max(worst["det"], np.abs(np.linalg.det(rot) - 1).max())
        x = rng.uniform(-1, 1, (n, 1, 3))
        back = G.inverse_apply(b, G.apply(b, x)).data
        worst["round_trip"] = max(worst["round_trip"], np.abs(back - x).max())
        if kind is G.JointKind.FIXED:
            worst["fixed"] = np.abs(b.matrix() - np.eye(4)).max()
    p = test_geometry._random_params(rng, n)
    p.s = Tensor(np.zeros(n))
    m = G.compose_part_pose(G.JointKind.REVOLUTE, p).matrix()
    worst["zero_state"] = np.abs(m - np.eye(4)).max()
    ok = all(v < 1e-9 for v in worst.values())
    record_acceptance("A3", ok, "10^5 draws per joint kind; max errors " +
                      ", ".join(f"{k} {v:.1e}" for k, v in worst.items()))
    assert ok


def test_a4_composition_bounds():
    rng = np.random.default_rng(11)
    logits = Tensor(rng.normal(scale=5.0, size=(8, 10_000)))
    hard = F.compose_logits(logits, "hard").data
    soft = F.compose_logits(logits, "soft").data
    low = (hard - soft).max()
    high = (soft - hard - np.log(8)).max()
    ok = low <= 1e-12 and high <= 1e-12
    record_acceptance("A4", ok, f"10^4 batches, N = 8: max(hard - soft) = {low:.1e}, "
                                f"max(soft - hard - ln 8) = {high:.1e}")
    assert ok


def test_a5_meshing():
    g = F.grid_coords(32)
    box = np.all(np.abs(g) <= 0.25, axis=1).astype(float).reshape(32, 32, 32)
    mesh = F.marching_cubes(box)
    vol_err = abs(mesh.volume() / 0.125 - 1)
    chi = mesh.euler_characteristic()
    r = np.linalg.norm(g, axis=1)
    sphere = F.marching_cubes(np.clip(0.5 + (0.3 - r) * 32, 0, 1).reshape(32, 32, 32))
    area_err = abs(sphere.area() / (4 * np.pi * 0.09) - 1)
    ok = vol_err < 0.05 and chi == 2 and area_err < 0.07
    record_acceptance("A5", ok, f"box volume error {100 * vol_err:.2f}%, Euler characteristic {chi}; "
                                f"sphere area error {100 * area_err:.2f}%")
    assert ok


def test_a6_gradient_penalty():
    rng = np.random.default_rng(5)
    worst_zero = 0.0
    for _ in range(20):
        w = rng.normal(size=(4, 1))
        w /= np.linalg.norm(w)
        wt = Tensor(w)
        pen = T.input_gradient_penalty(lambda x: (x @ wt).sum(), Tensor(rng.normal(size=(1, 4))))
        worst_zero = max(worst_zero, abs(pen.item()))

    shapes = [(4, 8), (8,), (8, 8), (8,), (16, 1), (1,)]
    params = [rng.normal(scale=0.6, size=s) for s in shapes]
    x_hat = rng.normal(size=(3, 6, 4))
    critic = test_tensor._small_critic
    ts = [Tensor(p.copy(), requires_grad=True) for p in params]
    T.input_gradient_penalty(critic(ts), Tensor(x_hat)).mean().backward(leaves=ts)
    f = lambda *a: T.input_gradient_penalty(critic([Tensor(v) for v in a]), Tensor(x_hat)).mean().item()
    err = max(rel_err(t.grad, g) for t, g in zip(ts, numerical_grad(f, [p.copy() for p in params])))
    ok = worst_zero <= 1e-10 and err < 1e-3
    record_acceptance("A6", ok, f"unit-norm linear critic penalty max {worst_zero:.1e}; "
                                f"width-8 critic double-backward rel err {err:.1e}")
    assert ok


def test_a9_determinism(tmp_path):
    cfg = D.GenConfig(category="toy-laptop", samples=2, poses=3, test_samples=1, test_poses=2,
                      points=256, occ_points=256, seed=21)
    D.generate_dataset(tmp_path / "a", cfg)
    D.generate_dataset(tmp_path / "b", cfg)
    names = sorted(p.name for p in (tmp_path / "a").iterdir())
    same_data = names == sorted(p.name for p in (tmp_path / "b").iterdir()) and all(
        (tmp_path / "a" / n).read_bytes() == (tmp_path / "b" / n).read_bytes() for n in names)

    ds = D.Dataset(tmp_path / "a")
    train = [ds[k] for k in ds.indices("train")]
    tcfg = TrainConfig(batch=4, stage1_steps=5, stage2_steps=5, input_points=128, occ_points=256,
                       vol_points=64, adv_points=64, seed=3)
    runs = []
    for _ in range(2):
        tr = Trainer(tcfg)
        runs.append([tr.run_step(train) for _ in range(10)])
    same_losses = all(a.keys() == b.keys() and all(np.float64(a[k]).tobytes() == np.float64(b[k]).tobytes()
                                                   for k in a)
                      for a, b in zip(*runs))
    ok = same_data and same_losses
    record_acceptance("A9", ok, f"dataset files byte-identical: {same_data}; "
                                f"10 loss vectors bitwise equal: {same_losses}")
    assert ok


def test_a10_degeneracy_guards():
    rng = np.random.default_rng(8)
    cfg = NetConfig(dtype="float64")
    model = init_params(cfg, 0)
    clouds = rng.uniform(-0.4, 0.4, (3, 256, 3))
    with no_grad():
        zero = {i: Tensor(np.zeros(3)) for i in model.dynamic}
        inf = F.infer(model, clouds, states=zero)
        u = Tensor(rng.uniform(-0.5, 0.5, (3, 64, 3)))
        _, posed = model.shape_logits(model.to_local(inf.transforms, u), inf.z_s)
        _, rest = model.shape_logits(u.reshape(1, 3, 64, 3).broadcast_to((model.n_parts, 3, 64, 3)), inf.z_s)
        vol = L.volume_loss(posed, rest, W).item()

    flat = [Tensor(np.full(4, 0.3), requires_grad=True) for _ in range(3)]
    var = L.variance_loss(flat, [], W)
    var.backward()
    var_ok = np.isfinite(var.item()) and all(np.all(np.isfinite(s.grad)) for s in flat)

    pts = rng.uniform(-0.5, 0.5, (2, 20, 3))
    none = np.zeros((2, 20), dtype=bool)
    piv = [Tensor(rng.normal(size=(2, 3)), requires_grad=True) for _ in range(2)]
    loc = L.location_loss(piv, pts, rng.random((2, 20)) > 0.5, [none, none], W)
    loc.backward()
    loc_ok = np.isfinite(loc.item()) and all(np.all(np.isfinite(p.grad)) for p in piv)

    ok = vol == 0.0 and var_ok and loc_ok
    record_acceptance("A10", ok, f"volume loss under identity poses {vol}; variance loss at std 0 = "
                                 f"{var.item():.4g} (finite {var_ok}); location loss with empty part sets = "
                                 f"{loc.item():.4g} (finite {loc_ok})")
    assert ok


# -- desk training (A7, A8) -------------------------------------------------------------------
# Full step budget for three seeds; PPD_DESK_STEPS="s1,s2" and PPD_DESK_SEEDS="0,1,2" shrink it
# for quick local runs.
DESK_STEPS = tuple(int(v) for v in os.environ.get("PPD_DESK_STEPS", "3000,2000").split(","))
DESK_SEEDS = tuple(int(v) for v in os.environ.get("PPD_DESK_SEEDS", "0,1,2").split(","))
DESK_LIMIT_S = 3600.0


def _desk_metrics(model, ds):
    out = {"iou": 0.0, "iou_all": 0.0, "epe": np.inf, "epe_identity": np.nan, "pearson": 0.0, "occupancy": 0.0}
    rep = E.evaluate(model, ds, ["epe", "occupancy"], res=32)
    out.update(epe=rep.epe, epe_identity=rep.epe_identity, occupancy=rep.occupancy_iou)
    try:
        rep = E.evaluate(model, ds, ["iou", "joint"], "canonical", res=32)
        out["iou"] = rep.iou
        rs = [abs(r) for r in rep.state_pearson.values() if np.isfinite(r)]
        out["pearson"] = max(rs) if rs else 0.0
        out["iou_all"] = E.evaluate(model, ds, ["iou"], "all", res=32).iou
    except ValueError as exc:  # nothing reconstructed: no label map
        out["error"] = str(exc)
    return out


def _desk_passes(m):
    return {"a": m["iou"] >= 70, "b": m["epe"] <= 0.5 * m["epe_identity"], "c": m["pearson"] >= 0.9,
            "d": m["occupancy"] >= 0.7}


@pytest.fixture(scope="module")
def desk_runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("desk")
    D.generate_dataset(root / "data", D.GenConfig(category="toy-laptop", samples=20, poses=50, test_samples=5,
                                                  test_poses=20, seed=0))
    ds = D.Dataset(root / "data")
    train = [ds[k] for k in ds.indices("train")]
    runs = []
    for seed in DESK_SEEDS:
        cfg = TrainConfig(batch=8, input_points=1024, occ_points=1024, vol_points=256, adv_points=512,
                          stage1_steps=DESK_STEPS[0], stage2_steps=DESK_STEPS[1], seed=seed, checkpoint_every=0)
        t0 = time.perf_counter()
        tr = fit(train, cfg, out_dir=root / f"seed{seed}")
        minutes = (time.perf_counter() - t0) / 60
        m = _desk_metrics(tr.model, ds)
        m.update(seed=seed, minutes=minutes)
        print(f"desk seed {seed}: " + ", ".join(f"{k} {v:.4g}" if isinstance(v, float) else f"{k} {v}"
                                                for k, v in m.items()))
        runs.append(m)
    return runs


def _best(runs):
    return max(runs, key=lambda m: (sum(_desk_passes(m).values()), m["iou"], m["occupancy"]))


def test_a7_desk_training(desk_runs):
    best = _best(desk_runs)
    ok_parts = _desk_passes(best)
    within_time = all(m["minutes"] * 60 <= DESK_LIMIT_S for m in desk_runs)
    ok = all(ok_parts.values()) and within_time
    record_acceptance("A7", ok, f"best seed {best['seed']} of {len(desk_runs)} ({DESK_STEPS[0]}+{DESK_STEPS[1]} steps, "
                                f"max {max(m['minutes'] for m in desk_runs):.0f} min): "
                                f"(a) canonical IoU {best['iou']:.1f} [{ok_parts['a']}], "
                                f"(b) EPE {best['epe']:.4f} vs identity {best['epe_identity']:.4f} [{ok_parts['b']}], "
                                f"(c) |r| {best['pearson']:.3f} [{ok_parts['c']}], "
                                f"(d) occupancy IoU {best['occupancy']:.3f} [{ok_parts['d']}]")
    assert ok


def test_a8_label_protocol_stability(desk_runs):
    best = _best(desk_runs)
    diff = abs(best["iou_all"] - best["iou"])
    ok = "error" not in best and diff <= 5
    record_acceptance("A8", ok, f"seed {best['seed']}: IoU all-instance map {best['iou_all']:.2f}, "
                                f"canonical map {best['iou']:.2f}, |diff| {diff:.2f}"
                                + (f" ({best['error']})" if "error" in best else ""))
    assert ok
