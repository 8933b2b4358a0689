import math

import numpy as np
import pytest

from partpose import losses as L
from partpose import tensor as T
from partpose.tensor import Tensor

from conftest import numerical_grad, rel_err

W = L.LossWeights()
SEEDS = [0, 1, 2, 3, 4]


def _sig(v):
    return 1.0 / (1.0 + math.exp(-v))


# -- reconstruction ----------------------------------------------------------------
def _bce_oracle(p, t, clamp=1e-7):
    tot = 0.0
    for pi, ti in zip(p.ravel(), t.ravel()):
        pi = min(max(pi, clamp), 1 - clamp)
        tot -= ti * math.log(pi) + (1 - ti) * math.log(1 - pi)
    return tot / p.size


def test_reconstruction_trivial():
    t = np.array([0.0, 1.0, 1.0, 0.0])
    assert L.reconstruction_loss(Tensor(t), Tensor(t), t, W).item() < 1e-5
    half = Tensor(np.full(4, 0.5))
    assert L.bce(half, t).item() == pytest.approx(math.log(2), abs=1e-15)


@pytest.mark.parametrize("seed", SEEDS)
def test_reconstruction_matches_oracle(seed):
    rng = np.random.default_rng(seed)
    p, pc = rng.random(64), rng.random(64)
    t = (rng.random(64) > 0.5).astype(float)
    got = L.reconstruction_loss(Tensor(p), Tensor(pc), t, W).item()
    want = W.rec * _bce_oracle(p, t) + W.rec_c * _bce_oracle(pc, t)
    assert abs(got - want) < 1e-10


def test_reconstruction_gradient(rng):
    t = (rng.random((2, 10)) > 0.5).astype(float)
    a0, b0 = rng.normal(size=(2, 10)), rng.normal(size=(2, 10))

    def f(a, b):
        return L.reconstruction_loss(a.sigmoid(), b.sigmoid(), t, W)

    ts = [Tensor(a0.copy(), requires_grad=True), Tensor(b0.copy(), requires_grad=True)]
    f(*ts).backward()
    num = numerical_grad(lambda a, b: f(Tensor(a), Tensor(b)).item(), [a0.copy(), b0.copy()], eps=1e-6)
    for t_, g in zip(ts, num):
        assert rel_err(t_.grad, g) < 1e-4


# -- volume ------------------------------------------------------------------------
def _vol_oracle(posed, rest, lam):
    n, b, m = posed.shape
    tot = 0.0
    for k in range(b):
        sp = sum(max(0.0, max(posed[i, k, j] for i in range(n))) for j in range(m)) / m
        sr = sum(max(0.0, max(rest[i, k, j] for i in range(n))) for j in range(m)) / m
        tot += (sp - sr) ** 2
    return lam * tot / b


def test_volume_trivial():
    logits = np.random.default_rng(0).normal(size=(8, 2, 30))
    assert L.volume_loss(Tensor(logits), Tensor(logits.copy()), W).item() == 0.0
    posed = np.full((1, 1, 10), 0.2)
    rest = np.full((1, 1, 10), 0.1)
    assert L.volume_loss(Tensor(posed), Tensor(rest), W).item() == pytest.approx(10.0)


@pytest.mark.parametrize("seed", SEEDS)
def test_volume_matches_oracle(seed):
    rng = np.random.default_rng(seed)
    posed, rest = rng.normal(size=(2, 4, 3, 25))
    got = L.volume_loss(Tensor(posed), Tensor(rest), W).item()
    assert abs(got - _vol_oracle(posed, rest, W.vol)) < 1e-10 * max(1.0, got)


def test_volume_gradient(rng):
    posed0, rest0 = rng.normal(size=(2, 3, 2, 6))
    ts = [Tensor(posed0.copy(), requires_grad=True), Tensor(rest0.copy(), requires_grad=True)]
    L.volume_loss(*ts, W).backward()
    num = numerical_grad(lambda a, b: L.volume_loss(Tensor(a), Tensor(b), W).item(), [posed0.copy(), rest0.copy()], eps=1e-7)
    for t_, g in zip(ts, num):
        assert rel_err(t_.grad, g) < 1e-4


# -- vq ------------------------------------------------------------------------------
def test_vq_trivial():
    c = np.array([[0.5, -1.0, 2.0, 0.0]])
    assert L.vq_loss(Tensor(c), c).item() == 0.0
    assert L.vq_loss(Tensor([[3.0, 4.0, 0.0, 0.0]]), np.zeros((1, 4))).item() == pytest.approx(5.0)


@pytest.mark.parametrize("seed", SEEDS)
def test_vq_matches_oracle(seed):
    rng = np.random.default_rng(seed)
    z, c = rng.normal(size=(2, 6, 16))
    want = sum(math.sqrt(sum((z[b, k] - c[b, k]) ** 2 for k in range(16))) for b in range(6)) / 6
    assert abs(L.vq_loss(Tensor(z), c).item() - want) < 1e-10


def test_vq_gradient_stops_at_codebook(rng):
    book = Tensor(rng.normal(size=(4, 5)), requires_grad=True)
    z0 = rng.normal(size=(3, 5))
    z = Tensor(z0.copy(), requires_grad=True)
    idx = np.array([2, 0, 2])
    L.vq_loss(z, book.data[idx]).backward(leaves=[z, book])
    np.testing.assert_array_equal(book.grad, 0.0)
    num = numerical_grad(lambda a: L.vq_loss(Tensor(a), book.data[idx]).item(), [z0.copy()], eps=1e-6)[0]
    assert rel_err(z.grad, num) < 1e-4
    # the pull term moves only the selected codewords
    book.zero_grad()
    L.codebook_loss(Tensor(z0), book, idx, W).backward()
    assert np.all(book.grad[[1, 3]] == 0) and np.any(book.grad[[0, 2]] != 0)
    num = numerical_grad(lambda b: L.codebook_loss(Tensor(z0), Tensor(b), idx, W).item(), [book.data.copy()], eps=1e-6)[0]
    assert rel_err(book.grad, num) < 1e-4


# -- deviation -----------------------------------------------------------------------
def test_deviation_trivial():
    zeros = [Tensor(np.zeros((2, 3))) for _ in range(7)]
    assert L.deviation_loss(zeros[:3], zeros, W).item() == 0.0
    q = [Tensor([[0.3, 0.0, 0.4]])]
    assert L.deviation_loss(q, [Tensor(np.zeros((1, 3)))] * 7, W).item() == pytest.approx(0.05)


def test_deviation_zero_iff_all_residuals_zero():
    zeros = [Tensor(np.zeros((2, 3))) for _ in range(7)]
    bumped = list(zeros)
    bumped[5] = Tensor(np.array([[0, 0, 0], [0, 1e-9, 0]]))
    assert L.deviation_loss(zeros[:3], bumped, W).item() > 0


@pytest.mark.parametrize("seed", SEEDS)
def test_deviation_matches_oracle(seed):
    rng = np.random.default_rng(seed)
    q = rng.normal(size=(3, 4, 3))
    r = rng.normal(size=(7, 4, 3))
    nrm = lambda v: math.sqrt(sum(c * c for c in v))
    want = W.dev * (sum(nrm(q[i, b]) for i in range(3) for b in range(4)) / (3 * 4)
                    + sum(nrm(r[i, b]) for i in range(7) for b in range(4)) / (7 * 4))
    got = L.deviation_loss([Tensor(x) for x in q], [Tensor(x) for x in r], W).item()
    assert abs(got - want) < 1e-10


def test_deviation_gradient(rng):
    q0, r0 = rng.normal(size=(2, 3)), rng.normal(size=(2, 3))
    ts = [Tensor(q0.copy(), requires_grad=True), Tensor(r0.copy(), requires_grad=True)]
    L.deviation_loss([ts[0]], [ts[1]], W).backward()
    num = numerical_grad(lambda a, b: L.deviation_loss([Tensor(a)], [Tensor(b)], W).item(), [q0.copy(), r0.copy()], eps=1e-6)
    for t_, g in zip(ts, num):
        assert rel_err(t_.grad, g) < 1e-4


# -- location ------------------------------------------------------------------------
def _loc_oracle(pivots, pts, gt, inside, w):
    n_r, b, _ = pivots.shape

    def nearest(q, mask):
        best = None
        for j in range(pts.shape[1]):
            if mask[j]:
                d = math.sqrt(sum((q[c] - pts_b[j, c]) ** 2 for c in range(3)))
                best = d if best is None or d < best else best
        return w.loc_fallback if best is None else best

    tot = 0.0
    for i in range(n_r):
        acc = 0.0
        for k in range(b):
            pts_b = pts[k]
            others = [any(inside[j][k, m] for j in range(n_r) if j != i) for m in range(pts.shape[1])]
            acc += nearest(pivots[i, k], gt[k]) + 0.5 * (nearest(pivots[i, k], inside[i][k]) + nearest(pivots[i, k], others))
        tot += acc / b
    return w.loc / n_r * tot


def test_location_trivial():
    pts = np.array([[[0.1, 0.2, 0.3], [0.4, 0.4, 0.4]]])
    gt = np.array([[1, 1]])
    inside = [np.array([[True, True]]), np.array([[True, True]])]
    q = Tensor([[0.1, 0.2, 0.3]])
    assert L.location_loss([q, Tensor([[0.4, 0.4, 0.4]])], pts, gt, inside, W).item() == pytest.approx(0.0, abs=1e-12)
    # every set's nearest point 0.2 away
    q = Tensor([[0.1, 0.2, 0.5]])
    got = L.location_loss([q], pts, gt, [np.array([[True, False]])], W)
    # the single revolute part has no other parts: that set is empty and falls back to 1.0
    assert got.item() == pytest.approx(W.loc * (0.2 + 0.5 * (0.2 + 1.0)))
    two = L.location_loss([q, Tensor([[0.1, 0.2, 0.3]])], pts, gt, [np.array([[True, False]])] * 2, W)
    assert two.item() == pytest.approx(W.loc / 2 * (0.4 + 0.0))


def test_location_empty_sets_are_finite():
    pts = np.zeros((2, 5, 3))
    none = np.zeros((2, 5), dtype=bool)
    out = L.location_loss([Tensor(np.ones((2, 3)), requires_grad=True)] * 3, pts, none, [none] * 3, W)
    assert out.item() == pytest.approx(W.loc * 2.0)
    assert L.location_loss([], pts, none, [], W).item() == 0.0


@pytest.mark.parametrize("seed", SEEDS)
def test_location_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    b, m = 3, 40
    pts = rng.uniform(-0.5, 0.5, (b, m, 3))
    gt = (rng.random((b, m)) > 0.4).astype(np.uint8)
    inside = [rng.random((b, m)) > 0.7 for _ in range(3)]
    inside[2][1] = False
    pivots = rng.uniform(-0.5, 0.5, (3, b, 3))
    got = L.location_loss([Tensor(p) for p in pivots], pts, gt, inside, W).item()
    assert abs(got - _loc_oracle(pivots, pts, gt, inside, W)) < 1e-10


def test_location_gradient(rng):
    pts = rng.uniform(-0.5, 0.5, (2, 30, 3))
    gt = rng.random((2, 30)) > 0.5
    inside = [rng.random((2, 30)) > 0.6 for _ in range(2)]
    p0 = [rng.uniform(-0.5, 0.5, (2, 3)) for _ in range(2)]
    ts = [Tensor(p.copy(), requires_grad=True) for p in p0]
    L.location_loss(ts, pts, gt, inside, W).backward()
    num = numerical_grad(lambda a, b: L.location_loss([Tensor(a), Tensor(b)], pts, gt, inside, W).item(), [p.copy() for p in p0], eps=1e-7)
    for t_, g in zip(ts, num):
        assert rel_err(t_.grad, g) < 1e-4


# -- variance ------------------------------------------------------------------------
def _var_oracle(states, pivots, w):
    n_p = len(states)
    tot = 0.0
    for s in states:
        mu = sum(s) / len(s)
        sd = math.sqrt(sum((x - mu) ** 2 for x in s) / (len(s) - 1))
        tot += w.var_s / (sd + w.std_eps)
    for i in range(len(pivots)):
        for j in range(len(pivots)):
            if i != j:
                acc = 0.0
                for k in range(len(pivots[i])):
                    d = math.sqrt(sum((pivots[i][k][c] - pivots[j][k][c]) ** 2 for c in range(3)))
                    acc += math.exp(-d / w.v)
                tot += w.var_q * acc / len(pivots[i])
    return tot / n_p


def test_variance_trivial():
    q = Tensor(np.zeros((1, 3)))
    s = [Tensor([0.3])]
    assert L.variance_loss(s, [q, q], W).item() == pytest.approx(2 * W.var_q)
    far = L.variance_loss(s, [q, Tensor([[0.1, 0.0, 0.0]])], W).item()
    assert far == pytest.approx(2 * W.var_q * math.exp(-10.0), rel=1e-12)


def test_variance_finite_at_zero_std():
    s = [Tensor(np.full(4, 0.7), requires_grad=True)]
    out = L.variance_loss(s, [], W)
    assert np.isfinite(out.item())
    assert out.item() == pytest.approx(W.var_s / W.std_eps)
    out.backward()
    assert np.all(np.isfinite(s[0].grad))


@pytest.mark.parametrize("seed", SEEDS)
def test_variance_matches_oracle(seed):
    rng = np.random.default_rng(seed)
    states = rng.uniform(0, 2, (7, 5))
    pivots = rng.uniform(-0.05, 0.05, (3, 5, 3))
    got = L.variance_loss([Tensor(s) for s in states], [Tensor(p) for p in pivots], W).item()
    assert abs(got - _var_oracle(states, pivots, W)) < 1e-10


def test_variance_gradient(rng):
    s0 = rng.uniform(0, 1, (2, 4))
    q0 = rng.uniform(-0.02, 0.02, (2, 4, 3))
    ts = [Tensor(s0.copy(), requires_grad=True), Tensor(q0.copy(), requires_grad=True)]

    def f(s, q):
        return L.variance_loss([s[0], s[1]], [q[0], q[1]], W)

    f(*ts).backward()
    num = numerical_grad(lambda a, b: f(Tensor(a), Tensor(b)).item(), [s0.copy(), q0.copy()], eps=1e-7)
    for t_, g in zip(ts, num):
        assert rel_err(t_.grad, g) < 1e-4


# -- adversarial ---------------------------------------------------------------------
def _critic(params, slope=0.2):
    w1, b1, w2 = params

    def disc(x):
        h = T.linear(x, w1, b1).leaky_relu(slope)
        return T.linear(h, w2, Tensor(np.zeros(1))).mean(axis=-2).reshape(x.shape[0])

    return disc


def _adv_oracle(params, real, fake, x_hat, w):
    w1, b1, w2 = params
    lrelu = lambda v: v if v > 0 else 0.2 * v

    def d(cloud):
        tot = 0.0
        for p in cloud:
            for k in range(w1.shape[1]):
                tot += lrelu(sum(p[c] * w1[c, k] for c in range(4)) + b1[k]) * w2[k, 0]
        return tot / len(cloud)

    def penalty(cloud):
        sq = 0.0
        for p in cloud:
            for c in range(4):
                g = 0.0
                for k in range(w1.shape[1]):
                    pre = sum(p[cc] * w1[cc, k] for cc in range(4)) + b1[k]
                    g += w2[k, 0] * (1.0 if pre > 0 else 0.2) * w1[c, k]
                sq += (g / len(cloud)) ** 2
        return (math.sqrt(sq) - 1) ** 2

    n = len(real)
    e_fake = sum(d(c) for c in fake) / n
    e_real = sum(d(c) for c in real) / n
    gp = sum(penalty(c) for c in x_hat) / n
    return w.adv_d * (e_fake - e_real) + gp, w.adv_g * -e_fake


def test_adversarial_trivial():
    zero = lambda x: (x * 0.0).sum(axis=(-1, -2))
    real = np.random.default_rng(0).random((3, 5, 4))
    d_loss = L.discriminator_loss(zero, Tensor(real), Tensor(real), Tensor(real), W)
    assert d_loss.item() == pytest.approx(1.0)
    assert L.generator_adv_loss(zero, Tensor(real), W).item() == 0.0
    ind = lambda x: x[..., 3].mean(axis=-1)
    ones = np.ones((2, 6, 4))
    zeros = np.zeros((2, 6, 4))
    assert ind(Tensor(zeros)).mean().item() - ind(Tensor(ones)).mean().item() == -1.0


@pytest.mark.parametrize("seed", SEEDS)
def test_adversarial_matches_oracle(seed):
    rng = np.random.default_rng(seed)
    params = [rng.normal(size=(4, 5)), rng.normal(size=5), rng.normal(size=(5, 1))]
    real, fake = rng.random((2, 3, 6, 4))
    x_hat = L.interpolates(real, fake, rng)
    disc = _critic([Tensor(p) for p in params])
    d = L.discriminator_loss(disc, Tensor(real), Tensor(fake), x_hat, W).item()
    g = L.generator_adv_loss(disc, Tensor(fake), W).item()
    want_d, want_g = _adv_oracle(params, real, fake, x_hat, W)
    assert abs(d - want_d) < 1e-10
    assert abs(g - want_g) < 1e-10


def test_interpolates_lie_between(rng):
    real, fake = rng.random((2, 4, 7, 4))
    x = L.interpolates(real, fake, rng)
    lo, hi = np.minimum(real, fake), np.maximum(real, fake)
    assert np.all(x >= lo - 1e-15) and np.all(x <= hi + 1e-15)
    alpha = (x - fake) / (real - fake)
    for k in range(4):
        assert np.ptp(alpha[k]) < 1e-9


def test_adversarial_gradients(rng):
    shapes = [(4, 8), (8,), (8, 1)]
    p0 = [rng.normal(size=s) for s in shapes]
    real, fake = rng.random((2, 2, 5, 4))
    x_hat = L.interpolates(real, fake, rng)
    ts = [Tensor(p.copy(), requires_grad=True) for p in p0]
    L.discriminator_loss(_critic(ts), Tensor(real), Tensor(fake), x_hat, W).backward(leaves=ts)
    f = lambda *a: L.discriminator_loss(_critic([Tensor(x) for x in a]), Tensor(real), Tensor(fake), x_hat, W).item()
    for t_, g in zip(ts, numerical_grad(f, [p.copy() for p in p0], eps=1e-6)):
        assert rel_err(t_.grad, g) < 1e-3
    fake0 = fake.copy()
    ft = Tensor(fake0.copy(), requires_grad=True)
    L.generator_adv_loss(_critic([Tensor(p) for p in p0]), ft, W).backward()
    num = numerical_grad(lambda a: L.generator_adv_loss(_critic([Tensor(p) for p in p0]), Tensor(a), W).item(), [fake0.copy()], eps=1e-6)[0]
    assert rel_err(ft.grad, num) < 1e-4


def test_non_adversarial_losses_are_non_negative(rng):
    for _ in range(20):
        p = rng.random(16)
        t = (rng.random(16) > 0.5).astype(float)
        assert L.reconstruction_loss(Tensor(p), Tensor(p), t, W).item() >= 0
        a, b = rng.normal(size=(2, 8, 2, 10))
        assert L.volume_loss(Tensor(a), Tensor(b), W).item() >= 0
        assert L.variance_loss([Tensor(rng.random(3))], [Tensor(rng.random((3, 3)))] * 2, W).item() >= 0


def test_negative_weight_rejected():
    with pytest.raises(ValueError):
        L.LossWeights(vol=-1.0)
