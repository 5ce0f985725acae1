"""Vector-Jacobian products of every primitive against finite differences and
closed-form adjoints."""

import numpy as np
import pytest
from scipy.special import erf

from lgnk import gradtape as gt
from lgnk.generator import GeneratorParams, ModeGrid
from lgnk.model import ModelConfig

TINY = gt.tiny_config()


def _scalar_through(node_fn, x0, seed=0):
    """Wrap an op into a scalar loss against a fixed random target projection."""
    rng = np.random.default_rng(seed)
    out = node_fn(gt.constant(x0))
    proj = rng.standard_normal(out.value.shape) if not np.iscomplexobj(out.value) else (
        rng.standard_normal(out.value.shape) + 1j * rng.standard_normal(out.value.shape)
    )
    return out, proj


def _fd_vjp(fn, x0, proj, h=1e-6):
    """Central-difference gradient of Re<proj, fn(x)> with respect to real x."""
    g = np.zeros_like(x0)
    it = np.nditer(x0, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        xp = x0.copy()
        xp[idx] += h
        xm = x0.copy()
        xm[idx] -= h
        fp = np.sum((np.conj(proj) * fn(xp)).real)
        fm = np.sum((np.conj(proj) * fn(xm)).real)
        g[idx] = (fp - fm) / (2 * h)
    return g


def _run_vjp(node, proj):
    """Seed the node with cotangent = proj and pull back one step."""
    return node._vjp(proj)


# ---------------------------------------------------------------------------
# Linear-op adjoint identities
# ---------------------------------------------------------------------------

def test_fft2_fwd_adjoint_is_scaled_inverse_fft():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((3, 8, 8))
    node = gt.fft2_fwd(gt.constant(x))
    g = rng.standard_normal((3, 8, 8)) + 1j * rng.standard_normal((3, 8, 8))
    (gx,) = _run_vjp(node, g)
    want = 64 * np.fft.ifft2(g, axes=(-2, -1)).real
    assert np.max(np.abs(gx - want)) < 1e-12


def test_fft2_fwd_parseval_gradient():
    # For loss = sum |fft(x)|^2 the cotangent at the spectrum is 2*fft(x), and
    # the pulled-back gradient must be 2 n^2 x.
    rng = np.random.default_rng(1)
    x = rng.standard_normal((8, 8))
    node = gt.fft2_fwd(gt.constant(x))
    (gx,) = _run_vjp(node, 2.0 * node.value)
    assert np.max(np.abs(gx - 2.0 * 64 * x)) < 1e-10


def test_fft2_inv_vjp_matches_fd():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((2, 8, 8)) + 1j * rng.standard_normal((2, 8, 8))
    node = gt.fft2_inv(gt.constant(x))
    proj = rng.standard_normal(node.value.shape)
    (gx,) = _run_vjp(node, proj)
    # Perturb real and imaginary parts separately.
    def f_re(xr):
        return np.fft.ifft2(xr + 1j * x.imag, axes=(-2, -1)).real
    def f_im(xi):
        return np.fft.ifft2(x.real + 1j * xi, axes=(-2, -1)).real
    g_re = _fd_vjp(f_re, x.real.copy(), proj)
    g_im = _fd_vjp(f_im, x.imag.copy(), proj)
    assert np.max(np.abs(gx.real - g_re)) < 1e-6
    assert np.max(np.abs(gx.imag - g_im)) < 1e-6


def test_mode_truncate_embed_roundtrip_adjoints():
    rng = np.random.default_rng(3)
    X = rng.standard_normal((2, 8, 8)) + 1j * rng.standard_normal((2, 8, 8))
    node = gt.mode_truncate(gt.constant(X), 3)
    g = rng.standard_normal((2, 3, 3)) + 1j * rng.standard_normal((2, 3, 3))
    (gX,) = _run_vjp(node, g)
    assert np.array_equal(gX[..., :3, :3], g)
    assert np.count_nonzero(gX) == g.size

    blk = gt.constant(X[..., :3, :3].copy())
    emb = gt.mode_embed(blk, full_shape=(8, 8))
    gfull = rng.standard_normal((2, 8, 8)) + 1j * rng.standard_normal((2, 8, 8))
    (gblk,) = _run_vjp(emb, gfull)
    assert np.array_equal(gblk, gfull[..., :3, :3])


def test_mode_embed_hermitian_production_and_vjp():
    rng = np.random.default_rng(4)
    n, M = 8, 3
    z = rng.standard_normal((2, n, n))
    base = gt.constant(np.fft.fft2(z, axes=(-2, -1)))
    blk_val = rng.standard_normal((2, M, M)) + 1j * rng.standard_normal((2, M, M))
    blk_val[..., 0, 0] = blk_val[..., 0, 0].real  # DC of a real field is real
    blk = gt.constant(blk_val)
    out = gt.mode_embed(blk, base=base, hermitian=True)
    # The produced spectrum must invert to a real field.
    resid = np.max(np.abs(np.fft.ifft2(out.value, axes=(-2, -1)).imag))
    assert resid < 1e-12

    proj = rng.standard_normal((2, n, n)) + 1j * rng.standard_normal((2, n, n))
    gblk, gbase = _run_vjp(out, proj)

    def apply(bv, basev):
        o = basev.copy()
        o[..., :M, :M] = bv
        si, sj, mi, mj = gt._mirror_indices(n, M)
        o[..., mi, mj] = np.conj(o[..., si, sj])
        return o

    # FD on the real part of the block.
    def f_re(b_re):
        return apply(b_re + 1j * blk_val.imag, base.value)
    def f_im(b_im):
        return apply(blk_val.real + 1j * b_im, base.value)
    want_re = _fd_vjp(lambda b: f_re(b), blk_val.real.copy(), proj)
    want_im = _fd_vjp(lambda b: f_im(b), blk_val.imag.copy(), proj)
    assert np.max(np.abs(gblk.real - want_re)) < 1e-6
    assert np.max(np.abs(gblk.imag - want_im)) < 1e-6
    # Base cotangent is zero on the block and its mirror, identity elsewhere.
    si, sj, mi, mj = gt._mirror_indices(n, M)
    assert np.all(gbase[..., :M, :M] == 0)
    assert np.all(gbase[..., mi, mj] == 0)
    outside = np.ones((n, n), dtype=bool)
    outside[:M, :M] = False
    outside[mi, mj] = False
    assert np.array_equal(gbase[..., outside], proj[..., outside])


def test_spectral_weight_mul_vjp_matches_fd():
    rng = np.random.default_rng(5)
    win, wout, M = 3, 4, 2
    X = rng.standard_normal((win, M, M)) + 1j * rng.standard_normal((win, M, M))
    W = rng.standard_normal((wout, win, M, M)) + 1j * rng.standard_normal((wout, win, M, M))
    node = gt.spectral_weight_mul(gt.constant(X), gt.constant(W))
    proj = rng.standard_normal(node.value.shape) + 1j * rng.standard_normal(node.value.shape)
    gX, gW = _run_vjp(node, proj)

    def fX(xr):
        return np.einsum("oikl,ikl->okl", W, xr + 1j * X.imag)
    want = _fd_vjp(fX, X.real.copy(), proj)
    assert np.max(np.abs(gX.real - want)) < 1e-6

    def fW(wr):
        return np.einsum("oikl,ikl->okl", wr + 1j * W.imag, X)
    wantW = _fd_vjp(fW, W.real.copy(), proj)
    assert np.max(np.abs(gW.real - wantW)) < 1e-6


def test_affine_and_gelu_and_mlp_vjps():
    rng = np.random.default_rng(6)
    x = rng.standard_normal((3, 4, 4))
    W = rng.standard_normal((5, 3))
    b = rng.standard_normal(5)
    node = gt.affine_pointwise(gt.constant(x), gt.constant(W), gt.constant(b))
    proj = rng.standard_normal(node.value.shape)
    gx, gW, gb = _run_vjp(node, proj)
    assert np.max(np.abs(gx - _fd_vjp(lambda v: np.tensordot(W, v, axes=(1, 0)) + b[:, None, None], x.copy(), proj))) < 1e-6
    assert np.max(np.abs(gW - _fd_vjp(lambda v: np.tensordot(v, x, axes=(1, 0)) + b[:, None, None], W.copy(), proj))) < 1e-6
    np.testing.assert_allclose(gb, proj.sum(axis=(1, 2)), rtol=1e-12)

    node = gt.gelu(gt.constant(x))
    proj = rng.standard_normal(x.shape)
    (gx,) = _run_vjp(node, proj)

    def gelu_ref(v):
        return 0.5 * v * (1 + erf(v / np.sqrt(2)))
    assert np.max(np.abs(gx - _fd_vjp(gelu_ref, x.copy(), proj))) < 1e-6

    W1 = rng.standard_normal((6, 3))
    b1 = rng.standard_normal(6)
    W2 = rng.standard_normal((1, 6))
    b2 = rng.standard_normal(1)
    node = gt.mlp_pointwise(gt.constant(x), gt.constant(W1), gt.constant(b1), gt.constant(W2), gt.constant(b2))
    proj = rng.standard_normal(node.value.shape)
    grads = _run_vjp(node, proj)

    def mlp_ref(v):
        h = gelu_ref(np.tensordot(W1, v, axes=(1, 0)) + b1[:, None, None])
        return np.tensordot(W2, h, axes=(1, 0)) + b2[:, None, None]
    assert np.max(np.abs(grads[0] - _fd_vjp(mlp_ref, x.copy(), proj))) < 1e-6


def test_matexp_apply_vjp_matches_fd():
    rng = np.random.default_rng(7)
    r, M = 2, 2
    grid = ModeGrid(M=M)
    C0 = rng.standard_normal((r, M, M)) + 1j * rng.standard_normal((r, M, M))
    P = rng.standard_normal((r, r))
    d = rng.standard_normal(r)
    alpha = rng.standard_normal(r)
    t = 0.9
    leaves = {"P": gt.param(P, "P"), "d": gt.param(d, "d"), "alpha": gt.param(alpha, "alpha")}
    node = gt.matexp_apply(gt.constant(C0), leaves, "sd", grid, t)
    proj = rng.standard_normal(node.value.shape) + 1j * rng.standard_normal(node.value.shape)
    gC0, gP, gd, galpha = _run_vjp(node, proj)

    from lgnk.generator import assemble
    from lgnk.numkern import expm

    def apply(Pv, dv, av, C0v):
        gp = GeneratorParams(variant="sd", P=Pv, d=dv, alpha=av)
        E = expm(assemble(gp, grid) * t)
        return np.einsum("kij,jk->ik", E, C0v.reshape(r, -1)).reshape(r, M, M)

    h = 1e-6
    fdP = _fd_vjp(lambda v: apply(v, d, alpha, C0), P.copy(), proj, h)
    assert np.max(np.abs(gP - fdP)) / max(np.max(np.abs(fdP)), 1e-12) < 1e-5
    fdd = _fd_vjp(lambda v: apply(P, v, alpha, C0), d.copy(), proj, h)
    assert np.max(np.abs(gd - fdd)) / max(np.max(np.abs(fdd)), 1e-12) < 1e-5
    fda = _fd_vjp(lambda v: apply(P, d, v, C0), alpha.copy(), proj, h)
    assert np.max(np.abs(galpha - fda)) / max(np.max(np.abs(fda)), 1e-12) < 1e-5
    fdr = _fd_vjp(lambda v: apply(P, d, alpha, v + 1j * C0.imag), C0.real.copy(), proj, h)
    fdi = _fd_vjp(lambda v: apply(P, d, alpha, C0.real + 1j * v), C0.imag.copy(), proj, h)
    assert np.max(np.abs(gC0.real - fdr)) < 1e-5
    assert np.max(np.abs(gC0.imag - fdi)) < 1e-5


def test_rel_l2_loss_gradient_formula():
    rng = np.random.default_rng(8)
    x = rng.standard_normal((2, 4, 4))
    u = rng.standard_normal((2, 4, 4))
    xn = gt.param(x, "x")
    loss = gt.rel_l2_loss(xn, u)
    grads = gt.backward(loss)
    diff = x - u
    want = diff / (np.linalg.norm(diff) * np.linalg.norm(u))
    np.testing.assert_allclose(grads["x"], want, rtol=1e-12)
    assert loss.value == pytest.approx(np.linalg.norm(diff) / np.linalg.norm(u))


def test_rel_l2_loss_rejects_zero_target():
    with pytest.raises(ValueError, match="zero norm"):
        gt.rel_l2_loss(gt.constant(np.ones((2, 2))), np.zeros((2, 2)))


# ---------------------------------------------------------------------------
# backward mechanics
# ---------------------------------------------------------------------------

def test_backward_rejects_nonscalar():
    x = gt.param(np.ones((2, 2)), "x")
    with pytest.raises(ValueError, match="scalar"):
        gt.backward(x)


def test_backward_diamond_accumulation():
    # x feeds two branches that rejoin: cotangents must sum.
    rng = np.random.default_rng(9)
    x0 = rng.standard_normal((3, 4, 4))
    W = rng.standard_normal((3, 3))
    b = np.zeros(3)
    u = rng.standard_normal((3, 4, 4))

    def loss_of(xv):
        h1 = 0.5 * xv * (1 + erf(xv / np.sqrt(2)))
        h2 = np.tensordot(W, xv, axes=(1, 0))
        s = h1 + h2
        return np.linalg.norm(s - u) / np.linalg.norm(u)

    x = gt.param(x0, "x")
    s = gt.add(gt.gelu(x), gt.affine_pointwise(x, gt.constant(W), gt.constant(b)))
    grads = gt.backward(gt.rel_l2_loss(s, u))

    h = 1e-6
    fd = np.zeros_like(x0)
    it = np.nditer(x0, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        xp = x0.copy()
        xp[idx] += h
        xm = x0.copy()
        xm[idx] -= h
        fd[idx] = (loss_of(xp) - loss_of(xm)) / (2 * h)
    assert np.max(np.abs(grads["x"] - fd)) < 1e-6


def test_concat_channels_vjp_splits():
    a = gt.param(np.ones((2, 3, 3)), "a")
    b = gt.param(np.full((1, 3, 3), 2.0), "b")
    cat = gt.concat_channels([a, b])
    g = np.arange(27.0).reshape(3, 3, 3)
    ga, gb = _run_vjp(cat, g)
    assert np.array_equal(ga, g[:2])
    assert np.array_equal(gb, g[2:])


# ---------------------------------------------------------------------------
# full-model finite-difference harness
# ---------------------------------------------------------------------------

def test_check_gradients_tiny_model_passes():
    report = gt.check_gradients(TINY, h=1e-5, tol=1e-4)
    assert report.passed, report.summary()


def test_check_gradients_impossible_tolerance_fails():
    report = gt.check_gradients(TINY, h=1e-5, tol=0.0)
    assert not report.passed


def test_check_gradients_coarse_step_fails():
    report = gt.check_gradients(TINY, h=1e-1, tol=1e-4)
    assert not report.passed
    name, err = report.worst
    assert err > 1e-4
