"""Encoder -> per-mode linear latent evolution -> pointwise decoder.

``encode`` lifts T_in input frames (plus two coordinate channels) to r latent
channels through two spectral-convolution blocks, then takes the FFT and
keeps the one-sided low-mode block C0 in C^{r x M x M}. ``spectral_step``
advances C0 with the per-mode matrix exponential, writes it back into the
full spectrum with Hermitian completion (modes outside the block are carried
from the encoding unchanged), and inverse-transforms. ``decode`` is a
pointwise two-layer head with no spatial mixing, so every spatial dynamic has
to flow through the generator.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict, field
from pathlib import Path

import numpy as np

from lgnk import datagen, gradtape
from lgnk.generator import GeneratorParams, ModeGrid, interpretable_count, used_fields

__all__ = [
    "ConfigError",
    "ModelConfig",
    "ModelParams",
    "LatentState",
    "Model",
    "init_model",
    "encode",
    "spectral_step",
    "decode",
    "forward",
    "forward_node",
    "training_loss_node",
    "save_checkpoint",
    "load_checkpoint",
]


class ConfigError(ValueError):
    """Invalid model configuration."""


@dataclass
class ModelConfig:
    """Architecture and sizing record; every field participates in checkpoints."""

    n: int
    T_in: int = 10
    T_out: int = 10
    r: int = 32
    M: int = 12
    w: int = 32
    hidden: int = 128
    variant: str = "sd"
    seed: int = 0

    def __post_init__(self):
        if self.n < 4 or self.n & (self.n - 1):
            raise ConfigError(f"grid size n must be a power of two >= 4, got {self.n}")
        if not 1 <= self.M <= self.n // 2:
            raise ConfigError(f"retained modes must satisfy M <= n/2, got M={self.M}, n={self.n}")
        for name in ("T_in", "T_out", "r", "w", "hidden"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.variant not in ("sd", "unconstrained", "s_only", "d_only"):
            raise ConfigError(f"unknown variant {self.variant!r}")

    def grid(self) -> ModeGrid:
        return ModeGrid(M=self.M)


class ModelParams:
    """All trainable tensors keyed by stable string paths.

    Path names ("encoder.lift.weight", "generator.P", ...) are the unit of
    checkpointing, optimizer state and transfer masking, so they never change
    across save/load.
    """

    def __init__(self, tensors: dict[str, np.ndarray], variant: str):
        self.tensors = dict(tensors)
        self.variant = variant

    def copy(self) -> "ModelParams":
        return ModelParams({k: v.copy() for k, v in self.tensors.items()}, self.variant)

    def paths(self) -> list[str]:
        return list(self.tensors)

    def generator_params(self) -> GeneratorParams:
        fields = {name: self.tensors[f"generator.{name}"] for name in used_fields(self.variant)}
        return GeneratorParams(variant=self.variant, **fields)

    def interpretable_generator_count(self) -> int:
        r = self.generator_params().r
        return interpretable_count(self.variant, r)

    def allclose(self, other: "ModelParams", rtol=0.0, atol=0.0) -> bool:
        if self.paths() != other.paths():
            return False
        return all(
            np.allclose(self.tensors[k], other.tensors[k], rtol=rtol, atol=atol)
            for k in self.tensors
        )


def init_model(config: ModelConfig) -> ModelParams:
    """Deterministic initialization from config.seed.

    Affine weights are Uniform(+/- 1/sqrt(fan_in)) with zero biases, spectral
    weights uniform complex at scale 1/w^2, P ~ Normal(0, 0.02), and the raw
    damping parameters start at -3 (softplus about 0.0486: weakly damped, so
    early training is not dominated by decay).
    """
    rng = np.random.default_rng(config.seed)
    t: dict[str, np.ndarray] = {}

    def affine(path: str, fan_out: int, fan_in: int) -> None:
        bound = 1.0 / np.sqrt(fan_in)
        t[f"{path}.weight"] = rng.uniform(-bound, bound, size=(fan_out, fan_in))
        t[f"{path}.bias"] = np.zeros(fan_out)

    c = config
    affine("encoder.lift", c.w, c.T_in + 2)
    scale = 1.0 / (c.w * c.w)
    for blk in (0, 1):
        t[f"encoder.block{blk}.spectral"] = scale * (
            rng.random((c.w, c.w, c.M, c.M)) + 1j * rng.random((c.w, c.w, c.M, c.M))
        )
        affine(f"encoder.block{blk}.pointwise", c.w, c.w)
    affine("encoder.proj", c.r, c.w)

    gen_fields = used_fields(c.variant)
    if "P" in gen_fields:
        t["generator.P"] = 0.02 * rng.standard_normal((c.r, c.r))
    if "d" in gen_fields:
        t["generator.d"] = np.full(c.r, -3.0)
    if "alpha" in gen_fields:
        t["generator.alpha"] = np.full(c.r, -3.0)

    affine("decoder.hidden", c.hidden, c.r)
    affine("decoder.out", 1, c.hidden)
    return ModelParams(t, c.variant)


# ---------------------------------------------------------------------------
# Forward graph
# ---------------------------------------------------------------------------

@dataclass
class LatentState:
    """Koopman observable field and its spectral views, as tape nodes."""

    Z0: gradtape.Node
    full_spectrum: gradtape.Node
    C0: gradtape.Node
    leaves: dict[str, gradtape.Node] = field(repr=False, default=None)
    config: ModelConfig = None


def _make_leaves(params: ModelParams) -> dict[str, gradtape.Node]:
    return {path: gradtape.param(arr, path) for path, arr in params.tensors.items()}


def _coordinate_channels(n: int) -> np.ndarray:
    g = np.arange(n) / n
    return np.stack([np.broadcast_to(g[:, None], (n, n)), np.broadcast_to(g[None, :], (n, n))])


def _encode_nodes(frames: np.ndarray, leaves, config: ModelConfig) -> LatentState:
    c = config
    if frames.shape != (c.T_in, c.n, c.n):
        raise ValueError(f"frames shape {frames.shape} != ({c.T_in}, {c.n}, {c.n})")
    x = gradtape.concat_channels(
        [gradtape.constant(np.asarray(frames, dtype=np.float64)),
         gradtape.constant(_coordinate_channels(c.n))]
    )
    x = gradtape.affine_pointwise(x, leaves["encoder.lift.weight"], leaves["encoder.lift.bias"])
    for blk in (0, 1):
        spec = gradtape.fft2_fwd(x)
        spec = gradtape.mode_truncate(spec, c.M)
        spec = gradtape.spectral_weight_mul(spec, leaves[f"encoder.block{blk}.spectral"])
        spec = gradtape.mode_embed(spec, full_shape=(c.n, c.n))
        spec_phys = gradtape.fft2_inv(spec)
        pw = gradtape.affine_pointwise(
            x,
            leaves[f"encoder.block{blk}.pointwise.weight"],
            leaves[f"encoder.block{blk}.pointwise.bias"],
        )
        x = gradtape.gelu(gradtape.add(spec_phys, pw))
    z0 = gradtape.affine_pointwise(x, leaves["encoder.proj.weight"], leaves["encoder.proj.bias"])
    full = gradtape.fft2_fwd(z0)
    c0 = gradtape.mode_truncate(full, c.M)
    return LatentState(Z0=z0, full_spectrum=full, C0=c0, leaves=leaves, config=config)


def encode(frames: np.ndarray, params: ModelParams, config: ModelConfig) -> LatentState:
    """Lift input frames to the latent field and its truncated spectrum."""
    return _encode_nodes(frames, _make_leaves(params), config)


def _gen_leaves(state_leaves, variant: str) -> dict[str, gradtape.Node]:
    return {name: state_leaves[f"generator.{name}"] for name in used_fields(variant)}


def spectral_step(state: LatentState, config: ModelConfig, t: float) -> gradtape.Node:
    """Latent field at time t: evolve the block, Hermitian-complete, invert.

    Modes outside the retained block and its mirror image are bit-identical
    to the encoding for every t.
    """
    ct = gradtape.matexp_apply(
        state.C0, _gen_leaves(state.leaves, config.variant), config.variant, config.grid(), t
    )
    full_t = gradtape.mode_embed(ct, base=state.full_spectrum, hermitian=True)
    return gradtape.fft2_inv(full_t, check_real=True)


def decode(zt: gradtape.Node, leaves: dict[str, gradtape.Node]) -> gradtape.Node:
    """Pointwise two-layer head mapping r channels to one output field."""
    return gradtape.mlp_pointwise(
        zt,
        leaves["decoder.hidden.weight"],
        leaves["decoder.hidden.bias"],
        leaves["decoder.out.weight"],
        leaves["decoder.out.bias"],
    )


def forward_node(frames, params: ModelParams, config: ModelConfig, times) -> tuple[gradtape.Node, dict]:
    """Tape for the full prediction volume at the requested times.

    The encoding happens once; each time costs one matrix-exponential family
    regardless of magnitude, so horizon length does not change the cost.
    """
    if len(times) == 0:
        raise ValueError("times must be non-empty")
    leaves = _make_leaves(params)
    state = _encode_nodes(np.asarray(frames, dtype=np.float64), leaves, config)
    preds = [decode(spectral_step(state, config, float(t)), leaves) for t in times]
    return gradtape.concat_channels(preds), leaves


def forward(frames, params: ModelParams, config: ModelConfig, times) -> np.ndarray:
    """Predicted fields, shape (len(times), n, n)."""
    return forward_node(frames, params, config, times)[0].value


def training_loss_node(frames, target, params, config, times) -> tuple[gradtape.Node, dict]:
    """Relative-L2 loss node over the predicted volume, plus parameter leaves."""
    pred, leaves = forward_node(frames, params, config, times)
    return gradtape.rel_l2_loss(pred, np.asarray(target, dtype=np.float64)), leaves


@dataclass
class Model:
    """Config + parameters bundle; the unit diagnostics and the CLI work on."""

    config: ModelConfig
    params: ModelParams

    def forward(self, frames, times) -> np.ndarray:
        return forward(frames, self.params, self.config, times)

    def generator_params(self) -> GeneratorParams:
        return self.params.generator_params()

    def grid(self) -> ModeGrid:
        return self.config.grid()


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path, config: ModelConfig, params: ModelParams, *, epoch: int = 0,
                    optimizer_state_names: list[str] | None = None, extra: dict | None = None) -> list[Path]:
    """Named-tensor container plus sibling JSON manifest; roundtrip is bit-exact."""
    path = Path(path)
    datagen.write_named_tensors(path, params.tensors)
    manifest = {
        "kind": "model_checkpoint",
        "config": asdict(config),
        "variant": params.variant,
        "epoch": epoch,
        "optimizer_state_names": optimizer_state_names or [],
        "tensor_names": params.paths(),
        "format_version": datagen.FORMAT_VERSION,
    }
    if extra:
        manifest.update(extra)
    mpath = Path(str(path) + ".json")
    mpath.write_text(json.dumps(manifest, sort_keys=True, indent=1) + "\n")
    return [path, mpath]


def load_checkpoint(path) -> Model:
    path = Path(path)
    tensors = datagen.read_named_tensors(path)
    manifest = json.loads(Path(str(path) + ".json").read_text())
    config = ModelConfig(**manifest["config"])
    params = ModelParams(tensors, manifest["variant"])
    missing = [p for p in manifest["tensor_names"] if p not in tensors]
    if missing:
        raise datagen.ContainerFormatError(f"checkpoint missing tensors {missing}", 0)
    return Model(config=config, params=params)


def checkpoint_manifest(path) -> dict:
    return json.loads(Path(str(path) + ".json").read_text())
