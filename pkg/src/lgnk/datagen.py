"""Desk-scale trajectory generation and the bit-exact dataset container.

Two pseudo-spectral solvers on the 2 pi-periodic square: the 2D
Navier-Stokes vorticity equation (integrating-factor RK4, 2/3-rule
dealiasing) and the FitzHugh-Nagumo activator-inhibitor system (exact
spectral diffusion, explicit Heun reaction). Trajectories are written in a
small binary tensor format with a sibling JSON manifest; write-then-read is
bit-identical.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

__all__ = [
    "ContainerFormatError",
    "CflViolation",
    "SolverBlowup",
    "NSParams",
    "FHNParams",
    "Dataset",
    "gen_navier_stokes",
    "gen_fitzhugh_nagumo",
    "dataset_io",
    "write_dataset",
    "read_dataset",
    "write_tensor",
    "read_tensor",
    "write_named_tensors",
    "read_named_tensors",
]

MAGIC = b"LGNK"
FORMAT_VERSION = 1
_DTYPE_CODES = {1: np.dtype("<f4"), 2: np.dtype("<f8"), 3: np.dtype("<c16")}
_CODE_OF_DTYPE = {np.dtype(np.float32): 1, np.dtype(np.float64): 2, np.dtype(np.complex128): 3}


class ContainerFormatError(ValueError):
    """Malformed tensor container; carries the byte offset of the problem."""

    def __init__(self, message: str, offset: int):
        self.offset = offset
        super().__init__(f"{message} (byte offset {offset})")


class CflViolation(RuntimeError):
    """Advective CFL limit exceeded; carries step diagnostics."""


class SolverBlowup(RuntimeError):
    """Non-finite field encountered during time stepping."""


# ---------------------------------------------------------------------------
# Binary tensor container
# ---------------------------------------------------------------------------

def _encode_tensor(arr: np.ndarray) -> bytes:
    code = _CODE_OF_DTYPE.get(arr.dtype.newbyteorder("="))
    if code is None:
        raise ValueError(f"unsupported container dtype {arr.dtype}")
    head = struct.pack("<II", code, arr.ndim)
    head += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    payload = np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
    return head + payload


def _decode_tensor(buf: bytes, offset: int) -> tuple[np.ndarray, int]:
    if len(buf) < offset + 8:
        raise ContainerFormatError("truncated tensor header", len(buf))
    code, ndim = struct.unpack_from("<II", buf, offset)
    offset += 8
    if code not in _DTYPE_CODES:
        raise ContainerFormatError(f"unknown dtype code {code}", offset - 8)
    if len(buf) < offset + 8 * ndim:
        raise ContainerFormatError("truncated extents", len(buf))
    shape = struct.unpack_from(f"<{ndim}Q", buf, offset)
    offset += 8 * ndim
    dtype = _DTYPE_CODES[code]
    count = int(np.prod(shape)) if ndim else 1
    nbytes = count * dtype.itemsize
    if len(buf) < offset + nbytes:
        raise ContainerFormatError(
            f"truncated payload: expected {nbytes} bytes, found {len(buf) - offset}", offset
        )
    arr = np.frombuffer(buf, dtype=dtype, count=count, offset=offset).reshape(shape)
    return arr.astype(dtype.newbyteorder("="), copy=True), offset + nbytes


def write_tensor(path, arr: np.ndarray) -> None:
    """Single-tensor file: magic, version, dtype code, ndim, extents, payload."""
    blob = MAGIC + struct.pack("<I", FORMAT_VERSION) + _encode_tensor(arr)
    Path(path).write_bytes(blob)


def read_tensor(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    _check_header(buf)
    arr, end = _decode_tensor(buf, 8)
    if end != len(buf):
        raise ContainerFormatError(f"{len(buf) - end} trailing bytes after payload", end)
    return arr


def _check_header(buf: bytes) -> None:
    if len(buf) < 8:
        raise ContainerFormatError("file shorter than header", len(buf))
    if buf[:4] != MAGIC:
        raise ContainerFormatError(f"bad magic {buf[:4]!r}, expected {MAGIC!r}", 0)
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != FORMAT_VERSION:
        raise ContainerFormatError(f"unsupported version {version}", 4)


def write_named_tensors(path, tensors: dict[str, np.ndarray]) -> None:
    """Multi-tensor container used by checkpoints: name-prefixed records."""
    parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(tensors))]
    for name, arr in tensors.items():
        nb = name.encode("utf-8")
        parts.append(struct.pack("<I", len(nb)) + nb + _encode_tensor(arr))
    Path(path).write_bytes(b"".join(parts))


def read_named_tensors(path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    _check_header(buf)
    if len(buf) < 12:
        raise ContainerFormatError("file shorter than container header", len(buf))
    (count,) = struct.unpack_from("<I", buf, 8)
    offset = 12
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        if len(buf) < offset + 4:
            raise ContainerFormatError("truncated name length", len(buf))
        (nlen,) = struct.unpack_from("<I", buf, offset)
        offset += 4
        name = buf[offset:offset + nlen].decode("utf-8")
        offset += nlen
        arr, offset = _decode_tensor(buf, offset)
        out[name] = arr
    if offset != len(buf):
        raise ContainerFormatError(f"{len(buf) - offset} trailing bytes", offset)
    return out


# ---------------------------------------------------------------------------
# Parameter records and the Dataset bundle
# ---------------------------------------------------------------------------

@dataclass
class NSParams:
    """2D Navier-Stokes vorticity run: nu, grid, stepping and forcing."""

    nu: float = 1e-3
    n: int = 64
    dt_solver: float = 0.01
    dt_snapshot: float = 1.0
    T_snapshots: int = 20
    forcing_amp: float = 0.1
    seed: int = 0

    def validate(self) -> None:
        if self.n < 4 or self.n & (self.n - 1):
            raise ValueError(f"n must be a power of two >= 4, got {self.n}")
        steps = self.dt_snapshot / self.dt_solver
        if abs(steps - round(steps)) > 1e-9:
            raise ValueError("dt_snapshot must be an integer multiple of dt_solver")


@dataclass
class FHNParams:
    """FitzHugh-Nagumo run on [0, 2pi]^2; only the activator u is stored."""

    Du: float = 0.01
    Dv: float = 0.005
    eps: float = 0.01
    a: float = 0.7
    b: float = 0.8
    n: int = 32
    dt_solver: float = 0.04
    dt_snapshot: float = 1.0
    T_snapshots: int = 30
    seed: int = 0

    def validate(self) -> None:
        if self.n < 4 or self.n & (self.n - 1):
            raise ValueError(f"n must be a power of two >= 4, got {self.n}")
        steps = self.dt_snapshot / self.dt_solver
        if abs(steps - round(steps)) > 1e-9:
            raise ValueError("dt_snapshot must be an integer multiple of dt_solver")


@dataclass
class Dataset:
    """Trajectory tensor (count, T, n, n) plus its manifest."""

    trajectories: np.ndarray
    manifest: dict = field(default_factory=dict)

    @property
    def train_indices(self) -> list[int]:
        return list(self.manifest["split"]["train"])

    @property
    def test_indices(self) -> list[int]:
        return list(self.manifest["split"]["test"])


def _default_split(count: int, n_train: int | None = None) -> dict:
    if n_train is None:
        n_train = int(round(0.8 * count))
    n_train = min(n_train, count)
    return {"train": list(range(n_train)), "test": list(range(n_train, count))}


def _make_manifest(pde: str, params, count: int, split: dict | None) -> dict:
    return {
        "pde": pde,
        "params": asdict(params),
        "seed": params.seed,
        "count": count,
        "split": split if split is not None else _default_split(count),
        "format_version": FORMAT_VERSION,
    }


# ---------------------------------------------------------------------------
# Navier-Stokes vorticity solver
# ---------------------------------------------------------------------------

def _wavenumbers(n: int):
    k = np.fft.fftfreq(n, d=1.0 / n)  # integer wavenumbers on the 2pi torus
    kx = k[:, None]
    ky = k[None, :]
    return kx, ky, kx * kx + ky * ky


def _dealias_mask(n: int) -> np.ndarray:
    k = np.abs(np.fft.fftfreq(n, d=1.0 / n))
    cut = n / 3.0
    return (k[:, None] <= cut) & (k[None, :] <= cut)


def grf_vorticity(n: int, rng: np.random.Generator) -> np.ndarray:
    """Gaussian random field with spectral amplitude (|k|^2 + 9)^(-5/2),
    zero mean and unit variance."""
    _, _, k2 = _wavenumbers(n)
    amp = (k2 + 9.0) ** (-2.5)
    white = rng.standard_normal((n, n))
    w = np.fft.ifft2(amp * np.fft.fft2(white)).real
    w -= w.mean()
    return w / w.std()


def _ns_rhs(w_hat, kx, ky, k2_safe, mask, f_hat):
    """Nonlinear + forcing term of d(omega)/dt in spectral space."""
    psi_hat = w_hat / k2_safe
    psi_hat[0, 0] = 0.0
    u = np.fft.ifft2(1j * ky * psi_hat).real
    v = np.fft.ifft2(-1j * kx * psi_hat).real
    wx = np.fft.ifft2(1j * kx * w_hat).real
    wy = np.fft.ifft2(1j * ky * w_hat).real
    adv_hat = np.fft.fft2(u * wx + v * wy) * mask
    return -adv_hat + f_hat, u, v


def simulate_navier_stokes(params: NSParams, w0: np.ndarray) -> np.ndarray:
    """Integrate one vorticity trajectory; returns (T_snapshots, n, n).

    Pseudo-spectral with streamfunction inversion, 2/3-rule dealiasing and
    integrating-factor RK4 (viscosity handled exactly inside the factor).
    The advective CFL number is checked every step.
    """
    params.validate()
    n = params.n
    kx, ky, k2 = _wavenumbers(n)
    k2_safe = k2.copy()
    k2_safe[0, 0] = 1.0
    mask = _dealias_mask(n)
    dx = 2.0 * np.pi / n
    x = np.arange(n) * dx
    f = params.forcing_amp * (np.sin(x[:, None] + x[None, :]) + np.cos(x[:, None] + x[None, :]))
    f_hat = np.fft.fft2(f) * mask

    h = params.dt_solver
    E_half = np.exp(-params.nu * k2 * h / 2.0)
    E_full = E_half * E_half
    steps_per_snap = int(round(params.dt_snapshot / h))

    w_hat = np.fft.fft2(w0)
    out = np.empty((params.T_snapshots, n, n))
    out[0] = w0
    for snap in range(1, params.T_snapshots):
        for step in range(steps_per_snap):
            k1, u, v = _ns_rhs(w_hat, kx, ky, k2_safe, mask, f_hat)
            umax = float(np.max(np.abs(u)) + np.max(np.abs(v)))
            cfl = umax * h / dx
            if cfl > 1.0:
                raise CflViolation(
                    f"CFL {cfl:.3f} > 1 at snapshot {snap}, inner step {step} "
                    f"(max|u|+max|v|={umax:.3f}, dt={h}, dx={dx:.4f})"
                )
            k2s, _, _ = _ns_rhs(E_half * (w_hat + 0.5 * h * k1), kx, ky, k2_safe, mask, f_hat)
            k3s, _, _ = _ns_rhs(E_half * w_hat + 0.5 * h * k2s, kx, ky, k2_safe, mask, f_hat)
            k4s, _, _ = _ns_rhs(E_full * w_hat + h * E_half * k3s, kx, ky, k2_safe, mask, f_hat)
            w_hat = E_full * w_hat + (h / 6.0) * (E_full * k1 + 2.0 * E_half * (k2s + k3s) + k4s)
        snap_field = np.fft.ifft2(w_hat).real
        if not np.all(np.isfinite(snap_field)):
            raise SolverBlowup(f"non-finite vorticity at snapshot {snap}")
        out[snap] = snap_field
    return out


def gen_navier_stokes(params: NSParams, count: int, n_train: int | None = None) -> Dataset:
    """Generate ``count`` independent vorticity trajectories.

    Each trajectory's RNG stream derives from (seed, index), so outputs do
    not depend on generation order.
    """
    params.validate()
    trajs = np.empty((count, params.T_snapshots, params.n, params.n), dtype=np.float64)
    for i in range(count):
        rng = np.random.default_rng([params.seed, i])
        trajs[i] = simulate_navier_stokes(params, grf_vorticity(params.n, rng))
    manifest = _make_manifest("navier_stokes", params, count, _default_split(count, n_train))
    return Dataset(trajectories=trajs, manifest=manifest)


# ---------------------------------------------------------------------------
# FitzHugh-Nagumo solver
# ---------------------------------------------------------------------------

def _lowpass_field(n: int, rng: np.random.Generator, kmax: float = 4.0) -> np.ndarray:
    _, _, k2 = _wavenumbers(n)
    keep = k2 <= kmax * kmax
    white = rng.standard_normal((n, n))
    x = np.fft.ifft2(np.fft.fft2(white) * keep).real
    return x / np.max(np.abs(x))


def simulate_fitzhugh_nagumo(params: FHNParams, u0: np.ndarray, v0: np.ndarray) -> np.ndarray:
    """Integrate one activator trajectory; returns (T_snapshots, n, n).

    Diffusion is integrated exactly per step through e^{-D |k|^2 dt} factors;
    the reaction terms advance with an explicit Heun corrector.
    """
    params.validate()
    n = params.n
    _, _, k2 = _wavenumbers(n)
    h = params.dt_solver
    Eu = np.exp(-params.Du * k2 * h)
    Ev = np.exp(-params.Dv * k2 * h)
    steps_per_snap = int(round(params.dt_snapshot / h))

    def reaction(u, v):
        ru = u - u**3 / 3.0 - v
        rv = params.eps * (u + params.a - params.b * v)
        return ru, rv

    u_hat = np.fft.fft2(u0)
    v_hat = np.fft.fft2(v0)
    out = np.empty((params.T_snapshots, n, n))
    out[0] = u0
    for snap in range(1, params.T_snapshots):
        for step in range(steps_per_snap):
            u = np.fft.ifft2(u_hat).real
            v = np.fft.ifft2(v_hat).real
            ru1, rv1 = reaction(u, v)
            up_hat = Eu * (u_hat + h * np.fft.fft2(ru1))
            vp_hat = Ev * (v_hat + h * np.fft.fft2(rv1))
            ru2, rv2 = reaction(np.fft.ifft2(up_hat).real, np.fft.ifft2(vp_hat).real)
            u_hat = Eu * (u_hat + 0.5 * h * np.fft.fft2(ru1)) + 0.5 * h * np.fft.fft2(ru2)
            v_hat = Ev * (v_hat + 0.5 * h * np.fft.fft2(rv1)) + 0.5 * h * np.fft.fft2(rv2)
        u_snap = np.fft.ifft2(u_hat).real
        if not np.all(np.isfinite(u_snap)):
            raise SolverBlowup(f"non-finite activator at snapshot {snap}")
        out[snap] = u_snap
    return out


def gen_fitzhugh_nagumo(params: FHNParams, count: int, n_train: int | None = None) -> Dataset:
    """Generate ``count`` activator trajectories from low-pass random fields."""
    params.validate()
    trajs = np.empty((count, params.T_snapshots, params.n, params.n), dtype=np.float64)
    for i in range(count):
        rng = np.random.default_rng([params.seed, i])
        u0 = _lowpass_field(params.n, rng)
        v0 = _lowpass_field(params.n, rng)
        trajs[i] = simulate_fitzhugh_nagumo(params, u0, v0)
    manifest = _make_manifest("fitzhugh_nagumo", params, count, _default_split(count, n_train))
    return Dataset(trajectories=trajs, manifest=manifest)


# ---------------------------------------------------------------------------
# Dataset IO
# ---------------------------------------------------------------------------

def _manifest_path(path) -> Path:
    return Path(str(path) + ".json")


def write_dataset(path, dataset: Dataset) -> list[Path]:
    """Store trajectories as real32 (promoted back to real64 on read)."""
    path = Path(path)
    write_tensor(path, dataset.trajectories.astype(np.float32))
    mpath = _manifest_path(path)
    mpath.write_text(json.dumps(dataset.manifest, sort_keys=True, indent=1) + "\n")
    return [path, mpath]


def read_dataset(path) -> Dataset:
    path = Path(path)
    arr = read_tensor(path).astype(np.float64)
    manifest = json.loads(_manifest_path(path).read_text())
    dims = manifest.get("count")
    if dims is not None and dims != arr.shape[0]:
        raise ContainerFormatError(
            f"manifest count {dims} does not match tensor leading extent {arr.shape[0]}", 0
        )
    return Dataset(trajectories=arr, manifest=manifest)


def dataset_io(mode: str, path, dataset: Dataset | None = None) -> Dataset:
    """Single entry point: ``dataset_io('write', path, ds)`` or ``('read', path)``."""
    if mode == "write":
        if dataset is None:
            raise ValueError("write mode needs a dataset")
        write_dataset(path, dataset)
        return dataset
    if mode == "read":
        return read_dataset(path)
    raise ValueError(f"unknown dataset_io mode {mode!r}")
