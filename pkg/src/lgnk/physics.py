"""Diagnostics read off a trained (or initialized) model.

Everything here is a pure read of a checkpoint: dispersion spectra with
branch ids, the dissipation-vs-|k|^2 line fit, gauge-invariant universality
comparisons between two independently trained models, long-horizon rollout
energies, and wall-time benchmarking of the O(1) evaluation. Reports render
to CSV plus small hand-emitted SVG files so the artifact has no plotting
dependency.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from lgnk import numkern
from lgnk.generator import build_skew, dominant_eigs, softplus, spectrum
from lgnk.model import Model, encode, spectral_step, decode
from lgnk.numkern import LinFit, linfit, singvals

__all__ = [
    "SpectrumReport",
    "DissipationReport",
    "UniversalityReport",
    "RolloutReport",
    "BenchReport",
    "spectrum_report",
    "fit_dissipation",
    "compare_universality",
    "rollout_energy",
    "bench_time",
    "render_outputs",
]


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

@dataclass
class SpectrumReport:
    """All generator eigenvalues as (kx, ky, ksq, re, im, branch) rows."""

    rows: list[tuple]
    summary: dict

    csv_name = "spectrum.csv"
    csv_header = ("kx", "ky", "ksq", "re", "im", "branch")


@dataclass
class DissipationReport:
    """Dominant-eigenvalue decay versus |k|^2, with per-branch fallback fits."""

    dominant: LinFit
    per_branch: list[LinFit]
    points: list[tuple]  # (ksq, re_dominant)

    csv_name = "fit.csv"
    csv_header = ("slope", "intercept", "r2", "branch")

    @property
    def rows(self):
        out = [(self.dominant.slope, self.dominant.intercept, self.dominant.r_squared, -1)]
        for b, f in enumerate(self.per_branch):
            out.append((f.slope, f.intercept, f.r_squared, b))
        return out

    def best_branch(self) -> tuple[int, float]:
        b = int(np.argmax([f.r_squared for f in self.per_branch]))
        return b, self.per_branch[b].r_squared


@dataclass
class UniversalityReport:
    """Gauge-invariant comparisons between two independently trained models.

    R^2 values are computed on [0, 1] min-max normalized profiles with model
    A as the target, so shapes are compared independent of scale.
    """

    cosine_sim_S: float
    r2_singvals: float
    r2_sorted_d: float
    r2_sorted_alpha: float
    profiles: dict = field(default_factory=dict)

    csv_name = "universality.csv"
    csv_header = ("metric", "value")

    @property
    def rows(self):
        return [
            ("cosine_sim_S", self.cosine_sim_S),
            ("r2_singvals", self.r2_singvals),
            ("r2_sorted_d", self.r2_sorted_d),
            ("r2_sorted_alpha", self.r2_sorted_alpha),
        ]


@dataclass
class RolloutReport:
    """Decoded enstrophy and latent spectral energy per rollout time."""

    rows: list[tuple]  # (t, enstrophy, latent_energy)

    csv_name = "energy.csv"
    csv_header = ("t", "enstrophy", "latent_energy")


@dataclass
class BenchReport:
    """Median wall time per horizon plus the exponential-evaluation count."""

    rows: list[tuple]  # (horizon, wall_ms, expm_calls)

    csv_name = "bench.csv"
    csv_header = ("horizon", "wall_ms", "expm_calls")


# ---------------------------------------------------------------------------
# Diagnostics
# ---------------------------------------------------------------------------

def spectrum_report(model: Model) -> SpectrumReport:
    """Eigenvalues of every per-mode generator with traced branch ids."""
    pts = spectrum(model.generator_params(), model.grid())
    rows = [(p.mode[0], p.mode[1], p.ksq, p.lam.real, p.lam.imag, p.branch) for p in pts]
    res = np.array([p.lam.real for p in pts])
    ims = np.array([p.lam.imag for p in pts])
    return SpectrumReport(
        rows=rows,
        summary={
            "count": len(rows),
            "max_re": float(res.max()),
            "min_re": float(res.min()),
            "im_range": (float(ims.min()), float(ims.max())),
        },
    )


def fit_dissipation(model: Model) -> DissipationReport:
    """OLS fit of the slowest decay rate against |k|^2.

    The dominant fit is the headline scaling; branch-resolved fits back the
    fallback analysis for wide models where the dominant branch reshuffles.
    """
    gen = model.generator_params()
    grid = model.grid()
    dom = dominant_eigs(gen, grid)
    fit = linfit(grid.ksq, dom.real)
    per_branch = []
    pts = spectrum(gen, grid)
    r = gen.r
    for b in range(r):
        xs = [p.ksq for p in pts if p.branch == b]
        ys = [p.lam.real for p in pts if p.branch == b]
        per_branch.append(linfit(xs, ys))
    return DissipationReport(
        dominant=fit,
        per_branch=per_branch,
        points=[(float(k), float(v)) for k, v in zip(grid.ksq, dom.real)],
    )


def _minmax(x: np.ndarray) -> np.ndarray:
    lo, hi = float(x.min()), float(x.max())
    if hi == lo:
        return np.zeros_like(x)
    return (x - lo) / (hi - lo)


def _profile_r2(a: np.ndarray, b: np.ndarray) -> float:
    """R^2 of prediction b against target a on normalized profiles."""
    ss_res = float(np.sum((a - b) ** 2))
    if ss_res == 0.0:
        return 1.0
    ss_tot = float(np.sum((a - a.mean()) ** 2))
    if ss_tot == 0.0:
        return 0.0
    return 1.0 - ss_res / ss_tot


def compare_universality(model_a: Model, model_b: Model) -> UniversalityReport:
    """Compare two models' gauge-invariant generator structure.

    Cosine similarity of vec(S) is reported raw (it is gauge-dependent and
    expected to be near zero for independent trainings); the singular-value
    profile of S and the sorted damping profiles are the invariants.
    """
    ga, gb = model_a.generator_params(), model_b.generator_params()
    if ga.r != gb.r:
        raise ValueError(f"channel counts differ: {ga.r} != {gb.r}")
    if ga.variant != "sd" or gb.variant != "sd":
        raise ValueError("universality comparison is defined for the sd variant")

    Sa, Sb = build_skew(ga.P), build_skew(gb.P)
    denom = np.linalg.norm(Sa) * np.linalg.norm(Sb)
    cos = float(np.sum(Sa * Sb) / denom) if denom > 0 else 0.0

    profiles = {}
    r2 = {}
    for name, va, vb in (
        ("singvals", singvals(Sa), singvals(Sb)),
        ("sorted_d", np.sort(softplus(ga.d)), np.sort(softplus(gb.d))),
        ("sorted_alpha", np.sort(softplus(ga.alpha)), np.sort(softplus(gb.alpha))),
    ):
        na, nb = _minmax(va), _minmax(vb)
        profiles[name] = (na, nb)
        r2[name] = _profile_r2(na, nb)

    return UniversalityReport(
        cosine_sim_S=cos,
        r2_singvals=r2["singvals"],
        r2_sorted_d=r2["sorted_d"],
        r2_sorted_alpha=r2["sorted_alpha"],
        profiles=profiles,
    )


def rollout_energy(model: Model, dataset, t_max: int, n_samples: int = 4) -> RolloutReport:
    """Forward evaluation at t = 1..t_max on held-out samples.

    Each time is one propagation from the initial encoding (never a recursive
    rollout), so the latent energy column inherits the contractivity of the
    generator: for the sd variant it never increases with t.
    """
    if t_max < 1:
        raise ValueError("t_max must be >= 1")
    cfg = model.config
    idx = dataset.test_indices[: max(1, n_samples)]
    states = [
        encode(dataset.trajectories[i][: cfg.T_in], model.params, cfg) for i in idx
    ]
    rows = []
    for t in range(1, t_max + 1):
        lat = 0.0
        ens = 0.0
        for state in states:
            z = spectral_step(state, cfg, float(t))
            ct = np.fft.fft2(z.value, axes=(-2, -1))[:, : cfg.M, : cfg.M]
            lat += float(np.sum(np.abs(ct) ** 2))
            decoded = decode(z, state.leaves).value
            ens += float(np.mean(decoded**2))
        rows.append((t, ens / len(states), lat / len(states)))
    return RolloutReport(rows=rows)


def bench_time(model: Model, horizons, warmup: int = 3, reps: int = 20, seed: int = 0) -> BenchReport:
    """Median wall time of forward([t]) per horizon.

    Also verifies the structural O(1) property: the number of matrix
    exponentials evaluated is M^2 per requested time, independent of t.
    """
    cfg = model.config
    rng = np.random.default_rng(seed)
    frames = rng.standard_normal((cfg.T_in, cfg.n, cfg.n))
    rows = []
    counts = set()
    for t in horizons:
        numkern.reset_expm_matrix_count()
        model.forward(frames, [float(t)])
        calls = numkern.expm_matrix_count()
        counts.add(calls)
        for _ in range(warmup):
            model.forward(frames, [float(t)])
        samples = []
        for _ in range(reps):
            tic = time.perf_counter()
            model.forward(frames, [float(t)])
            samples.append((time.perf_counter() - tic) * 1e3)
        rows.append((float(t), float(np.median(samples)), calls))
    if len(counts) != 1:
        raise AssertionError(f"expm call count varies with horizon: {sorted(counts)}")
    return BenchReport(rows=rows)


# ---------------------------------------------------------------------------
# Rendering: CSV + minimal SVG
# ---------------------------------------------------------------------------

def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_csv(path, header, rows) -> Path:
    path = Path(path)
    lines = [",".join(header)]
    lines += [",".join(_fmt(v) for v in row) for row in rows]
    path.write_text("\n".join(lines) + "\n")
    return path


_W, _H = 640, 480
_ML, _MR, _MT, _MB = 70, 20, 40, 50


def _scale(vals, lo, hi, out_lo, out_hi):
    if hi == lo:
        hi = lo + 1.0
    return [(out_lo + (v - lo) / (hi - lo) * (out_hi - out_lo)) for v in vals]


def _color(u: float) -> str:
    """Two-point color ramp, u in [0, 1]: blue to red."""
    c0 = (44, 123, 182)
    c1 = (215, 25, 28)
    rgb = tuple(int(round(a + (b - a) * u)) for a, b in zip(c0, c1))
    return f"rgb({rgb[0]},{rgb[1]},{rgb[2]})"


def _svg_frame(title, xlabel, ylabel, xlo, xhi, ylo, yhi):
    parts = [
        f'<rect x="{_ML}" y="{_MT}" width="{_W - _ML - _MR}" height="{_H - _MT - _MB}" '
        'fill="white" stroke="black" stroke-width="1"/>',
        f'<text x="{_W / 2:.1f}" y="20" text-anchor="middle" font-size="14">{escape(title)}</text>',
        f'<text x="{_W / 2:.1f}" y="{_H - 12}" text-anchor="middle" font-size="12">{escape(xlabel)}</text>',
        f'<text x="16" y="{_H / 2:.1f}" text-anchor="middle" font-size="12" '
        f'transform="rotate(-90 16 {_H / 2:.1f})">{escape(ylabel)}</text>',
    ]
    for i in range(5):
        fx = xlo + (xhi - xlo) * i / 4
        px = _ML + (_W - _ML - _MR) * i / 4
        parts.append(
            f'<text x="{px:.1f}" y="{_H - _MB + 16}" text-anchor="middle" font-size="10">{fx:.3g}</text>'
        )
        fy = ylo + (yhi - ylo) * i / 4
        py = _H - _MB - (_H - _MT - _MB) * i / 4
        parts.append(
            f'<text x="{_ML - 6}" y="{py:.1f}" text-anchor="end" font-size="10">{fy:.3g}</text>'
        )
    return parts


def _svg_write(path, parts) -> Path:
    path = Path(path)
    body = "\n".join(parts)
    path.write_text(
        f'<?xml version="1.0" encoding="UTF-8"?>\n'
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}" '
        f'viewBox="0 0 {_W} {_H}">\n{body}\n</svg>\n'
    )
    return path


def svg_scatter(path, xs, ys, colors=None, title="", xlabel="", ylabel="") -> Path:
    xs = list(map(float, xs))
    ys = list(map(float, ys))
    xlo, xhi = (min(xs), max(xs)) if xs else (0.0, 1.0)
    ylo, yhi = (min(ys), max(ys)) if ys else (0.0, 1.0)
    parts = _svg_frame(title, xlabel, ylabel, xlo, xhi, ylo, yhi)
    px = _scale(xs, xlo, xhi, _ML, _W - _MR)
    py = _scale(ys, ylo, yhi, _H - _MB, _MT)
    if colors is not None and len(colors):
        cl, ch = float(min(colors)), float(max(colors))
        span = ch - cl if ch > cl else 1.0
        fills = [_color((c - cl) / span) for c in colors]
    else:
        fills = ["rgb(44,123,182)"] * len(xs)
    for x, y, f in zip(px, py, fills):
        parts.append(f'<circle cx="{x:.2f}" cy="{y:.2f}" r="2.2" fill="{f}" fill-opacity="0.75"/>')
    return _svg_write(path, parts)


def svg_lines(path, series, title="", xlabel="", ylabel="") -> Path:
    """series: list of (xs, ys, label); colors cycle through the ramp."""
    allx = [float(x) for s in series for x in s[0]]
    ally = [float(y) for s in series for y in s[1]]
    xlo, xhi = (min(allx), max(allx)) if allx else (0.0, 1.0)
    ylo, yhi = (min(ally), max(ally)) if ally else (0.0, 1.0)
    parts = _svg_frame(title, xlabel, ylabel, xlo, xhi, ylo, yhi)
    for i, (xs, ys, label) in enumerate(series):
        color = _color(i / max(1, len(series) - 1)) if len(series) > 1 else "rgb(44,123,182)"
        px = _scale([float(v) for v in xs], xlo, xhi, _ML, _W - _MR)
        py = _scale([float(v) for v in ys], ylo, yhi, _H - _MB, _MT)
        pts = " ".join(f"{x:.2f},{y:.2f}" for x, y in zip(px, py))
        parts.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        parts.append(
            f'<text x="{_W - _MR - 6}" y="{_MT + 16 + 14 * i}" text-anchor="end" '
            f'font-size="11" fill="{color}">{escape(str(label))}</text>'
        )
    return _svg_write(path, parts)


def render_outputs(report, out_dir) -> list[Path]:
    """Write a report's CSV and its figure; returns the created paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    files = [write_csv(out_dir / report.csv_name, report.csv_header, report.rows)]

    if isinstance(report, SpectrumReport):
        res = [r[3] for r in report.rows]
        ims = [r[4] for r in report.rows]
        ksq = [r[2] for r in report.rows]
        files.append(
            svg_scatter(out_dir / "spectrum.svg", res, ims, colors=ksq,
                        title="Generator eigenvalues (color: |k|^2)",
                        xlabel="Re(lambda)", ylabel="Im(lambda)")
        )
    elif isinstance(report, DissipationReport):
        xs = [p[0] for p in report.points]
        ys = [p[1] for p in report.points]
        fit_y = [report.dominant.slope * x + report.dominant.intercept for x in xs]
        parts_path = out_dir / "fit.svg"
        files.append(
            svg_lines(parts_path,
                      [(xs, ys, "dominant Re(lambda)"),
                       (xs, fit_y, f"fit R^2={report.dominant.r_squared:.3f}")],
                      title="Dissipation scaling", xlabel="|k|^2", ylabel="Re(lambda)")
        )
    elif isinstance(report, UniversalityReport):
        series = []
        for name, (a, b) in report.profiles.items():
            idx = list(range(len(a)))
            series.append((idx, list(map(float, a)), f"{name} A"))
            series.append((idx, list(map(float, b)), f"{name} B"))
        files.append(
            svg_lines(out_dir / "universality.svg", series,
                      title="Normalized generator profiles", xlabel="index", ylabel="normalized value")
        )
    elif isinstance(report, RolloutReport):
        ts = [r[0] for r in report.rows]
        files.append(
            svg_lines(out_dir / "energy.svg",
                      [(ts, [r[1] for r in report.rows], "decoded enstrophy"),
                       (ts, [r[2] for r in report.rows], "latent energy")],
                      title="Rollout energy", xlabel="t", ylabel="energy")
        )
    elif isinstance(report, BenchReport):
        hs = [r[0] for r in report.rows]
        files.append(
            svg_lines(out_dir / "bench.svg",
                      [(hs, [r[1] for r in report.rows], "wall ms")],
                      title="Evaluation time vs horizon", xlabel="horizon t", ylabel="wall ms")
        )
    return files
