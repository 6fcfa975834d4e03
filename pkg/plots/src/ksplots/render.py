"""Render one figure per spec from the experiment runner's CSV outputs.

Each kind checks the input header against the documented schema before
touching the data and fails naming the offending column. Rendering
never mutates the inputs; the saved raster embeds the source file names
and checksums (plus the run manifest's checksum when a manifest.json
sits next to the first input) as PNG metadata.
"""

import csv
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

KINDS = ("heatmap", "cost-curve", "eps-curve", "contraction", "audit-surface")

SCHEMAS = {
    "heatmap": ("t", "x", "u", "v"),
    "cost-curve": ("T", "inv_T", "cost", "log_cost"),
    "eps-curve": ("eps", "cost", "v_diff", "h_weak_diff"),
    "contraction": ("iteration", "distance", "ratio"),
    "audit-surface": ("mu", "lambda", "min_ratio", "median_ratio"),
}


class SchemaError(ValueError):
    """Input file does not match the documented schema."""


@dataclass
class FigureSpec:
    kind: str
    inputs: list
    output: str

    def __post_init__(self):
        if self.kind not in KINDS:
            raise SchemaError(f"unknown figure kind {self.kind!r}; "
                              f"expected one of {KINDS}")
        if not self.inputs:
            raise SchemaError("at least one --in path is required")


@dataclass
class RenderResult:
    output: Path
    points: int            # data points drawn, equals the CSV row count
    rows: int


def read_csv(path, expected):
    path = Path(path)
    if not path.exists():
        raise SchemaError(f"input {path} does not exist")
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f"{path.name}: empty file") from None
        if tuple(header) != expected:
            missing = [c for c in expected if c not in header]
            extra = [c for c in header if c not in expected]
            bad = (missing or extra or ["order"])[0]
            raise SchemaError(
                f"{path.name}: header {header} does not match schema "
                f"{list(expected)} (offending column: {bad})")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(expected):
                raise SchemaError(f"{path.name}:{lineno}: expected "
                                  f"{len(expected)} fields, got {len(row)}")
            try:
                rows.append([float(v) for v in row])
            except ValueError as exc:
                raise SchemaError(f"{path.name}:{lineno}: {exc}") from None
    if not rows:
        raise SchemaError(f"{path.name}: no data rows")
    return np.array(rows)


def _sha256(path):
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        digest.update(fh.read())
    return digest.hexdigest()


def _metadata(spec):
    meta = {"Software": "ksplots"}
    for i, p in enumerate(spec.inputs):
        p = Path(p)
        meta[f"Source{i}"] = p.name
        meta[f"Source{i}SHA256"] = _sha256(p)
    manifest = Path(spec.inputs[0]).parent / "manifest.json"
    if manifest.exists():
        meta["ManifestSHA256"] = _sha256(manifest)
    return meta


def _grid_values(t, x, z):
    ts = np.unique(t)
    xs = np.unique(x)
    Z = np.full((len(ts), len(xs)), np.nan)
    ti = np.searchsorted(ts, t)
    xi = np.searchsorted(xs, x)
    Z[ti, xi] = z
    return ts, xs, Z


def _render_heatmap(spec, fig):
    data = read_csv(spec.inputs[0], SCHEMAS["heatmap"])
    t, x, u, v = data.T
    axes = fig.subplots(2, 1, sharex=True)
    for ax, z, name in ((axes[0], u, "u"), (axes[1], v, "v")):
        ts, xs, Z = _grid_values(t, x, z)
        pm = ax.pcolormesh(ts, xs, Z.T, shading="nearest", cmap="RdBu_r")
        fig.colorbar(pm, ax=ax, label=name)
        ax.set_ylabel("x")
    axes[1].set_xlabel("t")
    fig.suptitle("space-time fields")
    return len(data)


def _render_cost_curve(spec, fig):
    data = read_csv(spec.inputs[0], SCHEMAS["cost-curve"])
    _, inv_T, cost, log_cost = data.T
    ax = fig.subplots()
    ax.plot(inv_T, log_cost, "o", label="measured")
    for extra in spec.inputs[1:]:
        with open(extra, "r", encoding="utf-8") as fh:
            fit = json.load(fh)
        if "fit_K" not in fit or "fit_offset" not in fit:
            raise SchemaError(f"{Path(extra).name}: missing fit_K/fit_offset")
        grid = np.linspace(inv_T.min(), inv_T.max(), 100)
        ax.plot(grid, fit["fit_K"] * grid + fit["fit_offset"], "-",
                label=f"fit: K={fit['fit_K']:.3g}, "
                      f"R^2={fit.get('r_squared', float('nan')):.3f}")
    ax.set_xlabel("1/T")
    ax.set_ylabel("log cost")
    ax.legend()
    ax.set_title("control cost vs inverse horizon")
    return len(data)


def _render_eps_curve(spec, fig):
    data = read_csv(spec.inputs[0], SCHEMAS["eps-curve"])
    eps, cost, v_diff, h_weak = data.T
    axes = fig.subplots(1, 2)
    axes[0].loglog(eps, cost, "o-")
    axes[0].set_xlabel("eps")
    axes[0].set_ylabel("control cost")
    axes[0].set_title("cost across the eps ladder")
    axes[1].loglog(eps, v_diff, "s-", label="|v_eps(T) - v_lim(T)|")
    axes[1].loglog(eps, h_weak, "^-", label="weak control gap")
    axes[1].set_xlabel("eps")
    axes[1].legend()
    axes[1].set_title("convergence to the elliptic limit")
    return len(data)


def _render_contraction(spec, fig):
    data = read_csv(spec.inputs[0], SCHEMAS["contraction"])
    it, dist, _ratio = data.T
    ax = fig.subplots()
    pos = dist > 0
    ax.semilogy(it[pos], dist[pos], "o-")
    if (~pos).any():
        # exact-zero distances cannot sit on the log axis; mark them at the
        # bottom of the visible range
        floor = dist[pos].min() if pos.any() else 1.0
        ax.semilogy(it[~pos], np.full((~pos).sum(), floor), "v")
    ax.set_xlabel("iteration")
    ax.set_ylabel("weighted iterate distance")
    ax.set_title("fixed-point contraction")
    return len(data)


def _render_audit_surface(spec, fig):
    data = read_csv(spec.inputs[0], SCHEMAS["audit-surface"])
    mu, lam, min_ratio, _med = data.T
    ax = fig.subplots()
    sc = ax.scatter(mu, lam, c=np.log10(min_ratio), s=160, marker="s",
                    cmap="viridis")
    fig.colorbar(sc, ax=ax, label="log10 min ratio")
    ax.set_xlabel("mu")
    ax.set_ylabel("lambda")
    ax.set_title("observation/energy ratio floor")
    return len(data)


RENDERERS = {
    "heatmap": _render_heatmap,
    "cost-curve": _render_cost_curve,
    "eps-curve": _render_eps_curve,
    "contraction": _render_contraction,
    "audit-surface": _render_audit_surface,
}


def render(spec):
    """Render the figure and return (output path, drawn point count)."""
    data_rows = None
    fig = plt.figure(figsize=(8, 5), dpi=120)
    try:
        points = RENDERERS[spec.kind](spec, fig)
        out = Path(spec.output)
        out.parent.mkdir(parents=True, exist_ok=True)
        fig.savefig(out, format="png", metadata=_metadata(spec))
    finally:
        plt.close(fig)
    return RenderResult(output=Path(spec.output), points=points, rows=points)
