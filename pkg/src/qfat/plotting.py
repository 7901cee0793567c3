"""Deterministic SVG and CSV emitters for trajectories and sample clouds.

Hand-rolled SVG keeps outputs byte-stable for a fixed seed: coordinates are
formatted at fixed precision and no timestamps or library version strings
are embedded.  Run metadata rides in a leading XML comment / '#' line.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any, Sequence

import numpy as np

_SIZE = 640.0
_MARGIN = 40.0

_COLORS = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"]


def _mapper(bounds: tuple[float, float, float, float]):
    x0, y0, x1, y1 = bounds
    span = max(x1 - x0, y1 - y0, 1e-9)
    scale = (_SIZE - 2 * _MARGIN) / span

    def to_px(p):
        px = _MARGIN + (p[0] - x0) * scale
        py = _SIZE - _MARGIN - (p[1] - y0) * scale
        return px, py

    return to_px


def _bounds_of(arrays: Sequence[np.ndarray], pad: float = 0.1) -> tuple[float, float, float, float]:
    allpts = np.concatenate([np.asarray(a).reshape(-1, 2) for a in arrays], axis=0)
    x0, y0 = allpts.min(axis=0) - pad
    x1, y1 = allpts.max(axis=0) + pad
    return float(x0), float(y0), float(x1), float(y1)


def svg_trajectories(paths: Sequence[np.ndarray], out_path: str | Path,
                     discs: Sequence[tuple[np.ndarray, float, str]] = (),
                     colors: Sequence[str] | None = None,
                     meta: dict[str, Any] | None = None,
                     title: str = "") -> None:
    """Overlay 2-D trajectories as polylines with optional goal discs."""
    bounds = _bounds_of(list(paths) + [np.asarray(c)[None, :] for c, _, _ in discs])
    to_px = _mapper(bounds)
    x0, y0, x1, y1 = bounds
    scale = (_SIZE - 2 * _MARGIN) / max(x1 - x0, y1 - y0, 1e-9)
    lines = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{_SIZE:.0f}" height="{_SIZE:.0f}" '
             f'viewBox="0 0 {_SIZE:.0f} {_SIZE:.0f}">']
    if meta is not None:
        lines.append(f"<!-- {json.dumps(meta)} -->")
    lines.append(f'<rect width="{_SIZE:.0f}" height="{_SIZE:.0f}" fill="white"/>')
    if title:
        lines.append(f'<text x="{_MARGIN:.0f}" y="24" font-size="16" font-family="monospace">{title}</text>')
    for center, radius, color in discs:
        cx, cy = to_px(center)
        lines.append(f'<circle cx="{cx:.2f}" cy="{cy:.2f}" r="{radius * scale:.2f}" '
                     f'fill="{color}" fill-opacity="0.25" stroke="{color}"/>')
    for i, path in enumerate(paths):
        color = (colors[i] if colors is not None else _COLORS[i % len(_COLORS)])
        pts = " ".join(f"{px:.2f},{py:.2f}" for px, py in (to_px(p) for p in np.asarray(path)))
        lines.append(f'<polyline points="{pts}" fill="none" stroke="{color}" '
                     f'stroke-width="1" stroke-opacity="0.45"/>')
    lines.append("</svg>")
    Path(out_path).write_text("\n".join(lines) + "\n")


def svg_points(groups: Sequence[tuple[str, np.ndarray]], out_path: str | Path,
               meta: dict[str, Any] | None = None, title: str = "") -> None:
    """Scatter labelled point groups (one color per group) with a legend."""
    bounds = _bounds_of([pts for _, pts in groups])
    to_px = _mapper(bounds)
    lines = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{_SIZE:.0f}" height="{_SIZE:.0f}" '
             f'viewBox="0 0 {_SIZE:.0f} {_SIZE:.0f}">']
    if meta is not None:
        lines.append(f"<!-- {json.dumps(meta)} -->")
    lines.append(f'<rect width="{_SIZE:.0f}" height="{_SIZE:.0f}" fill="white"/>')
    if title:
        lines.append(f'<text x="{_MARGIN:.0f}" y="24" font-size="16" font-family="monospace">{title}</text>')
    for i, (label, pts) in enumerate(groups):
        color = _COLORS[i % len(_COLORS)]
        for p in np.asarray(pts):
            px, py = to_px(p)
            lines.append(f'<circle cx="{px:.2f}" cy="{py:.2f}" r="2" fill="{color}" fill-opacity="0.5"/>')
        lines.append(f'<text x="{_MARGIN:.0f}" y="{44 + 18 * i:.0f}" font-size="13" '
                     f'font-family="monospace" fill="{color}">{label} (n={len(pts)})</text>')
    lines.append("</svg>")
    Path(out_path).write_text("\n".join(lines) + "\n")


def write_rollout_csv(episodes, out_path: str | Path, meta: dict[str, Any] | None = None) -> None:
    """Per-step trajectory table: episode, step, x, y, ax, ay."""
    with open(out_path, "w") as fh:
        if meta is not None:
            fh.write("# " + json.dumps(meta) + "\n")
        fh.write("episode,step,x,y,ax,ay\n")
        for ep_idx, ep in enumerate(episodes):
            for t in range(ep.actions.shape[0]):
                x, y = ep.states[t]
                ax, ay = ep.actions[t]
                fh.write(f"{ep_idx},{t},{x:.9f},{y:.9f},{ax:.9f},{ay:.9f}\n")
