"""Top-down SVG frames of a scenario."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .mapgraph import Lane, LaneLine
from .scenario import ScenarioDescription

COLORS = {"vehicle": "#3b6fd8", "pedestrian": "#2ca02c", "cyclist": "#17becf",
          "cone": "#ff7f0e", "barrier": "#8c564b"}
EGO_COLOR = "#d62728"
LINE_STYLE = {"broken": ('#ffffff', ' stroke-dasharray="3,3"'),
              "solid": ("#f2c744", ""),
              "road_edge": ("#222222", "")}


def _f(x: float) -> str:
    return f"{x:.3f}".rstrip("0").rstrip(".")


def _points(pts) -> str:
    return " ".join(f"{_f(p[0])},{_f(p[1])}" for p in pts)


def _box(x, y, h, length, width) -> np.ndarray:
    c, s = np.cos(h), np.sin(h)
    hl, hw = 0.5 * length, 0.5 * width
    local = np.array([(hl, hw), (-hl, hw), (-hl, -hw), (hl, -hw)])
    return np.column_stack((x + local[:, 0] * c - local[:, 1] * s, y + local[:, 0] * s + local[:, 1] * c))


def _center(desc: ScenarioDescription, frame: int) -> tuple[float, float]:
    ego = desc.tracks[desc.metadata.sdc_id]
    valid = np.flatnonzero(ego.valid)
    if valid.size == 0:
        return 0.0, 0.0
    prior = valid[valid <= frame]
    f = prior[-1] if prior.size else valid[0]
    return float(ego.position[f, 0]), float(ego.position[f, 1])


def render_frame(desc: ScenarioDescription, frame: int, extent: float = 100.0, size: int = 600) -> str:
    """SVG of one frame: lanes gray, lines by type, objects as oriented boxes, ego red."""
    cx, cy = _center(desc, frame)
    half = 0.5 * extent
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" '
           f'viewBox="{_f(cx - half)} {_f(-cy - half)} {_f(extent)} {_f(extent)}">',
           f'<rect x="{_f(cx - half)}" y="{_f(-cy - half)}" width="{_f(extent)}" height="{_f(extent)}" fill="#f7f7f7"/>',
           '<g transform="scale(1,-1)">']
    for feat in desc.map_features.values():
        if isinstance(feat, Lane):
            out.append(f'<polygon points="{_points(feat.polygon[:, :2])}" fill="#b0b0b0" stroke="none"/>')
    for feat in desc.map_features.values():
        if isinstance(feat, LaneLine):
            color, dash = LINE_STYLE[feat.line_type]
            out.append(f'<polyline points="{_points(feat.polyline[:, :2])}" fill="none" '
                       f'stroke="{color}" stroke-width="0.2"{dash}/>')
    ego_id = desc.metadata.sdc_id
    for oid in sorted(desc.tracks, key=lambda k: (k == ego_id, k)):
        tr = desc.tracks[oid]
        if frame >= tr.n_frames or not tr.valid[frame]:
            continue
        box = _box(tr.position[frame, 0], tr.position[frame, 1], tr.heading[frame], tr.length, tr.width)
        color = EGO_COLOR if oid == ego_id else COLORS.get(tr.object_type, "#777777")
        stroke = ' stroke="#000000" stroke-width="0.3"' if oid == ego_id else ""
        out.append(f'<polygon points="{_points(box)}" fill="{color}"{stroke}><title>{oid}</title></polygon>')
    out.append("</g>")
    out.append(f'<text x="{_f(cx - half + 1)}" y="{_f(-cy - half + 4)}" font-size="3">'
               f'{desc.scenario_id} frame {frame}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def write_replay(desc: ScenarioDescription, out_dir, extent: float = 100.0) -> list[Path]:
    """One SVG per recorded frame: ``frame_0000.svg`` ..."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for f in range(desc.metadata.episode_length):
        p = out / f"frame_{f:04d}.svg"
        p.write_text(render_frame(desc, f, extent), encoding="utf-8")
        paths.append(p)
    return paths
