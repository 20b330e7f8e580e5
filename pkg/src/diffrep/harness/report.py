"""Report files: JSON payload, CSV tables, SVG heatmaps and curves.

Field names in ``report.json``:

``task``        subcommand name
``config``      resolved config without runtime keys (workers, out)
``provenance``  package / torch / numpy / python versions
``results``     task-specific result object

Nothing time- or host-dependent is written, so reruns of the same config
produce identical bytes.
"""

from __future__ import annotations

import csv
import io
import json
import math
import platform
from html import escape
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch


def versions() -> dict:
    from importlib.metadata import PackageNotFoundError, version

    try:
        pkg = version("artifact")
    except PackageNotFoundError:
        pkg = "unknown"
    return {"artifact": pkg, "torch": torch.__version__, "numpy": np.__version__,
            "python": platform.python_version()}


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, torch.Tensor):
        return _jsonable(x.tolist())
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (np.floating,)):
        x = float(x)
    if isinstance(x, float) and not math.isfinite(x):
        return str(x)
    return x


def to_json(obj) -> str:
    return json.dumps(_jsonable(obj), sort_keys=True, indent=2) + "\n"


def to_csv(header: Sequence[str], rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow(["" if r.get(h) is None else (repr(r[h]) if isinstance(r[h], float) else r[h]) for h in header])
    return buf.getvalue()


def _color(v: float, lo: float, hi: float) -> str:
    # white -> dark blue ramp
    f = 0.0 if hi <= lo else (v - lo) / (hi - lo)
    f = min(1.0, max(0.0, f))
    r = round(255 - f * (255 - 8))
    g = round(255 - f * (255 - 48))
    b = round(255 - f * (255 - 107))
    return f"#{r:02x}{g:02x}{b:02x}"


def heatmap_svg(values, row_labels: Sequence, col_labels: Sequence, title: str = "",
                lo: Optional[float] = None, hi: Optional[float] = None, cell: int = 36) -> str:
    """Annotated heatmap; NaN cells are drawn grey."""
    v = np.asarray(values, dtype=np.float64)
    finite = v[np.isfinite(v)]
    lo = float(finite.min()) if lo is None and finite.size else (lo if lo is not None else 0.0)
    hi = float(finite.max()) if hi is None and finite.size else (hi if hi is not None else 1.0)
    left, top = 80, 40
    w = left + cell * v.shape[1] + 20
    h = top + cell * v.shape[0] + 40
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="10">',
           f'<text x="{left}" y="20" font-size="12">{escape(title)}</text>']
    for i in range(v.shape[0]):
        y = top + i * cell
        out.append(f'<text x="{left - 4}" y="{y + cell // 2 + 3}" text-anchor="end">{escape(str(row_labels[i]))}</text>')
        for j in range(v.shape[1]):
            x = left + j * cell
            val = v[i, j]
            fill = _color(val, lo, hi) if math.isfinite(val) else "#bbbbbb"
            txt = f"{val:.2f}" if math.isfinite(val) else "-"
            ink = "#ffffff" if math.isfinite(val) and hi > lo and (val - lo) / (hi - lo) > 0.6 else "#000000"
            out.append(f'<rect x="{x}" y="{y}" width="{cell}" height="{cell}" fill="{fill}"/>')
            out.append(f'<text x="{x + cell // 2}" y="{y + cell // 2 + 3}" text-anchor="middle" fill="{ink}">{txt}</text>')
    yb = top + v.shape[0] * cell + 14
    for j in range(v.shape[1]):
        out.append(f'<text x="{left + j * cell + cell // 2}" y="{yb}" text-anchor="middle">{escape(str(col_labels[j]))}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def curve_svg(ys: Sequence[float], title: str = "", width: int = 480, height: int = 240) -> str:
    ys = [float(y) for y in ys if math.isfinite(float(y))]
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="10">',
           f'<text x="10" y="16" font-size="12">{escape(title)}</text>']
    if len(ys) >= 2:
        lo, hi = min(ys), max(ys)
        span = hi - lo or 1.0
        pts = " ".join(
            f"{40 + i * (width - 60) / (len(ys) - 1):.2f},{height - 30 - (y - lo) / span * (height - 60):.2f}"
            for i, y in enumerate(ys)
        )
        out.append(f'<polyline fill="none" stroke="#08306b" stroke-width="1.5" points="{pts}"/>')
        out.append(f'<text x="4" y="{height - 30}">{lo:.3g}</text><text x="4" y="34">{hi:.3g}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def emit_report(
    directory,
    task: str,
    config: dict,
    results: dict,
    tables: Optional[Dict[str, tuple]] = None,
    heatmaps: Optional[Dict[str, tuple]] = None,
    curves: Optional[Dict[str, tuple]] = None,
) -> List[Path]:
    """Write ``report.json`` plus ``<name>.csv`` / ``<name>.svg`` files.

    ``tables``: name -> (header, rows). ``heatmaps``: name -> (values,
    row_labels, col_labels, title). ``curves``: name -> (ys, title).
    """
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    files = {"report.json": to_json({"task": task, "config": config, "provenance": versions(), "results": results})}
    for name, (header, rows) in (tables or {}).items():
        files[f"{name}.csv"] = to_csv(header, rows)
    for name, spec in (heatmaps or {}).items():
        files[f"{name}.svg"] = heatmap_svg(*spec)
    for name, (ys, title) in (curves or {}).items():
        files[f"{name}.svg"] = curve_svg(ys, title)
    written = []
    for name, text in files.items():
        p = d / name
        try:
            p.write_text(text)
        except OSError as exc:
            raise OSError(f"failed writing report file {p}: {exc}") from exc
        written.append(p)
    return written
