"""Learned grid layouts: which skeleton joint dominates each grid cell.

The dominant joint of cell ``i`` is ``argmax_j |P[i, j]|`` of the composed
transform ``P = Φ_k Λ_k ··· Φ_1 (Λ_1 A)`` (ties to the lowest joint index).
Two joints are linked when their cells touch (4-neighbourhood); the link
weight counts touching cell pairs. This is a derived visualization of the
learned transforms, not a quantity the model optimizes.
"""

import csv
import io
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
from jinja2 import Environment, FileSystemLoader, select_autoescape

from .errors import ConfigError, LoadError
from .network import Recognizer
from .skeleton import SkeletonGraph, rest_pose
from .transform import GridSize, composed_matrix

logger = logging.getLogger("ske2grid.layout")

LAYOUT_FORMATS = ("csv", "dot", "svg")
DERIVED_NOTE = (
    "derived visualization: dominant source joint per grid cell = argmax |composed transform|; "
    "joints linked when their cells are 4-adjacent"
)


@dataclass
class GridLayout:
    graph: SkeletonGraph
    grid: GridSize
    stage: int
    cell_joints: np.ndarray
    edges: Dict[Tuple[int, int], int]
    config_hash: str = ""

    @property
    def joint_cell_counts(self) -> np.ndarray:
        return np.bincount(self.cell_joints.ravel(), minlength=self.graph.n_joints)


def dominant_joints(P: np.ndarray, grid: GridSize) -> np.ndarray:
    if P.shape[0] != grid.cells:
        raise ConfigError(f"composed transform has {P.shape[0]} rows for a {grid} grid", "stage")
    return np.argmax(np.abs(P), axis=1).reshape(grid.height, grid.width)


def induced_edges(cell_joints: np.ndarray) -> Dict[Tuple[int, int], int]:
    """Undirected joint pairs ``(i < j)`` whose cells touch, with touch counts."""
    edges: Dict[Tuple[int, int], int] = {}
    height, width = cell_joints.shape
    for r in range(height):
        for c in range(width):
            here = int(cell_joints[r, c])
            for nr, nc in ((r, c + 1), (r + 1, c)):
                if nr < height and nc < width:
                    there = int(cell_joints[nr, nc])
                    if there != here:
                        key = (min(here, there), max(here, there))
                        edges[key] = edges.get(key, 0) + 1
    return dict(sorted(edges.items()))


def induced_adjacency(edges: Dict[Tuple[int, int], int], n_joints: int) -> np.ndarray:
    """Symmetric weighted adjacency with an empty diagonal."""
    matrix = np.zeros((n_joints, n_joints), dtype=np.int64)
    for (i, j), count in edges.items():
        matrix[i, j] = matrix[j, i] = count
    return matrix


def layout_from_recognizer(
    recognizer: Recognizer, stage: Optional[int] = None, config_hash: str = ""
) -> GridLayout:
    """Layout of the ``stage``-th grid (1-based, default the last) of a recognizer's cascade."""
    cascade = recognizer.cascade
    if cascade is None or not cascade.stages:
        raise LoadError("checkpoint has no transform stages to lay out", "stage1.psi")
    stage = stage or len(cascade.stages)
    if not 1 <= stage <= len(cascade.stages):
        raise ConfigError(f"stage {stage} out of range 1..{len(cascade.stages)}", "--stage")
    grid = cascade.stages[stage - 1].grid
    P = composed_matrix(cascade, recognizer.regulation, upto=stage)
    cells = dominant_joints(P, grid)
    return GridLayout(recognizer.graph, grid, stage, cells, induced_edges(cells), config_hash)


# --- rendering --------------------------------------------------------------------------


def render_csv(layout: GridLayout) -> str:
    out = io.StringIO()
    out.write(f"# {DERIVED_NOTE}\n")
    out.write(f"# graph={layout.graph.name} grid={layout.grid} stage={layout.stage}")
    if layout.config_hash:
        out.write(f" config_hash={layout.config_hash}")
    out.write("\n")
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(["row", "col", "cell", "joint", "joint_name"])
    for r in range(layout.grid.height):
        for c in range(layout.grid.width):
            joint = int(layout.cell_joints[r, c])
            writer.writerow([r, c, r * layout.grid.width + c, joint, layout.graph.joint_label(joint)])
    return out.getvalue()


def _palette(n: int) -> List[str]:
    return [f"hsl({round(360 * j / max(1, n))}, 65%, 70%)" for j in range(n)]


def _template_context(layout: GridLayout) -> Dict[str, object]:
    pose = rest_pose(layout.graph)
    xs, ys = pose[:, 0], pose[:, 1]
    span_x = max(1e-9, float(xs.max() - xs.min()))
    span_y = max(1e-9, float(ys.max() - ys.min()))
    cell = 40
    grid_w = layout.grid.width * cell
    panel = 320
    joints = []
    colors = _palette(layout.graph.n_joints)
    for j in range(layout.graph.n_joints):
        joints.append(
            {
                "index": j,
                "label": layout.graph.joint_label(j),
                "x": round(grid_w + 40 + 20 + (xs[j] - xs.min()) / span_x * (panel - 40), 2),
                "y": round(20 + (ys.max() - ys[j]) / span_y * (panel - 40), 2),
                "color": colors[j],
                "cells": int(layout.joint_cell_counts[j]),
            }
        )
    cells = []
    for r in range(layout.grid.height):
        for c in range(layout.grid.width):
            joint = int(layout.cell_joints[r, c])
            cells.append(
                {"x": c * cell, "y": r * cell, "joint": joint, "color": colors[joint], "size": cell}
            )
    top = max(layout.edges.values()) if layout.edges else 1
    return {
        "note": DERIVED_NOTE,
        "graph": layout.graph,
        "grid": layout.grid,
        "stage": layout.stage,
        "config_hash": layout.config_hash,
        "joints": joints,
        "bones": list(layout.graph.edges),
        "edges": [
            {"a": a, "b": b, "count": n, "width": round(1.0 + 4.0 * n / top, 2)}
            for (a, b), n in layout.edges.items()
        ],
        "cells": cells,
        "width": grid_w + 40 + panel,
        "height": max(layout.grid.height * cell, panel) + 30,
    }


def template_environment(templates_dir: Path) -> Environment:
    return Environment(
        loader=FileSystemLoader(templates_dir),
        autoescape=select_autoescape(["svg", "svg.j2"]),
        trim_blocks=True,
        lstrip_blocks=True,
        keep_trailing_newline=True,
    )


def render_layout(layout: GridLayout, fmt: str, templates_dir: Path) -> str:
    if fmt == "csv":
        return render_csv(layout)
    if fmt not in LAYOUT_FORMATS:
        raise ConfigError(f"unknown layout format '{fmt}' ({', '.join(LAYOUT_FORMATS)})", "--format")
    env = template_environment(templates_dir)
    return env.get_template(f"layout.{fmt}.j2").render(**_template_context(layout))


def write_layout(layout: GridLayout, path: Path, fmt: str, templates_dir: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(render_layout(layout, fmt, templates_dir), encoding="utf-8")
    logger.info(f"Wrote {fmt} layout of stage {layout.stage} ({layout.grid}) to {path}")
    return path
