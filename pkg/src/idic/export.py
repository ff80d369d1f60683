"""Field export: plain CSV (x, y, value) and legacy ASCII VTK unstructured grids."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .mesh import Mesh


def write_field_csv(path, mesh: Mesh, values, name: str = "value") -> None:
    values = np.asarray(values, dtype=float)
    if values.shape[0] != mesh.num_vertices:
        raise ValueError("CSV export expects one value (row) per vertex")
    cols = values.reshape(mesh.num_vertices, -1)
    if cols.shape[1] == 1:
        names = [name]
    else:
        names = [f"{name}_{c}" for c in "xyz"[: cols.shape[1]]]
    data = np.column_stack([mesh.vertices, cols])
    header = ",".join(["x", "y", *names])
    np.savetxt(path, data, delimiter=",", header=header, comments="", fmt="%.17g")


def read_field_csv(path) -> tuple[np.ndarray, np.ndarray, list[str]]:
    """Returns (points, values, column names); values squeezed for scalar fields."""
    path = Path(path)
    with path.open() as fh:
        header = fh.readline().strip().split(",")
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    vals = data[:, 2:]
    if vals.shape[1] == 1:
        vals = vals[:, 0]
    return data[:, :2], vals, header[2:]


def write_vtk(path, mesh: Mesh, point_data: dict | None = None, cell_data: dict | None = None,
              title: str = "idic field") -> None:
    """Legacy ASCII VTK; 2-column arrays are written as 3D vectors with z = 0."""
    pts = mesh.vertices
    tri = mesh.triangles
    lines = ["# vtk DataFile Version 3.0", title[:255], "ASCII", "DATASET UNSTRUCTURED_GRID",
             f"POINTS {len(pts)} double"]
    lines += [f"{x:.17g} {y:.17g} 0" for x, y in pts]
    lines.append(f"CELLS {len(tri)} {4 * len(tri)}")
    lines += [f"3 {a} {b} {c}" for a, b, c in tri]
    lines.append(f"CELL_TYPES {len(tri)}")
    lines += ["5"] * len(tri)
    for label, count, data in (("POINT_DATA", len(pts), point_data), ("CELL_DATA", len(tri), cell_data)):
        if not data:
            continue
        lines.append(f"{label} {count}")
        for name, arr in data.items():
            lines += _vtk_array(name, np.asarray(arr, dtype=float), count)
    Path(path).write_text("\n".join(lines) + "\n")


def _vtk_array(name: str, arr: np.ndarray, count: int) -> list[str]:
    if arr.shape[0] != count:
        raise ValueError(f"array {name!r} has {arr.shape[0]} rows, expected {count}")
    if arr.ndim == 1:
        return [f"SCALARS {name} double 1", "LOOKUP_TABLE default"] + [f"{v:.17g}" for v in arr]
    arr = arr.reshape(count, -1)
    if arr.shape[1] == 2:
        return [f"VECTORS {name} double"] + [f"{a:.17g} {b:.17g} 0" for a, b in arr]
    if arr.shape[1] == 4:
        # 2x2 tensor padded to 3x3
        out = [f"TENSORS {name} double"]
        for a, b, c, d in arr:
            out.append(f"{a:.17g} {b:.17g} 0\n{c:.17g} {d:.17g} 0\n0 0 0")
        return out
    return [f"FIELD {name}_data 1", f"{name} {arr.shape[1]} {count} double"] + [
        " ".join(f"{v:.17g}" for v in row) for row in arr]
