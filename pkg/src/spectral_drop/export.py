"""ASCII legacy VTK unstructured grids, edge-tag tables and CSV helpers."""
from __future__ import annotations

import csv
import io
import os
import tempfile
from pathlib import Path

import numpy as np

from .errors import ValidationError
from .geometry import Mesh

VTK_TRIANGLE = 5


def fmt(x) -> str:
    return format(float(x), ".17g")


def atomic_write(path, text: str) -> None:
    """Write ``text`` to ``path`` through a temporary file and a rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([fmt(v) if isinstance(v, (float, np.floating)) else v for v in row])
    return buf.getvalue()


def _check_fields(fields: dict, n: int, what: str):
    out = {}
    for name, arr in (fields or {}).items():
        arr = np.asarray(arr, dtype=float)
        if arr.shape != (n,):
            raise ValidationError(f"{what} field {name!r} has shape {arr.shape}, expected ({n},)")
        if not name or any(ch.isspace() for ch in name):
            raise ValidationError(f"field name {name!r} must be non-empty without whitespace")
        out[name] = arr
    return out


def vtk_text(mesh: Mesh, point_data=None, cell_data=None, title="spectral-drop") -> str:
    point_data = _check_fields(point_data, mesh.n_vertices, "point")
    cell_data = _check_fields(cell_data, mesh.n_cells, "cell")
    lines = ["# vtk DataFile Version 3.0", title.replace("\n", " ")[:255], "ASCII",
             "DATASET UNSTRUCTURED_GRID", f"POINTS {mesh.n_vertices} double"]
    lines += [f"{fmt(x)} {fmt(y)} 0" for x, y in mesh.vertices]
    m = mesh.n_cells
    lines.append(f"CELLS {m} {4 * m}")
    lines += [f"3 {a} {b} {c}" for a, b, c in mesh.triangles]
    lines.append(f"CELL_TYPES {m}")
    lines += [str(VTK_TRIANGLE)] * m
    for section, n, data in (("CELL_DATA", m, cell_data), ("POINT_DATA", mesh.n_vertices, point_data)):
        if not data:
            continue
        lines.append(f"{section} {n}")
        for name, arr in data.items():
            lines += [f"SCALARS {name} double 1", "LOOKUP_TABLE default"]
            lines += [fmt(v) for v in arr]
    return "\n".join(lines) + "\n"


def write_vtk(path, mesh: Mesh, point_data=None, cell_data=None, title="spectral-drop") -> None:
    atomic_write(path, vtk_text(mesh, point_data, cell_data, title))


def read_vtk(path):
    """Parse a file written by :func:`write_vtk`.

    Returns ``(vertices, triangles, point_data, cell_data)``.
    """
    tokens = Path(path).read_text().split("\n")
    if not tokens or not tokens[0].startswith("# vtk DataFile"):
        raise ValidationError(f"{path}: not a legacy VTK file")
    if tokens[2].strip() != "ASCII":
        raise ValidationError(f"{path}: only ASCII files are supported")
    words = " ".join(tokens[3:]).split()
    pos = 0

    def take(k):
        nonlocal pos
        out = words[pos:pos + k]
        if len(out) < k:
            raise ValidationError(f"{path}: truncated file")
        pos += k
        return out

    vertices = triangles = None
    point_data, cell_data = {}, {}
    current = None
    while pos < len(words):
        key = take(1)[0]
        if key == "DATASET":
            if take(1)[0] != "UNSTRUCTURED_GRID":
                raise ValidationError(f"{path}: only unstructured grids are supported")
        elif key == "POINTS":
            n, _ = take(2)
            vertices = np.array(take(3 * int(n)), dtype=float).reshape(-1, 3)[:, :2]
        elif key == "CELLS":
            m, size = map(int, take(2))
            raw = np.array(take(size), dtype=np.int64).reshape(m, -1)
            if raw.shape[1] != 4 or np.any(raw[:, 0] != 3):
                raise ValidationError(f"{path}: only triangle cells are supported")
            triangles = raw[:, 1:]
        elif key == "CELL_TYPES":
            m = int(take(1)[0])
            if np.any(np.array(take(m), dtype=int) != VTK_TRIANGLE):
                raise ValidationError(f"{path}: only triangle cells are supported")
        elif key in ("CELL_DATA", "POINT_DATA"):
            current = (cell_data if key == "CELL_DATA" else point_data, int(take(1)[0]))
        elif key == "SCALARS":
            name, _dtype = take(2)
            # optional component count
            if pos < len(words) and words[pos].isdigit():
                take(1)
            if take(2) != ["LOOKUP_TABLE", "default"]:
                raise ValidationError(f"{path}: expected LOOKUP_TABLE default")
            if current is None:
                raise ValidationError(f"{path}: SCALARS outside a data section")
            store, n = current
            store[name] = np.array(take(n), dtype=float)
        else:
            raise ValidationError(f"{path}: unexpected keyword {key!r}")
    if vertices is None or triangles is None:
        raise ValidationError(f"{path}: missing POINTS or CELLS")
    return vertices, triangles, point_data, cell_data


def edge_table_text(mesh: Mesh) -> str:
    rows = [(int(a), int(b), "neumann" if t == 0 else "artificial")
            for (a, b), t in zip(mesh.boundary_edges, mesh.edge_tags)]
    return csv_text(["v0", "v1", "tag"], rows)


def read_edge_table(path):
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["v0", "v1", "tag"]:
            raise ValidationError(f"{path}: expected columns v0,v1,tag")
        edges, tags = [], []
        for row in reader:
            edges.append((int(row["v0"]), int(row["v1"])))
            if row["tag"] not in ("neumann", "artificial"):
                raise ValidationError(f"{path}: unknown edge tag {row['tag']!r}")
            tags.append(0 if row["tag"] == "neumann" else 1)
    return np.array(edges, dtype=np.int64).reshape(-1, 2), np.array(tags, dtype=np.int8)


def load_mesh(vtk_path, edges_path, h: float):
    verts, tris, pdata, cdata = read_vtk(vtk_path)
    edges, tags = read_edge_table(edges_path)
    return Mesh(verts, tris, edges, tags, h), pdata, cdata
