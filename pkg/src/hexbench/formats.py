"""Mesh file I/O: MEDIT .mesh, legacy ASCII VTK, and OBJ surface export.

Input tet meshes are normalized (centered, rescaled into a unit bounding
box) with the transform kept for de-normalized export. Floats are written
with repr-level precision so save/load round trips are exact.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .meshes import HexMesh, SurfaceMesh, TetMesh


class FileFormatError(Exception):
    def __init__(self, path, line: int | None, message: str):
        self.path = str(path)
        self.line = line
        where = f"{path}:{line}" if line is not None else str(path)
        super().__init__(f"{where}: {message}")


@dataclass
class Transform:
    """Normalization x -> (x - center) / scale into the unit bounding box."""

    center: np.ndarray
    scale: float

    def apply(self, points: np.ndarray) -> np.ndarray:
        return (points - self.center) / self.scale

    def invert(self, points: np.ndarray) -> np.ndarray:
        return points * self.scale + self.center

    @classmethod
    def identity(cls) -> "Transform":
        return cls(center=np.zeros(3), scale=1.0)

    @classmethod
    def fit(cls, points: np.ndarray) -> "Transform":
        lo, hi = points.min(axis=0), points.max(axis=0)
        extent = float((hi - lo).max())
        return cls(center=(lo + hi) / 2.0, scale=extent if extent > 0 else 1.0)


def _fmt(x: float) -> str:
    return f"{x:.17g}"


# --- MEDIT ----------------------------------------------------------------------

def _write_medit(path, points, tets=None, hexes=None):
    with open(path, "w") as fh:
        fh.write("MeshVersionFormatted 2\nDimension 3\n")
        fh.write(f"Vertices\n{len(points)}\n")
        for p in points:
            fh.write(f"{_fmt(p[0])} {_fmt(p[1])} {_fmt(p[2])} 0\n")
        if tets is not None and len(tets):
            fh.write(f"Tetrahedra\n{len(tets)}\n")
            for t in tets:
                fh.write(f"{t[0] + 1} {t[1] + 1} {t[2] + 1} {t[3] + 1} 0\n")
        if hexes is not None and len(hexes):
            fh.write(f"Hexahedra\n{len(hexes)}\n")
            for h in hexes:
                fh.write(" ".join(str(v + 1) for v in h) + " 0\n")
        fh.write("End\n")


def _read_medit(path):
    points, tets, hexes = [], [], []
    lines = Path(path).read_text().splitlines()
    i = 0

    def next_content(start):
        j = start
        while j < len(lines):
            s = lines[j].strip()
            if s and not s.startswith("#"):
                return j
            j += 1
        return None

    def read_block(start, n, width, out, kind):
        j = start
        for row in range(n):
            j = next_content(j)
            if j is None:
                raise FileFormatError(path, len(lines), f"truncated {kind} block")
            parts = lines[j].split()
            if len(parts) < width:
                raise FileFormatError(path, j + 1, f"expected {width} fields")
            try:
                if kind == "vertex":
                    out.append([float(v) for v in parts[:3]])
                else:
                    out.append([int(v) - 1 for v in parts[:width]])
            except ValueError as exc:
                raise FileFormatError(path, j + 1, str(exc)) from exc
            j += 1
        return j

    while True:
        i = next_content(i)
        if i is None:
            break
        token = lines[i].split()[0].lower()
        if token in ("meshversionformatted", "dimension"):
            # Value may sit on the same or the following line.
            i = i + 1 if len(lines[i].split()) > 1 else i + 2
            continue
        if token in ("vertices", "tetrahedra", "hexahedra", "hexaedra"):
            j = next_content(i + 1)
            if j is None:
                raise FileFormatError(path, i + 1, "missing element count")
            try:
                n = int(lines[j].split()[0])
            except ValueError as exc:
                raise FileFormatError(path, j + 1, "bad element count") from exc
            if token == "vertices":
                i = read_block(j + 1, n, 3, points, "vertex")
            elif token == "tetrahedra":
                i = read_block(j + 1, n, 4, tets, "tet")
            else:
                i = read_block(j + 1, n, 8, hexes, "hex")
            continue
        if token == "end":
            break
        # Skip unknown sections conservatively: they would need their counts,
        # so reject instead of guessing.
        raise FileFormatError(path, i + 1, f"unsupported section '{lines[i].strip()}'")
    if not points:
        raise FileFormatError(path, None, "no vertices found")
    return np.array(points), np.array(tets, dtype=np.int64).reshape(-1, 4) if tets \
        else np.zeros((0, 4), np.int64), \
        np.array(hexes, dtype=np.int64).reshape(-1, 8) if hexes \
        else np.zeros((0, 8), np.int64)


# --- VTK legacy -----------------------------------------------------------------

VTK_TET = 10
VTK_HEX = 12


def _write_vtk(path, points, tets=None, hexes=None):
    cells = []
    types = []
    for arr, code in ((tets, VTK_TET), (hexes, VTK_HEX)):
        if arr is not None:
            for c in arr:
                cells.append(list(int(v) for v in c))
                types.append(code)
    with open(path, "w") as fh:
        fh.write("# vtk DataFile Version 3.0\nhexbench mesh\nASCII\n")
        fh.write("DATASET UNSTRUCTURED_GRID\n")
        fh.write(f"POINTS {len(points)} double\n")
        for p in points:
            fh.write(f"{_fmt(p[0])} {_fmt(p[1])} {_fmt(p[2])}\n")
        total = sum(len(c) + 1 for c in cells)
        fh.write(f"CELLS {len(cells)} {total}\n")
        for c in cells:
            fh.write(" ".join([str(len(c))] + [str(v) for v in c]) + "\n")
        fh.write(f"CELL_TYPES {len(cells)}\n")
        for t in types:
            fh.write(f"{t}\n")


def _read_vtk(path):
    lines = Path(path).read_text().splitlines()
    tokens: list[tuple[int, str]] = []
    for ln, line in enumerate(lines, start=1):
        for tok in line.split():
            tokens.append((ln, tok))
    pos = 0

    def expect(predicate, what):
        nonlocal pos
        if pos >= len(tokens):
            raise FileFormatError(path, len(lines), f"unexpected end, wanted {what}")
        ln, tok = tokens[pos]
        if not predicate(tok):
            raise FileFormatError(path, ln, f"expected {what}, got '{tok}'")
        pos += 1
        return tok

    def find_keyword(word):
        nonlocal pos
        while pos < len(tokens):
            if tokens[pos][1].upper() == word:
                pos += 1
                return True
            pos += 1
        return False

    if not find_keyword("DATASET"):
        raise FileFormatError(path, None, "not a VTK dataset file")
    expect(lambda t: t.upper() == "UNSTRUCTURED_GRID", "UNSTRUCTURED_GRID")
    if not find_keyword("POINTS"):
        raise FileFormatError(path, None, "missing POINTS")
    n_pts = int(expect(lambda t: t.lstrip("-").isdigit(), "point count"))
    expect(lambda t: True, "point dtype")
    points = np.empty((n_pts, 3))
    for i in range(n_pts):
        for k in range(3):
            ln, tok = tokens[pos]
            try:
                points[i, k] = float(tok)
            except ValueError as exc:
                raise FileFormatError(path, ln, f"bad coordinate '{tok}'") from exc
            pos += 1
    if not find_keyword("CELLS"):
        raise FileFormatError(path, None, "missing CELLS")
    n_cells = int(expect(lambda t: t.isdigit(), "cell count"))
    expect(lambda t: t.isdigit(), "cell list size")
    raw_cells = []
    for _ in range(n_cells):
        ln, tok = tokens[pos]
        width = int(tok)
        pos += 1
        cell = []
        for _ in range(width):
            cell.append(int(tokens[pos][1]))
            pos += 1
        raw_cells.append((ln, cell))
    if not find_keyword("CELL_TYPES"):
        raise FileFormatError(path, None, "missing CELL_TYPES")
    expect(lambda t: t.isdigit(), "cell type count")
    tets, hexes = [], []
    for ln_cell, cell in raw_cells:
        ln, tok = tokens[pos]
        pos += 1
        code = int(tok)
        if code == VTK_TET:
            if len(cell) != 4:
                raise FileFormatError(path, ln_cell, "tet cell needs 4 indices")
            tets.append(cell)
        elif code == VTK_HEX:
            if len(cell) != 8:
                raise FileFormatError(path, ln_cell, "hex cell needs 8 indices")
            hexes.append(cell)
        else:
            raise FileFormatError(path, ln, f"unsupported cell type {code}")
    return points, \
        np.array(tets, dtype=np.int64).reshape(-1, 4) if tets else np.zeros((0, 4), np.int64), \
        np.array(hexes, dtype=np.int64).reshape(-1, 8) if hexes else np.zeros((0, 8), np.int64)


# --- public API -----------------------------------------------------------------

def _read_any(path):
    suffix = Path(path).suffix.lower()
    if suffix == ".mesh":
        return _read_medit(path)
    if suffix == ".vtk":
        return _read_vtk(path)
    raise FileFormatError(path, None, f"unsupported extension '{suffix}'")


def load_tet_mesh(path, normalize: bool = True) -> tuple[TetMesh, Transform]:
    """Load a tet mesh; reorients negative tets with a notice and normalizes
    into the unit bounding box unless told otherwise."""
    points, tets, hexes = _read_any(path)
    if len(hexes):
        raise FileFormatError(path, None, "expected a tetrahedral mesh, found hexes")
    if not len(tets):
        raise FileFormatError(path, None, "no tetrahedra in file")
    probe = TetMesh(points, tets)
    if (probe.cell_volumes() < 0).any():
        warnings.warn(f"{path}: reoriented negative-volume tets")
    mesh = TetMesh.create(points, tets, reorient=True)
    transform = Transform.fit(mesh.points) if normalize else Transform.identity()
    return TetMesh(transform.apply(mesh.points), mesh.tets), transform


def load_hex_mesh(path) -> HexMesh:
    points, tets, hexes = _read_any(path)
    if len(tets):
        raise FileFormatError(path, None, "expected a hexahedral mesh, found tets")
    if not len(hexes):
        raise FileFormatError(path, None, "no hexahedra in file")
    return HexMesh(points, hexes)


def save_tet_mesh(path, mesh: TetMesh, transform: Transform | None = None) -> None:
    points = mesh.points if transform is None else transform.invert(mesh.points)
    suffix = Path(path).suffix.lower()
    if suffix == ".mesh":
        _write_medit(path, points, tets=mesh.tets)
    elif suffix == ".vtk":
        _write_vtk(path, points, tets=mesh.tets)
    else:
        raise FileFormatError(path, None, f"unsupported extension '{suffix}'")


def save_hex_mesh(path, mesh: HexMesh, transform: Transform | None = None,
                  positions: np.ndarray | None = None) -> None:
    points = mesh.points if positions is None else positions
    if transform is not None:
        points = transform.invert(points)
    suffix = Path(path).suffix.lower()
    if suffix == ".mesh":
        _write_medit(path, points, hexes=mesh.hexes)
    elif suffix == ".vtk":
        _write_vtk(path, points, hexes=mesh.hexes)
    elif suffix == ".obj":
        save_surface_obj(path, mesh.boundary() if positions is None else
                         _moved_boundary(mesh, points))
    else:
        raise FileFormatError(path, None, f"unsupported extension '{suffix}'")


def _moved_boundary(mesh: HexMesh, points: np.ndarray) -> SurfaceMesh:
    surf = mesh.boundary()
    return SurfaceMesh(points=points[surf.vertex_map], faces=surf.faces,
                       vertex_map=surf.vertex_map)


def save_surface_obj(path, surface: SurfaceMesh) -> None:
    """Surface-only OBJ export (triangles or quads)."""
    with open(path, "w") as fh:
        for p in surface.points:
            fh.write(f"v {_fmt(p[0])} {_fmt(p[1])} {_fmt(p[2])}\n")
        for f in surface.faces:
            fh.write("f " + " ".join(str(v + 1) for v in f) + "\n")
