"""Output writers: legacy ASCII VTK snapshots and per-step certificate CSV."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence, TextIO

import numpy as np

from .mesh import TriMesh
from .state import DiscreteState, StepCertificate

CELL_TYPE = {2: 5, 3: 10}
POINT_ARRAYS = ("velocity", "director", "q", "n_plus", "n_minus", "phi", "pressure")


class IoError(OSError):
    pass


def _fmt(x: float) -> str:
    return "%.17g" % x


def _lines(rows: np.ndarray) -> Iterable[str]:
    for row in np.atleast_2d(rows):
        yield " ".join(_fmt(v) for v in row)


def write_vtk_grid(mesh: TriMesh, path: str | Path, point_data: Mapping[str, np.ndarray] | None = None,
                   title: str = "nemelec output") -> None:
    """Write the mesh and nodal arrays (scalars (L,) or 3-vectors (L, 3)) as VTK legacy ASCII 3.0."""
    L, E, dim = mesh.n_nodes, mesh.n_elements, mesh.dim
    pts = np.zeros((L, 3))
    pts[:, :dim] = mesh.nodes
    out = ["# vtk DataFile Version 3.0", title.replace("\n", " ")[:255], "ASCII", "DATASET UNSTRUCTURED_GRID",
           f"POINTS {L} double"]
    out.extend(_lines(pts))
    out.append(f"CELLS {E} {E * (dim + 2)}")
    out.extend(f"{dim + 1} " + " ".join(map(str, el)) for el in mesh.elements)
    out.append(f"CELL_TYPES {E}")
    out.extend([str(CELL_TYPE[dim])] * E)
    if point_data:
        out.append(f"POINT_DATA {L}")
        for name, arr in point_data.items():
            arr = np.asarray(arr, dtype=float)
            if arr.shape[0] != L:
                raise IoError(f"array {name!r} has {arr.shape[0]} entries for {L} points")
            if arr.ndim == 1:
                out.append(f"SCALARS {name} double 1")
                out.append("LOOKUP_TABLE default")
                out.extend(_fmt(v) for v in arr)
            elif arr.ndim == 2 and arr.shape[1] == 3:
                out.append(f"VECTORS {name} double")
                out.extend(_lines(arr))
            else:
                raise IoError(f"array {name!r} must be scalar or 3-vector valued, got shape {arr.shape}")
    try:
        Path(path).write_text("\n".join(out) + "\n")
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def state_point_data(state: DiscreteState, mesh: TriMesh) -> dict[str, np.ndarray]:
    L, dim = mesh.n_nodes, mesh.dim
    vel = np.zeros((L, 3))
    vel[:, :dim] = state.v[:L]  # bubbles vanish at the nodes
    return {"velocity": vel, "director": state.d, "q": state.q, "n_plus": state.n_plus,
            "n_minus": state.n_minus, "phi": state.phi, "pressure": state.p}


def write_vtk(state: DiscreteState, mesh: TriMesh, path: str | Path) -> None:
    write_vtk_grid(mesh, path, state_point_data(state, mesh), title=f"t = {_fmt(state.t)}")


@dataclass
class VtkData:
    title: str
    points: np.ndarray
    cells: list[list[int]]
    cell_types: np.ndarray
    point_data: dict[str, np.ndarray] = field(default_factory=dict)


def read_vtk(path: str | Path) -> VtkData:
    """Read files produced by :func:`write_vtk_grid`."""
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    if len(lines) < 5 or not lines[0].startswith("# vtk DataFile Version"):
        raise IoError("missing VTK header")
    if lines[2].strip() != "ASCII" or lines[3].strip() != "DATASET UNSTRUCTURED_GRID":
        raise IoError("only ASCII unstructured grids are supported")
    i = 4

    def header(expect: str) -> list[str]:
        nonlocal i
        parts = lines[i].split()
        if not parts or parts[0] != expect:
            raise IoError(f"line {i + 1}: expected {expect}")
        i += 1
        return parts

    def block(n: int) -> list[list[str]]:
        nonlocal i
        rows = [ln.split() for ln in lines[i:i + n]]
        if len(rows) != n:
            raise IoError("unexpected end of file")
        i += n
        return rows

    n_pts = int(header("POINTS")[1])
    points = np.array(block(n_pts), dtype=float)
    n_cells = int(header("CELLS")[1])
    cells = [[int(v) for v in row[1:]] for row in block(n_cells)]
    header("CELL_TYPES")
    types = np.array([int(r[0]) for r in block(n_cells)])
    data: dict[str, np.ndarray] = {}
    if i < len(lines) and lines[i].strip():
        header("POINT_DATA")
        while i < len(lines) and lines[i].strip():
            parts = lines[i].split()
            i += 1
            if parts[0] == "SCALARS":
                if lines[i].split()[0] != "LOOKUP_TABLE":
                    raise IoError(f"line {i + 1}: expected LOOKUP_TABLE")
                i += 1
                data[parts[1]] = np.array([r[0] for r in block(n_pts)], dtype=float)
            elif parts[0] == "VECTORS":
                data[parts[1]] = np.array(block(n_pts), dtype=float)
            else:
                raise IoError(f"line {i}: unsupported section {parts[0]}")
    return VtkData(lines[1], points, cells, types, data)


# ---------------------------------------------------------------------------
# certificate time series

TIMESERIES_COLUMNS = (
    "step", "t", "energy", "diss_viscous", "diss_director", "diss_drift", "diss_charge", "damping",
    "energy_residual", "max_norm_violation", "n_plus_min", "n_plus_max", "n_minus_min", "n_minus_max",
    "charge_mass_drift", "divergence", "m_matrix_plus", "m_matrix_minus", "fp_iters", "newton_iters",
)


def _audit_flag(audit) -> str:
    if audit is None:
        return "na"
    return "1" if audit.passed else "0"


def certificate_row(cert: StepCertificate) -> list[str]:
    d = cert.dissipation
    return [str(cert.step_index), _fmt(cert.t), _fmt(cert.energy_after), _fmt(d.get("viscous", 0.0)),
            _fmt(d.get("director", 0.0)), _fmt(d.get("drift", 0.0)), _fmt(d.get("charge", 0.0)),
            _fmt(sum(cert.damping.values())), _fmt(cert.energy_residual), _fmt(cert.max_norm_violation),
            _fmt(cert.n_plus_min), _fmt(cert.n_plus_max), _fmt(cert.n_minus_min), _fmt(cert.n_minus_max),
            _fmt(cert.charge_mass_drift), _fmt(cert.divergence_norm), _audit_flag(cert.m_matrix_plus),
            _audit_flag(cert.m_matrix_minus), str(cert.fixed_point_iters), str(cert.newton_iters)]


def initial_row(state: DiscreteState, energy: float, divergence: float) -> list[str]:
    dev = float(np.abs(np.linalg.norm(state.d, axis=1) - 1.0).max(initial=0.0))
    return [str(state.step_index), _fmt(state.t), _fmt(energy), "0", "0", "0", "0", "0", "0", _fmt(dev),
            _fmt(state.n_plus.min()), _fmt(state.n_plus.max()), _fmt(state.n_minus.min()),
            _fmt(state.n_minus.max()), "0", _fmt(divergence), "na", "na", "0", "0"]


class TimeseriesWriter:
    """CSV writer that flushes after every row."""

    def __init__(self, path: str | Path):
        try:
            self._fh: TextIO = open(path, "w", newline="")
        except OSError as exc:
            raise IoError(f"cannot write {path}: {exc}") from exc
        self._w = csv.writer(self._fh, lineterminator="\n")
        self._w.writerow(TIMESERIES_COLUMNS)
        self._fh.flush()

    def write_initial(self, state: DiscreteState, energy: float, divergence: float = 0.0) -> None:
        self._w.writerow(initial_row(state, energy, divergence))
        self._fh.flush()

    def write(self, cert: StepCertificate) -> None:
        self._w.writerow(certificate_row(cert))
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()

    def __enter__(self) -> "TimeseriesWriter":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def write_timeseries(certificates: Sequence[StepCertificate], path: str | Path,
                     initial: tuple[DiscreteState, float] | None = None) -> None:
    """Header, optional initial row ``(state0, energy0)`` and one row per certificate."""
    with TimeseriesWriter(path) as w:
        if initial is not None:
            w.write_initial(*initial)
        for cert in certificates:
            w.write(cert)


def read_timeseries(path: str | Path) -> list[dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))

