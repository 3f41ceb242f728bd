"""Discretized optoacoustic forward operator and its adjoint.

The measured sinogram is modeled as p_d = A p_0 with A factored into a
spherical-shell (arrival-time binning) matrix and a time-derivative stencil:

    A = (I_{n_d} (x) D) @ A_shell

A_shell[(l, k), j] = dV / (4 pi v_s^2 dt^2) * 1{k == round(|r_dl - r_j| / (v_s dt))} / |r_dl - r_j|

i.e. pixel j contributes to detector l exactly at the time bin matching its
acoustic travel time, weighted by the voxel volume over the distance. Both
the 1/dt of the arrival-time binning and the 1/dt of the time derivative are
carried by the dt^2 in the prefactor, so the derivative stencil D is
dimensionless: central differences at interior samples, one-sided first
differences at the record ends.

The arrival bin uses the half-open rule k = floor(tau/dt + 0.5) so every
(sensor, pixel) pair lands in exactly one bin and A_shell has exactly
n_d * N nonzeros when the time record covers the full grid.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy import sparse

from .core import ExperimentConfig, Image, ImagingGrid, SensorArray, Sinogram
from .errors import GeometryError


@dataclass(frozen=True, eq=False)
class SparseOperator:
    """Shell factor of the forward operator in CSR form, plus its physics metadata.

    shell  (n_d*n_t, N) CSR matrix; row l*n_t + k is detector l, time bin k
    """

    shell: sparse.csr_array
    grid: ImagingGrid
    sensors: SensorArray
    v_s: float
    dt: float
    n_t: int

    @property
    def n_d(self) -> int:
        return self.sensors.n_d

    @property
    def n_rows(self) -> int:
        return self.n_d * self.n_t

    @property
    def n_cols(self) -> int:
        return self.grid.n_pixels

    def fingerprint(self) -> str:
        """Stable geometry/physics digest used to match operators to data."""
        import hashlib

        h = hashlib.blake2b(digest_size=16)
        g = self.grid
        h.update(np.array([g.nx, g.ny], dtype="<i8").tobytes())
        h.update(np.array([g.dx, g.origin[0], g.origin[1], g.slice_thickness,
                           self.v_s, self.dt, float(self.n_t)], dtype="<f8").tobytes())
        h.update(self.sensors.positions.astype("<f8").tobytes())
        return h.hexdigest()


@lru_cache(maxsize=16)
def time_derivative_matrix(n_t: int) -> sparse.csr_array:
    """Dimensionless derivative stencil D, shape (n_t, n_t).

    Interior rows: (u[k+1] - u[k-1]) / 2; first and last rows: one-sided
    first differences.
    """
    if n_t < 2:
        raise ValueError("need at least two time samples")
    rows, cols, vals = [], [], []
    rows += [0, 0]
    cols += [0, 1]
    vals += [-1.0, 1.0]
    for k in range(1, n_t - 1):
        rows += [k, k]
        cols += [k - 1, k + 1]
        vals += [-0.5, 0.5]
    rows += [n_t - 1, n_t - 1]
    cols += [n_t - 2, n_t - 1]
    vals += [-1.0, 1.0]
    mat = sparse.csr_array((vals, (rows, cols)), shape=(n_t, n_t))
    mat.sort_indices()
    return mat


def apply_time_derivative(u: np.ndarray) -> np.ndarray:
    """Apply the derivative stencil along the time axis of an (n_d, n_t) array."""
    u = np.asarray(u, dtype=np.float64)
    if u.ndim != 2 or u.shape[1] < 2:
        raise ValueError("input must be (n_d, n_t) with n_t >= 2")
    d = time_derivative_matrix(u.shape[1])
    return u @ d.T


def apply_time_derivative_adjoint(y: np.ndarray) -> np.ndarray:
    """Apply the transpose of the derivative stencil along the time axis."""
    y = np.asarray(y, dtype=np.float64)
    if y.ndim != 2 or y.shape[1] < 2:
        raise ValueError("input must be (n_d, n_t) with n_t >= 2")
    d = time_derivative_matrix(y.shape[1])
    return y @ d


def _check_sensor_positions(grid: ImagingGrid, positions: np.ndarray, what: str) -> None:
    xmin, ymin, xmax, ymax = grid.bounding_box()
    inside = (
        (positions[:, 0] >= xmin)
        & (positions[:, 0] <= xmax)
        & (positions[:, 1] >= ymin)
        & (positions[:, 1] <= ymax)
    )
    if np.any(inside):
        idx = int(np.nonzero(inside)[0][0])
        raise GeometryError(f"{what} {idx} at {tuple(positions[idx])} lies inside the grid bounding box")


def _shell_entries(grid, positions, weights, v_s, dt, n_t):
    """COO triplets of the shell matrix for the given (sub-)element positions."""
    coords = grid.pixel_coords()
    n = grid.n_pixels
    rows, cols, vals = [], [], []
    scale = grid.voxel_volume / (4.0 * np.pi * v_s**2 * dt**2)
    dropped = 0
    for l, (pos, w) in enumerate(zip(positions, weights)):
        dist = np.hypot(coords[:, 0] - pos[0], coords[:, 1] - pos[1])
        if np.any(dist == 0.0):
            raise GeometryError(f"pixel coincides with sensor element at {tuple(pos)}")
        k = np.floor(dist / (v_s * dt) + 0.5).astype(np.int64)
        keep = k < n_t
        dropped += int(n - keep.sum())
        rows.append(l * n_t + k[keep])
        cols.append(np.nonzero(keep)[0])
        vals.append(w * scale / dist[keep])
    if dropped:
        warnings.warn(
            f"time record too short: {dropped} (sensor, pixel) arrivals fall past n_t; "
            "increase nt for full coverage",
            stacklevel=3,
        )
    return np.concatenate(rows), np.concatenate(cols), np.concatenate(vals)


def assemble_shell_matrix(
    grid: ImagingGrid, sensors: SensorArray, v_s: float, dt: float, n_t: int
) -> SparseOperator:
    """Assemble the spherical-shell factor for ideal point detectors."""
    if not v_s > 0:
        raise ValueError("v_s must be positive")
    if not dt > 0:
        raise ValueError("dt must be positive")
    if n_t < 2:
        raise ValueError("n_t must be >= 2")
    _check_sensor_positions(grid, sensors.positions, "sensor")
    rows, cols, vals = _shell_entries(
        grid, sensors.positions, np.ones(sensors.n_d), v_s, dt, n_t
    )
    shell = sparse.csr_array(
        (vals, (rows, cols)), shape=(sensors.n_d * n_t, grid.n_pixels)
    )
    shell.sum_duplicates()
    shell.sort_indices()
    return SparseOperator(shell=shell, grid=grid, sensors=sensors, v_s=v_s, dt=dt, n_t=n_t)


def assemble_finite_sensor(
    grid: ImagingGrid,
    sensors: SensorArray,
    element_length: float,
    n_sub: int,
    v_s: float,
    dt: float,
    n_t: int,
) -> SparseOperator:
    """Shell factor for finite-size detectors.

    Each sensor is replaced by n_sub point sub-elements uniformly spanning a
    segment of element_length tangent to the nominal array circle; each
    sensor row is the average of its sub-element rows (a discrete spatial
    impulse response).
    """
    if n_sub < 1:
        raise ValueError("n_sub must be >= 1")
    if n_sub == 1:
        offsets = np.array([0.0])
    else:
        offsets = np.linspace(-element_length / 2, element_length / 2, n_sub)

    center = np.array(sensors.center)
    rows_all, cols_all, vals_all = [], [], []
    for l in range(sensors.n_d):
        pos = sensors.positions[l]
        radial = pos - center
        norm = np.hypot(*radial)
        if norm == 0:
            raise GeometryError(f"sensor {l} coincides with the array center")
        tangent = np.array([-radial[1], radial[0]]) / norm
        subs = pos[None, :] + offsets[:, None] * tangent[None, :]
        _check_sensor_positions(grid, subs, f"sensor {l} sub-element")
        r, c, v = _shell_entries(grid, subs, np.full(n_sub, 1.0 / n_sub), v_s, dt, n_t)
        # sub-element rows are interleaved per sub; collapse them onto sensor l
        rows_all.append(l * n_t + (r % n_t))
        cols_all.append(c)
        vals_all.append(v)
    shell = sparse.csr_array(
        (np.concatenate(vals_all), (np.concatenate(rows_all), np.concatenate(cols_all))),
        shape=(sensors.n_d * n_t, grid.n_pixels),
    )
    shell.sum_duplicates()
    shell.sort_indices()
    return SparseOperator(shell=shell, grid=grid, sensors=sensors, v_s=v_s, dt=dt, n_t=n_t)


def forward_apply(op: SparseOperator, p0: Image) -> Sinogram:
    """p_d = D (A_shell p_0); linear in p_0."""
    if p0.grid != op.grid:
        raise ValueError("image grid does not match operator grid fingerprint")
    u = (op.shell @ p0.ravel()).reshape(op.n_d, op.n_t)
    return Sinogram(apply_time_derivative(u), dt=op.dt, t0=0.0)


def adjoint_apply(op: SparseOperator, pd: Sinogram) -> Image:
    """x = A_shell^T D^T p_d — the linear back-projection image."""
    if pd.data.shape != (op.n_d, op.n_t):
        raise ValueError(
            f"sinogram shape {pd.data.shape} does not match operator ({op.n_d}, {op.n_t})"
        )
    v = apply_time_derivative_adjoint(pd.data)
    flat = op.shell.T @ v.ravel()
    return Image(flat.reshape(op.grid.shape), op.grid)


def forward_apply_flat(op: SparseOperator, x: np.ndarray) -> np.ndarray:
    """Flat-vector forward map used by the iterative solvers."""
    u = (op.shell @ x).reshape(op.n_d, op.n_t)
    return apply_time_derivative(u).ravel()


def adjoint_apply_flat(op: SparseOperator, y: np.ndarray) -> np.ndarray:
    """Flat-vector adjoint map used by the iterative solvers."""
    v = apply_time_derivative_adjoint(y.reshape(op.n_d, op.n_t))
    return op.shell.T @ v.ravel()


def system_matrix(op: SparseOperator) -> sparse.csr_array:
    """Materialize the full A = (I (x) D) @ A_shell as one CSR matrix."""
    d = time_derivative_matrix(op.n_t)
    big_d = sparse.kron(sparse.eye_array(op.n_d, format="csr"), d, format="csr")
    full = (big_d @ op.shell).tocsr()
    full.sort_indices()
    return full


def perturbed_system(config: ExperimentConfig, seed: int):
    """Draw a randomly perturbed forward system for data generation.

    v_s is drawn uniformly in [v_s - jitter, v_s + jitter]; each sensor is
    displaced radially and tangentially by independent uniform offsets of
    magnitude pos_jitter_frac * nominal_radius. Draw order is fixed (speed
    of sound, then radial offsets, then tangential offsets) so results are
    deterministic per seed.

    Returns (operator, perturbed sensor array, v_s actually used).
    """
    rng = np.random.default_rng(seed)
    v_used = config.v_s + config.vs_jitter * rng.uniform(-1.0, 1.0)
    nominal = config.sensors
    m = config.pos_jitter_frac * nominal.nominal_radius
    radial_off = m * rng.uniform(-1.0, 1.0, nominal.n_d)
    tangent_off = m * rng.uniform(-1.0, 1.0, nominal.n_d)

    center = np.array(nominal.center)
    rel = nominal.positions - center
    norms = np.hypot(rel[:, 0], rel[:, 1])
    if np.any(norms == 0):
        raise GeometryError("sensor coincides with the array center")
    r_hat = rel / norms[:, None]
    t_hat = np.column_stack([-r_hat[:, 1], r_hat[:, 0]])
    positions = nominal.positions + radial_off[:, None] * r_hat + tangent_off[:, None] * t_hat
    sensors = SensorArray(positions, nominal.nominal_radius, nominal.center)
    op = assemble_shell_matrix(config.grid, sensors, v_used, config.dt, config.n_t)
    return op, sensors, v_used


# ---------------------------------------------------------------------------
# operator export/import
# ---------------------------------------------------------------------------

def save_operator(op: SparseOperator, directory) -> None:
    """Export the CSR factors as three tensor files plus a JSON metadata sidecar."""
    import json
    from pathlib import Path

    from .core import write_tensor
    from .errors import FormatError

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name, arr in (("offsets", op.shell.indptr), ("indices", op.shell.indices)):
        if arr.size and arr.max() >= (1 << 24):
            raise FormatError(f"{name} exceed exact float32 integer range")
        write_tensor(directory / f"{name}.tensor", np.asarray(arr, dtype=np.float64))
    write_tensor(directory / "values.tensor", op.shell.data)
    meta = {
        "n_rows": op.n_rows,
        "n_cols": op.n_cols,
        "v_s": op.v_s,
        "dt": op.dt,
        "n_t": op.n_t,
        "grid": {
            "nx": op.grid.nx,
            "ny": op.grid.ny,
            "dx_m": op.grid.dx,
            "origin_m": list(op.grid.origin),
            "slice_thickness_m": op.grid.slice_thickness,
        },
        "sensors": {
            "positions_m": op.sensors.positions.tolist(),
            "radius_m": op.sensors.nominal_radius,
            "center_m": list(op.sensors.center),
        },
        "fingerprint": op.fingerprint(),
    }
    with open(directory / "operator.json", "w") as fh:
        json.dump(meta, fh, indent=2)


def load_operator(directory) -> SparseOperator:
    """Rebuild an operator exported by :func:`save_operator`."""
    import json
    from pathlib import Path

    from .core import read_tensor

    directory = Path(directory)
    with open(directory / "operator.json") as fh:
        meta = json.load(fh)
    indptr = read_tensor(directory / "offsets.tensor").astype(np.int64)
    indices = read_tensor(directory / "indices.tensor").astype(np.int64)
    values = read_tensor(directory / "values.tensor").astype(np.float64)
    shell = sparse.csr_array(
        (values, indices, indptr), shape=(meta["n_rows"], meta["n_cols"])
    )
    g = meta["grid"]
    grid = ImagingGrid(g["nx"], g["ny"], g["dx_m"], tuple(g["origin_m"]), g["slice_thickness_m"])
    s = meta["sensors"]
    sensors = SensorArray(np.array(s["positions_m"]), s["radius_m"], tuple(s["center_m"]))
    return SparseOperator(
        shell=shell, grid=grid, sensors=sensors, v_s=meta["v_s"], dt=meta["dt"], n_t=meta["n_t"]
    )
