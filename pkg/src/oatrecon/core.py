"""Geometry, physical configuration, tensor containers and file I/O.

Conventions fixed project-wide:

* 2D geometry, SI units (meters, seconds). A pixel is treated as a voxel of
  volume dx*dx*slice_thickness.
* Images are stored as (ny, nx) arrays in C order, so the flattened linear
  index is j = iy*nx + ix (x varies fastest). ``pixel_center`` follows the
  same convention.
* All containers are immutable after construction (arrays are copied and
  marked read-only) and safe to share across threads.
* Internal arithmetic is 64-bit; the tensor file format stores 32-bit floats.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, FormatError

TENSOR_MAGIC = b"OATTENSR"
_MAX_RANK = 8
_MAX_ELEMENTS = 1 << 40


def _frozen_array(data, shape=None) -> np.ndarray:
    arr = np.array(data, dtype=np.float64, order="C", copy=True)
    if shape is not None and arr.shape != shape:
        raise ValueError(f"expected array of shape {shape}, got {arr.shape}")
    arr.flags.writeable = False
    return arr


# ---------------------------------------------------------------------------
# domain types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ImagingGrid:
    """Regular square-pixel imaging grid.

    nx, ny          pixel counts
    dx              pixel pitch [m]
    origin          coordinate of the center of pixel (0, 0) [m]
    slice_thickness voxel extent out of plane [m]; voxel volume = dx*dx*slice_thickness
    """

    nx: int
    ny: int
    dx: float
    origin: tuple[float, float]
    slice_thickness: float

    def __post_init__(self):
        if self.nx < 1 or self.ny < 1:
            raise ValueError("grid must have at least one pixel per axis")
        if not (self.dx > 0 and self.slice_thickness > 0):
            raise ValueError("dx and slice_thickness must be positive")
        object.__setattr__(self, "origin", (float(self.origin[0]), float(self.origin[1])))

    @property
    def n_pixels(self) -> int:
        return self.nx * self.ny

    @property
    def voxel_volume(self) -> float:
        return self.dx * self.dx * self.slice_thickness

    @property
    def shape(self) -> tuple[int, int]:
        """Image array shape, (ny, nx)."""
        return (self.ny, self.nx)

    def bounding_box(self) -> tuple[float, float, float, float]:
        """(xmin, ymin, xmax, ymax) of the pixel area, half-pixel margins included."""
        x0, y0 = self.origin
        h = self.dx / 2
        return (x0 - h, y0 - h, x0 + (self.nx - 1) * self.dx + h, y0 + (self.ny - 1) * self.dx + h)

    def pixel_coords(self) -> np.ndarray:
        """Centers of all pixels in linear-index order, shape (N, 2)."""
        ix = np.arange(self.nx)
        iy = np.arange(self.ny)
        xs = self.origin[0] + ix * self.dx
        ys = self.origin[1] + iy * self.dx
        gx, gy = np.meshgrid(xs, ys)  # (ny, nx), row-major ravel gives x fastest
        return np.column_stack([gx.ravel(), gy.ravel()])


@dataclass(frozen=True, eq=False)
class SensorArray:
    """Point-detector positions around the sample.

    positions       (n_d, 2) coordinates [m]
    nominal_radius  radius of the nominal detection circle [m]
    center          center of the detection circle [m]
    """

    positions: np.ndarray
    nominal_radius: float
    center: tuple[float, float]

    def __post_init__(self):
        pos = _frozen_array(self.positions)
        if pos.ndim != 2 or pos.shape[1] != 2 or pos.shape[0] < 1:
            raise ValueError("positions must be an (n_d, 2) array with n_d >= 1")
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "center", (float(self.center[0]), float(self.center[1])))

    @property
    def n_d(self) -> int:
        return self.positions.shape[0]


@dataclass(frozen=True, eq=False)
class Sinogram:
    """Stacked detector time series, shape (n_d, n_t), sample k at t0 + k*dt."""

    data: np.ndarray
    dt: float
    t0: float = 0.0

    def __post_init__(self):
        arr = _frozen_array(self.data)
        if arr.ndim != 2:
            raise ValueError("sinogram data must be 2D (n_d, n_t)")
        if not np.all(np.isfinite(arr)):
            raise ValueError("sinogram data must be finite")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        object.__setattr__(self, "data", arr)

    @property
    def n_d(self) -> int:
        return self.data.shape[0]

    @property
    def n_t(self) -> int:
        return self.data.shape[1]

    @property
    def fs(self) -> float:
        return 1.0 / self.dt

    def times(self) -> np.ndarray:
        return self.t0 + np.arange(self.n_t) * self.dt


@dataclass(frozen=True, eq=False)
class Image:
    """Initial-pressure image on a grid; data shape is grid.shape = (ny, nx)."""

    data: np.ndarray
    grid: ImagingGrid

    def __post_init__(self):
        arr = _frozen_array(self.data, shape=self.grid.shape)
        if not np.all(np.isfinite(arr)):
            raise ValueError("image data must be finite")
        object.__setattr__(self, "data", arr)

    def ravel(self) -> np.ndarray:
        """Flat copy in the project-wide linear-index order."""
        return self.data.ravel()


@dataclass(frozen=True)
class BandSpec:
    """Frequency-band layout: n bands [edges[k], edges[k+1]], k = 0..n-1.

    order      band-pass filter order (even)
    bw_factor  multiplicative widening: effective band k is
               [edges[k]/bw_factor, edges[k+1]*bw_factor]
    """

    edges: tuple[float, ...]
    order: int = 4
    bw_factor: float = 1.0

    def __post_init__(self):
        edges = tuple(float(e) for e in self.edges)
        if len(edges) < 2:
            raise ValueError("need at least two band edges")
        if edges[0] <= 0 or any(b <= a for a, b in zip(edges, edges[1:])):
            raise ValueError("band edges must be positive and strictly increasing")
        if self.order < 2 or self.order % 2 != 0:
            raise ValueError("filter order must be even and >= 2")
        if self.bw_factor < 1.0:
            raise ValueError("bw_factor must be >= 1")
        object.__setattr__(self, "edges", edges)

    @property
    def n(self) -> int:
        return len(self.edges) - 1

    def band(self, k: int) -> tuple[float, float]:
        """Nominal edges of band k (1-based)."""
        if not 1 <= k <= self.n:
            raise ValueError(f"band index {k} out of range 1..{self.n}")
        return (self.edges[k - 1], self.edges[k])

    def widened(self, k: int) -> tuple[float, float]:
        """Effective (widened) edges of band k (1-based)."""
        lo, hi = self.band(k)
        return (lo / self.bw_factor, hi * self.bw_factor)

    def validate_against_fs(self, fs: float) -> None:
        if self.widened(self.n)[1] >= fs / 2:
            raise ValueError(
                f"widened top edge {self.widened(self.n)[1]:.4g} Hz must be below fs/2 = {fs / 2:.4g} Hz"
            )


@dataclass(frozen=True, eq=False)
class ExperimentConfig:
    """Full experiment description: geometry, physics, bands, solver weights,
    data-generation perturbations, and the master seed."""

    grid: ImagingGrid
    sensors: SensorArray
    v_s: float
    dt: float
    n_t: int
    bands: BandSpec
    lam: float
    eta: float
    eta_i: float
    mu: tuple[float, ...]
    noise_snr_range_db: tuple[float, float] = (20.0, 80.0)
    vs_jitter: float = 0.0
    pos_jitter_frac: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not (self.v_s > 0 and self.dt > 0 and self.n_t >= 2):
            raise ValueError("need v_s > 0, dt > 0, n_t >= 2")
        if self.lam < 0 or self.eta < 0 or self.eta_i < 0:
            raise ValueError("lambda, eta, eta_i must be non-negative")
        mu = tuple(float(m) for m in self.mu)
        if len(mu) != self.bands.n:
            raise ValueError(f"mu has {len(mu)} entries, expected {self.bands.n}")
        if any(m < 0 for m in mu):
            raise ValueError("all mu weights must be non-negative")
        if self.vs_jitter < 0 or self.pos_jitter_frac < 0:
            raise ValueError("jitter magnitudes must be non-negative")
        lo, hi = self.noise_snr_range_db
        if hi < lo:
            raise ValueError("snr range must satisfy lo <= hi")
        self.bands.validate_against_fs(1.0 / self.dt)
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "noise_snr_range_db", (float(lo), float(hi)))

    @property
    def fs(self) -> float:
        return 1.0 / self.dt


# ---------------------------------------------------------------------------
# geometry operations
# ---------------------------------------------------------------------------

def make_circular_array(n_d: int, radius: float, center=(0.0, 0.0)) -> SensorArray:
    """Sensors uniformly distributed on a circle, sensor l at angle 2*pi*l/n_d."""
    if n_d < 1:
        raise ValueError("n_d must be >= 1")
    if not radius > 0:
        raise ValueError("radius must be positive")
    angles = 2.0 * np.pi * np.arange(n_d) / n_d
    pos = np.column_stack([
        center[0] + radius * np.cos(angles),
        center[1] + radius * np.sin(angles),
    ])
    return SensorArray(pos, nominal_radius=float(radius), center=center)


def pixel_center(grid: ImagingGrid, j: int) -> tuple[float, float]:
    """Center coordinate of the pixel with linear index j (x varies fastest)."""
    if not 0 <= j < grid.n_pixels:
        raise ValueError(f"pixel index {j} out of range 0..{grid.n_pixels - 1}")
    ix = j % grid.nx
    iy = j // grid.nx
    return (grid.origin[0] + ix * grid.dx, grid.origin[1] + iy * grid.dx)


# ---------------------------------------------------------------------------
# tensor file format
# ---------------------------------------------------------------------------

def write_tensor(path, data) -> None:
    """Write an array to the binary tensor format.

    Layout: magic "OATTENSR", uint32-LE rank, rank x uint32-LE dims,
    row-major IEEE-754 binary32 LE payload.
    """
    arr = np.ascontiguousarray(data)
    if arr.ndim < 1 or arr.ndim > _MAX_RANK:
        raise ValueError(f"rank must be 1..{_MAX_RANK}")
    payload = arr.astype("<f4", copy=False)
    with open(path, "wb") as fh:
        fh.write(TENSOR_MAGIC)
        fh.write(struct.pack("<I", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(payload.tobytes(order="C"))


def read_tensor(path) -> np.ndarray:
    """Read a tensor file; returns a float32 array (cast to float64 for math)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < len(TENSOR_MAGIC) + 4 or blob[: len(TENSOR_MAGIC)] != TENSOR_MAGIC:
        raise FormatError(f"{path}: bad magic bytes")
    off = len(TENSOR_MAGIC)
    (rank,) = struct.unpack_from("<I", blob, off)
    off += 4
    if rank < 1 or rank > _MAX_RANK:
        raise FormatError(f"{path}: unsupported rank {rank}")
    if len(blob) < off + 4 * rank:
        raise FormatError(f"{path}: truncated dims header")
    dims = struct.unpack_from(f"<{rank}I", blob, off)
    off += 4 * rank
    count = math.prod(dims)
    if count > _MAX_ELEMENTS:
        raise FormatError(f"{path}: dims overflow ({count} elements)")
    if len(blob) != off + 4 * count:
        raise FormatError(f"{path}: payload size mismatch (expected {4 * count} bytes)")
    arr = np.frombuffer(blob, dtype="<f4", count=count, offset=off)
    return arr.reshape(dims).copy()


def write_pgm(path, image: Image, sidecar: bool = True) -> dict:
    """Export an image for viewing as 16-bit big-endian PGM (P5), min-max scaled.

    Returns the scaling record; if ``sidecar`` it is also written to path + ".json".
    """
    data = image.data
    lo = float(data.min())
    hi = float(data.max())
    span = hi - lo if hi > lo else 1.0
    scaled = np.round((data - lo) / span * 65535.0).astype(">u2")
    with open(path, "wb") as fh:
        fh.write(f"P5\n{image.grid.nx} {image.grid.ny}\n65535\n".encode("ascii"))
        fh.write(scaled.tobytes(order="C"))
    record = {"min": lo, "max": hi, "maxval": 65535}
    if sidecar:
        with open(str(path) + ".json", "w") as fh:
            json.dump(record, fh, indent=2)
    return record


# ---------------------------------------------------------------------------
# config loading
# ---------------------------------------------------------------------------

def _require(obj: dict, key: str, where: str):
    if key not in obj:
        raise ConfigError(f"{where}.{key}" if where else key, "missing required key")
    return obj[key]


def config_from_dict(doc: dict) -> ExperimentConfig:
    """Build a validated ExperimentConfig from a parsed JSON document."""
    g = _require(doc, "grid", "")
    s = _require(doc, "sensors", "")
    p = _require(doc, "physics", "")
    b = _require(doc, "bands", "")
    sol = _require(doc, "solver", "")
    pert = doc.get("perturb", {})

    nx = int(_require(g, "nx", "grid"))
    ny = int(_require(g, "ny", "grid"))
    dx = float(_require(g, "dx_m", "grid"))
    slice_th = float(g.get("slice_thickness_m", dx))
    center = tuple(s.get("center_m", (0.0, 0.0)))
    if "origin_m" in g:
        origin = tuple(g["origin_m"])
    else:
        # grid centered on the array center
        origin = (center[0] - (nx - 1) * dx / 2, center[1] - (ny - 1) * dx / 2)

    try:
        grid = ImagingGrid(nx, ny, dx, origin, slice_th)
    except ValueError as exc:
        raise ConfigError("grid", str(exc)) from exc

    try:
        sensors = make_circular_array(
            int(_require(s, "n_d", "sensors")), float(_require(s, "radius_m", "sensors")), center
        )
    except ValueError as exc:
        raise ConfigError("sensors", str(exc)) from exc

    try:
        bands = BandSpec(
            edges=tuple(_require(b, "edges_hz", "bands")),
            order=int(b.get("order", 4)),
            bw_factor=float(b.get("bw_factor", 1.0)),
        )
    except ValueError as exc:
        raise ConfigError("bands", str(exc)) from exc

    try:
        return ExperimentConfig(
            grid=grid,
            sensors=sensors,
            v_s=float(_require(p, "vs_mps", "physics")),
            dt=float(_require(p, "dt_s", "physics")),
            n_t=int(_require(p, "nt", "physics")),
            bands=bands,
            lam=float(sol.get("lambda", 0.0)),
            eta=float(sol.get("eta", 0.0)),
            eta_i=float(sol.get("eta_i", 0.0)),
            mu=tuple(_require(sol, "mu", "solver")),
            noise_snr_range_db=tuple(pert.get("snr_db_range", (20.0, 80.0))),
            vs_jitter=float(pert.get("vs_jitter_mps", 0.0)),
            pos_jitter_frac=float(pert.get("pos_jitter_frac", 0.0)),
            seed=int(doc.get("seed", 0)),
        )
    except ValueError as exc:
        raise ConfigError("config", str(exc)) from exc


def load_config(path) -> ExperimentConfig:
    """Load and validate a JSON experiment configuration."""
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(str(path), f"not valid JSON: {exc}") from exc
    return config_from_dict(doc)


def config_to_dict(cfg: ExperimentConfig) -> dict:
    """Serialize a config back to the JSON schema (resolved defaults included)."""
    return {
        "grid": {
            "nx": cfg.grid.nx,
            "ny": cfg.grid.ny,
            "dx_m": cfg.grid.dx,
            "slice_thickness_m": cfg.grid.slice_thickness,
            "origin_m": list(cfg.grid.origin),
        },
        "sensors": {
            "n_d": cfg.sensors.n_d,
            "radius_m": cfg.sensors.nominal_radius,
            "center_m": list(cfg.sensors.center),
        },
        "physics": {"vs_mps": cfg.v_s, "dt_s": cfg.dt, "nt": cfg.n_t},
        "bands": {
            "edges_hz": list(cfg.bands.edges),
            "order": cfg.bands.order,
            "bw_factor": cfg.bands.bw_factor,
        },
        "solver": {"lambda": cfg.lam, "eta": cfg.eta, "eta_i": cfg.eta_i, "mu": list(cfg.mu)},
        "perturb": {
            "vs_jitter_mps": cfg.vs_jitter,
            "pos_jitter_frac": cfg.pos_jitter_frac,
            "snr_db_range": list(cfg.noise_snr_range_db),
        },
        "seed": cfg.seed,
    }
