"""Synthetic phantoms and the perturbed-measurement dataset pipeline.

Every record is generated from per-record seeds derived from the master seed
by a fixed SplitMix64 rule (see :func:`split_seed`), so a dataset is a pure
function of (config, count, phantom mix, master seed) and any record can be
re-simulated bitwise from its stored metadata.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import (
    ExperimentConfig,
    Image,
    ImagingGrid,
    Sinogram,
    config_from_dict,
    config_to_dict,
    read_tensor,
    write_tensor,
)
from .errors import FormatError
from .forward import forward_apply, perturbed_system

DATASET_FORMAT_VERSION = 1

# stream tags for seed splitting; fixed across releases
STREAM_PHANTOM = 1
STREAM_SYSTEM = 2
STREAM_SNR = 3
STREAM_NOISE = 4

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


def _mix64(z: int) -> int:
    """SplitMix64 finalizer."""
    z = (z + _GOLDEN) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def split_seed(master: int, index: int, stream: int) -> int:
    """Per-record, per-stream 64-bit seed: mix(mix(mix(master) ^ index) ^ stream)."""
    return _mix64(_mix64(_mix64(master & _MASK64) ^ (index & _MASK64)) ^ (stream & _MASK64))


@dataclass(frozen=True, eq=False)
class DatasetRecord:
    phantom_id: str
    seed: int
    p0: Image
    pd: Sinogram
    snr_db: float
    vs_used: float
    sensor_jitter_applied: bool


# ---------------------------------------------------------------------------
# phantom rasterization helpers
# ---------------------------------------------------------------------------

def _segment_distance(px, py, a, b):
    """Distance from pixel grids (px, py) to segment a-b."""
    ab = b - a
    denom = float(ab @ ab)
    if denom == 0.0:
        return np.hypot(px - a[0], py - a[1])
    t = ((px - a[0]) * ab[0] + (py - a[1]) * ab[1]) / denom
    t = np.clip(t, 0.0, 1.0)
    return np.hypot(px - (a[0] + t * ab[0]), py - (a[1] + t * ab[1]))


def _stamp(canvas, coverage, amplitude):
    np.maximum(canvas, amplitude * coverage, out=canvas)


def _coverage_from_distance(dist, half_width):
    # 1-pixel anti-aliasing ramp across the boundary
    return np.clip(half_width + 0.5 - dist, 0.0, 1.0)


def _pixel_grids(grid: ImagingGrid):
    return np.meshgrid(np.arange(grid.nx, dtype=float), np.arange(grid.ny, dtype=float))


def shapes_phantom(grid: ImagingGrid, seed: int, kind: str = "disks") -> Image:
    """2-8 randomly placed anti-aliased disks, rods, or stroke glyphs in [0, 1]."""
    if kind not in ("disks", "rods", "glyphs"):
        raise ValueError(f"unknown phantom kind {kind!r}")
    rng = np.random.default_rng(seed)
    px, py = _pixel_grids(grid)
    canvas = np.zeros(grid.shape)
    count = int(rng.integers(2, 9))
    span = min(grid.nx, grid.ny)
    for _ in range(count):
        amp = rng.uniform(0.4, 1.0)
        if kind == "disks":
            c = rng.uniform(0.15, 0.85, 2) * [grid.nx, grid.ny]
            r = rng.uniform(0.04, 0.16) * span
            dist = np.hypot(px - c[0], py - c[1])
            _stamp(canvas, _coverage_from_distance(dist, r), amp)
        elif kind == "rods":
            a = rng.uniform(0.1, 0.9, 2) * [grid.nx, grid.ny]
            ang = rng.uniform(0, 2 * np.pi)
            length = rng.uniform(0.15, 0.5) * span
            b = a + length * np.array([np.cos(ang), np.sin(ang)])
            hw = rng.uniform(0.5, 1.8)
            dist = _segment_distance(px, py, a, np.clip(b, 0, [grid.nx - 1, grid.ny - 1]))
            _stamp(canvas, _coverage_from_distance(dist, hw), amp)
        else:  # glyphs: a short chain of 2-4 joined strokes
            verts = [rng.uniform(0.15, 0.85, 2) * [grid.nx, grid.ny]]
            for _ in range(int(rng.integers(2, 5))):
                step = rng.uniform(0.1, 0.3) * span
                ang = rng.uniform(0, 2 * np.pi)
                verts.append(
                    np.clip(
                        verts[-1] + step * np.array([np.cos(ang), np.sin(ang)]),
                        0,
                        [grid.nx - 1, grid.ny - 1],
                    )
                )
            hw = rng.uniform(0.5, 1.5)
            for a, b in zip(verts, verts[1:]):
                dist = _segment_distance(px, py, a, b)
                _stamp(canvas, _coverage_from_distance(dist, hw), amp)
    return Image(np.clip(canvas, 0.0, 1.0), grid)


def _branch_paths(rng, start, direction, length, depth, branches_left, span):
    """Midpoint-displaced polyline plus recursive children; yields (path, depth)."""
    n_seg = 4
    pts = [np.asarray(start, dtype=float)]
    step = length / n_seg
    d = np.asarray(direction, dtype=float)
    d /= np.hypot(*d)
    for _ in range(n_seg):
        ang = rng.normal(0.0, 0.35)
        rot = np.array([[np.cos(ang), -np.sin(ang)], [np.sin(ang), np.cos(ang)]])
        d = rot @ d
        pts.append(pts[-1] + step * d)
    yield np.array(pts), depth

    if depth > 0:
        n_children = 2 if branches_left >= 2 else max(branches_left, 0)
        for c in range(n_children):
            base = pts[rng.integers(2, n_seg + 1)]
            sign = -1.0 if c % 2 else 1.0
            ang = sign * rng.uniform(0.4, 1.0)
            rot = np.array([[np.cos(ang), -np.sin(ang)], [np.sin(ang), np.cos(ang)]])
            child_dir = rot @ d
            child_len = length * rng.uniform(0.55, 0.8)
            yield from _branch_paths(
                rng, base, child_dir, child_len, depth - 1, branches_left - n_children, span
            )


def vessel_phantom(
    grid: ImagingGrid,
    seed: int,
    branches: int = 6,
    min_width_px: int = 1,
    max_width_px: int = 4,
) -> Image:
    """Stochastic branching tree with widths tapering from max_width_px at the
    root to exactly min_width_px at the deepest branches."""
    if min_width_px < 1:
        raise ValueError("min_width_px must be >= 1")
    if max_width_px < min_width_px:
        raise ValueError("max_width_px must be >= min_width_px")
    rng = np.random.default_rng(seed)
    px, py = _pixel_grids(grid)
    canvas = np.zeros(grid.shape)
    span = min(grid.nx, grid.ny)

    depth = max(1, int(math.ceil(math.log2(branches + 1))))
    start = np.array([rng.uniform(0.1, 0.3) * grid.nx, rng.uniform(0.2, 0.8) * grid.ny])
    direction = np.array([1.0, rng.uniform(-0.5, 0.5)])
    for path, d in _branch_paths(rng, start, direction, 0.55 * span, depth, branches, span):
        # width by depth level: root level (d == depth) gets max, leaves get min
        if depth == 0:
            width = float(max_width_px)
        else:
            frac = (depth - d) / depth
            width = max_width_px * (min_width_px / max_width_px) ** frac
        hw = width / 2.0
        for a, b in zip(path, path[1:]):
            a = np.clip(a, 0, [grid.nx - 1, grid.ny - 1])
            b = np.clip(b, 0, [grid.nx - 1, grid.ny - 1])
            dist = _segment_distance(px, py, a, b)
            _stamp(canvas, _coverage_from_distance(dist, hw), 1.0)
    return Image(np.clip(canvas, 0.0, 1.0), grid)


PHANTOM_KINDS = ("disks", "rods", "glyphs", "vessels")


def make_phantom(grid: ImagingGrid, seed: int, kind: str) -> Image:
    if kind == "vessels":
        return vessel_phantom(grid, seed)
    return shapes_phantom(grid, seed, kind)


# ---------------------------------------------------------------------------
# noise and the dataset pipeline
# ---------------------------------------------------------------------------

def add_noise(sino: Sinogram, snr_db: float, seed: int) -> Sinogram:
    """Additive white Gaussian noise at the requested SNR (dB); an infinite
    snr_db is the documented no-noise sentinel."""
    if math.isinf(snr_db) and snr_db > 0:
        return sino
    power = float(np.mean(sino.data**2))
    if power == 0.0:
        raise ValueError("SNR undefined for an identically zero sinogram")
    var = power / (10.0 ** (snr_db / 10.0))
    rng = np.random.default_rng(seed)
    noise = rng.normal(0.0, math.sqrt(var), size=sino.data.shape)
    return Sinogram(sino.data + noise, dt=sino.dt, t0=sino.t0)


def _record_kind(phantom_mix, index: int) -> str:
    kind = phantom_mix[index % len(phantom_mix)]
    if kind not in PHANTOM_KINDS:
        raise ValueError(f"unknown phantom kind {kind!r}; choose from {PHANTOM_KINDS}")
    return kind


def simulate_record(config: ExperimentConfig, index: int, master_seed: int, kind: str) -> DatasetRecord:
    """One (p0, pd) pair: phantom, perturbed system, forward, additive noise."""
    phantom_seed = split_seed(master_seed, index, STREAM_PHANTOM)
    system_seed = split_seed(master_seed, index, STREAM_SYSTEM)
    snr_seed = split_seed(master_seed, index, STREAM_SNR)
    noise_seed = split_seed(master_seed, index, STREAM_NOISE)

    p0 = make_phantom(config.grid, phantom_seed, kind)
    op, _, vs_used = perturbed_system(config, system_seed)
    pd = forward_apply(op, p0)

    lo, hi = config.noise_snr_range_db
    snr_db = float(np.random.default_rng(snr_seed).uniform(lo, hi))
    if np.any(pd.data != 0.0):
        pd = add_noise(pd, snr_db, noise_seed)
    return DatasetRecord(
        phantom_id=f"{kind}_{index:06d}",
        seed=int(split_seed(master_seed, index, 0)),
        p0=p0,
        pd=pd,
        snr_db=snr_db,
        vs_used=float(vs_used),
        sensor_jitter_applied=config.pos_jitter_frac > 0,
    )


def generate_records(config: ExperimentConfig, count: int, phantom_mix, seed: int):
    """Yield dataset records one at a time (records are independent)."""
    if count < 1:
        raise ValueError("count must be >= 1")
    mix = list(phantom_mix)
    if not mix:
        raise ValueError("phantom_mix is empty")
    for i in range(count):
        yield simulate_record(config, i, seed, _record_kind(mix, i))


def generate_dataset(config: ExperimentConfig, count: int, phantom_mix, seed: int, out_dir) -> dict:
    """Stream a dataset to disk: manifest.json plus per-record tensor files
    p0_%06d.tensor / pd_%06d.tensor. Returns the manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records_meta = []
    for i, rec in enumerate(generate_records(config, count, phantom_mix, seed)):
        write_tensor(out / f"p0_{i:06d}.tensor", rec.p0.data)
        write_tensor(out / f"pd_{i:06d}.tensor", rec.pd.data)
        records_meta.append(
            {
                "index": i,
                "phantom_id": rec.phantom_id,
                "seed": rec.seed,
                "snr_db": rec.snr_db,
                "vs_used": rec.vs_used,
                "sensor_jitter_applied": rec.sensor_jitter_applied,
            }
        )
    manifest = {
        "format_version": DATASET_FORMAT_VERSION,
        "count": count,
        "master_seed": seed,
        "phantom_mix": list(phantom_mix),
        "config": config_to_dict(config),
        "records": records_meta,
    }
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2)
    return manifest


def load_dataset(directory) -> tuple[list[tuple[Sinogram, Image]], dict]:
    """Load a dataset directory; returns ((pd, p0) pairs, manifest)."""
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.exists():
        raise FormatError(f"{directory}: no manifest.json")
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    if manifest.get("format_version") != DATASET_FORMAT_VERSION:
        raise FormatError(f"{directory}: unsupported dataset format version")
    config = config_from_dict(manifest["config"])
    pairs = []
    for i in range(manifest["count"]):
        p0 = read_tensor(directory / f"p0_{i:06d}.tensor").astype(np.float64)
        pd = read_tensor(directory / f"pd_{i:06d}.tensor").astype(np.float64)
        pairs.append(
            (Sinogram(pd, dt=config.dt), Image(p0, config.grid))
        )
    return pairs, manifest
