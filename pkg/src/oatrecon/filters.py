"""Butterworth band-pass design, zero-phase application, and the per-band
pass/reject operators used by the multi-band solvers.

Two application paths exist on purpose:

* strict: zero-initial-condition forward pass, reverse, forward pass,
  reverse. As a matrix this is J H J H = H^T H for the (lower-triangular
  Toeplitz) single-pass matrix H, so the operator is exactly linear,
  self-adjoint and positive semidefinite — the property the quadratic
  penalties and their gradients rely on.
* padded: the same procedure after reflect-padding 3x the total filter
  order at each end. Better edge behavior for display and spectra, but no
  longer a clean self-adjoint operator on the unpadded window.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import signal

from .core import BandSpec, Sinogram


@dataclass(frozen=True, eq=False)
class BiquadCascade:
    """Second-order-section cascade of a digital band-pass filter.

    sections  (n_sections, 6) array of [b0, b1, b2, 1, a1, a2] rows
    """

    sections: np.ndarray
    fs: float
    f_lo: float
    f_hi: float

    def __post_init__(self):
        sec = np.array(self.sections, dtype=np.float64, copy=True)
        if sec.ndim != 2 or sec.shape[1] != 6:
            raise ValueError("sections must be an (n_sections, 6) array")
        if not np.allclose(sec[:, 3], 1.0):
            raise ValueError("sections must be normalized to a0 = 1")
        _, poles, _ = signal.sos2zpk(sec)
        if np.any(np.abs(poles) >= 1.0):
            raise ValueError("unstable filter: pole on or outside the unit circle")
        sec.flags.writeable = False
        object.__setattr__(self, "sections", sec)

    @property
    def n_sections(self) -> int:
        return self.sections.shape[0]

    @property
    def total_order(self) -> int:
        """Number of poles of the cascade."""
        return 2 * self.n_sections

    def magnitude_db(self, freqs) -> np.ndarray:
        """Single-pass magnitude response in dB at the given frequencies [Hz]."""
        _, h = signal.sosfreqz(self.sections, worN=np.atleast_1d(freqs), fs=self.fs)
        return 20.0 * np.log10(np.maximum(np.abs(h), 1e-300))


def design_butterworth_bandpass(order: int, f_lo: float, f_hi: float, fs: float) -> BiquadCascade:
    """Design a Butterworth band-pass as a biquad cascade.

    Analog low-pass prototype of the given (even) order, band-pass
    transformed and discretized by the bilinear transform with frequency
    prewarping; the magnitude at f_lo and f_hi is -3.0103 dB by construction.
    """
    if order < 2 or order % 2 != 0:
        raise ValueError("order must be even and >= 2")
    if not (0.0 < f_lo < f_hi < fs / 2):
        raise ValueError(f"band edges must satisfy 0 < {f_lo} < {f_hi} < fs/2 = {fs / 2}")
    sos = signal.butter(order, [f_lo, f_hi], btype="bandpass", fs=fs, output="sos")
    return BiquadCascade(sections=sos, fs=fs, f_lo=f_lo, f_hi=f_hi)


def apply_zero_phase(cascade: BiquadCascade, x: np.ndarray, strict: bool = True) -> np.ndarray:
    """Zero-phase filtering of 1D signals (or a batch along the last axis).

    strict=True  filter, reverse, filter, reverse with zero initial
                 conditions: the exactly linear self-adjoint operator.
    strict=False reflect-pad 3x the total filter order at each end first;
                 requires length >= 4x the total order.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0 or x.shape[-1] == 0:
        raise ValueError("empty signal")
    if not strict:
        pad = 3 * cascade.total_order
        if x.shape[-1] < 4 * cascade.total_order:
            raise ValueError(
                f"padded path needs at least {4 * cascade.total_order} samples, got {x.shape[-1]}"
            )
        widths = [(0, 0)] * (x.ndim - 1) + [(pad, pad)]
        y = np.pad(x, widths, mode="reflect")
    else:
        pad = 0
        y = x
    y = signal.sosfilt(cascade.sections, y, axis=-1)[..., ::-1]
    y = signal.sosfilt(cascade.sections, y, axis=-1)[..., ::-1]
    if pad:
        y = y[..., pad:-pad]
    return np.ascontiguousarray(y)


@dataclass(frozen=True, eq=False)
class BandFilterBank:
    """Per-band zero-phase band-pass operators (and their reject complements).

    Band k (1-based) covers the widened edges of ``spec.widened(k)``.
    ``default_strict`` selects the penalty path (True) or the padded display
    path (False) when the application functions are called without an
    explicit flag.
    """

    spec: BandSpec
    fs: float
    cascades: tuple[BiquadCascade, ...]
    default_strict: bool = True

    @property
    def n(self) -> int:
        return self.spec.n

    def cascade(self, k: int) -> BiquadCascade:
        if not 1 <= k <= self.n:
            raise ValueError(f"band index {k} out of range 1..{self.n}")
        return self.cascades[k - 1]


def make_filter_bank(spec: BandSpec, fs: float, default_strict: bool = True) -> BandFilterBank:
    """Design the cascade for every band of ``spec`` at sampling rate ``fs``."""
    spec.validate_against_fs(fs)
    cascades = tuple(
        design_butterworth_bandpass(spec.order, *spec.widened(k), fs) for k in range(1, spec.n + 1)
    )
    return BandFilterBank(spec=spec, fs=fs, cascades=cascades, default_strict=default_strict)


def _resolve_strict(bank: BandFilterBank, strict) -> bool:
    return bank.default_strict if strict is None else bool(strict)


def band_pass_array(bank: BandFilterBank, k: int, data: np.ndarray, strict=None) -> np.ndarray:
    """Band-pass operator for band k applied along the last axis of an array."""
    return apply_zero_phase(bank.cascade(k), data, strict=_resolve_strict(bank, strict))


def band_reject_array(bank: BandFilterBank, k: int, data: np.ndarray, strict=None) -> np.ndarray:
    """Band-reject complement: identity minus the band-pass operator."""
    data = np.asarray(data, dtype=np.float64)
    return data - band_pass_array(bank, k, data, strict=strict)


def band_pass_sinogram(bank: BandFilterBank, k: int, sino: Sinogram, strict=None) -> Sinogram:
    """Apply the band-k pass operator channel-wise to a sinogram."""
    return Sinogram(band_pass_array(bank, k, sino.data, strict=strict), dt=sino.dt, t0=sino.t0)


def band_reject_sinogram(bank: BandFilterBank, k: int, sino: Sinogram, strict=None) -> Sinogram:
    """Apply the band-k reject operator (identity minus pass) channel-wise."""
    return Sinogram(band_reject_array(bank, k, sino.data, strict=strict), dt=sino.dt, t0=sino.t0)


def materialize_filter_matrix(
    bank: BandFilterBank, k: int, n_t: int, variant: str = "pass", strict: bool = True
) -> np.ndarray:
    """Dense n_t x n_t matrix of the strict band operator (columns = impulse responses)."""
    if not strict:
        raise ValueError("only the strict (unpadded) mode has a matrix form")
    if variant not in ("pass", "reject"):
        raise ValueError(f"variant must be 'pass' or 'reject', got {variant!r}")
    eye = np.eye(n_t)
    cols = apply_zero_phase(bank.cascade(k), eye, strict=True)  # row i = response to impulse at i
    mat = cols.T
    if variant == "reject":
        mat = eye - mat
    return mat


def mean_power_spectrum(sino: Sinogram) -> tuple[np.ndarray, np.ndarray]:
    """One-sided per-channel periodogram |FFT|^2 / n_t, averaged over channels.

    Returns (frequencies [Hz], power), with n_t//2 + 1 bins. The bins are the
    raw one-sided values; summing with interior bins doubled recovers the
    two-sided total (Parseval).
    """
    if sino.n_t < 2:
        raise ValueError("need at least two time samples")
    spec = np.fft.rfft(sino.data, axis=1)
    power = (np.abs(spec) ** 2 / sino.n_t).mean(axis=0)
    freqs = np.fft.rfftfreq(sino.n_t, d=sino.dt)
    return freqs, power


def band_energy_fraction(
    freqs: np.ndarray, power: np.ndarray, f_lo: float, f_hi: float, n_t: int
) -> float:
    """Fraction of total spectral energy inside [f_lo, f_hi].

    Interior one-sided bins are double-weighted so the total matches the
    two-sided (time-domain) energy.
    """
    weights = np.full_like(power, 2.0)
    weights[0] = 1.0
    if n_t % 2 == 0:
        weights[-1] = 1.0
    total = float(np.sum(weights * power))
    if total == 0.0:
        return 0.0
    inside = (freqs >= f_lo) & (freqs <= f_hi)
    return float(np.sum(weights[inside] * power[inside]) / total)
