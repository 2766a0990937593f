"""Complex signal chain: centered orthonormal 2D FFT, B0 phase, diagnostics."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.ndimage import gaussian_filter

PSNR_CAP_DB = 99.0


class SizeError(ValueError):
    pass


@dataclass
class ComplexSeries:
    """A [T, H, W] complex array tagged with the domain it lives in."""

    domain: str
    data: np.ndarray
    frame_rate: Optional[float] = None
    mask: Optional[object] = field(default=None, repr=False)

    def __post_init__(self):
        if self.domain not in ("image", "kspace"):
            raise ValueError(f"unknown domain {self.domain!r}")
        self.data = np.asarray(self.data)
        if self.data.ndim == 2:
            self.data = self.data[None]
        if not np.iscomplexobj(self.data):
            self.data = self.data.astype(np.complex128 if self.data.dtype == np.float64 else np.complex64)

    @property
    def shape(self):
        return self.data.shape


def _is_pow2(n: int) -> bool:
    return n > 0 and (n & (n - 1)) == 0


def _check_pow2(shape):
    h, w = shape[-2], shape[-1]
    if not (_is_pow2(h) and _is_pow2(w)):
        raise SizeError(f"FFT needs power-of-two frame sizes, got {h}x{w}")


_TWIDDLES: dict = {}
_BITREV: dict = {}


def _bitrev(n):
    perm = _BITREV.get(n)
    if perm is None:
        bits = n.bit_length() - 1
        perm = np.array([int(format(i, f"0{bits}b")[::-1], 2) if bits else 0 for i in range(n)])
        _BITREV[n] = perm
    return perm


def _fft_last(x: np.ndarray, inverse: bool) -> np.ndarray:
    """Unnormalized radix-2 decimation-in-time FFT along the last axis."""
    n = x.shape[-1]
    if n == 1:
        return x.copy()
    out = x[..., _bitrev(n)]
    lead = out.shape[:-1]
    size = 2
    while size <= n:
        half = size // 2
        key = (size, inverse, out.dtype)
        tw = _TWIDDLES.get(key)
        if tw is None:
            sign = 1.0 if inverse else -1.0
            tw = np.exp(sign * 2j * np.pi * np.arange(half) / size).astype(out.dtype)
            _TWIDDLES[key] = tw
        blocks = out.reshape(*lead, n // size, 2, half)
        even = blocks[..., 0, :]
        odd = blocks[..., 1, :] * tw
        out = np.concatenate([even + odd, even - odd], axis=-1).reshape(*lead, n)
        size *= 2
    return out


def _fft2(x: np.ndarray, inverse: bool) -> np.ndarray:
    y = _fft_last(x, inverse)
    y = np.swapaxes(_fft_last(np.swapaxes(y, -1, -2), inverse), -1, -2)
    return y


def fft2c(x: np.ndarray) -> np.ndarray:
    """Centered orthonormal forward transform of [..., H, W] arrays."""
    x = np.asarray(x)
    if not np.iscomplexobj(x):
        x = x.astype(np.complex128 if x.dtype == np.float64 else np.complex64)
    _check_pow2(x.shape)
    h, w = x.shape[-2:]
    y = _fft2(np.fft.ifftshift(x, axes=(-2, -1)), inverse=False)
    y = np.fft.fftshift(y, axes=(-2, -1)) / np.sqrt(h * w)
    return y.astype(x.dtype, copy=False)


def ifft2c(k: np.ndarray) -> np.ndarray:
    """Inverse of :func:`fft2c`."""
    k = np.asarray(k)
    if not np.iscomplexobj(k):
        k = k.astype(np.complex128 if k.dtype == np.float64 else np.complex64)
    _check_pow2(k.shape)
    h, w = k.shape[-2:]
    y = _fft2(np.fft.ifftshift(k, axes=(-2, -1)), inverse=True)
    y = np.fft.fftshift(y, axes=(-2, -1)) / np.sqrt(h * w)
    return y.astype(k.dtype, copy=False)


def fft2_centered(x: ComplexSeries) -> ComplexSeries:
    if x.domain != "image":
        raise ValueError("fft2_centered expects an image-domain series")
    return ComplexSeries("kspace", fft2c(x.data), x.frame_rate)


def ifft2_centered(k: ComplexSeries) -> ComplexSeries:
    if k.domain != "kspace":
        raise ValueError("ifft2_centered expects a k-space series")
    return ComplexSeries("image", ifft2c(k.data), k.frame_rate)


@dataclass
class B0Field:
    phase: np.ndarray
    smoothing_sigma: float
    amplitude: float
    seed: int


def make_b0_field(H: int, W: int, smoothing_sigma: Optional[float] = None,
                  amplitude: float = np.pi / 2, seed: int = 0) -> B0Field:
    """Smooth random phase map: Gaussian-filtered white noise scaled to ``amplitude``."""
    if smoothing_sigma is None:
        smoothing_sigma = H / 8
    if amplitude <= 0:
        raise ValueError("B0 amplitude must be positive")
    if smoothing_sigma < 1:
        raise ValueError("B0 smoothing sigma must be >= 1 pixel")
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal((H, W))
    phi = gaussian_filter(noise, smoothing_sigma, mode="wrap")
    phi *= amplitude / np.abs(phi).max()
    return B0Field(phi, float(smoothing_sigma), float(amplitude), int(seed))


def high_frequency_energy_fraction(phi: np.ndarray, cutoff: float = 0.125) -> float:
    """Share of spectral energy with max(|fx|, |fy|) above ``cutoff`` cycles/pixel."""
    spec = np.abs(np.fft.fft2(phi)) ** 2
    fy = np.abs(np.fft.fftfreq(phi.shape[0]))[:, None]
    fx = np.abs(np.fft.fftfreq(phi.shape[1]))[None, :]
    high = np.maximum(fy, fx) > cutoff
    return float(spec[high].sum() / spec.sum())


def apply_b0_phase(x: ComplexSeries, b0: B0Field) -> ComplexSeries:
    if x.domain != "image":
        raise ValueError("B0 phase applies to image-domain data")
    if b0.phase.shape != x.data.shape[-2:]:
        raise ValueError(f"B0 field {b0.phase.shape} does not match frames {x.data.shape[-2:]}")
    rot = np.exp(1j * b0.phase).astype(x.data.dtype)
    return ComplexSeries("image", x.data * rot, x.frame_rate)


def reflect_through_dc(k: np.ndarray) -> np.ndarray:
    """K[-k] for DC-centered [..., H, W] arrays: index i maps to (-i) mod N."""
    h, w = k.shape[-2:]
    ri = (-np.arange(h)) % h
    ci = (-np.arange(w)) % w
    return k[..., ri, :][..., :, ci]


def hermitian_asymmetry(k: ComplexSeries) -> np.ndarray:
    """Per-frame distance from conjugate symmetry, up to a global phase.

    Returns min over theta of ||K - e^{i theta} conj(K(-k))|| / ||K||, so real
    and purely imaginary images both score 0.
    """
    if k.domain != "kspace":
        raise ValueError("hermitian_asymmetry expects k-space")
    K = k.data.astype(np.complex128)
    Kr = reflect_through_dc(K)
    energy = (np.abs(K) ** 2).sum(axis=(-2, -1))
    cross = np.abs((K * Kr).sum(axis=(-2, -1)))
    ratio = np.where(energy > 0, cross / np.where(energy > 0, energy, 1.0), 1.0)
    return np.sqrt(np.clip(2.0 - 2.0 * ratio, 0.0, None))


def psnr(reference: np.ndarray, test: np.ndarray) -> float:
    """20*log10(max(reference) / RMSE), capped at 99 dB."""
    reference = np.asarray(reference, dtype=np.float64)
    test = np.asarray(test, dtype=np.float64)
    if reference.shape != test.shape:
        raise ValueError(f"psnr shape mismatch {reference.shape} vs {test.shape}")
    peak = np.abs(reference).max()
    if peak == 0:
        raise ValueError("psnr reference is identically zero")
    rmse = np.sqrt(np.mean((reference - test) ** 2))
    if rmse == 0:
        return PSNR_CAP_DB
    return float(min(20.0 * np.log10(peak / rmse), PSNR_CAP_DB))


def line_mask(lines: np.ndarray, W: int) -> np.ndarray:
    """Broadcast [T, H] line selection to a boolean [T, H, W] grid."""
    return np.repeat(np.asarray(lines, dtype=bool)[..., None], W, axis=-1)


def zero_fill_reconstruct(k_masked: ComplexSeries, mask) -> np.ndarray:
    lines = mask.lines if hasattr(mask, "lines") else np.asarray(mask)
    if lines.shape != k_masked.data.shape[:2]:
        raise ValueError(f"mask {lines.shape} does not match k-space {k_masked.data.shape}")
    k = np.where(lines[..., None].astype(bool), k_masked.data, 0)
    return np.abs(ifft2c(k))
