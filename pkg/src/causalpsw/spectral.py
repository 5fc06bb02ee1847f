"""Centred 2D DFT, low/high-pass masks and low-frequency spectrum mixing.

Images are channel-first arrays ``(C, H, W)`` or batches ``(N, C, H, W)``;
every transform acts on the last two axes, one channel at a time.
Forward transform is unnormalised, inverse carries 1/(HW).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

LOW = "low"
HIGH = "high"

# mask layouts: cross-shaped bands from the bit formulas, exact complements, or a centred square
MASK_MODES = ("cross", "complement", "square")


class SpectralError(ValueError):
    pass


class DimensionMismatch(SpectralError):
    pass


class InvalidDelta(SpectralError):
    pass


def dft2(img: np.ndarray) -> np.ndarray:
    """Per-channel 2D DFT with the zero frequency moved to (H//2, W//2)."""
    img = np.asarray(img, dtype=float)
    if img.ndim < 2 or img.shape[-1] < 2 or img.shape[-2] < 2:
        raise SpectralError(f"image must be at least 2x2, got {img.shape}")
    return np.fft.fftshift(np.fft.fft2(img, axes=(-2, -1)), axes=(-2, -1))


def idft2(spec: np.ndarray, return_imag: bool = False):
    """Inverse of :func:`dft2`; returns the real part.

    With ``return_imag`` also returns max |imag|, the residue left by masks
    that are not conjugate-symmetric. Values are not clamped.
    """
    out = np.fft.ifft2(np.fft.ifftshift(spec, axes=(-2, -1)), axes=(-2, -1))
    if return_imag:
        return out.real, float(np.max(np.abs(out.imag))) if out.size else 0.0
    return out.real


@dataclass(frozen=True)
class FilterMask:
    bits: np.ndarray
    kind: str
    size: float
    mode: str = "cross"

    @property
    def shape(self) -> tuple[int, int]:
        return self.bits.shape


def _center_distance(h: int, w: int) -> np.ndarray:
    i = np.abs(np.arange(h) - h / 2)[:, None]
    j = np.abs(np.arange(w) - w / 2)[None, :]
    return np.minimum(i, j)


def _cheb_distance(h: int, w: int) -> np.ndarray:
    i = np.abs(np.arange(h) - h / 2)[:, None]
    j = np.abs(np.arange(w) - w / 2)[None, :]
    return np.maximum(i, j)


def low_pass_mask(h: int, w: int, size: float, mode: str = "cross") -> FilterMask:
    """Ones where min(|i - H/2|, |j - W/2|) <= S/2 (a centred cross band).

    ``mode="square"`` uses max(...) instead, the conventional centred square.
    """
    _check_mode(mode)
    d = _cheb_distance(h, w) if mode == "square" else _center_distance(h, w)
    return FilterMask((d <= size / 2).astype(np.uint8), LOW, size, mode)


def high_pass_mask(h: int, w: int, size: float, mode: str = "cross") -> FilterMask:
    """Zeros where min(|i - H/2|, |j - W/2|) <= (min(H, W) - S)/2, ones elsewhere.

    In ``complement`` and ``square`` modes the high band is exactly the
    complement of the corresponding low band.
    """
    _check_mode(mode)
    if mode == "cross":
        bits = (_center_distance(h, w) > (min(h, w) - size) / 2).astype(np.uint8)
    else:
        bits = 1 - low_pass_mask(h, w, size, mode).bits
    return FilterMask(bits, HIGH, size, mode)


def _check_mode(mode: str) -> None:
    if mode not in MASK_MODES:
        raise SpectralError(f"unknown mask mode {mode!r}; expected one of {MASK_MODES}")


def masks(h: int, w: int, size: float, mode: str = "cross") -> tuple[FilterMask, FilterMask]:
    return low_pass_mask(h, w, size, mode), high_pass_mask(h, w, size, mode)


def apply_mask(spec: np.ndarray, mask: FilterMask) -> np.ndarray:
    if spec.shape[-2:] != mask.shape:
        raise DimensionMismatch(f"spectrum {spec.shape[-2:]} vs mask {mask.shape}")
    return spec * mask.bits


def split_bands(img: np.ndarray, size: float, mode: str = "cross") -> tuple[np.ndarray, np.ndarray]:
    """Low- and high-frequency images (x^l, x^h) of ``img``."""
    spec = dft2(img)
    low, high = masks(*spec.shape[-2:], size, mode)
    return idft2(apply_mask(spec, low)), idft2(apply_mask(spec, high))


def band_images(img: np.ndarray, size: float, mode: str = "cross") -> tuple[np.ndarray, np.ndarray]:
    """Same result as :func:`split_bands`, without shifting the spectrum.

    The masks are moved to the unshifted frequency layout instead, which
    saves two full-array copies per call on large batches.
    """
    img = np.asarray(img, dtype=float)
    low, high = masks(*img.shape[-2:], size, mode)
    axes = (-2, -1)
    f = np.fft.fft2(img, axes=axes)
    lo = np.fft.ifft2(f * np.fft.ifftshift(low.bits), axes=axes).real
    hi = np.fft.ifft2(f * np.fft.ifftshift(high.bits), axes=axes).real
    return lo, hi


def mix_spectra(xi: np.ndarray, xj: np.ndarray, lam, size: float, mode: str = "cross") -> np.ndarray:
    """Simulated sample: keep the high band of ``xi``, interpolate low bands.

    F(x~) = F_h(xi) + (1 - lam) F_l(xi) + lam F_l(xj).  ``lam`` may be a
    scalar or one value per image in a batch.
    """
    xi = np.asarray(xi, dtype=float)
    xj = np.asarray(xj, dtype=float)
    if xi.shape != xj.shape:
        raise DimensionMismatch(f"{xi.shape} vs {xj.shape}")
    lam = np.asarray(lam, dtype=float)
    if np.any(lam < 0) or np.any(lam > 1):
        raise SpectralError("lambda must lie in [0, 1]")
    if lam.ndim == 1:
        lam = lam.reshape((-1,) + (1,) * (xi.ndim - 1))
    fi, fj = dft2(xi), dft2(xj)
    low, high = masks(*xi.shape[-2:], size, mode)
    mixed = apply_mask(fi, high) + (1 - lam) * apply_mask(fi, low) + lam * apply_mask(fj, low)
    return idft2(mixed)


def sample_lambda(delta: float, rng: np.random.Generator, size=None):
    """Mixing ratio drawn from U(0, delta)."""
    if not 0.0 <= delta <= 1.0:
        raise InvalidDelta(f"delta must lie in [0, 1], got {delta}")
    if delta == 0.0:
        return 0.0 if size is None else np.zeros(size)
    return rng.uniform(0.0, delta, size=size)


def default_filter_size(h: int, w: int) -> int:
    return min(h, w) // 4
