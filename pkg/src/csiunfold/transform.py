"""Domain conversions for CSI matrices.

Spatial-frequency (N_f x N_b) <-> angular-delay via unitary DFTs, delay
truncation to the first R_d rows, the spherical (power, direction) split and
real vectorization.

Vector layout: ``[Re(H).ravel(), Im(H).ravel()]`` (row-major), length
``2 * R_d * N_b``.  The decoder's 2-channel image view uses the same order,
so channel 0 is the real block and channel 1 the imaginary block.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np


class Domain(str, enum.Enum):
    SPATIAL_FREQUENCY = "spatial_frequency"
    ANGULAR_DELAY = "angular_delay"
    ANGULAR_DELAY_TRUNCATED = "angular_delay_truncated"


class DomainError(ValueError):
    pass


class DegenerateInputError(ValueError):
    pass


@dataclass(frozen=True)
class CsiMatrix:
    data: np.ndarray
    domain: Domain

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 2:
            raise DomainError(f"CSI matrix must be 2-d, got shape {arr.shape}")
        object.__setattr__(self, "data", arr.astype(np.complex128, copy=False))
        object.__setattr__(self, "domain", Domain(self.domain))

    @property
    def shape(self):
        return self.data.shape

    def norm(self) -> float:
        return float(np.linalg.norm(self.data))


@dataclass(frozen=True)
class SphericalCsi:
    power: float
    direction: np.ndarray


def _expect(H: CsiMatrix, domain: Domain):
    if H.domain != domain:
        raise DomainError(f"expected {domain.value} matrix, got {H.domain.value}")


def dft_matrix(n: int) -> np.ndarray:
    """Unitary DFT matrix, F[m, k] = exp(-2j pi m k / n) / sqrt(n)."""
    idx = np.arange(n)
    return np.exp(-2j * np.pi * np.outer(idx, idx) / n) / np.sqrt(n)


def sf_to_ad(H: CsiMatrix) -> CsiMatrix:
    """H_ad = F_d^H H_sf F_a."""
    _expect(H, Domain.SPATIAL_FREQUENCY)
    # F_d^H X == ifft along rows (unitary norm); X F_a == fft along columns
    out = np.fft.fft(np.fft.ifft(H.data, axis=0, norm="ortho"), axis=1, norm="ortho")
    return CsiMatrix(out, Domain.ANGULAR_DELAY)


def ad_to_sf(H: CsiMatrix) -> CsiMatrix:
    """H_sf = F_d H_ad F_a^H."""
    _expect(H, Domain.ANGULAR_DELAY)
    out = np.fft.ifft(np.fft.fft(H.data, axis=0, norm="ortho"), axis=1, norm="ortho")
    return CsiMatrix(out, Domain.SPATIAL_FREQUENCY)


def truncate_delay(H: CsiMatrix, r_d: int) -> CsiMatrix:
    _expect(H, Domain.ANGULAR_DELAY)
    if not 1 <= r_d <= H.shape[0]:
        raise ValueError(f"R_d={r_d} outside [1, {H.shape[0]}]")
    return CsiMatrix(H.data[:r_d].copy(), Domain.ANGULAR_DELAY_TRUNCATED)


def spherical_split(H: CsiMatrix) -> SphericalCsi:
    _expect(H, Domain.ANGULAR_DELAY_TRUNCATED)
    p = H.norm()
    if p == 0.0:
        raise DegenerateInputError("cannot split a zero CSI matrix")
    return SphericalCsi(power=p, direction=H.data / p)


def spherical_combine(s: SphericalCsi) -> CsiMatrix:
    return CsiMatrix(s.power * s.direction, Domain.ANGULAR_DELAY_TRUNCATED)


def vectorize(H: CsiMatrix) -> np.ndarray:
    _expect(H, Domain.ANGULAR_DELAY_TRUNCATED)
    return np.concatenate([H.data.real.ravel(), H.data.imag.ravel()])


def devectorize(v: np.ndarray, r_d: int, n_b: int) -> CsiMatrix:
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (2 * r_d * n_b,):
        raise ValueError(f"vector length {v.shape} does not match 2*{r_d}*{n_b}")
    half = r_d * n_b
    H = (v[:half] + 1j * v[half:]).reshape(r_d, n_b)
    return CsiMatrix(H, Domain.ANGULAR_DELAY_TRUNCATED)


# batched helpers used by the codec / training loops; (n, R_d, N_b) complex <-> (n, N) real

def vectorize_batch(X: np.ndarray) -> np.ndarray:
    X = np.asarray(X)
    n = X.shape[0]
    return np.concatenate([X.real.reshape(n, -1), X.imag.reshape(n, -1)], axis=1).astype(np.float64)


def devectorize_batch(V: np.ndarray, r_d: int, n_b: int) -> np.ndarray:
    V = np.asarray(V, dtype=np.float64)
    half = r_d * n_b
    if V.ndim != 2 or V.shape[1] != 2 * half:
        raise ValueError(f"batch of vectors {V.shape} does not match 2*{r_d}*{n_b}")
    return (V[:, :half] + 1j * V[:, half:]).reshape(-1, r_d, n_b)
