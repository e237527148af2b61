"""Model-driven CSI augmentation: angular-delay shifting (ADS) and phase
randomization (PR) on decoupled magnitude / phase matrices.

Index convention: the shift rule is written 1-based in the literature as
``|H_aug[m, n]| = |H[m + i, (n + j) mod N_b]|`` for ``1 <= m + i <= R_d`` and 0
otherwise.  Internally rows/columns are 0-based, so the rule becomes
``out[m, n] = mag[m + i, (n + j) % N_b]`` if ``0 <= m + i < R_d`` else 0.
The angular axis wraps around, the delay axis is zero-filled.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .channel import AUGMENTED, MEASURED, Dataset, sample_rng
from .transform import CsiMatrix, Domain

TWO_PI = 2 * np.pi

STRATEGIES = {
    "none": (False, False),
    "ads": (True, False),
    "pr": (False, True),
    "ads_pr": (True, True),
}


@dataclass
class AugmentPolicy:
    delay_shift_range: tuple[int, int] = (-3, 3)
    angular_shift_range: tuple[int, int] = (-15, 15)
    use_ads: bool = True
    use_pr: bool = True
    target_size: int = 100_000
    rng_seed: int = 0

    @classmethod
    def from_strategy(cls, strategy: str, **kw) -> "AugmentPolicy":
        try:
            ads, pr = STRATEGIES[strategy]
        except KeyError:
            raise ValueError(f"unknown strategy {strategy!r}; choose from {sorted(STRATEGIES)}") from None
        return cls(use_ads=ads, use_pr=pr, **kw)

    @property
    def strategy(self) -> str:
        return {v: k for k, v in STRATEGIES.items()}[(self.use_ads, self.use_pr)]

    def validate(self, r_d: int, n_b: int):
        (i0, i1), (j0, j1) = self.delay_shift_range, self.angular_shift_range
        if i0 > i1 or j0 > j1:
            raise ValueError("shift ranges must be ordered (min, max)")
        if max(abs(i0), abs(i1)) > r_d // 2:
            raise ValueError(f"delay shift range {self.delay_shift_range} exceeds +-{r_d // 2}")
        if max(abs(j0), abs(j1)) > n_b // 2:
            raise ValueError(f"angular shift range {self.angular_shift_range} exceeds +-{n_b // 2}")


def split_mag_phase(H: CsiMatrix | np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Magnitude and phase in [0, 2pi); zero entries get phase 0."""
    data = H.data if isinstance(H, CsiMatrix) else np.asarray(H)
    mag = np.abs(data)
    phase = np.angle(data)
    phase = np.where(phase < 0, phase + TWO_PI, phase)
    phase[(phase >= TWO_PI) | (mag == 0)] = 0.0
    return mag, phase


def compose(mag: np.ndarray, phase: np.ndarray) -> CsiMatrix:
    mag, phase = np.asarray(mag, dtype=np.float64), np.asarray(phase, dtype=np.float64)
    if mag.shape != phase.shape:
        raise ValueError(f"magnitude {mag.shape} and phase {phase.shape} differ")
    return CsiMatrix(mag * np.exp(1j * phase), Domain.ANGULAR_DELAY_TRUNCATED)


def ads_shift(mag: np.ndarray, i: int, j: int) -> np.ndarray:
    """Shift by ``i`` delay rows (zero-filled) and ``j`` angular columns (circular)."""
    mag = np.asarray(mag)
    r_d, n_b = mag.shape
    if abs(i) > r_d // 2 or abs(j) > n_b // 2:
        raise ValueError(f"shift ({i}, {j}) out of bounds for {r_d}x{n_b}")
    rolled = np.roll(mag, -j, axis=1)
    out = np.zeros_like(mag)
    if i >= 0:
        out[: r_d - i] = rolled[i:]
    else:
        out[-i:] = rolled[: r_d + i]
    return out


def random_phase(dims: tuple[int, int], rng: np.random.Generator) -> np.ndarray:
    """i.i.d. U[0, 2pi) phases."""
    return rng.uniform(0.0, TWO_PI, size=dims)


def shift_grid(policy: AugmentPolicy) -> np.ndarray:
    """All allowed (i, j) pairs except (0, 0)."""
    (i0, i1), (j0, j1) = policy.delay_shift_range, policy.angular_shift_range
    ii, jj = np.meshgrid(np.arange(i0, i1 + 1), np.arange(j0, j1 + 1), indexing="ij")
    grid = np.stack([ii.ravel(), jj.ravel()], axis=1)
    grid = grid[(grid[:, 0] != 0) | (grid[:, 1] != 0)]
    if len(grid) == 0:
        grid = np.zeros((1, 2), dtype=np.int64)
    return grid


def plan_augmentation(n_measured: int, policy: AugmentPolicy) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(source index, delay shift, angular shift) for every new sample.

    Without ADS the shifts are all zero; without any augmentation the sources
    cycle through the measured set so repetition is as even as possible.
    """
    n_new = policy.target_size - n_measured
    rng = np.random.default_rng(np.random.SeedSequence([int(policy.rng_seed), 0xA06]))
    if not policy.use_ads and not policy.use_pr:
        src = np.arange(n_new) % n_measured
        return src, np.zeros(n_new, dtype=np.int64), np.zeros(n_new, dtype=np.int64)
    src = rng.integers(0, n_measured, n_new)
    if policy.use_ads:
        grid = shift_grid(policy)
        pick = grid[rng.integers(0, len(grid), n_new)]
        return src, pick[:, 0].copy(), pick[:, 1].copy()
    return src, np.zeros(n_new, dtype=np.int64), np.zeros(n_new, dtype=np.int64)


def augment_one(source: np.ndarray, i: int, j: int, use_ads: bool, use_pr: bool,
                rng: np.random.Generator | None) -> np.ndarray:
    """One augmented sample: ADS (magnitude and phase shifted together), then PR."""
    mag, phase = split_mag_phase(np.asarray(source, dtype=np.complex128))
    if use_ads:
        mag, phase = ads_shift(mag, i, j), ads_shift(phase, i, j)
    if use_pr:
        phase = random_phase(mag.shape, rng)
    return compose(mag, phase).data


def build_augmented_dataset(measured: Dataset, policy: AugmentPolicy, workers: int = 1) -> Dataset:
    n = len(measured)
    if n == 0:
        raise ValueError("cannot augment an empty dataset")
    if policy.target_size < n:
        raise ValueError(f"target_size {policy.target_size} smaller than measured set ({n})")
    r_d, n_b = measured.dims
    if policy.use_ads:
        policy.validate(r_d, n_b)
    src, di, dj = plan_augmentation(n, policy)
    base = measured.samples

    def make(t):
        if not policy.use_ads and not policy.use_pr:
            return base[src[t]]
        rng = sample_rng(policy.rng_seed, t) if policy.use_pr else None
        return augment_one(base[src[t]], int(di[t]), int(dj[t]), policy.use_ads, policy.use_pr, rng)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            new = list(pool.map(make, range(len(src))))
    else:
        new = [make(t) for t in range(len(src))]

    samples = np.concatenate([base, np.asarray(new, dtype=np.complex64).reshape(-1, r_d, n_b)])
    prov = np.concatenate([np.full(n, MEASURED, np.uint8), np.full(len(src), AUGMENTED, np.uint8)])
    meta = dict(measured.meta)
    meta["augment"] = {
        "strategy": policy.strategy,
        "delay_shift_range": list(policy.delay_shift_range),
        "angular_shift_range": list(policy.angular_shift_range),
        "target_size": policy.target_size,
        "rng_seed": policy.rng_seed,
        "n_measured": n,
    }
    return Dataset(samples, prov, policy.rng_seed, meta)
