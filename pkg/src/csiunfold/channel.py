"""Synthetic geometric multipath CSI generator and the CSID dataset file.

The generator is a clustered geometric stand-in for measured / COST2100-style
data. For a half-wavelength ULA with ``N_b`` antennas and ``N_f`` subcarriers
spaced ``bandwidth / N_f`` apart::

    H_sf[m, b] = g * sum_p a_p exp(-2j pi f_m tau_p) exp(-1j pi b sin(phi_p))

with ``f_m = m * bandwidth / N_f`` (m, b are 0-based) and ``a_p ~ CN(0, 1/P)``.
The number of paths ``P`` is drawn uniformly from ``n_paths``.  Paths are
grouped around ``K ~ U{n_clusters}`` cluster centres with centre delay
``~ U[0, delay_spread_max]`` and centre angle ``~ U[angle_range]``; each path
adds a Gaussian offset (``cluster_angle_spread`` rad, ``cluster_delay_spread``
s) clipped back into range.  ``n_clusters=None`` gives independent paths.

The matrix is divided by ``sqrt(N_f * N_b)`` so that a 0 dB sample has unit
expected Frobenius power, then scaled by ``g`` with
``20 log10 g ~ U[-spread/2, spread/2]`` dB.

Every sample uses its own generator seeded with ``(seed, index)`` so the
output does not depend on how the work is split between threads.
"""
from __future__ import annotations

import io
import json
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .transform import CsiMatrix, Domain, sf_to_ad, truncate_delay

MEASURED = 0
AUGMENTED = 1

MAGIC = b"CSID"
VERSION = 1
_HEADER = struct.Struct("<4sIIIQ")
_TRAILER = struct.Struct("<QI")


class CorruptFileError(ValueError):
    pass


class DatasetLengthError(CorruptFileError):
    pass


@dataclass
class ChannelScenarioConfig:
    n_antennas: int = 32
    n_subcarriers: int = 1024
    bandwidth: float = 20e6
    n_paths: tuple[int, int] = (20, 40)
    delay_spread_max: float = 0.4e-6
    angle_range: tuple[float, float] = (-np.pi / 2, np.pi / 2)
    n_clusters: tuple[int, int] | None = (1, 4)
    cluster_angle_spread: float = 0.05
    cluster_delay_spread: float = 0.05e-6
    path_loss_spread_db: float = 40.0
    truncation: int = 32
    rng_seed: int = 0

    def __post_init__(self):
        self.n_paths = tuple(int(v) for v in self.n_paths)
        self.angle_range = tuple(float(v) for v in self.angle_range)
        if self.n_clusters is not None:
            self.n_clusters = tuple(int(v) for v in self.n_clusters)
            if self.n_clusters[0] < 1 or self.n_clusters[1] < self.n_clusters[0]:
                raise ValueError(f"bad n_clusters range {self.n_clusters}")
        if self.n_antennas < 1 or self.n_subcarriers < 1:
            raise ValueError("n_antennas and n_subcarriers must be >= 1")
        lo, hi = self.n_paths
        if lo < 1 or hi < lo:
            raise ValueError(f"bad n_paths range {self.n_paths}")
        if not 1 <= self.truncation <= self.n_subcarriers:
            raise ValueError(f"truncation {self.truncation} outside [1, {self.n_subcarriers}]")
        if self.delay_spread_max < 0 or self.path_loss_spread_db < 0 or self.bandwidth <= 0:
            raise ValueError("delays, spreads and bandwidth must be nonnegative")
        if self.delay_spread_max * self.bandwidth > self.truncation:
            raise ValueError(
                f"delay_spread_max maps to delay bin {self.delay_spread_max * self.bandwidth:.1f},"
                f" beyond the first {self.truncation} kept rows"
            )

    @classmethod
    def desk(cls, **overrides) -> "ChannelScenarioConfig":
        kw = dict(n_subcarriers=256)
        kw.update(overrides)
        return cls(**kw)

    @classmethod
    def paper(cls, **overrides) -> "ChannelScenarioConfig":
        return cls(**overrides)

    def to_dict(self) -> dict:
        # JSON-normal form (tuples -> lists) so metadata survives a file roundtrip
        return json.loads(json.dumps(asdict(self)))


@dataclass
class Dataset:
    """Truncated angular-delay samples stored at file precision (complex64)."""

    samples: np.ndarray
    provenance: np.ndarray = None
    seed: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        s = np.asarray(self.samples)
        if s.ndim != 3:
            raise ValueError(f"samples must be (n, R_d, N_b), got {s.shape}")
        self.samples = s.astype(np.complex64, copy=False)
        if self.provenance is None:
            self.provenance = np.full(len(s), MEASURED, dtype=np.uint8)
        self.provenance = np.asarray(self.provenance, dtype=np.uint8)
        if self.provenance.shape != (len(s),):
            raise ValueError("one provenance tag per sample required")
        if len(s) and not np.all(np.any(self.samples != 0, axis=(1, 2))):
            raise ValueError("dataset contains an identically zero sample")

    def __len__(self):
        return self.samples.shape[0]

    def __getitem__(self, i) -> CsiMatrix:
        return CsiMatrix(self.samples[i], Domain.ANGULAR_DELAY_TRUNCATED)

    @property
    def dims(self) -> tuple[int, int]:
        return self.samples.shape[1], self.samples.shape[2]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.samples[idx], self.provenance[idx], self.seed, dict(self.meta))

    def split(self, n_first: int) -> tuple["Dataset", "Dataset"]:
        return self.subset(np.arange(n_first)), self.subset(np.arange(n_first, len(self)))

    def powers(self) -> np.ndarray:
        """Per-sample squared Frobenius norm."""
        s = self.samples.astype(np.complex128)
        return np.sum(np.abs(s) ** 2, axis=(1, 2))

    def power_spread_db(self) -> float:
        p = self.powers()
        if len(p) == 0:
            return 0.0
        return float(10 * np.log10(p.max() / p.min()))


def sample_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(index)]))


def steering_sf(n_f: int, n_b: int, bandwidth: float, gains, delays, angles) -> np.ndarray:
    """Closed-form spatial-frequency response of a set of paths (unnormalized)."""
    f = np.arange(n_f) * (bandwidth / n_f)
    b = np.arange(n_b)
    freq = np.exp(-2j * np.pi * np.outer(f, delays))  # N_f x P
    space = np.exp(-1j * np.pi * np.outer(np.sin(angles), b))  # P x N_b
    return (freq * np.asarray(gains)) @ space


def generate_sample(cfg: ChannelScenarioConfig, rng: np.random.Generator) -> CsiMatrix:
    lo, hi = cfg.n_paths
    n_p = int(rng.integers(lo, hi + 1))
    gains = (rng.standard_normal(n_p) + 1j * rng.standard_normal(n_p)) / np.sqrt(2 * n_p)
    a_lo, a_hi = cfg.angle_range
    if cfg.n_clusters is None:
        delays = rng.uniform(0.0, cfg.delay_spread_max, n_p)
        angles = rng.uniform(a_lo, a_hi, n_p)
    else:
        k = int(rng.integers(cfg.n_clusters[0], cfg.n_clusters[1] + 1))
        c_delay = rng.uniform(0.0, cfg.delay_spread_max, k)
        c_angle = rng.uniform(a_lo, a_hi, k)
        member = rng.integers(0, k, n_p)
        delays = np.clip(c_delay[member] + cfg.cluster_delay_spread * rng.standard_normal(n_p),
                         0.0, cfg.delay_spread_max)
        angles = np.clip(c_angle[member] + cfg.cluster_angle_spread * rng.standard_normal(n_p), a_lo, a_hi)
    level_db = rng.uniform(-cfg.path_loss_spread_db / 2, cfg.path_loss_spread_db / 2)
    g = 10 ** (level_db / 20) / np.sqrt(cfg.n_subcarriers * cfg.n_antennas)
    H = g * steering_sf(cfg.n_subcarriers, cfg.n_antennas, cfg.bandwidth, gains, delays, angles)
    return CsiMatrix(H, Domain.SPATIAL_FREQUENCY)


def _one(cfg: ChannelScenarioConfig, seed: int, i: int) -> np.ndarray:
    H = generate_sample(cfg, sample_rng(seed, i))
    return truncate_delay(sf_to_ad(H), cfg.truncation).data


def generate_dataset(cfg: ChannelScenarioConfig, n_samples: int, *, offset: int = 0,
                     workers: int = 1) -> Dataset:
    """Generate ``n_samples`` truncated angular-delay samples.

    ``offset`` shifts the per-sample index so disjoint train/test sets can be
    drawn from the same seed.
    """
    r_d, n_b = cfg.truncation, cfg.n_antennas
    idx = range(offset, offset + n_samples)
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            mats = list(pool.map(lambda i: _one(cfg, cfg.rng_seed, i), idx))
    else:
        mats = [_one(cfg, cfg.rng_seed, i) for i in idx]
    samples = np.stack(mats) if mats else np.zeros((0, r_d, n_b), dtype=np.complex64)
    return Dataset(samples, seed=cfg.rng_seed,
                   meta={"scenario": cfg.to_dict(), "offset": offset})


def save_dataset(ds: Dataset, path) -> None:
    r_d, n_b = ds.dims
    n = len(ds)
    buf = io.BytesIO()
    buf.write(_HEADER.pack(MAGIC, VERSION, r_d, n_b, n))
    payload = np.empty((n, 2 * r_d * n_b * 4 + 1), dtype=np.uint8)
    pairs = ds.samples.astype("<c8").view("<f4").reshape(n, -1)
    payload[:, :-1] = pairs.view(np.uint8).reshape(n, -1)
    payload[:, -1] = ds.provenance
    buf.write(payload.tobytes())
    meta = json.dumps(ds.meta, sort_keys=True, default=_json_default).encode()
    buf.write(_TRAILER.pack(int(ds.seed) & (2**64 - 1), len(meta)))
    buf.write(meta)
    Path(path).write_bytes(buf.getvalue())


def load_dataset(path) -> Dataset:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise CorruptFileError(f"{path}: file shorter than the CSID header")
    magic, version, r_d, n_b, n = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise CorruptFileError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise CorruptFileError(f"{path}: unsupported version {version}")
    rec = 2 * r_d * n_b * 4 + 1
    body_end = _HEADER.size + n * rec
    if len(raw) < body_end + _TRAILER.size:
        raise DatasetLengthError(
            f"{path}: header declares {n} samples of {r_d}x{n_b}, payload is too short")
    seed, meta_len = _TRAILER.unpack_from(raw, body_end)
    if len(raw) != body_end + _TRAILER.size + meta_len:
        raise DatasetLengthError(f"{path}: payload length does not match header dims {r_d}x{n_b}")
    body = np.frombuffer(raw, dtype=np.uint8, count=n * rec, offset=_HEADER.size).reshape(n, rec)
    samples = np.ascontiguousarray(body[:, :-1]).view("<c8").reshape(n, r_d, n_b)
    prov = body[:, -1].copy()
    try:
        meta = json.loads(raw[body_end + _TRAILER.size:].decode())
    except ValueError as exc:
        raise CorruptFileError(f"{path}: unreadable metadata ({exc})") from None
    return Dataset(samples.astype(np.complex64), prov, int(seed), meta)


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o).__name__)
