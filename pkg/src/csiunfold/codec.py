"""Spherical linear encoder and the deep-unfolded ISTA decoder.

Encoder (UE side)::

    p = ||H||_F,   y = Phi @ vec(H / p)          (spherical mode, Phi is (M-1) x N)
    y = Phi @ vec(H)                              (plain mode, Phi is M x N)

Decoder (gNB side), starting from ``x0 = Phi^T y`` and repeated for
k = 1..N_I with per-iteration parameters::

    r_k = x_{k-1} - rho_k * Phi^T (Phi x_{k-1} - y)
    x_k = r_k + B_k(Ht_k(soft(H_k(M_k(r_k)), theta_k)))

``M_k`` maps the 2-channel (real, imag) R_d x N_b image to C feature maps,
``H_k`` and ``Ht_k`` are conv-relu-conv blocks on C channels and ``B_k``
maps back to 2 channels.  All convolutions are 3x3 and bias-free.
"""
from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nx
from .numerics import Tensor
from .transform import (
    CsiMatrix, DegenerateInputError, Domain, devectorize_batch, vectorize, vectorize_batch,
)

SPTM_MAGIC = b"SPTM"
SPTM_VERSION = 1
_CKPT_HEADER = struct.Struct("<4sIIIIIBBII")

PHI_TRAINABLE = "trainable"
PHI_FIXED = "fixed_random_gaussian"


class CheckpointError(ValueError):
    pass


@dataclass
class CodecConfig:
    r_d: int = 32
    n_b: int = 32
    cr: float = 0.25
    n_iter: int = 9
    channels: int = 32
    spherical: bool = True
    phi_mode: str = PHI_TRAINABLE
    seed: int = 0
    rho_init: float = 0.5
    theta_init: float = 0.01

    def __post_init__(self):
        if self.phi_mode not in (PHI_TRAINABLE, PHI_FIXED):
            raise ValueError(f"unknown measurement matrix mode {self.phi_mode!r}")
        if self.n_iter < 1 or self.channels < 1:
            raise ValueError("n_iter and channels must be >= 1")
        if self.n_rows < 1:
            raise ValueError(f"CR={self.cr} leaves no measurement rows for N={self.n}")

    @property
    def n(self) -> int:
        return 2 * self.r_d * self.n_b

    @property
    def m(self) -> int:
        """Total feedback dimension, floor(N * CR)."""
        return int(np.floor(self.n * self.cr + 1e-9))

    @property
    def n_rows(self) -> int:
        return self.m - 1 if self.spherical else self.m


@dataclass
class FeedbackVector:
    y: np.ndarray
    p: float | None = None

    @property
    def dim(self) -> int:
        return len(self.y) + (self.p is not None)


@dataclass
class IterationParams:
    rho: Tensor
    theta: Tensor
    w_m: Tensor   # C x 2 x 3 x 3
    w_h1: Tensor  # C x C x 3 x 3
    w_h2: Tensor
    w_t1: Tensor  # the symmetric (left-inverse) block
    w_t2: Tensor
    w_b: Tensor   # 2 x C x 3 x 3

    FIELDS = ("rho", "theta", "w_m", "w_h1", "w_h2", "w_t1", "w_t2", "w_b")

    def tensors(self) -> list[Tensor]:
        return [getattr(self, f) for f in self.FIELDS]

    def clamp_theta(self):
        if self.theta.data < 0:
            self.theta.data = np.zeros((), dtype=np.float64)


@dataclass
class UnfoldingParams:
    cfg: CodecConfig
    phi: Tensor
    iters: list[IterationParams]
    meta: dict = field(default_factory=dict)

    @property
    def phi_trainable(self) -> bool:
        return self.cfg.phi_mode == PHI_TRAINABLE

    def all_tensors(self) -> list[Tensor]:
        """Every tensor in checkpoint declaration order."""
        out = [self.phi]
        for it in self.iters:
            out.extend(it.tensors())
        return out

    def trainable(self) -> list[Tensor]:
        out = [self.phi] if self.phi_trainable else []
        for it in self.iters:
            out.extend(it.tensors())
        return out

    def copy(self) -> "UnfoldingParams":
        return load_params_bytes(params_to_bytes(self))


def _xavier(rng, c_out, c_in):
    std = np.sqrt(2.0 / (9 * (c_in + c_out)))
    return rng.standard_normal((c_out, c_in, 3, 3)) * std


def orthonormal_rows(rows: int, n: int, rng: np.random.Generator) -> np.ndarray:
    """Orthogonalized Gaussian rows (rows <= n)."""
    g = rng.standard_normal((n, rows))
    q, r = np.linalg.qr(g)
    q = q * np.sign(np.diag(r))
    return q.T.copy()


def init_params(cfg: CodecConfig) -> UnfoldingParams:
    rng = np.random.default_rng(np.random.SeedSequence([int(cfg.seed), 0x5D7]))
    if cfg.phi_mode == PHI_FIXED:
        phi = orthonormal_rows(cfg.n_rows, cfg.n, rng)
    else:
        phi = rng.standard_normal((cfg.n_rows, cfg.n)) / np.sqrt(cfg.n)
    c = cfg.channels
    iters = []
    for _ in range(cfg.n_iter):
        iters.append(IterationParams(
            rho=nx.parameter(cfg.rho_init),
            theta=nx.parameter(cfg.theta_init),
            w_m=nx.parameter(_xavier(rng, c, 2)),
            w_h1=nx.parameter(_xavier(rng, c, c)),
            w_h2=nx.parameter(_xavier(rng, c, c)),
            w_t1=nx.parameter(_xavier(rng, c, c)),
            w_t2=nx.parameter(_xavier(rng, c, c)),
            w_b=nx.parameter(_xavier(rng, 2, c)),
        ))
    return UnfoldingParams(cfg, Tensor(phi, requires_grad=cfg.phi_mode == PHI_TRAINABLE), iters)


def _phi_array(phi) -> np.ndarray:
    if isinstance(phi, UnfoldingParams):
        return phi.phi.data
    if isinstance(phi, Tensor):
        return phi.data
    return np.asarray(phi, dtype=np.float64)


# ---------------------------------------------------------------- encoder

def encode(H: CsiMatrix, phi, spherical: bool = True) -> FeedbackVector:
    if H.domain != Domain.ANGULAR_DELAY_TRUNCATED:
        raise ValueError(f"encode expects a truncated angular-delay matrix, got {H.domain.value}")
    phi = _phi_array(phi)
    if not spherical:
        return FeedbackVector(phi @ vectorize(H))
    p = H.norm()
    if p == 0.0:
        raise DegenerateInputError("cannot encode a zero CSI matrix")
    x = vectorize(CsiMatrix(H.data / p, H.domain))
    return FeedbackVector(phi @ x, p)


def encoder_input_batch(X: np.ndarray, spherical: bool) -> tuple[np.ndarray, np.ndarray | None]:
    """Real encoder inputs (n x N) and powers for a stack of truncated matrices."""
    V = vectorize_batch(np.asarray(X).astype(np.complex128))
    if not spherical:
        return V, None
    p = np.linalg.norm(V, axis=1)
    if np.any(p == 0):
        raise DegenerateInputError("cannot encode a zero CSI matrix")
    return V / p[:, None], p


# ---------------------------------------------------------------- decoder

def r_step(x_prev, y, phi, rho) -> Tensor:
    """x - rho * Phi^T (Phi x - y) on row-vector batches (B x N, B x rows)."""
    x_prev, y, phi = nx.as_tensor(x_prev), nx.as_tensor(y), nx.as_tensor(phi)
    single = x_prev.data.ndim == 1
    if single:
        x_prev, y = x_prev.reshape(1, -1), y.reshape(1, -1)
    if phi.shape[1] != x_prev.shape[1] or phi.shape[0] != y.shape[1]:
        raise nx.DimensionError(f"r_step: Phi {phi.shape} vs x {x_prev.shape}, y {y.shape}")
    resid = x_prev @ phi.T - y
    r = x_prev - rho * (resid @ phi)
    return r.reshape(-1) if single else r


@dataclass
class XStepTrace:
    x: Tensor
    m: Tensor            # M(r)
    h: Tensor            # H(M(r))
    sym: Tensor | None   # Ht(H(M(r))), only when requested


def _block(z, w1, w2):
    return nx.conv2d(nx.relu(nx.conv2d(z, w1)), w2)


def x_step(r, it: IterationParams, r_d: int, n_b: int, with_constraint: bool = False) -> XStepTrace:
    r = nx.as_tensor(r)
    single = r.data.ndim == 1
    b = 1 if single else r.shape[0]
    if r.size != b * 2 * r_d * n_b:
        raise nx.DimensionError(f"x_step: r of shape {r.shape} does not fit 2x{r_d}x{n_b}")
    img = r.reshape(b, 2, r_d, n_b)
    m = nx.conv2d(img, it.w_m)
    h = _block(m, it.w_h1, it.w_h2)
    s = nx.soft_threshold(h, it.theta)
    res = nx.conv2d(_block(s, it.w_t1, it.w_t2), it.w_b)
    x = r + res.reshape(r.shape)
    sym = _block(h, it.w_t1, it.w_t2) if with_constraint else None
    return XStepTrace(x, m, h, sym)


@dataclass
class DecodeTrace:
    x: Tensor
    x0: Tensor
    rs: list[Tensor]
    steps: list[XStepTrace]


def decode_graph(y, params: UnfoldingParams, with_constraint: bool = False) -> DecodeTrace:
    """Run the unfolded iterations on a batch of measurements (B x rows)."""
    cfg = params.cfg
    y = nx.as_tensor(y)
    if y.data.ndim != 2 or y.shape[1] != cfg.n_rows:
        raise nx.DimensionError(f"measurements {y.shape} do not match {cfg.n_rows} rows")
    phi = params.phi
    x = y @ phi
    x0 = x
    rs, steps = [], []
    for it in params.iters:
        r = r_step(x, y, phi, it.rho)
        st = x_step(r, it, cfg.r_d, cfg.n_b, with_constraint)
        rs.append(r)
        steps.append(st)
        x = st.x
    return DecodeTrace(x, x0, rs, steps)


def decode(fb: FeedbackVector, params: UnfoldingParams) -> tuple[CsiMatrix, DecodeTrace]:
    cfg = params.cfg
    if len(fb.y) != cfg.n_rows:
        raise nx.DimensionError(f"feedback has {len(fb.y)} measurements, model expects {cfg.n_rows}")
    if cfg.spherical and fb.p is None:
        raise ValueError("spherical model needs the fed-back power p")
    trace = decode_graph(np.asarray(fb.y, dtype=np.float64)[None], params)
    scale = fb.p if cfg.spherical else 1.0
    H = devectorize_batch(scale * trace.x.data, cfg.r_d, cfg.n_b)[0]
    return CsiMatrix(H, Domain.ANGULAR_DELAY_TRUNCATED), trace


def reconstruct(X: np.ndarray, params: UnfoldingParams, batch_size: int = 256) -> np.ndarray:
    """Encode and decode a stack of truncated matrices (n x R_d x N_b)."""
    cfg = params.cfg
    X = np.asarray(X)
    out = np.empty(X.shape, dtype=np.complex128)
    phi = params.phi.data
    for s in range(0, len(X), batch_size):
        V, p = encoder_input_batch(X[s:s + batch_size], cfg.spherical)
        xhat = decode_graph(V @ phi.T, params).x.data
        if p is not None:
            xhat = xhat * p[:, None]
        out[s:s + batch_size] = devectorize_batch(xhat, cfg.r_d, cfg.n_b)
    return out


# ---------------------------------------------------------------- checkpoints

def params_to_bytes(params: UnfoldingParams) -> bytes:
    cfg = params.cfg
    buf = io.BytesIO()
    buf.write(_CKPT_HEADER.pack(SPTM_MAGIC, SPTM_VERSION, cfg.n, cfg.m, cfg.n_iter, cfg.channels,
                                int(cfg.spherical), int(cfg.phi_mode == PHI_TRAINABLE),
                                cfg.r_d, cfg.n_b))
    for t in params.all_tensors():
        buf.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    meta = dict(params.meta)
    meta["codec"] = asdict(cfg)
    blob = json.dumps(meta, sort_keys=True).encode()
    buf.write(struct.pack("<I", len(blob)))
    buf.write(blob)
    return buf.getvalue()


def load_params_bytes(raw: bytes) -> UnfoldingParams:
    if len(raw) < _CKPT_HEADER.size:
        raise CheckpointError("checkpoint shorter than its header")
    magic, version, n, m, n_iter, c, sph, trainable, r_d, n_b = _CKPT_HEADER.unpack_from(raw)
    if magic != SPTM_MAGIC:
        raise CheckpointError(f"bad magic {magic!r}")
    if version != SPTM_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    if n != 2 * r_d * n_b:
        raise CheckpointError(f"N={n} inconsistent with {r_d}x{n_b}")
    off = _CKPT_HEADER.size
    rows = m - 1 if sph else m
    per_iter = [(), (), (c, 2, 3, 3), (c, c, 3, 3), (c, c, 3, 3), (c, c, 3, 3), (c, c, 3, 3), (2, c, 3, 3)]
    shapes = [(rows, n)] + per_iter * n_iter
    n_floats = sum(int(np.prod(s)) for s in shapes)
    body_end = off + 8 * n_floats
    if len(raw) < body_end + 4:
        raise CheckpointError("checkpoint payload truncated")
    (meta_len,) = struct.unpack_from("<I", raw, body_end)
    if len(raw) != body_end + 4 + meta_len:
        raise CheckpointError("checkpoint length does not match its header")
    flat = np.frombuffer(raw, dtype="<f8", count=n_floats, offset=off).astype(np.float64)
    meta = json.loads(raw[body_end + 4:].decode())
    codec_kw = meta.pop("codec", {})
    cfg = CodecConfig(**codec_kw) if codec_kw else CodecConfig(
        r_d=r_d, n_b=n_b, cr=m / n, n_iter=n_iter, channels=c, spherical=bool(sph),
        phi_mode=PHI_TRAINABLE if trainable else PHI_FIXED)
    if (cfg.n, cfg.m, cfg.n_iter, cfg.channels) != (n, m, n_iter, c):
        raise CheckpointError("embedded codec config disagrees with header dims")
    tensors, pos = [], 0
    for s in shapes:
        size = int(np.prod(s))
        tensors.append(flat[pos:pos + size].reshape(s).copy())
        pos += size
    phi = Tensor(tensors[0], requires_grad=bool(trainable))
    iters = []
    for k in range(n_iter):
        chunk = tensors[1 + 8 * k: 1 + 8 * (k + 1)]
        iters.append(IterationParams(*[nx.parameter(a) for a in chunk]))
    return UnfoldingParams(cfg, phi, iters, meta)


def save_params(params: UnfoldingParams, path) -> None:
    Path(path).write_bytes(params_to_bytes(params))


def load_params(path) -> UnfoldingParams:
    return load_params_bytes(Path(path).read_bytes())
