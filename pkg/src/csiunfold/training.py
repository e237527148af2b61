"""Training of the unfolded codec: L_total = L_MSE + gamma * L_constraint.

Both loss terms are normalized by (batch size * N) where N is the length of
the real CSI vector.  The optimizer is Adam with bias correction; the soft
thresholds are clamped to be nonnegative after every step.
"""
from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nx
from .channel import Dataset
from .codec import (
    CodecConfig, DecodeTrace, UnfoldingParams, decode_graph, encoder_input_batch, init_params,
    load_params, reconstruct, save_params,
)

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 64
    lr: float = 1e-3
    lr_schedule: str = "constant"  # or "cosine"
    gamma: float = 0.01
    seed: int = 0
    cr: float = 0.25
    n_iter: int = 9
    channels: int = 32
    spherical: bool = True
    phi_mode: str = "trainable"
    val_fraction: float = 0.1
    checkpoint_every: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown lr schedule {self.lr_schedule!r}")

    def codec_config(self, r_d: int, n_b: int) -> CodecConfig:
        return CodecConfig(r_d=r_d, n_b=n_b, cr=self.cr, n_iter=self.n_iter, channels=self.channels,
                           spherical=self.spherical, phi_mode=self.phi_mode, seed=self.seed)

    def lr_at(self, epoch: int) -> float:
        if self.lr_schedule == "cosine":
            return 0.5 * self.lr * (1 + np.cos(np.pi * epoch / self.epochs))
        return self.lr

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------- losses

def loss_mse(x_true, x_hat) -> nx.Tensor:
    """(1 / (N_T N)) * sum_i ||x_hat_i - x_i||^2 over a batch of row vectors."""
    x_true, x_hat = nx.as_tensor(x_true), nx.as_tensor(x_hat)
    if x_true.shape != x_hat.shape:
        raise nx.DimensionError(f"loss_mse: {x_true.shape} vs {x_hat.shape}")
    n_t, n = x_hat.shape
    return nx.sumsq(x_hat - x_true) * (1.0 / (n_t * n))


def loss_constraint(trace: DecodeTrace) -> nx.Tensor:
    """(1 / (N_T N)) * sum_i sum_k ||Ht_k(H_k(M_k(r_ik))) - M_k(r_ik)||^2."""
    if not trace.steps or any(st.sym is None for st in trace.steps):
        raise ValueError("decode trace lacks the symmetric-block images; decode with with_constraint=True")
    n_t, n = trace.x.shape
    total = None
    for st in trace.steps:
        term = nx.sumsq(st.sym - st.m)
        total = term if total is None else total + term
    return total * (1.0 / (n_t * n))


@dataclass
class BatchLosses:
    total: nx.Tensor
    mse: nx.Tensor
    constraint: nx.Tensor


def batch_loss(params: UnfoldingParams, x_batch: np.ndarray, gamma: float) -> BatchLosses:
    """Loss graph for one batch of encoder inputs (B x N), encoder included."""
    y = nx.matmul(x_batch, params.phi.T)
    trace = decode_graph(y, params, with_constraint=True)
    mse = loss_mse(x_batch, trace.x)
    con = loss_constraint(trace)
    return BatchLosses(mse + con * gamma, mse, con)


# ---------------------------------------------------------------- optimizer

class Adam:
    def __init__(self, params: list[nx.Tensor], lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]

    def step(self, grads: list[np.ndarray]):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1, c2 = 1 - b1 ** self.t, 1 - b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state(self) -> dict:
        out = {"t": np.asarray(self.t)}
        for i, (m, v) in enumerate(zip(self.m, self.v)):
            out[f"m{i}"], out[f"v{i}"] = m, v
        return out

    def load_state(self, st):
        self.t = int(st["t"])
        self.m = [np.array(st[f"m{i}"]) for i in range(len(self.params))]
        self.v = [np.array(st[f"v{i}"]) for i in range(len(self.params))]


# ---------------------------------------------------------------- loop

@dataclass
class TrainResult:
    params: UnfoldingParams
    history: list[dict] = field(default_factory=list)


def epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng(np.random.SeedSequence([int(seed), 0xE90C, epoch])).permutation(n)


def validation_split(ds: Dataset, fraction: float, seed: int) -> tuple[Dataset, Dataset | None]:
    n_val = int(round(len(ds) * fraction))
    if n_val == 0 or n_val >= len(ds):
        return ds, None
    perm = np.random.default_rng(np.random.SeedSequence([int(seed), 0x7A1])).permutation(len(ds))
    return ds.subset(np.sort(perm[n_val:])), ds.subset(np.sort(perm[:n_val]))


def validation_nmse(params: UnfoldingParams, val: Dataset) -> float:
    from .evaluation import nmse
    return nmse(val.samples, reconstruct(val.samples, params))


def _checkpoint(params, opt, epoch, history, ckpt_dir: Path):
    path = ckpt_dir / f"epoch{epoch:04d}.sptm"
    params.meta["epoch"] = epoch
    save_params(params, path)
    np.savez(path.with_suffix(".optim.npz"), epoch=epoch, **opt.state())
    return path


def train(dataset: Dataset, cfg: TrainConfig, val: Dataset | None = None, *,
          init: UnfoldingParams | None = None, resume_from=None, checkpoint_dir=None,
          log_file=None, fingerprint: str | None = None) -> TrainResult:
    """Minimize L_total with Adam over shuffled mini-batches.

    Without an explicit ``val`` set, ``cfg.val_fraction`` of ``dataset`` is held
    out.  ``resume_from`` points at a checkpoint written by this function; the
    run continues from the epoch after it with the saved optimizer state.
    """
    if len(dataset) == 0:
        raise ValueError("empty training set")
    r_d, n_b = dataset.dims
    if val is None:
        dataset, val = validation_split(dataset, cfg.val_fraction, cfg.seed)

    start_epoch = 0
    opt_state = None
    if resume_from is not None:
        params = load_params(resume_from)
        start_epoch = int(params.meta.get("epoch", 0))
        opt_state = np.load(Path(resume_from).with_suffix(".optim.npz"))
    elif init is not None:
        params = init.copy()
    else:
        params = init_params(cfg.codec_config(r_d, n_b))
    if (params.cfg.r_d, params.cfg.n_b) != (r_d, n_b):
        raise ValueError(f"dataset dims {(r_d, n_b)} do not match model {(params.cfg.r_d, params.cfg.n_b)}")
    params.meta.update({"train": cfg.to_dict(), "seed": cfg.seed})
    if fingerprint:
        params.meta["fingerprint"] = fingerprint

    X, _ = encoder_input_batch(dataset.samples, params.cfg.spherical)
    trainable = params.trainable()
    opt = Adam(trainable, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    if opt_state is not None:
        opt.load_state(opt_state)

    ckpt_dir = Path(checkpoint_dir) if checkpoint_dir else None
    if ckpt_dir:
        ckpt_dir.mkdir(parents=True, exist_ok=True)
    logf = open(log_file, "a") if log_file else None
    history: list[dict] = []
    try:
        for epoch in range(start_epoch, cfg.epochs):
            t0 = time.perf_counter()
            opt.lr = cfg.lr_at(epoch)
            order = epoch_order(cfg.seed, epoch, len(X))
            sums = np.zeros(2)
            for b, s in enumerate(range(0, len(X), cfg.batch_size)):
                xb = X[order[s:s + cfg.batch_size]]
                try:
                    losses = batch_loss(params, xb, cfg.gamma)
                except nx.NonFiniteError as exc:
                    raise TrainingDiverged(f"epoch {epoch + 1}, batch {b}: {exc}") from None
                if not np.isfinite(losses.total.data):
                    raise TrainingDiverged(f"epoch {epoch + 1}, batch {b}: loss is {losses.total.data}")
                grads = nx.backward(losses.total, trainable)
                opt.step(grads)
                for it in params.iters:
                    it.clamp_theta()
                sums += len(xb) * np.array([losses.mse.data, losses.constraint.data])
            rec = {"epoch": epoch + 1, "mse": sums[0] / len(X), "constraint": sums[1] / len(X)}
            if val is not None and len(val):
                v = validation_nmse(params, val)
                rec["val_nmse"] = v
                rec["val_nmse_db"] = float(10 * np.log10(max(v, 1e-10)))
            rec["time"] = time.perf_counter() - t0
            history.append(rec)
            line = " ".join(f"{k}={v:.6g}" if isinstance(v, float) else f"{k}={v}" for k, v in rec.items())
            log.info(line)
            if logf:
                logf.write(line + "\n")
                logf.flush()
            if ckpt_dir and cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
                _checkpoint(params, opt, epoch + 1, history, ckpt_dir)
    finally:
        if logf:
            logf.close()
    params.meta["epoch"] = cfg.epochs
    return TrainResult(params, history)
