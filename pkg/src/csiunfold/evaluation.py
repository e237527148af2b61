"""NMSE metric, classical ISTA baseline, encoder FLOP accounting, and the
CR-sweep / augmentation-study drivers."""
from __future__ import annotations

import hashlib
import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .channel import Dataset
from .codec import CodecConfig, encoder_input_batch, orthonormal_rows
from .transform import DegenerateInputError, devectorize_batch

DB_FLOOR = -100.0


def _stack(H_set) -> np.ndarray:
    if isinstance(H_set, np.ndarray):
        return H_set.astype(np.complex128, copy=False)
    return np.stack([getattr(h, "data", h) for h in H_set]).astype(np.complex128)


def nmse(H_set, H_hat_set) -> float:
    """Mean over samples of ||H - H_hat||_F^2 / ||H||_F^2 (linear)."""
    H, Hh = _stack(H_set), _stack(H_hat_set)
    if H.shape != Hh.shape:
        raise ValueError(f"target {H.shape} and estimate {Hh.shape} differ")
    if len(H) == 0:
        raise ValueError("empty sample set")
    den = np.sum(np.abs(H) ** 2, axis=(1, 2))
    if np.any(den == 0):
        raise DegenerateInputError("NMSE undefined for a zero-norm target")
    num = np.sum(np.abs(H - Hh) ** 2, axis=(1, 2))
    return float(np.mean(num / den))


def to_db(linear: float) -> float:
    if linear <= 0:
        return DB_FLOOR
    return max(DB_FLOOR, 10 * math.log10(linear))


# ---------------------------------------------------------------- ISTA baseline

def ista_objective(x, y, phi, lam) -> float:
    r = phi @ x - y
    return 0.5 * float(np.vdot(r, r)) + lam * float(np.abs(x).sum())


def classical_ista(y, phi, lam: float, n_iter: int, step: float | None = None,
                   track_objective: bool = False):
    """Plain ISTA for min 0.5||Phi x - y||^2 + lam ||x||_1 with an identity sparsifier.

    ``y`` may be a single measurement vector or a batch (rows are samples).
    ``step`` defaults to 1 / ||Phi^T Phi||_2.
    """
    phi = np.asarray(phi, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if step is None:
        step = 1.0 / np.linalg.norm(phi, 2) ** 2
    single = y.ndim == 1
    Y = y[None] if single else y
    X = np.zeros((Y.shape[0], phi.shape[1]))
    objs = []
    thr = step * lam
    for _ in range(n_iter):
        R = X - step * ((X @ phi.T - Y) @ phi)
        X = np.sign(R) * np.maximum(np.abs(R) - thr, 0.0)
        if track_objective:
            objs.append(sum(ista_objective(x, yy, phi, lam) for x, yy in zip(X, Y)))
    out = X[0] if single else X
    return (out, objs) if track_objective else out


def ista_baseline_reconstruct(X: np.ndarray, cr: float, lam: float, n_iter: int = 200,
                              seed: int = 0) -> np.ndarray:
    """Spherical feedback with a fixed orthonormal Gaussian Phi, decoded by ISTA."""
    n_rows_cfg = CodecConfig(r_d=X.shape[1], n_b=X.shape[2], cr=cr, spherical=True)
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x5D7]))
    phi = orthonormal_rows(n_rows_cfg.n_rows, n_rows_cfg.n, rng)
    V, p = encoder_input_batch(X, spherical=True)
    xhat = classical_ista(V @ phi.T, phi, lam, n_iter, step=1.0)
    return devectorize_batch(xhat * p[:, None], X.shape[1], X.shape[2])


def tune_ista_lambda(X_val: np.ndarray, cr: float, grid: Sequence[float], n_iter: int = 200,
                     seed: int = 0) -> tuple[float, float]:
    """Pick the lambda with the lowest NMSE on a validation stack."""
    best = None
    for lam in grid:
        v = nmse(X_val, ista_baseline_reconstruct(X_val, cr, lam, n_iter, seed))
        if best is None or v < best[1]:
            best = (lam, v)
    return best


# ---------------------------------------------------------------- FLOPs

def encoder_flops(cr: float, n: int, spherical: bool = True) -> int:
    """Multiply-accumulate count of the UE encoder (1 MAC = 2 FLOPs).

    Spherical mode adds the norm (N squares, N-1 adds, 1 root, plus one
    pass of N scalings folded into the count as 2N+1).
    """
    m = int(math.floor(n * cr + 1e-9))
    if m < 2:
        raise ValueError(f"N*CR = {n * cr} leaves no room for measurements")
    if spherical:
        return 2 * (m - 1) * n + (2 * n + 1)
    return 2 * m * n


def mflops(count: int) -> float:
    """FLOPs in millions rounded to 0.1 M."""
    return round(count / 1e6, 1)


# ---------------------------------------------------------------- reports

def fingerprint(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class EvalReport:
    title: str
    rows: list[dict] = field(default_factory=list)
    config: dict = field(default_factory=dict)
    runtime: dict = field(default_factory=dict)

    @property
    def fingerprint(self) -> str:
        return fingerprint(self.config)

    def add(self, **row):
        if "nmse" in row and "nmse_db" not in row:
            row["nmse_db"] = to_db(row["nmse"])
        self.rows.append(row)

    def table(self) -> str:
        if not self.rows:
            return f"{self.title}\n(empty)\n"
        keys = list(dict.fromkeys(k for r in self.rows for k in r))
        cells = [[_fmt(r.get(k, "")) for k in keys] for r in self.rows]
        widths = [max(len(k), *(len(c[i]) for c in cells)) for i, k in enumerate(keys)]
        lines = [self.title, "  ".join(k.rjust(w) for k, w in zip(keys, widths))]
        lines.append("  ".join("-" * w for w in widths))
        lines += ["  ".join(c.rjust(w) for c, w in zip(row, widths)) for row in cells]
        lines.append(f"config fingerprint: {self.fingerprint}")
        return "\n".join(lines) + "\n"

    def records(self) -> str:
        """One JSON object per line: a header record then one per cell."""
        out = [json.dumps({"record": "header", "title": self.title, "fingerprint": self.fingerprint,
                           "config": self.config}, sort_keys=True, default=str)]
        out += [json.dumps({"record": "cell", **r}, sort_keys=True, default=str) for r in self.rows]
        return "\n".join(out) + "\n"

    def plot_data(self, x: str, y: str) -> str:
        lines = [f"{x},{y}"]
        lines += [f"{r[x]!r},{r[y]!r}" for r in self.rows if x in r and y in r]
        return "\n".join(lines) + "\n"

    def write(self, out_dir, stem: str = "report", plot: tuple[str, str] | None = None) -> dict:
        """Write table, records and (optionally) plot CSV; runtime stats go to a
        separate file so the other three stay reproducible byte for byte."""
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        paths = {"table": out_dir / f"{stem}.txt", "records": out_dir / f"{stem}.jsonl",
                 "runtime": out_dir / f"{stem}.runtime.json"}
        paths["table"].write_text(self.table())
        paths["records"].write_text(self.records())
        paths["runtime"].write_text(json.dumps(self.runtime, sort_keys=True, indent=1))
        if plot:
            paths["plot"] = out_dir / f"{stem}.csv"
            paths["plot"].write_text(self.plot_data(*plot))
        return paths


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.4g}"
    return str(v)


# ---------------------------------------------------------------- studies

def evaluate_params(params, test: Dataset) -> float:
    from .codec import reconstruct
    return nmse(test.samples, reconstruct(test.samples, params))


def run_cr_sweep(model_factory: Callable[[float], object], test: Dataset, cr_list: Sequence[float],
                 config: dict | None = None) -> EvalReport:
    """``model_factory(cr)`` trains or loads a model; each is evaluated on ``test``."""
    rep = EvalReport("NMSE vs CR", config=dict(config or {}, cr_list=list(cr_list)))
    for cr in cr_list:
        t0 = time.perf_counter()
        params = model_factory(cr)
        v = evaluate_params(params, test)
        n = params.cfg.n
        rep.add(cr=cr, nmse=v, encoder_mflops=mflops(encoder_flops(cr, n, params.cfg.spherical)))
        rep.runtime[f"cr={cr}"] = time.perf_counter() - t0
    return rep


@dataclass
class AugStudyConfig:
    """One study: measured pools of several sizes, each augmented to ``target_size``."""
    train_cfg: object
    target_size: int = 5000
    delay_shift_range: tuple[int, int] = (-3, 3)
    angular_shift_range: tuple[int, int] = (-15, 15)
    seed: int = 0

    def to_dict(self):
        d = asdict(self)
        d["train_cfg"] = self.train_cfg.to_dict()
        return d


def run_augmentation_study(pool: Dataset, test: Dataset, sizes: Sequence[int], strategies: Sequence[str],
                           cfg: AugStudyConfig, val: Dataset | None = None) -> EvalReport:
    """Train one model per (measured size, strategy) cell and report its test NMSE.

    The measured set of size ``s`` is a seeded random draw from ``pool``.
    """
    from .augment import STRATEGIES, AugmentPolicy, build_augmented_dataset
    from .training import train

    for s in strategies:
        if s not in STRATEGIES:
            raise ValueError(f"unknown strategy {s!r}")
    rep = EvalReport("NMSE vs augmentation strategy", config=dict(cfg.to_dict(), sizes=list(sizes),
                                                                  strategies=list(strategies)))
    for size in sizes:
        pick = np.random.default_rng(np.random.SeedSequence([int(cfg.seed), 0x5E1, int(size)]))
        measured = pool.subset(np.sort(pick.permutation(len(pool))[:size]))
        for strategy in strategies:
            t0 = time.perf_counter()
            policy = AugmentPolicy.from_strategy(strategy, target_size=max(cfg.target_size, size),
                                                 delay_shift_range=cfg.delay_shift_range,
                                                 angular_shift_range=cfg.angular_shift_range,
                                                 rng_seed=cfg.seed)
            train_set = build_augmented_dataset(measured, policy)
            result = train(train_set, cfg.train_cfg, val=val)
            rep.add(measured=size, strategy=strategy, nmse=evaluate_params(result.params, test))
            rep.runtime[f"{size}/{strategy}"] = time.perf_counter() - t0
    return rep
