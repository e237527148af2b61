"""Command-line entry point: generate, augment, train, eval, sweep, flops.

Configuration is layered: built-in profile < ``--config`` JSON file <
``CSIUNFOLD_*`` environment variables < command-line flags.  The JSON file may
contain any of the sections ``scenario``, ``augment``, ``train`` and ``eval``
plus top-level ``profile`` and ``seed``.  Recognized environment variables:

    CSIUNFOLD_CONFIG, CSIUNFOLD_PROFILE, CSIUNFOLD_SEED, CSIUNFOLD_CR,
    CSIUNFOLD_STRATEGY, CSIUNFOLD_OUT, CSIUNFOLD_DETERMINISTIC

The master seed is copied into the scenario, augmentation and training
sections.  Every artifact carries the fingerprint of the resolved config
(output directory excluded), so two runs of the same config produce
byte-identical datasets, checkpoints and reports.
"""
from __future__ import annotations

import argparse
import contextlib
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .augment import STRATEGIES, AugmentPolicy, build_augmented_dataset
from .channel import ChannelScenarioConfig, generate_dataset, load_dataset, save_dataset
from .codec import CheckpointError, load_params, save_params
from .evaluation import (
    EvalReport, encoder_flops, evaluate_params, fingerprint, mflops, run_cr_sweep,
)
from .training import TrainConfig, TrainingDiverged, train

ENV_PREFIX = "CSIUNFOLD_"
PROFILES = ("paper", "desk")

EXIT_OK, EXIT_USAGE, EXIT_DIVERGED, EXIT_MISSING = 0, 2, 3, 4

_PROFILE_DEFAULTS = {
    "desk": {
        "scenario": ChannelScenarioConfig.desk().to_dict(),
        "train": dict(n_iter=3, channels=8, epochs=10, lr=1e-3),
        "augment": {},
        "eval": dict(n_train=5000, n_test=1000, cr_list=[1 / 4, 1 / 8, 1 / 16, 1 / 32]),
    },
    "paper": {
        "scenario": ChannelScenarioConfig.paper().to_dict(),
        "train": dict(n_iter=9, channels=32, epochs=200, lr=1e-4),
        "augment": {},
        "eval": dict(n_train=100_000, n_test=20_000, cr_list=[1 / 4, 1 / 8, 1 / 16, 1 / 32]),
    },
}


@dataclass
class RunConfig:
    profile: str = "desk"
    seed: int = 0
    scenario: dict = field(default_factory=dict)
    augment: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    eval: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.profile not in PROFILES:
            raise ValueError(f"unknown profile {self.profile!r}")
        # validate early by building every section once
        self.scenario_config()
        self.train_config()
        self.policy()

    @classmethod
    def resolve(cls, file_cfg: dict | None = None, **overrides) -> "RunConfig":
        file_cfg = dict(file_cfg or {})
        unknown = set(file_cfg) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown config keys {sorted(unknown)}")
        profile = overrides.get("profile") or file_cfg.get("profile") or "desk"
        if profile not in PROFILES:
            raise ValueError(f"unknown profile {profile!r}")
        base = json.loads(json.dumps(_PROFILE_DEFAULTS[profile]))
        for sec in ("scenario", "augment", "train", "eval"):
            base[sec].update(file_cfg.get(sec, {}))
        seed = overrides.get("seed")
        if seed is None:
            seed = file_cfg.get("seed", 0)
        if overrides.get("cr") is not None:
            base["train"]["cr"] = overrides["cr"]
        if overrides.get("epochs") is not None:
            base["train"]["epochs"] = overrides["epochs"]
        if overrides.get("strategy") is not None:
            base["augment"]["strategy"] = overrides["strategy"]
        return cls(profile=profile, seed=int(seed), **base)

    def scenario_config(self) -> ChannelScenarioConfig:
        return ChannelScenarioConfig(**{**self.scenario, "rng_seed": self.seed})

    def train_config(self) -> TrainConfig:
        return TrainConfig(**{**self.train, "seed": self.seed})

    def policy(self, target_size: int | None = None) -> AugmentPolicy:
        kw = dict(self.augment)
        strategy = kw.pop("strategy", "ads_pr")
        if target_size is not None:
            kw["target_size"] = target_size
        return AugmentPolicy.from_strategy(strategy, rng_seed=self.seed, **kw)

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))

    @property
    def fingerprint(self) -> str:
        return fingerprint(self.to_dict())


# ---------------------------------------------------------------- helpers

def _env(name, default=None):
    return os.environ.get(ENV_PREFIX + name, default)


def _env_flag(name) -> bool:
    return str(_env(name, "")).lower() in ("1", "true", "yes", "on")


@contextlib.contextmanager
def _single_threaded(enabled: bool):
    if not enabled:
        yield
        return
    from threadpoolctl import threadpool_limits
    with threadpool_limits(limits=1):
        yield


def _workers(args) -> int:
    return 1 if args.deterministic else max(1, os.cpu_count() or 1)


def _stamp(meta: dict, rc: RunConfig, stage: str) -> dict:
    meta = dict(meta)
    meta.setdefault("provenance", []).append({"stage": stage, "fingerprint": rc.fingerprint,
                                             "seed": rc.seed})
    meta["fingerprint"] = rc.fingerprint
    meta["run_config"] = rc.to_dict()
    return meta


def _out_dir(args) -> Path:
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _summary(ds) -> str:
    r_d, n_b = ds.dims
    spread = ds.power_spread_db() if len(ds) else 0.0
    return f"n={len(ds)} dims={r_d}x{n_b} power_spread_db={spread:.2f}"


# ---------------------------------------------------------------- commands

def cmd_generate(args, rc: RunConfig) -> int:
    n = args.n if args.n is not None else int(rc.eval.get("n_train", 1000))
    ds = generate_dataset(rc.scenario_config(), n, offset=args.offset, workers=_workers(args))
    ds.meta = _stamp(ds.meta, rc, "generate")
    path = _out_dir(args) / f"{args.name}.csid"
    save_dataset(ds, path)
    print(f"wrote {path}: {_summary(ds)}")
    return EXIT_OK


def cmd_augment(args, rc: RunConfig) -> int:
    measured = load_dataset(args.input)
    target = args.target if args.target is not None else int(rc.augment.get("target_size", len(measured)))
    try:
        policy = rc.policy(target_size=target)
        out_ds = build_augmented_dataset(measured, policy, workers=_workers(args))
    except ValueError as exc:
        print(f"augment: {exc}", file=sys.stderr)
        return EXIT_USAGE
    out_ds.meta = _stamp(out_ds.meta, rc, "augment")
    path = _out_dir(args) / f"{args.name}.csid"
    save_dataset(out_ds, path)
    print(f"wrote {path}: {_summary(out_ds)} strategy={policy.strategy}")
    return EXIT_OK


def cmd_train(args, rc: RunConfig) -> int:
    data = load_dataset(args.data)
    val = load_dataset(args.val) if args.val else None
    cfg = rc.train_config()
    out = _out_dir(args)
    try:
        res = train(data, cfg, val, resume_from=args.resume, checkpoint_dir=out / "checkpoints",
                    log_file=out / "train.log", fingerprint=rc.fingerprint)
    except TrainingDiverged as exc:
        print(f"train: diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    res.params.meta["run_config"] = rc.to_dict()
    path = out / f"{args.name}.sptm"
    save_params(res.params, path)
    last = res.history[-1] if res.history else {}
    print(f"wrote {path}: epochs={cfg.epochs} " + " ".join(
        f"{k}={last[k]:.4g}" for k in ("mse", "val_nmse_db") if k in last))
    return EXIT_OK


def cmd_eval(args, rc: RunConfig) -> int:
    try:
        params = load_params(args.model)
    except (OSError, CheckpointError) as exc:
        print(f"eval: cannot load model: {exc}", file=sys.stderr)
        return EXIT_MISSING
    test = load_dataset(args.data)
    v = evaluate_params(params, test)
    rep = EvalReport("NMSE evaluation", config=dict(rc.to_dict(), model_fingerprint=params.meta.get("fingerprint")))
    rep.add(cr=params.cfg.cr, nmse=v,
            encoder_mflops=mflops(encoder_flops(params.cfg.cr, params.cfg.n, params.cfg.spherical)))
    rep.write(_out_dir(args), args.name)
    print(rep.table(), end="")
    return EXIT_OK


def _cr_tag(cr: float) -> str:
    return f"{cr:.6g}".replace(".", "p")


def cmd_sweep(args, rc: RunConfig) -> int:
    cr_list = args.cr_list or rc.eval.get("cr_list") or [rc.train_config().cr]
    test = load_dataset(args.test)
    out = _out_dir(args)
    model_dir = Path(args.models) if args.models else out / "models"
    if args.eval_only:
        missing = [cr for cr in cr_list if not (model_dir / f"model_cr{_cr_tag(cr)}.sptm").exists()]
        if missing:
            print(f"sweep: missing checkpoints for CR {missing} in {model_dir}", file=sys.stderr)
            return EXIT_MISSING
        factory = lambda cr: load_params(model_dir / f"model_cr{_cr_tag(cr)}.sptm")  # noqa: E731
    else:
        if not args.data:
            print("sweep: --data is required unless --eval-only", file=sys.stderr)
            return EXIT_USAGE
        data = load_dataset(args.data)
        model_dir.mkdir(parents=True, exist_ok=True)

        def factory(cr):
            cfg = rc.train_config()
            cfg.cr = cr
            params = train(data, cfg, fingerprint=rc.fingerprint).params
            save_params(params, model_dir / f"model_cr{_cr_tag(cr)}.sptm")
            return params

    try:
        rep = run_cr_sweep(factory, test, cr_list, rc.to_dict())
    except TrainingDiverged as exc:
        print(f"sweep: diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    rep.write(out, args.name, plot=("cr", "nmse_db"))
    print(rep.table(), end="")
    return EXIT_OK


def cmd_flops(args, rc: RunConfig) -> int:
    cr_list = args.cr_list or rc.eval.get("cr_list") or [1 / 4, 1 / 8, 1 / 16, 1 / 32]
    n = args.n if args.n is not None else 2 * rc.scenario["truncation"] * rc.scenario["n_antennas"]
    rep = EvalReport(f"Encoder FLOPs (N={n})", config=dict(rc.to_dict(), n=n))
    for cr in cr_list:
        count = encoder_flops(cr, n, spherical=not args.no_spherical)
        rep.add(cr=f"1/{round(1 / cr)}" if abs(1 / cr - round(1 / cr)) < 1e-9 else cr,
                flops=count, mflops=f"{mflops(count):.1f}")
    if args.out:
        rep.write(_out_dir(args), args.name)
    print(rep.table(), end="")
    return EXIT_OK


# ---------------------------------------------------------------- parser

def _ratio(text: str) -> float:
    if "/" in text:
        a, b = text.split("/", 1)
        return float(a) / float(b)
    return float(text)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=_env("CONFIG"), help="JSON run config")
    common.add_argument("--seed", type=int, default=_env("SEED"), help="master seed (u64)")
    common.add_argument("--profile", choices=PROFILES, default=_env("PROFILE"))
    common.add_argument("--cr", type=_ratio, default=_env("CR"), help="compression ratio, e.g. 1/4")
    common.add_argument("--strategy", choices=sorted(STRATEGIES), default=_env("STRATEGY"))
    common.add_argument("--deterministic", action="store_true", default=_env_flag("DETERMINISTIC"),
                        help="single-threaded reductions")
    common.add_argument("--out", default=_env("OUT"), help="output directory (default: cwd)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="csiunfold", description=__doc__.split("\n")[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", parents=[common], help="synthesize a dataset")
    g.add_argument("--n", type=int)
    g.add_argument("--offset", type=int, default=0)
    g.add_argument("--name", default="dataset")
    g.set_defaults(func=cmd_generate)

    a = sub.add_parser("augment", parents=[common], help="augment a measured dataset")
    a.add_argument("--in", dest="input", required=True)
    a.add_argument("--target", type=int)
    a.add_argument("--name", default="augmented")
    a.set_defaults(func=cmd_augment)

    t = sub.add_parser("train", parents=[common], help="train a codec")
    t.add_argument("--data", required=True)
    t.add_argument("--val")
    t.add_argument("--epochs", type=int)
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--name", default="model")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    e.add_argument("--model", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--name", default="eval")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("sweep", parents=[common], help="NMSE over several compression ratios")
    s.add_argument("--data", help="training set")
    s.add_argument("--test", required=True)
    s.add_argument("--cr-list", type=_ratio, nargs="+")
    s.add_argument("--epochs", type=int)
    s.add_argument("--models", help="checkpoint directory")
    s.add_argument("--eval-only", action="store_true")
    s.add_argument("--name", default="sweep")
    s.set_defaults(func=cmd_sweep)

    f = sub.add_parser("flops", parents=[common], help="encoder FLOP table")
    f.add_argument("--n", type=int, help="real CSI vector length (default from the scenario)")
    f.add_argument("--cr-list", type=_ratio, nargs="+")
    f.add_argument("--no-spherical", action="store_true")
    f.add_argument("--name", default="flops")
    f.set_defaults(func=cmd_flops)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        file_cfg = json.loads(Path(args.config).read_text()) if args.config else None
        rc = RunConfig.resolve(file_cfg, profile=args.profile, seed=args.seed, cr=args.cr,
                               strategy=args.strategy, epochs=getattr(args, "epochs", None))
    except (OSError, ValueError, TypeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    with _single_threaded(args.deterministic):
        return args.func(args, rc)


if __name__ == "__main__":
    sys.exit(main())
