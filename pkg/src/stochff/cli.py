"""Command-line harness: train the fixture, run sweeps and ablations, verify.

Usage::

    stochff train --out-model fixture.json --out-data heldout.bin
    stochff sweep-variance --kadv 0.5 --out variance.csv
    stochff sweep-adversarial --sigma2 0.03 --out adversarial.csv
    stochff ablate-maxpool --out ablation.csv
    stochff verify

Adversarial intensities on the command line are in fixture units of
``--kadv-unit`` raw pixels (default 10, the synthetic images' pixel-noise
amplitude); ``--sigma2`` is the input variance in normalized units.
CSV reports hold only reproducible columns; wall-clock timings go to a
``*.timing.csv`` sidecar next to the report.
"""
from __future__ import annotations

import argparse
import csv
import io
import logging
import sys
import time
from importlib import resources
from pathlib import Path

import numpy as np

from . import layers as L
from .adversarial import AdversarialConfig, perturb_dataset, predictions
from .datatrain import (SyntheticDataset, TrainConfig, accuracy, dataset_preprocess, fixture_skeleton,
                        generate_dataset, load_dataset, save_dataset, train_fixture)
from .gaussmath import RegularizationConstants, censored_relu_arrays
from .network import MODES, load_model_files, preprocess, propagate_moments, save_model_files
from .tensorcore import lift_to_moments
from . import verify as V

log = logging.getLogger("stochff")

FIXTURE_SEED = 7
HELDOUT_SEED = FIXTURE_SEED + 1
KADV_UNIT_PX = 10.0
DEFAULT_SIGMA2_GRID = "log:1e-4:1:9"
DEFAULT_KADV_GRID = "0,0.25,0.5,1.0"
DEFAULT_ABLATION_GRID = "0,0.01,0.1,1,4"

SWEEP_COLUMNS = ["mode", "sigma2", "k_adv", "k_adv_px", "sorted_mode", "quantize_adv", "epsilon",
                 "accuracy", "n_images", "seed"]
ABLATION_COLUMNS = ["sigma2", "sorted_mode", "accuracy", "det_accuracy", "median_abs_gap", "mean_abs_gap",
                    "n_windows", "mc_samples", "n_images", "seed"]


def parse_grid(spec: str) -> list[float]:
    """``"a,b,c"`` or ``"log:lo:hi:n"`` (n log-spaced points, inclusive)."""
    try:
        if spec.startswith("log:"):
            _, lo, hi, n = spec.split(":")
            lo, hi, n = float(lo), float(hi), int(n)
            if lo <= 0 or hi <= 0 or n < 1:
                raise ValueError
            values = [float(v) for v in np.logspace(np.log10(lo), np.log10(hi), n)]
        else:
            values = [float(v) for v in spec.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad grid spec {spec!r}") from None
    if not values or any(not np.isfinite(v) or v < 0 for v in values):
        raise argparse.ArgumentTypeError(f"grid values must be finite and >= 0: {spec!r}")
    return values


def fixture_paths() -> Path:
    return Path(str(resources.files("stochff") / "fixtures" / "tiny-cnn.json"))


def _load_inputs(args):
    model = load_model_files(args.model or fixture_paths())
    if args.data:
        ds = load_dataset(args.data)
    else:
        ds = generate_dataset(args.n, args.seed)
    return model, ds


def _reg(args) -> RegularizationConstants:
    return RegularizationConstants(eps_denominator=args.epsilon) if args.epsilon else RegularizationConstants()


def _sorted_flag(args):
    return None if args.sorted_maxpool is None else args.sorted_maxpool == "on"


def _write_csv(rows: list[dict], columns: list[str], out: str | None):
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: _fmt(row[k]) for k in columns})
    if out:
        Path(out).write_text(buf.getvalue())
    else:
        sys.stdout.write(buf.getvalue())


def _fmt(v):
    if isinstance(v, bool):
        return "on" if v else "off"
    if isinstance(v, float):
        return repr(v)
    return v


def _write_timings(timings: list[dict], out: str | None):
    if not out:
        return
    path = Path(out).with_suffix(".timing.csv")
    cols = list(timings[0]) if timings else []
    _write_csv(timings, cols, str(path))


class _Evaluator:
    """Caches adversarial sets per k so sweeps attack each intensity once."""

    def __init__(self, model, ds: SyntheticDataset, args):
        self.model, self.ds, self.args = model, ds, args
        self.reg = _reg(args)
        self._adv = {}

    def images(self, k: float) -> np.ndarray:
        if k not in self._adv:
            cfg = AdversarialConfig.for_model(self.model, k * self.args.kadv_unit, self.args.quantize_adv)
            self._adv[k] = perturb_dataset(self.model, self.ds.images, self.ds.labels, cfg, self.args.workers)
        return self._adv[k]

    def accuracy(self, k: float, mode: str, sigma2: float, sorted_mode=None) -> float:
        pred = predictions(self.model, self.images(k), mode, sigma2, self.reg, sorted_mode, self.args.workers)
        return float(np.mean(pred == self.ds.labels))


def _sweep(args, grid_pairs) -> int:
    model, ds = _load_inputs(args)
    ev = _Evaluator(model, ds, args)
    sorted_mode = _sorted_flag(args)
    effective_sorted = sorted_mode if sorted_mode is not None else all(
        l.sorted_mode for l in model.layers if isinstance(l, L.MaxPool))
    rows, timings = [], []
    for k, sigma2 in grid_pairs:
        for mode in args.mode:
            t0 = time.perf_counter()
            acc = ev.accuracy(k, mode, sigma2, sorted_mode)
            wall = (time.perf_counter() - t0) * 1000
            rows.append({"mode": mode, "sigma2": sigma2, "k_adv": k, "k_adv_px": k * args.kadv_unit,
                         "sorted_mode": effective_sorted, "quantize_adv": args.quantize_adv,
                         "epsilon": ev.reg.eps_denominator, "accuracy": acc, "n_images": len(ds),
                         "seed": ds.seed})
            timings.append({"mode": mode, "sigma2": sigma2, "k_adv": k, "wall_time_ms": round(wall, 3)})
            log.info("mode=%s sigma2=%g k=%g accuracy=%.4f", mode, sigma2, k, acc)
    _write_csv(rows, SWEEP_COLUMNS, args.out)
    _write_timings(timings, args.out)
    return 0


def cmd_sweep_variance(args) -> int:
    if len(args.kadv) != 1:
        raise ValueError(f"--kadv takes a single value for sweep-variance, got {args.kadv}")
    return _sweep(args, [(args.kadv[0], s) for s in args.sigma2])


def cmd_sweep_adversarial(args) -> int:
    if len(args.sigma2) != 1:
        raise ValueError(f"--sigma2 takes a single value for sweep-adversarial, got {args.sigma2}")
    return _sweep(args, [(k, args.sigma2[0]) for k in args.kadv])


def _pool_windows(model, ds, sigma2, reg, n_windows, seed):
    """Input moments of the first max-pool layer's windows, sampled by seed."""
    idx = next((i for i, l in enumerate(model.layers) if isinstance(l, L.MaxPool)), None)
    if idx is None:
        return None
    x = preprocess(model, ds.images)
    trace = propagate_moments(model, lift_to_moments(x, sigma2), reg)
    pool = model.layers[idx]
    means = L.pool_windows(trace[idx].mean, pool)
    variances = L.pool_windows(trace[idx].variance, pool)
    means = means.reshape(-1, means.shape[-1])
    variances = variances.reshape(-1, variances.shape[-1])
    rng = np.random.default_rng(seed)
    pick = rng.choice(len(means), size=min(n_windows, len(means)), replace=False)
    return means[pick], variances[pick]


def cmd_ablate_maxpool(args) -> int:
    model, ds = _load_inputs(args)
    ev = _Evaluator(model, ds, args)
    det = ev.accuracy(0.0, "det", 0.0)
    rows, timings = [], []
    for sigma2 in args.sigma2:
        windows = _pool_windows(model, ds, sigma2, ev.reg, args.n_windows, args.seed)
        truth = None
        if windows is not None:
            truth, _ = V.sampled_max_means(windows[0], windows[1], args.mc_samples, args.seed)
        for sorted_mode in (True, False):
            t0 = time.perf_counter()
            acc = ev.accuracy(0.0, "stochastic", sigma2, sorted_mode)
            gap = np.abs(V.fold_means(*windows, sorted_mode, ev.reg) - truth) if truth is not None else np.zeros(1)
            rows.append({"sigma2": sigma2, "sorted_mode": sorted_mode, "accuracy": acc, "det_accuracy": det,
                         "median_abs_gap": float(np.median(gap)), "mean_abs_gap": float(np.mean(gap)),
                         "n_windows": 0 if truth is None else len(truth), "mc_samples": args.mc_samples,
                         "n_images": len(ds), "seed": ds.seed})
            timings.append({"sigma2": sigma2, "sorted_mode": sorted_mode,
                            "wall_time_ms": round((time.perf_counter() - t0) * 1000, 3)})
    _write_csv(rows, ABLATION_COLUMNS, args.out)
    _write_timings(timings, args.out)
    return 0


def cmd_train(args) -> int:
    if Path(args.out_model).with_suffix(".bin").resolve() == Path(args.out_data).resolve():
        raise ValueError(f"--out-data {args.out_data} would overwrite the model weight blob")
    train = generate_dataset(args.n, args.seed)
    heldout = generate_dataset(args.n_test, args.seed + 1)
    model = fixture_skeleton(dataset_preprocess(train), args.seed)
    history: list = []
    cfg = TrainConfig(epochs=args.epochs, batch_size=args.batch_size, learning_rate=args.lr, seed=args.seed)
    model = train_fixture(train, model, cfg, history)
    try:
        manifest, blob = save_model_files(model, args.out_model)
        save_dataset(heldout, args.out_data)
    except OSError as exc:
        print(f"error: cannot write outputs: {exc}", file=sys.stderr)
        return 1
    if history:
        print(f"final training loss {history[-1]:.6f}")
    print(f"held-out accuracy {accuracy(model, heldout):.4f} on {len(heldout)} images")
    print(f"wrote {manifest}, {blob}, {args.out_data}")
    return 0


def _broken_relu(mu, var, theta=0.0, reg=None):
    mean, v = censored_relu_arrays(mu, var, theta, reg)
    return mean, 1.1 * v


def cmd_verify(args) -> int:
    reg = _reg(args)
    if args.mc_samples < 1000:
        print(f"warning: --mc-samples {args.mc_samples} gives wide standard-error bands; "
              "the oracle checks lose most of their power", file=sys.stderr)
    model, ds = _load_inputs(args)
    relu = _broken_relu if args.break_relu else censored_relu_arrays
    checks = [
        V.relu_oracle_battery(args.cases, args.mc_samples, args.seed, reg, relu=relu),
        V.max_oracle_battery(args.cases, args.mc_samples, args.seed + 1, reg),
        V.gradient_checks(model, ds.images, ds.labels, seed=args.seed),
        V.degenerate_equivalence(model, ds.images, reg=reg),
    ]
    for c in checks:
        print(c.line())
    failed = [c.name for c in checks if not c.passed]
    if failed:
        print(f"FAILED: {', '.join(failed)}")
        return 1
    print("all checks passed")
    return 0


def _common(seed: int = HELDOUT_SEED, n: int = 400, mc_samples: int = 20000) -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--model", help="model manifest (.json, weights in matching .bin); default: bundled fixture")
    common.add_argument("--data", help="dataset file; default: generate --n images from --seed")
    common.add_argument("--n", type=int, default=n, help="images to generate when --data is absent")
    common.add_argument("--seed", type=int, default=seed)
    common.add_argument("--out", help="output CSV (default stdout)")
    common.add_argument("--mode", type=lambda s: s.split(","), default=list(MODES),
                        help="comma list of det,stochastic,ensemble")
    common.add_argument("--sorted-maxpool", choices=["on", "off"], default=None,
                        help="override the model's max-pool ordering flag")
    common.add_argument("--mc-samples", type=int, default=mc_samples)
    common.add_argument("--epsilon", type=float, default=None, help="override the Mills-ratio denominator floor")
    common.add_argument("--quantize-adv", action="store_true", help="round adversarial images to whole pixels")
    common.add_argument("--kadv-unit", type=float, default=KADV_UNIT_PX, help="raw pixels per k_adv unit")
    common.add_argument("--workers", type=int, default=1)
    common.add_argument("-v", "--verbose", action="store_true")
    return common


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stochff", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", parents=[_common(FIXTURE_SEED, 2000)], help="generate data and train the fixture model")
    p.set_defaults(func=cmd_train)
    p.add_argument("--n-test", type=int, default=400)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--lr", type=float, default=0.02)
    p.add_argument("--out-model", default="fixture.json")
    p.add_argument("--out-data", default="heldout.bin")

    p = sub.add_parser("sweep-variance", parents=[_common()], help="accuracy vs input variance at fixed k_adv")
    p.set_defaults(func=cmd_sweep_variance)
    p.add_argument("--kadv", type=parse_grid, default=[0.5])
    p.add_argument("--sigma2", type=parse_grid, default=parse_grid(DEFAULT_SIGMA2_GRID))

    p = sub.add_parser("sweep-adversarial", parents=[_common()], help="accuracy vs k_adv at fixed input variance")
    p.set_defaults(func=cmd_sweep_adversarial)
    p.add_argument("--kadv", type=parse_grid, default=parse_grid(DEFAULT_KADV_GRID))
    p.add_argument("--sigma2", type=parse_grid, default=[0.03])

    p = sub.add_parser("ablate-maxpool", parents=[_common()], help="sorted vs scan-order max-pool folding")
    p.set_defaults(func=cmd_ablate_maxpool)
    p.add_argument("--sigma2", type=parse_grid, default=parse_grid(DEFAULT_ABLATION_GRID))
    p.add_argument("--n-windows", type=int, default=200)

    p = sub.add_parser("verify", parents=[_common(mc_samples=200000)], help="run oracle and invariant checks")
    p.set_defaults(func=cmd_verify)
    p.add_argument("--cases", type=int, default=50)
    p.add_argument("--break-relu", action="store_true", help=argparse.SUPPRESS)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    bad = [m for m in getattr(args, "mode", []) if m not in MODES]
    if bad:
        parser.error(f"unknown mode(s) {bad}; choose from {MODES}")
    try:
        return args.func(args)
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
