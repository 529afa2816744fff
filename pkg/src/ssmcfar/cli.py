"""Command-line entry point.

Every subcommand that writes files treats ``--out`` as its run directory
and leaves a ``config.ini`` (the fully resolved settings) and a ``run.log``
next to its outputs.  Settings resolve as flags over ``--config`` file over
built-in defaults.  Exit codes: 0 success, 1 invalid input, 2 runtime or
numeric failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .cfar import CfarConfig, CfarVariant, CfarWindow, cfar_detect_2d, threshold_factor
from .config import build, read_config_file, write_config
from .datagen import SceneConfig, gen_dataset, load_dataset, MANIFEST_NAME
from .errors import InvalidInputError
from . import evaluation as ev

log = logging.getLogger("ssmcfar")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class UsageError(InvalidInputError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


@dataclass
class CfarSettings:
    """CFAR detector used by ``eval``, ``detect`` and ``roc``."""

    variant: str = "ca"
    pfa: float = 1e-3
    train: int = 4
    guard: int = 2
    dims: int = 2
    calibration_seed: int = 0

    def __post_init__(self):
        CfarVariant.parse(self.variant)
        if not 0 < self.pfa <= 1:
            raise InvalidInputError(f"pfa must lie in (0, 1], got {self.pfa}")

    def window(self) -> CfarWindow:
        return CfarWindow(self.train, self.guard, dims=self.dims)

    def threshold(self) -> float:
        return threshold_factor(self.variant, self.window().n_train, self.pfa, seed=self.calibration_seed)


# ---------------------------------------------------------------- helpers

def _file_sections(args) -> dict:
    if getattr(args, "config", None) is None:
        return {}
    path = Path(args.config)
    if not path.is_file():
        raise InvalidInputError(f"config file {path} not found")
    return read_config_file(path)


def _parse_kv(text: str) -> dict:
    """``"variant=os,pfa=1e-3"`` -> ``{"variant": "os", "pfa": "1e-3"}``; a bare word is the variant."""
    out = {}
    for part in filter(None, (p.strip() for p in text.split(","))):
        key, sep, value = part.partition("=")
        if not sep:
            key, value = "variant", key
        out[key.strip()] = value.strip()
    return out


def _start_run(out: Path, sections: dict):
    out.mkdir(parents=True, exist_ok=True)
    write_config(out / "config.ini", sections)
    handler = logging.FileHandler(out / "run.log", mode="w")
    handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    logging.getLogger().addHandler(handler)
    return handler


def _require_dataset(path) -> Path:
    path = Path(path)
    if not (path / MANIFEST_NAME).is_file():
        raise InvalidInputError(f"{path} is not a dataset directory")
    return path


def _require_file(path, what: str) -> Path:
    path = Path(path)
    if not path.is_file():
        raise InvalidInputError(f"{what} {path} not found")
    return path


def _cfar_settings(args, file_sections) -> CfarSettings:
    flag = _parse_kv(args.cfar) if getattr(args, "cfar", None) else {}
    return build(CfarSettings, file_sections.get("cfar"), flag)


# ---------------------------------------------------------------- subcommands

def cmd_datagen(args) -> int:
    sections = _file_sections(args)
    data = sections.get("datagen", {})
    count = int(args.count if args.count is not None else data.get("count", 100))
    split = build(_Split, data, {"train": args.train, "val": args.val, "test": args.test})
    scene = build(SceneConfig, sections.get("scene"), {"seed": args.seed})
    counts = split.counts(count)
    handler = _start_run(Path(args.out), {"datagen": {"count": count, **split.__dict__}, "scene": scene})
    try:
        gen_dataset(scene, count, args.out, counts=counts)
        log.info("wrote %d samples, train/val/test %s", count, counts)
    finally:
        logging.getLogger().removeHandler(handler)
    return EXIT_OK


@dataclass
class _Split:
    train: float = 0.7
    val: float = 0.15
    test: float = 0.15

    def counts(self, count: int):
        from .datagen import split_counts

        values = (self.train, self.val, self.test)
        if all(float(v).is_integer() and v >= 1 for v in values) or sum(values) == count:
            if sum(values) != count:
                raise InvalidInputError(f"split sizes {values} do not add up to {count}")
            return tuple(int(v) for v in values)
        return split_counts(count, values)


def cmd_train(args) -> int:
    from .model import DetectorConfig, init_model
    from .train import TrainConfig, train

    sections = _file_sections(args)
    data_path = _require_dataset(args.data)
    dataset = load_dataset(data_path)
    r, a = dataset.config.grid
    model_cfg = build(DetectorConfig, sections.get("model"), {"L": r * a, "seed": args.seed})
    train_cfg = build(TrainConfig, sections.get("train"), {"seed": args.seed, "epochs": args.epochs})
    if not dataset.split("train"):
        raise InvalidInputError("dataset has an empty training split")
    out = Path(args.out)
    resume = _require_file(args.resume, "checkpoint") if args.resume else None
    handler = _start_run(out, {"data": {"path": str(data_path)}, "model": model_cfg, "train": train_cfg})
    try:
        model = init_model(model_cfg)
        _, report = train(model, dataset, train_cfg, checkpoint_dir=out, resume_from=resume)
        report.write_csv(out / "report.csv")
        log.info("best epoch %s", report.best_epoch)
    finally:
        logging.getLogger().removeHandler(handler)
    return EXIT_OK


def _load_model(path):
    from .model import load_checkpoint

    model, _, _ = load_checkpoint(_require_file(path, "checkpoint"))
    return model


def cmd_eval(args) -> int:
    sections = _file_sections(args)
    if (args.checkpoint is None) == (args.cfar is None):
        raise InvalidInputError("give exactly one of --checkpoint or --cfar")
    dataset = load_dataset(_require_dataset(args.data))
    samples = dataset.split(args.split)
    if not samples:
        raise InvalidInputError(f"split {args.split!r} is empty")
    cfar = _cfar_settings(args, sections)
    window = cfar.window()
    valid = ev.cfar_valid_mask(dataset.config.grid, window)
    tau = args.tau if args.tau is not None else float(sections.get("eval", {}).get("tau", 0.5))
    if not 0 < tau < 1:
        raise InvalidInputError(f"tau must lie in (0, 1), got {tau}")
    model = _load_model(args.checkpoint) if args.checkpoint else None
    resolved = {"eval": {"data": args.data, "split": args.split, "tau": tau,
                         "method": "model" if model else "cfar"}, "cfar": cfar}
    handler = _start_run(Path(args.out), resolved)
    try:
        if model is not None:
            entry = ev.ReportEntry("model", ev.model_metrics(model, samples, tau, valid))
        else:
            T = cfar.threshold()
            log.info("%s threshold factor %r for pfa %r", cfar.variant, T, cfar.pfa)
            entry = ev.ReportEntry(str(CfarVariant.parse(cfar.variant)),
                                   ev.cfar_metrics(cfar.variant, window, samples, T, valid))
        (Path(args.out) / "metrics.csv").write_text(ev.metrics_csv([entry]))
        log.info("pd %r pf %r", entry.metrics.pd, entry.metrics.pf)
    finally:
        logging.getLogger().removeHandler(handler)
    return EXIT_OK


def _read_frame(path: Path, grid):
    if path.suffix == ".npy":
        return np.load(path)
    if grid is None:
        manifest = path.parent / MANIFEST_NAME
        if not manifest.is_file():
            raise InvalidInputError("raw frame files need --grid or a dataset manifest beside them")
        import json

        grid = json.loads(manifest.read_text())["grid"]
    values = np.fromfile(path, dtype="<f4")
    r, a = grid
    if values.size != r * a:
        raise InvalidInputError(f"{path} holds {values.size} cells, grid {r}x{a} needs {r * a}")
    return values.reshape(r, a)


def cmd_detect(args) -> int:
    sections = _file_sections(args)
    if (args.checkpoint is None) == (args.cfar is None):
        raise InvalidInputError("give exactly one of --checkpoint or --cfar")
    grid = tuple(int(g) for g in args.grid.split(",")) if args.grid else None
    frame = np.asarray(_read_frame(_require_file(args.frame, "frame"), grid), dtype=np.float64)
    if frame.ndim != 2 or not np.all(np.isfinite(frame)) or np.any(frame < 0):
        raise InvalidInputError("frame must be a finite, non-negative 2D array")
    if not 0 < args.tau < 1:
        raise InvalidInputError(f"tau must lie in (0, 1), got {args.tau}")
    cfar = _cfar_settings(args, sections)
    model = _load_model(args.checkpoint) if args.checkpoint else None
    out = Path(args.out)
    handler = _start_run(out, {"detect": {"frame": args.frame, "tau": args.tau,
                                          "method": "model" if model else "cfar"}, "cfar": cfar})
    try:
        if model is not None:
            from .model import predict_proba

            score = predict_proba(model, frame)[0]
            mask = score >= args.tau
        else:
            result = cfar_detect_2d(frame, CfarConfig(CfarVariant.parse(cfar.variant), cfar.window(),
                                                     cfar.threshold()))
            # border scores are infinite, so the panel shows the decisions instead
            mask = score = result.mask
        mask.astype(np.uint8).tofile(out / "mask.u8")
        ev.write_pgm(out / "panel.pgm", ev.panel_grid(frame, score, mask))
        log.info("%d of %d cells detected; mask shape %s", int(mask.sum()), mask.size, mask.shape)
    finally:
        logging.getLogger().removeHandler(handler)
    return EXIT_OK


def cmd_roc(args) -> int:
    sections = _file_sections(args)
    methods = [m.strip().lower() for m in args.methods.split(",") if m.strip()]
    if not methods:
        raise InvalidInputError("--methods is empty")
    for m in methods:
        if m != "model":
            CfarVariant.parse(m)
    if "model" in methods and args.checkpoint is None:
        raise InvalidInputError("method 'model' needs --checkpoint")
    dataset = load_dataset(_require_dataset(args.data))
    samples = dataset.split(args.split)
    if not samples:
        raise InvalidInputError(f"split {args.split!r} is empty")
    cfar = _cfar_settings(args, sections)
    window = cfar.window()
    valid = ev.cfar_valid_mask(dataset.config.grid, window)
    model = _load_model(args.checkpoint) if "model" in methods else None
    out = Path(args.out)
    handler = _start_run(out, {"roc": {"data": args.data, "split": args.split, "methods": methods,
                                       "tau": args.tau, "panels": args.panels}, "cfar": cfar})
    try:
        shown = samples[:args.panels]
        entries = []
        for m in methods:
            if m == "model":
                from .model import predict_proba

                probs = predict_proba(model, [s.frame for s in samples])
                roc = ev.roc_probabilities(probs, [s.mask for s in samples], valid)
                metrics = ev.pool(ev.pd_pf(p >= args.tau, s.mask, valid) for p, s in zip(probs, samples))
                panels = [(s.frame.values, p, s.mask) for s, p in zip(shown, probs)]
                entries.append(ev.ReportEntry("model", metrics, roc, panels))
            else:
                variant = CfarVariant.parse(m)
                T = threshold_factor(variant, window.n_train, cfar.pfa, seed=cfar.calibration_seed)
                roc = ev.roc_cfar(variant, window, samples, valid=valid)
                metrics = ev.cfar_metrics(variant, window, samples, T, valid)
                panels = [(s.frame.values, ev.cfar_ratios(s.frame.values, variant, window) > T, s.mask)
                          for s in shown]
                entries.append(ev.ReportEntry(str(variant), metrics, roc, panels))
            log.info("%s auc %r pd %r pf %r", entries[-1].method, entries[-1].roc.auc,
                     entries[-1].metrics.pd, entries[-1].metrics.pf)
        ev.compare_report(entries, out)
    finally:
        logging.getLogger().removeHandler(handler)
    return EXIT_OK


def cmd_cfar_calibrate(args) -> int:
    variant = CfarVariant.parse(args.variant)
    if args.ntrain < 1:
        raise InvalidInputError("--ntrain must be >= 1")
    T = threshold_factor(variant, args.ntrain, args.pfa, seed=args.seed)
    print(f"{T:.6f}")
    return EXIT_OK


def cmd_selftest(args) -> int:
    from .selftest import run_all

    return EXIT_OK if run_all(verbose=not args.quiet) else EXIT_RUNTIME


# ---------------------------------------------------------------- wiring

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ssmcfar", description="SSM and CFAR radar detectors.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("datagen", help="generate a synthetic labelled dataset")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--train", type=float, help="train fraction or count")
    p.add_argument("--val", type=float)
    p.add_argument("--test", type=float)
    p.set_defaults(func=cmd_datagen)

    p = sub.add_parser("train", help="train the SSM detector")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--resume", help="continue from a last.ckpt")
    p.set_defaults(func=cmd_train)

    for name, func, help_text in (("eval", cmd_eval, "Pd/Pf of one detector on a split"),
                                  ("detect", cmd_detect, "run a detector on one frame")):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--checkpoint")
        p.add_argument("--cfar", help="e.g. variant=os,pfa=1e-3,train=4,guard=2")
        p.add_argument("--config")
        p.add_argument("--out", required=True)
        p.set_defaults(func=func)
        if name == "eval":
            p.add_argument("--data", required=True)
            p.add_argument("--split", default="test")
            p.add_argument("--tau", type=float)
        else:
            p.add_argument("--frame", required=True, help=".npy or raw little-endian float32")
            p.add_argument("--grid", help="R,A for raw frame files")
            p.add_argument("--tau", type=float, default=0.5)

    p = sub.add_parser("roc", help="ROC curves and comparison table")
    p.add_argument("--data", required=True)
    p.add_argument("--methods", default="model,ca,os,go,so")
    p.add_argument("--checkpoint")
    p.add_argument("--cfar", help="window and operating pfa shared by the CFAR methods")
    p.add_argument("--config")
    p.add_argument("--split", default="test")
    p.add_argument("--tau", type=float, default=0.5)
    p.add_argument("--panels", type=int, default=3)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_roc)

    p = sub.add_parser("cfar-calibrate", help="threshold factor for a target Pfa")
    p.add_argument("--variant", required=True)
    p.add_argument("--ntrain", type=int, required=True)
    p.add_argument("--pfa", type=float, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_cfar_calibrate)

    p = sub.add_parser("selftest", help="run the built-in invariant checks")
    p.add_argument("-q", "--quiet", action="store_true")
    p.set_defaults(func=cmd_selftest)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_INVALID
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    root = logging.getLogger()
    root.setLevel(logging.INFO)
    if args.verbose:
        root.addHandler(logging.StreamHandler(sys.stderr))
    try:
        return args.func(args)
    except (InvalidInputError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (ArithmeticError, RuntimeError, OSError, np.linalg.LinAlgError) as exc:
        print(f"failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
