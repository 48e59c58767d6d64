"""Command-line entry point: ``segcode <subcommand> ...``.

Exit codes: 0 success, 1 usage or configuration error, 2 numeric failure.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

from . import ingest, maskcode, metrics, model, synth, training
from .optim import NonFiniteError

log = logging.getLogger("segcode")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2


class ConfigError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------
# experiment configuration
# ---------------------------------------------------------------------

@dataclass
class ExperimentConfig:
    """Paths plus model settings.

    JSON layout::

        {"manifest": "...", "output_dir": "...", "seed": 0,
         "model": {"resolution": 64, "k": 40, "hidden": 32, "d": 32,
                   "stages": [[8,3,1],[16,3,1],[32,3,1]], "single_stream": false}}

    Relative paths are resolved against the config file's directory. ``d`` is
    the per-frame feature size, i.e. the filter count of the last stage.
    """

    manifest: Path
    output_dir: Path
    seed: int = 0
    model: dict = field(default_factory=dict)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            raw = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
        unknown = set(raw) - {"manifest", "output_dir", "seed", "model"}
        if unknown:
            raise ConfigError(f"{path}: unknown config keys {sorted(unknown)}")
        if "manifest" not in raw:
            raise ConfigError(f"{path}: 'manifest' is required")
        base = path.parent
        man = Path(raw["manifest"])
        out = Path(raw.get("output_dir", "run"))
        cfg = cls(manifest=man if man.is_absolute() else base / man,
                  output_dir=out if out.is_absolute() else base / out,
                  seed=int(raw.get("seed", 0)), model=dict(raw.get("model", {})))
        if not cfg.manifest.is_file():
            raise ConfigError(f"manifest not found: {cfg.manifest}")
        return cfg

    def model_config(self, num_classes: int, single_stream: bool | None = None) -> model.ModelConfig:
        m = dict(self.model)
        unknown = set(m) - {"resolution", "k", "hidden", "d", "stages", "single_stream", "num_classes"}
        if unknown:
            raise ConfigError(f"unknown model keys {sorted(unknown)}")
        c = m.pop("num_classes", num_classes)
        if c != num_classes:
            raise ConfigError(f"model num_classes {c} != manifest class count {num_classes}")
        d = m.pop("d", None)
        stages = m.pop("stages", None)
        if stages is None:
            stages = [list(s) for s in model.DEFAULT_STAGES]
            if d is not None:
                stages[-1][0] = int(d)
        elif d is not None and stages[-1][0] != d:
            raise ConfigError(f"d={d} disagrees with last encoder stage {stages[-1]}")
        if single_stream:
            m["single_stream"] = True
        res = int(m.get("resolution", 64))
        if res not in model.SUPPORTED_RESOLUTIONS:
            raise ConfigError(f"resolution {res} not in supported set {model.SUPPORTED_RESOLUTIONS}")
        try:
            return model.ModelConfig(num_classes=num_classes, stages=stages, **m)
        except (TypeError, model.ModelError) as exc:
            raise ConfigError(str(exc)) from exc


@contextlib.contextmanager
def _thread_cap():
    """Honor SEGCODE_THREADS by limiting BLAS worker threads."""
    cap = os.environ.get("SEGCODE_THREADS")
    if not cap:
        yield
        return
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:
        log.warning("SEGCODE_THREADS set but threadpoolctl is not installed; ignoring")
        yield
        return
    with threadpool_limits(limits=int(cap)):
        yield


# ---------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------

def cmd_synth(args) -> int:
    spec = synth.SynthSpec.load(args.spec_file)
    if args.seed is not None:
        spec.seed = args.seed
    path = synth.generate(spec, args.out_dir)
    print(path)
    return EXIT_OK


def cmd_encode_masks(args) -> int:
    manifest = ingest.load_manifest(args.manifest)
    palette = maskcode.load_palette(args.palette) if args.palette else maskcode.default_palette()

    def skipped(clip):
        print(f"warning: clip {clip.clip_id} has no annotations, skipped", file=sys.stderr)

    maskcode.encode_manifest_masks(manifest, palette, args.threshold, on_skip=skipped)
    n = sum(c.mask_paths is not None for c in manifest.clips)
    print(f"rendered mask streams for {n} clips -> {manifest.path}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = ExperimentConfig.load(args.config)
    plan = training.TrainPlan.load(args.plan) if args.plan else training.TrainPlan()
    if args.seed is not None:
        cfg.seed = args.seed
        plan.seed = args.seed
    manifest = ingest.load_manifest(cfg.manifest)
    mcfg = cfg.model_config(manifest.num_classes, args.single_stream)
    with_masks = not mcfg.single_stream
    train_data = training.load_clips(manifest, "train", mcfg.resolution, with_masks)
    val_data = training.load_clips(manifest, "val", mcfg.resolution, with_masks)
    net = model.TwoStreamNet(mcfg, seed=cfg.seed)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    log_path = out / "epochs.jsonl"
    with open(log_path, "w") as fh:
        def on_epoch(rec):
            fh.write(json.dumps(rec) + "\n")
            fh.flush()
            log.info("epoch %(epoch)d phase %(phase)d loss %(train_loss).4f val_f1 %(val_macro_f1).3f", rec)

        result = training.train(plan, net, train_data, val_data, on_epoch)
    ckpt = out / "checkpoint.json"
    model.save_checkpoint(ckpt, result.net, {"classes": manifest.classes, "seed": cfg.seed,
                                             "plan": plan.to_json(), "best_epoch": result.best_epoch})
    print(f"checkpoint {ckpt} (best epoch {result.best_epoch}); log {log_path}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = ExperimentConfig.load(args.config)
    ckpt = args.checkpoint or cfg.output_dir / "checkpoint.json"
    if not Path(ckpt).is_file():
        raise ConfigError(f"checkpoint not found: {ckpt}")
    net, ck_cfg = model.load_checkpoint(ckpt)
    manifest = ingest.load_manifest(cfg.manifest)
    if net.config.num_classes != manifest.num_classes:
        raise ConfigError("checkpoint class count differs from manifest")
    data = training.load_clips(manifest, args.split, net.config.resolution, not net.config.single_stream)
    if len(data) == 0:
        raise ConfigError(f"split {args.split!r} has no clips")
    seed = cfg.seed if args.seed is None else args.seed
    probs = training.predict(net, data, seed)
    records = training.results_records(data, probs)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    res_path = out / f"results_{args.split}.json"
    metrics.save_results(res_path, records, manifest.classes)
    m = metrics.metrics([r["pred"] for r in records], data.labels, manifest.num_classes)
    (out / f"report_{args.split}.json").write_text(json.dumps(m.to_json(), indent=1) + "\n")
    text = metrics.format_metrics(m, manifest.classes)
    (out / f"report_{args.split}.txt").write_text(text + "\n")
    print(text)
    print(f"results {res_path}")
    return EXIT_OK


def cmd_compare(args) -> int:
    a = metrics.load_results(args.results_a)
    b = metrics.load_results(args.results_b)
    report = metrics.compare_report(a, b, (Path(args.results_a).stem, Path(args.results_b).stem)
                                    if Path(args.results_a).stem != Path(args.results_b).stem else ("A", "B"))
    print(metrics.format_report(report))
    if args.out:
        Path(args.out).write_text(json.dumps(report, indent=1) + "\n")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .oracle import run_oracle_suite

    ok = True
    for name, err, tol in run_oracle_suite(trials=args.trials, seed=args.seed or 0):
        status = "PASS" if err < tol else "FAIL"
        ok &= err < tol
        print(f"{status}  {name:<28} max rel err {err:.3e} (tol {tol:.0e})")
    return EXIT_OK if ok else EXIT_NUMERIC


# ---------------------------------------------------------------------
# wiring
# ---------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="segcode", description="Two-stream RGB + color-coded mask activity classifier")
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate a synthetic dataset")
    s.add_argument("spec_file", help="JSON synthetic dataset spec")
    s.add_argument("out_dir", help="output directory (manifest.json is written here)")
    s.add_argument("--seed", type=int, help="override the seed in the dataset spec file")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("encode-masks", help="render color-coded mask streams for a manifest")
    s.add_argument("manifest", help="manifest JSON; rewritten with mask_frames entries")
    s.add_argument("--palette", help="palette override JSON (default: built-in coloring table)")
    s.add_argument("--threshold", type=float, default=maskcode.DEFAULT_THRESHOLD,
                   help="minimum detection score to paint (default 0.5)")
    s.set_defaults(func=cmd_encode_masks)

    s = sub.add_parser("train", help="train a model; writes checkpoint.json and epochs.jsonl")
    s.add_argument("--config", required=True, help="experiment config JSON")
    s.add_argument("--plan", help="training plan JSON (default: 30+30 epochs, RAdam)")
    s.add_argument("--single-stream", action="store_true", help="RGB-only baseline topology")
    s.add_argument("--seed", type=int, help="override config and plan seed")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    s.add_argument("--config", required=True, help="experiment config JSON")
    s.add_argument("--checkpoint", help="checkpoint JSON (default: <output_dir>/checkpoint.json)")
    s.add_argument("--split", default="test", help="manifest split to evaluate (default test)")
    s.add_argument("--seed", type=int, help="frame-sampling seed (default: config seed)")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("compare", help="side-by-side metrics and McNemar test of two results files")
    s.add_argument("results_a", help="results JSON of system A")
    s.add_argument("results_b", help="results JSON of system B")
    s.add_argument("--out", help="also write the report as JSON")
    s.set_defaults(func=cmd_compare)

    s = sub.add_parser("gradcheck", help="run the finite-difference gradient oracle suite")
    s.add_argument("--trials", type=int, default=5, help="randomized trials per check (default 5)")
    s.add_argument("--seed", type=int, help="random seed (default 0)")
    s.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:  # --help, or a usage error already reported by the parser
        return exc.code if isinstance(exc.code, int) else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s")
    try:
        with _thread_cap():
            return args.func(args)
    except NonFiniteError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, ingest.ManifestError, ingest.FormatError, ingest.AnnotationError,
            maskcode.PaletteError, synth.SynthError, training.PlanError, model.ModelError,
            metrics.MetricsError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
