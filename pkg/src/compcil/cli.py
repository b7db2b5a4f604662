"""Command line entry point: ``compcil <subcommand> --config run.yaml [--set key=value ...]``.

Exit codes: 0 success, 2 configuration error, 3 stage failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import experiments as ex
from .codecs import DEFAULT_QUALITY_GRID, plot_rd_curve, rd_curve, write_rd_csv
from .selection import plot_forgetting, write_probe_csv
from .tasks import ConfigurationError, build_task_sequence, prepare_cached

EXIT_OK, EXIT_CONFIG, EXIT_STAGE = 0, 2, 3

logger = logging.getLogger("compcil")


def _cache_root(cfg):
    return None if "COMPCIL_CACHE" in os.environ else Path(cfg.output_dir) / "cache"


def cmd_prepare(cfg, args):
    raw = ex.load_dataset(cfg)
    codecs = [cfg.fixed_codec()] if cfg.codec else [c for cand in cfg.candidates() for c in cand.specs()]
    if not codecs:
        raise ConfigurationError("nothing to prepare: set codec or codecs")
    for codec in codecs:
        prepared = prepare_cached(raw, codec, _cache_root(cfg))
        print(f"{codec.key}: bpp={ex.dataset_rate(prepared):.4f}")


def cmd_rd_curve(cfg, args):
    raw = ex.load_dataset(cfg)
    images = raw.train.images[: args.limit] if args.limit else raw.train.images
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    points = []
    cands = cfg.candidates() or [ex.CodecCandidate(m, list(g)) for m, g in DEFAULT_QUALITY_GRID.items()
                                 if m != "raw"]
    for cand in cands:
        points += rd_curve(images, cand.method, cand.qualities, external_command=cand.external_command)
    write_rd_csv(points, out / "rd.csv")
    plot_rd_curve(points, out / "rd.png", raw.name)
    for p in points:
        print(f"{p.codec.method:5s} q={p.codec.quality:3d} bpp={p.mean_bpp:.4f} psnr={p.mean_psnr:.2f}")


def _setup(cfg):
    raw = ex.load_dataset(cfg)
    seq = build_task_sequence(raw, cfg.protocol_spec())
    return raw, seq, ex.remap_labels(raw, seq)


def cmd_probe_rate(cfg, args):
    if not cfg.codecs:
        raise ConfigurationError("probe-rate needs codec candidates (codecs: [...])")
    raw, seq, original = _setup(cfg)
    results = ex.probe_rates(cfg, original, seq, raw, _cache_root(cfg))
    choices = ex.rate_choices(results)
    out = Path(cfg.output_dir) / "selection"
    out.mkdir(parents=True, exist_ok=True)
    write_probe_csv(results, out / "probe.csv")
    plot_forgetting(results, out / "forgetting.png", [r.codec for r in choices.values()])
    for method, r in choices.items():
        print(f"{method}: quality {r.quality} (forgetting {r.forgetting:+.4f}, bpp {r.bpp:.4f})")


def cmd_select_codec(cfg, args):
    if not cfg.codecs:
        raise ConfigurationError("select-codec needs codec candidates (codecs: [...])")
    raw, seq, original = _setup(cfg)
    sel = ex.run_selection(cfg, original, seq, raw, Path(cfg.output_dir) / "selection", _cache_root(cfg))
    for s in sel.scores:
        print(f"{s.codec.key:16s} f_mse={s.f_mse:.6f} bpp={s.mean_bpp:.4f} psnr={s.mean_psnr:.2f}")
    print(f"selected: {sel.selected.key}")


def cmd_train(cfg, args):
    record = ex.run_pipeline(cfg, resume=not args.fresh)
    print(json.dumps({"average": record.average, "last": record.last, "accuracies": record.accuracies}))


def cmd_domain_shift(cfg, args):
    matched = ex.RunConfig.from_dict({**cfg.to_dict(), "preprocess": "matched"})
    mismatched = ex.RunConfig.from_dict({**cfg.to_dict(), "preprocess": "mismatched"})
    report = ex.domain_shift_report(matched, mismatched, Path(cfg.output_dir) / "domain_shift")
    print(json.dumps(ex._clean(report)))


def cmd_report(cfg, args):
    paths = ex.emit_report(cfg.output_dir)
    for name, path in paths.items():
        print(f"{name}: {path}")


COMMANDS = {
    "prepare": cmd_prepare,
    "rd-curve": cmd_rd_curve,
    "probe-rate": cmd_probe_rate,
    "select-codec": cmd_select_codec,
    "train": cmd_train,
    "domain-shift": cmd_domain_shift,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="compcil", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="YAML run configuration")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
        if name == "rd-curve":
            p.add_argument("--limit", type=int, default=0, help="measure only the first N training images")
        if name == "train":
            p.add_argument("--fresh", action="store_true", help="ignore saved state and start over")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        cfg = ex.RunConfig.load(args.config, args.overrides)
        COMMANDS[args.command](cfg, args)
    except (ConfigurationError, FileNotFoundError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # any stage failure maps to one exit code
        print(f"stage failure: {exc}", file=sys.stderr)
        return EXIT_STAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
