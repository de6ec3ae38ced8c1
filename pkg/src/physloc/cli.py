"""Command-line pipeline: synth, extract, train, eval, report.

Configuration is a flat key/value JSON document; command-line flags
override file values, which override built-in defaults. Every stage
writes its resolved configuration next to its artifacts so a run can be
reproduced from the output directory alone.

Exit codes: 0 success, 1 usage, 2 data or validation failure, 3 numeric
failure.
"""

import argparse
import json
import sys
from dataclasses import fields
from pathlib import Path

from . import dataio as dio
from . import objectives as obj
from . import report as rp
from . import retrieval as rt
from . import signatures as sg
from . import training as tr
from .errors import ConfigError, DataError, NumericError, PhyslocError

_SIG_KEYS = ("color_bins", "orient_bins", "texture_bins", "tau_rel")
_LOSS_KEYS = ("lambda", "w_color", "w_struc", "w_tex",
              "symmetric_itc", "freeze_phy_temp")
_TRAIN_KEYS = tuple(
    f.name for f in fields(tr.TrainConfig) if f.name != "loss"
)


def _default_flat() -> dict:
    flat = dict(zip(_SIG_KEYS, (16, 18, 16, 0.15)))
    loss = obj.LossConfig().to_dict()
    flat.update({k: loss[k] for k in _LOSS_KEYS})
    train = tr.TrainConfig().to_dict()
    flat.update({k: train[k] for k in _TRAIN_KEYS})
    return flat


def resolve_config(config_path, overrides: dict) -> dict:
    """defaults < config file < command-line flags, all flat keys."""
    flat = _default_flat()
    known = set(flat)
    if config_path is not None:
        path = Path(config_path)
        try:
            loaded = json.loads(path.read_text(encoding="utf-8"))
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid config document: {e}") from e
        if not isinstance(loaded, dict):
            raise ConfigError(f"{path}: config must be a flat object")
        for key in loaded:
            if key not in known:
                raise ConfigError(f"{path}: unknown config key {key!r}")
        flat.update(loaded)
    for key, value in overrides.items():
        if value is not None:
            if key not in known:
                raise ConfigError(f"unknown override {key!r}")
            flat[key] = value
    return flat


def _signature_config(flat: dict) -> sg.SignatureConfig:
    return sg.SignatureConfig(
        color_bins=flat["color_bins"],
        orient_bins=flat["orient_bins"],
        texture_bins=flat["texture_bins"],
        tau_rel=flat["tau_rel"],
    )


def _train_config(flat: dict) -> tr.TrainConfig:
    loss = obj.LossConfig.from_dict({k: flat[k] for k in _LOSS_KEYS})
    kw = {k: flat[k] for k in _TRAIN_KEYS}
    return tr.TrainConfig(loss=loss, **kw)


def _write_config(out_dir: Path, payload: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.json").write_text(
        json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )


class _Parser(argparse.ArgumentParser):
    """argparse with usage failures mapped to exit code 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> _Parser:
    parser = _Parser(prog="physloc",
                     description="physical-signature cross-modal localization")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[], help="generate a synthetic corpus")
    p.add_argument("--n", type=int, required=True, help="number of samples")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="corpus directory")
    p.add_argument("--image-size", type=int, default=64)

    p = sub.add_parser("extract", help="mine signatures into a cache")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="cache file path")
    p.add_argument("--config", default=None)
    p.add_argument("--color-bins", type=int, default=None)
    p.add_argument("--orient-bins", type=int, default=None)
    p.add_argument("--texture-bins", type=int, default=None)
    p.add_argument("--tau-rel", type=float, default=None)

    p = sub.add_parser("train", help="optimize a model on a corpus")
    p.add_argument("--manifest", required=True)
    p.add_argument("--cache", required=True)
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--config", default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--lr-min", type=float, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--lambda", dest="lam", type=float, default=None)
    p.add_argument("--w-color", type=float, default=None)
    p.add_argument("--w-struc", type=float, default=None)
    p.add_argument("--w-tex", type=float, default=None)
    p.add_argument("--symmetric-itc", action=argparse.BooleanOptionalAction,
                   default=None)
    p.add_argument("--freeze-phy-temp", action=argparse.BooleanOptionalAction,
                   default=None)
    p.add_argument("--embed-dim", type=int, default=None)
    p.add_argument("--hidden-dim", type=int, default=None)
    p.add_argument("--patch-grid", type=int, default=None)
    p.add_argument("--max-len", type=int, default=None)
    p.add_argument("--min-count", type=int, default=None)
    p.add_argument("--split-ratio", type=float, default=None)
    p.add_argument("--split-seed", type=int, default=None)
    p.add_argument("--checkpoint-every", type=int, default=None)
    p.add_argument("--warmup-steps", type=int, default=None)
    p.add_argument("--weight-decay", type=float, default=None)
    p.add_argument("--grad-clip", type=float, default=None)

    p = sub.add_parser("eval", help="score a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--holdout", default=None,
                   help="evaluate only this region (cross-domain protocol)")
    p.add_argument("--exclude-region", default=None)
    p.add_argument("--d-meters", type=float, default=150.0)
    p.add_argument("--format", choices=("table", "json"), default="table")
    p.add_argument("--out", default=None, help="write instead of stdout")

    p = sub.add_parser("report", help="compare training runs")
    p.add_argument("logs", nargs="+", help="metrics log paths")
    p.add_argument("--out", required=True, help="report directory")

    return parser


def _train_overrides(args) -> dict:
    pairs = {
        "epochs": args.epochs, "batch_size": args.batch_size,
        "lr": args.lr, "lr_min": args.lr_min, "seed": args.seed,
        "lambda": args.lam, "w_color": args.w_color,
        "w_struc": args.w_struc, "w_tex": args.w_tex,
        "symmetric_itc": args.symmetric_itc,
        "freeze_phy_temp": args.freeze_phy_temp,
        "embed_dim": args.embed_dim, "hidden_dim": args.hidden_dim,
        "patch_grid": args.patch_grid, "max_len": args.max_len,
        "min_count": args.min_count, "split_ratio": args.split_ratio,
        "split_seed": args.split_seed,
        "checkpoint_every": args.checkpoint_every,
        "warmup_steps": args.warmup_steps,
        "weight_decay": args.weight_decay, "grad_clip": args.grad_clip,
    }
    return pairs


def cmd_synth(args) -> int:
    out = Path(args.out)
    dio.generate_synthetic(args.n, args.seed, out, image_size=args.image_size)
    _write_config(out, {
        "command": "synth", "n": args.n, "seed": args.seed,
        "image_size": args.image_size,
    })
    print(f"wrote {args.n} samples under {out}")
    return 0


def cmd_extract(args) -> int:
    overrides = {
        "color_bins": args.color_bins, "orient_bins": args.orient_bins,
        "texture_bins": args.texture_bins, "tau_rel": args.tau_rel,
    }
    flat = resolve_config(args.config, overrides)
    cfg = _signature_config(flat)
    manifest_path = Path(args.manifest)
    samples = dio.load_manifest(manifest_path)
    entries = []
    for s in samples:
        try:
            img = dio.load_image(dio.resolve_image_path(manifest_path, s))
        except PhyslocError as e:
            raise DataError(f"cannot read image for id {s.id!r}: {e}") from e
        entries.append((s.id, sg.mine_signature(img, cfg).p_sig))
    dio.write_signature_cache(args.out, entries, cfg)
    print(f"wrote {len(entries)} signatures to {args.out}")
    return 0


def cmd_train(args) -> int:
    flat = resolve_config(args.config, _train_overrides(args))
    cfg = _train_config(flat)
    out = Path(args.out)
    result = tr.train(args.manifest, args.cache, cfg, out)
    # echo the signature config actually baked into the cache, not the
    # unused defaults, so the echoed file is honest and re-feedable
    _, sig_cfg = dio.read_signature_cache(args.cache)
    flat.update(sig_cfg.to_dict())
    _write_config(out, flat)
    print(f"checkpoint {result.checkpoint_path} hash {result.checkpoint_hash:016x}")
    return 0


def cmd_eval(args) -> int:
    rep = rt.evaluate(
        args.checkpoint, args.manifest,
        region=args.holdout, exclude_region=args.exclude_region,
        d_meters=args.d_meters,
    )
    if args.format == "json":
        payload = rep.to_dict()
        payload["checkpoint"] = str(args.checkpoint)
        payload["manifest"] = str(args.manifest)
        text = json.dumps(payload, indent=2, sort_keys=True) + "\n"
    else:
        text = rt.format_report(rep) + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return 0


def cmd_report(args) -> int:
    runs = [rp.load_run(p) for p in args.logs]
    rows = rp.compare_runs(runs)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / "comparison.csv"
    rp.write_comparison_csv(rows, csv_path)
    figures = rp.render_figures(runs, out)
    for path in [csv_path, *figures]:
        print(f"wrote {path}")
    return 0


_DISPATCH = {
    "synth": cmd_synth,
    "extract": cmd_extract,
    "train": cmd_train,
    "eval": cmd_eval,
    "report": cmd_report,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _DISPATCH[args.command](args)
    except NumericError as e:
        print(f"physloc: numeric failure: {e}", file=sys.stderr)
        return 3
    except PhyslocError as e:
        print(f"physloc: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
