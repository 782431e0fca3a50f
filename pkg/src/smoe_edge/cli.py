"""Command-line entry point.

Subcommands: train, infer, eval, explain, export-rules, gradcheck.
Exit codes: 0 ok, 1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .errors import DataError, NumericError, SmoeEdgeError
from .evaluation import (EvalReport, canny_sweep, default_thresholds, default_tolerance,
                         pr_sweep, summarize)
from .explain import export_rulebase, write_explain_artifacts
from .guidance import sobel_magnitude, to_luma
from .losses import LossConfig
from .model import Model, ModelConfig, build_model, forward, predict_probability
from .training import (TrainConfig, load_checkpoint, load_dataset, read_image,
                       train, write_gray_png)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on usage problems; the contract here is 1
    def error(self, message):
        self.print_usage(sys.stderr)
        raise SystemExit(self.exit_with(message))

    def exit_with(self, message):
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        return EXIT_USAGE


def read_config_file(path: Path) -> dict[str, str]:
    """Flat `key = value` config lines; '#' starts a comment."""
    values: dict[str, str] = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise DataError(f"cannot read config file {path}: {exc}") from exc
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise DataError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        values[key.strip()] = value.strip()
    return values


_BOOL_TRUE = {"1", "true", "yes", "on"}
_BOOL_FALSE = {"0", "false", "no", "off"}


def _as_bool(raw: str, key: str) -> bool:
    low = raw.lower()
    if low in _BOOL_TRUE:
        return True
    if low in _BOOL_FALSE:
        return False
    raise DataError(f"config key {key}: expected a boolean, got {raw!r}")


def _build_parser() -> _Parser:
    parser = _Parser(prog="smoe-edge", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model on a dataset directory")
    p.add_argument("--data", required=True, type=Path, help="dataset root with <split>/images + <split>/gt")
    p.add_argument("--out", required=True, type=Path, help="output directory for checkpoints and the log")
    p.add_argument("--config", type=Path, help="flat key=value config file (flags win)")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--no-smoe", action="store_true", help="plain skip connections (ablation baseline)")
    p.add_argument("--depth", type=int, default=None)
    p.add_argument("--base-channels", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)

    p = sub.add_parser("infer", help="write an edge-probability map for one image")
    p.add_argument("--ckpt", required=True, type=Path)
    p.add_argument("--image", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path, help="output directory")
    head = p.add_mutually_exclusive_group()
    head.add_argument("--fuzzy", action="store_true", help="fuzzy-head output (default)")
    head.add_argument("--unet-head", action="store_true", help="main-head sigmoid output")

    p = sub.add_parser("eval", help="boundary benchmark (ODS/OIS/AP) over a directory")
    p.add_argument("--pred-dir", required=True, type=Path,
                   help="probability maps, or input images when --method is given")
    p.add_argument("--gt-dir", required=True, type=Path,
                   help="annotator maps <stem>_<k>.png (or <stem>.png)")
    p.add_argument("--out", required=True, type=Path, help="report JSON path")
    p.add_argument("--thresholds", type=int, default=33)
    p.add_argument("--method", choices=["canny", "sobel", "model"], default=None)
    p.add_argument("--ckpt", type=Path, help="checkpoint (required with --method model)")
    p.add_argument("--tolerance", type=float, default=None, help="matching radius in pixels")
    p.add_argument("--canny-sigma", type=float, default=1.0)

    p = sub.add_parser("explain", help="emit strategy maps, firing maps and the rulebase")
    p.add_argument("--ckpt", required=True, type=Path)
    p.add_argument("--image", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path, help="output directory")

    p = sub.add_parser("export-rules", help="export the rulebase JSON + membership curves")
    p.add_argument("--ckpt", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path, help="rulebase JSON path")

    p = sub.add_parser("gradcheck", help="run the finite-difference verification suite")
    p.add_argument("--seed", type=int, default=0, help="first seed")
    p.add_argument("--count", type=int, default=20, help="number of seeds")
    p.add_argument("--quiet", action="store_true")
    return parser


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def _cmd_train(args) -> int:
    cfg_file = read_config_file(args.config) if args.config else {}

    def pick(key, flag_value, cast, default):
        if flag_value is not None:
            return flag_value
        if key in cfg_file:
            raw = cfg_file[key]
            return _as_bool(raw, key) if cast is bool else cast(raw)
        return default

    model_cfg = ModelConfig(
        depth=pick("depth", args.depth, int, 4),
        base_channels=pick("base_channels", args.base_channels, int, 64),
        input_channels=pick("input_channels", None, int, 1),
        smoe_enabled=False if args.no_smoe else pick("smoe_enabled", None, bool, True),
        tsk_rules=pick("tsk_rules", None, int, 4),
    )
    loss_cfg = LossConfig(
        bce_weight=pick("bce_weight", None, float, 0.5),
        dice_eps=pick("dice_eps", None, float, 1.0),
        distill_weight=pick("distill_weight", None, float, 1.0),
    )
    train_cfg = TrainConfig(
        epochs=pick("epochs", args.epochs, int, 50),
        batch_size=pick("batch_size", args.batch_size, int, 4),
        lr=pick("lr", args.lr, float, 1e-4),
        loss_cfg=loss_cfg,
        seed=pick("seed", args.seed, int, 0),
        out_dir=args.out,
        two_phase=pick("two_phase", None, bool, False),
    )

    train_samples = load_dataset(args.data, "train")
    val_samples = load_dataset(args.data, "val")
    model = build_model(model_cfg, seed=train_cfg.seed)
    records = train(model, train_samples, val_samples, train_cfg)
    last = records[-1]
    print(f"trained {last.epoch} epochs; final train loss {last.train_loss:.6f}"
          + (f", val loss {last.val_loss:.6f}" if val_samples else ""))
    print(f"artifacts in {args.out}")
    return EXIT_OK


def _load_model(ckpt: Path) -> Model:
    model, _ = load_checkpoint(ckpt)
    return model


def _cmd_infer(args) -> int:
    model = _load_model(args.ckpt)
    image = read_image(args.image)
    head = "unet" if args.unet_head else "fuzzy"
    prob = predict_probability(model, image, head=head)
    args.out.mkdir(parents=True, exist_ok=True)
    out_path = args.out / f"{args.image.stem}_edges.png"
    write_gray_png(out_path, prob)
    print(f"wrote {out_path}")
    return EXIT_OK


def _load_annotators(gt_dir: Path, stem: str) -> list[np.ndarray]:
    paths = sorted(gt_dir.glob(f"{stem}_*.png"))
    if not paths:
        single = gt_dir / f"{stem}.png"
        if single.is_file():
            paths = [single]
    if not paths:
        raise DataError(f"no ground-truth maps for stem {stem!r} in {gt_dir}")
    gts = []
    for p in paths:
        arr = read_image(p)
        if arr.ndim == 3:
            arr = arr.mean(axis=2)
        gts.append(arr >= 0.5)
    return gts


def _cmd_eval(args) -> int:
    if args.method == "model" and not args.ckpt:
        raise DataError("--method model needs --ckpt")
    stems = sorted(p.stem for p in args.pred_dir.glob("*.png"))
    if not stems:
        raise DataError(f"no PNG files in {args.pred_dir}")
    thresholds = default_thresholds(args.thresholds)
    model = _load_model(args.ckpt) if args.method == "model" else None

    sweeps = []
    for stem in stems:
        path = args.pred_dir / f"{stem}.png"
        gts = _load_annotators(args.gt_dir, stem)
        tol = args.tolerance or default_tolerance(gts[0].shape)
        arr = read_image(path)
        if args.method is None:
            prob = arr.mean(axis=2) if arr.ndim == 3 else arr
        elif args.method == "model":
            prob = predict_probability(model, arr, head="fuzzy")
        elif args.method == "sobel":
            prob = sobel_magnitude(to_luma(arr)).values
        else:  # canny
            sweeps.append(canny_sweep(to_luma(arr), gts, thresholds,
                                      sigma=args.canny_sigma, tol_px=tol))
            continue
        if prob.shape != gts[0].shape:
            raise DataError(f"stem {stem!r}: prediction {prob.shape} vs ground truth {gts[0].shape}")
        sweeps.append(pr_sweep(prob, gts, thresholds, tol_px=tol))

    report = summarize(sweeps, stems)
    _write_report(report, args.out)
    print(f"ODS {report.ods_f:.4f}  OIS {report.ois_f:.4f}  AP {report.ap:.4f}")
    print(f"report: {args.out}")
    return EXIT_OK


def _write_report(report: EvalReport, out_json: Path) -> None:
    out_json = Path(out_json)
    out_json.parent.mkdir(parents=True, exist_ok=True)
    out_json.write_text(report.to_json() + "\n")
    out_json.with_suffix(".csv").write_text(report.to_csv())
    plot_path = out_json.with_name(out_json.stem + "_pr.png")
    _plot_pr(report, plot_path)


def _plot_pr(report: EvalReport, path: Path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    pts = sorted((row["recall"], row["precision"]) for row in report.rows)
    fig, ax = plt.subplots(figsize=(5, 5))
    ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", markersize=3)
    ax.set_xlabel("Recall")
    ax.set_ylabel("Precision")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1)
    ax.grid(True, alpha=0.3)
    ax.set_title(f"ODS {report.ods_f:.3f} / OIS {report.ois_f:.3f} / AP {report.ap:.3f}")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def _cmd_explain(args) -> int:
    model = _load_model(args.ckpt)
    image = read_image(args.image)
    bundle = forward(model, image)
    paths = write_explain_artifacts(bundle, model.fuzzy, args.out)
    for p in paths:
        print(f"wrote {p}")
    return EXIT_OK


def _cmd_export_rules(args) -> int:
    model = _load_model(args.ckpt)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    for p in export_rulebase(model.fuzzy, args.out):
        print(f"wrote {p}")
    return EXIT_OK


def _cmd_gradcheck(args) -> int:
    from .gradsuite import negative_control, run_suite, suite_passed
    seeds = range(args.seed, args.seed + args.count)
    results = run_suite(seeds=seeds, verbose=not args.quiet)
    ok = suite_passed(results)
    control_ok = negative_control()
    worst = max(results, key=lambda nr: nr[1].max_rel_error)
    print(f"{len(results)} checks over {args.count} seeds; "
          f"worst {worst[0]} max_rel_err={worst[1].max_rel_error:.3e}")
    print(f"negative control {'detected' if control_ok else 'MISSED'} the broken gradient")
    if not ok or not control_ok:
        print("gradcheck FAILED", file=sys.stderr)
        return EXIT_NUMERIC
    print("gradcheck passed")
    return EXIT_OK


_DISPATCH = {
    "train": _cmd_train,
    "infer": _cmd_infer,
    "eval": _cmd_eval,
    "explain": _cmd_explain,
    "export-rules": _cmd_export_rules,
    "gradcheck": _cmd_gradcheck,
}


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return _DISPATCH[args.command](args)
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except SmoeEdgeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
