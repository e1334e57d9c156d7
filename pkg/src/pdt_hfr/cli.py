"""Command-line front end.

Exit codes: 0 success, 2 configuration error, 3 I/O or file-format error,
4 numeric abort (non-finite training loss, failed gradient check).
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import container, plotting
from .backbone import Backbone, backbone_toy, replicate_channels
from .config import ECHO_NAME, RunConfig, load_config
from .dataset import IMAGE_KEY, Manifest, gen_dataset, gen_folds, render_sample, subset_train
from .errors import ConfigError, DataError, FormatError, NumericDegenerateError, TrainingDiverged, ValidationError
from .gradcheck import check_gradients
from .losses import ContrastiveConfig, contrastive_loss
from .metrics import MetricsReport
from .pdt import PdtBlock, pdt_init
from .pipeline import evaluate_manifest
from .tensor import Tensor, no_grad
from .trainer import SUPERVISIONS, TrainReport, train

log = logging.getLogger("pdt_hfr")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4
SWEEP_COLUMNS = ("fraction", "n_identities", "auc", "eer", "rank1", "vr_at_far_1e-3")
GRADCHECK_TOL = 1e-4


class GradCheckFailed(ArithmeticError):
    pass


def build_backbone(cfg: RunConfig) -> Backbone:
    return backbone_toy(cfg.backbone.seed, cfg.backbone.embed_dim)


def _read_config(path) -> RunConfig:
    cfg = load_config(path) if path is not None else RunConfig()
    return cfg.validate()


# --- commands -----------------------------------------------------------------

def cmd_gen_data(args) -> int:
    cfg = _read_config(args.config)
    out = Path(args.out)
    if args.folds is None:
        gen_dataset(cfg.data, out)
        paths = [out / "manifest.csv"]
    else:
        gen_folds(cfg.data, args.folds, out)
        paths = [out / f"fold_{k}.csv" for k in range(args.folds)]
    cfg.write(out)
    for p in paths:
        print(p)
    return EXIT_OK


def run_training(cfg: RunConfig, manifest: Manifest, out: Path, fraction: float = 1.0) -> tuple[PdtBlock, TrainReport]:
    """Train a fresh PDT on ``manifest`` (optionally subset) into ``out``."""
    if fraction < 1:
        manifest = subset_train(manifest, fraction, cfg.train.seed)
    backbone = build_backbone(cfg)
    before = backbone.checksum()
    pdt = pdt_init(cfg.pdt, cfg.train.seed)
    cfg.write(out)
    report = train(pdt, backbone, manifest, cfg.train_config, out)
    if backbone.checksum() != before:
        raise RuntimeError("backbone parameters changed during training")
    plotting.plot_losses(out / "loss.png", report.train_losses, report.val_losses, report.best_epoch)
    return pdt, report


def cmd_train(args) -> int:
    cfg = _read_config(args.config)
    if args.supervision is not None:
        cfg = cfg.with_overrides(**{"train.supervision": args.supervision}).validate()
    manifest = Manifest.read(args.data)
    out = Path(args.out)
    _, report = run_training(cfg, manifest, out, args.train_fraction)
    print(f"best_epoch={report.best_epoch}")
    print(f"best_val_loss={report.best_val_loss!r}")
    print(f"checkpoint={report.checkpoint_path}")
    print(f"seconds={report.seconds:.1f}")
    return EXIT_OK


def _eval_config(args) -> RunConfig:
    if args.config is not None:
        return _read_config(args.config)
    if args.checkpoint is not None:
        sibling = Path(args.checkpoint).parent / ECHO_NAME
        if sibling.exists():
            return _read_config(sibling)
    return RunConfig()


def run_eval(
    cfg: RunConfig, manifest: Manifest, out: Path, pdt: PdtBlock | None, direction: str = "st"
) -> MetricsReport:
    backbone = build_backbone(cfg)
    report, _, points = evaluate_manifest(backbone, manifest, pdt, direction)
    report.write(out, points)
    label = "PDT" if pdt is not None else "no PDT"
    plotting.plot_roc(out / "roc.png", {f"{label} (EER {report.eer:.3f})": points})
    return report


def cmd_eval(args) -> int:
    cfg = _eval_config(args)
    manifest = Manifest.read(args.data)
    pdt = None
    if not args.no_pdt:
        if args.checkpoint is None:
            raise ConfigError("eval needs --checkpoint unless --no-pdt is given")
        pdt = PdtBlock.from_bytes(Path(args.checkpoint).read_bytes(), cfg.pdt)
    report = run_eval(cfg, manifest, Path(args.out), pdt, args.direction)
    for key, value in report.as_dict().items():
        print(f"{key}={value!r}")
    return EXIT_OK


def parse_fractions(text: str) -> list[float]:
    try:
        values = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"--fractions must be comma-separated numbers, got {text!r}") from None
    if not values or any(not 0 < v <= 1 for v in values):
        raise ConfigError(f"--fractions must lie in (0, 1], got {text!r}")
    return values


def _fraction_label(f: float) -> str:
    return repr(f)


def cmd_sweep(args) -> int:
    cfg = _read_config(args.config)
    fractions = parse_fractions(args.fractions)
    manifest = Manifest.read(args.data)
    out = Path(args.out)
    rows = []
    for f in fractions:
        sub = out / f"fraction_{_fraction_label(f)}"
        subset = subset_train(manifest, f, cfg.train.seed) if f < 1 else manifest
        pdt, _ = run_training(cfg, subset, sub)
        report = run_eval(cfg, manifest, sub, pdt)
        rows.append((f, len(subset.ids("train")), report))
        log.info("fraction %s done: eer=%r", f, report.eer)
    lines = [",".join(SWEEP_COLUMNS)]
    for f, n_ids, r in rows:
        d = r.as_dict()
        lines.append(f"{_fraction_label(f)},{n_ids},{d['auc']!r},{d['eer']!r},{d['rank1']!r},{d['vr_at_far_1e-3']!r}")
    out.mkdir(parents=True, exist_ok=True)
    (out / "sweep.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    plotting.plot_sweep(out / "sweep.png", [r[0] for r in rows], [r[2].eer for r in rows], [r[2].rank1 for r in rows])
    print("\n".join(lines))
    return EXIT_OK


def pipeline_gradcheck(cfg: RunConfig, seed: int) -> float:
    """Max relative error of the PDT gradients through backbone and contrastive loss.

    One target image passes through PDT and backbone and is scored against a
    genuine and an impostor source image.
    """
    spec = cfg.data
    x_s = np.stack([render_sample(spec, 0, 0, "source"), render_sample(spec, 1, 0, "source")])
    x_t = render_sample(spec, 0, 1, "target")[None]
    pdt = pdt_init(cfg.pdt, seed)
    backbone = build_backbone(cfg)
    with no_grad():
        e_s = backbone.embed(Tensor(x_s))
    labels = np.array([0.0, 1.0])
    loss_cfg = ContrastiveConfig(cfg.train.margin)

    def loss():
        e_t = backbone.embed(pdt(replicate_channels(Tensor(x_t))))
        return contrastive_loss(e_s, e_t[[0, 0]], labels, loss_cfg)

    return check_gradients(loss, pdt.params, freeze_kinks=True).max_error


def cmd_diagnose(args) -> int:
    cfg = _read_config(args.config)
    if args.what == "param-count":
        block = pdt_init(cfg.pdt, cfg.train.seed)
        for name, shape, count in block.parameter_table():
            print(f"{name:24s} {str(shape):18s} {count}")
        print(f"total {block.num_parameters()}")
        return EXIT_OK
    if args.what == "gradcheck":
        err = pipeline_gradcheck(cfg, cfg.train.seed)
        print(f"max_relative_error={err!r}")
        if not err < GRADCHECK_TOL:
            raise GradCheckFailed(f"max relative error {err} >= {GRADCHECK_TOL}")
        return EXIT_OK
    # transform
    if args.in_path is None or args.out_path is None:
        raise ConfigError("diagnose --what transform needs --in and --out")
    entries = container.container_read(args.in_path)
    if IMAGE_KEY not in entries:
        raise FormatError(f"{args.in_path}: missing entry {IMAGE_KEY!r}")
    image = entries[IMAGE_KEY]
    if image.ndim != 3 or image.shape[0] not in (1, 3):
        raise FormatError(f"{args.in_path}: image entry must be [C, H, W] with C in (1, 3), got {image.shape}")
    if args.checkpoint is not None:
        block = PdtBlock.from_bytes(Path(args.checkpoint).read_bytes(), cfg.pdt)
    else:
        block = pdt_init(cfg.pdt, cfg.train.seed)
    with no_grad():
        out = block(replicate_channels(Tensor(image[None]))).data[0]
    out_path = Path(args.out_path)
    container.container_write(out_path, {IMAGE_KEY: out})
    plotting.plot_transform(out_path.with_suffix(".png"), image, out)
    print(out_path)
    return EXIT_OK


# --- entry point ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pdt-hfr", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="render the synthetic two-domain dataset")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--folds", type=int)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a PDT block in front of the frozen backbone")
    p.add_argument("--config")
    p.add_argument("--data", required=True, help="manifest CSV")
    p.add_argument("--out", required=True)
    p.add_argument("--supervision", choices=SUPERVISIONS)
    p.add_argument("--train-fraction", type=float, default=1.0)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="cross-domain verification and identification metrics")
    p.add_argument("--checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--no-pdt", action="store_true", help="feed raw target images to the backbone")
    p.add_argument("--direction", choices=("st", "ts"), default="st")
    p.add_argument("--config", help=f"defaults to {ECHO_NAME} next to the checkpoint")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep-fraction", help="train and evaluate on subsets of the training identities")
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--fractions", required=True, help="comma-separated, e.g. 0.1,0.5,1.0")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("diagnose", help="gradient check, parameter table or a single transform")
    p.add_argument("--what", required=True, choices=("gradcheck", "param-count", "transform"))
    p.add_argument("--config")
    p.add_argument("--checkpoint", help="trained weights for --what transform")
    p.add_argument("--in", dest="in_path")
    p.add_argument("--out", dest="out_path")
    p.set_defaults(func=cmd_diagnose)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ConfigError, DataError, ValidationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (TrainingDiverged, NumericDegenerateError, GradCheckFailed) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
