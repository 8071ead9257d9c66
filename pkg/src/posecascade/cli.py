"""Command-line pipeline: generate data, train the cascade, evaluate, predict.

Exit codes: 0 success, 1 usage, 2 data/validation problems, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import cascade as casc
from . import data as dat
from . import metrics as met
from . import nn
from .errors import (
    ImageFormatError,
    InvalidArgumentError,
    ManifestParseError,
    ManifestValidationError,
)
from .geometry import BoundingBox, PoseVector

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_RUNTIME = 3

_DATA_ERRORS = (
    ManifestParseError,
    ManifestValidationError,
    ImageFormatError,
    InvalidArgumentError,
    FileNotFoundError,
)


class _Parser(argparse.ArgumentParser):
    """argparse that reports usage problems with exit code 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


@dataclass
class RunConfig:
    """Training-run settings; every key can come from a key=value config file."""

    train: str = ""
    heldout: str = ""
    out: str = ""
    stages: int = 2
    sigma: float = 1.0
    crops_per_joint: int = 40
    stage1_crops: int = 4
    epochs: int = 10
    refine_epochs: int = 0  # 0: same as epochs
    batch: int = 128
    lr: float = 0.0005
    dropout: float = 0.6
    seed: int = 0
    input_size: int = 60
    threads: int = 1
    use_lrn: bool = False

    _INT = ("stages", "crops_per_joint", "stage1_crops", "epochs", "refine_epochs",
            "batch", "seed", "input_size", "threads")
    _FLOAT = ("sigma", "lr", "dropout")
    _BOOL = ("use_lrn",)

    def apply(self, key: str, value: str):
        try:
            return self._apply(key, value)
        except ValueError:
            raise InvalidArgumentError(f"bad value {value!r} for config key {key!r}") from None

    def _apply(self, key: str, value: str):
        if key in self._INT:
            setattr(self, key, int(value))
        elif key in self._FLOAT:
            setattr(self, key, float(value))
        elif key in self._BOOL:
            setattr(self, key, value.lower() in ("1", "true", "yes"))
        elif key in ("train", "heldout", "out"):
            setattr(self, key, value)
        else:
            raise InvalidArgumentError(f"unknown config key {key!r}")


def load_run_config(path) -> RunConfig:
    cfg = RunConfig()
    for line_no, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InvalidArgumentError(f"{path}:{line_no}: expected key=value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        cfg.apply(key, value)
    return cfg


def _parse_box(text: str) -> BoundingBox:
    parts = text.split(",")
    if len(parts) != 4:
        raise InvalidArgumentError(f"box must be cx,cy,w,h, got {text!r}")
    try:
        cx, cy, w, h = (float(p) for p in parts)
    except ValueError:
        raise InvalidArgumentError(f"non-numeric box {text!r}") from None
    return BoundingBox(np.array([cx, cy]), w, h)


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> int:
    cfg = dat.SynthConfig(
        count=args.count,
        seed=args.seed,
        image_size=(args.size, args.size),
        noise_level=args.noise,
    )
    manifest = dat.synth_generate(cfg, args.out)
    print(f"wrote {len(manifest.examples)} examples to {args.out}")
    return EXIT_OK


def _stage_config(cfg: RunConfig, stage: int) -> casc.StageConfig:
    epochs = cfg.epochs if stage == 1 or cfg.refine_epochs == 0 else cfg.refine_epochs
    return casc.StageConfig(
        sigma=cfg.sigma,
        crops_per_joint=cfg.crops_per_joint,
        stage1_jitter_crops=cfg.stage1_crops,
        input_size=(cfg.input_size, cfg.input_size, 1),
        use_lrn=cfg.use_lrn,
        train=nn.TrainConfig(
            epochs=epochs,
            batch_size=cfg.batch,
            learning_rate=cfg.lr,
            dropout_keep=cfg.dropout,
            seed=cfg.seed * 1000 + stage,
        ),
        seed=cfg.seed * 1000 + stage,
    )


def _heldout_row(model, examples, truths, threads):
    preds = [p.final for p in casc.predict_many(model, examples, threads=threads)]
    rates = met.pdj(preds, truths, model.tree, 0.2)
    keep = rates.valid > 0
    mean_pdj = float(rates.rates[keep].mean()) if keep.any() else 0.0
    errs = []
    for p, t in zip(preds, truths):
        d = np.linalg.norm(p.joints - t.joints, axis=1)
        errs.extend(d[t.mask])
    mean_err = float(np.mean(errs)) if errs else float("nan")
    return mean_pdj, mean_err


def cmd_train(args) -> int:
    cfg = load_run_config(args.config) if args.config else RunConfig()
    for key in ("train", "heldout", "out"):
        val = getattr(args, key)
        if val is not None:
            setattr(cfg, key, val)
    for key in ("stages", "sigma", "crops_per_joint", "stage1_crops", "epochs",
                "refine_epochs", "batch", "lr", "dropout", "seed", "input_size", "threads"):
        val = getattr(args, key)
        if val is not None:
            setattr(cfg, key, val)
    if not cfg.train or not cfg.out:
        print("train: error: --train and --out are required (flag or config file)",
              file=sys.stderr)
        return EXIT_USAGE

    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = dat.load_manifest(cfg.train)
    examples = dat.load_examples(manifest)
    if cfg.heldout:
        held_manifest = dat.load_manifest(cfg.heldout)
        held_examples = dat.load_examples(held_manifest)
        held_name = cfg.heldout
    else:
        held_examples = examples
        held_name = f"{cfg.train} (train set; no held-out manifest given)"
    held_truths = [ex.pose for ex in held_examples]

    def progress(name):
        def cb(epoch, loss):
            print(f"{name} epoch {epoch}: loss {loss:.6f}")

        return cb

    report_lines = [f"# held-out set: {held_name}", "stage mean_pdj@0.2 mean_px_error"]

    sc1 = _stage_config(cfg, 1)
    net1 = casc.train_stage1(examples, manifest.tree, sc1, progress("stage 1"))
    model = casc.CascadeModel([net1], [None], cfg.sigma, manifest.tree, sc1.input_size)
    casc.save_cascade(model, out / "cascade_stage1.model")
    mean_pdj, mean_err = _heldout_row(model, held_examples, held_truths, cfg.threads)
    report_lines.append(f"1 {mean_pdj:.4f} {mean_err:.4f}")
    (out / "heldout_report.txt").write_text("\n".join(report_lines) + "\n")

    for stage in range(2, cfg.stages + 1):
        stats = casc.fit_displacement_stats(model, examples, threads=cfg.threads)
        sc = _stage_config(cfg, stage)
        casc.train_refinement_stage(examples, model, stats, sc, progress(f"stage {stage}"))
        casc.save_cascade(model, out / f"cascade_stage{stage}.model")
        mean_pdj, mean_err = _heldout_row(model, held_examples, held_truths, cfg.threads)
        report_lines.append(f"{stage} {mean_pdj:.4f} {mean_err:.4f}")
        (out / "heldout_report.txt").write_text("\n".join(report_lines) + "\n")

    casc.save_cascade(model, out / "cascade.model")
    print(f"trained {model.num_stages} stage(s); model at {out / 'cascade.model'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model = casc.load_cascade(args.model)
    manifest = dat.load_manifest(args.manifest)
    if manifest.k != model.tree.k:
        raise ManifestValidationError(
            f"manifest k={manifest.k} does not match model k={model.tree.k}"
        )
    try:
        fractions = [float(f) for f in args.fractions.split(",")]
    except ValueError:
        raise InvalidArgumentError(f"bad --fractions value {args.fractions!r}") from None
    examples = dat.load_examples(manifest)
    truths = [ex.pose for ex in examples]
    preds = casc.predict_many(model, examples, threads=args.threads)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for s in range(model.num_stages):
        stage_preds = [p.poses[min(s, len(p.poses) - 1)] for p in preds]
        report = met.make_report(
            stage_preds, truths, manifest.tree, manifest.joint_names,
            pcp_threshold=args.pcp_threshold, fractions=fractions,
        )
        (out / f"eval_stage{s + 1}.txt").write_text(report.text_table())
        (out / f"eval_stage{s + 1}.json").write_text(json.dumps(report.json_dict(), indent=1))
        mean = report.pdj.mean_rates()
        summary = " ".join(f"pdj@{f:g}={m:.4f}" for f, m in zip(fractions, mean))
        print(f"stage {s + 1}: {summary}")
    return EXIT_OK


_LIMB_PALETTE = [
    "#e6194b", "#3cb44b", "#daa520", "#4363d8", "#f58231",
    "#911eb4", "#46f0f0", "#f032e6", "#8f7a46", "#008080",
]


def render_svg(pose: PoseVector, tree, width: int, height: int) -> str:
    """Stick-figure overlay: one <line> per limb, colored by limb id."""
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
    ]
    for idx, (a, b) in enumerate(tree.limbs):
        color = _LIMB_PALETTE[idx % len(_LIMB_PALETTE)]
        xa, ya = pose.joints[a]
        xb, yb = pose.joints[b]
        parts.append(
            f'<line x1="{xa:.2f}" y1="{ya:.2f}" x2="{xb:.2f}" y2="{yb:.2f}" '
            f'stroke="{color}" stroke-width="1.5"/>'
        )
    for x, y in pose.joints:
        parts.append(f'<circle cx="{x:.2f}" cy="{y:.2f}" r="1.2" fill="black"/>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def cmd_predict(args) -> int:
    model = casc.load_cascade(args.model)
    image = dat.load_image(args.image)
    box = _parse_box(args.box) if args.box else None
    t0 = time.perf_counter()
    result = casc.predict(model, image, box)
    elapsed = time.perf_counter() - t0
    for s, pose in enumerate(result.poses, start=1):
        for i, (x, y) in enumerate(pose.joints):
            print(f"{s} {i} {x:.3f} {y:.3f}")
    if result.truncated:
        print("truncated", file=sys.stderr)
    print(f"predicted in {elapsed * 1000:.1f} ms", file=sys.stderr)
    if args.render:
        svg = render_svg(result.final, model.tree, image.shape[1], image.shape[0])
        Path(args.render).write_text(svg)
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> _Parser:
    parser = _Parser(prog="posecascade", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic stick-figure dataset")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--count", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=64, help="square image side in pixels")
    p.add_argument("--noise", type=float, default=0.03, help="background noise std")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train the cascade")
    p.add_argument("--config", help="key=value file; flags override it")
    p.add_argument("--train", help="training manifest")
    p.add_argument("--heldout", help="held-out manifest for the per-stage report")
    p.add_argument("--out", help="output directory")
    p.add_argument("--stages", type=int)
    p.add_argument("--sigma", type=float)
    p.add_argument("--crops-per-joint", dest="crops_per_joint", type=int)
    p.add_argument("--stage1-crops", dest="stage1_crops", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--refine-epochs", dest="refine_epochs", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--dropout", type=float, help="dropout keep probability")
    p.add_argument("--seed", type=int)
    p.add_argument("--input-size", dest="input_size", type=int)
    p.add_argument("--threads", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a model on a manifest")
    p.add_argument("--model", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--fractions", default="0.1,0.2,0.3,0.4,0.5")
    p.add_argument("--pcp-threshold", dest="pcp_threshold", type=float, default=0.5)
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="predict a pose for one image")
    p.add_argument("--model", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--box", help="initial box cx,cy,w,h (default: full image)")
    p.add_argument("--render", help="write a stick-figure SVG here")
    p.set_defaults(func=cmd_predict)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except _DATA_ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    except Exception as e:  # noqa: BLE001 -- boundary: everything else is a runtime failure
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
