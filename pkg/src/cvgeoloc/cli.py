"""Command line entry point: ``cvgeoloc <subcommand> [flags]``.

Every run writes ``config.json`` to its output directory with all effective
values. Settings are layered: built-in defaults, then ``--config`` (a JSON
file of flag names to values), then explicit flags. The output directory is
``--out`` if given, else ``$CVGEOLOC_OUT/<subcommand>`` if that variable is
set, else the config file's ``out``, else ``runs/<subcommand>``.

Exit status is 0 on success and 2 on any validation error.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from .dataset import SyntheticSpec, benchmark_split, generate_synthetic, load_annotations
from .detection import AnchorSet, cluster_anchors
from . import config as C
from .config import PIPELINE_GRAD_RTOL
from .errors import GeolocError
from .evaluation import EvalReport, format_table, write_report
from .model import VARIANTS, Model, ModelConfig
from .train import TrainConfig, evaluate, infer, lr_at, pipeline_grad_check, train

log = logging.getLogger("cvgeoloc")

OUT_ENV = "CVGEOLOC_OUT"
DEFAULT_SWEEP_K = (1, 2, 3, 4, 5, 6)
ABLATION_ROWS = (("baseline", "baseline"), ("+CVCAM", "cvcam"), ("+CVCAM+MHSAM", "full"))

# flag name -> default; None means "not set", so lower layers show through
COMMON_DEFAULTS = {
    "seed": 0, "epochs": TrainConfig.epochs, "lr": TrainConfig.lr, "lr_step": TrainConfig.lr_step,
    "batch_size": TrainConfig.batch_size, "hflip": False,
    "k": ModelConfig.k, "heads": ModelConfig.heads, "dim": ModelConfig.dim, "variant": "full",
    "anchors": None, "data": None, "eval_data": None,
    "n_train": C.BENCH_TRAIN, "n_test": C.BENCH_TEST,
}
# sweep-k and ablate default to the synthetic benchmark recipe
BENCH_DEFAULTS = {"epochs": C.BENCH_EPOCHS, "lr": C.BENCH_LR, "lr_step": C.BENCH_LR_STEP,
                  "batch_size": C.BENCH_BATCH, "dim": C.BENCH_DIM}


# ---------------------------------------------------------------- settings

def _load_config_file(path) -> dict:
    if path is None:
        return {}
    try:
        data = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise GeolocError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise GeolocError(f"config file {path} is not valid JSON: {exc}") from None
    if not isinstance(data, dict):
        raise GeolocError(f"config file {path} must hold a JSON object")
    return {k.replace("-", "_"): v for k, v in data.items()}


def resolve(args: argparse.Namespace) -> dict:
    """Merge defaults, config file and explicit flags into one settings dict."""
    file_cfg = _load_config_file(args.config)
    settings = dict(COMMON_DEFAULTS)
    if args.command in ("sweep-k", "ablate"):
        settings.update(BENCH_DEFAULTS)
    extra = {k: v for k, v in vars(args).items() if k not in ("func", "config", "command", "out")}
    for key in extra:
        settings.setdefault(key, None)
    unknown = set(file_cfg) - set(settings) - {"out"}
    if unknown:
        raise GeolocError(f"unknown config key(s): {', '.join(sorted(unknown))}")
    settings.update({k: v for k, v in file_cfg.items() if k != "out"})
    settings.update({k: v for k, v in extra.items() if v is not None})
    settings["command"] = args.command
    settings["out"] = str(_out_dir(args, file_cfg))
    return settings


def _out_dir(args, file_cfg) -> Path:
    if args.out is not None:
        return Path(args.out)
    env = os.environ.get(OUT_ENV)
    if env:
        return Path(env) / args.command
    if "out" in file_cfg:
        return Path(file_cfg["out"])
    return Path("runs") / args.command


def model_config(s: dict, variant: str | None = None, **kw) -> ModelConfig:
    return ModelConfig.variant(variant or s["variant"], dim=int(s["dim"]), heads=int(s["heads"]),
                               k=int(s["k"]), **kw)


def train_config(s: dict, **model_kw) -> TrainConfig:
    return TrainConfig(epochs=int(s["epochs"]), lr=float(s["lr"]), lr_step=int(s["lr_step"]),
                       batch_size=int(s["batch_size"]), seed=int(s["seed"]), hflip=bool(s["hflip"]),
                       model=model_config(s, **model_kw))


def _echo(out: Path, settings: dict, **effective) -> None:
    out.mkdir(parents=True, exist_ok=True)
    record = {"settings": settings, **effective}
    (out / "config.json").write_text(json.dumps(record, indent=2, sort_keys=True, default=str) + "\n")


def _need(settings: dict, key: str) -> str:
    if not settings.get(key):
        raise GeolocError(f"--{key.replace('_', '-')} is required for '{settings['command']}'")
    return settings[key]


def _datasets(s: dict):
    """Training and evaluation samples: from annotation files or freshly synthesized."""
    if s.get("data"):
        tr = load_annotations(s["data"])
        te = load_annotations(s["eval_data"]) if s.get("eval_data") else [x for x in tr if x.split == "test"]
        if not s.get("eval_data"):
            tr = [x for x in tr if x.split != "test"] or tr
        return tr, te or tr
    return benchmark_split(int(s["n_train"]), int(s["n_test"]), int(s["seed"]))


def _anchors(s: dict, samples) -> AnchorSet:
    if s.get("anchors"):
        return AnchorSet.load(s["anchors"])
    return cluster_anchors([(x.gt_box.w, x.gt_box.h) for x in samples], seed=int(s["seed"]))


# ---------------------------------------------------------------- subcommands

def cmd_gen_data(s: dict) -> int:
    out = Path(s["out"])
    spec = SyntheticSpec(n_samples=int(s["n"]), seed=int(s["seed"]), split=s["split"],
                         id_prefix=s["id_prefix"])
    _echo(out, s, synthetic=asdict(spec))
    path = generate_synthetic(spec, out)
    print(f"wrote {spec.n_samples} samples to {path}")
    return 0


def cmd_anchors(s: dict) -> int:
    out = Path(s["out"])
    samples = load_annotations(_need(s, "data"))
    anchors = cluster_anchors([(x.gt_box.w, x.gt_box.h) for x in samples], seed=int(s["seed"]))
    _echo(out, s)
    anchors.save(out / "anchors.txt")
    print(f"wrote {len(anchors)} anchors to {out / 'anchors.txt'}")
    return 0


def cmd_train(s: dict) -> int:
    out = Path(s["out"])
    samples = load_annotations(_need(s, "data"))
    cfg = train_config(s)
    anchors = _anchors(s, samples)
    _echo(out, s, train=cfg.to_dict())
    anchors.save(out / "anchors.txt")
    model = Model.create(cfg.model, anchors, seed=cfg.seed)
    model.save(out / "checkpoint_e000.npz")
    rows = []

    def on_epoch(epoch, loss):
        rows.append((epoch, lr_at(epoch, cfg), loss))
        model.save(out / f"checkpoint_e{epoch + 1:03d}.npz")

    result = train(samples, cfg, model=model, on_epoch=on_epoch)
    result.model.save(out / "model.npz")
    with open(out / "loss.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "lr", "loss"])
        for epoch, lr, loss in rows:
            w.writerow([epoch, repr(lr), repr(loss)])
    with open(out / "steps.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss"])
        for i, loss in enumerate(result.step_losses):
            w.writerow([i, repr(loss)])
    print(f"trained {len(result.epoch_losses)} epoch(s), {len(result.step_losses)} step(s); "
          f"checkpoint {out / 'model.npz'}")
    return 0


def cmd_eval(s: dict) -> int:
    out = Path(s["out"])
    model = Model.load(_need(s, "checkpoint"))
    samples = load_annotations(_need(s, "data"))
    _echo(out, s, model=model.cfg.to_dict())
    report = evaluate(model, samples)
    write_report(report, out, name=s.get("name") or "model")
    print(format_table([(s.get("name") or "model", report)]), end="")
    return 0


RAMP = np.array([(0, 0, 64), (0, 80, 255), (0, 220, 160), (255, 230, 0), (230, 20, 0)], dtype=np.float64)


def heatmap_images(heat: np.ndarray, size: tuple[int, int]) -> tuple[np.ndarray, np.ndarray]:
    """Bilinear upsampling to ``size`` (w, h); returns (uint8 gray, uint8 RGB ramp)."""
    up = np.asarray(Image.fromarray(heat.astype(np.float32), mode="F").resize(size, Image.BILINEAR),
                    dtype=np.float64)
    lo, hi = up.min(), up.max()
    norm = np.zeros_like(up) if hi <= lo else (up - lo) / (hi - lo)
    gray = np.rint(norm * 255).astype(np.uint8)
    pos = norm * (len(RAMP) - 1)
    i0 = np.clip(np.floor(pos).astype(int), 0, len(RAMP) - 2)
    frac = (pos - i0)[..., None]
    rgb = np.rint(RAMP[i0] * (1 - frac) + RAMP[i0 + 1] * frac).astype(np.uint8)
    return gray, rgb


def cmd_infer(s: dict) -> int:
    out = Path(s["out"])
    model = Model.load(_need(s, "checkpoint"))
    samples = load_annotations(_need(s, "data"))
    if s.get("id"):
        chosen = [x for x in samples if x.id == s["id"]]
        if not chosen:
            raise GeolocError(f"no sample with id {s['id']!r}")
        sample = chosen[0]
    else:
        idx = int(s.get("index") or 0)
        if not 0 <= idx < len(samples):
            raise GeolocError(f"sample index {idx} out of range (0..{len(samples) - 1})")
        sample = samples[idx]
    _echo(out, s, model=model.cfg.to_dict(), sample=sample.id)
    res = infer(sample, model)
    _, h, w = sample.reference_image.shape
    gray, rgb = heatmap_images(res.heatmap, (w, h))
    Image.fromarray(gray, mode="L").save(out / "heatmap_gray.png")
    ref = (np.clip(sample.reference_image, 0, 1).transpose(1, 2, 0) * 255).round().astype(np.uint8)
    blend = (0.5 * ref + 0.5 * rgb).round().astype(np.uint8)
    Image.fromarray(blend).save(out / "heatmap.png")
    boxed = Image.fromarray(ref)
    draw = ImageDraw.Draw(boxed)
    draw.rectangle(sample.gt_box.corners(), outline=(0, 255, 0))
    draw.rectangle(res.box.corners(), outline=(255, 0, 0))
    boxed.save(out / "prediction.png")
    info = {"id": sample.id, "box_xywh": list(res.box.as_tuple()), "confidence": res.confidence,
            "flat_index": res.flat_index, "cell": list(res.cell),
            "gt_xywh": list(sample.gt_box.as_tuple())}
    (out / "prediction.json").write_text(json.dumps(info, indent=2) + "\n")
    print(json.dumps(info))
    return 0


def cmd_gradcheck(s: dict) -> int:
    out = Path(s["out"])
    _echo(out, s)
    errors = pipeline_grad_check(seed=int(s["seed"]), probes=s["probes"] or None)
    worst = max(errors.values())
    ok = worst < s["tol"]
    lines = [f"{name} {err:.3e}" for name, err in errors.items()]
    lines.append(f"micro-pipeline max rel err {worst:.3e} (tol {s['tol']:.0e}) {'PASS' if ok else 'FAIL'}")
    (out / "gradcheck.txt").write_text("\n".join(lines) + "\n")
    print(lines[-1])
    return 0 if ok else 1


def _fit_and_score(s: dict, tr, te, anchors, **model_kw) -> EvalReport:
    cfg = train_config(s, **model_kw)
    res = train(tr, cfg, anchors=anchors)
    return evaluate(res.model, te)


def cmd_sweep_k(s: dict) -> int:
    out = Path(s["out"])
    ks = [int(v) for v in str(s.get("k_values") or ",".join(map(str, DEFAULT_SWEEP_K))).split(",") if v.strip()]
    if not ks:
        raise GeolocError("--k-values must list at least one k")
    tr, te = _datasets(s)
    anchors = _anchors(s, tr)
    _echo(out, s, k_values=ks, n_train=len(tr), n_test=len(te))
    rows = []
    for k in ks:
        rep = _fit_and_score(dict(s, k=k), tr, te, anchors)
        rows.append((f"k={k}", rep))
        log.info("k=%d accu@0.5 %.4f", k, rep.accu_05)
    _write_table(out, "sweep_k", rows)
    return 0


def cmd_ablate(s: dict) -> int:
    out = Path(s["out"])
    tr, te = _datasets(s)
    anchors = _anchors(s, tr)
    _echo(out, s, variants=[v for _, v in ABLATION_ROWS], n_train=len(tr), n_test=len(te))
    rows = [(label, _fit_and_score(s, tr, te, anchors, variant=variant)) for label, variant in ABLATION_ROWS]
    _write_table(out, "ablation", rows)
    return 0


def _write_table(out: Path, stem: str, rows) -> None:
    table = format_table(rows)
    (out / f"{stem}.txt").write_text(table)
    (out / f"{stem}.json").write_text(json.dumps(
        [{"name": name, "accu_025": r.accu_025, "accu_05": r.accu_05, "n": r.n} for name, r in rows],
        indent=2) + "\n")
    print(table, end="")


# ---------------------------------------------------------------- parser

def _common(p: argparse.ArgumentParser, training: bool = False) -> None:
    p.add_argument("--config", help="JSON file of flag values (explicit flags win)")
    p.add_argument("--out", help=f"output directory (default $${OUT_ENV}/<cmd> or runs/<cmd>)")
    p.add_argument("--seed", type=int)
    if training:
        p.add_argument("--epochs", type=int)
        p.add_argument("--lr", type=float)
        p.add_argument("--lr-step", type=int, dest="lr_step")
        p.add_argument("--batch-size", type=int, dest="batch_size")
        p.add_argument("--hflip", action="store_true", default=None)
        p.add_argument("--k", type=int)
        p.add_argument("--heads", type=int)
        p.add_argument("--dim", type=int)
        p.add_argument("--variant", choices=sorted(VARIANTS))
        p.add_argument("--anchors", help="anchor file (9 lines 'w h'); clustered from data if omitted")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="cvgeoloc", description="Cross-view object geo-localization toolkit")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="render a synthetic cross-view dataset")
    _common(p)
    p.add_argument("--n", type=int, default=256)
    p.add_argument("--split", default="train", choices=("train", "val", "test"))
    p.add_argument("--id-prefix", dest="id_prefix", default="syn")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("anchors", help="cluster the nine anchor boxes")
    _common(p)
    p.add_argument("--data", help="annotation file (JSON Lines)")
    p.set_defaults(func=cmd_anchors)

    p = sub.add_parser("train", help="train a model")
    _common(p, training=True)
    p.add_argument("--data", help="training annotation file")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    _common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--data", help="annotation file to score")
    p.add_argument("--name", help="row label in the report table")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="predict one sample and render box and heatmap images")
    _common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--data", help="annotation file holding the sample")
    p.add_argument("--index", type=int)
    p.add_argument("--id")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("gradcheck", help="finite-difference check of the micro pipeline")
    _common(p)
    p.add_argument("--tol", type=float, default=PIPELINE_GRAD_RTOL)
    p.add_argument("--probes", type=int, default=4, help="elements checked per tensor (0 = all)")
    p.set_defaults(func=cmd_gradcheck)

    for name, func, helptext in (("sweep-k", cmd_sweep_k, "train/evaluate one model per k"),
                                 ("ablate", cmd_ablate, "baseline / +CVCAM / +CVCAM+MHSAM table")):
        p = sub.add_parser(name, help=helptext)
        _common(p, training=True)
        p.add_argument("--data", help="training annotations (synthetic data is generated if omitted)")
        p.add_argument("--eval-data", dest="eval_data", help="evaluation annotations")
        p.add_argument("--n-train", type=int, dest="n_train")
        p.add_argument("--n-test", type=int, dest="n_test")
        if name == "sweep-k":
            p.add_argument("--k-values", dest="k_values", help="comma separated, default 1,2,3,4,5,6")
        p.set_defaults(func=func)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        settings = resolve(args)
        return args.func(settings)
    except (GeolocError, ValueError, TypeError, OSError) as exc:
        print(f"cvgeoloc {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
