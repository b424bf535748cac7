"""``sessd`` command line: augment, iou, train, eval and ablation.

Exit codes: 0 success, 1 usage error, 2 data error, 3 internal invariant
violation. ``SE3D_THREADS`` caps the number of worker processes.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from .augment import AugConfig, AugRecord, PointOutsideBox, apply_record, draw_shape_aware_ops, draw_transform
from .detections import Detections
from .evaluation import EvalConfig, average_precision, evaluate, write_pr_csv
from .geom import Box3D, box_corners_bev, convex_intersection, enclosing_diagonal, iou_3d, iou_bev
from .kitti import Calib, MalformedBin, MalformedLabel, MissingCalibKey, read_calib, read_labels, read_predictions
from .losses import LossWeights, odiou_loss
from .matching import MatchConfig
from .pipeline import checkpoint
from .pipeline.detector import StaleCache, ToyDetector, ToySpec
from .pipeline.optim import LayoutMismatch, ShapeMismatch
from .pipeline.synthetic import make_dataset
from .pipeline.train import TrainConfig, pretrain, train_se_ssd, write_metrics_csv
from .scene import SceneFormatError, format_scene, read_scene

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INVARIANT = 0, 1, 2, 3


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def worker_count() -> int:
    raw = os.environ.get("SE3D_THREADS", "")
    cap = os.cpu_count() or 1
    if raw:
        try:
            cap = max(1, min(cap, int(raw)))
        except ValueError:
            raise UsageError(f"SE3D_THREADS must be an integer, got {raw!r}") from None
    return cap


def _print_config(name: str, cfg: dict) -> None:
    print(f"# {name} config: " + json.dumps(cfg, sort_keys=True, default=str))


# -- augment ------------------------------------------------------------------------

def _aug_config(a) -> AugConfig:
    return AugConfig(
        p1=a.p1, p2=a.p2, p3=a.p3, sparsify_keep_ratio=a.keep_ratio,
        rot_range=tuple(a.rot_range), trans_range=tuple(a.trans_range), scale_range=tuple(a.scale_range),
        flip_prob=a.flip_prob, seed=a.seed,
    )


def cmd_augment(a) -> int:
    cfg = _aug_config(a)
    log_path = Path(a.log) if a.log else Path(str(a.output) + ".augrec")
    _print_config("augment", {**vars(cfg), "input": a.scene, "output": a.output, "log": str(log_path),
                              "replay": a.replay, "global": a.use_global})
    scene = read_scene(a.scene)
    if a.replay:
        record = AugRecord.from_text(Path(a.replay).read_text())
        out = apply_record(scene, record, cfg.sparsify_keep_ratio)
    else:
        rng = np.random.default_rng(cfg.seed)
        t = draw_transform(cfg, rng) if a.use_global else None
        record = AugRecord(t, draw_shape_aware_ops(scene, cfg, rng))
        out = apply_record(scene, record, cfg.sparsify_keep_ratio)
    Path(a.output).write_text(format_scene(out))
    if not a.replay:
        log_path.write_text(record.to_text())
    print(f"wrote {a.output} ({len(out.points)} points, {len(record.ops)} ops)")
    return EXIT_OK


# -- iou ------------------------------------------------------------------------------

def cmd_iou(a) -> int:
    if len(a.values) != 14:
        raise UsageError(f"iou takes 14 numbers (two boxes of 7), got {len(a.values)}")
    try:
        ba, bb = Box3D.from_array(a.values[:7]), Box3D.from_array(a.values[7:])
    except ValueError as exc:
        raise UsageError(f"invalid box: {exc}") from None
    _print_config("iou", {"gamma": a.gamma, "box_a": list(ba.to_array()), "box_b": list(bb.to_array())})
    inter = convex_intersection(box_corners_bev(ba), box_corners_bev(bb))
    br = odiou_loss(ba, bb, a.gamma)
    rows = [
        ("bev_intersection_area", 0.0 if inter is None else inter.area),
        ("iou_bev", iou_bev(ba, bb)),
        ("iou_3d", iou_3d(ba, bb)),
        ("enclosing_diagonal", enclosing_diagonal(ba, bb)),
        ("odiou_iou_term", br.iou_term),
        ("odiou_center_term", br.center_term),
        ("odiou_orient_term", br.orient_term),
        ("odiou_total", br.total),
    ]
    for name, v in rows:
        print(f"{name:<22} {v:.9f}")
    print("odiou_grad             " + " ".join(f"{g:.9f}" for g in br.grad))
    return EXIT_OK


# -- train ----------------------------------------------------------------------------

TRAIN_KEYS = {
    "mode", "epochs", "pretrain_epochs", "seed", "scenes", "data", "init", "out", "lr", "lr_min",
    "omega1", "omega2", "gamma", "tau_c", "tau_i", "strategy", "ema_decay", "ramp_epochs", "teacher_nms",
    "no_consistency", "no_sada", "no_odiou", "no_global", "p1", "p2", "p3", "keep_ratio", "gamma_sweep",
}


def _train_settings(a) -> dict:
    settings = {}
    if a.config:
        try:
            file_cfg = json.loads(Path(a.config).read_text())
        except json.JSONDecodeError as exc:
            raise DataError(f"{a.config}: invalid JSON: {exc}") from None
        if not isinstance(file_cfg, dict):
            raise UsageError(f"{a.config}: config must be a JSON object")
        unknown = sorted(set(file_cfg) - TRAIN_KEYS)
        if unknown:
            raise UsageError(f"{a.config}: unknown config field(s): {', '.join(unknown)}")
        settings.update(file_cfg)
    for k in TRAIN_KEYS:
        v = getattr(a, k, None)
        if v is not None and v is not False:
            settings[k] = v
    defaults = {
        "mode": "pretrain", "epochs": 20, "pretrain_epochs": 30, "seed": 0, "scenes": 50, "data": None,
        "init": None, "out": "runs/train", "lr": 3e-3, "lr_min": 1e-4, "omega1": 2.0, "omega2": 0.2,
        "gamma": 1.25, "tau_c": 0.3, "tau_i": 0.7, "strategy": "stu_filter", "ema_decay": 0.999,
        "ramp_epochs": 15.0, "teacher_nms": False, "no_consistency": False, "no_sada": False,
        "no_odiou": False, "no_global": False, "p1": 0.25, "p2": 0.05, "p3": 0.10, "keep_ratio": 0.5,
        "gamma_sweep": None,
    }
    for k, v in defaults.items():
        settings.setdefault(k, v)
    if settings["mode"] not in ("pretrain", "sessd"):
        raise UsageError(f"mode: must be 'pretrain' or 'sessd', got {settings['mode']!r}")
    return settings


def _build_train_config(s: dict) -> TrainConfig:
    checks = [
        ("epochs", lambda v: isinstance(v, int) and v >= 0),
        ("pretrain_epochs", lambda v: isinstance(v, int) and v >= 0),
        ("scenes", lambda v: isinstance(v, int) and v >= 1),
    ]
    for key, ok in checks:
        if not ok(s[key]):
            raise UsageError(f"{key}: invalid value {s[key]!r}")
    try:
        return TrainConfig(
            epochs=s["epochs"], lr=float(s["lr"]), lr_min=float(s["lr_min"]), seed=int(s["seed"]),
            weights=LossWeights(float(s["omega1"]), float(s["omega2"]), float(s["gamma"]), 1.0),
            match=MatchConfig(float(s["tau_c"]), float(s["tau_i"]), s["strategy"]),
            aug=AugConfig(p1=float(s["p1"]), p2=float(s["p2"]), p3=float(s["p3"]),
                          sparsify_keep_ratio=float(s["keep_ratio"]), seed=int(s["seed"])),
            box_loss="smooth_l1" if s["no_odiou"] else "odiou",
            global_aug=not s["no_global"],
            shape_aware=not s["no_sada"],
            consistency=not s["no_consistency"],
            ema_decay=float(s["ema_decay"]),
            ramp_epochs=float(s["ramp_epochs"]),
            teacher_nms=bool(s["teacher_nms"]),
        )
    except ValueError as exc:
        raise UsageError(f"config: {exc}") from None


def _load_scenes(s: dict):
    if s["data"]:
        files = sorted(Path(s["data"]).glob("*.scene"))
        if not files:
            raise DataError(f"{s['data']}: no .scene files")
        return [read_scene(f) for f in files]
    return make_dataset(int(s["scenes"]), 1000 + int(s["seed"]))


def _train_once(s: dict, cfg: TrainConfig, scenes, out: Path, quiet: bool = False):
    out.mkdir(parents=True, exist_ok=True)
    spec = ToySpec()
    if s["init"]:
        params, _ = checkpoint.load(s["init"])
        init = ToyDetector(spec, params)
    else:
        init = ToyDetector.create(spec, int(s["seed"]))
    checkpoint.save(out / "init.ckpt", init.params, {"role": "student"})

    def on_epoch(epoch, student, teacher):
        checkpoint.save(out / f"epoch_{epoch + 1:03d}.ckpt", student.params, {"epoch": epoch + 1, "role": "student"})
        if teacher is not None:
            checkpoint.save(out / f"epoch_{epoch + 1:03d}.teacher.ckpt", teacher.params,
                            {"epoch": epoch + 1, "role": "teacher"})

    if s["mode"] == "pretrain":
        res = pretrain(init, scenes, cfg.epochs, cfg, on_epoch=on_epoch)
    else:
        if not s["init"]:
            pre_cfg = replace(cfg, epochs=int(s["pretrain_epochs"]), box_loss="smooth_l1", shape_aware=False)
            init = pretrain(init, scenes, pre_cfg.epochs, pre_cfg).student
            checkpoint.save(out / "pretrained.ckpt", init.params, {"role": "pretrained"})
        res = train_se_ssd(scenes, cfg, init, on_epoch=on_epoch)
    checkpoint.save(out / "final.ckpt", res.student.params, {"role": "student"})
    write_metrics_csv(out / "metrics.csv", res.metrics)
    if not quiet:
        for i, loss in enumerate(res.epoch_losses):
            print(f"epoch {i + 1}: supervised loss {loss:.6f}")
    return res


def cmd_train(a) -> int:
    from .experiments import gamma_values, validation_ap

    s = _train_settings(a)
    cfg = _build_train_config(s)
    resolved = {**s, "train_config": cfg.describe(), "workers": worker_count()}
    _print_config("train", resolved)
    scenes = _load_scenes(s)
    out = Path(s["out"])
    if s["gamma_sweep"]:
        try:
            gammas = gamma_values(s["gamma_sweep"])
        except ValueError as exc:
            raise UsageError(f"gamma_sweep: {exc}") from None
        val = make_dataset(30, 5000 + int(s["seed"]))
        s_sweep = {**s, "mode": "sessd"}
        print(f"{'gamma':>8} {'AP3D_mod_R40':>14}")
        for g in gammas:
            cfg_g = replace(cfg, weights=replace(cfg.weights, gamma=g))
            res = _train_once(s_sweep, cfg_g, scenes, out / f"gamma_{g:g}", quiet=True)
            print(f"{g:>8.2f} {validation_ap(res.student, val):>14.4f}")
        return EXIT_OK
    _train_once(s, cfg, scenes, out)
    print(f"wrote {out / 'final.ckpt'} and {out / 'metrics.csv'}")
    return EXIT_OK


# -- eval -----------------------------------------------------------------------------

def _label_files(root: Path) -> dict[str, Path]:
    base = root / "label_2" if (root / "label_2").is_dir() else root
    return {p.stem: p for p in sorted(base.glob("*.txt"))}


def _calib_for(gt_root: Path, sid: str) -> Calib:
    p = gt_root / "calib" / f"{sid}.txt"
    return read_calib(p) if p.exists() else Calib.canonical()


def cmd_eval(a) -> int:
    pred_root, gt_root = Path(a.pred_dir), Path(a.gt_dir)
    for p in (pred_root, gt_root):
        if not p.is_dir():
            raise DataError(f"{p}: not a directory")
    _print_config("eval", {"pred_dir": str(pred_root), "gt_dir": str(gt_root), "iou_threshold": a.iou,
                           "pr_csv": a.pr_csv, "workers": worker_count()})
    gt_files, pred_files = _label_files(gt_root), _label_files(pred_root)
    if not gt_files:
        raise DataError(f"{gt_root}: no label files")
    missing = sorted(set(gt_files) - set(pred_files))
    extra = sorted(set(pred_files) - set(gt_files))
    if missing:
        print(f"warning: no predictions for scene ids {', '.join(missing)}; treated as empty", file=sys.stderr)
    if extra:
        print(f"warning: predictions without ground truth for scene ids {', '.join(extra)}; ignored",
              file=sys.stderr)
    preds, gts = [], []
    for sid, path in gt_files.items():
        calib = _calib_for(gt_root, sid)
        gts.append(read_labels(path, calib)[0])
        preds.append(read_predictions(pred_files[sid], calib) if sid in pred_files else Detections.empty())
    table = evaluate(preds, gts, a.iou)
    print(table.format())
    if a.pr_csv:
        _, curve = average_precision(preds, gts, EvalConfig(a.iou, 40, "moderate", "threed"))
        write_pr_csv(a.pr_csv, curve)
    return EXIT_OK


# -- ablation -------------------------------------------------------------------------

def _ablation_seed(seed: int):
    from .experiments import run_ablation

    return run_ablation(seeds=(seed,)).aps


def cmd_ablation(a) -> int:
    from .experiments import VARIANTS, ExperimentConfig, ExperimentResult

    seeds = list(range(a.seeds))
    workers = min(worker_count(), len(seeds))
    _print_config("ablation", {"seeds": seeds, "workers": workers, **vars(ExperimentConfig())})
    res = ExperimentResult({v: [] for v in VARIANTS})
    if workers > 1:
        with ProcessPoolExecutor(workers) as ex:
            parts = list(ex.map(_ablation_seed, seeds))
    else:
        parts = [_ablation_seed(s) for s in seeds]
    for p in parts:
        for v in VARIANTS:
            res.aps[v].extend(p[v])
    print(f"{'variant':<16}{'mean AP3D mod R40':>20}")
    for v in VARIANTS:
        print(f"{v:<16}{res.mean(v):>20.4f}")
    return EXIT_OK


# -- parser ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="sessd", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    aug = sub.add_parser("augment", help="shape-aware augmentation of a native scene file")
    aug.add_argument("scene")
    aug.add_argument("-o", "--output", required=True)
    aug.add_argument("--log", help="op log path (default: <output>.augrec)")
    aug.add_argument("--replay", help="replay an op log instead of drawing new ops")
    aug.add_argument("--seed", type=int, default=0)
    aug.add_argument("--p1", type=float, default=0.25, help="dropout probability")
    aug.add_argument("--p2", type=float, default=0.05, help="swap probability")
    aug.add_argument("--p3", type=float, default=0.10, help="sparsify probability")
    aug.add_argument("--keep-ratio", type=float, default=0.5)
    aug.add_argument("--global", dest="use_global", action="store_true", help="also draw a global transform")
    aug.add_argument("--rot-range", type=float, nargs=2, default=(-math.pi / 4, math.pi / 4))
    aug.add_argument("--trans-range", type=float, nargs=3, default=(0.2, 0.2, 0.2))
    aug.add_argument("--scale-range", type=float, nargs=2, default=(0.95, 1.05))
    aug.add_argument("--flip-prob", type=float, default=0.5)
    aug.set_defaults(func=cmd_augment)

    iou = sub.add_parser("iou", help="IoU and ODIoU probe for two boxes")
    iou.add_argument("values", type=float, nargs="*", metavar="V",
                     help="cx cy cz w l h r for box A, then for box B")
    iou.add_argument("--gamma", type=float, default=1.25)
    iou.set_defaults(func=cmd_iou)

    tr = sub.add_parser("train", help="toy pre-training or self-ensembling")
    tr.add_argument("--config", help="JSON file with training settings; flags override it")
    tr.add_argument("--mode", choices=("pretrain", "sessd"))
    tr.add_argument("--epochs", type=int)
    tr.add_argument("--pretrain-epochs", type=int)
    tr.add_argument("--seed", type=int)
    tr.add_argument("--scenes", type=int, help="number of synthetic training scenes")
    tr.add_argument("--data", help="directory of native .scene files instead of synthetic scenes")
    tr.add_argument("--init", help="checkpoint to start from")
    tr.add_argument("--out", help="output directory")
    for name in ("lr", "lr-min", "omega1", "omega2", "gamma", "tau-c", "tau-i", "ema-decay", "ramp-epochs",
                 "p1", "p2", "p3", "keep-ratio"):
        tr.add_argument(f"--{name}", type=float)
    tr.add_argument("--strategy", choices=("stu_filter", "nms_filter", "gt_filter"))
    tr.add_argument("--teacher-nms", action="store_true")
    tr.add_argument("--no-consistency", action="store_true")
    tr.add_argument("--no-sada", action="store_true", help="disable shape-aware augmentation")
    tr.add_argument("--no-odiou", action="store_true", help="Smooth-L1 box loss instead of ODIoU")
    tr.add_argument("--no-global", action="store_true", help="disable global augmentation")
    tr.add_argument("--gamma-sweep", help="start:stop:step, e.g. 0.25:1.75:0.25")
    tr.set_defaults(func=cmd_train)

    ev = sub.add_parser("eval", help="AP table for KITTI-format prediction and label directories")
    ev.add_argument("pred_dir")
    ev.add_argument("gt_dir")
    ev.add_argument("--iou", type=float, default=0.7)
    ev.add_argument("--pr-csv", help="write the moderate 3D R40 PR curve here")
    ev.set_defaults(func=cmd_eval)

    ab = sub.add_parser("ablation", help="synthetic ablation of consistency, shape-aware aug and ODIoU")
    ab.add_argument("--seeds", type=int, default=5)
    ab.set_defaults(func=cmd_ablation)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"sessd: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, SceneFormatError, MalformedBin, MalformedLabel, MissingCalibKey,
            checkpoint.CheckpointError, PointOutsideBox, OSError) as exc:
        print(f"sessd: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (AssertionError, StaleCache, LayoutMismatch, ShapeMismatch, FloatingPointError) as exc:
        print(f"sessd: invariant violation: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    except ValueError as exc:
        print(f"sessd: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
