"""Command-line pipeline: simulate -> fuse -> autolabel -> encode -> loss-check / decode-eval -> report.

Stages hand over files inside one output directory:

    simulate     measurements.dgm, truth_cells.dgm, truth_boxes.csv
    fuse         dogma.dgm
    autolabel    labels_static.dgm, labels_boxes.csv, dynamic_score.dgm
    encode       tensors.dgm, tensors.json
    loss-check   loss.json
    decode-eval  detections.csv, pr_curve.csv, roc_curve.csv, metrics.json
    report       report.json

Exit status is 0 on success, 1 for usage errors and 2 for data errors.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np
import yaml
from scipy import ndimage

from . import anchors as anc
from .autolabel import AutolabelConfig, autolabel, ego_align, read_labels, write_boxes_csv, write_labels
from .boxes import ObjectBox
from .grid import (
    GridFormatError, GridRecord, follow_ego, read_grid_file, read_sequence, stack_occupancy,
    write_grid_file, write_sequence,
)
from .loss import LossConfig, gradient_check, total_loss
from .metrics import (
    MetricInputError, box_rmse, evaluate_segmentation, matched_pairs, precision_recall, summary,
    write_curve_csv, write_summary,
)
from .pfilter import FilterConfig, run_filter
from .sim import UNOBSERVABLE, ScenarioError, bundled_scenario_path, ground_truth, load_scenario, measure

log = logging.getLogger("dogmakit")

STAGES = ("simulate", "fuse", "autolabel", "encode", "loss-check", "decode-eval", "report")


class StageError(Exception):
    """A stage could not run on its inputs (exit status 2)."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


# -- configuration ----------------------------------------------------------------

def _load_config(path) -> tuple[dict, Path | None]:
    """Pipeline config mapping and the scenario file it names.

    A file with a top-level ``objects`` list is a scenario file on its own.
    """
    if path is None:
        return {}, bundled_scenario_path("demo")
    path = Path(path)
    if not path.is_file():
        raise StageError(f"config file not found: {path}")
    try:
        cfg = yaml.safe_load(path.read_text()) or {}
    except yaml.YAMLError as exc:
        raise StageError(f"{path}: invalid YAML: {exc}") from exc
    if not isinstance(cfg, dict):
        raise StageError(f"{path}: expected a mapping")
    if "objects" in cfg:
        return {}, path
    scenario = cfg.get("scenario")
    if scenario is None:
        return cfg, bundled_scenario_path("demo")
    sp = Path(scenario)
    if not sp.is_absolute():
        sp = path.parent / sp
    if not sp.exists() and bundled_scenario_path(str(scenario)).exists():
        sp = bundled_scenario_path(str(scenario))
    return cfg, sp


def _section(cfg: dict, name: str) -> dict:
    value = cfg.get(name) or {}
    if not isinstance(value, dict):
        raise StageError(f"config section {name!r} must be a mapping")
    return value


def _build(cls, values: dict, what: str):
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise StageError(f"invalid {what} settings: {exc}") from exc


def _need(path: Path) -> Path:
    if not path.is_file():
        raise StageError(f"missing input {path}")
    return path


def _json(path: Path, data) -> None:
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")


def _read_json(path: Path):
    try:
        return json.loads(_need(path).read_text())
    except json.JSONDecodeError as exc:
        raise StageError(f"{path}: invalid JSON: {exc}") from exc


# -- stages -----------------------------------------------------------------------

def cmd_simulate(args, cfg, scenario_path, out: Path) -> None:
    if scenario_path is None or not Path(scenario_path).is_file():
        raise StageError(f"scenario file not found: {scenario_path}")
    scenario = load_scenario(scenario_path, args.grid_size)
    if args.seed is not None:
        scenario.rng_seed = args.seed
    times = scenario.frame_times()
    poses = [scenario.ego_pose(t) for t in times]
    meas, cells, rows = [], [], []
    for k, t in enumerate(times):
        m = measure(scenario, t)
        gt = ground_truth(scenario, t)
        meas.append(GridRecord(float(t), poses[k], m.astype(np.float32)))
        cells.append(GridRecord(float(t), poses[k], gt.cell_mask[..., None].astype(np.float32)))
        rows.extend((k, oid, b, dyn) for b, dyn, oid in zip(gt.boxes, gt.dynamic, gt.object_ids))
    geometry = scenario.frame_geometry(times[0])
    write_grid_file(out / "measurements.dgm", geometry, meas, 2)
    write_grid_file(out / "truth_cells.dgm", geometry, cells, 1)
    with open(out / "truth_boxes.csv", "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["frame", "object_id", "east", "north", "width", "length", "orientation", "dynamic"])
        for k, oid, b, dyn in rows:
            wr.writerow([k, oid, repr(b.center_east), repr(b.center_north), repr(b.width), repr(b.length),
                         repr(b.orientation), int(dyn)])
    log.info("simulated %d frames of a %dx%d grid", len(times), *geometry.shape[::-1])


def cmd_fuse(args, cfg, scenario_path, out: Path) -> None:
    gf = read_grid_file(_need(out / "measurements.dgm"))
    if gf.channel_count != 2:
        raise StageError(f"{out / 'measurements.dgm'}: expected 2 channels, found {gf.channel_count}")
    if not gf.records:
        raise StageError("measurement file holds no frames")
    fcfg = dict(_section(cfg, "filter"))
    if args.seed is not None:
        fcfg["rng_seed"] = args.seed
    config = _build(FilterConfig, fcfg, "filter")
    pose0 = gf.records[0].ego_pose
    geometries = [follow_ego(gf.geometry, pose0, r.ego_pose) for r in gf.records]
    frames = run_filter([r.data.astype(np.float64) for r in gf.records], geometries,
                        [r.timestamp for r in gf.records], config, [r.ego_pose for r in gf.records])
    write_sequence(frames, out / "dogma.dgm")
    log.info("fused %d frames", len(frames))


def cmd_autolabel(args, cfg, scenario_path, out: Path) -> None:
    frames = read_sequence(_need(out / "dogma.dgm"))
    if len(frames) < 3:
        raise StageError("autolabel needs at least 3 frames")
    res = autolabel(frames, _build(AutolabelConfig, _section(cfg, "autolabel"), "autolabel"))
    geometry = res.frames[0].geometry
    poses = [f.ego_pose for f in res.frames]
    write_labels(res.labels, geometry, out / "labels_static.dgm", out / "labels_boxes.csv", poses)
    cls = res.classification
    records = [GridRecord(f.timestamp, f.ego_pose,
                          np.stack([cls.score[k], cls.dynamic[k]], axis=-1).astype(np.float32))
               for k, f in enumerate(res.frames)]
    write_grid_file(out / "dynamic_score.dgm", geometry, records, 2)
    valid = sum(t.valid for t in res.tracks)
    log.info("labelled %d frames: %d tracks, %d valid", len(frames), len(res.tracks), valid)


def _anchors(cfg) -> anc.AnchorSet:
    try:
        return anc.anchors_from_dict(_section(cfg, "anchors"))
    except (TypeError, ValueError) as exc:
        raise StageError(f"invalid anchor settings: {exc}") from exc


def cmd_encode(args, cfg, scenario_path, out: Path) -> None:
    geometry, labels = read_labels(_need(out / "labels_static.dgm"), _need(out / "labels_boxes.csv"))
    anchors = _anchors(cfg)
    every = int(_section(cfg, "encode").get("every", 10))
    if every < 1:
        raise StageError("encode.every must be >= 1")
    static_file = read_grid_file(out / "labels_static.dgm")
    picked = list(range(0, len(labels), every))
    tensors, dropped = [], 0
    for k in picked:
        lab = labels[k]
        boxes = [b for b in lab.boxes if anc.inside_grid(b, geometry)]
        dropped += len(lab.boxes) - len(boxes)
        tensors.append(anc.encode(boxes, geometry, anchors, lab.static_map))
    if dropped:
        log.warning("skipped %d boxes reaching past the grid edge", dropped)
    anc.write_label_tensors(out / "tensors.dgm", tensors, geometry, anchors,
                            [labels[k].timestamp for k in picked],
                            [static_file.records[k].ego_pose for k in picked])
    _json(out / "tensors.json", {"frames": picked, "sizes": [list(s) for s in anchors.sizes],
                                 "orientations": list(anchors.orientations)})
    log.info("encoded %d of %d frames (%d channels)", len(picked), len(labels), anchors.channel_count)


def _read_tensors(out: Path, name: str = "tensors"):
    meta = _read_json(out / f"{name}.json")
    anchors = anc.AnchorSet(tuple(tuple(s) for s in meta["sizes"]), tuple(meta["orientations"]))
    geometry, tensors, _, _ = anc.read_label_tensors(_need(out / f"{name}.dgm"), anchors)
    return meta, anchors, geometry, tensors


def _predictions(labels, rng, sigma: float):
    """Stand-in network outputs: labels with seeded Gaussian noise."""
    noisy = []
    for lab in labels:
        heads = {h: np.asarray(getattr(lab, h)) for h in anc.LabelTensors.HEADS}
        noisy.append(anc.LabelTensors(**{h: v + rng.normal(0.0, sigma, v.shape) for h, v in heads.items()}))
    return noisy


def cmd_loss_check(args, cfg, scenario_path, out: Path) -> None:
    meta, anchors, geometry, labels = _read_tensors(out)
    lcfg = dict(_section(cfg, "loss"))
    sigma = float(lcfg.pop("prediction_noise", 0.05))
    samples = int(lcfg.pop("gradient_samples", 20))
    config = _build(LossConfig, lcfg, "loss")
    seed = args.seed if args.seed is not None else 0
    rng = np.random.default_rng(seed)
    preds = _predictions(labels, rng, sigma)
    frames, worst = [], 0.0
    for k, (p, y) in enumerate(zip(preds, labels)):
        a_map = anc.weight_map(y)
        value, terms = total_loss(p, y, a_map, config)
        check = gradient_check(p, y, a_map, config, samples=samples, rng=np.random.default_rng([seed, k]))
        worst = max(worst, max(check.values()))
        frames.append({"frame": meta["frames"][k], "loss": value, "terms": terms, "gradient_rel_error": check})
    report = {"config": asdict(config), "prediction_noise": sigma, "frames": frames,
              "total": float(sum(f["loss"] for f in frames)), "gradient_max_rel_error": worst,
              "gradient_ok": worst < 1e-4}
    _json(out / "loss.json", report)
    log.info("loss over %d frames: %.6g, worst gradient error %.2e", len(frames), report["total"], worst)


def _truth_boxes(path: Path) -> dict[int, list[ObjectBox]]:
    boxes: dict[int, list[ObjectBox]] = {}
    with open(_need(path), newline="") as fh:
        for r in csv.DictReader(fh):
            if int(r["dynamic"]):
                boxes.setdefault(int(r["frame"]), []).append(ObjectBox(
                    float(r["east"]), float(r["north"]), float(r["width"]), float(r["length"]),
                    float(r["orientation"])))
    return boxes


def _aligned_truth_codes(gf, ref_geometry) -> np.ndarray:
    """Ground-truth cell codes resampled into the frame-0 grid (nearest cell)."""
    pose0 = gf.records[0].ego_pose
    cs = ref_geometry.cell_size
    out = []
    for r in gf.records:
        codes = r.data[..., 0]
        de = (r.ego_pose[0] - pose0[0]) / cs
        dn = (r.ego_pose[1] - pose0[1]) / cs
        if de or dn:
            codes = ndimage.shift(codes, (dn, de), order=0, mode="constant", cval=UNOBSERVABLE)
        out.append(codes)
    return np.stack(out).astype(np.int8)


def cmd_decode_eval(args, cfg, scenario_path, out: Path) -> None:
    ecfg = _section(cfg, "eval")
    source = str(ecfg.get("tensors", "tensors"))
    meta, anchors, geometry, tensors = _read_tensors(out, source)
    threshold = float(ecfg.get("score_threshold", 0.5))
    nms_iou = float(ecfg.get("nms_iou", 0.3))
    iou_min = float(ecfg.get("iou_min", 0.5))
    truth = _truth_boxes(out / "truth_boxes.csv")
    dets, gts, rows = [], [], []
    for k, t in zip(meta["frames"], tensors):
        d = anc.decode(t, geometry, anchors, threshold, nms_iou)
        dets.append(d)
        gts.append([b for b in truth.get(k, []) if anc.inside_grid(b, geometry)])
        rows.extend((k, i, b) for i, b in enumerate(d))
    write_boxes_csv(out / "detections.csv", rows)
    ap, errors = None, None
    try:
        curve, ap = precision_recall(dets, gts)
        write_curve_csv(out / "pr_curve.csv", curve, "recall", "precision")
        pairs = matched_pairs(dets, gts, iou_min)
        errors = box_rmse(pairs) if pairs else None
    except MetricInputError as exc:
        log.warning("detection metrics skipped: %s", exc)
    auc, seg = None, None
    score_file = out / "dynamic_score.dgm"
    if score_file.is_file():
        sf = read_grid_file(score_file)
        frames = read_sequence(_need(out / "dogma.dgm"))
        codes = _aligned_truth_codes(read_grid_file(_need(out / "truth_cells.dgm")), sf.geometry)
        p_o = stack_occupancy(ego_align(frames))
        score = np.stack([r.data[..., 0] for r in sf.records])
        dynamic = np.stack([r.data[..., 1] for r in sf.records]) > 0.5
        try:
            seg = evaluate_segmentation(score, dynamic, codes, p_o)
            auc = seg["auc"]
            write_curve_csv(out / "roc_curve.csv", seg["curve"], "fpr", "tpr")
        except MetricInputError as exc:
            log.warning("segmentation metrics skipped: %s", exc)
    result = summary(auc, ap, errors)
    if seg is not None:
        result["balanced_accuracy"] = seg["balanced_accuracy"]
        result["segmentation_cells"] = seg["cells"]
    result["frames"] = len(tensors)
    result["detections"] = len(rows)
    result["ground_truths"] = sum(len(g) for g in gts)
    write_summary(out / "metrics.json", result)
    log.info("decoded %d detections; AP %s, AUC %s", len(rows), ap, auc)


def cmd_report(args, cfg, scenario_path, out: Path) -> None:
    metrics = _read_json(out / "metrics.json")
    loss_path = out / "loss.json"
    loss = _read_json(loss_path) if loss_path.is_file() else None
    report = {"metrics": metrics}
    if loss is not None:
        report["loss"] = {"total": loss["total"], "gradient_max_rel_error": loss["gradient_max_rel_error"],
                          "gradient_ok": loss["gradient_ok"]}
    _json(out / "report.json", report)
    if not args.quiet:
        def fmt(v):
            return "n/a" if v is None else f"{v:.4f}"
        print(f"segmentation AUC      {fmt(metrics.get('auc'))}")
        print(f"balanced accuracy     {fmt(metrics.get('balanced_accuracy'))}")
        print(f"average precision     {fmt(metrics.get('ap'))}")
        print(f"RMSE width / length   {fmt(metrics.get('rmse_width'))} / {fmt(metrics.get('rmse_length'))} m")
        print(f"RMSE position         {fmt(metrics.get('rmse_position'))} m")
        print(f"RMSE orientation      {fmt(metrics.get('rmse_orientation_deg'))} deg")
        if loss is not None:
            print(f"loss (noisy labels)   {loss['total']:.6g}")
            print(f"gradient check        {'ok' if loss['gradient_ok'] else 'FAILED'} "
                  f"(max rel. error {loss['gradient_max_rel_error']:.2e})")


COMMANDS = {
    "simulate": cmd_simulate, "fuse": cmd_fuse, "autolabel": cmd_autolabel, "encode": cmd_encode,
    "loss-check": cmd_loss_check, "decode-eval": cmd_decode_eval, "report": cmd_report,
}

HELP = {
    "simulate": "simulate lidar scans, measurement grids and ground truth",
    "fuse": "run the particle filter to produce DOGMa frames",
    "autolabel": "generate static maps and box labels from the DOGMa sequence",
    "encode": "encode labels into anchor tensors (every Nth frame)",
    "loss-check": "evaluate the loss on noisy predictions and check its gradients",
    "decode-eval": "decode tensors and compute ROC, precision/recall and RMSE",
    "report": "combine metrics and loss check into one summary",
}


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="pipeline config or scenario YAML (default: bundled demo)")
    common.add_argument("--seed", type=int, metavar="N", help="override the random seed of the stage")
    common.add_argument("--out", metavar="DIR", default="out", help="directory for stage inputs and outputs")
    common.add_argument("--grid-size", type=int, metavar="N", help="square grid size in cells (simulate)")
    common.add_argument("--quiet", action="store_true", help="only report warnings and errors")
    parser = _Parser(prog="dogmakit", description="Dynamic occupancy grid labelling and evaluation pipeline.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True
    for name in STAGES:
        sub.add_parser(name, parents=[common], help=HELP[name], description=HELP[name])
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.grid_size is not None and args.grid_size < 3:
        parser.print_usage(sys.stderr)
        print("dogmakit: error: --grid-size must be at least 3", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(name)s: %(message)s", stream=sys.stderr, force=True)
    out = Path(args.out)
    try:
        cfg, scenario_path = _load_config(args.config)
        out.mkdir(parents=True, exist_ok=True)
        COMMANDS[args.command](args, cfg, scenario_path, out)
    except (StageError, GridFormatError, ScenarioError, anc.TensorShapeError, ValueError, KeyError,
            OSError) as exc:
        print(f"dogmakit {args.command}: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
