"""Command-line entry point: synth, train, infer, detect, eval, params."""
import argparse
import json
import os
import sys

from . import __version__, data, detection, evaluation, kernels, network, training


class CliError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(message)


def _positive_int(s):
    v = int(s)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected an integer >= 1, got {s}")
    return v


def _nonneg_int(s):
    v = int(s)
    if v < 0:
        raise argparse.ArgumentTypeError(f"expected an integer >= 0, got {s}")
    return v


def _unit_float(s):
    v = float(s)
    if not 0.0 <= v <= 1.0:
        raise argparse.ArgumentTypeError(f"expected a value in [0, 1], got {s}")
    return v


def _positive_float(s):
    v = float(s)
    if not v > 0:
        raise argparse.ArgumentTypeError(f"expected a positive number, got {s}")
    return v


def _weights(s):
    try:
        w = tuple(float(x) for x in s.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"weights must be three numbers, got {s!r}") from None
    if len(w) != 3 or min(w) <= 0:
        raise argparse.ArgumentTypeError("weights must be three positive numbers "
                                         "(boundary,mango,background)")
    return w


def _bool(s):
    low = str(s).lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {s!r}")


def _add(p, *names, default=None, **kw):
    p.add_argument(*names, default=argparse.SUPPRESS, **kw)
    dest = kw.get("dest") or names[0].lstrip("-").replace("-", "_")
    p._mt_defaults[dest] = default


def _subparser(sub, name, help_text):
    p = sub.add_parser(name, help=help_text, description=help_text)
    p._mt_defaults = {}
    _add(p, "--config", help="key=value file; command-line flags take precedence")
    _add(p, "--seed", type=_nonneg_int, default=0, help="root seed of all random streams")
    _add(p, "--workers", type=_positive_int, default=1,
         help="threads for per-example work (1 is bit-reproducible)")
    return p


def build_parser():
    parser = _Parser(prog="mangotree", description="Tree crown segmentation and counting.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = _subparser(sub, "synth", "render synthetic orchard scenes with ground truth")
    _add(p, "--out", help="output directory")
    _add(p, "--count", type=_positive_int, default=4, help="number of scenes")
    _add(p, "--height", type=_positive_int, default=480)
    _add(p, "--width", type=_positive_int, default=480)
    _add(p, "--crowns", type=_nonneg_int, default=8)
    _add(p, "--overlap-pairs", type=_nonneg_int, default=2)
    _add(p, "--distractors", type=_nonneg_int, default=6)
    _add(p, "--radius-min", type=float, default=18.0)
    _add(p, "--radius-max", type=float, default=30.0)

    p = _subparser(sub, "train", "train a network on a manifest of scenes")
    _add(p, "--manifest", help="manifest written by synth")
    _add(p, "--out", help="output directory")
    _add(p, "--arch", default="mango_tree_net", choices=sorted(network.ARCH_IDS))
    _add(p, "--classes", type=int, default=2, choices=[2, 3])
    _add(p, "--epochs", type=_positive_int, default=200)
    _add(p, "--batch-size", type=_positive_int, default=16)
    _add(p, "--lr", type=_positive_float, default=1e-3)
    _add(p, "--beta1", type=float, default=0.9)
    _add(p, "--beta2", type=float, default=0.999)
    _add(p, "--adam-eps", type=_positive_float, default=1e-8)
    _add(p, "--weights", type=_weights, default=(60.0, 1.0, 1.0),
         help="class weights boundary,mango,background (3-class only)")
    _add(p, "--patch", type=_positive_int, default=240)
    _add(p, "--augment", type=_bool, default=True, help="8-fold rotations/reflections")
    _add(p, "--batchnorm", type=_bool, default=True, help="batch norm in conv blocks")
    _add(p, "--quiet", type=_bool, default=False)

    p = _subparser(sub, "infer", "write the class map and heat map of one image")
    _add(p, "--model")
    _add(p, "--image")
    _add(p, "--out", help="output directory")
    _add(p, "--tau", type=_unit_float, default=detection.TAU)

    p = _subparser(sub, "detect", "detect and box crowns in one image")
    _add(p, "--model")
    _add(p, "--image")
    _add(p, "--out", help="output directory")
    _add(p, "--mode", choices=sorted(detection.MODES), default=None,
         help="defaults to the model's class count")
    _add(p, "--image-id", default=None, help="id written to the CSV (default: file stem)")
    _add(p, "--tau", type=_unit_float, default=detection.TAU)
    _add(p, "--min-size", type=_positive_int, default=detection.MIN_SIZE)

    p = _subparser(sub, "eval", "score detections (boxes) or class maps (pixels)")
    _add(p, "--pred", help="detections CSV, or a class-map PGM with --truth-gt")
    _add(p, "--truth", help="annotation boxes CSV")
    _add(p, "--truth-gt", help="ground-truth PPM for pixel-level scoring")
    _add(p, "--out", help="metrics CSV")
    _add(p, "--iou-min", type=_unit_float, default=0.5)

    p = _subparser(sub, "params", "count trainable parameters")
    _add(p, "--arch", default="mango_tree_net", choices=sorted(network.ARCH_IDS))
    _add(p, "--classes", type=int, default=2, choices=[2, 3])
    return parser


def _read_config(path, sub):
    actions = {a.dest: a for a in sub._actions if a.dest not in ("help", "config")}
    out = {}
    try:
        fh = open(path)
    except OSError as exc:
        raise CliError(f"cannot read config {path}: {exc.strerror}") from None
    with fh:
        text = fh.read()
    if text.lstrip().startswith("{"):
        # a run.json record: replay its settings
        try:
            record = json.loads(text)
        except json.JSONDecodeError as exc:
            raise CliError(f"{path}: invalid run record: {exc}") from None
        items = [(n, k, v) for n, (k, v) in enumerate(record.get("config", {}).items(), 1)
                 if k != "config" and v is not None]
        items = [(n, k, ",".join(map(str, v)) if isinstance(v, list) else str(v))
                 for n, k, v in items]
    else:
        items = []
        for n, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise CliError(f"{path}:{n}: expected key=value")
            key, value = (s.strip() for s in line.split("=", 1))
            items.append((n, key, value))
    for n, key, value in items:
        dest = key.replace("-", "_")
        if dest not in actions:
            raise CliError(f"{path}:{n}: unknown key {key!r}")
        act = actions[dest]
        try:
            v = act.type(value) if act.type else value
        except (argparse.ArgumentTypeError, ValueError) as exc:
            raise CliError(f"{path}:{n}: bad value for {key}: {exc}") from None
        if act.choices is not None and v not in act.choices:
            raise CliError(f"{path}:{n}: {key} must be one of {list(act.choices)}")
        out[dest] = v
    return out


def resolve(argv):
    """Parse argv into (command, settings dict): defaults < config file < flags."""
    parser = build_parser()
    ns = parser.parse_args(argv)
    if ns.command is None:
        raise CliError("missing subcommand (synth, train, infer, detect, eval, params)")
    sub = parser._subparsers._group_actions[0].choices[ns.command]
    settings = dict(sub._mt_defaults)
    flags = {k: v for k, v in vars(ns).items() if k != "command"}
    if flags.get("config"):
        settings.update(_read_config(flags["config"], sub))
    settings.update(flags)
    return ns.command, settings


def _need(cfg, *keys):
    for k in keys:
        if not cfg.get(k):
            raise CliError(f"missing required setting --{k.replace('_', '-')}")


def _need_file(path, what):
    if not os.path.isfile(path):
        raise CliError(f"{what} not found: {path}")


def _write_run_record(out_dir, command, cfg):
    record = {
        "command": command,
        "config": {k: (list(v) if isinstance(v, tuple) else v) for k, v in sorted(cfg.items())},
        "seed": cfg.get("seed"),
        "version": __version__,
        "backend": kernels.BACKEND,
    }
    with open(os.path.join(out_dir, "run.json"), "w") as fh:
        json.dump(record, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _load_model(path):
    _need_file(path, "model file")
    return network.load(path)


def cmd_synth(cfg):
    _need(cfg, "out")
    spec_args = dict(height=cfg["height"], width=cfg["width"], crowns=cfg["crowns"],
                     radius_min=cfg["radius_min"], radius_max=cfg["radius_max"],
                     overlap_pairs=cfg["overlap_pairs"], distractors=cfg["distractors"])
    data.SceneSpec(**spec_args).validate()
    out = cfg["out"]
    os.makedirs(out, exist_ok=True)
    pairs, box_rows = [], []
    for i in range(cfg["count"]):
        spec = data.SceneSpec(seed=training.derive_seed(cfg["seed"], f"synth/{i}"), **spec_args)
        rgb, gt, boxes = data.synth_scene(spec)
        name = f"scene_{i:03d}"
        img_path = os.path.join(out, name + ".ppm")
        gt_path = os.path.join(out, name + "_gt.ppm")
        data.write_netpbm(img_path, rgb)
        data.write_netpbm(gt_path, gt)
        pairs.append((img_path, gt_path))
        box_rows += [(name, b) for b in boxes]
    data.write_manifest(os.path.join(out, "manifest.txt"), pairs)
    data.write_boxes(os.path.join(out, "boxes.csv"), box_rows)
    _write_run_record(out, "synth", cfg)
    print(f"wrote {len(pairs)} scenes and {len(box_rows)} boxes to {out}")


def cmd_train(cfg):
    _need(cfg, "manifest", "out")
    _need_file(cfg["manifest"], "manifest")
    tc = training.TrainConfig(
        batch_size=cfg["batch_size"], epochs=cfg["epochs"], learning_rate=cfg["lr"],
        beta1=cfg["beta1"], beta2=cfg["beta2"], eps=cfg["adam_eps"],
        class_weights=tuple(cfg["weights"]), seed=cfg["seed"], num_classes=cfg["classes"],
        batchnorm=cfg["batchnorm"], workers=cfg["workers"])
    tc.validate()
    spec = network.build(cfg["arch"], cfg["classes"], batchnorm=cfg["batchnorm"])
    if cfg["patch"] % (2 ** spec.pool_count):
        raise CliError(f"--patch must be divisible by {2 ** spec.pool_count}")
    pairs = []
    for img_path, gt_path in data.read_manifest(cfg["manifest"]):
        _need_file(img_path, "image")
        _need_file(gt_path, "ground truth")
        pairs.append((data.read_netpbm(img_path), data.read_netpbm(gt_path)))
    if not pairs:
        raise CliError(f"manifest {cfg['manifest']} lists no scenes")
    patches = data.build_patch_set(pairs, cfg["classes"], cfg["patch"], cfg["augment"])
    model = network.init_params(spec, training.derive_seed(cfg["seed"], "init"))
    out = cfg["out"]
    os.makedirs(out, exist_ok=True)

    def progress(epoch, loss):
        if not cfg["quiet"]:
            print(f"epoch {epoch}/{tc.epochs} loss {loss:.6g}", file=sys.stderr, flush=True)

    model, trace = training.train(model, patches, tc, progress)
    network.save(model, os.path.join(out, "model.bin"))
    trace.to_csv(os.path.join(out, "loss.csv"))
    _write_run_record(out, "train", cfg)
    print(f"trained {cfg['arch']} on {len(patches.images)} patches; "
          f"final loss {trace.values[-1]:.6g}")


def _read_image(path):
    _need_file(path, "image")
    img = data.read_netpbm(path)
    if img.ndim != 3:
        raise CliError(f"{path} is not an RGB (P6) image")
    return img


def cmd_infer(cfg):
    _need(cfg, "model", "image", "out")
    model = _load_model(cfg["model"])
    image = _read_image(cfg["image"])
    mode = "two_class" if model.spec.num_classes == 2 else "three_class"
    class_map, probs = detection.segment(model, image, mode, cfg["tau"], cfg["workers"])
    out = cfg["out"]
    os.makedirs(out, exist_ok=True)
    data.write_netpbm(os.path.join(out, "class_map.pgm"), class_map)
    data.write_netpbm(os.path.join(out, "heat_map.pgm"), detection.heat_map(probs))
    _write_run_record(out, "infer", cfg)
    print(f"wrote class and heat maps to {out}")


def cmd_detect(cfg):
    _need(cfg, "model", "image", "out")
    model = _load_model(cfg["model"])
    image = _read_image(cfg["image"])
    mode = cfg["mode"] or ("two_class" if model.spec.num_classes == 2 else "three_class")
    class_map, _ = detection.segment(model, image, mode, cfg["tau"], cfg["workers"])
    binary = class_map if mode == "two_class" else detection.suppress_boundary(class_map)
    labels, count = detection.connected_components(binary)
    dets = detection.filter_and_boxes(labels, count, cfg["min_size"])
    image_id = cfg["image_id"] or os.path.splitext(os.path.basename(cfg["image"]))[0]
    out = cfg["out"]
    os.makedirs(out, exist_ok=True)
    detection.write_detections(os.path.join(out, "boxes.csv"), [(image_id, dets)])
    data.write_netpbm(os.path.join(out, "annotated.pgm"), detection.annotated_map(binary, dets))
    _write_run_record(out, "detect", cfg)
    print(f"{len(dets)} crowns detected in {image_id}")


def cmd_eval(cfg):
    _need(cfg, "pred", "out")
    _need_file(cfg["pred"], "prediction")
    rows = []
    if cfg.get("truth_gt"):
        _need_file(cfg["truth_gt"], "ground truth")
        pred = data.read_netpbm(cfg["pred"])
        truth, _, _ = data.decode_ground_truth(data.read_netpbm(cfg["truth_gt"]))
        if pred.ndim != 2:
            raise CliError(f"{cfg['pred']} is not a class map (P5)")
        if pred.max(initial=0) > 1:
            pred = detection.suppress_boundary(pred)
        _, m = evaluation.pixel_metrics(pred, truth)
        image_id = os.path.splitext(os.path.basename(cfg["pred"]))[0]
        rows.append((image_id, m))
    else:
        _need(cfg, "truth")
        _need_file(cfg["truth"], "truth boxes")
        pred_boxes = data.read_boxes(cfg["pred"])
        truth_boxes = data.read_boxes(cfg["truth"])
        counts = []
        for image_id in sorted(set(pred_boxes) | set(truth_boxes)):
            c = evaluation.match_detections(pred_boxes.get(image_id, []),
                                            truth_boxes.get(image_id, []), cfg["iou_min"])
            counts.append(c)
            rows.append((image_id, evaluation.metrics(c)))
        if not counts:
            raise CliError("no boxes in either file")
        rows.append(("ALL", evaluation.aggregate(counts)))
    out_dir = os.path.dirname(os.path.abspath(cfg["out"]))
    os.makedirs(out_dir, exist_ok=True)
    evaluation.write_metrics(cfg["out"], rows)
    _write_run_record(out_dir, "eval", cfg)
    m = rows[-1][1]
    print(f"precision {m.precision:.4f} recall {m.recall:.4f} f1 {m.f1:.4f}")


def cmd_params(cfg):
    print(network.count_params(network.build(cfg["arch"], cfg["classes"])))


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "infer": cmd_infer,
            "detect": cmd_detect, "eval": cmd_eval, "params": cmd_params}


def run(argv):
    try:
        command, cfg = resolve(argv)
        COMMANDS[command](cfg)
    except (CliError, ValueError, OSError, RuntimeError, FloatingPointError) as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"mangotree: error: {msg}", file=sys.stderr)
        return 2
    return 0


def main(argv=None):
    sys.exit(run(sys.argv[1:] if argv is None else argv))


if __name__ == "__main__":
    main()
