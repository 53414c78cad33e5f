"""Command line front end.

Subcommands: gen, train, infer, eval, sweep, render.  Every configuration
key doubles as a flag (--train.epochs 10, --model.fusion_mode concat), and
VOXSEG_* environment variables override the config file; see the config
module for the precedence order.  Exit codes: 0 success, 1 usage or
configuration error, 2 data error, 3 numeric or training failure.  Failures
print a single JSON line on stderr.

Thread caps are read from --threads / VOXSEG_THREADS before numpy loads, so
keep this module free of heavyweight imports at the top level.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

_THREAD_VARS = (
    "OMP_NUM_THREADS",
    "OPENBLAS_NUM_THREADS",
    "MKL_NUM_THREADS",
    "NUMEXPR_NUM_THREADS",
)


def _configure_threads(argv) -> None:
    """Apply --threads (or VOXSEG_THREADS) to the BLAS thread caps.  Must run
    before numpy is imported; existing environment settings win."""
    value = os.environ.get("VOXSEG_THREADS")
    for i, arg in enumerate(argv):
        if arg == "--threads" and i + 1 < len(argv):
            value = argv[i + 1]
        elif arg.startswith("--threads="):
            value = arg.split("=", 1)[1]
    if value is None:
        return
    try:
        n = int(value)
    except ValueError:
        return  # the parser reports this properly later
    if n >= 1:
        for var in _THREAD_VARS:
            os.environ.setdefault(var, str(n))


class _Parser(argparse.ArgumentParser):
    """Usage problems raise ConfigError so they exit with code 1, not 2."""

    def error(self, message):
        from .errors import ConfigError

        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    from .config import ENV_PREFIX, config_keys

    common = _Parser(add_help=False, allow_abbrev=False)
    group = common.add_argument_group(
        "configuration overrides",
        f"values are JSON fragments or bare strings; the matching environment "
        f"variable spells dots as double underscores ({ENV_PREFIX}TRAIN__EPOCHS)",
    )
    # SUPPRESS keeps subparser defaults from clobbering flags parsed before
    # the subcommand name (the subparser merges its namespace over ours).
    group.add_argument("--config", metavar="PATH", default=argparse.SUPPRESS,
                       help="JSON configuration file")
    for key in config_keys():
        group.add_argument(f"--{key}", metavar="VALUE", default=argparse.SUPPRESS,
                           help=f"override configuration key '{key}'")

    parser = _Parser(
        prog="voxseg",
        description="Volumetric segmentation with graph reasoning and CRF fusion.",
        parents=[common],
        allow_abbrev=False,
    )
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    p = sub.add_parser("gen", parents=[common], allow_abbrev=False,
                       help="generate a synthetic phantom dataset")
    p.add_argument("out", help="output dataset directory")
    p.add_argument("--count", type=int, default=8, metavar="N",
                   help="number of cases to generate (default 8)")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", parents=[common], allow_abbrev=False,
                       help="train a model on a dataset manifest")
    p.add_argument("data", help="dataset manifest file")
    p.add_argument("out", help="output directory (checkpoint, log.jsonl)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", parents=[common], allow_abbrev=False,
                       help="segment one case with a trained checkpoint")
    p.add_argument("checkpoint", help="checkpoint directory")
    p.add_argument("case", help="case directory")
    p.add_argument("out", help="output directory for labels and probabilities")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", parents=[common], allow_abbrev=False,
                       help="score predicted labels against ground truth")
    p.add_argument("pred", help="directory of predicted case subdirectories")
    p.add_argument("truth", help="directory of ground-truth case subdirectories")
    p.add_argument("out", help="output CSV path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", parents=[common], allow_abbrev=False,
                       help="re-run inference at several fusion iteration counts")
    p.add_argument("data", help="dataset manifest of evaluation cases")
    p.add_argument("checkpoint", help="trained checkpoint directory")
    p.add_argument("out", help="output directory (sweep.csv, trajectories.json)")
    p.add_argument("--iterations", default="1,3,5,7,10", metavar="LIST",
                   help="comma-separated iteration counts (default 1,3,5,7,10)")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("render", parents=[common], allow_abbrev=False,
                       help="write one slice as a netpbm image")
    p.add_argument("input", help="case directory (labels) or .bin volume file")
    p.add_argument("out", help="output image path (.ppm for labels, .pgm otherwise)")
    p.add_argument("--axis", type=int, default=0, choices=(0, 1, 2),
                   help="slice axis (default 0, the depth axis)")
    p.add_argument("--index", type=int, default=None, metavar="N",
                   help="slice index (default: middle slice)")
    p.add_argument("--channel", type=int, default=0, metavar="C",
                   help="channel of a rank-4 probability volume (default 0)")
    p.set_defaults(func=cmd_render)

    return parser


def _resolved_config(ns, default_path=None):
    from .config import config_keys, load_run_config

    values = vars(ns)
    overrides = {key: values[key] for key in config_keys() if key in values}
    path = values.get("config", default_path)
    return load_run_config(path, overrides=overrides)


def _emit(payload: dict) -> None:
    print(json.dumps(payload))


# ----- subcommands -------------------------------------------------------


def cmd_gen(ns) -> int:
    import numpy as np

    from .data import generate_phantom, write_case, write_dataset_manifest
    from .errors import ConfigError

    if ns.count < 1:
        raise ConfigError(f"--count must be positive, got {ns.count}")
    cfg = _resolved_config(ns)
    out = Path(ns.out)
    out.mkdir(parents=True, exist_ok=True)
    names = []
    for i in range(ns.count):
        case_id = f"case{i:03d}"
        rng = np.random.default_rng((cfg.seed, cfg.phantom.seed, i))
        case = generate_phantom(cfg.phantom, rng=rng, case_id=case_id)
        write_case(case, out / case_id)
        names.append(case_id)
    manifest = write_dataset_manifest(names, out / "manifest.txt")
    _emit({"command": "gen", "cases": len(names), "out": str(out),
           "manifest": str(manifest)})
    return 0


def _write_resolved_config(cfg, path: Path) -> None:
    from .config import run_config_to_dict

    path.write_text(json.dumps(run_config_to_dict(cfg), indent=2) + "\n")


def cmd_train(ns) -> int:
    from .data import read_case, read_dataset_manifest
    from .errors import ConfigError
    from .train import train

    cfg = _resolved_config(ns)
    cases = [read_case(p) for p in read_dataset_manifest(ns.data)]
    val_count = cfg.train.val_count
    if val_count >= len(cases):
        raise ConfigError(
            f"val_count {val_count} leaves no training cases (dataset has {len(cases)})"
        )
    train_cases = cases[: len(cases) - val_count]
    val_cases = cases[len(cases) - val_count :]

    out = Path(ns.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_resolved_config(cfg, out / "config.json")
    result = train(train_cases, val_cases, cfg.model, cfg.train,
                   augment_config=cfg.augment, out_dir=out)
    if result.checkpoint_dir is not None and result.checkpoint_dir.is_dir():
        # Make the checkpoint self-describing so infer/sweep need no --config.
        _write_resolved_config(cfg, result.checkpoint_dir / "config.json")
    _emit({
        "command": "train",
        "epochs": cfg.train.epochs,
        "final_loss": result.log[-1]["total_loss"],
        "best_epoch": result.best_epoch,
        "best_dice": result.best_dice,
        "checkpoint": str(result.checkpoint_dir) if result.checkpoint_dir else None,
    })
    return 0


def _load_model(checkpoint: Path, cfg):
    import numpy as np

    from .model import SegmentationModel
    from .tensor import Tape
    from .train import load_checkpoint

    tape = Tape()
    model = SegmentationModel.create(cfg.model, np.random.default_rng(0), tape)
    meta, _ = load_checkpoint(checkpoint, tape)
    return model, meta


def _checkpoint_config(ns, checkpoint: Path):
    from .errors import ConfigError

    stored = checkpoint / "config.json"
    if getattr(ns, "config", None) is None and not stored.is_file():
        raise ConfigError(
            f"{checkpoint}: no config.json beside the checkpoint; pass --config"
        )
    return _resolved_config(ns, default_path=stored if stored.is_file() else None)


def cmd_infer(ns) -> int:
    from .data import read_case
    from .tensor import save_array
    from .train import infer

    checkpoint = Path(ns.checkpoint)
    cfg = _checkpoint_config(ns, checkpoint)
    model, _ = _load_model(checkpoint, cfg)
    case = read_case(ns.case)
    result = infer(model, case)

    out = Path(ns.out)
    out.mkdir(parents=True, exist_ok=True)
    save_array(out / "labels.bin", result.labels.voxels.astype(float), name="labels")
    save_array(out / "probabilities.bin", result.probabilities, name="probabilities")
    meta = {
        "case_id": case.case_id,
        "spacing": list(case.spacing),
        "extents": list(case.extents),
    }
    (out / "meta.json").write_text(json.dumps(meta, indent=2) + "\n")
    _emit({"command": "infer", "case_id": case.case_id, "out": str(out)})
    return 0


def _read_pred_labels(d: Path, spacing):
    """Labels from a prediction directory: either an infer output (labels.bin
    plus meta.json) or a full case directory."""
    from .errors import InputError, ParseError, ShapeError
    from .metrics import LabelVolume
    from .tensor import load_array

    lpath = d / "labels.bin"
    if not lpath.is_file():
        raise ParseError(f"{lpath}: no predicted labels")
    meta = d / "meta.json"
    if meta.is_file():
        try:
            spacing = json.loads(meta.read_text()).get("spacing", spacing)
        except json.JSONDecodeError as e:
            raise ParseError(f"{meta}: invalid JSON ({e})") from e
    arr, _ = load_array(lpath)
    try:
        return LabelVolume(arr, tuple(spacing))
    except (InputError, ShapeError) as e:
        raise ParseError(f"{lpath}: {e}") from e


def cmd_eval(ns) -> int:
    from .data import MANIFEST_FILE, read_case
    from .errors import InputError
    from .metrics import MetricReport, evaluate_case

    pred_dir = Path(ns.pred)
    truth_dir = Path(ns.truth)
    if not truth_dir.is_dir():
        raise InputError(f"{truth_dir}: no such directory")
    case_dirs = sorted(d for d in truth_dir.iterdir() if (d / MANIFEST_FILE).is_file())
    if not case_dirs:
        raise InputError(f"{truth_dir}: contains no case directories")

    report = MetricReport()
    for d in case_dirs:
        truth_case = read_case(d)
        if truth_case.labels is None:
            raise InputError(f"case {truth_case.case_id!r} has no ground-truth labels")
        pred = _read_pred_labels(pred_dir / d.name, truth_case.spacing)
        report.extend(evaluate_case(pred, truth_case.labels, truth_case.case_id))
    report.write_csv(ns.out)
    _emit({"command": "eval", "cases": len(case_dirs), "out": str(ns.out),
           "mean_dice": report.mean_dice()})
    return 0


def cmd_sweep(ns) -> int:
    import dataclasses

    from .data import read_case, read_dataset_manifest
    from .errors import ConfigError
    from .metrics import REGIONS, MetricReport, evaluate_case
    from .train import infer

    checkpoint = Path(ns.checkpoint)
    cfg = _checkpoint_config(ns, checkpoint)
    if cfg.model.fusion_mode != "crf":
        raise ConfigError("sweep requires fusion_mode 'crf', the concat baseline has no iterations")
    try:
        iterations = [int(tok) for tok in str(ns.iterations).split(",") if tok.strip()]
    except ValueError as e:
        raise ConfigError(f"--iterations must be comma-separated integers ({e})") from e
    if not iterations or any(t < 1 for t in iterations):
        raise ConfigError(f"--iterations must be positive integers, got {ns.iterations!r}")

    cases = [read_case(p) for p in read_dataset_manifest(ns.data)]
    for case in cases:
        if case.labels is None:
            raise ConfigError(f"case {case.case_id!r} has no labels to score against")

    out = Path(ns.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    trajectories = []
    for t in iterations:
        cfg_t = dataclasses.replace(cfg.model, crf_iterations=t)
        run_cfg = dataclasses.replace(cfg, model=cfg_t)
        model, _ = _load_model(checkpoint, run_cfg)
        report = MetricReport()
        case_traces = []
        for case in cases:
            result = infer(model, case)
            report.extend(evaluate_case(result.labels, case.labels, case.case_id))
            case_traces.append({
                "case_id": case.case_id,
                "h_c_delta": [r.h_c_delta for r in result.reports],
                "free_energy": [r.free_energy for r in result.reports],
            })
        mean = report.mean_dice()
        rows.append({"iterations": t, **{r: mean[r] for r in REGIONS}})
        trajectories.append({"iterations": t, "cases": case_traces})

    with (out / "sweep.csv").open("w") as f:
        f.write("iterations," + ",".join(f"dice_{r}" for r in REGIONS) + "\n")
        for row in rows:
            f.write(f"{row['iterations']},"
                    + ",".join(f"{row[r]:.9f}" for r in REGIONS) + "\n")
    (out / "trajectories.json").write_text(json.dumps(trajectories, indent=2) + "\n")
    _emit({"command": "sweep", "iterations": iterations, "cases": len(cases),
           "out": str(out), "rows": rows})
    return 0


def cmd_render(ns) -> int:
    import numpy as np

    from .data import read_case
    from .errors import InputError
    from .render import render_labels, render_probability, write_pgm, write_ppm
    from .tensor import load_array

    src = Path(ns.input)
    if src.is_dir():
        case = read_case(src)
        if case.labels is None:
            raise InputError(f"case {case.case_id!r} has no labels to render")
        extent = case.labels.shape[ns.axis]
        index = extent // 2 if ns.index is None else ns.index
        image = render_labels(case.labels, ns.axis, index)
        write_ppm(ns.out, image)
        kind = "labels"
    elif src.is_file():
        arr, _ = load_array(src)
        if arr.ndim == 4:
            if not 0 <= ns.channel < arr.shape[0]:
                raise InputError(
                    f"channel {ns.channel} outside volume with {arr.shape[0]} channels"
                )
            arr = arr[ns.channel]
        if arr.ndim != 3:
            raise InputError(f"{src}: expected a rank-3 or rank-4 volume, got rank {arr.ndim}")
        extent = arr.shape[ns.axis]
        index = extent // 2 if ns.index is None else ns.index
        image = render_probability(np.clip(arr, 0.0, 1.0), ns.axis, index)
        write_pgm(ns.out, image)
        kind = "probability"
    else:
        raise InputError(f"{src}: no such case directory or volume file")
    _emit({"command": "render", "kind": kind, "axis": ns.axis, "index": index,
           "out": str(ns.out), "height": image.shape[0], "width": image.shape[1]})
    return 0


# ----- entry point -------------------------------------------------------


def _fail(code: int, exc: Exception) -> int:
    line = json.dumps({"error": type(exc).__name__, "message": str(exc)})
    print(line, file=sys.stderr)
    return code


def main(argv=None) -> int:
    argv = list(sys.argv[1:]) if argv is None else list(argv)
    _configure_threads(argv)

    from .errors import ConfigError, InputError, ShapeError, VoxsegError

    try:
        parser = build_parser()
        ns = parser.parse_args(argv)
        if getattr(ns, "command", None) is None:
            parser.print_usage(sys.stderr)
            return 1
        return ns.func(ns)
    except SystemExit as e:  # argparse --help
        return int(e.code or 0)
    except ConfigError as e:
        return _fail(1, e)
    except (InputError, ShapeError) as e:
        return _fail(2, e)
    except VoxsegError as e:
        return _fail(3, e)


if __name__ == "__main__":
    sys.exit(main())
