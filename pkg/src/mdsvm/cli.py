"""Command-line entry point: ``mdsvm synth | train | segment | eval | verify``.

Exit codes: 0 success, 1 verification failure, 2 usage or input error,
3 numerical abort, 4 undefined metric.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import metrics, verify
from .formats import FormatError, Volume, read_checkpoint, read_volume, write_volume
from .network import PAPER_LADDER, NetworkConfig, build
from .pipeline import PipelineConfig, two_stage_infer
from .synth import SynthError, SynthSpec, synth_generate
from .tensor import ContractError
from .train import NumericalAbort, TrainConfig, format_trace, stage1_dataset, stage2_dataset, train_stage

EXIT_OK, EXIT_VERIFY, EXIT_USAGE, EXIT_NUMERIC, EXIT_METRIC = 0, 1, 2, 3, 4

log = logging.getLogger("mdsvm")


class UsageError(Exception):
    pass


def worker_count() -> int:
    cap = os.environ.get("MDSVM_THREADS")
    cores = os.cpu_count() or 1
    if cap is None:
        return cores
    try:
        return max(1, min(cores, int(cap)))
    except ValueError:
        raise UsageError(f"MDSVM_THREADS must be an integer, got {cap!r}") from None


def _map(fn, items):
    n = worker_count()
    if n <= 1 or len(items) <= 1:
        return [fn(i) for i in items]
    with ProcessPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# -- config files ----------------------------------------------------------------

def read_config(path) -> dict[str, str]:
    """Flat ``key = value`` lines; ``#`` starts a comment.  Keys use flag names."""
    out = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def _subparser(parser: argparse.ArgumentParser, command: str) -> argparse.ArgumentParser:
    return parser._subparsers._group_actions[0].choices[command]  # noqa: SLF001


def _apply_config(parser: argparse.ArgumentParser, args: argparse.Namespace, argv) -> argparse.Namespace:
    path = getattr(args, "config", None)
    if not path:
        return args
    if not Path(path).is_file():
        raise UsageError(f"config file not found: {path}")
    sub = _subparser(parser, args.command)
    known = {a.dest: a for a in sub._actions}  # noqa: SLF001
    defaults = {}
    for key, value in read_config(path).items():
        if key not in known or key in ("config", "help"):
            raise UsageError(f"unknown config key {key!r}")
        action = known[key]
        if action.nargs in ("+", "*") or isinstance(action.nargs, int):
            items = value.split()
            defaults[key] = [action.type(v) if action.type else v for v in items]
        elif isinstance(action, argparse._StoreTrueAction):  # noqa: SLF001
            defaults[key] = value.lower() in ("1", "true", "yes", "on")
        else:
            defaults[key] = action.type(value) if action.type else value
    sub.set_defaults(**defaults)
    return parser.parse_args(argv)


# -- manifest ------------------------------------------------------------------------

class Manifest:
    def __init__(self, command: str, args: argparse.Namespace, path: Path | None):
        self.path = path
        self.data = {
            "command": command,
            "config": {k: v for k, v in vars(args).items() if k not in ("func",)},
            "seed": getattr(args, "seed", None),
            "start": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
            "outputs": [],
            "hashes": {},
        }

    def add_output(self, path) -> None:
        p = str(path)
        self.data["outputs"].append(p)
        if Path(p).is_file():
            self.data["hashes"][p] = _sha256(p)

    def write(self, code: int, message: str = "") -> None:
        if self.path is None:
            return
        self.data.update(end=time.strftime("%Y-%m-%dT%H:%M:%S%z"), exit_code=code, message=message)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.path.write_text(json.dumps(self.data, indent=2, sort_keys=True, default=str) + "\n")


# -- commands ----------------------------------------------------------------------

def _synth_one(job):
    spec, out, idx = job
    img, lbl = synth_generate(spec)
    paths = [out / f"case_{idx:04d}.img.mdsv", out / f"case_{idx:04d}.lbl.mdsv"]
    write_volume(paths[0], img)
    write_volume(paths[1], lbl)
    return paths


def cmd_synth(args, manifest: Manifest) -> int:
    if len(args.shape) != 3 or min(args.shape) < 8:
        raise UsageError(f"--shape needs three extents >= 8, got {args.shape}")
    if args.count < 1:
        raise UsageError("--count must be positive")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    jobs = [(SynthSpec(seed=args.seed * 100003 + i, shape=tuple(args.shape), tubes=args.tubes,
                       branch_depth=args.branch_depth, noise=args.noise), out, i) for i in range(args.count)]
    for paths in _map(_synth_one, jobs):
        for p in paths:
            manifest.add_output(p)
    print(f"wrote {2 * args.count} volumes to {out}")
    return EXIT_OK


def _load_cases(data_dir: Path):
    if not data_dir.is_dir():
        raise UsageError(f"data directory not found: {data_dir}")
    cases = []
    for img_path in sorted(data_dir.glob("*.img.mdsv")):
        lbl_path = img_path.with_name(img_path.name.replace(".img.mdsv", ".lbl.mdsv"))
        if not lbl_path.is_file():
            raise UsageError(f"missing label for {img_path.name}")
        cases.append((read_volume(img_path), read_volume(lbl_path)))
    if not cases:
        raise UsageError(f"no *.img.mdsv cases in {data_dir}")
    return cases


def _network_config(args) -> NetworkConfig:
    return NetworkConfig(ladder=tuple(args.ladder), c_max=args.c_max, state_dim=args.state_dim,
                         dense_layers=args.dense_layers, head=args.head)


def load_network(path):
    try:
        records, meta = read_checkpoint(path)
    except FileNotFoundError:
        raise UsageError(f"checkpoint not found: {path}") from None
    if "network" not in meta:
        raise FormatError(f"checkpoint {path} carries no network configuration")
    net = build(NetworkConfig.from_dict(meta["network"]), 0)
    net.load_state(records)
    return net, meta


def cmd_train(args, manifest: Manifest) -> int:
    cases = _load_cases(Path(args.data))
    defaults = TrainConfig.for_stage(args.stage)
    epochs = args.epochs if args.epochs is not None else defaults.epochs
    if args.milestones is not None:
        milestones = tuple(args.milestones)
    else:
        # default decay points that fall outside a shortened run are dropped
        milestones = tuple(m for m in defaults.milestones if m < epochs)
    config = TrainConfig(stage=args.stage, epochs=epochs, lr=args.lr if args.lr is not None else defaults.lr,
                         milestones=milestones, batch_size=args.batch_size, seed=args.seed, loss=args.loss)
    pipe = PipelineConfig(tuple(args.coarse_shape), args.block_side)
    if args.stage == 1:
        dataset = stage1_dataset(cases, pipe.coarse_shape)
    else:
        net1 = None
        if args.guidance == "coarse":
            if not args.model1:
                raise UsageError("stage 2 with coarse guidance needs --model1")
            net1, _ = load_network(args.model1)
        dataset = stage2_dataset(cases, pipe, net1, args.guidance, seed=args.seed)
    net = build(_network_config(args), args.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    meta = {"stage": args.stage, "coarse_shape": list(pipe.coarse_shape), "block_side": pipe.block_side}
    result = train_stage(dataset, config, net, checkpoint=out, checkpoint_meta=meta)
    trace = out.with_suffix(out.suffix + ".trace.tsv")
    trace.write_text(format_trace(result.trace))
    for p in result.checkpoints + [str(trace)]:
        manifest.add_output(p)
    manifest.data["train_config"] = config.to_dict()
    last = result.trace[-1]
    print(f"stage {args.stage}: {len(result.trace)} epochs, final loss {last.loss:.4f}, checkpoint {out}")
    return EXIT_OK


def export_slices(label: np.ndarray, directory: Path) -> list[Path]:
    """One binary PGM (P5) image per axial slice (last axis)."""
    directory.mkdir(parents=True, exist_ok=True)
    H, W, D = label.shape
    paths = []
    for d in range(D):
        img = (label[:, :, d] > 0).astype(np.uint8) * 255
        p = directory / f"slice_{d:04d}.pgm"
        p.write_bytes(f"P5\n{W} {H}\n255\n".encode("ascii") + img.tobytes())
        paths.append(p)
    return paths


def cmd_segment(args, manifest: Manifest) -> int:
    net1, meta1 = load_network(args.model1)
    net2, meta2 = load_network(args.model2)
    coarse = tuple(args.coarse_shape or meta1.get("coarse_shape") or PipelineConfig.coarse_shape)
    side = args.block_side or meta2.get("block_side") or PipelineConfig.block_side
    try:
        vol = read_volume(args.input)
    except FileNotFoundError:
        raise UsageError(f"input volume not found: {args.input}") from None
    pred = two_stage_infer(vol, net1, net2, PipelineConfig(coarse, int(side)))
    write_volume(args.output, Volume(pred.astype(np.uint8), vol.spacing))
    manifest.add_output(args.output)
    if args.export_slices:
        for p in export_slices(pred, Path(args.export_slices)):
            manifest.add_output(p)
    print(f"wrote {args.output}: {int(pred.sum())} foreground voxels")
    return EXIT_OK


def _eval_pair(pair):
    pred_path, gt_path = pair
    pred, gt = read_volume(pred_path), read_volume(gt_path)
    if pred.shape != gt.shape:
        raise UsageError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    if not gt.data.any():
        return None, "ground truth is empty"
    if not pred.data.any():
        return None, "prediction is empty"
    spacing = gt.known_spacing
    p = Volume(pred.data, spacing or (0, 0, 0))
    g = Volume(gt.data, spacing or (0, 0, 0))
    return metrics.surface_metrics(p, g), ""


def _case_id(path: Path) -> str:
    return path.name.split(".", 1)[0]


def cmd_eval(args, manifest: Manifest) -> int:
    pred, gt = Path(args.pred), Path(args.gt)
    if pred.is_dir() != gt.is_dir():
        raise UsageError("--pred and --gt must both be files or both be directories")
    if pred.is_dir():
        gts = {_case_id(p): p for p in sorted(gt.glob("*.lbl.mdsv"))}
        preds = {_case_id(p): p for p in sorted(pred.glob("*.mdsv"))}
        ids = sorted(set(gts) & set(preds))
        if not ids:
            raise UsageError("no matching case ids between --pred and --gt")
        pairs = [(preds[i], gts[i]) for i in ids]
    else:
        for p in (pred, gt):
            if not p.is_file():
                raise UsageError(f"volume not found: {p}")
        ids, pairs = None, [(pred, gt)]
    unit = "mm" if read_volume(pairs[0][1]).known_spacing else "voxels"
    results = _map(_eval_pair, pairs)
    undefined = [(i, msg) for i, (vals, msg) in zip(ids or ["case"], results) if vals is None]
    print(f"# units: {unit}")
    if ids is None:
        vals, msg = results[0]
        if vals is None:
            print(f"undefined metric: {msg}; HD and AHD are undefined for an empty mask", file=sys.stderr)
            return EXIT_METRIC
        print(metrics.format_case_line(*vals))
        manifest.data["metrics"] = dict(zip(("DSC", "HD", "AHD"), vals))
        return EXIT_OK
    rows = [(i, *vals) for i, (vals, _) in zip(ids, results) if vals is not None]
    print(metrics.format_report(rows))
    manifest.data["metrics"] = {r[0]: r[1:] for r in rows}
    for i, msg in undefined:
        print(f"undefined metric for {i}: {msg}", file=sys.stderr)
    return EXIT_METRIC if undefined else EXIT_OK


def cmd_verify(args, manifest: Manifest) -> int:
    results = verify.run(args.suite)
    print(verify.format_table(results))
    failed = sum(1 for _, ok, _ in results if not ok)
    print(f"{len(results) - failed}/{len(results)} checks passed")
    manifest.data["results"] = [{"name": n, "passed": bool(ok), "detail": d} for n, ok, d in results]
    return EXIT_OK if failed == 0 else EXIT_VERIFY


# -- parser ------------------------------------------------------------------------

def _add_network_flags(p):
    p.add_argument("--ladder", type=int, nargs="+", default=list(PAPER_LADDER), help="channel ladder")
    p.add_argument("--c-max", dest="c_max", type=int, default=4)
    p.add_argument("--state-dim", dest="state_dim", type=int, default=16)
    p.add_argument("--dense-layers", dest="dense_layers", type=int, default=6)
    p.add_argument("--head", choices=("upsample", "transpose"), default="upsample")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mdsvm", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate synthetic tube volumes")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--shape", type=int, nargs="+", default=[64, 64, 32], metavar="N")
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--tubes", type=int, default=2)
    p.add_argument("--branch-depth", dest="branch_depth", type=int, default=1)
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--manifest")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a stage-1 or stage-2 network")
    p.add_argument("--stage", type=int, choices=(1, 2), default=1)
    p.add_argument("--data", required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--milestones", type=int, nargs="*")
    p.add_argument("--batch-size", dest="batch_size", type=int, default=1)
    p.add_argument("--loss", choices=("dice", "focal"), default="dice")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--coarse-shape", dest="coarse_shape", type=int, nargs=3, default=[128, 128, 64])
    p.add_argument("--block-side", dest="block_side", type=int, default=64)
    p.add_argument("--guidance", choices=("coarse", "gt"), default="coarse")
    p.add_argument("--model1", help="stage-1 checkpoint (stage 2 with coarse guidance)")
    _add_network_flags(p)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--manifest")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("segment", help="two-stage inference on one volume")
    p.add_argument("--model1", required=True)
    p.add_argument("--model2", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--export-slices", dest="export_slices")
    p.add_argument("--coarse-shape", dest="coarse_shape", type=int, nargs=3)
    p.add_argument("--block-side", dest="block_side", type=int)
    p.add_argument("--config")
    p.add_argument("--manifest")
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("eval", help="Dice / Hausdorff / average Hausdorff report")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--config")
    p.add_argument("--manifest")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("verify", help="run self-check suites")
    p.add_argument("--suite", choices=("gradcheck", "oracle", "pipeline", "all"), default="all")
    p.add_argument("--config")
    p.add_argument("--manifest")
    p.set_defaults(func=cmd_verify)
    return parser


def _manifest_path(args) -> Path | None:
    if args.manifest:
        return Path(args.manifest)
    if args.command == "synth":
        return Path(args.out) / "manifest.json"
    if args.command == "train":
        return Path(args.out + ".manifest.json")
    if args.command == "segment":
        return Path(args.output + ".manifest.json")
    return None


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        args = _apply_config(parser, args, argv)
    except UsageError as exc:
        print(f"mdsvm: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    manifest = Manifest(args.command, args, _manifest_path(args))
    code, message = EXIT_USAGE, ""
    try:
        code = args.func(args, manifest)
    except UsageError as exc:
        message = str(exc)
        _subparser(parser, args.command).print_usage(sys.stderr)
        print(f"mdsvm: error: {exc}", file=sys.stderr)
        code = EXIT_USAGE
    except NumericalAbort as exc:
        message = str(exc)
        print(f"mdsvm: numerical abort: {exc}", file=sys.stderr)
        code = EXIT_NUMERIC
    except metrics.UndefinedMetricError as exc:
        message = str(exc)
        print(f"mdsvm: undefined metric: {exc}", file=sys.stderr)
        code = EXIT_METRIC
    except (FormatError, SynthError, ContractError, OSError) as exc:
        message = str(exc)
        print(f"mdsvm: error: {exc}", file=sys.stderr)
        code = EXIT_USAGE
    finally:
        manifest.write(code, message)
    return code


if __name__ == "__main__":
    sys.exit(main())
