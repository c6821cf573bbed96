"""Command-line interface.

Every command resolves its arguments into a plain JSON configuration, writes
it to ``run.json`` in the output directory and then executes it.
``masflow rerun DIR/run.json`` replays that configuration, reproducing the
volume outputs and reports byte for byte.

Exit codes: 0 success, 1 usage error, 2 invalid input, 3 solver
non-convergence (only with ``--strict``).  Errors are reported on stderr as
one JSON object.
"""
from __future__ import annotations

import argparse
import json
import platform
import sys
import warnings
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .annotations import (
    LabelVolume,
    SlicewiseConfig,
    coverage,
    random_offset,
    slice_period,
    subsample_slicewise,
    synthetic_scribbles,
    validate_annotation,
)
from .evaluation import (
    ExperimentSpec,
    GridSearchSpec,
    dice_report,
    grid_search,
    run_experiment,
    stream_seed,
    write_csv,
)
from .io import VolumeFileError, ManifestError, dump_json, read_dataset, read_volume, write_dataset, write_volume
from .phantoms import make_phantoms
from .solver import ConvergenceWarning
from .volume import Volume
from .weighting import select_atlases

EXIT_OK, EXIT_USAGE, EXIT_INVALID, EXIT_NOT_CONVERGED = 0, 1, 2, 3


class UsageError(Exception):
    pass


class NotConverged(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _abs(path) -> str | None:
    return None if path is None else str(Path(path).resolve())


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _overrides(pairs) -> dict:
    out = {}
    for item in pairs or []:
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        out[key] = _parse_value(value)
    return out


def _read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise ValueError(f"file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}: invalid JSON ({exc})") from exc


# ---------------------------------------------------------------- resolution

def _resolve_make_phantoms(a) -> dict:
    return {"count": a.count, "shape": list(a.shape), "noise": a.noise, "deform": a.deform,
            "seed": a.seed, "mode": a.mode, "spacing": list(a.spacing)}


def _resolve_simulate(a) -> dict:
    if a.mode == "slicewise":
        if a.q is None:
            raise UsageError("slicewise mode needs --q")
        period = slice_period(a.q)
        offset = a.offset
        if offset is None:
            offset = random_offset(period, stream_seed(a.seed, "offsets"))
        return {"labels": _abs(a.labels), "mode": "slicewise", "q": a.q, "axis": a.axis,
                "offset": int(offset), "seed": a.seed}
    return {"labels": _abs(a.labels), "mode": "scribbles", "radius": a.radius,
            "keep_fraction": a.keep_fraction, "seed": a.seed}


def _resolve_evaluate(a) -> dict:
    return {"pred": _abs(a.pred), "gt": _abs(a.gt), "n_labels": a.n_labels}


def _resolve_segment(a) -> dict:
    data = _read_json(a.spec) if a.spec else {}
    spec = ExperimentSpec.from_dict(data)
    if a.manifest:
        spec = spec.with_params(manifest=_abs(a.manifest))
    spec = spec.with_params(**_overrides(a.set))
    if spec.manifest is None:
        raise UsageError("segment needs --manifest or a spec with a manifest")
    return {"spec": spec.to_dict()}


def _resolve_grid(a) -> dict:
    data = _read_json(a.spec)
    unknown = sorted(set(data) - {"axes", "template", "targets", "seed"})
    if unknown:
        raise ValueError(f"grid spec: unknown keys {unknown}")
    template = ExperimentSpec.from_dict(data.get("template", {}))
    if a.manifest:
        template = template.with_params(manifest=_abs(a.manifest))
    if template.manifest is None:
        raise UsageError("grid-search needs --manifest or a template with a manifest")
    axes = data.get("axes")
    if not isinstance(axes, dict):
        raise ValueError("grid spec: 'axes' must map parameter names to value lists")
    GridSearchSpec(axes=axes, template=template)  # validate
    targets = data.get("targets")
    return {"axes": axes, "template": template.to_dict(),
            "targets": list(targets) if targets is not None else None, "seed": int(data.get("seed", 0))}


def _resolve_select(a) -> dict:
    if a.manifest is None and (a.target is None or not a.pool):
        raise UsageError("select-atlases needs --manifest or --target with --pool")
    return {"manifest": _abs(a.manifest), "target_index": a.target_index,
            "target": _abs(a.target), "pool": [_abs(p) for p in a.pool or []],
            "R": a.R, "bins": a.bins}


# ----------------------------------------------------------------- execution

def _run_make_phantoms(cfg, out: Path, strict: bool):
    cases = make_phantoms(cfg["count"], tuple(cfg["shape"]), cfg["noise"], cfg["deform"],
                          cfg["seed"], cfg["mode"], tuple(cfg["spacing"]))
    write_dataset(cases, out, provenance={"generator": "make_phantoms", **cfg})
    return {"cases": len(cases), "manifest": "manifest.json"}


def _run_simulate(cfg, out: Path, strict: bool):
    full = read_volume(cfg["labels"])
    if not isinstance(full, LabelVolume):
        raise ValueError(f"{cfg['labels']} is not a label volume")
    if cfg["mode"] == "slicewise":
        part = subsample_slicewise(full, SlicewiseConfig(cfg["q"], cfg["axis"], cfg["offset"]))
        extra = {"period": slice_period(cfg["q"]), "offset": cfg["offset"], "requested_q": cfg["q"]}
    else:
        part = synthetic_scribbles(full, cfg["radius"], cfg["keep_fraction"],
                                   stream_seed(cfg["seed"], "scribbles"))
        extra = {}
    write_volume(out / "labels.json", part)
    rep = validate_annotation(part, max(int(full.labels[full.annotated].max(initial=0)) + 1, 2))
    report = {"coverage": coverage(part), "label_counts": {str(k): v for k, v in rep.label_counts.items()},
              **extra}
    dump_json(report, out / "report.json")
    return report


def _run_evaluate(cfg, out: Path, strict: bool):
    pred, gt = read_volume(cfg["pred"]), read_volume(cfg["gt"])
    if not isinstance(pred, LabelVolume) or not isinstance(gt, LabelVolume):
        raise ValueError("evaluate needs two label volumes")
    report = dice_report(pred, gt, cfg["n_labels"]).to_dict()
    dump_json(report, out / "dice.json")
    return report


def _run_segment(cfg, out: Path, strict: bool):
    spec = ExperimentSpec.from_dict(cfg["spec"])
    res = run_experiment(spec, out_dir=out, log=None)
    summary = {"mean_dice": res.mean_dice, "converged": res.diagnostics.converged}
    if strict and not res.diagnostics.converged:
        raise NotConverged(res.diagnostics.warning)
    return summary


def _run_grid(cfg, out: Path, strict: bool):
    template = ExperimentSpec.from_dict(cfg["template"])
    cases, _ = read_dataset(template.manifest)
    targets = tuple(cfg["targets"]) if cfg["targets"] is not None else None
    spec = GridSearchSpec(axes=cfg["axes"], template=template, targets=targets, seed=cfg["seed"])
    rows = grid_search(spec, cases)
    names = list(cfg["axes"])
    write_csv([{**r["params"], "mean_dice": r["mean_dice"], "best": r["best"]} for r in rows],
              out / "results.csv")
    dump_json({"axes": names, "rows": rows}, out / "results.json")
    best = next(r for r in rows if r["best"])
    return {"cells": len(rows), "best": best}


def _run_select(cfg, out: Path, strict: bool):
    if cfg["manifest"]:
        cases, _ = read_dataset(cfg["manifest"])
        t = cfg["target_index"]
        if not 0 <= t < len(cases):
            raise ValueError(f"target index {t} outside dataset of {len(cases)}")
        target = cases[t].image
        names = [c.name for k, c in enumerate(cases) if k != t]
        ids = [k for k in range(len(cases)) if k != t]
        pool = [cases[k].image for k in ids]
    else:
        target = read_volume(cfg["target"])
        pool = [read_volume(p) for p in cfg["pool"]]
        if not isinstance(target, Volume) or not all(isinstance(v, Volume) for v in pool):
            raise ValueError("select-atlases needs scalar image volumes")
        names = cfg["pool"]
        ids = list(range(len(pool)))
    idx, scores = select_atlases(target, pool, cfg["R"], cfg["bins"])
    ranking = [{"rank": r + 1, "index": ids[k], "name": names[k], "nmi": s}
               for r, (k, s) in enumerate(zip(idx, scores))]
    dump_json({"ranking": ranking}, out / "ranking.json")
    return {"ranking": ranking}


COMMANDS = {
    "make-phantoms": (_resolve_make_phantoms, _run_make_phantoms),
    "simulate-labels": (_resolve_simulate, _run_simulate),
    "evaluate": (_resolve_evaluate, _run_evaluate),
    "segment": (_resolve_segment, _run_segment),
    "grid-search": (_resolve_grid, _run_grid),
    "select-atlases": (_resolve_select, _run_select),
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="masflow", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=f"masflow {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    def command(name, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--out", required=True, help="output directory (created if needed)")
        p.add_argument("--strict", action="store_true", help="exit with code 3 if a solve does not converge")
        return p

    p = command("make-phantoms", "generate a synthetic dataset with ground truth")
    p.add_argument("--count", type=int, default=20)
    p.add_argument("--shape", type=int, nargs=3, default=[24, 24, 12], metavar=("NX", "NY", "NZ"))
    p.add_argument("--noise", type=float, default=8.0, help="Gaussian noise sigma")
    p.add_argument("--deform", type=float, default=2.0, help="displacement bound in voxels")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--mode", choices=["binary", "multilabel"], default="binary")
    p.add_argument("--spacing", type=float, nargs=3, default=[1.0, 1.0, 1.0], metavar=("SX", "SY", "SZ"))

    p = command("simulate-labels", "reduce a full label map to slices or scribbles")
    p.add_argument("--labels", required=True, help="full label volume header")
    p.add_argument("--mode", choices=["slicewise", "scribbles"], default="slicewise")
    p.add_argument("--q", type=float, help="fraction of slices to keep (slicewise)")
    p.add_argument("--axis", choices=["x", "y", "z"], default="z")
    p.add_argument("--offset", type=int, help="first kept slice; drawn from --seed if omitted")
    p.add_argument("--radius", type=int, default=1, help="scribble erosion radius")
    p.add_argument("--keep-fraction", type=float, default=0.3, help="scribble voxel fraction")
    p.add_argument("--seed", type=int, default=0)

    p = command("evaluate", "Dice per label between a prediction and ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--n-labels", type=int, default=2)

    p = command("segment", "run one experiment spec on a dataset")
    p.add_argument("--manifest", help="dataset manifest (overrides the spec)")
    p.add_argument("--spec", help="experiment spec JSON; unknown keys are errors")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="dotted override, e.g. regularisation.a=0.1 (repeatable)")

    p = command("grid-search", "evaluate a Cartesian parameter grid")
    p.add_argument("--spec", required=True, help='JSON with "axes", "template", optional "targets", "seed"')
    p.add_argument("--manifest", help="dataset manifest (overrides the template)")

    p = command("select-atlases", "rank candidate atlases by NMI with the target")
    p.add_argument("--manifest", help="dataset manifest; the pool is every other case")
    p.add_argument("--target-index", type=int, default=0)
    p.add_argument("--target", help="target image volume (instead of --manifest)")
    p.add_argument("--pool", nargs="*", help="candidate image volumes (instead of --manifest)")
    p.add_argument("--R", type=int, required=True, help="number of atlases to keep")
    p.add_argument("--bins", type=int, default=64)

    p = sub.add_parser("rerun", help="replay a run.json", description="replay a run.json")
    p.add_argument("run", help="path to run.json")
    p.add_argument("--out", help="output directory (default: the recorded one)")
    return parser


def _execute(command: str, cfg: dict, out: Path, strict: bool) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    record = {
        "command": command,
        "config": cfg,
        "out": str(out.resolve()),
        "strict": strict,
        "versions": {"masflow": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
                     "python": platform.python_version()},
    }
    dump_json(record, out / "run.json")
    return COMMANDS[command][1](cfg, out, strict)


def _fail(kind: str, message: str, code: int) -> int:
    sys.stderr.write(json.dumps({"error": kind, "message": message, "exit_code": code}, sort_keys=True) + "\n")
    return code


def main(argv=None) -> int:
    parser = build_parser()
    # convergence problems are recorded in the reports; stderr is kept for errors
    warnings.simplefilter("ignore", ConvergenceWarning)
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("a command is required")
        if args.command == "rerun":
            record = _read_json(args.run)
            if record.get("command") not in COMMANDS or "config" not in record:
                raise ValueError(f"{args.run} is not a run record")
            out = Path(args.out or record["out"])
            result = _execute(record["command"], record["config"], out, bool(record.get("strict")))
        else:
            cfg = COMMANDS[args.command][0](args)
            result = _execute(args.command, cfg, Path(args.out), args.strict)
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    except UsageError as exc:
        return _fail("usage", str(exc), EXIT_USAGE)
    except NotConverged as exc:
        return _fail("not_converged", str(exc), EXIT_NOT_CONVERGED)
    except (ValueError, TypeError, VolumeFileError, ManifestError, FileNotFoundError) as exc:
        return _fail(type(exc).__name__, str(exc), EXIT_INVALID)
    sys.stdout.write(json.dumps(result, sort_keys=True) + "\n")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
