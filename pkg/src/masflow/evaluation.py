"""Segmentation scoring and the experiment harness.

An :class:`ExperimentSpec` describes one segmentation run: which graph
configuration, how many atlases, how the atlases (and optionally the target)
are annotated, and every weight/solver parameter.  All randomness derives
from ``spec.seed`` through named sub-streams, so a spec fully determines
its report.
"""
from __future__ import annotations

import csv
import dataclasses
import itertools
import time
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .annotations import (
    LabelVolume,
    SlicewiseConfig,
    coverage,
    random_offset,
    slice_period,
    subsample_slicewise,
    synthetic_scribbles,
)
from .graph import Configuration, build_problem
from .io import dump_json, write_volume
from .solver import SolverConfig, solve
from .weighting import LocalWeightConfig, RegularisationConfig, select_atlases

__all__ = [
    "DiceReport",
    "ScribbleConfig",
    "ExperimentSpec",
    "ExperimentResult",
    "SCENARIOS",
    "scenario",
    "dice",
    "dice_report",
    "pool_reports",
    "stream_seed",
    "run_experiment",
    "cross_validate",
    "fold_assignment",
    "GridSearchSpec",
    "grid_search",
    "write_csv",
]


def stream_seed(seed: int, name: str) -> int:
    """Independent, reproducible seed for the named sub-stream."""
    ss = np.random.SeedSequence([int(seed), zlib.crc32(name.encode())])
    return int(ss.generate_state(1)[0])


def dice(pred: LabelVolume, gt: LabelVolume, label: int) -> float:
    """``2|A & B| / (|A| + |B|)`` for one label; 1.0 when both sets are empty."""
    if pred.shape != gt.shape:
        raise ValueError(f"grid mismatch: {pred.shape} vs {gt.shape}")
    a = pred.labels == label
    b = gt.labels == label
    denom = int(a.sum()) + int(b.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.count_nonzero(a & b)) / denom


@dataclass
class DiceReport:
    per_label: dict
    counts: dict = field(default_factory=dict)

    @property
    def mean(self) -> float:
        return float(np.mean(list(self.per_label.values()))) if self.per_label else float("nan")

    def to_dict(self):
        return {
            "per_label": {str(k): v for k, v in self.per_label.items()},
            "mean": self.mean,
            "counts": {str(k): v for k, v in self.counts.items()},
        }


def dice_report(pred: LabelVolume, gt: LabelVolume, n_labels: int) -> DiceReport:
    """Dice for every foreground label ``1..n_labels-1``."""
    per, counts = {}, {}
    for l in range(1, n_labels):
        per[l] = dice(pred, gt, l)
        counts[l] = {"pred": int(np.count_nonzero(pred.labels == l)),
                     "gt": int(np.count_nonzero(gt.labels == l))}
    return DiceReport(per, counts)


def pool_reports(reports) -> DiceReport:
    """Per-label means over targets; the pooled mean is the mean of these."""
    reports = list(reports)
    if not reports:
        raise ValueError("nothing to pool")
    labels = sorted(reports[0].per_label)
    per = {l: float(np.mean([r.per_label[l] for r in reports])) for l in labels}
    counts = {l: {"targets": len(reports)} for l in labels}
    return DiceReport(per, counts)


@dataclass(frozen=True)
class ScribbleConfig:
    radius: int = 1
    keep_fraction: float = 0.3


def _from_dict(cls, data, where):
    if not isinstance(data, dict):
        raise ValueError(f"{where}: expected an object")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ValueError(f"{where}: unknown keys {unknown}")
    return data


@dataclass(frozen=True)
class ExperimentSpec:
    """One segmentation experiment.

    ``atlas_annotation`` is ``"full"``, ``"slicewise"`` (every
    ``round(1/q)``-th slice along ``axis``, random offset per atlas) or
    ``"scribbles"``; ``target_annotation`` is ``None`` or ``"scribbles"``.
    ``pool`` restricts atlas candidates (default: every other case).
    """

    configuration: str = "MAS_MV"
    R: int = 5
    target: int = 0
    pool: tuple | None = None
    atlas_annotation: str = "full"
    q: float = 1.0
    axis: str = "z"
    target_annotation: str | None = None
    scribbles: ScribbleConfig = ScribbleConfig()
    weights: LocalWeightConfig = LocalWeightConfig()
    uniform_weight: float = 1.0
    regularisation: RegularisationConfig = RegularisationConfig()
    solver: SolverConfig = SolverConfig()
    n_labels: int = 2
    nmi_bins: int = 64
    seed: int = 0
    manifest: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "configuration", Configuration.parse(self.configuration).value)
        if self.atlas_annotation not in ("full", "slicewise", "scribbles"):
            raise ValueError(f"unknown atlas_annotation {self.atlas_annotation!r}")
        if self.target_annotation not in (None, "scribbles"):
            raise ValueError(f"unknown target_annotation {self.target_annotation!r}")
        if self.R < 1 and self.target_annotation is None:
            raise ValueError("R must be >= 1 unless the target carries annotations")
        slice_period(self.q)
        if self.pool is not None:
            object.__setattr__(self, "pool", tuple(int(k) for k in self.pool))

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["pool"] = list(self.pool) if self.pool is not None else None
        d["weights"]["patch_radius"] = list(self.weights.patch_radius)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentSpec":
        data = dict(_from_dict(cls, data, "experiment"))
        nested = {"scribbles": ScribbleConfig, "weights": LocalWeightConfig,
                  "regularisation": RegularisationConfig, "solver": SolverConfig}
        for key, sub in nested.items():
            if key in data and not isinstance(data[key], sub):
                data[key] = sub(**_from_dict(sub, data[key], key))
        return cls(**data)

    def with_params(self, **params) -> "ExperimentSpec":
        """Copy with dotted overrides, e.g. ``{"regularisation.a": 0.1}``."""
        spec = self
        for key, value in params.items():
            head, _, rest = key.partition(".")
            if rest:
                inner = getattr(spec, head)
                if rest == "patch_radius" and not isinstance(value, (tuple, list)):
                    value = (int(value),) * 3
                spec = dataclasses.replace(spec, **{head: dataclasses.replace(inner, **{rest: value})})
            else:
                spec = dataclasses.replace(spec, **{head: value})
        return spec


# named scenarios used in the partial-annotation experiments
SCENARIOS = {
    "MAS-MV": dict(configuration="MAS_MV"),
    "MAS-LW": dict(configuration="MAS_LW"),
    "MASr-LW": dict(configuration="MASr_LW"),
    "PA-SW-CONF1": dict(configuration="CONF1", atlas_annotation="slicewise"),
    "PA-SW-CONF2": dict(configuration="CONF2", atlas_annotation="slicewise"),
    "PA-SC-A": dict(configuration="CONF1", atlas_annotation="scribbles"),
    "PA-SC-T": dict(configuration="MASr_LW", R=0, target_annotation="scribbles"),
    "PA-SC-A+T": dict(configuration="CONF1", atlas_annotation="scribbles", target_annotation="scribbles"),
    "PA-SC-AF+T": dict(configuration="MASr_LW", atlas_annotation="full", target_annotation="scribbles"),
}


def scenario(name: str, base: ExperimentSpec | None = None, **overrides) -> ExperimentSpec:
    if name not in SCENARIOS:
        raise ValueError(f"unknown scenario {name!r}; choose from {sorted(SCENARIOS)}")
    base = base or ExperimentSpec()
    return dataclasses.replace(base, **{**SCENARIOS[name], **overrides})


@dataclass
class ExperimentResult:
    report: dict
    segmentation: LabelVolume
    dice: DiceReport
    timing: dict
    diagnostics: object = None

    @property
    def mean_dice(self) -> float:
        return self.dice.mean


def _atlas_annotation(spec: ExperimentSpec, case_index: int, full: LabelVolume):
    if spec.atlas_annotation == "full":
        return full, None
    if spec.atlas_annotation == "slicewise":
        period = slice_period(spec.q)
        offset = random_offset(period, stream_seed(spec.seed, "offsets"), draw=case_index)
        cfg = SlicewiseConfig(spec.q, spec.axis, offset)
        return subsample_slicewise(full, cfg), offset
    seed = stream_seed(spec.seed, f"scribbles/{case_index}")
    return synthetic_scribbles(full, spec.scribbles.radius, spec.scribbles.keep_fraction, seed), None


def run_experiment(spec: ExperimentSpec, cases=None, out_dir=None, log=None) -> ExperimentResult:
    """Select atlases, annotate, assemble, solve and score one target.

    Returns the report (deterministic in ``spec``), the segmentation and
    wall-clock timings (kept out of the report).  With ``out_dir`` the
    segmentation, ``report.json``, ``timing.json`` and a per-iteration
    ``convergence.csv`` are written there.
    """
    if cases is None:
        if spec.manifest is None:
            raise ValueError("no cases given and spec.manifest is unset")
        from .io import read_dataset

        cases, _ = read_dataset(spec.manifest)
    cases = list(cases)
    if not 0 <= spec.target < len(cases):
        raise ValueError(f"target index {spec.target} outside dataset of {len(cases)}")
    t0 = time.perf_counter()
    target = cases[spec.target]
    pool = list(spec.pool) if spec.pool is not None else [k for k in range(len(cases)) if k != spec.target]
    if spec.target in pool:
        raise ValueError("the target cannot be in its own atlas pool")

    picked, scores = select_atlases(target.image, [cases[k].image for k in pool], spec.R, spec.nmi_bins)
    atlas_ids = [pool[k] for k in picked]
    atlases, atlas_meta = [], []
    for k in atlas_ids:
        ann, offset = _atlas_annotation(spec, k, cases[k].labels)
        atlases.append((cases[k].image, ann))
        atlas_meta.append({"index": k, "name": cases[k].name, "coverage": coverage(ann), "offset": offset})
    for meta, score in zip(atlas_meta, scores):
        meta["nmi"] = score

    target_ann = None
    if spec.target_annotation == "scribbles":
        seed = stream_seed(spec.seed, f"scribbles/{spec.target}")
        target_ann = synthetic_scribbles(target.labels, spec.scribbles.radius,
                                         spec.scribbles.keep_fraction, seed)
    weights = spec.weights if spec.configuration != "MAS_MV" else spec.uniform_weight
    t1 = time.perf_counter()
    problem = build_problem(spec.configuration, target.image, atlases, target_ann,
                            weights, spec.regularisation, spec.n_labels)
    t2 = time.perf_counter()
    result = solve(problem, spec.solver, log=log)
    t3 = time.perf_counter()
    seg = result.label_volume(0)
    scores = dice_report(seg, target.labels, spec.n_labels)
    diag = result.diagnostics

    report = {
        "spec": spec.to_dict(),
        "target": {"index": spec.target, "name": target.name,
                   "coverage": coverage(target_ann) if target_ann is not None else 0.0},
        "atlases": atlas_meta,
        "annotation": {
            "requested_q": spec.q,
            "period": slice_period(spec.q) if spec.atlas_annotation == "slicewise" else None,
            "period_rule": "round(1/q), halves away from zero",
            "achieved_coverage": float(np.mean([m["coverage"] for m in atlas_meta])) if atlas_meta else None,
        },
        "graph": {"images": problem.n_images, "edges": len(problem.beta),
                  "regularised": sum(a is not None for a in problem.alpha), "large": problem.large},
        "similarity": "NMI = (H(A)+H(B))/H(A,B), per-image min-max binning",
        "convergence": diag.summary(),
        "dice": scores.to_dict(),
        "version": __version__,
    }
    timing = {"prepare_s": t1 - t0, "assemble_s": t2 - t1, "solve_s": t3 - t2}
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_volume(out / "segmentation.json", seg)
        dump_json(report, out / "report.json")
        dump_json(timing, out / "timing.json")
        rows = [{"iteration": k + 1, "mean_du": du, "max_rho": rho}
                for k, (du, rho) in enumerate(zip(diag.mean_du, diag.max_rho))]
        write_csv(rows, out / "convergence.csv")
    return ExperimentResult(report, seg, scores, timing, diag)


def fold_assignment(n: int, folds: int, seed: int) -> list[int]:
    """Fold index per case from a seeded permutation, dealt round-robin."""
    if folds < 2:
        raise ValueError("need at least two folds")
    if folds > n:
        raise ValueError(f"{folds} folds exceed the dataset size {n}")
    perm = np.random.default_rng(stream_seed(seed, "folds")).permutation(n)
    fold = [0] * n
    for rank, k in enumerate(perm.tolist()):
        fold[k] = rank % folds
    return fold


def cross_validate(folds: int, cases, template: ExperimentSpec, targets=None):
    """Segment every case with atlases chosen from the other folds.

    Returns ``(pooled DiceReport, list of per-target ExperimentResult)``.
    """
    cases = list(cases)
    fold = fold_assignment(len(cases), folds, template.seed)
    results = []
    for t in (range(len(cases)) if targets is None else targets):
        pool = tuple(k for k in range(len(cases)) if fold[k] != fold[t])
        spec = dataclasses.replace(template, target=t, pool=pool)
        results.append(run_experiment(spec, cases))
    return pool_reports(r.dice for r in results), results


@dataclass(frozen=True)
class GridSearchSpec:
    """Cartesian parameter sweep; axis names are dotted spec fields."""

    axes: dict
    template: ExperimentSpec = ExperimentSpec()
    targets: tuple | None = None
    seed: int = 0

    def __post_init__(self):
        if not self.axes:
            raise ValueError("a grid search needs at least one axis")
        for name, values in self.axes.items():
            if not values:
                raise ValueError(f"axis {name!r} has no values")
            for v in values:
                if isinstance(v, (int, float)) and not np.isfinite(v):
                    raise ValueError(f"axis {name!r} has a non-finite value")


def grid_search(spec: GridSearchSpec, cases) -> list[dict]:
    """Evaluate every cell; each row has ``params``, ``mean_dice``, ``best``.

    A cell's score is the mean Dice over ``spec.targets`` (default: all
    cases), each segmented with atlases from the remaining cases.  The best
    cell is the highest score; ties go to the smaller parameter tuple.
    """
    cases = list(cases)
    names = list(spec.axes)
    targets = list(spec.targets) if spec.targets is not None else list(range(len(cases)))
    base = dataclasses.replace(spec.template, seed=spec.seed)
    rows = []
    for values in itertools.product(*(spec.axes[n] for n in names)):
        params = dict(zip(names, values))
        cell = base.with_params(**params)
        scores = [run_experiment(dataclasses.replace(cell, target=t), cases).mean_dice for t in targets]
        rows.append({"params": params, "mean_dice": float(np.mean(scores)), "best": False})
    best = min(range(len(rows)),
               key=lambda k: (-rows[k]["mean_dice"], tuple(rows[k]["params"][n] for n in names)))
    rows[best]["best"] = True
    return rows


def write_csv(rows, path):
    rows = list(rows)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        if not rows:
            return
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
