"""Continuous max-flow on graphs of co-registered images.

Every image is a grid of nodes with spatial flows between neighbours
(capacity alpha), terminal flows to source and sink (the data term) and
inter-image flows ``r_ij`` between corresponding voxels (capacity beta).
The augmented Lagrangian is maximised by block coordinate ascent; its
multiplier ``u`` is the relaxed labelling.

Conventions used throughout:

* flow conservation ``rho_i = div p_i - p_s,i + p_t,i + sum_j r_ij``, with
  ``r_ji = -r_ij`` (each unordered pair is stored once, as ``(i, j)`` with
  ``i < j``);
* the spatial capacity at a voxel is the smallest alpha over the voxel and
  its forward neighbours, so in one dimension the flow on the edge
  ``(k, k+1)`` is capped by ``min(alpha_k, alpha_k+1)``;
* in the multi-label (Potts) solver every label carries its own copy of the
  spatial and inter-image flows with half the capacity, so a one-hot
  labelling pays ``alpha`` per boundary and ``beta`` per disagreeing pair,
  as in the binary model.
"""
from __future__ import annotations

import itertools
import json
import warnings
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .annotations import LabelVolume
from .graph import GraphProblem
from .volume import div, grad

__all__ = [
    "ConvergenceWarning",
    "SolverConfig",
    "FlowState",
    "Diagnostics",
    "SolveResult",
    "clamp_flow",
    "spatial_capacity",
    "resolve_step",
    "solve_binary",
    "solve_potts",
    "solve",
    "discretise",
    "discrete_energy",
    "brute_force_mrf_oracle",
    "vote_fusion",
]


class ConvergenceWarning(RuntimeWarning):
    pass


@dataclass(frozen=True)
class SolverConfig:
    """Penalty ``c``, projection ``step``, stopping rule and discretisation.

    ``step=None`` picks 0.1, reduced on fine grids so that
    ``step * ||div||^2 <= 1.2``; an explicit step only has to satisfy the
    hard bound ``step * ||div||^2 <= 2``.

    ``prox`` weights a proximal term ``(c*prox/2)|r - r_prev|^2`` in the
    inter-image flow update.  It leaves the fixed points unchanged but damps
    the period-two oscillation that plain block updates fall into when an
    image is linked to many others.  The damping needed grows with the
    number of links, so ``prox=None`` gives each pair the link count of its
    busier endpoint; a number applies to every pair and ``prox=0`` gives the
    undamped closed form.

    The solver stops once the mean absolute multiplier update falls below
    ``eps`` and the largest conservation residual, divided by the capacity
    scale ``max(1, max alpha, max beta)``, is below ``rho_tol``, and no
    voxel within ``band`` of the decision boundary still moves by ``eps`` or
    more per iteration.  The last test catches voxels drifting slowly across
    the threshold under a small constant residual.  ``large``
    (if given) replaces the problem's hard-constraint capacity.
    """

    c: float = 0.3
    step: float | None = None
    eps: float = 1e-4
    max_iter: int = 5000
    threshold: float = 0.5
    large: float | None = None
    rho_tol: float = 1e-3
    prox: float | None = None
    band: float = 0.1

    def __post_init__(self):
        if not self.c > 0:
            raise ValueError(f"c must be > 0, got {self.c}")
        if self.step is not None and not self.step > 0:
            raise ValueError(f"step must be > 0, got {self.step}")
        if not self.eps > 0:
            raise ValueError(f"eps must be > 0, got {self.eps}")
        if not 0 < self.threshold < 1:
            raise ValueError(f"threshold must be in (0, 1), got {self.threshold}")
        if int(self.max_iter) < 1:
            raise ValueError(f"max_iter must be >= 1, got {self.max_iter}")
        if not self.rho_tol > 0:
            raise ValueError(f"rho_tol must be > 0, got {self.rho_tol}")
        if self.prox is not None and not self.prox >= 0:
            raise ValueError(f"prox must be >= 0, got {self.prox}")
        if not 0 <= self.band < 0.5:
            raise ValueError(f"band must be in [0, 0.5), got {self.band}")
        if self.large is not None and not self.large > 0:
            raise ValueError(f"large must be > 0, got {self.large}")


@dataclass
class FlowState:
    """Solver variables.  Binary: ``u``/``pt`` are ``(n, *grid)``; Potts adds
    a label axis after the image axis and ``ps`` stays ``(n, *grid)``."""

    u: np.ndarray
    ps: np.ndarray
    pt: np.ndarray
    p: np.ndarray  # spatial flows, only for regularised images
    r: dict
    regularised: list
    divp: np.ndarray
    inflow: np.ndarray  # sum_j r_ij per image

    def residual(self) -> np.ndarray:
        ps = self.ps if self.ps.ndim == self.u.ndim else self.ps[:, None]
        return self.divp - ps + self.pt + self.inflow


@dataclass
class Diagnostics:
    iterations: int = 0
    converged: bool = False
    mean_du: list = field(default_factory=list)
    max_rho: list = field(default_factory=list)
    energy: list = field(default_factory=list)
    residual_scale: float = 1.0
    annotation_violations: int = 0
    warning: str | None = None

    @property
    def final_max_rho(self) -> float:
        return self.max_rho[-1] if self.max_rho else float("nan")

    @property
    def normalised_residual(self) -> float:
        return self.final_max_rho / self.residual_scale

    def summary(self) -> dict:
        return {
            "iterations": self.iterations,
            "converged": self.converged,
            "final_mean_du": self.mean_du[-1] if self.mean_du else None,
            "final_max_rho": self.max_rho[-1] if self.max_rho else None,
            "normalised_residual": self.normalised_residual if self.max_rho else None,
            "annotation_violations": self.annotation_violations,
            "warning": self.warning,
        }


@dataclass
class SolveResult:
    u: np.ndarray
    labels: np.ndarray  # (n, *grid) integer labelling per image
    diagnostics: Diagnostics
    state: FlowState
    capacities: dict

    def label_volume(self, i: int = 0) -> LabelVolume:
        return LabelVolume(self.labels[i].astype(np.uint8), self.capacities["spacing"])


def pair_prox(pairs, prox: float | None) -> list[float]:
    """Proximal weight per inter-image pair; ``None`` uses the larger endpoint degree."""
    if prox is not None:
        return [float(prox)] * len(pairs)
    degree = Counter(i for pair in pairs for i in pair)
    return [float(max(degree[i], degree[j])) for i, j in pairs]


def clamp_flow(half_gap, cap):
    """Closed-form inter-image flow: ``0.5*(J_j - J_i)`` clipped to ``[-cap, cap]``."""
    return np.clip(half_gap, -cap, cap)


def spatial_capacity(alpha: np.ndarray) -> np.ndarray:
    """Min of alpha over each voxel and its forward neighbours."""
    cap = np.array(alpha, dtype=np.float64, copy=True)
    for ax in range(3):
        n = cap.shape[ax]
        if n < 2:
            continue
        lo = [slice(None)] * 3
        hi = [slice(None)] * 3
        lo[ax] = slice(0, n - 1)
        hi[ax] = slice(1, n)
        np.minimum(cap[tuple(lo)], np.asarray(alpha)[tuple(hi)], out=cap[tuple(lo)])
    return cap


DEFAULT_STEP = 0.1


def resolve_step(cfg: SolverConfig, shape, spacing) -> float:
    """Projection step for this grid; rejects steps beyond the stability bound."""
    # ||div||^2 <= 4 * sum(1 / s^2) over the non-degenerate axes
    bound = 4.0 * sum(1.0 / s**2 for s, n in zip(spacing, shape) if n > 1)
    if cfg.step is None:
        return DEFAULT_STEP if bound == 0 else min(DEFAULT_STEP, 1.2 / bound)
    if bound and cfg.step * bound > 2.0 + 1e-12:
        raise ValueError(
            f"step {cfg.step} too large for spacing {spacing}; needs step <= {2.0 / bound:.4g}"
        )
    return float(cfg.step)


def _project(p: np.ndarray, cap: np.ndarray):
    """Scale ``p`` (``(..., 3, *grid)``) in place so that ``|p(x)| <= cap(x)``."""
    norm = np.sqrt(np.einsum("...dxyz,...dxyz->...xyz", p, p))
    scale = np.ones_like(norm)
    np.divide(cap, norm, out=scale, where=norm > cap)
    p *= scale[..., None, :, :, :]


def _prepare(p: GraphProblem, cfg: SolverConfig, half: bool):
    costs = np.stack(p.costs)
    large = p.large
    if cfg.large is not None:
        costs = np.where(costs >= p.large, cfg.large, costs)
        large = cfg.large
    factor = 0.5 if half else 1.0
    reg = [i for i, a in enumerate(p.alpha) if a is not None and np.any(a > 0)]
    cap = np.stack([factor * spatial_capacity(p.alpha[i]) for i in reg]) if reg else None
    pairs = p.pairs
    beta = [factor * p.beta[k] for k in pairs]
    peaks = [float(np.max(a)) for a in p.alpha if a is not None and a.size]
    peaks += [float(np.max(b)) for b in p.beta.values() if b.size]
    scale = max([1.0] + peaks)
    return costs, large, reg, cap, pairs, beta, scale


def _open_log(log):
    if log is None:
        return None, False
    if hasattr(log, "write"):
        return log, False
    return open(log, "w", encoding="utf-8"), True


def _initial_u(p: GraphProblem) -> np.ndarray:
    """One-hot where a hard annotation fixes the label, ``1/L`` elsewhere."""
    L = p.n_labels
    u = np.full((p.n_images, L) + p.shape, 1.0 / L)
    for i in range(p.n_images):
        fixed = p.fixed_labels(i)
        mask = fixed >= 0
        if np.any(mask):
            for l in range(L):
                u[i, l][mask] = (fixed[mask] == l).astype(float)
    return u


def _finish(p, cfg, state, diag, labels, capacities):
    violations = 0
    for i in range(p.n_images):
        fixed = p.fixed_labels(i)
        mask = fixed >= 0
        violations += int(np.count_nonzero(labels[i][mask] != fixed[mask]))
    diag.annotation_violations = violations
    if not diag.converged:
        diag.warning = (
            f"no convergence after {diag.iterations} iterations "
            f"(mean |du| = {diag.mean_du[-1]:.3g}, eps = {cfg.eps:g})"
        )
        warnings.warn(diag.warning, ConvergenceWarning, stacklevel=3)
    if violations:
        msg = f"{violations} annotated voxels changed label; increase the hard-constraint capacity"
        diag.warning = msg if diag.warning is None else diag.warning + "; " + msg
        warnings.warn(msg, ConvergenceWarning, stacklevel=3)
    return SolveResult(state.u, labels, diag, state, capacities)


def _record(diag, log, it, du, rho_max, energy):
    diag.mean_du.append(du)
    diag.max_rho.append(rho_max)
    if energy is not None:
        diag.energy.append(energy)
    if log is not None:
        rec = {"iteration": it, "mean_du": du, "max_rho": rho_max, "energy": energy}
        log.write(json.dumps(rec) + "\n")


def solve_binary(p: GraphProblem, cfg: SolverConfig | None = None, log=None, track_energy=False) -> SolveResult:
    """Binary labelling by multi-image continuous max-flow.

    Each iteration updates, in order: spatial flows (one projected gradient
    step), inter-image flows (pairs in sorted order, each using the latest
    flows), source then sink flows, and the multiplier ``u <- u - c*rho``.
    Foreground is ``u > threshold``.

    ``log`` may be a path or text stream receiving one JSON record per
    iteration; ``track_energy`` (implied by ``log``) also evaluates the
    discrete energy of the current thresholded labelling.
    """
    cfg = cfg or SolverConfig()
    if p.n_labels != 2:
        raise ValueError("solve_binary needs a two-label problem; use solve_potts")
    costs, large, reg, cap, pairs, beta, scale = _prepare(p, cfg, half=False)
    c, step, sp = cfg.c, resolve_step(cfg, p.shape, p.spacing), p.spacing
    prox = pair_prox(pairs, cfg.prox)
    Cs, Ct = costs[:, 0], costs[:, 1]
    n = p.n_images
    grid = p.shape

    u = _initial_u(p)[:, 1].copy()
    ps = np.zeros((n,) + grid)
    pt = np.zeros((n,) + grid)
    S = np.zeros((n,) + grid)
    divp = np.zeros((n,) + grid)
    flows = np.zeros((len(reg), 3) + grid)
    r = [np.zeros(grid) for _ in pairs]
    state = FlowState(u, ps, pt, flows, {}, reg, divp, S)

    stream, owned = _open_log(log)
    track = track_energy or stream is not None
    diag = Diagnostics(residual_scale=scale)
    try:
        for it in range(1, int(cfg.max_iter) + 1):
            if reg:
                F = ps[reg] - pt[reg] - S[reg] + u[reg] / c
                flows += step * grad(divp[reg] - F, sp)
                _project(flows, cap)
                divp[reg] = div(flows, sp)
            base = divp - ps + pt - u / c
            for k, (i, j) in enumerate(pairs):
                old = r[k]
                half_gap = 0.5 * (base[j] + S[j] - base[i] - S[i]) + old
                new = clamp_flow((2.0 * half_gap + prox[k] * old) / (2.0 + prox[k]), beta[k])
                d = new - old
                S[i] += d
                S[j] -= d
                r[k] = new
            np.minimum(divp + pt + S - u / c + 1.0 / c, Cs, out=ps)
            np.minimum(ps - divp - S + u / c, Ct, out=pt)
            rho = divp - ps + pt + S
            u -= c * rho
            du = c * float(np.mean(np.abs(rho)))
            energy = None
            if track:
                energy = discrete_energy((u > cfg.threshold).astype(np.int64), p)
            rho_max = float(np.max(np.abs(rho)))
            _record(diag, stream, it, du, rho_max, energy)
            diag.iterations = it
            if du < cfg.eps and rho_max < cfg.rho_tol * scale:
                near = np.abs(u - cfg.threshold) < cfg.band
                if not np.any(near) or c * float(np.max(np.abs(rho[near]))) < cfg.eps:
                    diag.converged = True
                    break
    finally:
        if owned:
            stream.close()
    state.u, state.ps, state.pt, state.inflow = u, ps, pt, S
    state.r = dict(zip(pairs, r))
    labels = discretise(u, cfg)
    capacities = {"spacing": p.spacing, "alpha": cap, "beta": dict(zip(pairs, beta)),
                  "source": Cs, "sink": Ct, "large": large}
    return _finish(p, cfg, state, diag, labels, capacities)


def solve_potts(p: GraphProblem, cfg: SolverConfig | None = None, log=None, track_energy=False) -> SolveResult:
    """Multi-label labelling with the Potts extension.

    The graph is replicated per label; each copy has its own spatial and
    inter-image flows (capacities halved) and a sink flow capped by that
    label's cost, while a single unconstrained source flow feeds all
    copies.  At convergence ``sum_l u[i, l] = 1``; the labelling is the
    per-voxel argmax.
    """
    cfg = cfg or SolverConfig()
    costs, large, reg, cap, pairs, beta, scale = _prepare(p, cfg, half=True)
    c, step, sp = cfg.c, resolve_step(cfg, p.shape, p.spacing), p.spacing
    prox = pair_prox(pairs, cfg.prox)
    n, L = p.n_images, p.n_labels
    grid = p.shape

    u = _initial_u(p)
    ps = np.zeros((n,) + grid)
    pt = np.zeros((n, L) + grid)
    S = np.zeros((n, L) + grid)
    divp = np.zeros((n, L) + grid)
    flows = np.zeros((len(reg), L, 3) + grid)
    capl = cap[:, None] if reg else None
    r = [np.zeros((L,) + grid) for _ in pairs]
    state = FlowState(u, ps, pt, flows, {}, reg, divp, S)

    stream, owned = _open_log(log)
    track = track_energy or stream is not None
    diag = Diagnostics(residual_scale=scale)
    try:
        for it in range(1, int(cfg.max_iter) + 1):
            if reg:
                F = ps[reg][:, None] - pt[reg] - S[reg] + u[reg] / c
                flows += step * grad(divp[reg] - F, sp)
                _project(flows, capl)
                divp[reg] = div(flows, sp)
            base = divp - ps[:, None] + pt - u / c
            for k, (i, j) in enumerate(pairs):
                old = r[k]
                half_gap = 0.5 * (base[j] + S[j] - base[i] - S[i]) + old
                new = clamp_flow((2.0 * half_gap + prox[k] * old) / (2.0 + prox[k]), beta[k])
                d = new - old
                S[i] += d
                S[j] -= d
                r[k] = new
            np.minimum(ps[:, None] - divp - S + u / c, costs, out=pt)
            ps = (np.sum(divp + pt + S - u / c, axis=1) + 1.0 / c) / L
            rho = divp - ps[:, None] + pt + S
            u -= c * rho
            du = c * float(np.mean(np.abs(rho)))
            energy = None
            if track:
                energy = discrete_energy(np.argmax(u, axis=1), p)
            rho_max = float(np.max(np.abs(rho)))
            _record(diag, stream, it, du, rho_max, energy)
            diag.iterations = it
            if du < cfg.eps and rho_max < cfg.rho_tol * scale:
                # ambiguous voxels: the two largest label scores within 2*band
                top = np.sort(u, axis=1)
                near = top[:, -1] - top[:, -2] < 2 * cfg.band
                drift = np.max(np.abs(rho), axis=1)
                if not np.any(near) or c * float(np.max(drift[near])) < cfg.eps:
                    diag.converged = True
                    break
    finally:
        if owned:
            stream.close()
    state.u, state.ps, state.pt, state.inflow = u, ps, pt, S
    state.r = dict(zip(pairs, r))
    labels = discretise(u, cfg)
    capacities = {"spacing": p.spacing, "alpha": cap, "beta": dict(zip(pairs, beta)),
                  "sink": costs, "large": large}
    return _finish(p, cfg, state, diag, labels, capacities)


def solve(p: GraphProblem, cfg: SolverConfig | None = None, **kwargs) -> SolveResult:
    """Binary solver for two labels, Potts otherwise."""
    if p.n_labels == 2:
        return solve_binary(p, cfg, **kwargs)
    return solve_potts(p, cfg, **kwargs)


def discretise(u: np.ndarray, cfg: SolverConfig | None = None) -> np.ndarray:
    """Threshold binary ``u`` (``(n, *grid)``) or argmax Potts ``u`` (``(n, L, *grid)``).

    Binary ties (``u == threshold``) go to background; Potts ties to the
    lowest label.
    """
    cfg = cfg or SolverConfig()
    u = np.asarray(u)
    if u.ndim == 4:
        return (u > cfg.threshold).astype(np.int64)
    if u.ndim == 5:
        return np.argmax(u, axis=1).astype(np.int64)
    raise ValueError(f"expected u of shape (n, nx, ny, nz) or (n, L, nx, ny, nz), got {u.shape}")


def _as_label_stack(labelling, p: GraphProblem) -> np.ndarray:
    if isinstance(labelling, np.ndarray):
        lab = labelling
    else:
        lab = np.stack([l.labels if isinstance(l, LabelVolume) else np.asarray(l) for l in labelling])
    lab = lab.astype(np.int64)
    if lab.shape != (p.n_images,) + p.shape:
        raise ValueError(f"labelling has shape {lab.shape}, expected {(p.n_images,) + p.shape}")
    if np.any(lab < 0) or np.any(lab >= p.n_labels):
        raise ValueError("labelling must assign a valid label to every voxel")
    return lab


def discrete_energy(labelling, p: GraphProblem) -> float:
    """Data + regularisation + propagation energy of a complete labelling.

    Regularisation charges ``min(alpha(x), alpha(y)) / s_axis`` for every
    axis-adjacent pair with different labels; propagation charges
    ``beta_ij(x)`` wherever images i and j disagree.
    """
    lab = _as_label_stack(labelling, p)
    energy = 0.0
    for i in range(p.n_images):
        energy += float(np.take_along_axis(p.costs[i], lab[i][None], axis=0).sum())
        a = p.alpha[i]
        if a is None:
            continue
        for ax in range(3):
            n = lab.shape[1 + ax]
            if n < 2:
                continue
            lo = [slice(None)] * 3
            hi = [slice(None)] * 3
            lo[ax] = slice(0, n - 1)
            hi[ax] = slice(1, n)
            lo, hi = tuple(lo), tuple(hi)
            w = np.minimum(a[lo], a[hi]) / p.spacing[ax]
            energy += float(np.sum(w * (lab[i][lo] != lab[i][hi])))
    for (i, j), b in p.beta.items():
        energy += float(np.sum(b * (lab[i] != lab[j])))
    return energy


def brute_force_mrf_oracle(p: GraphProblem, max_free: int = 20, max_states: int = 2**21):
    """Exact minimiser of :func:`discrete_energy` by exhaustive enumeration.

    Voxels fixed by a hard annotation keep their label; every other voxel
    (in every image) is enumerated.  Returns ``(labelling, energy)`` where
    ``labelling`` has shape ``(n, *grid)``.  Among equal minima the first
    in enumeration order (lexicographic, first free voxel slowest) wins.
    """
    shape = p.shape
    nvox = int(np.prod(shape))
    L = p.n_labels
    fixed = np.stack([p.fixed_labels(i).ravel() for i in range(p.n_images)])
    free = [(i, v) for i in range(p.n_images) for v in range(nvox) if fixed[i, v] < 0]
    if len(free) > max_free or L ** len(free) > max_states:
        raise ValueError(f"{len(free)} free voxels with {L} labels exceed the enumeration bound")
    slot = {node: k for k, node in enumerate(free)}

    unary = np.zeros((len(free), L))
    for k, (i, v) in enumerate(free):
        unary[k] = p.costs[i].reshape(L, -1)[:, v]
    pair_edges = []

    def add_edge(a, b, w):
        if w == 0:
            return
        ka, kb = slot.get(a), slot.get(b)
        if ka is None and kb is None:
            return
        if ka is not None and kb is not None:
            pair_edges.append((ka, kb, w))
            return
        k, other = (ka, b) if ka is not None else (kb, a)
        lab = fixed[other]
        unary[k] += w * (np.arange(L) != lab)

    coords = list(itertools.product(*(range(n) for n in shape)))
    for i in range(p.n_images):
        a = p.alpha[i]
        if a is None:
            continue
        for x in coords:
            for ax in range(3):
                y = list(x)
                y[ax] += 1
                if y[ax] >= shape[ax]:
                    continue
                y = tuple(y)
                w = min(a[x], a[y]) / p.spacing[ax]
                add_edge((i, np.ravel_multi_index(x, shape)), (i, np.ravel_multi_index(y, shape)), w)
    for (i, j), b in p.beta.items():
        for x in coords:
            v = np.ravel_multi_index(x, shape)
            add_edge((i, v), (j, v), b[x])

    nfree = len(free)
    best_e, best_idx = np.inf, 0
    total = L**nfree
    powers = L ** np.arange(nfree - 1, -1, -1, dtype=np.int64)
    chunk = 1 << 16
    for start in range(0, total, chunk):
        idx = np.arange(start, min(total, start + chunk), dtype=np.int64)
        labs = (idx[:, None] // powers[None, :]) % L
        e = np.zeros(len(idx))
        for k in range(nfree):
            e += unary[k][labs[:, k]]
        for ka, kb, w in pair_edges:
            e += w * (labs[:, ka] != labs[:, kb])
        m = int(np.argmin(e))
        if e[m] < best_e:
            best_e, best_idx = float(e[m]), int(idx[m])

    out = np.where(fixed >= 0, fixed, 0)
    if nfree:
        labs = (best_idx // powers) % L
        for k, (i, v) in enumerate(free):
            out[i, v] = labs[k]
    out = out.reshape((p.n_images,) + shape)
    return out, discrete_energy(out, p)


def vote_fusion(atlas_labels, weights, n_labels: int) -> tuple[np.ndarray, np.ndarray]:
    """Weighted vote ``argmax_l sum_j w_j [l_j = l]``.

    Returns ``(labels, margin)``; ``margin`` is the gap between the best and
    runner-up vote totals, and ties resolve to the lowest label.
    """
    atlas_labels = np.asarray(atlas_labels)
    weights = np.asarray(weights, dtype=float)
    votes = np.zeros((n_labels,) + atlas_labels.shape[1:])
    for lab, w in zip(atlas_labels, weights):
        for l in range(n_labels):
            votes[l] += w * (lab == l)
    labels = np.argmax(votes, axis=0)
    ordered = np.sort(votes, axis=0)
    return labels, ordered[-1] - ordered[-2]
