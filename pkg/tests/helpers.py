"""Shared fixtures and checks for the solver and acceptance tests."""
import numpy as np

from masflow.annotations import UNLABELLED, LabelVolume
from masflow.graph import GraphProblem, build_problem, encode_data_term
from masflow.solver import vote_fusion
from masflow.volume import Volume

FEAS_TOL = 1e-12


def chain_problem(seed, nvox=8, n_atlases=2, n_labels=2, max_free=20, uniform_beta=False):
    """1D chain: a free target plus partially labelled atlases.

    alpha ~ U[0, 0.3] in every image, beta ~ U[0, 1] (or 1) on target-atlas
    edges; atlas voxels are unlabelled at random while the total count of
    free voxels stays within ``max_free``.
    """
    rng = np.random.default_rng(seed)
    shape = (nvox, 1, 1)
    images = [Volume(np.zeros(shape)) for _ in range(n_atlases + 1)]
    alpha = [rng.uniform(0, 0.3, shape) for _ in range(n_atlases + 1)]
    beta = {
        (0, j): np.ones(shape) if uniform_beta else rng.uniform(0, 1, shape)
        for j in range(1, n_atlases + 1)
    }
    labs = [rng.integers(0, n_labels, nvox).astype(np.uint8) for _ in range(n_atlases)]
    slots = [(j, v) for j in range(n_atlases) for v in range(nvox)]
    n_drop = min(max_free - nvox, len(slots) // 2)
    for k in rng.choice(len(slots), size=n_drop, replace=False):
        j, v = slots[k]
        labs[j][v] = UNLABELLED
    anns = [None] + [LabelVolume(l.reshape(shape)) for l in labs]
    large = 1e4
    costs = [encode_data_term(a, n_labels, large, shape) for a in anns]
    return GraphProblem(images, n_labels, alpha, beta, costs, large, annotations=anns)


def vote_problem(seed, shape=(8, 8, 4)):
    """Full atlas labels, no alpha, no target data term, 2 to 5 atlases."""
    rng = np.random.default_rng(seed)
    R = int(rng.integers(2, 6))
    target = Volume(rng.normal(100, 20, shape))
    atlases = [
        (Volume(rng.normal(100, 20, shape)), LabelVolume(rng.integers(0, 2, shape)))
        for _ in range(R)
    ]
    p = build_problem("MAS_MV" if seed % 2 == 0 else "MAS_LW", target, atlases)
    weights = [p.beta[(0, j)] for j in range(1, R + 1)]
    labels, margin = vote_fusion([a.labels for _, a in atlases], weights, 2)
    return p, labels, margin


def check_feasible(p, result, tol=FEAS_TOL):
    """Every capacity constraint of the final flows, to ``tol``."""
    st, cap = result.state, result.capacities
    for (i, j), r in st.r.items():
        b = cap["beta"][(i, j)]
        assert np.all(np.abs(r) <= b + tol), f"inter-image flow {(i, j)} exceeds beta"
    if st.regularised:
        flows = st.p
        # Potts flows carry a label axis before the vector axis
        norm = np.sqrt(np.sum(flows**2, axis=-4))
        bound = cap["alpha"] if flows.ndim == 5 else cap["alpha"][:, None]
        assert np.all(norm <= bound + tol), "spatial flow exceeds alpha"
    if "source" in cap:
        assert np.all(st.ps <= cap["source"] + tol)
    assert np.all(st.pt <= cap["sink"] + tol)


def inflow_from_pairs(state, n_images):
    """Net inter-image inflow rebuilt from the stored pair flows, ``r_ji = -r_ij``."""
    shape = state.inflow.shape[1:]
    S = np.zeros((n_images,) + shape)
    for (i, j), r in state.r.items():
        S[i] += r
        S[j] -= r
    return S
