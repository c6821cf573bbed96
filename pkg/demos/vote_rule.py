"""Unregularised fusion reduces to a weighted vote.

With no spatial regularisation and no target data term, every target
voxel is decided by the weighted sum of atlas labels flowing into it.
This script builds such a problem, solves it with the flow solver and
compares the result with a direct evaluation of the vote.
"""
import numpy as np

from masflow import LabelVolume, Volume, build_problem, solve_binary
from masflow.solver import vote_fusion

rng = np.random.default_rng(0)
shape = (8, 8, 4)
target = Volume(rng.normal(100, 20, shape))
atlases = [(Volume(rng.normal(100, 20, shape)), LabelVolume(rng.integers(0, 2, shape))) for _ in range(4)]

# patch-weighted fusion: beta between target and each atlas comes from patch similarity
p = build_problem("MAS_LW", target, atlases)
res = solve_binary(p)
print(res.diagnostics.summary())

weights = [p.beta[(0, j)] for j in range(1, len(atlases) + 1)]
vote, margin = vote_fusion([a.labels for _, a in atlases], weights, 2)
flow = res.label_volume(0).labels
clear = margin > 0
print(f"voxels with a clear vote: {clear.sum()} of {clear.size}")
print(f"agreement with the vote on those voxels: {np.mean(flow[clear] == vote[clear]):.3f}")
