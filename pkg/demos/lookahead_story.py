"""Greedy versus two-step on a one-dimensional toy.

    python demos/lookahead_story.py

We fit a GP to four points and ask two questions:

* Where does expected improvement (one step) want to sample?
* Where does the two-step tree want to sample, when it may also plan one
  follow-up evaluation for each of three Gauss-Hermite fantasies?

The script prints both roots, the planned follow-ups and the two values.
Here the roots land close together, but the plan behind the two-step root
differs per fantasy: a bad outcome sends the follow-up to the boundary, a
typical one to the unexplored middle.
The two-step value is always at least the EI value, because the tree can
always take the EI point and then add a follow-up with non-negative EI.
"""

import numpy as np

from lookahead_bo import Dataset, GpModel, KernelHyperparams, TreeLayout, draw_base_samples
from lookahead_bo.acquisition import ei_analytic
from lookahead_bo.optimize import OptimizerConfig, maximize_layout

X = np.array([[0.10], [0.35], [0.40], [0.90]])
y = np.sin(6 * X[:, 0]) + 0.1 * X[:, 0]
model = GpModel.from_data(Dataset(X, y), KernelHyperparams(np.array([0.15]), 1.0, 1e-4))
best = model.dataset.incumbent()

grid = np.linspace(0, 1, 1001)
post = model.posterior(grid[:, None])
ei = ei_analytic(post.mean.numpy(), post.variance.sqrt().numpy(), best)
print(f"EI: sample at x = {grid[ei.argmax()]:.3f}, value {ei.max():.4f}")

layout = TreeLayout.tree(2, (3,), 1)
samples = draw_base_samples(layout, "gh")
config = OptimizerConfig(restarts=64, raw_samples=2048)
flat, value, _ = maximize_layout(model, layout, samples, best, config, np.random.default_rng(0))
print(f"2-step: sample at x = {flat[0]:.3f}, value {value:.4f}")
for z, w, x2 in zip(samples.nodes[0], samples.weights[0], flat[1:]):
    print(f"  if the outcome lands {z:+.2f} sd from the mean (weight {w:.2f}), follow up at x = {x2:.3f}")
