"""Finite-difference check of the full model's parameter gradients."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from mmgraph import tensor as tn
from mmgraph.embeddings import SynthConfig, synth_dataset
from mmgraph.model import EpisodeFeatures, ModelConfig, build_episode_graphs, forward, init_params

GROUP_ORDER = ("W", "a", "omega", "lambda", "M", "W_v", "W_t", "a_fusion", "temporal", "classifier")


@dataclass
class GradReport:
    errors: dict[str, float]  # group -> max relative error
    sizes: dict[str, int]
    max_abs_grad: dict[str, float]

    @property
    def worst(self) -> float:
        return max(self.errors.values())

    def lines(self) -> list[str]:
        return [f"{g:<10} n={self.sizes[g]:<4} max|grad|={self.max_abs_grad[g]:.3e} max_rel_err={self.errors[g]:.3e}"
                for g in GROUP_ORDER if g in self.errors]


def tiny_episodes(seed: int = 1, d: int = 4):
    """Two-frame clips with two objects per frame and one text vector."""
    cfg = SynthConfig(num_classes=2, episodes_per_class=1, frames=2, patches=6, objects=2,
                      d_v=d, d_t=d, noise_std=0.3, seed=seed)
    return synth_dataset(cfg)


def check_gradients(seed: int = 1, h: float = 1e-6, weighted_messages: bool = True,
                    hidden: int = 4) -> GradReport:
    """Compare backprop against central differences for every parameter group.

    Thresholds of -1 make every candidate object-object and text-object edge
    present, so all three edge kinds carry gradient. The topology is frozen
    at the starting point; only the continuous pipeline is differentiated.
    """
    episodes = tiny_episodes(seed, hidden)
    feats = [EpisodeFeatures.of(ep) for ep in episodes]
    cfg = ModelConfig(hidden=hidden, layers=2, spatial_threshold=-1.0, semantic_threshold=-1.0,
                      prune_threshold=-5.0, add_threshold=2.0, weighted_messages=weighted_messages)
    params = init_params(feats[0].frames.shape[1], feats[0].text.shape[0], 2, cfg, "full", seed=seed)
    rng = np.random.default_rng(seed)
    # move modulation scalars off their shared default so each enters distinctly
    for name, t in params.items():
        if t.ndim == 0:
            t.data = np.array(rng.uniform(-1.0, 1.0))
    graphs = build_episode_graphs(feats, params, "full")
    labels = [f.label for f in feats]

    def loss_value() -> float:
        return tn.cross_entropy(forward(feats, params, "full", graphs).logits, labels).item()

    tn.zero_grads(params.tensors.values())
    loss = tn.cross_entropy(forward(feats, params, "full", graphs).logits, labels)
    loss.backward()
    errors, sizes, mags = {}, {}, {}
    for group, names in params.groups.items():
        analytic, numeric = [], []
        for name in names:
            p = params[name]
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            analytic.append(np.ravel(g))
            numeric.append(np.ravel(tn.finite_difference_grad(loss_value, p, h)))
        a, n = np.concatenate(analytic), np.concatenate(numeric)
        errors[group] = tn.max_relative_error(a, n)
        sizes[group] = a.size
        mags[group] = float(np.abs(a).max())
    return GradReport(errors, sizes, mags)
