"""Multimodal episodes and the patch-level aggregations feeding the graph.

Foundation-model outputs (patch embeddings, attention maps, [CLS] text
vectors) are not computed here; they are either generated synthetically by
:func:`synth_dataset` or read from disk by :mod:`mmgraph.io`.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class EpisodeError(ValueError):
    """An episode violates one of its structural invariants."""


@dataclass
class Episode:
    patch_embeddings: np.ndarray  # T x N x d_V
    attention: np.ndarray  # T x N, non-negative
    regions: list[dict[str, tuple[int, ...]]]  # per frame: region name -> patch indices
    text_embedding: np.ndarray  # d_T
    annotation: str
    class_id: int
    alignment: dict[int, int] = field(default_factory=dict)

    def __post_init__(self):
        if not self.alignment:
            self.alignment = {t: 0 for t in range(self.num_frames)}

    @property
    def num_frames(self) -> int:
        return self.patch_embeddings.shape[0]

    @property
    def num_patches(self) -> int:
        return self.patch_embeddings.shape[1]

    @property
    def d_v(self) -> int:
        return self.patch_embeddings.shape[2]

    @property
    def d_t(self) -> int:
        return self.text_embedding.shape[0]

    def validate(self) -> None:
        z, att = self.patch_embeddings, self.attention
        if z.ndim != 3:
            raise EpisodeError(f"patch embeddings must be T x N x d_V, got shape {z.shape}")
        t_count, n = z.shape[:2]
        if att.shape != (t_count, n):
            raise EpisodeError(f"attention shape {att.shape} != {(t_count, n)}")
        if not np.isfinite(att).all() or (att < 0).any():
            raise EpisodeError("attention scores must be finite and non-negative")
        if len(self.regions) != t_count:
            raise EpisodeError(f"{len(self.regions)} region lists for {t_count} frames")
        for t, frame_regions in enumerate(self.regions):
            for name, idx in frame_regions.items():
                if not idx:
                    raise EpisodeError(f"frame {t} region {name!r} is empty")
                if any(i < 0 or i >= n for i in idx):
                    raise EpisodeError(f"frame {t} region {name!r} has a patch index outside [0, {n})")
                if att[t, list(idx)].sum() <= 0:
                    raise EpisodeError(f"frame {t} region {name!r} has no positive attention")
        if sorted(self.alignment) != list(range(t_count)):
            raise EpisodeError("alignment must cover every frame index exactly once")

    def frame_embeddings(self) -> np.ndarray:
        return np.stack([frame_embedding(z) for z in self.patch_embeddings])

    def object_embeddings(self) -> list[tuple[int, str, np.ndarray]]:
        """(frame index, region name, embedding) for every region, frame-major."""
        out = []
        for t, frame_regions in enumerate(self.regions):
            for name in sorted(frame_regions):
                out.append((t, name, object_embedding(
                    self.patch_embeddings[t], self.attention[t], frame_regions[name])))
        return out


def frame_embedding(patch_embeddings: np.ndarray) -> np.ndarray:
    """Mean over all patches of one frame (every supplied patch counts as visible)."""
    z = np.asarray(patch_embeddings, dtype=np.float64)
    if z.ndim != 2 or z.shape[0] == 0:
        raise EpisodeError("frame_embedding needs at least one patch (N x d_V)")
    return z.mean(axis=0)


def region_weights(attention: np.ndarray, region) -> np.ndarray:
    idx = list(region)
    if not idx:
        raise EpisodeError("empty region")
    a = np.asarray(attention, dtype=np.float64)[idx]
    total = a.sum()
    if not total > 0:
        raise EpisodeError("degenerate region: attention sums to zero")
    return a / total


def object_embedding(patch_embeddings: np.ndarray, attention: np.ndarray, region) -> np.ndarray:
    """Attention-weighted sum of the region's patch embeddings (weights sum to 1)."""
    w = region_weights(attention, region)
    return w @ np.asarray(patch_embeddings, dtype=np.float64)[list(region)]


def extract_regions(attention: np.ndarray, q: float) -> list[tuple[int, ...]]:
    """Group patches scoring strictly above the ``q``-quantile into contiguous runs."""
    if not 0.0 < q < 1.0:
        raise ValueError(f"quantile must lie in (0, 1), got {q}")
    att = np.asarray(attention, dtype=np.float64)
    hot = np.flatnonzero(att > np.quantile(att, q))
    regions: list[tuple[int, ...]] = []
    run: list[int] = []
    for i in hot:
        if run and i != run[-1] + 1:
            regions.append(tuple(run))
            run = []
        run.append(int(i))
    if run:
        regions.append(tuple(run))
    return regions


# synthetic data ---------------------------------------------------------------


@dataclass(frozen=True)
class SynthConfig:
    num_classes: int = 4
    episodes_per_class: int = 50
    frames: int = 6
    patches: int = 16
    objects: int = 2
    d_v: int = 32
    d_t: int = 32
    noise_std: float = 0.1
    seed: int = 7
    sweep: float = 2.0  # radians swept by the motion over the clip

    def __post_init__(self):
        counts = (self.num_classes, self.episodes_per_class, self.frames, self.patches, self.objects)
        if min(counts) < 1:
            raise ValueError("all counts must be >= 1")
        if self.d_v < 2 or self.d_t < 2:
            raise ValueError("d_v and d_t must be >= 2")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        if self.objects * 2 > self.patches:
            raise ValueError("need at least two patches per object")


@dataclass
class Prototypes:
    motion: np.ndarray  # groups x 2 x d_V orthonormal plane bases
    text: np.ndarray  # K x d_T unit vectors
    background: np.ndarray  # d_V


def class_names(k: int) -> list[str]:
    return [f"action_{i:02d}" for i in range(k)]


def make_prototypes(cfg: SynthConfig, rng: np.random.Generator) -> Prototypes:
    groups = (cfg.num_classes + 1) // 2
    motion = np.empty((groups, 2, cfg.d_v))
    for g in range(groups):
        basis, _ = np.linalg.qr(rng.standard_normal((cfg.d_v, 2)))
        motion[g] = basis.T
    text = rng.standard_normal((cfg.num_classes, cfg.d_t))
    text /= np.linalg.norm(text, axis=1, keepdims=True)
    background = rng.standard_normal(cfg.d_v)
    background *= 0.5 / np.linalg.norm(background)
    return Prototypes(motion, text, background)


def motion_angles(cfg: SynthConfig, class_id: int) -> np.ndarray:
    """Per-frame rotation angles; odd classes replay their partner's motion backwards."""
    ramp = np.linspace(0.0, cfg.sweep, cfg.frames) if cfg.frames > 1 else np.zeros(1)
    return ramp[::-1].copy() if class_id % 2 else ramp


def _f32(x: np.ndarray) -> np.ndarray:
    return np.asarray(x, dtype=np.float32).astype(np.float64)


def _make_episode(cfg: SynthConfig, protos: Prototypes, class_id: int,
                  rng: np.random.Generator) -> Episode:
    p, q = protos.motion[class_id // 2]
    angles = motion_angles(cfg, class_id)
    n, d_v = cfg.patches, cfg.d_v
    slot = n // cfg.objects
    z = np.empty((cfg.frames, n, d_v))
    att = np.empty((cfg.frames, n))
    regions = []
    for t, theta in enumerate(angles):
        z[t] = protos.background + cfg.noise_std * rng.standard_normal((n, d_v))
        att[t] = 0.05 + 0.05 * rng.random(n)
        frame_regions = {}
        for o in range(cfg.objects):
            # objects sit at fixed phase offsets along the class's rotation
            phase = theta + o * np.pi / cfg.objects
            centre = np.cos(phase) * p + np.sin(phase) * q
            size = 2 + int(rng.integers(0, max(1, slot - 1)))
            start = o * slot + int(rng.integers(0, slot - min(size, slot) + 1))
            idx = tuple(range(start, start + min(size, slot)))
            z[t, list(idx)] = centre + cfg.noise_std * rng.standard_normal((len(idx), d_v))
            att[t, list(idx)] = 1.0 + rng.random(len(idx))
            frame_regions[f"obj{o}"] = idx
        regions.append(frame_regions)
    text = protos.text[class_id] + cfg.noise_std * rng.standard_normal(cfg.d_t)
    return Episode(
        patch_embeddings=_f32(z),
        attention=_f32(att),
        regions=regions,
        text_embedding=_f32(text),
        annotation=class_names(cfg.num_classes)[class_id],
        class_id=class_id,
    )


def synth_dataset(cfg: SynthConfig) -> list[Episode]:
    """Deterministic labelled episodes, class-major order.

    Classes come in pairs sharing one motion plane; the odd member plays the
    motion in reverse, so an order-blind visual model cannot tell a pair
    apart while the text embedding always can. All values are exactly
    representable as float32 so the on-disk format round-trips bit-exactly.
    """
    rng = np.random.default_rng(cfg.seed)
    protos = make_prototypes(cfg, rng)
    episodes = []
    for k in range(cfg.num_classes):
        for _ in range(cfg.episodes_per_class):
            episodes.append(_make_episode(cfg, protos, k, rng))
    return episodes


def synth_prototypes(cfg: SynthConfig) -> Prototypes:
    return make_prototypes(cfg, np.random.default_rng(cfg.seed))


def nearest_text_prototype_accuracy(episodes: list[Episode], text_prototypes: np.ndarray) -> float:
    """Fraction of episodes whose text embedding is closest to its own class prototype."""
    hits = 0
    for ep in episodes:
        d = np.linalg.norm(text_prototypes - ep.text_embedding, axis=1)
        hits += int(np.argmin(d) == ep.class_id)
    return hits / len(episodes)
