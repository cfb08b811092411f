"""Deterministic synthetic multi-source token generator.

Each source owns a mean vector, an orthonormal latent subspace, and a noise
scale; every sample draws a shared latent z and a source latent u, emits
T noisy copies of mean + W_shared z + B_source u, and takes its class label
from argmax(V z + V_source u) so that both the shared and the
source-specific latent carry label signal. Source frequencies are
deliberately imbalanced.

With ``source_basis_mode="shared"`` (the default) every source embeds u in
the same subspace while keeping its own label map V_source: the token-to-
label rule then genuinely conflicts across sources, which is the
interference a source-routed expert bank is meant to absorb. "private"
gives each source its own subspace instead. Everything is a pure function
of the seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from .numerics import RandomStreams

Array = np.ndarray


@dataclass
class GeneratorConfig:
    n_sources: int = 4
    width: int = 32
    tokens_per_sample: int = 16
    n_classes: int = 3
    shared_rank: int = 4
    source_rank: int = 2
    n_samples: int = 4000
    source_weights: list = field(default_factory=lambda: [4.0, 2.0, 1.0, 1.0])
    mean_scale: float = 2.0
    shared_scale: float = 1.0
    source_scale: float = 1.0
    noise_scale: float = 0.5
    label_shared_scale: float = 1.5
    label_source_scale: float = 1.0
    source_basis_mode: str = "shared"  # shared | private
    train_fraction: float = 0.8

    def validate(self):
        if self.source_basis_mode not in ("shared", "private"):
            raise ValueError("source_basis_mode must be shared|private")
        if self.n_sources < 1 or self.n_classes < 2:
            raise ValueError("need at least one source and two classes")
        if len(self.source_weights) != self.n_sources:
            raise ValueError(
                f"{len(self.source_weights)} weights for {self.n_sources} sources"
            )
        if any(w <= 0 for w in self.source_weights):
            raise ValueError("source weights must be positive")
        if min(self.width, self.tokens_per_sample, self.n_samples) < 1:
            raise ValueError("degenerate dimensions")
        if not (self.shared_rank >= 1 and 0 <= self.source_rank <= self.width):
            raise ValueError("degenerate latent ranks")
        if not 0.0 < self.train_fraction < 1.0:
            raise ValueError("train_fraction must be in (0, 1)")


@dataclass
class SourceSpec:
    source_id: int
    weight: float
    mean: Array  # (D,)
    basis: Array  # (D, r) orthonormal columns
    noise_scale: float


@dataclass
class TokenBatch:
    """The unit flowing through attention, clustering, routing and experts."""

    tokens: Array  # (B, T, D)
    sources: Array  # (B,)
    labels: Array  # (B,)

    @property
    def token_sources(self) -> Array:
        """Per-token source ids, flattened to (B*T,)."""
        t = self.tokens.shape[1]
        return np.repeat(self.sources, t)


@dataclass
class DatasetBundle:
    tokens: Array  # (N, T, D)
    sources: Array  # (N,)
    labels: Array  # (N,)
    train_idx: Array
    test_idx: Array
    config: GeneratorConfig
    seed: int
    specs: list = field(default_factory=list)
    shared_basis: Array | None = None
    label_shared_map: Array | None = None  # (C, shared_rank)
    label_source_maps: Array | None = None  # (M, C, source_rank)
    latents_shared: Array | None = None  # (N, shared_rank)
    latents_source: Array | None = None  # (N, source_rank)

    @property
    def n_samples(self) -> int:
        return self.tokens.shape[0]

    def take(self, indices) -> TokenBatch:
        idx = np.asarray(indices)
        return TokenBatch(
            tokens=self.tokens[idx], sources=self.sources[idx], labels=self.labels[idx]
        )


def _orthonormal(rng: np.random.Generator, width: int, rank: int) -> Array:
    if rank == 0:
        return np.zeros((width, 0))
    q, _ = np.linalg.qr(rng.standard_normal((width, rank)))
    return q[:, :rank]


def build_source_specs(cfg: GeneratorConfig, rng: np.random.Generator) -> list:
    common = None
    if cfg.source_basis_mode == "shared":
        common = _orthonormal(rng, cfg.width, cfg.source_rank)
    specs = []
    for m in range(cfg.n_sources):
        basis = common if common is not None else _orthonormal(rng, cfg.width, cfg.source_rank)
        specs.append(
            SourceSpec(
                source_id=m,
                weight=float(cfg.source_weights[m]),
                mean=cfg.mean_scale * rng.standard_normal(cfg.width),
                basis=cfg.source_scale * basis.copy(),
                noise_scale=float(cfg.noise_scale),
            )
        )
    return specs


def generate(cfg: GeneratorConfig, seed: int) -> DatasetBundle:
    """Build the full dataset plus a seeded-shuffle train/test split."""
    cfg.validate()
    streams = RandomStreams(seed)
    rng = streams.stream("data")

    specs = build_source_specs(cfg, rng)
    shared_basis = cfg.shared_scale * _orthonormal(rng, cfg.width, cfg.shared_rank)
    label_shared = cfg.label_shared_scale * rng.standard_normal((cfg.n_classes, cfg.shared_rank))
    label_source = cfg.label_source_scale * rng.standard_normal(
        (cfg.n_sources, cfg.n_classes, cfg.source_rank)
    )

    weights = np.array([s.weight for s in specs])
    weights = weights / weights.sum()

    n, t, d = cfg.n_samples, cfg.tokens_per_sample, cfg.width
    tokens = np.empty((n, t, d))
    sources = np.empty(n, dtype=np.int64)
    labels = np.empty(n, dtype=np.int64)
    zs = np.empty((n, cfg.shared_rank))
    us = np.empty((n, max(cfg.source_rank, 1)))
    for i in range(n):
        m = int(rng.choice(cfg.n_sources, p=weights))
        spec = specs[m]
        z = rng.standard_normal(cfg.shared_rank)
        u = rng.standard_normal(cfg.source_rank)
        base = spec.mean + shared_basis @ z + spec.basis @ u
        tokens[i] = base + spec.noise_scale * rng.standard_normal((t, d))
        scores = label_shared @ z + label_source[m] @ u
        sources[i] = m
        labels[i] = int(np.argmax(scores))
        zs[i] = z
        us[i, : cfg.source_rank] = u

    perm = rng.permutation(n)
    n_train = int(round(cfg.train_fraction * n))
    train_idx = np.sort(perm[:n_train])
    test_idx = np.sort(perm[n_train:])

    return DatasetBundle(
        tokens=tokens,
        sources=sources,
        labels=labels,
        train_idx=train_idx,
        test_idx=test_idx,
        config=cfg,
        seed=int(seed),
        specs=specs,
        shared_basis=shared_basis,
        label_shared_map=label_shared,
        label_source_maps=label_source,
        latents_shared=zs,
        latents_source=us[:, : cfg.source_rank],
    )


def leave_source_out(bundle: DatasetBundle, holdout: int):
    """Split a dataset into (all other sources, the held-out source).

    The kept part inherits the original train/test membership of its
    samples; the held-out part is evaluation-only (all samples in its test
    split). Together the two parts are exactly the original samples.
    """
    if holdout not in set(np.unique(bundle.sources).tolist()):
        raise ValueError(f"holdout source {holdout} not present")
    keep_mask = bundle.sources != holdout
    keep_pos = np.flatnonzero(keep_mask)
    held_pos = np.flatnonzero(~keep_mask)

    remap = -np.ones(bundle.n_samples, dtype=np.int64)
    remap[keep_pos] = np.arange(keep_pos.size)
    train_mask = np.zeros(bundle.n_samples, dtype=bool)
    train_mask[bundle.train_idx] = True

    kept = DatasetBundle(
        tokens=bundle.tokens[keep_pos],
        sources=bundle.sources[keep_pos],
        labels=bundle.labels[keep_pos],
        train_idx=remap[np.flatnonzero(keep_mask & train_mask)],
        test_idx=remap[np.flatnonzero(keep_mask & ~train_mask)],
        config=bundle.config,
        seed=bundle.seed,
        specs=bundle.specs,
        shared_basis=bundle.shared_basis,
    )
    held = DatasetBundle(
        tokens=bundle.tokens[held_pos],
        sources=bundle.sources[held_pos],
        labels=bundle.labels[held_pos],
        train_idx=np.array([], dtype=np.int64),
        test_idx=np.arange(held_pos.size),
        config=bundle.config,
        seed=bundle.seed,
        specs=bundle.specs,
        shared_basis=bundle.shared_basis,
    )
    return kept, held


def generator_sidecar(bundle: DatasetBundle) -> dict:
    """JSON-ready description of how the dataset was produced."""
    return {
        "seed": bundle.seed,
        "generator": asdict(bundle.config),
        "train_indices": bundle.train_idx.tolist(),
        "test_indices": bundle.test_idx.tolist(),
        "source_counts": np.bincount(
            bundle.sources, minlength=bundle.config.n_sources
        ).tolist(),
    }
