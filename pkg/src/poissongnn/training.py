"""Unsupervised training on the discrete residual.

Nothing in this module sees a reference solution: the loss only needs the
assembled rows and right-hand side carried by each graph.
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, asdict
from typing import Callable, NamedTuple, Sequence

import numpy as np

from . import autodiff as ad
from .fem import FieldSpec, LinearSystem, assemble, n_monomials
from .geometry import (BoundaryPolicy, DomainConfig, Mesh, assign_boundary_kinds, calibrate_edge_length,
                       sample_domain)
from .graph import GraphProblem, build_graph
from .model import GraphBatch, ModelConfig, ModelParams, RolloutTrace, rollout

log = logging.getLogger(__name__)


class Sample(NamedTuple):
    mesh: Mesh
    system: LinearSystem
    graph: GraphProblem


@dataclass(frozen=True)
class DatasetSpec:
    num_samples: int
    node_range: tuple[int, int] = (300, 600)
    degree: int = 2
    coeff_range: tuple[float, float] = (-1.0, 1.0)
    # probability of a Neumann arc; otherwise the whole boundary is Dirichlet
    neumann_probability: float = 0.75
    neumann_fraction: tuple[float, float] = (0.2, 0.5)
    seed: int = 0
    domain: DomainConfig = DomainConfig()

    def __post_init__(self):
        lo, hi = self.node_range
        if self.num_samples < 0 or self.degree < 0 or not 3 <= lo <= hi:
            raise ValueError("invalid dataset spec")


def sample_problem(rng: np.random.Generator, spec: DatasetSpec, mesh_seed: int) -> Sample:
    shape = sample_domain(mesh_seed, spec.domain)
    lo, hi = spec.node_range
    target = int(rng.integers(lo, hi + 1))
    _, mesh = calibrate_edge_length(shape, target, spec.node_range)
    m = n_monomials(spec.degree)
    f = rng.uniform(*spec.coeff_range, size=m)
    g = rng.uniform(*spec.coeff_range, size=m)
    fields = FieldSpec(f, g, spec.degree)
    use_neumann = rng.uniform() < spec.neumann_probability
    policy = BoundaryPolicy("random_arc", spec.neumann_fraction) if use_neumann else BoundaryPolicy("all_dirichlet")
    mesh = assign_boundary_kinds(mesh, policy, seed=int(rng.integers(2**31)))
    system = assemble(mesh, fields)
    return Sample(mesh, system, build_graph(mesh, system, fields))


def sample_dataset(spec: DatasetSpec, indices: Sequence[int] | None = None) -> list[Sample]:
    """Independent samples, each drawn from its own child seed of ``spec.seed``.

    ``indices`` picks a subset of the ``spec.num_samples`` samples without
    generating the others.
    """
    children = np.random.SeedSequence(spec.seed).spawn(spec.num_samples)
    if indices is not None:
        children = [children[i] for i in indices]
    out = []
    for child in children:
        rng = np.random.default_rng(child)
        out.append(sample_problem(rng, spec, mesh_seed=int(rng.integers(2**31))))
    return out


# ---------------------------------------------------------------------------
# loss and optimizer


@dataclass(frozen=True)
class TrainConfig:
    k: int = 20
    epochs: int = 100
    batch_size: int = 8
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    recon_weight: float = 1.0
    seed: int = 0
    # cosine decay from learning_rate down to learning_rate * lr_floor; 1.0 = constant
    lr_floor: float = 1.0
    clip_norm: float | None = None
    divergence_threshold: float = 1e6
    model: ModelConfig = ModelConfig()

    def __post_init__(self):
        if self.k < 1 or self.batch_size < 1 or self.epochs < 0:
            raise ValueError("k and batch_size must be >= 1, epochs >= 0")
        if not self.learning_rate >= 0 or self.recon_weight < 0:
            raise ValueError("learning_rate and recon_weight must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["model"] = ModelConfig(**d.get("model", {}))
        return cls(**d)


def total_loss(trace: RolloutTrace, config: TrainConfig) -> ad.Tensor:
    """Sum over t = 1..k of residual/n + recon_weight * recon/n, averaged over graphs."""
    total = None
    for res, rec in zip(trace.residual_terms[1:], trace.recon_terms[1:]):
        term = res + ad.scale(rec, config.recon_weight) if config.recon_weight else res
        total = term if total is None else total + term
    return ad.scale(total, 1.0 / trace.n_graphs)


def raw_residual_loss(trace: RolloutTrace) -> np.ndarray:
    """Unnormalized squared residual of every recorded state."""
    return trace.residual_losses


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(params: ModelParams, grads: dict[str, np.ndarray], state: AdamState, config: TrainConfig,
              lr: float | None = None) -> ModelParams:
    """One bias-corrected Adam update, applied in place."""
    lr = config.learning_rate if lr is None else lr
    b1, b2 = config.adam_beta1, config.adam_beta2
    state.t += 1
    for name, p in params.tensors.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != parameter shape {p.shape}")
        m = state.m.get(name, np.zeros_like(g))
        v = state.v.get(name, np.zeros_like(g))
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        state.m[name], state.v[name] = m, v
        mhat = m / (1 - b1**state.t)
        vhat = v / (1 - b2**state.t)
        p.data = p.data - lr * mhat / (np.sqrt(vhat) + config.adam_eps)
    return params


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, params: ModelParams):
        super().__init__(message)
        self.params = params


def loss_and_grads(graphs: Sequence[GraphProblem] | GraphBatch, params: ModelParams,
                   config: TrainConfig) -> tuple[float, dict[str, np.ndarray]]:
    batch = graphs if isinstance(graphs, GraphBatch) else GraphBatch(graphs)
    with ad.Tape() as tape:
        trace = rollout(batch, params, config.k, keep_latents=False)
        loss = total_loss(trace, config)
    grads = ad.grad(loss, tape, params.values())
    return loss.item(), dict(zip(params.names(), grads))


def _learning_rate(config: TrainConfig, epoch: int) -> float:
    if config.lr_floor >= 1.0 or config.epochs <= 1:
        return config.learning_rate
    frac = min(epoch / (config.epochs - 1), 1.0)
    floor = config.learning_rate * config.lr_floor
    return floor + 0.5 * (config.learning_rate - floor) * (1 + math.cos(math.pi * frac))


@dataclass
class TrainState:
    params: ModelParams
    optimizer: AdamState
    epoch: int = 0
    best_loss: float = math.inf
    best_params: ModelParams | None = None
    history: list[float] = field(default_factory=list)


def train(dataset: Sequence[Sample | GraphProblem], config: TrainConfig, state: TrainState | None = None,
          on_epoch: Callable[[TrainState], None] | None = None) -> tuple[ModelParams, list[float]]:
    """Mini-batch Adam on the cumulative residual + reconstruction loss.

    Returns the parameters of the best epoch and the per-epoch mean losses.
    Passing a ``state`` resumes from it; the shuffle of epoch e depends only
    on (seed, e), so resumed runs match uninterrupted ones.
    """
    graphs = [s.graph if isinstance(s, Sample) else s for s in dataset]
    if not graphs:
        raise ValueError("empty dataset")
    if state is None:
        params = ModelParams.init(config.model)
        state = TrainState(params, AdamState(), best_params=params.copy())
    while state.epoch < config.epochs:
        epoch = state.epoch
        rng = np.random.default_rng([config.seed, epoch])
        order = rng.permutation(len(graphs))
        lr = _learning_rate(config, epoch)
        losses = []
        t0 = time.perf_counter()
        for start in range(0, len(order), config.batch_size):
            chunk = [graphs[i] for i in order[start:start + config.batch_size]]
            loss, grads = loss_and_grads(chunk, state.params, config)
            if not math.isfinite(loss) or loss > config.divergence_threshold:
                raise TrainingDiverged(f"loss {loss!r} at epoch {epoch}", state.best_params)
            if config.clip_norm is not None:
                norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
                if norm > config.clip_norm:
                    grads = {k: g * (config.clip_norm / norm) for k, g in grads.items()}
            adam_step(state.params, grads, state.optimizer, config, lr=lr)
            losses.append(loss * len(chunk))
        mean = float(np.sum(losses) / len(graphs))
        state.history.append(mean)
        state.epoch += 1
        if mean < state.best_loss:
            state.best_loss = mean
            state.best_params = state.params.copy()
        log.info("epoch %d loss %.6e lr %.2e (%.1fs)", epoch, mean, lr, time.perf_counter() - t0)
        if on_epoch is not None:
            on_epoch(state)
    best = state.best_params if state.best_params is not None else state.params
    return best, list(state.history)
