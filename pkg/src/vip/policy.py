"""Embedding-conditioned behavior cloning and closed-loop rollout."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

from . import nn
from .encoder import EMBED_DIM
from .errors import DimensionMismatch, EmptyBatch, MissingEmbedding
from .world import (
    A_MAX,
    FEATURE_DIM,
    HORIZON,
    Domain,
    Trajectory,
    WorldLayout,
    state_features,
    step_array,
)

log = logging.getLogger(__name__)

STATE_WIDTH = FEATURE_DIM + 1  # world features plus elapsed time t / H


@dataclass
class PolicyConfig:
    hidden: tuple[int, ...] = (128, 128)
    epochs: int = 40
    batch_size: int = 256
    learning_rate: float = 1e-3
    final_learning_rate: Optional[float] = None  # cosine decay target; None keeps the rate fixed
    sigma: float = 1.0  # fixed action std of the Gaussian head, in units of A_MAX
    horizon: int = HORIZON

    def spec(self) -> nn.MlpSpec:
        return nn.MlpSpec((STATE_WIDTH + EMBED_DIM, *self.hidden, 2), "tanh", "identity")


def policy_inputs(states: np.ndarray, layout: WorldLayout, embedding: np.ndarray, t=None) -> np.ndarray:
    """Policy input rows: state features, elapsed time and the conditioning embedding.

    ``t`` defaults to the row index, which is right for a whole trajectory.
    """
    feats = state_features(states, layout)
    tt = np.arange(feats.shape[0]) if t is None else np.full(feats.shape[:-1], t)
    tt = np.asarray(tt, dtype=np.float64).reshape(feats.shape[:-1] + (1,)) / HORIZON
    feats = np.concatenate([feats, tt], axis=-1)
    emb = np.broadcast_to(embedding, feats.shape[:-1] + (np.shape(embedding)[-1],))
    return np.concatenate([feats, emb], axis=-1)


def bc_loss(spec: nn.MlpSpec, params: nn.ParamVector, inputs: np.ndarray,
            targets: np.ndarray) -> tuple[float, nn.ParamVector]:
    """Per-axis mean squared error between predicted mean actions and targets.

    With a fixed-variance Gaussian head this is the negative log-likelihood up
    to a constant and a scale absorbed by the learning rate. Targets are in
    units of ``A_MAX``.
    """
    inputs = np.asarray(inputs, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if inputs.ndim != 2 or inputs.shape[0] == 0:
        raise EmptyBatch("bc_loss needs a non-empty 2-D batch")
    if targets.shape != (inputs.shape[0], spec.layer_widths[-1]):
        raise DimensionMismatch(f"targets {targets.shape} for batch {inputs.shape}")
    def mse(pred):
        diff = pred - targets
        return float(np.mean(diff * diff)), 2.0 * diff / diff.size

    return nn.mlp_loss_gradient(spec, params, inputs, mse)


def training_arrays(trajectories: Sequence[Trajectory],
                    embeddings: Mapping[int, np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    """Every (state, action) pair with the embedding of its own trajectory."""
    xs, ys = [], []
    for traj in trajectories:
        if traj.id not in embeddings:
            raise MissingEmbedding(f"no library entry for trajectory {traj.id}")
        xs.append(policy_inputs(traj.states[:-1], traj.layout, embeddings[traj.id]))
        ys.append(traj.actions / A_MAX)
    return np.concatenate(xs), np.concatenate(ys)


@dataclass
class PolicyRecord:
    epoch: int
    mse: float


def train_policy(trajectories: Sequence[Trajectory], embeddings: Mapping[int, np.ndarray],
                 config: PolicyConfig, seed: int) -> tuple[nn.ParamVector, list[PolicyRecord]]:
    """Minibatch behavior cloning over all (s_t, a_t, e_traj) triples.

    Trajectories must be label-stripped robot data; ``embeddings`` maps
    trajectory ids to library embeddings.
    """
    for traj in trajectories:
        if traj.domain != Domain.Robot:
            raise ValueError("policies are trained on robot trajectories only")
    x, y = training_arrays(trajectories, embeddings)
    rng = np.random.default_rng([seed, 23])
    spec = config.spec()
    params = nn.init_params(spec, rng)
    state = nn.OptimState.fresh(len(params), learning_rate=config.learning_rate)
    curve = [PolicyRecord(-1, bc_loss(spec, params, x, y)[0])]
    for epoch in range(config.epochs):
        if config.final_learning_rate is not None:
            frac = epoch / max(1, config.epochs - 1)
            lr = config.final_learning_rate + 0.5 * (config.learning_rate - config.final_learning_rate) * (1 + np.cos(np.pi * frac))
            state = replace(state, learning_rate=lr)
        order = rng.permutation(len(x))
        total = 0.0
        for start in range(0, len(x), config.batch_size):
            idx = order[start:start + config.batch_size]
            loss, grad = bc_loss(spec, params, x[idx], y[idx])
            params, state = nn.adam_step(params, grad, state)
            total += loss * len(idx)
        # running mean over the epoch's minibatches; the last entry is recomputed exactly
        curve.append(PolicyRecord(epoch, total / len(x)))
        log.debug("bc epoch %d mse %.5f", epoch, curve[-1].mse)
    if config.epochs:
        curve[-1] = PolicyRecord(config.epochs - 1, bc_loss(spec, params, x, y)[0])
    return params, curve


def act(spec: nn.MlpSpec, params: nn.ParamVector, state: np.ndarray, layout: WorldLayout,
        embedding: np.ndarray, t: int = 0) -> np.ndarray:
    """Deterministic mean action, clamped to the action box."""
    x = policy_inputs(np.asarray(state, dtype=np.float64), layout, np.asarray(embedding, dtype=np.float64), t)
    if x.shape[-1] != spec.layer_widths[0]:
        raise DimensionMismatch(f"policy input width {x.shape[-1]}, expected {spec.layer_widths[0]}")
    return np.clip(A_MAX * nn.mlp_forward(spec, params, x), -A_MAX, A_MAX)


def rollout(layout: WorldLayout, start_state: np.ndarray, spec: nn.MlpSpec, params: nn.ParamVector,
            embedding: np.ndarray, horizon: int = HORIZON, traj_id: int = -1) -> Trajectory:
    s = np.asarray(start_state, dtype=np.float64)
    states, actions = [s], []
    for t in range(horizon):
        a = act(spec, params, s, layout, embedding, t)
        s = step_array(layout, s, a)
        states.append(s)
        actions.append(a)
    return Trajectory(traj_id, np.stack(states), np.stack(actions), layout, Domain.Robot, stripped=True)


def save_policy(params: nn.ParamVector, config: PolicyConfig, library_fingerprint: str, path) -> None:
    path = Path(path)
    nn.save_params(params, path)
    sidecar = {
        "state_width": STATE_WIDTH,
        "E": EMBED_DIM,
        "horizon": config.horizon,
        "sigma": config.sigma,
        "hidden": list(config.hidden),
        "library_fingerprint": library_fingerprint,
    }
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2))


def load_policy(path) -> tuple[nn.ParamVector, dict]:
    path = Path(path)
    return nn.load_params(path), json.loads(path.with_suffix(".json").read_text())
