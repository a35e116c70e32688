"""Action decoder: one gated recurrent cell plus a linear logit head.

The decoder consumes encoder features in temporal order, starting from
a zero hidden state at every trajectory or episode boundary, and emits
a distribution over the six navigation actions at each step.  Training
uses the fused recurrence primitive on the tape; evaluation uses a
plain NumPy step that the fused route is tested against.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import gridworld
from .encoder import BackboneSet, encode_np
from .rng import substream
from .tensor import ParamStore, Tape

GRU_W = "policy.gru.w_input"
GRU_U = "policy.gru.w_hidden"
GRU_B = "policy.gru.bias"
HEAD_W = "policy.head.weight"
HEAD_B = "policy.head.bias"

POLICY_PARAM_NAMES = (GRU_W, GRU_U, GRU_B, HEAD_W, HEAD_B)


@dataclass
class PolicyConfig:
    feature_dim: int = 128
    hidden_dim: int = 64
    n_actions: int = 6


@dataclass
class ActionDistribution:
    logits: np.ndarray
    probs: np.ndarray = field(init=False)

    def __post_init__(self):
        shifted = self.logits - self.logits.max()
        e = np.exp(shifted)
        self.probs = e / e.sum()


def init_policy_params(store: ParamStore, master_seed: int, cfg: PolicyConfig) -> None:
    rng = substream(master_seed, "init", 2)
    d, H, A = cfg.feature_dim, cfg.hidden_dim, cfg.n_actions
    store.add(GRU_W, rng.standard_normal((d, 3 * H)) / np.sqrt(d))
    store.add(GRU_U, rng.standard_normal((H, 3 * H)) / np.sqrt(H))
    store.add(GRU_B, np.zeros(3 * H))
    store.add(HEAD_W, rng.standard_normal((H, A)) / np.sqrt(H))
    store.add(HEAD_B, np.zeros(A))


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def decode_step(
    params: ParamStore, state: np.ndarray, feature: np.ndarray, cfg: PolicyConfig
) -> tuple[ActionDistribution, np.ndarray]:
    """One recurrence step; logits depend on the new state only."""
    if feature.shape != (cfg.feature_dim,):
        raise ValueError(f"feature shape {feature.shape} != ({cfg.feature_dim},)")
    H = cfg.hidden_dim
    w, u, b = params[GRU_W], params[GRU_U], params[GRU_B]
    xa = feature @ w + b
    z = _sigmoid(xa[:H] + state @ u[:, :H])
    r = _sigmoid(xa[H : 2 * H] + state @ u[:, H : 2 * H])
    c = np.tanh(xa[2 * H :] + (r * state) @ u[:, 2 * H :])
    new_state = (1.0 - z) * state + z * c
    logits = new_state @ params[HEAD_W] + params[HEAD_B]
    return ActionDistribution(logits), new_state


def decode_sequence(
    params: ParamStore, features: np.ndarray, cfg: PolicyConfig
) -> list[ActionDistribution]:
    """Fold decode_step from a zero state over feature rows."""
    if len(features) == 0:
        raise ValueError("cannot decode an empty feature sequence")
    state = np.zeros(cfg.hidden_dim)
    out = []
    for row in np.asarray(features, dtype=np.float64):
        dist, state = decode_step(params, state, row, cfg)
        out.append(dist)
    return out


def sequence_logits(tape: Tape, feature_node: int, cfg: PolicyConfig) -> int:
    """Training route: fused recurrence then the head; (L, n_actions) node."""
    hs = tape.gru_sequence(
        feature_node, tape.param(GRU_W), tape.param(GRU_U), tape.param(GRU_B)
    )
    return tape.affine(hs, tape.param(HEAD_W), tape.param(HEAD_B))


def decode_step_tape(
    tape: Tape, state_node: int, feature_node: int, cfg: PolicyConfig
) -> tuple[int, int]:
    """Composed-primitive step, equivalent to decode_step; used by tests.

    Takes and returns (1, H) state nodes; returns (logits_node, new_state).
    """
    H = cfg.hidden_dim
    w, u, b = tape.param(GRU_W), tape.param(GRU_U), tape.param(GRU_B)
    xa = tape.affine(feature_node, w, b)
    su = tape.matmul(state_node, tape.slice_cols(u, 0, 2 * H))
    z = tape.sigmoid(tape.add(tape.slice_cols(xa, 0, H), tape.slice_cols(su, 0, H)))
    r = tape.sigmoid(tape.add(tape.slice_cols(xa, H, 2 * H), tape.slice_cols(su, H, 2 * H)))
    rh = tape.mul(r, state_node)
    ac = tape.add(
        tape.slice_cols(xa, 2 * H, 3 * H), tape.matmul(rh, tape.slice_cols(u, 2 * H, 3 * H))
    )
    c = tape.tanh(ac)
    ones = tape.const(np.ones((1, H)))
    new_state = tape.add(tape.mul(tape.sub(ones, z), state_node), tape.mul(z, c))
    logits = tape.affine(new_state, tape.param(HEAD_W), tape.param(HEAD_B))
    return logits, new_state


class GreedyPolicy:
    """Argmax policy over encoder features; ties break to the lowest code.

    Hidden state persists across an episode and resets between episodes
    (rollout calls ``reset``).
    """

    def __init__(
        self,
        params: ParamStore,
        backbones: BackboneSet,
        cfg: PolicyConfig,
    ):
        self.params = params
        self.backbones = backbones
        self.cfg = cfg
        self.state = np.zeros(cfg.hidden_dim)

    def reset(self) -> None:
        self.state = np.zeros(self.cfg.hidden_dim)

    def act(self, obs: gridworld.Observation) -> int:
        feature = encode_np(self.backbones, self.params, obs)
        dist, self.state = decode_step(self.params, self.state, feature, self.cfg)
        return int(np.argmax(dist.probs))


def greedy_policy(params: ParamStore, backbones: BackboneSet, cfg: PolicyConfig) -> GreedyPolicy:
    return GreedyPolicy(params, backbones, cfg)
