"""Multimodal encoder: frozen random backbones, trainable projectors.

Each observation modality (semantic patch, depth rays, pose delta,
previous action, goal category) passes through a frozen seeded
orthogonal projection to a backbone embedding, then through a trainable
affine projector to its feature slice.  Visual and depth slices get a
tanh; the slices concatenate, in fixed order, to the policy feature.

The frozen backbones never change across stages or strategies for a
given master seed, so the raw visual embedding doubles as the
representation space for keyframe selection.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .gridworld import N_ACTIONS, Observation, ObsConfig, P_OBJECT_BASE, Trajectory
from .rng import substream
from .tensor import ParamStore, Tape

MODALITIES = ("visual", "depth", "pose", "prev_action", "goal")
TANH_MODALITIES = ("visual", "depth")


@dataclass
class EncoderConfig:
    obs: ObsConfig = field(default_factory=ObsConfig)
    backbone_dims: dict = field(
        default_factory=lambda: {
            "visual": 64, "depth": 16, "pose": 16, "prev_action": 8, "goal": 16,
        }
    )
    feature_dims: dict = field(
        default_factory=lambda: {
            "visual": 64, "depth": 32, "pose": 16, "prev_action": 8, "goal": 8,
        }
    )

    @property
    def n_patch_codes(self) -> int:
        return P_OBJECT_BASE + self.obs.n_categories

    def raw_dim(self, modality: str) -> int:
        if modality == "visual":
            return self.obs.patch_size**2 * self.n_patch_codes
        if modality == "depth":
            return self.obs.depth_rays
        if modality == "pose":
            return 7
        if modality == "prev_action":
            return N_ACTIONS
        if modality == "goal":
            return self.obs.n_categories
        raise KeyError(modality)

    @property
    def feature_dim(self) -> int:
        return sum(self.feature_dims[m] for m in MODALITIES)

    def slice_of(self, modality: str) -> slice:
        start = 0
        for m in MODALITIES:
            if m == modality:
                return slice(start, start + self.feature_dims[m])
            start += self.feature_dims[m]
        raise KeyError(modality)


def orthogonal_matrix(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    """Semi-orthogonal (rows, cols) matrix: orthonormal columns or rows."""
    big, small = max(rows, cols), min(rows, cols)
    a = rng.standard_normal((big, small))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    return np.ascontiguousarray(q if rows >= cols else q.T)


@dataclass
class BackboneSet:
    """Frozen per-modality projection matrices, (raw_dim, backbone_dim)."""

    matrices: dict[str, np.ndarray]
    cfg: EncoderConfig

    @property
    def visual_dim(self) -> int:
        return self.matrices["visual"].shape[1]


def make_backbones(master_seed: int, cfg: EncoderConfig) -> BackboneSet:
    matrices = {}
    for i, modality in enumerate(MODALITIES):
        rng = substream(master_seed, "init", 0, i)
        m = orthogonal_matrix(rng, cfg.raw_dim(modality), cfg.backbone_dims[modality])
        m.setflags(write=False)
        matrices[modality] = m
    return BackboneSet(matrices=matrices, cfg=cfg)


def init_projectors(store: ParamStore, master_seed: int, cfg: EncoderConfig) -> None:
    """Add trainable projector parameters under encoder.proj_<modality>.*"""
    for i, modality in enumerate(MODALITIES):
        rng = substream(master_seed, "init", 1, i)
        w = orthogonal_matrix(rng, cfg.backbone_dims[modality], cfg.feature_dims[modality])
        store.add(f"encoder.proj_{modality}.weight", w)
        store.add(f"encoder.proj_{modality}.bias", np.zeros(cfg.feature_dims[modality]))


def projector_names(cfg: EncoderConfig) -> list[str]:
    names = []
    for modality in MODALITIES:
        names.append(f"encoder.proj_{modality}.weight")
        names.append(f"encoder.proj_{modality}.bias")
    return names


# ---------------------------------------------------------------------------
# Raw observation vectors


def observation_raw(obs: Observation, cfg: EncoderConfig) -> dict[str, np.ndarray]:
    """Flatten an observation into per-modality float vectors."""
    n_codes = cfg.n_patch_codes
    flat = obs.patch.reshape(-1)
    onehot = np.zeros((flat.size, n_codes))
    onehot[np.arange(flat.size), flat] = 1.0
    return {
        "visual": onehot.reshape(-1),
        "depth": obs.depth,
        "pose": obs.pose_delta,
        "prev_action": obs.prev_action,
        "goal": obs.goal_onehot,
    }


def _stack_raw(observations: list[Observation], cfg: EncoderConfig) -> dict[str, np.ndarray]:
    rows = [observation_raw(o, cfg) for o in observations]
    return {m: np.stack([r[m] for r in rows]) for m in MODALITIES}


def backbone_embed(backbones: BackboneSet, raw: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    """Apply the frozen matrices; rows of raw map to rows of embeddings."""
    return {m: raw[m] @ backbones.matrices[m] for m in MODALITIES}


def visual_embedding(backbones: BackboneSet, obs: Observation) -> np.ndarray:
    """Frozen visual backbone output, independent of trainable parameters."""
    raw = observation_raw(obs, backbones.cfg)
    return raw["visual"] @ backbones.matrices["visual"]


def trajectory_visual_embeddings(backbones: BackboneSet, traj: Trajectory) -> np.ndarray:
    raw = _stack_raw(traj.observations, backbones.cfg)
    return raw["visual"] @ backbones.matrices["visual"]


# ---------------------------------------------------------------------------
# Trainable encoding


def encode_rows(tape: Tape, backbones: BackboneSet, observations: list[Observation]) -> int:
    """Tape node of shape (len(observations), feature_dim).

    Differentiable with respect to projector parameters only; the
    backbone embeddings enter the tape as constants.
    """
    if not observations:
        raise ValueError("cannot encode an empty observation sequence")
    emb = backbone_embed(backbones, _stack_raw(observations, backbones.cfg))
    parts = []
    for modality in MODALITIES:
        node = tape.affine(
            tape.const(emb[modality]),
            tape.param(f"encoder.proj_{modality}.weight"),
            tape.param(f"encoder.proj_{modality}.bias"),
        )
        if modality in TANH_MODALITIES:
            node = tape.tanh(node)
        parts.append(node)
    return tape.concat(parts)


def encode(tape: Tape, backbones: BackboneSet, obs: Observation) -> int:
    """Single-observation feature node of shape (1, feature_dim)."""
    return encode_rows(tape, backbones, [obs])


def encode_trajectory(tape: Tape, backbones: BackboneSet, traj: Trajectory) -> int:
    """Feature node (L, feature_dim) in temporal order."""
    return encode_rows(tape, backbones, traj.observations)


def encode_rows_np(
    backbones: BackboneSet, params: ParamStore, observations: list[Observation]
) -> np.ndarray:
    """Same math as encode_rows without a tape (evaluation/storage path)."""
    if not observations:
        raise ValueError("cannot encode an empty observation sequence")
    emb = backbone_embed(backbones, _stack_raw(observations, backbones.cfg))
    parts = []
    for modality in MODALITIES:
        w = params[f"encoder.proj_{modality}.weight"]
        b = params[f"encoder.proj_{modality}.bias"]
        h = emb[modality] @ w + b
        if modality in TANH_MODALITIES:
            h = np.tanh(h)
        parts.append(h)
    return np.hstack(parts)


def encode_np(backbones: BackboneSet, params: ParamStore, obs: Observation) -> np.ndarray:
    return encode_rows_np(backbones, params, [obs])[0]
