"""Continual training: losses, the feature buffer, and six strategies.

Each stage trains on trajectories for its own goal categories.  The
anti-forgetting machinery is dual-path: a distillation term keeps the
evolving encoder close to the previous stage's encoder on current-task
observations, while replayed keyframe features with their action labels
keep the decoder consistent on earlier tasks.  Replayed features are
encoded once, at storage time, and never refreshed; the distillation
path is what keeps the live encoder compatible with those stale
features.

Strategies: finetune (current loss only), lwf (logit distillation),
merge (parameter interpolation after the stage), data-replay (raw
trajectories mixed into batches and re-encoded), cnav-uniform (feature
replay with uniform keyframes), and cnav (feature replay with LOF
keyframes plus distillation).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .encoder import (
    BackboneSet,
    encode_rows_np,
    encode_trajectory,
    trajectory_visual_embeddings,
)
from .gridworld import Trajectory
from .policy import PolicyConfig, decode_sequence, sequence_logits
from .rng import substream
from .selection import LofConfig, cluster_sample, select_keyframes, uniform_sample
from .tensor import OptimConfig, ParamStore, Tape, adamw_step, interpolate_params, lr_at

BUFFER_VERSION = "cnav-buf-v1"

LWF_COEFF = 0.2
MERGE_ALPHA = 0.7


class Strategy(str, Enum):
    FINETUNE = "finetune"
    LWF = "lwf"
    MERGE = "merge"
    DATA_REPLAY = "data-replay"
    CNAV_UNIFORM = "cnav-uniform"
    CNAV = "cnav"


FEATURE_REPLAY_STRATEGIES = (Strategy.CNAV, Strategy.CNAV_UNIFORM)


@dataclass
class LossWeights:
    gamma: float = 3.48
    lambda_kd: float = 5.0
    lambda_fr: float = 5.0
    kd_exponent: int = 2

    def __post_init__(self):
        if min(self.gamma, self.lambda_kd, self.lambda_fr) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.kd_exponent not in (1, 2):
            raise ValueError("kd_exponent must be 1 or 2")


def inflection_weights(actions, gamma: float) -> np.ndarray:
    """w_1 = 1; w_t = 1 + gamma when the action changes from step t-1."""
    actions = np.asarray(actions)
    w = np.ones(len(actions))
    if len(actions) > 1:
        w[1:][actions[1:] != actions[:-1]] = 1.0 + gamma
    return w


# ---------------------------------------------------------------------------
# Replay memory


@dataclass
class FeatureBufferEntry:
    task_id: int
    traj_id: str
    category: int
    features: np.ndarray  # (m, d) encoder outputs at storage time
    actions: np.ndarray  # (m,) int
    weights: np.ndarray  # (m,) inflection weights on the sparse sequence
    frame_indices: np.ndarray  # (m,) original 0-based frame indices
    source_length: int

    def __post_init__(self):
        assert len(self.features) == len(self.actions) == len(self.weights)
        assert np.all(np.diff(self.frame_indices) > 0)
        for arr in (self.features, self.actions, self.weights, self.frame_indices):
            arr.setflags(write=False)


class FeatureBuffer:
    """Append-only store of sparse trajectory features across stages."""

    def __init__(self):
        self.entries: list[FeatureBufferEntry] = []

    def __len__(self) -> int:
        return len(self.entries)

    def add(self, entry: FeatureBufferEntry) -> None:
        self.entries.append(entry)

    def stored_frames(self) -> int:
        return sum(len(e.actions) for e in self.entries)

    def source_frames(self) -> int:
        return sum(e.source_length for e in self.entries)

    def feature_bytes(self) -> int:
        return sum(e.features.nbytes for e in self.entries)


def save_buffer(buffer: FeatureBuffer, prefix) -> None:
    """Write ``<prefix>.jsonl`` manifest and ``<prefix>.bin`` feature blob."""
    dim = buffer.entries[0].features.shape[1] if buffer.entries else 0
    lines = [
        json.dumps(
            {"version": BUFFER_VERSION, "feature_dim": dim, "entries": len(buffer.entries)},
            sort_keys=True,
            separators=(",", ":"),
        )
    ]
    chunks = []
    offset = 0
    for e in buffer.entries:
        raw = np.ascontiguousarray(e.features, dtype="<f8").tobytes()
        lines.append(
            json.dumps(
                {
                    "task": e.task_id,
                    "traj_id": e.traj_id,
                    "category": e.category,
                    "actions": e.actions.tolist(),
                    "weights": e.weights.tolist(),
                    "frame_indices": e.frame_indices.tolist(),
                    "source_length": e.source_length,
                    "rows": int(e.features.shape[0]),
                    "byte_offset": offset,
                    "byte_len": len(raw),
                },
                sort_keys=True,
                separators=(",", ":"),
            )
        )
        chunks.append(raw)
        offset += len(raw)
    with open(f"{prefix}.jsonl", "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    with open(f"{prefix}.bin", "wb") as fh:
        fh.write(b"".join(chunks))


def load_buffer(prefix) -> FeatureBuffer:
    with open(f"{prefix}.jsonl", encoding="utf-8") as fh:
        lines = [json.loads(line) for line in fh if line.strip()]
    header = lines[0]
    if header.get("version") != BUFFER_VERSION:
        raise ValueError(
            f"buffer version mismatch: got {header.get('version')!r}, "
            f"expected {BUFFER_VERSION!r}"
        )
    with open(f"{prefix}.bin", "rb") as fh:
        blob = fh.read()
    buffer = FeatureBuffer()
    dim = header["feature_dim"]
    for doc in lines[1:]:
        raw = blob[doc["byte_offset"] : doc["byte_offset"] + doc["byte_len"]]
        features = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(doc["rows"], dim)
        buffer.add(
            FeatureBufferEntry(
                task_id=doc["task"],
                traj_id=doc["traj_id"],
                category=doc["category"],
                features=features,
                actions=np.asarray(doc["actions"], dtype=np.intp),
                weights=np.asarray(doc["weights"], dtype=np.float64),
                frame_indices=np.asarray(doc["frame_indices"], dtype=np.intp),
                source_length=doc["source_length"],
            )
        )
    return buffer


@dataclass
class TrainItem:
    """A training trajectory with a stable id for buffer bookkeeping."""

    traj_id: str
    trajectory: Trajectory

    @property
    def category(self) -> int:
        return self.trajectory.episode.goal_category


@dataclass
class RawReplayItem:
    task_id: int
    item: TrainItem


# ---------------------------------------------------------------------------
# Losses (tape nodes)


def loss_current(
    tape: Tape,
    backbones: BackboneSet,
    traj: Trajectory,
    gamma: float,
    pol_cfg: PolicyConfig,
    feature_node: int | None = None,
) -> int:
    """Inflection-weighted behavior cloning on one trajectory (mean NLL)."""
    if len(traj) == 0:
        raise ValueError("empty trajectory")
    if feature_node is None:
        feature_node = encode_trajectory(tape, backbones, traj)
    logits = sequence_logits(tape, feature_node, pol_cfg)
    return tape.softmax_xent(logits, traj.actions, inflection_weights(traj.actions, gamma))


def loss_kd(
    tape: Tape,
    backbones: BackboneSet,
    prev_params: ParamStore,
    traj: Trajectory,
    exponent: int = 2,
    feature_node: int | None = None,
) -> int:
    """Feature distillation: distance between old and new encodings.

    Old features come from the frozen previous-stage parameters and
    enter as constants; gradient flows to the new projectors only.
    Exponent 2 sums squared l2 distances over time, exponent 1 sums
    plain l2 distances.
    """
    if feature_node is None:
        feature_node = encode_trajectory(tape, backbones, traj)
    old = tape.const(encode_rows_np(backbones, prev_params, traj.observations))
    if exponent == 2:
        return tape.sq_diff_sum(feature_node, old)
    return tape.rownorm_sum(feature_node, old)


def loss_fr(tape: Tape, entry: FeatureBufferEntry, pol_cfg: PolicyConfig) -> int:
    """Feature replay: weighted NLL of stored actions given stored features."""
    if entry.features.shape[1] != pol_cfg.feature_dim:
        raise ValueError(
            f"stored feature dim {entry.features.shape[1]} != decoder dim {pol_cfg.feature_dim}"
        )
    logits = sequence_logits(tape, tape.const(entry.features), pol_cfg)
    return tape.softmax_xent(logits, entry.actions, entry.weights)


def lwf_kl(
    tape: Tape,
    backbones: BackboneSet,
    prev_params: ParamStore,
    traj: Trajectory,
    logits_node: int,
    pol_cfg: PolicyConfig,
) -> int:
    """Mean per-step KL(previous-model action probs || current probs)."""
    old_feats = encode_rows_np(backbones, prev_params, traj.observations)
    old_probs = np.stack([d.probs for d in decode_sequence(prev_params, old_feats, pol_cfg)])
    return tape.kl_softmax(logits_node, old_probs)


def _mean_nodes(tape: Tape, nodes: list[int]) -> int:
    acc = nodes[0]
    for node in nodes[1:]:
        acc = tape.add(acc, node)
    return tape.scale(acc, 1.0 / len(nodes))


def loss_total(
    tape: Tape,
    current_nodes: list[int],
    kd_nodes: list[int],
    fr_nodes: list[int],
    weights: LossWeights,
) -> int:
    """Composite objective; absent component lists contribute zero."""
    if not current_nodes and not fr_nodes:
        raise ValueError("nothing to optimize")
    total = None
    for nodes, lam in (
        (current_nodes, 1.0),
        (kd_nodes, weights.lambda_kd),
        (fr_nodes, weights.lambda_fr),
    ):
        if not nodes or lam == 0.0:
            continue
        term = tape.scale(_mean_nodes(tape, nodes), lam)
        total = term if total is None else tape.add(total, term)
    if total is None:  # all weighted terms vanished; fall back to a true zero
        total = tape.scale(_mean_nodes(tape, current_nodes), 0.0)
    return total


# ---------------------------------------------------------------------------
# Batch scheduling


def batch_scheduler(
    current_items: list,
    replay_items: list,
    mix_ratio: float,
    batch_size: int,
    rng: np.random.Generator,
):
    """Yield (current_batch, replay_batch) pairs covering one epoch.

    Each batch reserves floor(mix_ratio * batch_size) slots for replay
    when replay items exist; replay items are drawn from reshuffled
    permutations (no repeats until the pool is exhausted).  Current
    items are consumed exactly once per epoch in shuffled order.
    """
    if not 0 <= mix_ratio <= 1:
        raise ValueError("mix_ratio must lie in [0, 1]")
    n_replay = int(mix_ratio * batch_size) if replay_items else 0
    if n_replay >= batch_size and current_items:
        raise ValueError("mix_ratio leaves no room for current items")
    order = rng.permutation(len(current_items))
    per_batch = batch_size - n_replay

    replay_order: list[int] = []

    def take_replay(n: int) -> list:
        nonlocal replay_order
        out = []
        for _ in range(n):
            if not replay_order:
                replay_order = list(rng.permutation(len(replay_items)))
            out.append(replay_items[replay_order.pop(0)])
        return out

    for start in range(0, len(order), per_batch):
        chunk = [current_items[i] for i in order[start : start + per_batch]]
        yield chunk, take_replay(n_replay)


# ---------------------------------------------------------------------------
# Stage orchestration


@dataclass
class StagePlan:
    index: int  # 1-based stage number
    categories: list[int]
    items: list[TrainItem]
    strategy: Strategy
    epochs: int = 12
    batch_size: int = 16
    replay_budget: int = 20
    mix_ratio: float = 0.25
    selection_method: str = "lof"  # lof | uniform | cluster | full
    retention_ratio: float = 0.5
    lof: LofConfig = field(default_factory=LofConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    base_lr: float = 3e-3
    weight_decay: float = 0.0
    warmup_cap: int = 100

    def __post_init__(self):
        if self.index < 1:
            raise ValueError("stage index is 1-based")
        if not self.items:
            raise ValueError(f"stage {self.index} has no training data")
        if self.replay_budget < 0:
            raise ValueError("replay budget must be >= 0")
        if self.selection_method not in ("lof", "uniform", "cluster", "full"):
            raise ValueError(f"unknown selection method {self.selection_method!r}")
        if not isinstance(self.strategy, Strategy):
            raise ValueError(f"unknown strategy {self.strategy!r}")


@dataclass
class TrainContext:
    backbones: BackboneSet
    pol_cfg: PolicyConfig
    master_seed: int


@dataclass
class TrainState:
    params: ParamStore
    prev_params: ParamStore | None = None
    feature_buffer: FeatureBuffer = field(default_factory=FeatureBuffer)
    raw_buffer: list[RawReplayItem] = field(default_factory=list)


@dataclass
class StageOutcome:
    state: TrainState
    transcript: list[dict]
    selection_report: list[dict]


def _select_indices(plan: StagePlan, embeddings: np.ndarray, seed: int) -> tuple[list[int], list[float]]:
    L = len(embeddings)
    if plan.selection_method == "lof":
        cfg = LofConfig(
            k_neighbors=plan.lof.k_neighbors,
            threshold=plan.lof.threshold,
            epsilon_norm=plan.lof.epsilon_norm,
            min_keep=plan.lof.min_keep,
            max_keep_ratio=plan.retention_ratio,
        )
        ks = select_keyframes(embeddings, cfg)
        return ks.indices, ks.scores
    if plan.selection_method == "uniform":
        idx = uniform_sample(L, plan.retention_ratio)
    elif plan.selection_method == "cluster":
        idx = cluster_sample(embeddings, plan.retention_ratio, seed=seed)
    else:  # full
        idx = list(range(L))
    return idx, [0.0] * len(idx)


def _store_feature_entries(
    plan: StagePlan, state: TrainState, ctx: TrainContext
) -> list[dict]:
    """Sample trajectories per new category, select keyframes, store features."""
    report = []
    by_category: dict[int, list[TrainItem]] = {}
    for item in plan.items:
        by_category.setdefault(item.category, []).append(item)
    for category in sorted(by_category):
        pool = by_category[category]
        rng = substream(ctx.master_seed, "buffer-sample", plan.index, category)
        picks = rng.permutation(len(pool))[: plan.replay_budget]
        for pick in sorted(picks.tolist()):
            item = pool[pick]
            traj = item.trajectory
            emb = trajectory_visual_embeddings(ctx.backbones, traj)
            kmeans_seed = int(
                substream(ctx.master_seed, "kmeans", plan.index, category, pick).integers(2**31)
            )
            indices, scores = _select_indices(plan, emb, kmeans_seed)
            features = encode_rows_np(ctx.backbones, state.params, traj.observations)[indices]
            actions = np.asarray(traj.actions, dtype=np.intp)[indices]
            weights = inflection_weights(actions, plan.weights.gamma)
            entry = FeatureBufferEntry(
                task_id=plan.index,
                traj_id=item.traj_id,
                category=category,
                features=np.ascontiguousarray(features),
                actions=actions,
                weights=weights,
                frame_indices=np.asarray(indices, dtype=np.intp),
                source_length=len(traj),
            )
            state.feature_buffer.add(entry)
            report.append(
                {
                    "stage": plan.index,
                    "traj_id": item.traj_id,
                    "category": category,
                    "method": plan.selection_method,
                    "length": len(traj),
                    "indices": list(map(int, indices)),
                    "scores": [float(s) for s in scores],
                    "retention": len(indices) / len(traj),
                }
            )
    return report


def _store_raw_entries(plan: StagePlan, state: TrainState, ctx: TrainContext) -> None:
    by_category: dict[int, list[TrainItem]] = {}
    for item in plan.items:
        by_category.setdefault(item.category, []).append(item)
    for category in sorted(by_category):
        pool = by_category[category]
        rng = substream(ctx.master_seed, "buffer-sample", plan.index, category)
        picks = rng.permutation(len(pool))[: plan.replay_budget]
        for pick in sorted(picks.tolist()):
            state.raw_buffer.append(RawReplayItem(task_id=plan.index, item=pool[pick]))


def run_stage(plan: StagePlan, state: TrainState, ctx: TrainContext) -> StageOutcome:
    """Train one stage under the plan's strategy and update replay memory.

    For stage 1 every strategy reduces to plain behavior cloning, so all
    six produce identical parameters under one seed.  ``prev_params``
    must be present for later stages and is never modified here.
    """
    if plan.index > 1 and state.prev_params is None:
        raise ValueError("prev_params required for stages after the first")
    strategy = plan.strategy
    anti_forgetting = plan.index > 1

    use_feature_replay = (
        strategy in FEATURE_REPLAY_STRATEGIES and anti_forgetting and len(state.feature_buffer) > 0
    )
    use_raw_replay = (
        strategy == Strategy.DATA_REPLAY and anti_forgetting and len(state.raw_buffer) > 0
    )
    use_kd = (
        strategy in FEATURE_REPLAY_STRATEGIES
        and anti_forgetting
        and plan.weights.lambda_kd > 0
    )
    use_lwf = strategy == Strategy.LWF and anti_forgetting

    replay_pool: list = []
    if use_feature_replay:
        replay_pool = list(state.feature_buffer.entries)
    elif use_raw_replay:
        replay_pool = list(state.raw_buffer)

    n_replay_slots = int(plan.mix_ratio * plan.batch_size) if replay_pool else 0
    per_batch = plan.batch_size - n_replay_slots
    batches_per_epoch = -(-len(plan.items) // per_batch)
    total_steps = plan.epochs * batches_per_epoch
    optim = OptimConfig(
        base_lr=plan.base_lr,
        warmup_steps=min(plan.warmup_cap, max(1, total_steps // 10)),
        total_steps=total_steps,
        weight_decay=plan.weight_decay,
    )
    state.params.reset_moments()

    gamma = plan.weights.gamma
    transcript: list[dict] = []
    step = 0
    for epoch in range(plan.epochs):
        rng_batch = substream(ctx.master_seed, "batching", plan.index, epoch)
        sums = {"curr": 0.0, "kd": 0.0, "fr": 0.0, "total": 0.0}
        n_batches = 0
        scheduler = batch_scheduler(
            plan.items,
            replay_pool,
            plan.mix_ratio if replay_pool else 0.0,
            plan.batch_size,
            rng_batch,
        )
        for current_batch, replay_batch in scheduler:
            tape = Tape(state.params)
            cur_nodes: list[int] = []
            kd_nodes: list[int] = []
            fr_nodes: list[int] = []
            for item in current_batch:
                traj = item.trajectory
                feature = encode_trajectory(tape, ctx.backbones, traj)
                logits = sequence_logits(tape, feature, ctx.pol_cfg)
                node = tape.softmax_xent(
                    logits, traj.actions, inflection_weights(traj.actions, gamma)
                )
                if use_lwf:
                    kl = lwf_kl(tape, ctx.backbones, state.prev_params, traj, logits, ctx.pol_cfg)
                    node = tape.add(node, tape.scale(kl, LWF_COEFF))
                cur_nodes.append(node)
                if use_kd:
                    kd_nodes.append(
                        loss_kd(
                            tape,
                            ctx.backbones,
                            state.prev_params,
                            traj,
                            plan.weights.kd_exponent,
                            feature_node=feature,
                        )
                    )
            for replayed in replay_batch:
                if use_feature_replay:
                    fr_nodes.append(loss_fr(tape, replayed, ctx.pol_cfg))
                else:  # raw replay behaves like extra current-task data
                    traj = replayed.item.trajectory
                    cur_nodes.append(
                        loss_current(tape, ctx.backbones, traj, gamma, ctx.pol_cfg)
                    )
            total = loss_total(tape, cur_nodes, kd_nodes, fr_nodes, plan.weights)
            grads = tape.backward(total)
            step += 1
            adamw_step(state.params, grads, optim, step)
            n_batches += 1
            sums["total"] += float(tape.value(total))
            sums["curr"] += float(np.mean([tape.value(n) for n in cur_nodes])) if cur_nodes else 0.0
            sums["kd"] += float(np.mean([tape.value(n) for n in kd_nodes])) if kd_nodes else 0.0
            sums["fr"] += float(np.mean([tape.value(n) for n in fr_nodes])) if fr_nodes else 0.0
        transcript.append(
            {
                "stage": plan.index,
                "epoch": epoch,
                "loss_total": sums["total"] / n_batches,
                "loss_curr": sums["curr"] / n_batches,
                "loss_kd": sums["kd"] / n_batches,
                "loss_fr": sums["fr"] / n_batches,
                "lr": lr_at(optim, step),
                "batches": n_batches,
            }
        )

    if strategy == Strategy.MERGE and anti_forgetting:
        state.params = interpolate_params(state.params, state.prev_params, MERGE_ALPHA)

    selection_report: list[dict] = []
    if strategy in FEATURE_REPLAY_STRATEGIES:
        selection_report = _store_feature_entries(plan, state, ctx)
    elif strategy == Strategy.DATA_REPLAY:
        _store_raw_entries(plan, state, ctx)

    state.prev_params = state.params.copy()
    return StageOutcome(state=state, transcript=transcript, selection_report=selection_report)
