"""Learned construction of routing trees.

Tree building is cast as an episodic decision process: a FIFO queue of open
nodes is consumed, and for each node the policy either has no legal cut (the
node becomes a block) or samples one of the candidate cuts.  A cut is legal
when both sides keep more than sample_ratio * min_block_size sample rows.
The per-decision reward is the subtree's skipped-tuple total normalized by
workload size and node size, so rewards live in [0, 1].

The policy/value network is a small dense net implemented directly on numpy
arrays with handwritten backpropagation.  That keeps training single
threaded and bitwise reproducible for a fixed seed, and makes the gradients
directly checkable against finite differences.
"""

from __future__ import annotations

import math
import time
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .model import Cut, Dataset, Schema, Workload
from .rand import substream
from .tree import QdTree, SemanticDescription, description_from_rows
from .metrics import can_skip


class NonFiniteLoss(RuntimeError):
    """A training update produced NaN or infinity."""


@dataclass
class RlConfig:
    min_block_size: int
    sample_ratio: float = 0.1
    episodes: Optional[int] = None
    timeout_s: Optional[float] = None
    hidden_width: int = 64
    learning_rate: float = 3e-4
    clip_eps: float = 0.2
    entropy_weight: float = 0.01
    batch_episodes: int = 8
    seed: int = 0
    relaxed: bool = False

    def __post_init__(self) -> None:
        if not 0 < self.sample_ratio <= 1:
            raise ValueError("sample_ratio must be in (0, 1]")
        if self.min_block_size < 1:
            raise ValueError("min_block_size must be >= 1")
        if self.sample_ratio * self.min_block_size < 1:
            raise ValueError("sample_ratio * min_block_size must be >= 1 sample row")
        if self.episodes is not None and self.episodes < 1:
            raise ValueError("episodes must be positive")
        if self.timeout_s is not None and self.timeout_s <= 0:
            raise ValueError("timeout_s must be positive")
        if self.batch_episodes < 1:
            raise ValueError("batch_episodes must be >= 1")


# --- state featurization ---------------------------------------------------

def _bits_per_bound(domain_size: int) -> int:
    # hi bounds reach domain_size itself, so size the field for [0, D].
    return max(1, math.ceil(math.log2(domain_size + 1)))


def feature_width(schema: Schema, n_advanced: int) -> int:
    width = sum(2 * _bits_per_bound(schema.columns[i].domain_size) for i in schema.numeric_indices)
    width += sum(schema.columns[i].domain_size for i in schema.categorical_indices)
    return width + n_advanced


def featurize(desc: SemanticDescription, schema: Schema, n_advanced: int) -> np.ndarray:
    """Fixed-width binary state vector: bit-encoded range bounds, then
    categorical masks, then advanced-cut bits."""
    out = np.empty(feature_width(schema, n_advanced), dtype=np.float64)
    at = 0
    for pos, i in enumerate(schema.numeric_indices):
        nbits = _bits_per_bound(schema.columns[i].domain_size)
        for bound in desc.ranges[pos]:
            for k in range(nbits):
                out[at] = (bound >> k) & 1
                at += 1
    for pos, i in enumerate(schema.categorical_indices):
        mask = desc.masks[pos]
        for k in range(schema.columns[i].domain_size):
            out[at] = (mask >> k) & 1
            at += 1
    for k in range(n_advanced):
        out[at] = (desc.adv >> k) & 1
        at += 1
    return out


# --- policy/value network --------------------------------------------------

def masked_softmax(logits: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Softmax over legal entries only; illegal entries are exactly 0.0."""
    logits = np.asarray(logits, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if logits.ndim == 1:
        return masked_softmax(logits[None, :], mask[None, :])[0]
    if not mask.any(axis=1).all():
        raise ValueError("each row needs at least one legal action")
    x = np.where(mask, logits, -np.inf)
    x = x - x.max(axis=1, keepdims=True)
    e = np.exp(x)
    return e / e.sum(axis=1, keepdims=True)


class PolicyValueNet:
    """Two shared ReLU layers with a policy head and a scalar value head."""

    PARAM_ORDER = ("w1", "b1", "w2", "b2", "wp", "bp", "wv", "bv")

    def __init__(self, n_features: int, n_actions: int, hidden_width: int = 64, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.n_features = n_features
        self.n_actions = n_actions
        self.hidden_width = hidden_width

        def init(fan_in: int, shape) -> np.ndarray:
            bound = 1.0 / math.sqrt(fan_in)
            return rng.uniform(-bound, bound, size=shape)

        h = hidden_width
        self.params = {
            "w1": init(n_features, (n_features, h)),
            "b1": np.zeros(h),
            "w2": init(h, (h, h)),
            "b2": np.zeros(h),
            "wp": init(h, (h, n_actions)),
            "bp": np.zeros(n_actions),
            "wv": init(h, (h,)),
            "bv": np.zeros(1),
        }

    def forward(self, x: np.ndarray):
        p = self.params
        z1 = x @ p["w1"] + p["b1"]
        h1 = np.maximum(z1, 0.0)
        z2 = h1 @ p["w2"] + p["b2"]
        h2 = np.maximum(z2, 0.0)
        logits = h2 @ p["wp"] + p["bp"]
        values = h2 @ p["wv"] + p["bv"][0]
        cache = (x, z1, h1, z2, h2)
        return logits, values, cache

    def backward(self, cache, d_logits: np.ndarray, d_values: np.ndarray) -> dict:
        x, z1, h1, z2, h2 = cache
        p = self.params
        grads = {
            "wp": h2.T @ d_logits,
            "bp": d_logits.sum(axis=0),
            "wv": h2.T @ d_values,
            "bv": np.array([d_values.sum()]),
        }
        d_h2 = d_logits @ p["wp"].T + d_values[:, None] * p["wv"][None, :]
        d_z2 = d_h2 * (z2 > 0)
        grads["w2"] = h1.T @ d_z2
        grads["b2"] = d_z2.sum(axis=0)
        d_h1 = d_z2 @ p["w2"].T
        d_z1 = d_h1 * (z1 > 0)
        grads["w1"] = x.T @ d_z1
        grads["b1"] = d_z1.sum(axis=0)
        return grads

    def action_distribution(self, feature: np.ndarray, legal: np.ndarray) -> np.ndarray:
        logits, _, _ = self.forward(feature[None, :])
        return masked_softmax(logits[0], legal)

    def value(self, feature: np.ndarray) -> float:
        _, values, _ = self.forward(feature[None, :])
        return float(values[0])


def save_policy(policy: PolicyValueNet, path) -> None:
    import json

    shapes = {k: list(policy.params[k].shape) for k in PolicyValueNet.PARAM_ORDER}
    flat = np.concatenate([policy.params[k].ravel() for k in PolicyValueNet.PARAM_ORDER])
    with open(path, "w") as fh:
        json.dump({"shapes": shapes, "data": flat.tolist()}, fh)


def load_policy(path) -> PolicyValueNet:
    import json

    with open(path) as fh:
        obj = json.load(fh)
    shapes = obj["shapes"]
    flat = np.asarray(obj["data"], dtype=np.float64)
    n_features, hidden = shapes["w1"]
    n_actions = shapes["wp"][1]
    sizes = {
        k: int(np.prod(shapes[k])) if shapes[k] else 1 for k in PolicyValueNet.PARAM_ORDER
    }
    if flat.size != sum(sizes.values()):
        raise ValueError(
            f"checkpoint holds {flat.size} values but its shape header "
            f"needs {sum(sizes.values())}"
        )
    policy = PolicyValueNet(n_features, n_actions, hidden)
    at = 0
    for k in PolicyValueNet.PARAM_ORDER:
        policy.params[k] = flat[at : at + sizes[k]].reshape(tuple(shapes[k]))
        at += sizes[k]
    return policy


# --- episodes ---------------------------------------------------------------

def legal_actions(
    sample: Dataset, row_idx: np.ndarray, cuts: Sequence[Cut], cfg: RlConfig
) -> np.ndarray:
    """Mask of cuts that keep enough sample rows on both sides.

    Relaxed mode (overlap layouts) lets one side fall below the threshold as
    long as it remains nonempty.
    """
    threshold = cfg.sample_ratio * cfg.min_block_size
    values = sample.rows[row_idx]
    mask = np.zeros(len(cuts), dtype=bool)
    for i, cut in enumerate(cuts):
        nl = int(cut.matches(values).sum())
        nr = len(row_idx) - nl
        if cfg.relaxed:
            mask[i] = min(nl, nr) >= 1 and max(nl, nr) > threshold
        else:
            mask[i] = nl > threshold and nr > threshold
    return mask


@dataclass(frozen=True)
class EpisodeStep:
    node_id: int
    feature: np.ndarray
    legal: np.ndarray
    action: int
    old_prob: float
    reward: float


@dataclass(frozen=True)
class EpisodeRecord:
    steps: tuple[EpisodeStep, ...]
    tree: QdTree
    c_sample: int
    access_fraction_sample: float


def node_reward(skipped: int, n_queries: int, n_node_rows: int) -> float:
    """Normalized skip credit of one decision; always within [0, 1]."""
    return skipped / (n_queries * n_node_rows)


def run_episode(
    policy, sample: Dataset, w: Workload, cuts: Sequence[Cut], cfg: RlConfig, rng
) -> EpisodeRecord:
    """Play one tree-construction episode on the sample and score it.

    The policy object only needs an action_distribution(feature, legal)
    method, which makes scripted policies easy to inject in tests.
    """
    schema = sample.schema
    tree = QdTree.build_root(schema, w.advanced_cuts)
    rows_at = {tree.root_id: np.arange(sample.n_rows, dtype=np.intp)}
    drafts: list[tuple[int, np.ndarray, np.ndarray, int, float]] = []
    queue = deque([tree.root_id])
    while queue:
        node_id = queue.popleft()
        idx = rows_at[node_id]
        legal = legal_actions(sample, idx, cuts, cfg)
        if not legal.any():
            continue
        feature = featurize(tree.node(node_id).desc, schema, len(w.advanced_cuts))
        probs = policy.action_distribution(feature, legal)
        action = int(rng.choice(len(cuts), p=probs))
        tree = tree.split(node_id, cuts[action])
        node = tree.node(node_id)
        hit = cuts[action].matches(sample.rows[idx])
        rows_at[node.left] = idx[hit]
        rows_at[node.right] = idx[~hit]
        drafts.append((node_id, feature, legal, action, float(probs[action])))
        queue.append(node.left)
        queue.append(node.right)

    # Bottom-up skipped-tuple totals: leaves score their tightened
    # descriptions, internal nodes add up their children.
    skipped_at: dict[int, int] = {}
    for leaf in tree.leaves():
        idx = rows_at[leaf.id]
        if len(idx) == 0:
            skipped_at[leaf.id] = 0
            continue
        desc = description_from_rows(schema, tree.registry, sample.rows[idx], base=leaf.desc)
        hits = sum(1 for q in w.queries if can_skip(desc, q, schema, tree.registry))
        skipped_at[leaf.id] = len(idx) * hits
    for node_id in sorted(tree.nodes, reverse=True):
        node = tree.nodes[node_id]
        if not node.is_leaf:
            skipped_at[node.id] = skipped_at[node.left] + skipped_at[node.right]

    steps = tuple(
        EpisodeStep(
            node_id=node_id,
            feature=feature,
            legal=legal,
            action=action,
            old_prob=old_prob,
            reward=node_reward(skipped_at[node_id], w.n_queries, len(rows_at[node_id])),
        )
        for node_id, feature, legal, action, old_prob in drafts
    )
    c_sample = skipped_at[tree.root_id]
    denom = w.n_queries * sample.n_rows
    return EpisodeRecord(
        steps=steps,
        tree=tree,
        c_sample=c_sample,
        access_fraction_sample=1.0 - c_sample / denom,
    )


# --- updates -----------------------------------------------------------------

def policy_gradients(policy: PolicyValueNet, episodes: Sequence[EpisodeRecord], cfg: RlConfig):
    """Clipped-surrogate loss with a learned value baseline, plus parameter
    gradients.  Returns (loss, parts, grads); pure, applies nothing."""
    steps = [s for ep in episodes for s in ep.steps]
    if not steps:
        return 0.0, {"policy": 0.0, "value": 0.0, "entropy": 0.0}, {
            k: np.zeros_like(v) for k, v in policy.params.items()
        }
    x = np.stack([s.feature for s in steps])
    legal = np.stack([s.legal for s in steps])
    actions = np.array([s.action for s in steps])
    rewards = np.array([s.reward for s in steps], dtype=np.float64)
    old_probs = np.array([s.old_prob for s in steps], dtype=np.float64)

    logits, values, cache = policy.forward(x)
    probs = masked_softmax(logits, legal)
    n = len(steps)
    rows = np.arange(n)
    new_probs = probs[rows, actions]
    ratio = new_probs / old_probs
    advantage = rewards - values  # baseline is detached from the policy term

    clipped = np.clip(ratio, 1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps)
    surr1 = ratio * advantage
    surr2 = clipped * advantage
    policy_loss = float(np.mean(-np.minimum(surr1, surr2)))
    value_loss = float(np.mean((values - rewards) ** 2))
    with np.errstate(divide="ignore", invalid="ignore"):
        plogp = np.where(probs > 0, probs * np.log(probs), 0.0)
    entropies = -plogp.sum(axis=1)
    entropy = float(np.mean(entropies))
    loss = policy_loss + value_loss - cfg.entropy_weight * entropy

    # d(-min)/d(ratio): the unclipped branch when it is the minimum, else the
    # clip's pass-through region.
    take_unclipped = surr1 <= surr2
    in_window = (ratio > 1.0 - cfg.clip_eps) & (ratio < 1.0 + cfg.clip_eps)
    d_ratio = np.where(take_unclipped | in_window, -advantage, 0.0) / n

    onehot = np.zeros_like(probs)
    onehot[rows, actions] = 1.0
    d_logits = (d_ratio * ratio)[:, None] * (onehot - probs)

    with np.errstate(divide="ignore", invalid="ignore"):
        logp = np.where(probs > 0, np.log(probs), 0.0)
    d_entropy_logits = -probs * (logp + entropies[:, None])
    d_logits += -cfg.entropy_weight * d_entropy_logits / n

    d_values = 2.0 * (values - rewards) / n

    grads = policy.backward(cache, d_logits, d_values)
    parts = {"policy": policy_loss, "value": value_loss, "entropy": entropy}
    return loss, parts, grads


def update_policy(
    policy: PolicyValueNet, episodes: Sequence[EpisodeRecord], cfg: RlConfig
) -> PolicyValueNet:
    """One gradient-descent step on a batch of episodes (single epoch)."""
    loss, parts, grads = policy_gradients(policy, episodes, cfg)
    if not np.isfinite(loss) or any(not np.isfinite(g).all() for g in grads.values()):
        raise NonFiniteLoss(
            f"non-finite update: loss={loss} policy={parts['policy']} "
            f"value={parts['value']} entropy={parts['entropy']}"
        )
    for k, g in grads.items():
        policy.params[k] = policy.params[k] - cfg.learning_rate * g
    return policy


# --- training ----------------------------------------------------------------

@dataclass(frozen=True)
class CurvePoint:
    episode: int
    elapsed_ms: float
    best_access_fraction: float
    episode_access_fraction: float


@dataclass(frozen=True)
class TrainResult:
    best_tree: QdTree
    best_c_sample: int
    best_access_fraction: float
    curve: tuple[CurvePoint, ...]
    policy: PolicyValueNet
    episodes_run: int


def train(
    data: Dataset,
    w: Workload,
    cuts: Sequence[Cut],
    cfg: RlConfig,
    on_episode: Optional[Callable[[CurvePoint], None]] = None,
) -> TrainResult:
    """Run construction episodes on a row sample, learning as it goes, and
    keep the best tree seen.  The returned tree is unfrozen; route and freeze
    it on the full dataset to deploy it.

    The curve reports the percentage of tuples the workload would access on
    the sample, per episode and best-so-far, and is emitted incrementally
    through on_episode.
    """
    if cfg.episodes is None and cfg.timeout_s is None:
        raise ValueError("need an episode budget, a timeout, or both")
    w.validate(data.schema)
    for cut in cuts:
        cut.validate(data.schema)
    if data.n_rows == 0:
        raise ValueError("cannot train on an empty dataset")
    cuts = tuple(cuts)
    if not cuts:
        raise ValueError("need at least one candidate cut")

    n_sample = min(data.n_rows, max(1, round(cfg.sample_ratio * data.n_rows)))
    sample_rng = substream(cfg.seed, "sample")
    sample_idx = np.sort(sample_rng.choice(data.n_rows, size=n_sample, replace=False))
    sample = data.take(sample_idx)

    policy = PolicyValueNet(
        feature_width(data.schema, len(w.advanced_cuts)),
        len(cuts),
        cfg.hidden_width,
        rng=substream(cfg.seed, "net-init"),
    )
    episode_rng = substream(cfg.seed, "episode")

    best: Optional[EpisodeRecord] = None
    curve: list[CurvePoint] = []
    batch: list[EpisodeRecord] = []
    t0 = time.monotonic()
    episode = 0
    while True:
        if cfg.episodes is not None and episode >= cfg.episodes:
            break
        if cfg.timeout_s is not None and time.monotonic() - t0 > cfg.timeout_s:
            break
        record = run_episode(policy, sample, w, cuts, cfg, episode_rng)
        if best is None or record.c_sample > best.c_sample:
            best = record
        point = CurvePoint(
            episode=episode,
            elapsed_ms=(time.monotonic() - t0) * 1000.0,
            best_access_fraction=best.access_fraction_sample,
            episode_access_fraction=record.access_fraction_sample,
        )
        curve.append(point)
        if on_episode is not None:
            on_episode(point)
        batch.append(record)
        if len(batch) >= cfg.batch_episodes:
            update_policy(policy, batch, cfg)
            batch = []
        episode += 1
    if best is None:
        raise ValueError("no episode ran; increase the budget")
    return TrainResult(
        best_tree=best.tree,
        best_c_sample=best.c_sample,
        best_access_fraction=best.access_fraction_sample,
        curve=tuple(curve),
        policy=policy,
        episodes_run=episode,
    )
