"""PPO training of the tree-growth policy, plus the random pruning baseline.

The actor is updated with the KL-penalty form of the importance-weighted
objective (no clipping); the critic fits one-step TD targets of the reward
stream (per-step complexity, terminal RCA accuracy). Everything is
deterministic under the config seed on a single CPU thread.
"""

from __future__ import annotations

import base64
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Union

import numpy as np
import torch

from tracerca.core import IncidentCase
from tracerca.pruning import FILTER_OUT_ID, FilteringTree, tree_from_json, tree_to_json
from tracerca.rl.env import (
    EpisodeState,
    RcaEvalConfig,
    TreeGrowthEnv,
    evaluate_policy,
    prune_counts,
)
from tracerca.rl.policy import (
    PolicyModel,
    cascade_sample,
    encode_states,
    policy_distribution,
    uniform_sample,
    PROB_EPS,
)


class TrainingDivergedError(RuntimeError):
    def __init__(self, message: str, snapshot: dict) -> None:
        super().__init__(message)
        self.snapshot = snapshot


@dataclass(frozen=True)
class TrainConfig:
    alpha: float = 0.01
    beta: float = 1.0
    kl_weight: float = 1.0
    discount: float = 1.0
    episodes: int = 120
    episodes_per_update: int = 8
    actor_epochs: int = 4
    critic_epochs: int = 8
    actor_lr: float = 3e-4
    critic_lr: float = 1e-3
    seed: int = 0
    uniform_episodes: int = 5
    force_filterout_base: float = 0.8
    model_width: int = 64
    n_layers: int = 2
    n_heads: int = 4
    rca: RcaEvalConfig = field(default_factory=RcaEvalConfig)


@dataclass
class HistoryRow:
    episode: int
    mean_reward: float
    r_com: float
    r_rca: float
    tree_size: int


@dataclass
class TrainResult:
    policy: PolicyModel
    best_tree: FilteringTree
    best_reward: float
    history: list[HistoryRow]
    episodes_done: int
    actor_opt_state: Optional[dict] = None
    critic_opt_state: Optional[dict] = None


@dataclass
class _Transition:
    state: EpisodeState
    mask: np.ndarray
    action: int
    reward: float  # scaled, for learning
    next_state: EpisodeState
    done: bool


def train_ppo(
    cases: Iterable[IncidentCase],
    cfg: TrainConfig = TrainConfig(),
    resume: Optional[TrainResult] = None,
) -> TrainResult:
    """Grow filtering trees by PPO against labelled incident cases.

    Returns the trained policy, the highest-reward valid tree seen (scored
    exactly as :func:`evaluate_policy` would), and the per-episode reward
    history. Raises :class:`TrainingDivergedError` on NaN losses.
    """
    cases = list(cases)
    torch.set_num_threads(1)
    torch.manual_seed(cfg.seed)
    env = TreeGrowthEnv(
        cases, rca_cfg=cfg.rca, seed=cfg.seed, force_filterout_base=cfg.force_filterout_base
    )
    if resume is not None:
        policy = resume.policy
        history = list(resume.history)
        episodes_done = resume.episodes_done
        best_tree, best_reward = resume.best_tree, resume.best_reward
    else:
        policy = PolicyModel.fresh(cfg.model_width, cfg.n_layers, cfg.n_heads)
        history = []
        episodes_done = 0
        best_tree, best_reward = None, -float("inf")
    actor_opt = torch.optim.Adam(policy.actor.parameters(), lr=cfg.actor_lr)
    critic_opt = torch.optim.Adam(policy.critic.parameters(), lr=cfg.critic_lr)
    if resume is not None:
        if resume.actor_opt_state is not None:
            actor_opt.load_state_dict(resume.actor_opt_state)
        if resume.critic_opt_state is not None:
            critic_opt.load_state_dict(resume.critic_opt_state)

    rng = np.random.Generator(np.random.PCG64([cfg.seed, episodes_done]))
    # Critic targets live on a normalized scale so its head fits O(1) values.
    reward_scale = max(1.0, abs(cfg.alpha * env.empty_tree_complexity()))

    batch: list[_Transition] = []
    while episodes_done < cfg.episodes:
        episode = episodes_done
        state = env.reset(episode)
        transitions: list[_Transition] = []
        com_sum = 0.0  # complexity rewards at node placements only
        while not state.done:
            mask = env.legal_action_mask(state, rng=rng)
            if episode < cfg.uniform_episodes:
                action = uniform_sample(mask, rng)
            else:
                action, _ = cascade_sample(policy, state, mask, rng)
            next_state, done, r_com = env.step(state, action)
            placed = len(next_state.nodes) > len(state.nodes)
            if placed:
                com_sum += r_com
            reward = cfg.alpha * r_com
            transitions.append(
                _Transition(state, mask, action, reward / reward_scale, next_state, done)
            )
            state = next_state
        r_rca = env.mean_rca_reward(state)
        transitions[-1].reward += cfg.beta * r_rca / reward_scale
        tracking_reward = cfg.alpha * com_sum + cfg.beta * r_rca
        tree = env.finalize_tree(state)
        if tracking_reward > best_reward:
            best_reward, best_tree = tracking_reward, tree
        history.append(
            HistoryRow(
                episode=episode,
                mean_reward=tracking_reward,
                r_com=com_sum,
                r_rca=r_rca,
                tree_size=tree.node_count(),
            )
        )
        batch.extend(transitions)
        episodes_done += 1
        if episodes_done % cfg.episodes_per_update == 0 or episodes_done >= cfg.episodes:
            _ppo_update(policy, actor_opt, critic_opt, batch, cfg, episodes_done)
            batch = []

    return TrainResult(
        policy=policy,
        best_tree=best_tree,
        best_reward=best_reward,
        history=history,
        episodes_done=episodes_done,
        actor_opt_state=actor_opt.state_dict(),
        critic_opt_state=critic_opt.state_dict(),
    )


def _ppo_update(
    policy: PolicyModel,
    actor_opt: torch.optim.Optimizer,
    critic_opt: torch.optim.Optimizer,
    batch: list[_Transition],
    cfg: TrainConfig,
    episodes_done: int,
) -> None:
    if not batch:
        return
    states = [t.state for t in batch]
    next_states = [t.next_state for t in batch]
    masks = np.stack([t.mask for t in batch])
    actions = torch.tensor([t.action for t in batch], dtype=torch.long)
    rewards = torch.tensor([t.reward for t in batch], dtype=torch.float32)
    dones = torch.tensor([t.done for t in batch], dtype=torch.float32)
    tokens, summary = encode_states(states)
    next_tokens, next_summary = encode_states(next_states)

    with torch.no_grad():
        next_values = policy.critic(next_tokens, next_summary)
        targets = rewards + cfg.discount * next_values * (1.0 - dones)
        values = policy.critic(tokens, summary)
        advantages = targets - values
        advantages = (advantages - advantages.mean()) / advantages.std().clamp_min(1e-8)
        old_probs = policy_distribution(policy, states, masks)
        old_log_prob = torch.log(
            old_probs.gather(1, actions.unsqueeze(1)).squeeze(1).clamp_min(PROB_EPS)
        )

    for _ in range(cfg.actor_epochs):
        probs = policy_distribution(policy, states, masks)
        log_prob = torch.log(
            probs.gather(1, actions.unsqueeze(1)).squeeze(1).clamp_min(PROB_EPS)
        )
        ratio = torch.exp(log_prob - old_log_prob)
        legal = torch.from_numpy(masks)
        kl = (
            old_probs
            * (
                torch.log(old_probs.clamp_min(PROB_EPS))
                - torch.log(probs.clamp_min(PROB_EPS))
            )
        ) * legal
        kl_term = kl.sum(dim=1).mean()
        loss = -(ratio * advantages).mean() + cfg.kl_weight * kl_term
        if not torch.isfinite(loss):
            raise TrainingDivergedError(
                "actor loss is not finite",
                snapshot={
                    "episodes_done": episodes_done,
                    "loss": float(loss.item()),
                    "kl": float(kl_term.item()),
                    "batch_size": len(batch),
                },
            )
        actor_opt.zero_grad()
        loss.backward()
        actor_opt.step()

    for _ in range(cfg.critic_epochs):
        values = policy.critic(tokens, summary)
        critic_loss = torch.nn.functional.mse_loss(values, targets)
        if not torch.isfinite(critic_loss):
            raise TrainingDivergedError(
                "critic loss is not finite",
                snapshot={"episodes_done": episodes_done, "loss": float(critic_loss.item())},
            )
        critic_opt.zero_grad()
        critic_loss.backward()
        critic_opt.step()


def random_pruning_baseline(
    case: IncidentCase,
    node_budget: int,
    seed: int,
    rca_cfg: RcaEvalConfig = RcaEvalConfig(),
) -> FilteringTree:
    """Grow a tree by uniform random legal actions until the pruned graph
    is small enough (or the length cap is hit)."""
    if node_budget < 1:
        raise ValueError("node_budget must be >= 1")
    env = TreeGrowthEnv([case], rca_cfg=rca_cfg, seed=seed)
    rng = np.random.Generator(np.random.PCG64([seed, 0xBA5E]))
    state = env.reset(0)
    while not state.done:
        mask = env.legal_action_mask(state)
        action = uniform_sample(mask, rng)
        state, done, _ = env.step(state, action)
        kept, _ = prune_counts(env.runtimes[0], state.nodes)
        if len(state.nodes) >= 2 and len(kept) <= node_budget:
            break
    return env.finalize_tree(state)


# ---------------------------------------------------------------------------
# Checkpoint persistence: versioned json with base64 tensor payloads.


def _encode(obj):
    if isinstance(obj, torch.Tensor):
        arr = obj.detach().cpu().numpy()
        return {
            "__tensor__": True,
            "dtype": str(arr.dtype),
            "shape": list(arr.shape),
            "data": base64.b64encode(arr.tobytes()).decode("ascii"),
        }
    if isinstance(obj, dict):
        return {"__dict__": True, "items": [[_encode(k), _encode(v)] for k, v in obj.items()]}
    if isinstance(obj, (list, tuple)):
        return {"__list__": True, "items": [_encode(x) for x in obj]}
    return obj


def _decode(obj):
    if isinstance(obj, dict) and obj.get("__tensor__"):
        arr = np.frombuffer(
            base64.b64decode(obj["data"]), dtype=np.dtype(obj["dtype"])
        ).reshape(obj["shape"])
        return torch.from_numpy(arr.copy())
    if isinstance(obj, dict) and obj.get("__dict__"):
        return {_decode(k): _decode(v) for k, v in obj["items"]}
    if isinstance(obj, dict) and obj.get("__list__"):
        return [_decode(x) for x in obj["items"]]
    return obj


def save_policy(path: Union[str, Path], result: TrainResult, cfg: TrainConfig) -> None:
    cfg_dict = asdict(cfg)
    payload = {
        "format_version": 1,
        "config": cfg_dict,
        "episodes_done": result.episodes_done,
        "best_reward": result.best_reward,
        "best_tree": tree_to_json(result.best_tree),
        "arch": {
            "width": result.policy.width,
            "n_layers": result.policy.n_layers,
            "n_heads": result.policy.n_heads,
        },
        "actor_state": _encode(result.policy.actor.state_dict()),
        "critic_state": _encode(result.policy.critic.state_dict()),
        "actor_opt": _encode(result.actor_opt_state),
        "critic_opt": _encode(result.critic_opt_state),
        "history": [asdict(row) for row in result.history],
    }
    Path(path).write_text(json.dumps(payload, sort_keys=True) + "\n")


def load_policy(path: Union[str, Path]) -> tuple[TrainResult, TrainConfig]:
    payload = json.loads(Path(path).read_text())
    if payload.get("format_version") != 1:
        raise ValueError(f"unsupported policy file version: {payload.get('format_version')}")
    arch = payload["arch"]
    policy = PolicyModel.fresh(arch["width"], arch["n_layers"], arch["n_heads"])
    policy.actor.load_state_dict(_decode(payload["actor_state"]))
    policy.critic.load_state_dict(_decode(payload["critic_state"]))
    cfg_dict = dict(payload["config"])
    cfg_dict["rca"] = RcaEvalConfig(**cfg_dict["rca"])
    cfg = TrainConfig(**cfg_dict)
    result = TrainResult(
        policy=policy,
        best_tree=tree_from_json(payload["best_tree"]),
        best_reward=payload["best_reward"],
        history=[HistoryRow(**row) for row in payload["history"]],
        episodes_done=payload["episodes_done"],
        actor_opt_state=_decode(payload["actor_opt"]),
        critic_opt_state=_decode(payload["critic_opt"]),
    )
    return result, cfg


def write_history_csv(history: list[HistoryRow], path: Union[str, Path]) -> None:
    lines = ["episode,mean_reward,r_com,r_rca,tree_size"]
    for row in history:
        lines.append(
            f"{row.episode},{row.mean_reward!r},{row.r_com!r},{row.r_rca!r},{row.tree_size}"
        )
    Path(path).write_text("\n".join(lines) + "\n")
