"""Actor and critic networks over serialized filtering trees.

The actor is a small self-attention encoder with two heads: a Bernoulli
FilterOut head and a categorical head over the 35 thresholded actions. The
sampling distribution factorizes: FilterOut first, then (if declined) the
masked, renormalized action head. The critic is a separate encoder with a
scalar value head.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from tracerca.pruning import FILTER_OUT_ID, N_ACTIONS
from tracerca.rl.env import PAD_TOKEN, SEQ_LEN, EpisodeState

PROB_EPS = 1e-12
_MASKED_LOGIT = -1e9


class SequenceEncoder(nn.Module):
    def __init__(self, width: int = 64, n_layers: int = 2, n_heads: int = 4) -> None:
        super().__init__()
        self.token_emb = nn.Embedding(PAD_TOKEN + 1, width)
        self.pos_emb = nn.Embedding(SEQ_LEN + 1, width)
        self.summary_proj = nn.Linear(3, width)
        layer = nn.TransformerEncoderLayer(
            d_model=width,
            nhead=n_heads,
            dim_feedforward=2 * width,
            dropout=0.0,
            batch_first=True,
            activation="gelu",
        )
        self.encoder = nn.TransformerEncoder(layer, num_layers=n_layers)

    def forward(self, tokens: torch.Tensor, summary: torch.Tensor) -> torch.Tensor:
        batch = tokens.shape[0]
        head = self.summary_proj(summary).unsqueeze(1)
        x = torch.cat([head, self.token_emb(tokens)], dim=1)
        positions = torch.arange(x.shape[1], device=tokens.device)
        x = x + self.pos_emb(positions).unsqueeze(0)
        pad = torch.cat(
            [torch.zeros(batch, 1, dtype=torch.bool), tokens == PAD_TOKEN], dim=1
        )
        return self.encoder(x, src_key_padding_mask=pad)[:, 0]


class ActorNet(nn.Module):
    def __init__(self, width: int = 64, n_layers: int = 2, n_heads: int = 4) -> None:
        super().__init__()
        self.backbone = SequenceEncoder(width, n_layers, n_heads)
        self.filter_out_head = nn.Linear(width, 1)
        self.action_head = nn.Linear(width, FILTER_OUT_ID)
        # zero-init heads: the fresh policy is uniform over legal actions
        for head in (self.filter_out_head, self.action_head):
            nn.init.zeros_(head.weight)
            nn.init.zeros_(head.bias)

    def forward(self, tokens: torch.Tensor, summary: torch.Tensor):
        h = self.backbone(tokens, summary)
        return self.filter_out_head(h).squeeze(-1), self.action_head(h)


class CriticNet(nn.Module):
    def __init__(self, width: int = 64, n_layers: int = 2, n_heads: int = 4) -> None:
        super().__init__()
        self.backbone = SequenceEncoder(width, n_layers, n_heads)
        self.value_head = nn.Linear(width, 1)

    def forward(self, tokens: torch.Tensor, summary: torch.Tensor) -> torch.Tensor:
        return self.value_head(self.backbone(tokens, summary)).squeeze(-1)


@dataclass
class PolicyModel:
    actor: ActorNet
    critic: CriticNet
    width: int = 64
    n_layers: int = 2
    n_heads: int = 4

    @classmethod
    def fresh(cls, width: int = 64, n_layers: int = 2, n_heads: int = 4) -> "PolicyModel":
        return cls(
            actor=ActorNet(width, n_layers, n_heads),
            critic=CriticNet(width, n_layers, n_heads),
            width=width,
            n_layers=n_layers,
            n_heads=n_heads,
        )


def encode_states(states: list[EpisodeState]) -> tuple[torch.Tensor, torch.Tensor]:
    tokens = torch.tensor([s.tree_seq() for s in states], dtype=torch.long)
    summary = torch.tensor(
        [
            [math.log1p(s.graph_summary[0]), math.log1p(s.graph_summary[1]), s.graph_summary[2]]
            for s in states
        ],
        dtype=torch.float32,
    )
    return tokens, summary


def masked_cascade_probs(
    fo_logits: torch.Tensor, action_logits: torch.Tensor, masks: torch.Tensor
) -> torch.Tensor:
    """Probabilities over the 36 actions under the factorized cascade.

    P(FilterOut) comes from the Bernoulli head (0 where masked; 1 where it
    is the only legal action); the remaining mass goes to the masked,
    renormalized action head. Rows sum to 1 over the legal set.
    """
    fo_legal = masks[:, FILTER_OUT_ID]
    action_mask = masks[:, :FILTER_OUT_ID]
    any_action = action_mask.any(dim=1)
    p_fo = torch.sigmoid(fo_logits)
    p_fo = torch.where(fo_legal, p_fo, torch.zeros_like(p_fo))
    p_fo = torch.where(fo_legal & ~any_action, torch.ones_like(p_fo), p_fo)
    logits = action_logits.masked_fill(~action_mask, _MASKED_LOGIT)
    softmax = torch.softmax(logits, dim=1) * action_mask
    softmax = softmax / softmax.sum(dim=1, keepdim=True).clamp_min(PROB_EPS)
    softmax = torch.where(any_action.unsqueeze(1), softmax, torch.zeros_like(softmax))
    return torch.cat([(1.0 - p_fo).unsqueeze(1) * softmax, p_fo.unsqueeze(1)], dim=1)


def policy_distribution(
    policy: PolicyModel, states: list[EpisodeState], masks: np.ndarray
) -> torch.Tensor:
    tokens, summary = encode_states(states)
    fo_logits, action_logits = policy.actor(tokens, summary)
    return masked_cascade_probs(fo_logits, action_logits, torch.from_numpy(masks))


def cascade_sample(
    policy: PolicyModel,
    state: EpisodeState,
    mask: np.ndarray,
    rng: np.random.Generator,
) -> tuple[int, float]:
    """Sample one action; returns (action_id, log-probability).

    The log-probability is the exact factorized probability of the
    sampled action under the masked cascade, as used later in importance
    ratios.
    """
    if not mask.any():
        raise ValueError("no legal action under the mask")
    with torch.no_grad():
        probs = policy_distribution(policy, [state], mask[None, :])[0].numpy()
    action = _inverse_cdf_sample(probs, rng)
    return action, float(np.log(max(probs[action], PROB_EPS)))


def uniform_sample(mask: np.ndarray, rng: np.random.Generator) -> int:
    legal = np.flatnonzero(mask)
    if legal.size == 0:
        raise ValueError("no legal action under the mask")
    return int(legal[rng.integers(0, legal.size)])


def _inverse_cdf_sample(probs: np.ndarray, rng: np.random.Generator) -> int:
    u = rng.random()
    cum = np.cumsum(probs)
    total = cum[-1]
    if total <= 0:
        raise ValueError("degenerate action distribution")
    idx = int(np.searchsorted(cum, u * total, side="right"))
    return min(idx, probs.size - 1)
