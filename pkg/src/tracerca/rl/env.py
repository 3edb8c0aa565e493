"""Tree-growth MDP: states, legal-action masks, per-step rewards, policy evaluation.

An episode grows a filtering tree one action at a time. Open attachment
slots are filled in level order (left before right). Placing FilterOut at
a left slot adds a FilterOut leaf; sampling it at a right slot closes that
branch with a missing child instead of adding a node, since FilterOut
nodes may never be right children. The episode ends when every branch is
closed or after 30 steps; leftover open slots become missing children.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from tracerca.causal import attribute, fit_model
from tracerca.core import DependencyGraph, IncidentCase
from tracerca.indicators import IndicatorVector, compute_indicators
from tracerca.metrics import pr_avg, rca_rank_score
from tracerca.pruning import (
    FILTER_OUT_ID,
    N_ACTIONS,
    FilteringTree,
    TreeNode,
    action_by_id,
    reconnect_edges,
    satisfies,
)

MAX_STEPS = 30
SEQ_LEN = 31
PAD_TOKEN = N_ACTIONS  # 36


def complexity_reward(n_nodes: int, n_edges: int) -> float:
    """Penalty for the pruned graph's size: -(N + E + E / N^2)."""
    if n_nodes < 1:
        raise ValueError("complexity reward undefined for an empty graph")
    return -(n_nodes + n_edges + n_edges / (n_nodes * n_nodes))


@dataclass(frozen=True)
class RcaEvalConfig:
    """How the RCA reward is computed while training/evaluating policies."""

    n_samples: int = 400
    n_permutations: int = 12
    exact_max_players: int = 8
    node_cap: int = 48  # kept-component count above which RCA is skipped (reward 0)
    min_fit_buckets: int = 8


@dataclass(frozen=True)
class Slot:
    parent: int  # node index; -1 for the root slot
    side: str  # "root" | "left" | "right"


@dataclass(frozen=True)
class EpisodeState:
    """Immutable snapshot of a growing tree plus the pruned-graph summary."""

    actions: tuple[int, ...] = ()
    nodes: tuple[TreeNode, ...] = ()
    open_slots: tuple[Slot, ...] = (Slot(-1, "root"),)
    episode: int = 0
    graph_summary: tuple[float, float, float] = (0.0, 0.0, 0.0)

    @property
    def step_index(self) -> int:
        return len(self.actions)

    @property
    def done(self) -> bool:
        return not self.open_slots or len(self.actions) >= MAX_STEPS

    def tree_seq(self) -> tuple[int, ...]:
        """Action history padded to the fixed encoder length."""
        pad = (PAD_TOKEN,) * (SEQ_LEN - len(self.actions))
        return self.actions + pad


@dataclass
class CaseRuntime:
    """Per-case precomputation shared by every episode."""

    case: IncidentCase
    indicators: dict[str, IndicatorVector]
    routed_ids: list[str]  # non-frontend components, sorted
    sat: np.ndarray  # (35, len(routed_ids)) bool
    order: tuple[str, ...]
    children: dict[str, tuple[str, ...]]
    rca_seed: int


def build_case_runtime(case: IncidentCase, seed: int = 0) -> CaseRuntime:
    inds = compute_indicators(case.graph)
    routed = [cid for cid in case.graph.component_ids if cid != case.graph.frontend_id]
    sat = np.zeros((FILTER_OUT_ID, len(routed)), dtype=bool)
    for a in range(FILTER_OUT_ID):
        action = action_by_id(a)
        sat[a] = [satisfies(action, inds[cid]) for cid in routed]
    return CaseRuntime(
        case=case,
        indicators=inds,
        routed_ids=routed,
        sat=sat,
        order=case.graph.topological_order(),
        children={cid: case.graph.children(cid) for cid in case.graph.component_ids},
        rca_seed=seed ^ zlib.crc32(case.case_id.encode()),
    )


def removed_mask(
    nodes: Sequence[TreeNode], root: Optional[int], sat: np.ndarray
) -> np.ndarray:
    """Vectorised routing: which routed components land on a FilterOut leaf."""
    n = sat.shape[1]
    removed = np.zeros(n, dtype=bool)
    if root is None or not nodes:
        return removed
    stack: list[tuple[int, np.ndarray]] = [(root, np.ones(n, dtype=bool))]
    while stack:
        idx, members = stack.pop()
        if not members.any():
            continue
        node = nodes[idx]
        if node.action_id == FILTER_OUT_ID:
            removed |= members
            continue
        meets = sat[node.action_id]
        if node.right is not None:
            stack.append((node.right, members & meets))
        if node.left is not None:
            stack.append((node.left, members & ~meets))
    return removed


def prune_counts(runtime: CaseRuntime, nodes: Sequence[TreeNode]) -> tuple[frozenset[str], int]:
    """Kept component set and reconnected edge count for a (partial) tree."""
    removed = removed_mask(nodes, 0 if nodes else None, runtime.sat)
    kept = {runtime.case.graph.frontend_id}
    kept.update(cid for cid, gone in zip(runtime.routed_ids, removed) if not gone)
    edges = reconnect_edges(runtime.order, runtime.children, kept)
    return frozenset(kept), len(edges)


def pruned_graph_from_kept(runtime: CaseRuntime, kept: frozenset[str]) -> DependencyGraph:
    graph = runtime.case.graph
    edges = reconnect_edges(runtime.order, runtime.children, set(kept))
    return DependencyGraph(
        components=[graph.components[cid] for cid in sorted(kept)],
        edges=edges,
        frontend_id=graph.frontend_id,
    )


def rca_reward(
    runtime: CaseRuntime,
    kept: frozenset[str],
    cfg: RcaEvalConfig,
    cache: Optional[dict[frozenset[str], float]] = None,
) -> float:
    """PR@Avg + RankScore of causal attribution on the pruned graph.

    Kept sets larger than the node cap, and attribution failures, score
    0.0: at desk scale the causal step is infeasible there, and a tree
    that barely prunes earns no accuracy credit.
    """
    truth = runtime.case.true_root_causes
    if not truth:
        raise ValueError(f"case {runtime.case.case_id!r} has no ground-truth root causes")
    if cache is not None and kept in cache:
        return cache[kept]
    if len(kept) > cfg.node_cap:
        score = 0.0
    else:
        try:
            pruned = pruned_graph_from_kept(runtime, kept)
            model = fit_model(pruned, runtime.case.windows, min_samples=cfg.min_fit_buckets)
            result = attribute(
                model,
                n_samples=cfg.n_samples,
                seed=runtime.rca_seed,
                exact_max_players=cfg.exact_max_players,
                n_permutations=cfg.n_permutations,
            )
            pred = list(result.ranking)
            score = pr_avg(pred, truth) + rca_rank_score(pred, truth)
        except Exception:
            score = 0.0
    if cache is not None:
        cache[kept] = score
    return score


class TreeGrowthEnv:
    """Grows filtering trees against one or more incident cases.

    Per-step reward is the mean complexity reward across cases; the
    terminal RCA reward is queried separately via :meth:`mean_rca_reward`.
    """

    def __init__(
        self,
        cases: Iterable[IncidentCase],
        rca_cfg: RcaEvalConfig = RcaEvalConfig(),
        seed: int = 0,
        force_filterout_base: float = 0.8,
    ) -> None:
        self.runtimes = [build_case_runtime(c, seed) for c in cases]
        if not self.runtimes:
            raise ValueError("need at least one incident case")
        self.rca_cfg = rca_cfg
        self.force_filterout_base = force_filterout_base
        self._rca_caches: list[dict[frozenset[str], float]] = [{} for _ in self.runtimes]

    def _summary_and_reward(
        self, nodes: Sequence[TreeNode]
    ) -> tuple[tuple[float, float, float], float]:
        ns, es, sps, rewards = [], [], [], []
        for rt in self.runtimes:
            kept, n_edges = prune_counts(rt, nodes)
            n = len(kept)
            ns.append(n)
            es.append(n_edges)
            sps.append(n_edges / (n * n))
            rewards.append(complexity_reward(n, n_edges))
        summary = (
            float(np.mean(ns)),
            float(np.mean(es)),
            float(np.mean(sps)),
        )
        return summary, float(np.mean(rewards))

    def reset(self, episode: int = 0) -> EpisodeState:
        summary, _ = self._summary_and_reward(())
        return EpisodeState(episode=episode, graph_summary=summary)

    def empty_tree_complexity(self) -> float:
        """Mean complexity reward of the untouched graphs (no pruning yet)."""
        return self._summary_and_reward(())[1]

    def legal_action_mask(
        self, state: EpisodeState, rng: Optional[np.random.Generator] = None
    ) -> np.ndarray:
        """Boolean legality vector over the 36 actions for the front slot.

        Structural rules: the root may not be FilterOut, and a child may
        not repeat its parent's action. At right slots the FilterOut id
        stands for closing the branch (no node is added), so it stays
        legal there. When ``rng`` is given, the exploration rule applies:
        if no FilterOut occurred within the last five steps, FilterOut
        becomes the only legal action with probability 0.8^(episode+1).
        """
        if state.done:
            raise ValueError("episode is finished; no legal actions")
        mask = np.ones(N_ACTIONS, dtype=bool)
        slot = state.open_slots[0]
        if slot.side == "root":
            mask[FILTER_OUT_ID] = False
        else:
            parent_action = state.nodes[slot.parent].action_id
            mask[parent_action] = False
        if rng is not None and mask[FILTER_OUT_ID]:
            recent = state.actions[-5:]
            if recent and FILTER_OUT_ID not in recent:
                p_force = self.force_filterout_base ** (state.episode + 1)
                if rng.random() < p_force:
                    forced = np.zeros(N_ACTIONS, dtype=bool)
                    forced[FILTER_OUT_ID] = True
                    return forced
        return mask

    def step(self, state: EpisodeState, action_id: int) -> tuple[EpisodeState, bool, float]:
        """Apply one action; returns (next_state, done, complexity reward)."""
        if state.done:
            raise ValueError("episode is finished")
        mask = self.legal_action_mask(state)
        if not mask[action_id]:
            raise ValueError(f"action {action_id} is illegal in this state")
        slot = state.open_slots[0]
        rest = state.open_slots[1:]
        nodes = list(state.nodes)
        if action_id == FILTER_OUT_ID and slot.side == "right":
            # close the branch: the parent keeps a missing right child
            new_slots = rest
        else:
            new_index = len(nodes)
            nodes.append(TreeNode(action_id=action_id))
            if slot.side != "root":
                parent = nodes[slot.parent]
                nodes[slot.parent] = replace(parent, **{slot.side: new_index})
            if action_id != FILTER_OUT_ID:
                new_slots = rest + (Slot(new_index, "left"), Slot(new_index, "right"))
            else:
                new_slots = rest
        next_state = EpisodeState(
            actions=state.actions + (action_id,),
            nodes=tuple(nodes),
            open_slots=new_slots,
            episode=state.episode,
            graph_summary=state.graph_summary,
        )
        summary, reward = self._summary_and_reward(next_state.nodes)
        next_state = replace(next_state, graph_summary=summary)
        return next_state, next_state.done, reward

    def finalize_tree(self, state: EpisodeState) -> FilteringTree:
        """The grown tree; open slots simply stay missing children."""
        return FilteringTree(nodes=state.nodes, root=0)

    def mean_rca_reward(self, state: EpisodeState) -> float:
        scores = [
            rca_reward(rt, prune_counts(rt, state.nodes)[0], self.rca_cfg, cache)
            for rt, cache in zip(self.runtimes, self._rca_caches)
        ]
        return float(np.mean(scores))


def _bfs_node_order(tree: FilteringTree) -> list[int]:
    order = []
    queue = [tree.root]
    while queue:
        idx = queue.pop(0)
        order.append(idx)
        node = tree.nodes[idx]
        if node.left is not None:
            queue.append(node.left)
        if node.right is not None:
            queue.append(node.right)
    return order


def replay_tree(tree: FilteringTree) -> list[tuple[TreeNode, ...]]:
    """Partial trees after each node placement, in level order.

    Children beyond a prefix are treated as missing, mirroring how the
    tree grew step by step.
    """
    order = _bfs_node_order(tree)
    reindex = {old: new for new, old in enumerate(order)}
    prefixes = []
    for k in range(1, len(order) + 1):
        included = set(order[:k])
        nodes = []
        for old in order[:k]:
            node = tree.nodes[old]
            nodes.append(
                TreeNode(
                    action_id=node.action_id,
                    left=reindex[node.left]
                    if node.left is not None and node.left in included
                    else None,
                    right=reindex[node.right]
                    if node.right is not None and node.right in included
                    else None,
                )
            )
        prefixes.append(tuple(nodes))
    return prefixes


def evaluate_policy(
    tree: FilteringTree,
    cases: Iterable[IncidentCase],
    alpha: float = 0.01,
    beta: float = 1.0,
    rca_cfg: RcaEvalConfig = RcaEvalConfig(),
    seed: int = 0,
    runtimes: Optional[list[CaseRuntime]] = None,
    rca_caches: Optional[list[dict[frozenset[str], float]]] = None,
) -> float:
    """Average episodic reward of executing one tree on labelled cases.

    Per case: alpha * (sum of complexity rewards after each node
    placement) + beta * (RCA accuracy on the final pruned graph), then the
    mean over cases.
    """
    if runtimes is None:
        runtimes = [build_case_runtime(c, seed) for c in cases]
    if not runtimes:
        raise ValueError("need at least one labelled case")
    prefixes = replay_tree(tree)
    totals = []
    for i, rt in enumerate(runtimes):
        com = 0.0
        for nodes in prefixes:
            kept, n_edges = prune_counts(rt, nodes)
            com += complexity_reward(len(kept), n_edges)
        kept_final, _ = prune_counts(rt, prefixes[-1])
        cache = rca_caches[i] if rca_caches is not None else None
        rca = rca_reward(rt, kept_final, rca_cfg, cache)
        totals.append(alpha * com + beta * rca)
    return float(np.mean(totals))
