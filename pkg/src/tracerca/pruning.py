"""Pruning actions, the filtering tree, and its execution on a dependency graph.

A filtering tree is a binary tree of thresholded actions. Each non-frontend
component is routed from the root: right when it meets the node's
threshold, left otherwise. Components landing on a FilterOut leaf are
removed; components exiting at a missing child are kept. When a node is
removed, each of its callers gains edges to each of its callees
(transitively through chains of removed nodes) so ancestry paths survive.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Mapping, Optional, Sequence

from tracerca.core import ComponentStats, DependencyGraph
from tracerca.indicators import IndicatorVector

MIN_TREE_NODES = 2
MAX_TREE_NODES = 30


class TreeValidationError(ValueError):
    """A filtering tree violates a structural invariant."""


class ActionKind(str, Enum):
    AVG_EXCLUSIVE_LATENCY = "AvgExclusiveLatency"
    MAX_EXCLUSIVE_LATENCY = "MaxExclusiveLatency"
    AVG_INCLUSIVE_LATENCY = "AvgInclusiveLatency"
    NORMALIZED_COUNT = "NormalizedCount"
    OVERHEAD = "OverHead"
    RANK_SCORE = "RankScore"
    ROOT_TARGET_CORRELATION = "RootTargetCorrelation"
    FILTER_OUT = "FilterOut"


class ThresholdMode(str, Enum):
    PERCENTILE = "percentile"
    ABSOLUTE = "absolute"
    NONE = "none"


# Which indicator each thresholded kind reads, and how the threshold is applied.
_KIND_METRIC: dict[ActionKind, tuple[str, ThresholdMode]] = {
    ActionKind.AVG_EXCLUSIVE_LATENCY: ("avg_exl", ThresholdMode.PERCENTILE),
    ActionKind.MAX_EXCLUSIVE_LATENCY: ("max_exl", ThresholdMode.ABSOLUTE),
    ActionKind.AVG_INCLUSIVE_LATENCY: ("avg_inl", ThresholdMode.PERCENTILE),
    ActionKind.NORMALIZED_COUNT: ("normalize_count", ThresholdMode.PERCENTILE),
    ActionKind.OVERHEAD: ("overhead", ThresholdMode.PERCENTILE),
    ActionKind.RANK_SCORE: ("anomaly_rank_score", ThresholdMode.PERCENTILE),
    ActionKind.ROOT_TARGET_CORRELATION: ("root_target_corr", ThresholdMode.ABSOLUTE),
}

# Threshold grids per kind. Percentile levels are fractions; absolute
# thresholds are seconds for MaxExclusiveLatency and correlation values
# for RootTargetCorrelation.
_THRESHOLD_GRID: list[tuple[ActionKind, tuple[float, ...]]] = [
    (ActionKind.AVG_EXCLUSIVE_LATENCY, (0.80, 0.85, 0.90, 0.95, 0.99)),
    (ActionKind.MAX_EXCLUSIVE_LATENCY, (0.01, 0.05, 0.1, 0.5, 1.0)),
    (ActionKind.AVG_INCLUSIVE_LATENCY, (0.80, 0.85, 0.90, 0.95, 0.99)),
    (ActionKind.NORMALIZED_COUNT, (0.50, 0.65, 0.70, 0.80, 0.90)),
    (ActionKind.OVERHEAD, (0.80, 0.85, 0.90, 0.95, 0.99)),
    (ActionKind.RANK_SCORE, (0.80, 0.85, 0.90, 0.95, 0.99)),
    (ActionKind.ROOT_TARGET_CORRELATION, (0.1, 0.3, 0.5, 0.7, 0.9)),
]


@dataclass(frozen=True)
class PruningAction:
    kind: ActionKind
    threshold: Optional[float]
    mode: ThresholdMode

    def describe(self) -> str:
        if self.kind is ActionKind.FILTER_OUT:
            return "FilterOut"
        if self.mode is ThresholdMode.PERCENTILE:
            return f"{self.kind.value} >= P{round(self.threshold * 100)}"
        if self.kind is ActionKind.MAX_EXCLUSIVE_LATENCY:
            return f"{self.kind.value} >= {self.threshold}s"
        return f"{self.kind.value} >= {self.threshold}"


def _build_vocabulary() -> tuple[PruningAction, ...]:
    actions = [
        PruningAction(kind, t, _KIND_METRIC[kind][1])
        for kind, grid in _THRESHOLD_GRID
        for t in grid
    ]
    actions.append(PruningAction(ActionKind.FILTER_OUT, None, ThresholdMode.NONE))
    return tuple(actions)


_VOCABULARY = _build_vocabulary()
FILTER_OUT_ID = len(_VOCABULARY) - 1
N_ACTIONS = len(_VOCABULARY)


def action_vocabulary() -> tuple[PruningAction, ...]:
    """The 36 actions in fixed order: 7 kinds x 5 thresholds, FilterOut last."""
    return _VOCABULARY


def action_by_id(action_id: int) -> PruningAction:
    return _VOCABULARY[action_id]


def satisfies(action: PruningAction, ind: IndicatorVector) -> bool:
    """Whether a component meets the action's threshold (routes right).

    Percentile mode compares the component's percentile rank for the
    metric against the level; absolute mode compares the raw value.
    Missing metrics never satisfy (route left).
    """
    if action.kind is ActionKind.FILTER_OUT:
        raise ValueError("FilterOut has no threshold to satisfy")
    metric, mode = _KIND_METRIC[action.kind]
    if mode is ThresholdMode.PERCENTILE:
        rank = ind.percentile_rank.get(metric)
        return rank is not None and rank >= action.threshold
    value = ind.value(metric)
    if value is None:
        return False
    if action.kind is ActionKind.MAX_EXCLUSIVE_LATENCY:
        return value / 1000.0 >= action.threshold  # ms -> s
    return value >= action.threshold


@dataclass(frozen=True)
class TreeNode:
    action_id: int
    left: Optional[int] = None
    right: Optional[int] = None


@dataclass(frozen=True)
class FilteringTree:
    """Binary tree of pruning actions; FilterOut only at leaves, never as a right child."""

    nodes: tuple[TreeNode, ...]
    root: int = 0

    def __post_init__(self) -> None:
        validate_tree(self)

    def node_count(self) -> int:
        return len(self.nodes)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, FilteringTree):
            return NotImplemented
        return serialize_bfs(self) == serialize_bfs(other)

    def __hash__(self) -> int:
        return hash(tuple(serialize_bfs(self)))

    def describe(self) -> str:
        lines: list[str] = []

        def walk(idx: int, depth: int, tag: str) -> None:
            node = self.nodes[idx]
            lines.append("  " * depth + f"{tag}{action_by_id(node.action_id).describe()}")
            if node.left is not None:
                walk(node.left, depth + 1, "fail -> ")
            if node.right is not None:
                walk(node.right, depth + 1, "pass -> ")

        walk(self.root, 0, "")
        return "\n".join(lines)


def validate_tree(tree: FilteringTree) -> None:
    nodes = tree.nodes
    n = len(nodes)
    if not (MIN_TREE_NODES <= n <= MAX_TREE_NODES):
        raise TreeValidationError(
            f"tree has {n} nodes, must be within [{MIN_TREE_NODES}, {MAX_TREE_NODES}]"
        )
    if not (0 <= tree.root < n):
        raise TreeValidationError(f"root index {tree.root} out of range")
    seen: set[int] = set()
    stack = [tree.root]
    while stack:
        idx = stack.pop()
        if idx in seen:
            raise TreeValidationError(f"node {idx} is referenced more than once (not a tree)")
        seen.add(idx)
        node = nodes[idx]
        if not (0 <= node.action_id < N_ACTIONS):
            raise TreeValidationError(f"node {idx}: unknown action id {node.action_id}")
        is_filter_out = node.action_id == FILTER_OUT_ID
        if is_filter_out and (node.left is not None or node.right is not None):
            raise TreeValidationError(f"node {idx}: FilterOut must be a leaf")
        for side, child in (("left", node.left), ("right", node.right)):
            if child is None:
                continue
            if not (0 <= child < n):
                raise TreeValidationError(f"node {idx}: {side} child index {child} out of range")
            if side == "right" and nodes[child].action_id == FILTER_OUT_ID:
                raise TreeValidationError(
                    f"node {idx}: FilterOut may not be a right child"
                )
            if nodes[child].action_id == node.action_id:
                raise TreeValidationError(
                    f"node {idx}: child repeats the parent action (id {node.action_id})"
                )
            stack.append(child)
    if len(seen) != n:
        unreachable = sorted(set(range(n)) - seen)
        raise TreeValidationError(f"nodes not reachable from root: {unreachable}")
    if nodes[tree.root].action_id == FILTER_OUT_ID:
        raise TreeValidationError("root may not be FilterOut")


@dataclass(frozen=True)
class PruneResult:
    kept: frozenset[str]
    removed: frozenset[str]
    pruned_graph: DependencyGraph
    per_leaf_removed: dict[int, int] = field(default_factory=dict)


def route_component(tree: FilteringTree, ind: IndicatorVector) -> tuple[bool, Optional[int]]:
    """Route one component through the tree.

    Returns (removed, leaf_index) where leaf_index is the FilterOut node
    that removed it, or None when the component exits at a missing child.
    """
    idx: Optional[int] = tree.root
    while idx is not None:
        node = tree.nodes[idx]
        if node.action_id == FILTER_OUT_ID:
            return True, idx
        action = action_by_id(node.action_id)
        idx = node.right if satisfies(action, ind) else node.left
    return False, None


def reconnect_edges(
    order: Sequence[str],
    children: Mapping[str, Sequence[str]],
    kept: set[str],
) -> set[tuple[str, str]]:
    """Edge set among kept nodes after removing the rest.

    For every removed node, its callers are connected to the first kept
    nodes reachable through removed-only paths, so reachability among kept
    nodes is preserved. ``order`` must be topological (callers first).
    """
    down: dict[str, frozenset[str]] = {}
    for cid in reversed(order):
        if cid in kept:
            continue
        acc: set[str] = set()
        for child in children[cid]:
            if child in kept:
                acc.add(child)
            else:
                acc.update(down[child])
        down[cid] = frozenset(acc)
    edges: set[tuple[str, str]] = set()
    for cid in order:
        if cid not in kept:
            continue
        for child in children[cid]:
            if child in kept:
                edges.add((cid, child))
            else:
                edges.update((cid, d) for d in down[child])
    return edges


def execute(
    tree: FilteringTree,
    graph: DependencyGraph,
    inds: Mapping[str, IndicatorVector],
) -> PruneResult:
    """Apply the tree to every non-frontend component and rebuild the graph.

    The frontend is never routed. Raises KeyError if any component lacks
    an indicator vector.
    """
    missing = [cid for cid in graph.component_ids if cid not in inds]
    if missing:
        raise KeyError(f"indicators missing for components: {missing[:5]}")
    kept: set[str] = {graph.frontend_id}
    removed: set[str] = set()
    per_leaf: dict[int, int] = {}
    for cid in graph.component_ids:
        if cid == graph.frontend_id:
            continue
        is_removed, leaf = route_component(tree, inds[cid])
        if is_removed:
            removed.add(cid)
            per_leaf[leaf] = per_leaf.get(leaf, 0) + 1
        else:
            kept.add(cid)
    edges = reconnect_edges(
        graph.topological_order(),
        {cid: graph.children(cid) for cid in graph.component_ids},
        kept,
    )
    pruned = DependencyGraph(
        components=[graph.components[cid] for cid in sorted(kept)],
        edges=edges,
        frontend_id=graph.frontend_id,
    )
    return PruneResult(
        kept=frozenset(kept),
        removed=frozenset(removed),
        pruned_graph=pruned,
        per_leaf_removed=dict(sorted(per_leaf.items())),
    )


NULL_MARKER = None


def serialize_bfs(tree: FilteringTree) -> list[Optional[int]]:
    """Level-order action ids with None markers for absent children.

    Children of emitted nodes appear as None when missing; trailing None
    markers are trimmed. Round-trips with :func:`deserialize_bfs`.
    """
    out: list[Optional[int]] = []
    queue: list[Optional[int]] = [tree.root]
    while queue:
        idx = queue.pop(0)
        if idx is None:
            out.append(None)
            continue
        node = tree.nodes[idx]
        out.append(node.action_id)
        queue.append(node.left)
        queue.append(node.right)
    while out and out[-1] is None:
        out.pop()
    return out


def deserialize_bfs(seq: Sequence[Optional[int]]) -> FilteringTree:
    """Inverse of :func:`serialize_bfs`; validates all tree invariants."""
    if not seq or seq[0] is None:
        raise TreeValidationError("sequence must start with a root action")
    nodes: list[dict] = []
    order: list[int] = []  # node index per non-null token
    for token in seq:
        if token is None:
            order.append(-1)
            continue
        if not isinstance(token, int) or not (0 <= token < N_ACTIONS):
            raise TreeValidationError(f"invalid action token {token!r}")
        nodes.append({"action_id": token, "left": None, "right": None})
        order.append(len(nodes) - 1)

    # Rebuild parent/child links by replaying the level-order queue.
    queue = [0]
    pos = 1
    while queue and pos < len(order):
        parent = queue.pop(0)
        for side in ("left", "right"):
            if pos >= len(order):
                break
            child = order[pos]
            pos += 1
            if child == -1:
                continue
            nodes[parent][side] = child
            queue.append(child)
    if pos < len(order):
        raise TreeValidationError("sequence has tokens beyond the last open slot")
    return FilteringTree(
        nodes=tuple(TreeNode(**n) for n in nodes),
        root=0,
    )


def tree_to_json(tree: FilteringTree) -> dict:
    return {
        "nodes": [
            {"action": n.action_id, "left": n.left, "right": n.right} for n in tree.nodes
        ],
        "root": tree.root,
    }


def tree_from_json(data) -> FilteringTree:
    """Accepts the node-list form or the BFS sequence form."""
    if isinstance(data, list):
        return deserialize_bfs(data)
    if not isinstance(data, dict) or "nodes" not in data:
        raise TreeValidationError("expected a node-list object or a BFS sequence")
    nodes = tuple(
        TreeNode(action_id=n["action"], left=n.get("left"), right=n.get("right"))
        for n in data["nodes"]
    )
    return FilteringTree(nodes=nodes, root=data.get("root", 0))
