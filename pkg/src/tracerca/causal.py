"""Causal attribution of the frontend latency shift on a pruned graph.

Each component's inclusive latency is modelled per window as a linear
function of the inclusive latencies of the services it invokes, plus an
empirical residual (the component's own work). Replacing the mechanisms of
a subset with their alert-window versions realises a hybrid distribution;
Shapley values over these replacements attribute the shift of the frontend
median between the two windows.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from tracerca.core import DependencyGraph, IncidentCase, PerWindow, Window, WindowPair
from tracerca.indicators import compute_indicators
from tracerca.pruning import FilteringTree, PruneResult, execute

DEFAULT_SAMPLES = 10_000
MIN_SAMPLES_FOR_MEDIANS = 100
EXACT_MAX_PLAYERS = 12
DEFAULT_PERMUTATIONS = 200
DEFAULT_MIN_FIT_BUCKETS = 8


class CausalDataError(ValueError):
    """A kept component has no usable latency data in a window."""


@dataclass(frozen=True)
class Mechanism:
    """Sampler of a node's InL given its invoked services' InL values.

    value = coef * sum(parents) + draw(pool). Marginal mechanisms
    (leaves, or fallback on sparse data) have coef 0 and an empirical
    value pool.
    """

    coef: float
    pool: np.ndarray
    kind: str  # "linear" or "marginal"


@dataclass(frozen=True)
class CausalModel:
    graph: DependencyGraph
    windows: WindowPair
    mechanisms: Mapping[str, PerWindow[Mechanism]]
    warnings: tuple[str, ...] = ()

    def causal_parents(self, cid: str) -> tuple[str, ...]:
        """Latency flows callee -> caller, so a node's parents are its callees."""
        return self.graph.children(cid)

    def ancestral_order(self) -> tuple[str, ...]:
        """Callees before callers; frontend last."""
        return tuple(reversed(self.graph.topological_order()))


@dataclass(frozen=True)
class AttributionResult:
    contributions: dict[str, float]
    delta_phi: float
    ranking: tuple[str, ...]
    method: str  # "exact" or "permutation"


def fit_model(
    pruned: DependencyGraph,
    windows: WindowPair,
    min_samples: int = DEFAULT_MIN_FIT_BUCKETS,
) -> CausalModel:
    """Fit per-window mechanisms for every node of the pruned graph.

    The transmission coefficient (how callee latency propagates into the
    node) is structural, so one slope is fit by least squares on the base
    and alert buckets pooled; an incident's between-window separation then
    pins it sharply, where short stationary windows alone could not. The
    per-window residual pools keep everything window-specific: intercept,
    the node's own work, and any shift of it. Negative slopes are
    physically impossible for latency propagation and clamp to zero.
    Nodes with fewer than ``min_samples`` usable buckets in either window
    fall back to their empirical marginal with a warning.
    """
    mechanisms: dict[str, PerWindow[Mechanism]] = {}
    warnings: list[str] = []
    for cid in pruned.component_ids:
        stats = pruned.components[cid]
        parents = pruned.children(cid)
        aligned: dict[Window, tuple[np.ndarray, np.ndarray]] = {}
        marginal: dict[Window, np.ndarray] = {}
        for window in (Window.BASE, Window.ALERT):
            y = stats.inl.get(window).as_array()
            marginal[window] = y[~np.isnan(y)]
            if marginal[window].size == 0:
                raise CausalDataError(
                    f"component {cid!r} has no inclusive-latency data in the "
                    f"{window.value} window"
                )
            x = np.zeros_like(y)
            valid = ~np.isnan(y)
            for p in parents:
                pv = pruned.components[p].inl.get(window).as_array()
                valid &= ~np.isnan(pv)
                x = x + np.where(np.isnan(pv), 0.0, pv)
            aligned[window] = (x[valid], y[valid])

        use_linear = bool(parents) and all(
            aligned[w][0].size >= min_samples for w in (Window.BASE, Window.ALERT)
        )
        if bool(parents) and not use_linear:
            warnings.append(
                f"{cid}: too few aligned buckets "
                f"({aligned[Window.BASE][0].size} base / {aligned[Window.ALERT][0].size} "
                f"alert < {min_samples}), using empirical marginals"
            )
        if not use_linear:
            mechanisms[cid] = PerWindow(
                Mechanism(0.0, marginal[Window.BASE], "marginal"),
                Mechanism(0.0, marginal[Window.ALERT], "marginal"),
            )
            continue
        pooled_x = np.concatenate([aligned[w][0] for w in (Window.BASE, Window.ALERT)])
        pooled_y = np.concatenate([aligned[w][1] for w in (Window.BASE, Window.ALERT)])
        xc = pooled_x - pooled_x.mean()
        denom = float(np.dot(xc, xc))
        coef = float(np.dot(xc, pooled_y - pooled_y.mean()) / denom) if denom > 0 else 0.0
        coef = max(coef, 0.0)
        mechanisms[cid] = PerWindow(
            Mechanism(coef, aligned[Window.BASE][1] - coef * aligned[Window.BASE][0], "linear"),
            Mechanism(coef, aligned[Window.ALERT][1] - coef * aligned[Window.ALERT][0], "linear"),
        )
    return CausalModel(
        graph=pruned, windows=windows, mechanisms=mechanisms, warnings=tuple(warnings)
    )


def _draws(model: CausalModel, n_samples: int, seed: int) -> dict[str, PerWindow[np.ndarray]]:
    """Pre-draw each node's noise for both windows from shared uniforms.

    Sharing the uniforms across windows makes coalition evaluations use
    common random numbers: nodes whose two mechanisms are identical draw
    identical values, so swapping them never moves the estimate.
    """
    rng = np.random.Generator(np.random.PCG64(seed))
    out: dict[str, PerWindow[np.ndarray]] = {}
    for cid in sorted(model.graph.component_ids):
        u = rng.random(n_samples)
        per = {}
        for window in (Window.BASE, Window.ALERT):
            pool = model.mechanisms[cid].get(window).pool
            per[window] = pool[np.minimum((u * pool.size).astype(np.int64), pool.size - 1)]
        out[cid] = PerWindow(per[Window.BASE], per[Window.ALERT])
    return out


def _frontend_samples(
    model: CausalModel,
    assignment: Mapping[str, Window],
    draws: Mapping[str, PerWindow[np.ndarray]],
) -> np.ndarray:
    values: dict[str, np.ndarray] = {}
    for cid in model.ancestral_order():
        window = assignment[cid]
        mech = model.mechanisms[cid].get(window)
        v = draws[cid].get(window)
        if mech.coef != 0.0:
            parent_sum = None
            for p in model.causal_parents(cid):
                parent_sum = values[p] if parent_sum is None else parent_sum + values[p]
            if parent_sum is not None:
                v = v + mech.coef * parent_sum
        values[cid] = v
    return values[model.graph.frontend_id]


def simulate_frontend(
    model: CausalModel,
    assignment: Mapping[str, Window],
    n_samples: int,
    seed: int,
) -> np.ndarray:
    """Ancestral sampling of the frontend's InL under a per-node window assignment."""
    missing = [cid for cid in model.graph.component_ids if cid not in assignment]
    if missing:
        raise ValueError(f"assignment missing for: {missing[:5]}")
    return _frontend_samples(model, assignment, _draws(model, n_samples, seed))


def attribute(
    model: CausalModel,
    n_samples: int = DEFAULT_SAMPLES,
    seed: int = 0,
    exact_max_players: int = EXACT_MAX_PLAYERS,
    n_permutations: int = DEFAULT_PERMUTATIONS,
) -> AttributionResult:
    """Shapley attribution of the frontend median shift to each node.

    The value of a coalition S is the frontend median with S's mechanisms
    set to the alert window (rest base) minus the all-base median. Exact
    enumeration over all subsets for small graphs; permutation sampling
    (with the same cached coalition values) otherwise. Ties in the ranking
    break by ascending component id.
    """
    if n_samples < MIN_SAMPLES_FOR_MEDIANS:
        raise ValueError(
            f"n_samples must be >= {MIN_SAMPLES_FOR_MEDIANS} for stable medians"
        )
    players = sorted(model.graph.component_ids)
    n = len(players)
    draws = _draws(model, n_samples, seed)
    cache: dict[int, float] = {}

    def value(mask: int) -> float:
        got = cache.get(mask)
        if got is not None:
            return got
        assignment = {
            cid: (Window.ALERT if mask >> i & 1 else Window.BASE)
            for i, cid in enumerate(players)
        }
        v = float(np.median(_frontend_samples(model, assignment, draws)))
        cache[mask] = v
        return v

    base_median = value(0)
    full = (1 << n) - 1
    delta_phi = value(full) - base_median

    phi = dict.fromkeys(players, 0.0)
    if n <= exact_max_players:
        method = "exact"
        weights = [1.0 / (n * math.comb(n - 1, s)) for s in range(n)]
        for bits in range(1 << (n - 1)):
            for i, cid in enumerate(players):
                without = _insert_bit(bits, i, 0)
                size = bin(without).count("1")
                phi[cid] += weights[size] * (
                    value(_insert_bit(bits, i, 1)) - value(without)
                )
    else:
        method = "permutation"
        rng = np.random.Generator(np.random.PCG64(seed + 1))
        for _ in range(n_permutations):
            order = rng.permutation(n)
            mask = 0
            prev = base_median
            for i in order:
                mask |= 1 << int(i)
                cur = value(mask)
                phi[players[int(i)]] += cur - prev
                prev = cur
        for cid in players:
            phi[cid] /= n_permutations

    contributions = dict(phi)
    ranking = tuple(sorted(players, key=lambda cid: (-contributions[cid], cid)))
    return AttributionResult(
        contributions=contributions,
        delta_phi=delta_phi,
        ranking=ranking,
        method=method,
    )


def _insert_bit(bits: int, position: int, value: int) -> int:
    """Insert a bit at ``position`` into ``bits``, shifting higher bits left."""
    low = bits & ((1 << position) - 1)
    high = (bits >> position) << (position + 1)
    return high | (value << position) | low


@dataclass(frozen=True)
class DiagnosisReport:
    case_id: str
    delta_phi_ms: float
    ranking: tuple[str, ...]
    contributions: dict[str, float]
    kept: tuple[str, ...]
    removed: tuple[str, ...]
    method: str
    model_warnings: tuple[str, ...] = ()

    def to_json(self) -> dict:
        return {
            "case_id": self.case_id,
            "delta_phi_ms": self.delta_phi_ms,
            "ranking": list(self.ranking),
            "contributions": {cid: self.contributions[cid] for cid in sorted(self.contributions)},
            "kept": list(self.kept),
            "removed": list(self.removed),
            "method": self.method,
            "model_warnings": list(self.model_warnings),
        }

    def render_text(self, top: int = 10) -> str:
        lines = [
            f"case: {self.case_id}",
            f"frontend median shift: {self.delta_phi_ms:+.3f} ms",
            f"components kept/removed: {len(self.kept)}/{len(self.removed)}",
            f"attribution method: {self.method}",
            "ranked root-cause candidates:",
        ]
        for i, cid in enumerate(self.ranking[:top], start=1):
            lines.append(f"  {i:2d}. {cid}  {self.contributions[cid]:+.3f} ms")
        return "\n".join(lines)


def diagnose(
    case: IncidentCase,
    tree: Optional[FilteringTree],
    n_samples: int = DEFAULT_SAMPLES,
    seed: int = 0,
    min_fit_buckets: int = DEFAULT_MIN_FIT_BUCKETS,
    exact_max_players: int = EXACT_MAX_PLAYERS,
    n_permutations: int = DEFAULT_PERMUTATIONS,
) -> tuple[DiagnosisReport, Optional[PruneResult]]:
    """Full pipeline: indicators, pruning, causal fit, Shapley attribution.

    Pass ``tree=None`` to attribute on the unpruned graph (slow path).
    Errors from sub-stages are re-raised with a stage label.
    """
    stage = "indicators"
    try:
        inds = compute_indicators(case.graph)
        prune: Optional[PruneResult] = None
        if tree is not None:
            stage = "pruning"
            prune = execute(tree, case.graph, inds)
            graph = prune.pruned_graph
        else:
            graph = case.graph
        stage = "causal-fit"
        model = fit_model(graph, case.windows, min_samples=min_fit_buckets)
        stage = "attribution"
        result = attribute(
            model,
            n_samples=n_samples,
            seed=seed,
            exact_max_players=exact_max_players,
            n_permutations=n_permutations,
        )
    except Exception as exc:
        raise RuntimeError(f"diagnose failed at stage {stage!r}: {exc}") from exc
    report = DiagnosisReport(
        case_id=case.case_id,
        delta_phi_ms=result.delta_phi,
        ranking=result.ranking,
        contributions=result.contributions,
        kept=tuple(sorted(prune.kept)) if prune else tuple(case.graph.component_ids),
        removed=tuple(sorted(prune.removed)) if prune else (),
        method=result.method,
        model_warnings=model.warnings,
    )
    return report, prune
