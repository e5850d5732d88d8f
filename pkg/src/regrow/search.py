"""Local-search strategies over region-growing rollouts.

Five ways to turn one seed into a final region: a single greedy rollout,
random restarts with the winner picked by summed log-likelihood (ML) or by
final region size (NP), and beam search under the same two criteria.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .features import SceneContext
from .grow import GrowConfig, GrowResult, grow_region, grow_step
from .simulate import RegionState

STRATEGIES = ("greedy", "rr-ml", "rr-np", "bs-ml", "bs-np")


@dataclass
class SearchConfig:
    strategy: str = "greedy"
    restarts: int = 10
    beam_width: int = 3
    expansions: int = 3

    def __post_init__(self):
        self.strategy = self.strategy.replace("_", "-")
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}; pick from {STRATEGIES}")
        if self.restarts < 1 or self.beam_width < 1 or self.expansions < 1:
            raise ValueError("restarts, beam_width and expansions must all be >= 1")


@dataclass
class SearchResult:
    members: set[int]
    criterion: float
    inferences: int
    capped: bool = False
    add_fraction: float = 0.0
    remove_fraction: float = 0.0


def accumulate_loglik(steps) -> float:
    """Total log-likelihood of a rollout's sampled mask decisions."""
    return float(sum(s.step_loglik for s in steps))


def _criterion(members: set[int], loglik: float, kind: str) -> float:
    return loglik if kind == "ml" else float(len(members))


def _result_from_grow(res: GrowResult, kind: str) -> SearchResult:
    return SearchResult(res.members, _criterion(res.members, res.loglik, kind),
                        res.inferences, res.capped, res.add_fraction,
                        res.remove_fraction)


def run_search(ctx: SceneContext, predictor, seed: int, labels,
               grow_cfg: GrowConfig, search_cfg: SearchConfig,
               rng: np.random.Generator) -> SearchResult:
    """Find the best final region for one seed under the configured strategy."""
    if search_cfg.strategy == "greedy":
        res = grow_region(ctx, predictor, seed, labels,
                          replace(grow_cfg, policy="greedy"), rng)
        return _result_from_grow(res, "np")
    kind = search_cfg.strategy[-2:]  # "ml" or "np"
    stochastic = replace(grow_cfg, policy="stochastic")
    if search_cfg.strategy.startswith("rr"):
        return _random_restart(ctx, predictor, seed, labels, stochastic,
                               search_cfg, kind, rng)
    return _beam_search(ctx, predictor, seed, labels, stochastic,
                        search_cfg, kind, rng)


def _random_restart(ctx, predictor, seed, labels, grow_cfg, search_cfg, kind, rng):
    best: SearchResult | None = None
    inferences = 0
    for child in rng.spawn(search_cfg.restarts):
        res = grow_region(ctx, predictor, seed, labels, grow_cfg, child)
        inferences += res.inferences
        cand = _result_from_grow(res, kind)
        if best is None or cand.criterion > best.criterion:
            best = replace(cand)
    best.inferences = inferences
    return best


@dataclass
class _BeamState:
    state: RegionState
    tracker: object
    finished: bool = False
    capped: bool = False


def _beam_search(ctx, predictor, seed, labels, grow_cfg, search_cfg, kind, rng):
    """Track up to K live regions, expanding each a few times per round."""
    eligible = np.asarray(labels) == 0
    root_tracker = ctx.new_tracker()
    root_tracker.add([int(seed)])
    live = [_BeamState(RegionState({int(seed)}, int(seed)), root_tracker)]
    finished: list[_BeamState] = []
    inferences = 0
    while live:
        children: list[_BeamState] = []
        for parent in live:
            for child_rng in rng.spawn(search_cfg.expansions):
                st = _BeamState(
                    RegionState(set(parent.state.members), parent.state.seed,
                                parent.state.step, parent.state.stagnant_steps,
                                parent.state.loglik),
                    parent.tracker.copy())
                if st.state.step >= grow_cfg.max_steps:
                    st.finished = True
                    st.capped = True
                    finished.append(st)
                    continue
                frontier = st.tracker.frontier(eligible)
                if frontier.size == 0:
                    st.finished = True
                    finished.append(st)
                    continue
                new_state, step = grow_step(ctx, predictor, st.state, labels,
                                            grow_cfg, child_rng, frontier=frontier)
                inferences += 1
                if step.added.size == 0:
                    st.state = new_state
                    st.finished = True
                    finished.append(st)
                    continue
                st.tracker.remove(step.removed)
                st.tracker.add(step.added)
                st.state = new_state
                if new_state.stagnant_steps >= 2:
                    st.finished = True
                    finished.append(st)
                else:
                    children.append(st)
        # deduplicate identical regions, then prune to the K best
        seen = set()
        unique = []
        for st in children:
            key = hash(frozenset(st.state.members))
            if key not in seen:
                seen.add(key)
                unique.append(st)
        unique.sort(key=lambda st: -_criterion(st.state.members, st.state.loglik, kind))
        live = unique[:search_cfg.beam_width]
    best = max(finished,
               key=lambda st: _criterion(st.state.members, st.state.loglik, kind))
    return SearchResult(best.state.members,
                        _criterion(best.state.members, best.state.loglik, kind),
                        inferences, best.capped)
