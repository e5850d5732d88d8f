"""Inference-time segmentation by repeated learned region growing.

A region starts at the unlabeled point of minimum curvature and is grown by
alternating removal of predicted outliers and admission of predicted neighbor
points until no candidates remain, no additions are predicted, or the region
stops expanding for two consecutive steps. Grown regions claim fresh instance
ids; undersized ones are merged into their nearest surviving instance.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.spatial import cKDTree

from .features import (
    COL_CURVATURE,
    SceneContext,
    normalize_inputs,
    passthrough_positions,
    query_neighbors,
    sample_fixed,
)
from .simulate import RegionState

MASK_THRESHOLD = 0.5
DEFAULT_STEP_CAP = 500
DEFAULT_MIN_SEGMENT = 10


@dataclass
class GrowConfig:
    i_size: int = 512
    j_size: int = 512
    policy: str = "greedy"            # greedy | stochastic
    max_steps: int = DEFAULT_STEP_CAP
    min_segment: int = DEFAULT_MIN_SEGMENT
    use_remove_mask: bool = True
    normalize: bool = True
    feature_columns: tuple[int, ...] | None = None
    protect_seed: bool = True
    seed_selection: str = "curvature"  # curvature | random


@dataclass
class GrowStep:
    added: np.ndarray
    removed: np.ndarray
    step_loglik: float


@dataclass
class GrowResult:
    members: set[int]
    loglik: float
    steps: int
    inferences: int
    capped: bool = False
    add_fraction: float = 0.0
    remove_fraction: float = 0.0


def select_seed(curvature: np.ndarray, labels: np.ndarray) -> int:
    """Unlabeled point with minimum curvature; ties go to the lowest index."""
    unlabeled = np.flatnonzero(np.asarray(labels) == 0)
    if unlabeled.size == 0:
        raise ValueError("no unlabeled points left to seed from")
    return int(unlabeled[np.argmin(np.asarray(curvature)[unlabeled])])


def _vote(ids: np.ndarray, bits: np.ndarray, majority: bool) -> np.ndarray:
    """Reduce per-slot decisions to per-point decisions.

    Resampled points may occupy several slots: removal needs at least half of
    a point's slots voting yes, addition needs a single yes vote.
    """
    uniq, inverse = np.unique(ids, return_inverse=True)
    yes = np.bincount(inverse, weights=bits.astype(np.float64))
    if majority:
        total = np.bincount(inverse)
        return uniq[2 * yes >= total]
    return uniq[yes >= 1]


def _region_inputs(ctx: SceneContext, members_arr, frontier, cfg: GrowConfig, rng):
    inl = sample_fixed(members_arr, cfg.i_size, rng)
    nbr = sample_fixed(frontier, cfg.j_size, rng)
    cols = cfg.feature_columns if cfg.feature_columns is not None \
        else tuple(range(ctx.features.shape[1]))
    xi = ctx.features[inl][:, cols]
    xn = ctx.features[nbr][:, cols]
    if cfg.normalize:
        xi, xn = normalize_inputs(xi, xn, passthrough=passthrough_positions(cols))
    return inl, nbr, xi, xn


def grow_step(ctx: SceneContext, predictor, state: RegionState, labels,
              cfg: GrowConfig, rng: np.random.Generator,
              frontier: np.ndarray | None = None):
    """One prediction-driven update of the region.

    Returns (new_state, GrowStep) or (state, None) when there are no neighbor
    candidates. An empty predicted add set leaves the region untouched (the
    caller treats it as a termination signal).
    """
    if frontier is None:
        frontier = query_neighbors(ctx.index, state.members, labels, ctx.delta)
    if frontier.size == 0:
        return state, None
    members_arr = np.fromiter(sorted(state.members), dtype=np.int64, count=len(state.members))
    inl, nbr, xi, xn = _region_inputs(ctx, members_arr, frontier, cfg, rng)
    p_remove, p_add = predictor(xi, xn)

    if cfg.policy == "greedy":
        remove_bits = p_remove > MASK_THRESHOLD
        add_bits = p_add > MASK_THRESHOLD
        loglik = 0.0
    elif cfg.policy == "stochastic":
        remove_bits = rng.random(p_remove.size) < p_remove
        add_bits = rng.random(p_add.size) < p_add
        chosen = np.concatenate([
            np.where(remove_bits, p_remove, 1.0 - p_remove),
            np.where(add_bits, p_add, 1.0 - p_add),
        ])
        loglik = float(np.log(chosen).sum())
    else:
        raise ValueError(f"unknown policy {cfg.policy!r}")

    if not cfg.use_remove_mask:
        remove_bits = np.zeros_like(remove_bits)

    added = _vote(nbr, add_bits, majority=False)
    if added.size == 0:
        return state, GrowStep(added, np.empty(0, dtype=np.int64), loglik)
    removed = _vote(inl, remove_bits, majority=True)
    if cfg.protect_seed:
        removed = removed[removed != state.seed]

    members = set(state.members)
    members.difference_update(int(i) for i in removed)
    members.update(int(i) for i in added)
    expanded = len(members) > len(state.members)
    new_state = RegionState(members, state.seed, state.step + 1,
                            0 if expanded else min(state.stagnant_steps + 1, 2),
                            state.loglik + loglik)
    return new_state, GrowStep(added, removed, loglik)


def grow_region(ctx: SceneContext, predictor, seed: int, labels,
                cfg: GrowConfig, rng: np.random.Generator) -> GrowResult:
    """Grow from one seed until a termination condition fires."""
    eligible = np.asarray(labels) == 0
    state = RegionState({int(seed)}, int(seed))
    tracker = ctx.new_tracker()
    tracker.add([int(seed)])
    inferences = 0
    capped = False
    add_counts = []
    remove_counts = []
    while True:
        if state.step >= cfg.max_steps:
            capped = True
            break
        frontier = tracker.frontier(eligible)
        if frontier.size == 0:
            break
        new_state, step = grow_step(ctx, predictor, state, labels, cfg, rng,
                                    frontier=frontier)
        inferences += 1
        if step.added.size == 0:
            break  # predicted add set is empty
        add_counts.append(step.added.size / min(cfg.j_size, frontier.size))
        remove_counts.append(step.removed.size / min(cfg.i_size, len(state.members)))
        tracker.remove(step.removed)
        tracker.add(step.added)
        state = new_state
        if state.stagnant_steps >= 2:
            break  # no expansion for two consecutive steps
    return GrowResult(
        state.members, state.loglik, state.step, inferences, capped,
        float(np.mean(add_counts)) if add_counts else 0.0,
        float(np.mean(remove_counts)) if remove_counts else 0.0)


def reassign_small_segments(cloud, labels: np.ndarray,
                            min_segment: int = DEFAULT_MIN_SEGMENT) -> np.ndarray:
    """Merge undersized segments into surviving ones by nearest neighbor.

    Every point of a segment smaller than `min_segment` takes the label of its
    Euclidean nearest neighbor among points of surviving (large enough)
    segments. If nothing survives, the largest fragment is promoted instead.
    Output ids are relabeled to a contiguous 1..M by order of first occurrence.
    """
    labels = np.asarray(labels, dtype=np.int32).copy()
    if (labels == 0).any():
        raise ValueError("labels must be complete before reassignment")
    ids, counts = np.unique(labels, return_counts=True)
    surviving = ids[counts >= min_segment]
    if surviving.size == 0:
        surviving = np.array([ids[np.argmax(counts)]])
    small_mask = ~np.isin(labels, surviving)
    if small_mask.any():
        big_idx = np.flatnonzero(~small_mask)
        tree = cKDTree(cloud.positions[big_idx])
        _, nearest = tree.query(cloud.positions[small_mask])
        labels[small_mask] = labels[big_idx[nearest]]
    # contiguous relabel by first occurrence
    uniq, first = np.unique(labels, return_index=True)
    order = uniq[np.argsort(first)]
    remap = np.zeros(labels.max() + 1, dtype=np.int32)
    for new, old in enumerate(order, start=1):
        remap[old] = new
    return remap[labels]


def segment_scene(ctx: SceneContext, predictor, grow_cfg: GrowConfig,
                  search_cfg=None, rng: np.random.Generator | None = None):
    """Segment a whole scene; returns (labels, stats).

    Every outer iteration seeds a new region, grows it (optionally through a
    local-search strategy) and permanently assigns a fresh instance id, so the
    loop always terminates. Undersized regions are merged afterwards.
    """
    from .search import SearchConfig, run_search

    if rng is None:
        rng = np.random.default_rng(0)
    if search_cfg is None:
        search_cfg = SearchConfig(strategy="greedy")
    curvature = ctx.features[:, COL_CURVATURE]
    labels = np.zeros(ctx.n_points, dtype=np.int32)
    next_id = 1
    total_inferences = 0
    regions = 0
    capped_regions = 0
    add_fracs = []
    remove_fracs = []
    while True:
        unlabeled = np.flatnonzero(labels == 0)
        if unlabeled.size == 0:
            break
        if grow_cfg.seed_selection == "random":
            seed = int(rng.choice(unlabeled))
        else:
            seed = select_seed(curvature, labels)
        result = run_search(ctx, predictor, seed, labels, grow_cfg, search_cfg, rng)
        members = np.fromiter(sorted(result.members), dtype=np.int64,
                              count=len(result.members))
        labels[members] = next_id
        next_id += 1
        regions += 1
        total_inferences += result.inferences
        capped_regions += int(result.capped)
        add_fracs.append(result.add_fraction)
        remove_fracs.append(result.remove_fraction)
    final = reassign_small_segments(ctx.cloud, labels, grow_cfg.min_segment)
    stats = {
        "regions_grown": regions,
        "instances": int(final.max()),
        "inferences": total_inferences,
        "steps_per_region": total_inferences / max(regions, 1),
        "capped_regions": capped_regions,
        "mean_add_fraction": float(np.mean(add_fracs)) if add_fracs else 0.0,
        "mean_remove_fraction": float(np.mean(remove_fracs)) if remove_fracs else 0.0,
    }
    return final, stats
