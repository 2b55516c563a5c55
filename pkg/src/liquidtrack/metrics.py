"""Evaluation: mask overlap scores and sequence likelihoods.

Scores predicted binary masks against observed ones two ways: per-frame
intersection over union, and a per-pixel symmetric-channel log-likelihood
accumulated over whole sequences. Everything runs in log space; a
sequence of tens of millions of pixels stays finite.
"""

from __future__ import annotations

import heapq
import logging
from dataclasses import dataclass, field

import numpy as np

from .particles import ValidationError

__all__ = [
    "IouSeries",
    "SimPosterior",
    "calibrate_params",
    "iou",
    "iou_series",
    "posterior_over_candidates",
    "sequence_log_likelihood",
]

log = logging.getLogger(__name__)


def iou(predicted: np.ndarray, observed: np.ndarray):
    """Intersection over union of two binary masks.

    Returns None (undefined) when the union is empty; callers exclude
    such frames from aggregates rather than treating them as zero.
    """
    if predicted.shape != observed.shape:
        raise ValidationError(
            f"mask shapes differ: {predicted.shape} vs {observed.shape}"
        )
    union = np.logical_or(predicted, observed).sum()
    if union == 0:
        return None
    inter = np.logical_and(predicted, observed).sum()
    return float(inter) / float(union)


@dataclass
class IouSeries:
    """Per-frame IOU values with undefined frames excluded from the mean."""

    values: list  # per-frame float or None

    @property
    def defined(self) -> np.ndarray:
        return np.array([v for v in self.values if v is not None])

    @property
    def mean(self) -> float:
        d = self.defined
        return float(d.mean()) if len(d) else float("nan")

    @property
    def undefined_count(self) -> int:
        return sum(1 for v in self.values if v is None)


def iou_series(predicted_masks, observed_masks) -> IouSeries:
    if len(predicted_masks) != len(observed_masks):
        raise ValidationError(
            f"sequence lengths differ: {len(predicted_masks)} vs {len(observed_masks)}"
        )
    return IouSeries([iou(p, o) for p, o in zip(predicted_masks, observed_masks)])


def _check_delta(delta: float):
    if not 0.5 < delta < 1.0:
        raise ValidationError(f"delta must be in (0.5, 1), got {delta}")


def frame_log_likelihoods(predicted_masks, observed_masks, delta: float = 0.50001) -> np.ndarray:
    """Per-frame log-likelihood terms under the symmetric pixel channel."""
    _check_delta(delta)
    if len(predicted_masks) != len(observed_masks):
        raise ValidationError(
            f"sequence lengths differ: {len(predicted_masks)} vs {len(observed_masks)}"
        )
    log_d = np.log(delta)
    log_1d = np.log1p(-delta)
    out = np.empty(len(predicted_masks))
    for k, (p, o) in enumerate(zip(predicted_masks, observed_masks)):
        if p.shape != o.shape:
            raise ValidationError(f"frame {k}: mask shapes differ")
        agree = int(np.count_nonzero(p == o))
        total = p.size
        out[k] = agree * log_d + (total - agree) * log_1d
    return out


def sequence_log_likelihood(predicted_masks, observed_masks, delta: float = 0.50001) -> float:
    """Log-probability of the observed sequence given the predicted one.

    Each pixel contributes log(delta) when the labels agree and
    log(1 - delta) when they disagree, summed over all frames.
    """
    return float(frame_log_likelihoods(predicted_masks, observed_masks, delta).sum())


@dataclass
class SimPosterior:
    """Normalized probabilities over candidate simulations (uniform prior)."""

    log_likelihoods: np.ndarray
    probabilities: np.ndarray = field(init=False)

    def __post_init__(self):
        self.log_likelihoods = np.asarray(self.log_likelihoods, dtype=np.float64)
        self.probabilities = _softmax(self.log_likelihoods)


def _softmax(log_values: np.ndarray) -> np.ndarray:
    shifted = log_values - log_values.max()
    w = np.exp(shifted)
    return w / w.sum()


def posterior_over_candidates(
    candidate_mask_sequences, observed_masks, delta: float = 0.50001
) -> SimPosterior:
    """Posterior over candidates from their predicted mask sequences."""
    if len(candidate_mask_sequences) == 0:
        raise ValidationError("need at least one candidate")
    lls = np.array(
        [
            sequence_log_likelihood(cand, observed_masks, delta)
            for cand in candidate_mask_sequences
        ]
    )
    return SimPosterior(lls)


def posterior_series(candidate_frame_lls: np.ndarray) -> np.ndarray:
    """Per-frame posteriors from cumulative log-likelihoods.

    Input is (candidates, frames); output (frames, candidates), each row
    the posterior given all frames up to and including that one.
    """
    cum = np.cumsum(candidate_frame_lls, axis=1)
    out = np.empty((cum.shape[1], cum.shape[0]))
    for t in range(cum.shape[1]):
        out[t] = _softmax(cum[:, t])
    return out


def calibrate_params(param_grid: dict, score_fn, start: dict | None = None):
    """Best-first search over a finite parameter grid.

    `param_grid` maps parameter names to sorted value lists; `score_fn`
    receives a {name: value} dict and returns a score to maximize
    (typically the mean IOU of an open-loop rollout against observed
    masks). Expansion starts from the grid midpoint (or `start`), always
    expands the best unexpanded point, and stops when the frontier falls
    below the incumbent. Returns (best_params, best_score, evaluations).
    """
    names = sorted(param_grid)
    axes = {n: list(param_grid[n]) for n in names}
    if any(len(v) == 0 for v in axes.values()) or not names:
        raise ValidationError("parameter grid must have at least one point per axis")

    def params_at(idx):
        return {n: axes[n][k] for n, k in zip(names, idx)}

    if start is None:
        seed = tuple(len(axes[n]) // 2 for n in names)
    else:
        seed = tuple(axes[n].index(start[n]) for n in names)

    scores = {seed: float(score_fn(params_at(seed)))}
    heap = [(-scores[seed], seed)]
    expanded = set()
    best_idx, best = seed, scores[seed]
    while heap:
        neg, idx = heapq.heappop(heap)
        if idx in expanded:
            continue
        if -neg < best and idx != best_idx:
            break
        expanded.add(idx)
        for axis, name in enumerate(names):
            for step in (-1, 1):
                k = idx[axis] + step
                if not 0 <= k < len(axes[name]):
                    continue
                nxt = idx[:axis] + (k,) + idx[axis + 1 :]
                if nxt in scores:
                    continue
                scores[nxt] = float(score_fn(params_at(nxt)))
                log.info("calibration point %s -> %.4f", params_at(nxt), scores[nxt])
                if scores[nxt] > best:
                    best_idx, best = nxt, scores[nxt]
                heapq.heappush(heap, (-scores[nxt], nxt))
    return params_at(best_idx), best, len(scores)
