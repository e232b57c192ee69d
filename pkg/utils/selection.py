"""
Uncertainty-guided choice of the intervention target set P.

Entropy of the frozen (or currently hooked) predictions is pushed through a
sharp sigmoid gate, and the mask is drawn from the resulting probabilities.
"""
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.special

from utils.errors import DatasetFormatError, ShapeError
from utils.kernel import make_rng

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class InterventionMask:
    m: np.ndarray
    probs: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.m, dtype=bool)
        probs = np.asarray(self.probs, dtype=np.float64)
        if m.ndim != 1 or probs.shape != m.shape:
            raise ShapeError(f"mask and probabilities must be equal-length vectors, got {m.shape} and {probs.shape}")
        object.__setattr__(self, "m", m)
        object.__setattr__(self, "probs", probs)

    @property
    def indices(self):
        return np.flatnonzero(self.m)

    @property
    def size(self):
        return int(self.m.sum())

    @classmethod
    def empty(cls, n):
        return cls(np.zeros(n, dtype=bool), np.zeros(n))


def predictive_entropy(proba):
    """Natural-log entropy per row; 0·log 0 counts as 0"""
    return scipy.special.entr(np.asarray(proba, dtype=np.float64)).sum(axis=1)


def resolve_threshold(entropy, candidates, cfg):
    if cfg.entropy_threshold is not None:
        return float(cfg.entropy_threshold)
    candidates = np.asarray(candidates)
    if candidates.size == 0:
        return 0.0
    return float(np.median(entropy[candidates]))


def gate_probabilities(entropy, cfg, threshold=None):
    """p_i = σ(α_gate · (E_i − E_threshold))"""
    if threshold is None:
        threshold = cfg.entropy_threshold if cfg.entropy_threshold is not None else 0.0
    return scipy.special.expit(cfg.alpha_gate * (np.asarray(entropy, dtype=np.float64) - threshold))


def candidate_indices(masks, cfg):
    if cfg.candidate_set == "test_only":
        return masks.indices("test")
    return np.arange(len(masks.test))


def _ranked_by_entropy(candidates, scores):
    # highest score first, ties by ascending node index
    return candidates[np.lexsort((candidates, -scores[candidates]))]


def sample_mask(probs, cfg, seed, candidates, entropy=None, stream=()):
    """
    Draw the intervention mask.

    Parameters:
    - probs: gate probabilities for all N nodes
    - cfg: SelectionConfig
    - seed: run seed; the draw uses its own "selection" stream
    - candidates: node indices eligible for selection
    - entropy: ranking scores for top_fraction (defaults to ``probs``)
    - stream: extra stream keys, e.g. the epoch when resampling

    Returns:
    - InterventionMask
    """
    probs = np.asarray(probs, dtype=np.float64)
    candidates = np.asarray(candidates, dtype=np.int64)
    n = len(probs)
    eligible = np.zeros(n, dtype=bool)
    eligible[candidates] = True
    rng = make_rng(seed, "selection", *stream)
    m = np.zeros(n, dtype=bool)
    quota = math.ceil(cfg.fraction * len(candidates))

    if cfg.mode == "bernoulli":
        m = (rng.random(n) < probs) & eligible & (probs > 0)
    elif cfg.mode == "top_fraction":
        scores = probs if entropy is None else np.asarray(entropy, dtype=np.float64)
        m[_ranked_by_entropy(candidates, scores)[:quota]] = True
    elif cfg.mode == "random_fraction":
        m[rng.choice(candidates, size=min(quota, len(candidates)), replace=False)] = True
    elif cfg.mode == "all":
        m = eligible.copy()
    elif cfg.mode != "none":
        raise ValueError(f"unknown selection mode {cfg.mode!r}")

    if not m.any() and cfg.mode != "none":
        logger.warning("Selection mode %s picked no nodes out of %d candidates", cfg.mode, len(candidates))
    return InterventionMask(m, probs)


def select_nodes(proba, masks, cfg, seed, stream=()):
    """
    Entropy → gate → mask over the configured candidate set.

    Returns:
    - (InterventionMask, entropy vector, threshold used)
    """
    entropy = predictive_entropy(proba)
    candidates = candidate_indices(masks, cfg)
    threshold = resolve_threshold(entropy, candidates, cfg)
    probs = gate_probabilities(entropy, cfg, threshold)
    mask = sample_mask(probs, cfg, seed, candidates, entropy=entropy, stream=stream)
    logger.debug("selected %d/%d candidates (threshold %.4f, mode %s)",
                 mask.size, len(candidates), threshold, cfg.mode)
    return mask, entropy, threshold


def write_mask(mask, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for index in mask.indices:
            f.write(f"{index}\n")
    return path


def read_mask(path, n):
    m = np.zeros(n, dtype=bool)
    with open(path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            token = line.strip()
            if not token:
                continue
            try:
                index = int(token)
            except ValueError:
                raise DatasetFormatError(path, line_no, f"expected a node index, got {token!r}")
            if not 0 <= index < n:
                raise DatasetFormatError(path, line_no, f"node index {index} out of range [0, {n})")
            m[index] = True
    return InterventionMask(m, m.astype(np.float64))
