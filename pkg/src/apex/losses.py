"""Segmentation loss (Dice + binary cross-entropy) and the low-frequency
feature contrastive loss with its batch pair-sampling scheme.

The contrastive denominator contains only other-domain embeddings; the
positive term is excluded, so individual anchor terms (and the loss) can be
negative. ``include_positive=True`` switches to the conventional form for
comparison runs.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import numerics as nm
from .errors import ConfigError, ShapeError
from .numerics import Node

DICE_SMOOTH = 1.0
CE_CLAMP = 1e-7


def _pair(pred, gt) -> tuple[Node, Node]:
    p, g = nm.as_node(pred), nm.as_node(gt)
    if p.shape != g.shape:
        raise ShapeError(f"prediction shape {p.shape} != mask shape {g.shape}")
    return p, g


def dice_loss(pred, gt) -> Node:
    """1 - (2 sum(p g) + eps) / (sum p + sum g + eps), eps = 1."""
    p, g = _pair(pred, gt)
    inter = nm.reduce_sum(nm.mul(p, g))
    total = nm.add(nm.reduce_sum(p), nm.reduce_sum(g))
    return nm.sub(1.0, nm.div(nm.add(nm.mul(2.0, inter), DICE_SMOOTH),
                              nm.add(total, DICE_SMOOTH)))


def ce_loss(pred, gt) -> Node:
    """Mean binary cross-entropy; predictions clamped to [1e-7, 1 - 1e-7]."""
    p, g = _pair(pred, gt)
    pc = nm.clip(p, CE_CLAMP, 1.0 - CE_CLAMP)
    pos = nm.mul(g, nm.log(pc))
    negt = nm.mul(nm.sub(1.0, g), nm.log(nm.sub(1.0, pc)))
    return nm.neg(nm.reduce_mean(nm.add(pos, negt)))


def seg_loss(pred, gt) -> Node:
    """Unweighted Dice + cross-entropy."""
    return nm.add(dice_loss(pred, gt), ce_loss(pred, gt))


# ---------------------------------------------------------------------------
# batch planning
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BatchPlan:
    """P domains x S samples; ``assignments`` maps each chosen domain to the
    sample indices drawn for it (filled by :func:`sample_batch`)."""

    domains_per_batch: int
    samples_per_domain: int
    assignments: tuple = ()  # ((domain_id, (idx, ...)), ...)

    def __post_init__(self) -> None:
        if self.samples_per_domain < 2:
            raise ConfigError("every anchor needs a same-domain positive: S >= 2")
        if self.domains_per_batch < 2:
            raise ConfigError("every anchor needs negatives: P >= 2")

    @property
    def batch_size(self) -> int:
        return self.domains_per_batch * self.samples_per_domain


def sample_batch(dataset: dict, plan: BatchPlan, seed) -> BatchPlan:
    """Draw P domains, then S distinct sample indices each, from ``dataset``
    (domain id -> sample count or sequence). Deterministic given the seed,
    which may be an int or a numpy Generator for streamed use.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    domains = sorted(dataset)
    if len(domains) < plan.domains_per_batch:
        raise ConfigError(f"need {plan.domains_per_batch} domains, dataset has {len(domains)}")
    chosen = [domains[i] for i in rng.choice(len(domains), size=plan.domains_per_batch,
                                             replace=False)]
    assignments = []
    for dom in chosen:
        pool = dataset[dom]
        count = pool if isinstance(pool, int) else len(pool)
        if count < plan.samples_per_domain:
            raise ConfigError(f"domain {dom!r} has {count} samples, need "
                              f"{plan.samples_per_domain}")
        idx = rng.choice(count, size=plan.samples_per_domain, replace=False)
        assignments.append((dom, tuple(int(i) for i in idx)))
    return replace(plan, assignments=tuple(assignments))


def sample_positives(labels, rng: np.random.Generator) -> np.ndarray:
    """Uniform same-domain positive index (!= anchor) for every anchor."""
    labels = list(labels)
    out = np.empty(len(labels), dtype=np.int64)
    for i, lab in enumerate(labels):
        pool = [j for j, other in enumerate(labels) if other == lab and j != i]
        if not pool:
            raise ConfigError(f"anchor {i} (domain {lab!r}) has no same-domain positive")
        out[i] = pool[rng.integers(len(pool))]
    return out


# ---------------------------------------------------------------------------
# low-frequency feature contrastive loss
# ---------------------------------------------------------------------------

def lfc_term(pos_sim, neg_sims, tau: float) -> Node:
    """One anchor's term: -log( exp(pos/tau) / sum_i exp(neg_i/tau) ).

    Evaluated as logsumexp(neg/tau) - pos/tau for stability.
    """
    if tau <= 0.0:
        raise ConfigError("temperature must be positive")
    pos = nm.div(nm.as_node(pos_sim), tau)
    negs = nm.div(nm.as_node(neg_sims), tau)
    peak = nm.stop_gradient(nm.reduce_max(negs))
    lse = nm.add(peak, nm.log(nm.reduce_sum(nm.exp(nm.sub(negs, peak)))))
    return nm.sub(lse, pos)


def lfc_loss(embeddings, labels, tau: float, positives=None, rng=None,
             include_positive: bool = False) -> Node:
    """Contrastive loss over a batch of auxiliary embeddings.

    ``embeddings`` is [B, D] (Node or array); ``labels`` gives each row's
    domain. Every anchor uses one same-domain positive (``positives`` or a
    uniform draw from ``rng``) against all other-domain embeddings; the mean
    over anchors is returned.
    """
    emb = nm.as_node(embeddings)
    labels = list(labels)
    n = len(labels)
    if emb.array.ndim != 2 or emb.shape[0] != n:
        raise ShapeError(f"embeddings {emb.shape} do not match {n} labels")
    counts = {}
    for lab in labels:
        counts[lab] = counts.get(lab, 0) + 1
    if len(counts) < 2:
        raise ConfigError("contrastive batch needs at least 2 domains")
    short = [lab for lab, c in counts.items() if c < 2]
    if short:
        raise ConfigError(f"domains with fewer than 2 samples in batch: {short}")
    if positives is None:
        if rng is None:
            raise ConfigError("need explicit positives or an rng to draw them")
        positives = sample_positives(labels, rng)
    positives = np.asarray(positives, dtype=np.int64)
    if positives.shape != (n,):
        raise ShapeError(f"positives shape {positives.shape} != ({n},)")
    for i, j in enumerate(positives):
        if j == i or labels[j] != labels[i]:
            raise ConfigError(f"positive {j} invalid for anchor {i}")

    sims = nm.cosine_rows(emb, emb)
    terms = None
    for i in range(n):
        neg_cols = [j for j in range(n) if labels[j] != labels[i]]
        pos = nm.getitem(sims, (i, int(positives[i])))
        cols = neg_cols + [int(positives[i])] if include_positive else neg_cols
        negs = nm.getitem(sims, (np.full(len(cols), i), np.array(cols)))
        term = lfc_term(pos, negs, tau)
        terms = term if terms is None else nm.add(terms, term)
    return nm.div(terms, float(n))


@dataclass(frozen=True)
class LossReport:
    """Per-step scalars; ``total`` is exactly seg + lfc."""

    seg: float
    dice_part: float
    ce_part: float
    lfc: float

    @property
    def total(self) -> float:
        return self.seg + self.lfc

    CSV_HEADER = "step,seg,dice_part,ce_part,lfc,total"

    def csv_row(self, step: int) -> str:
        return f"{step},{self.seg!r},{self.dice_part!r},{self.ce_part!r},{self.lfc!r},{self.total!r}"
