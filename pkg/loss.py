"""
Per-view similarity tensors, variance-based uncertainty weights and the
weighted bidirectional objectives.

Every loss returns its value together with what the backward pass needs;
loss_grad_scores() turns that into d loss / d scores.
"""

import math
from dataclasses import dataclass

import numpy as np

from numerics import NumericError, logsumexp, softmax_axis, variance_rows

WEIGHT_STATISTICS = ("std", "variance")
LOSS_KINDS = ("triplet", "global-nll")


@dataclass
class SimilarityTensor:
    """scores[k, i, j] = s(view k of image i, text j). Rows are images, columns texts."""
    scores: np.ndarray

    @property
    def views(self):
        return self.scores.shape[0]

    @property
    def n_images(self):
        return self.scores.shape[1]

    @property
    def n_texts(self):
        return self.scores.shape[2]


@dataclass
class UncertaintyWeights:
    """B x K loss weights per anchor image (img_to_txt) and anchor text (txt_to_img)."""
    img_to_txt: np.ndarray
    txt_to_img: np.ndarray

    @classmethod
    def ones(cls, batch_size, views):
        return cls(np.ones((batch_size, views)), np.ones((batch_size, views)))

    def scaled(self, factor):
        return UncertaintyWeights(self.img_to_txt * factor, self.txt_to_img * factor)


@dataclass
class TripletConfig:
    margin: float = 0.2
    weighting: bool = True

    def validate(self):
        if self.margin < 0:
            raise NumericError(f"Margin must be >= 0, got {self.margin}")
        return self


@dataclass
class TripletActiveSet:
    """Hardest-negative indices and hinge activity per view, fixed for backward."""
    hard_text: np.ndarray
    hard_image: np.ndarray
    active_i2t: np.ndarray
    active_t2i: np.ndarray


def _square_batch(S):
    if S.n_images != S.n_texts:
        raise NumericError(f"Batch similarity must be square, got {S.n_images}x{S.n_texts}")
    if S.n_images < 2:
        raise NumericError(f"Batch needs at least 2 pairs, got {S.n_images}")
    return S.n_images


def _check_weights(W, batch_size, views):
    for name, w in (("img_to_txt", W.img_to_txt), ("txt_to_img", W.txt_to_img)):
        if w.shape != (batch_size, views):
            raise NumericError(f"Weights {name} have shape {w.shape}, expected ({batch_size}, {views})")


def similarity_tensor(view_embs, text_embs):
    """Dot products of unit-norm view embeddings (B x K x d) with text embeddings (T x d)."""
    view_embs = np.asarray(view_embs, dtype=np.float64)
    text_embs = np.asarray(text_embs, dtype=np.float64)
    if view_embs.ndim != 3 or text_embs.ndim != 2 or view_embs.shape[2] != text_embs.shape[1]:
        raise NumericError(f"Shape mismatch: views {view_embs.shape} vs texts {text_embs.shape}")
    return SimilarityTensor(np.einsum("ikd,jd->kij", view_embs, text_embs))


def _negatives(scores):
    """Off-diagonal entries: (K, B, B-1) per row and per column."""
    views, size, _ = scores.shape
    off = ~np.eye(size, dtype=bool)
    rows = scores[:, off].reshape(views, size, size - 1)
    cols = np.transpose(scores, (0, 2, 1))[:, off].reshape(views, size, size - 1)
    return rows, cols


def uncertainty_weights(S, statistic="std"):
    """Per-anchor view weights from the spread of mismatched-pair similarities.

    For anchor i and view k the spread is the (population) variance of the
    negatives in row i (image anchor) or column i (text anchor); its square root
    by default. Per anchor the spreads go through a softmax over views and each
    weight is the reciprocal of its probability. The weights carry no gradient.
    """
    size = _square_batch(S)
    if statistic not in WEIGHT_STATISTICS:
        raise NumericError(f"Unknown weight statistic '{statistic}'")
    rows, cols = _negatives(S.scores)

    def reciprocal_softmax(negatives):
        spread = variance_rows(negatives)
        if statistic == "std":
            spread = np.sqrt(spread)
        # spread is (K, B); softmax over views for each anchor
        return 1.0 / softmax_axis(spread.T, 1.0, axis=1)

    weights = UncertaintyWeights(reciprocal_softmax(rows), reciprocal_softmax(cols))
    _check_weights(weights, size, S.views)
    return weights


def weight_summary(W):
    """Mean weight per view for each direction."""
    return {
        "img_to_txt": [float(x) for x in W.img_to_txt.mean(axis=0)],
        "txt_to_img": [float(x) for x in W.txt_to_img.mean(axis=0)],
    }


def weighted_triplet_loss(S, W, cfg, active=None):
    """Weighted hardest-negative triplet loss over both directions and all views.

    Args:
        S: Square SimilarityTensor; pair i sits on the diagonal
        W: UncertaintyWeights (ignored when cfg.weighting is off)
        cfg: TripletConfig
        active: Optional TripletActiveSet to reuse instead of recomputing
            the hardest negatives and hinge activity

    Returns:
        Tuple of (loss divided by B, TripletActiveSet)
    """
    cfg.validate()
    size = _square_batch(S)
    views = S.views
    if not cfg.weighting:
        W = UncertaintyWeights.ones(size, views)
    _check_weights(W, size, views)

    idx = np.arange(size)
    if active is None:
        masked = S.scores.copy()
        masked[:, idx, idx] = -np.inf
        # argmax takes the lowest index on ties
        hard_text = np.argmax(masked, axis=2)
        hard_image = np.argmax(masked, axis=1)
    else:
        hard_text, hard_image = active.hard_text, active.hard_image

    terms = []
    hinge_i2t = np.empty((views, size))
    hinge_t2i = np.empty((views, size))
    for k in range(views):
        sc = S.scores[k]
        positive = sc[idx, idx]
        hinge_i2t[k] = cfg.margin - positive + sc[idx, hard_text[k]]
        hinge_t2i[k] = cfg.margin - positive + sc[hard_image[k], idx]

    if active is None:
        active = TripletActiveSet(hard_text, hard_image, hinge_i2t > 0, hinge_t2i > 0)

    for k in range(views):
        terms.extend(W.img_to_txt[:, k] * np.where(active.active_i2t[k], hinge_i2t[k], 0.0))
        terms.extend(W.txt_to_img[:, k] * np.where(active.active_t2i[k], hinge_t2i[k], 0.0))
    return math.fsum(terms) / size, active


def triplet_grad_scores(S, W, cfg, active):
    """d loss / d scores for weighted_triplet_loss with a fixed active set."""
    size = _square_batch(S)
    if not cfg.weighting:
        W = UncertaintyWeights.ones(size, S.views)
    grad = np.zeros_like(S.scores)
    for k in range(S.views):
        for i in range(size):
            if active.active_i2t[k, i]:
                w = W.img_to_txt[i, k] / size
                grad[k, i, i] -= w
                grad[k, i, active.hard_text[k, i]] += w
            if active.active_t2i[k, i]:
                w = W.txt_to_img[i, k] / size
                grad[k, i, i] -= w
                grad[k, active.hard_image[k, i], i] += w
    return grad


def global_nll_loss(S, W):
    """Weighted negative log-likelihood with a whole-matrix partition function.

    For view k, anchor i: -log(exp(s_kii) / sum_{i',j'} exp(s_ki'j')), weighted
    by the anchor's view weight, in both directions, divided by B. The
    log-partition correction of the temperature-scaled likelihood is omitted.
    """
    size = _square_batch(S)
    _check_weights(W, size, S.views)
    idx = np.arange(size)
    terms = []
    for k in range(S.views):
        log_z = logsumexp(S.scores[k].ravel())
        nll = log_z - S.scores[k][idx, idx]
        terms.extend(W.img_to_txt[:, k] * nll)
        terms.extend(W.txt_to_img[:, k] * nll)
    return math.fsum(terms) / size


def global_nll_grad_scores(S, W):
    """d loss / d scores for global_nll_loss (weights held constant)."""
    size = _square_batch(S)
    idx = np.arange(size)
    grad = np.zeros_like(S.scores)
    for k in range(S.views):
        coef = (W.img_to_txt[:, k] + W.txt_to_img[:, k]) / size
        probs = softmax_axis(S.scores[k].ravel(), 1.0, axis=0).reshape(size, size)
        grad[k] = np.sum(coef) * probs
        grad[k][idx, idx] -= coef
    return grad


def lse_hinge_equivalence_check(scores_row, alpha, positive=0):
    """Hard-max hinge and its LogSumExp relaxation for one anchor's row.

    Returns:
        Tuple of ([alpha - s_pos + max_neg]+, [alpha - s_pos + LSE(negs)]+)
    """
    row = np.asarray(scores_row, dtype=np.float64)
    if row.ndim != 1 or row.size < 2:
        raise NumericError(f"Need a positive and at least one negative, got shape {row.shape}")
    negatives = np.delete(row, positive)
    triplet = max(alpha - row[positive] + float(np.max(negatives)), 0.0)
    lse_form = max(alpha - row[positive] + logsumexp(negatives), 0.0)
    return triplet, lse_form
