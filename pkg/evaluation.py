"""
Bidirectional retrieval metrics over an image x caption score matrix where
each image owns several captions: Recall@K, RSUM and median rank, plus the
report class used to persist them.
"""

import csv
import datetime
import json
import logging
import math
import os
from dataclasses import dataclass

import numpy as np

from dataset import DataError
from numerics import as_mat

RECALL_KS = (1, 5, 10)
REPORT_FIELDS = ("i2t_r1", "i2t_r5", "i2t_r10", "t2i_r1", "t2i_r5", "t2i_r10")


def _values(A):
    """Raw matrix of a ScoreMatrix or anything array-like."""
    return as_mat(getattr(A, "values", A), "score matrix")


def _check_mapping(caption_to_image, n_images, n_texts, require_captions=True):
    c2i = np.asarray(caption_to_image)
    if c2i.ndim != 1 or c2i.size != n_texts:
        raise DataError(f"caption_to_image has {c2i.size} entries for {n_texts} score columns")
    if c2i.size and (c2i.min() < 0 or c2i.max() >= n_images):
        bad = int(np.flatnonzero((c2i < 0) | (c2i >= n_images))[0])
        raise DataError(f"Caption {bad} maps to image {int(c2i[bad])}, outside [0, {n_images})")
    c2i = c2i.astype(np.int64)
    if require_captions:
        counts = np.bincount(c2i, minlength=n_images)
        if np.any(counts == 0):
            raise DataError(f"Image {int(np.flatnonzero(counts == 0)[0])} has no caption")
    return c2i


def _rank_positions(scores):
    """0-based position of every column in its row's descending ranking (ties: lower index first)."""
    order = np.argsort(-scores, axis=1, kind="stable")
    return np.argsort(order, axis=1, kind="stable")


def i2t_ranks(A, caption_to_image):
    """Best 0-based rank among each image's own captions."""
    scores = _values(A)
    c2i = _check_mapping(caption_to_image, *scores.shape)
    positions = _rank_positions(scores)
    best = np.full(scores.shape[0], scores.shape[1], dtype=np.int64)
    np.minimum.at(best, c2i, positions[c2i, np.arange(c2i.size)])
    return best


def t2i_ranks(A, caption_to_image):
    """0-based rank of each caption's ground-truth image among all images."""
    scores = _values(A)
    c2i = _check_mapping(caption_to_image, *scores.shape, require_captions=False)
    positions = _rank_positions(scores.T)
    return positions[np.arange(c2i.size), c2i]


def _recall(ranks, k):
    if k < 1:
        raise DataError(f"Recall cutoff must be >= 1, got {k}")
    if ranks.size == 0:
        raise DataError("No queries to evaluate")
    return 100.0 * int(np.count_nonzero(ranks < k)) / ranks.size


def recall_i2t(A, caption_to_image, k):
    """Percentage of images with at least one own caption in the top k."""
    return _recall(i2t_ranks(A, caption_to_image), k)


def recall_t2i(A, caption_to_image, k):
    """Percentage of captions whose image is in the top k."""
    return _recall(t2i_ranks(A, caption_to_image), k)


def median_rank(ranks):
    """1-based median rank; an even count takes the floor of the middle average."""
    return math.floor(float(np.median(ranks))) + 1


@dataclass
class RetrievalReport:
    """Recall percentages for both directions, their sum and median ranks."""
    i2t_r1: float
    i2t_r5: float
    i2t_r10: float
    t2i_r1: float
    t2i_r5: float
    t2i_r10: float
    i2t_medr: float
    t2i_medr: float
    label: str = ""

    @property
    def rsum(self):
        total = 0.0
        for name in REPORT_FIELDS:
            total += getattr(self, name)
        return total

    def generate_report(self):
        """Report in its JSON form."""
        return {
            "i2t": {"r1": self.i2t_r1, "r5": self.i2t_r5, "r10": self.i2t_r10, "medr": self.i2t_medr},
            "t2i": {"r1": self.t2i_r1, "r5": self.t2i_r5, "r10": self.t2i_r10, "medr": self.t2i_medr},
            "rsum": self.rsum,
        }

    @classmethod
    def average(cls, reports, label=""):
        """Field-wise mean of several reports (fold or seed averaging)."""
        if not reports:
            raise DataError("Cannot average zero reports")
        values = {name: math.fsum(getattr(r, name) for r in reports) / len(reports)
                  for name in REPORT_FIELDS + ("i2t_medr", "t2i_medr")}
        return cls(label=label, **values)

    def summary(self):
        return (f"i2t R@1 {self.i2t_r1:.1f} R@5 {self.i2t_r5:.1f} R@10 {self.i2t_r10:.1f} | "
                f"t2i R@1 {self.t2i_r1:.1f} R@5 {self.t2i_r5:.1f} R@10 {self.t2i_r10:.1f} | rsum {self.rsum:.1f}")

    def save_json_report(self, filename="report.json"):
        """Write the report JSON. Contains no timestamps so reruns are byte-identical."""
        with open(filename, "w", encoding="utf-8") as f:
            json.dump(self.generate_report(), f, indent=2)
        logging.info(f"Retrieval report saved to {filename}")

    def save_csv_report(self, filename="results.csv"):
        """Append one timestamped row to a results CSV, writing headers if the file is new."""
        file_exists = os.path.exists(filename)
        headers = ["timestamp", "label"] + list(REPORT_FIELDS) + ["rsum", "i2t_medr", "t2i_medr"]
        try:
            with open(filename, "a", newline="", encoding="utf-8") as csvfile:
                writer = csv.writer(csvfile)
                if not file_exists:
                    writer.writerow(headers)
                row = [datetime.datetime.now().strftime("%Y-%m-%d %H:%M:%S"), self.label]
                row += [round(getattr(self, name), 2) for name in REPORT_FIELDS]
                row += [round(self.rsum, 2), self.i2t_medr, self.t2i_medr]
                writer.writerow(row)
            logging.info(f"Results row appended to {filename}")
        except OSError as e:
            logging.error(f"Failed to save CSV report: {str(e)}")


def report(A, caption_to_image, label=""):
    """All six recalls, rsum and median ranks. Cutoffs above the candidate count are clamped."""
    scores = _values(A)
    best_i2t = i2t_ranks(scores, caption_to_image)
    best_t2i = t2i_ranks(scores, caption_to_image)
    n_images, n_texts = scores.shape
    i2t = [_recall(best_i2t, min(k, n_texts)) for k in RECALL_KS]
    t2i = [_recall(best_t2i, min(k, n_images)) for k in RECALL_KS]
    return RetrievalReport(*i2t, *t2i, median_rank(best_i2t), median_rank(best_t2i), label)


def per_view_reports(S, caption_to_image):
    """One report per view slice of a SimilarityTensor."""
    return [report(S.scores[k], caption_to_image, label=f"view {k}") for k in range(S.views)]


def make_folds(n_images, n_folds):
    """Split image indices into n_folds contiguous, near-equal folds."""
    if n_folds < 1 or n_folds > n_images:
        raise DataError(f"Cannot split {n_images} images into {n_folds} folds")
    return [np.asarray(f, dtype=np.int64) for f in np.array_split(np.arange(n_images), n_folds)]


def fold_report(A, caption_to_image, folds, label=""):
    """Average of reports computed on each image fold and its captions."""
    scores = _values(A)
    c2i = _check_mapping(caption_to_image, *scores.shape)
    reports = []
    for n, fold in enumerate(folds):
        fold = np.asarray(fold, dtype=np.int64)
        local = np.full(scores.shape[0], -1, dtype=np.int64)
        local[fold] = np.arange(fold.size)
        captions = np.flatnonzero(local[c2i] >= 0)
        sub = scores[np.ix_(fold, captions)]
        reports.append(report(sub, local[c2i[captions]], label=f"fold {n}"))
        logging.debug(f"Fold {n}: {reports[-1].summary()}")
    return RetrievalReport.average(reports, label)
