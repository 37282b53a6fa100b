"""
Inference-time matching: split encoding, view-score aggregation, the
temperature-scaled row/column softmax normalization of the score matrix and
the validation search over its temperatures.
"""

import csv
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass

import numpy as np

from dataset import DataError
from evaluation import report
from loss import similarity_tensor
from model import encode_image, encode_text
from numerics import NumericError, as_mat, softmax_axis

ORDERS = ("none", "row-then-col", "col-then-row", "row-only", "col-only")
DEFAULT_GRID = (0.01, 0.02, 0.05, 0.1, 0.2, 0.5, 1.0, 2.0, 5.0, 10.0, 20.0, 50.0, 100.0, 170.0, 200.0)

# Which temperatures each order actually uses
_USES = {
    "none": (False, False),
    "row-then-col": (True, True),
    "col-then-row": (True, True),
    "row-only": (True, False),
    "col-only": (False, True),
}


@dataclass
class NormalizationConfig:
    tau_col: float = 20.0
    tau_row: float = 170.0
    order: str = "row-then-col"

    def validate(self):
        if not (self.tau_col > 0 and self.tau_row > 0):
            raise NumericError(f"Temperatures must be positive, got tau_row={self.tau_row}, tau_col={self.tau_col}")
        if self.order not in ORDERS:
            raise NumericError(f"Unknown order '{self.order}', expected one of {', '.join(ORDERS)}")
        return self

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        unknown = set(data) - {"tau_col", "tau_row", "order"}
        if unknown:
            raise NumericError(f"Unknown normalization keys: {', '.join(sorted(unknown))}")
        return cls(**data).validate()


@dataclass
class ScoreMatrix:
    """n_images x n_texts aggregated similarities; normalized once any softmax step ran."""
    values: np.ndarray
    normalized: bool = False

    @property
    def shape(self):
        return self.values.shape


def aggregate_scores(S):
    """Mean over views: A[i][j] = (1/K) sum_k scores[k][i][j]."""
    if S.views < 1:
        raise NumericError("Similarity tensor has no views")
    return ScoreMatrix(np.mean(S.scores, axis=0))


def normalize_matrix(A, cfg):
    """Apply column (tau_col) and/or row (tau_row) softmax steps in cfg.order."""
    cfg.validate()
    values = as_mat(A.values, "score matrix")
    if values.shape[0] == 0 or values.shape[1] == 0:
        raise NumericError(f"Cannot normalize a {values.shape[0]}x{values.shape[1]} matrix")
    steps = {
        "none": (),
        "row-then-col": ("row", "col"),
        "col-then-row": ("col", "row"),
        "row-only": ("row",),
        "col-only": ("col",),
    }[cfg.order]
    for step in steps:
        if step == "row":
            values = softmax_axis(values, cfg.tau_row, axis=1)
        else:
            values = softmax_axis(values, cfg.tau_col, axis=0)
    return ScoreMatrix(values, A.normalized or bool(steps))


def grid_points(grid, orders=ORDERS):
    """Every (tau_row, tau_col, order) worth evaluating.

    An order that ignores a temperature is only paired with the smallest
    grid value for it, so each distinct normalization appears once.
    """
    grid = sorted(float(t) for t in grid)
    if not grid:
        raise NumericError("Temperature grid is empty")
    if grid[0] <= 0:
        raise NumericError(f"Temperatures must be positive, got {grid[0]}")
    points = []
    for order in orders:
        if order not in ORDERS:
            raise NumericError(f"Unknown order '{order}'")
        uses_row, uses_col = _USES[order]
        for tau_row in (grid if uses_row else grid[:1]):
            for tau_col in (grid if uses_col else grid[:1]):
                points.append(NormalizationConfig(tau_col=tau_col, tau_row=tau_row, order=order))
    return points


def grid_search_temperatures(A_val, caption_to_image, grid=DEFAULT_GRID, orders=ORDERS, threads=1):
    """Exhaustive RSUM search over temperatures and orders on validation scores.

    Ties go to the smaller tau_row, then the smaller tau_col, then the earlier
    order in `orders`. The result does not depend on `threads`.

    Returns:
        Tuple of (best NormalizationConfig, its RSUM)
    """
    orders = list(orders)
    points = grid_points(grid, orders)

    def evaluate(cfg):
        return report(normalize_matrix(A_val, cfg), caption_to_image).rsum

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            rsums = list(pool.map(evaluate, points))
    else:
        rsums = [evaluate(cfg) for cfg in points]

    best = min(range(len(points)),
               key=lambda n: (-rsums[n], points[n].tau_row, points[n].tau_col, orders.index(points[n].order)))
    logging.info(f"Grid search over {len(points)} settings: best {points[best].order} "
                 f"tau_row={points[best].tau_row} tau_col={points[best].tau_col} rsum {rsums[best]:.2f}")
    return points[best], rsums[best]


def encode_split(dataset, split, params, model_cfg):
    """Embed every image and caption of a split.

    Returns:
        Tuple of (n_images x K x d_emb views, n_texts x d_emb texts, local caption_to_image)
    """
    image_ids, caption_ids, c2i = dataset.split_view(split)
    if image_ids.size == 0:
        raise DataError(f"Split '{split}' is empty")
    views = np.stack([encode_image(dataset.images[int(i)], params, model_cfg) for i in image_ids])
    texts = np.stack([encode_text(dataset.captions[int(c)], params, model_cfg) for c in caption_ids])
    return views, texts, c2i


def score_split(dataset, split, params, model_cfg):
    """Per-view similarities of a split. Returns (SimilarityTensor, local caption_to_image)."""
    views, texts, c2i = encode_split(dataset, split, params, model_cfg)
    return similarity_tensor(views, texts), c2i


def validation_rsum(dataset, params, model_cfg, split="val"):
    """RSUM of raw aggregated similarities, the model-selection criterion."""
    S, c2i = score_split(dataset, split, params, model_cfg)
    return report(aggregate_scores(S), c2i).rsum


def save_score_csv(path, A):
    """One row per image, one column per caption, shortest round-trip float text."""
    values = as_mat(A.values, "score matrix")
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        for row in values:
            writer.writerow([repr(float(x)) for x in row])
    logging.info(f"Score matrix {values.shape[0]}x{values.shape[1]} saved to {path}")


def load_score_csv(path):
    with open(path, "r", newline="", encoding="utf-8") as f:
        rows = [row for row in csv.reader(f) if row]
    if not rows:
        raise DataError(f"{path}: empty score matrix")
    width = len(rows[0])
    for n, row in enumerate(rows):
        if len(row) != width:
            raise DataError(f"{path}: row {n} has {len(row)} columns, expected {width}")
    try:
        values = np.array([[float(x) for x in row] for row in rows], dtype=np.float64)
    except ValueError as e:
        raise DataError(f"{path}: {e}")
    if not np.all(np.isfinite(values)):
        raise DataError(f"{path}: score matrix contains NaN or Inf")
    return ScoreMatrix(values)

