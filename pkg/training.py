"""
Hand-derived gradients for the encoder + similarity + weighted loss pipeline,
finite-difference verification, Adam/SGD updates, the learning-rate schedule
and the deterministic training loop.
"""

import json
import logging
import math
import os
import time
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
from tqdm import tqdm

from dataset import Batch, DataError, batch_iter
from loss import (
    LOSS_KINDS,
    WEIGHT_STATISTICS,
    TripletConfig,
    UncertaintyWeights,
    global_nll_grad_scores,
    global_nll_loss,
    similarity_tensor,
    triplet_grad_scores,
    uncertainty_weights,
    weight_summary,
    weighted_triplet_loss,
)
from matching import validation_rsum
from model import (
    Gradients,
    ModelConfig,
    POOLING_KINDS,
    encode_image_backward,
    encode_image_forward,
    encode_text_backward,
    encode_text_forward,
    init_params,
    save_checkpoint,
)
from numerics import NumericError, check_finite, make_rng

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
OPTIMIZERS = ("adam", "sgd")


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 128
    lr0: float = 5e-4
    # lr is multiplied by lr_decay every decay_every epochs
    lr_decay: float = 0.9
    decay_every: int = 10
    loss: str = "triplet"
    weighting: bool = True
    weight_statistic: str = "std"
    margin: float = 0.2
    optimizer: str = "adam"
    # Global L2 gradient clip; 0 disables
    clip_norm: float = 2.0
    seed: int = 0
    show_progress: bool = False

    def validate(self):
        if self.epochs < 0:
            raise NumericError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 2:
            raise NumericError(f"batch_size must be >= 2, got {self.batch_size}")
        if not self.lr0 > 0:
            raise NumericError(f"lr0 must be positive, got {self.lr0}")
        if not 0 < self.lr_decay <= 1 or self.decay_every < 1:
            raise NumericError(f"Invalid schedule: lr_decay={self.lr_decay}, decay_every={self.decay_every}")
        if self.loss not in LOSS_KINDS:
            raise NumericError(f"Unknown loss '{self.loss}', expected one of {', '.join(LOSS_KINDS)}")
        if self.weight_statistic not in WEIGHT_STATISTICS:
            raise NumericError(f"Unknown weight statistic '{self.weight_statistic}'")
        if self.optimizer not in OPTIMIZERS:
            raise NumericError(f"Unknown optimizer '{self.optimizer}'")
        if self.clip_norm < 0:
            raise NumericError(f"clip_norm must be >= 0, got {self.clip_norm}")
        TripletConfig(self.margin, self.weighting).validate()
        return self

    def triplet_config(self):
        return TripletConfig(margin=self.margin, weighting=self.weighting)


@dataclass
class ForwardState:
    """Everything fixed at one evaluation point: encoder caches, weights, active set."""
    image_caches: list
    text_caches: list
    similarity: object
    weights: UncertaintyWeights
    triplet: Optional[object] = None


def format_time(seconds):
    """Convert seconds to human readable format."""
    if seconds < 60:
        return f"{seconds:.0f}s"
    elif seconds < 3600:
        return f"{seconds // 60:.0f}m {seconds % 60:.0f}s"
    hours = seconds // 3600
    minutes = (seconds % 3600) // 60
    return f"{hours:.0f}h {minutes:.0f}m"


def _forward(batch, params, model_cfg, train_cfg, frozen=None):
    """Loss at params. With frozen, every discrete choice is taken from it."""
    if len(batch) < 2:
        raise NumericError(f"Batch needs at least 2 pairs, got {len(batch)}")
    image_caches, text_caches = [], []
    for b, regions in enumerate(batch.images):
        _, cache = encode_image_forward(regions, params, model_cfg, frozen.image_caches[b] if frozen else None)
        image_caches.append(cache)
    for b, tokens in enumerate(batch.captions):
        _, cache = encode_text_forward(tokens, params, model_cfg, frozen.text_caches[b] if frozen else None)
        text_caches.append(cache)

    S = similarity_tensor(np.stack([c["emb"] for c in image_caches]),
                          np.stack([c["emb"] for c in text_caches]))
    if frozen is not None:
        W = frozen.weights
    elif train_cfg.weighting:
        W = uncertainty_weights(S, train_cfg.weight_statistic)
    else:
        W = UncertaintyWeights.ones(len(batch), model_cfg.K)

    active = None
    if train_cfg.loss == "triplet":
        loss, active = weighted_triplet_loss(S, W, train_cfg.triplet_config(), frozen.triplet if frozen else None)
    else:
        loss = global_nll_loss(S, W)
    return loss, ForwardState(image_caches, text_caches, S, W, active)


def _forward_backward(batch, params, model_cfg, train_cfg):
    loss, state = _forward(batch, params, model_cfg, train_cfg)
    S, W = state.similarity, state.weights
    if train_cfg.loss == "triplet":
        grad_scores = triplet_grad_scores(S, W, train_cfg.triplet_config(), state.triplet)
    else:
        grad_scores = global_nll_grad_scores(S, W)

    view_embs = np.stack([c["emb"] for c in state.image_caches])
    text_embs = np.stack([c["emb"] for c in state.text_caches])
    grad_views = np.einsum("kij,jd->ikd", grad_scores, text_embs)
    grad_texts = np.einsum("kij,ikd->jd", grad_scores, view_embs)

    # Reduction runs in ascending sample order
    grads = Gradients.zeros(model_cfg)
    for b, cache in enumerate(state.image_caches):
        encode_image_backward(grad_views[b], cache, params, model_cfg, grads)
    for b, cache in enumerate(state.text_caches):
        encode_text_backward(grad_texts[b], cache, params, model_cfg, grads)
    for tensor in grads.tensors():
        check_finite(tensor, "gradient")
    return loss, grads, state


def forward_backward(batch, params, model_cfg, train_cfg):
    """Loss on one paired batch and its exact gradient.

    Uncertainty weights and hardest-negative selections are constants of the
    forward pass. ReLU and hinge subgradients are 0 at 0; max pooling routes
    the gradient to the lowest-index maximizer.

    Returns:
        Tuple of (loss, Gradients)
    """
    loss, grads, _ = _forward_backward(batch, params, model_cfg, train_cfg)
    return loss, grads


def finite_diff_gradient(batch, params, model_cfg, train_cfg, param_index, h=1e-5, objective=None):
    """Central difference of the loss along one flattened parameter.

    The active set (ReLU masks, pooling selections, weights, hardest negatives,
    hinge activity) is frozen at the unperturbed point, so both evaluations lie
    on the same smooth branch as the analytic gradient.

    Args:
        objective: Optional callable ModelParams -> float replacing the
            pipeline loss (used to check the differencing itself)
    """
    if not h > 0:
        raise NumericError(f"Step h must be positive, got {h}")
    theta = params.flatten()
    if not 0 <= param_index < theta.size:
        raise NumericError(f"Parameter index {param_index} out of range [0, {theta.size})")

    if objective is None:
        _, frozen = _forward(batch, params, model_cfg, train_cfg)

        def objective(p):
            return _forward(batch, p, model_cfg, train_cfg, frozen)[0]

    plus, minus = theta.copy(), theta.copy()
    plus[param_index] += h
    minus[param_index] -= h
    return (objective(params.with_vector(plus)) - objective(params.with_vector(minus))) / (2 * h)


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, size):
        return cls(np.zeros(size), np.zeros(size), 0)


def adam_step(params, grads, state, lr):
    """One bias-corrected Adam update. Returns new (params, state); inputs are untouched."""
    theta = params.flatten()
    g = grads.flatten()
    if g.shape != theta.shape or state.m.shape != theta.shape or state.v.shape != theta.shape:
        raise NumericError(f"Shape mismatch: params {theta.shape}, grads {g.shape}, "
                           f"state {state.m.shape}/{state.v.shape}")
    t = state.t + 1
    m = ADAM_BETA1 * state.m + (1 - ADAM_BETA1) * g
    v = ADAM_BETA2 * state.v + (1 - ADAM_BETA2) * g * g
    m_hat = m / (1 - ADAM_BETA1 ** t)
    v_hat = v / (1 - ADAM_BETA2 ** t)
    theta = theta - lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
    return params.with_vector(theta), AdamState(m, v, t)


def sgd_step(params, grads, lr):
    theta = params.flatten()
    g = grads.flatten()
    if g.shape != theta.shape:
        raise NumericError(f"Shape mismatch: params {theta.shape}, grads {g.shape}")
    return params.with_vector(theta - lr * g)


def clip_gradients(grads, max_norm):
    """Rescale grads in place so their global L2 norm is at most max_norm."""
    norm = grads.global_norm()
    if max_norm > 0 and norm > max_norm:
        grads.scale(max_norm / norm)
    return grads, norm


def lr_at(epoch, cfg):
    """lr0 * lr_decay ** floor(epoch / decay_every)."""
    if epoch < 0:
        raise NumericError(f"epoch must be >= 0, got {epoch}")
    return cfg.lr0 * cfg.lr_decay ** (epoch // cfg.decay_every)


class TrainingLog:
    """Per-epoch records, mirrored to log.jsonl when a run directory is set."""

    def __init__(self, path=None):
        self.records = []
        self.path = path
        if path:
            # A rerun in the same directory starts a fresh log
            with open(path, "w", encoding="utf-8"):
                pass

    def append(self, epoch, lr, train_loss, val_rsum):
        record = {"epoch": epoch, "lr": lr, "train_loss": train_loss, "val_rsum": val_rsum}
        self.records.append(record)
        if self.path:
            with open(self.path, "a", encoding="utf-8") as f:
                f.write(json.dumps(record) + "\n")
        return record


def train(dataset, model_cfg, train_cfg, run_dir=None):
    """Train from init_params(model_cfg, train_cfg.seed).

    Every epoch runs forward_backward -> clip -> optimizer step over the train
    split, then scores the validation split with raw aggregated similarities.
    Checkpoints are written per epoch when run_dir is given.

    Returns:
        Tuple of (params with the best validation RSUM, list of epoch records)
    """
    model_cfg.validate()
    train_cfg.validate()
    if dataset.region_dim != model_cfg.d1 or dataset.token_dim != model_cfg.d2:
        raise DataError(f"Feature dims {dataset.region_dim}/{dataset.token_dim} do not match "
                        f"model d1={model_cfg.d1}, d2={model_cfg.d2}")

    params = init_params(model_cfg, train_cfg.seed)
    if run_dir:
        os.makedirs(run_dir, exist_ok=True)
    log = TrainingLog(os.path.join(run_dir, "log.jsonl") if run_dir else None)
    if train_cfg.epochs == 0:
        logging.info("No epochs requested; returning initial parameters")
        return params, log.records
    if len(dataset.splits.get("train", ())) < train_cfg.batch_size:
        raise DataError(f"Train split has {len(dataset.splits.get('train', ()))} images, "
                        f"fewer than one batch of {train_cfg.batch_size}")

    state = AdamState.zeros(params.flatten().size)
    has_val = len(dataset.splits.get("val", ())) > 0
    best_params, best_rsum = params, -math.inf
    start = time.time()

    logging.info(f"Training {train_cfg.epochs} epochs: loss={train_cfg.loss}, weighting={train_cfg.weighting}, "
                 f"K={model_cfg.K}, pooling={model_cfg.pooling}, batch={train_cfg.batch_size}")
    for epoch in range(train_cfg.epochs):
        lr = lr_at(epoch, train_cfg)
        losses, view_weights = [], []
        batches = batch_iter(dataset, "train", train_cfg.batch_size, train_cfg.seed, epoch)
        if train_cfg.show_progress:
            batches = tqdm(batches, desc=f"epoch {epoch}", leave=False)

        for batch in batches:
            loss, grads, fwd = _forward_backward(batch, params, model_cfg, train_cfg)
            grads, norm = clip_gradients(grads, train_cfg.clip_norm)
            if train_cfg.optimizer == "adam":
                params, state = adam_step(params, grads, state, lr)
            else:
                params = sgd_step(params, grads, lr)
            losses.append(loss)
            view_weights.append(fwd.weights.img_to_txt.mean(axis=0))
            logging.debug(f"epoch {epoch} step {len(losses)}: loss {loss:.6f}, grad norm {norm:.4f}")

        train_loss = math.fsum(losses) / len(losses)
        val_rsum = validation_rsum(dataset, params, model_cfg) if has_val else None
        log.append(epoch, lr, train_loss, val_rsum)

        if train_cfg.weighting:
            summary = weight_summary(fwd.weights)
            logging.debug(f"epoch {epoch} mean view weights {np.mean(view_weights, axis=0).round(4).tolist()} "
                          f"(last batch {summary})")
        val_text = f"{val_rsum:.2f}" if val_rsum is not None else "n/a"
        logging.info(f"Epoch {epoch + 1}/{train_cfg.epochs}: lr {lr:.3e}, loss {train_loss:.5f}, "
                     f"val rsum {val_text}, elapsed {format_time(time.time() - start)}")

        if val_rsum is None or val_rsum > best_rsum:
            best_params, best_rsum = params, (val_rsum if val_rsum is not None else best_rsum)
            if run_dir:
                save_checkpoint(os.path.join(run_dir, "best.uamp"), best_params, model_cfg)
        if run_dir:
            save_checkpoint(os.path.join(run_dir, f"epoch_{epoch:03d}.uamp"), params, model_cfg)

    if has_val:
        logging.info(f"Best validation rsum {best_rsum:.2f}")
    return best_params, log.records


@dataclass
class GradCheckResult:
    loss: str
    pooling: str
    seed: int
    param_index: int
    analytic: float
    numeric: float
    rel_error: float
    passed: bool


@dataclass
class GradCheckReport:
    tolerance: float
    results: List[GradCheckResult] = field(default_factory=list)

    @property
    def max_rel_error(self):
        return max((r.rel_error for r in self.results), default=0.0)

    @property
    def failures(self):
        return [r for r in self.results if not r.passed]

    @property
    def passed(self):
        return not self.failures


def desk_batch(model_cfg, batch_size, rng):
    """A random paired batch with 2-5 regions per image and 2-6 tokens per caption."""
    images = [rng.standard_normal((int(rng.integers(2, 6)), model_cfg.d1)) for _ in range(batch_size)]
    captions = [rng.standard_normal((int(rng.integers(2, 7)), model_cfg.d2)) for _ in range(batch_size)]
    ids = np.arange(batch_size)
    return Batch(images, captions, ids, ids)


def relative_error(analytic, numeric):
    return abs(analytic - numeric) / max(1e-8, abs(analytic) + abs(numeric))


def run_gradient_check(seed=1, trials=20, n_seeds=5, tolerance=1e-4, h=1e-5, batch_size=4,
                       losses=LOSS_KINDS, poolings=POOLING_KINDS):
    """Compare analytic and central-difference gradients at desk dimensions.

    For each loss, pooling kind and seed, `trials` flattened parameters are
    sampled. A parameter passes when its relative error is below tolerance or
    both derivatives agree to 1e-9 in absolute terms (inactive paths).
    """
    report = GradCheckReport(tolerance)
    for loss_kind in losses:
        for pooling in poolings:
            for offset in range(n_seeds):
                run_seed = seed + offset
                rng = make_rng(run_seed, POOLING_KINDS.index(pooling), LOSS_KINDS.index(loss_kind))
                model_cfg = ModelConfig(d1=8, d2=6, d_emb=4, K=2, hidden=8, pooling=pooling, gpo_size=5)
                train_cfg = TrainConfig(loss=loss_kind, batch_size=batch_size, clip_norm=0.0, seed=run_seed)
                params = init_params(model_cfg, run_seed)
                params.b1 = 0.1 * rng.standard_normal(params.b1.shape)
                params.bt = 0.1 * rng.standard_normal(params.bt.shape)
                params.pool_img = rng.uniform(0.5, 1.5, params.pool_img.shape)
                params.pool_txt = rng.uniform(0.5, 1.5, params.pool_txt.shape)
                batch = desk_batch(model_cfg, batch_size, rng)

                _, grads = forward_backward(batch, params, model_cfg, train_cfg)
                analytic = grads.flatten()
                picks = rng.choice(analytic.size, size=min(trials, analytic.size), replace=False)
                for index in sorted(int(i) for i in picks):
                    numeric = finite_diff_gradient(batch, params, model_cfg, train_cfg, index, h)
                    error = relative_error(analytic[index], numeric)
                    passed = error < tolerance or abs(analytic[index] - numeric) < 1e-9
                    report.results.append(GradCheckResult(loss_kind, pooling, run_seed, index,
                                                          float(analytic[index]), float(numeric), error, passed))
            worst = max((r.rel_error for r in report.results if r.loss == loss_kind and r.pooling == pooling),
                        default=0.0)
            logging.info(f"Gradient check {loss_kind}/{pooling}: max relative error {worst:.3e}")

    if report.failures:
        for r in report.failures[:10]:
            logging.error(f"  {r.loss}/{r.pooling} seed {r.seed} param {r.param_index}: "
                          f"analytic {r.analytic:.6e}, numeric {r.numeric:.6e}, rel {r.rel_error:.3e}")
    return report
