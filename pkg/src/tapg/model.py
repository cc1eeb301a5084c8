"""Boundary and proposal transformers, their losses, and the Adam training loop."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tt
from .labels import boundary_targets, proposal_targets
from .sampler import WindowGroup, enumerate_windows, extract_features, sampling_tensor
from .tensor import Module, Tensor
from .transformer import (EncoderDecoder, Linear, TransformerConfig, load_checkpoint,
                          save_checkpoint)

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


class MLPHead(Module):
    """Two-layer per-row MLP ending in two sigmoid outputs."""

    def __init__(self, d_model: int, rng: np.random.Generator):
        self.hidden = Linear(d_model, d_model, rng)
        self.out = Linear(d_model, 2, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return tt.sigmoid(self.out(tt.relu(self.hidden(x))))


class BoundaryTransformer(Module):
    """Per-snippet start/end probabilities from a (T, C) feature sequence."""

    def __init__(self, in_channels: int, cfg: TransformerConfig, rng: np.random.Generator,
                 seq_len: int | None = None):
        self.reduce = Linear(in_channels, cfg.d_model, rng)
        self.body = EncoderDecoder(cfg, rng, seq_len)
        self.head = MLPHead(cfg.d_model, rng)

    def __call__(self, F: Tensor, rng=None) -> tuple[Tensor, Tensor]:
        probs = self.head(self.body(self.reduce(tt.as_tensor(F)), rng))
        return probs[:, 0], probs[:, 1]


class ProposalTransformer(Module):
    """Classification and regression confidences for each sparse proposal."""

    def __init__(self, in_features: int, cfg: TransformerConfig, rng: np.random.Generator,
                 seq_len: int | None = None):
        self.embed = Linear(in_features, cfg.d_model, rng)
        self.body = EncoderDecoder(cfg, rng, seq_len)
        self.head = MLPHead(cfg.d_model, rng)

    def __call__(self, P: Tensor, rng=None) -> tuple[Tensor, Tensor]:
        conf = self.head(self.body(self.embed(tt.as_tensor(P)), rng))
        return conf[:, 0], conf[:, 1]


class TAPGModel(Module):
    """Both transformers plus the fixed sparse-window layout for sequence length T."""

    def __init__(self, in_channels: int, T: int, group: WindowGroup,
                 cfg: TransformerConfig, sample_points: int = 32, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.T = T
        self.group = group
        self.sample_points = sample_points
        self.windows = enumerate_windows(T, group)
        self._weights = sampling_tensor(self.windows, sample_points, T)
        self.boundary = BoundaryTransformer(in_channels, cfg, rng, seq_len=T)
        self.proposal = ProposalTransformer(in_channels * sample_points, cfg, rng,
                                            seq_len=len(self.windows))

    def proposal_features(self, F) -> Tensor:
        return extract_features(tt.as_tensor(F), self.windows, self.sample_points, self._weights)

    def __call__(self, F, P=None, rng=None):
        """Returns (P_s, P_e, C_c, C_r). ``P`` may carry precomputed proposal features."""
        F = tt.as_tensor(F)
        if P is None:
            P = self.proposal_features(F)
        p_s, p_e = self.boundary(F, rng)
        c_c, c_r = self.proposal(P, rng)
        return p_s, p_e, c_c, c_r


# -- losses -----------------------------------------------------------------------

def balanced_bl_loss(P: Tensor, G, threshold: float = 0.5, mask=None) -> Tensor:
    """Class-balanced binary logistic loss against labels binarized at ``threshold``.

    ``mask`` (optional) selects the entries that take part; the rest are ignored.
    """
    P = tt.as_tensor(P)
    G = np.asarray(G, dtype=float)
    if P.shape != G.shape:
        raise tt.ShapeError(f"balanced_bl_loss: prediction {P.shape} vs label {G.shape}")
    if not np.isfinite(P.data).all():
        raise ValueError("balanced_bl_loss: non-finite predictions")
    keep = np.ones(G.shape, bool) if mask is None else np.asarray(mask, bool)
    pos = ((G > threshold) & keep).astype(P.data.dtype)
    neg = ((G <= threshold) & keep).astype(P.data.dtype)
    n = float(keep.sum())
    if n == 0:
        return tt.scale(tt.tsum(P), 0.0)
    n_pos, n_neg = pos.sum(), neg.sum()
    w_pos = pos * (n / n_pos) if n_pos else pos
    w_neg = neg * (n / n_neg) if n_neg else neg
    # log() only sees entries that carry weight, so saturated ignored entries cannot poison it
    p_safe = Tensor.from_op(np.where(w_pos > 0, P.data, 0.5), (P,),
                            lambda g: (g * (w_pos > 0),), "select")
    q_safe = Tensor.from_op(np.where(w_neg > 0, 1.0 - P.data, 0.5), (P,),
                            lambda g: (-g * (w_neg > 0),), "select")
    total = tt.tsum(tt.mul(Tensor(w_pos), tt.log(p_safe))) + \
        tt.tsum(tt.mul(Tensor(w_neg), tt.log(q_safe)))
    return tt.scale(total, -1.0 / n)


def smooth_l1(pred: Tensor, target) -> Tensor:
    """Mean smooth-L1 (beta = 1) between predictions and targets."""
    pred = tt.as_tensor(pred)
    target = np.asarray(target, dtype=float)
    if pred.shape != target.shape:
        raise tt.ShapeError(f"smooth_l1: {pred.shape} vs {target.shape}")
    x = pred.data - target
    ax = np.abs(x)
    n = max(x.size, 1)
    val = np.where(ax < 1.0, 0.5 * x * x, ax - 0.5).sum() / n
    dx = np.where(ax < 1.0, x, np.sign(x)) / n
    return Tensor.from_op(np.asarray(val), (pred,), lambda g: (g * dx,), "smooth_l1")


@dataclass
class LossThresholds:
    boundary: float = 0.5
    positive: float = 0.9
    negative: float = 0.3


def total_loss(P_s, P_e, G_s, G_e, C_c, C_r, G_c,
               thresholds: LossThresholds | None = None) -> dict[str, Tensor]:
    """Returns the four sub-losses and their sum under key ``"L"``."""
    th = thresholds or LossThresholds()
    G_c = np.asarray(G_c, dtype=float)
    l_b = balanced_bl_loss(P_s, G_s, th.boundary) + balanced_bl_loss(P_e, G_e, th.boundary)
    # positives above `positive`, negatives below `negative`, the rest ignored
    cls_mask = (G_c > th.positive) | (G_c < th.negative)
    l_c = balanced_bl_loss(C_c, G_c, th.positive, mask=cls_mask)
    l_r = smooth_l1(C_r, G_c)
    return {"L": l_b + l_c + l_r, "L_b": l_b, "L_c": l_c, "L_r": l_r}


# -- optimizer --------------------------------------------------------------------

class Adam:
    def __init__(self, params: dict[str, Tensor], lr: float = 1e-4,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k, p in self.params.items():
            g = grads[k]
            m = self.m[k]
            v = self.v[k]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state(self) -> dict[str, np.ndarray]:
        out = {"__adam__/t": np.asarray(float(self.t))}
        out.update({f"__adam__/m/{k}": v for k, v in self.m.items()})
        out.update({f"__adam__/v/{k}": v for k, v in self.v.items()})
        return out

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        if "__adam__/t" not in state:
            return
        self.t = int(state["__adam__/t"])
        for k in self.params:
            self.m[k] = state[f"__adam__/m/{k}"].copy()
            self.v[k] = state[f"__adam__/v/{k}"].copy()


# -- training ---------------------------------------------------------------------

@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    decay_factor: float = 0.1
    decay_every: int = 10
    epochs: int = 60
    batch_size: int = 1
    seed: int = 0
    thresholds: LossThresholds = field(default_factory=LossThresholds)

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if isinstance(self.thresholds, dict):
            self.thresholds = LossThresholds(**self.thresholds)


def learning_rate(cfg: TrainConfig, epoch: int) -> float:
    """Step-decayed rate for a 0-based epoch index."""
    return cfg.learning_rate * cfg.decay_factor ** (epoch // cfg.decay_every)


@dataclass
class TrainingSample:
    """One video (or window) with everything the loss needs, precomputed."""

    features: np.ndarray
    proposal_features: np.ndarray
    G_s: np.ndarray
    G_e: np.ndarray
    G_c: np.ndarray


def make_sample(model: TAPGModel, features: np.ndarray, annotations) -> TrainingSample:
    T = features.shape[0]
    if T != model.T:
        raise ValueError(f"sample has {T} snippets, model expects {model.T}")
    bt = boundary_targets(annotations, T)
    with tt.no_grad():
        P = model.proposal_features(features).data
    return TrainingSample(np.asarray(features, dtype=tt.get_default_dtype()), P,
                          bt.G_s, bt.G_e, proposal_targets(model.windows, annotations))


def sample_loss(model: TAPGModel, s: TrainingSample, thresholds: LossThresholds,
                rng=None) -> dict[str, Tensor]:
    p_s, p_e, c_c, c_r = model(Tensor(s.features), Tensor(s.proposal_features), rng)
    return total_loss(p_s, p_e, s.G_s, s.G_e, c_c, c_r, s.G_c, thresholds)


CHECKPOINT_EPOCH_KEY = "__meta__/epoch"


def checkpoint_arrays(model: TAPGModel, optimizer: Adam | None = None,
                      epoch: int = 0) -> dict[str, np.ndarray]:
    arrays = model.state()
    arrays[CHECKPOINT_EPOCH_KEY] = np.asarray(float(epoch))
    if optimizer is not None:
        arrays.update(optimizer.state())
    return arrays


def load_model_state(model: TAPGModel, path) -> dict[str, np.ndarray]:
    """Load parameters from a checkpoint file; returns the raw arrays (incl. metadata)."""
    arrays = load_checkpoint(path)
    params = model.named_parameters()
    bad = [k for k, p in params.items() if k not in arrays or arrays[k].shape != p.shape]
    if bad:
        detail = ", ".join(
            f"{k}: checkpoint {arrays[k].shape if k in arrays else 'missing'} vs model {params[k].shape}"
            for k in bad[:5])
        raise tt.ShapeError(f"checkpoint {path} does not match the model config ({detail})")
    model.load_state({k: arrays[k] for k in params})
    return arrays


def train(model: TAPGModel, samples: list[TrainingSample], cfg: TrainConfig,
          log_path=None, checkpoint_path=None, resume: dict | None = None,
          on_epoch=None) -> list[dict]:
    """Adam on the summed objective, one sample per forward pass.

    Gradients of ``cfg.batch_size`` consecutive samples are averaged per step.
    Returns the per-epoch log records; also appends them as JSON lines to
    ``log_path``. ``resume`` is the array dict of a previous checkpoint.
    """
    if not samples:
        raise ValueError("training needs at least one sample")
    params = model.named_parameters()
    opt = Adam(params, cfg.learning_rate)
    start = 0
    if resume is not None:
        opt.load_state(resume)
        start = int(resume.get(CHECKPOINT_EPOCH_KEY, 0))
    history = []
    log_file = open(log_path, "a") if log_path else None
    try:
        for epoch in range(start, cfg.epochs):
            opt.lr = learning_rate(cfg, epoch)
            order = np.random.default_rng([cfg.seed, epoch]).permutation(len(samples))
            sums = {"L": 0.0, "L_b": 0.0, "L_c": 0.0, "L_r": 0.0}
            acc = None
            in_batch = 0
            for j, idx in enumerate(order):
                drop_rng = np.random.default_rng([cfg.seed, epoch, j, 1])
                losses = sample_loss(model, samples[idx], cfg.thresholds, drop_rng)
                value = losses["L"].item()
                if not math.isfinite(value):
                    raise TrainingDiverged(
                        f"non-finite loss at epoch {epoch}, sample {idx}: "
                        + ", ".join(f"{k}={v.item():.4g}" for k, v in losses.items()))
                for k in sums:
                    sums[k] += losses[k].item()
                g = tt.grad(losses["L"], params)
                acc = g if acc is None else {k: acc[k] + g[k] for k in acc}
                in_batch += 1
                if in_batch == cfg.batch_size or j == len(order) - 1:
                    opt.step({k: v / in_batch for k, v in acc.items()})
                    acc, in_batch = None, 0
            record = {"epoch": epoch, "step": opt.t}
            record.update({k: v / len(samples) for k, v in sums.items()})
            record["lr"] = opt.lr
            history.append(record)
            log.info("epoch %d  L=%.4f  L_b=%.4f  L_c=%.4f  L_r=%.4f  lr=%.2g", epoch,
                     record["L"], record["L_b"], record["L_c"], record["L_r"], record["lr"])
            if log_file:
                log_file.write(json.dumps(record) + "\n")
                log_file.flush()
            if on_epoch:
                on_epoch(record)
    finally:
        if log_file:
            log_file.close()
    for p in params.values():
        p.grad = None
    if checkpoint_path:
        save_checkpoint(checkpoint_path, checkpoint_arrays(model, opt, max(cfg.epochs, start)))
    return history
