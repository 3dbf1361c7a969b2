"""Training objectives: mixup supervised loss, in-/out-of-manifold and
interpolation consistency regularizers with two-view low-variance estimates,
the full semixup batch objective, and the pi-model / interpolation-
consistency / mixmatch-lite baselines.

Conventions shared by every batch objective:
  * model outputs entering consistency terms are softmax probabilities;
  * labeled batches arrive already augmented by the data pipeline, unlabeled
    batches arrive raw and transforms are sampled in here;
  * batch losses return (total, report) where `total` is a torch scalar
    ready for backward and the report carries raw per-term sums:
    total = supervised / nb + unsup_sum / (n_unsup * nc).

Replay discipline: each objective documents the exact order in which it
consumes its numpy Generator, so a run is reproducible from its seed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .augment import TransformSpec, apply_array, sample_transform


class ShapeMismatch(ValueError):
    pass


class BatchSizeMismatch(ValueError):
    pass


@dataclass(frozen=True)
class LossWeights:
    """Weights of the three unsupervised terms: in-manifold consistency,
    out-of-manifold consistency, interpolation consistency."""

    w_in: float = 2.0
    w_out: float = 2.0
    w_ic: float = 4.0

    def __post_init__(self):
        if min(self.w_in, self.w_out, self.w_ic) < 0:
            raise ValueError("weights must be >= 0")

    @classmethod
    def zeros(cls) -> "LossWeights":
        return cls(0.0, 0.0, 0.0)

    @property
    def all_zero(self) -> bool:
        return self.w_in == self.w_out == self.w_ic == 0.0


@dataclass(frozen=True)
class MixDraw:
    """One blending-coefficient draw."""

    lam: float
    partner_index: int = -1
    clamped: bool = False


@dataclass(frozen=True)
class BatchLossReport:
    """Scalar view of one batch objective.

    supervised and the term_* fields are raw sums over their items;
    total = supervised/nb + (term_in + term_out + term_ic)/(n_unsup * nc)
    (with nc dropped when class normalization is off).
    """

    total: float
    supervised: float
    term_in: float
    term_out: float
    term_ic: float
    nb: int
    nc: int
    n_unsup: int

    CSV_FIELDS = ("total", "supervised", "term_in", "term_out", "term_ic")


def mix(x_i, x_j, lam):
    """Elementwise convex combination lam * x_i + (1 - lam) * x_j."""
    if x_i.shape != x_j.shape:
        raise ShapeMismatch(f"{x_i.shape} vs {x_j.shape}")
    return lam * x_i + (1.0 - lam) * x_j


def sample_lambda(rng: np.random.Generator, alpha: float,
                  clamp: bool = False) -> MixDraw:
    """Draw lam ~ Beta(alpha, alpha); optionally clamp to max(lam, 1-lam)."""
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    lam = float(rng.beta(alpha, alpha))
    if clamp:
        lam = max(lam, 1.0 - lam)
    return MixDraw(lam=lam, clamped=clamp)


def _as_2d(t) -> torch.Tensor:
    t = torch.as_tensor(t)
    return t.unsqueeze(0) if t.ndim == 1 else t


def soft_cross_entropy(logits_mix, y_i, y_j, lam) -> torch.Tensor:
    """lam-weighted cross-entropy against the two mixing partners' labels,
    averaged over the batch."""
    logits = _as_2d(logits_mix)
    y_i = torch.as_tensor(y_i, dtype=torch.long).reshape(-1)
    y_j = torch.as_tensor(y_j, dtype=torch.long).reshape(-1)
    lam = torch.as_tensor(lam, dtype=logits.dtype).reshape(-1)
    logp = F.log_softmax(logits, dim=-1)
    rows = torch.arange(logits.shape[0])
    return (-(lam * logp[rows, y_i] + (1.0 - lam) * logp[rows, y_j])).mean()


def consistency_term(p, q) -> torch.Tensor:
    """Squared Euclidean distance between prediction vectors (batch mean)."""
    p, q = _as_2d(p), _as_2d(q)
    return ((p - q) ** 2).sum(dim=-1).mean()


def interpolation_term(p_i, p_j, p_mix, lam) -> torch.Tensor:
    """|| Mix_lam(p_i, p_j) - p_mix ||^2 (batch mean)."""
    p_i, p_j, p_mix = _as_2d(p_i), _as_2d(p_j), _as_2d(p_mix)
    lam = torch.as_tensor(lam, dtype=p_i.dtype).reshape(-1, 1)
    target = lam * p_i + (1.0 - lam) * p_j
    return ((target - p_mix) ** 2).sum(dim=-1).mean()


def oom_terms(p_mix, p_t, p_tprime) -> torch.Tensor:
    """Two-view out-of-manifold consistency estimate:
    ||p_mix - p_T||^2 + ||p_mix - p_T'||^2 (batch mean)."""
    p_mix, p_t, p_tprime = _as_2d(p_mix), _as_2d(p_t), _as_2d(p_tprime)
    sq = ((p_mix - p_t) ** 2).sum(dim=-1) + ((p_mix - p_tprime) ** 2).sum(dim=-1)
    return sq.mean()


def sharpen(p, temperature: float):
    """Raise a distribution to 1/T and renormalize."""
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    p = torch.as_tensor(p)
    powered = p ** (1.0 / temperature)
    return powered / powered.sum(dim=-1, keepdim=True)


# ---------------------------------------------------------------------------
# batch objectives

def _forward_probs(net, arrays: np.ndarray, dtype, train, g):
    x = torch.from_numpy(np.ascontiguousarray(arrays)).to(dtype)
    logits = net(x, train=train, g=g)
    return logits, F.softmax(logits, dim=-1)


def _param_dtype(net) -> torch.dtype:
    return next(net.parameters()).dtype


def _check_batch(x_l, y_l, x_u):
    nb = len(x_l)
    if len(y_l) != nb or (x_u is not None and len(x_u) != nb):
        raise BatchSizeMismatch(
            f"labeled {len(x_l)}/{len(y_l)}, unlabeled "
            f"{len(x_u) if x_u is not None else '-'}")
    if nb == 0:
        raise BatchSizeMismatch("empty batch")
    return nb


def _scalar(x) -> float:
    return float(x.detach()) if isinstance(x, torch.Tensor) else float(x)


def _report(total, sup, t_in, t_out, t_ic, nb, nc, n_unsup) -> BatchLossReport:
    return BatchLossReport(
        total=_scalar(total), supervised=_scalar(sup), term_in=_scalar(t_in),
        term_out=_scalar(t_out), term_ic=_scalar(t_ic), nb=nb, nc=nc,
        n_unsup=n_unsup)


def supervised_ce_loss(net, labeled_batch, train: bool = True,
                       g: torch.Generator | None = None):
    """Plain cross-entropy on the (pre-augmented) labeled batch."""
    x_l, y_l = labeled_batch
    nb = _check_batch(x_l, y_l, None)
    nc = net.config.n_classes
    logits, _ = _forward_probs(net, x_l, _param_dtype(net), train, g)
    logp = F.log_softmax(logits, dim=-1)
    ce_sum = -logp[torch.arange(nb), torch.as_tensor(y_l, dtype=torch.long)].sum()
    total = ce_sum / nb
    return total, _report(total, ce_sum, 0.0, 0.0, 0.0, nb, nc, nb)


def mixup_supervised_loss(net, labeled_batch, rng: np.random.Generator,
                          alpha: float = 0.75, train: bool = True,
                          g: torch.Generator | None = None):
    """Soft cross-entropy on convex input mixes; lam is NOT clamped here.

    rng order: for each item i, partner j then lam.
    """
    x_l, y_l = labeled_batch
    nb = _check_batch(x_l, y_l, None)
    nc = net.config.n_classes

    js = np.empty(nb, dtype=np.int64)
    lams = np.empty(nb)
    for i in range(nb):
        js[i] = int(rng.integers(nb))
        lams[i] = sample_lambda(rng, alpha, clamp=False).lam

    x_mix = lams[:, None, None, None] * x_l + (1 - lams[:, None, None, None]) * x_l[js]
    dtype = _param_dtype(net)
    logits, _ = _forward_probs(net, x_mix, dtype, train, g)
    logp = F.log_softmax(logits, dim=-1)
    rows = torch.arange(nb)
    y_i = torch.as_tensor(np.asarray(y_l), dtype=torch.long)
    y_j = y_i[torch.as_tensor(js)]
    lam_t = torch.as_tensor(lams, dtype=dtype)
    ce_sum = (-(lam_t * logp[rows, y_i] + (1 - lam_t) * logp[rows, y_j])).sum()
    total = ce_sum / nb
    return total, _report(total, ce_sum, 0.0, 0.0, 0.0, nb, nc, nb)


def semixup_batch_loss(net, labeled_batch, unlabeled_batch,
                       weights: LossWeights, rng: np.random.Generator,
                       alpha: float = 0.75,
                       transform_spec: TransformSpec | None = None,
                       train: bool = True, g: torch.Generator | None = None,
                       class_norm: bool = True):
    """The full batch objective over one labeled and one unlabeled batch.

    Per unlabeled item i (rng order: partner j, clamped lam, T, T'):
      x_mix = Mix_lam(T x_i, x_j)  with the raw partner x_j, and the loss
      accumulates
        w_in  * ||f(T x_i) - f(T' x_i)||^2
      + w_out * (||f(x_mix) - f(T x_i)||^2 + ||f(x_mix) - f(T' x_i)||^2)
      + w_ic  * ||f(x_mix) - Mix_lam(f(T x_i), f(x_j))||^2.
    Per labeled item (rng order: partner j, unclamped lam): soft CE on the
    input mix. Total = L_l/nb + L_u/(nb*nc). Raw batch predictions are
    computed once per batch and indexed for partners; the T/T' views are
    reused across all three terms.

    With all-zero weights the unsupervised branch is skipped entirely
    (no rng draws), making the objective bit-identical to
    mixup_supervised_loss.
    """
    x_l, y_l = labeled_batch
    if weights.all_zero:
        total, rep = mixup_supervised_loss(net, labeled_batch, rng, alpha,
                                           train=train, g=g)
        return total, rep

    x_u = unlabeled_batch
    nb = _check_batch(x_l, y_l, x_u)
    nc = net.config.n_classes
    spec = transform_spec or TransformSpec.identity(x_u.shape[-1])
    dtype = _param_dtype(net)

    js = np.empty(nb, dtype=np.int64)
    lams = np.empty(nb)
    tx = np.empty_like(x_u)
    tpx = np.empty_like(x_u)
    for i in range(nb):
        js[i] = int(rng.integers(nb))
        lams[i] = sample_lambda(rng, alpha, clamp=True).lam
        tx[i] = apply_array(sample_transform(rng, spec), x_u[i])
        tpx[i] = apply_array(sample_transform(rng, spec), x_u[i])
    x_mix = lams[:, None, None, None] * tx + (1 - lams[:, None, None, None]) * x_u[js]

    js_l = np.empty(nb, dtype=np.int64)
    lams_l = np.empty(nb)
    for i in range(nb):
        js_l[i] = int(rng.integers(nb))
        lams_l[i] = sample_lambda(rng, alpha, clamp=False).lam
    x_lmix = lams_l[:, None, None, None] * x_l \
        + (1 - lams_l[:, None, None, None]) * x_l[js_l]

    # one forward over all five views: [T, T', raw, mix, labeled-mix]
    big = np.concatenate([tx, tpx, x_u, x_mix, x_lmix])
    logits, probs = _forward_probs(net, big, dtype, train, g)
    p_t, p_tp, p_raw, p_mix, _ = torch.split(probs, nb)
    logits_lmix = logits[4 * nb:]

    lam_t = torch.as_tensor(lams, dtype=dtype).unsqueeze(1)
    t_in = weights.w_in * ((p_t - p_tp) ** 2).sum(dim=-1).sum()
    t_out = weights.w_out * (((p_mix - p_t) ** 2).sum(dim=-1)
                             + ((p_mix - p_tp) ** 2).sum(dim=-1)).sum()
    p_target = lam_t * p_t + (1 - lam_t) * p_raw[torch.as_tensor(js)]
    t_ic = weights.w_ic * ((p_mix - p_target) ** 2).sum(dim=-1).sum()
    l_u = t_in + t_out + t_ic

    logp = F.log_softmax(logits_lmix, dim=-1)
    rows = torch.arange(nb)
    y_i = torch.as_tensor(np.asarray(y_l), dtype=torch.long)
    y_j = y_i[torch.as_tensor(js_l)]
    lam_lt = torch.as_tensor(lams_l, dtype=dtype)
    l_l = (-(lam_lt * logp[rows, y_i] + (1 - lam_lt) * logp[rows, y_j])).sum()

    divisor = nb * nc if class_norm else nb
    total = l_l / nb + l_u / divisor
    return total, _report(total, l_l, t_in, t_out, t_ic, nb, nc, nb)


def pi_model_loss(net, labeled_batch, unlabeled_batch, w: float,
                  rng: np.random.Generator,
                  transform_spec: TransformSpec | None = None,
                  train: bool = True, g: torch.Generator | None = None,
                  class_norm: bool = True):
    """Cross-entropy on labeled plus w * two-view consistency over every
    sample of both batches.

    rng order: for each of the 2*nb combined items (labeled first), T then
    T'. With w == 0 the consistency branch is skipped (no draws), reducing
    to supervised_ce_loss bit-for-bit.
    """
    x_l, y_l = labeled_batch
    if w == 0.0:
        return supervised_ce_loss(net, labeled_batch, train=train, g=g)

    x_u = unlabeled_batch
    nb = _check_batch(x_l, y_l, x_u)
    nc = net.config.n_classes
    spec = transform_spec or TransformSpec.identity(x_u.shape[-1])
    dtype = _param_dtype(net)

    combined = np.concatenate([x_l, x_u])
    n_all = len(combined)
    tx = np.empty_like(combined)
    tpx = np.empty_like(combined)
    for i in range(n_all):
        tx[i] = apply_array(sample_transform(rng, spec), combined[i])
        tpx[i] = apply_array(sample_transform(rng, spec), combined[i])

    big = np.concatenate([x_l, tx, tpx])
    logits, probs = _forward_probs(net, big, dtype, train, g)
    logits_l = logits[:nb]
    p_t = probs[nb:nb + n_all]
    p_tp = probs[nb + n_all:]

    logp = F.log_softmax(logits_l, dim=-1)
    ce_sum = -logp[torch.arange(nb), torch.as_tensor(np.asarray(y_l),
                                                     dtype=torch.long)].sum()
    cons_sum = w * ((p_t - p_tp) ** 2).sum(dim=-1).sum()

    divisor = n_all * nc if class_norm else n_all
    total = ce_sum / nb + cons_sum / divisor
    return total, _report(total, ce_sum, cons_sum, 0.0, 0.0, nb, nc, n_all)


def ict_ramp_weight(epoch: int, max_weight: float = 100.0,
                    ramp_epochs: int = 80) -> float:
    """Sigmoid-shaped ramp: w(t) = w_max * exp(-5 (1 - min(t/T, 1))^2)."""
    frac = min(epoch / ramp_epochs, 1.0) if ramp_epochs > 0 else 1.0
    return max_weight * float(np.exp(-5.0 * (1.0 - frac) ** 2))


def ict_loss(net, labeled_batch, unlabeled_batch, epoch: int,
             rng: np.random.Generator, alpha: float = 0.75,
             max_weight: float = 100.0, ramp_epochs: int = 80,
             train: bool = True, g: torch.Generator | None = None,
             class_norm: bool = True):
    """Plain CE on labeled plus ramped interpolation consistency on raw
    unlabeled pairs (no mixup on the labeled side).

    rng order: for each unlabeled item i, partner j then clamped lam.
    """
    x_l, y_l = labeled_batch
    x_u = unlabeled_batch
    nb = _check_batch(x_l, y_l, x_u)
    nc = net.config.n_classes
    dtype = _param_dtype(net)
    w = ict_ramp_weight(epoch, max_weight, ramp_epochs)

    js = np.empty(nb, dtype=np.int64)
    lams = np.empty(nb)
    for i in range(nb):
        js[i] = int(rng.integers(nb))
        lams[i] = sample_lambda(rng, alpha, clamp=True).lam
    x_mix = lams[:, None, None, None] * x_u + (1 - lams[:, None, None, None]) * x_u[js]

    big = np.concatenate([x_l, x_u, x_mix])
    logits, probs = _forward_probs(net, big, dtype, train, g)
    logits_l = logits[:nb]
    p_u = probs[nb:2 * nb]
    p_mix = probs[2 * nb:]

    logp = F.log_softmax(logits_l, dim=-1)
    ce_sum = -logp[torch.arange(nb), torch.as_tensor(np.asarray(y_l),
                                                     dtype=torch.long)].sum()
    lam_t = torch.as_tensor(lams, dtype=dtype).unsqueeze(1)
    target = lam_t * p_u + (1 - lam_t) * p_u[torch.as_tensor(js)]
    ic_sum = w * ((target - p_mix) ** 2).sum(dim=-1).sum()

    divisor = nb * nc if class_norm else nb
    total = ce_sum / nb + ic_sum / divisor
    return total, _report(total, ce_sum, 0.0, 0.0, ic_sum, nb, nc, nb)


def mixmatch_loss(net, labeled_batch, unlabeled_batch,
                  rng: np.random.Generator, alpha: float = 0.75,
                  temperature: float = 0.5, unsup_weight: float = 10.0,
                  transform_spec: TransformSpec | None = None,
                  train: bool = True, g: torch.Generator | None = None,
                  class_norm: bool = True):
    """Mixmatch-lite: two-view label guessing with sharpening, then mixup of
    the combined batch against a shuffled copy of itself; soft CE on the
    mixed labeled part plus weighted squared error on the mixed unlabeled
    part. No EMA, no distribution alignment, and gradients flow through the
    guessed labels so the loss stays a plain function of the parameters.

    rng order: for each unlabeled item i, T1 then T2; then one permutation
    of the 3*nb pool; then one clamped lam per pool item.
    """
    x_l, y_l = labeled_batch
    x_u = unlabeled_batch
    nb = _check_batch(x_l, y_l, x_u)
    nc = net.config.n_classes
    spec = transform_spec or TransformSpec.identity(x_u.shape[-1])
    dtype = _param_dtype(net)

    u1 = np.empty_like(x_u)
    u2 = np.empty_like(x_u)
    for i in range(nb):
        u1[i] = apply_array(sample_transform(rng, spec), x_u[i])
        u2[i] = apply_array(sample_transform(rng, spec), x_u[i])

    _, probs_guess = _forward_probs(net, np.concatenate([u1, u2]), dtype, train, g)
    guessed = sharpen((probs_guess[:nb] + probs_guess[nb:]) / 2.0, temperature)

    onehot = torch.zeros(nb, nc, dtype=dtype)
    onehot[torch.arange(nb), torch.as_tensor(np.asarray(y_l), dtype=torch.long)] = 1.0
    pool_x = np.concatenate([x_l, u1, u2])
    pool_t = torch.cat([onehot, guessed, guessed])

    n_pool = 3 * nb
    perm = rng.permutation(n_pool)
    lams = np.empty(n_pool)
    for k in range(n_pool):
        lams[k] = sample_lambda(rng, alpha, clamp=True).lam

    mixed_x = lams[:, None, None, None] * pool_x \
        + (1 - lams[:, None, None, None]) * pool_x[perm]
    lam_t = torch.as_tensor(lams, dtype=dtype).unsqueeze(1)
    mixed_t = lam_t * pool_t + (1 - lam_t) * pool_t[torch.as_tensor(perm)]

    logits, probs = _forward_probs(net, mixed_x, dtype, train, g)
    logp = F.log_softmax(logits[:nb], dim=-1)
    ce_sum = -(mixed_t[:nb] * logp).sum()
    sq_sum = unsup_weight * ((mixed_t[nb:] - probs[nb:]) ** 2).sum(dim=-1).sum()

    n_unsup = 2 * nb
    divisor = n_unsup * nc if class_norm else n_unsup
    total = ce_sum / nb + sq_sum / divisor
    return total, _report(total, ce_sum, 0.0, sq_sum, 0.0, nb, nc, n_unsup)
