"""Independent reference implementations used to verify the package.

Everything here is deliberately written the slow, obvious way (scalar loops,
exhaustive enumeration, per-item forwards) and stays independent of the
vectorized code paths it checks.
"""

from __future__ import annotations

from fractions import Fraction
import itertools

import numpy as np
import torch

from semixlab.augment import apply_array, sample_transform
from semixlab.network import backward


# ---------------------------------------------------------------------------
# image ops

def clip_scale_reference(pixels: np.ndarray) -> np.ndarray:
    """Scalar clip-then-scale oracle for intensity standardization."""
    flat = sorted(pixels.astype(np.float64).ravel().tolist())
    n = len(flat)

    def percentile(q):
        pos = q / 100.0 * (n - 1)
        lo = int(np.floor(pos))
        hi = int(np.ceil(pos))
        frac = pos - lo
        return flat[lo] * (1 - frac) + flat[hi] * frac

    p5, p99 = percentile(5.0), percentile(99.0)
    clipped = [[min(max(v, p5), p99) for v in row]
               for row in pixels.astype(np.float64)]
    lo = min(min(row) for row in clipped)
    hi = max(max(row) for row in clipped)
    out = [[round((v - lo) / (hi - lo) * 255.0) for v in row] for row in clipped]
    return np.asarray(out, dtype=np.uint8)


def conv2d_reference(x: np.ndarray, weight: np.ndarray, stride: int) -> np.ndarray:
    """Naive scalar 3x3 convolution with zero padding 1."""
    n, c_in, h, w = x.shape
    c_out = weight.shape[0]
    xp = np.zeros((n, c_in, h + 2, w + 2))
    xp[:, :, 1:-1, 1:-1] = x
    oh = (h + 2 - 3) // stride + 1
    ow = (w + 2 - 3) // stride + 1
    out = np.zeros((n, c_out, oh, ow))
    for b in range(n):
        for co in range(c_out):
            for i in range(oh):
                for j in range(ow):
                    acc = 0.0
                    for ci in range(c_in):
                        for di in range(3):
                            for dj in range(3):
                                acc += xp[b, ci, i * stride + di, j * stride + dj] \
                                    * weight[co, ci, di, dj]
                    out[b, co, i, j] = acc
    return out


def gap_reference(x: np.ndarray) -> np.ndarray:
    n, c, h, w = x.shape
    out = np.zeros((n, c))
    for b in range(n):
        for ch in range(c):
            acc = 0.0
            for i in range(h):
                for j in range(w):
                    acc += x[b, ch, i, j]
            out[b, ch] = acc / (h * w)
    return out


# ---------------------------------------------------------------------------
# metrics

def ba_reference(y_true, y_pred) -> Fraction:
    y_true = list(y_true)
    y_pred = list(y_pred)
    recalls = []
    for cls in sorted(set(y_true)):
        idx = [i for i, y in enumerate(y_true) if y == cls]
        hits = sum(1 for i in idx if y_pred[i] == cls)
        recalls.append(Fraction(hits, len(idx)))
    return sum(recalls, Fraction(0)) / len(recalls)


def kappa_reference(y_true, y_pred, k: int = 5) -> Fraction:
    y_true = list(y_true)
    y_pred = list(y_pred)
    n = len(y_true)
    obs = [[0] * k for _ in range(k)]
    for t, p in zip(y_true, y_pred):
        obs[t][p] += 1
    row = [sum(obs[i][j] for j in range(k)) for i in range(k)]
    col = [sum(obs[i][j] for i in range(k)) for j in range(k)]
    num = Fraction(0)
    den = Fraction(0)
    for i in range(k):
        for j in range(k):
            w = Fraction((i - j) ** 2, (k - 1) ** 2)
            num += w * obs[i][j]
            den += w * Fraction(row[i] * col[j], n)
    if den == 0:
        raise ZeroDivisionError("degenerate marginals")
    return 1 - num / den


def pair_count_auc(truth, scores) -> Fraction:
    """(concordant + ties/2) / (n_pos * n_neg) by O(n^2) pair counting."""
    truth = list(truth)
    scores = list(scores)
    pos = [s for t, s in zip(truth, scores) if t]
    neg = [s for t, s in zip(truth, scores) if not t]
    num = Fraction(0)
    for sp in pos:
        for sn in neg:
            if sp > sn:
                num += 1
            elif sp == sn:
                num += Fraction(1, 2)
    return num / (len(pos) * len(neg))


def ap_reference(truth, scores) -> float:
    """Average precision by explicit threshold sweep (descending unique
    scores), recomputing precision/recall from scratch at each threshold."""
    truth = [bool(t) for t in truth]
    scores = list(scores)
    n_pos = sum(truth)
    thresholds = sorted(set(scores), reverse=True)
    ap = 0.0
    prev_recall = 0.0
    for thr in thresholds:
        tp = sum(1 for t, s in zip(truth, scores) if s >= thr and t)
        pred_pos = sum(1 for s in scores if s >= thr)
        precision = tp / pred_pos
        recall = tp / n_pos
        ap += (recall - prev_recall) * precision
        prev_recall = recall
    return ap


def wilcoxon_enumeration(a, b) -> float:
    """Exact one-sided (a > b) signed-rank p-value by enumerating all 2^n
    sign assignments of the observed absolute differences."""
    d = [x - y for x, y in zip(a, b) if x != y]
    n = len(d)
    absd = [abs(x) for x in d]
    order = sorted(range(n), key=lambda i: absd[i])
    ranks = [0.0] * n
    i = 0
    while i < n:
        j = i
        while j + 1 < n and absd[order[j + 1]] == absd[order[i]]:
            j += 1
        avg = (i + j) / 2.0 + 1.0
        for k in range(i, j + 1):
            ranks[order[k]] = avg
        i = j + 1
    w_obs = sum(r for r, x in zip(ranks, d) if x > 0)
    count = 0
    for signs in itertools.product((0, 1), repeat=n):
        w = sum(r for r, s in zip(ranks, signs) if s)
        if w >= w_obs - 1e-9:
            count += 1
    return count / 2 ** n


# ---------------------------------------------------------------------------
# synthetic-image statistics

def estimate_gap_width(patch: np.ndarray) -> float:
    """Hand-written joint-space width estimator: threshold the row-mean
    profile at its midlevel and measure the longest dark run between the two
    bright bands."""
    profile = patch.astype(np.float64).mean(axis=1)
    # 3-tap smoothing
    padded = np.concatenate([profile[:1], profile, profile[-1:]])
    profile = (padded[:-2] + padded[1:-1] + padded[2:]) / 3.0
    mid = (profile.max() + profile.min()) / 2.0
    bright = profile > mid
    idx = np.flatnonzero(bright)
    if idx.size == 0:
        return 0.0
    first, last = idx[0], idx[-1]
    best = run = 0
    for r in range(first, last + 1):
        if bright[r]:
            best = max(best, run)
            run = 0
        else:
            run += 1
    return float(max(best, run))


def gap_threshold_classifier(train_pairs, train_grades, test_pairs):
    """Classify by gap width with per-grade mean thresholds fit on half the
    data; patches of a pair are averaged."""
    def width(pair):
        return (estimate_gap_width(pair[0]) + estimate_gap_width(pair[1])) / 2.0

    train_w = np.asarray([width(p) for p in train_pairs])
    grades = np.asarray(train_grades)
    means = np.asarray([train_w[grades == g].mean() for g in range(5)])
    cuts = (means[:-1] + means[1:]) / 2.0  # decreasing in grade
    preds = []
    for p in test_pairs:
        w = width(p)
        g = 0
        while g < 4 and w < cuts[g]:
            g += 1
        preds.append(g)
    return np.asarray(preds)


# ---------------------------------------------------------------------------
# objectives

def semixup_transcription(net, x_l, y_l, x_u, weights, rng, alpha, spec,
                          class_norm=True) -> float:
    """Straight-line per-item transcription of the training objective:
    per unlabeled item draw partner j, clamped lam, T, T'; mix the
    transformed item with the raw partner; accumulate the three weighted
    consistency terms. Per labeled item draw partner and unclamped lam and
    accumulate the soft cross-entropy. Every prediction is a separate
    single-item eval-mode forward."""
    dtype = next(net.parameters()).dtype
    nc = net.config.n_classes

    def f(img):
        x = torch.from_numpy(np.ascontiguousarray(img[None])).to(dtype)
        with torch.no_grad():
            return torch.softmax(net(x, train=False), dim=-1)[0].numpy()

    def logp(img):
        x = torch.from_numpy(np.ascontiguousarray(img[None])).to(dtype)
        with torch.no_grad():
            return torch.log_softmax(net(x, train=False), dim=-1)[0].numpy()

    nb = len(x_u)
    l_u = 0.0
    for i in range(nb):
        j = int(rng.integers(nb))
        lam = float(rng.beta(alpha, alpha))
        lam = max(lam, 1.0 - lam)
        t = sample_transform(rng, spec)
        tp = sample_transform(rng, spec)
        txi = apply_array(t, x_u[i])
        tpxi = apply_array(tp, x_u[i])
        x_mix = lam * txi + (1.0 - lam) * x_u[j]
        p_t = f(txi)
        p_tp = f(tpxi)
        p_mix = f(x_mix)
        p_j = f(x_u[j])
        p_target = lam * p_t + (1.0 - lam) * p_j
        l_u += weights.w_in * float(((p_t - p_tp) ** 2).sum())
        l_u += weights.w_out * float(((p_mix - p_t) ** 2).sum())
        l_u += weights.w_out * float(((p_mix - p_tp) ** 2).sum())
        l_u += weights.w_ic * float(((p_mix - p_target) ** 2).sum())

    nbl = len(x_l)
    l_l = 0.0
    for i in range(nbl):
        j = int(rng.integers(nbl))
        lam = float(rng.beta(alpha, alpha))
        x_mix = lam * x_l[i] + (1.0 - lam) * x_l[j]
        lp = logp(x_mix)
        l_l += -(lam * lp[y_l[i]] + (1.0 - lam) * lp[y_l[j]])

    divisor = nbl * nc if class_norm else nbl
    return l_l / nbl + l_u / divisor


def finite_difference_gradients(net, build_loss, h: float = 1e-4):
    """Central finite differences of build_loss(net) w.r.t. every parameter.

    build_loss must be deterministic (reseed anything stochastic inside).
    Returns (analytic, fd) dicts of flat numpy arrays.
    """
    total = build_loss(net)
    backward(net, total)
    analytic = {name: p.grad.detach().clone().view(-1).numpy().copy()
                for name, p in net.named_parameters()}

    fd = {}
    for name, p in net.named_parameters():
        flat = p.data.view(-1)
        grad = np.zeros(flat.numel())
        for k in range(flat.numel()):
            orig = flat[k].item()
            flat[k] = orig + h
            up = float(build_loss(net).detach())
            flat[k] = orig - h
            down = float(build_loss(net).detach())
            flat[k] = orig
            grad[k] = (up - down) / (2.0 * h)
        fd[name] = grad
    return analytic, fd


def max_relative_gradient_error(analytic, fd, floor: float = 1e-3) -> float:
    """max |analytic - fd| / max(|analytic|, |fd|, floor). The floor keeps
    finite-difference roundoff (~1e-9 at h=1e-4) from registering as
    relative error on near-zero gradients."""
    worst = 0.0
    for name in analytic:
        a = analytic[name]
        f = fd[name]
        denom = np.maximum(np.maximum(np.abs(a), np.abs(f)), floor)
        worst = max(worst, float((np.abs(a - f) / denom).max()))
    return worst
