"""Scalar-loop reference implementations used to check the vectorized code.

Everything here works on plain nested loops over numpy float64 arrays, so it
shares no code path with the torch implementations under test.
"""
from __future__ import annotations

import math

import numpy as np


def soft_iou(pred, target, eps=1e-8):
    b = pred.shape[0]
    total = 0.0
    for i in range(b):
        inter = union = 0.0
        for v_p, v_y in zip(pred[i].ravel(), target[i].ravel()):
            inter += v_p * v_y
            union += v_p + v_y - v_p * v_y
        total += 1.0 - inter / (union + eps)
    return total / b


def pixel_ce(pred, target, clamp=1e-12):
    acc, n = 0.0, 0
    for v_p, v_y in zip(pred.ravel(), target.ravel()):
        acc -= v_y * math.log(max(v_p, clamp)) + (1 - v_y) * math.log(max(1 - v_p, clamp))
        n += 1
    return acc / n


def lsgan_d(real, fake):
    r = sum((v - 1) ** 2 for v in real.ravel()) / real.size
    f = sum(v ** 2 for v in fake.ravel()) / fake.size
    return r + f


def lsgan_g(fake):
    return sum((v - 1) ** 2 for v in fake.ravel()) / fake.size


def l1(a, b):
    return sum(abs(x - y) for x, y in zip(a.ravel(), b.ravel())) / a.size


def cross_entropy(logits, labels):
    acc = 0.0
    for row, lab in zip(logits, labels):
        m = max(row)
        lse = m + math.log(sum(math.exp(v - m) for v in row))
        acc += lse - row[int(lab)]
    return acc / len(labels)


def classwise_aggregate(score, seg, eps=1e-8):
    """score, seg: (B, 1, H, W) -> (B, 2) [background, digit]."""
    out = np.zeros((score.shape[0], 2))
    for i in range(score.shape[0]):
        num_b = num_f = den_b = den_f = 0.0
        for d, y in zip(score[i].ravel(), seg[i].ravel()):
            num_f += y * d
            den_f += y
            num_b += (1 - y) * d
            den_b += 1 - y
        out[i] = (num_b / (den_b + eps), num_f / (den_f + eps))
    return out


def norm(v):
    return math.sqrt(sum(x * x for x in np.ravel(v)))


def linear_critic_gp(w):
    """Penalty of a linear critic x -> <w, x> + c: its gradient is w everywhere."""
    return (norm(w) - 1.0) ** 2


def wgan_critic(w, c, real, fake, lambda_gp):
    def score(x):
        return sum(a * b for a, b in zip(w.ravel(), x.ravel())) + c
    rs = sum(score(x) for x in real) / len(real)
    fs = sum(score(x) for x in fake) / len(fake)
    return fs - rs + lambda_gp * linear_critic_gp(w)


def wgan_generator(w, c, fake):
    return -sum(sum(a * b for a, b in zip(w.ravel(), x.ravel())) + c for x in fake) / len(fake)


def pointwise_scores(w, c, h):
    """1x1 linear map of (B, C, H, W) features to a (B, 1, H, W) score map."""
    b, ch, hh, ww = h.shape
    out = np.zeros((b, 1, hh, ww))
    for i in range(b):
        for y in range(hh):
            for x in range(ww):
                out[i, 0, y, x] = sum(w[k] * h[i, k, y, x] for k in range(ch)) + c
    return out


def outcond_critic(w, c, h_s, h_t, y_s, y_t, alpha, lambda_gp, eps=1e-8):
    """Out-conditioned critic loss for a pointwise linear critic.

    The class-c aggregate is sum_p a_c(p) <w, h(p)> / (sum_p a_c(p) + eps) + const,
    so its gradient wrt the feature at pixel p is w * a_c(p) / (sum a_c + eps).
    """
    src = classwise_aggregate(pointwise_scores(w, c, h_s), y_s, eps).mean()
    tgt = classwise_aggregate(pointwise_scores(w, c, h_t), y_t, eps).mean()
    wn = norm(w)
    pens = []
    for i in range(h_s.shape[0]):
        y_bar = alpha[i] * y_s[i].ravel() + (1 - alpha[i]) * y_t[i].ravel()
        for weights in (1 - y_bar, y_bar):
            s = sum(weights)
            g = wn * math.sqrt(sum(v * v for v in weights)) / (s + eps)
            pens.append((g - 1) ** 2)
    return tgt - src + lambda_gp * sum(pens) / len(pens)


def outcond_encoder(w, c, h_s, h_t, y_s, y_t, eps=1e-8):
    src = classwise_aggregate(pointwise_scores(w, c, h_s), y_s, eps).mean()
    tgt = classwise_aggregate(pointwise_scores(w, c, h_t), y_t, eps).mean()
    return src - tgt


def flat_linear(w, c, x):
    return [sum(a * b for a, b in zip(w.ravel(), xi.ravel())) + c for xi in x]


def uncond_critic(w, c, h_s, h_t, lambda_gp):
    return (np.mean(flat_linear(w, c, h_t)) - np.mean(flat_linear(w, c, h_s))
            + lambda_gp * linear_critic_gp(w))


def incond_critic(w_h, w_y, c, h_s, h_t, y_s, y_t, lambda_gp):
    def score(h, y):
        return [sum(a * b for a, b in zip(w_h.ravel(), hi.ravel()))
                + sum(a * b for a, b in zip(w_y.ravel(), yi.ravel())) + c for hi, yi in zip(h, y)]
    w = np.mean(score(h_t, y_t)) - np.mean(score(h_s, y_s))
    return w + lambda_gp * linear_critic_gp(w_h)


def iou_counts(pred, target, class_id):
    tp = fp = fn = 0
    for i in range(pred.shape[0]):
        for y in range(pred.shape[-2]):
            for x in range(pred.shape[-1]):
                p = bool(pred[i, ..., y, x].item()) if pred.ndim > 3 else bool(pred[i, y, x])
                t = bool(target[i, ..., y, x].item()) if target.ndim > 3 else bool(target[i, y, x])
                if class_id == 0:
                    p, t = not p, not t
                tp += p and t
                fp += p and not t
                fn += t and not p
    return tp, fp, fn


def iou(pred, target, class_id):
    tp, fp, fn = iou_counts(pred, target, class_id)
    return 1.0 if tp + fp + fn == 0 else tp / (tp + fp + fn)
