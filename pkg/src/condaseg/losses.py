"""Training objectives.

Segmentation and per-term losses return scalar tensors. Adversarial pairs
return ``(critic_loss, generator_loss)`` as :class:`LossValue` objects that
carry their named components for the training log.

Gradient penalties interpolate with one ``alpha ~ U[0, 1]`` per sample, drawn
as ``torch.rand(batch, generator=rng)``. Segmentation predictions used to
condition a feature critic are always detached.
"""
from __future__ import annotations

from dataclasses import dataclass, field, fields
from typing import Callable

import torch
import torch.nn.functional as F

EPS = 1e-8
LOG_CLAMP = 1e-12


@dataclass
class LossValue:
    value: torch.Tensor
    components: dict[str, float] = field(default_factory=dict)

    def __float__(self):
        return float(self.value.detach())


def _f(t: torch.Tensor) -> float:
    return float(t.detach())


@dataclass
class LambdaSet:
    rf: float = 1.0
    dom: float = 1.0
    cyc: float = 10.0
    segm: float = 10.0
    dom_f: float = 1.0
    gp: float = 2.0

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"lambda {f.name} must be non-negative")


def _check_same(a: torch.Tensor, b: torch.Tensor):
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


# --------------------------------------------------------------------------- segmentation

def soft_iou_loss(pred: torch.Tensor, target: torch.Tensor, eps: float = EPS) -> torch.Tensor:
    """Batch mean of ``1 - sum(p*y) / (sum(p + y - p*y) + eps)``."""
    _check_same(pred, target)
    dims = tuple(range(1, pred.ndim))
    inter = (pred * target).sum(dims)
    union = (pred + target - pred * target).sum(dims)
    return (1.0 - inter / (union + eps)).mean()


def pixel_ce_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Per-class binary cross-entropy averaged over batch, classes and pixels."""
    _check_same(pred, target)
    pos = torch.log(pred.clamp_min(LOG_CLAMP))
    neg = torch.log((1.0 - pred).clamp_min(LOG_CLAMP))
    return -(target * pos + (1.0 - target) * neg).mean()


# --------------------------------------------------------------------------- translation

def lsgan_d_loss(real_scores: torch.Tensor, fake_scores: torch.Tensor) -> torch.Tensor:
    if real_scores.numel() == 0 or fake_scores.numel() == 0:
        raise ValueError("empty batch")
    return ((real_scores - 1) ** 2).mean() + (fake_scores ** 2).mean()


def lsgan_g_loss(fake_scores: torch.Tensor) -> torch.Tensor:
    if fake_scores.numel() == 0:
        raise ValueError("empty batch")
    return ((fake_scores - 1) ** 2).mean()


def cycle_loss(original: torch.Tensor, reconstructed: torch.Tensor) -> torch.Tensor:
    _check_same(original, reconstructed)
    return (original - reconstructed).abs().mean()


def interpolation_weights(batch: int, rng: torch.Generator | None, like: torch.Tensor) -> torch.Tensor:
    """Per-sample alpha broadcastable against ``like``."""
    alpha = torch.rand(batch, generator=rng, dtype=like.dtype)
    return alpha.to(like.device).view(batch, *([1] * (like.ndim - 1)))


def _per_sample_grad_norm(out: torch.Tensor, wrt: torch.Tensor) -> torch.Tensor:
    (grad,) = torch.autograd.grad(out.sum(), wrt, create_graph=True, allow_unused=True)
    if grad is None:
        return torch.zeros(wrt.shape[0], dtype=wrt.dtype, device=wrt.device)
    # sqrt of a clamped square keeps the second derivative finite at zero gradient.
    return grad.flatten(1).pow(2).sum(1).clamp_min(1e-24).sqrt()


def _scalar_per_sample(out: torch.Tensor, batch: int) -> torch.Tensor:
    if out.shape not in ((batch,), (batch, 1)):
        raise ValueError(f"critic must return one scalar per sample, got {tuple(out.shape)}")
    return out.reshape(batch)


def gradient_penalty(critic_fn: Callable[[torch.Tensor], torch.Tensor], real: torch.Tensor,
                     fake: torch.Tensor, rng: torch.Generator | None = None) -> torch.Tensor:
    """Mean of ``(||d critic(x_hat) / d x_hat||_2 - 1)^2`` on real/fake interpolates."""
    _check_same(real, fake)
    b = real.shape[0]
    alpha = interpolation_weights(b, rng, real)
    x_hat = (alpha * real.detach() + (1 - alpha) * fake.detach()).requires_grad_(True)
    out = _scalar_per_sample(critic_fn(x_hat), b)
    return ((_per_sample_grad_norm(out, x_hat) - 1) ** 2).mean()


def wgan_rf_losses(critic: Callable[[torch.Tensor], torch.Tensor], real: torch.Tensor,
                   fake: torch.Tensor, lambda_gp: float = 10.0,
                   rng: torch.Generator | None = None) -> tuple[LossValue, LossValue]:
    real_s = critic(real).mean()
    fake_d = critic(fake.detach()).mean()
    gp = gradient_penalty(critic, real, fake, rng)
    d = fake_d - real_s + lambda_gp * gp
    g = -critic(fake).mean()
    return (LossValue(d, {"wasserstein": _f(fake_d - real_s), "gp": _f(gp)}),
            LossValue(g, {"rf_g": _f(g)}))


def domain_cls_losses(dom_logits_real: torch.Tensor, true_domains: torch.Tensor,
                      dom_logits_translated: torch.Tensor,
                      target_domains: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Softmax cross-entropy of the domain head: real vs. true label, fake vs. intended label."""
    d = F.cross_entropy(dom_logits_real, true_domains.long())
    g = F.cross_entropy(dom_logits_translated, target_domains.long())
    return d, g


# --------------------------------------------------------------------------- feature matching

def classwise_aggregate(score_map: torch.Tensor, seg_pred: torch.Tensor,
                        eps: float = EPS) -> torch.Tensor:
    """Per-class weighted mean of a score map: (B, 2) as [background, digit].

    The digit weight is the predicted probability, the background weight its
    complement. ``seg_pred`` is treated as a constant.
    """
    if score_map.shape != seg_pred.shape or score_map.shape[1] != 1:
        raise ValueError(f"score map {tuple(score_map.shape)} and prediction "
                         f"{tuple(seg_pred.shape)} must both be (B, 1, H, W)")
    fg = seg_pred.detach().flatten(1)
    w = torch.stack([1.0 - fg, fg], dim=1)  # (B, 2, P)
    d = score_map.flatten(1).unsqueeze(1)
    return (w * d).sum(-1) / (w.sum(-1) + eps)


def _pair(*tensors):
    n = min(t.shape[0] for t in tensors if t is not None)
    return [t[:n] if t is not None else None for t in tensors]


def outcond_critic_loss(df, h_s, h_t, yhat_s, yhat_t, lambda_gp: float = 2.0,
                        rng: torch.Generator | None = None) -> LossValue:
    h_s, h_t, yhat_s, yhat_t = _pair(h_s.detach(), h_t.detach(), yhat_s.detach(), yhat_t.detach())
    src = classwise_aggregate(df(h_s), yhat_s).mean()
    tgt = classwise_aggregate(df(h_t), yhat_t).mean()
    b = h_s.shape[0]
    alpha = interpolation_weights(b, rng, h_s)
    h_bar = (alpha * h_s + (1 - alpha) * h_t).requires_grad_(True)
    y_bar = alpha * yhat_s + (1 - alpha) * yhat_t
    scores = classwise_aggregate(df(h_bar), y_bar)
    norms = torch.stack([_per_sample_grad_norm(scores[:, c], h_bar)
                         for c in range(scores.shape[1])], dim=1)
    gp = ((norms - 1) ** 2).mean()
    value = tgt - src + lambda_gp * gp
    return LossValue(value, {"wasserstein": _f(tgt - src), "gp": _f(gp)})


def outcond_encoder_loss(df, h_s, h_t, yhat_s, yhat_t) -> torch.Tensor:
    h_s, h_t, yhat_s, yhat_t = _pair(h_s, h_t, yhat_s.detach(), yhat_t.detach())
    return classwise_aggregate(df(h_s), yhat_s).mean() - classwise_aggregate(df(h_t), yhat_t).mean()


def featmatch_outcond_losses(df, h_s, h_t, yhat_s, yhat_t, lambda_gp: float = 2.0,
                             rng: torch.Generator | None = None) -> tuple[LossValue, LossValue]:
    d = outcond_critic_loss(df, h_s, h_t, yhat_s, yhat_t, lambda_gp, rng)
    g = outcond_encoder_loss(df, h_s, h_t, yhat_s, yhat_t)
    return d, LossValue(g, {"feat_g": _f(g)})


def uncond_critic_loss(df, h_s, h_t, lambda_gp: float = 5.0,
                       rng: torch.Generator | None = None) -> LossValue:
    h_s, h_t = _pair(h_s.detach(), h_t.detach())
    w = df(h_t).mean() - df(h_s).mean()
    gp = gradient_penalty(df, h_s, h_t, rng)
    return LossValue(w + lambda_gp * gp, {"wasserstein": _f(w), "gp": _f(gp)})


def uncond_encoder_loss(df, h_s, h_t) -> torch.Tensor:
    h_s, h_t = _pair(h_s, h_t)
    return df(h_s).mean() - df(h_t).mean()


def featmatch_uncond_losses(df, h_s, h_t, lambda_gp: float = 5.0,
                            rng: torch.Generator | None = None) -> tuple[LossValue, LossValue]:
    d = uncond_critic_loss(df, h_s, h_t, lambda_gp, rng)
    g = uncond_encoder_loss(df, h_s, h_t)
    return d, LossValue(g, {"feat_g": _f(g)})


def incond_critic_loss(df, h_s, h_t, yhat_s, yhat_t, lambda_gp: float = 1.0,
                       rng: torch.Generator | None = None) -> LossValue:
    h_s, h_t, yhat_s, yhat_t = _pair(h_s.detach(), h_t.detach(), yhat_s.detach(), yhat_t.detach())
    w = df(h_t, yhat_t).mean() - df(h_s, yhat_s).mean()
    b = h_s.shape[0]
    alpha = interpolation_weights(b, rng, h_s)
    h_bar = (alpha * h_s + (1 - alpha) * h_t).requires_grad_(True)
    y_bar = alpha * yhat_s + (1 - alpha) * yhat_t
    out = _scalar_per_sample(df(h_bar, y_bar), b)
    gp = ((_per_sample_grad_norm(out, h_bar) - 1) ** 2).mean()
    return LossValue(w + lambda_gp * gp, {"wasserstein": _f(w), "gp": _f(gp)})


def incond_encoder_loss(df, h_s, h_t, yhat_s, yhat_t) -> torch.Tensor:
    h_s, h_t, yhat_s, yhat_t = _pair(h_s, h_t, yhat_s.detach(), yhat_t.detach())
    return df(h_s, yhat_s).mean() - df(h_t, yhat_t).mean()


def featmatch_incond_losses(df, h_s, h_t, yhat_s, yhat_t, lambda_gp: float = 1.0,
                            rng: torch.Generator | None = None) -> tuple[LossValue, LossValue]:
    d = incond_critic_loss(df, h_s, h_t, yhat_s, yhat_t, lambda_gp, rng)
    g = incond_encoder_loss(df, h_s, h_t, yhat_s, yhat_t)
    return d, LossValue(g, {"feat_g": _f(g)})


# --------------------------------------------------------------------------- composition

_TRANSLATION_TERMS = ("rf_g", "dom_g", "cyc")


def compose_objectives(variant: str, lambdas: LambdaSet,
                       parts: dict[str, torch.Tensor]) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Weighted sums for the {G, S}, D and D_f optimizers.

    ``parts`` keys: rf_g, dom_g, cyc, segm, feat_g (generator side),
    rf_d, dom_d (image critic), feat_d (feature critic). Missing keys count as 0.
    """
    known = ("fcn", "sgan_s", "uncond", "in_cond", "out_cond")
    if variant not in known:
        raise ValueError(f"unknown variant {variant!r}")
    zero = torch.zeros(())
    p = {k: parts.get(k, zero) for k in ("rf_g", "dom_g", "cyc", "segm", "feat_g",
                                          "rf_d", "dom_d", "feat_d")}
    gs = lambdas.segm * p["segm"]
    if variant == "fcn":
        return gs, zero, zero
    gs = gs + lambdas.rf * p["rf_g"] + lambdas.dom * p["dom_g"] + lambdas.cyc * p["cyc"]
    d = lambdas.rf * p["rf_d"] + lambdas.dom * p["dom_d"]
    if variant == "sgan_s":
        return gs, d, zero
    return gs + lambdas.dom_f * p["feat_g"], d, p["feat_d"]
