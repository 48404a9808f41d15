"""Acceptance criteria, one test each; every test prints a PASS/FAIL line.

Slow criteria (full datasets, network training) carry the ``slow`` marker;
the multi-seed adaptation comparison is a ``manual`` job that reads the
report written by ``condaseg report`` and skips when it has not been run.
"""
from __future__ import annotations

import json
import math
import os
import statistics
from pathlib import Path

import numpy as np
import pytest
import torch
import torch.nn as nn

from condaseg import evaluation as E
from condaseg import losses as L
from condaseg import nets as N
from condaseg import training as T
from condaseg.config import default_config, smoke_config
from condaseg.data import DatasetManifest, build_dataset, data_root, foreground_stats

import oracles
from conftest import tiny_config

CASES = 200
ORACLE_TOL = 1e-5
FD_TOL = 1e-3

# Reduced-budget FCN runs for the source upper bound (full schedule is 500 epochs on 50k).
FCN_TRAIN_LIMIT = 8000
FCN_EPOCHS = 4


# --------------------------------------------------------------------------- 1

def test_criterion_01_parameter_ratio(verdict):
    table = E.param_table(N.reference_translation_nets())
    print(table.to_text())
    deltas = {r["network"]: r["delta"] for r in table.rows if r["delta"]}
    verdict(1, 0.48 <= table.ratio <= 0.55,
            f"StarGAN/CycleGAN parameter ratio {table.ratio:.4f} in [0.48, 0.55]; "
            f"nonzero deltas vs reference counts: {deltas}")


# --------------------------------------------------------------------------- 2

@pytest.mark.slow
def test_criterion_02_foreground_fractions(verdict, mnist_root):
    means = {}
    for name in ("mnist", "mnist_thin"):
        manifest = build_dataset(name, mnist_root=mnist_root, splits=("train",))["train"]
        means[name] = foreground_stats(manifest).mean
    ok = 0.037 <= means["mnist_thin"] <= 0.067 and 0.136 <= means["mnist"] <= 0.156
    verdict(2, ok, f"mean foreground: MNIST-thin {means['mnist_thin']:.4%} in [3.7%, 6.7%], "
                   f"MNIST {means['mnist']:.4%} in [13.6%, 15.6%] (50k train split each)")


# --------------------------------------------------------------------------- 3

@pytest.mark.slow
def test_criterion_03_fcn_source_upper_bound(verdict, mnist_root, tmp_path):
    results = {}
    for name, floor in (("fcn", 0.995), ("fcn_target", 0.99)):
        cfg = default_config(name, str(tmp_path))
        for ds in {cfg.source, cfg.target}:
            build_dataset(ds, mnist_root=mnist_root)
        cfg.train_limit, cfg.val_limit = FCN_TRAIN_LIMIT, 1000
        cfg.max_epochs = cfg.patience = FCN_EPOCHS
        T.train_fcn(cfg)
        report = E.evaluate_segmenter(Path(cfg.output_dir) / "best.ckpt",
                                      data_root() / cfg.source / "test", "fcn")
        results[name] = (report, floor)
    ok = all(r.miou >= floor for r, floor in results.values())
    detail = "; ".join(f"{'MNIST-thin' if n == 'fcn' else 'MNIST-M'} test mIoU {r.miou:.4f} "
                       f"(>= {floor}, {r.n_samples} images)" for n, (r, floor) in results.items())
    verdict(3, ok, f"{detail}; {FCN_TRAIN_LIMIT} training images x {FCN_EPOCHS} epochs")


# --------------------------------------------------------------------------- 4

@pytest.mark.manual
def test_criterion_04_adaptation_ordering(verdict):
    path = Path(os.environ.get("CONDASEG_DA_REPORT", "reports/results_by_seed.json"))
    if not path.exists():
        verdict.skip(4, f"manual job: no multi-seed report at {path} "
                        "(train + eval every variant for 3 seeds, then `condaseg report`)")
    summary = json.loads(path.read_text())
    needed = ("fcn", "sgan_s", "uncond", "in_cond", "out_cond")
    missing = [v for v in needed if v not in summary or len(summary[v]["target_miou"]) < 3]
    if missing:
        verdict.skip(4, f"manual job incomplete: fewer than 3 seeds for {missing}")
    med = {v: statistics.median(summary[v]["target_miou"]) for v in needed}
    ok = (med["out_cond"] > med["uncond"] > med["sgan_s"] > med["fcn"]
          and med["out_cond"] >= 0.79 and med["in_cond"] < med["out_cond"])
    verdict(4, ok, "median target mIoU " + ", ".join(f"{v} {m:.3f}" for v, m in med.items()))


# --------------------------------------------------------------------------- 5

def _shape(rng):
    return (int(rng.integers(1, 3)), int(rng.integers(1, 3)), int(rng.integers(1, 5)), int(rng.integers(1, 5)))


def _t(a):
    return torch.tensor(a, dtype=torch.float64)


class _Pointwise(nn.Module):
    """1x1 linear score map: its input gradient is known in closed form."""

    def __init__(self, w, c):
        super().__init__()
        self.w, self.c = _t(w), float(c)

    def forward(self, h):
        return torch.einsum("bchw,c->bhw", h, self.w)[:, None] + self.c


class _Flat(nn.Module):
    def __init__(self, w, c, w_y=None):
        super().__init__()
        self.w, self.c = _t(w), float(c)
        self.w_y = None if w_y is None else _t(w_y)

    def forward(self, h, y=None):
        out = h.flatten(1) @ self.w.flatten() + self.c
        if y is not None:
            out = out + y.flatten(1) @ self.w_y.flatten()
        return out[:, None]


def _oracle_cases(rng):
    """Yield (loss name, implementation value, oracle value) for one random instance."""
    b, c, h, w = _shape(rng)
    shape = (b, c, h, w)
    p, y = rng.uniform(0, 1, shape), (rng.uniform(0, 1, shape) > 0.5).astype(float)
    yield "soft_iou", float(L.soft_iou_loss(_t(p), _t(y))), oracles.soft_iou(p, y)
    yield "pixel_ce", float(L.pixel_ce_loss(_t(p), _t(y))), oracles.pixel_ce(p, y)
    real, fake = rng.normal(size=shape), rng.normal(size=shape)
    yield "lsgan_d", float(L.lsgan_d_loss(_t(real), _t(fake))), oracles.lsgan_d(real, fake)
    yield "lsgan_g", float(L.lsgan_g_loss(_t(fake))), oracles.lsgan_g(fake)
    yield "cycle_l1", float(L.cycle_loss(_t(real), _t(fake))), oracles.l1(real, fake)
    logits, labels = rng.normal(size=(b, 2)), rng.integers(0, 2, size=b)
    d, g = L.domain_cls_losses(_t(logits), torch.tensor(labels), _t(logits[::-1].copy()),
                               torch.tensor(1 - labels))
    yield "domain_ce_real", float(d), oracles.cross_entropy(logits, labels)
    yield "domain_ce_translated", float(g), oracles.cross_entropy(logits[::-1], 1 - labels)

    # image critic: WGAN-GP with a linear critic
    wv, cv, lam = rng.normal(size=(c, h, w)), float(rng.normal()), float(rng.uniform(0, 10))
    critic = _Flat(wv, cv)
    seed = int(rng.integers(1 << 30))
    dv, gv = L.wgan_rf_losses(critic, _t(real), _t(fake), lam, torch.Generator().manual_seed(seed))
    yield "wgan_critic", float(dv), oracles.wgan_critic(wv, cv, real, fake, lam)
    yield "wgan_generator", float(gv), oracles.wgan_generator(wv, cv, fake)
    gp = L.gradient_penalty(critic, _t(real), _t(fake), torch.Generator().manual_seed(seed))
    yield "gradient_penalty", float(gp), oracles.linear_critic_gp(wv)

    # feature matching
    score, seg = rng.normal(size=(b, 1, h, w)), rng.uniform(0, 1, (b, 1, h, w))
    agg = L.classwise_aggregate(_t(score), _t(seg)).numpy()
    ref = oracles.classwise_aggregate(score, seg)
    for k in range(2):
        yield f"classwise_aggregate[{k}]", float(np.abs(agg[:, k] - ref[:, k]).max()), 0.0
    h_s, h_t = rng.normal(size=shape), rng.normal(size=shape)
    y_s, y_t = rng.uniform(0, 1, (b, 1, h, w)), rng.uniform(0, 1, (b, 1, h, w))
    wc = rng.normal(size=c)
    pw = _Pointwise(wc, cv)
    alpha = torch.rand(b, generator=torch.Generator().manual_seed(seed), dtype=torch.float64).numpy()
    v = L.outcond_critic_loss(pw, _t(h_s), _t(h_t), _t(y_s), _t(y_t), lam,
                              torch.Generator().manual_seed(seed))
    yield "outcond_critic", float(v.value), oracles.outcond_critic(wc, cv, h_s, h_t, y_s, y_t, alpha, lam)
    v = L.outcond_encoder_loss(pw, _t(h_s), _t(h_t), _t(y_s), _t(y_t))
    yield "outcond_encoder", float(v), oracles.outcond_encoder(wc, cv, h_s, h_t, y_s, y_t)
    v = L.uncond_critic_loss(critic, _t(h_s), _t(h_t), lam, torch.Generator().manual_seed(seed))
    yield "uncond_critic", float(v.value), oracles.uncond_critic(wv, cv, h_s, h_t, lam)
    v = L.uncond_encoder_loss(critic, _t(h_s), _t(h_t))
    yield "uncond_encoder", float(v), -(oracles.uncond_critic(wv, cv, h_s, h_t, 0.0))
    w_y = rng.normal(size=(1, h, w))
    inc = _Flat(wv, cv, w_y)
    v = L.incond_critic_loss(inc, _t(h_s), _t(h_t), _t(y_s), _t(y_t), lam,
                             torch.Generator().manual_seed(seed))
    yield "incond_critic", float(v.value), oracles.incond_critic(wv, w_y, cv, h_s, h_t, y_s, y_t, lam)
    v = L.incond_encoder_loss(inc, _t(h_s), _t(h_t), _t(y_s), _t(y_t))
    yield "incond_encoder", float(v), -oracles.incond_critic(wv, w_y, cv, h_s, h_t, y_s, y_t, 0.0)


def test_criterion_05_loss_oracles(verdict):
    rng = np.random.default_rng(20240501)
    worst: dict[str, float] = {}
    counts: dict[str, int] = {}
    for _ in range(CASES):
        for name, got, want in _oracle_cases(rng):
            worst[name] = max(worst.get(name, 0.0), abs(got - want))
            counts[name] = counts.get(name, 0) + 1
    bad = {k: v for k, v in worst.items() if not v <= ORACLE_TOL}
    verdict(5, not bad and all(n == CASES for n in counts.values()),
            f"{len(worst)} loss operations x {CASES} random cases (<= 2x2x4x4), "
            f"max abs error {max(worst.values()):.2e} <= {ORACLE_TOL}" + (f"; failing {bad}" if bad else ""))


# --------------------------------------------------------------------------- 6

def _fd_check(fn, params, eps=1e-6):
    """Relative error between autograd and central differences over ``params``."""
    grads = torch.autograd.grad(fn(), params, allow_unused=True)
    analytic = torch.cat([(g if g is not None else torch.zeros_like(p)).flatten()
                          for g, p in zip(grads, params)])
    numeric = []
    # the penalties differentiate internally, so perturb through .data instead of no_grad
    for p in params:
        flat = p.data.view(-1)
        for i in range(flat.numel()):
            old = float(flat[i])
            flat[i] = old + eps
            up = float(fn().detach())
            flat[i] = old - eps
            down = float(fn().detach())
            flat[i] = old
            numeric.append((up - down) / (2 * eps))
    numeric = torch.tensor(numeric, dtype=torch.float64)
    scale = max(float(analytic.norm()), float(numeric.norm()), 1e-12)
    return float((analytic - numeric).norm()) / scale


def _small(net):
    return net.double()


def test_criterion_06_finite_differences(verdict):
    torch.manual_seed(0)
    errors = {}

    pred = torch.rand(2, 1, 4, 4, dtype=torch.float64, requires_grad=True)
    target = (torch.rand(2, 1, 4, 4, dtype=torch.float64) > 0.5).double()
    errors["soft_iou"] = _fd_check(lambda: L.soft_iou_loss(pred, target), [pred])

    score = torch.randn(2, 1, 4, 4, dtype=torch.float64, requires_grad=True)
    seg = torch.rand(2, 1, 4, 4, dtype=torch.float64)
    weights = torch.randn(2, 2, dtype=torch.float64)
    errors["classwise_aggregate"] = _fd_check(
        lambda: (L.classwise_aggregate(score, seg) * weights).sum(), [score])

    real, fake = torch.randn(2, 2, 3, 3, dtype=torch.float64), torch.randn(2, 2, 3, 3, dtype=torch.float64)
    img_critic = _small(nn.Sequential(nn.Flatten(), nn.Linear(18, 4), nn.Tanh(), nn.Linear(4, 1)))
    errors["gp_image_critic"] = _fd_check(
        lambda: L.gradient_penalty(img_critic, real, fake, torch.Generator().manual_seed(1)),
        list(img_critic.parameters()))

    h_s, h_t = torch.randn(2, 2, 3, 3, dtype=torch.float64), torch.randn(2, 2, 3, 3, dtype=torch.float64)
    y_s, y_t = torch.rand(2, 1, 3, 3, dtype=torch.float64), torch.rand(2, 1, 3, 3, dtype=torch.float64)
    pointwise = _small(nn.Sequential(nn.Conv2d(2, 3, 1), nn.Tanh(), nn.Conv2d(3, 1, 1)))
    errors["gp_out_conditioned"] = _fd_check(
        lambda: L.outcond_critic_loss(pointwise, h_s, h_t, y_s, y_t, 2.0,
                                      torch.Generator().manual_seed(2)).value,
        list(pointwise.parameters()))
    errors["gp_unconditioned"] = _fd_check(
        lambda: L.uncond_critic_loss(img_critic, h_s, h_t, 5.0, torch.Generator().manual_seed(3)).value,
        list(img_critic.parameters()))

    class InCond(nn.Module):
        def __init__(self):
            super().__init__()
            self.net = nn.Sequential(nn.Linear(27, 3), nn.Tanh(), nn.Linear(3, 1))

        def forward(self, h, y):
            return self.net(torch.cat([h.flatten(1), y.flatten(1)], 1))

    incond = _small(InCond())
    errors["gp_in_conditioned"] = _fd_check(
        lambda: L.incond_critic_loss(incond, h_s, h_t, y_s, y_t, 1.0, torch.Generator().manual_seed(4)).value,
        list(incond.parameters()))

    sizes = {"img": sum(p.numel() for p in img_critic.parameters()),
             "pointwise": sum(p.numel() for p in pointwise.parameters()),
             "incond": sum(p.numel() for p in incond.parameters())}
    assert max(sizes.values()) <= 100
    worst = max(errors.values())
    verdict(6, worst <= FD_TOL,
            f"max relative error {worst:.2e} <= {FD_TOL} over {sorted(errors)}; network sizes {sizes}")


# --------------------------------------------------------------------------- 7

def test_criterion_07_stop_gradient(verdict):
    G = N.build_stargan_generator(seed=1).eval()
    S = N.build_segmenter_decoder(seed=1).eval()
    Df = N.build_feature_disc_outcond(seed=1).eval()
    gen = torch.Generator().manual_seed(7)
    xs, xt = torch.rand(2, 3, 16, 16, generator=gen) * 2 - 1, torch.rand(2, 3, 16, 16, generator=gen) * 2 - 1
    params_g, params_s = list(G.parameters()), list(S.parameters())

    h_s, h_t = G.encode(xs, 0), G.encode(xt, 0)
    loss = L.outcond_encoder_loss(Df, h_s, h_t, S(h_s), S(h_t))
    grads = torch.autograd.grad(loss, params_g + params_s, allow_unused=True)
    g_grads = grads[:len(params_g)]
    s_grads = [torch.zeros_like(p) if g is None else g for g, p in zip(grads[len(params_g):], params_s)]
    s_zero = all(torch.count_nonzero(g) == 0 for g in s_grads)

    h_s2, h_t2 = G.encode(xs, 0), G.encode(xt, 0)
    with torch.no_grad():
        y_s, y_t = S(h_s2), S(h_t2)
    loss2 = (L.classwise_aggregate(Df(h_s2), y_s.detach()).mean()
             - L.classwise_aggregate(Df(h_t2), y_t.detach()).mean())
    ref = torch.autograd.grad(loss2, params_g, allow_unused=True)
    bitwise = all((a is None and b is None) or torch.equal(a, b) for a, b in zip(g_grads, ref))
    nonzero = sum(int(torch.count_nonzero(g)) for g in g_grads if g is not None)
    verdict(7, s_zero and bitwise and nonzero > 0,
            f"all {len(params_s)} segmenter gradients exactly 0; {len(params_g)} encoder gradients "
            f"bitwise equal to the detached recomputation ({nonzero} nonzero entries)")


# --------------------------------------------------------------------------- 8

@pytest.mark.slow
def test_criterion_08_leakage_guard(verdict, tiny_data, tmp_path):
    cfg = smoke_config("out_cond", str(tmp_path))
    cfg.data_root = str(tiny_data)
    state = T.train_da(cfg)
    audit = json.loads((Path(cfg.output_dir) / "audit.json").read_text())
    ok = audit["target_mask_reads"] == [] and audit["target_files_read"] > 0 and state.global_step > 0
    verdict(8, ok, f"smoke out_cond run: {state.global_step} iterations, "
                   f"{audit['target_files_read']} target image reads, "
                   f"{len(audit['target_mask_reads'])} target mask reads")


# --------------------------------------------------------------------------- 9

def _step_losses(cfg):
    lines = (Path(cfg.output_dir) / "train_log.jsonl").read_text().splitlines()
    return [json.loads(line) for line in lines]


@pytest.mark.slow
def test_criterion_09_determinism_and_resume(verdict, tiny_data, tmp_path):
    def cfg(tag):
        return tiny_config("out_cond", tiny_data, tmp_path / tag, train_limit=20, batch_size=4,
                           val_limit=8, max_epochs=2, patience=2)

    a, b, c = cfg("a"), cfg("b"), cfg("c")
    T.train_da(a)
    T.train_da(b)
    T.train_da(c, stop_after=1)
    resumed = T.checkpoint_load(Path(c.output_dir) / "last.ckpt")
    T.train_da(c, resume=True)
    log_a, log_b, log_c = _step_losses(a), _step_losses(b), _step_losses(c)
    steps = sorted({r["step"] for r in log_a if r["phase"] == "generator"})
    first10 = [r for r in log_a if r["step"] < 10]
    ok = (len(steps) >= 10 and first10 == [r for r in log_b if r["step"] < 10]
          and log_a == log_b and log_c == log_a and resumed.epoch == 1)
    verdict(9, ok, f"{len(steps)} iterations ({len(log_a)} log records) identical across two runs; "
                   f"resume from epoch {resumed.epoch} reproduces the uninterrupted log exactly")


# --------------------------------------------------------------------------- 10

@pytest.mark.slow
def test_criterion_10_stargan_smoke(verdict, tiny_data, tmp_path):
    cfg = smoke_config("stargan_translate", str(tmp_path))
    cfg.data_root = str(tiny_data)
    state = T.train_stargan_translation(cfg)
    val_s = T.open_split(cfg, cfg.source, "val", masks_allowed=False, limit=cfg.val_limit)
    val_t = T.open_split(cfg, cfg.target, "val", masks_allowed=False, limit=cfg.val_limit)
    xs, _ = val_s.batch(range(len(val_s)), masks=False)
    xt, _ = val_t.batch(range(len(val_t)), masks=False)
    acc = T.domain_accuracy(state.nets["D"], [(xs, T.SOURCE), (xt, T.TARGET)])
    gallery = E.translation_gallery(Path(cfg.output_dir) / "last.ckpt",
                                    DatasetManifest.load(tiny_data / "mnist" / "val"),
                                    DatasetManifest.load(tiny_data / "mnist_m" / "val"), 10,
                                    tmp_path / "gallery.png")
    ok = acc > 0.9 and gallery.exists() and gallery.stat().st_size > 0
    verdict(10, ok, f"domain head accuracy {acc:.3f} > 0.9 on {len(xs) + len(xt)} real validation "
                    f"images after {state.global_step} iterations; gallery rendered ({gallery.name})")
