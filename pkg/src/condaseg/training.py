"""Training loops for the segmentation baseline, the two translators and the adaptation variants.

Every trainer follows the same session protocol:

* ``output_dir/config.json`` echoes the config,
* ``output_dir/train_log.jsonl`` gets one JSON record per step phase,
* ``output_dir/last.ckpt`` is written after every epoch and ``best.ckpt``
  whenever the validation loss strictly improves,
* ``resume=True`` continues from ``last.ckpt`` and reproduces the loss
  sequence an uninterrupted run would have produced.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import losses as L
from .checkpoint import load_into, read_archive, write_archive
from .config import DA_VARIANTS, ExperimentConfig, OptimSpec
from .data import (DatasetManifest, SegDataset, batch_iterator, cycling_indices, data_root)
from .nets import ARCHITECTURES
from .seeding import derive_seed, torch_generator

SOURCE, TARGET = 0, 1


class DatasetMissing(FileNotFoundError):
    """A dataset split required by the config has not been built."""


# --------------------------------------------------------------------------- schedules

def lr_schedule(spec: OptimSpec, step: int, epoch: int) -> float:
    """Exponentially decayed learning rate after ``step`` iterations / ``epoch`` epochs."""
    if spec.decay_interval == "per_epoch":
        k = epoch
    elif spec.decay_interval == "per_n_iterations":
        k = step // spec.decay_iterations
    else:
        k = 0
    return spec.learning_rate * spec.decay_factor ** k


@dataclass(frozen=True)
class StopDecision:
    stop: bool
    is_best: bool
    epochs_since_best: int


def early_stopper(history: list[float], patience: int) -> StopDecision:
    """Judge the latest entry of ``history`` (validation losses, one per epoch).

    Ties never count as improvement, so the earliest minimum is the best.
    """
    if not history:
        return StopDecision(False, False, 0)
    best = int(np.argmin(history))
    since = len(history) - 1 - best
    return StopDecision(since > patience, best == len(history) - 1, since)


# --------------------------------------------------------------------------- model assembly

def network_specs(config: ExperimentConfig) -> tuple[dict[str, tuple[str, dict]], dict[str, list[str]]]:
    """(name -> (architecture id, builder kwargs)) and (optimizer group -> network names)."""
    c, r, s, p = config.image_channels, config.resolution, config.seed, config.dropout
    v = config.variant
    if v == "fcn":
        return ({"fcn": ("fcn", dict(in_channels=c, resolution=r, dropout=p, seed=s))},
                {"segmenter": ["fcn"]})
    if v == "cyclegan_translate":
        specs = {name: ("cyclegan_G", dict(image_channels=c, seed=s, stream=name))
                 for name in ("G_ab", "G_ba")}
        specs.update({name: ("cyclegan_D", dict(image_channels=c, resolution=r, seed=s, stream=name))
                      for name in ("D_a", "D_b")})
        return specs, {"generator": ["G_ab", "G_ba"], "critic": ["D_a", "D_b"]}
    specs = {"G": ("stargan_G", dict(image_channels=c, dropout=p, seed=s)),
             "D": ("stargan_D", dict(image_channels=c, resolution=r, dropout=p, seed=s))}
    groups = {"generator": ["G"], "critic": ["D"]}
    if v == "stargan_translate":
        return specs, groups
    if v not in DA_VARIANTS:
        raise ValueError(f"unknown variant {v!r}")
    specs["S"] = ("segmenter", dict(feature_channels=128, dropout=p, seed=s))
    groups["generator"].append("S")
    if v != "sgan_s":
        specs["D_f"] = (f"D_f_{v}", dict(feature_channels=128, dropout=p, seed=s))
        groups["feature_critic"] = ["D_f"]
    return specs, groups


def _optimizer(config: ExperimentConfig, group: str, nets: dict[str, nn.Module],
               names: list[str]) -> torch.optim.Adam:
    spec = config.optimizer[group]
    params = [q for n in names for q in nets[n].parameters()]
    return torch.optim.Adam(params, lr=spec.learning_rate, betas=(spec.beta1, spec.beta2))


@dataclass
class TrainState:
    config: ExperimentConfig
    nets: dict[str, nn.Module]
    optimizers: dict[str, torch.optim.Adam]
    specs: dict[str, tuple[str, dict]]
    groups: dict[str, list[str]]
    epoch: int = 0
    global_step: int = 0
    best_val_metric: float = math.inf
    epochs_since_improvement: int = 0
    history: list[float] = field(default_factory=list)
    torch_rng: torch.Tensor | None = None
    gp_rng: torch.Tensor | None = None
    finished: bool = False


def init_state(config: ExperimentConfig) -> TrainState:
    specs, groups = network_specs(config)
    for group in groups:
        if group not in config.optimizer:
            raise ValueError(f"config has no optimizer settings for group {group!r}")
    nets = {name: ARCHITECTURES[arch](**args) for name, (arch, args) in specs.items()}
    opts = {g: _optimizer(config, g, nets, names) for g, names in groups.items()}
    torch_rng = torch.Generator().manual_seed(derive_seed(config.seed, "dropout")).get_state()
    gp_rng = torch_generator(config.seed, "gp").get_state()
    return TrainState(config, nets, opts, specs, groups, torch_rng=torch_rng, gp_rng=gp_rng)


def checkpoint_save(state: TrainState, path: str | Path) -> None:
    arrays: dict[str, object] = {}
    for name, net in state.nets.items():
        for k, v in net.state_dict().items():
            arrays[f"net/{name}/{k}"] = v
    opt_groups = {}
    for g, opt in state.optimizers.items():
        sd = opt.state_dict()
        for idx, st in sd["state"].items():
            for k, v in st.items():
                arrays[f"opt/{g}/{idx:04d}/{k}"] = v
        opt_groups[g] = sd["param_groups"]
    arrays["rng/torch"] = state.torch_rng
    arrays["rng/gp"] = state.gp_rng
    header = {
        "kind": "train_state",
        "config": state.config.to_dict(),
        "specs": {k: list(v) for k, v in state.specs.items()},
        "groups": state.groups,
        "optimizer_groups": opt_groups,
        "counters": {"epoch": state.epoch, "global_step": state.global_step,
                     "best_val_metric": state.best_val_metric,
                     "epochs_since_improvement": state.epochs_since_improvement,
                     "finished": state.finished},
        "history": state.history,
    }
    write_archive(path, header, arrays)


def checkpoint_load(path: str | Path) -> TrainState:
    header, arrays = read_archive(path)
    if header.get("kind") != "train_state":
        raise ValueError(f"{path} is not a training checkpoint")
    config = ExperimentConfig.from_dict(header["config"])
    specs = {k: (v[0], v[1]) for k, v in header["specs"].items()}
    nets = {}
    for name, (arch, args) in specs.items():
        nets[name] = ARCHITECTURES[arch](**args)
        load_into(nets[name], arrays, f"net/{name}/")
    groups = header["groups"]
    opts = {}
    for g, names in groups.items():
        opt = _optimizer(config, g, nets, names)
        per_param: dict[int, dict] = {}
        for key, value in arrays.items():
            if key.startswith(f"opt/{g}/"):
                _, _, idx, k = key.split("/")
                per_param.setdefault(int(idx), {})[k] = torch.from_numpy(np.array(value))
        opt.load_state_dict({"state": per_param, "param_groups": header["optimizer_groups"][g]})
        opts[g] = opt
    c = header["counters"]
    return TrainState(config, nets, opts, specs, groups, epoch=c["epoch"],
                      global_step=c["global_step"], best_val_metric=c["best_val_metric"],
                      epochs_since_improvement=c["epochs_since_improvement"],
                      history=list(header["history"]),
                      torch_rng=torch.from_numpy(np.array(arrays["rng/torch"])),
                      gp_rng=torch.from_numpy(np.array(arrays["rng/gp"])),
                      finished=c.get("finished", False))


# --------------------------------------------------------------------------- data access

def open_split(config: ExperimentConfig, name: str, split: str, *, masks_allowed: bool = True,
               limit: int | None = None) -> SegDataset:
    root = Path(config.data_root) if config.data_root else data_root()
    try:
        manifest = DatasetManifest.load(root / name / split)
    except FileNotFoundError as exc:
        raise DatasetMissing(f"dataset {name}/{split} not built under {root} "
                             f"(run `condaseg data`)") from exc
    if manifest.resolution != config.resolution:
        raise DatasetMissing(f"dataset {name}/{split} has resolution {manifest.resolution}, "
                             f"config wants {config.resolution}")
    return SegDataset(manifest, limit=limit, masks_allowed=masks_allowed,
                      channels=config.image_channels)


def _target_batch(ds: SegDataset, n: int, batch_size: int, seed: int, step: int) -> torch.Tensor:
    idx = cycling_indices(len(ds), batch_size, derive_seed(seed, "shuffle/target"), step)[:n]
    x, _ = ds.batch(idx, masks=False)
    return x


# --------------------------------------------------------------------------- session

class _Session:
    """Output directory, step log, checkpoints and the epoch/early-stopping loop."""

    def __init__(self, config: ExperimentConfig, resume: bool):
        self.out = Path(config.output_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        self.log_path = self.out / "train_log.jsonl"
        last = self.out / "last.ckpt"
        if resume and last.exists():
            state = checkpoint_load(last)
            state.config = config
            self._truncate_log(state.epoch)
        else:
            state = init_state(config)
            self.log_path.write_text("")
        config.save(self.out / "config.json")
        self.state = state
        self.gp_rng = torch.Generator()
        self.gp_rng.set_state(state.gp_rng)
        torch.set_rng_state(state.torch_rng)

    def _truncate_log(self, epoch: int) -> None:
        if not self.log_path.exists():
            return
        keep = [line for line in self.log_path.read_text().splitlines()
                if line and json.loads(line)["epoch"] < epoch]
        self.log_path.write_text("".join(line + "\n" for line in keep))

    def lrs(self) -> dict[str, float]:
        st = self.state
        return {g: lr_schedule(st.config.optimizer[g], st.global_step, st.epoch)
                for g in st.optimizers}

    def apply_lrs(self) -> dict[str, float]:
        lrs = self.lrs()
        for g, opt in self.state.optimizers.items():
            for pg in opt.param_groups:
                pg["lr"] = lrs[g]
        return lrs

    def log(self, phase: str, components: dict[str, float], **extra) -> None:
        rec = {"step": self.state.global_step, "epoch": self.state.epoch, "phase": phase,
               **extra, "components": {k: _scalar(v) for k, v in components.items()},
               "lr": self.lrs()}
        with open(self.log_path, "a") as fh:
            fh.write(json.dumps(rec) + "\n")

    def iterations_exhausted(self) -> bool:
        cap = self.state.config.max_iterations
        return cap is not None and self.state.global_step >= cap

    def end_epoch(self, val_loss: float, extra: dict | None = None) -> bool:
        """Record validation, write checkpoints; return True when training should stop."""
        st = self.state
        st.history.append(float(val_loss))
        decision = early_stopper(st.history, st.config.patience)
        st.epochs_since_improvement = decision.epochs_since_best
        self.log("val", {"val_loss": val_loss, **(extra or {})})
        st.epoch += 1
        st.torch_rng = torch.get_rng_state()
        st.gp_rng = self.gp_rng.get_state()
        stop = decision.stop or st.epoch >= st.config.max_epochs or self.iterations_exhausted()
        st.finished = stop
        if decision.is_best:
            st.best_val_metric = float(val_loss)
            checkpoint_save(st, self.out / "best.ckpt")
        checkpoint_save(st, self.out / "last.ckpt")
        return stop

    def run(self, epoch_fn, val_fn, stop_after: int | None) -> TrainState:
        """Drive epochs until done; ``stop_after`` simulates an interruption after N epochs."""
        st = self.state
        ran = 0
        while not st.finished and st.epoch < st.config.max_epochs and not self.iterations_exhausted():
            for m in st.nets.values():
                m.train()
            epoch_fn()
            for m in st.nets.values():
                m.eval()
            with torch.no_grad():
                val, extra = val_fn()
            if self.end_epoch(val, extra):
                break
            ran += 1
            if stop_after is not None and ran >= stop_after:
                break
        for m in st.nets.values():
            m.eval()
        return st


def _scalar(v) -> float:
    return float(v.detach()) if isinstance(v, torch.Tensor) else float(v)


def _set_requires_grad(nets, flag: bool) -> None:
    for net in nets:
        for p in net.parameters():
            p.requires_grad_(flag)


# --------------------------------------------------------------------------- FCN

def train_fcn(config: ExperimentConfig, resume: bool = False,
              stop_after: int | None = None) -> TrainState:
    """Source-only segmenter trained with the soft-IoU loss."""
    if config.variant != "fcn":
        raise ValueError(f"train_fcn needs variant 'fcn', got {config.variant!r}")
    train = open_split(config, config.source, "train", limit=config.train_limit)
    val = open_split(config, config.source, "val", limit=config.val_limit)
    session = _Session(config, resume)
    st = session.state
    net, opt = st.nets["fcn"], st.optimizers["segmenter"]
    shuffle = derive_seed(config.seed, "shuffle/source")

    def epoch_fn():
        for x, y in batch_iterator(train, config.batch_size, shuffle, st.epoch):
            session.apply_lrs()
            segm = L.soft_iou_loss(net(x), y)
            loss, _, _ = L.compose_objectives("fcn", config.lambdas, {"segm": segm})
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            session.log("segmenter", {"segm": segm})
            st.global_step += 1
            if session.iterations_exhausted():
                break

    def val_fn():
        return _mean_over(val, config.batch_size, lambda x, y: L.soft_iou_loss(net(x), y)), {}

    return session.run(epoch_fn, val_fn, stop_after)


def _mean_over(ds: SegDataset, batch_size: int, fn, masks: bool = True) -> float:
    total, n = 0.0, 0
    for x, y in batch_iterator(ds, max(batch_size, 64), None, 0, masks=masks):
        total += float(fn(x, y)) * x.shape[0]
        n += x.shape[0]
    return total / max(n, 1)


# --------------------------------------------------------------------------- CycleGAN

def train_cyclegan(config: ExperimentConfig, resume: bool = False,
                   stop_after: int | None = None) -> TrainState:
    """Two generators and two least-squares critics, alternating updates."""
    if config.variant != "cyclegan_translate":
        raise ValueError(f"train_cyclegan needs variant 'cyclegan_translate', got {config.variant!r}")
    train_a = open_split(config, config.source, "train", masks_allowed=False, limit=config.train_limit)
    train_b = open_split(config, config.target, "train", masks_allowed=False, limit=config.target_limit)
    val_a = open_split(config, config.source, "val", masks_allowed=False, limit=config.val_limit)
    val_b = open_split(config, config.target, "val", masks_allowed=False, limit=config.val_limit)
    session = _Session(config, resume)
    st = session.state
    n = st.nets
    opt_g, opt_d = st.optimizers["generator"], st.optimizers["critic"]
    lam = config.lambdas
    shuffle = derive_seed(config.seed, "shuffle/source")

    def cycle_pair(xa, xb):
        return L.cycle_loss(xa, n["G_ba"](n["G_ab"](xa))) + L.cycle_loss(xb, n["G_ab"](n["G_ba"](xb)))

    def epoch_fn():
        for xa, _ in batch_iterator(train_a, config.batch_size, shuffle, st.epoch, masks=False):
            xb = _target_batch(train_b, xa.shape[0], config.batch_size, config.seed, st.global_step)
            if st.global_step == 0:
                with torch.no_grad():
                    session.log("init", {"cyc": cycle_pair(xa, xb)})
            session.apply_lrs()
            # generators
            _set_requires_grad([n["D_a"], n["D_b"]], False)
            fake_b, fake_a = n["G_ab"](xa), n["G_ba"](xb)
            adv_ab = L.lsgan_g_loss(n["D_b"](fake_b))
            adv_ba = L.lsgan_g_loss(n["D_a"](fake_a))
            cyc = L.cycle_loss(xa, n["G_ba"](fake_b)) + L.cycle_loss(xb, n["G_ab"](fake_a))
            loss_g = lam.rf * (adv_ab + adv_ba) + lam.cyc * cyc
            opt_g.zero_grad(set_to_none=True)
            loss_g.backward()
            opt_g.step()
            _set_requires_grad([n["D_a"], n["D_b"]], True)
            session.log("generator", {"adv_g_ab": adv_ab, "adv_g_ba": adv_ba, "cyc": cyc})
            # critics
            fake_a, fake_b = fake_a.detach(), fake_b.detach()
            for k in range(config.d_steps_per_g_step):
                d_a = L.lsgan_d_loss(n["D_a"](xa), n["D_a"](fake_a))
                d_b = L.lsgan_d_loss(n["D_b"](xb), n["D_b"](fake_b))
                opt_d.zero_grad(set_to_none=True)
                (d_a + d_b).backward()
                opt_d.step()
                session.log("critic", {"adv_d_a": d_a, "adv_d_b": d_b}, k=k)
            st.global_step += 1
            if config.sample_every and st.global_step % config.sample_every == 0:
                _cyclegan_samples(session, xa[:8], xb[:8])
            if session.iterations_exhausted():
                break

    def val_fn():
        xa, _ = val_a.batch(range(len(val_a)), masks=False)
        xb, _ = val_b.batch(range(len(val_b)), masks=False)
        m = min(len(xa), len(xb))
        return float(cycle_pair(xa[:m], xb[:m])), {}

    return session.run(epoch_fn, val_fn, stop_after)


def _cyclegan_samples(session: _Session, xa, xb) -> None:
    from .evaluation import image_grid, to_raster

    n = session.state.nets
    with torch.no_grad():
        for m in n.values():
            m.eval()
        rows = [("a", xa), ("a->b", n["G_ab"](xa)), ("a->b->a", n["G_ba"](n["G_ab"](xa))),
                ("b", xb), ("b->a", n["G_ba"](xb)), ("b->a->b", n["G_ab"](n["G_ba"](xb)))]
        for m in n.values():
            m.train()
    image_grid([(name, to_raster(t)) for name, t in rows],
               session.out / "samples" / f"step_{session.state.global_step:07d}.png")


# --------------------------------------------------------------------------- StarGAN-based

def _stargan_step(session: _Session, xs, ys, xt, variant: str) -> None:
    """One iteration: ``d_steps_per_g_step`` critic updates, then one {G, S} update."""
    st = session.state
    cfg, lam, n = st.config, st.config.lambdas, st.nets
    G, D, S, Df = n["G"], n["D"], n.get("S"), n.get("D_f")
    opt_gs, opt_d = st.optimizers["generator"], st.optimizers["critic"]
    opt_df = st.optimizers.get("feature_critic")
    b = xs.shape[0]
    src = torch.full((b,), SOURCE, dtype=torch.long)
    tgt = torch.full((xt.shape[0],), TARGET, dtype=torch.long)
    compose_as = variant if variant in DA_VARIANTS else "sgan_s"
    session.apply_lrs()

    # ---- critics: generator-side tensors are constants here
    with torch.no_grad():
        fake = torch.cat([G(xs, tgt), G(xt, src)])
        if Df is not None:
            h_s, h_t = G.encode(xs, src), G.encode(xt, src)
            y_s, y_t = S(h_s), S(h_t)
    real = torch.cat([xs, xt])
    for k in range(cfg.d_steps_per_g_step):
        rf_real, dom_real = D(real)
        rf_fake = D.critic(fake)
        gp = L.gradient_penalty(D.critic, real, fake, session.gp_rng)
        rf_d = rf_fake.mean() - rf_real.mean() + lam.gp * gp
        # one cross-entropy term per domain, summed
        dom_d = F.cross_entropy(dom_real[:b], src) + F.cross_entropy(dom_real[b:], tgt)
        parts = {"rf_d": rf_d, "dom_d": dom_d}
        comps = {"rf_d": rf_d, "d_gp": gp, "dom_d": dom_d}
        if Df is not None:
            feat = _feature_critic_loss(variant, Df, h_s, h_t, y_s, y_t, lam.gp, session.gp_rng)
            parts["feat_d"] = feat.value
            comps.update({"feat_d": feat.value, "feat_gp": feat.components["gp"]})
        _, loss_d, loss_df = L.compose_objectives(compose_as, lam, parts)
        opt_d.zero_grad(set_to_none=True)
        loss_d.backward()
        opt_d.step()
        if Df is not None:
            opt_df.zero_grad(set_to_none=True)
            loss_df.backward()
            opt_df.step()
        session.log("critic", comps, k=k)

    # ---- generator and segmenter
    critics = [m for m in (D, Df) if m is not None]
    _set_requires_grad(critics, False)
    fake_t, fake_s = G(xs, tgt), G(xt, src)
    rf_t, dom_t = D(fake_t)
    rf_s, dom_s = D(fake_s)
    rf_g = -torch.cat([rf_t, rf_s]).mean()
    dom_g = F.cross_entropy(dom_t, tgt) + F.cross_entropy(dom_s, src)
    cyc = L.cycle_loss(xs, G(fake_t, src)) + L.cycle_loss(xt, G(fake_s, tgt))
    parts = {"rf_g": rf_g, "dom_g": dom_g, "cyc": cyc}
    if S is not None:
        h_s = G.encode(xs, src)
        y_s = S(h_s)
        parts["segm"] = L.soft_iou_loss(y_s, ys)
        if Df is not None:
            h_t = G.encode(xt, src)
            parts["feat_g"] = _feature_encoder_loss(variant, Df, h_s, h_t, y_s, S(h_t))
    loss_gs, _, _ = L.compose_objectives(compose_as, lam, parts)
    opt_gs.zero_grad(set_to_none=True)
    loss_gs.backward()
    opt_gs.step()
    _set_requires_grad(critics, True)
    session.log("generator", parts)
    st.global_step += 1


def _feature_critic_loss(variant, df, h_s, h_t, y_s, y_t, lambda_gp, rng) -> L.LossValue:
    if variant == "out_cond":
        return L.outcond_critic_loss(df, h_s, h_t, y_s, y_t, lambda_gp, rng)
    if variant == "in_cond":
        return L.incond_critic_loss(df, h_s, h_t, y_s, y_t, lambda_gp, rng)
    return L.uncond_critic_loss(df, h_s, h_t, lambda_gp, rng)


def _feature_encoder_loss(variant, df, h_s, h_t, y_s, y_t) -> torch.Tensor:
    if variant == "out_cond":
        return L.outcond_encoder_loss(df, h_s, h_t, y_s, y_t)
    if variant == "in_cond":
        return L.incond_encoder_loss(df, h_s, h_t, y_s, y_t)
    return L.uncond_encoder_loss(df, h_s, h_t)


def domain_accuracy(D: nn.Module, batches: list[tuple[torch.Tensor, int]]) -> float:
    """Fraction of real images whose domain head picks the true domain."""
    correct, total = 0, 0
    with torch.no_grad():
        for x, domain in batches:
            _, logits = D(x)
            correct += int((logits.argmax(1) == domain).sum())
            total += x.shape[0]
    return correct / max(total, 1)


def train_stargan_translation(config: ExperimentConfig, resume: bool = False,
                              stop_after: int | None = None) -> TrainState:
    """Single conditional generator and a WGAN-GP critic with a domain head."""
    if config.variant != "stargan_translate":
        raise ValueError(f"train_stargan_translation needs variant 'stargan_translate', "
                         f"got {config.variant!r}")
    return _train_stargan_family(config, resume, stop_after)


def train_da(config: ExperimentConfig, resume: bool = False,
             stop_after: int | None = None) -> TrainState:
    """Joint translation + segmentation training; target masks are never read."""
    if config.variant not in DA_VARIANTS:
        raise ValueError(f"unknown adaptation variant {config.variant!r}; expected one of {DA_VARIANTS}")
    return _train_stargan_family(config, resume, stop_after)


def _train_stargan_family(config: ExperimentConfig, resume: bool, stop_after: int | None) -> TrainState:
    segment = config.variant in DA_VARIANTS
    train_s = open_split(config, config.source, "train", masks_allowed=segment, limit=config.train_limit)
    train_t = open_split(config, config.target, "train", masks_allowed=False, limit=config.target_limit)
    val_s = open_split(config, config.source, "val", masks_allowed=segment, limit=config.val_limit)
    val_t = open_split(config, config.target, "val", masks_allowed=False, limit=config.val_limit)
    session = _Session(config, resume)
    st = session.state
    shuffle = derive_seed(config.seed, "shuffle/source")

    def epoch_fn():
        for xs, ys in batch_iterator(train_s, config.batch_size, shuffle, st.epoch, masks=segment):
            xt = _target_batch(train_t, xs.shape[0], config.batch_size, config.seed, st.global_step)
            _stargan_step(session, xs, ys, xt, config.variant)
            if config.sample_every and st.global_step % config.sample_every == 0:
                _stargan_samples(session, xs[:8], xt[:8])
            if session.iterations_exhausted():
                break

    def val_fn():
        G, D = st.nets["G"], st.nets["D"]
        xs, _ = val_s.batch(range(len(val_s)), masks=False)
        xt, _ = val_t.batch(range(len(val_t)), masks=False)
        acc = domain_accuracy(D, [(xs, SOURCE), (xt, TARGET)])
        if segment:
            S = st.nets["S"]
            loss = _mean_over(val_s, config.batch_size,
                              lambda x, y: L.soft_iou_loss(S(G.encode(x, SOURCE)), y))
        else:
            loss = float(L.cycle_loss(xs, G(G(xs, TARGET), SOURCE))
                         + L.cycle_loss(xt, G(G(xt, SOURCE), TARGET)))
        return loss, {"dom_acc": acc}

    state = session.run(epoch_fn, val_fn, stop_after)
    if segment:
        audit = {"target_mask_reads": train_t.mask_reads() + val_t.mask_reads(),
                 "target_files_read": len(train_t.access_log) + len(val_t.access_log)}
        (session.out / "audit.json").write_text(json.dumps(audit, indent=1) + "\n")
        if audit["target_mask_reads"]:
            raise AssertionError(f"target masks were read: {audit['target_mask_reads'][:3]}")
    return state


def _stargan_samples(session: _Session, xs, xt) -> None:
    from .evaluation import image_grid, to_raster

    G = session.state.nets["G"]
    was_training = G.training
    G.eval()
    with torch.no_grad():
        to_t, to_s = G(xs, TARGET), G(xt, SOURCE)
        rows = [("source", xs), ("source->target", to_t), ("cycle", G(to_t, SOURCE)),
                ("target", xt), ("target->source", to_s), ("cycle", G(to_s, TARGET))]
    G.train(was_training)
    image_grid([(name, to_raster(t)) for name, t in rows],
               session.out / "samples" / f"step_{session.state.global_step:07d}.png")


TRAINERS = {
    "fcn": train_fcn,
    "cyclegan_translate": train_cyclegan,
    "stargan_translate": train_stargan_translation,
    **{v: train_da for v in DA_VARIANTS},
}


def train(config: ExperimentConfig, resume: bool = False, stop_after: int | None = None) -> TrainState:
    return TRAINERS[config.variant](config, resume=resume, stop_after=stop_after)
