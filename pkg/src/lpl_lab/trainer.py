"""Two-phase generator training with EMA, CFG dropout and checkpointing.

Phase ``pretrain`` optimises the plain diffusion loss. Phase ``posttrain``
adds ``w_lpl * LPL`` when the perceptual loss is enabled. Every step emits
one metrics row; rows are appended to a JSONL file when a run directory is
given.
"""

from __future__ import annotations

import copy
import json
import logging
import math
from pathlib import Path

import numpy as np
import torch

from . import diffusion as dc
from .autoencoder import Autoencoder, encode_batched, images_to_tensor
from .checkpoint import module_tensors, save_checkpoint
from .config import RunConfig
from .denoiser import Denoiser
from .errors import NumericalError
from .lpl import LatentPerceptualLoss, total_loss
from .outliers import save_mask_png

log = logging.getLogger(__name__)

PHASES = ("pretrain", "posttrain")


def sample_timestep(kind: str, gen: torch.Generator, batch: int, T: int = 1000,
                    mode: str = "uniform") -> torch.Tensor:
    """Integer steps in ``[1, T]`` for DDPM kinds, floats in ``(0, 1)`` for flow."""
    if kind in ("eps", "v"):
        return torch.randint(1, T + 1, (batch,), generator=gen)
    if mode == "logit_normal":
        t = torch.sigmoid(torch.randn(batch, generator=gen, dtype=torch.float64))
    else:
        t = torch.rand(batch, generator=gen, dtype=torch.float64)
    return t.clamp(1e-7, 1 - 1e-7)


def cfg_dropout(condition: torch.Tensor, p_drop: float, gen: torch.Generator,
                null_class: int) -> torch.Tensor:
    drop = torch.rand(condition.shape[0], generator=gen) < p_drop
    return torch.where(drop, torch.full_like(condition, null_class), condition)


@torch.no_grad()
def ema_update(ema_params, params, gamma: float):
    """In place: ``ema <- gamma * ema + (1 - gamma) * params``."""
    if not 0.0 <= gamma <= 1.0:
        raise ValueError(f"gamma must be in [0, 1], got {gamma}")
    ema_params, params = list(ema_params), list(params)
    if len(ema_params) != len(params):
        raise ValueError("EMA and model parameter lists differ in length")
    for e, p in zip(ema_params, params):
        if e.shape != p.shape:
            raise ValueError(f"shape mismatch {tuple(e.shape)} vs {tuple(p.shape)}")
        e.mul_(gamma).add_(p.detach(), alpha=1.0 - gamma)
    return ema_params


def build_denoiser(cfg: RunConfig) -> Denoiser:
    m = cfg.model
    return Denoiser(cfg.ae.latent_channels, cfg.data.classes, m.base_channels,
                    tuple(m.channel_mult), m.time_dim, m.emb_dim, m.groups)


def build_lpl(cfg: RunConfig, ae: Autoencoder) -> LatentPerceptualLoss:
    lc = cfg.lpl
    return LatentPerceptualLoss(
        ae, lc.weight_policy, lc.num_taps, lc.use_mask, lc.quant, lc.opening, lc.closing,
        lc.std_floor, lc.detach_stats, cfg.data.resolution, lc.base_resolution)


class Trainer:
    """Owns the denoiser, its EMA copy and the optimiser for one run."""

    def __init__(self, cfg: RunConfig, ae: Autoencoder, latents: torch.Tensor,
                 labels, out_dir=None):
        self.cfg = cfg
        self.ae = ae
        self.latents = latents
        self.labels = torch.as_tensor(np.asarray(labels), dtype=torch.long)
        self.kind = cfg.framework
        s = cfg.schedule
        self.schedule = dc.build_schedule(self.kind, s.T, s.beta_start, s.beta_end,
                                          s.zero_terminal)
        self.tau = cfg.tau_sigma()
        self.gamma = cfg.gamma_ema

        torch.manual_seed(cfg.seed)
        self.model = build_denoiser(cfg)
        self.ema = copy.deepcopy(self.model).requires_grad_(False)
        self.opt = torch.optim.AdamW(self.model.parameters(), lr=cfg.trainer.lr,
                                     weight_decay=cfg.trainer.weight_decay)
        self.gen = torch.Generator().manual_seed(int(np.random.SeedSequence(
            [cfg.seed, 1]).generate_state(1)[0]))
        self.lpl = build_lpl(cfg, ae)
        self.step_count = 0
        self.phase = PHASES[0]

        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.metrics_path = None
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            self.metrics_path = self.out_dir / "metrics.jsonl"
            self.metrics_path.write_text("")

    # -- one optimisation step -------------------------------------------------
    def train_step(self, phase: str) -> dict:
        cfg, tc = self.cfg, self.cfg.trainer
        g = self.gen
        idx = torch.randint(len(self.latents), (tc.batch,), generator=g)
        z0 = self.latents[idx]
        y = self.labels[idx]
        t = sample_timestep(self.kind, g, tc.batch, self.schedule.T, tc.time_sampling)
        eps = torch.randn(z0.shape, generator=g)
        y_in = cfg_dropout(y, tc.p_drop, g, self.model.null_class)

        z_t = dc.add_noise(z0, eps, t, self.schedule)
        pred = self.model(z_t, dc.model_time(self.kind, t), y_in)
        target = dc.training_target(self.kind, z0, eps, t, self.schedule)
        gated = dc.gate(self.schedule, t, self.tau)

        per_sample = dc.per_sample_loss(pred, target)
        if tc.reweight:
            per_sample = per_sample * dc.timestep_reweighting(gated, cfg.lpl.w_lpl,
                                                              tc.reweight_ratio)
        l_diff = per_sample.mean()

        n_taps = cfg.lpl.num_taps
        per_layer = [0.0] * 4
        if phase == "posttrain" and cfg.lpl.enabled:
            z0_hat = dc.recover_x0(self.kind, z_t, pred, t, self.schedule)
            l_lpl, info = self.lpl(z0, z0_hat, gated)
            per_layer[:n_taps] = info["per_layer"]
        else:
            l_lpl = torch.zeros(())
        loss = total_loss(l_diff, l_lpl, cfg.lpl.w_lpl)
        if not torch.isfinite(loss):
            raise NumericalError(
                f"non-finite loss at step {self.step_count + 1} ({phase}): "
                f"diff={float(l_diff.detach())}, lpl={float(l_lpl.detach())}")

        self.opt.zero_grad(set_to_none=True)
        loss.backward()
        grad_norm = torch.nn.utils.clip_grad_norm_(self.model.parameters(), math.inf)
        self.opt.step()
        ema_update(self.ema.parameters(), self.model.parameters(), self.gamma)
        self.step_count += 1
        self.phase = phase
        return {
            "step": self.step_count,
            "phase": phase,
            "loss_diff": float(l_diff.detach()),
            "loss_lpl": float(l_lpl.detach()),
            "loss_total": float(loss.detach()),
            "gated_fraction": float(gated.float().mean()),
            "per_layer_lpl": per_layer,
            "grad_norm": float(grad_norm),
            "gamma_ema": self.gamma,
        }

    def run_phase(self, phase: str, steps: int, history: list | None = None):
        if phase not in PHASES:
            raise ValueError(f"unknown phase {phase!r}")
        every = self.cfg.trainer.checkpoint_every
        fh = self.metrics_path.open("a") if self.metrics_path else None
        try:
            for _ in range(steps):
                try:
                    row = self.train_step(phase)
                except NumericalError:
                    # the update is skipped on a bad loss, so the state is the last good one
                    if self.out_dir is not None:
                        self.save(self.out_dir / "last_good.ckpt")
                    raise
                if history is not None:
                    history.append(row)
                if fh is not None:
                    fh.write(json.dumps(row) + "\n")
                    fh.flush()
                if self.out_dir is not None and every and self.step_count % every == 0:
                    self.save(self.out_dir / "checkpoints" / f"step_{self.step_count:07d}.ckpt")
                    if self.cfg.lpl.debug_masks and self.lpl.last_masks is not None:
                        save_mask_png(self.lpl.last_masks,
                                      self.out_dir / f"masks_{self.step_count:07d}.png")
                if self.step_count % 500 == 0:
                    log.info("step %d %s loss %.5f", self.step_count, phase, row["loss_total"])
        finally:
            if fh is not None:
                fh.close()
        return history

    def fork(self, out_dir=None) -> "Trainer":
        """Independent copy sharing the frozen autoencoder and the data."""
        ae, latents = self.ae, self.latents
        lpl_ae, self.lpl.ae = self.lpl.ae, None
        self.ae = self.latents = None
        try:
            clone = copy.deepcopy(self)
        finally:
            self.ae, self.latents, self.lpl.ae = ae, latents, lpl_ae
        clone.ae, clone.latents, clone.lpl.ae = ae, latents, ae
        clone.out_dir = Path(out_dir) if out_dir is not None else None
        clone.metrics_path = None
        if clone.out_dir is not None:
            clone.out_dir.mkdir(parents=True, exist_ok=True)
            clone.metrics_path = clone.out_dir / "metrics.jsonl"
            clone.metrics_path.write_text("")
        return clone

    def reconfigure(self, cfg: RunConfig) -> "Trainer":
        """Switch loss and EMA settings, e.g. on a fork before post-training.

        Model shape, data, framework and schedule must stay the same.
        """
        for key in ("framework", "model", "schedule", "data", "ae"):
            if getattr(cfg, key) != getattr(self.cfg, key):
                raise ValueError(f"reconfigure cannot change {key!r}")
        self.cfg = cfg
        self.tau = cfg.tau_sigma()
        self.gamma = cfg.gamma_ema
        self.lpl = build_lpl(cfg, self.ae)
        for group in self.opt.param_groups:
            group["lr"] = cfg.trainer.lr
            group["weight_decay"] = cfg.trainer.weight_decay
        return self

    def state_tensors(self) -> dict:
        tensors = {}
        tensors.update(module_tensors(self.model, "model."))
        tensors.update(module_tensors(self.ema, "ema."))
        tensors.update(module_tensors(self.ae, "ae."))
        names = {p: n for n, p in self.model.named_parameters()}
        for p, state in self.opt.state.items():
            for key in ("exp_avg", "exp_avg_sq"):
                if key in state:
                    tensors[f"opt.{names[p]}.{key}"] = state[key]
        tensors["train.step"] = torch.tensor(float(self.step_count), dtype=torch.float64)
        tensors["train.gamma_ema"] = torch.tensor(self.gamma, dtype=torch.float64)
        tensors["train.phase"] = torch.tensor(float(PHASES.index(self.phase)),
                                              dtype=torch.float64)
        return tensors

    def save(self, path) -> Path:
        return save_checkpoint(path, self.state_tensors())


def prepare_latents(ae: Autoencoder, images: np.ndarray) -> torch.Tensor:
    return encode_batched(ae, images_to_tensor(images))


def train_generator(cfg: RunConfig, dataset, ae: Autoencoder, out_dir=None,
                    history: list | None = None) -> Trainer:
    """Run both phases and return the trainer (final checkpoint written if ``out_dir``)."""
    latents = prepare_latents(ae, dataset.images)
    trainer = Trainer(cfg, ae, latents, dataset.labels, out_dir)
    trainer.run_phase("pretrain", cfg.trainer.pretrain_steps, history)
    trainer.run_phase("posttrain", cfg.trainer.posttrain_steps, history)
    if out_dir is not None:
        trainer.save(Path(out_dir) / "final.ckpt")
    return trainer
