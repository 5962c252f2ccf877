"""Alternating adversarial training.

Each step updates the discriminator on (real, generated-detached) images,
then updates the generator and attention module in one backward pass. The
attention module only ever appears inside the reconstruction loss, so its
parameters structurally receive gradients from rec + reg alone; separate
Adam states keep the two updates independent.
"""

from __future__ import annotations

import copy
import logging
import os
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
import torch

from . import data as datamod
from . import losses, regions
from .networks import (
    AttentionNet,
    Generator,
    PatchDiscriminator,
    architecture_fingerprint,
    initialize_weights,
    load_extractor,
)

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
VALID_IMAGE_SIZES = (32, 64, 128, 256)


class CheckpointError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    image_size: int = 64
    batch_size: int = 8
    learning_rate: float = 0.0001
    adam_beta1: float = 0.5
    adam_beta2: float = 0.999
    max_steps: int = 2000
    seed: int = 0
    enable_adv: bool = True
    enable_id: bool = True
    enable_rec: bool = True
    enable_sat: bool = True
    checkpoint_interval: int = 500
    extractor: str = "toy"
    base_channels: int = 32
    max_channels: int = 256
    disc_blocks: int = 4
    saturating_adversarial: bool = False
    debug_checks: bool = False

    def validate(self) -> None:
        if self.image_size not in VALID_IMAGE_SIZES:
            raise ValueError(f"image_size must be one of {VALID_IMAGE_SIZES}, got {self.image_size}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.max_steps < 0:
            raise ValueError(f"max_steps must be >= 0, got {self.max_steps}")
        if self.checkpoint_interval < 0:
            raise ValueError("checkpoint_interval must be >= 0")

    def enabled_losses(self) -> dict:
        return {
            "adv": self.enable_adv,
            "id": self.enable_id,
            "rec": self.enable_rec,
            "sat": self.enable_sat,
        }


def format_log_line(step: int, bundle: losses.LossBundle) -> str:
    values = " ".join(repr(v) for v in bundle.as_tuple())
    return f"{step} {values}\n"


def read_loss_log(path):
    """Parse a loss log into a list of (step, LossBundle)."""
    out = []
    with open(path) as fh:
        for raw in fh:
            parts = raw.split()
            if not parts:
                continue
            if len(parts) != len(losses.LOG_COLUMNS):
                raise ValueError(f"{path}: bad log line {raw!r}")
            step = int(parts[0])
            vals = [float(p) for p in parts[1:]]
            out.append((step, losses.LossBundle(*vals)))
    return out


def _clone_module_state(module):
    return {k: v.detach().clone() for k, v in module.state_dict().items()}


def _clone_optimizer_state(optimizer):
    return copy.deepcopy(optimizer.state_dict())


class Trainer:
    """Owns the three trained networks, their Adam states, and the step counter."""

    def __init__(self, config: TrainConfig, extractor=None):
        config.validate()
        self.config = config
        self.extractor = extractor if extractor is not None else load_extractor(config.extractor)
        self.generator = Generator(config.image_size, config.base_channels, config.max_channels)
        self.attention = AttentionNet(config.image_size, config.base_channels, config.max_channels)
        self.discriminator = PatchDiscriminator(
            config.base_channels, config.max_channels, config.disc_blocks
        )
        gen = torch.Generator().manual_seed(config.seed)
        for net in (self.generator, self.attention, self.discriminator):
            initialize_weights(net, gen)
        betas = (config.adam_beta1, config.adam_beta2)
        self.opt_g = torch.optim.Adam(self.generator.parameters(), lr=config.learning_rate, betas=betas)
        self.opt_a = torch.optim.Adam(self.attention.parameters(), lr=config.learning_rate, betas=betas)
        self.opt_d = torch.optim.Adam(
            self.discriminator.parameters(), lr=config.learning_rate, betas=betas
        )
        self.step = 0
        self.data_cursor = None  # (epoch, offset) maintained by fit()
        self.arch_desc, self.fingerprint = architecture_fingerprint(
            config.image_size,
            config.base_channels,
            config.max_channels,
            config.disc_blocks,
            self.extractor.name,
            self.extractor.embedding_dim,
        )

    # -- batch plumbing ------------------------------------------------------

    def _prepare(self, batch: datamod.Batch):
        x = torch.from_numpy(np.ascontiguousarray(batch.x))
        w = torch.from_numpy(np.ascontiguousarray(batch.w))
        y = torch.from_numpy(np.ascontiguousarray(batch.y))
        height, width = x.shape[-2:]
        _, fh, fw = self.extractor.feature_geometry(height, width)
        labels_x = np.stack([regions.resize_label_map(l, fh, fw) for l in batch.labels_x])
        labels_y = np.stack([regions.resize_label_map(l, fh, fw) for l in batch.labels_y])
        return (
            x,
            w,
            y,
            torch.from_numpy(labels_x.astype(np.int64)),
            torch.from_numpy(labels_y.astype(np.int64)),
        )

    # -- one optimization step ------------------------------------------------

    def train_step(self, batch: datamod.Batch) -> losses.LossBundle:
        """D update then joint G/A update; returns the step's LossBundle.

        On a non-finite loss the pre-step state is restored and
        NonFiniteLossError (naming the component) is raised; the step counter
        is not advanced.
        """
        cfg = self.config
        enabled = cfg.enabled_losses()
        x, w, y, labels_x, labels_y = self._prepare(batch)
        if x.shape[0] != cfg.batch_size:
            raise ValueError(f"batch size {x.shape[0]} does not match config {cfg.batch_size}")

        adv_d_value = 0.0
        d_snapshot = None
        if enabled["adv"]:
            with torch.no_grad():
                _, z_const = self.generator(x)
            real_scores = self.discriminator(y)
            fake_scores = self.discriminator(z_const)
            adv_d = losses.adversarial_loss_d(real_scores, fake_scores)
            adv_d_value = float(adv_d.detach())
            if not torch.isfinite(adv_d):
                raise losses.NonFiniteLossError("adv_d", adv_d_value)
            d_snapshot = (_clone_module_state(self.discriminator), _clone_optimizer_state(self.opt_d))
            self.opt_d.zero_grad()
            adv_d.backward()
            self.opt_d.step()

        try:
            _, z = self.generator(x)
            components = {}
            if enabled["adv"]:
                components["adv_g"] = losses.adversarial_loss_g(
                    self.discriminator(z), saturating=cfg.saturating_adversarial
                )
            if enabled["id"] or enabled["sat"]:
                emb_z, feat_z = self.extractor.forward_full(z)
                with torch.no_grad():
                    emb_y, feat_y = self.extractor.forward_full(y)
                if enabled["id"]:
                    components["id"] = losses.identity_loss(emb_z, emb_y)
                if enabled["sat"]:
                    components["sat"] = losses.sat_loss(feat_z, labels_x, feat_y, labels_y)
            if enabled["rec"]:
                attention_map = self.attention(x)
                rec, reg = losses.reconstruction_loss(attention_map, w, x, z)
                components["rec"] = rec
                components["reg"] = reg
            bundle = losses.total_generator_loss(
                {k: float(v.detach()) for k, v in components.items()},
                enabled,
                adv_d=adv_d_value,
            )
        except losses.NonFiniteLossError:
            if d_snapshot is not None:
                self.discriminator.load_state_dict(d_snapshot[0])
                self.opt_d.load_state_dict(d_snapshot[1])
            raise

        total = None
        for name in losses.GENERATOR_LOSS_ORDER:
            if name in components:
                total = components[name] if total is None else total + components[name]
        if total is not None:
            self.opt_g.zero_grad()
            self.opt_a.zero_grad()
            total.backward()
            self.opt_g.step()
            self.opt_a.step()
        self.step += 1
        if cfg.debug_checks:
            self._assert_finite_state()
        return bundle

    def _assert_finite_state(self) -> None:
        for name, net in (
            ("generator", self.generator),
            ("attention", self.attention),
            ("discriminator", self.discriminator),
        ):
            for pname, p in net.state_dict().items():
                if not torch.isfinite(p).all():
                    raise RuntimeError(f"non-finite parameter {name}.{pname} after step {self.step}")

    # -- persistence -----------------------------------------------------------

    def save_checkpoint(self, path) -> None:
        payload = {
            "version": CHECKPOINT_VERSION,
            "fingerprint": self.fingerprint,
            "architecture": self.arch_desc,
            "config": asdict(self.config),
            "step": self.step,
            "data_cursor": list(self.data_cursor) if self.data_cursor else None,
            "models": {
                "generator": self.generator.state_dict(),
                "attention": self.attention.state_dict(),
                "discriminator": self.discriminator.state_dict(),
            },
            "optimizers": {
                "generator": self.opt_g.state_dict(),
                "attention": self.opt_a.state_dict(),
                "discriminator": self.opt_d.state_dict(),
            },
            "torch_rng": torch.get_rng_state(),
        }
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        torch.save(payload, tmp)
        os.replace(tmp, path)

    @classmethod
    def load_checkpoint(cls, path, extractor=None) -> "Trainer":
        path = Path(path)
        if not path.exists():
            raise CheckpointError(f"checkpoint not found: {path}")
        try:
            payload = torch.load(path, map_location="cpu", weights_only=True)
        except Exception as exc:
            raise CheckpointError(f"corrupt or unreadable checkpoint {path}: {exc}") from exc
        if not isinstance(payload, dict) or "version" not in payload:
            raise CheckpointError(f"corrupt checkpoint {path}: missing header")
        if payload["version"] != CHECKPOINT_VERSION:
            raise CheckpointError(
                f"checkpoint version {payload['version']} unsupported (expected {CHECKPOINT_VERSION})"
            )
        known = {f.name for f in fields(TrainConfig)}
        config = TrainConfig(**{k: v for k, v in payload["config"].items() if k in known})
        trainer = cls(config, extractor=extractor)
        if payload["fingerprint"] != trainer.fingerprint:
            raise CheckpointError(
                "architecture fingerprint mismatch: checkpoint "
                f"{payload['fingerprint']} ({payload.get('architecture')}) vs "
                f"current {trainer.fingerprint} ({trainer.arch_desc})"
            )
        trainer.generator.load_state_dict(payload["models"]["generator"])
        trainer.attention.load_state_dict(payload["models"]["attention"])
        trainer.discriminator.load_state_dict(payload["models"]["discriminator"])
        trainer.opt_g.load_state_dict(payload["optimizers"]["generator"])
        trainer.opt_a.load_state_dict(payload["optimizers"]["attention"])
        trainer.opt_d.load_state_dict(payload["optimizers"]["discriminator"])
        trainer.step = int(payload["step"])
        cursor = payload.get("data_cursor")
        trainer.data_cursor = tuple(cursor) if cursor else None
        torch.set_rng_state(payload["torch_rng"])
        return trainer


def fit(samples, config: TrainConfig, out_dir, resume=None, extractor=None):
    """Run max_steps over seeded shuffled batches; returns (ckpt_path, history).

    Writes one loss-log line per step plus periodic checkpoints. Resuming
    from a checkpoint with the same config and data continues the exact
    uninterrupted trajectory.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    config.validate()
    if not samples:
        raise ValueError("dataset is empty")
    steps_per_epoch = len(samples) // config.batch_size
    if steps_per_epoch == 0:
        raise ValueError(
            f"batch_size {config.batch_size} exceeds dataset size {len(samples)}"
        )
    if resume:
        trainer = Trainer.load_checkpoint(resume, extractor=extractor)
        mismatched = {
            k: (v, asdict(trainer.config)[k])
            for k, v in asdict(config).items()
            if k != "max_steps" and asdict(trainer.config)[k] != v
        }
        if mismatched:
            raise CheckpointError(f"resume config mismatch: {mismatched}")
        trainer.config = config
    else:
        trainer = Trainer(config, extractor=extractor)

    if trainer.data_cursor is not None:
        epoch, offset = trainer.data_cursor
    else:
        epoch, offset = divmod(trainer.step, steps_per_epoch)

    log_path = out / "loss_log.txt"
    history = []
    with open(log_path, "a" if resume else "w") as log:
        while trainer.step < config.max_steps:
            step_at_epoch_start = trainer.step
            batches = datamod.make_batches(samples, config.batch_size, config.seed, epoch)
            for index in range(offset, len(batches)):
                if trainer.step >= config.max_steps:
                    break
                next_cursor = (epoch, index + 1) if index + 1 < len(batches) else (epoch + 1, 0)
                try:
                    bundle = trainer.train_step(batches[index])
                except losses.NonFiniteLossError as exc:
                    logger.warning("step %d: skipping batch (%s)", trainer.step, exc)
                    trainer.data_cursor = next_cursor
                    continue
                trainer.data_cursor = next_cursor
                history.append(bundle)
                log.write(format_log_line(trainer.step, bundle))
                log.flush()
                if config.checkpoint_interval and trainer.step % config.checkpoint_interval == 0:
                    trainer.save_checkpoint(out / f"checkpoint_step{trainer.step:07d}.pt")
            if trainer.step == step_at_epoch_start and offset == 0:
                raise RuntimeError(
                    f"epoch {epoch}: every batch produced a non-finite loss; aborting"
                )
            epoch += 1
            offset = 0
    final_path = out / "checkpoint_final.pt"
    trainer.save_checkpoint(final_path)
    return final_path, history
