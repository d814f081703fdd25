"""Siamese training loop with Adam, plateau learning-rate schedule, and
checkpoint persistence."""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass

import numpy as np
import torch

from . import layers as L
from . import losses
from .adam import AdamState, adam_step
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .data import PreprocessSpec, Sample, WarpSamplerConfig, make_triplet
from .detector import Detector, score_maps, spatial_softmax
from .tps import ConfigError


@dataclass
class TrainConfig:
    k: int = 7
    in_channels: int = 1
    gamma: float = 500.0
    weight_decay: float = 5e-4
    pool_window: int = 5
    learning_rate: float = 1e-4
    plateau_patience: int = 5
    lr_decay_factor: float = 0.1
    max_decays: int = 2
    max_epochs: int = 50
    batch_size: int = 32
    seed: int = 0
    validation_fraction: float = 0.15

    def validate(self) -> None:
        if not 0.0 < self.lr_decay_factor < 1.0:
            raise ConfigError("lr_decay_factor must lie in (0, 1)")
        if self.plateau_patience < 1:
            raise ConfigError("plateau_patience must be >= 1")
        if self.batch_size < 1 or self.max_epochs < 0:
            raise ConfigError("batch_size must be >= 1 and max_epochs >= 0")
        if not 0.0 < self.validation_fraction < 1.0:
            raise ConfigError("validation_fraction must lie in (0, 1)")

    def loss_config(self) -> losses.LossConfig:
        return losses.LossConfig(k=self.k, gamma=self.gamma,
                                 weight_decay=self.weight_decay,
                                 pool_window=self.pool_window)


def params_digest(params: dict[str, torch.Tensor]) -> str:
    h = hashlib.sha256()
    for name in sorted(params):
        h.update(name.encode())
        h.update(params[name].detach().cpu().numpy().tobytes())
    return h.hexdigest()


def detector_to_checkpoint(det: Detector, config: TrainConfig,
                           preprocess: PreprocessSpec,
                           g1: WarpSamplerConfig, g2: WarpSamplerConfig,
                           epoch: int, history: list[float],
                           lineage: str | None = None) -> Checkpoint:
    manifest = {
        "kind": "warpmarks-detector",
        "k": det.k,
        "in_channels": det.in_channels,
        "train_config": asdict(config),
        "preprocess": asdict(preprocess),
        "warp_g1": asdict(g1),
        "warp_g2": asdict(g2),
        "epoch": epoch,
        "validation_history": history,
    }
    if lineage:
        manifest["lineage"] = lineage
    arrays = {f"detector/{n}": t.detach().cpu().numpy()
              for n, t in det.params.items()}
    return Checkpoint(manifest=manifest, arrays=arrays)


def detector_from_checkpoint(ckpt: Checkpoint) -> Detector:
    man = ckpt.manifest
    det = Detector.create(k=man["k"], in_channels=man["in_channels"], rng=0)
    for name in det.params:
        key = f"detector/{name}"
        if key not in ckpt.arrays:
            raise ConfigError(f"checkpoint missing parameter array {key!r}")
        det.params[name] = torch.from_numpy(ckpt.arrays[key].copy())
    return det


def load_detector(path) -> tuple[Detector, Checkpoint]:
    ckpt = load_checkpoint(path)
    return detector_from_checkpoint(ckpt), ckpt


def _triplet_batch(samples: list[Sample], indices, g1, g2, preprocess, seeds):
    trips = [make_triplet(samples[i], g1, g2, preprocess, seed)
             for i, seed in zip(indices, seeds)]
    x = torch.from_numpy(np.stack([t.x for t in trips]))
    xp = torch.from_numpy(np.stack([t.xp for t in trips]))
    hc, wc = x.shape[1] // 2, x.shape[2] // 2
    gv = np.stack([losses.mapped_cell_grid(t.g, hc, wc) for t in trips])
    return x, xp, torch.from_numpy(gv.astype(np.float32))


def _batch_objective(det: Detector, x, xp, gv, config: TrainConfig, mode: str):
    both = torch.cat([x, xp], dim=0)
    scores, cache = score_maps(det, both, mode=mode)
    maps = spatial_softmax(scores)
    b = x.shape[0]
    total, breakdown = losses.objective(maps[:b], maps[b:], gv, det.params,
                                        config.loss_config())
    return total, breakdown, cache


def format_epoch_record(rec: dict) -> str:
    parts = [f"epoch={rec['epoch']}", f"lr={rec['lr']:.3e}"]
    for key in ("align", "div_x", "div_xp", "weight_decay", "objective",
                "val_objective"):
        parts.append(f"{key}={rec[key]:.8f}")
    return " ".join(parts)


def train(samples: list[Sample], config: TrainConfig,
          g1: WarpSamplerConfig, g2: WarpSamplerConfig,
          preprocess: PreprocessSpec,
          init_detector: Detector | None = None,
          lineage: str | None = None,
          log=None) -> tuple[Checkpoint, list[dict]]:
    """Train a detector on unannotated samples; returns the best-effort
    checkpoint and the per-epoch metric log.

    Validation warps use seeds fixed across epochs so the validation
    objective is comparable; the learning rate drops by the decay factor
    after ``plateau_patience`` epochs without improvement and training stops
    once ``max_decays`` decays are exhausted the same way.
    """
    config.validate()
    if not samples:
        raise ConfigError("empty dataset")

    split_rng = np.random.default_rng([config.seed, 1])
    order = split_rng.permutation(len(samples))
    n_val = max(1, int(round(config.validation_fraction * len(samples))))
    if n_val >= len(samples):
        raise ConfigError("validation split leaves no training data")
    val_idx = order[:n_val]
    train_idx = order[n_val:]

    det = init_detector if init_detector is not None else Detector.create(
        config.k, config.in_channels, rng=np.random.default_rng([config.seed, 2]))
    state = AdamState(learning_rate=config.learning_rate)
    records: list[dict] = []
    history: list[float] = []
    best_val = float("inf")
    stall = 0
    decays = 0
    last_good = {n: t.detach().clone() for n, t in det.params.items()}
    epoch = 0
    learnables = L.learnable_names(det.params)

    def validation_objective() -> float:
        vals = []
        for start in range(0, len(val_idx), config.batch_size):
            idx = val_idx[start:start + config.batch_size]
            seeds = [[config.seed, 4, int(i)] for i in idx]
            x, xp, gv = _triplet_batch(samples, idx, g1, g2, preprocess, seeds)
            with torch.no_grad():
                total, _, _ = _batch_objective(det, x, xp, gv, config, "eval")
            vals.append(float(total) * len(idx))
        return sum(vals) / len(val_idx)

    try:
        for epoch in range(1, config.max_epochs + 1):
            epoch_rng = np.random.default_rng([config.seed, 3, epoch])
            perm = epoch_rng.permutation(train_idx)
            sums = {"align": 0.0, "div_x": 0.0, "div_xp": 0.0, "weight_decay": 0.0}
            seen = 0
            for start in range(0, len(perm), config.batch_size):
                idx = perm[start:start + config.batch_size]
                seeds = [[config.seed, 5, epoch, int(i)] for i in idx]
                x, xp, gv = _triplet_batch(samples, idx, g1, g2, preprocess, seeds)
                total, breakdown, _ = _batch_objective(det, x, xp, gv, config, "train")
                grads = torch.autograd.grad(total, [det.params[n] for n in learnables])
                adam_step(det.params, dict(zip(learnables, grads)), state)
                for t in det.params.values():
                    t.requires_grad_(False)
                for key in sums:
                    sums[key] += float(breakdown[key].detach()) * len(idx)
                seen += len(idx)

            rec = {"epoch": epoch, "lr": state.learning_rate}
            for key, val in sums.items():
                rec[key] = val / seen
            rec["objective"] = rec["align"] + rec["div_x"] + rec["div_xp"] + rec["weight_decay"]
            rec["val_objective"] = validation_objective()
            history.append(rec["val_objective"])
            records.append(rec)
            if log is not None:
                log(format_epoch_record(rec))
            last_good = {n: t.detach().clone() for n, t in det.params.items()}

            if rec["val_objective"] < best_val - 1e-9:
                best_val = rec["val_objective"]
                stall = 0
            else:
                stall += 1
                if stall >= config.plateau_patience:
                    if decays >= config.max_decays:
                        break
                    decays += 1
                    stall = 0
                    state.learning_rate *= config.lr_decay_factor
    except FloatingPointError:
        # keep the last epoch that completed cleanly
        for name in det.params:
            det.params[name] = last_good[name]

    ckpt = detector_to_checkpoint(det, config, preprocess, g1, g2, epoch,
                                  history, lineage=lineage)
    return ckpt, records


def finetune(ckpt: Checkpoint, samples: list[Sample], config: TrainConfig,
             g1: WarpSamplerConfig, g2: WarpSamplerConfig,
             preprocess: PreprocessSpec, log=None) -> tuple[Checkpoint, list[dict]]:
    """Continue training from checkpoint weights on a new dataset."""
    det = detector_from_checkpoint(ckpt)
    if det.k != config.k or det.in_channels != config.in_channels:
        raise ConfigError(
            f"checkpoint architecture (K={det.k}, channels={det.in_channels}) "
            f"does not match config (K={config.k}, channels={config.in_channels})")
    if config.max_epochs == 0:
        out = detector_to_checkpoint(det, config, preprocess, g1, g2, 0, [],
                                     lineage=ckpt.manifest.get("kind", "checkpoint"))
        return out, []
    lineage = f"finetune-of-epoch-{ckpt.manifest.get('epoch')}"
    return train(samples, config, g1, g2, preprocess, init_detector=det,
                 lineage=lineage, log=log)


__all__ = ["TrainConfig", "train", "finetune", "save_checkpoint",
           "load_checkpoint", "load_detector", "detector_to_checkpoint",
           "detector_from_checkpoint", "params_digest", "format_epoch_record"]
