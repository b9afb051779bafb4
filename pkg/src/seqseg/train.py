"""Two-phase training: cross-entropy + Adam with a halfway LR drop,
sequence-batch assembly with noise injection, per-epoch checkpoints, and
deterministic resumability (RNG streams are derived from (seed, phase,
epoch, step), so resuming from a checkpoint replays the identical run).
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import checkpoint as ckpt
from . import ops
from .data import IGNORE_INDEX, augment_sequence, sample_sequence, valid_targets
from .errors import DataError
from .noise import NoisePolicy, apply_noise
from .tensor import GradTape, NonFiniteError, backward, zero_grads


@dataclass
class TrainConfig:
    seq_len: int = 4              # frames per sequence, target last
    n_sequences: int = 4          # sequences per batch
    epochs_phase1: int = 10
    epochs_phase2: int = 10
    steps_per_epoch: int = 40
    base_lr: float = 1e-4
    lr_drop_factor: float = 10.0
    interval: int = 1
    noise_kind: str = "none"
    noise_p: float = 0.5
    noise_cap: Optional[int] = None
    reversal_p: float = 0.5
    seed: int = 0
    precision: str = "float32"
    grad_clip: Optional[float] = None
    freeze_extractor_phase2: bool = False
    eval_batch: int = 4

    def validate(self) -> None:
        if self.seq_len < 1 or self.n_sequences < 1:
            raise DataError("seq_len and n_sequences must be >= 1")
        if self.epochs_phase1 < 1 or self.epochs_phase2 < 0:
            raise DataError("need at least 1 epoch in phase 1")
        if self.steps_per_epoch < 1:
            raise DataError("steps_per_epoch must be >= 1")
        if self.interval < 1:
            raise DataError("interval must be >= 1")
        if self.precision not in ("float32", "float64"):
            raise DataError("precision must be float32 or float64")
        if self.base_lr <= 0 or self.lr_drop_factor <= 0:
            raise DataError("learning rate and drop factor must be positive")


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: dict) -> "AdamState":
        state = cls()
        for name, p in params.items():
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        return state


def adam_step(params: dict, state: AdamState, lr: float) -> None:
    """Bias-corrected Adam update in place; refuses non-finite gradients."""
    for name, p in params.items():
        g = p.grad
        if g is None:
            g = np.zeros_like(p.data)
        elif not np.isfinite(g).all():
            raise NonFiniteError(f"non-finite gradient for parameter {name!r}", op=name)
        if name not in state.m:
            raise DataError(f"optimizer state missing parameter {name!r}")
        state.m[name] = state.beta1 * state.m[name] + (1.0 - state.beta1) * g
        state.v[name] = state.beta2 * state.v[name] + (1.0 - state.beta2) * (g * g)
    state.step += 1
    c1 = 1.0 - state.beta1 ** state.step
    c2 = 1.0 - state.beta2 ** state.step
    for name, p in params.items():
        m_hat = state.m[name] / c1
        v_hat = state.v[name] / c2
        p.data = p.data - (lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(p.data.dtype)


def clip_gradients(params: dict, max_norm: float) -> float:
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float((p.grad * p.grad).sum())
    norm = float(np.sqrt(total))
    if norm > max_norm and norm > 0:
        scale = max_norm / norm
        for p in params.values():
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm


def lr_schedule(epoch: int, total_epochs: int, base_lr: float,
                drop_factor: float = 10.0) -> float:
    """Step schedule: base LR, dropped by the factor at ceil(total/2)."""
    if not 0 <= epoch < total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {total_epochs})")
    half = (total_epochs + 1) // 2
    return base_lr if epoch < half else base_lr / drop_factor


# ---------------------------------------------------------------------------
# Batch assembly


def build_batch(clips: list, cfg: TrainConfig, policy: NoisePolicy,
                rng: np.random.Generator, crop_h: int, crop_w: int):
    """N uniform draws over valid (clip, target) pairs, each run through
    sample -> augment -> noise. Returns (samples, masks)."""
    pairs = valid_targets(clips, cfg.interval, cfg.seq_len)
    if not pairs:
        raise DataError(
            f"no valid targets: clips shorter than (T-1)*k + 1 = "
            f"{(cfg.seq_len - 1) * cfg.interval + 1}")
    samples = []
    masks = []
    for _ in range(cfg.n_sequences):
        cid, target = pairs[int(rng.integers(0, len(pairs)))]
        sample = sample_sequence(clips, cid, target, cfg.interval, cfg.seq_len)
        sample = augment_sequence(sample, rng, crop_h, crop_w)
        sample, mask = apply_noise(sample, policy, rng)
        samples.append(sample)
        masks.append(mask)
    return samples, masks


def stack_batch(samples: list):
    """[N samples] -> (seqs [N, T, 3, H, W] float32, labels [N, H, W] int64)."""
    seqs = np.stack([s.frames for s in samples]).astype(np.float32, copy=False)
    labels = np.stack([s.target_label for s in samples]).astype(np.int64)
    return seqs, labels


# ---------------------------------------------------------------------------
# Training loop


LOG_COLUMNS = ["epoch", "phase", "mean_loss", "lr", "replaced_frames_mean", "wall_seconds"]


@dataclass
class TrainResult:
    rows: list
    final_checkpoint: Path
    aborted: bool = False


def _step_rng(seed: int, phase_idx: int, epoch: int, step: int) -> np.random.Generator:
    return np.random.default_rng(
        np.random.SeedSequence(entropy=seed, spawn_key=(phase_idx, epoch, step)))


def derived_seed(seed: int, tag: int) -> int:
    return int(np.random.SeedSequence(entropy=seed, spawn_key=(tag,)).generate_state(1)[0])


def _save_state(out_dir: Path, net, optimizer: AdamState, phase_idx: int, epoch: int,
                name: str) -> Path:
    ckpt_dir = out_dir / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    path = ckpt_dir / f"{name}.ckpt"
    ckpt.save_model(path, net)
    opt_path = ckpt_dir / f"{name}.opt"
    opt_arrays = {"step": np.array([float(optimizer.step)], dtype=np.float32)}
    for pname, arr in optimizer.m.items():
        opt_arrays[f"m.{pname}"] = arr.astype(np.float32, copy=False)
    for pname, arr in optimizer.v.items():
        opt_arrays[f"v.{pname}"] = arr.astype(np.float32, copy=False)
    ckpt.save_arrays(opt_path, opt_arrays)
    state = {
        "phase_index": phase_idx,
        "epochs_done_in_phase": epoch + 1,
        "checkpoint": path.name,
        "checkpoint_sha256": ckpt.sha256_of(path),
        "optimizer": opt_path.name,
        "optimizer_sha256": ckpt.sha256_of(opt_path),
    }
    (out_dir / "training_state.json").write_text(json.dumps(state, indent=2) + "\n")
    return path


def _load_optimizer(path, params: dict) -> AdamState:
    arrays = ckpt.load_arrays(path)
    state = AdamState.for_params(params)
    state.step = int(arrays["step"][0])
    for name, p in params.items():
        if f"m.{name}" not in arrays:
            raise ckpt.CheckpointError(
                f"optimizer sidecar {path} lacks state for {name!r}; "
                "resume config must match the original run")
        state.m[name] = arrays[f"m.{name}"].astype(p.data.dtype)
        state.v[name] = arrays[f"v.{name}"].astype(p.data.dtype)
    return state


def resume_position(out_dir: Path, resume_ckpt: Path) -> dict:
    """Validate the recorded training state against the checkpoint file."""
    state_path = out_dir / "training_state.json"
    if not state_path.exists():
        raise DataError(f"cannot resume: {state_path} missing")
    state = json.loads(state_path.read_text())
    actual = ckpt.sha256_of(resume_ckpt)
    if actual != state["checkpoint_sha256"]:
        raise ckpt.CheckpointError(
            f"checksum mismatch for {resume_ckpt}: file sha256 {actual[:12]}... does not "
            f"match recorded {state['checkpoint_sha256'][:12]}...; refusing to resume")
    opt_path = resume_ckpt.parent / state["optimizer"]
    if ckpt.sha256_of(opt_path) != state["optimizer_sha256"]:
        raise ckpt.CheckpointError(f"checksum mismatch for optimizer sidecar {opt_path}")
    state["optimizer_path"] = opt_path
    return state


def train(net, dataset, cfg: TrainConfig, out_dir, noise_pool=None,
          resume_from=None) -> TrainResult:
    cfg.validate()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt.save_model_config(out_dir / "model.json", net.cfg)
    policy = NoisePolicy(kind=cfg.noise_kind, p=cfg.noise_p, cap=cfg.noise_cap,
                         reversal_p=cfg.reversal_p, pool=noise_pool)
    phases = [("phase1", cfg.epochs_phase1), ("phase2", cfg.epochs_phase2)]

    start_phase, start_epoch = 0, 0
    optimizer = None
    if resume_from is not None:
        state = resume_position(out_dir, Path(resume_from))
        ckpt.load_model(resume_from, net)
        start_phase = int(state["phase_index"])
        start_epoch = int(state["epochs_done_in_phase"])
        net.set_mode(phases[start_phase][0])
        params = net.trainable_params(cfg.freeze_extractor_phase2 and start_phase == 1)
        optimizer = _load_optimizer(state["optimizer_path"], params)
        if start_epoch >= phases[start_phase][1]:
            start_phase += 1
            start_epoch = 0
            optimizer = None

    log_path = out_dir / "log.csv"
    new_log = not (resume_from is not None and log_path.exists())
    log_file = open(log_path, "w" if new_log else "a", newline="", encoding="utf-8")
    log = csv.writer(log_file)
    if new_log:
        log.writerow(LOG_COLUMNS)

    rows = []
    final = None
    global_epoch = sum(phases[i][1] for i in range(start_phase)) + start_epoch
    try:
        for phase_idx in range(start_phase, len(phases)):
            phase_name, phase_epochs = phases[phase_idx]
            if phase_epochs == 0:
                continue
            net.set_mode(phase_name)
            # entering phase 2 at its first epoch (not resuming into it):
            # fresh ConvLSTM, fresh Adam state for all trainable parameters
            if phase_idx == 1 and optimizer is None:
                net.reinit_cell(derived_seed(cfg.seed, 101))
            freeze = cfg.freeze_extractor_phase2 and phase_idx == 1
            params = net.trainable_params(freeze)
            if optimizer is None:
                optimizer = AdamState.for_params(params)

            first_epoch = start_epoch if phase_idx == start_phase else 0
            for epoch in range(first_epoch, phase_epochs):
                lr = lr_schedule(epoch, phase_epochs, cfg.base_lr, cfg.lr_drop_factor)
                epoch_start = time.perf_counter()
                losses = []
                replaced = []
                for step in range(cfg.steps_per_epoch):
                    rng = _step_rng(cfg.seed, phase_idx, epoch, step)
                    samples, masks = build_batch(
                        dataset.train, cfg, policy, rng, net.cfg.crop_h, net.cfg.crop_w)
                    seqs, labels = stack_batch(samples)
                    replaced.extend(m.count for m in masks)
                    with GradTape() as tape:
                        logits = net.forward(seqs, training=True)
                        loss = ops.softmax_ce_loss(logits, labels,
                                                   ignore_index=IGNORE_INDEX)
                    value = loss.item()
                    if not np.isfinite(value):
                        raise NonFiniteError(
                            f"non-finite training loss at phase {phase_name} "
                            f"epoch {epoch} step {step}; last good checkpoint retained")
                    backward(tape, loss)
                    if cfg.grad_clip is not None:
                        clip_gradients(params, cfg.grad_clip)
                    adam_step(params, optimizer, lr)
                    zero_grads(params)
                    losses.append(value)
                row = {
                    "epoch": global_epoch,
                    "phase": phase_name,
                    "mean_loss": float(np.mean(losses)),
                    "lr": lr,
                    "replaced_frames_mean": float(np.mean(replaced)) if replaced else 0.0,
                    "wall_seconds": time.perf_counter() - epoch_start,
                }
                rows.append(row)
                log.writerow([row["epoch"], row["phase"], f"{row['mean_loss']:.6f}",
                              f"{row['lr']:.2e}", f"{row['replaced_frames_mean']:.4f}",
                              f"{row['wall_seconds']:.3f}"])
                log_file.flush()
                final = _save_state(out_dir, net, optimizer, phase_idx, epoch,
                                    f"{phase_name}_epoch{epoch:03d}")
                global_epoch += 1
            optimizer = None
            start_epoch = 0
    finally:
        log_file.close()

    if final is None:
        # resume pointed at an already-finished run
        final = Path(resume_from)
    return TrainResult(rows=rows, final_checkpoint=final)
