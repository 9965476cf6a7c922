"""Student-teacher pretraining with dual utterance/frame objectives.

Each step masks a fixed fraction of patch tokens, runs the student on
the visible subset, decodes a full reconstruction with learned mask
embeddings, and regresses (a) the reconstruction against the input
spectrogram under a Huber penalty over masked regions and (b) the
student CLS vector against the teacher's layer-and-token-averaged
representation of the unmasked input. The teacher receives no
gradients; it tracks the student by exponential moving average at
epoch boundaries only.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .checkpoint import save_checkpoint
from .dsp import LogMelSpectrogram
from .errors import (
    ConfigError,
    EmptyMask,
    NonFiniteLoss,
    StructureMismatch,
)
from .model import ImpactNet, ModelConfig, TokenSequence, build_model


@dataclass(frozen=True)
class TrainConfig:
    mask_ratio: float = 0.7
    lambda_u: float = 0.1
    huber_delta: float = 1.0
    ema_decay: float = 0.99
    epochs: int = 10
    batch_size: int = 32
    learning_rate: float = 5e-4
    weight_decay: float = 0.01
    seed: int = 0
    frame_loss_scope: str = "masked"          # "masked" or "all"
    teacher_pool_include_cls: bool = False
    embed_branch: str = "student"             # "student" or "teacher"

    def __post_init__(self):
        if not (0.0 < self.mask_ratio < 1.0):
            raise ConfigError(f"train.mask_ratio must be in (0, 1), got {self.mask_ratio}")
        if self.lambda_u < 0:
            raise ConfigError(f"train.lambda_u must be nonnegative, got {self.lambda_u}")
        if self.huber_delta <= 0:
            raise ConfigError(f"train.huber_delta must be positive, got {self.huber_delta}")
        if not (0.0 <= self.ema_decay < 1.0):
            raise ConfigError(f"train.ema_decay must be in [0, 1), got {self.ema_decay}")
        if self.epochs < 0:
            raise ConfigError(f"train.epochs must be nonnegative, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"train.batch_size must be positive, got {self.batch_size}")
        if self.learning_rate < 0:
            raise ConfigError(f"train.learning_rate must be nonnegative, got {self.learning_rate}")
        if self.weight_decay < 0:
            raise ConfigError(f"train.weight_decay must be nonnegative, got {self.weight_decay}")
        if self.frame_loss_scope not in ("masked", "all"):
            raise ConfigError(f"train.frame_loss_scope must be masked|all, got {self.frame_loss_scope}")
        if self.embed_branch not in ("student", "teacher"):
            raise ConfigError(f"train.embed_branch must be student|teacher, got {self.embed_branch}")


@dataclass
class ModelState:
    student: ImpactNet
    teacher: ImpactNet
    epoch: int = 0
    optimizer: Optional[torch.optim.Optimizer] = None


@dataclass(frozen=True)
class Embedding:
    vector: np.ndarray
    clip_id: str = ""

    def __post_init__(self):
        vec = np.asarray(self.vector, dtype=np.float64)
        if not np.all(np.isfinite(vec)):
            raise ConfigError("embedding must be finite")
        object.__setattr__(self, "vector", vec)


# --- masking -----------------------------------------------------------------

def mask_count(n_patches: int, ratio: float) -> int:
    """max(1, round(ratio * n)), with arithmetic (half-up) rounding."""
    return max(1, int(np.floor(ratio * n_patches + 0.5)))


def sample_mask(n_patches: int, ratio: float, rng: np.random.Generator) -> np.ndarray:
    """Boolean vector with exactly mask_count(...) True entries, uniform."""
    if n_patches < 1:
        raise ConfigError("n_patches must be >= 1")
    if not (0.0 < ratio < 1.0):
        raise ConfigError(f"mask ratio must be in (0, 1), got {ratio}")
    count = mask_count(n_patches, ratio)
    mask = np.zeros(n_patches, dtype=bool)
    mask[rng.choice(n_patches, size=count, replace=False)] = True
    return mask


def sample_batch_masks(
    batch: int, n_patches: int, ratio: float, rng: np.random.Generator
) -> torch.Tensor:
    rows = [sample_mask(n_patches, ratio, rng) for _ in range(batch)]
    return torch.from_numpy(np.stack(rows))


# --- losses --------------------------------------------------------------------

def teacher_target(layer_outputs: torch.Tensor, include_cls: bool = False) -> torch.Tensor:
    """Mean over patch tokens per layer, then mean over layers; detached.

    layer_outputs: (n_layers, batch, seq, dim) from an unmasked pass.
    """
    tokens = layer_outputs if include_cls else layer_outputs[:, :, 1:, :]
    return tokens.mean(dim=2).mean(dim=0).detach()


def utterance_loss(student_cls: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean squared error over embedding dimensions (and batch)."""
    if student_cls.shape != target.shape:
        raise StructureMismatch(
            f"cls shape {tuple(student_cls.shape)} != target {tuple(target.shape)}"
        )
    return ((student_cls - target) ** 2).mean()


def huber(error: torch.Tensor, delta: float) -> torch.Tensor:
    """0.5 e^2 inside the knot, delta (|e| - delta/2) outside."""
    abs_error = error.abs()
    return torch.where(
        abs_error <= delta,
        0.5 * error**2,
        delta * (abs_error - 0.5 * delta),
    )


def patch_mask_to_pixels(patch_mask: torch.Tensor, grid: int, size: int) -> torch.Tensor:
    """(B, P) bool -> (B, 1, size, size) bool; each patch owns a square region."""
    region = size // grid
    m = patch_mask.reshape(-1, grid, grid)
    m = m.repeat_interleave(region, dim=1).repeat_interleave(region, dim=2)
    return m[:, None]


def frame_loss(
    recon: torch.Tensor,
    target: torch.Tensor,
    patch_mask: Optional[torch.Tensor],
    delta: float = 1.0,
    scope: str = "masked",
) -> torch.Tensor:
    """Huber reconstruction error averaged over in-scope elements."""
    if recon.shape != target.shape:
        raise StructureMismatch(
            f"recon shape {tuple(recon.shape)} != target {tuple(target.shape)}"
        )
    losses = huber(recon - target, delta)
    if scope == "all" or patch_mask is None:
        if scope == "masked" and patch_mask is None:
            raise EmptyMask("masked-scope frame loss requires a patch mask")
        return losses.mean()
    if not bool(patch_mask.any()):
        raise EmptyMask("no masked patches")
    grid = patch_mask.shape[-1]
    grid = int(round(grid**0.5))
    pixels = patch_mask_to_pixels(patch_mask, grid, recon.shape[-1]).to(losses.dtype)
    return (losses * pixels).sum() / pixels.sum()


def total_loss(frame: torch.Tensor, utterance: torch.Tensor, lambda_u: float) -> torch.Tensor:
    return frame + lambda_u * utterance


# --- EMA ------------------------------------------------------------------------

@torch.no_grad()
def ema_update(teacher: ImpactNet, student: ImpactNet, decay: float) -> ImpactNet:
    """teacher <- decay * teacher + (1 - decay) * student, elementwise.

    Non-parameter buffers (BatchNorm running statistics) are copied from
    the student rather than averaged.
    """
    if not (0.0 <= decay < 1.0):
        raise ConfigError(f"ema decay must be in [0, 1), got {decay}")
    t_params = dict(teacher.named_parameters())
    s_params = dict(student.named_parameters())
    if t_params.keys() != s_params.keys():
        raise StructureMismatch("teacher/student parameter names differ")
    for name, t in t_params.items():
        s = s_params[name]
        if t.shape != s.shape:
            raise StructureMismatch(f"shape mismatch at {name}")
        if decay == 0.0:
            t.copy_(s)
        else:
            t.mul_(decay).add_(s, alpha=1.0 - decay)
    for (name, t), (_, s) in zip(teacher.named_buffers(), student.named_buffers()):
        t.copy_(s)
    return teacher


# --- forward/backward ------------------------------------------------------------

def compute_losses(
    student: ImpactNet,
    teacher: ImpactNet,
    batch: torch.Tensor,
    masks: torch.Tensor,
    config: TrainConfig,
):
    """Dual objective for one batch; returns tensors (frame, utterance, total).

    batch: (B, 1, S, S) standardized spectrograms. masks: (B, P) bool.
    The teacher runs unmasked in eval mode under no_grad, so nothing in
    its state changes and no gradient reaches it.
    """
    was_training = teacher.training
    teacher.eval()
    try:
        with torch.no_grad():
            t_layers, _ = teacher.forward_features(batch)
            target = teacher_target(t_layers, config.teacher_pool_include_cls)
    finally:
        teacher.train(was_training)

    seq = student.tokenize(batch)
    seq = TokenSequence(seq.tokens, seq.grid_shape, masks)
    _, final = student.transformer_forward(seq, visible_only=True)
    student_cls = final[:, 0]
    full = student.fill_masked(final, masks)
    recon = student.cnn_decode(full)

    frame = frame_loss(recon, batch, masks, config.huber_delta, config.frame_loss_scope)
    utt = utterance_loss(student_cls, target)
    return frame, utt, total_loss(frame, utt, config.lambda_u)


def make_optimizer(student: ImpactNet, config: TrainConfig) -> torch.optim.Optimizer:
    """Adam moments with decoupled weight decay."""
    return torch.optim.AdamW(
        student.parameters(),
        lr=config.learning_rate,
        betas=(0.9, 0.999),
        eps=1e-8,
        weight_decay=config.weight_decay,
    )


def train_step(
    state: ModelState,
    batch: torch.Tensor,
    config: TrainConfig,
    rng: np.random.Generator,
) -> tuple[ModelState, dict[str, float]]:
    """One optimizer update of the student on one batch."""
    if batch.ndim == 3:
        batch = batch[:, None]
    if batch.shape[0] < 1:
        raise ConfigError("batch must be non-empty")
    if state.optimizer is None:
        state.optimizer = make_optimizer(state.student, config)

    masks = sample_batch_masks(
        batch.shape[0], state.student.config.n_patches, config.mask_ratio, rng
    )
    state.student.train()
    frame, utt, total = compute_losses(state.student, state.teacher, batch, masks, config)
    if not torch.isfinite(total):
        raise NonFiniteLoss(f"loss diverged: frame={frame.item()}, utterance={utt.item()}")

    state.optimizer.zero_grad()
    total.backward()
    state.optimizer.step()
    return state, {
        "frame_loss": float(frame.item()),
        "utt_loss": float(utt.item()),
        "total_loss": float(total.item()),
    }


def _as_input_tensor(corpus) -> torch.Tensor:
    arrays = []
    for item in corpus:
        if isinstance(item, LogMelSpectrogram):
            arrays.append(item.model_input())
        else:
            arrays.append(np.asarray(item, dtype=np.float64))
    stacked = np.stack(arrays).astype(np.float32)
    return torch.from_numpy(stacked)[:, None]


def init_state(
    model_config: Optional[ModelConfig] = None, seed: int = 0
) -> ModelState:
    student = build_model(model_config, seed)
    teacher = copy.deepcopy(student)
    for p in teacher.parameters():
        p.requires_grad_(False)
    return ModelState(student=student, teacher=teacher, epoch=0)


def pretrain(
    corpus: Sequence,
    config: TrainConfig | None = None,
    model_config: Optional[ModelConfig] = None,
    out_dir=None,
    log=None,
) -> tuple[ModelState, list[dict[str, float]]]:
    """Full pretraining loop; returns the final state and per-epoch means.

    Deterministic for a fixed config seed: data order, masks, and
    parameter init all derive from it. The EMA update and checkpoint
    write happen once per epoch, after the last batch.
    """
    config = config or TrainConfig()
    if len(corpus) == 0:
        raise ConfigError("corpus must be non-empty")
    data = _as_input_tensor(corpus)

    state = init_state(model_config, config.seed)
    state.optimizer = make_optimizer(state.student, config)
    rng = np.random.default_rng(config.seed)

    curve: list[dict[str, float]] = []
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(corpus))
        sums = {"frame_loss": 0.0, "utt_loss": 0.0, "total_loss": 0.0}
        n_batches = 0
        for start in range(0, len(order), config.batch_size):
            batch = data[order[start : start + config.batch_size]]
            state, losses = train_step(state, batch, config, rng)
            for key in sums:
                sums[key] += losses[key]
            n_batches += 1
        ema_update(state.teacher, state.student, config.ema_decay)
        state.epoch = epoch
        means = {key: value / n_batches for key, value in sums.items()}
        means["epoch"] = epoch
        curve.append(means)
        if log is not None:
            log(f"epoch {epoch}/{config.epochs}: " + ", ".join(
                f"{k}={v:.4f}" for k, v in means.items() if k != "epoch"
            ))
        if out_dir is not None:
            save_checkpoint(
                Path(out_dir) / f"epoch_{epoch:03d}.ckpt",
                state.student,
                state.teacher,
                epoch=epoch,
                train_config=config,
                optimizer=state.optimizer,
            )
    return state, curve


# --- embedding extraction ----------------------------------------------------------

POOLINGS = ("mean", "cls", "cls+mean")


def embed(
    spec,
    state: ModelState,
    pooling: str = "mean",
    clip_id: str = "",
    branch: Optional[str] = None,
) -> Embedding:
    """Frozen-encoder representation of one spectrogram."""
    if pooling not in POOLINGS:
        raise ConfigError(f"pooling must be one of {POOLINGS}, got {pooling}")
    branch = branch or "student"
    net = state.student if branch == "student" else state.teacher
    x = _as_input_tensor([spec])
    was_training = net.training
    net.eval()
    try:
        with torch.no_grad():
            _, final = net.forward_features(x)
    finally:
        net.train(was_training)
    mean_vec = final[0, 1:].mean(dim=0)
    cls_vec = final[0, 0]
    if pooling == "mean":
        vector = mean_vec
    elif pooling == "cls":
        vector = cls_vec
    else:
        vector = torch.cat([cls_vec, mean_vec])
    return Embedding(vector.numpy(), clip_id)


def embed_corpus(
    corpus: Sequence,
    state: ModelState,
    pooling: str = "mean",
    clip_ids: Optional[Sequence[str]] = None,
    branch: Optional[str] = None,
) -> list[Embedding]:
    ids = clip_ids or [f"clip_{i:05d}" for i in range(len(corpus))]
    return [
        embed(spec, state, pooling, clip_id, branch)
        for spec, clip_id in zip(corpus, ids)
    ]
