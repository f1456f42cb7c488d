"""Noise-prediction training loop, checkpointing, and train-time schedules."""

from __future__ import annotations

import json
import os
import pickle
import time
from dataclasses import asdict, dataclass, replace

import numpy as np
import torch

from .data import TensorCorpus
from .diffusion import NoiseSchedule, make_schedule, task_mask
from .model import ConditionalDenoiser, ModelConfig

CHECKPOINT_VERSION = 1

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


class TrainError(ValueError):
    """Invalid training configuration or a failed training-time contract."""


@dataclass(frozen=True)
class TrainConfig:
    """Optimization hyperparameters for one training run."""

    epochs: int = 500
    batch_size: int = 32
    learning_rate: float = 1e-4
    t_sampling: str = "uniform"  # uniform | quad
    task: str = "uncond"  # uncond | c_to_sp | cs_to_p | completion
    grad_clip: float = 1.0
    seed: int = 0
    timesteps: int = 1000  # diffusion steps T for the noise schedule
    keep_prob: float = 0.5  # completion task: chance each element is given
    val_interval: int = 0  # epochs between validation passes, 0 disables
    save_interval: int = 0  # epochs between checkpoints, 0 saves only at end

    def __post_init__(self):
        for name in ("epochs", "batch_size", "timesteps"):
            if getattr(self, name) < 1:
                raise TrainError(f"{name} must be positive, got {getattr(self, name)}")
        if self.learning_rate <= 0:
            raise TrainError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.grad_clip <= 0:
            raise TrainError(f"grad_clip must be > 0, got {self.grad_clip}")
        if self.t_sampling not in ("uniform", "quad"):
            raise TrainError(f"unknown t_sampling {self.t_sampling!r}")
        if self.task not in ("uncond", "c_to_sp", "cs_to_p", "completion"):
            raise TrainError(f"unknown task {self.task!r}")
        if self.val_interval < 0 or self.save_interval < 0:
            raise TrainError("intervals must be >= 0")


TRAIN_PRESETS = {
    "desk": TrainConfig(epochs=430, batch_size=32, learning_rate=3e-4, timesteps=200),
    "pku": TrainConfig(epochs=500, batch_size=32, learning_rate=1e-4, timesteps=1000),
    "cgl": TrainConfig(epochs=500, batch_size=128, learning_rate=2e-4, timesteps=1000),
}


def train_preset(name: str, **overrides) -> TrainConfig:
    if name not in TRAIN_PRESETS:
        raise TrainError(f"unknown training preset {name!r}, expected one of {sorted(TRAIN_PRESETS)}")
    return replace(TRAIN_PRESETS[name], **overrides)


def for_task(cfg: TrainConfig, task: str) -> TrainConfig:
    """Constrained tasks train a separate model with quad t-sampling, 400 epochs."""
    if task == "uncond":
        return replace(cfg, task=task)
    return replace(cfg, task=task, t_sampling="quad", epochs=400)


def loss(eps, eps_hat) -> torch.Tensor:
    """Mean squared error over every tensor entry, averaged over the batch."""
    if eps.shape != eps_hat.shape:
        raise TrainError(f"shape mismatch: {tuple(eps.shape)} vs {tuple(eps_hat.shape)}")
    return torch.mean((eps_hat - eps) ** 2)


def masked_loss(eps, eps_hat, free: torch.Tensor) -> torch.Tensor:
    """MSE restricted to entries where free is True; 0 when nothing is free."""
    if eps.shape != eps_hat.shape:
        raise TrainError(f"shape mismatch: {tuple(eps.shape)} vs {tuple(eps_hat.shape)}")
    if not bool(free.any()):
        return torch.zeros((), dtype=eps_hat.dtype)
    diff = (eps_hat - eps)[free]
    return torch.mean(diff * diff)


def sample_timestep(T: int, mode: str, rng: np.random.Generator, size: int = 1) -> np.ndarray:
    """Draw training timesteps in [1, T].

    uniform: integer uniform. quad: t = ceil(T u^2) with u uniform on (0, 1],
    which concentrates draws at small t.
    """
    if T < 1:
        raise TrainError(f"T must be >= 1, got {T}")
    if mode == "uniform":
        return rng.integers(1, T + 1, size=size)
    if mode == "quad":
        u = 1.0 - rng.random(size)  # (0, 1]
        return np.ceil(T * u * u).astype(np.int64)
    raise TrainError(f"unknown t_sampling {mode!r}")


def train_step(
    batch,
    model: ConditionalDenoiser,
    optimizer: torch.optim.Optimizer,
    sched: NoiseSchedule,
    cfg: TrainConfig,
    rng: np.random.Generator,
) -> float:
    """One optimizer update on a batch; returns the scalar loss."""
    x0 = np.asarray(batch.x0, dtype=np.float64)  # (B, n_max, channels)
    n_batch = x0.shape[0]
    t = sample_timestep(sched.T, cfg.t_sampling, rng, size=n_batch)
    eps = rng.standard_normal(x0.shape)

    ab = sched.alpha_bars[t][:, None, None]  # per-sample noise level
    x_t = np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps

    free = np.ones(x0.shape, dtype=bool)
    if cfg.task != "uncond":
        # given entries stay at their clean values and carry no loss
        for i in range(n_batch):
            cm = task_mask(cfg.task, x0[i], model.cfg.n_categories, rng, cfg.keep_prob)
            frozen = cm.mask > 0.5
            x_t[i][frozen] = x0[i][frozen]
            free[i][frozen] = False

    model.train()
    eps_hat, _ = model(
        torch.from_numpy(x_t).float(),
        torch.from_numpy(np.asarray(t)).long(),
        torch.from_numpy(np.asarray(batch.images)),
        list(batch.boxes),
    )
    step_loss = masked_loss(torch.from_numpy(eps).float(), eps_hat, torch.from_numpy(free))
    value = float(step_loss.detach())
    if not np.isfinite(value):
        raise TrainError(f"non-finite loss {value} at t={t.tolist()} (ids {list(batch.ids)})")
    if step_loss.requires_grad:
        optimizer.zero_grad()
        step_loss.backward()
        torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
        optimizer.step()
    return value


@torch.no_grad()
def validation_loss(
    corpus: TensorCorpus,
    model: ConditionalDenoiser,
    sched: NoiseSchedule,
    cfg: TrainConfig,
    rng: np.random.Generator,
) -> float:
    """Mean loss over the corpus with frozen parameters."""
    was_training = model.training
    model.eval()
    total = 0.0
    count = 0
    for batch in corpus.batches(cfg.batch_size):
        x0 = np.asarray(batch.x0, dtype=np.float64)
        n_batch = x0.shape[0]
        t = sample_timestep(sched.T, cfg.t_sampling, rng, size=n_batch)
        eps = rng.standard_normal(x0.shape)
        ab = sched.alpha_bars[t][:, None, None]
        x_t = np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps

        free = np.ones(x0.shape, dtype=bool)
        if cfg.task != "uncond":
            for i in range(n_batch):
                cm = task_mask(cfg.task, x0[i], model.cfg.n_categories, rng, cfg.keep_prob)
                frozen = cm.mask > 0.5
                x_t[i][frozen] = x0[i][frozen]
                free[i][frozen] = False

        eps_hat, _ = model(
            torch.from_numpy(x_t).float(),
            torch.from_numpy(np.asarray(t)).long(),
            torch.from_numpy(np.asarray(batch.images)),
            list(batch.boxes),
        )
        total += float(masked_loss(torch.from_numpy(eps).float(), eps_hat, torch.from_numpy(free))) * n_batch
        count += n_batch
    if was_training:
        model.train()
    return total / count


def _optimizer_to_numpy(optimizer: torch.optim.Optimizer) -> dict:
    sd = optimizer.state_dict()
    state = {}
    for key, entry in sd["state"].items():
        state[key] = {
            k: (v.detach().cpu().numpy() if torch.is_tensor(v) else v) for k, v in entry.items()
        }
    return {"state": state, "param_groups": sd["param_groups"]}


def _optimizer_from_numpy(optimizer: torch.optim.Optimizer, payload: dict) -> None:
    state = {}
    for key, entry in payload["state"].items():
        state[key] = {
            k: (torch.from_numpy(np.asarray(v)) if isinstance(v, np.ndarray) else v)
            for k, v in entry.items()
        }
    optimizer.load_state_dict({"state": state, "param_groups": payload["param_groups"]})


def save_checkpoint(
    path: str,
    model: ConditionalDenoiser,
    optimizer: torch.optim.Optimizer | None,
    cfg: TrainConfig,
    sched: NoiseSchedule,
    rng: np.random.Generator | None = None,
    epoch: int = 0,
    step: int = 0,
) -> None:
    """Atomically write a versioned checkpoint (tmp file then rename)."""
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "model_config": asdict(model.cfg),
        "train_config": asdict(cfg),
        "params": {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()},
        "optimizer": None if optimizer is None else _optimizer_to_numpy(optimizer),
        "schedule": {"timesteps": sched.T, "beta_start": sched.beta_start, "beta_end": sched.beta_end},
        "rng_state": None if rng is None else rng.bit_generator.state,
        "epoch": epoch,
        "step": step,
    }
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        pickle.dump(payload, f, protocol=4)
    os.replace(tmp, path)


def load_checkpoint(path: str) -> dict:
    with open(path, "rb") as f:
        payload = pickle.load(f)
    version = payload.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise TrainError(f"checkpoint {path} has format_version {version}, expected {CHECKPOINT_VERSION}")
    return payload


def restore_model(payload: dict, expected: ModelConfig | None = None) -> ConditionalDenoiser:
    """Rebuild the model from a checkpoint payload; reject config mismatches."""
    config = ModelConfig(**payload["model_config"])
    if expected is not None and config != expected:
        diffs = [
            f"{name}: checkpoint={getattr(config, name)} requested={getattr(expected, name)}"
            for name in asdict(config)
            if getattr(config, name) != getattr(expected, name)
        ]
        raise TrainError("checkpoint config mismatch: " + "; ".join(diffs))
    model = ConditionalDenoiser(config)
    state = {k: torch.from_numpy(np.asarray(v)) for k, v in payload["params"].items()}
    model.load_state_dict(state)
    model.eval()
    return model


def restore_schedule(payload: dict) -> NoiseSchedule:
    s = payload["schedule"]
    return make_schedule(s["timesteps"], s["beta_start"], s["beta_end"])


def train(
    corpus: TensorCorpus,
    cfg: TrainConfig,
    model: ConditionalDenoiser,
    out_dir: str,
    val_corpus: TensorCorpus | None = None,
    resume_from: str | None = None,
    log=None,
) -> str:
    """Run the epoch loop; returns the path of the final checkpoint.

    Checkpoints land in out_dir as ckpt_<epoch>.pkl plus final.pkl, with a
    line-delimited JSON training log beside them. Resuming restores the
    parameters, optimizer moments, and RNG state saved at an epoch boundary,
    so the continued run retraces the uninterrupted one.
    """
    if len(corpus.ids) == 0:
        raise TrainError("training corpus is empty")
    os.makedirs(out_dir, exist_ok=True)
    sched = make_schedule(cfg.timesteps)
    optimizer = torch.optim.Adam(
        model.parameters(), lr=cfg.learning_rate, betas=ADAM_BETAS, eps=ADAM_EPS
    )
    rng = np.random.default_rng(cfg.seed)
    start_epoch = 0
    step = 0
    if resume_from is not None:
        payload = load_checkpoint(resume_from)
        config = ModelConfig(**payload["model_config"])
        if config != model.cfg:
            raise TrainError("resume checkpoint was trained with a different model config")
        model.load_state_dict({k: torch.from_numpy(np.asarray(v)) for k, v in payload["params"].items()})
        if payload["optimizer"] is not None:
            _optimizer_from_numpy(optimizer, payload["optimizer"])
        if payload["rng_state"] is not None:
            rng.bit_generator.state = payload["rng_state"]
        start_epoch = payload["epoch"] + 1
        step = payload["step"]

    log_path = os.path.join(out_dir, "train_log.jsonl")
    t0 = time.monotonic()
    with open(log_path, "a") as log_file:
        for epoch in range(start_epoch, cfg.epochs):
            for batch in corpus.batches(cfg.batch_size, rng=rng):
                step_loss = train_step(batch, model, optimizer, sched, cfg, rng)
                step += 1
                record = {
                    "step": step,
                    "epoch": epoch,
                    "loss": step_loss,
                    "lr": cfg.learning_rate,
                    "wall_time": time.monotonic() - t0,
                }
                log_file.write(json.dumps(record) + "\n")
            log_file.flush()

            if val_corpus is not None and cfg.val_interval and (epoch + 1) % cfg.val_interval == 0:
                # validation draws come from a derived stream so they cannot
                # perturb the training trajectory
                val = validation_loss(val_corpus, model, sched, cfg, np.random.default_rng([cfg.seed, epoch]))
                log_file.write(json.dumps({"step": step, "epoch": epoch, "val_loss": val}) + "\n")
                log_file.flush()
                if log is not None:
                    log(f"epoch {epoch}: val_loss {val:.4f}")

            if cfg.save_interval and (epoch + 1) % cfg.save_interval == 0:
                save_checkpoint(
                    os.path.join(out_dir, f"ckpt_{epoch:05d}.pkl"),
                    model, optimizer, cfg, sched, rng, epoch, step,
                )

    final_path = os.path.join(out_dir, "final.pkl")
    save_checkpoint(final_path, model, optimizer, cfg, sched, rng, cfg.epochs - 1, step)
    return final_path
