"""Multi-task pre-training loop with gradient accumulation and checkpoints."""

from __future__ import annotations

import hashlib
import io
import os

import numpy as np
import torch

from .config import ModelConfig, TrainConfig, config_to_dict
from .model import DocModel
from .pretrain import (
    PretrainError,
    build_dsp_batch,
    build_dtm_batch,
    build_mvlm_batch,
    compute_task_loss,
)

CHECKPOINT_VERSION = 1
_TASK_CODES = {"mvlm_clf": 1, "dsp": 2, "dtm": 3}


class CheckpointError(RuntimeError):
    pass


def derive_seed(master_seed: int, *parts) -> int:
    """Stable child seed for a (step, task, micro-batch) coordinate."""
    seq = np.random.SeedSequence([int(master_seed), *[int(p) for p in parts]])
    return int(seq.generate_state(1)[0])


class Pretrainer:
    """Runs the joint pre-training schedule over a document corpus.

    Every step runs each enabled task's gradient-accumulation micro-batches,
    sums the gradients, and applies exactly one AdamW update. All sampling
    and masking randomness is a pure function of (seed, step), so resuming
    from a checkpoint replays the uninterrupted run bit for bit.
    """

    def __init__(self, model: DocModel, docs, cfg: TrainConfig, doc_topics=None):
        self.model = model
        self.docs = list(docs)
        self.cfg = cfg
        self.doc_topics = doc_topics
        self.step = 0
        if "dtm" in cfg.tasks and doc_topics is None:
            raise PretrainError("DTM task enabled but no doc_topics provided")
        self.dsp_pool = [
            i for i, d in enumerate(self.docs)
            if min(len(d.pages), model.cfg.max_pages) >= 2
        ]
        if "dsp" in cfg.tasks and not self.dsp_pool:
            raise PretrainError(
                "DSP needs documents with at least 2 pages; regenerate the "
                "corpus with pages_min >= 2"
            )
        params = [p for p in model.parameters() if p.requires_grad]
        self.optimizer = torch.optim.AdamW(
            params, lr=cfg.learning_rate, weight_decay=cfg.weight_decay
        )

    def _sample(self, pool, batch_size, seed):
        rng = np.random.default_rng(seed)
        idx = rng.choice(len(pool), size=batch_size, replace=len(pool) < batch_size)
        return [self.docs[pool[i]] for i in idx]

    def _build_batch(self, task, seed):
        pool = self.dsp_pool if task == "dsp" else range(len(self.docs))
        batch_size, _ = self.cfg.batch_accum(task)
        docs = self._sample(list(pool), batch_size, seed)
        if task == "mvlm_clf":
            return build_mvlm_batch(docs, self.model.cfg, derive_seed(seed, 1))
        if task == "dsp":
            return build_dsp_batch(
                docs, self.model.cfg, derive_seed(seed, 1), self.cfg.shuffle_prob
            )
        return build_dtm_batch(docs, self.doc_topics, self.model.cfg)

    def _lr_for_step(self) -> float:
        lr = self.cfg.learning_rate
        if self.cfg.warmup_steps > 0 and self.step < self.cfg.warmup_steps:
            lr = lr * (self.step + 1) / self.cfg.warmup_steps
        return lr

    def multitask_step(self) -> dict:
        """One joint step: accumulate all task gradients, update once."""
        self.optimizer.zero_grad(set_to_none=True)
        losses = {}
        for task in self.cfg.tasks:
            _, accum = self.cfg.batch_accum(task)
            weight = self.cfg.task_weights.get(task, 1.0)
            task_total = 0.0
            for micro in range(accum):
                seed = derive_seed(self.cfg.seed, self.step, _TASK_CODES[task], micro)
                tb = self._build_batch(task, seed)
                loss, parts = compute_task_loss(self.model, tb)
                if not torch.isfinite(loss):
                    raise RuntimeError(
                        f"non-finite loss for task {task!r} at step {self.step}"
                    )
                (weight * loss / accum).backward()
                task_total += float(loss.detach()) / accum
                for name, value in parts.items():
                    losses.setdefault(name, 0.0)
                    losses[name] += value / accum
            losses[task] = task_total
        if self.cfg.max_grad_norm > 0:
            torch.nn.utils.clip_grad_norm_(
                self.model.parameters(), self.cfg.max_grad_norm
            )
        for group in self.optimizer.param_groups:
            group["lr"] = self._lr_for_step()
        self.optimizer.step()
        self.optimizer.zero_grad(set_to_none=True)
        self.step += 1
        return losses

    def train(self, num_steps, log_fn=None, checkpoint_dir=None) -> list:
        history = []
        for _ in range(num_steps):
            losses = self.multitask_step()
            history.append(losses)
            if log_fn is not None:
                for task in self.cfg.tasks:
                    log_fn(f"step={self.step} task={task} loss={losses[task]:.6f}")
            if (checkpoint_dir is not None
                    and self.cfg.checkpoint_interval > 0
                    and self.step % self.cfg.checkpoint_interval == 0):
                self.save_checkpoint(
                    os.path.join(checkpoint_dir, f"step_{self.step:06d}.pt")
                )
        return history

    def save_checkpoint(self, path: str) -> None:
        save_checkpoint(self.model, self.optimizer, self.step, self.cfg, path)

    def load_checkpoint(self, path: str) -> None:
        self.step = load_checkpoint(path, self.model, self.optimizer)


def save_checkpoint(model, optimizer, step, train_cfg, path) -> None:
    """Write an integrity-checked archive of model + optimizer + step."""
    payload = {
        "model_config": config_to_dict(model.cfg),
        "train_config": config_to_dict(train_cfg) if train_cfg else None,
        "step": int(step),
        "model_state": model.state_dict(),
        "optimizer_state": optimizer.state_dict() if optimizer else None,
    }
    buf = io.BytesIO()
    torch.save(payload, buf)
    data = buf.getvalue()
    container = {
        "version": CHECKPOINT_VERSION,
        "sha256": hashlib.sha256(data).hexdigest(),
        "payload": data,
    }
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    torch.save(container, path)


def read_checkpoint(path: str) -> dict:
    try:
        container = torch.load(path, weights_only=False)
    except Exception as exc:
        raise CheckpointError(f"corrupt or truncated checkpoint {path}: {exc}") from exc
    if not isinstance(container, dict) or "payload" not in container:
        raise CheckpointError(f"not a checkpoint file: {path}")
    if container.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"checkpoint version {container.get('version')} != "
            f"supported version {CHECKPOINT_VERSION}"
        )
    digest = hashlib.sha256(container["payload"]).hexdigest()
    if digest != container["sha256"]:
        raise CheckpointError(f"integrity check failed for {path}")
    return torch.load(io.BytesIO(container["payload"]), weights_only=False)


def load_checkpoint(path: str, model: DocModel, optimizer=None) -> int:
    """Restore parameters (and optimizer moments) in place; returns the step."""
    payload = read_checkpoint(path)
    stored = payload["model_config"]
    current = config_to_dict(model.cfg)
    for key in sorted(set(stored) | set(current)):
        if stored.get(key) != current.get(key):
            raise CheckpointError(
                f"model config mismatch on {key!r}: checkpoint has "
                f"{stored.get(key)!r}, model has {current.get(key)!r}"
            )
    model.load_state_dict(payload["model_state"])
    if optimizer is not None and payload["optimizer_state"] is not None:
        optimizer.load_state_dict(payload["optimizer_state"])
    return payload["step"]


def checkpoint_model_config(path: str) -> ModelConfig:
    from .config import dict_to_config

    return dict_to_config(ModelConfig, read_checkpoint(path)["model_config"])
