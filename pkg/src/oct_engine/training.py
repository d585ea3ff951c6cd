"""Losses, optimizers, the two-phase training loop, checkpoints, ensembling.

Phase one pretrains the two-head variational encoder; phase two trains the
classifier, optionally initialized from a phase-one checkpoint by name/shape
matching.  Everything is deterministic for a fixed seed: batch sampling,
augmentation, dropout, latent noise, and therefore the metrics log and the
saved checkpoints.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import metrics as M
from . import tensor as T
from .data import AugmentConfig, Batch, HaltonSampler, next_batch
from .models import ModelConfig, build_classifier
from .tensor import Graph, Parameter, Tensor


class TrainingError(Exception):
    """Aborted training run (non-finite loss, bad phase wiring)."""


class CheckpointError(Exception):
    """Unreadable or malformed checkpoint file."""


# ---------------------------------------------------------------------------
# losses


def label_smooth(labels: np.ndarray, num_classes: int, epsilon: float) -> np.ndarray:
    """Soft targets: epsilon/K everywhere plus 1-epsilon on the true class."""
    if not (0.0 <= epsilon < 1.0):
        raise ValueError(f"epsilon must be in [0, 1), got {epsilon}")
    labels = np.asarray(labels)
    out = np.full((len(labels), num_classes), epsilon / num_classes, dtype=np.float64)
    out[np.arange(len(labels)), labels] += 1.0 - epsilon
    return out


def weighted_ce_loss(logits: Tensor, labels: np.ndarray, weights: np.ndarray,
                     epsilon: float = 0.0) -> Tensor:
    """Sample-weighted cross entropy against smoothed targets.

    loss = sum_n w_n * CE_n / sum_n w_n, differentiable w.r.t. the logits.
    """
    weights = np.asarray(weights, dtype=np.float64)
    if np.any(weights <= 0):
        raise ValueError("all sample weights must be > 0")
    n, k = logits.shape
    if len(labels) != n or len(weights) != n:
        raise ValueError("labels/weights length must match the logit batch")
    g = logits.graph
    targets = g.constant(label_smooth(labels, k, epsilon))
    ce = T.scale(T.reduce(T.mul(T.log_softmax(logits), targets), "sum", axes=(1,)), -1.0)
    wnorm = g.constant(weights / weights.sum())
    return T.reduce(T.mul(ce, wnorm), "sum")


def vae_total_loss(recon: Tensor, target: Tensor, mu: Tensor, logvar: Tensor,
                   logits: Tensor, labels: np.ndarray, weights: np.ndarray,
                   beta: float = 1.0, lam: float = 1.0,
                   epsilon: float = 0.0) -> tuple[Tensor, dict]:
    """Composite VAE objective: MSE + beta * KL + lambda * weighted CE.

    KL is the closed form against a standard normal, averaged over the batch.
    Returns the scalar loss tensor and the parts as plain floats.
    """
    if recon.shape != target.shape:
        raise ValueError(f"recon shape {recon.shape} != target shape {target.shape}")
    if mu.shape != logvar.shape:
        raise ValueError(f"mu shape {mu.shape} != logvar shape {logvar.shape}")
    diff = T.sub(recon, target)
    mse = T.reduce(T.mul(diff, diff), "mean")
    term = T.sub(T.add_scalar(logvar, 1.0), T.add(T.mul(mu, mu), T.exp(logvar)))
    kl = T.scale(T.reduce(T.reduce(term, "sum", axes=(1,)), "mean"), -0.5)
    ce = weighted_ce_loss(logits, labels, weights, epsilon)
    total = T.add(mse, T.add(T.scale(kl, beta), T.scale(ce, lam)))
    parts = {"mse": float(mse.data), "kl": float(kl.data), "ce": float(ce.data)}
    return total, parts


# ---------------------------------------------------------------------------
# learning rate schedule


@dataclass
class LRSchedule:
    base_lr: float = 0.01
    end_lr: float = 1e-5
    power: float = 2.0
    total_steps: int = 1000

    def validate(self):
        if self.base_lr < 0 or self.end_lr < 0:
            raise ValueError("learning rates must be >= 0")
        if self.power <= 0:
            raise ValueError(f"power must be > 0, got {self.power}")
        if self.total_steps < 1:
            raise ValueError(f"total_steps must be >= 1, got {self.total_steps}")


def poly_lr(step: int, schedule: LRSchedule) -> float:
    """Polynomial decay from base_lr to end_lr over total_steps (clamped after)."""
    if step >= schedule.total_steps:
        return schedule.end_lr
    frac = 1.0 - step / schedule.total_steps
    return (schedule.base_lr - schedule.end_lr) * frac ** schedule.power + schedule.end_lr


# ---------------------------------------------------------------------------
# optimizers


@dataclass
class OptimizerState:
    kind: str                                  # adam | nesterov
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    momentum: float = 0.9
    step: int = 0
    slots: dict = field(default_factory=dict)  # name -> dict of buffers

    def _slot(self, name: str, shape) -> dict:
        s = self.slots.get(name)
        if s is None:
            if self.kind == "adam":
                s = {"m": np.zeros(shape, dtype=np.float32),
                     "v": np.zeros(shape, dtype=np.float32)}
            else:
                s = {"vel": np.zeros(shape, dtype=np.float32)}
            self.slots[name] = s
        return s


def adam_step(params, grads: dict, state: OptimizerState, lr: float) -> None:
    """Bias-corrected Adam update, in place on the parameters."""
    if state.kind != "adam":
        raise ValueError(f"optimizer state kind is {state.kind!r}, expected adam")
    state.step += 1
    t = state.step
    for p in _iter_params(params):
        g = grads.get(p.name)
        if g is None:
            continue
        if g.shape != p.data.shape:
            raise ValueError(f"{p.name}: grad shape {g.shape} != {p.data.shape}")
        slot = state._slot(p.name, p.data.shape)
        slot["m"] = state.beta1 * slot["m"] + (1.0 - state.beta1) * g
        slot["v"] = state.beta2 * slot["v"] + (1.0 - state.beta2) * g * g
        mhat = slot["m"] / (1.0 - state.beta1 ** t)
        vhat = slot["v"] / (1.0 - state.beta2 ** t)
        p.data -= (lr * mhat / (np.sqrt(vhat) + state.eps)).astype(np.float32)


def nesterov_step(params, grads: dict, state: OptimizerState, lr: float) -> None:
    """Nesterov momentum: v <- mu*v - lr*g; p <- p + mu*v - lr*g."""
    if state.kind != "nesterov":
        raise ValueError(f"optimizer state kind is {state.kind!r}, expected nesterov")
    state.step += 1
    mu = state.momentum
    for p in _iter_params(params):
        g = grads.get(p.name)
        if g is None:
            continue
        if g.shape != p.data.shape:
            raise ValueError(f"{p.name}: grad shape {g.shape} != {p.data.shape}")
        slot = state._slot(p.name, p.data.shape)
        slot["vel"] = mu * slot["vel"] - lr * g
        p.data += (mu * slot["vel"] - lr * g).astype(np.float32)


def optimizer_step(params, grads: dict, state: OptimizerState, lr: float) -> None:
    if state.kind == "adam":
        adam_step(params, grads, state, lr)
    else:
        nesterov_step(params, grads, state, lr)


def _iter_params(params):
    if isinstance(params, dict):
        return [p for p in params.values() if p.trainable]
    return [p for p in params if p.trainable]


def clip_global_norm(grads: dict, max_norm: float) -> dict:
    """Scale all gradients so their global L2 norm is at most max_norm."""
    if max_norm <= 0:
        raise ValueError(f"max_norm must be > 0, got {max_norm}")
    total = 0.0
    for g in grads.values():
        total += float(np.sum(g.astype(np.float64) ** 2))
    norm = np.sqrt(total)
    if norm > max_norm:
        scale = np.float32(max_norm / norm)
        for g in grads.values():
            g *= scale
    return grads


def global_grad_norm(grads: dict) -> float:
    return float(np.sqrt(sum(np.sum(g.astype(np.float64) ** 2) for g in grads.values())))


# ---------------------------------------------------------------------------
# checkpoints

CHECKPOINT_MAGIC = b"OCTC"
CHECKPOINT_VERSION = 1


@dataclass
class Checkpoint:
    version: int
    tensors: dict            # name -> float32 ndarray
    metadata: dict


def save_checkpoint(model_or_tensors, path, metadata: dict | None = None) -> Path:
    """Write named tensors plus JSON metadata in the binary wire format.

    Layout: magic, u32 version, u32 tensor count, then per tensor
    (u32 name length, name, u32 ndim, u64 dims, float32 LE payload),
    then the UTF-8 metadata block to end of file.
    """
    tensors = getattr(model_or_tensors, "named_tensors", lambda: model_or_tensors)()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = dict(metadata or {})
    if hasattr(model_or_tensors, "cfg"):
        meta.setdefault("config", model_or_tensors.cfg.to_dict())
        meta.setdefault("config_digest", model_or_tensors.cfg.digest())
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(tensors)))
        for name in sorted(tensors):
            arr = np.ascontiguousarray(tensors[name], dtype="<f4")
            nb = name.encode("utf-8")
            fh.write(struct.pack("<I", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.tobytes())
        fh.write(json.dumps(meta, sort_keys=True).encode("utf-8"))
    return path


def load_checkpoint(path) -> Checkpoint:
    """Read a checkpoint, verifying magic, version, and payload lengths."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read {path}: {e}") from e
    if raw[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:4]!r}")
    if len(raw) < 12:
        raise CheckpointError(f"{path}: truncated header")
    version, count = struct.unpack_from("<II", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: version {version} unsupported (expected {CHECKPOINT_VERSION})"
        )
    off = 12
    tensors = {}
    for _ in range(count):
        try:
            (nlen,) = struct.unpack_from("<I", raw, off)
            off += 4
            name = raw[off:off + nlen].decode("utf-8")
            if len(raw[off:off + nlen]) < nlen:
                raise struct.error("name")
            off += nlen
            (ndim,) = struct.unpack_from("<I", raw, off)
            off += 4
            dims = struct.unpack_from(f"<{ndim}Q", raw, off)
            off += 8 * ndim
            size = int(np.prod(dims, dtype=np.int64)) if ndim else 1
            payload = raw[off:off + 4 * size]
            if len(payload) < 4 * size:
                raise struct.error("payload")
            arr = np.frombuffer(payload, dtype="<f4").reshape(dims).copy()
            off += 4 * size
        except struct.error as e:
            raise CheckpointError(f"{path}: truncated tensor table ({e})") from e
        tensors[name] = arr
    meta_blob = raw[off:]
    try:
        metadata = json.loads(meta_blob.decode("utf-8")) if meta_blob else {}
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: bad metadata block: {e}") from e
    return Checkpoint(version=version, tensors=tensors, metadata=metadata)


def load_classifier(path):
    """Rebuild the classifier recorded in a checkpoint and load its weights."""
    ckpt = load_checkpoint(path)
    cfg_dict = ckpt.metadata.get("config")
    if cfg_dict is None:
        raise CheckpointError(f"{path}: checkpoint has no recorded model config")
    cfg = ModelConfig.from_dict(cfg_dict)
    model = build_classifier(cfg, seed=0)
    target = model.named_tensors()
    missing = [n for n in target if n not in ckpt.tensors]
    if missing:
        raise CheckpointError(f"{path}: checkpoint missing tensors: {missing[:5]}")
    for name, arr in target.items():
        if ckpt.tensors[name].shape != arr.shape:
            raise CheckpointError(
                f"{path}: {name} has shape {ckpt.tensors[name].shape}, "
                f"expected {arr.shape}"
            )
        arr[:] = ckpt.tensors[name]
    return model


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainSettings:
    phase: str = "classifier"              # classifier | vae
    optimizer: str = "nesterov"            # nesterov | adam
    schedule: LRSchedule = field(default_factory=LRSchedule)
    max_steps: int = 500
    batch_size: int = 16
    balanced: bool = True
    clip_norm: float = 5.0
    eval_every: int = 50
    label_smoothing: float = 0.1
    vae_beta: float = 1.0
    vae_lambda: float = 1.0
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0

    def validate(self):
        if self.phase not in ("classifier", "vae"):
            raise ValueError(f"phase must be classifier or vae, got {self.phase!r}")
        if self.optimizer not in ("nesterov", "adam"):
            raise ValueError(f"optimizer must be nesterov or adam, got {self.optimizer!r}")
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.clip_norm <= 0:
            raise ValueError("clip_norm must be > 0")
        if self.eval_every < 1:
            raise ValueError("eval_every must be >= 1")
        self.schedule.validate()


def predict_proba(model, images: np.ndarray, batch_size: int = 32) -> np.ndarray:
    """Inference-mode softmax probabilities, batched."""
    outs = []
    for i in range(0, len(images), batch_size):
        outs.append(model.predict_proba(images[i:i + batch_size]))
    return np.concatenate(outs, axis=0)


def evaluate_model(model, records, aug_cfg: AugmentConfig, batch_size: int = 32) -> dict:
    """Deterministic eval metrics on a record list (accuracy, AUC, macro F1)."""
    from .data import decode_image, eval_transform

    images = np.stack([eval_transform(decode_image(r.path), aug_cfg) for r in records])
    labels = np.asarray([r.label for r in records])
    probs = predict_proba(model, images, batch_size)
    preds = probs.argmax(axis=1)
    k = probs.shape[1]
    cm = M.confusion_matrix(preds, labels, k)
    prf = M.prf1(cm)
    f1s = [row["f1"] for row in prf if row["f1"] is not None]
    out = {
        "accuracy": float((preds == labels).mean()),
        "macro_f1": float(np.mean(f1s)) if f1s else None,
    }
    binary_labels = (labels != 0).astype(int)
    if len(set(binary_labels)) == 2:
        scores = M.collapse_to_binary(probs)
        out["binary_auc"] = M.roc_auc(scores, binary_labels).auc
    else:
        out["binary_auc"] = None
    return out


def train(model, records, settings: TrainSettings, aug_cfg: AugmentConfig,
          out_dir, val_records=None, extra_metadata: dict | None = None) -> dict:
    """Run one training phase and write checkpoints plus a JSONL metrics log.

    Saves ``checkpoints/last.ckpt`` and ``checkpoints/best.ckpt`` (best by
    validation binary AUC when a validation set is given, otherwise the
    final weights).  Raises TrainingError on a non-finite loss.
    """
    settings.validate()
    aug_cfg.validate()
    if not records:
        raise TrainingError("no training records")
    is_vae = settings.phase == "vae"
    if is_vae != (model.cfg.head == "vae_twohead"):
        raise TrainingError(
            f"phase {settings.phase!r} does not match model head {model.cfg.head!r}"
        )
    out_dir = Path(out_dir)
    ckpt_dir = out_dir / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    metrics_path = out_dir / "metrics.jsonl"

    batch_rng = np.random.default_rng([settings.seed, 1])
    dropout_rng = np.random.default_rng([settings.seed, 2])
    noise_rng = np.random.default_rng([settings.seed, 3])
    sampler = HaltonSampler(aug_cfg.sampler_dims(), scramble_seed=settings.seed,
                            quasi=aug_cfg.quasi_random)
    state = OptimizerState(kind=settings.optimizer, beta1=settings.beta1,
                           beta2=settings.beta2, eps=settings.adam_eps,
                           momentum=settings.momentum)
    cache: dict = {}
    history = []
    best_auc = -1.0
    best_tensors = None
    best_step = -1

    with open(metrics_path, "w", encoding="utf-8") as log:
        for step in range(settings.max_steps):
            lr = poly_lr(step, settings.schedule)
            batch = next_batch(records, settings.batch_size, settings.balanced,
                               batch_rng, aug_cfg, sampler, cache,
                               num_classes=model.cfg.num_classes)
            g = Graph("f32")
            x = g.constant(batch.images)
            if is_vae:
                recon, mu, logvar, logits = model.forward(g, x, "train", rng=noise_rng)
                loss, parts = vae_total_loss(
                    recon, x, mu, logvar, logits, batch.labels, batch.weights,
                    beta=settings.vae_beta, lam=settings.vae_lambda,
                    epsilon=settings.label_smoothing,
                )
            else:
                logits = model.forward(g, x, "train", rng=dropout_rng)
                loss = weighted_ce_loss(logits, batch.labels, batch.weights,
                                        settings.label_smoothing)
                parts = {"ce": float(loss.data)}
            loss_value = float(loss.data)
            if not np.isfinite(loss_value):
                raise TrainingError(
                    f"non-finite loss at step {step}: {loss_value} (parts {parts})"
                )
            grads = g.param_grads(g.backward(loss))
            clip_global_norm(grads, settings.clip_norm)
            optimizer_step(model.store.params, grads, state, lr)

            last_step = step == settings.max_steps - 1
            if step % settings.eval_every == 0 or last_step:
                metrics = None
                if not is_vae and val_records:
                    metrics = evaluate_model(model, val_records, aug_cfg)
                    auc = metrics.get("binary_auc")
                    if auc is not None and auc > best_auc:
                        best_auc = auc
                        best_step = step
                        best_tensors = {k: v.copy()
                                        for k, v in model.named_tensors().items()}
                record = {"step": step, "lr": lr, "loss": loss_value,
                          "loss_parts": parts, "metrics": metrics}
                log.write(json.dumps(record, sort_keys=True) + "\n")
                history.append(record)

    shared_meta = {"phase": settings.phase, "seed": settings.seed,
                   "augment": aug_cfg.to_dict()}
    shared_meta.update(extra_metadata or {})
    final_meta = {"step": settings.max_steps - 1,
                  "metrics": history[-1]["metrics"], **shared_meta}
    last_path = save_checkpoint(model, ckpt_dir / "last.ckpt", final_meta)
    if best_tensors is None:
        best_tensors = model.named_tensors()
        best_step = settings.max_steps - 1
    best_meta = {"step": best_step, "config": model.cfg.to_dict(),
                 "config_digest": model.cfg.digest(), **shared_meta}
    best_path = save_checkpoint(best_tensors, ckpt_dir / "best.ckpt", best_meta)
    return {"last": last_path, "best": best_path, "metrics_path": metrics_path,
            "history": history}


# ---------------------------------------------------------------------------
# ensembling


def ensemble_predict(checkpoint_paths, images: np.ndarray,
                     batch_size: int = 32) -> np.ndarray:
    """Average softmax probabilities uniformly across checkpointed models."""
    if not checkpoint_paths:
        raise ValueError("ensemble needs at least one checkpoint")
    total = None
    classes = None
    for path in checkpoint_paths:
        model = load_classifier(path)
        probs = predict_proba(model, images, batch_size)
        if classes is None:
            classes = probs.shape[1]
        elif probs.shape[1] != classes:
            raise ValueError(
                f"{path}: model has {probs.shape[1]} classes, expected {classes}"
            )
        total = probs if total is None else total + probs
    return total / len(checkpoint_paths)


def average_probabilities(prob_rows) -> np.ndarray:
    """Uniform average of per-model probability matrices (rows stay normalized)."""
    mats = [np.asarray(p, dtype=np.float64) for p in prob_rows]
    if not mats:
        raise ValueError("nothing to average")
    first = mats[0].shape
    for m in mats:
        if m.shape != first:
            raise ValueError(f"probability shapes differ: {m.shape} vs {first}")
    return np.mean(mats, axis=0)
