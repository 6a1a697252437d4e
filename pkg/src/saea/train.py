"""Joint minibatch optimization of the base model and the error coefficients.

A single optimizer and learning rate update the flat model parameters and
every error-model payload array, driven by the adjusted loss. Shuffling is
seeded, gradient reduction order is fixed, and the best-validation state is
retained alongside the final one, so a (seed, config) pair pins the run
bit-for-bit.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass, field

import numpy as np

from .adjust import (
    ErrorModel,
    RegularizerConfig,
    default_regularizer,
    predict_windows,
    saea_loss,
    saea_predict,
    spectral_radius,
)
from .data import WindowSet, make_windows, shift_with_mean
from .errors import DivergenceError, ValidationError
from .forecaster import Forecaster, forecaster_from_blob

CHECKPOINT_FORMAT_VERSION = 1

RMSPROP_RHO = 0.9
RMSPROP_EPS = 1e-8


@dataclass
class TrainConfig:
    """Optimization and regularization settings for one training run.

    alpha/beta/rank of None resolve to the built-in defaults for the error
    model's kind at fit time.
    """

    epochs: int = 300
    learning_rate: float = 5e-4
    batch_size: int = 50
    optimizer: str = "rmsprop"  # rmsprop | sgd
    alpha: float | None = None
    beta: float | None = None
    rank: int | None = None
    history: int = 12
    horizon_step: int = 0
    var_order: int = 1
    seed: int = 0
    shuffle: bool = True
    grad_clip: float | None = None
    squared_structural_penalty: bool = False

    def validate(self) -> None:
        if self.epochs < 1:
            raise ValidationError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValidationError("batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ValidationError("learning_rate must be > 0")
        if self.optimizer not in ("rmsprop", "sgd"):
            raise ValidationError(f"unknown optimizer {self.optimizer!r}")
        if self.var_order not in (1, 2):
            raise ValidationError("var_order must be 1 or 2")


@dataclass
class TrainReport:
    """Per-epoch training curves plus the retained checkpoints."""

    train_loss: list = field(default_factory=list)
    val_mse: list = field(default_factory=list)
    radius: list = field(default_factory=list)
    epoch_seconds: list = field(default_factory=list)
    best_epoch: int = -1
    best_val_mse: float = float("inf")
    best_checkpoint: dict | None = None
    final_checkpoint: dict | None = None
    diverged: bool = False
    epochs_run: int = 0


def rmsprop_step(params, grads, state, lr, rho: float = RMSPROP_RHO, eps: float = RMSPROP_EPS):
    """One RMSProp update; returns (new_params, new_state).

    state <- rho*state + (1-rho)*grads^2
    params <- params - lr * grads / sqrt(state + eps)
    """
    params = np.asarray(params, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    state = np.asarray(state, dtype=np.float64)
    if params.shape != grads.shape or params.shape != state.shape:
        raise ValidationError("params, grads, and state must share a shape")
    new_state = rho * state + (1.0 - rho) * grads * grads
    new_params = params - lr * grads / np.sqrt(new_state + eps)
    return new_params, new_state


def sgd_step(params, grads, lr):
    params = np.asarray(params, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if params.shape != grads.shape:
        raise ValidationError("params and grads must share a shape")
    return params - lr * grads


def checkpoint_blob(model: Forecaster, em: ErrorModel | None, extra: dict | None = None) -> dict:
    blob = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "model": model.to_blob(),
        "error_model": em.to_blob() if em is not None else None,
    }
    if extra:
        blob.update(extra)
    return blob


def load_checkpoint_blob(blob: dict) -> tuple[Forecaster, ErrorModel | None]:
    if "format_version" not in blob:
        raise ValidationError("checkpoint missing format_version")
    model = forecaster_from_blob(blob["model"])
    em = ErrorModel.from_blob(blob["error_model"]) if blob.get("error_model") else None
    return model, em


def save_checkpoint(path, model: Forecaster, em: ErrorModel | None, extra: dict | None = None):
    """Atomic write (temp file then rename) of a model+error-model blob."""
    blob = checkpoint_blob(model, em, extra)
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(blob, fh, sort_keys=True)
    os.replace(tmp, path)
    return blob


def load_checkpoint(path) -> tuple[Forecaster, ErrorModel | None]:
    with open(path, encoding="utf-8") as fh:
        return load_checkpoint_blob(json.load(fh))


def resolve_regularizer(cfg: TrainConfig, em: ErrorModel | None) -> RegularizerConfig:
    if em is None:
        return RegularizerConfig(alpha=0.0)
    reg = default_regularizer(em.kind, alpha=cfg.alpha, beta=cfg.beta, rank=cfg.rank)
    if cfg.squared_structural_penalty:
        reg = RegularizerConfig(
            alpha=reg.alpha,
            beta=reg.beta,
            rank=reg.rank,
            squared_structural_penalty=True,
        )
    return reg


def _clip_gradients(grad_theta, payload_grads, limit):
    total = float(np.sum(grad_theta * grad_theta))
    for g in payload_grads.values():
        total += float(np.sum(g * g))
    norm = np.sqrt(total)
    if norm <= limit or norm == 0.0:
        return grad_theta, payload_grads
    scale = limit / norm
    return grad_theta * scale, {k: v * scale for k, v in payload_grads.items()}


def fit(
    model: Forecaster,
    em: ErrorModel | None,
    cfg: TrainConfig,
    train_windows: WindowSet,
    val_windows: WindowSet,
) -> TrainReport:
    """Run the full training loop; mutates model and em in place.

    Every epoch records the mean batch loss, validation MSE of the adjusted
    predictions, and the spectral radius of the error coefficients. The best
    validation state and the final state are both kept as checkpoint blobs.
    A non-finite loss aborts with the last finished epoch's state retained.
    """
    cfg.validate()
    if train_windows.batch == 0 or val_windows.batch == 0:
        raise ValidationError("train and validation window sets must be nonempty")
    reg = resolve_regularizer(cfg, em)
    rng = np.random.default_rng(cfg.seed)
    theta = model.get_params()
    opt_state = {"theta": np.zeros_like(theta)}
    if em is not None:
        opt_state.update({name: np.zeros_like(arr) for name, arr in em.payload.items()})

    report = TrainReport()
    last_good = checkpoint_blob(model, em, {"epoch": -1})
    b_train = train_windows.batch
    num_batches = (b_train + cfg.batch_size - 1) // cfg.batch_size
    for epoch in range(cfg.epochs):
        started = time.perf_counter()
        order = rng.permutation(b_train) if cfg.shuffle else np.arange(b_train)
        epoch_losses = np.empty(num_batches)
        try:
            for i in range(num_batches):
                idx = order[i * cfg.batch_size : (i + 1) * cfg.batch_size]
                result = saea_loss(model, em, reg, train_windows.take(idx))
                grad_theta, payload_grads = result.grad_theta, result.payload_grads
                if cfg.grad_clip is not None:
                    grad_theta, payload_grads = _clip_gradients(
                        grad_theta, payload_grads, cfg.grad_clip
                    )
                if cfg.optimizer == "rmsprop":
                    theta, opt_state["theta"] = rmsprop_step(
                        theta, grad_theta, opt_state["theta"], cfg.learning_rate
                    )
                    if em is not None:
                        for name in sorted(payload_grads):
                            em.payload[name], opt_state[name] = rmsprop_step(
                                em.payload[name],
                                payload_grads[name],
                                opt_state[name],
                                cfg.learning_rate,
                            )
                else:
                    theta = sgd_step(theta, grad_theta, cfg.learning_rate)
                    if em is not None:
                        for name in sorted(payload_grads):
                            em.payload[name] = sgd_step(
                                em.payload[name], payload_grads[name], cfg.learning_rate
                            )
                model.set_params(theta)
                epoch_losses[i] = result.loss
        except DivergenceError:
            # roll back to the end of the last finished epoch
            report.diverged = True
            restored_model, restored_em = load_checkpoint_blob(last_good)
            theta = restored_model.get_params()
            model.set_params(theta)
            if em is not None and restored_em is not None:
                em.payload = restored_em.payload
            break
        preds = predict_windows(model, em, val_windows)
        val_mse = float(np.mean((preds - val_windows.targets) ** 2))
        report.train_loss.append(float(epoch_losses.mean()))
        report.val_mse.append(val_mse)
        report.radius.append(spectral_radius(em) if em is not None else 0.0)
        report.epoch_seconds.append(time.perf_counter() - started)
        report.epochs_run = epoch + 1
        last_good = checkpoint_blob(model, em, {"epoch": epoch, "val_mse": val_mse})
        if val_mse < report.best_val_mse:
            report.best_val_mse = val_mse
            report.best_epoch = epoch
            report.best_checkpoint = last_good
    report.final_checkpoint = checkpoint_blob(
        model, em, {"epoch": report.epochs_run - 1, "diverged": report.diverged}
    )
    if report.best_checkpoint is None:
        report.best_checkpoint = report.final_checkpoint
    return report


@dataclass
class HorizonResult:
    horizon_step: int
    model: Forecaster | None
    em: ErrorModel | None
    report: TrainReport | None
    error: str | None = None

    @property
    def failed(self) -> bool:
        return self.error is not None


def fit_direct_multistep(
    model_factory,
    em_factory,
    cfg: TrainConfig,
    train_frame,
    val_frame,
    horizons,
) -> list:
    """Train one independent (model, error-model) pair per horizon step.

    model_factory(p) and em_factory(p) build fresh instances per horizon.
    Failures are captured per horizon so partial results survive.
    """
    if not horizons:
        raise ValidationError("horizons must be nonempty")
    results = []
    for p in horizons:
        try:
            train_ws = make_windows(train_frame, cfg.history, p)
            val_ws = make_windows(val_frame, cfg.history, p)
            model = model_factory(p)
            em = em_factory(p)
            run_cfg = TrainConfig(**{**cfg.__dict__, "horizon_step": p})
            report = fit(model, em, run_cfg, train_ws, val_ws)
            results.append(HorizonResult(p, model, em, report))
        except Exception as exc:  # per-horizon isolation
            results.append(HorizonResult(p, None, None, None, error=str(exc)))
    return results


def predict_recursive(
    model: Forecaster, em: ErrorModel | None, window, steps: int
) -> np.ndarray:
    """Roll a one-step model forward, feeding each adjusted prediction back in.

    The shifted window (and its mean pad) is recomputed from the rolled
    buffer at every step. Requires a model trained at horizon step 0.
    """
    if steps < 1:
        raise ValidationError("steps must be >= 1")
    buffer = np.array(window, dtype=np.float64)
    if buffer.ndim != 2:
        raise ValidationError("window must be (H, N)")
    out = np.empty((steps, buffer.shape[1]))
    for s in range(steps):
        shifted = shift_with_mean(buffer, 1)
        shifted2 = (
            shift_with_mean(buffer, 2)
            if em is not None and em.var_order == 2
            else None
        )
        pred = saea_predict(model, em, buffer, shifted, shifted2)
        out[s] = pred
        buffer = np.vstack([pred[None, :], buffer[:-1]])
    return out
