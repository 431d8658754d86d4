"""Mini-batch training and evaluation loops.

The loop owns all randomness (one generator seeded from the run config, used
for shuffling only), so a fixed (seed, config, dataset) triple reproduces the
same parameter trajectory, log lines, and checkpoint bytes. Log lines carry
no timestamps for that reason.
"""

from __future__ import annotations

import dataclasses
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import model as model_mod
from . import synth
from .ctc import ctc_loss_logits, forward_log_alpha, _augmented
from .decoding import best_path_from_scores, edit_distance
from .errors import ConfigError
from .model import Model
from .optim import clip_gradient_norm, make_optimizer, zero_grads
from .tensor import log_softmax_rows


@dataclasses.dataclass
class TrainSettings:
    optimizer: str = "adadelta"
    rho: float = 0.9
    eps: float = 1e-6
    lr: float = 0.01
    mu: float = 0.9
    batch_size: int = 16
    epochs: int = 10
    max_steps: Optional[int] = None
    clip_norm: Optional[float] = None
    seed: int = 0
    stop_val_accuracy: Optional[float] = None
    eval_every_steps: Optional[int] = None  # default: once per epoch
    val_subset: Optional[int] = None  # cap validation cost on large splits


@dataclasses.dataclass
class EvalMetrics:
    samples: int
    sequence_accuracy: float
    mean_edit_distance: float
    mean_loss: float
    infeasible: int


@dataclasses.dataclass
class EpochLog:
    epoch: int
    step: int
    train_loss: float
    val_accuracy: float
    val_loss: float
    skipped_targets: int


@dataclasses.dataclass
class TrainResult:
    steps: int
    epochs_run: int
    best_val_accuracy: float
    history: list[EpochLog]


def _sequence_nll(log_probs: np.ndarray, label: str, alphabet) -> Optional[float]:
    """Loss of one sample from its log-softmax scores; None when infeasible."""
    aug = _augmented(alphabet.encode(label))
    if len(aug) > 2 * log_probs.shape[0] + 1:
        return None
    alpha = forward_log_alpha(log_probs, aug)
    tail = alpha[-1, -1]
    if len(aug) > 1:
        tail = np.logaddexp(tail, alpha[-1, -2])
    if tail == -np.inf:
        return None
    return float(-tail)


def evaluate(model: Model, images_u8: np.ndarray, labels: Sequence[str],
             batch_size: int = 64) -> EvalMetrics:
    """Lexicon-free metrics over one split: exact match, edit distance, loss."""
    total = len(labels)
    correct = 0
    distance_sum = 0
    loss_sum = 0.0
    feasible = 0
    infeasible = 0
    for start in range(0, total, batch_size):
        chunk = images_u8[start : start + batch_size]
        scores = model.scores_batch(synth.batch_to_input(chunk))
        for i in range(chunk.shape[0]):
            label = labels[start + i]
            decoded = best_path_from_scores(scores[i], model.alphabet)
            correct += decoded == label
            distance_sum += edit_distance(decoded, label)
            nll = _sequence_nll(log_softmax_rows(scores[i]), label, model.alphabet)
            if nll is None:
                infeasible += 1
            else:
                loss_sum += nll
                feasible += 1
    return EvalMetrics(
        samples=total,
        sequence_accuracy=correct / total,
        mean_edit_distance=distance_sum / total,
        mean_loss=loss_sum / feasible if feasible else float("inf"),
        infeasible=infeasible,
    )


def check_trainable(model: Model, labels: Sequence[str], width: int) -> None:
    """Reject configurations that cannot possibly fit the data."""
    frames = model.config.frames_for_width(width)
    longest = max((len(label) for label in labels), default=0)
    if longest > frames:
        raise ConfigError(
            f"labels up to length {longest} cannot align to {frames} frames "
            f"(width {width}); widen the input or shorten the labels"
        )
    valid = set(model.alphabet.labels)
    for label in labels:
        if not set(label) <= valid:
            raise ConfigError(
                f"label {label!r} uses symbols outside the model alphabet"
            )


def train(model: Model, dataset_dir: str | Path, settings: TrainSettings,
          checkpoint_path: Optional[Path] = None,
          log_path: Optional[Path] = None,
          echo: Callable[[str], None] = print) -> TrainResult:
    """Minimize the summed negative log-likelihood with mini-batch descent.

    Saves the checkpoint with the best validation sequence accuracy (ties
    broken by lower validation loss). Targets that admit no alignment are
    skipped and counted, never fatal.
    """
    train_images, train_labels = synth.load_split(dataset_dir, "train")
    val_images, val_labels = synth.load_split(dataset_dir, "val")
    width = train_images.shape[3]
    check_trainable(model, list(train_labels) + list(val_labels), width)
    if settings.val_subset is not None:
        val_images = val_images[: settings.val_subset]
        val_labels = val_labels[: settings.val_subset]

    params = model.parameter_tensors()
    optimizer = make_optimizer(settings.optimizer, params, rho=settings.rho,
                               eps=settings.eps, lr=settings.lr, mu=settings.mu)
    rng = np.random.default_rng(settings.seed)

    log_lines = ["epoch\tstep\ttrain_loss\tval_accuracy\tval_loss\tskipped"]
    history: list[EpochLog] = []
    best_accuracy = -1.0
    best_loss = float("inf")
    step = 0
    skipped_total = 0
    stop = False

    def consider_checkpoint(accuracy: float, loss: float) -> None:
        nonlocal best_accuracy, best_loss
        if accuracy > best_accuracy or (accuracy == best_accuracy
                                        and loss < best_loss):
            best_accuracy = accuracy
            best_loss = loss
            if checkpoint_path is not None:
                model_mod.save(model, checkpoint_path, step=step)

    epochs_run = 0
    for epoch in range(1, settings.epochs + 1):
        order = rng.permutation(len(train_labels))
        epoch_loss = 0.0
        epoch_feasible = 0
        for start in range(0, len(order), settings.batch_size):
            batch = order[start : start + settings.batch_size]
            images = synth.batch_to_input(train_images[batch])
            labels = [train_labels[i] for i in batch]
            logits = model.forward_batch(images, train=True)
            loss, feasible, skipped = ctc_loss_logits(logits, labels,
                                                      model.alphabet)
            skipped_total += skipped
            if feasible:
                loss.backward()
                if settings.clip_norm is not None:
                    clip_gradient_norm(params, settings.clip_norm)
                optimizer.step()
            zero_grads(params)
            epoch_loss += loss.item()
            epoch_feasible += feasible
            step += 1
            if settings.max_steps is not None and step >= settings.max_steps:
                stop = True
            if (settings.eval_every_steps is not None
                    and step % settings.eval_every_steps == 0):
                metrics = evaluate(model, val_images, val_labels)
                consider_checkpoint(metrics.sequence_accuracy, metrics.mean_loss)
                echo(f"step {step}: val_accuracy={metrics.sequence_accuracy:.4f}")
                if (settings.stop_val_accuracy is not None
                        and metrics.sequence_accuracy >= settings.stop_val_accuracy):
                    stop = True
            if stop:
                break

        metrics = evaluate(model, val_images, val_labels)
        consider_checkpoint(metrics.sequence_accuracy, metrics.mean_loss)
        train_loss = epoch_loss / max(epoch_feasible, 1)
        entry = EpochLog(epoch, step, train_loss, metrics.sequence_accuracy,
                         metrics.mean_loss, skipped_total)
        history.append(entry)
        log_lines.append(
            f"{entry.epoch}\t{entry.step}\t{entry.train_loss:.6f}"
            f"\t{entry.val_accuracy:.6f}\t{entry.val_loss:.6f}"
            f"\t{entry.skipped_targets}"
        )
        echo(
            f"epoch {epoch}: loss={train_loss:.4f} "
            f"val_acc={metrics.sequence_accuracy:.4f} skipped={skipped_total}"
        )
        epochs_run = epoch
        if (settings.stop_val_accuracy is not None
                and metrics.sequence_accuracy >= settings.stop_val_accuracy):
            stop = True
        if stop:
            break

    if log_path is not None:
        Path(log_path).write_text("\n".join(log_lines) + "\n", encoding="utf-8")
    return TrainResult(step, epochs_run, best_accuracy, history)
