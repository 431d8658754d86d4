"""Sequence transcription probabilities over per-frame class distributions.

A recognizer emits one probability row per frame over the extended class set
(the task labels plus a reserved blank at index 0). A frame-level path is
collapsed to a label sequence by merging adjacent repeats and then deleting
blanks; the probability of a label sequence is the total probability of every
path that collapses to it. That sum is computed exactly by a dynamic program
over the blank-interleaved augmented sequence, run entirely in log space so
hundreds of frames cannot underflow.
"""

from __future__ import annotations

import itertools
from typing import Iterable, Sequence

import numpy as np

from .errors import AlphabetError, InfeasibleTargetError, UsageError
from .tensor import Tensor, log_softmax_rows, record_op

NEG_INF = -np.inf


class Alphabet:
    """The ordered label set; blank is index 0 of the extended set."""

    def __init__(self, labels: str, blank_char: str = "-"):
        if len(set(labels)) != len(labels):
            raise AlphabetError(f"labels contain duplicates: {labels!r}")
        if blank_char in labels:
            raise AlphabetError(f"blank {blank_char!r} collides with a label")
        if not labels:
            raise AlphabetError("alphabet needs at least one label")
        self.labels = labels
        self.blank_char = blank_char
        self._index = {ch: i + 1 for i, ch in enumerate(labels)}

    @property
    def num_labels(self) -> int:
        return len(self.labels)

    @property
    def num_classes(self) -> int:
        """Size of the extended set: labels plus blank."""
        return len(self.labels) + 1

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, Alphabet)
            and self.labels == other.labels
            and self.blank_char == other.blank_char
        )

    def __repr__(self) -> str:
        return f"Alphabet({self.labels!r}, blank={self.blank_char!r})"

    def encode(self, label: str) -> np.ndarray:
        """Map a label sequence to class indices (blanks not allowed)."""
        try:
            return np.array([self._index[ch] for ch in label], dtype=np.int64)
        except KeyError as exc:
            raise AlphabetError(f"symbol {exc.args[0]!r} not in alphabet") from None

    def decode(self, indices: Iterable[int]) -> str:
        out = []
        for i in indices:
            if not 1 <= i <= len(self.labels):
                raise AlphabetError(f"class index {i} has no label")
            out.append(self.labels[i - 1])
        return "".join(out)

    def path_to_indices(self, path: str) -> np.ndarray:
        """Map a path string (may contain the blank char) to class indices."""
        out = np.empty(len(path), dtype=np.int64)
        for t, ch in enumerate(path):
            if ch == self.blank_char:
                out[t] = 0
            elif ch in self._index:
                out[t] = self._index[ch]
            else:
                raise AlphabetError(f"symbol {ch!r} not in extended alphabet")
        return out

    def collapse(self, path: str) -> str:
        """Merge adjacent repeats, then delete blanks; order preserved."""
        return self.decode(collapse_indices(self.path_to_indices(path)))


def collapse_indices(path: Sequence[int]) -> list[int]:
    """Index-level collapse: adjacent duplicates merged, then blanks (0) dropped."""
    out: list[int] = []
    prev = -1
    for p in path:
        if p != prev and p != 0:
            out.append(int(p))
        prev = p
    return out


class FrameDistributions:
    """A stack of per-frame probability rows over an alphabet's extended set."""

    def __init__(self, probs: np.ndarray, alphabet: Alphabet):
        probs = np.asarray(probs, dtype=np.float64)
        if probs.ndim != 2:
            raise UsageError(f"expected a (frames, classes) matrix, got {probs.shape}")
        if probs.shape[1] != alphabet.num_classes:
            raise UsageError(
                f"{probs.shape[1]} classes but alphabet defines {alphabet.num_classes}"
            )
        if np.any(probs < 0.0):
            raise UsageError("probabilities must be non-negative")
        if np.any(np.abs(probs.sum(axis=1) - 1.0) > 1e-9):
            raise UsageError("each frame row must sum to 1")
        self.probs = probs
        self.alphabet = alphabet

    @property
    def num_frames(self) -> int:
        return self.probs.shape[0]

    @property
    def num_classes(self) -> int:
        return self.probs.shape[1]

    def log_probs(self) -> np.ndarray:
        with np.errstate(divide="ignore"):
            return np.log(self.probs)


def uniform_frames(num_frames: int, alphabet: Alphabet) -> FrameDistributions:
    k = alphabet.num_classes
    return FrameDistributions(np.full((num_frames, k), 1.0 / k), alphabet)


def path_probability(path: str, frames: FrameDistributions) -> float:
    """Product of the per-frame probabilities of the path's symbols."""
    indices = frames.alphabet.path_to_indices(path)
    if len(indices) != frames.num_frames:
        raise UsageError(
            f"path length {len(indices)} != frame count {frames.num_frames}"
        )
    return float(np.prod(frames.probs[np.arange(frames.num_frames), indices]))


def _augmented(label_indices: np.ndarray) -> np.ndarray:
    """Blank-interleaved target: (-, l1, -, l2, ..., -)."""
    aug = np.zeros(2 * len(label_indices) + 1, dtype=np.int64)
    aug[1::2] = label_indices
    return aug


def _skip_allowed(aug: np.ndarray) -> np.ndarray:
    """skip[s] is True when the s-2 -> s transition is legal (distinct labels)."""
    skip = np.zeros(len(aug), dtype=bool)
    if len(aug) > 2:
        skip[2:] = (aug[2:] != 0) & (aug[2:] != aug[:-2])
    return skip


def _shift_right(row: np.ndarray) -> np.ndarray:
    out = np.empty_like(row)
    out[0] = NEG_INF
    out[1:] = row[:-1]
    return out


def _shift_left(row: np.ndarray) -> np.ndarray:
    out = np.empty_like(row)
    out[-1] = NEG_INF
    out[:-1] = row[1:]
    return out


def forward_log_alpha(log_probs: np.ndarray, aug: np.ndarray) -> np.ndarray:
    """alpha[t, s]: log-probability of prefixes ending in state s at frame t.

    Includes the emission at frame t.
    """
    num_frames = log_probs.shape[0]
    emit = log_probs[:, aug]
    skip = _skip_allowed(aug)
    alpha = np.full((num_frames, len(aug)), NEG_INF)
    alpha[0, 0] = emit[0, 0]
    if len(aug) > 1:
        alpha[0, 1] = emit[0, 1]
    for t in range(1, num_frames):
        prev = alpha[t - 1]
        reach = np.logaddexp(prev, _shift_right(prev))
        reach[skip] = np.logaddexp(reach[skip], prev[np.flatnonzero(skip) - 2])
        alpha[t] = reach + emit[t]
    return alpha


def backward_log_beta(log_probs: np.ndarray, aug: np.ndarray) -> np.ndarray:
    """beta[t, s]: log-probability of completing the target from state s.

    Covers frames t+1..T only, so alpha[t] + beta[t] sums (over s) to the
    total log-probability at every t.
    """
    num_frames = log_probs.shape[0]
    emit = log_probs[:, aug]
    skip = _skip_allowed(aug)
    beta = np.full((num_frames, len(aug)), NEG_INF)
    beta[-1, -1] = 0.0
    if len(aug) > 1:
        beta[-1, -2] = 0.0
    for t in range(num_frames - 2, -1, -1):
        nxt = beta[t + 1] + emit[t + 1]
        reach = np.logaddexp(nxt, _shift_left(nxt))
        sources = np.flatnonzero(skip) - 2
        reach[sources] = np.logaddexp(reach[sources], nxt[np.flatnonzero(skip)])
        beta[t] = reach
    return beta


def sequence_log_probability(label: str, frames: FrameDistributions) -> float:
    """Log of the summed probability of every path collapsing to ``label``.

    Returns -inf when no alignment of the frame count can produce the label.
    """
    indices = frames.alphabet.encode(label)
    aug = _augmented(indices)
    if len(aug) > 2 * frames.num_frames + 1:
        return NEG_INF
    alpha = forward_log_alpha(frames.log_probs(), aug)
    tail = alpha[-1, -1]
    if len(aug) > 1:
        tail = np.logaddexp(tail, alpha[-1, -2])
    return float(tail)


def sequence_probability(label: str, frames: FrameDistributions) -> float:
    return float(np.exp(sequence_log_probability(label, frames)))


def ctc_loss(label: str, frames: FrameDistributions) -> float:
    """Negative log-likelihood of the label under the frame distributions."""
    logp = sequence_log_probability(label, frames)
    if logp == NEG_INF:
        raise InfeasibleTargetError(label, frames.num_frames)
    return -logp


def ctc_loss_grad(label: str, frames: FrameDistributions) -> np.ndarray:
    """Gradient of the loss w.r.t. the pre-softmax activations behind ``frames``.

    grad[t, k] = y[t, k] - sum of state occupancies gamma_t(s) over states
    labelled k, with gamma derived from the forward/backward tables.
    """
    indices = frames.alphabet.encode(label)
    aug = _augmented(indices)
    if len(aug) > 2 * frames.num_frames + 1:
        raise InfeasibleTargetError(label, frames.num_frames)
    log_probs = frames.log_probs()
    alpha = forward_log_alpha(log_probs, aug)
    beta = backward_log_beta(log_probs, aug)
    logp = alpha[-1, -1]
    if len(aug) > 1:
        logp = np.logaddexp(logp, alpha[-1, -2])
    if logp == NEG_INF:
        raise InfeasibleTargetError(label, frames.num_frames)
    gamma = np.exp(alpha + beta - logp)
    occupancy = np.zeros_like(frames.probs)
    rows = np.repeat(np.arange(frames.num_frames), len(aug))
    np.add.at(occupancy, (rows, np.tile(aug, frames.num_frames)), gamma.ravel())
    return frames.probs - occupancy


def ctc_loss_logits(logits: Tensor, labels: Sequence[str], alphabet: Alphabet):
    """Differentiable total loss over a batch of pre-softmax activations.

    ``logits`` is (N, T, K) (or (T, K) for a single sample). Targets that
    admit no alignment contribute nothing and are counted instead of raising,
    so oversized labels cannot abort a training epoch. Returns
    ``(loss, feasible_count, skipped_count)`` where ``loss`` is the summed
    negative log-likelihood as a scalar graph tensor.
    """
    single = logits.data.ndim == 2
    raw = logits.data[None] if single else logits.data
    if raw.ndim != 3:
        raise UsageError(f"expected (batch, frames, classes) logits, got {logits.shape}")
    if len(labels) != raw.shape[0]:
        raise UsageError(f"{raw.shape[0]} samples but {len(labels)} labels")
    if raw.shape[2] != alphabet.num_classes:
        raise UsageError("logit classes do not match the alphabet")

    batch, num_frames, num_classes = raw.shape
    log_probs = log_softmax_rows(raw)
    probs = np.exp(log_probs)
    grad = np.zeros_like(raw)
    total = 0.0
    feasible = 0
    skipped = 0
    for i, label in enumerate(labels):
        indices = alphabet.encode(label)
        aug = _augmented(indices)
        if len(aug) > 2 * num_frames + 1:
            skipped += 1
            continue
        alpha = forward_log_alpha(log_probs[i], aug)
        beta = backward_log_beta(log_probs[i], aug)
        logp = alpha[-1, -1]
        if len(aug) > 1:
            logp = np.logaddexp(logp, alpha[-1, -2])
        if logp == NEG_INF:
            skipped += 1
            continue
        gamma = np.exp(alpha + beta - logp)
        occupancy = np.zeros((num_frames, num_classes))
        rows = np.repeat(np.arange(num_frames), len(aug))
        np.add.at(occupancy, (rows, np.tile(aug, num_frames)), gamma.ravel())
        grad[i] = probs[i] - occupancy
        total += -logp
        feasible += 1

    if single:
        grad = grad[0]

    def vjp(g):
        return (g * grad,)

    loss = record_op(np.asarray(total), (logits,), vjp)
    return loss, feasible, skipped


def brute_force_sequence_probability(
    label: str, frames: FrameDistributions, budget: int = 10_000_000
) -> float:
    """Oracle: explicit enumeration of every path that collapses to ``label``."""
    k = frames.num_classes
    num_frames = frames.num_frames
    if k**num_frames > budget:
        raise UsageError(f"{k}^{num_frames} paths exceed the enumeration budget")
    target = list(frames.alphabet.encode(label))
    total = 0.0
    for path in itertools.product(range(k), repeat=num_frames):
        if collapse_indices(path) == target:
            p = 1.0
            for t, cls in enumerate(path):
                p *= frames.probs[t, cls]
            total += p
    return total


def brute_force_label_distribution(
    frames: FrameDistributions, budget: int = 10_000_000
) -> dict[str, float]:
    """Oracle: total probability of every reachable label sequence."""
    k = frames.num_classes
    num_frames = frames.num_frames
    if k**num_frames > budget:
        raise UsageError(f"{k}^{num_frames} paths exceed the enumeration budget")
    dist: dict[str, float] = {}
    for path in itertools.product(range(k), repeat=num_frames):
        label = frames.alphabet.decode(collapse_indices(path))
        p = 1.0
        for t, cls in enumerate(path):
            p *= frames.probs[t, cls]
        dist[label] = dist.get(label, 0.0) + p
    return dist
