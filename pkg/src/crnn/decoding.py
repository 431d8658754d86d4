"""Transcription modes: lexicon-free best path and lexicon-constrained search.

The lexicon-constrained mode first decodes without the lexicon, then gathers
every lexicon entry within a bounded edit distance of that draft using a
BK-tree (a metric tree over edit distance: each child is indexed by its exact
distance to the parent, and the triangle inequality prunes whole subtrees),
and finally rescores the candidates by their exact sequence probability.
"""

from __future__ import annotations

import dataclasses
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .ctc import Alphabet, FrameDistributions, collapse_indices, sequence_log_probability
from .errors import DataError, UsageError


def best_path_decode(frames: FrameDistributions) -> str:
    """Collapse the per-frame argmax path; ties go to the lowest class index."""
    path = np.argmax(frames.probs, axis=1)
    return frames.alphabet.decode(collapse_indices(path))


def best_path_from_scores(scores: np.ndarray, alphabet: Alphabet) -> str:
    """Same decode applied to raw (T, K) scores; argmax is softmax-invariant."""
    return alphabet.decode(collapse_indices(np.argmax(scores, axis=1)))


def edit_distance(a: str, b: str) -> int:
    """Levenshtein distance with unit insert/delete/substitute costs."""
    if a == b:
        return 0
    if len(a) < len(b):
        a, b = b, a
    if not b:
        return len(a)
    previous = list(range(len(b) + 1))
    for i, ca in enumerate(a):
        current = [i + 1]
        append = current.append
        for j, cb in enumerate(b):
            append(min(previous[j + 1] + 1, current[j] + 1,
                       previous[j] + (ca != cb)))
        previous = current
    return previous[-1]


def _encode_strings(entries: Sequence[str]) -> tuple[np.ndarray, np.ndarray]:
    """Pack strings into a padded codepoint matrix plus a length vector."""
    lengths = np.array([len(e) for e in entries], dtype=np.int64)
    width = int(lengths.max(initial=0))
    matrix = np.full((len(entries), width), -1, dtype=np.int64)
    for i, entry in enumerate(entries):
        if entry:
            matrix[i, : len(entry)] = [ord(ch) for ch in entry]
    return matrix, lengths


def batch_edit_distances(query: str, matrix: np.ndarray,
                         lengths: np.ndarray) -> np.ndarray:
    """Levenshtein distance from one query to many packed strings at once.

    Runs the row-wise dynamic program vectorized across all entries; the
    within-row delete dependency is resolved with a prefix-minimum scan.
    """
    n, width = matrix.shape
    cols = np.arange(width + 1)
    dist = np.broadcast_to(cols, (n, width + 1)).astype(np.int64)
    for ch in query:
        code = ord(ch)
        partial = dist + 1
        sub = dist[:, :-1] + (matrix != code)
        partial[:, 1:] = np.minimum(partial[:, 1:], sub)
        partial -= cols
        np.minimum.accumulate(partial, axis=1, out=partial)
        partial += cols
        dist = partial
    return dist[np.arange(n), lengths]


class Lexicon:
    """A deduplicated set of admissible output sequences, canonically ordered."""

    def __init__(self, entries: Iterable[str]):
        self.entries: tuple[str, ...] = tuple(sorted(set(entries)))
        self._matrix: Optional[np.ndarray] = None
        self._lengths: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, entry: str) -> bool:
        return entry in set(self.entries)

    def packed(self) -> tuple[np.ndarray, np.ndarray]:
        if self._matrix is None:
            self._matrix, self._lengths = _encode_strings(self.entries)
        return self._matrix, self._lengths

    @classmethod
    def load(cls, path: str | Path, alphabet: Alphabet) -> tuple["Lexicon", int]:
        """Read one entry per line, lowercased; returns (lexicon, dropped count).

        Lines containing symbols outside the alphabet are dropped and counted
        so ordinary word lists remain usable with restricted alphabets.
        """
        path = Path(path)
        if not path.is_file():
            raise DataError(f"lexicon file not found: {path}")
        valid = set(alphabet.labels)
        kept: list[str] = []
        dropped = 0
        for line in path.read_text(encoding="utf-8").splitlines():
            entry = line.strip().lower()
            if not entry:
                continue
            if set(entry) <= valid:
                kept.append(entry)
            else:
                dropped += 1
        return cls(kept), dropped


class _BKNode:
    __slots__ = ("entry", "index", "children")

    def __init__(self, entry: str, index: int):
        self.entry = entry
        self.index = index  # row in the tree's packed entry matrix
        self.children: dict[int, _BKNode] = {}


class BKTree:
    """Metric tree over edit distance; immutable once built.

    Besides the node structure, the tree keeps flat mirrors: the entries
    packed into one codepoint matrix, and the child relation as ragged
    arrays (child_start/child_count slicing into child_key/child_node), so a
    query batches both the distance computations and the pruning.
    """

    def __init__(self, root: _BKNode, size: int, matrix: np.ndarray,
                 lengths: np.ndarray, entries: np.ndarray):
        self.root = root
        self.size = size
        self.matrix = matrix
        self.lengths = lengths
        self.entries = entries  # object array aligned with matrix rows
        child_keys: list[list[int]] = [[] for _ in range(size)]
        child_nodes: list[list[int]] = [[] for _ in range(size)]
        stack = [root]
        while stack:
            node = stack.pop()
            for key, child in node.children.items():
                child_keys[node.index].append(key)
                child_nodes[node.index].append(child.index)
                stack.append(child)
        self.child_count = np.array([len(k) for k in child_keys],
                                    dtype=np.int64)
        self.child_start = np.concatenate(
            [[0], np.cumsum(self.child_count)[:-1]]
        )
        self.child_key = np.array(
            [k for keys in child_keys for k in keys], dtype=np.int64
        )
        self.child_node = np.array(
            [c for nodes in child_nodes for c in nodes], dtype=np.int64
        )


def bk_build(lexicon: Lexicon) -> BKTree:
    """Insert entries in canonical order; each descends by exact distance keys."""
    if len(lexicon) == 0:
        raise UsageError("cannot build a search tree over an empty lexicon")
    entries = lexicon.entries
    root = _BKNode(entries[0], 0)
    for index, entry in enumerate(entries[1:], start=1):
        node = root
        while True:
            d = edit_distance(entry, node.entry)
            child = node.children.get(d)
            if child is None:
                node.children[d] = _BKNode(entry, index)
                break
            node = child
    matrix, lengths = _encode_strings(entries)
    return BKTree(root, len(entries), matrix, lengths,
                  np.array(entries, dtype=object))


def bk_query(tree: BKTree, query: str, delta: int,
             visited: Optional[list[str]] = None) -> set[str]:
    """All entries within ``delta`` of ``query``.

    Children whose key lies outside [d - delta, d + delta] of their parent's
    distance are pruned by the triangle inequality. Whole pending batches are
    processed at once (visit order does not affect the result set): distances,
    result collection and pruning are all vectorized. Pass ``visited`` to
    record every node inspected.
    """
    if delta < 0:
        raise UsageError("delta must be non-negative")
    results: list[str] = []
    pending = np.array([tree.root.index], dtype=np.int64)
    while pending.size:
        dists = batch_edit_distances(query, tree.matrix[pending],
                                     tree.lengths[pending])
        if visited is not None:
            visited.extend(tree.entries[pending])
        results.extend(tree.entries[pending[dists <= delta]])
        counts = tree.child_count[pending]
        total = int(counts.sum())
        if not total:
            break
        starts = tree.child_start[pending]
        segment_base = np.repeat(np.cumsum(counts) - counts, counts)
        flat = np.repeat(starts, counts) + (np.arange(total) - segment_base)
        keys = tree.child_key[flat]
        keep = np.abs(keys - np.repeat(dists, counts)) <= delta
        pending = tree.child_node[flat[keep]]
    return set(results)


def linear_scan(lexicon: Lexicon, query: str, delta: int) -> set[str]:
    """Oracle for bk_query: exhaustive distance check of every entry."""
    if len(lexicon) == 0:
        return set()
    matrix, lengths = lexicon.packed()
    dists = batch_edit_distances(query, matrix, lengths)
    return {e for e, d in zip(lexicon.entries, dists) if d <= delta}


def score_candidates(frames: FrameDistributions,
                     candidates: Iterable[str]) -> tuple[str, float]:
    """Exact argmax of sequence probability; ties break by canonical order."""
    ordered = sorted(set(candidates))
    if not ordered:
        raise UsageError("cannot score an empty candidate set")
    best = ordered[0]
    best_logp = sequence_log_probability(best, frames)
    for entry in ordered[1:]:
        logp = sequence_log_probability(entry, frames)
        if logp > best_logp:
            best, best_logp = entry, logp
    return best, float(np.exp(best_logp))


@dataclasses.dataclass
class LexiconDecodeResult:
    sequence: str
    probability: float
    best_path: str
    candidate_count: int
    from_lexicon: bool


def lexicon_decode(frames: FrameDistributions, tree: BKTree,
                   delta: int) -> LexiconDecodeResult:
    """Rescore the lexicon entries near the lexicon-free draft transcription.

    When no entry lies within ``delta`` of the draft, the draft itself is
    returned, flagged as out-of-lexicon.
    """
    draft = best_path_decode(frames)
    candidates = bk_query(tree, draft, delta)
    if not candidates:
        logp = sequence_log_probability(draft, frames)
        return LexiconDecodeResult(draft, float(np.exp(logp)), draft, 0, False)
    sequence, probability = score_candidates(frames, candidates)
    return LexiconDecodeResult(sequence, probability, draft,
                               len(candidates), True)


def exhaustive_lexicon_decode(frames: FrameDistributions,
                              lexicon: Lexicon) -> LexiconDecodeResult:
    """Small-lexicon mode: score every entry, no neighborhood restriction."""
    draft = best_path_decode(frames)
    sequence, probability = score_candidates(frames, lexicon.entries)
    return LexiconDecodeResult(sequence, probability, draft,
                               len(lexicon), True)


SMALL_LEXICON_LIMIT = 1000


def transcribe_with_lexicon(frames: FrameDistributions, lexicon: Lexicon,
                            tree: Optional[BKTree], delta: int) -> LexiconDecodeResult:
    """Dispatch: small lexicons are scored exhaustively, large ones via the tree."""
    if len(lexicon) <= SMALL_LEXICON_LIMIT:
        return exhaustive_lexicon_decode(frames, lexicon)
    if tree is None:
        tree = bk_build(lexicon)
    return lexicon_decode(frames, tree, delta)
