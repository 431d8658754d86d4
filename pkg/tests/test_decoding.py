import numpy as np
import pytest

from crnn import ctc, decoding
from crnn.errors import UsageError


AB = ctc.Alphabet("ab")


def frames_from_rows(rows, alphabet):
    return ctc.FrameDistributions(np.asarray(rows, dtype=float), alphabet)


def random_words(rng, count, min_len=3, max_len=10, letters="abcdefghijklmnopqrstuvwxyz"):
    pool = list(letters)
    return [
        "".join(rng.choice(pool, size=rng.integers(min_len, max_len + 1)))
        for _ in range(count)
    ]


class TestBestPathDecode:
    def test_argmax_then_collapse(self):
        rows = [
            [0.8, 0.1, 0.1],
            [0.1, 0.8, 0.1],
            [0.2, 0.6, 0.2],
            [0.9, 0.05, 0.05],
            [0.1, 0.2, 0.7],
        ]
        assert decoding.best_path_decode(frames_from_rows(rows, AB)) == "ab"

    def test_all_blank(self):
        rows = np.tile([0.5, 0.3, 0.2], (4, 1))
        assert decoding.best_path_decode(frames_from_rows(rows, AB)) == ""

    def test_one_hot_unambiguous(self):
        alphabet = ctc.Alphabet("ehlo")
        path = "h-e-l-l-o"
        probs = np.zeros((len(path), alphabet.num_classes))
        for t, index in enumerate(alphabet.path_to_indices(path)):
            probs[t, index] = 1.0
        frames = ctc.FrameDistributions(probs, alphabet)
        assert decoding.best_path_decode(frames) == "hello"

    def test_tie_breaks_to_lowest_index(self):
        rows = [[0.4, 0.4, 0.2]]
        assert decoding.best_path_decode(frames_from_rows(rows, AB)) == ""


class TestEditDistance:
    def test_identity(self):
        assert decoding.edit_distance("same", "same") == 0

    def test_pure_insertions(self):
        assert decoding.edit_distance("", "abc") == 3

    def test_kitten_sitting(self):
        assert decoding.edit_distance("kitten", "sitting") == 3

    def test_against_reference_dp(self, rng):
        # Transparent full-matrix oracle vs the optimized two-row version.
        def reference(a, b):
            d = np.zeros((len(a) + 1, len(b) + 1), dtype=int)
            d[:, 0] = np.arange(len(a) + 1)
            d[0, :] = np.arange(len(b) + 1)
            for i in range(1, len(a) + 1):
                for j in range(1, len(b) + 1):
                    d[i, j] = min(
                        d[i - 1, j] + 1,
                        d[i, j - 1] + 1,
                        d[i - 1, j - 1] + (a[i - 1] != b[j - 1]),
                    )
            return int(d[-1, -1])

        for _ in range(300):
            a = "".join(rng.choice(list("abc"), size=rng.integers(0, 9)))
            b = "".join(rng.choice(list("abc"), size=rng.integers(0, 9)))
            assert decoding.edit_distance(a, b) == reference(a, b)

    def test_metric_axioms(self, rng):
        words = random_words(rng, 120, min_len=0, max_len=8, letters="abcd")
        for _ in range(10_000):
            x, y, z = rng.choice(words, size=3)
            dxy = decoding.edit_distance(x, y)
            assert (dxy == 0) == (x == y)
            assert dxy == decoding.edit_distance(y, x)
            assert dxy <= decoding.edit_distance(x, z) + decoding.edit_distance(z, y)

    def test_batch_matches_scalar(self, rng):
        words = random_words(rng, 400, min_len=0, max_len=12)
        matrix, lengths = decoding._encode_strings(words)
        for _ in range(50):
            query = "".join(rng.choice(list("abcdefgh"), size=rng.integers(0, 11)))
            batch = decoding.batch_edit_distances(query, matrix, lengths)
            for word, d in zip(words, batch):
                assert d == decoding.edit_distance(query, word)


class TestBKTree:
    def test_singleton(self):
        tree = decoding.bk_build(decoding.Lexicon(["only"]))
        assert tree.size == 1
        assert decoding.bk_query(tree, "only", 0) == {"only"}

    def test_size_after_dedup(self):
        tree = decoding.bk_build(decoding.Lexicon(["a", "b", "a", "ab", "b"]))
        assert tree.size == 3

    def test_empty_lexicon_rejected(self):
        with pytest.raises(UsageError):
            decoding.bk_build(decoding.Lexicon([]))

    def test_child_keys_are_exact_distances(self, rng):
        lexicon = decoding.Lexicon(random_words(rng, 200))
        tree = decoding.bk_build(lexicon)
        stack = [tree.root]
        count = 0
        while stack:
            node = stack.pop()
            count += 1
            for key, child in node.children.items():
                assert decoding.edit_distance(child.entry, node.entry) == key
                stack.append(child)
        assert count == len(lexicon)

    def test_negative_delta_rejected(self):
        tree = decoding.bk_build(decoding.Lexicon(["x"]))
        with pytest.raises(UsageError):
            decoding.bk_query(tree, "x", -1)

    def test_spec_neighborhood(self):
        lexicon = decoding.Lexicon(["hell", "hello", "help", "shell"])
        tree = decoding.bk_build(lexicon)
        assert decoding.bk_query(tree, "hell", 1) == set(lexicon.entries)

    def test_delta_zero_membership(self):
        lexicon = decoding.Lexicon(["alpha", "beta", "gamma"])
        tree = decoding.bk_build(lexicon)
        assert decoding.bk_query(tree, "beta", 0) == {"beta"}

    def test_huge_delta_returns_everything(self, rng):
        lexicon = decoding.Lexicon(random_words(rng, 100))
        tree = decoding.bk_build(lexicon)
        assert decoding.bk_query(tree, "zzz", 20) == set(lexicon.entries)

    def test_query_matches_linear_scan(self, rng):
        lexicon = decoding.Lexicon(random_words(rng, 2_000))
        tree = decoding.bk_build(lexicon)
        for _ in range(100):
            query = "".join(rng.choice(list("abcdefghij"), size=rng.integers(1, 11)))
            for delta in range(6):
                assert decoding.bk_query(tree, query, delta) == decoding.linear_scan(
                    lexicon, query, delta
                )

    def test_pruning_never_skips_a_hit(self, rng):
        lexicon = decoding.Lexicon(random_words(rng, 1_000))
        tree = decoding.bk_build(lexicon)
        for _ in range(30):
            query = "".join(rng.choice(list("abcdef"), size=rng.integers(2, 9)))
            delta = int(rng.integers(0, 4))
            visited: list[str] = []
            hits = decoding.bk_query(tree, query, delta, visited=visited)
            oracle = decoding.linear_scan(lexicon, query, delta)
            assert hits == oracle
            assert oracle <= set(visited)


class TestScoreCandidates:
    def test_singleton(self):
        frames = ctc.uniform_frames(2, ctc.Alphabet("a"))
        label, prob = decoding.score_candidates(frames, ["a"])
        assert label == "a" and prob == pytest.approx(0.75)

    def test_prefers_higher_probability(self):
        frames = ctc.uniform_frames(2, ctc.Alphabet("a"))
        label, prob = decoding.score_candidates(frames, ["a", ""])
        assert label == "a" and prob == pytest.approx(0.75)

    def test_superset_never_lowers_winner(self, rng):
        alphabet = ctc.Alphabet("ab")
        raw = rng.uniform(0.1, 1.0, size=(4, 3))
        frames = ctc.FrameDistributions(raw / raw.sum(1, keepdims=True), alphabet)
        base = ["a", "b"]
        _, p_small = decoding.score_candidates(frames, base)
        _, p_large = decoding.score_candidates(frames, base + ["ab", "ba", ""])
        assert p_large >= p_small

    def test_empty_set_rejected(self):
        frames = ctc.uniform_frames(2, ctc.Alphabet("a"))
        with pytest.raises(UsageError):
            decoding.score_candidates(frames, [])


class TestLexiconDecode:
    def test_member_at_delta_zero(self, rng):
        alphabet = ctc.Alphabet("ab")
        probs = np.zeros((4, 3))
        for t, index in enumerate(alphabet.path_to_indices("a-b-")):
            probs[t, index] = 1.0
        frames = ctc.FrameDistributions(probs, alphabet)
        lexicon = decoding.Lexicon(["ab", "aa", "bb"])
        tree = decoding.bk_build(lexicon)
        result = decoding.lexicon_decode(frames, tree, 0)
        assert result.sequence == "ab"
        assert result.from_lexicon and result.candidate_count == 1

    def test_matches_exhaustive_neighborhood_scoring(self, rng):
        alphabet = ctc.Alphabet("ab")
        lexicon = decoding.Lexicon(["a", "ab", "bb"])
        tree = decoding.bk_build(lexicon)
        for _ in range(100):
            raw = rng.uniform(0.05, 1.0, size=(4, 3))
            frames = ctc.FrameDistributions(raw / raw.sum(1, keepdims=True), alphabet)
            result = decoding.lexicon_decode(frames, tree, 2)
            draft = decoding.best_path_decode(frames)
            neighborhood = {
                e for e in lexicon.entries if decoding.edit_distance(e, draft) <= 2
            }
            if neighborhood:
                expected, _ = decoding.score_candidates(frames, neighborhood)
                assert result.sequence == expected
                assert decoding.edit_distance(result.sequence, draft) <= 2
                assert result.sequence in lexicon
            else:
                assert result.sequence == draft
                assert not result.from_lexicon

    def test_probability_monotone_in_delta(self, rng):
        alphabet = ctc.Alphabet("ab")
        lexicon = decoding.Lexicon(random_words(rng, 40, 1, 4, "ab"))
        tree = decoding.bk_build(lexicon)
        for _ in range(30):
            raw = rng.uniform(0.05, 1.0, size=(5, 3))
            frames = ctc.FrameDistributions(raw / raw.sum(1, keepdims=True), alphabet)
            probs = []
            counts = []
            for delta in range(6):
                result = decoding.lexicon_decode(frames, tree, delta)
                if result.from_lexicon:
                    probs.append(result.probability)
                    counts.append(result.candidate_count)
            assert probs == sorted(probs)
            assert counts == sorted(counts)

    def test_delta_zero_reduces_to_exact_membership(self, rng):
        alphabet = ctc.Alphabet("ab")
        lexicon = decoding.Lexicon(["a", "b", "ab", "ba", "abab"])
        tree = decoding.bk_build(lexicon)
        for _ in range(50):
            raw = rng.uniform(0.05, 1.0, size=(4, 3))
            frames = ctc.FrameDistributions(raw / raw.sum(1, keepdims=True), alphabet)
            draft = decoding.best_path_decode(frames)
            result = decoding.lexicon_decode(frames, tree, 0)
            if draft in lexicon:
                assert result.from_lexicon and result.candidate_count == 1
                assert result.sequence == draft
            else:
                assert not result.from_lexicon and result.sequence == draft

    def test_out_of_lexicon_fallback(self):
        alphabet = ctc.Alphabet("ab")
        probs = np.zeros((4, 3))
        for t, index in enumerate(alphabet.path_to_indices("abab")):
            probs[t, index] = 1.0
        frames = ctc.FrameDistributions(probs, alphabet)
        tree = decoding.bk_build(decoding.Lexicon(["bbbbbbbbbb"]))
        result = decoding.lexicon_decode(frames, tree, 1)
        assert result.sequence == "abab"
        assert not result.from_lexicon
        assert result.candidate_count == 0


class TestLexiconLoading:
    def test_load_drops_foreign_and_duplicates(self, tmp_path):
        path = tmp_path / "words.txt"
        path.write_text("cab\nCAB\nc3po\nbad!\n\ncab\n", encoding="utf-8")
        lexicon, dropped = decoding.Lexicon.load(path, ctc.Alphabet("abc"))
        assert lexicon.entries == ("cab",)
        assert dropped == 2

    def test_missing_file(self, tmp_path):
        from crnn.errors import DataError

        with pytest.raises(DataError):
            decoding.Lexicon.load(tmp_path / "nope.txt", ctc.Alphabet("ab"))


class TestSmallLexiconDispatch:
    def test_small_lexicon_scored_exhaustively(self, rng):
        alphabet = ctc.Alphabet("ab")
        raw = rng.uniform(0.05, 1.0, size=(4, 3))
        frames = ctc.FrameDistributions(raw / raw.sum(1, keepdims=True), alphabet)
        lexicon = decoding.Lexicon(["a", "b", "ab", "ba"])
        result = decoding.transcribe_with_lexicon(frames, lexicon, None, delta=0)
        expected, _ = decoding.score_candidates(frames, lexicon.entries)
        assert result.sequence == expected
