"""Trie construction, constrained beam search, and the enumeration oracle."""

import math

import numpy as np
import pytest

from vokenret import decoding as dec
from vokenret import genmodel as gm
from vokenret import numerics as nm
from vokenret.errors import IntegrityError, UsageError


def random_model(seed, base=6, n_vokens=4, d=16, layers=1, heads=2, ff=24):
    vocab = gm.Vocabulary(base_size=base, n_vokens=n_vokens)
    cfg = gm.ModelConfig(d_model=d, layers=layers, heads=heads, ff=ff,
                         max_len=16, seed=seed)
    model = gm.Seq2SeqModel(vocab, cfg)
    rng = np.random.default_rng(seed + 1)
    for p in model.params.values():
        p.data = (rng.standard_normal(p.shape) * 0.4).astype(np.float32)
    return model


def random_trie(rng, n_vokens, depth, max_leaves):
    universe = [tuple(seq) for seq in
                np.stack(np.meshgrid(*[range(n_vokens)] * depth),
                         axis=-1).reshape(-1, depth)]
    k = rng.integers(1, min(max_leaves, len(universe)) + 1)
    chosen = rng.choice(len(universe), size=k, replace=False)
    seqs = [universe[i] for i in chosen]
    return dec.build_trie(seqs), sorted(seqs)


def oracle_ranking(model, query, trie, renormalize=True):
    """Independent exhaustive scorer: walk every sequence step by step with
    raw decoder calls and hand-rolled (masked) log-softmax."""
    vocab = model.vocab
    ids, mask = gm.pad_queries([np.asarray(query)], vocab)
    with nm.no_grad():
        memory = model.encode(ids, mask)
    scored = []
    for seq in dec.enumerate_sequences(trie):
        node = trie.root
        total = 0.0
        prefix = [vocab.bos_id]
        for voken in seq:
            with nm.no_grad():
                logits = model.decode(memory, np.array([prefix]), mask).data[0, -1]
            if renormalize:
                cols = [vocab.voken_to_vocab(v) for v in sorted(node.children)]
                sub = logits[cols]
                norm = np.log(np.exp(sub - sub.max()).sum()) + sub.max()
            else:
                norm = np.log(np.exp(logits - logits.max()).sum()) + logits.max()
            total += float(logits[vocab.voken_to_vocab(voken)] - norm)
            node = node.children[voken]
            prefix.append(vocab.voken_to_vocab(voken))
        scored.append((seq, total))
    scored.sort(key=lambda pair: (-pair[1], pair[0]))
    return scored


class FakeTableModel:
    """Stub exposing the decode interface with a fixed stepwise table."""

    def __init__(self, n_vokens, table):
        self.vocab = gm.Vocabulary(base_size=4, n_vokens=n_vokens)
        self.table = {tuple(k): v for k, v in table.items()}

    def encode(self, ids, pad_mask=None):
        return nm.Tensor(np.zeros((ids.shape[0], ids.shape[1], 2)))

    def decode(self, memory, dec_ids, enc_pad_mask=None):
        out = np.full((dec_ids.shape[0], dec_ids.shape[1], self.vocab.total_size),
                      -50.0)
        for i in range(dec_ids.shape[0]):
            prefix = tuple(self.vocab.vocab_to_voken(t) for t in dec_ids[i, 1:])
            for voken, prob in self.table[prefix].items():
                out[i, -1, self.vocab.voken_to_vocab(voken)] = math.log(prob)
        return nm.Tensor(out, dtype=np.float64)


class TestTrie:
    SEQS = [(0, 1), (0, 2), (1, 1)]

    def test_construction_shape(self):
        trie = dec.build_trie(self.SEQS)
        assert sorted(trie.root.children) == [0, 1]
        assert sorted(trie.root.children[0].children) == [1, 2]
        assert trie.leaf_count == 3
        assert trie.depth == 2

    def test_duplicates_collapse(self):
        trie = dec.build_trie(self.SEQS + [(0, 1)])
        assert trie.leaf_count == 3

    def test_enumerate_roundtrip(self):
        trie = dec.build_trie(self.SEQS)
        assert dec.enumerate_sequences(trie) == sorted(self.SEQS)

    def test_membership(self):
        trie = dec.build_trie(self.SEQS)
        assert (0, 2) in trie
        assert (0, 0) not in trie
        assert (0,) not in trie  # prefix, not terminal

    def test_empty_rejected(self):
        with pytest.raises(UsageError):
            dec.build_trie([])

    def test_mixed_lengths_rejected(self):
        with pytest.raises(IntegrityError):
            dec.build_trie([(0, 1), (0,)])

    def test_allowed_next(self):
        trie = dec.build_trie(self.SEQS)
        assert dec.allowed_next(trie, []) == {0, 1}
        assert dec.allowed_next(trie, [0]) == {1, 2}
        assert dec.allowed_next(trie, [0, 1]) == set()

    def test_allowed_next_invalid_prefix(self):
        trie = dec.build_trie(self.SEQS)
        with pytest.raises(UsageError):
            dec.allowed_next(trie, [2])


class TestBeamSearch:
    def test_bad_beam_size(self):
        trie = dec.build_trie([(0, 1)])
        with pytest.raises(UsageError):
            dec.constrained_beam_search(random_model(0), np.array([0]), trie, 0)

    def test_hand_table_example(self):
        # Root: p(0)=0.6, p(1)=0.4. From [0]: p(1)=0.9, p(2)=0.1.
        # From [1]: p(1)=1. Path masses: 0.54, 0.06, 0.4.
        model = FakeTableModel(n_vokens=3, table={
            (): {0: 0.6, 1: 0.4},
            (0,): {1: 0.9, 2: 0.1},
            (1,): {1: 1.0},
        })
        trie = dec.build_trie([(0, 1), (0, 2), (1, 1)])
        top2 = dec.constrained_beam_search(model, np.array([0]), trie, b=2)
        assert [seq for seq, _ in top2] == [(0, 1), (1, 1)]
        assert abs(top2[0][1] - math.log(0.54)) < 1e-9
        assert abs(top2[1][1] - math.log(0.4)) < 1e-9
        full = dec.constrained_beam_search(model, np.array([0]), trie, b=5)
        assert [seq for seq, _ in full] == [(0, 1), (1, 1), (0, 2)]

    def test_b1_returns_single_greedy_path(self):
        model = random_model(3)
        trie = dec.build_trie([(0, 1), (0, 2), (1, 1), (3, 0)])
        out = dec.constrained_beam_search(model, np.array([1, 2]), trie, b=1)
        assert len(out) == 1
        assert out[0][0] in trie

    def test_matches_exhaustive_oracle_with_full_beam(self):
        rng = np.random.default_rng(0)
        for trial in range(8):
            model = random_model(100 + trial)
            trie, _ = random_trie(rng, n_vokens=4, depth=3, max_leaves=20)
            query = np.array(rng.integers(0, 6, size=3))
            got = dec.constrained_beam_search(model, query, trie, b=trie.leaf_count)
            expected = oracle_ranking(model, query, trie)
            assert [s for s, _ in got] == [s for s, _ in expected]
            np.testing.assert_allclose([sc for _, sc in got],
                                       [sc for _, sc in expected], atol=1e-5)

    def test_unrenormalized_score_equals_forced_score(self):
        model = random_model(7)
        trie = dec.build_trie([(0, 1), (2, 3), (1, 1)])
        query = np.array([2, 4, 0])
        results = dec.constrained_beam_search(model, query, trie, b=3,
                                              renormalize=False)
        for seq, score in results:
            forced = gm.forced_score(model, query, list(seq)).item()
            assert abs(score - forced) < 1e-4

    def test_emitted_sequences_always_valid(self):
        rng = np.random.default_rng(1)
        for trial in range(30):
            model = random_model(200 + trial)
            trie, _ = random_trie(rng, n_vokens=4, depth=int(rng.integers(1, 4)),
                                  max_leaves=12)
            query = np.array(rng.integers(0, 6, size=int(rng.integers(1, 5))))
            b = int(rng.integers(1, 8))
            for seq, _ in dec.constrained_beam_search(model, query, trie, b):
                assert seq in trie

    def test_result_count_is_min_b_leafcount(self):
        rng = np.random.default_rng(2)
        model = random_model(11)
        trie, seqs = random_trie(rng, n_vokens=4, depth=2, max_leaves=10)
        query = np.array([0, 1])
        lengths = []
        for b in (1, 2, 4, 8, 16, 32):
            out = dec.constrained_beam_search(model, query, trie, b)
            assert len(out) == min(b, trie.leaf_count)
            lengths.append(len(out))
        assert lengths == sorted(lengths)

    def test_renormalized_scores_form_distribution(self):
        # Full trie over every length-M sequence: masses must sum to 1.
        model = random_model(13, n_vokens=3)
        for m in (1, 2, 3):
            seqs = [tuple(s) for s in
                    np.stack(np.meshgrid(*[range(3)] * m), axis=-1).reshape(-1, m)]
            trie = dec.build_trie(seqs)
            out = dec.constrained_beam_search(model, np.array([1]), trie,
                                              b=trie.leaf_count)
            total = sum(math.exp(score) for _, score in out)
            assert abs(total - 1.0) < 1e-5

    def test_deterministic(self):
        model = random_model(17)
        trie = dec.build_trie([(0, 1), (0, 2), (1, 1), (2, 0)])
        query = np.array([3, 1])
        a = dec.constrained_beam_search(model, query, trie, b=3)
        b = dec.constrained_beam_search(model, query, trie, b=3)
        assert a == b


class TestSequenceScores:
    def test_matches_oracle(self):
        rng = np.random.default_rng(3)
        model = random_model(19)
        trie, seqs = random_trie(rng, n_vokens=4, depth=3, max_leaves=16)
        query = np.array([1, 0, 2])
        for renorm in (True, False):
            got = dec.constrained_sequence_scores(model, query, trie, seqs,
                                                  renormalize=renorm)
            expected = {s: sc for s, sc in oracle_ranking(model, query, trie,
                                                          renormalize=renorm)}
            for s, sc in zip(seqs, got):
                assert abs(sc - expected[tuple(s)]) < 1e-5

    def test_unknown_sequence_rejected(self):
        model = random_model(23)
        trie = dec.build_trie([(0, 1)])
        with pytest.raises(UsageError):
            dec.constrained_sequence_scores(model, np.array([0]), trie, [(1, 1)])
