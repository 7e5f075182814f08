"""Trie-constrained beam search over valid voken identifiers.

The trie holds exactly the distinct corpus sequences; decoding masks every
logit outside the current node's children before the log-softmax, so only
real identifiers can be emitted. With renormalization (default), step
probabilities sum to one over the allowed set, which makes exp-scores of
all identifiers a proper distribution; switching it off keeps unconstrained
log-probabilities, in which case a sequence's beam score equals its forced
score. All identifiers share one length, so no length penalty is applied.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from . import numerics as nm
from .errors import IntegrityError, UsageError
from .genmodel import Seq2SeqModel, pad_queries
from .tokenizer import VokenIndex


class TrieNode:
    __slots__ = ("children", "terminal")

    def __init__(self):
        self.children: dict[int, "TrieNode"] = {}
        self.terminal = False


@dataclass
class VokenTrie:
    root: TrieNode
    depth: int
    leaf_count: int

    def walk(self, prefix: Sequence[int]) -> TrieNode:
        node = self.root
        for voken in prefix:
            child = node.children.get(int(voken))
            if child is None:
                raise UsageError(f"prefix {list(prefix)} is not a valid trie path")
            node = child
        return node

    def __contains__(self, sequence: Sequence[int]) -> bool:
        node = self.root
        for voken in sequence:
            child = node.children.get(int(voken))
            if child is None:
                return False
            node = child
        return node.terminal


def build_trie(index: VokenIndex | Iterable[Sequence[int]]) -> VokenTrie:
    """Prefix tree over the distinct sequences; root-to-terminal paths and
    index sequences are in bijection."""
    if isinstance(index, VokenIndex):
        sequences = list(index.seq_to_images.keys())
    else:
        sequences = [tuple(int(v) for v in s) for s in index]
    if not sequences:
        raise UsageError("cannot build a trie from an empty index")
    lengths = {len(s) for s in sequences}
    if len(lengths) != 1:
        raise IntegrityError(f"mixed identifier lengths {sorted(lengths)}")
    depth = lengths.pop()
    if depth < 1:
        raise IntegrityError("identifiers must have at least one voken")
    root = TrieNode()
    count = 0
    for seq in sequences:
        node = root
        for voken in seq:
            node = node.children.setdefault(int(voken), TrieNode())
        if not node.terminal:
            node.terminal = True
            count += 1
    return VokenTrie(root=root, depth=depth, leaf_count=count)


def allowed_next(trie: VokenTrie, prefix: Sequence[int]) -> set[int]:
    """Exactly the voken ids that extend ``prefix`` inside the trie."""
    return set(trie.walk(prefix).children.keys())


def enumerate_sequences(trie: VokenTrie) -> list[tuple[int, ...]]:
    out: list[tuple[int, ...]] = []

    def visit(node: TrieNode, prefix: tuple[int, ...]):
        if node.terminal:
            out.append(prefix)
        for voken in sorted(node.children):
            visit(node.children[voken], prefix + (voken,))

    visit(trie.root, ())
    return out


@dataclass
class BeamHypothesis:
    prefix: tuple[int, ...]
    score: float
    finished: bool
    node: TrieNode = field(repr=False, compare=False, default=None)


def batched_constrained_beam_search(
    model: Seq2SeqModel,
    queries: Sequence[np.ndarray],
    trie: VokenTrie,
    b: int,
    renormalize: bool = True,
) -> list[list[tuple[tuple[int, ...], float]]]:
    """Beam search restricted to trie paths, run for many queries at once.

    At each step, logits outside the current node's children are masked off;
    scores accumulate the (re)normalized log-probabilities. Per query the
    result is up to min(b, reachable sequences) finished hypotheses, best
    first, ties broken by lexicographic order; every returned sequence is a
    trie member. Each query's search is independent; batching only shares
    the decoder passes.
    """
    if b < 1:
        raise UsageError(f"beam size must be >= 1, got {b}")
    vocab = model.vocab
    ids, pad_mask = pad_queries([np.asarray(q) for q in queries], vocab)
    with nm.no_grad():
        memory = model.encode(ids, pad_mask)
    per_query: list[list[BeamHypothesis]] = [
        [BeamHypothesis(prefix=(), score=0.0, finished=False, node=trie.root)]
        for _ in queries
    ]
    for depth in range(trie.depth):
        owners = np.concatenate([
            np.full(len(beams), qi, dtype=np.int64)
            for qi, beams in enumerate(per_query)
        ])
        rows = owners.size
        dec = np.empty((rows, depth + 1), dtype=np.int64)
        dec[:, 0] = vocab.bos_id
        flat: list[BeamHypothesis] = []
        for beams in per_query:
            flat.extend(beams)
        for r, hyp in enumerate(flat):
            for j, v in enumerate(hyp.prefix):
                dec[r, 1 + j] = vocab.voken_to_vocab(v)
        with nm.no_grad():
            mem_rows = nm.Tensor(memory.data[owners])
            logits = model.decode(mem_rows, dec, pad_mask[owners]).data[:, -1, :]
        if not renormalize:
            m = logits.max(axis=-1, keepdims=True)
            lse = m + np.log(np.exp(logits - m).sum(axis=-1, keepdims=True))
        next_per_query: list[list[BeamHypothesis]] = []
        r = 0
        for beams in per_query:
            candidates: list[BeamHypothesis] = []
            for hyp in beams:
                allowed = sorted(hyp.node.children.keys())
                cols = [vocab.voken_to_vocab(v) for v in allowed]
                row = logits[r]
                if renormalize:
                    sub = row[cols]
                    mx = sub.max()
                    logp = sub - (mx + np.log(np.exp(sub - mx).sum()))
                else:
                    logp = row[cols] - lse[r, 0]
                for j, voken in enumerate(allowed):
                    child = hyp.node.children[voken]
                    candidates.append(BeamHypothesis(
                        prefix=hyp.prefix + (voken,),
                        score=hyp.score + float(logp[j]),
                        finished=child.terminal,
                        node=child,
                    ))
                r += 1
            candidates.sort(key=lambda h: (-h.score, h.prefix))
            next_per_query.append(candidates[:b])
        per_query = next_per_query
    results = []
    for beams in per_query:
        for hyp in beams:
            if not hyp.finished:
                raise IntegrityError("beam ended on a non-terminal trie node")
        results.append([(h.prefix, h.score) for h in beams])
    return results


def constrained_beam_search(
    model: Seq2SeqModel,
    query: np.ndarray,
    trie: VokenTrie,
    b: int,
    renormalize: bool = True,
) -> list[tuple[tuple[int, ...], float]]:
    """Single-query convenience wrapper over the batched search."""
    return batched_constrained_beam_search(model, [query], trie, b, renormalize)[0]


def constrained_sequence_scores(
    model: Seq2SeqModel,
    query: np.ndarray,
    trie: VokenTrie,
    sequences: Sequence[Sequence[int]],
    renormalize: bool = True,
) -> list[float]:
    """Teacher-forced scores under the same masking the beam applies.

    One batched decoder pass; each step's log-probability is taken over the
    trie-allowed set (or the full vocabulary when not renormalizing).
    """
    vocab = model.vocab
    seqs = [tuple(int(v) for v in s) for s in sequences]
    for s in seqs:
        if s not in trie:
            raise UsageError(f"sequence {s} is not in the trie")
    ids, pad_mask = pad_queries([np.asarray(query)], vocab)
    with nm.no_grad():
        memory = model.encode(ids, pad_mask)
        rows = np.array([[vocab.voken_to_vocab(v) for v in s] for s in seqs])
        dec_in = np.concatenate(
            [np.full((len(seqs), 1), vocab.bos_id, dtype=np.int64), rows[:, :-1]],
            axis=1)
        mem_rep = nm.Tensor(np.repeat(memory.data, len(seqs), axis=0))
        mask_rep = np.repeat(pad_mask, len(seqs), axis=0)
        logits = model.decode(mem_rep, dec_in, mask_rep).data
    scores = []
    for i, s in enumerate(seqs):
        node = trie.root
        total = 0.0
        for step, voken in enumerate(s):
            allowed = sorted(node.children.keys())
            cols = [vocab.voken_to_vocab(v) for v in allowed]
            row = logits[i, step]
            if renormalize:
                sub = row[cols]
                m = sub.max()
                lse = m + np.log(np.exp(sub - m).sum())
                total += float(row[vocab.voken_to_vocab(voken)] - lse)
            else:
                m = row.max()
                lse = m + np.log(np.exp(row - m).sum())
                total += float(row[vocab.voken_to_vocab(voken)] - lse)
            node = node.children[voken]
        scores.append(total)
    return scores
