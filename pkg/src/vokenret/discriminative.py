"""Discrimination-modified training of the sequence model.

Generative training alone optimizes the gold identifier's probability; it
never sees how the model ranks the gold among its own best guesses. The
joint phase closes that gap: each batch decodes beam candidates under the
current parameters, injects the gold identifier when the beam missed it,
re-scores every candidate differentiably by forced scoring, and applies a
softmax contrastive loss over the candidate list. Candidate selection is a
non-differentiable set-building step; gradients flow only through the
scores.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import numerics as nm
from .decoding import VokenTrie, batched_constrained_beam_search
from .errors import ConfigError, TrainingError, UsageError
from .genmodel import QueryBatch, Seq2SeqModel, forced_scores, pad_queries
from .tokenizer import VokenIndex


@dataclass
class CandidateSet:
    """Beam candidates for one query with the gold sequence injected."""

    sequences: list[tuple[int, ...]]
    positive_index: int
    scores: Optional[nm.Tensor] = None   # (len(sequences),), filled by scoring

    def __post_init__(self):
        if not 0 <= self.positive_index < len(self.sequences):
            raise UsageError(
                f"positive index {self.positive_index} outside candidate list "
                f"of {len(self.sequences)}")


def assemble_candidates(beam_output: Sequence[tuple[tuple[int, ...], float]],
                        positive_sequence, b: int,
                        rng: np.random.Generator) -> CandidateSet:
    """Candidate list construction around the decoded beam.

    Keeps the beam when the positive is present; replaces one uniformly
    chosen slot when the beam is full without it; appends the positive when
    the beam came back short. Scores must then be recomputed under the
    current parameters before the loss can use the set.
    """
    sequences = [tuple(int(v) for v in seq) for seq, _ in beam_output]
    if positive_sequence is None:
        if not sequences:
            raise UsageError("empty beam output and no positive sequence")
        raise UsageError("a positive sequence is required to build candidates")
    positive = tuple(int(v) for v in positive_sequence)
    if positive in sequences:
        return CandidateSet(sequences=sequences,
                            positive_index=sequences.index(positive))
    if len(sequences) >= b:
        slot = int(rng.integers(0, len(sequences)))
        sequences = list(sequences)
        sequences[slot] = positive
        return CandidateSet(sequences=sequences, positive_index=slot)
    sequences = list(sequences) + [positive]
    return CandidateSet(sequences=sequences, positive_index=len(sequences) - 1)


def discriminative_loss(candidate_set: CandidateSet) -> nm.Tensor:
    """Softmax contrastive loss over the candidate scores.

    -log(exp(s_p) / sum_j exp(s_j)), computed through the stable
    cross-entropy; zero when the positive is the only candidate.
    """
    if candidate_set.scores is None:
        raise UsageError("candidate scores must be computed before the loss")
    scores = candidate_set.scores
    n = len(candidate_set.sequences)
    if scores.shape != (n,):
        raise UsageError(f"scores shape {scores.shape} does not match {n} candidates")
    logits = nm.reshape(scores, (1, n))
    return nm.reshape(nm.cross_entropy(logits, np.array([candidate_set.positive_index])), ())


@dataclass
class JointTrainConfig:
    warmup_epochs: int = 9
    joint_epochs: int = 21
    train_beam_size: int = 10
    lr: float = 1e-3
    lr_final_fraction: float = 1.0   # linear decay to lr * fraction; 1.0 = constant
    batch_size: int = 128
    disable_dis: bool = False
    seed: int = 0

    def validate(self) -> None:
        if self.warmup_epochs < 0 or self.joint_epochs < 0:
            raise ConfigError("epoch counts must be non-negative")
        if self.warmup_epochs + self.joint_epochs < 1:
            raise ConfigError("at least one training epoch is required")
        if self.lr <= 0 or self.batch_size < 1:
            raise ConfigError("lr and batch_size must be positive")
        if not 0.0 < self.lr_final_fraction <= 1.0:
            raise ConfigError("lr_final_fraction must lie in (0, 1]")
        if not self.disable_dis and self.train_beam_size < 2:
            raise ConfigError(
                "discriminative training needs train_beam_size >= 2")


@dataclass
class JointTrainLog:
    """One row per epoch: epoch, L_gen, L_dis, R@1_val, R@10_val, seconds."""

    epochs: list[dict] = field(default_factory=list)

    def write(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("epoch\tL_gen\tL_dis\tR@1_val\tR@10_val\tseconds\n")
            for row in self.epochs:
                fh.write("{epoch}\t{L_gen:.6f}\t{L_dis:.6f}\t{R1:.4f}\t{R10:.4f}"
                         "\t{seconds:.3f}\n".format(**row))


def _gather_rows_tensor(x: nm.Tensor, idx: np.ndarray) -> nm.Tensor:
    return nm.gather_rows(x, idx)


def train_joint(
    model: Seq2SeqModel,
    train_queries: QueryBatch,
    targets: np.ndarray,
    trie: VokenTrie,
    config: JointTrainConfig,
    val_eval: Optional[Callable[[Seq2SeqModel], tuple[float, float]]] = None,
    log: Optional[JointTrainLog] = None,
) -> Seq2SeqModel:
    """Warmup on the generative loss, then joint generative + contrastive.

    ``targets`` holds each query's gold voken sequence, row-aligned with
    ``train_queries``. Beam candidates are refreshed per batch under the
    current parameters. Deterministic given the config seed.
    """
    config.validate()
    if len(train_queries) != targets.shape[0]:
        raise UsageError("queries and targets are misaligned")
    vocab = model.vocab
    n = len(train_queries)
    rng = np.random.default_rng(config.seed)
    state = nm.AdamState(lr=config.lr)
    batch_size = min(config.batch_size, n)
    total_epochs = config.warmup_epochs + config.joint_epochs

    for epoch in range(total_epochs):
        t0 = time.perf_counter()
        if total_epochs > 1:
            frac = epoch / (total_epochs - 1)
            state.lr = config.lr * (1.0 + (config.lr_final_fraction - 1.0) * frac)
        joint = epoch >= config.warmup_epochs and not config.disable_dis
        order = rng.permutation(n)
        gen_sum, dis_sum, steps = 0.0, 0.0, 0
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            queries = [train_queries.tokens[i] for i in idx]
            batch_targets = targets[idx]
            bsz = len(queries)

            candidate_sets: list[CandidateSet] = []
            if joint:
                beams = batched_constrained_beam_search(
                    model, queries, trie, config.train_beam_size)
                for qi in range(bsz):
                    candidate_sets.append(assemble_candidates(
                        beams[qi], tuple(batch_targets[qi]),
                        config.train_beam_size, rng))

            nm.zero_grads(model.params)
            with nm.Graph() as graph:
                ids, pad_mask = pad_queries(queries, vocab)
                memory = model.encode(ids, pad_mask)
                rows = batch_targets + vocab.voken_offset
                dec_in = np.concatenate(
                    [np.full((bsz, 1), vocab.bos_id, dtype=np.int64), rows], axis=1)
                dec_tgt = np.concatenate(
                    [rows, np.full((bsz, 1), vocab.eos_id, dtype=np.int64)], axis=1)
                logits = model.decode(memory, dec_in, pad_mask)
                l_gen = nm.scale(nm.sum_all(nm.cross_entropy(logits, dec_tgt)), 1.0 / bsz)

                if joint:
                    # Group queries by candidate count so each group scores
                    # as one decoder pass.
                    groups: dict[int, list[int]] = {}
                    for qi, cs in enumerate(candidate_sets):
                        groups.setdefault(len(cs.sequences), []).append(qi)
                    dis_terms = []
                    for count, members in sorted(groups.items()):
                        qidx = np.array(members, dtype=np.int64)
                        mem_rows = nm.repeat_rows(
                            _gather_rows_tensor(memory, qidx), count)
                        mask_rows = np.repeat(pad_mask[qidx], count, axis=0)
                        seq_rows = np.array(
                            [list(s) for qi in members
                             for s in candidate_sets[qi].sequences], dtype=np.int64)
                        scores = forced_scores(model, mem_rows, mask_rows, seq_rows)
                        table = nm.reshape(scores, (len(members), count))
                        pos = np.array([candidate_sets[qi].positive_index
                                        for qi in members])
                        dis_terms.append(nm.sum_all(nm.cross_entropy(table, pos)))
                    l_dis = dis_terms[0]
                    for term in dis_terms[1:]:
                        l_dis = nm.add(l_dis, term)
                    l_dis = nm.scale(l_dis, 1.0 / bsz)
                    loss = nm.add(l_gen, l_dis)
                else:
                    l_dis = nm.Tensor(0.0)
                    loss = l_gen
            if not np.isfinite(loss.data):
                raise TrainingError(f"joint loss diverged at epoch {epoch}, step {steps}")
            nm.backpropagate(graph, loss, model.params)
            nm.adam_update(model.params, nm.grads_of(model.params), state)
            gen_sum += float(l_gen.data)
            dis_sum += float(l_dis.data)
            steps += 1

        if log is not None:
            r1, r10 = (float("nan"), float("nan"))
            if val_eval is not None:
                r1, r10 = val_eval(model)
            log.epochs.append(dict(
                epoch=epoch, L_gen=gen_sum / steps, L_dis=dis_sum / steps,
                R1=r1, R10=r10, seconds=time.perf_counter() - t0,
            ))
    return model


def build_targets(queries: QueryBatch, index: VokenIndex) -> np.ndarray:
    """Row-aligned gold voken sequences for a query batch."""
    rows = []
    for image_id in queries.image_ids:
        seq = index.image_to_seq.get(image_id)
        if seq is None:
            raise UsageError(f"image {image_id} has no voken assignment")
        rows.append(seq)
    return np.array(rows, dtype=np.int64)
