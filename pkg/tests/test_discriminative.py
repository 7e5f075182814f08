"""Candidate assembly, contrastive loss fixtures, and joint training."""

import math

import numpy as np
import pytest

from vokenret import decoding as dec
from vokenret import discriminative as dis
from vokenret import genmodel as gm
from vokenret import numerics as nm
from vokenret.errors import ConfigError, UsageError


def _beam(seqs, base_score=-1.0):
    return [(tuple(s), base_score - i) for i, s in enumerate(seqs)]


class TestAssembleCandidates:
    def test_positive_already_present(self):
        rng = np.random.default_rng(0)
        beam = _beam([(0, 1), (1, 1), (2, 0)])
        cs = dis.assemble_candidates(beam, (2, 0), b=3, rng=rng)
        assert cs.sequences == [(0, 1), (1, 1), (2, 0)]
        assert cs.positive_index == 2

    def test_positive_replaces_uniform_slot(self):
        rng = np.random.default_rng(1)
        beam = _beam([(i, 0) for i in range(10)])
        cs = dis.assemble_candidates(beam, (99, 99), b=10, rng=rng)
        assert len(cs.sequences) == 10
        assert cs.sequences.count((99, 99)) == 1
        assert cs.sequences[cs.positive_index] == (99, 99)

    def test_replacement_slot_distribution_spans_list(self):
        rng = np.random.default_rng(2)
        slots = set()
        beam = _beam([(i, 0) for i in range(5)])
        for _ in range(200):
            cs = dis.assemble_candidates(beam, (9, 9), b=5, rng=rng)
            slots.add(cs.positive_index)
        assert slots == set(range(5))

    def test_short_beam_appends(self):
        rng = np.random.default_rng(3)
        beam = _beam([(0, 0), (1, 0), (2, 0), (3, 0)])
        cs = dis.assemble_candidates(beam, (7, 7), b=10, rng=rng)
        assert len(cs.sequences) == 5
        assert cs.positive_index == 4

    def test_empty_beam_with_positive_is_fine(self):
        rng = np.random.default_rng(4)
        cs = dis.assemble_candidates([], (1, 2), b=10, rng=rng)
        assert cs.sequences == [(1, 2)]
        assert cs.positive_index == 0

    def test_no_positive_rejected(self):
        with pytest.raises(UsageError):
            dis.assemble_candidates([], None, b=10, rng=np.random.default_rng(0))


class TestDiscriminativeLoss:
    def test_uniform_scores_give_log_b(self):
        cs = dis.CandidateSet(sequences=[(i,) for i in range(10)], positive_index=4,
                              scores=nm.Tensor(np.full(10, -3.0)))
        assert abs(dis.discriminative_loss(cs).item() - math.log(10)) < 1e-6

    def test_two_candidate_hand_value(self):
        # s_p = 2, s_neg = 0: loss = ln(1 + e^-2)
        cs = dis.CandidateSet(sequences=[(0,), (1,)], positive_index=0,
                              scores=nm.Tensor(np.array([2.0, 0.0])))
        assert abs(dis.discriminative_loss(cs).item() - math.log(1 + math.exp(-2))) < 1e-6

    def test_single_candidate_gives_zero(self):
        cs = dis.CandidateSet(sequences=[(0,)], positive_index=0,
                              scores=nm.Tensor(np.array([-5.0])))
        assert dis.discriminative_loss(cs).item() == 0.0

    def test_nonnegative_and_zero_iff_probability_one(self):
        rng = np.random.default_rng(5)
        for _ in range(50):
            scores = rng.standard_normal(6)
            cs = dis.CandidateSet(sequences=[(i,) for i in range(6)],
                                  positive_index=int(rng.integers(0, 6)),
                                  scores=nm.Tensor(scores))
            assert dis.discriminative_loss(cs).item() >= 0.0
        # near-probability-one positive
        scores = np.full(6, -30.0)
        scores[2] = 30.0
        cs = dis.CandidateSet(sequences=[(i,) for i in range(6)], positive_index=2,
                              scores=nm.Tensor(scores))
        assert dis.discriminative_loss(cs).item() < 1e-6

    def test_shift_invariance(self):
        rng = np.random.default_rng(6)
        scores = rng.standard_normal(8)
        base = dis.CandidateSet(sequences=[(i,) for i in range(8)], positive_index=3,
                                scores=nm.Tensor(scores))
        shifted = dis.CandidateSet(sequences=[(i,) for i in range(8)], positive_index=3,
                                   scores=nm.Tensor(scores + 123.0))
        a = dis.discriminative_loss(base).item()
        b = dis.discriminative_loss(shifted).item()
        assert abs(a - b) < 1e-5

    def test_gradient_flows_through_every_score(self):
        scores = nm.parameter(np.array([0.5, -0.2, 0.1]))
        cs = dis.CandidateSet(sequences=[(0,), (1,), (2,)], positive_index=1,
                              scores=scores)
        with nm.Graph() as g:
            loss = dis.discriminative_loss(cs)
        nm.backpropagate(g, loss)
        assert np.all(scores.grad != 0)
        # softmax - onehot sums to zero across candidates
        assert abs(scores.grad.sum()) < 1e-6

    def test_detached_scores_give_zero_parameter_gradients(self):
        model = _small_model(seed=3)
        query = np.array([1, 0])
        with nm.Graph() as g:
            s = gm.forced_score(model, query, [0, 1])
            detached = nm.Tensor(np.array([s.item(), -2.0]))
            cs = dis.CandidateSet(sequences=[(0, 1), (1, 1)], positive_index=0,
                                  scores=detached)
            loss = dis.discriminative_loss(cs)
        nm.backpropagate(g, loss, model.params)
        for name, p in model.params.items():
            np.testing.assert_array_equal(p.grad, 0.0, err_msg=name)

    def test_missing_scores_rejected(self):
        cs = dis.CandidateSet(sequences=[(0,)], positive_index=0)
        with pytest.raises(UsageError):
            dis.discriminative_loss(cs)

    def test_bad_positive_index_rejected(self):
        with pytest.raises(UsageError):
            dis.CandidateSet(sequences=[(0,)], positive_index=1)

    def test_joint_gradient_matches_finite_differences(self):
        # Frozen 2-candidate case: L_gen + L_dis through forced scoring.
        with nm.verification_mode():
            vocab = gm.Vocabulary(base_size=4, n_vokens=3)
            cfg = gm.ModelConfig(d_model=4, layers=1, heads=2, ff=6, max_len=8, seed=0)
            model = gm.Seq2SeqModel(vocab, cfg)
            rng = np.random.default_rng(7)
            for p in model.params.values():
                p.data = rng.standard_normal(p.shape) * 0.5
            queries = [np.array([0, 1])]
            targets = np.array([[0, 2]])
            candidates = np.array([[0, 2], [1, 1]])

            def f(params):
                l_gen = gm.generative_loss(model, queries, targets)
                ids, mask = gm.pad_queries(queries, vocab)
                memory = model.encode(ids, mask)
                mem = nm.repeat_rows(memory, 2)
                scores = gm.forced_scores(model, mem, np.repeat(mask, 2, axis=0),
                                          candidates)
                cs = dis.CandidateSet(sequences=[(0, 2), (1, 1)], positive_index=0,
                                      scores=scores)
                return nm.add(l_gen, dis.discriminative_loss(cs))

            report = nm.finite_difference_check(f, model.params, eps=1e-4, tol=1e-4)
        assert report.passed, str(report)


def _small_model(seed=0, base=8, n=4):
    vocab = gm.Vocabulary(base_size=base, n_vokens=n)
    cfg = gm.ModelConfig(d_model=16, layers=1, heads=2, ff=32, max_len=12, seed=seed)
    return gm.Seq2SeqModel(vocab, cfg)


def _toy_problem(n_images=8, m=2, n_vokens=4, seed=0):
    """Distinct identifier per image; one distinctive query token each."""
    rng = np.random.default_rng(seed)
    seqs = []
    seen = set()
    while len(seqs) < n_images:
        s = tuple(rng.integers(0, n_vokens, size=m).tolist())
        if s not in seen:
            seen.add(s)
            seqs.append(s)
    queries = gm.QueryBatch(
        tokens=[np.array([i]) for i in range(n_images)],
        image_ids=list(range(n_images)),
        text_ids=list(range(n_images)),
    )
    targets = np.array(seqs, dtype=np.int64)
    trie = dec.build_trie(seqs)
    return queries, targets, trie


class TestTrainJoint:
    def test_disable_dis_reports_zero(self):
        queries, targets, trie = _toy_problem()
        model = _small_model(base=8)
        log = dis.JointTrainLog()
        cfg = dis.JointTrainConfig(warmup_epochs=1, joint_epochs=2,
                                   train_beam_size=4, disable_dis=True,
                                   batch_size=8, seed=0)
        dis.train_joint(model, queries, targets, trie, cfg, log=log)
        assert all(row["L_dis"] == 0.0 for row in log.epochs)

    def test_memorizes_toy_corpus(self):
        queries, targets, trie = _toy_problem()
        vocab = gm.Vocabulary(base_size=8, n_vokens=4)
        # Untied head memorizes fastest; tying is for generalization.
        cfg_m = gm.ModelConfig(d_model=32, layers=1, heads=2, ff=64, max_len=12,
                               seed=1, tie_output=False)
        model = gm.Seq2SeqModel(vocab, cfg_m)
        cfg = dis.JointTrainConfig(warmup_epochs=40, joint_epochs=20,
                                   train_beam_size=4, batch_size=8, lr=5e-3, seed=0)
        dis.train_joint(model, queries, targets, trie, cfg)
        hits = 0
        for i in range(len(queries)):
            top = dec.constrained_beam_search(model, queries.tokens[i], trie, b=1)
            hits += top[0][0] == tuple(targets[i])
        assert hits == len(queries)

    def test_deterministic(self):
        queries, targets, trie = _toy_problem()
        results = []
        for _ in range(2):
            model = _small_model(base=8, seed=2)
            cfg = dis.JointTrainConfig(warmup_epochs=2, joint_epochs=2,
                                       train_beam_size=4, batch_size=4, seed=9)
            dis.train_joint(model, queries, targets, trie, cfg)
            results.append(model.params["emb.tok"].data.copy())
        np.testing.assert_array_equal(results[0], results[1])

    def test_joint_phase_changes_parameters(self):
        queries, targets, trie = _toy_problem()
        model_a = _small_model(base=8, seed=3)
        model_b = _small_model(base=8, seed=3)
        cfg_warm = dis.JointTrainConfig(warmup_epochs=3, joint_epochs=0,
                                        train_beam_size=4, batch_size=8, seed=1)
        cfg_joint = dis.JointTrainConfig(warmup_epochs=2, joint_epochs=1,
                                         train_beam_size=4, batch_size=8, seed=1)
        dis.train_joint(model_a, queries, targets, trie, cfg_warm)
        dis.train_joint(model_b, queries, targets, trie, cfg_joint)
        assert not np.array_equal(model_a.params["emb.tok"].data,
                                  model_b.params["emb.tok"].data)

    def test_beam_size_below_two_rejected_when_dis_enabled(self):
        with pytest.raises(ConfigError):
            dis.JointTrainConfig(train_beam_size=1).validate()
        dis.JointTrainConfig(train_beam_size=1, disable_dis=True).validate()

    def test_log_format(self, tmp_path):
        queries, targets, trie = _toy_problem()
        model = _small_model(base=8, seed=4)
        log = dis.JointTrainLog()
        cfg = dis.JointTrainConfig(warmup_epochs=1, joint_epochs=1,
                                   train_beam_size=4, batch_size=8, seed=0)
        dis.train_joint(model, queries, targets, trie, cfg,
                        val_eval=lambda m: (0.25, 0.75), log=log)
        log.write(tmp_path / "log.tsv")
        lines = (tmp_path / "log.tsv").read_text().splitlines()
        assert lines[0] == "epoch\tL_gen\tL_dis\tR@1_val\tR@10_val\tseconds"
        assert len(lines) == 3
        fields = lines[1].split("\t")
        assert len(fields) == 6
        assert fields[3] == "0.2500"

    def test_build_targets_alignment(self):
        from vokenret.tokenizer import VokenIndex
        index = VokenIndex.from_assignments({0: (1, 2), 1: (3, 0)})
        queries = gm.QueryBatch(tokens=[np.array([0]), np.array([1]), np.array([2])],
                                image_ids=[1, 0, 1], text_ids=[0, 1, 2])
        targets = dis.build_targets(queries, index)
        np.testing.assert_array_equal(targets, [[3, 0], [1, 2], [3, 0]])
        queries.image_ids[0] = 7
        with pytest.raises(UsageError):
            dis.build_targets(queries, index)
