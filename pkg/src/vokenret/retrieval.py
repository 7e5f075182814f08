"""End-to-end retrieval, evaluation, the two-tower baseline, and benchmarks.

Generative retrieval decodes identifiers with the trie-constrained beam and
expands each identifier to its image bucket in score order (ascending image
id inside a bucket, so collisions resolve deterministically). The two-tower
baseline scores queries against every image by dot product over the
tokenizer's own projection heads, which gives both paradigms identical
information; its cost is linear in corpus size, while the generative path
depends only on beam size and identifier length, which is what the scaling
benchmark demonstrates.
"""

from __future__ import annotations

import json
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import numerics as nm
from .corpus import DatasetBundle, SynthConfig, generate_synthetic, normalize_rows
from .decoding import VokenTrie, batched_constrained_beam_search, build_trie
from .errors import IntegrityError, ShapeError, UsageError
from .genmodel import QueryBatch, QuerySketcher, Seq2SeqModel, SketchConfig, build_queries
from .tokenizer import TokenizerModel, VokenIndex, assign_vokens


@dataclass
class RetrievalResult:
    text_id: int
    image_ids: list[int]
    provenance: list[tuple[tuple[int, ...], float]]

    def validate(self) -> None:
        if len(set(self.image_ids)) != len(self.image_ids):
            raise IntegrityError("ranked image ids must be distinct")


@dataclass
class EvalReport:
    recall: dict[int, float]
    query_count: int
    config_fingerprint: str

    def validate(self) -> None:
        ks = sorted(self.recall)
        vals = [self.recall[k] for k in ks]
        if any(not 0.0 <= v <= 1.0 for v in vals):
            raise IntegrityError("recall values must lie in [0, 1]")
        if vals != sorted(vals):
            raise IntegrityError(f"recall must be non-decreasing in K: {self.recall}")

    def table(self) -> str:
        header = "  ".join(f"R@{k}" for k in sorted(self.recall))
        values = "  ".join(f"{self.recall[k]:.4f}" for k in sorted(self.recall))
        return (f"queries: {self.query_count}\n"
                f"config:  {self.config_fingerprint}\n"
                f"{header}\n{values}\n")

    def to_jsonl(self) -> str:
        payload = {"query_count": self.query_count,
                   "config": self.config_fingerprint}
        payload.update({f"recall@{k}": self.recall[k] for k in sorted(self.recall)})
        return json.dumps(payload, sort_keys=True)

    def write(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        (directory / "report.txt").write_text(self.table(), encoding="utf-8")
        (directory / "report.jsonl").write_text(self.to_jsonl() + "\n", encoding="utf-8")


def retrieve(model: Seq2SeqModel, trie: VokenTrie, index: VokenIndex,
             query: np.ndarray, K: int, b: int,
             text_id: int = -1) -> RetrievalResult:
    """Decode identifiers, expand to images, truncate to the top K."""
    return batch_retrieve(model, trie, index, [np.asarray(query)], K, b,
                          text_ids=[text_id])[0]


def batch_retrieve(model: Seq2SeqModel, trie: VokenTrie, index: VokenIndex,
                   queries: Sequence[np.ndarray], K: int, b: int,
                   text_ids: Optional[Sequence[int]] = None,
                   renormalize: bool = True) -> list[RetrievalResult]:
    if K < 1:
        raise UsageError(f"K must be >= 1, got {K}")
    if b < K:
        warnings.warn(f"beam size {b} below K={K}: the list may come back short")
    if text_ids is None:
        text_ids = list(range(len(queries)))
    beams = batched_constrained_beam_search(model, queries, trie, b, renormalize)
    results = []
    for text_id, decoded in zip(text_ids, beams):
        ranked: list[int] = []
        provenance: list[tuple[tuple[int, ...], float]] = []
        for seq, score in decoded:
            images = index.seq_to_images.get(seq)
            if images is None:
                raise IntegrityError(
                    f"decoded sequence {seq} missing from the index (trie desync)")
            provenance.append((seq, score))
            for image_id in sorted(images):
                if len(ranked) < K:
                    ranked.append(image_id)
            if len(ranked) >= K:
                break
        result = RetrievalResult(text_id=text_id, image_ids=ranked,
                                 provenance=provenance)
        result.validate()
        results.append(result)
    return results


def recall_at_k(results: Sequence[RetrievalResult], gold: dict[int, int],
                K: int) -> float:
    """Fraction of queries whose gold image appears in the top K."""
    if not results:
        raise UsageError("recall over an empty result list")
    hits = 0
    for r in results:
        if r.text_id not in gold:
            raise UsageError(f"query {r.text_id} has no gold image")
        hits += gold[r.text_id] in r.image_ids[:K]
    return hits / len(results)


def evaluate(model: Seq2SeqModel, trie: VokenTrie, index: VokenIndex,
             queries: QueryBatch, b: int, ks: Sequence[int] = (1, 5, 10),
             fingerprint: str = "", renormalize: bool = True) -> EvalReport:
    gold = dict(zip(queries.text_ids, queries.image_ids))
    results = batch_retrieve(model, trie, index, queries.tokens, K=max(ks), b=b,
                             text_ids=queries.text_ids, renormalize=renormalize)
    report = EvalReport(
        recall={k: recall_at_k(results, gold, k) for k in ks},
        query_count=len(results),
        config_fingerprint=fingerprint,
    )
    report.validate()
    return report


# ---------------------------------------------------------------------------
# two-tower baseline
# ---------------------------------------------------------------------------


def two_tower_retrieve(query_vec: np.ndarray, image_vecs: np.ndarray,
                       K: int) -> list[int]:
    """Exact top-K by dot product over a linear scan; ties by ascending id."""
    query_vec = np.asarray(query_vec)
    if query_vec.shape != (image_vecs.shape[1],):
        raise ShapeError(
            f"two_tower_retrieve: query {query_vec.shape} vs images {image_vecs.shape}")
    scores = image_vecs @ query_vec
    order = np.lexsort((np.arange(scores.size), -scores))
    return order[:min(K, scores.size)].tolist()


@dataclass
class TwoTowerIndex:
    """Projected, normalized image matrix under the tokenizer heads."""

    image_vecs: np.ndarray   # (n_images, D_c)
    image_ids: np.ndarray    # (n_images,)

    @classmethod
    def build(cls, bundle: DatasetBundle, tok_model: TokenizerModel) -> "TwoTowerIndex":
        by_image: dict[int, np.ndarray] = {}
        for r in bundle.records:
            by_image.setdefault(r.image_id, r.image_vec)
        ids = np.array(sorted(by_image))
        mat = np.stack([by_image[i] for i in ids])
        proj = normalize_rows(tok_model.image_project(mat))
        return cls(image_vecs=proj, image_ids=ids)

    def query(self, tok_model: TokenizerModel, text_vec: np.ndarray, K: int) -> list[int]:
        q = normalize_rows(tok_model.text_project(text_vec[None, :]))[0]
        rows = two_tower_retrieve(q, self.image_vecs, K)
        return [int(self.image_ids[r]) for r in rows]


def evaluate_two_tower(bundle_eval: DatasetBundle, tt_index: TwoTowerIndex,
                       tok_model: TokenizerModel, ks: Sequence[int] = (1, 5, 10),
                       fingerprint: str = "two-tower") -> EvalReport:
    recalls = {k: 0 for k in ks}
    n = 0
    for r in bundle_eval.records:
        ranked = tt_index.query(tok_model, r.text_vec, max(ks))
        for k in ks:
            recalls[k] += r.image_id in ranked[:k]
        n += 1
    report = EvalReport(recall={k: recalls[k] / n for k in ks}, query_count=n,
                        config_fingerprint=fingerprint)
    report.validate()
    return report


# ---------------------------------------------------------------------------
# latency benchmark
# ---------------------------------------------------------------------------


@dataclass
class BenchReport:
    """Median queries/sec per corpus size for both retrieval paths."""

    sizes: list[int]
    generative_qps: dict[int, float]
    two_tower_qps: dict[int, float]
    skipped: dict[int, str] = field(default_factory=dict)
    note: str = "single-threaded timing; warm-up excluded; median over trials"

    def validate(self) -> None:
        if self.sizes != sorted(set(self.sizes)):
            raise IntegrityError("benchmark sizes must be strictly increasing")
        for qps in (self.generative_qps, self.two_tower_qps):
            if any(v <= 0 for v in qps.values()):
                raise IntegrityError("throughputs must be positive")

    def table(self) -> str:
        lines = [f"# {self.note}", f"{'size':>8}  {'generative_qps':>14}  {'two_tower_qps':>13}"]
        for size in self.sizes:
            if size in self.skipped:
                lines.append(f"{size:>8}  skipped: {self.skipped[size]}")
                continue
            lines.append(f"{size:>8}  {self.generative_qps[size]:>14.2f}  "
                         f"{self.two_tower_qps[size]:>13.2f}")
        return "\n".join(lines) + "\n"

    def to_jsonl(self) -> str:
        lines = []
        for size in self.sizes:
            if size in self.skipped:
                lines.append(json.dumps({"size": size, "skipped": self.skipped[size]}))
                continue
            for method, qps in (("generative", self.generative_qps[size]),
                                ("two_tower", self.two_tower_qps[size])):
                lines.append(json.dumps({"size": size, "method": method, "qps": qps}))
        return "\n".join(lines)

    def to_csv(self) -> str:
        rows = ["size,method,qps"]
        for size in self.sizes:
            if size in self.skipped:
                continue
            rows.append(f"{size},generative,{self.generative_qps[size]:.4f}")
            rows.append(f"{size},two_tower,{self.two_tower_qps[size]:.4f}")
        return "\n".join(rows) + "\n"

    def write(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        (directory / "bench.txt").write_text(self.table(), encoding="utf-8")
        (directory / "bench.jsonl").write_text(self.to_jsonl() + "\n", encoding="utf-8")
        (directory / "bench.csv").write_text(self.to_csv(), encoding="utf-8")


def benchmark_latency(
    model: Seq2SeqModel,
    tok_model: TokenizerModel,
    sizes: Sequence[int],
    trials: int = 3,
    queries_per_trial: int = 32,
    b: int = 10,
    K: int = 10,
    seed: int = 0,
    base_synth: Optional[SynthConfig] = None,
    sketch: Optional[SketchConfig] = None,
) -> BenchReport:
    """Throughput of both paths at growing corpus sizes.

    Each size gets a fresh synthetic corpus from one seed, tokenized with
    the given tokenizer; query cost is then timed per path with one warm-up
    pass excluded. A size that cannot be materialized is reported and
    skipped rather than failing the run.
    """
    sizes = sorted(set(int(s) for s in sizes))
    base = base_synth or SynthConfig()
    sketch = sketch or SketchConfig()
    report = BenchReport(sizes=list(sizes), generative_qps={}, two_tower_qps={})
    for size in sizes:
        try:
            cfg = SynthConfig(
                num_images=size, num_clusters=base.num_clusters, D=base.D,
                captions_per_image=1,
                image_noise_sigma=base.image_noise_sigma,
                text_noise_sigma=base.text_noise_sigma,
                modality_gap_strength=base.modality_gap_strength, seed=seed)
            bundle = generate_synthetic(cfg)
            index = assign_vokens(bundle, tok_model)
            trie = build_trie(index)
            tt_index = TwoTowerIndex.build(bundle, tok_model)
            sketcher = QuerySketcher.fit(bundle, sketch)
            if sketcher.tokens_needed > model.vocab.base_size:
                raise UsageError("sketch tokens exceed the model's base vocabulary")
            rng = np.random.default_rng(seed + 1)
            picks = rng.choice(len(bundle.records),
                               size=min(queries_per_trial, len(bundle.records)),
                               replace=False)
            q_tokens = [sketcher.tokens_for(bundle.records[i].image_vec, 0)
                        for i in picks]
            q_texts = [bundle.records[i].text_vec for i in picks]

            def run_generative() -> float:
                t0 = time.perf_counter()
                for q in q_tokens:
                    batch_retrieve(model, trie, index, [q], K=K, b=b)
                return len(q_tokens) / (time.perf_counter() - t0)

            def run_two_tower() -> float:
                t0 = time.perf_counter()
                for tv in q_texts:
                    tt_index.query(tok_model, tv, K)
                return len(q_texts) / (time.perf_counter() - t0)

            run_generative()
            run_two_tower()
            gen = [run_generative() for _ in range(trials)]
            tt = [run_two_tower() for _ in range(trials)]
            report.generative_qps[size] = float(np.median(gen))
            report.two_tower_qps[size] = float(np.median(tt))
        except MemoryError as exc:
            report.skipped[size] = f"insufficient memory ({exc})"
    report.validate()
    return report
