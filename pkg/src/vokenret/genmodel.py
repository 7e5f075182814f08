"""Token-to-voken sequence model.

The vocabulary concatenates text token buckets, three specials, and one id
per codebook row; voken embedding rows start as bit-exact copies of the
codebook (zero-padded to d_model) so the identifiers enter training already
carrying their learned semantics. The model itself is a small pre-LN
encoder-decoder transformer with learned positional embeddings. Training
teacher-forces the target identifier plus EOS; forced scoring sums the
unconstrained per-step log-probabilities of a fixed identifier and stays
differentiable, which is what the discriminative loss trains through.

Queries are token id sequences: real text is whitespace-lowercased and
word-hashed into the base buckets; synthetic corpora get "sketch" captions,
quantile-bucketed projections of the image vector onto fixed random
directions with a per-caption dither, standing in for how a caption
describes its image.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import numerics as nm
from .corpus import DatasetBundle
from .errors import ConfigError, IntegrityError, UsageError
from .tokenizer import Codebook


@dataclass(frozen=True)
class Vocabulary:
    base_size: int
    n_vokens: int

    @property
    def pad_id(self) -> int:
        return self.base_size

    @property
    def bos_id(self) -> int:
        return self.base_size + 1

    @property
    def eos_id(self) -> int:
        return self.base_size + 2

    @property
    def voken_offset(self) -> int:
        return self.base_size + 3

    @property
    def total_size(self) -> int:
        return self.base_size + 3 + self.n_vokens

    def voken_to_vocab(self, voken_id: int) -> int:
        if not 0 <= voken_id < self.n_vokens:
            raise UsageError(f"voken id {voken_id} outside [0, {self.n_vokens})")
        return self.voken_offset + voken_id

    def vocab_to_voken(self, vocab_id: int) -> int:
        voken = vocab_id - self.voken_offset
        if not 0 <= voken < self.n_vokens:
            raise UsageError(f"vocab id {vocab_id} is not a voken")
        return voken


def build_vocab(base_size: int, codebook: Codebook, d_model: int, seed: int = 0,
                random_voken_embed: bool = False) -> tuple[Vocabulary, np.ndarray]:
    """Vocabulary plus its initial embedding table.

    Voken rows are the codebook rows copied bit-exactly into the first D_c
    coordinates and zero-padded; ``random_voken_embed`` keeps the seeded
    normal init instead (the ablation).
    """
    if base_size < 1:
        raise ConfigError("base vocabulary must be non-empty")
    if d_model < codebook.D_c:
        raise ConfigError(
            f"d_model={d_model} cannot hold codebook rows of width {codebook.D_c}")
    vocab = Vocabulary(base_size=base_size, n_vokens=codebook.N)
    rng = np.random.default_rng(seed)
    table = (rng.standard_normal((vocab.total_size, d_model)) * 0.02).astype(np.float32)
    if not random_voken_embed:
        table[vocab.voken_offset:, :] = 0.0
        table[vocab.voken_offset:, :codebook.D_c] = codebook.entries
    return vocab, table


# ---------------------------------------------------------------------------
# queries
# ---------------------------------------------------------------------------


def hash_tokens(text: str, base_size: int) -> np.ndarray:
    """Whitespace-lowercased word hashing into the base buckets."""
    words = text.lower().split()
    if not words:
        raise UsageError("cannot tokenize an empty caption")
    return np.array([zlib.crc32(w.encode("utf-8")) % base_size for w in words],
                    dtype=np.int64)


@dataclass
class SketchConfig:
    directions: int = 16
    buckets: int = 16
    coarse_buckets: int = 4   # second, coarser token per direction; 0 disables
    phases: int = 1           # phase-shifted re-quantizations per direction
    jitter: float = 0.5       # per-caption dither, in units of a direction's std/buckets
    seed: int = 0


@dataclass
class QuerySketcher:
    """Synthetic captions: quantized projections of the image vector.

    Direction vectors and quantile boundaries are fitted on the full corpus
    bundle so train/val/test splits share one token alphabet. Caption k of
    an image adds a fixed per-caption dither before bucketing, giving each
    caption a slightly different discretization of the same content. Two
    redundancy mechanisms trade tokens for smoothness: an optional coarser
    bucket token per direction, and phase-shifted re-quantizations whose
    boundaries are offset by a fraction of a bucket, so a small change of
    the underlying value flips one phase token at a time.
    """

    dirs: np.ndarray             # (K, D)
    boundaries: np.ndarray       # (phases, K, buckets - 1)
    coarse_boundaries: Optional[np.ndarray]  # (K, coarse - 1) or None
    dither: np.ndarray           # (captions_per_image, K)
    buckets: int
    coarse_buckets: int
    phases: int
    captions_per_image: int

    @classmethod
    def fit(cls, bundle: DatasetBundle, cfg: SketchConfig) -> "QuerySketcher":
        if cfg.phases < 1:
            raise ConfigError("sketch needs at least one phase")
        if cfg.directions > bundle.D:
            raise ConfigError(
                f"sketch directions {cfg.directions} exceed embedding dim {bundle.D}")
        rng = np.random.default_rng(cfg.seed)
        # Orthonormal directions: bucket values then reconstruct the vector
        # without amplifying quantization error through an ill-conditioned
        # basis.
        a = rng.standard_normal((bundle.D, bundle.D))
        q, r = np.linalg.qr(a)
        dirs = (q * np.sign(np.diag(r))).T[:cfg.directions]
        proj = bundle.image_matrix() @ dirs.T        # (n_images, K)
        qs = np.linspace(0.0, 1.0, cfg.buckets + 1)[1:-1]
        base = np.quantile(proj, qs, axis=0).T        # (K, buckets-1)
        width = proj.std(axis=0, keepdims=True).T / cfg.buckets  # (K, 1)
        boundaries = np.stack([
            base + (p / cfg.phases) * width for p in range(cfg.phases)
        ])                                            # (phases, K, buckets-1)
        coarse = None
        if cfg.coarse_buckets > 1:
            qc = np.linspace(0.0, 1.0, cfg.coarse_buckets + 1)[1:-1]
            coarse = np.quantile(proj, qc, axis=0).T
        scale = proj.std(axis=0) / cfg.buckets        # (K,)
        dither = (rng.random((bundle.captions_per_image, cfg.directions)) - 0.5)
        dither *= 2.0 * cfg.jitter * scale[None, :]
        return cls(dirs=dirs, boundaries=boundaries, coarse_boundaries=coarse,
                   dither=dither, buckets=cfg.buckets,
                   coarse_buckets=cfg.coarse_buckets if coarse is not None else 0,
                   phases=cfg.phases,
                   captions_per_image=bundle.captions_per_image)

    @property
    def tokens_needed(self) -> int:
        k = self.dirs.shape[0]
        return (self.captions_per_image + k * self.buckets * self.phases
                + k * self.coarse_buckets)

    def tokens_for(self, image_vec: np.ndarray, caption_index: int) -> np.ndarray:
        if not 0 <= caption_index < self.captions_per_image:
            raise UsageError(f"caption index {caption_index} out of range")
        proj = self.dirs @ np.asarray(image_vec, dtype=np.float64)
        proj = proj + self.dither[caption_index]
        k = self.dirs.shape[0]
        n_tok = 1 + k * self.phases + (k if self.coarse_buckets else 0)
        toks = np.empty(n_tok, dtype=np.int64)
        toks[0] = caption_index
        fine_base = self.captions_per_image
        coarse_base = fine_base + k * self.buckets * self.phases
        pos = 1
        for p in range(self.phases):
            for j in range(k):
                bucket = int(np.searchsorted(self.boundaries[p, j], proj[j]))
                toks[pos] = fine_base + (p * k + j) * self.buckets + bucket
                pos += 1
        if self.coarse_buckets:
            for j in range(k):
                cb = int(np.searchsorted(self.coarse_boundaries[j], proj[j]))
                toks[pos] = coarse_base + j * self.coarse_buckets + cb
                pos += 1
        return toks


@dataclass
class QueryBatch:
    """Aligned query token sequences, gold image ids, and text ids."""

    tokens: list[np.ndarray]
    image_ids: list[int]
    text_ids: list[int]

    def __len__(self) -> int:
        return len(self.tokens)


def build_queries(bundle: DatasetBundle, base_size: int,
                  sketcher: Optional[QuerySketcher] = None) -> QueryBatch:
    """One query per record: hashed caption text when present, otherwise a
    sketch of the record's image vector."""
    tokens, image_ids, text_ids = [], [], []
    caption_rank: dict[int, int] = {}
    for r in sorted(bundle.records, key=lambda r: r.text_id):
        if r.caption is not None:
            toks = hash_tokens(r.caption, base_size)
        else:
            if sketcher is None:
                raise UsageError("records without captions need a fitted sketcher")
            if sketcher.tokens_needed > base_size:
                raise ConfigError(
                    f"sketch needs {sketcher.tokens_needed} tokens but base vocabulary has {base_size}")
            k = caption_rank.get(r.image_id, 0)
            caption_rank[r.image_id] = k + 1
            toks = sketcher.tokens_for(r.image_vec, k)
        if toks.size < 1 or toks.min() < 0 or toks.max() >= base_size:
            raise IntegrityError("query token outside the base vocabulary")
        tokens.append(toks)
        image_ids.append(r.image_id)
        text_ids.append(r.text_id)
    return QueryBatch(tokens=tokens, image_ids=image_ids, text_ids=text_ids)


# ---------------------------------------------------------------------------
# transformer
# ---------------------------------------------------------------------------


@dataclass
class ModelConfig:
    d_model: int = 128
    layers: int = 2
    heads: int = 4
    ff: int = 256
    max_len: int = 64
    seed: int = 0
    # Tie the output projection to the embedding table. Voken logits then
    # score hidden states against the (codebook-initialized) voken vectors,
    # which is what lets the model rank identifiers it never generated in
    # training.
    tie_output: bool = True

    def validate(self) -> None:
        if self.d_model % self.heads != 0:
            raise ConfigError(f"d_model={self.d_model} not divisible by heads={self.heads}")
        if min(self.d_model, self.layers, self.heads, self.ff, self.max_len) < 1:
            raise ConfigError("model dimensions must be positive")


def _linear_init(rng, d_in, d_out):
    return nm.parameter((rng.standard_normal((d_in, d_out)) * 0.02).astype(np.float32))


class Seq2SeqModel:
    """Pre-LN encoder-decoder transformer with an extended vocabulary."""

    def __init__(self, vocab: Vocabulary, cfg: ModelConfig,
                 embedding: Optional[np.ndarray] = None):
        cfg.validate()
        self.vocab = vocab
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        d, ff = cfg.d_model, cfg.ff
        params: dict[str, nm.Tensor] = {}
        if embedding is None:
            embedding = (rng.standard_normal((vocab.total_size, d)) * 0.02).astype(np.float32)
        if embedding.shape != (vocab.total_size, d):
            raise ConfigError(
                f"embedding table {embedding.shape} does not match vocab {vocab.total_size} x {d}")
        params["emb.tok"] = nm.parameter(embedding.copy())
        params["emb.pos_enc"] = nm.parameter(
            (rng.standard_normal((cfg.max_len, d)) * 0.02).astype(np.float32))
        params["emb.pos_dec"] = nm.parameter(
            (rng.standard_normal((cfg.max_len, d)) * 0.02).astype(np.float32))

        def block(prefix: str, cross: bool):
            sub = ["self"] + (["cross"] if cross else [])
            for name in sub:
                for w in ("wq", "wk", "wv", "wo"):
                    params[f"{prefix}.{name}.{w}"] = _linear_init(rng, d, d)
                for b in ("bq", "bk", "bv", "bo"):
                    params[f"{prefix}.{name}.{b}"] = nm.parameter(np.zeros(d, dtype=np.float32))
            params[f"{prefix}.ffn.w1"] = _linear_init(rng, d, ff)
            params[f"{prefix}.ffn.b1"] = nm.parameter(np.zeros(ff, dtype=np.float32))
            params[f"{prefix}.ffn.w2"] = _linear_init(rng, ff, d)
            params[f"{prefix}.ffn.b2"] = nm.parameter(np.zeros(d, dtype=np.float32))
            n_ln = 3 if cross else 2
            for i in range(1, n_ln + 1):
                params[f"{prefix}.ln{i}.g"] = nm.parameter(np.ones(d, dtype=np.float32))
                params[f"{prefix}.ln{i}.b"] = nm.parameter(np.zeros(d, dtype=np.float32))

        for layer in range(cfg.layers):
            block(f"enc.{layer}", cross=False)
            block(f"dec.{layer}", cross=True)
        for stack in ("enc", "dec"):
            params[f"{stack}.final_ln.g"] = nm.parameter(np.ones(d, dtype=np.float32))
            params[f"{stack}.final_ln.b"] = nm.parameter(np.zeros(d, dtype=np.float32))
        if not cfg.tie_output:
            params["out.w"] = _linear_init(rng, d, vocab.total_size)
        params["out.b"] = nm.parameter(np.zeros(vocab.total_size, dtype=np.float32))
        self.params = params

    # -- forward pieces ----------------------------------------------------

    def _attn(self, prefix: str, x_q: nm.Tensor, x_kv: nm.Tensor,
              mask: Optional[np.ndarray]) -> nm.Tensor:
        p = self.params
        h = self.cfg.heads
        d = self.cfg.d_model
        dh = d // h
        bq = x_q.shape[0]
        tq, tk = x_q.shape[1], x_kv.shape[1]

        def heads_of(x, w, b, t, batch):
            y = nm.add(nm.matmul(x, p[f"{prefix}.{w}"]), p[f"{prefix}.{b}"])
            return nm.transpose(nm.reshape(y, (batch, t, h, dh)), (0, 2, 1, 3))

        q = heads_of(x_q, "wq", "bq", tq, bq)
        k = heads_of(x_kv, "wk", "bk", tk, x_kv.shape[0])
        v = heads_of(x_kv, "wv", "bv", tk, x_kv.shape[0])
        scores = nm.scale(nm.matmul(q, nm.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
        attn = nm.softmax(scores, mask=mask)
        ctx = nm.matmul(attn, v)
        ctx = nm.reshape(nm.transpose(ctx, (0, 2, 1, 3)), (bq, tq, d))
        return nm.add(nm.matmul(ctx, p[f"{prefix}.wo"]), p[f"{prefix}.bo"])

    def _ffn(self, prefix: str, x: nm.Tensor) -> nm.Tensor:
        p = self.params
        hidden = nm.relu(nm.add(nm.matmul(x, p[f"{prefix}.w1"]), p[f"{prefix}.b1"]))
        return nm.add(nm.matmul(hidden, p[f"{prefix}.w2"]), p[f"{prefix}.b2"])

    def _ln(self, prefix: str, x: nm.Tensor) -> nm.Tensor:
        return nm.layer_norm(x, self.params[f"{prefix}.g"], self.params[f"{prefix}.b"])

    def _embed(self, ids: np.ndarray, pos_table: str) -> nm.Tensor:
        t = ids.shape[1]
        if t > self.cfg.max_len:
            raise UsageError(f"sequence of length {t} exceeds max_len={self.cfg.max_len}")
        tok = nm.gather_rows(self.params["emb.tok"], ids)
        pos = nm.gather_rows(self.params[pos_table], np.arange(t))
        return nm.add(tok, pos)

    def encode(self, ids: np.ndarray, pad_mask: Optional[np.ndarray] = None) -> nm.Tensor:
        """(B, T) token ids -> (B, T, d) memory; ``pad_mask`` True at PAD."""
        x = self._embed(ids, "emb.pos_enc")
        attn_mask = None
        if pad_mask is not None:
            attn_mask = pad_mask[:, None, None, :]
        for layer in range(self.cfg.layers):
            prefix = f"enc.{layer}"
            normed = self._ln(f"{prefix}.ln1", x)
            x = nm.add(x, self._attn(f"{prefix}.self", normed, normed, attn_mask))
            x = nm.add(x, self._ffn(f"{prefix}.ffn", self._ln(f"{prefix}.ln2", x)))
        return self._ln("enc.final_ln", x)

    def decode(self, memory: nm.Tensor, dec_ids: np.ndarray,
               enc_pad_mask: Optional[np.ndarray] = None) -> nm.Tensor:
        """Causal decoder over ``dec_ids`` with cross-attention to memory;
        returns (B, T, total_size) logits."""
        t = dec_ids.shape[1]
        x = self._embed(dec_ids, "emb.pos_dec")
        causal = np.triu(np.ones((t, t), dtype=bool), k=1)
        cross_mask = None
        if enc_pad_mask is not None:
            cross_mask = enc_pad_mask[:, None, None, :]
        for layer in range(self.cfg.layers):
            prefix = f"dec.{layer}"
            normed = self._ln(f"{prefix}.ln1", x)
            x = nm.add(x, self._attn(f"{prefix}.self", normed, normed, causal))
            x = nm.add(x, self._attn(f"{prefix}.cross", self._ln(f"{prefix}.ln2", x),
                                     memory, cross_mask))
            x = nm.add(x, self._ffn(f"{prefix}.ffn", self._ln(f"{prefix}.ln3", x)))
        x = self._ln("dec.final_ln", x)
        if self.cfg.tie_output:
            proj = nm.transpose(self.params["emb.tok"], (1, 0))
        else:
            proj = self.params["out.w"]
        return nm.add(nm.matmul(x, proj), self.params["out.b"])

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}


def pad_queries(queries: Sequence[np.ndarray], vocab: Vocabulary) -> tuple[np.ndarray, np.ndarray]:
    """Right-pad to the batch max length; mask is True at PAD positions."""
    if not queries:
        raise UsageError("empty query batch")
    for q in queries:
        if q.size < 1:
            raise UsageError("queries must have at least one token")
        if q.max() >= vocab.voken_offset:
            raise UsageError("query contains a voken or out-of-range id")
    t = max(q.size for q in queries)
    ids = np.full((len(queries), t), vocab.pad_id, dtype=np.int64)
    mask = np.ones((len(queries), t), dtype=bool)
    for i, q in enumerate(queries):
        ids[i, :q.size] = q
        mask[i, :q.size] = False
    return ids, mask


def _voken_rows(vocab: Vocabulary, targets: np.ndarray) -> np.ndarray:
    targets = np.asarray(targets, dtype=np.int64)
    if targets.size and (targets.min() < 0 or targets.max() >= vocab.n_vokens):
        raise UsageError("target contains ids outside the voken range")
    return targets + vocab.voken_offset


def generative_loss(model: Seq2SeqModel, queries: Sequence[np.ndarray],
                    targets: np.ndarray) -> nm.Tensor:
    """Teacher-forced next-voken loss.

    Per sequence: the sum of -log p over voken_1..voken_M plus the closing
    EOS, laid out as BOS, vokens, EOS; the batch mean is returned.
    """
    vocab = model.vocab
    rows = _voken_rows(vocab, targets)
    b, m = rows.shape
    ids, mask = pad_queries(queries, vocab)
    memory = model.encode(ids, mask)
    dec_in = np.concatenate(
        [np.full((b, 1), vocab.bos_id, dtype=np.int64), rows], axis=1)
    dec_targets = np.concatenate(
        [rows, np.full((b, 1), vocab.eos_id, dtype=np.int64)], axis=1)
    logits = model.decode(memory, dec_in, mask)
    nll = nm.cross_entropy(logits, dec_targets)        # (B, M+1)
    return nm.scale(nm.sum_all(nll), 1.0 / b)


def forced_scores(model: Seq2SeqModel, memory: nm.Tensor, enc_pad_mask: np.ndarray,
                  sequences: np.ndarray) -> nm.Tensor:
    """Log-probability of each length-M voken sequence, teacher-forced.

    ``memory`` rows must already be aligned 1:1 with ``sequences`` rows.
    Differentiable; EOS is not scored, matching the beam's accounting.
    """
    vocab = model.vocab
    rows = _voken_rows(vocab, sequences)
    r, m = rows.shape
    dec_in = np.concatenate(
        [np.full((r, 1), vocab.bos_id, dtype=np.int64), rows[:, :-1]], axis=1)
    logits = model.decode(memory, dec_in, enc_pad_mask)
    nll = nm.cross_entropy(logits, rows)               # (R, M)
    ones = nm.Tensor(np.ones((m, 1)))
    totals = nm.reshape(nm.matmul(nll, ones), (r,))
    return nm.scale(totals, -1.0)


def forced_score(model: Seq2SeqModel, query: np.ndarray, voken_seq) -> nm.Tensor:
    """Score one identifier for one query; scalar tensor, always <= 0."""
    seq = np.asarray(voken_seq, dtype=np.int64).reshape(1, -1)
    ids, mask = pad_queries([np.asarray(query)], model.vocab)
    memory = model.encode(ids, mask)
    scores = forced_scores(model, memory, mask, seq)
    return nm.reshape(scores, ())


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------


def save_model(directory, model: Seq2SeqModel, m_vokens: int) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    nm.save_weights(directory / "model.avgw", model.params)
    meta = {
        "T_base": model.vocab.base_size,
        "N": model.vocab.n_vokens,
        "M": m_vokens,
        "d_model": model.cfg.d_model,
        "E": model.cfg.layers,
        "heads": model.cfg.heads,
        "ff": model.cfg.ff,
        "max_len": model.cfg.max_len,
        "voken_offset": model.vocab.voken_offset,
        "tie_output": int(model.cfg.tie_output),
    }
    (directory / "model.meta").write_text(
        "".join(f"{k}={v}\n" for k, v in meta.items()), encoding="utf-8")


def load_model(directory) -> tuple[Seq2SeqModel, int]:
    directory = Path(directory)
    meta = dict(line.split("=") for line in
                (directory / "model.meta").read_text().splitlines() if line)
    vocab = Vocabulary(base_size=int(meta["T_base"]), n_vokens=int(meta["N"]))
    if vocab.voken_offset != int(meta["voken_offset"]):
        raise IntegrityError("model metadata is internally inconsistent")
    cfg = ModelConfig(d_model=int(meta["d_model"]), layers=int(meta["E"]),
                      heads=int(meta["heads"]), ff=int(meta["ff"]),
                      max_len=int(meta["max_len"]),
                      tie_output=bool(int(meta.get("tie_output", "1"))))
    model = Seq2SeqModel(vocab, cfg)
    weights = nm.load_weights(directory / "model.avgw")
    if set(weights) != set(model.params):
        raise IntegrityError("model checkpoint does not match its metadata")
    for name, arr in weights.items():
        if model.params[name].shape != arr.shape:
            raise IntegrityError(f"checkpoint shape mismatch for {name}")
        model.params[name].data = arr
    return model, int(meta["M"])
