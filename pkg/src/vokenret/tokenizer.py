"""Cross-modally aligned residual-quantization tokenizer.

An image vector is projected by a trainable head, then greedily decomposed
into M codebook rows (vokens): at each step the row nearest the current
residual is selected and subtracted. Training minimizes reconstruction of
the projected vector from the summed rows, a commit term pulling the
projection toward its (stop-gradient) partial sums, and an alignment term
pulling the reconstruction toward the paired text projection, which is what
injects query semantics into the codebook. Selected rows receive gradients
directly (the partial sum is linear in them); a straight-through estimator
additionally copies the quantized vector's gradient onto the projection.

Quantization runs in float64 with ties broken toward the lowest row index,
so assignments are exactly reproducible.
"""

from __future__ import annotations

import struct
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import numerics as nm
from .corpus import DatasetBundle, EmbeddingRecord
from .errors import ConfigError, FormatError, IntegrityError, ShapeError, TrainingError

CODEBOOK_MAGIC = b"AVGC"
CODEBOOK_VERSION = 1


@dataclass
class Codebook:
    """The voken vector table: row indices are the voken ids used everywhere."""

    entries: np.ndarray  # (N, D_c) float32
    M: int

    @property
    def N(self) -> int:
        return self.entries.shape[0]

    @property
    def D_c(self) -> int:
        return self.entries.shape[1]

    def validate(self) -> None:
        if self.entries.ndim != 2 or self.N < 2:
            raise ConfigError("codebook needs at least 2 rows")
        if self.M < 1:
            raise ConfigError("voken length M must be at least 1")
        if not np.isfinite(self.entries).all():
            raise IntegrityError("codebook contains non-finite entries")


def save_codebook(path, codebook: Codebook) -> None:
    codebook.validate()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(CODEBOOK_MAGIC)
        fh.write(struct.pack("<IIII", CODEBOOK_VERSION, codebook.N,
                             codebook.D_c, codebook.M))
        fh.write(np.ascontiguousarray(codebook.entries, dtype="<f4").tobytes())


def load_codebook(path) -> Codebook:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] != CODEBOOK_MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}, expected {CODEBOOK_MAGIC!r}")
    version, n, d_c, m = struct.unpack_from("<IIII", raw, 4)
    if version != CODEBOOK_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    expected = 20 + 4 * n * d_c
    if len(raw) != expected:
        raise FormatError(f"{path}: payload is {len(raw)} bytes, expected {expected}")
    entries = np.frombuffer(raw, dtype="<f4", count=n * d_c, offset=20).reshape(n, d_c).copy()
    return Codebook(entries=entries, M=m)


@dataclass
class QuantizationResult:
    ids: np.ndarray              # (M,) int
    partial_sums: np.ndarray     # (M, D_c): cumulative sums of selected rows
    final_residual: np.ndarray   # (D_c,): input minus the full partial sum
    per_step_residuals: np.ndarray  # (M, D_c): residual fed into each step


def residual_quantize(v: np.ndarray, codebook: Codebook) -> QuantizationResult:
    """Greedy per-step nearest-neighbor decomposition of one vector.

    Exact contract: step j picks argmin_c ||r_j - entries[c]||^2 with ties
    to the lowest index; r_{j+1} = r_j - entries[ids_j]; partial sums are
    sequential accumulations. Math runs in float64.
    """
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (codebook.D_c,):
        raise ShapeError(f"residual_quantize: vector {v.shape} vs codebook rows ({codebook.D_c},)")
    if not np.isfinite(v).all():
        raise IntegrityError("residual_quantize: non-finite input")
    entries = codebook.entries.astype(np.float64)
    ids = np.empty(codebook.M, dtype=np.int64)
    partial_sums = np.empty((codebook.M, codebook.D_c))
    per_step = np.empty((codebook.M, codebook.D_c))
    r = v.copy()
    acc = np.zeros(codebook.D_c)
    for j in range(codebook.M):
        per_step[j] = r
        dists = ((r[None, :] - entries) ** 2).sum(axis=1)
        ids[j] = int(np.argmin(dists))
        acc = acc + entries[ids[j]]
        partial_sums[j] = acc
        r = r - entries[ids[j]]
    return QuantizationResult(ids=ids, partial_sums=partial_sums,
                              final_residual=r, per_step_residuals=per_step)


def quantize_batch(vs: np.ndarray, codebook: Codebook, chunk: int = 1024,
                   exact: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized residual quantization: (B, M) ids and (B, M, D_c) partial
    sums.

    ``exact=True`` reproduces :func:`residual_quantize` bit for bit,
    including lowest-index tie-breaks. ``exact=False`` ranks rows by the
    expanded form c.c - 2 r.c (one BLAS matmul per step) -- still
    deterministic, but exact ties may round either way; the training loop
    uses it because assignments there only need to be self-consistent.
    """
    vs = np.asarray(vs, dtype=np.float64)
    if vs.ndim != 2 or vs.shape[1] != codebook.D_c:
        raise ShapeError(f"quantize_batch: batch {vs.shape} vs codebook rows ({codebook.D_c},)")
    entries = codebook.entries.astype(np.float64)
    n = vs.shape[0]
    ids = np.empty((n, codebook.M), dtype=np.int64)
    partials = np.empty((n, codebook.M, codebook.D_c))
    if not exact:
        c2 = (entries * entries).sum(axis=1)
        r = vs.copy()
        acc = np.zeros_like(r)
        for j in range(codebook.M):
            scores = c2[None, :] - 2.0 * (r @ entries.T)
            picked = scores.argmin(axis=1)
            ids[:, j] = picked
            rows = entries[picked]
            acc = acc + rows
            partials[:, j] = acc
            r = r - rows
        return ids, partials
    for start in range(0, n, chunk):
        stop = min(start + chunk, n)
        r = vs[start:stop].copy()
        acc = np.zeros_like(r)
        for j in range(codebook.M):
            dists = ((r[:, None, :] - entries[None, :, :]) ** 2).sum(axis=2)
            picked = dists.argmin(axis=1)
            ids[start:stop, j] = picked
            rows = entries[picked]
            acc = acc + rows
            partials[start:stop, j] = acc
            r = r - rows
    return ids, partials


@dataclass
class TokenizerModel:
    """Trainable projection heads, decoder MLP, and the codebook itself."""

    params: dict[str, nm.Tensor]
    M: int
    D: int
    D_c: int

    @property
    def codebook(self) -> Codebook:
        return Codebook(entries=self.params["codebook"].data, M=self.M)

    def image_project(self, x: np.ndarray) -> np.ndarray:
        """Head applied outside any graph, in float64 for stable argmins."""
        w = self.params["img_head.w"].data.astype(np.float64)
        b = self.params["img_head.b"].data.astype(np.float64)
        return np.asarray(x, dtype=np.float64) @ w + b

    def text_project(self, x: np.ndarray) -> np.ndarray:
        w = self.params["txt_head.w"].data.astype(np.float64)
        b = self.params["txt_head.b"].data.astype(np.float64)
        return np.asarray(x, dtype=np.float64) @ w + b


def _semi_orthogonal(rng: np.random.Generator, d_in: int, d_out: int) -> np.ndarray:
    a = rng.standard_normal((max(d_in, d_out), min(d_in, d_out)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    return q[:d_in, :] if q.shape == (max(d_in, d_out), d_out) else q.T[:d_in, :d_out]


def init_tokenizer(D: int, D_c: int, N: int, M: int, seed: int) -> TokenizerModel:
    rng = np.random.default_rng(seed)
    hidden = 2 * D_c
    params = {
        "img_head.w": nm.parameter(_semi_orthogonal(rng, D, D_c)),
        "img_head.b": nm.parameter(np.zeros(D_c)),
        "txt_head.w": nm.parameter(_semi_orthogonal(rng, D, D_c)),
        "txt_head.b": nm.parameter(np.zeros(D_c)),
        "dec.w1": nm.parameter(rng.standard_normal((D_c, hidden)) * np.sqrt(2.0 / D_c)),
        "dec.b1": nm.parameter(np.zeros(hidden)),
        "dec.w2": nm.parameter(rng.standard_normal((hidden, D_c)) * np.sqrt(1.0 / hidden)),
        "dec.b2": nm.parameter(np.zeros(D_c)),
        "codebook": nm.parameter(rng.standard_normal((N, D_c)) / np.sqrt(D_c)),
    }
    return TokenizerModel(params=params, M=M, D=D, D_c=D_c)


def _decode(params: dict[str, nm.Tensor], z: nm.Tensor) -> nm.Tensor:
    h = nm.relu(nm.add(nm.matmul(z, params["dec.w1"]), params["dec.b1"]))
    return nm.add(nm.matmul(h, params["dec.w2"]), params["dec.b2"])


def _batch_losses(model: TokenizerModel, x_img: np.ndarray, x_txt: np.ndarray,
                  ids: np.ndarray, zhat_partials: np.ndarray,
                  disable_align: bool = False, use_ste: bool = False,
                  coef_recon: float = 1.0, coef_commit: float = 1.0,
                  coef_align: float = 1.0):
    """Mean losses over a batch with fixed quantization assignments.

    Without the straight-through term the objective is smooth in every
    parameter, which is what the finite-difference oracle checks.
    """
    p = model.params
    batch = x_img.shape[0]
    m = ids.shape[1]
    v_img = nm.add(nm.matmul(nm.Tensor(x_img), p["img_head.w"]), p["img_head.b"])
    gathered = nm.gather_rows(p["codebook"], ids)           # (B, M, D_c)
    ones = nm.Tensor(np.ones((1, m)))
    z_m = nm.reshape(nm.matmul(ones, gathered), (batch, model.D_c))
    if use_ste:
        z_m = nm.add(z_m, nm.sub(v_img, nm.stop_gradient(v_img)))
    v_rec = _decode(p, z_m)
    l_recon = nm.mean(nm.squared_l2(nm.sub(v_img, v_rec)))
    commit_diff = nm.sub(nm.reshape(v_img, (batch, 1, model.D_c)),
                         nm.Tensor(zhat_partials))
    l_commit = nm.scale(nm.sum_all(nm.squared_l2(commit_diff)), 1.0 / batch)
    if disable_align:
        l_align = nm.Tensor(0.0)
        total = nm.add(nm.scale(l_recon, coef_recon), nm.scale(l_commit, coef_commit))
    else:
        v_txt = nm.add(nm.matmul(nm.Tensor(x_txt), p["txt_head.w"]), p["txt_head.b"])
        l_align = nm.mean(nm.squared_l2(nm.sub(v_rec, v_txt)))
        total = nm.add(nm.add(nm.scale(l_recon, coef_recon),
                              nm.scale(l_commit, coef_commit)),
                       nm.scale(l_align, coef_align))
    return l_recon, l_commit, l_align, total


def tokenizer_losses(record: EmbeddingRecord, model: TokenizerModel,
                     disable_align: bool = False):
    """Per-record losses (reconstruction, commit, alignment, total).

    Quantization assignments are held fixed inside the loss graph, so the
    returned total is smooth in all parameters and finite-difference
    checkable. Training applies the straight-through term separately.
    """
    if record.image_vec.shape != (model.D,):
        raise ShapeError(
            f"tokenizer_losses: record dim {record.image_vec.shape} vs head input ({model.D},)")
    v_img = model.image_project(record.image_vec[None, :])[0]
    q = residual_quantize(v_img, model.codebook)
    return _batch_losses(
        model,
        record.image_vec[None, :].astype(np.float64),
        record.text_vec[None, :].astype(np.float64),
        q.ids[None, :], q.partial_sums[None, :, :],
        disable_align=disable_align, use_ste=False,
    )


@dataclass
class TokenizerTrainConfig:
    N: int = 256
    M: int = 4
    D_c: Optional[int] = None     # defaults to the bundle's D
    lr: float = 2e-3
    batch_size: int = 2048
    epochs: int = 150
    seed: int = 0
    disable_align: bool = False
    coef_recon: float = 1.0
    coef_commit: float = 1.0
    coef_align: float = 1.0
    dead_code_sigma: float = 0.01
    use_ste: bool = True

    def validate(self) -> None:
        if self.N < 2 or self.M < 1:
            raise ConfigError("tokenizer needs N >= 2 and M >= 1")
        if self.lr <= 0 or self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("lr, batch_size, epochs must be positive")


@dataclass
class TokenizerTrainLog:
    epochs: list[dict] = field(default_factory=list)

    def write(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("epoch\tL_total\tL_recon\tL_commit\tL_align\tseconds\n")
            for row in self.epochs:
                fh.write("{epoch}\t{L_total:.6f}\t{L_recon:.6f}\t{L_commit:.6f}"
                         "\t{L_align:.6f}\t{seconds:.3f}\n".format(**row))


def train_tokenizer(train_bundle: DatasetBundle, config: TokenizerTrainConfig,
                    log: Optional[TokenizerTrainLog] = None) -> TokenizerModel:
    """Fit heads, decoder, and codebook by Adam on the summed objective.

    Codebook rows unused for a full epoch are reseeded to a randomly chosen
    observed projection plus small noise, with their Adam moments reset.
    Deterministic for a fixed config.
    """
    config.validate()
    if not train_bundle.records:
        raise ConfigError("train_tokenizer: empty bundle")
    d_c = config.D_c if config.D_c is not None else train_bundle.D
    model = init_tokenizer(train_bundle.D, d_c, config.N, config.M, config.seed)
    state = nm.AdamState(lr=config.lr)
    rng = np.random.default_rng(config.seed + 1)

    x_img_all = np.stack([r.image_vec for r in train_bundle.records]).astype(np.float64)
    x_txt_all = np.stack([r.text_vec for r in train_bundle.records]).astype(np.float64)
    n = x_img_all.shape[0]
    batch_size = min(config.batch_size, n)

    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        order = rng.permutation(n)
        used = np.zeros(config.N, dtype=bool)
        sums = np.zeros(4)
        batches = 0
        last_proj: Optional[np.ndarray] = None
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            x_img = x_img_all[idx]
            x_txt = x_txt_all[idx]
            with nm.no_grad():
                proj = model.image_project(x_img)
            ids, partials = quantize_batch(proj, model.codebook, exact=False)
            used[np.unique(ids)] = True
            last_proj = proj
            nm.zero_grads(model.params)
            with nm.Graph() as graph:
                l_recon, l_commit, l_align, total = _batch_losses(
                    model, x_img, x_txt, ids, partials,
                    disable_align=config.disable_align, use_ste=config.use_ste,
                    coef_recon=config.coef_recon, coef_commit=config.coef_commit,
                    coef_align=config.coef_align,
                )
            if not np.isfinite(total.data):
                raise TrainingError(
                    f"tokenizer loss diverged at epoch {epoch}, step {batches}")
            nm.backpropagate(graph, total, model.params)
            nm.adam_update(model.params, nm.grads_of(model.params), state)
            sums += [total.item(), l_recon.item(), l_commit.item(), l_align.item()]
            batches += 1

        dead = np.flatnonzero(~used)
        if dead.size and last_proj is not None:
            entries = model.params["codebook"].data.copy()
            for row in dead:
                src = last_proj[rng.integers(0, last_proj.shape[0])]
                entries[row] = src + config.dead_code_sigma * rng.standard_normal(d_c)
            model.params["codebook"].data = entries.astype(
                model.params["codebook"].data.dtype)
            for moment in (state.m, state.v):
                if "codebook" in moment:
                    moment["codebook"][dead] = 0.0

        if log is not None:
            log.epochs.append(dict(
                epoch=epoch, L_total=sums[0] / batches, L_recon=sums[1] / batches,
                L_commit=sums[2] / batches, L_align=sums[3] / batches,
                seconds=time.perf_counter() - t0,
            ))
    return model


def save_tokenizer(directory, model: TokenizerModel) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_codebook(directory / "codebook.avgc", model.codebook)
    heads = {k: v for k, v in model.params.items() if k != "codebook"}
    nm.save_weights(directory / "tokenizer.avgw", heads)
    (directory / "tokenizer.meta").write_text(
        f"D={model.D}\nD_c={model.D_c}\nM={model.M}\n", encoding="utf-8")


def load_tokenizer(directory) -> TokenizerModel:
    directory = Path(directory)
    codebook = load_codebook(directory / "codebook.avgc")
    weights = nm.load_weights(directory / "tokenizer.avgw")
    meta = dict(line.split("=") for line in
                (directory / "tokenizer.meta").read_text().splitlines() if line)
    params = {name: nm.parameter(arr) for name, arr in weights.items()}
    params["codebook"] = nm.parameter(codebook.entries)
    model = TokenizerModel(params=params, M=codebook.M,
                           D=int(meta["D"]), D_c=int(meta["D_c"]))
    if model.params["img_head.w"].shape != (model.D, model.D_c):
        raise IntegrityError("tokenizer checkpoint does not match its metadata")
    return model


# ---------------------------------------------------------------------------
# voken assignment
# ---------------------------------------------------------------------------


@dataclass
class VokenIndex:
    """Bidirectional map between images and their voken sequences.

    Distinct images may share a sequence; such collisions are recorded, and
    retrieval breaks the tie by ascending image id.
    """

    image_to_seq: dict[int, tuple[int, ...]]
    seq_to_images: dict[tuple[int, ...], list[int]]

    @property
    def num_images(self) -> int:
        return len(self.image_to_seq)

    @property
    def num_sequences(self) -> int:
        return len(self.seq_to_images)

    @property
    def collision_buckets(self) -> int:
        return sum(1 for v in self.seq_to_images.values() if len(v) >= 2)

    @property
    def max_bucket(self) -> int:
        return max((len(v) for v in self.seq_to_images.values()), default=0)

    @property
    def collision_rate(self) -> float:
        if not self.image_to_seq:
            return 0.0
        return (self.num_images - self.num_sequences) / self.num_images

    def validate(self) -> None:
        rebuilt: dict[tuple[int, ...], list[int]] = {}
        for image_id, seq in self.image_to_seq.items():
            rebuilt.setdefault(seq, []).append(image_id)
        rebuilt = {k: sorted(v) for k, v in rebuilt.items()}
        if rebuilt != {k: sorted(v) for k, v in self.seq_to_images.items()}:
            raise IntegrityError("voken index maps are inconsistent")

    def save(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as fh:
            for image_id in sorted(self.image_to_seq):
                seq = ",".join(str(v) for v in self.image_to_seq[image_id])
                fh.write(f"{image_id}\t{seq}\n")

    @classmethod
    def load(cls, path) -> "VokenIndex":
        image_to_seq: dict[int, tuple[int, ...]] = {}
        lengths = set()
        for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
            if not line.strip():
                continue
            try:
                image_part, seq_part = line.split("\t")
                image_id = int(image_part)
                seq = tuple(int(tok) for tok in seq_part.split(","))
            except ValueError:
                raise FormatError(f"{path}:{lineno}: expected 'image_id<TAB>v1,v2,...'")
            if image_id in image_to_seq:
                raise IntegrityError(f"{path}:{lineno}: duplicate image id {image_id}")
            image_to_seq[image_id] = seq
            lengths.add(len(seq))
        if len(lengths) > 1:
            raise IntegrityError(f"{path}: mixed voken sequence lengths {sorted(lengths)}")
        return cls.from_assignments(image_to_seq)

    @classmethod
    def from_assignments(cls, image_to_seq: dict[int, tuple[int, ...]]) -> "VokenIndex":
        seq_to_images: dict[tuple[int, ...], list[int]] = {}
        for image_id in sorted(image_to_seq):
            seq_to_images.setdefault(image_to_seq[image_id], []).append(image_id)
        index = cls(image_to_seq=dict(image_to_seq), seq_to_images=seq_to_images)
        index.validate()
        return index


def assign_vokens(bundle: DatasetBundle, model: TokenizerModel) -> VokenIndex:
    """Tokenize every image in the bundle once; collisions are allowed."""
    by_image: dict[int, np.ndarray] = {}
    for r in bundle.records:
        by_image.setdefault(r.image_id, r.image_vec)
    image_ids = sorted(by_image)
    mat = np.stack([by_image[i] for i in image_ids])
    proj = model.image_project(mat)
    ids, _ = quantize_batch(proj, model.codebook)
    assignments = {image_id: tuple(int(v) for v in ids[row])
                   for row, image_id in enumerate(image_ids)}
    return VokenIndex.from_assignments(assignments)
