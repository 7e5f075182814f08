"""Operator surface: synth | train-tokenizer | tokenize | train-model | eval | bench | inspect.

Every command reads one config file, validates its inputs, writes its
artifact plus the resolved config under the output root (``--out`` or
``$VOKENRET_OUT``, default ``./runs``), and exits nonzero with one
machine-parsable error line on failure. Comma-listed scalar config keys fan
out into one run per combination, each under its own subdirectory.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

from . import corpus
from . import decoding
from . import discriminative as dis
from . import genmodel as gm
from . import retrieval as ret
from . import tokenizer as tok
from .config import RunConfig, expand_sweeps
from .errors import DependencyError, UsageError, VokenRetError


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise DependencyError(f"missing {what}: {path}")
    return path


def _stage_seed(cfg: RunConfig, offset: int) -> int:
    return cfg.get_int("seed") + offset


def _synth_config(cfg: RunConfig) -> corpus.SynthConfig:
    return corpus.SynthConfig(
        num_images=cfg.get_int("num_images"),
        num_clusters=cfg.get_int("num_clusters"),
        D=cfg.get_int("D"),
        captions_per_image=cfg.get_int("captions_per_image"),
        image_noise_sigma=cfg.get_float("image_noise_sigma"),
        text_noise_sigma=cfg.get_float("text_noise_sigma"),
        modality_gap_strength=cfg.get_float("modality_gap_strength"),
        seed=_stage_seed(cfg, 0),
    )


def _load_bundle(root: Path) -> corpus.DatasetBundle:
    _require(root / "dataset" / "pairs.tsv", "dataset (run `synth` first)")
    return corpus.load_bundle(root / "dataset")


def _split(cfg: RunConfig, bundle):
    return corpus.split(bundle, cfg.get_float("train_frac"),
                        cfg.get_float("val_frac"), seed=_stage_seed(cfg, 1))


def _sketcher(cfg: RunConfig, bundle) -> gm.QuerySketcher:
    return gm.QuerySketcher.fit(bundle, gm.SketchConfig(
        directions=cfg.get_int("sketch_dirs"),
        buckets=cfg.get_int("sketch_buckets"),
        coarse_buckets=cfg.get_int("sketch_coarse_buckets"),
        jitter=cfg.get_float("sketch_jitter"),
        seed=_stage_seed(cfg, 6),
    ))


def _queries_for(cfg: RunConfig, full_bundle, sub_bundle) -> gm.QueryBatch:
    needs_sketch = any(r.caption is None for r in sub_bundle.records)
    sketcher = _sketcher(cfg, full_bundle) if needs_sketch else None
    return gm.build_queries(sub_bundle, cfg.get_int("T_base"), sketcher)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_synth(cfg: RunConfig, root: Path) -> None:
    bundle = corpus.generate_synthetic(_synth_config(cfg))
    corpus.save_bundle(root / "dataset", bundle)
    cfg.write_resolved(root / "dataset")
    print(f"dataset: {bundle.num_images} images x {bundle.captions_per_image} "
          f"captions at D={bundle.D} -> {root / 'dataset'}")


def cmd_train_tokenizer(cfg: RunConfig, root: Path) -> None:
    bundle = _load_bundle(root)
    train, _, _ = _split(cfg, bundle)
    d_c = cfg.get_int("D_c") or None
    train_cfg = tok.TokenizerTrainConfig(
        N=cfg.get_int("N"), M=cfg.get_int("M"), D_c=d_c,
        lr=cfg.get_float("tok_lr"), batch_size=cfg.get_int("tok_batch_size"),
        epochs=cfg.get_int("tok_epochs"), seed=_stage_seed(cfg, 2),
        disable_align=cfg.get_bool("disable_align"),
        coef_recon=cfg.get_float("coef_recon"),
        coef_commit=cfg.get_float("coef_commit"),
        coef_align=cfg.get_float("coef_align"),
        dead_code_sigma=cfg.get_float("dead_code_sigma"),
    )
    log = tok.TokenizerTrainLog()
    model = tok.train_tokenizer(train, train_cfg, log=log)
    tok.save_tokenizer(root / "tokenizer", model)
    log.write(root / "tokenizer" / "train_log.tsv")
    cfg.write_resolved(root / "tokenizer")
    last = log.epochs[-1]
    print(f"tokenizer: N={train_cfg.N} M={train_cfg.M} "
          f"final L_total={last['L_total']:.4f} -> {root / 'tokenizer'}")


def cmd_tokenize(cfg: RunConfig, root: Path) -> None:
    bundle = _load_bundle(root)
    _require(root / "tokenizer" / "codebook.avgc", "tokenizer (run `train-tokenizer` first)")
    model = tok.load_tokenizer(root / "tokenizer")
    index = tok.assign_vokens(bundle, model)
    out = root / "index"
    index.save(out / "index.tsv")
    (out / "stats.txt").write_text(
        f"images={index.num_images}\nsequences={index.num_sequences}\n"
        f"collision_buckets={index.collision_buckets}\n"
        f"max_bucket={index.max_bucket}\n"
        f"collision_rate={index.collision_rate:.4f}\n", encoding="utf-8")
    cfg.write_resolved(out)
    print(f"index: {index.num_sequences} sequences for {index.num_images} images "
          f"(collision rate {index.collision_rate:.3f}) -> {out}")


def cmd_train_model(cfg: RunConfig, root: Path) -> None:
    bundle = _load_bundle(root)
    _require(root / "tokenizer" / "codebook.avgc", "tokenizer (run `train-tokenizer` first)")
    _require(root / "index" / "index.tsv", "voken index (run `tokenize` first)")
    tok_model = tok.load_tokenizer(root / "tokenizer")
    index = tok.VokenIndex.load(root / "index" / "index.tsv")
    trie = decoding.build_trie(index)
    train, val, _ = _split(cfg, bundle)

    vocab, emb = gm.build_vocab(
        cfg.get_int("T_base"), tok_model.codebook, cfg.get_int("d_model"),
        seed=_stage_seed(cfg, 3),
        random_voken_embed=cfg.get_bool("random_voken_embed"))
    model_cfg = gm.ModelConfig(
        d_model=cfg.get_int("d_model"), layers=cfg.get_int("E"),
        heads=cfg.get_int("heads"), ff=cfg.get_int("ff"),
        max_len=cfg.get_int("max_len"), seed=_stage_seed(cfg, 4),
        tie_output=cfg.get_bool("tie_output"))
    model = gm.Seq2SeqModel(vocab, model_cfg, embedding=emb)

    train_queries = _queries_for(cfg, bundle, train)
    targets = dis.build_targets(train_queries, index)

    val_eval = None
    n_val = cfg.get_int("val_queries")
    if n_val > 0:
        val_queries = _queries_for(cfg, bundle, val)
        keep = min(n_val, len(val_queries))
        val_subset = gm.QueryBatch(tokens=val_queries.tokens[:keep],
                                   image_ids=val_queries.image_ids[:keep],
                                   text_ids=val_queries.text_ids[:keep])
        beam = cfg.get_int("eval_beam_size")

        def val_eval(m, _vq=val_subset, _b=beam):
            report = ret.evaluate(m, trie, index, _vq, b=_b, ks=(1, 10))
            return report.recall[1], report.recall[10]

    joint_cfg = dis.JointTrainConfig(
        warmup_epochs=cfg.get_int("warmup_epochs"),
        joint_epochs=cfg.get_int("joint_epochs"),
        train_beam_size=cfg.get_int("train_beam_size"),
        lr=cfg.get_float("gen_lr"), batch_size=cfg.get_int("gen_batch_size"),
        disable_dis=cfg.get_bool("disable_dis"), seed=_stage_seed(cfg, 5))
    log = dis.JointTrainLog()
    dis.train_joint(model, train_queries, targets, trie, joint_cfg,
                    val_eval=val_eval, log=log)
    gm.save_model(root / "model", model, m_vokens=tok_model.M)
    log.write(root / "model" / "train_log.tsv")
    cfg.write_resolved(root / "model")
    last = log.epochs[-1]
    print(f"model: L_gen={last['L_gen']:.4f} L_dis={last['L_dis']:.4f} "
          f"R@10_val={last['R10']:.3f} -> {root / 'model'}")


def cmd_eval(cfg: RunConfig, root: Path) -> None:
    bundle = _load_bundle(root)
    _require(root / "index" / "index.tsv", "voken index (run `tokenize` first)")
    _require(root / "model" / "model.avgw", "model checkpoint (run `train-model` first)")
    index = tok.VokenIndex.load(root / "index" / "index.tsv")
    trie = decoding.build_trie(index)
    model, _ = gm.load_model(root / "model")
    _, _, test = _split(cfg, bundle)
    queries = _queries_for(cfg, bundle, test)
    report = ret.evaluate(model, trie, index, queries,
                          b=cfg.get_int("eval_beam_size"),
                          fingerprint=cfg.fingerprint(),
                          renormalize=cfg.get_bool("renormalize"))
    report.write(root / "eval")
    cfg.write_resolved(root / "eval")
    print(report.table(), end="")


def cmd_bench(cfg: RunConfig, root: Path) -> None:
    _require(root / "tokenizer" / "codebook.avgc", "tokenizer (run `train-tokenizer` first)")
    _require(root / "model" / "model.avgw", "model checkpoint (run `train-model` first)")
    tok_model = tok.load_tokenizer(root / "tokenizer")
    model, _ = gm.load_model(root / "model")
    report = ret.benchmark_latency(
        model, tok_model,
        sizes=cfg.get_int_list("bench_sizes"),
        trials=cfg.get_int("bench_trials"),
        queries_per_trial=cfg.get_int("bench_queries"),
        b=cfg.get_int("eval_beam_size"),
        seed=_stage_seed(cfg, 7),
        base_synth=_synth_config(cfg),
        sketch=gm.SketchConfig(
            directions=cfg.get_int("sketch_dirs"),
            buckets=cfg.get_int("sketch_buckets"),
            coarse_buckets=cfg.get_int("sketch_coarse_buckets"),
            jitter=cfg.get_float("sketch_jitter"),
            seed=_stage_seed(cfg, 6)),
    )
    report.write(root / "bench")
    cfg.write_resolved(root / "bench")
    print(report.table(), end="")


def cmd_inspect(cfg: RunConfig, root: Path, image_id: int) -> None:
    _require(root / "index" / "index.tsv", "voken index (run `tokenize` first)")
    index = tok.VokenIndex.load(root / "index" / "index.tsv")
    seq = index.image_to_seq.get(image_id)
    if seq is None:
        raise UsageError(f"image {image_id} is not in the index")
    print(f"{image_id}: {','.join(str(v) for v in seq)}")
    mates = [i for i in index.seq_to_images[seq] if i != image_id]
    if mates:
        print(f"shares vokens with: {','.join(str(i) for i in sorted(mates))}")
    else:
        print("shares vokens with: none")


COMMANDS = {
    "synth": cmd_synth,
    "train-tokenizer": cmd_train_tokenizer,
    "tokenize": cmd_tokenize,
    "train-model": cmd_train_model,
    "eval": cmd_eval,
    "bench": cmd_bench,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vokenret",
        description="generative cross-modal retrieval over voken identifiers")
    parser.add_argument("command", choices=list(COMMANDS) + ["inspect"])
    parser.add_argument("--config", type=Path, default=None,
                        help="key=value config file (defaults apply otherwise)")
    parser.add_argument("--out", type=Path, default=None,
                        help="output root (default $VOKENRET_OUT or ./runs)")
    parser.add_argument("--seed", type=int, default=None,
                        help="override the config seed")
    parser.add_argument("--image", type=int, default=None,
                        help="image id for `inspect`")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        overrides = {"seed": str(args.seed)} if args.seed is not None else None
        config = RunConfig.load(args.config, overrides=overrides)
        out_root = args.out or Path(os.environ.get("VOKENRET_OUT", "runs"))
        for suffix, run_cfg in expand_sweeps(config):
            run_cfg.validate()
            root = out_root / suffix if suffix else out_root
            if suffix:
                print(f"[sweep {suffix}]")
            if args.command == "inspect":
                if args.image is None:
                    raise UsageError("inspect needs --image <id>")
                cmd_inspect(run_cfg, root, args.image)
            else:
                COMMANDS[args.command](run_cfg, root)
        return 0
    except VokenRetError as exc:
        print(f"error kind={exc.kind} msg={str(exc)!r}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
