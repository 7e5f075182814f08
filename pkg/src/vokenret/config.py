"""Flat key=value run configuration.

One file drives the whole pipeline. Unknown keys are rejected outright, and
every command writes the fully resolved configuration next to its outputs
so a run is auditable. A scalar key may hold a comma list (``M=2,4,6``),
which fans the command out into one run per combination; genuinely
list-valued keys (``bench_sizes``) keep their commas.
"""

from __future__ import annotations

import hashlib
import itertools
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError

DEFAULTS: dict[str, str] = {
    "seed": "0",
    # corpus synthesis and splits
    "num_images": "512",
    "num_clusters": "16",
    "D": "64",
    "captions_per_image": "5",
    "image_noise_sigma": "0.5",
    "text_noise_sigma": "0.5",
    "modality_gap_strength": "0.3",
    "train_frac": "0.8",
    "val_frac": "0.1",
    # tokenizer
    "N": "256",
    "M": "4",
    "D_c": "0",               # 0: use the corpus dimension
    "tok_lr": "0.002",
    "tok_batch_size": "2048",
    "tok_epochs": "150",
    "disable_align": "false",
    "coef_recon": "1.0",
    "coef_commit": "1.0",
    "coef_align": "1.0",
    "dead_code_sigma": "0.01",
    # synthetic query sketches
    "sketch_dirs": "16",
    "sketch_buckets": "16",
    "sketch_coarse_buckets": "4",
    "sketch_jitter": "0.5",
    # sequence model
    "T_base": "512",
    "d_model": "128",
    "E": "2",
    "heads": "4",
    "ff": "256",
    "max_len": "64",
    "tie_output": "true",
    "random_voken_embed": "false",
    # generative + discriminative training
    "gen_lr": "0.001",
    "gen_batch_size": "128",
    "warmup_epochs": "9",
    "joint_epochs": "21",
    "train_beam_size": "10",
    "disable_dis": "false",
    "val_queries": "128",
    # decoding and evaluation
    "eval_beam_size": "10",
    "renormalize": "true",
    # latency benchmark
    "bench_sizes": "1000,4000,16000,64000",
    "bench_trials": "3",
    "bench_queries": "32",
}

# keys whose value is a list by nature; commas there never mean a sweep
LIST_KEYS = {"bench_sizes"}

_BOOL_TRUE = {"true", "1", "yes", "on"}
_BOOL_FALSE = {"false", "0", "no", "off"}


@dataclass
class RunConfig:
    values: dict[str, str] = field(default_factory=lambda: dict(DEFAULTS))

    # -- typed accessors -----------------------------------------------------

    def _raw(self, key: str) -> str:
        if key not in self.values:
            raise ConfigError(f"unknown config key: {key}")
        return self.values[key]

    def get_int(self, key: str) -> int:
        try:
            return int(self._raw(key))
        except ValueError:
            raise ConfigError(f"key {key}: expected integer, got {self._raw(key)!r}")

    def get_float(self, key: str) -> float:
        try:
            return float(self._raw(key))
        except ValueError:
            raise ConfigError(f"key {key}: expected number, got {self._raw(key)!r}")

    def get_bool(self, key: str) -> bool:
        raw = self._raw(key).lower()
        if raw in _BOOL_TRUE:
            return True
        if raw in _BOOL_FALSE:
            return False
        raise ConfigError(f"key {key}: expected boolean, got {self._raw(key)!r}")

    def get_int_list(self, key: str) -> list[int]:
        try:
            return [int(tok) for tok in self._raw(key).split(",") if tok.strip()]
        except ValueError:
            raise ConfigError(f"key {key}: expected integer list, got {self._raw(key)!r}")

    # -- lifecycle -----------------------------------------------------------

    @classmethod
    def load(cls, path=None, overrides: dict[str, str] | None = None) -> "RunConfig":
        values = dict(DEFAULTS)
        unknown: list[str] = []
        if path is not None:
            for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ConfigError(f"{path}:{lineno}: expected key=value")
                key, value = (part.strip() for part in line.split("=", 1))
                if key not in DEFAULTS:
                    unknown.append(key)
                    continue
                values[key] = value
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
        if overrides:
            bad = sorted(set(overrides) - set(DEFAULTS))
            if bad:
                raise ConfigError(f"unknown config keys: {', '.join(bad)}")
            values.update(overrides)
        return cls(values=values)

    def validate(self) -> None:
        """Type-check every key; report all offenders at once."""
        errors: list[str] = []
        int_keys = [
            "seed", "num_images", "num_clusters", "D", "captions_per_image",
            "N", "M", "D_c", "tok_batch_size", "tok_epochs", "sketch_dirs",
            "sketch_buckets", "sketch_coarse_buckets", "T_base", "d_model", "E", "heads", "ff",
            "max_len", "gen_batch_size", "warmup_epochs", "joint_epochs",
            "train_beam_size", "val_queries", "eval_beam_size", "bench_trials",
            "bench_queries",
        ]
        float_keys = [
            "image_noise_sigma", "text_noise_sigma", "modality_gap_strength",
            "train_frac", "val_frac", "tok_lr", "coef_recon", "coef_commit",
            "coef_align", "dead_code_sigma", "sketch_jitter", "gen_lr",
        ]
        bool_keys = ["disable_align", "random_voken_embed", "disable_dis",
                     "renormalize", "tie_output"]
        for key in int_keys:
            try:
                self.get_int(key)
            except ConfigError as exc:
                errors.append(str(exc))
        for key in float_keys:
            try:
                self.get_float(key)
            except ConfigError as exc:
                errors.append(str(exc))
        for key in bool_keys:
            try:
                self.get_bool(key)
            except ConfigError as exc:
                errors.append(str(exc))
        try:
            self.get_int_list("bench_sizes")
        except ConfigError as exc:
            errors.append(str(exc))
        if errors:
            raise ConfigError("; ".join(errors))

    def resolved_text(self) -> str:
        return "".join(f"{k}={self.values[k]}\n" for k in sorted(self.values))

    def fingerprint(self) -> str:
        return hashlib.sha256(self.resolved_text().encode()).hexdigest()[:12]

    def write_resolved(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        (directory / "config.resolved").write_text(self.resolved_text(),
                                                   encoding="utf-8")


def expand_sweeps(config: RunConfig) -> list[tuple[str, RunConfig]]:
    """One run per combination of comma-listed scalar keys.

    Returns (suffix, config) pairs; the suffix is empty for a plain run and
    ``key=value[,key=value...]`` otherwise, usable as a directory name.
    """
    swept: dict[str, list[str]] = {}
    for key, value in config.values.items():
        if key in LIST_KEYS:
            continue
        if "," in value:
            parts = [p.strip() for p in value.split(",") if p.strip()]
            if len(parts) < 2:
                raise ConfigError(f"key {key}: malformed sweep list {value!r}")
            swept[key] = parts
    if not swept:
        return [("", config)]
    runs = []
    keys = sorted(swept)
    for combo in itertools.product(*(swept[k] for k in keys)):
        values = dict(config.values)
        values.update(dict(zip(keys, combo)))
        suffix = ",".join(f"{k}={v}" for k, v in zip(keys, combo))
        runs.append((suffix, RunConfig(values=values)))
    return runs
