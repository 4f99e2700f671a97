"""Layered run configuration: defaults < JSON file < ``--set section.key=value``.

Every run directory receives ``config.snapshot`` (JSON) that re-parses to
the same :class:`RunConfig`.
"""

from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .data.corruption import CorruptionConfig
from .data.vocab import Vocab, load_vocab
from .model import ModelConfig, preset
from .optim import OPTIMIZERS, AdafactorHyper, AdamHyper
from .schedule import ScheduleSpec

BUNDLED_CORPUS = Path(__file__).parent / "resources" / "corpus.txt"
BUNDLED_REVERSAL = Path(__file__).parent / "resources" / "reversal.tsv"


class ConfigError(ValueError):
    pass


@dataclass
class ModelSection:
    """A preset plus optional per-field overrides (``None`` keeps the preset value)."""

    preset: str = "nano"
    d_model: typing.Optional[int] = None
    d_ff: typing.Optional[int] = None
    num_layers_enc: typing.Optional[int] = None
    num_layers_dec: typing.Optional[int] = None
    num_heads: typing.Optional[int] = None
    d_kv: typing.Optional[int] = None
    vocab_size: typing.Optional[int] = None
    num_buckets: typing.Optional[int] = None
    max_distance: typing.Optional[int] = None
    tie_embeddings: typing.Optional[bool] = None
    dropout: typing.Optional[float] = None
    zero_init_head: bool = False

    def resolve(self) -> ModelConfig:
        base = preset(self.preset)
        overrides = {
            f.name: getattr(self, f.name)
            for f in dataclasses.fields(ModelConfig)
            if getattr(self, f.name, None) is not None
        }
        return dataclasses.replace(base, **overrides)


@dataclass
class DataSection:
    corpus: str = ""  # empty: the bundled sample corpus
    heldout_corpus: str = ""  # empty: hold out every `heldout_every`-th document of `corpus`
    heldout_every: int = 10
    vocab: str = "bytes"
    vocab_file: str = ""
    noise_density: float = 0.15
    mean_span_length: float = 3.0
    input_length: int = 512
    target_length: int = 114
    prefetch: int = 64  # queue capacity in batches; 0 runs the pipeline inline
    finetune_train: str = ""  # empty: the bundled string-reversal toy task
    finetune_eval: str = ""
    finetune_input_length: int = 32
    finetune_target_length: int = 32

    def corpus_path(self) -> Path:
        return Path(self.corpus) if self.corpus else BUNDLED_CORPUS

    def load_vocab(self, vocab_size: int) -> Vocab:
        vocab = load_vocab(self.vocab, vocab_size, self.vocab_file or None)
        if vocab.size != vocab_size:
            raise ConfigError(f"vocabulary has {vocab.size} ids but model.vocab_size is {vocab_size}")
        return vocab

    def corruption(self, vocab: Vocab) -> CorruptionConfig:
        return CorruptionConfig(
            noise_density=self.noise_density,
            mean_span_length=self.mean_span_length,
            input_length=self.input_length,
            target_length=self.target_length,
            eos_id=vocab.eos_id,
            pad_id=vocab.pad_id,
            sentinel_base=vocab.sentinel_base,
            num_sentinels=vocab.num_sentinels,
        )


@dataclass
class OptimSection:
    kind: str = "adamw_rms"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    rms_eps: float = 1e-3
    eps1: float = 1e-30
    eps2: float = 1e-3
    clip_threshold: float = 1.0
    decay_rate: float = 0.8
    clip_norm: typing.Optional[float] = 1.0  # global-norm clipping; null disables

    def adam(self) -> AdamHyper:
        return AdamHyper(self.beta1, self.beta2, self.eps, self.weight_decay, self.rms_eps)

    def adafactor(self) -> AdafactorHyper:
        return AdafactorHyper(self.eps1, self.eps2, self.clip_threshold, self.decay_rate)


@dataclass
class ScheduleSection:
    kind: str = "cosine"
    peak_lr: float = 2e-2
    final_lr: typing.Optional[float] = None
    warmup_steps: int = 10_000

    def spec(self, total_steps: int) -> ScheduleSpec:
        return ScheduleSpec(self.kind, self.peak_lr, self.final_lr, min(self.warmup_steps, total_steps), total_steps)


@dataclass
class TrainSection:
    total_steps: int = 65_536
    micro_batch_size: int = 64
    grad_accum_steps: int = 2
    eval_interval: int = 1000
    eval_batches: int = 4
    checkpoint_interval: int = 10_000
    seed: int = 0
    precision: str = "f64"

    @property
    def effective_batch(self) -> int:
        return self.micro_batch_size * self.grad_accum_steps


@dataclass
class RunConfig:
    model: ModelSection = field(default_factory=ModelSection)
    data: DataSection = field(default_factory=DataSection)
    optim: OptimSection = field(default_factory=OptimSection)
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    train: TrainSection = field(default_factory=TrainSection)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> RunConfig:
        cfg = cls()
        if not isinstance(raw, dict):
            raise ConfigError("configuration root must be an object")
        for section, values in raw.items():
            if section not in SECTIONS:
                raise ConfigError(f"unknown section {section!r}; valid sections: {sorted(SECTIONS)}")
            if not isinstance(values, dict):
                raise ConfigError(f"section {section!r} must be an object")
            for key, value in values.items():
                set_field(cfg, f"{section}.{key}", value)
        return cfg

    def validate(self) -> None:
        """Build every derived object once so that errors surface before compute."""
        try:
            mcfg = self.model.resolve()
            vocab = self.data.load_vocab(mcfg.vocab_size)
            self.data.corruption(vocab)
            if self.optim.kind not in OPTIMIZERS:
                raise ValueError(f"unknown optimizer {self.optim.kind!r}; choose one of {OPTIMIZERS}")
            self.optim.adam()
            self.optim.adafactor()
            self.schedule.spec(self.train.total_steps)
        except (ValueError, KeyError, OSError) as exc:
            raise ConfigError(str(exc)) from exc
        t = self.train
        if t.precision not in ("f64", "f32"):
            raise ConfigError(f"train.precision must be 'f64' or 'f32', got {t.precision!r}")
        for name in ("micro_batch_size", "grad_accum_steps", "eval_interval", "eval_batches", "checkpoint_interval"):
            if getattr(t, name) < 1:
                raise ConfigError(f"train.{name} must be >= 1")
        if t.total_steps < 0:
            raise ConfigError("train.total_steps must be >= 0")
        if self.optim.clip_norm is not None and self.optim.clip_norm <= 0:
            raise ConfigError("optim.clip_norm must be > 0 or null")


SECTIONS = {"model": ModelSection, "data": DataSection, "optim": OptimSection, "schedule": ScheduleSection, "train": TrainSection}


def _field_types(section_cls) -> dict[str, typing.Any]:
    return typing.get_type_hints(section_cls)


def _type_name(tp) -> str:
    args = typing.get_args(tp)
    if args:
        inner = [a for a in args if a is not type(None)]
        return f"{inner[0].__name__} or null"
    return tp.__name__


def coerce(value, tp, where: str):
    """Check/convert ``value`` to annotation ``tp``; strings from the command line are parsed."""
    args = typing.get_args(tp)
    if args:
        inner = next(a for a in args if a is not type(None))
        if value is None or (isinstance(value, str) and value.lower() in ("null", "none")):
            return None
        return coerce(value, inner, where)
    if isinstance(value, str) and tp is not str:
        text = value.strip()
        try:
            if tp is bool:
                if text.lower() in ("true", "1", "yes"):
                    return True
                if text.lower() in ("false", "0", "no"):
                    return False
                raise ValueError(text)
            if tp is int:
                return int(text)
            if tp is float:
                return float(text)
        except ValueError:
            raise ConfigError(f"{where}: expected {_type_name(tp)}, got {value!r}") from None
    if tp is bool and isinstance(value, bool):
        return value
    if tp is int and isinstance(value, int) and not isinstance(value, bool):
        return value
    if tp is float and isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    if tp is str and isinstance(value, str):
        return value
    raise ConfigError(f"{where}: expected {_type_name(tp)}, got {value!r}")


def set_field(cfg: RunConfig, dotted: str, value) -> None:
    section, _, key = dotted.partition(".")
    if section not in SECTIONS or not key:
        raise ConfigError(f"unknown key {dotted!r}; keys look like section.field with sections {sorted(SECTIONS)}")
    types = _field_types(SECTIONS[section])
    if key not in types:
        raise ConfigError(f"unknown key {dotted!r}; valid keys in [{section}]: {', '.join(sorted(types))}")
    setattr(getattr(cfg, section), key, coerce(value, types[key], dotted))


def load_config(path=None, overrides=()) -> RunConfig:
    """File values first, then ``key=value`` overrides in order (last wins)."""
    if path:
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        cfg = RunConfig.from_dict(raw)
    else:
        cfg = RunConfig()
    for item in overrides:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        set_field(cfg, key.strip(), value)
    return cfg


def write_snapshot(cfg: RunConfig, path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def read_snapshot(path) -> RunConfig:
    return load_config(path)
