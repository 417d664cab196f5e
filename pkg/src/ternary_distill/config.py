"""Flat key=value run configuration shared by every CLI command."""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path

from .losses import DistillConfig
from .model import ModelConfig
from .pipeline import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # model
    vocab_size: int = 260
    d_model: int = 128
    n_layers: int = 4
    n_heads: int = 4
    ffn_hidden: int = 256
    max_seq_len: int = 128
    rope_base: float = 10000.0
    act_quant: str = "absmax"
    # training
    seed: int = 7
    batch_size: int = 32
    base_lr: float = 3e-4
    teacher_lr: float = 3e-4
    stage2_lr: float = 3e-4
    stage3_lr: float = 1e-4
    warmup_steps: int = 20
    base_steps: int = 2000
    teacher_steps: int = 300
    stage2_steps: int = 200
    stage3_steps: int = 60
    log_every: int = 50
    beta1: float = 0.9
    beta2: float = 0.95
    adam_eps: float = 1e-8
    weight_decay: float = 0.0
    grad_clip: float = 1.0
    # distillation
    tau: float = 5.0
    lambda_ld: float = 10.0
    gamma_loss: float = 10.0
    distill_layers: str = "-1"
    alphas: str = ""
    split_heads: int = 4
    relation_temperature: float = 1.0
    subln: bool = True
    # data
    task_path: str = ""
    corpus_path: str = ""
    heldout_frac: float = 0.2
    toy_train: int = 256
    toy_heldout: int = 480
    toy_length: int = 8
    toy_corpus_docs: int = 4000
    # io
    out_dir: str = "run"
    threads: int = 1
    bench_repeats: int = 20

    def model_config(self, **overrides) -> ModelConfig:
        kw = {f.name: getattr(self, f.name) for f in fields(ModelConfig) if hasattr(self, f.name)}
        kw.update(overrides)
        try:
            return ModelConfig(**kw)
        except ValueError as e:
            raise ConfigError(str(e)) from None

    def train_config(self) -> TrainConfig:
        kw = {f.name: getattr(self, f.name) for f in fields(TrainConfig)}
        try:
            return TrainConfig(**kw)
        except ValueError as e:
            raise ConfigError(str(e)) from None

    def distill_config(self) -> DistillConfig:
        try:
            layers = tuple(int(x) for x in self.distill_layers.split(",") if x.strip())
            alphas = tuple(float(x) for x in self.alphas.split(",") if x.strip()) or None
            return DistillConfig(
                tau=self.tau,
                lambda_ld=self.lambda_ld,
                gamma_loss=self.gamma_loss,
                distill_layers=layers,
                alphas=alphas,
                split_heads=self.split_heads,
                relation_temperature=self.relation_temperature,
            )
        except ValueError as e:
            raise ConfigError(str(e)) from None

    def to_text(self) -> str:
        return "".join(f"{f.name}={getattr(self, f.name)}\n" for f in fields(self))

    def set(self, key: str, raw: str, where: str = "") -> None:
        known = {f.name: f for f in fields(self)}
        if key not in known:
            raise ConfigError(f"{where}unknown config key {key!r}")
        default = getattr(RunConfig, key)
        try:
            if isinstance(default, bool):
                low = raw.strip().lower()
                if low not in ("1", "0", "true", "false", "yes", "no"):
                    raise ValueError(raw)
                value = low in ("1", "true", "yes")
            elif isinstance(default, int):
                value = int(raw)
            elif isinstance(default, float):
                value = float(raw)
            else:
                value = raw.strip()
        except ValueError:
            raise ConfigError(f"{where}bad value for {key}: {raw!r}") from None
        setattr(self, key, value)


def parse_config_text(text: str, cfg: RunConfig | None = None, source: str = "<config>") -> RunConfig:
    cfg = cfg if cfg is not None else RunConfig()
    for n, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected key=value")
        k, v = line.split("=", 1)
        cfg.set(k.strip(), v.strip(), f"{source}:{n}: ")
    return cfg


def load_config(path: str | None, overrides: list[str]) -> RunConfig:
    """Defaults, then the file (if any), then ``--key=value`` overrides."""
    cfg = RunConfig()
    if path:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as e:
            raise FileNotFoundError(f"cannot read config {path}: {e.strerror}") from None
        parse_config_text(text, cfg, path)
    for item in overrides:
        if not item.startswith("--") or "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form --key=value")
        k, v = item[2:].split("=", 1)
        cfg.set(k.replace("-", "_"), v, "override: ")
    return cfg


def defaults_help() -> str:
    return "\n".join(f"  {f.name}={getattr(RunConfig, f.name)}" for f in fields(RunConfig))
