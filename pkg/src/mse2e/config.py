"""Line-based ``key = value`` run configuration."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from .data import SyntheticTaskSpec
from .decode import BeamConfig
from .layers import VGG_CHANNELS
from .lm import LmConfig
from .model import ConfigError, ModelConfig, StreamSpec


@dataclass(frozen=True)
class RunConfig:
    # synthetic corpus
    vocab_size: int = 8
    feat_dim: int = 20
    frames_per_label: int = 8
    jitter: int = 2
    emit_noise: float = 0.1
    data_seed: int = 17
    train_utts: int = 500
    test_utts: int = 50
    len_min: int = 2
    len_max: int = 6
    # model
    streams: str = "blstm:1:2, vggblstm:4:1"
    stream_inputs: str = "1,2"
    mode: str = "mem-res"
    enc_cells: int = 32
    enc_proj: int = 32
    att_dim: int = 32
    dec_cells: int = 32
    emb_dim: int = 16
    ctc_mode: str = "per-encoder"
    stream_attention: str = "han"
    vgg_channels: str = ",".join(map(str, VGG_CHANNELS))
    init_scale: float = 0.1
    seed: int = 0
    # training
    epochs: int = 20
    batch_size: int = 15
    ctc_weight_train: float = 0.2
    smoothing: float = 0.05
    adadelta_rho: float = 0.95
    adadelta_eps: float = 1e-8
    clip: float = 5.0
    # language model
    lm_emb_dim: int = 16
    lm_cells: int = 32
    lm_epochs: int = 60
    lm_lr: float = 0.5
    lm_batch_size: int = 16
    # decoding
    beam: int = 20
    ctc_weight_decode: float = 0.3
    lm_weight: float = 1.0
    maxlen_ratio: float = 1.0
    nbest: int = 1
    # paths (CLI arguments win)
    data_dir: str = ""
    out_dir: str = ""

    def __post_init__(self):
        _positive = ("vocab_size", "feat_dim", "frames_per_label", "train_utts", "test_utts",
                     "len_min", "enc_cells", "enc_proj", "att_dim", "dec_cells", "emb_dim",
                     "batch_size", "lm_emb_dim", "lm_cells", "beam", "nbest")
        for name in _positive:
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        for name in ("epochs", "lm_epochs", "jitter"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0, got {getattr(self, name)}")
        if self.len_max < self.len_min:
            raise ConfigError("len_max must be >= len_min")
        for name in ("ctc_weight_train", "ctc_weight_decode", "smoothing"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {getattr(self, name)}")
        if not 0.0 < self.adadelta_rho < 1.0:
            raise ConfigError("adadelta_rho must lie in (0, 1)")
        for name in ("adadelta_eps", "lm_lr", "init_scale", "maxlen_ratio"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if self.emit_noise < 0 or self.lm_weight < 0 or self.clip < 0:
            raise ConfigError("emit_noise, lm_weight and clip must be >= 0")
        # build the derived objects once so every domain error surfaces here
        self.model_config()
        self.task_spec()
        self.input_map()

    # ----------------------------------------------------------- derived

    def stream_specs(self) -> tuple[StreamSpec, ...]:
        specs = []
        for item in self.streams.split(","):
            parts = item.strip().split(":")
            if len(parts) != 3:
                raise ConfigError(f"streams: expected kind:subsampling:layers, got {item.strip()!r}")
            try:
                specs.append(StreamSpec(parts[0], int(parts[1]), int(parts[2])))
            except ValueError as exc:
                raise ConfigError(f"streams: {exc}") from exc
        return tuple(specs)

    def input_map(self) -> tuple[int, ...]:
        """0-based feature-file index read by each encoder."""
        try:
            idx = tuple(int(v) - 1 for v in self.stream_inputs.split(","))
        except ValueError as exc:
            raise ConfigError(f"stream_inputs: {exc}") from exc
        if len(idx) != len(self.stream_specs()):
            raise ConfigError("stream_inputs needs one entry per encoder")
        if min(idx) < 0:
            raise ConfigError("stream_inputs entries are 1-based")
        return idx

    def model_config(self) -> ModelConfig:
        try:
            channels = tuple(int(v) for v in self.vgg_channels.split(","))
        except ValueError as exc:
            raise ConfigError(f"vgg_channels: {exc}") from exc
        return ModelConfig(n_symbols=self.vocab_size, feat_dim=self.feat_dim,
                           streams=self.stream_specs(), mode=self.mode, enc_cells=self.enc_cells,
                           enc_proj=self.enc_proj, att_dim=self.att_dim, dec_cells=self.dec_cells,
                           emb_dim=self.emb_dim, ctc_mode=self.ctc_mode,
                           stream_attention=self.stream_attention, vgg_channels=channels,
                           init_scale=self.init_scale, seed=self.seed)

    def task_spec(self) -> SyntheticTaskSpec:
        return SyntheticTaskSpec(vocab_size=self.vocab_size, feat_dim=self.feat_dim,
                                 frames_per_label=self.frames_per_label, jitter=self.jitter,
                                 emit_noise=self.emit_noise, seed=self.data_seed)

    def lm_config(self) -> LmConfig:
        return LmConfig(n_symbols=self.vocab_size, emb_dim=self.lm_emb_dim, cells=self.lm_cells,
                        seed=self.seed)

    def beam_config(self, **overrides) -> BeamConfig:
        kw = dict(width=self.beam, ctc_weight=self.ctc_weight_decode, lm_weight=self.lm_weight,
                  maxlen_ratio=self.maxlen_ratio, nbest=self.nbest)
        kw.update({k: v for k, v in overrides.items() if v is not None})
        return BeamConfig(**kw)

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)


_FIELDS = {f.name: f for f in fields(RunConfig)}


def _coerce(name: str, raw: str):
    kind = _FIELDS[name].type
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {raw!r} as {kind}") from None
    return raw


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    values = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, raw = line.partition("=")
        key = key.strip()
        if not sep:
            raise ConfigError(f"{source}:{n}: expected 'key = value'")
        if key not in _FIELDS:
            raise ConfigError(f"{source}:{n}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"{source}:{n}: duplicate key {key!r}")
        values[key] = _coerce(key, raw.strip())
    return RunConfig(**values)


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    return parse_config(Path(path).read_text(encoding="utf-8"), str(path))


def format_config(cfg: RunConfig) -> str:
    """Every key with its resolved value, in declaration order."""
    return "".join(f"{f.name} = {getattr(cfg, f.name)}\n" for f in fields(RunConfig))
