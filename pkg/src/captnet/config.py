"""Run configuration: ``[section]`` headers with ``key = value`` lines.

Every key has a default, so an empty file is a valid configuration. Unknown
sections or keys, duplicate keys and ill-typed values are rejected with the
offending line number. ``#`` and ``;`` start comments.

Defaults::

    [model]
    width = 8
    enc_blocks = 1,1,1,2
    dec_blocks = 1,1,1,1
    heads = 1,2,4,8
    prompts = decoder:3,decoder:4     # or "none"
    ffm = true

    [train]
    lr = 0.0005
    lr_final = 1e-07
    iters = 2000
    patch = 32                        # multiple of 8
    batch = 4
    seed = 0
    augment = true

    [data]
    n_per_task = 2
    size = 32                         # multiple of 8, >= 16
    seed = 0
    noise_sigma = 0.09803921568627451 # 25/255

    [io]
    out = out
    checkpoint =
    manifest =
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

from .degrade import DEFAULT_NOISE_SIGMA
from .model import PARTS, SPT_LEVELS, CaptNetConfig
from .train import TrainConfig


class ConfigError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


@dataclass
class ModelSection:
    width: int = 8
    enc_blocks: tuple[int, ...] = (1, 1, 1, 2)
    dec_blocks: tuple[int, ...] = (1, 1, 1, 1)
    heads: tuple[int, ...] = (1, 2, 4, 8)
    prompts: tuple[tuple[str, int], ...] = (("decoder", 3), ("decoder", 4))
    ffm: bool = True


@dataclass
class TrainSection:
    lr: float = 5e-4
    lr_final: float = 1e-7
    iters: int = 2000
    patch: int = 32
    batch: int = 4
    seed: int = 0
    augment: bool = True


@dataclass
class DataSection:
    n_per_task: int = 2
    size: int = 32
    seed: int = 0
    noise_sigma: float = DEFAULT_NOISE_SIGMA


@dataclass
class IoSection:
    out: str = "out"
    checkpoint: str = ""
    manifest: str = ""


@dataclass
class RunConfig:
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    data: DataSection = field(default_factory=DataSection)
    io: IoSection = field(default_factory=IoSection)

    def model_config(self) -> CaptNetConfig:
        m = self.model
        return CaptNetConfig(m.width, m.enc_blocks, m.dec_blocks, m.heads, frozenset(m.prompts), m.ffm)

    def train_config(self) -> TrainConfig:
        t = self.train
        return TrainConfig(t.lr, t.lr_final, t.iters, t.patch, t.batch, t.seed, t.augment)


# ----------------------------------------------------------------------------
# value codecs
# ----------------------------------------------------------------------------

def _parse_bool(text: str) -> bool:
    low = text.lower()
    if low in ("true", "yes", "1", "on"):
        return True
    if low in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _parse_ints(text: str) -> tuple[int, ...]:
    return tuple(int(p) for p in text.split(",") if p.strip())


def _parse_prompts(text: str) -> tuple[tuple[str, int], ...]:
    if text.strip().lower() in ("", "none"):
        return ()
    out = []
    for item in text.split(","):
        part, sep, lvl = item.strip().partition(":")
        if not sep:
            raise ValueError(f"prompt position must look like decoder:3, got {item.strip()!r}")
        pos = (part.strip(), int(lvl))
        if pos[0] not in PARTS or pos[1] not in SPT_LEVELS:
            raise ValueError(f"invalid prompt position {item.strip()!r}: prompts live in encoder/decoder levels 3-4")
        out.append(pos)
    return tuple(sorted(set(out)))


def _emit_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, tuple):
        if v and isinstance(v[0], tuple):
            return ",".join(f"{p}:{lvl}" for p, lvl in v)
        return ",".join(str(x) for x in v) if v else "none"
    return str(v)


_PARSERS = {
    ("model", "enc_blocks"): _parse_ints,
    ("model", "dec_blocks"): _parse_ints,
    ("model", "heads"): _parse_ints,
    ("model", "prompts"): _parse_prompts,
}
_SECTIONS = {f.name: f.default_factory for f in dataclasses.fields(RunConfig)}


def _convert(section: str, key: str, default, text: str):
    parser = _PARSERS.get((section, key))
    if parser is not None:
        return parser(text)
    if isinstance(default, bool):
        return _parse_bool(text)
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    return text


# ----------------------------------------------------------------------------
# parse / emit
# ----------------------------------------------------------------------------

def parse_config(text: str) -> RunConfig:
    cfg = RunConfig()
    lines: dict[tuple[str, str], int] = {}
    section: str | None = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].split(";", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                raise ConfigError(f"malformed section header {raw.strip()!r}", lineno)
            section = line[1:-1].strip()
            if section not in _SECTIONS:
                raise ConfigError(f"unknown section [{section}]", lineno)
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise ConfigError(f"expected 'key = value', got {raw.strip()!r}", lineno)
        if section is None:
            raise ConfigError(f"key {key!r} appears before any section header", lineno)
        sec = getattr(cfg, section)
        names = {f.name: f for f in dataclasses.fields(sec)}
        if key not in names:
            raise ConfigError(f"unknown key {key!r} in [{section}]", lineno)
        if (section, key) in lines:
            raise ConfigError(f"duplicate key {key!r} in [{section}]", lineno)
        lines[(section, key)] = lineno
        default = getattr(type(sec)(), key)
        try:
            setattr(sec, key, _convert(section, key, default, value))
        except ValueError as exc:
            raise ConfigError(f"[{section}] {key}: {exc}", lineno) from None
    _validate(cfg, lines)
    return cfg


def _validate(cfg: RunConfig, lines: dict[tuple[str, str], int]) -> None:
    def fail(section: str, key: str, msg: str):
        raise ConfigError(f"[{section}] {key}: {msg}", lines.get((section, key)))

    t, d = cfg.train, cfg.data
    if t.patch <= 0 or t.patch % 8:
        fail("train", "patch", f"must be a positive multiple of 8, got {t.patch}")
    if t.batch < 1:
        fail("train", "batch", "must be >= 1")
    if t.iters < 0:
        fail("train", "iters", "must be >= 0")
    if not t.lr_final < t.lr:
        fail("train", "lr_final", "must be below lr")
    if d.size < 16 or d.size % 8:
        fail("data", "size", f"must be a multiple of 8 and >= 16, got {d.size}")
    if d.n_per_task < 1:
        fail("data", "n_per_task", "must be >= 1")
    if not 0.0 <= d.noise_sigma <= 1.0:
        fail("data", "noise_sigma", "must lie in [0, 1]")
    if t.patch > d.size:
        fail("train", "patch", f"{t.patch} exceeds image size {d.size}")
    try:
        cfg.model_config()
    except ValueError as exc:
        model_lines = [n for (sec, _), n in lines.items() if sec == "model"]
        raise ConfigError(f"[model] {exc}", max(model_lines, default=None)) from None


def emit_config(cfg: RunConfig) -> str:
    out = []
    for f in dataclasses.fields(cfg):
        sec = getattr(cfg, f.name)
        out.append(f"[{f.name}]")
        for sf in dataclasses.fields(sec):
            out.append(f"{sf.name} = {_emit_value(getattr(sec, sf.name))}")
        out.append("")
    return "\n".join(out)


def load_config(path) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())
