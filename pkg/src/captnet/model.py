"""The four-level CAPTNet encoder-decoder, its PSNR loss and feature probes."""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

import numpy as np

from . import blocks as B
from . import tensor as T
from .tensor import Tensor

PARTS = ("encoder", "decoder")
SPT_LEVELS = (3, 4)
DEFAULT_PROMPTS = frozenset({("decoder", 3), ("decoder", 4)})
LOSS_EPS = 1e-8


@dataclass(frozen=True)
class CaptNetConfig:
    """Architecture hyperparameters. Levels 1-2 use NAFBlocks, levels 3-4 SPT blocks."""

    width: int = 8
    enc_blocks: tuple[int, ...] = (1, 1, 1, 2)
    dec_blocks: tuple[int, ...] = (1, 1, 1, 1)
    heads: tuple[int, ...] = (1, 2, 4, 8)
    prompt_positions: frozenset = DEFAULT_PROMPTS
    ffm: bool = True

    def __post_init__(self):
        object.__setattr__(self, "enc_blocks", tuple(self.enc_blocks))
        object.__setattr__(self, "dec_blocks", tuple(self.dec_blocks))
        object.__setattr__(self, "heads", tuple(self.heads))
        object.__setattr__(self, "prompt_positions", frozenset(tuple(p) for p in self.prompt_positions))
        self.validate()

    @classmethod
    def full_scale(cls, width: int = 32) -> "CaptNetConfig":
        """Full-width layout with 28 blocks at the deepest encoder level."""
        return cls(width=width, enc_blocks=(1, 1, 1, 28))

    @property
    def widths(self) -> tuple[int, int, int, int]:
        c = self.width
        return (c, 2 * c, 4 * c, 8 * c)

    def validate(self) -> None:
        if self.width < 1:
            raise ValueError(f"width must be positive, got {self.width}")
        for name in ("enc_blocks", "dec_blocks", "heads"):
            vals = getattr(self, name)
            if len(vals) != 4 or any(v < 0 for v in vals):
                raise ValueError(f"{name} needs 4 non-negative entries, got {vals}")
        for lvl in SPT_LEVELS:
            h = self.heads[lvl - 1]
            if h < 1 or self.widths[lvl - 1] % h:
                raise ValueError(f"heads={h} must divide level-{lvl} width {self.widths[lvl - 1]}")
        for pos in self.prompt_positions:
            if len(pos) != 2 or pos[0] not in PARTS or pos[1] not in SPT_LEVELS:
                raise ValueError(
                    f"invalid prompt position {pos!r}: prompts live in SPT levels 3-4 of encoder or decoder"
                )


@dataclass
class CaptNet:
    config: CaptNetConfig
    intro: B.Conv
    enc: list[list]
    down: list[B.Conv]
    ffm: B.FfmParams | None
    up: list[B.Conv]
    dec: list[list]
    out: B.Conv

    def named_parameters(self) -> dict[str, Tensor]:
        """Every learnable tensor keyed by a stable dotted name, in sorted order."""
        pairs = []
        for f in dataclasses.fields(self):
            if f.name == "config":
                continue
            pairs.extend(B.named_parameters(getattr(self, f.name), f.name))
        names = [n for n, _ in pairs]
        if len(set(names)) != len(names):
            raise RuntimeError("duplicate parameter names in registry")
        return dict(sorted(pairs))

    def parameter_count(self) -> int:
        return sum(t.data.size for t in self.named_parameters().values())

    def prompt_sets(self) -> list[B.PromptSet]:
        found = []
        for stage in (self.enc, self.dec):
            for level in stage:
                for blk in level:
                    if isinstance(blk, B.SptParams) and blk.mrap.prompts is not None:
                        found.append(blk.mrap.prompts)
        return found

    def set_prompts_enabled(self, enabled: bool) -> None:
        for ps in self.prompt_sets():
            ps.enabled = enabled

    def astype(self, dtype) -> "CaptNet":
        return B.astype(self, dtype)

    def zero_grad(self) -> None:
        for t in self.named_parameters().values():
            t.grad = None


def build(config: CaptNetConfig, seed: int = 0, dtype=np.float32) -> CaptNet:
    config.validate()
    init = B.Init(np.random.default_rng(seed), dtype)
    widths = config.widths

    def level_blocks(part: str, counts) -> list[list]:
        out = []
        for lvl in range(1, 5):
            c = widths[lvl - 1]
            n = counts[lvl - 1]
            if lvl < 3:
                out.append([init.naf(c) for _ in range(n)])
            else:
                prompted = (part, lvl) in config.prompt_positions
                out.append([init.spt(c, config.heads[lvl - 1], prompted) for _ in range(n)])
        return out

    intro = init.conv(3, widths[0], 3)
    enc = level_blocks("encoder", config.enc_blocks)
    down = [init.conv(4 * widths[i], widths[i + 1]) for i in range(3)]
    ffm = init.ffm(widths[2], widths[3]) if config.ffm else None
    up = [init.conv(widths[i + 1], 4 * widths[i]) for i in range(3)]
    dec = level_blocks("decoder", config.dec_blocks)
    out = init.conv(widths[0], 3, 3, zero=True)
    return CaptNet(config, intro, enc, down, ffm, up, dec, out)


def _run(blk, x: Tensor) -> Tensor:
    if isinstance(blk, B.NafParams):
        return B.naf_block(x, blk)
    return B.spt_block(x, blk)


def forward(model: CaptNet, image: Tensor, return_features: bool = False):
    """Restore ``image`` ([N, 3, H, W], H and W divisible by 8).

    With ``return_features`` the result is ``(restored, features)`` where
    ``features`` maps ``"e4"`` to the level-4 encoder output and ``"d3"`` to
    the level-3 decoder output.
    """
    if image.data.ndim != 4 or image.shape[1] != 3:
        raise ValueError(f"expected an [N, 3, H, W] image, got {image.shape}")
    h, w = image.shape[2:]
    if h % 8 or w % 8:
        raise ValueError(f"image height and width must be divisible by 8, got {h}x{w}")
    x = model.intro(image)
    skips = []
    for lvl in range(4):
        for blk in model.enc[lvl]:
            x = _run(blk, x)
        if lvl < 3:
            skips.append(x)
            x = model.down[lvl](T.pixel_unshuffle(x, 2))
    e4 = x
    if model.ffm is not None:
        skips[2] = B.ffm(skips[2], e4, model.ffm)
    feats = {"e4": e4}
    for lvl in range(3, -1, -1):
        if lvl < 3:
            x = T.add(T.pixel_shuffle(model.up[lvl](x), 2), skips[lvl])
        for blk in model.dec[lvl]:
            x = _run(blk, x)
        if lvl == 2:
            feats["d3"] = x
    restored = T.add(model.out(x), image)
    if return_features:
        return restored, feats
    return restored


def psnr_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Negative PSNR with peak 1.0: ``10 * log10(MSE + 1e-8)``."""
    if pred.shape != target.shape:
        raise ValueError(f"psnr_loss shape mismatch: {pred.shape} vs {target.shape}")
    d = T.sub(pred, target)
    mse = T.mean_all(T.mul(d, d))
    return T.scale(T.log(T.add(mse, LOSS_EPS)), 10.0 / math.log(10.0))


def encoder_features(model: CaptNet, image: Tensor) -> Tensor:
    """Global-average-pooled level-4 encoder output, ``[N, 8C]``."""
    with T.no_grad():
        _, feats = forward(model, image, return_features=True)
        e4 = feats["e4"]
        return T.reshape(T.global_avg_pool(e4), e4.shape[:2])


def restored_features(model: CaptNet, image: Tensor) -> Tensor:
    """Global-average-pooled restored image, ``[N, 3]``."""
    with T.no_grad():
        out = forward(model, image)
        return T.reshape(T.global_avg_pool(out), out.shape[:2])
