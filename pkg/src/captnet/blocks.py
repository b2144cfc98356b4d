"""Building blocks: SimpleGate, SCA, NAFBlock, MRAP (prompted channel attention), SGFN, SPT, FFM.

Blocks are pure functions of an input tensor and a parameter dataclass.
Output projections of every residual branch start at zero, so a freshly
initialized block is the identity map.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor

BETA_FLOOR = 1e-4
LN_EPS = 1e-6


@dataclass
class Conv:
    weight: Tensor
    bias: Tensor
    groups: int = 1

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, self.groups)


@dataclass
class Norm:
    gamma: Tensor
    beta: Tensor

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gamma, self.beta, LN_EPS)


@dataclass
class NafParams:
    norm1: Norm
    pw1: Conv   # C -> 2C
    dw1: Conv   # depthwise 2C
    sca: Conv   # C -> C on the pooled descriptor
    pw2: Conv   # C -> C, zero-init
    norm2: Norm
    pw3: Conv   # C -> 2C
    pw4: Conv   # C -> C, zero-init


@dataclass
class PromptSet:
    pq: Tensor
    pk: Tensor
    pv: Tensor
    enabled: bool = True


@dataclass
class MrapParams:
    q_pw: Conv
    q_dw: Conv
    k_pw: Conv
    k_dw: Conv
    v_pw: Conv
    v_dw: Conv
    proj: Conv      # zero-init
    beta: Tensor    # one temperature per head
    heads: int
    prompts: PromptSet | None = None


@dataclass
class SgfnParams:
    pw1: Conv   # C -> 2C
    dw1: Conv   # depthwise 2C
    pw0: Conv   # C -> C, zero-init


@dataclass
class SptParams:
    norm1: Norm
    mrap: MrapParams
    norm2: Norm
    sgfn: SgfnParams


@dataclass
class FfmParams:
    up: Conv            # C4 -> 4*C3, followed by pixel shuffle
    ff: NafParams       # at width C3


# ----------------------------------------------------------------------------
# parameter registry helpers
# ----------------------------------------------------------------------------

def named_parameters(obj, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
    """Walk dataclasses, lists and dicts, yielding ``(dotted_name, tensor)`` pairs."""
    if isinstance(obj, Tensor):
        yield prefix, obj
    elif dataclasses.is_dataclass(obj):
        for f in dataclasses.fields(obj):
            yield from named_parameters(getattr(obj, f.name), _join(prefix, f.name))
    elif isinstance(obj, (list, tuple)):
        for i, item in enumerate(obj):
            yield from named_parameters(item, _join(prefix, str(i)))
    elif isinstance(obj, dict):
        for k in sorted(obj):
            yield from named_parameters(obj[k], _join(prefix, str(k)))


def _join(prefix: str, name: str) -> str:
    return f"{prefix}.{name}" if prefix else name


class Init:
    """Deterministic parameter factory around a seeded generator."""

    def __init__(self, rng: np.random.Generator, dtype=np.float32):
        self.rng = rng
        self.dtype = dtype

    def _tensor(self, arr) -> Tensor:
        return Tensor(np.asarray(arr, dtype=self.dtype), requires_grad=True)

    def conv(self, cin: int, cout: int, k: int = 1, depthwise: bool = False, zero: bool = False) -> Conv:
        cin_g = 1 if depthwise else cin
        shape = (cout, cin_g, k, k)
        if zero:
            w = np.zeros(shape)
        else:
            bound = 1.0 / np.sqrt(cin_g * k * k)
            w = self.rng.uniform(-bound, bound, size=shape)
        return Conv(self._tensor(w), self._tensor(np.zeros(cout)), cin if depthwise else 1)

    def norm(self, c: int) -> Norm:
        return Norm(self._tensor(np.ones(c)), self._tensor(np.zeros(c)))

    def naf(self, c: int) -> NafParams:
        return NafParams(
            norm1=self.norm(c),
            pw1=self.conv(c, 2 * c),
            dw1=self.conv(2 * c, 2 * c, 3, depthwise=True),
            sca=self.conv(c, c),
            pw2=self.conv(c, c, zero=True),
            norm2=self.norm(c),
            pw3=self.conv(c, 2 * c),
            pw4=self.conv(c, c, zero=True),
        )

    def prompts(self, c: int, heads: int, enabled: bool = True) -> PromptSet:
        shape = (heads, c // heads)
        return PromptSet(*(self._tensor(np.zeros(shape)) for _ in range(3)), enabled=enabled)

    def mrap(self, c: int, heads: int, with_prompts: bool = False) -> MrapParams:
        if c % heads:
            raise ValueError(f"heads={heads} must divide channels={c}")
        return MrapParams(
            q_pw=self.conv(c, c), q_dw=self.conv(c, c, 3, depthwise=True),
            k_pw=self.conv(c, c), k_dw=self.conv(c, c, 3, depthwise=True),
            v_pw=self.conv(c, c), v_dw=self.conv(c, c, 3, depthwise=True),
            proj=self.conv(c, c, zero=True),
            beta=self._tensor(np.ones(heads)),
            heads=heads,
            prompts=self.prompts(c, heads) if with_prompts else None,
        )

    def sgfn(self, c: int) -> SgfnParams:
        return SgfnParams(
            pw1=self.conv(c, 2 * c),
            dw1=self.conv(2 * c, 2 * c, 3, depthwise=True),
            pw0=self.conv(c, c, zero=True),
        )

    def spt(self, c: int, heads: int, with_prompts: bool = False) -> SptParams:
        return SptParams(self.norm(c), self.mrap(c, heads, with_prompts), self.norm(c), self.sgfn(c))

    def ffm(self, c3: int, c4: int) -> FfmParams:
        return FfmParams(up=self.conv(c4, 4 * c3), ff=self.naf(c3))


# ----------------------------------------------------------------------------
# blocks
# ----------------------------------------------------------------------------

def simple_gate(x: Tensor) -> Tensor:
    a, b = T.channel_chunk2(x)
    return T.mul(a, b)


def sca(x: Tensor, conv: Conv) -> Tensor:
    return T.mul(x, conv(T.global_avg_pool(x)))


def naf_block(x: Tensor, p: NafParams) -> Tensor:
    if x.shape[1] != p.norm1.gamma.shape[0]:
        raise ValueError(f"naf_block width {p.norm1.gamma.shape[0]} does not match input {x.shape}")
    y = p.dw1(p.pw1(p.norm1(x)))
    y = p.pw2(sca(simple_gate(y), p.sca))
    x1 = T.add(x, y)
    z = p.pw4(simple_gate(p.pw3(p.norm2(x1))))
    return T.add(x1, z)


def mrap_attention(x: Tensor, p: MrapParams) -> tuple[Tensor, Tensor]:
    """Return ``(attended values as [N, C, H, W], attention [N, h, C/h, C/h])``.

    Channels are split into heads; each head treats its C/h channels as
    tokens of length H*W, so the attention matrix is (C/h) x (C/h).
    """
    n, c, hh, ww = x.shape
    heads = p.heads
    if c % heads:
        raise ValueError(f"heads={heads} must divide channels={c}")
    d = c // heads
    split = (n, heads, d, hh * ww)
    q = T.reshape(p.q_dw(p.q_pw(x)), split)
    k = T.reshape(p.k_dw(p.k_pw(x)), split)
    v = T.reshape(p.v_dw(p.v_pw(x)), split)
    if p.prompts is not None and p.prompts.enabled:
        for name in ("pq", "pk", "pv"):
            if getattr(p.prompts, name).shape != (heads, d):
                raise ValueError(f"prompt {name} must have shape ({heads}, {d})")
        q = T.add(q, T.reshape(p.prompts.pq, (1, heads, d, 1)))
        k = T.add(k, T.reshape(p.prompts.pk, (1, heads, d, 1)))
        v = T.add(v, T.reshape(p.prompts.pv, (1, heads, d, 1)))
    q = T.l2_normalize_lastdim(q)
    k = T.l2_normalize_lastdim(k)
    logits = T.batched_matmul(q, T.transpose_last2(k))
    temp = T.reshape(T.clamp_abs_min(p.beta, BETA_FLOOR), (1, heads, 1, 1))
    attn = T.softmax_lastdim(T.div(logits, temp))
    out = T.reshape(T.batched_matmul(attn, v), (n, c, hh, ww))
    return out, attn


def mrap(x: Tensor, p: MrapParams) -> Tensor:
    out, _ = mrap_attention(x, p)
    return p.proj(out)


def sgfn(x: Tensor, p: SgfnParams) -> Tensor:
    if x.shape[1] != p.pw0.weight.shape[0]:
        raise ValueError(f"sgfn width {p.pw0.weight.shape[0]} does not match input {x.shape}")
    return p.pw0(simple_gate(p.dw1(p.pw1(x))))


def spt_block(x: Tensor, p: SptParams) -> Tensor:
    x1 = T.add(x, mrap(p.norm1(x), p.mrap))
    return T.add(x1, sgfn(p.norm2(x1), p.sgfn))


def ffm(e3: Tensor, e4: Tensor, p: FfmParams) -> Tensor:
    up = T.pixel_shuffle(p.up(e4), 2)
    if up.shape != e3.shape:
        raise ValueError(f"ffm: upsampled level-4 features {up.shape} do not match level-3 {e3.shape}")
    return naf_block(T.add(up, e3), p.ff)


def astype(obj, dtype):
    """Deep copy of a parameter structure with every tensor cast to ``dtype``."""
    if isinstance(obj, Tensor):
        return Tensor(obj.data.astype(dtype), requires_grad=obj.requires_grad)
    if dataclasses.is_dataclass(obj):
        return dataclasses.replace(
            obj, **{f.name: astype(getattr(obj, f.name), dtype) for f in dataclasses.fields(obj)}
        )
    if isinstance(obj, list):
        return [astype(o, dtype) for o in obj]
    if isinstance(obj, dict):
        return {k: astype(v, dtype) for k, v in obj.items()}
    return obj
