"""Leaky integrate-and-fire dynamics and the fused SIMD activation."""

from __future__ import annotations

from dataclasses import dataclass

import ml_dtypes
import numpy as np

F32 = np.float32


@dataclass(frozen=True)
class LifParams:
    alpha: float = 1.0
    v_th: float = 1.0
    v_rst: float = 1.0
    r: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if not self.v_th > 0:
            raise ValueError(f"v_th must be positive, got {self.v_th}")


@dataclass(frozen=True)
class Precision:
    """Storage format of weights and potentials.

    The FPU word is 64 bits wide, so the format fixes the SIMD lane count.
    Arithmetic stays in FP32 unless ``strict`` is set, in which case every
    accumulation and state update is rounded to the storage format.
    """

    name: str
    elem_bytes: int
    word_bytes: int = 8
    strict: bool = False

    @property
    def simd_width(self) -> int:
        return self.word_bytes // self.elem_bytes

    def round(self, x):
        if not self.strict or self.name == "fp32":
            return x
        x = np.asarray(x, F32)
        store = np.float16 if self.name == "fp16" else ml_dtypes.float8_e5m2
        return x.astype(store).astype(F32)


PRECISIONS = {
    "fp32": Precision("fp32", 4),
    "fp16": Precision("fp16", 2),
    "fp8": Precision("fp8", 1),
}


def precision(name: str, strict: bool = False) -> Precision:
    try:
        base = PRECISIONS[name]
    except KeyError:
        raise ValueError(f"unknown precision {name!r}; choose from {sorted(PRECISIONS)}") from None
    return Precision(base.name, base.elem_bytes, base.word_bytes, strict)


@dataclass
class NeuronState:
    """Dense membrane potentials of one layer, HWC (or flat for FC)."""

    v: np.ndarray

    @classmethod
    def zeros(cls, shape) -> "NeuronState":
        return cls(np.zeros(shape, F32))

    def copy(self) -> "NeuronState":
        return NeuronState(self.v.copy())


def lif_update(v_prev, i, p: LifParams, prec: Precision | None = None):
    """One LIF step: decay and integrate, threshold, then subtract the reset.

    Works elementwise on scalars or arrays, in FP32. Returns
    ``(v_next, spike)``; a potential exactly at threshold fires.
    """
    v_prev = np.asarray(v_prev, F32)
    i = np.asarray(i, F32)
    v_tmp = v_prev * F32(p.alpha) + F32(p.r) * i
    if prec is not None:
        v_tmp = prec.round(v_tmp)
    spike = v_tmp >= F32(p.v_th)
    v_next = np.where(spike, v_tmp - F32(p.v_rst), v_tmp).astype(F32)
    if prec is not None:
        v_next = prec.round(v_next)
    if v_next.ndim == 0:
        return F32(v_next), bool(spike)
    return v_next, spike


def act_fun_simd(v_word, i_word, p: LifParams, location: int, group: int, out,
                 prec: Precision | None = None):
    """Apply the LIF step to every active lane of one SIMD word.

    Spiking lanes are appended to ``out`` (an ofmap builder) as channel
    ``group * simd_width + lane``, in ascending lane order. Lanes past the
    builder's channel count are masked off and returned unchanged.
    """
    v_word = np.asarray(v_word, F32)
    simd = v_word.shape[0]
    lanes = min(simd, out.channels - group * simd)
    if lanes <= 0:
        raise ValueError(f"group {group} has no active lanes for {out.channels} channels")
    v_next, spike = lif_update(v_word[:lanes], np.asarray(i_word, F32)[:lanes], p, prec)
    for lane in np.flatnonzero(spike):
        out.append(location, group * simd + int(lane))
    result = v_word.copy()
    result[:lanes] = v_next
    return result
