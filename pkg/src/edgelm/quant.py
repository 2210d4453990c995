"""Low-bit weight quantization, sparsification, and accounting metrics.

Symmetric codes live in [-qmax, qmax] (restricted range, exact sign symmetry);
asymmetric codes in [0, 2^b - 1] with an integer zero point. Rounding is
half-to-even throughout. Bits-per-weight is exact rational arithmetic over
code, scale, zero-point, and mask bits.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Optional, Union

import numpy as np

from .errors import ConfigError, FrozenEncodingError, ShapeError
from .model import TinyLM, forward

_ALLOWED_BITS = (2, 3, 4, 8)


@dataclass(frozen=True)
class QuantSpec:
    bits: int = 4
    scheme: str = "symmetric"            # symmetric | asymmetric
    granularity: str = "per-group"       # per-tensor | per-row | per-group
    group_size: int = 128
    scale_bits: int = 16
    zero_point_bits: int = 16

    def __post_init__(self):
        if self.bits not in _ALLOWED_BITS:
            raise ConfigError(f"bits must be one of {_ALLOWED_BITS}")
        if self.scheme not in ("symmetric", "asymmetric"):
            raise ConfigError("scheme must be symmetric or asymmetric")
        if self.granularity not in ("per-tensor", "per-row", "per-group"):
            raise ConfigError("granularity must be per-tensor, per-row, or per-group")
        if self.group_size < 1:
            raise ConfigError("group_size must be >= 1")


@dataclass(frozen=True)
class Unstructured:
    keep_ratio: float

    def __post_init__(self):
        if not (0 < self.keep_ratio <= 1):
            raise ConfigError("keep_ratio must be in (0, 1]")

    def mask_bits_per_weight(self) -> Fraction:
        return Fraction(1)


@dataclass(frozen=True)
class Structured:
    n: int
    m: int

    def __post_init__(self):
        if not (1 <= self.n <= self.m):
            raise ConfigError("need 1 <= n <= m")

    def mask_bits_per_weight(self) -> Fraction:
        return Fraction(math.ceil(math.log2(math.comb(self.m, self.n))), self.m)


SparsitySpec = Union[Unstructured, Structured]


class QuantTensor:
    """Bit-coded weight tensor; freezing makes every encoding array immutable."""

    def __init__(self, codes: np.ndarray, scales: np.ndarray,
                 zero_points: Optional[np.ndarray], shape: tuple,
                 spec: QuantSpec, group_index: np.ndarray,
                 mask: Optional[np.ndarray] = None, frozen: bool = False):
        self.codes = np.asarray(codes, dtype=np.int32)
        self.scales = np.asarray(scales, dtype=np.float64)
        self.zero_points = None if zero_points is None else np.asarray(
            zero_points, dtype=np.int32)
        self.shape = tuple(shape)
        self.spec = spec
        self.group_index = np.asarray(group_index, dtype=np.int64)  # per element
        self.mask = None if mask is None else np.asarray(mask, dtype=bool)
        self.frozen = False
        if frozen:
            self.freeze()

    def freeze(self):
        for arr in (self.codes, self.scales, self.zero_points, self.mask,
                    self.group_index):
            if arr is not None:
                arr.setflags(write=False)
        self.frozen = True

    def set_scales(self, scales):
        if self.frozen:
            raise FrozenEncodingError("quantization encodings are frozen")
        self.scales = np.asarray(scales, dtype=np.float64)

    def set_zero_points(self, zero_points):
        if self.frozen:
            raise FrozenEncodingError("quantization encodings are frozen")
        self.zero_points = np.asarray(zero_points, dtype=np.int32)

    def dequantize(self) -> np.ndarray:
        flat_scales = self.scales[self.group_index]
        if self.spec.scheme == "symmetric":
            deq = self.codes.ravel().astype(np.float64) * flat_scales
        else:
            zps = self.zero_points[self.group_index]
            deq = (self.codes.ravel().astype(np.float64) - zps) * flat_scales
        deq = deq.reshape(self.shape)
        if self.mask is not None:
            deq = deq * self.mask
        return deq.astype(np.float32)

    def encoding_bytes(self) -> bytes:
        parts = [self.codes.astype("<i4").tobytes(),
                 self.scales.astype("<f8").tobytes()]
        if self.zero_points is not None:
            parts.append(self.zero_points.astype("<i4").tobytes())
        if self.mask is not None:
            parts.append(np.packbits(self.mask.ravel()).tobytes())
        return b"".join(parts)


def _group_slices(shape: tuple, spec: QuantSpec) -> list[slice]:
    """Slices of the flattened (row-major) tensor forming quantization groups."""
    total = int(np.prod(shape))
    if spec.granularity == "per-tensor":
        return [slice(0, total)]
    rowlen = shape[-1] if len(shape) > 1 else total
    nrows = total // rowlen
    if spec.granularity == "per-row":
        return [slice(r * rowlen, (r + 1) * rowlen) for r in range(nrows)]
    g = spec.group_size
    if g > rowlen:
        raise ConfigError(f"group size {g} exceeds row length {rowlen}")
    slices = []
    for r in range(nrows):
        for start in range(0, rowlen, g):
            stop = min(start + g, rowlen)
            slices.append(slice(r * rowlen + start, r * rowlen + stop))
    return slices


def quantize(tensor: np.ndarray, spec: QuantSpec,
             mask: Optional[np.ndarray] = None) -> QuantTensor:
    tensor = np.asarray(tensor, dtype=np.float64)
    if tensor.size == 0:
        raise ShapeError("cannot quantize an empty tensor")
    flat = tensor.ravel()
    slices = _group_slices(tensor.shape, spec)
    n_groups = len(slices)
    scales = np.empty(n_groups)
    zps = np.empty(n_groups, dtype=np.int64) if spec.scheme == "asymmetric" else None
    codes = np.empty(flat.size, dtype=np.int64)
    group_index = np.empty(flat.size, dtype=np.int64)
    qmax = 2 ** (spec.bits - 1) - 1
    hi = 2 ** spec.bits - 1

    for gi, sl in enumerate(slices):
        x = flat[sl]
        group_index[sl] = gi
        if spec.scheme == "symmetric":
            amax = np.max(np.abs(x))
            scale = amax / qmax if amax > 0 else 1.0
            c = np.clip(np.rint(x / scale), -qmax, qmax)
        else:
            mn, mx = x.min(), x.max()
            if mx > mn:
                scale = (mx - mn) / hi
                zp = int(np.rint(-mn / scale))
                c = np.clip(np.rint(x / scale) + zp, 0, hi)
            else:  # constant group
                c0 = float(mn)
                if c0 == 0.0:
                    scale, zp = 1.0, 0
                    c = np.zeros_like(x)
                elif c0 > 0:
                    scale, zp = c0, 0
                    c = np.ones_like(x)
                else:
                    scale, zp = -c0, 1
                    c = np.zeros_like(x)
            zps[gi] = zp
        scales[gi] = scale
        codes[sl] = c
    codes = codes.reshape(tensor.shape)
    return QuantTensor(codes=codes, scales=scales, zero_points=zps,
                       shape=tensor.shape, spec=spec, group_index=group_index,
                       mask=mask)


def dequantize(qt: QuantTensor) -> np.ndarray:
    return qt.dequantize()


def fake_quant(x: np.ndarray, bits: int, scheme: str = "symmetric") -> np.ndarray:
    """Quantize-then-dequantize in one pass, per-tensor dynamic range."""
    if bits not in (8, 16):
        raise ConfigError("fake_quant supports 8 or 16 bits")
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        return x.astype(np.float32)
    if scheme == "symmetric":
        qmax = 2 ** (bits - 1) - 1
        amax = np.max(np.abs(x))
        scale = amax / qmax if amax > 0 else 1.0
        return (np.clip(np.rint(x / scale), -qmax, qmax) * scale).astype(np.float32)
    if scheme != "asymmetric":
        raise ConfigError("scheme must be symmetric or asymmetric")
    hi = 2 ** bits - 1
    mn, mx = x.min(), x.max()
    if mx == mn:
        return x.astype(np.float32)
    scale = (mx - mn) / hi
    zp = int(np.rint(-mn / scale))
    c = np.clip(np.rint(x / scale) + zp, 0, hi)
    return ((c - zp) * scale).astype(np.float32)


def sparsify(tensor: np.ndarray, spec: SparsitySpec
             ) -> tuple[np.ndarray, np.ndarray]:
    """Magnitude pruning; ties keep the lower index. Returns (pruned, mask)."""
    tensor = np.asarray(tensor, dtype=np.float64)
    mask = np.zeros(tensor.shape, dtype=bool)
    if isinstance(spec, Unstructured):
        flat = tensor.ravel()
        keep = int(math.ceil(spec.keep_ratio * flat.size))
        order = np.lexsort((np.arange(flat.size), -np.abs(flat)))
        mask.ravel()[order[:keep]] = True
    else:
        rowlen = tensor.shape[-1] if tensor.ndim > 1 else tensor.size
        if rowlen % spec.m != 0:
            raise ShapeError(f"row length {rowlen} not divisible by m={spec.m}")
        flat = tensor.reshape(-1, spec.m)
        mflat = mask.reshape(-1, spec.m)
        for bi in range(flat.shape[0]):
            block = flat[bi]
            order = np.lexsort((np.arange(spec.m), -np.abs(block)))
            mflat[bi, order[:spec.n]] = True
    return (tensor * mask).astype(tensor.dtype), mask


def _tensor_bits(shape: tuple, qspec: QuantSpec,
                 sspec: Optional[SparsitySpec] = None,
                 kept: Optional[int] = None) -> Fraction:
    total = int(np.prod(shape))
    n_groups = len(_group_slices(shape, qspec))
    if sspec is None:
        stored = total
        mask_bits = Fraction(0)
    else:
        if kept is None:
            if isinstance(sspec, Unstructured):
                kept = int(math.ceil(sspec.keep_ratio * total))
            else:
                kept = total * sspec.n // sspec.m
        stored = kept
        mask_bits = sspec.mask_bits_per_weight() * total
    bits = Fraction(stored * qspec.bits) + Fraction(n_groups * qspec.scale_bits)
    if qspec.scheme == "asymmetric":
        bits += Fraction(n_groups * qspec.zero_point_bits)
    return bits + mask_bits


def bpw_exact(qt: QuantTensor,
              sparsity: Optional[SparsitySpec] = None) -> Fraction:
    total = int(np.prod(qt.shape))
    kept = int(qt.mask.sum()) if qt.mask is not None else None
    if qt.mask is not None and sparsity is None:
        # mask present without a declared scheme: unstructured, 1 bit/weight
        sparsity = Unstructured(keep_ratio=kept / total if kept else 1e-9)
    return _tensor_bits(qt.shape, qt.spec, sparsity, kept) / total


def bpw(qt: QuantTensor, sparsity: Optional[SparsitySpec] = None) -> float:
    return float(bpw_exact(qt, sparsity))


@dataclass
class PrecisionPlan:
    specs: dict[str, QuantSpec]
    sparsity: dict[str, SparsitySpec] = field(default_factory=dict)
    bpw_budget: Optional[float] = None

    def validate_for(self, model: TinyLM):
        slots = set(model.config.slot_shapes())
        missing = slots - set(self.specs)
        extra = set(self.specs) - slots
        if missing:
            raise ConfigError(f"plan missing slots: {sorted(missing)}")
        if extra:
            raise ConfigError(f"plan has unknown slots: {sorted(extra)}")


def uniform_plan(model: TinyLM, bits: int, scheme: str = "symmetric",
                 group_size: int = 128, scale_bits: int = 16) -> PrecisionPlan:
    """Per-group specs for matrices, per-tensor for 1-D norm scales."""
    specs = {}
    for name, shape in model.config.slot_shapes().items():
        if len(shape) > 1 and shape[-1] >= group_size:
            specs[name] = QuantSpec(bits=bits, scheme=scheme,
                                    granularity="per-group", group_size=group_size,
                                    scale_bits=scale_bits)
        else:
            specs[name] = QuantSpec(bits=bits, scheme=scheme,
                                    granularity="per-tensor", scale_bits=scale_bits)
    return PrecisionPlan(specs=specs)


def plan_bpw_exact(model: TinyLM, plan: PrecisionPlan) -> Fraction:
    total_bits = Fraction(0)
    total_weights = 0
    for name, shape in model.config.slot_shapes().items():
        total_bits += _tensor_bits(shape, plan.specs[name], plan.sparsity.get(name))
        total_weights += int(np.prod(shape))
    return total_bits / total_weights


def plan_bpw(model: TinyLM, plan: PrecisionPlan) -> float:
    return float(plan_bpw_exact(model, plan))


def ptq_model(model: TinyLM, plan: PrecisionPlan, freeze: bool = False) -> TinyLM:
    """Replace every weight with a QuantTensor per its plan entry."""
    plan.validate_for(model)
    weights = {}
    for name in model.config.slot_shapes():
        w = np.asarray(model.weight(name), dtype=np.float64)
        sspec = plan.sparsity.get(name)
        mask = None
        if sspec is not None:
            w, mask = sparsify(w, sspec)
        qt = quantize(w, plan.specs[name], mask=mask)
        if freeze:
            qt.freeze()
        weights[name] = qt
    return TinyLM(config=model.config, weights=weights)


def top1_overlap(model_a: TinyLM, model_b: TinyLM, sequences) -> float:
    """Teacher-forced argmax agreement over the supplied token sequences."""
    agree = 0
    total = 0
    for seq in sequences:
        seq = list(seq)
        if not seq:
            continue
        pa = np.argmax(forward(model_a, seq).logits, axis=-1)
        pb = np.argmax(forward(model_b, seq).logits, axis=-1)
        agree += int(np.sum(pa == pb))
        total += len(seq)
    if total == 0:
        raise ValueError("top1_overlap needs at least one scoreable position")
    return agree / total


_LADDER = (8, 4, 3, 2)


def assign_precision(model: TinyLM, calibration, bpw_budget: float,
                     scheme: str = "symmetric", group_size: int = 128
                     ) -> PrecisionPlan:
    """Greedy sensitivity-based mixed-precision assignment.

    Start all slots at 8 bits; repeatedly demote the slot whose one-step
    reduction costs the least Top-1 overlap on the calibration set, until the
    model bpw meets the budget; then promote back any slot that fits.
    """
    calibration = [list(s) for s in calibration]
    if not calibration:
        raise ValueError("calibration set must be nonempty")

    def make_plan(levels: dict[str, int]) -> PrecisionPlan:
        base = uniform_plan(model, 8, scheme=scheme, group_size=group_size)
        specs = {name: replace(spec, bits=levels[name])
                 for name, spec in base.specs.items()}
        return PrecisionPlan(specs=specs)

    slots = list(model.config.slot_shapes())
    lo = plan_bpw(model, make_plan({s: 2 for s in slots}))
    hi = plan_bpw(model, make_plan({s: 8 for s in slots}))
    if bpw_budget < lo:
        raise ConfigError(f"budget {bpw_budget} below minimum achievable {lo}")

    ref_preds = [np.argmax(forward(model, seq).logits, axis=-1) for seq in calibration]
    qt_cache: dict[tuple[str, int], QuantTensor] = {}

    def quantized_slot(name: str, bits: int) -> QuantTensor:
        key = (name, bits)
        if key not in qt_cache:
            plan = uniform_plan(model, bits, scheme=scheme, group_size=group_size)
            qt_cache[key] = quantize(np.asarray(model.weight(name), dtype=np.float64),
                                     plan.specs[name])
        return qt_cache[key]

    def overlap_for(levels: dict[str, int]) -> float:
        qm = TinyLM(config=model.config,
                    weights={s: quantized_slot(s, levels[s]) for s in slots})
        agree = total = 0
        for seq, ref in zip(calibration, ref_preds):
            preds = np.argmax(forward(qm, seq).logits, axis=-1)
            agree += int(np.sum(preds == ref))
            total += len(seq)
        return agree / total

    levels = {s: 8 for s in slots}
    while plan_bpw(model, make_plan(levels)) > bpw_budget:
        best = None
        for s in slots:
            i = _LADDER.index(levels[s])
            if i + 1 >= len(_LADDER):
                continue
            trial = dict(levels)
            trial[s] = _LADDER[i + 1]
            ov = overlap_for(trial)
            if best is None or ov > best[1]:
                best = (s, ov)
        if best is None:
            raise ConfigError("cannot demote further; budget infeasible")
        s = best[0]
        levels[s] = _LADDER[_LADDER.index(levels[s]) + 1]

    # local maximality: promote back anything that still fits the budget
    improved = True
    while improved:
        improved = False
        best = None
        for s in slots:
            i = _LADDER.index(levels[s])
            if i == 0:
                continue
            trial = dict(levels)
            trial[s] = _LADDER[i - 1]
            if plan_bpw(model, make_plan(trial)) <= bpw_budget:
                ov = overlap_for(trial)
                if best is None or ov > best[1]:
                    best = (s, ov)
        if best is not None:
            s = best[0]
            levels[s] = _LADDER[_LADDER.index(levels[s]) - 1]
            improved = True

    plan = make_plan(levels)
    plan.bpw_budget = bpw_budget
    return plan


# --- packed manifest ----------------------------------------------------------

def pack_bits(values: np.ndarray, bits: int) -> bytes:
    """LSB-first bit packing of nonnegative ints, little-endian byte order."""
    values = np.asarray(values, dtype=np.uint64).ravel()
    out = bytearray((values.size * bits + 7) // 8)
    bitpos = 0
    for v in values:
        v = int(v)
        byte, off = bitpos >> 3, bitpos & 7
        chunk = v << off
        while chunk:
            out[byte] |= chunk & 0xFF
            chunk >>= 8
            byte += 1
        bitpos += bits
    return bytes(out)


def unpack_bits(data: bytes, bits: int, count: int) -> np.ndarray:
    out = np.empty(count, dtype=np.int64)
    mask = (1 << bits) - 1
    for i in range(count):
        bitpos = i * bits
        byte, off = bitpos >> 3, bitpos & 7
        acc = 0
        shift = 0
        b = byte
        while shift < bits + off:
            acc |= data[b] << shift
            shift += 8
            b += 1
        out[i] = (acc >> off) & mask
    return out


def save_quant_model(model: TinyLM, path):
    """Quantized manifest: per-slot spec, packed codes, scales, zero points."""
    header_slots = []
    blobs = []
    offset = 0

    def add(blob: bytes) -> tuple[int, int]:
        nonlocal offset
        blobs.append(blob)
        start = offset
        offset += len(blob)
        return start, len(blob)

    for name in sorted(model.weights):
        qt = model.weights[name]
        if not isinstance(qt, QuantTensor):
            raise ValueError(f"slot {name} is not quantized")
        qmax = 2 ** (qt.spec.bits - 1) - 1
        raw = qt.codes.ravel().astype(np.int64)
        if qt.spec.scheme == "symmetric":
            raw = raw + qmax  # shift to nonnegative for packing
        codes_loc = add(pack_bits(raw, qt.spec.bits))
        scales_loc = add(np.asarray(qt.scales, dtype="<f8").tobytes())
        entry = {
            "name": name, "shape": list(qt.shape), "frozen": qt.frozen,
            "spec": {"bits": qt.spec.bits, "scheme": qt.spec.scheme,
                     "granularity": qt.spec.granularity,
                     "group_size": qt.spec.group_size,
                     "scale_bits": qt.spec.scale_bits,
                     "zero_point_bits": qt.spec.zero_point_bits},
            "codes": codes_loc, "scales": scales_loc,
        }
        if qt.zero_points is not None:
            entry["zero_points"] = add(
                np.asarray(qt.zero_points, dtype="<i4").tobytes())
        if qt.mask is not None:
            entry["mask"] = add(np.packbits(qt.mask.ravel()).tobytes())
        header_slots.append(entry)

    header = json.dumps({"config": model.config.to_dict(),
                         "slots": header_slots}).encode()
    with open(path, "wb") as f:
        f.write(b"EDGELMQ1")
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        for b in blobs:
            f.write(b)


def load_quant_model(path) -> TinyLM:
    from .model import ModelConfig

    with open(path, "rb") as f:
        if f.read(8) != b"EDGELMQ1":
            raise ValueError("not an edgelm quantized manifest")
        (hlen,) = struct.unpack("<I", f.read(4))
        header = json.loads(f.read(hlen).decode())
        data = f.read()
    config = ModelConfig.from_dict(header["config"])
    weights = {}
    for entry in header["slots"]:
        spec = QuantSpec(**entry["spec"])
        shape = tuple(entry["shape"])
        count = int(np.prod(shape))
        start, length = entry["codes"]
        codes = unpack_bits(data[start:start + length], spec.bits, count)
        if spec.scheme == "symmetric":
            codes = codes - (2 ** (spec.bits - 1) - 1)
        start, length = entry["scales"]
        scales = np.frombuffer(data[start:start + length], dtype="<f8").copy()
        zps = None
        if "zero_points" in entry:
            start, length = entry["zero_points"]
            zps = np.frombuffer(data[start:start + length], dtype="<i4").copy()
        mask = None
        if "mask" in entry:
            start, length = entry["mask"]
            mask = np.unpackbits(
                np.frombuffer(data[start:start + length], dtype=np.uint8),
                count=count).astype(bool).reshape(shape)
        gidx = np.empty(count, dtype=np.int64)
        for gi, sl in enumerate(_group_slices(shape, spec)):
            gidx[sl] = gi
        qt = QuantTensor(codes=codes.reshape(shape), scales=scales,
                         zero_points=zps, shape=shape, spec=spec,
                         group_index=gidx, mask=mask, frozen=entry["frozen"])
        weights[entry["name"]] = qt
    return TinyLM(config=config, weights=weights)
