"""Trainable spatial discretizations mapping states to curvature estimates.

Two architectures share a common head structure: given the state x they
produce a d x d matrix approximating the Hessian of the unknown solution
and a d-vector approximating the generator applied to its gradient.  The
flat parameter vector starts with a direct block (initial value, initial
gradient, and the step-0 matrix/vector used in place of network output at
the first time step) and is laid out so the architecture's size formula
is met exactly.

Multiscale network: four plain ReLU branches of different hidden widths,
evaluated in parallel and fused by unweighted mean.

Convolutional network: the state vector is reshaped column-major into a
square matrix with a single channel, then passed through three 3x3
convolutions (stride 1, padding 1, so the spatial size never changes) and
one linear layer.  The per-channel parameter blocks in the size formula
admit one 3x3 kernel and bias each, which fixes the channel topology:
the first convolution expands 1 -> c channels, the second is depthwise
(per-channel), and the third collapses the channel mean back to a single
channel with one shared kernel.  Block space beyond each kernel+bias is
inert padding: zero at initialization and never touched by gradients.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ParamVector, Segment, Tensor
from .errors import ConfigurationError, DimensionError

KERNEL_SIZE = 9  # 3x3
ACTIVE_CONV_BLOCK = KERNEL_SIZE + 1  # kernel + bias


@dataclass(frozen=True)
class MultiscaleSpec:
    """Four-branch fusion network for dimension d with hidden widths ``scales``."""

    d: int
    scales: tuple[int, int, int, int]

    def __post_init__(self):
        if self.d < 1:
            raise ConfigurationError(f"dimension must be >= 1, got {self.d}")
        if len(self.scales) != 4 or any(s < 1 for s in self.scales):
            raise ConfigurationError(f"need exactly four positive scales, got {self.scales}")


@dataclass(frozen=True)
class CnnSpec:
    """Convolutional network for perfect-square dimension d with ``channels`` channels."""

    d: int
    channels: int = 32

    def __post_init__(self):
        side = math.isqrt(self.d)
        if side * side != self.d:
            raise ConfigurationError(f"CNN dimension must be a perfect square, got {self.d}")
        if self.d < 4:
            # each per-channel block holds d(d+1) entries and must fit a 3x3 kernel + bias
            raise ConfigurationError(f"CNN dimension must be >= 4, got {self.d}")
        if self.channels < 1:
            raise ConfigurationError(f"channel count must be >= 1, got {self.channels}")

    @property
    def side(self) -> int:
        return math.isqrt(self.d)


ArchSpec = MultiscaleSpec | CnnSpec


def param_count(spec: ArchSpec) -> int:
    """Exact trainable vector length for the architecture."""
    d = spec.d
    if isinstance(spec, MultiscaleSpec):
        total_width = sum(spec.scales)
        return (2 * total_width + d + 1) * (d + 1) + sum(
            (2 * di + d * d + d) * (di + 1) for di in spec.scales
        )
    if isinstance(spec, CnnSpec):
        c = spec.channels
        return ((4 * c + 4) * d + d * d + 1) * (d + 1)
    raise ConfigurationError(f"unknown architecture spec {spec!r}")


def _initial_block_segments(d: int) -> list[Segment]:
    return [
        Segment("y0", 0, ()),
        Segment("z0", 1, (d,)),
        Segment("g0", d + 1, (d, d)),
        Segment("a0", d * d + d + 1, (d,)),
    ]


def layout(spec: ArchSpec) -> list[Segment]:
    """Named, disjoint segments covering [0, nu) in storage order."""
    d = spec.d
    segments = _initial_block_segments(d)
    offset = (d + 1) * (d + 1)

    def put(name: str, shape: tuple[int, ...]) -> None:
        nonlocal offset
        segments.append(Segment(name, offset, shape))
        offset += int(np.prod(shape)) if shape else 1

    if isinstance(spec, MultiscaleSpec):
        # per head: all first layers, then all second, then all third
        for head, out_width in (("a", d), ("g", d * d)):
            for i, di in enumerate(spec.scales):
                put(f"{head}1_w_{i}", (di, d))
                put(f"{head}1_b_{i}", (di,))
            for i, di in enumerate(spec.scales):
                put(f"{head}2_w_{i}", (di, di))
                put(f"{head}2_b_{i}", (di,))
            for i, di in enumerate(spec.scales):
                put(f"{head}3_w_{i}", (out_width, di))
                put(f"{head}3_b_{i}", (out_width,))
    elif isinstance(spec, CnnSpec):
        c = spec.channels
        block = d * (d + 1)
        pad = block - ACTIVE_CONV_BLOCK

        def put_conv_block(name: str) -> None:
            put(f"{name}_k", (3, 3))
            put(f"{name}_b", ())
            put(f"{name}_pad", (pad,))

        for head, out_width in (("a", d), ("g", d * d)):
            for i in range(c):
                put_conv_block(f"{head}_c1_{i}")
            for i in range(c):
                put_conv_block(f"{head}_c2_{i}")
            put_conv_block(f"{head}_c3")
            put(f"{head}_fc_w", (out_width, d))
            put(f"{head}_fc_b", (out_width,))
    else:
        raise ConfigurationError(f"unknown architecture spec {spec!r}")

    assert offset == param_count(spec), "layout does not match the size formula"
    return segments


def zero_params(spec: ArchSpec) -> ParamVector:
    return ParamVector(np.zeros(param_count(spec)), layout(spec))


def init_params(spec: ArchSpec, seed) -> ParamVector:
    """Deterministic initialization per seed.

    Affine weights and convolution kernels ~ Normal(0, 1/fan_in); biases,
    padding, and the step-0 blocks zero.  The initial value is uniform on
    [-1, 1] and the initial gradient uniform on [-1, 1]/sqrt(d): both must
    stay small enough that problems with superlinear nonlinearities (the
    cubic drift blows up within the horizon once |Y| passes ~1.5) survive
    the untrained rollout.
    """
    rng = np.random.default_rng(seed)
    pv = zero_params(spec)
    for seg in pv.segments.values():
        view = pv.view(seg.name)
        if seg.name == "y0":
            view[...] = rng.uniform(-1.0, 1.0, size=seg.shape)
        elif seg.name == "z0":
            view[...] = rng.uniform(-1.0, 1.0, size=seg.shape) / math.sqrt(spec.d)
        elif seg.name.endswith("_k"):
            view[...] = rng.standard_normal(seg.shape) / math.sqrt(KERNEL_SIZE)
        elif "_w_" in seg.name or seg.name.endswith("_w"):
            view[...] = rng.standard_normal(seg.shape) / math.sqrt(seg.shape[1])
        # biases, padding, g0, a0 stay zero
    return pv


@dataclass
class InitialBlock:
    """Write-through views of the direct parameter blocks at the head of theta."""

    y0: np.ndarray
    z0: np.ndarray
    g0: np.ndarray
    a0: np.ndarray


def read_initial_block(pv: ParamVector) -> InitialBlock:
    return InitialBlock(y0=pv.view("y0"), z0=pv.view("z0"), g0=pv.view("g0"), a0=pv.view("a0"))


class MultiscaleEvaluator:
    """Bound (spec, theta) pair exposing the two network heads.

    ``theta`` may be a recorded Tensor (training) or a flat ndarray
    (plain evaluation); weight segments are extracted once so repeated
    per-time-step calls share the same nodes and accumulate gradients.
    """

    def __init__(self, spec: MultiscaleSpec, theta):
        if ad.value_of(theta).shape != (param_count(spec),):
            raise DimensionError(
                f"theta has length {ad.value_of(theta).shape}, expected {param_count(spec)}")
        self.spec = spec
        self._weights = {}
        for seg in layout(spec):
            if seg.name.endswith("_pad"):
                continue
            self._weights[seg.name] = ad.reshape(ad.segment(theta, seg.offset, seg.size), seg.shape)

    def block(self, name: str):
        """Extracted tensor for a named segment (e.g. the initial block)."""
        return self._weights[name]

    def _branch(self, head: str, i: int, x):
        w = self._weights
        h = ad.relu(ad.affine(w[f"{head}1_w_{i}"], w[f"{head}1_b_{i}"], x))
        h = ad.relu(ad.affine(w[f"{head}2_w_{i}"], w[f"{head}2_b_{i}"], h))
        return ad.affine(w[f"{head}3_w_{i}"], w[f"{head}3_b_{i}"], h)

    def _fused(self, head: str, x):
        outs = [self._branch(head, i, x) for i in range(4)]
        return (outs[0] + outs[1] + outs[2] + outs[3]) * 0.25

    def grad_drift(self, x):
        """Estimate of the generator applied to the solution gradient, (J, d)."""
        return self._fused("a", x)

    def hessian(self, x):
        """Estimate of the solution Hessian, (J, d, d), row-major output head."""
        d = self.spec.d
        flat = self._fused("g", x)
        target = (d, d) if ad.value_of(x).ndim == 1 else (ad.value_of(x).shape[0], d, d)
        return ad.reshape(flat, target)


class CnnEvaluator:
    """Bound (spec, theta) pair for the convolutional architecture.

    Convolutions run in stencil form (one batched GEMM per layer on
    flattened spatial positions) rather than by shifted accumulation; the
    two are the same linear map, and the unit tests pin the equivalence.
    """

    def __init__(self, spec: CnnSpec, theta):
        if ad.value_of(theta).shape != (param_count(spec),):
            raise DimensionError(
                f"theta has length {ad.value_of(theta).shape}, expected {param_count(spec)}")
        self.spec = spec
        self._perm = ad.square_permutation(spec.side)
        segs = {seg.name: seg for seg in layout(spec)}
        self._weights = {}
        for seg in _initial_block_segments(spec.d):
            self._weights[seg.name] = ad.reshape(ad.segment(theta, seg.offset, seg.size), seg.shape)
        for head in ("a", "g"):
            c = spec.channels
            k1 = np.stack([self._kernel_indices(segs[f"{head}_c1_{i}_k"]) for i in range(c)])
            self._weights[f"{head}_k1"] = ad.take(theta, k1)
            self._weights[f"{head}_b1"] = ad.take(
                theta, np.array([segs[f"{head}_c1_{i}_b"].offset for i in range(c)]))
            k2 = np.stack([self._kernel_indices(segs[f"{head}_c2_{i}_k"]) for i in range(c)])
            self._weights[f"{head}_k2"] = ad.take(theta, k2)
            self._weights[f"{head}_b2"] = ad.take(
                theta, np.array([segs[f"{head}_c2_{i}_b"].offset for i in range(c)]))
            self._weights[f"{head}_k3"] = ad.take(theta, self._kernel_indices(segs[f"{head}_c3_k"]))
            self._weights[f"{head}_b3"] = ad.take(theta, np.array([segs[f"{head}_c3_b"].offset]))
            for suffix in ("fc_w", "fc_b"):
                seg = segs[f"{head}_{suffix}"]
                self._weights[f"{head}_{suffix}"] = ad.reshape(
                    ad.segment(theta, seg.offset, seg.size), seg.shape)

    def block(self, name: str):
        """Extracted tensor for a named segment (e.g. the initial block)."""
        return self._weights[name]

    @staticmethod
    def _kernel_indices(seg: Segment) -> np.ndarray:
        return np.arange(seg.offset, seg.offset + KERNEL_SIZE).reshape(3, 3)

    def _conv_stack(self, head: str, x):
        w = self._weights
        side = self.spec.side
        # reorder the state into the square's row-major spatial order
        if isinstance(x, ad.Tensor) and x.tape is not None:
            z = ad.columns(x, self._perm)
        else:
            z = ad.value_of(x)[:, self._perm]
        h = ad.relu(ad.conv_stencil_expand(z, w[f"{head}_k1"], w[f"{head}_b1"], side))
        h = ad.relu(ad.conv_stencil_depthwise(h, w[f"{head}_k2"], w[f"{head}_b2"], side))
        h = ad.mean(h, axis=0)  # fuse channels before the collapsing conv
        return ad.conv_stencil_single(h, w[f"{head}_k3"], w[f"{head}_b3"], side)

    def grad_drift(self, x):
        x, squeeze = self._promote(x)
        h = ad.relu(self._conv_stack("a", x))
        v = ad.columns(h, self._perm)  # back to vector order (the permutation is an involution)
        out = ad.linear(v, self._weights["a_fc_w"], self._weights["a_fc_b"])
        return ad.reshape(out, (self.spec.d,)) if squeeze else out

    def hessian(self, x):
        # no activation after the last convolution on this head
        x, squeeze = self._promote(x)
        d = self.spec.d
        h = self._conv_stack("g", x)
        v = ad.columns(h, self._perm)
        flat = ad.linear(v, self._weights["g_fc_w"], self._weights["g_fc_b"])
        shape = (d, d) if squeeze else (ad.value_of(x).shape[0], d, d)
        return ad.reshape(flat, shape)

    @staticmethod
    def _promote(x):
        if ad.value_of(x).ndim == 1:
            return np.asarray(ad.value_of(x))[None, :], True
        return x, False


def evaluator(spec: ArchSpec, theta):
    if isinstance(spec, MultiscaleSpec):
        return MultiscaleEvaluator(spec, theta)
    if isinstance(spec, CnnSpec):
        return CnnEvaluator(spec, theta)
    raise ConfigurationError(f"unknown architecture spec {spec!r}")


def eval_multiscale_drift(spec: MultiscaleSpec, theta, x):
    return MultiscaleEvaluator(spec, theta).grad_drift(x)


def eval_multiscale_hessian(spec: MultiscaleSpec, theta, x):
    return MultiscaleEvaluator(spec, theta).hessian(x)


def eval_cnn_drift(spec: CnnSpec, theta, x):
    return CnnEvaluator(spec, theta).grad_drift(x)


def eval_cnn_hessian(spec: CnnSpec, theta, x):
    return CnnEvaluator(spec, theta).hessian(x)


# ---------------------------------------------------------------------------
# checkpoint format: one JSON header line, then raw little-endian float64


def spec_to_dict(spec: ArchSpec) -> dict:
    if isinstance(spec, MultiscaleSpec):
        return {"arch": "multiscale", "d": spec.d, "scales": list(spec.scales)}
    return {"arch": "cnn", "d": spec.d, "channels": spec.channels}


def spec_from_dict(data: dict) -> ArchSpec:
    if data["arch"] == "multiscale":
        return MultiscaleSpec(d=data["d"], scales=tuple(data["scales"]))
    if data["arch"] == "cnn":
        return CnnSpec(d=data["d"], channels=data["channels"])
    raise ConfigurationError(f"unknown architecture {data['arch']!r}")


def save_checkpoint(path, values: np.ndarray, spec: ArchSpec, seed, step: int) -> None:
    header = {"spec": spec_to_dict(spec), "seed": seed, "step": step}
    with open(path, "wb") as handle:
        handle.write(json.dumps(header).encode("utf-8") + b"\n")
        handle.write(np.ascontiguousarray(values, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[np.ndarray, ArchSpec, dict]:
    with open(path, "rb") as handle:
        header = json.loads(handle.readline().decode("utf-8"))
        values = np.frombuffer(handle.read(), dtype="<f8").astype(np.float64)
    spec = spec_from_dict(header["spec"])
    if values.shape[0] != param_count(spec):
        raise ConfigurationError(
            f"checkpoint holds {values.shape[0]} values, spec requires {param_count(spec)}")
    return values, spec, header
