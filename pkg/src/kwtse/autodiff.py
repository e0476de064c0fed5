"""Dense float64 compute layer with reverse-mode gradients.

Arrays are ``torch.float64`` tensors and reverse-mode differentiation is
torch autograd.  What this module adds on top:

* a fixed primitive set (:data:`ops`) that validates shapes, names the
  failing node, and records every call on an optional :class:`Tape`;
* :class:`Graph`, which pairs a module's named parameters with a forward
  function and a seed-reproducible initialisation;
* :func:`grad_check`, an independent central finite-difference oracle;
* a flat little-endian checkpoint format (:func:`save_checkpoint`).
"""

from __future__ import annotations

import contextvars
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping

import numpy as np
import torch
from torch import Tensor, nn

DTYPE = torch.float64
LAYER_NORM_EPS = 1e-5

CHECKPOINT_MAGIC = b"KWTSECKP"
CHECKPOINT_VERSION = 1


class ShapeError(ValueError):
    """Raised when a primitive receives operands of incompatible shape."""


class NonScalarLossError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Tape


@dataclass(frozen=True)
class Node:
    index: int
    op: str
    name: str
    input_shapes: tuple[tuple[int, ...], ...]
    output_shape: tuple[int, ...]
    differentiable: bool = True


@dataclass
class Tape:
    """Records primitive calls made while it is active (``with Tape() as t``)."""

    nodes: list[Node] = field(default_factory=list)
    _token: contextvars.Token | None = None

    def __enter__(self) -> "Tape":
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPE.reset(self._token)

    @property
    def nondifferentiable(self) -> list[Node]:
        return [n for n in self.nodes if not n.differentiable]


_ACTIVE_TAPE: contextvars.ContextVar[Tape | None] = contextvars.ContextVar("tape", default=None)


def _emit(op: str, name: str | None, inputs: Iterable[Tensor], out: Tensor, differentiable: bool = True) -> Tensor:
    tape = _ACTIVE_TAPE.get()
    if tape is not None:
        tape.nodes.append(
            Node(
                index=len(tape.nodes),
                op=op,
                name=name or f"{op}_{len(tape.nodes)}",
                input_shapes=tuple(tuple(t.shape) for t in inputs),
                output_shape=tuple(out.shape),
                differentiable=differentiable,
            )
        )
    return out


def _fail(op: str, name: str | None, expected: str, actual: str) -> None:
    raise ShapeError(f"node {name or op!r} ({op}): expected {expected}, got {actual}")


# ---------------------------------------------------------------------------
# Primitives


def _axis(x: Tensor, axis: int, op: str, name: str | None) -> int:
    if not -x.dim() <= axis < x.dim():
        _fail(op, name, f"axis within rank {x.dim()}", f"axis {axis}")
    return axis


def matmul(a: Tensor, b: Tensor, name: str | None = None) -> Tensor:
    if a.dim() < 1 or b.dim() < 1:
        _fail("matmul", name, "operands of rank >= 1", f"{tuple(a.shape)} @ {tuple(b.shape)}")
    inner_b = b.shape[-2] if b.dim() > 1 else b.shape[0]
    if a.shape[-1] != inner_b:
        _fail("matmul", name, f"inner dimension {a.shape[-1]}", f"{tuple(a.shape)} @ {tuple(b.shape)}")
    return _emit("matmul", name, (a, b), a @ b)


def _broadcast(op: str, a: Tensor, b: Tensor, name: str | None) -> None:
    try:
        torch.broadcast_shapes(a.shape, b.shape)
    except RuntimeError:
        _fail(op, name, "broadcast-compatible shapes", f"{tuple(a.shape)} and {tuple(b.shape)}")


def add(a: Tensor, b: Tensor, name: str | None = None) -> Tensor:
    _broadcast("add", a, b, name)
    return _emit("add", name, (a, b), a + b)


def mul(a: Tensor, b: Tensor, name: str | None = None) -> Tensor:
    _broadcast("mul", a, b, name)
    return _emit("mul", name, (a, b), a * b)


def softmax(x: Tensor, axis: int = -1, name: str | None = None) -> Tensor:
    axis = _axis(x, axis, "softmax", name)
    shifted = x - x.amax(dim=axis, keepdim=True).detach()
    e = torch.exp(shifted)
    return _emit("softmax", name, (x,), e / e.sum(dim=axis, keepdim=True))


def log_softmax(x: Tensor, axis: int = -1, name: str | None = None) -> Tensor:
    axis = _axis(x, axis, "log_softmax", name)
    shifted = x - x.amax(dim=axis, keepdim=True).detach()
    out = shifted - torch.log(torch.exp(shifted).sum(dim=axis, keepdim=True))
    return _emit("log_softmax", name, (x,), out)


def layer_norm(x: Tensor, gain: Tensor | None = None, bias: Tensor | None = None, name: str | None = None) -> Tensor:
    """Normalise the last axis; a constant vector maps to zeros (before affine)."""
    d = x.shape[-1]
    for p in (gain, bias):
        if p is not None and tuple(p.shape) != (d,):
            _fail("layer_norm", name, f"affine shape ({d},)", str(tuple(p.shape)))
    mu = x.mean(dim=-1, keepdim=True)
    var = ((x - mu) ** 2).mean(dim=-1, keepdim=True)
    out = (x - mu) / torch.sqrt(var + LAYER_NORM_EPS)
    if gain is not None:
        out = out * gain
    if bias is not None:
        out = out + bias
    inputs = tuple(t for t in (x, gain, bias) if t is not None)
    return _emit("layer_norm", name, inputs, out)


def gelu(x: Tensor, name: str | None = None) -> Tensor:
    out = 0.5 * x * (1.0 + torch.erf(x / math.sqrt(2.0)))
    return _emit("gelu", name, (x,), out)


def relu(x: Tensor, name: str | None = None) -> Tensor:
    return _emit("relu", name, (x,), torch.clamp(x, min=0.0))


def tanh(x: Tensor, name: str | None = None) -> Tensor:
    return _emit("tanh", name, (x,), torch.tanh(x))


def sigmoid(x: Tensor, name: str | None = None) -> Tensor:
    return _emit("sigmoid", name, (x,), torch.sigmoid(x))


def embedding(table: Tensor, ids: Tensor, name: str | None = None) -> Tensor:
    if table.dim() != 2:
        _fail("embedding", name, "2-D table", str(tuple(table.shape)))
    ids = torch.as_tensor(ids, dtype=torch.long)
    if ids.numel() and (int(ids.min()) < 0 or int(ids.max()) >= table.shape[0]):
        raise IndexError(
            f"node {name or 'embedding'!r} (embedding): ids must lie in [0, {table.shape[0]}), "
            f"got range [{int(ids.min())}, {int(ids.max())}]"
        )
    return _emit("embedding", name, (table,), table[ids])


def mean(x: Tensor, axis: int, mask: Tensor | None = None, name: str | None = None) -> Tensor:
    """Mean over ``axis``; with ``mask`` (broadcastable, 1 = keep) it averages kept entries only."""
    axis = _axis(x, axis, "mean", name)
    if mask is None:
        return _emit("mean", name, (x,), x.mean(dim=axis))
    mask = mask.to(x.dtype)
    _broadcast("mean", x, mask, name)
    total = (x * mask).sum(dim=axis)
    count = mask.expand_as(x).sum(dim=axis).clamp(min=1.0)
    return _emit("mean", name, (x,), total / count)


def concat(xs: list[Tensor], axis: int = -1, name: str | None = None) -> Tensor:
    if not xs:
        _fail("concat", name, "at least one operand", "none")
    rank = xs[0].dim()
    ax = axis % rank
    ref = [s for i, s in enumerate(xs[0].shape) if i != ax]
    for x in xs[1:]:
        other = [s for i, s in enumerate(x.shape) if i != ax]
        if x.dim() != rank or other != ref:
            _fail("concat", name, f"shapes matching {tuple(xs[0].shape)} off axis {axis}", str(tuple(x.shape)))
    return _emit("concat", name, tuple(xs), torch.cat(xs, dim=axis))


def gru(
    x: Tensor,
    weights: list[Tensor],
    hidden: int,
    axis: int = 1,
    bidirectional: bool = True,
    name: str | None = None,
) -> Tensor:
    """Run a gated recurrent cell (reset + update gates) along ``axis`` of a 3-D array.

    ``weights`` holds ``[W_ih, W_hh, b_ih, b_hh]`` per direction in torch's
    packed gate layout.  The other two axes are treated as batch and
    features (features must be last).
    """
    if x.dim() != 3:
        _fail("gru", name, "3-D input", str(tuple(x.shape)))
    axis = _axis(x, axis, "gru", name) % 3
    if axis == 2:
        _fail("gru", name, "time axis other than the feature axis", "axis 2")
    w_ih = weights[0]
    if w_ih.shape != (3 * hidden, x.shape[-1]):
        _fail("gru", name, f"W_ih of shape {(3 * hidden, x.shape[-1])}", str(tuple(w_ih.shape)))
    batch_first = axis == 1
    batch = x.shape[0] if batch_first else x.shape[1]
    h0 = x.new_zeros(2 if bidirectional else 1, batch, hidden)
    out, _ = torch.gru(x, h0, weights, True, 1, 0.0, False, bidirectional, batch_first)
    return _emit("gru", name, (x, *weights), out)


def argmax(x: Tensor, axis: int = -1, name: str | None = None) -> Tensor:
    """Hard argmax.  Recorded as a non-differentiable node."""
    axis = _axis(x, axis, "argmax", name)
    out = torch.argmax(x, dim=axis)
    return _emit("argmax", name, (x,), out, differentiable=False)


class _Ops:
    matmul = staticmethod(matmul)
    add = staticmethod(add)
    mul = staticmethod(mul)
    softmax = staticmethod(softmax)
    log_softmax = staticmethod(log_softmax)
    layer_norm = staticmethod(layer_norm)
    gelu = staticmethod(gelu)
    relu = staticmethod(relu)
    tanh = staticmethod(tanh)
    sigmoid = staticmethod(sigmoid)
    embedding = staticmethod(embedding)
    mean = staticmethod(mean)
    concat = staticmethod(concat)
    gru = staticmethod(gru)
    argmax = staticmethod(argmax)


ops = _Ops()

PRIMITIVES = (
    "matmul", "add", "mul", "softmax", "log_softmax", "layer_norm", "gelu", "relu",
    "tanh", "sigmoid", "embedding", "mean", "concat", "gru",
)


# ---------------------------------------------------------------------------
# Layers


class Linear(nn.Module):
    def __init__(self, fan_in: int, fan_out: int, bias: bool = True):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(fan_out, fan_in, dtype=DTYPE))
        self.bias = nn.Parameter(torch.zeros(fan_out, dtype=DTYPE)) if bias else None

    def forward(self, x: Tensor, name: str | None = None) -> Tensor:
        out = matmul(x, self.weight.transpose(0, 1), name=name)
        if self.bias is not None:
            out = add(out, self.bias, name=name and f"{name}.bias")
        return out


class LayerNorm(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.gain = nn.Parameter(torch.ones(dim, dtype=DTYPE))
        self.bias = nn.Parameter(torch.zeros(dim, dtype=DTYPE))

    def forward(self, x: Tensor, name: str | None = None) -> Tensor:
        return layer_norm(x, self.gain, self.bias, name=name)


class Embedding(nn.Module):
    def __init__(self, count: int, dim: int):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(count, dim, dtype=DTYPE))

    def forward(self, ids: Tensor, name: str | None = None) -> Tensor:
        return embedding(self.weight, ids, name=name)


class GRU(nn.Module):
    """Bidirectional (by default) gated recurrent layer over one axis."""

    def __init__(self, fan_in: int, hidden: int, bidirectional: bool = True):
        super().__init__()
        self.hidden = hidden
        self.bidirectional = bidirectional
        self.directions = 2 if bidirectional else 1
        for d in range(self.directions):
            setattr(self, f"w_ih_{d}", nn.Parameter(torch.empty(3 * hidden, fan_in, dtype=DTYPE)))
            setattr(self, f"w_hh_{d}", nn.Parameter(torch.empty(3 * hidden, hidden, dtype=DTYPE)))
            setattr(self, f"b_ih_{d}", nn.Parameter(torch.zeros(3 * hidden, dtype=DTYPE)))
            setattr(self, f"b_hh_{d}", nn.Parameter(torch.zeros(3 * hidden, dtype=DTYPE)))

    @property
    def out_dim(self) -> int:
        return self.hidden * self.directions

    def forward(self, x: Tensor, axis: int = 1, name: str | None = None) -> Tensor:
        weights = []
        for d in range(self.directions):
            weights += [getattr(self, f"{k}_{d}") for k in ("w_ih", "w_hh", "b_ih", "b_hh")]
        return gru(x, weights, self.hidden, axis=axis, bidirectional=self.bidirectional, name=name)


class MultiHeadAttention(nn.Module):
    """Scaled dot-product attention; returns outputs and head-averaged weights."""

    def __init__(self, dim: int, heads: int, kv_dim: int | None = None):
        super().__init__()
        if dim % heads:
            raise ValueError(f"width {dim} not divisible by {heads} heads")
        kv_dim = kv_dim or dim
        self.heads = heads
        self.q = Linear(dim, dim)
        # a key bias only shifts every score of a query equally, so it is omitted
        self.k = Linear(kv_dim, dim, bias=False)
        self.v = Linear(kv_dim, dim)
        self.o = Linear(dim, dim)

    def forward(
        self,
        query: Tensor,
        memory: Tensor,
        key_mask: Tensor | None = None,
        name: str = "attn",
    ) -> tuple[Tensor, Tensor]:
        """``query`` (B, Tq, D), ``memory`` (B, Tk, Dkv), ``key_mask`` (B, Tk) with 1 = valid."""
        b, tq, d = query.shape
        tk = memory.shape[1]
        h = self.heads
        q = self.q(query, name=f"{name}.q").view(b, tq, h, d // h).transpose(1, 2)
        k = self.k(memory, name=f"{name}.k").view(b, tk, h, d // h).transpose(1, 2)
        v = self.v(memory, name=f"{name}.v").view(b, tk, h, d // h).transpose(1, 2)
        scores = matmul(q, k.transpose(-1, -2), name=f"{name}.scores") / math.sqrt(d // h)
        if key_mask is not None:
            scores = scores.masked_fill(~key_mask.bool()[:, None, None, :], -1e30)
        weights = softmax(scores, axis=-1, name=f"{name}.softmax")
        ctx = matmul(weights, v, name=f"{name}.context").transpose(1, 2).reshape(b, tq, d)
        return self.o(ctx, name=f"{name}.out"), weights.mean(dim=1)


# ---------------------------------------------------------------------------
# Initialisation and graphs


def init_parameters(module: nn.Module, seed: int) -> None:
    """Xavier-uniform matrices, zero biases, unit gains; identical seeds give identical values."""
    gen = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for pname, p in module.named_parameters():
            leaf = pname.rsplit(".", 1)[-1]
            if leaf.startswith("b") and p.dim() == 1:
                p.zero_()
            elif leaf == "gain":
                p.fill_(1.0)
            elif p.dim() >= 2:
                fan_out, fan_in = p.shape[0], int(np.prod(p.shape[1:]))
                a = math.sqrt(6.0 / (fan_in + fan_out))
                p.copy_(torch.rand(p.shape, generator=gen, dtype=DTYPE) * 2 * a - a)
        for sub in module.modules():
            hook = getattr(sub, "reset_special_parameters", None)
            if hook is not None:
                hook()


class Graph:
    """Named parameters (owned by ``module``) plus a forward function.

    ``forward(module, **inputs)`` must return a dict of named outputs.
    ``signature`` maps input names to shapes; ``None`` entries match any size.
    """

    def __init__(
        self,
        module: nn.Module,
        forward: Callable[..., Mapping[str, Tensor]],
        signature: Mapping[str, tuple[int | None, ...]] | None = None,
        seed: int = 0,
        initialise: bool = True,
    ):
        self.module = module
        self.forward = forward
        self.signature = dict(signature or {})
        self.rng_seed = int(seed)
        if initialise:
            init_parameters(module, seed)

    @property
    def parameters(self) -> dict[str, Tensor]:
        return dict(self.module.named_parameters())

    def check_inputs(self, inputs: Mapping[str, Tensor]) -> None:
        for key, shape in self.signature.items():
            if key not in inputs:
                raise ShapeError(f"input {key!r}: expected shape {shape}, got nothing")
            actual = tuple(torch.as_tensor(inputs[key]).shape)
            if len(actual) != len(shape) or any(e is not None and e != a for e, a in zip(shape, actual)):
                raise ShapeError(f"input {key!r}: expected shape {shape}, got {actual}")


def evaluate(graph: Graph, inputs: Mapping[str, Tensor], tape: Tape | None = None) -> dict[str, Tensor]:
    graph.check_inputs(inputs)
    if tape is None:
        return dict(graph.forward(graph.module, **inputs))
    with tape:
        return dict(graph.forward(graph.module, **inputs))


def gradients(graph: Graph, inputs: Mapping[str, Tensor], loss: str = "loss") -> dict[str, Tensor]:
    """Gradient of the scalar output ``loss`` with respect to every parameter."""
    out = evaluate(graph, inputs)[loss]
    if out.numel() != 1:
        raise NonScalarLossError(f"loss {loss!r} has shape {tuple(out.shape)}; a scalar is required")
    params = graph.parameters
    grads = torch.autograd.grad(out.reshape(()), list(params.values()), allow_unused=True)
    return {
        k: (g if g is not None else torch.zeros_like(p)).detach()
        for (k, p), g in zip(params.items(), grads)
    }


@dataclass
class GradCheckReport:
    errors: dict[str, float]
    tolerance: float
    nondifferentiable: list[str]

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return not self.nondifferentiable and self.max_error < self.tolerance

    def summary(self) -> str:
        lines = [f"{name:<48s} {err:.3e}" for name, err in self.errors.items()]
        if self.nondifferentiable:
            lines.append("non-differentiable nodes: " + ", ".join(self.nondifferentiable))
        lines.append(f"{'PASS' if self.passed else 'FAIL'} (max {self.max_error:.3e}, tol {self.tolerance:.1e})")
        return "\n".join(lines)


def grad_check(
    graph: Graph,
    inputs: Mapping[str, Tensor],
    tolerance: float = 1e-5,
    loss: str = "loss",
    step: float = 1e-5,
    max_entries: int | None = None,
    seed: int = 0,
) -> GradCheckReport:
    """Compare autograd against central finite differences.

    The per-parameter error is ``max|analytic - numeric| / max(max|analytic|,
    max|numeric|)``, i.e. the worst deviation relative to the gradient's scale.
    ``max_entries`` limits the probed coordinates per parameter (sampled).
    """
    tape = Tape()
    with torch.no_grad():
        evaluate(graph, inputs, tape=tape)
    flagged = [n.name for n in tape.nondifferentiable]

    analytic = gradients(graph, inputs, loss)
    rng = np.random.default_rng(seed)
    errors: dict[str, float] = {}
    with torch.no_grad():
        for pname, p in graph.parameters.items():
            flat = p.view(-1)
            idx = np.arange(flat.numel())
            if max_entries is not None and flat.numel() > max_entries:
                idx = np.sort(rng.choice(flat.numel(), size=max_entries, replace=False))
            numeric = np.empty(len(idx))
            for n, i in enumerate(idx):
                orig = flat[i].item()
                flat[i] = orig + step
                up = evaluate(graph, inputs)[loss].item()
                flat[i] = orig - step
                down = evaluate(graph, inputs)[loss].item()
                flat[i] = orig
                numeric[n] = (up - down) / (2 * step)
            a = analytic[pname].reshape(-1).numpy()[idx]
            scale = max(np.abs(a).max(initial=0.0), np.abs(numeric).max(initial=0.0))
            errors[pname] = 0.0 if scale == 0.0 else float(np.abs(a - numeric).max() / scale)
    return GradCheckReport(errors=errors, tolerance=tolerance, nondifferentiable=flagged)


# ---------------------------------------------------------------------------
# Checkpoints
#
# Layout (all integers little-endian):
#   magic "KWTSECKP" | u32 version | u32 parameter count
#   per parameter: u32 name length | UTF-8 name | u32 rank | u64 dims[rank] | f64 payload


def save_checkpoint(path: str | Path, params: Mapping[str, Tensor]) -> None:
    chunks = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(params))]
    for name, value in params.items():
        arr = np.ascontiguousarray(torch.as_tensor(value).detach().cpu().numpy(), dtype="<f8")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)) + raw)
        chunks.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(arr.tobytes(order="C"))
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path: str | Path) -> dict[str, Tensor]:
    blob = Path(path).read_bytes()
    if blob[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {blob[:8]!r}")
    version, count = struct.unpack_from("<II", blob, 8)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    pos = 16
    out: dict[str, Tensor] = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        name = blob[pos:pos + n].decode("utf-8")
        pos += n
        (rank,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        dims = struct.unpack_from(f"<{rank}Q", blob, pos)
        pos += 8 * rank
        size = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(blob, dtype="<f8", count=size, offset=pos).reshape(dims)
        pos += 8 * size
        out[name] = torch.from_numpy(arr.astype(np.float64))
    if pos != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - pos} trailing bytes")
    return out


def load_into(module: nn.Module, params: Mapping[str, Tensor]) -> None:
    own = dict(module.named_parameters())
    missing = sorted(set(own) - set(params))
    extra = sorted(set(params) - set(own))
    if missing or extra:
        raise CheckpointError(f"parameter mismatch: missing {missing}, unexpected {extra}")
    with torch.no_grad():
        for name, p in own.items():
            if tuple(params[name].shape) != tuple(p.shape):
                raise CheckpointError(f"{name}: shape {tuple(params[name].shape)} != {tuple(p.shape)}")
            p.copy_(params[name])


def parameter_digest(module: nn.Module) -> str:
    """SHA-256 over names and raw bytes of every parameter (freeze/determinism checks)."""
    import hashlib

    h = hashlib.sha256()
    for name, p in module.named_parameters():
        h.update(name.encode())
        h.update(p.detach().cpu().numpy().astype("<f8").tobytes())
    return h.hexdigest()
