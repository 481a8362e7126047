"""Tensor primitives, reverse-mode gradients, AdamW, LR schedules and checkpoints.

Tensors are ``torch.Tensor`` objects (float32 by default, row-major, with the
autograd graph recorded on the fly).  The wrappers here validate shapes and pin
the conventions the rest of the package relies on.
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

CHECKPOINT_SCHEMA = 1
DEFAULT_DTYPE = torch.float64 if os.environ.get("LCBYOL_FLOAT64") == "1" else torch.float32


class NonFiniteGradientError(FloatingPointError):
    pass


def conv2d(x, kernel, bias=None, stride=1, padding=0, dilation=1):
    if x.dim() != 4 or kernel.dim() != 4:
        raise ValueError(f"conv2d expects NCHW input and OIKK kernel, got {tuple(x.shape)} and {tuple(kernel.shape)}")
    if kernel.shape[1] != x.shape[1]:
        raise ValueError(
            f"conv2d channel mismatch: input has {x.shape[1]} channels, kernel expects {kernel.shape[1]}")
    kh, kw = kernel.shape[2:]
    for size, k in zip(x.shape[2:], (kh, kw)):
        if size + 2 * padding - dilation * (k - 1) - 1 < 0:
            raise ValueError(f"conv2d: spatial size {size} with padding {padding} admits no kernel placement")
    return F.conv2d(x, kernel, bias, stride=stride, padding=padding, dilation=dilation)


def conv_output_size(size: int, k: int, stride=1, padding=0, dilation=1) -> int:
    return (size + 2 * padding - dilation * (k - 1) - 1) // stride + 1


def bilinear_upsample(x, factor: int):
    """Half-pixel-centred bilinear upsampling by an integer factor.

    For odd factors, output pixel ``factor*i + factor//2`` reproduces input pixel ``i``.
    """
    if factor < 1:
        raise ValueError(f"upsample factor must be >= 1, got {factor}")
    if factor == 1:
        return x
    return F.interpolate(x, scale_factor=factor, mode="bilinear", align_corners=False)


def resize(x, size):
    size = tuple(size)
    if tuple(x.shape[-2:]) == size:
        return x
    return F.interpolate(x, size=size, mode="bilinear", align_corners=False)


def batchnorm2d(x, scale, shift, running_mean, running_var, training: bool,
                momentum=0.1, eps=1e-5, update_running=True):
    """Batch normalisation over (N, H, W) per channel.

    In training mode the running statistics (plain tensors, updated in place)
    track the batch mean and unbiased variance.  A channel with a single
    element has zero batch variance; eps keeps the division finite.
    """
    c = x.shape[1]
    if scale.shape[0] != c or shift.shape[0] != c:
        raise ValueError(f"batchnorm2d: {c} channels but parameters of length {scale.shape[0]}")
    shape = (1, c, 1, 1)
    if training:
        n = x.numel() // c
        mean = x.mean(dim=(0, 2, 3))
        var = ((x - mean.view(shape)) ** 2).mean(dim=(0, 2, 3))
        if update_running and running_mean is not None:
            with torch.no_grad():
                unbiased = var * (n / (n - 1)) if n > 1 else var
                running_mean.mul_(1 - momentum).add_(mean.detach(), alpha=momentum)
                running_var.mul_(1 - momentum).add_(unbiased.detach(), alpha=momentum)
    else:
        mean, var = running_mean, running_var
    inv = torch.rsqrt(var + eps)
    return (x - mean.view(shape)) * (inv * scale).view(shape) + shift.view(shape)


def backward(loss, retain_graph=True):
    """Populate ``.grad`` of every leaf that requires it.

    Gradients accumulate across calls; the graph is kept so the same loss can be
    back-propagated again.
    """
    if loss.numel() != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    loss.reshape(()).backward(retain_graph=retain_graph)


class Conv2d(nn.Module):
    def __init__(self, cin, cout, k=3, stride=1, padding=None, dilation=1, bias=True):
        super().__init__()
        if padding is None:
            padding = dilation * (k // 2)
        self.stride, self.padding, self.dilation = stride, padding, dilation
        self.weight = nn.Parameter(torch.empty(cout, cin, k, k, dtype=DEFAULT_DTYPE))
        nn.init.kaiming_uniform_(self.weight, a=math.sqrt(5))
        if bias:
            bound = 1 / math.sqrt(cin * k * k)
            self.bias = nn.Parameter(torch.empty(cout, dtype=DEFAULT_DTYPE).uniform_(-bound, bound))
        else:
            self.bias = None

    def forward(self, x):
        return conv2d(x, self.weight, self.bias, self.stride, self.padding, self.dilation)


class BatchNorm2d(nn.Module):
    def __init__(self, c, momentum=0.1, eps=1e-5):
        super().__init__()
        self.momentum, self.eps = momentum, eps
        self.update_running = True
        self.weight = nn.Parameter(torch.ones(c, dtype=DEFAULT_DTYPE))
        self.bias = nn.Parameter(torch.zeros(c, dtype=DEFAULT_DTYPE))
        self.register_buffer("running_mean", torch.zeros(c, dtype=DEFAULT_DTYPE))
        self.register_buffer("running_var", torch.ones(c, dtype=DEFAULT_DTYPE))

    def forward(self, x):
        if x.dim() == 2:
            return self.forward(x[:, :, None, None])[:, :, 0, 0]
        return batchnorm2d(x, self.weight, self.bias, self.running_mean, self.running_var,
                           self.training, self.momentum, self.eps, self.update_running)


class Linear(nn.Module):
    def __init__(self, cin, cout):
        super().__init__()
        bound = 1 / math.sqrt(cin)
        self.weight = nn.Parameter(torch.empty(cout, cin, dtype=DEFAULT_DTYPE).uniform_(-bound, bound))
        self.bias = nn.Parameter(torch.empty(cout, dtype=DEFAULT_DTYPE).uniform_(-bound, bound))

    def forward(self, x):
        return x @ self.weight.t() + self.bias


# ---------------------------------------------------------------- optimiser


class AdamW:
    """AdamW with decoupled weight decay and bias-corrected moments."""

    def __init__(self, params: Iterable[torch.Tensor], lr=1e-3, betas=(0.9, 0.999), eps=1e-8,
                 weight_decay=0.01):
        self.params = [p for p in params if p.requires_grad]
        self.lr, self.betas, self.eps, self.weight_decay = lr, betas, eps, weight_decay
        self.step_count = 0
        self.exp_avg = [torch.zeros_like(p) for p in self.params]
        self.exp_avg_sq = [torch.zeros_like(p) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    @torch.no_grad()
    def step(self, grad_scale: float = 1.0):
        grads = [p.grad if p.grad is not None else torch.zeros_like(p) for p in self.params]
        for i, g in enumerate(grads):
            if not torch.isfinite(g).all():
                raise NonFiniteGradientError(f"non-finite gradient in parameter {i} {tuple(g.shape)}; step rejected")
        self.step_count += 1
        b1, b2 = self.betas
        bc1 = 1 - b1 ** self.step_count
        bc2 = 1 - b2 ** self.step_count
        for p, g, m, v in zip(self.params, grads, self.exp_avg, self.exp_avg_sq):
            if grad_scale != 1.0:
                g = g * grad_scale
            p.mul_(1 - self.lr * self.weight_decay)
            m.mul_(b1).add_(g, alpha=1 - b1)
            v.mul_(b2).addcmul_(g, g, value=1 - b2)
            denom = (v / bc2).sqrt_().add_(self.eps)
            p.addcdiv_(m, denom, value=-self.lr / bc1)


def adamw_step(params, grads, state: AdamW):
    """Functional form: assign ``grads`` to ``params`` and take one step."""
    for p, g in zip(params, grads):
        p.grad = g
    state.step()
    return params, state


# ---------------------------------------------------------------- schedules


@dataclass
class LrSchedule:
    kind: str = "cosine"  # "cosine" | "plateau"
    warmup_epochs: int = 10
    base_lr: float = 1e-3
    floor_lr: float = 0.0
    total_epochs: int = 300
    warmup_start_lr: float = 0.0
    patience: int = 10
    factor: float = 0.1
    min_delta: float = 1e-6

    def __post_init__(self):
        if self.kind not in ("cosine", "plateau"):
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if self.warmup_epochs < 0:
            raise ValueError("warmup_epochs must be >= 0")
        if not 0 < self.factor < 1:
            raise ValueError("decay factor must lie in (0, 1)")


def plateau_events(history: Sequence[float], patience: int, min_delta=1e-6) -> list[int]:
    """Indices into ``history`` at which a plateau decay fires.

    The first value sets the best; a value improves only if it is lower than the
    best by at least ``min_delta``.  After ``patience`` consecutive stagnant
    epochs a decay fires and the counter resets.
    """
    events, best, bad = [], math.inf, 0
    for i, v in enumerate(history):
        if v < best - min_delta:
            best, bad = v, 0
        else:
            bad += 1
            if bad >= patience:
                events.append(i)
                bad = 0
    return events


def epochs_since_improvement(history: Sequence[float], min_delta=1e-6) -> int:
    best, bad = math.inf, 0
    for v in history:
        if v < best - min_delta:
            best, bad = v, 0
        else:
            bad += 1
    return bad


def lr_at(schedule: LrSchedule, epoch: int, history: Sequence[float] = ()) -> float:
    """Learning rate for ``epoch`` given validation losses of the epochs before it."""
    s = schedule
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    if epoch < s.warmup_epochs:
        return s.warmup_start_lr + (s.base_lr - s.warmup_start_lr) * epoch / s.warmup_epochs
    if s.kind == "cosine":
        span = s.total_epochs - 1 - s.warmup_epochs
        if span <= 0:
            return s.base_lr if epoch == s.warmup_epochs and span == 0 else s.floor_lr
        t = min(epoch - s.warmup_epochs, span) / span
        return s.floor_lr + (s.base_lr - s.floor_lr) * 0.5 * (1 + math.cos(math.pi * t))
    n = len(plateau_events(list(history)[:epoch], s.patience, s.min_delta))
    return s.base_lr * s.factor ** n


# ---------------------------------------------------------------- checkpoints


def _safe_name(name: str) -> str:
    return name.replace("/", "_")


def save_checkpoint(path, tensors: dict, meta: dict | None = None):
    """Write ``manifest.json`` plus one little-endian float32 buffer per tensor."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, (name, t) in enumerate(tensors.items()):
        arr = np.ascontiguousarray(t.detach().cpu().numpy().astype("<f4"))
        fname = f"{i:04d}_{_safe_name(name)}.bin"
        arr.tofile(path / fname)
        entries.append({"name": name, "shape": list(arr.shape), "file": fname})
    manifest = {"schema_version": CHECKPOINT_SCHEMA, "dtype": "float32", "tensors": entries,
                "meta": meta or {}}
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def load_checkpoint(path):
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    if manifest.get("schema_version") != CHECKPOINT_SCHEMA:
        raise ValueError(f"{path}: unsupported checkpoint schema {manifest.get('schema_version')}")
    tensors = {}
    for e in manifest["tensors"]:
        arr = np.fromfile(path / e["file"], dtype="<f4")
        expected = int(np.prod(e["shape"])) if e["shape"] else 1
        if arr.size != expected:
            raise ValueError(f"{path / e['file']}: {arr.size} values, manifest says {expected}")
        tensors[e["name"]] = torch.from_numpy(arr.reshape(e["shape"]).astype(np.float32))
    return tensors, manifest["meta"]


def module_tensors(module: nn.Module, prefix="") -> dict:
    return {prefix + k: v for k, v in module.state_dict().items()}


def load_module_tensors(module: nn.Module, tensors: dict, prefix=""):
    state = module.state_dict()
    missing = [k for k in state if prefix + k not in tensors]
    if missing:
        raise ValueError(f"checkpoint lacks {len(missing)} tensors, e.g. {missing[:3]}")
    new = {}
    for k, v in state.items():
        t = tensors[prefix + k]
        if tuple(t.shape) != tuple(v.shape):
            raise ValueError(f"shape mismatch for {k}: checkpoint {tuple(t.shape)} vs model {tuple(v.shape)}")
        new[k] = t.to(v.dtype)
    module.load_state_dict(new)


# ---------------------------------------------------------------- gradient checks


@dataclass
class GradCheckResult:
    rel_error: float
    analytic: np.ndarray = field(repr=False)
    numeric: np.ndarray = field(repr=False)


def relative_error(a, b) -> float:
    a, b = np.asarray(a, np.float64).ravel(), np.asarray(b, np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def finite_difference(fn: Callable[[], torch.Tensor], tensor: torch.Tensor, indices, eps=1e-6):
    """Central differences of the scalar ``fn()`` w.r.t. selected flat entries of ``tensor``."""
    out = []
    flat = tensor.data.view(-1)
    with torch.no_grad():
        for i in indices:
            orig = flat[i].item()
            flat[i] = orig + eps
            up = float(fn())
            flat[i] = orig - eps
            down = float(fn())
            flat[i] = orig
            out.append((up - down) / (2 * eps))
    return np.array(out)


def gradcheck(fn: Callable[[Sequence[torch.Tensor]], torch.Tensor], inputs: Sequence[torch.Tensor],
              n_samples: int | None = None, seed=0, eps=1e-6) -> GradCheckResult:
    """Compare autograd gradients of ``fn(inputs)`` with float64 central differences.

    The analytic gradient is taken at the inputs' own precision; the numeric
    oracle runs on float64 copies.  ``n_samples`` limits the number of
    coordinates probed per input.
    """
    inputs = [t.detach().clone().requires_grad_(True) for t in inputs]
    loss = fn(inputs)
    grads = torch.autograd.grad(loss, inputs, allow_unused=True)
    doubles = [t.detach().double().clone() for t in inputs]
    rng = np.random.default_rng(seed)
    analytic, numeric = [], []
    for k, (t, g) in enumerate(zip(doubles, grads)):
        n = t.numel()
        idx = np.arange(n) if n_samples is None or n <= n_samples else rng.choice(n, n_samples, replace=False)
        g = torch.zeros_like(t) if g is None else g
        analytic.append(g.detach().double().reshape(-1)[idx].numpy())
        numeric.append(finite_difference(lambda: fn(doubles), t, idx, eps))
    a, b = np.concatenate(analytic), np.concatenate(numeric)
    return GradCheckResult(relative_error(a, b), a, b)


def module_gradcheck(module: nn.Module, x: torch.Tensor, loss_fn: Callable[[torch.Tensor], torch.Tensor],
                     n_samples=24, seed=0, eps=1e-6) -> GradCheckResult:
    """Gradient check over a module's parameters and its input.

    ``n_samples`` coordinates are drawn from every parameter tensor and from the
    input; the numeric side runs on a float64 deep copy of the module.
    """
    import copy

    module.zero_grad(set_to_none=True)
    x32 = x.detach().clone().requires_grad_(True)
    backward(loss_fn(module(x32)), retain_graph=False)
    twin = copy.deepcopy(module).double()
    x64 = x.detach().double().clone()
    rng = np.random.default_rng(seed)
    pairs = [(x32.grad, x64)] + [(p.grad, q.data) for p, q in zip(module.parameters(), twin.parameters())]
    analytic, numeric = [], []
    for g, t in pairs:
        n = t.numel()
        idx = np.arange(n) if n <= n_samples else rng.choice(n, n_samples, replace=False)
        g = torch.zeros_like(t) if g is None else g
        analytic.append(g.detach().double().reshape(-1)[idx].numpy())
        numeric.append(finite_difference(lambda: loss_fn(twin(x64)), t, idx, eps))
    a, b = np.concatenate(analytic), np.concatenate(numeric)
    return GradCheckResult(relative_error(a, b), a, b)
