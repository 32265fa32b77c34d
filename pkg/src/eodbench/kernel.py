"""Differentiable primitives, parameter store, Adam, RNG streams and gradient checks.

Reverse-mode differentiation is delegated to torch autograd; everything in
here works on plain ``torch.Tensor`` objects in float64 unless a float32
dtype is requested explicitly.
"""

from __future__ import annotations

import hashlib
import io
import json
import logging
import math
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping

import numpy as np
import torch
import torch.nn.functional as F

log = logging.getLogger(__name__)

DTYPE = torch.float64
MODES = ("train", "eval", "mc")


class ShapeError(ValueError):
    pass


class ConfigError(ValueError):
    pass


def as_tensor(x, dtype=DTYPE) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x if x.dtype == dtype else x.to(dtype)
    return torch.as_tensor(np.asarray(x), dtype=dtype)


def linear(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None) -> torch.Tensor:
    """``x @ weight + bias`` with ``weight`` stored as (in, out)."""
    if weight.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"linear: input {tuple(x.shape)} incompatible with weight {tuple(weight.shape)}")
    if bias is None:
        return x @ weight
    if bias.shape != (weight.shape[1],):
        raise ShapeError(f"linear: bias {tuple(bias.shape)} does not match weight {tuple(weight.shape)}")
    return torch.nn.functional.linear(x, weight.T, bias)


def layer_norm(x: torch.Tensor, gain: torch.Tensor, shift: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    if gain.shape != x.shape[-1:] or shift.shape != x.shape[-1:]:
        raise ShapeError(
            f"layer_norm: input {tuple(x.shape)} incompatible with gain {tuple(gain.shape)}, "
            f"shift {tuple(shift.shape)}"
        )
    return F.layer_norm(x, x.shape[-1:], gain, shift, eps)


def gelu(x: torch.Tensor) -> torch.Tensor:
    """Exact (erf) GELU."""
    return F.gelu(x)


def relu(x: torch.Tensor) -> torch.Tensor:
    return F.relu(x)


def softmax_attention(q, k, v, key_mask=None, causal=False):
    """Scaled dot-product attention on (..., T, d) tensors.

    ``key_mask`` is boolean (..., Tk), True for valid keys. Returns the output
    and the attention weights; masked keys get weight exactly 0.
    """
    d = q.shape[-1]
    scores = q @ k.transpose(-1, -2) / math.sqrt(d)
    allowed = None
    if key_mask is not None:
        allowed = key_mask[..., None, :]
    if causal:
        tq, tk = scores.shape[-2], scores.shape[-1]
        tri = torch.ones(tq, tk, dtype=torch.bool, device=scores.device).tril()
        allowed = tri if allowed is None else allowed & tri
    if allowed is not None:
        scores = scores.masked_fill(~allowed, float("-inf"))
    w = torch.softmax(scores, dim=-1)
    return w @ v, w


def multi_head_attention(
    queries: torch.Tensor,
    keys: torch.Tensor,
    values: torch.Tensor,
    params: Mapping[str, torch.Tensor],
    n_heads: int,
    mask: torch.Tensor | None = None,
    causal: bool = False,
    return_weights: bool = False,
):
    """Multi-head attention over (B, T, h) inputs.

    ``params`` holds ``wq, bq, wk, bk, wv, bv, wo, bo``. ``mask`` is a
    boolean (B, Tk) key-validity mask.
    """
    h = queries.shape[-1]
    if h % n_heads:
        raise ConfigError(f"model dimension {h} not divisible by {n_heads} heads")
    if keys.shape[-1] != h or values.shape[-1] != h:
        raise ShapeError(
            f"attention: query dim {h}, key {tuple(keys.shape)}, value {tuple(values.shape)}"
        )
    dh = h // n_heads

    def heads(x):
        return x.reshape(*x.shape[:-1], n_heads, dh).transpose(-2, -3)

    q = heads(linear(queries, params["wq"], params["bq"]))
    k = heads(linear(keys, params["wk"], params["bk"]))
    v = heads(linear(values, params["wv"], params["bv"]))
    m = None if mask is None else mask[..., None, :]
    out, w = softmax_attention(q, k, v, key_mask=m, causal=causal)
    out = out.transpose(-2, -3).reshape(*queries.shape[:-1], h)
    out = linear(out, params["wo"], params["bo"])
    return (out, w) if return_weights else out


def dropout(x: torch.Tensor, p: float, mode: str, rng: torch.Generator | None = None) -> torch.Tensor:
    if mode not in MODES:
        raise ConfigError(f"unknown mode {mode!r}")
    if not 0 <= p < 1:
        raise ConfigError(f"dropout probability must lie in [0, 1), got {p}")
    if mode == "eval" or p == 0:
        return x
    keep = torch.empty_like(x).bernoulli_(1.0 - p, generator=rng)
    return x * keep.mul_(1.0 / (1.0 - p))


def sinusoidal_position(values, dim: int, max_period: float = 10000.0, dtype=DTYPE) -> torch.Tensor:
    """Interleaved ``[sin, cos]`` features of each scalar at geometric frequencies."""
    if dim % 2:
        raise ConfigError(f"positional dimension must be even, got {dim}")
    pos = as_tensor(values, dtype)
    freqs = torch.exp(-math.log(max_period) * torch.arange(0, dim, 2, dtype=dtype) / dim)
    ang = pos[..., None] * freqs
    out = torch.stack([torch.sin(ang), torch.cos(ang)], dim=-1)
    return out.reshape(*pos.shape, dim)


class KernelRng:
    """Counter-based stream: each draw seeds a fresh generator from (seed, counter)."""

    def __init__(self, seed: int = 0, counter: int = 0):
        self.seed = int(seed)
        self.counter = int(counter)

    def generator(self) -> torch.Generator:
        g = torch.Generator()
        g.manual_seed(derive_seed(self.seed, self.counter))
        self.counter += 1
        return g

    def numpy(self) -> np.random.Generator:
        g = np.random.default_rng(np.random.SeedSequence([self.seed, self.counter]))
        self.counter += 1
        return g

    def state(self) -> dict:
        return {"seed": self.seed, "counter": self.counter}


def derive_seed(seed: int, counter: int) -> int:
    return int(np.random.SeedSequence([int(seed), int(counter)]).generate_state(1, np.uint64)[0] >> 1)


class ParamStore:
    """Named parameters in insertion order, plus Adam moments."""

    def __init__(self, dtype=DTYPE):
        self.dtype = dtype
        self.params: OrderedDict[str, torch.Tensor] = OrderedDict()
        self.m: dict[str, torch.Tensor] = {}
        self.v: dict[str, torch.Tensor] = {}
        self.step = 0

    def add(self, name: str, value) -> torch.Tensor:
        if name in self.params:
            raise KeyError(f"duplicate parameter {name!r}")
        t = as_tensor(value, self.dtype).detach().clone().requires_grad_(True)
        self.params[name] = t
        self.m[name] = torch.zeros_like(t)
        self.v[name] = torch.zeros_like(t)
        return t

    def __getitem__(self, name: str) -> torch.Tensor:
        return self.params[name]

    def __contains__(self, name):
        return name in self.params

    def __iter__(self):
        return iter(self.params)

    def __len__(self):
        return len(self.params)

    def items(self):
        return self.params.items()

    def scope(self, prefix: str) -> dict[str, torch.Tensor]:
        p = prefix + "."
        return {k[len(p):]: v for k, v in self.params.items() if k.startswith(p)}

    def n_params(self) -> int:
        return sum(t.numel() for t in self.params.values())

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    def clone(self) -> "ParamStore":
        out = ParamStore(self.dtype)
        for k, t in self.params.items():
            out.add(k, t.detach())
            out.m[k] = self.m[k].clone()
            out.v[k] = self.v[k].clone()
        out.step = self.step
        return out

    def load_values(self, other: "ParamStore"):
        with torch.no_grad():
            for k, t in self.params.items():
                t.copy_(other.params[k])
                self.m[k] = other.m[k].clone()
                self.v[k] = other.v[k].clone()
        self.step = other.step

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: t.detach().cpu().numpy().copy() for k, t in self.params.items()}


def adam_step(
    store: ParamStore, lr: float = 1e-4, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8
) -> list[str]:
    """Bias-corrected Adam update in place. Returns names whose update was rejected."""
    store.step += 1
    c1 = 1 - beta1 ** store.step
    c2 = 1 - beta2 ** store.step
    rejected = []
    with torch.no_grad():
        for name, p in store.params.items():
            g = p.grad
            if g is None:
                continue
            if not torch.isfinite(g).all():
                log.warning("adam: non-finite gradient for %s, update skipped", name)
                rejected.append(name)
                continue
            m = store.m[name].mul_(beta1).add_(g, alpha=1 - beta1)
            v = store.v[name].mul_(beta2).addcmul_(g, g, value=1 - beta2)
            p.sub_(lr * (m / c1) / (torch.sqrt(v / c2) + eps))
    return rejected


def clip_grad_norm(store: ParamStore, max_norm: float) -> float:
    grads = [p.grad for p in store.params.values() if p.grad is not None]
    total = math.sqrt(sum(float((g ** 2).sum()) for g in grads))
    if total > max_norm:
        for g in grads:
            g.mul_(max_norm / (total + 1e-12))
    return total


@dataclass
class GradCheckReport:
    max_rel_error: dict[str, float] = field(default_factory=dict)

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)

    def passed(self, tol: float) -> bool:
        return self.worst < tol


def grad_check(
    fn: Callable[[dict[str, torch.Tensor]], torch.Tensor],
    inputs: Mapping[str, object],
    step: float = 1e-5,
    max_entries: int | None = None,
    seed: int = 0,
    abs_floor: float = 1e-5,
) -> GradCheckReport:
    """Compare autograd gradients of scalar ``fn(inputs)`` with central differences.

    The error for one input is ``max|analytic - numeric| / max(max|analytic|, max|numeric|)``
    over the checked entries. ``max_entries`` caps how many entries per input
    are perturbed (chosen at random); ``None`` checks all of them. The
    denominator never drops below ``abs_floor``, so inputs whose true gradient
    is zero (e.g. attention key biases, which softmax cancels) compare
    round-off against round-off without reporting a spurious failure.
    """
    base = {k: as_tensor(v).detach().clone() for k, v in inputs.items()}
    leaves = {k: v.clone().requires_grad_(True) for k, v in base.items()}
    out = fn(leaves)
    if out.numel() != 1:
        raise ShapeError(f"grad_check needs a scalar function, got shape {tuple(out.shape)}")
    grads = torch.autograd.grad(out, list(leaves.values()), allow_unused=True)
    rng = np.random.default_rng(seed)
    report = GradCheckReport()
    with torch.no_grad():
        for (name, x0), g in zip(base.items(), grads):
            analytic = torch.zeros_like(x0) if g is None else g
            n = x0.numel()
            idx = np.arange(n)
            if max_entries is not None and n > max_entries:
                idx = rng.choice(n, size=max_entries, replace=False)
            num = np.empty(len(idx))
            ana = analytic.reshape(-1)[idx].cpu().numpy()
            for j, flat in enumerate(idx):
                def f_at(delta):
                    x = x0.clone()
                    x.view(-1)[flat] += delta
                    args = dict(base)
                    args[name] = x
                    return float(fn(args))
                num[j] = (f_at(step) - f_at(-step)) / (2 * step)
            scale = max(np.abs(ana).max(initial=0.0), np.abs(num).max(initial=0.0))
            err = np.abs(ana - num).max(initial=0.0)
            report.max_rel_error[name] = float(err / max(scale, abs_floor))
    return report


def fingerprint(config: Mapping) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()[:16]


def save_checkpoint(path, store: ParamStore, rng: KernelRng, config: Mapping, extra: Mapping | None = None):
    """Write parameters, Adam moments, RNG state and config to one ``.npz`` file."""
    arrays = {}
    for k, t in store.params.items():
        arrays[f"param/{k}"] = t.detach().cpu().numpy()
        arrays[f"m/{k}"] = store.m[k].cpu().numpy()
        arrays[f"v/{k}"] = store.v[k].cpu().numpy()
    meta = {
        "order": list(store.params),
        "adam_step": store.step,
        "dtype": str(store.dtype).replace("torch.", ""),
        "rng": rng.state(),
        "config": dict(config),
        "fingerprint": fingerprint(config),
        "extra": dict(extra or {}),
    }
    arrays["meta"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    path.write_bytes(buf.getvalue())
    return path


def load_checkpoint(path) -> tuple[ParamStore, KernelRng, dict, dict]:
    with np.load(Path(path)) as z:
        meta = json.loads(bytes(z["meta"]).decode())
        if meta["fingerprint"] != fingerprint(meta["config"]):
            raise ValueError(f"{path}: config fingerprint mismatch")
        store = ParamStore(getattr(torch, meta["dtype"]))
        for k in meta["order"]:
            store.add(k, z[f"param/{k}"])
            store.m[k] = torch.as_tensor(z[f"m/{k}"]).clone()
            store.v[k] = torch.as_tensor(z[f"v/{k}"]).clone()
    store.step = meta["adam_step"]
    rng = KernelRng(**meta["rng"])
    return store, rng, meta["config"], meta["extra"]
