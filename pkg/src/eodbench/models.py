"""Dynaformer encoder-decoder with chunked decoder tokens, plus FNN and LSTM baselines.

All three models take a context window of (voltage, current, time) samples
and a current sample stream, and return one voltage per current sample.
Voltage and current are standardized with constants fixed at training time.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np
import torch

from .kernel import (
    DTYPE, ConfigError, KernelRng, ParamStore, ShapeError, as_tensor, dropout, gelu,
    layer_norm, linear, multi_head_attention, relu, sinusoidal_position,
)
from .simulator import VoltageCurve


class UnsupportedInputError(ValueError):
    pass


@dataclass
class ModelConfig:
    h: int = 32
    n_layers_enc: int = 2
    n_layers_dec: int = 2
    n_heads: int = 2
    n_chunk: int = 16
    context_len: int = 50
    dropout_p: float = 0.1
    causal_decoder: bool = False
    ffn_mult: int = 4
    sampling_period: float = 2.0
    fnn_hidden: int = 64
    fnn_layers: int = 3
    rnn_hidden: int = 64
    rnn_pos_dim: int = 16
    preset: str = "tiny"

    def __post_init__(self):
        if self.h % self.n_heads:
            raise ConfigError(f"h={self.h} not divisible by n_heads={self.n_heads}")
        if self.h % 2 or self.rnn_pos_dim % 2:
            raise ConfigError("positional dimensions must be even")
        if self.n_chunk < 1 or self.context_len < 1:
            raise ConfigError("n_chunk and context_len must be >= 1")
        if not 0 <= self.dropout_p < 1:
            raise ConfigError("dropout_p must lie in [0, 1)")


PRESETS = {
    "paper": ModelConfig(h=128, n_layers_enc=6, n_layers_dec=6, n_heads=8, n_chunk=64,
                         context_len=200, fnn_hidden=1000, fnn_layers=5, rnn_hidden=1000,
                         preset="paper"),
    "tiny": ModelConfig(preset="tiny"),
}


def preset(name: str, **overrides) -> ModelConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return replace(PRESETS[name], **overrides)


@dataclass
class Normalizer:
    v_mean: float = 3.7
    v_std: float = 0.3
    i_mean: float = 1.75
    i_std: float = 0.7
    t_scale: float = 3600.0

    @classmethod
    def fit(cls, records) -> "Normalizer":
        v = np.concatenate([r.voltage for r in records])
        i = np.concatenate([r.current_samples() for r in records])
        return cls(float(v.mean()), float(v.std()) or 1.0, float(i.mean()), float(i.std()) or 1.0)

    def v(self, x):
        return (x - self.v_mean) / self.v_std

    def v_inv(self, x):
        return x * self.v_std + self.v_mean

    def i(self, x):
        return (x - self.i_mean) / self.i_std


@dataclass
class ContextWindow:
    """C rows of (voltage V, current A, time s)."""

    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 2 or self.data.shape[1] != 3:
            raise ShapeError(f"context must be C x 3, got {self.data.shape}")
        if len(self.data) > 1 and np.any(np.diff(self.data[:, 2]) <= 0):
            raise ValueError("context times must be strictly increasing")

    @classmethod
    def from_record(cls, voltage, current, period: float, length: int, offset: int = 0) -> "ContextWindow":
        idx = np.arange(offset, offset + length)
        if idx[-1] >= len(voltage):
            raise ShapeError(f"record of {len(voltage)} samples too short for context {offset}+{length}")
        return cls(np.stack([voltage[idx], current[idx], idx * period], axis=1))

    def __len__(self):
        return len(self.data)


@dataclass
class TokenizedLoad:
    tokens: np.ndarray  # T x n
    mask: np.ndarray  # T*n booleans, True on real samples
    length: int


def chunk(samples, n_chunk: int) -> TokenizedLoad:
    x = np.asarray(samples, dtype=np.float64)
    L = len(x)
    if L < 1:
        raise ValueError("need at least one sample")
    T = -(-L // n_chunk)
    padded = np.concatenate([x, np.full(T * n_chunk - L, x[-1])])
    mask = np.arange(T * n_chunk) < L
    return TokenizedLoad(padded.reshape(T, n_chunk), mask, L)


def unchunk(tokens: TokenizedLoad | np.ndarray, length: int | None = None) -> np.ndarray:
    if isinstance(tokens, TokenizedLoad):
        length = tokens.length
        tokens = tokens.tokens
    return np.asarray(tokens).reshape(-1)[:length]


def _pad_batch(samples_list, n_chunk: int):
    """Right-pad each sequence with its own last value to a common multiple of ``n_chunk``."""
    lengths = np.array([len(s) for s in samples_list])
    if np.any(lengths < 1):
        raise ValueError("empty current sequence")
    T = -(-int(lengths.max()) // n_chunk)
    out = np.empty((len(samples_list), T * n_chunk))
    for b, s in enumerate(samples_list):
        out[b, : len(s)] = s
        out[b, len(s):] = s[-1]
    return out, lengths


def _uniform(rng: torch.Generator, shape, fan_in, dtype=DTYPE):
    bound = 1.0 / math.sqrt(fan_in)
    return (torch.rand(shape, generator=rng, dtype=dtype) * 2 - 1) * bound


def _add_linear(store, g, name, n_in, n_out, scale=1.0):
    store.add(f"{name}.w", _uniform(g, (n_in, n_out), n_in, store.dtype) * scale)
    store.add(f"{name}.b", torch.zeros(n_out, dtype=store.dtype))


def _add_ln(store, name, h):
    store.add(f"{name}.g", torch.ones(h, dtype=store.dtype))
    store.add(f"{name}.b", torch.zeros(h, dtype=store.dtype))


def _add_attn(store, g, name, h):
    for p in "qkvo":
        store.add(f"{name}.w{p}", _uniform(g, (h, h), h, store.dtype))
        store.add(f"{name}.b{p}", torch.zeros(h, dtype=store.dtype))


class BaseModel:
    kind = "base"

    def __init__(self, cfg: ModelConfig, norm: Normalizer | None = None,
                 store: ParamStore | None = None, seed: int = 0, dtype=DTYPE):
        self.cfg = cfg
        self.norm = norm or Normalizer()
        if store is None:
            store = ParamStore(dtype)
            self.init_params(store, KernelRng(seed).generator())
        self.store = store

    @property
    def dtype(self):
        return self.store.dtype

    def init_params(self, store: ParamStore, g: torch.Generator):
        raise NotImplementedError

    def _t(self, x):
        return as_tensor(x, self.dtype)

    def context_features(self, ctx_batch: np.ndarray) -> torch.Tensor:
        """(B, C, 3) raw context -> normalized (v, i) and time in sample units."""
        c = np.asarray(ctx_batch, dtype=np.float64)
        if c.ndim == 2:
            c = c[None]
        if c.shape[1] != self.cfg.context_len or c.shape[2] != 3:
            raise ShapeError(
                f"context shape {c.shape[1:]} does not match config ({self.cfg.context_len}, 3)"
            )
        return c

    def predict_normalized(self, ctx_batch, samples_list, mode="eval", rng: KernelRng | None = None):
        """Normalized voltage predictions (B, Lmax) and the (B, Lmax) validity mask."""
        raise NotImplementedError

    def predict_many(self, samples_list, ctx: ContextWindow, batch_size: int = 64) -> list[np.ndarray]:
        out = []
        for k in range(0, len(samples_list), batch_size):
            part = samples_list[k:k + batch_size]
            ctxb = np.repeat(ctx.data[None], len(part), axis=0)
            with torch.no_grad():
                pred, _ = self.predict_normalized(ctxb, part, mode="eval")
            pred = self.norm.v_inv(pred.cpu().numpy())
            out.extend(pred[b, : len(s)] for b, s in enumerate(part))
        return out

    def __call__(self, samples, ctx: ContextWindow) -> np.ndarray:
        return self.predict_many([np.asarray(samples, dtype=np.float64)], ctx)[0]

    def forward(self, ctx: ContextWindow, samples, mode="eval", rng: KernelRng | None = None) -> VoltageCurve:
        samples = np.asarray(samples, dtype=np.float64)
        with torch.no_grad():
            pred, _ = self.predict_normalized(ctx.data[None], [samples], mode=mode, rng=rng)
        v = self.norm.v_inv(pred[0, : len(samples)].cpu().numpy())
        return VoltageCurve(0.0, self.cfg.sampling_period, v, False)


class Dynaformer(BaseModel):
    kind = "dynaformer"

    def init_params(self, store, g):
        c = self.cfg
        h, f = c.h, c.h * c.ffn_mult
        _add_linear(store, g, "enc.embed", 2, h)
        for l in range(c.n_layers_enc):
            p = f"enc.{l}"
            _add_ln(store, f"{p}.ln1", h)
            _add_attn(store, g, f"{p}.attn", h)
            _add_ln(store, f"{p}.ln2", h)
            _add_linear(store, g, f"{p}.ff1", h, f)
            _add_linear(store, g, f"{p}.ff2", f, h)
        _add_ln(store, "enc.ln", h)
        _add_linear(store, g, "dec.embed", c.n_chunk, h)
        for l in range(c.n_layers_dec):
            p = f"dec.{l}"
            _add_ln(store, f"{p}.ln1", h)
            _add_attn(store, g, f"{p}.self", h)
            _add_ln(store, f"{p}.ln2", h)
            _add_attn(store, g, f"{p}.cross", h)
            _add_ln(store, f"{p}.ln3", h)
            _add_linear(store, g, f"{p}.ff1", h, f)
            _add_linear(store, g, f"{p}.ff2", f, h)
        _add_ln(store, "dec.ln", h)
        _add_linear(store, g, "dec.out", h, c.n_chunk, scale=0.1)

    def _ffn(self, x, p, mode, gen):
        s = self.store
        y = gelu(linear(x, s[f"{p}.ff1.w"], s[f"{p}.ff1.b"]))
        return dropout(linear(y, s[f"{p}.ff2.w"], s[f"{p}.ff2.b"]), self.cfg.dropout_p, mode, gen)

    def _ln(self, x, p):
        return layer_norm(x, self.store[f"{p}.g"], self.store[f"{p}.b"])

    def encode(self, ctx_batch, mode="eval", rng: KernelRng | None = None) -> torch.Tensor:
        """(B, C, 3) context -> (B, C, h) conditioning."""
        c = self.context_features(ctx_batch)
        s, cfg = self.store, self.cfg
        gen = rng.generator() if (rng is not None and mode != "eval") else None
        vi = self._t(np.stack([self.norm.v(c[..., 0]), self.norm.i(c[..., 1])], axis=-1))
        x = linear(vi, s["enc.embed.w"], s["enc.embed.b"])
        x = x + sinusoidal_position(c[..., 2] / cfg.sampling_period, cfg.h, dtype=self.dtype)
        x = dropout(x, cfg.dropout_p, mode, gen)
        for l in range(cfg.n_layers_enc):
            p = f"enc.{l}"
            y = self._ln(x, f"{p}.ln1")
            x = x + dropout(multi_head_attention(y, y, y, s.scope(f"{p}.attn"), cfg.n_heads),
                            cfg.dropout_p, mode, gen)
            x = x + self._ffn(self._ln(x, f"{p}.ln2"), p, mode, gen)
        return self._ln(x, "enc.ln")

    def decode(self, padded: torch.Tensor, lengths, memory: torch.Tensor, mode="eval",
               rng: KernelRng | None = None) -> torch.Tensor:
        """Decode (B, T*n) normalized currents into (B, T*n) normalized voltages.

        Samples at or beyond each row's length are replaced by that row's last
        valid sample before projection, so their incoming values never matter.
        Tokens with no valid sample are masked out as attention keys.
        """
        s, cfg = self.store, self.cfg
        if memory.shape[-1] != cfg.h:
            raise ShapeError(f"conditioning width {memory.shape[-1]} != h={cfg.h}")
        B, Ln = padded.shape
        n = cfg.n_chunk
        T = Ln // n
        lengths_t = torch.as_tensor(np.asarray(lengths))
        pos = torch.arange(Ln)
        valid = pos[None, :] < lengths_t[:, None]
        last = padded.gather(1, (lengths_t - 1)[:, None])
        x_in = torch.where(valid, padded, last).reshape(B, T, n)
        token_mask = (torch.arange(T)[None, :] * n) < lengths_t[:, None]
        gen = rng.generator() if (rng is not None and mode != "eval") else None
        x = linear(x_in, s["dec.embed.w"], s["dec.embed.b"])
        x = x + sinusoidal_position(torch.arange(T, dtype=self.dtype), cfg.h, dtype=self.dtype)
        x = dropout(x, cfg.dropout_p, mode, gen)
        for l in range(cfg.n_layers_dec):
            p = f"dec.{l}"
            y = self._ln(x, f"{p}.ln1")
            a = multi_head_attention(y, y, y, s.scope(f"{p}.self"), cfg.n_heads,
                                     mask=token_mask, causal=cfg.causal_decoder)
            x = x + dropout(a, cfg.dropout_p, mode, gen)
            y = self._ln(x, f"{p}.ln2")
            a = multi_head_attention(y, memory, memory, s.scope(f"{p}.cross"), cfg.n_heads)
            x = x + dropout(a, cfg.dropout_p, mode, gen)
            x = x + self._ffn(self._ln(x, f"{p}.ln3"), p, mode, gen)
        out = linear(self._ln(x, "dec.ln"), s["dec.out.w"], s["dec.out.b"])
        return out.reshape(B, Ln)

    def predict_normalized(self, ctx_batch, samples_list, mode="eval", rng=None):
        padded, lengths = _pad_batch(samples_list, self.cfg.n_chunk)
        memory = self.encode(ctx_batch, mode=mode, rng=rng)
        if memory.shape[0] != len(samples_list):
            raise ShapeError("context batch and current batch sizes differ")
        pred = self.decode(self._t(self.norm.i(padded)), lengths, memory, mode=mode, rng=rng)
        mask = torch.arange(padded.shape[1])[None, :] < torch.as_tensor(lengths)[:, None]
        return pred, mask

    def embed_context(self, ctx: ContextWindow) -> np.ndarray:
        with torch.no_grad():
            return self.encode(ctx.data[None], mode="eval")[0].cpu().numpy()


class FNN(BaseModel):
    """Pointwise regressor on (flattened context, query time, constant current)."""

    kind = "fnn"

    @property
    def n_in(self):
        return self.cfg.context_len * 3 + 2

    def init_params(self, store, g):
        c = self.cfg
        widths = [self.n_in] + [c.fnn_hidden] * c.fnn_layers + [1]
        for k, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
            _add_linear(store, g, f"fnn.{k}", a, b)

    def flat_context(self, ctx_batch) -> torch.Tensor:
        c = self.context_features(ctx_batch)
        f = np.stack([self.norm.v(c[..., 0]), self.norm.i(c[..., 1]), c[..., 2] / self.norm.t_scale], -1)
        return self._t(f.reshape(len(c), -1))

    def mlp(self, first_hidden: torch.Tensor) -> torch.Tensor:
        s = self.store
        x = relu(first_hidden)
        for k in range(1, self.cfg.fnn_layers + 1):
            x = linear(x, s[f"fnn.{k}.w"], s[f"fnn.{k}.b"])
            if k < self.cfg.fnn_layers:
                x = relu(x)
        return x[..., 0]

    def predict_normalized(self, ctx_batch, samples_list, mode="eval", rng=None):
        for smp in samples_list:
            if np.any(smp != smp[0]):
                raise UnsupportedInputError("the FNN baseline only accepts constant current profiles")
        flat = self.flat_context(ctx_batch)
        lengths = np.array([len(x) for x in samples_list])
        Lmax = int(lengths.max())
        t = self._t(np.arange(Lmax) * self.cfg.sampling_period / self.norm.t_scale)
        cur = self._t(self.norm.i(np.array([x[0] for x in samples_list])))
        s = self.store
        w = s["fnn.0.w"]
        C3 = self.cfg.context_len * 3
        # first layer split so the context product is computed once per example
        h = (flat @ w[:C3])[:, None, :] + t[None, :, None] * w[C3] + cur[:, None, None] * w[C3 + 1]
        pred = self.mlp(h + s["fnn.0.b"])
        mask = torch.arange(Lmax)[None, :] < torch.as_tensor(lengths)[:, None]
        return pred, mask


def fnn_forward(flat_ctx, query_time, const_current, model: FNN):
    """Voltage at ``query_time`` (scalar or array, seconds) for a constant current.

    ``flat_ctx`` is the raw context flattened row-major from C x (v, i, t).
    """
    flat = np.asarray(flat_ctx, dtype=np.float64).reshape(-1)
    if flat.size != model.cfg.context_len * 3:
        raise ShapeError(f"flat context has {flat.size} values, expected {model.cfg.context_len * 3}")
    cur = np.asarray(const_current, dtype=np.float64).reshape(-1)
    if np.any(cur != cur[0]):
        raise UnsupportedInputError("the FNN baseline only accepts constant current profiles")
    q = np.asarray(query_time, dtype=np.float64)
    n = model.norm
    ctx = model.flat_context(flat.reshape(1, -1, 3))
    x = torch.cat([
        ctx.expand(q.size, -1),
        model._t(q.reshape(-1, 1) / n.t_scale),
        model._t(np.full((q.size, 1), n.i(cur[0]))),
    ], dim=1)
    s = model.store
    with torch.no_grad():
        out = model.mlp(linear(x, s["fnn.0.w"], s["fnn.0.b"]))
    v = n.v_inv(out.cpu().numpy())
    return v.reshape(q.shape) if q.ndim else float(v[0])


class Seq2SeqLSTM(BaseModel):
    """LSTM encoder over the context; its final (h, c) seeds an LSTM decoder over the current."""

    kind = "rnn"

    def init_params(self, store, g):
        c = self.cfg
        H = c.rnn_hidden
        d_enc = 2 + c.rnn_pos_dim
        store.add("enc.lstm.w", _uniform(g, (d_enc + H, 4 * H), H, store.dtype))
        store.add("enc.lstm.b", torch.zeros(4 * H, dtype=store.dtype))
        store.add("dec.lstm.w", _uniform(g, (1 + H, 4 * H), H, store.dtype))
        store.add("dec.lstm.b", torch.zeros(4 * H, dtype=store.dtype))
        _add_linear(store, g, "dec.out", H, 1)

    @staticmethod
    def cell(x, h, c, w, b):
        z = linear(torch.cat([x, h], dim=-1), w, b)
        i, f, g, o = z.chunk(4, dim=-1)
        c = torch.sigmoid(f) * c + torch.sigmoid(i) * torch.tanh(g)
        h = torch.sigmoid(o) * torch.tanh(c)
        return h, c

    def encode(self, ctx_batch):
        c = self.context_features(ctx_batch)
        s = self.store
        feats = torch.cat([
            self._t(np.stack([self.norm.v(c[..., 0]), self.norm.i(c[..., 1])], -1)),
            sinusoidal_position(c[..., 2] / self.cfg.sampling_period, self.cfg.rnn_pos_dim, dtype=self.dtype),
        ], dim=-1)
        B = feats.shape[0]
        h = torch.zeros(B, self.cfg.rnn_hidden, dtype=self.dtype)
        cc = torch.zeros_like(h)
        for t in range(feats.shape[1]):
            h, cc = self.cell(feats[:, t], h, cc, s["enc.lstm.w"], s["enc.lstm.b"])
        return h, cc

    def predict_normalized(self, ctx_batch, samples_list, mode="eval", rng=None):
        padded, lengths = _pad_batch(samples_list, 1)
        h, c = self.encode(ctx_batch)
        s = self.store
        cur = self._t(self.norm.i(padded))
        outs = []
        for t in range(cur.shape[1]):
            h, c = self.cell(cur[:, t:t + 1], h, c, s["dec.lstm.w"], s["dec.lstm.b"])
            outs.append(h)
        hs = torch.stack(outs, dim=1)
        pred = linear(hs, s["dec.out.w"], s["dec.out.b"])[..., 0]
        mask = torch.arange(padded.shape[1])[None, :] < torch.as_tensor(lengths)[:, None]
        return pred, mask


MODEL_KINDS = {"dynaformer": Dynaformer, "fnn": FNN, "rnn": Seq2SeqLSTM}


def build_model(kind: str, cfg: ModelConfig, norm: Normalizer | None = None, seed: int = 0,
                store: ParamStore | None = None, dtype=DTYPE) -> BaseModel:
    if kind not in MODEL_KINDS:
        raise ConfigError(f"unknown model kind {kind!r}; choose from {sorted(MODEL_KINDS)}")
    return MODEL_KINDS[kind](cfg, norm=norm, store=store, seed=seed, dtype=dtype)
