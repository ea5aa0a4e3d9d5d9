"""Parameter containers and their forward passes."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from ..numerics import Tensor, functional as F, parameter
from ..numerics.tensor import ShapeError
from .config import ModelConfig


class InputError(ValueError):
    pass


class Module:
    """Minimal parameter container: public Tensor / Module / list attributes are walked."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            full = prefix + name
            if isinstance(value, Tensor):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")
                    elif isinstance(item, Tensor):
                        yield f"{full}.{i}", item

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = own.keys() - state.keys()
        unexpected = state.keys() - own.keys()
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for name, p in own.items():
            value = np.asarray(state[name])
            if value.shape != p.shape:
                raise ShapeError(f"{name}: expected shape {p.shape}, got {value.shape}")
            p.data = value.astype(p.dtype, copy=True)


def _normal(rng, shape, std, dtype) -> Tensor:
    if rng is None:
        return parameter(np.zeros(shape, dtype=dtype))
    return parameter(rng.normal(0.0, std, size=shape).astype(dtype))


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng=None, std: float = 0.02, dtype=np.float64, zero: bool = False):
        self.weight = parameter(np.zeros((n_in, n_out), dtype=dtype)) if zero else _normal(rng, (n_in, n_out), std, dtype)
        self.bias = parameter(np.zeros(n_out, dtype=dtype))

    def __call__(self, x: Tensor) -> Tensor:
        return x @ self.weight + self.bias


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-12, dtype=np.float64):
        self.gain = parameter(np.ones(d, dtype=dtype))
        self.bias = parameter(np.zeros(d, dtype=dtype))
        self._eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return F.layer_norm(x, self.gain, self.bias, self._eps)


class Embeddings(Module):
    """Token (optionally factorized), position and token-type embeddings + LN."""

    def __init__(self, config: ModelConfig, rng=None):
        c, dt = config, config.np_dtype
        self._config = c
        self.E_low = _normal(rng, (c.vocab_size, c.rank), c.init_std, dt)
        # r == d: the projection is the fixed identity and is not stored.
        self.W_e = _normal(rng, (c.rank, c.hidden_dim), c.init_std, dt) if c.factorized else None
        self.positional = _normal(rng, (c.max_positions, c.hidden_dim), c.init_std, dt)
        self.token_type = (
            _normal(rng, (c.type_vocab_size, c.hidden_dim), c.init_std, dt) if c.type_vocab_size else None
        )
        self.ln = LayerNorm(c.hidden_dim, c.layer_norm_eps, dt)

    def effective_matrix(self) -> Tensor:
        """E = E_low @ W_e, shape |V| x d."""
        return self.E_low if self.W_e is None else self.E_low @ self.W_e

    def __call__(self, tokens, token_types=None, train=False, rng=None) -> Tensor:
        tokens = np.asarray(tokens)
        c = self._config
        if tokens.ndim != 2:
            raise InputError(f"tokens must be batch x seq, got shape {tokens.shape}")
        if tokens.size and (tokens.min() < 0 or tokens.max() >= c.vocab_size):
            raise InputError(f"token id out of range [0, {c.vocab_size})")
        seq = tokens.shape[1]
        if seq > c.max_positions:
            raise InputError(f"sequence length {seq} exceeds max_positions {c.max_positions}")
        x = F.embedding(tokens, self.E_low)
        if self.W_e is not None:
            x = x @ self.W_e
        x = x + self.positional[:seq]
        if self.token_type is not None:
            types = np.zeros_like(tokens) if token_types is None else np.asarray(token_types)
            x = x + F.embedding(types, self.token_type)
        return F.dropout(self.ln(x), c.dropout_prob, rng, train)


class Adapter(Module):
    """Residual bottleneck: x + up(sigma(down(x)))."""

    def __init__(self, d: int, b: int, rng=None, std: float = 0.02, nonlinearity: str = "gelu", dtype=np.float64):
        self.down = Linear(d, b, rng, std, dtype)
        self.up = Linear(b, d, dtype=dtype, zero=True)
        self._nonlinearity = nonlinearity

    def __call__(self, x: Tensor) -> Tensor:
        act = F.relu if self._nonlinearity == "relu" else F.gelu
        return self.up(act(self.down(x))) + x


class AdapterPair(Module):
    def __init__(self, config: ModelConfig, rng=None):
        c = config
        kw = dict(std=c.init_std, nonlinearity=c.adapter_nonlinearity, dtype=c.np_dtype)
        self.att = Adapter(c.hidden_dim, c.adapter_bottleneck, rng, **kw)
        self.mlp = Adapter(c.hidden_dim, c.adapter_bottleneck, rng, **kw)


class TransformerBlock(Module):
    """Post-LN encoder block: y = LN(x + MHA(x)); out = LN(y + FFN(y))."""

    def __init__(self, config: ModelConfig, rng=None):
        c, dt = config, config.np_dtype
        self._config = c
        d = c.hidden_dim
        self.query = Linear(d, d, rng, c.init_std, dt)
        self.key = Linear(d, d, rng, c.init_std, dt)
        self.value = Linear(d, d, rng, c.init_std, dt)
        self.output = Linear(d, d, rng, c.init_std, dt)
        self.ln_att = LayerNorm(d, c.layer_norm_eps, dt)
        self.ffn_in = Linear(d, c.ffn_dim, rng, c.init_std, dt)
        self.ffn_out = Linear(c.ffn_dim, d, rng, c.init_std, dt)
        self.ln_ffn = LayerNorm(d, c.layer_norm_eps, dt)

    def attention(self, x: Tensor, key_mask: np.ndarray, train=False, rng=None) -> tuple[Tensor, Tensor]:
        c = self._config
        B, S, d = x.shape
        H, dh = c.num_heads, c.head_dim

        def heads(t):
            return t.reshape(B, S, H, dh).transpose(0, 2, 1, 3)

        q, k, v = heads(self.query(x)), heads(self.key(x)), heads(self.value(x))
        scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(dh))
        probs = F.softmax(scores, axis=-1, mask=key_mask[:, None, None, :])
        ctx = F.dropout(probs, c.dropout_prob, rng, train) @ v
        ctx = ctx.transpose(0, 2, 1, 3).reshape(B, S, d)
        return self.output(ctx), probs

    def __call__(self, x: Tensor, key_mask: np.ndarray, adapters: AdapterPair | None = None, train=False, rng=None):
        c = self._config
        if key_mask.shape != x.shape[:2]:
            raise ShapeError(f"mask shape {key_mask.shape} does not match input {x.shape[:2]}")
        before = adapters is not None and c.adapter_placement == "input"
        after = adapters is not None and c.adapter_placement == "post"
        if before:
            x = adapters.att(x)
        a, probs = self.attention(x, key_mask, train, rng)
        a = F.dropout(a, c.dropout_prob, rng, train)
        if after:
            a = adapters.att(a)
        y = self.ln_att(x + a)
        if before:
            y = adapters.mlp(y)
        f = self.ffn_out(F.gelu(self.ffn_in(y)))
        f = F.dropout(f, c.dropout_prob, rng, train)
        if after:
            f = adapters.mlp(f)
        return self.ln_ffn(y + f), probs


class MLMHead(Module):
    """dense + gelu + LN, then a decoder tied to the effective embedding matrix."""

    def __init__(self, config: ModelConfig, rng=None):
        c = config
        self.dense = Linear(c.hidden_dim, c.hidden_dim, rng, c.init_std, c.np_dtype)
        self.ln = LayerNorm(c.hidden_dim, c.layer_norm_eps, c.np_dtype)

    def __call__(self, h: Tensor, embeddings: Embeddings) -> Tensor:
        return self.ln(F.gelu(self.dense(h))) @ embeddings.effective_matrix().T
