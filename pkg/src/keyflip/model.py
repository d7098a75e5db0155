"""Small decoder-only transformer whose weights live as raw BF16/INT8 patterns.

Training runs on ordinary float tensors (see :mod:`keyflip.training`); the
attacked victim is a :class:`ToyModel`, which keeps one :class:`LayerTensor`
per parameter tensor.  Each layer stores its raw patterns plus a dequantized
working copy used by the forward pass; flipping a bit updates both.
Gradients are taken with respect to the dequantized values.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from . import bitcodec
from .bitcodec import Kind, QuantFormat


class ModelInputError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    context_length: int = 64
    d_model: int = 128
    n_heads: int = 4
    n_blocks: int = 2
    d_ff: int = 512

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")


def param_shapes(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Parameter tensors in layer order; the output projection is last."""
    d, f = cfg.d_model, cfg.d_ff
    shapes = [("tok_emb", (cfg.vocab_size, d)), ("pos_emb", (cfg.context_length, d))]
    for b in range(cfg.n_blocks):
        p = f"blocks.{b}."
        shapes += [
            (p + "ln1.weight", (d,)), (p + "ln1.bias", (d,)),
            (p + "attn.wq", (d, d)), (p + "attn.wk", (d, d)),
            (p + "attn.wv", (d, d)), (p + "attn.wo", (d, d)),
            (p + "ln2.weight", (d,)), (p + "ln2.bias", (d,)),
            (p + "mlp.w1", (f, d)), (p + "mlp.w2", (d, f)),
        ]
    shapes += [("ln_f.weight", (d,)), ("ln_f.bias", (d,)), ("lm_head", (cfg.vocab_size, d))]
    return shapes


def init_params(cfg: ModelConfig, generator: torch.Generator) -> dict[str, torch.Tensor]:
    params = {}
    for name, shape in param_shapes(cfg):
        if name.endswith(".weight") and len(shape) == 1:
            t = torch.ones(shape)
        elif name.endswith(".bias"):
            t = torch.zeros(shape)
        else:
            std = 0.02 / math.sqrt(2 * cfg.n_blocks) if name.endswith(("wo", "w2")) else 0.02
            t = torch.randn(shape, generator=generator) * std
        params[name] = t
    return params


def forward_logits(params, tokens: torch.Tensor, cfg: ModelConfig) -> torch.Tensor:
    """Logits ``(B, T, V)`` for a right-padded batch of token ids ``(B, T)``."""
    B, T = tokens.shape
    H = cfg.n_heads
    dh = cfg.d_model // H
    x = params["tok_emb"][tokens] + params["pos_emb"][:T]
    causal = torch.ones(T, T, dtype=torch.bool).triu(1)
    for b in range(cfg.n_blocks):
        p = f"blocks.{b}."
        h = F.layer_norm(x, (cfg.d_model,), params[p + "ln1.weight"], params[p + "ln1.bias"])
        q = (h @ params[p + "attn.wq"].T).view(B, T, H, dh).transpose(1, 2)
        k = (h @ params[p + "attn.wk"].T).view(B, T, H, dh).transpose(1, 2)
        v = (h @ params[p + "attn.wv"].T).view(B, T, H, dh).transpose(1, 2)
        att = (q @ k.transpose(-1, -2)) / math.sqrt(dh)
        att = att.masked_fill(causal, float("-inf")).softmax(-1)
        o = (att @ v).transpose(1, 2).reshape(B, T, cfg.d_model)
        x = x + o @ params[p + "attn.wo"].T
        h = F.layer_norm(x, (cfg.d_model,), params[p + "ln2.weight"], params[p + "ln2.bias"])
        x = x + F.gelu(h @ params[p + "mlp.w1"].T) @ params[p + "mlp.w2"].T
    x = F.layer_norm(x, (cfg.d_model,), params["ln_f.weight"], params["ln_f.bias"])
    return x @ params["lm_head"].T


def pad_batch(seqs, pad_id: int = 0) -> tuple[torch.Tensor, torch.Tensor]:
    """Right-pad token lists; returns ``(tokens, lengths)``."""
    lengths = torch.tensor([len(s) for s in seqs], dtype=torch.long)
    out = torch.full((len(seqs), int(lengths.max())), pad_id, dtype=torch.long)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = torch.as_tensor(list(s), dtype=torch.long)
    return out, lengths


def tensor_format(values: np.ndarray, kind: Kind) -> QuantFormat:
    if kind is Kind.BF16:
        return bitcodec.BF16
    peak = float(np.max(np.abs(values))) if values.size else 0.0
    return QuantFormat.int8(peak / 127.0 if peak > 0 else 1.0 / 127.0)


@dataclass
class LayerTensor:
    layer_id: int
    name: str
    shape: tuple[int, ...]
    fmt: QuantFormat
    patterns: np.ndarray
    values: torch.Tensor = field(repr=False)
    grad: np.ndarray | None = field(default=None, repr=False)
    _stats: tuple[float, float] | None = field(default=None, repr=False)

    @classmethod
    def from_patterns(cls, layer_id, name, shape, fmt, patterns, dtype=torch.float32):
        patterns = np.ascontiguousarray(patterns, dtype=fmt.dtype).reshape(-1)
        values = torch.from_numpy(bitcodec.decode_array(patterns, fmt)).to(dtype).reshape(shape)
        return cls(layer_id, name, tuple(shape), fmt, patterns, values)

    @property
    def size(self) -> int:
        return self.patterns.size

    def decoded(self) -> np.ndarray:
        return bitcodec.decode_array(self.patterns, self.fmt)

    def _refresh(self):
        vals = self.decoded()
        self._stats = (float(vals.min()), float(vals.max()))

    @property
    def layer_min(self) -> float:
        if self._stats is None:
            self._refresh()
        return self._stats[0]

    @property
    def layer_max(self) -> float:
        if self._stats is None:
            self._refresh()
        return self._stats[1]

    def flip(self, index: int, bit: int) -> None:
        new = bitcodec.flip_pattern(int(self.patterns[index]), bit, self.fmt)
        self.patterns[index] = new
        self.values.view(-1)[index] = bitcodec.decode(new, self.fmt)
        self._stats = None

    def copy(self) -> "LayerTensor":
        return LayerTensor(self.layer_id, self.name, self.shape, self.fmt, self.patterns.copy(),
                           self.values.clone(), None if self.grad is None else self.grad.copy(),
                           self._stats)


class ToyModel:
    """Quantized victim model.  ``layers[i].layer_id == i``; the head is last."""

    def __init__(self, config: ModelConfig, layers: list[LayerTensor], eos_id: int | None = None,
                 pad_id: int = 0):
        self.config = config
        self.layers = layers
        self.by_name = {lt.name: lt for lt in layers}
        self.eos_id = eos_id
        self.pad_id = pad_id

    @classmethod
    def from_float(cls, config: ModelConfig, params: dict[str, torch.Tensor], kind: Kind,
                   eos_id=None, pad_id=0, dtype=torch.float32) -> "ToyModel":
        layers = []
        for i, (name, shape) in enumerate(param_shapes(config)):
            vals = params[name].detach().to(torch.float64).cpu().numpy().reshape(-1)
            fmt = tensor_format(vals, kind)
            layers.append(LayerTensor.from_patterns(i, name, shape, fmt, bitcodec.encode_array(vals, fmt), dtype))
        return cls(config, layers, eos_id, pad_id)

    @property
    def kind(self) -> Kind:
        return self.layers[0].fmt.kind

    @property
    def head_layer_id(self) -> int:
        return self.by_name["lm_head"].layer_id

    @property
    def dtype(self) -> torch.dtype:
        return self.layers[0].values.dtype

    def params(self) -> dict[str, torch.Tensor]:
        return {lt.name: lt.values for lt in self.layers}

    def copy(self, dtype: torch.dtype | None = None) -> "ToyModel":
        layers = [lt.copy() for lt in self.layers]
        if dtype is not None:
            for lt in layers:
                lt.values = torch.from_numpy(lt.decoded()).to(dtype).reshape(lt.shape)
        return ToyModel(self.config, layers, self.eos_id, self.pad_id)

    def _check(self, seq) -> None:
        if len(seq) == 0:
            raise ModelInputError("empty token sequence")
        if len(seq) > self.config.context_length:
            raise ModelInputError(f"sequence length {len(seq)} exceeds context {self.config.context_length}")
        bad = [t for t in seq if not 0 <= int(t) < self.config.vocab_size]
        if bad:
            raise ModelInputError(f"token ids out of vocabulary: {bad[:5]}")

    def forward(self, tokens) -> torch.Tensor:
        """Logits ``(len(tokens), vocab)`` for one sequence."""
        self._check(tokens)
        with torch.no_grad():
            return forward_logits(self.params(), torch.as_tensor([list(tokens)], dtype=torch.long), self.config)[0]

    def forward_batch(self, seqs, params=None) -> tuple[torch.Tensor, torch.Tensor]:
        for s in seqs:
            self._check(s)
        tokens, lengths = pad_batch(seqs, self.pad_id)
        return forward_logits(self.params() if params is None else params, tokens, self.config), lengths

    def gradients(self, loss_fn, layer_ids=None) -> float:
        """Evaluate ``loss_fn(params)`` and store d(loss)/d(weight) in each layer's ``grad``."""
        wanted = set(range(len(self.layers))) if layer_ids is None else set(layer_ids)
        params = {}
        for lt in self.layers:
            t = lt.values
            if lt.layer_id in wanted:
                t = t.detach().clone().requires_grad_(True)
            params[lt.name] = t
        loss = loss_fn(params)
        leaves = [params[lt.name] for lt in self.layers if lt.layer_id in wanted]
        grads = torch.autograd.grad(loss, leaves, allow_unused=True)
        for lt in self.layers:
            lt.grad = None
        for lt, g in zip([lt for lt in self.layers if lt.layer_id in wanted], grads):
            lt.grad = (np.zeros(lt.size) if g is None
                       else g.detach().to(torch.float64).numpy().reshape(-1).copy())
        return float(loss.detach())

    def greedy_decode_batch(self, prompts, max_new: int) -> list[list[int]]:
        """Greedy continuation of several prompts; ties go to the lowest token id."""
        seqs = [list(map(int, p)) for p in prompts]
        for s in seqs:
            self._check(s)
        done = [False] * len(seqs)
        params = self.params()
        with torch.no_grad():
            for _ in range(max_new):
                live = [i for i, d in enumerate(done) if not d and len(seqs[i]) < self.config.context_length]
                if not live:
                    break
                tokens, lengths = pad_batch([seqs[i] for i in live], self.pad_id)
                logits = forward_logits(params, tokens, self.config)
                last = logits[torch.arange(len(live)), lengths - 1]
                nxt = torch.argmax(last, dim=-1).tolist()
                for i, t in zip(live, nxt):
                    seqs[i].append(int(t))
                    if self.eos_id is not None and t == self.eos_id:
                        done[i] = True
                for i in live:
                    if len(seqs[i]) >= self.config.context_length:
                        done[i] = True
        return seqs

    def greedy_decode(self, prompt, max_new: int) -> list[int]:
        if max_new <= 0:
            self._check(prompt)
            return list(map(int, prompt))
        return self.greedy_decode_batch([prompt], max_new)[0]

    def flip(self, layer_id: int, index: int, bit: int) -> None:
        self.layers[layer_id].flip(index, bit)

    def digest(self) -> str:
        h = hashlib.sha256()
        for lt in self.layers:
            h.update(lt.name.encode())
            h.update(lt.patterns.tobytes())
        return h.hexdigest()

    def logits_finite(self, seqs) -> bool:
        with torch.no_grad():
            logits, _ = self.forward_batch(seqs)
        return bool(torch.isfinite(logits).all())
