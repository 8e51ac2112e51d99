"""Decoder-only transformer used as the language model.

Pre-norm blocks, GELU feed-forward, learned absolute positions and an output
head tied to the token embedding.  The vocabulary can be extended once with
acoustic tokens; the extension lives in its own parameter so the original
rows stay untouched and can be frozen independently.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from enum import Enum

import torch
from torch import nn

from .numeric import DTYPE, matmul, softmax


@dataclass(frozen=True)
class LmConfig:
    layers: int = 2
    model_dim: int = 64
    heads: int = 4
    ffn_dim: int = 256
    base_vocab: int = 34
    max_positions: int = 192

    def __post_init__(self):
        for name in ("layers", "model_dim", "heads", "ffn_dim", "base_vocab", "max_positions"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.model_dim % self.heads:
            raise ValueError(f"model_dim {self.model_dim} not divisible by heads {self.heads}")

    def to_dict(self) -> dict:
        return asdict(self)


# layers / width ladder standing in for the 125M / 350M / 1.3B family
LM_PRESETS = {
    "tiny": dict(layers=2, model_dim=64, heads=4, ffn_dim=256),
    "small": dict(layers=4, model_dim=96, heads=4, ffn_dim=384),
    "base": dict(layers=4, model_dim=128, heads=4, ffn_dim=512),
}


def preset(name: str, base_vocab: int, max_positions: int = 192) -> LmConfig:
    if name not in LM_PRESETS:
        raise KeyError(f"unknown LM preset {name!r}; choose from {sorted(LM_PRESETS)}")
    return LmConfig(base_vocab=base_vocab, max_positions=max_positions, **LM_PRESETS[name])


class Segment(str, Enum):
    TEXT = "text"
    ACOUSTIC = "acoustic"
    SPECIAL = "special"


@dataclass
class TokenSequence:
    ids: list[int]
    segments: list[Segment]

    def __post_init__(self):
        if len(self.ids) != len(self.segments):
            raise ValueError("ids and segments must have equal length")

    def __len__(self) -> int:
        return len(self.ids)


@dataclass(frozen=True)
class LoraConfig:
    rank: int = 8
    alpha: float | None = None
    targets: tuple[str, ...] = ("q", "k", "v", "o")

    def __post_init__(self):
        if self.rank < 1:
            raise ValueError("LoRA rank must be >= 1")
        if self.alpha is not None and self.alpha <= 0:
            raise ValueError("LoRA alpha must be positive")
        bad = set(self.targets) - {"q", "k", "v", "o", "fc1", "fc2"}
        if bad:
            raise ValueError(f"unknown LoRA targets {sorted(bad)}")

    @property
    def scale(self) -> float:
        return (self.rank if self.alpha is None else self.alpha) / self.rank


class AdaptedLinear(nn.Module):
    """Linear layer with an optional low-rank delta ``scale * B @ A``."""

    def __init__(self, d_in: int, d_out: int):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(d_out, d_in, dtype=DTYPE))
        self.bias = nn.Parameter(torch.zeros(d_out, dtype=DTYPE))
        nn.init.normal_(self.weight, std=0.02)
        self.lora_A: nn.Parameter | None = None
        self.lora_B: nn.Parameter | None = None
        self.lora_scale = 1.0

    @property
    def has_lora(self) -> bool:
        return self.lora_A is not None

    def attach(self, rank: int, scale: float, gen: torch.Generator) -> None:
        if self.has_lora:
            raise RuntimeError("LoRA adapter already attached")
        d_out, d_in = self.weight.shape
        a = torch.randn(rank, d_in, generator=gen, dtype=DTYPE) / math.sqrt(d_in)
        self.lora_A = nn.Parameter(a)
        self.lora_B = nn.Parameter(torch.zeros(d_out, rank, dtype=DTYPE))
        self.lora_scale = scale

    def delta(self) -> torch.Tensor:
        return self.lora_scale * matmul(self.lora_B, self.lora_A)

    def merge(self) -> None:
        if not self.has_lora:
            raise RuntimeError("no LoRA adapter to merge")
        with torch.no_grad():
            self.weight.add_(self.delta())
        self.lora_A = None
        self.lora_B = None

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        y = matmul(x, self.weight.t()) + self.bias
        if self.lora_A is not None:
            y = y + self.lora_scale * matmul(matmul(x, self.lora_A.t()), self.lora_B.t())
        return y


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.q = AdaptedLinear(dim, dim)
        self.k = AdaptedLinear(dim, dim)
        self.v = AdaptedLinear(dim, dim)
        self.o = AdaptedLinear(dim, dim)

    def forward(self, x: torch.Tensor, allowed: torch.Tensor) -> torch.Tensor:
        B, T, D = x.shape
        h = self.heads

        def split(t):
            return t.view(B, T, h, D // h).transpose(1, 2)

        q, k, v = split(self.q(x)), split(self.k(x)), split(self.v(x))
        scores = matmul(q, k.transpose(-1, -2)) / math.sqrt(D // h)
        scores = scores.masked_fill(~allowed.unsqueeze(1), float("-inf"))
        att = softmax(scores, -1)
        out = matmul(att, v).transpose(1, 2).reshape(B, T, D)
        return self.o(out)


class Block(nn.Module):
    def __init__(self, dim: int, heads: int, ffn_dim: int):
        super().__init__()
        self.ln1 = nn.LayerNorm(dim, dtype=DTYPE)
        self.attn = Attention(dim, heads)
        self.ln2 = nn.LayerNorm(dim, dtype=DTYPE)
        self.fc1 = AdaptedLinear(dim, ffn_dim)
        self.fc2 = AdaptedLinear(ffn_dim, dim)

    def forward(self, x: torch.Tensor, allowed: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.ln1(x), allowed)
        return x + self.fc2(torch.nn.functional.gelu(self.fc1(self.ln2(x))))

    def projections(self) -> dict[str, AdaptedLinear]:
        return {"q": self.attn.q, "k": self.attn.k, "v": self.attn.v, "o": self.attn.o, "fc1": self.fc1, "fc2": self.fc2}


def causal_mask(lengths: list[int], T: int) -> torch.Tensor:
    """(B, T, T) boolean mask: causal within each sequence, padding rows see themselves."""
    tri = torch.ones(T, T, dtype=torch.bool).tril()
    out = tri.unsqueeze(0).repeat(len(lengths), 1, 1)
    for b, n in enumerate(lengths):
        out[b, :, n:] = False
        out[b, n:, :] = torch.eye(T, dtype=torch.bool)[n:]
    return out


def prefix_mask(prefix_lens: list[int], lengths: list[int], T: int) -> torch.Tensor:
    """Prefix positions attend bidirectionally among themselves; the rest is causal."""
    out = causal_mask(lengths, T)
    for b, (p, n) in enumerate(zip(prefix_lens, lengths)):
        out[b, :p, :p] = True
        out[b, p:n, :p] = True
    return out


def full_mask(lengths: list[int], T: int) -> torch.Tensor:
    out = torch.zeros(len(lengths), T, T, dtype=torch.bool)
    for b, n in enumerate(lengths):
        out[b, :n, :n] = True
        out[b, n:, :] = torch.eye(T, dtype=torch.bool)[n:]
    return out


class Stack(nn.Module):
    """Positional embedding, transformer blocks and final norm over input embeddings."""

    def __init__(self, layers: int, dim: int, heads: int, ffn_dim: int, max_positions: int):
        super().__init__()
        self.max_positions = max_positions
        self.pos = nn.Parameter(torch.randn(max_positions, dim, dtype=DTYPE) * 0.02)
        self.layers = nn.ModuleList([Block(dim, heads, ffn_dim) for _ in range(layers)])
        self.ln_f = nn.LayerNorm(dim, dtype=DTYPE)

    def forward(self, x: torch.Tensor, allowed: torch.Tensor) -> torch.Tensor:
        T = x.shape[1]
        if T > self.max_positions:
            raise ValueError(f"sequence length {T} exceeds max_positions {self.max_positions}")
        x = x + self.pos[:T]
        for blk in self.layers:
            x = blk(x, allowed)
        return self.ln_f(x)

    def attach_lora(self, cfg: LoraConfig, gen: torch.Generator) -> None:
        for blk in self.layers:
            for name, lin in blk.projections().items():
                if name in cfg.targets:
                    lin.attach(cfg.rank, cfg.scale, gen)

    def merge_lora(self) -> None:
        merged = 0
        for blk in self.layers:
            for lin in blk.projections().values():
                if lin.has_lora:
                    lin.merge()
                    merged += 1
        if not merged:
            raise RuntimeError("no LoRA adapter attached")

    @property
    def has_lora(self) -> bool:
        return any(lin.has_lora for blk in self.layers for lin in blk.projections().values())

    def lora_parameters(self) -> list[nn.Parameter]:
        out = []
        for blk in self.layers:
            for lin in blk.projections().values():
                if lin.has_lora:
                    out += [lin.lora_A, lin.lora_B]
        return out


def pad_ids(seqs: list[list[int]], pad: int = 0) -> tuple[torch.Tensor, list[int]]:
    lengths = [len(s) for s in seqs]
    T = max(lengths) if lengths else 0
    ids = torch.full((len(seqs), T), pad, dtype=torch.long)
    for b, s in enumerate(seqs):
        ids[b, : len(s)] = torch.as_tensor(s, dtype=torch.long)
    return ids, lengths


class TransformerLM(nn.Module):
    def __init__(self, cfg: LmConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        gen_state = torch.random.get_rng_state()
        torch.manual_seed(seed)
        self.tok = nn.Parameter(torch.randn(cfg.base_vocab, cfg.model_dim, dtype=DTYPE) * 0.02)
        self.acoustic: nn.Parameter | None = None
        self.stack = Stack(cfg.layers, cfg.model_dim, cfg.heads, cfg.ffn_dim, cfg.max_positions)
        torch.random.set_rng_state(gen_state)

    @property
    def vocab_size(self) -> int:
        return self.cfg.base_vocab + (0 if self.acoustic is None else self.acoustic.shape[0])

    @property
    def expanded(self) -> bool:
        return self.acoustic is not None

    def expand_vocab(self, extra: int, seed: int = 0) -> None:
        if extra < 1:
            raise ValueError("extra must be >= 1")
        if self.acoustic is not None:
            raise RuntimeError("vocabulary already expanded")
        std = float(self.tok.detach().std())
        gen = torch.Generator().manual_seed(seed)
        rows = torch.randn(extra, self.cfg.model_dim, generator=gen, dtype=DTYPE) * std
        self.acoustic = nn.Parameter(rows)

    def embed(self, ids: torch.Tensor) -> torch.Tensor:
        if ids.numel() and (int(ids.max()) >= self.vocab_size or int(ids.min()) < 0):
            raise ValueError(f"token id out of range [0, {self.vocab_size})")
        table = self.tok if self.acoustic is None else torch.cat([self.tok, self.acoustic], 0)
        return table[ids]

    def hidden(self, ids: torch.Tensor, lengths: list[int] | None = None) -> torch.Tensor:
        """Final-layer hidden states (after the last norm) under the causal mask."""
        if ids.dim() == 1:
            ids = ids.unsqueeze(0)
        B, T = ids.shape
        if lengths is None:
            lengths = [T] * B
        return self.stack(self.embed(ids), causal_mask(lengths, T))

    def head(self, h: torch.Tensor) -> torch.Tensor:
        logits = matmul(h, self.tok.t())
        if self.acoustic is None:
            return logits
        # separate product keeps the original-vocab logits bitwise unchanged by expansion
        return torch.cat([logits, matmul(h, self.acoustic.t())], -1)

    def forward(self, ids: torch.Tensor, lengths: list[int] | None = None) -> torch.Tensor:
        return self.head(self.hidden(ids, lengths))

    # adaptation ---------------------------------------------------------

    def attach_lora(self, cfg: LoraConfig, seed: int = 0, train_acoustic: bool = True) -> None:
        """Freeze the base weights and add low-rank adapters to the target projections."""
        if self.stack.has_lora:
            raise RuntimeError("LoRA adapter already attached")
        self.stack.attach_lora(cfg, torch.Generator().manual_seed(seed))
        self.lora_cfg = cfg
        lora = {id(p) for p in self.stack.lora_parameters()}
        for p in self.parameters():
            p.requires_grad_(id(p) in lora)
        if self.acoustic is not None and train_acoustic:
            self.acoustic.requires_grad_(True)

    def merge_lora(self) -> None:
        self.stack.merge_lora()
        for p in self.parameters():
            p.requires_grad_(True)


def lm_forward(model: TransformerLM, tokens: TokenSequence | list[int]) -> torch.Tensor:
    """Logits (T x V) for one token sequence."""
    ids = tokens.ids if isinstance(tokens, TokenSequence) else list(tokens)
    if len(ids) > model.cfg.max_positions:
        raise ValueError(f"sequence of {len(ids)} tokens exceeds max_positions {model.cfg.max_positions}")
    return model(torch.as_tensor(ids, dtype=torch.long).unsqueeze(0))[0]


def trainable_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters() if p.requires_grad)


def lora_census(layers: int, d_in: int, d_out: int, rank: int, n_targets: int = 4) -> int:
    """Adapter parameters for ``n_targets`` square projections per layer."""
    return layers * n_targets * rank * (d_in + d_out)
