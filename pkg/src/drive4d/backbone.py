"""Closed-vocabulary tokenizer and a small decoder-only language model.

The model consumes a vision-token prefix followed by text tokens under one
causal mask, and exposes every layer's hidden states so heads can read

    h = sum_i softmax(w)_i * F_i

or simply the last layer.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass

import torch
import torch.nn as nn

from .errors import LengthError, ShapeError

PAD, BOS, EOS, OCC_OPEN, OCC_CLOSE = 0, 1, 2, 3, 4
SPECIAL_TOKENS = ("<PAD>", "<BOS>", "<EOS>", "<OCC>", "</OCC>")

# Every QA string is covered by: template words, digits, and this
# punctuation set (multiplication sign included for the grid preamble).
_PUNCT = tuple(" .,:;?!'\"()[]{}-×")
_DIGITS = tuple("0123456789")
_LETTERS = tuple("abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ")
_WORD_RE = re.compile(r"[A-Za-z]+")


class Vocabulary:
    """Ordered token list with longest-match encoding and exact decoding."""

    def __init__(self, tokens: list[str]):
        if tuple(tokens[:5]) != SPECIAL_TOKENS:
            raise ValueError(f"tokens must start with specials {SPECIAL_TOKENS}")
        if len(set(tokens)) != len(tokens):
            raise ValueError("duplicate tokens")
        self.tokens = list(tokens)
        self.index = {t: i for i, t in enumerate(tokens)}
        # Longest-first matching order over non-special surface tokens.
        self._by_length = sorted(
            (t for t in tokens[5:]), key=len, reverse=True)
        self._maxlen = max((len(t) for t in self._by_length), default=1)

    def __len__(self) -> int:
        return len(self.tokens)

    def encode(self, text: str, add_bos: bool = False, add_eos: bool = False) -> list[int]:
        ids = [BOS] if add_bos else []
        i = 0
        n = len(text)
        while i < n:
            if text.startswith("<OCC>", i):
                ids.append(OCC_OPEN)
                i += 5
                continue
            if text.startswith("</OCC>", i):
                ids.append(OCC_CLOSE)
                i += 6
                continue
            match = None
            for cand in range(min(self._maxlen, n - i), 0, -1):
                piece = text[i:i + cand]
                idx = self.index.get(piece)
                if idx is not None and idx >= 5:
                    match = (idx, cand)
                    break
            if match is None:
                raise ValueError(f"untokenizable text at offset {i}: {text[i:i+20]!r}")
            ids.append(match[0])
            i += match[1]
        if add_eos:
            ids.append(EOS)
        return ids

    def decode(self, ids, stop_at_eos: bool = True) -> str:
        parts = []
        for t in ids:
            t = int(t)
            if t == EOS and stop_at_eos:
                break
            if t in (PAD, BOS):
                continue
            if t == OCC_OPEN:
                parts.append("<OCC>")
            elif t == OCC_CLOSE:
                parts.append("</OCC>")
            else:
                parts.append(self.tokens[t])
        return "".join(parts)


def build_vocabulary(texts) -> Vocabulary:
    """Specials + punctuation + digits + letters + words seen in `texts`.

    Single letters guarantee every alphabetic string stays encodable even
    when it never appeared verbatim in the harvest set.
    """
    words = set()
    for text in texts:
        words.update(_WORD_RE.findall(text))
    base = list(SPECIAL_TOKENS) + list(_PUNCT) + list(_DIGITS) + list(_LETTERS)
    vocab = base + sorted(w for w in words if len(w) > 1)
    return Vocabulary(vocab)


@dataclass(frozen=True)
class LmConfig:
    layers: int = 4
    hidden: int = 128
    heads: int = 4
    ffn: int = 256
    max_seq: int = 512
    vocab_size: int = 0

    def __post_init__(self):
        if self.hidden % self.heads:
            raise ShapeError(f"hidden {self.hidden} not divisible by heads {self.heads}")
        if self.layers < 1 or self.vocab_size < 5:
            raise ValueError("need at least 1 layer and the special tokens")

    def to_dict(self) -> dict:
        return {"layers": self.layers, "hidden": self.hidden, "heads": self.heads,
                "ffn": self.ffn, "max_seq": self.max_seq,
                "vocab_size": self.vocab_size}


def _rope_angles(seq: int, dim: int, device, dtype) -> tuple[torch.Tensor, torch.Tensor]:
    half = dim // 2
    freqs = torch.pow(10000.0, -torch.arange(0, half, device=device, dtype=dtype) / half)
    pos = torch.arange(seq, device=device, dtype=dtype)
    angles = pos[:, None] * freqs[None, :]
    return torch.cos(angles), torch.sin(angles)


def _rope_angles_at(positions: torch.Tensor, dim: int,
                    dtype) -> tuple[torch.Tensor, torch.Tensor]:
    """Angles for one slot per row: [B] positions -> [B, 1, 1, dim/2]."""
    half = dim // 2
    freqs = torch.pow(10000.0, -torch.arange(0, half, device=positions.device,
                                             dtype=dtype) / half)
    angles = positions.to(dtype)[:, None] * freqs[None, :]
    return (torch.cos(angles)[:, None, None, :],
            torch.sin(angles)[:, None, None, :])


def apply_rope(x: torch.Tensor, cos: torch.Tensor, sin: torch.Tensor) -> torch.Tensor:
    """Rotate pairs of channels by position-dependent angles.

    x: [B, heads, seq, head_dim] with even head_dim.
    """
    x1, x2 = x[..., 0::2], x[..., 1::2]
    out = torch.empty_like(x)
    out[..., 0::2] = x1 * cos - x2 * sin
    out[..., 1::2] = x1 * sin + x2 * cos
    return out


class CausalSelfAttention(nn.Module):
    def __init__(self, cfg: LmConfig):
        super().__init__()
        self.heads = cfg.heads
        self.head_dim = cfg.hidden // cfg.heads
        if self.head_dim % 2:
            raise ShapeError("head dim must be even for rotary positions")
        self.qkv = nn.Linear(cfg.hidden, 3 * cfg.hidden, bias=False)
        self.out = nn.Linear(cfg.hidden, cfg.hidden, bias=False)

    def forward(self, x: torch.Tensor, key_padding_mask: torch.Tensor | None,
                kv_sink: list | None = None) -> torch.Tensor:
        b, s, c = x.shape
        q, k, v = self.qkv(x).chunk(3, dim=-1)

        def split(t):
            return t.view(b, s, self.heads, self.head_dim).transpose(1, 2)

        q, k, v = split(q), split(k), split(v)
        cos, sin = _rope_angles(s, self.head_dim, x.device, x.dtype)
        q = apply_rope(q, cos, sin)
        k = apply_rope(k, cos, sin)
        if kv_sink is not None:
            kv_sink.append((k, v))

        logits = torch.matmul(q, k.transpose(-1, -2)) / math.sqrt(self.head_dim)
        causal = torch.ones(s, s, dtype=torch.bool, device=x.device).tril()
        logits = logits.masked_fill(~causal, float("-inf"))
        if key_padding_mask is not None:
            # True marks a real token; padded keys are hidden from everyone.
            logits = logits.masked_fill(~key_padding_mask[:, None, None, :],
                                        float("-inf"))
        att = torch.softmax(logits, dim=-1)
        out = torch.matmul(att, v).transpose(1, 2).reshape(b, s, c)
        return self.out(out)

    def decode_step(self, x: torch.Tensor, k_cache: torch.Tensor,
                    v_cache: torch.Tensor, key_mask: torch.Tensor,
                    positions: torch.Tensor) -> torch.Tensor:
        """One-token attention against cached keys/values.

        x: [B, 1, C]; caches: [B, H, W, Dh]; key_mask: [B, W] with this
        token's slot already marked; positions: [B] slot per row.  Writes the
        new key/value into the caches in place.
        """
        b = x.shape[0]
        q, k, v = self.qkv(x).chunk(3, dim=-1)

        def split(t):
            return t.view(b, 1, self.heads, self.head_dim).transpose(1, 2)

        q, k, v = split(q), split(k), split(v)
        cos, sin = _rope_angles_at(positions, self.head_dim, x.dtype)
        q = apply_rope(q, cos, sin)
        k = apply_rope(k, cos, sin)
        idx = positions.view(b, 1, 1, 1).expand(b, self.heads, 1, self.head_dim)
        k_cache.scatter_(2, idx, k)
        v_cache.scatter_(2, idx, v)

        logits = torch.matmul(q, k_cache.transpose(-1, -2)) / math.sqrt(self.head_dim)
        logits = logits.masked_fill(~key_mask[:, None, None, :], float("-inf"))
        att = torch.softmax(logits, dim=-1)
        out = torch.matmul(att, v_cache).transpose(1, 2).reshape(b, 1, -1)
        return self.out(out)


class Block(nn.Module):
    def __init__(self, cfg: LmConfig):
        super().__init__()
        self.ln1 = nn.LayerNorm(cfg.hidden)
        self.attn = CausalSelfAttention(cfg)
        self.ln2 = nn.LayerNorm(cfg.hidden)
        self.mlp = nn.Sequential(
            nn.Linear(cfg.hidden, cfg.ffn), nn.GELU(), nn.Linear(cfg.ffn, cfg.hidden))

    def forward(self, x, key_padding_mask, kv_sink=None):
        x = x + self.attn(self.ln1(x), key_padding_mask, kv_sink=kv_sink)
        return x + self.mlp(self.ln2(x))

    def decode_step(self, x, k_cache, v_cache, key_mask, positions):
        x = x + self.attn.decode_step(self.ln1(x), k_cache, v_cache,
                                      key_mask, positions)
        return x + self.mlp(self.ln2(x))


@dataclass
class DecodeCache:
    """Per-layer rotated key/value tensors for incremental decoding.

    mask marks valid key slots; positions holds each row's next write slot,
    which equals that row's true sequence length so far.
    """

    k: list[torch.Tensor]
    v: list[torch.Tensor]
    mask: torch.Tensor
    positions: torch.Tensor

    def select(self, rows: torch.Tensor) -> "DecodeCache":
        return DecodeCache(k=[t[rows] for t in self.k],
                           v=[t[rows] for t in self.v],
                           mask=self.mask[rows],
                           positions=self.positions[rows])


class TinyLm(nn.Module):
    """Decoder-only transformer over [vision prefix || text tokens]."""

    def __init__(self, cfg: LmConfig):
        super().__init__()
        self.cfg = cfg
        self.embed = nn.Embedding(cfg.vocab_size, cfg.hidden)
        self.blocks = nn.ModuleList(Block(cfg) for _ in range(cfg.layers))
        self.ln_f = nn.LayerNorm(cfg.hidden)
        # One logit per hidden-state level (embeddings + each block).
        self.state_weights = nn.Parameter(torch.zeros(cfg.layers + 1))
        self.apply(self._init)

    @staticmethod
    def _init(m):
        if isinstance(m, nn.Linear):
            nn.init.normal_(m.weight, std=0.02)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.Embedding):
            nn.init.normal_(m.weight, std=0.02)

    def forward(self, vision: torch.Tensor | None, text_ids: torch.Tensor,
                key_padding_mask: torch.Tensor | None = None,
                kv_sink: list | None = None) -> list[torch.Tensor]:
        """Returns layers+1 hidden states, each [B, N+T, hidden]."""
        if text_ids.dim() == 1:
            text_ids = text_ids[None, :]
        x = self.embed(text_ids)
        if vision is not None:
            if vision.dim() == 2:
                vision = vision[None]
            if vision.shape[-1] != self.cfg.hidden:
                raise ShapeError(
                    f"vision width {vision.shape[-1]} != hidden {self.cfg.hidden}")
            x = torch.cat([vision.to(x.dtype), x], dim=1)
            if key_padding_mask is not None:
                pad = torch.ones(x.shape[0], vision.shape[1], dtype=torch.bool,
                                 device=x.device)
                key_padding_mask = torch.cat([pad, key_padding_mask], dim=1)
        if x.shape[1] > self.cfg.max_seq:
            raise LengthError(f"sequence {x.shape[1]} exceeds max {self.cfg.max_seq}")
        states = [x]
        for block in self.blocks:
            x = block(x, key_padding_mask, kv_sink=kv_sink)
            states.append(x)
        states[-1] = self.ln_f(states[-1])
        return states

    def prefill(self, vision: torch.Tensor | None, text_ids: torch.Tensor,
                key_padding_mask: torch.Tensor | None, capacity: int):
        """Full forward that also builds a DecodeCache of width `capacity`."""
        if capacity > self.cfg.max_seq:
            raise LengthError(f"capacity {capacity} exceeds max {self.cfg.max_seq}")
        sink: list[tuple[torch.Tensor, torch.Tensor]] = []
        states = self.forward(vision, text_ids, key_padding_mask, kv_sink=sink)
        b, cur, _ = states[0].shape
        if capacity < cur:
            raise LengthError(f"capacity {capacity} below prompt width {cur}")
        ks, vs = [], []
        for k, v in sink:
            kc = k.new_zeros(b, k.shape[1], capacity, k.shape[3])
            vc = v.new_zeros(b, v.shape[1], capacity, v.shape[3])
            kc[:, :, :cur] = k
            vc[:, :, :cur] = v
            ks.append(kc)
            vs.append(vc)
        mask = torch.zeros(b, capacity, dtype=torch.bool, device=states[0].device)
        if key_padding_mask is None:
            mask[:, :cur] = True
        else:
            n_vis = cur - key_padding_mask.shape[1]
            mask[:, :n_vis] = True
            mask[:, n_vis:cur] = key_padding_mask
        cache = DecodeCache(k=ks, v=vs, mask=mask,
                            positions=mask[:, :cur].sum(dim=1))
        return states, cache

    def decode_step(self, cache: DecodeCache,
                    new_ids: torch.Tensor) -> list[torch.Tensor]:
        """Advance every row by one token; returns states at the new slot."""
        b = new_ids.shape[0]
        pos = cache.positions
        if int(pos.max()) >= cache.mask.shape[1]:
            raise LengthError("decode cache is full")
        cache.mask[torch.arange(b), pos] = True
        x = self.embed(new_ids[:, None])
        states = [x]
        for layer, block in enumerate(self.blocks):
            x = block.decode_step(x, cache.k[layer], cache.v[layer],
                                  cache.mask, pos)
            states.append(x)
        states[-1] = self.ln_f(states[-1])
        cache.positions = pos + 1
        return states

    def combine_hidden(self, states: list[torch.Tensor],
                       mode: str = "last") -> torch.Tensor:
        if len(states) != self.cfg.layers + 1:
            raise ShapeError(f"expected {self.cfg.layers + 1} states, got {len(states)}")
        if mode == "last":
            return states[-1]
        if mode == "weighted":
            w = torch.softmax(self.state_weights, dim=0)
            stacked = torch.stack(states, dim=0)
            return torch.einsum("l,l...->...", w.to(stacked.dtype), stacked)
        raise ValueError(f"unknown combine mode {mode!r}")

    def state_weight_values(self) -> torch.Tensor:
        return torch.softmax(self.state_weights.detach(), dim=0)


def extract_vision_states(combined: torch.Tensor, n: int) -> torch.Tensor:
    """First n positions (the vision prefix) of combined hidden states."""
    if combined.shape[-2] < n:
        raise LengthError(f"sequence {combined.shape[-2]} shorter than prefix {n}")
    return combined[..., :n, :]
