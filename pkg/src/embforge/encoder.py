"""Small transformer text encoder with mean pooling.

Token embeddings plus sinusoidal positions feed ``layers`` pre-norm attention
blocks; the causal mask is switchable so the bidirectional/causal ablation can
be run. The sequence embedding is the mean of the non-pad hidden states.
"""
from __future__ import annotations

import hashlib
import json
import math
import os
import re
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
from torch import nn

from .errors import ConfigError, DataError, InputError, NumericError
from .templates import format_query

PAD, UNK = "[PAD]", "[UNK]"
_TOKEN_RE = re.compile(r"\w+|[^\w\s]")
_MAGIC = b"EMBFORGE-CKPT\x01"


class Tokenizer:
    """Lowercasing word/punctuation tokenizer over a closed vocabulary."""

    def __init__(self, tokens: Sequence[str], max_len: int = 512):
        tokens = list(tokens)
        if tokens[:2] != [PAD, UNK]:
            tokens = [PAD, UNK] + [t for t in tokens if t not in (PAD, UNK)]
        self.tokens = tokens
        self.vocab = {t: i for i, t in enumerate(tokens)}
        if len(self.vocab) != len(tokens):
            raise ConfigError("duplicate tokens in vocabulary")
        self.pad_id, self.unk_id = 0, 1
        self.max_len = max_len

    @staticmethod
    def split(text: str) -> list[str]:
        return _TOKEN_RE.findall(text.lower())

    @classmethod
    def build(cls, texts: Iterable[str], max_len: int = 512) -> "Tokenizer":
        seen = sorted({tok for text in texts for tok in cls.split(text)})
        return cls(seen, max_len=max_len)

    def __len__(self) -> int:
        return len(self.tokens)

    def __call__(self, text: str) -> list[int]:
        if not text or not text.strip():
            raise InputError("cannot tokenize empty text")
        ids = [self.vocab.get(tok, self.unk_id) for tok in self.split(text)]
        if not ids:
            raise InputError(f"text has no tokens: {text!r}")
        return ids[: self.max_len]

    @property
    def vocab_hash(self) -> str:
        return hashlib.sha256("\n".join(self.tokens).encode()).hexdigest()[:16]


def tokenize(text: str, tokenizer: Tokenizer) -> list[int]:
    return tokenizer(text)


@dataclass(frozen=True)
class EncoderConfig:
    vocab_size: int
    dim: int = 64
    layers: int = 2
    heads: int = 4
    max_len: int = 512
    mask_mode: str = "bidirectional"
    positional: bool = True
    ffn_mult: int = 4

    def __post_init__(self):
        if self.mask_mode not in ("bidirectional", "causal"):
            raise ConfigError(f"unknown mask_mode {self.mask_mode!r}")
        if self.layers < 0 or self.dim < 1:
            raise ConfigError("layers must be >= 0 and dim >= 1")
        if self.layers and self.dim % self.heads:
            raise ConfigError(f"dim {self.dim} not divisible by heads {self.heads}")


def sinusoidal_positions(length: int, dim: int, dtype=torch.float32) -> torch.Tensor:
    pos = torch.arange(length, dtype=torch.float64)[:, None]
    i = torch.arange(0, dim, 2, dtype=torch.float64)
    angle = pos / torch.pow(10000.0, i / dim)
    pe = torch.zeros(length, dim, dtype=torch.float64)
    pe[:, 0::2] = torch.sin(angle)
    pe[:, 1::2] = torch.cos(angle[:, : dim // 2])
    return pe.to(dtype)


class Block(nn.Module):
    def __init__(self, dim: int, heads: int, ffn_mult: int):
        super().__init__()
        self.heads = heads
        self.ln1 = nn.RMSNorm(dim)
        self.wq = nn.Linear(dim, dim, bias=False)
        self.wk = nn.Linear(dim, dim, bias=False)
        self.wv = nn.Linear(dim, dim, bias=False)
        self.wo = nn.Linear(dim, dim, bias=False)
        self.ln2 = nn.RMSNorm(dim)
        self.ff1 = nn.Linear(dim, ffn_mult * dim, bias=False)
        self.ff2 = nn.Linear(ffn_mult * dim, dim, bias=False)

    def forward(self, x: torch.Tensor, allowed: torch.Tensor):
        b, n, d = x.shape
        dh = d // self.heads
        h = self.ln1(x)

        def split(t):
            return t.view(b, n, self.heads, dh).transpose(1, 2)

        q, k, v = split(self.wq(h)), split(self.wk(h)), split(self.wv(h))
        scores = q @ k.transpose(-1, -2) / math.sqrt(dh)
        scores = scores.masked_fill(~allowed[:, None], float("-inf"))
        attn = torch.softmax(scores, dim=-1)
        ctx = (attn @ v).transpose(1, 2).reshape(b, n, d)
        x = x + self.wo(ctx)
        x = x + self.ff2(nn.functional.gelu(self.ff1(self.ln2(x))))
        return x, attn


class Encoder(nn.Module):
    """Trainable encoder; owns its tokenizer so checkpoints are self-contained."""

    def __init__(self, config: EncoderConfig, tokenizer: Tokenizer, seed: int = 0):
        super().__init__()
        if config.vocab_size != len(tokenizer):
            raise ConfigError(
                f"config vocab_size {config.vocab_size} != tokenizer size {len(tokenizer)}"
            )
        self.config = config
        self.tokenizer = tokenizer
        self.embed = nn.Embedding(config.vocab_size, config.dim)
        self.blocks = nn.ModuleList(
            Block(config.dim, config.heads, config.ffn_mult) for _ in range(config.layers)
        )
        self.final_ln = nn.RMSNorm(config.dim) if config.layers else None
        self.register_buffer(
            "pe", sinusoidal_positions(config.max_len, config.dim, torch.float64), persistent=False
        )
        self.reset_parameters(seed)

    @classmethod
    def from_texts(cls, texts: Iterable[str], seed: int = 0, **kw) -> "Encoder":
        tok = Tokenizer.build(texts, max_len=kw.get("max_len", 512))
        return cls(EncoderConfig(vocab_size=len(tok), **kw), tok, seed=seed)

    def reset_parameters(self, seed: int) -> None:
        gen = torch.Generator().manual_seed(int(seed))
        depth_scale = 1.0 / math.sqrt(2 * max(1, self.config.layers))
        with torch.no_grad():
            for name, p in self.named_parameters():
                if ".ln" in name or name.startswith("final_ln"):
                    p.fill_(1.0 if name.endswith("weight") else 0.0)
                elif name == "embed.weight":
                    p.copy_(torch.randn(p.shape, generator=gen))
                else:
                    std = 1.0 / math.sqrt(p.shape[1])
                    if name.endswith(("wo.weight", "ff2.weight")):
                        std *= depth_scale
                    p.copy_(torch.randn(p.shape, generator=gen) * std)

    # -- forward -----------------------------------------------------------

    def batch_ids(self, seqs: Sequence[Sequence[int]]) -> tuple[torch.Tensor, torch.Tensor]:
        if not seqs:
            raise InputError("empty batch")
        lengths = torch.tensor([len(s) for s in seqs], dtype=torch.long)
        if int(lengths.min()) < 1:
            raise InputError("empty token sequence")
        ids = torch.full((len(seqs), int(lengths.max())), self.tokenizer.pad_id, dtype=torch.long)
        for i, s in enumerate(seqs):
            ids[i, : len(s)] = torch.as_tensor(list(s), dtype=torch.long)
        return ids, lengths

    def hidden_states(self, ids: torch.Tensor, lengths: torch.Tensor, return_attention=False):
        """Contextual token states (B, L, d), optionally with per-layer attention maps."""
        if ids.numel() and (int(ids.max()) >= self.config.vocab_size or int(ids.min()) < 0):
            raise InputError("token id out of range")
        b, n = ids.shape
        if n > self.config.max_len:
            raise InputError(f"sequence length {n} exceeds max_len {self.config.max_len}")
        x = self.embed(ids)
        if self.config.positional:
            x = x + self.pe[:n].to(x.dtype)
        valid = torch.arange(n)[None, :] < lengths[:, None]
        allowed = valid[:, None, :].expand(b, n, n)
        if self.config.mask_mode == "causal":
            allowed = allowed & torch.ones(n, n, dtype=torch.bool).tril()
        maps = []
        for li, block in enumerate(self.blocks):
            x, attn = block(x, allowed)
            if not torch.isfinite(x).all():
                raise NumericError(f"non-finite hidden state after layer {li}")
            maps.append(attn)
        if self.final_ln is not None:
            x = self.final_ln(x)
        return (x, maps) if return_attention else x

    def forward(self, ids: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor:
        states = self.hidden_states(ids, lengths)
        valid = (torch.arange(ids.shape[1])[None, :] < lengths[:, None]).to(states.dtype)
        return (states * valid[..., None]).sum(1) / lengths[:, None].to(states.dtype)

    def encode_texts(self, texts: Sequence[str]) -> torch.Tensor:
        """Mean-pooled, unnormalized embeddings for raw strings."""
        return self(*self.batch_ids([self.tokenizer(t) for t in texts]))

    def encode_texts_chunked(self, texts: Sequence[str], chunk: int = 256) -> torch.Tensor:
        with torch.no_grad():
            parts = [self.encode_texts(texts[i : i + chunk]) for i in range(0, len(texts), chunk)]
        return torch.cat(parts) if parts else torch.empty(0, self.config.dim)


def encode(seq: Sequence[int], encoder: Encoder) -> torch.Tensor:
    return encoder(*encoder.batch_ids([seq]))[0]


def encode_instructed(instruction: str, query: str, encoder: Encoder) -> torch.Tensor:
    return encode(encoder.tokenizer(format_query(instruction, query)), encoder)


def encoder_gradients(loss_fn, encoder: Encoder, frozen: Iterable[str] = ()) -> dict:
    """Gradients of ``loss_fn(encoder)`` for every named parameter.

    Parameters named in ``frozen`` get an all-zero block.
    """
    frozen = set(frozen)
    named = [(n, p) for n, p in encoder.named_parameters() if n not in frozen]
    loss = loss_fn(encoder)
    if not torch.isfinite(loss):
        raise NumericError("non-finite loss")
    grads = torch.autograd.grad(loss, [p for _, p in named], allow_unused=True)
    out = {}
    for (name, p), g in zip(named, grads):
        g = torch.zeros_like(p) if g is None else g
        if not torch.isfinite(g).all():
            raise NumericError(f"non-finite gradient in {name}")
        out[name] = g
    for name, p in encoder.named_parameters():
        if name in frozen:
            out[name] = torch.zeros_like(p)
    return out


# -- checkpoint container -----------------------------------------------------


def save_checkpoint(encoder: Encoder, path) -> None:
    """Header JSON plus raw little-endian tensors; written via temp file + rename."""
    state = encoder.state_dict()
    entries, blobs, offset = [], [], 0
    for name, t in state.items():
        arr = np.ascontiguousarray(t.detach().cpu().numpy())
        data = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": str(arr.dtype),
                        "offset": offset, "nbytes": len(data)})
        blobs.append(data)
        offset += len(data)
    header = {
        "config": asdict(encoder.config),
        "vocab": encoder.tokenizer.tokens,
        "vocab_hash": encoder.tokenizer.vocab_hash,
        "tensors": entries,
    }
    raw = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(raw)))
        fh.write(raw)
        for b in blobs:
            fh.write(b)
    os.replace(tmp, path)


def load_checkpoint(path, expect: EncoderConfig | None = None) -> Encoder:
    blob = Path(path).read_bytes()
    if not blob.startswith(_MAGIC):
        raise ConfigError(f"{path}: not an embforge checkpoint")
    pos = len(_MAGIC)
    try:
        (hlen,) = struct.unpack("<Q", blob[pos : pos + 8])
        pos += 8
        header = json.loads(blob[pos : pos + hlen])
    except (struct.error, ValueError) as e:
        raise DataError(f"{path}: corrupt checkpoint header ({e})") from None
    pos += hlen
    if pos + sum(e["nbytes"] for e in header["tensors"]) > len(blob):
        raise DataError(f"{path}: checkpoint is truncated")
    config = EncoderConfig(**header["config"])
    if expect is not None and expect != config:
        raise ConfigError(f"checkpoint config {config} does not match expected {expect}")
    tok = Tokenizer(header["vocab"], max_len=config.max_len)
    if tok.vocab_hash != header["vocab_hash"]:
        raise ConfigError("checkpoint vocabulary hash mismatch")
    enc = Encoder(config, tok)
    state = {}
    for e in header["tensors"]:
        arr = np.frombuffer(blob, dtype=np.dtype(e["dtype"]).newbyteorder("<"),
                            count=int(np.prod(e["shape"], dtype=np.int64)),
                            offset=pos + e["offset"])
        state[e["name"]] = torch.from_numpy(arr.astype(e["dtype"]).reshape(e["shape"]))
    enc.load_state_dict(state)
    return enc.to(state["embed.weight"].dtype)
