import math
from dataclasses import asdict, dataclass
from typing import Callable, Optional, Sequence, Tuple

import torch
import torch.nn as nn

from loss import create_criterion
from ops import DTYPE, Rng, ShapeError, gelu, layer_norm, matmul, softmax


class CandidateError(IndexError):
    pass


class SequenceLengthError(ValueError):
    pass


# (slot, hidden[B, S, C]) -> candidate weights broadcastable to [B, S, K]
Gating = Callable[[int, torch.Tensor], torch.Tensor]
# (layer, name, tensor) observer used by importance scoring
Taps = Callable[[int, str, torch.Tensor], None]


def _check_nested(name, sizes, maximum):
    if any(b <= a for a, b in zip(sizes, sizes[1:])) or sizes[0] <= 0:
        raise ValueError(f"{name} should be positive and strictly increasing, {sizes}")
    if sizes[-1] != maximum:
        raise ValueError(f"largest of {name} should equal {maximum}, {sizes}")


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 256
    embed_dim: int = 64
    num_layers: int = 4
    num_heads: int = 4
    head_dim: int = 16
    mlp_hidden: int = 256
    context_len: int = 64
    mlp_widths: Tuple[int, ...] = (64, 128, 192, 256)
    head_counts: Tuple[int, ...] = (1, 2, 3, 4)
    init_std: float = 0.02
    ln_eps: float = 1e-5

    def __post_init__(self):
        object.__setattr__(self, "mlp_widths", tuple(int(w) for w in self.mlp_widths))
        object.__setattr__(self, "head_counts", tuple(int(h) for h in self.head_counts))
        for name in ("vocab_size", "embed_dim", "num_layers", "num_heads", "head_dim", "mlp_hidden", "context_len"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} should be positive, {getattr(self, name)}")
        if self.embed_dim != self.num_heads * self.head_dim:
            raise ValueError(
                f"embed_dim ({self.embed_dim}) should equal num_heads * head_dim ({self.num_heads} * {self.head_dim})"
            )
        if not self.mlp_widths or len(self.mlp_widths) != len(self.head_counts):
            raise ValueError(f"mlp_widths and head_counts need the same number of candidates, "
                             f"{self.mlp_widths} vs {self.head_counts}")
        _check_nested("mlp_widths", self.mlp_widths, self.mlp_hidden)
        _check_nested("head_counts", self.head_counts, self.num_heads)

    @property
    def candidates_per_layer(self):
        return len(self.mlp_widths)

    @property
    def num_slots(self):
        return 2 * self.num_layers

    @classmethod
    def from_dict(cls, values):
        values = dict(values)
        k = values.pop("candidates_per_layer", None)
        config = cls(**values)
        if k is not None and int(k) != config.candidates_per_layer:
            raise ValueError(f"candidates_per_layer={k} disagrees with {config.candidates_per_layer} listed widths")
        return config

    def to_dict(self):
        values = asdict(self)
        values["mlp_widths"] = list(self.mlp_widths)
        values["head_counts"] = list(self.head_counts)
        return values


@dataclass(frozen=True)
class Selection:
    """Per-layer candidate choice for the MHA and the MLP of every layer (0-based)."""

    mha: Tuple[int, ...]
    mlp: Tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "mha", tuple(int(j) for j in self.mha))
        object.__setattr__(self, "mlp", tuple(int(j) for j in self.mlp))
        if len(self.mha) != len(self.mlp):
            raise ValueError(f"mha and mlp choices differ in length, {len(self.mha)} vs {len(self.mlp)}")

    @classmethod
    def full(cls, config: ModelConfig) -> "Selection":
        return cls.uniform(config, config.candidates_per_layer - 1)

    @classmethod
    def minimal(cls, config: ModelConfig) -> "Selection":
        return cls.uniform(config, 0)

    @classmethod
    def uniform(cls, config: ModelConfig, candidate: int) -> "Selection":
        return cls((candidate,) * config.num_layers, (candidate,) * config.num_layers)

    @classmethod
    def from_slots(cls, slots: Sequence[int]) -> "Selection":
        slots = [int(s) for s in slots]
        if len(slots) % 2:
            raise ValueError(f"slot list should hold an MHA and an MLP choice per layer, got {len(slots)}")
        return cls(tuple(slots[0::2]), tuple(slots[1::2]))

    @property
    def slots(self):
        """Interleaved choices: slot 2i is the MHA of layer i, slot 2i+1 its MLP."""
        return tuple(j for pair in zip(self.mha, self.mlp) for j in pair)

    @property
    def num_layers(self):
        return len(self.mha)

    def validate(self, config: ModelConfig) -> "Selection":
        if self.num_layers != config.num_layers:
            raise CandidateError(f"selection covers {self.num_layers} layers, model has {config.num_layers}")
        k = config.candidates_per_layer
        for slot, j in enumerate(self.slots):
            if not 0 <= j < k:
                raise CandidateError(f"candidate {j} of slot {slot} outside [0, {k - 1}]")
        return self

    def dominated_by(self, other):
        return all(a <= b for a, b in zip(self.slots, other.slots))

    def describe(self):
        return "mha=" + ".".join(map(str, self.mha)) + ";mlp=" + ".".join(map(str, self.mlp))

    @classmethod
    def parse(cls, text: str) -> "Selection":
        parts = dict(part.split("=") for part in text.split(";"))
        return cls(tuple(int(j) for j in parts["mha"].split(".")), tuple(int(j) for j in parts["mlp"].split(".")))


def causal_mask(seq_len):
    return torch.ones(seq_len, seq_len, dtype=torch.bool).tril()


def attention_heads(x, wq, wk, wv, mask):
    """Per-head scaled dot-product attention outputs [B, h, S, H] for head-blocks of shape [h, H, C]."""
    if mask.shape != (x.shape[1], x.shape[1]):
        raise ShapeError(f"mask of shape {tuple(mask.shape)} does not match sequence length {x.shape[1]}")
    q = torch.einsum("bsc,hdc->bhsd", x, wq)
    k = torch.einsum("bsc,hdc->bhsd", x, wk)
    v = torch.einsum("bsc,hdc->bhsd", x, wv)
    scores = matmul(q, k.transpose(-1, -2)) / math.sqrt(wq.shape[1])
    scores = scores.masked_fill(~mask, float("-inf"))
    return matmul(softmax(scores, axis=-1), v)


def merge_heads(heads, wo):
    batch, num_heads, seq_len, head_dim = heads.shape
    return matmul(heads.transpose(1, 2).reshape(batch, seq_len, num_heads * head_dim), wo)


class TransformerBlock(nn.Module):
    """Pre-norm block; W^Q/W^K/W^V stored as head-blocks [L, H, C], W^O as [L*H, C], W1/W2 as [D, C]."""

    def __init__(self, embed_dim, num_heads, head_dim, mlp_hidden, ln_eps=1e-5):
        super().__init__()
        self.head_dim = head_dim
        self.ln_eps = ln_eps
        self.ln1_gain = nn.Parameter(torch.ones(embed_dim, dtype=DTYPE))
        self.ln1_bias = nn.Parameter(torch.zeros(embed_dim, dtype=DTYPE))
        self.wq = nn.Parameter(torch.zeros(num_heads, head_dim, embed_dim, dtype=DTYPE))
        self.wk = nn.Parameter(torch.zeros(num_heads, head_dim, embed_dim, dtype=DTYPE))
        self.wv = nn.Parameter(torch.zeros(num_heads, head_dim, embed_dim, dtype=DTYPE))
        self.wo = nn.Parameter(torch.zeros(num_heads * head_dim, embed_dim, dtype=DTYPE))
        self.ln2_gain = nn.Parameter(torch.ones(embed_dim, dtype=DTYPE))
        self.ln2_bias = nn.Parameter(torch.zeros(embed_dim, dtype=DTYPE))
        self.w1 = nn.Parameter(torch.zeros(mlp_hidden, embed_dim, dtype=DTYPE))
        self.w2 = nn.Parameter(torch.zeros(mlp_hidden, embed_dim, dtype=DTYPE))

    def attend(self, x, mask, heads: int, taps: Optional[Taps] = None, layer: int = 0):
        out = attention_heads(x, self.wq[:heads], self.wk[:heads], self.wv[:heads], mask)
        if taps is not None:
            taps(layer, "heads", out)
        return merge_heads(out, self.wo[:heads * self.head_dim])

    def feed_forward(self, x, width: int):
        return matmul(gelu(matmul(x, self.w1[:width].t())), self.w2[:width])

    def attend_gated(self, x, mask, keep):
        """keep: [B, S, L] per-token head weights applied before W^O."""
        out = attention_heads(x, self.wq, self.wk, self.wv, mask)
        out = out * keep.permute(0, 2, 1).unsqueeze(-1)
        return merge_heads(out, self.wo)

    def feed_forward_gated(self, x, keep):
        """keep: [B, S, D] per-token neuron weights applied after the activation."""
        return matmul(gelu(matmul(x, self.w1.t())) * keep, self.w2)

    def norm1(self, x):
        return layer_norm(x, self.ln1_gain, self.ln1_bias, self.ln_eps)

    def norm2(self, x):
        return layer_norm(x, self.ln2_gain, self.ln2_bias, self.ln_eps)

    def forward(self, x, mask):
        x = x + self.attend(self.norm1(x), mask, self.wq.shape[0])
        return x + self.feed_forward(self.norm2(x), self.w1.shape[0])


class ElasticBlock(TransformerBlock):
    def __init__(self, config: ModelConfig):
        super().__init__(config.embed_dim, config.num_heads, config.head_dim, config.mlp_hidden, config.ln_eps)
        self.head_counts = config.head_counts
        self.mlp_widths = config.mlp_widths
        # nested masks: row j keeps the first d_j heads / neurons
        self.register_buffer("head_mask", _prefix_masks(config.head_counts, config.num_heads), persistent=False)
        self.register_buffer("neuron_mask", _prefix_masks(config.mlp_widths, config.mlp_hidden), persistent=False)

    @property
    def num_candidates(self):
        return len(self.mlp_widths)

    def _check(self, j):
        if not 0 <= j < self.num_candidates:
            raise CandidateError(f"candidate {j} outside [0, {self.num_candidates - 1}]")

    def forward(self, x, mask, mha_choice: int, mlp_choice: int, taps: Optional[Taps] = None, layer: int = 0):
        x = x + elastic_mha_forward(self.norm1(x), self, mha_choice, mask, taps=taps, layer=layer)
        h = self.norm2(x)
        if taps is not None:
            taps(layer, "mlp_input", h)
        return x + elastic_mlp_forward(h, self, mlp_choice)

    def gated_forward(self, x, mask, gating: Gating, layer: int):
        weights = gating(2 * layer, x)
        x = x + self.attend_gated(self.norm1(x), mask, matmul(weights.expand(*x.shape[:2], -1), self.head_mask))
        weights = gating(2 * layer + 1, x)
        return x + self.feed_forward_gated(self.norm2(x), matmul(weights.expand(*x.shape[:2], -1), self.neuron_mask))


def _prefix_masks(sizes, maximum):
    return (torch.arange(maximum).unsqueeze(0) < torch.tensor(sizes).unsqueeze(1)).to(DTYPE)


def elastic_mlp_forward(x, block: ElasticBlock, j: int):
    """sigma(X W1[:d_j]^T) W2[:d_j]."""
    block._check(j)
    return block.feed_forward(x, block.mlp_widths[j])


def elastic_mha_forward(x, block: ElasticBlock, j: int, mask, taps: Optional[Taps] = None, layer: int = 0):
    """Concat(head_1..head_{d_j}) W^O[:d_j H]."""
    block._check(j)
    return block.attend(x, mask, block.head_counts[j], taps=taps, layer=layer)


def _embed(tokens, tok_emb, pos_emb, context_len):
    if tokens.dim() != 2:
        raise ShapeError(f"tokens should be an index matrix [B, S], got {tuple(tokens.shape)}")
    seq_len = tokens.shape[1]
    if seq_len > context_len:
        raise SequenceLengthError(f"sequence of {seq_len} tokens exceeds context length {context_len}")
    if tokens.numel() and (int(tokens.min()) < 0 or int(tokens.max()) >= tok_emb.shape[0]):
        raise IndexError(f"token index outside vocabulary of {tok_emb.shape[0]}")
    return tok_emb[tokens] + pos_emb[:seq_len]


def _lm_loss(logits, tokens, reduction):
    if tokens.shape[1] < 2:
        raise SequenceLengthError(f"next-token loss needs at least 2 tokens, got {tokens.shape[1]}")
    return create_criterion('lm', reduction=reduction)(logits, tokens)


class ElasticModel(nn.Module):
    def __init__(self, config: ModelConfig, rng: Optional[Rng] = None):
        super().__init__()
        self.config = config
        self.tok_emb = nn.Parameter(torch.zeros(config.vocab_size, config.embed_dim, dtype=DTYPE))
        self.pos_emb = nn.Parameter(torch.zeros(config.context_len, config.embed_dim, dtype=DTYPE))
        self.blocks = nn.ModuleList([ElasticBlock(config) for _ in range(config.num_layers)])
        self.lnf_gain = nn.Parameter(torch.ones(config.embed_dim, dtype=DTYPE))
        self.lnf_bias = nn.Parameter(torch.zeros(config.embed_dim, dtype=DTYPE))
        self.reset_parameters(rng if rng is not None else Rng(0))

    def reset_parameters(self, rng: Rng):
        init = rng.stream("init")
        std = self.config.init_std
        proj_std = std / math.sqrt(2 * self.config.num_layers)
        with torch.no_grad():
            self.tok_emb.copy_(init.normal(self.tok_emb.shape, std))
            self.pos_emb.copy_(init.normal(self.pos_emb.shape, std))
            for block in self.blocks:
                for name in ("wq", "wk", "wv", "w1"):
                    weight = getattr(block, name)
                    weight.copy_(init.normal(weight.shape, std))
                block.wo.copy_(init.normal(block.wo.shape, proj_std))
                block.w2.copy_(init.normal(block.w2.shape, proj_std))

    def forward(self, tokens, sel: Optional[Selection] = None, gating: Optional[Gating] = None,
                taps: Optional[Taps] = None, return_hidden: bool = False):
        """Logits [B, S, V] of the sub-network picked by ``sel`` (full model when omitted).

        With ``gating`` every slot mixes its nested candidates with per-token weights instead.
        """
        x = _embed(tokens, self.tok_emb, self.pos_emb, self.config.context_len)
        mask = causal_mask(tokens.shape[1])
        if gating is None:
            sel = (sel or Selection.full(self.config)).validate(self.config)
            for i, block in enumerate(self.blocks):
                x = block(x, mask, sel.mha[i], sel.mlp[i], taps=taps, layer=i)
        else:
            for i, block in enumerate(self.blocks):
                x = block.gated_forward(x, mask, gating, i)
        hidden = x
        x = layer_norm(x, self.lnf_gain, self.lnf_bias, self.config.ln_eps)
        logits = matmul(x, self.tok_emb.t())
        return (logits, hidden) if return_hidden else logits

    def lm_loss(self, tokens, sel: Optional[Selection] = None, gating: Optional[Gating] = None, reduction='mean'):
        return _lm_loss(self(tokens, sel=sel, gating=gating), tokens, reduction)

    def count_params(self, sel: Optional[Selection] = None) -> int:
        """Active non-embedding parameters under ``sel``; embedding tables are excluded."""
        config = self.config
        sel = (sel or Selection.full(config)).validate(config)
        c, h = config.embed_dim, config.head_dim
        total = 2 * c
        for mha_choice, mlp_choice in zip(sel.mha, sel.mlp):
            total += 4 * config.head_counts[mha_choice] * h * c + 2 * config.mlp_widths[mlp_choice] * c + 4 * c
        return total


class DenseSubnetwork(nn.Module):
    """Standalone dense transformer with per-layer head counts and MLP widths."""

    def __init__(self, config: ModelConfig, layer_heads: Sequence[int], layer_widths: Sequence[int]):
        super().__init__()
        if len(layer_heads) != config.num_layers or len(layer_widths) != config.num_layers:
            raise ShapeError(f"need {config.num_layers} per-layer sizes, got {len(layer_heads)}/{len(layer_widths)}")
        self.config = config
        self.layer_heads = [int(h) for h in layer_heads]
        self.layer_widths = [int(w) for w in layer_widths]
        self.tok_emb = nn.Parameter(torch.zeros(config.vocab_size, config.embed_dim, dtype=DTYPE))
        self.pos_emb = nn.Parameter(torch.zeros(config.context_len, config.embed_dim, dtype=DTYPE))
        self.blocks = nn.ModuleList([
            TransformerBlock(config.embed_dim, heads, config.head_dim, width, config.ln_eps)
            for heads, width in zip(self.layer_heads, self.layer_widths)
        ])
        self.lnf_gain = nn.Parameter(torch.ones(config.embed_dim, dtype=DTYPE))
        self.lnf_bias = nn.Parameter(torch.zeros(config.embed_dim, dtype=DTYPE))

    @classmethod
    def from_elastic(cls, model: ElasticModel, sel: Selection) -> "DenseSubnetwork":
        config = model.config
        sel.validate(config)
        heads = [config.head_counts[j] for j in sel.mha]
        widths = [config.mlp_widths[j] for j in sel.mlp]
        dense = cls(config, heads, widths)
        with torch.no_grad():
            dense.tok_emb.copy_(model.tok_emb)
            dense.pos_emb.copy_(model.pos_emb)
            dense.lnf_gain.copy_(model.lnf_gain)
            dense.lnf_bias.copy_(model.lnf_bias)
            for src, dst, h, d in zip(model.blocks, dense.blocks, heads, widths):
                for name in ("ln1_gain", "ln1_bias", "ln2_gain", "ln2_bias"):
                    getattr(dst, name).copy_(getattr(src, name))
                dst.wq.copy_(src.wq[:h])
                dst.wk.copy_(src.wk[:h])
                dst.wv.copy_(src.wv[:h])
                dst.wo.copy_(src.wo[:h * config.head_dim])
                dst.w1.copy_(src.w1[:d])
                dst.w2.copy_(src.w2[:d])
        return dense

    def forward(self, tokens):
        x = _embed(tokens, self.tok_emb, self.pos_emb, self.config.context_len)
        mask = causal_mask(tokens.shape[1])
        for block in self.blocks:
            x = block(x, mask)
        x = layer_norm(x, self.lnf_gain, self.lnf_bias, self.config.ln_eps)
        return matmul(x, self.tok_emb.t())

    def lm_loss(self, tokens, reduction='mean'):
        return _lm_loss(self(tokens), tokens, reduction)

    def count_params(self):
        return sum(p.numel() for name, p in self.named_parameters() if name not in ("tok_emb", "pos_emb"))


def dense_param_count(config: ModelConfig) -> int:
    """Closed-form non-embedding parameter count of the full model."""
    c = config.embed_dim
    per_layer = 4 * config.num_heads * config.head_dim * c + 2 * config.mlp_hidden * c + 4 * c
    return config.num_layers * per_layer + 2 * c

