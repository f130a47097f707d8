"""Transformer encoder with masked-language-model pretraining.

The layer machinery here (embeddings, scaled dot-product attention heads,
residual + layer-norm blocks, position-wise feed-forward) is also reused by
the autoregressive generator, which runs the same stack under a causal mask.
"""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from .numerics import Rng, Tensor
from .tokenizer import MASK_ID, NUM_RESERVED, TokenSequence

log = logging.getLogger(__name__)


@dataclass
class EncoderConfig:
    vocab_size: int
    max_len: int = 64
    hidden_dim: int = 64
    num_layers: int = 2
    num_heads: int = 2
    ffn_dim: int | None = None
    mask_rate: float = 0.15
    ln_eps: float = 1e-5

    def __post_init__(self):
        if self.ffn_dim is None:
            self.ffn_dim = 4 * self.hidden_dim
        if self.hidden_dim % self.num_heads != 0:
            raise ValueError("hidden_dim must be divisible by num_heads")
        if not 0.0 < self.mask_rate < 1.0:
            raise ValueError("mask_rate must be in (0, 1)")

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.num_heads

    def to_json(self) -> dict:
        return {
            "vocab_size": self.vocab_size,
            "max_len": self.max_len,
            "hidden_dim": self.hidden_dim,
            "num_layers": self.num_layers,
            "num_heads": self.num_heads,
            "ffn_dim": self.ffn_dim,
            "mask_rate": self.mask_rate,
            "ln_eps": self.ln_eps,
        }


@dataclass
class EncoderOutput:
    cls_vector: Tensor  # (hidden,)
    token_reps: Tensor  # (seq, hidden)


# -- shared transformer machinery ---------------------------------------------


def init_layer_params(rng: Rng, hidden: int, heads: int, ffn: int, prefix: str, params: dict) -> None:
    """Create one attention + feed-forward block's parameters in `params`."""
    head_dim = hidden // heads
    for h in range(heads):
        params[f"{prefix}.attn.wq{h}"] = nm.xavier_uniform(rng, hidden, head_dim)
        params[f"{prefix}.attn.wk{h}"] = nm.xavier_uniform(rng, hidden, head_dim)
        params[f"{prefix}.attn.wv{h}"] = nm.xavier_uniform(rng, hidden, head_dim)
    params[f"{prefix}.attn.wo"] = nm.xavier_uniform(rng, hidden, hidden)
    params[f"{prefix}.attn.bo"] = nm.zeros_param(hidden)
    params[f"{prefix}.ln1.gain"] = nm.ones_param(hidden)
    params[f"{prefix}.ln1.bias"] = nm.zeros_param(hidden)
    params[f"{prefix}.ffn.w1"] = nm.xavier_uniform(rng, hidden, ffn)
    params[f"{prefix}.ffn.b1"] = nm.zeros_param(ffn)
    params[f"{prefix}.ffn.w2"] = nm.xavier_uniform(rng, ffn, hidden)
    params[f"{prefix}.ffn.b2"] = nm.zeros_param(hidden)
    params[f"{prefix}.ln2.gain"] = nm.ones_param(hidden)
    params[f"{prefix}.ln2.bias"] = nm.zeros_param(hidden)


def masked_softmax(scores: Tensor, keep: np.ndarray) -> Tensor:
    """Row-wise softmax where dropped columns get an effective -inf score.

    A row with no kept column falls back to a one-hot on column 0 so the
    output stays a valid distribution.
    """
    keep = np.broadcast_to(np.asarray(keep, dtype=bool), scores.shape).copy()
    dead = ~keep.any(axis=-1)
    if dead.any():
        keep[dead, 0] = True
    filled = nm.masked_fill(scores, keep, -1e30)
    return nm.softmax(filled, axis=-1)


def attention_head(x: Tensor, wq: Tensor, wk: Tensor, wv: Tensor, keep: np.ndarray) -> Tensor:
    """Scaled dot-product attention for one head.

    `keep[i, j]` says whether query position i may attend to key position j
    (a 1-D mask is broadcast over queries). Scale is sqrt(per-head dim).
    """
    q = nm.matmul(x, wq)
    k = nm.matmul(x, wk)
    v = nm.matmul(x, wv)
    head_dim = q.shape[1]
    scores = nm.scale(nm.matmul(q, k.T), 1.0 / np.sqrt(head_dim))
    weights = masked_softmax(scores, keep)
    return nm.matmul(weights, v)


def encoder_layer(x: Tensor, params: dict, prefix: str, keep: np.ndarray, num_heads: int, ln_eps: float = 1e-5) -> Tensor:
    """Multi-head attention + residual + LayerNorm, then FFN + residual + LayerNorm."""
    heads = [
        attention_head(x, params[f"{prefix}.attn.wq{h}"], params[f"{prefix}.attn.wk{h}"], params[f"{prefix}.attn.wv{h}"], keep)
        for h in range(num_heads)
    ]
    attn = nm.concat(heads, axis=1)
    attn = nm.matmul(attn, params[f"{prefix}.attn.wo"]) + params[f"{prefix}.attn.bo"]
    x = nm.layer_norm(x + attn, params[f"{prefix}.ln1.gain"], params[f"{prefix}.ln1.bias"], ln_eps)
    hidden = nm.gelu(nm.matmul(x, params[f"{prefix}.ffn.w1"]) + params[f"{prefix}.ffn.b1"])
    ff = nm.matmul(hidden, params[f"{prefix}.ffn.w2"]) + params[f"{prefix}.ffn.b2"]
    return nm.layer_norm(x + ff, params[f"{prefix}.ln2.gain"], params[f"{prefix}.ln2.bias"], ln_eps)


def run_layers(x: Tensor, params: dict, keep: np.ndarray, num_layers: int, num_heads: int, ln_eps: float = 1e-5) -> Tensor:
    for i in range(num_layers):
        x = encoder_layer(x, params, f"layer{i}", keep, num_heads, ln_eps)
    return x


# -- the encoder model ---------------------------------------------------------


class Encoder:
    """Bidirectional transformer over character sequences.

    Position 0 carries the [CLS] summary vector used by the classifiers; the
    full per-token representation matrix feeds the recurrent head and the
    masked-token prediction task. The MLM output projection is tied to the
    input embedding matrix.
    """

    def __init__(self, config: EncoderConfig, rng: Rng):
        self.config = config
        params: dict[str, Tensor] = {}
        params["tok_emb"] = nm.xavier_uniform(rng, config.vocab_size, config.hidden_dim)
        params["pos_emb"] = nm.xavier_uniform(rng, config.max_len, config.hidden_dim)
        for i in range(config.num_layers):
            init_layer_params(rng, config.hidden_dim, config.num_heads, config.ffn_dim, f"layer{i}", params)
        self.params = params

    def named_parameters(self) -> dict[str, Tensor]:
        return self.params

    def load_state(self, state: dict[str, np.ndarray], prefix: str = "") -> None:
        for name, p in self.params.items():
            arr = state[prefix + name]
            if arr.shape != p.data.shape:
                raise ValueError(f"shape mismatch for {name}: {arr.shape} vs {p.data.shape}")
            p.data = np.asarray(arr, dtype=np.float64).copy()

    def embed(self, tokens: TokenSequence) -> Tensor:
        """Token embedding plus learned absolute position embedding."""
        n = len(tokens.ids)
        if n > self.config.max_len:
            raise ValueError(f"sequence of {n} exceeds max_len {self.config.max_len}")
        if max(tokens.ids) >= self.config.vocab_size:
            raise ValueError("token id out of vocab range")
        tok = nm.take_rows(self.params["tok_emb"], tokens.ids)
        pos = nm.take_rows(self.params["pos_emb"], list(range(n)))
        return tok + pos

    def _token_states(self, tokens: TokenSequence) -> Tensor:
        x = self.embed(tokens)
        keep = np.asarray(tokens.attention_mask, dtype=bool)[None, :]  # keys masked, all queries run
        return run_layers(x, self.params, keep, self.config.num_layers, self.config.num_heads, self.config.ln_eps)

    def encode(self, tokens: TokenSequence) -> EncoderOutput:
        reps = self._token_states(tokens)
        return EncoderOutput(cls_vector=reps[0], token_reps=reps)

    def mlm_logits(self, tokens: TokenSequence) -> Tensor:
        """Per-position vocabulary logits, projection tied to the embeddings."""
        reps = self._token_states(tokens)
        return nm.matmul(reps, self.params["tok_emb"].T)


def mask_tokens(tokens: TokenSequence, rate: float, rng: Rng, vocab_size: int):
    """Corrupt a sequence for masked-token pretraining.

    Each real, non-special position is independently selected with probability
    `rate`. Of the selected positions 80% become [MASK], 10% a random content
    token and 10% stay unchanged. Returns (corrupted, positions, original_ids).
    """
    if not 0.0 < rate < 1.0:
        raise ValueError("rate must be in (0, 1)")
    ids = list(tokens.ids)
    positions: list[int] = []
    originals: list[int] = []
    for i, (tok, real) in enumerate(zip(tokens.ids, tokens.attention_mask)):
        if not real or tok < NUM_RESERVED:
            continue
        if rng.random() >= rate:
            continue
        positions.append(i)
        originals.append(tok)
        roll = rng.random()
        if roll < 0.8:
            ids[i] = MASK_ID
        elif roll < 0.9:
            if vocab_size > NUM_RESERVED:
                ids[i] = int(rng.integers(NUM_RESERVED, vocab_size))
            # else: no content tokens to draw from; leave unchanged
        # else: keep the original token
    corrupted = TokenSequence(ids=ids, attention_mask=list(tokens.attention_mask), original_length=tokens.original_length)
    return corrupted, positions, originals


def mlm_loss(encoder: Encoder, batch) -> Tensor | None:
    """Mean negative log-likelihood of the true tokens at masked positions.

    `batch` is a list of (corrupted, positions, original_ids) triples from
    mask_tokens. Returns None (with a warning) if nothing is masked.
    """
    losses = []
    total = 0
    for corrupted, positions, originals in batch:
        if not positions:
            continue
        logits = encoder.mlm_logits(corrupted)
        rows = nm.take_rows(logits, positions)
        losses.append(nm.softmax_cross_entropy(rows, originals, reduction="sum"))
        total += len(positions)
    if total == 0:
        log.warning("mlm_loss: batch has no masked positions; skipping")
        return None
    acc = losses[0]
    for piece in losses[1:]:
        acc = acc + piece
    return nm.scale(acc, 1.0 / total)


@dataclass
class PretrainConfig:
    epochs: int = 10
    lr: float = 5e-5
    batch_size: int = 8
    seed: int = 0
    mask_rate: float | None = None  # defaults to the encoder's configured rate


@dataclass
class TrainHistory:
    rows: list[dict] = field(default_factory=list)
    aborted: bool = False

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, fieldnames=["epoch", "loss", "lr", "seconds"])
            writer.writeheader()
            for row in self.rows:
                writer.writerow(row)


def pretrain(encoder: Encoder, sequences: list[TokenSequence], config: PretrainConfig) -> TrainHistory:
    """Run masked-token pretraining epochs: corrupt, score, Adam step.

    On divergence (non-finite loss) the parameters roll back to the last
    completed epoch and the history is marked aborted.
    """
    if not sequences:
        raise ValueError("pretrain needs a non-empty corpus")
    rate = config.mask_rate if config.mask_rate is not None else encoder.config.mask_rate
    rng = Rng(config.seed).spawn("encoder.pretrain")
    opt = nm.Adam([{"name": "encoder", "lr": config.lr, "params": encoder.params}])
    history = TrainHistory()
    last_good = {k: v.data.copy() for k, v in encoder.params.items()}
    for epoch in range(config.epochs):
        started = time.perf_counter()
        order = rng.permutation(len(sequences))
        epoch_loss = 0.0
        batches = 0
        try:
            for start in range(0, len(order), config.batch_size):
                chunk = [sequences[int(i)] for i in order[start : start + config.batch_size]]
                batch = [mask_tokens(seq, rate, rng, encoder.config.vocab_size) for seq in chunk]
                loss = mlm_loss(encoder, batch)
                if loss is None:
                    continue
                opt.zero_grad()
                nm.backward(loss)
                opt.step()
                epoch_loss += loss.item()
                batches += 1
        except nm.NumericsError:
            log.error("pretrain: non-finite loss at epoch %d; rolling back", epoch)
            for k, v in last_good.items():
                encoder.params[k].data = v
            history.aborted = True
            return history
        last_good = {k: v.data.copy() for k, v in encoder.params.items()}
        mean_loss = epoch_loss / max(1, batches)
        history.rows.append({"epoch": epoch, "loss": mean_loss, "lr": config.lr, "seconds": time.perf_counter() - started})
        log.info("pretrain epoch %d loss %.4f", epoch, mean_loss)
    return history
