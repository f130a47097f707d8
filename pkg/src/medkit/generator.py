"""Decoder-only autoregressive language model for consultation answers.

The decoder reuses the encoder's transformer blocks under a causal mask:
position i attends to positions <= i, and the distribution for the next token
is read from the last position. Long contexts are truncated to the most
recent `context_window` tokens.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass

import numpy as np

from . import kgraph as kg
from . import numerics as nm
from .encoder import TrainHistory, init_layer_params, run_layers
from .numerics import Rng, Tensor
from .tokenizer import EOS_ID, Vocab, decode, encode

log = logging.getLogger(__name__)


@dataclass
class DecoderConfig:
    vocab_size: int
    hidden_dim: int = 64
    num_layers: int = 2
    num_heads: int = 2
    ffn_dim: int | None = None
    context_window: int = 128
    max_gen_len: int = 64
    ln_eps: float = 1e-5

    def __post_init__(self):
        if self.ffn_dim is None:
            self.ffn_dim = 4 * self.hidden_dim
        if self.hidden_dim % self.num_heads != 0:
            raise ValueError("hidden_dim must be divisible by num_heads")
        if self.max_gen_len < 1:
            raise ValueError("max_gen_len must be >= 1")

    def to_json(self) -> dict:
        return {
            "vocab_size": self.vocab_size,
            "hidden_dim": self.hidden_dim,
            "num_layers": self.num_layers,
            "num_heads": self.num_heads,
            "ffn_dim": self.ffn_dim,
            "context_window": self.context_window,
            "max_gen_len": self.max_gen_len,
            "ln_eps": self.ln_eps,
        }


@dataclass
class GenerationRequest:
    question: str
    strategy: str = "greedy"  # greedy | top_k | temperature
    top_k: int = 5
    temperature: float = 1.0
    seed: int = 0
    max_gen_len: int | None = None

    def __post_init__(self):
        if self.strategy not in ("greedy", "top_k", "temperature"):
            raise ValueError(f"unknown decode strategy {self.strategy!r}")
        if self.top_k < 1:
            raise ValueError("top_k must be >= 1")
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")


class Decoder:
    """Causal transformer LM with a separate output projection head."""

    def __init__(self, config: DecoderConfig, rng: Rng):
        self.config = config
        params: dict[str, Tensor] = {}
        params["tok_emb"] = nm.xavier_uniform(rng, config.vocab_size, config.hidden_dim)
        params["pos_emb"] = nm.xavier_uniform(rng, config.context_window, config.hidden_dim)
        for i in range(config.num_layers):
            init_layer_params(rng, config.hidden_dim, config.num_heads, config.ffn_dim, f"layer{i}", params)
        params["out.w"] = nm.xavier_uniform(rng, config.hidden_dim, config.vocab_size)
        params["out.b"] = nm.zeros_param(config.vocab_size)
        self.params = params

    def named_parameters(self) -> dict[str, Tensor]:
        return self.params

    def load_state(self, state: dict[str, np.ndarray], prefix: str = "") -> None:
        for name, p in self.params.items():
            arr = state[prefix + name]
            if arr.shape != p.data.shape:
                raise ValueError(f"shape mismatch for {name}: {arr.shape} vs {p.data.shape}")
            p.data = np.asarray(arr, dtype=np.float64).copy()

    def logits_matrix(self, ids) -> Tensor:
        """Per-position next-token logits for a full (windowed) sequence."""
        ids = list(ids)
        if not ids:
            raise ValueError("empty context")
        if len(ids) > self.config.context_window:
            ids = ids[-self.config.context_window :]
        n = len(ids)
        if max(ids) >= self.config.vocab_size:
            raise ValueError("token id out of vocab range")
        x = nm.take_rows(self.params["tok_emb"], ids) + nm.take_rows(self.params["pos_emb"], list(range(n)))
        keep = np.tril(np.ones((n, n), dtype=bool))
        states = run_layers(x, self.params, keep, self.config.num_layers, self.config.num_heads, self.config.ln_eps)
        return nm.matmul(states, self.params["out.w"]) + self.params["out.b"]


def lm_logits(model: Decoder, context_ids) -> np.ndarray:
    """Distribution over the next token given the (windowed) context."""
    logits = model.logits_matrix(context_ids)
    last = logits.data[-1]
    shifted = last - last.max()
    e = np.exp(shifted)
    return e / e.sum()


def lm_loss(model: Decoder, sequence, loss_mask, targets=None) -> Tensor:
    """Mean NLL over positions whose target is in the loss mask.

    `loss_mask[j]` selects target position j (j >= 1; the token at j is
    predicted from positions < j). `targets` defaults to the sequence itself;
    passing a separate array lets callers verify that masked-out targets have
    no influence.
    """
    sequence = list(sequence)
    if len(sequence) < 2:
        raise ValueError("lm_loss needs a sequence of at least two tokens")
    if len(sequence) > model.config.context_window:
        raise ValueError("sequence exceeds the context window")
    mask = list(loss_mask)
    if len(mask) != len(sequence):
        raise ValueError("loss_mask must align with the sequence")
    tgt = list(targets) if targets is not None else sequence
    picked = [j for j in range(1, len(sequence)) if mask[j]]
    if not picked:
        raise ValueError("loss mask selects no positions")
    logits = model.logits_matrix(sequence)
    rows = nm.take_rows(logits, [j - 1 for j in picked])
    return nm.softmax_cross_entropy(rows, [tgt[j] for j in picked], reduction="mean")


def _nll_sum(model: Decoder, sequence) -> tuple[float, int]:
    """Total NLL and token count for one sequence under the model."""
    picked = list(range(1, len(sequence)))
    logits = model.logits_matrix(sequence)
    rows = nm.take_rows(logits, [j - 1 for j in picked])
    loss = nm.softmax_cross_entropy(rows, [sequence[j] for j in picked], reduction="sum")
    return loss.item(), len(picked)


@dataclass
class LmTrainConfig:
    epochs: int = 10
    lr: float = 2.6e-5
    batch_size: int = 8
    seed: int = 0


def _train_sequences(model: Decoder, items, config: LmTrainConfig, tag: str) -> TrainHistory:
    """Shared epoch loop: items are (sequence, loss_mask) pairs."""
    rng = Rng(config.seed).spawn(tag)
    opt = nm.Adam([{"name": "decoder", "lr": config.lr, "params": model.params}])
    history = TrainHistory()
    last_good = {k: v.data.copy() for k, v in model.params.items()}
    for epoch in range(config.epochs):
        started = time.perf_counter()
        order = rng.permutation(len(items))
        epoch_loss = 0.0
        batches = 0
        try:
            for start in range(0, len(order), config.batch_size):
                chunk = [items[int(i)] for i in order[start : start + config.batch_size]]
                losses = [lm_loss(model, seq, mask) for seq, mask in chunk]
                total = losses[0]
                for piece in losses[1:]:
                    total = total + piece
                loss = nm.scale(total, 1.0 / len(chunk))
                opt.zero_grad()
                nm.backward(loss)
                opt.step()
                epoch_loss += loss.item()
                batches += 1
        except nm.NumericsError:
            log.error("%s: non-finite loss at epoch %d; rolling back", tag, epoch)
            for k, v in last_good.items():
                model.params[k].data = v
            history.aborted = True
            return history
        last_good = {k: v.data.copy() for k, v in model.params.items()}
        mean_loss = epoch_loss / max(1, batches)
        history.rows.append({"epoch": epoch, "loss": mean_loss, "lr": config.lr, "seconds": time.perf_counter() - started})
        log.info("%s epoch %d loss %.4f", tag, epoch, mean_loss)
    return history


def pretrain_lm(model: Decoder, background_texts, vocab: Vocab, config: LmTrainConfig) -> TrainHistory:
    """Next-token training over full sequences (every position in the loss).

    Texts longer than the context window are chunked into consecutive windows
    so nothing is silently discarded.
    """
    texts = list(background_texts)
    if not texts:
        raise ValueError("pretrain_lm needs a non-empty corpus")
    window = model.config.context_window
    items = []
    for text in texts:
        seq = encode(text, vocab, max_len=max(window, 3), mode="decoder")
        ids = seq.ids
        for start in range(0, len(ids), window):
            chunk = ids[start : start + window]
            if len(chunk) >= 2:
                items.append((chunk, [True] * len(chunk)))
    return _train_sequences(model, items, config, "generator.pretrain")


@dataclass
class QaFinetuneResult:
    history: TrainHistory
    skipped: int = 0


def build_qa_sequence(question: str, answer: str, graph: kg.KnowledgeGraph | None, vocab: Vocab, window: int, supplement_max_chars: int = 64):
    """Compose the training/inference sequence for one QA pair.

    Layout: [BOS] question [SEP] supplement [SEP] answer [EOS], with the loss
    mask covering the answer tokens and the closing [EOS] only.
    """
    q_seq = encode(question, vocab, max_len=window, mode="decoder")
    supplement_text = kg.retrieve(question, graph, supplement_max_chars) if graph is not None else ""
    prompt_budget = max(3, window - 1 - len(answer))  # leave room for answer + EOS
    prompt, layout = kg.supplement(q_seq, supplement_text, vocab, prompt_budget)
    ids = list(prompt.ids) + [vocab.id_of(ch) for ch in answer] + [EOS_ID]
    mask = [False] * layout.prompt_len + [True] * (len(ids) - layout.prompt_len)
    return ids, mask, layout


def finetune_qa(model: Decoder, qa_pairs, graph: kg.KnowledgeGraph | None, vocab: Vocab, config: LmTrainConfig, supplement_max_chars: int = 64) -> QaFinetuneResult:
    """Fine-tune on supplemented QA pairs with answer-only loss masking.

    Pairs whose composed sequence cannot fit the context window even after
    the supplement/question truncation rules are skipped and counted.
    """
    window = model.config.context_window
    items = []
    skipped = 0
    for question, answer in qa_pairs:
        ids, mask, _ = build_qa_sequence(question, answer, graph, vocab, window, supplement_max_chars)
        if len(ids) > window or not any(mask):
            skipped += 1
            continue
        items.append((ids, mask))
    if not items:
        raise ValueError("no QA pair fits the context window")
    if skipped:
        log.warning("finetune_qa: skipped %d over-length pairs", skipped)
    history = _train_sequences(model, items, config, "generator.finetune")
    return QaFinetuneResult(history=history, skipped=skipped)


def _sample_from(probs: np.ndarray, request: GenerationRequest, rng: Rng) -> int:
    if request.strategy == "greedy":
        return int(np.argmax(probs))
    if request.strategy == "top_k":
        k = min(request.top_k, probs.shape[0])
        order = np.lexsort((np.arange(probs.shape[0]), -probs))  # prob desc, id asc
        keep = order[:k]
        weights = probs[keep]
    else:  # temperature
        logp = np.log(np.maximum(probs, 1e-300)) / request.temperature
        logp -= logp.max()
        weights = np.exp(logp)
        keep = np.arange(probs.shape[0])
    weights = weights / weights.sum()
    draw = rng.random()
    cum = np.cumsum(weights)
    pick = int(np.searchsorted(cum, draw, side="right"))
    pick = min(pick, len(keep) - 1)
    return int(keep[pick])


def generate(model: Decoder, request: GenerationRequest, graph: kg.KnowledgeGraph | None, vocab: Vocab, supplement_max_chars: int = 64) -> dict:
    """Decode an answer for the request's question.

    Greedy decoding is a pure function of (weights, context); sampling
    strategies are deterministic given the request seed. Returns a dict with
    the question, the retrieved supplement and the generated answer.
    """
    window = model.config.context_window
    q_seq = encode(request.question, vocab, max_len=window, mode="decoder")
    supplement_text = kg.retrieve(request.question, graph, supplement_max_chars) if graph is not None else ""
    prompt, _ = kg.supplement(q_seq, supplement_text, vocab, max_len=window)
    rng = Rng(request.seed).spawn("generator.sample")
    ids = list(prompt.ids)
    generated: list[int] = []
    limit = request.max_gen_len if request.max_gen_len is not None else model.config.max_gen_len
    for _ in range(limit):
        probs = lm_logits(model, ids)
        nxt = _sample_from(probs, request, rng)
        if nxt == EOS_ID:
            break
        generated.append(nxt)
        ids.append(nxt)
    return {
        "question": request.question,
        "supplement": supplement_text,
        "answer": decode(generated, vocab),
    }


def perplexity(model: Decoder, texts, vocab: Vocab) -> float:
    """exp(mean per-token NLL) over decoder-encoded texts."""
    texts = list(texts)
    if not texts:
        raise ValueError("perplexity needs at least one text")
    total = 0.0
    count = 0
    window = model.config.context_window
    for text in texts:
        seq = encode(text, vocab, max_len=max(window, 3), mode="decoder")
        ids = seq.ids[:window]
        nll, n = _nll_sum(model, ids)
        total += nll
        count += n
    return float(np.exp(total / count))
