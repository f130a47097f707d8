"""Knowledge-graph storage, entity matching and input supplementation.

The graph is a flat list of (head, relation, tail) facts indexed by head
surface. Questions are scanned with greedy longest-match against the indexed
heads; the matched entities' facts are serialized into a supplement string
that is appended to the question before generation.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from importlib import resources

from .tokenizer import BOS_ID, CLS_ID, EOS_ID, MASK_ID, PAD_ID, SEP_ID, TokenSequence, Vocab, _normalize

_STRUCTURAL_IDS = {PAD_ID, CLS_ID, SEP_ID, MASK_ID, BOS_ID, EOS_ID}

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class KnowledgeTriple:
    head: str
    relation: str
    tail: str

    def render(self) -> str:
        return f"{self.head} {self.relation} {self.tail}。"


@dataclass
class KnowledgeGraph:
    triples: list[KnowledgeTriple] = field(default_factory=list)
    index: dict[str, list[int]] = field(default_factory=dict)

    @property
    def size(self) -> int:
        return len(self.triples)

    @property
    def max_entity_len(self) -> int:
        return max((len(h) for h in self.index), default=0)

    def lookup(self, head: str) -> list[KnowledgeTriple]:
        return [self.triples[i] for i in self.index.get(head, [])]


def load_triples(path) -> tuple[KnowledgeGraph, list[dict]]:
    """Read {head, relation, tail} JSONL into an indexed graph.

    Duplicate triples are deduplicated; malformed lines are reported, not
    silently dropped.
    """
    graph = KnowledgeGraph()
    rejects: list[dict] = []
    seen: set[KnowledgeTriple] = set()
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                head, relation, tail = obj["head"], obj["relation"], obj["tail"]
                if not (isinstance(head, str) and isinstance(relation, str) and isinstance(tail, str)):
                    raise ValueError("head/relation/tail must be strings")
                if not (head and relation and tail):
                    raise ValueError("head/relation/tail must be non-empty")
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                rejects.append({"line": lineno, "reason": str(exc)})
                continue
            triple = KnowledgeTriple(_normalize(head), _normalize(relation), _normalize(tail))
            if triple in seen:
                continue
            seen.add(triple)
            graph.index.setdefault(triple.head, []).append(len(graph.triples))
            graph.triples.append(triple)
    if graph.size == 0:
        log.warning("load_triples: %s produced an empty graph", path)
    return graph, rejects


def fixture_graph_path() -> str:
    """Path of the small bundled demo graph."""
    return str(resources.files("medkit").joinpath("data/fixture_graph.jsonl"))


def match_entities(question: str, graph: KnowledgeGraph) -> list[str]:
    """Greedy longest-match scan of the question against indexed entity heads.

    At each position the longest indexed entity starting there wins and the
    scan advances past it. Matches are returned in occurrence order, deduped.
    """
    text = _normalize(question)
    found: list[str] = []
    seen: set[str] = set()
    limit = graph.max_entity_len
    i = 0
    while i < len(text):
        matched = None
        for length in range(min(limit, len(text) - i), 0, -1):
            candidate = text[i : i + length]
            if candidate in graph.index:
                matched = candidate
                break
        if matched is None:
            i += 1
            continue
        if matched not in seen:
            seen.add(matched)
            found.append(matched)
        i += len(matched)
    return found


def retrieve(question: str, graph: KnowledgeGraph, max_chars: int) -> str:
    """Serialize the matched entities' facts, keeping only whole triples that
    fit the character budget."""
    if max_chars < 0:
        raise ValueError("max_chars must be >= 0")
    pieces: list[str] = []
    used = 0
    for entity in match_entities(question, graph):
        for triple in graph.lookup(entity):
            rendered = triple.render()
            if used + len(rendered) > max_chars:
                return "".join(pieces)
            pieces.append(rendered)
            used += len(rendered)
    return "".join(pieces)


@dataclass
class SupplementLayout:
    """Index spans inside the supplemented sequence (end-exclusive)."""

    question_span: tuple[int, int]
    supplement_span: tuple[int, int]
    prompt_len: int  # total context length incl. specials


def supplement(question_tokens: TokenSequence, supplement_text: str, vocab: Vocab, max_len: int) -> tuple[TokenSequence, SupplementLayout]:
    """Assemble [BOS] question [SEP] supplement [SEP] within max_len.

    Over-length input is resolved by truncating the supplement first, the
    question second, so the primary signal survives. The returned layout lets
    the generator mask its loss to answer tokens only.
    """
    if max_len < 3:
        raise ValueError("max_len must leave room for the specials")
    q_ids = [i for i, m in zip(question_tokens.ids, question_tokens.attention_mask) if m and i not in _STRUCTURAL_IDS]
    i_ids = [vocab.id_of(ch) for ch in _normalize(supplement_text)]
    budget = max_len - 3  # BOS + two SEPs
    if len(q_ids) > budget:
        q_ids = q_ids[:budget]
        i_ids = []
    elif len(q_ids) + len(i_ids) > budget:
        i_ids = i_ids[: budget - len(q_ids)]
    ids = [BOS_ID] + q_ids + [SEP_ID] + i_ids + [SEP_ID]
    layout = SupplementLayout(
        question_span=(1, 1 + len(q_ids)),
        supplement_span=(2 + len(q_ids), 2 + len(q_ids) + len(i_ids)),
        prompt_len=len(ids),
    )
    seq = TokenSequence(ids=ids, attention_mask=[True] * len(ids), original_length=len(q_ids))
    return seq, layout
