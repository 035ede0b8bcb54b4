"""Rule-based POS tagging and noun-phrase chunking for concept extraction.

Deterministic and dependency-free: closed-class word lists plus suffix
heuristics plus small shipped adjective/noun lexicons, defaulting to NOUN.
Adequate for short VLM-style English captions.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from importlib import resources

from .encoder import split_words


class ConfigurationError(ValueError):
    pass


class PosTag(Enum):
    DET = "DET"
    ADJ = "ADJ"
    NOUN = "NOUN"
    VERB = "VERB"
    ADP = "ADP"
    PRON = "PRON"
    CONJ = "CONJ"
    PUNCT = "PUNCT"
    NUM = "NUM"
    ADV = "ADV"
    OTHER = "OTHER"


def _load_wordlist(name):
    text = resources.files("densealign.lexicons").joinpath(name).read_text("utf-8")
    return frozenset(w for w in text.split() if w)


DETERMINERS = _load_wordlist("determiners.txt")
PREPOSITIONS = _load_wordlist("prepositions.txt")
PRONOUNS = _load_wordlist("pronouns.txt")
CONJUNCTIONS = _load_wordlist("conjunctions.txt")
AUXILIARIES = _load_wordlist("auxiliaries.txt")
ADVERBS = _load_wordlist("adverbs.txt")
VERBS = _load_wordlist("verbs.txt")
ADJECTIVES = _load_wordlist("adjectives.txt")
NOUNS = _load_wordlist("nouns.txt")


def pos_tag(words):
    """Tag a list of lowercase word tokens."""
    tags = []
    for w in words:
        if w in DETERMINERS:
            tags.append(PosTag.DET)
        elif w in PREPOSITIONS:
            tags.append(PosTag.ADP)
        elif w in PRONOUNS:
            tags.append(PosTag.PRON)
        elif w in CONJUNCTIONS:
            tags.append(PosTag.CONJ)
        elif w in AUXILIARIES or w in VERBS:
            tags.append(PosTag.VERB)
        elif w in ADVERBS:
            tags.append(PosTag.ADV)
        elif w.isdigit():
            tags.append(PosTag.NUM)
        elif not any(c.isalnum() for c in w):
            tags.append(PosTag.PUNCT)
        elif len(w) > 3 and w.endswith("ly"):
            tags.append(PosTag.ADV)
        elif (
            len(w) > 4
            and (w.endswith("ing") or w.endswith("ed"))
            and w not in NOUNS
            and w not in ADJECTIVES
        ):
            tags.append(PosTag.VERB)
        elif w in ADJECTIVES:
            tags.append(PosTag.ADJ)
        else:
            tags.append(PosTag.NOUN)
    return tags


@dataclass
class NounPhrase:
    """A maximal DET? ADJ* NOUN+ NUM? match in a caption."""

    char_span: tuple  # [start, end) in the caption text
    head: str  # canonical, lowercase, determiner-free head noun
    word_indices: list  # positions in the word-token list covered by the span


def canonicalize(head, corpus_words=None):
    """Singularize a head noun conservatively.

    Strips a trailing "s" only when the result is a known noun or occurs in
    the supplied corpus vocabulary; idempotent by construction.
    """
    if len(head) > 3 and head.endswith("s"):
        stripped = head[:-1]
        if stripped in NOUNS or (corpus_words is not None and stripped in corpus_words):
            return stripped
    return head


def chunk_nps(words, tags, char_spans, corpus_words=None):
    """Left-to-right maximal matches of DET? ADJ* NOUN+ NUM?."""
    assert len(words) == len(tags) == len(char_spans)
    nps = []
    i = 0
    n = len(words)
    while i < n:
        j = i
        if j < n and tags[j] is PosTag.DET:
            j += 1
        while j < n and tags[j] is PosTag.ADJ:
            j += 1
        noun_start = j
        while j < n and tags[j] is PosTag.NOUN:
            j += 1
        if j == noun_start:
            i += 1
            continue
        last_noun = j - 1
        if j < n and tags[j] is PosTag.NUM:
            j += 1
        nps.append(
            NounPhrase(
                char_span=(char_spans[i][0], char_spans[j - 1][1]),
                head=canonicalize(words[last_noun], corpus_words),
                word_indices=list(range(i, j)),
            )
        )
        i = j
    return nps


def extract_concepts(caption, corpus_words=None):
    """Split, tag and chunk a caption in one call."""
    pairs = split_words(caption)
    words = [w for w, _ in pairs]
    spans = [s for _, s in pairs]
    return chunk_nps(words, pos_tag(words), spans, corpus_words)


def span_to_token_indices(np_, tok):
    """Token positions of a TokenizedCaption whose char span intersects the NP.

    Positions are offsets into ``tok.ids`` (BOS at 0). Returns an empty list
    when the NP was truncated away; callers drop such concepts.
    """
    s, e = np_.char_span
    out = []
    for j, (ws, we) in enumerate(tok.char_spans):
        if ws < e and we > s:
            out.append(j + 1)  # +1 for BOS
    return out


class ConceptVocabulary:
    """Alphabetically ordered canonical concepts with dense labels 0..C-1."""

    def __init__(self, concepts):
        self.concepts = sorted(concepts)
        self.label_of = {c: i for i, c in enumerate(self.concepts)}

    def __len__(self):
        return len(self.concepts)

    def __contains__(self, concept):
        return concept in self.label_of

    def save(self, path):
        with open(path, "w", encoding="utf-8") as f:
            for c in self.concepts:
                f.write(c + "\n")

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as f:
            return cls([ln.strip() for ln in f if ln.strip()])


def build_concept_vocab(captions, min_freq=1):
    """Canonical heads with corpus frequency >= min_freq, labeled alphabetically."""
    captions = list(captions)
    corpus_words = set()
    for c in captions:
        corpus_words.update(w for w, _ in split_words(c))
    counts = {}
    for c in captions:
        for np_ in extract_concepts(c, corpus_words):
            counts[np_.head] = counts.get(np_.head, 0) + 1
    kept = [h for h, n in counts.items() if n >= min_freq]
    if not kept:
        raise ConfigurationError(
            f"no concepts survive min_freq={min_freq} over {len(captions)} captions"
        )
    return ConceptVocabulary(kept)
