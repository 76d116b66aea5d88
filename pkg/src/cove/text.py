"""Rule-based sentence splitting for longform responses."""

from __future__ import annotations

import re

# abbreviations that precede more text and never end a sentence
_TITLES = {
    "mr", "mrs", "ms", "dr", "prof", "st", "mt", "ft", "gen", "col", "lt", "capt", "cpt", "sgt",
    "cmdr", "adm", "maj", "rev", "hon", "gov", "sen", "rep", "pres", "vs", "v", "no", "nos",
    "jan", "feb", "mar", "apr", "jun", "jul", "aug", "sep", "sept", "oct", "nov", "dec",
    "approx", "ca", "cf", "fig", "vol", "pp", "ed", "eds", "mme", "mlle", "messrs",
}
# abbreviations that may also close a sentence
_FINAL_CAPABLE = {"jr", "sr", "inc", "ltd", "co", "corp", "etc", "bros", "llc", "esq", "phd"}
# capitalised words that typically open a new sentence
_STARTERS = {
    "a", "an", "the", "he", "she", "it", "they", "we", "i", "you", "his", "her", "its", "their",
    "our", "this", "that", "these", "those", "in", "on", "at", "after", "before", "during",
    "later", "then", "when", "while", "however", "but", "and", "as", "from", "by", "for",
    "since", "although", "despite", "today", "there", "here", "following", "born", "with",
}

_TERMINATOR = re.compile(r"([.!?]+)([\"'”’)\]]*)(?=\s|$)")
_DOTTED = re.compile(r"^(?:[A-Za-z]\.){2,}$")
_INITIAL = re.compile(r"^[A-Z]\.$")
_OPENERS = "\"'“‘(["


def _next_word(text: str, pos: int) -> str:
    m = re.match(r"\s*(\S*)", text[pos:])
    return m.group(1).lstrip(_OPENERS) if m else ""


def _bare(word: str) -> str:
    return re.sub(r"[^\w]", "", word).lower()


def _is_boundary(text: str, m: re.Match) -> bool:
    after = m.end()
    if not text[after:].strip():
        return True
    nxt = _next_word(text, after)
    if not nxt or nxt[0].islower():
        return False
    if m.group(1) != ".":
        return True
    tok_match = re.search(r"(\S+)$", text[: m.start(1)])
    token = tok_match.group(1).lstrip(_OPENERS) if tok_match else ""
    word = token.lower()
    if word in _TITLES:
        return False
    if _INITIAL.match(token + "."):
        # a run of initials followed by a name ("J. F. Kennedy") is not a boundary
        pos = after
        while True:
            w = _next_word(text, pos)
            if _INITIAL.match(w):
                pos = text.index(w, pos) + len(w)
                continue
            break
        if not w or _bare(w) in _STARTERS:
            return True
        return not w[0].isupper()
    if word in _FINAL_CAPABLE or _DOTTED.match(token + "."):
        return _bare(nxt) in _STARTERS
    return True


def sentence_spans(text: str) -> list[tuple[int, int]]:
    """(start, end) offsets of each sentence, excluding surrounding whitespace."""
    spans = []
    start = None
    for i, ch in enumerate(text):
        if not ch.isspace():
            start = i
            break
    if start is None:
        return []
    for m in _TERMINATOR.finditer(text):
        if m.end() <= start:
            continue
        if _is_boundary(text, m):
            spans.append((start, m.end()))
            rest = re.search(r"\S", text[m.end():])
            if rest is None:
                return spans
            start = m.end() + rest.start()
    end = len(text.rstrip())
    if end > start:
        spans.append((start, end))
    return spans


def split_sentences(text: str) -> list[str]:
    return [text[a:b] for a, b in sentence_spans(text)]
