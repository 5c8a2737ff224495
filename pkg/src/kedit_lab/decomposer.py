"""Rule-based query decomposition over the closed template grammar.

A query is classified as visual, textual or compositional and split into an
image sub-question ("who is depicted") and a text sub-question whose entity
slot holds a tagged placeholder to be filled by the visual answer.
"""
from __future__ import annotations

from dataclasses import dataclass

from .synthworld import (KINDS, PLACEHOLDERS, RELATIONS, VISUAL_TEMPLATES, ImageSpec, Query,
                         render_text, words)


class DecompositionError(ValueError):
    pass


@dataclass(frozen=True)
class DecomposedQuery:
    qtype: str
    image_subquery: str | None = None
    text_subquery: tuple[str, ...] | None = None  # words; placeholder span replaced by PH
    placeholder_span: tuple[int, int] | None = None  # [start, end) into the original words
    image: ImageSpec | None = None
    kind: str | None = None
    relation: str | None = None
    subject: str | None = None  # filled entity for textual queries

    def text_question(self, subject: str | None = None) -> str:
        """The text sub-question with the placeholder replaced by ``subject``.

        Without a subject the placeholder renders in brackets.
        """
        if self.text_subquery is None:
            raise DecompositionError("query has no text sub-question")
        out = []
        for w in self.text_subquery:
            if w == PH:
                if subject is None:
                    out.append("[" + PLACEHOLDERS[self.kind] + "]")
                else:
                    out.extend(words(subject))
            else:
                out.append(w)
        return render_text(out)

    @property
    def has_placeholder(self) -> bool:
        return self.text_subquery is not None and PH in self.text_subquery


PH = "<ph>"

_VISUAL = {tuple(words(t)): k for k in KINDS for t in VISUAL_TEMPLATES[k]}
_RELATIONAL = []
for _k in KINDS:
    for _r, _ts in RELATIONS[_k]:
        for _t in _ts:
            pre, post = _t.split("{e}")
            _RELATIONAL.append((tuple(words(pre)), tuple(words(post)), _k, _r))


def _visual_question_for(kind: str) -> str:
    return VISUAL_TEMPLATES[kind][0]


def decompose(q: Query) -> DecomposedQuery:
    ws = tuple(words(q.text))
    kind = _VISUAL.get(ws)
    if kind is not None:
        return DecomposedQuery("visual", image_subquery=render_text(ws), image=q.image, kind=kind)
    for pre, post, kind, rel in _RELATIONAL:
        n = len(ws) - len(pre) - len(post)
        if n < 1 or ws[: len(pre)] != pre or ws[len(ws) - len(post):] != post:
            continue
        slot = ws[len(pre): len(pre) + n]
        span = (len(pre), len(pre) + n)
        if slot == tuple(words(PLACEHOLDERS[kind])):
            if q.image is None:
                raise DecompositionError("compositional query without an image")
            return DecomposedQuery(
                "compositional", image_subquery=_visual_question_for(kind),
                text_subquery=pre + (PH,) + post, placeholder_span=span, image=q.image,
                kind=kind, relation=rel)
        if any(slot == tuple(words(p)) for p in PLACEHOLDERS.values()):
            continue
        return DecomposedQuery("textual", text_subquery=ws, kind=kind, relation=rel,
                               subject=" ".join(slot), image=q.image)
    raise DecompositionError(f"unrecognized query template: {q.text!r}")
