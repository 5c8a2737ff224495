"""Pretraining corpus: the pre-edit knowledge state of the synthetic world.

Besides plain visual / textual / compositional QA, the corpus carries
retrieval-style items whose context entry states a (usually counterfactual)
answer; the target is always the context answer, which is how the base model
learns to read prepended evidence.
"""
from __future__ import annotations

import numpy as np

from .synthworld import (KINDS, N_TEMPLATES, PLACEHOLDERS, TRAIN_VARIANTS, ImageSpec,
                         KnowledgeBase, Query, Vocab, answer_tokens, compositional_question,
                         entry_tokens, query_tokens, relation_question, visual_question)

Item = tuple[list[int], list[int]]


def knowledge_items(kb: KnowledgeBase, vocab: Vocab) -> list[Item]:
    items: list[Item] = []
    for e in kb.entities:
        for v in TRAIN_VARIANTS:
            q = Query(visual_question(e.kind, (v + e.id) % N_TEMPLATES), ImageSpec(e.id, v))
            items.append((query_tokens(vocab, q), answer_tokens(vocab, e.name)))
        for f in kb.facts_of(e.id):
            for t in range(N_TEMPLATES):
                q = Query(relation_question(e.kind, f.relation, e.name, t))
                items.append((query_tokens(vocab, q), answer_tokens(vocab, f.object)))
            t = e.id % N_TEMPLATES
            v = TRAIN_VARIANTS[e.id % len(TRAIN_VARIANTS)]
            q = Query(compositional_question(e.kind, f.relation, t), ImageSpec(e.id, v))
            items.append((query_tokens(vocab, q), answer_tokens(vocab, f.object)))
    return items


def context_items(kb: KnowledgeBase, vocab: Vocab, seed: int, per_entity: int = 3,
                  p_true: float = 0.2) -> list[Item]:
    """Items of the form <relevant context entry> + query -> context answer."""
    rng = np.random.default_rng([seed, 101])
    by_kind = {k: [e for e in kb.entities if e.kind == k] for k in KINDS}
    pick = lambda xs: xs[int(rng.integers(len(xs)))]
    items: list[Item] = []
    for e in kb.entities:
        for j in range(per_entity):
            mode = (e.id + j) % 3
            v1, v2 = (int(x) for x in rng.choice(TRAIN_VARIANTS, 2))
            t1, t2 = (int(x) for x in rng.integers(N_TEMPLATES, size=2))
            if mode == 0:
                x = e if rng.random() < p_true else pick(by_kind[e.kind])
                ctx = entry_tokens(vocab, visual_question(e.kind, t1), ImageSpec(e.id, v1), x.name)
                q = Query(visual_question(e.kind, t2), ImageSpec(e.id, v2))
                items.append((ctx + query_tokens(vocab, q), answer_tokens(vocab, x.name)))
                continue
            f = pick(kb.facts_of(e.id))
            o = f.object if rng.random() < p_true else pick(kb.objects[f.relation])
            if mode == 1:
                ctx = entry_tokens(vocab, relation_question(e.kind, f.relation, e.name, t1), None, o)
                q = Query(relation_question(e.kind, f.relation, e.name, t2))
            else:
                x = pick(by_kind[e.kind])
                ctx = entry_tokens(vocab, visual_question(e.kind, 0), ImageSpec(e.id, v1), x.name)
                ctx += entry_tokens(vocab, relation_question(e.kind, f.relation, x.name, t1), None, o)
                q = Query(compositional_question(e.kind, f.relation, t2), ImageSpec(e.id, v2))
            items.append((ctx + query_tokens(vocab, q), answer_tokens(vocab, o)))
    return items


def build_corpus(kb: KnowledgeBase, vocab: Vocab, seed: int = 0,
                 context_per_entity: int = 3) -> list[Item]:
    return knowledge_items(kb, vocab) + context_items(kb, vocab, seed, context_per_entity)
