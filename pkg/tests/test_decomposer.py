import pytest

from kedit_lab.decomposer import PH, DecompositionError, decompose
from kedit_lab.synthworld import (KINDS, N_TEMPLATES, RELATIONS, VISUAL_TEMPLATES, ImageSpec,
                                  Query, compositional_question, generate_world,
                                  make_edit_stream, relation_question)

IMG = ImageSpec(3, 0)


def test_person_compositional_example():
    dq = decompose(Query("What position did the person in the photo recently assume?", IMG))
    assert dq.qtype == "compositional"
    assert dq.image_subquery == "Who is in the photo?"
    assert dq.text_question() == "What position did [the person in the photo] recently assume?"
    assert dq.text_subquery.count(PH) == 1
    assert dq.relation == "position"


def test_club_compositional_example():
    dq = decompose(Query("Which league is associated with the club in the picture?", IMG))
    assert dq.qtype == "compositional"
    assert dq.image_subquery == "What club is in the picture?"
    assert dq.text_question() == "Which league is associated with [the club in the picture]?"
    assert dq.text_question("zorvak") == "Which league is associated with zorvak?"


def test_pure_visual_query():
    dq = decompose(Query("Who is in the photo?", IMG))
    assert dq.qtype == "visual"
    assert dq.image_subquery == "Who is in the photo?"
    assert dq.text_subquery is None
    with pytest.raises(DecompositionError):
        dq.text_question()


def test_textual_query_has_no_placeholder():
    dq = decompose(Query("Who coaches Bravix?"))
    assert dq.qtype == "textual" and not dq.has_placeholder
    assert dq.subject == "bravix" and dq.relation == "coach"


def test_unknown_template_is_surfaced():
    with pytest.raises(DecompositionError):
        decompose(Query("How tall is the tower?"))


def test_compositional_without_image_raises():
    with pytest.raises(DecompositionError):
        decompose(Query("Who coaches the club in the picture?"))


def test_every_template_decomposes_exactly():
    for kind in KINDS:
        for rel, _ in RELATIONS[kind]:
            for t in range(N_TEMPLATES):
                dq = decompose(Query(compositional_question(kind, rel, t), IMG))
                assert (dq.qtype, dq.kind, dq.relation) == ("compositional", kind, rel)
                tq = decompose(Query(relation_question(kind, rel, "Miro Vask", t)))
                assert (tq.qtype, tq.relation, tq.subject) == ("textual", rel, "miro vask")
        for q in VISUAL_TEMPLATES[kind]:
            assert decompose(Query(q, IMG)).qtype == "visual"


def test_image_subquery_idempotent():
    dq = decompose(Query(compositional_question("club", "stadium", 2), IMG))
    again = decompose(Query(dq.image_subquery, IMG))
    assert again.qtype == "visual" and again.image_subquery == dq.image_subquery


def test_generated_stream_decomposes_completely():
    kb = generate_world(0, 120, 4, 1, train_fraction=0.25)
    for e in make_edit_stream(kb, 40, seed=1):
        for p in e.probes:
            dq = decompose(p.query)
            expected = {"comp_rel": "compositional", "vis_rel": "visual", "image_gen": "visual",
                        "image_loc": "visual", "text_rel": "textual", "text_loc": "textual"}
            if p.kind in expected:
                assert dq.qtype == expected[p.kind]
            elif e.kind == "visual":
                assert dq.qtype == "visual"
            else:
                assert dq.qtype == "textual"
