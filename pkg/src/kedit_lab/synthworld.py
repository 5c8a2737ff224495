"""Deterministic synthetic multimodal world and sequential edit streams.

The world stands in for a real image/knowledge-graph benchmark: entities have
pseudo-word names and rendered "images" (short token sequences over a
reserved image vocabulary), and each entity carries relational facts whose
objects come from per-relation value pools.
"""
from __future__ import annotations

import hashlib
import json
import re
from dataclasses import asdict, dataclass, field
from typing import Iterable

import numpy as np

SCHEMA_VERSION = 1

PAD, EOA, QMARK, AMARK, SEP = "<pad>", "<eoa>", "<q>", "<a>", "<sep>"
SPECIALS = [PAD, EOA, QMARK, AMARK, SEP]

KINDS = ("person", "club")

VISUAL_TEMPLATES = {
    "person": [
        "Who is in the photo?",
        "Who is shown in the photo?",
        "Who is the person in the picture?",
        "Whose face appears in the photo?",
    ],
    "club": [
        "What club is in the picture?",
        "Which club is shown in the picture?",
        "What team is in the picture?",
        "Which club does the picture show?",
    ],
}

PLACEHOLDERS = {"person": "the person in the photo", "club": "the club in the picture"}

RELATIONS = {
    "person": [
        ("position", [
            "What position did {e} recently assume?",
            "Which position was recently assumed by {e}?",
            "What role did {e} recently take on?",
            "{e} recently took up which position?",
        ]),
        ("party", [
            "Which party does {e} belong to?",
            "What political party is {e} a member of?",
            "{e} is a member of which party?",
            "Which party counts {e} as a member?",
        ]),
        ("employer", [
            "Which organization employs {e}?",
            "Who is the employer of {e}?",
            "{e} works for which organization?",
            "For which organization does {e} work?",
        ]),
        ("hometown", [
            "What is the hometown of {e}?",
            "Where was {e} born?",
            "{e} comes from which town?",
            "Which town is {e} from?",
        ]),
    ],
    "club": [
        ("league", [
            "Which league is associated with {e}?",
            "In which league does {e} play?",
            "{e} competes in which league?",
            "What league does {e} belong to?",
        ]),
        ("stadium", [
            "What is the home stadium of {e}?",
            "Where does {e} play home games?",
            "{e} plays at which stadium?",
            "Which stadium hosts {e}?",
        ]),
        ("sponsor", [
            "Who is the main sponsor of {e}?",
            "Which company sponsors {e}?",
            "{e} is sponsored by which company?",
            "What company backs {e}?",
        ]),
        ("coach", [
            "Who is the head coach of {e}?",
            "Who coaches {e}?",
            "{e} is coached by whom?",
            "Who manages {e}?",
        ]),
    ],
}
N_TEMPLATES = 4

# image layout: ENTITY_SLOTS tokens fixed per entity, the rest per variant
ENTITY_SLOTS = 3
SLOT_RANGE = 128
IMAGE_VOCAB = ENTITY_SLOTS * SLOT_RANGE + 128
TRAIN_VARIANTS = (0, 1, 2)
HELDOUT_VARIANT_BASE = 1000
_IMG_SALT = 7919

_ONSETS = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "br", "dr", "kr", "tr"]
_VOWELS = ["a", "e", "i", "o", "u"]
_CODAS = ["", "n", "r", "x", "l", "sh"]

_WORD_RE = re.compile(r"[a-z0-9']+|[?;:]")


class ConfigError(ValueError):
    pass


def words(text: str) -> list[str]:
    return _WORD_RE.findall(text.lower())


def render_text(ws: Iterable[str]) -> str:
    out = " ".join(ws).replace(" ?", "?")
    return out[:1].upper() + out[1:]


@dataclass(frozen=True)
class Entity:
    id: int
    name: str
    kind: str = "person"
    split: str = "test"

    @property
    def tokens(self) -> list[str]:
        return words(self.name)


@dataclass(frozen=True)
class ImageSpec:
    entity_id: int
    variant_seed: int = 0


@dataclass(frozen=True)
class Fact:
    subject: int
    relation: str
    object: str


@dataclass
class KnowledgeBase:
    seed: int
    entities: list[Entity]
    facts: list[Fact]
    objects: dict[str, list[str]]
    n_relations: int

    def __post_init__(self):
        self._by_id = {e.id: e for e in self.entities}
        self._fact = {(f.subject, f.relation): f.object for f in self.facts}
        self._by_subject: dict[int, list[Fact]] = {}
        for f in self.facts:
            self._by_subject.setdefault(f.subject, []).append(f)

    def entity(self, eid: int) -> Entity:
        return self._by_id[eid]

    def fact(self, subject: int, relation: str) -> str:
        return self._fact[(subject, relation)]

    def facts_of(self, subject: int) -> list[Fact]:
        return self._by_subject.get(subject, [])

    def relations_for(self, kind: str) -> list[str]:
        return [r for r, _ in RELATIONS[kind][: self.n_relations]]

    def split_entities(self, split: str) -> list[Entity]:
        return [e for e in self.entities if e.split == split]

    def to_json(self) -> dict:
        return {
            "version": SCHEMA_VERSION,
            "seed": self.seed,
            "n_relations": self.n_relations,
            "entities": [asdict(e) for e in self.entities],
            "facts": [asdict(f) for f in self.facts],
            "objects": self.objects,
        }

    @classmethod
    def from_json(cls, d: dict) -> "KnowledgeBase":
        if d.get("version") != SCHEMA_VERSION:
            raise ConfigError(f"unsupported world schema version {d.get('version')}")
        return cls(seed=d["seed"], entities=[Entity(**e) for e in d["entities"]],
                   facts=[Fact(**f) for f in d["facts"]], objects=d["objects"],
                   n_relations=d["n_relations"])


def relation_templates(kind: str, relation: str) -> list[str]:
    for r, ts in RELATIONS[kind]:
        if r == relation:
            return ts
    raise KeyError(relation)


def _pseudo_words(rng: np.random.Generator, n: int, taken: set[str], syllables: int) -> list[str]:
    out = []
    tries = 0
    while len(out) < n:
        tries += 1
        if tries > 200 * n + 1000:
            raise ConfigError("name space exhausted")
        w = "".join(rng.choice(_ONSETS) + rng.choice(_VOWELS) for _ in range(syllables))
        w += rng.choice(_CODAS)
        if w in taken:
            continue
        taken.add(w)
        out.append(w)
    return out


def _template_words() -> set[str]:
    ws = set()
    for kind in KINDS:
        for t in VISUAL_TEMPLATES[kind]:
            ws.update(words(t))
        ws.update(words(PLACEHOLDERS[kind]))
        for _, ts in RELATIONS[kind]:
            for t in ts:
                ws.update(words(t.replace("{e}", "")))
    return ws


def generate_world(seed: int, n_entities: int, n_relations: int, facts_per_entity: int,
                   objects_per_relation: int = 24, train_fraction: float = 0.0) -> KnowledgeBase:
    """Build a seeded world; entities alternate person/club kinds.

    ``train_fraction`` of each kind is tagged ``split="train"`` (reserved for
    connector training and locality probes); the rest are ``"test"``.
    """
    if min(n_entities, n_relations, facts_per_entity, objects_per_relation) < 1:
        raise ConfigError("counts must be >= 1")
    if n_relations > len(RELATIONS["person"]):
        raise ConfigError(f"at most {len(RELATIONS['person'])} relations per kind")
    if facts_per_entity > n_relations:
        raise ConfigError("facts_per_entity exceeds n_relations")
    if objects_per_relation < 2:
        raise ConfigError("need >= 2 objects per relation for edits")
    rng = np.random.default_rng(seed)
    taken = set(_template_words())
    names = _pseudo_words(rng, n_entities, taken, 2)
    objects: dict[str, list[str]] = {}
    for kind in KINDS:
        for r, _ in RELATIONS[kind][:n_relations]:
            objects[r] = _pseudo_words(rng, objects_per_relation, taken, 3)
    entities = []
    per_kind = {k: 0 for k in KINDS}
    counts = {k: sum(1 for i in range(n_entities) if KINDS[i % 2] == k) for k in KINDS}
    for i in range(n_entities):
        kind = KINDS[i % 2]
        n_train = int(round(train_fraction * counts[kind]))
        split = "train" if per_kind[kind] < n_train else "test"
        per_kind[kind] += 1
        entities.append(Entity(id=i, name=names[i], kind=kind, split=split))
    facts = []
    for e in entities:
        rels = [r for r, _ in RELATIONS[e.kind][:n_relations]]
        chosen = sorted(rng.choice(len(rels), size=facts_per_entity, replace=False).tolist())
        for j in chosen:
            r = rels[j]
            facts.append(Fact(e.id, r, objects[r][int(rng.integers(len(objects[r])))]))
    kb = KnowledgeBase(seed=seed, entities=entities, facts=facts, objects=objects,
                       n_relations=n_relations)
    keys = {}
    for e in entities:
        key = tuple(render_image_tokens(ImageSpec(e.id, 0))[:ENTITY_SLOTS])
        if key in keys:
            raise ConfigError(f"image collision between entities {keys[key]} and {e.id}")
        keys[key] = e.id
    return kb


def render_image_tokens(spec: ImageSpec, n_img_tokens: int = ENTITY_SLOTS + 1) -> list[int]:
    """Image-vocabulary ids for ``spec``; a pure function of (entity_id, variant_seed).

    The first ``ENTITY_SLOTS`` positions depend on the entity only, each drawn
    from its own slot range; remaining positions depend on the variant too.
    """
    if n_img_tokens <= ENTITY_SLOTS:
        raise ConfigError("need at least one variant slot")
    out = []
    for slot in range(ENTITY_SLOTS):
        r = np.random.default_rng([_IMG_SALT, spec.entity_id, slot])
        out.append(slot * SLOT_RANGE + int(r.integers(SLOT_RANGE)))
    variant_base = ENTITY_SLOTS * SLOT_RANGE
    for slot in range(ENTITY_SLOTS, n_img_tokens):
        r = np.random.default_rng([_IMG_SALT, spec.entity_id, spec.variant_seed + 1, slot])
        out.append(variant_base + int(r.integers(IMAGE_VOCAB - variant_base)))
    return out


# ---------------------------------------------------------------- vocabulary

class Vocab:
    """Joint vocabulary: text words first, then ``IMAGE_VOCAB`` image tokens."""

    def __init__(self, text_words: list[str]):
        self.itos = list(SPECIALS) + sorted(set(text_words) - set(SPECIALS))
        self.stoi = {w: i for i, w in enumerate(self.itos)}
        self.n_text = len(self.itos)
        self.n_image = IMAGE_VOCAB

    @classmethod
    def for_world(cls, kb: KnowledgeBase) -> "Vocab":
        ws = set(_template_words())
        for e in kb.entities:
            ws.update(e.tokens)
        for pool in kb.objects.values():
            for o in pool:
                ws.update(words(o))
        return cls(sorted(ws))

    @property
    def size(self) -> int:
        return self.n_text + self.n_image

    @property
    def eoa(self) -> int:
        return self.stoi[EOA]

    def encode(self, text: str) -> list[int]:
        try:
            return [self.stoi[w] for w in words(text)]
        except KeyError as exc:
            raise KeyError(f"unknown word {exc.args[0]!r}") from None

    def encode_words(self, ws: Iterable[str]) -> list[int]:
        return [self.stoi[w] for w in ws]

    def image(self, spec: ImageSpec) -> list[int]:
        return [self.n_text + t for t in render_image_tokens(spec)]

    def decode(self, ids: Iterable[int]) -> list[str]:
        out = []
        for i in ids:
            out.append(self.itos[i] if i < self.n_text else f"<img{i - self.n_text}>")
        return out


# ---------------------------------------------------------------- queries, probes, edits

@dataclass(frozen=True)
class Query:
    text: str
    image: ImageSpec | None = None


@dataclass
class Probe:
    kind: str  # vis_rel text_rel text_gen image_gen text_loc image_loc comp_rel
    text: str
    image: ImageSpec | None
    gold: str | None
    truth: dict = field(default_factory=dict)  # {"visual": edit_id, "textual": edit_id}

    @property
    def query(self) -> Query:
        return Query(self.text, self.image)


@dataclass
class EditRecord:
    edit_id: int
    pair_id: int
    kind: str  # visual | textual
    payload: dict
    prompt: str
    image: ImageSpec | None
    target: str
    probes: list[Probe] = field(default_factory=list)

    @property
    def query(self) -> Query:
        return Query(self.prompt, self.image)

    def to_json(self) -> dict:
        d = asdict(self)
        d["version"] = SCHEMA_VERSION
        return d

    @classmethod
    def from_json(cls, d: dict) -> "EditRecord":
        d = dict(d)
        if d.pop("version", None) != SCHEMA_VERSION:
            raise ConfigError("unsupported edit schema version")
        img = d.pop("image")
        probes = [Probe(kind=p["kind"], text=p["text"],
                        image=ImageSpec(**p["image"]) if p["image"] else None,
                        gold=p["gold"], truth=p["truth"]) for p in d.pop("probes")]
        return cls(image=ImageSpec(**img) if img else None, probes=probes, **d)


def visual_question(kind: str, template: int = 0) -> str:
    return VISUAL_TEMPLATES[kind][template]


def relation_question(kind: str, relation: str, subject: str, template: int = 0) -> str:
    q = relation_templates(kind, relation)[template].replace("{e}", subject)
    return q[:1].upper() + q[1:]


def compositional_question(kind: str, relation: str, template: int = 0) -> str:
    return relation_question(kind, relation, PLACEHOLDERS[kind], template)


def make_edit_stream(kb: KnowledgeBase, n_pairs: int, seed: int, split: str = "test",
                     locality_split: str = "train") -> list[EditRecord]:
    """Alternating visual/textual linked pairs with probe sets inlined.

    Pair k relabels an image of entity e_k as e'_k, then edits a fact of e'_k.
    No entity appears in more than one pair.
    """
    rng = np.random.default_rng([seed, 17])
    pool = kb.split_entities(split)
    by_kind = {k: [e for e in pool if e.kind == k] for k in KINDS}
    pairs_per_kind = {k: len(v) // 2 for k, v in by_kind.items()}
    if n_pairs > sum(pairs_per_kind.values()):
        raise ConfigError(f"{n_pairs} pairs requested, {sum(pairs_per_kind.values())} available")
    for k in KINDS:
        perm = rng.permutation(len(by_kind[k]))
        by_kind[k] = [by_kind[k][i] for i in perm]
    # interleave kinds so the stream mixes persons and clubs
    kinds = []
    remaining = dict(pairs_per_kind)
    while len(kinds) < n_pairs:
        for k in KINDS:
            if remaining[k] > 0 and len(kinds) < n_pairs:
                kinds.append(k)
                remaining[k] -= 1
    taken = {k: 0 for k in KINDS}
    loc_pool = [e for e in kb.entities if e.split == locality_split] or \
        [e for e in kb.entities if e.split != split]
    stream: list[EditRecord] = []
    for pid, kind in enumerate(kinds):
        i = taken[kind]
        taken[kind] += 2
        e_old, e_new = by_kind[kind][i], by_kind[kind][i + 1]
        fact = kb.facts_of(e_new.id)[int(rng.integers(len(kb.facts_of(e_new.id))))]
        choices = [o for o in kb.objects[fact.relation] if o != fact.object]
        new_obj = choices[int(rng.integers(len(choices)))]
        img = ImageSpec(e_old.id, 0)
        v = EditRecord(
            edit_id=2 * pid, pair_id=pid, kind="visual",
            payload={"image": asdict(img), "old_entity": e_old.id, "new_entity": e_new.id},
            prompt=visual_question(kind), image=img, target=e_new.name)
        t = EditRecord(
            edit_id=2 * pid + 1, pair_id=pid, kind="textual",
            payload={"subject": e_new.id, "relation": fact.relation,
                     "old_object": fact.object, "new_object": new_obj},
            prompt=relation_question(kind, fact.relation, e_new.name), image=None,
            target=new_obj)
        v.probes = make_probe_set(v, kb, rng, loc_pool, partner=t)
        t.probes = make_probe_set(t, kb, rng, loc_pool, partner=v)
        stream += [v, t]
    return stream


def make_probe_set(edit: EditRecord, kb: KnowledgeBase, rng: np.random.Generator,
                   loc_pool: list[Entity], partner: EditRecord | None = None) -> list[Probe]:
    """One probe per kind: reliability, generality, locality (+ composition on textual edits)."""
    edited = {edit.payload.get("old_entity"), edit.payload.get("new_entity"),
              edit.payload.get("subject")}
    if partner is not None:
        edited |= {partner.payload.get("old_entity"), partner.payload.get("new_entity"),
                   partner.payload.get("subject")}
    loc_candidates = [e for e in loc_pool if e.id not in edited]
    probes: list[Probe] = []
    if edit.kind == "visual":
        kind = kb.entity(edit.payload["old_entity"]).kind
        truth = {"visual": edit.edit_id}
        probes.append(Probe("vis_rel", edit.prompt, edit.image, edit.target, truth))
        tmpl = 1 + int(rng.integers(N_TEMPLATES - 1))
        probes.append(Probe("text_gen", visual_question(kind, tmpl), edit.image, edit.target, truth))
        held = ImageSpec(edit.image.entity_id, HELDOUT_VARIANT_BASE + edit.edit_id)
        probes.append(Probe("image_gen", edit.prompt, held, edit.target, truth))
    else:
        subj = kb.entity(edit.payload["subject"])
        rel = edit.payload["relation"]
        truth = {"textual": edit.edit_id}
        probes.append(Probe("text_rel", edit.prompt, None, edit.target, truth))
        tmpl = 1 + int(rng.integers(N_TEMPLATES - 1))
        probes.append(Probe("text_gen", relation_question(subj.kind, rel, subj.name, tmpl),
                            None, edit.target, truth))
        if partner is not None:
            comp_t = int(rng.integers(N_TEMPLATES))
            probes.append(Probe("comp_rel", compositional_question(subj.kind, rel, comp_t),
                                partner.image, edit.target,
                                {"visual": partner.edit_id, "textual": edit.edit_id}))
    loc_e = loc_candidates[int(rng.integers(len(loc_candidates)))]
    loc_f = kb.facts_of(loc_e.id)[int(rng.integers(len(kb.facts_of(loc_e.id))))]
    probes.append(Probe("text_loc",
                        relation_question(loc_e.kind, loc_f.relation, loc_e.name,
                                          int(rng.integers(N_TEMPLATES))),
                        None, None))
    loc_i = loc_candidates[int(rng.integers(len(loc_candidates)))]
    probes.append(Probe("image_loc", visual_question(loc_i.kind, int(rng.integers(N_TEMPLATES))),
                        ImageSpec(loc_i.id, int(rng.integers(len(TRAIN_VARIANTS)))), None))
    return probes


# ---------------------------------------------------------------- files

def dumps_jsonl(records: Iterable[EditRecord]) -> str:
    return "".join(json.dumps(r.to_json(), sort_keys=True) + "\n" for r in records)


def write_jsonl(path, records: Iterable[EditRecord]) -> str:
    text = dumps_jsonl(records)
    with open(path, "w") as fh:
        fh.write(text)
    return hashlib.sha256(text.encode()).hexdigest()


def read_jsonl(path) -> list[EditRecord]:
    with open(path) as fh:
        return [EditRecord.from_json(json.loads(line)) for line in fh if line.strip()]


def write_world(path, kb: KnowledgeBase) -> str:
    text = json.dumps(kb.to_json(), sort_keys=True)
    with open(path, "w") as fh:
        fh.write(text)
    return hashlib.sha256(text.encode()).hexdigest()


def read_world(path) -> KnowledgeBase:
    with open(path) as fh:
        return KnowledgeBase.from_json(json.load(fh))


# ---------------------------------------------------------------- prompt layout
#   context entry:  <q> [image] question <a> answer <sep>
#   query:          <q> [image] question <a>
#   target:         answer <eoa>

def entry_tokens(vocab: Vocab, question: str, image: ImageSpec | None, answer: str) -> list[int]:
    img = vocab.image(image) if image is not None else []
    return ([vocab.stoi[QMARK]] + img + vocab.encode(question) + [vocab.stoi[AMARK]]
            + vocab.encode(answer) + [vocab.stoi[SEP]])


def query_tokens(vocab: Vocab, query: Query) -> list[int]:
    img = vocab.image(query.image) if query.image is not None else []
    return [vocab.stoi[QMARK]] + img + vocab.encode(query.text) + [vocab.stoi[AMARK]]


def answer_tokens(vocab: Vocab, answer: str) -> list[int]:
    return vocab.encode(answer) + [vocab.eoa]
