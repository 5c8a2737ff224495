"""Dual external edit memory with alpha-blended image/text cosine retrieval."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np
import torch

from .decomposer import DecomposedQuery
from .memi import PreconditionError
from .synthworld import (EditRecord, ImageSpec, KnowledgeBase, N_TEMPLATES, TRAIN_VARIANTS,
                         Vocab, entry_tokens, relation_question, render_image_tokens,
                         visual_question, words)
from .tensor_core import Adam, NumericError, optimizer_step

log = logging.getLogger(__name__)

DEFAULT_ALPHA = 0.5
# midpoint of the train-split margin: in-scope hits >= 0.957, unrelated queries <= 0.843
DEFAULT_TAU = 0.9


class TrainingError(RuntimeError):
    pass


# ---------------------------------------------------------------- encoders

@dataclass
class EncoderParams:
    """phi_t: word-embedding mean + linear head; phi_v: image-token mean + linear head."""
    text_emb: torch.Tensor   # [n_text_words, d_e]
    text_head: torch.Tensor  # [d_e, d_out]
    img_emb: torch.Tensor    # [n_image_tokens, d_e]
    img_head: torch.Tensor   # [d_e, d_out]
    stoi: dict[str, int] = field(repr=False, default_factory=dict)

    @classmethod
    def init(cls, vocab: Vocab, dim: int = 32, seed: int = 0) -> "EncoderParams":
        gen = torch.Generator().manual_seed(seed)
        return cls(torch.randn(vocab.n_text, dim, generator=gen),
                   torch.eye(dim) + 0.01 * torch.randn(dim, dim, generator=gen),
                   torch.randn(vocab.n_image, dim, generator=gen),
                   torch.eye(dim) + 0.01 * torch.randn(dim, dim, generator=gen),
                   dict(vocab.stoi))

    def params(self) -> list[torch.Tensor]:
        return [self.text_emb, self.text_head, self.img_emb, self.img_head]

    def text_ids(self, text: str) -> list[int]:
        return [self.stoi[w] for w in words(text) if w in self.stoi]

    def encode_text_ids(self, batch: list[list[int]]) -> torch.Tensor:
        return _mean_encode(self.text_emb, self.text_head, batch)

    def encode_image_ids(self, batch: list[list[int]]) -> torch.Tensor:
        return _mean_encode(self.img_emb, self.img_head, batch)

    def encode_text(self, text: str) -> torch.Tensor:
        with torch.no_grad():
            return self.encode_text_ids([self.text_ids(text)])[0]

    def encode_image(self, spec: ImageSpec) -> torch.Tensor:
        with torch.no_grad():
            return self.encode_image_ids([render_image_tokens(spec)])[0]


def _mean_encode(emb: torch.Tensor, head: torch.Tensor, batch: list[list[int]]) -> torch.Tensor:
    n = max(1, max(len(b) for b in batch))
    ids = torch.zeros(len(batch), n, dtype=torch.long)
    m = torch.zeros(len(batch), n)
    for i, b in enumerate(batch):
        if not b:
            raise ValueError("cannot encode an empty token list")
        ids[i, : len(b)] = torch.as_tensor(b)
        m[i, : len(b)] = 1.0
    pooled = (emb[ids] * m[..., None]).sum(1) / m.sum(1, keepdim=True)
    out = pooled @ head
    return out / out.norm(dim=-1, keepdim=True)


def cosine(a: torch.Tensor, b: torch.Tensor) -> float:
    return float(a @ b / (a.norm() * b.norm()))


# ---------------------------------------------------------------- stores

@dataclass
class TextMemoryEntry:
    edit_id: int
    question: str
    answer: str
    q_emb: np.ndarray


@dataclass
class VisualMemoryEntry:
    edit_id: int
    image: ImageSpec
    question: str
    answer: str
    img_emb: np.ndarray
    q_emb: np.ndarray


@dataclass
class MemoryStore:
    encoders: EncoderParams
    text: list[TextMemoryEntry] = field(default_factory=list)
    visual: list[VisualMemoryEntry] = field(default_factory=list)
    tau: float = DEFAULT_TAU
    alpha: float = DEFAULT_ALPHA

    def index_of(self, store: str, edit_id: int) -> int | None:
        entries = self.text if store == "textual" else self.visual
        for i, e in enumerate(entries):
            if e.edit_id == edit_id:
                return i
        return None

    def snapshot(self) -> str:
        """JSONL: one line per entry with cached embeddings."""
        lines = []
        for i, e in enumerate(self.visual):
            lines.append({"store": "visual", "index": i, "edit_id": e.edit_id,
                          "image": {"entity_id": e.image.entity_id,
                                    "variant_seed": e.image.variant_seed},
                          "question": e.question, "answer": e.answer,
                          "img_emb": e.img_emb.tolist(), "q_emb": e.q_emb.tolist()})
        for i, e in enumerate(self.text):
            lines.append({"store": "textual", "index": i, "edit_id": e.edit_id,
                          "question": e.question, "answer": e.answer, "q_emb": e.q_emb.tolist()})
        return "".join(json.dumps(x, sort_keys=True) + "\n" for x in lines)


def add_edit(store: MemoryStore, edit: EditRecord) -> MemoryStore:
    enc = store.encoders
    if edit.kind == "visual":
        store.visual.append(VisualMemoryEntry(
            edit.edit_id, edit.image, edit.prompt, edit.target,
            enc.encode_image(edit.image).numpy().copy(), enc.encode_text(edit.prompt).numpy().copy()))
    elif edit.kind == "textual":
        store.text.append(TextMemoryEntry(edit.edit_id, edit.prompt, edit.target,
                                          enc.encode_text(edit.prompt).numpy().copy()))
    else:
        raise ValueError("compositional payloads are not edits")
    return store


@dataclass
class Hit:
    store: str
    index: int | None
    score: float
    question: str | None = None
    answer: str | None = None
    image: ImageSpec | None = None
    above_tau: bool = False
    forced: bool = False  # injected by an adversarial retriever


def _argmax(scores: np.ndarray) -> int:
    # np.argmax returns the first maximal index: ties go to the lowest index
    return int(np.argmax(scores))


def text_scores(store: MemoryStore, question: str) -> np.ndarray:
    if not store.text:
        return np.zeros(0)
    q = store.encoders.encode_text(question).numpy()
    mat = np.stack([e.q_emb for e in store.text])
    return mat @ q / (np.linalg.norm(mat, axis=1) * np.linalg.norm(q))


def visual_scores(store: MemoryStore, image: ImageSpec, question: str,
                  alpha: float | None = None) -> np.ndarray:
    alpha = store.alpha if alpha is None else alpha
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    if not store.visual:
        return np.zeros(0)
    vi = store.encoders.encode_image(image).numpy()
    vq = store.encoders.encode_text(question).numpy()
    imat = np.stack([e.img_emb for e in store.visual])
    qmat = np.stack([e.q_emb for e in store.visual])
    ci = imat @ vi / (np.linalg.norm(imat, axis=1) * np.linalg.norm(vi))
    cq = qmat @ vq / (np.linalg.norm(qmat, axis=1) * np.linalg.norm(vq))
    return alpha * ci + (1.0 - alpha) * cq


def retrieve_text(store: MemoryStore, question: str) -> Hit:
    s = text_scores(store, question)
    if s.size == 0:
        return Hit("textual", None, float("-inf"))
    i = _argmax(s)
    e = store.text[i]
    return Hit("textual", i, float(s[i]), e.question, e.answer, None, bool(s[i] >= store.tau))


def retrieve_visual(store: MemoryStore, image: ImageSpec, question: str,
                    alpha: float | None = None) -> Hit:
    s = visual_scores(store, image, question, alpha)
    if s.size == 0:
        return Hit("visual", None, float("-inf"))
    k = _argmax(s)
    e = store.visual[k]
    return Hit("visual", k, float(s[k]), e.question, e.answer, e.image, bool(s[k] >= store.tau))


@dataclass
class RetrievedContext:
    entries: list[Hit]
    hit_flags: dict = field(default_factory=dict)

    @property
    def scores(self) -> list[float]:
        return [h.score for h in self.entries]

    def usable(self) -> list[Hit]:
        return [h for h in self.entries if h.index is not None and (h.above_tau or h.forced)]


def hit_from_entry(store: MemoryStore, which: str, index: int, forced: bool = True) -> Hit:
    if which == "visual":
        e = store.visual[index]
        return Hit("visual", index, float("nan"), e.question, e.answer, e.image, True, forced)
    e = store.text[index]
    return Hit("textual", index, float("nan"), e.question, e.answer, None, True, forced)


def retrieve(store: MemoryStore, dq: DecomposedQuery, alpha: float | None = None) -> RetrievedContext:
    """R = R_t | R_v | [R_v; R_t] depending on the query type."""
    if dq.qtype == "textual":
        return RetrievedContext([retrieve_text(store, dq.text_question())])
    if dq.qtype == "visual":
        return RetrievedContext([retrieve_visual(store, dq.image, dq.image_subquery, alpha)])
    return compose_retrieval(store, dq, alpha)


def compose_retrieval(store: MemoryStore, dq: DecomposedQuery,
                      alpha: float | None = None) -> RetrievedContext:
    """Visual retrieval first; its answer fills the placeholder for text retrieval.

    A below-threshold or wrong visual hit still feeds the substitution: no
    silent correction. ``hit_flags`` records which slots were usable.
    """
    if dq.qtype != "compositional" or not dq.has_placeholder:
        raise PreconditionError("compose_retrieval needs a compositional query with a placeholder")
    rv = retrieve_visual(store, dq.image, dq.image_subquery, alpha)
    flags = {"visual": rv.above_tau, "textual": False}
    if rv.index is None:
        rt = Hit("textual", None, float("-inf"))
        flags["visual_missing"] = True
    else:
        rt = retrieve_text(store, dq.text_question(rv.answer))
        flags["textual"] = rt.above_tau
    if rt.index is None:
        flags["textual_missing"] = True
    return RetrievedContext([rv, rt], flags)


def assemble_context(vocab: Vocab, retrieved: RetrievedContext | None) -> list[int]:
    """QA-formatted prefix in retrieval order; unusable slots contribute nothing."""
    if retrieved is None:
        return []
    out: list[int] = []
    for h in retrieved.usable():
        out += entry_tokens(vocab, h.question, h.image if h.store == "visual" else None, h.answer)
    return out


# ---------------------------------------------------------------- stage-1 training

def _text_pairs(kb: KnowledgeBase, entities, rng) -> list[tuple[str, str, tuple]]:
    """(query, key question, identity) triples: rephrase vs canonical question."""
    out = []
    for e in entities:
        for f in kb.facts_of(e.id):
            key = relation_question(e.kind, f.relation, e.name, 0)
            for t in range(N_TEMPLATES):
                out.append((relation_question(e.kind, f.relation, e.name, t), key,
                            ("t", e.id, f.relation)))
    return out


def retrieval_accuracy(enc: EncoderParams, kb: KnowledgeBase, entities) -> float:
    """Top-1 accuracy of rephrased text questions (templates 1..3) against a canonical store."""
    keys = []
    for e in entities:
        for f in kb.facts_of(e.id):
            keys.append((relation_question(e.kind, f.relation, e.name, 0), (e.id, f.relation)))
    with torch.no_grad():
        kmat = enc.encode_text_ids([enc.text_ids(k) for k, _ in keys]).numpy()
        hits = n = 0
        for i, (_, ident) in enumerate(keys):
            e = kb.entity(ident[0])
            for t in range(1, N_TEMPLATES):
                q = enc.encode_text(relation_question(e.kind, ident[1], e.name, t)).numpy()
                hits += int(_argmax(kmat @ q) == i)
                n += 1
    return hits / n


def image_retrieval_accuracy(enc: EncoderParams, entities, variant: int = 1000) -> float:
    with torch.no_grad():
        kmat = enc.encode_image_ids([render_image_tokens(ImageSpec(e.id, 0)) for e in entities]).numpy()
        qmat = enc.encode_image_ids([render_image_tokens(ImageSpec(e.id, variant)) for e in entities]).numpy()
    return float(np.mean(np.argmax(qmat @ kmat.T, axis=1) == np.arange(len(entities))))


# variant seeds sampled while training the image encoder; I-Gen uses >= 1000
HELD_VARIANT_SPAN = 64


@dataclass
class Stage1Config:
    negatives_per_positive: int = 4
    max_iters: int = 1000
    batch_size: int = 64
    lr: float = 0.05
    # sigmoid(20 cos - 14): decision boundary at cos 0.7, positives pushed toward 1
    temperature: float = 20.0
    bias: float = -14.0
    seed: int = 0


def train_encoders(kb: KnowledgeBase, vocab: Vocab, entities, cfg: Stage1Config | None = None,
                   dim: int = 32) -> EncoderParams:
    """Binary cross-entropy on sigmoid(temperature * cos + bias) of positive/negative pairs.

    Text positives pair a rephrased question with its canonical form and
    visual questions of one kind with each other; image positives pair two
    variants of one entity. Negatives are sampled uniformly from other keys.
    """
    cfg = cfg or Stage1Config()
    enc = EncoderParams.init(vocab, dim, cfg.seed)
    rng = np.random.default_rng([cfg.seed, 11])
    text = _text_pairs(kb, entities, rng)
    for kind in ("person", "club"):
        for t in range(N_TEMPLATES):
            text.append((visual_question(kind, t), visual_question(kind, 0), ("v", kind)))
    keys = sorted({(k, ident) for _, k, ident in text}, key=lambda x: str(x[1]))
    key_ids = [enc.text_ids(k) for k, _ in keys]
    key_ident = [ident for _, ident in keys]
    ents = list(entities)
    opt = Adam(enc.params(), lr=cfg.lr)
    for p in enc.params():
        p.requires_grad_(True)
    bce = torch.nn.functional.binary_cross_entropy_with_logits
    try:
        for it in range(cfg.max_iters):
            sel = rng.integers(len(text), size=cfg.batch_size)
            qs, ks, labels = [], [], []
            for i in sel:
                q, k, ident = text[int(i)]
                qs.append(enc.text_ids(q)); ks.append(enc.text_ids(k)); labels.append(1.0)
                for _ in range(cfg.negatives_per_positive):
                    j = int(rng.integers(len(key_ids)))
                    while key_ident[j] == ident:
                        j = int(rng.integers(len(key_ids)))
                    qs.append(enc.text_ids(q)); ks.append(key_ids[j]); labels.append(0.0)
            cos_t = (enc.encode_text_ids(qs) * enc.encode_text_ids(ks)).sum(-1)
            iq, ik, ilab = [], [], []
            for i in rng.integers(len(ents), size=cfg.batch_size):
                e = ents[int(i)]
                v1, v2 = rng.integers(HELD_VARIANT_SPAN, size=2)
                iq.append(render_image_tokens(ImageSpec(e.id, int(v1))))
                ik.append(render_image_tokens(ImageSpec(e.id, int(v2))))
                ilab.append(1.0)
                for _ in range(cfg.negatives_per_positive):
                    o = ents[int(rng.integers(len(ents)))]
                    while o.id == e.id:
                        o = ents[int(rng.integers(len(ents)))]
                    iq.append(render_image_tokens(ImageSpec(e.id, int(v1))))
                    ik.append(render_image_tokens(ImageSpec(o.id, int(rng.integers(HELD_VARIANT_SPAN)))))
                    ilab.append(0.0)
            cos_i = (enc.encode_image_ids(iq) * enc.encode_image_ids(ik)).sum(-1)
            logits = torch.cat([cos_t, cos_i]) * cfg.temperature + cfg.bias
            loss = bce(logits, torch.as_tensor(labels + ilab))
            if not torch.isfinite(loss):
                raise TrainingError("encoder loss diverged")
            optimizer_step(opt, loss)
            if (it + 1) % 100 == 0:
                log.info("stage1 iter %d loss %.4f", it + 1, float(loss.detach()))
    except NumericError as exc:
        raise TrainingError(str(exc)) from exc
    finally:
        for p in enc.params():
            p.requires_grad_(False)
    return enc



def save_encoders(path, enc: EncoderParams, meta: dict | None = None) -> None:
    from .model import _write_npz

    header = {"format": "kedit-encoders", "version": 1, "meta": meta or {},
              "stoi": enc.stoi}
    _write_npz(path, header, {"text_emb": enc.text_emb.numpy(), "text_head": enc.text_head.numpy(),
                              "img_emb": enc.img_emb.numpy(), "img_head": enc.img_head.numpy()})


def load_encoders(path) -> EncoderParams:
    from .model import _read_npz

    header, a = _read_npz(path)
    if header.get("format") != "kedit-encoders":
        raise ValueError(f"{path}: not an encoder checkpoint")
    t = lambda k: torch.from_numpy(a[k].copy())
    return EncoderParams(t("text_emb"), t("text_head"), t("img_emb"), t("img_head"), header["stoi"])
