"""Lab-scale defaults and the stage functions shared by the CLI and the test suite."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import torch

from . import corpus, meme, model
from .synthworld import KnowledgeBase, Vocab, generate_world, make_edit_stream

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class WorldConfig:
    seed: int = 0
    n_entities: int = 640
    n_relations: int = 4
    facts_per_entity: int = 1
    objects_per_relation: int = 24
    # 70 train entities per kind: one 70-pair stage-2 episode, the rest (250 per kind)
    # feed the 250-pair / 500-edit test stream
    train_fraction: float = 0.21875


def setup_determinism() -> None:
    torch.set_num_threads(1)
    torch.use_deterministic_algorithms(True)


def build_world(cfg: WorldConfig | None = None) -> tuple[KnowledgeBase, Vocab]:
    cfg = cfg or WorldConfig()
    kb = generate_world(cfg.seed, cfg.n_entities, cfg.n_relations, cfg.facts_per_entity,
                        cfg.objects_per_relation, cfg.train_fraction)
    return kb, Vocab.for_world(kb)


def pretrain_base(kb: KnowledgeBase, vocab: Vocab, seed: int = 0,
                  pcfg: model.PretrainConfig | None = None, **model_kw) -> model.FrozenWeights:
    pcfg = pcfg or model.PretrainConfig(seed=seed)
    mcfg = model.ModelConfig(vocab.n_text, vocab.n_image, seed=seed, **model_kw)
    weights = model.init_model(mcfg)
    items = corpus.knowledge_items(kb, vocab)
    fixed = items + corpus.context_items(kb, vocab, seed)
    return model.pretrain(weights, fixed, pcfg,
                          extra_epoch_items=lambda ep: corpus.context_items(kb, vocab, seed * 100003 + ep))


def train_stage1(kb: KnowledgeBase, vocab: Vocab, seed: int = 0,
                 cfg: meme.Stage1Config | None = None) -> meme.EncoderParams:
    return meme.train_encoders(kb, vocab, kb.entities, cfg or meme.Stage1Config(seed=seed))


def test_stream(kb: KnowledgeBase, n_edits: int = 500, seed: int = 0):
    if n_edits % 2:
        raise ValueError("edit streams hold whole visual/textual pairs")
    return make_edit_stream(kb, n_edits // 2, seed, split="test", locality_split="train")


def stage2_episodes(kb: KnowledgeBase, n_pairs: int = 500, seed: int = 0):
    """Fresh train-split streams, each using every train entity once, until ``n_pairs``."""
    episodes, total, ep = [], 0, 0
    while total < n_pairs:
        s = make_edit_stream(kb, _max_pairs(kb), 10_000 + 1000 * seed + ep,
                             split="train", locality_split="train")
        episodes.append(s)
        total += len(s) // 2
        ep += 1
    return episodes


def _max_pairs(kb: KnowledgeBase) -> int:
    train = kb.split_entities("train")
    return sum(len([e for e in train if e.kind == k]) // 2 for k in ("person", "club"))


def config_dict(obj) -> dict:
    return asdict(obj)
