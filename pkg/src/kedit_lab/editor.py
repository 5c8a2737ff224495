"""Editor strategies, stage-2 connector training and the sequential test protocol."""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from . import meme
from .connector import connector_params
from .decomposer import DecomposedQuery, decompose
from .memi import (EDIT_LR, EDIT_STEPS, AdapterBank, ModalityGates, edit_update,
                   gates_for_query, make_bank)
from .model import FrozenWeights, answer_loss, greedy_decode
from .synthworld import EditRecord, Probe, Vocab, answer_tokens, query_tokens
from .tensor_core import Adam, NumericError, optimizer_step

log = logging.getLogger(__name__)

STRATEGIES = ("external_only", "internal_single_lora", "internal_dual_lora",
              "hybrid_no_connector", "memeic_full")
DEFAULT_GAPS = (0, 10, 20, 50, 100)
LEDGER_VERSION = 1


class TrainingError(RuntimeError):
    pass


@dataclass
class EditorConfig:
    strategy: str = "memeic_full"
    lora_rank: int = 8
    edit_steps: int = EDIT_STEPS
    edit_lr: float = EDIT_LR
    tau: float = meme.DEFAULT_TAU
    alpha: float = meme.DEFAULT_ALPHA
    gap_schedule: tuple[int, ...] = DEFAULT_GAPS
    seed: int = 0
    test_hit_rate: float | None = None  # adversarial retrieval at test time when set

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}")
        gaps = tuple(int(g) for g in self.gap_schedule)
        if any(g < 0 for g in gaps) or any(b <= a for a, b in zip(gaps, gaps[1:])):
            raise ValueError("gaps must be nonnegative and strictly increasing")
        self.gap_schedule = gaps

    @property
    def uses_memory(self) -> bool:
        return self.strategy in ("external_only", "hybrid_no_connector", "memeic_full")

    @property
    def uses_dual(self) -> bool:
        return self.strategy in ("internal_dual_lora", "hybrid_no_connector", "memeic_full")

    @property
    def uses_connector(self) -> bool:
        return self.strategy == "memeic_full"


@dataclass
class AdversarialRetriever:
    """Returns the true entry with probability ``hit_rate``, else a uniform other entry."""
    hit_rate: float
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.hit_rate <= 1.0:
            raise ValueError("hit_rate must lie in [0, 1]")

    def rng_for(self, *key: int) -> np.random.Generator:
        return np.random.default_rng([self.seed, 0xAD, *key])


def adversarial_retrieve(retriever: AdversarialRetriever, store: meme.MemoryStore,
                         dq: DecomposedQuery, truth: dict,
                         rng: np.random.Generator | None = None) -> meme.RetrievedContext:
    """One Bernoulli(hit_rate) draw per retrieval slot; ``truth`` maps slot -> entry index.

    Slots follow R = R_t | R_v | [R_v; R_t]. A slot whose store holds no
    other entry than the truth yields nothing on a miss.
    """
    rng = rng if rng is not None else retriever.rng_for(0)
    slots = {"visual": ["visual"], "textual": ["textual"],
             "compositional": ["visual", "textual"]}[dq.qtype]
    hits, flags = [], {}
    for slot in slots:
        entries = store.visual if slot == "visual" else store.text
        true_idx = truth.get(slot)
        hit = rng.random() < retriever.hit_rate
        others = [i for i in range(len(entries)) if i != true_idx]
        pick = int(rng.integers(len(others))) if others else None
        if true_idx is not None and hit:
            hits.append(meme.hit_from_entry(store, slot, true_idx))
            flags[slot] = True
        elif pick is not None:
            hits.append(meme.hit_from_entry(store, slot, others[pick]))
            flags[slot] = False
        else:
            flags[slot] = False
    return meme.RetrievedContext(hits, flags)


@dataclass
class RunState:
    config: EditorConfig
    weights: FrozenWeights
    vocab: Vocab
    bank: AdapterBank | None
    store: meme.MemoryStore | None
    edit_log: list[int] = field(default_factory=list)
    ledger: list[dict] = field(default_factory=list)
    baseline: dict[str, str] = field(default_factory=dict)
    trace: list[dict] = field(default_factory=list)


def new_state(config: EditorConfig, weights: FrozenWeights, vocab: Vocab,
              encoders: meme.EncoderParams | None = None,
              connector_bank: AdapterBank | None = None) -> RunState:
    cfg = weights.config
    bank = None
    if config.strategy == "internal_single_lora":
        bank = make_bank(cfg.d_model, cfg.n_layers, config.lora_rank, config.seed,
                         dual=False, single=True)
    elif config.uses_dual:
        bank = make_bank(cfg.d_model, cfg.n_layers, config.lora_rank, config.seed)
        if config.uses_connector:
            if connector_bank is None or connector_bank.connector is None:
                raise ValueError("memeic_full needs a trained connector")
            bank.connector = connector_bank.connector.clone()
    store = None
    if config.uses_memory:
        if encoders is None:
            raise ValueError(f"{config.strategy} needs stage-1 encoders")
        store = meme.MemoryStore(encoders, tau=config.tau, alpha=config.alpha)
    return RunState(config, weights, vocab, bank, store)


def edit_prompt(vocab: Vocab, edit: EditRecord,
                store: meme.MemoryStore | None = None) -> tuple[list[int], list[int]]:
    """Query tokens, prefixed by what retrieval returns for the edit when a store exists."""
    prefix = []
    if store is not None:
        prefix = meme.assemble_context(vocab, meme.retrieve(store, decompose(edit.query)))
    return prefix + query_tokens(vocab, edit.query), answer_tokens(vocab, edit.target)


def apply_edit(state: RunState, edit: EditRecord) -> RunState:
    """Adapters for internal strategies, store append for external ones, both for hybrids.

    Hybrids store first and fit the adapter on the context-prefixed prompt the
    edit will be answered with later. Fitting on the bare query instead teaches
    the adapter to overrule retrieved context, and old edits are lost with it.
    """
    if state.store is not None:
        meme.add_edit(state.store, edit)
    if state.bank is not None and (state.bank.visual is not None or state.bank.shared is not None):
        prompt, target = edit_prompt(state.vocab, edit, state.store)
        edit_update(state.weights, state.bank, prompt, target, edit.kind,
                    state.config.edit_steps, state.config.edit_lr)
    state.edit_log.append(edit.edit_id)
    return state


def _truth_indices(state: RunState, probe: Probe) -> dict:
    out = {}
    for slot, eid in probe.truth.items():
        idx = state.store.index_of(slot, eid)
        if idx is not None:
            out[slot] = idx
    return out


def answer_query(state: RunState, probe: Probe, rng: np.random.Generator | None = None,
                 retriever: AdversarialRetriever | None = None) -> tuple[str, dict]:
    dq = decompose(probe.query)
    gates = gates_for_query(dq.qtype)
    ctx = None
    if state.store is not None:
        if retriever is not None and probe.truth:
            ctx = adversarial_retrieve(retriever, state.store, dq, _truth_indices(state, probe), rng)
        else:
            ctx = meme.retrieve(state.store, dq)
    prompt = meme.assemble_context(state.vocab, ctx) + query_tokens(state.vocab, probe.query)
    out = greedy_decode(state.weights, state.bank, gates, prompt, max_new=3, eoa=state.vocab.eoa)
    trace = {}
    if ctx is not None:
        trace = {"indices": [h.index for h in ctx.entries],
                 "scores": [None if not np.isfinite(h.score) else round(h.score, 6)
                            for h in ctx.entries],
                 "hit_flags": ctx.hit_flags or {h.store: h.above_tau for h in ctx.entries}}
    return " ".join(state.vocab.decode(out)), trace


def record_baseline(state: RunState, stream: list[EditRecord]) -> None:
    """Pre-edit outputs for every locality probe: frozen base, no adapters, no memory."""
    pre = RunState(state.config, state.weights, state.vocab, None, None)
    for edit in stream:
        for p in edit.probes:
            if p.kind in ("text_loc", "image_loc"):
                state.baseline[f"{edit.edit_id}:{p.kind}"] = answer_query(pre, p)[0]


def evaluate_edit(state: RunState, edit: EditRecord, gap: int) -> list[dict]:
    retriever = None
    if state.config.test_hit_rate is not None:
        retriever = AdversarialRetriever(state.config.test_hit_rate, state.config.seed)
    rows = []
    for j, p in enumerate(edit.probes):
        rng = retriever.rng_for(edit.edit_id, gap, j) if retriever else None
        pred, trace = answer_query(state, p, rng, retriever)
        if p.kind in ("text_loc", "image_loc"):
            key = f"{edit.edit_id}:{p.kind}"
            if key not in state.baseline:
                raise KeyError(f"missing locality baseline for {key}")
            gold = state.baseline[key]
        else:
            gold = p.gold
        rows.append({"strategy": state.config.strategy, "edit_id": edit.edit_id, "gap": gap,
                     "probe_kind": p.kind, "outcome": int(pred == gold), "pred": pred,
                     "gold": gold})
        if trace:
            state.trace.append({"query_id": f"{edit.edit_id}:{gap}:{p.kind}", **trace})
    return rows


def sequential_run(config: EditorConfig, stream: list[EditRecord], weights: FrozenWeights,
                   vocab: Vocab, encoders=None, connector_bank=None,
                   evaluate: bool = True) -> RunState:
    """Apply edits in order; edit k is probed right after edit k + g for each gap g."""
    if config.gap_schedule and evaluate and config.gap_schedule[-1] > len(stream):
        raise ValueError("gap exceeds stream length")
    state = new_state(config, weights, vocab, encoders, connector_bank)
    if evaluate:
        record_baseline(state, stream)
    for t, edit in enumerate(stream):
        apply_edit(state, edit)
        if not evaluate:
            continue
        for g in config.gap_schedule:
            k = t - g
            if k >= 0:
                state.ledger += evaluate_edit(state, stream[k], g)
        if (t + 1) % 50 == 0:
            log.info("%s: %d/%d edits", config.strategy, t + 1, len(stream))
    return state


# ---------------------------------------------------------------- stage 2

@dataclass
class Stage2Config:
    n_pairs: int = 500
    pairs_per_episode: int = 70
    hit_rate: float = 0.7
    lr: float = 1e-3
    replay: int = 3
    steps_per_example: int = 1
    seed: int = 0
    lora_rank: int = 8
    edit_steps: int = EDIT_STEPS
    edit_lr: float = EDIT_LR


def train_connector_stage2(weights: FrozenWeights, vocab: Vocab, encoders: meme.EncoderParams,
                           episodes: list[list[EditRecord]], cfg: Stage2Config | None = None,
                           connector_layers: list[int] | None = None) -> AdapterBank:
    """Fit the connector on compositional probes under adversarial retrieval.

    Each episode starts from fresh adapters and an empty store. After a
    pair's two edits are applied, the pair's compositional probe plus
    ``replay`` earlier ones from the episode take a connector step each. Only
    connector parameters are in the optimizer.
    """
    cfg = cfg or Stage2Config()
    mc = weights.config
    layers = connector_layers if connector_layers is not None else mc.connector_layers
    conn = make_bank(mc.d_model, mc.n_layers, cfg.lora_rank, cfg.seed + 7919, dual=False,
                     connector_layers=layers).connector
    params = conn.params()
    opt = Adam(params, lr=cfg.lr)
    retriever = AdversarialRetriever(cfg.hit_rate, cfg.seed)
    rng = np.random.default_rng([cfg.seed, 2])
    gates = ModalityGates(1, 1)
    used = 0
    step = 0
    for ep, stream in enumerate(episodes):
        bank = make_bank(mc.d_model, mc.n_layers, cfg.lora_rank, cfg.seed * 1000 + ep)
        bank.connector = conn
        store = meme.MemoryStore(encoders)
        state = RunState(EditorConfig("memeic_full", cfg.lora_rank, cfg.edit_steps, cfg.edit_lr,
                                      seed=cfg.seed), weights, vocab, bank, store)
        comp: list[Probe] = []
        for edit in stream:
            if used >= cfg.n_pairs:
                break
            apply_edit(state, edit)
            if edit.kind != "textual":
                continue
            used += 1
            comp.append(next(p for p in edit.probes if p.kind == "comp_rel"))
            batch = [comp[-1]]
            if len(comp) > 1:
                batch += [comp[int(i)] for i in rng.integers(len(comp) - 1, size=cfg.replay)]
            for p in batch:
                dq = decompose(p.query)
                for _ in range(cfg.steps_per_example):
                    ctx = adversarial_retrieve(retriever, store, dq, _truth_indices(state, p),
                                               retriever.rng_for(step))
                    step += 1
                    prompt = meme.assemble_context(vocab, ctx) + query_tokens(vocab, p.query)
                    for q in params:
                        q.requires_grad_(True)
                    loss = answer_loss(weights, bank, gates, prompt, answer_tokens(vocab, p.gold))
                    try:
                        optimizer_step(opt, loss)
                    except NumericError as exc:
                        raise TrainingError(f"connector training diverged: {exc}") from exc
                    finally:
                        for q in params:
                            q.requires_grad_(False)
        log.info("stage2 episode %d done, %d pairs used", ep, used)
        if used >= cfg.n_pairs:
            break
    return AdapterBank(connector=conn)


# ---------------------------------------------------------------- files

def ledger_jsonl(rows: list[dict]) -> str:
    return "".join(json.dumps({"version": LEDGER_VERSION, **r}, sort_keys=True) + "\n" for r in rows)


def read_ledger(path) -> list[dict]:
    with open(path) as fh:
        rows = [json.loads(line) for line in fh if line.strip()]
    for r in rows:
        if r.pop("version", None) != LEDGER_VERSION:
            raise ValueError(f"{path}: unsupported ledger version")
    return rows


def manifest(config: EditorConfig, dataset_hash: str, extra: dict | None = None) -> dict:
    return {
        "version": LEDGER_VERSION,
        "config": asdict(config),
        "dataset_sha256": dataset_hash,
        "gap_semantics": "edit k is evaluated on the state right after edit k+g",
        "probes_per_kind_per_edit": 1,
        "tau": config.tau,
        "alpha": config.alpha,
        "scope_threshold_note": "retrievals scoring below tau add no context",
        **(extra or {}),
    }


def sha256_text(text: str) -> str:
    return hashlib.sha256(text.encode()).hexdigest()
