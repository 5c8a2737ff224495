"""Fast property checks runnable without any trained artifact (`kedit selftest`)."""
from __future__ import annotations

import numpy as np
import torch

from . import meme, metrics, model
from .connector import connector_params
from .editor import EditorConfig, ledger_jsonl, sequential_run
from .memi import ModalityGates, fused_ffn, make_bank
from .synthworld import Vocab, generate_world, make_edit_stream
from .tensor_core import grad_check


def _tiny(seed: int):
    kb = generate_world(seed, 40, 4, 1, train_fraction=0.5)
    vocab = Vocab.for_world(kb)
    cfg = model.ModelConfig(vocab.n_text, vocab.n_image, d_model=16, n_layers=2, n_heads=2,
                            d_ff=32, lora_rank=2, seed=seed)
    return kb, vocab, model.init_model(cfg)


@torch.no_grad()
def _randomize(bank, gen: torch.Generator) -> None:
    for name in ("visual", "textual", "shared"):
        for a in bank.group(name):
            a.up.copy_(torch.randn(a.up.shape, generator=gen) * 0.1)
    for p in connector_params(bank):
        p.copy_(torch.randn(p.shape, generator=gen) * 0.1)


def check_zero_delta(seed: int) -> tuple[bool, str]:
    _, vocab, w = _tiny(seed)
    cfg = w.config
    bank = make_bank(cfg.d_model, cfg.n_layers, cfg.lora_rank, seed, connector_layers=cfg.connector_layers)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(20):
        toks = rng.integers(cfg.vocab_size, size=12).tolist()
        ref = model.forward(w, None, ModalityGates(0, 0), toks)
        for g in (ModalityGates(0, 0), ModalityGates(1, 0), ModalityGates(0, 1), ModalityGates(1, 1)):
            worst = max(worst, float((model.forward(w, bank, g, toks) - ref).abs().max()))
    return worst == 0.0, f"max |diff| {worst:g}"


def check_gating(seed: int) -> tuple[bool, str]:
    _, vocab, w = _tiny(seed)
    cfg = w.config
    bank = make_bank(cfg.d_model, cfg.n_layers, cfg.lora_rank, seed, connector_layers=cfg.connector_layers)
    _randomize(bank, torch.Generator().manual_seed(seed))
    no_conn = bank.clone()
    no_conn.connector = None
    rng = np.random.default_rng(seed + 1)
    worst = 0.0
    for i in range(30):
        toks = rng.integers(cfg.vocab_size, size=10).tolist()
        g = ModalityGates(1, 0) if i % 2 else ModalityGates(0, 1)
        worst = max(worst, float((model.forward(w, bank, g, toks)
                                  - model.forward(w, no_conn, g, toks)).abs().max()))
    return worst == 0.0, f"max |diff| {worst:g}"


def check_commutativity(seed: int) -> tuple[bool, str]:
    _, _, w = _tiny(seed)
    cfg = w.config
    bank = make_bank(cfg.d_model, cfg.n_layers, cfg.lora_rank, seed)
    gen = torch.Generator().manual_seed(seed)
    worst = 0.0
    for _ in range(50):
        _randomize(bank, gen)
        x = torch.randn(5, cfg.d_model, generator=gen)
        a = fused_ffn(w.layers[0], x, bank, 0, ModalityGates(1, 1))
        b = fused_ffn(w.layers[0], x, bank, 0, ModalityGates(1, 1), swap=True)
        worst = max(worst, float((a - b).abs().max()))
    return worst <= 1e-9, f"max |diff| {worst:g}"


def check_gradients(seed: int) -> tuple[bool, str]:
    _, vocab, w = _tiny(seed)
    cfg = w.config
    bank = make_bank(cfg.d_model, cfg.n_layers, cfg.lora_rank, seed, connector_layers=cfg.connector_layers)
    _randomize(bank, torch.Generator().manual_seed(seed))
    prompt, target = [5, 9, 12, 3], [7, vocab.eoa]
    params = w.params()[:4] + bank.params("visual")[:2] + connector_params(bank)[:2]
    err = grad_check(lambda: model.answer_loss(w, bank, ModalityGates(1, 1), prompt, target),
                     params, n_samples=4, seed=seed)
    return err < 1e-4, f"max rel err {err:.2e}"


def check_retrieval(seed: int) -> tuple[bool, str]:
    kb, vocab, _ = _tiny(seed)
    enc = meme.EncoderParams.init(vocab, 16, seed)
    stream = make_edit_stream(kb, 8, seed, split="test")
    store = meme.MemoryStore(enc)
    for e in stream:
        meme.add_edit(store, e)
    bad = 0
    for e in stream:
        for p in e.probes:
            s = meme.text_scores(store, p.text)
            brute = max(range(len(s)), key=lambda i: (s[i], -i))
            bad += meme.retrieve_text(store, p.text).index != brute
            if p.image is not None:
                v = meme.visual_scores(store, p.image, p.text)
                brute = max(range(len(v)), key=lambda i: (v[i], -i))
                bad += meme.retrieve_visual(store, p.image, p.text).index != brute
    return bad == 0, f"{bad} disagreements"


def check_metrics(seed: int) -> tuple[bool, str]:
    outcomes = [1, 0, 1, 1, 0, 1, 1, 1, 0, 1]
    ledger = [{"strategy": "s", "edit_id": i, "gap": 0, "probe_kind": "vis_rel", "outcome": o,
               "pred": "", "gold": ""} for i, o in enumerate(outcomes)]
    r = metrics.reliability(ledger, "visual", 0)
    k = metrics.kur(0.5, 1.0, 1.0)
    ok = r == 0.7 and k == 0.5
    try:
        metrics.comp_rel(ledger, 0)
        ok = False
    except metrics.UndefinedMetric:
        pass
    return ok, f"reliability {r}, kur {k}"


def check_determinism(seed: int) -> tuple[bool, str]:
    kb, vocab, w = _tiny(seed)
    w.freeze()
    enc = meme.EncoderParams.init(vocab, 16, seed)
    stream = make_edit_stream(kb, 4, seed, split="test")
    cfg = EditorConfig("hybrid_no_connector", lora_rank=2, edit_steps=2, gap_schedule=(0, 2), seed=seed)
    fp = w.fingerprint()
    a = ledger_jsonl(sequential_run(cfg, stream, w, vocab, enc).ledger)
    b = ledger_jsonl(sequential_run(cfg, stream, w, vocab, enc).ledger)
    ok = a == b and w.fingerprint() == fp
    return ok, "identical ledgers, frozen weights untouched" if ok else "ledger or weights differ"


CHECKS = {
    "zero-delta transparency": check_zero_delta,
    "unimodal gating ignores the connector": check_gating,
    "adapter summation order": check_commutativity,
    "finite-difference gradients": check_gradients,
    "retrieval equals exhaustive argmax": check_retrieval,
    "metric arithmetic": check_metrics,
    "run determinism": check_determinism,
}


def run_selftest(seed: int = 0, out=print) -> bool:
    torch.set_num_threads(1)
    all_ok = True
    for name, fn in CHECKS.items():
        ok, detail = fn(seed)
        all_ok &= ok
        out(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
    return all_ok
