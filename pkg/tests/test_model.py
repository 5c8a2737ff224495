import numpy as np
import pytest
import torch

from kedit_lab import model
from kedit_lab.corpus import build_corpus, context_items, knowledge_items
from kedit_lab.memi import ModalityGates, make_bank
from kedit_lab.synthworld import Vocab, generate_world
from kedit_lab.tensor_core import grad_check

G00, G11 = ModalityGates(0, 0), ModalityGates(1, 1)


def _count_by_hand(cfg):
    w = model.init_model(cfg)
    return sum(p.numel() for p in w.params())


@pytest.mark.parametrize("kw", [{}, {"d_model": 32, "n_heads": 2, "d_ff": 48, "n_layers": 3}])
def test_param_count_closed_form(kw):
    cfg = model.ModelConfig(100, 512, **kw)
    assert model.param_count(cfg) == _count_by_hand(cfg)


def test_config_errors():
    with pytest.raises(model.ModelConfigError):
        model.init_model(model.ModelConfig(10, 10, d_model=65, n_heads=4))
    with pytest.raises(model.ModelConfigError):
        model.init_model(model.ModelConfig(10, 10, lora_rank=0))
    with pytest.raises(model.ModelConfigError):
        model.init_model(model.ModelConfig(10, 10, connector_layer_indices=[7]))


def test_same_seed_same_weights(tiny_model):
    again = model.init_model(tiny_model.config)
    assert again.fingerprint() == tiny_model.fingerprint()


def test_zero_adapters_are_transparent(tiny_model, rng):
    cfg = tiny_model.config
    bank = make_bank(cfg.d_model, cfg.n_layers, cfg.lora_rank, 0, connector_layers=cfg.connector_layers)
    toks = rng.integers(cfg.vocab_size, size=15).tolist()
    ref = model.forward(tiny_model, None, G00, toks)
    for g in (G00, ModalityGates(1, 0), ModalityGates(0, 1), G11):
        assert torch.equal(model.forward(tiny_model, bank, g, toks), ref)


def test_forward_is_bit_deterministic(tiny_model, rng):
    toks = rng.integers(tiny_model.config.vocab_size, size=9).tolist()
    a = model.forward(tiny_model, None, G00, toks)
    b = model.forward(tiny_model, None, G00, toks)
    assert torch.equal(a, b)


def test_causality(tiny_model, rng):
    toks = rng.integers(tiny_model.config.vocab_size, size=12).tolist()
    a = model.forward(tiny_model, None, G00, toks)
    toks2 = toks[:7] + [(t + 1) % tiny_model.config.vocab_size for t in toks[7:]]
    b = model.forward(tiny_model, None, G00, toks2)
    assert torch.equal(a[:7], b[:7])
    assert not torch.equal(a[7:], b[7:])


def test_overlong_sequence(tiny_model):
    with pytest.raises(model.SequenceTooLong):
        model.forward(tiny_model, None, G00, [1] * (tiny_model.config.max_seq_len + 1))


def test_out_of_vocab_token(tiny_model):
    with pytest.raises(IndexError):
        model.forward(tiny_model, None, G00, [tiny_model.config.vocab_size])


def test_batched_loss_equals_single_sequence_losses(tiny_model, rng):
    V = tiny_model.config.vocab_size
    items = [(rng.integers(V, size=n).tolist(), rng.integers(V, size=m).tolist())
             for n, m in [(5, 2), (9, 1), (3, 3)]]
    batched = float(model.batch_loss(tiny_model, None, G00, items))
    per_token = []
    for p, a in items:
        per_token += [float(model.answer_loss(tiny_model, None, G00, p, a))] * len(a)
    assert abs(batched - np.mean(per_token)) < 1e-12


def test_batched_exact_match_equals_greedy(tiny_model, rng):
    V = tiny_model.config.vocab_size
    items = []
    for n in (4, 6, 8, 5):
        p = rng.integers(V, size=n).tolist()
        out = model.greedy_decode(tiny_model, None, G00, p, max_new=2)
        items.append((p, out))
        items.append((p, [(out[0] + 1) % V] + out[1:]))
    assert model.exact_match_rate(tiny_model, None, G00, items) == 0.5


def test_greedy_emits_forced_token_and_breaks_ties_low(tiny_model):
    w = model.init_model(tiny_model.config)
    with torch.no_grad():
        w.head.zero_()
        w.lnf_g.zero_()
        w.lnf_b.zero_()
        w.lnf_b[0] = 1.0
        w.head[0, 7] = 50.0
    assert model.greedy_decode(w, None, G00, [1, 2], max_new=1) == [7]
    with torch.no_grad():
        w.head[0, 7] = 0.0
        w.head[0, 3] = w.head[0, 9] = 5.0
    assert model.greedy_decode(w, None, G00, [1, 2], max_new=1) == [3]
    assert model.greedy_decode(w, None, G00, [1, 2], max_new=3, eoa=3) == []


def test_base_gradients_match_finite_differences(tiny_model):
    params = [tiny_model.tok_emb, tiny_model.layers[0].wq, tiny_model.layers[1].w1,
              tiny_model.layers[1].ln2_g, tiny_model.head]
    err = grad_check(lambda: model.answer_loss(tiny_model, None, G00, [3, 8, 1, 4], [6, 2]),
                     params, n_samples=6)
    assert err < 1e-4


def test_pretrain_preconditions(tiny_model):
    with pytest.raises(ValueError):
        model.pretrain(tiny_model, [])
    with pytest.raises(ValueError):
        model.pretrain(tiny_model, [([1], [2])], model.PretrainConfig(target_acc=0.0))


def test_pretrain_cap_raises_with_accuracy(tiny_world):
    kb, vocab = tiny_world
    w = model.init_model(model.ModelConfig(vocab.n_text, vocab.n_image, d_model=16, n_layers=1,
                                           n_heads=2, d_ff=16))
    with pytest.raises(model.TrainingFailure) as ei:
        model.pretrain(w, knowledge_items(kb, vocab), model.PretrainConfig(max_epochs=1, eval_every=1))
    assert 0.0 <= ei.value.accuracy < 0.99


def test_fifty_fact_world_reaches_target():
    kb = generate_world(0, 50, 4, 1)
    vocab = Vocab.for_world(kb)
    w = model.init_model(model.ModelConfig(vocab.n_text, vocab.n_image))
    out = model.pretrain(w, knowledge_items(kb, vocab), model.PretrainConfig(max_epochs=150, eval_every=5))
    assert out.frozen
    assert model.exact_match_rate(out, None, G00, knowledge_items(kb, vocab)) >= 0.99


def test_context_items_target_the_context_answer(tiny_world):
    kb, vocab = tiny_world
    sep = vocab.stoi["<sep>"]
    for prompt, ans in context_items(kb, vocab, seed=0):
        last_entry = prompt[: len(prompt) - prompt[::-1].index(sep)]
        a_pos = len(last_entry) - 1 - last_entry[::-1].index(vocab.stoi["<a>"])
        assert last_entry[a_pos + 1:-1] == ans[:-1]
    assert len(build_corpus(kb, vocab)) > len(knowledge_items(kb, vocab))


def test_checkpoint_roundtrip(tmp_path, tiny_model):
    tiny_model.freeze()
    model.save_model(tmp_path / "m.npz", tiny_model)
    back = model.load_model(tmp_path / "m.npz")
    assert back.fingerprint() == tiny_model.fingerprint()
    assert back.config == tiny_model.config and back.frozen


def test_checkpoint_rejects_other_formats(tmp_path, tiny_model):
    model.save_adapters(tmp_path / "a.npz", make_bank(16, 2, 2, 0))
    with pytest.raises(ValueError):
        model.load_model(tmp_path / "a.npz")
