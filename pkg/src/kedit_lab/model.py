"""Tiny pre-LN decoder-only transformer over the joint word/image vocabulary."""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, fields

import numpy as np
import torch

from .connector import causal_mask, gated_attention
from .memi import AdapterBank, LoraAdapter, ModalityGates, fused_ffn
from .tensor_core import Adam, cross_entropy, layer_norm, matmul, optimizer_step

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


class ModelConfigError(ValueError):
    pass


class SequenceTooLong(ValueError):
    pass


class TrainingFailure(RuntimeError):
    def __init__(self, msg: str, accuracy: float):
        super().__init__(msg)
        self.accuracy = accuracy


@dataclass
class ModelConfig:
    vocab_size_text: int
    vocab_size_image: int
    d_model: int = 64
    n_layers: int = 4
    n_heads: int = 4
    d_ff: int = 256
    max_seq_len: int = 64
    lora_rank: int = 8
    connector_layer_indices: list[int] | None = None  # None = every layer
    seed: int = 0

    def validate(self) -> "ModelConfig":
        if self.d_model % self.n_heads:
            raise ModelConfigError("d_model must be divisible by n_heads")
        if self.lora_rank < 1:
            raise ModelConfigError("lora_rank must be >= 1")
        if min(self.vocab_size_text, self.vocab_size_image, self.d_model, self.n_layers,
               self.d_ff, self.max_seq_len) < 1:
            raise ModelConfigError("sizes must be positive")
        for i in self.connector_layers:
            if not 0 <= i < self.n_layers:
                raise ModelConfigError(f"connector layer {i} out of range")
        return self

    @property
    def vocab_size(self) -> int:
        return self.vocab_size_text + self.vocab_size_image

    @property
    def connector_layers(self) -> list[int]:
        if self.connector_layer_indices is None:
            return list(range(self.n_layers))
        return sorted(self.connector_layer_indices)


@dataclass
class LayerWeights:
    ln1_g: torch.Tensor
    ln1_b: torch.Tensor
    wq: torch.Tensor
    wk: torch.Tensor
    wv: torch.Tensor
    wo: torch.Tensor
    ln2_g: torch.Tensor
    ln2_b: torch.Tensor
    w1: torch.Tensor
    b1: torch.Tensor
    w2: torch.Tensor
    b2: torch.Tensor


@dataclass
class FrozenWeights:
    config: ModelConfig
    tok_emb: torch.Tensor
    pos_emb: torch.Tensor
    layers: list[LayerWeights]
    lnf_g: torch.Tensor
    lnf_b: torch.Tensor
    head: torch.Tensor
    frozen: bool = False

    def named_params(self) -> list[tuple[str, torch.Tensor]]:
        out = [("tok_emb", self.tok_emb), ("pos_emb", self.pos_emb)]
        for i, lw in enumerate(self.layers):
            out += [(f"layers.{i}.{f.name}", getattr(lw, f.name)) for f in fields(LayerWeights)]
        out += [("lnf_g", self.lnf_g), ("lnf_b", self.lnf_b), ("head", self.head)]
        return out

    def params(self) -> list[torch.Tensor]:
        return [p for _, p in self.named_params()]

    def freeze(self) -> "FrozenWeights":
        for p in self.params():
            p.requires_grad_(False)
        self.frozen = True
        return self

    def fingerprint(self) -> bytes:
        return b"".join(p.detach().numpy().tobytes() for p in self.params())


def param_count(cfg: ModelConfig) -> int:
    d, V, f = cfg.d_model, cfg.vocab_size, cfg.d_ff
    per_layer = 2 * d + 4 * d * d + 2 * d + d * f + f + f * d + d
    return V * d + cfg.max_seq_len * d + cfg.n_layers * per_layer + 2 * d + d * V


def init_model(cfg: ModelConfig) -> FrozenWeights:
    cfg.validate()
    gen = torch.Generator().manual_seed(cfg.seed)
    d, f = cfg.d_model, cfg.d_ff
    rn = lambda *s, std=0.02: torch.randn(*s, generator=gen) * std
    proj_std = 0.02 / (2 * cfg.n_layers) ** 0.5
    layers = [LayerWeights(
        ln1_g=torch.ones(d), ln1_b=torch.zeros(d),
        wq=rn(d, d), wk=rn(d, d), wv=rn(d, d), wo=rn(d, d, std=proj_std),
        ln2_g=torch.ones(d), ln2_b=torch.zeros(d),
        w1=rn(d, f), b1=torch.zeros(f), w2=rn(f, d, std=proj_std), b2=torch.zeros(d))
        for _ in range(cfg.n_layers)]
    return FrozenWeights(cfg, rn(cfg.vocab_size, d), rn(cfg.max_seq_len, d), layers,
                         torch.ones(d), torch.zeros(d), rn(d, cfg.vocab_size))


# ---------------------------------------------------------------- forward

def hidden(weights: FrozenWeights, bank: AdapterBank | None, gates: ModalityGates,
           ids: torch.Tensor) -> torch.Tensor:
    """Final-norm hidden states for a right-padded batch ``ids`` [B, t]."""
    cfg = weights.config
    B, t = ids.shape
    if t > cfg.max_seq_len:
        raise SequenceTooLong(f"sequence of {t} exceeds max_seq_len {cfg.max_seq_len}")
    x = weights.tok_emb[ids] + weights.pos_emb[:t]
    mask = causal_mask(t)
    for i, lw in enumerate(weights.layers):
        a = layer_norm(x, lw.ln1_g, lw.ln1_b)
        x = x + gated_attention(lw, a, bank, i, gates, cfg.n_heads, mask)
        f = layer_norm(x, lw.ln2_g, lw.ln2_b)
        x = x + fused_ffn(lw, f, bank, i, gates)
    return layer_norm(x, weights.lnf_g, weights.lnf_b)


def _check_ids(weights: FrozenWeights, tokens) -> torch.Tensor:
    ids = torch.as_tensor(list(tokens), dtype=torch.long)
    V = weights.config.vocab_size
    if ids.numel() and (int(ids.min()) < 0 or int(ids.max()) >= V):
        raise IndexError("token id outside the vocabulary")
    return ids


def forward(weights: FrozenWeights, bank: AdapterBank | None, gates: ModalityGates,
            tokens) -> torch.Tensor:
    """Logits [t, V] for one token sequence."""
    ids = _check_ids(weights, tokens)
    h = hidden(weights, bank, gates, ids[None, :])[0]
    return matmul(h, weights.head)


def answer_loss(weights: FrozenWeights, bank: AdapterBank | None, gates: ModalityGates,
                prompt: list[int], target: list[int]) -> torch.Tensor:
    """Cross-entropy on the ``target`` span given ``prompt``; prompt positions masked."""
    seq = list(prompt) + list(target)
    ids = _check_ids(weights, seq[:-1])
    h = hidden(weights, bank, gates, ids[None, :])[0]
    pos = torch.arange(len(prompt) - 1, len(seq) - 1)
    return cross_entropy(matmul(h[pos], weights.head), torch.as_tensor(target))


def greedy_decode(weights: FrozenWeights, bank: AdapterBank | None, gates: ModalityGates,
                  prompt: list[int], max_new: int, eoa: int | None = None) -> list[int]:
    """Argmax decoding; ties go to the lowest id. The end token is not returned."""
    if not prompt:
        raise ValueError("empty prompt")
    seq = list(prompt)
    out: list[int] = []
    with torch.no_grad():
        for _ in range(max_new):
            logits = forward(weights, bank, gates, seq)[-1]
            nxt = int(torch.argmax(logits))
            if eoa is not None and nxt == eoa:
                break
            out.append(nxt)
            seq.append(nxt)
    return out


# ---------------------------------------------------------------- batched training

def _batch(items: list[tuple[list[int], list[int]]]):
    """Right-padded inputs plus (row, position, target) triples for answer tokens."""
    lens = [len(p) + len(a) - 1 for p, a in items]
    t = max(lens)
    ids = torch.zeros(len(items), t, dtype=torch.long)
    rows, cols, tgts = [], [], []
    for b, (p, a) in enumerate(items):
        seq = p + a
        ids[b, : len(seq) - 1] = torch.as_tensor(seq[:-1])
        for j, tok in enumerate(a):
            rows.append(b)
            cols.append(len(p) - 1 + j)
            tgts.append(tok)
    return ids, torch.as_tensor(rows), torch.as_tensor(cols), torch.as_tensor(tgts)


def batch_loss(weights, bank, gates, items) -> torch.Tensor:
    ids, rows, cols, tgts = _batch(items)
    h = hidden(weights, bank, gates, ids)
    return cross_entropy(matmul(h[rows, cols], weights.head), tgts)


def exact_match_rate(weights, bank, gates, items, batch_size: int = 256) -> float:
    """Fraction of items whose greedy continuation equals the target exactly.

    Teacher-forced argmax matching at every answer position (end token
    included) is equivalent to greedy decoding reproducing the target.
    """
    hits = 0
    with torch.no_grad():
        for s in range(0, len(items), batch_size):
            chunk = items[s:s + batch_size]
            ids, rows, cols, tgts = _batch(chunk)
            pred = torch.argmax(matmul(hidden(weights, bank, gates, ids)[rows, cols], weights.head), -1)
            ok = torch.ones(len(chunk), dtype=torch.bool)
            wrong = rows[pred != tgts]
            ok[wrong] = False
            hits += int(ok.sum())
    return hits / len(items)


@dataclass
class PretrainConfig:
    target_acc: float = 0.99
    max_epochs: int = 200
    batch_size: int = 64
    lr: float = 3e-3
    eval_every: int = 5
    seed: int = 0


def pretrain(weights: FrozenWeights, corpus, cfg: PretrainConfig | None = None,
             gates_for=None, extra_epoch_items=None) -> FrozenWeights:
    """Next-token training on (prompt, answer) items until exact match >= target.

    ``gates_for`` is ignored by the base model (no adapters during
    pretraining); ``extra_epoch_items(epoch)`` may supply fresh items per epoch.
    Weights are frozen on success; hitting the epoch cap raises
    ``TrainingFailure`` carrying the achieved accuracy.
    """
    cfg = cfg or PretrainConfig()
    if not corpus:
        raise ValueError("empty corpus")
    if not 0 < cfg.target_acc <= 1:
        raise ValueError("target_acc must be in (0, 1]")
    params = weights.params()
    for p in params:
        p.requires_grad_(True)
    opt = Adam(params, lr=cfg.lr)
    gates = ModalityGates(0, 0)
    rng = np.random.default_rng(cfg.seed)
    acc = 0.0
    for epoch in range(1, cfg.max_epochs + 1):
        items = list(corpus)
        if extra_epoch_items is not None:
            items += extra_epoch_items(epoch)
        # length-bucketed shuffled batches
        order = rng.permutation(len(items))
        order = sorted(order, key=lambda i: (len(items[i][0]) + len(items[i][1])) // 4)
        batches = [order[s:s + cfg.batch_size] for s in range(0, len(order), cfg.batch_size)]
        total = 0.0
        for bi in rng.permutation(len(batches)):
            loss = batch_loss(weights, None, gates, [items[i] for i in batches[bi]])
            total += optimizer_step(opt, loss)
        if epoch % cfg.eval_every == 0 or epoch == cfg.max_epochs:
            acc = exact_match_rate(weights, None, gates, corpus)
            log.info("pretrain epoch %d loss %.4f exact-match %.4f", epoch, total / len(batches), acc)
            if acc >= cfg.target_acc:
                return weights.freeze()
    for p in params:
        p.requires_grad_(False)
    raise TrainingFailure(f"epoch cap reached at exact-match {acc:.4f}", acc)


# ---------------------------------------------------------------- checkpoints
# npz archive: "__header__" holds UTF-8 JSON {"format", "version", "config",
# plus caller metadata}; every other key is a float64 array named by its path.

def _write_npz(path, header: dict, arrays: dict[str, np.ndarray]) -> None:
    data = {"__header__": np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)}
    data.update(arrays)
    with open(path, "wb") as fh:
        np.savez(fh, **data)


def _read_npz(path) -> tuple[dict, dict[str, np.ndarray]]:
    with np.load(path) as z:
        header = json.loads(bytes(z["__header__"]).decode())
        arrays = {k: z[k] for k in z.files if k != "__header__"}
    return header, arrays


def save_model(path, weights: FrozenWeights, meta: dict | None = None) -> None:
    header = {"format": "kedit-model", "version": CHECKPOINT_VERSION,
              "config": asdict(weights.config), "frozen": weights.frozen, "meta": meta or {}}
    _write_npz(path, header, {n: p.detach().numpy() for n, p in weights.named_params()})


def load_model(path) -> FrozenWeights:
    header, arrays = _read_npz(path)
    if header.get("format") != "kedit-model" or header.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: not a version-{CHECKPOINT_VERSION} model checkpoint")
    cfg = ModelConfig(**header["config"])
    w = init_model(cfg)
    for name, p in w.named_params():
        p.data = torch.from_numpy(arrays[name].copy())
    if header.get("frozen"):
        w.freeze()
    return w


def _adapter_arrays(prefix: str, adapters: list[LoraAdapter] | None) -> dict[str, np.ndarray]:
    out = {}
    for i, a in enumerate(adapters or []):
        out[f"{prefix}/{i}/down"] = a.down.detach().numpy()
        out[f"{prefix}/{i}/up"] = a.up.detach().numpy()
    return out


def save_adapters(path, bank: AdapterBank, meta: dict | None = None) -> None:
    """Adapters by modality label; the connector lives in its own section."""
    arrays = {}
    arrays.update(_adapter_arrays("visual", bank.visual))
    arrays.update(_adapter_arrays("textual", bank.textual))
    arrays.update(_adapter_arrays("shared", bank.shared))
    conn_layers = []
    if bank.connector is not None:
        for i, (q, k) in sorted(bank.connector.layers.items()):
            conn_layers.append(i)
            for name, a in (("q", q), ("k", k)):
                arrays[f"connector/{i}/{name}_down"] = a.down.detach().numpy()
                arrays[f"connector/{i}/{name}_up"] = a.up.detach().numpy()
    sections = {name: len(getattr(bank, name)) for name in ("visual", "textual", "shared")
                if getattr(bank, name) is not None}
    header = {"format": "kedit-adapters", "version": CHECKPOINT_VERSION,
              "sections": sections, "connector_layers": conn_layers, "meta": meta or {}}
    _write_npz(path, header, arrays)


def load_adapters(path) -> AdapterBank:
    from .connector import ConnectorWeights

    header, arrays = _read_npz(path)
    if header.get("format") != "kedit-adapters":
        raise ValueError(f"{path}: not an adapter checkpoint")
    t = lambda k: torch.from_numpy(arrays[k].copy())
    bank = AdapterBank()
    for name, n in header["sections"].items():
        setattr(bank, name, [LoraAdapter(t(f"{name}/{i}/down"), t(f"{name}/{i}/up")) for i in range(n)])
    if header["connector_layers"]:
        bank.connector = ConnectorWeights({
            i: (LoraAdapter(t(f"connector/{i}/q_down"), t(f"connector/{i}/q_up")),
                LoraAdapter(t(f"connector/{i}/k_down"), t(f"connector/{i}/k_up")))
            for i in header["connector_layers"]})
    return bank
