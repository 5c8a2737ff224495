"""Dual modality-specific low-rank FFN adapters and gate routing."""
from __future__ import annotations

from dataclasses import dataclass, field

import torch

from .tensor_core import SGD, DimensionError, matmul, optimizer_step

QTYPES = ("visual", "textual", "compositional")


class PreconditionError(ValueError):
    pass


@dataclass(frozen=True)
class ModalityGates:
    visual: int = 0
    textual: int = 0

    def __iter__(self):
        return iter((self.visual, self.textual))


def gates_for_query(qtype: str) -> ModalityGates:
    if qtype == "visual":
        return ModalityGates(1, 0)
    if qtype == "textual":
        return ModalityGates(0, 1)
    if qtype == "compositional":
        return ModalityGates(1, 1)
    raise ValueError(f"unknown query type {qtype!r}")


def indicator(g: ModalityGates) -> int:
    return 1 if (g.visual == 1 and g.textual == 1) else 0


@dataclass
class LoraAdapter:
    down: torch.Tensor  # [d_in, r]
    up: torch.Tensor    # [r, d_out]
    scale: float = 1.0

    @classmethod
    def init(cls, d_in: int, d_out: int, rank: int, gen: torch.Generator,
             scale: float = 1.0) -> "LoraAdapter":
        down = torch.randn(d_in, rank, generator=gen) / d_in ** 0.5
        return cls(down, torch.zeros(rank, d_out), scale)

    @property
    def rank(self) -> int:
        return self.down.shape[1]

    def params(self) -> list[torch.Tensor]:
        return [self.down, self.up]

    def materialize(self) -> torch.Tensor:
        return self.scale * (self.down @ self.up)

    def clone(self) -> "LoraAdapter":
        return LoraAdapter(self.down.detach().clone(), self.up.detach().clone(), self.scale)


def lora_delta(adapter: LoraAdapter, x: torch.Tensor) -> torch.Tensor:
    if x.shape[-1] != adapter.down.shape[0]:
        raise DimensionError(f"adapter expects d_in={adapter.down.shape[0]}, got {x.shape[-1]}")
    return adapter.scale * matmul(matmul(x, adapter.down), adapter.up)


@dataclass
class AdapterBank:
    """theta_v / theta_t per layer, optional single shared adapter, and the connector."""
    visual: list[LoraAdapter] | None = None
    textual: list[LoraAdapter] | None = None
    shared: list[LoraAdapter] | None = None
    connector: "ConnectorWeights | None" = None

    def group(self, name: str) -> list[LoraAdapter]:
        return getattr(self, name) or []

    def params(self, name: str) -> list[torch.Tensor]:
        if name == "connector":
            return self.connector.params() if self.connector is not None else []
        return [p for a in self.group(name) for p in a.params()]

    def clone(self) -> "AdapterBank":
        cp = lambda xs: None if xs is None else [a.clone() for a in xs]
        return AdapterBank(cp(self.visual), cp(self.textual), cp(self.shared),
                           None if self.connector is None else self.connector.clone())


def make_bank(d_model: int, n_layers: int, rank: int, seed: int, dual: bool = True,
              single: bool = False, connector_layers: list[int] | None = None) -> AdapterBank:
    from .connector import ConnectorWeights

    gen = torch.Generator().manual_seed(seed)
    bank = AdapterBank()
    if dual:
        bank.visual = [LoraAdapter.init(d_model, d_model, rank, gen) for _ in range(n_layers)]
        bank.textual = [LoraAdapter.init(d_model, d_model, rank, gen) for _ in range(n_layers)]
    if single:
        bank.shared = [LoraAdapter.init(d_model, d_model, 2 * rank, gen) for _ in range(n_layers)]
    if connector_layers is not None:
        bank.connector = ConnectorWeights.init(d_model, rank, connector_layers, gen)
    return bank


def frozen_ffn(lw, x: torch.Tensor) -> torch.Tensor:
    return matmul(torch.nn.functional.gelu(matmul(x, lw.w1) + lw.b1), lw.w2) + lw.b2


def fused_ffn(lw, x: torch.Tensor, bank: AdapterBank | None, layer: int,
              gates: ModalityGates, swap: bool = False) -> torch.Tensor:
    """Frozen FFN output plus gated adapter outputs, summed frozen, visual, textual.

    A closed gate drops the summand entirely, so (0, 0) is the frozen output
    bit for bit. ``swap`` adds textual before visual (commutativity checks).
    """
    out = frozen_ffn(lw, x)
    if bank is None:
        return out
    terms = []
    if gates.visual and bank.visual is not None:
        terms.append(lora_delta(bank.visual[layer], x))
    if gates.textual and bank.textual is not None:
        terms.append(lora_delta(bank.textual[layer], x))
    if swap:
        terms.reverse()
    for t in terms:
        out = out + t
    if bank.shared is not None:
        out = out + lora_delta(bank.shared[layer], x)
    return out


def edit_group(bank: AdapterBank, kind: str) -> str:
    if kind not in ("visual", "textual"):
        raise PreconditionError("each edit alters either the visual or the textual adapter")
    if bank.shared is not None:
        return "shared"
    return kind


EDIT_STEPS = 10
# plain gradient descent; Adam's per-coordinate normalisation moved every adapter
# weight by ~lr per step and 250 edits of that drift erased locality
EDIT_LR = 0.3


def edit_update(weights, bank: AdapterBank, prompt: list[int], target: list[int], kind: str,
                steps: int = EDIT_STEPS, lr: float = EDIT_LR) -> AdapterBank:
    """Fit the adapter matching ``kind`` to ``prompt -> target``; nothing else moves.

    Gradient descent on next-token cross-entropy over the answer span only.
    Gates follow the edit's own modality.
    """
    from .model import answer_loss

    group = edit_group(bank, kind)
    if steps <= 0:
        return bank
    params = bank.params(group)
    gates = gates_for_query(kind)
    opt = SGD(params, lr=lr)
    for p in params:
        p.requires_grad_(True)
    try:
        for _ in range(steps):
            loss = answer_loss(weights, bank, gates, prompt, target)
            optimizer_step(opt, loss)
    finally:
        for p in params:
            p.requires_grad_(False)
    return bank


def principal_angle(a: torch.Tensor, b: torch.Tensor) -> float:
    """Smallest principal angle (radians) between the column spaces of a and b."""
    qa, _ = torch.linalg.qr(a)
    qb, _ = torch.linalg.qr(b)
    s = torch.linalg.svdvals(qa.T @ qb)
    return float(torch.arccos(torch.clamp(s.max(), -1.0, 1.0)))
