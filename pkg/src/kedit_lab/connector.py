"""Knowledge connector: indicator-gated low-rank deltas on attention Q/K."""
from __future__ import annotations

from dataclasses import dataclass

import torch

from .memi import AdapterBank, LoraAdapter, ModalityGates, indicator
from .tensor_core import matmul, softmax


@dataclass
class ConnectorWeights:
    layers: dict[int, tuple[LoraAdapter, LoraAdapter]]  # layer -> (dW_Q, dW_K)

    @classmethod
    def init(cls, d_model: int, rank: int, layer_indices: list[int],
             gen: torch.Generator) -> "ConnectorWeights":
        return cls({i: (LoraAdapter.init(d_model, d_model, rank, gen),
                        LoraAdapter.init(d_model, d_model, rank, gen))
                    for i in sorted(layer_indices)})

    def params(self) -> list[torch.Tensor]:
        out = []
        for i in sorted(self.layers):
            q, k = self.layers[i]
            out += [q.down, q.up, k.down, k.up]
        return out

    def clone(self) -> "ConnectorWeights":
        return ConnectorWeights({i: (q.clone(), k.clone()) for i, (q, k) in self.layers.items()})


def connector_params(bank: AdapterBank) -> list[torch.Tensor]:
    """Exactly the connector's low-rank factors, in a stable layer-major order."""
    return [] if bank.connector is None else bank.connector.params()


def causal_mask(t: int) -> torch.Tensor:
    return torch.triu(torch.ones(t, t, dtype=torch.bool), diagonal=1)


def gated_attention(lw, h: torch.Tensor, bank: AdapterBank | None, layer: int,
                    gates: ModalityGates, n_heads: int,
                    mask: torch.Tensor | None = None) -> torch.Tensor:
    """Causal multi-head attention with Q/K = h (W + 1_{v,t} dW), V = h W_V.

    ``h`` is [B, t, d]. The indicator multiplies the delta term, so a closed
    indicator leaves the projections numerically unchanged.
    """
    B, t, d = h.shape
    q = matmul(h, lw.wq)
    k = matmul(h, lw.wk)
    v = matmul(h, lw.wv)
    if bank is not None and bank.connector is not None and layer in bank.connector.layers:
        ind = float(indicator(gates))
        dq, dk = bank.connector.layers[layer]
        q = q + ind * matmul(matmul(h, dq.down), dq.up) * dq.scale
        k = k + ind * matmul(matmul(h, dk.down), dk.up) * dk.scale
    hd = d // n_heads
    q = q.view(B, t, n_heads, hd).transpose(1, 2)
    k = k.view(B, t, n_heads, hd).transpose(1, 2)
    v = v.view(B, t, n_heads, hd).transpose(1, 2)
    scores = matmul(q, k.transpose(-1, -2)) / hd ** 0.5
    if mask is None:
        mask = causal_mask(t)
    scores = scores.masked_fill(mask, float("-inf"))
    att = softmax(scores, -1)
    z = matmul(att, v).transpose(1, 2).reshape(B, t, d)
    return matmul(z, lw.wo)
