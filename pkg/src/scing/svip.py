"""Selective visual prompt fusion and the meta-net (indiscriminate) fusion baseline."""

import torch
import torch.nn as nn

from .errors import ShapeError


class SVIP(nn.Module):
    """Condition MLP and sigmoid gate, both emitting ``M x d`` per image.

    The MLP is ``D -> D/2 -> M*d`` with a ReLU in between; the gate is
    ``sigmoid(V @ W_s + b_s)`` with ``W_s`` of shape ``(D, M*d)``. With
    ``init_std=0`` every layer keeps the default ``nn.Linear`` initialisation;
    a positive value draws the output layers from N(0, init_std^2).
    """

    def __init__(self, feature_dim: int, embed_dim: int, n_fused: int, hidden_dim: int | None = None,
                 init_std: float = 0.0):
        super().__init__()
        hidden_dim = hidden_dim or max(feature_dim // 2, 1)
        self.feature_dim = feature_dim
        self.embed_dim = embed_dim
        self.n_fused = n_fused
        self.mlp = nn.Sequential(
            nn.Linear(feature_dim, hidden_dim),
            nn.ReLU(),
            nn.Linear(hidden_dim, n_fused * embed_dim),
        )
        gate = nn.Linear(feature_dim, n_fused * embed_dim)
        if init_std > 0:
            nn.init.normal_(self.mlp[2].weight, std=init_std)
            nn.init.zeros_(self.mlp[2].bias)
            nn.init.normal_(gate.weight, std=init_std)
            nn.init.zeros_(gate.bias)
        self.gate_W = nn.Parameter(gate.weight.detach().T.contiguous())
        self.gate_b = nn.Parameter(gate.bias.detach().clone())

    def _check(self, V: torch.Tensor) -> None:
        if V.shape[-1] != self.feature_dim:
            raise ShapeError(f"expected feature dim {self.feature_dim}, got {V.shape[-1]}")

    def condition(self, V: torch.Tensor) -> torch.Tensor:
        self._check(V)
        return self.mlp(V).reshape(*V.shape[:-1], self.n_fused, self.embed_dim)

    def gate(self, V: torch.Tensor) -> torch.Tensor:
        self._check(V)
        a = torch.sigmoid(V @ self.gate_W + self.gate_b)
        # Saturated logits round to exactly 0 or 1; keep the open interval.
        fi = torch.finfo(a.dtype)
        a = a.clamp(fi.tiny, 1.0 - fi.eps / 2)
        return a.reshape(*V.shape[:-1], self.n_fused, self.embed_dim)

    def forward(self, head: torch.Tensor, V: torch.Tensor) -> torch.Tensor:
        return fuse(head, self.condition(V), self.gate(V))


class MetaNet(nn.Module):
    """CoCoOp-style meta-net: one ``d``-vector per image, added to every token."""

    def __init__(self, feature_dim: int, embed_dim: int, hidden_dim: int | None = None,
                 init_std: float = 0.0):
        super().__init__()
        hidden_dim = hidden_dim or max(feature_dim // 2, 1)
        self.feature_dim = feature_dim
        self.embed_dim = embed_dim
        self.net = nn.Sequential(
            nn.Linear(feature_dim, hidden_dim), nn.ReLU(), nn.Linear(hidden_dim, embed_dim)
        )
        if init_std > 0:
            nn.init.normal_(self.net[2].weight, std=init_std)
            nn.init.zeros_(self.net[2].bias)

    def forward(self, x_g: torch.Tensor) -> torch.Tensor:
        if x_g.shape[-1] != self.feature_dim:
            raise ShapeError(f"expected feature dim {self.feature_dim}, got {x_g.shape[-1]}")
        return self.net(x_g)


def visual_condition(params: SVIP, V: torch.Tensor) -> torch.Tensor:
    return params.condition(V)


def gate(params: SVIP, V: torch.Tensor) -> torch.Tensor:
    return params.gate(V)


def fuse(head: torch.Tensor, condition: torch.Tensor, weights: torch.Tensor) -> torch.Tensor:
    """``p_i + c_i * alpha_i`` row by row over the first M tokens."""
    if head.shape != condition.shape or head.shape != weights.shape:
        raise ShapeError(
            f"fuse operands must share a shape, got {tuple(head.shape)}, "
            f"{tuple(condition.shape)}, {tuple(weights.shape)}"
        )
    return head + condition * weights


def cocoop_fuse(meta_net, prompts: torch.Tensor, x_g: torch.Tensor) -> torch.Tensor:
    """Add ``meta_net(x_g)`` to all L prompt tokens.

    ``prompts`` is ``(..., L, d)`` and ``x_g`` is ``(..., D)`` with matching
    leading dimensions.
    """
    c = meta_net(x_g)
    if c.shape[-1] != prompts.shape[-1]:
        raise ShapeError(f"meta-net output dim {c.shape[-1]} != token dim {prompts.shape[-1]}")
    return prompts + c.unsqueeze(-2)
