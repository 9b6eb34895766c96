"""Neural building blocks: subject-adaptable linear layers and random
Fourier feature encodings.

``LoraFc`` is a linear layer whose weight can be specialized per subject
pair through a rank-one update ``W + u v^T``.  The ``u`` vectors belong to
target subjects and start at zero, so a freshly registered subject leaves
the shared mapping untouched; the ``v`` vectors belong to conditioning
subjects and are drawn from a small Gaussian.  Keeping ``u`` and ``v`` in
separate tables lets the same layer serve both the "target u, retrieved v"
and the "target u, target v" configurations.
"""

from __future__ import annotations

import math
from typing import Sequence

import torch
from torch import nn

V_INIT_STD = 0.02


class LoraFc(nn.Module):
    """Linear layer with per-subject rank-one weight updates."""

    def __init__(self, in_features: int, out_features: int, bias: bool = True):
        super().__init__()
        self.in_features = in_features
        self.out_features = out_features
        self.weight = nn.Parameter(torch.empty(out_features, in_features))
        self.bias = nn.Parameter(torch.zeros(out_features)) if bias else None
        nn.init.kaiming_uniform_(self.weight, a=math.sqrt(5))
        self.u = nn.ParameterDict()
        self.v = nn.ParameterDict()

    def add_u(self, index: int) -> None:
        """Register a zero-initialized target vector if absent."""
        key = str(index)
        if key not in self.u:
            self.u[key] = nn.Parameter(torch.zeros(self.out_features))

    def add_v(self, index: int, generator: torch.Generator) -> None:
        """Register a Gaussian conditioning vector if absent."""
        key = str(index)
        if key not in self.v:
            init = torch.empty(self.in_features)
            init.normal_(mean=0.0, std=V_INIT_STD, generator=generator)
            self.v[key] = nn.Parameter(init)

    def effective_weight(self, u_index: int, v_index: int) -> torch.Tensor:
        """The materialized ``W + u v^T`` for one subject pair."""
        return self.weight + torch.outer(self.u[str(u_index)], self.v[str(v_index)])

    def forward(
        self,
        x: torch.Tensor,
        u_index: int | None = None,
        v_indices: int | Sequence[int] | None = None,
    ) -> torch.Tensor:
        """Apply the layer; ``x`` is ``[..., in_features]``.

        With a sequence of ``v_indices``, the leading dimension of ``x``
        must have the same length and row ``k`` uses ``v_indices[k]``.
        Without indices the shared weight is used alone.
        """
        y = nn.functional.linear(x, self.weight, self.bias)
        if u_index is None or v_indices is None:
            return y
        u = self.u[str(u_index)]
        if isinstance(v_indices, int):
            coeff = x @ self.v[str(v_indices)]
            return y + coeff.unsqueeze(-1) * u
        if x.shape[0] != len(v_indices):
            raise ValueError(
                f"got {len(v_indices)} conditioning indices for leading "
                f"dimension {x.shape[0]}"
            )
        v = torch.stack([self.v[str(i)] for i in v_indices])
        coeff = torch.einsum("k...c,kc->k...", x, v)
        return y + coeff.unsqueeze(-1) * u


class RffEncoder(nn.Module):
    """Random Fourier feature encoding with a frozen Gaussian projection.

    Maps ``[..., in_dim]`` to ``[..., 2 * n_features]`` via
    ``cat(cos(2 pi x B^T), sin(2 pi x B^T))``.  The projection ``B`` is a
    buffer, never trained, and is reproducible from ``seed``.
    """

    def __init__(self, in_dim: int, n_features: int, sigma: float = 1.0, seed: int = 0):
        super().__init__()
        self.in_dim = in_dim
        self.n_features = n_features
        generator = torch.Generator().manual_seed(seed)
        projection = torch.empty(n_features, in_dim)
        projection.normal_(mean=0.0, std=sigma, generator=generator)
        self.register_buffer("projection", projection)

    @property
    def out_dim(self) -> int:
        return 2 * self.n_features

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        phase = 2.0 * math.pi * (x @ self.projection.T)
        return torch.cat([torch.cos(phase), torch.sin(phase)], dim=-1)
