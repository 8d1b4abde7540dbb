"""Graph layers usable as the global branch: multi-head GAT and GCN.

Both kernels share one construction signature ``(f_in, f_out, adjacency)``
and operate on a leading batch axis, so one call can serve several
independent graphs of the same topology (e.g. one per sensing mode).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

ACTIVATIONS = {
    "tanh": ad.tanh,
    "identity": lambda x: x,
}


class KernelError(ValueError):
    pass


def normalize_adjacency(a: np.ndarray) -> np.ndarray:
    """Symmetric normalisation ``D^-1/2 (A + I) D^-1/2``.

    Existing self-loops are not doubled: the diagonal of ``A + I`` is 1.
    """
    a = np.asarray(a, dtype=np.float64)
    a_hat = (a != 0).astype(np.float64)
    np.fill_diagonal(a_hat, 1.0)
    d = a_hat.sum(axis=1)
    inv = 1.0 / np.sqrt(d)
    return inv[:, None] * a_hat * inv[None, :]


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _neighbour_mask(adjacency: np.ndarray) -> np.ndarray:
    mask = np.asarray(adjacency) != 0
    if not mask.any(axis=1).all():
        isolated = np.flatnonzero(~mask.any(axis=1)).tolist()
        raise KernelError(f"nodes {isolated} have no neighbours (add self-loops)")
    return mask


class GATKernel:
    """Multi-head graph attention; output width ``f_out`` = heads x per-head width."""

    kind = "gat"

    def __init__(self, f_in, f_out, adjacency, heads=2, slope=0.2, activation="tanh", batch=1):
        if f_out % heads:
            raise KernelError(f"output width {f_out} not divisible by {heads} heads")
        self.f_in, self.f_out, self.heads = f_in, f_out, heads
        self.head_dim = f_out // heads
        self.slope = slope
        self.batch = batch
        self.act = ACTIVATIONS[activation]
        self.mask = _neighbour_mask(adjacency)
        self.n = len(self.mask)

    def init_params(self, rng: np.random.Generator) -> dict[str, np.ndarray]:
        return {
            "weight": _uniform(rng, (self.batch, self.f_in, self.f_out), self.f_in),
            "attn": _uniform(rng, (self.batch, self.heads, 2 * self.head_dim), 2 * self.head_dim),
        }

    def attention(self, h: Tensor, params) -> tuple[Tensor, Tensor]:
        """Projected features ``(B*K, N, F)`` and attention ``(B*K, N, N)``;
        row ``i`` of the attention holds the weights node ``i`` gives its neighbours."""
        b, n, k, f = h.shape[0], self.n, self.heads, self.head_dim
        q = ad.matmul(h, params["weight"])
        q = ad.reshape(ad.transpose(ad.reshape(q, (b, n, k, f)), (0, 2, 1, 3)), (b * k, n, f))
        attn = params["attn"]
        a_src = ad.reshape(attn[:, :, :f], (b * k, f, 1))
        a_dst = ad.reshape(attn[:, :, f:], (b * k, f, 1))
        s_src = ad.matmul(q, a_src)
        s_dst = ad.transpose(ad.matmul(q, a_dst), (0, 2, 1))
        e = ad.expand(s_src, (b * k, n, n)) + ad.expand(s_dst, (b * k, n, n))
        e = ad.leaky_relu(e, self.slope)
        alpha = ad.softmax(e, axis=-1, mask=self.mask[None, :, :])
        return q, alpha

    def __call__(self, h: Tensor, params) -> Tensor:
        b, n, k, f = h.shape[0], self.n, self.heads, self.head_dim
        q, alpha = self.attention(h, params)
        out = self.act(ad.matmul(alpha, q))
        return ad.reshape(ad.transpose(ad.reshape(out, (b, k, n, f)), (0, 2, 1, 3)), (b, n, k * f))


class GCNKernel:
    """``act(A_hat H W)`` with the symmetric-normalised self-looped adjacency."""

    kind = "gcn"

    def __init__(self, f_in, f_out, adjacency, activation="tanh", batch=1, **_unused):
        self.f_in, self.f_out = f_in, f_out
        self.batch = batch
        self.act = ACTIVATIONS[activation]
        self.a_hat = normalize_adjacency(adjacency)
        self.n = len(self.a_hat)
        self._a_batch = Tensor(np.broadcast_to(self.a_hat, (batch, self.n, self.n)))

    def init_params(self, rng: np.random.Generator) -> dict[str, np.ndarray]:
        return {"weight": _uniform(rng, (self.batch, self.f_in, self.f_out), self.f_in)}

    def __call__(self, h: Tensor, params) -> Tensor:
        if h.shape[0] != self.batch:
            a = Tensor(np.broadcast_to(self.a_hat, (h.shape[0], self.n, self.n)))
        else:
            a = self._a_batch
        return self.act(ad.matmul(ad.matmul(a, h), params["weight"]))


KERNELS = {"gat": GATKernel, "gcn": GCNKernel}


def make_kernel(kind: str, f_in: int, f_out: int, adjacency: np.ndarray, **kwargs):
    try:
        cls = KERNELS[kind]
    except KeyError:
        raise KernelError(f"unknown GNN kernel {kind!r}; choose from {sorted(KERNELS)}") from None
    return cls(f_in, f_out, adjacency, **kwargs)


# --------------------------------------------------------------------------
# single-graph entry points (parameters in the textbook orientation)


@dataclass
class GatLayerParams:
    weights: np.ndarray  # (K, F_out, F_in): one projection per head
    attn: np.ndarray  # (K, 2 * F_out)
    slope: float = 0.2

    @property
    def heads(self) -> int:
        return self.weights.shape[0]


@dataclass
class GcnLayerParams:
    weight: np.ndarray  # (F_out, F_in)


def _gat_internal(params: GatLayerParams) -> dict[str, Tensor]:
    k, f_out, f_in = params.weights.shape
    w = np.concatenate([params.weights[h].T for h in range(k)], axis=1)
    return {"weight": Tensor(w[None]), "attn": Tensor(params.attn[None])}


def gat_layer_forward(h, adjacency, params: GatLayerParams, activation="tanh") -> np.ndarray:
    """``N x F_in`` features to ``N x (K * F_out)`` by multi-head attention."""
    h = np.asarray(h, dtype=np.float64)
    k, f_out, f_in = params.weights.shape
    kern = GATKernel(f_in, k * f_out, adjacency, heads=k, slope=params.slope, activation=activation)
    return kern(Tensor(h[None]), _gat_internal(params)).data[0]


def gat_attention(h, adjacency, params: GatLayerParams) -> np.ndarray:
    """Attention coefficients ``(K, N, N)`` of a single-graph GAT layer."""
    h = np.asarray(h, dtype=np.float64)
    k, f_out, f_in = params.weights.shape
    kern = GATKernel(f_in, k * f_out, adjacency, heads=k, slope=params.slope)
    return kern.attention(Tensor(h[None]), _gat_internal(params))[1].data


def gcn_layer_forward(h, adjacency, params: GcnLayerParams, activation="tanh") -> np.ndarray:
    h = np.asarray(h, dtype=np.float64)
    f_out, f_in = params.weight.shape
    kern = GCNKernel(f_in, f_out, adjacency, activation=activation)
    return kern(Tensor(h[None]), {"weight": Tensor(params.weight.T[None])}).data[0]
