"""The GLSL autoencoder-classifier.

Per mode, a local fully connected branch (each node on its own) and a global
graph branch (nodes mixed over the topology) each map the node's W-length
flow to d/2 features. The two are concatenated, the modes are fused by
learned per-mode weights, and two stacked GRU cells give the latent Z. The
decoder mirrors this back to an ``M x N x W`` reconstruction, and a linear
softmax head classifies the window from Z and the reconstruction residuals.

Parameters of per-mode blocks are stored stacked along a leading mode axis.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import NamedTuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .kernels import make_kernel

CE_CLAMP = 1e-12


class ModelError(ValueError):
    pass


@dataclass
class ModelConfig:
    n_modes: int
    n_nodes: int
    window: int
    d: int = 32
    d_g: int = 32
    kernel: str = "gat"
    heads: int = 2
    fc_depth: int = 2
    slope: float = 0.2
    seed: int = 0

    def validate(self) -> None:
        if self.d <= 0 or self.d % 2:
            raise ModelError(f"d must be a positive even number, got {self.d}")
        if self.kernel == "gat" and (self.d // 2) % self.heads:
            raise ModelError(f"heads={self.heads} must divide d/2={self.d // 2}")
        if self.fc_depth < 1:
            raise ModelError("fc_depth must be >= 1")
        for name in ("n_modes", "n_nodes", "window", "d_g"):
            if getattr(self, name) < 1:
                raise ModelError(f"{name} must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


class LatentState(NamedTuple):
    """Carried hidden states of the two encoder and two decoder GRU cells."""

    enc1: np.ndarray
    enc2: np.ndarray
    dec1: np.ndarray
    dec2: np.ndarray


class Output(NamedTuple):
    z: Tensor
    recon: Tensor
    probs: Tensor
    state: LatentState


def _uniform(rng, shape, fan_in):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _gru_params(rng, prefix: str, n_in: int, n_hid: int) -> dict[str, np.ndarray]:
    return {
        f"{prefix}.wx": _uniform(rng, (n_in, 3 * n_hid), n_in),
        f"{prefix}.uzr": _uniform(rng, (n_hid, 2 * n_hid), n_hid),
        f"{prefix}.uh": _uniform(rng, (n_hid, n_hid), n_hid),
        f"{prefix}.b": _uniform(rng, (1, 3 * n_hid), n_in),
    }


class GLSLModel:
    def __init__(self, config: ModelConfig, adjacency: np.ndarray, params: dict[str, np.ndarray] | None = None):
        config.validate()
        adjacency = np.asarray(adjacency, dtype=np.float64)
        if adjacency.shape != (config.n_nodes, config.n_nodes):
            raise ModelError(f"adjacency {adjacency.shape} does not match {config.n_nodes} nodes")
        self.config = config
        self.adjacency = adjacency
        m, half = config.n_modes, config.d // 2
        kw = dict(batch=m, heads=config.heads, slope=config.slope)
        self.enc_gnn = make_kernel(config.kernel, config.window, half, adjacency, **kw)
        self.dec_gnn = make_kernel(config.kernel, half, half, adjacency, **kw)
        if params is None:
            params = self.init_params(np.random.default_rng(config.seed))
        expected = self.init_params(np.random.default_rng(0))
        if set(params) != set(expected):
            raise ModelError(f"parameter names differ: {sorted(set(params) ^ set(expected))}")
        for k, v in params.items():
            if np.shape(v) != expected[k].shape:
                raise ModelError(f"{k}: shape {np.shape(v)} != {expected[k].shape}")
        self.params: dict[str, Tensor] = {
            k: Tensor(params[k], requires_grad=True, name=k) for k in expected
        }

    # ------------------------------------------------------------------
    def init_params(self, rng: np.random.Generator) -> dict[str, np.ndarray]:
        c = self.config
        m, n, w, d, dg, half = c.n_modes, c.n_nodes, c.window, c.d, c.d_g, c.d // 2
        p: dict[str, np.ndarray] = {}
        f_in = w
        for k in range(c.fc_depth):
            p[f"enc.fc{k}.w"] = _uniform(rng, (m, f_in, half), f_in)
            p[f"enc.fc{k}.b"] = _uniform(rng, (m, 1, half), f_in)
            f_in = half
        for k, v in self.enc_gnn.init_params(rng).items():
            p[f"enc.gnn.{k}"] = v
        p["fuse.q"] = rng.uniform(0.0, 1.0, size=(m, 1, d))
        p.update(_gru_params(rng, "enc.gru1", d, dg))
        p.update(_gru_params(rng, "enc.gru2", dg, dg))
        p.update(_gru_params(rng, "dec.gru1", dg, dg))
        p.update(_gru_params(rng, "dec.gru2", dg, d))
        for k in range(c.fc_depth):
            f_out = w if k == c.fc_depth - 1 else half
            p[f"dec.fc{k}.w"] = _uniform(rng, (m, half, f_out), half)
            p[f"dec.fc{k}.b"] = _uniform(rng, (m, 1, f_out), half)
        for k, v in self.dec_gnn.init_params(rng).items():
            p[f"dec.gnn.{k}"] = v
        p["dec.gnn_out.w"] = _uniform(rng, (m, half, w), half)
        p["dec.gnn_out.b"] = _uniform(rng, (m, 1, w), half)
        p["cls.w"] = _uniform(rng, (dg + m * n, 2), dg + m * n)
        p["cls.b"] = _uniform(rng, (1, 2), dg + m * n)
        return p

    def init_state(self) -> LatentState:
        c = self.config
        z = np.zeros
        return LatentState(
            z((c.n_nodes, c.d_g)), z((c.n_nodes, c.d_g)), z((c.n_nodes, c.d_g)), z((c.n_nodes, c.d))
        )

    def _sub(self, prefix: str) -> dict[str, Tensor]:
        cut = len(prefix) + 1
        return {k[cut:]: v for k, v in self.params.items() if k.startswith(prefix + ".")}

    # ------------------------------------------------------------------
    # building blocks

    def _dense(self, x: Tensor, prefix: str, act=ad.tanh) -> Tensor:
        w, b = self.params[prefix + ".w"], self.params[prefix + ".b"]
        y = ad.matmul(x, w)
        y = y + ad.expand(b, y.shape)
        return act(y) if act is not None else y

    def _gru(self, prefix: str, x: Tensor, h_prev: np.ndarray) -> Tensor:
        """Standard GRU cell with h' = (1 - z) * h + z * h_candidate."""
        n_hid = h_prev.shape[1]
        h = Tensor(h_prev)
        gx = ad.matmul(x, self.params[prefix + ".wx"])
        gx = gx + ad.expand(self.params[prefix + ".b"], gx.shape)
        gh = ad.matmul(h, self.params[prefix + ".uzr"])
        zr = ad.sigmoid(gx[:, : 2 * n_hid] + gh)
        z, r = zr[:, :n_hid], zr[:, n_hid:]
        cand = ad.tanh(gx[:, 2 * n_hid :] + ad.matmul(ad.mul(r, h), self.params[prefix + ".uh"]))
        return h + ad.mul(z, cand - h)

    @staticmethod
    def _check(t: Tensor, layer: str) -> Tensor:
        if not np.isfinite(t.data).all():
            raise ModelError(f"non-finite activation in {layer}")
        return t

    # ------------------------------------------------------------------
    # encoder / decoder / head

    def local_encode(self, x: Tensor) -> Tensor:
        """Per-mode FC stack applied to each node's flow independently: ``(M, N, W) -> (M, N, d/2)``."""
        h = x
        for k in range(self.config.fc_depth):
            h = self._dense(h, f"enc.fc{k}")
        return h

    def global_encode(self, x: Tensor) -> Tensor:
        """Per-mode graph layer over nodes: ``(M, N, W) -> (M, N, d/2)``."""
        return self.enc_gnn(x, self._sub("enc.gnn"))

    def fuse(self, global_feats: Tensor, local_feats: Tensor) -> Tensor:
        """``sum_i q_i * (global_i || local_i)`` with coordinatewise ``q_i``: ``-> (N, d)``."""
        m = self.params["fuse.q"].shape[0]
        if global_feats.shape[0] != m or local_feats.shape[0] != m:
            raise ModelError(f"fusion expects {m} modes, got {global_feats.shape[0]} and {local_feats.shape[0]}")
        cat = ad.concat([global_feats, local_feats], axis=-1)
        q = ad.expand(self.params["fuse.q"], cat.shape)
        return ad.sum(ad.mul(q, cat), axis=0)

    def encode(self, x: Tensor, state: LatentState) -> tuple[Tensor, Tensor, Tensor]:
        """Returns ``(Z, h_enc1, h_enc2)``; ``Z`` is the top GRU hidden, ``N x d_g``."""
        xc = self._check(self.fuse(self.global_encode(x), self.local_encode(x)), "fusion")
        h1 = self._check(self._gru("enc.gru1", xc, state.enc1), "enc.gru1")
        h2 = self._check(self._gru("enc.gru2", h1, state.enc2), "enc.gru2")
        return h2, h1, h2

    def decode(self, z: Tensor, state: LatentState) -> tuple[Tensor, Tensor, Tensor]:
        """Returns ``(X', h_dec1, h_dec2)`` with ``X'`` shaped ``M x N x W``."""
        c = self.config
        m, n, half = c.n_modes, c.n_nodes, c.d // 2
        h3 = self._check(self._gru("dec.gru1", z, state.dec1), "dec.gru1")
        h4 = self._check(self._gru("dec.gru2", h3, state.dec2), "dec.gru2")
        g_part = ad.expand(ad.reshape(h4[:, :half], (1, n, half)), (m, n, half))
        l_part = ad.expand(ad.reshape(h4[:, half:], (1, n, half)), (m, n, half))
        f = l_part
        for k in range(c.fc_depth):
            last = k == c.fc_depth - 1
            f = self._dense(f, f"dec.fc{k}", act=None if last else ad.tanh)
        g = self.dec_gnn(g_part, self._sub("dec.gnn"))
        g = self._dense(g, "dec.gnn_out", act=None)
        recon = self._check(ad.scale(f + g, 0.5), "decoder")
        return recon, h3, h4

    def classify(self, z: Tensor, x: Tensor, recon: Tensor) -> Tensor:
        """``(p_normal, p_anomaly)`` from the node-mean of Z and per-(mode, node)
        mean squared residuals."""
        c = self.config
        zbar = ad.reshape(ad.mean(z, axis=0), (1, c.d_g))
        diff = x - recon
        res = ad.reshape(ad.mean(ad.mul(diff, diff), axis=2), (1, c.n_modes * c.n_nodes))
        feat = ad.concat([zbar, res], axis=1)
        logits = ad.matmul(feat, self.params["cls.w"]) + self.params["cls.b"]
        return ad.reshape(ad.softmax(logits, axis=-1), (2,))

    def forward(self, window, state: LatentState | None = None) -> Output:
        if state is None:
            state = self.init_state()
        x = window if isinstance(window, Tensor) else Tensor._wrap(np.asarray(window, dtype=np.float64), False)
        c = self.config
        if x.shape != (c.n_modes, c.n_nodes, c.window):
            raise ModelError(f"window shape {x.shape} != {(c.n_modes, c.n_nodes, c.window)}")
        z, h1, h2 = self.encode(x, state)
        recon, h3, h4 = self.decode(z, state)
        probs = self.classify(z, x, recon)
        new_state = LatentState(h1.data, h2.data, h3.data, h4.data)
        return Output(z, recon, probs, new_state)

    def p_anomaly(self, window, state: LatentState) -> tuple[float, LatentState]:
        out = self.forward(window, state)
        return float(out.probs.data[1]), out.state

    # ------------------------------------------------------------------
    def param_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def save(self, path, metadata: dict | None = None) -> None:
        meta = {"model": self.config.to_dict(), "adjacency": self.adjacency.tolist()}
        meta.update(metadata or {})
        ad.save_checkpoint(path, self.params, meta)

    @classmethod
    def load(cls, path) -> tuple["GLSLModel", dict]:
        params, meta = ad.load_checkpoint(path)
        config = ModelConfig(**meta["model"])
        return cls(config, np.asarray(meta["adjacency"]), params), meta


# --------------------------------------------------------------------------
# losses


def loss_rec(x, recon: Tensor) -> Tensor:
    """Mean squared error over all ``M * N * W`` elements."""
    x = x if isinstance(x, Tensor) else Tensor._wrap(np.asarray(x, dtype=np.float64), False)
    diff = x - recon
    return ad.mean(ad.mul(diff, diff))


def loss_ce(y: int, y_p: Tensor) -> Tensor:
    """Binary cross-entropy of label ``y`` against anomaly probability ``y_p``."""
    if y not in (0, 1):
        raise ModelError(f"label must be 0 or 1, got {y}")
    p = ad.clip(ad.reshape(y_p, (1,)), CE_CLAMP, 1.0 - CE_CLAMP)
    if y == 1:
        return ad.scale(ad.sum(ad.log(p)), -1.0)
    return ad.scale(ad.sum(ad.log(Tensor._wrap(np.ones(1), False) - p)), -1.0)


def blend_weight(epoch: int) -> float:
    """Weight on the reconstruction loss at 1-based ``epoch``."""
    if epoch < 1:
        raise ModelError(f"epoch must be >= 1, got {epoch}")
    return 1.0 / epoch


def loss_blend(l_rec: Tensor, l_ce: Tensor, epoch: int) -> Tensor:
    w = blend_weight(epoch)
    return ad.scale(l_rec, w) + ad.scale(l_ce, 1.0 - w)
