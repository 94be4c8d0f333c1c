"""Frozen stand-in feature extractor with bottleneck adapter slots.

The backbone maps ``x`` (dim ``D``) through a linear embedding to dim ``d``
and then through ``L`` blocks.  Each block is a frozen two-layer ReLU MLP
with an adapter branch beside it::

    x_o = MLP(x_i) + ReLU(x_i @ W_down) @ W_up  (+ x_i if identity residual)

Only adapter and head parameters receive gradients; frozen weights pass the
gradient through untouched.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import checkpoint as ckpt
from .numerics import checksum, make_rng


@dataclass(frozen=True)
class BackboneConfig:
    input_dim: int
    embed_dim: int
    hidden_dim: int
    num_blocks: int
    use_identity_residual: bool = True
    init_seed: int = 0
    init_scale: float = 0.02

    def __post_init__(self):
        for name in ("input_dim", "embed_dim", "hidden_dim", "num_blocks"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.init_scale < 0:
            raise ValueError("init_scale must be non-negative")


@dataclass
class Block:
    mlp_in: np.ndarray
    b_in: np.ndarray
    mlp_out: np.ndarray
    b_out: np.ndarray

    def arrays(self):
        return [self.mlp_in, self.b_in, self.mlp_out, self.b_out]


@dataclass
class FrozenBackbone:
    config: BackboneConfig
    embed: np.ndarray
    embed_b: np.ndarray
    blocks: list[Block]

    def __post_init__(self):
        for arr in self.arrays():
            arr.setflags(write=False)

    def arrays(self) -> list[np.ndarray]:
        out = [self.embed, self.embed_b]
        for blk in self.blocks:
            out.extend(blk.arrays())
        return out

    def checksum(self) -> str:
        return checksum(*self.arrays())


@dataclass
class AdapterSet:
    """One adapter pair per block; ``task_index`` is the 0-based stage."""

    down: list[np.ndarray]
    up: list[np.ndarray]
    task_index: int = 0

    @property
    def num_blocks(self) -> int:
        return len(self.down)

    @property
    def rank(self) -> int:
        return self.down[0].shape[1]

    @property
    def embed_dim(self) -> int:
        return self.down[0].shape[0]

    def arrays(self) -> list[np.ndarray]:
        return [*self.down, *self.up]

    def param_count(self) -> int:
        return sum(a.size for a in self.arrays())

    def copy(self) -> "AdapterSet":
        return AdapterSet([w.copy() for w in self.down], [w.copy() for w in self.up], self.task_index)

    def checksum(self) -> str:
        return checksum(*self.arrays())

    @classmethod
    def zeros(cls, num_blocks: int, d: int, r: int, task_index: int = 0) -> "AdapterSet":
        return cls([np.zeros((d, r)) for _ in range(num_blocks)],
                   [np.zeros((r, d)) for _ in range(num_blocks)], task_index)


@dataclass
class TaskHead:
    W: np.ndarray
    classes: list[int] = field(default_factory=list)

    def __post_init__(self):
        if self.W.shape[1] != len(self.classes):
            raise ValueError("head column count must equal number of classes")


def _f32(a: np.ndarray) -> np.ndarray:
    return np.asarray(a, dtype=np.float32).astype(np.float64)


def build_backbone(config: BackboneConfig, path=None) -> FrozenBackbone:
    """Seeded uniform init in ``[-init_scale, init_scale]``, or load ``path``.

    Weights are kept on the float32 grid so a saved checkpoint reloads to
    bitwise-identical arrays.
    """
    if path is not None:
        bb = load_backbone(path, config)
        return FrozenBackbone(config, bb.embed, bb.embed_b, bb.blocks)
    rng = make_rng(config.init_seed)
    s = config.init_scale
    D, d, h = config.input_dim, config.embed_dim, config.hidden_dim

    def draw(*shape):
        return _f32(rng.uniform(-s, s, size=shape))

    embed, embed_b = draw(D, d), draw(d)
    blocks = [Block(draw(d, h), draw(h), draw(h, d), draw(d)) for _ in range(config.num_blocks)]
    return FrozenBackbone(config, embed, embed_b, blocks)


def _relu(z):
    return np.maximum(z, 0.0)


def _check_adapters(backbone: FrozenBackbone, adapters: AdapterSet | None):
    if adapters is None:
        return
    cfg = backbone.config
    if adapters.num_blocks != cfg.num_blocks or len(adapters.up) != cfg.num_blocks:
        raise ValueError(f"adapter has {adapters.num_blocks} blocks, backbone has {cfg.num_blocks}")
    for wd, wu in zip(adapters.down, adapters.up):
        if wd.shape[0] != cfg.embed_dim or wu.shape != (wd.shape[1], cfg.embed_dim):
            raise ValueError("adapter dimensions do not match backbone embed dim")


def _run(x, backbone: FrozenBackbone, adapters: AdapterSet | None, keep: bool):
    cfg = backbone.config
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != cfg.input_dim:
        raise ValueError(f"input dim {x.shape[-1]} != backbone input dim {cfg.input_dim}")
    _check_adapters(backbone, adapters)
    h = x @ backbone.embed + backbone.embed_b
    cache = []
    for ell, blk in enumerate(backbone.blocks):
        z = h @ blk.mlp_in + blk.b_in
        out = _relu(z) @ blk.mlp_out + blk.b_out
        u = None
        if adapters is not None:
            u = h @ adapters.down[ell]
            out = out + _relu(u) @ adapters.up[ell]
        if cfg.use_identity_residual:
            out = out + h
        if keep:
            cache.append((h, z, u))
        h = out
    return h, cache


def forward(x, backbone: FrozenBackbone, adapters: AdapterSet | None = None) -> np.ndarray:
    """Embedding ``phi(x; adapters)``; ``x`` may be one vector or a batch."""
    return _run(x, backbone, adapters, keep=False)[0]


def forward_logits(x, backbone, adapters, head: TaskHead) -> np.ndarray:
    if head.W.shape[0] != backbone.config.embed_dim:
        raise ValueError("head input dim does not match embed dim")
    return forward(x, backbone, adapters) @ head.W


def softmax_xent(logits: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and its gradient with respect to ``logits``."""
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = logits.shape[0]
    loss = -logp[np.arange(n), y].mean()
    g = np.exp(logp)
    g[np.arange(n), y] -= 1.0
    return float(loss), g / n


@dataclass
class Grads:
    down: list[np.ndarray]
    up: list[np.ndarray]
    head: np.ndarray


def backward(X, y, backbone: FrozenBackbone, adapters: AdapterSet, head: np.ndarray):
    """Mean softmax cross-entropy loss and exact gradients.

    ``y`` holds head-local column indices.  Returns ``(loss, Grads)``; the
    frozen backbone is read but never written.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.size == 0:
        raise ValueError("empty batch")
    X = np.atleast_2d(X)
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    if y.shape != (X.shape[0],):
        raise ValueError("label count does not match batch size")
    k = head.shape[1]
    if y.min() < 0 or y.max() >= k:
        raise ValueError("label outside head class range")
    emb, cache = _run(X, backbone, adapters, keep=True)
    loss, g = softmax_xent(emb @ head, y)
    g_head = emb.T @ g
    dh = g @ head.T
    residual = backbone.config.use_identity_residual
    g_down = [None] * len(cache)
    g_up = [None] * len(cache)
    for ell in reversed(range(len(cache))):
        h_in, z, u = cache[ell]
        blk = backbone.blocks[ell]
        a = _relu(u)
        g_up[ell] = a.T @ dh
        du = (dh @ adapters.up[ell].T) * (u > 0)
        g_down[ell] = h_in.T @ du
        dz = (dh @ blk.mlp_out.T) * (z > 0)
        dh_in = dz @ blk.mlp_in.T + du @ adapters.down[ell].T
        if residual:
            dh_in = dh_in + dh
        dh = dh_in
    return loss, Grads(g_down, g_up, g_head)


def loss_only(X, y, backbone, adapters, head) -> float:
    emb = forward(np.atleast_2d(X), backbone, adapters)
    return softmax_xent(emb @ head, np.asarray(y, dtype=np.int64))[0]


# --- persistence -----------------------------------------------------------

def save_backbone(backbone: FrozenBackbone, path) -> int:
    cfg = backbone.config
    header = [cfg.input_dim, cfg.embed_dim, cfg.hidden_dim, cfg.num_blocks, int(cfg.use_identity_residual)]
    manifest = {"input_dim": cfg.input_dim, "embed_dim": cfg.embed_dim, "hidden_dim": cfg.hidden_dim,
                "num_blocks": cfg.num_blocks, "use_identity_residual": cfg.use_identity_residual}
    return ckpt.write_container(path, ckpt.KIND_BACKBONE, header, backbone.arrays(), manifest)


def load_backbone(path, config: BackboneConfig | None = None) -> FrozenBackbone:
    (D, d, h, L, res), rd = ckpt.read_container(path, ckpt.KIND_BACKBONE, 5)
    if config is not None and (config.input_dim, config.embed_dim, config.hidden_dim,
                               config.num_blocks) != (D, d, h, L):
        raise ckpt.CheckpointError("checkpoint dimensions do not match backbone config")
    if config is None:
        config = BackboneConfig(D, d, h, L, use_identity_residual=bool(res))
    embed, embed_b = rd.floats(D, d), rd.floats(d)
    blocks = [Block(rd.floats(d, h), rd.floats(h), rd.floats(h, d), rd.floats(d)) for _ in range(L)]
    rd.done()
    return FrozenBackbone(config, embed, embed_b, blocks)


ADAPTER_HEADER_INTS = 4


def save_adapter(adapter: AdapterSet, path) -> int:
    L, d, r = adapter.num_blocks, adapter.embed_dim, adapter.rank
    header = [adapter.task_index, L, d, r]
    manifest = {"task_index": adapter.task_index, "num_blocks": L, "embed_dim": d, "rank": r}
    return ckpt.write_container(path, ckpt.KIND_ADAPTER, header, adapter.arrays(), manifest)


def load_adapter(path) -> AdapterSet:
    (task, L, d, r), rd = ckpt.read_container(path, ckpt.KIND_ADAPTER, ADAPTER_HEADER_INTS)
    down = [rd.floats(d, r) for _ in range(L)]
    up = [rd.floats(r, d) for _ in range(L)]
    rd.done()
    return AdapterSet(down, up, task)


def adapter_file_size(num_blocks: int, d: int, r: int) -> int:
    """Bytes of one adapter checkpoint: fixed header plus ``L * 2dr`` floats."""
    return ckpt.header_size(ADAPTER_HEADER_INTS) + 4 * num_blocks * 2 * d * r


def fit_embedding(config: BackboneConfig, X) -> FrozenBackbone:
    """Backbone whose embedding layer is the top-``d`` PCA basis of ``X``.

    A cheap way to "pretrain" on a held-out base split; the blocks keep
    their seeded random init.  Save the result with :func:`save_backbone`.
    """
    X = np.asarray(X, dtype=np.float64)
    base = build_backbone(config)
    mean = X.mean(axis=0)
    _, s, vt = np.linalg.svd(X - mean, full_matrices=False)
    k = min(config.embed_dim, vt.shape[0])
    embed = np.zeros((config.input_dim, config.embed_dim))
    scale = 1.0 / max(s[0] / np.sqrt(len(X)), 1e-12)
    embed[:, :k] = vt[:k].T * scale
    embed_b = -mean @ embed
    return FrozenBackbone(config, _f32(embed), _f32(embed_b),
                          [Block(*[a.copy() for a in b.arrays()]) for b in base.blocks])
