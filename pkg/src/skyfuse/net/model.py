"""Tri-branch classifier: windowed-attention image encoder, heatmap CNN and
coordinate MLP, late-fused through LayerNorm into a linear classifier.

Parameters live in a flat, ordered :class:`NetworkParams` mapping of float64
arrays. ``forward`` returns a :class:`ForwardTrace` holding every activation
the exact reverse pass needs; ``backward`` consumes it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields

import numpy as np

from . import layers as L

BRANCHES = ("photometric", "heatmap", "coords")
BRANCH_PREFIX = {"photometric": ("pe_", "blk", "pn_"), "heatmap": ("conv",), "coords": ("mlp",)}


class ConfigError(ValueError):
    pass


class TraceMismatchError(RuntimeError):
    """backward() was handed a trace that does not match the current parameters."""


@dataclass(frozen=True)
class NetworkConfig:
    image_px: int = 32
    patch_px: int = 4
    embed_dim: int = 32
    num_blocks: int = 2
    window: int = 4
    shift: int = 2
    heads: int = 4
    mlp_ratio: int = 2
    shift_mask: bool = True
    heat_px: int = 32
    cnn_kernel: int = 3
    cnn_channels: tuple[int, int] = (8, 16)
    n_stars: int = 8
    coord_hidden: int = 64
    fusion: str = "layernorm"  # or "relu": ReLU(W_f [h_p|h_g|h_c] + b_f) before the classifier
    fusion_hidden: int = 128
    k: int = 12
    use_photometric: bool = True
    use_heatmap: bool = True
    use_coords: bool = True

    def __post_init__(self):
        object.__setattr__(self, "cnn_channels", tuple(int(c) for c in self.cnn_channels))
        if self.image_px % self.patch_px:
            raise ConfigError("image_px must be divisible by patch_px")
        if self.grid % self.window:
            raise ConfigError("token grid side must be divisible by window")
        if not 0 <= self.shift < self.window:
            raise ConfigError("shift must satisfy 0 <= shift < window")
        if self.embed_dim % self.heads:
            raise ConfigError("embed_dim must be divisible by heads")
        if self.fusion not in ("layernorm", "relu"):
            raise ConfigError(f"unknown fusion {self.fusion!r}")
        if self.k < 2:
            raise ConfigError("k must be >= 2")
        if len(self.cnn_channels) != 2:
            raise ConfigError("cnn_channels needs two entries")
        if self.heat_grid[1] < 1:
            raise ConfigError("heat_px too small for two stride-2 convolutions")
        if not (self.use_photometric or self.use_heatmap or self.use_coords):
            raise ConfigError("at least one branch must be enabled")

    @property
    def grid(self) -> int:
        return self.image_px // self.patch_px

    @property
    def heat_grid(self) -> tuple[int, int]:
        g1 = L.conv_out(self.heat_px, self.cnn_kernel, 2)
        return g1, L.conv_out(g1, self.cnn_kernel, 2)

    @property
    def dims(self) -> tuple[int, int, int]:
        """Widths of h_p, h_g, h_c."""
        g2 = self.heat_grid[1]
        return self.embed_dim, self.cnn_channels[1] * g2 * g2, self.coord_hidden

    @property
    def fusion_dim(self) -> int:
        return sum(self.dims)

    @property
    def enabled(self) -> dict[str, bool]:
        return {
            "photometric": self.use_photometric,
            "heatmap": self.use_heatmap,
            "coords": self.use_coords,
        }

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_strings(cls, kv: dict[str, str]) -> "NetworkConfig":
        out = {}
        for f in fields(cls):
            if f.name not in kv:
                continue
            raw = kv[f.name]
            default = f.default
            if isinstance(default, bool):
                out[f.name] = raw.strip().lower() in ("1", "true", "yes", "on")
            elif isinstance(default, int):
                out[f.name] = int(raw)
            elif isinstance(default, tuple):
                out[f.name] = tuple(int(x) for x in raw.strip("()[] ").split(",") if x.strip())
            else:
                out[f.name] = raw
        return cls(**out)


class NetworkParams(dict):
    """Ordered name -> float64 array map with a mutation counter.

    Anything that changes the arrays in place should call :meth:`touch` so
    stale traces are caught by ``backward``.
    """

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.version = 0

    def touch(self) -> None:
        self.version += 1

    def copy(self) -> "NetworkParams":
        return NetworkParams({k: v.copy() for k, v in self.items()})

    def count(self) -> int:
        return int(sum(v.size for v in self.values()))


def param_shapes(cfg: NetworkConfig) -> dict[str, tuple[int, ...]]:
    d, m = cfg.embed_dim, cfg.embed_dim * cfg.mlp_ratio
    c1, c2 = cfg.cnn_channels
    ks = cfg.cnn_kernel
    h = cfg.coord_hidden
    shapes: dict[str, tuple[int, ...]] = {
        "pe_w": (cfg.patch_px * cfg.patch_px, d),
        "pe_b": (d,),
    }
    for i in range(cfg.num_blocks):
        shapes.update(
            {
                f"blk{i}.ln1_g": (d,),
                f"blk{i}.ln1_b": (d,),
                f"blk{i}.qkv_w": (d, 3 * d),
                f"blk{i}.qkv_b": (3 * d,),
                f"blk{i}.proj_w": (d, d),
                f"blk{i}.proj_b": (d,),
                f"blk{i}.ln2_g": (d,),
                f"blk{i}.ln2_b": (d,),
                f"blk{i}.fc1_w": (d, m),
                f"blk{i}.fc1_b": (m,),
                f"blk{i}.fc2_w": (m, d),
                f"blk{i}.fc2_b": (d,),
            }
        )
    shapes.update(
        {
            "pn_g": (d,),
            "pn_b": (d,),
            "conv1_w": (ks * ks * 1, c1),
            "conv1_b": (c1,),
            "conv2_w": (ks * ks * c1, c2),
            "conv2_b": (c2,),
            "mlp1_w": (3 * cfg.n_stars, h),
            "mlp1_b": (h,),
            "mlp2_w": (h, h),
            "mlp2_b": (h,),
            "mlp3_w": (h, h),
            "mlp3_b": (h,),
        }
    )
    f = cfg.fusion_dim
    if cfg.fusion == "layernorm":
        shapes.update({"fn_g": (f,), "fn_b": (f,), "cls_w": (f, cfg.k), "cls_b": (cfg.k,)})
    else:
        fh = cfg.fusion_hidden
        shapes.update(
            {"fuse_w": (f, fh), "fuse_b": (fh,), "cls_w": (fh, cfg.k), "cls_b": (cfg.k,)}
        )
    return shapes


def branch_of(name: str) -> str | None:
    for branch, prefixes in BRANCH_PREFIX.items():
        if name.startswith(prefixes):
            return branch
    return None


def trainable(cfg: NetworkConfig, name: str) -> bool:
    """Parameters of a disabled branch are frozen."""
    branch = branch_of(name)
    return branch is None or cfg.enabled[branch]


def init_params(cfg: NetworkConfig, rng: np.random.Generator, dtype=np.float64) -> NetworkParams:
    """Glorot-uniform weights, zero biases, unit norm gains.

    The draw is always made in float64 and then cast, so float32 and float64
    parameter sets from the same seed agree to float32 precision.
    """
    params = NetworkParams()
    for name, shape in param_shapes(cfg).items():
        if name.endswith("_w"):
            fan_in, fan_out = shape
            limit = math.sqrt(6.0 / (fan_in + fan_out))
            params[name] = rng.uniform(-limit, limit, shape).astype(dtype)
        elif name.endswith("_g"):
            params[name] = np.ones(shape, dtype=dtype)
        else:
            params[name] = np.zeros(shape, dtype=dtype)
    return params


def params_dtype(params) -> np.dtype:
    return next(iter(params.values())).dtype


# -- encoders --------------------------------------------------------------


def _sub(params, prefix: str) -> dict:
    n = len(prefix)
    return {k[n:]: v for k, v in params.items() if k.startswith(prefix)}


def _check_shape(x, expected, what):
    if tuple(x.shape[1:]) != tuple(expected):
        raise ConfigError(f"{what}: expected per-sample shape {expected}, got {x.shape[1:]}")


def _patchify(images, patch):
    bsz, px, _ = images.shape
    g = px // patch
    return images.reshape(bsz, g, patch, g, patch).transpose(0, 1, 3, 2, 4).reshape(
        bsz, g, g, patch * patch
    )


def block_forward(x, bp: dict, cfg: NetworkConfig, shifted: bool, mask=None):
    """Pre-norm block: x + WMSA(LN(x)), then + MLP(LN(.))."""
    y, c_ln1 = L.layer_norm_forward(x, bp["ln1_g"], bp["ln1_b"])
    shift = cfg.shift if shifted else 0
    a, c_att = L.window_attention_forward(y, bp, cfg.window, cfg.heads, shift, mask)
    x1 = x + a
    y2, c_ln2 = L.layer_norm_forward(x1, bp["ln2_g"], bp["ln2_b"])
    h1, _ = L.linear_forward(y2, bp["fc1_w"], bp["fc1_b"])
    g, c_gelu = L.gelu_forward(h1)
    m, _ = L.linear_forward(g, bp["fc2_w"], bp["fc2_b"])
    return x1 + m, (c_ln1, c_att, c_ln2, y2, c_gelu, g)


def block_backward(dx2, cache, bp: dict):
    c_ln1, c_att, c_ln2, y2, c_gelu, g = cache
    grads = {}
    dg, grads["fc2_w"], grads["fc2_b"] = L.linear_backward(dx2, g, bp["fc2_w"])
    dh1 = L.gelu_backward(dg, c_gelu)
    dy2, grads["fc1_w"], grads["fc1_b"] = L.linear_backward(dh1, y2, bp["fc1_w"])
    dx1_ln, grads["ln2_g"], grads["ln2_b"] = L.layer_norm_backward(dy2, c_ln2)
    dx1 = dx2 + dx1_ln
    dy, att_grads = L.window_attention_backward(dx1, c_att, bp)
    grads.update(att_grads)
    dx_ln, grads["ln1_g"], grads["ln1_b"] = L.layer_norm_backward(dy, c_ln1)
    return dx1 + dx_ln, grads


def _masks(cfg: NetworkConfig):
    if cfg.shift and cfg.shift_mask and cfg.grid > cfg.window:
        return L.shift_mask(cfg.grid, cfg.window, cfg.shift)
    return None


def photometric_forward(images, params, cfg: NetworkConfig):
    images = np.asarray(images, dtype=params_dtype(params))
    _check_shape(images, (cfg.image_px, cfg.image_px), "photometric input")
    patches = _patchify(images, cfg.patch_px)
    x, _ = L.linear_forward(patches, params["pe_w"], params["pe_b"])
    mask = _masks(cfg)
    caches = []
    for i in range(cfg.num_blocks):
        shifted = i % 2 == 1 and cfg.shift > 0
        x, c = block_forward(x, _sub(params, f"blk{i}."), cfg, shifted, mask if shifted else None)
        caches.append(c)
    y, c_pn = L.layer_norm_forward(x, params["pn_g"], params["pn_b"])
    h = y.mean(axis=(1, 2))
    return h, (patches, caches, c_pn, y.shape)


def photometric_backward(dh, cache, params, cfg: NetworkConfig):
    patches, caches, c_pn, yshape = cache
    grads = {}
    dy = np.broadcast_to(dh[:, None, None, :] / (yshape[1] * yshape[2]), yshape)
    dx, grads["pn_g"], grads["pn_b"] = L.layer_norm_backward(dy, c_pn)
    for i in reversed(range(cfg.num_blocks)):
        dx, bg = block_backward(dx, caches[i], _sub(params, f"blk{i}."))
        grads.update({f"blk{i}.{k}": v for k, v in bg.items()})
    _, grads["pe_w"], grads["pe_b"] = L.linear_backward(dx, patches, params["pe_w"])
    return grads


def geometric_forward(heatmaps, params, cfg: NetworkConfig):
    heatmaps = np.asarray(heatmaps, dtype=params_dtype(params))
    _check_shape(heatmaps, (cfg.heat_px, cfg.heat_px), "heatmap input")
    x = heatmaps[..., None]
    a1, c1 = L.conv2d_forward(x, params["conv1_w"], params["conv1_b"], cfg.cnn_kernel, 2)
    r1, m1 = L.relu_forward(a1)
    a2, c2 = L.conv2d_forward(r1, params["conv2_w"], params["conv2_b"], cfg.cnn_kernel, 2)
    r2, m2 = L.relu_forward(a2)
    return r2.reshape(len(x), -1), (c1, m1, c2, m2, r2.shape)


def geometric_backward(dh, cache, params, cfg: NetworkConfig):
    c1, m1, c2, m2, shape = cache
    grads = {}
    da2 = L.relu_backward(dh.reshape(shape), m2)
    dr1, grads["conv2_w"], grads["conv2_b"] = L.conv2d_backward(da2, c2, params["conv2_w"])
    da1 = L.relu_backward(dr1, m1)
    _, grads["conv1_w"], grads["conv1_b"] = L.conv2d_backward(da1, c1, params["conv1_w"])
    return grads


def coord_forward(coords, params, cfg: NetworkConfig):
    s = np.asarray(coords, dtype=params_dtype(params))
    _check_shape(s, (3 * cfg.n_stars,), "coordinate input")
    a1, _ = L.linear_forward(s, params["mlp1_w"], params["mlp1_b"])
    r1, m1 = L.relu_forward(a1)
    a2, _ = L.linear_forward(r1, params["mlp2_w"], params["mlp2_b"])
    r2, m2 = L.relu_forward(a2)
    h, _ = L.linear_forward(r2, params["mlp3_w"], params["mlp3_b"])
    return h, (s, r1, m1, r2, m2)


def coord_backward(dh, cache, params, cfg: NetworkConfig):
    s, r1, m1, r2, m2 = cache
    grads = {}
    dr2, grads["mlp3_w"], grads["mlp3_b"] = L.linear_backward(dh, r2, params["mlp3_w"])
    dr1, grads["mlp2_w"], grads["mlp2_b"] = L.linear_backward(
        L.relu_backward(dr2, m2), r1, params["mlp2_w"]
    )
    _, grads["mlp1_w"], grads["mlp1_b"] = L.linear_backward(
        L.relu_backward(dr1, m1), s, params["mlp1_w"]
    )
    return grads


def photometric_encode(images, params, cfg):
    return photometric_forward(images, params, cfg)[0]


def geometric_encode(heatmaps, params, cfg):
    return geometric_forward(heatmaps, params, cfg)[0]


def coord_encode(coords, params, cfg):
    return coord_forward(coords, params, cfg)[0]


# -- fusion, loss, full pass -------------------------------------------------


@dataclass
class ForwardTrace:
    cfg: NetworkConfig
    params_id: int
    params_version: int
    branch_caches: dict
    branch_dims: tuple[int, int, int]
    z: np.ndarray
    fusion_cache: tuple
    logits: np.ndarray
    probs: np.ndarray
    extra: dict = field(default_factory=dict)


def fuse_forward(h_p, h_g, h_c, params, cfg: NetworkConfig):
    """Concatenate branch features, normalize (or ReLU-project), classify.

    Returns ``(probabilities, logits, cache)``.
    """
    z = np.concatenate([h_p, h_g, h_c], axis=-1)
    if cfg.fusion == "layernorm":
        zn, c_norm = L.layer_norm_forward(z, params["fn_g"], params["fn_b"])
    else:
        a, _ = L.linear_forward(z, params["fuse_w"], params["fuse_b"])
        zn, c_norm = L.relu_forward(a)
    logits, _ = L.linear_forward(zn, params["cls_w"], params["cls_b"])
    return L.softmax(logits), logits, (z, zn, c_norm)


def fuse_backward(dlogits, cache, params, cfg: NetworkConfig):
    z, zn, c_norm = cache
    grads = {}
    dzn, grads["cls_w"], grads["cls_b"] = L.linear_backward(dlogits, zn, params["cls_w"])
    if cfg.fusion == "layernorm":
        dz, grads["fn_g"], grads["fn_b"] = L.layer_norm_backward(dzn, c_norm)
    else:
        da = L.relu_backward(dzn, c_norm)
        dz, grads["fuse_w"], grads["fuse_b"] = L.linear_backward(da, z, params["fuse_w"])
    return dz, grads


def forward(params: NetworkParams, cfg: NetworkConfig, images, heatmaps, coords):
    """Batched forward pass. Inputs carry a leading batch axis.

    Disabled branches contribute zeros of their usual width, so the fused
    dimension never changes.
    """
    bsz = len(coords) if coords is not None else len(images if images is not None else heatmaps)
    dp, dg, dc = cfg.dims
    dt = params_dtype(params)
    caches = {}
    if cfg.use_photometric:
        h_p, caches["photometric"] = photometric_forward(images, params, cfg)
    else:
        h_p = np.zeros((bsz, dp), dtype=dt)
    if cfg.use_heatmap:
        h_g, caches["heatmap"] = geometric_forward(heatmaps, params, cfg)
    else:
        h_g = np.zeros((bsz, dg), dtype=dt)
    if cfg.use_coords:
        h_c, caches["coords"] = coord_forward(coords, params, cfg)
    else:
        h_c = np.zeros((bsz, dc), dtype=dt)
    probs, logits, fcache = fuse_forward(h_p, h_g, h_c, params, cfg)
    trace = ForwardTrace(
        cfg=cfg,
        params_id=id(params),
        params_version=getattr(params, "version", 0),
        branch_caches=caches,
        branch_dims=(dp, dg, dc),
        z=fcache[0],
        fusion_cache=fcache,
        logits=logits,
        probs=probs,
    )
    return probs, logits, trace


def regularizer(params, cfg: NetworkConfig) -> float:
    return float(sum(np.sum(v * v) for n, v in params.items() if trainable(cfg, n)))


def cross_entropy(logits, labels) -> np.ndarray:
    """Per-sample ``-log p_label`` from logits via log-sum-exp.

    Clamped at ``-log(1e-12)`` to mirror the probability-space floor.
    """
    logp = L.log_softmax(logits)
    nll = -logp[np.arange(len(labels)), labels]
    return np.minimum(nll, -math.log(1e-12))


def cross_entropy_loss(probabilities, label, params=None, lam: float = 0.05, cfg=None) -> float:
    """Single-sample loss from a probability vector: -log p_label + lam * sum(theta^2)."""
    p = max(float(np.asarray(probabilities)[label]), 1e-12)
    reg = 0.0
    if params is not None and lam:
        if cfg is None:
            reg = float(sum(np.sum(np.asarray(v) ** 2) for v in params.values()))
        else:
            reg = regularizer(params, cfg)
    return -math.log(p) + lam * reg


def batch_loss(trace: ForwardTrace, labels, params, lam: float) -> tuple[float, float, float]:
    """(total, mean cross-entropy, regularizer) for a batch trace."""
    ce = float(np.mean(cross_entropy(trace.logits, np.asarray(labels))))
    reg = regularizer(params, trace.cfg) if lam else 0.0
    return ce + lam * reg, ce, reg


def backward(trace: ForwardTrace, labels, params: NetworkParams, lam: float = 0.05) -> dict:
    """Exact gradient of ``mean CE + lam * sum(theta^2)`` w.r.t. every parameter.

    Frozen (disabled-branch) parameters get zero gradients.
    """
    if trace.params_id != id(params) or trace.params_version != getattr(params, "version", 0):
        raise TraceMismatchError("trace was recorded against different or since-modified params")
    labels = np.asarray(labels)
    cfg = trace.cfg
    bsz = len(trace.logits)
    if labels.shape != (bsz,):
        raise TraceMismatchError(f"expected {bsz} labels, got shape {labels.shape}")

    dlogits = trace.probs.copy()
    dlogits[np.arange(bsz), labels] -= 1.0
    # the clamp in cross_entropy has zero slope where active
    clamped = -np.log(np.maximum(trace.probs[np.arange(bsz), labels], 1e-300)) >= -math.log(1e-12)
    dlogits[clamped] = 0.0
    dlogits /= bsz

    dz, grads = fuse_backward(dlogits, trace.fusion_cache, params, cfg)
    dp, dg, _ = trace.branch_dims
    parts = {
        "photometric": dz[:, :dp],
        "heatmap": dz[:, dp : dp + dg],
        "coords": dz[:, dp + dg :],
    }
    backs = {
        "photometric": photometric_backward,
        "heatmap": geometric_backward,
        "coords": coord_backward,
    }
    for branch in BRANCHES:
        if cfg.enabled[branch]:
            grads.update(backs[branch](parts[branch], trace.branch_caches[branch], params, cfg))

    out = {}
    for name, value in params.items():
        if not trainable(cfg, name):
            out[name] = np.zeros_like(value)
            continue
        g = np.asarray(grads[name]).reshape(value.shape)
        out[name] = g + 2.0 * lam * value if lam else g.copy()
    return out


def predict_proba(params, cfg, images, heatmaps, coords, batch_size: int = 256) -> np.ndarray:
    n = len(coords)
    out = []
    for i in range(0, n, batch_size):
        sl = slice(i, i + batch_size)
        probs, _, _ = forward(
            params,
            cfg,
            None if images is None else images[sl],
            None if heatmaps is None else heatmaps[sl],
            coords[sl],
        )
        out.append(probs)
    return np.concatenate(out, axis=0)


def analytic_param_count(cfg: NetworkConfig) -> int:
    """Closed-form parameter count, derived independently of ``param_shapes``."""
    d = cfg.embed_dim
    m = d * cfg.mlp_ratio
    c1, c2 = cfg.cnn_channels
    ks2 = cfg.cnn_kernel**2
    h = cfg.coord_hidden
    patch_embed = (cfg.patch_px**2 + 1) * d
    # two LayerNorms (4d) + qkv (3d^2 + 3d) + proj (d^2 + d) + MLP (2dm + m + d)
    per_block = 4 * d + 4 * d * d + 4 * d + 2 * d * m + m + d
    photometric = patch_embed + cfg.num_blocks * per_block + 2 * d
    g1 = (cfg.heat_px - cfg.cnn_kernel) // 2 + 1
    g2 = (g1 - cfg.cnn_kernel) // 2 + 1
    cnn = (ks2 + 1) * c1 + (ks2 * c1 + 1) * c2
    mlp = (3 * cfg.n_stars + 1) * h + 2 * (h + 1) * h
    f = d + c2 * g2 * g2 + h
    if cfg.fusion == "layernorm":
        head = 2 * f + (f + 1) * cfg.k
    else:
        head = (f + 1) * cfg.fusion_hidden + (cfg.fusion_hidden + 1) * cfg.k
    return photometric + cnn + mlp + head
