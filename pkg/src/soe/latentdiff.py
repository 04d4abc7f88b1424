"""Toy latent-diffusion inpainting stack.

Everything here is desk-scale: a fixed linear patch "VAE", a cosine
variance-preserving schedule, deterministic DDIM, and a small noise predictor
whose cross-attention layers follow an encoder/bottleneck/decoder resolution
pyramid (16, 8, 8, 16 cells for a 64x64 latent).
"""

from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numcore as nc
from .errors import (ConfigError, DimensionError, GeometryError, SingularScheduleError,
                     StorageError, UsageError)
from .masks import RectMask, mask_raster

PATCH = 8
LATENT_CHANNELS = 4
# Keeps latents near unit variance; images are mapped to [-1, 1] first.
LATENT_SCALE = 1.0 / PATCH

CHECKPOINT_MAGIC = b"SOED"
CHECKPOINT_VERSION = 1


# --- schedule -------------------------------------------------------------


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    alpha: np.ndarray
    sigma: np.ndarray


_ALPHA_END = 0.008


def make_schedule(T: int) -> NoiseSchedule:
    """Cosine schedule: ``alpha = cos(phi)``, ``sigma = sin(phi)`` with ``phi`` linear in t.

    ``t = 0`` is exactly clean (``alpha = 1``), so DDIM with a perfect noise
    estimate lands on the clean latent. The end angle stops just short of
    pi/2 so that ``alpha(T)`` stays invertible.
    """
    if T < 2:
        raise ConfigError(f"need at least 2 timesteps, got T={T}")
    phi_end = math.acos(_ALPHA_END)
    t = np.arange(T + 1) / T
    phi = t * phi_end
    return NoiseSchedule(T, np.cos(phi), np.sin(phi))


def add_noise(z, t: int, eps, sched: NoiseSchedule) -> np.ndarray:
    z, eps = np.asarray(z, dtype=np.float64), np.asarray(eps, dtype=np.float64)
    if z.shape != eps.shape:
        raise DimensionError(f"noise shape {eps.shape} != latent shape {z.shape}")
    if not 0 <= t <= sched.T:
        raise ConfigError(f"timestep {t} outside [0, {sched.T}]")
    return sched.alpha[t] * z + sched.sigma[t] * eps


def predict_x0(z_t, eps_hat, t: int, sched: NoiseSchedule) -> np.ndarray:
    a = sched.alpha[t]
    if a < 1e-12:
        raise SingularScheduleError(f"alpha({t}) = {a:.3e} is not invertible")
    return (np.asarray(z_t) - sched.sigma[t] * np.asarray(eps_hat)) / a


def ddim_step(z_t, eps_hat, t: int, sched: NoiseSchedule) -> np.ndarray:
    """One deterministic DDIM move from ``t`` to ``t - 1``."""
    if t < 1:
        raise ConfigError("ddim_step needs t >= 1")
    x0 = predict_x0(z_t, eps_hat, t, sched)
    return sched.alpha[t - 1] * x0 + sched.sigma[t - 1] * np.asarray(eps_hat)


# --- VAE stub -------------------------------------------------------------


def _patch_basis() -> np.ndarray:
    # Orthonormal rows: three per-channel patch means plus a zero-mean checker.
    e = np.zeros((LATENT_CHANNELS, 3, PATCH, PATCH))
    for c in range(3):
        e[c, c] = 1.0 / PATCH
    yy, xx = np.mgrid[:PATCH, :PATCH]
    checker = np.where((yy + xx) % 2 == 0, 1.0, -1.0)
    e[3] = checker[None] / math.sqrt(3 * PATCH * PATCH)
    return e.reshape(LATENT_CHANNELS, -1)


PATCH_BASIS = _patch_basis()


def encode_latent(image) -> np.ndarray:
    """Project each 8x8 RGB patch onto the fixed basis: ``3xHxW -> 4xH/8xW/8``."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[0] != 3:
        raise DimensionError(f"expected a 3xHxW image, got {image.shape}")
    _, H, W = image.shape
    if H % PATCH or W % PATCH:
        raise DimensionError(f"image size {H}x{W} is not divisible by {PATCH}")
    h, w = H // PATCH, W // PATCH
    patches = image.reshape(3, h, PATCH, w, PATCH).transpose(1, 3, 0, 2, 4).reshape(h, w, -1)
    return (patches @ PATCH_BASIS.T).transpose(2, 0, 1).copy()


def decode_latent(z) -> np.ndarray:
    """Transpose of :func:`encode_latent`."""
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 3 or z.shape[0] != LATENT_CHANNELS:
        raise DimensionError(f"expected a {LATENT_CHANNELS}xhxw latent, got {z.shape}")
    _, h, w = z.shape
    patches = z.transpose(1, 2, 0) @ PATCH_BASIS
    img = patches.reshape(h, w, 3, PATCH, PATCH).transpose(2, 0, 3, 1, 4)
    return img.reshape(3, h * PATCH, w * PATCH).copy()


def image_to_latent(image) -> np.ndarray:
    """``[0, 1]`` RGB image to a scaled diffusion latent."""
    return encode_latent(2.0 * np.asarray(image, dtype=np.float64) - 1.0) * LATENT_SCALE


def latent_to_image(z) -> np.ndarray:
    return np.clip((decode_latent(np.asarray(z) / LATENT_SCALE) + 1.0) / 2.0, 0.0, 1.0)


# --- conditioning ---------------------------------------------------------


@dataclass(frozen=True)
class TextCondition:
    tokens: np.ndarray  # I x d
    c_req: tuple[int, ...]

    def __post_init__(self):
        tokens = np.asarray(self.tokens, dtype=np.float64)
        if tokens.ndim != 2 or tokens.shape[0] < 1:
            raise DimensionError(f"tokens must be I x d, got {tokens.shape}")
        object.__setattr__(self, "tokens", tokens)
        object.__setattr__(self, "c_req", tuple(int(i) for i in self.c_req))
        if not self.c_req:
            raise UsageError("c_req must name at least one token")
        if any(i < 0 or i >= tokens.shape[0] for i in self.c_req):
            raise UsageError(f"c_req {self.c_req} out of range for {tokens.shape[0]} tokens")

    @property
    def n_tokens(self) -> int:
        return self.tokens.shape[0]


@dataclass
class LatentState:
    z: np.ndarray
    z_t: np.ndarray
    t: int

    def __post_init__(self):
        if np.shape(self.z) != np.shape(self.z_t):
            raise DimensionError("z and z_t must share a shape")
        if self.t < 0:
            raise ConfigError("t must be non-negative")


def assemble_inpaint_input(z_t, m: RectMask, z):
    """Channel stack ``[z_t, mask, z * (1 - mask)]`` with ``2C + 1`` channels.

    ``z_t`` may be a tracked :class:`~soe.numcore.Var`.
    """
    zv = np.asarray(z, dtype=np.float64)
    if nc.value_of(z_t).shape != zv.shape:
        raise DimensionError("z_t and z must share a shape")
    _, h, w = zv.shape
    if m.img_w != w * PATCH or m.img_h != h * PATCH:
        raise GeometryError(f"mask image {m.img_w}x{m.img_h} does not match latent {h}x{w}")
    mask = mask_raster(m, h, w)
    return nc.concat([z_t, mask[None], zv * (1.0 - mask)[None]], axis=0)


# --- attention stacks -----------------------------------------------------


@dataclass
class AttentionLayer:
    index: int
    H: int
    W: int
    map: object  # ndarray or Var, (H*W) x I

    @property
    def values(self) -> np.ndarray:
        return nc.value_of(self.map)


@dataclass
class AttentionStack:
    layers: list[AttentionLayer]

    def __len__(self) -> int:
        return len(self.layers)

    def __iter__(self):
        return iter(self.layers)

    def __getitem__(self, i) -> AttentionLayer:
        return self.layers[i]

    @property
    def n_tokens(self) -> int:
        return self.layers[0].values.shape[1]

    def detached(self) -> AttentionStack:
        return AttentionStack([AttentionLayer(l.index, l.H, l.W, l.values.copy())
                               for l in self.layers])

    def check(self, tol: float = 1e-6) -> None:
        """Raise :class:`DimensionError` unless every map is row-stochastic."""
        for layer in self.layers:
            a = layer.values
            if a.shape[0] != layer.H * layer.W:
                raise DimensionError(f"layer {layer.index}: {a.shape[0]} rows for "
                                     f"{layer.H}x{layer.W} grid")
            if a.min() < 0 or a.max() > 1 or np.abs(a.sum(axis=1) - 1).max() > tol:
                raise DimensionError(f"layer {layer.index} is not row-stochastic")


# --- denoiser -------------------------------------------------------------


def default_pyramid(latent_hw: int) -> list[int]:
    top = min(latent_hw, 16)
    return [top, max(top // 2, 1), max(top // 2, 1), top]


@dataclass(frozen=True)
class ModelConfig:
    latent_hw: int = 16
    channels: int = LATENT_CHANNELS
    hidden: int = 16
    token_dim: int = 16
    attn_dim: int = 8
    heads: int = 2
    time_dim: int = 8
    timesteps: int = 20
    pyramid: tuple[int, ...] = ()

    def __post_init__(self):
        if not self.pyramid:
            object.__setattr__(self, "pyramid", tuple(default_pyramid(self.latent_hw)))
        object.__setattr__(self, "pyramid", tuple(int(r) for r in self.pyramid))
        if self.attn_dim % self.heads:
            raise ConfigError("attn_dim must be divisible by heads")
        if any(r < 1 or r > self.latent_hw for r in self.pyramid):
            raise ConfigError(f"pyramid {self.pyramid} incompatible with latent {self.latent_hw}")
        p = self.pyramid
        lo = p.index(min(p))
        hi = len(p) - 1 - p[::-1].index(min(p))
        down, up = p[: lo + 1], p[hi:]
        if (any(a <= b for a, b in zip(down, down[1:])) or any(a >= b for a, b in zip(up, up[1:]))
                or any(r != min(p) for r in p[lo:hi + 1])):
            raise ConfigError(f"pyramid {p} is not encoder/bottleneck/decoder shaped")

    @property
    def in_channels(self) -> int:
        return 2 * self.channels + 1

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        """Weight names and shapes in declaration (checkpoint) order."""
        C, D, d, a, E = self.channels, self.hidden, self.token_dim, self.attn_dim, self.time_dim
        shapes = {"in.w": (self.in_channels, D), "in.b": (1, D), "time.w": (E, D)}
        for l in range(len(self.pyramid)):
            shapes.update({
                f"attn{l}.q": (D + 1, a), f"attn{l}.k": (d, a), f"attn{l}.v": (d, a),
                f"attn{l}.o": (a, D), f"ff{l}.w1": (D, D), f"ff{l}.w2": (D, D),
            })
        shapes.update({"out.w": (D, C), "skip.w": (self.in_channels, C),
                       "gate.w": (E, C), "gate.b": (1, C)})
        return shapes


@dataclass
class DenoiserModel:
    config: ModelConfig
    params: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        shapes = self.config.param_shapes()
        if not self.params:
            self.params = {k: np.zeros(s) for k, s in shapes.items()}
        if list(self.params) != list(shapes):
            raise ConfigError("parameter names do not match the configuration")
        for k, s in shapes.items():
            self.params[k] = np.asarray(self.params[k], dtype=np.float64)
            if self.params[k].shape != s:
                raise ConfigError(f"{k}: shape {self.params[k].shape} != {s}")
            if not np.all(np.isfinite(self.params[k])):
                raise ConfigError(f"{k}: non-finite weights")

    @classmethod
    def init(cls, config: ModelConfig, seed: int = 0) -> DenoiserModel:
        rng = np.random.default_rng(seed)
        params = {}
        for k, s in config.param_shapes().items():
            if k.endswith(".b"):
                params[k] = np.zeros(s)
            else:
                params[k] = rng.standard_normal(s) / math.sqrt(s[0])
        return cls(config, params)

    @property
    def n_layers(self) -> int:
        return len(self.config.pyramid)

    @property
    def resolutions(self) -> list[tuple[int, int]]:
        return [(r, r) for r in self.config.pyramid]

    def copy(self) -> DenoiserModel:
        return DenoiserModel(self.config, {k: v.copy() for k, v in self.params.items()})


def _area_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Area-average pooling weights ``n_out x n_in``."""
    edges_in = np.arange(n_in + 1) / n_in
    edges_out = np.arange(n_out + 1) / n_out
    lo = np.maximum(edges_out[:-1, None], edges_in[None, :-1])
    hi = np.minimum(edges_out[1:, None], edges_in[None, 1:])
    return np.clip(hi - lo, 0, None) * n_out


_POOL_CACHE: dict[tuple[int, int], tuple[np.ndarray, np.ndarray]] = {}


def _pool_pair(hw: int, r: int) -> tuple[np.ndarray, np.ndarray]:
    key = (hw, r)
    if key not in _POOL_CACHE:
        a = _area_matrix(hw, r)
        pool = np.kron(a, a)  # (r*r) x (hw*hw)
        up = pool.T * (r * r) / (hw * hw)  # spread each coarse cell over its footprint
        up = up / up.sum(axis=1, keepdims=True)
        _POOL_CACHE[key] = (pool, up)
    return _POOL_CACHE[key]


def time_embedding(t: int, T: int, dim: int) -> np.ndarray:
    tau = t / T
    k = np.arange(dim // 2)
    ang = (2.0 ** k) * math.pi * tau
    return np.concatenate([np.sin(ang), np.cos(ang)])[None, :]


def denoiser_forward(model: DenoiserModel, params, z_t, t: int, c: TextCondition,
                     m: RectMask, z):
    """Shared forward pass; ``params`` values and ``z_t`` may be tracked."""
    cfg = model.config
    zv = np.asarray(z, dtype=np.float64)
    if zv.shape != (cfg.channels, cfg.latent_hw, cfg.latent_hw):
        raise DimensionError(f"latent shape {zv.shape} does not match model config")
    if c.tokens.shape[1] != cfg.token_dim:
        raise ConfigError(f"token width {c.tokens.shape[1]} != model width {cfg.token_dim}")
    hw = cfg.latent_hw
    n = hw * hw
    x = assemble_inpaint_input(z_t, m, zv)
    mask_col = mask_raster(m, hw, hw).reshape(n, 1)
    x = nc.transpose(nc.reshape(x, (cfg.in_channels, n)))  # n x (2C+1)
    temb = time_embedding(t, cfg.timesteps, cfg.time_dim)
    tokens = c.tokens

    h = nc.tanh(x @ params["in.w"] + (params["in.b"] + temb @ params["time.w"]))
    heads, dh = cfg.heads, cfg.attn_dim // cfg.heads
    layers = []
    for l, r in enumerate(cfg.pyramid):
        pool, up = _pool_pair(hw, r)
        hp = nc.concat([pool @ h, pool @ mask_col], axis=1)  # queries also see the mask
        q = hp @ params[f"attn{l}.q"]
        k = tokens @ params[f"attn{l}.k"]
        v = tokens @ params[f"attn{l}.v"]
        maps, outs = [], []
        for j in range(heads):
            cols = slice(j * dh, (j + 1) * dh)
            a = nc.softmax_rows(q[:, cols] @ nc.transpose(k[:, cols]), 1.0 / math.sqrt(dh))
            maps.append(a)
            outs.append(a @ v[:, cols])
        a_mean = maps[0]
        for extra in maps[1:]:
            a_mean = a_mean + extra
        if heads > 1:
            a_mean = a_mean * (1.0 / heads)
        layers.append(AttentionLayer(l, r, r, a_mean))
        o = nc.concat(outs, axis=1) if heads > 1 else outs[0]
        h = h + up @ (o @ params[f"attn{l}.o"])
        h = h + nc.tanh(h @ params[f"ff{l}.w1"]) @ params[f"ff{l}.w2"]

    gate = temb @ params["gate.w"] + params["gate.b"]
    out = h @ params["out.w"] + (x @ params["skip.w"]) * gate
    eps = nc.reshape(nc.transpose(out), (cfg.channels, hw, hw))
    return eps, AttentionStack(layers)


def predict_noise(model: DenoiserModel, z_t, t: int, c: TextCondition, m: RectMask, z):
    """Noise estimate and cross-attention stack from a single forward pass.

    Pass a tracked ``z_t`` to get differentiable outputs.
    """
    return denoiser_forward(model, model.params, z_t, t, c, m, z)


@dataclass
class TrainingExample:
    image: np.ndarray  # 3 x H x W in [0, 1]
    cond: TextCondition
    mask: RectMask


@dataclass
class AdamState:
    """First/second moment estimates for :func:`train_step`."""

    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def direction(self, grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
        self.step += 1
        out = {}
        for k, g in grads.items():
            m = self.beta1 * self.m.get(k, 0.0) + (1 - self.beta1) * g
            v = self.beta2 * self.v.get(k, 0.0) + (1 - self.beta2) * g * g
            self.m[k], self.v[k] = m, v
            m_hat = m / (1 - self.beta1 ** self.step)
            v_hat = v / (1 - self.beta2 ** self.step)
            out[k] = m_hat / (np.sqrt(v_hat) + self.eps)
        return out


def noise_prediction_loss(model: DenoiserModel, params, batch: Sequence[TrainingExample],
                          sched: NoiseSchedule, rng: np.random.Generator):
    """``mean over batch of mean-square(eps - eps_hat)`` with ``t ~ U{1..T}``."""
    if not batch:
        raise UsageError("empty batch")
    total = None
    for ex in batch:
        z = image_to_latent(ex.image)
        t = int(rng.integers(1, sched.T + 1))
        eps = rng.standard_normal(z.shape)
        z_t = add_noise(z, t, eps, sched)
        eps_hat, _ = denoiser_forward(model, params, z_t, t, ex.cond, ex.mask, z)
        item = nc.mean(nc.square(eps_hat - eps))
        total = item if total is None else total + item
    return total * (1.0 / len(batch))


def train_step(model: DenoiserModel, batch: Sequence[TrainingExample], sched: NoiseSchedule,
               lr: float, rng: np.random.Generator, opt: AdamState | None = None) -> float:
    """One gradient-descent update of the weights on the noise-prediction MSE.

    Without ``opt`` the update is plain ``params -= lr * grad``; with an
    :class:`AdamState` the gradient is moment-normalised first. Returns the
    loss measured before the update.
    """
    if not batch:
        raise UsageError("empty batch")
    if lr <= 0:
        raise ConfigError("learning rate must be positive")
    tape = nc.Tape()
    tracked = {k: tape.track(v, k) for k, v in model.params.items()}
    loss = noise_prediction_loss(model, tracked, batch, sched, rng)
    grads = nc.backward(loss)
    gs = {k: grads.get(v.id, np.zeros_like(v.value)) for k, v in tracked.items()}
    if opt is not None:
        gs = opt.direction(gs)
    for k, g in gs.items():
        model.params[k] = model.params[k] - lr * g
    return float(nc.value_of(loss))


# --- checkpoints ----------------------------------------------------------


def save_checkpoint(model: DenoiserModel, path) -> None:
    """Write ``SOED`` | u32 version | u32 len + JSON config | weight blocks.

    Each weight block is ``u32 ndim``, ``ndim x u32`` extents, then the values
    as little-endian f64, in declaration order.
    """
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    header = json.dumps(asdict(model.config), sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<I", len(header)))
    buf.write(header)
    for name in model.config.param_shapes():
        arr = model.params[name]
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    try:
        Path(path).write_bytes(buf.getvalue())
    except OSError as exc:
        raise StorageError(f"cannot write checkpoint {path}: {exc}") from exc


def load_checkpoint(path) -> DenoiserModel:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise StorageError(f"cannot read checkpoint {path}: {exc}") from exc
    if data[:4] != CHECKPOINT_MAGIC:
        raise StorageError(f"{path}: not a SOED checkpoint")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != CHECKPOINT_VERSION:
        raise StorageError(f"{path}: unsupported checkpoint version {version}")
    (hlen,) = struct.unpack_from("<I", data, 8)
    pos = 12 + hlen
    raw = json.loads(data[12:pos].decode("utf-8"))
    raw["pyramid"] = tuple(raw["pyramid"])
    config = ModelConfig(**raw)
    params = {}
    try:
        for name in config.param_shapes():
            (ndim,) = struct.unpack_from("<I", data, pos)
            shape = struct.unpack_from(f"<{ndim}I", data, pos + 4)
            pos += 4 + 4 * ndim
            count = int(np.prod(shape))
            params[name] = np.frombuffer(data, dtype="<f8", count=count, offset=pos).reshape(shape).astype(np.float64)
            pos += 8 * count
    except (struct.error, ValueError) as exc:
        raise StorageError(f"{path}: truncated checkpoint") from exc
    return DenoiserModel(config, params)
