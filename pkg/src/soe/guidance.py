"""Joint local/global cross-attention guidance for small-object inpainting.

Two denoising trajectories start from the same noise. One is conditioned on
the small edit mask, the other on an enlarged copy of it. For the first K
timesteps the small branch's noisy latent is nudged by gradient descent so
that its cross-attention maps agree with the large branch's:

* the local term compares the label tokens' attention inside each mask,
  after bilinearly shrinking the large-mask crop onto the small-mask crop;
* the global term compares the full maps of every token.

The large branch is never differentiated; only ``z_t`` of the small branch
receives gradients.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numcore as nc
from .errors import ConfigError, DimensionError, UsageError
from .imageio import write_pgm
from .latentdiff import (AttentionStack, DenoiserModel, NoiseSchedule, TextCondition, ddim_step,
                         predict_noise)
from .masks import GridRegion, RectMask, project_mask_to_grid, scale_mask

NORMS = ("squared", "l2")
_L2_EPS = 1e-12

# Reference learning rate for a Stable-Diffusion-scale U-Net; the toy model
# default is far smaller because the step size is model dependent.
SD_ETA = 100.0


@dataclass(frozen=True)
class GuidanceConfig:
    """Hyper-parameters of the guided phase.

    ``s`` fixes the mask scale factor; when it is ``None`` a single value is
    drawn from ``U[s_min, s_max]`` with ``seed``.
    """

    eta: float = 1.0
    K: int = 5
    J: int = 5
    s: float | None = None
    s_min: float = 1.5
    s_max: float = 3.0
    seed: int = 0
    norm: str = "squared"

    def __post_init__(self):
        if self.s is not None and self.s < 1:
            raise ConfigError(f"scale factor must be >= 1, got {self.s}")
        if not 1 <= self.s_min <= self.s_max:
            raise ConfigError(f"need 1 <= s_min <= s_max, got [{self.s_min}, {self.s_max}]")
        if self.eta < 0:
            raise ConfigError("eta must be non-negative")
        if self.K < 0:
            raise ConfigError("K must be non-negative")
        if self.J < 1:
            raise ConfigError("J must be at least 1")
        if self.norm not in NORMS:
            raise ConfigError(f"norm must be one of {NORMS}")

    def scale(self) -> float:
        if self.s is not None:
            return float(self.s)
        return float(np.random.default_rng(self.seed).uniform(self.s_min, self.s_max))


def regions_for(attn: AttentionStack, m: RectMask) -> list[GridRegion]:
    return [project_mask_to_grid(m, layer.H, layer.W) for layer in attn]


def crop_attention(attn: AttentionStack, token: int, regions: Sequence[GridRegion]) -> list:
    """The token's map on each layer, reshaped to its grid and cut to the region."""
    if len(regions) != len(attn):
        raise UsageError(f"{len(regions)} regions for {len(attn)} layers")
    out = []
    for layer, region in zip(attn, regions):
        if not 0 <= token < layer.values.shape[1]:
            raise UsageError(f"token {token} out of range")
        if (region.H, region.W) != (layer.H, layer.W):
            raise UsageError(f"region grid {region.H}x{region.W} != layer {layer.H}x{layer.W}")
        grid = nc.reshape(nc.getitem(layer.map, (slice(None), token)), (layer.H, layer.W))
        out.append(nc.getitem(grid, region.slices))
    return out


def _norm(diff, norm: str):
    sq = nc.sum_(nc.square(diff))
    if norm == "squared":
        return sq
    return nc.sqrt(nc.add(sq, _L2_EPS))


def _check_pair(attn_s: AttentionStack, attn_b: AttentionStack) -> None:
    if len(attn_s) != len(attn_b):
        raise DimensionError("attention stacks have different layer counts")
    for a, b in zip(attn_s, attn_b):
        if (a.H, a.W) != (b.H, b.W) or a.values.shape != b.values.shape:
            raise DimensionError(f"layer {a.index}: shapes {a.values.shape} vs {b.values.shape}")


def loss_lg(attn_s: AttentionStack, attn_b: AttentionStack, c_req: Sequence[int],
            m_s: RectMask, m_b: RectMask, norm: str = "squared"):
    """Local term: label-token crops of the small branch vs. resized large-branch crops."""
    if not c_req:
        raise UsageError("c_req is empty")
    _check_pair(attn_s, attn_b)
    reg_s, reg_b = regions_for(attn_s, m_s), regions_for(attn_b, m_b)
    total = 0.0
    for i in c_req:
        for small, big, region in zip(crop_attention(attn_s, i, reg_s),
                                      crop_attention(attn_b, i, reg_b), reg_s):
            target = nc.bilinear_resize(big, region.rows, region.cols)
            total = nc.add(total, _norm(nc.sub(target, small), norm))
    return total


def loss_gg(attn_s: AttentionStack, attn_b: AttentionStack, norm: str = "squared"):
    """Global term: every token's full map, small branch vs. large branch."""
    _check_pair(attn_s, attn_b)
    total = 0.0
    for a, b in zip(attn_s, attn_b):
        diff = nc.sub(b.map, a.map)
        if norm == "squared":
            total = nc.add(total, nc.sum_(nc.square(diff)))
        else:
            for i in range(a.values.shape[1]):
                total = nc.add(total, _norm(nc.getitem(diff, (slice(None), i)), norm))
    return total


def loss_total(lg, gg):
    return nc.add(lg, gg)


def guidance_update(z_t, loss, eta: float) -> np.ndarray:
    """``z_t - eta * d loss / d z_t`` for a tracked ``z_t``."""
    if not nc.is_tracked(z_t):
        raise UsageError("z_t must be tracked on the loss tape")
    if eta == 0:
        return z_t.value.copy()
    return z_t.value - eta * nc.backward_grad(loss, z_t)


def region_mass(attn: AttentionStack, c_req: Sequence[int], m: RectMask) -> float:
    """Mean per-cell attention of the ``c_req`` tokens inside ``m``, averaged over layers."""
    masses = []
    for layer, region in zip(attn, regions_for(attn, m)):
        grid = layer.values[:, list(c_req)].sum(axis=1).reshape(layer.H, layer.W)
        masses.append(grid[region.slices].mean())
    return float(np.mean(masses))


@dataclass
class GuidedStep:
    t: int
    losses: list[float] = field(default_factory=list)  # before each inner update
    final_loss: float = float("nan")  # after all J updates
    attn_s: AttentionStack | None = None
    attn_b: AttentionStack | None = None


@dataclass
class SampleTrace:
    """What a sampling run saw; filled in when passed to a sampler."""

    scale: float = 1.0
    mask_b: RectMask | None = None
    guided: list[GuidedStep] = field(default_factory=list)
    # (branch, t, inner index or -1, stack) for every map the model emitted
    maps: list[tuple[str, int, int, AttentionStack]] = field(default_factory=list)
    step_attn: dict[int, AttentionStack] = field(default_factory=dict)

    def emit(self, branch: str, t: int, j: int, attn: AttentionStack) -> AttentionStack:
        stack = attn.detached()
        self.maps.append((branch, t, j, stack))
        return stack


def _initial_noise(z, seed: int) -> np.ndarray:
    return np.random.default_rng(seed).standard_normal(np.shape(z))


def unguided_sample(model: DenoiserModel, sched: NoiseSchedule, z, m_s: RectMask,
                    c: TextCondition, seed: int, trace: SampleTrace | None = None) -> np.ndarray:
    """Plain DDIM inpainting from ``z_T ~ N(0, I)`` drawn with ``seed``."""
    z_t = _initial_noise(z, seed)
    for t in range(sched.T, 0, -1):
        eps, attn = predict_noise(model, z_t, t, c, m_s, z)
        if trace is not None:
            trace.step_attn[t] = trace.emit("s", t, -1, attn)
        z_t = ddim_step(z_t, eps, t, sched)
    return z_t


def guided_sample(model: DenoiserModel, sched: NoiseSchedule, z, m_s: RectMask,
                  c: TextCondition, cfg: GuidanceConfig, seed: int,
                  trace: SampleTrace | None = None) -> np.ndarray:
    """Dual-branch guided inpainting; returns the final latent ``z_0``.

    The guided phase covers the first ``cfg.K`` timesteps (``T`` down to
    ``T - K + 1``). At each, the large branch advances one DDIM step and its
    maps are frozen; then ``cfg.J`` times the small branch's maps are
    recomputed and ``z_t`` takes a gradient step on the joint loss. The
    timestep ends with an ordinary DDIM step of the small branch.
    """
    if cfg.K > sched.T:
        raise ConfigError(f"K={cfg.K} exceeds T={sched.T}")
    if not c.c_req:
        raise UsageError("c_req is empty")
    s = cfg.scale()
    m_b = scale_mask(m_s, s)
    if trace is not None:
        trace.scale, trace.mask_b = s, m_b

    z_t = _initial_noise(z, seed)
    z_b = z_t.copy()
    for t in range(sched.T, 0, -1):
        if t > sched.T - cfg.K:
            step = GuidedStep(t)
            eps_b, attn_b = predict_noise(model, z_b, t, c, m_b, z)
            z_b = ddim_step(z_b, eps_b, t, sched)
            if trace is not None:
                step.attn_b = trace.emit("b", t, -1, attn_b)
            for j in range(cfg.J):
                tape = nc.Tape()
                z_var = tape.track(z_t, "z_t")
                _, attn_s = predict_noise(model, z_var, t, c, m_s, z)
                loss = loss_total(loss_lg(attn_s, attn_b, c.c_req, m_s, m_b, cfg.norm),
                                  loss_gg(attn_s, attn_b, cfg.norm))
                step.losses.append(float(nc.value_of(loss)))
                if trace is not None:
                    trace.emit("s", t, j, attn_s)
                z_t = guidance_update(z_var, loss, cfg.eta)
            eps, attn = predict_noise(model, z_t, t, c, m_s, z)
            step.final_loss = float(nc.value_of(loss_total(
                loss_lg(attn, attn_b, c.c_req, m_s, m_b, cfg.norm),
                loss_gg(attn, attn_b, cfg.norm))))
            if trace is not None:
                step.attn_s = trace.emit("s", t, cfg.J, attn)
                trace.step_attn[t] = step.attn_s
                trace.guided.append(step)
        else:
            eps, attn = predict_noise(model, z_t, t, c, m_s, z)
            if trace is not None:
                trace.step_attn[t] = trace.emit("s", t, -1, attn)
        z_t = ddim_step(z_t, eps, t, sched)
    return z_t


def write_attention_dump(trace: SampleTrace, out_dir, m_s: RectMask,
                         c_req: Sequence[int]) -> list[Path]:
    """One normalised PGM per (branch, guided timestep, layer) plus ``index.csv``.

    Each image is the summed ``c_req`` attention reshaped to its grid and
    stretched to the full gray range. ``mass_in_mask`` is the share of that
    map's total inside the branch's mask footprint.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows, written = [], []
    token = ";".join(str(i) for i in c_req)
    for step in trace.guided:
        for branch, stack, mask in (("s", step.attn_s, m_s), ("b", step.attn_b, trace.mask_b)):
            for layer in stack:
                grid = layer.values[:, list(c_req)].sum(axis=1).reshape(layer.H, layer.W)
                lo, hi = float(grid.min()), float(grid.max())
                norm = (grid - lo) / (hi - lo) if hi > lo else np.zeros_like(grid)
                name = f"{branch}_t{step.t:04d}_l{layer.index}.pgm"
                write_pgm(out / name, norm)
                written.append(out / name)
                region = project_mask_to_grid(mask, layer.H, layer.W)
                mass = float(grid[region.slices].sum() / grid.sum())
                rows.append([name, branch, step.t, layer.index, token,
                             f"{lo:.6f}", f"{hi:.6f}", f"{mass:.6f}"])
    with open(out / "index.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["file", "branch", "timestep", "layer", "token", "min", "max", "mass_in_mask"])
        w.writerows(rows)
    return written
