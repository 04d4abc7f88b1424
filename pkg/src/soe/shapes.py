"""Procedural object-on-ground images used to train the toy denoiser.

Each prompt names both the object and the ground ("a red apple on the gray
ground"), so a pixel inside the edit mask needs the object's tokens and not
the ground's. That is what gives the toy model's cross-attention something
to select.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import UsageError
from .latentdiff import (PATCH, AdamState, DenoiserModel, ModelConfig, TrainingExample,
                         make_schedule, train_step)
from .masks import RectMask
from .text import make_condition

COLORS = {
    "red": (0.9, 0.1, 0.1),
    "green": (0.1, 0.8, 0.2),
    "blue": (0.1, 0.2, 0.9),
    "yellow": (0.95, 0.9, 0.1),
    "white": (0.95, 0.95, 0.95),
    "black": (0.05, 0.05, 0.05),
}
# label -> (color, shape)
OBJECTS = {
    "apple": ("red", "circle"),
    "lemon": ("yellow", "circle"),
    "leaf": ("green", "triangle"),
    "sign": ("blue", "square"),
    "ball": ("white", "circle"),
    "box": ("black", "square"),
}
GROUNDS = {
    "gray": (0.5, 0.5, 0.5),
    "brown": (0.45, 0.3, 0.15),
    "sand": (0.8, 0.7, 0.5),
    "grass": (0.25, 0.5, 0.2),
}


@dataclass(frozen=True)
class ShapeSample:
    image: np.ndarray
    mask: RectMask
    label: str
    color: str
    ground: str
    with_color: bool = False

    @property
    def prompt(self) -> str:
        obj = f"{self.color} {self.label}" if self.with_color else self.label
        return f"a {obj} on the {self.ground} ground"


def _ground(rng: np.random.Generator, name: str, size: int) -> np.ndarray:
    base = np.asarray(GROUNDS[name])[:, None, None]
    ramp = np.linspace(-0.08, 0.08, size)
    ramp = ramp[:, None] if rng.random() < 0.5 else ramp[None, :]
    return np.clip(base + ramp[None] * np.ones((1, size, size)), 0.0, 1.0)


def _stamp(shape: str, side: int) -> np.ndarray:
    yy, xx = (np.mgrid[:side, :side] + 0.5) / side
    if shape == "square":
        return np.ones((side, side), dtype=bool)
    if shape == "circle":
        return (yy - 0.5) ** 2 + (xx - 0.5) ** 2 <= 0.25
    return np.abs(xx - 0.5) <= yy / 2


def random_shape(rng: np.random.Generator, size: int = 128,
                 side_range: tuple[float, float] = (1 / 8, 1 / 6)) -> ShapeSample:
    """One object on a tinted ground; the mask is its bounding box.

    The side length is drawn strictly inside ``side_range`` (as fractions of
    the image side).
    """
    lo = int(np.floor(side_range[0] * size)) + 1
    hi = max(lo, int(np.ceil(side_range[1] * size)) - 1)
    side = int(rng.integers(lo, hi + 1))
    x = int(rng.integers(0, size - side + 1))
    y = int(rng.integers(0, size - side + 1))
    label = list(OBJECTS)[int(rng.integers(len(OBJECTS)))]
    ground = list(GROUNDS)[int(rng.integers(len(GROUNDS)))]
    color, shape = OBJECTS[label]
    img = _ground(rng, ground, size)
    patch = img[:, y:y + side, x:x + side]
    patch[:, _stamp(shape, side)] = np.asarray(COLORS[color])[:, None]
    return ShapeSample(img, RectMask.from_xywh(x, y, side, side, size, size), label, color,
                       ground, with_color=bool(rng.random() < 0.5))


def training_batch(rng: np.random.Generator, n: int, size: int, token_dim: int,
                   side_range: tuple[float, float] = (1 / 4, 1 / 2)) -> list[TrainingExample]:
    """Training uses larger objects than the benchmark so the masked region carries signal."""
    out = []
    for _ in range(n):
        s = random_shape(rng, size, side_range)
        out.append(TrainingExample(s.image, make_condition(s.prompt, s.label, token_dim), s.mask))
    return out


@dataclass(frozen=True)
class ToyTraining:
    """Recipe for the toy denoiser; the defaults are what the CLI uses."""

    steps: int = 200
    seed: int = 7
    batch: int = 16
    lr: float = 0.03
    image_size: int = 128
    timesteps: int = 20


def train_toy(recipe: ToyTraining = ToyTraining(),
              config: ModelConfig | None = None) -> tuple[DenoiserModel, list[float]]:
    """Train a fresh toy denoiser with Adam; returns the model and per-step losses."""
    if recipe.steps < 1:
        raise UsageError("steps must be at least 1")
    if config is None:
        config = ModelConfig(latent_hw=recipe.image_size // PATCH, timesteps=recipe.timesteps)
    model = DenoiserModel.init(config, seed=recipe.seed)
    sched = make_schedule(config.timesteps)
    rng = np.random.default_rng(recipe.seed)
    opt = AdamState()
    losses = []
    for _ in range(recipe.steps):
        batch = training_batch(rng, recipe.batch, recipe.image_size, config.token_dim)
        losses.append(train_step(model, batch, sched, recipe.lr, rng, opt))
    return model, losses
