"""Toy class-conditional attention denoiser on 8x8 images.

An 8x8 image is cut into 16 patches of 2x2 pixels. Each patch goes through a
fixed linear embedding, plus fixed positional and sinusoidal timestep
embeddings. The tokens then pass through ``n_blocks`` blocks of
self-attention, cross-attention and a GELU MLP, each with a residual
connection. Cross-attention attends to two context tokens, the learned
class embedding and the timestep embedding. A fixed linear read-out maps
each token back to its four pixels.

Only the attention, output-projection, MLP and class-embedding matrices are
parameters; everything fixed is derived from the dimensions alone.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tape

ATTN_KINDS = ("self", "cross")
QKV_ROLES = ("q", "k", "v")
_EXT_ROLES = {("proj", "o"): 0, ("mlp", "fc1"): 1, ("mlp", "fc2"): 2}
_BUFFER_SEED = 20240917


@functools.total_ordering
@dataclass(frozen=True)
class MatrixId:
    """Address of one parameter matrix.

    Attention matrices have ``attn`` in {"self", "cross"} and ``role`` in
    {"q", "k", "v"}. Extension matrices (output projection, MLP, class
    embedding) only enter the candidate pool in the all-parameter variant.
    """

    block: int | None
    attn: str
    role: str

    @property
    def is_attention(self) -> bool:
        return self.attn in ATTN_KINDS

    def sort_key(self) -> tuple:
        if self.is_attention:
            return (0, self.block, ATTN_KINDS.index(self.attn), QKV_ROLES.index(self.role))
        if self.attn == "embed":
            return (2, 0, 0, 0)
        return (1, self.block, _EXT_ROLES[(self.attn, self.role)], 0)

    def __lt__(self, other: "MatrixId") -> bool:
        return self.sort_key() < other.sort_key()

    def __str__(self) -> str:
        if self.attn == "embed":
            return f"embed.{self.role}"
        return f"B{self.block}.{self.attn}.{self.role}"

    @classmethod
    def parse(cls, text: str) -> "MatrixId":
        parts = text.split(".")
        if parts[0] == "embed" and len(parts) == 2:
            return cls(None, "embed", parts[1])
        if len(parts) == 3 and parts[0].startswith("B"):
            return cls(int(parts[0][1:]), parts[1], parts[2])
        raise ValueError(f"not a matrix id: {text!r}")

    @property
    def layer(self) -> tuple[int | None, str]:
        """The attention layer (or extension group) this matrix belongs to."""
        return (self.block, self.attn)


EMBED_ID = MatrixId(None, "embed", "class")


@dataclass(frozen=True)
class DenoiserConfig:
    n_blocks: int = 4
    d_model: int = 16
    d_embed: int = 16
    n_classes: int = 4
    n_steps: int = 50
    image_side: int = 8
    patch: int = 2

    def __post_init__(self):
        if self.d_model != self.d_embed:
            raise ValueError("token and embedding widths must match (timestep embedding is added to tokens)")
        if self.image_side % self.patch:
            raise ValueError("patch size must divide the image side")

    @property
    def n_tokens(self) -> int:
        return (self.image_side // self.patch) ** 2

    @property
    def patch_dim(self) -> int:
        return self.patch * self.patch

    @property
    def n_pixels(self) -> int:
        return self.image_side * self.image_side

    def attention_ids(self) -> list[MatrixId]:
        """The candidate pool for selection: every q/k/v matrix, canonical order."""
        return [
            MatrixId(b, kind, role)
            for b in range(self.n_blocks)
            for kind in ATTN_KINDS
            for role in QKV_ROLES
        ]

    def all_ids(self) -> list[MatrixId]:
        ext = [
            MatrixId(b, kind, role)
            for b in range(self.n_blocks)
            for (kind, role) in _EXT_ROLES
        ]
        return self.attention_ids() + ext + [EMBED_ID]

    def shape(self, mid: MatrixId) -> tuple[int, int]:
        m, e = self.d_model, self.d_embed
        if mid.attn == "embed":
            return (self.n_classes, e)
        if mid.attn == "cross" and mid.role in ("k", "v"):
            return (e, m)
        if mid.attn == "mlp":
            return (m, 4 * m) if mid.role == "fc1" else (4 * m, m)
        return (m, m)


@dataclass(frozen=True)
class Dataset:
    """Images as rows of ``x`` (values in [-1, 1]) with integer labels ``y``."""

    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        if self.x.ndim != 2 or len(self.x) != len(self.y):
            raise ValueError("dataset needs x of shape (N, d) and N labels")

    def __len__(self) -> int:
        return len(self.y)

    def subset(self, idx) -> "Dataset":
        return Dataset(self.x[idx], self.y[idx])


@dataclass
class DenoiserParams:
    config: DenoiserConfig
    weights: dict[MatrixId, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        for mid in self.config.all_ids():
            if mid not in self.weights:
                raise ValueError(f"missing matrix {mid}")
            if self.weights[mid].shape != self.config.shape(mid):
                raise ValueError(f"{mid}: shape {self.weights[mid].shape} != {self.config.shape(mid)}")

    def __getitem__(self, mid: MatrixId) -> np.ndarray:
        return self.weights[mid]

    def copy(self) -> "DenoiserParams":
        return DenoiserParams(self.config, {k: v.copy() for k, v in self.weights.items()})

    def replace(self, updates: dict[MatrixId, np.ndarray]) -> "DenoiserParams":
        new = dict(self.weights)
        new.update(updates)
        return DenoiserParams(self.config, new)

    def shapes(self) -> dict[MatrixId, tuple[int, int]]:
        return {mid: w.shape for mid, w in self.weights.items()}


def init_params(config: DenoiserConfig, rng: np.random.Generator) -> DenoiserParams:
    """Random initial weights; output-side matrices start smaller."""
    weights = {}
    for mid in config.all_ids():
        rows, cols = config.shape(mid)
        if mid.attn == "embed":
            std = 1.0
        elif mid.role in ("o", "fc2") or (mid.attn == "cross" and mid.role == "v"):
            std = 0.5 / math.sqrt(rows)
        else:
            std = 1.0 / math.sqrt(rows)
        weights[mid] = rng.normal(0.0, std, size=(rows, cols))
    return DenoiserParams(config, weights)


@functools.lru_cache(maxsize=8)
def fixed_buffers(config: DenoiserConfig) -> dict[str, np.ndarray]:
    """Non-trainable projections, a function of the dimensions only."""
    rng = np.random.default_rng(_BUFFER_SEED)
    p, m = config.patch_dim, config.d_model
    embed = rng.normal(0.0, 1.0, size=(p, m))
    readout = np.linalg.pinv(embed)
    pos = 0.5 * grid_positions(config.image_side // config.patch, m)
    for arr in (embed, readout, pos):
        arr.setflags(write=False)
    return {"embed": embed, "readout": readout, "pos": pos}


def sinusoid(t: np.ndarray, dim: int) -> np.ndarray:
    """Sinusoidal embedding of integer positions/timesteps, shape (len(t), dim)."""
    t = np.asarray(t, dtype=np.float64).reshape(-1, 1)
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    return np.concatenate([np.sin(t * freqs), np.cos(t * freqs)], axis=1)


def grid_positions(side: int, dim: int) -> np.ndarray:
    """2-D positional table for a ``side`` x ``side`` token grid, shape (side*side, dim).

    Half the dimensions encode the row and half the column, as cos/sin pairs
    at frequencies pi, pi/2, pi/4, ... so that neighbouring tokens differ in
    sign on the first pair. Leftover dimensions stay zero.
    """
    n_freq = dim // 4
    freqs = math.pi / 2.0 ** np.arange(n_freq)
    r, c = np.divmod(np.arange(side * side, dtype=np.float64), side)
    out = np.zeros((side * side, dim))
    for k, axis in enumerate((r, c)):
        ang = axis[:, None] * freqs
        out[:, 2 * n_freq * k : 2 * n_freq * (k + 1)] = np.concatenate([np.cos(ang), np.sin(ang)], axis=1)
    return out


def patchify(x: np.ndarray, config: DenoiserConfig) -> np.ndarray:
    """(S, side*side) row-major images -> (S, n_tokens, patch*patch)."""
    s, p = config.image_side, config.patch
    g = s // p
    return x.reshape(-1, g, p, g, p).transpose(0, 1, 3, 2, 4).reshape(-1, g * g, p * p)


def unpatchify(tokens: np.ndarray, config: DenoiserConfig) -> np.ndarray:
    s, p = config.image_side, config.patch
    g = s // p
    return tokens.reshape(-1, g, g, p, p).transpose(0, 1, 3, 2, 4).reshape(-1, s * s)


# -- diffusion schedule ------------------------------------------------------


@dataclass(frozen=True)
class DiffusionSchedule:
    betas: np.ndarray
    alpha_bars: np.ndarray

    @property
    def T(self) -> int:
        return len(self.betas)

    def beta(self, t):
        return self.betas[np.asarray(t) - 1]

    def alpha_bar(self, t):
        return self.alpha_bars[np.asarray(t) - 1]


def make_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> DiffusionSchedule:
    """Linear beta schedule over timesteps 1..T."""
    if T < 2:
        raise ValueError("diffusion needs T >= 2")
    if not 0 < beta_start <= beta_end < 1:
        raise ValueError("need 0 < beta_start <= beta_end < 1")
    betas = np.linspace(beta_start, beta_end, T)
    alpha_bars = np.cumprod(1.0 - betas)
    betas.setflags(write=False)
    alpha_bars.setflags(write=False)
    return DiffusionSchedule(betas, alpha_bars)


def forward_diffuse(schedule: DiffusionSchedule, x0: np.ndarray, t, noise: np.ndarray) -> np.ndarray:
    """Closed-form q(x_t | x_0): ``sqrt(abar_t) x0 + sqrt(1 - abar_t) noise``."""
    t = np.asarray(t)
    if np.any(t < 1) or np.any(t > schedule.T):
        raise ValueError(f"timestep out of range [1, {schedule.T}]")
    if np.shape(noise) != np.shape(x0):
        raise ValueError("noise and x0 differ in shape")
    ab = schedule.alpha_bar(t)
    if ab.ndim:
        ab = ab.reshape((-1,) + (1,) * (np.ndim(x0) - 1))
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * noise


# -- network -----------------------------------------------------------------


class _Weights:
    """Resolves matrix ids to tape nodes, with optional low-rank adapters.

    ``track`` names the full matrices whose gradients are wanted; adapter
    factors are tracked as ``(mid, "A")`` / ``(mid, "B")`` when
    ``track_adapters`` is set.
    """

    def __init__(self, tape, params, track=(), adapters=None, track_adapters=False):
        self.tape = tape
        self.params = params
        self.track = set(track)
        self.adapters = adapters or {}
        self.track_adapters = track_adapters
        self._cache: dict = {}

    def _leaf(self, key, value, tracked):
        if key not in self._cache:
            self._cache[key] = self.tape.param(key, value) if tracked else self.tape.constant(value)
        return self._cache[key]

    def linear(self, x: int, mid: MatrixId) -> int:
        tape = self.tape
        w = self._leaf(mid, self.params[mid], mid in self.track)
        out = tape.matmul(x, w)
        adapter = self.adapters.get(mid)
        if adapter is not None:
            a = self._leaf((mid, "A"), adapter.A, self.track_adapters)
            b = self._leaf((mid, "B"), adapter.B, self.track_adapters)
            out = tape.add(out, tape.matmul(tape.matmul(x, a), b))
        return out


def _attention(tape: Tape, q: int, k: int, v: int, d: int) -> int:
    scores = tape.scale(tape.matmul(q, tape.transpose(k)), 1.0 / math.sqrt(d))
    return tape.matmul(tape.softmax(scores), v)


def block_forward(w: _Weights, h: int, ctx: int, block: int) -> int:
    """One block: self-attention, cross-attention, MLP, each residual."""
    tape, d = w.tape, w.params.config.d_model
    att = _attention(
        tape,
        w.linear(h, MatrixId(block, "self", "q")),
        w.linear(h, MatrixId(block, "self", "k")),
        w.linear(h, MatrixId(block, "self", "v")),
        d,
    )
    h = tape.add(h, w.linear(att, MatrixId(block, "proj", "o")))
    cross = _attention(
        tape,
        w.linear(h, MatrixId(block, "cross", "q")),
        w.linear(ctx, MatrixId(block, "cross", "k")),
        w.linear(ctx, MatrixId(block, "cross", "v")),
        d,
    )
    h = tape.add(h, cross)
    hidden = tape.gelu(w.linear(h, MatrixId(block, "mlp", "fc1")))
    return tape.add(h, w.linear(hidden, MatrixId(block, "mlp", "fc2")))


def _check_inputs(config: DenoiserConfig, x_t, t, labels):
    x_t = np.asarray(x_t, dtype=np.float64)
    if x_t.ndim == 1:
        x_t = x_t[None, :]
    n = len(x_t)
    t = np.broadcast_to(np.asarray(t), (n,))
    labels = np.broadcast_to(np.asarray(labels), (n,))
    if x_t.shape[1] != config.n_pixels:
        raise ValueError(f"expected images with {config.n_pixels} pixels, got {x_t.shape[1]}")
    if np.any(labels < 0) or np.any(labels >= config.n_classes):
        raise ValueError(f"unknown label in {sorted(set(labels.tolist()))}")
    if np.any(t < 1) or np.any(t > config.n_steps):
        raise ValueError(f"timestep out of range [1, {config.n_steps}]")
    return x_t, t, labels


def network(w: _Weights, x_t: np.ndarray, t: np.ndarray, labels: np.ndarray) -> int:
    """Build the noise-prediction graph; returns a (S, n_tokens, patch_dim) node."""
    tape, cfg = w.tape, w.params.config
    buf = fixed_buffers(cfg)
    temb = sinusoid(t, cfg.d_embed)[:, None, :]
    h = tape.matmul(tape.constant(patchify(x_t, cfg), batched=True), tape.constant(buf["embed"]))
    h = tape.add(h, tape.constant(buf["pos"]))
    temb_node = tape.constant(temb, batched=True)
    h = tape.add(h, temb_node)
    onehot = np.eye(cfg.n_classes)[labels][:, None, :]
    cls = w.linear(tape.constant(onehot, batched=True), EMBED_ID)
    ctx = tape.concat([cls, temb_node], axis=0)
    for b in range(cfg.n_blocks):
        h = block_forward(w, h, ctx, b)
    return tape.matmul(h, tape.constant(buf["readout"]))


def predict_noise(params: DenoiserParams, x_t, t, labels, adapters=None) -> np.ndarray:
    """Noise estimate for a batch of noisy images, shape (S, n_pixels)."""
    x_t, t, labels = _check_inputs(params.config, x_t, t, labels)
    tape = Tape(len(x_t), record=False)
    out = network(_Weights(tape, params, adapters=adapters), x_t, t, labels)
    return unpatchify(tape.value(out), params.config)


def loss(params: DenoiserParams, x0, t, noise, labels, schedule: DiffusionSchedule, adapters=None) -> np.ndarray:
    """Per-sample mean-square noise-prediction error."""
    x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    x_t = forward_diffuse(schedule, x0, np.broadcast_to(t, (len(x0),)), np.atleast_2d(noise))
    pred = predict_noise(params, x_t, t, labels, adapters)
    return np.mean((np.atleast_2d(noise) - pred) ** 2, axis=1)


def per_sample_grads(
    params: DenoiserParams,
    x0: np.ndarray,
    t: np.ndarray,
    noise: np.ndarray,
    labels: np.ndarray,
    schedule: DiffusionSchedule,
    track=(),
    adapters=None,
    track_adapters: bool = False,
) -> tuple[np.ndarray, dict]:
    """Per-sample losses and gradients for the tracked matrices/adapters.

    Gradients come back as ``{key: (S, rows, cols)}`` with keys ``MatrixId``
    for full matrices and ``(MatrixId, "A"|"B")`` for adapter factors.
    """
    cfg = params.config
    x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    noise = np.atleast_2d(noise)
    t = np.broadcast_to(np.asarray(t), (len(x0),))
    x_t = forward_diffuse(schedule, x0, t, noise)
    x_t, t, labels = _check_inputs(cfg, x_t, t, labels)
    tape = Tape(len(x0))
    w = _Weights(tape, params, track=track, adapters=adapters, track_adapters=track_adapters)
    out = network(w, x_t, t, labels)
    target = tape.constant(patchify(noise, cfg), batched=True)
    node = tape.mse(out, target)
    return tape.value(node).copy(), tape.backward(node)


def sample_batch(
    params: DenoiserParams,
    schedule: DiffusionSchedule,
    labels: np.ndarray,
    rng: np.random.Generator,
    adapters=None,
) -> np.ndarray:
    """Ancestral DDPM sampling, one image per label; clamped at the end only."""
    labels = np.asarray(labels)
    x = rng.standard_normal((len(labels), params.config.n_pixels))
    for t in range(schedule.T, 0, -1):
        eps = predict_noise(params, x, t, labels, adapters)
        beta, ab = schedule.beta(t), schedule.alpha_bar(t)
        x = (x - beta / math.sqrt(1.0 - ab) * eps) / math.sqrt(1.0 - beta)
        if t > 1:
            x = x + math.sqrt(beta) * rng.standard_normal(x.shape)
    return np.clip(x, -1.0, 1.0)


def sample_images(params, schedule, label: int, count: int, rng, adapters=None) -> np.ndarray:
    if count < 1:
        raise ValueError("count must be >= 1")
    return sample_batch(params, schedule, np.full(count, label), rng, adapters)


def train_step_batch(rng: np.random.Generator, x0: np.ndarray, T: int):
    """Uniform timesteps in 1..T and standard normal noise for a batch."""
    t = rng.integers(1, T + 1, size=len(x0))
    noise = rng.standard_normal(x0.shape)
    return t, noise
