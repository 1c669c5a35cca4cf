"""The guide-attention convolutional spiking classifier.

Three parts work on each clip:

* a spatial extractor reads two grayscale frames (channel-concatenated,
  1x1 conv, multi-scale self-attention with residual, two strided 3x3
  convs) into texture features F_s, converted once per clip into spikes
  J_s by a stateless spiking layer;
* a temporal extractor processes the clip's event frames in order through
  conv-spiking stages whose LIF states persist across time steps;
* a guide attention module injects the grayscale cues into the event
  branch as a gated residual, after which token self-attention, a spiking
  fusion with J_s, and a two-stage spiking head produce per-step class
  potentials O_t.

The prediction reads softmax over the mean of O_t (configurably the last
potential or the last spike vector), and the loss is cross-entropy with
the class-count 1/7 factor kept explicit.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import nnops, rng
from .autodiff import Tensor, as_tensor
from .errors import ConfigError, DataError
from .events import Clip
from .nnops import BatchNorm, Conv2d, Linear, Mhsa, ParamStore
from .spiking import Lif, lif_init, lif_step

NUM_CLASSES = 7

OUTPUT_MODES = ("mean_potential", "last_potential", "last_spike")
INPUT_MODES = ("first_last", "first_only", "first_second", "all_frames")
EVENT_NORMS = ("counts", "binary")


@dataclass
class AdsnConfig:
    """Network hyperparameters; defaults target the 72x96 capture downscale."""

    input_height: int = 72
    input_width: int = 96
    base_channels: int = 16
    attention_scales: tuple = (3, 5, 7)
    heads: int = 4
    n_steps: int = 4
    theta: float = 0.3
    alpha: float = 0.2
    surrogate_window: float = 1.0
    head_hidden: int = 0  # 0 -> 8 * base_channels
    output_mode: str = "mean_potential"
    input_mode: str = "first_last"
    event_norm: str = "counts"
    seed: int = 0

    def __post_init__(self):
        self.attention_scales = tuple(int(s) for s in self.attention_scales)
        if any(s % 2 == 0 for s in self.attention_scales) or list(self.attention_scales) != sorted(self.attention_scales):
            raise ConfigError(f"attention scales must be odd and ascending, got {self.attention_scales}")
        if self.n_steps < 1:
            raise ConfigError("n_steps must be >= 1")
        if self.input_height % 8 or self.input_width % 8:
            raise ConfigError("input dims must be divisible by 8 (two strided convs + 2x2 pooling)")
        if self.output_mode not in OUTPUT_MODES:
            raise ConfigError(f"output_mode must be one of {OUTPUT_MODES}")
        if self.input_mode not in INPUT_MODES:
            raise ConfigError(f"input_mode must be one of {INPUT_MODES}")
        if self.event_norm not in EVENT_NORMS:
            raise ConfigError(f"event_norm must be one of {EVENT_NORMS}")
        if self.theta <= 0 or not 0 <= self.alpha < 1:
            raise ConfigError("need theta > 0 and 0 <= alpha < 1")

    @property
    def gray_channels(self) -> int:
        return self.n_steps if self.input_mode == "all_frames" else 2

    @property
    def hidden(self) -> int:
        return self.head_hidden if self.head_hidden else 8 * self.base_channels

    def to_file(self, path):
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, tuple):
                value = ",".join(str(v) for v in value)
            lines.append(f"{f.name}={value}")
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def from_file(cls, path) -> "AdsnConfig":
        kwargs = {}
        known = {f.name: f for f in fields(cls)}
        for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key=value")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in known:
                raise ConfigError(f"{path}:{lineno}: unknown model config key {key!r}")
            kwargs[key] = _parse_field(known[key], value)
        return cls(**kwargs)


def _parse_field(f, value: str):
    if f.name == "attention_scales":
        return tuple(int(v) for v in value.split(","))
    typ = f.type if isinstance(f.type, type) else {"int": int, "float": float, "str": str}.get(str(f.type), str)
    return typ(value)


# ---------------------------------------------------------------------------
# modules


class MultiScaleAttention:
    """Parallel odd-kernel branches re-weighted per channel by a shared
    squeeze-style gate, softmax-normalized across branches, then fused by a
    1x1 conv back to the target width."""

    def __init__(self, store: ParamStore, name: str, c_in: int, c_out: int, scales, gen, dtype=np.float32):
        self.branches = [Conv2d(store, f"{name}.branch{k}", c_in, c_out, k, gen, dtype=dtype) for k in scales]
        squeeze = max(c_out // 4, 4)
        self.gate_reduce = Conv2d(store, f"{name}.gate.reduce", c_out, squeeze, 1, gen, dtype=dtype)
        self.gate_bn = BatchNorm(store, f"{name}.gate.bn", squeeze, dtype=dtype)
        self.gate_expand = Conv2d(store, f"{name}.gate.expand", squeeze, c_out, 1, gen, dtype=dtype)
        self.fuse = Conv2d(store, f"{name}.fuse", c_out * len(self.branches), c_out, 1, gen, dtype=dtype)

    def _score(self, branch, training) -> Tensor:
        pooled = nnops.adaptive_avg_pool(branch)
        return self.gate_expand(ad.relu(self.gate_bn(self.gate_reduce(pooled), training)))

    def branch_weights(self, x, training: bool):
        """(branches b_j, softmax weights omega_j), each (N, c_out, 1, 1)."""
        branches = [conv(x) for conv in self.branches]
        scores = [self._score(b, training) for b in branches]
        shift = as_tensor(np.maximum.reduce([s.data for s in scores]))  # constant: softmax shift invariance
        exps = [ad.exp(s - shift) for s in scores]
        total = exps[0]
        for e in exps[1:]:
            total = total + e
        return branches, [e / total for e in exps]

    def __call__(self, x, training: bool) -> Tensor:
        branches, omegas = self.branch_weights(x, training)
        weighted = [b * w for b, w in zip(branches, omegas)]
        return self.fuse(ad.concat(weighted, axis=1))


class GuideAttention:
    """Gated residual: channel scores from the product of spatial and event
    features re-scale the event features, plus identity."""

    def __init__(self, store: ParamStore, name: str, channels: int, gen, dtype=np.float32):
        self.conv = Conv2d(store, f"{name}.conv", channels, channels, 1, gen, dtype=dtype)
        self.bn = BatchNorm(store, f"{name}.bn", channels, dtype=dtype)

    def gate(self, f_s, f_e, training: bool) -> Tensor:
        delta = f_s * f_e
        f_c = nnops.adaptive_avg_pool(delta)
        return ad.sigmoid(ad.relu(self.bn(self.conv(f_c), training)))

    def __call__(self, f_s, f_e, training: bool) -> Tensor:
        if f_s.shape != f_e.shape:
            raise DataError(f"guide attention needs matching shapes, got {f_s.shape} vs {f_e.shape}")
        return gated_residual(f_e, self.gate(f_s, f_e, training))


def gated_residual(f_e, f_p) -> Tensor:
    """F_cp = F_e * F_p + F_e; the identity map when the gate is zero."""
    return f_e * f_p + f_e


class StateNet:
    """Full network over one clip; owns parameters and spiking states."""

    def __init__(self, cfg: AdsnConfig):
        self.cfg = cfg
        self.store = ParamStore()
        gen = rng.generator(cfg.seed, rng.tag("model.init"))
        c = cfg.base_channels
        scales = cfg.attention_scales

        # spatial extractor
        self.ls_conv = Conv2d(self.store, "spatial.ls", cfg.gray_channels, c, 1, gen)
        self.spatial_msa = MultiScaleAttention(self.store, "spatial.msa", c, c, scales, gen)
        self.spatial_conv1 = Conv2d(self.store, "spatial.conv1", c, 2 * c, 3, gen, stride=2)
        self.spatial_bn = BatchNorm(self.store, "spatial.bn", 2 * c)
        self.spatial_conv2 = Conv2d(self.store, "spatial.conv2", 2 * c, 4 * c, 3, gen, stride=2)

        # temporal extractor
        self.event_msa = MultiScaleAttention(self.store, "temporal.msa", 2, c, scales, gen)
        self.event_conv1 = Conv2d(self.store, "temporal.conv1", c, 2 * c, 3, gen, stride=2)
        self.event_conv2 = Conv2d(self.store, "temporal.conv2", 2 * c, 4 * c, 3, gen, stride=2)
        self.guide = GuideAttention(self.store, "guide", 4 * c, gen)
        self.attention = Mhsa(self.store, "temporal.mhsa", 4 * c, cfg.heads, gen)

        # spiking head
        h8, w8 = cfg.input_height // 8, cfg.input_width // 8
        self.flat_dim = 4 * c * h8 * w8
        self.head1 = Linear(self.store, "head.fc1", self.flat_dim, cfg.hidden, gen)
        self.head2 = Linear(self.store, "head.fc2", cfg.hidden, NUM_CLASSES, gen)

        # temporal LIF states live in a per-forward dict (see _spike), keeping
        # concurrent inference on a shared net race-free
        self._lif_names = ("e1", "e2", "att", "h1", "h2")
        self.last_states: dict | None = None  # diagnostics from the most recent forward

    # -- pieces -------------------------------------------------------------

    def spatial_extract(self, grays, training: bool) -> tuple[Tensor, Tensor]:
        """Grayscale frames -> (F_s, J_s); J_s from a zero-state spiking pass."""
        x = as_tensor(grays)
        ls = self.ls_conv(x)
        attended = self.spatial_msa(ls, training) + ls
        f_s = self.spatial_conv2(ad.relu(self.spatial_bn(self.spatial_conv1(attended), training)))
        j_s, _ = lif_step(lif_init(f_s.shape, dtype=f_s.dtype), f_s, theta=self.cfg.theta, alpha=self.cfg.alpha, a=self.cfg.surrogate_window)
        return f_s, j_s

    def _tokens(self, feature_map: Tensor) -> Tensor:
        n, c, h, w = feature_map.shape
        return ad.reshape(ad.transpose(feature_map, (0, 2, 3, 1)), (n, h * w, c))

    def _maps(self, tokens: Tensor, h: int, w: int) -> Tensor:
        n, t, c = tokens.shape
        return ad.transpose(ad.reshape(tokens, (n, h, w, c)), (0, 3, 1, 2))

    def temporal_step(self, e_t, f_s, j_s_pooled, training: bool) -> Tensor:
        """One event frame through the temporal branch; returns O_t (N, 7)."""
        h = self.event_msa(as_tensor(e_t), training)
        h = self.lif_e1(h)
        h = self.event_conv1(h)
        h = self.lif_e2(h)
        f_e = self.event_conv2(h)
        h = self.guide(f_s, f_e, training)
        h = nnops.avg_pool2d(h, 2)
        _, _, hh, ww = h.shape
        h = self._maps(self.attention(self._tokens(h)), hh, ww)
        h = self.lif_att(h)
        h = h + j_s_pooled
        h = ad.reshape(h, (h.shape[0], self.flat_dim))
        self.lif_h1(self.head1(h))
        self.lif_h2(self.head2(self.lif_h1.spikes))
        return self.lif_h2.potential

    def forward(self, grays: np.ndarray, eframes: np.ndarray, training: bool = False):
        """grays (N, gray_channels, H, W) and eframes (N, n_steps, 2, H, W),
        both float32 and already normalized. Returns (probabilities R,
        per-step potentials O_t)."""
        cfg = self.cfg
        if eframes.shape[1] != cfg.n_steps:
            raise DataError(f"clip has {eframes.shape[1]} event frames, model expects {cfg.n_steps}")
        for lif in self._temporal_lifs:
            lif.reset()
        f_s, j_s = self.spatial_extract(grays, training)
        j_s_pooled = nnops.avg_pool2d(j_s, 2)
        outputs = [self.temporal_step(eframes[:, t], f_s, j_s_pooled, training) for t in range(cfg.n_steps)]
        if cfg.output_mode == "mean_potential":
            logits = ad.mean(ad.stack(outputs, axis=0), axis=0)
        elif cfg.output_mode == "last_potential":
            logits = outputs[-1]
        else:  # last_spike
            logits = self.lif_h2.spikes
        return ad.softmax(logits, axis=-1), outputs

    def loss(self, probs: Tensor, labels: np.ndarray) -> Tensor:
        labels = np.asarray(labels, dtype=np.int64)
        if labels.min() < 0 or labels.max() >= NUM_CLASSES:
            raise DataError(f"labels must be in [0, {NUM_CLASSES})")
        picked = ad.clamp_min(ad.gather_rows(probs, labels), 1e-12)
        return ad.mean(ad.log(picked)) * (-1.0 / NUM_CLASSES)

    def predict(self, grays, eframes) -> np.ndarray:
        with ad.no_grad():
            probs, _ = self.forward(grays, eframes, training=False)
        return probs.data.argmax(axis=-1)


def save_model(path, net: StateNet) -> None:
    from . import checkpoint

    checkpoint.save_arrays(path, net.store.state_arrays())


def load_model(path, cfg: AdsnConfig) -> StateNet:
    from . import checkpoint

    net = StateNet(cfg)
    net.store.load_state(checkpoint.load_arrays(path))
    return net


# ---------------------------------------------------------------------------
# clip -> network input


def normalize_gray(data: np.ndarray) -> np.ndarray:
    """Min-max per frame to [0, 1]; a constant frame maps to zeros."""
    arr = data.astype(np.float32)
    lo, hi = float(arr.min()), float(arr.max())
    if hi <= lo:
        return np.zeros_like(arr)
    return (arr - lo) / (hi - lo)


def prepare_batch(clips: list[Clip], cfg: AdsnConfig):
    """Stack clips into (grays, eframes, labels) arrays for StateNet.forward.

    Event counts are scaled per clip by 1 / max(1, 99th-percentile count)
    ("counts" mode) or binarized ("binary" mode).
    """
    if not clips:
        raise DataError("empty batch")
    grays_out, events_out, labels = [], [], []
    for clip in clips:
        if len(clip.event_frames) != cfg.n_steps:
            raise DataError(f"clip has {len(clip.event_frames)} event frames, config wants {cfg.n_steps}")
        frame0 = clip.event_frames[0]
        if (frame0.height, frame0.width) != (cfg.input_height, cfg.input_width):
            raise DataError(
                f"clip resolution {frame0.height}x{frame0.width} != config {cfg.input_height}x{cfg.input_width}"
            )
        if cfg.input_mode == "first_last":
            chosen = [clip.first_gray, clip.last_gray]
        elif cfg.input_mode == "first_only":
            chosen = [clip.first_gray, clip.first_gray]
        elif cfg.input_mode == "first_second":
            chosen = [clip.first_gray, clip.second_gray]
        else:
            chosen = clip.all_grays
        grays_out.append(np.stack([normalize_gray(g.data) for g in chosen]))
        counts = np.stack([np.stack([f.on_counts, f.off_counts]) for f in clip.event_frames]).astype(np.float32)
        if cfg.event_norm == "binary":
            counts = (counts > 0).astype(np.float32)
        else:
            scale = 1.0 / max(1.0, float(np.percentile(counts, 99)))
            counts = counts * np.float32(scale)
        events_out.append(counts)
        labels.append(clip.label)
    return np.stack(grays_out), np.stack(events_out), np.asarray(labels, dtype=np.int64)
