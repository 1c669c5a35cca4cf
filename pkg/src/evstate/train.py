"""Training loop (surrogate-gradient backprop through time + Adam) and the
synthetic eye-sequence generator used for desk-scale training runs.

The synthetic classes are separable only through their dynamics: every
class shares the same eye geometry sampler and the two blink classes share
an identical static frame distribution (triangle-wave lid position with a
uniform random phase), differing only in blink period. A single-frame
classifier therefore cannot tell them apart, while the event stream can.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import rng, v2e
from ._mem import tune_allocator
from .errors import DataError, NumericError
from .events import ClipSpec, Sequence, load_dataset, load_sequence_events, sample_clip
from .ingest import LumaFrame, encode_pgm
from .model import AdsnConfig, StateNet, prepare_batch
from .optim import Adam, clip_grad_norm

NUM_CLASSES = 7

CLASS_NAMES = [
    "blink_fast",
    "blink_slow",
    "gaze_sweep_h",
    "gaze_sweep_v",
    "pupil_osc",
    "tremor",
    "saccade",
]


@dataclass
class TrainConfig:
    """Paper-scale defaults; desk-scale runs pass epochs/batch_size overrides."""

    epochs: int = 150
    batch_size: int = 128
    lr: float = 1e-3
    weight_decay: float = 1e-4
    betas: tuple = (0.9, 0.999)
    grad_clip: float = 5.0
    clip_spec: ClipSpec = field(default_factory=lambda: ClipSpec(4, 3))
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise DataError("epochs and batch_size must be >= 1")


@dataclass
class EpochStats:
    epoch: int
    loss: float
    war: float
    grad_touched: dict


def train_epoch(net: StateNet, sequences: list[Sequence], tcfg: TrainConfig, adam: Adam, gen: np.random.Generator) -> EpochStats:
    """One pass over the sequences: fresh random-start clip per sequence,
    forward, cross-entropy, backprop through time, clipped Adam step."""
    if not sequences:
        raise DataError("empty training set")
    order = gen.permutation(len(sequences))
    correct = 0
    losses = []
    grad_touched = {name: 0.0 for name in net.store.params}
    for lo in range(0, len(order), tcfg.batch_size):
        batch_idx = order[lo : lo + tcfg.batch_size]
        clips = [sample_clip(sequences[i], tcfg.clip_spec, gen=gen) for i in batch_idx]
        grays, eframes, labels = prepare_batch(clips, net.cfg)
        probs, _ = net.forward(grays, eframes, training=True)
        loss = net.loss(probs, labels)
        loss_value = float(loss.data)
        if not np.isfinite(loss_value):
            norms = {name: float(np.linalg.norm(t.data)) for name, t in net.store.params.items()}
            worst = sorted(norms.items(), key=lambda kv: -kv[1])[:5]
            raise NumericError(f"non-finite loss at batch starting {lo}; largest parameter norms: {worst}")
        losses.append(loss_value)
        correct += int((probs.data.argmax(axis=-1) == labels).sum())
        net.store.zero_grad()
        loss.backward()
        for name, t in net.store.params.items():
            if t.grad is not None:
                grad_touched[name] = max(grad_touched[name], float(np.abs(t.grad).max()))
        if tcfg.grad_clip > 0:
            clip_grad_norm(net.store.params, tcfg.grad_clip)
        adam.step()
    return EpochStats(epoch=-1, loss=float(np.mean(losses)), war=correct / len(sequences), grad_touched=grad_touched)


def fit(net: StateNet, sequences: list[Sequence], tcfg: TrainConfig, epochs: int | None = None, on_epoch=None) -> list[EpochStats]:
    """Run `epochs` (default tcfg.epochs) training epochs; returns per-epoch stats."""
    tune_allocator()
    adam = Adam(net.store.params, lr=tcfg.lr, betas=tcfg.betas, weight_decay=tcfg.weight_decay)
    gen = rng.generator(tcfg.seed, rng.tag("train"))
    history = []
    for epoch in range(epochs if epochs is not None else tcfg.epochs):
        try:
            stats = train_epoch(net, sequences, tcfg, adam, gen)
        except NumericError as exc:
            raise NumericError(f"epoch {epoch}: {exc}") from exc
        stats.epoch = epoch
        history.append(stats)
        if on_epoch is not None:
            on_epoch(stats)
    return history


def load_split(root, params: v2e.V2eParams, split: str = "train", threads: int = 1, cache: bool = True) -> list[Sequence]:
    """Load every sequence of a dataset split, converting events on demand."""
    ds = load_dataset(root)
    dirs = ds.train_dirs if split == "train" else ds.test_dirs
    if not dirs:
        raise DataError(f"dataset {root} has no {split} split")
    return [load_sequence_events(d, params, n_labels=len(ds.labels), cache=cache, threads=threads) for d in dirs]


# ---------------------------------------------------------------------------
# synthetic data


def _smooth_disc(xx, yy, cx, cy, rx, ry, feather=1.2):
    """1 inside the ellipse, 0 outside, soft edge ~feather pixels wide."""
    d = np.sqrt(((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2)
    edge = feather / max(rx, ry)
    return np.clip((1.0 - d) / edge + 0.5, 0.0, 1.0)


def _triangle(phase):
    """Triangle wave of unit period, range [0, 1]."""
    frac = phase - np.floor(phase)
    return 1.0 - np.abs(2.0 * frac - 1.0)


@dataclass
class _EyeGeometry:
    cx: float
    cy: float
    rx: float
    ry: float
    pupil_r: float
    bg: float
    slope: float
    sclera: float
    pupil_v: float
    lid_v: float
    phase: float
    lid_rest: float
    texture: np.ndarray


def _sample_geometry(gen: np.random.Generator, width: int, height: int) -> _EyeGeometry:
    """Shared across classes so statics carry no class information beyond
    what the dynamics leave behind."""
    return _EyeGeometry(
        cx=width * gen.uniform(0.44, 0.56),
        cy=height * gen.uniform(0.44, 0.56),
        rx=width * gen.uniform(0.30, 0.38),
        ry=height * gen.uniform(0.30, 0.40),
        pupil_r=width * gen.uniform(0.09, 0.13),
        bg=gen.uniform(25, 55),
        slope=gen.uniform(-0.3, 0.3),
        sclera=gen.uniform(150, 215),
        pupil_v=gen.uniform(10, 40),
        lid_v=gen.uniform(35, 75),
        phase=gen.uniform(0.0, 1.0),
        lid_rest=gen.uniform(0.05, 0.22),
        texture=gen.normal(0.0, 2.5, size=(height, width)),
    )


BLINK_FAST_PERIOD = 16
BLINK_SLOW_PERIOD = 32


def render_sequence(label: int, geo: _EyeGeometry, length: int, width: int, height: int, gen: np.random.Generator) -> list[np.ndarray]:
    """Frames for one synthetic sequence of the given class."""
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    max_dx = geo.rx - geo.pupil_r - 2.0
    max_dy = geo.ry - geo.pupil_r - 2.0
    jitter = None
    if label == 5:
        steps = gen.normal(0.0, 0.055, size=(length, 2))
        jitter = np.cumsum(steps, axis=0)
        jitter -= jitter.mean(axis=0)
        jitter = np.tanh(jitter) * 0.8
    frames = []
    for t in range(length):
        px, py, pr = geo.cx, geo.cy, geo.pupil_r
        lid_pos = geo.lid_rest
        if label == 0:
            lid_pos = _triangle(t / BLINK_FAST_PERIOD + geo.phase)
        elif label == 1:
            lid_pos = _triangle(t / BLINK_SLOW_PERIOD + geo.phase)
        elif label == 2:
            px = geo.cx + max_dx * 0.8 * np.sin(2 * np.pi * (t / 24.0 + geo.phase))
        elif label == 3:
            py = geo.cy + max_dy * 0.8 * np.sin(2 * np.pi * (t / 24.0 + geo.phase))
        elif label == 4:
            pr = geo.pupil_r * (1.0 + 0.45 * np.sin(2 * np.pi * (t / 24.0 + geo.phase)))
        elif label == 5:
            px = geo.cx + max_dx * jitter[t, 0]
            py = geo.cy + max_dy * jitter[t, 1]
        elif label == 6:
            side = 1.0 if (t / 12.0 + geo.phase) % 1.0 < 0.5 else -1.0
            px = geo.cx + side * max_dx * 0.8
        img = geo.bg + geo.slope * yy + geo.texture
        eye = _smooth_disc(xx, yy, geo.cx, geo.cy, geo.rx, geo.ry)
        img = img * (1 - eye) + geo.sclera * eye
        pupil = _smooth_disc(xx, yy, px, py, pr, pr)
        img = img * (1 - pupil) + geo.pupil_v * pupil
        lid_y = geo.cy - geo.ry + lid_pos * 2.0 * geo.ry
        lid = np.clip((lid_y - yy) / 1.5 + 0.5, 0.0, 1.0)  # soft lid edge sweeping down
        img = img * (1 - lid) + geo.lid_v * lid
        frames.append(np.clip(np.rint(img), 0, 255).astype(np.uint8))
    return frames


def synth_dataset(
    root,
    sequences_per_class: int = 10,
    test_per_class: int = 4,
    length_frames: int = 64,
    width: int = 32,
    height: int = 24,
    fps: int = 60,
    seed: int = 0,
    classes: int = NUM_CLASSES,
) -> Path:
    """Write a labeled synthetic dataset in the standard directory layout.

    Same seed -> identical files. The target directory must be empty.
    """
    root = Path(root)
    if root.exists() and any(root.iterdir()):
        raise DataError(f"target directory {root} is not empty")
    if classes != NUM_CLASSES:
        raise DataError(f"the class taxonomy is fixed at {NUM_CLASSES} classes")
    root.mkdir(parents=True, exist_ok=True)
    (root / "labels.txt").write_text("\n".join(CLASS_NAMES) + "\n")
    for split, count, tag_name in (("train", sequences_per_class, "s"), ("test", test_per_class, "t")):
        for label in range(classes):
            for idx in range(count):
                gen = rng.generator(seed, rng.tag("synth"), rng.tag(split), label, idx)
                geo = _sample_geometry(gen, width, height)
                frames = render_sequence(label, geo, length_frames, width, height, gen)
                seq_dir = root / split / f"c{label}_{tag_name}{idx:03d}"
                frames_dir = seq_dir / "frames"
                frames_dir.mkdir(parents=True)
                for k, arr in enumerate(frames):
                    (frames_dir / f"{k:06d}.pgm").write_bytes(encode_pgm(LumaFrame(arr)))
                (seq_dir / "meta.txt").write_text(f"fps={fps}\nlabel={label}\n")
    return root


# ---------------------------------------------------------------------------
# single-frame baseline oracle


def single_frame_baseline(
    train_seqs: list[Sequence],
    test_seqs: list[Sequence],
    pair: tuple[int, int] | None = None,
    frames_per_seq: int = 8,
    iters: int = 300,
    seed: int = 0,
) -> float:
    """Logistic regression on individual grayscale frames; returns test accuracy.

    The reference point for "the network uses temporal structure": restrict
    to a dynamics-only class pair and this should hover near chance.
    """
    gen = rng.generator(seed, rng.tag("baseline"))

    def collect(seqs):
        xs, ys = [], []
        for seq in seqs:
            if pair is not None and seq.label not in pair:
                continue
            picks = gen.integers(0, len(seq.frames), frames_per_seq)
            for i in picks:
                xs.append(seq.frames[int(i)].data.astype(np.float64).ravel() / 255.0)
                label = seq.label if pair is None else pair.index(seq.label)
                ys.append(label)
        if not xs:
            raise DataError("baseline found no sequences for the requested classes")
        return np.stack(xs), np.asarray(ys)

    x_train, y_train = collect(train_seqs)
    x_test, y_test = collect(test_seqs)
    mu, sd = x_train.mean(axis=0), x_train.std(axis=0) + 1e-6
    x_train = (x_train - mu) / sd
    x_test = (x_test - mu) / sd
    n_classes = 2 if pair is not None else NUM_CLASSES
    w = np.zeros((x_train.shape[1], n_classes))
    b = np.zeros(n_classes)
    lr = 0.1
    onehot = np.eye(n_classes)[y_train]
    for _ in range(iters):
        logits = x_train @ w + b
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        p /= p.sum(axis=1, keepdims=True)
        g = (p - onehot) / len(y_train)
        w -= lr * (x_train.T @ g + 1e-3 * w)
        b -= lr * g.sum(axis=0)
    preds = (x_test @ w + b).argmax(axis=1)
    return float((preds == y_test).mean())
