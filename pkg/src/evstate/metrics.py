"""WAR/UAR metrics, confusion matrices, and the randomized E_x-S_y
evaluation protocol (random-start clips, repeated and averaged)."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import rng
from .errors import DataError
from .events import ClipSpec, Sequence, sample_clip
from .model import NUM_CLASSES, StateNet, prepare_batch


@dataclass
class ConfusionMatrix:
    """Rows = ground truth, columns = prediction."""

    counts: np.ndarray

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.ndim != 2 or self.counts.shape[0] != self.counts.shape[1]:
            raise DataError(f"confusion matrix must be square, got {self.counts.shape}")
        if (self.counts < 0).any():
            raise DataError("confusion matrix counts must be non-negative")

    @classmethod
    def empty(cls, n_classes: int = NUM_CLASSES) -> "ConfusionMatrix":
        return cls(np.zeros((n_classes, n_classes), dtype=np.int64))

    def add(self, truth: int, prediction: int) -> None:
        self.counts[truth, prediction] += 1

    def merge(self, other: "ConfusionMatrix") -> None:
        self.counts += other.counts


def war(cm: ConfusionMatrix) -> float:
    """Weighted average recall = overall accuracy = trace / total."""
    total = int(cm.counts.sum())
    if total == 0:
        raise DataError("empty confusion matrix")
    return float(np.trace(cm.counts)) / total


def uar(cm: ConfusionMatrix) -> float:
    """Unweighted average recall = mean per-class recall, blind to class sizes."""
    row_sums = cm.counts.sum(axis=1)
    empty = np.where(row_sums == 0)[0]
    if empty.size:
        raise DataError(f"class {int(empty[0])} has no ground-truth samples")
    recalls = np.diag(cm.counts) / row_sums
    return float(recalls.mean())


def per_class_recall(cm: ConfusionMatrix) -> np.ndarray:
    row_sums = np.maximum(cm.counts.sum(axis=1), 1)
    return np.diag(cm.counts) / row_sums


@dataclass
class ProtocolReport:
    spec: ClipSpec
    reps: int
    seed: int
    war_per_rep: list[float] = field(default_factory=list)
    uar_per_rep: list[float] = field(default_factory=list)
    class_recall: np.ndarray | None = None
    total_cm: ConfusionMatrix | None = None

    @property
    def war_mean(self) -> float:
        return float(np.mean(self.war_per_rep))

    @property
    def war_std(self) -> float:
        return float(np.std(self.war_per_rep))

    @property
    def uar_mean(self) -> float:
        return float(np.mean(self.uar_per_rep))

    @property
    def uar_std(self) -> float:
        return float(np.std(self.uar_per_rep))

    def machine_lines(self) -> list[str]:
        lines = [
            f"protocol={self.spec}",
            f"clip_frames={self.spec.duration_frames}",
            f"reps={self.reps}",
            f"war_mean={self.war_mean:.6f}",
            f"war_std={self.war_std:.6f}",
            f"uar_mean={self.uar_mean:.6f}",
            f"uar_std={self.uar_std:.6f}",
        ]
        if self.class_recall is not None:
            lines.extend(f"class{i}_recall={v:.6f}" for i, v in enumerate(self.class_recall))
        return lines

    def table(self, labels: list[str] | None = None) -> str:
        rows = [f"protocol {self.spec} ({self.spec.duration_frames} frames/clip), {self.reps} repetitions"]
        rows.append(f"  WAR {100 * self.war_mean:6.2f}% +- {100 * self.war_std:.2f}")
        rows.append(f"  UAR {100 * self.uar_mean:6.2f}% +- {100 * self.uar_std:.2f}")
        if self.class_recall is not None:
            for i, v in enumerate(self.class_recall):
                name = labels[i] if labels and i < len(labels) else f"class{i}"
                rows.append(f"  {name:>16s} {100 * v:6.2f}%")
        return "\n".join(rows)


def _predict_sequences(net: StateNet, sequences, spec: ClipSpec, gen, batch_size: int = 32):
    cm = ConfusionMatrix.empty()
    clips = [sample_clip(seq, spec, gen=gen) for seq in sequences]
    for lo in range(0, len(clips), batch_size):
        batch = clips[lo : lo + batch_size]
        grays, eframes, labels = prepare_batch(batch, net.cfg)
        preds = net.predict(grays, eframes)
        for truth, pred in zip(labels, preds):
            cm.add(int(truth), int(pred))
    return cm


def evaluate_protocol(
    net: StateNet,
    sequences: list[Sequence],
    spec: ClipSpec,
    reps: int = 20,
    seed: int = 0,
    threads: int = 1,
) -> ProtocolReport:
    """Random-start evaluation: every repetition draws one clip per test
    sequence from its own RNG stream split(seed, rep), so adding repetitions
    never perturbs earlier ones and repetitions can run in parallel."""
    if not sequences:
        raise DataError("no sequences to evaluate")
    if spec.x != net.cfg.n_steps:
        raise DataError(f"protocol {spec} uses {spec.x} event frames but the model expects {net.cfg.n_steps}")
    report = ProtocolReport(spec=spec, reps=reps, seed=seed)

    def one_rep(r: int) -> ConfusionMatrix:
        gen = rng.generator(seed, rng.tag("protocol.rep"), r)
        return _predict_sequences(net, sequences, spec, gen)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            cms = list(pool.map(one_rep, range(reps)))
    else:
        cms = [one_rep(r) for r in range(reps)]
    total = ConfusionMatrix.empty()
    for cm in cms:
        report.war_per_rep.append(war(cm))
        report.uar_per_rep.append(uar(cm))
        total.merge(cm)
    report.total_cm = total
    report.class_recall = per_class_recall(total)
    return report
