"""Recording-level decisions, metrics, EER and the context sweep."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .classifiers import (ArchSpec, TrainConfig, VectorTable, make_context_samples, make_fusion_samples,
                          train_classifier)
from .corpus import DEPRESSED, HEALTHY
from .nn import Adam, Linear, LogSoftmax, weighted_nll
from .rng import stream

log = logging.getLogger(__name__)


def majority_vote(decisions) -> int:
    """Mode of binary window decisions; an exact tie goes to depressed."""
    decisions = list(decisions)
    if not decisions:
        raise ValueError("majority_vote needs at least one decision")
    n_dep = sum(1 for d in decisions if d == DEPRESSED)
    return DEPRESSED if 2 * n_dep >= len(decisions) else HEALTHY


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    fp: int
    tn: int
    fn: int

    @classmethod
    def from_decisions(cls, decisions, labels) -> "ConfusionMatrix":
        d = np.asarray(decisions)
        y = np.asarray(labels)
        return cls(int(((d == 1) & (y == 1)).sum()), int(((d == 1) & (y == 0)).sum()),
                   int(((d == 0) & (y == 0)).sum()), int(((d == 0) & (y == 1)).sum()))

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


def _f1(tp: int, fp: int, fn: int) -> float:
    prec = tp / (tp + fp) if tp + fp else 0.0
    rec = tp / (tp + fn) if tp + fn else 0.0
    return 2 * prec * rec / (prec + rec) if prec + rec else 0.0


@dataclass(frozen=True)
class MetricReport:
    f1_depressed: float
    f1_healthy: float
    weighted_accuracy: float
    accuracy: float
    n_recordings: int
    confusion: ConfusionMatrix

    def row(self) -> dict:
        return {"f1_d": self.f1_depressed, "f1_h": self.f1_healthy, "acc": self.weighted_accuracy,
                "plain_acc": self.accuracy, "n_recordings": self.n_recordings}


def metrics_from_confusion(cm: ConfusionMatrix) -> MetricReport:
    rec_d = cm.tp / (cm.tp + cm.fn) if cm.tp + cm.fn else 0.0
    rec_h = cm.tn / (cm.tn + cm.fp) if cm.tn + cm.fp else 0.0
    return MetricReport(
        f1_depressed=_f1(cm.tp, cm.fp, cm.fn),
        f1_healthy=_f1(cm.tn, cm.fn, cm.fp),
        weighted_accuracy=(rec_d + rec_h) / 2,
        accuracy=(cm.tp + cm.tn) / cm.total if cm.total else 0.0,
        n_recordings=cm.total,
        confusion=cm,
    )


def compute_metrics(decisions, labels) -> MetricReport:
    """Per-class F1 and weighted (balanced) accuracy, depressed = positive."""
    if len(decisions) != len(labels):
        raise ValueError(f"length mismatch: {len(decisions)} decisions vs {len(labels)} labels")
    if len(decisions) == 0:
        raise ValueError("no decisions to score")
    return metrics_from_confusion(ConfusionMatrix.from_decisions(decisions, labels))


def write_metrics_csv(report: MetricReport, path, extra: dict | None = None) -> None:
    row = {**(extra or {}), **report.row()}
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(row))
        w.writerow([f"{v:.6f}" if isinstance(v, float) else v for v in row.values()])


# --------------------------------------------------------------------------
# EER

def error_rates(genuine, impostor):
    """FAR and FRR at every pooled score threshold plus +inf (accept if score >= t)."""
    g = np.sort(np.asarray(genuine, dtype=np.float64))
    imp = np.sort(np.asarray(impostor, dtype=np.float64))
    thr = np.append(np.unique(np.concatenate([g, imp])), np.inf)
    far = 1.0 - np.searchsorted(imp, thr, side="left") / len(imp)
    frr = np.searchsorted(g, thr, side="left") / len(g)
    return thr, far, frr


def compute_eer(genuine, impostor) -> float:
    """Equal error rate: where FAR and FRR cross as the threshold rises.

    Between adjacent thresholds the two curves are interpolated linearly.
    """
    if len(genuine) == 0 or len(impostor) == 0:
        raise ValueError("EER needs nonempty genuine and impostor scores")
    _, far, frr = error_rates(genuine, impostor)
    diff = far - frr
    k = int(np.argmax(diff <= 0))
    if diff[k] == 0 or k == 0:
        return float(far[k])
    a = diff[k - 1] / (diff[k - 1] - diff[k])
    return float(far[k - 1] + a * (far[k] - far[k - 1]))


def write_det_csv(genuine, impostor, path) -> None:
    thr, far, frr = error_rates(genuine, impostor)
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["threshold", "far", "frr"])
        for t, a, r in zip(thr, far, frr):
            w.writerow([t, f"{a:.6f}", f"{r:.6f}"])


@dataclass
class ProbeReport:
    eer: float
    n_speakers: int
    n_train: int
    n_test: int
    scaled_speakers: list[str] = field(default_factory=list)
    genuine: np.ndarray | None = None
    impostor: np.ndarray | None = None


def speaker_probe(embeddings: np.ndarray, speakers, train_per_spk: int = 25, test_per_spk: int = 15,
                  seed: int = 0, epochs: int = 300, lr: float = 0.01) -> ProbeReport:
    """Multinomial logistic regression speaker classifier scored as verification.

    Each test segment yields one genuine trial (posterior of its own speaker)
    and ``n_speakers - 1`` impostor trials (posteriors of the others).
    Speakers with fewer than ``train + test`` segments get proportionally
    scaled counts and are listed in the report.
    """
    speakers = np.asarray(speakers)
    names = sorted(set(speakers.tolist()))
    if len(names) < 2:
        raise ValueError("speaker probe needs at least 2 speakers")
    rng = stream(seed, "probe")
    need = train_per_spk + test_per_spk
    tr_idx, te_idx, scaled = [], [], []
    for spk in names:
        idx = rng.permutation(np.flatnonzero(speakers == spk))
        if len(idx) >= need:
            n_tr, n_te = train_per_spk, test_per_spk
        else:
            n_tr = max(1, int(round(len(idx) * train_per_spk / need)))
            n_te = len(idx) - n_tr
            scaled.append(spk)
        tr_idx.extend(idx[:n_tr])
        te_idx.extend(idx[n_tr:n_tr + n_te])
    if not te_idx:
        raise ValueError("speaker probe: no test segments")
    cls = {s: i for i, s in enumerate(names)}
    y = np.array([cls[s] for s in speakers])
    X = np.asarray(embeddings, dtype=np.float64)
    tr_idx, te_idx = np.array(tr_idx), np.array(te_idx)

    fc = Linear(X.shape[1], len(names), stream(seed, "probe_init"))
    fc.params["W"][...] = 0.0
    logsm = LogSoftmax()
    opt = Adam(fc.named_parameters(), lr=lr)
    for _ in range(epochs):
        fc.zero_grad()
        logp = logsm.forward(fc.forward(X[tr_idx]))
        _, d = weighted_nll(logp, y[tr_idx])
        fc.backward(logsm.backward(d))
        opt.step()
    post = np.exp(logsm.forward(fc.forward(X[te_idx])))
    own = np.zeros_like(post, dtype=bool)
    own[np.arange(len(te_idx)), y[te_idx]] = True
    genuine, impostor = post[own], post[~own]
    return ProbeReport(compute_eer(genuine, impostor), len(names), len(tr_idx), len(te_idx), scaled,
                       genuine, impostor)


# --------------------------------------------------------------------------
# recording-level evaluation

Tables = "VectorTable | tuple[VectorTable, VectorTable]"


def windows_for(tables, context: int):
    if isinstance(tables, tuple):
        return make_fusion_samples(tables[0], tables[1], context)
    return make_context_samples(tables, context)


def _first(tables) -> VectorTable:
    return tables[0] if isinstance(tables, tuple) else tables


@dataclass
class RecordingEvaluation:
    report: MetricReport
    decisions: dict[str, int]
    labels: dict[str, int]
    excluded: list[tuple[str, int]]


def evaluate_recordings(trained, tables, context: int | None = None) -> RecordingEvaluation:
    """Window each recording, classify windows, majority-vote per recording.

    Recordings with fewer than ``context`` segments are excluded and listed.
    """
    context = trained.spec.context if context is None else context
    samples, wrep = windows_for(tables, context)
    if not samples:
        raise ValueError(f"no recording has >= {context} segments; nothing to evaluate")
    pred = trained.predict(samples)
    per_rec: dict[str, list[int]] = {}
    for s, p in zip(samples, pred):
        per_rec.setdefault(s.recording_id, []).append(int(p))
    labels = _first(tables).labels
    decisions = {rid: majority_vote(v) for rid, v in per_rec.items()}
    ids = list(decisions)
    report = compute_metrics([decisions[r] for r in ids], [labels[r] for r in ids])
    return RecordingEvaluation(report, decisions, {r: labels[r] for r in ids}, wrep.skipped)


@dataclass
class SweepRow:
    context: int
    f1_d: float
    f1_h: float
    acc: float
    plain_acc: float
    n_seeds: int


@dataclass
class SweepResult:
    arch: str
    feature_kind: str
    rows: list[SweepRow]

    def accuracy(self, context: int) -> float:
        return next(r.acc for r in self.rows if r.context == context)

    def write_csv(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["arch", "features", "context", "f1_d", "f1_h", "acc", "plain_acc", "n_seeds"])
            for r in self.rows:
                w.writerow([self.arch, self.feature_kind, r.context, f"{r.f1_d:.6f}", f"{r.f1_h:.6f}",
                            f"{r.acc:.6f}", f"{r.plain_acc:.6f}", r.n_seeds])


def shortest_recording(tables) -> int:
    t = _first(tables)
    return min(t.n_segments(r) for r in t.vectors)


def validate_contexts(contexts, test_tables) -> list[int]:
    contexts = [int(c) for c in contexts]
    if not contexts:
        raise ValueError("no contexts given")
    if any(c < 1 for c in contexts):
        raise ValueError(f"contexts must be >= 1: {contexts}")
    if len(set(contexts)) != len(contexts):
        raise ValueError(f"duplicate context in {contexts}")
    if contexts != sorted(contexts):
        raise ValueError(f"contexts must be strictly increasing: {contexts}")
    limit = shortest_recording(test_tables)
    too_long = [c for c in contexts if c > limit]
    if too_long:
        raise ValueError(f"contexts {too_long} exceed the shortest test recording ({limit} segments)")
    return contexts


def train_and_evaluate(spec: ArchSpec, train, valid, test, cfg: TrainConfig):
    tr, _ = windows_for(train, spec.context)
    va, _ = windows_for(valid, spec.context)
    trained = train_classifier(tr, va, spec, cfg)
    return trained, evaluate_recordings(trained, test)


def context_sweep(spec: ArchSpec, train, valid, test, contexts, seeds, cfg: TrainConfig = TrainConfig(),
                  feature_kind: str | None = None) -> SweepResult:
    """Train and test one model per (context, seed); metrics averaged over seeds.

    Contexts are validated against the shortest test recording before any
    training starts.
    """
    contexts = validate_contexts(contexts, test)
    seeds = list(seeds)
    if not seeds:
        raise ValueError("context_sweep needs at least one seed")
    kind = feature_kind or "+".join(t.kind for t in (train if isinstance(train, tuple) else (train,)))
    rows = []
    for ctx in contexts:
        reps = []
        for seed in seeds:
            _, ev = train_and_evaluate(replace(spec, context=ctx), train, valid, test, replace(cfg, seed=seed))
            reps.append(ev.report)
            log.info("sweep %s ctx=%d seed=%d acc=%.3f", spec.kind, ctx, seed, ev.report.weighted_accuracy)
        rows.append(SweepRow(ctx, float(np.mean([r.f1_depressed for r in reps])),
                             float(np.mean([r.f1_healthy for r in reps])),
                             float(np.mean([r.weighted_accuracy for r in reps])),
                             float(np.mean([r.accuracy for r in reps])), len(seeds)))
    return SweepResult(spec.kind, kind, rows)
