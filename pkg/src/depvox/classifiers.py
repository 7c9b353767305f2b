"""Depression classifiers over windows of contiguous segment vectors.

Architectures (layer sizes fixed by default, overridable through ArchSpec):

* ``dnn_d``  context 1; FC 128 -> 64 -> 128 (ReLU) -> 2
* ``cnn_d``  (3|4|5, D) x 50 full-width convs -> ReLU -> conv k=4 x 50 -> ReLU,
             flattened and concatenated -> FC 100 -> 2
* ``lstm_d`` 2 x LSTM(128), last step -> FC 100 -> 2
* ``ce_dd`` / ``ce_dc`` / ``ce_dl``: two branches (speaker embeddings and
  functionals), each block -> FC 100 -> ReLU, merged by ``combine_mode``,
  then a 2-way output layer.

All models emit log-probabilities; training minimises class-weighted NLL.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .nn import (Adam, Dropout, FullWidthConv2d, Conv1d, Linear, LogSoftmax, Module, ReLU, StackedLSTM,
                 load_checkpoint, save_checkpoint, weighted_nll)
from .rng import stream

log = logging.getLogger(__name__)

ARCHS = ("dnn_d", "cnn_d", "lstm_d", "ce_dd", "ce_dc", "ce_dl")
COMBINE_MODES = ("sum", "hadamard", "concat", "average", "scalar_dot")


class ConfigurationError(ValueError):
    pass


class AlignmentError(ValueError):
    pass


# --------------------------------------------------------------------------
# samples

@dataclass
class VectorTable:
    """Segment vectors of one kind, per recording, in segment order."""

    kind: str
    vectors: dict[str, np.ndarray]
    labels: dict[str, int]
    indices: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        for rid, v in self.vectors.items():
            self.indices.setdefault(rid, np.arange(len(v)))

    @property
    def dim(self) -> int:
        return next(iter(self.vectors.values())).shape[1]

    def subset(self, ids) -> "VectorTable":
        ids = [i for i in ids if i in self.vectors]
        return VectorTable(self.kind, {i: self.vectors[i] for i in ids}, {i: self.labels[i] for i in ids},
                           {i: self.indices[i] for i in ids})

    def n_segments(self, rid: str) -> int:
        return len(self.vectors[rid])


@dataclass
class ContextSample:
    window: np.ndarray
    label: int
    recording_id: str
    start_index: int


@dataclass
class FusionSample:
    window_a: np.ndarray
    window_b: np.ndarray
    label: int
    recording_id: str
    start_index: int


@dataclass
class WindowReport:
    skipped: list[tuple[str, int]] = field(default_factory=list)   # (recording, n_segments)
    n_windows: int = 0


def _runs(indices: np.ndarray) -> list[tuple[int, int]]:
    """Maximal runs of consecutive segment indices as (row_start, row_stop)."""
    runs, start = [], 0
    for r in range(1, len(indices) + 1):
        if r == len(indices) or indices[r] != indices[r - 1] + 1:
            runs.append((start, r))
            start = r
    return runs


def _window_starts(table: VectorTable, rid: str, context: int, stride: int) -> list[int]:
    starts = []
    for a, b in _runs(np.asarray(table.indices[rid])):
        starts.extend(range(a, b - context + 1, stride))
    return starts


def make_context_samples(table: VectorTable, context: int, stride: int | None = None):
    """Non-overlapping (by default) windows of ``context`` consecutive segments.

    Recordings with fewer than ``context`` segments are skipped and reported.
    """
    if context <= 0:
        raise ValueError(f"context must be >= 1, got {context}")
    stride = stride or context
    samples, report = [], WindowReport()
    for rid in table.vectors:
        starts = _window_starts(table, rid, context, stride)
        if not starts:
            report.skipped.append((rid, table.n_segments(rid)))
            continue
        v, idx = table.vectors[rid], table.indices[rid]
        samples.extend(ContextSample(v[s:s + context], table.labels[rid], rid, int(idx[s])) for s in starts)
    report.n_windows = len(samples)
    return samples, report


def make_fusion_samples(table_a: VectorTable, table_b: VectorTable, context: int, stride: int | None = None):
    """Index-aligned windows from two tables (speaker embeddings first)."""
    if context <= 0:
        raise ValueError(f"context must be >= 1, got {context}")
    stride = stride or context
    samples, report = [], WindowReport()
    for rid in table_a.vectors:
        if rid not in table_b.vectors or not np.array_equal(table_a.indices[rid], table_b.indices[rid]):
            raise AlignmentError(f"{rid}: segment indices differ between {table_a.kind} and {table_b.kind}")
        starts = _window_starts(table_a, rid, context, stride)
        if not starts:
            report.skipped.append((rid, table_a.n_segments(rid)))
            continue
        va, vb, idx = table_a.vectors[rid], table_b.vectors[rid], table_a.indices[rid]
        samples.extend(FusionSample(va[s:s + context], vb[s:s + context], table_a.labels[rid], rid, int(idx[s]))
                       for s in starts)
    report.n_windows = len(samples)
    return samples, report


def stack_inputs(samples):
    if isinstance(samples[0], FusionSample):
        return (np.stack([s.window_a for s in samples]), np.stack([s.window_b for s in samples]))
    return np.stack([s.window for s in samples])


# --------------------------------------------------------------------------
# architecture

@dataclass
class ArchSpec:
    kind: str
    input_dim: int
    context: int
    input_dim_b: int | None = None
    combine_mode: str = "hadamard"
    dnn_units: tuple[int, ...] = (128, 64, 128)
    cnn_kernels: tuple[int, ...] = (3, 4, 5)
    cnn_channels: int = 50
    cnn_conv2_kernel: int = 4
    lstm_hidden: int = 128
    lstm_layers: int = 2
    fc_units: int = 100
    dropout_cnn: float = 0.3
    dropout_lstm: float = 0.4
    dropout_fc: float = 0.3
    n_classes: int = 2

    def __post_init__(self):
        if self.kind not in ARCHS:
            raise ConfigurationError(f"unknown architecture {self.kind!r}")
        if self.combine_mode not in COMBINE_MODES:
            raise ConfigurationError(f"unknown combine mode {self.combine_mode!r}")
        if self.context < 1:
            raise ConfigurationError(f"context must be >= 1, got {self.context}")
        if self.kind in ("dnn_d", "ce_dd") and self.context != 1:
            raise ConfigurationError(f"{self.kind} consumes single segments (context 1), got context {self.context}")
        if self.kind.startswith("ce_") and self.input_dim_b is None:
            raise ConfigurationError(f"{self.kind} needs input_dim_b for its second branch")
        self.dnn_units = tuple(self.dnn_units)
        self.cnn_kernels = tuple(self.cnn_kernels)

    @property
    def cnn_min_length(self) -> int:
        """Shortest time axis for which every branch yields >= 1 output frame."""
        return max(self.cnn_kernels) + self.cnn_conv2_kernel - 1

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dnn_units"] = list(self.dnn_units)
        d["cnn_kernels"] = list(self.cnn_kernels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ArchSpec":
        return cls(**d)


class DnnBlock(Module):
    def __init__(self, dim: int, units, dropout: float, rng):
        super().__init__()
        sizes = [dim, *units]
        self.fcs = [self.add_child(f"fc{i}", Linear(sizes[i], sizes[i + 1], rng)) for i in range(len(units))]
        self.acts = [ReLU() for _ in units]
        self.drops = [Dropout(dropout) for _ in units]
        self.out_dim = sizes[-1]

    def forward(self, x, train=False, rng=None):
        self._shape = x.shape
        h = x.reshape(x.shape[0], -1)
        for fc, act, dr in zip(self.fcs, self.acts, self.drops):
            h = dr.forward(act.forward(fc.forward(h)), train, rng)
        return h

    def backward(self, dh):
        for fc, act, dr in reversed(list(zip(self.fcs, self.acts, self.drops))):
            dh = fc.backward(act.backward(dr.backward(dh)))
        return dh.reshape(self._shape)


class CnnBlock(Module):
    """Parallel full-width conv branches, each followed by a length-4 conv.

    Inputs shorter than ``min_length`` are zero-padded (centred) on the time axis.
    """

    def __init__(self, dim: int, context: int, spec: ArchSpec, rng):
        super().__init__()
        self.min_length = spec.cnn_min_length
        self.length = max(context, self.min_length)
        C = spec.cnn_channels
        self.conv1 = [self.add_child(f"conv1_k{k}", FullWidthConv2d(k, dim, C, rng)) for k in spec.cnn_kernels]
        self.conv2 = [self.add_child(f"conv2_k{k}", Conv1d(C, C, spec.cnn_conv2_kernel, rng))
                      for k in spec.cnn_kernels]
        self.acts = [(ReLU(), ReLU()) for _ in spec.cnn_kernels]
        self.drop = Dropout(spec.dropout_cnn)
        self.branch_lengths = [self.length - k + 1 - spec.cnn_conv2_kernel + 1 for k in spec.cnn_kernels]
        self.out_dim = C * sum(self.branch_lengths)
        self.padded_last = False

    def pad(self, x):
        T = x.shape[1]
        if T >= self.min_length:
            self.padded_last = False
            return x
        self.padded_last = True
        before = (self.min_length - T) // 2
        out = np.zeros((x.shape[0], self.min_length, x.shape[2]), dtype=x.dtype)
        out[:, before:before + T] = x
        self._pad = (before, T)
        return out

    def forward(self, x, train=False, rng=None):
        xp = self.pad(x)
        outs = []
        for c1, c2, (a1, a2) in zip(self.conv1, self.conv2, self.acts):
            h = a2.forward(c2.forward(a1.forward(c1.forward(xp))))
            outs.append(h.reshape(h.shape[0], -1))
        self._sizes = [o.shape[1] for o in outs]
        return self.drop.forward(np.concatenate(outs, axis=1), train, rng)

    def backward(self, dy):
        dy = self.drop.backward(dy)
        dx = None
        off = 0
        for c1, c2, (a1, a2), n in zip(self.conv1, self.conv2, self.acts, self._sizes):
            d = dy[:, off:off + n].reshape(dy.shape[0], -1, c2.n_out)
            off += n
            g = c1.backward(a1.backward(c2.backward(a2.backward(d))))
            dx = g if dx is None else dx + g
        if self.padded_last:
            before, T = self._pad
            dx = dx[:, before:before + T]
        return dx


class LstmBlock(Module):
    def __init__(self, dim: int, spec: ArchSpec, rng):
        super().__init__()
        self.lstm = self.add_child("lstm", StackedLSTM(dim, spec.lstm_hidden, spec.lstm_layers, rng))
        self.drop = Dropout(spec.dropout_lstm)
        self.out_dim = spec.lstm_hidden

    def forward(self, x, train=False, rng=None):
        if x.shape[1] == 0:
            raise ValueError("LSTM block: empty window")
        h = self.lstm.forward(x)
        self._T = x.shape[1]
        return self.drop.forward(h[:, -1], train, rng)

    def backward(self, dy):
        dy = self.drop.backward(dy)
        dh = np.zeros((dy.shape[0], self._T, dy.shape[1]))
        dh[:, -1] = dy
        return self.lstm.backward(dh)


def _make_block(kind: str, dim: int, spec: ArchSpec, rng) -> Module:
    if kind == "dnn":
        return DnnBlock(dim, spec.dnn_units, spec.dropout_fc, rng)
    if kind == "cnn":
        return CnnBlock(dim, spec.context, spec, rng)
    return LstmBlock(dim, spec, rng)


class FcHead(Module):
    """FC(units, ReLU) -> dropout."""

    def __init__(self, n_in: int, units: int, dropout: float, rng):
        super().__init__()
        self.fc = self.add_child("fc", Linear(n_in, units, rng))
        self.act = ReLU()
        self.drop = Dropout(dropout)

    def forward(self, x, train=False, rng=None):
        return self.drop.forward(self.act.forward(self.fc.forward(x)), train, rng)

    def backward(self, dy):
        return self.fc.backward(self.act.backward(self.drop.backward(dy)))


class SingleInputClassifier(Module):
    def __init__(self, spec: ArchSpec, rng):
        super().__init__()
        self.spec = spec
        block_kind = {"dnn_d": "dnn", "cnn_d": "cnn", "lstm_d": "lstm"}[spec.kind]
        self.block = self.add_child("block", _make_block(block_kind, spec.input_dim, spec, rng))
        n = self.block.out_dim
        self.head = None
        if block_kind != "dnn":
            self.head = self.add_child("head", FcHead(n, spec.fc_units, spec.dropout_fc, rng))
            n = spec.fc_units
        self.out = self.add_child("out", Linear(n, spec.n_classes, rng))
        self.logsm = LogSoftmax()

    def forward(self, x, train=False, rng=None):
        if x.shape[1] != self.spec.context and self.spec.kind == "dnn_d":
            raise ConfigurationError(f"dnn_d consumes context 1, got {x.shape[1]}")
        h = self.block.forward(x, train, rng)
        if self.head is not None:
            h = self.head.forward(h, train, rng)
        return self.logsm.forward(self.out.forward(h))

    def backward(self, dlogp):
        d = self.out.backward(self.logsm.backward(dlogp))
        if self.head is not None:
            d = self.head.backward(d)
        return self.block.backward(d)


class Combiner:
    def __init__(self, mode: str):
        self.mode = mode

    def out_dim(self, n: int) -> int:
        return {"concat": 2 * n, "scalar_dot": 1}.get(self.mode, n)

    def forward(self, a, b):
        self._a, self._b = a, b
        if self.mode == "sum":
            return a + b
        if self.mode == "average":
            return 0.5 * (a + b)
        if self.mode == "hadamard":
            return a * b
        if self.mode == "concat":
            return np.concatenate([a, b], axis=1)
        return (a * b).sum(axis=1, keepdims=True)

    def backward(self, dc):
        a, b = self._a, self._b
        if self.mode == "sum":
            return dc, dc
        if self.mode == "average":
            return 0.5 * dc, 0.5 * dc
        if self.mode == "hadamard":
            return dc * b, dc * a
        if self.mode == "concat":
            n = a.shape[1]
            return dc[:, :n], dc[:, n:]
        return dc * b, dc * a


class FusionClassifier(Module):
    """Two-branch CE_D model; branch ``a`` takes speaker embeddings."""

    def __init__(self, spec: ArchSpec, rng):
        super().__init__()
        self.spec = spec
        block_kind = {"ce_dd": "dnn", "ce_dc": "cnn", "ce_dl": "lstm"}[spec.kind]
        self.block_a = self.add_child("block_a", _make_block(block_kind, spec.input_dim, spec, rng))
        self.block_b = self.add_child("block_b", _make_block(block_kind, spec.input_dim_b, spec, rng))
        self.head_a = self.add_child("head_a", FcHead(self.block_a.out_dim, spec.fc_units, spec.dropout_fc, rng))
        self.head_b = self.add_child("head_b", FcHead(self.block_b.out_dim, spec.fc_units, spec.dropout_fc, rng))
        self.combiner = Combiner(spec.combine_mode)
        self.out = self.add_child("out", Linear(self.combiner.out_dim(spec.fc_units), spec.n_classes, rng))
        self.logsm = LogSoftmax()

    def branch_outputs(self, x, train=False, rng=None):
        xa, xb = x
        if xa.shape[:2] != xb.shape[:2]:
            raise AlignmentError(f"fusion windows misaligned: {xa.shape[:2]} vs {xb.shape[:2]}")
        a = self.head_a.forward(self.block_a.forward(xa, train, rng), train, rng)
        b = self.head_b.forward(self.block_b.forward(xb, train, rng), train, rng)
        return a, b

    def forward(self, x, train=False, rng=None):
        a, b = self.branch_outputs(x, train, rng)
        return self.logsm.forward(self.out.forward(self.combiner.forward(a, b)))

    def backward(self, dlogp):
        da, db = self.combiner.backward(self.out.backward(self.logsm.backward(dlogp)))
        return (self.block_a.backward(self.head_a.backward(da)),
                self.block_b.backward(self.head_b.backward(db)))


def build_model(spec: ArchSpec, rng: np.random.Generator) -> Module:
    return FusionClassifier(spec, rng) if spec.kind.startswith("ce_") else SingleInputClassifier(spec, rng)


# --------------------------------------------------------------------------
# training

@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 128
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.99
    seed: int = 0
    standardize: bool = True
    lr_decay: float = 1.0       # per-epoch multiplier on lr; 1.0 keeps it constant


def class_weights(labels, n_classes: int = 2) -> np.ndarray:
    """Inverse-frequency weights ``N / (K * N_c)``."""
    labels = np.asarray(labels, dtype=np.int64)
    counts = np.bincount(labels, minlength=n_classes)
    if np.any(counts == 0):
        raise ValueError(f"every class must appear in the training set, counts={counts.tolist()}")
    return len(labels) / (n_classes * counts)


class Standardizer:
    """Per-dimension z-scoring fitted on training windows."""

    def __init__(self, mean: np.ndarray, std: np.ndarray):
        self.mean, self.std = mean, std

    @classmethod
    def fit(cls, x: np.ndarray) -> "Standardizer":
        flat = x.reshape(-1, x.shape[-1])
        std = flat.std(axis=0)
        return cls(flat.mean(axis=0), np.where(std > 1e-8, std, 1.0))

    @classmethod
    def identity(cls, dim: int) -> "Standardizer":
        return cls(np.zeros(dim), np.ones(dim))

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return (x - self.mean) / self.std


@dataclass
class TrainedClassifier:
    model: Module
    spec: ArchSpec
    scalers: list[Standardizer]
    config: TrainConfig
    best_epoch: int = 0
    curves: list[dict] = field(default_factory=list)

    def prepare(self, inputs):
        if isinstance(inputs, tuple):
            return tuple(s(x) for s, x in zip(self.scalers, inputs))
        return self.scalers[0](inputs)

    def log_probs(self, samples, batch_size: int = 256) -> np.ndarray:
        out = []
        for s in range(0, len(samples), batch_size):
            out.append(self.model.forward(self.prepare(stack_inputs(samples[s:s + batch_size])), train=False))
        return np.concatenate(out)

    def predict(self, samples) -> np.ndarray:
        return self.log_probs(samples).argmax(axis=1)

    def save(self, path, meta: dict | None = None) -> None:
        state = {f"model.{k}": v for k, v in self.model.state_dict().items()}
        for i, sc in enumerate(self.scalers):
            state[f"scaler{i}.mean"] = sc.mean
            state[f"scaler{i}.std"] = sc.std
        save_checkpoint(path, state, {"model": "classifier", **self.spec.to_dict()},
                        seeds={"root": self.config.seed},
                        meta={"train_config": asdict(self.config), "best_epoch": self.best_epoch, **(meta or {})})

    @classmethod
    def load(cls, path) -> "TrainedClassifier":
        tensors, header = load_checkpoint(path)
        arch = dict(header["arch"])
        if arch.pop("model", None) != "classifier":
            raise ValueError(f"{path}: not a classifier checkpoint")
        spec = ArchSpec.from_dict(arch)
        model = build_model(spec, np.random.default_rng(0))
        model.load_state_dict({k[6:]: v for k, v in tensors.items() if k.startswith("model.")})
        n = 2 if spec.kind.startswith("ce_") else 1
        scalers = [Standardizer(tensors[f"scaler{i}.mean"], tensors[f"scaler{i}.std"]) for i in range(n)]
        return cls(model, spec, scalers, TrainConfig(**header["meta"]["train_config"]), header["meta"]["best_epoch"])


def _balanced_accuracy(pred: np.ndarray, y: np.ndarray) -> float:
    recalls = [float((pred[y == c] == c).mean()) for c in (0, 1) if np.any(y == c)]
    return float(np.mean(recalls))


def _index(inputs, idx):
    return tuple(x[idx] for x in inputs) if isinstance(inputs, tuple) else inputs[idx]


def train_classifier(train_samples, valid_samples, spec: ArchSpec, cfg: TrainConfig = TrainConfig()):
    """Adam on class-weighted NLL; keeps the epoch with the best validation accuracy.

    Validation accuracy is balanced (mean per-class recall) over windows.
    """
    if not train_samples or not valid_samples:
        raise ValueError("train and validation sample lists must be nonempty")
    y = np.array([s.label for s in train_samples])
    weights = class_weights(y, spec.n_classes)
    yv = np.array([s.label for s in valid_samples])

    model = build_model(spec, stream(cfg.seed, "init"))
    raw = stack_inputs(train_samples)
    if cfg.standardize:
        scalers = [Standardizer.fit(x) for x in (raw if isinstance(raw, tuple) else (raw,))]
    else:
        scalers = [Standardizer.identity(x.shape[-1]) for x in (raw if isinstance(raw, tuple) else (raw,))]
    trained = TrainedClassifier(model, spec, scalers, cfg)
    X = trained.prepare(raw)
    Xv = trained.prepare(stack_inputs(valid_samples))

    opt = Adam(model.named_parameters(), lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2)
    shuffle_rng, drop_rng = stream(cfg.seed, "shuffle"), stream(cfg.seed, "dropout")
    best = (-1.0, np.inf)
    best_state = None
    for epoch in range(1, cfg.epochs + 1):
        order = shuffle_rng.permutation(len(y))
        total = 0.0
        for s in range(0, len(y), cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            model.zero_grad()
            logp = model.forward(_index(X, idx), train=True, rng=drop_rng)
            loss, dlogp = weighted_nll(logp, y[idx], weights)
            model.backward(dlogp)
            opt.step()
            total += loss * len(idx)
        logpv = model.forward(Xv, train=False)
        vloss, _ = weighted_nll(logpv, yv, weights)
        vacc = _balanced_accuracy(logpv.argmax(axis=1), yv)
        trained.curves.append({"epoch": epoch, "train_loss": total / len(y), "valid_loss": vloss, "valid_acc": vacc})
        if (vacc, -vloss) > (best[0], -best[1]):
            best = (vacc, vloss)
            best_state = {k: v.copy() for k, v in model.state_dict().items()}
            trained.best_epoch = epoch
        opt.lr *= cfg.lr_decay
    model.load_state_dict(best_state)
    return trained


def write_curves_csv(curves: list[dict], path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "valid_loss", "valid_acc"])
        for c in curves:
            w.writerow([c["epoch"], f"{c['train_loss']:.8f}", f"{c['valid_loss']:.8f}", f"{c['valid_acc']:.6f}"])


def with_context(spec: ArchSpec, context: int) -> ArchSpec:
    return replace(spec, context=context)
