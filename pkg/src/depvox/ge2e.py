"""GE2E speaker encoder: LSTM stack -> FC -> L2-normalized d-vector.

Training uses batches of N speakers x M utterances (random 160-frame MFCC
crops) and the softmax GE2E loss

    S[j,i,k] = w * cos(e[j,i], c[k]) + b        (c[j] excludes e[j,i] when k == j)
    L = sum_{j,i} -S[j,i,j] + log sum_k exp(S[j,i,k])

Inference embeds whole segments (no cropping) with frozen parameters.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .features import GE2E_FRAMES, mfcc
from .nn import Adam, Linear, Module, StackedLSTM, clip_grad_norm, load_checkpoint, save_checkpoint
from .rng import stream

log = logging.getLogger(__name__)


class DegenerateEmbeddingError(ValueError):
    pass


class CapacityError(ValueError):
    pass


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class Ge2eConfig:
    n_mfcc: int = 40
    hidden: int = 256
    layers: int = 3
    emb_dim: int = 256
    n_speakers: int = 8
    n_utterances: int = 4
    crop_frames: int = 160
    steps: int = 500
    lr: float = 5e-4
    clip_norm: float = 3.0
    wb_grad_scale: float = 0.5
    w_init: float = 10.0
    b_init: float = -5.0
    seed: int = 0

    @classmethod
    def paper(cls, **kw) -> "Ge2eConfig":
        """Full-size batch (64 speakers x 10 utterances)."""
        return cls(n_speakers=64, n_utterances=10, **kw)

    @classmethod
    def toy(cls, **kw) -> "Ge2eConfig":
        """Narrow encoder for desk-scale runs; the d-vector stays 256-d."""
        base = dict(hidden=64, layers=3, lr=3e-3, steps=300)
        base.update(kw)
        return cls(**base)

    def arch(self) -> dict:
        return {"model": "ge2e", "n_mfcc": self.n_mfcc, "hidden": self.hidden, "layers": self.layers,
                "emb_dim": self.emb_dim}


def l2_normalize(f: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(f, axis=-1, keepdims=True)
    if np.any(norm < 1e-12):
        raise DegenerateEmbeddingError("final-layer output is the zero vector; normalization undefined")
    return f / norm


class SpeakerEncoder(Module):
    def __init__(self, cfg: Ge2eConfig, rng: np.random.Generator | None = None):
        super().__init__()
        rng = rng if rng is not None else stream(cfg.seed, "init")
        self.cfg = cfg
        self.lstm = self.add_child("lstm", StackedLSTM(cfg.n_mfcc, cfg.hidden, cfg.layers, rng))
        self.fc = self.add_child("fc", Linear(cfg.hidden, cfg.emb_dim, rng))
        # global MFCC normalization, fitted once on the training frames
        self.in_mean = np.zeros(cfg.n_mfcc)
        self.in_std = np.ones(cfg.n_mfcc)

    def fit_input_norm(self, frames: np.ndarray) -> None:
        std = frames.std(axis=0)
        self.in_mean, self.in_std = frames.mean(axis=0), np.where(std > 1e-8, std, 1.0)

    def project(self, frames: np.ndarray) -> np.ndarray:
        """Un-normalized final-layer output for (B, T, n_mfcc) input."""
        if frames.ndim == 2:
            frames = frames[None]
        if frames.shape[1] < 1:
            raise ValueError("embed: empty frame sequence")
        h = self.lstm.forward((frames - self.in_mean) / self.in_std)
        self._T = frames.shape[1]
        return self.fc.forward(h[:, -1])

    def forward(self, frames: np.ndarray) -> np.ndarray:
        self._f = self.project(frames)
        self._e = l2_normalize(self._f)
        return self._e

    def backward(self, de: np.ndarray) -> None:
        e, f = self._e, self._f
        norm = np.linalg.norm(f, axis=-1, keepdims=True)
        df = (de - e * (e * de).sum(-1, keepdims=True)) / norm
        dh_last = self.fc.backward(df)
        dh = np.zeros((dh_last.shape[0], self._T, dh_last.shape[1]))
        dh[:, -1] = dh_last
        self.lstm.backward(dh)


class Ge2eLossParams(Module):
    def __init__(self, w: float = 10.0, b: float = -5.0):
        super().__init__()
        self.add_param("w", np.array([w]))
        self.add_param("b", np.array([b]))

    def clamp(self, w_min: float = 1e-6) -> None:
        np.maximum(self.params["w"], w_min, out=self.params["w"])


def centroids(E: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Speaker centroids (N, D) and own-utterance-excluded centroids (N, M, D)."""
    N, M, _ = E.shape
    if M < 2:
        raise ValueError("GE2E needs M >= 2 utterances per speaker for the exclusion centroid")
    C = E.mean(axis=1)
    C_ex = (M * C[:, None, :] - E) / (M - 1)
    return C, C_ex


def similarity_matrix(E: np.ndarray):
    """Cosine similarities (N, M, N) plus the centroid table used for each entry."""
    N, M, D = E.shape
    C, C_ex = centroids(E)
    cent = np.broadcast_to(C[None, None], (N, M, N, D)).copy()
    idx = np.arange(N)
    cent[idx, :, idx] = C_ex
    en = np.linalg.norm(E, axis=-1)
    cn = np.linalg.norm(cent, axis=-1)
    cos = np.einsum("jid,jikd->jik", E, cent) / (en[..., None] * cn)
    return cos, cent, en, cn


def ge2e_loss(E: np.ndarray, w: float, b: float):
    """Softmax GE2E loss summed over all utterances.

    Returns ``(loss, dE, dw, db)``.
    """
    E = np.asarray(E, dtype=np.float64)
    N, M, D = E.shape
    cos, cent, en, cn = similarity_matrix(E)
    S = w * cos + b
    smax = S.max(axis=-1, keepdims=True)
    lse = smax[..., 0] + np.log(np.exp(S - smax).sum(axis=-1))
    idx = np.arange(N)
    target = S[idx, :, idx]                       # (N, M)
    loss = float((lse - target).sum())

    dS = np.exp(S - lse[..., None])
    dS[idx, :, idx] -= 1.0
    dw = float((dS * cos).sum())
    db = float(dS.sum())
    dcos = w * dS

    inv = 1.0 / (en[..., None] * cn)              # (N, M, N)
    dE = np.einsum("jik,jikd->jid", dcos * inv, cent)
    dE -= (dcos * cos).sum(-1)[..., None] * E / (en ** 2)[..., None]
    dcent = (dcos * inv)[..., None] * E[:, :, None, :] - (dcos * cos / cn ** 2)[..., None] * cent

    diag = dcent[idx, :, idx].copy()              # (N, M, D) grads wrt exclusion centroids
    dcent[idx, :, idx] = 0.0
    dC = dcent.sum(axis=(0, 1))                   # (N, D) grads wrt full centroids
    dE += dC[:, None, :] / M
    dE += (diag.sum(axis=1, keepdims=True) - diag) / (M - 1)
    return loss, dE, dw, db


# --------------------------------------------------------------------------
# batches

def build_batch(utterances: dict[str, list[np.ndarray]], n_speakers: int, n_utterances: int,
                rng: np.random.Generator | int, crop_frames: int = 160):
    """Sample an (N, M, crop, dims) batch of random contiguous MFCC crops.

    ``utterances`` maps speaker id -> list of (T, dims) MFCC matrices.
    Utterances shorter than ``crop_frames`` are ineligible.
    Returns ``(batch, picks)`` where picks lists (speaker, utterance index, start).
    """
    if n_speakers < 2 or n_utterances < 2:
        raise ValueError("GE2E batches need N >= 2 and M >= 2")
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    eligible = {spk: [i for i, u in enumerate(utts) if u.shape[0] >= crop_frames]
                for spk, utts in sorted(utterances.items())}
    pool = [spk for spk, idx in eligible.items() if len(idx) >= n_utterances]
    if len(pool) < n_speakers:
        raise CapacityError(f"need {n_speakers} speakers with >= {n_utterances} utterances of >= {crop_frames} "
                            f"frames, found {len(pool)} (short by {n_speakers - len(pool)})")
    dims = next(iter(utterances.values()))[0].shape[1]
    batch = np.empty((n_speakers, n_utterances, crop_frames, dims))
    picks = []
    for j, si in enumerate(rng.choice(len(pool), size=n_speakers, replace=False)):
        spk = pool[si]
        for i, ui in enumerate(rng.choice(eligible[spk], size=n_utterances, replace=False)):
            u = utterances[spk][ui]
            start = int(rng.integers(0, u.shape[0] - crop_frames + 1))
            batch[j, i] = u[start:start + crop_frames]
            picks.append((spk, int(ui), start))
    return batch, picks


def utterance_mfccs(manifest, segments_by_rec: dict[str, list]) -> dict[str, list[np.ndarray]]:
    """40-d MFCC matrices for every segment, grouped by speaker."""
    from .corpus import segment_audio

    out: dict[str, list[np.ndarray]] = {}
    recs = manifest.by_id()
    for rid, segs in segments_by_rec.items():
        rec = recs[rid]
        for seg in segs:
            out.setdefault(rec.speaker_id, []).append(mfcc(segment_audio(rec, seg), rec.sample_rate).data)
    return out


# --------------------------------------------------------------------------
# training

@dataclass
class Ge2eModel:
    encoder: SpeakerEncoder
    loss_params: Ge2eLossParams
    config: Ge2eConfig
    history: list[dict] = field(default_factory=list)

    def embed(self, frames: np.ndarray) -> np.ndarray:
        return self.encoder.forward(frames)

    def batch_loss(self, batch: np.ndarray) -> float:
        N, M, T, F = batch.shape
        E = self.encoder.forward(batch.reshape(N * M, T, F)).reshape(N, M, -1)
        w, b = float(self.loss_params.params["w"][0]), float(self.loss_params.params["b"][0])
        return ge2e_loss(E, w, b)[0]

    def save(self, path, meta: dict | None = None) -> None:
        state = {f"encoder.{k}": v for k, v in self.encoder.state_dict().items()}
        state.update({f"loss.{k}": v for k, v in self.loss_params.state_dict().items()})
        state.update({"norm.mean": self.encoder.in_mean, "norm.std": self.encoder.in_std})
        save_checkpoint(path, state, self.config.arch(), seeds={"root": self.config.seed},
                        meta={"config": asdict(self.config), **(meta or {})})

    @classmethod
    def load(cls, path) -> "Ge2eModel":
        tensors, header = load_checkpoint(path)
        if header["arch"].get("model") != "ge2e":
            raise ValueError(f"{path}: not a GE2E checkpoint")
        cfg = Ge2eConfig(**header["meta"]["config"])
        model = cls(SpeakerEncoder(cfg), Ge2eLossParams(cfg.w_init, cfg.b_init), cfg)
        model.encoder.load_state_dict({k[8:]: v for k, v in tensors.items() if k.startswith("encoder.")})
        model.loss_params.load_state_dict({k[5:]: v for k, v in tensors.items() if k.startswith("loss.")})
        model.encoder.in_mean, model.encoder.in_std = tensors["norm.mean"], tensors["norm.std"]
        return model


def init_model(cfg: Ge2eConfig) -> Ge2eModel:
    return Ge2eModel(SpeakerEncoder(cfg), Ge2eLossParams(cfg.w_init, cfg.b_init), cfg)


def train_ge2e(utterances: dict[str, list[np.ndarray]], cfg: Ge2eConfig,
               heldout: dict[str, list[np.ndarray]] | None = None, eval_every: int = 50) -> Ge2eModel:
    """Train on speaker-labelled MFCC utterances with Adam.

    A fixed held-out batch (from ``heldout`` if given, else from a dedicated
    random stream over the training speakers) is scored every ``eval_every``
    steps and recorded in ``model.history``.
    """
    model = init_model(cfg)
    enc, lp = model.encoder, model.loss_params
    enc.fit_input_norm(np.concatenate([u for utts in utterances.values() for u in utts]))
    params = list(enc.named_parameters("encoder.")) + list(lp.named_parameters("loss."))
    opt = Adam(params, lr=cfg.lr, grad_scale={"loss.w": cfg.wb_grad_scale, "loss.b": cfg.wb_grad_scale})
    crop_rng = stream(cfg.seed, "crop")
    eval_src = heldout if heldout is not None else utterances
    eval_n = min(cfg.n_speakers, sum(1 for u in eval_src.values() if len(u) >= cfg.n_utterances))
    eval_batch, _ = build_batch(eval_src, eval_n, cfg.n_utterances, stream(cfg.seed, "heldout"), cfg.crop_frames)

    def record(step: int, train_loss: float | None):
        model.history.append({"step": step, "train_loss": train_loss, "heldout_loss": model.batch_loss(eval_batch),
                              "w": float(lp.params["w"][0]), "b": float(lp.params["b"][0])})

    record(0, None)
    for step in range(1, cfg.steps + 1):
        batch, _ = build_batch(utterances, cfg.n_speakers, cfg.n_utterances, crop_rng, cfg.crop_frames)
        N, M, T, F = batch.shape
        enc.zero_grad()
        lp.zero_grad()
        E = enc.forward(batch.reshape(N * M, T, F)).reshape(N, M, -1)
        loss, dE, dw, db = ge2e_loss(E, float(lp.params["w"][0]), float(lp.params["b"][0]))
        if not math.isfinite(loss):
            raise TrainingDivergedError(f"GE2E loss became {loss} at step {step}; "
                                        f"w={lp.params['w'][0]:.4g} b={lp.params['b'][0]:.4g}")
        enc.backward(dE.reshape(N * M, -1))
        lp.grads["w"][0] += dw
        lp.grads["b"][0] += db
        clip_grad_norm(enc.named_parameters(), cfg.clip_norm)
        opt.step()
        lp.clamp()
        if step % eval_every == 0 or step == cfg.steps:
            record(step, loss)
            log.info("ge2e step %d loss %.4f heldout %.4f", step, loss, model.history[-1]["heldout_loss"])
    return model


# --------------------------------------------------------------------------
# extraction

@dataclass
class ExtractionReport:
    n_embedded: int = 0
    skipped: list[tuple[str, int, str]] = field(default_factory=list)


def embed_matrices(encoder: SpeakerEncoder, mats: list[np.ndarray], batch_size: int = 64) -> np.ndarray:
    """Embed whole MFCC matrices, batching equal-length inputs together."""
    out = np.empty((len(mats), encoder.cfg.emb_dim))
    by_len: dict[int, list[int]] = {}
    for i, m in enumerate(mats):
        by_len.setdefault(m.shape[0], []).append(i)
    for _, idx in sorted(by_len.items()):
        for s in range(0, len(idx), batch_size):
            chunk = idx[s:s + batch_size]
            out[chunk] = encoder.forward(np.stack([mats[i] for i in chunk]))
    return out


def extract_segment_embeddings(manifest, segments_by_rec: dict[str, list], model: Ge2eModel,
                               batch_size: int = 64):
    """One 256-d unit vector per segment from all of its frames.

    Returns ``(table, report)`` with ``table[recording_id]`` an (n_segments, 256) array
    in segment order. Segments shorter than one MFCC frame are skipped and listed
    in the report.
    """
    from .corpus import segment_audio

    recs = manifest.by_id()
    win = GE2E_FRAMES.window_samples
    keys, mats = [], []
    report = ExtractionReport()
    for rid, segs in segments_by_rec.items():
        rec = recs[rid]
        for seg in segs:
            x = segment_audio(rec, seg)
            if len(x) < win(rec.sample_rate):
                report.skipped.append((rid, seg.index, "shorter than one MFCC frame"))
                log.warning("skipping %s segment %d: shorter than one MFCC frame", rid, seg.index)
                continue
            keys.append((rid, seg.index))
            mats.append(mfcc(x, rec.sample_rate).data)
    emb = embed_matrices(model.encoder, mats, batch_size) if mats else np.empty((0, model.config.emb_dim))
    table: dict[str, list[np.ndarray]] = {}
    for (rid, _), e in zip(keys, emb):
        table.setdefault(rid, []).append(e)
    report.n_embedded = len(keys)
    return {rid: np.stack(v) for rid, v in table.items()}, report


def speaker_separation(emb: np.ndarray, speakers: list[str]) -> tuple[float, float]:
    """Mean intra-speaker and inter-speaker cosine over all distinct pairs."""
    emb = emb / np.linalg.norm(emb, axis=1, keepdims=True)
    sim = emb @ emb.T
    spk = np.asarray(speakers)
    same = spk[:, None] == spk[None, :]
    off = ~np.eye(len(spk), dtype=bool)
    return float(sim[same & off].mean()), float(sim[~same].mean())
