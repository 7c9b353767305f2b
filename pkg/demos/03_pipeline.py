"""End to end at small scale: pretrain, embed, classify recordings, sweep context.

    python3 demos/03_pipeline.py      (a few minutes on one core)

The acceptance suite runs the same steps at full desk scale.
"""

import numpy as np

from depvox.classifiers import ArchSpec, TrainConfig
from depvox.corpus import SynthSpec, generate_synthetic_corpus
from depvox.evaluation import context_sweep, train_and_evaluate
from depvox.featstore import embedding_table, functional_table, segments_for, split_tables
from depvox.ge2e import Ge2eConfig, train_ge2e, utterance_mfccs

# 1. the speaker encoder never sees depression labels: pretrain it on other speakers
pre = generate_synthetic_corpus(SynthSpec(n_speakers=60, recordings_per_speaker=4, recording_dur=10.0), seed=7)
encoder = train_ge2e(utterance_mfccs(pre, segments_for(pre)), Ge2eConfig.toy(steps=200, n_speakers=16),
                     eval_every=100)
print("GE2E held-out loss", [round(h["heldout_loss"], 3) for h in encoder.history])

# 2. labelled corpus, one 60 s recording per speaker, speaker-disjoint splits
corpus = generate_synthetic_corpus(SynthSpec(n_speakers=60, recordings_per_speaker=1, recording_dur=60.0), seed=11)
segs = segments_for(corpus)
emb = split_tables(embedding_table(corpus, segs, encoder), corpus)
print({k: len(t.vectors) for k, t in emb.items()}, "recordings per split")

# 3. LSTM_D over windows of 8 consecutive 5 s segments, majority vote per recording
cfg = TrainConfig(epochs=30)
trained, ev = train_and_evaluate(ArchSpec("lstm_d", 256, 8), emb["train"], emb["valid"], emb["test"], cfg)
r = ev.report
print(f"LSTM_D spk_emb: F1_D {r.f1_depressed:.2f}  F1_H {r.f1_healthy:.2f}  Acc {r.weighted_accuracy:.2f} "
      f"(best epoch {trained.best_epoch})")

# 4. fuse with IS09-style functionals
is09 = split_tables(functional_table(corpus, segs, "is09"), corpus)
fused = {k: (emb[k], is09[k]) for k in emb}
_, ev = train_and_evaluate(ArchSpec("ce_dl", 256, 8, input_dim_b=384), fused["train"], fused["valid"],
                           fused["test"], cfg)
print(f"CE_DL spk_emb+is09: Acc {ev.report.weighted_accuracy:.2f}")

# 5. context sweep; contexts beyond the shortest test recording (12 segments) are refused
res = context_sweep(ArchSpec("lstm_d", 256, 2), emb["train"], emb["valid"], emb["test"], [2, 4, 8, 12], [0, 1], cfg)
for row in res.rows:
    print(f"context {row.context:2d} ({row.context * 5:3d} s): Acc {row.acc:.2f}")
try:
    context_sweep(ArchSpec("lstm_d", 256, 2), emb["train"], emb["valid"], emb["test"], [4, 16], [0], cfg)
except ValueError as e:
    print("refused:", e)
print("mean acc over the sweep", np.mean([row.acc for row in res.rows]).round(3))
