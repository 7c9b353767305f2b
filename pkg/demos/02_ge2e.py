"""The GE2E softmax loss by hand, then a small encoder trained on synthetic speakers.

    python3 demos/02_ge2e.py      (about 1 minute)
"""

import math

import numpy as np

from depvox.corpus import SynthSpec, generate_synthetic_corpus
from depvox.evaluation import speaker_probe
from depvox.featstore import segments_for
from depvox.ge2e import (Ge2eConfig, extract_segment_embeddings, ge2e_loss, speaker_separation, train_ge2e,
                         utterance_mfccs)
from depvox.nn import grad_check

# Two speakers, two utterances each, perfectly orthogonal embeddings.
# Own-speaker similarity (exclusion centroid) is 1, the other speaker's is 0,
# so each of the 4 terms is log(1 + e^-1) at w=1, b=0.
E = np.zeros((2, 2, 4))
E[0, :, 0] = 1.0
E[1, :, 1] = 1.0
loss, dE, dw, db = ge2e_loss(E, 1.0, 0.0)
print(f"loss {loss:.6f}  closed form {4 * math.log(1 + math.exp(-1)):.6f}")
print(f"dL/db = {db}  (softmax rows sum to one, so the bias gradient vanishes)")

r = np.random.default_rng(0)
E = r.standard_normal((3, 4, 8))
w = np.array([5.0])
_, dE, dw, _ = ge2e_loss(E, w[0], -2.0)
rep = grad_check(lambda: ge2e_loss(E, w[0], -2.0)[0], {"E": E, "w": w}, {"E": dE, "w": np.array([dw])}, None)
print(f"finite-difference check over {rep.n_checked} coordinates: max rel err {rep.max_rel_error:.1e}")

# a narrow encoder on 12 synthetic speakers
corpus = generate_synthetic_corpus(SynthSpec(n_speakers=12, recordings_per_speaker=2, recording_dur=25.0), seed=3)
segs = segments_for(corpus)
model = train_ge2e(utterance_mfccs(corpus, segs), Ge2eConfig.toy(steps=120), eval_every=40)
for h in model.history:
    print(f"step {h['step']:4d}  held-out loss {h['heldout_loss']:.3f}  w={h['w']:.2f} b={h['b']:.2f}")

table, _ = extract_segment_embeddings(corpus, segs, model)
recs = corpus.by_id()
emb = np.concatenate(list(table.values()))
spk = [recs[rid].speaker_id for rid in table for _ in table[rid]]
intra, inter = speaker_separation(emb, spk)
print(f"\nmean cosine within speakers {intra:.3f}, across speakers {inter:.3f}")
probe = speaker_probe(emb, spk, train_per_spk=6, test_per_spk=4)
print(f"logistic-regression speaker probe EER {probe.eer:.3f}")
