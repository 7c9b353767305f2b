"""Walk through the acoustic front ends on one synthetic speaker.

    python3 demos/01_features.py
"""

import numpy as np

from depvox.corpus import SynthSpec, generate_synthetic_corpus, segment_audio, segment_recording
from depvox.features import (IS09_FUNCTIONALS, IS09_LLD_NAMES, functionals_is09, functionals_stats6, is09_lld,
                             lld_stack, mfcc, pitch_track, IS09_FRAMES)

# one healthy and one depressed speaker, 20 s each
corpus = generate_synthetic_corpus(SynthSpec(n_speakers=2, recordings_per_speaker=1, recording_dur=20.0), seed=1)
for rec in corpus.records:
    print(f"{rec.id}: label={corpus.label(rec)} score={rec.depression_score} {rec.duration:.1f} s at {rec.sample_rate} Hz")

rec = corpus.records[0]
segs = segment_recording(rec)
print(f"\n{len(segs)} fixed 5 s segments (a trailing partial one would be dropped)")
x = segment_audio(rec, segs[0])

# 40 MFCCs per 10 ms hop, the speaker encoder input
m = mfcc(x, rec.sample_rate)
print(f"MFCC matrix {m.data.shape} (frames x coefficients)")
print("c0..c4 of frame 100:", np.round(m.data[100, :5], 2))

# frame-level pitch (NCCF); unvoiced frames are 0
f0, _ = pitch_track(x, rec.sample_rate, IS09_FRAMES)
voiced = f0[f0 > 0]
print(f"\nF0 median {np.median(voiced):.1f} Hz over {voiced.size}/{f0.size} voiced frames")

# IS09-style: 16 LLDs + deltas = 32 channels, 12 functionals each
lld = is09_lld(x, rec.sample_rate)
v = functionals_is09(lld)
print(f"\nIS09-style LLDs {lld.data.shape}, vector {v.dim}-d")
table = v.values.reshape(32, 12)
for name in ("f0", "rms", "mfcc1"):
    row = table[IS09_LLD_NAMES.index(name)]
    print(f"  {name:6s}", "  ".join(f"{f}={row[i]:.3g}" for i, f in enumerate(IS09_FUNCTIONALS[:4])))

# COVAREP-style: 74 LLDs x 6 statistics
s = functionals_stats6(lld_stack(x, rec.sample_rate))
print(f"\nCOVAREP-style vector {s.dim}-d (74 x 6)")

# raw F0 mostly reflects who is speaking; the class cue is a shift from each
# speaker's own baseline, which is why speaker-aware embeddings help
for rec in corpus.records:
    y = segment_audio(rec, segment_recording(rec)[0])
    f0, _ = pitch_track(y, rec.sample_rate, IS09_FRAMES)
    print(f"{rec.id} label={corpus.label(rec)} median F0 {np.median(f0[f0 > 0]):.1f} Hz")
