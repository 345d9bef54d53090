"""
Discrete units from k-means
===========================

Fit a small codebook on clean frames, quantise an utterance and collapse
repeated units.
"""

import numpy as np

from spkdistill import audio
from spkdistill.units import dedup_runs, kmeans_fit, quantize

spec = audio.CorpusSpec(n_speakers=3, utterances_per_speaker=3, seed=1)
frames = np.concatenate(
    [audio.log_filterbank(audio.Waveform(audio.synth_utterance(spec, s, u)[0])).frames for s in range(3) for u in range(3)]
)
cb = kmeans_fit(frames, K=16, max_iters=30, seed=0)
print("inertia per pass:", np.round(cb.inertia_history, 1))

# %%
utt = audio.log_filterbank(audio.Waveform(audio.synth_utterance(spec, 0, 0)[0]))
raw = quantize(utt, cb)
print("raw units  :", raw[:40].tolist())
print("deduplicated:", dedup_runs(raw).units[:20])
