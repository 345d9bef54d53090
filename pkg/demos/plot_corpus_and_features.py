"""
Synthetic speakers, noise and log-mel features
==============================================

Render a couple of utterances, mix one with babble at a chosen SNR and look
at the log-mel frames the rest of the pipeline consumes.
"""

import numpy as np

from spkdistill import audio

spec = audio.CorpusSpec(n_speakers=2, utterances_per_speaker=2, seed=0)
x, style, phones = audio.synth_utterance(spec, 0, 0)
clean = audio.Waveform(x)
print(f"{len(x) / clean.sample_rate:.2f} s, vibrato flag {style}, phones {phones.tolist()}")

# %%
# Noise bank: babble is a sum of other synthetic talkers, generic is white or pink noise.
bank = audio.build_noise_bank(spec, n_per_class=2, duration_s=2.0)
babble = [w for c, w in bank if c == "babble"][0]
noisy = audio.mix_at_snr(clean, babble, snr_db=5.0)
added = noisy.samples - clean.samples
print("achieved SNR:", 10 * np.log10(np.mean(clean.samples**2) / np.mean(added**2)))

# %%
# 25 ms windows every 10 ms, 32 mel bands.
feats = audio.log_filterbank(clean, n_bands=32)
print("frames:", feats.frames.shape)

try:
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(2, 1, figsize=(8, 5), sharex=True)
    axes[0].imshow(feats.frames.T, origin="lower", aspect="auto")
    axes[0].set_title("clean")
    axes[1].imshow(audio.log_filterbank(noisy, n_bands=32).frames.T, origin="lower", aspect="auto")
    axes[1].set_title("babble at 5 dB")
    plt.show()
except ImportError:
    pass
