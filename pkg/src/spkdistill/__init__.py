"""Self-distilled speaker embeddings trained jointly with a unit-conditioned synthesiser.

Modules:

- ``audio``: waveforms, augmentation, log-mel features, synthetic corpus
- ``units``: k-means codebook, quantisation, run deduplication
- ``grad``: small reverse-mode autodiff core, Adam, EMA
- ``speaker``: encoder, projection head, self-distillation and AAM losses
- ``synth``: unit-conditioned conditional VAE
- ``trainer``: batches, two-stage schedule, checkpoints
- ``eval``: probes, noise separability, similarity, reports
- ``pipeline`` / ``cli``: file-level steps and the command line
"""

__version__ = "0.1.0"
