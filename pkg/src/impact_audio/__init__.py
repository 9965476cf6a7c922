"""Self-supervised industrial machine-sound representation learning.

Pipeline: WAV ingest and normalization (audio_io), log-Mel spectrogram
frontend (dsp), masked student-teacher spectrogram transformer (model,
ssl_train), frozen-encoder linear-probe benchmark (probe_bench), and a
deterministic synthetic corpus generator (synthgen). The `impact`
console script ties everything together.
"""

__version__ = "0.1.0"
