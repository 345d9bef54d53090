"""Waveforms, augmentation, log-mel filterbank features and the synthetic corpus."""
from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field
from math import gcd
from pathlib import Path

import numpy as np
from scipy.io import wavfile
from scipy.ndimage import uniform_filter1d
from scipy.signal import resample_poly

from .errors import ConfigError, IoError, ManifestError, RateMismatch, SilentInput, TooShort

log = logging.getLogger(__name__)

SAMPLE_RATE = 16000
LOG_FLOOR = 1e-8


def stream(*key) -> np.random.Generator:
    """Independent RNG stream keyed by integers (e.g. seed, tag, step, record)."""
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in key]))


# stream tags, kept distinct so no two consumers share a stream
TAG_SPEAKER, TAG_UTTERANCE, TAG_PHONES, TAG_NOISE = 1, 2, 3, 4


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        object.__setattr__(self, "samples", np.asarray(self.samples, dtype=np.float64))

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate

    def __len__(self) -> int:
        return len(self.samples)


@dataclass(frozen=True)
class FeatureSequence:
    frames: np.ndarray  # (T, B)
    frame_hop_s: float
    source_id: str = ""

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def n_bands(self) -> int:
        return self.frames.shape[1]


def rms(x: np.ndarray) -> float:
    return float(np.sqrt(np.mean(np.square(x))))


def normalize_loudness(w: Waveform, target_rms: float) -> Waveform:
    if target_rms <= 0:
        raise ValueError("target_rms must be positive")
    level = rms(w.samples)
    if level == 0.0:
        raise SilentInput("cannot normalise an all-zero waveform")
    return Waveform(w.samples * (target_rms / level), w.sample_rate)


def resample(w: Waveform, sample_rate: int = SAMPLE_RATE) -> Waveform:
    if w.sample_rate == sample_rate:
        return w
    g = gcd(w.sample_rate, sample_rate)
    return Waveform(resample_poly(w.samples, sample_rate // g, w.sample_rate // g), sample_rate)


def fit_length(x: np.ndarray, n: int) -> np.ndarray:
    """Tile cyclically or truncate to exactly n samples."""
    if len(x) >= n:
        return x[:n]
    return np.tile(x, -(-n // len(x)))[:n]


def mix_at_snr(signal: Waveform, noise: Waveform, snr_db: float) -> Waveform:
    """``signal + alpha * noise`` with alpha chosen for the requested full-utterance SNR."""
    if signal.sample_rate != noise.sample_rate:
        raise RateMismatch(f"{signal.sample_rate} Hz signal vs {noise.sample_rate} Hz noise")
    n = fit_length(noise.samples, len(signal.samples))
    s_rms, n_rms = rms(signal.samples), rms(n)
    if s_rms == 0.0 or n_rms == 0.0:
        raise SilentInput("signal and noise must both be non-silent")
    alpha = (s_rms / n_rms) * 10.0 ** (-snr_db / 20.0)
    return Waveform(signal.samples + alpha * n, signal.sample_rate)


def random_crop_pair(w: Waveform, segment_s: float, rng: np.random.Generator) -> tuple[Waveform, Waveform]:
    if segment_s <= 0:
        raise ValueError("segment_s must be positive")
    n = len(w.samples)
    seg = min(int(round(segment_s * w.sample_rate)), n)
    crops = []
    for _ in range(2):
        start = int(rng.integers(0, n - seg + 1))
        crops.append(Waveform(w.samples[start : start + seg], w.sample_rate))
    return crops[0], crops[1]


@dataclass(frozen=True)
class AugmentPolicy:
    apply_probability: float = 0.5
    snr_ranges: dict = field(
        default_factory=lambda: {"babble": (16.0, 25.0), "music": (6.0, 20.0), "generic": (3.0, 20.0)}
    )

    def __post_init__(self):
        if not 0.0 <= self.apply_probability <= 1.0:
            raise ConfigError("apply_probability must lie in [0, 1]")
        for cls, (lo, hi) in self.snr_ranges.items():
            if lo > hi:
                raise ConfigError(f"SNR range for {cls!r} has low > high")


def augment_reference(
    w: Waveform, noise_bank, policy: AugmentPolicy, rng: np.random.Generator
) -> tuple[Waveform, bool, float | None]:
    """Mix in a random noise clip with ``policy.apply_probability``.

    Returns ``(waveform, applied, snr_used)``.
    """
    if policy.apply_probability > 0 and not noise_bank:
        raise ConfigError("noise bank is empty but augmentation may apply")
    if rng.random() >= policy.apply_probability:
        return w, False, None
    cls, noise = noise_bank[int(rng.integers(len(noise_bank)))]
    if cls not in policy.snr_ranges:
        raise ConfigError(f"no SNR range configured for noise class {cls!r}")
    lo, hi = policy.snr_ranges[cls]
    snr = float(rng.uniform(lo, hi))
    return mix_at_snr(w, noise, snr), True, snr


# ---------------------------------------------------------------- features

def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m) / 2595.0) - 1.0)


def band_centers(n_bands: int, sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    edges = mel_to_hz(np.linspace(0.0, hz_to_mel(sample_rate / 2), n_bands + 2))
    return edges[1:-1]


def mel_filterbank(n_bands: int, n_fft: int, sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    """Triangular filters with unit peak, shape (n_bands, n_fft // 2 + 1)."""
    edges = mel_to_hz(np.linspace(0.0, hz_to_mel(sample_rate / 2), n_bands + 2))
    freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs - lo) / (mid - lo)
    falling = (hi - freqs) / (hi - mid)
    return np.clip(np.minimum(rising, falling), 0.0, None)


_FB_CACHE: dict = {}


def log_filterbank(
    w: Waveform, n_bands: int = 32, win_s: float = 0.025, hop_s: float = 0.010, source_id: str = ""
) -> FeatureSequence:
    """Log mel-band energies of Hann-windowed frames (no padding)."""
    if not (win_s >= hop_s > 0) or n_bands < 1:
        raise ValueError("need win_s >= hop_s > 0 and n_bands >= 1")
    win = int(round(win_s * w.sample_rate))
    hop = int(round(hop_s * w.sample_rate))
    n = len(w.samples)
    if n < win:
        raise TooShort(f"{n} samples is shorter than one {win}-sample window")
    n_frames = (n - win) // hop + 1
    n_fft = 1 << (win - 1).bit_length()
    key = (n_bands, n_fft, win, w.sample_rate)
    if key not in _FB_CACHE:
        _FB_CACHE[key] = (mel_filterbank(n_bands, n_fft, w.sample_rate).T.copy(), np.hanning(win + 1)[:-1])
    fb, window = _FB_CACHE[key]
    idx = np.arange(win)[None, :] + hop * np.arange(n_frames)[:, None]
    spec = np.fft.rfft(w.samples[idx] * window, n_fft)
    power = spec.real**2 + spec.imag**2
    return FeatureSequence(np.log(LOG_FLOOR + power @ fb), hop_s, source_id)


# ----------------------------------------------------------------- corpus

@dataclass(frozen=True)
class CorpusSpec:
    """Synthetic speakers reading random phone strings.

    Phone ids in manifests run 1..phone_alphabet_size; 0 marks a pause.
    """

    n_speakers: int = 24
    utterances_per_speaker: int = 20
    phone_alphabet_size: int = 12
    style_flag_probability: float = 0.5
    noise_classes: tuple = ("babble", "generic")
    seed: int = 0
    speaker_offset: int = 0
    min_duration_s: float = 1.0
    max_duration_s: float = 2.0
    sample_rate: int = SAMPLE_RATE
    target_rms: float = 0.05
    vibrato_depth: float = 0.03
    vibrato_rate_hz: float = 5.5

    def __post_init__(self):
        if min(self.n_speakers, self.utterances_per_speaker, self.phone_alphabet_size) < 1:
            raise ConfigError("corpus counts must all be >= 1")
        if not 0 < self.min_duration_s <= self.max_duration_s:
            raise ConfigError("need 0 < min_duration_s <= max_duration_s")


@dataclass(frozen=True)
class Speaker:
    f0: float
    bump_centers: np.ndarray
    bump_gains: np.ndarray
    bump_widths: np.ndarray
    tilt: float

    def envelope(self, f: np.ndarray) -> np.ndarray:
        lf = np.log(np.maximum(f, 1.0))[..., None]
        bumps = self.bump_gains * np.exp(-0.5 * ((lf - np.log(self.bump_centers)) / self.bump_widths) ** 2)
        return np.exp(bumps.sum(axis=-1)) * (np.maximum(f, 50.0) / 500.0) ** (-self.tilt)


def make_speaker(seed: int, index: int) -> Speaker:
    rng = stream(seed, TAG_SPEAKER, index)
    return Speaker(
        f0=float(np.exp(rng.uniform(np.log(85.0), np.log(260.0)))),
        bump_centers=rng.uniform(300.0, 6000.0, size=4),
        bump_gains=rng.uniform(-1.2, 1.2, size=4),
        bump_widths=rng.uniform(0.15, 0.5, size=4),
        tilt=float(rng.uniform(0.6, 1.4)),
    )


def phone_formants(seed: int, n_phones: int) -> np.ndarray:
    """(n_phones, 3, 2) table of (formant frequency, bandwidth) per phone."""
    rng = stream(seed, TAG_PHONES)
    f1 = rng.uniform(250.0, 900.0, n_phones)
    f2 = rng.uniform(900.0, 2500.0, n_phones)
    f3 = rng.uniform(2400.0, 3600.0, n_phones)
    freqs = np.stack([f1, f2, f3], axis=1)
    bws = rng.uniform(60.0, 200.0, (n_phones, 3))
    return np.stack([freqs, bws], axis=2)


def _phone_envelope(formants: np.ndarray, f: np.ndarray) -> np.ndarray:
    amps = np.array([1.0, 0.6, 0.3])
    out = 0.02 * np.ones_like(f)
    for (fc, bw), a in zip(formants, amps):
        out = out + a / (1.0 + ((f - fc) / bw) ** 2)
    return out


def render_utterance(
    speaker: Speaker,
    phones: np.ndarray,
    durations_s: np.ndarray,
    formants: np.ndarray,
    style: bool,
    rng: np.random.Generator,
    spec: CorpusSpec,
) -> np.ndarray:
    """Harmonic source shaped by speaker and phone envelopes; pauses are silent."""
    sr = spec.sample_rate
    counts = np.maximum(1, np.round(durations_s * sr).astype(int))
    n = int(counts.sum())
    t = np.arange(n) / sr
    f0_scale = rng.uniform(0.94, 1.06)
    f0 = speaker.f0 * f0_scale * (1.0 + 0.03 * np.sin(2 * np.pi * rng.uniform(0.3, 0.8) * t + rng.uniform(0, 6.3)))
    if style:
        f0 = f0 * (1.0 + spec.vibrato_depth * np.sin(2 * np.pi * spec.vibrato_rate_hz * t + rng.uniform(0, 6.3)))
    n_harm = int((0.95 * sr / 2) // f0.max())
    k = np.arange(1, n_harm + 1)
    base = speaker.f0 * f0_scale
    # per-phone harmonic amplitudes evaluated at the nominal harmonic grid
    table = np.zeros((len(formants) + 1, n_harm))
    harm_f = k * base
    spk_env = speaker.envelope(harm_f)
    for p in range(len(formants)):
        table[p + 1] = spk_env * _phone_envelope(formants[p], harm_f)
    amp = np.repeat(table[phones], counts, axis=0)  # (n, n_harm)
    amp = uniform_filter1d(amp, size=max(1, int(0.008 * sr)), axis=0, mode="nearest")
    phase = 2 * np.pi * np.cumsum(f0) / sr
    phases0 = rng.uniform(0, 2 * np.pi, n_harm)
    out = np.zeros(n)
    for j in range(n_harm):
        out += amp[:, j] * np.sin(k[j] * phase + phases0[j])
    return out


def sample_phone_string(rng: np.random.Generator, spec: CorpusSpec) -> tuple[np.ndarray, np.ndarray]:
    target = rng.uniform(spec.min_duration_s, spec.max_duration_s)
    phones, durs = [], []
    total = 0.0
    while total < target:
        if phones and phones[-1] != 0 and rng.random() < 0.15:
            p, d = 0, rng.uniform(0.05, 0.15)
        else:
            p, d = int(rng.integers(1, spec.phone_alphabet_size + 1)), rng.uniform(0.06, 0.18)
        phones.append(p)
        durs.append(d)
        total += d
    return np.asarray(phones), np.asarray(durs)


def synth_utterance(spec: CorpusSpec, speaker_index: int, utt_index: int):
    """Render one utterance; returns (samples, style_flag, phone ids)."""
    rng = stream(spec.seed, TAG_UTTERANCE, speaker_index, utt_index)
    speaker = make_speaker(spec.seed, speaker_index)
    style = bool(rng.random() < spec.style_flag_probability)
    phones, durs = sample_phone_string(rng, spec)
    formants = phone_formants(spec.seed, spec.phone_alphabet_size)
    x = render_utterance(speaker, phones, durs, formants, style, rng, spec)
    x = x * (spec.target_rms / rms(x))
    return x, style, phones


def write_wav(path: Path, w: Waveform) -> None:
    pcm = np.clip(np.round(w.samples * 32768.0), -32768, 32767).astype("<i2")
    wavfile.write(str(path), w.sample_rate, pcm)


def read_wav(path) -> Waveform:
    sr, data = wavfile.read(str(path))
    if data.ndim != 1:
        raise ManifestError(f"{path}: expected mono audio")
    if data.dtype == np.int16:
        data = data.astype(np.float64) / 32768.0
    return Waveform(data.astype(np.float64), int(sr))


@dataclass(frozen=True)
class Record:
    path: str
    speaker_id: int
    style_flag: bool
    noise_label: str
    phone_sequence: tuple

    def to_json(self) -> str:
        return json.dumps(
            {
                "path": self.path,
                "speaker_id": self.speaker_id,
                "style_flag": self.style_flag,
                "noise_label": self.noise_label,
                "phone_sequence": ",".join(str(p) for p in self.phone_sequence),
            },
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, line: str) -> "Record":
        try:
            d = json.loads(line)
            phones = tuple(int(p) for p in d["phone_sequence"].split(",") if p != "")
            return cls(d["path"], int(d["speaker_id"]), bool(d["style_flag"]), d["noise_label"], phones)
        except (KeyError, ValueError, AttributeError) as exc:
            raise ManifestError(f"bad manifest line: {line!r}") from exc


def write_manifest(path, records) -> None:
    Path(path).write_text("".join(r.to_json() + "\n" for r in records), encoding="utf-8")


def read_manifest(path) -> list[Record]:
    text = Path(path).read_text(encoding="utf-8")
    return [Record.from_json(line) for line in text.splitlines() if line.strip()]


def _ensure_dir(path: Path) -> None:
    try:
        path.mkdir(parents=True, exist_ok=True)
        probe = path / ".write_probe"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        raise IoError(f"cannot write to {path}: {exc}") from exc


def synth_corpus(spec: CorpusSpec, out_dir, manifest_name: str = "manifest.jsonl") -> Path:
    """Write WAV files plus a manifest under ``out_dir``; returns the manifest path."""
    out_dir = Path(out_dir)
    wav_dir = out_dir / "wav"
    _ensure_dir(wav_dir)
    records = []
    for s in range(spec.n_speakers):
        spk = spec.speaker_offset + s
        for u in range(spec.utterances_per_speaker):
            x, style, phones = synth_utterance(spec, spk, u)
            rel = f"wav/spk{spk:03d}_utt{u:03d}.wav"
            write_wav(out_dir / rel, Waveform(x, spec.sample_rate))
            records.append(Record(rel, spk, style, "clean", tuple(int(p) for p in phones)))
    manifest = out_dir / manifest_name
    write_manifest(manifest, records)
    return manifest


def load_records(manifest_path) -> list[tuple[Record, Waveform]]:
    manifest_path = Path(manifest_path)
    out = []
    for r in read_manifest(manifest_path):
        p = Path(r.path)
        if not p.is_absolute():
            p = manifest_path.parent / p
        out.append((r, resample(read_wav(p))))
    return out


# ------------------------------------------------------------------ noise

def pink_noise(n: int, rng: np.random.Generator) -> np.ndarray:
    spec = np.fft.rfft(rng.standard_normal(n))
    f = np.arange(len(spec), dtype=np.float64)
    f[0] = 1.0
    x = np.fft.irfft(spec / np.sqrt(f), n)
    return x / rms(x)


def build_noise_bank(spec: CorpusSpec, n_per_class: int = 8, duration_s: float = 3.0) -> list:
    """``[(class, Waveform), ...]`` for each class in ``spec.noise_classes``.

    Babble mixes 1-6 utterances from speakers disjoint from the corpus;
    generic alternates white and pink noise.
    """
    out = []
    n = int(duration_s * spec.sample_rate)
    babble_base = 10_000 + spec.speaker_offset
    for cls in spec.noise_classes:
        for i in range(n_per_class):
            rng = stream(spec.seed, TAG_NOISE, sum(map(ord, cls)), i)
            if cls == "babble":
                acc = np.zeros(n)
                for j in range(int(rng.integers(1, 7))):
                    spk = babble_base + int(rng.integers(0, 64))
                    x, _, _ = synth_utterance(spec, spk, 1000 + i * 8 + j)
                    acc += fit_length(x, n)
                x = acc
            elif cls == "generic":
                x = rng.standard_normal(n) if i % 2 == 0 else pink_noise(n, rng)
            else:
                raise ConfigError(f"no synthetic generator for noise class {cls!r}")
            out.append((cls, Waveform(x * (spec.target_rms / rms(x)), spec.sample_rate)))
    return out


def write_noise_bank(bank, out_dir) -> Path:
    out_dir = Path(out_dir)
    _ensure_dir(out_dir / "noise")
    records = []
    for i, (cls, w) in enumerate(bank):
        rel = f"noise/{cls}_{i:03d}.wav"
        write_wav(out_dir / rel, w)
        records.append(Record(rel, -1, False, cls, ()))
    path = out_dir / "noise_manifest.jsonl"
    write_manifest(path, records)
    return path


def load_noise_bank(manifest_path) -> list:
    return [(r.noise_label, w) for r, w in load_records(manifest_path)]


def default_output_root() -> Path:
    return Path(os.environ.get("SPKDISTILL_OUT", "runs"))
