"""Audio ingestion, log-mel filterbanks, per-speaker CMVN, the synthetic
labeled corpus and the binary feature-file format."""
from __future__ import annotations

import hashlib
import io
import struct
import warnings
from collections import defaultdict
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.io import wavfile

from .errors import (
    BadMagicError,
    ConfigError,
    DataError,
    FeatureFileError,
    TruncatedPayloadError,
    VersionMismatchError,
    WavFormatError,
)

SAMPLE_RATE = 16000
PREEMPHASIS = 0.97
ENERGY_FLOOR = 1e-10
VARIANCE_FLOOR = 1e-10

FEATURE_MAGIC = b"DC2F"
FEATURE_VERSION = 1
FEATURE_SUFFIX = ".dc2f"
MANIFEST_NAME = "manifest.tsv"


@dataclass
class AudioClip:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE
    speaker_id: str = ""
    utterance_id: str = ""

    def __post_init__(self):
        if self.samples.size == 0:
            raise DataError("audio clip has no samples")
        if self.sample_rate <= 0:
            raise DataError(f"invalid sample rate {self.sample_rate}")


@dataclass
class FeatureSequence:
    frames: np.ndarray  # (T, F) float32
    speaker_id: str = ""
    utterance_id: str = ""
    frame_shift: float = 0.010
    frame_length: float = 0.025
    labels: np.ndarray | None = None  # (T,) int

    def __post_init__(self):
        if self.frames.ndim != 2 or min(self.frames.shape) < 1:
            raise DataError(f"frames must be a non-empty T x F matrix, got {self.frames.shape}")
        if not np.isfinite(self.frames).all():
            raise DataError(f"{self.utterance_id or 'sequence'}: non-finite feature values")
        if self.labels is not None and len(self.labels) != len(self.frames):
            raise DataError("label count does not match frame count")

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def dim(self) -> int:
        return self.frames.shape[1]


# --- WAV -----------------------------------------------------------------------


def ids_from_filename(path: Path) -> tuple[str, str]:
    """``<speaker>-<rest>.wav`` -> (speaker, stem).  No dash: speaker is the stem."""
    stem = path.stem
    return stem.split("-", 1)[0], stem


def load_wav(path, speaker_id: str | None = None, utterance_id: str | None = None) -> AudioClip:
    path = Path(path)
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            rate, data = wavfile.read(path)
    except FileNotFoundError:
        raise
    except (ValueError, struct.error, wavfile.WavFileWarning, EOFError) as exc:
        raise WavFormatError(f"{path}: unreadable or truncated WAV ({exc})") from exc
    if data.ndim != 1:
        raise WavFormatError(f"{path}: expected mono audio, got {data.shape[1]} channels")
    if data.dtype == np.int16:
        samples = data.astype(np.float32) / 32768.0
    elif data.dtype == np.float32:
        samples = data.copy()
    else:
        raise WavFormatError(f"{path}: unsupported sample encoding {data.dtype}")
    spk, utt = ids_from_filename(path)
    return AudioClip(samples, int(rate), speaker_id or spk, utterance_id or utt)


def write_wav(path, clip: AudioClip) -> None:
    """Write 16-bit PCM; samples are clipped to the representable range."""
    pcm = np.clip(np.round(np.asarray(clip.samples, dtype=np.float64) * 32768.0), -32768, 32767)
    wavfile.write(Path(path), clip.sample_rate, pcm.astype(np.int16))


# --- log-mel -------------------------------------------------------------------


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(num_filters: int, n_fft: int, sample_rate: int) -> np.ndarray:
    """(num_filters, n_fft // 2 + 1) triangular filters evenly spaced in mel, 0..Nyquist."""
    edges = mel_to_hz(np.linspace(0.0, hz_to_mel(sample_rate / 2), num_filters + 2))
    freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs - lo) / (mid - lo)
    falling = (hi - freqs) / (hi - mid)
    return np.maximum(0.0, np.minimum(rising, falling))


def filter_center_hz(num_filters: int, sample_rate: int) -> np.ndarray:
    return mel_to_hz(np.linspace(0.0, hz_to_mel(sample_rate / 2), num_filters + 2))[1:-1]


def frame_signal(samples: np.ndarray, frame_len: int, shift: int) -> np.ndarray:
    n = len(samples)
    if n < frame_len:
        raise DataError(f"clip of {n} samples is shorter than one frame ({frame_len})")
    num = 1 + (n - frame_len) // shift
    idx = np.arange(frame_len)[None, :] + shift * np.arange(num)[:, None]
    return samples[idx]


def logmel(
    clip: AudioClip,
    num_filters: int = 80,
    frame_length: float = 0.025,
    frame_shift: float = 0.010,
) -> FeatureSequence:
    sr = clip.sample_rate
    frame_len = int(round(frame_length * sr))
    shift = int(round(frame_shift * sr))
    frames = frame_signal(np.asarray(clip.samples, dtype=np.float64), frame_len, shift)

    # per-frame pre-emphasis keeps frames independent of their neighbours
    emph = np.empty_like(frames)
    emph[:, 1:] = frames[:, 1:] - PREEMPHASIS * frames[:, :-1]
    emph[:, 0] = frames[:, 0] * (1.0 - PREEMPHASIS)
    window = 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(frame_len) / frame_len)

    n_fft = 1 << (frame_len - 1).bit_length()
    mag = np.abs(np.fft.rfft(emph * window, n=n_fft, axis=1))
    fbank = mel_filterbank(num_filters, n_fft, sr)
    # row-by-row products: a batched GEMM may change summation order with T
    energies = np.stack([fbank @ row for row in mag])
    feats = np.log(np.maximum(energies, ENERGY_FLOOR)).astype(np.float32)
    return FeatureSequence(
        feats, clip.speaker_id, clip.utterance_id, frame_shift=frame_shift, frame_length=frame_length
    )


# --- CMVN ----------------------------------------------------------------------


def speaker_stats(sequences: Iterable[FeatureSequence]) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    """Pooled per-speaker mean and (population) variance, accumulated in float64."""
    sums: dict[str, np.ndarray] = {}
    sq: dict[str, np.ndarray] = {}
    counts: dict[str, int] = defaultdict(int)
    for seq in sequences:
        x = seq.frames.astype(np.float64)
        if seq.speaker_id not in sums:
            sums[seq.speaker_id] = np.zeros(x.shape[1])
            sq[seq.speaker_id] = np.zeros(x.shape[1])
        sums[seq.speaker_id] += x.sum(0)
        counts[seq.speaker_id] += len(x)
    means = {s: sums[s] / counts[s] for s in sums}
    for seq in sequences:
        d = seq.frames.astype(np.float64) - means[seq.speaker_id]
        sq[seq.speaker_id] += (d * d).sum(0)
    return {s: (means[s], sq[s] / counts[s]) for s in sums}


def cmvn_per_speaker(sequences: Sequence[FeatureSequence]) -> list[FeatureSequence]:
    sequences = list(sequences)
    stats = speaker_stats(sequences)
    out = []
    for seq in sequences:
        mean, var = stats[seq.speaker_id]
        frames = (seq.frames.astype(np.float64) - mean) / np.sqrt(var + VARIANCE_FLOOR)
        out.append(replace(seq, frames=frames.astype(np.float32)))
    return out


# --- synthetic corpus ----------------------------------------------------------


@dataclass
class SyntheticCorpusConfig:
    """Desk-scale stand-in for a labeled speech corpus.

    Each latent unit owns a smooth spectral template.  Utterances are random
    unit sequences; every segment renders its unit's template plus white
    Gaussian noise.  Each speaker applies a gain, an offset vector and a slowly
    varying spectral drift (the channel); ``identity_speakers`` disables all
    three.
    """

    seed: int = 42
    num_units: int = 8
    num_speakers: int = 10
    utterances_per_speaker: int = 20
    min_frames: int = 120
    max_frames: int = 240
    min_segment: int = 5
    max_segment: int = 30
    noise_std: float = 0.1
    feature_dim: int = 80
    template_rank: int = 6
    drift_std: float = 1.0
    drift_rank: int = 4
    drift_smoothness: float = 300.0
    identity_speakers: bool = False

    def __post_init__(self):
        if self.min_frames > self.max_frames or self.min_segment > self.max_segment:
            raise ConfigError("degenerate range in synthetic corpus config (min > max)")
        if min(self.num_units, self.num_speakers, self.utterances_per_speaker,
               self.min_frames, self.min_segment, self.feature_dim) < 1:
            raise ConfigError("synthetic corpus counts and lengths must be positive")
        if self.noise_std < 0 or self.drift_std < 0:
            raise ConfigError("noise_std and drift_std must be non-negative")


def _smooth_basis(rank: int, dim: int, rng: np.random.Generator) -> np.ndarray:
    """``rank`` unit-norm smooth curves over the ``dim`` spectral bins."""
    grid = np.linspace(0.0, 1.0, dim)
    rows = []
    for _ in range(rank):
        centre = rng.uniform(0.0, 1.0)
        width = rng.uniform(0.08, 0.3)
        row = np.exp(-0.5 * ((grid - centre) / width) ** 2)
        rows.append(row / np.linalg.norm(row))
    return np.stack(rows)


def unit_templates(config: SyntheticCorpusConfig) -> np.ndarray:
    """(num_units, feature_dim) templates, a function of the seed only."""
    rng = np.random.default_rng([config.seed, 0])
    basis = _smooth_basis(config.template_rank, config.feature_dim, rng)
    coeffs = rng.standard_normal((config.num_units, config.template_rank))
    templates = coeffs @ basis * np.sqrt(config.feature_dim / config.template_rank)
    return templates.astype(np.float32)


def template_checksums(config: SyntheticCorpusConfig) -> list[str]:
    return [hashlib.sha256(t.tobytes()).hexdigest() for t in unit_templates(config)]


def _segments(num_frames: int, config: SyntheticCorpusConfig, rng: np.random.Generator) -> np.ndarray:
    labels = np.empty(num_frames, dtype=np.int64)
    pos = 0
    while pos < num_frames:
        length = int(rng.integers(config.min_segment, config.max_segment + 1))
        labels[pos:pos + length] = rng.integers(config.num_units)
        pos += length
    return labels


def _drift(num_frames: int, basis: np.ndarray, config: SyntheticCorpusConfig, rng) -> np.ndarray:
    """Low-rank spectral drift, a first-order smoothed random walk per basis curve."""
    rho = np.exp(-1.0 / config.drift_smoothness)
    innov = rng.standard_normal((num_frames, basis.shape[0])) * np.sqrt(1 - rho**2)
    coeff = np.empty_like(innov)
    coeff[0] = rng.standard_normal(basis.shape[0])
    for t in range(1, num_frames):
        coeff[t] = rho * coeff[t - 1] + innov[t]
    return config.drift_std * coeff @ basis * np.sqrt(config.feature_dim / basis.shape[0])


def generate_synthetic_corpus(config: SyntheticCorpusConfig) -> list[FeatureSequence]:
    templates = unit_templates(config).astype(np.float64)
    F = config.feature_dim
    corpus = []
    for s in range(config.num_speakers):
        rng = np.random.default_rng([config.seed, 1, s])
        if config.identity_speakers:
            gain, offset, basis = 1.0, np.zeros(F), None
        else:
            gain = float(rng.uniform(0.6, 1.6))
            offset = rng.standard_normal(F) * 2.0
            basis = _smooth_basis(config.drift_rank, F, rng)
        for u in range(config.utterances_per_speaker):
            num_frames = int(rng.integers(config.min_frames, config.max_frames + 1))
            labels = _segments(num_frames, config, rng)
            frames = templates[labels]
            if config.noise_std > 0:
                frames = frames + config.noise_std * rng.standard_normal((num_frames, F))
            if basis is not None and config.drift_std > 0:
                frames = frames + _drift(num_frames, basis, config, rng)
            frames = gain * frames + offset
            corpus.append(FeatureSequence(
                frames.astype(np.float32),
                speaker_id=f"spk{s:03d}",
                utterance_id=f"spk{s:03d}-utt{u:04d}",
                labels=labels,
            ))
    return corpus


# --- feature files -------------------------------------------------------------

_HEADER = struct.Struct("<4sHHII")


def _pack_str(s: str) -> bytes:
    b = s.encode("utf-8")
    return struct.pack("<I", len(b)) + b


def features_to_bytes(seq: FeatureSequence) -> bytes:
    frames = np.ascontiguousarray(seq.frames, dtype="<f4")
    if not np.isfinite(frames).all():
        raise DataError(f"{seq.utterance_id}: refusing to write non-finite features")
    T, F = frames.shape
    flags = 1 if seq.labels is not None else 0
    buf = io.BytesIO()
    buf.write(_HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, flags, T, F))
    buf.write(_pack_str(seq.speaker_id))
    buf.write(_pack_str(seq.utterance_id))
    buf.write(frames.tobytes())
    if seq.labels is not None:
        if seq.labels.min(initial=0) < 0 or seq.labels.max(initial=0) > 0xFFFF:
            raise DataError("labels must fit in u16")
        buf.write(np.asarray(seq.labels, dtype="<u2").tobytes())
    return buf.getvalue()


def features_from_bytes(data: bytes, source: str = "<bytes>") -> FeatureSequence:
    if len(data) < 4 or data[:4] != FEATURE_MAGIC:
        raise BadMagicError(f"{source}: not a feature file (bad magic {data[:4]!r})")
    if len(data) < _HEADER.size:
        raise TruncatedPayloadError(f"{source}: header truncated")
    _, version, flags, T, F = _HEADER.unpack_from(data)
    if version != FEATURE_VERSION:
        raise VersionMismatchError(f"{source}: feature file version {version}, expected {FEATURE_VERSION}")
    if flags & ~1:
        raise FeatureFileError(f"{source}: unknown flag bits {flags:#x}")
    pos = _HEADER.size
    ids = []
    for _ in range(2):
        if pos + 4 > len(data):
            raise TruncatedPayloadError(f"{source}: truncated id field")
        (n,) = struct.unpack_from("<I", data, pos)
        pos += 4
        if pos + n > len(data):
            raise TruncatedPayloadError(f"{source}: truncated id field")
        try:
            ids.append(data[pos:pos + n].decode("utf-8"))
        except UnicodeDecodeError as exc:
            raise FeatureFileError(f"{source}: id field is not UTF-8 ({exc})") from exc
        pos += n
    need = T * F * 4 + (T * 2 if flags & 1 else 0)
    if len(data) - pos < need:
        raise TruncatedPayloadError(f"{source}: payload has {len(data) - pos} bytes, expected {need}")
    if len(data) - pos > need:
        raise FeatureFileError(f"{source}: {len(data) - pos - need} trailing bytes after the payload")
    frames = np.frombuffer(data, dtype="<f4", count=T * F, offset=pos).reshape(T, F).astype(np.float32)
    pos += T * F * 4
    labels = None
    if flags & 1:
        labels = np.frombuffer(data, dtype="<u2", count=T, offset=pos).astype(np.int64)
    return FeatureSequence(frames, ids[0], ids[1], labels=labels)


def write_features(seq: FeatureSequence, path) -> None:
    Path(path).write_bytes(features_to_bytes(seq))


def read_features(path) -> FeatureSequence:
    path = Path(path)
    return features_from_bytes(path.read_bytes(), str(path))


# --- corpus directories --------------------------------------------------------


def write_corpus(sequences: Sequence[FeatureSequence], out_dir) -> Path:
    """One feature file per utterance plus a tab-separated manifest."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = []
    for seq in sequences:
        rel = f"{seq.utterance_id}{FEATURE_SUFFIX}"
        write_features(seq, out_dir / rel)
        lines.append(f"{seq.utterance_id}\t{seq.speaker_id}\t{rel}\n")
    (out_dir / MANIFEST_NAME).write_text("".join(lines), encoding="utf-8")
    return out_dir / MANIFEST_NAME


def read_manifest(path) -> list[tuple[str, str, str]]:
    records = []
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise DataError(f"{path}:{n}: expected 3 tab-separated fields, got {len(parts)}")
        records.append((parts[0], parts[1], parts[2]))
    return records


def read_corpus(directory) -> list[FeatureSequence]:
    """Load a corpus directory (manifest order), or every feature file if no manifest."""
    directory = Path(directory)
    manifest = directory / MANIFEST_NAME
    if manifest.exists():
        out = []
        for utt, spk, rel in read_manifest(manifest):
            seq = read_features(directory / rel)
            out.append(replace(seq, speaker_id=spk, utterance_id=utt))
        return out
    files = sorted(directory.glob(f"*{FEATURE_SUFFIX}"))
    if not files:
        raise DataError(f"{directory}: no manifest and no {FEATURE_SUFFIX} files")
    return [read_features(f) for f in files]
