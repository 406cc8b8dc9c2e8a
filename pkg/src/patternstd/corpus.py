"""Audio ingest, MFCC features, feature files and corpus manifests.

Feature file layout (all little-endian)::

    bytes 0..3    magic b"FEAT"
    uint32        format version (1)
    uint32        number of frames
    uint32        feature dimension F
    float32       frame shift (s)
    float32       frame length (s)
    float32[...]  frames, row-major (num_frames x F)

A corpus manifest is a tab-separated text file, one utterance per line::

    id  role  path  judgments

``role`` is ``document`` or ``query``; ``judgments`` is a comma-separated
list of relevant document ids for queries and ``-`` otherwise.  Lines
starting with ``#`` carry ``key=value`` metadata.
"""

import os
import struct
import wave
from dataclasses import dataclass, field, asdict

import numpy as np
from scipy.fft import dct

ALLOWED_RATES = (8000, 16000, 22050, 44100, 48000)
FEAT_MAGIC = b"FEAT"
FEAT_HEADER = struct.Struct("<4sIIIff")


class CorpusError(Exception):
    """Bad audio, feature or manifest input."""


@dataclass(frozen=True)
class Utterance:
    id: str
    audio_path: str
    sample_rate: int = 16000
    duration: float = 0.0

    def __post_init__(self):
        if not self.id or any(c.isspace() for c in self.id):
            raise CorpusError(f"invalid utterance id {self.id!r}")
        if self.sample_rate not in ALLOWED_RATES:
            raise CorpusError(f"{self.id}: unsupported sample rate {self.sample_rate}")
        if not self.duration > 0:
            raise CorpusError(f"{self.id}: duration must be positive")


@dataclass
class FeatureSequence:
    utterance_id: str
    frames: np.ndarray
    frame_shift: float = 0.010
    frame_length: float = 0.025

    def __post_init__(self):
        self.frames = np.atleast_2d(np.asarray(self.frames, dtype=np.float64))
        if self.frames.shape[0] < 1:
            raise CorpusError(f"{self.utterance_id}: empty feature sequence")

    @property
    def num_frames(self):
        return self.frames.shape[0]

    @property
    def dim(self):
        return self.frames.shape[1]


@dataclass
class CorpusManifest:
    documents: list
    queries: list
    relevance_judgments: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        doc_ids = [u.id for u in self.documents]
        if len(set(doc_ids)) != len(doc_ids):
            raise CorpusError("duplicate document ids")
        q_ids = [u.id for u in self.queries]
        if len(set(q_ids)) != len(q_ids):
            raise CorpusError("duplicate query ids")
        if set(doc_ids) & set(q_ids):
            raise CorpusError("query ids overlap document ids")
        known = set(doc_ids)
        for q, rel in self.relevance_judgments.items():
            missing = set(rel) - known
            if missing:
                raise CorpusError(f"query {q} judges unknown documents {sorted(missing)[:3]}")

    @property
    def utterances(self):
        return list(self.documents) + list(self.queries)


@dataclass(frozen=True)
class FeatureConfig:
    """MFCC front-end settings; window and shift in seconds."""

    window: float = 0.025
    shift: float = 0.010
    pre_emphasis: float = 0.97
    n_filters: int = 26
    n_ceps: int = 13
    delta_window: int = 2
    cmn: bool = False
    low_freq: float = 0.0
    high_freq: float = None

    def to_dict(self):
        return asdict(self)


# --------------------------------------------------------------------------
# audio


def load_audio(path):
    """Read a 16-bit PCM WAV file.

    Returns ``(samples, sample_rate)`` with samples scaled to [-1, 1).  For
    multi-channel files only the first channel is kept.
    """
    if not os.path.exists(path):
        raise CorpusError(f"{path}: unreadable file (does not exist)")
    try:
        with wave.open(str(path), "rb") as w:
            n_channels = w.getnchannels()
            width = w.getsampwidth()
            rate = w.getframerate()
            raw = w.readframes(w.getnframes())
    except (wave.Error, EOFError, struct.error) as exc:
        raise CorpusError(f"{path}: unsupported encoding ({exc})") from None
    except OSError as exc:
        raise CorpusError(f"{path}: unreadable file ({exc})") from None
    if width != 2:
        raise CorpusError(f"{path}: unsupported encoding ({8 * width}-bit samples)")
    samples = np.frombuffer(raw, dtype="<i2")
    if n_channels > 1:
        samples = samples[: len(samples) - len(samples) % n_channels]
        samples = samples.reshape(-1, n_channels)[:, 0]
    if samples.size == 0:
        raise CorpusError(f"{path}: zero-length audio")
    return samples.astype(np.float64) / 32768.0, rate


def write_wav(path, samples, sample_rate):
    """Write mono float samples in [-1, 1] as 16-bit PCM."""
    pcm = np.clip(np.round(np.asarray(samples) * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(int(sample_rate))
        w.writeframes(pcm.tobytes())


# --------------------------------------------------------------------------
# MFCC


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_filters, n_fft, sample_rate, low_freq=0.0, high_freq=None):
    """Triangular filters on the HTK mel scale, shape (n_filters, n_fft//2+1)."""
    high_freq = sample_rate / 2.0 if high_freq is None else high_freq
    mel_points = np.linspace(hz_to_mel(low_freq), hz_to_mel(high_freq), n_filters + 2)
    hz_points = mel_to_hz(mel_points)
    bin_freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    fb = np.zeros((n_filters, bin_freqs.size))
    for i in range(n_filters):
        lo, mid, hi = hz_points[i], hz_points[i + 1], hz_points[i + 2]
        up = (bin_freqs - lo) / (mid - lo)
        down = (hi - bin_freqs) / (hi - mid)
        fb[i] = np.maximum(0.0, np.minimum(up, down))
    return fb


def frame_signal(x, frame_len, hop):
    n = 1 + (len(x) - frame_len) // hop
    idx = np.arange(frame_len)[None, :] + hop * np.arange(n)[:, None]
    return x[idx]


def mel_spectrum(waveform, sample_rate, config=FeatureConfig()):
    """Log mel filterbank energies, shape (num_frames, n_filters)."""
    x = np.asarray(waveform, dtype=np.float64)
    frame_len = int(round(config.window * sample_rate))
    hop = int(round(config.shift * sample_rate))
    if x.size < frame_len:
        raise CorpusError(
            f"waveform of {x.size} samples is shorter than one {frame_len}-sample window")
    if config.pre_emphasis > 0:
        x = np.append(x[0], x[1:] - config.pre_emphasis * x[:-1])
    frames = frame_signal(x, frame_len, hop) * np.hamming(frame_len)
    n_fft = 1 << (frame_len - 1).bit_length()
    power = np.abs(np.fft.rfft(frames, n_fft)) ** 2 / n_fft
    fb = mel_filterbank(config.n_filters, n_fft, sample_rate, config.low_freq, config.high_freq)
    return np.log(np.maximum(power @ fb.T, 1e-10))


def deltas(feats, window=2):
    """Regression deltas over +-window frames with edge replication."""
    T = feats.shape[0]
    padded = np.pad(feats, ((window, window), (0, 0)), mode="edge")
    denom = 2.0 * sum(k * k for k in range(1, window + 1))
    out = np.zeros_like(feats)
    for k in range(1, window + 1):
        out += k * (padded[window + k: window + k + T] - padded[window - k: window - k + T])
    return out / denom


def extract_features(waveform, sample_rate=16000, config=FeatureConfig(), utterance_id="utt"):
    """MFCCs (C0 included) with deltas and delta-deltas.

    The number of frames is ``floor((num_samples - window) / shift) + 1``.
    """
    logmel = mel_spectrum(waveform, sample_rate, config)
    ceps = dct(logmel, type=2, axis=1, norm="ortho")[:, : config.n_ceps]
    if config.cmn:
        ceps = ceps - ceps.mean(axis=0)
    d1 = deltas(ceps, config.delta_window)
    d2 = deltas(d1, config.delta_window)
    return FeatureSequence(
        utterance_id, np.hstack([ceps, d1, d2]),
        frame_shift=config.shift, frame_length=config.window)


# --------------------------------------------------------------------------
# feature files


def write_features(path, seq):
    frames = np.ascontiguousarray(seq.frames, dtype="<f4")
    with open(path, "wb") as f:
        f.write(FEAT_HEADER.pack(FEAT_MAGIC, 1, frames.shape[0], frames.shape[1],
                                 seq.frame_shift, seq.frame_length))
        f.write(frames.tobytes())


def read_features(path, utterance_id=None):
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < FEAT_HEADER.size:
        raise CorpusError(f"{path}: truncated feature header")
    magic, version, n, dim, shift, length = FEAT_HEADER.unpack_from(data)
    if magic != FEAT_MAGIC or version != 1:
        raise CorpusError(f"{path}: not a feature file")
    expected = FEAT_HEADER.size + 4 * n * dim
    if len(data) != expected:
        raise CorpusError(f"{path}: expected {expected} bytes, found {len(data)}")
    frames = np.frombuffer(data, dtype="<f4", offset=FEAT_HEADER.size).reshape(n, dim)
    if utterance_id is None:
        utterance_id = os.path.splitext(os.path.basename(path))[0]
    return FeatureSequence(utterance_id, frames.astype(np.float64),
                           frame_shift=float(shift), frame_length=float(length))


def quantize(frames):
    """Round to the float32 grid used on disk."""
    return np.asarray(frames, dtype=np.float32).astype(np.float64)


# --------------------------------------------------------------------------
# manifests


def write_manifest(path, manifest):
    lines = [f"# {k}={manifest.meta[k]}" for k in sorted(manifest.meta)]
    for role, utts in (("document", manifest.documents), ("query", manifest.queries)):
        for u in utts:
            if role == "query" and u.id in manifest.relevance_judgments:
                judg = ",".join(sorted(manifest.relevance_judgments[u.id])) or "-"
            else:
                judg = "-"
            lines.append("\t".join([u.id, role, u.audio_path, judg,
                                    str(u.sample_rate), repr(float(u.duration))]))
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def read_manifest(path):
    """Parse a manifest; relative paths resolve against the manifest's directory."""
    base = os.path.dirname(os.path.abspath(path))
    docs, queries, judgments, meta = [], [], {}, {}
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            if line.startswith("#"):
                key, _, value = line[1:].strip().partition("=")
                meta[key.strip()] = value.strip()
                continue
            cols = line.split("\t")
            if len(cols) < 3:
                raise CorpusError(f"{path}:{lineno}: expected at least 3 tab-separated fields")
            uid, role, upath = cols[:3]
            judg = cols[3] if len(cols) > 3 else "-"
            rate = int(cols[4]) if len(cols) > 4 else 16000
            dur = float(cols[5]) if len(cols) > 5 else 1.0
            if not os.path.isabs(upath):
                upath = os.path.join(base, upath)
            utt = Utterance(uid, upath, rate, dur)
            if role == "document":
                docs.append(utt)
            elif role == "query":
                queries.append(utt)
                judgments[uid] = set() if judg == "-" else set(judg.split(","))
            else:
                raise CorpusError(f"{path}:{lineno}: unknown role {role!r}")
    return CorpusManifest(docs, queries, judgments, meta)
