"""PCM ingestion and log-mel feature extraction.

WAV bytes come in, mono 16 kHz float32 comes out, and the feature path
turns that into 80-bin log-mel matrices at a 10 ms hop. A small streaming
framer produces, chunk by chunk, exactly the frames the offline path
would produce on the concatenated audio.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

SAMPLE_RATE = 16000
WINDOW = 400  # 25 ms analysis window
HOP = 160  # 10 ms hop
HOP_S = HOP / SAMPLE_RATE
N_MELS = 80
N_FFT = 400
LOG_FLOOR = 1e-10

FEATURE_MAGIC = b"U2FT"


@dataclass
class AudioBuffer:
    """Mono float32 samples in [-1, 1] at a fixed sample rate."""

    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE


@dataclass
class FeatureMatrix:
    """Log-mel energies, one row per frame."""

    values: np.ndarray  # float32, (frames, N_MELS)
    hop: float = HOP_S

    @property
    def frames(self) -> int:
        return self.values.shape[0]

    @property
    def bins(self) -> int:
        return self.values.shape[1]


def decode_wav(data: bytes) -> AudioBuffer:
    """Parse a RIFF/WAVE container into a mono 16 kHz AudioBuffer.

    Accepts PCM16 and float32 payloads, mono or multi-channel, at any
    sample rate. Channels are averaged; other rates are resampled by
    linear interpolation.
    """
    if len(data) < 12 or data[:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise ValueError("decode_wav: not a RIFF/WAVE file")
    fmt = None
    payload = None
    pos = 12
    while pos + 8 <= len(data):
        chunk_id = data[pos : pos + 4]
        size = int.from_bytes(data[pos + 4 : pos + 8], "little")
        body = data[pos + 8 : pos + 8 + size]
        if chunk_id == b"fmt ":
            fmt = body
        elif chunk_id == b"data":
            payload = body
        pos += 8 + size + (size & 1)
    if fmt is None or len(fmt) < 16:
        raise ValueError("decode_wav: missing or short fmt chunk")
    audio_format, channels, rate, _, _, bits = struct.unpack("<HHIIHH", fmt[:16])
    if payload is None or len(payload) == 0:
        raise ValueError("decode_wav: empty audio payload")
    if channels < 1:
        raise ValueError("decode_wav: invalid channel count")

    if audio_format == 1 and bits == 16:
        x = np.frombuffer(payload, dtype="<i2").astype(np.float32) / 32768.0
    elif audio_format == 3 and bits == 32:
        x = np.frombuffer(payload, dtype="<f4").astype(np.float32)
    else:
        raise ValueError(
            f"decode_wav: unsupported codec (format={audio_format}, bits={bits})"
        )

    if channels > 1:
        usable = (len(x) // channels) * channels
        x = x[:usable].reshape(-1, channels).mean(axis=1).astype(np.float32)
    if rate != SAMPLE_RATE:
        x = resample_linear(x, rate, SAMPLE_RATE)
    return AudioBuffer(np.ascontiguousarray(x, dtype=np.float32), SAMPLE_RATE)


def resample_linear(samples: np.ndarray, src_rate: int, dst_rate: int) -> np.ndarray:
    """Resample by linear interpolation, preserving total duration."""
    if src_rate == dst_rate:
        return np.asarray(samples, dtype=np.float32)
    x = np.asarray(samples, dtype=np.float64)
    n_out = int(round(len(x) * dst_rate / src_rate))
    positions = np.arange(n_out) * (src_rate / dst_rate)
    return np.interp(positions, np.arange(len(x)), x).astype(np.float32)


def _hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def _mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


_MEL_BANK: np.ndarray | None = None


def mel_filterbank() -> np.ndarray:
    """Triangular mel filters over the rFFT bins, spanning 0 to 8 kHz."""
    global _MEL_BANK
    if _MEL_BANK is None:
        freqs = np.fft.rfftfreq(N_FFT, d=1.0 / SAMPLE_RATE)
        mel_pts = np.linspace(_hz_to_mel(0.0), _hz_to_mel(SAMPLE_RATE / 2), N_MELS + 2)
        hz_pts = _mel_to_hz(mel_pts)
        bank = np.zeros((N_MELS, len(freqs)), dtype=np.float64)
        for m in range(N_MELS):
            left, center, right = hz_pts[m], hz_pts[m + 1], hz_pts[m + 2]
            up = (freqs - left) / (center - left)
            down = (right - freqs) / (right - center)
            bank[m] = np.clip(np.minimum(up, down), 0.0, None)
        _MEL_BANK = bank.astype(np.float32)
    return _MEL_BANK


def mel_filter_centers() -> np.ndarray:
    """Center frequency in Hz of each mel filter."""
    mel_pts = np.linspace(_hz_to_mel(0.0), _hz_to_mel(SAMPLE_RATE / 2), N_MELS + 2)
    return _mel_to_hz(mel_pts)[1:-1]


_HANN = (0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(WINDOW) / WINDOW)).astype(
    np.float32
)


def _frames_to_logmel(frames: np.ndarray) -> np.ndarray:
    spec = np.fft.rfft(frames * _HANN, n=N_FFT, axis=-1)
    power = (spec.real**2 + spec.imag**2).astype(np.float32)
    mel = power @ mel_filterbank().T
    return np.log(np.maximum(mel, LOG_FLOOR)).astype(np.float32)


def log_mel(audio: AudioBuffer) -> FeatureMatrix:
    """80-bin log-mel features: 25 ms Hann window, 10 ms hop, natural log.

    Mel energies are floored at 1e-10 before the log, so silence maps to
    log(1e-10) in every cell.
    """
    if audio.sample_rate != SAMPLE_RATE:
        raise ValueError(f"log_mel: expected {SAMPLE_RATE} Hz audio")
    x = np.asarray(audio.samples, dtype=np.float32)
    if len(x) < WINDOW:
        raise ValueError("log_mel: audio shorter than one analysis window")
    n_frames = (len(x) - WINDOW) // HOP + 1
    frames = np.lib.stride_tricks.sliding_window_view(x, WINDOW)[::HOP][:n_frames]
    return FeatureMatrix(_frames_to_logmel(frames))


class StreamingFramer:
    """Incremental log-mel extraction.

    push() returns the frames whose windows are now fully available;
    concatenated over a stream they equal the offline log_mel output on
    the concatenated audio within float32 rounding (the FFT library may
    batch differently, so equality is to 1e-6, not bitwise).
    """

    def __init__(self):
        self._buf = np.zeros(0, dtype=np.float32)

    def push(self, samples: np.ndarray) -> np.ndarray:
        self._buf = np.concatenate([self._buf, np.asarray(samples, dtype=np.float32)])
        if len(self._buf) < WINDOW:
            return np.zeros((0, N_MELS), dtype=np.float32)
        n = (len(self._buf) - WINDOW) // HOP + 1
        frames = np.lib.stride_tricks.sliding_window_view(self._buf, WINDOW)[::HOP][:n]
        out = _frames_to_logmel(frames)
        self._buf = self._buf[n * HOP :]
        return out


def save_features(fm: FeatureMatrix, path) -> None:
    """Write a FeatureMatrix as magic + u32 frames + u32 bins + f32 hop + f32 data."""
    header = struct.pack("<4sIIf", FEATURE_MAGIC, fm.frames, fm.bins, fm.hop)
    with open(path, "wb") as f:
        f.write(header)
        f.write(np.ascontiguousarray(fm.values, dtype="<f4").tobytes())


def load_features(path) -> FeatureMatrix:
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < 16 or data[:4] != FEATURE_MAGIC:
        raise ValueError("load_features: bad magic")
    _, frames, bins, hop = struct.unpack("<4sIIf", data[:16])
    body = np.frombuffer(data[16:], dtype="<f4")
    if body.size != frames * bins:
        raise ValueError("load_features: payload size mismatch")
    return FeatureMatrix(body.reshape(frames, bins).astype(np.float32), float(hop))
