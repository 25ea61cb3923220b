"""WAV ingestion, PCM16 writing, and band-limited resampling to 16 kHz."""

from __future__ import annotations

import math
import struct
import wave
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.signal import resample_poly

from .errors import EmptyAudio, ParseError, UnsupportedFormat, UnsupportedRate

TARGET_SR = 16000
MIN_SR = 4000

_WAVE_FORMAT_PCM = 1
_WAVE_FORMAT_IEEE_FLOAT = 3
_WAVE_FORMAT_EXTENSIBLE = 0xFFFE


@dataclass
class AudioClip:
    """Mono audio at a known rate; samples are float64, nominally in [-1, 1]."""

    samples: np.ndarray
    sample_rate: int

    def duration_s(self) -> float:
        return len(self.samples) / self.sample_rate


def load_wav(path: Path | str) -> AudioClip:
    """Read a RIFF/WAVE file: PCM 16/32-bit integer or 32/64-bit IEEE float.

    Multichannel audio is averaged to mono; integer PCM is scaled to
    [-1, 1] by 2^(bits-1). The sample rate is preserved as read.
    """
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:4] != b"RIFF" or raw[8:12] != b"WAVE":
        raise ParseError(f"{path}: not a RIFF/WAVE file")

    fmt = None
    data = None
    pos = 12
    while pos + 8 <= len(raw):
        chunk_id = raw[pos : pos + 4]
        (size,) = struct.unpack("<I", raw[pos + 4 : pos + 8])
        body = raw[pos + 8 : pos + 8 + size]
        if len(body) < size:
            raise ParseError(f"{path}: truncated {chunk_id!r} chunk")
        if chunk_id == b"fmt ":
            if size < 16:
                raise ParseError(f"{path}: fmt chunk too small")
            fmt = struct.unpack("<HHIIHH", body[:16])
            if fmt[0] == _WAVE_FORMAT_EXTENSIBLE:
                if size < 40:
                    raise ParseError(f"{path}: extensible fmt chunk too small")
                (subformat,) = struct.unpack("<H", body[24:26])
                fmt = (subformat,) + fmt[1:]
        elif chunk_id == b"data":
            data = body
        pos += 8 + size + (size & 1)  # chunks are word-aligned

    if fmt is None or data is None:
        raise ParseError(f"{path}: missing fmt or data chunk")
    audio_format, channels, sample_rate, _, _, bits = fmt
    if channels < 1:
        raise ParseError(f"{path}: zero channels")

    if audio_format == _WAVE_FORMAT_PCM and bits == 16:
        samples = np.frombuffer(data[: len(data) - len(data) % 2], dtype="<i2").astype(np.float64)
        samples /= 2.0**15
    elif audio_format == _WAVE_FORMAT_PCM and bits == 32:
        samples = np.frombuffer(data[: len(data) - len(data) % 4], dtype="<i4").astype(np.float64)
        samples /= 2.0**31
    elif audio_format == _WAVE_FORMAT_IEEE_FLOAT and bits == 32:
        samples = np.frombuffer(data[: len(data) - len(data) % 4], dtype="<f4").astype(np.float64)
    elif audio_format == _WAVE_FORMAT_IEEE_FLOAT and bits == 64:
        samples = np.frombuffer(data[: len(data) - len(data) % 8], dtype="<f8").astype(np.float64)
    else:
        raise UnsupportedFormat(f"{path}: format tag {audio_format}, {bits}-bit not supported")

    n_frames = len(samples) // channels
    if n_frames == 0:
        raise EmptyAudio(f"{path}: no samples")
    samples = samples[: n_frames * channels]
    if channels > 1:
        samples = samples.reshape(n_frames, channels).mean(axis=1)
    return AudioClip(samples=samples, sample_rate=int(sample_rate))


def save_wav_pcm16(path: Path | str, samples: np.ndarray, sample_rate: int) -> None:
    """Write mono float samples as 16-bit PCM, clipping to the valid range."""
    pcm = np.clip(np.round(np.asarray(samples) * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(sample_rate)
        fh.writeframes(pcm.tobytes())


def resample_to_16k(clip: AudioClip) -> AudioClip:
    """Polyphase windowed-sinc resampling to 16 kHz (identity at 16 kHz)."""
    if clip.sample_rate < MIN_SR:
        raise UnsupportedRate(f"sample rate {clip.sample_rate} < {MIN_SR}")
    if clip.sample_rate == TARGET_SR:
        return clip
    g = math.gcd(TARGET_SR, clip.sample_rate)
    out = resample_poly(clip.samples, TARGET_SR // g, clip.sample_rate // g)
    return AudioClip(samples=out, sample_rate=TARGET_SR)
