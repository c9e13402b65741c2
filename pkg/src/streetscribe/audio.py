"""Minimal WAV helpers (16-bit PCM mono) built on the stdlib wave module.

Enough to write deterministic synthetic renders and cut clips out of them;
no resampling, no decoding of foreign formats.
"""

from __future__ import annotations

import wave
from pathlib import Path

import numpy as np

from .errors import ValidationError


def write_wav(path: str | Path, samples: np.ndarray, sample_rate_hz: int) -> None:
    data = np.asarray(samples, dtype=np.int16)
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(sample_rate_hz)
        fh.writeframes(data.tobytes())


def wav_bytes(samples: np.ndarray, sample_rate_hz: int) -> bytes:
    import io

    buffer = io.BytesIO()
    data = np.asarray(samples, dtype=np.int16)
    with wave.open(buffer, "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(sample_rate_hz)
        fh.writeframes(data.tobytes())
    return buffer.getvalue()


def wav_duration_s(path: str | Path) -> float:
    with wave.open(str(path), "rb") as fh:
        return fh.getnframes() / fh.getframerate()


def slice_wav(src: str | Path, dst: str | Path, start_s: float, end_s: float) -> None:
    """Copy [start_s, end_s) of src into dst, clamped to the file."""
    if end_s <= start_s:
        raise ValidationError(f"empty clip [{start_s}, {end_s})")
    with wave.open(str(src), "rb") as fh:
        rate = fh.getframerate()
        n_frames = fh.getnframes()
        first = max(0, int(round(start_s * rate)))
        last = min(n_frames, int(round(end_s * rate)))
        fh.setpos(first)
        frames = fh.readframes(max(0, last - first))
        params = fh.getparams()
    with wave.open(str(dst), "wb") as out:
        out.setparams(params)
        out.writeframes(frames)


def deterministic_tone(duration_s: float, sample_rate_hz: int, seed: int) -> np.ndarray:
    """Low-amplitude seeded noise burst, stable across runs and platforms."""
    n = int(round(duration_s * sample_rate_hz))
    rng = np.random.default_rng(seed)
    return (rng.integers(-1200, 1200, size=n)).astype(np.int16)
