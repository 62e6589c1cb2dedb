"""Minimal RIFF/WAVE reader and writer.

Supports the two layouts the engine produces and consumes: PCM 16-bit and
IEEE float32, mono or 2-channel, little-endian, canonical chunk order.
Unknown chunks are skipped on read.
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import ContractViolation, DataError

_FMT_PCM = 1
_FMT_FLOAT = 3


def write_wav(path, samples, sample_rate, fmt="float32"):
    """Write ``samples`` (shape (n,) or (n, channels)) to ``path``."""
    data = np.asarray(samples, dtype=np.float64)
    if data.ndim == 1:
        data = data[:, None]
    if data.ndim != 2 or data.shape[1] not in (1, 2):
        raise ContractViolation(f"expected mono or 2-channel samples, got shape {data.shape}")
    if not np.all(np.isfinite(data)):
        raise ContractViolation("non-finite samples")
    channels = data.shape[1]
    if fmt == "float32":
        payload = data.astype("<f4").tobytes()
        audio_format, bits = _FMT_FLOAT, 32
    elif fmt == "pcm16":
        clipped = np.clip(data, -1.0, 1.0)
        payload = (clipped * 32767.0).round().astype("<i2").tobytes()
        audio_format, bits = _FMT_PCM, 16
    else:
        raise ContractViolation(f"unsupported wav format {fmt!r}")
    block_align = channels * bits // 8
    byte_rate = int(sample_rate) * block_align
    header = struct.pack(
        "<4sI4s4sIHHIIHH4sI",
        b"RIFF",
        36 + len(payload),
        b"WAVE",
        b"fmt ",
        16,
        audio_format,
        channels,
        int(sample_rate),
        byte_rate,
        block_align,
        bits,
        b"data",
        len(payload),
    )
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload)


def read_wav(path):
    """Read a WAV file; returns (samples float64, sample_rate).

    Mono files come back as shape (n,), stereo as (n, 2).
    """
    with open(path, "rb") as fh:
        riff, _size, wave = struct.unpack("<4sI4s", fh.read(12))
        if riff != b"RIFF" or wave != b"WAVE":
            raise DataError(f"{path}: not a RIFF/WAVE file")
        fmt = None
        payload = None
        while True:
            head = fh.read(8)
            if len(head) < 8:
                break
            chunk_id, chunk_size = struct.unpack("<4sI", head)
            body = fh.read(chunk_size)
            if chunk_size % 2 == 1:
                fh.read(1)
            if chunk_id == b"fmt ":
                fmt = struct.unpack("<HHIIHH", body[:16])
            elif chunk_id == b"data":
                payload = body
        if fmt is None:
            raise DataError(f"{path}: missing fmt chunk")
        if payload is None:
            raise DataError(f"{path}: missing data chunk")
    audio_format, channels, sample_rate, _byte_rate, _block_align, bits = fmt
    if audio_format == _FMT_PCM and bits == 16:
        data = np.frombuffer(payload, dtype="<i2").astype(np.float64) / 32767.0
    elif audio_format == _FMT_FLOAT and bits == 32:
        data = np.frombuffer(payload, dtype="<f4").astype(np.float64)
    else:
        raise DataError(f"{path}: unsupported format ({audio_format}, {bits}-bit)")
    if channels not in (1, 2):
        raise DataError(f"{path}: unsupported channel count {channels}")
    if channels == 2:
        return data.reshape(-1, 2), int(sample_rate)
    return data, int(sample_rate)
