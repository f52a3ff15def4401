"""Log-Mel spectrogram frontend.

Geometry is fixed for 16 kHz mono audio: 25 ms Hann windows (400 samples)
zero-padded to a 512-point FFT, 10 ms hop (160 samples), 64 HTK Mel bands
between 125 Hz and 7500 Hz, and ``log(mel + 0.01)`` compression. Frames are
centered, so 0.96 s of audio gives exactly 96 frames.
"""

import csv
import math
import wave
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, InputTooShortError, ResampleRequiredError, WavFormatError

SAMPLE_RATE_HZ = 16000
WINDOW_S = 0.025
HOP_S = 0.010
NUM_MEL_BINS = 64
MEL_FMIN_HZ = 125.0
MEL_FMAX_HZ = 7500.0
LOG_OFFSET = 0.01
CONTEXT_S = 0.96
CONTEXT_FRAMES = 96


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray
    sample_rate_hz: int

    def __post_init__(self):
        if self.sample_rate_hz <= 0:
            raise ConfigError(f"sample_rate_hz must be positive, got {self.sample_rate_hz}")
        object.__setattr__(self, "samples", np.asarray(self.samples, dtype=np.float64).ravel())

    @property
    def duration_s(self):
        return len(self.samples) / self.sample_rate_hz


@dataclass(frozen=True)
class LogMelSpectrogram:
    frames: np.ndarray  # (num_frames, num_mel_bins)
    frame_hop_s: float = HOP_S
    frame_len_s: float = WINDOW_S

    @property
    def shape(self):
        return self.frames.shape


def _next_pow2(n):
    return 1 << max(0, math.ceil(math.log2(n)))


def _window(name, length):
    if name == "hann":
        # periodic Hann, the usual choice for STFT analysis
        return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(length) / length)
    if name in ("rect", "rectangular", "boxcar"):
        return np.ones(length)
    raise ConfigError(f"unknown window {name!r}")


def frame_signal(samples, win, hop, center=True):
    """Slice ``samples`` into frames of ``win`` samples every ``hop`` samples.

    With ``center=True`` frame ``t`` is centred on sample ``t * hop`` and
    ``ceil(len / hop)`` frames are produced; the signal is reflect-padded on
    the left by ``win // 2`` and on the right as far as the last frame needs.
    """
    x = np.asarray(samples, dtype=np.float64)
    n = len(x)
    if center:
        if n == 0:
            raise InputTooShortError("empty waveform")
        num_frames = -(-n // hop)
        left = win // 2
        right = max(0, (num_frames - 1) * hop + win - n - left)
        mode = "reflect" if n > 1 else "constant"
        x = np.pad(x, (left, right), mode=mode)
    else:
        if n < win:
            raise InputTooShortError(
                f"waveform has {n} samples, shorter than one {win}-sample window"
            )
        num_frames = 1 + (n - win) // hop
    idx = np.arange(win)[None, :] + hop * np.arange(num_frames)[:, None]
    return x[idx]


def stft_magnitude(w, window_s=WINDOW_S, hop_s=HOP_S, window="hann", center=True):
    """Magnitude STFT, shape ``(num_frames, n_fft // 2 + 1)``."""
    sr = w.sample_rate_hz
    win = int(round(window_s * sr))
    hop = int(round(hop_s * sr))
    if win < 2:
        raise ConfigError(f"window of {window_s} s is under 2 samples at {sr} Hz")
    if hop <= 0:
        raise ConfigError(f"hop must be positive, got {hop_s} s")
    n_fft = _next_pow2(win)
    frames = frame_signal(w.samples, win, hop, center=center) * _window(window, win)
    return np.abs(np.fft.rfft(frames, n=n_fft, axis=1))


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(num_fft_bins, sample_rate_hz, num_mel, fmin_hz, fmax_hz):
    """Triangular HTK-Mel weights, shape ``(num_fft_bins, num_mel)``.

    Triangles are laid out in the Mel domain; the DC bin never contributes.
    """
    if num_mel < 1:
        raise ConfigError("num_mel must be positive")
    if num_mel > num_fft_bins:
        raise ConfigError(f"num_mel={num_mel} exceeds the {num_fft_bins} FFT bins")
    if not 0.0 <= fmin_hz < fmax_hz <= sample_rate_hz / 2:
        raise ConfigError(
            f"need 0 <= fmin < fmax <= {sample_rate_hz / 2}, got {fmin_hz}, {fmax_hz}"
        )
    nyquist = sample_rate_hz / 2.0
    bin_mel = hz_to_mel(np.linspace(0.0, nyquist, num_fft_bins))[1:]
    edges = np.linspace(hz_to_mel(fmin_hz), hz_to_mel(fmax_hz), num_mel + 2)
    lower, center, upper = edges[:-2], edges[1:-1], edges[2:]
    up = (bin_mel[:, None] - lower) / (center - lower)
    down = (upper - bin_mel[:, None]) / (upper - center)
    weights = np.maximum(0.0, np.minimum(up, down))
    return np.vstack([np.zeros((1, num_mel)), weights])


def log_mel(spec, sample_rate_hz=SAMPLE_RATE_HZ, num_mel=NUM_MEL_BINS,
            fmin_hz=MEL_FMIN_HZ, fmax_hz=MEL_FMAX_HZ, eps=LOG_OFFSET):
    spec = np.asarray(spec, dtype=np.float64)
    fb = mel_filterbank(spec.shape[1], sample_rate_hz, num_mel, fmin_hz, fmax_hz)
    return LogMelSpectrogram(np.log(spec @ fb + eps))


def frontend(w):
    """Split ``w`` into 0.96 s contexts and return one 96x64 block per context.

    A trailing remainder shorter than a full context is dropped.
    """
    if w.sample_rate_hz != SAMPLE_RATE_HZ:
        raise ResampleRequiredError(
            f"expected {SAMPLE_RATE_HZ} Hz audio, got {w.sample_rate_hz} Hz; resample first"
        )
    ctx = int(round(CONTEXT_S * SAMPLE_RATE_HZ))
    n = len(w.samples) // ctx
    if n == 0:
        raise InputTooShortError(
            f"need at least {CONTEXT_S} s of audio, got {w.duration_s:.4f} s"
        )
    out = []
    for i in range(n):
        chunk = Waveform(w.samples[i * ctx:(i + 1) * ctx], SAMPLE_RATE_HZ)
        out.append(log_mel(stft_magnitude(chunk)))
    return out


def read_wav(path):
    """Read a mono 16-bit PCM WAV file into a :class:`Waveform`."""
    try:
        with wave.open(str(path), "rb") as f:
            channels = f.getnchannels()
            width = f.getsampwidth()
            rate = f.getframerate()
            raw = f.readframes(f.getnframes())
    except wave.Error as e:
        raise WavFormatError(f"{path}: {e}") from e
    if channels != 1:
        raise WavFormatError(f"{path}: expected mono audio, found {channels} channels")
    if width != 2:
        raise WavFormatError(f"{path}: expected 16-bit PCM, found {8 * width}-bit samples")
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    return Waveform(samples, rate)


def write_wav(path, w):
    pcm = np.clip(np.round(w.samples * 32767.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as f:
        f.setnchannels(1)
        f.setsampwidth(2)
        f.setframerate(w.sample_rate_hz)
        f.writeframes(pcm.tobytes())


def write_spectrogram_csv(path, spec):
    frames = spec.frames if isinstance(spec, LogMelSpectrogram) else np.asarray(spec)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow([f"mel{i}" for i in range(frames.shape[1])])
        for row in frames:
            writer.writerow([repr(float(v)) for v in row])
