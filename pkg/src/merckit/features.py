"""Video frame sampling, audio segmentation, modality encoders, and adapters.

Encoders are pluggable; the deterministic projection encoders here are small
stand-ins that keep desk-scale runs media-free. Adapters are trainable affine
maps that unify encoder widths with the language model embedding width.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Protocol

import numpy as np
import torch
from torch import nn

from .corpus import Utterance
from .prompting import PlaceholderSpec


class EncodingError(RuntimeError):
    """Raised when an encoder fails or produces invalid output."""


class ShapeError(ValueError):
    """Raised on feature/adapter width mismatches."""


@dataclass(frozen=True)
class FrameSampleSpec:
    n_frames: int = 64
    height: int = 336
    width: int = 336
    rng_seed: int = 0

    def __post_init__(self) -> None:
        if self.n_frames < 1:
            raise ValueError("n_frames must be >= 1")
        if self.height <= 0 or self.width <= 0:
            raise ValueError("frame height and width must be positive")


@dataclass(frozen=True)
class AudioFrameSpec:
    stride_seconds: float = 2.0
    # a trailing partial window shorter than this merges into the previous one
    min_tail_seconds: float = 0.5

    def __post_init__(self) -> None:
        if self.stride_seconds <= 0:
            raise ValueError("stride_seconds must be positive")


@dataclass
class ModalityFeatures:
    video_features: torch.Tensor
    audio_features: torch.Tensor
    adapted_video: torch.Tensor
    adapted_audio: torch.Tensor

    def __post_init__(self) -> None:
        if self.adapted_video.shape[0] != self.video_features.shape[0]:
            raise ShapeError("adapted video row count differs from encoder rows")
        if self.adapted_audio.shape[0] != self.audio_features.shape[0]:
            raise ShapeError("adapted audio row count differs from encoder rows")
        if self.adapted_video.shape[1] != self.adapted_audio.shape[1]:
            raise ShapeError("adapted video and audio widths differ")


def sample_frame_indices(total_frames: int, spec: FrameSampleSpec) -> list[int]:
    """Sample spec.n_frames frame indices in ascending order.

    Sampling is without replacement when the clip has enough frames, with
    replacement otherwise, and is a pure function of (total_frames, spec).
    """
    if total_frames <= 0:
        raise ValueError("total_frames must be >= 1")
    rng = np.random.default_rng((spec.rng_seed, total_frames))
    with_replacement = total_frames < spec.n_frames
    indices = rng.choice(total_frames, size=spec.n_frames, replace=with_replacement)
    return sorted(int(i) for i in indices)


def segment_audio(
    duration_seconds: float, spec: AudioFrameSpec
) -> list[tuple[float, float]]:
    """Tile [0, duration) with stride-sized windows.

    A trailing partial window is kept when it is at least
    spec.min_tail_seconds long, otherwise it merges into the previous
    window. At least one window is always returned.
    """
    if duration_seconds <= 0:
        raise ValueError("duration_seconds must be positive")
    stride = spec.stride_seconds
    n_full = int(math.floor(duration_seconds / stride + 1e-9))
    tail = duration_seconds - n_full * stride
    windows = [(i * stride, (i + 1) * stride) for i in range(n_full)]
    if n_full == 0:
        return [(0.0, duration_seconds)]
    if tail > 1e-9:
        if tail >= spec.min_tail_seconds:
            windows.append((n_full * stride, duration_seconds))
        else:
            start, _ = windows[-1]
            windows[-1] = (start, duration_seconds)
    else:
        # land exactly on the duration so the windows tile the interval
        start, _ = windows[-1]
        windows[-1] = (start, duration_seconds)
    return windows


class VideoEncoder(Protocol):
    dim: int

    def encode(self, frames: np.ndarray) -> np.ndarray: ...


class AudioEncoder(Protocol):
    dim: int

    def encode(self, windows: list[np.ndarray]) -> np.ndarray: ...


def _validate_rows(out: np.ndarray, n_expected: int, what: str) -> np.ndarray:
    out = np.asarray(out, dtype=np.float64)
    if out.ndim != 2 or out.shape[0] != n_expected:
        raise EncodingError(
            f"{what} encoder returned shape {out.shape}, expected ({n_expected}, d)"
        )
    bad = ~np.isfinite(out)
    if bad.any():
        row = int(np.argwhere(bad)[0][0])
        raise EncodingError(f"{what} encoder produced non-finite values at row {row}")
    return out


def encode_video(frames: np.ndarray, encoder: VideoEncoder) -> np.ndarray:
    """One feature row per frame; output must be finite."""
    frames = np.asarray(frames)
    if frames.ndim < 3 or frames.shape[0] < 1:
        raise ValueError("frames must be a non-empty batch of images")
    try:
        out = encoder.encode(frames)
    except EncodingError:
        raise
    except Exception as exc:
        raise EncodingError(f"video encoder failed: {exc}") from exc
    return _validate_rows(out, frames.shape[0], "video")


def encode_audio(windows: list[np.ndarray], encoder: AudioEncoder) -> np.ndarray:
    """One feature row per audio window; output must be finite."""
    if not windows:
        raise ValueError("windows must be non-empty")
    try:
        out = encoder.encode(windows)
    except EncodingError:
        raise
    except Exception as exc:
        raise EncodingError(f"audio encoder failed: {exc}") from exc
    return _validate_rows(out, len(windows), "audio")


class ProjectionVideoEncoder:
    """Deterministic stand-in: flatten each frame and project to `dim`.

    Linear with no bias, so identical frames give identical rows and zero
    frames give zero features.
    """

    def __init__(self, dim: int = 32, seed: int = 0):
        self.dim = dim
        self.seed = seed
        self._matrices: dict[int, np.ndarray] = {}

    def _matrix(self, in_dim: int) -> np.ndarray:
        if in_dim not in self._matrices:
            rng = np.random.default_rng((self.seed, in_dim))
            self._matrices[in_dim] = rng.standard_normal((in_dim, self.dim)) / math.sqrt(
                in_dim
            )
        return self._matrices[in_dim]

    def encode(self, frames: np.ndarray) -> np.ndarray:
        flat = np.asarray(frames, dtype=np.float64).reshape(frames.shape[0], -1)
        return flat @ self._matrix(flat.shape[1])


class MomentAudioEncoder:
    """Deterministic stand-in: per-window signal moments projected to `dim`.

    Purely multiplicative, so silent windows map to zero rows.
    """

    N_MOMENTS = 4

    def __init__(self, dim: int = 32, seed: int = 0):
        self.dim = dim
        rng = np.random.default_rng((seed, self.N_MOMENTS))
        self._matrix = rng.standard_normal((self.N_MOMENTS, dim)) / math.sqrt(
            self.N_MOMENTS
        )

    def encode(self, windows: list[np.ndarray]) -> np.ndarray:
        moments = np.zeros((len(windows), self.N_MOMENTS), dtype=np.float64)
        for i, w in enumerate(windows):
            w = np.asarray(w, dtype=np.float64).ravel()
            if w.size == 0:
                continue
            moments[i] = (
                math.sqrt(float(np.mean(w**2))),
                float(np.mean(np.abs(w))),
                float(np.max(np.abs(w))),
                float(np.std(w)),
            )
        return moments @ self._matrix


class FeatureAdapter(nn.Module):
    """Affine map from encoder width to model width; deeper stacks via `depth`."""

    def __init__(
        self,
        d_in: int,
        d_model: int,
        depth: int = 1,
        seed: int = 0,
        dtype: torch.dtype = torch.float32,
    ):
        super().__init__()
        if depth < 1:
            raise ValueError("adapter depth must be >= 1")
        self.d_in = d_in
        self.d_model = d_model
        gen = torch.Generator().manual_seed(seed)
        widths = [d_in] + [d_model] * depth
        layers: list[nn.Module] = []
        for i in range(depth):
            layer = nn.Linear(widths[i], widths[i + 1], dtype=dtype)
            bound = 1.0 / math.sqrt(widths[i])
            with torch.no_grad():
                layer.weight.uniform_(-bound, bound, generator=gen)
                layer.bias.uniform_(-bound, bound, generator=gen)
            layers.append(layer)
            if i < depth - 1:
                layers.append(nn.ReLU())
        self.net = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.d_in:
            raise ShapeError(
                f"adapter expects width {self.d_in}, got {x.shape[-1]}"
            )
        return self.net(x)


def identity_adapter(d: int, dtype: torch.dtype = torch.float64) -> FeatureAdapter:
    """Square adapter initialized to the identity map."""
    adapter = FeatureAdapter(d, d, depth=1, dtype=dtype)
    with torch.no_grad():
        adapter.net[0].weight.copy_(torch.eye(d, dtype=dtype))
        adapter.net[0].bias.zero_()
    return adapter


def adapt(features, adapter: FeatureAdapter) -> torch.Tensor:
    """Row-wise affine transform of a feature matrix."""
    dtype = next(adapter.parameters()).dtype
    x = torch.as_tensor(np.asarray(features), dtype=dtype)
    if x.ndim != 2:
        raise ShapeError("features must be a 2-D matrix")
    return adapter(x)


def make_modality_features(
    video_raw,
    audio_raw,
    video_adapter: FeatureAdapter,
    audio_adapter: FeatureAdapter,
) -> ModalityFeatures:
    """Adapt raw encoder outputs, keeping the adapters in the autograd graph."""
    dtype = next(video_adapter.parameters()).dtype
    video_t = torch.as_tensor(np.asarray(video_raw), dtype=dtype)
    audio_t = torch.as_tensor(np.asarray(audio_raw), dtype=dtype)
    return ModalityFeatures(
        video_features=video_t,
        audio_features=audio_t,
        adapted_video=video_adapter(video_t),
        adapted_audio=audio_adapter(audio_t),
    )


def feature_spec_hash(
    frame_spec: FrameSampleSpec, audio_spec: AudioFrameSpec, d_v: int, d_a: int
) -> str:
    payload = {
        "frame_spec": asdict(frame_spec),
        "audio_spec": asdict(audio_spec),
        "d_v": d_v,
        "d_a": d_a,
    }
    return hashlib.sha256(
        json.dumps(payload, sort_keys=True).encode("utf-8")
    ).hexdigest()[:16]


class FeatureCache:
    """Per-utterance feature arrays on disk, keyed by utterance id + spec hash."""

    def __init__(self, root: str | Path):
        self.root = Path(root)

    def _entry(self, utterance_id: str, spec_hash: str) -> Path:
        safe = "".join(c if c.isalnum() or c in "-_." else "_" for c in utterance_id)
        return self.root / spec_hash / f"{safe}.npz"

    def write_spec(self, spec_hash: str, payload: dict) -> None:
        d = self.root / spec_hash
        d.mkdir(parents=True, exist_ok=True)
        (d / "spec.json").write_text(json.dumps(payload, indent=2, sort_keys=True))

    def get(self, utterance_id: str, spec_hash: str):
        path = self._entry(utterance_id, spec_hash)
        if not path.exists():
            return None
        data = np.load(path)
        return data["video"], data["audio"]

    def put(self, utterance_id: str, spec_hash: str, video: np.ndarray, audio: np.ndarray) -> None:
        path = self._entry(utterance_id, spec_hash)
        path.parent.mkdir(parents=True, exist_ok=True)
        np.savez(path, video=video, audio=audio)


class MediaLoader(Protocol):
    """Optional plugin that turns media refs into arrays; real decoders live outside."""

    def load_video_frames(self, ref: str, spec: FrameSampleSpec) -> np.ndarray: ...

    def load_audio_windows(self, ref: str, spec: AudioFrameSpec) -> list[np.ndarray]: ...


class FeaturePipeline:
    """Per-utterance raw modality features with a media-free degraded mode.

    Utterances without media refs (or without a media loader) get zero
    feature rows of the right shape, so the multimodal token path stays
    exercised on text-only fixtures.
    """

    def __init__(
        self,
        video_encoder: VideoEncoder,
        audio_encoder: AudioEncoder,
        frame_spec: FrameSampleSpec,
        audio_spec: AudioFrameSpec,
        media_loader: MediaLoader | None = None,
        default_audio_windows: int = 2,
        max_audio_slots: int = 16,
        cache: FeatureCache | None = None,
    ):
        self.video_encoder = video_encoder
        self.audio_encoder = audio_encoder
        self.frame_spec = frame_spec
        self.audio_spec = audio_spec
        self.media_loader = media_loader
        self.default_audio_windows = default_audio_windows
        self.max_audio_slots = max_audio_slots
        self.cache = cache
        self.spec_hash = feature_spec_hash(
            frame_spec, audio_spec, video_encoder.dim, audio_encoder.dim
        )
        if cache is not None:
            cache.write_spec(
                self.spec_hash,
                {
                    "frame_spec": asdict(frame_spec),
                    "audio_spec": asdict(audio_spec),
                    "d_v": video_encoder.dim,
                    "d_a": audio_encoder.dim,
                },
            )

    def raw_features(self, utt: Utterance) -> tuple[np.ndarray, np.ndarray]:
        if self.cache is not None:
            hit = self.cache.get(utt.id, self.spec_hash)
            if hit is not None:
                return hit
        if self.media_loader is not None and utt.video_ref:
            frames = self.media_loader.load_video_frames(utt.video_ref, self.frame_spec)
            video = encode_video(frames, self.video_encoder)
        else:
            video = np.zeros(
                (self.frame_spec.n_frames, self.video_encoder.dim), dtype=np.float64
            )
        if self.media_loader is not None and utt.audio_ref:
            windows = self.media_loader.load_audio_windows(utt.audio_ref, self.audio_spec)
            audio = encode_audio(windows, self.audio_encoder)
            # keep rows and placeholder slots in lockstep for long clips
            audio = audio[: self.max_audio_slots]
        else:
            audio = np.zeros(
                (self.default_audio_windows, self.audio_encoder.dim), dtype=np.float64
            )
        if self.cache is not None:
            self.cache.put(utt.id, self.spec_hash, video, audio)
        return video, audio

    def resolve_placeholder_spec(
        self, base: PlaceholderSpec, utt: Utterance
    ) -> PlaceholderSpec:
        """Per-utterance placeholder counts: one slot per feature row."""
        video, audio = self.raw_features(utt)
        return base.with_counts(video.shape[0], audio.shape[0])
