"""Deterministic synthetic speaker world.

Speakers share a global phoneme alphabet and audio map but own a private
linear style map from phoneme embeddings to the 13 mouth parameters, so
audio identifies *what* is said while the mouth trajectory reveals *who*
says it.  Mouth motion is smoothed with a one-pole filter to emulate
coarticulation.  Frames are rasterized procedurally: an appearance-colored
gradient above, an anti-aliased lip polygon below.

Every stochastic choice draws from a stream keyed by (seed, purpose, index)
so generation is bit-reproducible, clip by clip, serial or parallel.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import face3dmm as fm
from . import rng as rngmod
from .errors import ConfigError, DimensionError, FormatError, GenerationError

PHONEME_COUNT = 20
EMBED_DIM = 8
AUDIO_DIM = 29
FRAME_SIZE = 32
FPS = 25
COARTICULATION = 0.6
AUDIO_NOISE_SIGMA = 0.01
STYLE_SEPARATION = 0.2

_LIP_COLOR = np.array([0.62, 0.16, 0.22])

_CLIP_MAGIC = b"SSCL"
_CLIP_VERSION = 1
_MANIFEST_HEADER = "stylesync-dataset v1"


def _world_constants() -> tuple[np.ndarray, np.ndarray]:
    """Global phoneme embeddings (P,8) and audio map (29,8), world-fixed."""
    g = rngmod.stream(0, "world-phonemes")
    emb = g.normal(size=(PHONEME_COUNT, EMBED_DIM))
    emb /= np.linalg.norm(emb, axis=1, keepdims=True)
    audio_map = rngmod.stream(0, "world-audio-map").normal(
        size=(AUDIO_DIM, EMBED_DIM)
    ) / np.sqrt(EMBED_DIM)
    return emb, audio_map


PHONEME_EMBEDDINGS, AUDIO_MAP = _world_constants()


@dataclass
class Speaker:
    id: int
    style_map: np.ndarray       # (13, 8)
    style_bias: np.ndarray      # (13,)
    identity_alpha: np.ndarray  # (80,)
    appearance: np.ndarray      # (6,) two RGB colors for the upper face


@dataclass
class SynthClip:
    speaker_id: int
    phoneme_ids: np.ndarray          # (T,) int
    audio_features: np.ndarray       # (T, 29) f32
    mouth_params: np.ndarray         # (T, 13) f32
    frames: np.ndarray | None = None  # (T, 3, 32, 32) f32 in [0,1]
    fps: int = FPS

    def __len__(self) -> int:
        return len(self.phoneme_ids)


def style_map_distance(a: Speaker | np.ndarray, b: Speaker | np.ndarray) -> float:
    """Frobenius distance between norm-scaled style maps."""
    wa = a.style_map if isinstance(a, Speaker) else a
    wb = b.style_map if isinstance(b, Speaker) else b
    return float(np.linalg.norm(wa / np.linalg.norm(wa) - wb / np.linalg.norm(wb)))


def sample_speaker(seed: int, speaker_id: int | None = None) -> Speaker:
    """Deterministic speaker draw for one seed."""
    g = rngmod.stream(seed, "speaker")
    style_map = g.normal(0.0, 0.08, size=(fm.MOUTH_DIMS, EMBED_DIM))
    style_bias = g.normal(0.0, 0.03, size=fm.MOUTH_DIMS)
    identity_alpha = g.normal(0.0, 0.02, size=fm.IDENTITY_DIMS)
    appearance = g.uniform(0.15, 0.85, size=6)
    return Speaker(
        id=seed if speaker_id is None else speaker_id,
        style_map=style_map,
        style_bias=style_bias,
        identity_alpha=identity_alpha,
        appearance=appearance,
    )


def draw_speakers(seed: int, count: int) -> list[Speaker]:
    """Draw ``count`` speakers whose style maps are pairwise separated.

    Candidates violating the separation floor against any accepted speaker
    are rejected; 100 rejections for one slot abort generation.
    """
    speakers: list[Speaker] = []
    for i in range(count):
        for attempt in range(100):
            cand = sample_speaker(rngmod.child_seed(seed, "speaker-slot", i * 128 + attempt), i)
            if all(style_map_distance(cand, s) >= STYLE_SEPARATION for s in speakers):
                speakers.append(cand)
                break
        else:
            raise GenerationError(
                f"could not separate speaker {i} after 100 rejections"
            )
    return speakers


def random_phoneme_stream(length: int, gen: np.random.Generator) -> np.ndarray:
    """Phoneme ids held in short runs (2-7 frames), speech-like pacing."""
    ids = np.empty(length, dtype=np.int64)
    pos = 0
    while pos < length:
        run = 2 + int(gen.integers(0, 6))
        ids[pos: pos + run] = int(gen.integers(0, PHONEME_COUNT))
        pos += run
    return ids


def smooth_targets(targets: np.ndarray, coeff: float = COARTICULATION) -> np.ndarray:
    """One-pole coarticulation filter with zero initial state."""
    out = np.empty_like(targets)
    state = np.zeros(targets.shape[1], dtype=targets.dtype)
    for t in range(len(targets)):
        state = coeff * state + (1.0 - coeff) * targets[t]
        out[t] = state
    return out


def unsmooth_mouth(mouth: np.ndarray, coeff: float = COARTICULATION) -> np.ndarray:
    """Exact inverse of :func:`smooth_targets` (noise-free deconvolution)."""
    prev = np.vstack([np.zeros((1, mouth.shape[1])), mouth[:-1]])
    return (mouth - coeff * prev) / (1.0 - coeff)


def synth_utterance(
    speaker: Speaker,
    phoneme_ids: np.ndarray,
    noise_seed: int | None = 0,
    noise_sigma: float = AUDIO_NOISE_SIGMA,
) -> SynthClip:
    """Audio features and mouth parameters for a phoneme stream (no frames).

    Audio is speaker-independent (global map plus noise); mouth parameters
    run the speaker's style map through the coarticulation filter.
    """
    phoneme_ids = np.asarray(phoneme_ids, dtype=np.int64)
    if phoneme_ids.min(initial=0) < 0 or phoneme_ids.max(initial=0) >= PHONEME_COUNT:
        raise ConfigError(f"phoneme ids must lie in [0, {PHONEME_COUNT})")
    emb = PHONEME_EMBEDDINGS[phoneme_ids]                       # (T, 8)
    audio = emb @ AUDIO_MAP.T
    if noise_sigma > 0.0:
        if noise_seed is None:
            raise ConfigError("noise_seed required when noise_sigma > 0")
        audio = audio + rngmod.stream(noise_seed, "audio-noise").normal(
            0.0, noise_sigma, size=audio.shape
        )
    targets = emb @ speaker.style_map.T + speaker.style_bias
    mouth = smooth_targets(targets)
    return SynthClip(
        speaker_id=speaker.id,
        phoneme_ids=phoneme_ids,
        audio_features=audio.astype(np.float32),
        mouth_params=mouth.astype(np.float32),
    )


# ---------------------------------------------------------------------------
# rasterization


def _polygon_coverage(poly: np.ndarray, rows: int, cols: int, sub: int = 4) -> np.ndarray:
    """Even-odd fill coverage of a polygon over a pixel grid, supersampled.

    ``poly`` is (L, 2) in pixel units ((col, row), row 0 at top).  Returns
    (rows, cols) coverage in [0, 1].
    """
    offs = (np.arange(sub) + 0.5) / sub
    px = (np.arange(cols)[:, None] + offs[None, :]).reshape(-1)   # cols*sub
    py = (np.arange(rows)[:, None] + offs[None, :]).reshape(-1)   # rows*sub
    gx = np.broadcast_to(px[None, :], (rows * sub, cols * sub))
    gy = np.broadcast_to(py[:, None], (rows * sub, cols * sub))

    x1 = poly[:, 0]
    y1 = poly[:, 1]
    x2 = np.roll(poly[:, 0], -1)
    y2 = np.roll(poly[:, 1], -1)
    inside = np.zeros((rows * sub, cols * sub), dtype=np.int64)
    for e in range(len(poly)):
        ya, yb, xa, xb = y1[e], y2[e], x1[e], x2[e]
        if ya == yb:
            continue
        straddles = (ya > gy) != (yb > gy)
        xcross = xa + (gy - ya) * (xb - xa) / (yb - ya)
        inside += straddles & (gx < xcross)
    cov = (inside % 2).astype(np.float64)
    return cov.reshape(rows, sub, cols, sub).mean(axis=(1, 3))


def _fallback_line(poly: np.ndarray, rows: int, cols: int) -> np.ndarray:
    """Closed-mouth fallback when lip vertices are collinear: a thin line."""
    cov = np.zeros((rows, cols))
    row = int(np.clip(round(float(poly[:, 1].mean())), 0, rows - 1))
    lo = int(np.clip(np.floor(poly[:, 0].min()), 0, cols - 1))
    hi = int(np.clip(np.ceil(poly[:, 0].max()), lo + 1, cols))
    cov[row, lo:hi] = 1.0
    return cov


def _is_collinear(points: np.ndarray) -> bool:
    centered = points - points.mean(axis=0)
    if len(points) < 3:
        return True
    s = np.linalg.svd(centered, compute_uv=False)
    return bool(s[-1] < 1e-9 * max(s[0], 1e-12))


def render_frame(
    speaker: Speaker,
    mouth: np.ndarray,
    gamma: np.ndarray | None,
    basis: fm.FaceBasis,
) -> np.ndarray:
    """Rasterize one 3x32x32 frame in [0,1].

    Upper half: vertical gradient between the speaker's two appearance
    colors.  Lower half: skin tone continued from the appearance mean with
    the lip polygon alpha-blended on top; the polygon is the 2D projection
    of the lip vertices, rotated in-plane by the roll component of gamma
    about the lip centroid.
    """
    mouth = np.asarray(mouth, dtype=np.float64)
    if mouth.shape != (fm.MOUTH_DIMS,):
        raise DimensionError(f"mouth params must be ({fm.MOUTH_DIMS},), got {mouth.shape}")
    beta = fm.embed_mouth_params(mouth, np.zeros(fm.EXPRESSION_DIMS - fm.MOUTH_DIMS), basis)
    mesh = fm.assemble_mesh(basis, fm.FaceParams(alpha=speaker.identity_alpha, beta=beta))
    lips = fm.lip_vertices(mesh, basis)[:, :2]                  # (L, 2) world xy

    if gamma is not None:
        roll = float(np.asarray(gamma).reshape(-1)[-1])
        if roll != 0.0:
            center = lips.mean(axis=0)
            c, s = np.cos(roll), np.sin(roll)
            rot = np.array([[c, -s], [s, c]])
            lips = (lips - center) @ rot.T + center

    half = FRAME_SIZE // 2
    # world x in [-1,1] -> col [0,32); world y in [-1,0] -> row [32,16)
    px = (lips[:, 0] + 1.0) * (FRAME_SIZE / 2.0)
    py = half - lips[:, 1] * half
    poly = np.stack([px, py - half], axis=1)                    # rows local to lower half

    if _is_collinear(lips):
        cov = _fallback_line(poly, half, FRAME_SIZE)
    else:
        cov = _polygon_coverage(poly, half, FRAME_SIZE)

    c0 = speaker.appearance[:3]
    c1 = speaker.appearance[3:]
    img = np.empty((3, FRAME_SIZE, FRAME_SIZE))
    rows = np.arange(half) / (half - 1)
    img[:, :half, :] = (c0[:, None] * (1 - rows) + c1[:, None] * rows)[:, :, None]
    skin = np.clip(0.35 + 0.45 * 0.5 * (c0 + c1), 0.0, 1.0)
    lower = skin[:, None, None] * (1.0 - cov)[None] + _LIP_COLOR[:, None, None] * cov[None]
    img[:, half:, :] = lower
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def render_clip_frames(
    speaker: Speaker,
    mouth_params: np.ndarray,
    gammas: np.ndarray | None,
    basis: fm.FaceBasis,
) -> np.ndarray:
    frames = np.empty((len(mouth_params), 3, FRAME_SIZE, FRAME_SIZE), dtype=np.float32)
    for t in range(len(mouth_params)):
        gamma = None if gammas is None else gammas[t]
        frames[t] = render_frame(speaker, mouth_params[t], gamma, basis)
    return frames


# ---------------------------------------------------------------------------
# dataset persistence


@dataclass
class SplitRanges:
    style: tuple[int, int]
    train: tuple[int, int]
    test: tuple[int, int]


@dataclass
class DatasetInfo:
    root: Path
    seed: int
    num_speakers: int
    frames_per_speaker: int
    style_ref_len: int
    noise_sigma: float
    gamma_sweep: bool
    has_frames: bool
    basis_seed: int
    num_vertices: int
    lip_fraction: float
    splits: list[SplitRanges]
    clip_files: list[Path]

    def basis(self) -> fm.FaceBasis:
        return fm.make_synthetic_basis(self.basis_seed, self.num_vertices, self.lip_fraction)

    def speakers(self) -> list[Speaker]:
        return draw_speakers(self.seed, self.num_speakers)


def gamma_sequence(length: int, sweep: bool) -> np.ndarray | None:
    """Optional slow in-plane rotation sweep (roll only)."""
    if not sweep:
        return None
    t = np.arange(length)
    gam = np.zeros((length, 3))
    gam[:, 2] = 0.12 * np.sin(2.0 * np.pi * t / 100.0)
    return gam


def write_clip(path: Path, clip: SynthClip) -> None:
    """Little-endian record: header, u16 phonemes, f32 audio/mouth, u8 RGB."""
    frame_count = len(clip)
    has_frames = clip.frames is not None
    with open(path, "wb") as fh:
        fh.write(_CLIP_MAGIC)
        fh.write(struct.pack(
            "<IIIIIIIII",
            _CLIP_VERSION,
            clip.speaker_id,
            frame_count,
            AUDIO_DIM,
            fm.MOUTH_DIMS,
            1 if has_frames else 0,
            3,
            FRAME_SIZE,
            clip.fps,
        ))
        fh.write(clip.phoneme_ids.astype("<u2").tobytes())
        fh.write(clip.audio_features.astype("<f4").tobytes())
        fh.write(clip.mouth_params.astype("<f4").tobytes())
        if has_frames:
            quantized = np.clip(np.round(clip.frames * 255.0), 0, 255).astype(np.uint8)
            fh.write(quantized.tobytes())


def read_clip(path: Path) -> SynthClip:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _CLIP_MAGIC:
            raise FormatError(f"{path}: bad clip magic {magic!r}")
        header = fh.read(36)
        if len(header) != 36:
            raise FormatError(f"{path}: truncated clip header")
        (version, speaker_id, frame_count, audio_dim, mouth_dim,
         has_frames, channels, size, fps) = struct.unpack("<IIIIIIIII", header)
        if version != _CLIP_VERSION:
            raise FormatError(f"{path}: unsupported clip version {version}")
        if audio_dim != AUDIO_DIM or mouth_dim != fm.MOUTH_DIMS:
            raise FormatError(f"{path}: unexpected dims {audio_dim}/{mouth_dim}")
        phonemes = np.frombuffer(fh.read(frame_count * 2), dtype="<u2").astype(np.int64)
        audio = np.frombuffer(fh.read(frame_count * audio_dim * 4), dtype="<f4")
        mouth = np.frombuffer(fh.read(frame_count * mouth_dim * 4), dtype="<f4")
        frames = None
        if has_frames:
            raw = np.frombuffer(fh.read(frame_count * channels * size * size), dtype=np.uint8)
            frames = (raw.reshape(frame_count, channels, size, size).astype(np.float32) / 255.0)
        if phonemes.size != frame_count or audio.size != frame_count * audio_dim:
            raise FormatError(f"{path}: truncated clip payload")
    return SynthClip(
        speaker_id=speaker_id,
        phoneme_ids=phonemes,
        audio_features=audio.reshape(frame_count, audio_dim).copy(),
        mouth_params=mouth.reshape(frame_count, mouth_dim).copy(),
        frames=frames,
        fps=fps,
    )


def make_dataset(
    num_speakers: int,
    frames_per_speaker: int,
    seed: int,
    out_dir: str | Path,
    style_ref_len: int = 32,
    style_frames: int = 256,
    test_frames: int = 512,
    noise_sigma: float = AUDIO_NOISE_SIGMA,
    gamma_sweep: bool = False,
    write_frames: bool = True,
    basis_seed: int = 0,
    num_vertices: int = 68,
    lip_fraction: float = 0.3,
) -> DatasetInfo:
    """Generate and persist a dataset with disjoint style/train/test splits."""
    if frames_per_speaker < 2 * (style_ref_len + 64):
        raise ConfigError(
            f"frames_per_speaker={frames_per_speaker} too small for "
            f"style_ref_len={style_ref_len}; need >= {2 * (style_ref_len + 64)}"
        )
    style_frames = max(style_frames, style_ref_len)
    if style_frames + test_frames + 64 > frames_per_speaker:
        raise ConfigError(
            f"splits ({style_frames} style + {test_frames} test) leave no "
            f"training frames out of {frames_per_speaker}"
        )
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "clips").mkdir(exist_ok=True)

    basis = fm.make_synthetic_basis(basis_seed, num_vertices, lip_fraction)
    speakers = draw_speakers(seed, num_speakers)

    splits = []
    clip_files = []
    lines = [
        _MANIFEST_HEADER,
        f"seed = {seed}",
        f"num_speakers = {num_speakers}",
        f"frames_per_speaker = {frames_per_speaker}",
        f"style_ref_len = {style_ref_len}",
        f"noise_sigma = {noise_sigma!r}",
        f"gamma_sweep = {int(gamma_sweep)}",
        f"has_frames = {int(write_frames)}",
        f"basis_seed = {basis_seed}",
        f"num_vertices = {num_vertices}",
        f"lip_fraction = {lip_fraction!r}",
    ]
    for spk in speakers:
        phonemes = random_phoneme_stream(
            frames_per_speaker, rngmod.stream(seed, "clip-phonemes", spk.id)
        )
        clip = synth_utterance(
            spk,
            phonemes,
            noise_seed=rngmod.child_seed(seed, "clip-audio", spk.id),
            noise_sigma=noise_sigma,
        )
        gammas = gamma_sequence(frames_per_speaker, gamma_sweep)
        if write_frames:
            clip.frames = render_clip_frames(spk, clip.mouth_params, gammas, basis)
        rel = Path("clips") / f"spk{spk.id:03d}.bin"
        write_clip(out_dir / rel, clip)
        clip_files.append(out_dir / rel)
        style = (0, style_frames)
        test = (frames_per_speaker - test_frames, frames_per_speaker)
        train = (style_frames, frames_per_speaker - test_frames)
        splits.append(SplitRanges(style=style, train=train, test=test))
        lines.append(
            f"speaker {spk.id} file={rel.as_posix()} frames={frames_per_speaker} "
            f"style={style[0]}:{style[1]} train={train[0]}:{train[1]} test={test[0]}:{test[1]}"
        )
    (out_dir / "manifest.txt").write_text("\n".join(lines) + "\n")
    return DatasetInfo(
        root=out_dir,
        seed=seed,
        num_speakers=num_speakers,
        frames_per_speaker=frames_per_speaker,
        style_ref_len=style_ref_len,
        noise_sigma=noise_sigma,
        gamma_sweep=gamma_sweep,
        has_frames=write_frames,
        basis_seed=basis_seed,
        num_vertices=num_vertices,
        lip_fraction=lip_fraction,
        splits=splits,
        clip_files=clip_files,
    )


def load_dataset(root: str | Path) -> DatasetInfo:
    root = Path(root)
    manifest = root / "manifest.txt"
    if not manifest.exists():
        raise FormatError(f"no manifest at {manifest}")
    lines = manifest.read_text().splitlines()
    if not lines or lines[0] != _MANIFEST_HEADER:
        raise FormatError(f"{manifest}: bad header {lines[:1]!r}")
    kv = {}
    splits = []
    clip_files = []
    for line in lines[1:]:
        if not line.strip() or line.startswith("#"):
            continue
        if line.startswith("speaker "):
            fields = dict(part.split("=", 1) for part in line.split()[2:])
            clip_files.append(root / fields["file"])

            def rng_pair(text):
                lo, hi = text.split(":")
                return (int(lo), int(hi))

            splits.append(SplitRanges(
                style=rng_pair(fields["style"]),
                train=rng_pair(fields["train"]),
                test=rng_pair(fields["test"]),
            ))
        elif "=" in line:
            key, val = line.split("=", 1)
            kv[key.strip()] = val.strip()
    return DatasetInfo(
        root=root,
        seed=int(kv["seed"]),
        num_speakers=int(kv["num_speakers"]),
        frames_per_speaker=int(kv["frames_per_speaker"]),
        style_ref_len=int(kv["style_ref_len"]),
        noise_sigma=float(kv["noise_sigma"]),
        gamma_sweep=bool(int(kv["gamma_sweep"])),
        has_frames=bool(int(kv["has_frames"])),
        basis_seed=int(kv["basis_seed"]),
        num_vertices=int(kv["num_vertices"]),
        lip_fraction=float(kv["lip_fraction"]),
        splits=splits,
        clip_files=clip_files,
    )


def write_ppm(path: str | Path, image: np.ndarray) -> None:
    """P6 maxval-255 export of a (3,H,W) image in [0,1]."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[0] != 3:
        raise DimensionError(f"expected (3,H,W), got {image.shape}")
    data = np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)
    _, h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.transpose(1, 2, 0).tobytes())


def dataset_digest(root: str | Path) -> str:
    """SHA-256 over the manifest and every clip, in manifest order."""
    info = load_dataset(root)
    h = hashlib.sha256()
    h.update((Path(root) / "manifest.txt").read_bytes())
    for f in info.clip_files:
        h.update(f.read_bytes())
    return h.hexdigest()
