"""Reference-guided lip motion prediction.

A Transformer decoder consumes a temporal window of audio tokens and
predicts the mouth parameters of the middle frame.  Speaking style is
aggregated from a reference clip: reference audio features act as keys,
reference lip features as values, and the decoder hidden states as
queries, so reference frames whose audio resembles the window dominate
the aggregation.  Variants with the reference branch removed (self
attention only) or with lip features serving as both keys and values
support the ablation harness.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import diffarray as da
from . import face3dmm as fm
from . import rng as rngmod
from . import synthworld as sw
from .errors import ConfigError, DimensionError, NumericError

VARIANTS = ("full", "norefaudio", "noref", "novertices")


@dataclass
class LipMotionConfig:
    model_dim: int = 64
    heads: int = 4
    blocks: int = 2
    window: int = 2              # predicts frame t from frames t-w .. t+w
    ref_len: int = 32
    enc_layers: int = 1
    ff_mult: int = 2
    conv_kernel: int = 3
    ref_positional: bool = True
    audio_dim: int = sw.AUDIO_DIM
    mouth_dim: int = fm.MOUTH_DIMS
    lambda_vertices: float = 300.0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    steps: int = 600
    batch_segments: int = 8
    segment_len: int = 64
    log_every: int = 25

    def __post_init__(self):
        if self.model_dim % self.heads:
            raise ConfigError(
                f"model_dim {self.model_dim} not divisible by heads {self.heads}"
            )


@dataclass
class StyleReference:
    """Aligned reference streams: audio (n,29) and lip params (n,13)."""

    ref_audio: np.ndarray
    ref_lips: np.ndarray

    def __post_init__(self):
        self.ref_audio = np.asarray(self.ref_audio, dtype=np.float32)
        self.ref_lips = np.asarray(self.ref_lips, dtype=np.float32)
        if self.ref_audio.ndim != 2 or self.ref_lips.ndim != 2:
            raise DimensionError("reference streams must be 2D (frames x dims)")
        if len(self.ref_audio) != len(self.ref_lips):
            raise DimensionError(
                f"reference streams disagree: {len(self.ref_audio)} audio vs "
                f"{len(self.ref_lips)} lip frames"
            )

    def __len__(self) -> int:
        return len(self.ref_audio)


def sinusoidal_encoding(length: int, dim: int, dtype=np.float32) -> np.ndarray:
    pos = np.arange(length)[:, None].astype(np.float64)
    i = np.arange(dim // 2)[None, :]
    angles = pos / np.power(10000.0, 2.0 * i / dim)
    enc = np.zeros((length, dim))
    enc[:, 0::2] = np.sin(angles)
    enc[:, 1::2] = np.cos(angles)
    return enc.astype(dtype)


class LipSyncModel:
    """Parameter container plus dims for one stage-1 model."""

    def __init__(self, config: LipMotionConfig, params: dict[str, da.DiffTensor],
                 variant: str = "full", init_seed: int = 0):
        if variant not in ("full", "norefaudio", "noref"):
            raise ConfigError(f"unknown variant {variant!r}")
        self.config = config
        self.params = params
        self.variant = variant
        self.init_seed = init_seed

    @property
    def param_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def __getitem__(self, name: str) -> da.DiffTensor:
        return self.params[name]


def _init_param(seed: int, name: str, shape: tuple[int, ...], kind: str) -> da.DiffTensor:
    if kind == "zeros":
        data = np.zeros(shape, dtype=np.float32)
    elif kind == "ones":
        data = np.ones(shape, dtype=np.float32)
    else:
        gen = rngmod.stream(seed, "init:" + name)
        fan_in = shape[0] if len(shape) == 1 else int(np.prod(shape[:-1]))
        if kind == "small":
            std = 0.02
        else:
            std = 1.0 / math.sqrt(fan_in)
        data = gen.normal(0.0, std, size=shape).astype(np.float32)
    return da.DiffTensor(data, requires_grad=True)


def _attention_param_specs(prefix: str, d: int) -> list[tuple[str, tuple[int, ...], str]]:
    return [
        (f"{prefix}.wq", (d, d), "fan"),
        (f"{prefix}.wk", (d, d), "fan"),
        (f"{prefix}.wv", (d, d), "fan"),
        (f"{prefix}.wo", (d, d), "fan"),
    ]


def _block_param_specs(prefix: str, cfg: LipMotionConfig, cross: str) -> list:
    d, h = cfg.model_dim, cfg.ff_mult * cfg.model_dim
    specs = [
        (f"{prefix}.ln1.g", (d,), "ones"), (f"{prefix}.ln1.b", (d,), "zeros"),
        *_attention_param_specs(f"{prefix}.self", d),
        (f"{prefix}.ln2.g", (d,), "ones"), (f"{prefix}.ln2.b", (d,), "zeros"),
    ]
    if cross == "cross":
        specs += [(f"{prefix}.cross.wq", (d, d), "fan")]
    elif cross == "self":
        specs += _attention_param_specs(f"{prefix}.self2", d)
    specs += [
        (f"{prefix}.ln3.g", (d,), "ones"), (f"{prefix}.ln3.b", (d,), "zeros"),
        (f"{prefix}.ff.w1", (d, h), "fan"), (f"{prefix}.ff.b1", (h,), "zeros"),
        (f"{prefix}.ff.w2", (h, d), "fan"), (f"{prefix}.ff.b2", (d,), "zeros"),
    ]
    return specs


def _encoder_param_specs(prefix: str, cfg: LipMotionConfig, in_dim: int, conv: bool) -> list:
    d, k = cfg.model_dim, cfg.conv_kernel
    specs = []
    if conv:
        specs += [
            (f"{prefix}.conv1.w", (d, in_dim, k), "fan"), (f"{prefix}.conv1.b", (d,), "zeros"),
            (f"{prefix}.conv2.w", (d, d, k), "fan"), (f"{prefix}.conv2.b", (d,), "zeros"),
        ]
    else:
        specs += [
            (f"{prefix}.embed.w", (in_dim, d), "fan"), (f"{prefix}.embed.b", (d,), "zeros"),
        ]
    for layer in range(cfg.enc_layers):
        specs += _block_param_specs(f"{prefix}.enc{layer}", cfg, cross="none")
    return specs


def _model_param_specs(cfg: LipMotionConfig, variant: str) -> list:
    d = cfg.model_dim
    specs = []
    if variant != "noref":
        if variant != "norefaudio":
            specs += _encoder_param_specs("aref", cfg, cfg.audio_dim, conv=True)
        specs += _encoder_param_specs("lref", cfg, cfg.mouth_dim, conv=False)
    specs += [
        ("inconv.conv1.w", (d, cfg.audio_dim, cfg.conv_kernel), "fan"),
        ("inconv.conv1.b", (d,), "zeros"),
        ("inconv.conv2.w", (d, d, cfg.conv_kernel), "fan"),
        ("inconv.conv2.b", (d,), "zeros"),
    ]
    cross = "self" if variant == "noref" else "cross"
    for i in range(cfg.blocks):
        specs += _block_param_specs(f"dec{i}", cfg, cross=cross)
    specs += [
        ("final_ln.g", (d,), "ones"), ("final_ln.b", (d,), "zeros"),
        ("head.w1", (d, d), "fan"), ("head.b1", (d,), "zeros"),
        ("head.w2", (d, cfg.mouth_dim), "small"), ("head.b2", (cfg.mouth_dim,), "zeros"),
    ]
    return specs


def build_model(config: LipMotionConfig, seed: int, variant: str = "full") -> LipSyncModel:
    params = {
        name: _init_param(seed, name, shape, kind)
        for name, shape, kind in _model_param_specs(config, variant)
    }
    return LipSyncModel(config, params, variant=variant, init_seed=seed)


def make_noref_variant(model: LipSyncModel) -> LipSyncModel:
    """Reference branch removed; cross-attention becomes self-attention."""
    return build_model(model.config, model.init_seed, variant="noref")


def make_norefaudio_variant(model: LipSyncModel) -> LipSyncModel:
    """Audio reference encoder removed; lip features act as keys and values."""
    return build_model(model.config, model.init_seed, variant="norefaudio")


# ---------------------------------------------------------------------------
# forward passes


def _linear(x: da.DiffTensor, w: da.DiffTensor, b: da.DiffTensor) -> da.DiffTensor:
    return da.add(da.matmul(x, w), b)


def _conv_module(model: LipSyncModel, prefix: str, x: np.ndarray) -> da.DiffTensor:
    """Two same-padding 1D convs with a nonlinearity: (B,L,C) -> (B,L,d)."""
    t = da.transpose(da.DiffTensor(x), (0, 2, 1))            # (B,C,L)
    t = da.conv1d(t, model[f"{prefix}.conv1.w"])
    t = da.relu(da.add(t, da.reshape(model[f"{prefix}.conv1.b"], (1, -1, 1))))
    t = da.conv1d(t, model[f"{prefix}.conv2.w"])
    t = da.add(t, da.reshape(model[f"{prefix}.conv2.b"], (1, -1, 1)))
    return da.transpose(t, (0, 2, 1))                        # (B,L,d)


def _self_attention(model: LipSyncModel, prefix: str, x: da.DiffTensor,
                    heads: int) -> da.DiffTensor:
    q = da.matmul(x, model[f"{prefix}.wq"])
    k = da.matmul(x, model[f"{prefix}.wk"])
    v = da.matmul(x, model[f"{prefix}.wv"])
    out, _ = da.multi_head_attention(q, k, v, heads, w_out=model[f"{prefix}.wo"])
    return out


def _ff(model: LipSyncModel, prefix: str, x: da.DiffTensor) -> da.DiffTensor:
    hidden = da.relu(_linear(x, model[f"{prefix}.w1"], model[f"{prefix}.b1"]))
    return _linear(hidden, model[f"{prefix}.w2"], model[f"{prefix}.b2"])


def _ln(model: LipSyncModel, prefix: str, x: da.DiffTensor) -> da.DiffTensor:
    return da.layer_norm(x, model[f"{prefix}.g"], model[f"{prefix}.b"])


def _encoder_stack(model: LipSyncModel, prefix: str, h: da.DiffTensor) -> da.DiffTensor:
    for layer in range(model.config.enc_layers):
        p = f"{prefix}.enc{layer}"
        h = da.add(h, _self_attention(model, f"{p}.self", _ln(model, f"{p}.ln1", h),
                                      model.config.heads))
        h = da.add(h, _ff(model, f"{p}.ff", _ln(model, f"{p}.ln3", h)))
    return h


def encode_reference(
    model: LipSyncModel, ref: StyleReference
) -> tuple[da.DiffTensor, da.DiffTensor]:
    """Keys from the audio branch, values from the lip branch, (n,d) each."""
    k, v = encode_reference_batch(
        model, ref.ref_audio[None], ref.ref_lips[None]
    )
    return da.reshape(k, k.shape[1:]), da.reshape(v, v.shape[1:])


def encode_reference_batch(
    model: LipSyncModel, ref_audio: np.ndarray, ref_lips: np.ndarray
) -> tuple[da.DiffTensor, da.DiffTensor]:
    """Batched reference encoding: (B,n,29),(B,n,13) -> (B,n,d) keys/values."""
    if model.variant == "noref":
        raise ConfigError("the no-reference variant has no reference encoders")
    n = ref_audio.shape[1]
    if n < 1:
        raise ConfigError("empty style reference (the n=0 ablation is a separate variant)")
    cfg = model.config
    pe = sinusoidal_encoding(n, cfg.model_dim)[None] if cfg.ref_positional else 0.0

    lips = _linear(da.DiffTensor(ref_lips), model["lref.embed.w"], model["lref.embed.b"])
    if cfg.ref_positional:
        lips = da.add(lips, da.DiffTensor(pe))
    values = _encoder_stack(model, "lref", lips)

    if model.variant == "norefaudio":
        return values, values

    audio = _conv_module(model, "aref", ref_audio)
    if cfg.ref_positional:
        audio = da.add(audio, da.DiffTensor(pe))
    keys = _encoder_stack(model, "aref", audio)
    return keys, values


def aggregate_style(
    hidden: da.DiffTensor,
    keys: da.DiffTensor,
    values: da.DiffTensor,
    heads: int = 1,
) -> tuple[da.DiffTensor, np.ndarray]:
    """Attention-pooled style: softmax(Q K^T / sqrt(d)) V with Q = hidden.

    Returns the aggregated rows and the post-softmax weights averaged over
    heads; every weight row sums to one.
    """
    if hidden.shape[-1] != keys.shape[-1]:
        raise DimensionError(
            f"query width {hidden.shape[-1]} != key width {keys.shape[-1]}"
        )
    return da.multi_head_attention(hidden, keys, values, heads)


def _decode(
    model: LipSyncModel,
    tokens: np.ndarray,                     # (B, S, T, audio_dim)
    keys: da.DiffTensor | None,             # (B, n, d)
    values: da.DiffTensor | None,
    collect_weights: bool = False,
):
    """Run the decoder over S windows per segment; returns (B,S,13) preds."""
    cfg = model.config
    b, s, t, _ = tokens.shape
    flat = tokens.reshape(b * s, t, cfg.audio_dim)
    h = _conv_module(model, "inconv", flat)                  # (B*S, T, d)
    h = da.add(h, da.DiffTensor(sinusoidal_encoding(t, cfg.model_dim)[None]))

    weights_per_block = []
    for i in range(cfg.blocks):
        p = f"dec{i}"
        h = da.add(h, _self_attention(model, f"{p}.self", _ln(model, f"{p}.ln1", h), cfg.heads))
        a = _ln(model, f"{p}.ln2", h)
        if model.variant == "noref":
            h = da.add(h, _self_attention(model, f"{p}.self2", a, cfg.heads))
        else:
            q = da.matmul(a, model[f"{p}.cross.wq"])
            q = da.reshape(q, (b, s * t, cfg.model_dim))
            agg, wts = aggregate_style(q, keys, values, cfg.heads)
            h = da.add(h, da.reshape(agg, (b * s, t, cfg.model_dim)))
            if collect_weights:
                weights_per_block.append(wts.reshape(b, s, t, -1))
        h = da.add(h, _ff(model, f"{p}.ff", _ln(model, f"{p}.ln3", h)))

    h = _ln(model, "final_ln", h)
    mid = h[:, cfg.window, :]                                # (B*S, d)
    out = _linear(da.relu(_linear(mid, model["head.w1"], model["head.b1"])),
                  model["head.w2"], model["head.b2"])
    out = da.reshape(out, (b, s, cfg.mouth_dim))
    if collect_weights:
        return out, weights_per_block
    return out


def _windows_from_audio(audio: np.ndarray, w: int) -> np.ndarray:
    """All replicate-padded (2w+1)-frame windows of a (T,29) stream."""
    padded = np.concatenate([
        np.repeat(audio[:1], w, axis=0), audio, np.repeat(audio[-1:], w, axis=0)
    ])
    view = np.lib.stride_tricks.sliding_window_view(padded, 2 * w + 1, axis=0)
    return np.ascontiguousarray(view.transpose(0, 2, 1))     # (T, 2w+1, 29)


def predict_window(
    model: LipSyncModel, audio_window: np.ndarray, ref: StyleReference | None
) -> np.ndarray:
    """Mouth parameters for the middle frame of one (2w+1,29) window."""
    cfg = model.config
    t = 2 * cfg.window + 1
    audio_window = np.asarray(audio_window, dtype=np.float32)
    if audio_window.shape != (t, cfg.audio_dim):
        raise DimensionError(
            f"window must be ({t},{cfg.audio_dim}), got {audio_window.shape}"
        )
    with da.no_grad():
        keys = values = None
        if model.variant != "noref":
            keys, values = encode_reference_batch(
                model, ref.ref_audio[None], ref.ref_lips[None]
            )
        out = _decode(model, audio_window[None, None], keys, values)
    return out.data[0, 0].copy()


def infer_sequence(
    model: LipSyncModel,
    audio: np.ndarray,
    ref: StyleReference | None,
    collect_weights: bool = False,
    chunk: int = 256,
):
    """Windowed per-frame prediction over a (T,29) stream, stateless."""
    audio = np.asarray(audio, dtype=np.float32)
    if audio.ndim != 2 or len(audio) < 1:
        raise DimensionError(f"audio must be (T,{model.config.audio_dim}), got {audio.shape}")
    windows = _windows_from_audio(audio, model.config.window)
    preds = []
    weights = []
    with da.no_grad():
        keys = values = None
        if model.variant != "noref":
            keys, values = encode_reference_batch(
                model, ref.ref_audio[None], ref.ref_lips[None]
            )
        for lo in range(0, len(windows), chunk):
            batch = windows[lo: lo + chunk][None]            # (1, S, T, 29)
            if collect_weights:
                out, wts = _decode(model, batch, keys, values, collect_weights=True)
                weights.append(wts)
            else:
                out = _decode(model, batch, keys, values)
            preds.append(out.data[0])
    result = np.concatenate(preds, axis=0)
    if collect_weights:
        n = weights[0][0].shape[-1]
        per_block = [
            np.concatenate([chunk_w[blk][0] for chunk_w in weights], axis=0)
            for blk in range(len(weights[0]))
        ]
        return result, per_block
    return result


# ---------------------------------------------------------------------------
# losses and training


def loss_stage1(
    pred_seq: da.DiffTensor,
    gt_seq: np.ndarray,
    beta_rest_seq: np.ndarray | None,
    alpha_seq: np.ndarray | None,
    basis: fm.FaceBasis,
    lam: float = 300.0,
) -> tuple[da.DiffTensor, da.DiffTensor, da.DiffTensor]:
    """Mouth-parameter L1 plus lambda-weighted lip-vertex L1.

    Both meshes share the ground-truth identity and non-mouth expression
    coefficients, so the vertex difference reduces to the mouth basis
    applied to the parameter difference.  Returns (total, l1, l2).
    """
    gt = da.DiffTensor(np.asarray(gt_seq, dtype=np.float32))
    diff = da.sub(pred_seq, gt)
    l1 = da.mean(da.absolute(diff))
    lip_map = da.DiffTensor(basis.mouth_lip_basis.T.astype(np.float32))  # (13, 3L)
    l2 = da.mean(da.absolute(da.matmul(diff, lip_map)))
    total = da.add(l1, da.mul(l2, lam))
    return total, l1, l2


@dataclass
class TrainLogRow:
    step: int
    l1: float
    l2: float
    total: float


def _load_training_arrays(dataset: sw.DatasetInfo):
    clips = [sw.read_clip(f) for f in dataset.clip_files]
    return clips


def train_stage1(
    model: LipSyncModel,
    dataset: sw.DatasetInfo,
    seed: int,
    lambda_vertices: float | None = None,
) -> tuple[LipSyncModel, list[TrainLogRow]]:
    """Optimize on random 64-frame segments with disjoint style references.

    Deterministic from (model init, dataset, seed): batches come from a
    dedicated stream, so reruns produce identical checkpoints.
    """
    cfg = model.config
    lam = cfg.lambda_vertices if lambda_vertices is None else lambda_vertices
    basis = dataset.basis()
    clips = _load_training_arrays(dataset)
    w, seg, n = cfg.window, cfg.segment_len, cfg.ref_len

    state = da.AdamState(model.params, lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2)
    gen = rngmod.stream(seed, "train1-batches")
    log: list[TrainLogRow] = []

    for step in range(cfg.steps):
        tokens = np.empty((cfg.batch_segments, seg, 2 * w + 1, cfg.audio_dim), dtype=np.float32)
        gts = np.empty((cfg.batch_segments, seg, cfg.mouth_dim), dtype=np.float32)
        ref_audio = np.empty((cfg.batch_segments, n, cfg.audio_dim), dtype=np.float32)
        ref_lips = np.empty((cfg.batch_segments, n, cfg.mouth_dim), dtype=np.float32)
        for i in range(cfg.batch_segments):
            spk = int(gen.integers(0, len(clips)))
            clip = clips[spk]
            tr_lo, tr_hi = dataset.splits[spk].train
            st_lo, st_hi = dataset.splits[spk].style
            start = int(gen.integers(tr_lo + w, tr_hi - seg - w + 1))
            ref_start = int(gen.integers(st_lo, st_hi - n + 1))
            audio = clip.audio_features[start - w: start + seg + w]
            view = np.lib.stride_tricks.sliding_window_view(audio, 2 * w + 1, axis=0)
            tokens[i] = view.transpose(0, 2, 1)
            gts[i] = clip.mouth_params[start: start + seg]
            ref_audio[i] = clip.audio_features[ref_start: ref_start + n]
            ref_lips[i] = clip.mouth_params[ref_start: ref_start + n]

        keys = values = None
        if model.variant != "noref":
            keys, values = encode_reference_batch(model, ref_audio, ref_lips)
        preds = _decode(model, tokens, keys, values)
        total, l1, l2 = loss_stage1(
            da.reshape(preds, (-1, cfg.mouth_dim)),
            gts.reshape(-1, cfg.mouth_dim),
            None, None, basis, lam,
        )
        loss_val = total.item()
        if not math.isfinite(loss_val):
            raise NumericError(f"non-finite loss at step {step}")
        da.zero_grads(model.params.values())
        total.backward()
        da.adam_step(model.params, {k: p.grad for k, p in model.params.items()}, state)
        if step % cfg.log_every == 0 or step == cfg.steps - 1:
            log.append(TrainLogRow(step, l1.item(), l2.item(), loss_val))
    return model, log
