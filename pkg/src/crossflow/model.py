"""Encoder assembly: criss-crossed dual attention streams, the delay-aware
stream, head mixing, feed-forward blocks, residual/normalization wiring,
skip-tapped output head, ablation variants, and checkpoint serialization."""

from __future__ import annotations

import io
import os
from dataclasses import dataclass, fields, replace

import numpy as np

from . import autodiff as ad
from .attention import (AttentionHeadParams, DelayConfig, delay_head_batch,
                        init_head_params, spatial_head_batch,
                        temporal_head_batch)
from .autodiff import Tensor
from .embedding import (EmbeddingParams, embed_batch, init_embedding_params,
                        temporal_index_arrays)
from .errors import ConfigError, DimensionError, FormatError
from .graph import (AttentionMasks, RoadNetwork, build_adjacency, geo_mask,
                    laplacian_embedding, normalized_laplacian, sem_mask,
                    symmetric_eigen)
from .rng import make_rng
from .series import TrafficTensor

ABLATIONS = ("full", "no_relsa", "no_encov", "no_ccds")

CHECKPOINT_MAGIC = b"CCDSRF01"


@dataclass
class ModelConfig:
    """Dimensions, head counts, horizons, and the ablation switch.

    The per-head width d0 is d divided by the total head count and must be
    exact. Defaults are desk-scale; the paper-scale sweeps tuned d in
    {16, 32, 64} and depth in {2, 4, 6, 8}.
    """

    d: int = 16
    layers: int = 2
    h_ressa: int = 2
    h_retsa: int = 2
    h_redasa: int = 4
    d_sk: int = 256
    input_len: int = 12
    horizon: int = 12
    k: int = 8
    tau: int = 3
    geo_hops: int = 2
    sem_topk: int = 10
    eps: float = 1e-8
    seed: int = 0
    ablation: str = "full"

    def __post_init__(self):
        self.validate()

    @property
    def total_heads(self) -> int:
        return self.h_ressa + self.h_retsa + self.h_redasa

    @property
    def d0(self) -> int:
        return self.d // self.total_heads

    def validate(self) -> None:
        if min(self.h_ressa, self.h_retsa, self.h_redasa) < 1:
            raise ConfigError("each attention kind needs at least one head")
        if self.d % self.total_heads != 0:
            raise ConfigError(
                f"d={self.d} is not divisible by {self.total_heads} heads")
        if min(self.input_len, self.horizon) < 1:
            raise ConfigError("input_len and horizon must be >= 1")
        if not 0 <= self.tau < self.input_len:
            raise ConfigError(
                f"tau={self.tau} must satisfy 0 <= tau < input_len={self.input_len}")
        if self.k < 1 or self.d_sk < 1 or self.layers < 1:
            raise ConfigError("k, d_sk and layers must be >= 1")
        if self.geo_hops < 0 or self.sem_topk < 1:
            raise ConfigError("geo_hops must be >= 0 and sem_topk >= 1")
        if self.eps <= 0:
            raise ConfigError(f"eps must be positive, got {self.eps}")
        if self.ablation not in ABLATIONS:
            raise ConfigError(
                f"ablation must be one of {ABLATIONS}, got {self.ablation!r}")

    @classmethod
    def graph_preset(cls, **overrides) -> "ModelConfig":
        """Hour-to-hour forecasting on 5-minute sensor data (12 -> 12 steps)."""
        return cls(**{"input_len": 12, "horizon": 12, **overrides})

    @classmethod
    def grid_preset(cls, **overrides) -> "ModelConfig":
        """Grid inflow/outflow: six past steps forecast the next one."""
        return cls(**{"input_len": 6, "horizon": 1, **overrides})


class ParameterStore:
    """Named, ordered, trainable tensors for the whole model."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, tensor: Tensor) -> Tensor:
        if name in self._params:
            raise ConfigError(f"duplicate parameter name {name!r}")
        self._params[name] = tensor
        return tensor

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def trainable(self):
        return ((n, p) for n, p in self._params.items() if p.requires_grad)

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.zero_grad()

    def values_dict(self) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self._params.items()}

    def load_values(self, values: dict[str, np.ndarray]) -> None:
        for name, arr in values.items():
            if name not in self._params:
                raise FormatError(f"unknown parameter {name!r}")
            p = self._params[name]
            if p.data.shape != arr.shape:
                raise FormatError(
                    f"parameter {name!r} has shape {p.data.shape}, "
                    f"stored value has {arr.shape}")
            p.data = np.ascontiguousarray(arr, dtype=np.float64)


@dataclass
class StreamHeadParams:
    """One criss-crossed stream: stage 1 feeds the opposite-kind stage 2.

    In the un-crossed ablation stage 2 reads the layer input directly and
    stage 1 is not instantiated.
    """

    stage1: AttentionHeadParams | None
    stage2: AttentionHeadParams


@dataclass
class EncoderLayerParams:
    ln1_gain: Tensor
    ln1_bias: Tensor
    ln2_gain: Tensor
    ln2_bias: Tensor
    ressa_streams: list[StreamHeadParams]
    retsa_streams: list[StreamHeadParams]
    redasa_heads: list[AttentionHeadParams]
    mixer_w: Tensor
    ffn_w1: Tensor
    ffn_b1: Tensor
    ffn_w2: Tensor
    ffn_b2: Tensor
    skip_kernel: Tensor


@dataclass
class OutputHeadParams:
    conv_time: Tensor  # input_len x horizon
    conv_feat: Tensor  # d_sk x channels


@dataclass
class ModelParams:
    embedding: EmbeddingParams
    layers: list[EncoderLayerParams]
    output: OutputHeadParams


def _glorot(rng, fan_in, fan_out):
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=(fan_in, fan_out))


def _register_head(store: ParameterStore, prefix: str,
                   head: AttentionHeadParams) -> None:
    store.add(f"{prefix}.w_q", head.w_q)
    store.add(f"{prefix}.w_k", head.w_k)
    store.add(f"{prefix}.w_v", head.w_v)
    store.add(f"{prefix}.g", head.g)
    store.add(f"{prefix}.encov", head.encov_kernel)
    if head.delay_gate is not None:
        store.add(f"{prefix}.gate", head.delay_gate)


def build_params(cfg: ModelConfig, channels: int,
                 rng: np.random.Generator | None = None
                 ) -> tuple[ParameterStore, ModelParams]:
    """Fresh parameters for ``cfg``; creation order is fixed so a seed pins
    every initial value."""
    cfg.validate()
    if channels < 1:
        raise ConfigError(f"channels must be >= 1, got {channels}")
    if rng is None:
        rng = make_rng(cfg.seed)
    store = ParameterStore()
    d, d0 = cfg.d, cfg.d0
    no_encov = cfg.ablation == "no_encov"
    crossed = cfg.ablation != "no_ccds"

    emb = init_embedding_params(channels, cfg.k, d, rng)
    store.add("embed.w_data", emb.w_data)
    store.add("embed.w_spe", emb.w_spe)
    store.add("embed.table_week", emb.table_week)
    store.add("embed.table_day", emb.table_day)

    def stream(prefix):
        stage1 = None
        if crossed:
            stage1 = init_head_params(d, d0, rng, encov_zeroed=no_encov)
            _register_head(store, f"{prefix}.s1", stage1)
        stage2 = init_head_params(d0 if crossed else d, d0, rng,
                                  encov_zeroed=no_encov)
        _register_head(store, f"{prefix}.s2", stage2)
        return StreamHeadParams(stage1=stage1, stage2=stage2)

    layers = []
    for i in range(cfg.layers):
        pre = f"layer{i}"
        ln1_gain = store.add(f"{pre}.ln1.gain", Tensor(np.ones(d), requires_grad=True))
        ln1_bias = store.add(f"{pre}.ln1.bias", Tensor(np.zeros(d), requires_grad=True))
        ln2_gain = store.add(f"{pre}.ln2.gain", Tensor(np.ones(d), requires_grad=True))
        ln2_bias = store.add(f"{pre}.ln2.bias", Tensor(np.zeros(d), requires_grad=True))
        ressa = [stream(f"{pre}.ressa{j}") for j in range(cfg.h_ressa)]
        retsa = [stream(f"{pre}.retsa{j}") for j in range(cfg.h_retsa)]
        redasa = []
        for j in range(cfg.h_redasa):
            head = init_head_params(d, d0, rng, with_delay_gate=True,
                                    encov_zeroed=no_encov)
            _register_head(store, f"{pre}.redasa{j}", head)
            redasa.append(head)
        mixer_w = store.add(f"{pre}.mixer.w",
                            Tensor(_glorot(rng, d, d), requires_grad=True))
        ffn_w1 = store.add(f"{pre}.ffn.w1",
                           Tensor(_glorot(rng, d, 4 * d), requires_grad=True))
        ffn_b1 = store.add(f"{pre}.ffn.b1", Tensor(np.zeros(4 * d), requires_grad=True))
        ffn_w2 = store.add(f"{pre}.ffn.w2",
                           Tensor(_glorot(rng, 4 * d, d), requires_grad=True))
        ffn_b2 = store.add(f"{pre}.ffn.b2", Tensor(np.zeros(d), requires_grad=True))
        skip = store.add(f"{pre}.skip.kernel",
                         Tensor(_glorot(rng, d, cfg.d_sk), requires_grad=True))
        layers.append(EncoderLayerParams(
            ln1_gain=ln1_gain, ln1_bias=ln1_bias,
            ln2_gain=ln2_gain, ln2_bias=ln2_bias,
            ressa_streams=ressa, retsa_streams=retsa, redasa_heads=redasa,
            mixer_w=mixer_w, ffn_w1=ffn_w1, ffn_b1=ffn_b1,
            ffn_w2=ffn_w2, ffn_b2=ffn_b2, skip_kernel=skip))

    output = OutputHeadParams(
        conv_time=store.add("output.conv_time",
                            Tensor(_glorot(rng, cfg.input_len, cfg.horizon),
                                   requires_grad=True)),
        conv_feat=store.add("output.conv_feat",
                            Tensor(_glorot(rng, cfg.d_sk, channels),
                                   requires_grad=True)))
    return store, ModelParams(embedding=emb, layers=layers, output=output)


@dataclass
class ModelStatics:
    """Per-dataset inputs the forward pass treats as constants: spectral node
    coordinates plus the geographic and semantic masks."""

    spe_input: np.ndarray
    masks: AttentionMasks

    @classmethod
    def build(cls, net: RoadNetwork, history: TrafficTensor,
              cfg: ModelConfig) -> "ModelStatics":
        """``history`` must cover the training split only (the semantic mask
        is fit on it)."""
        a = build_adjacency(net)
        dec = symmetric_eigen(normalized_laplacian(a))
        return cls(
            spe_input=laplacian_embedding(dec, cfg.k),
            masks=AttentionMasks(m_geo=geo_mask(a, cfg.geo_hops),
                                 m_sem=sem_mask(history, cfg.sem_topk)))


# ---------------------------------------------------------------------------
# forward pass
# ---------------------------------------------------------------------------

def _capture_slot(capture, layer_idx, kind, stage, head_idx):
    if capture is None:
        return None
    return capture.setdefault((layer_idx, kind, stage, head_idx), [])


def _layer_heads_batch(u4: Tensor, layer: EncoderLayerParams,
                       masks: AttentionMasks, cfg: ModelConfig,
                       capture=None, layer_idx: int = 0):
    """Every head of one layer on the normalized input, in mixer order.

    Captured score maps are keyed by matrix type: spatial matrices file under
    "ressa" (stage 1 of the spatial-first stream, stage 2 of the
    temporal-first stream), temporal ones under "retsa", delay-aware under
    "redasa".
    """
    soft = cfg.ablation == "no_relsa"
    enc = cfg.ablation != "no_encov"
    crossed = cfg.ablation != "no_ccds"
    delay = DelayConfig(cfg.tau)
    ressa_outs, retsa_outs, redasa_outs = [], [], []
    for j, sh in enumerate(layer.ressa_streams):
        mid = u4
        if crossed:
            mid = spatial_head_batch(u4, sh.stage1, masks.m_geo, cfg.eps, soft, enc,
                                     _capture_slot(capture, layer_idx, "ressa", 1, j))
        ressa_outs.append(temporal_head_batch(
            mid, sh.stage2, cfg.eps, soft, enc,
            _capture_slot(capture, layer_idx, "retsa", 2, j)))
    for j, sh in enumerate(layer.retsa_streams):
        mid = u4
        if crossed:
            mid = temporal_head_batch(u4, sh.stage1, cfg.eps, soft, enc,
                                      _capture_slot(capture, layer_idx, "retsa", 1, j))
        retsa_outs.append(spatial_head_batch(
            mid, sh.stage2, masks.m_geo, cfg.eps, soft, enc,
            _capture_slot(capture, layer_idx, "ressa", 2, j)))
    for j, head in enumerate(layer.redasa_heads):
        redasa_outs.append(delay_head_batch(
            u4, head, masks.m_sem, delay, cfg.eps, soft, enc,
            _capture_slot(capture, layer_idx, "redasa", 1, j)))
    return ressa_outs, redasa_outs, retsa_outs


def criss_cross_streams(x: Tensor, layer: EncoderLayerParams,
                        masks: AttentionMasks, cfg: ModelConfig
                        ) -> tuple[Tensor, Tensor]:
    """The two crossed streams of one window (T, N, d).

    Returns the concatenated spatial-first and temporal-first stream outputs,
    each (T, N, d0 * heads-of-that-kind).
    """
    t, n, d = x.shape
    u4 = ad.reshape(x, (1, t, n, d))
    ressa_outs, _, retsa_outs = _layer_heads_batch(u4, layer, masks, cfg)
    o_ressa = ad.concat(ressa_outs, axis=-1)
    o_retsa = ad.concat(retsa_outs, axis=-1)
    return (ad.reshape(o_ressa, o_ressa.shape[1:]),
            ad.reshape(o_retsa, o_retsa.shape[1:]))


def restsa_mix(head_outputs: list[Tensor], w_hat: Tensor) -> Tensor:
    """Concatenate head outputs (spatial, delay-aware, temporal order) and
    project back to width d."""
    cat = ad.concat(head_outputs, axis=-1)
    if cat.shape[-1] != w_hat.shape[0]:
        raise DimensionError(
            f"concatenated head width {cat.shape[-1]} does not match "
            f"mixer projection {w_hat.shape}")
    lead = cat.shape[:-1]
    flat = ad.matmul(ad.reshape(cat, (int(np.prod(lead)), cat.shape[-1])), w_hat)
    return ad.reshape(flat, lead + (w_hat.shape[1],))


def _encoder_layer_batch(x4: Tensor, layer: EncoderLayerParams,
                         masks: AttentionMasks, cfg: ModelConfig,
                         capture=None, layer_idx: int = 0) -> Tensor:
    u = ad.layer_norm(x4, layer.ln1_gain, layer.ln1_bias, cfg.eps)
    ressa, redasa, retsa = _layer_heads_batch(u, layer, masks, cfg,
                                              capture, layer_idx)
    y1 = restsa_mix([*ressa, *redasa, *retsa], layer.mixer_w)
    z = ad.layer_norm(y1 + x4, layer.ln2_gain, layer.ln2_bias, cfg.eps)
    b, t, n, d = z.shape
    z2 = ad.reshape(z, (b * t * n, d))
    hidden = ad.relu(ad.matmul(z2, layer.ffn_w1) + layer.ffn_b1)
    ffn = ad.reshape(ad.matmul(hidden, layer.ffn_w2) + layer.ffn_b2, (b, t, n, d))
    return ffn + y1 + x4


def encoder_layer_forward(x: Tensor, layer: EncoderLayerParams,
                          masks: AttentionMasks, cfg: ModelConfig) -> Tensor:
    """One shape-preserving encoder layer on a single (T, N, d) window."""
    t, n, d = x.shape
    out = _encoder_layer_batch(ad.reshape(x, (1, t, n, d)), layer, masks, cfg)
    return ad.reshape(out, (t, n, d))


def output_head(layer_outputs: list[Tensor], params: ModelParams) -> Tensor:
    """Skip-tap each layer output into d_sk, sum, then map time h -> h' and
    features d_sk -> C with two pointwise linear stages."""
    if len(layer_outputs) != len(params.layers):
        raise DimensionError(
            f"got {len(layer_outputs)} layer outputs for "
            f"{len(params.layers)} layers")
    squeeze = layer_outputs[0].data.ndim == 3
    y_hid = None
    for out_l, lp in zip(layer_outputs, params.layers):
        x4 = ad.reshape(out_l, (1,) + out_l.shape) if squeeze else out_l
        b, t, n, d = x4.shape
        tap = ad.reshape(ad.matmul(ad.reshape(x4, (b * t * n, d)), lp.skip_kernel),
                         (b, t, n, lp.skip_kernel.shape[1]))
        y_hid = tap if y_hid is None else y_hid + tap

    b, t, n, dsk = y_hid.shape
    conv_time, conv_feat = params.output.conv_time, params.output.conv_feat
    if conv_time.shape[0] != t:
        raise DimensionError(
            f"output head expects {conv_time.shape[0]} input steps, got {t}")
    h_out = conv_time.shape[1]
    yt = ad.reshape(ad.transpose(y_hid, (0, 2, 3, 1)), (b * n * dsk, t))
    yt = ad.reshape(ad.matmul(yt, conv_time), (b, n, dsk, h_out))
    yt = ad.transpose(yt, (0, 3, 1, 2))
    out = ad.reshape(ad.matmul(ad.reshape(yt, (b * h_out * n, dsk)), conv_feat),
                     (b, h_out, n, conv_feat.shape[1]))
    return ad.reshape(out, out.shape[1:]) if squeeze else out


def model_forward_batch(x: np.ndarray, week_idx: np.ndarray, day_idx: np.ndarray,
                        statics: ModelStatics, cfg: ModelConfig,
                        params: ModelParams, capture=None) -> Tensor:
    """Forward pass over stacked windows: (B, h, N, C) -> (B, h', N, C)."""
    if x.shape[1] != cfg.input_len:
        raise DimensionError(
            f"window length {x.shape[1]} does not match input_len {cfg.input_len}")
    emb = embed_batch(x, week_idx, day_idx, statics.spe_input, params.embedding)
    taps = []
    h = emb
    for i, lp in enumerate(params.layers):
        h = _encoder_layer_batch(h, lp, statics.masks, cfg, capture, i)
        taps.append(h)
    return output_head(taps, params)


def model_forward(window: TrafficTensor, statics: ModelStatics,
                  cfg: ModelConfig, params: ModelParams,
                  capture=None) -> Tensor:
    """Forecast one window: (h, N, C) normalized values -> (h', N, C)."""
    week, day = temporal_index_arrays(
        window.start_timestamp, window.num_steps, window.interval_minutes)
    out = model_forward_batch(window.values[None], week[None], day[None],
                              statics, cfg, params, capture)
    return ad.reshape(out, out.shape[1:])


# ---------------------------------------------------------------------------
# checkpoint serialization
# ---------------------------------------------------------------------------

def _config_text(cfg: ModelConfig, channels: int) -> str:
    lines = [f"channels={channels}"]
    for f in fields(ModelConfig):
        v = getattr(cfg, f.name)
        lines.append(f"{f.name}={v!r}" if isinstance(v, str) else f"{f.name}={v}")
    return "\n".join(lines) + "\n"


def _parse_config_text(text: str) -> tuple[ModelConfig, int]:
    kv = {}
    for lineno, line in enumerate(text.strip().splitlines(), start=1):
        if "=" not in line:
            raise FormatError(f"config snapshot line {lineno} is not key=value")
        key, val = line.split("=", 1)
        kv[key.strip()] = val.strip()
    if "channels" not in kv:
        raise FormatError("config snapshot is missing 'channels'")
    channels = int(kv.pop("channels"))
    casts = {"int": int, "float": float, "str": lambda s: s.strip("'\"")}
    args = {}
    for f in fields(ModelConfig):
        if f.name not in kv:
            raise FormatError(f"config snapshot is missing {f.name!r}")
        args[f.name] = casts[f.type](kv.pop(f.name))
    if kv:
        raise FormatError(f"config snapshot has unknown keys: {sorted(kv)}")
    return ModelConfig(**args), channels


def save_checkpoint(path: str, store: ParameterStore, cfg: ModelConfig,
                    channels: int,
                    extras: dict[str, np.ndarray] | None = None) -> None:
    """Write magic, length-prefixed manifest, float64-LE payload, then the
    config snapshot; the write is atomic (temp file + rename)."""
    entries = [(n, p.data) for n, p in store.items()]
    for name, arr in (extras or {}).items():
        entries.append((name, np.asarray(arr, dtype=np.float64)))
    manifest = "".join(
        f"{name} {' '.join(str(s) for s in arr.shape)}\n" for name, arr in entries)
    mbytes = manifest.encode("utf-8")
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(len(mbytes).to_bytes(8, "little"))
    buf.write(mbytes)
    for _, arr in entries:
        buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    buf.write(_config_text(cfg, channels).encode("utf-8"))
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(buf.getvalue())
    os.replace(tmp, path)


@dataclass
class Checkpoint:
    arrays: dict[str, np.ndarray]
    config: ModelConfig
    channels: int


def load_checkpoint(path: str) -> Checkpoint:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != CHECKPOINT_MAGIC:
        raise FormatError(f"bad checkpoint magic in {path}")
    mlen = int.from_bytes(blob[8:16], "little")
    if len(blob) < 16 + mlen:
        raise FormatError("checkpoint truncated inside manifest")
    manifest = blob[16:16 + mlen].decode("utf-8")
    pos = 16 + mlen
    arrays: dict[str, np.ndarray] = {}
    for lineno, line in enumerate(manifest.splitlines(), start=1):
        parts = line.split()
        if len(parts) < 2:
            raise FormatError(f"manifest line {lineno} is malformed: {line!r}")
        name, shape = parts[0], tuple(int(s) for s in parts[1:])
        nbytes = int(np.prod(shape)) * 8
        if pos + nbytes > len(blob):
            raise FormatError(f"checkpoint payload truncated at {name!r}")
        arrays[name] = np.frombuffer(
            blob[pos:pos + nbytes], dtype="<f8").reshape(shape).copy()
        pos += nbytes
    cfg, channels = _parse_config_text(blob[pos:].decode("utf-8"))
    return Checkpoint(arrays=arrays, config=cfg, channels=channels)


def restore_model(ckpt: Checkpoint,
                  expected_cfg: ModelConfig | None = None
                  ) -> tuple[ParameterStore, ModelParams, dict[str, np.ndarray]]:
    """Rebuild a model from a checkpoint; returns leftover (extra) arrays.

    A caller that insists on a particular configuration passes
    ``expected_cfg``; any field disagreement fails loudly.
    """
    if expected_cfg is not None and expected_cfg != ckpt.config:
        diffs = [f.name for f in fields(ModelConfig)
                 if getattr(expected_cfg, f.name) != getattr(ckpt.config, f.name)]
        raise FormatError(f"checkpoint config differs on fields: {diffs}")
    store, params = build_params(ckpt.config, ckpt.channels)
    param_values = {n: a for n, a in ckpt.arrays.items() if n in store}
    missing = [n for n in store.names() if n not in param_values]
    if missing:
        raise FormatError(f"checkpoint is missing parameters: {missing[:5]}")
    store.load_values(param_values)
    extras = {n: a for n, a in ckpt.arrays.items() if n not in store}
    return store, params, extras


def clone_config(cfg: ModelConfig, **overrides) -> ModelConfig:
    return replace(cfg, **overrides)
