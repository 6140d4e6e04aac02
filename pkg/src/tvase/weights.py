"""Model configuration, the named-parameter container and its binary file format."""
from __future__ import annotations

import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from tvase.numerics import BN_EPS, PRELU_INIT, Rng, conv_fans, transposed_output_size, xavier_uniform

DKG_VARIANTS = ("none", "non_separable", "separable")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    n_bins: int = 161
    kernel: tuple[int, int] = (2, 5)
    enc_channels: tuple[int, ...] = (16, 32, 64, 64)
    enc_freq_strides: tuple[int, ...] = (1, 4, 4, 2)
    enc_freq_pads: tuple[int, ...] = (2, 2, 2, 1)
    fuse_channels: int = 64
    fuse_pad: int = 2
    num_tvase: int = 4
    tcm_channels: tuple[int, int] = (256, 256)
    tcm_kernel: int = 3
    attn_groups: int = 5
    attn_channels: int = 64
    window: int = 100
    dkg: str = "separable"
    dkg_kernel: int = 10
    sep_k0_channels: tuple[int, ...] = (80, 20)
    dec_channels: tuple[int, ...] = (64, 32, 16, 2)
    dec_freq_strides: tuple[int, ...] = (2, 4, 4, 1)
    dec_freq_pads: tuple[int, ...] = (1, 2, 2, 2)
    final_channels: int = 2
    final_pad: int = 2

    def __post_init__(self):
        if self.dkg not in DKG_VARIANTS:
            raise ConfigError(f"unknown DKG variant {self.dkg!r}; choose from {DKG_VARIANTS}")
        n = len(self.enc_channels)
        if not (len(self.enc_freq_strides) == len(self.enc_freq_pads) == n):
            raise ConfigError("encoder channel/stride/pad lists differ in length")
        if not (len(self.dec_channels) == len(self.dec_freq_strides) == len(self.dec_freq_pads) == n):
            raise ConfigError("decoder lists must have one entry per encoder layer")
        if self.latent % self.attn_groups:
            raise ConfigError(f"latent width {self.latent} not divisible by {self.attn_groups} groups")
        sizes = self.enc_freqs
        if min(sizes) < 1:
            raise ConfigError(f"encoder frequency ladder collapses: {sizes}")
        f = sizes[-1]
        for k in range(n):
            f = transposed_output_size(f, self.dec_freq_strides[k], self.dec_freq_pads[k], self.kernel[1])
            want = sizes[n - 2 - k] if k < n - 1 else self.n_bins
            if f != want:
                raise ConfigError(f"decoder stage {k} yields {f} bins, encoder skip has {want}")
            if k < n - 1 and self.dec_channels[k] != self.enc_channels[n - 2 - k]:
                raise ConfigError(
                    f"decoder stage {k} has {self.dec_channels[k]} channels, "
                    f"skip has {self.enc_channels[n - 2 - k]}"
                )
        if self.enc_channels[-1] != self.fuse_channels:
            raise ConfigError("fusion channels must equal the last encoder width (first gated skip)")

    @property
    def enc_freqs(self) -> list[int]:
        sizes, f = [], self.n_bins
        for s, p in zip(self.enc_freq_strides, self.enc_freq_pads):
            f = (f + 2 * p - self.kernel[1]) // s + 1
            sizes.append(f)
        return sizes

    @property
    def latent_freqs(self) -> int:
        return self.enc_freqs[-1]

    @property
    def latent(self) -> int:
        return self.latent_freqs * self.fuse_channels

    @property
    def group_width(self) -> int:
        return self.latent // self.attn_groups

    def to_meta(self) -> dict[str, str]:
        out = {}
        for k, v in asdict(self).items():
            out[k] = ",".join(map(str, v)) if isinstance(v, tuple) else str(v)
        return out

    @classmethod
    def from_meta(cls, meta: dict[str, str]) -> "ModelConfig":
        kwargs = {}
        for f in fields(cls):
            if f.name not in meta:
                continue
            raw = meta[f.name]
            default = getattr(cls, f.name, None)
            if isinstance(default, tuple):
                kwargs[f.name] = tuple(int(v) for v in raw.split(",")) if raw else ()
            elif isinstance(default, int):
                kwargs[f.name] = int(raw)
            else:
                kwargs[f.name] = raw
        return cls(**kwargs)


@dataclass(frozen=True)
class LayerSpec:
    """One learnable layer: a convolution with an optional BN + PReLU epilogue."""

    name: str
    kind: str  # conv2d | deconv2d | conv1d
    weight_shape: tuple[int, ...]
    groups: int = 1
    norm: bool = True

    @property
    def out_channels(self) -> int:
        if self.kind == "deconv2d":
            return self.weight_shape[1]
        return self.weight_shape[0]

    def tensor_shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        c = self.out_channels
        shapes = [(f"{self.name}.weight", self.weight_shape), (f"{self.name}.bias", (c,))]
        if self.norm:
            shapes += [(f"{self.name}.bn.{p}", (c,)) for p in ("gamma", "beta", "mean", "var")]
            shapes.append((f"{self.name}.prelu", (c,)))
        return shapes


def layer_specs(cfg: ModelConfig) -> list[LayerSpec]:
    """Every learnable layer in graph order; the list index is the layer's RNG stream id."""
    kt, kf = cfg.kernel
    specs: list[LayerSpec] = []
    for side in ("mic", "far"):
        c_in = 2
        for i, c in enumerate(cfg.enc_channels):
            specs.append(LayerSpec(f"enc_{side}.{i}", "conv2d", (c, c_in, kt, kf)))
            c_in = c
    specs.append(LayerSpec("fuse", "conv2d", (cfg.fuse_channels, 2 * cfg.enc_channels[-1], kt, kf)))

    d, (h1, h2) = cfg.latent, cfg.tcm_channels
    g, a = cfg.attn_groups, cfg.attn_channels
    m = cfg.dkg_kernel
    for b in range(cfg.num_tvase):
        p = f"tvase.{b}"
        specs += [
            LayerSpec(f"{p}.tcm.pw1", "conv1d", (h1, d, 1)),
            LayerSpec(f"{p}.tcm.dw", "conv1d", (h2, 1, cfg.tcm_kernel), groups=h1),
            LayerSpec(f"{p}.tcm.pw2", "conv1d", (d, h2, 1)),
        ]
        for proj in ("q", "k", "v"):
            specs.append(LayerSpec(f"{p}.attn.{proj}", "conv1d", (g * a, cfg.group_width, 1), groups=g))
        specs.append(LayerSpec(f"{p}.attn.out", "conv1d", (d, g * a, 1)))
        if cfg.dkg == "non_separable":
            f_groups, c = cfg.latent_freqs, cfg.fuse_channels
            specs.append(
                LayerSpec(f"{p}.dkg.gen", "conv1d", (f_groups * c * m, c, 1), groups=f_groups, norm=False)
            )
        elif cfg.dkg == "separable":
            c_in = d
            for i, c in enumerate(cfg.sep_k0_channels):
                specs.append(LayerSpec(f"{p}.dkg.k0.{i}", "conv1d", (c, c_in, 1)))
                c_in = c
            specs.append(LayerSpec(f"{p}.dkg.k0.{len(cfg.sep_k0_channels)}", "conv1d", (m, c_in, 1), norm=False))
            specs.append(LayerSpec(f"{p}.dkg.ks", "conv1d", (d, d, 1), norm=False))

    n = len(cfg.enc_channels)
    c_dec = cfg.fuse_channels
    for k in range(n):
        c_skip = cfg.enc_channels[n - 1 - k]
        specs.append(LayerSpec(f"dec.gate.{k}", "conv2d", (c_skip, c_skip + c_dec, 1, 1), norm=False))
        specs.append(LayerSpec(f"dec.deconv.{k}", "deconv2d", (c_dec, cfg.dec_channels[k], kt, kf)))
        c_dec = cfg.dec_channels[k]
    specs.append(LayerSpec("dec.final", "conv2d", (cfg.final_channels, c_dec, kt, kf), norm=False))
    return specs


@dataclass(eq=False)
class ModelWeights:
    config: ModelConfig
    tensors: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)

    def __post_init__(self):
        self._cast_cache: dict = {}

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def cast(self, dtype) -> dict[str, np.ndarray]:
        """Read-only view of all tensors in ``dtype`` (cached per dtype)."""
        dtype = np.dtype(dtype)
        if dtype not in self._cast_cache:
            cast = {}
            for k, v in self.tensors.items():
                arr = v.astype(dtype)
                arr.flags.writeable = False
                cast[k] = arr
            self._cast_cache[dtype] = cast
        return self._cast_cache[dtype]

    def folded_norms(self, dtype) -> dict[str, tuple[np.ndarray, np.ndarray, np.ndarray]]:
        """Per normalised layer: (BN scale, BN shift, PReLU slope) in ``dtype``.

        ``y = x * scale + shift`` equals inference batch norm up to rounding.
        """
        key = ("norms", np.dtype(dtype))
        if key not in self._cast_cache:
            w = self.cast(dtype)
            out = {}
            for name in w:
                if name.endswith(".bn.gamma"):
                    layer = name[: -len(".bn.gamma")]
                    scale = w[name] / np.sqrt(w[f"{layer}.bn.var"] + np.asarray(BN_EPS, w[name].dtype))
                    shift = w[f"{layer}.bn.beta"] - w[f"{layer}.bn.mean"] * scale
                    out[layer] = (scale, shift, w[f"{layer}.prelu"])
            self._cast_cache[key] = out
        return self._cast_cache[key]

    def equal(self, other: "ModelWeights") -> bool:
        return (
            self.config == other.config
            and list(self.tensors) == list(other.tensors)
            and all(np.array_equal(self.tensors[k], other.tensors[k]) for k in self.tensors)
            and all(self.tensors[k].dtype == other.tensors[k].dtype for k in self.tensors)
        )


def build(config: ModelConfig, seed: int = 0) -> ModelWeights:
    """Xavier-uniform conv weights, zero biases, identity BN, PReLU slope 0.25."""
    rng = Rng(seed)
    tensors: OrderedDict[str, np.ndarray] = OrderedDict()
    for stream_id, spec in enumerate(layer_specs(config)):
        fan_in, fan_out = conv_fans(spec.weight_shape, transposed=spec.kind == "deconv2d")
        tensors[f"{spec.name}.weight"] = xavier_uniform(
            spec.weight_shape, fan_in, fan_out, rng.stream(stream_id)
        )
        c = spec.out_channels
        tensors[f"{spec.name}.bias"] = np.zeros(c, np.float32)
        if spec.norm:
            tensors[f"{spec.name}.bn.gamma"] = np.ones(c, np.float32)
            tensors[f"{spec.name}.bn.beta"] = np.zeros(c, np.float32)
            tensors[f"{spec.name}.bn.mean"] = np.zeros(c, np.float32)
            tensors[f"{spec.name}.bn.var"] = np.ones(c, np.float32)
            tensors[f"{spec.name}.prelu"] = np.full(c, PRELU_INIT, np.float32)
    return ModelWeights(config, tensors)


def randomize_norms(weights: ModelWeights, seed: int) -> ModelWeights:
    """Copy of ``weights`` with random biases, BN statistics and PReLU slopes.

    Freshly built weights have identity norms and zero biases, which hides
    bugs in those paths; tests and equivalence checks use this instead.
    """
    gen = np.random.default_rng(seed)
    out = OrderedDict()
    for name, v in weights.tensors.items():
        if name.endswith(".bias") or name.endswith(".bn.beta") or name.endswith(".bn.mean"):
            v = gen.normal(0.0, 0.1, v.shape).astype(np.float32)
        elif name.endswith(".bn.gamma") or name.endswith(".bn.var"):
            v = gen.uniform(0.5, 1.5, v.shape).astype(np.float32)
        elif name.endswith(".prelu"):
            v = gen.uniform(0.0, 0.5, v.shape).astype(np.float32)
        out[name] = v.copy()
    return ModelWeights(weights.config, out)


LEARNABLE_SUFFIXES = (".weight", ".bias", ".bn.gamma", ".bn.beta", ".prelu")


def count_params(weights_or_config, include_buffers: bool = False) -> int:
    """Number of learnable scalars (BN running statistics only with ``include_buffers``)."""
    return sum(n for _, n in layer_counts(weights_or_config, include_buffers))


def layer_counts(weights_or_config, include_buffers: bool = False) -> list[tuple[str, int]]:
    cfg = weights_or_config.config if isinstance(weights_or_config, ModelWeights) else weights_or_config
    rows = []
    for spec in layer_specs(cfg):
        total = 0
        for name, shape in spec.tensor_shapes():
            if include_buffers or name.endswith(LEARNABLE_SUFFIXES):
                total += int(np.prod(shape))
        rows.append((spec.name, total))
    return rows


# ---------------------------------------------------------------------------
# weight file: b"TVSE", u32 version, u32 meta length, meta (key=value lines),
# u32 tensor count, then per tensor: u32 name length, name, u8 rank,
# rank × u32 dims, little-endian float32 data (row-major)

MAGIC = b"TVSE"
VERSION = 1


class WeightFileError(ValueError):
    pass


def save_weights(weights: ModelWeights, path) -> None:
    meta = "".join(f"{k}={v}\n" for k, v in weights.config.to_meta().items()).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", VERSION, len(meta)), meta, struct.pack("<I", len(weights.tensors))]
    for name, arr in weights.tensors.items():
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise WeightFileError(f"truncated weight file while reading {what}")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def load_weights(path) -> ModelWeights:
    r = _Reader(Path(path).read_bytes())
    if r.take(4, "magic") != MAGIC:
        raise WeightFileError("bad magic: not a TVSE weight file")
    version, meta_len = r.unpack("<II", "header")
    if version != VERSION:
        raise WeightFileError(f"unsupported weight file version {version}")
    try:
        text = r.take(meta_len, "metadata").decode("utf-8")
    except UnicodeDecodeError as exc:
        raise WeightFileError("metadata block is not UTF-8") from exc
    meta = dict(line.split("=", 1) for line in text.splitlines() if line)
    try:
        config = ModelConfig.from_meta(meta)
    except (ConfigError, ValueError) as exc:
        raise WeightFileError(f"invalid config metadata: {exc}") from exc
    (count,) = r.unpack("<I", "tensor count")
    tensors: OrderedDict[str, np.ndarray] = OrderedDict()
    for _ in range(count):
        (n,) = r.unpack("<I", "name length")
        name = r.take(n, "tensor name").decode("utf-8")
        (rank,) = r.unpack("<B", f"rank of {name}")
        dims = r.unpack(f"<{rank}I", f"dims of {name}")
        size = int(np.prod(dims)) if rank else 1
        data = np.frombuffer(r.take(4 * size, f"data of {name}"), dtype="<f4")
        tensors[name] = data.reshape(dims).astype(np.float32)
    if r.pos != len(r.buf):
        raise WeightFileError(f"{len(r.buf) - r.pos} trailing bytes after last tensor")
    expected = [entry for spec in layer_specs(config) for entry in spec.tensor_shapes()]
    if list(tensors) != [n for n, _ in expected]:
        missing = sorted({n for n, _ in expected} - set(tensors))
        raise WeightFileError(f"tensor set does not match config (missing: {missing[:5]})")
    for name, shape in expected:
        if tensors[name].shape != tuple(shape):
            raise WeightFileError(f"{name}: shape {tensors[name].shape}, config needs {shape}")
    return ModelWeights(config, tensors)
