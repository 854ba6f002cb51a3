"""
Convolutional autoencoder, encoder-plus-head binary classifier, weight
transfer between them, and the ``.gfsl`` checkpoint format.

Parameter names are dotted paths (``encoder.conv2.weight``). The encoder
stack is shared verbatim by both models, so a pretrained autoencoder's
encoder entries can be copied into a classifier by name.

Checkpoint layout (all integers little-endian uint32)::

    b"GFSL" | version | entry_count
    entry*: name_len | utf-8 name | rank | dim*rank | float32-LE payload
    crc32 of every preceding byte
"""
from __future__ import annotations

import math
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from . import tensor as T
from .errors import (
    BadMagicError,
    ChecksumError,
    CheckpointError,
    ConfigError,
    TransferError,
    TruncatedCheckpointError,
    UnsupportedVersionError,
)

DEFAULT_CHANNELS = (16, 32, 64)
DEFAULT_FC_WIDTH = 128
ENCODER_LAYERS = ("encoder.conv1", "encoder.conv2", "encoder.conv3")
DECODER_LAYERS = ("decoder.deconv1", "decoder.deconv2", "decoder.deconv3")
HEAD_LAYERS = ("head.fc1", "head.fc2")


def encoder_specs(channels=DEFAULT_CHANNELS) -> list[T.ConvSpec]:
    widths = (1,) + tuple(channels)
    return [T.ConvSpec(widths[i], widths[i + 1], 3, 3, stride=2, padding=1) for i in range(3)]


def decoder_specs(channels=DEFAULT_CHANNELS) -> list[T.ConvSpec]:
    widths = tuple(reversed(channels)) + (1,)
    return [T.ConvSpec(widths[i], widths[i + 1], 3, 3, stride=2, padding=1, output_padding=1) for i in range(3)]


def _uniform(rng, shape, fan_in):
    bound = math.sqrt(1.0 / fan_in)
    return rng.uniform(-bound, bound, shape).astype(np.float32)


def _init_conv(params, rng, name, spec, transposed=False):
    shape = (spec.in_channels, spec.out_channels) if transposed else (spec.out_channels, spec.in_channels)
    params[f"{name}.weight"] = _uniform(rng, shape + (spec.kernel_h, spec.kernel_w), spec.in_channels * spec.kernel_h * spec.kernel_w)
    params[f"{name}.bias"] = np.zeros(spec.out_channels, np.float32)


def _check_image_size(image_size):
    if image_size < 8 or image_size % 8:
        raise ConfigError(f"image_size must be a positive multiple of 8, got {image_size}")


def latent_shape(image_size, channels=DEFAULT_CHANNELS) -> tuple[int, int, int]:
    return (channels[-1], image_size // 8, image_size // 8)


# ---------------------------------------------------------------------------
# shared encoder
# ---------------------------------------------------------------------------


def encoder_forward(params, specs, x):
    """Three strided conv+ReLU stages; returns ``(latent, cache)``."""
    cache = []
    h = T.as_tensor(x)
    for name, spec in zip(ENCODER_LAYERS, specs):
        z = T.conv2d_forward(h, params[f"{name}.weight"], params[f"{name}.bias"], spec)
        cache.append((h, z))
        h = T.relu_forward(z)
    return h, cache


def encoder_backward(params, specs, cache, grad_latent, grads):
    g = grad_latent
    for name, spec, (h, z) in reversed(list(zip(ENCODER_LAYERS, specs, cache))):
        g = T.relu_backward(z, g)
        g, grads[f"{name}.weight"], grads[f"{name}.bias"] = T.conv2d_backward(h, params[f"{name}.weight"], spec, g)
    return g


# ---------------------------------------------------------------------------
# autoencoder
# ---------------------------------------------------------------------------


@dataclass
class AutoencoderModel:
    params: dict
    image_size: int
    channels: tuple = DEFAULT_CHANNELS

    def __post_init__(self):
        self.encoder = encoder_specs(self.channels)
        self.decoder = decoder_specs(self.channels)

    @property
    def latent_shape(self):
        return latent_shape(self.image_size, self.channels)

    def encoder_params(self) -> dict:
        return {k: v for k, v in self.params.items() if k.startswith("encoder.")}

    def forward_train(self, x):
        latent, enc_cache = encoder_forward(self.params, self.encoder, x)
        h, dec_cache = latent, []
        for i, (name, spec) in enumerate(zip(DECODER_LAYERS, self.decoder)):
            z = T.conv_transpose2d_forward(h, self.params[f"{name}.weight"], self.params[f"{name}.bias"], spec)
            dec_cache.append((h, z))
            h = T.relu_forward(z) if i < 2 else T.sigmoid_forward(z)
        return h, latent, (enc_cache, dec_cache, h)

    def backward(self, cache, grad_recon) -> dict:
        enc_cache, dec_cache, recon = cache
        grads = {}
        g = T.sigmoid_backward(recon, grad_recon)
        for i in (2, 1, 0):
            name, spec = DECODER_LAYERS[i], self.decoder[i]
            h, z = dec_cache[i]
            if i < 2:
                g = T.relu_backward(z, g)
            g, grads[f"{name}.weight"], grads[f"{name}.bias"] = T.conv_transpose2d_backward(
                h, self.params[f"{name}.weight"], spec, g
            )
        encoder_backward(self.params, self.encoder, enc_cache, g, grads)
        return grads


def build_autoencoder(image_size: int = 64, seed: int = 0, channels=DEFAULT_CHANNELS) -> AutoencoderModel:
    """Fresh autoencoder; weights uniform in ``+-sqrt(1/fan_in)``, biases zero.

    ``fan_in`` is ``in_channels * kh * kw`` for both conv and transposed conv.
    """
    _check_image_size(image_size)
    channels = tuple(int(c) for c in channels)
    if len(channels) != 3 or min(channels) < 1:
        raise ConfigError(f"channels must be three positive widths, got {channels}")
    rng = np.random.default_rng(seed)
    params = {}
    for name, spec in zip(ENCODER_LAYERS, encoder_specs(channels)):
        _init_conv(params, rng, name, spec)
    for name, spec in zip(DECODER_LAYERS, decoder_specs(channels)):
        _init_conv(params, rng, name, spec, transposed=True)
    return AutoencoderModel(params, image_size, channels)


def autoencoder_forward(model: AutoencoderModel, batch):
    """Return ``(reconstruction, latent)``."""
    recon, latent, _ = model.forward_train(batch)
    return recon, latent


# ---------------------------------------------------------------------------
# classifier
# ---------------------------------------------------------------------------


@dataclass
class ClassifierModel:
    params: dict
    image_size: int
    channels: tuple = DEFAULT_CHANNELS
    fc_width: int = DEFAULT_FC_WIDTH
    frozen: dict = field(default_factory=dict)

    def __post_init__(self):
        self.encoder = encoder_specs(self.channels)
        for layer in ENCODER_LAYERS + HEAD_LAYERS:
            self.frozen.setdefault(layer, layer in ENCODER_LAYERS)

    @property
    def layers(self):
        return ENCODER_LAYERS + HEAD_LAYERS

    @property
    def encoder_frozen(self) -> bool:
        return all(self.frozen[layer] for layer in ENCODER_LAYERS)

    def trainable(self) -> list[str]:
        return [n for n in self.params if self.frozen[n.rsplit(".", 1)[0]] is False]

    def features(self, x):
        latent, cache = encoder_forward(self.params, self.encoder, x)
        return latent.reshape(len(latent), -1), cache

    def head_forward(self, feats):
        p = self.params
        z1 = T.linear_forward(feats, p["head.fc1.weight"], p["head.fc1.bias"])
        h1 = T.relu_forward(z1)
        z2 = T.linear_forward(h1, p["head.fc2.weight"], p["head.fc2.bias"])
        probs = T.sigmoid_forward(z2)[:, 0]
        return probs, (feats, z1, h1, probs)

    def head_backward(self, cache, grad_probs, grads):
        feats, z1, h1, probs = cache
        p = self.params
        g = T.sigmoid_backward(probs[:, None], T.as_tensor(grad_probs)[:, None])
        g, grads["head.fc2.weight"], grads["head.fc2.bias"] = T.linear_backward(h1, p["head.fc2.weight"], g)
        g = T.relu_backward(z1, g)
        g, grads["head.fc1.weight"], grads["head.fc1.bias"] = T.linear_backward(feats, p["head.fc1.weight"], g)
        return g

    def forward_train(self, x):
        feats, enc_cache = self.features(x)
        probs, head_cache = self.head_forward(feats)
        return probs, (enc_cache, head_cache)

    def backward(self, cache, grad_probs) -> dict:
        """Gradients for every unfrozen parameter; frozen ones are omitted."""
        enc_cache, head_cache = cache
        grads = {}
        g = self.head_backward(head_cache, grad_probs, grads)
        if not self.encoder_frozen:
            latent_shape = enc_cache[-1][1].shape
            encoder_backward(self.params, self.encoder, enc_cache, g.reshape(latent_shape), grads)
        keep = set(self.trainable())
        return {k: v for k, v in grads.items() if k in keep}


def _encoder_shapes(channels):
    shapes = {}
    for name, spec in zip(ENCODER_LAYERS, encoder_specs(channels)):
        shapes[f"{name}.weight"] = (spec.out_channels, spec.in_channels, 3, 3)
        shapes[f"{name}.bias"] = (spec.out_channels,)
    return shapes


def _infer_channels(params):
    widths = []
    for layer in ENCODER_LAYERS:
        key = f"{layer}.weight"
        if key not in params:
            raise TransferError(key, "missing from checkpoint")
        widths.append(int(np.shape(params[key])[0]))
    return tuple(widths)


def build_classifier_from_encoder(
    checkpoint, image_size: int = 64, seed: int = 0, fc_width: int = DEFAULT_FC_WIDTH, channels=None
) -> ClassifierModel:
    """Classifier whose encoder is copied bit-exactly from ``checkpoint``.

    ``checkpoint`` is a parameter mapping or a path to a ``.gfsl`` file.
    Channel widths are read from the checkpoint unless given. The head is
    freshly initialised from ``seed``; encoder layers start frozen.
    """
    params = load_checkpoint(checkpoint) if isinstance(checkpoint, (str, Path)) else checkpoint
    _check_image_size(image_size)
    if channels is None:
        channels = _infer_channels(params)
    channels = tuple(channels)
    new = {}
    for key, shape in _encoder_shapes(channels).items():
        if key not in params:
            raise TransferError(key, "missing from checkpoint")
        src = np.asarray(params[key])
        if src.shape != shape or src.dtype != np.float32:
            raise TransferError(key, f"expected float32 {shape}, checkpoint has {src.dtype} {src.shape}")
        new[key] = src.copy()
    rng = np.random.default_rng(seed)
    n_latent = int(np.prod(latent_shape(image_size, channels)))
    new["head.fc1.weight"] = _uniform(rng, (fc_width, n_latent), n_latent)
    new["head.fc1.bias"] = np.zeros(fc_width, np.float32)
    new["head.fc2.weight"] = _uniform(rng, (1, fc_width), fc_width)
    new["head.fc2.bias"] = np.zeros(1, np.float32)
    return ClassifierModel(new, image_size, channels, fc_width)


def classifier_from_checkpoint(checkpoint) -> ClassifierModel:
    """Rebuild a saved classifier, inferring geometry from tensor shapes."""
    params = load_checkpoint(checkpoint) if isinstance(checkpoint, (str, Path)) else dict(checkpoint)
    channels = _infer_channels(params)
    for key in ("head.fc1.weight", "head.fc1.bias", "head.fc2.weight", "head.fc2.bias"):
        if key not in params:
            raise TransferError(key, "missing from classifier checkpoint")
    fc_width, n_latent = params["head.fc1.weight"].shape
    side = math.isqrt(n_latent // channels[-1])
    if channels[-1] * side * side != n_latent:
        raise TransferError("head.fc1.weight", f"{n_latent} inputs is not {channels[-1]} x square latent")
    model = build_classifier_from_encoder(params, side * 8, fc_width=fc_width, channels=channels)
    for key in HEAD_LAYERS:
        for suffix in (".weight", ".bias"):
            src = params[key + suffix]
            if src.shape != model.params[key + suffix].shape:
                raise TransferError(key + suffix, f"unexpected shape {src.shape}")
            model.params[key + suffix] = np.asarray(src, np.float32).copy()
    return model


def classifier_forward(model: ClassifierModel, batch) -> np.ndarray:
    """One probability per item.

    Items are evaluated one at a time so a score never depends on which
    other items share the batch (BLAS picks different kernels by size).
    """
    x = T.as_tensor(batch)
    out = np.empty(len(x), np.float32)
    for i in range(len(x)):
        feats, _ = model.features(x[i : i + 1])
        out[i] = model.head_forward(feats)[0][0]
    return out


# ---------------------------------------------------------------------------
# checkpoint
# ---------------------------------------------------------------------------

MAGIC = b"GFSL"
VERSION = 1
_U32 = struct.Struct("<I")


def encode_checkpoint(params: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, _U32.pack(VERSION), _U32.pack(len(params))]
    for name, value in params.items():
        arr = np.asarray(value)
        if arr.dtype != np.float32:
            raise CheckpointError(f"{name}: only float32 tensors can be saved, got {arr.dtype}")
        raw = name.encode("utf-8")
        parts += [_U32.pack(len(raw)), raw, _U32.pack(arr.ndim)]
        parts += [_U32.pack(d) for d in arr.shape]
        parts.append(arr.astype("<f4").tobytes())
    body = b"".join(parts)
    return body + _U32.pack(zlib.crc32(body) & 0xFFFFFFFF)


class _Reader:
    def __init__(self, data, end):
        self.data, self.pos, self.end = data, 0, end

    def take(self, n, what):
        if self.pos + n > self.end:
            raise TruncatedCheckpointError(f"checkpoint truncated while reading {what}")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def u32(self, what):
        return _U32.unpack(self.take(4, what))[0]


def decode_checkpoint(data: bytes) -> dict[str, np.ndarray]:
    if len(data) >= 4 and data[:4] != MAGIC:
        raise BadMagicError(f"not a GFSL checkpoint (magic {data[:4]!r})")
    if len(data) < 16:
        raise TruncatedCheckpointError(f"checkpoint is only {len(data)} bytes")
    body_end = len(data) - 4
    r = _Reader(data, body_end)
    r.take(4, "magic")
    version = r.u32("version")
    if version != VERSION:
        raise UnsupportedVersionError(f"checkpoint version {version} is not supported (expected {VERSION})")
    count = r.u32("entry count")
    entries = []
    for i in range(count):
        name = r.take(r.u32(f"entry {i} name length"), f"entry {i} name")
        rank = r.u32(f"entry {i} rank")
        dims = tuple(r.u32(f"entry {i} dimensions") for _ in range(rank))
        payload = r.take(4 * math.prod(dims), f"entry {i} payload")
        entries.append((name, dims, payload))
    if r.pos != body_end:
        raise ChecksumError(f"{body_end - r.pos} unexpected bytes before checksum")
    stored = _U32.unpack(data[body_end:])[0]
    if zlib.crc32(data[:body_end]) & 0xFFFFFFFF != stored:
        raise ChecksumError("checkpoint CRC-32 mismatch")
    out = {}
    for name, dims, payload in entries:
        try:
            key = name.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointError(f"entry name is not UTF-8: {exc}") from None
        out[key] = np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(dims)
    return out


def save_checkpoint(parameters: Mapping[str, np.ndarray], path) -> None:
    Path(path).write_bytes(encode_checkpoint(parameters))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    return decode_checkpoint(Path(path).read_bytes())


def parameter_digest(params: Mapping[str, np.ndarray], prefix: str = "") -> int:
    """CRC-32 over the named tensors starting with ``prefix``, in name order."""
    crc = 0
    for name in sorted(params):
        if name.startswith(prefix):
            crc = zlib.crc32(name.encode() + np.asarray(params[name], "<f4").tobytes(), crc)
    return crc
