"""Small encoder-decoder segmentation network with skip connections.

Layout for ``depth = d`` and ``base_channels = c`` (``c_l = c * 2**l``)::

    enc_0          conv3x3(1 -> c_0) + relu                at H x W
    enc_l, l=1..d  maxpool, conv3x3(c_{l-1} -> c_l) + relu at H/2**l
    dec_l, l=d-1..0  upsample(prev), concat(skip enc_l),
                   conv3x3(c_{l+1} + c_l -> c_l) + relu
    head           affine(c_0 -> 2), channel softmax

Parameter count::

    9*c_0 + c_0
    + sum_{l=1..d} (9*c_{l-1}*c_l + c_l)
    + sum_{l=0..d-1} (9*(c_{l+1} + c_l)*c_l + c_l)
    + 2*c_0 + 2

which is 14570 for the default ``depth=2, base_channels=8``.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

CHECKPOINT_MAGIC = b"WSEGNET1"


@dataclass(frozen=True)
class NetworkConfig:
    depth: int = 2
    base_channels: int = 8
    height: int = 64
    width: int = 64
    classes: int = 2

    def validate(self) -> None:
        if self.classes != 2:
            raise ValueError("only two-class segmentation is supported")
        if self.depth < 0 or self.base_channels < 1:
            raise ValueError("depth must be >= 0 and base_channels >= 1")
        step = 2**self.depth
        if self.height % step or self.width % step:
            raise ValueError(
                f"input size {self.height}x{self.width} not divisible by 2**depth={step}"
            )

    def channels(self, level: int) -> int:
        return self.base_channels * 2**level


def parameter_count(config: NetworkConfig) -> int:
    c = config.channels
    d = config.depth
    total = 9 * c(0) + c(0)
    total += sum(9 * c(l - 1) * c(l) + c(l) for l in range(1, d + 1))
    total += sum(9 * (c(l + 1) + c(l)) * c(l) + c(l) for l in range(d))
    return total + 2 * c(0) + 2


class Parameters:
    """Ordered collection of named weight tensors.

    Registration order is the order used for checkpoints and the optimizer.
    """

    def __init__(self, config: NetworkConfig, seed: int | None = None):
        self.config = config
        self.seed = seed
        self.names: list[str] = []
        self.tensors: list[Tensor] = []

    def register(self, name: str, value: np.ndarray) -> Tensor:
        if name in self.names:
            raise ValueError(f"parameter {name!r} registered twice")
        t = Tensor(value, requires_grad=True, name=name)
        self.names.append(name)
        self.tensors.append(t)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[self.names.index(name)]

    def __iter__(self):
        return iter(self.tensors)

    def __len__(self):
        return len(self.tensors)

    def items(self):
        return zip(self.names, self.tensors)

    def size(self) -> int:
        return sum(t.data.size for t in self.tensors)

    def flat(self) -> np.ndarray:
        return np.concatenate([t.data.ravel() for t in self.tensors])

    def copy(self) -> "Parameters":
        out = Parameters(self.config, self.seed)
        for name, t in self.items():
            out.register(name, t.data.copy())
        return out

    def load_flat(self, values: np.ndarray) -> None:
        values = np.asarray(values, dtype=np.float64)
        if values.size != self.size():
            raise ValueError(f"expected {self.size()} values, got {values.size}")
        offset = 0
        for t in self.tensors:
            n = t.data.size
            t.data = values[offset : offset + n].reshape(t.data.shape).copy()
            offset += n


def _layer_shapes(config: NetworkConfig) -> list[tuple[str, tuple[int, ...]]]:
    c = config.channels
    d = config.depth
    shapes: list[tuple[str, tuple[int, ...]]] = [
        ("enc0.weight", (3, 3, 1, c(0))),
        ("enc0.bias", (c(0),)),
    ]
    for l in range(1, d + 1):
        shapes += [(f"enc{l}.weight", (3, 3, c(l - 1), c(l))), (f"enc{l}.bias", (c(l),))]
    for l in range(d - 1, -1, -1):
        shapes += [
            (f"dec{l}.weight", (3, 3, c(l + 1) + c(l), c(l))),
            (f"dec{l}.bias", (c(l),)),
        ]
    shapes += [("head.weight", (c(0), 2)), ("head.bias", (2,))]
    return shapes


def init(config: NetworkConfig, seed: int = 0) -> Parameters:
    """He-initialized parameters; biases start at zero."""
    config.validate()
    rng = np.random.default_rng(seed)
    params = Parameters(config, seed)
    for name, shape in _layer_shapes(config):
        if name.endswith(".bias"):
            params.register(name, np.zeros(shape))
        else:
            fan_in = int(np.prod(shape[:-1]))
            params.register(name, rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape))
    return params


def zeros(config: NetworkConfig) -> Parameters:
    config.validate()
    params = Parameters(config)
    for name, shape in _layer_shapes(config):
        params.register(name, np.zeros(shape))
    return params


class Prediction:
    """Per-pixel two-class softmax output.

    ``probs`` and ``log_probs`` have shape ``[2, H, W]`` for a single image or
    ``[N, 2, H, W]`` for a batch; channel 1 is the foreground probability.
    """

    __slots__ = ("probs", "log_probs")

    def __init__(self, probs: Tensor, log_probs: Tensor | None = None):
        self.probs = probs
        self.log_probs = log_probs

    @classmethod
    def from_probabilities(cls, fg, requires_grad: bool = False) -> "Prediction":
        """Build a prediction directly from a foreground-probability map."""
        fg = np.asarray(fg, dtype=np.float64)
        probs = Tensor(np.stack([1.0 - fg, fg], axis=-3), requires_grad=requires_grad)
        return cls(probs)

    @classmethod
    def from_logits(cls, logits: Tensor) -> "Prediction":
        """From channels-last scores ``[N, H, W, 2]``."""
        order = (0, 3, 1, 2)
        return cls(
            ad.transpose(ad.softmax(logits, axis=-1), order),
            ad.transpose(ad.log_softmax(logits, axis=-1), order),
        )

    @property
    def batched(self) -> bool:
        return self.probs.ndim == 4

    @property
    def foreground(self) -> np.ndarray:
        return self.probs.data[..., 1, :, :]

    def log(self) -> Tensor:
        if self.log_probs is None:
            self.log_probs = ad.log(self.probs)
        return self.log_probs


def _block(x: Tensor, params: Parameters, name: str) -> Tensor:
    return ad.relu(ad.conv2d(x, params[f"{name}.weight"], params[f"{name}.bias"]))


def logits(params: Parameters, images: Tensor) -> Tensor:
    """Raw two-channel scores ``[N, H, W, 2]`` for a batch ``[N, 1, H, W]``."""
    cfg = params.config
    expected = (1, cfg.height, cfg.width)
    if images.ndim != 4 or images.shape[1:] != expected:
        raise ad.ShapeError(f"forward: expected images [N, 1, {cfg.height}, {cfg.width}], got {images.shape}")
    x = ad.reshape(images, (images.shape[0], cfg.height, cfg.width, 1))
    skips = [_block(x, params, "enc0")]
    for l in range(1, cfg.depth + 1):
        skips.append(_block(ad.max_pool2x2(skips[-1]), params, f"enc{l}"))
    x = skips[-1]
    for l in range(cfg.depth - 1, -1, -1):
        x = ad.concat([ad.upsample2x(x), skips[l]], axis=-1)
        x = _block(x, params, f"dec{l}")
    return ad.affine(x, params["head.weight"], params["head.bias"])


def forward_batch(params: Parameters, images) -> Prediction:
    images = ad.as_tensor(images)
    return Prediction.from_logits(logits(params, images))


def forward(params: Parameters, image) -> Prediction:
    """Prediction for a single image of shape ``[1, H, W]``."""
    image = ad.as_tensor(image)
    if image.ndim != 3:
        raise ad.ShapeError(f"forward: expected image [1, H, W], got {image.shape}")
    out = forward_batch(params, ad.reshape(image, (1,) + image.shape))
    n, c, h, w = out.probs.shape
    return Prediction(ad.reshape(out.probs, (c, h, w)), ad.reshape(out.log_probs, (c, h, w)))


def save_checkpoint(params: Parameters, path: str | Path) -> None:
    """Write magic, a length-prefixed JSON header and raw little-endian float64 values."""
    header = json.dumps(
        {
            "config": asdict(params.config),
            "seed": params.seed,
            "names": params.names,
            "shapes": [list(t.shape) for t in params.tensors],
        }
    ).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(params.flat().astype("<f8").tobytes())


def load_checkpoint(path: str | Path) -> Parameters:
    raw = Path(path).read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    (hlen,) = struct.unpack("<I", raw[8:12])
    header = json.loads(raw[12 : 12 + hlen])
    params = Parameters(NetworkConfig(**header["config"]), header["seed"])
    values = np.frombuffer(raw[12 + hlen :], dtype="<f8")
    offset = 0
    for name, shape in zip(header["names"], header["shapes"]):
        n = int(np.prod(shape))
        params.register(name, values[offset : offset + n].reshape(shape).astype(np.float64))
        offset += n
    if offset != values.size:
        raise ValueError(f"{path}: trailing data in checkpoint")
    return params
