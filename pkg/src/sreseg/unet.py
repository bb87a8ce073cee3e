"""Two-downsampling U-Net built from explicit forward/backward layers.

The network is an ordered layer graph: an encoder of conv+ReLU blocks with
2x2 max pooling, a decoder that upsamples by symmetric linear interpolation
and concatenates skip connections, and a final classification convolution.
`conv_type` selects symmetric band-parameterized kernels or standard dense
kernels of the same sizes, so the two variants are directly comparable.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .bands import SREConvParams, band_count, build_band_partition
from . import ops

__all__ = [
    "UNetConfig",
    "UNet",
    "build_unet",
    "forward",
    "backward",
    "count_params",
    "count_flops",
    "default_base_channels",
]

# Channel widths calibrated so the default symmetric net and its dense
# counterpart land near 0.12M / 0.48M total parameters with the doubling
# schedule below (see count_params).
_CALIBRATED_BASE_CHANNELS = {"sre": 22, "standard": 15}


def default_base_channels(conv_type: str) -> int:
    return _CALIBRATED_BASE_CHANNELS[conv_type]


@dataclass(frozen=True)
class UNetConfig:
    """Architecture description.

    k_list gives one odd kernel size per resolution level, outermost first;
    its length must be depth + 1. base_channels defaults to a per-conv-type
    calibrated width; channels double at each downsampling.
    """

    k_list: tuple[int, ...] = (9, 7, 5)
    base_channels: int | None = None
    depth: int = 2
    conv_type: str = "sre"
    in_channels: int = 3
    out_classes: int = 2
    final_k: int = 5
    bias: bool = True

    def __post_init__(self):
        object.__setattr__(self, "k_list", tuple(int(k) for k in self.k_list))
        if self.conv_type not in ("sre", "standard"):
            raise ValueError(f"conv_type must be 'sre' or 'standard', got {self.conv_type!r}")
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if len(self.k_list) != self.depth + 1:
            raise ValueError(
                f"k_list must have depth+1={self.depth + 1} entries, got {len(self.k_list)}"
            )
        for k in self.k_list + (self.final_k,):
            if k < 1 or k % 2 == 0:
                raise ValueError(f"kernel sizes must be odd and positive, got {k}")
        if self.in_channels < 1 or self.out_classes < 2:
            raise ValueError("in_channels must be >= 1 and out_classes >= 2")
        if self.base_channels is not None and self.base_channels < 1:
            raise ValueError("base_channels must be positive")

    @property
    def channels(self) -> int:
        if self.base_channels is not None:
            return self.base_channels
        return default_base_channels(self.conv_type)

    def level_channels(self, level: int) -> int:
        return self.channels * (1 << level)

    def to_dict(self) -> dict:
        return {
            "k_list": list(self.k_list),
            "base_channels": self.base_channels,
            "depth": self.depth,
            "conv_type": self.conv_type,
            "in_channels": self.in_channels,
            "out_classes": self.out_classes,
            "final_k": self.final_k,
            "bias": self.bias,
        }

    @staticmethod
    def from_dict(d: dict) -> "UNetConfig":
        return UNetConfig(
            k_list=tuple(d["k_list"]),
            base_channels=d.get("base_channels"),
            depth=d.get("depth", 2),
            conv_type=d.get("conv_type", "sre"),
            in_channels=d.get("in_channels", 3),
            out_classes=d.get("out_classes", 2),
            final_k=d.get("final_k", 5),
            bias=d.get("bias", True),
        )


# ---------------------------------------------------------------------------
# layers


class _StandardConv:
    kind = "conv"

    def __init__(self, c_in, c_out, k, rng, dtype, bias=True):
        self.c_in, self.c_out, self.k = c_in, c_out, k
        scale = 1.0 / np.sqrt(c_in * k * k)
        self.weight = rng.uniform(-scale, scale, size=(c_out, c_in, k, k)).astype(dtype)
        self.bias = np.zeros(c_out, dtype=dtype) if bias else None
        self._x = None
        self.grads: dict[str, np.ndarray] = {}

    def params(self):
        out = {"weight": self.weight}
        if self.bias is not None:
            out["bias"] = self.bias
        return out

    def forward(self, x):
        self._x = x
        return ops.conv2d_fast(x, self.weight, self.bias)

    def backward(self, grad_y):
        grad_x, gw, gb = ops.conv2d_backward(self._x, self.weight, grad_y)
        self.grads = {"weight": gw}
        if self.bias is not None:
            self.grads["bias"] = gb
        self._x = None
        return grad_x

    def flops(self, n, h, w):
        inner = self.c_in * self.k * self.k
        mults = n * self.c_out * inner * h * w
        adds = n * self.c_out * (inner - 1) * h * w
        if self.bias is not None:
            adds += n * self.c_out * h * w
        dense = {"multiplies": mults, "adds": adds}
        return {"dense": dense, "band_pooled": dict(dense)}


class _SREConv:
    kind = "conv"

    def __init__(self, c_in, c_out, k, rng, dtype, bias=True):
        self.c_in, self.c_out, self.k = c_in, c_out, k
        self.part = build_band_partition(k)
        # Draw like a dense kernel value, then shrink by sqrt(band size) so
        # the expanded kernel matches dense initialization statistics.
        scale = 1.0 / np.sqrt(c_in * k * k)
        draw = rng.uniform(-scale, scale, size=(c_out, c_in, self.part.b))
        sizes = np.asarray(self.part.band_sizes, dtype=np.float64)
        self.theta = (draw / np.sqrt(sizes)).astype(dtype)
        self.bias = np.zeros(c_out, dtype=dtype) if bias else None
        self._x = None
        self._pooled = None
        self.grads: dict[str, np.ndarray] = {}

    def params(self):
        out = {"theta": self.theta}
        if self.bias is not None:
            out["bias"] = self.bias
        return out

    def _as_params(self):
        return SREConvParams(self.theta, self.bias)

    def forward(self, x):
        self._x = x
        self._pooled = ops.band_pool(x, self.part)
        return ops.sre_conv_band_pooled(x, self._as_params(), self.part,
                                        pooled=self._pooled)

    def backward(self, grad_y):
        grad_x, gt, gb = ops.sre_conv_backward(
            self._x, self._as_params(), self.part, grad_y, pooled=self._pooled
        )
        self.grads = {"theta": gt}
        if self.bias is not None:
            self.grads["bias"] = gb
        self._x = None
        self._pooled = None
        return grad_x

    def flops(self, n, h, w):
        k2 = self.k * self.k
        dense_inner = self.c_in * k2
        dense = {
            "multiplies": n * self.c_out * dense_inner * h * w,
            "adds": n * self.c_out * (dense_inner - 1) * h * w,
        }
        mix_inner = self.c_in * self.part.b
        band = {
            "multiplies": n * self.c_out * mix_inner * h * w,
            "adds": n * (self.c_in * k2 + self.c_out * (mix_inner - 1)) * h * w,
        }
        if self.bias is not None:
            dense["adds"] += n * self.c_out * h * w
            band["adds"] += n * self.c_out * h * w
        return {"dense": dense, "band_pooled": band}


class _ReLU:
    kind = "relu"

    def __init__(self):
        self._x = None
        self.grads = {}

    def params(self):
        return {}

    def forward(self, x):
        self._x = x
        return ops.relu(x)

    def backward(self, grad_y):
        grad_x = ops.relu_backward(self._x, grad_y)
        self._x = None
        return grad_x

    def flops(self, n, h, w):
        return {"dense": {"multiplies": 0, "adds": 0},
                "band_pooled": {"multiplies": 0, "adds": 0}}


class _MaxPool:
    kind = "pool"

    def __init__(self):
        self._idx = None
        self.grads = {}

    def params(self):
        return {}

    def forward(self, x):
        y, self._idx = ops.maxpool2(x)
        return y

    def backward(self, grad_y):
        grad_x = ops.maxpool2_backward(self._idx, grad_y)
        self._idx = None
        return grad_x

    def flops(self, n, h, w):
        return {"dense": {"multiplies": 0, "adds": 0},
                "band_pooled": {"multiplies": 0, "adds": 0}}


class _Upsample:
    kind = "upsample"

    def __init__(self):
        self.grads = {}

    def params(self):
        return {}

    def forward(self, x):
        return ops.upsample2_linear(x)

    def backward(self, grad_y):
        return ops.upsample2_linear_backward(grad_y)

    def flops(self, n, h, w):
        counts = {"multiplies": n * 12 * h * w, "adds": n * 6 * h * w}
        return {"dense": dict(counts), "band_pooled": dict(counts)}


# ---------------------------------------------------------------------------
# the network graph


@dataclass
class _Stage:
    """One named stage of the graph with its layer list."""

    name: str
    layers: list = field(default_factory=list)


class UNet:
    """Explicit-layer U-Net with a parameter registry and cached activations.

    forward() records the execution order; backward() replays it in exact
    reverse, producing one gradient per registered parameter.
    """

    def __init__(self, cfg: UNetConfig, seed: int = 0, dtype=np.float32):
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        rng = np.random.Generator(np.random.Philox(seed))
        conv_cls = _SREConv if cfg.conv_type == "sre" else _StandardConv
        d = cfg.depth

        def block(c_in, c_out, k):
            return [conv_cls(c_in, c_out, k, rng, self.dtype, cfg.bias), _ReLU(),
                    conv_cls(c_out, c_out, k, rng, self.dtype, cfg.bias), _ReLU()]

        self.enc: list[_Stage] = []
        c_prev = cfg.in_channels
        for level in range(d + 1):
            c = cfg.level_channels(level)
            self.enc.append(_Stage(f"enc{level}", block(c_prev, c, cfg.k_list[level])))
            c_prev = c
        self.pools = [_MaxPool() for _ in range(d)]

        self.dec: list[_Stage] = []
        self.ups = []
        for level in range(d - 1, -1, -1):
            c_skip = cfg.level_channels(level)
            c_up = cfg.level_channels(level + 1)
            self.ups.append(_Upsample())
            self.dec.append(
                _Stage(f"dec{level}", block(c_up + c_skip, c_skip, cfg.k_list[level]))
            )
        self.final = conv_cls(cfg.channels, cfg.out_classes, cfg.final_k,
                              rng, self.dtype, cfg.bias)
        self._grad_input: np.ndarray | None = None

    # -- registry ----------------------------------------------------------

    def _named_layers(self):
        for stage in self.enc:
            for i, layer in enumerate(stage.layers):
                yield f"{stage.name}.l{i}", layer
        for i, pool in enumerate(self.pools):
            yield f"pool{i}", pool
        for i, (up, stage) in enumerate(zip(self.ups, self.dec)):
            yield f"up{i}", up
            for j, layer in enumerate(stage.layers):
                yield f"{stage.name}.l{j}", layer
        yield "final", self.final

    def parameters(self) -> dict[str, np.ndarray]:
        """Registry mapping 'layerpath.param' to the live parameter array."""
        out = {}
        for name, layer in self._named_layers():
            for pname, arr in layer.params().items():
                out[f"{name}.{pname}"] = arr
        return out

    def gradients(self) -> dict[str, np.ndarray]:
        out = {}
        for name, layer in self._named_layers():
            for pname, arr in layer.grads.items():
                out[f"{name}.{pname}"] = arr
        return out

    def set_parameters(self, values: dict[str, np.ndarray]) -> None:
        current = self.parameters()
        if set(values) != set(current):
            missing = set(current) - set(values)
            extra = set(values) - set(current)
            raise ValueError(f"parameter name mismatch: missing={sorted(missing)} "
                             f"extra={sorted(extra)}")
        for name, arr in values.items():
            dst = current[name]
            arr = np.asarray(arr)
            if arr.shape != dst.shape:
                raise ValueError(f"shape mismatch for {name}: {arr.shape} vs {dst.shape}")
            dst[...] = arr

    def cast(self, dtype) -> "UNet":
        """Copy of the network with parameters cast to another float dtype."""
        other = UNet(self.cfg, seed=0, dtype=dtype)
        for name, arr in self.parameters().items():
            other.parameters()[name][...] = arr.astype(dtype)
        return other

    # -- execution ----------------------------------------------------------

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=self.dtype)
        if x.ndim != 4:
            raise ValueError(f"input must be [N, C, H, W], got shape {x.shape}")
        n, c, h, w = x.shape
        if c != self.cfg.in_channels:
            raise ValueError(f"expected {self.cfg.in_channels} input channels, got {c}")
        factor = 1 << self.cfg.depth
        if h % factor or w % factor:
            raise ValueError(
                f"spatial dims must be divisible by {factor}, got {h}x{w}"
            )

        skips = []
        for level, stage in enumerate(self.enc):
            for layer in stage.layers:
                x = layer.forward(x)
            if level < self.cfg.depth:
                skips.append(x)
                x = self.pools[level].forward(x)
        for i, (up, stage) in enumerate(zip(self.ups, self.dec)):
            x = up.forward(x)
            skip = skips[self.cfg.depth - 1 - i]
            x = np.concatenate([x, skip], axis=1)
            for layer in stage.layers:
                x = layer.forward(x)
        return self.final.forward(x)

    def backward(self, grad_logits: np.ndarray) -> dict[str, np.ndarray]:
        """Run the reverse pass; returns the gradient registry."""
        g = self.final.backward(np.asarray(grad_logits))
        skip_grads: dict[int, np.ndarray] = {}
        for i in range(len(self.dec) - 1, -1, -1):
            stage = self.dec[i]
            for layer in reversed(stage.layers):
                g = layer.backward(g)
            level = self.cfg.depth - 1 - i
            c_up = self.cfg.level_channels(level + 1)
            g_up, g_skip = g[:, :c_up], g[:, c_up:]
            skip_grads[level] = g_skip
            g = self.ups[i].backward(np.ascontiguousarray(g_up))
        for layer in reversed(self.enc[self.cfg.depth].layers):
            g = layer.backward(g)
        for level in range(self.cfg.depth - 1, -1, -1):
            g = self.pools[level].backward(g)
            g = g + skip_grads[level]
            for layer in reversed(self.enc[level].layers):
                g = layer.backward(g)
        self._grad_input = g
        return self.gradients()

    # -- accounting ----------------------------------------------------------

    def param_report(self) -> list[tuple[str, int]]:
        return [(name, arr.size) for name, arr in self.parameters().items()]

    def count_params(self) -> int:
        return sum(arr.size for arr in self.parameters().values())

    def count_flops(self, input_hw: tuple[int, int], batch: int = 1) -> dict:
        """Analytic multiply/add counts per layer for one forward pass.

        Reports both execution plans: dense convolution and the band-pooled
        plan (identical for standard layers, which have no band structure).
        """
        h, w = input_hw
        factor = 1 << self.cfg.depth
        if h % factor or w % factor:
            raise ValueError(f"spatial dims must be divisible by {factor}, got {h}x{w}")
        rows = []
        totals = {"dense": {"multiplies": 0, "adds": 0},
                  "band_pooled": {"multiplies": 0, "adds": 0}}

        def visit(name, layer, hh, ww):
            counts = layer.flops(batch, hh, ww)
            rows.append({"layer": name, "h": hh, "w": ww, **{
                plan: dict(c) for plan, c in counts.items()}})
            for plan in totals:
                for key in ("multiplies", "adds"):
                    totals[plan][key] += counts[plan][key]

        hh, ww = h, w
        for level, stage in enumerate(self.enc):
            for i, layer in enumerate(stage.layers):
                visit(f"{stage.name}.l{i}", layer, hh, ww)
            if level < self.cfg.depth:
                visit(f"pool{level}", self.pools[level], hh, ww)
                hh, ww = hh // 2, ww // 2
        for i, (up, stage) in enumerate(zip(self.ups, self.dec)):
            visit(f"up{i}", up, hh, ww)
            hh, ww = hh * 2, ww * 2
            for j, layer in enumerate(stage.layers):
                visit(f"{stage.name}.l{j}", layer, hh, ww)
        visit("final", self.final, hh, ww)
        return {"layers": rows, "totals": totals}


# ---------------------------------------------------------------------------
# functional aliases matching the operation surface


def build_unet(cfg: UNetConfig, seed: int = 0, dtype=np.float32) -> UNet:
    return UNet(cfg, seed=seed, dtype=dtype)


def forward(net: UNet, x: np.ndarray) -> np.ndarray:
    return net.forward(x)


def backward(net: UNet, grad_logits: np.ndarray) -> dict[str, np.ndarray]:
    return net.backward(grad_logits)


def count_params(net: UNet) -> int:
    return net.count_params()


def count_flops(net: UNet, input_hw: tuple[int, int], batch: int = 1) -> dict:
    return net.count_flops(input_hw, batch=batch)
