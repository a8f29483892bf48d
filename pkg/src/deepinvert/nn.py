"""CNN layers, small 32x32-scale architectures, and checkpoint serialization.

Models are flat ordered lists of layers (residual blocks are one composite
layer). Batch-norm layers expose "taps": per-channel mean/variance of their
*input* feature map, computed over batch and spatial dims as graph tensors,
so synthesis losses can differentiate through them back to the pixels.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor


class ForwardContext:
    def __init__(self, mode: str = "eval", want_taps: bool = False):
        if mode not in ("train", "eval"):
            raise ValueError(f"unknown forward mode {mode!r}")
        self.mode = mode
        self.want_taps = want_taps
        self.tap_means: list[Tensor] = []
        self.tap_vars: list[Tensor] = []


@dataclass
class FeatureStats:
    """Per tapped layer: per-channel mean and (biased) variance tensors."""
    means: list
    vars: list

    def __len__(self):
        return len(self.means)


class Layer:
    name: str = ""

    def forward(self, x: Tensor, ctx: ForwardContext) -> Tensor:
        raise NotImplementedError

    def parameters(self) -> list[Tensor]:
        return []

    def state(self) -> dict[str, np.ndarray]:
        return {}

    def load_state(self, st: dict[str, np.ndarray]) -> None:
        pass

    def spec(self) -> dict:
        raise NotImplementedError


class Conv2d(Layer):
    def __init__(self, in_ch: int, out_ch: int, k: int = 3, stride: int = 1,
                 padding: int = 1, bias: bool = True, rng: np.random.Generator | None = None):
        self.in_ch, self.out_ch, self.k, self.stride, self.padding = in_ch, out_ch, k, stride, padding
        rng = rng or np.random.default_rng()
        std = np.sqrt(2.0 / (in_ch * k * k))
        self.weight = Tensor(rng.normal(0.0, std, (out_ch, in_ch, k, k)), requires_grad=True)
        self.bias = Tensor(np.zeros(out_ch), requires_grad=True) if bias else None
        self.gate: Tensor | None = None  # per-filter multiplier used during pruning
        self.last_fmap: int = 0          # input spatial size seen on the last forward

    def forward(self, x, ctx):
        self.last_fmap = x.data.shape[2]
        out = T.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)
        if self.gate is not None:
            out = out * self.gate.reshape((1, -1, 1, 1))
        return out

    def parameters(self):
        return [self.weight] + ([self.bias] if self.bias is not None else [])

    def state(self):
        st = {"weight": self.weight.data}
        if self.bias is not None:
            st["bias"] = self.bias.data
        return st

    def load_state(self, st):
        self.weight.data = st["weight"].astype(self.weight.data.dtype)
        if self.bias is not None:
            self.bias.data = st["bias"].astype(self.bias.data.dtype)

    def spec(self):
        return {"kind": "conv", "in": self.in_ch, "out": self.out_ch, "k": self.k,
                "stride": self.stride, "pad": self.padding, "bias": self.bias is not None}


class BatchNorm(Layer):
    """Batch normalization over (N,) or (N, H, W) per channel.

    Running variance is the EMA of the *unbiased* batch variance; train-mode
    normalization uses the biased one, matching the usual framework convention.
    """

    def __init__(self, ch: int, momentum: float = 0.1, eps: float = 1e-5):
        self.ch = ch
        self.momentum = momentum
        self.eps = eps
        self.gamma = Tensor(np.ones(ch), requires_grad=True)
        self.beta = Tensor(np.zeros(ch), requires_grad=True)
        self.running_mean = np.zeros(ch, dtype=np.float64)
        self.running_var = np.ones(ch, dtype=np.float64)
        self.frozen = False  # when set, EMA updates are skipped even in train mode
        self.gate: Tensor | None = None  # per-channel multiplier used during pruning

    def _axes_and_shape(self, x: Tensor):
        if x.data.ndim == 4:
            return (0, 2, 3), (1, self.ch, 1, 1)
        if x.data.ndim == 2:
            return (0,), (1, self.ch)
        raise ValueError(f"batch-norm expects 2-d or 4-d input, got shape {x.shape}")

    def forward(self, x, ctx):
        axes, pshape = self._axes_and_shape(x)
        if x.data.shape[1] != self.ch:
            raise ValueError(f"batch-norm channel mismatch: input has {x.data.shape[1]}, layer has {self.ch}")
        batch_mean = batch_var = None
        if ctx.mode == "train" or ctx.want_taps:
            batch_mean = x.mean(axis=axes)
            centered = x - batch_mean.reshape(pshape)
            batch_var = (centered * centered).mean(axis=axes)
            if ctx.want_taps:
                ctx.tap_means.append(batch_mean)
                ctx.tap_vars.append(batch_var)

        dt = x.data.dtype
        if ctx.mode == "train":
            n = x.data.size // self.ch
            if not self.frozen:
                unbiased = batch_var.data * (n / max(n - 1, 1))
                self.running_mean = (1 - self.momentum) * self.running_mean + self.momentum * batch_mean.data.astype(np.float64)
                self.running_var = (1 - self.momentum) * self.running_var + self.momentum * unbiased.astype(np.float64)
            inv = (batch_var + Tensor(np.asarray(self.eps, dtype=dt))) ** -0.5
            xhat = (x - batch_mean.reshape(pshape)) * inv.reshape(pshape)
        else:
            mean = self.running_mean.astype(dt)
            inv = (1.0 / np.sqrt(self.running_var + self.eps)).astype(dt)
            xhat = (x - Tensor(mean.reshape(pshape))) * Tensor(inv.reshape(pshape))
        out = xhat * self.gamma.reshape(pshape) + self.beta.reshape(pshape)
        if self.gate is not None:
            out = out * self.gate.reshape(pshape)
        return out

    def parameters(self):
        return [self.gamma, self.beta]

    def state(self):
        return {"gamma": self.gamma.data, "beta": self.beta.data,
                "running_mean": self.running_mean, "running_var": self.running_var}

    def load_state(self, st):
        self.gamma.data = st["gamma"].astype(self.gamma.data.dtype)
        self.beta.data = st["beta"].astype(self.beta.data.dtype)
        self.running_mean = st["running_mean"].astype(np.float64)
        self.running_var = st["running_var"].astype(np.float64)

    def spec(self):
        return {"kind": "bn", "ch": self.ch}


class ReLU(Layer):
    def forward(self, x, ctx):
        return T.relu(x)

    def spec(self):
        return {"kind": "relu"}


class MaxPool(Layer):
    def __init__(self, k: int = 2):
        self.k = k

    def forward(self, x, ctx):
        return T.maxpool2d(x, self.k)

    def spec(self):
        return {"kind": "maxpool", "k": self.k}


class GlobalAvgPool(Layer):
    def forward(self, x, ctx):
        return x.mean(axis=(2, 3))

    def spec(self):
        return {"kind": "gap"}


class Flatten(Layer):
    def forward(self, x, ctx):
        return x.reshape((x.data.shape[0], -1))

    def spec(self):
        return {"kind": "flatten"}


class Linear(Layer):
    def __init__(self, in_f: int, out_f: int, rng: np.random.Generator | None = None):
        self.in_f, self.out_f = in_f, out_f
        rng = rng or np.random.default_rng()
        std = np.sqrt(2.0 / in_f)
        self.weight = Tensor(rng.normal(0.0, std, (out_f, in_f)), requires_grad=True)
        self.bias = Tensor(np.zeros(out_f), requires_grad=True)

    def forward(self, x, ctx):
        if x.data.shape[1] != self.in_f:
            raise ValueError(f"linear expects {self.in_f} features, got {x.data.shape[1]}")
        return x @ self.weight.T + self.bias

    def parameters(self):
        return [self.weight, self.bias]

    def state(self):
        return {"weight": self.weight.data, "bias": self.bias.data}

    def load_state(self, st):
        self.weight.data = st["weight"].astype(self.weight.data.dtype)
        self.bias.data = st["bias"].astype(self.bias.data.dtype)

    def spec(self):
        return {"kind": "linear", "in": self.in_f, "out": self.out_f}


class ResidualBlock(Layer):
    """conv-bn-relu-conv-bn plus identity (or 1x1-conv-bn downsample) shortcut."""

    def __init__(self, in_ch: int, out_ch: int, stride: int = 1,
                 rng: np.random.Generator | None = None):
        self.in_ch, self.out_ch, self.stride = in_ch, out_ch, stride
        self.conv1 = Conv2d(in_ch, out_ch, 3, stride, 1, rng=rng)
        self.bn1 = BatchNorm(out_ch)
        self.conv2 = Conv2d(out_ch, out_ch, 3, 1, 1, rng=rng)
        self.bn2 = BatchNorm(out_ch)
        if stride != 1 or in_ch != out_ch:
            self.short_conv = Conv2d(in_ch, out_ch, 1, stride, 0, rng=rng)
            self.short_bn = BatchNorm(out_ch)
        else:
            self.short_conv = None
            self.short_bn = None

    def sublayers(self):
        subs = [("conv1", self.conv1), ("bn1", self.bn1), ("conv2", self.conv2), ("bn2", self.bn2)]
        if self.short_conv is not None:
            subs += [("short_conv", self.short_conv), ("short_bn", self.short_bn)]
        return subs

    def forward(self, x, ctx):
        h = T.relu(self.bn1.forward(self.conv1.forward(x, ctx), ctx))
        h = self.bn2.forward(self.conv2.forward(h, ctx), ctx)
        if self.short_conv is not None:
            sc = self.short_bn.forward(self.short_conv.forward(x, ctx), ctx)
        else:
            sc = x
        return T.relu(h + sc)

    def parameters(self):
        ps = []
        for _, sub in self.sublayers():
            ps.extend(sub.parameters())
        return ps

    def state(self):
        st = {}
        for sn, sub in self.sublayers():
            for k, v in sub.state().items():
                st[f"{sn}.{k}"] = v
        return st

    def load_state(self, st):
        for sn, sub in self.sublayers():
            sub.load_state({k[len(sn) + 1:]: v for k, v in st.items() if k.startswith(sn + ".")})

    def spec(self):
        return {"kind": "resblock", "in": self.in_ch, "out": self.out_ch, "stride": self.stride}

    def bn_sublayers(self):
        bns = [self.bn1, self.bn2]
        if self.short_bn is not None:
            bns.append(self.short_bn)
        return bns


_LAYER_KINDS = {}


def _layer_from_spec(sp: dict, rng: np.random.Generator) -> Layer:
    kind = sp["kind"]
    if kind == "conv":
        return Conv2d(sp["in"], sp["out"], sp["k"], sp["stride"], sp["pad"], sp.get("bias", True), rng=rng)
    if kind == "bn":
        return BatchNorm(sp["ch"])
    if kind == "relu":
        return ReLU()
    if kind == "maxpool":
        return MaxPool(sp["k"])
    if kind == "gap":
        return GlobalAvgPool()
    if kind == "flatten":
        return Flatten()
    if kind == "linear":
        return Linear(sp["in"], sp["out"], rng=rng)
    if kind == "resblock":
        return ResidualBlock(sp["in"], sp["out"], sp["stride"], rng=rng)
    raise ValueError(f"unknown layer kind {kind!r}")


class Model:
    def __init__(self, layers: list[Layer], in_shape: tuple, class_count: int,
                 arch_name: str = "custom"):
        self.layers = layers
        self.in_shape = tuple(in_shape)
        self.class_count = class_count
        self.arch_name = arch_name
        for i, layer in enumerate(self.layers):
            layer.name = f"layer{i}"

    # -- forward -------------------------------------------------------------

    def forward(self, x, mode: str = "eval", want_taps: bool = False):
        """Run the network; returns (logits, FeatureStats or None).

        Spatial dims may differ from in_shape (multi-resolution synthesis);
        the channel count must match.
        """
        if not isinstance(x, Tensor):
            x = Tensor(x)
        if x.data.ndim != 4 and any(isinstance(l, Conv2d) for l in self.layers):
            raise ValueError(f"model expects NCHW input, got shape {x.shape}")
        if x.data.ndim == 4 and x.data.shape[1] != self.in_shape[0]:
            raise ValueError(f"model expects {self.in_shape[0]} input channels, got {x.data.shape[1]}")
        ctx = ForwardContext(mode, want_taps)
        h = x
        for layer in self.layers:
            h = layer.forward(h, ctx)
        taps = FeatureStats(ctx.tap_means, ctx.tap_vars) if want_taps else None
        return h, taps

    def logits(self, x, mode: str = "eval"):
        return self.forward(x, mode)[0]

    # -- parameters and state --------------------------------------------------

    def parameters(self) -> list[Tensor]:
        ps = []
        for layer in self.layers:
            ps.extend(layer.parameters())
        return ps

    def requires_grad_(self, flag: bool) -> "Model":
        for p in self.parameters():
            p.requires_grad = flag
        return self

    def bn_layers(self) -> list[BatchNorm]:
        bns = []
        for layer in self.layers:
            if isinstance(layer, BatchNorm):
                bns.append(layer)
            elif isinstance(layer, ResidualBlock):
                bns.extend(layer.bn_sublayers())
        return bns

    def bn_running_stats(self) -> list[tuple[np.ndarray, np.ndarray]]:
        return [(bn.running_mean.copy(), bn.running_var.copy()) for bn in self.bn_layers()]

    def state_dict(self) -> dict[str, np.ndarray]:
        st = {}
        for layer in self.layers:
            for k, v in layer.state().items():
                st[f"{layer.name}.{k}"] = v
        return st

    def load_state_dict(self, st: dict[str, np.ndarray]) -> None:
        for layer in self.layers:
            prefix = layer.name + "."
            layer.load_state({k[len(prefix):]: v for k, v in st.items() if k.startswith(prefix)})

    def layer_specs(self) -> list[dict]:
        return [layer.spec() for layer in self.layers]

    def descriptor(self) -> dict:
        return {"arch": self.arch_name, "in_shape": list(self.in_shape),
                "classes": self.class_count, "layers": self.layer_specs()}

    def clone(self) -> "Model":
        m = model_from_descriptor(self.descriptor(), rng=np.random.default_rng(0))
        m.load_state_dict({k: v.copy() for k, v in self.state_dict().items()})
        return m


def model_from_descriptor(desc: dict, rng: np.random.Generator | None = None) -> Model:
    rng = rng or np.random.default_rng()
    layers = [_layer_from_spec(sp, rng) for sp in desc["layers"]]
    return Model(layers, tuple(desc["in_shape"]), desc["classes"], desc.get("arch", "custom"))


# -- architectures --------------------------------------------------------------


def build_model(arch: str, classes: int = 10, in_shape=(3, 32, 32), width: int = 16,
                depth: int = 2, seed: int | None = None,
                rng: np.random.Generator | None = None) -> Model:
    """Randomly initialized model: 'vgg_small', 'resnet_small', or 'mlp_bn'."""
    if rng is None:
        rng = np.random.default_rng(seed)
    c = in_shape[0]
    if arch == "vgg_small":
        w = width
        specs = [
            {"kind": "conv", "in": c, "out": w, "k": 3, "stride": 1, "pad": 1, "bias": True},
            {"kind": "bn", "ch": w}, {"kind": "relu"},
            {"kind": "conv", "in": w, "out": w, "k": 3, "stride": 1, "pad": 1, "bias": True},
            {"kind": "bn", "ch": w}, {"kind": "relu"}, {"kind": "maxpool", "k": 2},
            {"kind": "conv", "in": w, "out": 2 * w, "k": 3, "stride": 1, "pad": 1, "bias": True},
            {"kind": "bn", "ch": 2 * w}, {"kind": "relu"}, {"kind": "maxpool", "k": 2},
            {"kind": "conv", "in": 2 * w, "out": 4 * w, "k": 3, "stride": 1, "pad": 1, "bias": True},
            {"kind": "bn", "ch": 4 * w}, {"kind": "relu"}, {"kind": "maxpool", "k": 2},
            {"kind": "gap"},
            {"kind": "linear", "in": 4 * w, "out": classes},
        ]
    elif arch == "resnet_small":
        w = width
        specs = [
            {"kind": "conv", "in": c, "out": w, "k": 3, "stride": 1, "pad": 1, "bias": True},
            {"kind": "bn", "ch": w}, {"kind": "relu"},
            {"kind": "resblock", "in": w, "out": w, "stride": 1},
            {"kind": "resblock", "in": w, "out": 2 * w, "stride": 2},
            {"kind": "gap"},
            {"kind": "linear", "in": 2 * w, "out": classes},
        ]
    elif arch == "mlp_bn":
        in_f = int(np.prod(in_shape))
        specs = [{"kind": "flatten"}]
        prev = in_f
        for _ in range(depth):
            specs += [{"kind": "linear", "in": prev, "out": width},
                      {"kind": "bn", "ch": width}, {"kind": "relu"}]
            prev = width
        specs.append({"kind": "linear", "in": prev, "out": classes})
    else:
        raise ValueError(f"unknown architecture {arch!r}")
    desc = {"arch": arch, "in_shape": list(in_shape), "classes": classes, "layers": specs}
    return model_from_descriptor(desc, rng=rng)


# -- checkpoint serialization ----------------------------------------------------

MAGIC = b"DINV"
VERSION = 1
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


def save_checkpoint(model: Model, path: str, metadata: dict | None = None) -> None:
    """Little-endian binary: header, arch + metadata JSON, tensor table, blobs."""
    st = model.state_dict()
    arch = json.dumps(model.descriptor()).encode()
    meta = json.dumps(metadata or {}).encode()
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    buf.write(struct.pack("<I", len(arch)))
    buf.write(arch)
    buf.write(struct.pack("<I", len(meta)))
    buf.write(meta)
    buf.write(struct.pack("<I", len(st)))
    blobs = io.BytesIO()
    for name, arr in st.items():
        arr = np.ascontiguousarray(arr)
        if arr.dtype not in _DTYPE_CODES:
            arr = arr.astype(np.float64)
        nb = name.encode()
        buf.write(struct.pack("<H", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<BB", _DTYPE_CODES[arr.dtype], arr.ndim))
        for d in arr.shape:
            buf.write(struct.pack("<I", d))
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        buf.write(struct.pack("<QQ", blobs.tell(), le.nbytes))
        blobs.write(le.tobytes())
    with open(path, "wb") as f:
        f.write(buf.getvalue())
        f.write(blobs.getvalue())


class CheckpointError(ValueError):
    pass


def _read(f, n: int, what: str) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise CheckpointError(f"truncated checkpoint: wanted {n} bytes for {what} at offset {f.tell() - len(data)}")
    return data


def load_checkpoint(path: str, rng: np.random.Generator | None = None) -> tuple[Model, dict]:
    with open(path, "rb") as f:
        magic = _read(f, 4, "magic")
        if magic != MAGIC:
            raise CheckpointError(f"bad magic {magic!r} at offset 0, expected {MAGIC!r}")
        (version,) = struct.unpack("<I", _read(f, 4, "version"))
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}, expected {VERSION}")
        (alen,) = struct.unpack("<I", _read(f, 4, "arch length"))
        desc = json.loads(_read(f, alen, "arch descriptor"))
        (mlen,) = struct.unpack("<I", _read(f, 4, "metadata length"))
        meta = json.loads(_read(f, mlen, "metadata"))
        (ntensors,) = struct.unpack("<I", _read(f, 4, "tensor count"))
        table = []
        for _ in range(ntensors):
            (nlen,) = struct.unpack("<H", _read(f, 2, "name length"))
            name = _read(f, nlen, "tensor name").decode()
            code, ndim = struct.unpack("<BB", _read(f, 2, "dtype/ndim"))
            if code not in _CODE_DTYPES:
                raise CheckpointError(f"unknown dtype code {code} for tensor {name!r}")
            shape = tuple(struct.unpack("<I", _read(f, 4, "dim"))[0] for _ in range(ndim))
            offset, nbytes = struct.unpack("<QQ", _read(f, 16, "offset/length"))
            table.append((name, code, shape, offset, nbytes))
        blob_start = f.tell()
        st = {}
        for name, code, shape, offset, nbytes in table:
            f.seek(blob_start + offset)
            raw = _read(f, nbytes, f"blob of {name!r}")
            dt = _CODE_DTYPES[code].newbyteorder("<")
            arr = np.frombuffer(raw, dtype=dt).reshape(shape)
            st[name] = arr.astype(arr.dtype.newbyteorder("="))
    model = model_from_descriptor(desc, rng=rng or np.random.default_rng(0))
    model.load_state_dict(st)
    return model, meta
