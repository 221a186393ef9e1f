"""A small dense/conv network kernel with explicit analytic backprop.

Everything runs on float64 numpy arrays in (batch, channels, height, width)
layout. All trainable parameters live in one flat vector, so SGD steps and
layer freezing are plain slice operations, and checkpoints are a single
base64 blob plus the architecture description.

The model is an encoder (one-hot mask -> embedding vector r) followed by an
optional projection head (r -> z). Training losses act on z; retrieval
similarity uses z as well, L2-normalized by default.
"""

from __future__ import annotations

import base64
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import PaletteError
from .maskio import SemanticMask

CHECKPOINT_FORMAT_VERSION = 1
LAYER_KINDS = ("conv", "relu", "maxpool", "globalavgpool", "dense")


@dataclass(frozen=True)
class LayerDescriptor:
    """One layer of the network; unused fields stay at their zero defaults."""

    kind: str
    out_channels: int = 0
    kernel: int = 0
    stride: int = 1
    padding: int = 0
    out_features: int = 0

    def __post_init__(self) -> None:
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r} (have {LAYER_KINDS})")
        if self.kind == "conv":
            if self.out_channels < 1 or self.kernel < 1:
                raise ValueError("conv needs out_channels >= 1 and kernel >= 1")
            if self.stride < 1 or self.padding < 0:
                raise ValueError("conv needs stride >= 1 and padding >= 0")
        elif self.kind == "maxpool":
            if self.kernel < 1 or self.stride < 1:
                raise ValueError("maxpool needs kernel >= 1 and stride >= 1")
        elif self.kind == "dense":
            if self.out_features < 1:
                raise ValueError("dense needs out_features >= 1")


def conv(out_channels: int, kernel: int = 3, stride: int = 1, padding: int = 0) -> LayerDescriptor:
    return LayerDescriptor("conv", out_channels=out_channels, kernel=kernel,
                           stride=stride, padding=padding)


def relu() -> LayerDescriptor:
    return LayerDescriptor("relu")


def maxpool(kernel: int = 2, stride: int | None = None) -> LayerDescriptor:
    return LayerDescriptor("maxpool", kernel=kernel, stride=stride or kernel)


def global_avg_pool() -> LayerDescriptor:
    return LayerDescriptor("globalavgpool")


def dense(out_features: int) -> LayerDescriptor:
    return LayerDescriptor("dense", out_features=out_features)


def default_encoder(embed_dim: int = 64) -> tuple[LayerDescriptor, ...]:
    """Three stride-2 conv/ReLU stages, global average pool, dense to r."""
    return (
        conv(16, kernel=3, stride=2, padding=1), relu(),
        conv(32, kernel=3, stride=2, padding=1), relu(),
        conv(64, kernel=3, stride=2, padding=1), relu(),
        global_avg_pool(),
        dense(embed_dim),
    )


def default_projection(embed_dim: int = 64, proj_dim: int = 128) -> tuple[LayerDescriptor, ...]:
    """Two-layer MLP head mapping r to the loss space z."""
    return (dense(embed_dim), relu(), dense(proj_dim))


def _out_shape(desc: LayerDescriptor, in_shape: tuple[int, ...]) -> tuple[int, ...]:
    if desc.kind == "relu":
        return in_shape
    if desc.kind == "dense":
        return (desc.out_features,)
    if len(in_shape) != 3:
        raise ValueError(f"{desc.kind} needs a (C, H, W) input, got shape {in_shape}")
    c, h, w = in_shape
    if desc.kind == "globalavgpool":
        return (c,)
    if desc.kind == "conv":
        h2 = (h + 2 * desc.padding - desc.kernel) // desc.stride + 1
        w2 = (w + 2 * desc.padding - desc.kernel) // desc.stride + 1
        if h2 < 1 or w2 < 1 or h + 2 * desc.padding < desc.kernel:
            raise ValueError(f"conv kernel {desc.kernel} too large for input {in_shape}")
        return (desc.out_channels, h2, w2)
    # maxpool
    if desc.kernel > h or desc.kernel > w:
        raise ValueError(f"maxpool kernel {desc.kernel} too large for input {in_shape}")
    h2 = (h - desc.kernel) // desc.stride + 1
    w2 = (w - desc.kernel) // desc.stride + 1
    return (c, h2, w2)


def _param_shapes(desc: LayerDescriptor, in_shape: tuple[int, ...]):
    """(weight_shape, bias_shape) or None for parameter-free layers."""
    if desc.kind == "conv":
        c = in_shape[0]
        return (desc.out_channels, c * desc.kernel * desc.kernel), (desc.out_channels,)
    if desc.kind == "dense":
        fan_in = int(np.prod(in_shape))
        return (desc.out_features, fan_in), (desc.out_features,)
    return None


def _glorot_limit(desc: LayerDescriptor, in_shape: tuple[int, ...]) -> float:
    if desc.kind == "conv":
        fan_in = in_shape[0] * desc.kernel * desc.kernel
        fan_out = desc.out_channels * desc.kernel * desc.kernel
    else:  # dense
        fan_in = int(np.prod(in_shape))
        fan_out = desc.out_features
    return math.sqrt(6.0 / (fan_in + fan_out))


_CONV_INDEX_CACHE: dict[tuple, tuple] = {}


def _conv_indices(c: int, h: int, w: int, k: int, s: int, p: int):
    """Gather indices mapping a padded (C, H+2p, W+2p) raster to im2col form.

    Returns (flat, h_out, w_out) where flat has shape (c*k*k, h_out*w_out)
    and indexes the flattened padded raster. A flat ``np.take`` gather stays
    C-contiguous, which keeps the following matmul on the BLAS fast path —
    the equivalent multi-axis fancy index returns a transposed buffer that
    silently falls off it.
    """
    key = (c, h, w, k, s, p)
    cached = _CONV_INDEX_CACHE.get(key)
    if cached is not None:
        return cached
    h_out = (h + 2 * p - k) // s + 1
    w_out = (w + 2 * p - k) // s + 1
    i0 = np.tile(np.repeat(np.arange(k), k), c)
    j0 = np.tile(np.arange(k), k * c)
    i1 = s * np.repeat(np.arange(h_out), w_out)
    j1 = s * np.tile(np.arange(w_out), h_out)
    rows = i0[:, None] + i1[None, :]
    cols = j0[:, None] + j1[None, :]
    chans = np.repeat(np.arange(c), k * k)[:, None]
    hp, wp = h + 2 * p, w + 2 * p
    flat = (chans * hp + rows) * wp + cols
    cached = (flat, h_out, w_out)
    _CONV_INDEX_CACHE[key] = cached
    return cached


class EmbeddingModel:
    """Encoder + projection head over one flat float64 parameter vector."""

    def __init__(
        self,
        input_shape: Sequence[int],
        encoder: Sequence[LayerDescriptor],
        projection: Sequence[LayerDescriptor] = (),
        *,
        seed: int | np.random.SeedSequence = 0,
        params: np.ndarray | None = None,
        normalize: bool = True,
    ) -> None:
        if not encoder:
            raise ValueError("encoder needs at least one layer")
        self.input_shape = tuple(int(d) for d in input_shape)
        self.encoder = tuple(encoder)
        self.projection = tuple(projection)
        self.normalize = bool(normalize)
        self.layers = self.encoder + self.projection

        # Shape algebra: every adjacent pair must be compatible; failures are
        # construction-time errors, never mid-forward surprises.
        self._in_shapes: list[tuple[int, ...]] = []
        self._param_meta: list[tuple[slice, slice, tuple, tuple] | None] = []
        shape = self.input_shape
        offset = 0
        for desc in self.layers:
            self._in_shapes.append(shape)
            shapes = _param_shapes(desc, shape)
            if shapes is None:
                self._param_meta.append(None)
            else:
                w_shape, b_shape = shapes
                w_size = int(np.prod(w_shape))
                b_size = int(np.prod(b_shape))
                self._param_meta.append(
                    (slice(offset, offset + w_size),
                     slice(offset + w_size, offset + w_size + b_size),
                     w_shape, b_shape)
                )
                offset += w_size + b_size
            shape = _out_shape(desc, shape)
        self.output_shape = shape

        embed_shape = self.input_shape
        for desc in self.encoder:
            embed_shape = _out_shape(desc, embed_shape)
        if len(embed_shape) != 1:
            raise ValueError(
                f"encoder must end in a vector (dense or pooling), got {embed_shape}"
            )
        if len(self.output_shape) != 1:
            raise ValueError(f"projection must end in a vector, got {self.output_shape}")
        self.embed_dim = embed_shape[0]
        self.proj_dim = self.output_shape[0]

        if params is None:
            self.params = self._init_params(seed)
        else:
            params = np.asarray(params, dtype=np.float64)
            if params.shape != (offset,):
                raise ValueError(
                    f"parameter vector has {params.size} values, architecture needs {offset}"
                )
            self.params = params.copy()
        self._tape: list | None = None

    @property
    def n_params(self) -> int:
        return self.params.size

    def _init_params(self, seed) -> np.ndarray:
        rng = np.random.default_rng(seed)
        total = 0
        for meta in self._param_meta:
            if meta is not None:
                total = max(total, meta[1].stop)
        params = np.zeros(total, dtype=np.float64)
        for desc, in_shape, meta in zip(self.layers, self._in_shapes, self._param_meta):
            if meta is None:
                continue
            w_slice, _, w_shape, _ = meta
            limit = _glorot_limit(desc, in_shape)
            params[w_slice] = rng.uniform(-limit, limit, size=int(np.prod(w_shape)))
            # biases start at zero
        return params

    def layer_params(self, index: int):
        """(weight_view, bias_view) for layer ``index`` or None."""
        meta = self._param_meta[index]
        if meta is None:
            return None
        w_slice, b_slice, w_shape, _ = meta
        return self.params[w_slice].reshape(w_shape), self.params[b_slice]

    def parameter_slice(self, index: int) -> slice | None:
        """Flat-vector extent of layer ``index``'s parameters."""
        meta = self._param_meta[index]
        if meta is None:
            return None
        return slice(meta[0].start, meta[1].stop)

    # -- forward / backward -------------------------------------------------

    def forward(self, x: np.ndarray, record: bool = False):
        """Run the network; returns (embedding r, projection z).

        ``x`` is (batch, *input_shape) or a single unbatched sample. With
        ``record=True`` the activations needed for one backward pass are kept.
        """
        x = np.asarray(x, dtype=np.float64)
        if x.shape == self.input_shape:
            x = x[None]
        if x.shape[1:] != self.input_shape:
            raise ValueError(
                f"input shape {x.shape[1:]} does not match model {self.input_shape}"
            )
        tape: list | None = [] if record else None
        h = x
        embed = None
        for i, desc in enumerate(self.layers):
            h, cache = self._forward_layer(i, desc, h)
            if tape is not None:
                tape.append(cache)
            if i == len(self.encoder) - 1:
                embed = h
        if record:
            self._tape = tape
        return embed, h

    def _forward_layer(self, index: int, desc: LayerDescriptor, x: np.ndarray):
        if desc.kind == "relu":
            return np.maximum(x, 0.0), ("relu", x > 0.0)
        if desc.kind == "dense":
            w, b = self.layer_params(index)
            flat = x.reshape(x.shape[0], -1)
            return flat @ w.T + b, ("dense", flat, x.shape)
        if desc.kind == "globalavgpool":
            return x.mean(axis=(2, 3)), ("gap", x.shape)
        if desc.kind == "conv":
            w, b = self.layer_params(index)
            batch, c, h, wdt = x.shape
            flat, h_out, w_out = _conv_indices(
                c, h, wdt, desc.kernel, desc.stride, desc.padding
            )
            pad = desc.padding
            xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
            xf = xp.reshape(batch, -1)
            patches = np.take(xf, flat.ravel(), axis=1).reshape(batch, *flat.shape)
            out = np.matmul(w, patches) + b[None, :, None]
            return (
                out.reshape(batch, desc.out_channels, h_out, w_out),
                ("conv", patches, x.shape, xp.shape),
            )
        # maxpool
        k, s = desc.kernel, desc.stride
        win = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(2, 3))
        win = win[:, :, ::s, ::s]
        batch, c, h_out, w_out = win.shape[:4]
        flat = win.reshape(batch, c, h_out, w_out, k * k)
        arg = flat.argmax(axis=-1)
        out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
        return out, ("maxpool", arg, x.shape)

    def backward(self, grad_output: np.ndarray) -> np.ndarray:
        """Backpropagate d(loss)/dz through the recorded forward pass.

        Returns the gradient as a flat vector aligned with ``self.params``.
        Raises RuntimeError if no forward(..., record=True) has been run.
        """
        if self._tape is None:
            raise RuntimeError("backward requires a preceding forward(record=True)")
        grad = np.zeros_like(self.params)
        g = np.asarray(grad_output, dtype=np.float64)
        for i in range(len(self.layers) - 1, -1, -1):
            desc = self.layers[i]
            cache = self._tape[i]
            g = self._backward_layer(i, desc, cache, g, grad)
        return grad

    def _backward_layer(self, index, desc, cache, g, grad_out_vec):
        meta = self._param_meta[index]
        if desc.kind == "relu":
            return g * cache[1]
        if desc.kind == "dense":
            _, flat, in_shape = cache
            w, _ = self.layer_params(index)
            w_slice, b_slice = meta[0], meta[1]
            grad_out_vec[w_slice] += (g.T @ flat).ravel()
            grad_out_vec[b_slice] += g.sum(axis=0)
            return (g @ w).reshape(in_shape)
        if desc.kind == "globalavgpool":
            _, in_shape = cache
            area = in_shape[2] * in_shape[3]
            return np.broadcast_to(g[:, :, None, None], in_shape) / area
        if desc.kind == "conv":
            _, patches, in_shape, padded_shape = cache
            w, _ = self.layer_params(index)
            w_slice, b_slice = meta[0], meta[1]
            batch = in_shape[0]
            gm = g.reshape(batch, desc.out_channels, -1)
            grad_out_vec[w_slice] += np.einsum("bol,bkl->ok", gm, patches).ravel()
            grad_out_vec[b_slice] += gm.sum(axis=(0, 2))
            dpatches = np.matmul(w.T, gm)
            flat, _, _ = _conv_indices(
                in_shape[1], in_shape[2], in_shape[3],
                desc.kernel, desc.stride, desc.padding,
            )
            idx = flat.ravel()
            padded_size = int(np.prod(padded_shape[1:]))
            dxf = np.empty((batch, padded_size))
            for bi in range(batch):
                dxf[bi] = np.bincount(
                    idx, weights=dpatches[bi].ravel(), minlength=padded_size
                )
            dxp = dxf.reshape((batch,) + padded_shape[1:])
            pad = desc.padding
            if pad:
                return dxp[:, :, pad:-pad, pad:-pad]
            return dxp
        # maxpool
        _, arg, in_shape = cache
        k, s = desc.kernel, desc.stride
        batch, c, h_out, w_out = arg.shape
        hi = (np.arange(h_out) * s)[None, None, :, None] + arg // k
        wi = (np.arange(w_out) * s)[None, None, None, :] + arg % k
        dx = np.zeros(in_shape, dtype=np.float64)
        bidx = np.arange(batch)[:, None, None, None]
        cidx = np.arange(c)[None, :, None, None]
        np.add.at(dx, (bidx, cidx, hi, wi), g)
        return dx

    # -- helpers for finite differencing -------------------------------------

    def activations(self, x: np.ndarray) -> list[np.ndarray]:
        """Per-layer inputs: result[i] feeds layer i; result[-1] is z."""
        x = np.asarray(x, dtype=np.float64)
        if x.shape == self.input_shape:
            x = x[None]
        acts = [x]
        h = x
        for i, desc in enumerate(self.layers):
            h, _ = self._forward_layer(i, desc, h)
            acts.append(h)
        return acts

    def forward_from(self, layer_index: int, activation: np.ndarray) -> np.ndarray:
        """Recompute z starting at ``layer_index`` given that layer's input."""
        h = activation
        for i in range(layer_index, len(self.layers)):
            h, _ = self._forward_layer(i, self.layers[i], h)
        return h

    def copy(self) -> "EmbeddingModel":
        return EmbeddingModel(
            self.input_shape, self.encoder, self.projection,
            params=self.params, normalize=self.normalize,
        )

    def describe(self) -> dict:
        return {
            "format_version": CHECKPOINT_FORMAT_VERSION,
            "input_shape": list(self.input_shape),
            "encoder": [asdict(d) for d in self.encoder],
            "projection": [asdict(d) for d in self.projection],
            "normalize": self.normalize,
            "embed_dim": self.embed_dim,
            "proj_dim": self.proj_dim,
        }


def build_default_model(
    palette_size: int = 8,
    in_h: int = 64,
    in_w: int = 80,
    embed_dim: int = 64,
    proj_dim: int = 128,
    seed: int | np.random.SeedSequence = 0,
    normalize: bool = True,
) -> EmbeddingModel:
    """The stock architecture: one-hot masks in, (r, z) out."""
    return EmbeddingModel(
        (palette_size, in_h, in_w),
        default_encoder(embed_dim),
        default_projection(embed_dim, proj_dim),
        seed=seed,
        normalize=normalize,
    )


# ---------------------------------------------------------------------------
# Vector utilities


def l2_normalize(z: np.ndarray, axis: int = -1) -> np.ndarray:
    """Scale vectors to unit L2 norm along ``axis``; zero vectors are an error."""
    z = np.asarray(z, dtype=np.float64)
    norms = np.linalg.norm(z, axis=axis, keepdims=True)
    if np.any(norms < 1e-30):
        raise ValueError("cannot normalize a zero (or denormal) vector")
    return z / norms


def l2_normalize_vjp(
    normalized: np.ndarray, norms: np.ndarray, grad: np.ndarray
) -> np.ndarray:
    """Backprop through row-wise L2 normalization.

    ``normalized`` is z/||z||, ``norms`` the keepdims norms of the raw input,
    ``grad`` the upstream gradient on the normalized output.
    """
    inner = np.sum(grad * normalized, axis=-1, keepdims=True)
    return (grad - normalized * inner) / norms


def one_hot_encode(mask: SemanticMask, num_classes: int) -> np.ndarray:
    """Mask -> (num_classes, H, W) float64 indicator planes.

    Raises PaletteError if the mask uses a class id >= num_classes.
    """
    top = int(mask.data.max())
    if top >= num_classes:
        raise PaletteError(
            f"mask uses class id {top} but one-hot depth is {num_classes}"
        )
    eye = np.eye(num_classes, dtype=np.float64)
    return np.ascontiguousarray(eye[mask.data].transpose(2, 0, 1))


def one_hot_batch(masks: Sequence[SemanticMask], num_classes: int) -> np.ndarray:
    return np.stack([one_hot_encode(m, num_classes) for m in masks])


# ---------------------------------------------------------------------------
# Checkpoints


def save_model(model: EmbeddingModel, path: str | Path) -> None:
    """Write architecture + parameters as JSON with a base64 float64 blob."""
    doc = model.describe()
    doc["params_dtype"] = "<f8"
    doc["params_b64"] = base64.b64encode(
        np.ascontiguousarray(model.params, dtype="<f8").tobytes()
    ).decode("ascii")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=1))


def load_model(path: str | Path) -> EmbeddingModel:
    """Load a checkpoint; architecture/parameter inconsistencies raise."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}: not a valid checkpoint ({exc})") from None
    version = doc.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(
            f"{path}: unsupported checkpoint format_version {version!r}"
        )
    try:
        encoder = tuple(LayerDescriptor(**d) for d in doc["encoder"])
        projection = tuple(LayerDescriptor(**d) for d in doc["projection"])
        input_shape = tuple(doc["input_shape"])
        blob = base64.b64decode(doc["params_b64"])
        params = np.frombuffer(blob, dtype=doc.get("params_dtype", "<f8"))
        normalize = bool(doc["normalize"])
    except (KeyError, TypeError) as exc:
        raise ValueError(f"{path}: malformed checkpoint field ({exc})") from None
    return EmbeddingModel(
        input_shape, encoder, projection, params=params, normalize=normalize
    )


# ---------------------------------------------------------------------------
# Finite differences


def finite_difference_gradient(
    model: EmbeddingModel,
    x: np.ndarray,
    loss_fn: Callable[[np.ndarray], float],
    step: float = 1e-5,
) -> np.ndarray:
    """Central-difference gradient of ``loss_fn(z)`` w.r.t. every parameter.

    ``loss_fn`` maps the raw network output z (batch, proj_dim) to a scalar
    and must be deterministic. The result is numerically identical to a full
    re-forward per probe, but two layer-local facts are exploited to keep the
    cost manageable: unperturbed activations are cached, so each probe only
    recomputes from the perturbed layer onward; and a single conv (or dense)
    parameter only feeds one output channel (or unit), so only that slice of
    the layer's output is refreshed. The model's parameters are restored
    exactly before returning.
    """
    acts = model.activations(x)
    params = model.params
    grads = np.zeros_like(params)
    for index, desc in enumerate(model.layers):
        extent = model.parameter_slice(index)
        if extent is None:
            continue
        rest = index + 1
        x_in = acts[index]
        w, b = model.layer_params(index)
        if desc.kind == "conv":
            batch, c, h, wdt = x_in.shape
            flat_idx, h_out, w_out = _conv_indices(
                c, h, wdt, desc.kernel, desc.stride, desc.padding
            )
            pad = desc.padding
            xp = (
                np.pad(x_in, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
                if pad
                else x_in
            )
            xf = xp.reshape(batch, -1)
            patches = np.take(xf, flat_idx.ravel(), axis=1).reshape(
                batch, *flat_idx.shape
            )
            w2d = w.reshape(desc.out_channels, -1)
            base = np.matmul(w2d, patches) + b[None, :, None]
            out_view = base.reshape(batch, desc.out_channels, h_out, w_out)
            fan_in = w2d.shape[1]

            def refresh(unit: int) -> None:
                base[:, unit, :] = np.matmul(w2d[unit], patches) + b[unit]

        else:  # dense
            flat = x_in.reshape(x_in.shape[0], -1)
            base = flat @ w.T + b
            out_view = base
            fan_in = w.shape[1]

            def refresh(unit: int) -> None:
                base[:, unit] = flat @ w[unit] + b[unit]

        n_weights = w.size
        for j in range(extent.start, extent.stop):
            local = j - extent.start
            unit = local // fan_in if local < n_weights else local - n_weights
            saved = base[:, unit].copy()
            orig = params[j]
            params[j] = orig + step
            refresh(unit)
            loss_plus = float(loss_fn(model.forward_from(rest, out_view)))
            params[j] = orig - step
            refresh(unit)
            loss_minus = float(loss_fn(model.forward_from(rest, out_view)))
            params[j] = orig
            base[:, unit] = saved
            grads[j] = (loss_plus - loss_minus) / (2.0 * step)
    return grads
