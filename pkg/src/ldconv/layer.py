"""Deformable convolution layer with arbitrary kernel size.

Pipeline per forward call: zero-pad the input by the layer padding, predict a
per-position offset field with a small 3x3 convolution (zero-initialised so
training starts from the undeformed kernel), add the offsets to the initial
kernel coordinates anchored at each strided output position, bilinearly sample
the padded input there, and mix the n sampled maps into the output channels
with weights stored canonically as (c_out, c_in, n).  Parameters and compute
therefore grow linearly in n instead of quadratically in a side length.

The channel mix can be evaluated through three equivalent layouts (depth
reduction over a length-n axis, channel stacking followed by a 1x1 mix, or
width stacking followed by a (1, n) window of stride n); all read the same
canonical weights and agree to rounding.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import KernelGeometry, base_grid, gen_initial_coords, load_custom_shape
from .sampler import SampleGrid, bilinear_backward, bilinear_sample
from .tensor import Rng, ShapeError, Tensor4, _owned, pad2d, read_tensors, write_tensors

STRATEGIES = ("conv3d-style", "channel-stack-1x1", "column-conv")
POST_MODES = ("none", "normalize+activation")

_NORM_EPS = 1e-5


@dataclass(frozen=True)
class OffsetField:
    """Predicted offsets (B, 2n, H_out, W_out): n row channels then n col channels."""

    n: int
    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 4:
            raise ShapeError(f"offset field must be rank 4, got rank {arr.ndim}")
        if arr.shape[1] != 2 * self.n:
            raise ShapeError(f"offset field has {arr.shape[1]} channels, expected {2 * self.n}")
        if not np.isfinite(arr).all():
            raise ValueError("offset field holds non-finite values")
        if arr.flags.writeable:
            arr = arr.copy()
            arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    def row_offsets(self) -> np.ndarray:
        return self.data[:, :self.n]

    def col_offsets(self) -> np.ndarray:
        return self.data[:, self.n:]


@dataclass
class LayerCache:
    """Intermediate values retained by forward for the manual backward pass."""

    x: Tensor4
    xp: np.ndarray
    offsets: OffsetField
    grid: SampleGrid
    sampled: np.ndarray
    mixed: np.ndarray
    post_cache: dict | None


@dataclass
class LayerGrads:
    x: Tensor4
    offset_w: np.ndarray
    offset_b: np.ndarray
    agg_w: np.ndarray
    agg_b: np.ndarray | None
    post_scale: np.ndarray | None = None
    post_shift: np.ndarray | None = None


@dataclass
class LdconvLayer:
    """n-point deformable convolution: c_in -> c_out feature maps."""

    n: int
    c_in: int
    c_out: int
    stride: int
    padding: int
    geometry: KernelGeometry
    offset_w: np.ndarray          # (2n, c_in, 3, 3)
    offset_b: np.ndarray          # (2n,)
    agg_w: np.ndarray             # (c_out, c_in, n)
    agg_b: np.ndarray | None      # (c_out,) or None
    strategy: str = "channel-stack-1x1"
    post: str = "none"
    post_scale: np.ndarray | None = None
    post_shift: np.ndarray | None = None
    shape_file: str | None = None

    def __post_init__(self):
        if self.n < 1:
            raise ValueError(f"kernel size must be >= 1, got {self.n}")
        if self.c_in < 1 or self.c_out < 1:
            raise ValueError("channel counts must be >= 1")
        if self.stride < 1:
            raise ValueError(f"stride must be >= 1, got {self.stride}")
        if self.padding < 0:
            raise ValueError(f"padding must be >= 0, got {self.padding}")
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}, options: {STRATEGIES}")
        if self.post not in POST_MODES:
            raise ValueError(f"unknown post mode {self.post!r}, options: {POST_MODES}")
        if self.geometry.n != self.n:
            raise ShapeError(f"geometry has {self.geometry.n} points, layer expects {self.n}")
        if self.offset_w.shape != (2 * self.n, self.c_in, 3, 3):
            raise ShapeError(f"offset_w shape {self.offset_w.shape}")
        if self.offset_b.shape != (2 * self.n,):
            raise ShapeError(f"offset_b shape {self.offset_b.shape}")
        if self.agg_w.shape != (self.c_out, self.c_in, self.n):
            raise ShapeError(f"agg_w shape {self.agg_w.shape}")
        if self.agg_b is not None and self.agg_b.shape != (self.c_out,):
            raise ShapeError(f"agg_b shape {self.agg_b.shape}")
        if self.post == "normalize+activation":
            if self.post_scale is None or self.post_shift is None:
                raise ValueError("post stage enabled but scale/shift missing")

    # -- construction -------------------------------------------------------

    @classmethod
    def create(cls, n: int, c_in: int, c_out: int, *, stride: int = 1,
               padding: int = 0, strategy: str = "channel-stack-1x1",
               post: str = "none", geometry: KernelGeometry | None = None,
               rng: Rng | None = None, agg_bias: bool = True,
               dtype=np.float32, name: str = "ldconv",
               shape_file: str | None = None) -> "LdconvLayer":
        """Build a layer with zero offsets and fan-in-scaled mixing weights.

        When the post stage is enabled the aggregation bias is dropped: the
        normalisation subtracts any per-channel constant, so the learned shift
        takes over and the bias would receive an identically-zero gradient.
        """
        if geometry is None:
            geometry = gen_initial_coords(n)
        rng = rng if rng is not None else Rng(0)
        dtype = np.dtype(dtype)
        bound = float(np.sqrt(1.0 / (c_in * n)))
        agg_w = rng.stream(f"{name}/agg_w").uniform(-bound, bound,
                                                    size=(c_out, c_in, n)).astype(dtype)
        with_post = post == "normalize+activation"
        agg_bias = agg_bias and not with_post
        return cls(
            n=n, c_in=c_in, c_out=c_out, stride=stride, padding=padding,
            geometry=geometry,
            offset_w=np.zeros((2 * n, c_in, 3, 3), dtype=dtype),
            offset_b=np.zeros(2 * n, dtype=dtype),
            agg_w=agg_w,
            agg_b=np.zeros(c_out, dtype=dtype) if agg_bias else None,
            strategy=strategy, post=post, shape_file=shape_file,
            post_scale=np.ones(c_out, dtype=dtype) if with_post else None,
            post_shift=np.zeros(c_out, dtype=dtype) if with_post else None,
        )

    @property
    def dtype(self):
        return self.agg_w.dtype

    def params(self, prefix: str = "") -> dict[str, np.ndarray]:
        out = {f"{prefix}offset_w": self.offset_w, f"{prefix}offset_b": self.offset_b,
               f"{prefix}agg_w": self.agg_w}
        if self.agg_b is not None:
            out[f"{prefix}agg_b"] = self.agg_b
        if self.post == "normalize+activation":
            out[f"{prefix}post_scale"] = self.post_scale
            out[f"{prefix}post_shift"] = self.post_shift
        return out

    def astype(self, dtype) -> "LdconvLayer":
        dtype = np.dtype(dtype)
        return LdconvLayer(
            n=self.n, c_in=self.c_in, c_out=self.c_out, stride=self.stride,
            padding=self.padding, geometry=self.geometry,
            offset_w=self.offset_w.astype(dtype), offset_b=self.offset_b.astype(dtype),
            agg_w=self.agg_w.astype(dtype),
            agg_b=None if self.agg_b is None else self.agg_b.astype(dtype),
            strategy=self.strategy, post=self.post, shape_file=self.shape_file,
            post_scale=None if self.post_scale is None else self.post_scale.astype(dtype),
            post_shift=None if self.post_shift is None else self.post_shift.astype(dtype),
        )

    # -- audits --------------------------------------------------------------

    def param_count(self) -> int:
        """Learnable scalar count: 2n*c_in*9 + 2n + c_out*c_in*n (+ c_out bias).

        The normalisation scale/shift add 2*c_out more when the post stage is
        enabled; both contributions are independent of n.
        """
        count = 2 * self.n * self.c_in * 9 + 2 * self.n + self.c_out * self.c_in * self.n
        if self.agg_b is not None:
            count += self.c_out
        if self.post == "normalize+activation":
            count += 2 * self.c_out
        return count

    def flops_estimate(self, h_in: int, w_in: int) -> int:
        """Single-image multiply-accumulate estimate at the given input extent.

        offset conv:  2n * c_in * 9 * h_out * w_out
        sampling:     8 * c_in * n * h_out * w_out   (4 products + 4 adds each)
        channel mix:  c_out * c_in * n * h_out * w_out
        """
        grid = base_grid(h_in, w_in, stride=self.stride, pad=self.padding)
        cells = grid.h_out * grid.w_out
        offset_macs = 2 * self.n * self.c_in * 9 * cells
        sample_ops = 8 * self.c_in * self.n * cells
        mix_macs = self.c_out * self.c_in * self.n * cells
        return offset_macs + sample_ops + mix_macs

    # -- forward pieces ------------------------------------------------------

    def _offset_conv(self, xp: np.ndarray) -> np.ndarray:
        """3x3/pad-1 convolution of the padded input, stride = layer stride."""
        xpp = pad2d(xp, 1)
        windows = np.lib.stride_tricks.sliding_window_view(xpp, (3, 3), axis=(2, 3))
        windows = windows[:, :, ::self.stride, ::self.stride]
        out = np.einsum("bcijkl,ockl->boij", windows, self.offset_w, optimize=True)
        out += self.offset_b[None, :, None, None]
        return out.astype(xp.dtype, copy=False)

    def predict_offsets(self, x: Tensor4) -> OffsetField:
        """Offset field for input x; output extent matches the layer's base grid."""
        self._check_input(x)
        xp = pad2d(x.data, self.padding)
        return OffsetField(n=self.n, data=self._offset_conv(xp))

    def assemble_grid(self, offsets: OffsetField) -> SampleGrid:
        """Base anchors + initial coordinates + predicted offsets."""
        if offsets.n != self.n:
            raise ShapeError(f"offset field n={offsets.n}, layer n={self.n}")
        b_n, _, h_out, w_out = offsets.data.shape
        dtype = offsets.data.dtype
        row_anchor = (np.arange(h_out, dtype=dtype) * dtype.type(self.stride))
        col_anchor = (np.arange(w_out, dtype=dtype) * dtype.type(self.stride))
        geo_r = self.geometry.rows().astype(dtype)
        geo_c = self.geometry.cols().astype(dtype)
        rows = offsets.row_offsets() + geo_r[None, :, None, None] \
            + row_anchor[None, None, :, None]
        cols = offsets.col_offsets() + geo_c[None, :, None, None] \
            + col_anchor[None, None, None, :]
        return SampleGrid(rows=rows, cols=cols)

    def aggregate(self, sampled: np.ndarray) -> np.ndarray:
        """Mix (B, c_in, n, H, W) samples into (B, c_out, H, W) outputs."""
        sampled = np.asarray(sampled)
        if sampled.ndim != 5 or sampled.shape[1] != self.c_in or sampled.shape[2] != self.n:
            raise ShapeError(f"sampled shape {sampled.shape} incompatible with layer")
        b_n, _, _, h_out, w_out = sampled.shape
        if self.strategy == "conv3d-style":
            # depth reduction: an (n,1,1) window of stride n over the sample axis
            out = np.tensordot(sampled, self.agg_w, axes=([1, 2], [1, 2]))
            out = np.moveaxis(out, 3, 1)
        elif self.strategy == "channel-stack-1x1":
            # stack to c_in*n channels, then a 1x1 mix; channel k = c*n + m
            stacked = sampled.reshape(b_n, self.c_in * self.n, h_out, w_out)
            w2 = self.agg_w.reshape(self.c_out, self.c_in * self.n)
            out = np.einsum("bkij,ok->boij", stacked, w2, optimize=True)
        else:  # column-conv
            # stack along width to w_out*n, then a (1, n) window of stride (1, n)
            wide = np.moveaxis(sampled, 2, 4).reshape(b_n, self.c_in, h_out, w_out * self.n)
            out = np.zeros((b_n, self.c_out, h_out, w_out), dtype=sampled.dtype)
            for m in range(self.n):
                out += np.einsum("bcij,oc->boij", wide[:, :, :, m::self.n],
                                 self.agg_w[:, :, m])
        out = out.astype(sampled.dtype, copy=False)
        if self.agg_b is not None:
            out = out + self.agg_b[None, :, None, None]
        return out

    def _post_forward(self, mixed: np.ndarray):
        """Per-channel normalisation over (B, H, W) plus x*sigmoid(x)."""
        dtype = mixed.dtype
        mean = mixed.mean(axis=(0, 2, 3), keepdims=True)
        var = mixed.var(axis=(0, 2, 3), keepdims=True)
        inv_std = 1.0 / np.sqrt(var + dtype.type(_NORM_EPS))
        xhat = (mixed - mean) * inv_std
        z = self.post_scale[None, :, None, None] * xhat + self.post_shift[None, :, None, None]
        sig = 1.0 / (1.0 + np.exp(-z))
        y = z * sig
        cache = {"xhat": xhat, "inv_std": inv_std, "z": z, "sig": sig}
        return y.astype(dtype, copy=False), cache

    def _post_backward(self, cache: dict, upstream: np.ndarray):
        xhat, inv_std = cache["xhat"], cache["inv_std"]
        z, sig = cache["z"], cache["sig"]
        dz = upstream * (sig * (1.0 + z * (1.0 - sig)))
        grad_shift = dz.sum(axis=(0, 2, 3))
        grad_scale = (dz * xhat).sum(axis=(0, 2, 3))
        dxhat = dz * self.post_scale[None, :, None, None]
        m = dz.shape[0] * dz.shape[2] * dz.shape[3]
        sum_dxhat = dxhat.sum(axis=(0, 2, 3), keepdims=True)
        sum_dxhat_xhat = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
        grad_mixed = (inv_std / m) * (m * dxhat - sum_dxhat - xhat * sum_dxhat_xhat)
        return grad_mixed.astype(upstream.dtype, copy=False), grad_scale, grad_shift

    def _check_input(self, x: Tensor4):
        if not isinstance(x, Tensor4):
            raise TypeError("layer input must be a Tensor4")
        if x.dims[1] != self.c_in:
            raise ShapeError(f"input has {x.dims[1]} channels, layer expects {self.c_in}")
        if x.dims[2] < 1 or x.dims[3] < 1:
            raise ShapeError(f"input extent {x.dims[2]}x{x.dims[3]} is empty")
        if x.dtype != self.dtype:
            raise ValueError(f"input dtype {x.dtype} != layer dtype {self.dtype}")

    def forward(self, x: Tensor4) -> tuple[Tensor4, LayerCache]:
        self._check_input(x)
        xp = pad2d(x.data, self.padding)
        offsets = OffsetField(n=self.n, data=self._offset_conv(xp))
        grid = self.assemble_grid(offsets)
        xp_t = _owned(xp) if self.padding else x
        sampled = bilinear_sample(xp_t, grid)
        mixed = self.aggregate(sampled)
        post_cache = None
        y = mixed
        if self.post == "normalize+activation":
            y, post_cache = self._post_forward(mixed)
        cache = LayerCache(x=x, xp=xp_t.data, offsets=offsets, grid=grid,
                           sampled=sampled, mixed=mixed, post_cache=post_cache)
        return _owned(np.array(y)), cache

    # -- backward ------------------------------------------------------------

    def backward(self, cache: LayerCache, upstream: Tensor4) -> LayerGrads:
        """Gradients of sum(upstream * forward(x)) for input and all parameters."""
        up = upstream.data if isinstance(upstream, Tensor4) else np.asarray(upstream)
        if up.shape != cache.mixed.shape:
            raise ShapeError(f"upstream shape {up.shape} != output shape {cache.mixed.shape}")
        up = up.astype(self.dtype, copy=False)

        grad_scale = grad_shift = None
        if self.post == "normalize+activation":
            up, grad_scale, grad_shift = self._post_backward(cache.post_cache, up)

        # channel mix (canonical backward shared by all strategies)
        grad_agg_w = np.einsum("boij,bcnij->ocn", up, cache.sampled, optimize=True) \
            .astype(self.dtype, copy=False)
        grad_agg_b = up.sum(axis=(0, 2, 3)) if self.agg_b is not None else None
        grad_sampled = np.einsum("boij,ocn->bcnij", up, self.agg_w, optimize=True) \
            .astype(self.dtype, copy=False)

        # bilinear sampling
        xp_t = Tensor4(cache.xp)
        grad_xp_t, grad_rows, grad_cols = bilinear_backward(xp_t, cache.grid, grad_sampled)
        grad_xp = np.array(grad_xp_t.data)

        # grid -> offset field (anchors and initial coordinates are constant)
        grad_field = np.concatenate([grad_rows, grad_cols], axis=1)

        # offset conv backward: weights, bias, and its contribution to grad_xp
        xpp = pad2d(cache.xp, 1)
        windows = np.lib.stride_tricks.sliding_window_view(xpp, (3, 3), axis=(2, 3))
        windows = windows[:, :, ::self.stride, ::self.stride]
        grad_offset_w = np.einsum("boij,bcijkl->ockl", grad_field, windows, optimize=True) \
            .astype(self.dtype, copy=False)
        grad_offset_b = grad_field.sum(axis=(0, 2, 3))

        h_out, w_out = grad_field.shape[2], grad_field.shape[3]
        grad_xpp = np.zeros_like(xpp)
        for kh in range(3):
            for kw in range(3):
                piece = np.einsum("boij,oc->bcij", grad_field, self.offset_w[:, :, kh, kw],
                                  optimize=True)
                grad_xpp[:, :,
                         kh:kh + (h_out - 1) * self.stride + 1:self.stride,
                         kw:kw + (w_out - 1) * self.stride + 1:self.stride] += piece
        grad_xp += grad_xpp[:, :, 1:-1, 1:-1]

        if self.padding:
            grad_x = grad_xp[:, :, self.padding:-self.padding, self.padding:-self.padding]
        else:
            grad_x = grad_xp
        return LayerGrads(x=_owned(np.ascontiguousarray(grad_x)),
                          offset_w=grad_offset_w, offset_b=grad_offset_b,
                          agg_w=grad_agg_w, agg_b=grad_agg_b,
                          post_scale=grad_scale, post_shift=grad_shift)


# ---------------------------------------------------------------------------
# Checkpointing: tensor container + JSON sidecar.  Vector parameters are
# stored as rank-4 tensors with trailing singleton axes.


def _as4(arr: np.ndarray, dims) -> Tensor4:
    return Tensor4(np.ascontiguousarray(arr, dtype=np.float32).reshape(dims))


def layer_records(layer: LdconvLayer) -> dict[str, Tensor4]:
    records = {
        "offset_w": _as4(layer.offset_w, (2 * layer.n, layer.c_in, 3, 3)),
        "offset_b": _as4(layer.offset_b, (2 * layer.n, 1, 1, 1)),
        "agg_w": _as4(layer.agg_w, (layer.c_out, layer.c_in, layer.n, 1)),
    }
    if layer.agg_b is not None:
        records["agg_b"] = _as4(layer.agg_b, (layer.c_out, 1, 1, 1))
    if layer.post == "normalize+activation":
        records["post_scale"] = _as4(layer.post_scale, (layer.c_out, 1, 1, 1))
        records["post_shift"] = _as4(layer.post_shift, (layer.c_out, 1, 1, 1))
    return records


def layer_sidecar(layer: LdconvLayer) -> dict:
    sidecar = {
        "n": layer.n, "c_in": layer.c_in, "c_out": layer.c_out,
        "stride": layer.stride, "padding": layer.padding,
        "strategy": layer.strategy, "post": layer.post,
    }
    if layer.shape_file is not None:
        sidecar["shape_file"] = layer.shape_file
    elif layer.geometry != gen_initial_coords(layer.n):
        # custom geometry built in code: record the points so the layer loads back
        sidecar["coords"] = [list(pair) for pair in layer.geometry.coords]
    return sidecar


def layer_from_records(records: dict[str, Tensor4], sidecar: dict,
                       dtype=np.float32) -> LdconvLayer:
    n = int(sidecar["n"])
    if sidecar.get("shape_file"):
        geometry = load_custom_shape(Path(sidecar["shape_file"]).read_text(), n_expected=n)
    elif sidecar.get("coords"):
        geometry = KernelGeometry(tuple((int(r), int(c)) for r, c in sidecar["coords"]))
    else:
        geometry = gen_initial_coords(n)
    dtype = np.dtype(dtype)
    c_in, c_out = int(sidecar["c_in"]), int(sidecar["c_out"])

    def rec(name, dims):
        if name not in records:
            raise ValueError(f"checkpoint missing record {name!r}")
        return np.array(records[name].data, dtype=dtype).reshape(dims)

    with_post = sidecar["post"] == "normalize+activation"
    return LdconvLayer(
        n=n, c_in=c_in, c_out=c_out,
        stride=int(sidecar["stride"]), padding=int(sidecar["padding"]),
        geometry=geometry,
        offset_w=rec("offset_w", (2 * n, c_in, 3, 3)),
        offset_b=rec("offset_b", (2 * n,)),
        agg_w=rec("agg_w", (c_out, c_in, n)),
        agg_b=rec("agg_b", (c_out,)) if "agg_b" in records else None,
        strategy=sidecar["strategy"], post=sidecar["post"],
        shape_file=sidecar.get("shape_file"),
        post_scale=rec("post_scale", (c_out,)) if with_post else None,
        post_shift=rec("post_shift", (c_out,)) if with_post else None,
    )


def save_layer(layer: LdconvLayer, path) -> None:
    path = Path(path)
    write_tensors(path, layer_records(layer))
    Path(str(path) + ".json").write_text(
        json.dumps(layer_sidecar(layer), indent=2, sort_keys=True))


def load_layer(path, dtype=np.float32) -> LdconvLayer:
    path = Path(path)
    sidecar = json.loads(Path(str(path) + ".json").read_text())
    return layer_from_records(read_tensors(path), sidecar, dtype=dtype)
