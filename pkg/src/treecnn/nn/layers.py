"""Forward/backward implementations for each supported layer kind.

Tensors are NCHW for images and (N, D) for vectors.  A layer's ``forward``
returns ``(output, cache)``; ``backward`` consumes the cache and returns
``(dx, grads)`` where ``grads`` is keyed like ``params``.
"""
import numpy as np

from treecnn import kernels


def he_uniform(rng, shape, fan_in, dtype):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Layer:
    kind = None

    def __init__(self, spec, in_shape, rng, dtype):
        self.spec = spec
        self.name = spec.name
        self.in_shape = tuple(in_shape)
        self.dtype = dtype
        self.params = {}
        self.buffers = {}

    def forward(self, x, train, rng):
        raise NotImplementedError

    def backward(self, dy, cache, need_dx=True):
        raise NotImplementedError

    def state_arrays(self):
        """Params then buffers, in a fixed order (used for checkpoints/checksums)."""
        return [(k, self.params[k]) for k in sorted(self.params)] + [
            (k, self.buffers[k]) for k in sorted(self.buffers)
        ]


class Conv(Layer):
    kind = "conv"

    def __init__(self, spec, in_shape, rng, dtype):
        super().__init__(spec, in_shape, rng, dtype)
        cin = in_shape[0]
        k = spec.kernel
        fan_in = cin * k * k
        self.params["W"] = he_uniform(rng, (spec.channels, cin, k, k), fan_in, dtype)
        if spec.bias:
            self.params["b"] = np.zeros(spec.channels, dtype=dtype)

    def forward(self, x, train, rng):
        n, _, h, w = x.shape
        k = self.spec.kernel
        pad = k // 2
        xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
        cols = kernels.im2col(xp, k, k)
        wmat = self.params["W"].reshape(self.spec.channels, -1)
        y = cols @ wmat.T
        if "b" in self.params:
            y += self.params["b"]
        y = y.reshape(n, h, w, self.spec.channels).transpose(0, 3, 1, 2)
        return np.ascontiguousarray(y), (cols, x.shape)

    def backward(self, dy, cache, need_dx=True):
        cols, xshape = cache
        n, c, h, w = xshape
        k = self.spec.kernel
        pad = k // 2
        dy2 = dy.transpose(0, 2, 3, 1).reshape(-1, self.spec.channels)
        grads = {"W": (dy2.T @ cols).reshape(self.params["W"].shape)}
        if "b" in self.params:
            grads["b"] = dy2.sum(axis=0, dtype=np.float64).astype(self.dtype)
        dx = None
        if need_dx:
            dcols = dy2 @ self.params["W"].reshape(self.spec.channels, -1)
            dxp = kernels.col2im(dcols, n, c, h + 2 * pad, w + 2 * pad, k, k)
            dx = dxp[:, :, pad : pad + h, pad : pad + w] if pad else dxp
        return dx, grads


class MaxPool(Layer):
    kind = "max-pool"

    def forward(self, x, train, rng):
        out, arg = kernels.maxpool_forward(x, self.spec.window)
        return out, (arg, x.shape)

    def backward(self, dy, cache, need_dx=True):
        arg, xshape = cache
        if not need_dx:
            return None, {}
        return kernels.maxpool_backward(dy, arg, xshape[2], xshape[3], self.spec.window), {}


class AvgPool(Layer):
    kind = "avg-pool"

    def forward(self, x, train, rng):
        k = self.spec.window
        n, c, h, w = x.shape
        ho, wo = h // k, w // k
        xr = x[:, :, : ho * k, : wo * k].reshape(n, c, ho, k, wo, k)
        return xr.mean(axis=(3, 5), dtype=np.float64).astype(x.dtype), x.shape

    def backward(self, dy, cache, need_dx=True):
        if not need_dx:
            return None, {}
        n, c, h, w = cache
        k = self.spec.window
        ho, wo = dy.shape[2], dy.shape[3]
        dx = np.zeros(cache, dtype=dy.dtype)
        dx[:, :, : ho * k, : wo * k] = np.repeat(np.repeat(dy, k, axis=2), k, axis=3) / (k * k)
        return dx, {}


class Dense(Layer):
    kind = "fully-connected"

    def __init__(self, spec, in_shape, rng, dtype):
        super().__init__(spec, in_shape, rng, dtype)
        fan_in = int(np.prod(in_shape))
        self.params["W"] = he_uniform(rng, (fan_in, spec.units), fan_in, dtype)
        if spec.bias:
            self.params["b"] = np.zeros(spec.units, dtype=dtype)

    def forward(self, x, train, rng):
        x2 = x.reshape(x.shape[0], -1)
        y = x2 @ self.params["W"]
        if "b" in self.params:
            y += self.params["b"]
        return y, (x2, x.shape)

    def backward(self, dy, cache, need_dx=True):
        x2, xshape = cache
        grads = {"W": x2.T @ dy}
        if "b" in self.params:
            grads["b"] = dy.sum(axis=0, dtype=np.float64).astype(self.dtype)
        dx = (dy @ self.params["W"].T).reshape(xshape) if need_dx else None
        return dx, grads


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, train, rng):
        mask = x > 0
        return x * mask, mask

    def backward(self, dy, cache, need_dx=True):
        return (dy * cache if need_dx else None), {}


class Dropout(Layer):
    """Inverted dropout; identity outside training."""

    kind = "dropout"

    def forward(self, x, train, rng):
        p = self.spec.p
        if not train or p == 0.0:
            return x, None
        if rng is None:
            raise ValueError(f"dropout layer {self.name!r} needs an rng in train mode")
        mask = (rng.random(x.shape) >= p).astype(x.dtype) / x.dtype.type(1.0 - p)
        return x * mask, mask

    def backward(self, dy, cache, need_dx=True):
        if not need_dx:
            return None, {}
        return (dy if cache is None else dy * cache), {}


class BatchNorm(Layer):
    """Per-channel (NCHW) or per-feature (N, D) batch normalisation."""

    kind = "batch-norm"
    momentum = 0.9
    eps = 1e-5

    def __init__(self, spec, in_shape, rng, dtype):
        super().__init__(spec, in_shape, rng, dtype)
        c = in_shape[0]
        self.params["gamma"] = np.ones(c, dtype=dtype)
        self.params["beta"] = np.zeros(c, dtype=dtype)
        self.buffers["running_mean"] = np.zeros(c, dtype=dtype)
        self.buffers["running_var"] = np.ones(c, dtype=dtype)

    def _bshape(self, x):
        return (1, -1, 1, 1) if x.ndim == 4 else (1, -1)

    def _axes(self, x):
        return (0, 2, 3) if x.ndim == 4 else (0,)

    def forward(self, x, train, rng):
        bs = self._bshape(x)
        gamma = self.params["gamma"].reshape(bs)
        beta = self.params["beta"].reshape(bs)
        if not train:
            mean = self.buffers["running_mean"].reshape(bs)
            var = self.buffers["running_var"].reshape(bs)
            y = (x - mean) / np.sqrt(var + self.eps) * gamma + beta
            return y.astype(x.dtype, copy=False), None
        axes = self._axes(x)
        mean = x.mean(axis=axes, dtype=np.float64)
        var = x.var(axis=axes, dtype=np.float64)
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = ((x - mean.reshape(bs)) * inv_std.reshape(bs)).astype(x.dtype)
        m = self.momentum
        self.buffers["running_mean"][...] = m * self.buffers["running_mean"] + (1 - m) * mean
        self.buffers["running_var"][...] = m * self.buffers["running_var"] + (1 - m) * var
        return xhat * gamma + beta, (xhat, inv_std.astype(x.dtype))

    def backward(self, dy, cache, need_dx=True):
        xhat, inv_std = cache
        axes = self._axes(dy)
        bs = self._bshape(dy)
        grads = {
            "gamma": (dy * xhat).sum(axis=axes, dtype=np.float64).astype(self.dtype),
            "beta": dy.sum(axis=axes, dtype=np.float64).astype(self.dtype),
        }
        dx = None
        if need_dx:
            m = dy.size // dy.shape[1]
            dxhat = dy * self.params["gamma"].reshape(bs)
            s1 = dxhat.sum(axis=axes, dtype=np.float64).reshape(bs)
            s2 = (dxhat * xhat).sum(axis=axes, dtype=np.float64).reshape(bs)
            dx = (inv_std.reshape(bs) / m * (m * dxhat - s1 - xhat * s2)).astype(dy.dtype)
        return dx, grads


class Softmax(Layer):
    kind = "softmax"

    def forward(self, x, train, rng):
        y = softmax(x)
        return y, y

    def backward(self, dy, cache, need_dx=True):
        if not need_dx:
            return None, {}
        y = cache
        return y * (dy - (dy * y).sum(axis=1, keepdims=True)), {}


def softmax(z):
    z = np.asarray(z)
    out_dtype = z.dtype if np.issubdtype(z.dtype, np.floating) else np.float64
    z64 = z.astype(np.float64)
    e = np.exp(z64 - z64.max(axis=-1, keepdims=True))
    return (e / e.sum(axis=-1, keepdims=True)).astype(out_dtype, copy=False)


LAYER_TYPES = {
    cls.kind: cls for cls in (Conv, MaxPool, AvgPool, Dense, ReLU, Dropout, BatchNorm, Softmax)
}


def build_layer(spec, in_shape, rng, dtype):
    return LAYER_TYPES[spec.kind](spec, in_shape, rng, dtype)
