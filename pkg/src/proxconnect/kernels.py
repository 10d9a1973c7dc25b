"""Hot numeric kernels with numba and pure-numpy implementations.

Every kernel exists twice: ``<name>_numpy`` and ``<name>_numba``.  The
module-level ``<name>`` points at the numba variant unless
``PROXCONNECT_NO_JIT`` is set (or numba is missing).  Both variants
accumulate in the same order, so their outputs are bitwise identical;
``tests/test_kernels.py`` checks this and ``benchmarks/bench_kernels.py``
times them against each other.

Column layout used by im2col/col2im: rows are ``(n, oh, ow)``, columns are
``(c, i, j)``, both row-major.
"""
import numpy as np
from numpy.lib.stride_tricks import as_strided

from ._jit import JIT_ENABLED, njit


def conv_out_size(size, k, stride, pad):
    return (size + 2 * pad - k) // stride + 1


# ---------------------------------------------------------------- im2col

def im2col_numpy(x, kh, kw, stride, pad):
    n, c, h, w = x.shape
    oh = conv_out_size(h, kh, stride, pad)
    ow = conv_out_size(w, kw, stride, pad)
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    x = np.ascontiguousarray(x)
    sn, sc, sh, sw = x.strides
    view = as_strided(
        x,
        shape=(n, oh, ow, c, kh, kw),
        strides=(sn, sh * stride, sw * stride, sc, sh, sw),
        writeable=False,
    )
    return view.reshape(n * oh * ow, c * kh * kw)


@njit
def _im2col_loop(xp, kh, kw, stride, oh, ow):
    n, c = xp.shape[0], xp.shape[1]
    cols = np.empty((n * oh * ow, c * kh * kw), dtype=xp.dtype)
    for b in range(n):
        for y in range(oh):
            for z in range(ow):
                row = (b * oh + y) * ow + z
                col = 0
                for ch in range(c):
                    for i in range(kh):
                        for j in range(kw):
                            cols[row, col] = xp[b, ch, y * stride + i, z * stride + j]
                            col += 1
    return cols


def im2col_numba(x, kh, kw, stride, pad):
    n, c, h, w = x.shape
    oh = conv_out_size(h, kh, stride, pad)
    ow = conv_out_size(w, kw, stride, pad)
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    return _im2col_loop(np.ascontiguousarray(x), kh, kw, stride, oh, ow)


# ---------------------------------------------------------------- col2im

def col2im_numpy(cols, x_shape, kh, kw, stride, pad):
    n, c, h, w = x_shape
    oh = conv_out_size(h, kh, stride, pad)
    ow = conv_out_size(w, kw, stride, pad)
    blocks = cols.reshape(n, oh, ow, c, kh, kw)
    out = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            # (n, oh, ow, c) -> (n, c, oh, ow)
            patch = blocks[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            out[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += patch
    if pad:
        out = out[:, :, pad:pad + h, pad:pad + w]
    return np.ascontiguousarray(out)


@njit
def _col2im_loop(cols, n, c, hp, wp, kh, kw, stride, oh, ow):
    out = np.zeros((n, c, hp, wp), dtype=cols.dtype)
    ckk = kh * kw
    # same (i, j)-outer order as the numpy variant -> identical rounding
    for i in range(kh):
        for j in range(kw):
            for b in range(n):
                for ch in range(c):
                    col = ch * ckk + i * kw + j
                    for y in range(oh):
                        for z in range(ow):
                            row = (b * oh + y) * ow + z
                            out[b, ch, y * stride + i, z * stride + j] += cols[row, col]
    return out


def col2im_numba(cols, x_shape, kh, kw, stride, pad):
    n, c, h, w = x_shape
    oh = conv_out_size(h, kh, stride, pad)
    ow = conv_out_size(w, kw, stride, pad)
    out = _col2im_loop(np.ascontiguousarray(cols), n, c, h + 2 * pad, w + 2 * pad,
                       kh, kw, stride, oh, ow)
    if pad:
        out = out[:, :, pad:pad + h, pad:pad + w]
    return np.ascontiguousarray(out)


# ---------------------------------------------------------------- max pooling
# Non-overlapping windows (kernel == stride); trailing rows/cols are dropped.

def maxpool_forward_numpy(x, k):
    n, c, h, w = x.shape
    oh, ow = h // k, w // k
    xc = x[:, :, :oh * k, :ow * k].reshape(n, c, oh, k, ow, k)
    win = xc.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, oh, ow, k * k)
    idx = np.argmax(win, axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return np.ascontiguousarray(out), idx.astype(np.int64)


@njit
def _maxpool_loop(x, k, oh, ow):
    n, c = x.shape[0], x.shape[1]
    out = np.empty((n, c, oh, ow), dtype=x.dtype)
    idx = np.empty((n, c, oh, ow), dtype=np.int64)
    for b in range(n):
        for ch in range(c):
            for y in range(oh):
                for z in range(ow):
                    best = x[b, ch, y * k, z * k]
                    arg = 0
                    for i in range(k):
                        for j in range(k):
                            v = x[b, ch, y * k + i, z * k + j]
                            if v > best:
                                best = v
                                arg = i * k + j
                    out[b, ch, y, z] = best
                    idx[b, ch, y, z] = arg
    return out, idx


def maxpool_forward_numba(x, k):
    h, w = x.shape[2], x.shape[3]
    return _maxpool_loop(np.ascontiguousarray(x), k, h // k, w // k)


def maxpool_backward_numpy(g, idx, x_shape, k):
    n, c, h, w = x_shape
    oh, ow = g.shape[2], g.shape[3]
    win = np.zeros((n, c, oh, ow, k * k), dtype=g.dtype)
    np.put_along_axis(win, idx[..., None], g[..., None], axis=-1)
    win = win.reshape(n, c, oh, ow, k, k).transpose(0, 1, 2, 4, 3, 5)
    out = np.zeros(x_shape, dtype=g.dtype)
    out[:, :, :oh * k, :ow * k] = win.reshape(n, c, oh * k, ow * k)
    return out


@njit
def _maxpool_back_loop(g, idx, n, c, h, w, k):
    out = np.zeros((n, c, h, w), dtype=g.dtype)
    oh, ow = g.shape[2], g.shape[3]
    for b in range(n):
        for ch in range(c):
            for y in range(oh):
                for z in range(ow):
                    a = idx[b, ch, y, z]
                    out[b, ch, y * k + a // k, z * k + a % k] = g[b, ch, y, z]
    return out


def maxpool_backward_numba(g, idx, x_shape, k):
    n, c, h, w = x_shape
    return _maxpool_back_loop(np.ascontiguousarray(g), np.ascontiguousarray(idx), n, c, h, w, k)


# ---------------------------------------------------------------- bit packing
# bit i of the payload is set iff value i is positive; LSB-first within a byte

def pack_signs_numpy(values):
    return np.packbits(np.asarray(values).ravel() > 0, bitorder="little")


@njit
def _pack_loop(flat):
    n = flat.size
    out = np.empty((n + 7) // 8, dtype=np.uint8)
    for b in range(out.size):
        v = 0
        for k in range(min(8, n - 8 * b)):
            if flat[8 * b + k] > 0:
                v |= 1 << k
        out[b] = v
    return out


def pack_signs_numba(values):
    return _pack_loop(np.ascontiguousarray(np.asarray(values, dtype=np.float64).ravel()))


def unpack_signs_numpy(payload, count):
    bits = np.unpackbits(np.asarray(payload, dtype=np.uint8), count=count, bitorder="little")
    return np.where(bits == 1, 1.0, -1.0)


@njit
def _unpack_loop(payload, count):
    out = np.empty(count, dtype=np.float64)
    for i in range(count):
        out[i] = 1.0 if (payload[i >> 3] >> (i & 7)) & 1 else -1.0
    return out


def unpack_signs_numba(payload, count):
    return _unpack_loop(np.ascontiguousarray(np.asarray(payload, dtype=np.uint8)), count)


# ---------------------------------------------------------------- accumulator wrap

def wrap_accumulator_numpy(acc, bits):
    half = 1 << (bits - 1)
    span = 1 << bits
    wrapped = np.mod(acc + half, span) - half
    overflow = int(np.count_nonzero((acc < -half) | (acc > half - 1)))
    return wrapped, overflow


@njit
def _wrap_loop(flat, bits):
    half = 1 << (bits - 1)
    span = 1 << bits
    out = np.empty_like(flat)
    overflow = 0
    for i in range(flat.size):
        v = flat[i]
        if v < -half or v > half - 1:
            overflow += 1
        r = (v + half) % span  # numba follows Python semantics: result has sign of span
        out[i] = r - half
    return out, overflow


def wrap_accumulator_numba(acc, bits):
    acc = np.asarray(acc, dtype=np.float64)
    out, overflow = _wrap_loop(np.ascontiguousarray(acc).ravel(), bits)
    return out.reshape(acc.shape), int(overflow)


# ---------------------------------------------------------------- dispatch

KERNELS = ("im2col", "col2im", "maxpool_forward", "maxpool_backward",
           "pack_signs", "unpack_signs", "wrap_accumulator")

BACKENDS = {
    "numpy": {name: globals()[name + "_numpy"] for name in KERNELS},
    "numba": {name: globals()[name + "_numba"] for name in KERNELS},
}

BACKEND = "numba" if JIT_ENABLED else "numpy"

im2col = BACKENDS[BACKEND]["im2col"]
col2im = BACKENDS[BACKEND]["col2im"]
maxpool_forward = BACKENDS[BACKEND]["maxpool_forward"]
maxpool_backward = BACKENDS[BACKEND]["maxpool_backward"]
pack_signs = pack_signs_numpy  # np.packbits beats the jitted loop (benchmarks/bench_kernels.py)
unpack_signs = BACKENDS[BACKEND]["unpack_signs"]
wrap_accumulator = BACKENDS[BACKEND]["wrap_accumulator"]
