"""Compiled inner loops for the pattern and CSR executors.

Inputs are zero-padded NCHW buffers with one spare bottom row, flattened.
With stride 1 an output pixel (y, x) is written at flat position
``y * Wp + x`` of a (Ho x Wp) plane, so every tap is a constant shift of one
contiguous range; the ``Wp - Wo`` tail columns are junk and cropped later.

Bias is added last, per filter and band, while the band is still cached.
Slices are taken before indexing so that numba sees non-negative indices and
vectorises the innermost loops.
"""
from numba import njit

BAND = 4096

_jit = njit(nogil=True, cache=True, fastmath={"contract"})


@_jit
def _valid_positions(s, e, wp, wo):
    count = 0
    for i in range(s, e):
        if i % wp < wo:
            count += 1
    return count


@_jit
def pattern_flat(xpf, out, batch_stride, plane, wp, wo, unit_lo, unit_hi,
                 kbptr, kchan, kpid, kwoff, weights, tmpl, bias, orow, band):
    """Stride-1 pattern convolution over the worker's filter ranges.

    ``kbptr[f, b]:kbptr[f, b + 1]`` are filter f's kernels on channel block
    b; blocks are visited outermost so a block's input bands stay cached
    while every filter of the unit consumes them. Filter ``f`` (compiled
    order) is written to row ``orow[f]`` of the (N, F, L) output. Runs of
    kernels that share a pattern are fused four (or two) at a time, so the
    output band is loaded and stored once per group of kernels. Returns the
    useful MAC count.
    """
    n_batch = out.shape[0]
    length = out.shape[2]
    nnz = tmpl.shape[1]
    n_blocks = kbptr.shape[1] - 1
    macs = 0
    for n in range(n_batch):
        xb = n * batch_stride
        for s in range(0, length, band):
            e = min(length, s + band)
            m = e - s
            valid = _valid_positions(s, e, wp, wo)
            for blk in range(n_blocks):
                for u in range(unit_lo.shape[0]):
                    for f in range(unit_lo[u], unit_hi[u]):
                        o = out[n, orow[f], s:e]
                        j = kbptr[f, blk]
                        end = kbptr[f, blk + 1]
                        macs += (end - j) * nnz * valid
                        while j < end:
                            p = kpid[j]
                            base = xb + kchan[j] * plane + s
                            wa = kwoff[j]
                            if nnz == 4:
                                t0 = tmpl[p, 0]
                                t1 = tmpl[p, 1]
                                t2 = tmpl[p, 2]
                                t3 = tmpl[p, 3]
                                xa0 = xpf[base + t0:]
                                xa1 = xpf[base + t1:]
                                xa2 = xpf[base + t2:]
                                xa3 = xpf[base + t3:]
                                a0 = weights[wa]
                                a1 = weights[wa + 1]
                                a2 = weights[wa + 2]
                                a3 = weights[wa + 3]
                                if j + 3 < end and kpid[j + 3] == p:
                                    bb = xb + kchan[j + 1] * plane + s
                                    cb = xb + kchan[j + 2] * plane + s
                                    db = xb + kchan[j + 3] * plane + s
                                    wb = kwoff[j + 1]
                                    wc = kwoff[j + 2]
                                    wd = kwoff[j + 3]
                                    xb0 = xpf[bb + t0:]
                                    xb1 = xpf[bb + t1:]
                                    xb2 = xpf[bb + t2:]
                                    xb3 = xpf[bb + t3:]
                                    xc0 = xpf[cb + t0:]
                                    xc1 = xpf[cb + t1:]
                                    xc2 = xpf[cb + t2:]
                                    xc3 = xpf[cb + t3:]
                                    xd0 = xpf[db + t0:]
                                    xd1 = xpf[db + t1:]
                                    xd2 = xpf[db + t2:]
                                    xd3 = xpf[db + t3:]
                                    b0 = weights[wb]
                                    b1 = weights[wb + 1]
                                    b2 = weights[wb + 2]
                                    b3 = weights[wb + 3]
                                    c0 = weights[wc]
                                    c1 = weights[wc + 1]
                                    c2 = weights[wc + 2]
                                    c3 = weights[wc + 3]
                                    d0 = weights[wd]
                                    d1 = weights[wd + 1]
                                    d2 = weights[wd + 2]
                                    d3 = weights[wd + 3]
                                    for i in range(m):
                                        o[i] += (((a0 * xa0[i] + a1 * xa1[i] + a2 * xa2[i] + a3 * xa3[i])
                                                  + (b0 * xb0[i] + b1 * xb1[i] + b2 * xb2[i] + b3 * xb3[i]))
                                                 + ((c0 * xc0[i] + c1 * xc1[i] + c2 * xc2[i] + c3 * xc3[i])
                                                    + (d0 * xd0[i] + d1 * xd1[i] + d2 * xd2[i] + d3 * xd3[i])))
                                    j += 4
                                elif j + 1 < end and kpid[j + 1] == p:
                                    bb = xb + kchan[j + 1] * plane + s
                                    wb = kwoff[j + 1]
                                    xb0 = xpf[bb + t0:]
                                    xb1 = xpf[bb + t1:]
                                    xb2 = xpf[bb + t2:]
                                    xb3 = xpf[bb + t3:]
                                    b0 = weights[wb]
                                    b1 = weights[wb + 1]
                                    b2 = weights[wb + 2]
                                    b3 = weights[wb + 3]
                                    for i in range(m):
                                        o[i] += ((a0 * xa0[i] + a1 * xa1[i] + a2 * xa2[i] + a3 * xa3[i])
                                                 + (b0 * xb0[i] + b1 * xb1[i] + b2 * xb2[i] + b3 * xb3[i]))
                                    j += 2
                                else:
                                    for i in range(m):
                                        o[i] += a0 * xa0[i] + a1 * xa1[i] + a2 * xa2[i] + a3 * xa3[i]
                                    j += 1
                            else:
                                for t in range(nnz):
                                    xa = xpf[base + tmpl[p, t]:]
                                    w = weights[wa + t]
                                    for i in range(m):
                                        o[i] += w * xa[i]
                                j += 1
                        if blk == n_blocks - 1:
                            bf = bias[f]
                            for i in range(m):
                                o[i] += bf
    return macs


@_jit
def pattern_strided(xpf, out, batch_stride, plane, wp, stride, ho, wo, unit_lo, unit_hi,
                    kptr, kchan, kpid, kwoff, weights, tmpl, bias, orow):
    """General-stride pattern convolution; ``out`` is (N, F, Ho*Wo)."""
    n_batch = out.shape[0]
    nnz = tmpl.shape[1]
    macs = 0
    for u in range(unit_lo.shape[0]):
        for n in range(n_batch):
            xb = n * batch_stride
            for f in range(unit_lo[u], unit_hi[u]):
                macs += (kptr[f + 1] - kptr[f]) * nnz * ho * wo
                for y in range(ho):
                    o = out[n, orow[f], y * wo:(y + 1) * wo]
                    row = xb + y * stride * wp
                    for j in range(kptr[f], kptr[f + 1]):
                        p = kpid[j]
                        base = row + kchan[j] * plane
                        for t in range(nnz):
                            xa = xpf[base + tmpl[p, t]:]
                            w = weights[kwoff[j] + t]
                            for x in range(wo):
                                o[x] += w * xa[x * stride]
                    bf = bias[f]
                    for x in range(wo):
                        o[x] += bf
    return macs


@_jit
def csr_flat(xpf, out, batch_stride, plane, wp, wo, f_lo, f_hi,
             indptr, indices, values, bias, kh, kw, band):
    """Stride-1 CSR convolution: one shifted AXPY per stored non-zero."""
    n_batch = out.shape[0]
    length = out.shape[2]
    kk = kh * kw
    macs = 0
    for n in range(n_batch):
        xb = n * batch_stride
        for s in range(0, length, band):
            e = min(length, s + band)
            m = e - s
            valid = _valid_positions(s, e, wp, wo)
            for f in range(f_lo, f_hi):
                o = out[n, f, s:e]
                macs += (indptr[f + 1] - indptr[f]) * valid
                for j in range(indptr[f], indptr[f + 1]):
                    idx = indices[j]
                    c = idx // kk
                    r = idx - c * kk
                    ky = r // kw
                    kx = r - ky * kw
                    xa = xpf[xb + c * plane + ky * wp + kx + s:]
                    v = values[j]
                    for i in range(m):
                        o[i] += v * xa[i]
                bf = bias[f]
                for i in range(m):
                    o[i] += bf
    return macs


@_jit
def csr_strided(xpf, out, batch_stride, plane, wp, stride, ho, wo, f_lo, f_hi,
                indptr, indices, values, bias, kh, kw):
    n_batch = out.shape[0]
    kk = kh * kw
    macs = 0
    for n in range(n_batch):
        xb = n * batch_stride
        for f in range(f_lo, f_hi):
            macs += (indptr[f + 1] - indptr[f]) * ho * wo
            for y in range(ho):
                o = out[n, f, y * wo:(y + 1) * wo]
                row = xb + y * stride * wp
                for j in range(indptr[f], indptr[f + 1]):
                    idx = indices[j]
                    c = idx // kk
                    r = idx - c * kk
                    ky = r // kw
                    kx = r - ky * kw
                    xa = xpf[row + c * plane + ky * wp + kx:]
                    v = values[j]
                    for x in range(wo):
                        o[x] += v * xa[x * stride]
                bf = bias[f]
                for x in range(wo):
                    o[x] += bf
    return macs
