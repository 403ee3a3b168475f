"""Selective state-space recurrence and the (bidirectional) Mamba block.

Layout conventions: sequences are ``(B, C, L)`` (batch, channels, time); the
leading batch axis may be omitted.  The state matrix is diagonal, stored as
``A`` with shape ``(E, N)`` (channels x state size), and the input-dependent
``B``/``C`` have shape ``(B, N, L)``.

The recurrence per channel e and state index n is

    h[t] = exp(dt[t] * a) * h[t-1] + (expm1(dt[t] * a) / a) * B[t] * u[t]
    y[t] = sum_n C[t] * h[t]

with ``h[-1] = 0`` (zero-order-hold discretization).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from . import autodiff as ad
from .autodiff import Tensor

SERIES_EPS = 1e-6


def _phi(x: np.ndarray) -> np.ndarray:
    """expm1(x)/x with the series value near 0."""
    small = np.abs(x) < SERIES_EPS
    safe = np.where(small, 1.0, x)
    return np.where(small, 1.0 + 0.5 * x, np.expm1(safe) / safe)


def discretize(a, B, dt):
    """Zero-order hold for diagonal ``a``: returns ``(A_bar, B_bar)``.

    ``A_bar = exp(dt*a)``; ``B_bar = (exp(dt*a) - 1)/a * B`` which tends to
    ``dt*B`` as ``dt*a -> 0``.  Arguments broadcast against each other.
    """
    a = np.asarray(a, dtype=float)
    dt = np.asarray(dt, dtype=float)
    if np.any(dt <= 0):
        raise ValueError("step size dt must be positive")
    x = dt * a
    return np.exp(x), dt * _phi(x) * np.asarray(B, dtype=float)


# ---------------------------------------------------------------------------
# fused scan op
# ---------------------------------------------------------------------------


def _decay(dt_b, A):
    """exp(dt * a) for one batch item, shape (E, L, N)."""
    return np.exp(dt_b[:, :, None] * A[:, None, :])


@njit(cache=True, inline="always")
def _gain(d, a, ab):
    # (exp(d*a) - 1)/a, series form near d*a = 0
    x = d * a
    if abs(x) < SERIES_EPS:
        return d * (1.0 + 0.5 * x)
    return (ab - 1.0) / a


@njit(cache=True)
def _scan_fwd_kernel(abar, dt, A, u, B, C, h0, y, hL):
    # one batch item: abar (E, L, N); dt, u, y (E, L); B, C (L, N); h0, hL (E, N)
    E, L, N = abar.shape
    h = np.empty(N, dtype=abar.dtype)
    for e in range(E):
        for n in range(N):
            h[n] = h0[e, n]
        for t in range(L):
            uu = u[e, t]
            d = dt[e, t]
            acc = 0.0
            for n in range(N):
                ab = abar[e, t, n]
                h[n] = ab * h[n] + _gain(d, A[e, n], ab) * B[t, n] * uu
                acc += C[t, n] * h[n]
            y[e, t] = acc
        for n in range(N):
            hL[e, n] = h[n]


@njit(cache=True)
def _scan_bwd_kernel(gy, abar, dt, A, u, B, C, h0, gu, gdt, gA, gB, gC, gh0):
    E, L, N = abar.shape
    hs = np.empty((L + 1, N), dtype=abar.dtype)
    r = np.empty(N, dtype=abar.dtype)
    for e in range(E):
        for n in range(N):
            hs[0, n] = h0[e, n]
        for t in range(L):
            uu = u[e, t]
            d = dt[e, t]
            for n in range(N):
                ab = abar[e, t, n]
                hs[t + 1, n] = ab * hs[t, n] + _gain(d, A[e, n], ab) * B[t, n] * uu
        # adjoint sweep; r carries abar[t+1] * lam[t+1]
        for n in range(N):
            r[n] = 0.0
        for t in range(L - 1, -1, -1):
            uu = u[e, t]
            d = dt[e, t]
            g = gy[e, t]
            su = 0.0
            sd = 0.0
            for n in range(N):
                a = A[e, n]
                ab = abar[e, t, n]
                f = _gain(d, a, ab)
                bb = B[t, n]
                lam = g * C[t, n] + r[n]
                gC[t, n] += g * hs[t + 1, n]
                gab = lam * hs[t, n]
                gf = lam * bb * uu
                su += lam * f * bb
                gB[t, n] += lam * f * uu
                # abar = exp(d*a); f = d * phi(d*a) with phi(x) = expm1(x)/x
                sd += (gab * a + gf) * ab
                x = d * a
                if abs(x) < 1e-3:
                    dphi = 0.5 + x / 3.0 + x * x / 8.0
                else:
                    dphi = (x * ab - (ab - 1.0)) / (x * x)
                gA[e, n] += gab * ab * d + gf * d * d * dphi
                r[n] = ab * lam
            gu[e, t] = su
            gdt[e, t] = sd
        for n in range(N):
            gh0[e, n] = r[n]


def _run_scan(u, dt, A, B, C, h0=None):
    nb, E, L = u.shape
    dtype = np.result_type(u, dt, A, B, C)
    u, dt, A, B, C = (np.ascontiguousarray(t, dtype=dtype) for t in (u, dt, A, B, C))
    N = A.shape[1]
    h0 = np.zeros((nb, E, N), dtype=dtype) if h0 is None else np.ascontiguousarray(h0, dtype=dtype)
    y = np.empty((nb, E, L), dtype=dtype)
    hL = np.empty_like(h0)
    Bt = np.ascontiguousarray(B.transpose(0, 2, 1))
    Ct = np.ascontiguousarray(C.transpose(0, 2, 1))
    for b in range(nb):
        _scan_fwd_kernel(_decay(dt[b], A), dt[b], A, u[b], Bt[b], Ct[b], h0[b], y[b], hL[b])
    return y, hL


def _run_scan_backward(gy, u, dt, A, B, C, h0):
    nb, E, L = u.shape
    gu, gdt = np.empty_like(u), np.empty_like(dt)
    gA = np.zeros_like(A)
    Bt = np.ascontiguousarray(B.transpose(0, 2, 1))
    Ct = np.ascontiguousarray(C.transpose(0, 2, 1))
    gB, gC = np.zeros_like(Bt), np.zeros_like(Ct)
    gh0 = np.empty_like(h0)
    for b in range(nb):
        _scan_bwd_kernel(gy[b], _decay(dt[b], A), dt[b], A, u[b], Bt[b], Ct[b], h0[b],
                         gu[b], gdt[b], gA, gB[b], gC[b], gh0[b])
    return gu, gdt, gA, gB.transpose(0, 2, 1), gC.transpose(0, 2, 1), gh0


def scan(u, dt, A, B, C, h0=None) -> Tensor:
    """Differentiable selective scan.

    u, dt: (B, E, L) or (E, L); A: (E, N); B, C: (B, N, L) or (N, L);
    optional initial state h0: (B, E, N).  Returns y with the shape of ``u``.
    Only the inputs are kept for the backward pass, which recomputes the
    states one channel at a time.
    """
    u, dt, A, B, C = (ad._as_tensor(t) for t in (u, dt, A, B, C))
    squeeze = u.ndim == 2
    ud, dtd, Bd, Cd = (t.data[None] if squeeze else t.data for t in (u, dt, B, C))
    Ad = A.data
    if ud.shape != dtd.shape:
        raise ValueError(f"scan: u {u.shape} and dt {dt.shape} differ")
    if Ad.ndim != 2 or Ad.shape[0] != ud.shape[1]:
        raise ValueError(f"scan: A {A.shape} does not match {ud.shape[1]} channels")
    want = (ud.shape[0], Ad.shape[1], ud.shape[2])
    if Bd.shape != want or Cd.shape != want:
        raise ValueError(f"scan: B {B.shape} / C {C.shape} should be {want}")
    parents = [u, dt, A, B, C]
    h0d = None
    if h0 is not None:
        h0 = ad._as_tensor(h0)
        h0d = h0.data
        parents.append(h0)
    y, _ = _run_scan(ud, dtd, Ad, Bd, Cd, h0d)
    dtype = y.dtype

    def bw(g):
        g3 = np.ascontiguousarray(g[None] if squeeze else g, dtype=dtype)
        args = [np.ascontiguousarray(t, dtype=dtype) for t in (ud, dtd, Ad, Bd, Cd)]
        h0a = np.zeros((ud.shape[0], ud.shape[1], Ad.shape[1]), dtype=dtype) if h0d is None else \
            np.ascontiguousarray(h0d, dtype=dtype)
        gu, gdt, gA, gB, gC, gh0 = _run_scan_backward(g3, *args, h0a)
        if squeeze:
            gu, gdt, gB, gC = gu[0], gdt[0], gB[0], gC[0]
        res = [gu, gdt, gA, gB, gC]
        if h0 is not None:
            res.append(gh0)
        return tuple(res)

    return ad._make(y[0] if squeeze else y, tuple(parents), bw)


def scan_chunked(u, dt, A, B, C, chunk: int) -> np.ndarray:
    """The same recurrence evaluated chunk-parallel (forward only).

    All chunks are scanned together from a zero state (as one enlarged
    batch).  The true boundary states are then carried chunk to chunk and
    their contribution, decayed by the running product of the per-step
    decays, is added to each chunk's outputs.
    """
    if chunk < 1:
        raise ValueError("chunk must be >= 1")
    u, dt, B, C, A = (np.asarray(t) for t in (u, dt, B, C, A))
    squeeze = u.ndim == 2
    if squeeze:
        u, dt, B, C = u[None], dt[None], B[None], C[None]
    nb, E, L = u.shape
    N = A.shape[1]
    if chunk >= L:
        y, _ = _run_scan(u, dt, A, B, C)
        return y[0] if squeeze else y
    nc = -(-L // chunk)
    pad = nc * chunk - L

    def blocks(arr):
        # (nb, C, L) -> (nc * nb, C, chunk), chunk-major
        if pad:
            arr = np.concatenate([arr, np.zeros(arr.shape[:2] + (pad,), dtype=arr.dtype)], axis=2)
        arr = arr.reshape(arr.shape[:2] + (nc, chunk))
        return np.ascontiguousarray(arr.transpose(2, 0, 1, 3).reshape((nc * nb,) + arr.shape[1:2] + (chunk,)))

    ul, dtl, Bl, Cl = blocks(u), blocks(dt), blocks(B), blocks(C)
    # padded tail steps have dt = 0, so they neither decay nor drive the state
    yl, hl = _run_scan(ul, dtl, A, Bl, Cl)
    yl = yl.reshape(nc, nb, E, chunk)
    hl = hl.reshape(nc, nb, E, N)
    dtb = dtl.reshape(nc, nb, E, chunk)
    Cb = Cl.reshape(nc, nb, N, chunk)
    y = np.empty_like(yl)
    y[0] = yl[0]
    carry = hl[0]
    for c in range(1, nc):
        # decay[b, e, n, t] = prod_{s <= t} exp(dt[s] * a[e, n]) within the chunk
        decay = np.exp(np.cumsum(dtb[c], axis=-1)[:, :, None, :] * A[None, :, :, None])
        y[c] = yl[c] + np.einsum("bent,bnt->bet", decay * carry[..., None], Cb[c])
        carry = hl[c] + decay[..., -1] * carry
    y = y.transpose(1, 2, 0, 3).reshape(nb, E, nc * chunk)[:, :, :L]
    return y[0] if squeeze else np.ascontiguousarray(y)


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------


def _uniform(rng, shape, fan_in, dtype):
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


@dataclass
class SSMParams:
    """Selective SSM parameters for ``channels`` inner channels.

    ``A`` is stored as ``A_log`` with ``A = -exp(A_log)`` so the diagonal
    stays negative under any update.
    """

    A_log: Tensor  # (E, N)
    x_proj: Tensor  # (R + 2N, E): rows give dt_low, B, C
    dt_proj: Tensor  # (E, R)
    dt_bias: Tensor  # (E,)
    D: Tensor  # (E,) skip term
    state_dim: int
    dt_rank: int

    @property
    def channels(self) -> int:
        return self.A_log.shape[0]

    def A(self) -> Tensor:
        return ad.neg(ad.exp(self.A_log))

    def tensors(self) -> dict[str, Tensor]:
        return {
            "A_log": self.A_log,
            "x_proj": self.x_proj,
            "dt_proj": self.dt_proj,
            "dt_bias": self.dt_bias,
            "D": self.D,
        }


def init_ssm(rng: np.random.Generator, channels: int, state_dim: int, dt_rank: int | None = None,
             dt_min: float = 1e-2, dt_max: float = 1e-1, dtype=np.float64) -> SSMParams:
    R = dt_rank or max(1, math.ceil(channels / 16))
    A_log = np.log(np.tile(np.arange(1, state_dim + 1, dtype=np.float64), (channels, 1)))
    dt = np.exp(rng.uniform(math.log(dt_min), math.log(dt_max), size=channels))
    dt_bias = dt + np.log(-np.expm1(-dt))  # inverse softplus
    return SSMParams(
        A_log=Tensor(A_log.astype(dtype), requires_grad=True),
        x_proj=Tensor(_uniform(rng, (R + 2 * state_dim, channels), channels, dtype), requires_grad=True),
        dt_proj=Tensor(_uniform(rng, (channels, R), R, dtype), requires_grad=True),
        dt_bias=Tensor(dt_bias.astype(dtype), requires_grad=True),
        D=Tensor(np.ones(channels, dtype=dtype), requires_grad=True),
        state_dim=state_dim,
        dt_rank=R,
    )


def ssm_inputs(x: Tensor, p: SSMParams):
    """Input-dependent (dt, B, C) from ``x`` of shape (B, E, L)."""
    R, N = p.dt_rank, p.state_dim
    proj = ad.matmul(p.x_proj, x)  # (B, R+2N, L)
    dt_low = proj[:, :R]
    Bm = proj[:, R : R + N]
    Cm = proj[:, R + N :]
    dt = ad.softplus(ad.add(ad.matmul(p.dt_proj, dt_low), p.dt_bias.reshape(-1, 1)))
    return dt, Bm, Cm


def _batched(x):
    x = ad._as_tensor(x)
    return (ad.reshape(x, (1,) + x.shape), True) if x.ndim == 2 else (x, False)


def selective_scan(x, p: SSMParams) -> Tensor:
    """y = scan(x; dt(x), A, B(x), C(x)), without the skip term."""
    xb, squeeze = _batched(x)
    dt, Bm, Cm = ssm_inputs(xb, p)
    y = scan(xb, dt, p.A(), Bm, Cm)
    return ad.reshape(y, y.shape[1:]) if squeeze else y


def chunked_scan(x, p: SSMParams, chunk: int) -> Tensor:
    """Chunk-parallel evaluation of :func:`selective_scan` (no gradient)."""
    with ad.no_grad():
        xb, squeeze = _batched(x)
        dt, Bm, Cm = ssm_inputs(xb, p)
        y = scan_chunked(xb.data, dt.data, p.A().data, Bm.data, Cm.data, chunk)
    return Tensor(y[0] if squeeze else y)


@dataclass
class MambaBlockParams:
    norm_w: Tensor  # (D,)
    in_proj: Tensor  # (2E, D): main rows then gate rows
    conv_k: Tensor  # (E, K) depthwise, causal
    conv_b: Tensor  # (E,)
    ssm: SSMParams
    out_proj: Tensor  # (D, E)
    expand: int = 2
    norm_eps: float = 1e-5

    def tensors(self) -> dict[str, Tensor]:
        out = {
            "norm_w": self.norm_w,
            "in_proj": self.in_proj,
            "conv_k": self.conv_k,
            "conv_b": self.conv_b,
            "out_proj": self.out_proj,
        }
        out.update({f"ssm.{k}": v for k, v in self.ssm.tensors().items()})
        return out


def init_mamba_block(rng: np.random.Generator, d_model: int, state_dim: int = 16, expand: int = 2,
                     conv_kernel: int = 4, dtype=np.float64) -> MambaBlockParams:
    E = expand * d_model
    return MambaBlockParams(
        norm_w=Tensor(np.ones(d_model, dtype=dtype), requires_grad=True),
        in_proj=Tensor(_uniform(rng, (2 * E, d_model), d_model, dtype), requires_grad=True),
        conv_k=Tensor(_uniform(rng, (E, conv_kernel), conv_kernel, dtype), requires_grad=True),
        conv_b=Tensor(_uniform(rng, (E,), conv_kernel, dtype), requires_grad=True),
        ssm=init_ssm(rng, E, state_dim, dtype=dtype),
        out_proj=Tensor(_uniform(rng, (d_model, E), E, dtype), requires_grad=True),
        expand=expand,
    )


def rms_norm(x: Tensor, w: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the channel axis (axis 1 of (B, D, L))."""
    ms = ad.mean(ad.mul(x, x), axis=1, keepdims=True)
    return ad.mul(ad.mul(x, ad.power(ad.add(ms, eps), -0.5)), w.reshape(-1, 1))


def mamba_block(x, p: MambaBlockParams) -> Tensor:
    """Residual Mamba block; output shape equals input shape (B?, D, L).

    norm -> (main, gate) projections -> causal depthwise conv + SiLU ->
    selective scan (+ skip) -> * SiLU(gate) -> output projection -> + x
    """
    xb, squeeze = _batched(x)
    E = p.in_proj.shape[0] // 2
    xn = rms_norm(xb, p.norm_w, p.norm_eps)
    xz = ad.matmul(p.in_proj, xn)  # (B, 2E, L)
    main = xz[:, :E]
    gate = xz[:, E:]
    u = ad.silu(ad.depthwise_conv1d(main, p.conv_k, p.conv_b, padding="causal"))
    dt, Bm, Cm = ssm_inputs(u, p.ssm)
    y = scan(u, dt, p.ssm.A(), Bm, Cm)
    y = ad.add(y, ad.mul(u, p.ssm.D.reshape(-1, 1)))
    y = ad.mul(y, ad.silu(gate))
    out = ad.add(xb, ad.matmul(p.out_proj, y))
    return ad.reshape(out, out.shape[1:]) if squeeze else out


def bmamba(x, fwd: MambaBlockParams, bwd: MambaBlockParams) -> Tensor:
    """Forward block plus time-reversed backward block, fused by summation."""
    x = ad._as_tensor(x)
    f = mamba_block(x, fwd)
    b = ad.reverse_time(mamba_block(ad.reverse_time(x), bwd))
    return ad.add(f, b)


@dataclass
class BMambaParams:
    fwd: MambaBlockParams
    bwd: MambaBlockParams = field(repr=False)

    def tensors(self) -> dict[str, Tensor]:
        out = {f"fwd.{k}": v for k, v in self.fwd.tensors().items()}
        out.update({f"bwd.{k}": v for k, v in self.bwd.tensors().items()})
        return out


def init_bmamba(rng, d_model, state_dim=16, expand=2, conv_kernel=4, dtype=np.float64) -> BMambaParams:
    return BMambaParams(
        fwd=init_mamba_block(rng, d_model, state_dim, expand, conv_kernel, dtype),
        bwd=init_mamba_block(rng, d_model, state_dim, expand, conv_kernel, dtype),
    )
