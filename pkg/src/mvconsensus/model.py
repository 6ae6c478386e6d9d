"""Small differentiable stand-ins for the detection, synthesis and inpainting networks.

* :class:`Detector` scores every cell of an 8x8 grid from fixed per-cell patch
  statistics with one linear map shared by all cells (it sees the 3x3
  neighbourhood of cells), and regresses the cell's box parameters.
* :class:`MaskHead` encodes the 128x128 crop through an 8-unit bottleneck and
  decodes it with per-pixel (locally connected) weights into a foreground image
  and mask logits; the mask also gets a per-pixel colour term.
* :func:`inpaint` hides the expanded box and fills it by Jacobi diffusion. It has
  no parameters; :func:`inpaint_tensor` differentiates the diffusion fixed
  point with respect to the hiding weights, and through them the box.
"""

from __future__ import annotations

import math

import numpy as np
import torch
from scipy import sparse
from scipy.sparse.linalg import splu
from torch import nn

from .bbox import EXPAND, PATCH, BBoxParams, PixelBBox, coverage
from .errors import DegenerateBox
from .proposal_grid import GridSpec2D, ProbMap2D

N_FEATURES = 10
NEIGHBOURHOOD = 9
MIN_BOX_PX = 4.0


def cell_features(image: np.ndarray, spec: GridSpec2D) -> np.ndarray:
    """Ten statistics per cell: mean RGB, RGB variance, mean gradient magnitude
    and mean-RGB contrast against the 8 neighbouring cells. ``(n_cells, 10)``."""
    H, W = image.shape[:2]
    nr, nc = spec.n_row, spec.n_col
    ch, cw = H // nr, W // nc
    blocks = image[: nr * ch, : nc * cw].reshape(nr, ch, nc, cw, 3)
    mean = blocks.mean(axis=(1, 3))
    var = blocks.var(axis=(1, 3))
    gray = image.mean(axis=2)
    gy, gx = np.gradient(gray)
    gmag = np.hypot(gx, gy)[: nr * ch, : nc * cw].reshape(nr, ch, nc, cw).mean(axis=(1, 3))
    pad = np.pad(mean, ((1, 1), (1, 1), (0, 0)))
    cnt = np.pad(np.ones((nr, nc)), 1)
    nsum = np.zeros_like(mean)
    ncnt = np.zeros((nr, nc))
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            if dy == 0 and dx == 0:
                continue
            nsum += pad[1 + dy : 1 + dy + nr, 1 + dx : 1 + dx + nc]
            ncnt += cnt[1 + dy : 1 + dy + nr, 1 + dx : 1 + dx + nc]
    contrast = mean - nsum / ncnt[..., None]
    feats = np.concatenate([mean, var, gmag[..., None], contrast], axis=-1).reshape(nr * nc, N_FEATURES)
    # per-image standardization keeps the linear heads well scaled
    return (feats - feats.mean(axis=0)) / (feats.std(axis=0) + 1e-6)


def neighbourhood_features(feats: np.ndarray, spec: GridSpec2D) -> np.ndarray:
    """Stack each cell's features with its 8 neighbours' (zero padded): ``(n_cells, 90)``."""
    f = feats.reshape(spec.n_row, spec.n_col, -1)
    pad = np.pad(f, ((1, 1), (1, 1), (0, 0)))
    parts = [pad[1 + dy : 1 + dy + spec.n_row, 1 + dx : 1 + dx + spec.n_col] for dy in (-1, 0, 1) for dx in (-1, 0, 1)]
    return np.concatenate(parts, axis=-1).reshape(spec.n_cells, -1)


def image_features(image: np.ndarray, spec: GridSpec2D) -> torch.Tensor:
    return torch.from_numpy(neighbourhood_features(cell_features(image, spec), spec))


def _logit(p: float) -> float:
    return math.log(p / (1 - p))


class Detector(nn.Module):
    """Per-cell linear heads over fixed features.

    Outputs a probability map (softmax over interior cells, border cells 0) and
    per-cell ``(dx, dy, sx, sy)`` squashed into [0, 1]; widths and heights never
    drop below ``MIN_BOX_PX`` pixels.
    """

    def __init__(self, spec: GridSpec2D = GridSpec2D(), init_size: tuple[float, float] = (0.25, 0.35)):
        super().__init__()
        self.spec = spec
        n_in = N_FEATURES * NEIGHBOURHOOD
        self.score = nn.Linear(n_in, 1).double()
        self.box = nn.Linear(n_in, 4).double()
        with torch.no_grad():
            for layer in (self.score, self.box):
                layer.weight.zero_()
                layer.bias.zero_()
            self.box.bias[2] = _logit(self._unfloor(init_size[0], spec.width))
            self.box.bias[3] = _logit(self._unfloor(init_size[1], spec.height))
        self.register_buffer("interior", spec.interior_mask(), persistent=False)

    @staticmethod
    def _unfloor(s: float, size: int) -> float:
        lo = MIN_BOX_PX / size
        return (s - lo) / (1 - lo)

    def forward(self, feats: torch.Tensor) -> tuple[ProbMap2D, torch.Tensor]:
        scores = self.score(feats)[:, 0]
        scores = scores.masked_fill(~self.interior, -math.inf)
        p = torch.softmax(scores, dim=0)
        raw = torch.sigmoid(self.box(feats))
        lo = torch.tensor([0.0, 0.0, MIN_BOX_PX / self.spec.width, MIN_BOX_PX / self.spec.height], dtype=torch.float64)
        field = lo + (1 - lo) * raw
        return ProbMap2D(self.spec, p), field

    def params_at(self, field: torch.Tensor, cell: int) -> BBoxParams:
        dx, dy, sx, sy = field[cell]
        return BBoxParams(cell, dx, dy, sx, sy)


class MaskHead(nn.Module):
    """Crop -> (foreground RGB, mask probability), both ``128 x 128``.

    Layer one pools the crop to 8x8 colours and maps them to an 8-unit code;
    layer two decodes the code with separate weights for every output pixel.
    The foreground sees the crop only through the code, so it cannot copy
    background texture; the mask additionally reads each pixel's own colour.
    ``gain`` rescales the outputs so that the small mask-head learning rate
    still moves the logits over a useful range within a short run.
    """

    def __init__(self, hidden: int = 8, pool: int = 16, gain: float = 10.0, seed: int = 0):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        n_code = 3 * (PATCH // pool) ** 2
        self.pool = pool
        self.gain = gain
        self.enc = nn.Parameter(torch.randn(hidden, n_code, generator=gen, dtype=torch.float64) / math.sqrt(n_code))
        self.enc_b = nn.Parameter(torch.zeros(hidden, dtype=torch.float64))
        self.dec = nn.Parameter(torch.zeros(PATCH * PATCH, 4, hidden, dtype=torch.float64))
        bias = torch.zeros(PATCH * PATCH, 4, dtype=torch.float64)
        bias[:, :3] = 0.5 / gain
        bias[:, 3] = -2.0 / gain
        self.dec_b = nn.Parameter(bias)
        self.color = nn.Parameter(torch.zeros(3, dtype=torch.float64))

    def forward(self, crop: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        x = crop.permute(2, 0, 1).unsqueeze(0)
        pooled = torch.nn.functional.avg_pool2d(x, self.pool).reshape(-1)
        code = torch.tanh(self.enc @ (pooled - 0.5) + self.enc_b)
        out = self.gain * (torch.einsum("pkh,h->pk", self.dec, code) + self.dec_b)
        out = out.reshape(PATCH, PATCH, 4)
        fg = torch.clamp(out[..., :3], 0.0, 1.0)
        logits = out[..., 3] + self.gain * (crop - 0.5) @ self.color
        return fg, torch.sigmoid(logits)


class _Jacobi:
    """Neighbour-mean sweeps over a window with reusable buffers.

    Off-image neighbours are skipped (the mean runs over the neighbours that
    exist), which is a zero-flux condition at the image border.
    """

    def __init__(self, shape: tuple[int, int], channels: int):
        h, w = shape
        self.pad = np.zeros((h + 2, w + 2, channels))
        one = np.pad(np.ones((h, w)), 1)
        n = one[:-2, 1:-1] + one[2:, 1:-1] + one[1:-1, :-2] + one[1:-1, 2:]
        self.inv_n = (1.0 / n)[..., None]
        self.out = np.empty((h, w, channels))

    def __call__(self, a: np.ndarray) -> np.ndarray:
        p, out = self.pad, self.out
        p[1:-1, 1:-1] = a
        np.add(p[:-2, 1:-1], p[2:, 1:-1], out=out)
        out += p[1:-1, :-2]
        out += p[1:-1, 2:]
        out *= self.inv_n
        return out


def _interp_init(win: np.ndarray, hole: np.ndarray) -> np.ndarray:
    """Average of row-wise and column-wise linear interpolation across the hole."""
    out = win.copy()
    known = ~hole
    acc = np.zeros_like(win)
    cnt = np.zeros(hole.shape)
    for axis in (0, 1):
        a = np.moveaxis(win, axis, 0)
        kn = np.moveaxis(known, axis, 0)
        res = np.zeros_like(a)
        ok = np.zeros(kn.shape, dtype=bool)
        idx = np.arange(a.shape[0])
        for j in range(a.shape[1]):
            k = np.flatnonzero(kn[:, j])
            if k.size == 0:
                continue
            for ch in range(a.shape[2]):
                res[:, j, ch] = np.interp(idx, k, a[k, j, ch])
            ok[:, j] = True
        acc += np.moveaxis(res * ok[..., None], 0, axis)
        cnt += np.moveaxis(ok, 0, axis)
    fill = np.where(cnt[..., None] > 0, acc / np.maximum(cnt, 1)[..., None], win[known].mean(axis=0) if known.any() else 0.5)
    out[hole] = fill[hole]
    return out


def _windows(m: np.ndarray):
    """Bounding window of ``m > 0`` grown by a one-pixel ring (clipped to the image)."""
    ys = np.flatnonzero((m > 0).any(axis=1))
    xs = np.flatnonzero((m > 0).any(axis=0))
    if ys.size == 0:
        return None
    H, W = m.shape
    return slice(max(0, ys[0] - 1), min(H, ys[-1] + 2)), slice(max(0, xs[0] - 1), min(W, xs[-1] + 2))


def fill_soft(image: np.ndarray, m: np.ndarray, tol: float = 1e-4, max_sweeps: int = 500):
    """Jacobi iteration of ``u = (1 - m) * image + m * mean_of_neighbours(u)``.

    ``m`` is a hiding weight per pixel: 1 hides the pixel completely, 0 keeps
    it. Returns the filled image and the window that was solved (or None).
    """
    out = image.copy()
    win_sl = _windows(m)
    if win_sl is None:
        return out, None
    win = image[win_sl]
    mw = m[win_sl][..., None]
    hole = mw[..., 0] > 0
    if hole.all():
        # nothing to diffuse from: fall back to the image mean
        out[win_sl] = (1 - mw) * win + mw * image.mean(axis=(0, 1))
        return out, None
    sweep = _Jacobi(hole.shape, win.shape[2])
    base = (1 - mw) * win
    u = _interp_init(win, hole)
    for _ in range(max_sweeps):
        new = base + mw * sweep(u)
        step = np.abs(new - u).max()
        u = new
        if step < tol:
            break
    out[win_sl] = u
    return out, (win_sl, sweep.inv_n)


def _neighbour_mean_matrix(inv_n: np.ndarray) -> sparse.csr_matrix:
    """Sparse N with ``(N u)_p`` the mean of p's in-window 4-neighbours."""
    h, w = inv_n.shape[:2]
    idx = np.arange(h * w).reshape(h, w)
    pairs = [(idx[:-1], idx[1:]), (idx[1:], idx[:-1]), (idx[:, :-1], idx[:, 1:]), (idx[:, 1:], idx[:, :-1])]
    rows = np.concatenate([a.ravel() for a, _ in pairs])
    cols = np.concatenate([b.ravel() for _, b in pairs])
    return sparse.csr_matrix((inv_n.ravel()[rows], (rows, cols)), shape=(h * w, h * w))


class _SoftFill(torch.autograd.Function):
    """Differentiable in the hiding weights. The fill is the fixed point
    ``u = (1 - m) I + m N u``, so the backward pass solves the adjoint system
    ``(Id - N^T diag(m)) lam = g`` with a sparse LU factorization and returns
    ``(N u - I) * lam`` summed over channels."""

    @staticmethod
    def forward(ctx, m, image, tol, max_sweeps):
        m_np = m.detach().numpy()
        out, info = fill_soft(image, m_np, tol, max_sweeps)
        ctx.info = info
        ctx.arrays = (image, out, m_np)
        return torch.from_numpy(out)

    @staticmethod
    def backward(ctx, grad_out):
        image, out, m_np = ctx.arrays
        grad_m = np.zeros_like(m_np)
        if ctx.info is not None:
            win_sl, inv_n = ctx.info
            g = grad_out.numpy()[win_sl]
            h, w, k = g.shape
            N = _neighbour_mean_matrix(inv_n)
            A_t = sparse.identity(h * w, format="csc") - (N.T @ sparse.diags(m_np[win_sl].ravel())).tocsc()
            lam = splu(A_t).solve(np.ascontiguousarray(g.reshape(h * w, k))).reshape(h, w, k)
            nu = (N @ out[win_sl].reshape(h * w, k)).reshape(h, w, k)
            grad_m[win_sl] = ((nu - image[win_sl]) * lam).sum(axis=-1)
        return torch.from_numpy(grad_m), None, None, None


def hiding_weights(bbox: PixelBBox, height: int, width: int, factor: float = EXPAND) -> torch.Tensor:
    """Fraction of each pixel covered by the expanded box."""
    cu, cv, w, h = bbox.as_tuple()
    if w < 1 or h < 1:
        raise DegenerateBox(f"box {w:.3f}x{h:.3f} px")
    return coverage(bbox.expanded(factor), height, width)


def inpaint(image: np.ndarray, bbox: PixelBBox, tol: float = 1e-4, max_sweeps: int = 500, factor: float = EXPAND) -> np.ndarray:
    """Fill the expanded box by repeated neighbour averaging (Jacobi sweeps).

    Pixels partly covered by the expanded box are hidden in proportion to
    their coverage. Starts from linear interpolation across the hole and
    sweeps until the largest update falls below ``tol`` or ``max_sweeps`` is
    reached. Pixels outside the box are returned unchanged.
    """
    image = np.asarray(image, dtype=np.float64)
    H, W = image.shape[:2]
    m = hiding_weights(bbox.detach(), H, W, factor).numpy()
    return fill_soft(image, m, tol, max_sweeps)[0]


def inpaint_tensor(image: np.ndarray, bbox: PixelBBox, tol: float = 1e-4, max_sweeps: int = 500, factor: float = EXPAND) -> torch.Tensor:
    """:func:`inpaint` as a torch tensor that is differentiable in the box.

    The fill itself has no parameters; gradients reach the box through the
    hiding weights.
    """
    image = np.asarray(image, dtype=np.float64)
    H, W = image.shape[:2]
    m = hiding_weights(bbox, H, W, factor)
    return _SoftFill.apply(m, image, tol, max_sweeps)
