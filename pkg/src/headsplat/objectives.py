"""Loss functions and image metrics, all pure and gradient-checkable.

Contains the motion-translator losses (contrastive, CTC text, reconstruction,
smoothness, latent consistency), the renderer losses (image similarity,
attribute hinge, semantic segmentation), and PSNR/SSIM evaluation metrics.
Each differentiable loss has a companion `*_backward` returning the analytic
gradient w.r.t. its continuous inputs; tests verify every one against central
finite differences.
"""

from dataclasses import dataclass

import numpy as np

NEG_INF = -np.inf


@dataclass
class LossWeights:
    """All loss weights and thresholds; defaults are configuration, not claims."""

    lambda_y: float = 1.0      # parameter reconstruction
    lambda_v: float = 1.0      # vertex reconstruction
    lambda_sth: float = 0.5    # motion smoothness
    lambda_lat: float = 0.1    # latent (audio/lip) consistency
    lambda_1: float = 0.8      # L1 image term
    lambda_2: float = 0.0      # perceptual term (pluggable, off by default)
    lambda_3: float = 0.2      # 1 - SSIM image term
    lambda_p: float = 1.0      # local-position hinge
    lambda_s: float = 1.0      # local-scale hinge
    lambda_seg: float = 0.1    # semantic map MSE
    eps_p: float = 1.0         # max allowed |local position| before penalty
    eps_s: float = 0.6         # max allowed local scale before penalty
    tau: float = 0.07          # contrastive temperature

    def validate(self):
        for name in ("lambda_y", "lambda_v", "lambda_sth", "lambda_lat", "lambda_1",
                     "lambda_2", "lambda_3", "lambda_p", "lambda_s", "lambda_seg"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if self.eps_p <= 0 or self.eps_s <= 0:
            raise ValueError("hinge thresholds must be positive")
        if self.tau <= 0:
            raise ValueError("tau must be positive")


# --------------------------------------------------------------------------
# contrastive loss


def info_nce(anchor, positive, negatives, tau: float) -> float:
    """-log( exp(a.p/tau) / (exp(a.p/tau) + sum_i exp(a.n_i/tau)) ).

    The denominator includes the positive term, so the loss is nonnegative.
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    negatives = np.asarray(negatives, dtype=np.float64)
    if negatives.ndim != 2 or negatives.shape[0] < 1:
        raise ValueError("at least one negative is required")
    anchor = np.asarray(anchor, dtype=np.float64)
    positive = np.asarray(positive, dtype=np.float64)
    if anchor.shape != positive.shape or negatives.shape[1] != anchor.shape[0]:
        raise ValueError("feature dimensions differ")
    scores = np.concatenate([[anchor @ positive], negatives @ anchor]) / tau
    m = scores.max()
    lse = m + np.log(np.sum(np.exp(scores - m)))
    return float(lse - scores[0])


def info_nce_backward(anchor, positive, negatives, tau: float):
    """Gradients of info_nce w.r.t. (anchor, positive, negatives)."""
    anchor = np.asarray(anchor, dtype=np.float64)
    positive = np.asarray(positive, dtype=np.float64)
    negatives = np.asarray(negatives, dtype=np.float64)
    scores = np.concatenate([[anchor @ positive], negatives @ anchor]) / tau
    m = scores.max()
    e = np.exp(scores - m)
    w = e / e.sum()
    d_scores = w.copy()
    d_scores[0] -= 1.0
    d_anchor = (d_scores[0] * positive + d_scores[1:] @ negatives) / tau
    d_positive = d_scores[0] * anchor / tau
    d_negatives = np.outer(d_scores[1:], anchor) / tau
    return d_anchor, d_positive, d_negatives


# --------------------------------------------------------------------------
# CTC text loss


def _ctc_extended(target):
    ext = [0]
    for t in target:
        ext.append(int(t))
        ext.append(0)
    return np.asarray(ext, dtype=np.int64)


def _ctc_min_steps(target) -> int:
    repeats = sum(1 for i in range(1, len(target)) if target[i] == target[i - 1])
    return len(target) + repeats


def _logsumexp(values):
    m = np.max(values)
    if m == NEG_INF:
        return NEG_INF
    return m + np.log(np.sum(np.exp(values - m)))


def ctc_alpha(log_probs: np.ndarray, target):
    """Forward lattice over the blank-extended target; returns (alpha, ext).

    alpha[t, s] is the log-probability of all prefixes of length t+1 that end
    in extended state s (emission at t included). Blank has index 0.
    """
    log_probs = np.asarray(log_probs, dtype=np.float64)
    T, V1 = log_probs.shape
    target = list(target)
    if any(not (1 <= c < V1) for c in target):
        raise ValueError("target symbols must lie in [1, vocab]")
    if _ctc_min_steps(target) > T:
        raise ValueError(
            f"target of length {len(target)} is infeasible for {T} steps"
        )
    ext = _ctc_extended(target)
    S = ext.shape[0]
    alpha = np.full((T, S), NEG_INF)
    alpha[0, 0] = log_probs[0, 0]
    if S > 1:
        alpha[0, 1] = log_probs[0, ext[1]]
    for t in range(1, T):
        for s in range(S):
            terms = [alpha[t - 1, s]]
            if s >= 1:
                terms.append(alpha[t - 1, s - 1])
            if s >= 2 and ext[s] != 0 and ext[s] != ext[s - 2]:
                terms.append(alpha[t - 1, s - 2])
            alpha[t, s] = _logsumexp(np.array(terms)) + log_probs[t, ext[s]]
    return alpha, ext


def ctc_loss(log_probs: np.ndarray, target) -> float:
    """Negative log-probability of all alignments collapsing to the target."""
    T = np.asarray(log_probs).shape[0]
    target = list(target)
    if len(target) == 0:
        lp = np.asarray(log_probs, dtype=np.float64)
        return float(-np.sum(lp[:, 0]))
    alpha, ext = ctc_alpha(log_probs, target)
    S = ext.shape[0]
    tails = [alpha[T - 1, S - 1]]
    if S >= 2:
        tails.append(alpha[T - 1, S - 2])
    return float(-_logsumexp(np.array(tails)))


def ctc_loss_backward(log_probs: np.ndarray, target) -> np.ndarray:
    """Gradient of ctc_loss w.r.t. the per-step log-probabilities."""
    log_probs = np.asarray(log_probs, dtype=np.float64)
    T, V1 = log_probs.shape
    target = list(target)
    if len(target) == 0:
        g = np.zeros_like(log_probs)
        g[:, 0] = -1.0
        return g
    alpha, ext = ctc_alpha(log_probs, target)
    S = ext.shape[0]
    beta = np.full((T, S), NEG_INF)
    beta[T - 1, S - 1] = 0.0
    if S >= 2:
        beta[T - 1, S - 2] = 0.0
    for t in range(T - 2, -1, -1):
        for s in range(S):
            terms = [log_probs[t + 1, ext[s]] + beta[t + 1, s]]
            if s + 1 < S:
                terms.append(log_probs[t + 1, ext[s + 1]] + beta[t + 1, s + 1])
            if s + 2 < S and ext[s + 2] != 0 and ext[s + 2] != ext[s]:
                terms.append(log_probs[t + 1, ext[s + 2]] + beta[t + 1, s + 2])
            beta[t, s] = _logsumexp(np.array(terms))
    log_p = _logsumexp(alpha[T - 1, max(S - 2, 0):])
    grad = np.zeros_like(log_probs)
    for t in range(T):
        for s in range(S):
            val = alpha[t, s] + beta[t, s]
            if val == NEG_INF:
                continue
            grad[t, ext[s]] -= np.exp(val - log_p)
    return grad


# --------------------------------------------------------------------------
# motion translator losses


def rec_loss(y_hat, y, v_hat, v, weights: LossWeights) -> float:
    """Parameter + vertex mean-square reconstruction error."""
    y_hat, y = np.asarray(y_hat, dtype=np.float64), np.asarray(y, dtype=np.float64)
    v_hat, v = np.asarray(v_hat, dtype=np.float64), np.asarray(v, dtype=np.float64)
    if y_hat.shape != y.shape or v_hat.shape != v.shape:
        raise ValueError("sequence dimensions differ")
    T, N = y.shape
    K = v.shape[1]
    term_y = weights.lambda_y * np.sum((y - y_hat) ** 2) / (N * T)
    term_v = weights.lambda_v * np.sum((v - v_hat) ** 2) / (K * T)
    return float(term_y + term_v)


def rec_loss_backward(y_hat, y, v_hat, v, weights: LossWeights):
    """Gradients of rec_loss w.r.t. (y_hat, v_hat)."""
    y_hat, y = np.asarray(y_hat, dtype=np.float64), np.asarray(y, dtype=np.float64)
    v_hat, v = np.asarray(v_hat, dtype=np.float64), np.asarray(v, dtype=np.float64)
    T, N = y.shape
    K = v.shape[1]
    d_y_hat = weights.lambda_y * 2.0 * (y_hat - y) / (N * T)
    d_v_hat = weights.lambda_v * 2.0 * (v_hat - v) / (K * T)
    return d_y_hat, d_v_hat


def smooth_loss(y_hat, y, weights: LossWeights) -> float:
    """Penalty on mismatch of frame-to-frame parameter deltas."""
    y_hat, y = np.asarray(y_hat, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if y_hat.shape != y.shape:
        raise ValueError("sequence dimensions differ")
    T, N = y.shape
    if T < 2:
        raise ValueError("smoothness needs at least two frames")
    dy = np.diff(y, axis=0)
    dy_hat = np.diff(y_hat, axis=0)
    return float(weights.lambda_sth * np.sum((dy - dy_hat) ** 2) / (N * T))


def smooth_loss_backward(y_hat, y, weights: LossWeights) -> np.ndarray:
    y_hat, y = np.asarray(y_hat, dtype=np.float64), np.asarray(y, dtype=np.float64)
    T, N = y.shape
    diff = np.diff(y_hat, axis=0) - np.diff(y, axis=0)   # (T-1, N)
    g = np.zeros_like(y_hat)
    g[1:] += diff
    g[:-1] -= diff
    return weights.lambda_sth * 2.0 * g / (N * T)


def latent_consistency(audio_feat, vertices_hat, lip_index_set, lip_encoder_stub, weights: LossWeights) -> float:
    """MSE between audio-side features and lip-reading features.

    Both encoders are supplied by the caller; the audio features arrive
    pre-encoded, the lip encoder maps per-frame lip-region vertices to the
    same feature dimension.
    """
    audio_feat = np.asarray(audio_feat, dtype=np.float64)
    lip_feat = np.asarray(lip_encoder_stub(vertices_hat, lip_index_set), dtype=np.float64)
    if lip_feat.shape != audio_feat.shape:
        raise ValueError("audio and lip feature dimensions differ")
    T, D = audio_feat.shape
    return float(weights.lambda_lat * np.sum((audio_feat - lip_feat) ** 2) / (D * T))


def latent_consistency_backward_from_features(audio_feat, lip_feat, weights: LossWeights) -> np.ndarray:
    """Gradient w.r.t. the lip features (callers chain through their encoder)."""
    audio_feat = np.asarray(audio_feat, dtype=np.float64)
    lip_feat = np.asarray(lip_feat, dtype=np.float64)
    T, D = audio_feat.shape
    return weights.lambda_lat * 2.0 * (lip_feat - audio_feat) / (D * T)


def translator_total(rec: float, smooth: float, latent: float) -> float:
    """Exact sum of the three translator objectives."""
    return rec + smooth + latent


# --------------------------------------------------------------------------
# SSIM / PSNR


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    ax = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(ax * ax) / (2.0 * sigma * sigma))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Separable valid-mode correlation of a (H, W) image with a 1-D kernel."""
    k = g.shape[0]
    win = np.lib.stride_tricks.sliding_window_view(img, k, axis=0)
    rows = np.einsum("iwk,k->iw", win, g)
    win = np.lib.stride_tricks.sliding_window_view(rows, k, axis=1)
    return np.einsum("ijk,k->ij", win, g)


def _filter_adjoint(grid: np.ndarray, g: np.ndarray, out_shape) -> np.ndarray:
    """Adjoint of _filter_valid: scatter window-grid values back to pixels."""
    k = g.shape[0]
    Hp, Wp = grid.shape
    tmp = np.zeros((out_shape[0], Wp))
    for d in range(k):
        tmp[d : d + Hp] += g[d] * grid
    out = np.zeros(out_shape)
    for d in range(k):
        out[:, d : d + Wp] += g[d] * tmp
    return out

_SSIM_C1 = 0.01 ** 2
_SSIM_C2 = 0.03 ** 2


def _ssim_channel(x: np.ndarray, y: np.ndarray, g: np.ndarray):
    ux = _filter_valid(x, g)
    uy = _filter_valid(y, g)
    vx = _filter_valid(x * x, g)
    vy = _filter_valid(y * y, g)
    vxy = _filter_valid(x * y, g)
    sx = vx - ux * ux
    sy = vy - uy * uy
    sxy = vxy - ux * uy
    a1 = 2.0 * ux * uy + _SSIM_C1
    a2 = 2.0 * sxy + _SSIM_C2
    b1 = ux * ux + uy * uy + _SSIM_C1
    b2 = sx + sy + _SSIM_C2
    return (a1 * a2) / (b1 * b2), (ux, uy, sx, sy, sxy, a1, a2, b1, b2)


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean structural similarity, 11x11 Gaussian window sigma=1.5, valid mode."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("image dimensions differ")
    if a.ndim == 2:
        a, b = a[:, :, None], b[:, :, None]
    if a.shape[0] < 11 or a.shape[1] < 11:
        raise ValueError("images must be at least 11x11 for SSIM")
    g = gaussian_window()
    vals = [_ssim_channel(a[:, :, c], b[:, :, c], g)[0] for c in range(a.shape[2])]
    return float(np.mean(vals))


def ssim_backward(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """d(ssim)/da, same shape as a.

    Identical images sit at the SSIM maximum where the true gradient is zero;
    that case returns exact zeros instead of cancellation residue, so
    optimizers see a genuine fixed point.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if np.array_equal(a, b):
        return np.zeros_like(a)
    squeeze = a.ndim == 2
    if squeeze:
        a, b = a[:, :, None], b[:, :, None]
    g = gaussian_window()
    H, W, C = a.shape
    out = np.zeros_like(a)
    n_windows = (H - 10) * (W - 10) * C
    for c in range(C):
        x, y = a[:, :, c], b[:, :, c]
        smap, (ux, uy, sx, sy, sxy, a1, a2, b1, b2) = _ssim_channel(x, y, g)
        up = 1.0 / n_windows
        d_a1 = up * a2 / (b1 * b2)
        d_a2 = up * a1 / (b1 * b2)
        d_b1 = -up * smap / b1
        d_b2 = -up * smap / b2
        d_sxy = 2.0 * d_a2
        d_sx = d_b2
        # raw moments: vx, vxy; sx = vx - ux^2, sxy = vxy - ux uy
        d_ux = 2.0 * uy * d_a1 + 2.0 * ux * d_b1 - 2.0 * ux * d_sx - uy * d_sxy
        d_vx = d_sx
        d_vxy = d_sxy
        out[:, :, c] = (
            _filter_adjoint(d_ux, g, (H, W))
            + 2.0 * x * _filter_adjoint(d_vx, g, (H, W))
            + y * _filter_adjoint(d_vxy, g, (H, W))
        )
    return out[:, :, 0] if squeeze else out


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """Peak signal-to-noise ratio for [0, 1] images, capped at 100 dB."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("image dimensions differ")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return 100.0
    return float(min(10.0 * np.log10(1.0 / mse), 100.0))


# --------------------------------------------------------------------------
# renderer losses


def rgb_loss(rendered: np.ndarray, target: np.ndarray, weights: LossWeights, vgg_fn=None) -> float:
    """lambda_1 * L1 + lambda_2 * perceptual + lambda_3 * (1 - SSIM)."""
    rendered = np.asarray(rendered, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if rendered.shape != target.shape:
        raise ValueError("image dimensions differ")
    loss = weights.lambda_1 * float(np.mean(np.abs(rendered - target)))
    if weights.lambda_2 != 0.0 and vgg_fn is not None:
        loss += weights.lambda_2 * float(vgg_fn(rendered, target))
    if weights.lambda_3 != 0.0:
        loss += weights.lambda_3 * (1.0 - ssim(rendered, target))
    return loss


def rgb_loss_backward(rendered: np.ndarray, target: np.ndarray, weights: LossWeights) -> np.ndarray:
    """Gradient of rgb_loss w.r.t. the rendered image (perceptual term excluded)."""
    rendered = np.asarray(rendered, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    g = weights.lambda_1 * np.sign(rendered - target) / rendered.size
    if weights.lambda_3 != 0.0:
        g = g - weights.lambda_3 * ssim_backward(rendered, target)
    return g


def attr_loss(u_locals: np.ndarray, s_locals: np.ndarray, weights: LossWeights) -> float:
    """Hinge penalties keeping local positions and scales inside thresholds.

    Positions penalize |u| beyond eps_p (symmetric drift bound), scales
    penalize s beyond eps_s; both squared, summed per Gaussian, averaged.
    """
    u_locals = np.asarray(u_locals, dtype=np.float64)
    s_locals = np.asarray(s_locals, dtype=np.float64)
    n = max(u_locals.shape[0], 1)
    hp = np.maximum(0.0, np.abs(u_locals) - weights.eps_p)
    hs = np.maximum(0.0, s_locals - weights.eps_s)
    return float((weights.lambda_p * np.sum(hp * hp) + weights.lambda_s * np.sum(hs * hs)) / n)


def attr_loss_backward(u_locals: np.ndarray, s_locals: np.ndarray, weights: LossWeights):
    u_locals = np.asarray(u_locals, dtype=np.float64)
    s_locals = np.asarray(s_locals, dtype=np.float64)
    n = max(u_locals.shape[0], 1)
    hp = np.maximum(0.0, np.abs(u_locals) - weights.eps_p)
    hs = np.maximum(0.0, s_locals - weights.eps_s)
    d_u = weights.lambda_p * 2.0 * hp * np.sign(u_locals) / n
    d_s = weights.lambda_s * 2.0 * hs / n
    return d_u, d_s


def seg_loss(m_aux: np.ndarray, m_gt: np.ndarray, weights: LossWeights) -> float:
    """Mean squared error between rendered and ground-truth semantic maps."""
    m_aux = np.asarray(m_aux, dtype=np.float64)
    m_gt = np.asarray(m_gt, dtype=np.float64)
    if m_aux.shape != m_gt.shape:
        raise ValueError("semantic map dimensions differ")
    return float(weights.lambda_seg * np.mean((m_aux - m_gt) ** 2))


def seg_loss_backward(m_aux: np.ndarray, m_gt: np.ndarray, weights: LossWeights) -> np.ndarray:
    m_aux = np.asarray(m_aux, dtype=np.float64)
    m_gt = np.asarray(m_gt, dtype=np.float64)
    return weights.lambda_seg * 2.0 * (m_aux - m_gt) / m_aux.size


def renderer_total(rgb: float, attr: float, seg: float) -> float:
    """Exact sum of the three renderer objectives."""
    return rgb + attr + seg
