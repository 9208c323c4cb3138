"""Kinematic-prior objectives for the two-tier router.

Loss suite: physically-grounded load balancing, masked temporal routing
consistency, capacity-predictor BCE with EMA quantile thresholds, sub-expert
anti-collapse stabilizer, flow-matching regression target, and the weighted
total. Analytic gradients are implemented for the small linear parameter sets
(gate refinement, predictor) and verified with central finite differences;
there is no general autodiff here.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field, replace

import numpy as np

from .errors import EmptyProbs, NonFiniteGradient, ShapeMismatch
from .kva_field import MODALITY_CHANNELS, MODALITIES, KvaField
from .routing import N_EXPERTS, N_SUB, RoutingDecision, avg_pool, softmax


@dataclass(frozen=True)
class RoutingStats:
    """Realized tier-1 routing load: l_i = f_i * Pbar_i."""

    f: np.ndarray  # fraction of tokens whose top-1 pick is expert i
    Pbar: np.ndarray  # mean soft probability per expert
    load: np.ndarray


def routing_stats(P: np.ndarray) -> RoutingStats:
    flat = P.reshape(-1, N_EXPERTS)
    top1 = flat.argmax(axis=-1)
    f = np.bincount(top1, minlength=N_EXPERTS) / flat.shape[0]
    Pbar = flat.mean(axis=0)
    return RoutingStats(f=f, Pbar=Pbar, load=f * Pbar)


@dataclass(frozen=True)
class PhysicalPrior:
    """Per-token modality energies and the normalized frame-level target."""

    pi: np.ndarray  # (5,) normalized energy shares
    e: np.ndarray  # (H', W', 5) per-token energies


def physical_prior(field: KvaField, stride: int = 4) -> PhysicalPrior:
    """Modality energy of the field pooled to the router grid.

    e = [||sem||_2, |dep|, |rot|, ||vel||_2, |acc|] per token; pi is the
    normalized token-mean energy (uniform if the field is all zero).
    """
    pooled = avg_pool(field.channels, stride)
    e = np.stack([
        np.linalg.norm(pooled[..., MODALITY_CHANNELS["sem"]], axis=-1),
        np.abs(pooled[..., MODALITY_CHANNELS["dep"][0]]),
        np.abs(pooled[..., MODALITY_CHANNELS["rot"][0]]),
        np.linalg.norm(pooled[..., MODALITY_CHANNELS["vel"]], axis=-1),
        np.abs(pooled[..., MODALITY_CHANNELS["acc"][0]]),
    ], axis=-1)
    energy = e.mean(axis=(0, 1))
    total = energy.sum()
    if total == 0:
        pi = np.full(N_EXPERTS, 1.0 / N_EXPERTS)
    else:
        pi = energy / total
    return PhysicalPrior(pi=pi, e=e)


def kp_alb_loss(stats: RoutingStats, prior: PhysicalPrior) -> float:
    """Mean squared gap between realized load and the physical target.

    The target pi is a constant for gradient purposes (stop-gradient)."""
    return float(np.mean((stats.load - prior.pi) ** 2))


def src_loss(R: np.ndarray, m_tool: np.ndarray) -> float:
    """Masked, normalized temporal squared difference of routing probabilities.

    R: (T, H', W', 5); m_tool: (T, H', W') binary. Zero for T=1 or an empty
    mask over frames t >= 1."""
    R = np.asarray(R, dtype=float)
    m_tool = np.asarray(m_tool, dtype=float)
    if R.shape[:-1] != m_tool.shape:
        raise ShapeMismatch(f"R {R.shape} vs mask {m_tool.shape}")
    T = R.shape[0]
    if T < 2:
        return 0.0
    diff2 = ((R[1:] - R[:-1]) ** 2).sum(axis=-1)  # (T-1, H', W')
    mask = m_tool[1:]
    denom = N_EXPERTS * mask.sum()
    if denom == 0:
        return 0.0
    return float((mask * diff2).sum() / denom)


def _sigmoid(z):
    return np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))),
                    np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))


def cp_loss(predictor_logits: np.ndarray, A: np.ndarray) -> float:
    """BCE-with-logits between predictor logits and the (detached) routing
    mask, via the numerically stable log-sum-exp form."""
    z = np.asarray(predictor_logits, dtype=float)
    A = np.asarray(A, dtype=float)
    if z.shape != A.shape:
        raise ShapeMismatch(f"logits {z.shape} vs mask {A.shape}")
    per = np.maximum(z, 0) - z * A + np.log1p(np.exp(-np.abs(z)))
    return float(per.mean())


@dataclass(frozen=True)
class PredictorState:
    """Capacity predictor: linear map from detached tokens to expert logits,
    plus EMA-tracked per-expert decision thresholds."""

    w: np.ndarray  # (C, 5)
    b: np.ndarray  # (5,)
    tau: np.ndarray  # (5,) thresholds in [0, 1]
    beta: float = 0.95

    def __post_init__(self):
        if not (0 < self.beta < 1):
            raise ValueError("beta must be in (0, 1)")


def init_predictor(seed=0, c=16, scale=0.3) -> PredictorState:
    rng = np.random.default_rng(seed)
    return PredictorState(w=rng.normal(0, scale / np.sqrt(c), size=(c, N_EXPERTS)),
                          b=np.zeros(N_EXPERTS), tau=np.full(N_EXPERTS, 0.5))


def predictor_logits(state: PredictorState, tokens: np.ndarray) -> np.ndarray:
    """Logits on the router grid; tokens are treated as detached inputs."""
    return tokens @ state.w + state.b


QUANTILE_CLAMP = (0.01, 0.99)


def update_thresholds(state: PredictorState, probs: np.ndarray,
                      a_bar: np.ndarray) -> PredictorState:
    """EMA of expert-wise quantiles: tau_i <- beta*tau_i + (1-beta)*Q_{1-a_i}.

    The quantile level is clamped; the update runs even for experts routed to
    nearly all or no tokens, so starved experts keep tracking thresholds."""
    probs = np.asarray(probs, dtype=float).reshape(-1, N_EXPERTS)
    if probs.shape[0] == 0:
        raise EmptyProbs("no probabilities to take quantiles over")
    a_bar = np.asarray(a_bar, dtype=float).reshape(N_EXPERTS)
    level = np.clip(1.0 - a_bar, *QUANTILE_CLAMP)
    q = np.array([np.quantile(probs[:, i], level[i]) for i in range(N_EXPERTS)])
    tau = state.beta * state.tau + (1 - state.beta) * q
    return replace(state, tau=tau)


def sub_stabilizer_loss(f_sub: np.ndarray, p_sub: np.ndarray) -> float:
    """Anti-collapse penalty for the tier-2 routers:
    (1/5) * sum_m 3 * sum_s f_{m,s} * p_{m,s}."""
    f_sub = np.asarray(f_sub, dtype=float).reshape(N_EXPERTS, N_SUB)
    p_sub = np.asarray(p_sub, dtype=float).reshape(N_EXPERTS, N_SUB)
    return float(np.mean(N_SUB * (f_sub * p_sub).sum(axis=1)))


def sub_routing_stats(decision: RoutingDecision):
    """Hard selection fractions and mean soft probabilities per modality."""
    sel = decision.inner_sel.reshape(-1, N_EXPERTS)
    probs = decision.inner_probs.reshape(-1, N_EXPERTS, N_SUB)
    n = sel.shape[0]
    f_sub = np.zeros((N_EXPERTS, N_SUB))
    for m in range(N_EXPERTS):
        f_sub[m] = np.bincount(sel[:, m], minlength=N_SUB) / n
    return f_sub, probs.mean(axis=0)


def flow_matching_loss(pred, x0, x1, sigma_min=0.0) -> float:
    """MSE against the straight-path velocity target (1 - sigma_min)*x1 - x0."""
    pred = np.asarray(pred, dtype=float)
    x0 = np.asarray(x0, dtype=float)
    x1 = np.asarray(x1, dtype=float)
    if not (pred.shape == x0.shape == x1.shape):
        raise ShapeMismatch("pred/x0/x1 shapes differ")
    v = (1 - sigma_min) * x1 - x0
    return float(np.mean((pred - v) ** 2))


@dataclass(frozen=True)
class LossWeights:
    lam_kp: float = 0.01
    lam_src: float = 0.005
    lam_cp: float = 0.01
    lam_sub: float = 0.005
    sigma_min: float = 0.0


def total_loss(flow, kp, src, cp, sub, weights: LossWeights = LossWeights()) -> float:
    return float(flow + weights.lam_kp * kp + weights.lam_src * src
                 + weights.lam_cp * cp + weights.lam_sub * sub)


# ---------------------------------------------------------------------------
# Analytic gradients + finite-difference verification


def cp_loss_grad(tokens: np.ndarray, state: PredictorState, A: np.ndarray):
    """d cp_loss / d (w, b) for z = tokens @ w + b."""
    tok = tokens.reshape(-1, tokens.shape[-1])
    A = np.asarray(A, dtype=float).reshape(-1, N_EXPERTS)
    z = tok @ state.w + state.b
    dz = (_sigmoid(z) - A) / z.size
    return tok.T @ dz, dz.sum(axis=0)


def _softmax_backprop(P_flat, dP_mean):
    """Gradient w.r.t. logits for L depending on mean-over-tokens softmax.

    P_flat: (N, 5); dP_mean: (5,) = dL / d(mean P). Returns dL/dz (N, 5)."""
    n = P_flat.shape[0]
    g = dP_mean / n
    inner = (P_flat * g).sum(axis=1, keepdims=True)
    return P_flat * (g - inner)


def kp_alb_grad(field_tokens, c_action, t_embed, outer_w, outer_b, token_w,
                prior: PhysicalPrior):
    """d kp_alb / d (outer_w, outer_b, token_w), with the top-1 fractions f
    treated as locally constant (they are piecewise constant in the params)."""
    tok = field_tokens.reshape(-1, field_tokens.shape[-1])
    ce = np.concatenate([c_action, t_embed])
    z = ce @ outer_w + outer_b + tok @ token_w
    P = softmax(z, axis=-1)
    stats = routing_stats(P)
    dPbar = 2.0 / N_EXPERTS * (stats.load - prior.pi) * stats.f
    dz = _softmax_backprop(P, dPbar)
    g_outer_w = np.outer(ce, dz.sum(axis=0))
    g_outer_b = dz.sum(axis=0)
    g_token_w = tok.T @ dz
    return g_outer_w, g_outer_b, g_token_w


def src_loss_grad(tokens_seq: np.ndarray, state: PredictorState,
                  m_tool: np.ndarray):
    """d src_loss / d (w, b) where R_t = sigmoid(tokens_t @ w + b).

    tokens_seq: (T, H', W', C); m_tool: (T, H', W')."""
    T = tokens_seq.shape[0]
    tok = tokens_seq.reshape(T, -1, tokens_seq.shape[-1])
    mask = np.asarray(m_tool, dtype=float).reshape(T, -1)
    gw = np.zeros_like(state.w)
    gb = np.zeros_like(state.b)
    if T < 2:
        return gw, gb
    denom = N_EXPERTS * mask[1:].sum()
    if denom == 0:
        return gw, gb
    z = tok @ state.w + state.b  # (T, N, 5)
    R = _sigmoid(z)
    dR = np.zeros_like(R)
    for t in range(1, T):
        d = 2.0 * mask[t][:, None] * (R[t] - R[t - 1]) / denom
        dR[t] += d
        dR[t - 1] -= d
    dz = dR * R * (1 - R)
    for t in range(T):
        gw += tok[t].T @ dz[t]
        gb += dz[t].sum(axis=0)
    return gw, gb


def distill_grads(student_outer_logits, teacher_outer, student_skip_logits,
                  teacher_skip, student_pred, teacher_pred):
    """Analytic gradients of the distillation terms w.r.t. student quantities:
    KL(teacher || softmax(z)) -> softmax(z) - p_t, BCE on skip logits, MSE on
    predictions. Each averaged the same way the losses are."""
    Ps = softmax(student_outer_logits, axis=-1)
    n_tok = int(np.prod(student_outer_logits.shape[:-1]))
    g_outer = (Ps - teacher_outer) / n_tok
    g_skip = (_sigmoid(student_skip_logits) - teacher_skip) / student_skip_logits.size
    g_pred = 2.0 * (student_pred - teacher_pred) / student_pred.size
    return g_outer, g_skip, g_pred


def finite_difference_grad(loss_fn, arrays: dict, eps=1e-5) -> dict:
    """Central finite differences of loss_fn over a dict of parameter arrays."""
    grads = {}
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype=float)
        g = np.zeros_like(arr)
        it = np.nditer(arr, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            orig = arr[idx]
            arr[idx] = orig + eps
            f_plus = loss_fn(arrays)
            arr[idx] = orig - eps
            f_minus = loss_fn(arrays)
            arr[idx] = orig
            g[idx] = (f_plus - f_minus) / (2 * eps)
        grads[name] = g
    return grads


def grad_check(loss_fn, arrays: dict, analytic: dict, eps=1e-5) -> float:
    """Max relative error |g_a - g_fd| / max(1, |g_a|, |g_fd|) over all params."""
    fd = finite_difference_grad(loss_fn, arrays, eps=eps)
    worst = 0.0
    for name, ga in analytic.items():
        ga = np.asarray(ga, dtype=float)
        gf = fd[name]
        if not (np.all(np.isfinite(ga)) and np.all(np.isfinite(gf))):
            raise NonFiniteGradient(f"non-finite gradient for {name}")
        rel = np.abs(ga - gf) / np.maximum(1.0, np.maximum(np.abs(ga), np.abs(gf)))
        worst = max(worst, float(rel.max()))
    return worst
