"""Two-tier mixture-of-experts conditioning over the 9-channel control field.

Tier 1 gates five modality experts (semantics / depth / rotation / velocity /
acceleration), each structurally restricted to its own channels. Tier 2 picks
a motion-scale sub-expert (fine / transport / skip) per token inside each
modality. Fusion follows a dense -> sparse top-k capacity schedule.

Expert operators are deliberately small (linear / pooled / identity): only the
routing semantics matter here, not feature capacity.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np

from .errors import ShapeMismatch
from .kva_field import MODALITIES, MODALITY_CHANNELS, KvaField

N_EXPERTS = 5
N_SUB = 3
SUB_EXPERTS = ("fine", "transport", "skip")
FINE, TRANSPORT, SKIP = 0, 1, 2
T_EMBED_DIM = 8


@dataclass(frozen=True)
class CapacitySchedule:
    """Dense fusion until dense_end, sparse top-k from sparse_start on,
    linear blend in between."""

    dense_end: float = 0.40
    sparse_start: float = 0.75
    k: int = 2

    def __post_init__(self):
        if not (0 <= self.dense_end < self.sparse_start <= 1):
            raise ValueError("need 0 <= dense_end < sparse_start <= 1")
        if not (1 <= self.k <= N_EXPERTS):
            raise ValueError(f"k must be in [1, {N_EXPERTS}]")

    def blend_factor(self, progress: float) -> float:
        if progress < self.dense_end:
            return 0.0
        if progress >= self.sparse_start:
            return 1.0
        return (progress - self.dense_end) / (self.sparse_start - self.dense_end)


@dataclass
class GateParams:
    """All learnable pieces of the two-tier router (plain numpy arrays)."""

    stride: int
    c: int
    lift_w: np.ndarray  # (9, C) shared action lift
    lift_b: np.ndarray  # (C,)
    outer_w: np.ndarray  # (C + T_EMBED_DIM, 5)
    outer_b: np.ndarray  # (5,)
    token_w: np.ndarray  # (C, 5) per-token refinement of the global gate
    mod_lift_w: dict  # modality -> (n_ch, C)
    mod_lift_b: dict  # modality -> (C,)
    inner_w: dict  # modality -> (C, 3)
    inner_b: dict  # modality -> (3,)
    fine_w: dict  # modality -> (C, C)
    fine_b: dict  # modality -> (C,)
    trans_w: dict  # modality -> (C, C)
    trans_b: dict  # modality -> (C,)


def init_gate_params(seed=0, c=16, stride=4, scale=0.3) -> GateParams:
    rng = np.random.default_rng(seed)

    def lin(n_in, n_out):
        return rng.normal(0.0, scale / np.sqrt(n_in), size=(n_in, n_out))

    return GateParams(
        stride=stride,
        c=c,
        lift_w=lin(9, c),
        lift_b=np.zeros(c),
        outer_w=lin(c + T_EMBED_DIM, N_EXPERTS),
        outer_b=np.zeros(N_EXPERTS),
        token_w=lin(c, N_EXPERTS),
        mod_lift_w={m: lin(len(MODALITY_CHANNELS[m]), c) for m in MODALITIES},
        mod_lift_b={m: np.zeros(c) for m in MODALITIES},
        inner_w={m: lin(c, N_SUB) for m in MODALITIES},
        inner_b={m: np.zeros(N_SUB) for m in MODALITIES},
        fine_w={m: lin(c, c) for m in MODALITIES},
        fine_b={m: np.zeros(c) for m in MODALITIES},
        trans_w={m: lin(c, c) for m in MODALITIES},
        trans_b={m: np.zeros(c) for m in MODALITIES},
    )


@dataclass(frozen=True)
class RoutingDecision:
    """Everything the gates decided for one frame's token grid."""

    P: np.ndarray  # (H', W', 5) soft tier-1 probabilities
    A: np.ndarray  # (H', W', 5) binary top-k mask
    fusion_w: np.ndarray  # (H', W', 5) capacity-blended fusion weights
    inner_sel: np.ndarray  # (H', W', 5) argmax sub-expert per modality
    inner_conf: np.ndarray  # (H', W', 5) probability of the selected sub-expert
    inner_probs: np.ndarray  # (H', W', 5, 3) full tier-2 distributions
    tokens: np.ndarray  # (H', W', C) shared action tokens
    c_action: np.ndarray  # (C,) pooled gate feature


def timestep_embed(t: float) -> np.ndarray:
    """Sinusoidal features of a scalar timestep in [0, 1]."""
    freqs = 2.0 ** np.arange(T_EMBED_DIM // 2)
    ang = 2 * np.pi * freqs * t
    return np.concatenate([np.sin(ang), np.cos(ang)])


def avg_pool(x: np.ndarray, stride: int) -> np.ndarray:
    """Non-overlapping average pooling over the two leading spatial dims."""
    h, w = x.shape[:2]
    if h % stride or w % stride:
        raise ShapeMismatch(f"{x.shape[:2]} not divisible by stride {stride}")
    hp, wp = h // stride, w // stride
    return x.reshape(hp, stride, wp, stride, *x.shape[2:]).mean(axis=(1, 3))


def max_pool(x: np.ndarray, stride: int) -> np.ndarray:
    h, w = x.shape[:2]
    if h % stride or w % stride:
        raise ShapeMismatch(f"{x.shape[:2]} not divisible by stride {stride}")
    hp, wp = h // stride, w // stride
    return x.reshape(hp, stride, wp, stride, *x.shape[2:]).max(axis=(1, 3))


def softmax(z: np.ndarray, axis=-1) -> np.ndarray:
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def action_embed(field: KvaField, params: GateParams):
    """Strided average pool + shared linear lift; c_action is the token mean."""
    pooled = avg_pool(field.channels, params.stride)
    tokens = pooled @ params.lift_w + params.lift_b
    c_action = tokens.mean(axis=(0, 1))
    return c_action, tokens


def outer_gate(c_action, t_embed, params: GateParams, tokens=None):
    """Global modality gate, additively refined per token when tokens given."""
    logits = np.concatenate([c_action, t_embed]) @ params.outer_w + params.outer_b
    if tokens is not None:
        logits = logits + tokens @ params.token_w
        return softmax(logits, axis=-1)
    return softmax(logits)


def topk_select(P: np.ndarray, k: int) -> np.ndarray:
    """Binary mask of the k largest entries per token; ties go to the lowest
    expert index."""
    if not (1 <= k <= P.shape[-1]):
        raise ValueError(f"k={k} out of range")
    order = np.argsort(-P, axis=-1, kind="stable")
    A = np.zeros_like(P)
    np.put_along_axis(A, order[..., :k], 1.0, axis=-1)
    return A


def capacity_blend(P, A, progress: float, sched: CapacitySchedule) -> np.ndarray:
    """fusion_w = (1 - lam) * P + lam * renormalized(P * A)."""
    masked = P * A
    S = masked / masked.sum(axis=-1, keepdims=True)
    lam = sched.blend_factor(progress)
    return (1 - lam) * P + lam * S


def inner_gate(modality_tokens: np.ndarray, w: np.ndarray, b: np.ndarray):
    """Top-1 fine/transport/skip selection with full distributions returned."""
    probs = softmax(modality_tokens @ w + b, axis=-1)
    sel = probs.argmax(axis=-1)  # first max wins: fine < transport < skip
    conf = np.take_along_axis(probs, sel[..., None], axis=-1)[..., 0]
    return sel, conf, probs


def modality_expert(field_pooled, params: GateParams, m: str):
    """Tier-2 expert stack for one modality: lifted tokens, sub-expert outputs,
    inner routing, and the confidence-weighted selected output."""
    x = field_pooled[..., MODALITY_CHANNELS[m]]
    lifted = x @ params.mod_lift_w[m] + params.mod_lift_b[m]
    sel, conf, probs = inner_gate(lifted, params.inner_w[m], params.inner_b[m])

    fine = lifted @ params.fine_w[m] + params.fine_b[m]
    transport = lifted @ params.trans_w[m] + params.trans_b[m] + lifted.mean(axis=(0, 1))
    stack = np.stack([fine, transport, lifted], axis=-2)  # (..., 3, C)
    selected = np.take_along_axis(stack, sel[..., None, None], axis=-2)[..., 0, :]
    return conf[..., None] * selected, sel, conf, probs


def route_forward(field: KvaField, params: GateParams, progress: float, t_embed,
                  sched: CapacitySchedule | None = None):
    """Full two-tier forward pass: fused control feature + routing decision."""
    sched = sched or CapacitySchedule()
    c_action, tokens = action_embed(field, params)
    P = outer_gate(c_action, t_embed, params, tokens=tokens)
    A = topk_select(P, sched.k)
    fusion_w = capacity_blend(P, A, progress, sched)

    pooled = avg_pool(field.channels, params.stride)
    hp, wp = tokens.shape[:2]
    ctrl = np.zeros((hp, wp, params.c))
    inner_sel = np.zeros((hp, wp, N_EXPERTS), dtype=int)
    inner_conf = np.zeros((hp, wp, N_EXPERTS))
    inner_probs = np.zeros((hp, wp, N_EXPERTS, N_SUB))
    for i, m in enumerate(MODALITIES):
        out, sel, conf, probs = modality_expert(pooled, params, m)
        ctrl += fusion_w[..., i, None] * out
        inner_sel[..., i] = sel
        inner_conf[..., i] = conf
        inner_probs[..., i, :] = probs

    decision = RoutingDecision(P=P, A=A, fusion_w=fusion_w, inner_sel=inner_sel,
                               inner_conf=inner_conf, inner_probs=inner_probs,
                               tokens=tokens, c_action=c_action)
    return ctrl, decision
