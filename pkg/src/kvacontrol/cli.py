"""Pipeline CLI: synth / lift / route / losses / schedule / eval / report.

Every subcommand is a pure function of (config, seed, input files); identical
invocations produce byte-identical outputs. Reports are CSV with a header row.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import kva_field as kvf
from . import metrics as mt
from . import priors as pr
from . import routing as rt
from . import scheduler as sched
from .errors import KvaControlError
from .formats import (
    Config,
    atomic_write_text,
    load_config,
    read_pgm,
    read_trajectory,
    subsystem_rng,
    write_field,
    write_pgm,
    write_trajectory,
)
from .kinematics import (
    CameraModel,
    ToolGeometry,
    default_camera,
    forward_kinematics,
    synth_trajectory,
)


def _fmt(x) -> str:
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    x = float(x)
    if np.isnan(x):
        return "nan"
    return format(x, ".17g")


def write_csv(path, header, rows):
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(_fmt(v) if not isinstance(v, str) else v for v in row))
    atomic_write_text(path, "\n".join(lines) + "\n")


def _camera(cfg: Config) -> CameraModel:
    h, w = cfg.resolution
    return default_camera(width=w, height=h)


def _derived_seed(seed: int, tag: str) -> int:
    return int(subsystem_rng(seed, tag).integers(2 ** 31))


# ---------------------------------------------------------------------------
# Subcommands


def cmd_synth(cfg: Config, seed: int, out: str):
    """Emit a synthetic trajectory plus rendered tube label masks."""
    os.makedirs(os.path.join(out, "masks"), exist_ok=True)
    geom = ToolGeometry()
    cam = _camera(cfg)
    traj = synth_trajectory(cfg.trajectory_kind, T=cfg.frames,
                            seed=_derived_seed(seed, "synth"), geom=geom)
    write_trajectory(os.path.join(out, "trajectory.txt"), traj, cam, seq_id="synth")
    for t in range(len(traj)):
        poses = forward_kinematics(traj.states[t], geom)
        labels = mt.render_tube(poses, cam, half_width=cfg.tube_half_width)
        write_pgm(os.path.join(out, "masks", f"frame_{t + 1:04d}.pgm"), labels)
    return 0


def _load_fields(traj_path, cfg: Config):
    traj, cam, _ = read_trajectory(traj_path)
    geom = ToolGeometry()
    fields = kvf.lift_trajectory(traj, geom, cam)
    return traj, cam, geom, fields


def cmd_lift(cfg: Config, seed: int, traj_path: str, out: str):
    """Trajectory file -> per-frame KVAF binaries + channel statistics."""
    os.makedirs(out, exist_ok=True)
    _, _, _, fields = _load_fields(traj_path, cfg)
    stats = kvf.compute_stats(fields)
    for f in fields:
        write_field(f, os.path.join(out, f"field_{f.t + 1:04d}.kvaf"))
    write_csv(os.path.join(out, "channel_stats.csv"),
              ["channel", "mean", "std"],
              [[kvf.CHANNEL_NAMES[3 + i], stats.mean[i], stats.std[i]]
               for i in range(6)])
    return 0


def _routing_run(cfg: Config, seed: int, traj_path: str):
    """Shared forward pass: fields, decisions, significance inputs per frame."""
    traj, cam, geom, fields = _load_fields(traj_path, cfg)
    stats = kvf.compute_stats(fields)
    params = rt.init_gate_params(seed=_derived_seed(seed, "gate"),
                                 c=cfg.token_dim, stride=cfg.stride)
    schedule = rt.CapacitySchedule(dense_end=cfg.dense_end,
                                   sparse_start=cfg.sparse_start, k=cfg.top_k)
    t_embed = rt.timestep_embed(cfg.timestep)

    # motion magnitude needs a sequence-level scale for cross-frame comparisons
    raw_motion = []
    for f in fields:
        pooled = rt.avg_pool(f.channels, cfg.stride)
        raw_motion.append(np.linalg.norm(pooled[..., 5:8], axis=-1)
                          + np.abs(pooled[..., 8]))
    peak = max(m.max() for m in raw_motion)

    frames = []
    for f in fields:
        norm = kvf.normalize(f, stats)
        ctrl, decision = rt.route_forward(norm, params, cfg.progress, t_embed,
                                          sched=schedule)
        pooled = rt.avg_pool(f.channels, cfg.stride)
        e_motion = raw_motion[f.t] / peak if peak > 0 else raw_motion[f.t]
        m_tool = rt.avg_pool(kvf.tool_mask(f), cfg.stride)
        c_route = decision.fusion_w.max(axis=-1)
        q_fine = (decision.fusion_w * decision.inner_probs[..., rt.FINE]).sum(axis=-1)
        p_skip = (decision.fusion_w * decision.inner_probs[..., rt.SKIP]).sum(axis=-1)
        s, s_tilde = sched.significance(e_motion, m_tool, c_route, q_fine, p_skip)
        frames.append({
            "field": f, "ctrl": ctrl, "decision": decision,
            "e_motion": e_motion, "m_tool": m_tool, "c_route": c_route,
            "q_fine": q_fine, "p_skip": p_skip, "s": s, "s_tilde": s_tilde,
        })
    return traj, frames, params, stats


def cmd_route(cfg: Config, seed: int, traj_path: str, out: str, n_bins=3):
    """Routing decisions + modality/scale statistics binned by motion
    magnitude quantiles (low / medium / high, mirroring the execution tiers)."""
    os.makedirs(out, exist_ok=True)
    _, frames, _, _ = _routing_run(cfg, seed, traj_path)
    budget = sched.BudgetConfig(rho_full_target=cfg.rho_full,
                                rho_light_target=cfg.rho_light)

    motion, fusion, inner_probs, modes, on_tool = [], [], [], [], []
    for fr in frames:
        plan = sched.partition(fr["s_tilde"], budget)
        motion.append(fr["e_motion"].reshape(-1))
        fusion.append(fr["decision"].fusion_w.reshape(-1, rt.N_EXPERTS))
        inner_probs.append(
            (fr["decision"].fusion_w[..., None]
             * fr["decision"].inner_probs).sum(axis=-2).reshape(-1, rt.N_SUB))
        modes.append(plan.mode)
        on_tool.append(fr["m_tool"].reshape(-1) > 0)
    motion = np.concatenate(motion)
    fusion = np.concatenate(fusion)
    inner_probs = np.concatenate(inner_probs)
    modes = np.concatenate(modes)
    on_tool = np.concatenate(on_tool)

    # statistics over tool tokens only: background tokens all tie at zero
    # motion and would wash out the motion bins
    if on_tool.sum() >= 2 * n_bins:
        motion, fusion = motion[on_tool], fusion[on_tool]
        inner_probs, modes = inner_probs[on_tool], modes[on_tool]

    # equal-count bins in motion order keep bins well defined under ties
    order = np.argsort(motion, kind="stable")
    chunks = np.array_split(order, n_bins)
    rows = []
    for b, idx in enumerate(chunks):
        row = [b, float(motion[idx].mean())]
        row += [float(v) for v in fusion[idx].mean(axis=0)]
        row += [float(v) for v in inner_probs[idx].mean(axis=0)]
        fracs = [float((modes[idx] == m).mean())
                 for m in (sched.FULL, sched.LIGHT, sched.REUSE)]
        # skip-mode fraction: tokens spared a full recompute (light or reuse)
        row += fracs + [fracs[1] + fracs[2]]
        rows.append(row)
    header = (["bin", "mean_motion"]
              + [f"fusion_{m}" for m in kvf.MODALITIES]
              + ["inner_fine", "inner_transport", "inner_skip"]
              + ["full_frac", "light_frac", "reuse_frac", "skip_mode_frac"])
    write_csv(os.path.join(out, "routing_stats.csv"), header, rows)
    return 0


def cmd_losses(cfg: Config, seed: int, traj_path: str, out: str):
    """All kinematic-prior losses on one sequence + gradient-check report."""
    os.makedirs(out, exist_ok=True)
    _, frames, params, _ = _routing_run(cfg, seed, traj_path)
    rng = subsystem_rng(seed, "losses")
    weights = pr.LossWeights(lam_kp=cfg.lam_kp, lam_src=cfg.lam_src,
                             lam_cp=cfg.lam_cp, lam_sub=cfg.lam_sub)
    predictor = pr.init_predictor(seed=_derived_seed(seed, "predictor"),
                                  c=cfg.token_dim)

    R_seq = np.stack([pr._sigmoid(pr.predictor_logits(predictor, fr["decision"].tokens))
                      for fr in frames])
    m_seq = np.stack([rt.max_pool(kvf.tool_mask(fr["field"]), cfg.stride)
                      for fr in frames])
    src = pr.src_loss(R_seq, m_seq)

    fr = frames[-1]
    prior = pr.physical_prior(fr["field"], stride=cfg.stride)
    stats = pr.routing_stats(fr["decision"].P)
    kp = pr.kp_alb_loss(stats, prior)
    logits = pr.predictor_logits(predictor, fr["decision"].tokens)
    cp = pr.cp_loss(logits, fr["decision"].A)
    f_sub, p_sub = pr.sub_routing_stats(fr["decision"])
    sub = pr.sub_stabilizer_loss(f_sub, p_sub)
    shape = fr["ctrl"].shape
    x0, x1 = rng.normal(size=shape), rng.normal(size=shape)
    pred = rng.normal(size=shape)
    flow = pr.flow_matching_loss(pred, x0, x1, weights.sigma_min)
    total = pr.total_loss(flow, kp, src, cp, sub, weights)
    write_csv(os.path.join(out, "losses.csv"),
              ["step", "l_flow", "l_kp", "l_src", "l_cp", "l_sub", "total"],
              [[0, flow, kp, src, cp, sub, total]])

    rows = []
    tokens = fr["decision"].tokens
    A = fr["decision"].A

    def cp_fn(arrs):
        st = pr.PredictorState(w=arrs["w"], b=arrs["b"], tau=predictor.tau)
        return pr.cp_loss(pr.predictor_logits(st, tokens), A)

    gw, gb = pr.cp_loss_grad(tokens, predictor, A)
    err = pr.grad_check(cp_fn, {"w": predictor.w.copy(), "b": predictor.b.copy()},
                        {"w": gw, "b": gb})
    rows.append(["cp_loss", err])

    t_embed = rt.timestep_embed(cfg.timestep)
    c_action = fr["decision"].c_action

    def kp_fn(arrs):
        P = rt.softmax(np.concatenate([c_action, t_embed]) @ arrs["outer_w"]
                       + arrs["outer_b"] + tokens @ arrs["token_w"], axis=-1)
        return pr.kp_alb_loss(pr.routing_stats(P), prior)

    g = pr.kp_alb_grad(tokens, c_action, t_embed, params.outer_w,
                       params.outer_b, params.token_w, prior)
    err = pr.grad_check(kp_fn, {"outer_w": params.outer_w.copy(),
                                "outer_b": params.outer_b.copy(),
                                "token_w": params.token_w.copy()},
                        dict(zip(("outer_w", "outer_b", "token_w"), g)))
    rows.append(["kp_alb_loss", err])

    tok_seq = np.stack([f2["decision"].tokens for f2 in frames])

    def src_fn(arrs):
        st = pr.PredictorState(w=arrs["w"], b=arrs["b"], tau=predictor.tau)
        R = pr._sigmoid(np.stack([pr.predictor_logits(st, tk) for tk in tok_seq]))
        return pr.src_loss(R, m_seq)

    gw, gb = pr.src_loss_grad(tok_seq, predictor, m_seq)
    err = pr.grad_check(src_fn, {"w": predictor.w.copy(), "b": predictor.b.copy()},
                        {"w": gw, "b": gb})
    rows.append(["src_loss", err])
    write_csv(os.path.join(out, "grad_check.csv"), ["loss", "max_rel_error"], rows)
    return 0


def cmd_schedule(cfg: Config, seed: int, traj_path: str, out: str):
    """Significance, plans, refresh, and a simulated cost report."""
    os.makedirs(out, exist_ok=True)
    _, frames, _, _ = _routing_run(cfg, seed, traj_path)
    budget = sched.BudgetConfig(rho_full_target=cfg.rho_full,
                                rho_light_target=cfg.rho_light,
                                K=cfg.refresh_intervals[2],
                                lam_b=cfg.lam_b, lam_t=cfg.lam_t)
    plans = [sched.partition(fr["s_tilde"], budget) for fr in frames]
    s_means = [float(fr["s_tilde"].mean()) for fr in frames]
    refresh = np.array([sched.refresh_interval(s, budget) for s in s_means])
    trace = sched.simulate_execution(plans, refresh)

    rows = []
    for t in range(len(frames)):
        rows.append([t + 1, *trace.n_modes[t], trace.frame_cost[t],
                     int(refresh[t]), int(trace.forced[t]), s_means[t]])
    write_csv(os.path.join(out, "execution.csv"),
              ["frame", "n_full", "n_light", "n_reuse", "cost", "refresh",
               "forced", "mean_significance"], rows)

    n = plans[0].mode.size
    T = len(plans)
    full_plan = [sched.ExecutionPlan(mode=np.zeros(n, dtype=int), rho_full=1.0,
                                     rho_light=0.0, rho_reuse=0.0)] * T
    full_trace = sched.simulate_execution(full_plan, np.ones(T, dtype=int))
    summary = [
        ["full_only", full_trace.total_cost, 1.0],
        ["adaptive_default", trace.total_cost,
         trace.total_cost / trace.full_equivalent_cost],
    ]
    write_csv(os.path.join(out, "cost_summary.csv"),
              ["config", "total_cost", "cost_ratio"], summary)
    return 0


def _read_mask_dir(path):
    names = sorted(f for f in os.listdir(path) if f.endswith(".pgm"))
    return [mt.MaskFrame(read_pgm(os.path.join(path, f))) for f in names]


def cmd_eval(cfg: Config, pred_dir: str, target_dir: str, out: str):
    """Mask directories -> per-frame and aggregated CD / TI / AF / Dice."""
    os.makedirs(out, exist_ok=True)
    pred = _read_mask_dir(pred_dir)
    target = _read_mask_dir(target_dir)
    if len(pred) != len(target):
        raise KvaControlError(
            f"{len(pred)} predicted frames vs {len(target)} target frames")
    report = mt.evaluate_sequence(pred, target)
    rows = []
    for t in range(len(pred)):
        ti = report.ti[t - 1] if t >= 1 else float("nan")
        af = report.af[t - 1] if t >= 1 else float("nan")
        rows.append([t + 1, report.cd[t], ti, af, report.dice[t]])
    rows.append(["mean", report.mean_cd, report.mean_ti, report.mean_af,
                 report.mean_dice])
    write_csv(os.path.join(out, "metrics.csv"),
              ["frame", "cd", "ti", "af", "dice"], rows)
    return 0


def cmd_report(inputs, out_path):
    """Merge CSV reports, prefixing each row with its source file."""
    lines = ["source,row"]
    for path in inputs:
        with open(path, "r", encoding="utf-8") as f:
            for line in f.read().splitlines():
                lines.append(f"{os.path.basename(path)},{line}")
    atomic_write_text(out_path, "\n".join(lines) + "\n")
    return 0


# ---------------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="kvacontrol")
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="out")
    p.add_argument("--resolution", default=None, help="HxW, e.g. 64x64")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("synth")
    sp.add_argument("--kind", default=None)
    sp.add_argument("--frames", type=int, default=None)

    for name in ("lift", "route", "losses", "schedule"):
        sp = sub.add_parser(name)
        sp.add_argument("--traj", required=True)

    sp = sub.add_parser("eval")
    sp.add_argument("--pred", required=True)
    sp.add_argument("--target", required=True)

    sp = sub.add_parser("report")
    sp.add_argument("--inputs", nargs="+", required=True)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    overrides = {}
    if args.resolution:
        h, w = args.resolution.lower().split("x")
        overrides["resolution"] = (int(h), int(w))
    if args.command == "synth":
        if args.kind:
            overrides["trajectory_kind"] = args.kind
        if args.frames:
            overrides["frames"] = args.frames
    try:
        cfg = load_config(args.config, overrides)
        os.makedirs(args.out, exist_ok=True)
        if args.command == "synth":
            return cmd_synth(cfg, args.seed, args.out)
        if args.command == "lift":
            return cmd_lift(cfg, args.seed, args.traj, args.out)
        if args.command == "route":
            return cmd_route(cfg, args.seed, args.traj, args.out)
        if args.command == "losses":
            return cmd_losses(cfg, args.seed, args.traj, args.out)
        if args.command == "schedule":
            return cmd_schedule(cfg, args.seed, args.traj, args.out)
        if args.command == "eval":
            return cmd_eval(cfg, args.pred, args.target, args.out)
        if args.command == "report":
            return cmd_report(args.inputs, os.path.join(args.out, "report.csv"))
        return 2
    except (KvaControlError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
