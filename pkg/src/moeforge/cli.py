"""Command-line entry point: ``moeforge <subcommand> [options]``.

Every subcommand writes CSV files and a plain-text summary into ``--out-dir``.
Exit codes: 0 success, 1 configuration error, 2 a checked experiment claim failed.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import checkpoint as ck
from . import experiments as X
from . import routing as R
from .model import PRESETS, build_model, param_count
from .multitask import (DAE, MT, DaeNoiseConfig, Trainer, evaluate, heldout_mt, write_metrics)
from .optim import Optimizer
from .parallel import (ParallelPlan, PlanError, a2a_traffic, expected_a2a_bytes,
                       format_memory_table, load_plan, make_ranks, max_model_size,
                       memory_csv_rows, memory_per_gpu, rank_rng, simulate_expert_parallel_step)
from .routing import RouterConfig, moe_layer_forward
from .surgery import RANDOM, TOP_UTILIZATION, aoe_merge, count_utilization, prune_experts
from .tensor import Tensor, init_truncated_normal

TABLE3 = {1: 0.7e9, 8: 1.8e9, 16: 3e9, 32: 5.5e9, 64: 10e9, 128: 20e9}
GB = 10**9

EXIT_OK, EXIT_CONFIG, EXIT_FAILED = 0, 1, 2


class ConfigError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def _ints(text: str) -> list[int]:
    try:
        return [int(v) for v in str(text).split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


# ------------------------------------------------------------------ output


def _write_csv(path: Path, rows) -> None:
    with open(path, "w", newline="") as fh:
        csv.writer(fh, lineterminator="\n").writerows(rows)


def _emit(args, name: str, lines: list[str]) -> None:
    text = "\n".join(lines) + "\n"
    (args.out_dir / name).write_text(text)
    sys.stdout.write(text)


def _fmt(x) -> str:
    return f"{x:.6f}" if isinstance(x, float) else str(x)


def _setup(args, base: X.ToySetup = X.DEFAULT_SETUP) -> X.ToySetup:
    kw = dict(args.setup or {})
    if "languages" in kw:
        kw["languages"] = tuple(tuple(v) for v in kw["languages"])
    try:
        return X.with_overrides(base, **kw)
    except TypeError as exc:
        raise ConfigError(f"bad toy setup: {exc}")


# ------------------------------------------------------------ count-params


def cmd_count_params(args) -> int:
    base = PRESETS[args.preset]
    if args.moe_every is not None:
        base = base.replace(moe_every=args.moe_every)
    rows = [["experts", "moe_layers", "total", "non_expert", "expert", "gate", "target", "delta"]]
    lines = [f"{'E':>4} {'total':>16} {'non_expert':>14} {'expert':>16} {'gate':>10} {'delta':>8}"]
    for E in args.experts:
        arch = base.replace(num_experts=E, dense=E == 1)
        c = param_count(arch)
        target = TABLE3.get(E) if args.preset == "large" and args.moe_every is None else None
        delta = "" if target is None else f"{c.total / target - 1:+.4f}"
        rows.append([E, arch.num_moe_layers, c.total, c.non_expert, c.expert, c.gate,
                     "" if target is None else int(target), delta])
        lines.append(f"{E:>4} {c.total:>16,} {c.non_expert:>14,} {c.expert:>16,} {c.gate:>10,} {delta:>8}")
    _write_csv(args.out_dir / "count_params.csv", rows)
    _emit(args, "count_params.txt", lines)
    return EXIT_OK


# ------------------------------------------------------------ rts-ablation


def cmd_rts_ablation(args) -> int:
    setup = _setup(args, X.DEFAULT_SETUP)
    pos = X.drop_positions(seed=args.seed)
    res = X.rts_ablation(setup, args.seeds, args.steps, args.experts)
    _write_csv(args.out_dir / "rts_ablation.csv", X.curve_rows(res.curves))
    hist_rows = [["label", "seed", "position", "eval_drops"]]
    for c in res.curves:
        for p, n in enumerate(c.drop_hist[: setup.max_len + 2]):
            hist_rows.append([c.label, c.seed, p, int(n)])
    _write_csv(args.out_dir / "drop_positions.csv", hist_rows)
    lines = [
        "constructed oversubscribed batch:",
        f"  plain drops in final half: {pos.plain_final_half:.4f}",
        f"  rts drop buckets: {' '.join(str(int(v)) for v in pos.rts_hist)}",
        f"  rts uniformity chi2={pos.rts_chi2:.4f} p={pos.rts_p_value:.4f}",
        f"training ({args.steps} steps, seeds {args.seeds}), median final smoothed eval CE:",
    ]
    for mode, v in res.medians.items():
        finals = [c.smoothed_final(setup.smooth_window) for c in res.curves if c.label == mode]
        lines.append(f"  {mode:<8} {v:.6f}  per-seed {' '.join(f'{x:.6f}' for x in finals)}")
    ok = res.ordered and pos.plain_final_half >= 0.9 and pos.rts_p_value > 0.01
    lines.append(f"ordering rts <= grouped <= plain: {'yes' if res.ordered else 'no'}")
    _emit(args, "rts_ablation_summary.txt", lines)
    return EXIT_FAILED if args.check and not ok else EXIT_OK


# --------------------------------------------------------------------- aoe


def cmd_aoe(args) -> int:
    setup = _setup(args)
    if args.ckpt_a or args.ckpt_b:
        if not (args.ckpt_a and args.ckpt_b):
            raise ConfigError("--ckpt-a and --ckpt-b go together")
        a, b = ck.load(args.ckpt_a), ck.load(args.ckpt_b)
        merged = aoe_merge(a, b)
        if args.merged_out:
            ck.save(merged, args.merged_out)
        corpus = setup.corpus()
        if merged.arch.vocab != corpus.vocab_size:
            raise ConfigError("checkpoint vocabulary does not match the toy corpus")
        held = heldout_mt(corpus, setup.heldout_per_language, setup.budget_tokens)
        E = merged.arch.num_experts
        target = evaluate(a, held, setup.router(a.arch.num_experts, seed=args.seed)).mt_ce
        cm = X.train_run(setup, merged, setup.router(E, seed=args.seed), args.steps, args.seed,
                         "merged", corpus, held, eval_at_zero=True)
        scratch = build_model(merged.arch, args.seed + 500)
        cs = X.train_run(setup, scratch, setup.router(E, seed=args.seed), args.steps, args.seed,
                         "scratch", corpus, held, eval_at_zero=True)
        _write_csv(args.out_dir / "aoe.csv", X.curve_rows([cm, cs]))
        lines = [f"merged experts: {E}", f"ckpt_a eval CE: {target:.6f}",
                 f"merged eval CE at step 0: {cm.eval_ce[0]:.6f}",
                 f"merged final eval CE: {cm.eval_ce[-1]:.6f}",
                 f"scratch final eval CE: {cs.eval_ce[-1]:.6f}",
                 f"steps to ckpt_a level: merged {cm.steps_to(target)} scratch {cs.steps_to(target)}"]
        _emit(args, "aoe_summary.txt", lines)
        return EXIT_OK
    res = X.aoe_experiment(setup, args.seeds, args.donor_steps, args.steps, args.experts)
    _write_csv(args.out_dir / "aoe.csv", X.curve_rows(res.curves))
    horizon = args.steps
    m_med = X.median_steps(res.merged_steps, horizon)
    s_med = X.median_steps(res.scratch_steps, horizon)
    lines = [f"donor experts {args.experts} -> merged {2 * args.experts}; donor steps {args.donor_steps}"]
    for s in args.seeds:
        lines.append(f"  seed {s}: target {res.target[s]:.6f} merged {res.merged_steps[s]} "
                     f"scratch {res.scratch_steps[s]}")
    lines.append(f"median steps to donor level (never = {horizon + 1}): merged {m_med} scratch {s_med}")
    _emit(args, "aoe_summary.txt", lines)
    return EXIT_FAILED if args.check and not m_med < s_med else EXIT_OK


# ------------------------------------------------------------------- prune


def cmd_prune(args) -> int:
    setup = _setup(args)
    if args.ckpt:
        model = ck.load(args.ckpt)
        corpus = setup.corpus()
        if model.arch.vocab != corpus.vocab_size:
            raise ConfigError("checkpoint vocabulary does not match the toy corpus")
        held = heldout_mt(corpus, setup.heldout_per_language, setup.budget_tokens)
        E = model.arch.num_experts
        k = args.k
        counts = count_utilization(model, [(b.src, b.tgt) for b in held], setup.router(E))
        counts.to_csv(args.out_dir / "utilization.csv")
        pruned = prune_experts(model, k, args.strategy, counts=counts, seed=args.seed)
        if args.pruned_out:
            ck.save(pruned, args.pruned_out)
        before = evaluate(model, held, setup.router(E, seed=args.seed)).mt_ce
        after = X._finetune_ce(setup, pruned, k, args.finetune_steps, args.seed, corpus, held)
        scratch = build_model(pruned.arch, args.seed + 500)
        base = X._finetune_ce(setup, scratch, k, args.finetune_steps, args.seed, corpus, held)
        rows = [["model", "experts", "steps", "eval_ce"],
                ["input", E, 0, f"{before:.6f}"],
                ["pruned", k, args.finetune_steps, f"{after:.6f}"],
                ["scratch", k, args.finetune_steps, f"{base:.6f}"]]
        _write_csv(args.out_dir / "prune.csv", rows)
        _emit(args, "prune_summary.txt", [" ".join(map(str, r)) for r in rows])
        return EXIT_OK
    res = X.prune_experiment(setup, args.seeds, args.selection_seeds, args.donor_steps,
                             args.finetune_steps, args.scratch_steps, args.experts, args.k)
    rows = [["kind", "seed", "eval_ce"]]
    for kind, d in (("donor", res.donor_ce), ("pruned_top", res.pruned_ce),
                    ("scratch", res.scratch_ce), ("select_top", res.top_ce),
                    ("select_random", res.random_ce)):
        rows += [[kind, s, f"{v:.6f}"] for s, v in d.items()]
    _write_csv(args.out_dir / "prune.csv", rows)
    med = {k: float(np.median(list(d.values()))) for k, d in
           (("pruned", res.pruned_ce), ("scratch", res.scratch_ce), ("top", res.top_ce),
            ("random", res.random_ce))}
    lines = [f"E={args.experts} -> k={args.k}; donor {args.donor_steps} steps, "
             f"fine-tune {args.finetune_steps}, scratch {args.scratch_steps}",
             f"median eval CE: pruned+fine-tune {med['pruned']:.6f} scratch {med['scratch']:.6f}",
             f"median eval CE over selection seeds: top {med['top']:.6f} random {med['random']:.6f}"]
    _emit(args, "prune_summary.txt", lines)
    ok = med["pruned"] < med["scratch"] and med["top"] <= med["random"]
    return EXIT_FAILED if args.check and not ok else EXIT_OK


# ------------------------------------------------------------- plan-memory


def cmd_plan_memory(args) -> int:
    plan = load_plan(args.plan) if args.plan else ParallelPlan(
        args.world_size, args.ep, args.mp, args.zero_stage, args.offload)
    arch = PRESETS[args.preset].replace(num_experts=args.num_experts)
    c = param_count(arch)
    p_e = c.expert + c.gate
    est = memory_per_gpu(plan, c.non_expert, p_e)
    _write_csv(args.out_dir / "memory.csv", memory_csv_rows(est))
    per_expert = p_e // arch.num_experts
    budget = int(args.budget_gb * GB)
    lines = [f"plan: N={plan.world_size} ep={plan.expert_parallel} mp={plan.model_parallel} "
             f"dp={plan.data_parallel} zero={plan.zero_stage} offload={plan.offload}",
             f"model: {args.preset} E={arch.num_experts} params={c.total:,}",
             format_memory_table(est)]
    lim = max_model_size(plan, budget, c.non_expert, per_expert)
    lines.append(f"max experts under {args.budget_gb:g} GB/GPU: {lim.num_experts} "
                 f"(total params {lim.total_params:,})")
    base = dataclasses.replace(plan, zero_stage=0, offload=False)
    off = dataclasses.replace(plan, zero_stage=0, offload=True)
    try:
        b, o = (max_model_size(p, budget, c.non_expert, per_expert) for p in (base, off))
        ratio = o.total_params_bound / b.total_params_bound
        lines.append(f"offload vs zero-0 max-size ratio (continuous bound): {float(ratio):.6f}")
    except PlanError as exc:
        lines.append(f"offload ratio unavailable: {exc}")
    _emit(args, "plan_memory.txt", lines)
    return EXIT_OK


# ------------------------------------------------------- sample-efficiency


def cmd_sample_efficiency(args) -> int:
    setup = _setup(args)
    res = X.sample_efficiency(setup, args.experts, args.seeds, args.steps)
    rows = X.curve_rows(res.curves)
    _write_csv(args.out_dir / "sample_efficiency.csv", rows)
    base = min(args.experts)
    lines = [f"threshold: E={base} eval CE at step {args.steps}, per seed "
             + " ".join(f"{res.threshold[s]:.6f}" for s in args.seeds)]
    tokens = {tuple(c.tokens_per_step) for c in res.curves if c.seed == args.seeds[0]}
    for e in args.experts:
        lines.append(f"  E={e:<4} steps-to-threshold {[res.steps_to[e][s] for s in args.seeds]} "
                     f"median {X.median_steps(res.steps_to[e], args.steps)}")
    lines.append(f"identical routed-token counts across E (seed {args.seeds[0]}): "
                 f"{'yes' if len(tokens) == 1 else 'no'}")
    _emit(args, "sample_efficiency_summary.txt", lines)
    top = max(args.experts)
    ok = X.median_steps(res.steps_to[top], args.steps) < args.steps
    return EXIT_FAILED if args.check and not ok else EXIT_OK


# ----------------------------------------------------------- simulate-a2a


def cmd_simulate_a2a(args) -> int:
    E, ep, d = args.num_experts, args.ep, args.d_model
    rng = np.random.default_rng(args.seed)
    def t(*s):
        return init_truncated_normal(s, 0.5, rng=rng)
    layer = R.MoeLayerParams(t(d, E), [t(d, args.ffn_dim) for _ in range(E)],
                             [t(args.ffn_dim) for _ in range(E)],
                             [t(args.ffn_dim, d) for _ in range(E)], [t(d) for _ in range(E)])
    cfg = RouterConfig(E, capacity_factor_train=args.capacity_factor, assignment_mode=args.mode,
                       rng_seed=args.seed)
    xs = [rng.standard_normal((args.tokens, d)) for _ in range(ep)]
    sim = simulate_expert_parallel_step(make_ranks(E, ep), xs, layer, cfg)
    same = all(np.array_equal(y, moe_layer_forward(Tensor(x), layer, cfg, R.TRAIN, rank_rng(cfg, r))[0].data)
               for r, (x, y) in enumerate(zip(xs, sim.outputs)))
    traffic = a2a_traffic(sim.log, ep)
    cap = R.capacity(args.tokens, cfg, R.TRAIN)
    _write_csv(args.out_dir / "a2a_traffic.csv",
               [["src", "dst", "bytes"]] + [[i, j, int(traffic[i, j])] for i in range(ep) for j in range(ep)])
    lines = [f"ep={ep} E={E} tokens/rank={args.tokens} d={d} capacity={cap}",
             f"total bytes {int(traffic.sum())} (closed form {expected_a2a_bytes(ep, E, cap, d)})",
             f"bit-identical to single-rank: {'yes' if same else 'no'}",
             f"dropped per rank: {[int(dec.dropped.sum()) for dec in sim.decisions]}"]
    _emit(args, "simulate_a2a.txt", lines)
    return EXIT_FAILED if args.check and not same else EXIT_OK


# ------------------------------------------------------------------- train


def cmd_train(args) -> int:
    setup = _setup(args)
    corpus = setup.corpus()
    model = build_model(setup.arch(args.experts), args.seed)
    cfg = setup.router(args.experts, args.mode, args.seed)
    tasks = tuple(args.tasks)
    trainer = Trainer(model, corpus, Optimizer(model.parameters(), setup.schedule()), cfg,
                      tasks=tasks, budget_tokens=setup.budget_tokens, seed=args.seed,
                      noise=DaeNoiseConfig(rng_seed=args.seed))
    rows = [trainer.step() for _ in range(args.steps)]
    write_metrics(args.out_dir / "metrics.csv", rows)
    held = heldout_mt(corpus, setup.heldout_per_language, setup.budget_tokens)
    ev = evaluate(model, held, cfg, exact_match_limit=args.exact_match)
    ck.save(model, args.out_dir / "ckpt", meta={"steps": args.steps, "seed": args.seed,
                                               "setup": dataclasses.asdict(setup)})
    lines = [f"trained E={args.experts} mode={args.mode} tasks={','.join(tasks)} steps={args.steps}",
             f"held-out MT CE {ev.mt_ce:.6f}"]
    if ev.exact_match is not None:
        lines.append(f"exact match {ev.exact_match:.4f}")
    lines.append("checkpoint ckpt (inside --out-dir)")
    _emit(args, "train_summary.txt", lines)
    return EXIT_OK


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out-dir", type=Path, default=Path("moeforge-out"))
    common.add_argument("--config", type=Path, help="JSON file of option overrides")
    common.add_argument("--check", action="store_true",
                        help="exit 2 when the experiment's directional claim does not hold")

    p = _Parser(prog="moeforge", description=__doc__.splitlines()[0], parents=[common])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("count-params", parents=[common])
    s.add_argument("--preset", choices=sorted(PRESETS), default="large")
    s.add_argument("--experts", type=_ints, default=[1, 8, 16, 32, 64, 128])
    s.add_argument("--moe-every", type=int)
    s.set_defaults(func=cmd_count_params)

    s = sub.add_parser("rts-ablation", parents=[common])
    s.add_argument("--seeds", type=_ints, default=[0, 1, 2])
    s.add_argument("--steps", type=int, default=2000)
    s.add_argument("--experts", type=int, default=8)
    s.set_defaults(func=cmd_rts_ablation)

    s = sub.add_parser("aoe", parents=[common])
    s.add_argument("--ckpt-a", type=Path)
    s.add_argument("--ckpt-b", type=Path)
    s.add_argument("--merged-out", type=Path)
    s.add_argument("--seeds", type=_ints, default=[0, 1, 2])
    s.add_argument("--experts", type=int, default=4, help="experts per donor")
    s.add_argument("--donor-steps", type=int, default=1000)
    s.add_argument("--steps", type=int, default=1000)
    s.set_defaults(func=cmd_aoe)

    s = sub.add_parser("prune", parents=[common])
    s.add_argument("--ckpt", type=Path)
    s.add_argument("--pruned-out", type=Path)
    s.add_argument("--k", type=int, default=2)
    s.add_argument("--strategy", choices=[TOP_UTILIZATION, RANDOM], default=TOP_UTILIZATION)
    s.add_argument("--seeds", type=_ints, default=[0, 1, 2])
    s.add_argument("--selection-seeds", type=_ints, default=[0, 1, 2, 3, 4])
    s.add_argument("--experts", type=int, default=8)
    s.add_argument("--donor-steps", type=int, default=2000)
    s.add_argument("--finetune-steps", type=int, default=100)
    s.add_argument("--scratch-steps", type=int, default=1000)
    s.set_defaults(func=cmd_prune)

    s = sub.add_parser("plan-memory", parents=[common])
    s.add_argument("--plan", type=Path, help="plan file (JSON or key=value)")
    s.add_argument("--world-size", type=int, default=1)
    s.add_argument("--ep", type=int, default=1)
    s.add_argument("--mp", type=int, default=1)
    s.add_argument("--zero-stage", type=int, default=0)
    s.add_argument("--offload", action="store_true")
    s.add_argument("--preset", choices=sorted(PRESETS), default="large")
    s.add_argument("--num-experts", type=int, default=64)
    s.add_argument("--budget-gb", type=float, default=40.0)
    s.set_defaults(func=cmd_plan_memory)

    s = sub.add_parser("sample-efficiency", parents=[common])
    s.add_argument("--experts", type=_ints, default=[1, 2, 4, 8])
    s.add_argument("--seeds", type=_ints, default=[0, 1, 2])
    s.add_argument("--steps", type=int, default=2000)
    s.set_defaults(func=cmd_sample_efficiency)

    s = sub.add_parser("simulate-a2a", parents=[common])
    s.add_argument("--ep", type=int, default=2)
    s.add_argument("--num-experts", type=int, default=4)
    s.add_argument("--tokens", type=int, default=16)
    s.add_argument("--d-model", type=int, default=8)
    s.add_argument("--ffn-dim", type=int, default=16)
    s.add_argument("--capacity-factor", type=float, default=1.0)
    s.add_argument("--mode", choices=[R.PLAIN, R.RTS], default=R.PLAIN)
    s.set_defaults(func=cmd_simulate_a2a)

    s = sub.add_parser("train", parents=[common])
    s.add_argument("--experts", type=int, default=8)
    s.add_argument("--mode", choices=[R.PLAIN, R.GROUPED, R.RTS], default=R.RTS)
    s.add_argument("--tasks", type=lambda v: v.split(","), default=[MT, DAE])
    s.add_argument("--steps", type=int, default=500)
    s.add_argument("--exact-match", type=int, default=0)
    s.set_defaults(func=cmd_train)
    return p


def _apply_config(parser: argparse.ArgumentParser, args: argparse.Namespace, argv) -> None:
    """Config-file values fill options that were not given on the command line."""
    args.setup = None
    if not args.config:
        return
    try:
        data = json.loads(args.config.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {args.config}: {exc}")
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    given = {a.split("=", 1)[0][2:].replace("-", "_") for a in argv if a.startswith("--")}
    for key, value in data.items():
        dest = key.replace("-", "_")
        if dest == "setup":
            args.setup = value
        elif not hasattr(args, dest) or dest in ("func", "command", "config"):
            raise ConfigError(f"unknown config key {key!r} for {args.command}")
        elif dest not in given:
            if dest in ("seeds", "selection_seeds") or (dest == "experts" and isinstance(value, list)):
                value = _ints(",".join(map(str, value)) if isinstance(value, list) else value)
            elif dest in ("out_dir", "ckpt", "ckpt_a", "ckpt_b", "plan", "merged_out", "pruned_out"):
                value = Path(value)
            setattr(args, dest, value)


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        _apply_config(parser, args, argv)
        args.out_dir.mkdir(parents=True, exist_ok=True)
        return args.func(args)
    except (ConfigError, PlanError, ck.CheckpointError, ValueError, OSError) as exc:
        print(f"moeforge: error: {exc}".splitlines()[0], file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
