"""Command line entry points.

Subcommands: train, edit, bench, ablate-steps, selftest.

Exit codes: 0 success, 2 usage or configuration problem, 3 numeric
failure (non-finite values), 4 training divergence, 1 anything else.

Heavy imports happen inside the command handlers so that --threads can
pin the BLAS thread pools through environment variables before numpy
loads.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from .config import (ENV_CONFIG, build_dataclass, default_config_path,
                     parse_kv_file, split_sections)
from .errors import (ConfigError, DivergenceError, FormatError, NumericError,
                     RegionEditError, UsageError)

_THREAD_VARS = ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS",
                "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS")


def _apply_threads(threads):
    if not threads:
        return
    if threads < 1:
        raise UsageError(f"--threads must be >= 1, got {threads}")
    if "numpy" in sys.modules:
        print("warning: numpy already loaded, --threads may not take effect",
              file=sys.stderr)
    for var in _THREAD_VARS:
        os.environ[var] = str(threads)


def _sections(args) -> dict:
    path = getattr(args, "config", None) or default_config_path()
    if path is None:
        return {}
    return split_sections(parse_kv_file(path))


def _model_config(sections):
    from .model import ModelConfig
    return build_dataclass(ModelConfig, sections.get("model", {}), "model")


def _pipe_config(sections):
    from .pipeline import PipelineConfig
    return build_dataclass(PipelineConfig, sections.get("pipeline", {}),
                           "pipeline")


def _train_config(sections, args):
    from .pipeline import TrainConfig
    raw = dict(sections.get("train", {}))
    for key in ("steps", "seed", "dataset_size", "image_size", "batch_size"):
        val = getattr(args, key, None)
        if val is not None:
            raw[key] = str(val)
    return build_dataclass(TrainConfig, raw, "train")


def _log(args):
    if getattr(args, "quiet", False):
        return None
    return lambda msg: print(msg, flush=True)


def cmd_train(args) -> int:
    from .model import save_checkpoint, load_checkpoint
    from .pipeline import train_pipeline_model
    from .rng import Rng

    sections = _sections(args)
    pipe = _pipe_config(sections)
    tcfg = _train_config(sections, args)
    model = opt = None
    start_step = 0
    order_rng = Rng(tcfg.seed, 1)
    noise_rng = Rng(tcfg.seed, 3)
    if args.resume:
        model, opt, start_step, rng_states = load_checkpoint(args.resume)
        mcfg = model.config
        if rng_states:
            order_rng.set_state(rng_states["order"])
            noise_rng.set_state(rng_states["noise"])
    else:
        mcfg = _model_config(sections)
    if start_step >= tcfg.steps:
        raise UsageError(f"checkpoint already at step {start_step}, "
                         f"nothing to do for --steps {tcfg.steps}")
    model, opt, losses = train_pipeline_model(
        mcfg, pipe, tcfg, model=model, opt=opt, start_step=start_step,
        rngs=(order_rng, noise_rng), log=_log(args))
    states = {"order": order_rng.get_state(),
              "noise": noise_rng.get_state()}
    save_checkpoint(args.out, model, opt, step=tcfg.steps,
                    rng_states=states)
    final = sum(losses[-20:]) / max(len(losses[-20:]), 1)
    print(json.dumps({"checkpoint": str(args.out), "steps": tcfg.steps,
                      "final_loss": round(final, 6)}))
    return 0


def cmd_edit(args) -> int:
    import numpy as np

    from .imageio import load_image, load_mask, save_image, save_mask
    from .model import load_checkpoint
    from .pipeline import (OP_NAMES, EditRequest, SyntheticProxyEditor,
                           op_id, run_edit)

    sections = _sections(args)
    pipe = _pipe_config(sections)
    model, _, _, _ = load_checkpoint(args.checkpoint)
    source = load_image(args.image)
    mask = load_mask(args.mask) if args.mask else None
    control = load_image(args.control) if args.control else None
    if args.op in OP_NAMES:
        ids = np.array([op_id(args.op)], dtype=np.int64)
    else:
        try:
            ids = np.array([int(p) for p in args.op.split(",")],
                           dtype=np.int64)
        except ValueError:
            raise UsageError(
                f"--op must be one of {OP_NAMES} or comma-separated ids, "
                f"got {args.op!r}") from None
    if mask is None:
        raise UsageError("edit requires --mask (the proxy editor needs a "
                         "region to act on)")
    request = EditRequest(source=source, instruction=ids, user_mask=mask,
                          control=control)
    result = run_edit(model, SyntheticProxyEditor(), request, pipe,
                      seed=args.seed)
    save_image(args.out, result.image)
    if args.save_mask:
        save_mask(args.save_mask, result.mask)
    print(json.dumps(result.summary(), indent=2))
    return 0


def cmd_bench(args) -> int:
    from . import bench
    from .model import Model, load_checkpoint

    sections = _sections(args)
    pipe = _pipe_config(sections)
    if args.checkpoint:
        model, _, _, _ = load_checkpoint(args.checkpoint)
    else:
        model = Model(_model_config(sections), seed=args.seed)
    raw = dict(sections.get("bench", {}))
    for key in ("image_size", "reps", "seed", "threads"):
        val = getattr(args, key, None)
        if val is not None:
            raw[key] = str(val)
    if args.ratios:
        raw["ratios"] = args.ratios
    bcfg = build_dataclass(bench.BenchConfig, raw, "bench")
    rows = bench.run_scaling_bench(model, pipe, bcfg, log=_log(args))
    bench.write_csv(rows, args.out_csv, bench.SCALING_COLUMNS)
    summary = bench.summarize_scaling(rows)
    fits = bench.scaling_fits(summary)
    if args.svg:
        bench.scaling_chart(summary, args.svg)
    print(json.dumps({"csv": str(args.out_csv),
                      "svg": str(args.svg) if args.svg else None,
                      "fits": fits}, indent=2))
    return 0


def cmd_ablate_steps(args) -> int:
    from . import bench
    from .model import load_checkpoint

    sections = _sections(args)
    pipe = _pipe_config(sections)
    model, _, _, _ = load_checkpoint(args.checkpoint)
    skips = tuple(int(s) for s in args.skips.split(",")) if args.skips \
        else bench.SKIP_GRID
    rows, summary = bench.run_skip_ablation(
        model, pipe, skips=skips, fixtures=args.fixtures,
        image_size=args.image_size, seed=args.seed, log=_log(args))
    bench.write_csv(rows, args.out_csv, bench.ABLATION_COLUMNS)
    if args.svg:
        bench.ablation_chart(summary, args.svg)
    print(json.dumps({"csv": str(args.out_csv), **summary}, indent=2))
    return 0


def cmd_selftest(args) -> int:
    failures = 0
    for name, fn in _selftest_cases():
        try:
            fn()
        except Exception as exc:  # report and keep going
            failures += 1
            print(f"FAIL {name}: {type(exc).__name__}: {exc}")
        else:
            print(f"PASS {name}")
    if failures:
        print(f"{failures} check(s) failed")
        return 1
    print("all checks passed")
    return 0


def _selftest_cases():
    import numpy as np

    from .attention import (TokenRole, attend, build_window_plan, flop_count,
                            masked_equivalent_dense, windowed_mma)
    from .flow import FlowSchedule, euler_sample
    from .region import composite, patchify, unpatchify
    from .rng import Rng
    from .tensor import Tensor, matmul, rms_normalize, softmax_rows, sum_all

    def t_gradients():
        rng = np.random.default_rng(0)
        x = Tensor(rng.standard_normal((3, 4)).astype(np.float32),
                   requires_grad=True)
        w = Tensor(rng.standard_normal((4, 4)).astype(np.float32),
                   requires_grad=True)
        sum_all(softmax_rows(rms_normalize(matmul(x, w)))).backward()
        eps, got = 1e-3, float(x.grad[1, 2])
        for sign in (1.0, -1.0):
            x.data[1, 2] += sign * eps
            val = float(sum_all(softmax_rows(rms_normalize(matmul(
                Tensor(x.data.copy()), Tensor(w.data))))).data)
            x.data[1, 2] -= sign * eps
            got -= sign * val / (2 * eps)
        if abs(got) > 2e-3:
            raise AssertionError(f"gradient off by {got}")

    def t_window_equivalence():
        rng = np.random.default_rng(1)
        for trial in range(5):
            rows, cols, l = 6, 8, 3
            n = rows * cols
            total = n + 3
            plan = build_window_plan(rows, cols, l, halo=1)
            roles = np.full(total, TokenRole.NOISY, dtype=np.int64)
            roles[:n][rng.random(n) < 0.4] = TokenRole.CONDITION
            roles[n:] = TokenRole.TEXT
            grid_id = np.concatenate(
                [np.arange(n), np.full(3, -1)]).astype(np.int64)
            q = Tensor(rng.standard_normal((2, total, 8)).astype(np.float32))
            k = Tensor(rng.standard_normal((2, total, 8)).astype(np.float32))
            v = Tensor(rng.standard_normal((2, total, 8)).astype(np.float32))
            out_w, comp = windowed_mma(q, k, v, roles, grid_id, plan)
            bias, comp_d = masked_equivalent_dense(roles, grid_id, plan)
            if not np.array_equal(comp, comp_d):
                raise AssertionError("computed flags disagree")
            out_d = attend(q, k, v, bias)
            diff = np.max(np.abs(out_w.data[:, comp] - out_d.data[:, comp]))
            if diff > 1e-5:
                raise AssertionError(f"trial {trial}: diff {diff}")

    def t_flop_ratio():
        plan_full = build_window_plan(256, 256, 16, halo=0)
        dense = flop_count(plan_full, 64, 8, dense=True)
        windowed = flop_count(plan_full, 64, 8)
        if dense % windowed or dense // windowed != 256:
            raise AssertionError(f"ratio {dense / windowed}")

    def t_patch_roundtrip():
        rng = np.random.default_rng(2)
        img = rng.random((32, 48, 3), dtype=np.float32)
        back = unpatchify(patchify(img, 8), 4, 6, 8)
        if not np.array_equal(img, back):
            raise AssertionError("patch roundtrip not bitwise")
        mask = np.zeros((32, 48), dtype=bool)
        mask[4:20, 8:30] = True
        edited = composite(img, 1.0 - img, mask, feather=0.0)
        if not np.array_equal(edited[~mask], img[~mask]):
            raise AssertionError("composite touched unmasked pixels")

    def t_euler_exact():
        c = np.float32([0.25, -1.5, 3.0])
        z0 = np.zeros(3, dtype=np.float32)
        for steps in (1, 7, 28):
            sched = FlowSchedule(steps, 0)
            out = euler_sample(lambda z, t: np.broadcast_to(c, z.shape),
                               z0.copy(), sched)
            exact = z0 - c * sched.t_start
            if np.max(np.abs(out - exact)) > 1e-6:
                raise AssertionError(f"{steps} steps off")

    def t_rng_snapshot():
        a = Rng(7, 3)
        a.normal((5,))
        state = a.get_state()
        x = a.normal((4,))
        b = Rng(7, 3)
        b.set_state(state)
        if not np.array_equal(x, b.normal((4,))):
            raise AssertionError("snapshot resume not bitwise")

    return [("tensor gradients", t_gradients),
            ("windowed attention equivalence", t_window_equivalence),
            ("flop ratio", t_flop_ratio),
            ("patch and composite roundtrips", t_patch_roundtrip),
            ("constant-field integrator", t_euler_exact),
            ("rng snapshot", t_rng_snapshot)]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="regionedit",
        description="Region-aware image editor: train, edit, benchmark.")
    parser.add_argument("--threads", type=int, default=0,
                        help="pin BLAS/OpenMP thread pools (set before "
                             "numpy loads)")
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=None,
                        help=f"key=value config file (default: "
                             f"${ENV_CONFIG} if set)")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--quiet", action="store_true")

    p = sub.add_parser("train", parents=[common],
                       help="train the editor on synthetic scenes")
    p.add_argument("--out", required=True, help="checkpoint directory")
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None, dest="batch_size")
    p.add_argument("--dataset-size", type=int, default=None,
                   dest="dataset_size")
    p.add_argument("--image-size", type=int, default=None, dest="image_size")
    p.add_argument("--resume", default=None,
                   help="checkpoint directory to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("edit", parents=[common], help="edit one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--op", required=True,
                   help="instruction: an op name or comma-separated ids")
    p.add_argument("--mask", default=None, help="region mask image")
    p.add_argument("--control", default=None, help="control image")
    p.add_argument("--out", required=True, help="output image path")
    p.add_argument("--save-mask", default=None, dest="save_mask",
                   help="write the refined mask here")
    p.set_defaults(func=cmd_edit)

    p = sub.add_parser("bench", parents=[common],
                       help="runtime scaling benchmark")
    p.add_argument("--checkpoint", default=None,
                   help="model to time (default: fresh untrained model)")
    p.add_argument("--out-csv", required=True, dest="out_csv")
    p.add_argument("--svg", default=None)
    p.add_argument("--image-size", type=int, default=None, dest="image_size")
    p.add_argument("--reps", type=int, default=None)
    p.add_argument("--ratios", default=None,
                   help="comma-separated edit area percentages")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("ablate-steps", parents=[common],
                       help="quality vs skipped flow steps")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out-csv", required=True, dest="out_csv")
    p.add_argument("--svg", default=None)
    p.add_argument("--fixtures", type=int, default=8)
    p.add_argument("--image-size", type=int, default=64, dest="image_size")
    p.add_argument("--skips", default=None,
                   help="comma-separated skip counts")
    p.set_defaults(func=cmd_ablate_steps)

    p = sub.add_parser("selftest", help="fast built-in correctness checks")
    p.set_defaults(func=cmd_selftest)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        _apply_threads(args.threads)
        return args.func(args)
    except (UsageError, ConfigError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 3
    except DivergenceError as exc:
        print(f"divergence: {exc}", file=sys.stderr)
        return 4
    except RegionEditError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
