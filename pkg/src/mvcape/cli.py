"""Command-line entry point: ``mvcape <subcommand> [flags]``.

Every subcommand accepts ``--config FILE`` with ``key=value`` lines; explicit
flags override file values. A resolved manifest is written next to outputs.
"""

from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

import numpy as np
import torch

from .cape import CapeConfig, Mode, apply_cape
from .datagen import PoseRanges, generate_dataset, read_dataset, write_ppm
from .diffusion import NoiseSchedule, SamplerConfig, sample, sample_autoregressive, sample_direct
from .evaluate import DEFAULT_REF_COUNTS, evaluate
from .model import ModelConfig, MultiViewModel, load_checkpoint, save_checkpoint
from .pose import Pose4, RadiusBounds
from .training import TrainConfig, train
from .verify import random_pose4, random_pose6, run_checks

log = logging.getLogger("mvcape")


class CliError(Exception):
    """A user-facing failure reported without a traceback."""


def int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def read_config(path: str) -> dict[str, str]:
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise CliError(f"cannot read config file {path}: {exc.strerror}") from None
    out = {}
    for n, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CliError(f"{path}:{n}: expected key=value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def write_manifest(path: Path, args: argparse.Namespace, extra: dict | None = None) -> None:
    rows = {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "config")}
    rows.update(extra or {})
    text = "".join(f"{k}={','.join(map(str, v)) if isinstance(v, (list, tuple)) else v}\n" for k, v in rows.items())
    path.write_text(text)


def _mode(value: str | None) -> Mode | None:
    return None if value is None else Mode(value)


# -- subcommands ---------------------------------------------------------------


def cmd_datagen(args) -> int:
    ranges = PoseRanges(bounds=RadiusBounds(args.r_min, args.r_max))
    pose_mode = 6 if args.mode == "6dof" else 4
    out = Path(args.out)
    try:
        generate_dataset(
            out, args.scenes, args.views, seed=args.seed, image_side=args.image_side, ranges=ranges, pose_mode=pose_mode
        )
    except OSError as exc:
        raise CliError(f"cannot write dataset {out}: {exc.strerror}") from None
    write_manifest(out.with_suffix(out.suffix + ".manifest"), args)
    print(f"wrote {args.scenes} scenes x {args.views} views to {out}")
    return 0


def _load_dataset(path: str):
    try:
        return read_dataset(path)
    except FileNotFoundError:
        raise CliError(f"dataset {path} does not exist; create it with `mvcape datagen --out {path}`") from None
    except ValueError as exc:
        raise CliError(str(exc)) from None


def _load_model(path: str) -> MultiViewModel:
    try:
        return load_checkpoint(path).eval()
    except FileNotFoundError:
        raise CliError(f"checkpoint {path} does not exist; train one with `mvcape train`") from None
    except ValueError as exc:
        raise CliError(str(exc)) from None


def _check_pose_mode(mode: Mode, ds, what: str) -> None:
    want = 4 if mode is Mode.FOUR_DOF else 6
    if ds.pose_mode != want:
        raise CliError(
            f"{what} uses {mode.value} but the dataset stores {ds.pose_mode} DoF poses; "
            f"regenerate it with `mvcape datagen --mode {mode.value}`"
        )


def cmd_train(args) -> int:
    ds = _load_dataset(args.data)
    mode = _mode(args.mode) or (Mode.FOUR_DOF if ds.pose_mode == 4 else Mode.SIX_DOF)
    _check_pose_mode(mode, ds, "training")
    try:
        model_cfg = ModelConfig(
            image_side=ds.image_side,
            base_channels=args.base_channels,
            dim=args.dim,
            heads=args.heads,
            cape=CapeConfig(mode, ds.bounds),
            prediction=args.prediction,
        )
    except ValueError as exc:
        raise CliError(f"invalid model configuration: {exc}") from None
    cfg = TrainConfig(
        steps=args.steps,
        batch_size=args.batch_size,
        n_refs=args.n_refs,
        n_targets=args.n_targets,
        lr=args.lr,
        warmup=min(args.warmup, args.steps),
        seed=args.seed,
        t_shift=args.t_shift,
    )
    out = Path(args.out)
    torch.set_num_threads(args.threads)
    loss_log = open(out.with_suffix(".loss.txt"), "w")

    def on_step(step, loss, model):
        loss_log.write(f"{step} {loss:.6f}\n")
        if args.checkpoint_every and step and step % args.checkpoint_every == 0:
            save_checkpoint(out, model)

    with loss_log:
        res = train(ds, model_cfg, cfg, callback=on_step)
    save_checkpoint(out, res.model)
    losses = res.losses
    write_manifest(
        out.with_suffix(out.suffix + ".manifest"),
        args,
        {"mode": mode.value, "seconds": f"{res.seconds:.1f}", "final_loss": f"{np.mean(losses[-20:]):.6f}"},
    )
    print(f"trained {cfg.steps} steps in {res.seconds:.1f}s; mean loss over last 20 steps {np.mean(losses[-20:]):.4f}")
    return 0


def _sampler(args) -> SamplerConfig:
    return SamplerConfig(
        mode=args.sampler,
        steps=args.steps,
        deterministic=not args.stochastic,
        min_targets=args.min_targets,
        seed=args.seed,
    )


def cmd_sample(args) -> int:
    model = _load_model(args.checkpoint)
    ds = _load_dataset(args.data)
    _check_pose_mode(model.cfg.cape.mode, ds, "the checkpoint")
    if not 0 <= args.scene < ds.scene_count:
        raise CliError(f"scene {args.scene} out of range (dataset has {ds.scene_count})")
    for v in args.refs + args.targets:
        if not 0 <= v < ds.views_per_scene:
            raise CliError(f"view {v} out of range (scenes have {ds.views_per_scene} views)")
    if not args.refs or not args.targets:
        raise CliError("need at least one reference view and one target view")
    refs = ds.images[args.scene, args.refs]
    rp = [ds.pose(args.scene, v) for v in args.refs]
    tp = [ds.pose(args.scene, v) for v in args.targets]
    images = sample(model, refs, rp, tp, NoiseSchedule(), _sampler(args))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for v, img in zip(args.targets, images):
        write_ppm(out / f"scene{args.scene:04d}_view{v:03d}.ppm", img)
    write_manifest(
        out / "manifest.txt",
        args,
        {f"pose_view{v}": ",".join(repr(float(x)) for x in p.as_array()) for v, p in zip(args.targets, tp)},
    )
    print(f"wrote {len(images)} images to {out}")
    return 0


def cmd_eval(args) -> int:
    model = _load_model(args.checkpoint)
    ds = _load_dataset(args.data)
    _check_pose_mode(model.cfg.cape.mode, ds, "the checkpoint")
    if args.scenes:
        ds = ds.subset(range(min(args.scenes, ds.scene_count)))
    try:
        report = evaluate(model, ds, args.refs, args.pool, _sampler(args), reproduction=args.reproduce)
    except ValueError as exc:
        raise CliError(str(exc)) from None
    out = Path(args.out)
    report.write_csv(out)
    write_manifest(out.with_suffix(out.suffix + ".manifest"), args)
    for c in report.conditions():
        print(f"{c:>10}  PSNR {report.mean_psnr(c):7.3f} dB  SSIM {report.mean_ssim(c):.4f}")
    return 0


def cmd_verify(args) -> int:
    results = run_checks(args.seed)
    failed = sum(not r.passed for r in results)
    print(f"{len(results) - failed}/{len(results)} properties hold")
    return 1 if failed else 0


def _time(fn, repeat: int = 1) -> float:
    t0 = time.perf_counter()
    for _ in range(repeat):
        fn()
    return (time.perf_counter() - t0) / repeat


def cmd_bench(args) -> int:
    rng = np.random.default_rng(args.seed)
    torch.manual_seed(args.seed)
    lines = []
    for mode, make in ((Mode.FOUR_DOF, random_pose4), (Mode.SIX_DOF, random_pose6)):
        cfg = CapeConfig(mode)
        v = rng.normal(size=args.dim)
        p = make(rng)
        sec = _time(lambda: apply_cape(v, p, cfg), 2000)
        lines.append(f"cape {mode.value} d={args.dim}: {1 / sec:,.0f} vectors/s")
    model = MultiViewModel(ModelConfig(image_side=args.image_side)).eval()
    sampler = SamplerConfig(steps=args.steps, min_targets=1, pad=False, seed=args.seed)
    refs = rng.random((1, args.image_side, args.image_side, 3)).astype(np.float32)
    rp = [random_pose4(rng)]
    for m in args.targets:
        tp = [Pose4(2 * np.pi * i / m, 1.2, 0.0, 2.5) for i in range(m)]
        direct = _time(lambda: sample_direct(model, refs, rp, tp, sampler=sampler))
        auto = _time(lambda: sample_autoregressive(model, refs, rp, tp, sampler=sampler))
        lines.append(
            f"M={m:3d}  direct {direct:7.3f}s ({direct / m:.3f}s/view)  autoregressive {auto:7.3f}s ({auto / m:.3f}s/view)"
        )
    for line in lines:
        print(line)
    if args.out:
        Path(args.out).write_text("\n".join(lines) + "\n")
        write_manifest(Path(args.out).with_suffix(".manifest"), args)
    return 0


def cmd_export(args) -> int:
    ds = _load_dataset(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    scenes = args.scenes or list(range(ds.scene_count))
    views = args.views or list(range(ds.views_per_scene))
    for s in scenes:
        for v in views:
            if not (0 <= s < ds.scene_count and 0 <= v < ds.views_per_scene):
                raise CliError(f"scene {s} view {v} is out of range")
            write_ppm(out / f"scene{s:04d}_view{v:03d}.ppm", ds.images[s, v])
    print(f"exported {len(scenes) * len(views)} images to {out}")
    return 0


# -- parser --------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value file; flags override its values")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("-v", "--verbose", action="store_true")

    sampling = argparse.ArgumentParser(add_help=False)
    sampling.add_argument("--sampler", choices=["direct", "autoregressive"], default="direct")
    sampling.add_argument("--steps", type=int, default=50, help="DDIM steps")
    sampling.add_argument("--stochastic", action="store_true", help="eta=1 instead of deterministic DDIM")
    sampling.add_argument("--min-targets", type=int, default=15)

    p = argparse.ArgumentParser(prog="mvcape", description="Camera-pose-encoded multi-view diffusion toolkit.")
    sub = p.add_subparsers(dest="command", required=True)
    p.subcommands = sub.choices

    s = sub.add_parser("datagen", parents=[common], help="render a posed-image dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--scenes", type=int, default=200)
    s.add_argument("--views", type=int, default=12)
    s.add_argument("--image-side", type=int, default=32)
    s.add_argument("--mode", choices=["4dof", "6dof"], default="4dof")
    s.add_argument("--r-min", type=float, default=1.5)
    s.add_argument("--r-max", type=float, default=4.0)
    s.set_defaults(func=cmd_datagen)

    s = sub.add_parser("train", parents=[common], help="train a model on a dataset")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True, help="checkpoint path")
    s.add_argument("--mode", choices=["4dof", "6dof"], help="defaults to the dataset's pose mode")
    s.add_argument("--steps", type=int, default=3000)
    s.add_argument("--batch-size", type=int, default=8)
    s.add_argument("--n-refs", type=int, default=3)
    s.add_argument("--n-targets", type=int, default=3)
    s.add_argument("--lr", type=float, default=1e-3)
    s.add_argument("--warmup", type=int, default=100)
    s.add_argument("--base-channels", type=int, default=32)
    s.add_argument("--dim", type=int, default=64)
    s.add_argument("--heads", type=int, default=4)
    s.add_argument("--prediction", choices=["v", "eps"], default="v", help="network target")
    s.add_argument("--t-shift", type=float, default=TrainConfig.t_shift, help="timestep skew toward high noise")
    s.add_argument("--checkpoint-every", type=int, default=500)
    s.add_argument("--threads", type=int, default=1, help="torch intra-op threads")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("sample", parents=[common, sampling], help="generate target views of one scene")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--scene", type=int, default=0)
    s.add_argument("--refs", type=int_list, default=[0])
    s.add_argument("--targets", type=int_list, default=[1, 2, 3])
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_sample)

    s = sub.add_parser("eval", parents=[common, sampling], help="score novel views per reference count")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--refs", type=int_list, default=list(DEFAULT_REF_COUNTS))
    s.add_argument("--pool", type=int, default=10, help="leading views per scene reserved as references")
    s.add_argument("--scenes", type=int, default=0, help="limit to the first N scenes")
    s.add_argument("--reproduce", action="store_true", help="also score reference-pose reproduction")
    s.add_argument("--out", required=True, help="CSV report path")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("verify", parents=[common], help="run the built-in invariant checks")
    s.set_defaults(func=cmd_verify)

    s = sub.add_parser("bench", parents=[common], help="time CaPE and the two samplers")
    s.add_argument("--dim", type=int, default=64)
    s.add_argument("--image-side", type=int, default=32)
    s.add_argument("--steps", type=int, default=10)
    s.add_argument("--targets", type=int_list, default=[1, 2, 4, 8])
    s.add_argument("--out")
    s.set_defaults(func=cmd_bench)

    s = sub.add_parser("export", parents=[common], help="write dataset views as PPM images")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--scenes", type=int_list, default=[])
    s.add_argument("--views", type=int_list, default=[])
    s.set_defaults(func=cmd_export)
    return p


def apply_config(parser: argparse.ArgumentParser, argv: list[str]) -> None:
    """Install config-file values as subcommand defaults so flags still win."""
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if not known.config:
        return
    subs = parser.subcommands
    command = next((a for a in argv if a in subs), None)
    if command is None:
        return
    sub = subs[command]
    values = read_config(known.config)
    actions = {a.dest: a for a in sub._actions}
    unknown = sorted(set(values) - set(actions) - {"config"})
    if unknown:
        raise CliError(f"{known.config}: unknown keys for `{command}`: {', '.join(unknown)}")
    defaults = {}
    for key, raw in values.items():
        a = actions[key]
        if isinstance(a, argparse._StoreTrueAction):
            defaults[key] = raw.lower() in ("1", "true", "yes", "on")
            continue
        try:
            defaults[key] = (a.type or str)(raw)
        except (ValueError, argparse.ArgumentTypeError) as exc:
            raise CliError(f"{known.config}: bad value for {key}: {exc}") from None
        if a.choices and defaults[key] not in a.choices:
            raise CliError(f"{known.config}: {key} must be one of {', '.join(a.choices)}")
        a.required = False
    sub.set_defaults(**defaults)


def parse_args(argv: list[str] | None = None) -> argparse.Namespace:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    apply_config(parser, argv)
    return parser.parse_args(argv)


def main(argv: list[str] | None = None) -> int:
    try:
        args = parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
        return args.func(args)
    except (CliError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
