"""Command-line surface: inpaint, train, bench and ablate.

Every command resolves its full configuration (flags over an optional JSON
config file over defaults), echoes it to out_dir/config.json, and can be
re-run byte-identically from that echo for deterministic settings.

Exit statuses: 0 success, 2 config error, 3 input error, 4 numeric error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .conditioning import MaskSequence, VideoTensor, validate_mask_sequence
from .denoiser import DenoiserConfig, init_denoiser_weights, weight_groups
from .diffusion import SamplerConfig, build_schedule
from .errors import ConfigError, InputError, NumericError, UndefinedMetricError
from .evalbench import (BenchProbe, MetricReport, background_preservation,
                        complexity_benchmark, temporal_consistency)
from .frames_io import (read_mask_dir, read_video_dir, write_gray_frames,
                        write_video_frames)
from .sampler import GuidanceConfig, SamplingRequest, sample_video
from .structure import extract_structure, has_control_branch, init_control_weights
from .tensor import Tensor
from .training import TrainConfig, gen_synthetic_dataset, train_stage
from .weights_io import load_weights, save_weights

TASK_OMEGA_S = {"swap": 0.0, "uncrop": 0.0, "retexture": 1.0}


@dataclass
class RunConfig:
    mode: str = "inpaint"
    video_dir: str | None = None
    mask_dir: str | None = None
    prompt: str = ""
    frames: int | None = None
    window: int = 16
    stride: int = 4
    omega: float = 0.3
    omega_s: float | None = None          # resolved from task when unset
    cfg_scale: float = 7.5
    steps: int | None = None              # inference or training steps per mode
    sampler: str = "ddim"
    eta: float = 0.0
    seed: int = 0
    weights_path: str | None = None
    out_dir: str = "out"
    workers: int | None = None            # falls back to $AVID_WORKERS, then 1
    strategy: str = "mf"
    timesteps: int = 50                   # diffusion schedule length T
    task: str = "swap"
    invert_mask: bool = False
    export_structure: bool = False
    model_widths: list[int] = field(default_factory=lambda: [32, 64, 96, 128])
    # train
    stage: str = "motion"
    batch_size: int = 2
    learning_rate: float = 1e-3
    cfg_dropout: float = 0.1
    dataset_size: int = 64
    train_frames: int = 16
    image_size: int = 32
    # ablate
    strategies: list[str] = field(default_factory=lambda: ["none", "mf"])
    omegas: list[float] = field(default_factory=lambda: [0.0, 0.3])
    # bench
    n_prime_list: list[int] = field(default_factory=lambda: [16, 32, 64, 128])
    reps: int = 5
    bench_channels: int = 8
    bench_height: int = 64
    bench_width: int = 32

    def resolved(self) -> "RunConfig":
        if self.task not in TASK_OMEGA_S:
            raise ConfigError(f"unknown task {self.task!r}")
        if self.omega_s is None:
            self.omega_s = TASK_OMEGA_S[self.task]
        if self.workers is None:
            env = os.environ.get("AVID_WORKERS", "")
            self.workers = int(env) if env else 1
        if self.steps is None:
            self.steps = 500 if self.mode == "train" else 10
        return self


_KNOWN_KEYS = {f.name for f in fields(RunConfig)}


def load_config_file(path) -> dict:
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise InputError(f"config file not found: {path}")
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})")
    unknown = set(raw) - _KNOWN_KEYS
    if unknown:
        raise ConfigError(f"{path}: unknown config keys {sorted(unknown)}")
    return raw


def _echo_config(cfg: RunConfig) -> None:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(asdict(cfg), indent=2) + "\n")


def _model_config(cfg: RunConfig, image_size: int) -> DenoiserConfig:
    widths = tuple(int(w) for w in cfg.model_widths)
    groups = min(8, min(widths))
    while any(w % groups for w in widths):
        groups -= 1
    res = (image_size // 2, image_size // 4, image_size // 8)
    return DenoiserConfig(level_widths=widths, norm_groups=groups,
                          image_size=image_size, spatial_attention_resolutions=res)


def _load_weights_tensors(path) -> tuple[dict[str, Tensor], dict]:
    try:
        arrays = load_weights(path)
    except FileNotFoundError:
        raise InputError(f"weights file not found: {path}")
    except ValueError as e:
        raise InputError(str(e))
    meta = {k.split("/", 1)[1]: float(np.ravel(v)[0]) for k, v in arrays.items()
            if k.startswith("_meta/")}
    params = {k: Tensor(v, name=k) for k, v in arrays.items()
              if not k.startswith("_meta/")}
    return params, meta


def _save_checkpoint(path, params: dict[str, Tensor], meta: dict) -> None:
    arrays = {k: t.data for k, t in params.items()}
    for k, v in meta.items():
        arrays[f"_meta/{k}"] = np.asarray([v], np.float32)
    save_weights(path, arrays)


def _prepare_model(cfg: RunConfig, image_size: int):
    model = _model_config(cfg, image_size)
    if cfg.weights_path:
        params, _ = _load_weights_tensors(cfg.weights_path)
    else:
        params = init_denoiser_weights(model, seed=cfg.seed)
    if cfg.omega_s and cfg.omega_s > 0 and not has_control_branch(params):
        print("note: no control-branch weights; initializing a zero (no-op) branch",
              file=sys.stderr)
        init_control_weights(model, params, seed=cfg.seed)
    return model, params


def _load_inputs(cfg: RunConfig) -> tuple[VideoTensor, MaskSequence]:
    if not cfg.video_dir or not cfg.mask_dir:
        raise ConfigError("video_dir and mask_dir are required")
    video = read_video_dir(cfg.video_dir)
    masks = read_mask_dir(cfg.mask_dir)
    if cfg.frames is not None and video.frames != cfg.frames:
        raise InputError(f"{cfg.video_dir}: expected {cfg.frames} frames, "
                         f"found {video.frames}")
    report = validate_mask_sequence(masks, video)
    if not report.ok:
        raise InputError(f"{cfg.mask_dir}: {report.violations[0].message}")
    for warning in report.warnings:
        print(f"warning: {warning}", file=sys.stderr)
    if cfg.invert_mask:
        masks = masks.inverted()
    return video, masks


def _make_request(cfg: RunConfig, video, masks, omega=None, strategy=None) -> SamplingRequest:
    guidance = GuidanceConfig(strategy=strategy or cfg.strategy,
                              omega=cfg.omega if omega is None else omega,
                              omega_s=cfg.omega_s, cfg_scale=cfg.cfg_scale)
    sampler = SamplerConfig(kind=cfg.sampler, inference_steps=cfg.steps,
                            eta=cfg.eta, seed=cfg.seed)
    return SamplingRequest(video=video, masks=masks, prompt=cfg.prompt,
                           guidance=guidance, sampler=sampler,
                           window=cfg.window, stride=cfg.stride)


def _metrics(edited: VideoTensor, source: VideoTensor, masks: MaskSequence,
             runtime_ms: float, cfg: RunConfig) -> MetricReport:
    try:
        bp = background_preservation(edited, source, masks)
    except UndefinedMetricError as e:
        print(f"note: BP undefined ({e})", file=sys.stderr)
        bp = None
    try:
        tc = temporal_consistency(edited) if edited.frames >= 2 else None
    except UndefinedMetricError as e:
        print(f"note: TC undefined ({e})", file=sys.stderr)
        tc = None
    return MetricReport(bp=bp, tc=tc, runtime_ms=runtime_ms, config=asdict(cfg))


def cmd_inpaint(cfg: RunConfig) -> int:
    if cfg.window > 24:
        raise ConfigError(f"window {cfg.window} exceeds the 24-frame temporal limit")
    video, masks = _load_inputs(cfg)
    if video.height % 8 or video.width % 8 or video.height != video.width:
        raise InputError(f"{cfg.video_dir}: frames must be square with size "
                         f"divisible by 8, got {video.height}x{video.width}")
    model, params = _prepare_model(cfg, video.height)
    sched = build_schedule(cfg.timesteps)
    request = _make_request(cfg, video, masks)

    t0 = time.perf_counter()
    edited = sample_video(request, params, model, sched, workers=cfg.workers)
    runtime_ms = (time.perf_counter() - t0) * 1e3

    out = Path(cfg.out_dir)
    write_video_frames(out / "frames", edited)
    if cfg.export_structure:
        write_gray_frames(out / "structure", extract_structure(video, masks))
    report = _metrics(edited, video, masks, runtime_ms, cfg)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.json").write_text(json.dumps(report.to_dict(), indent=2) + "\n")
    _echo_config(cfg)
    print(f"inpainted {video.frames} frames -> {out / 'frames'}  "
          f"BP={report.bp} TC={report.tc} ({runtime_ms:.0f} ms)")
    return 0


def cmd_train(cfg: RunConfig) -> int:
    if cfg.stage not in ("motion", "control"):
        raise ConfigError(f"unknown stage {cfg.stage!r}")
    if cfg.stage == "control" and not cfg.weights_path:
        raise ConfigError("control stage requires a motion-stage checkpoint "
                          "(--weights-path)")
    model = _model_config(cfg, cfg.image_size)
    start_step = 0
    if cfg.weights_path:
        params, meta = _load_weights_tensors(cfg.weights_path)
        stages = {0.0: "motion", 1.0: "control"}
        if stages.get(meta.get("stage", -1.0)) == cfg.stage:
            start_step = int(meta.get("step", 0))
    else:
        params = init_denoiser_weights(model, seed=cfg.seed)
    if cfg.stage == "control" and not has_control_branch(params):
        init_control_weights(model, params, seed=cfg.seed)

    dataset = gen_synthetic_dataset(cfg.dataset_size, cfg.seed,
                                    frames=cfg.train_frames, size=cfg.image_size)
    sched = build_schedule(cfg.timesteps)
    train_cfg = TrainConfig(stage=cfg.stage, steps=cfg.steps,
                            batch_size=cfg.batch_size,
                            learning_rate=cfg.learning_rate,
                            cfg_dropout_prob=cfg.cfg_dropout, seed=cfg.seed)

    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "trace.jsonl", "w") as trace_file:
        def on_step(entry):
            trace_file.write(json.dumps(entry) + "\n")
            trace_file.flush()
        trace = train_stage(train_cfg, dataset, params, model, sched,
                            start_step=start_step, on_step=on_step)

    final_step = trace[-1]["step"] + 1 if trace else start_step
    meta = {"step": float(final_step), "stage": 0.0 if cfg.stage == "motion" else 1.0}
    _save_checkpoint(out / "checkpoint.avdw", params, meta)
    _echo_config(cfg)
    first = trace[0]["loss"] if trace else float("nan")
    last = trace[-1]["loss"] if trace else float("nan")
    print(f"trained stage={cfg.stage} steps {start_step}..{final_step - 1} "
          f"loss {first:.4f} -> {last:.4f}; checkpoint {out / 'checkpoint.avdw'}")
    return 0


def cmd_bench(cfg: RunConfig) -> int:
    probe = BenchProbe(channels=cfg.bench_channels, height=cfg.bench_height,
                       width=cfg.bench_width, seed=cfg.seed)
    report = complexity_benchmark(cfg.n_prime_list, window=cfg.window,
                                  stride=cfg.stride, probe=probe, reps=cfg.reps,
                                  workers=cfg.workers, strategy=cfg.strategy)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "scaling.json").write_text(json.dumps(report.to_dict(), indent=2) + "\n")
    (out / "scaling.csv").write_text("\n".join(report.csv_rows()) + "\n")
    _echo_config(cfg)
    print(f"direct exponent {report.direct_exponent:.3f}, "
          f"windowed exponent {report.windowed_exponent:.3f} "
          f"over N'={report.n_primes}")
    return 0


def cmd_ablate(cfg: RunConfig) -> int:
    if cfg.window > 24:
        raise ConfigError(f"window {cfg.window} exceeds the 24-frame temporal limit")
    video, masks = _load_inputs(cfg)
    model, params = _prepare_model(cfg, video.height)
    sched = build_schedule(cfg.timesteps)
    out = Path(cfg.out_dir)
    rows = []
    for strategy in cfg.strategies:
        for omega in cfg.omegas:
            request = _make_request(cfg, video, masks, omega=omega, strategy=strategy)
            t0 = time.perf_counter()
            edited = sample_video(request, params, model, sched, workers=cfg.workers)
            runtime_ms = (time.perf_counter() - t0) * 1e3
            cell_dir = out / "cells" / f"{strategy}_w{omega:g}"
            write_video_frames(cell_dir, edited)
            report = _metrics(edited, video, masks, runtime_ms, cfg)
            rows.append({"strategy": strategy, "omega": omega,
                         "tc": report.tc, "bp": report.bp,
                         "out_dir": str(cell_dir)})
            print(f"cell strategy={strategy} omega={omega:g}: "
                  f"TC={report.tc} BP={report.bp}")
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(json.dumps(rows, indent=2) + "\n")
    _echo_config(cfg)
    return 0


def _add_common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="JSON config file; flags override its values")
    p.add_argument("--out-dir", dest="out_dir")
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--weights-path", dest="weights_path")
    p.add_argument("--timesteps", type=int)
    p.add_argument("--window", type=int)
    p.add_argument("--stride", type=int)
    p.add_argument("--model-widths", dest="model_widths",
                   type=lambda s: [int(x) for x in s.split(",")])


def _add_sampling(p: argparse.ArgumentParser):
    p.add_argument("--video-dir", dest="video_dir")
    p.add_argument("--mask-dir", dest="mask_dir")
    p.add_argument("--prompt")
    p.add_argument("--frames", type=int)
    p.add_argument("--omega", type=float)
    p.add_argument("--omega-s", dest="omega_s", type=float)
    p.add_argument("--cfg-scale", dest="cfg_scale", type=float)
    p.add_argument("--steps", type=int)
    p.add_argument("--sampler", choices=["ddim", "ddpm"])
    p.add_argument("--eta", type=float)
    p.add_argument("--strategy", choices=["none", "mf", "ff", "sc", "msc"])
    p.add_argument("--task", choices=["swap", "uncrop", "retexture"])
    p.add_argument("--invert-mask", dest="invert_mask", action="store_true",
                   default=None)
    p.add_argument("--export-structure", dest="export_structure",
                   action="store_true", default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vidfill",
                                     description="desk-scale diffusion video inpainting")
    sub = parser.add_subparsers(dest="mode", required=True)

    p = sub.add_parser("inpaint", help="edit a masked region of a video")
    _add_common(p)
    _add_sampling(p)

    p = sub.add_parser("train", help="train the motion or control stage")
    _add_common(p)
    p.add_argument("--stage", choices=["motion", "control"])
    p.add_argument("--steps", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--learning-rate", dest="learning_rate", type=float)
    p.add_argument("--cfg-dropout", dest="cfg_dropout", type=float)
    p.add_argument("--dataset-size", dest="dataset_size", type=int)
    p.add_argument("--train-frames", dest="train_frames", type=int)
    p.add_argument("--image-size", dest="image_size", type=int)

    p = sub.add_parser("bench", help="runtime scaling of direct vs windowed sampling")
    _add_common(p)
    p.add_argument("--n-prime-list", dest="n_prime_list",
                   type=lambda s: [int(x) for x in s.split(",")])
    p.add_argument("--reps", type=int)
    p.add_argument("--strategy", choices=["none", "mf", "ff", "sc", "msc"])
    p.add_argument("--bench-channels", dest="bench_channels", type=int)
    p.add_argument("--bench-height", dest="bench_height", type=int)
    p.add_argument("--bench-width", dest="bench_width", type=int)

    p = sub.add_parser("ablate", help="grid of attention strategies and omegas")
    _add_common(p)
    _add_sampling(p)
    p.add_argument("--strategies", type=lambda s: s.split(","))
    p.add_argument("--omegas", type=lambda s: [float(x) for x in s.split(",")])
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig()
    file_values = load_config_file(args.config) if getattr(args, "config", None) else {}
    if file_values.get("mode", args.mode) != args.mode:
        raise ConfigError(f"config file is for mode {file_values['mode']!r}, "
                          f"but the {args.mode!r} command was invoked")
    for key, value in file_values.items():
        setattr(cfg, key, value)
    for key, value in vars(args).items():
        if key in ("config",) or value is None:
            continue
        if key in _KNOWN_KEYS:
            setattr(cfg, key, value)
    cfg.mode = args.mode
    return cfg.resolved()


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
        handler = {"inpaint": cmd_inpaint, "train": cmd_train,
                   "bench": cmd_bench, "ablate": cmd_ablate}[cfg.mode]
        return handler(cfg)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except InputError as e:
        print(f"input error: {e}", file=sys.stderr)
        return 3
    except NumericError as e:
        print(f"numeric error: {e}", file=sys.stderr)
        return 4
    except ValueError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
