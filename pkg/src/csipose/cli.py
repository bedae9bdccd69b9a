"""Command-line entry points. Every subcommand writes into one run directory
together with a manifest.json listing the arguments and the files produced.

Exit codes: 0 success, 1 a processing stage failed, 2 bad configuration or I/O.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__, aigc, csi, dataset, formats, geometry, metrics, pipeline, scheduler, skeleton_net, spectral, synth


class ConfigError(Exception):
    """Bad arguments, unreadable inputs or unwritable outputs (exit code 2)."""


def _read_config(path) -> dict:
    if path is None:
        return {}
    try:
        return formats.read_json(path)
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e.strerror}") from None
    except csi.CsiError as e:
        raise ConfigError(str(e)) from None


def _need_file(path, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"{what} {p} not found")
    return p


# --- subcommands; each returns the paths it wrote ----------------------------------

def cmd_synth(args, out: Path) -> list:
    scene, trace = synth.preset_scenario(args.preset, args.seed, duration_s=args.duration)
    streams, _ = synth.render_csi(scene, trace, args.mode)
    written = [out / "scene.json", out / "trace.json"]
    formats.write_json(written[0], formats.scene_to_dict(scene))
    formats.write_json(written[1], formats.trace_to_dict(trace))
    for i, link in enumerate(scene.links):
        s = synth.inject_impairments(streams[link.id], args.cfo_hz, args.snr_db, synth.link_seed(args.seed, i))
        p = out / f"{link.id}.csb"
        formats.write_csb1(p, s)
        written.append(p)
        if args.csv:
            p = out / f"{link.id}.csv"
            formats.atomic_write(p, formats.csv_text(s))
            written.append(p)
    return written


def _load_stream(path, link_id: str) -> csi.CsiStream:
    p = _need_file(path, "CSI file")
    try:
        return formats.read_csb1(p, link_id)
    except csi.CsiError as e:
        raise ConfigError(str(e)) from None


def _frame(stream: csi.CsiStream, index: int):
    if not -len(stream) <= index < len(stream):
        raise ConfigError(f"frame {index} out of range for a {len(stream)}-frame stream")
    return stream[index]


def cmd_estimate(args, out: Path) -> list:
    """One LinkObservation JSON line per requested frame (all frames by default)."""
    stream = _load_stream(args.csi, args.link_id or Path(args.csi).stem)
    if args.remove_static:
        stream = csi.remove_static(stream, args.static_window)
    indices = args.frame if args.frame else range(len(stream))
    lines = [json.dumps(spectral.observe(_frame(stream, i), stream.config).to_json()) for i in indices]
    p = out / f"{stream.link_id}.jsonl"
    formats.atomic_write(p, "\n".join(lines) + "\n")
    return [p]


def _read_observations(path) -> list:
    p = _need_file(path, "observation file")
    try:
        return [spectral.LinkObservation.from_json(json.loads(line))
                for line in p.read_text().splitlines() if line.strip()]
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
        raise ConfigError(f"{p}: malformed observation line: {e}") from None


def cmd_locate(args, out: Path) -> list:
    """Position from the `--line`-th observation of each link's JSON-lines file."""
    scene = formats.scene_from_dict(_read_config(_need_file(args.scene, "scene")))
    by_link = {}
    for path in args.observations:
        for ob in _read_observations(path):
            by_link.setdefault(ob.link_id, []).append(ob)
    links = [l for l in scene.links if l.id in by_link]
    unknown = set(by_link) - {l.id for l in scene.links}
    if unknown:
        raise ConfigError(f"observations for links not in the scene: {sorted(unknown)}")
    obs = []
    for l in links:
        if not -len(by_link[l.id]) <= args.line < len(by_link[l.id]):
            raise ConfigError(f"link {l.id} has {len(by_link[l.id])} observations, line {args.line} requested")
        obs.append(by_link[l.id][args.line])
    est = geometry.locate_user(obs, links, use_aoa=not args.no_aoa)
    p = out / "position.json"
    formats.write_json(p, {"line": args.line, "links": [l.id for l in links], **est.to_json()})
    return [p]


def cmd_train(args, out: Path) -> list:
    fcfg = dataset.FeatureConfig(snr_db=args.snr_db, multiscale=not args.no_multiscale)
    data, _ = dataset.oracle_dataset(args.preset, args.seed, args.samples, fcfg, args.n_links)
    radio = csi.RadioConfig.default()
    net = skeleton_net.init_net(
        skeleton_net.NetConfig(input_shape=(fcfg.window, radio.n_subcarriers, fcfg.channels)), args.seed)
    tcfg = skeleton_net.TrainConfig(epochs=args.epochs, batch_size=args.batch_size,
                                    learning_rate=args.lr, seed=args.seed)
    def log(epoch, hist):
        print(f"epoch {epoch}: loss {hist.train_loss[-1]:.4f} joint error {hist.train_joint_err[-1]:.3f} px",
              file=sys.stderr)

    net, hist = skeleton_net.train(net, data, tcfg, log=log if args.verbose else None)
    ckpt, hist_path = out / "skeleton_net.ckpt", out / "history.csv"
    skeleton_net.save_checkpoint(net, ckpt)
    formats.atomic_write(hist_path, hist.to_csv())
    return [ckpt, hist_path]


def cmd_run(args, out: Path) -> list:
    d = _read_config(args.config)
    for key, val in (("preset", args.preset), ("checkpoint", args.checkpoint), ("n_links", args.n_links),
                     ("aigc_endpoint", args.endpoint), ("n_frames", args.frames)):
        if val is not None:
            d[key] = val
    d["seed"] = args.seed
    if args.no_multiscale:
        d["multiscale"] = False
    if args.aigc_stub:
        d["aigc_stub"] = True
    elif args.endpoint:
        d["aigc_stub"] = False
    d["out_dir"] = str(out)
    try:
        cfg = pipeline.PipelineConfig.from_dict(d)
    except (TypeError, csi.CsiError) as e:
        raise ConfigError(f"invalid pipeline config: {e}") from None
    if not cfg.checkpoint or not Path(cfg.checkpoint).is_file():
        raise ConfigError(f"stage 'skeleton-net': checkpoint {cfg.checkpoint} not found")
    report = pipeline.run_pipeline(cfg)
    s = report.to_dict()["summary"]
    print(json.dumps(s))
    return sorted(out.glob("frame*.png")) + [out / "report.json"]


_POLICIES = ("threshold", "random", "ok", "posture_mismatch", "quality_low")


def cmd_schedule_sim(args, out: Path) -> list:
    """Config schema: {"schedule": {ScheduleConfig fields}, "frames": int,
    "initial_links": int, "policy": one of _POLICIES, "target": float,
    "quality": {ParametricQuality fields}}."""
    d = _read_config(args.config)
    unknown = set(d) - {"schedule", "frames", "initial_links", "policy", "target", "quality"}
    if unknown:
        raise ConfigError(f"unknown schedule-sim keys: {sorted(unknown)}")
    try:
        cfg = scheduler.config_from_dict(d.get("schedule", {}))
        quality = scheduler.ParametricQuality(**d.get("quality", {}))
    except (TypeError, csi.CsiError) as e:
        raise ConfigError(f"invalid schedule-sim config: {e}") from None
    kind = d.get("policy", "threshold")
    if kind not in _POLICIES:
        raise ConfigError(f"unknown policy {kind!r}; choose from {', '.join(_POLICIES)}")
    if kind == "threshold":
        policy = scheduler.ThresholdPolicy(float(d.get("target", 0.8)))
    elif kind == "random":
        policy = scheduler.random_policy()
    else:
        policy = scheduler.constant_policy(kind)
    frames = int(args.frames or d.get("frames", 100))
    trace = scheduler.simulate(cfg, quality, policy, frames, args.seed, int(d.get("initial_links", 5)))
    p = out / "schedule.csv"
    formats.atomic_write(p, trace.to_csv())
    return [p]


def _reference(args) -> metrics.ReferenceStats:
    if not args.ref_stats:
        return metrics.default_reference()
    try:
        return metrics.ReferenceStats.from_json(_need_file(args.ref_stats, "reference stats").read_text())
    except (json.JSONDecodeError, KeyError) as e:
        raise ConfigError(f"{args.ref_stats}: malformed reference stats: {e}") from None


def cmd_metrics(args, out: Path) -> list:
    try:
        img = formats.read_image(_need_file(args.image, "image"))
        ref_img = formats.read_image(_need_file(args.reference, "reference image")) if args.reference else None
    except OSError as e:
        raise ConfigError(f"cannot read image: {e}") from None
    ref = _reference(args)
    result = {"tv": metrics.total_variation(img), "naturalness": metrics.naturalness_score(img, ref)}
    if ref_img is not None:
        result["ssim"] = metrics.ssim(img, ref_img)
    print(json.dumps(result))
    written = [out / "metrics.json"]
    formats.write_json(written[0], result)
    if args.save_ref_stats:
        written.append(out / "reference_stats.json")
        formats.atomic_write(written[1], ref.to_json())
    return written


def cmd_link_sweep(args, out: Path) -> list:
    if not args.aigc_stub:
        raise ConfigError("the link-count sweep runs offline only; pass --aigc-stub")
    cfg = pipeline.SweepConfig(n_seeds=args.seeds, seed=args.seed, train_samples=args.train_samples,
                               train_epochs=args.train_epochs, n_frames=args.frames)
    log = (lambda m: print(m, file=sys.stderr)) if args.verbose else None
    res = pipeline.link_count_sweep(cfg, log=log)
    csv_path, summary = out / "link_sweep.csv", out / "summary.json"
    formats.atomic_write(csv_path, res.to_csv())
    formats.write_json(summary, {"verdicts": res.verdicts(), "n_links": res.n_links,
                                 "steps": res.steps, "aigc_time_s": res.aigc_time_s})
    print(res.to_csv(), end="")
    return [csv_path, summary]


# --- argument parsing ------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="seed for every random draw (default 0)")
    common.add_argument("--out", default="run", help="run directory (default ./run)")

    p = argparse.ArgumentParser(prog="csipose", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="render a preset scenario to CSB1 streams")
    s.add_argument("--preset", choices=synth.PRESETS, default="case_study_5rx")
    s.add_argument("--duration", type=float, default=None, help="seconds (preset default if omitted)")
    s.add_argument("--mode", choices=("full", "dynamic", "static"), default="full")
    s.add_argument("--snr-db", type=float, default=np.inf)
    s.add_argument("--cfo-hz", type=float, default=0.0)
    s.add_argument("--csv", action="store_true", help="also export t,k,a,re,im CSV")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("estimate", parents=[common], help="ToF and AoA per CSI frame, as JSON lines")
    s.add_argument("--csi", required=True, help="CSB1 file")
    s.add_argument("--link-id", default=None, help="defaults to the file name stem")
    s.add_argument("--frame", type=int, action="append", help="frame index; repeatable (default: all)")
    s.add_argument("--remove-static", action="store_true")
    s.add_argument("--static-window", type=float, default=1.0, help="seconds")
    s.set_defaults(func=cmd_estimate)

    s = sub.add_parser("locate", parents=[common], help="locate the user from per-link observations")
    s.add_argument("--scene", required=True, help="scene JSON")
    s.add_argument("--observations", nargs="+", required=True, help="JSON-lines files from `estimate`")
    s.add_argument("--line", type=int, default=0, help="observation index within each file")
    s.add_argument("--no-aoa", action="store_true", help="ellipse constraints only")
    s.set_defaults(func=cmd_locate)

    s = sub.add_parser("train", parents=[common], help="train the skeleton net on oracle windows")
    s.add_argument("--preset", choices=synth.PRESETS, default="case_study_5rx")
    s.add_argument("--samples", type=int, default=200)
    s.add_argument("--epochs", type=int, default=64)
    s.add_argument("--batch-size", type=int, default=32)
    s.add_argument("--lr", type=float, default=1e-3)
    s.add_argument("--snr-db", type=float, default=20.0)
    s.add_argument("--n-links", type=int, default=None)
    s.add_argument("--no-multiscale", action="store_true", help="uniform link weights, 2 channels")
    s.add_argument("--verbose", action="store_true")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("run", parents=[common], help="end-to-end pipeline")
    s.add_argument("--config", default=None, help="pipeline config JSON; flags override it")
    s.add_argument("--preset", choices=synth.PRESETS, default=None)
    s.add_argument("--checkpoint", default=None)
    s.add_argument("--n-links", type=int, default=None)
    s.add_argument("--frames", type=int, default=None)
    s.add_argument("--no-multiscale", action="store_true")
    g = s.add_mutually_exclusive_group()
    g.add_argument("--aigc-stub", action="store_true", help="use the offline generator")
    g.add_argument("--endpoint", default=None, help=f"generation service URL (else ${aigc.ENDPOINT_ENV})")
    s.set_defaults(func=cmd_run)

    s = sub.add_parser("schedule-sim", parents=[common], help="simulate the feedback controller")
    s.add_argument("--config", default=None, help="simulation config JSON")
    s.add_argument("--frames", type=int, default=None)
    s.set_defaults(func=cmd_schedule_sim)

    s = sub.add_parser("metrics", parents=[common], help="TV, naturalness and optional SSIM of an image")
    s.add_argument("--image", required=True)
    s.add_argument("--reference", default=None, help="second image for SSIM")
    s.add_argument("--ref-stats", default=None, help="naturalness reference statistics JSON "
                                                     "(default: the built-in procedural corpus)")
    s.add_argument("--save-ref-stats", action="store_true", help="also write the statistics used")
    s.set_defaults(func=cmd_metrics)

    s = sub.add_parser("reproduce-fig6", aliases=["link-sweep"], parents=[common], help="sweep link count against image quality")
    s.add_argument("--seeds", type=int, default=20)
    s.add_argument("--frames", type=int, default=3)
    s.add_argument("--train-samples", type=int, default=160)
    s.add_argument("--train-epochs", type=int, default=8)
    s.add_argument("--aigc-stub", action="store_true", help="required: the sweep runs offline")
    s.add_argument("--verbose", action="store_true")
    s.set_defaults(func=cmd_link_sweep)
    return p


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_manifest(out: Path, args, written: list):
    opts = {k: v for k, v in vars(args).items() if k != "func"}
    opts = {k: (v if not isinstance(v, float) or np.isfinite(v) else str(v)) for k, v in opts.items()}
    files = {str(Path(p).relative_to(out)) if Path(p).is_relative_to(out) else str(p): _sha256(Path(p))
             for p in written}
    formats.write_json(out / "manifest.json", {"version": __version__, "command": args.command,
                                               "arguments": opts, "files": files})


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        written = args.func(args, out)
        _write_manifest(out, args, written)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except pipeline.StageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2 if e.stage == "skeleton-net" and e.frame is None else 1
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (csi.CsiError, FloatingPointError, np.linalg.LinAlgError) as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
