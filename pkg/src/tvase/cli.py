"""``tvase`` command line: synth, init-weights, enhance, evaluate, gradcheck, params."""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from tvase import audio
from tvase import gradcheck as gc
from tvase import metrics
from tvase import streaming
from tvase.scenario import synth
from tvase.weights import DKG_VARIANTS, ModelConfig, build, count_params, layer_counts, load_weights, save_weights

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_VERIFY = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _echo(args) -> None:
    cfg = {k: (str(v) if isinstance(v, Path) else v) for k, v in sorted(vars(args).items()) if k != "func"}
    print("config " + json.dumps(cfg, sort_keys=True), flush=True)


def _wavs(directory) -> list[Path]:
    d = Path(directory)
    if not d.is_dir():
        raise FileNotFoundError(f"source directory not found: {d}")
    files = sorted(d.glob("*.wav"))
    if not files:
        raise FileNotFoundError(f"no .wav files in {d}")
    return files


def cmd_synth(args) -> int:
    overrides = {}
    if args.ser is not None:
        overrides["ser_db"] = tuple(args.ser)
    if args.snr is not None:
        overrides["snr_db"] = args.snr
    if args.clip_seconds is not None:
        overrides["clip_seconds"] = args.clip_seconds
    spec = synth.scenario_spec(args.scenario, args.profile, **overrides)
    noise = _wavs(args.noise_dir) if args.noise_dir else []
    clips = synth.synth_set(spec, _wavs(args.far_dir), _wavs(args.near_dir), args.out, args.seed,
                            args.pairs, noise_files=noise)
    print(f"wrote {len(clips)} clips and {Path(args.out) / synth.MANIFEST_NAME}")
    return EXIT_OK


def cmd_init_weights(args) -> int:
    w = build(ModelConfig(dkg=args.dkg), args.seed)
    save_weights(w, args.out)
    print(f"wrote {args.out} ({count_params(w):,} parameters)")
    return EXIT_OK


def _model(args):
    if args.weights is not None:
        return load_weights(args.weights)
    return build(ModelConfig(dkg=args.dkg), args.seed)


def _enhance_pair(mic_path, far_path, out_path, weights, args) -> None:
    mic = audio.read_wav(mic_path)
    far = audio.read_wav(far_path)
    if len(mic) != len(far):
        raise UsageError(f"{mic_path} and {far_path} differ in length ({len(mic)} vs {len(far)})")
    dtype = np.float64 if args.f64 else np.float32
    run = streaming.enhance_streaming if args.stream else streaming.enhance
    audio.write_wav(out_path, run(mic, far, weights, dtype))


def cmd_enhance(args) -> int:
    single = args.mic is not None or args.far is not None
    if single == (args.manifest is not None):
        raise UsageError("give either --mic/--far or --manifest")
    if single and (args.mic is None or args.far is None):
        raise UsageError("--mic and --far are both required")
    weights = _model(args)
    if single:
        _enhance_pair(args.mic, args.far, args.out, weights, args)
        print(f"wrote {args.out}")
        return EXIT_OK
    root = Path(args.manifest).parent
    _, clips = synth.load_set(args.manifest)
    out = Path(args.out)
    for m in clips:  # one clip at a time: streams are sequential by nature
        _enhance_pair(root / m.paths["mic"], root / m.paths["farend"], out / f"{m.clip_id}_enhanced.wav",
                      weights, args)
    print(f"wrote {len(clips)} enhanced clips to {out}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    report = metrics.evaluate_set(args.manifest, args.enhanced, args.p)
    text = report.to_json()
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text)
    fmt = lambda m, s: "n/a" if m is None else f"{m:.2f} +- {s:.2f}"  # noqa: E731
    print(f"ERLE {fmt(report.erle_mean, report.erle_std)} dB over {report.erle_clips}/{report.clips} clips; "
          f"compressed MSE {fmt(report.mse_mean, report.mse_std)}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    reports = gc.run_gradcheck(seed=args.seed, probes=args.probes)
    for r in reports:
        print(f"{r.op:24s} max rel err {r.max_rel_error:.3e} over {r.probes} probes "
              f"(tol {r.tolerance:g}) {'PASS' if r.passed else 'FAIL'}")
    if args.out:
        Path(args.out).write_text(gc.reports_to_json(reports))
    return EXIT_OK if all(r.passed for r in reports) else EXIT_VERIFY


def cmd_params(args) -> int:
    variants = DKG_VARIANTS if args.dkg == "all" else (args.dkg,)
    for v in variants:
        cfg = ModelConfig(dkg=v)
        if args.layers:
            for name, n in layer_counts(cfg, args.buffers):
                print(f"{v:14s} {name:28s} {n:>10,}")
        print(f"{v:14s} {'total':28s} {count_params(cfg, args.buffers):>10,}")
    return EXIT_OK


def _add_model_args(p) -> None:
    p.add_argument("--weights", type=Path, help="weight file; omitted: random init from --seed/--dkg")
    p.add_argument("--dkg", choices=DKG_VARIANTS, default="separable")
    p.add_argument("--seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="tvase", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="synthesize a scenario evaluation set")
    p.add_argument("--scenario", required=True, choices=sorted(synth.SCENARIOS))
    p.add_argument("--far-dir", required=True, type=Path)
    p.add_argument("--near-dir", required=True, type=Path)
    p.add_argument("--noise-dir", type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--pairs", type=int, default=1)
    p.add_argument("--profile", choices=("test", "train"), default="test")
    p.add_argument("--ser", type=float, nargs="+", help="SER list in dB (test profile)")
    p.add_argument("--snr", type=float, help="SNR in dB; omitted: no noise (test profile)")
    p.add_argument("--clip-seconds", type=float)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("init-weights", help="write randomly initialised weights")
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--dkg", choices=DKG_VARIANTS, default="separable")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_init_weights)

    p = sub.add_parser("enhance", help="enhance one mic/far pair or every clip of a manifest")
    _add_model_args(p)
    p.add_argument("--mic", type=Path)
    p.add_argument("--far", type=Path)
    p.add_argument("--manifest", type=Path)
    p.add_argument("--out", required=True, type=Path, help="output WAV, or directory with --manifest")
    p.add_argument("--stream", action="store_true", help="hop-by-hop engine instead of whole-clip")
    p.add_argument("--f64", action="store_true", help="float64 reference arithmetic")
    p.set_defaults(func=cmd_enhance)

    p = sub.add_parser("evaluate", help="ERLE and compressed MSE report")
    p.add_argument("--manifest", required=True, type=Path)
    p.add_argument("--enhanced", required=True, type=Path, help="directory of <clip_id>_enhanced.wav")
    p.add_argument("--out", type=Path, help="report JSON path")
    p.add_argument("--p", type=float, default=0.3, help="power-law compression exponent")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("gradcheck", help="finite-difference check of the dynamic-kernel gradients")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--probes", type=int, default=gc.DEFAULT_PROBES)
    p.add_argument("--out", type=Path)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("params", help="parameter counts per DKG variant")
    p.add_argument("--dkg", choices=DKG_VARIANTS + ("all",), default="all")
    p.add_argument("--layers", action="store_true", help="also list per-layer counts")
    p.add_argument("--buffers", action="store_true", help="include batch-norm running statistics")
    p.set_defaults(func=cmd_params)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_USAGE
    _echo(args)
    try:
        return args.func(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, audio.AudioFormatError, synth.SourceError, metrics.MetricError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
