"""Command-line front end: one subcommand per pipeline stage plus `pipeline`.

Exit codes: 0 success, 1 usage error, 2 data error.  Diagnostics go to
stderr; stdout carries data only where `-` output is requested (or where the
command's product is a textual report).  All randomness flows from --seed,
with the NEUROTWIN_SEED environment variable as fallback.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from typing import List, Optional, Sequence

import numpy as np

from . import brainstate, features as feat_mod, fog, kinetics, signal_chain, svg, twin, vit
from .errors import NeurotwinError

USAGE_ERROR = 1
DATA_ERROR = 2


class _Parser(argparse.ArgumentParser):
    """argparse exits with 2 on usage problems; this artifact reserves 2 for data errors."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(USAGE_ERROR)


def _require_seed(args) -> int:
    if args.seed is not None:
        return args.seed
    env = os.environ.get("NEUROTWIN_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError as exc:
            raise NeurotwinError(f"NEUROTWIN_SEED is not an integer: {env!r}") from exc
    print("error: this command is stochastic; pass --seed or set NEUROTWIN_SEED",
          file=sys.stderr)
    raise SystemExit(USAGE_ERROR)


def _open_out(path: str):
    if path == "-":
        return sys.stdout
    return open(path, "w", encoding="utf-8", newline="\n")


def _read_matrix_csv(path: str) -> np.ndarray:
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                rows.append([float(v) for v in line.split(",")])
    return np.asarray(rows, dtype=np.float64)


def _write_matrix_csv(path: str, matrix: np.ndarray) -> None:
    out = _open_out(path)
    try:
        for row in np.atleast_2d(matrix):
            out.write(",".join(repr(float(v)) for v in row) + "\n")
    finally:
        if out is not sys.stdout:
            out.close()


def _read_pgm(path: str) -> np.ndarray:
    """Minimal P2/P5 PGM reader, normalized to [0, 1]."""
    with open(path, "rb") as fh:
        data = fh.read()
    tokens: List[bytes] = []
    i = 0
    while len(tokens) < 4 and i < len(data):
        while i < len(data) and data[i:i + 1].isspace():
            i += 1
        if data[i:i + 1] == b"#":
            while i < len(data) and data[i] != 0x0A:
                i += 1
            continue
        start = i
        while i < len(data) and not data[i:i + 1].isspace():
            i += 1
        tokens.append(data[start:i])
    if len(tokens) < 4 or tokens[0] not in (b"P2", b"P5"):
        raise NeurotwinError(f"{path}: not a P2/P5 PGM file")
    width, height, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if tokens[0] == b"P5":
        i += 1  # single whitespace after maxval
        dtype = np.uint8 if maxval < 256 else ">u2"
        pixels = np.frombuffer(data, dtype=dtype, count=width * height, offset=i)
    else:
        pixels = np.asarray(data[i:].split()[: width * height], dtype=np.float64)
    return pixels.reshape(height, width).astype(np.float64) / maxval


def _load_image(path: str) -> np.ndarray:
    if path.endswith(".pgm"):
        return _read_pgm(path)
    img = _read_matrix_csv(path)
    peak = img.max()
    if peak > 1.0:
        img = img / peak
    return img


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def _cmd_synth(args) -> int:
    seed = _require_seed(args)
    rhythms = []
    for spec in args.rhythm or ["10:10"]:
        freq, amp = spec.split(":")
        rhythms.append((float(freq), float(amp)))
    spec = signal_chain.SynthesisSpec(
        duration_s=args.duration_s, sample_rate_hz=args.rate,
        rhythm_components=tuple(rhythms), noise_std=args.noise_std,
        eog_amplitude=args.eog_amplitude, eog_rate_hz=args.eog_rate_hz,
        powerline_hz=args.powerline_hz,
        powerline_amplitude=args.powerline_amplitude, rng_seed=seed)
    contaminated, reference, clean = signal_chain.synthesize_eeg(spec)
    for suffix, sig in (("contaminated", contaminated), ("reference", reference),
                        ("clean", clean)):
        path = f"{args.out_prefix}_{suffix}.csv"
        signal_chain.write_signal_csv(path, sig)
        print(f"wrote {path}", file=sys.stderr)
    return 0


def _cmd_denoise(args) -> int:
    contaminated = signal_chain.read_signal_csv(args.infile)
    reference = signal_chain.read_signal_csv(args.reference)
    config = signal_chain.ChainConfig(notch_hz=args.notch_hz, mu=args.mu)
    denoised, state = signal_chain.denoise_chain(contaminated, reference, config)
    if args.clean:
        clean = signal_chain.read_signal_csv(args.clean)
        skip = int(signal_chain.SETTLE_S * clean.sample_rate_hz)
        before = signal_chain.snr_db(signal_chain.crop(clean, skip),
                                     signal_chain.crop(contaminated, skip))
        after = signal_chain.snr_db(signal_chain.crop(clean, skip),
                                    signal_chain.crop(denoised, skip))
        print(f"snr_before_db={before:.4f} snr_after_db={after:.4f} "
              f"gain_db={after - before:.4f}", file=sys.stderr)
    if args.out == "-":
        sys.stdout.write("t_s,value_uv\n")
        fs = denoised.sample_rate_hz
        for i, v in enumerate(denoised.samples):
            sys.stdout.write(f"{i / fs!r},{float(v)!r}\n")
    else:
        signal_chain.write_signal_csv(args.out, denoised)
        print(f"wrote {args.out} (final coefficient {state.coefficient:.6g})",
              file=sys.stderr)
    return 0


def _cmd_features(args) -> int:
    signal = signal_chain.read_signal_csv(args.infile)
    spec = feat_mod.WindowSpec(args.window_s, args.overlap)
    rows = feat_mod.extract_features(signal, spec)
    if args.out == "-":
        sys.stdout.write(feat_mod.FEATURE_CSV_HEADER + "\n")
        for window, fv in rows:
            vals = ",".join(repr(float(v)) for v in fv.as_array())
            sys.stdout.write(f"{window.index},{window.start_s!r},{vals}\n")
    else:
        feat_mod.write_features_csv(args.out, rows)
        print(f"wrote {args.out} ({len(rows)} windows)", file=sys.stderr)
    return 0


def _cmd_gate(args) -> int:
    registry = fog.load_registry(args.registry)
    model = fog.RiskModel.load(args.model)
    config = fog.GateConfig(args.threshold, args.freshness_ms)

    if args.listen:
        host, port = args.listen.rsplit(":", 1)
        node = fog.FogNode(registry, model, config,
                           cloud_log_path=args.cloud_log)
        results = fog.serve_loopback(node, host, int(port),
                                     now_utc_ms=args.now_ms)
        print(f"served {len(results)} frames: {node.summary()}", file=sys.stderr)
        return 0

    if args.connect:
        host, port = args.connect.rsplit(":", 1)
        with open(args.infile, "rb") as fh:
            frames = [line for line in fh if line.strip()]
        replies = fog.send_frames_loopback(host, int(port), frames)
        for reply in replies:
            print(reply)
        return 0

    node = fog.FogNode(registry, model, config, cloud_log_path=args.cloud_log)
    with open(args.infile, "rb") as fh:
        frames = [line for line in fh if line.strip()]
    out = _open_out(args.out)
    try:
        out.write("index,action,reason,risk_high_prob\n")
        for i, frame in enumerate(frames):
            processed = node.process_frame(frame, now_utc_ms=args.now_ms)
            d = processed.decision
            out.write(f"{i},{d.action},{d.reason},{d.risk_high_prob!r}\n")
    finally:
        if out is not sys.stdout:
            out.close()
    if args.park_log:
        with open(args.park_log, "w", encoding="utf-8", newline="\n") as fh:
            for packet, reason in node.parked:
                fh.write(json.dumps({
                    "device_id": packet.device_id,
                    "timestamp_utc_ms": packet.timestamp_utc_ms,
                    "seq": packet.seq, "reason": reason,
                }, separators=(",", ":")) + "\n")
    print(f"gate summary: {node.summary()}", file=sys.stderr)
    return 0


def _cmd_train_vit(args) -> int:
    seed = _require_seed(args)
    config = vit.VitConfig()
    corpus = vit.make_scan_corpus(seed, args.corpus_size, config)
    params = vit.init_params(config, seed + 1)
    loss_config = vit.LossConfig(entropy_weight=args.entropy_weight)
    params, history = vit.train(params, corpus, config, loss_config,
                                lr=args.lr, steps=args.steps)
    vit.save_model(args.out, params, config)
    last = history[-1]
    print(f"trained {args.steps} steps: total={last['total']:.4f} "
          f"ce={last['ce']:.4f} entropy_reg={last['entropy_reg']:.4f} "
          f"mean_attention_entropy={last['mean_attention_entropy']:.4f}",
          file=sys.stderr)
    print(f"wrote {args.out}", file=sys.stderr)
    return 0


def _cmd_attribute(args) -> int:
    params, config = vit.load_model(args.model)
    image = _load_image(args.image)
    if image.shape != (config.image_size, config.image_size):
        print(f"resizing {image.shape[0]}x{image.shape[1]} -> "
              f"{config.image_size}x{config.image_size}", file=sys.stderr)
        image = vit.resize_image(image, config.image_size, config.image_size)
    image = np.clip(image, 0.0, 1.0)
    grid = vit.patchify(image, config.patch_size)
    heat = vit.patch_attribution(params, grid, config, target=args.target)
    prob_map, _, _ = vit.forward(params, grid, config)
    stats = vit.adaptive_threshold(prob_map)
    side = int(np.sqrt(heat.size))
    _write_matrix_csv(args.out, heat.reshape(side, side))
    if args.svg:
        with open(args.svg, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(svg.heatmap_chart(heat.reshape(side, side),
                                       title="patch attribution"))
    flagged = int(vit.classify_patches(prob_map.probs, stats.threshold).sum())
    print(f"threshold: mean_bg={stats.mean_bg:.4f} std_bg={stats.std_bg:.4f} "
          f"k={stats.k} theta={stats.threshold:.4f}; {flagged} patches flagged",
          file=sys.stderr)
    return 0


def _cmd_classify_state(args) -> int:
    if args.model:
        model = brainstate.StateModel.load(args.model)
    else:
        seed = _require_seed(args) if args.fit_seed is None else args.fit_seed
        dataset = brainstate.synth_state_dataset(seed, args.fit_n_per_class)
        model, _ = brainstate.train_state_model(dataset, seed + 1,
                                                epochs=args.fit_epochs)
        if args.save_model:
            model.save(args.save_model)
            print(f"wrote {args.save_model}", file=sys.stderr)
    rows = feat_mod.read_features_csv(args.features)
    windows = np.asarray([fv.as_array() for _, _, fv in rows])
    if windows.shape[0] > args.max_windows:
        windows = windows[-args.max_windows:]
    prediction = model.predict(windows)
    out = _open_out(args.out)
    try:
        out.write("state," + ",".join(brainstate.CLASSES) + "\n")
        out.write(prediction.argmax_label + ","
                  + ",".join(repr(float(p)) for p in prediction.probs) + "\n")
    finally:
        if out is not sys.stdout:
            out.close()
    return 0


def _cmd_forecast(args) -> int:
    series = kinetics.read_volumes_csv(args.infile)
    fitted = kinetics.fit(series, degree=args.degree)
    print(kinetics.fit_report_text(fitted))
    t_last = float(series.t_days[-1])
    horizon_ts = np.linspace(t_last, t_last + args.horizon_days, 24)
    forecasts = [kinetics.forecast(fitted, float(t), args.confidence)
                 for t in horizon_ts]
    final = forecasts[-1]
    print(f"forecast at +{args.horizon_days:g} days "
          f"({kinetics.days_to_date(final.t_future)}): {final.point_cc:.2f} cc "
          f"[{final.interval_low_cc:.2f}, {final.interval_high_cc:.2f}] "
          f"@ {final.confidence_level:.0%}")
    if args.out:
        kinetics.write_forecast_csv(args.out, series, fitted, forecasts)
        print(f"wrote {args.out}", file=sys.stderr)
    if args.svg:
        t_line = np.linspace(series.t_days[0], t_last + args.horizon_days, 120)
        v_line = kinetics.predict(fitted, t_line)
        with open(args.svg, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(svg.kinetics_chart(
                series.t_days, series.volume_cc, t_line, v_line,
                np.array([f.t_future for f in forecasts]),
                np.array([f.interval_low_cc for f in forecasts]),
                np.array([f.interval_high_cc for f in forecasts]),
                np.array([f.point_cc for f in forecasts]),
                title="volume trend + forecast"))
        print(f"wrote {args.svg}", file=sys.stderr)
    return 0


def _cmd_pipeline(args) -> int:
    seed = _require_seed(args)
    devices = []
    for i, regime in enumerate(args.regime or ["healthy", "seizure"]):
        devices.append(twin.DeviceScenario(f"dev-{i:02d}", regime))
    scenario = twin.ScenarioConfig(
        seed=seed, devices=devices, duration_s=args.duration_s,
        threshold=args.threshold, freshness_ms=args.freshness_ms)
    report = twin.run_pipeline(scenario, out_dir=args.out_dir)
    sys.stdout.write(report.to_text())
    if args.out_dir:
        print(f"artifacts in {args.out_dir}", file=sys.stderr)
    return 0


def _cmd_plot(args) -> int:
    if args.kind == "signal":
        sig = signal_chain.read_signal_csv(args.infile)
        content = svg.signal_chart([("value_uv", sig.times(), sig.samples)],
                                   title=os.path.basename(args.infile))
    elif args.kind == "bands":
        rows = feat_mod.read_features_csv(args.infile)
        names = [name for name, _, _ in feat_mod.BANDS]
        means = [float(np.mean([getattr(fv, f"{n}_pw") for _, _, fv in rows]))
                 for n in names]
        content = svg.bar_chart(names, means, title="mean band power",
                                unit="uV^2")
    elif args.kind == "kinetics":
        obs_t, obs_v, fit_t, fit_v = [], [], [], []
        fc_t, fc_low, fc_high, fc_point = [], [], [], []
        with open(args.infile, "r", encoding="utf-8") as fh:
            header = fh.readline().strip()
            if header != kinetics.FORECAST_CSV_HEADER:
                raise NeurotwinError(f"unexpected forecast CSV header: {header!r}")
            for line in fh:
                parts = line.strip().split(",")
                if len(parts) < 4 or not parts[0]:
                    continue
                kind, _, t, v = parts[0], parts[1], float(parts[2]), float(parts[3])
                if kind == "observed":
                    obs_t.append(t); obs_v.append(v)
                elif kind == "fitted":
                    fit_t.append(t); fit_v.append(v)
                elif kind == "forecast":
                    fc_t.append(t); fc_point.append(v)
                    fc_low.append(float(parts[4])); fc_high.append(float(parts[5]))
        content = svg.kinetics_chart(
            np.asarray(obs_t), np.asarray(obs_v), np.asarray(fit_t),
            np.asarray(fit_v), np.asarray(fc_t), np.asarray(fc_low),
            np.asarray(fc_high), np.asarray(fc_point), title="volume trend")
    else:  # heatmap
        matrix = _read_matrix_csv(args.infile)
        content = svg.heatmap_chart(matrix, title=os.path.basename(args.infile))
    with open(args.out, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(content)
    print(f"wrote {args.out}", file=sys.stderr)
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> _Parser:
    parser = _Parser(prog="neurotwin",
                     description="EEG monitoring, fog gating, scan scoring and "
                                 "growth forecasting, end to end or per stage.")
    sub = parser.add_subparsers(dest="command", required=True,
                                parser_class=_Parser)

    def add_seed(p):
        p.add_argument("--seed", type=int, default=None,
                       help="RNG seed (fallback: NEUROTWIN_SEED)")

    p = sub.add_parser("synth", help="generate a synthetic EEG record")
    add_seed(p)
    p.add_argument("--duration-s", type=float, default=8.0)
    p.add_argument("--rate", type=float, default=250.0)
    p.add_argument("--rhythm", action="append", metavar="FREQ:AMP",
                   help="rhythm component, repeatable (default 10:10)")
    p.add_argument("--noise-std", type=float, default=2.0)
    p.add_argument("--eog-amplitude", type=float, default=8.0)
    p.add_argument("--eog-rate-hz", type=float, default=0.4)
    p.add_argument("--powerline-hz", type=float, default=50.0)
    p.add_argument("--powerline-amplitude", type=float, default=15.0)
    p.add_argument("--out-prefix", required=True)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("denoise", help="run the denoising chain on a record")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--reference", required=True)
    p.add_argument("--clean", help="ground-truth record: prints SNR before/after")
    p.add_argument("--mu", type=float, default=0.01)
    p.add_argument("--notch-hz", type=float, default=50.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_denoise)

    p = sub.add_parser("features", help="window a record into feature vectors")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--window-s", type=float, default=2.0)
    p.add_argument("--overlap", type=float, default=0.5)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_features)

    p = sub.add_parser("gate", help="authenticate and risk-gate wire frames")
    p.add_argument("--registry", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--threshold", type=float, default=0.75)
    p.add_argument("--freshness-ms", type=int, default=5000)
    p.add_argument("--now-ms", type=int, default=None,
                   help="gate clock; default trusts frame timestamps")
    p.add_argument("--in", dest="infile")
    p.add_argument("--out", default="-")
    p.add_argument("--cloud-log")
    p.add_argument("--park-log")
    p.add_argument("--listen", metavar="HOST:PORT",
                   help="serve one loopback TCP connection")
    p.add_argument("--connect", metavar="HOST:PORT",
                   help="send frames to a listening gate")
    p.set_defaults(func=_cmd_gate)

    p = sub.add_parser("train-vit", help="train the patch classifier on synthetic scans")
    add_seed(p)
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--entropy-weight", type=float, default=0.5)
    p.add_argument("--corpus-size", type=int, default=8)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_train_vit)

    p = sub.add_parser("attribute", help="patch attribution heatmap for a scan")
    p.add_argument("--model", required=True)
    p.add_argument("--image", required=True, help="PGM (P2/P5) or CSV matrix")
    p.add_argument("--target", choices=("tumor", "background"), default="tumor")
    p.add_argument("--out", required=True, help="heatmap CSV ('-' for stdout)")
    p.add_argument("--svg")
    p.set_defaults(func=_cmd_attribute)

    p = sub.add_parser("classify-state", help="brain-state prediction from features")
    add_seed(p)
    p.add_argument("--features", required=True)
    p.add_argument("--model", help="state-model artifact")
    p.add_argument("--fit-seed", type=int, default=None,
                   help="train a fresh model on a synthetic dataset")
    p.add_argument("--fit-epochs", type=int, default=200)
    p.add_argument("--fit-n-per-class", type=int, default=6)
    p.add_argument("--save-model")
    p.add_argument("--max-windows", type=int, default=10)
    p.add_argument("--out", default="-")
    p.set_defaults(func=_cmd_classify_state)

    p = sub.add_parser("forecast", help="fit and forecast a volume series")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--degree", type=int, default=3)
    p.add_argument("--horizon-days", type=float, default=120.0)
    p.add_argument("--confidence", type=float, default=0.95)
    p.add_argument("--out")
    p.add_argument("--svg")
    p.set_defaults(func=_cmd_forecast)

    p = sub.add_parser("pipeline", help="run the full end-to-end scenario")
    add_seed(p)
    p.add_argument("--duration-s", type=float, default=24.0)
    p.add_argument("--regime", action="append",
                   choices=sorted(twin.REGIME_RHYTHMS),
                   help="per-device regime, repeatable (default healthy+seizure)")
    p.add_argument("--threshold", type=float, default=0.75)
    p.add_argument("--freshness-ms", type=int, default=5000)
    p.add_argument("--out-dir")
    p.set_defaults(func=_cmd_pipeline)

    p = sub.add_parser("plot", help="render a stage CSV as SVG")
    p.add_argument("--kind", choices=("signal", "bands", "kinetics", "heatmap"),
                   required=True)
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_plot)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except NeurotwinError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DATA_ERROR
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DATA_ERROR
    except SystemExit as exc:
        return int(exc.code or 0)


def console_main() -> None:
    sys.exit(main())


if __name__ == "__main__":
    console_main()
