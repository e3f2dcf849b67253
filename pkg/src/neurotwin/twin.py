"""Per-patient twin state and the end-to-end pipeline wiring.

One seeded scenario run covers: synthesis -> denoising -> features ->
signing -> fog gating -> cloud store -> twin ingest -> state classification
-> tumor scoring -> risk fusion -> growth forecast.  Every run is
deterministic for its seed and conserves packets: produced == stored +
parked + rejected.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field, asdict
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import brainstate, features as feat_mod, fog, kinetics, signal_chain, svg, vit
from .errors import InvalidInputError

TWIN_RECORD_VERSION = 1

#: fused-risk bands (inclusive lower edges)
BAND_HIGH = 0.7
BAND_MODERATE = 0.4


@dataclass
class TumorFinding:
    present: bool
    confidence: float
    volume_cc: Optional[float] = None
    region_label: str = ""

    def __post_init__(self):
        if not (0.0 <= self.confidence <= 1.0):
            raise InvalidInputError("confidence must lie in [0, 1]")
        if self.present and (self.volume_cc is None or self.volume_cc <= 0):
            raise InvalidInputError("a present finding needs a positive volume")
        if not self.present:
            self.volume_cc = None


@dataclass
class FusionConfig:
    """Weights for combining the scan finding with the brain-state estimate."""

    w_mri: float = 0.6
    w_eeg: float = 0.4
    state_risk_map: Dict[str, float] = field(default_factory=lambda: {
        "seizure": 1.0, "interictal": 0.6, "healthy": 0.0})

    def __post_init__(self):
        if self.w_mri < 0 or self.w_eeg < 0:
            raise InvalidInputError("fusion weights must be nonnegative")
        if abs(self.w_mri + self.w_eeg - 1.0) > 1e-12:
            raise InvalidInputError("fusion weights must sum to 1")
        missing = set(brainstate.CLASSES) - set(self.state_risk_map)
        if missing:
            raise InvalidInputError(f"state_risk_map missing {sorted(missing)}")


def fuse_risk(state: brainstate.StatePrediction, finding: TumorFinding,
              config: FusionConfig | None = None) -> float:
    """w_mri * finding confidence (0 when absent) + w_eeg * state risk mass."""
    config = config or FusionConfig()
    mri_term = finding.confidence if finding.present else 0.0
    eeg_term = sum(float(state.probs[i]) * config.state_risk_map[c]
                   for i, c in enumerate(brainstate.CLASSES))
    fused = config.w_mri * mri_term + config.w_eeg * eeg_term
    return min(max(fused, 0.0), 1.0)


def risk_band(fused: float) -> str:
    if fused >= BAND_HIGH:
        return "high"
    if fused >= BAND_MODERATE:
        return "moderate"
    return "low"


def finding_from_probs(prob_map: vit.PatchProbMap, stats: vit.ThresholdStats,
                       reference_volume_cc: float,
                       region_label: str = "cerebellum") -> TumorFinding:
    """Scan finding from patch probabilities under the adaptive threshold.

    Present iff any patch exceeds the threshold; confidence is the peak patch
    probability; volume scales the flagged-patch fraction by a configured
    reference volume.
    """
    mask = vit.classify_patches(prob_map.probs, stats.threshold)
    present = bool(mask.any())
    confidence = float(prob_map.probs.max())
    volume = None
    if present:
        volume = float(mask.mean()) * reference_volume_cc
    return TumorFinding(present, confidence, volume, region_label)


# ---------------------------------------------------------------------------
# Twin state
# ---------------------------------------------------------------------------

@dataclass
class TwinState:
    device_id: str
    last_update_ms: int = 0
    latest_features: Optional[List[float]] = None
    latest_state: Optional[brainstate.StatePrediction] = None
    finding: Optional[TumorFinding] = None
    forecast: Optional[kinetics.Forecast] = None
    fused_risk: float = 0.0
    risk_history: List[Tuple[int, float]] = field(default_factory=list)
    feature_log: List[Tuple[int, List[float]]] = field(default_factory=list)
    out_of_order_count: int = 0

    @property
    def ingest_count(self) -> int:
        return len(self.feature_log)


def ingest(twin: TwinState, record: dict) -> TwinState:
    """Fold one cloud-store record into the twin (dedup happened upstream)."""
    ts = int(record["timestamp_utc_ms"])
    feats = [float(v) for v in record["features"]]
    if ts < twin.last_update_ms:
        twin.out_of_order_count += 1
    twin.last_update_ms = max(twin.last_update_ms, ts)
    twin.latest_features = feats
    twin.feature_log.append((ts, feats))
    return twin


def update_risk(twin: TwinState, state: brainstate.StatePrediction,
                finding: TumorFinding, config: FusionConfig | None = None,
                at_ms: int | None = None) -> float:
    """Recompute the fused risk and append a history point (monotone time)."""
    fused = fuse_risk(state, finding, config)
    twin.latest_state = state
    twin.finding = finding
    twin.fused_risk = fused
    t = twin.last_update_ms if at_ms is None else at_ms
    if not twin.risk_history or t > twin.risk_history[-1][0]:
        twin.risk_history.append((t, fused))
    return fused


def twin_to_record(twin: TwinState) -> str:
    """Single-line versioned JSON record (floats round-trip exactly)."""
    doc = {
        "version": TWIN_RECORD_VERSION,
        "device_id": twin.device_id,
        "last_update_ms": twin.last_update_ms,
        "latest_features": twin.latest_features,
        "latest_state": None if twin.latest_state is None else {
            "probs": [float(p) for p in twin.latest_state.probs],
            "argmax_label": twin.latest_state.argmax_label,
        },
        "finding": None if twin.finding is None else asdict(twin.finding),
        "forecast": None if twin.forecast is None else asdict(twin.forecast),
        "fused_risk": twin.fused_risk,
        "risk_history": [[int(t), float(r)] for t, r in twin.risk_history],
        "feature_log": [[int(t), list(f)] for t, f in twin.feature_log],
        "out_of_order_count": twin.out_of_order_count,
    }
    return json.dumps(doc, separators=(",", ":"))


def twin_from_record(line: str) -> TwinState:
    doc = json.loads(line)
    if doc.get("version") != TWIN_RECORD_VERSION:
        raise InvalidInputError(f"unsupported twin record version {doc.get('version')}")
    state = None
    if doc["latest_state"] is not None:
        state = brainstate.StatePrediction(
            np.asarray(doc["latest_state"]["probs"]),
            doc["latest_state"]["argmax_label"])
    finding = None
    if doc["finding"] is not None:
        finding = TumorFinding(**doc["finding"])
    forecast = None
    if doc["forecast"] is not None:
        forecast = kinetics.Forecast(**doc["forecast"])
    return TwinState(
        device_id=doc["device_id"],
        last_update_ms=doc["last_update_ms"],
        latest_features=doc["latest_features"],
        latest_state=state,
        finding=finding,
        forecast=forecast,
        fused_risk=doc["fused_risk"],
        risk_history=[(int(t), float(r)) for t, r in doc["risk_history"]],
        feature_log=[(int(t), [float(v) for v in f]) for t, f in doc["feature_log"]],
        out_of_order_count=doc["out_of_order_count"],
    )


# ---------------------------------------------------------------------------
# Scenario
# ---------------------------------------------------------------------------

REGIME_RHYTHMS: Dict[str, Tuple[Tuple[float, float], ...]] = {
    "healthy": ((10.0, 12.0), (20.0, 2.0)),
    "seizure": ((22.0, 9.0), (38.0, 7.0), (6.0, 2.0)),
    "interictal": ((6.0, 11.0), (10.0, 3.0)),
}


@dataclass
class DeviceScenario:
    device_id: str
    regime: str = "healthy"

    def __post_init__(self):
        if self.regime not in REGIME_RHYTHMS:
            raise InvalidInputError(f"unknown regime {self.regime!r}")


@dataclass
class ScenarioConfig:
    seed: int
    devices: List[DeviceScenario] = field(default_factory=lambda: [
        DeviceScenario("dev-00", "healthy"), DeviceScenario("dev-01", "seizure")])
    duration_s: float = 24.0
    sample_rate_hz: float = 250.0
    noise_std: float = 2.0
    eog_amplitude: float = 8.0
    powerline_amplitude: float = 15.0
    window_length_s: float = 2.0
    window_overlap: float = 0.5
    start_utc_ms: int = 1_755_000_000_000
    threshold: float = 0.75
    freshness_ms: int = 5000
    fusion: FusionConfig = field(default_factory=FusionConfig)
    reference_volume_cc: float = 10.0
    # training budgets (kept small: a full run must stay desk-scale)
    train_n_per_class: int = 6
    state_epochs: int = 150
    vit_steps: int = 150
    vit_corpus_size: int = 6
    # kinetics
    kinetics_n_obs: int = 60
    horizon_days: float = 60.0
    # fault injection (exercises rejection paths and conservation)
    n_tampered: int = 2
    n_stale: int = 2
    n_duplicates: int = 2

    def __post_init__(self):
        if self.seed is None:
            raise InvalidInputError("scenario seed is required")
        if not self.devices:
            raise InvalidInputError("need at least one device")


@dataclass
class DeviceResult:
    device_id: str
    regime: str
    n_windows: int
    snr_before_db: float
    snr_after_db: float
    stored: int
    parked: int
    rejected: int
    state_label: str
    state_probs: List[float]
    finding: TumorFinding
    fused_risk: float
    band: str
    forecast_point_cc: float
    forecast_low_cc: float
    forecast_high_cc: float


@dataclass
class RunReport:
    seed: int
    produced: int
    stored: int
    parked: int
    rejected: int
    rejected_by_reason: Dict[str, int]
    conservation_ok: bool
    devices: List[DeviceResult]

    def to_text(self) -> str:
        lines = [
            "neurotwin pipeline run",
            f"seed: {self.seed}",
            f"packets: produced={self.produced} stored={self.stored} "
            f"parked={self.parked} rejected={self.rejected}",
            "rejected by reason: " + (", ".join(
                f"{k}={v}" for k, v in sorted(self.rejected_by_reason.items()))
                or "none"),
            f"conservation: {'ok' if self.conservation_ok else 'VIOLATED'}",
            "",
        ]
        for d in self.devices:
            lines += [
                f"device {d.device_id} ({d.regime})",
                f"  windows: {d.n_windows}  snr: {d.snr_before_db:.2f} dB -> "
                f"{d.snr_after_db:.2f} dB",
                f"  gate: stored={d.stored} parked={d.parked} rejected={d.rejected}",
                f"  state: {d.state_label} probs="
                + "/".join(f"{p:.4f}" for p in d.state_probs),
                f"  finding: present={d.finding.present} "
                f"confidence={d.finding.confidence:.4f} "
                f"volume_cc={'-' if d.finding.volume_cc is None else format(d.finding.volume_cc, '.3f')}",
                f"  fused risk: {d.fused_risk:.4f} ({d.band})",
                f"  forecast: {d.forecast_point_cc:.2f} cc "
                f"[{d.forecast_low_cc:.2f}, {d.forecast_high_cc:.2f}]",
                "",
            ]
        return "\n".join(lines)


def _device_frames(scenario: ScenarioConfig, dev: DeviceScenario,
                   dev_seed: int, key: bytes,
                   rng: np.random.Generator) -> Tuple[List[Tuple[bytes, int]], dict]:
    """Synth + denoise + features + signed frames for one device.

    Returns (frames with arrival clocks, per-device artifacts dict).
    """
    spec = signal_chain.SynthesisSpec(
        duration_s=scenario.duration_s,
        sample_rate_hz=scenario.sample_rate_hz,
        rhythm_components=REGIME_RHYTHMS[dev.regime],
        noise_std=scenario.noise_std,
        eog_amplitude=scenario.eog_amplitude,
        powerline_amplitude=scenario.powerline_amplitude,
        rng_seed=dev_seed,
    )
    contaminated, reference, clean = signal_chain.synthesize_eeg(spec)
    denoised, _ = signal_chain.denoise_chain(contaminated, reference)
    skip = int(signal_chain.SETTLE_S * spec.sample_rate_hz)
    snr_before = signal_chain.snr_db(signal_chain.crop(clean, skip),
                                     signal_chain.crop(contaminated, skip))
    snr_after = signal_chain.snr_db(signal_chain.crop(clean, skip),
                                    signal_chain.crop(denoised, skip))

    wspec = feat_mod.WindowSpec(scenario.window_length_s, scenario.window_overlap)
    rows = feat_mod.extract_features(denoised, wspec)

    frames: List[Tuple[bytes, int]] = []
    for window, fv in rows:
        ts = scenario.start_utc_ms + int(round(window.start_s * 1000.0))
        packet = fog.Packet(dev.device_id, ts, window.index,
                            tuple(fv.as_array()))
        packet = fog.sign_packet(packet, key)
        frames.append((fog.encode_frame(packet), ts))

    # fault injection: tampered bytes, stale timestamps, duplicate deliveries
    n = len(frames)
    for _ in range(scenario.n_tampered):
        idx = int(rng.integers(0, n))
        frame, arrival = frames[idx]
        # corrupt one digit inside the feature list
        pos = frame.find(b"features") + 12
        flipped = frame[:pos] + bytes([frame[pos] ^ 0x01]) + frame[pos + 1:]
        frames.append((flipped, arrival))
    for _ in range(scenario.n_stale):
        idx = int(rng.integers(0, n))
        _, arrival = frames[idx]
        window = rows[idx][0]
        old_ts = (scenario.start_utc_ms + int(round(window.start_s * 1000.0))
                  - 10 * scenario.freshness_ms)
        stale_packet = fog.Packet(dev.device_id, old_ts, 100000 + window.index,
                                  tuple(rows[idx][1].as_array()))
        stale_packet = fog.sign_packet(stale_packet, key)
        frames.append((fog.encode_frame(stale_packet), arrival))
    for _ in range(scenario.n_duplicates):
        idx = int(rng.integers(0, n))
        frames.append(frames[idx])

    artifacts = {
        "contaminated": contaminated, "denoised": denoised, "clean": clean,
        "feature_rows": rows, "snr_before": snr_before, "snr_after": snr_after,
    }
    return frames, artifacts


def run_pipeline(scenario: ScenarioConfig,
                 out_dir: str | None = None) -> RunReport:
    """Execute the full edge -> fog -> cloud -> twin pass for one scenario."""
    seed = scenario.seed

    # shipped model artifacts, trained deterministically per scenario seed
    train_ds = brainstate.synth_state_dataset(seed * 1000 + 1,
                                              scenario.train_n_per_class)
    risk_x, risk_y = brainstate.risk_labels_for(train_ds)
    risk_model = brainstate.train_logistic(risk_x, risk_y)
    state_model, _ = brainstate.train_state_model(
        train_ds, seed * 1000 + 2, epochs=scenario.state_epochs)

    vit_config = vit.VitConfig()
    scan_corpus = vit.make_scan_corpus(seed * 1000 + 3,
                                       scenario.vit_corpus_size, vit_config)
    vit_params = vit.init_params(vit_config, seed * 1000 + 4)
    vit_params, _ = vit.train(vit_params, scan_corpus, vit_config,
                              vit.LossConfig(entropy_weight=0.5), lr=0.05,
                              steps=scenario.vit_steps)

    device_ids = [d.device_id for d in scenario.devices]
    registry = fog.make_registry(device_ids, seed * 1000 + 5)
    node = fog.FogNode(registry, risk_model,
                       fog.GateConfig(scenario.threshold, scenario.freshness_ms))

    twins: Dict[str, TwinState] = {d: TwinState(d) for d in device_ids}
    device_artifacts: Dict[str, dict] = {}
    per_device_counts = {d: {"stored": 0, "parked": 0, "rejected": 0}
                         for d in device_ids}

    fault_rng = np.random.default_rng(seed * 1000 + 6)
    for i, dev in enumerate(scenario.devices):
        frames, artifacts = _device_frames(
            scenario, dev, seed * 1000 + 10 + i, registry[dev.device_id],
            fault_rng)
        device_artifacts[dev.device_id] = artifacts
        decisions = []
        for frame, arrival in frames:
            processed = node.process_frame(frame, now_utc_ms=arrival)
            decisions.append(processed)
            action = processed.decision.action
            counted_as = action
            if processed.receipt is not None:
                if processed.receipt.reason == fog.REASON_DUPLICATE:
                    counted_as = "rejected"
                elif processed.receipt.reason == fog.REASON_STORE_UNAVAILABLE:
                    counted_as = "parked"
            if counted_as == fog.ACTION_FORWARD:
                per_device_counts[dev.device_id]["stored"] += 1
            elif counted_as in (fog.ACTION_PARK, "parked"):
                per_device_counts[dev.device_id]["parked"] += 1
            else:
                per_device_counts[dev.device_id]["rejected"] += 1
            # twin ingest for records that reached the store this frame
            if (processed.receipt is not None and processed.receipt.stored
                    and processed.packet is not None):
                twin = twins[dev.device_id]
                ingest(twin, {
                    "timestamp_utc_ms": processed.packet.timestamp_utc_ms,
                    "features": list(processed.packet.features),
                })
        artifacts["decisions"] = decisions

    # per-device analytics on whatever reached each twin
    results = []
    fusion = scenario.fusion
    for i, dev in enumerate(scenario.devices):
        twin = twins[dev.device_id]
        artifacts = device_artifacts[dev.device_id]
        rows = artifacts["feature_rows"]

        # brain-state estimate: last up-to-10 ingested windows, or the full
        # denoised record when nothing passed the gate (parked data is still
        # available locally on the fog node)
        if twin.feature_log:
            window_rows = [f for _, f in twin.feature_log[-10:]]
        else:
            window_rows = [fv.as_array() for _, fv in rows[-10:]]
        state = state_model.predict(np.asarray(window_rows))

        # scan finding: seizure/interictal regimes carry a focal scan,
        # healthy ones a clean scan
        scan_rng = np.random.default_rng(seed * 1000 + 40 + i)
        n_foci = 0 if dev.regime == "healthy" else int(scan_rng.integers(2, 4))
        image, _ = vit.synth_scan(scan_rng, vit_config, n_foci=n_foci)
        grid = vit.patchify(image, vit_config.patch_size)
        prob_map, _, _ = vit.forward(vit_params, grid, vit_config)
        stats = vit.adaptive_threshold(prob_map)
        finding = finding_from_probs(prob_map, stats, scenario.reference_volume_cc)
        artifacts["scan_image"] = image
        artifacts["prob_map"] = prob_map
        artifacts["threshold"] = stats
        artifacts["heatmap"] = vit.patch_attribution(vit_params, grid, vit_config)

        fused = update_risk(twin, state, finding, fusion)

        series = kinetics.synth_volume_series(seed * 1000 + 60 + i,
                                              n=scenario.kinetics_n_obs)
        fitted = kinetics.fit(series, degree=3)
        fc = kinetics.forecast(fitted, float(series.t_days[-1]) + scenario.horizon_days)
        twin.forecast = fc
        artifacts["series"] = series
        artifacts["fit"] = fitted

        counts = per_device_counts[dev.device_id]
        results.append(DeviceResult(
            device_id=dev.device_id, regime=dev.regime, n_windows=len(rows),
            snr_before_db=artifacts["snr_before"],
            snr_after_db=artifacts["snr_after"],
            stored=counts["stored"], parked=counts["parked"],
            rejected=counts["rejected"],
            state_label=state.argmax_label,
            state_probs=[float(p) for p in state.probs],
            finding=finding, fused_risk=fused, band=risk_band(fused),
            forecast_point_cc=fc.point_cc, forecast_low_cc=fc.interval_low_cc,
            forecast_high_cc=fc.interval_high_cc,
        ))

    report = RunReport(
        seed=seed,
        produced=node.produced,
        stored=len(node.cloud),
        parked=len(node.parked),
        rejected=node.rejected_count,
        rejected_by_reason=dict(sorted(node.rejects.items())),
        conservation_ok=node.conservation_holds(),
        devices=results,
    )

    if out_dir is not None:
        _write_artifacts(out_dir, scenario, report, device_artifacts, twins,
                         node)
    return report


def _write_artifacts(out_dir: str, scenario: ScenarioConfig, report: RunReport,
                     device_artifacts: Dict[str, dict],
                     twins: Dict[str, TwinState], node: fog.FogNode) -> None:
    os.makedirs(out_dir, exist_ok=True)

    with open(os.path.join(out_dir, "report.txt"), "w", encoding="utf-8",
              newline="\n") as fh:
        fh.write(report.to_text())

    with open(os.path.join(out_dir, "twins.jsonl"), "w", encoding="utf-8",
              newline="\n") as fh:
        for device_id in sorted(twins):
            fh.write(twin_to_record(twins[device_id]) + "\n")

    with open(os.path.join(out_dir, "cloud_store.jsonl"), "w", encoding="utf-8",
              newline="\n") as fh:
        for record in node.cloud.records():
            fh.write(json.dumps(record, separators=(",", ":")) + "\n")

    for device_id, artifacts in device_artifacts.items():
        prefix = os.path.join(out_dir, device_id)
        signal_chain.write_signal_csv(prefix + "_contaminated.csv",
                                      artifacts["contaminated"])
        signal_chain.write_signal_csv(prefix + "_denoised.csv",
                                      artifacts["denoised"])
        feat_mod.write_features_csv(prefix + "_features.csv",
                                    artifacts["feature_rows"])
        with open(prefix + "_decisions.csv", "w", encoding="utf-8",
                  newline="\n") as fh:
            fh.write("index,action,reason,risk_high_prob\n")
            for i, processed in enumerate(artifacts["decisions"]):
                d = processed.decision
                fh.write(f"{i},{d.action},{d.reason},{d.risk_high_prob!r}\n")

        # denoising figure: contaminated vs denoised
        sig = artifacts["contaminated"]
        times = sig.times()
        chart = svg.signal_chart(
            [("contaminated_uv", times, artifacts["contaminated"].samples),
             ("denoised_uv", times, artifacts["denoised"].samples)],
            title=f"{device_id}: raw vs denoised "
                  f"({artifacts['snr_before']:.2f} dB -> {artifacts['snr_after']:.2f} dB)")
        with open(prefix + "_denoise.svg", "w", encoding="utf-8",
                  newline="\n") as fh:
            fh.write(chart)

        # band-power breakdown of the final window
        last_fv = artifacts["feature_rows"][-1][1]
        bands = [name for name, _, _ in feat_mod.BANDS]
        powers = [getattr(last_fv, f"{name}_pw") for name in bands]
        with open(prefix + "_bands.svg", "w", encoding="utf-8",
                  newline="\n") as fh:
            fh.write(svg.bar_chart(bands, powers,
                                   title=f"{device_id}: band power (last window)",
                                   unit="uV^2"))

        # patch heatmap
        side = int(math.isqrt(artifacts["heatmap"].size))
        with open(prefix + "_heatmap.svg", "w", encoding="utf-8",
                  newline="\n") as fh:
            fh.write(svg.heatmap_chart(
                artifacts["heatmap"].reshape(side, side),
                title=f"{device_id}: patch attribution"))

        # kinetics chart + CSV
        series = artifacts["series"]
        fitted = artifacts["fit"]
        t_line = np.linspace(series.t_days[0], series.t_days[-1] + scenario.horizon_days, 120)
        v_line = kinetics.predict(fitted, t_line)
        t_fc = np.linspace(series.t_days[-1], series.t_days[-1] + scenario.horizon_days, 24)
        fcs = [kinetics.forecast(fitted, float(t)) for t in t_fc]
        kinetics.write_forecast_csv(prefix + "_forecast.csv", series, fitted, fcs)
        with open(prefix + "_kinetics.svg", "w", encoding="utf-8",
                  newline="\n") as fh:
            fh.write(svg.kinetics_chart(
                series.t_days, series.volume_cc, t_line, v_line,
                np.array([f.t_future for f in fcs]),
                np.array([f.interval_low_cc for f in fcs]),
                np.array([f.interval_high_cc for f in fcs]),
                np.array([f.point_cc for f in fcs]),
                title=f"{device_id}: volume trend + forecast"))
