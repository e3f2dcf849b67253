"""Frame codec, authentication, gating, and exactly-once forwarding."""

import threading

import numpy as np
import pytest

from neurotwin.errors import InvalidInputError
from neurotwin.fog import (
    ACTION_FORWARD,
    ACTION_PARK,
    ACTION_REJECT,
    CloudStore,
    FogNode,
    FrameError,
    GateConfig,
    GateDecision,
    Packet,
    REASON_BAD_HMAC,
    REASON_BAD_SCHEMA,
    REASON_BELOW,
    REASON_DUPLICATE,
    REASON_FORWARDED,
    REASON_STALE,
    REASON_STORE_UNAVAILABLE,
    REASON_UNKNOWN_DEVICE,
    RiskModel,
    decode_frame,
    encode_frame,
    forward_exactly_once,
    gate,
    hmac_sha256_hex,
    load_registry,
    make_registry,
    risk_score,
    save_registry,
    send_frames_loopback,
    serve_loopback,
    sign_packet,
    signing_bytes,
    validate_timestamp,
    verify_packet,
)

KEY = bytes(range(32))
NOW = 1_755_000_000_000


def make_packet(seq=0, ts=NOW, device="dev-01", rng_seed=0):
    rng = np.random.default_rng(rng_seed)
    return Packet(device, ts, seq, tuple(rng.uniform(0, 50, 11)))


def signed(seq=0, ts=NOW, device="dev-01", key=KEY, rng_seed=0):
    return sign_packet(make_packet(seq, ts, device, rng_seed), key)


def always_high_model():
    return RiskModel(np.zeros((2, 11)), np.array([0.0, 10.0]))


def always_low_model():
    return RiskModel(np.zeros((2, 11)), np.array([10.0, 0.0]))


class TestFrameCodec:
    def test_round_trip_bit_exact(self):
        rng = np.random.default_rng(1)
        for seed in range(10):
            packet = signed(seq=seed, rng_seed=seed,
                            ts=NOW + int(rng.integers(0, 10_000)))
            assert decode_frame(encode_frame(packet)) == packet

    def test_missing_hmac_field_rejected(self):
        packet = signed()
        frame = signing_bytes(packet) + b"\n"
        with pytest.raises(FrameError):
            decode_frame(frame)

    def test_wrong_feature_count_rejected(self):
        packet = signed()
        frame = encode_frame(packet)
        # drop one feature from the list
        start = frame.index(b"[") + 1
        end = frame.index(b"]")
        feats = frame[start:end].split(b",")
        bad = frame[:start] + b",".join(feats[:10]) + frame[end:]
        with pytest.raises(FrameError):
            decode_frame(bad)

    def test_non_finite_feature_rejected(self):
        frame = encode_frame(signed())
        start = frame.index(b"[") + 1
        end = frame.index(b"]")
        feats = frame[start:end].split(b",")
        feats[0] = b"NaN"
        bad = frame[:start] + b",".join(feats) + frame[end:]
        with pytest.raises(FrameError):
            decode_frame(bad)

    def test_field_order_enforced(self):
        packet = signed()
        frame = encode_frame(packet).decode()
        # swap device_id and seq fields textually
        swapped = frame.replace(
            f'"device_id":"{packet.device_id}","timestamp_utc_ms":{packet.timestamp_utc_ms},"seq":{packet.seq}',
            f'"seq":{packet.seq},"timestamp_utc_ms":{packet.timestamp_utc_ms},"device_id":"{packet.device_id}"')
        with pytest.raises(FrameError):
            decode_frame(swapped.encode())

    def test_needs_single_lf(self):
        frame = encode_frame(signed())
        with pytest.raises(FrameError):
            decode_frame(frame[:-1])
        with pytest.raises(FrameError):
            decode_frame(frame + b"\n")

    def test_seventeen_significant_digits_survive(self):
        feats = tuple([1.0 / 3.0, 1e-15, 123456.789012345] + [0.0] * 8)
        packet = sign_packet(Packet("dev-01", NOW, 0, feats), KEY)
        assert decode_frame(encode_frame(packet)).features == feats


class TestAuthentication:
    def test_rfc4231_case1_vector(self):
        digest = hmac_sha256_hex(b"\x0b" * 20, b"Hi There")
        assert digest == ("b0344c61d8db38535ca8afceaf0bf12b"
                          "881dc200c9833da726e9376c2e32cff7")

    def test_sign_verify_round_trip(self):
        registry = {"dev-01": KEY}
        assert verify_packet(signed(), registry) is None

    def test_tamper_detected(self):
        packet = signed()
        tampered = Packet(packet.device_id, packet.timestamp_utc_ms, packet.seq,
                          (packet.features[0] + 1e-9,) + packet.features[1:],
                          packet.hmac_hex)
        assert verify_packet(tampered, {"dev-01": KEY}) == REASON_BAD_HMAC

    def test_unknown_device(self):
        assert verify_packet(signed(), {"other": KEY}) == REASON_UNKNOWN_DEVICE

    def test_key_length_enforced(self):
        with pytest.raises(InvalidInputError):
            sign_packet(make_packet(), b"short")

    def test_registry_round_trip(self, tmp_path):
        registry = make_registry(["dev-00", "dev-01"], seed=4)
        path = tmp_path / "registry.tsv"
        save_registry(str(path), registry)
        assert load_registry(str(path)) == registry


class TestTimestamp:
    def test_exact_now_is_fresh(self):
        assert validate_timestamp(make_packet(ts=NOW), NOW, 5000)

    def test_one_past_window_is_stale(self):
        assert not validate_timestamp(make_packet(ts=NOW - 5001), NOW, 5000)

    def test_future_edge_is_fresh_symmetric(self):
        assert validate_timestamp(make_packet(ts=NOW + 5000), NOW, 5000)


class TestRiskScore:
    def test_zero_model_uniform(self):
        probs = risk_score(make_packet().features,
                           RiskModel(np.zeros((2, 11)), np.zeros(2)))
        np.testing.assert_allclose(probs, [0.5, 0.5], atol=1e-15)

    def test_log3_bias_gives_three_quarters(self):
        probs = risk_score(make_packet().features,
                           RiskModel(np.zeros((2, 11)),
                                     np.array([0.0, np.log(3.0)])))
        np.testing.assert_allclose(probs, [0.25, 0.75], atol=1e-12)

    def test_sums_to_one_and_shift_invariant(self):
        rng = np.random.default_rng(6)
        for _ in range(25):
            w = rng.normal(0, 1, (2, 11))
            b = rng.normal(0, 1, 2)
            x = rng.uniform(0, 40, 11)
            p1 = risk_score(x, RiskModel(w, b))
            p2 = risk_score(x, RiskModel(w, b + rng.uniform(-5, 5)))
            assert abs(p1.sum() - 1.0) <= 1e-12
            np.testing.assert_allclose(p1, p2, atol=1e-12)


class TestGate:
    def test_high_risk_forwards(self):
        d = gate(signed(), {"dev-01": KEY}, always_high_model(), NOW)
        assert (d.action, d.reason) == (ACTION_FORWARD, REASON_FORWARDED)
        assert d.risk_high_prob >= 0.75

    def test_below_threshold_parks(self):
        d = gate(signed(), {"dev-01": KEY}, always_low_model(), NOW)
        assert (d.action, d.reason) == (ACTION_PARK, REASON_BELOW)

    def test_boundary_just_below(self):
        # logits chosen so high probability is just under 0.75
        eps_model = RiskModel(np.zeros((2, 11)),
                              np.array([0.0, np.log(0.7499 / 0.2501)]))
        d = gate(signed(), {"dev-01": KEY}, eps_model, NOW)
        assert d.action == ACTION_PARK
        assert d.risk_high_prob < 0.75

    def test_stale_rejected_not_parked(self):
        stale = signed(ts=NOW - 60_000)
        d = gate(stale, {"dev-01": KEY}, always_high_model(), NOW)
        assert (d.action, d.reason) == (ACTION_REJECT, REASON_STALE)

    def test_auth_precedes_freshness(self):
        stale_unknown = signed(ts=NOW - 60_000, device="ghost")
        d = gate(stale_unknown, {"dev-01": KEY}, always_high_model(), NOW)
        assert d.reason == REASON_UNKNOWN_DEVICE

    def test_decision_invariant(self):
        with pytest.raises(InvalidInputError):
            GateDecision(0.9, ACTION_FORWARD, REASON_BELOW)


class TestExactlyOnce:
    def test_duplicate_delivery_stored_once(self):
        store = CloudStore()
        packet = signed()
        decision = GateDecision(0.9, ACTION_FORWARD, REASON_FORWARDED)
        first = forward_exactly_once(decision, packet, store)
        second = forward_exactly_once(decision, packet, store)
        assert first.stored and first.reason == REASON_FORWARDED
        assert not second.stored and second.reason == REASON_DUPLICATE
        assert len(store) == 1

    def test_thousand_distinct_forwards(self):
        store = CloudStore()
        decision = GateDecision(0.9, ACTION_FORWARD, REASON_FORWARDED)
        for seq in range(1000):
            forward_exactly_once(decision, signed(seq=seq), store)
        assert len(store) == 1000

    def test_interleaved_duplicates_two_devices(self):
        registry = make_registry(["dev-a", "dev-b"], seed=9)
        store = CloudStore()
        decision = GateDecision(0.9, ACTION_FORWARD, REASON_FORWARDED)
        rng = np.random.default_rng(11)
        sent = []
        for seq in range(50):
            for dev in ("dev-a", "dev-b"):
                sent.append(signed(seq=seq, device=dev, key=registry[dev]))
        deliveries = sent + [sent[i] for i in rng.integers(0, len(sent), 60)]
        rng.shuffle(deliveries)
        for packet in deliveries:
            forward_exactly_once(decision, packet, store)
        assert len(store) == 100

    def test_bounded_retries_then_parked(self):
        store = CloudStore()
        store.outages_remaining = 10
        decision = GateDecision(0.9, ACTION_FORWARD, REASON_FORWARDED)
        receipt = forward_exactly_once(decision, signed(), store, max_retries=3)
        assert not receipt.stored
        assert receipt.reason == REASON_STORE_UNAVAILABLE
        assert receipt.attempts == 4

    def test_recovers_within_retry_budget(self):
        store = CloudStore()
        store.outages_remaining = 2
        decision = GateDecision(0.9, ACTION_FORWARD, REASON_FORWARDED)
        receipt = forward_exactly_once(decision, signed(), store, max_retries=3)
        assert receipt.stored and receipt.attempts == 3

    def test_requires_forward_decision(self):
        with pytest.raises(InvalidInputError):
            forward_exactly_once(GateDecision(0.1, ACTION_PARK, REASON_BELOW),
                                 signed(), CloudStore())


class TestNodeConservation:
    def test_counts_add_up_with_store_outage(self):
        registry = {"dev-01": KEY}
        node = FogNode(registry, always_high_model())
        node.cloud.outages_remaining = 4  # exactly one forward exhausts retries
        frames = [encode_frame(signed(seq=i)) for i in range(5)]
        frames.append(frames[1])          # duplicate of a stored packet
        frames.append(b"not json\n")      # schema reject
        for frame in frames:
            node.process_frame(frame)
        assert node.conservation_holds()
        summary = node.summary()
        assert summary["produced"] == 7
        assert summary["parked"] == 1     # the outage-parked packet (seq 0)
        assert summary["stored"] == 4     # seqs 1..4
        assert summary["rejected_duplicate"] == 1
        assert summary["rejected_bad_schema"] == 1

    def test_redelivery_of_never_stored_packet_stores_it(self):
        # a "duplicate" frame only dedups if the first copy actually landed
        node = FogNode({"dev-01": KEY}, always_high_model())
        node.cloud.outages_remaining = 4
        frame = encode_frame(signed(seq=0))
        first = node.process_frame(frame)
        assert first.receipt.reason == REASON_STORE_UNAVAILABLE
        second = node.process_frame(frame)
        assert second.receipt.stored
        assert node.conservation_holds()

    def test_offline_replay_trusts_frame_clock(self):
        node = FogNode({"dev-01": KEY}, always_high_model())
        old = signed(ts=NOW - 10**9)
        processed = node.process_frame(encode_frame(old), now_utc_ms=None)
        assert processed.decision.action == ACTION_FORWARD


class TestLoopbackTcp:
    def test_frames_over_socket(self):
        registry = {"dev-01": KEY}
        node = FogNode(registry, always_high_model())
        ready = threading.Event()
        results = []

        def serve():
            results.extend(serve_loopback(node, "127.0.0.1", 45799,
                                          ready_event=ready))

        thread = threading.Thread(target=serve)
        thread.start()
        assert ready.wait(5)
        frames = [encode_frame(signed(seq=i)) for i in range(3)]
        frames.append(b"garbage\n")
        replies = send_frames_loopback("127.0.0.1", 45799, frames)
        thread.join(5)
        assert len(replies) == 4
        assert replies[0].startswith("forward,authenticated_forwarded")
        assert replies[3].startswith("reject,bad_schema")
        assert len(node.cloud) == 3
