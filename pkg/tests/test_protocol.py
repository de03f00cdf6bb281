import numpy as np
import pytest

from evled.protocol import (
    DecodeTally,
    ProtocolConfig,
    Symbol,
    SymbolSequence,
    classify_interval,
    decode_intervals,
    encode_id,
    symbols_to_waveform,
    tile_waveform,
)

CFG = ProtocolConfig()  # 5 kHz, 8 bits, tol 50, class_tol 60


class TestConfig:
    def test_defaults(self):
        assert CFG.base_period_us == 200

    def test_rejects_bad_tolerance(self):
        with pytest.raises(ValueError):
            ProtocolConfig(tolerance_us=200)

    def test_rejects_bad_class_tol(self):
        with pytest.raises(ValueError):
            ProtocolConfig(class_tol_us=101)


class TestEncode:
    def test_all_zeros(self):
        cfg = ProtocolConfig(bit_width=2)
        assert encode_id(0, cfg).symbols == (Symbol.START, Symbol.BIT0, Symbol.BIT0)

    def test_binary_of_five(self):
        cfg = ProtocolConfig(bit_width=3)
        assert encode_id(5, cfg).symbols == (
            Symbol.START,
            Symbol.BIT1,
            Symbol.BIT0,
            Symbol.BIT1,
        )

    def test_all_ones(self):
        seq = encode_id(255, CFG)
        assert seq.symbols[0] is Symbol.START
        assert all(s is Symbol.BIT1 for s in seq.symbols[1:])
        assert len(seq) == 9

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            encode_id(256, CFG)
        with pytest.raises(ValueError):
            encode_id(-1, CFG)


class TestWaveform:
    def test_start_only(self):
        w = symbols_to_waveform(SymbolSequence((Symbol.START,)), CFG)
        assert w.transitions == ((0, True), (600, False))
        assert w.period_us == 800

    def test_start_one_zero(self):
        # hand sum: start 3T+1T, bit1 2T+1T, bit0 1T+1T -> 9T = 1800 us
        seq = SymbolSequence((Symbol.START, Symbol.BIT1, Symbol.BIT0))
        w = symbols_to_waveform(seq, CFG)
        assert list(w.rising_edges()) == [0, 800, 1400]
        assert w.period_us == 1800

    def test_one_pulse_per_symbol(self):
        for ident in (0, 5, 77, 255):
            seq = encode_id(ident, CFG)
            w = symbols_to_waveform(seq, CFG)
            assert len(w.rising_edges()) == len(seq)

    def test_period_formula(self):
        # period == sum(ON durations) + n_symbols * T, exactly
        t = CFG.base_period_us
        on = {Symbol.START: 3 * t, Symbol.BIT1: 2 * t, Symbol.BIT0: 1 * t}
        for ident in (0, 1, 128, 200, 255):
            seq = encode_id(ident, CFG)
            w = symbols_to_waveform(seq, CFG)
            assert w.period_us == sum(on[s] for s in seq) + len(seq) * t


class TestClassify:
    def test_exact_bit0(self):
        assert classify_interval(400, CFG) is Symbol.BIT0

    def test_near_start(self):
        assert classify_interval(815, CFG) is Symbol.START  # |815-800| = 15 <= 60

    def test_invalid_gap(self):
        assert classify_interval(510, CFG) is None  # 110 and 90 from 400/600

    def test_midpoint_tie_breaks_shorter(self):
        assert classify_interval(500, ProtocolConfig(class_tol_us=100)) is Symbol.BIT0
        assert classify_interval(700, ProtocolConfig(class_tol_us=100)) is Symbol.BIT1

    def test_rejects_non_positive(self):
        with pytest.raises(ValueError):
            classify_interval(0, CFG)


def frame_edges(ident, cfg, repetitions=1):
    """Rising edges of the repeated pattern for one ID.

    Includes the first edge of the following repetition, which closes the
    last bit interval (the LED blinks continuously).
    """
    w = symbols_to_waveform(encode_id(ident, cfg), cfg)
    edges = []
    for k in range(repetitions):
        edges.extend(int(t) + k * w.period_us for t in w.rising_edges())
    edges.append(repetitions * w.period_us)
    return np.array(edges, dtype=np.int64)


class TestDecode:
    def test_round_trip_three_repetitions(self):
        cfg = ProtocolConfig(bit_width=3)
        edges = frame_edges(5, cfg, repetitions=3)
        decoded = decode_intervals(edges, cfg)
        assert [d.id for d in decoded] == [5, 5, 5]

    def test_no_start_pattern(self):
        assert decode_intervals([0, 400, 800], CFG) == []

    def test_perturbed_edge_drops_one_frame(self):
        cfg = ProtocolConfig(bit_width=3)
        edges = frame_edges(5, cfg, repetitions=3)
        # corrupt a bit edge inside the first frame
        edges = edges.copy()
        edges[2] += 300
        tally = DecodeTally()
        decoded = decode_intervals(edges, cfg, tally)
        assert len(decoded) == 2
        assert all(d.id == 5 for d in decoded)
        assert tally.aborted_invalid >= 1

    def test_start_and_end_edges(self):
        cfg = ProtocolConfig(bit_width=3)
        w = symbols_to_waveform(encode_id(5, cfg), cfg)
        edges = frame_edges(5, cfg, repetitions=2)
        (d,) = decode_intervals(edges[:5], cfg)
        assert d.t_start == 0
        assert d.t_end == int(edges[3])  # rising edge of the last bit

    def test_rejects_non_increasing(self):
        with pytest.raises(ValueError):
            decode_intervals([0, 100, 100], CFG)

    def test_premature_start_restarts(self):
        cfg = ProtocolConfig(bit_width=2)
        t = cfg.base_period_us
        # START, BIT0, then a START interval before the frame completes,
        # followed by a complete frame for id=3
        edges = [0, 4 * t, 6 * t, 10 * t, 13 * t, 16 * t]
        decoded = decode_intervals(edges, cfg)
        assert [d.id for d in decoded] == [3]

    def test_round_trip_all_ids(self):
        for ident in range(256):
            decoded = decode_intervals(frame_edges(ident, CFG), CFG)
            assert len(decoded) == 1 and decoded[0].id == ident

    def test_jitter_robustness(self):
        rng = np.random.default_rng(42)
        half = CFG.tolerance_us // 2  # +-25 us
        for ident in (0, 1, 85, 170, 255):
            edges = frame_edges(ident, CFG, repetitions=4)
            jittered = edges + rng.integers(-half, half + 1, size=len(edges))
            decoded = decode_intervals(jittered, CFG)
            assert len(decoded) >= 3
            assert all(d.id == ident for d in decoded)


class TestTile:
    def test_tile_covers_span(self):
        w = symbols_to_waveform(encode_id(5, ProtocolConfig(bit_width=3)), ProtocolConfig(bit_width=3))
        trans = tile_waveform(w, 0, 5 * w.period_us)
        ons = [t for t, on in trans if on]
        assert ons[0] == 0
        assert ons == sorted(ons)
        # one pattern per period, 4 symbols each, plus the repetition at t1
        assert len(ons) == 4 * 5 + 1

    def test_phase_offset(self):
        w = symbols_to_waveform(encode_id(0, ProtocolConfig(bit_width=1)), ProtocolConfig(bit_width=1))
        trans = tile_waveform(w, 0, 3 * w.period_us, phase_us=137)
        ons = [t for t, on in trans if on]
        assert all((t - 137) % w.period_us in (0, 800) for t in ons)
