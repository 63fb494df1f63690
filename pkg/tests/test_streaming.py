import io

import numpy as np
import pytest

from tcndrc.model import ControlParams, TcnConfig, build_model, preset
from tcndrc.streaming import (
    RingBuffer,
    StreamingError,
    StreamState,
    benchmark,
    process_block,
    real_time_factor,
    write_bench_csv,
)

SMALL = TcnConfig(kernel_size=3, num_layers=3, dilation_growth=4, channels=4, cond_dim=8)
PHI = ControlParams(1.0, 0.35)


def offline(model, x):
    return model.forward(x[None], PHI)[0]


@pytest.mark.parametrize("strategy", StreamState.STRATEGIES)
@pytest.mark.parametrize("frame", [1, 5, 64, 333])
def test_small_model_matches_offline(rng, strategy, frame):
    model = build_model(SMALL, seed=2)
    x = (0.3 * rng.standard_normal(1000)).astype(np.float32)
    out = StreamState(model, PHI, frame, strategy).process(x)
    assert out.shape == x.shape
    assert np.max(np.abs(out - offline(model, x))) < 1e-6


@pytest.mark.parametrize("strategy", StreamState.STRATEGIES)
def test_tcn100_frame_2048(rng, strategy):
    model = build_model(preset("tcn100"), seed=0)
    x = (0.3 * rng.standard_normal(16384)).astype(np.float32)
    out = StreamState(model, PHI, 2048, strategy).process(x)
    assert np.max(np.abs(out - offline(model, x))) < 1e-6


def test_tcn100_sample_by_sample(rng):
    model = build_model(preset("tcn100"), seed=0)
    x = (0.3 * rng.standard_normal(3000)).astype(np.float32)
    out = StreamState(model, PHI, 1, "cached").process(x)
    assert np.max(np.abs(out - offline(model, x))) < 1e-6


def test_first_block_equals_offline_prefix(rng):
    model = build_model(preset("tcn300"), seed=1)
    x = (0.3 * rng.standard_normal(2048)).astype(np.float32)
    first = StreamState(model, PHI, 2048).process_block(x)
    assert np.max(np.abs(first - offline(model, x))) < 1e-6


def test_ragged_last_frame(rng):
    model = build_model(SMALL)
    x = rng.standard_normal(1000).astype(np.float32)
    state = StreamState(model, PHI, 256)
    parts = [process_block(state, x[:256]), process_block(state, x[256:512]), process_block(state, x[512:700])]
    np.testing.assert_allclose(np.concatenate(parts), offline(model, x[:700]), atol=1e-6)


def test_history_is_last_raw_samples(rng):
    r = SMALL.receptive_field
    x = rng.standard_normal(500).astype(np.float32)
    for seed in (0, 1):
        state = StreamState(build_model(SMALL, seed=seed), PHI, 37)
        fed = 0
        for k in range(6):
            state.process_block(x[fed : fed + 37])
            fed += 37
            expected = np.concatenate([np.zeros(r - 1, np.float32), x[:fed]])[-(r - 1):]
            np.testing.assert_array_equal(state.history.ordered(), expected)


def test_reset_restores_zero_history(rng):
    model = build_model(SMALL)
    x = rng.standard_normal(300).astype(np.float32)
    for strategy in StreamState.STRATEGIES:
        state = StreamState(model, PHI, 100, strategy)
        first = state.process(x)
        state.reset()
        np.testing.assert_array_equal(state.process(x), first)


def test_noncausal_rejected_at_construction():
    with pytest.raises(StreamingError, match="causal"):
        StreamState(build_model(preset("tcn100-noncausal")), PHI)


def test_bad_arguments_rejected():
    model = build_model(SMALL)
    with pytest.raises(StreamingError):
        StreamState(model, PHI, 0)
    with pytest.raises(StreamingError):
        StreamState(model, PHI, 8, "magic")
    with pytest.raises(StreamingError):
        StreamState(model, PHI, 8).process_block(np.zeros(9))


def test_ring_buffer_wraps():
    ring = RingBuffer(4)
    ring.write(np.array([1, 2, 3]))
    ring.write(np.array([4, 5]))
    np.testing.assert_array_equal(ring.ordered(), [2, 3, 4, 5])
    ring.write(np.arange(10, 20))
    np.testing.assert_array_equal(ring.ordered(), [16, 17, 18, 19])


# ---------------------------------------------------------------- benchmark


def test_real_time_factor_formula():
    assert real_time_factor(44100, 1.0, 44100) == 1.0
    assert real_time_factor(2048, 0.02322, 44100) == pytest.approx(2.0, abs=1e-3)


def test_benchmark_reports_each_size():
    model = build_model(SMALL)
    reports = benchmark(model, [32, 256, 4096], seconds_per_point=0.05)
    assert [r.frame_size for r in reports] == [32, 256, 4096]
    for r in reports:
        assert r.rt_factor > 0 and r.frames >= 1
        assert r.rt_factor == pytest.approx(real_time_factor(r.frame_size * r.frames, r.seconds, 44100))


def test_larger_frames_run_faster_than_real_time():
    reports = benchmark(build_model(preset("tcn100")), [32, 65536], seconds_per_point=0.3)
    assert reports[1].rt_factor > reports[0].rt_factor


def test_bench_csv():
    model = build_model(SMALL)
    out = io.StringIO()
    write_bench_csv(benchmark(model, [64, 128], seconds_per_point=0.01), out)
    lines = out.getvalue().splitlines()
    assert lines[0] == "frame_size,seconds,rt_factor"
    assert [line.split(",")[0] for line in lines[1:]] == ["64", "128"]
