import numpy as np
import pytest

from affect_e2e import synth
from affect_e2e.analysis import (
    DESCRIPTORS,
    _pearson_columns,
    compute_descriptors,
    frame_audio,
    frame_f0,
    gate_correlation,
    sliding_range,
)
from affect_e2e.errors import DataError
from affect_e2e.trainer import build_model


def tone(freq, seconds=1.0, amp=0.5):
    t = np.arange(int(16000 * seconds)) / 16000
    return amp * np.sin(2 * np.pi * freq * t)


def test_descriptors_of_a_sine():
    d = compute_descriptors(tone(200.0))
    assert len(d) == 25
    np.testing.assert_allclose(d.rms_energy, 0.5 / np.sqrt(2), rtol=1e-3)
    np.testing.assert_allclose(d.f0, 200.0, atol=0.1)
    assert d.voiced.all()
    np.testing.assert_allclose(d.loudness, np.log1p(d.rms_energy / 1e-3))


@pytest.mark.parametrize("freq", [90.0, 151.3, 260.0, 390.0])
def test_f0_across_band(freq):
    f0, strength = frame_f0(tone(freq, 0.04))
    assert abs(f0 - freq) < 0.5 and strength > 0.9


def test_silence_and_noise_are_unvoiced(rng):
    d = compute_descriptors(np.zeros(16000))
    assert not d.voiced.any() and np.all(np.isnan(d.f0))
    assert np.isnan(frame_f0(rng.normal(size=640))[0])


def test_f0_is_carried_across_gaps():
    audio = np.concatenate([tone(200.0, 0.2), np.zeros(3200), tone(300.0, 0.2)])
    d = compute_descriptors(audio)
    assert not d.voiced[5:10].any()
    np.testing.assert_allclose(d.f0[5:10], 200.0, atol=0.1)
    np.testing.assert_allclose(d.f0[10:], 300.0, atol=0.5)


def test_range_and_framing():
    np.testing.assert_array_equal(sliding_range(np.array([0.0, 1.0, 0.0, 3.0]), 3), [1, 1, 3, 3])
    assert frame_audio(np.zeros(1300)).shape == (2, 640)
    with pytest.raises(DataError):
        frame_audio(np.zeros(100))
    with pytest.raises(DataError):
        frame_audio([])


def test_pearson_columns_flags_constant_cells():
    traces = np.stack([np.arange(5.0), np.full(5, 2.0), -np.arange(5.0)], axis=1)
    rho, degenerate = _pearson_columns(traces, np.arange(5.0) * 3 + 1)
    assert list(degenerate) == [False, True, False]
    np.testing.assert_allclose(rho[[0, 2]], [1.0, -1.0])
    assert np.isnan(rho[1])


def test_gate_report_shape_and_files(tmp_path):
    rec = synth.generate_recording("r", 7, 12)
    model = build_model("speech", hidden_size=6, seed=1)
    report = gate_correlation(model, rec)
    assert len(report.rows) == 2 * 6 * len(DESCRIPTORS)
    assert report.traces[0].shape == (300, 6)
    ranked = [abs(r.rho) for r in report.rows if not r.degenerate]
    assert ranked == sorted(ranked, reverse=True)
    assert 0.0 <= report.max_abs("rms_energy") <= 1.0
    paths = report.write(tmp_path, k=2)
    assert {p.name for p in paths} == {"gate_correlations.csv"} | {f"gate_plot_{d}.csv" for d in DESCRIPTORS}
    plot = (tmp_path / "gate_plot_rms_energy.csv").read_text().splitlines()
    assert plot[0].startswith("time_s,rms_energy_norm,layer") and len(plot) == 301
    values = np.array([[float(v) for v in line.split(",")[1:]] for line in plot[1:]])
    assert values.min() == 0.0 and values.max() == 1.0


def test_gate_report_needs_audio():
    rec = synth.generate_recording("r", 7, 6)
    silent = synth.SyntheticRecording(rec.id, rec.trajectory, None, rec.frames, rec.seed)
    with pytest.raises(DataError):
        gate_correlation(build_model("visual", hidden_size=4), silent)
