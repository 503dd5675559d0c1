import numpy as np
import pytest

from headfield.solver import LeadRow, LeadTable
from headfield.sources import Dipole, SourceSet
from headfield.synth import (
    EpspParams,
    MismatchError,
    amplitude_table,
    epsp_kernel,
    latencies,
    peak_to_peak,
    synthesize,
    synthesize_recording,
)

P = EpspParams()


class TestKernel:
    def test_peak_at_zero(self):
        assert epsp_kernel(0.0, P) == 1.0

    def test_one_time_constant(self):
        assert epsp_kernel(P.tau, P) == pytest.approx(0.36788, abs=1e-5)

    def test_causal(self):
        assert epsp_kernel(-1e-3, P) == 0.0
        assert np.all(epsp_kernel(np.array([-0.5, -1e-9]), P) == 0.0)

    def test_duration_guard(self):
        with pytest.raises(ValueError):
            EpspParams(tau=0.03, duration=0.1)


class TestLatencies:
    def make_set(self, xs):
        dips = [Dipole((x, 0.0, 0.0), (0, 0, 1)) for x in xs]
        return SourceSet(dips, [], seed=0)

    def test_three_mm_is_ten_ms(self):
        d = latencies(self.make_set([0.0, 3e-3]), P)
        assert d[0] == 0.0
        assert d[1] == pytest.approx(0.010, rel=1e-12)

    def test_single_dipole_zero(self):
        assert latencies(self.make_set([4e-3]), P)[0] == 0.0

    def test_equal_x_all_zero(self):
        assert np.all(latencies(self.make_set([1e-3] * 5), P) == 0.0)


class TestSynthesize:
    def test_single_kernel_peak_to_peak(self):
        a = 3.7e-6
        w = synthesize([a], [0.0], P)
        n = P.n_samples
        assert n == 102
        expected = a * (1.0 - np.exp(-((n - 1) / P.sample_rate) / P.tau))
        assert peak_to_peak(w) == pytest.approx(expected, rel=1e-9)

    def test_opposite_pair_cancels(self):
        w = synthesize([1e-6, -1e-6], [0.004, 0.004], P)
        assert np.all(w == 0.0)

    def test_scaling_exact(self):
        pots = np.array([2e-6, -1e-6, 5e-7])
        dels = np.array([0.0, 0.003, 0.011])
        w1 = synthesize(pots, dels, P)
        w2 = synthesize(2.0 * pots, dels, P)
        assert np.array_equal(w2, 2.0 * w1)
        assert peak_to_peak(w2) == 2.0 * peak_to_peak(w1)

    def test_superposition_exact(self):
        pots = np.array([2e-6, -1e-6, 5e-7])
        dels = np.array([0.0, 0.003, 0.011])
        joint = synthesize(pots, dels, P)
        parts = synthesize(pots[:2], dels[:2], P) + synthesize(pots[2:], dels[2:], P)
        assert np.array_equal(joint, parts)

    def test_time_shift_equivariance(self):
        pots = np.array([2e-6, -1.5e-6])
        dels = np.array([2.0, 5.0]) / P.sample_rate  # sample-aligned
        m = 7
        shift = m / P.sample_rate
        w = synthesize(pots, dels, P)
        w2 = synthesize(pots, dels + shift, P)
        assert np.array_equal(w2[m:], w[:-m])
        assert np.all(w2[:m] == 0.0)
        assert peak_to_peak(w2) == peak_to_peak(w)  # extremes are interior

    def test_sign_flip_invariance(self):
        pots = np.array([2e-6, -1e-6, 5e-7])
        dels = np.array([0.0, 0.003, 0.011])
        assert peak_to_peak(synthesize(-pots, dels, P)) == \
            peak_to_peak(synthesize(pots, dels, P))

    def test_mismatch(self):
        with pytest.raises(MismatchError):
            synthesize([1.0, 2.0], [0.0], P)


def make_table(leads_by_electrode, n_dist=1):
    rows = []
    for d in range(n_dist):
        for eid, pots in leads_by_electrode.items():
            for i, v in enumerate(pots):
                rows.append(LeadRow(eid, i, d, v, 1e-2, 0.0))
    return LeadTable(rows)


class TestRecordingAndAmplitudes:
    def test_recording_shape_and_zero_start(self):
        dips = [Dipole((0, 0, 0), (0, 0, 1)), Dipole((2e-3, 0, 0), (0, 0, 1))]
        ss = SourceSet(dips, [], seed=0, distribution_index=0)
        table = make_table({"a": [1e-6, 2e-6], "b": [3e-6, -1e-6]})
        rec = synthesize_recording(table, ss, P, ["a", "b"])
        assert rec.samples.shape == (2, P.n_samples)
        # every kernel peaks at its onset; the latest-onset dipole has x=min -> delay 0
        assert rec.samples[0, 0] != 0.0

    def test_quantized_to_storage_precision(self):
        dips = [Dipole((0, 0, 0), (0, 0, 1))]
        ss = SourceSet(dips, [], seed=0)
        table = make_table({"a": [1.23456789e-6]})
        rec = synthesize_recording(table, ss, P, ["a"])
        assert np.array_equal(rec.samples,
                              rec.samples.astype(np.float32).astype(np.float64))

    def test_amplitude_normalization(self):
        dips = [Dipole((0, 0, 0), (0, 0, 1))]
        recs = []
        for d in range(3):
            ss = SourceSet(dips, [], seed=d, distribution_index=d)
            table = make_table({"big": [2e-6 * (1 + 0.1 * d)], "small": [1e-7]}, n_dist=3)
            recs.append(synthesize_recording(table, ss, P, ["big", "small"]))
        amp = amplitude_table(recs)
        assert max(np.median(v) for v in amp.values()) == pytest.approx(1.0)
        assert np.median(amp["big"]) == pytest.approx(1.0)
        assert np.median(amp["small"]) < 0.1

    def test_identical_waveforms_zero_variance(self):
        dips = [Dipole((0, 0, 0), (0, 0, 1))]
        table = make_table({"a": [1e-6]}, n_dist=2)
        recs = [synthesize_recording(table, SourceSet(dips, [], seed=0,
                                                      distribution_index=d),
                                     P, ["a"]) for d in range(2)]
        amp = amplitude_table(recs)
        assert np.var(amp["a"]) == 0.0
