"""Resampler, gammatone bank, spectrogram, patching and the feature cache."""

import numpy as np
import pytest

from respdl import dsp
from respdl.errors import FormatError, ParameterError


def erb_rate_reference(f):
    # independent oracle for the ERB-rate scale
    return 21.4 * np.log10(0.00437 * f + 1.0)


class TestResample:
    def test_identity_when_rates_equal(self, rng):
        x = rng.standard_normal(1000)
        out = dsp.resample(x, 16000, 16000)
        np.testing.assert_array_equal(out, x)

    def test_output_length(self, rng):
        x = rng.standard_normal(44100)
        assert len(dsp.resample(x, 44100, 16000)) == 16000

    def test_empty_input(self):
        assert len(dsp.resample(np.array([]), 44100, 16000)) == 0

    def test_sine_peak_survives(self):
        t = np.arange(44100) / 44100.0
        x = np.sin(2 * np.pi * 440.0 * t)
        y = dsp.resample(x, 44100, 16000)
        spectrum = np.abs(np.fft.rfft(y * np.hanning(len(y))))
        freqs = np.fft.rfftfreq(len(y), d=1 / 16000.0)
        peak = freqs[np.argmax(spectrum)]
        assert abs(peak - 440.0) <= 2.0

    def test_linearity(self, rng):
        x = rng.standard_normal(2000)
        a = 3.7
        ya = dsp.resample(a * x, 44100, 16000)
        y = dsp.resample(x, 44100, 16000)
        np.testing.assert_allclose(ya, a * y, rtol=1e-9, atol=1e-12)

    def test_upsampling_length(self, rng):
        x = rng.standard_normal(4000)
        assert len(dsp.resample(x, 4000, 16000)) == 16000

    def test_antialias_kills_high_band(self):
        # 7 kHz tone at 44.1 kHz lies above the 16 kHz target passband edge
        # once downsampled it must not alias into a strong component
        t = np.arange(44100) / 44100.0
        x = np.sin(2 * np.pi * 10000.0 * t)
        y = dsp.resample(x, 44100, 16000)
        assert np.sqrt(np.mean(y**2)) < 0.05

    def test_bad_rates(self):
        with pytest.raises(ParameterError):
            dsp.resample(np.zeros(10), 0, 16000)


class TestGammatoneBank:
    def test_single_channel_degenerate(self):
        bank = dsp.build_gammatone_bank(n_channels=1)
        assert bank.center_freqs.shape == (1,)
        assert 50.0 < bank.center_freqs[0] < 8000.0

    def test_center_bounds_and_monotone(self):
        bank = dsp.build_gammatone_bank()
        cf = bank.center_freqs
        assert cf.shape == (64,)
        assert np.all(np.diff(cf) > 0)
        assert cf[0] >= 50.0
        assert cf[-1] < 8000.0

    def test_erb_uniform_spacing(self):
        bank = dsp.build_gammatone_bank()
        rates = erb_rate_reference(bank.center_freqs)
        diffs = np.diff(rates)
        assert np.max(np.abs(diffs - diffs[0])) < 1e-6

    def test_rows_nonnegative_with_positive_mass(self):
        bank = dsp.build_gammatone_bank()
        assert np.all(bank.weights >= 0)
        assert np.all(bank.weights.sum(axis=1) > 0)
        assert bank.weights.shape == (64, 1025)

    def test_fmin_above_nyquist_rejected(self):
        with pytest.raises(ParameterError):
            dsp.build_gammatone_bank(f_min=9000.0)


class TestSpectrogram:
    def test_frame_count_16000(self):
        bank = dsp.build_gammatone_bank()
        spec = dsp.gammatone_spectrogram(np.random.default_rng(0).standard_normal(16000), bank)
        assert spec.values.shape == (64, 59)

    def test_frame_count_law_random_lengths(self, rng):
        bank = dsp.build_gammatone_bank(n_channels=4, fft_len=2048)
        for _ in range(50):
            n = int(rng.integers(1024, 60000))
            spec = dsp.gammatone_spectrogram(rng.standard_normal(n), bank)
            assert spec.values.shape[1] == (n - 1024) // 256 + 1

    def test_zero_input_is_constant_log_eps(self):
        bank = dsp.build_gammatone_bank()
        spec = dsp.gammatone_spectrogram(np.zeros(4096), bank)
        np.testing.assert_array_equal(spec.values, np.log(1e-10))

    def test_white_noise_lights_all_channels(self):
        bank = dsp.build_gammatone_bank()
        floor = np.log(1e-10)
        for seed in range(10):
            x = np.random.default_rng(seed).standard_normal(8000)
            spec = dsp.gammatone_spectrogram(x, bank)
            assert np.all(spec.values.max(axis=1) > floor + 1.0)

    def test_tone_maximizes_matching_channel(self):
        bank = dsp.build_gammatone_bank()
        t = np.arange(16000) / 16000.0
        for k in (10, 30, 50):
            tone = np.sin(2 * np.pi * bank.center_freqs[k] * t)
            spec = dsp.gammatone_spectrogram(tone, bank)
            energy = spec.values.mean(axis=1)
            assert np.argmax(energy) == k

    def test_too_short_raises(self):
        bank = dsp.build_gammatone_bank()
        with pytest.raises(ParameterError):
            dsp.gammatone_spectrogram(np.zeros(1023), bank)

    def test_normalization_applied(self, rng):
        bank = dsp.build_gammatone_bank()
        x = rng.standard_normal(5000)
        raw = dsp.gammatone_spectrogram(x, bank)
        stats = dsp.NormStats(mean=2.0, std=4.0)
        normed = dsp.gammatone_spectrogram(x, bank, stats=stats)
        np.testing.assert_allclose(normed.values, (raw.values - 2.0) / 4.0)


class TestNormStats:
    def test_constant_matrix_floors_std(self):
        stats = dsp.fit_norm_stats([np.full((4, 5), 3.25)])
        assert stats.mean == pytest.approx(3.25)
        assert stats.std == 1e-6

    def test_two_matrices_mean(self):
        stats = dsp.fit_norm_stats([np.zeros((3, 3)), np.full((3, 3), 2.0)])
        assert stats.mean == pytest.approx(1.0)

    def test_self_consistency_after_normalizing(self, rng):
        specs = [rng.standard_normal((8, 20)) * 3 + 5 for _ in range(4)]
        stats = dsp.fit_norm_stats(specs)
        normed = [(s - stats.mean) / stats.std for s in specs]
        again = dsp.fit_norm_stats(normed)
        assert abs(again.mean) < 1e-6
        assert abs(again.std - 1.0) < 1e-6

    def test_empty_raises(self):
        with pytest.raises(ParameterError):
            dsp.fit_norm_stats([])


class TestPatchify:
    def _spec(self, t):
        values = np.arange(64 * t, dtype=np.float64).reshape(64, t)
        return dsp.Spectrogram(values=values, entity_id="e")

    def test_exact_division(self):
        patches = dsp.patchify(self._spec(256), 128)
        assert len(patches) == 2
        np.testing.assert_array_equal(patches[0].values, self._spec(256).values[:, :128])
        np.testing.assert_array_equal(patches[1].values, self._spec(256).values[:, 128:])

    def test_right_aligned_remainder(self):
        patches = dsp.patchify(self._spec(300), 128)
        assert len(patches) == 3
        np.testing.assert_array_equal(patches[2].values, self._spec(300).values[:, 172:300])

    def test_cyclic_tiling_short_input(self):
        spec = self._spec(50)
        patches = dsp.patchify(spec, 128)
        assert len(patches) == 1
        assert patches[0].values.shape == (64, 128)
        np.testing.assert_array_equal(patches[0].values[:, :50], spec.values)
        np.testing.assert_array_equal(patches[0].values[:, 50:100], spec.values)
        np.testing.assert_array_equal(patches[0].values[:, 100:128], spec.values[:, :28])

    def test_every_frame_covered_and_width_exact(self, rng):
        for _ in range(25):
            t = int(rng.integers(1, 400))
            width = int(rng.choice([32, 64, 96, 128, 160]))
            patches = dsp.patchify(self._spec(t), width)
            assert all(p.values.shape == (64, width) for p in patches)
            if t >= width:
                covered = np.zeros(t, dtype=bool)
                starts = list(range(0, t - width + 1, width))
                if t % width:
                    starts.append(t - width)
                for s in starts:
                    covered[s : s + width] = True
                assert covered.all()


class TestFeatureCache:
    def test_roundtrip(self, tmp_path, rng):
        values = rng.standard_normal((64, 37))
        path = tmp_path / "x.gspc"
        dsp.write_feature(path, values)
        loaded = dsp.read_feature(path)
        assert loaded.shape == (64, 37)
        np.testing.assert_allclose(loaded, values, atol=1e-6)  # f32 storage

    def test_header_layout(self, tmp_path):
        path = tmp_path / "h.gspc"
        dsp.write_feature(path, np.zeros((2, 3)))
        blob = path.read_bytes()
        assert blob[:4] == b"GSPC"
        assert int.from_bytes(blob[4:6], "little") == 1
        assert int.from_bytes(blob[6:10], "little") == 2
        assert int.from_bytes(blob[10:14], "little") == 3
        assert len(blob) == 14 + 2 * 3 * 4

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "bad.gspc"
        path.write_bytes(b"XXXX" + b"\x00" * 20)
        with pytest.raises(FormatError):
            dsp.read_feature(path)

    def test_index_roundtrip(self, tmp_path):
        rows = [("e1", "/tmp/e1.gspc", 64, 10, 0), ("e2", "/tmp/e2.gspc", 64, 20, 3)]
        path = tmp_path / "index.csv"
        dsp.write_feature_index(path, rows)
        assert dsp.read_feature_index(path) == rows
