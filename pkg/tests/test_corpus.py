import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from recpool.corpus import (BatchConfig, Corpus, CorpusConfig, RenderParams, generate_speaker_set,
                            hz_to_mel, load_corpus, logmel_frontend, mel_filterbank, mix,
                            mix_waveforms, mixing_gain, power_ratio_db, read_frames, read_wav,
                            render_utterance, sample_batch, save_corpus, write_frames, write_wav)

QUIET = RenderParams(modulation_scale=0.0, envelope_depth=0.0, noise_std=0.0)


def test_speaker_set_is_deterministic():
    a = generate_speaker_set(2, 8, seed=0)
    b = generate_speaker_set(2, 8, seed=0)
    for x, y in zip(a, b):
        assert x.template.tobytes() == y.template.tobytes()
        assert x.modulation.tobytes() == y.modulation.tobytes()


def test_speaker_templates_are_distinct_and_separated():
    spk = generate_speaker_set(40, 40, seed=1, min_distance=4.0)
    T = np.stack([s.template for s in spk])
    d = np.linalg.norm(T[:, None] - T[None], axis=-1)[np.triu_indices(40, 1)]
    assert d.min() > 4.0
    assert [s.id for s in spk] == list(range(40))


def test_template_mean_matches_prior_over_seeds():
    S, F, mean, std = 40, 40, 0.7, 1.3
    for seed in range(5):
        T = np.stack([s.template for s in generate_speaker_set(S, F, seed, prior_mean=mean,
                                                               prior_std=std, min_distance=0)])
        # per-bin mean over speakers stays within 3 sigma / sqrt(S) of the prior mean
        assert np.mean(np.abs(T.mean(axis=0) - mean) < 3 * std / np.sqrt(S)) > 0.95


@pytest.mark.parametrize("S,F", [(1, 8), (4, 3)])
def test_speaker_set_range_errors(S, F):
    with pytest.raises(ValueError):
        generate_speaker_set(S, F, 0)


def test_render_without_variation_is_template():
    spk = generate_speaker_set(2, 8, 0)[0]
    out = render_utterance(spk, 25, seed=3, params=QUIET)
    np.testing.assert_array_equal(out, np.repeat(spk.template[:, None], 25, axis=1))


def test_render_repeat_is_bit_identical():
    spk = generate_speaker_set(2, 8, 0)[1]
    assert render_utterance(spk, 50, 7).tobytes() == render_utterance(spk, 50, 7).tobytes()
    assert render_utterance(spk, 50, 7).tobytes() != render_utterance(spk, 50, 8).tobytes()


def test_long_time_average_approaches_template():
    spk = generate_speaker_set(2, 16, 0)[0]
    out = render_utterance(spk, 10000, 0)
    assert np.all(np.isfinite(out))
    np.testing.assert_allclose(out.mean(axis=1), spk.template, atol=0.15)


def test_render_rejects_empty():
    with pytest.raises(ValueError):
        render_utterance(generate_speaker_set(2, 8, 0)[0], 0, 0)


def test_mix_infinite_sir_returns_first_stream():
    rng = np.random.default_rng(0)
    f1, f2 = rng.standard_normal((2, 4, 6))
    np.testing.assert_array_equal(mix(f1, f2, np.inf), f1)


def test_mix_equal_streams_at_zero_db_adds_log2():
    f = np.random.default_rng(1).standard_normal((5, 7))
    np.testing.assert_allclose(mix(f, f, 0.0), f + np.log(2.0), atol=1e-14)


@pytest.mark.parametrize("sir", [-5.0, 0.0, 3.3])
def test_mix_gain_realizes_requested_sir(sir):
    rng = np.random.default_rng(2)
    f1, f2 = rng.standard_normal((2, 40, 150))
    g = mixing_gain(f1, f2, sir)
    assert abs(power_ratio_db(f1, f2, g) - sir) < 1e-9


def test_mix_shape_mismatch():
    with pytest.raises(ValueError):
        mix(np.zeros((2, 3)), np.zeros((3, 2)), 0.0)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31), st.floats(-20, 20))
def test_mix_swapped_streams_differ_only_by_log_gain(seed, sir):
    rng = np.random.default_rng(seed)
    f1, f2 = rng.standard_normal((2, 6, 9))
    g = mixing_gain(f1, f2, sir)
    np.testing.assert_allclose(mix(f2, f1, -sir) + np.log(g), mix(f1, f2, sir), atol=1e-12)


def test_batch_composition_and_labels():
    c = Corpus(CorpusConfig(n_train=6, n_heldout=2, feat_dim=8))
    batch = sample_batch(c, BatchConfig(singles=4, mixtures=2, frames=20), seed=5)
    assert len(batch) == 6
    assert sum(len(s.speakers) == 2 for s in batch) == 2
    for s in batch:
        assert s.features.shape == (8, 20) and np.all(np.isfinite(s.features))
        assert len(set(s.speakers)) == len(s.speakers)
        assert set(s.speakers) <= set(c.train_ids)
        if len(s.speakers) == 2:
            assert -5 <= s.spec.sir_db <= 5


def test_batch_full_recipe_ratio():
    c = Corpus(CorpusConfig(n_train=6, n_heldout=2, feat_dim=8))
    batch = sample_batch(c, BatchConfig(singles=256, mixtures=128, frames=2), seed=0)
    assert sum(len(s.speakers) == 1 for s in batch) == 256
    assert sum(len(s.speakers) == 2 for s in batch) == 128


def test_batch_is_deterministic():
    c = Corpus(CorpusConfig(n_train=6, n_heldout=2, feat_dim=8))
    a = sample_batch(c, BatchConfig(2, 2, 10), seed=[3, 4])
    b = sample_batch(c, BatchConfig(2, 2, 10), seed=[3, 4])
    assert all(x.features.tobytes() == y.features.tobytes() for x, y in zip(a, b))


def test_mixtures_need_two_speakers():
    c = Corpus(CorpusConfig(n_train=6, n_heldout=2, feat_dim=8))
    with pytest.raises(ValueError):
        sample_batch(c, BatchConfig(1, 1, 10), seed=0, speaker_pool=[0])


def test_sir_draws_are_uniform():
    from recpool.corpus import draw_sir
    x = draw_sir(np.random.default_rng(0), (-5, 5), size=100_000)
    counts, _ = np.histogram(x, bins=20, range=(-5, 5))
    assert stats.chisquare(counts).pvalue > 1e-3
    assert x.min() >= -5 and x.max() <= 5


def test_frame_file_roundtrip_and_header(tmp_path):
    data = np.random.default_rng(0).standard_normal((40, 13))
    write_frames(tmp_path / "a.rpfm", data)
    raw = (tmp_path / "a.rpfm").read_bytes()
    assert raw[:4] == b"RPFM" and len(raw) == 16 + 8 * data.size
    np.testing.assert_array_equal(read_frames(tmp_path / "a.rpfm"), data)


def test_frame_file_rejects_bad_magic(tmp_path):
    (tmp_path / "bad").write_bytes(b"XXXX" + bytes(12))
    with pytest.raises(ValueError):
        read_frames(tmp_path / "bad")


def test_corpus_directory_roundtrip(tmp_path):
    cfg = CorpusConfig(n_train=3, n_heldout=1, feat_dim=6, seed=9)
    corpus = Corpus(cfg)
    save_corpus(tmp_path / "c", corpus, utts_per_speaker=2, frames=12)
    meta = json.loads((tmp_path / "c" / "meta.json").read_text())
    assert meta["S"] == 4 and meta["F"] == 6
    assert len(list((tmp_path / "c").glob("*.rpfm"))) == 8
    again, utts = load_corpus(tmp_path / "c")
    for a, b in zip(corpus.speakers, again.speakers):
        np.testing.assert_array_equal(a.template, b.template)
    first = read_frames(utts[0]["path"])
    np.testing.assert_array_equal(first, corpus.utterance(utts[0]["speaker"], 12, 0))


def test_save_corpus_refuses_non_empty_dir(tmp_path):
    (tmp_path / "x").write_text("keep")
    with pytest.raises(FileExistsError):
        save_corpus(tmp_path, Corpus(CorpusConfig(n_train=2, n_heldout=0, feat_dim=4)), 1, 2)


def test_frontend_zero_waveform_is_zero_after_mean_norm():
    np.testing.assert_array_equal(logmel_frontend(np.zeros(16000)), np.zeros((80, 98)))


def test_frontend_frame_count():
    assert logmel_frontend(np.random.default_rng(0).standard_normal(16000)).shape == (80, (16000 - 400) // 160 + 1)


def test_frontend_tone_peaks_at_matching_band():
    t = np.arange(16000) / 16000
    feats = logmel_frontend(np.sin(2 * np.pi * 1000 * t), mean_norm=False)
    fb = mel_filterbank()
    freqs = np.linspace(0, 8000, 257)
    expected = int(np.argmax(fb[:, np.argmin(np.abs(freqs - 1000))]))
    peak = int(np.argmax(feats.mean(axis=1)))
    assert abs(peak - expected) <= 1
    centers = 700 * (10 ** (np.linspace(hz_to_mel(20), hz_to_mel(8000), 82)[1:-1] / 2595) - 1)
    assert abs(centers[peak] - 1000) < 100


@pytest.mark.parametrize("pcm,rate", [(np.zeros(100), 16000), (np.zeros(16000), 8000)])
def test_frontend_errors(pcm, rate):
    with pytest.raises(ValueError):
        logmel_frontend(pcm, rate)


def test_wav_roundtrip(tmp_path):
    pcm = 0.5 * np.sin(np.linspace(0, 100, 4000))
    write_wav(tmp_path / "a.wav", pcm)
    back, rate = read_wav(tmp_path / "a.wav")
    assert rate == 16000
    np.testing.assert_allclose(back, pcm, atol=1 / 32768)


def test_waveform_mixing_sets_rms_ratio():
    rng = np.random.default_rng(0)
    w1, w2 = rng.standard_normal(8000), 3 * rng.standard_normal(8000)
    out = mix_waveforms(w1, w2, -5.0)
    inter = out - w1
    ratio = 20 * np.log10(np.sqrt(np.mean(w1**2)) / np.sqrt(np.mean(inter**2)))
    assert ratio == pytest.approx(-5.0, abs=1e-9)
