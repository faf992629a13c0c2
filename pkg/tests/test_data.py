import numpy as np
import pytest

from cofkey.data import (
    MODE_MAJOR,
    MODE_MINOR,
    DataError,
    DatasetManifest,
    KeyLabel,
    ManifestEntry,
    SynthSpec,
    load_manifest,
    make_calibration_clip,
    save_manifest,
    signature_tonic,
    subsample_labels,
    synthesize_corpus,
)


# ---------------------------------------------------------------------------
# key grammar


ALL_KEY_STRINGS = [
    ("C:maj", 0, MODE_MAJOR), ("C#:maj", 1, MODE_MAJOR), ("Db:maj", 1, MODE_MAJOR),
    ("D:maj", 2, MODE_MAJOR), ("Eb:maj", 3, MODE_MAJOR), ("E:maj", 4, MODE_MAJOR),
    ("F:maj", 5, MODE_MAJOR), ("F#:maj", 6, MODE_MAJOR), ("G:maj", 7, MODE_MAJOR),
    ("Ab:maj", 8, MODE_MAJOR), ("A:maj", 9, MODE_MAJOR), ("Bb:maj", 10, MODE_MAJOR),
    ("B:maj", 11, MODE_MAJOR), ("Cb:maj", 11, MODE_MAJOR),
    ("A:min", 9, MODE_MINOR), ("B#:min", 0, MODE_MINOR), ("Eb:min", 3, MODE_MINOR),
    ("G#:min", 8, MODE_MINOR),
]


@pytest.mark.parametrize("text,chroma,mode", ALL_KEY_STRINGS)
def test_key_parse(text, chroma, mode):
    k = KeyLabel.from_string(text)
    assert k.tonic_chroma == chroma and k.mode == mode


def test_key_round_trip_all_24():
    for mode in (MODE_MAJOR, MODE_MINOR):
        for t in range(12):
            k = KeyLabel(t, mode)
            assert KeyLabel.from_string(str(k)) == k


@pytest.mark.parametrize("bad", ["", "C", "c:maj", "H:maj", "C:major", "C:Maj",
                                 "C#b:maj", "C :maj", "maj", "C-maj"])
def test_key_parse_rejects(bad):
    with pytest.raises(DataError):
        KeyLabel.from_string(bad)


def test_key_label_validates_fields():
    with pytest.raises(DataError):
        KeyLabel(12, MODE_MAJOR)
    with pytest.raises(DataError):
        KeyLabel(-1, MODE_MAJOR)
    with pytest.raises(DataError):
        KeyLabel(0, "ionian")


def test_key_signature_values():
    assert KeyLabel.from_string("C:maj").key_signature_chroma == 0
    assert KeyLabel.from_string("A:min").key_signature_chroma == 0
    assert KeyLabel.from_string("G:maj").key_signature_chroma == 7
    assert KeyLabel.from_string("E:min").key_signature_chroma == 7
    assert KeyLabel.from_string("F:maj").key_signature_chroma == 5
    assert KeyLabel.from_string("D:min").key_signature_chroma == 5


def test_relative_is_involution_and_preserves_signature():
    for mode in (MODE_MAJOR, MODE_MINOR):
        for t in range(12):
            k = KeyLabel(t, mode)
            r = k.relative
            assert r.mode != k.mode
            assert r.key_signature_chroma == k.key_signature_chroma
            assert r.relative == k


def test_parallel_is_involution_and_preserves_tonic():
    for mode in (MODE_MAJOR, MODE_MINOR):
        for t in range(12):
            k = KeyLabel(t, mode)
            p = k.parallel
            assert p.tonic_chroma == k.tonic_chroma
            assert p.mode != k.mode
            assert p.parallel == k


def test_signature_tonic_inverts_signature():
    for mode in (MODE_MAJOR, MODE_MINOR):
        for t in range(12):
            k = KeyLabel(t, mode)
            assert signature_tonic(k.key_signature_chroma, mode) == t


# ---------------------------------------------------------------------------
# manifests


def entry(path, key=None, split="train"):
    label = KeyLabel.from_string(key) if key else None
    return ManifestEntry(path=path, label=label, split=split)


def test_manifest_round_trip(tmp_path):
    m = DatasetManifest("demo", "3", [
        entry("a/x.wav", "C:maj"),
        entry("a/y.flac", "F#:min", "test"),
        entry("a/z.wav"),  # unlabeled
    ])
    p = tmp_path / "manifest.csv"
    save_manifest(m, p)
    got = load_manifest(p)
    assert got.name == "demo" and got.version == "3"
    assert got.entries == m.entries
    assert len(got.labeled) == 2


def test_manifest_duplicate_paths_rejected():
    with pytest.raises(DataError, match="duplicate"):
        DatasetManifest("d", "1", [entry("a.wav"), entry("a.wav")])


def test_manifest_bad_header(tmp_path):
    p = tmp_path / "m.csv"
    p.write_text("file,tonality,fold\na.wav,C:maj,train\n")
    with pytest.raises(DataError, match="header"):
        load_manifest(p)


def test_manifest_bad_row_width(tmp_path):
    p = tmp_path / "m.csv"
    p.write_text("path,key,split\na.wav,C:maj\n")
    with pytest.raises(DataError, match="expected 3 fields"):
        load_manifest(p)


def test_manifest_bad_key_reports_row(tmp_path):
    p = tmp_path / "m.csv"
    p.write_text("path,key,split\na.wav,C:dorian,train\n")
    with pytest.raises(DataError, match="row 2"):
        load_manifest(p)


def test_manifest_missing_file(tmp_path):
    with pytest.raises(DataError, match="not found"):
        load_manifest(tmp_path / "none.csv")


def test_manifest_skips_blank_lines_and_default_split(tmp_path):
    p = tmp_path / "m.csv"
    p.write_text("path,key,split\n\na.wav,,\n")
    got = load_manifest(p)
    assert len(got) == 1
    assert got.entries[0].split == "train"
    assert got.entries[0].label is None


# ---------------------------------------------------------------------------
# label subsampling


def make_labeled_manifest(n):
    return DatasetManifest("d", "1", [entry(f"t{i}.wav", "C:maj") for i in range(n)])


def test_subsample_sizes_round_half_up():
    m = make_labeled_manifest(1159)
    assert len(subsample_labels(m, 0.1, 0).labeled) == 116
    assert len(subsample_labels(m, 0.01, 0).labeled) == 12


def test_subsample_full_fraction_is_identity():
    m = make_labeled_manifest(10)
    got = subsample_labels(m, 1.0, 3)
    assert got.entries == m.entries


def test_subsample_keeps_unlabeled_rows():
    entries = [entry(f"l{i}.wav", "C:maj") for i in range(10)]
    entries += [entry(f"u{i}.wav") for i in range(5)]
    m = DatasetManifest("d", "1", entries)
    got = subsample_labels(m, 0.5, 7)
    assert len(got.labeled) == 5
    assert sum(1 for e in got.entries if e.label is None) == 5


def test_subsample_deterministic_per_seed():
    m = make_labeled_manifest(50)
    a = subsample_labels(m, 0.2, 11)
    b = subsample_labels(m, 0.2, 11)
    c = subsample_labels(m, 0.2, 12)
    assert a.entries == b.entries
    assert a.entries != c.entries


def test_subsample_rejects_bad_fraction():
    m = make_labeled_manifest(10)
    for f in (0.0, -0.1, 1.5):
        with pytest.raises(DataError):
            subsample_labels(m, f, 0)
    with pytest.raises(DataError, match="empty"):
        subsample_labels(m, 0.001, 0)


# ---------------------------------------------------------------------------
# synthesis


def test_synth_spec_validation():
    with pytest.raises(DataError):
        SynthSpec(n_tracks=0)
    with pytest.raises(DataError):
        SynthSpec(duration=-1)


def test_synthesize_corpus_layout_and_determinism(tmp_path):
    spec = SynthSpec(n_tracks=4, duration=2.5, seed=42)
    m1 = synthesize_corpus(spec, tmp_path / "c1")
    m2 = synthesize_corpus(spec, tmp_path / "c2")
    assert len(m1) == 4
    assert all((tmp_path / "c1" / e.path).exists() for e in m1.entries)
    assert (tmp_path / "c1" / "manifest.csv").exists()
    # bitwise identical audio for identical specs
    for e1, e2 in zip(m1.entries, m2.entries):
        assert e1.label == e2.label
        b1 = (tmp_path / "c1" / e1.path).read_bytes()
        b2 = (tmp_path / "c2" / e2.path).read_bytes()
        assert b1 == b2


def test_synthesize_corpus_seed_changes_audio(tmp_path):
    m1 = synthesize_corpus(SynthSpec(n_tracks=2, duration=2.0, seed=1), tmp_path / "a")
    m2 = synthesize_corpus(SynthSpec(n_tracks=2, duration=2.0, seed=2), tmp_path / "b")
    diff = any((tmp_path / "a" / e1.path).read_bytes()
               != (tmp_path / "b" / e2.path).read_bytes()
               for e1, e2 in zip(m1.entries, m2.entries))
    assert diff


def test_synthesized_duration_and_loudness(tmp_path):
    spec = SynthSpec(n_tracks=1, duration=3.0, seed=5)
    m = synthesize_corpus(spec, tmp_path)
    from cofkey.audio_io import load_audio
    y, sr = load_audio(tmp_path / m.entries[0].path)
    assert sr == spec.sample_rate
    assert len(y) == pytest.approx(3.0 * sr, abs=sr * 0.25)
    assert 0.5 < np.abs(y).max() <= 1.0


def test_calibration_clip_deterministic():
    a = make_calibration_clip()
    b = make_calibration_clip()
    assert np.array_equal(a.samples, b.samples)
    assert a.sample_rate == 22050
    assert a.duration > 3.0
