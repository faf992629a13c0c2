"""Key labels, dataset manifests, and the synthetic corpus generator.

Labels use the grammar `<A-G>[#|b]:<maj|min>` (e.g. "F#:min"). The key
*signature* chroma is shared by relative keys: it equals the tonic for major
and tonic+3 (mod 12) for minor, so C:maj and A:min both map to 0.

Manifests are CSV files with header `path,key,split`; the key field is empty
for unlabeled rows. Optional `# name=...` / `# version=...` comment lines
carry metadata.

The generator renders single-key tracks by additive synthesis: a few diatonic
chord progressions (block or arpeggiated), six harmonics per note with mild
detuning, a -40 dB noise floor, deterministic per (seed, track index).
"""

from __future__ import annotations

import csv
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .audio_io import save_wav
from .frontend import AudioClip

MODE_MAJOR = "major"
MODE_MINOR = "minor"
MODES = (MODE_MAJOR, MODE_MINOR)
MODE_INDEX = {MODE_MAJOR: 0, MODE_MINOR: 1}

_NOTE_CHROMA = {"C": 0, "D": 2, "E": 4, "F": 5, "G": 7, "A": 9, "B": 11}
_SHARP_NAMES = ("C", "C#", "D", "D#", "E", "F", "F#", "G", "G#", "A", "A#", "B")
_KEY_RE = re.compile(r"^([A-G])([#b]?):(maj|min)$")


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class KeyLabel:
    tonic_chroma: int
    mode: str

    def __post_init__(self):
        if not (0 <= self.tonic_chroma < 12):
            raise DataError(f"tonic chroma {self.tonic_chroma} out of range")
        if self.mode not in MODES:
            raise DataError(f"unknown mode {self.mode!r}")

    @property
    def key_signature_chroma(self) -> int:
        if self.mode == MODE_MAJOR:
            return self.tonic_chroma
        return (self.tonic_chroma + 3) % 12

    @property
    def mode_index(self) -> int:
        return MODE_INDEX[self.mode]

    @property
    def relative(self) -> "KeyLabel":
        """The relative key (same signature, other mode)."""
        if self.mode == MODE_MAJOR:
            return KeyLabel((self.tonic_chroma + 9) % 12, MODE_MINOR)
        return KeyLabel((self.tonic_chroma + 3) % 12, MODE_MAJOR)

    @property
    def parallel(self) -> "KeyLabel":
        other = MODE_MINOR if self.mode == MODE_MAJOR else MODE_MAJOR
        return KeyLabel(self.tonic_chroma, other)

    @classmethod
    def from_string(cls, text: str) -> "KeyLabel":
        m = _KEY_RE.match(text.strip())
        if not m:
            raise DataError(f"unknown key string {text!r}")
        note, accidental, mode = m.groups()
        chroma = _NOTE_CHROMA[note]
        if accidental == "#":
            chroma = (chroma + 1) % 12
        elif accidental == "b":
            chroma = (chroma - 1) % 12
        return cls(chroma, MODE_MAJOR if mode == "maj" else MODE_MINOR)

    def __str__(self) -> str:
        return f"{_SHARP_NAMES[self.tonic_chroma]}:{'maj' if self.mode == MODE_MAJOR else 'min'}"


def signature_tonic(key_signature_chroma: int, mode: str) -> int:
    """Tonic chroma of the key with a given signature and mode."""
    if mode == MODE_MAJOR:
        return key_signature_chroma % 12
    return (key_signature_chroma + 9) % 12


@dataclass(frozen=True)
class ManifestEntry:
    path: str
    label: KeyLabel | None = None
    split: str = "train"


@dataclass
class DatasetManifest:
    name: str
    version: str
    entries: list[ManifestEntry] = field(default_factory=list)

    def __post_init__(self):
        paths = [e.path for e in self.entries]
        if len(set(paths)) != len(paths):
            dupes = sorted({p for p in paths if paths.count(p) > 1})
            raise DataError(f"duplicate manifest paths: {dupes[:3]}")

    @property
    def labeled(self) -> list[ManifestEntry]:
        return [e for e in self.entries if e.label is not None]

    def __len__(self) -> int:
        return len(self.entries)


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    if not path.exists():
        raise DataError(f"manifest not found: {path}")
    name, version = path.stem, "1"
    rows = []
    with open(path, newline="") as fh:
        raw_lines = []
        for line in fh:
            if line.startswith("#"):
                m = re.match(r"#\s*(name|version)\s*=\s*(.+)", line.strip())
                if m:
                    if m.group(1) == "name":
                        name = m.group(2).strip()
                    else:
                        version = m.group(2).strip()
                continue
            raw_lines.append(line)
    reader = csv.reader(raw_lines)
    header = next(reader, None)
    if header is None or [h.strip() for h in header] != ["path", "key", "split"]:
        raise DataError(f"bad manifest header in {path}: expected 'path,key,split'")
    for i, row in enumerate(reader, start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != 3:
            raise DataError(f"row {i}: expected 3 fields, got {len(row)}")
        p, key, split = (c.strip() for c in row)
        label = None
        if key:
            try:
                label = KeyLabel.from_string(key)
            except DataError as exc:
                raise DataError(f"row {i}: {exc}") from exc
        rows.append(ManifestEntry(path=p, label=label, split=split or "train"))
    return DatasetManifest(name=name, version=version, entries=rows)


def save_manifest(manifest: DatasetManifest, path) -> None:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        fh.write(f"# name={manifest.name}\n# version={manifest.version}\n")
        writer = csv.writer(fh)
        writer.writerow(["path", "key", "split"])
        for e in manifest.entries:
            writer.writerow([e.path, str(e.label) if e.label else "", e.split])


def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def subsample_labels(manifest: DatasetManifest, fraction: float, seed: int) -> DatasetManifest:
    """Keep a uniformly random subset of the labeled entries (unlabeled rows pass
    through unchanged). The subset size is round-half-up(n_labeled * fraction)."""
    if not (0.0 < fraction <= 1.0):
        raise DataError(f"label fraction {fraction} outside (0, 1]")
    labeled_idx = [i for i, e in enumerate(manifest.entries) if e.label is not None]
    n_keep = _round_half_up(len(labeled_idx) * fraction)
    if n_keep == 0:
        raise DataError("label subsample is empty: fraction too small for this manifest")
    if n_keep >= len(labeled_idx):
        return DatasetManifest(manifest.name, manifest.version, list(manifest.entries))
    rng = np.random.default_rng(seed)
    keep = set(rng.choice(np.asarray(labeled_idx), size=n_keep, replace=False).tolist())
    entries = [e for i, e in enumerate(manifest.entries)
               if e.label is None or i in keep]
    return DatasetManifest(manifest.name, manifest.version, entries)


# ---------------------------------------------------------------------------
# synthesis

@dataclass(frozen=True)
class SynthSpec:
    n_tracks: int = 240
    duration: float = 10.0
    sample_rate: int = 22050
    seed: int = 0
    split: str = "train"
    name: str = "synth"
    tempo_range: tuple[float, float] = (70.0, 140.0)
    n_partials: int = 6
    detune_cents: float = 3.0
    noise_floor_db: float = -40.0

    def __post_init__(self):
        if self.n_tracks <= 0:
            raise DataError("n_tracks must be positive")
        if self.duration <= 0:
            raise DataError("duration must be positive")


# scale-degree triads as offsets from the tonic chroma; the optional fourth
# member is the seventh, mixed in sometimes for a less pad-like texture
_MAJOR_CHORDS = {
    "I": (0, 4, 7, 11), "ii": (2, 5, 9, 0), "iii": (4, 7, 11, 2),
    "IV": (5, 9, 0, 4), "V": (7, 11, 2, 5), "vi": (9, 0, 4, 7),
}
_MINOR_CHORDS = {
    "i": (0, 3, 7, 10), "iv": (5, 8, 0, 3), "v": (7, 10, 2, 5),
    "V": (7, 11, 2, 5), "VI": (8, 0, 3, 7), "III": (3, 7, 10, 2),
    "VII": (10, 2, 5, 8), "ii0": (2, 5, 8, 0),
}
_MAJOR_PROGRESSIONS = (
    ("I", "IV", "V", "I"),
    ("I", "vi", "IV", "V"),
    ("I", "V", "vi", "IV"),
    ("vi", "ii", "V", "I"),
    ("I", "iii", "IV", "V"),
    ("IV", "V", "iii", "vi"),
)
_MINOR_PROGRESSIONS = (
    ("i", "iv", "V", "i"),
    ("i", "VI", "III", "VII"),
    ("i", "iv", "V", "VI"),
    ("i", "VII", "VI", "V"),
    ("i", "v", "iv", "i"),
    ("ii0", "V", "i", "VI"),
)

# natural scales as chroma offsets from the tonic (melody material; minor
# borrows the raised leading tone when the harmony plays V)
_SCALE_MAJOR = (0, 2, 4, 5, 7, 9, 11)
_SCALE_MINOR = (0, 2, 3, 5, 7, 8, 10)


def _midi_freq(midi: float) -> float:
    return 440.0 * 2.0 ** ((midi - 69.0) / 12.0)


def _note(f0: float, n_samples: int, sr: int, rng: np.random.Generator,
          n_partials: int, detune_cents: float) -> np.ndarray:
    t = np.arange(n_samples) / sr
    out = np.zeros(n_samples)
    for h in range(1, n_partials + 1):
        f = f0 * h
        if f >= 0.45 * sr:
            break
        detune = 2.0 ** (rng.uniform(-detune_cents, detune_cents) / 1200.0)
        phase = rng.uniform(0, 2 * np.pi)
        out += (h ** -1.2) * np.sin(2 * np.pi * f * detune * t + phase)
    # 10 ms attack, exponential decay toward a sustained tail
    env = np.minimum(t / 0.010, 1.0) * (0.35 + 0.65 * np.exp(-t * 2.5))
    return out * env


def _voice_chord(tonic: int, offsets: tuple[int, ...], register: int,
                 rng: np.random.Generator) -> list[float]:
    """Midi numbers for one chord voicing around the given register octave."""
    triad = offsets[:3]
    if rng.random() < 0.35:  # mix in the seventh sometimes
        triad = offsets[:4]
    base = 12 * (register + 1)
    inversion = int(rng.integers(0, 3))
    notes = []
    for j, off in enumerate(triad):
        chroma = (tonic + off) % 12
        octave_lift = 12 * ((j + inversion) // 3)
        notes.append(base + chroma + octave_lift)
    if rng.random() < 0.3:  # double a random chord member an octave up
        member = offsets[int(rng.integers(0, 3))]
        notes.append(base + (tonic + member) % 12 + 12)
    if rng.random() < 0.35:  # bass note an octave down
        notes.append(base + (tonic + offsets[0]) % 12 - 12)
    return [float(n) for n in notes]


def _melody_events(label: KeyLabel, degree: str, chord_offsets: tuple[int, ...],
                   state: dict, n_events: int, rng: np.random.Generator) -> list[float]:
    """A few scale steps of melody over one chord; returns midi numbers.

    A random walk over two octaves of the scale, nudged toward a chord tone on
    the first event of each chord. Minor melodies raise the leading tone while
    the harmony plays the major dominant.
    """
    scale = list(_SCALE_MAJOR if label.mode == MODE_MAJOR else _SCALE_MINOR)
    if label.mode == MODE_MINOR and degree == "V":
        scale[6] = 11
    if "pos" not in state:
        state["pos"] = int(rng.integers(0, 14))
        # each track's melody orbits its own scale degree, like a motif
        state["center"] = int(rng.integers(0, 14))
    chord_chromas = {(label.tonic_chroma + o) % 12 for o in chord_offsets[:3]}
    events = []
    for j in range(n_events):
        if j == 0 and rng.random() < 0.3:
            # snap to the nearest walk position whose chroma is a chord tone
            candidates = [p for p in range(14)
                          if (label.tonic_chroma + scale[p % 7]) % 12 in chord_chromas]
            state["pos"] = min(candidates, key=lambda p: abs(p - state["pos"]))
        elif rng.random() < 0.45 and state["pos"] != state["center"]:
            # drift back toward the motif center
            direction = 1 if state["center"] > state["pos"] else -1
            state["pos"] += direction * int(rng.integers(1, 3))
            state["pos"] = min(13, max(0, state["pos"]))
        else:
            step = int(rng.choice((-2, -1, -1, 1, 1, 2)))
            state["pos"] = min(13, max(0, state["pos"] + step))
        octave, deg = divmod(state["pos"], 7)
        midi = 12 * 6 + 12 * octave + (label.tonic_chroma + scale[deg]) % 12
        events.append(float(midi))
    return events


def render_track(label: KeyLabel, spec: SynthSpec, rng: np.random.Generator) -> np.ndarray:
    """Additive-synthesis rendering of a single-key progression with melody.

    Harmony: a diatonic four-chord loop entered at a random rotation, varied
    voicings, occasional sevenths. Melody: a scale random walk on top. The mix
    keeps the key unambiguous while no single pitch class trivially dominates.
    """
    sr = spec.sample_rate
    n_total = int(round(spec.duration * sr))
    tempo = rng.uniform(*spec.tempo_range)
    chord_samples = int(round(2 * 60.0 / tempo * sr))  # two beats per chord
    chords = _MAJOR_CHORDS if label.mode == MODE_MAJOR else _MINOR_CHORDS
    progressions = _MAJOR_PROGRESSIONS if label.mode == MODE_MAJOR else _MINOR_PROGRESSIONS
    progression = progressions[int(rng.integers(0, len(progressions)))]
    register = 3 + int(rng.integers(0, 2))  # octave 3 or 4
    melody_gain = rng.uniform(1.8, 2.8)
    melody_state: dict = {}

    out = np.zeros(n_total + chord_samples)
    pos = 0
    step = int(rng.integers(0, len(progression)))  # rotate the loop entry point
    while pos < n_total:
        degree = progression[step % len(progression)]
        midis = _voice_chord(label.tonic_chroma, chords[degree], register, rng)
        arpeggiate = rng.random() < 0.4
        if arpeggiate:
            n_sub = len(midis)
            sub = max(1, chord_samples // n_sub)
            for j, m in enumerate(midis):
                start = pos + j * sub
                dur = min(chord_samples - j * sub, n_total + chord_samples - start)
                if dur > 0:
                    out[start:start + dur] += _note(_midi_freq(m), dur, sr, rng,
                                                    spec.n_partials, spec.detune_cents)
        else:
            dur = min(chord_samples, n_total + chord_samples - pos)
            for m in midis:
                out[pos:pos + dur] += _note(_midi_freq(m), dur, sr, rng,
                                            spec.n_partials, spec.detune_cents)
        n_events = int(rng.choice((2, 4, 4, 8)))
        sub = max(1, chord_samples // n_events)
        for j, m in enumerate(_melody_events(label, degree, chords[degree],
                                             melody_state, n_events, rng)):
            start = pos + j * sub
            dur = min(sub, n_total + chord_samples - start)
            if dur > 0:
                out[start:start + dur] += melody_gain * _note(
                    _midi_freq(m), dur, sr, rng, spec.n_partials, spec.detune_cents)
        pos += chord_samples
        step += 1

    out = out[:n_total]
    peak = np.abs(out).max()
    if peak > 0:
        out = out / peak * 0.85
    noise = rng.standard_normal(n_total) * 10.0 ** (spec.noise_floor_db / 20.0)
    return out + noise


def _all_keys() -> list[KeyLabel]:
    return [KeyLabel(t, m) for m in MODES for t in range(12)]


def synthesize_corpus(spec: SynthSpec, out_dir) -> DatasetManifest:
    """Render spec.n_tracks single-key WAV files plus a manifest CSV.

    Deterministic: per-track RNG streams are spawned from spec.seed, so the
    same spec always produces bitwise-identical audio and labels.
    """
    out_dir = Path(out_dir)
    audio_dir = out_dir / "audio"
    audio_dir.mkdir(parents=True, exist_ok=True)
    keys = _all_keys()
    seeds = np.random.SeedSequence(spec.seed).spawn(spec.n_tracks)
    entries = []
    for i in range(spec.n_tracks):
        rng = np.random.default_rng(seeds[i])
        label = keys[int(rng.integers(0, len(keys)))]
        samples = render_track(label, spec, rng)
        rel = f"audio/track_{i:05d}.wav"
        save_wav(out_dir / rel, samples, spec.sample_rate)
        entries.append(ManifestEntry(path=rel, label=label, split=spec.split))
    manifest = DatasetManifest(name=spec.name, version="1", entries=entries)
    save_manifest(manifest, out_dir / "manifest.csv")
    return manifest


def make_calibration_clip(sample_rate: int = 22050) -> AudioClip:
    """Deterministic C-major reference: one octave of scale plus tonic chords.

    Used to fix the global chroma offset of a trained model; argmax of the
    model's profile on this clip defines the calibration shift.
    """
    rng = np.random.default_rng(np.random.SeedSequence(20240214))
    sr = sample_rate
    spec = SynthSpec(sample_rate=sr)
    scale = [60, 62, 64, 65, 67, 69, 71, 72]  # C4..C5
    note_len = int(0.4 * sr)
    parts = []
    for m in scale:
        parts.append(_note(_midi_freq(m), note_len, sr, rng, 6, 2.0))
    for _ in range(3):
        chord = np.zeros(int(1.0 * sr))
        for m in (48, 52, 55, 60, 64, 67):  # C3 and C4 triads
            chord += _note(_midi_freq(m), len(chord), sr, rng, 6, 2.0)
        parts.append(chord)
    out = np.concatenate(parts)
    out = out / np.abs(out).max() * 0.85
    out += rng.standard_normal(len(out)) * 10.0 ** (spec.noise_floor_db / 20.0)
    return AudioClip(out, sr)
