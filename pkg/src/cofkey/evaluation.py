"""Calibration, key decoding, scoring, confusion matrices, and baselines.

A self-supervised model lands on an arbitrary rotation of the pitch-class
circle and an arbitrary mode-channel order. Calibration plays one clip in a
known key and records the rotation (`q_cal`) and whether the two mode columns
are swapped; decoding then realigns every response before reading off keys.

Inference always runs at transposition 0 (the topmost 84-row crop); the
calibration offset absorbs the resulting global rotation together with
whatever rotation training settled into.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass
from importlib import resources
from pathlib import Path

import numpy as np
import torch

from .data import MODE_MAJOR, MODE_MINOR, DataError, KeyLabel, make_calibration_clip
from .frontend import (AudioClip, CqtParams, analysis_windows, compute_cqt,
                       crop_for_transposition)
from .network import ChromaNet

# Signatures ordered by ascending fifths, used for confusion-matrix axes.
COF_SIGNATURES = (0, 7, 2, 9, 4, 11, 6, 1, 8, 3, 10, 5)


class EvaluationError(RuntimeError):
    pass


@dataclass(frozen=True)
class CalibrationState:
    """Learned-rotation corrections: realignment offset and mode-column swap."""

    q_cal: int
    mode_swap: bool

    def __post_init__(self):
        if not (0 <= self.q_cal < 12):
            raise EvaluationError("q_cal must lie in [0, 12)")


def realign(y, q_cal: int):
    """Rotate a pitch-class profile so the learned rotation cancels:
    h(y)[q] = y[(q + q_cal) mod 12]. Applies along the last axis."""
    return np.roll(np.asarray(y), -int(q_cal), axis=-1)


def key_mode_responses(model: ChromaNet, cqts, batch_size: int = 64,
                       segment_frames: int | None = None) -> np.ndarray:
    """Mean [12, 2] response per clip at transposition 0. Returns [N, 12, 2].

    With segment_frames set, each clip is cut into analysis windows of that
    length and the per-window responses are averaged. The network is trained
    on fixed-length segments, so clip-level scores must aggregate window-level
    scores rather than stretch the receptive field over a whole track.
    """
    if model.cfg.out_channels != 2:
        raise EvaluationError("key decoding requires the 24-class model head")
    model.eval()
    pieces: list[tuple[int, np.ndarray]] = []
    for i, c in enumerate(cqts):
        cropped = crop_for_transposition(c, 0)
        if segment_frames is None:
            pieces.append((i, cropped))
        else:
            pieces.extend((i, w) for w in analysis_windows(cropped, segment_frames))
    by_len: dict[int, list[int]] = {}
    for j, (_, w) in enumerate(pieces):
        by_len.setdefault(w.shape[-1], []).append(j)
    sums = np.zeros((len(cqts), 12, 2), dtype=np.float64)
    counts = np.zeros(len(cqts), dtype=np.int64)
    with torch.no_grad():
        for _, idxs in by_len.items():
            for start in range(0, len(idxs), batch_size):
                chunk = idxs[start:start + batch_size]
                x = np.stack([pieces[j][1] for j in chunk])
                y = model.key_mode(torch.from_numpy(x).unsqueeze(1)).numpy()
                for row, j in enumerate(chunk):
                    clip_idx = pieces[j][0]
                    sums[clip_idx] += y[row]
                    counts[clip_idx] += 1
    return (sums / counts[:, None, None]).astype(np.float32)


def calibrate(model: ChromaNet, params: CqtParams, clip: AudioClip | None = None,
              reference: KeyLabel = KeyLabel(0, MODE_MAJOR),
              segment_frames: int | None = None) -> CalibrationState:
    """Estimate the rotation and mode swap from one clip in a known key."""
    if clip is None:
        clip = make_calibration_clip(params.sample_rate)
    cqt = compute_cqt(clip, params)
    ymat = key_mode_responses(model, [cqt], segment_frames=segment_frames)[0]
    lam = ymat.sum(axis=-1)
    if float(lam.max() - np.median(lam)) < 0.05:
        raise EvaluationError(
            "calibration sample not discriminative: the pitch-class response is "
            "too flat to anchor a rotation")
    q_cal = int((int(lam.argmax()) - reference.key_signature_chroma) % 12)
    mu = ymat.sum(axis=0)
    mode_swap = bool(int(mu.argmax()) != reference.mode_index)
    return CalibrationState(q_cal=q_cal, mode_swap=mode_swap)


def decode_key(ymat, cal: CalibrationState) -> KeyLabel:
    """Map one raw [12, 2] response to a key via the calibrated realignment.

    Rows are realigned, columns swapped if calibration says so, then the flat
    row-major argmax picks (signature, mode); ties resolve to the lowest index.
    The tonic is the signature for major and signature+9 (mod 12) for minor.
    """
    y = np.asarray(ymat, dtype=np.float64)
    if y.shape != (12, 2):
        raise EvaluationError(f"expected a [12, 2] response, got {y.shape}")
    y = np.roll(y, -cal.q_cal, axis=0)
    if cal.mode_swap:
        y = y[:, ::-1]
    idx = int(y.reshape(24).argmax())
    sig, mode_idx = divmod(idx, 2)
    if mode_idx == 0:
        return KeyLabel(sig, MODE_MAJOR)
    return KeyLabel((sig + 9) % 12, MODE_MINOR)


def predict_keys(model: ChromaNet, cqts, cal: CalibrationState,
                 segment_frames: int | None = None) -> list[KeyLabel]:
    responses = key_mode_responses(model, cqts, segment_frames=segment_frames)
    return [decode_key(y, cal) for y in responses]


def segment_frames_from_bundle(bundle: dict, params: CqtParams) -> int | None:
    """Analysis-window length (frames) matching the checkpoint's training
    segment length, or None when the bundle does not record one."""
    train_config = bundle.get("train_config")
    if not train_config or "segment_seconds" not in train_config:
        return None
    return max(1, round(float(train_config["segment_seconds"])
                        * params.sample_rate / params.hop))


# --------------------------------------------------------------------------
# Scoring


@dataclass(frozen=True)
class MirexWeights:
    same: float = 1.0
    fifth: float = 0.5
    relative: float = 0.3
    parallel: float = 0.2


@dataclass
class EvalCounts:
    same: int = 0
    fifth: int = 0
    relative: int = 0
    parallel: int = 0
    other: int = 0

    @property
    def total(self) -> int:
        return self.same + self.fifth + self.relative + self.parallel + self.other

    def add(self, category: str) -> None:
        setattr(self, category, getattr(self, category) + 1)


def categorize(reference: KeyLabel, predicted: KeyLabel,
               fifth_both_directions: bool = False) -> str:
    """MIREX error category of one prediction.

    `fifth` means same mode and the predicted tonic a perfect fifth above the
    reference; with fifth_both_directions a fifth below also counts. The five
    categories partition all 24x24 pairs.
    """
    if predicted == reference:
        return "same"
    if predicted.mode == reference.mode:
        up = (predicted.tonic_chroma - reference.tonic_chroma) % 12
        if up == 7 or (fifth_both_directions and up == 5):
            return "fifth"
    if predicted == reference.relative:
        return "relative"
    if predicted == reference.parallel:
        return "parallel"
    return "other"


def mirex_score(counts: EvalCounts, weights: MirexWeights = MirexWeights()) -> float:
    """Weighted accuracy in percent."""
    if counts.total == 0:
        raise EvaluationError("no scored items")
    credit = (weights.same * counts.same + weights.fifth * counts.fifth
              + weights.relative * counts.relative + weights.parallel * counts.parallel)
    return 100.0 * credit / counts.total


def ksea_category(reference_sig: int, predicted_sig: int) -> str:
    """Signature-level category: `same`, `fifth` (either direction), or `other`."""
    if not (0 <= reference_sig < 12 and 0 <= predicted_sig < 12):
        raise EvaluationError("signatures must lie in [0, 12)")
    if predicted_sig == reference_sig:
        return "same"
    if (predicted_sig - reference_sig) % 12 in (5, 7):
        return "fifth"
    return "other"


def ksea_score(correct: int, fifth: int, total: int) -> float:
    """Key-signature accuracy in percent: full credit for exact, half for a
    fifth either way."""
    if total <= 0 or correct + fifth > total:
        raise EvaluationError("inconsistent signature-accuracy counts")
    return 100.0 * (correct + 0.5 * fifth) / total


def ksea_from_labels(references, predictions) -> tuple[int, int, int]:
    """(correct, fifth, total) over parallel lists of KeyLabel."""
    correct = fifth = 0
    refs = list(references)
    preds = list(predictions)
    if len(refs) != len(preds):
        raise EvaluationError("reference/prediction length mismatch")
    for r, p in zip(refs, preds):
        cat = ksea_category(r.key_signature_chroma, p.key_signature_chroma)
        if cat == "same":
            correct += 1
        elif cat == "fifth":
            fifth += 1
    return correct, fifth, len(refs)


# --------------------------------------------------------------------------
# Confusion matrices


def class_labels_24() -> list[KeyLabel]:
    """The 24 keys in circle-of-fifths order, each major followed by its
    relative minor."""
    out = []
    for sig in COF_SIGNATURES:
        out.append(KeyLabel(sig, MODE_MAJOR))
        out.append(KeyLabel((sig + 9) % 12, MODE_MINOR))
    return out


def class_index_24(label: KeyLabel) -> int:
    pos = COF_SIGNATURES.index(label.key_signature_chroma)
    return 2 * pos + label.mode_index


def confusion_matrix(references, predictions) -> np.ndarray:
    """Raw-count [24, 24] matrix, rows = reference keys, in CoF class order."""
    mat = np.zeros((24, 24), dtype=np.int64)
    for r, p in zip(references, predictions):
        mat[class_index_24(r), class_index_24(p)] += 1
    return mat


def save_confusion(mat: np.ndarray, csv_path, png_path) -> None:
    """Write raw counts as CSV and a row-normalized heatmap as PNG."""
    labels = [str(k) for k in class_labels_24()]
    csv_path = Path(csv_path)
    csv_path.parent.mkdir(parents=True, exist_ok=True)
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["reference\\predicted"] + labels)
        for name, row in zip(labels, mat):
            writer.writerow([name] + [int(v) for v in row])

    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    totals = mat.sum(axis=1, keepdims=True).astype(np.float64)
    norm = np.divide(mat, np.maximum(totals, 1.0))
    fig, ax = plt.subplots(figsize=(9, 8))
    im = ax.imshow(norm, cmap="viridis", vmin=0.0, vmax=1.0)
    ax.set_xticks(range(24), labels, rotation=90, fontsize=7)
    ax.set_yticks(range(24), labels, fontsize=7)
    ax.set_xlabel("predicted")
    ax.set_ylabel("reference")
    fig.colorbar(im, ax=ax, fraction=0.046)
    fig.tight_layout()
    fig.savefig(png_path, dpi=150)
    plt.close(fig)


# --------------------------------------------------------------------------
# Baselines


def load_key_profiles() -> dict[str, np.ndarray]:
    """Tonal-hierarchy templates shipped as package data."""
    ref = resources.files("cofkey") / "profiles" / "key_profiles.json"
    if not ref.is_file():
        raise EvaluationError(
            "key profile data missing: expected profiles/key_profiles.json inside "
            "the installed package")
    data = json.loads(ref.read_text())
    return {MODE_MAJOR: np.asarray(data[MODE_MAJOR], dtype=np.float64),
            MODE_MINOR: np.asarray(data[MODE_MINOR], dtype=np.float64)}


def chroma_from_cqt(cqt: np.ndarray) -> np.ndarray:
    """Fold a log-magnitude constant-Q matrix into a 12-bin chroma vector.

    The log compression is undone (expm1) so bins add as energies, magnitudes
    are time-averaged, and the 99 rows fold by pitch class: row p sits at
    chroma (9 + p) mod 12 because the lowest analysis bin is the A four
    octaves below reference. L1 normalized.
    """
    avg = np.expm1(np.asarray(cqt, dtype=np.float64)).mean(axis=1)
    chroma = np.zeros(12)
    for p, v in enumerate(avg):
        chroma[(9 + p) % 12] += v
    s = chroma.sum()
    return chroma / s if s > 0 else chroma


def baseline_chroma_signature(cqt: np.ndarray) -> int:
    """Dominant pitch class of the folded chroma, read as a key signature."""
    return int(chroma_from_cqt(cqt).argmax())


def baseline_template_key(cqt: np.ndarray, profiles=None) -> KeyLabel:
    """Best Pearson correlation against all 24 rotated tonal-hierarchy
    templates."""
    if profiles is None:
        profiles = load_key_profiles()
    chroma = chroma_from_cqt(cqt)
    best, best_r = None, -np.inf
    for mode in (MODE_MAJOR, MODE_MINOR):
        prof = profiles[mode]
        for tonic in range(12):
            with np.errstate(invalid="ignore", divide="ignore"):
                r = float(np.corrcoef(chroma, np.roll(prof, tonic))[0, 1])
            if not np.isfinite(r):
                r = -1.0  # constant chroma: no candidate correlates; keep first
            if r > best_r:
                best, best_r = KeyLabel(tonic, mode), r
    return best


# --------------------------------------------------------------------------
# Manifest-level evaluation


@dataclass
class EvalReport:
    counts: EvalCounts
    ksea_percent: float
    mirex_percent: float
    n: int
    per_track_csv: Path
    summary_json: Path
    confusion_csv: Path
    confusion_png: Path


def evaluate_keys(references, predictions, out_dir, paths=None,
                  fifth_both_directions: bool = False) -> EvalReport:
    """Score parallel reference/prediction key lists and write all reports."""
    refs = list(references)
    preds = list(predictions)
    if len(refs) != len(preds) or not refs:
        raise EvaluationError("need equal, nonempty reference and prediction lists")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if paths is None:
        paths = [f"item_{i:05d}" for i in range(len(refs))]

    counts = EvalCounts()
    rows = []
    for path, r, p in zip(paths, refs, preds):
        cat = categorize(r, p, fifth_both_directions)
        counts.add(cat)
        rows.append((path, str(r), str(p), cat))

    per_track = out_dir / "per_track.csv"
    with open(per_track, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["path", "reference", "predicted", "category"])
        writer.writerows(rows)

    correct, fifth, total = ksea_from_labels(refs, preds)
    ksea = ksea_score(correct, fifth, total)
    mirex = mirex_score(counts)

    mat = confusion_matrix(refs, preds)
    confusion_csv = out_dir / "confusion.csv"
    confusion_png = out_dir / "confusion.png"
    save_confusion(mat, confusion_csv, confusion_png)

    summary = out_dir / "summary.json"
    with open(summary, "w") as fh:
        json.dump({"n": len(refs), "ksea_percent": ksea, "mirex_percent": mirex,
                   "ksea_counts": {"correct": correct, "fifth": fifth},
                   "mirex_counts": asdict(counts),
                   "fifth_both_directions": fifth_both_directions}, fh, indent=2)

    return EvalReport(counts=counts, ksea_percent=ksea, mirex_percent=mirex,
                      n=len(refs), per_track_csv=per_track, summary_json=summary,
                      confusion_csv=confusion_csv, confusion_png=confusion_png)


def evaluate_manifest(model: ChromaNet | None, cal: CalibrationState | None,
                      manifest, audio_root, params: CqtParams, out_dir,
                      baseline: str | None = None,
                      fifth_both_directions: bool = False,
                      segment_frames: int | None = None) -> EvalReport:
    """Predict a key for every labeled track and write scores + reports.

    baseline=None runs the model (needs calibration); "chroma" and "template"
    run the two reference systems instead.
    """
    from .audio_io import load_audio

    if baseline is None and (model is None or cal is None):
        raise EvaluationError("model evaluation needs a checkpoint and calibration")
    if baseline not in (None, "chroma", "template"):
        raise EvaluationError(f"unknown baseline {baseline!r}")
    labeled = [e for e in manifest.entries if e.label is not None]
    if not labeled:
        raise DataError("manifest has no labeled tracks to evaluate")
    root = Path(audio_root)
    cqts = []
    for e in labeled:
        samples, sr = load_audio(root / e.path, target_sr=params.sample_rate)
        cqts.append(compute_cqt(AudioClip(samples, sr), params))
    refs = [e.label for e in labeled]

    if baseline is None:
        preds = predict_keys(model, cqts, cal, segment_frames=segment_frames)
    elif baseline == "chroma":
        # Signature-only system; report it as major keys so MIREX categories
        # are still defined.
        preds = [KeyLabel(baseline_chroma_signature(c), MODE_MAJOR) for c in cqts]
    else:
        profiles = load_key_profiles()
        preds = [baseline_template_key(c, profiles) for c in cqts]

    return evaluate_keys(refs, preds, out_dir, paths=[e.path for e in labeled],
                         fifth_both_directions=fifth_both_directions)
