"""Training engine: segment sampling, optimization steps, the epoch loop.

Every stochastic choice (epoch shuffles, segment windows, transposition
intervals) is drawn from one numpy Generator seeded from the config, and the
generator's state travels inside checkpoints, so a run is bit-reproducible
and resuming continues the exact stream. Torch RNG is used only for weight
initialization.

Modes: `ssl12` (12-bin profile, CPSD losses), `ssl24` (key/mode matrix, CPSD
over the pitch-class marginal plus mode-consistency BCE), `supervised`
(labeled data, oracle responses substituted for segment B), `alternating`
(even epochs self-supervised, odd epochs supervised, one shared optimizer and
schedule).
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch

from . import objectives
from .audio_io import load_audio
from .checkpoint import load_checkpoint, save_checkpoint
from .data import DatasetManifest, subsample_labels
from .frontend import (CROP_SEMITONES, AudioClip, CqtParams, analysis_windows,
                       compute_cqt, crop_for_transposition)
from .network import ChromaNet, ChromaNetConfig, lambda_profile, mode_marginal

TRAIN_MODES = ("ssl12", "ssl24", "supervised", "alternating")


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "ssl24"
    omega: int = 7
    epochs: int = 30
    batch_size: int = 16
    lr: float = 1e-3
    weight_decay: float = 0.01
    warmup_frac: float = 0.05
    segment_seconds: float = 4.0
    seed: int = 0
    label_fraction: float = 1.0
    collapse_bits: float = 1.0
    ablation_ce_loss: bool = False

    def __post_init__(self):
        if self.mode not in TRAIN_MODES:
            raise TrainingError(f"unknown training mode {self.mode!r} (one of {TRAIN_MODES})")
        if self.omega not in (1, 7):
            raise TrainingError(f"omega must be 1 or 7 for training runs, got {self.omega}")
        if self.epochs <= 0 or self.batch_size <= 0:
            raise TrainingError("epochs and batch_size must be positive")
        if not (0.0 <= self.warmup_frac < 1.0):
            raise TrainingError("warmup_frac must lie in [0, 1)")
        if not (0.0 < self.label_fraction <= 1.0):
            raise TrainingError("label_fraction must lie in (0, 1]")
        if self.ablation_ce_loss and self.mode != "ssl12":
            raise TrainingError("the cross-entropy ablation is defined for ssl12")


def expected_out_channels(mode: str) -> int:
    return 1 if mode == "ssl12" else 2


def sample_intervals(rng: np.random.Generator) -> tuple[int, int]:
    """Uniform c in [0, 15]; uniform k in [-12, 12] resampled until 0 <= c+k <= 15.

    Rejection keeps the marginal of c exactly uniform.
    """
    c = int(rng.integers(0, CROP_SEMITONES + 1))
    while True:
        k = int(rng.integers(-12, 13))
        if 0 <= c + k <= CROP_SEMITONES:
            return c, k


def lr_at_step(step: int, total_steps: int, base_lr: float, warmup_frac: float) -> float:
    """Linear warmup then cosine decay. The peak (== base_lr) occurs at exactly
    one step; the final step is small but nonzero."""
    if not (0 <= step < total_steps):
        raise TrainingError(f"step {step} outside [0, {total_steps})")
    warm = max(1, int(round(total_steps * warmup_frac)))
    warm = min(warm, total_steps)
    if step < warm:
        return base_lr * (step + 1) / warm
    span = total_steps - warm + 1
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * (step - warm + 1) / span))


class TrackDataset:
    """Full-track constant-Q matrices cached in memory, with optional labels."""

    def __init__(self, manifest: DatasetManifest, audio_root, params: CqtParams,
                 segment_seconds: float, progress: bool = False):
        from .data import DataError  # local to avoid cycles at import time

        self.params = params
        self.seg_frames = int(round(segment_seconds * params.sample_rate / params.hop))
        if self.seg_frames < 2:
            raise DataError("segment too short for the analysis hop")
        root = Path(audio_root)
        self.cqts: list[np.ndarray] = []
        self.ids: list[str] = []
        self.sig: list[int | None] = []
        self.mode_idx: list[int | None] = []
        iterator = manifest.entries
        if progress:
            from tqdm import tqdm
            iterator = tqdm(iterator, desc="caching features", unit="track")
        for e in iterator:
            samples, sr = load_audio(root / e.path, target_sr=params.sample_rate)
            cqt = compute_cqt(AudioClip(samples, sr), params)
            if cqt.shape[1] < 2 * self.seg_frames:
                raise DataError(
                    f"clip too short for two disjoint segments: {e.path} has "
                    f"{cqt.shape[1]} frames, need {2 * self.seg_frames}")
            self.cqts.append(cqt)
            self.ids.append(e.path)
            self.sig.append(e.label.key_signature_chroma if e.label else None)
            self.mode_idx.append(e.label.mode_index if e.label else None)

    def __len__(self) -> int:
        return len(self.cqts)

    def subset(self, paths) -> "TrackDataset":
        """A view over a subset of tracks (shared feature arrays)."""
        wanted = set(paths)
        view = object.__new__(TrackDataset)
        view.params = self.params
        view.seg_frames = self.seg_frames
        keep = [i for i, p in enumerate(self.ids) if p in wanted]
        view.cqts = [self.cqts[i] for i in keep]
        view.ids = [self.ids[i] for i in keep]
        view.sig = [self.sig[i] for i in keep]
        view.mode_idx = [self.mode_idx[i] for i in keep]
        return view

    def labeled_subset(self) -> "TrackDataset":
        return self.subset([p for p, s in zip(self.ids, self.sig) if s is not None])


def _sample_segments(ds: TrackDataset, idx: int, rng: np.random.Generator):
    cqt = ds.cqts[idx]
    T, L = cqt.shape[1], ds.seg_frames
    s1 = int(rng.integers(0, T - 2 * L + 1))
    s2 = int(rng.integers(s1 + L, T - L + 1))
    if rng.random() < 0.5:
        s1, s2 = s2, s1
    return cqt[:, s1:s1 + L], cqt[:, s2:s2 + L]


def make_batch(ds: TrackDataset, indices, rng: np.random.Generator,
               labeled: bool) -> dict:
    """Assemble per-item crops and intervals for one step."""
    xa_c, xb_c, xa_ck, cs, ks, sigs, modes, ids = [], [], [], [], [], [], [], []
    for idx in indices:
        seg_a, seg_b = _sample_segments(ds, int(idx), rng)
        c, k = sample_intervals(rng)
        xa_c.append(crop_for_transposition(seg_a, c))
        xb_c.append(crop_for_transposition(seg_b, c))
        xa_ck.append(crop_for_transposition(seg_a, c + k))
        cs.append(c)
        ks.append(k)
        ids.append(ds.ids[int(idx)])
        if labeled:
            if ds.sig[int(idx)] is None:
                raise TrainingError(f"supervised batch drew unlabeled track {ds.ids[int(idx)]}")
            sigs.append(ds.sig[int(idx)])
            modes.append(ds.mode_idx[int(idx)])
    batch = {
        "xa_c": np.stack(xa_c), "xb_c": np.stack(xb_c), "xa_ck": np.stack(xa_ck),
        "c": np.asarray(cs, dtype=np.int64), "k": np.asarray(ks, dtype=np.int64),
        "ids": ids,
    }
    if labeled:
        batch["sig"] = np.asarray(sigs, dtype=np.int64)
        batch["mode"] = np.asarray(modes, dtype=np.int64)
    return batch


def _to_input(arr: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(arr)).unsqueeze(1)  # [B,1,84,T]


def _check_finite(breakdown: objectives.LossBreakdown, batch: dict) -> None:
    if not torch.isfinite(breakdown.total):
        raise TrainingError(
            f"non-finite loss; offending batch sources: {batch['ids']}")


def ssl_step(model: ChromaNet, optimizer: torch.optim.Optimizer, batch: dict,
             cfg: TrainConfig) -> objectives.LossBreakdown:
    """One self-supervised optimization step over a three-way forward pass."""
    model.train()
    x = torch.cat([_to_input(batch["xa_c"]), _to_input(batch["xb_c"]),
                   _to_input(batch["xa_ck"])], dim=0)
    n = batch["xa_c"].shape[0]
    k = torch.from_numpy(batch["k"])
    if cfg.mode == "ssl12":
        y = model.profile(x)
        ya_c, yb_c, ya_ck = y[:n], y[n:2 * n], y[2 * n:]
        if cfg.ablation_ce_loss:
            breakdown = objectives.crossentropy_ablation_loss(ya_c, yb_c, ya_ck)
        else:
            breakdown = objectives.cpsd_loss(ya_c, yb_c, ya_ck, k, cfg.omega)
    else:
        ymat = model.key_mode(x)
        lam = lambda_profile(ymat)
        mu = mode_marginal(ymat)
        cp = objectives.cpsd_loss(lam[:n], lam[n:2 * n], lam[2 * n:], k, cfg.omega)
        bc = objectives.bce_loss(mu[:n], mu[n:2 * n], mu[2 * n:])
        breakdown = objectives.LossBreakdown(
            l_ab=cp.l_ab, l_aa=cp.l_aa, l_ba=cp.l_ba,
            bce_ab=bc.l_ab, bce_aa=bc.l_aa, bce_ba=bc.l_ba)
    _check_finite(breakdown, batch)
    optimizer.zero_grad(set_to_none=True)
    breakdown.total.backward()
    optimizer.step()
    return breakdown


def supervised_step(model: ChromaNet, optimizer: torch.optim.Optimizer, batch: dict,
                    cfg: TrainConfig) -> objectives.LossBreakdown:
    """One supervised step: oracle responses stand in for segment B everywhere;
    the pure-A equivariance term is untouched."""
    model.train()
    x = torch.cat([_to_input(batch["xa_c"]), _to_input(batch["xa_ck"])], dim=0)
    n = batch["xa_c"].shape[0]
    k = torch.from_numpy(batch["k"])
    lam_ref, mu_ref = objectives.supervised_oracles(
        batch["sig"], batch["mode"], batch["c"])
    ymat = model.key_mode(x)
    lam = lambda_profile(ymat)
    mu = mode_marginal(ymat)
    lam_ref = lam_ref.to(lam.dtype)
    mu_ref = mu_ref.to(mu.dtype)
    cp = objectives.LossBreakdown(
        l_ab=objectives.loss_invariance(lam[:n], lam_ref, cfg.omega).mean(),
        l_aa=objectives.loss_equivariance(lam[:n], lam[n:], k, cfg.omega).mean(),
        l_ba=objectives.loss_combined(lam_ref, lam[n:], k, cfg.omega).mean(),
    )
    bc = objectives.bce_loss(mu[:n], mu_ref, mu[n:])
    breakdown = objectives.LossBreakdown(
        l_ab=cp.l_ab, l_aa=cp.l_aa, l_ba=cp.l_ba,
        bce_ab=bc.l_ab, bce_aa=bc.l_aa, bce_ba=bc.l_ba)
    _check_finite(breakdown, batch)
    optimizer.zero_grad(set_to_none=True)
    breakdown.total.backward()
    optimizer.step()
    return breakdown


def collapse_entropy_bits(model: ChromaNet, cqts, batch_size: int = 64,
                          segment_frames: int | None = None) -> float:
    """Shannon entropy (bits) of the argmax-class histogram over a probe set.

    Requires at least 100 items for the estimate to mean anything.
    """
    if len(cqts) < 100:
        raise TrainingError(f"probe set too small for collapse check: {len(cqts)} < 100")
    classes = predict_classes(model, cqts, batch_size, segment_frames)
    n_classes = 12 if model.cfg.out_channels == 1 else 24
    hist = np.bincount(classes, minlength=n_classes).astype(np.float64)
    p = hist / hist.sum()
    nz = p[p > 0]
    return float(-(nz * np.log2(nz)).sum())


def predict_classes(model: ChromaNet, cqts, batch_size: int = 64,
                    segment_frames: int | None = None) -> np.ndarray:
    """Argmax class per clip at transposition 0 (12 or 24 classes).

    With segment_frames set, clips are cut into analysis windows of that
    length and the per-window responses averaged before the argmax, matching
    the fixed segment length the network was trained on.
    """
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
    n_classes = 12 if model.cfg.out_channels == 1 else 24
    sums = np.zeros((len(cqts), n_classes), dtype=np.float64)
    with torch.no_grad():
        for _, idxs in by_len.items():
            for start in range(0, len(idxs), batch_size):
                chunk = idxs[start:start + batch_size]
                x = _to_input(np.stack([pieces[j][1] for j in chunk]))
                if model.cfg.out_channels == 1:
                    y = model.profile(x)
                else:
                    y = model.key_mode(x).flatten(1)
                y = y.numpy()
                for row, j in enumerate(chunk):
                    sums[pieces[j][0]] += y[row]
    return sums.argmax(axis=1)


@dataclass
class TrainResult:
    checkpoint_path: Path
    loss_log_path: Path
    steps: int
    entropy_bits: float | None
    collapsed: bool
    last_loss: dict


def _phase_of(epoch: int, mode: str) -> str:
    if mode in ("ssl12", "ssl24"):
        return "ssl"
    if mode == "supervised":
        return "sup"
    return "ssl" if epoch % 2 == 0 else "sup"


def train(cfg: TrainConfig, net_cfg: ChromaNetConfig, params: CqtParams,
          manifest: DatasetManifest, audio_root, run_dir,
          resume=None, progress: bool = False) -> TrainResult:
    """Run a training job into run_dir (checkpoints/, logs/)."""
    if net_cfg.out_channels != expected_out_channels(cfg.mode):
        raise TrainingError(
            f"mode {cfg.mode} needs out_channels={expected_out_channels(cfg.mode)}, "
            f"config has {net_cfg.out_channels}")
    run_dir = Path(run_dir)
    (run_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
    (run_dir / "logs").mkdir(parents=True, exist_ok=True)
    ckpt_path = run_dir / "checkpoints" / "last.pt"
    log_path = run_dir / "logs" / "loss.jsonl"

    ds_all = TrackDataset(manifest, audio_root, params, cfg.segment_seconds,
                          progress=progress)
    needs_labels = cfg.mode in ("supervised", "alternating")
    ds_labeled = None
    if needs_labels:
        if all(e.label is None for e in manifest.entries):
            raise TrainingError("no labeled tracks available for supervised phases")
        sub = subsample_labels(manifest, cfg.label_fraction, cfg.seed)
        ds_labeled = ds_all.subset([e.path for e in sub.labeled])
        if len(ds_labeled) == 0:
            raise TrainingError("no labeled tracks available for supervised phases")
        if len(ds_labeled) < cfg.batch_size:
            raise TrainingError(
                f"labeled subset ({len(ds_labeled)}) smaller than batch size "
                f"({cfg.batch_size})")
    if len(ds_all) < cfg.batch_size:
        raise TrainingError(f"dataset ({len(ds_all)}) smaller than batch size")

    def steps_in(epoch: int) -> int:
        ds = ds_labeled if _phase_of(epoch, cfg.mode) == "sup" else ds_all
        return len(ds) // cfg.batch_size

    total_steps = sum(steps_in(e) for e in range(cfg.epochs))

    seed_seq = np.random.SeedSequence(cfg.seed)
    init_seed, sample_seed = seed_seq.spawn(2)
    torch.manual_seed(int(init_seed.generate_state(1)[0]))
    model = ChromaNet(net_cfg)
    optimizer = torch.optim.AdamW(model.parameters(), lr=cfg.lr,
                                  weight_decay=cfg.weight_decay)
    rng = np.random.default_rng(sample_seed)

    start_epoch, global_step = 0, 0
    log_mode = "w"
    if resume is not None:
        bundle = load_checkpoint(resume)
        if bundle["train_config"] != asdict(cfg):
            raise TrainingError("resume refused: config differs from the checkpoint's")
        model.load_state_dict(bundle["model_state"])
        optimizer.load_state_dict(bundle["optimizer_state"])
        rng.bit_generator.state = bundle["rng_state"]["sampler"]
        start_epoch = bundle["counters"]["epoch_next"]
        global_step = bundle["counters"]["step"]
        total_steps = bundle["counters"]["total_steps"]
        log_mode = "a"

    def save(epoch_next: int) -> None:
        save_checkpoint(
            ckpt_path, model,
            train_config=asdict(cfg),
            optimizer_state=optimizer.state_dict(),
            counters={"epoch_next": epoch_next, "step": global_step,
                      "total_steps": total_steps},
            rng_state={"sampler": rng.bit_generator.state},
            calibration=None)

    epoch_iter = range(start_epoch, cfg.epochs)
    if progress:
        from tqdm import tqdm
        epoch_iter = tqdm(epoch_iter, desc="epochs", unit="epoch")

    last = {}
    with open(log_path, log_mode) as log:
        for epoch in epoch_iter:
            phase = _phase_of(epoch, cfg.mode)
            ds = ds_labeled if phase == "sup" else ds_all
            order = rng.permutation(len(ds))
            for b in range(len(ds) // cfg.batch_size):
                idxs = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
                batch = make_batch(ds, idxs, rng, labeled=(phase == "sup"))
                lr = lr_at_step(global_step, total_steps, cfg.lr, cfg.warmup_frac)
                for group in optimizer.param_groups:
                    group["lr"] = lr
                if phase == "sup":
                    breakdown = supervised_step(model, optimizer, batch, cfg)
                else:
                    breakdown = ssl_step(model, optimizer, batch, cfg)
                last = breakdown.as_floats()
                record = {"step": global_step, "epoch": epoch, "phase": phase,
                          "lr": lr, **last}
                log.write(json.dumps(record) + "\n")
                global_step += 1
            save(epoch + 1)

    entropy = None
    collapsed = False
    if len(ds_all) >= 100:
        probe = ds_all.cqts[:min(len(ds_all), 256)]
        entropy = collapse_entropy_bits(model, probe,
                                        segment_frames=ds_all.seg_frames)
        collapsed = entropy < cfg.collapse_bits
    if start_epoch >= cfg.epochs:
        save(cfg.epochs)
    return TrainResult(checkpoint_path=ckpt_path, loss_log_path=log_path,
                       steps=global_step, entropy_bits=entropy, collapsed=collapsed,
                       last_loss=last)
