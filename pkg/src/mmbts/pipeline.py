"""Training loop, plateau schedule, checkpointing, and pattern evaluation.

Training draws one availability pattern per subject per step, runs the full
forward pass, and optimizes the weighted hybrid objective with NAdam.
The learning rate halves after `plateau_patience` epochs without validation
improvement and training stops after `early_stop_patience`. Everything is
seeded, so a (config, dataset) pair reproduces bit-identical runs on one
device.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import correlation, losses, metrics
from .dropout import PatternMask, apply_pattern, enumerate_patterns, sample_pattern
from .errors import CheckpointError, NumericError, SupervisionError
from .network import ABLATIONS, N_ACQUIRED, NetworkConfig, SegmentationModel, build_network
from .volumes import ACQUIRED_MODALITIES, MultiModalVolume, load_subject, preprocess

CHANNEL_TO_CODE = {v: k for k, v in losses.CODE_TO_CHANNEL.items()}

CHECKPOINT_FORMAT = "mmbts-checkpoint-1"


@dataclass
class RunConfig:
    """Complete experiment configuration."""

    network: NetworkConfig = field(default_factory=NetworkConfig)
    lam: float = 0.1
    eta: float = 0.1
    learning_rate: float = 5e-4
    plateau_factor: float = 0.5
    plateau_patience: int = 5
    early_stop_patience: int = 10
    batch_size: int = 2
    max_epochs: int = 50
    train_fraction: float = 0.8
    val_fraction: float = 0.2
    seed: int = 0
    ablation: str = "fe_g_cc"

    def __post_init__(self):
        if self.ablation not in ABLATIONS:
            raise ValueError(f"unknown ablation {self.ablation!r}")
        if self.train_fraction <= 0 or self.val_fraction <= 0:
            raise ValueError("split fractions must be positive")
        if abs(self.train_fraction + self.val_fraction - 1.0) > 1e-9:
            raise ValueError("split fractions must sum to 1")
        if self.plateau_patience <= 0 or self.early_stop_patience <= 0:
            raise ValueError("patience values must be positive")
        # ablation wiring: baseline trains without generation or correlation
        # losses; fe_g without the correlation loss.
        if self.ablation == "baseline":
            self.lam = 0.0
            self.eta = 0.0
        elif self.ablation == "fe_g":
            self.eta = 0.0

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["network"] = self.network.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        d["network"] = NetworkConfig.from_dict(d["network"])
        return cls(**d)


class PlateauSchedule:
    """Reduce-on-plateau with early stopping, counted in epochs.

    After `plateau_patience` consecutive epochs without validation
    improvement the learning rate is multiplied by `factor` (and the plateau
    counter resets); after `stop_patience` consecutive stagnant epochs
    training stops. Driven by step(val_loss) once per epoch.
    """

    def __init__(self, lr: float, factor: float, plateau_patience: int,
                 stop_patience: int, min_delta: float = 0.0):
        self.lr = lr
        self.factor = factor
        self.plateau_patience = plateau_patience
        self.stop_patience = stop_patience
        self.min_delta = min_delta
        self.best = math.inf
        self._plateau_wait = 0
        self._stop_wait = 0

    def step(self, val_loss: float) -> dict:
        improved = val_loss < self.best - self.min_delta
        reduced = False
        if improved:
            self.best = val_loss
            self._plateau_wait = 0
            self._stop_wait = 0
        else:
            self._plateau_wait += 1
            self._stop_wait += 1
            if self._plateau_wait >= self.plateau_patience:
                self.lr *= self.factor
                self._plateau_wait = 0
                reduced = True
        return {
            "improved": improved,
            "reduced": reduced,
            "stop": self._stop_wait >= self.stop_patience,
            "lr": self.lr,
        }


# ---------------------------------------------------------------------------
# Dataset handling
# ---------------------------------------------------------------------------

def load_dataset(path: str | Path, input_shape, require_full: bool = True):
    """Load every subject directory under `path`, resampled to input_shape
    and z-score normalized. Sorted by directory name for determinism."""
    path = Path(path)
    dirs = sorted(p for p in path.iterdir() if (p / "header.json").is_file())
    if not dirs:
        raise FileNotFoundError(f"no subject directories under {path}")
    subjects = []
    for d in dirs:
        volume, labels = load_subject(d)
        if labels is None:
            raise SupervisionError(f"subject {d.name} has no labels")
        if require_full and not all(volume.availability.present):
            missing = [ACQUIRED_MODALITIES[i].value
                       for i in volume.availability.missing_indices()]
            raise SupervisionError(f"subject {d.name} lacks modalities {missing}")
        volume, labels = preprocess(volume, labels, input_shape)
        subjects.append((volume, labels))
    return subjects


def stack_modalities(volume: MultiModalVolume) -> torch.Tensor:
    """Subject volumes as a (4, D, H, W) float tensor, zeros for absent."""
    arrays = []
    for idx, modality in enumerate(ACQUIRED_MODALITIES):
        if volume.availability.present[idx]:
            arrays.append(volume.volumes[modality])
        else:
            arrays.append(np.zeros(volume.shape, dtype=np.float32))
    return torch.from_numpy(np.stack(arrays))


def _batch_tensors(subjects, indices, patterns):
    """Assemble pattern-masked inputs, availability, one-hot labels, and
    generation targets for one batch."""
    xs, avails, onehots, targets = [], [], [], []
    for idx, pattern in zip(indices, patterns):
        volume, labels = subjects[idx]
        masked = apply_pattern(volume, pattern)
        xs.append(stack_modalities(masked))
        avails.append(torch.tensor([float(p) for p in pattern.present]))
        onehots.append(losses.one_hot_labels(labels))
        targets.append(torch.from_numpy(losses.generator_target(volume, pattern)))
    return (
        torch.stack(xs),
        torch.stack(avails),
        torch.stack(onehots),
        torch.stack(targets),
    )


def _correlated_features(model: SegmentationModel, bottlenecks):
    correlated = []
    for i in range(len(bottlenecks)):
        params = model.cpems[i](bottlenecks[i])
        sources = [bottlenecks[j] for j in correlation.source_indices(i)]
        correlated.append(correlation.lcem_forward(params, sources))
    return correlated


def compute_losses(model: SegmentationModel, x, avail, onehot, gen_target, config: RunConfig):
    """Forward pass plus the three loss components under the ablation."""
    out = model.forward_full(x, avail)
    seg = losses.dice_loss(out["class_probabilities"], onehot)
    if config.ablation == "baseline":
        gen = torch.zeros(())
        cc = torch.zeros(())
    else:
        gen = losses.ssim_loss(out["m5_volume"][:, 0], gen_target)
        if config.ablation == "fe_g_cc":
            bottlenecks = out["bottleneck_features"]
            cc = correlation.ccl_loss(
                bottlenecks, _correlated_features(model, bottlenecks), batched=True
            )
        else:
            cc = torch.zeros(())
    total, report = losses.total_loss(seg, gen, cc, lam=config.lam, eta=config.eta)
    return total, report, out


# ---------------------------------------------------------------------------
# Checkpointing
# ---------------------------------------------------------------------------

def save_checkpoint(path: str | Path, model: SegmentationModel, config: RunConfig,
                    optimizer=None, extra: dict | None = None) -> Path:
    path = Path(path)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": model.version,
        "init_seed": model.init_seed,
        "config": config.to_dict(),
        "model_state": model.state_dict(),
        "optimizer_state": optimizer.state_dict() if optimizer is not None else None,
        "torch_rng": torch.get_rng_state(),
    }
    payload.update(extra or {})
    torch.save(payload, path)
    return path


def load_checkpoint(path: str | Path) -> tuple[SegmentationModel, RunConfig, dict]:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint {path} not found")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"unrecognized checkpoint format in {path}")
    config = RunConfig.from_dict(payload["config"])
    model = build_network(config.network, payload["init_seed"], ablation=config.ablation)
    state = payload["model_state"]
    expected = model.parameter_shapes()
    got = {name: tuple(t.shape) for name, t in state.items()}
    if expected != got:
        missing = sorted(set(expected) - set(got))
        surplus = sorted(set(got) - set(expected))
        shapes = sorted(
            n for n in set(expected) & set(got) if expected[n] != got[n]
        )
        raise CheckpointError(
            f"checkpoint/model mismatch: missing={missing} surplus={surplus} shapes={shapes}"
        )
    model.load_state_dict(state)
    model.eval()
    return model, config, payload


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def _validation_loss(model, subjects, val_indices, config) -> float:
    """Mean total loss over validation subjects with a fixed pattern cycle."""
    patterns = enumerate_patterns()
    model.eval()
    vals = []
    with torch.no_grad():
        for j, idx in enumerate(val_indices):
            pattern = patterns[j % len(patterns)]
            x, avail, onehot, target = _batch_tensors(subjects, [idx], [pattern])
            total, _, _ = compute_losses(model, x, avail, onehot, target, config)
            vals.append(float(total))
    model.train()
    return float(np.mean(vals))


def train(config: RunConfig, dataset_path: str | Path, out_dir: str | Path) -> dict:
    """Train one model; returns paths of the best checkpoint and the log.

    The JSON-lines log carries one record per step (losses, lr) plus one
    per epoch (validation loss, schedule events).
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    checkpoint_path = out_dir / "checkpoint.pt"
    log_path = out_dir / "train_log.jsonl"

    subjects = load_dataset(dataset_path, config.network.input_shape)
    rng = np.random.default_rng(config.seed)
    order = rng.permutation(len(subjects))
    n_train = max(1, int(round(config.train_fraction * len(subjects))))
    n_train = min(n_train, len(subjects) - 1) if len(subjects) > 1 else 1
    train_idx = [int(i) for i in order[:n_train]]
    val_idx = [int(i) for i in order[n_train:]] or train_idx[:1]

    torch.manual_seed(config.seed)
    model = build_network(config.network, config.seed, ablation=config.ablation)
    model.train()
    optimizer = torch.optim.NAdam(
        model.parameters(), lr=config.learning_rate, betas=(0.9, 0.999), eps=1e-8
    )
    schedule = PlateauSchedule(
        config.learning_rate,
        config.plateau_factor,
        config.plateau_patience,
        config.early_stop_patience,
    )

    best_val = math.inf
    step = 0
    history = []
    with open(log_path, "w") as log:
        for epoch in range(config.max_epochs):
            epoch_order = [train_idx[int(i)] for i in rng.permutation(len(train_idx))]
            for start in range(0, len(epoch_order), config.batch_size):
                batch = epoch_order[start : start + config.batch_size]
                patterns = [sample_pattern(rng) for _ in batch]
                x, avail, onehot, target = _batch_tensors(subjects, batch, patterns)
                total, report, _ = compute_losses(model, x, avail, onehot, target, config)
                if not math.isfinite(report.total):
                    raise NumericError(
                        f"non-finite loss at epoch {epoch} step {step}: {report.as_dict()}"
                    )
                optimizer.zero_grad()
                total.backward()
                optimizer.step()
                step += 1
                record = {"step": step, "epoch": epoch, **report.as_dict(),
                          "lr": optimizer.param_groups[0]["lr"]}
                log.write(json.dumps(record) + "\n")

            val_loss = _validation_loss(model, subjects, val_idx, config)
            events = schedule.step(val_loss)
            for group in optimizer.param_groups:
                group["lr"] = events["lr"]
            if val_loss < best_val:
                best_val = val_loss
                save_checkpoint(
                    checkpoint_path, model, config, optimizer,
                    extra={"epoch": epoch, "best_val": best_val},
                )
            history.append({"epoch": epoch, "val_loss": val_loss, **events})
            log.write(json.dumps({"epoch": epoch, "val_loss": val_loss, **events}) + "\n")
            if events["stop"]:
                break

    if not checkpoint_path.is_file():
        save_checkpoint(checkpoint_path, model, config, optimizer,
                        extra={"epoch": -1, "best_val": best_val})
    return {
        "checkpoint": checkpoint_path,
        "log": log_path,
        "best_val": best_val,
        "history": history,
    }


def overfit_smoke(config: RunConfig, subjects, steps: int = 200) -> list[float]:
    """Repeatedly fit one fixed batch; returns the per-step total losses."""
    rng = np.random.default_rng(config.seed)
    torch.manual_seed(config.seed)
    model = build_network(config.network, config.seed, ablation=config.ablation)
    model.train()
    optimizer = torch.optim.NAdam(model.parameters(), lr=config.learning_rate)
    indices = list(range(len(subjects)))
    patterns = [sample_pattern(rng) for _ in indices]
    x, avail, onehot, target = _batch_tensors(subjects, indices, patterns)
    history = []
    for _ in range(steps):
        total, report, _ = compute_losses(model, x, avail, onehot, target, config)
        optimizer.zero_grad()
        total.backward()
        optimizer.step()
        history.append(report.total)
    return history


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

def make_predictor(model: SegmentationModel):
    """Wrap a trained model as predict(volume, pattern) -> labelmap."""

    def predict(volume: MultiModalVolume, pattern: PatternMask) -> np.ndarray:
        masked = apply_pattern(volume, pattern)
        x = stack_modalities(masked)[None]
        avail = torch.tensor([[float(p) for p in pattern.present]])
        model.eval()
        with torch.no_grad():
            out = model.forward_full(x, avail)
        channels = out["class_probabilities"][0].argmax(dim=0).numpy()
        labels = np.zeros_like(channels, dtype=np.uint8)
        for channel, code in CHANNEL_TO_CODE.items():
            labels[channels == channel] = code
        return labels

    return predict


def evaluate(checkpoint_path: str | Path, dataset_path: str | Path,
             name: str = "") -> metrics.ResultTable:
    """Evaluate a checkpoint over all 15 patterns on a labeled dataset."""
    model, config, _ = load_checkpoint(checkpoint_path)
    subjects = load_dataset(dataset_path, config.network.input_shape)
    spacing = subjects[0][0].voxel_size_mm
    return metrics.evaluate_patterns(
        make_predictor(model), subjects, spacing=spacing,
        name=name or config.ablation,
    )
