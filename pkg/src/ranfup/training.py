"""Pool pretraining, per-subject adaptation, and the experiment harness.

Pretraining jointly optimizes the shared weights and every training
subject's adapter vectors, one shuffled pass per epoch over all
(subject, direction) pairs, monitoring a validation loss on held-out pool
subjects whose adapters stay at initialization.  The learning rate shrinks
when validation stalls, and the best-validation state is what adaptation
starts from.  Adaptation optimizes only the target's own vectors on the
measured directions, with no validation.

All shuffling draws from a dedicated generator whose state is stored in
the resumable training state, so an interrupted run continues bit
identically at a fixed thread count.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from . import __version__, baselines, dsp, metrics
from . import model as model_mod
from . import retrieval
from .bundle import (
    DatasetSplit,
    HrirBundle,
    HrirSet,
    MeasurementSubset,
    measured_impulse_responses,
    select_measured_subset,
    unit_vectors,
)
from .checkpoint import load_tensors, save_tensors
from .errors import CheckpointFormatError, DataError, NumericalError

LogFn = Callable[[dict], None]

STATE_NAME = "state.ckpt"
BEST_NAME = "best.ckpt"
PRETRAIN_LOG_NAME = "pretrain_log.jsonl"


@dataclass(frozen=True)
class TrainConfig:
    """Optimization hyperparameters shared by pretraining and adaptation."""

    pretrain_epochs: int = 200
    adapt_epochs: int = 500
    learning_rate: float = 0.001
    plateau_factor: float = 0.9
    plateau_patience: int = 10
    itd_weight: float = 20.8
    itd_tolerance: float = 0.5
    batch_size: int = 64
    seed: int = 0

    def __post_init__(self) -> None:
        if self.pretrain_epochs < 0 or self.adapt_epochs < 0:
            raise DataError("epoch counts must be non-negative")
        if self.learning_rate <= 0:
            raise DataError("learning rate must be positive")
        if not 0 < self.plateau_factor <= 1:
            raise DataError("plateau factor must be in (0, 1]")
        if self.plateau_patience < 1:
            raise DataError("plateau patience must be at least 1")
        if self.itd_weight < 0 or self.itd_tolerance < 0:
            raise DataError("loss weights must be non-negative")
        if self.batch_size < 1:
            raise DataError("batch size must be at least 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        return cls(**data)


def sample_loss(
    pred_mag_db: torch.Tensor,
    pred_itd: torch.Tensor,
    true_mag_db: torch.Tensor,
    true_itd: torch.Tensor,
    itd_weight: float = 20.8,
    itd_tolerance: float = 0.5,
) -> torch.Tensor:
    """Mean spectral distortion plus weighted tolerant ITD error.

    Magnitudes are ``[D, F, 2]`` dB tensors; ITDs are ``[D]`` in samples.
    The spectral term is the per-channel RMS over frequency, averaged over
    channels and directions; the ITD term is
    ``itd_weight * mean(max(|error| - itd_tolerance, 0))``.
    """
    if pred_mag_db.shape != true_mag_db.shape or pred_itd.shape != true_itd.shape:
        raise DataError(
            f"loss shape mismatch: {tuple(pred_mag_db.shape)} vs "
            f"{tuple(true_mag_db.shape)}, {tuple(pred_itd.shape)} vs "
            f"{tuple(true_itd.shape)}"
        )
    lsd_term = torch.sqrt(torch.mean((pred_mag_db - true_mag_db) ** 2, dim=1)).mean()
    itd_term = torch.clamp(torch.abs(pred_itd - true_itd) - itd_tolerance, min=0.0).mean()
    return lsd_term + itd_weight * itd_term


def plan_retrievals(
    bank: retrieval.FeatureBank,
    targets: Sequence[str],
    candidates: Sequence[str],
    measured: MeasurementSubset,
    k: int,
    criterion: retrieval.RetrievalCriterion,
    salt: int = 0,
    target_features: dict[str, tuple[np.ndarray, np.ndarray]] | None = None,
) -> dict[str, retrieval.RetrievalResult]:
    """One retrieval result per target, deterministically.

    Targets inside the bank use their own full-grid features; targets
    outside must appear in ``target_features`` with measured-direction
    features.  For the random criterion, each target draws from a seed
    mixed from ``(criterion.seed, salt, target position)`` so resampling
    per epoch only needs a new salt.
    """
    plan = {}
    for pos, target in enumerate(sorted(targets)):
        if target_features is not None and target in target_features:
            mags, itds = target_features[target]
        else:
            mags = bank.magnitudes(target, measured.indices)
            itds = bank.itds(target, measured.indices)
        crit = criterion
        if criterion.kind == "random":
            mixed = int(
                np.random.SeedSequence((criterion.seed, salt, pos)).generate_state(1)[0]
            )
            crit = retrieval.RetrievalCriterion("random", seed=mixed)
        plan[target] = retrieval.retrieve_topk(
            bank, candidates, target, mags, itds, measured, k, crit
        )
    return plan


def measured_features(
    hrir_set: HrirSet, measured: MeasurementSubset, grid_size: int
) -> tuple[np.ndarray, np.ndarray]:
    """dB magnitudes ``[n, F, 2]`` and ITDs ``[n]`` at measured directions."""
    rows = measured_impulse_responses(hrir_set, measured, grid_size)
    mags = []
    itds = []
    for row in rows:
        mags.append(dsp.to_db(dsp.magnitude_spectrum(row)))
        itds.append(dsp.estimate_itd(row, hrir_set.sample_rate))
    return np.stack(mags), np.asarray(itds, dtype=np.int64)


class _FeatureTensors:
    """Per-subject full-grid (dB magnitude, ITD) tensors, lazily cached."""

    def __init__(self, bank: retrieval.FeatureBank):
        self.bank = bank
        self._cache: dict[str, tuple[torch.Tensor, torch.Tensor]] = {}

    def __call__(self, subject_id: str) -> tuple[torch.Tensor, torch.Tensor]:
        if subject_id not in self._cache:
            indices = range(len(self.bank.bundle.grid))
            mags = dsp.to_db(self.bank.magnitudes(subject_id, indices))
            itds = self.bank.itds(subject_id, indices)
            self._cache[subject_id] = (
                torch.from_numpy(mags).float(),
                torch.from_numpy(itds.astype(np.float64)).float(),
            )
        return self._cache[subject_id]


def _stack_retrieved(
    feats: _FeatureTensors, subject_ids: Sequence[str]
) -> tuple[torch.Tensor, torch.Tensor]:
    """Retrieved features over the whole grid: ``[D, K, F, 2]`` and ``[D, K]``."""
    mags = torch.stack([feats(sid)[0] for sid in subject_ids], dim=1)
    itds = torch.stack([feats(sid)[1] for sid in subject_ids], dim=1)
    return mags, itds


def _check_finite(loss: torch.Tensor, context: str) -> None:
    if not torch.isfinite(loss):
        raise NumericalError(f"non-finite loss during {context}")


# -- resumable pretraining state -----------------------------------------------


def _save_train_state(
    path: Path,
    net: model_mod.RanfNet,
    optimizer: torch.optim.Optimizer,
    best_state: dict[str, torch.Tensor] | None,
    shuffle_rng: torch.Generator,
    meta: dict,
) -> None:
    tensors: dict[str, np.ndarray] = {}
    for name, tensor in net.state_dict().items():
        tensors[f"model.{name}"] = tensor.detach().cpu().numpy()
    if best_state is not None:
        for name, tensor in best_state.items():
            tensors[f"best.{name}"] = tensor.detach().cpu().numpy()
    opt_state = optimizer.state_dict()
    scalars: dict[str, float] = {}
    for idx, entry in opt_state["state"].items():
        for key, value in entry.items():
            if isinstance(value, torch.Tensor):
                tensors[f"optim.{idx}.{key}"] = value.detach().cpu().numpy()
            else:
                scalars[f"{idx}.{key}"] = value
    tensors["rng.shuffle"] = shuffle_rng.get_state().numpy()
    save_tensors(path, tensors)
    groups = []
    for group in opt_state["param_groups"]:
        group = dict(group)
        group.pop("params")
        groups.append(group)
    meta = dict(meta)
    meta["optim_scalars"] = scalars
    meta["optim_groups"] = groups
    meta["has_best"] = best_state is not None
    Path(str(path) + ".json").write_text(json.dumps(meta, sort_keys=True))


def _load_train_state(
    path: Path, net: model_mod.RanfNet, optimizer: torch.optim.Optimizer,
    shuffle_rng: torch.Generator,
) -> tuple[dict, dict[str, torch.Tensor] | None]:
    meta_path = Path(str(path) + ".json")
    if not meta_path.is_file():
        raise CheckpointFormatError(f"missing training state sidecar {meta_path}")
    meta = json.loads(meta_path.read_text())
    tensors = {name: torch.from_numpy(arr) for name, arr in load_tensors(path).items()}

    model_state = {
        name[len("model.") :]: t for name, t in tensors.items() if name.startswith("model.")
    }
    net.load_state_dict(model_state, strict=True)
    best_state = None
    if meta.get("has_best"):
        best_state = {
            name[len("best.") :]: t for name, t in tensors.items() if name.startswith("best.")
        }

    opt_entries: dict[int, dict] = {}
    for name, tensor in tensors.items():
        if not name.startswith("optim."):
            continue
        _, idx, key = name.split(".", 2)
        opt_entries.setdefault(int(idx), {})[key] = tensor
    for flat_key, value in meta.get("optim_scalars", {}).items():
        idx, key = flat_key.split(".", 1)
        opt_entries.setdefault(int(idx), {})[key] = value
    n_params = sum(len(g["params"]) for g in optimizer.state_dict()["param_groups"])
    groups = []
    consumed = 0
    for saved, current in zip(meta["optim_groups"], optimizer.state_dict()["param_groups"]):
        group = dict(saved)
        group["params"] = current["params"]
        consumed += len(current["params"])
        groups.append(group)
    if consumed != n_params or len(groups) != len(optimizer.state_dict()["param_groups"]):
        raise CheckpointFormatError("optimizer layout differs from training state")
    optimizer.load_state_dict({"state": opt_entries, "param_groups": groups})
    shuffle_rng.set_state(tensors["rng.shuffle"].to(torch.uint8))
    return meta, best_state


# -- pretraining ---------------------------------------------------------------


@dataclass
class PretrainResult:
    model: model_mod.RanfNet
    best_path: Path
    state_path: Path
    log_path: Path
    history: list[dict]
    best_val_loss: float


def _validation_loss(
    net: model_mod.RanfNet,
    val_ids: Sequence[str],
    plan: dict[str, retrieval.RetrievalResult],
    feats: _FeatureTensors,
    dirs_t: torch.Tensor,
    config: TrainConfig,
) -> float:
    net.eval()
    total = 0.0
    count = 0
    with torch.no_grad():
        for sid in val_ids:
            result = plan[sid]
            r_idx = [net.index_of(r) for r in result.subjects]
            t_idx = net.index_of(sid)
            t_mags, t_itds = feats(sid)
            r_mags, r_itds = _stack_retrieved(feats, result.subjects)
            for chunk in torch.arange(dirs_t.shape[0]).split(config.batch_size):
                mag_hat, itd_hat = net(
                    r_mags[chunk], r_itds[chunk], dirs_t[chunk], t_idx, r_idx
                )
                loss = sample_loss(
                    mag_hat, itd_hat, t_mags[chunk], t_itds[chunk],
                    config.itd_weight, config.itd_tolerance,
                )
                _check_finite(loss, f"validation of {sid}")
                total += float(loss.detach()) * len(chunk)
                count += len(chunk)
    return total / count


def pretrain(
    bundle: HrirBundle,
    split: DatasetSplit,
    measured: MeasurementSubset,
    criterion: retrieval.RetrievalCriterion,
    ranf_config: model_mod.RanfConfig,
    train_config: TrainConfig,
    out_dir: str | Path,
    plan: dict[str, retrieval.RetrievalResult] | None = None,
    resume: bool = True,
    log_fn: LogFn | None = None,
) -> PretrainResult:
    """Train shared weights and pool adapters; keep the best-validation state.

    Writes ``state.ckpt`` (full resumable state, refreshed every epoch),
    ``best.ckpt`` (best-validation model), and a JSON-lines log under
    ``out_dir``.  With ``resume`` set, an existing state checkpoint
    continues the run; the completed run is bit-identical to an
    uninterrupted one at a fixed thread count.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    state_path = out_dir / STATE_NAME
    best_path = out_dir / BEST_NAME
    log_path = out_dir / PRETRAIN_LOG_NAME

    train_ids = sorted(split.pretrain_ids)
    val_ids = sorted(split.validation_ids)
    if not train_ids:
        raise DataError("empty pretrain set")
    measured.validate_for(bundle.grid)
    for sid in train_ids + val_ids:
        if sid not in bundle.subjects:
            raise DataError(f"split subject {sid!r} missing from bundle")

    net = model_mod.RanfNet(ranf_config)
    for sid in train_ids + val_ids:
        net.register_subject(sid)

    bank = retrieval.FeatureBank(bundle)
    feats = _FeatureTensors(bank)
    dirs_t = torch.from_numpy(unit_vectors(bundle.grid)).float()
    k = ranf_config.k_retrieved

    params = list(net.shared_parameters())
    for sid in train_ids:
        params.extend(net.target_parameters(sid))
        params.extend(net.retrieved_parameters(sid))
    optimizer = torch.optim.RAdam(params, lr=train_config.learning_rate)
    shuffle_rng = torch.Generator().manual_seed(train_config.seed)

    if criterion.kind != "random":
        fixed_plan = plan if plan is not None else plan_retrievals(
            bank, train_ids, train_ids, measured, k, criterion
        )
    val_plan = plan_retrievals(bank, val_ids, train_ids, measured, k, criterion, salt=1)

    history: list[dict] = []
    best_val = float("inf")
    best_state: dict[str, torch.Tensor] | None = None
    bad_epochs = 0
    lr = train_config.learning_rate
    start_epoch = 0

    if resume and state_path.is_file():
        meta, best_state = _load_train_state(state_path, net, optimizer, shuffle_rng)
        start_epoch = int(meta["next_epoch"])
        lr = float(meta["lr"])
        best_val = float(meta["best_val"])
        bad_epochs = int(meta["bad_epochs"])
        history = list(meta.get("history", []))

    def snapshot() -> dict[str, torch.Tensor]:
        return {name: t.detach().clone() for name, t in net.state_dict().items()}

    best_extra = {
        "criterion": criterion.kind,
        "criterion_seed": criterion.seed,
        "k": k,
        "measured_indices": list(measured.indices),
        "train_ids": train_ids,
        "validation_ids": val_ids,
        "train_config": train_config.to_dict(),
    }

    for epoch in range(start_epoch, train_config.pretrain_epochs):
        if criterion.kind == "random":
            epoch_plan = plan_retrievals(
                bank, train_ids, train_ids, measured, k, criterion, salt=1000 + epoch
            )
        else:
            epoch_plan = fixed_plan

        net.train()
        total = 0.0
        count = 0
        order = torch.randperm(len(train_ids), generator=shuffle_rng)
        for pos in order.tolist():
            sid = train_ids[pos]
            result = epoch_plan[sid]
            r_idx = [net.index_of(r) for r in result.subjects]
            t_idx = net.index_of(sid)
            t_mags, t_itds = feats(sid)
            r_mags, r_itds = _stack_retrieved(feats, result.subjects)
            perm = torch.randperm(bundle.num_directions, generator=shuffle_rng)
            for chunk in perm.split(train_config.batch_size):
                optimizer.zero_grad()
                mag_hat, itd_hat = net(
                    r_mags[chunk], r_itds[chunk], dirs_t[chunk], t_idx, r_idx
                )
                loss = sample_loss(
                    mag_hat, itd_hat, t_mags[chunk], t_itds[chunk],
                    train_config.itd_weight, train_config.itd_tolerance,
                )
                _check_finite(loss, f"pretraining epoch {epoch}, subject {sid}")
                loss.backward()
                optimizer.step()
                total += float(loss.detach()) * len(chunk)
                count += len(chunk)
        train_loss = total / count

        if val_ids:
            val_loss = _validation_loss(net, val_ids, val_plan, feats, dirs_t, train_config)
        else:
            val_loss = train_loss

        if val_loss < best_val:
            best_val = val_loss
            best_state = snapshot()
            bad_epochs = 0
            model_mod.save_state(
                best_path, ranf_config, net.subject_index, best_state,
                {**best_extra, "epoch": epoch, "val_loss": val_loss},
            )
        else:
            bad_epochs += 1
            if bad_epochs >= train_config.plateau_patience:
                lr *= train_config.plateau_factor
                for group in optimizer.param_groups:
                    group["lr"] = lr
                bad_epochs = 0

        record = {
            "epoch": epoch,
            "train_loss": train_loss,
            "val_loss": val_loss,
            "lr": lr,
        }
        history.append(record)
        with open(log_path, "a" if epoch else "w") as fh:
            fh.write(json.dumps(record, sort_keys=True) + "\n")
        if log_fn:
            log_fn(record)

        _save_train_state(
            state_path, net, optimizer, best_state, shuffle_rng,
            {
                "next_epoch": epoch + 1,
                "lr": lr,
                "best_val": best_val,
                "bad_epochs": bad_epochs,
                "history": history,
            },
        )

    if best_state is None:
        best_state = snapshot()
        model_mod.save_state(
            best_path, ranf_config, net.subject_index, best_state,
            {**best_extra, "epoch": None, "val_loss": None},
        )
    net.load_state_dict(best_state)
    return PretrainResult(net, best_path, state_path, log_path, history, best_val)


# -- adaptation ----------------------------------------------------------------


def adapt(
    net: model_mod.RanfNet,
    bank: retrieval.FeatureBank,
    target_set: HrirSet,
    measured: MeasurementSubset,
    result: retrieval.RetrievalResult,
    train_config: TrainConfig,
    log_fn: LogFn | None = None,
) -> list[float]:
    """Fit only the target subject's adapter vectors on measured directions.

    Shared weights and every retrieved subject's vectors stay untouched.
    Returns the per-epoch mean losses.
    """
    grid = bank.bundle.grid
    measured.validate_for(grid)
    target_id = result.target
    net.register_subject(target_id)
    retrieved_indices = [net.index_of(r) for r in result.subjects]
    target_index = net.index_of(target_id)

    mags_np, itds_np = measured_features(target_set, measured, len(grid))
    t_mags = torch.from_numpy(mags_np).float()
    t_itds = torch.from_numpy(itds_np.astype(np.float64)).float()
    r_mags = []
    r_itds = []
    for di in measured.indices:
        mag_k, itd_k = retrieval.fetch_features(bank, result.subjects, di)
        r_mags.append(dsp.to_db(mag_k))
        r_itds.append(itd_k)
    r_mags_t = torch.from_numpy(np.stack(r_mags)).float()
    r_itds_t = torch.from_numpy(np.stack(r_itds).astype(np.float64)).float()
    dirs_t = torch.from_numpy(
        unit_vectors([grid[di] for di in measured.indices])
    ).float()

    trainable = {id(p) for p in net.target_parameters(target_id)}
    saved_flags = [(p, p.requires_grad) for p in net.parameters()]
    for p, _ in saved_flags:
        p.requires_grad_(id(p) in trainable)
    optimizer = torch.optim.RAdam(
        net.target_parameters(target_id), lr=train_config.learning_rate
    )
    shuffle_rng = torch.Generator().manual_seed(train_config.seed)

    n = len(measured.indices)
    losses = []
    try:
        net.train()
        for epoch in range(train_config.adapt_epochs):
            if n > train_config.batch_size:
                perm = torch.randperm(n, generator=shuffle_rng)
            else:
                perm = torch.arange(n)
            total = 0.0
            for chunk in perm.split(train_config.batch_size):
                optimizer.zero_grad()
                mag_hat, itd_hat = net(
                    r_mags_t[chunk], r_itds_t[chunk], dirs_t[chunk],
                    target_index, retrieved_indices,
                )
                loss = sample_loss(
                    mag_hat, itd_hat, t_mags[chunk], t_itds[chunk],
                    train_config.itd_weight, train_config.itd_tolerance,
                )
                _check_finite(loss, f"adaptation of {target_id}, epoch {epoch}")
                loss.backward()
                optimizer.step()
                total += float(loss.detach()) * len(chunk)
            losses.append(total / n)
            if log_fn:
                log_fn({"subject": target_id, "epoch": epoch, "loss": losses[-1]})
    finally:
        for p, flag in saved_flags:
            p.requires_grad_(flag)
    return losses


# -- experiment harness --------------------------------------------------------


def _summary_of(report: metrics.EvalReport) -> dict:
    return {
        "itd_error_us": report.mean_itd_error_us,
        "ild_error_db": report.mean_ild_error_db,
        "lsd_db": report.mean_lsd_db,
    }


def run_experiment(
    bundle: HrirBundle,
    split: DatasetSplit,
    n_measured: int,
    criterion: retrieval.RetrievalCriterion,
    ranf_config: model_mod.RanfConfig,
    train_config: TrainConfig,
    out_dir: str | Path,
    resume: bool = True,
    log_fn: LogFn | None = None,
    run_baselines: bool = True,
) -> dict:
    """Pretrain, adapt every evaluation subject, and evaluate all systems.

    For each evaluation subject: select measured directions, retrieve,
    adapt, predict the full grid, and score on the unmeasured directions.
    Baselines run under the same harness.  Writes per-subject reports, a
    summary table, and a manifest under ``out_dir``; returns the summary.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    measured = select_measured_subset(bundle.grid, n_measured)
    bank = retrieval.FeatureBank(bundle)
    train_ids = sorted(split.pretrain_ids)
    eval_ids = sorted(split.eval_ids)
    if not eval_ids:
        raise DataError("experiment needs at least one evaluation subject")
    k = ranf_config.k_retrieved

    pre = pretrain(
        bundle, split, measured, criterion, ranf_config, train_config,
        out_dir / "pretrain", resume=resume, log_fn=log_fn,
    )
    net = pre.model

    target_feature_cache = {
        sid: (
            bank.magnitudes(sid, measured.indices),
            bank.itds(sid, measured.indices),
        )
        for sid in eval_ids
    }
    eval_plan = plan_retrievals(
        bank, eval_ids, train_ids, measured, k, criterion, salt=2,
        target_features=target_feature_cache,
    )

    methods = ["ranf"]
    if run_baselines:
        methods += list(baselines.BASELINE_KINDS)
    reports: dict[str, dict[str, metrics.EvalReport]] = {m: {} for m in methods}
    retrieval_records: dict[str, dict] = {}
    adapt_losses: dict[str, list[float]] = {}

    for sid in eval_ids:
        truth = bundle.subjects[sid]
        result = eval_plan[sid]
        retrieval_records[sid] = json.loads(result.to_json())

        losses = adapt(net, bank, truth, measured, result, train_config, log_fn=log_fn)
        adapt_losses[sid] = losses
        pred = model_mod.predict_subject(net, bank, result)
        reports["ranf"][sid] = metrics.evaluate(pred, truth, measured)

        if run_baselines:
            nn_set = baselines.nearest_neighbor(truth, measured, bundle.grid)
            reports["nearest_neighbor"][sid] = metrics.evaluate(nn_set, truth, measured)
            t_mags, t_itds = target_feature_cache[sid]
            for crit_name in ("itd", "lsd"):
                sel_set, sel_result = baselines.select_subject(
                    bank, train_ids, sid, t_mags, t_itds, measured, crit_name
                )
                key = f"selection_{crit_name}"
                reports[key][sid] = metrics.evaluate(sel_set, truth, measured)
                retrieval_records.setdefault(f"{sid}:{key}", json.loads(sel_result.to_json()))
        if log_fn:
            log_fn({"subject": sid, "stage": "evaluated"})

    model_mod.save_model(
        net, out_dir / "adapted.ckpt",
        {
            "criterion": criterion.kind,
            "criterion_seed": criterion.seed,
            "k": k,
            "measured_indices": list(measured.indices),
            "train_config": train_config.to_dict(),
            "adapted_subjects": eval_ids,
        },
    )

    summary: dict = {
        "condition": {
            "n_measured": n_measured,
            "criterion": criterion.kind,
            "criterion_seed": criterion.seed,
            "k": k,
            "measured_indices": list(measured.indices),
            "seed": train_config.seed,
        },
        "methods": {},
    }
    for method in methods:
        per_subject = {sid: _summary_of(rep) for sid, rep in reports[method].items()}
        mean = {
            key: float(np.mean([row[key] for row in per_subject.values()]))
            for key in ("itd_error_us", "ild_error_db", "lsd_db")
        }
        summary["methods"][method] = {"per_subject": per_subject, "mean": mean}
        method_dir = out_dir / "reports" / method
        method_dir.mkdir(parents=True, exist_ok=True)
        for sid, rep in reports[method].items():
            (method_dir / f"{sid}.json").write_text(rep.to_json())

    (out_dir / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True))
    lines = ["method,itd_error_us,ild_error_db,lsd_db"]
    for method in methods:
        mean = summary["methods"][method]["mean"]
        lines.append(
            f"{method},{mean['itd_error_us']!r},{mean['ild_error_db']!r},{mean['lsd_db']!r}"
        )
    (out_dir / "summary.csv").write_text("\n".join(lines) + "\n")

    manifest = {
        "version": __version__,
        "ranf_config": ranf_config.to_dict(),
        "train_config": train_config.to_dict(),
        "condition": summary["condition"],
        "split": {
            "pretrain_ids": list(split.pretrain_ids),
            "validation_ids": list(split.validation_ids),
            "eval_ids": list(split.eval_ids),
        },
        "retrievals": retrieval_records,
        "adapt_final_losses": {sid: losses[-1] if losses else None
                               for sid, losses in adapt_losses.items()},
        "best_val_loss": pre.best_val_loss,
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return summary
