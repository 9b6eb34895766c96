"""Retrieval-augmented neural field for HRTF magnitude and ITD prediction.

For one desired direction the network receives the magnitude spectra and
ITDs of K retrieved subjects at that direction.  Each retrieved magnitude
is encoded by a strided convolution stack into a short token sequence, and
two conditioning tokens (random Fourier features of the direction and the
retrieved ITD, passed through a linear map) are attached to both ends.
A stack of core blocks alternates a bidirectional LSTM along the token
axis with a transform-average-concatenate exchange across the K retrieved
sequences; the exchange layer carries per-subject rank-one adapters whose
``u`` side belongs to the target and whose ``v`` side belongs to each
retrieved subject.  After averaging the K sequences, the middle tokens are
decoded back to a dB magnitude spectrum and the end tokens drive a scalar
correction added to the mean retrieved ITD.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn

from . import checkpoint as ckpt_io
from . import dsp, retrieval
from .bundle import Direction, HrirSet, unit_vectors
from .errors import CheckpointFormatError, DataError
from .nn import LoraFc, RffEncoder

#: dB values are divided by this before entering the network and the
#: magnitude head output is multiplied by it, keeping activations near unity.
DB_SCALE = 20.0

SIDECAR_VERSION = 1


@dataclass(frozen=True)
class RanfConfig:
    """Architecture hyperparameters; defaults give about 0.84M shared weights."""

    sample_rate: int = 48000
    hrir_length: int = 256
    channels: int = 128
    n_blocks: int = 4
    lstm_hidden: int = 64
    conv_channels: tuple[int, ...] = (16, 32, 64)
    n_post_layers: int = 2
    k_retrieved: int = 5
    tac_hidden: int = 64
    rff_features: int = 64
    rff_sigma: float = 1.0
    n_itd_head_layers: int = 2
    itd_head_hidden: int = 128
    seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "conv_channels", tuple(self.conv_channels))
        for field in (
            "sample_rate",
            "hrir_length",
            "channels",
            "n_blocks",
            "lstm_hidden",
            "n_post_layers",
            "k_retrieved",
            "tac_hidden",
            "rff_features",
            "n_itd_head_layers",
            "itd_head_hidden",
        ):
            if getattr(self, field) < 1:
                raise DataError(f"{field} must be positive")
        if not self.conv_channels:
            raise DataError("conv_channels must name at least one width")
        if self.rff_sigma <= 0:
            raise DataError("rff_sigma must be positive")

    @property
    def n_freq_bins(self) -> int:
        return dsp.next_pow2(self.hrir_length) // 2 + 1

    def to_dict(self) -> dict:
        data = asdict(self)
        data["conv_channels"] = list(self.conv_channels)
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "RanfConfig":
        data = dict(data)
        data["conv_channels"] = tuple(data.get("conv_channels", (16, 32, 64)))
        return cls(**data)


def _stable_seed(subject_id: str, base: int) -> int:
    digest = hashlib.sha256(subject_id.encode("utf-8")).digest()
    return (int.from_bytes(digest[:8], "little") + base) % (2**63)


class TacBlock(nn.Module):
    """Transform-average-concatenate exchange across retrieved sequences.

    Position-wise: each sequence is transformed, the transforms are
    averaged over the K sequences, and the pair is concatenated and mapped
    back to the channel width by an adapter-carrying linear layer.  Applied
    to ``[K, ..., channels]`` with a residual connection.
    """

    def __init__(self, channels: int, hidden: int):
        super().__init__()
        self.transform = nn.Linear(channels, hidden)
        self.average = nn.Linear(channels, hidden)
        self.merge = LoraFc(2 * hidden, channels)
        self.norm = nn.LayerNorm(channels)

    def forward(
        self, x: torch.Tensor, u_index: int | None, v_indices: Sequence[int] | None
    ) -> torch.Tensor:
        a = nn.functional.gelu(self.transform(x))
        m = nn.functional.gelu(self.average(x)).mean(dim=0, keepdim=True)
        merged = torch.cat([a, m.expand_as(a)], dim=-1)
        out = self.merge(merged, u_index=u_index, v_indices=v_indices)
        return x + self.norm(out)


class CoreBlock(nn.Module):
    """Within-sequence recurrence followed by across-sequence exchange."""

    def __init__(self, channels: int, lstm_hidden: int, tac_hidden: int):
        super().__init__()
        self.lstm = nn.LSTM(
            channels, lstm_hidden, batch_first=True, bidirectional=True
        )
        self.project = nn.Linear(2 * lstm_hidden, channels)
        self.tac = TacBlock(channels, tac_hidden)

    def forward(
        self, x: torch.Tensor, u_index: int | None, v_indices: Sequence[int] | None
    ) -> torch.Tensor:
        k, d, t, c = x.shape
        seq, _ = self.lstm(x.reshape(k * d, t, c))
        x = x + self.project(seq).reshape(k, d, t, c)
        return self.tac(x, u_index, v_indices)


class RanfNet(nn.Module):
    """The full upsampling network plus its subject adapter registry."""

    def __init__(self, config: RanfConfig):
        super().__init__()
        self.config = config
        self.subject_index: dict[str, int] = {}
        with torch.random.fork_rng():
            torch.manual_seed(config.seed)
            self._build(config)

    def _build(self, config: RanfConfig) -> None:
        widths = (2, *config.conv_channels, config.channels)
        lengths = [config.n_freq_bins]
        encoder: list[nn.Module] = []
        for cin, cout in zip(widths[:-1], widths[1:]):
            encoder.append(nn.Conv1d(cin, cout, kernel_size=5, stride=2, padding=2))
            encoder.append(nn.PReLU())
            lengths.append((lengths[-1] + 1) // 2)
        self.encoder = nn.Sequential(*encoder)
        self.n_tokens = lengths[-1]

        decoder: list[nn.Module] = []
        for i, (cin, cout) in enumerate(zip(widths[::-1][:-1], widths[::-1][1:])):
            # output_padding restores the exact pre-stride length.
            out_pad = lengths[-2 - i] - (2 * lengths[-1 - i] - 1)
            decoder.append(
                nn.ConvTranspose1d(
                    cin, cout, kernel_size=5, stride=2, padding=2,
                    output_padding=out_pad,
                )
            )
            if i < len(widths) - 2:
                decoder.append(nn.PReLU())
        self.decoder = nn.Sequential(*decoder)

        self.cond_encoder = RffEncoder(
            4, config.rff_features, config.rff_sigma, seed=config.seed
        )
        self.cond_fc = nn.Linear(self.cond_encoder.out_dim, 2 * config.channels)
        self.blocks = nn.ModuleList(
            CoreBlock(config.channels, config.lstm_hidden, config.tac_hidden)
            for _ in range(config.n_blocks)
        )
        self.post_mag = nn.ModuleList(
            LoraFc(config.channels, config.channels)
            for _ in range(config.n_post_layers)
        )
        self.post_itd = nn.ModuleList(
            LoraFc(config.channels, config.channels)
            for _ in range(config.n_post_layers)
        )
        self.dir_encoder = RffEncoder(
            3, config.rff_features, config.rff_sigma, seed=config.seed + 1
        )
        head: list[nn.Module] = []
        width = config.channels + self.dir_encoder.out_dim
        for _ in range(config.n_itd_head_layers - 1):
            head.append(nn.Linear(width, config.itd_head_hidden))
            head.append(nn.GELU())
            width = config.itd_head_hidden
        head.append(nn.Linear(width, 1))
        self.itd_head = nn.Sequential(*head)

    # -- subject registry -------------------------------------------------

    def _tac_lora_layers(self) -> list[LoraFc]:
        return [block.tac.merge for block in self.blocks]

    def _post_lora_layers(self) -> list[LoraFc]:
        return list(self.post_mag) + list(self.post_itd)

    def _lora_layers(self) -> list[LoraFc]:
        return self._tac_lora_layers() + self._post_lora_layers()

    def register_subject(self, subject_id: str) -> int:
        """Create adapter vectors for a subject; idempotent."""
        if subject_id in self.subject_index:
            return self.subject_index[subject_id]
        index = len(self.subject_index)
        self.subject_index[subject_id] = index
        generator = torch.Generator().manual_seed(
            _stable_seed(subject_id, self.config.seed)
        )
        for layer in self._lora_layers():
            layer.add_u(index)
            layer.add_v(index, generator)
        return index

    def index_of(self, subject_id: str) -> int:
        try:
            return self.subject_index[subject_id]
        except KeyError:
            raise DataError(f"subject {subject_id!r} is not registered") from None

    # -- parameter partitions ---------------------------------------------

    def _adapter_param_ids(self) -> set[int]:
        ids = set()
        for layer in self._lora_layers():
            for table in (layer.u, layer.v):
                for param in table.values():
                    ids.add(id(param))
        return ids

    def shared_parameters(self) -> list[nn.Parameter]:
        adapter_ids = self._adapter_param_ids()
        return [p for p in self.parameters() if id(p) not in adapter_ids]

    def target_parameters(self, subject_id: str) -> list[nn.Parameter]:
        """All vectors owned by a target: every u, plus post-layer v."""
        key = str(self.index_of(subject_id))
        params = [layer.u[key] for layer in self._lora_layers()]
        params += [layer.v[key] for layer in self._post_lora_layers()]
        return params

    def retrieved_parameters(self, subject_id: str) -> list[nn.Parameter]:
        """Vectors consulted when this subject is retrieved: exchange-layer v."""
        key = str(self.index_of(subject_id))
        return [layer.v[key] for layer in self._tac_lora_layers()]

    def shared_parameter_count(self) -> int:
        return sum(p.numel() for p in self.shared_parameters())

    # -- forward ------------------------------------------------------------

    def forward(
        self,
        mags_db: torch.Tensor,
        itds: torch.Tensor,
        directions: torch.Tensor,
        target_index: int | None,
        retrieved_indices: Sequence[int] | None,
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Predict dB magnitudes ``[D, F, 2]`` and ITDs ``[D]`` in samples.

        ``mags_db`` is ``[D, K, F, 2]`` retrieved magnitudes in dB, ``itds``
        is ``[D, K]`` retrieved ITDs in samples, ``directions`` is ``[D, 3]``
        unit vectors.  Any ``K >= 1`` is accepted regardless of the training
        K.  Passing ``None`` adapter indices disables the rank-one updates,
        which is the state of an unadapted subject.
        """
        cfg = self.config
        n_dirs, k, n_bins, _ = mags_db.shape
        if k < 1 or n_bins != cfg.n_freq_bins:
            raise DataError(
                f"expected [D, K >= 1, {cfg.n_freq_bins}, 2] magnitudes, "
                f"got {tuple(mags_db.shape)}"
            )
        if retrieved_indices is not None and len(retrieved_indices) != k:
            raise DataError("need one retrieved index per retrieved sequence")

        x = (mags_db / DB_SCALE).permute(0, 1, 3, 2).reshape(n_dirs * k, 2, n_bins)
        tokens = self.encoder(x).permute(0, 2, 1)
        tokens = tokens.reshape(n_dirs, k, self.n_tokens, cfg.channels)
        tokens = tokens.transpose(0, 1)

        tau_ms = (itds / cfg.sample_rate * 1000.0).T.unsqueeze(-1)
        cond_in = torch.cat(
            [directions.unsqueeze(0).expand(k, n_dirs, 3), tau_ms], dim=-1
        )
        cond = self.cond_fc(self.cond_encoder(cond_in))
        head = cond[..., : cfg.channels].unsqueeze(2)
        tail = cond[..., cfg.channels :].unsqueeze(2)
        seq = torch.cat([head, tokens, tail], dim=2)

        for block in self.blocks:
            seq = block(seq, target_index, retrieved_indices)
        merged = seq.mean(dim=0)

        mag = merged[:, 1:-1, :]
        for i, layer in enumerate(self.post_mag):
            mag = layer(mag, u_index=target_index, v_indices=target_index)
            if i < len(self.post_mag) - 1:
                mag = nn.functional.gelu(mag)
        mag = self.decoder(mag.permute(0, 2, 1)).permute(0, 2, 1) * DB_SCALE

        ends = merged[:, 0, :] + merged[:, -1, :]
        for i, layer in enumerate(self.post_itd):
            ends = layer(ends, u_index=target_index, v_indices=target_index)
            if i < len(self.post_itd) - 1:
                ends = nn.functional.gelu(ends)
        head_in = torch.cat([ends, self.dir_encoder(directions)], dim=-1)
        delta = self.itd_head(head_in).squeeze(-1)
        itd = delta + itds.mean(dim=1)
        return mag, itd


# -- persistence --------------------------------------------------------------


def sidecar_path(path: str | Path) -> Path:
    return Path(str(path) + ".json")


def save_state(
    path: str | Path,
    config: RanfConfig,
    subject_index: dict[str, int],
    state: dict[str, torch.Tensor],
    extra: dict | None = None,
) -> None:
    """Write a state dict plus a JSON sidecar describing config and subjects."""
    tensors = {name: tensor.detach().cpu().numpy() for name, tensor in state.items()}
    ckpt_io.save_tensors(path, tensors)
    sidecar = {
        "format_version": SIDECAR_VERSION,
        "config": config.to_dict(),
        "subjects": dict(subject_index),
    }
    if extra:
        sidecar.update(extra)
    sidecar_path(path).write_text(json.dumps(sidecar, indent=1, sort_keys=True))


def save_model(model: RanfNet, path: str | Path, extra: dict | None = None) -> None:
    save_state(path, model.config, model.subject_index, model.state_dict(), extra)


def load_model(path: str | Path) -> tuple[RanfNet, dict]:
    """Rebuild a model from tensors and sidecar; returns ``(model, sidecar)``."""
    meta_file = sidecar_path(path)
    if not meta_file.is_file():
        raise CheckpointFormatError(f"missing sidecar {meta_file}")
    try:
        sidecar = json.loads(meta_file.read_text())
        config = RanfConfig.from_dict(sidecar["config"])
        subjects = sidecar["subjects"]
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise CheckpointFormatError(f"corrupt sidecar {meta_file}: {exc}") from exc
    if sidecar.get("format_version") != SIDECAR_VERSION:
        raise CheckpointFormatError(
            f"unsupported sidecar version {sidecar.get('format_version')!r}"
        )
    model = RanfNet(config)
    for subject_id in sorted(subjects, key=subjects.get):
        model.register_subject(subject_id)
    if model.subject_index != subjects:
        raise CheckpointFormatError(f"inconsistent subject table in {meta_file}")
    tensors = ckpt_io.load_tensors(path)
    state = {name: torch.from_numpy(arr) for name, arr in tensors.items()}
    model.load_state_dict(state, strict=True)
    return model, sidecar


# -- end-to-end prediction ---------------------------------------------------


def predict_grid(
    model: RanfNet,
    bank: retrieval.FeatureBank,
    retrieved_ids: Sequence[str],
    target_id: str | None,
    direction_indices: Sequence[int] | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Linear magnitudes ``[D, F, 2]`` and integer ITDs ``[D]`` on the grid.

    ``target_id=None`` predicts with adapters disabled (unadapted subject).
    """
    grid = bank.bundle.grid
    if direction_indices is None:
        direction_indices = range(len(grid))
    direction_indices = list(direction_indices)
    mags = []
    itds = []
    for di in direction_indices:
        mag_k, itd_k = retrieval.fetch_features(bank, retrieved_ids, di)
        mags.append(dsp.to_db(mag_k))
        itds.append(itd_k)
    mags_db = torch.from_numpy(np.stack(mags)).float()
    itd_feats = torch.from_numpy(np.stack(itds)).float()
    dirs = torch.from_numpy(
        unit_vectors([grid[di] for di in direction_indices])
    ).float()

    target_index = None if target_id is None else model.index_of(target_id)
    retrieved_indices = (
        None if target_id is None else [model.index_of(r) for r in retrieved_ids]
    )
    model.eval()
    with torch.no_grad():
        mag_db, itd = model(mags_db, itd_feats, dirs, target_index, retrieved_indices)
    mag_linear = dsp.from_db(mag_db.numpy().astype(np.float64))
    return mag_linear, np.round(itd.numpy()).astype(np.int64)


def predict_subject(
    model: RanfNet,
    bank: retrieval.FeatureBank,
    result: retrieval.RetrievalResult,
    direction_indices: Sequence[int] | None = None,
    adapted: bool = True,
) -> HrirSet:
    """Full-grid HRIRs for a retrieval result's target subject."""
    target_id = result.target if adapted else None
    mags, itds = predict_grid(model, bank, result.subjects, target_id, direction_indices)
    return render_hrir_set(
        result.target,
        mags,
        itds,
        model.config.sample_rate,
        model.config.hrir_length,
    )


def render_hrir_set(
    subject_id: str,
    mags: np.ndarray,
    itds: np.ndarray,
    sample_rate: int,
    hrir_length: int,
    base_delay: int = 16,
) -> HrirSet:
    """Minimum-phase HRIRs with integer ITD shifts from predicted features."""
    irs = []
    for mag, itd in zip(mags, itds):
        pair = dsp.min_phase_reconstruct(mag)[:, :hrir_length]
        irs.append(dsp.apply_itd(pair, int(itd), base_delay=base_delay))
    return HrirSet(subject_id, sample_rate, np.stack(irs).astype(np.float32))
