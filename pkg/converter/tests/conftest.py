"""Fixture SOFA files built directly with h5py."""

import h5py
import numpy as np
import pytest

FIXTURE_POSITIONS = np.array([[0.0, 0.0, 1.5], [90.0, 0.0, 1.5]])
FIXTURE_LENGTH = 16


def write_sofa(
    path,
    ir,
    positions=FIXTURE_POSITIONS,
    sample_rate=48000.0,
    convention="SimpleFreeFieldHRIR",
    receiver_y=(0.09, -0.09),
):
    ir = np.asarray(ir)
    with h5py.File(path, "w") as f:
        f.attrs["Conventions"] = "SOFA"
        f.attrs["SOFAConventions"] = convention
        f.attrs["DataType"] = "FIR"
        f.create_dataset("Data.IR", data=ir)
        rate = f.create_dataset(
            "Data.SamplingRate", data=np.asarray([sample_rate], dtype=np.float64)
        )
        rate.attrs["Units"] = "hertz"
        pos = f.create_dataset(
            "SourcePosition", data=np.asarray(positions, dtype=np.float64)
        )
        pos.attrs["Type"] = "spherical"
        pos.attrs["Units"] = "degree, degree, metre"
        ears = np.array(
            [[0.0, receiver_y[0], 0.0], [0.0, receiver_y[1], 0.0]]
        )[:, :, None]
        receivers = f.create_dataset("ReceiverPosition", data=ears)
        receivers.attrs["Type"] = "cartesian"
        receivers.attrs["Units"] = "metre"


def fixture_ir(seed, n_directions=2, length=FIXTURE_LENGTH):
    rng = np.random.default_rng(seed)
    return rng.standard_normal((n_directions, 2, length))


@pytest.fixture
def sofa_dir(tmp_path):
    # Three subjects including the default exclusion; realistic file names.
    root = tmp_path / "sofa"
    root.mkdir()
    for seed, sid in enumerate(("P0001", "P0002", "P0079")):
        write_sofa(root / f"{sid}_FreeFieldComp_48kHz.sofa", fixture_ir(seed))
    return root
