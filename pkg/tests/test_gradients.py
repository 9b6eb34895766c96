"""Finite-difference gradient checks for every layer and the full loss.

Everything runs in float64 with central differences (step 1e-5, relative
tolerance 1e-4).  Inputs are seeded random small shapes; adapter vectors
are randomized first so their gradients are non-trivial.
"""

import pytest
import torch

from ranfup import training
from ranfup.model import RanfNet, TacBlock, CoreBlock
from ranfup.nn import LoraFc

from conftest import small_ranf_config
from helpers import central_difference_check

torch.set_num_threads(1)


def randomize_adapters(module, seed=0):
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for layer in module.modules():
            if isinstance(layer, LoraFc):
                for table in (layer.u, layer.v):
                    for param in table.values():
                        param.copy_(
                            torch.randn(param.shape, generator=gen, dtype=param.dtype)
                        )


def projection_objective(forward, out_seed=0):
    """Scalar loss: random fixed projection of the module output."""
    probe = {}

    def objective():
        out = forward()
        if "w" not in probe:
            gen = torch.Generator().manual_seed(out_seed)
            probe["w"] = torch.randn(out.shape, generator=gen, dtype=out.dtype)
        return (out * probe["w"]).sum()

    return objective


def test_lora_fc_gradients_scalar_v():
    torch.manual_seed(0)
    layer = LoraFc(5, 4)
    gen = torch.Generator().manual_seed(1)
    for i in range(2):
        layer.add_u(i)
        layer.add_v(i, gen)
    layer.double()
    randomize_adapters(layer)
    x = torch.randn(3, 5, dtype=torch.float64)
    objective = projection_objective(lambda: layer(x, u_index=0, v_indices=1))
    params = [layer.weight, layer.bias, layer.u["0"], layer.v["1"]]
    worst = central_difference_check(objective, params)
    assert worst < 1e-4


def test_lora_fc_gradients_sequence_v():
    torch.manual_seed(0)
    layer = LoraFc(5, 4)
    gen = torch.Generator().manual_seed(1)
    for i in range(3):
        layer.add_u(i)
        layer.add_v(i, gen)
    layer.double()
    randomize_adapters(layer)
    x = torch.randn(3, 2, 5, dtype=torch.float64)
    objective = projection_objective(
        lambda: layer(x, u_index=2, v_indices=[0, 1, 2])
    )
    params = [layer.weight, layer.u["2"], layer.v["0"], layer.v["1"], layer.v["2"]]
    worst = central_difference_check(objective, params)
    assert worst < 1e-4


def test_tac_block_gradients():
    torch.manual_seed(0)
    block = TacBlock(channels=6, hidden=3)
    gen = torch.Generator().manual_seed(1)
    for i in range(3):
        block.merge.add_u(i)
        block.merge.add_v(i, gen)
    block.double()
    randomize_adapters(block)
    x = torch.randn(2, 3, 4, 6, dtype=torch.float64)  # [K, D, T, C]
    objective = projection_objective(lambda: block(x, 0, [1, 2]))
    params = [
        p for n, p in block.named_parameters()
        if not n.startswith("merge.u.") and not n.startswith("merge.v.")
    ]
    params += [block.merge.u["0"], block.merge.v["1"], block.merge.v["2"]]
    worst = central_difference_check(objective, params)
    assert worst < 1e-4


def test_core_block_gradients_include_lstm():
    torch.manual_seed(0)
    block = CoreBlock(channels=6, lstm_hidden=3, tac_hidden=3)
    gen = torch.Generator().manual_seed(1)
    for i in range(2):
        block.tac.merge.add_u(i)
        block.tac.merge.add_v(i, gen)
    block.double()
    randomize_adapters(block)
    x = torch.randn(2, 2, 5, 6, dtype=torch.float64)
    objective = projection_objective(lambda: block(x, 0, [0, 1]))
    params = [
        p for n, p in block.named_parameters()
        if not n.startswith("tac.merge.u.") and not n.startswith("tac.merge.v.")
    ]
    params += [block.tac.merge.u["0"], block.tac.merge.v["0"], block.tac.merge.v["1"]]
    worst = central_difference_check(objective, params, max_entries=8)
    assert worst < 1e-4


def full_model_loss_check(k, max_entries=6):
    config = small_ranf_config(hrir_length=64, channels=6, lstm_hidden=3,
                               conv_channels=(2, 4), tac_hidden=3, rff_features=4,
                               itd_head_hidden=6)
    net = RanfNet(config)
    for i in range(6):
        net.register_subject(f"S{i}")
    net.double()
    randomize_adapters(net)
    n_dirs, n_bins = 2, config.n_freq_bins
    gen = torch.Generator().manual_seed(99)
    mags = torch.randn(n_dirs, k, n_bins, 2, generator=gen, dtype=torch.float64) * 5.0
    itds = torch.randn(n_dirs, k, generator=gen, dtype=torch.float64) * 10.0
    dirs = torch.randn(n_dirs, 3, generator=gen, dtype=torch.float64)
    dirs = dirs / dirs.norm(dim=1, keepdim=True)
    retrieved = list(range(1, k + 1))
    # Targets sit near the initial predictions: the loss value stays small,
    # which keeps finite-difference cancellation noise inside the tolerance,
    # while the normalized LSD and hinge gradients keep their usual scale.
    with torch.no_grad():
        mag0, itd0 = net(mags, itds, dirs, 0, retrieved)
    true_mag = mag0 + torch.randn(*mag0.shape, generator=gen, dtype=torch.float64) * 0.5
    signs = torch.where(
        torch.rand(n_dirs, generator=gen) > 0.5, 1.0, -1.0
    ).to(torch.float64)
    true_itd = itd0 + signs * (1.0 + torch.rand(n_dirs, generator=gen).double())

    def objective():
        mag_hat, itd_hat = net(mags, itds, dirs, 0, retrieved)
        return training.sample_loss(mag_hat, itd_hat, true_mag, true_itd)

    params = list(net.shared_parameters())
    params += net.target_parameters("S0")
    for i in retrieved:
        params += net.retrieved_parameters(f"S{i}")
    worst = central_difference_check(objective, params, max_entries=max_entries)
    return worst


@pytest.mark.parametrize("k", [1, 2, 5])
def test_full_model_loss_gradients(k):
    worst = full_model_loss_check(k)
    assert worst < 1e-4
