import numpy as np
import pytest
import torch

import scalecomp as sc
from scalecomp.errors import ShapeError
from oracles import finite_difference_check


def test_pyramid_shapes_128():
    enc = sc.PyramidEncoder(channels=32)
    pyr = enc(torch.randn(3, 128, 128))
    assert [tuple(l.shape) for l in pyr.levels] == [
        (32, 32, 32), (32, 16, 16), (32, 8, 8)
    ]
    assert pyr.strides == [4, 8, 16]


def test_forward_deterministic():
    enc = sc.PyramidEncoder(channels=16)
    enc.eval()
    x = torch.randn(3, 64, 64)
    a = enc(x)
    b = enc(x)
    for la, lb in zip(a.levels, b.levels):
        assert torch.equal(la, lb)


def test_indivisible_input_names_stride():
    enc = sc.PyramidEncoder(channels=16)
    with pytest.raises(ShapeError, match="stride 16"):
        enc(torch.randn(3, 100, 128))


def test_channel_equality_enforced():
    with pytest.raises(ShapeError, match="channel"):
        sc.FeaturePyramid(
            levels=[torch.zeros(16, 8, 8), torch.zeros(32, 4, 4)],
            strides=[4, 8],
        )


def test_strides_must_increase():
    with pytest.raises(ShapeError, match="increasing"):
        sc.FeaturePyramid(
            levels=[torch.zeros(8, 8, 8), torch.zeros(8, 4, 4)],
            strides=[8, 4],
        )


def test_batched_and_single_agree():
    enc = sc.PyramidEncoder(channels=16)
    enc.eval()
    x = torch.randn(2, 3, 64, 64)
    batched = enc(x)
    single = enc(x[0])
    for lb, ls in zip(batched.levels, single.levels):
        assert torch.allclose(lb[0], ls, atol=1e-6)


def test_encoder_gradient_matches_finite_differences(rng):
    torch.manual_seed(3)
    enc = sc.PyramidEncoder(channels=8).double()
    enc.eval()  # frozen batch statistics make the forward a pure function
    x = torch.randn(3, 32, 32, dtype=torch.float64)

    def loss():
        pyr = enc(x)
        return sum(lvl.sum() for lvl in pyr.levels)

    params = [p for p in enc.parameters() if p.requires_grad]
    worst = finite_difference_check(loss, params, rng, num_params=6)
    assert worst < 1e-3
