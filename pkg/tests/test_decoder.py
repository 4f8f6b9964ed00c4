import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from priordistill.decoder import (
    Decoder,
    DecoderParams,
    DecoderSpec,
    buffer_count,
    build_decoder,
    decode,
    halving_schedule,
    param_count,
    preset,
    state_entries,
)
from priordistill.errors import ConfigError, ShapeError


def module_count(spec):
    return sum(p.numel() for p in Decoder(spec).parameters())


@pytest.mark.parametrize(
    "size, shape, target",
    [("S", (32, 32, 3), 0.75e6), ("S", (64, 64, 3), 0.75e6), ("M", (32, 32, 3), 5.7e6), ("L", (32, 32, 3), 6.3e6)],
)
def test_presets_land_near_reference_sizes(size, shape, target):
    spec = preset(size, shape)
    assert param_count(spec) == module_count(spec)
    assert abs(param_count(spec) - target) <= 0.1 * target


def test_s_preset_block_counts():
    assert preset("S", (32, 32, 3)).block_count == 5
    assert preset("S", (64, 64, 3)).block_count == 6
    assert preset("M", (32, 32, 3)).block_count == 4


@settings(max_examples=40, deadline=None)
@given(
    st.integers(1, 16),
    st.integers(1, 8),
    st.lists(st.integers(1, 6), min_size=1, max_size=3),
    st.integers(0, 1),
    st.sampled_from([1, 3]),
    st.sampled_from([1, 3]),
)
def test_closed_form_counts_match_module(d, k, channels, extra, out_c, head):
    side = 2 ** (len(channels) + extra)
    spec = DecoderSpec(d, k, tuple(channels), (side, side, out_c), head_kernel=head)
    dec = Decoder(spec)
    assert param_count(spec) == sum(p.numel() for p in dec.parameters())
    assert buffer_count(spec) == sum(v.numel() for n, v in dec.state_dict().items() if "running" in n)
    assert dec(torch.randn(2, d)).shape == (2, out_c, side, side)


def test_inconsistent_arithmetic_rejected():
    with pytest.raises(ConfigError):
        DecoderSpec(4, 4, (4, 4, 4), (12, 12, 3)).validate()
    with pytest.raises(ConfigError):
        DecoderSpec(4, 4, (4,) * 6, (32, 32, 3)).validate()
    with pytest.raises(ConfigError):
        DecoderSpec(4, 4, (4,), (8, 4, 3)).validate()
    with pytest.raises(ConfigError):
        preset("XL")


def test_latent_shape_checked():
    dec = build_decoder(DecoderSpec(4, 2, (2,), (4, 4, 1)), 0)
    with pytest.raises(ShapeError):
        dec(torch.zeros(2, 5))


def test_halving_schedule():
    assert halving_schedule(256, 5, 32) == (128, 64, 32, 32, 32)


def test_build_is_seeded_and_isolated():
    spec = DecoderSpec(4, 2, (2,), (4, 4, 1))
    state = torch.random.get_rng_state()
    a, b = build_decoder(spec, 3), build_decoder(spec, 3)
    assert torch.equal(torch.random.get_rng_state(), state)
    assert all(torch.equal(p, q) for p, q in zip(a.parameters(), b.parameters()))


def test_params_round_trip_includes_running_stats():
    spec = DecoderSpec(4, 2, (3, 2), (8, 8, 1))
    a = build_decoder(spec, 0)
    decode(a, torch.randn(6, 4), train_mode=True)  # move running stats
    params = DecoderParams.from_decoder(a)
    assert params.flat.size == param_count(spec) + buffer_count(spec)
    b = build_decoder(spec, 1)
    params.load_into(b)
    for (n1, v1), (n2, v2) in zip(state_entries(a), state_entries(b)):
        assert n1 == n2 and torch.equal(v1, v2)
    assert not any("num_batches_tracked" in n for n, _ in state_entries(a))


def test_spec_dict_round_trip():
    spec = preset("S", (32, 32, 3))
    d = spec.to_dict()
    assert d["kernel"] == 4 and d["stride"] == 2 and d["padding"] == 1
    assert DecoderSpec.from_dict(d) == spec
