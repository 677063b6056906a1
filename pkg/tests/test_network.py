import pytest
import torch

from colorista.encoder import FeatureEncoder, random_encoder_arrays
from colorista.network import (
    NetworkConfig,
    StyleTransferNetwork,
    removal_config,
    restoration_config,
)
from colorista.temporal import ConfigurationError, FlowField, zero_flow

PRE = {"mean": [0.485, 0.456, 0.406], "std": [0.229, 0.224, 0.225]}


@pytest.fixture(scope="module")
def encoder():
    enc = FeatureEncoder(random_encoder_arrays(seed=0), PRE)
    enc.eval()
    return enc


def small(**kw):
    kw.setdefault("decoder_widths", (16, 24, 32, 48))
    kw.setdefault("lstm_hidden", (16, 24, 32, 48))
    return kw


def test_config_validation_and_round_trip():
    cfg = NetworkConfig(variant="restoration", active_scales=(3, 1, 2), whiten_count=2)
    assert cfg.active_scales == (1, 2, 3)
    again = NetworkConfig.from_json(cfg.to_json())
    assert again == cfg

    with pytest.raises(ValueError):
        NetworkConfig(variant="both")
    with pytest.raises(ValueError):
        NetworkConfig(active_scales=(2, 3))  # missing scale 1
    with pytest.raises(ValueError):
        NetworkConfig(active_scales=())
    with pytest.raises(ValueError):
        NetworkConfig(whiten_count=0)
    with pytest.raises(ValueError):
        NetworkConfig(consecutive_count=4)
    with pytest.raises(ConfigurationError):
        NetworkConfig(temporal_mode="sometimes")


def test_removal_variant_forces_no_recurrence():
    cfg = NetworkConfig(variant="removal", temporal_mode="full")
    assert cfg.temporal_mode == "no_recurrence"


def test_removal_has_no_recurrent_units(encoder):
    net = StyleTransferNetwork(removal_config(**small()), encoder, seed=0)
    assert len(net.cells) == 0
    rest = StyleTransferNetwork(restoration_config(**small()), encoder, seed=0)
    assert set(rest.cells.keys()) == {"1", "2", "3", "4"}


def test_removal_forward_shape_and_range(encoder):
    net = StyleTransferNetwork(removal_config(**small()), encoder, seed=1)
    g = torch.Generator().manual_seed(1)
    frame = torch.rand(3, 64, 64, generator=g)
    style = torch.rand(3, 64, 64, generator=g)
    out = net.forward_removal(frame, style)
    assert out.shape == (3, 64, 64)
    assert torch.isfinite(out).all()
    assert out.min() >= 0 and out.max() <= 1


def test_removal_forward_deterministic(encoder):
    net = StyleTransferNetwork(removal_config(**small()), encoder, seed=2)
    g = torch.Generator().manual_seed(2)
    frame = torch.rand(3, 64, 64, generator=g)
    style = torch.rand(3, 64, 64, generator=g)
    assert torch.equal(net.forward_removal(frame, style), net.forward_removal(frame, style))


def test_seeded_construction_reproducible(encoder):
    a = StyleTransferNetwork(removal_config(**small()), encoder, seed=7)
    b = StyleTransferNetwork(removal_config(**small()), encoder, seed=7)
    for pa, pb in zip(a.trainable_parameters(), b.trainable_parameters()):
        assert torch.equal(pa, pb)


def test_shape_invariance_across_sizes(encoder):
    net = StyleTransferNetwork(removal_config(**small()), encoder, seed=3)
    g = torch.Generator().manual_seed(3)
    style = torch.rand(3, 64, 64, generator=g)
    for hw in (64, 128):
        frame = torch.rand(3, hw, hw, generator=g)
        assert net.forward_removal(frame, style).shape == (3, hw, hw)
    # rectangular too
    frame = torch.rand(3, 48, 80, generator=g)
    assert net.forward_removal(frame, style).shape == (3, 48, 80)


def test_restoration_first_frame_equals_zero_states(encoder):
    net = StyleTransferNetwork(restoration_config(**small()), encoder, seed=4)
    g = torch.Generator().manual_seed(4)
    frame = torch.rand(3, 64, 64, generator=g)
    style = torch.rand(3, 64, 64, generator=g)
    out_none, _ = net.forward_restoration(frame, style, prev_states=None)
    zeros = {
        s: net.cells[str(s)].initial_state(64 // f, 64 // f)
        for s, f in zip((1, 2, 3, 4), (1, 2, 4, 8))
    }
    out_zero, _ = net.forward_restoration(frame, style, prev_states=zeros)
    assert torch.equal(out_none, out_zero)


def test_restoration_threads_states(encoder):
    net = StyleTransferNetwork(restoration_config(**small()), encoder, seed=5)
    g = torch.Generator().manual_seed(5)
    frames = [torch.rand(3, 64, 64, generator=g) for _ in range(3)]
    style = torch.rand(3, 64, 64, generator=g)
    states = None
    outs = []
    for i, frame in enumerate(frames):
        flow = None if i == 0 else zero_flow(64, 64)
        out, states = net.forward_restoration(frame, style, prev_states=states, flow=flow)
        outs.append(out)
        for s in (1, 2, 3, 4):
            assert torch.isfinite(states[s].hidden).all()
            assert torch.isfinite(states[s].cell).all()
    # repeated runs stay bitwise deterministic
    states2 = None
    for i, frame in enumerate(frames):
        flow = None if i == 0 else zero_flow(64, 64)
        out2, states2 = net.forward_restoration(frame, style, prev_states=states2, flow=flow)
    assert torch.equal(outs[-1], out2)


def test_no_recurrence_ignores_history(encoder):
    cfg = restoration_config(temporal_mode="no_recurrence", **small())
    net = StyleTransferNetwork(cfg, encoder, seed=6)
    g = torch.Generator().manual_seed(6)
    frame = torch.rand(3, 64, 64, generator=g)
    style = torch.rand(3, 64, 64, generator=g)

    # two very different histories
    _, hist_a = net.forward_restoration(torch.rand(3, 64, 64, generator=g), style)
    _, hist_b = net.forward_restoration(torch.zeros(3, 64, 64), style)
    out_a, _ = net.forward_restoration(frame, style, prev_states=hist_a)
    out_b, _ = net.forward_restoration(frame, style, prev_states=hist_b)
    out_c, _ = net.forward_restoration(frame, style, prev_states=None)
    assert torch.equal(out_a, out_b)
    assert torch.equal(out_a, out_c)


def test_no_flow_mode_rejects_flow(encoder):
    cfg = restoration_config(temporal_mode="no_flow", **small())
    net = StyleTransferNetwork(cfg, encoder, seed=7)
    g = torch.Generator().manual_seed(7)
    frame = torch.rand(3, 64, 64, generator=g)
    style = torch.rand(3, 64, 64, generator=g)
    out, states = net.forward_restoration(frame, style)
    with pytest.raises(ConfigurationError):
        net.forward_restoration(frame, style, prev_states=states, flow=zero_flow(64, 64))


def test_full_mode_warps_state_with_flow(encoder):
    net = StyleTransferNetwork(restoration_config(**small()), encoder, seed=8)
    g = torch.Generator().manual_seed(8)
    frame = torch.rand(3, 64, 64, generator=g)
    style = torch.rand(3, 64, 64, generator=g)
    _, states = net.forward_restoration(frame, style)
    shift = FlowField(torch.stack([torch.full((64, 64), 8.0), torch.zeros(64, 64)]))
    out_zero, _ = net.forward_restoration(frame, style, prev_states=states, flow=zero_flow(64, 64))
    out_shift, _ = net.forward_restoration(frame, style, prev_states=states, flow=shift)
    assert (out_zero - out_shift).abs().max() > 0


def test_flow_grid_mismatch_raises(encoder):
    net = StyleTransferNetwork(restoration_config(**small()), encoder, seed=9)
    g = torch.Generator().manual_seed(9)
    frame = torch.rand(3, 64, 64, generator=g)
    style = torch.rand(3, 64, 64, generator=g)
    _, states = net.forward_restoration(frame, style)
    with pytest.raises((ConfigurationError, ValueError)):
        net.forward_restoration(frame, style, prev_states=states, flow=zero_flow(32, 32))


def test_active_scales_ablation_changes_output(encoder):
    g = torch.Generator().manual_seed(10)
    frame = torch.rand(3, 64, 64, generator=g)
    style = torch.rand(3, 64, 64, generator=g)
    full = StyleTransferNetwork(removal_config(**small()), encoder, seed=10)
    slim = StyleTransferNetwork(removal_config(active_scales=(1, 2), **small()), encoder, seed=10)
    diff = (full.forward_removal(frame, style) - slim.forward_removal(frame, style)).abs().max()
    assert diff > 1e-3


def test_decoder_missing_scale_raises(encoder):
    net = StyleTransferNetwork(removal_config(**small()), encoder, seed=11)
    g = torch.Generator().manual_seed(11)
    feats = encoder.encode(torch.rand(3, 64, 64, generator=g))
    style_feats = encoder.encode(torch.rand(3, 64, 64, generator=g))
    transformed = net.transform_features(feats, style_feats)
    del transformed[3]
    with pytest.raises(ConfigurationError):
        net.decode(transformed)


def test_decode_zero_features_finite(encoder):
    net = StyleTransferNetwork(removal_config(**small()), encoder, seed=12)
    zeros = {
        s: torch.zeros(c, 64 // f, 64 // f)
        for s, c, f in zip((1, 2, 3, 4), (64, 128, 256, 512), (1, 2, 4, 8))
    }
    out = net.decode(zeros)
    assert out.shape == (3, 64, 64)
    assert torch.isfinite(out).all()


def test_variant_parameter_sets_are_disjoint(encoder):
    rem = StyleTransferNetwork(removal_config(**small()), encoder, seed=13)
    res = StyleTransferNetwork(restoration_config(**small()), encoder, seed=13)
    rem_ids = {id(p) for p in rem.trainable_parameters()}
    res_ids = {id(p) for p in res.trainable_parameters()}
    assert rem_ids.isdisjoint(res_ids)
    # and the frozen encoder contributes nothing trainable to either
    assert all(id(b) not in rem_ids for b in encoder.buffers())


def test_full_width_decoder_parameter_scale(encoder):
    net = StyleTransferNetwork(restoration_config(), encoder, seed=14)
    n = net.parameter_count()
    # full-width restoration network sits in the tens of millions
    assert 10_000_000 < n < 200_000_000


def test_style_stats_injection_matches_style_image(encoder):
    net = StyleTransferNetwork(removal_config(**small()), encoder, seed=15)
    g = torch.Generator().manual_seed(15)
    frame = torch.rand(3, 64, 64, generator=g)
    style = torch.rand(3, 64, 64, generator=g)
    stats = net.style_statistics(style)
    a = net.forward_removal(frame, style)
    b = net.forward_removal(frame, None, style_stats=stats)
    assert torch.allclose(a, b, atol=1e-6)


def test_stats_channel_counts_layout(encoder):
    net = StyleTransferNetwork(
        removal_config(consecutive_count=2, active_scales=(1, 2), **small()), encoder, seed=16
    )
    assert net.stats_channel_counts() == [128, 128, 256, 256]


def test_end_to_end_gradient_reaches_decoder(encoder):
    net = StyleTransferNetwork(removal_config(**small()), encoder, seed=17)
    g = torch.Generator().manual_seed(17)
    frame = torch.rand(3, 32, 32, generator=g)
    style = torch.rand(3, 32, 32, generator=g)
    out = net.forward_removal(frame, style)
    out.mean().backward()
    grads = [p.grad for p in net.trainable_parameters()]
    assert all(gr is not None for gr in grads)
    assert sum(gr.abs().sum() for gr in grads) > 0
