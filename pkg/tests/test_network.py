import numpy as np
import pytest

from posekit import layers as L
from posekit.codec import FlipPairs, flip_average
from posekit.errors import ConfigError, ShapeError
from posekit.gradcheck import _randomize_bn, _randomize_biases, end_to_end_check, tiny_network_config
from posekit.network import (DucHead, FeatureFusion, NetworkConfig, PoseNet, SbnDeconvHead, duc_head,
                             encoder_forward, ffm_fuse, network_forward)
from posekit.tensor import make_rng


def symmetrize(model):
    """Replace every spatial kernel with its left-right symmetric part."""
    for m in model.modules():
        if isinstance(m, (L.Conv2d, L.ConvTranspose2d)):
            w = m.weight.data
            w[...] = 0.5 * (w + w[..., ::-1])


def randomized(cfg, seed=0):
    rng = make_rng(seed)
    net = PoseNet(cfg, rng=rng)
    _randomize_bn(net, rng)
    _randomize_biases(net, rng)
    return net.eval()


class TestConfig:
    def test_defaults(self):
        cfg = NetworkConfig()
        assert cfg.stage_widths == [16, 32, 64] and cfg.blocks == [1, 1, 1] and cfg.strides == [1, 2, 2]
        assert cfg.f == 8 and cfg.aux_weight == 0.5 and cfg.r_fc == 4 and cfg.s == 4

    def test_f_must_match_stride(self):
        with pytest.raises(ConfigError):
            NetworkConfig(f=16)

    @pytest.mark.parametrize("bad", [dict(K=0), dict(head="hrnet"), dict(aux_weight=-1.0),
                                     dict(blocks=[1, 1]), dict(stage_widths=[16, 32, 66])])
    def test_rejects(self, bad):
        with pytest.raises(ConfigError):
            NetworkConfig(**bad)

    def test_text_roundtrip(self, tmp_path):
        cfg = NetworkConfig(K=5, head="sbn", ffm=False, aux_weight=0.0, stage_widths=[8, 16, 32])
        cfg.save(tmp_path / "m.cfg")
        assert NetworkConfig.load(tmp_path / "m.cfg") == cfg

    def test_text_parse_errors(self):
        with pytest.raises(ConfigError):
            NetworkConfig.from_text("bogus = 1\n")
        with pytest.raises(ConfigError):
            NetworkConfig.from_text("K = many\n")
        cfg = NetworkConfig.from_text("# comment\nK = 3  # joints\nffm = off\n")
        assert cfg.K == 3 and cfg.ffm is False


class TestEncoder:
    def test_declared_shapes(self):
        cfg = NetworkConfig()
        deep, taps = encoder_forward(cfg, np.zeros((2, 1, 64, 48)), randomized(cfg))
        assert deep.shape == (2, 64, 8, 6)
        assert taps["conv1"].shape == (2, 16, 32, 24)
        assert taps["conv2"].shape == (2, 16, 32, 24)
        assert taps["conv3"].shape == (2, 32, 16, 12)
        assert taps["conv4"] is deep

    def test_full_size_input(self):
        cfg = NetworkConfig()
        deep, _ = encoder_forward(cfg, np.zeros((1, 1, 256, 192)), randomized(cfg))
        assert deep.shape[2:] == (32, 24)

    def test_indivisible_rejected(self):
        cfg = NetworkConfig()
        with pytest.raises(ShapeError):
            encoder_forward(cfg, np.zeros((1, 1, 60, 48)), randomized(cfg))

    def test_single_pixel_sensitivity(self):
        cfg = NetworkConfig()
        net = randomized(cfg)
        x = make_rng(1).standard_normal((1, 1, 64, 48))
        a, _ = net.encoder.forward(x)
        x2 = x.copy()
        x2[0, 0, 30, 20] += 1.0
        b, _ = net.encoder.forward(x2)
        assert np.abs(a - b).max() > 0

    def test_flip_equivariance_symmetric_kernels(self):
        # odd widths at every stride-2 layer keep the sampling grid mirror-symmetric
        cfg = NetworkConfig()
        net = randomized(cfg, seed=3)
        symmetrize(net)
        x = make_rng(2).standard_normal((2, 1, 24, 25))
        _, taps = net.encoder.forward(x, check_size=False)
        _, taps_f = net.encoder.forward(x[..., ::-1].copy(), check_size=False)
        for name in taps:
            np.testing.assert_allclose(taps_f[name], taps[name][..., ::-1], atol=1e-6, rtol=0)

    def test_head_swap_leaves_encoder(self):
        x = make_rng(0).standard_normal((1, 1, 64, 48))
        a = PoseNet(NetworkConfig(head="duc"), rng=make_rng(5)).eval()
        b = PoseNet(NetworkConfig(head="sbn", deconv_filters=16), rng=make_rng(5)).eval()
        enc_a = dict(a.encoder.named_parameters())
        for name, p in b.encoder.named_parameters():
            np.testing.assert_array_equal(p.data, enc_a[name].data)
        _, ta = a.encoder.forward(x)
        _, tb = b.encoder.forward(x)
        for name in ta:
            np.testing.assert_array_equal(ta[name], tb[name])
        pa = {n for n, _ in a.named_parameters()}
        pb = {n for n, _ in b.named_parameters()}
        assert {n.split(".")[0] for n in pa ^ pb} == {"head"}


class TestFusion:
    def test_output_at_low_resolution(self):
        rng = make_rng(0)
        fusion = FeatureFusion(8, 16, 12, 4, rng=rng)
        out = ffm_fuse(fusion, rng.standard_normal((2, 8, 16, 12)), rng.standard_normal((2, 16, 4, 3)))
        assert out.shape == (2, 12, 16, 12)

    def test_low_path_isolated(self):
        rng = make_rng(1)
        fusion = FeatureFusion(4, 4, 4, 2, rng=rng)
        fusion.proj.weight.data[...] = np.eye(4)[:, :, None, None]
        fusion.proj.bias.data[...] = 0.0
        fusion.fuse.weight.data[:, :4] = np.eye(4)[:, :, None, None]
        fusion.fuse.bias.data[...] = 0.0
        low = rng.standard_normal((2, 4, 6, 6))
        out = fusion.forward(low, np.zeros((2, 4, 3, 3)))
        np.testing.assert_array_equal(out, low)

    def test_disabled_feeds_deep(self):
        cfg = NetworkConfig(ffm=False, aux_weight=0.0)
        net = randomized(cfg)
        x = make_rng(0).standard_normal((1, 1, 64, 48))
        out = net.forward(x)
        assert net.ffm is None
        np.testing.assert_array_equal(out.heatmaps, net.head.forward(out.high))

    def test_mismatched_sizes(self):
        fusion = FeatureFusion(4, 4, 4, 2, rng=make_rng(0))
        with pytest.raises(ShapeError):
            fusion.forward(np.zeros((1, 4, 6, 6)), np.zeros((1, 4, 2, 2)))


class TestDuc:
    def test_large_input_shapes(self):
        head = DucHead(4, 8, 17, rng=make_rng(0))
        out = head.forward(make_rng(1).standard_normal((1, 4, 64, 64)))
        assert head.pre_shuffle.shape == (1, 8 * 8 * 17, 64, 64)
        assert head.pre_shuffle.shape[1] == 1088
        assert out.shape == (1, 17, 512, 512)
        np.testing.assert_allclose(out.sum(axis=(2, 3)), 1.0, atol=1e-6)

    def test_constant_features_uniform(self):
        head = DucHead(3, 4, 2)
        head.conv.bias.data[...] = 0.7
        out = head.forward(make_rng(0).standard_normal((2, 3, 5, 6)))
        np.testing.assert_allclose(out, 1.0 / (20 * 24), rtol=1e-12)

    def test_operator_whitelist(self):
        net = PoseNet(NetworkConfig(), rng=make_rng(0)).eval()
        assert net.head.operators == ("conv2d", "depth_to_space", "spatial_softmax")
        kinds = {type(m) for m in net.head.modules()} - {DucHead}
        assert kinds <= {L.Conv2d, L.SpatialSoftmax}
        forbidden = {L.ConvTranspose2d, L.UpsampleNearest}
        assert not any(isinstance(m, tuple(forbidden)) for m in net.head.modules())
        # zero insertion would leave structurally-zero pixels; every output pixel is populated
        heat = net.forward(make_rng(1).standard_normal((1, 1, 64, 48))).heatmaps
        assert np.all(heat > 0)

    def test_functional_entry(self):
        out = duc_head(make_rng(0).standard_normal((1, 5, 3, 2)), 2, 3, rng=make_rng(1))
        assert out.shape == (1, 3, 6, 4)


class TestSbn:
    def test_upsampling(self):
        head = SbnDeconvHead(64, 13, n_deconv=3, filters=32, rng=make_rng(0)).eval()
        out = head.forward(make_rng(1).standard_normal((2, 64, 8, 6)))
        assert out.shape == (2, 13, 64, 48)

    def test_default_filters(self):
        head = SbnDeconvHead(8, 5, rng=make_rng(0))
        deconvs = [m for m in head.modules() if isinstance(m, L.ConvTranspose2d)]
        assert len(deconvs) == 3
        assert all(d.weight.data.shape[1:] == (256, 4, 4) for d in deconvs)

    def test_in_network(self):
        cfg = NetworkConfig(head="sbn", ffm=False, aux_weight=0.0, deconv_filters=16)
        net = randomized(cfg)
        out = net.forward(np.zeros((1, 1, 64, 48)))
        assert out.heatmaps.shape == (1, 13, 64, 48) and out.normalization == "peak"


class TestNetwork:
    def test_duc_full_resolution(self):
        cfg = NetworkConfig(K=7)
        out = network_forward(cfg, make_rng(0).standard_normal((2, 1, 64, 48)), randomized(cfg))
        assert out.heatmaps.shape == (2, 7, 64, 48)
        assert out.aux_heatmaps.shape == (2, 7, 64, 48)
        np.testing.assert_allclose(out.heatmaps.sum(axis=(2, 3)), 1.0, atol=1e-6)

    def test_no_aux_without_weight(self):
        cfg = NetworkConfig(aux_weight=0.0)
        assert network_forward(cfg, np.zeros((1, 1, 64, 48)), randomized(cfg)).aux_heatmaps is None

    @pytest.mark.parametrize("overrides", [
        dict(),
        dict(head="sbn", deconv_filters=4),
        dict(ffm_to_head=False),
        dict(ffm=False, aux_weight=0.5),
        dict(fsm="cs_lss", fam=False),
    ])
    def test_end_to_end_gradients(self, overrides):
        checks = end_to_end_check(tiny_network_config(**overrides), rng=make_rng(3))
        for c in checks:
            assert c.max_rel_error < 1e-4, c

    def test_flip_average_symmetric(self):
        cfg = NetworkConfig(stage_widths=[8, 16], blocks=[1, 1], strides=[1, 1], stem_width=8,
                            stem_stride=1, f=1, K=3, s=2, r_fc=2)
        net = randomized(cfg, seed=4)
        symmetrize(net)
        half = make_rng(0).standard_normal((2, 1, 12, 5))
        x = np.concatenate([half, half[..., ::-1]], axis=3)  # mirror-symmetric, width 10

        def predict(v):
            return net.forward(v).heatmaps

        plain = predict(x)
        np.testing.assert_allclose(flip_average(predict, x, FlipPairs([])), plain, atol=1e-6, rtol=0)
