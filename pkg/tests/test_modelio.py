import numpy as np
import pytest

from xbnn.data import Dataset
from xbnn.modelio import (
    BadMagicError,
    SizeMismatchError,
    TruncatedFileError,
    UnsupportedVersionError,
    describe,
    filter_bytes,
    load,
    memory_footprint,
    network_arch,
    save,
)
from xbnn.nn import LayerSpec, apply_mode, build_network
from xbnn.train import SGDMomentum, evaluate, train_step


def random_net(seed, mode="bwn"):
    rng = np.random.default_rng(seed)
    specs = [
        LayerSpec(kind="conv", out_ch=int(rng.integers(2, 6)), k=3, pad=1),
        LayerSpec(kind="batchnorm"),
        LayerSpec(kind="relu"),
        LayerSpec(kind="maxpool", k=2),
        LayerSpec(kind="binconv", out_ch=int(rng.integers(2, 8)), k=3, pad=1),
        LayerSpec(kind="batchnorm"),
        LayerSpec(kind="avgpool", k=2),
        LayerSpec(kind="conv", out_ch=5),
    ]
    net = build_network(apply_mode(specs, mode), (2, 8, 8), seed=seed)
    # perturb batchnorm state so round trips cover non-default values
    for layer in net.layers:
        if hasattr(layer, "running_mean"):
            layer.running_mean = rng.normal(size=layer.channels).astype(np.float32)
            layer.running_var = rng.uniform(0.5, 2.0, size=layer.channels).astype(np.float32)
    return net


def params_equal(a, b):
    pa, pb = a.params(), b.params()
    if len(pa) != len(pb):
        return False
    return all(np.array_equal(x.value, y.value) for x, y in zip(pa, pb))


class TestRoundTrip:
    def test_real_payload_bit_exact(self, tmp_path):
        net = random_net(0)
        path = tmp_path / "m.xbn"
        save(net, path)
        loaded = load(path)
        assert params_equal(net, loaded)
        x = np.random.default_rng(1).normal(size=(4, 2, 8, 8)).astype(np.float32)
        np.testing.assert_array_equal(
            net.forward(x, train=False), loaded.forward(x, train=False)
        )

    def test_many_random_models(self, tmp_path):
        for seed in range(25):
            net = random_net(seed, mode=("bwn", "xnor", "full")[seed % 3])
            path = tmp_path / f"m{seed}.xbn"
            save(net, path)
            assert params_equal(net, load(path))

    def test_double_roundtrip_identical_bytes(self, tmp_path):
        net = random_net(3)
        p1, p2 = tmp_path / "a.xbn", tmp_path / "b.xbn"
        save(net, p1)
        save(load(p1), p2)
        assert p1.read_bytes() == p2.read_bytes()


class TestPackedExport:
    def _trained_net(self, mode, seed=0):
        rng = np.random.default_rng(seed)
        net = random_net(seed, mode=mode)
        images = rng.normal(size=(32, 2, 8, 8)).astype(np.float32)
        labels = rng.integers(0, 5, 32).astype(np.int64)
        for _ in range(3):
            train_step(net, (images, labels), SGDMomentum(lr=0.05))
        return net, images

    @pytest.mark.parametrize("mode", ["bwn", "xnor"])
    def test_packed_model_evaluates_identically(self, tmp_path, mode):
        net, images = self._trained_net(mode)
        path = tmp_path / "packed.xbn"
        save(net, path, pack_binarized=True)
        loaded = load(path)
        np.testing.assert_array_equal(
            net.forward(images, train=False), loaded.forward(images, train=False)
        )

    def test_packed_learned_scale_evaluates_identically(self, tmp_path):
        rng = np.random.default_rng(4)
        specs = [
            LayerSpec(kind="conv", out_ch=3, k=3, pad=1),
            LayerSpec(kind="binconv", out_ch=4, k=3, pad=1,
                      binarize_weights=True, learned_scale=True),
            LayerSpec(kind="conv", out_ch=5),
        ]
        net = build_network(specs, (1, 6, 6), seed=4)
        x = rng.normal(size=(3, 1, 6, 6)).astype(np.float32)
        path = tmp_path / "ls.xbn"
        save(net, path, pack_binarized=True)
        loaded = load(path)
        np.testing.assert_array_equal(
            net.forward(x, train=False), loaded.forward(x, train=False)
        )

    def test_packed_file_smaller(self, tmp_path):
        net, _ = self._trained_net("bwn")
        full, packed = tmp_path / "f.xbn", tmp_path / "p.xbn"
        save(net, full)
        save(net, packed, pack_binarized=True)
        assert packed.stat().st_size < full.stat().st_size


class TestErrors:
    def _saved(self, tmp_path):
        path = tmp_path / "m.xbn"
        save(random_net(5), path)
        return path

    def test_bad_magic(self, tmp_path):
        path = self._saved(tmp_path)
        raw = bytearray(path.read_bytes())
        raw[:4] = b"NOPE"
        path.write_bytes(bytes(raw))
        with pytest.raises(BadMagicError):
            load(path)

    def test_unsupported_version(self, tmp_path):
        path = self._saved(tmp_path)
        raw = bytearray(path.read_bytes())
        raw[4] = 99
        path.write_bytes(bytes(raw))
        with pytest.raises(UnsupportedVersionError):
            load(path)

    def test_truncation(self, tmp_path):
        path = self._saved(tmp_path)
        raw = path.read_bytes()
        path.write_bytes(raw[: len(raw) // 2])
        with pytest.raises(TruncatedFileError):
            load(path)

    def test_trailing_garbage(self, tmp_path):
        path = self._saved(tmp_path)
        path.write_bytes(path.read_bytes() + b"\x00")
        with pytest.raises(SizeMismatchError):
            load(path)


class TestMemoryFootprint:
    def test_single_filter_hand_values(self):
        n = 3 * 3 * 256
        assert filter_bytes(n, binarized=False) == 9216
        assert filter_bytes(n, binarized=True) == (2304 // 64) * 8 + 4  # 292

    def test_empty_architecture(self):
        assert memory_footprint([], "float32") == 0
        assert memory_footprint([], "binary") == 0

    def test_param_blob_pricing(self):
        # 61M parameters at 4 bytes each
        assert memory_footprint([61_000_000], "float32") == 244_000_000

    def test_compression_ratio_large_filters(self):
        for n in (2048, 4096, 100_000):
            ratio = filter_bytes(n, False) / filter_bytes(n, True)
            assert ratio == pytest.approx(32.0, rel=0.05)

    def test_mixed_architecture(self):
        arch = [(8, 2048, True), (4, 100, False), 32]
        binary = memory_footprint(arch, "binary")
        expected = 8 * ((2048 // 64) * 8 + 4) + 4 * 100 * 4 + 32 * 4
        assert binary == expected
        assert memory_footprint(arch, "float32") == 4 * (8 * 2048 + 4 * 100 + 32)

    def test_network_arch_marks_binarized(self):
        net = random_net(6, mode="bwn")
        arch = network_arch(net)
        banks = [e for e in arch if isinstance(e, tuple)]
        assert [b[2] for b in banks] == [False, True, False]

    def test_describe_mentions_totals(self):
        text = describe(random_net(7))
        assert "total float32" in text
        assert "conv" in text
