import numpy as np
import pytest
import torch

from dorar import models
from dorar.core import build_unit_grid


def _count(model):
    return sum(p.numel() for p in model.parameters())


def test_mnist_blackbox_shapes_and_descriptor():
    m = models.build_mnist_blackbox().eval()
    out = m(torch.rand(5, 1, 28, 28))
    assert out.shape == (5, 10)
    torch.testing.assert_close(out.exp().sum(1), torch.ones(5))
    kinds = [layer["type"] for layer in m.descriptor["layers"]]
    assert kinds[:3] == ["conv2d", "maxpool", "relu"]
    assert m.descriptor["layers"][0]["kernel"] == 5 and m.descriptor["layers"][3]["kernel"] == 2


def test_cifar_and_synthetic_blackboxes():
    assert models.build_blackbox("cifar10").eval()(torch.rand(2, 3, 32, 32)).shape == (2, 10)
    assert models.build_blackbox("synthetic").eval()(torch.rand(3, 2, 160)).shape == (3, 2)
    with pytest.raises(ValueError):
        models.build_blackbox("imagenet")


@pytest.mark.parametrize("sample_shape, unit, kind, expected", [
    ((1, 28, 28), (4, 4), "mnist", 49),
    ((1, 28, 28), (1, 1), "mnist", 784),
    ((1, 28, 28), (2, 2), "mnist", 196),
    ((3, 32, 32), (1, 1), "cifar10", 1024),
    ((3, 32, 32), (4, 4), "cifar10", 64),
    ((2, 160), (4,), "synthetic", 40),
])
def test_selector_output_matches_grid(sample_shape, unit, kind, expected):
    grid = build_unit_grid(sample_shape, unit)
    sel = models.build_selector(grid, kind).eval()
    out = sel(torch.rand(2, *sample_shape))
    assert out.shape == (2, expected)
    torch.testing.assert_close(out.exp().sum(1), torch.ones(2))


def test_selector_rejects_unsupported_units():
    with pytest.raises(ValueError):
        models.build_selector(build_unit_grid((1, 28, 28), (7, 7)), "mnist")
    with pytest.raises(ValueError):
        models.build_selector(build_unit_grid((1, 28, 28), (4, 4)), "synthetic")


def test_generator_widths():
    g = models.build_generator((1, 28, 28), "mnist")
    assert g.layer_widths == (784, 784)
    assert models.build_generator((2, 1600), "synthetic").layer_widths == (3200, 3200)
    out = g(torch.rand(3, 1, 28, 28))
    assert out.shape == (3, 1, 28, 28)
    assert out.min() >= 0 and out.max() <= 1


def test_checkpoint_round_trip_is_exact(tmp_path):
    m = models.build_mnist_blackbox()
    path = models.save_checkpoint(m, tmp_path / models.checkpoint_name("blackbox", "mnist", 3), {"acc": 0.5})
    assert path.name == "blackbox-mnist-3.ckpt"
    header = models.read_checkpoint_header(path)
    assert header["descriptor"]["builder"] == "mnist_blackbox"
    m2 = models.load_checkpoint(path)
    assert m2.checkpoint_extra == {"acc": 0.5}
    for (k, a), (_, b) in zip(m.state_dict().items(), m2.state_dict().items()):
        assert torch.equal(a, b), k
    x = torch.rand(4, 1, 28, 28)
    torch.testing.assert_close(m.eval()(x), m2.eval()(x), rtol=0, atol=0)


def test_checkpoint_round_trips_batchnorm_buffers(tmp_path):
    m = models.build_blackbox("synthetic")
    m.train()
    m(torch.rand(8, 2, 160))
    m2 = models.load_checkpoint(models.save_checkpoint(m, tmp_path / "bb.ckpt"))
    assert torch.equal(m.bn1.running_mean, m2.bn1.running_mean)
    assert m2.bn1.num_batches_tracked.item() == 1


def test_checkpoint_rejects_foreign_file(tmp_path):
    p = tmp_path / "junk.ckpt"
    p.write_bytes(b"not a checkpoint")
    with pytest.raises(ValueError):
        models.load_checkpoint(p)


def test_freeze_and_accuracy():
    m = models.freeze(models.build_mnist_blackbox())
    assert not any(p.requires_grad for p in m.parameters())
    x = torch.rand(20, 1, 28, 28)
    y = m(x).argmax(1)
    assert models.accuracy(m, x, y) == 1.0


def test_train_classifier_learns_separable_task():
    g = torch.Generator().manual_seed(0)
    x = torch.rand(400, 2, 160, generator=g)
    y = (x[:, 0, :80].mean(1) > x[:, 0, 80:].mean(1)).long()
    with torch.random.fork_rng():
        torch.manual_seed(0)
        m = models.build_blackbox("synthetic")
        models.train_classifier(m, x, y, epochs=15, seed=0)
    assert models.accuracy(m, x, y) > 0.9


def test_train_classifier_ignores_prior_global_rng_state():
    g = torch.Generator().manual_seed(1)
    x = torch.rand(200, 2, 160, generator=g)
    y = (x[:, 1].mean(1) > 0.5).long()

    def fit(burn):
        torch.manual_seed(burn)
        torch.rand(burn + 1)
        with torch.random.fork_rng():
            torch.manual_seed(0)
            m = models.build_blackbox("synthetic")
        models.train_classifier(m, x, y, epochs=2, seed=3)
        return m.state_dict()

    a, b = fit(0), fit(11)
    assert all(torch.equal(a[k], b[k]) for k in a)
