import math

import numpy as np
import pytest

from unia.refine import IGNORE
from unia.seg import CONSISTENCY_WEIGHT, DataError, SegHead, SegOutput, consistency_reg, seg_loss
from unia.tensor import Tensor, grad_check


def make_head(channels=8, classes=2, seed=0):
    return SegHead(channels, classes, np.random.default_rng(seed))


def naive_dilated_conv(x, w, b, dilation=2):
    """Direct per-pixel 3x3 dilated convolution with zero padding."""
    c_in, h, width = x.shape
    c_out = w.shape[0]
    out = np.zeros((c_out, h, width))
    for o in range(c_out):
        for y in range(h):
            for xx in range(width):
                acc = b[o]
                for c in range(c_in):
                    for ky in range(3):
                        for kx in range(3):
                            yy = y + (ky - 1) * dilation
                            xx2 = xx + (kx - 1) * dilation
                            if 0 <= yy < h and 0 <= xx2 < width:
                                acc += w[o, c * 9 + ky * 3 + kx] * x[c, yy, xx2]
                out[o, y, xx] = acc
    return out


def test_decoder_zero_weights_gives_uniform_probs():
    head = make_head(classes=2)
    for name, p in head.params.items():
        p.data[:] = 0.0
    out = head.forward(Tensor(np.random.default_rng(1).standard_normal((8, 4, 4))))
    np.testing.assert_allclose(out.probs.data, 1.0 / 3.0, atol=1e-12)


def test_decoder_preserves_spatial_shape():
    head = make_head()
    out = head.forward(Tensor(np.random.default_rng(2).standard_normal((8, 5, 7))))
    assert out.logits.shape == (3, 5, 7)
    assert out.probs.shape == (3, 5, 7)


def test_decoder_prob_columns_sum_to_one():
    head = make_head(seed=3)
    out = head.forward(Tensor(np.random.default_rng(3).standard_normal((8, 4, 4))))
    np.testing.assert_allclose(out.probs.data.sum(axis=0), 1.0, atol=1e-9)


def test_decoder_matches_naive_convolution_oracle():
    head = make_head(channels=3, classes=1, seed=4)
    rng = np.random.default_rng(5)
    for p in head.params.values():
        p.data[:] = rng.standard_normal(p.shape) * 0.3
    x = rng.standard_normal((3, 4, 5))
    out = head.forward(Tensor(x))

    p = {k: v.data for k, v in head.params.items()}
    h1 = np.maximum(naive_dilated_conv(x, p["seg_head.conv1.w"], p["seg_head.conv1.b"]), 0)
    h2 = np.maximum(naive_dilated_conv(h1, p["seg_head.conv2.w"], p["seg_head.conv2.b"]), 0)
    logits = np.einsum("oc,chw->ohw", p["seg_head.proj.w"], h2) + p["seg_head.proj.b"][:, None, None]
    np.testing.assert_allclose(out.logits.data, logits, atol=1e-10)


def test_decoder_gradcheck():
    head = make_head(seed=6)
    rng = np.random.default_rng(7)
    x = Tensor(rng.standard_normal((8, 4, 4)), requires_grad=True)
    w = Tensor(rng.standard_normal((3, 4, 4)))

    def f(t):
        out = head.forward(t)
        return (out.probs * w).sum() + (out.logits * w).mean()

    assert grad_check(f, x, h=1e-5) < 1e-4
    conv_w = head.params["seg_head.conv1.w"]
    assert grad_check(lambda _: f(x), conv_w, h=1e-5) < 1e-4


def test_seg_loss_perfect_prediction_vanishes():
    head = make_head(classes=2, seed=8)
    labels = np.array([[1, 0], [2, 1]])
    logits = np.zeros((3, 2, 2))
    for i in range(2):
        for j in range(2):
            logits[labels[i, j], i, j] = 40.0
    out = SegOutput(logits=Tensor(logits), probs=Tensor(logits))
    assert seg_loss(out, labels).item() < 1e-12


def test_seg_loss_uniform_closed_form():
    out_logits = Tensor(np.zeros((3, 2, 2)))
    out = SegOutput(logits=out_logits, probs=out_logits)
    loss = seg_loss(out, np.zeros((2, 2), dtype=int))
    assert loss.item() == pytest.approx(math.log(3.0), abs=1e-12)


def test_seg_loss_matches_per_pixel_oracle():
    rng = np.random.default_rng(9)
    logits = rng.standard_normal((3, 4, 4))
    labels = rng.integers(0, 3, size=(4, 4))
    labels[0, 0] = IGNORE
    out = SegOutput(logits=Tensor(logits), probs=Tensor(logits))
    loss = seg_loss(out, labels)

    total, count = 0.0, 0
    for i in range(4):
        for j in range(4):
            if labels[i, j] == IGNORE:
                continue
            z = logits[:, i, j]
            p = np.exp(z - z.max())
            p /= p.sum()
            total += -math.log(p[labels[i, j]])
            count += 1
    assert abs(loss.item() - total / count) < 1e-12


def test_seg_loss_ignores_255_pixels():
    rng = np.random.default_rng(10)
    logits = rng.standard_normal((3, 3, 3))
    labels = rng.integers(0, 3, size=(3, 3))
    labels[1, 1] = IGNORE
    base = seg_loss(SegOutput(Tensor(logits), Tensor(logits)), labels).item()
    perturbed = logits.copy()
    perturbed[:, 1, 1] = rng.standard_normal(3) * 10
    after = seg_loss(SegOutput(Tensor(perturbed), Tensor(perturbed)), labels).item()
    assert base == pytest.approx(after, abs=1e-15)


def test_seg_loss_all_ignored_is_zero():
    logits = Tensor(np.zeros((3, 2, 2)))
    labels = np.full((2, 2), IGNORE)
    assert seg_loss(SegOutput(logits, logits), labels).item() == 0.0


def test_seg_loss_rejects_out_of_range_labels():
    logits = Tensor(np.zeros((3, 2, 2)))
    with pytest.raises(DataError):
        seg_loss(SegOutput(logits, logits), np.full((2, 2), 3))


def test_seg_loss_monotone_as_mass_moves_to_label():
    labels = np.zeros((1, 1), dtype=int)
    losses = []
    for z in np.linspace(0.0, 4.0, 9):
        logits = np.zeros((3, 1, 1))
        logits[0, 0, 0] = z
        losses.append(seg_loss(SegOutput(Tensor(logits), Tensor(logits)), labels).item())
    assert all(a > b for a, b in zip(losses, losses[1:]))


def test_seg_loss_gradcheck():
    rng = np.random.default_rng(11)
    head = make_head(seed=12)
    x = Tensor(rng.standard_normal((8, 3, 3)), requires_grad=True)
    labels = rng.integers(0, 3, size=(3, 3))
    labels[2, 2] = IGNORE
    assert grad_check(lambda t: seg_loss(head.forward(t), labels), x, h=1e-5) < 1e-4


def test_consistency_reg_zero_when_equal():
    probs = np.random.default_rng(13).random((3, 2, 2))
    cam = Tensor(probs[1:])
    out = SegOutput(logits=Tensor(probs), probs=Tensor(probs))
    assert consistency_reg(out, cam).item() < 1e-15


def test_consistency_reg_constant_offset():
    probs = np.random.default_rng(14).random((3, 2, 2))
    cam = Tensor(probs[1:] - 0.1)
    out = SegOutput(logits=Tensor(probs), probs=Tensor(probs))
    assert consistency_reg(out, cam).item() == pytest.approx(0.1, abs=1e-12)
    assert CONSISTENCY_WEIGHT == 0.05


def test_consistency_reg_nonnegative():
    rng = np.random.default_rng(15)
    for _ in range(10):
        probs = rng.random((3, 3, 3))
        cam = Tensor(rng.random((2, 3, 3)))
        out = SegOutput(logits=Tensor(probs), probs=Tensor(probs))
        assert consistency_reg(out, cam).item() >= 0.0
