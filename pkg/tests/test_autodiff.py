import numpy as np
import pytest
from conftest import fd_gradient, max_rel_err

from streambev import autodiff as ad
from streambev.autodiff import GridTensor, Tape


def t(arr, requires_grad=False):
    return GridTensor(np.asarray(arr, dtype=float), requires_grad=requires_grad)


def rand_t(rng, shape, requires_grad=True, scale=1.0):
    return GridTensor(rng.uniform(-scale, scale, shape), requires_grad=requires_grad)


class TestGridTensor:
    def test_rejects_non_rank4(self):
        with pytest.raises(ad.ShapeMismatchError):
            GridTensor(np.zeros((3, 3)))

    def test_data_is_float64_row_major(self):
        x = GridTensor(np.zeros((1, 2, 3, 4), dtype=np.float32))
        assert x.data.dtype == np.float64
        assert x.data.flags["C_CONTIGUOUS"]

    def test_item_requires_scalar(self):
        with pytest.raises(ad.ShapeMismatchError):
            t(np.zeros((1, 1, 2, 1))).item()


class TestConv2d:
    def test_all_ones_center_is_nine(self):
        x = t(np.ones((1, 1, 3, 3)))
        k = t(np.ones((1, 1, 3, 3)))
        y = ad.conv2d(x, k, padding=1)
        assert y.shape == (1, 1, 3, 3)
        assert y.data[0, 0, 1, 1] == 9.0

    def test_identity_kernel(self, rng):
        x = rand_t(rng, (2, 1, 6, 7), requires_grad=False)
        k = np.zeros((1, 1, 3, 3))
        k[0, 0, 1, 1] = 1.0
        y = ad.conv2d(x, t(k), padding=1)
        np.testing.assert_array_equal(y.data, x.data)

    def test_output_arithmetic(self):
        x = t(np.zeros((1, 3, 10, 11)))
        k = t(np.zeros((4, 3, 3, 3)))
        y = ad.conv2d(x, k, stride=2, padding=1)
        assert y.shape == (1, 4, 5, 6)

    def test_channel_mismatch_names_dimension(self):
        x = t(np.zeros((1, 3, 5, 5)))
        k = t(np.zeros((1, 4, 3, 3)))
        with pytest.raises(ad.ShapeMismatchError, match="channels"):
            ad.conv2d(x, k)

    def test_even_kernel_rejected(self):
        with pytest.raises(ad.ShapeMismatchError, match="odd"):
            ad.conv2d(t(np.zeros((1, 1, 8, 8))), t(np.zeros((1, 1, 4, 4))))

    def test_gradient_matches_finite_differences(self, rng):
        x = rand_t(rng, (1, 2, 5, 5))
        k = rand_t(rng, (3, 2, 3, 3))
        b = rand_t(rng, (1, 3, 1, 1))

        with Tape():
            loss = ad.sum_all(ad.conv2d(x, k, b, stride=1, padding=1))
            ad.backward(loss)

        def f():
            return ad.conv2d(x, k, b, stride=1, padding=1).data.sum()

        fx, fk, fb = fd_gradient(f, [x.data, k.data, b.data])
        assert max_rel_err(x.grad, fx) < 1e-6
        assert max_rel_err(k.grad, fk) < 1e-6
        assert max_rel_err(b.grad, fb) < 1e-6

    @pytest.mark.parametrize("stride,padding", [(1, 0), (2, 1), (4, 0), (1, 2)])
    def test_gradient_stride_padding_variants(self, rng, stride, padding):
        x = rand_t(rng, (2, 2, 8, 8))
        k = rand_t(rng, (2, 2, 5, 5))
        with Tape():
            loss = ad.sum_all(ad.conv2d(x, k, stride=stride, padding=padding))
            ad.backward(loss)

        def f():
            return ad.conv2d(x, k, stride=stride, padding=padding).data.sum()

        fx, fk = fd_gradient(f, [x.data, k.data])
        assert max_rel_err(x.grad, fx) < 1e-4
        assert max_rel_err(k.grad, fk) < 1e-4


class TestElementwise:
    def test_sigmoid_of_zero(self):
        y = ad.sigmoid(t(np.zeros((1, 2, 3, 3))))
        np.testing.assert_array_equal(y.data, np.full((1, 2, 3, 3), 0.5))

    def test_tanh_of_zero(self):
        y = ad.tanh(t(np.zeros((1, 2, 3, 3))))
        np.testing.assert_array_equal(y.data, np.zeros((1, 2, 3, 3)))

    def test_mul_gradient_is_other_operand(self, rng):
        a = rand_t(rng, (1, 2, 4, 4))
        b = rand_t(rng, (1, 2, 4, 4))
        with Tape():
            ad.backward(ad.sum_all(ad.mul(a, b)))
        np.testing.assert_allclose(a.grad, b.data, rtol=0, atol=0)

        def f():
            return (a.data * b.data).sum()

        (fa,) = fd_gradient(f, [a.data])
        assert max_rel_err(a.grad, fa) < 1e-6

    def test_binary_shape_mismatch_names_axis(self):
        with pytest.raises(ad.ShapeMismatchError, match="axis 2"):
            ad.add(t(np.zeros((1, 1, 3, 4))), t(np.zeros((1, 1, 5, 4))))

    def test_log_domain_error_names_first_index(self):
        x = np.ones((1, 1, 2, 2))
        x[0, 0, 1, 0] = -3.0
        with pytest.raises(ad.DomainError, match=r"\(0, 0, 1, 0\)"):
            ad.log(t(x))

    def test_div_by_zero_rejected(self):
        with pytest.raises(ad.DomainError):
            ad.div(t(np.ones((1, 1, 1, 1))), t(np.zeros((1, 1, 1, 1))))

    def test_dispatcher_matches_functions(self, rng):
        x = rand_t(rng, (1, 1, 2, 2), requires_grad=False)
        np.testing.assert_array_equal(ad.elementwise("tanh", x).data, ad.tanh(x).data)
        with pytest.raises(ValueError, match="unknown elementwise tag"):
            ad.elementwise("pow", x)

    @pytest.mark.parametrize("tag", ["sigmoid", "tanh", "softplus", "abs"])
    def test_unary_gradients(self, rng, tag):
        x = rand_t(rng, (2, 2, 4, 4), scale=2.0)
        with Tape():
            ad.backward(ad.sum_all(ad.elementwise(tag, x)))

        def f():
            return ad.elementwise(tag, x).data.sum()

        (fx,) = fd_gradient(f, [x.data])
        assert max_rel_err(x.grad, fx) < 1e-4

    @pytest.mark.parametrize("tag", ["exp", "log"])
    def test_positive_domain_gradients(self, rng, tag):
        x = GridTensor(rng.uniform(0.5, 2.0, (1, 2, 4, 4)), requires_grad=True)
        with Tape():
            ad.backward(ad.sum_all(ad.elementwise(tag, x)))

        def f():
            return ad.elementwise(tag, x).data.sum()

        (fx,) = fd_gradient(f, [x.data])
        assert max_rel_err(x.grad, fx) < 1e-4

    @pytest.mark.parametrize("tag", ["add", "sub", "mul", "div"])
    def test_binary_gradients(self, rng, tag):
        a = rand_t(rng, (1, 2, 4, 4))
        b = GridTensor(rng.uniform(0.5, 2.0, (1, 2, 4, 4)), requires_grad=True)
        with Tape():
            ad.backward(ad.sum_all(ad.elementwise(tag, a, b)))

        def f():
            return ad.elementwise(tag, a, b).data.sum()

        fa, fb = fd_gradient(f, [a.data, b.data])
        assert max_rel_err(a.grad, fa) < 1e-4
        assert max_rel_err(b.grad, fb) < 1e-4


class TestResample:
    def test_down4_averaging_kernel_constant_field(self):
        c = 3.25
        x = t(np.full((1, 1, 8, 8), c))
        k = t(np.full((1, 1, 5, 5), 1.0 / 25.0))
        y = ad.resample(x, "down4", k)
        assert y.shape == (1, 1, 2, 2)
        np.testing.assert_allclose(y.data, c, rtol=1e-12)

    def test_down4_then_up4_constant_stays_constant(self, rng):
        c = -0.7
        x = t(np.full((1, 2, 8, 8), c))
        kd = rand_t(rng, (2, 2, 5, 5), requires_grad=False)
        ku = rand_t(rng, (2, 2, 3, 3), requires_grad=False)
        y = ad.resample(ad.resample(x, "down4", kd), "up4", ku)
        assert y.shape == x.shape
        for ch in range(2):
            vals = y.data[0, ch]
            np.testing.assert_allclose(vals, vals[0, 0], rtol=1e-12)

    def test_down4_requires_divisible_extents(self):
        with pytest.raises(ad.ShapeMismatchError, match="divisible by 4"):
            ad.resample(t(np.zeros((1, 1, 6, 8))), "down4", t(np.zeros((1, 1, 5, 5))))

    @pytest.mark.parametrize("tag,shape,kshape", [
        ("down4", (1, 2, 8, 8), (3, 2, 5, 5)),
        ("up4", (1, 2, 3, 3), (2, 2, 3, 3)),
    ])
    def test_gradients(self, rng, tag, shape, kshape):
        x = rand_t(rng, shape)
        k = rand_t(rng, kshape)
        with Tape():
            ad.backward(ad.sum_all(ad.resample(x, tag, k)))

        def f():
            return ad.resample(x, tag, k).data.sum()

        fx, fk = fd_gradient(f, [x.data, k.data])
        assert max_rel_err(x.grad, fx) < 1e-4
        assert max_rel_err(k.grad, fk) < 1e-4


class TestSoftmaxChannel:
    def test_equal_channels_give_half(self, rng):
        base = rng.normal(size=(1, 1, 4, 4))
        x = t(np.concatenate([base, base], axis=1))
        y = ad.softmax_channel(x)
        np.testing.assert_allclose(y.data, 0.5, rtol=0, atol=1e-15)

    def test_log2_offset_gives_thirds(self, rng):
        base = rng.normal(size=(1, 1, 3, 3))
        x = t(np.concatenate([base, base + np.log(2.0)], axis=1))
        y = ad.softmax_channel(x)
        np.testing.assert_allclose(y.data[:, 0], 1.0 / 3.0, rtol=1e-12)
        np.testing.assert_allclose(y.data[:, 1], 2.0 / 3.0, rtol=1e-12)

    def test_normalisation(self, rng):
        x = rand_t(rng, (2, 5, 4, 4), requires_grad=False, scale=10.0)
        y = ad.softmax_channel(x)
        np.testing.assert_allclose(y.data.sum(axis=1), 1.0, rtol=0, atol=1e-12)
        assert ((y.data > 0) & (y.data < 1)).all()

    def test_single_channel_rejected(self):
        with pytest.raises(ad.ShapeMismatchError):
            ad.softmax_channel(t(np.zeros((1, 1, 2, 2))))

    def test_gradient(self, rng):
        x = rand_t(rng, (1, 3, 4, 4), scale=2.0)
        w = rng.normal(size=(1, 3, 4, 4))

        with Tape():
            ad.backward(ad.sum_all(ad.mul(ad.softmax_channel(x), t(w))))

        def f():
            return (ad.softmax_channel(x).data * w).sum()

        (fx,) = fd_gradient(f, [x.data])
        assert max_rel_err(x.grad, fx) < 1e-4

    def test_log_softmax_gradient(self, rng):
        x = rand_t(rng, (1, 3, 4, 4), scale=2.0)
        w = rng.normal(size=(1, 3, 4, 4))

        with Tape():
            ad.backward(ad.sum_all(ad.mul(ad.log_softmax_channel(x), t(w))))

        def f():
            return (ad.log_softmax_channel(x).data * w).sum()

        (fx,) = fd_gradient(f, [x.data])
        assert max_rel_err(x.grad, fx) < 1e-4


class TestStructuralOps:
    def test_concat_slice_roundtrip(self, rng):
        a = rand_t(rng, (1, 2, 3, 3), requires_grad=False)
        b = rand_t(rng, (1, 3, 3, 3), requires_grad=False)
        cat = ad.concat_channels([a, b])
        np.testing.assert_array_equal(ad.slice_channels(cat, 0, 2).data, a.data)
        np.testing.assert_array_equal(ad.slice_channels(cat, 2, 5).data, b.data)

    def test_concat_gradient(self, rng):
        a = rand_t(rng, (1, 2, 3, 3))
        b = rand_t(rng, (1, 1, 3, 3))
        w = rng.normal(size=(1, 3, 3, 3))
        with Tape():
            ad.backward(ad.sum_all(ad.mul(ad.concat_channels([a, b]), t(w))))

        def f():
            return (ad.concat_channels([a, b]).data * w).sum()

        fa, fb = fd_gradient(f, [a.data, b.data])
        assert max_rel_err(a.grad, fa) < 1e-6
        assert max_rel_err(b.grad, fb) < 1e-6

    def test_scale_channels_gradient(self, rng):
        x = rand_t(rng, (1, 3, 4, 4))
        gate = rand_t(rng, (1, 1, 4, 4))
        with Tape():
            ad.backward(ad.sum_all(ad.scale_channels(x, gate)))

        def f():
            return (x.data * gate.data).sum()

        fx, fg = fd_gradient(f, [x.data, gate.data])
        assert max_rel_err(x.grad, fx) < 1e-6
        assert max_rel_err(gate.grad, fg) < 1e-6

    def test_pad_replicate_gradient(self, rng):
        x = rand_t(rng, (1, 2, 3, 4))
        w = rng.normal(size=(1, 2, 7, 8))
        with Tape():
            ad.backward(ad.sum_all(ad.mul(ad.pad_replicate(x, 2), t(w))))

        def f():
            return (np.pad(x.data, ((0, 0), (0, 0), (2, 2), (2, 2)), mode="edge") * w).sum()

        (fx,) = fd_gradient(f, [x.data])
        assert max_rel_err(x.grad, fx) < 1e-6

    def test_upsample_nearest4_gradient(self, rng):
        x = rand_t(rng, (1, 2, 2, 3))
        w = rng.normal(size=(1, 2, 8, 12))
        with Tape():
            ad.backward(ad.sum_all(ad.mul(ad.upsample_nearest4(x), t(w))))

        def f():
            up = np.repeat(np.repeat(x.data, 4, axis=2), 4, axis=3)
            return (up * w).sum()

        (fx,) = fd_gradient(f, [x.data])
        assert max_rel_err(x.grad, fx) < 1e-6


class TestBackward:
    def test_linear_loss_grad_is_input(self, rng):
        x = rand_t(rng, (1, 2, 3, 3), requires_grad=False)
        w = rand_t(rng, (1, 2, 3, 3))
        with Tape():
            ad.backward(ad.sum_all(ad.mul(w, x)))
        np.testing.assert_array_equal(w.grad, x.data)

    def test_sigmoid_sum_closed_form(self, rng):
        w = rand_t(rng, (1, 2, 3, 3))
        with Tape():
            ad.backward(ad.sum_all(ad.sigmoid(w)))
        s = 1.0 / (1.0 + np.exp(-w.data))
        np.testing.assert_allclose(w.grad, s * (1 - s), rtol=1e-12)

    def test_non_scalar_rejected(self):
        x = rand_t(np.random.default_rng(1), (1, 1, 2, 2))
        with Tape():
            y = ad.sigmoid(x)
            with pytest.raises(ad.ShapeMismatchError, match="scalar"):
                ad.backward(y)

    def test_unrecorded_loss_rejected(self):
        x = rand_t(np.random.default_rng(1), (1, 1, 1, 1))
        y = ad.sigmoid(x)  # no tape active
        with pytest.raises(ValueError, match="not recorded"):
            ad.backward(y)

    def test_tape_consumed_after_backward(self, rng):
        x = rand_t(rng, (1, 1, 2, 2))
        with Tape() as tape:
            ad.backward(ad.sum_all(ad.sigmoid(x)))
            assert len(tape) == 0

    def test_no_recording_without_tape(self, rng):
        x = rand_t(rng, (1, 1, 2, 2))
        y = ad.sigmoid(x)
        assert y._tape is None

    def test_two_layer_conv_net_finite_differences(self, rng):
        x = rand_t(rng, (1, 2, 6, 6), requires_grad=False)
        k1 = rand_t(rng, (3, 2, 3, 3), scale=0.5)
        b1 = rand_t(rng, (1, 3, 1, 1), scale=0.1)
        k2 = rand_t(rng, (1, 3, 3, 3), scale=0.5)
        b2 = rand_t(rng, (1, 1, 1, 1), scale=0.1)

        def net():
            h = ad.tanh(ad.conv2d(x, k1, b1, padding=1))
            return ad.sum_all(ad.sigmoid(ad.conv2d(h, k2, b2, padding=1)))

        with Tape():
            ad.backward(net())

        def f():
            return net().item()

        grads = fd_gradient(f, [k1.data, b1.data, k2.data, b2.data])
        for param, fd in zip([k1, b1, k2, b2], grads):
            assert max_rel_err(param.grad, fd) < 1e-4

    def test_linearity_of_backward(self, rng):
        x = rand_t(rng, (1, 2, 3, 3), requires_grad=False)
        w = rand_t(rng, (1, 2, 3, 3))
        a, b = 1.7, -0.4

        def loss1():
            return ad.sum_all(ad.sigmoid(ad.mul(w, x)))

        def loss2():
            return ad.sum_all(ad.tanh(w))

        with Tape():
            ad.backward(loss1())
        g1 = w.grad.copy()
        w.grad = None
        with Tape():
            ad.backward(loss2())
        g2 = w.grad.copy()
        w.grad = None
        with Tape():
            combined = ad.add(ad.affine(loss1(), scale=a), ad.affine(loss2(), scale=b))
            ad.backward(combined)
        expected = a * g1 + b * g2
        assert np.max(np.abs(w.grad - expected)) < 1e-12

    def test_shared_parameter_accumulates(self, rng):
        w = rand_t(rng, (1, 1, 2, 2))
        with Tape():
            ad.backward(ad.sum_all(ad.add(w, w)))
        np.testing.assert_array_equal(w.grad, np.full((1, 1, 2, 2), 2.0))


class TestDeterminism:
    def test_same_seed_bit_identical(self):
        def run():
            rng = np.random.default_rng(42)
            x = rand_t(rng, (2, 3, 8, 8))
            k = rand_t(rng, (3, 3, 3, 3))
            y = ad.softmax_channel(ad.conv2d(ad.tanh(x), k, padding=1))
            return y.data

        a, b = run(), run()
        assert a.tobytes() == b.tobytes()


class TestSnapshot:
    def test_roundtrip_bit_exact(self, rng, tmp_path):
        x = rand_t(rng, (2, 3, 5, 7), requires_grad=False)
        path = tmp_path / "t.bin"
        ad.save_tensor(path, x)
        y = ad.load_tensor(path)
        assert y.shape == x.shape
        assert y.data.tobytes() == x.data.tobytes()

    def test_header_is_little_endian_u32(self, rng, tmp_path):
        x = rand_t(rng, (1, 2, 3, 4), requires_grad=False)
        path = tmp_path / "t.bin"
        ad.save_tensor(path, x)
        raw = path.read_bytes()
        assert raw[:16] == (1).to_bytes(4, "little") + (2).to_bytes(4, "little") + (
            3
        ).to_bytes(4, "little") + (4).to_bytes(4, "little")
        assert len(raw) == 16 + 1 * 2 * 3 * 4 * 8

    def test_truncated_payload_rejected(self, rng, tmp_path):
        x = rand_t(rng, (1, 1, 2, 2), requires_grad=False)
        path = tmp_path / "t.bin"
        ad.save_tensor(path, x)
        path.write_bytes(path.read_bytes()[:-8])
        with pytest.raises(ValueError, match="payload"):
            ad.load_tensor(path)
