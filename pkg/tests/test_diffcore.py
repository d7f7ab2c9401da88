import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from inharmony import diffcore as dc
from inharmony.gradsuite import CASES, planted_fault, run_case

f64 = torch.float64


def loop_conv(x, w, b, stride, padding):
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    xp = np.zeros((n, c, h + 2 * padding, wd + 2 * padding))
    xp[:, :, padding:padding + h, padding:padding + wd] = x
    ho = (h + 2 * padding - k) // stride + 1
    wo = (wd + 2 * padding - k) // stride + 1
    out = np.zeros((n, o, ho, wo))
    for i in range(n):
        for oc in range(o):
            for y in range(ho):
                for xx in range(wo):
                    acc = 0.0
                    for ic in range(c):
                        for ky in range(k):
                            for kx in range(k):
                                acc += w[oc, ic, ky, kx] * xp[i, ic, y * stride + ky, xx * stride + kx]
                    out[i, oc, y, xx] = acc + (b[oc] if b is not None else 0.0)
    return out


def loop_cdc(x, w, b, stride, padding, theta):
    # theta * sum w (x(p0+pn) - x(p0)) + (1 - theta) * sum w x(p0+pn)
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    xp = np.zeros((n, c, h + 2 * padding, wd + 2 * padding))
    xp[:, :, padding:padding + h, padding:padding + wd] = x
    ho = (h + 2 * padding - k) // stride + 1
    wo = (wd + 2 * padding - k) // stride + 1
    out = np.zeros((n, o, ho, wo))
    for i in range(n):
        for oc in range(o):
            for y in range(ho):
                for xx in range(wo):
                    diff = vanilla = 0.0
                    for ic in range(c):
                        centre = xp[i, ic, y * stride + k // 2, xx * stride + k // 2]
                        for ky in range(k):
                            for kx in range(k):
                                v = xp[i, ic, y * stride + ky, xx * stride + kx]
                                diff += w[oc, ic, ky, kx] * (v - centre)
                                vanilla += w[oc, ic, ky, kx] * v
                    out[i, oc, y, xx] = theta * diff + (1 - theta) * vanilla + b[oc]
    return out


def loop_pconv(x, m, w, b, padding):
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    xp = np.zeros((n, c, h + 2 * padding, wd + 2 * padding))
    mp = np.zeros((n, 1, h + 2 * padding, wd + 2 * padding))
    xp[:, :, padding:padding + h, padding:padding + wd] = x
    mp[:, :, padding:padding + h, padding:padding + wd] = m
    ho, wo = h + 2 * padding - k + 1, wd + 2 * padding - k + 1
    out = np.zeros((n, o, ho, wo))
    upd = np.zeros((n, 1, ho, wo))
    for i in range(n):
        for y in range(ho):
            for xx in range(wo):
                win_m = mp[i, 0, y:y + k, xx:xx + k]
                vis = win_m.sum()
                if vis == 0:
                    continue
                upd[i, 0, y, xx] = 1
                for oc in range(o):
                    acc = (w[oc] * xp[i, :, y:y + k, xx:xx + k] * win_m).sum()
                    out[i, oc, y, xx] = acc * (k * k / vis) + b[oc]
    return out, upd


def dense_attention(x, p):
    # explicit per-location matrices, no einsum
    n, c, h, w = x.shape
    out = np.empty_like(x)
    for i in range(n):
        X = x[i].reshape(c, h * w)
        Q = p["wq"] @ X + p["bq"][:, None]
        K = p["wk"] @ X
        V = p["wv"] @ X + p["bv"][:, None]
        S = (Q.T @ K) / math.sqrt(Q.shape[0])
        S = np.exp(S - S.max(axis=1, keepdims=True))
        A = S / S.sum(axis=1, keepdims=True)
        out[i] = (X + p["gamma"][0] * (V @ A.T)).reshape(c, h, w)
    return out


def _np(t):
    return t.detach().numpy()


class TestConv:
    @settings(max_examples=25, deadline=None)
    @given(n=st.integers(1, 4), c=st.integers(1, 4), h=st.integers(3, 7), w=st.integers(3, 7),
           o=st.integers(1, 3), stride=st.integers(1, 2), padding=st.integers(0, 1), seed=st.integers(0, 1000))
    def test_matches_loop_oracle(self, n, c, h, w, o, stride, padding, seed):
        g = torch.Generator().manual_seed(seed)
        x = torch.randn(n, c, h, w, generator=g, dtype=f64)
        wt = torch.randn(o, c, 3, 3, generator=g, dtype=f64)
        b = torch.randn(o, generator=g, dtype=f64)
        got = dc.conv2d(x, wt, b, stride, padding)
        np.testing.assert_allclose(_np(got), loop_conv(_np(x), _np(wt), _np(b), stride, padding), atol=1e-6)

    def test_output_size(self):
        x = torch.zeros(1, 1, 7, 6)
        assert dc.conv2d(x, torch.zeros(2, 1, 3, 3), stride=2, padding=1).shape == (1, 2, 4, 3)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="channels"):
            dc.conv2d(torch.zeros(1, 2, 4, 4), torch.zeros(1, 3, 3, 3))

    def test_non_finite_input(self):
        x = torch.zeros(1, 1, 4, 4)
        x[0, 0, 1, 1] = float("nan")
        with pytest.raises(dc.NumericalError):
            dc.conv2d(x, torch.zeros(1, 1, 3, 3))


class TestCDC:
    def test_theta_zero_is_conv(self):
        g = torch.Generator().manual_seed(1)
        x = torch.randn(2, 3, 6, 6, generator=g)
        w = torch.randn(4, 3, 3, 3, generator=g)
        b = torch.randn(4, generator=g)
        for stride, pad in ((1, 1), (2, 1), (1, 0)):
            assert torch.equal(dc.cdc_conv2d(x, w, b, stride, pad, theta=0.0), dc.conv2d(x, w, b, stride, pad))

    @pytest.mark.parametrize("theta", [0.0, 0.3, 0.7, 1.0])
    def test_matches_difference_oracle(self, theta):
        g = torch.Generator().manual_seed(2)
        x = torch.randn(2, 2, 5, 6, generator=g, dtype=f64)
        w = torch.randn(3, 2, 3, 3, generator=g, dtype=f64)
        b = torch.randn(3, generator=g, dtype=f64)
        for stride in (1, 2):
            got = dc.cdc_conv2d(x, w, b, stride, 1, theta)
            np.testing.assert_allclose(_np(got), loop_cdc(_np(x), _np(w), _np(b), stride, 1, theta), atol=1e-10)

    def test_constant_image_frozen_value(self):
        # all-ones 3x3 kernel over a constant image: 9 * (1 - theta)
        out = dc.cdc_conv2d(torch.ones(1, 1, 3, 3, dtype=f64), torch.ones(1, 1, 3, 3, dtype=f64), theta=0.7)
        assert out.item() == pytest.approx(2.7, abs=1e-12)

    def test_theta_out_of_range(self):
        with pytest.raises(ValueError):
            dc.cdc_conv2d(torch.zeros(1, 1, 3, 3), torch.zeros(1, 1, 3, 3), theta=1.5)


class TestPartialConv:
    def _data(self, seed=3):
        g = torch.Generator().manual_seed(seed)
        return (torch.randn(2, 3, 6, 5, generator=g, dtype=f64), torch.randn(4, 3, 3, 3, generator=g, dtype=f64),
                torch.randn(4, generator=g, dtype=f64))

    def test_full_mask_is_conv(self):
        x, w, b = self._data()
        out, upd = dc.partial_conv2d(x, torch.ones(2, 1, 6, 5, dtype=f64), w, b, padding=0)
        torch.testing.assert_close(out, dc.conv2d(x, w, b))
        assert torch.equal(upd, torch.ones_like(upd))

    def test_full_mask_with_padding_renormalises_border(self):
        # zero-padded mask: border windows see fewer pixels and are rescaled
        x, w, b = self._data()
        out, upd = dc.partial_conv2d(x, torch.ones(2, 1, 6, 5, dtype=f64), w, b, padding=1)
        torch.testing.assert_close(out[..., 1:-1, 1:-1], dc.conv2d(x, w, b, padding=1)[..., 1:-1, 1:-1])
        assert torch.equal(upd, torch.ones_like(upd))

    def test_empty_mask(self):
        x, w, b = self._data()
        out, upd = dc.partial_conv2d(x, torch.zeros(2, 1, 6, 5, dtype=f64), w, b, padding=1)
        assert not out.any() and not upd.any()

    def test_left_half_mask_loop_oracle(self):
        g = torch.Generator().manual_seed(4)
        x = torch.randn(1, 1, 4, 4, generator=g, dtype=f64)
        w = torch.randn(2, 1, 3, 3, generator=g, dtype=f64)
        b = torch.randn(2, generator=g, dtype=f64)
        m = torch.zeros(1, 1, 4, 4, dtype=f64)
        m[..., :2] = 1
        out, upd = dc.partial_conv2d(x, m, w, b, padding=1)
        ref, ref_upd = loop_pconv(_np(x), _np(m), _np(w), _np(b), 1)
        np.testing.assert_allclose(_np(out), ref, atol=1e-12)
        np.testing.assert_array_equal(_np(upd), ref_upd)

    def test_frozen_window_value(self):
        # visible 2 3 / 5 6 / 8 9 sum 33 over 6 of 9 taps -> 33 * 9 / 6
        x = torch.arange(1.0, 10.0, dtype=f64).view(1, 1, 3, 3)
        m = torch.ones(1, 1, 3, 3, dtype=f64)
        m[..., 0] = 0
        out, upd = dc.partial_conv2d(x, m, torch.ones(1, 1, 3, 3, dtype=f64))
        assert out.item() == pytest.approx(49.5, abs=1e-12) and upd.item() == 1

    @settings(max_examples=20, deadline=None)
    @given(seed=st.integers(0, 10_000))
    def test_invariant_to_hidden_pixels(self, seed):
        g = torch.Generator().manual_seed(seed)
        x, w, b = (torch.randn(1, 2, 6, 6, generator=g, dtype=f64), torch.randn(3, 2, 3, 3, generator=g, dtype=f64),
                   torch.randn(3, generator=g, dtype=f64))
        m = (torch.rand(1, 1, 6, 6, generator=g) > 0.5).to(f64)
        noise = torch.randn(1, 2, 6, 6, generator=g, dtype=f64) * 100
        out1, upd = dc.partial_conv2d(x, m, w, b, padding=1)
        out2, _ = dc.partial_conv2d(x + noise * (1 - m), m, w, b, padding=1)
        assert (out1 - out2).abs().max() <= 1e-6

    def test_no_gradient_to_hidden_pixels(self):
        x, w, b = self._data()
        x.requires_grad_(True)
        m = torch.zeros(2, 1, 6, 5, dtype=f64)
        m[..., 2:, :3] = 1
        out, _ = dc.partial_conv2d(x, m, w, b, padding=1)
        out.sum().backward()
        assert not (x.grad * (1 - m)).any()

    def test_non_binary_mask(self):
        x, w, b = self._data()
        with pytest.raises(ValueError, match="binary"):
            dc.partial_conv2d(x, torch.full((2, 1, 6, 5), 0.5, dtype=f64), w, b)


class TestAttention:
    def _params(self, c, seed=5, gamma=0.8):
        g = torch.Generator().manual_seed(seed)
        cq = dc.attention_channels(c)
        return {"wq": torch.randn(cq, c, generator=g, dtype=f64), "bq": torch.randn(cq, generator=g, dtype=f64),
                "wk": torch.randn(cq, c, generator=g, dtype=f64), "wv": torch.randn(c, c, generator=g, dtype=f64),
                "bv": torch.randn(c, generator=g, dtype=f64), "gamma": torch.tensor([gamma], dtype=f64)}

    def test_gamma_zero_is_identity(self):
        x = torch.randn(2, 8, 4, 4, dtype=f64)
        assert torch.equal(dc.attention_block(x, self._params(8, gamma=0.0)), x)

    def test_single_location(self):
        p = self._params(4)
        x = torch.randn(1, 4, 1, 1, dtype=f64)
        expected = x[0, :, 0, 0] + 0.8 * (p["wv"] @ x[0, :, 0, 0] + p["bv"])
        torch.testing.assert_close(dc.attention_block(x, p)[0, :, 0, 0], expected)

    def test_dense_oracle(self):
        p = self._params(4)
        x = torch.randn(1, 4, 3, 3, generator=torch.Generator().manual_seed(6), dtype=f64)
        ref = dense_attention(_np(x), {k: _np(v) for k, v in p.items()})
        np.testing.assert_allclose(_np(dc.attention_block(x, p)), ref, atol=1e-12)

    def test_reduced_channels(self):
        assert [dc.attention_channels(c) for c in (1, 4, 8, 64)] == [1, 1, 1, 8]


class TestPrimitives:
    def test_mask_pool_marks_any_visible(self):
        m = torch.zeros(1, 1, 4, 4)
        m[0, 0, 0, 1] = 1
        assert dc.mask_max_pool2x2(m)[0, 0].tolist() == [[1, 0], [0, 0]]

    def test_l2_gradient_at_coincident_points(self):
        a = torch.ones(3, requires_grad=True)
        dc.l2_distance(a, torch.ones(3)).backward()
        assert torch.equal(a.grad, torch.zeros(3))

    def test_cosine_of_zero_vector_is_finite(self):
        assert dc.cosine_similarity(torch.zeros(1, 3), torch.ones(1, 3)).item() == 0.0

    def test_bilinear_same_size_is_identity(self):
        x = torch.randn(1, 2, 5, 5)
        assert dc.bilinear_resize(x, (5, 5)) is x


class TestParamStore:
    def test_trainable_and_frozen(self):
        s = dc.ParamStore()
        s.add("a.w", torch.zeros(2))
        s.add("b.w", torch.ones(2), trainable=False)
        assert [n for n, _ in s.trainable()] == ["a.w"]
        assert [n for n, _ in s.frozen()] == ["b.w"]
        assert s["a.w"].requires_grad and not s["b.w"].requires_grad

    def test_view_strips_prefix(self):
        s = dc.ParamStore()
        s.add("enc.conv.w", torch.zeros(1))
        assert list(s.view("enc.")) == ["conv.w"]
        assert list(s.view("enc.").view("conv.")) == ["w"]

    def test_duplicate_name(self):
        s = dc.ParamStore()
        s.add("x", torch.zeros(1))
        with pytest.raises(KeyError):
            s.add("x", torch.zeros(1))


class TestGradCheck:
    @pytest.mark.parametrize("name", sorted(CASES))
    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_every_op(self, name, seed):
        result = run_case(name, seed)
        assert result.passed, f"{name} seed {seed}: {result.max_rel_err:.3e}"

    def test_planted_fault_is_caught(self):
        assert planted_fault() > 0.3

    def test_reports_non_finite(self):
        report = dc.grad_check(lambda x: torch.sqrt(x), [torch.tensor([0.0, 1.0])])
        assert report.nonfinite and not report.passed()

    def test_relative_error_floor(self):
        # both gradients zero -> no error despite the division
        report = dc.grad_check(lambda x: x * 0.0, [torch.randn(3)])
        assert report.max_rel_err == 0.0
