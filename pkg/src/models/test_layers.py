import pytest
import torch
from compressai.layers import GDN
from compressai.models.utils import conv, deconv

from src.core.errors import ShapeError
from src.models.layers import GDNParams, gdn, gdn_params, load_gdn_params


def test_gdn_identity_when_gamma_is_zero():
    x = torch.randn(2, 4, 5, 5)
    params = GDNParams(beta=torch.ones(4), gamma=torch.zeros(4, 4))
    assert torch.equal(gdn(x, params), x)
    assert torch.equal(gdn(x, params, inverse=True), x)


def test_gdn_closed_form():
    x = torch.full((1, 1, 1, 1), 6.0)
    params = GDNParams(beta=torch.full((1,), 4.0), gamma=torch.zeros(1, 1))
    assert gdn(x, params).item() == pytest.approx(3.0)
    assert gdn(x, params, inverse=True).item() == pytest.approx(12.0)

    layer = load_gdn_params(GDN(1), params)
    inverse = load_gdn_params(GDN(1, inverse=True), params)
    with torch.no_grad():
        assert layer(x).item() == pytest.approx(3.0)
        assert inverse(x).item() == pytest.approx(12.0)


def test_gdn_inverse_undoes_forward_with_exact_denominator():
    torch.manual_seed(0)
    x = torch.randn(2, 3, 4, 4, dtype=torch.float64)
    params = GDNParams(
        beta=torch.rand(3, dtype=torch.float64) + 0.5,
        gamma=torch.zeros(3, 3, dtype=torch.float64),
    )
    restored = gdn(gdn(x, params), params, inverse=True)
    torch.testing.assert_close(restored, x, rtol=1e-5, atol=0)


def test_gdn_cross_channel_normalization():
    x = torch.tensor([3.0, 4.0]).view(1, 2, 1, 1)
    gamma = torch.tensor([[0.0, 1.0], [1.0, 0.0]])
    out = gdn(x, GDNParams(beta=torch.ones(2), gamma=gamma))
    # channel 0 divides by sqrt(1 + 16), channel 1 by sqrt(1 + 9)
    assert out[0, 0, 0, 0].item() == pytest.approx(3.0 / 17**0.5)
    assert out[0, 1, 0, 0].item() == pytest.approx(4.0 / 10**0.5)


def test_functional_form_matches_trained_layer():
    torch.manual_seed(3)
    layer = GDN(4)
    with torch.no_grad():
        layer.beta.add_(0.3 * torch.rand(4))
        layer.gamma.add_(0.2 * torch.rand(4, 4))
    x = torch.randn(2, 4, 6, 6)
    with torch.no_grad():
        torch.testing.assert_close(layer(x), gdn(x, gdn_params(layer)), rtol=1e-5, atol=1e-6)


def test_gdn_rejects_channel_mismatch():
    params = GDNParams(beta=torch.ones(3), gamma=torch.zeros(3, 3))
    with pytest.raises(ShapeError):
        gdn(torch.randn(1, 4, 2, 2), params)
    with pytest.raises(ShapeError):
        gdn(torch.randn(4, 2, 2), params)
    with pytest.raises(ShapeError):
        load_gdn_params(GDN(4), params)


def test_gdn_gradients_match_finite_differences():
    torch.manual_seed(1)
    x = torch.randn(1, 2, 4, 4, dtype=torch.float64, requires_grad=True)
    beta = (torch.rand(2, dtype=torch.float64) + 0.5).requires_grad_()
    gamma = (torch.rand(2, 2, dtype=torch.float64) * 0.2).requires_grad_()

    def forward(x, beta, gamma):
        return gdn(x, GDNParams(beta=beta, gamma=gamma))

    def inverse(x, beta, gamma):
        return gdn(x, GDNParams(beta=beta, gamma=gamma), inverse=True)

    assert torch.autograd.gradcheck(forward, (x, beta, gamma), eps=1e-6, atol=1e-8, rtol=1e-4)
    assert torch.autograd.gradcheck(inverse, (x, beta, gamma), eps=1e-6, atol=1e-8, rtol=1e-4)


def test_gdn_layer_initialization():
    params = gdn_params(GDN(5))
    torch.testing.assert_close(params.beta, torch.ones(5), atol=1e-6, rtol=0)
    torch.testing.assert_close(params.gamma, 0.1 * torch.eye(5), atol=1e-6, rtol=0)


def test_gdn_parameters_stay_positive():
    layer = GDN(3)
    with torch.no_grad():
        layer.beta.fill_(-5.0)
        layer.gamma.fill_(-5.0)
    params = gdn_params(layer)
    assert (params.beta >= 1e-6 - 1e-12).all()
    assert (params.gamma >= 0).all()


def test_conv_and_deconv_resample_by_stride():
    x = torch.randn(1, 3, 16, 24)
    down = conv(3, 6)(x)
    assert down.shape == (1, 6, 8, 12)
    assert deconv(6, 3)(down).shape == (1, 3, 16, 24)
    assert conv(3, 6, kernel_size=3, stride=1)(x).shape == (1, 6, 16, 24)
