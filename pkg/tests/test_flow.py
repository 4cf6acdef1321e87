import numpy as np
import pytest

from glare import tensor as T
from glare.flow import (
    ActNorm,
    CondAffineCoupling,
    FlowConfig,
    FlowModel,
    InvertibleChannelMix,
    flow_forward,
    flow_inverse,
    flow_inverse_logdet,
    latent_log_prob,
    nll,
    sample_latent,
)
from glare.tensor import Tensor, gradcheck, precision

HALF_LOG_2PI = 0.5 * np.log(2 * np.pi)


def randomize(flow: FlowModel, rng: np.random.Generator, scale: float = 0.3) -> FlowModel:
    """Move every flow parameter away from its (near-identity) initialisation."""
    for layer in flow.layers:
        if isinstance(layer, ActNorm):
            layer.logs.data[...] = rng.normal(0, scale, layer.logs.shape)
            layer.bias.data[...] = rng.normal(0, scale, layer.bias.shape)
        elif isinstance(layer, InvertibleChannelMix):
            d = layer.weight.shape[0]
            layer.weight.data[...] = layer.weight.data @ np.diag(np.exp(rng.uniform(0.2, 0.6, d)))
        elif isinstance(layer, CondAffineCoupling):
            layer.conv_out.weight.data[...] = rng.normal(0, scale, layer.conv_out.weight.shape)
            layer.conv_out.bias.data[...] = rng.normal(0, scale, layer.conv_out.bias.shape)
    return flow


def make_flow(seed: int, cond: int = 4) -> FlowModel:
    rng = np.random.default_rng(seed)
    return randomize(FlowModel(FlowConfig(3, cond, couplings=2, flow_layers=2, hidden=8), rng), rng)


@pytest.mark.parametrize("dtype,tol", [(np.float32, 1e-5), (np.float64, 1e-10)])
def test_round_trip(dtype, tol):
    worst = 0.0
    with precision(dtype):
        for i in range(100):
            rng = np.random.default_rng([7, i])
            flow = make_flow(i % 10)
            z = Tensor(rng.normal(size=(3, 8, 8)))
            c = Tensor(rng.normal(size=(4, 8, 8)))
            v, _ = flow_forward(flow, z, c)
            back = flow_inverse(flow, v, c)
            worst = max(worst, float(np.max(np.abs(back.data - z.data))))
    assert worst < tol, worst


def dense_jacobian(fn, z: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Central-difference Jacobian of a map on flattened ``z``."""
    flat = z.reshape(-1)
    J = np.zeros((flat.size, flat.size))
    for j in range(flat.size):
        hi, lo = flat.copy(), flat.copy()
        hi[j] += eps
        lo[j] -= eps
        J[:, j] = (fn(hi.reshape(z.shape)) - fn(lo.reshape(z.shape))).reshape(-1) / (2 * eps)
    return J


def _rel(a: float, b: float) -> float:
    return abs(a - b) / max(abs(b), 1e-8)


def test_logdet_matches_dense_jacobian():
    worst_layer = worst_total = 0.0
    with precision(np.float64), T.no_grad():
        for i in range(20):
            rng = np.random.default_rng([11, i])
            flow = make_flow(100 + i)
            z = rng.normal(size=(1, 3, 2, 2))
            c = Tensor(rng.normal(size=(1, 4, 2, 2)))
            h = z
            for layer in flow.layers:
                def f(x, layer=layer):
                    return flow._apply(layer, Tensor(x), c, False)[0].data

                _, ld = flow._apply(layer, Tensor(h), c, False)
                ref = np.linalg.slogdet(dense_jacobian(f, h))[1]
                analytic = float(np.sum(ld.data)) if ld.ndim else float(ld.data)
                worst_layer = max(worst_layer, _rel(analytic, ref))
                h = f(h)

            def full(x):
                return flow_forward(flow, Tensor(x), c)[0].data

            _, total = flow_forward(flow, Tensor(z), c)
            ref = np.linalg.slogdet(dense_jacobian(full, z))[1]
            worst_total = max(worst_total, _rel(float(total.data[0]), ref))
    assert worst_layer < 1e-3, worst_layer
    assert worst_total < 1e-3, worst_total


def test_inverse_logdet_is_negated_forward():
    with precision(np.float64):
        flow = make_flow(3)
        rng = np.random.default_rng(0)
        z = Tensor(rng.normal(size=(2, 3, 4, 4)))
        c = Tensor(rng.normal(size=(2, 4, 4, 4)))
        v, fwd = flow_forward(flow, z, c)
        back, inv = flow_inverse_logdet(flow, v, c)
        np.testing.assert_allclose(inv.data, -fwd.data, rtol=1e-10)
        np.testing.assert_allclose(back.data, z.data, atol=1e-10)


def test_nll_closed_form_for_identity_flow():
    flow = FlowModel(FlowConfig(3, 4, 2, 2, 8), np.random.default_rng(0), random_mix=False)
    rng = np.random.default_rng(1)
    z = Tensor(rng.normal(size=(2, 3, 8, 8)))
    c = Tensor(rng.normal(size=(2, 4, 8, 8)))
    value = float(nll(flow, z, c, z).data)
    assert abs(value - HALF_LOG_2PI) < 1e-6
    assert HALF_LOG_2PI == pytest.approx(0.918939, abs=1e-6)


def test_log_prob_matches_scipy_normal():
    from scipy.stats import norm

    rng = np.random.default_rng(2)
    with precision(np.float64):
        v, mu = rng.normal(size=(2, 3, 2, 2)), rng.normal(size=(2, 3, 2, 2))
        ours = latent_log_prob(Tensor(v), Tensor(mu)).data
    ref = norm.logpdf(v, loc=mu).reshape(2, -1).sum(axis=1)
    np.testing.assert_allclose(ours, ref, rtol=1e-12)


def test_nll_gradients():
    with precision(np.float64):
        flow = make_flow(5)
        rng = np.random.default_rng(3)
        z = Tensor(rng.normal(size=(1, 3, 2, 2)))
        c = Tensor(rng.normal(size=(1, 4, 2, 2)), requires_grad=True)
        z_ll = Tensor(rng.normal(size=(1, 3, 2, 2)), requires_grad=True)
        layer = flow.layers[2]
        params = [flow.layers[0].logs, flow.layers[1].weight, layer.conv_out.weight, layer.conv1.weight]
        err = gradcheck(lambda: nll(flow, z, c, z_ll), [c, z_ll, *params])
    assert err < 1e-3


def test_actnorm_data_init_standardises():
    rng = np.random.default_rng(4)
    z = rng.normal(3.0, 2.0, size=(4, 3, 5, 5))
    an = ActNorm(3)
    an.data_init(z)
    out, _ = an(Tensor(z))
    np.testing.assert_allclose(out.data.mean(axis=(0, 2, 3)), 0, atol=1e-5)
    np.testing.assert_allclose(out.data.std(axis=(0, 2, 3)), 1, atol=1e-4)


def test_singular_mix_and_zero_scale_rejected():
    with pytest.raises(ValueError):
        ActNorm(3, scale=[1.0, 0.0, 1.0])
    mix = InvertibleChannelMix(2, matrix=np.array([[1.0, 2.0], [2.0, 4.0]]))
    with pytest.raises(ValueError):
        mix(Tensor(np.ones((1, 2, 2, 2))))


def test_coupling_touches_every_channel_across_a_layer():
    rng = np.random.default_rng(6)
    layers = [CondAffineCoupling(3, 2, 4, rng, roll=k) for k in range(3)]
    for layer in layers:
        layer.conv_out.weight.data[...] = rng.normal(0, 0.5, layer.conv_out.weight.shape)
    z = Tensor(rng.normal(size=(1, 3, 2, 2)))
    c = Tensor(rng.normal(size=(1, 2, 2, 2)))
    changed = np.zeros(3, bool)
    for layer in layers:
        out, _ = layer(z, c)
        diff = np.any(out.data != z.data, axis=(0, 2, 3))
        assert diff.sum() == 1  # ceil(3/2) = 2 channels stay fixed
        changed |= diff
    assert changed.all()


def test_sampling_temperature():
    z_ll = Tensor(np.zeros((3, 4, 4)))
    np.testing.assert_array_equal(sample_latent(z_ll, 0.0).data, z_ll.data)
    a, b = sample_latent(z_ll, 0.5, seed=1), sample_latent(z_ll, 0.5, seed=1)
    np.testing.assert_array_equal(a.data, b.data)
    assert np.std(a.data) > 0.2
    with pytest.raises(ValueError):
        sample_latent(z_ll, -1.0)
