import numpy as np
import pytest

from latentcrab import autodiff as ad
from latentcrab import flow, trainer
from latentcrab.autodiff import GradientTape, Tensor
from latentcrab.flow import ExpertConfig, ExpertNet
from latentcrab.layers import LatentContext

CFG = ExpertConfig(width=8, n_blocks=1, n_heads=2, ffn_mult=2, horizon=2, time_width=8, sample_steps=4)


@pytest.fixture
def expert():
    return ExpertNet(CFG, context_width=6, rng=np.random.default_rng(0))


@pytest.fixture
def context():
    return LatentContext(Tensor(np.random.default_rng(1).standard_normal((5, 6))))


def _oracle(a_t):
    def velocity(a_tau, tau, ctx):
        return Tensor((a_t - a_tau) / (1.0 - tau))

    return velocity


def test_interpolate_endpoints():
    a, noise = np.ones((2, 3)), np.full((2, 3), -2.0)
    np.testing.assert_array_equal(flow.interpolate(a, noise, 0.0), noise)
    np.testing.assert_array_equal(flow.interpolate(a, noise, 1.0), a)
    np.testing.assert_allclose(flow.interpolate(a, noise, 0.25), np.full((2, 3), -1.25))
    with pytest.raises(ValueError):
        flow.interpolate(a, noise, 1.5)
    with pytest.raises(ad.ShapeError):
        flow.interpolate(a, np.zeros(3), 0.5)


def test_oracle_velocity_has_zero_loss(context):
    with ad.default_dtype(np.float64):
        a_t = np.random.default_rng(2).uniform(-1, 1, size=(2, 3))
        loss = flow.flow_loss(_oracle(a_t), [(a_t, context)] * 4, np.random.default_rng(3))
    assert loss.item() == pytest.approx(0.0, abs=1e-10)


def test_flow_loss_needs_a_batch():
    with pytest.raises(ValueError):
        flow.flow_loss(_oracle(np.zeros((2, 3))), [], np.random.default_rng(0))


def test_euler_single_step():
    noise = np.array([[0.5, -1.0, 2.0]])
    out = flow.euler_integrate(lambda a, tau: np.full_like(a, 3.0), noise, 1)
    np.testing.assert_allclose(out, noise + 3.0)
    with pytest.raises(ValueError):
        flow.euler_integrate(lambda a, tau: a, noise, 0)


@pytest.mark.parametrize("steps", [1, 3, 10])
def test_euler_follows_straight_path(steps):
    target = np.array([[0.2, -0.4, 0.9], [0.0, 0.1, -0.3]])
    noise = np.random.default_rng(4).standard_normal(target.shape)
    out = flow.euler_integrate(lambda a, tau: (target - a) / (1.0 - tau), noise, steps)
    np.testing.assert_allclose(out, target, atol=1e-10)


def test_euler_rejects_divergence():
    with pytest.raises(ad.NonFiniteError):
        flow.euler_integrate(lambda a, tau: np.full_like(a, np.inf), np.zeros((2, 3)), 2)


def test_padding_does_not_change_velocity(expert, context):
    a = np.random.default_rng(5).standard_normal((2, 3))
    base = expert.velocity(a, 0.3, context).data
    padded = expert.velocity(a, 0.3, context.padded(4)).data
    np.testing.assert_allclose(padded, base, atol=1e-6)


def test_velocity_checks_inputs(expert, context):
    with pytest.raises(ad.ShapeError):
        expert.velocity(np.zeros((3, 3)), 0.5, context)
    with pytest.raises(ad.NonFiniteError):
        expert.velocity(np.full((2, 3), np.nan), 0.5, context)


def test_context_validation():
    with pytest.raises(ValueError):
        LatentContext(Tensor(np.zeros((0, 4))))
    with pytest.raises(ValueError):
        LatentContext(Tensor(np.zeros((2, 4))), mask=[False, False])
    with pytest.raises(ad.ShapeError):
        LatentContext(Tensor(np.zeros((2, 4))), mask=[True])


def test_sampling_is_seeded_and_clipped(expert, context):
    first = expert.sample_actions(context, rng=np.random.default_rng(6))
    second = expert.sample_actions(context, rng=np.random.default_rng(6))
    np.testing.assert_array_equal(first, second)
    assert first.shape == (2, 3)
    assert np.abs(first).max() <= 1.0
    with pytest.raises(ValueError):
        expert.sample_actions(context)


def _eval_loss(expert, batch):
    return flow.flow_loss(expert.velocity, batch, np.random.default_rng(99)).item()


def test_expert_fits_a_fixed_chunk(expert, context):
    target = np.full((2, 3), 0.5)
    batch = [(target, context)] * 8
    params = expert.trainable_parameters()
    state = trainer.OptimizerState()
    before = _eval_loss(expert, batch)
    rng = np.random.default_rng(7)
    for _ in range(200):
        with GradientTape() as tape:
            loss = flow.flow_loss(expert.velocity, batch[:4], rng)
        grads = ad.backward(loss, tape)
        named = {name: grads[id(p)] for name, p in params.items() if id(p) in grads}
        trainer.optimizer_step(params, named, state, lr=1e-2, weight_decay=0.0)
    assert _eval_loss(expert, batch) < 0.8 * before
