import numpy as np
import pytest

import moelab as m
from moelab.errors import ConfigurationError, NumericOverflowError, StateError

from conftest import random_dataset, random_params
from oracles import oracle_backward, oracle_forward


def _act(phi="tanh", sigma="tanh"):
    return m.make_activation(phi, sigma)


# ---------------------------------------------------------------- dims/data

def test_dims_validation():
    with pytest.raises(ConfigurationError):
        m.ModelDims(D=0, N=1, E=1, Ne=1, P=1).validate()
    with pytest.raises(ConfigurationError):
        m.ModelDims(D=1, N=1, E=1, Ne=1, P=1, kappa=0.0).validate()
    with pytest.raises(ConfigurationError):
        m.ModelDims(D=1, N=1, E=4, Ne=1, P=1, kappa=0.3).validate(topk=True)
    d = m.ModelDims(D=1, N=1, E=4, Ne=1, P=1, kappa=0.25).validate(topk=True)
    assert d.n_active == 1


def test_dataset_gram():
    data = m.make_probe_dataset(P=5, D=3, seed=0)
    assert np.allclose(data.Kx, data.Kx.T)
    assert np.all(np.linalg.eigvalsh(data.Kx) > -1e-12)
    assert np.allclose(np.diag(data.Kx), np.sum(data.x ** 2, axis=1))


# -------------------------------------------------------------- activations

@pytest.mark.parametrize("name", ["identity", "tanh", "gelu", "relu-smooth"])
def test_activation_derivatives(name):
    act = m.make_activation(name, "tanh")
    m.model.verify_derivative(act.phi, act.dphi)
    # second derivative against finite differences of the first
    grid = np.linspace(-2.5, 2.5, 31)
    h = 1e-6
    fd2 = (act.dphi(grid + h) - act.dphi(grid - h)) / (2 * h)
    assert np.max(np.abs(fd2 - act.d2phi(grid))) < 1e-5


def test_bad_user_hook_rejected():
    with pytest.raises(ConfigurationError):
        m.make_activation(hooks={"phi": np.tanh, "dphi": np.cos})


# -------------------------------------------------------------------- init

def test_init_zero_scheme_gives_zero_params(small_dims):
    p = m.init_params(small_dims, m.InitScheme.zeros(), seed=0)
    assert all(np.all(v == 0) for v in p.blocks().values())


def test_init_router_zero(small_dims):
    p = m.init_params(small_dims, m.InitScheme.router_zero(), seed=5)
    assert np.all(p.r == 0)
    assert np.any(p.b != 0)


def test_init_deterministic(small_dims):
    a = m.init_params(small_dims, m.InitScheme.unit(), seed=9)
    b = m.init_params(small_dims, m.InitScheme.unit(), seed=9)
    for k in a.blocks():
        assert np.array_equal(a.blocks()[k], b.blocks()[k])
    c = m.init_params(small_dims, m.InitScheme.unit(), seed=10)
    assert not np.array_equal(a.W0, c.W0)


# ------------------------------------------------------------ forward pass

def test_scalar_chain_by_hand():
    data = m.Dataset(x=np.array([[1.0]]), y=np.array([0.0]))
    p = m.ParamState(W0=np.array([[1.0]]), W1=np.array([[[1.0]]]),
                     W2=np.array([[[2.0]]]), w3=np.array([1.0]),
                     r=np.array([[0.0]]), b=np.array([0.5]))
    fs = m.forward(p, data, _act("identity", "identity"))
    assert fs.h0.item() == 1.0
    assert fs.u.item() == 1.0
    assert fs.m.item() == 2.0
    assert fs.p.item() == 0.0
    assert fs.w.item() == 0.5
    assert fs.h3.item() == 2.0
    assert fs.f.item() == 2.0


def test_zero_params_zero_fields(small_dims, rng):
    data = random_dataset(small_dims, rng)
    p = m.init_params(small_dims, m.InitScheme.zeros(), seed=0)
    fs = m.forward(p, data, _act())  # tanh(0) = 0
    for arr in (fs.h0, fs.u, fs.m, fs.p, fs.w, fs.h3, fs.f):
        assert np.all(arr == 0)


def test_forward_backward_match_oracle(rng):
    """100 random small instances against the loop oracle, both gate modes."""
    act = _act()
    for trial in range(100):
        gate_mode = "soft" if trial % 2 == 0 else "topk"
        E = 3 if gate_mode == "topk" else int(rng.integers(1, 4))
        kappa = 2.0 / E if gate_mode == "topk" else 1.0
        dims = m.ModelDims(D=int(rng.integers(1, 4)), N=int(rng.integers(1, 5)),
                           E=E, Ne=int(rng.integers(1, 4)),
                           P=int(rng.integers(1, 4)), kappa=kappa)
        params = random_params(dims, rng)
        data = random_dataset(dims, rng)
        fs = m.forward(params, data, act, gate_mode, kappa)
        ref = oracle_forward(params, data.x, np.tanh,
                             np.tanh, gate_mode=gate_mode, kappa=kappa)
        for key in ("h0", "u", "m", "p", "w", "h3", "f"):
            assert np.max(np.abs(getattr(fs, key) - ref[key])) < 1e-12, key
        m.backward(params, data, act, fs)
        dphi = lambda v: 1.0 - np.tanh(v) ** 2
        bref = oracle_backward(params, ref, np.tanh, dphi, dphi)
        for key in ("g", "z", "delta", "A", "q"):
            assert np.max(np.abs(getattr(fs, key) - bref[key])) < 1e-12, key


def test_backward_hand_example():
    # N=2, w3=(2,4), phi=identity -> g=(1,2); with m=(1,1): A=1.5
    dims = m.ModelDims(D=1, N=2, E=1, Ne=1, P=1)
    p = m.ParamState(W0=np.ones((2, 1)), W1=np.zeros((1, 1, 2)),
                     W2=np.zeros((1, 2, 1)), w3=np.array([2.0, 4.0]),
                     r=np.zeros((1, 2)), b=np.zeros(1))
    data = m.Dataset(x=np.ones((1, 1)), y=np.zeros(1))
    fs = m.forward(p, data, _act("identity", "identity"))
    m.backward(p, data, _act("identity", "identity"), fs)
    assert np.allclose(fs.g[0], [1.0, 2.0])
    fs.m[0, 0] = np.array([1.0, 1.0])
    fs.A = np.einsum("pi,kpi->kp", fs.g, fs.m) / dims.N
    assert np.isclose(fs.A[0, 0], 1.5)


def test_router_and_mlp_paths_vanish(small_dims, rng):
    """r=0 and W1=0 leave q = g exactly."""
    params = random_params(small_dims, rng)
    params.r[:] = 0.0
    params.W1[:] = 0.0
    data = random_dataset(small_dims, rng)
    fs = m.forward(params, data, _act())
    m.backward(params, data, _act(), fs)
    assert np.array_equal(fs.q, fs.g)


def test_q_matches_finite_difference_jvp(rng):
    """q = df/dh0 via central differences of f while h0 is perturbed (holding
    the parameter-defined forward maps fixed)."""
    dims = m.ModelDims(D=2, N=3, E=2, Ne=2, P=2)
    act = _act()
    params = random_params(dims, rng, scale=0.7)
    data = random_dataset(dims, rng)
    fs = m.forward(params, data, act)
    m.backward(params, data, act, fs)

    def f_of_h0(h0):
        u = np.einsum("kan,pn->kpa", params.W1, h0) / np.sqrt(dims.N)
        mm = np.einsum("kia,kpa->kpi", params.W2, act.phi(u)) / np.sqrt(dims.Ne)
        pp = params.r @ h0.T / dims.N
        ww = act.sigma(pp) + params.b[:, None]
        h3 = h0 + np.einsum("kp,kpi->pi", ww, mm) / dims.E
        return act.phi(h3) @ params.w3 / dims.N

    h = 1e-6
    for mu in range(dims.P):
        for i in range(dims.N):
            hp = fs.h0.copy()
            hp[mu, i] += h
            hm = fs.h0.copy()
            hm[mu, i] -= h
            fd = (f_of_h0(hp)[mu] - f_of_h0(hm)[mu]) / (2 * h)
            assert abs(fd - fs.q[mu, i]) < 1e-6 * max(1.0, abs(fd))


def test_expert_permutation_invariance(small_dims, rng):
    params = random_params(small_dims, rng)
    data = random_dataset(small_dims, rng)
    act = _act()
    fs = m.forward(params, data, act)
    m.backward(params, data, act, fs)
    perm = np.array([2, 0, 1])
    fs2 = m.forward(m.model.permute_experts(params, perm), data, act)
    m.backward(m.model.permute_experts(params, perm), data, act, fs2)
    for key in ("h3", "f", "g", "q"):
        assert np.max(np.abs(getattr(fs, key) - getattr(fs2, key))) < 1e-12


def test_gtilde_and_A_normalizations(small_dims, rng):
    params = random_params(small_dims, rng)
    data = random_dataset(small_dims, rng)
    fs = m.forward(params, data, _act())
    m.backward(params, data, _act(), fs)
    assert np.array_equal(fs.gtilde, small_dims.N * fs.g)
    A_from_gtilde = np.einsum("pi,kpi->kp", fs.gtilde / small_dims.N, fs.m) / small_dims.N
    assert np.max(np.abs(A_from_gtilde - fs.A)) < 1e-15


def test_h3_reconstruction_invariant(small_dims, rng):
    params = random_params(small_dims, rng)
    data = random_dataset(small_dims, rng)
    fs = m.forward(params, data, _act())
    recon = fs.h0 + np.einsum("kp,kpi->pi", fs.w, fs.m) / small_dims.E
    rel = np.max(np.abs(fs.h3 - recon)) / max(np.max(np.abs(fs.h3)), 1e-300)
    assert rel < 1e-12


def test_nonfinite_fields_named(small_dims, rng):
    params = random_params(small_dims, rng)
    params.W0[0, 0] = np.inf
    data = random_dataset(small_dims, rng)
    with pytest.raises(NumericOverflowError) as err:
        m.forward(params, data, _act())
    assert err.value.field == "h0"


def test_backward_requires_forward(small_dims, rng):
    params = random_params(small_dims, rng)
    data = random_dataset(small_dims, rng)
    fs = m.forward(params, data, _act())
    fs.h3 = None
    with pytest.raises(StateError):
        m.backward(params, data, _act(), fs)


# -------------------------------------------------------------------- loss

def test_loss_perfect_fit():
    L, Delta = m.loss_and_delta(np.array([1.0, -2.0]), np.array([1.0, -2.0]))
    assert L == 0.0
    assert np.all(Delta == 0.0)


def test_loss_half_mse_example():
    L, Delta = m.loss_and_delta(np.array([0.0]), np.array([2.0]))
    assert L == 2.0
    assert Delta[0] == 2.0


def test_loss_user_hook_abs():
    hook = m.LossHook(value=lambda f, y: np.abs(f - y),
                      dvalue=lambda f, y: np.sign(f - y))
    f = np.array([0.0, 3.0, 5.0])
    y = np.array([1.0, 1.0, 5.0])
    L, Delta = m.loss_and_delta(f, y, hook)
    assert np.isclose(L, np.mean(np.abs(f - y)))
    assert np.array_equal(Delta, np.sign(y - f))
    # Delta equals minus the hook's own derivative at the probe points
    assert np.array_equal(Delta, -hook.dvalue(f, y))


def test_label_bound_warning():
    assert m.model.uniform_bound_warning(np.array([0.5, -0.9])) is None
    assert "unit bound" in m.model.uniform_bound_warning(np.array([1.5]))
