"""Central finite-difference checks for every differentiable piece of the package."""
from __future__ import annotations

import numpy as np
from scipy.special import expit

from .garat import Discriminator, _js_and_grad
from .mdp import marginal_transition_distribution, random_mdp, random_policy
from .nn import CategoricalPolicy, GaussianPolicy, Mlp

FD_EPS = 1e-5

# layer shapes that occur in the package: agent / transformer / value nets,
# discriminators (pendulum and tabular), GAT regressors, categorical heads
MLP_SHAPES = ([2, 64, 64, 1], [3, 64, 64, 1], [5, 64, 64, 1], [3, 64, 64, 2], [4, 64, 64, 1],
              [6, 64, 64, 1], [4, 64, 64, 4], [2, 3])


def relative_error(analytic, numeric, floor: float = 1e-6) -> float:
    """Max elementwise ``|a - n| / max(|a|, |n|, floor)``."""
    a = np.concatenate([np.ravel(x) for x in analytic])
    n = np.concatenate([np.ravel(x) for x in numeric])
    return float(np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)))


def numeric_grads(params, loss, eps: float = FD_EPS) -> list:
    out = []
    for p in params:
        g = np.zeros_like(p)
        for i in np.ndindex(p.shape):
            old = p[i]
            p[i] = old + eps
            up = loss()
            p[i] = old - eps
            down = loss()
            p[i] = old
            g[i] = (up - down) / (2.0 * eps)
        out.append(g)
    return out


def check_mlp(sizes, rng) -> float:
    net = Mlp(sizes, rng=rng, output_gain=1.0)
    x = rng.standard_normal((5, sizes[0]))
    c = rng.standard_normal((5, sizes[-1]))
    loss = lambda: float(np.sum(c * net.predict(x)))
    net.forward(x)
    return relative_error(net.backward(c), numeric_grads(net.params, loss))


def check_gaussian_policy(rng, obs_dim: int = 3, act_dim: int = 1) -> float:
    pol = GaussianPolicy(obs_dim, act_dim, rng=rng, head_gain=1.0)
    obs = rng.standard_normal((6, obs_dim))
    acts = rng.standard_normal((6, act_dim))
    coef = rng.standard_normal(6)
    loss = lambda: float(np.sum(coef * pol.log_prob(obs, acts)))
    _, grads = pol.log_prob_and_grad(obs, acts, coef)
    return relative_error(grads, numeric_grads(pol.params, loss))


def check_categorical_policy(rng, obs_dim: int = 6, n_actions: int = 4) -> float:
    pol = CategoricalPolicy(obs_dim, n_actions, rng=rng, head_gain=1.0)
    obs = rng.standard_normal((6, obs_dim))
    acts = rng.integers(n_actions, size=6)
    coef = rng.standard_normal(6)
    loss = lambda: float(np.sum(coef * pol.log_prob(obs, acts)))
    _, grads = pol.log_prob_and_grad(obs, acts, coef)
    return relative_error(grads, numeric_grads(pol.params, loss))


def discriminator_objective(D: Discriminator, Xg, Xr, wg, seed: int) -> float:
    """Total discriminator loss recomputed from forward passes only."""
    net = D.net_
    ng, nr = len(Xg), len(Xr)
    wg = np.asarray(wg, dtype=np.float64) / np.sum(wg)
    wr = np.full(nr, 1.0 / nr)
    Z = np.concatenate([D._z(Xg), D._z(Xr)])
    d = expit(net.predict(Z)[:, 0])
    loss = -(wg @ np.log(d[:ng]) + wr @ np.log(1.0 - d[ng:]))
    # same interpolates as loss_and_grad draws from an identically seeded generator
    rng = np.random.default_rng(seed)
    m = max(ng, nr)
    ig, ir = rng.choice(ng, size=m, p=wg), rng.choice(nr, size=m, p=wr)
    u = rng.random((m, 1))
    Zi = u * Z[:ng][ig] + (1.0 - u) * Z[ng:][ir]
    g = net.scalar_input_gradient(Zi)[0]
    di = expit(net.predict(Zi)[:, 0])
    norm = np.linalg.norm((di * (1.0 - di))[:, None] * g, axis=1)
    loss += D.gp_coef * np.mean(np.maximum(norm - 1.0, 0.0) ** 2)
    loss += D.l2_coef * sum(float(np.sum(W * W)) for W in net.weights)
    return float(loss)


def check_discriminator(rng, n_features: int = 5, gp_scale: float = 6.0) -> float:
    """Total discriminator loss (data + gradient penalty + L2).

    The first layer is scaled up so the one-sided penalty is active and its
    second-order gradient path is exercised.
    """
    D = Discriminator(seed=int(rng.integers(2 ** 31))).initialize(n_features)
    D.net_.weights[0] *= gp_scale
    Xg = rng.standard_normal((6, n_features))
    Xr = rng.standard_normal((5, n_features)) + 0.5
    D.set_scaler(Xr)
    wg = rng.uniform(0.5, 1.5, 6)
    seed = int(rng.integers(2 ** 31))
    _, total, grads = D.loss_and_grad(Xg, Xr, wg, None, rng=np.random.default_rng(seed))
    if abs(total - discriminator_objective(D, Xg, Xr, wg, seed)) > 1e-10 * max(1.0, abs(total)):
        return float("inf")
    loss = lambda: discriminator_objective(D, Xg, Xr, wg, seed)
    return relative_error(grads, numeric_grads(D.net_.params, loss))


def check_input_gradient(rng, n_features: int = 5) -> float:
    """d out / d x of a scalar net, the quantity the gradient penalty acts on."""
    net = Mlp([n_features, 64, 64, 1], rng=rng)
    x = rng.standard_normal((4, n_features))
    g = net.scalar_input_gradient(x)[0]
    return relative_error([g], numeric_grads([x], lambda: float(np.sum(net.predict(x)))))


def check_js_adjoint(rng, S: int = 3, A: int = 2) -> float:
    """Adjoint gradient of JS(rho_g, rho_real) w.r.t. a transformer table."""
    sim, real = random_mdp(S, A, 0.9, rng), random_mdp(S, A, 0.9, rng)
    pi = random_policy(S, A, rng, floor=0.1)
    rho_real = marginal_transition_distribution(real, pi).rho
    W = rng.dirichlet(np.ones(A), size=(S, A))
    args = (sim.transition, pi.probs, sim.initial_dist, sim.discount, rho_real)
    _, g, _ = _js_and_grad(W, *args)
    return relative_error([g], numeric_grads([W], lambda: _js_and_grad(W, *args)[0], eps=1e-6))


def gradient_checks(seed: int = 0) -> list:
    """``[(name, max_relative_error)]`` for all checked approximators."""
    rng = np.random.default_rng(seed)
    out = [(f"mlp_{'x'.join(map(str, s))}", check_mlp(s, rng)) for s in MLP_SHAPES]
    out.append(("gaussian_policy", check_gaussian_policy(rng)))
    out.append(("gaussian_transformer", check_gaussian_policy(rng, obs_dim=3, act_dim=1)))
    out.append(("categorical_policy", check_categorical_policy(rng)))
    out.append(("discriminator_pendulum", check_discriminator(rng, 5)))
    out.append(("discriminator_tabular", check_discriminator(rng, 10)))
    out.append(("discriminator_input_gradient", check_input_gradient(rng)))
    out.append(("js_adjoint", check_js_adjoint(rng)))
    return out
