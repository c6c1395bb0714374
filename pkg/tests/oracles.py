"""Independent reference computations shared by the unit and acceptance tests."""

import numpy as np

from acpg.etf import generate_etf
from acpg.net import PolicyNet, log_softmax
from acpg.pg import pg_logit_grad


def pg_loss(net: PolicyNet, obs, actions, psi) -> float:
    logp = log_softmax(net.forward(obs).logits)
    return float(-np.mean(psi * logp[np.arange(len(actions)), actions]))


def finite_difference_error(net: PolicyNet, obs, actions, psi, step: float = 1e-5) -> float:
    """Max relative error between backprop and central differences over every learnable entry."""
    fwd = net.forward(obs)
    tape = net.backward(fwd, pg_logit_grad(fwd.probs, actions, psi) / len(actions))
    worst = 0.0
    for p, g, learn in zip(net.params, tape.grads, net.learnable()):
        if not learn:
            continue
        flat = p.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + step
            up = pg_loss(net, obs, actions, psi)
            flat[i] = old - step
            down = pg_loss(net, obs, actions, psi)
            flat[i] = old
            fd = (up - down) / (2 * step)
            bp = g.reshape(-1)[i]
            denom = max(abs(fd), abs(bp), 1e-6)
            worst = max(worst, abs(fd - bp) / denom)
    return worst


def small_net(in_dim, hidden, k, seed, acpg=False, eh_clip=None):
    rng = np.random.default_rng(seed)
    etf = generate_etf(k, hidden[-1], 1.0, seed=seed) if acpg else None
    return PolicyNet(in_dim, hidden, k, etf=etf, rng=rng, eh_clip=eh_clip)


def collapsed_activations(k: int, d: int, per_class: int = 3, e_h: float = 2.0, seed: int = 0):
    """Exact collapse targets h = sqrt(E_H/E_W) w_k for an E_W = 1 frame."""
    etf = generate_etf(k, d, 1.0, seed=seed)
    labels = np.repeat(np.arange(k), per_class)
    return etf, np.sqrt(e_h) * etf.head[labels], labels
