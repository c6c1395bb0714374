"""REINFORCE and PPO-clip updates on top of :class:`~acpg.net.PolicyNet`.

With ``acpg`` enabled the policy head is a frozen simplex ETF and only the
backbone learns; nothing else in the update changes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import TrainConfig
from .envs import Env, TransitionBatch, balanced_batch
from .net import GradientTape, Optimizer, PolicyNet


class NonFiniteLossError(FloatingPointError):
    pass


@dataclass
class Episode:
    obs: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    activations: np.ndarray
    logps: np.ndarray
    log_probs: np.ndarray
    truncated: bool = False
    final_obs: np.ndarray | None = None
    labels: np.ndarray | None = None
    returns: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.actions)

    @property
    def total_reward(self) -> float:
        return float(self.rewards.sum())

    @property
    def steps(self):
        """(state, action, reward, activation, log-prob) tuples."""
        return list(zip(self.obs, self.actions, self.rewards, self.activations, self.logps))


def compute_returns(rewards, gamma: float) -> np.ndarray:
    """Discounted suffix sums G_t = r_t + gamma * G_{t+1}."""
    if isinstance(rewards, Episode):
        rewards = rewards.rewards
    r = np.asarray(rewards, dtype=np.float64)
    out = np.empty_like(r)
    acc = 0.0
    for t in range(len(r) - 1, -1, -1):
        acc = r[t] + gamma * acc
        out[t] = acc
    return out


def gae(rewards, values, last_value: float, gamma: float, lam: float) -> np.ndarray:
    """Generalized advantage estimates for one episode.

    ``last_value`` is the bootstrap value after the final step (zero when the
    episode terminated, V(s_T) when it was truncated).
    """
    r = np.asarray(rewards, dtype=np.float64)
    v = np.append(np.asarray(values, dtype=np.float64), last_value)
    adv = np.empty_like(r)
    acc = 0.0
    for t in range(len(r) - 1, -1, -1):
        delta = r[t] + gamma * v[t + 1] - v[t]
        acc = delta + gamma * lam * acc
        adv[t] = acc
    return adv


def standardize(x: np.ndarray) -> np.ndarray:
    return (x - x.mean()) / (x.std() + 1e-8)


def sample_actions(probs: np.ndarray, epsilon: float, rng: np.random.Generator) -> np.ndarray:
    """Row-wise epsilon-greedy sampling: uniform with prob. epsilon, else from ``probs``."""
    probs = np.atleast_2d(probs)
    n, k = probs.shape
    u = rng.random(n)
    cdf = np.cumsum(probs, axis=1)
    from_policy = np.minimum((u[:, None] * cdf[:, -1:] > cdf).sum(axis=1), k - 1)
    if epsilon <= 0.0:
        return from_policy
    explore = rng.random(n) < epsilon
    random_actions = rng.integers(k, size=n)
    return np.where(explore, random_actions, from_policy)


def select_action(net: PolicyNet, state: np.ndarray, epsilon: float,
                  rng: np.random.Generator) -> int:
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError(f"epsilon must lie in [0, 1], got {epsilon}")
    return int(sample_actions(net.forward(state).probs, epsilon, rng)[0])


def behaviour_probs(probs: np.ndarray, epsilon: float) -> np.ndarray:
    """Action distribution actually followed under epsilon-greedy."""
    k = probs.shape[-1]
    return (1.0 - epsilon) * probs + epsilon / k


def collect_episodes(envs: list[Env], net: PolicyNet, epsilon: float,
                     rng: np.random.Generator, labeler=None) -> list[Episode]:
    """Run one episode in every env in lockstep, batching the forward passes."""
    n = len(envs)
    obs = [env.reset(seed=int(rng.integers(2**31))) for env in envs]
    traces = [dict(obs=[], actions=[], rewards=[], h=[], logp=[], lp=[]) for _ in range(n)]
    final = [None] * n
    active = list(range(n))
    while active:
        batch = np.stack([obs[i] for i in active])
        fwd = net.forward(batch)
        acts = sample_actions(fwd.probs, epsilon, rng)
        log_probs = fwd.log_probs
        still = []
        for j, i in enumerate(active):
            tr = traces[i]
            a = int(acts[j])
            tr["obs"].append(obs[i])
            tr["actions"].append(a)
            tr["h"].append(fwd.h[j])
            tr["lp"].append(log_probs[j])
            tr["logp"].append(log_probs[j, a])
            obs[i], r, done = envs[i].step(a)
            tr["rewards"].append(r)
            if done:
                final[i] = obs[i]
            else:
                still.append(i)
        active = still

    episodes = []
    for i, tr in enumerate(traces):
        ob = np.array(tr["obs"])
        episodes.append(Episode(
            obs=ob,
            actions=np.array(tr["actions"], dtype=int),
            rewards=np.array(tr["rewards"], dtype=np.float64),
            activations=np.array(tr["h"]),
            logps=np.array(tr["logp"]),
            log_probs=np.array(tr["lp"]),
            truncated=bool(envs[i].truncated),
            final_obs=final[i],
            labels=None if labeler is None else labeler(ob),
        ))
    return episodes


def episodes_to_batch(episodes: list[Episode], gamma: float) -> TransitionBatch:
    for ep in episodes:
        ep.returns = compute_returns(ep.rewards, gamma)
    labels = None
    if all(ep.labels is not None for ep in episodes):
        labels = np.concatenate([ep.labels for ep in episodes])
    returns = np.concatenate([ep.returns for ep in episodes])
    return TransitionBatch(
        obs=np.concatenate([ep.obs for ep in episodes]),
        actions=np.concatenate([ep.actions for ep in episodes]),
        psi=returns.copy(),
        labels=labels,
        logp_old=np.concatenate([ep.log_probs for ep in episodes]),
        returns=returns,
    )


def _minibatches(n: int, size: int, rng: np.random.Generator):
    perm = rng.permutation(n)
    for start in range(0, n, size):
        yield perm[start:start + size]


def pg_logit_grad(probs: np.ndarray, actions: np.ndarray, psi: np.ndarray) -> np.ndarray:
    """d/dz of -sum_i psi_i log pi(a_i|s_i): psi_i * (p_i - onehot(a_i))."""
    g = probs.copy()
    g[np.arange(len(actions)), actions] -= 1.0
    return g * psi[:, None]


def reinforce_loss_and_tape(net: PolicyNet, obs, actions, psi) -> GradientTape:
    fwd = net.forward(obs)
    n = len(actions)
    logp = fwd.log_probs[np.arange(n), actions]
    loss = float(-np.mean(logp * psi))
    if not np.isfinite(loss):
        raise NonFiniteLossError(
            f"non-finite REINFORCE loss: max|psi|={np.max(np.abs(psi)):.3g}, "
            f"min logp={np.min(logp):.3g}"
        )
    return net.backward(fwd, pg_logit_grad(fwd.probs, actions, psi) / n, loss)


def reinforce_update(net: PolicyNet, opt: Optimizer, batch: TransitionBatch,
                     config: TrainConfig, rng: np.random.Generator) -> float:
    """Monte-Carlo policy gradient on a batch of transitions with returns in ``psi``.

    Runs ``repeat_per_collect`` passes over shuffled minibatches. Returns the
    mean minibatch loss.
    """
    if len(batch) == 0:
        raise ValueError("empty batch")
    if config.balanced:
        batch = balanced_batch(batch, config.balanced, net.n_actions, rng)
    psi = standardize(batch.psi) if config.normalize_returns else batch.psi
    losses = []
    for _ in range(config.repeat_per_collect):
        for mb in _minibatches(len(batch), config.batch_size, rng):
            tape = reinforce_loss_and_tape(net, batch.obs[mb], batch.actions[mb], psi[mb])
            opt.step(net, tape)
            losses.append(tape.loss)
    return float(np.mean(losses))


def ppo_surrogate(log_probs: np.ndarray, actions: np.ndarray, logp_old: np.ndarray,
                  adv: np.ndarray, clip_eps: float):
    """Clipped surrogate and its gradient w.r.t. the logits.

    Returns ``(objective, dobj_dlogits, clipped_mask)`` where ``objective`` is
    the batch mean of ``min(rho A, clip(rho, 1-eps, 1+eps) A)``.
    """
    n = len(actions)
    idx = np.arange(n)
    ratio = np.exp(log_probs[idx, actions] - logp_old)
    unclipped = ratio * adv
    clipped = np.clip(ratio, 1.0 - clip_eps, 1.0 + clip_eps) * adv
    objective = float(np.mean(np.minimum(unclipped, clipped)))
    live = unclipped <= clipped
    coef = np.where(live, ratio * adv, 0.0)
    probs = np.exp(log_probs)
    onehot = np.zeros_like(probs)
    onehot[idx, actions] = 1.0
    grad = coef[:, None] * (onehot - probs) / n
    return objective, grad, ~live


def entropy_and_grad(log_probs: np.ndarray):
    """Mean entropy and its gradient w.r.t. the logits."""
    probs = np.exp(log_probs)
    ent = -(probs * log_probs).sum(axis=1)
    grad = -probs * (log_probs + ent[:, None]) / len(probs)
    return float(ent.mean()), grad


def ppo_rollout_batch(episodes: list[Episode], value_net: PolicyNet,
                      gamma: float, lam: float) -> TransitionBatch:
    advs, rets = [], []
    for ep in episodes:
        values = value_net.forward(ep.obs).logits[:, 0]
        last = 0.0
        if ep.truncated and ep.final_obs is not None:
            last = float(value_net.forward(ep.final_obs).logits[0, 0])
        adv = gae(ep.rewards, values, last, gamma, lam)
        advs.append(adv)
        rets.append(adv + values)
        ep.returns = compute_returns(ep.rewards, gamma)
    return TransitionBatch(
        obs=np.concatenate([ep.obs for ep in episodes]),
        actions=np.concatenate([ep.actions for ep in episodes]),
        psi=np.concatenate(advs),
        logp_old=np.concatenate([ep.log_probs for ep in episodes]),
        returns=np.concatenate(rets),
    )


def ppo_update(net: PolicyNet, value_net: PolicyNet, pi_opt: Optimizer, v_opt: Optimizer,
               batch: TransitionBatch, config: TrainConfig,
               rng: np.random.Generator) -> dict:
    """Several clipped-surrogate passes plus value regression.

    ``batch.logp_old`` holds the full (n, k) log-probabilities of the
    collecting policy. A pass is abandoned, and no further passes run, once
    the minibatch mean KL(old || new) exceeds ``config.kl_limit``.
    """
    adv = standardize(batch.psi) if config.normalize_advantages else batch.psi
    n = len(batch)
    idx = np.arange(n)
    old_taken = batch.logp_old[idx, batch.actions]
    stats = dict(policy_obj=[], value_loss=[], entropy=[], kl=[], clip_frac=[])
    kl_abort = False
    for _ in range(config.repeat_per_collect):
        for mb in _minibatches(n, config.batch_size, rng):
            fwd = net.forward(batch.obs[mb])
            log_probs = fwd.log_probs
            old = batch.logp_old[mb]
            kl = float(np.mean(np.sum(np.exp(old) * (old - log_probs), axis=1)))
            if kl > config.kl_limit:
                kl_abort = True
                break
            obj, dobj, clipped = ppo_surrogate(log_probs, batch.actions[mb], old_taken[mb],
                                               adv[mb], config.clip_eps)
            ent, dent = entropy_and_grad(log_probs)
            loss = -(obj + config.entropy_coef * ent)
            if not np.isfinite(loss):
                raise NonFiniteLossError(f"non-finite PPO loss (objective={obj}, entropy={ent})")
            pi_opt.step(net, net.backward(fwd, -(dobj + config.entropy_coef * dent), loss))

            vf = value_net.forward(batch.obs[mb])
            err = vf.logits[:, 0] - batch.returns[mb]
            v_loss = config.value_coef * float(np.mean(err**2))
            dv = (2.0 * config.value_coef / len(mb)) * err[:, None]
            v_opt.step(value_net, value_net.backward(vf, dv, v_loss))

            stats["policy_obj"].append(obj)
            stats["value_loss"].append(v_loss)
            stats["entropy"].append(ent)
            stats["kl"].append(kl)
            stats["clip_frac"].append(float(np.mean(clipped)))
        if kl_abort:
            break
    out = {key: float(np.mean(v)) if v else float("nan") for key, v in stats.items()}
    out["kl_abort"] = kl_abort
    return out
