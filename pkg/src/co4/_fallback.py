"""Pure numpy implementations of the hot kernels.

These mirror ``_kernels.pyx`` function for function and are used whenever
the compiled extension is unavailable or ``CO4_PURE=1`` is set.
"""

from __future__ import annotations

import math

import numpy as np


def topk_rows(scores: np.ndarray, k: int) -> np.ndarray:
    scores = np.ascontiguousarray(scores, dtype=np.float64)
    b, n = scores.shape
    out = np.empty((b, k), dtype=np.int64)
    idx = np.arange(n)
    for r in range(b):
        # lexsort: last key is primary -> descending score, then ascending index
        out[r] = np.lexsort((idx, -scores[r]))[:k]
    return out


def modulate_projection(ql, kl, vl, qx, kx, cap):
    qm = ql + ql * kx
    km = kl + kl * qx
    vm = np.clip(vl * vl + 2.0 * vl + qm * km * (1.0 + np.abs(vl)), 0.0, cap)
    return qm, km, vm


def modulate_normal(ql, kl, vl, qx, kx, vx, mu):
    qxm = qx + mu
    kxm = kx + mu
    qm = qxm + ql * kxm
    km = kxm + kl * qxm
    vm = vx * vx + 2.0 * vx + (qm + mu) * (km + mu) * (1.0 + np.abs(vl))
    return qm, km, vm


def lif_simulate(i_s, i_c, i_u, bin_steps, n_steps, dt, tau_s, c_s, e_l, b, v_th0,
                 th_inc, th_tau, v_reset, tau_w, current_scale, leak_sign):
    """Forward-Euler population integration; returns spikes and voltage extrema."""
    n = i_s.shape[0]
    v = np.full(n, e_l)
    w = np.zeros(n)
    th = np.full(n, v_th0)
    vmin = v.copy()
    over = np.full(n, -np.inf)
    spikes_n: list[np.ndarray] = []
    spikes_t: list[np.ndarray] = []
    drive = None
    for step in range(n_steps):
        if step % bin_steps == 0:
            col = step // bin_steps
            s, c, u = i_s[:, col], i_c[:, col], i_u[:, col]
            a = np.abs(s)
            drive = current_scale * (s + c * (0.1 + a) + c * u * (2.0 + a)) / c_s
        v = v + dt * (leak_sign * (v - e_l) / tau_s + drive - w / c_s)
        w = w - dt * w / tau_w
        th = th - dt * (th - v_th0) / th_tau
        np.minimum(vmin, v, out=vmin)
        np.maximum(over, v - th, out=over)
        fired = v >= th
        if fired.any():
            ids = np.flatnonzero(fired)
            spikes_n.append(ids)
            spikes_t.append(np.full(ids.size, (step + 1) * dt))
            v[ids] = v_reset
            th[ids] += th_inc
            w[ids] += b
    if spikes_n:
        sn = np.concatenate(spikes_n)
        st = np.concatenate(spikes_t)
    else:
        sn = np.zeros(0, dtype=np.int64)
        st = np.zeros(0)
    return sn.astype(np.int64), st, vmin, over, v, w, th


# ---------------------------------------------------------------------------
# cart-pole

GRAVITY = 9.8
MASSCART = 1.0
MASSPOLE = 0.1
LENGTH = 0.5
FORCE_MAG = 10.0
THETA_LIMIT = 12 * 2 * math.pi / 360
X_LIMIT = 2.4


def cartpole_step(state: np.ndarray, action: np.ndarray, dt: float) -> np.ndarray:
    """Euler step of the classic cart-pole ODE for a batch of states (P, 4)."""
    x, xd, th, thd = state[..., 0], state[..., 1], state[..., 2], state[..., 3]
    total = MASSCART + MASSPOLE
    pml = MASSPOLE * LENGTH
    force = FORCE_MAG * action
    c = np.cos(th)
    s = np.sin(th)
    tmp = (force + pml * thd * thd * s) / total
    tha = (GRAVITY * s - c * tmp) / (LENGTH * (4.0 / 3.0 - MASSPOLE * c * c / total))
    xa = tmp - pml * tha * c / total
    return np.stack([x + dt * xd, xd + dt * xa, th + dt * thd, thd + dt * tha], axis=-1)


def observe(state: np.ndarray, noise_row: np.ndarray, n_noise: int) -> np.ndarray:
    """Observation rows ``[noise..., x, xd, cos, sin, thd, ...noise]`` for (P, 4) states."""
    p = state.shape[0]
    phys = np.stack(
        [state[:, 0], state[:, 1], np.cos(state[:, 2]), np.sin(state[:, 2]), state[:, 3]], axis=1
    )
    if n_noise == 0:
        return phys
    h = n_noise // 2
    nz = np.broadcast_to(noise_row, (p, n_noise))
    return np.concatenate([nz[:, :h], phys, nz[:, h:]], axis=1)


def co4_policy_act(theta, dims, obs, prev_obs, prev_act, dt):
    """Batched Co4 sensory policy.  ``theta`` (P, n); obs (P, S).  Returns +-1 actions."""
    z = co4_policy_message(theta, dims, obs, prev_obs, prev_act, dt)
    p = theta.shape[0]
    h, d, m = dims
    off = _co4_offsets(h, d, m)
    wo = theta[:, off["wo"]:off["wo"] + m * d]
    bo = theta[:, off["bo"]]
    out = np.einsum("pf,pf->p", z.reshape(p, -1), wo) + bo
    return np.where(out > 0, 1.0, -1.0)


def co4_policy_message(theta, dims, obs, prev_obs, prev_act, dt, per_sensor=False):
    """Evidence sees each sensor's reading, its rate of change and the previous action."""
    h, d, m = dims
    off = _co4_offsets(h, d, m)
    p, s = obs.shape

    def take(name, shape):
        size = int(np.prod(shape))
        return theta[:, off[name]:off[name] + size].reshape((p,) + shape)

    wk1 = take("wk1", (3, h))
    bk1 = take("bk1", (h,))
    wk2 = take("wk2", (h, d))
    wv1 = take("wv1", (1, h))
    bv1 = take("bv1", (h,))
    wv2 = take("wv2", (h, d))
    q = take("q", (m, d))
    act = np.broadcast_to(np.asarray(prev_act, dtype=np.float64).reshape(-1, 1), (p, s))
    ink = np.stack([obs, (obs - prev_obs) / dt, act], axis=-1)
    hk = np.tanh(np.einsum("psi,pih->psh", ink, wk1) + bk1[:, None, :])
    k = np.einsum("psh,phd->psd", hk, wk2)
    hv = np.tanh(obs[:, :, None] * wv1[:, 0][:, None, :] + bv1[:, None, :])
    v = np.einsum("psh,phd->psd", hv, wv2)
    r = k[:, None, :, :]
    c = q[:, :, None, :] * v[:, None, :, :]
    zz = np.clip(r * r + 2.0 * r + c * (1.0 + np.abs(r)), 0.0, 6.0)
    if per_sensor:
        return zz
    return zz.mean(axis=2)


def _co4_offsets(h, d, m):
    sizes = [("wk1", 3 * h), ("bk1", h), ("wk2", h * d), ("wv1", h), ("bv1", h),
             ("wv2", h * d), ("q", m * d), ("wo", m * d), ("bo", 1)]
    off = {}
    o = 0
    for name, sz in sizes:
        off[name] = o
        o += sz
    off["total"] = o
    return off


def co4_param_count(h, d, m) -> int:
    return _co4_offsets(h, d, m)["total"]


def mlp_param_count(s, h) -> int:
    return s * h + h + h + 1


def mlp_policy_act(theta, dims, obs):
    (h,) = dims
    p, s = obs.shape
    w1 = theta[:, : s * h].reshape(p, s, h)
    b1 = theta[:, s * h: s * h + h]
    w2 = theta[:, s * h + h: s * h + 2 * h]
    b2 = theta[:, s * h + 2 * h]
    hid = np.tanh(np.einsum("ps,psh->ph", obs, w1) + b1)
    out = np.einsum("ph,ph->p", hid, w2) + b2
    return np.where(out > 0, 1.0, -1.0)


def rollout_population(kind, theta, dims, init_states, noise, perm, max_steps, dt):
    """Return episode returns (P, n_episodes) for every member on every episode."""
    theta = np.ascontiguousarray(theta, dtype=np.float64)
    p = theta.shape[0]
    n_ep = init_states.shape[0]
    n_noise = noise.shape[2]
    returns = np.zeros((p, n_ep))
    for e in range(n_ep):
        state = np.tile(init_states[e], (p, 1))
        alive = np.ones(p, dtype=bool)
        prev_act = np.zeros(p)
        prev_obs = None
        for t in range(max_steps):
            obs = observe(state, noise[e, t], n_noise)[:, perm]
            if prev_obs is None:
                prev_obs = obs
            if kind == "co4":
                act = co4_policy_act(theta, dims, obs, prev_obs, prev_act, dt)
            else:
                act = mlp_policy_act(theta, dims, obs)
            prev_obs = obs
            prev_act = act
            state = cartpole_step(state, act, dt)
            returns[alive, e] += 1.0
            alive &= ~((np.abs(state[:, 2]) > THETA_LIMIT) | (np.abs(state[:, 0]) > X_LIMIT))
            if not alive.any():
                break
    return returns
