#!/usr/bin/env python3
"""Writes the frozen regression fixtures in tests/fixtures.

Everything here is an independent float64 re-implementation in jax: a
token-at-a-time decoder with an explicit list of cache entries, the
sliding-window eviction rule, the thought-encoding state and the GRPO loss.
Gradients come from jax.grad, so they share nothing with the C++ autodiff.

    python3 tools/oracle_fixtures.py [--out tests/fixtures]
"""

import argparse
import json
import math
import pathlib

import jax
import jax.numpy as jnp
import numpy as np

jax.config.update("jax_enable_x64", True)

EPS = 1e-5
ROPE_BASE = 10000.0


def rms(x, gain):
    return x / jnp.sqrt(jnp.mean(x * x) + EPS) * gain[0]


def gelu(x):
    return 0.5 * x * (1.0 + jnp.tanh(math.sqrt(2.0 / math.pi) * (x + 0.044715 * x ** 3)))


def rotate(x, pos, n_heads, d_head):
    out = []
    for h in range(n_heads):
        for i in range(d_head // 2):
            theta = pos / ROPE_BASE ** (2.0 * i / d_head)
            a = x[h * d_head + 2 * i]
            b = x[h * d_head + 2 * i + 1]
            out += [a * math.cos(theta) - b * math.sin(theta), a * math.sin(theta) + b * math.cos(theta)]
    return jnp.stack(out)


def n_evict(window, ratio):
    return max(1, math.ceil(ratio * window - 1e-9))


class Decoder:
    """One trajectory: explicit cache entries, PTE state and overlay."""

    def __init__(self, cfg, params, bank, window, ratio):
        self.cfg, self.p, self.bank = cfg, params, bank
        self.window, self.ratio = window, ratio
        self.entries = []  # dicts: pos, question, k[l], v[l]
        self.appended = 0
        self.segments = 0
        self.states = {}
        if bank is not None:
            for l in range(cfg["n_layers"]):
                hg = bank["h_g"]
                qg = hg @ params[f"layers.{l}.wq"].T
                kg = hg @ params[f"layers.{l}.wk"].T
                vg = hg @ params[f"layers.{l}.wv"].T
                for t in bank["targets"]:
                    a = bank[f"adapter.{l}.{t}"]
                    self.states[(l, t)] = ((qg @ a["Wa_Q"]) @ (kg @ a["Wa_K"]).T) @ (vg @ a["Wa_V"])

    def weight(self, l, name):
        w = self.p[f"layers.{l}.w{name}"]
        if self.bank is None or self.segments == 0 or name not in self.bank["targets"]:
            return w
        a = self.bank[f"adapter.{l}.{name}"]
        return w + a["A"] @ self.states[(l, name)] @ a["B"]

    def step(self, token, question):
        c = self.cfg
        nh, dh = c["n_heads"], c["d_head"]
        pos = self.appended
        x = self.p["embedding"][token]
        entry = {"pos": pos, "question": question, "k": [], "v": []}
        for l in range(c["n_layers"]):
            h = rms(x, self.p[f"layers.{l}.attn_norm"])
            q = rotate(self.weight(l, "q") @ h, pos, nh, dh)
            k = rotate(self.weight(l, "k") @ h, pos, nh, dh)
            v = self.weight(l, "v") @ h
            keys = [e["k"][l] for e in self.entries] + [k]
            vals = [e["v"][l] for e in self.entries] + [v]
            K, V = jnp.stack(keys), jnp.stack(vals)
            heads = []
            for hd in range(nh):
                sl = slice(hd * dh, (hd + 1) * dh)
                w = jax.nn.softmax(K[:, sl] @ q[sl] / math.sqrt(dh))
                heads.append(w @ V[:, sl])
            x = x + self.weight(l, "o") @ jnp.concatenate(heads)
            u = gelu(self.p[f"layers.{l}.w_up"] @ rms(x, self.p[f"layers.{l}.ffn_norm"]))
            x = x + self.p[f"layers.{l}.w_down"] @ u
            entry["k"].append(k)
            entry["v"].append(v)
        self.entries.append(entry)
        self.appended += 1
        return self.p["head"] @ rms(x, self.p["final_norm"])

    def evict(self):
        n = n_evict(self.window, self.ratio)
        victims = [e for e in self.entries if not e["question"]][:n]
        self.entries = [e for e in self.entries if e not in victims]
        if self.bank is not None:
            for l in range(self.cfg["n_layers"]):
                qg = self.bank["h_g"] @ self.p[f"layers.{l}.wq"].T
                # Evicted keys and values enter as constants.
                ke = jax.lax.stop_gradient(jnp.stack([e["k"][l] for e in victims]))
                ve = jax.lax.stop_gradient(jnp.stack([e["v"][l] for e in victims]))
                for t in self.bank["targets"]:
                    a = self.bank[f"adapter.{l}.{t}"]
                    s = self.states[(l, t)] + ((qg @ a["Wa_Q"]) @ (ke @ a["Wa_K"]).T) @ (ve @ a["Wa_V"])
                    r = jnp.sqrt(jnp.mean(s * s, axis=1, keepdims=True))
                    self.states[(l, t)] = s / r
            self.segments += 1
        return [e["pos"] for e in victims]


def forced_logprobs(cfg, params, bank, prompt, generated, window, ratio):
    """Log-probs of a fixed response plus the eviction events it triggers."""
    d = Decoder(cfg, params, bank, window, ratio)
    for t in prompt:
        logits = d.step(t, True)
    out, events = [], []
    for t, y in enumerate(generated):
        out.append(jax.nn.log_softmax(logits)[y])
        if t + 1 == len(generated):
            break
        if len(d.entries) == window:
            events.append({"step": t + 1, "positions": d.evict()})
        logits = d.step(y, False)
    return jnp.stack(out), events, d


def random_params(rng, cfg, scale):
    dm, ff, vocab = cfg["d_model"], cfg["d_ff"], cfg["vocab_size"]
    p = {"embedding": rng.normal(0, scale, (vocab, dm))}
    for l in range(cfg["n_layers"]):
        p[f"layers.{l}.attn_norm"] = 1.0 + rng.normal(0, 0.1, (1, dm))
        for w in ("wq", "wk", "wv", "wo"):
            p[f"layers.{l}.{w}"] = rng.normal(0, scale, (dm, dm))
        p[f"layers.{l}.ffn_norm"] = 1.0 + rng.normal(0, 0.1, (1, dm))
        p[f"layers.{l}.w_up"] = rng.normal(0, scale, (ff, dm))
        p[f"layers.{l}.w_down"] = rng.normal(0, scale, (dm, ff))
    p["final_norm"] = 1.0 + rng.normal(0, 0.1, (1, dm))
    p["head"] = rng.normal(0, scale, (vocab, dm))
    return p


def random_bank(rng, cfg, g, dc, targets, scale):
    dm = cfg["d_model"]
    bank = {"targets": targets, "h_g": rng.normal(0, scale, (g, dm))}
    for l in range(cfg["n_layers"]):
        for t in targets:
            bank[f"adapter.{l}.{t}"] = {
                "Wa_Q": rng.normal(0, scale, (dm, dc)),
                "Wa_K": rng.normal(0, scale, (dm, dc)),
                "Wa_V": rng.normal(0, scale, (dm, dc)),
                "A": rng.normal(0, scale, (dm, g)),
                "B": rng.normal(0, scale, (dc, dm)),
            }
    return bank


def flat_bank(bank):
    out = {"h_g": bank["h_g"]}
    for key, val in bank.items():
        if key.startswith("adapter."):
            for name, m in val.items():
                out[f"{key}.{name}"] = m
    return out


def unflat_bank(flat, targets):
    bank = {"targets": targets, "h_g": flat["h_g"]}
    for key, m in flat.items():
        if key.startswith("adapter."):
            prefix, name = key.rsplit(".", 1)
            bank.setdefault(prefix, {})[name] = m
    return bank


def listify(tree):
    return {k: np.asarray(v).tolist() for k, v in tree.items()}


def model_config(**kw):
    cfg = dict(n_layers=1, d_model=2, n_heads=1, d_head=2, d_ff=4, vocab_size=2, max_positions=64,
               positional_scheme="rotary", position_indexing="absolute", rope_base=ROPE_BASE, norm_eps=EPS)
    cfg.update(kw)
    return cfg


def grpo_fixture():
    cfg = model_config()
    rng = np.random.default_rng(20240501)
    params = random_params(rng, cfg, 0.8)
    bank = random_bank(rng, cfg, 1, 2, ["q", "v"], 0.8)
    prompt, window, ratio, beta, eps = [0, 1], 4, 0.25, 0.05, 1e-8
    responses = [[1, 0, 1, 1], [0, 0, 1, 0]]
    scores = np.array([1.0, 0.0])
    rewards = (scores - scores.mean()) / np.sqrt(scores.var() + eps)

    ref = {k: jnp.asarray(v) for k, v in params.items()}
    ref_logprobs = []
    for y in responses:
        lp, _, _ = forced_logprobs(cfg, ref, None, prompt, y, 10 ** 6, ratio)
        ref_logprobs.append(np.asarray(lp))

    def loss_fn(base, flat):
        b = unflat_bank(flat, ["q", "v"])
        total, tokens = 0.0, 0
        for y, r, ref_lp in zip(responses, rewards, ref_logprobs):
            lp, _, _ = forced_logprobs(cfg, base, b, prompt, y, window, ratio)
            delta = ref_lp - lp
            kl = jnp.exp(delta) - delta - 1.0
            total = total + jnp.sum(r * lp - beta * kl)
            tokens += len(y)
        return -total / tokens

    base = {k: jnp.asarray(v) for k, v in params.items()}
    flat = {k: jnp.asarray(v) for k, v in flat_bank(bank).items()}
    loss, (g_base, g_bank) = jax.value_and_grad(loss_fn, argnums=(0, 1))(base, flat)
    trajectories = []
    for y in responses:
        lp, events, _ = forced_logprobs(cfg, base, unflat_bank(flat, ["q", "v"]), prompt, y, window, ratio)
        trajectories.append({"generated": y, "logprobs": np.asarray(lp).tolist(), "evictions": events})
    return {
        "model_config": cfg,
        "pte": {"global_tokens": 1, "latent_dim": 2, "targets": ["q", "v"]},
        "params": listify(params),
        "bank": listify(flat_bank(bank)),
        "prompt": prompt,
        "window": window,
        "eviction_ratio": ratio,
        "kl_weight": beta,
        "reward_eps": eps,
        "scores": scores.tolist(),
        "rewards": rewards.tolist(),
        "trajectories": trajectories,
        "reference_logprobs": [r.tolist() for r in ref_logprobs],
        "loss": float(loss),
        "grad_model": listify(g_base),
        "grad_bank": listify(g_bank),
    }


def pte_fixture():
    cfg = model_config(d_model=4, n_heads=2, d_head=2, d_ff=8, vocab_size=3)
    rng = np.random.default_rng(7)
    params = random_params(rng, cfg, 0.7)
    bank = random_bank(rng, cfg, 1, 2, ["q", "v"], 0.7)
    prompt, generated, window, ratio = [0, 2, 1], [1, 1, 0, 2, 1], 5, 0.25
    p = {k: jnp.asarray(v) for k, v in params.items()}
    lp, events, dec = forced_logprobs(cfg, p, bank, prompt, generated, window, ratio)
    states = {f"{l}.{t}": np.asarray(s).tolist() for (l, t), s in dec.states.items()}
    deltas = {}
    for (l, t), s in dec.states.items():
        a = bank[f"adapter.{l}.{t}"]
        deltas[f"{l}.{t}"] = np.asarray(a["A"] @ s @ a["B"]).tolist()
    return {
        "model_config": cfg,
        "pte": {"global_tokens": 1, "latent_dim": 2, "targets": ["q", "v"]},
        "params": listify(params),
        "bank": listify(flat_bank(bank)),
        "prompt": prompt,
        "generated": generated,
        "window": window,
        "eviction_ratio": ratio,
        "logprobs": np.asarray(lp).tolist(),
        "evictions": events,
        "final_states": states,
        "final_deltas": deltas,
    }


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--out", default=str(pathlib.Path(__file__).resolve().parent.parent / "tests" / "fixtures"))
    args = parser.parse_args()
    out = pathlib.Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name, build in (("grpo_d2.json", grpo_fixture), ("pte_one_eviction.json", pte_fixture)):
        (out / name).write_text(json.dumps(build(), indent=1) + "\n")
        print("wrote", out / name)


if __name__ == "__main__":
    main()
