"""Policy files: JSON text with a layer-size header.

Floats are written with ``repr`` precision so a load/save round trip is
exact, and keys are sorted so identical parameters give identical bytes.
"""

from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np

from .ddpg import DdpgAgent, DdpgConfig
from .dqn import DqnAgent, DqnConfig
from .nn import Mlp, RunningNorm

FORMAT = "gridgame-policy"
VERSION = 1


class PolicyFormatError(ValueError):
    pass


def _net_state(net: Mlp) -> dict:
    return {"sizes": list(net.sizes),
            "weights": [w.tolist() for w in net.weights],
            "biases": [b.tolist() for b in net.biases]}


def _net_from(d: dict) -> Mlp:
    net = Mlp(d["sizes"])
    for k, (w, b) in enumerate(zip(d["weights"], d["biases"])):
        w, b = np.array(w, dtype=float), np.array(b, dtype=float)
        if w.shape != net.weights[k].shape or b.shape != net.biases[k].shape:
            raise PolicyFormatError("layer shape does not match the size header")
        net.weights[k], net.biases[k] = w, b
    return net


def policy_dict(agent) -> dict:
    if isinstance(agent, DdpgAgent):
        return {"format": FORMAT, "version": VERSION, "kind": "ddpg",
                "delta_t_max": agent.cfg.delta_t_max, "net": _net_state(agent.actor),
                "norm": agent.norm.state()}
    if isinstance(agent, DqnAgent):
        return {"format": FORMAT, "version": VERSION, "kind": "dqn",
                "n_actions": agent.cfg.n_actions, "net": _net_state(agent.q_net),
                "norm": agent.norm.state()}
    raise TypeError(f"cannot serialize {type(agent).__name__}")


def dumps(agent) -> str:
    return json.dumps(policy_dict(agent), sort_keys=True, separators=(",", ":")) + "\n"


def save_policy(agent, path: str | Path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(dumps(agent))
    os.replace(tmp, path)


def loads(text: str):
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise PolicyFormatError(f"not a policy file: {exc}") from None
    if not isinstance(d, dict) or d.get("format") != FORMAT:
        raise PolicyFormatError("not a policy file")
    if d.get("version") != VERSION:
        raise PolicyFormatError(f"unsupported policy version {d.get('version')}")
    net = _net_from(d["net"])
    norm = RunningNorm.from_state(d["norm"])
    obs_dim = net.sizes[0]
    hidden = tuple(net.sizes[1:-1])
    if d["kind"] == "ddpg":
        agent = DdpgAgent(obs_dim, DdpgConfig(hidden=hidden, delta_t_max=float(d["delta_t_max"])))
        agent.actor = net
        agent.target_actor = net.copy()
    elif d["kind"] == "dqn":
        agent = DqnAgent(obs_dim, DqnConfig(n_actions=int(d["n_actions"]), hidden=hidden))
        agent.q_net = net
        agent.target_q = net.copy()
    else:
        raise PolicyFormatError(f"unknown policy kind {d['kind']!r}")
    if norm.dim != obs_dim:
        raise PolicyFormatError("normalizer size does not match the network input")
    agent.norm = norm
    return agent


def load_policy(path: str | Path):
    return loads(Path(path).read_text())
