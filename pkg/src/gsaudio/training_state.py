"""Optimizer/statistics/RNG snapshot stored alongside a checkpoint so a
training run can resume and reproduce the continuation bit for bit."""

from __future__ import annotations

import json
import os

import numpy as np

from .errors import DataError

STATE_NAME = "train_state.npz"


def save_train_state(directory, trainer):
    alpha_states = trainer.opt_alpha.state_arrays()
    net_states = trainer.opt_nets.state_arrays()
    payload = {
        "iteration": np.array(trainer.iteration, dtype=np.int64),
        "best_value": np.array(trainer.best_value, dtype=np.float64),
        "rng_state": np.array(json.dumps(trainer.rng.bit_generator.state)),
        "grad_sum": trainer.stats.grad_sum,
        "grad_counts": trainer.stats.counts,
        "alpha_m": np.stack([m[0] for m, _, _ in alpha_states]) if alpha_states else np.zeros((0, 0)),
        "alpha_v": np.stack([v[0] for _, v, _ in alpha_states]) if alpha_states else np.zeros((0, 0)),
        "alpha_t": np.array([t for _, _, t in alpha_states], dtype=np.int64),
        "net_t": np.array([t for _, _, t in net_states], dtype=np.int64),
    }
    for i, (m, v, _) in enumerate(net_states):
        payload[f"net_m_{i}"] = m
        payload[f"net_v_{i}"] = v
    tmp = os.path.join(directory, STATE_NAME + ".tmp")
    with open(tmp, "wb") as fh:
        np.savez(fh, **payload)
    os.replace(tmp, os.path.join(directory, STATE_NAME))


def load_train_state(directory, trainer):
    path = os.path.join(directory, STATE_NAME)
    if not os.path.exists(path):
        raise DataError(f"{directory}: checkpoint has no {STATE_NAME}; cannot resume")
    with np.load(path, allow_pickle=False) as data:
        trainer.iteration = int(data["iteration"])
        trainer.best_value = float(data["best_value"])
        trainer.rng.bit_generator.state = json.loads(str(data["rng_state"]))
        trainer.stats.grad_sum = data["grad_sum"].copy()
        trainer.stats.counts = data["grad_counts"].copy()
        n_alpha = data["alpha_t"].shape[0]
        if n_alpha != trainer.model.point_count:
            raise DataError("train state does not match point count")
        alpha_states = [
            (data["alpha_m"][i][None, :], data["alpha_v"][i][None, :], int(data["alpha_t"][i]))
            for i in range(n_alpha)
        ]
        trainer.opt_alpha.load_state_arrays(alpha_states)
        net_t = data["net_t"]
        net_states = [
            (data[f"net_m_{i}"].copy(), data[f"net_v_{i}"].copy(), int(net_t[i]))
            for i in range(net_t.shape[0])
        ]
        trainer.opt_nets.load_state_arrays(net_states)
