"""Labeled transition datasets and binary detection metrics.

Metrics treat higher scores as "more likely positive". Tied scores share a
threshold: ROC AUC gives ties half credit, average precision and F1 only
evaluate thresholds at distinct observed scores.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from .cai import CaiConfig, cai_and_entropy_scores
from .density import make_targets
from .env_slide import (OBJECT_IDX, ScriptedPolicy, SlideParams, add_observation_noise, dataset_std,
                        ground_truth_influence, reset, step)


@dataclass
class LabeledDataset:
    states: np.ndarray
    actions: np.ndarray
    next_states: np.ndarray
    episode_id: np.ndarray
    step: np.ndarray
    labels: np.ndarray
    contact: np.ndarray
    goals: np.ndarray
    provenance: list = field(default_factory=list)
    noise_level: float = 0.0

    def __len__(self):
        return len(self.states)

    @property
    def positive_rate(self):
        return float(np.mean(self.labels)) if len(self) else 0.0

    def model_inputs(self):
        return np.concatenate([self.states, self.actions], axis=1)

    def model_targets(self, target_idx=OBJECT_IDX, scale=1.0):
        return make_targets(self.states, self.next_states, target_idx, scale)

    def subset(self, mask):
        return LabeledDataset(self.states[mask], self.actions[mask], self.next_states[mask],
                              self.episode_id[mask], self.step[mask], self.labels[mask],
                              self.contact[mask], self.goals[mask], list(self.provenance),
                              self.noise_level)

    @classmethod
    def concatenate(cls, parts):
        parts = list(parts)
        offset = 0
        ids = []
        for p in parts:
            ids.append(p.episode_id + offset)
            offset += int(p.episode_id.max()) + 1 if len(p) else 0
        cat = lambda name: np.concatenate([getattr(p, name) for p in parts])  # noqa: E731
        prov = [tag for p in parts for tag in p.provenance]
        return cls(cat("states"), cat("actions"), cat("next_states"), np.concatenate(ids),
                   cat("step"), cat("labels"), cat("contact"), cat("goals"), prov,
                   parts[0].noise_level if parts else 0.0)

    # JSONL: one transition per line
    def to_jsonl(self, path):
        path = Path(path)
        with path.open("w") as fh:
            for i in range(len(self)):
                fh.write(json.dumps({
                    "s": self.states[i].tolist(),
                    "a": self.actions[i].tolist(),
                    "s_next": self.next_states[i].tolist(),
                    "episode_id": int(self.episode_id[i]),
                    "step": int(self.step[i]),
                    "label": bool(self.labels[i]),
                    "contact": bool(self.contact[i]),
                    "goal": float(self.goals[i]),
                }) + "\n")
        return path

    @classmethod
    def from_jsonl(cls, path):
        rows = [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]
        if not rows:
            raise ValueError(f"{path}: empty dataset")
        get = lambda k, default=None: [r.get(k, default) for r in rows]  # noqa: E731
        return cls(
            states=np.asarray(get("s"), dtype=float),
            actions=np.asarray(get("a"), dtype=float).reshape(len(rows), -1),
            next_states=np.asarray(get("s_next"), dtype=float),
            episode_id=np.asarray(get("episode_id"), dtype=int),
            step=np.asarray(get("step"), dtype=int),
            labels=np.asarray(get("label", False), dtype=bool),
            contact=np.asarray(get("contact", False), dtype=bool),
            goals=np.asarray(get("goal", np.nan), dtype=float),
        )


# -- collection ------------------------------------------------------------

class RandomPolicy:
    def begin(self, s, goal):
        pass

    def __call__(self, s, goal, t, rng):
        return float(rng.uniform(-1.0, 1.0))


class NoisyScriptedPolicy:
    """Oracle planner with RL-style exploration: Gaussian action noise plus
    a fraction of uniformly random actions."""

    def __init__(self, params, noise=0.2, eps=0.3):
        self.oracle = ScriptedPolicy(params)
        self.noise = noise
        self.eps = eps

    def begin(self, s, goal):
        self.oracle.begin(s, goal)

    def __call__(self, s, goal, t, rng):
        a = self.oracle(s, goal, t)
        if rng.random() < self.eps:
            return float(rng.uniform(-1.0, 1.0))
        return float(np.clip(a + self.noise * rng.standard_normal(), -1.0, 1.0))


def make_policy(kind, params):
    if kind == "random":
        return RandomPolicy()
    if kind == "scripted":
        return NoisyScriptedPolicy(params)
    if kind == "oracle":
        return NoisyScriptedPolicy(params, noise=0.0, eps=0.0)
    raise ValueError(f"unknown policy {kind!r}")


def collect(params: SlideParams, policy, n_episodes, rng, provenance="random"):
    """Roll out ``policy`` and record transitions with ground-truth labels.

    The label of a transition is the influence label of its start state.
    """
    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")
    T = params.episode_length
    rows = []
    for ep in range(n_episodes):
        s, goal = reset(params, rng)
        policy.begin(s, goal)
        for t in range(T):
            a = policy(s, goal, t, rng)
            label = ground_truth_influence(params, s)
            nxt, contact = step(params, s, a)
            rows.append((s.to_array(), a, nxt.to_array(), ep, t, label, contact, goal.center))
            s = nxt
    cols = list(zip(*rows))
    return LabeledDataset(
        states=np.stack(cols[0]),
        actions=np.asarray(cols[1], dtype=float).reshape(-1, 1),
        next_states=np.stack(cols[2]),
        episode_id=np.asarray(cols[3], dtype=int),
        step=np.asarray(cols[4], dtype=int),
        labels=np.asarray(cols[5], dtype=bool),
        contact=np.asarray(cols[6], dtype=bool),
        goals=np.asarray(cols[7], dtype=float),
        provenance=[provenance] * n_episodes,
    )


def collect_mixed(params: SlideParams, n_episodes, rng, kinds=("random", "scripted")):
    """Equal shares of episodes from each policy kind, concatenated."""
    shares = np.full(len(kinds), n_episodes // len(kinds))
    shares[: n_episodes % len(kinds)] += 1
    parts = [collect(params, make_policy(k, params), int(n), rng, provenance=k)
             for k, n in zip(kinds, shares) if n > 0]
    return LabeledDataset.concatenate(parts)


# -- metrics ---------------------------------------------------------------

def _check_binary(scores, labels, need_negatives=True):
    scores = np.asarray(scores, dtype=float).ravel()
    labels = np.asarray(labels).astype(bool).ravel()
    if scores.shape != labels.shape:
        raise ValueError("scores and labels differ in length")
    if not labels.any():
        raise ValueError("no positive labels")
    if need_negatives and labels.all():
        raise ValueError("no negative labels")
    return scores, labels


def roc_auc(scores, labels) -> float:
    """Mann-Whitney AUC with half credit for ties (rank-sum form)."""
    scores, labels = _check_binary(scores, labels)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    # doubled midranks are integers, keeping the numerator exact
    ranks2 = np.rint(2.0 * rankdata(scores)).astype(np.int64)
    u2 = int(ranks2[labels].sum()) - n_pos * (n_pos + 1)
    return u2 / (2 * n_pos * n_neg)


def _threshold_counts(scores, labels):
    """Cumulative (tp, fp, thresholds) at each distinct score, descending."""
    order = np.argsort(-scores, kind="mergesort")
    s = scores[order]
    y = labels[order]
    last = np.r_[np.flatnonzero(np.diff(s) != 0), s.size - 1]
    tp = np.cumsum(y)[last]
    fp = (last + 1) - tp
    return tp, fp, s[last]


def average_precision(scores, labels) -> float:
    scores, labels = _check_binary(scores, labels, need_negatives=False)
    tp, fp, _ = _threshold_counts(scores, labels)
    n_pos = tp[-1]
    recall = tp / n_pos
    precision = tp / (tp + fp)
    d_recall = np.diff(np.r_[0.0, recall])
    return float(np.sum(d_recall * precision))


def best_f1(scores, labels):
    """Best F1 over thresholds ``score >= t`` at observed scores.

    Returns ``(f1, threshold)``; among equal F1 values the lowest threshold
    wins.
    """
    scores, labels = _check_binary(scores, labels, need_negatives=False)
    tp, fp, thr = _threshold_counts(scores, labels)
    fn = tp[-1] - tp
    f1 = 2 * tp / (2 * tp + fp + fn)
    best = np.flatnonzero(f1 == f1.max())[-1]
    return float(f1[best]), float(thr[best])


def roc_curve(scores, labels):
    scores, labels = _check_binary(scores, labels)
    tp, fp, thr = _threshold_counts(scores, labels)
    tpr = np.r_[0.0, tp / tp[-1]]
    fpr = np.r_[0.0, fp / fp[-1]]
    return fpr, tpr, np.r_[np.inf, thr]


def pr_curve(scores, labels):
    scores, labels = _check_binary(scores, labels, need_negatives=False)
    tp, fp, thr = _threshold_counts(scores, labels)
    return tp / tp[-1], tp / (tp + fp), thr


def detection_metrics(scores, labels):
    f1, thr = best_f1(scores, labels)
    return {"auc": roc_auc(scores, labels), "ap": average_precision(scores, labels),
            "f1": f1, "threshold": thr, "n": int(np.size(labels))}


# -- evaluation protocol ---------------------------------------------------

def score_dataset(model, states, cfg: CaiConfig, seed):
    """Influence and entropy scores with action samples fixed by ``seed``."""
    rng = np.random.default_rng(seed)
    return cai_and_entropy_scores(model, states, cfg, rng)


def noise_sweep(model, dataset: LabeledDataset, levels, cfg: CaiConfig, seed=0, curves=None):
    """Metrics for influence and entropy scores on noised copies of the data.

    Noise std is a fraction of the per-dimension std of the clean states.
    Action samples are identical across levels, so level 0 reproduces the
    un-noised scores exactly. Labels are never noised. If ``curves`` is a
    list, ROC/PR points are appended to it.
    """
    levels = list(levels)
    if levels != sorted(levels):
        raise ValueError("noise levels must be sorted ascending")
    ref_std = dataset_std(dataset.states)
    rows = []
    for i, level in enumerate(levels):
        noise_rng = np.random.default_rng([seed, i])
        states = add_observation_noise(dataset.states, level, noise_rng, ref_std=ref_std)
        cai, ent = score_dataset(model, states, cfg, seed)
        for name, sc in (("cai", cai), ("entropy", ent)):
            m = detection_metrics(sc, dataset.labels)
            rows.append({"scorer": name, "noise_level": float(level), **m, "seed": seed})
            if curves is not None:
                fpr, tpr, _ = roc_curve(sc, dataset.labels)
                rec, prec, _ = pr_curve(sc, dataset.labels)
                curves.append({"scorer": name, "noise_level": float(level), "seed": seed,
                               "roc": (fpr, tpr), "pr": (rec, prec)})
    return rows
