"""Residual global interaction, score fusion, classification, and loss.

The cross-modal attention runs on two single global vectors, so each head's
attention weight is one logistic-squashed scalar rather than a softmax over
a sequence axis.
"""

import numpy as np

from .errors import InputError, ShapeError


def cross_attention(tape, v_g, t_g, heads, w_m):
    """m_r = t_g + W_m [head_1; ...; head_m].

    ``heads`` is a sequence of (w_q, w_k, w_v) with shapes (d_h/m) x d_h.
    Each head scales its query/key dot product by 1/sqrt(d_h/m), squashes
    it through the logistic function, and weights W_v t_g by the result.
    """
    parts = []
    for w_q, w_k, w_v in heads:
        d_head = w_q.value.shape[0]
        score = tape.dot(tape.matvec(w_q, v_g), tape.matvec(w_k, t_g))
        weight = tape.sigmoid(tape.smul(score, 1.0 / np.sqrt(d_head)))
        parts.append(tape.scalarmul(weight, tape.matvec(w_v, t_g)))
    return tape.add(t_g, tape.matvec(w_m, tape.concat(parts)))


def global_score(tape, m_r, w1, b1, w2, b2):
    """Two-layer ReLU MLP mapping the residual vector to the global score."""
    hidden = tape.relu(tape.add(tape.matvec(w1, m_r), b1))
    return tape.add(tape.matvec(w2, hidden), b2)


def classify(tape, s_g, s_r, gamma, w_c, b_c):
    """softmax(W_c [(1-gamma) s_g + gamma s_r] + b_c)."""
    gamma = float(gamma)
    if s_g.value.shape != s_r.value.shape:
        raise ShapeError(
            f"score shapes differ: {s_g.value.shape} vs {s_r.value.shape}")
    mix = tape.add(tape.smul(s_g, 1.0 - gamma), tape.smul(s_r, gamma))
    return tape.softmax_vec(tape.add(tape.matvec(w_c, mix), b_c))


def cross_entropy(tape, probs, label):
    """-log p(label); batch losses are averaged by the caller."""
    label = int(label)
    if not 0 <= label < probs.value.shape[0]:
        raise InputError(
            f"label {label} out of range for {probs.value.shape[0]} classes")
    return tape.smul(tape.log(tape.take(probs, label)), -1.0)


def cot_forward(tape, v_g, t_g, w, b):
    """Concatenation baseline: softmax over an affine map of [v_g; t_g]."""
    z = tape.concat([v_g, t_g])
    return tape.softmax_vec(tape.add(tape.matvec(w, z), b))
