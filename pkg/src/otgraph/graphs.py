"""Aligned topology graphs: construction, dynamic edge reasoning, readout.

A graph is a node matrix whose row 0 is the projected global vector and
whose remaining rows are projected transport-aligned nodes. Edges are not
stored; every reasoning step recomputes them from the current nodes with
that step's query/key weights, aggregates, and applies a ReLU transform to
all nodes synchronously.
"""

from dataclasses import dataclass

from .errors import ConfigError, ShapeError


@dataclass(frozen=True)
class ReasonerConfig:
    n_steps: int = 3
    mlp_hidden: int = 128  # width of the reasoning-free fallback scorer

    def __post_init__(self):
        if self.n_steps < 0:
            raise ConfigError(f"n_steps must be >= 0, got {self.n_steps}")
        if self.mlp_hidden < 1:
            raise ConfigError(f"mlp_hidden must be >= 1, got {self.mlp_hidden}")


def build_graph(tape, aligned, global_vec, w_in, w_g):
    """Node matrix [(1+n) x h]: projected global vector first, then nodes.

    ``aligned`` may have zero rows, leaving just the global node.
    """
    if global_vec.value.ndim != 1 or w_g.value.ndim != 2:
        raise ShapeError(
            f"global projection expects vector and matrix, got "
            f"{global_vec.value.shape} and {w_g.value.shape}")
    h = w_g.value.shape[1]
    g0 = tape.reshape(tape.vecmat(global_vec, w_g), (1, h))
    if aligned.value.shape[0] == 0:
        return g0
    return tape.vstack(g0, tape.matmul(aligned, w_in))


def edge_step(tape, nodes, w_q, w_k):
    """Row-stochastic edge matrix from pairwise query/key dot products.

    No magnitude rescaling of the scores; direction i -> j weights how much
    of node j feeds node i's next state.
    """
    q = tape.matmul(nodes, w_q)
    k = tape.matmul(nodes, w_k)
    return tape.softmax_rows(tape.matmul_nt(q, k))


def reason(tape, nodes, layers):
    """Run one edge/aggregate/transform step per layer, synchronously.

    ``layers`` is a sequence of (w_q, w_k, w_a, b_a) tuples. Returns the
    final node matrix and the per-step edge matrices.
    """
    history = []
    for w_q, w_k, w_a, b_a in layers:
        E = edge_step(tape, nodes, w_q, w_k)
        history.append(E)
        agg = tape.matmul(E, nodes)
        nodes = tape.relu(tape.add_rowvec(tape.matmul(agg, w_a), b_a))
    return nodes, history


def readout(tape, nodes, w_r, b_r):
    """Affine map of the global node (row 0) to the score dimension."""
    return tape.add(tape.vecmat(tape.take_row(nodes, 0), w_r), b_r)


def mlp_score(tape, x, w1, b1, w2, b2):
    """Two-layer ReLU scorer standing in when reasoning is disabled."""
    hidden = tape.relu(tape.add(tape.vecmat(x, w1), b1))
    return tape.add(tape.vecmat(hidden, w2), b2)
