"""Model assembly: parameters, per-sample forward pass, ablation wiring.

Transport plans depend only on the input features, never on trainable
parameters, so they are solved off-tape and enter the tape as constants.
Everything downstream of the aligned nodes is differentiable.

Parameter names are grouped by prefix: img.* and txt.* for the two graph
sides, reg.* for the residual attention block, head.* for the classifier,
cot.* for the concatenation baseline.
"""

from collections import OrderedDict
from dataclasses import dataclass, replace

import numpy as np

from . import fusion, graphs, transport
from .autodiff import Tensor
from .errors import ConfigError

_VARIANTS = ("tot", "cot")


@dataclass(frozen=True)
class ModelConfig:
    d_h: int = 512
    n_p2: int = 49
    n_s: int = 77
    n_classes: int = 2
    h: int = 256
    n_steps: int = 3
    m_heads: int = 8
    d_phi: int = 256
    mlp_hidden: int = 128
    gamma: float = 0.5
    sigma: float = 1.0
    rff_seed: int = 0
    epsilon: float = 0.1
    sinkhorn_iters: int = 3
    variant: str = "tot"
    no_ott: bool = False
    no_oti: bool = False
    no_dtor: bool = False
    no_reg: bool = False

    def __post_init__(self):
        if self.variant not in _VARIANTS:
            raise ConfigError(f"variant must be one of {_VARIANTS}, got {self.variant!r}")
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigError(f"gamma must be in [0,1], got {self.gamma}")
        if self.n_classes < 2:
            raise ConfigError(f"need at least 2 classes, got {self.n_classes}")
        if self.d_h % self.m_heads != 0:
            raise ConfigError(
                f"m_heads must divide d_h, got {self.m_heads} and {self.d_h}")
        for name in ("d_h", "n_p2", "n_s", "h", "m_heads", "d_phi", "mlp_hidden"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.n_steps < 0:
            raise ConfigError(f"n_steps must be >= 0, got {self.n_steps}")
        if not self.epsilon > 0:
            raise ConfigError(f"epsilon must be positive, got {self.epsilon}")
        if self.sinkhorn_iters < 1:
            raise ConfigError(f"sinkhorn_iters must be >= 1, got {self.sinkhorn_iters}")

    def kernel_config(self):
        return transport.KernelConfig(
            sigma=self.sigma, feature_dim=self.d_phi, rff_seed=self.rff_seed)

    def sinkhorn_config(self):
        return transport.SinkhornConfig(
            epsilon=self.epsilon, max_iters=self.sinkhorn_iters)

    def with_overrides(self, **kw):
        return replace(self, **kw)


def _glorot(rng, fan_in, fan_out, shape, gain=1.0):
    limit = gain * np.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-limit, limit, shape))


# Transported node features are averages over many source slots, so their
# norms sit an order of magnitude below the projected global vector. The
# aligned projection and the edge-logit maps start wider than plain Glorot
# so that edge softmaxes are selective from the first step instead of
# collapsing every graph to its node mean.
_ALIGN_GAIN = 12.0
_EDGE_GAIN = 6.0
_REG_GAIN = 4.0


def init_params(cfg, seed):
    """Fresh parameter tensors; ablated blocks still get parameters so that
    disabling a module shows up as zero gradient, not a missing key."""
    rng = np.random.default_rng(seed)
    p = OrderedDict()
    if cfg.variant == "cot":
        p["cot.w"] = _glorot(rng, 2 * cfg.d_h, cfg.n_classes,
                             (cfg.n_classes, 2 * cfg.d_h))
        p["cot.b"] = Tensor.zeros(cfg.n_classes)
        return p

    for side in ("img", "txt"):
        p[f"{side}.graph.win"] = _glorot(rng, cfg.d_phi, cfg.h, (cfg.d_phi, cfg.h),
                                         gain=_ALIGN_GAIN)
        p[f"{side}.graph.wg"] = _glorot(rng, cfg.d_h, cfg.h, (cfg.d_h, cfg.h))
        for k in range(cfg.n_steps):
            p[f"{side}.step{k}.wq"] = _glorot(rng, cfg.h, cfg.h, (cfg.h, cfg.h),
                                              gain=_EDGE_GAIN)
            p[f"{side}.step{k}.wk"] = _glorot(rng, cfg.h, cfg.h, (cfg.h, cfg.h),
                                              gain=_EDGE_GAIN)
            p[f"{side}.step{k}.wa"] = _glorot(rng, cfg.h, cfg.h, (cfg.h, cfg.h))
            p[f"{side}.step{k}.ba"] = Tensor.zeros(cfg.h)
        p[f"{side}.read.w"] = _glorot(rng, cfg.h, cfg.d_h, (cfg.h, cfg.d_h))
        p[f"{side}.read.b"] = Tensor.zeros(cfg.d_h)
        p[f"{side}.mlp.w1"] = _glorot(rng, cfg.d_h, cfg.mlp_hidden,
                                      (cfg.d_h, cfg.mlp_hidden))
        p[f"{side}.mlp.b1"] = Tensor.zeros(cfg.mlp_hidden)
        p[f"{side}.mlp.w2"] = _glorot(rng, cfg.mlp_hidden, cfg.d_h,
                                      (cfg.mlp_hidden, cfg.d_h))
        p[f"{side}.mlp.b2"] = Tensor.zeros(cfg.d_h)

    d_head = cfg.d_h // cfg.m_heads
    for i in range(cfg.m_heads):
        for w in ("wq", "wk", "wv"):
            g = _REG_GAIN if w in ("wq", "wk") else 1.0
            p[f"reg.head{i}.{w}"] = _glorot(rng, cfg.d_h, d_head,
                                            (d_head, cfg.d_h), gain=g)
    p["reg.mix"] = _glorot(rng, cfg.d_h, cfg.d_h, (cfg.d_h, cfg.d_h))
    p["reg.mlp.w1"] = _glorot(rng, cfg.d_h, cfg.d_h, (cfg.d_h, cfg.d_h))
    p["reg.mlp.b1"] = Tensor.zeros(cfg.d_h)
    p["reg.mlp.w2"] = _glorot(rng, cfg.d_h, cfg.d_h, (cfg.d_h, cfg.d_h))
    p["reg.mlp.b2"] = Tensor.zeros(cfg.d_h)
    p["head.wc"] = _glorot(rng, cfg.d_h, cfg.n_classes,
                           (cfg.n_classes, cfg.d_h))
    p["head.bc"] = Tensor.zeros(cfg.n_classes)
    return p


def lift_params(tape, params):
    """One leaf node per parameter tensor, preserving order."""
    return OrderedDict((name, tape.leaf(t)) for name, t in params.items())


def _aligned_constant(sample, cfg, src, tgt):
    """Transported source features at target slots, as plain data."""
    kcfg = cfg.kernel_config()
    C = transport.cost_matrix(src, tgt, kcfg)
    plan = transport.sinkhorn(
        C,
        transport.uniform_marginal(src.shape[0]),
        transport.uniform_marginal(tgt.shape[0]),
        cfg.sinkhorn_config(),
    )
    phi = transport.rkhs_embed(src, kcfg)
    return transport.align_nodes(plan, phi, np.sqrt(src.shape[0]))


def _graph_side(tape, pn, side, aligned, global_vec, cfg):
    nodes = graphs.build_graph(
        tape, aligned, global_vec,
        pn[f"{side}.graph.win"], pn[f"{side}.graph.wg"])
    layers = [
        (pn[f"{side}.step{k}.wq"], pn[f"{side}.step{k}.wk"],
         pn[f"{side}.step{k}.wa"], pn[f"{side}.step{k}.ba"])
        for k in range(cfg.n_steps)
    ]
    final, history = graphs.reason(tape, nodes, layers)
    score = graphs.readout(tape, final, pn[f"{side}.read.w"], pn[f"{side}.read.b"])
    return score, history


def forward_sample(tape, pn, sample, cfg):
    """Class probabilities for one sample, plus per-graph edge histories.

    ``pn`` maps parameter names to tape nodes (see lift_params). Edge
    histories are returned as plain tensors keyed 'image'/'text'.
    """
    v_g = tape.constant(sample.v_g)
    t_g = tape.constant(sample.t_g)
    if cfg.variant == "cot":
        return fusion.cot_forward(tape, v_g, t_g, pn["cot.w"], pn["cot.b"]), {}

    edge_hist = {}
    score_parts = []
    if cfg.no_dtor:
        # reasoning replaced by a per-side scorer on the raw global vector;
        # nothing touches transport or the graph parameters
        if not cfg.no_oti:
            score_parts.append(graphs.mlp_score(
                tape, v_g, pn["img.mlp.w1"], pn["img.mlp.b1"],
                pn["img.mlp.w2"], pn["img.mlp.b2"]))
        if not cfg.no_ott:
            score_parts.append(graphs.mlp_score(
                tape, t_g, pn["txt.mlp.w1"], pn["txt.mlp.b1"],
                pn["txt.mlp.w2"], pn["txt.mlp.b2"]))
    else:
        if not cfg.no_oti:
            aligned = tape.constant(_aligned_constant(
                sample, cfg, sample.V.data, sample.T.data))
            score, hist = _graph_side(tape, pn, "img", aligned, v_g, cfg)
            score_parts.append(score)
            edge_hist["image"] = [e.value for e in hist]
        if not cfg.no_ott:
            aligned = tape.constant(_aligned_constant(
                sample, cfg, sample.T.data, sample.V.data))
            score, hist = _graph_side(tape, pn, "txt", aligned, t_g, cfg)
            score_parts.append(score)
            edge_hist["text"] = [e.value for e in hist]

    if score_parts:
        s_r = score_parts[0]
        for part in score_parts[1:]:
            s_r = tape.add(s_r, part)
    else:
        s_r = tape.constant(Tensor.zeros(cfg.d_h))

    if cfg.no_reg:
        s_g = tape.constant(Tensor.zeros(cfg.d_h))
        gamma = 1.0
    else:
        heads = [
            (pn[f"reg.head{i}.wq"], pn[f"reg.head{i}.wk"], pn[f"reg.head{i}.wv"])
            for i in range(cfg.m_heads)
        ]
        m_r = fusion.cross_attention(tape, v_g, t_g, heads, pn["reg.mix"])
        s_g = fusion.global_score(
            tape, m_r, pn["reg.mlp.w1"], pn["reg.mlp.b1"],
            pn["reg.mlp.w2"], pn["reg.mlp.b2"])
        gamma = cfg.gamma

    probs = fusion.classify(tape, s_g, s_r, gamma, pn["head.wc"], pn["head.bc"])
    return probs, edge_hist


def sample_loss(tape, pn, sample, cfg):
    probs, _ = forward_sample(tape, pn, sample, cfg)
    return fusion.cross_entropy(tape, probs, sample.label)


def predict(params, sample, cfg):
    """Argmax class for one sample without touching gradients."""
    from .autodiff import Tape

    tape = Tape()
    pn = OrderedDict((name, tape.constant(t)) for name, t in params.items())
    probs, _ = forward_sample(tape, pn, sample, cfg)
    return int(np.argmax(probs.value.data)), probs.value.data
