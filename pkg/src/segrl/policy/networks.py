"""Transformer actor and twin critics over packed segment tokens, plus the
global-representation MLP baselines."""

from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from ..errors import ConfigError, ContractViolation
from .packing import PackedBatch

TOKEN_INIT_STD = 0.02


@dataclass(frozen=True)
class ArchConfig:
    model_dim: int = 32
    decoder_layers: int = 2
    decoder_heads: int = 2
    ffn_hidden: int = 128
    dropout: float = 0.0
    proj_hidden_layers: int = 2
    proj_hidden_size: int = 128
    segment_dim: int = 32
    proprio_dim: int = 2
    action_dim: int = 2
    log_std_min: float = -10.0
    log_std_max: float = 2.0

    def __post_init__(self):
        if self.model_dim % self.decoder_heads:
            raise ConfigError("model_dim must be divisible by decoder_heads")
        if not self.log_std_min < self.log_std_max:
            raise ConfigError("log_std_min must be < log_std_max")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        if min(self.decoder_layers, self.proj_hidden_layers) < 1:
            raise ConfigError("need at least one decoder layer and one projection layer")

    def to_dict(self) -> dict:
        return asdict(self)


class ResidualMLP(nn.Module):
    """Projection head: input LayerNorm, then residual pre-norm ReLU blocks."""

    def __init__(self, in_dim: int, hidden: int, layers: int, out_dim: int):
        super().__init__()
        self.in_norm = nn.LayerNorm(in_dim)
        self.inp = nn.Linear(in_dim, hidden)
        self.norms = nn.ModuleList(nn.LayerNorm(hidden) for _ in range(layers - 1))
        self.hidden = nn.ModuleList(nn.Linear(hidden, hidden) for _ in range(layers - 1))
        self.out_norm = nn.LayerNorm(hidden)
        self.out = nn.Linear(hidden, out_dim)

    def forward(self, x):
        h = self.inp(self.in_norm(x))
        for norm, fc in zip(self.norms, self.hidden):
            h = h + fc(F.relu(norm(h)))
        return self.out(F.relu(self.out_norm(h)))


class MultiHeadAttention(nn.Module):
    def __init__(self, dim: int, heads: int, dropout: float = 0.0):
        super().__init__()
        self.heads = heads
        self.q = nn.Linear(dim, dim)
        self.kv = nn.Linear(dim, 2 * dim)
        self.out = nn.Linear(dim, dim)
        self.drop = nn.Dropout(dropout)

    def forward(self, query, slot_keys, slot_bias):
        """Attend each query to its own key slots.

        query (B, D); slot_keys (B, L, D) are the keys visible to each query;
        slot_bias (B, L, 1) is 0 for real slots and -inf for padding.
        Returns (B, D) and head-wise weights (B, H, L).
        """
        b, d = query.shape
        h, dh = self.heads, d // self.heads
        if slot_keys.shape[1] == 1:
            # softmax over a single key is exactly 1: the output is its value
            v = F.linear(slot_keys[:, 0], self.kv.weight[d:], self.kv.bias[d:])
            return self.out(self.drop(v)), query.new_ones(b, h, 1)
        k, v = self.kv(slot_keys).view(b, -1, 2, h, dh).unbind(2)
        # Few keys per query: broadcast-multiply beats many tiny batched matmuls.
        q = self.q(query).view(b, 1, h, dh)
        logits = (q * k).sum(-1) / math.sqrt(dh) + slot_bias  # (B, L, H)
        weights = torch.softmax(logits, dim=1)
        ctx = (self.drop(weights).unsqueeze(-1) * v).sum(1).reshape(b, d)
        return self.out(ctx), weights.transpose(1, 2)


class DecoderBlock(nn.Module):
    """Pre-norm block: self-attention over queries, cross-attention to keys, FFN."""

    def __init__(self, dim: int, heads: int, ffn_hidden: int, dropout: float):
        super().__init__()
        self.norm_self = nn.LayerNorm(dim)
        self.self_attn = MultiHeadAttention(dim, heads, dropout)
        self.norm_cross = nn.LayerNorm(dim)
        self.cross_attn = MultiHeadAttention(dim, heads, dropout)
        self.norm_ffn = nn.LayerNorm(dim)
        self.ffn = nn.Sequential(
            nn.Linear(dim, ffn_hidden), nn.ReLU(), nn.Dropout(dropout), nn.Linear(ffn_hidden, dim)
        )
        self.drop = nn.Dropout(dropout)

    def forward(self, x, slot_keys, slot_bias):
        h = self.norm_self(x)
        # One query per step, so each query's self-attention sees only itself.
        y, _ = self.self_attn(h, h[:, None, :], None)
        x = x + self.drop(y)
        y, weights = self.cross_attn(self.norm_cross(x), slot_keys, slot_bias)
        x = x + self.drop(y)
        x = x + self.drop(self.ffn(self.norm_ffn(x)))
        return x, weights


class KeyEncoder(nn.Module):
    """Segment and proprio tokens in model space, with bbox and token-type encodings."""

    def __init__(self, arch: ArchConfig):
        super().__init__()
        d = arch.model_dim
        self.segment_proj = nn.Linear(arch.segment_dim, d)
        self.proprio_proj = nn.Linear(arch.proprio_dim, d)
        self.bbox_pe = nn.Sequential(nn.Linear(4, d), nn.ReLU(), nn.Linear(d, d))
        self.segment_type = nn.Parameter(torch.zeros(d))
        self.proprio_type = nn.Parameter(torch.zeros(d))

    def forward(self, batch: PackedBatch):
        seg = self.segment_proj(batch.segments) + self.bbox_pe(batch.bboxes) + self.segment_type
        prop = self.proprio_proj(batch.proprio) + self.proprio_type
        return torch.cat([seg, prop], dim=0)


class SegmentDecoder(nn.Module):
    def __init__(self, arch: ArchConfig):
        super().__init__()
        self.keys = KeyEncoder(arch)
        self.query_type = nn.Parameter(torch.zeros(arch.model_dim))
        self.blocks = nn.ModuleList(
            DecoderBlock(arch.model_dim, arch.decoder_heads, arch.ffn_hidden, arch.dropout)
            for _ in range(arch.decoder_layers)
        )

    def forward(self, batch: PackedBatch, query, capture: bool = False):
        index, valid = batch.key_slots()
        slot_keys = self.keys(batch)[index]
        slot_bias = torch.zeros(valid.shape + (1,), dtype=query.dtype).masked_fill(
            ~valid[:, :, None], float("-inf")
        )
        x = query + self.query_type
        weights = None
        for block in self.blocks:
            x, weights = block(x, slot_keys, slot_bias)
        return x, (self._scatter(weights.mean(dim=1), batch) if capture else None)

    @staticmethod
    def _scatter(slot_weights, batch: PackedBatch):
        """Map (B, L) slot weights back onto the packed (B, N_total + B) key axis."""
        index, valid = batch.key_slots()
        full = slot_weights.new_zeros(batch.batch_size, batch.num_segments + batch.batch_size)
        return full.scatter_add(1, index, slot_weights * valid)


def _check_finite(batch: PackedBatch):
    # one batch feeds several networks per update; check it once
    if batch._cache.get("finite"):
        return
    for name in ("segments", "bboxes", "proprio"):
        if not torch.isfinite(getattr(batch, name)).all():
            raise ContractViolation(f"non-finite values in packed {name}")
    batch._cache["finite"] = True


class SegmentActor(nn.Module):
    def __init__(self, arch: ArchConfig):
        super().__init__()
        self.arch = arch
        self.query = nn.Parameter(torch.zeros(arch.model_dim))
        self.decoder = SegmentDecoder(arch)
        self.head = ResidualMLP(
            arch.model_dim, arch.proj_hidden_size, arch.proj_hidden_layers, 2 * arch.action_dim
        )

    def forward(self, batch: PackedBatch, capture: bool = False):
        _check_finite(batch)
        query = self.query.expand(batch.batch_size, -1)
        x, weights = self.decoder(batch, query, capture)
        mean, raw_log_std = self.head(x).chunk(2, dim=-1)
        log_std = raw_log_std.clamp(self.arch.log_std_min, self.arch.log_std_max)
        if capture:
            return mean, log_std, weights
        return mean, log_std


class SegmentCritic(nn.Module):
    def __init__(self, arch: ArchConfig):
        super().__init__()
        d = arch.model_dim
        self.action_token = nn.Parameter(torch.zeros(d))
        self.query_mlp = nn.Sequential(nn.Linear(arch.action_dim + d, d), nn.ReLU(), nn.Linear(d, d))
        self.decoder = SegmentDecoder(arch)
        self.head = ResidualMLP(d, arch.proj_hidden_size, arch.proj_hidden_layers, 1)

    def forward(self, batch: PackedBatch, actions, capture: bool = False):
        _check_finite(batch)
        token = self.action_token.expand(batch.batch_size, -1)
        query = self.query_mlp(torch.cat([actions, token], dim=-1))
        x, weights = self.decoder(batch, query, capture)
        q = self.head(x).squeeze(-1)
        return (q, weights) if capture else q


def _global_inputs(batch: PackedBatch):
    if batch.num_segments != batch.batch_size:
        raise ContractViolation("global-baseline batches must hold exactly one vector per step")
    return torch.cat([batch.segments, batch.proprio], dim=-1)


class BaselineActor(nn.Module):
    def __init__(self, arch: ArchConfig):
        super().__init__()
        self.arch = arch
        self.input_dim = arch.segment_dim + arch.proprio_dim
        self.head = ResidualMLP(
            self.input_dim, arch.proj_hidden_size, arch.proj_hidden_layers, 2 * arch.action_dim
        )

    def forward(self, batch: PackedBatch, capture: bool = False):
        if capture:
            raise ContractViolation("the global baseline has no attention to capture")
        _check_finite(batch)
        mean, raw_log_std = self.head(_global_inputs(batch)).chunk(2, dim=-1)
        return mean, raw_log_std.clamp(self.arch.log_std_min, self.arch.log_std_max)


class BaselineCritic(nn.Module):
    def __init__(self, arch: ArchConfig):
        super().__init__()
        self.input_dim = arch.segment_dim + arch.proprio_dim + arch.action_dim
        self.head = ResidualMLP(self.input_dim, arch.proj_hidden_size, arch.proj_hidden_layers, 1)

    def forward(self, batch: PackedBatch, actions, capture: bool = False):
        if capture:
            raise ContractViolation("the global baseline has no attention to capture")
        _check_finite(batch)
        return self.head(torch.cat([_global_inputs(batch), actions], dim=-1)).squeeze(-1)


class TwinCritic(nn.Module):
    def __init__(self, arch: ArchConfig, kind: str):
        super().__init__()
        cls = SegmentCritic if kind == "segment" else BaselineCritic
        self.q1 = cls(arch)
        self.q2 = cls(arch)

    def forward(self, batch: PackedBatch, actions, capture: bool = False):
        if capture:
            q1, w1 = self.q1(batch, actions, capture=True)
            q2, _ = self.q2(batch, actions, capture=True)
            return q1, q2, w1
        return self.q1(batch, actions), self.q2(batch, actions)


AGENT_KINDS = ("segment", "global_baseline")


class Agent(nn.Module):
    """Everything trainable: actor, twin critics, their targets and log-temperature.

    ``state_dict()`` names are the stable checkpoint hierarchy: ``actor.*``,
    ``critic.q1.*``, ``critic.q2.*``, ``critic_target.q1.*``,
    ``critic_target.q2.*`` and ``log_alpha``.
    """

    def __init__(self, arch: ArchConfig, kind: str = "segment"):
        super().__init__()
        if kind not in AGENT_KINDS:
            raise ConfigError(f"unknown agent kind {kind!r}")
        self.arch = arch
        self.kind = kind
        self.actor = SegmentActor(arch) if kind == "segment" else BaselineActor(arch)
        self.critic = TwinCritic(arch, "segment" if kind == "segment" else "global")
        self.critic_target = copy.deepcopy(self.critic)
        self.critic_target.requires_grad_(False)
        self.log_alpha = nn.Parameter(torch.zeros(()))

    @property
    def alpha(self) -> torch.Tensor:
        return self.log_alpha.exp()


def _init_tree(module: nn.Module, gen: torch.Generator):
    for m in module.modules():
        if isinstance(m, nn.Linear):
            bound = 1.0 / math.sqrt(m.in_features)
            m.weight.uniform_(-bound, bound, generator=gen)
            m.bias.zero_()
        elif isinstance(m, nn.LayerNorm):
            m.weight.fill_(1.0)
            m.bias.zero_()
    for name, p in module.named_parameters():
        leaf = name.rsplit(".", 1)[-1]
        if leaf in ("query", "action_token", "segment_type", "proprio_type", "query_type"):
            p.normal_(0.0, TOKEN_INIT_STD, generator=gen)


@torch.no_grad()
def init_params(arch: ArchConfig, seed: int, kind: str = "segment") -> Agent:
    """Fresh agent with seeded initialisation; targets start as exact copies."""
    agent = Agent(arch, kind)
    gen = torch.Generator().manual_seed(int(seed))
    _init_tree(agent.actor, gen)
    _init_tree(agent.critic, gen)
    agent.critic_target.load_state_dict(agent.critic.state_dict())
    agent.log_alpha.zero_()
    return agent


def actor_forward(agent: Agent, batch: PackedBatch, capture: bool = False):
    return agent.actor(batch, capture=capture)


def critic_forward(agent: Agent, batch: PackedBatch, actions, capture: bool = False, target: bool = False):
    net = agent.critic_target if target else agent.critic
    return net(batch, actions, capture=capture)


def baseline_forward(agent: Agent, batch: PackedBatch, actions=None):
    if agent.kind != "global_baseline":
        raise ContractViolation("baseline_forward needs a global-baseline agent")
    if actions is None:
        return agent.actor(batch)
    return agent.critic(batch, actions)


# -- action distribution ----------------------------------------------------

LOG_PROB_EPS = 1e-6
_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


def sample_action(mean, log_std, generator: torch.Generator | None = None, noise=None):
    """Reparameterised tanh-Gaussian sample and its log-density."""
    if noise is None:
        noise = torch.randn(mean.shape, generator=generator, dtype=mean.dtype)
    z = mean + log_std.exp() * noise
    log_prob = (
        -0.5 * noise.pow(2) - log_std - _HALF_LOG_2PI - torch.log(1.0 - torch.tanh(z).pow(2) + LOG_PROB_EPS)
    ).sum(dim=-1)
    return torch.tanh(z), log_prob


def deterministic_action(mean):
    return torch.tanh(mean)


# -- attention export ---------------------------------------------------------


@torch.no_grad()
def attention_weights(agent: Agent, batch: PackedBatch, network: str = "critic", actions=None):
    """Final-layer cross-attention of the query, averaged over heads, per step.

    Returns, for every step, a list of ``(role, box_or_proprio, weight)``
    with one entry per visible key: the step's segments then its proprio token.
    """
    if agent.kind != "segment":
        raise ContractViolation("attention capture needs a segment agent")
    if network == "actor":
        _, _, weights = agent.actor(batch, capture=True)
    elif network == "critic":
        if actions is None:
            mean, _ = agent.actor(batch)
            actions = deterministic_action(mean)
        _, _, weights = agent.critic(batch, actions, capture=True)
    else:
        raise ConfigError(f"unknown network {network!r}")
    off = batch.offsets.tolist()
    n_total = batch.num_segments
    records = []
    for b in range(batch.batch_size):
        row = weights[b]
        entries = [
            ("segment", batch.bboxes[i].tolist(), float(row[i])) for i in range(off[b], off[b + 1])
        ]
        entries.append(("proprio", batch.proprio[b].tolist(), float(row[n_total + b])))
        records.append(entries)
    return records
