"""The full network: frozen priors + attention + clustered routing + experts.

Forward graph per batch (B samples of T tokens, width D):

    tokens --frozen structure expert--> f_structure      (B, T, D)
    tokens --frozen semantic expert---> f_semantic       (B, T, D)
    tokens -> attention -> [clustering -> feature lookup] -> dim reduction
           -> gates -> top-K capacity dispatch -> expert mixture = f_routed
    features = f_structure + f_semantic + f_routed
    mean over tokens -> linear classifier -> task cross-entropy
    gates also feed the traceability / importance / load losses.

Every trainable piece ships an explicit backward; clustering, Top-K
selection and capacity admission are constants of the backward pass. For
finite-difference checking, a ``RoutingContext`` captured from a reference
forward pins the cluster features and the dispatch plan so the perturbed
evaluations differentiate the same masked function the backward assumes.

A ``dense`` architecture swaps the whole expert block for one FFN whose
hidden width matches the active parameter count of the routed model.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .attention import AttentionParams, attention_backward, attention_forward, init_attention
from .clustering import ClusterModel, cluster_features, fine2coarse, multistep
from .config import RunConfig
from .container import checkpoint_digest, load_checkpoint, save_checkpoint
from .datagen import TokenBatch
from .experts import (
    aggregate_features,
    dr_backward,
    dr_forward,
    expert_group_map,
    expert_mixture_backward,
    expert_mixture_forward,
    frozen_digest,
    frozen_forward,
    init_dim_reduction,
    init_expert_bank,
    make_frozen_expert,
)
from .losses import LossReport, cross_entropy, importance_loss, load_loss, traceability_loss
from .numerics import RandomStreams, array_digest
from .router import RouterParams, build_dispatch, gate_backward, gate_forward, topk_select

Array = np.ndarray

COMPONENT_PREFIXES = {
    "attention": "attn.",
    "dim_reduction": "dr.",
    "router": "router.",
    "experts": "expert.",
    "classifier": "head.",
    "dense": "dense.",
}


@dataclass
class RoutingContext:
    """Cluster features and dispatch structure pinned for gradient checks."""

    cluster_feats: Array
    plan: object


@dataclass
class ForwardState:
    batch: TokenBatch
    report: LossReport
    predictions: Array
    class_logits: Array
    pooled: Array
    f_structure: Array
    f_semantic: Array
    f_routed: Array
    features: Array
    gates: Array | None = None
    plan: object = None
    cluster_model: ClusterModel | None = None
    multistep_trace: object = None
    attended: Array | None = None
    att_cache: object = None
    dr_cache: object = None
    gate_cache: object = None
    mix_cache: object = None
    dense_cache: object = None
    d_task_logits: Array | None = None
    d_gates_tb: Array | None = None
    d_gates_ip: Array | None = None
    d_gates_load: Array | None = None
    d_logits_load: Array | None = None
    combine: Array | None = None
    renorm_sums: Array | None = None

    @property
    def aggregate_residual(self) -> float:
        return float(
            np.max(np.abs(self.features - self.f_structure - self.f_semantic - self.f_routed))
        )


def matched_dense_hidden(cfg: RunConfig) -> int:
    """Hidden width for the dense baseline that matches the routed model's
    active per-token parameter count (K experts + dimension reduction +
    router + the two frozen shared maps; attention and classifier are
    common to both architectures)."""
    d = cfg.data.width
    dh = cfg.model.expert_hidden_ratio * d
    k = cfg.router.top_k
    experts_active = k * (d * dh + dh + dh * d + d)
    dim_reduction = 2 * d * d + d
    router = cfg.model.n_experts * d + cfg.model.n_experts
    frozen = 2 * (d * d + d)
    target = experts_active + dim_reduction + router + frozen
    return max(1, round((target - d) / (2 * d + 1)))


class ComeModel:
    def __init__(self, cfg: RunConfig, params: dict, structure_seed: int, semantic_seed: int):
        cfg.validate()
        self.cfg = cfg
        self.params = params
        self.width = cfg.data.width
        self.structure_seed = structure_seed
        self.semantic_seed = semantic_seed
        self.frozen_structure = make_frozen_expert(
            "structure", self.width, structure_seed, scale=cfg.model.frozen_scale
        )
        self.frozen_semantic = make_frozen_expert(
            "semantic", self.width, semantic_seed, scale=cfg.model.frozen_scale
        )
        self.groups = expert_group_map(cfg.model.n_experts, cfg.data.n_sources)

    # ------------------------------------------------------------------
    # construction / persistence
    # ------------------------------------------------------------------

    @classmethod
    def build(cls, cfg: RunConfig) -> "ComeModel":
        cfg.validate()
        streams = RandomStreams(cfg.seed)
        d = cfg.data.width
        c = cfg.data.n_classes
        params = {}
        params.update(init_attention(d, cfg.model.heads, streams.stream("init", 0)).as_dict())
        if cfg.model.arch == "come":
            bank = init_expert_bank(
                cfg.model.n_experts,
                d,
                cfg.model.expert_hidden_ratio * d,
                cfg.data.n_sources,
                streams.stream("init", 1),
            )
            params.update(bank.params)
            params.update(init_dim_reduction(d))
            params["router.w"] = np.zeros((cfg.model.n_experts, d))
            params["router.b"] = np.zeros(cfg.model.n_experts)
        else:
            hidden = cfg.model.dense_hidden or matched_dense_hidden(cfg)
            r = streams.stream("init", 3)
            lim1, lim2 = 1.0 / np.sqrt(d), 1.0 / np.sqrt(hidden)
            params["dense.w1"] = r.uniform(-lim1, lim1, size=(d, hidden))
            params["dense.b1"] = np.zeros(hidden)
            params["dense.w2"] = r.uniform(-lim2, lim2, size=(hidden, d))
            params["dense.b2"] = np.zeros(d)
        head_rng = streams.stream("init", 2)
        params["head.w"] = head_rng.normal(scale=1.0 / np.sqrt(d), size=(d, c))
        params["head.b"] = np.zeros(c)
        structure_seed = int(streams.stream("init", 10).integers(2**62))
        semantic_seed = int(streams.stream("init", 11).integers(2**62))
        return cls(cfg, params, structure_seed, semantic_seed)

    def save(self, path):
        return save_checkpoint(path, self.params, self.structure_seed, self.semantic_seed)

    @classmethod
    def from_checkpoint(cls, cfg: RunConfig, path) -> "ComeModel":
        params, st_seed, se_seed = load_checkpoint(path)
        reference = cls.build(cfg)
        if set(params) != set(reference.params):
            raise ValueError(
                f"checkpoint parameters {sorted(set(params) ^ set(reference.params))} "
                f"do not match the configured architecture"
            )
        for name, arr in params.items():
            if arr.shape != reference.params[name].shape:
                raise ValueError(
                    f"checkpoint blob {name!r} has shape {arr.shape}, "
                    f"expected {reference.params[name].shape}"
                )
        return cls(cfg, params, st_seed, se_seed)

    # ------------------------------------------------------------------
    # digests
    # ------------------------------------------------------------------

    def parameter_digest(self) -> str:
        return checkpoint_digest(self.params, self.structure_seed, self.semantic_seed)

    def frozen_digests(self) -> dict:
        return {
            "structure": frozen_digest(self.frozen_structure),
            "semantic": frozen_digest(self.frozen_semantic),
        }

    # ------------------------------------------------------------------
    # forward
    # ------------------------------------------------------------------

    def _attention_params(self) -> AttentionParams:
        return AttentionParams(
            heads=self.cfg.model.heads,
            wq=self.params["attn.wq"],
            wk=self.params["attn.wk"],
            wv=self.params["attn.wv"],
            wo=self.params["attn.wo"],
        )

    def _router_params(self) -> RouterParams:
        return RouterParams(
            weight=self.params["router.w"],
            bias=self.params["router.b"],
            temperature=self.cfg.router.temperature,
            top_k=self.cfg.router.top_k,
            capacity_factor=self.cfg.router.capacity_factor,
        )

    def _cluster(self, flat: Array, rng):
        cfg = self.cfg.clustering
        if self.cfg.ablation.no_clustering or cfg.strategy == "none":
            return np.zeros_like(flat), None, None
        if cfg.strategy == "fine2coarse":
            model = fine2coarse(
                flat, m=cfg.fine_clusters, k=cfg.coarse_clusters, rng=rng,
                max_iters=cfg.max_iters,
            )
            return cluster_features(model), model, None
        model, trace = multistep(
            flat, k=cfg.clusters, steps=cfg.steps,
            min_cluster_fraction=cfg.min_cluster_fraction, rng=rng,
            max_iters=cfg.max_iters,
        )
        return cluster_features(model), model, trace

    def forward(self, batch: TokenBatch, cluster_rng=None,
                frozen_ctx: RoutingContext | None = None) -> ForwardState:
        if self.cfg.model.arch == "dense":
            return self._forward_dense(batch)
        cfg = self.cfg
        b, t, d = batch.tokens.shape
        n = b * t

        zeros = np.zeros((b, t, d))
        f_structure = (
            zeros if cfg.structure_disabled()
            else frozen_forward(self.frozen_structure, batch.tokens)
        )
        f_semantic = (
            zeros if cfg.semantic_disabled()
            else frozen_forward(self.frozen_semantic, batch.tokens)
        )

        att_out, att_cache = attention_forward(batch.tokens, self._attention_params())
        attended = batch.tokens + att_out if cfg.model.attention_residual else att_out
        flat = attended.reshape(n, d)

        cluster_model = None
        trace = None
        if frozen_ctx is not None:
            feats = frozen_ctx.cluster_feats
        else:
            if cluster_rng is None:
                cluster_rng = np.random.default_rng(0)
            feats, cluster_model, trace = self._cluster(flat, cluster_rng)

        routed_in, dr_cache = dr_forward(flat, feats, self.params)
        router = self._router_params()
        gates, gate_cache = gate_forward(routed_in, router)

        if frozen_ctx is not None:
            plan = frozen_ctx.plan
        else:
            sel, weights = topk_select(gates, router.top_k, cfg.router.renormalize_topk)
            plan = build_dispatch(sel, weights, router.n_experts, router.capacity_factor)

        renorm_sums = None
        if cfg.router.renormalize_topk:
            picked = np.take_along_axis(gates, plan.selection, axis=1)
            renorm_sums = picked.sum(axis=1, keepdims=True)
            combine = np.zeros_like(gates)
            np.put_along_axis(combine, plan.selection, picked / renorm_sums, axis=1)
        else:
            combine = gates

        mix_out, mix_cache = expert_mixture_forward(
            self.params, router.n_experts, plan, routed_in, combine
        )
        f_routed = mix_out.reshape(b, t, d)

        features = aggregate_features(f_structure, f_semantic, f_routed)
        pooled = features.mean(axis=1)
        class_logits = pooled @ self.params["head.w"] + self.params["head.b"]
        task, d_task = cross_entropy(class_logits, batch.labels)

        tb_weight = cfg.losses.tb_weight if cfg.traceability_active() else 0.0
        l_tb, d_tb, clamped = traceability_loss(
            gates, batch.token_sources, self.groups, average=cfg.losses.tb_average
        )
        l_ip, d_ip, importance = importance_loss(gates)
        if cfg.losses.load_mode == "literal":
            l_load, d_load, load = load_loss(gates)
            d_logits_load = None
        else:
            l_load, d_logits_load, load = load_loss(
                gates, mode="margin", logits=gate_cache.logits,
                top_k=router.top_k, noise_scale=cfg.losses.load_noise_scale,
            )
            d_load = None

        report = LossReport(
            task_ce=task,
            l_tb=l_tb,
            l_ip=l_ip,
            l_load=l_load,
            importance=importance,
            load=load,
            tb_weight=tb_weight,
            balance_weight=cfg.losses.balance_weight,
            tb_clamped=clamped,
        )
        return ForwardState(
            batch=batch,
            report=report,
            predictions=np.argmax(class_logits, axis=1),
            class_logits=class_logits,
            pooled=pooled,
            f_structure=f_structure,
            f_semantic=f_semantic,
            f_routed=f_routed,
            features=features,
            gates=gates,
            plan=plan,
            cluster_model=cluster_model,
            multistep_trace=trace,
            attended=attended,
            att_cache=att_cache,
            dr_cache=dr_cache,
            gate_cache=gate_cache,
            mix_cache=mix_cache,
            d_task_logits=d_task,
            d_gates_tb=d_tb,
            d_gates_ip=d_ip,
            d_gates_load=d_load,
            d_logits_load=d_logits_load,
            combine=combine,
            renorm_sums=renorm_sums,
        )

    def _forward_dense(self, batch: TokenBatch) -> ForwardState:
        b, t, d = batch.tokens.shape
        att_out, att_cache = attention_forward(batch.tokens, self._attention_params())
        attended = batch.tokens + att_out if self.cfg.model.attention_residual else att_out
        flat = attended.reshape(b * t, d)
        hidden = np.tanh(flat @ self.params["dense.w1"] + self.params["dense.b1"])
        out = hidden @ self.params["dense.w2"] + self.params["dense.b2"]
        f_routed = out.reshape(b, t, d)
        zeros = np.zeros_like(f_routed)
        features = f_routed
        pooled = features.mean(axis=1)
        class_logits = pooled @ self.params["head.w"] + self.params["head.b"]
        task, d_task = cross_entropy(class_logits, batch.labels)
        report = LossReport(
            task_ce=task, l_tb=0.0, l_ip=0.0, l_load=0.0,
            importance=np.zeros(0), load=np.zeros(0),
            tb_weight=0.0, balance_weight=0.0,
        )
        return ForwardState(
            batch=batch,
            report=report,
            predictions=np.argmax(class_logits, axis=1),
            class_logits=class_logits,
            pooled=pooled,
            f_structure=zeros,
            f_semantic=zeros,
            f_routed=f_routed,
            features=features,
            attended=attended,
            att_cache=att_cache,
            dense_cache=(flat, hidden),
            d_task_logits=d_task,
        )

    # ------------------------------------------------------------------
    # backward
    # ------------------------------------------------------------------

    def backward(self, state: ForwardState) -> dict:
        """Gradient of the total loss w.r.t. every trainable parameter."""
        if self.cfg.model.arch == "dense":
            return self._backward_dense(state)
        cfg = self.cfg
        b, t, d = state.batch.tokens.shape

        grads = {name: np.zeros_like(p) for name, p in self.params.items()}
        d_logits = state.d_task_logits
        grads["head.w"] = state.pooled.T @ d_logits
        grads["head.b"] = d_logits.sum(axis=0)
        d_pooled = d_logits @ self.params["head.w"].T
        d_features = np.repeat(d_pooled[:, None, :], t, axis=1) / t
        d_routed_flat = d_features.reshape(b * t, d)

        d_in_mix, d_combine, expert_grads = expert_mixture_backward(
            d_routed_flat, state.mix_cache, self.params
        )
        grads.update(expert_grads)

        if cfg.router.renormalize_topk:
            # combine = gates[sel] / sum(gates[sel]); push back to raw gates
            d_gates_mix = np.zeros_like(state.gates)
            picked_d = np.take_along_axis(d_combine, state.plan.selection, axis=1)
            picked_w = np.take_along_axis(state.combine, state.plan.selection, axis=1)
            inner = np.sum(picked_d * picked_w, axis=1, keepdims=True)
            np.put_along_axis(
                d_gates_mix, state.plan.selection,
                (picked_d - inner) / state.renorm_sums, axis=1,
            )
        else:
            d_gates_mix = d_combine

        d_gates = d_gates_mix + state.report.tb_weight * state.d_gates_tb
        d_gates = d_gates + state.report.balance_weight * state.d_gates_ip
        extra_logits = None
        if state.d_gates_load is not None:
            d_gates = d_gates + state.report.balance_weight * state.d_gates_load
        else:
            extra_logits = state.report.balance_weight * state.d_logits_load

        d_in_router, router_grads = gate_backward(
            d_gates, state.gate_cache, self._router_params(), extra_logits
        )
        grads.update(router_grads)

        d_routed_in = d_in_mix + d_in_router
        d_attended_flat, dr_grads = dr_backward(d_routed_in, state.dr_cache, self.params)
        grads.update(dr_grads)

        d_att_out = d_attended_flat.reshape(b, t, d)
        _, attn_grads = attention_backward(d_att_out, state.att_cache, self._attention_params())
        grads.update(attn_grads)
        return grads

    def _backward_dense(self, state: ForwardState) -> dict:
        b, t, d = state.batch.tokens.shape
        grads = {name: np.zeros_like(p) for name, p in self.params.items()}
        d_logits = state.d_task_logits
        grads["head.w"] = state.pooled.T @ d_logits
        grads["head.b"] = d_logits.sum(axis=0)
        d_pooled = d_logits @ self.params["head.w"].T
        d_out = (np.repeat(d_pooled[:, None, :], t, axis=1) / t).reshape(b * t, d)
        flat, hidden = state.dense_cache
        grads["dense.w2"] = hidden.T @ d_out
        grads["dense.b2"] = d_out.sum(axis=0)
        d_hidden = d_out @ self.params["dense.w2"].T
        d_pre = d_hidden * (1.0 - hidden * hidden)
        grads["dense.w1"] = flat.T @ d_pre
        grads["dense.b1"] = d_pre.sum(axis=0)
        d_att = (d_pre @ self.params["dense.w1"].T).reshape(b, t, d)
        _, attn_grads = attention_backward(d_att, state.att_cache, self._attention_params())
        grads.update(attn_grads)
        return grads

    def loss_and_grads(self, batch: TokenBatch, cluster_rng=None,
                       frozen_ctx: RoutingContext | None = None):
        state = self.forward(batch, cluster_rng=cluster_rng, frozen_ctx=frozen_ctx)
        return state, self.backward(state)

    # ------------------------------------------------------------------
    # gradient checking support
    # ------------------------------------------------------------------

    def routing_context(self, state: ForwardState) -> RoutingContext:
        if self.cfg.model.arch == "dense":
            raise ValueError("dense architecture has no routing context")
        feats = state.dr_cache.concat[:, self.width :].copy()
        return RoutingContext(cluster_feats=feats, plan=state.plan)

    def component_names(self) -> list:
        found = set()
        for name in self.params:
            for comp, prefix in COMPONENT_PREFIXES.items():
                if name.startswith(prefix):
                    found.add(comp)
        order = ["attention", "dim_reduction", "router", "experts", "dense", "classifier"]
        return [c for c in order if c in found]


def component_grad_check(model: ComeModel, batch: TokenBatch, component: str,
                         h: float = 1e-5, cluster_rng=None):
    """Central-difference check of one component's parameters against the
    total loss, with the routing structure pinned from a reference forward."""
    from .numerics import grad_check

    prefix = COMPONENT_PREFIXES[component]
    names = sorted(n for n in model.params if n.startswith(prefix))
    if not names:
        raise ValueError(f"model has no {component!r} parameters")
    ctx = None
    if model.cfg.model.arch == "come":
        ref = model.forward(batch, cluster_rng=cluster_rng)
        ctx = model.routing_context(ref)
    shapes = [model.params[n].shape for n in names]
    sizes = [model.params[n].size for n in names]
    original = {n: model.params[n] for n in names}

    def fn(theta):
        offset = 0
        for n, shape, size in zip(names, shapes, sizes):
            model.params[n] = theta[offset : offset + size].reshape(shape)
            offset += size
        state, grads = model.loss_and_grads(batch, frozen_ctx=ctx)
        flat = np.concatenate([grads[n].ravel() for n in names])
        return state.report.total, flat

    theta0 = np.concatenate([original[n].ravel() for n in names])
    try:
        return grad_check(fn, theta0, h=h)
    finally:
        model.params.update(original)
