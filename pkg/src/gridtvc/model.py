"""Graph neural ODE over hyper-edge contexts, with exact reverse-mode VJPs.

Per-class encoders embed edge features; address latents then evolve from
zero over unit artificial time under a learned drive fed by tanh-squashed
sums of per-(class, port) messages; per-controller decoders read out the
surrogate decision.  Integration is fixed-step explicit Euler, and the
backward sweep recomputes segments between checkpoints instead of storing
every step.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .gridgen import Normalizer
from .h2mg import CONTROLLER_CLASSES, H2MGContext, SCHEMA, SurrogateDecision, schema_hash


@dataclass(frozen=True)
class MLPSpec:
    in_width: int
    hidden: tuple[int, ...]
    out_width: int
    leaky_slope: float = 0.01
    activate_output: bool = False

    @property
    def widths(self) -> list[tuple[int, int]]:
        dims = [self.in_width, *self.hidden, self.out_width]
        return list(zip(dims[:-1], dims[1:]))


@dataclass(frozen=True)
class ModelConfig:
    latent_dim: int = 64
    encoder_out: int = 64
    encoder_hidden: tuple[int, ...] = (128, 128)
    message_hidden: tuple[int, ...] = (128, 128)
    decoder_hidden: tuple[int, ...] = (128, 128)
    dt: float = 0.005
    leaky_slope: float = 0.01
    checkpoint_every: int = 20

    @property
    def steps(self) -> int:
        return round(1.0 / self.dt)

    def to_json(self) -> dict:
        return {
            "latent_dim": self.latent_dim,
            "encoder_out": self.encoder_out,
            "encoder_hidden": list(self.encoder_hidden),
            "message_hidden": list(self.message_hidden),
            "decoder_hidden": list(self.decoder_hidden),
            "dt": self.dt,
            "leaky_slope": self.leaky_slope,
            "checkpoint_every": self.checkpoint_every,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "ModelConfig":
        return cls(
            latent_dim=int(doc["latent_dim"]),
            encoder_out=int(doc["encoder_out"]),
            encoder_hidden=tuple(doc["encoder_hidden"]),
            message_hidden=tuple(doc["message_hidden"]),
            decoder_hidden=tuple(doc["decoder_hidden"]),
            dt=float(doc["dt"]),
            leaky_slope=float(doc["leaky_slope"]),
            checkpoint_every=int(doc["checkpoint_every"]),
        )


def _mlp_specs(cfg: ModelConfig) -> dict[str, MLPSpec]:
    """Every parameterized function, keyed by its checkpoint name prefix."""
    d, e = cfg.latent_dim, cfg.encoder_out
    specs: dict[str, MLPSpec] = {}
    for cname in sorted(SCHEMA):
        cs = SCHEMA[cname]
        specs[f"encoder.{cname}"] = MLPSpec(
            len(cs.context_feature_names), cfg.encoder_hidden, e, cfg.leaky_slope)
        for pname in cs.port_names:
            specs[f"message.{cname}.{pname}"] = MLPSpec(
                len(cs.port_names) * d + e, cfg.message_hidden, d, cfg.leaky_slope)
        if cs.is_controller:
            specs[f"decoder.{cname}"] = MLPSpec(
                e + len(cs.port_names) * d, cfg.decoder_hidden, cs.decision_dim,
                cfg.leaky_slope)
    specs["dynamics"] = MLPSpec(2 * d, (), d, cfg.leaky_slope, activate_output=True)
    return specs


@dataclass
class ModelParams:
    """Flat name-to-array parameter store plus the architecture hyper-params."""

    config: ModelConfig
    values: dict[str, np.ndarray] = field(default_factory=dict)

    def zeros_like(self) -> "ModelParams":
        return ModelParams(self.config,
                           {k: np.zeros_like(v) for k, v in self.values.items()})

    def count(self) -> int:
        return sum(v.size for v in self.values.values())


def init_params(config: ModelConfig = ModelConfig(),
                rng: np.random.Generator | None = None,
                zero: bool = False) -> ModelParams:
    """Fan-in-scaled uniform weights, zero biases, drawn in sorted name order."""
    if rng is None:
        rng = np.random.default_rng(0)
    values: dict[str, np.ndarray] = {}
    for prefix, spec in sorted(_mlp_specs(config).items()):
        for layer, (n_in, n_out) in enumerate(spec.widths):
            bound = 1.0 / np.sqrt(max(n_in, 1))
            w = np.zeros((n_out, n_in)) if zero or n_in == 0 \
                else rng.uniform(-bound, bound, size=(n_out, n_in))
            values[f"{prefix}.layer{layer}.weight"] = w
            values[f"{prefix}.layer{layer}.bias"] = np.zeros(n_out)
    return ModelParams(config, values)


class _MLP:
    """Stateless view over the flat parameter dict for one function."""

    def __init__(self, params: ModelParams, prefix: str, spec: MLPSpec):
        self.prefix = prefix
        self.spec = spec
        self.layers = []
        for layer in range(len(spec.widths)):
            self.layers.append((params.values[f"{prefix}.layer{layer}.weight"],
                                params.values[f"{prefix}.layer{layer}.bias"]))

    def forward(self, x: np.ndarray) -> np.ndarray:
        out, _ = self.forward_cached(x, keep=False)
        return out

    def forward_cached(self, x: np.ndarray, keep: bool = True):
        cache = []
        h = x
        last = len(self.layers) - 1
        for i, (w, b) in enumerate(self.layers):
            pre = h @ w.T + b
            if keep:
                cache.append((h, pre))
            if i < last or self.spec.activate_output:
                h = np.where(pre > 0, pre, self.spec.leaky_slope * pre)
            else:
                h = pre
        return h, cache

    def backward(self, cache, dout: np.ndarray, grads: dict[str, np.ndarray]):
        """Accumulate parameter grads; return the input cotangent."""
        last = len(self.layers) - 1
        d = dout
        for i in range(last, -1, -1):
            w, _ = self.layers[i]
            h_in, pre = cache[i]
            if i < last or self.spec.activate_output:
                d = d * np.where(pre > 0, 1.0, self.spec.leaky_slope)
            grads[f"{self.prefix}.layer{i}.weight"] += d.T @ h_in
            grads[f"{self.prefix}.layer{i}.bias"] += d.sum(axis=0)
            d = d @ w
        return d


class _Prepared:
    """Index arrays and feature matrices for one context."""

    def __init__(self, x: H2MGContext):
        self.n_addr = x.address_count
        self.classes: list[tuple[str, list[str], np.ndarray, np.ndarray]] = []
        for cname in sorted(x.edges):
            edges = x.sorted_edges(cname)
            if not edges:
                continue
            cs = SCHEMA[cname]
            ids = [e.id for e in edges]
            feats = np.array(
                [[0.0 if e.features[f] is None else float(e.features[f])
                  for f in cs.context_feature_names] for e in edges],
                dtype=float).reshape(len(edges), len(cs.context_feature_names))
            ports = np.array([[e.ports[p] for p in cs.port_names] for e in edges],
                             dtype=int)
            self.classes.append((cname, ids, feats, ports))


def _gather(h: np.ndarray, ports: np.ndarray) -> np.ndarray:
    n_e, n_p = ports.shape
    return h[ports.reshape(-1)].reshape(n_e, n_p * h.shape[1])


class _Engine:
    """Shared forward machinery for plain evaluation and the VJP sweep."""

    def __init__(self, params: ModelParams, x: H2MGContext):
        self.params = params
        self.cfg = params.config
        self.prep = _Prepared(x)
        specs = _mlp_specs(self.cfg)
        self.enc = {c: _MLP(params, f"encoder.{c}", specs[f"encoder.{c}"])
                    for c, _, _, _ in self.prep.classes}
        self.msg = {}
        for cname, _, _, _ in self.prep.classes:
            for pname in SCHEMA[cname].port_names:
                key = f"message.{cname}.{pname}"
                self.msg[(cname, pname)] = _MLP(params, key, specs[key])
        self.dec = {c: _MLP(params, f"decoder.{c}", specs[f"decoder.{c}"])
                    for c, _, _, _ in self.prep.classes
                    if SCHEMA[c].is_controller}
        self.dyn = _MLP(params, "dynamics", specs["dynamics"])
        self.xt: dict[str, np.ndarray] = {}
        for cname, _, feats, _ in self.prep.classes:
            self.xt[cname] = self.enc[cname].forward(feats)

    def step(self, h: np.ndarray, keep: bool = False):
        """One Euler step; optionally keep every intermediate for backprop."""
        d = self.cfg.latent_dim
        s = np.zeros((self.prep.n_addr, d))
        cls_cache = {}
        for cname, _, _, ports in self.prep.classes:
            u = np.concatenate([_gather(h, ports), self.xt[cname]], axis=1)
            stack = np.empty((ports.shape[0], ports.shape[1], d))
            caches = []
            for k, pname in enumerate(SCHEMA[cname].port_names):
                out, cache = self.msg[(cname, pname)].forward_cached(u, keep=keep)
                stack[:, k, :] = out
                caches.append(cache)
            # accumulation order: class name, then edge id, then port name
            np.add.at(s, ports.reshape(-1), stack.reshape(-1, d))
            if keep:
                cls_cache[cname] = (u, caches)
        mt = np.tanh(s)
        drive, dyn_cache = self.dyn.forward_cached(
            np.concatenate([h, mt], axis=1), keep=keep)
        h_next = h + self.cfg.dt * drive
        return h_next, (mt, cls_cache, dyn_cache)

    def integrate(self, collect_every: int | None = None):
        """Run all Euler steps; return final latents and optional checkpoints."""
        h = np.zeros((self.prep.n_addr, self.cfg.latent_dim))
        checkpoints = {0: h.copy()} if collect_every else None
        for k in range(self.cfg.steps):
            h, _ = self.step(h)
            if collect_every and (k + 1) % collect_every == 0:
                checkpoints[k + 1] = h.copy()
        return h, checkpoints

    def decode(self, h: np.ndarray) -> dict[str, dict[str, np.ndarray]]:
        out: dict[str, dict[str, np.ndarray]] = {}
        for cname, ids, _, ports in self.prep.classes:
            if cname not in self.dec:
                continue
            u = np.concatenate([self.xt[cname], _gather(h, ports)], axis=1)
            z = self.dec[cname].forward(u)
            out[cname] = {eid: z[i].copy() for i, eid in enumerate(ids)}
        return out


def forward(params: ModelParams, x: H2MGContext) -> SurrogateDecision:
    """Raw surrogate decision for a normalized context (offsets not applied)."""
    eng = _Engine(params, x)
    h, _ = eng.integrate()
    return SurrogateDecision(eng.decode(h))


def vjp(params: ModelParams, x: H2MGContext,
        cotangent: dict[str, dict[str, np.ndarray]]) -> ModelParams:
    """Parameter cotangent of ``forward`` for a given output cotangent.

    Reverse accumulation runs through the decoders, every Euler step, and
    the encoders.  Memory stays bounded by re-integrating each checkpoint
    segment during the sweep.
    """
    eng = _Engine(params, x)
    cfg = params.config
    every = max(1, min(cfg.checkpoint_every, cfg.steps))
    h_final, checkpoints = eng.integrate(collect_every=every)

    grads = params.zeros_like().values
    xbar = {cname: np.zeros_like(xt) for cname, xt in eng.xt.items()}
    hbar = np.zeros_like(h_final)

    # Decoders
    for cname, ids, _, ports in eng.prep.classes:
        if cname not in eng.dec:
            continue
        d_out = np.array([np.asarray(cotangent.get(cname, {}).get(
            eid, np.zeros(SCHEMA[cname].decision_dim)), dtype=float)
            for eid in ids])
        u = np.concatenate([eng.xt[cname], _gather(h_final, ports)], axis=1)
        _, cache = eng.dec[cname].forward_cached(u)
        du = eng.dec[cname].backward(cache, d_out, grads)
        e = cfg.encoder_out
        xbar[cname] += du[:, :e]
        dh = du[:, e:].reshape(len(ids), -1, cfg.latent_dim)
        np.add.at(hbar, ports.reshape(-1), dh.reshape(-1, cfg.latent_dim))

    # Euler steps, newest segment first
    starts = sorted(checkpoints, reverse=True)
    for seg_start in starts:
        seg_end = min(seg_start + every, cfg.steps)
        if seg_start == cfg.steps:
            continue
        h = checkpoints[seg_start]
        trail = []
        for _ in range(seg_start, seg_end):
            h_next, internals = eng.step(h, keep=True)
            trail.append(internals)
            h = h_next
        for mt, cls_cache, dyn_cache in reversed(trail):
            d_pre = cfg.dt * hbar
            du = eng.dyn.backward(dyn_cache, d_pre, grads)
            d = cfg.latent_dim
            hbar_k = hbar + du[:, :d]
            sbar = du[:, d:] * (1.0 - mt * mt)
            for cname, _, _, ports in eng.prep.classes:
                u, caches = cls_cache[cname]
                mbar = sbar[ports.reshape(-1)].reshape(
                    ports.shape[0], ports.shape[1], d)
                du_cls = np.zeros_like(u)
                for kp, pname in enumerate(SCHEMA[cname].port_names):
                    du_cls += eng.msg[(cname, pname)].backward(
                        caches[kp], mbar[:, kp, :], grads)
                split = ports.shape[1] * d
                dh_e = du_cls[:, :split].reshape(-1, d)
                np.add.at(hbar_k, ports.reshape(-1), dh_e)
                xbar[cname] += du_cls[:, split:]
            hbar = hbar_k

    # Encoders
    for cname, _, feats, _ in eng.prep.classes:
        _, cache = eng.enc[cname].forward_cached(feats)
        eng.enc[cname].backward(cache, xbar[cname], grads)

    return ModelParams(cfg, grads)


# ---------------------------------------------------------------------------
# Checkpoint files

def save_checkpoint(path: str | Path, params: ModelParams,
                    normalizer: Normalizer | None = None,
                    seed: int | None = None,
                    extra: dict | None = None) -> None:
    meta = {
        "config": params.config.to_json(),
        "schema_hash": schema_hash(),
        "normalizer_hash": normalizer.digest() if normalizer else None,
        "seed": seed,
    }
    if extra:
        meta.update(extra)
    arrays = {f"param/{k}": v for k, v in params.values.items()}
    np.savez(path, __meta__=json.dumps(meta, sort_keys=True), **arrays)


def load_checkpoint(path: str | Path) -> tuple[ModelParams, dict]:
    with np.load(path, allow_pickle=False) as blob:
        meta = json.loads(str(blob["__meta__"]))
        values = {k[len("param/"):]: blob[k] for k in blob.files
                  if k.startswith("param/")}
    params = ModelParams(ModelConfig.from_json(meta["config"]), values)
    return params, meta
