"""Federated simulation engine: rounds, aggregation, strategies.

One communication round is broadcast -> local update -> upload -> aggregate.
Everything a client sends or receives is a serialized ParamSet (optionally
carrying the style template under its reserved name), recorded in a
transcript for replay and privacy audits. Client updates within a round are
pure functions of (broadcast payload, local data, labeled rng streams), so
sequential and process-parallel execution produce identical results.

Two aggregation rules exist side by side and are never substituted for one
another: sample-count-weighted averaging (classic federated averaging, used
for the harmonizer stage and the baselines) and the plain 1/n mean (used
for joint template/model aggregation). Both are computed in centered form,
``first + reduce(x_i - first)``, so aggregating identical uploads is an
exact fixed point and a single-client round is bit-identical to direct
local training.
"""

from __future__ import annotations

import hashlib
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .config import ExperimentConfig
from .errors import AggregationError, ConfigError, ContractError, InvalidInputError, NumericError
from .colorspace import hsv_channel_means
from .harmonizer import (
    Template, channel_covariance, color_with_factors, harmonize_batch, whiten,
)
from .metrics import RunReport, aupr, cluster_compactness, dice
from .models import (
    ClfModel, Decoder, Encoder, SegModel, cross_entropy_loss, encode,
    pretrain_encoder, soft_dice_loss, softmax_probs,
)
from .optim import AdamW, SGD
from .params import ParamSet
from .seeding import derive_rng, derive_seed
from .synthdata import SiteDataset, augment, gen_pretrain_pool, generate_sites, load_dataset_dir
from .tensor import Tensor, backward, no_grad, stack

log = logging.getLogger("fettl")

TEMPLATE_KEY = "template"


# -- strategy table ----------------------------------------------------------------


@dataclass(frozen=True)
class StrategySpec:
    name: str
    harmonization: str      # none | wct | adain
    harmonizer_scope: str   # none | client | federated
    template_mode: str      # none | fixed_client | fixed_global | learned_global | learned_local
    task_init: str          # pretrained | scratch
    aggregate: str          # weighted | mean
    proximal: bool = False
    norm_kind: str = "instance"
    keep_norms_local: bool = False


STRATEGY_TABLE: Dict[str, StrategySpec] = {
    "fettl": StrategySpec("fettl", "wct", "federated", "learned_global", "pretrained", "mean"),
    "fettl_local": StrategySpec("fettl_local", "wct", "federated", "learned_local",
                                "pretrained", "mean"),
    "fettl_scratch": StrategySpec("fettl_scratch", "wct", "federated", "learned_global",
                                  "scratch", "mean"),
    "fedavg": StrategySpec("fedavg", "none", "none", "none", "scratch", "weighted"),
    "fedprox": StrategySpec("fedprox", "none", "none", "none", "scratch", "weighted",
                            proximal=True),
    "fedbn": StrategySpec("fedbn", "none", "none", "none", "scratch", "weighted",
                          norm_kind="batch", keep_norms_local=True),
    "adain_ablation": StrategySpec("adain_ablation", "adain", "client", "fixed_client",
                                   "scratch", "weighted"),
    "dataalchemy_ablation": StrategySpec("dataalchemy_ablation", "wct", "client",
                                         "fixed_client", "scratch", "weighted"),
    "fed_dataalchemy_ablation": StrategySpec("fed_dataalchemy_ablation", "wct", "federated",
                                             "fixed_client", "scratch", "weighted"),
    "global_template_ablation": StrategySpec("global_template_ablation", "wct", "federated",
                                             "fixed_global", "scratch", "weighted"),
}


# -- aggregation --------------------------------------------------------------------


def _check_compatible(sets: Sequence[ParamSet]) -> None:
    names = sets[0].names()
    shapes = {n: sets[0][n].shape for n in names}
    for ps in sets[1:]:
        if ps.names() != names:
            extra = set(ps.names()) ^ set(names)
            raise AggregationError(f"parameter name mismatch: {sorted(extra)}")
        for n in names:
            if ps[n].shape != shapes[n]:
                raise AggregationError(
                    f"shape mismatch for {n!r}: {ps[n].shape} vs {shapes[n]}")


def fedavg_aggregate(uploads: Sequence[Tuple[ParamSet, int]]) -> ParamSet:
    """Sample-count-weighted average of parameter sets."""
    if not uploads:
        raise AggregationError("no uploads to aggregate")
    sets = [u[0] for u in uploads]
    counts = np.array([u[1] for u in uploads], dtype=np.float64)
    if (counts <= 0).any():
        raise AggregationError("sample counts must be positive")
    _check_compatible(sets)
    if len(sets) == 1:
        return sets[0].copy()  # exact: a single client's round is its own mean
    weights = counts / counts.sum()
    out = ParamSet()
    for name, first in sets[0].items():
        acc = np.zeros_like(first.data)
        for w, ps in zip(weights, sets):
            acc += w * (ps[name].data - first.data)
        out.add(name, Tensor(first.data + acc))
    return out


def mean_aggregate(uploads: Sequence[Union[ParamSet, Template]]):
    """Unweighted 1/n mean; the literal joint-aggregation rule."""
    if not uploads:
        raise AggregationError("no uploads to aggregate")
    if isinstance(uploads[0], Template):
        feats = [u.features for u in uploads]
        shapes = {f.shape for f in feats}
        if len(shapes) != 1:
            raise AggregationError(f"template shape mismatch: {sorted(shapes)}")
        if len(feats) == 1:
            return Template(Tensor(feats[0].data.copy()))
        first = feats[0].data
        acc = np.zeros_like(first)
        for f in feats:
            acc += (f.data - first) / len(feats)
        return Template(Tensor(first + acc))
    sets = list(uploads)
    _check_compatible(sets)
    if len(sets) == 1:
        return sets[0].copy()
    out = ParamSet()
    for name, first in sets[0].items():
        acc = np.zeros_like(first.data)
        for ps in sets:
            acc += (ps[name].data - first.data) / len(sets)
        out.add(name, Tensor(first.data + acc))
    return out


# -- messages and transcript -----------------------------------------------------------


@dataclass
class RoundMessage:
    direction: str          # "broadcast" | "upload"
    round: int
    client_id: str
    kind: str               # "model" | "template" | "model+template" | "decoder"
    payload: bytes
    sample_count: int = 0


class Transcript:
    """Ordered log of every message crossing the client/server boundary."""

    def __init__(self):
        self.entries: List[dict] = []

    def record(self, msg: RoundMessage) -> None:
        records = [{"name": n, "shape": list(s)}
                   for n, s in ParamSet.describe_bytes(msg.payload)]
        self.entries.append({
            "direction": msg.direction,
            "round": msg.round,
            "client_id": msg.client_id,
            "kind": msg.kind,
            "sample_count": msg.sample_count,
            "nbytes": len(msg.payload),
            "sha256": hashlib.sha256(msg.payload).hexdigest(),
            "records": records,
        })

    def to_lines(self) -> str:
        import json

        return "\n".join(json.dumps(e, sort_keys=True) for e in self.entries) + "\n"

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_lines())


def audit_transcript(entries: Sequence[dict], allowed: Dict[str, tuple]) -> None:
    """Verify every payload stays within the ParamSet/Template schema.

    ``allowed`` maps permitted record names to their exact shapes. Raises
    ContractError on any undeclared name, wrong shape, or broadcast
    divergence within a round.
    """
    broadcast_digests: Dict[int, set] = {}
    for e in entries:
        for rec in e["records"]:
            name, shape = rec["name"], tuple(rec["shape"])
            if name not in allowed:
                raise ContractError(f"undeclared payload record {name!r} in round {e['round']}")
            if shape != tuple(allowed[name]):
                raise ContractError(
                    f"payload record {name!r} has shape {shape}, expected {allowed[name]}")
        if e["direction"] == "broadcast":
            broadcast_digests.setdefault((e["round"], e["kind"]), set()).add(e["sha256"])
        if e["direction"] == "upload" and e["sample_count"] <= 0:
            raise ContractError(f"upload without positive sample count in round {e['round']}")
    for (rnd, kind), digests in broadcast_digests.items():
        if len(digests) != 1:
            raise ContractError(f"round {rnd} broadcast ({kind}) not byte-identical")


def _template_bytes(t: Template) -> bytes:
    return ParamSet([(TEMPLATE_KEY, Tensor(t.features.data.copy()))]).to_bytes()


def _template_from_bytes(blob: bytes, requires_grad: bool = False) -> Template:
    ps = ParamSet.from_bytes(blob)
    return Template(Tensor(ps[TEMPLATE_KEY].data.copy(), requires_grad=requires_grad))


# -- model plumbing ----------------------------------------------------------------------


def _build_model(task: str, norm_kind: str, seed_key: tuple):
    rng = derive_rng(*seed_key)
    if task == "segmentation":
        return SegModel(rng, norm_kind=norm_kind)
    return ClfModel(rng)


def _build_encoder(params: bytes) -> Encoder:
    enc = Encoder(np.random.default_rng(0))
    enc.load_param_set(ParamSet.from_bytes(params))
    enc.freeze()
    return enc


def _build_decoder(params: bytes) -> Decoder:
    dec = Decoder(np.random.default_rng(0))
    dec.load_param_set(ParamSet.from_bytes(params))
    for _, t in dec.param_set().items():
        t.requires_grad = False
    return dec


# -- client state ------------------------------------------------------------------------


@dataclass
class ClientState:
    """Everything a simulated client owns. Raw images never leave it."""

    site: SiteDataset
    local_template: Optional[bytes] = None     # learned_local / fixed_client modes
    local_norms: Optional[bytes] = None        # fedbn: norm params + running stats
    local_decoder: Optional[bytes] = None      # client-scope harmonizer


# -- stage 1: federated harmonizer training --------------------------------------------------


def _decoder_local_steps(dec: Decoder, enc: Encoder, images: List[Tensor], rng,
                         steps: int, batch_size: int, lr: float,
                         use_augment: bool) -> None:
    params = dec.param_set()
    for _, t in params.items():
        t.requires_grad = True
    opt = AdamW(params, lr=lr, weight_decay=0.0)
    n = len(images)
    for _ in range(steps):
        idx = rng.integers(0, n, size=min(batch_size, n))
        batch = []
        for i in idx:
            img = images[int(i)]
            if use_augment:
                img, _ = augment(img, None, seed=int(rng.integers(2 ** 62)))
            batch.append(img)
        xb = stack(batch)
        opt.zero_grad()
        recon = dec(encode(enc, xb))
        loss = (xb - recon).abs().mean()
        if not np.isfinite(loss.data).all():
            raise NumericError("non-finite reconstruction loss")
        backward(loss)
        opt.step()


def train_harmonizer_federated(datasets: Sequence[SiteDataset], enc: Encoder,
                               dec0: Decoder, rounds: int, local_steps: int = 20,
                               batch_size: int = 8, lr: float = 1e-3, seed: int = 0,
                               use_augment: bool = False,
                               transcript: Optional[Transcript] = None
                               ) -> Tuple[Decoder, List[float]]:
    """FedAvg over per-site decoder training; returns the global decoder and
    the per-round pooled validation reconstruction loss."""
    if not enc.frozen:
        raise ContractError("encoder must be frozen before federated harmonizer training")
    if rounds < 0:
        raise InvalidInputError("rounds must be >= 0")
    global_params = dec0.param_set().copy()
    history: List[float] = []
    for rnd in range(rounds):
        blob = global_params.to_bytes()
        uploads = []
        for ds in datasets:
            if transcript is not None:
                transcript.record(RoundMessage("broadcast", rnd, ds.site_id, "decoder", blob))
            train_idx = ds.split_indices("train")
            if not train_idx:
                log.warning("site %s has an empty train split; skipped in round %d",
                            ds.site_id, rnd)
                continue
            dec = Decoder(np.random.default_rng(0))
            dec.load_param_set(ParamSet.from_bytes(blob))
            rng = derive_rng(seed, "harmonizer", rnd, ds.site_id)
            _decoder_local_steps(dec, enc, [ds.images[i] for i in train_idx], rng,
                                 local_steps, batch_size, lr, use_augment)
            up = dec.param_set().copy()
            if transcript is not None:
                transcript.record(RoundMessage("upload", rnd, ds.site_id, "decoder",
                                               up.to_bytes(), len(train_idx)))
            uploads.append((up, len(train_idx)))
        if uploads:
            global_params = fedavg_aggregate(uploads)
        dec_eval = Decoder(np.random.default_rng(0))
        dec_eval.load_param_set(global_params)
        history.append(_pooled_recon_loss(dec_eval, enc, datasets, "val"))
    dec_final = Decoder(np.random.default_rng(0))
    dec_final.load_param_set(global_params)
    return dec_final, history


def _pooled_recon_loss(dec: Decoder, enc: Encoder, datasets, split: str) -> float:
    losses = []
    with no_grad():
        for ds in datasets:
            for i in ds.split_indices(split):
                img = ds.images[i]
                recon = dec(encode(enc, img))
                losses.append(float(np.abs(img.data - recon.data).mean()))
    return float(np.mean(losses)) if losses else float("nan")


# -- stage 2: initial task learning ------------------------------------------------------------


def initial_task_learning(largest_site: SiteDataset, enc: Encoder,
                          cfg: ExperimentConfig, seed: int) -> Tuple[ParamSet, Template]:
    """Train the initial task model on one site and extract the style
    template as the encoded features of one uniformly sampled train image."""
    train_idx = largest_site.split_indices("train")
    if not train_idx:
        raise InvalidInputError(f"site {largest_site.site_id} has an empty train split")
    task = largest_site.task
    model = _build_model(task, "instance", (seed, "init_task_model"))
    params = model.param_set()
    opt = AdamW(params, lr=cfg.init_task.lr, weight_decay=cfg.weight_decay)
    rng = derive_rng(seed, "init_task")
    bs = cfg.init_task.batch_size
    for _ in range(cfg.init_task.epochs):
        order = rng.permutation(train_idx)
        for s in range(0, len(order), bs):
            batch_idx = [int(i) for i in order[s:s + bs]]
            loss = _task_batch_loss(model, largest_site, batch_idx, cfg, rng,
                                    harmonized=None)
            opt.zero_grad()
            backward(loss)
            opt.step()
    template_idx = int(derive_rng(seed, "init_template").choice(train_idx))
    feats = encode(enc, largest_site.images[template_idx])
    template = Template(Tensor(feats.data.copy()))
    return params.copy(), template


def _task_batch_loss(model, site: SiteDataset, batch_idx: List[int],
                     cfg: ExperimentConfig, rng, harmonized: Optional[Tensor]):
    if site.task == "segmentation":
        if harmonized is None:
            imgs, masks = [], []
            for i in batch_idx:
                img, mask = site.images[i], site.labels[i]
                if cfg.augment:
                    img, mask = augment(img, mask, seed=int(rng.integers(2 ** 62)))
                imgs.append(img)
                masks.append(mask)
            xb = stack(imgs)
        else:
            xb = harmonized
            masks = [site.labels[i] for i in batch_idx]
        preds = model.forward(xb, train=True)
        return soft_dice_loss(preds, stack(masks))
    labels = np.array([site.labels[i] for i in batch_idx])
    if harmonized is None:
        imgs = []
        for i in batch_idx:
            img = site.images[i]
            if cfg.augment:
                img, _ = augment(img, None, seed=int(rng.integers(2 ** 62)))
            imgs.append(img)
        xb = stack(imgs)
    else:
        xb = harmonized
    logits = model.forward(xb, train=True)
    return cross_entropy_loss(logits, labels)


# -- local update (one client, one round) -------------------------------------------------------


def fettl_local_update(client: ClientState, enc: Encoder, dec: Decoder,
                       broadcast: Tuple[ParamSet, Template], iters: int,
                       eta: float, beta: float, cfg: ExperimentConfig,
                       round_idx: int = 0) -> Tuple[ParamSet, Template, dict]:
    """Joint update of task model and template from one broadcast.

    Copies the broadcast into local state, then for each batch: harmonize
    with the local template, forward the task model, backpropagate the task
    loss into both the template and the model, and step both optimizers.
    Encoder and decoder stay frozen throughout.
    """
    model_params, template = broadcast
    spec = STRATEGY_TABLE["fettl"]
    static = {
        "cfg": cfg, "spec": spec, "task": client.site.task,
        "enc": enc.param_set().to_bytes(), "dec": dec.param_set().to_bytes(),
    }
    out = _client_round(static, client, model_params.to_bytes(),
                        _template_bytes(template), round_idx,
                        iters_override=iters, eta=eta, beta=beta)
    return (ParamSet.from_bytes(out["model"]),
            _template_from_bytes(out["template"]),
            out["metrics"])


_WORKER_STATIC: Optional[dict] = None


def _init_worker(static: dict) -> None:
    global _WORKER_STATIC
    _WORKER_STATIC = static


def _client_round_star(args):
    client, model_blob, template_blob, round_idx = args
    return _client_round(_WORKER_STATIC, client, model_blob, template_blob, round_idx)


def _client_round(static: dict, client: ClientState, model_blob: bytes,
                  template_blob: Optional[bytes], round_idx: int,
                  iters_override: Optional[int] = None,
                  eta: Optional[float] = None, beta: Optional[float] = None) -> dict:
    """One client's local training for one round. Pure in (static, args)."""
    cfg: ExperimentConfig = static["cfg"]
    spec: StrategySpec = static["spec"]
    site = client.site
    task = site.task

    model = _build_model(task, spec.norm_kind, (cfg.seed, "model_shell"))
    incoming = ParamSet.from_bytes(model_blob)
    broadcast_names = set(incoming.names())
    model.load_param_set(incoming, names=broadcast_names)
    if spec.keep_norms_local and client.local_norms is not None:
        model.load_param_set(ParamSet.from_bytes(client.local_norms))

    enc = _build_encoder(static["enc"]) if static.get("enc") else None
    dec = None
    if spec.harmonization != "none":
        dec_blob = client.local_decoder if spec.harmonizer_scope == "client" else static["dec"]
        dec = _build_decoder(dec_blob)

    template = None
    learned = spec.template_mode in ("learned_global", "learned_local")
    if spec.template_mode != "none":
        if spec.template_mode in ("learned_local", "fixed_client"):
            template_blob = client.local_template
        if template_blob is None:
            raise ContractError(f"client {site.site_id} is missing its template")
        template = _template_from_bytes(template_blob, requires_grad=learned)

    model_params = model.param_set()
    trainable = ParamSet([(n, t) for n, t in model_params.items() if t.requires_grad])
    lr_model = beta if beta is not None else cfg.beta
    lr_template = eta if eta is not None else cfg.eta
    if cfg.optimizer == "sgd":
        opt_model = SGD(trainable, lr=lr_model)
        opt_template = SGD(ParamSet([(TEMPLATE_KEY, template.features)]),
                           lr=lr_template) if learned else None
    else:
        opt_model = AdamW(trainable, lr=lr_model, weight_decay=cfg.weight_decay)
        opt_template = AdamW(ParamSet([(TEMPLATE_KEY, template.features)]),
                             lr=lr_template, weight_decay=0.0) if learned else None

    anchor = {n: t.data.copy() for n, t in trainable.items()} if spec.proximal else None
    mu = cfg.effective_mu() if spec.proximal else 0.0

    rng = derive_rng(cfg.seed, "round", round_idx, "client", site.site_id)
    train_idx = site.split_indices("train")
    if not train_idx:
        raise InvalidInputError(f"site {site.site_id} has an empty train split")

    losses: List[float] = []

    def run_batch(batch_idx: List[int], batch_no: int) -> None:
        imgs, masks = [], []
        for i in batch_idx:
            img = site.images[i]
            mask = site.labels[i] if task == "segmentation" else None
            if cfg.augment:
                img, mask = augment(img, mask, seed=int(rng.integers(2 ** 62)))
            imgs.append(img)
            if mask is not None:
                masks.append(mask)
        if spec.harmonization != "none":
            if learned:
                xb = harmonize_batch(enc, dec, imgs, template, epsilon=cfg.epsilon,
                                     train=True, iterations=cfg.ns_iterations,
                                     mode=spec.harmonization)
            else:
                with no_grad():
                    xb = harmonize_batch(enc, dec, imgs, template, epsilon=cfg.epsilon,
                                         train=True, iterations=cfg.ns_iterations,
                                         mode=spec.harmonization)
                xb = Tensor(xb.data)
        else:
            xb = stack(imgs)
        preds = model.forward(xb, train=True)
        if task == "segmentation":
            loss = soft_dice_loss(preds, stack(masks))
        else:
            labels = np.array([site.labels[i] for i in batch_idx])
            loss = cross_entropy_loss(preds, labels)
        if not np.isfinite(loss.data).all():
            raise NumericError(
                f"non-finite loss: round {round_idx}, client {site.site_id}, batch {batch_no}")
        opt_model.zero_grad()
        if opt_template is not None:
            template.features.zero_grad()
        backward(loss)
        if mu > 0.0:
            for n, t in trainable.items():
                prox = mu * (t.data - anchor[n])
                t.grad = prox if t.grad is None else t.grad + prox
        opt_model.step()
        if opt_template is not None:
            opt_template.step()
        losses.append(loss.item())

    bs = cfg.batch_size
    batch_no = 0
    if task == "segmentation":
        iters = iters_override if iters_override is not None else cfg.local_iters
        order: List[int] = []
        while len(order) < iters * bs:
            order.extend(int(i) for i in rng.permutation(train_idx))
        for b in range(iters):
            run_batch(order[b * bs:(b + 1) * bs], batch_no)
            batch_no += 1
    else:
        epochs = iters_override if iters_override is not None else cfg.local_epochs
        for _ in range(epochs):
            order = [int(i) for i in rng.permutation(train_idx)]
            for s in range(0, len(order), bs):
                run_batch(order[s:s + bs], batch_no)
                batch_no += 1

    upload = ParamSet([(n, t) for n, t in model_params.items() if n in broadcast_names])
    out = {
        "model": upload.to_bytes(),
        "template": _template_bytes(template) if template is not None else None,
        "metrics": {"mean_loss": float(np.mean(losses)) if losses else float("nan")},
        "sample_count": len(train_idx),
    }
    if spec.keep_norms_local:
        norm_names = model.norm_param_names()
        out["norms"] = ParamSet([(n, t) for n, t in model_params.items()
                                 if n in norm_names]).to_bytes()
    return out


# -- evaluation ---------------------------------------------------------------------------------


EVAL_BATCH = 16


def _eval_model_on_site(task: str, model, site: SiteDataset, split: str,
                        cfg: ExperimentConfig, enc=None, dec=None,
                        template: Optional[Template] = None,
                        harmonization: str = "none"):
    """Returns (per_image_values, scores, labels) for one site and split."""
    idx = site.split_indices(split)
    per_image: List[float] = []
    scores: List[float] = []
    labels: List[int] = []
    with no_grad():
        for s in range(0, len(idx), EVAL_BATCH):
            chunk = idx[s:s + EVAL_BATCH]
            imgs = [site.images[i] for i in chunk]
            if harmonization != "none":
                xb = harmonize_batch(enc, dec, imgs, template, epsilon=cfg.epsilon,
                                     train=False, iterations=cfg.ns_iterations,
                                     mode=harmonization)
            else:
                xb = stack(imgs)
            preds = model.forward(xb, train=False)
            if task == "segmentation":
                for k, i in enumerate(chunk):
                    per_image.append(dice(preds.data[k], site.labels[i].data,
                                          threshold=cfg.dice_threshold))
            else:
                probs = softmax_probs(preds.data)
                for k, i in enumerate(chunk):
                    y = int(site.labels[i])
                    scores.append(float(probs[k, 1]))
                    labels.append(y)
                    per_image.append(float(probs[k, y]))
    return per_image, scores, labels


def _pooled_metric(task: str, per_site_values, per_site_scores, per_site_labels):
    """Site metric table plus the pooled scalar used for checkpoint selection."""
    table: Dict[str, float] = {}
    if task == "segmentation":
        all_vals: List[float] = []
        for site, vals in per_site_values.items():
            table[site] = float(np.mean(vals)) if vals else float("nan")
            all_vals.extend(vals)
        pooled = float(np.mean(all_vals)) if all_vals else float("nan")
        return table, pooled
    all_scores: List[float] = []
    all_labels: List[int] = []
    for site in per_site_scores:
        s, l = per_site_scores[site], per_site_labels[site]
        all_scores.extend(s)
        all_labels.extend(l)
        if len(set(l)) == 2:
            table[site] = aupr(s, l)
    pooled = aupr(all_scores, all_labels) if len(set(all_labels)) == 2 else float("nan")
    return table, pooled


# -- run orchestration ---------------------------------------------------------------------------


@dataclass
class RunOutcome:
    report: RunReport
    transcript: Transcript
    best_model: Optional[bytes] = None
    best_template: Optional[bytes] = None
    best_client_extras: Dict[str, dict] = field(default_factory=dict)
    encoder: Optional[bytes] = None
    decoder: Optional[bytes] = None
    allowed_payload: Dict[str, tuple] = field(default_factory=dict)
    harmonizer_history: List[float] = field(default_factory=list)


def _load_or_generate_datasets(cfg: ExperimentConfig) -> List[SiteDataset]:
    if cfg.dataset_dir:
        task, size, _, datasets = load_dataset_dir(cfg.dataset_dir)
        if task != cfg.task:
            raise ConfigError(
                f"dataset at {cfg.dataset_dir} is for task {task!r}, config says {cfg.task!r}")
        if size != cfg.image_size:
            raise ConfigError(
                f"dataset image size {size} does not match config {cfg.image_size}")
        return datasets
    return generate_sites(cfg.task, cfg.resolved_sites(), cfg.image_size,
                          derive_seed(cfg.seed, "data"), cfg.class_balance)


def build_harmonizer_bundle(cfg: ExperimentConfig, datasets: Sequence[SiteDataset],
                            transcript: Optional[Transcript] = None) -> dict:
    """Stage-0 autoencoder pretraining plus stage-1 federated decoder training.

    With ``checkpoint_dir`` set, loads the saved bundle instead of training.
    """
    if cfg.checkpoint_dir:
        from pathlib import Path

        root = Path(cfg.checkpoint_dir)
        return {
            "enc": (root / "encoder.params").read_bytes(),
            "dec_init": (root / "decoder_init.params").read_bytes(),
            "dec_global": (root / "decoder.params").read_bytes(),
            "history": [],
        }
    pool = gen_pretrain_pool(cfg.pretrain.pool_images, cfg.image_size,
                             derive_seed(cfg.seed, "pretrain"))
    enc, dec0 = pretrain_encoder(pool, cfg.pretrain.pool_epochs,
                                 seed=derive_seed(cfg.seed, "pretrain", "auto"),
                                 batch_size=cfg.pretrain.batch_size, lr=cfg.pretrain.lr)
    dec_init_blob = dec0.param_set().to_bytes()
    dec_global, history = train_harmonizer_federated(
        datasets, enc, dec0, rounds=cfg.pretrain.rounds,
        local_steps=cfg.pretrain.local_steps, batch_size=cfg.pretrain.batch_size,
        lr=cfg.pretrain.lr, seed=derive_seed(cfg.seed, "pretrain", "fed"),
        use_augment=cfg.augment, transcript=transcript)
    return {
        "enc": enc.param_set().to_bytes(),
        "dec_init": dec_init_blob,
        "dec_global": dec_global.param_set().to_bytes(),
        "history": history,
    }


def _make_initial_template(cfg: ExperimentConfig, enc: Encoder,
                           init_site: SiteDataset) -> Template:
    train_idx = init_site.split_indices("train")
    pick = int(derive_rng(cfg.seed, "init_template").choice(train_idx))
    image = init_site.images[pick]
    feats = encode(enc, image)
    if cfg.template_init == "encoded_image":
        return Template(Tensor(feats.data.copy()))
    if cfg.template_init == "raw_image":
        # average-pool the raw image to template resolution and cycle its
        # three channels up to the template channel count
        c, ht, wt = feats.shape
        img = image.data
        pooled = img.reshape(3, ht, img.shape[1] // ht, wt, img.shape[2] // wt).mean(axis=(2, 4))
        tiled = np.stack([pooled[i % 3] for i in range(c)])
        return Template(Tensor(tiled))
    if cfg.template_init == "gaussian_noise":
        rng = derive_rng(cfg.seed, "template_noise")
        return Template(Tensor(rng.normal(0.0, 1.0, size=feats.shape)))
    raise ConfigError(f"unknown template_init {cfg.template_init!r}")


def _client_fixed_template(cfg: ExperimentConfig, enc: Encoder, site: SiteDataset) -> bytes:
    train_idx = site.split_indices("train")
    pick = int(derive_rng(cfg.seed, "client_template", site.site_id).choice(train_idx))
    feats = encode(enc, site.images[pick])
    return _template_bytes(Template(Tensor(feats.data.copy())))


def _train_client_decoder(cfg: ExperimentConfig, enc: Encoder, dec_init: bytes,
                          site: SiteDataset) -> bytes:
    """Client-scope harmonizer: the same training budget as the federated
    stage, but on this site's images only."""
    dec = _build_decoder(dec_init)
    train_imgs = [site.images[i] for i in site.split_indices("train")]
    for rnd in range(cfg.pretrain.rounds):
        rng = derive_rng(cfg.seed, "client_decoder", site.site_id, rnd)
        _decoder_local_steps(dec, enc, train_imgs, rng, cfg.pretrain.local_steps,
                             cfg.pretrain.batch_size, cfg.pretrain.lr, cfg.augment)
    blob = dec.param_set().to_bytes()
    for _, t in dec.param_set().items():
        t.requires_grad = False
    return blob


def _init_site_of(cfg: ExperimentConfig, datasets: Sequence[SiteDataset]) -> SiteDataset:
    if cfg.init_site is not None:
        for ds in datasets:
            if ds.site_id == cfg.init_site:
                return ds
        raise ConfigError(f"init_site {cfg.init_site!r} not among dataset sites")
    return max(datasets, key=lambda d: (d.sample_count("train"), d.site_id))


def execute_run(cfg: ExperimentConfig) -> RunOutcome:
    """Run one strategy end to end for cfg.seed and return everything the
    caller may want to persist."""
    if cfg.strategy not in STRATEGY_TABLE:
        raise ConfigError(f"unknown strategy {cfg.strategy!r}")
    spec = STRATEGY_TABLE[cfg.strategy]
    datasets = _load_or_generate_datasets(cfg)
    transcript = Transcript()

    uses_harmonizer = spec.harmonization != "none"
    bundle = build_harmonizer_bundle(cfg, datasets, transcript) if uses_harmonizer else None
    enc = _build_encoder(bundle["enc"]) if bundle else None

    clients = [ClientState(site=ds) for ds in datasets]

    if uses_harmonizer and spec.harmonizer_scope == "client":
        for cl in clients:
            cl.local_decoder = _train_client_decoder(cfg, enc, bundle["dec_init"], cl.site)

    init_site = _init_site_of(cfg, datasets)
    template0: Optional[Template] = None
    if spec.template_mode in ("learned_global", "learned_local", "fixed_global"):
        template0 = _make_initial_template(cfg, enc, init_site)
    if spec.template_mode == "fixed_client":
        for cl in clients:
            cl.local_template = _client_fixed_template(cfg, enc, cl.site)
    if spec.template_mode == "learned_local":
        for cl in clients:
            cl.local_template = _template_bytes(template0)

    if spec.task_init == "pretrained":
        init_params, _ = initial_task_learning(init_site, enc, cfg,
                                               seed=derive_seed(cfg.seed, "stage2"))
        global_model = init_params
    else:
        shell = _build_model(cfg.task, spec.norm_kind,
                             (cfg.seed, "model_init", cfg.task, spec.norm_kind))
        global_model = shell.param_set().copy()

    if spec.keep_norms_local:
        norm_names = _build_model(cfg.task, spec.norm_kind, (0, "probe")).norm_param_names()
        shared_names = [n for n in global_model.names() if n not in norm_names]
    else:
        shared_names = global_model.names()

    global_template_blob = _template_bytes(template0) if spec.template_mode in (
        "learned_global", "fixed_global") else None

    static = {
        "cfg": cfg,
        "spec": spec,
        "task": cfg.task,
        "enc": bundle["enc"] if bundle else None,
        "dec": bundle["dec_global"] if bundle else None,
    }

    report = RunReport(task=cfg.task, strategy=cfg.strategy, seed=cfg.seed,
                       config_digest=cfg.digest())
    best = {"metric": -np.inf, "round": -1, "model": None, "template": None, "extras": {}}

    def snapshot(metric: float, rnd: int, model_blob: bytes,
                 template_blob: Optional[bytes]) -> None:
        best["metric"] = metric
        best["round"] = rnd
        best["model"] = model_blob
        best["template"] = template_blob
        best["extras"] = {cl.site.site_id: {"template": cl.local_template,
                                            "norms": cl.local_norms}
                          for cl in clients}

    def evaluate(model_blob: bytes, template_blob: Optional[bytes], split: str):
        per_vals, per_scores, per_labels = {}, {}, {}
        for cl in clients:
            model = _build_model(cfg.task, spec.norm_kind, (cfg.seed, "eval_shell"))
            model.load_param_set(ParamSet.from_bytes(model_blob))
            if spec.keep_norms_local and cl.local_norms is not None:
                model.load_param_set(ParamSet.from_bytes(cl.local_norms))
            template = None
            if spec.template_mode in ("learned_global", "fixed_global"):
                template = _template_from_bytes(template_blob)
            elif spec.template_mode in ("learned_local", "fixed_client"):
                template = _template_from_bytes(cl.local_template)
            dec = None
            if uses_harmonizer:
                dec_blob = cl.local_decoder if spec.harmonizer_scope == "client" else static["dec"]
                dec = _build_decoder(dec_blob)
            vals, scores, labels = _eval_model_on_site(
                cfg.task, model, cl.site, split, cfg, enc=enc, dec=dec,
                template=template, harmonization=spec.harmonization)
            per_vals[cl.site.site_id] = vals
            per_scores[cl.site.site_id] = scores
            per_labels[cl.site.site_id] = labels
        table, pooled = _pooled_metric(cfg.task, per_vals, per_scores, per_labels)
        return table, pooled, per_vals

    executor = None
    if cfg.parallel_clients > 1:
        executor = ProcessPoolExecutor(max_workers=cfg.parallel_clients,
                                       initializer=_init_worker, initargs=(static,))
    metric_name = "dice" if cfg.task == "segmentation" else "aupr"
    try:
        model_blob = ParamSet([(n, global_model[n]) for n in shared_names]).to_bytes()
        snapshot(-np.inf, -1, model_blob, global_template_blob)
        for rnd in range(cfg.rounds):
            broadcast_kind = ("model+template" if global_template_blob is not None
                             else "model")
            payloads = []
            for cl in clients:
                blob = model_blob + (global_template_blob or b"")
                transcript.record(RoundMessage("broadcast", rnd, cl.site.site_id,
                                               broadcast_kind, blob))
                payloads.append((cl, model_blob, global_template_blob, rnd))
            if executor is not None:
                outs = list(executor.map(_client_round_star, payloads))
            else:
                outs = [_client_round(static, *p) for p in payloads]

            uploads, template_uploads = [], []
            for cl, out in zip(clients, outs):
                up_blob = out["model"]
                upload_kind = "model"
                if spec.template_mode == "learned_global":
                    up_blob = out["model"] + out["template"]
                    upload_kind = "model+template"
                    template_uploads.append(_template_from_bytes(out["template"]))
                transcript.record(RoundMessage("upload", rnd, cl.site.site_id,
                                               upload_kind, up_blob, out["sample_count"]))
                uploads.append((ParamSet.from_bytes(out["model"]), out["sample_count"]))
                if spec.template_mode == "learned_local":
                    cl.local_template = out["template"]
                if spec.keep_norms_local:
                    cl.local_norms = out["norms"]
                report.add_round_record(rnd, cl.site.site_id, "train", "loss",
                                        out["metrics"]["mean_loss"])

            if spec.aggregate == "mean":
                agg = mean_aggregate([u[0] for u in uploads])
            else:
                agg = fedavg_aggregate(uploads)
            model_blob = agg.to_bytes()
            if spec.template_mode == "learned_global":
                global_template_blob = _template_bytes(mean_aggregate(template_uploads))

            table, pooled, _ = evaluate(model_blob, global_template_blob, "val")
            for site, v in table.items():
                report.add_round_record(rnd, site, "val", metric_name, v)
            report.add_round_record(rnd, "pooled", "val", metric_name, pooled)
            if np.isfinite(pooled) and pooled > best["metric"]:
                snapshot(pooled, rnd, model_blob, global_template_blob)
    finally:
        if executor is not None:
            executor.shutdown()

    if best["model"] is None:
        snapshot(-np.inf, -1, model_blob, global_template_blob)
    # restore per-client extras from the best round before test evaluation
    for cl in clients:
        extras = best["extras"].get(cl.site.site_id, {})
        cl.local_template = extras.get("template", cl.local_template)
        cl.local_norms = extras.get("norms", cl.local_norms)

    table, pooled, per_vals = evaluate(best["model"], best["template"], "test")
    report.final_test = {site: {metric_name: v} for site, v in table.items()}
    report.final_test["pooled"] = {metric_name: pooled}
    report.per_image_test = per_vals
    report.best_round = best["round"]

    if uses_harmonizer:
        report.compactness = _compactness_summary(cfg, spec, clients, enc, static,
                                                  best["template"])

    allowed = {n: tuple(global_model[n].shape) for n in shared_names}
    allowed[TEMPLATE_KEY] = tuple(
        _template_from_bytes(best["template"]).features.shape) if best["template"] else ()
    if best["template"] is None and template0 is not None:
        allowed[TEMPLATE_KEY] = tuple(template0.features.shape)
    if bundle:
        dec_probe = Decoder(np.random.default_rng(0))
        for n, t in dec_probe.param_set().items():
            allowed[n] = tuple(t.shape)
    allowed = {n: s for n, s in allowed.items() if s != ()}

    report.extra = {
        "best_val_metric": None if not np.isfinite(best["metric"]) else best["metric"],
        "harmonizer_history": bundle["history"] if bundle else [],
        "transcript_sha256": hashlib.sha256(transcript.to_lines().encode()).hexdigest(),
    }

    return RunOutcome(report=report, transcript=transcript, best_model=best["model"],
                      best_template=best["template"],
                      best_client_extras=best["extras"],
                      encoder=bundle["enc"] if bundle else None,
                      decoder=bundle["dec_global"] if bundle else None,
                      allowed_payload=allowed,
                      harmonizer_history=bundle["history"] if bundle else [])


def _compactness_summary(cfg, spec, clients, enc, static, global_template_blob):
    """Raw vs harmonized style-descriptor compactness over the test images."""
    raw_pts, harm_pts = {}, {}
    with no_grad():
        for cl in clients:
            idx = cl.site.split_indices("test")
            imgs = [cl.site.images[i] for i in idx]
            if len(imgs) < 2:
                continue
            raw_pts[cl.site.site_id] = [hsv_channel_means(im.data) for im in imgs]
            if spec.template_mode in ("learned_global", "fixed_global"):
                template = _template_from_bytes(global_template_blob)
            else:
                template = _template_from_bytes(cl.local_template)
            dec_blob = cl.local_decoder if spec.harmonizer_scope == "client" else static["dec"]
            dec = _build_decoder(dec_blob)
            pts = []
            for s in range(0, len(imgs), EVAL_BATCH):
                hb = harmonize_batch(enc, dec, imgs[s:s + EVAL_BATCH], template,
                                     epsilon=cfg.epsilon, train=False,
                                     iterations=cfg.ns_iterations, mode=spec.harmonization)
                pts.extend(hsv_channel_means(hb.data[k]) for k in range(hb.shape[0]))
            harm_pts[cl.site.site_id] = pts
    if len(raw_pts) < 2:
        return None
    return {"raw": cluster_compactness(raw_pts),
            "harmonized": cluster_compactness(harm_pts)}


def run_strategy(config: Union[ExperimentConfig, dict]) -> RunReport:
    """Execute the configured strategy end to end and return its report."""
    if isinstance(config, dict):
        from .config import validate_config

        config = validate_config(config)
    return execute_run(config).report


def template_init_study(config: Union[ExperimentConfig, dict],
                        modes: Sequence[str] = ("encoded_image", "raw_image",
                                                "gaussian_noise")) -> Dict[str, RunReport]:
    """Re-run the configured template-learning strategy, varying only the
    template initialization."""
    if isinstance(config, dict):
        from .config import validate_config

        config = validate_config(config)
    if STRATEGY_TABLE[config.strategy].template_mode not in ("learned_global", "learned_local"):
        raise ConfigError("template_init_study needs a template-learning strategy")
    out = {}
    for mode in modes:
        out[mode] = execute_run(config.with_overrides(template_init=mode)).report
    return out


def train_centralized(cfg: ExperimentConfig) -> Tuple[RunReport, bytes]:
    """Direct local training on a single site, no server machinery.

    Uses the exact same local-update routine and rng streams as a federated
    run, so a one-client federated run must reproduce it bit for bit.
    """
    datasets = _load_or_generate_datasets(cfg)
    if len(datasets) != 1:
        raise ConfigError("centralized training expects exactly one site")
    spec = STRATEGY_TABLE["fedavg"]
    client = ClientState(site=datasets[0])
    shell = _build_model(cfg.task, spec.norm_kind,
                         (cfg.seed, "model_init", cfg.task, spec.norm_kind))
    model_blob = shell.param_set().to_bytes()
    static = {"cfg": cfg, "spec": spec, "task": cfg.task, "enc": None, "dec": None}
    metric_name = "dice" if cfg.task == "segmentation" else "aupr"
    report = RunReport(task=cfg.task, strategy="centralized", seed=cfg.seed,
                       config_digest=cfg.digest())
    best = {"metric": -np.inf, "round": -1, "model": model_blob}

    def evaluate(blob: bytes, split: str):
        model = _build_model(cfg.task, spec.norm_kind, (cfg.seed, "eval_shell"))
        model.load_param_set(ParamSet.from_bytes(blob))
        vals, scores, labels = _eval_model_on_site(cfg.task, model, client.site,
                                                   split, cfg)
        table, pooled = _pooled_metric(cfg.task, {client.site.site_id: vals},
                                       {client.site.site_id: scores},
                                       {client.site.site_id: labels})
        return table, pooled, vals

    for rnd in range(cfg.rounds):
        out = _client_round(static, client, model_blob, None, rnd)
        model_blob = out["model"]
        report.add_round_record(rnd, client.site.site_id, "train", "loss",
                                out["metrics"]["mean_loss"])
        table, pooled, _ = evaluate(model_blob, "val")
        for site, v in table.items():
            report.add_round_record(rnd, site, "val", metric_name, v)
        report.add_round_record(rnd, "pooled", "val", metric_name, pooled)
        if np.isfinite(pooled) and pooled > best["metric"]:
            best.update(metric=pooled, round=rnd, model=model_blob)

    table, pooled, vals = evaluate(best["model"], "test")
    report.final_test = {site: {metric_name: v} for site, v in table.items()}
    report.final_test["pooled"] = {metric_name: pooled}
    report.per_image_test = {client.site.site_id: vals}
    report.best_round = best["round"]
    return report, best["model"]
