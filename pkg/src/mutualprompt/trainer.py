"""Training loops for single-source UDA, multi-source DA and domain generalization."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import losses as L
from .config import Mode, RunConfig
from .data import (
    DomainData,
    EmbeddingSet,
    LabeledDomain,
    UnlabeledDomain,
    anchor_sample,
    augment_batch,
    generate,
    weak_augment,
)
from .encoders import EncodedImage, EncodedText, FrozenEncoders, align_vision_projection
from .model import MutualPromptModel
from .optim import Adam, cosine_lr
from .prompt_bank import CONTEXT_INIT_STD
from .prompter import MutualPrompter, PromptedPair
from .pseudo_labels import PseudoLabels, alpha_schedule, label_batch

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "mutualprompt-run"
CHECKPOINT_VERSION = 1
METRICS_FILE = "metrics.jsonl"
CHECKPOINT_FILE = "checkpoint.pt"


class NonFiniteLossError(FloatingPointError):
    def __init__(self, terms: dict[str, float]):
        self.terms = terms
        detail = ", ".join(f"{k}={v!r}" for k, v in terms.items())
        super().__init__(f"non-finite training loss; per-term values: {detail}")


class CheckpointError(OSError):
    pass


def to_tensor(x: np.ndarray) -> torch.Tensor:
    return torch.as_tensor(np.ascontiguousarray(x), dtype=torch.float64)


@dataclass
class StepBatch:
    """One step's inputs. Source batches carry labels; the target batch carries
    only pseudo-labels."""

    source_names: list[str]
    source_weak: list[torch.Tensor]
    source_strong: list[torch.Tensor]
    source_labels: list[torch.Tensor]
    target_name: str | None = None
    target_weak: torch.Tensor | None = None
    target_strong: torch.Tensor | None = None
    target_pseudo: torch.Tensor | None = None

    @property
    def has_target(self) -> bool:
        return self.target_weak is not None


@dataclass
class LossBreakdown:
    terms: dict[str, torch.Tensor]
    total: torch.Tensor
    # (domain name, batch size) of every contrastive evaluation
    idc_provenance: list[tuple[str, int]] = field(default_factory=list)
    target_mask: torch.Tensor | None = None

    def as_floats(self) -> dict[str, float]:
        out = {k: float(v.detach()) for k, v in self.terms.items()}
        out["total"] = float(self.total.detach())
        return out


def build_model(cfg: RunConfig, encoders: FrozenEncoders | None = None) -> MutualPromptModel:
    """Model for ``cfg``. Fresh encoders are aligned on the anchor sample when
    ``cfg.align_encoders`` is set; passed-in encoders are used as they are."""
    model = MutualPromptModel(
        cfg.encoder,
        cfg.prompter,
        cfg.data.num_classes,
        n_ctx=cfg.n_ctx,
        tau=cfg.tau,
        prompt_seed=cfg.seed,
        encoders=encoders,
    )
    if encoders is None and cfg.align_encoders:
        anchor = anchor_sample(cfg.data, cfg.anchor_per_class)
        align_vision_projection(
            model.encoders,
            to_tensor(anchor.images),
            torch.as_tensor(anchor.labels),
            caption_targets(model, cfg.align_random_captions, cfg.encoder.seed),
        )
    return model


@torch.no_grad()
def caption_targets(model: MutualPromptModel, n_random: int, seed: int) -> torch.Tensor:
    """Per-class alignment targets: the mean unit class embedding over the naive
    template and ``n_random`` random contexts drawn like a fresh prompt bank,
    rescaled to the naive embeddings' norms.

    Averaging over several captions keeps any single prompt, the naive one
    included, from being privileged by the alignment.
    """
    names = model.prompts.class_names
    naive = model.naive_text.s
    units = [naive / naive.norm(dim=-1, keepdim=True)]
    gen = torch.Generator().manual_seed(1_000_003 + seed)
    shape = (model.prompts.n_ctx, model.encoders.cfg.text_width)
    for _ in range(n_random):
        ctx = torch.randn(shape, generator=gen, dtype=torch.float64) * CONTEXT_INIT_STD
        s = model.encoders.encode_text(ctx, names).s
        units.append(s / s.norm(dim=-1, keepdim=True))
    return torch.stack(units).mean(0) * naive.norm(dim=-1, keepdim=True)


def _slice_pair(pair: PromptedPair, start: int, stop: int) -> PromptedPair:
    return PromptedPair(pair.v_prime[start:stop], pair.s_prime[start:stop])


def compute_losses(
    model: MutualPromptModel,
    batch: StepBatch,
    cfg: RunConfig,
    target_mask: torch.Tensor | None = None,
) -> LossBreakdown:
    """Every loss term for one step, from a single joint forward pass.

    ``target_mask`` overrides the confidence gate (used by gradient checks to
    hold the indicator fixed while parameters are perturbed).
    """
    views = []
    for w, s in zip(batch.source_weak, batch.source_strong):
        views += [w, s]
    if batch.has_target:
        views += [batch.target_weak, batch.target_strong]
    sizes = [v.shape[0] for v in views]
    texts = model.encode_texts()
    pair = model.prompt(torch.cat(views), texts)
    log_probs = L.classify_log(pair, cfg.tau)
    bounds = np.cumsum([0, *sizes])
    chunk = lambda i: slice(bounds[i], bounds[i + 1])  # noqa: E731

    weights = L.LossWeights(cfg.lambda_c, cfg.lambda_i, cfg.tau)
    terms: dict[str, torch.Tensor] = {}
    zero = log_probs.new_zeros(())
    sup = sc = idc = im = zero
    provenance = []
    multi = len(batch.source_names) > 1

    sup_s = sc_s = idc_s = zero
    for j, name in enumerate(batch.source_names):
        weak, strong = chunk(2 * j), chunk(2 * j + 1)
        y = batch.source_labels[j]
        d_sup = L.l_sup_source(log_probs[weak], y)
        sup_s = sup_s + d_sup
        if multi:
            terms[f"sup_s[{name}]"] = d_sup
        if cfg.use_sc:
            d_sc = L.l_sc_source(log_probs[strong], y)
            sc_s = sc_s + d_sc
            if multi:
                terms[f"sc_s[{name}]"] = d_sc
        if cfg.use_idc:
            sl = chunk(2 * j)
            d_idc = L.l_idc(_slice_pair(pair, sl.start, sl.stop), cfg.tau)
            provenance.append((name, sl.stop - sl.start))
            idc_s = idc_s + cfg.idc_source_weight * d_idc
            if multi:
                terms[f"idc[{name}]"] = d_idc
    terms["sup_s"] = sup_s
    sup = sup + sup_s
    if cfg.use_sc:
        terms["sc_s"] = sc_s
        sc = sc + sc_s
    if cfg.use_idc:
        terms["idc_s"] = idc_s
        idc = idc + idc_s

    mask = None
    if batch.has_target:
        k = 2 * len(batch.source_names)
        weak, strong = chunk(k), chunk(k + 1)
        pl = batch.target_pseudo
        mask = (
            target_mask
            if target_mask is not None
            else L.confidence_mask(log_probs[weak], pl, cfg.threshold)
        )
        terms["sup_t"] = L.l_sup_target(log_probs[weak], pl, cfg.threshold, mask=mask)
        sup = sup + terms["sup_t"]
        if cfg.use_sc:
            terms["sc_t"] = L.l_sc_target(log_probs[strong], pl, log_probs[weak], cfg.threshold, mask=mask)
            sc = sc + terms["sc_t"]
        if cfg.use_idc:
            d_idc = L.l_idc(_slice_pair(pair, weak.start, weak.stop), cfg.tau)
            provenance.append((batch.target_name or "target", weak.stop - weak.start))
            terms["idc_t"] = cfg.idc_target_weight * d_idc
            idc = idc + terms["idc_t"]
        if cfg.use_im:
            im = L.l_im(log_probs[weak])
            terms["im"] = im

    terms["sup"] = sup
    if cfg.use_sc:
        terms["sc"] = sc
    if cfg.use_idc:
        terms["idc"] = idc
    total = L.l_all(sup, sc, idc, im, weights)
    return LossBreakdown(terms, total, provenance, mask)


def train_step(
    model: MutualPromptModel,
    optimizer: Adam,
    batch: StepBatch,
    cfg: RunConfig,
) -> LossBreakdown:
    """Forward, backward and one optimizer update of the trainable registry."""
    optimizer.zero_grad()
    out = compute_losses(model, batch, cfg)
    if not torch.isfinite(out.total) or not all(torch.isfinite(v) for v in out.terms.values()):
        raise NonFiniteLossError(out.as_floats())
    out.total.backward()
    optimizer.step()
    return out


def make_optimizer(model: MutualPromptModel, cfg: RunConfig) -> Adam:
    return Adam(model.named_trainable(), cfg.learning_rate, cfg.adam_betas, cfg.adam_eps)


# ---------------------------------------------------------------------------
# data plumbing


def _epoch_indices(rng: np.random.Generator, n: int, batch: int, steps: int) -> list[np.ndarray]:
    need = batch * steps
    reps = math.ceil(need / n)
    order = np.concatenate([rng.permutation(n) for _ in range(reps)])
    return [order[i * batch : (i + 1) * batch] for i in range(steps)]


def make_views(images: np.ndarray, rng: np.random.Generator, cfg: RunConfig):
    weak, strong = augment_batch(images, rng, cfg.strong_aug)
    return to_tensor(weak), to_tensor(strong)


class GuardedDomain:
    """Wraps a held-out domain and counts every read of its arrays."""

    def __init__(self, domain: LabeledDomain):
        self._domain = domain
        self.name = domain.name
        self.reads = 0

    @property
    def images(self) -> np.ndarray:
        self.reads += 1
        return self._domain.images

    @property
    def labels(self) -> np.ndarray:
        self.reads += 1
        return self._domain.labels


# ---------------------------------------------------------------------------
# evaluation


def accuracy(pred: torch.Tensor, labels) -> float:
    labels = torch.as_tensor(np.asarray(labels), dtype=torch.long)
    if labels.numel() == 0:
        return float("nan")
    return float((pred == labels).double().mean())


@torch.no_grad()
def evaluate(model: MutualPromptModel, domain: LabeledDomain) -> float:
    return accuracy(model.predict(to_tensor(domain.images)), domain.labels)


@torch.no_grad()
def evaluate_naive(model: MutualPromptModel, domain: LabeledDomain) -> float:
    return accuracy(model.predict_naive(to_tensor(domain.images)), domain.labels)


def confusion_matrix(pred: torch.Tensor, labels, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (labels, pred.numpy()), 1)
    return cm


def pseudo_label_accuracy(pl: PseudoLabels, labels: np.ndarray) -> dict[str, float]:
    """Accuracy of naive, learned and ensemble pseudo-labels (evaluation only)."""
    y = torch.as_tensor(labels, dtype=torch.long)
    out = {
        "pl_acc_naive": accuracy(pl.naive_soft.argmax(-1), y),
        "pl_acc_model": accuracy(pl.model_soft.argmax(-1), y),
        "pl_acc_ensemble": accuracy(pl.hard_label, y),
    }
    acc = pl.accepted
    out["pl_acc_accepted"] = accuracy(pl.hard_label[acc], y[acc]) if bool(acc.any()) else float("nan")
    return out


# ---------------------------------------------------------------------------
# run state and checkpoints


@dataclass
class RunState:
    cfg: RunConfig
    model: MutualPromptModel
    optimizer: Adam
    rng: np.random.Generator
    epoch: int = 0
    history: list[dict] = field(default_factory=list)


@dataclass
class TrainResult:
    model: MutualPromptModel
    history: list[dict]
    final: dict[str, float]
    run_dir: Path | None = None


def save_checkpoint(state: RunState, path: str | Path) -> None:
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": state.cfg.to_dict(),
        "epoch": state.epoch,
        "params": {n: p.detach().clone() for n, p in state.model.named_trainable().items()},
        "optimizer": state.optimizer.state_dict(),
        "rng": json.dumps(state.rng.bit_generator.state),
        "history": json.dumps(state.history),
    }
    tmp = Path(str(path) + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)


def load_checkpoint(path: str | Path) -> dict:
    payload = torch.load(path, weights_only=True)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a run checkpoint")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: checkpoint version {payload.get('version')} unsupported")
    payload["history"] = json.loads(payload["history"])
    payload["rng"] = json.loads(payload["rng"])
    return payload


def restore_model(payload: dict, cfg: RunConfig | None = None) -> MutualPromptModel:
    cfg = cfg or RunConfig.from_dict(payload["config"])
    model = build_model(cfg)
    params = model.named_trainable()
    with torch.no_grad():
        for name, value in payload["params"].items():
            params[name].copy_(value)
    return model


def _new_state(cfg: RunConfig) -> RunState:
    model = build_model(cfg)
    return RunState(
        cfg=cfg,
        model=model,
        optimizer=make_optimizer(model, cfg),
        rng=np.random.default_rng([cfg.seed, 12345]),
    )


def _resume_state(cfg: RunConfig, path: Path) -> RunState:
    payload = load_checkpoint(path)
    saved = RunConfig.from_dict(payload["config"]).to_dict()
    if saved != cfg.to_dict():
        raise ValueError(f"{path}: checkpoint was written under a different config")
    state = _new_state(cfg)
    state.model = restore_model(payload, cfg)
    state.optimizer = make_optimizer(state.model, cfg)
    state.optimizer.load_state_dict(payload["optimizer"])
    state.rng.bit_generator.state = payload["rng"]
    state.epoch = payload["epoch"]
    state.history = payload["history"]
    return state


# ---------------------------------------------------------------------------
# the loop


def _check_data(cfg: RunConfig, data: DomainData) -> None:
    if len(data.sources) != len(cfg.data.sources):
        raise ValueError("dataset source count does not match the config")
    if cfg.mode is Mode.DG:
        # no target-domain sample may enter the domain-generalization path
        assert data.target is None, "dg training received target-domain data"
    elif data.target is None:
        raise ValueError(f"{cfg.mode.value} needs target data")


def _refresh_pseudo_labels(state: RunState, target: UnlabeledDomain, alpha: float) -> PseudoLabels:
    images = to_tensor(np.stack([weak_augment(x, state.rng) for x in target.images]))
    parts = [
        label_batch(state.model, images[i : i + 256], alpha, state.cfg.threshold)
        for i in range(0, images.shape[0], 256)
    ]
    return PseudoLabels(*(torch.cat([getattr(p, f) for p in parts]) for f in PseudoLabels.__dataclass_fields__))


def _run_epoch(state: RunState, data: DomainData, epoch: int) -> tuple[dict[str, float], PseudoLabels | None]:
    cfg = state.cfg
    steps = cfg.steps_per_epoch()
    alpha = alpha_schedule(epoch, cfg.epochs, cfg.alpha_schedule)
    state.optimizer.lr = cosine_lr(cfg.learning_rate, epoch, cfg.epochs)
    pl = None
    if data.target is not None:
        pl = _refresh_pseudo_labels(state, data.target, alpha)
    B = cfg.batch_size
    src_idx = [_epoch_indices(state.rng, len(d), B, steps) for d in data.sources]
    tgt_idx = _epoch_indices(state.rng, len(data.target), B, steps) if data.target is not None else None
    sums: dict[str, float] = {}
    for i in range(steps):
        weak_s, strong_s, labels = [], [], []
        for d, idx in zip(data.sources, src_idx):
            w, s = make_views(d.images[idx[i]], state.rng, cfg)
            weak_s.append(w)
            strong_s.append(s)
            labels.append(torch.as_tensor(d.labels[idx[i]], dtype=torch.long))
        batch = StepBatch([d.name for d in data.sources], weak_s, strong_s, labels)
        if tgt_idx is not None:
            j = tgt_idx[i]
            batch.target_name = data.target.name
            batch.target_weak, batch.target_strong = make_views(data.target.images[j], state.rng, cfg)
            batch.target_pseudo = pl.hard_label[torch.as_tensor(j)]
        out = train_step(state.model, state.optimizer, batch, cfg)
        for k, v in out.as_floats().items():
            sums[k] = sums.get(k, 0.0) + v
    means = {k: v / steps for k, v in sums.items()}
    return means, pl


def _epoch_record(state: RunState, data: DomainData, epoch: int, losses, pl) -> dict:
    cfg = state.cfg
    model = state.model
    rec = {
        "epoch": epoch + 1,
        "lr": state.optimizer.lr,
        "alpha": alpha_schedule(epoch, cfg.epochs, cfg.alpha_schedule),
        "losses": losses,
        "source_acc": float(np.mean([evaluate(model, d) for d in data.source_eval])),
        "gamma_v": float(model.prompter.gamma_v.detach()),
        "gamma_s": float(model.prompter.gamma_s.detach()),
    }
    if data.target is not None:
        rec["target_acc"] = evaluate(model, data.target_eval)
        rec["pl_acceptance"] = pl.acceptance_rate
        rec.update(pseudo_label_accuracy(pl, data.target_labels))
    return rec


def train(
    cfg: RunConfig,
    data: DomainData | None = None,
    run_dir: str | Path | None = None,
    resume: bool = False,
) -> TrainResult:
    """Run the configured mode end to end.

    With ``run_dir`` set, one JSON line per epoch goes to ``metrics.jsonl`` and
    a full-state checkpoint is rewritten after every epoch; ``resume=True``
    continues from that checkpoint.
    """
    cfg.validate()
    torch.set_num_threads(1)
    data = data if data is not None else generate(cfg.data)
    _check_data(cfg, data)
    unseen = None
    if cfg.mode is Mode.DG and data.unseen is not None:
        unseen = GuardedDomain(data.unseen)
        data = DomainData(data.sources, data.source_eval, None, None, None)

    run_dir = Path(run_dir) if run_dir is not None else None
    ckpt = run_dir / CHECKPOINT_FILE if run_dir else None
    if run_dir:
        run_dir.mkdir(parents=True, exist_ok=True)
    if resume and ckpt is not None and ckpt.exists():
        state = _resume_state(cfg, ckpt)
        log.info("resumed from epoch %d", state.epoch)
        (run_dir / METRICS_FILE).write_text("".join(json.dumps(r) + "\n" for r in state.history))
    else:
        state = _new_state(cfg)
        if run_dir:
            (run_dir / METRICS_FILE).write_text("")

    while state.epoch < cfg.epochs:
        epoch = state.epoch
        losses, pl = _run_epoch(state, data, epoch)
        rec = _epoch_record(state, data, epoch, losses, pl)
        state.history.append(rec)
        state.epoch += 1
        log.info(
            "epoch %d/%d loss=%.4f src=%.3f tgt=%s",
            state.epoch,
            cfg.epochs,
            losses.get("total", float("nan")),
            rec["source_acc"],
            rec.get("target_acc"),
        )
        if run_dir:
            with open(run_dir / METRICS_FILE, "a") as fh:
                fh.write(json.dumps(rec) + "\n")
            try:
                save_checkpoint(state, ckpt)
            except OSError as exc:
                raise CheckpointError(f"checkpoint write failed after epoch {state.epoch}: {exc}") from exc

    final = {"source_acc": state.history[-1]["source_acc"] if state.history else float("nan")}
    if data.target is not None:
        final["target_acc"] = evaluate(state.model, data.target_eval)
        final["naive_target_acc"] = evaluate_naive(state.model, data.target_eval)
    if unseen is not None:
        final["unseen_reads_during_training"] = unseen.reads
        held_out = data_for(unseen)
        final["unseen_acc"] = evaluate(state.model, held_out)
        final["naive_unseen_acc"] = evaluate_naive(state.model, held_out)
    return TrainResult(state.model, state.history, final, run_dir)


def data_for(guarded: GuardedDomain) -> LabeledDomain:
    return LabeledDomain(guarded.name, guarded.images, guarded.labels)


def train_msda(cfg: RunConfig, **kwargs) -> TrainResult:
    if cfg.mode is not Mode.MSDA:
        raise ValueError(f"train_msda called with mode={cfg.mode.value}")
    return train(cfg, **kwargs)


def train_dg(cfg: RunConfig, **kwargs) -> TrainResult:
    if cfg.mode is not Mode.DG:
        raise ValueError(f"train_dg called with mode={cfg.mode.value}")
    return train(cfg, **kwargs)


# ---------------------------------------------------------------------------
# precomputed-embedding mode: only G and the gains are trained


@torch.no_grad()
def encode_domains(model: MutualPromptModel, domains: list[tuple[str, np.ndarray, np.ndarray]]) -> EmbeddingSet:
    """Encode ``(name, images, labels)`` triples; pass labels of -1 for unlabeled data."""
    texts = model.encode_texts()
    vs, vts, ys, ds = [], [], [], []
    for i, (name, images, labels) in enumerate(domains):
        enc = model.encode_images(to_tensor(images))
        vs.append(enc.v.numpy())
        vts.append(enc.v_tilde.numpy())
        ys.append(np.asarray(labels, dtype=np.int64))
        ds.append(np.full(len(labels), i, dtype=np.int64))
    return EmbeddingSet(
        v=np.concatenate(vs),
        v_tilde=np.concatenate(vts),
        s=texts.s.numpy(),
        s_tilde=texts.s_tilde.numpy(),
        labels=np.concatenate(ys),
        domain=np.concatenate(ds),
        domain_names=[d[0] for d in domains],
    )


def train_on_embeddings(
    emb: EmbeddingSet,
    cfg: RunConfig,
    prompter: MutualPrompter | None = None,
) -> tuple[MutualPrompter, list[dict]]:
    """Train only ``G`` and the gains on fixed encoder outputs.

    Text contexts are frozen because there is no text encoder to backpropagate
    through. Labeled records get cross-entropy; unlabeled records get the
    confidence-gated self-labels, information maximization, and every domain
    gets the contrastive term.
    """
    torch.set_num_threads(1)
    dims = emb.dims
    prompter = prompter or MutualPrompter(dims["D"], cfg.prompter, seed=cfg.seed)
    opt = Adam(
        {n: p for n, p in prompter.named_parameters() if p.requires_grad},
        cfg.learning_rate,
        cfg.adam_betas,
        cfg.adam_eps,
    )
    rng = np.random.default_rng([cfg.seed, 777])
    texts = EncodedText(torch.from_numpy(emb.s), torch.from_numpy(emb.s_tilde))
    v_all, vt_all = torch.from_numpy(emb.v), torch.from_numpy(emb.v_tilde)
    domains = np.unique(emb.domain)
    by_domain = {int(d): np.flatnonzero(emb.domain == d) for d in domains}
    steps = max(1, math.ceil(min(len(ix) for ix in by_domain.values()) / cfg.batch_size))
    history = []
    for epoch in range(cfg.epochs):
        opt.lr = cosine_lr(cfg.learning_rate, epoch, cfg.epochs)
        plans = {d: _epoch_indices(rng, len(ix), cfg.batch_size, steps) for d, ix in by_domain.items()}
        total = 0.0
        for i in range(steps):
            opt.zero_grad()
            loss = v_all.new_zeros(())
            for d, ix in by_domain.items():
                sel = torch.as_tensor(ix[plans[d][i]])
                img = EncodedImage(v_all[sel], vt_all[sel], v_all.new_zeros(0), v_all.new_zeros(0))
                pair = prompter.prompt_pair(img, texts)
                lp = L.classify_log(pair, cfg.tau)
                y = torch.as_tensor(emb.labels[sel.numpy()])
                if bool((y >= 0).all()):
                    loss = loss + L.cross_entropy(lp, y)
                else:
                    pseudo = lp.detach().argmax(-1)
                    loss = loss + L.l_sup_target(lp, pseudo, cfg.threshold)
                    if cfg.use_im:
                        loss = loss + cfg.lambda_i * L.l_im(lp)
                if cfg.use_idc:
                    loss = loss + cfg.lambda_c * L.l_idc(pair, cfg.tau)
            loss.backward()
            opt.step()
            total += float(loss.detach())
        history.append({"epoch": epoch + 1, "loss": total / steps, "lr": opt.lr})
    return prompter, history
