"""Two-stage training: language adaptation, then vision and projection
tuning against the composite language-modeling plus contrastive objective.

Stage 1 trains exactly the lm.* tensors on text-only QA records. Stage 2
freezes them and trains everything else on full multimodal records; it
opens with a supervision phase that fits the depth and segmentation
decoders to rendered ground truth (the stand-in for fine-tuning pretrained
perception backbones before fusion training), then optimizes
lm_loss + lambda_clip * InfoNCE. All shuffling and dropout derive from the
config seed, so loss logs are bit-reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from . import vocab as V
from .errors import ConfigurationError, ContractError, NumericError
from .fusion import answer_loss, lm_forward
from .metrics import normalize
from .model import SPATIAL_NEEDS, Model
from .nn import ExecContext, ModelParams
from .scenegen import Sample, triples_to_text
from .spatial import depth_loss, seg_loss
from .tensor import Tensor
from .vocab import Vocabulary


@dataclass
class TrainConfig:
    stage: int = 1
    lr_lm: float = 3e-3
    lr_vision: float = 3e-3
    lr_pretrained_vision: float = 5e-4
    batch_size: int = 8
    epochs: int = 10
    warmup_steps: int = 10
    schedule: str = "cosine"
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.01
    dropout: float = 0.1
    lambda_clip: float = 0.1
    tau: float = 0.07
    seed: int = 0
    vfm_epochs: int = 3       # stage-2 depth/seg supervision phase
    qa_per_sample: int = 2    # stage-2 QA records drawn per sample (0 = all)
    max_records: int = 0      # cap on record count (0 = all)
    sgg_max_triples: int = 24  # training-target truncation; gold stays full

    def __post_init__(self):
        if self.stage not in (1, 2):
            raise ConfigurationError(f"stage must be 1 or 2, got {self.stage}")
        for name in ("lr_lm", "lr_vision", "lr_pretrained_vision", "tau"):
            if getattr(self, name) <= 0:
                raise ConfigurationError(f"{name} must be positive")
        if self.lambda_clip < 0 or self.batch_size < 1 or self.epochs < 0:
            raise ConfigurationError("invalid lambda_clip, batch_size or epochs")
        if self.schedule != "cosine":
            raise ConfigurationError(f"unknown schedule {self.schedule!r}")


@dataclass
class TrainRecord:
    stage: int
    task: str                  # "qa" | "sgg"
    sample_index: int | None   # into TrainData.samples; None for stage 1
    prompt_ids: list[int]
    answer_ids: list[int]      # raw answer tokens, BOS/EOS added at assembly


@dataclass
class TrainData:
    stage: int
    records: list[TrainRecord]
    samples: list[Sample]
    vocab_size: int


def qa_prompt_ids(vocab: Vocabulary, question: str) -> list[int]:
    return vocab.encode(" ".join(normalize(question)))


def make_stage1_records(samples: list[Sample], vocab: Vocabulary,
                        limit: int = 0, include_sgg: bool = True,
                        sgg_max_triples: int = 24) -> TrainData:
    """Text-only instruction records: QA pairs plus, by default, one
    scene-graph serialization record per scene. The frozen stage-2 LM can
    only emit triple grammar it has already seen here; one record per scene
    (views share triples) teaches the grammar without flooding the corpus
    with sequences whose content is unpredictable from text alone."""
    records = []
    seen_scenes: set[int] = set()
    for s in samples:
        for question, answers in s.qa:
            records.append(TrainRecord(
                stage=1, task="qa", sample_index=None,
                prompt_ids=qa_prompt_ids(vocab, question),
                answer_ids=vocab.encode(answers[0]),
            ))
        if include_sgg and s.scene_id not in seen_scenes:
            seen_scenes.add(s.scene_id)
            target = s.triples[:sgg_max_triples] if sgg_max_triples else s.triples
            records.append(TrainRecord(
                stage=1, task="sgg", sample_index=None,
                prompt_ids=[V.SGG_TASK],
                answer_ids=vocab.encode(triples_to_text(target)),
            ))
    if limit:
        records = records[:limit]
    return TrainData(stage=1, records=records, samples=[], vocab_size=len(vocab))


def make_stage2_records(samples: list[Sample], vocab: Vocabulary,
                        qa_per_sample: int, seed: int,
                        limit: int = 0, sgg_max_triples: int = 24) -> TrainData:
    rng = np.random.default_rng(np.random.SeedSequence([0x2EC02D, seed]))
    records = []
    for idx, s in enumerate(samples):
        qa = list(s.qa)
        if qa_per_sample and len(qa) > qa_per_sample:
            picks = sorted(rng.choice(len(qa), size=qa_per_sample, replace=False))
            qa = [qa[i] for i in picks]
        for question, answers in qa:
            records.append(TrainRecord(
                stage=2, task="qa", sample_index=idx,
                prompt_ids=qa_prompt_ids(vocab, question),
                answer_ids=vocab.encode(answers[0]),
            ))
        # Dense scenes produce long serializations; the training target keeps
        # the first triples in canonical order, evaluation gold stays full.
        target = s.triples[:sgg_max_triples] if sgg_max_triples else s.triples
        records.append(TrainRecord(
            stage=2, task="sgg", sample_index=idx,
            prompt_ids=[V.SGG_TASK],
            answer_ids=vocab.encode(triples_to_text(target)),
        ))
    if limit:
        records = records[:limit]
    return TrainData(stage=2, records=records, samples=list(samples),
                     vocab_size=len(vocab))


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def contrastive_loss(v: Tensor, t: Tensor, tau: float) -> Tensor:
    """One-directional (image to text) InfoNCE over cosine similarities.

    loss = -(1/N) sum_i log( exp(sim(v_i,t_i)/tau) / sum_j exp(sim(v_i,t_j)/tau) )
    """
    if v.ndim != 2 or t.ndim != 2 or v.shape != t.shape:
        raise ContractError(f"contrastive_loss needs matching [N, D], got "
                            f"{v.shape} and {t.shape}")
    n = v.shape[0]
    if n < 1:
        raise ContractError("contrastive_loss needs at least one pair")
    for name, x in (("image", v), ("text", t)):
        norms = np.linalg.norm(x.data, axis=1)
        if (norms == 0.0).any():
            raise NumericError(f"zero-norm {name} feature: cosine undefined")
    vn = v / T.reshape(T.sqrt(T.sum_(v * v, axis=1)), (n, 1))
    tn = t / T.reshape(T.sqrt(T.sum_(t * t, axis=1)), (n, 1))
    sims = T.matmul(vn, T.transpose(tn, (1, 0))) * (1.0 / tau)
    lse = T.logsumexp(sims, axis=-1)
    diag = T.take_flat(sims, np.arange(n) * n + np.arange(n))
    return T.mean(lse - diag)


def stage2_loss(lm_loss, contrast, lambda_clip: float):
    """Composite stage-2 objective: lm_loss + lambda_clip * contrast."""
    return lm_loss + lambda_clip * contrast


def lr_at_step(step: int, total_steps: int, cfg: TrainConfig,
               base: float) -> float:
    """Linear warmup to the base rate, then cosine decay to zero."""
    if total_steps <= 0:
        raise ConfigurationError("total_steps must be positive")
    if cfg.warmup_steps >= total_steps:
        raise ConfigurationError("warmup_steps must be smaller than total_steps")
    if not 0 <= step <= total_steps:
        raise ContractError(f"step {step} outside [0, {total_steps}]")
    warmup = cfg.warmup_steps
    if warmup > 0 and step < warmup:
        return base * step / warmup
    progress = (step - warmup) / (total_steps - warmup)
    return base * 0.5 * (1.0 + np.cos(np.pi * progress))


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------


@dataclass
class AdamWState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def optimizer_step(params: ModelParams, state: AdamWState, cfg: TrainConfig,
                   rate_for) -> None:
    """Decoupled-weight-decay adaptive-moment update with bias correction.

    rate_for maps a tensor name to its learning rate (already scheduled).
    Frozen tensors are untouched bit-exactly. Any non-finite gradient
    aborts the whole step before any tensor is modified."""
    trainable = [name for name, flag in params.trainable.items() if flag]
    for name in trainable:
        g = params[name].grad
        if g is not None and not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient in tensor {name!r}")
    state.t += 1
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for name in trainable:
        tensor = params[name]
        g = tensor.grad if tensor.grad is not None else np.zeros_like(tensor.data)
        if name not in state.m:
            state.m[name] = np.zeros_like(tensor.data)
            state.v[name] = np.zeros_like(tensor.data)
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        lr = rate_for(name)
        update = (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)
        tensor.data -= lr * (update + cfg.weight_decay * tensor.data)


def stage_mask(params: ModelParams, stage: int) -> dict[str, bool]:
    """Stage 1 trains exactly the lm.* tensors; stage 2 trains everything
    else (vision, projections, the fusion positional table)."""
    if stage not in (1, 2):
        raise ContractError(f"stage must be 1 or 2, got {stage}")
    return {name: name.startswith("lm.") == (stage == 1)
            for name in params.names()}


def apply_stage_mask(params: ModelParams, stage: int) -> None:
    params.trainable = stage_mask(params, stage)


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


@dataclass
class LossRow:
    step: int
    stage: str
    lm_loss: float
    contrast_loss: float
    total: float
    lr: float

    def format(self) -> str:
        return (f"{self.step}\t{self.stage}\t{self.lm_loss:.17g}\t"
                f"{self.contrast_loss:.17g}\t{self.total:.17g}\t{self.lr:.17g}")


@dataclass
class TrainResult:
    rows: list[LossRow]
    epoch_means: list[float]       # main-phase epochs
    vfm_epoch_means: list[float]


def _pad_stack(seqs: list[Tensor],
               positions: list[np.ndarray]) -> tuple[Tensor, np.ndarray]:
    """Stack variable-length [S_i, d] sequences into [B, S_max, d] with zero
    rows at the tail; causal attention keeps real positions unaffected.
    Positional slots are padded with 0 (the pad rows never enter a loss)."""
    s_max = max(s.shape[0] for s in seqs)
    padded, pos_rows = [], []
    for s, pos in zip(seqs, positions):
        pad = s_max - s.shape[0]
        if pad:
            s = T.concat([s, T.constant(np.zeros((pad, s.shape[1])))], axis=0)
            pos = np.concatenate([pos, np.zeros(pad, dtype=np.int64)])
        padded.append(s)
        pos_rows.append(pos)
    return T.stack(padded, axis=0), np.stack(pos_rows)


def _answer_targets(prompt_len: int, answer_ids: list[int],
                    n_modality: int) -> tuple[np.ndarray, np.ndarray, int]:
    """Targets and mask for a sequence [modality, prompt, BOS, answer..., EOS].
    Positions BOS..last-answer-token predict answer tokens then EOS."""
    k = len(answer_ids)
    total = n_modality + prompt_len + k + 2
    targets = np.zeros(total, dtype=np.int64)
    mask = np.zeros(total, dtype=bool)
    bos_pos = n_modality + prompt_len
    for i, tok in enumerate(answer_ids):
        targets[bos_pos + i] = tok
        mask[bos_pos + i] = True
    targets[bos_pos + k] = V.EOS
    mask[bos_pos + k] = True
    return targets, mask, total


def _batch_stage1(model: Model, records: list[TrainRecord],
                  ctx: ExecContext) -> Tensor:
    seqs, poss, metas = [], [], []
    for rec in records:
        answer_seg = [V.BOS] + rec.answer_ids + [V.EOS]
        seq = model.text_sequence(rec.prompt_ids, answer_seg)
        targets, mask, total = _answer_targets(len(rec.prompt_ids),
                                               rec.answer_ids, 0)
        seqs.append(seq.tokens)
        poss.append(seq.positions)
        metas.append((targets, mask, total))
    tokens, positions = _pad_stack(seqs, poss)
    logits = lm_forward(tokens, model.params, model.cfg.fusion, ctx,
                        positions=positions)
    losses = []
    for b, (targets, mask, total) in enumerate(metas):
        rec_logits = T.slice_(logits, (b, slice(0, total)))
        losses.append(answer_loss(rec_logits, targets, mask))
    return T.mean(T.stack(losses, axis=0))


def _batch_stage2(model: Model, data: TrainData, records: list[TrainRecord],
                  cfg: TrainConfig, ctx: ExecContext) -> tuple[Tensor, Tensor]:
    batch_samples = [data.samples[rec.sample_index] for rec in records]
    bundles = model.modality_tokens_batch(batch_samples, ctx)
    seqs, poss, metas, v_feats, prompt_starts = [], [], [], [], []
    for rec, sample, bundle in zip(records, batch_samples, bundles):
        answer_seg = [V.BOS] + rec.answer_ids + [V.EOS]
        seq = model.assemble(sample, rec.prompt_ids, answer_seg, ctx, bundle)
        n_modality = seq.segment_start("prompt")
        targets, mask, total = _answer_targets(len(rec.prompt_ids),
                                               rec.answer_ids, n_modality)
        seqs.append(seq.tokens)
        poss.append(seq.positions)
        metas.append((targets, mask, total))
        v_feats.append(model.contrastive_features(bundle))
        prompt_starts.append(n_modality)
    tokens, positions = _pad_stack(seqs, poss)
    logits, hidden = lm_forward(tokens, model.params, model.cfg.fusion,
                                ctx, return_hidden=True, positions=positions)
    losses, t_feats = [], []
    for b, (targets, mask, total) in enumerate(metas):
        rec_logits = T.slice_(logits, (b, slice(0, total)))
        losses.append(answer_loss(rec_logits, targets, mask))
        t_feats.append(T.slice_(hidden, (b, prompt_starts[b])))
    lm = T.mean(T.stack(losses, axis=0))
    contrast = contrastive_loss(T.stack(v_feats, axis=0),
                                T.stack(t_feats, axis=0), cfg.tau)
    return lm, contrast


def _vfm_batch_loss(model: Model, samples: list[Sample],
                    ctx: ExecContext) -> Tensor:
    needs_depth, needs_seg, _, _ = SPATIAL_NEEDS[model.cfg.variant]
    rgb = np.stack([s.rgb for s in samples])
    _, grid = model.spatial_grid(rgb, ctx)
    parts = []
    if needs_depth:
        gt_depth = np.stack([s.depth for s in samples])
        parts.append(depth_loss(model.predict_depth(grid, ctx), gt_depth,
                                model.cfg.spatial))
    if needs_seg:
        gt_seg = np.stack([s.seg for s in samples])
        logits, _ = model.predict_seg(grid, ctx)
        parts.append(seg_loss(logits, gt_seg, model.cfg.spatial))
    total = parts[0]
    for p in parts[1:]:
        total = total + p
    return total


def train_stage(data: TrainData, model: Model, cfg: TrainConfig,
                log=None, on_epoch=None) -> TrainResult:
    """Runs one training stage to completion.

    Batch order, dropout and record subsampling are all functions of
    cfg.seed. `log` receives one LossRow per batch; `on_epoch` is called
    with the epoch index after each main-phase epoch."""
    if data.stage != cfg.stage:
        raise ContractError(
            f"dataset built for stage {data.stage}, config wants {cfg.stage}"
        )
    for rec in data.records:
        if rec.stage != cfg.stage:
            raise ContractError("record stage does not match config stage")
        if cfg.stage == 2 and rec.sample_index is None:
            raise ContractError("stage-2 records need multimodal samples")
    result = TrainResult(rows=[], epoch_means=[], vfm_epoch_means=[])
    if cfg.epochs == 0 or not data.records:
        return result

    apply_stage_mask(model.params, cfg.stage)
    rng_order = np.random.default_rng(np.random.SeedSequence([0x0D0E5, cfg.seed]))
    drop_rng = np.random.default_rng(np.random.SeedSequence([0xD0D0, cfg.seed]))
    ctx = ExecContext(train=True, dropout=cfg.dropout, rng=drop_rng)
    state = AdamWState()
    step = 0

    def emit(stage_label, lm_val, contrast_val, total_val, lr):
        row = LossRow(step=step, stage=stage_label, lm_loss=lm_val,
                      contrast_loss=contrast_val, total=total_val, lr=lr)
        result.rows.append(row)
        if log is not None:
            log(row)

    def batches_per_epoch(n):
        return (n + cfg.batch_size - 1) // cfg.batch_size

    def run_batches(items, loss_fn, epochs, stage_label, rate_fn, state):
        nonlocal step
        n = len(items)
        total_steps = epochs * batches_per_epoch(n)
        # Short phases clamp the warmup so the schedule precondition holds.
        phase_cfg = cfg
        if cfg.warmup_steps >= total_steps:
            phase_cfg = replace(cfg, warmup_steps=max(total_steps - 1, 0))
        local_step = 0
        epoch_means = []
        for epoch in range(epochs):
            order = rng_order.permutation(n)
            epoch_losses = []
            for lo in range(0, n, cfg.batch_size):
                batch = [items[i] for i in order[lo : lo + cfg.batch_size]]
                model.params.zero_grads()
                lm_val, contrast_val, total = loss_fn(batch)
                if not np.isfinite(total.data).all():
                    raise NumericError(f"non-finite loss at step {step + 1}")
                T.backward(total, model.params.tensors())
                scale = lr_at_step(local_step, total_steps, phase_cfg, 1.0)
                optimizer_step(model.params, state, cfg,
                               lambda name: scale * rate_fn(name))
                step += 1
                local_step += 1
                emit(stage_label, lm_val, contrast_val, float(total.data),
                     scale * rate_fn("lm." if cfg.stage == 1 else "proj."))
                epoch_losses.append(float(total.data))
            epoch_means.append(float(np.mean(epoch_losses)))
            if stage_label != "2vfm" and on_epoch is not None:
                on_epoch(epoch)
        return epoch_means

    if cfg.stage == 1:
        def loss1(batch):
            lm = _batch_stage1(model, batch, ctx)
            return float(lm.data), 0.0, lm

        result.epoch_means = run_batches(
            data.records, loss1, cfg.epochs, "1", lambda name: cfg.lr_lm, state
        )
        return result

    # Stage 2: a supervision phase fits the perception nets at the full
    # vision rate; the fusion phase then tunes projections at the full rate
    # while the now-pretrained spatial nets move only at the slower
    # pretrained-vision rate (large fusion-phase steps through the shared
    # encoder would otherwise destroy the fresh depth/seg decoders).
    needs_depth, needs_seg, _, _ = SPATIAL_NEEDS[model.cfg.variant]
    if cfg.vfm_epochs > 0 and (needs_depth or needs_seg):
        sample_idx = sorted({rec.sample_index for rec in data.records})
        vfm_items = [data.samples[i] for i in sample_idx]

        def loss_vfm(batch):
            total = _vfm_batch_loss(model, batch, ctx)
            return 0.0, 0.0, total

        result.vfm_epoch_means = run_batches(
            vfm_items, loss_vfm, cfg.vfm_epochs, "2vfm",
            lambda name: cfg.lr_vision, state
        )
        state = AdamWState()  # fresh moments for the fusion phase

    def fusion_rate(name: str) -> float:
        if name.startswith("spatial."):
            return cfg.lr_pretrained_vision
        return cfg.lr_vision

    def loss2(batch):
        lm, contrast = _batch_stage2(model, data, batch, cfg, ctx)
        total = stage2_loss(lm, contrast, cfg.lambda_clip)
        return float(lm.data), float(contrast.data), total

    result.epoch_means = run_batches(
        data.records, loss2, cfg.epochs, "2", fusion_rate, state
    )
    return result
