"""Stage orchestration: teacher pretraining, verbalization, interaction,
reinforcement, plus AdamW with cosine annealing, greedy evaluation, and
binary checkpoint persistence.

Determinism contract: given (config, seed) every stage reproduces loss
curves and final parameters bit-exactly on one machine. RNG streams are
split per stage and per purpose (data order, matching, init) so toggling
one stage's options does not perturb another's stream.
"""

from __future__ import annotations

import json
import math
from contextlib import contextmanager
from dataclasses import dataclass, field, asdict

import numpy as np

from . import numcore as nc
from .data import Example, TaskSpec, Tokenizer, generate_dataset, make_batch
from .distill import InteractionConfig, LayerDist, interaction_objective
from .model import LayerTapSet, ModelConfig, TransformerLM, parameter_hash
from .numcore import ConfigError, Tensor, masked_cross_entropy
from .verbalizer import Verbalizer, VerbalizerArch, build_verbalizers

STAGES = ("teacher", "verbalize", "interact", "reinforce", "all")
_STAGE_CODES = {"teacher": 1, "verbalize": 2, "interact": 3, "reinforce": 4, "eval": 5}
_DOMAIN_DATA, _DOMAIN_MATCH, _DOMAIN_INIT = 0, 1, 2


@dataclass
class RunConfig:
    stage: str = "all"
    steps: int = 1000
    batch_size: int = 8
    grad_accum: int = 16
    lr_max: float = 1e-4
    lr_min: float = 1e-6
    seed: int = 0
    rs_fraction: float = 1.0
    weight_decay: float = 0.01
    eval_every: int = 100
    em_threshold: float = 0.95

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ConfigError(f"stage must be one of {STAGES}")
        if self.steps < 1 or self.batch_size < 1 or self.grad_accum < 1:
            raise ConfigError("steps, batch_size and grad_accum must be >= 1")
        if self.lr_min > self.lr_max:
            raise ConfigError("lr_min must not exceed lr_max")
        if not 0.0 <= self.rs_fraction <= 1.0:
            raise ConfigError("rs_fraction must lie in [0, 1]")


def stage_rng(seed: int, stage: str, domain: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, _STAGE_CODES[stage], domain]))


# ----------------------------------------------------------------------
# optimizer and schedule


def cosine_lr(step: int, total_steps: int, lr_max: float, lr_min: float) -> float:
    if total_steps <= 0:
        raise ConfigError("cosine_lr: total_steps must be positive")
    if not 0 <= step <= total_steps:
        raise ConfigError(f"cosine_lr: step {step} outside [0, {total_steps}]")
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * step / total_steps))


@dataclass
class AdamWState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0


def adamw_init(params: dict[str, Tensor]) -> AdamWState:
    return AdamWState(
        m={k: np.zeros_like(p.data) for k, p in params.items()},
        v={k: np.zeros_like(p.data) for k, p in params.items()},
    )


def adamw_step(
    params: dict[str, Tensor],
    grads: dict[str, np.ndarray],
    state: AdamWState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    weight_decay: float = 0.01,
) -> AdamWState:
    """Decoupled-weight-decay update, in place on the param tensors."""
    state.t += 1
    bc1 = 1.0 - beta1 ** state.t
    bc2 = 1.0 - beta2 ** state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise nc.ShapeError(f"adamw_step: grad {g.shape} vs param {p.data.shape} for {name}")
        m = state.m[name]
        v = state.v[name]
        m[...] = beta1 * m + (1.0 - beta1) * g
        v[...] = beta2 * v + (1.0 - beta2) * (g * g)
        step = (m / bc1) / (np.sqrt(v / bc2) + eps)
        p.data -= (lr * (step + weight_decay * p.data)).astype(p.data.dtype)
    return state


# ----------------------------------------------------------------------
# checkpoint persistence

_MAGIC = b"LKDCKPT1"
_DTYPES = {"<f4": np.dtype("<f4"), "<f8": np.dtype("<f8")}


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    metadata: dict = field(default_factory=dict)

    def save(self, path):
        entries = []
        for name, arr in self.tensors.items():
            code = "<f4" if arr.dtype == np.float32 else "<f8"
            entries.append({"name": name, "dtype": code, "shape": list(arr.shape)})
        header = json.dumps({"meta": self.metadata, "tensors": entries})
        with open(path, "wb") as f:
            f.write(_MAGIC)
            f.write(header.encode("utf-8"))
            f.write(b"\n")
            for name, arr in self.tensors.items():
                f.write(np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes())

    @classmethod
    def load(cls, path) -> "Checkpoint":
        with open(path, "rb") as f:
            blob = f.read()
        if not blob.startswith(_MAGIC):
            raise ConfigError(f"{path}: not a checkpoint file")
        nl = blob.index(b"\n", len(_MAGIC))
        header = json.loads(blob[len(_MAGIC) : nl].decode("utf-8"))
        tensors = {}
        offset = nl + 1
        for e in header["tensors"]:
            dt = _DTYPES[e["dtype"]]
            count = int(np.prod(e["shape"])) if e["shape"] else 1
            raw = blob[offset : offset + count * dt.itemsize]
            offset += count * dt.itemsize
            tensors[e["name"]] = np.frombuffer(raw, dtype=dt).reshape(e["shape"]).copy()
        return cls(tensors=tensors, metadata=header["meta"])


def bundle_checkpoint(model: TransformerLM, verbalizers=None, metadata=None) -> Checkpoint:
    tensors = {f"model.{k}": t.data for k, t in model.params.items()}
    meta = dict(metadata or {})
    meta["model_config"] = asdict(model.config)
    if verbalizers:
        meta["verb_arch"] = verbalizers[0].arch.variant
        meta["n_verbalizers"] = len(verbalizers)
        for i, v in enumerate(verbalizers):
            for k, t in v.params.items():
                tensors[f"verb.{i}.{k}"] = t.data
    return Checkpoint(tensors=tensors, metadata=meta)


def restore_bundle(ckpt: Checkpoint) -> tuple[TransformerLM, list[Verbalizer] | None]:
    cfg = ModelConfig(**ckpt.metadata["model_config"])
    model = TransformerLM(cfg, seed=0)
    for k, t in model.params.items():
        t.data = ckpt.tensors[f"model.{k}"].astype(t.data.dtype, copy=True)
    verbalizers = None
    if "verb_arch" in ckpt.metadata:
        arch = VerbalizerArch(ckpt.metadata["verb_arch"])
        verbalizers = [Verbalizer(arch, model, seed=i) for i in range(ckpt.metadata["n_verbalizers"])]
        for i, v in enumerate(verbalizers):
            for k, t in v.params.items():
                t.data = ckpt.tensors[f"verb.{i}.{k}"].astype(t.data.dtype, copy=True)
    return model, verbalizers


# ----------------------------------------------------------------------
# shared training loop


@contextmanager
def frozen(*param_dicts):
    saved = []
    for params in param_dicts:
        for t in params.values():
            saved.append((t, t.requires_grad))
            t.requires_grad = False
    try:
        yield
    finally:
        for t, flag in saved:
            t.requires_grad = flag


def _batches(examples: list[Example], batch_size: int, rng: np.random.Generator):
    n = len(examples)
    size = min(batch_size, n)
    while True:
        order = rng.permutation(n)
        for i in range(0, n - size + 1, size):
            yield [examples[j] for j in order[i : i + size]]


def _train_loop(
    stage: str,
    trainable: dict[str, Tensor],
    batch_loss,
    train_data: list[Example],
    run: RunConfig,
    steps: int,
    rng_data: np.random.Generator,
    on_update=None,
) -> list[dict]:
    """Micro-step loop with gradient accumulation and cosine-annealed AdamW.

    batch_loss(batch) -> (Tensor loss, extra log fields). One optimizer
    update fires every grad_accum micro steps, so each update aggregates
    batch_size * grad_accum examples.
    """
    opt = adamw_init(trainable)
    total_updates = max(1, math.ceil(steps / run.grad_accum))
    history = []
    batches = _batches(train_data, run.batch_size, rng_data)
    micro = 0
    update = 0
    stop = False
    for step in range(steps):
        batch = next(batches)
        loss, extra = batch_loss(batch)
        if isinstance(loss, Tensor):
            loss.backward()
            loss_value = loss.item()
        else:
            loss_value = float(loss)
        micro += 1
        lr = cosine_lr(update, total_updates, run.lr_max, run.lr_min)
        record = {"stage": stage, "step": step, "loss": loss_value, "lr": lr}
        record.update(extra)
        history.append(record)
        if micro == run.grad_accum or step == steps - 1:
            grads = {
                k: (p.grad / micro if p.grad is not None else np.zeros_like(p.data))
                for k, p in trainable.items()
            }
            adamw_step(trainable, grads, opt, lr, weight_decay=run.weight_decay)
            for p in trainable.values():
                p.grad = None
            update += 1
            micro = 0
            if on_update is not None and on_update(update):
                stop = True
        if stop:
            break
    history.append(
        {
            "stage": stage,
            "summary": True,
            "updates": update,
            "examples_per_update": run.batch_size * run.grad_accum,
        }
    )
    return history


# ----------------------------------------------------------------------
# evaluation


@dataclass
class EvalResult:
    exact_match: float
    n: int
    per_layer: dict | None = None


def greedy_decode(model: TransformerLM, prompts: list[list[int]], max_new: int, eos_id: int,
                  verbalizer: Verbalizer | None = None, taps: LayerTapSet | None = None,
                  tap_pos: int = 0, batch_size: int = 64) -> list[list[int]]:
    """Greedy continuation of each prompt (full recompute per step).

    With a verbalizer, next-token logits come from that tap's verbalized
    view instead of the backbone head. Batches are grouped by prompt length
    so results are invariant to batch size.
    """
    results: list[list[int] | None] = [None] * len(prompts)
    by_len: dict[int, list[int]] = {}
    for i, p in enumerate(prompts):
        by_len.setdefault(len(p), []).append(i)
    with frozen(model.params, verbalizer.params if verbalizer is not None else {}):
        for plen, idxs in sorted(by_len.items()):
            for start in range(0, len(idxs), batch_size):
                chunk = idxs[start : start + batch_size]
                arr = np.array([prompts[i] for i in chunk], dtype=np.int64)
                done = np.zeros(len(chunk), dtype=bool)
                for _ in range(max_new):
                    out = model.forward(arr, taps=taps)
                    if verbalizer is not None:
                        logits = verbalizer.verbalize(out.tapped_hidden[tap_pos]).data
                    else:
                        logits = out.final_logits.data
                    nxt = logits[:, -1, :].argmax(axis=-1)
                    arr = np.concatenate([arr, nxt[:, None]], axis=1)
                    done |= nxt == eos_id
                    if done.all():
                        break
                for row, i in enumerate(chunk):
                    gen = arr[row, plen:].tolist()
                    if eos_id in gen:
                        gen = gen[: gen.index(eos_id) + 1]
                    results[i] = gen
    return [r for r in results]  # type: ignore[return-value]


def evaluate(
    model: TransformerLM,
    examples: list[Example],
    tok: Tokenizer,
    verbalizers: list[Verbalizer] | None = None,
    taps: LayerTapSet | None = None,
    batch_size: int = 64,
) -> EvalResult:
    """Exact-match of greedy decodes against gold responses; optionally the
    same metric through every tap's verbalizer."""
    prompts = [[tok.bos_id] + ex.prompt_tokens for ex in examples]
    golds = [ex.response_tokens for ex in examples]
    max_new = max(len(g) for g in golds) + 1

    def em(decodes):
        return float(np.mean([d == g for d, g in zip(decodes, golds)]))

    score = em(greedy_decode(model, prompts, max_new, tok.eos_id, batch_size=batch_size))
    per_layer = None
    if verbalizers is not None:
        if taps is None or len(taps) != len(verbalizers):
            raise ConfigError("per-layer evaluation needs a tap set matching the verbalizers")
        per_layer = {}
        for pos, tap in enumerate(taps.indices):
            decs = greedy_decode(
                model, prompts, max_new, tok.eos_id,
                verbalizer=verbalizers[pos], taps=taps, tap_pos=pos, batch_size=batch_size,
            )
            per_layer[tap] = em(decs)
    return EvalResult(exact_match=score, n=len(examples), per_layer=per_layer)


# ----------------------------------------------------------------------
# stages


def pretrain_teacher(
    model: TransformerLM, splits: dict[str, list[Example]], run: RunConfig, tok: Tokenizer
) -> tuple[list[dict], float]:
    """Autoregressive training on response tokens until the held-out
    exact-match gate (run.em_threshold) or the step budget is exhausted."""
    if not splits.get("train"):
        raise ConfigError("pretrain_teacher: no training data")
    model.set_trainable(True)
    rng_data = stage_rng(run.seed, "teacher", _DOMAIN_DATA)
    state = {"em": 0.0}

    def batch_loss(batch):
        inputs, targets, mask = make_batch(batch, tok)
        out = model.forward(inputs)
        return masked_cross_entropy(out.final_logits, targets, mask), {}

    def gate(update):
        if update % run.eval_every != 0:
            return False
        state["em"] = evaluate(model, splits["dev"], tok).exact_match
        return state["em"] >= run.em_threshold

    history = _train_loop("teacher", model.params, batch_loss, splits["train"], run, run.steps, rng_data, on_update=gate)
    if state["em"] < run.em_threshold:
        state["em"] = evaluate(model, splits["dev"], tok).exact_match
    history[-1]["dev_exact_match"] = state["em"]
    return history, state["em"]


def verbalization_step(
    backbone: TransformerLM,
    verbalizers: list[Verbalizer],
    taps: LayerTapSet,
    splits: dict[str, list[Example]],
    run: RunConfig,
    tok: Tokenizer,
    steps: int | None = None,
) -> list[dict]:
    """Train each verbalizer with masked cross entropy on response tokens.

    The backbone is frozen for the whole stage; verbalizer parameter sets
    are disjoint, so their gradient updates remain independent even though
    one loop sums the per-tap losses.
    """
    if len(verbalizers) != len(taps):
        raise ConfigError(f"{len(taps)} taps but {len(verbalizers)} verbalizers")
    steps = run.steps if steps is None else steps
    backbone.set_trainable(False)
    for v in verbalizers:
        v.set_trainable(True)
    trainable = {f"v{i}.{k}": t for i, v in enumerate(verbalizers) for k, t in v.params.items()}
    rng_data = stage_rng(run.seed, "verbalize", _DOMAIN_DATA)

    def batch_loss(batch):
        inputs, targets, mask = make_batch(batch, tok)
        out = backbone.forward(inputs, taps=taps)
        total = None
        per_tap = []
        for pos, v in enumerate(verbalizers):
            ce = masked_cross_entropy(v.verbalize(out.tapped_hidden[pos]), targets, mask)
            per_tap.append(ce.item())
            total = ce if total is None else total + ce
        return total, {"loss_per_tap": per_tap}

    return _train_loop("verbalize", trainable, batch_loss, splits["train"], run, steps, rng_data)


def interaction_step(
    teacher: TransformerLM,
    teacher_verbs: list[Verbalizer],
    teacher_taps: LayerTapSet,
    student: TransformerLM,
    student_verbs: list[Verbalizer],
    student_taps: LayerTapSet,
    icfg: InteractionConfig,
    splits: dict[str, list[Example]],
    run: RunConfig,
    tok: Tokenizer,
    steps: int | None = None,
) -> list[dict]:
    """Distill the frozen teacher into the student by minimizing the
    configured interaction objective; one matching is sampled per micro
    batch and logged."""
    if teacher.config.vocab_size != student.config.vocab_size:
        raise ConfigError(
            "tokenizer mismatch between teacher and student "
            f"({teacher.config.vocab_size} vs {student.config.vocab_size} ids)"
        )
    if icfg.t_s != len(student_taps) or icfg.t_l != len(teacher_taps):
        raise ConfigError("InteractionConfig t_s/t_l must match the tap sets")
    if icfg.il_op == "l2" and teacher.config.d_model != student.config.d_model:
        raise nc.ShapeError("L2 mode requires equal hidden width")
    steps = run.steps if steps is None else steps
    teacher.set_trainable(False)
    for v in teacher_verbs:
        v.set_trainable(False)
    student.set_trainable(True)
    for v in student_verbs:
        v.set_trainable(icfg.train_student_verbalizers)
    trainable = dict(student.params)
    if icfg.train_student_verbalizers:
        for i, v in enumerate(student_verbs):
            trainable.update({f"sv{i}.{k}": t for k, t in v.params.items()})
    rng_data = stage_rng(run.seed, "interact", _DOMAIN_DATA)
    rng_match = stage_rng(run.seed, "interact", _DOMAIN_MATCH)
    need_feats = "l2" in (icfg.il_op, icfg.ll_op)

    def layer_views(out, verbs, mask):
        views = []
        for pos, v in enumerate(verbs):
            feats = v.transform(out.tapped_hidden[pos])
            logits = None if icfg.il_op == "l2" else v._backbone.apply_head(feats)
            views.append(LayerDist(logits=logits, features=feats, mask=mask))
        return views

    def batch_loss(batch):
        inputs, targets, mask = make_batch(batch, tok)
        t_out = teacher.forward(inputs, taps=teacher_taps)
        s_out = student.forward(inputs, taps=student_taps)
        student_dists = layer_views(s_out, student_verbs, mask) if icfg.il_op not in ("none",) else []
        teacher_dists = layer_views(t_out, teacher_verbs, mask) if icfg.il_op in ("kld", "l2") else []
        s_final = LayerDist(logits=s_out.final_logits, features=s_out.final_hidden if need_feats else None, mask=mask)
        t_final = LayerDist(logits=t_out.final_logits, features=t_out.final_hidden if need_feats else None, mask=mask)
        res = interaction_objective(
            student_dists, teacher_dists, s_final, t_final, targets, mask, icfg, rng_match
        )
        extra = {}
        if res.matched_indices is not None:
            extra["matched_indices"] = res.matched_indices
        return res.loss, extra

    return _train_loop("interact", trainable, batch_loss, splits["train"], run, steps, rng_data)


def reinforcement_step(
    student: TransformerLM,
    splits: dict[str, list[Example]],
    run: RunConfig,
    tok: Tokenizer,
    steps: int | None = None,
) -> list[dict]:
    """Supervised fine-tuning of the whole student (embeddings, attention,
    FFN and language head); rs_fraction scales the step budget down."""
    steps = run.steps if steps is None else steps
    effective = int(round(run.rs_fraction * steps))
    if effective == 0:
        return [{"stage": "reinforce", "summary": True, "updates": 0, "examples_per_update": 0}]
    student.set_trainable(True)
    rng_data = stage_rng(run.seed, "reinforce", _DOMAIN_DATA)

    def batch_loss(batch):
        inputs, targets, mask = make_batch(batch, tok)
        out = student.forward(inputs)
        return masked_cross_entropy(out.final_logits, targets, mask), {}

    return _train_loop("reinforce", student.params, batch_loss, splits["train"], run, effective, rng_data)


# ----------------------------------------------------------------------
# full pipeline


@dataclass
class PipelineConfig:
    teacher_cfg: ModelConfig
    student_cfg: ModelConfig
    teacher_taps: LayerTapSet
    student_taps: LayerTapSet
    arch: VerbalizerArch = field(default_factory=VerbalizerArch)
    icfg: InteractionConfig = None  # type: ignore[assignment]
    data_spec: TaskSpec = field(default_factory=TaskSpec)
    n_examples: int = 800
    teacher_steps: int = 5000
    verbalize_steps: int = 2000
    interact_steps: int = 3000
    reinforce_steps: int = 3000
    run: RunConfig = field(default_factory=RunConfig)

    def __post_init__(self):
        if self.icfg is None:
            self.icfg = InteractionConfig(t_s=len(self.student_taps), t_l=len(self.teacher_taps))


def run_pipeline(pcfg: PipelineConfig, stages=("teacher", "verbalize", "interact", "reinforce"),
                 splits=None, teacher=None, teacher_verbs=None, evaluate_on="test") -> dict:
    """Run the requested stages in order and evaluate after each model-changing
    one. A pretrained teacher (with verbalizers) can be passed in to share it
    across arms of an experiment."""
    tok = Tokenizer()
    if splits is None:
        splits = generate_dataset(pcfg.data_spec, pcfg.n_examples, seed=pcfg.run.seed)
    history: list[dict] = []
    evals: dict[str, EvalResult] = {}
    run = pcfg.run

    if teacher is None and ("teacher" in stages or "verbalize" in stages or "interact" in stages):
        teacher = TransformerLM(pcfg.teacher_cfg, seed=run.seed)
    if "teacher" in stages:
        h, em = pretrain_teacher(teacher, splits, RunConfig(**{**asdict(run), "steps": pcfg.teacher_steps}), tok)
        history += h
        evals["teacher"] = EvalResult(exact_match=em, n=len(splits["dev"]))

    student = None
    student_verbs = None
    if "verbalize" in stages or "interact" in stages:
        student = TransformerLM(pcfg.student_cfg, seed=run.seed + 1)
        if teacher_verbs is None:
            teacher_verbs = build_verbalizers(teacher, pcfg.teacher_taps, pcfg.arch, seed=run.seed)
            history += verbalization_step(
                teacher, teacher_verbs, pcfg.teacher_taps, splits, run, tok, steps=pcfg.verbalize_steps
            )
        student_verbs = build_verbalizers(student, pcfg.student_taps, pcfg.arch, seed=run.seed + 1)
        if "verbalize" in stages:
            history += verbalization_step(
                student, student_verbs, pcfg.student_taps, splits, run, tok, steps=pcfg.verbalize_steps
            )
    if "interact" in stages:
        history += interaction_step(
            teacher, teacher_verbs, pcfg.teacher_taps,
            student, student_verbs, pcfg.student_taps,
            pcfg.icfg, splits, run, tok, steps=pcfg.interact_steps,
        )
        evals["interact"] = evaluate(student, splits[evaluate_on], tok)
    if "reinforce" in stages:
        if student is None:
            student = TransformerLM(pcfg.student_cfg, seed=run.seed + 1)
        history += reinforcement_step(
            student, splits, RunConfig(**{**asdict(run), "steps": pcfg.reinforce_steps}), tok,
        )
        evals["reinforce"] = evaluate(student, splits[evaluate_on], tok)

    return {
        "tokenizer": tok,
        "splits": splits,
        "teacher": teacher,
        "teacher_verbs": teacher_verbs,
        "student": student,
        "student_verbs": student_verbs,
        "history": history,
        "evals": evals,
    }


def write_log(history: list[dict], path):
    with open(path, "w", encoding="utf-8") as f:
        for rec in history:
            f.write(json.dumps(rec) + "\n")


def read_log(path) -> list[dict]:
    with open(path, encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]
